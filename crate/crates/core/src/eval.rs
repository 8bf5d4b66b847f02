//! Filtered link-prediction evaluation, ranking metrics and encoder cost
//! accounting.

use std::collections::hash_map::Entry;
use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::{precompute_entity_reps, EntityRepCache, StarModel};
use crate::error::{Error, Result};
use crate::io::{ScoreBlock, ScoreMatrix};
use crate::kg::{Direction, EntityId, KnowledgeGraph, RelationId, Split, Triple};
use crate::scoring::{combine_basis, CrossEncoder, RankingBasis, RescaleContext};
use crate::tensor::{Matrix, Real};
use crate::tokenizer::{EncoderInput, TokenizedTexts};

/// Encoder calls and their summed squared sequence lengths, split between
/// Siamese (one branch per call) and cross-encoder calls. Safe to share
/// between threads.
#[derive(Debug, Default)]
pub struct CostCounter {
    siamese_calls: AtomicU64,
    siamese_sq: AtomicU64,
    cross_calls: AtomicU64,
    cross_sq: AtomicU64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostSnapshot {
    pub encoder_calls: u64,
    pub siamese_calls: u64,
    pub cross_calls: u64,
    /// Σ n² over Siamese calls.
    pub siamese_sq_len: u64,
    /// Σ n² over cross-encoder calls.
    pub cross_sq_len: u64,
}

impl CostCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record_siamese(&self, len: usize) {
        self.siamese_calls.fetch_add(1, Ordering::Relaxed);
        self.siamese_sq
            .fetch_add((len * len) as u64, Ordering::Relaxed);
    }

    pub fn record_cross(&self, len: usize) {
        self.cross_calls.fetch_add(1, Ordering::Relaxed);
        self.cross_sq
            .fetch_add((len * len) as u64, Ordering::Relaxed);
    }

    pub fn encoder_calls(&self) -> u64 {
        self.snapshot().encoder_calls
    }

    pub fn snapshot(&self) -> CostSnapshot {
        let s = self.siamese_calls.load(Ordering::Relaxed);
        let c = self.cross_calls.load(Ordering::Relaxed);
        CostSnapshot {
            encoder_calls: s + c,
            siamese_calls: s,
            cross_calls: c,
            siamese_sq_len: self.siamese_sq.load(Ordering::Relaxed),
            cross_sq_len: self.cross_sq.load(Ordering::Relaxed),
        }
    }
}

/// One link-prediction query: rank every entity for the `direction` slot of
/// `triple`, whose true occupant is the gold.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankingQuery {
    pub index: usize,
    pub triple: Triple,
    pub direction: Direction,
}

impl RankingQuery {
    pub fn gold(&self) -> EntityId {
        self.triple.target(self.direction)
    }

    pub fn fixed(&self) -> EntityId {
        self.triple.fixed(self.direction)
    }
}

/// Queries for `triples` in order, one per requested direction.
pub fn build_queries(triples: &[Triple], directions: &[Direction]) -> Vec<RankingQuery> {
    triples
        .iter()
        .flat_map(|t| directions.iter().map(move |&d| (*t, d)))
        .enumerate()
        .map(|(index, (triple, direction))| RankingQuery {
            index,
            triple,
            direction,
        })
        .collect()
}

/// All entities except other known-true completions; with `self_loop_filter`
/// the query's fixed entity is dropped too. The gold always stays.
pub fn filtered_candidates(
    kg: &KnowledgeGraph,
    query: &RankingQuery,
    self_loop_filter: bool,
) -> Vec<EntityId> {
    let gold = query.gold();
    let fixed = query.fixed();
    let truth = kg.true_targets(fixed, query.triple.rel, query.direction);
    kg.entity_ids()
        .filter(|&e| {
            e == gold
                || !(truth.is_some_and(|s| s.contains(&e)) || (self_loop_filter && e == fixed))
        })
        .collect()
}

/// Rank of `keys[gold]` under the random tie protocol: one plus the number of
/// strictly greater keys plus a uniform offset within the gold's tie block.
/// Keys that compare as unordered (NaN) never count as greater.
pub fn rank_of<K: PartialOrd, R: Rng + ?Sized>(keys: &[K], gold: usize, rng: &mut R) -> usize {
    let g = &keys[gold];
    let mut greater = 0;
    let mut ties = 0;
    for k in keys {
        if k > g {
            greater += 1;
        } else if k == g {
            ties += 1;
        }
    }
    // the gold ties with itself unless its key is NaN
    let ties = ties.max(1);
    // floor(u * ties) keeps the rank monotone in the candidate set for a fixed draw
    let u: f64 = rng.gen();
    1 + greater + ((u * ties as f64) as usize).min(ties - 1)
}

/// [`rank_of`] for the gold entity within a candidate list.
pub fn rank_gold<R: Rng + ?Sized>(
    candidates: &[EntityId],
    scores: &[f64],
    gold: EntityId,
    rng: &mut R,
) -> Result<usize> {
    let pos = candidates
        .iter()
        .position(|&c| c == gold)
        .ok_or(Error::GoldNotCandidate(gold.0))?;
    Ok(rank_of(scores, pos, rng))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RankStats {
    pub queries: usize,
    pub mr: f64,
    pub mrr: f64,
    pub hits_at_1: f64,
    pub hits_at_3: f64,
    pub hits_at_10: f64,
}

pub fn metrics_from_ranks(ranks: &[usize]) -> RankStats {
    if ranks.is_empty() {
        return RankStats::default();
    }
    let n = ranks.len() as f64;
    let hits = |k: usize| ranks.iter().filter(|&&r| r <= k).count() as f64 / n;
    RankStats {
        queries: ranks.len(),
        mr: ranks.iter().map(|&r| r as f64).sum::<f64>() / n,
        mrr: ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / n,
        hits_at_1: hits(1),
        hits_at_3: hits(3),
        hits_at_10: hits(10),
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(flatten)]
    pub overall: RankStats,
    pub per_direction: BTreeMap<String, RankStats>,
    /// Keyed by relation surface key; only relations with queries appear.
    pub per_relation: BTreeMap<String, RankStats>,
    pub cost: CostSnapshot,
}

impl MetricsReport {
    pub fn from_records(kg: &KnowledgeGraph, records: &[RankRecord], cost: CostSnapshot) -> Self {
        let ranks: Vec<usize> = records.iter().map(|r| r.rank).collect();
        let mut by_dir: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        let mut by_rel: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for r in records {
            let dir = match r.query.direction {
                Direction::PredictHead => "head",
                Direction::PredictTail => "tail",
            };
            by_dir.entry(dir.to_string()).or_default().push(r.rank);
            by_rel
                .entry(kg.relation_key(r.query.triple.rel).to_string())
                .or_default()
                .push(r.rank);
        }
        MetricsReport {
            overall: metrics_from_ranks(&ranks),
            per_direction: by_dir
                .into_iter()
                .map(|(k, v)| (k, metrics_from_ranks(&v)))
                .collect(),
            per_relation: by_rel
                .into_iter()
                .map(|(k, v)| (k, metrics_from_ranks(&v)))
                .collect(),
            cost,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankRecord {
    pub query: RankingQuery,
    pub rank: usize,
    pub candidates: usize,
    pub gold_score: f64,
    /// Best candidates with their scores, highest first.
    pub top: Vec<(EntityId, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    pub basis: RankingBasis,
    pub self_loop_filter: bool,
    pub use_cache: bool,
    pub directions: Vec<Direction>,
    pub seed: u64,
    /// Worker threads; 0 picks the number of available cores.
    pub threads: usize,
    pub top_k: usize,
    /// Keep every query's dense score vector in the output.
    pub keep_scores: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            basis: RankingBasis::Sc,
            self_loop_filter: false,
            use_cache: true,
            directions: Direction::BOTH.to_vec(),
            seed: 0,
            threads: 0,
            top_k: 10,
            keep_scores: false,
        }
    }
}

/// Anything that can score every entity as the answer to a query.
pub trait LinkScorer: Sync {
    fn num_entities(&self) -> usize;

    /// Label stored in exported score matrices.
    fn label(&self) -> String;

    /// Called once with every query before any scoring.
    fn prepare(
        &mut self,
        queries: &[RankingQuery],
        options: &EvalOptions,
        cost: &CostCounter,
    ) -> Result<()>;

    /// Scores for all entities, higher is better. Only entries for
    /// `candidates` are meaningful; scorers may leave the rest at -∞.
    fn score_all(
        &self,
        query: &RankingQuery,
        candidates: &[EntityId],
        cost: &CostCounter,
    ) -> Result<Vec<f64>>;
}

pub struct EvalOutput {
    pub report: MetricsReport,
    pub records: Vec<RankRecord>,
    pub scores: Option<ScoreMatrix>,
}

pub fn evaluate<S: LinkScorer + ?Sized>(
    scorer: &mut S,
    kg: &KnowledgeGraph,
    split: Split,
    options: &EvalOptions,
) -> Result<EvalOutput> {
    let queries = build_queries(kg.split(split), &options.directions);
    evaluate_queries(scorer, kg, &queries, options)
}

pub fn evaluate_queries<S: LinkScorer + ?Sized>(
    scorer: &mut S,
    kg: &KnowledgeGraph,
    queries: &[RankingQuery],
    options: &EvalOptions,
) -> Result<EvalOutput> {
    let cost = CostCounter::new();
    scorer.prepare(queries, options, &cost)?;
    let scorer: &S = scorer;
    let run = |q: &RankingQuery| -> Result<(RankRecord, Option<ScoreBlock>)> {
        // score over the filtered-setting list so per-query rescaling does not
        // depend on the self-loop filter, then drop the fixed entity
        let mut cands = filtered_candidates(kg, q, false);
        let dense = scorer.score_all(q, &cands, &cost)?;
        if options.self_loop_filter {
            let (fixed, gold) = (q.fixed(), q.gold());
            cands.retain(|&e| e == gold || e != fixed);
        }
        let scores: Vec<f64> = cands.iter().map(|c| dense[c.index()]).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
        rng.set_stream(q.index as u64);
        let rank = rank_gold(&cands, &scores, q.gold(), &mut rng)?;
        let mut order: Vec<usize> = (0..cands.len()).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        let record = RankRecord {
            query: *q,
            rank,
            candidates: cands.len(),
            gold_score: dense[q.gold().index()],
            top: order
                .iter()
                .take(options.top_k)
                .map(|&i| (cands[i], scores[i]))
                .collect(),
        };
        // non-candidates are stored as -∞ whatever the scorer left there
        let block = options.keep_scores.then(|| {
            let mut out = vec![f32::NEG_INFINITY; dense.len()];
            for (c, &s) in cands.iter().zip(&scores) {
                out[c.index()] = s as f32;
            }
            ScoreBlock {
                query_index: q.index as u32,
                direction: q.direction,
                triple: q.triple,
                scores: out,
            }
        });
        Ok((record, block))
    };
    let results: Vec<Result<_>> = if options.threads == 1 {
        queries.iter().map(run).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(options.threads)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        pool.install(|| queries.par_iter().map(run).collect())
    };
    let mut records = Vec::with_capacity(queries.len());
    let mut blocks = Vec::new();
    for r in results {
        let (rec, block) = r?;
        records.push(rec);
        blocks.extend(block);
    }
    let report = MetricsReport::from_records(kg, &records, cost.snapshot());
    let scores = options.keep_scores.then(|| ScoreMatrix {
        label: scorer.label(),
        num_entities: scorer.num_entities(),
        blocks,
    });
    Ok(EvalOutput {
        report,
        records,
        scores,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Cross,
    Siamese,
}

/// Attention cost model for scoring `n_queries` incomplete triples against
/// every entity with text length `l`: a cross-encoder pays `l²` per
/// candidate triple, the Siamese model `(l/2)²` per entity plus per query.
pub fn predicted_cost(strategy: Strategy, l: f64, entities: f64, n_queries: f64) -> f64 {
    match strategy {
        Strategy::Cross => l * l * entities * n_queries,
        Strategy::Siamese => (l / 2.0) * (l / 2.0) * (entities + n_queries),
    }
}

/// Cost ratio for completing the whole graph, i.e. one query per
/// (entity, relation) pair: `4|E||R| / (1 + |R|)`.
pub fn whole_graph_ratio(l: f64, entities: f64, relations: f64) -> f64 {
    let q = entities * relations;
    predicted_cost(Strategy::Cross, l, entities, q)
        / predicted_cost(Strategy::Siamese, l, entities, q)
}

/// Cost ratio for ranking a single incomplete triple: `4|E| / (1 + |E|)`.
pub fn one_triple_ratio(l: f64, entities: f64) -> f64 {
    predicted_cost(Strategy::Cross, l, entities, 1.0)
        / predicted_cost(Strategy::Siamese, l, entities, 1.0)
}

/// Link scorer for the two-branch model.
///
/// With the cache, tail queries encode each distinct (head, relation) once
/// and reuse one tail-branch encoding per entity; head queries encode every
/// (entity, relation) pair once per relation queried. Without it every
/// query re-encodes its own side and all of its candidates.
pub struct StarScorer<'a, T> {
    model: &'a StarModel<T>,
    texts: &'a TokenizedTexts,
    basis: RankingBasis,
    use_cache: bool,
    entity_cache: Option<EntityRepCache<T>>,
    hr: HashMap<(EntityId, RelationId), usize>,
    hr_reps: Matrix<T>,
    by_relation: HashMap<RelationId, Matrix<T>>,
}

impl<'a, T: Real> StarScorer<'a, T> {
    pub fn new(model: &'a StarModel<T>, texts: &'a TokenizedTexts) -> Self {
        StarScorer {
            model,
            texts,
            basis: RankingBasis::Sc,
            use_cache: true,
            entity_cache: None,
            hr: HashMap::new(),
            hr_reps: Matrix::zeros(0, model.d_h()),
            by_relation: HashMap::new(),
        }
    }

    /// Reuses an entity cache built for the same parameters.
    pub fn with_entity_cache(mut self, cache: EntityRepCache<T>) -> Self {
        if cache.is_current(self.model) {
            self.entity_cache = Some(cache);
        }
        self
    }

    pub fn entity_cache(&self) -> Option<&EntityRepCache<T>> {
        self.entity_cache.as_ref()
    }

    /// `(s_c, s_d)` for every entity; non-candidates are NaN when the cache
    /// is off.
    pub fn raw_scores(
        &self,
        query: &RankingQuery,
        candidates: &[EntityId],
        cost: &CostCounter,
    ) -> (Vec<f64>, Vec<f64>) {
        let n = self.texts.num_entities();
        let (fixed, rel) = (query.fixed(), query.triple.rel);
        if self.use_cache {
            let cache = self
                .entity_cache
                .as_ref()
                .expect("prepare builds the entity cache");
            match query.direction {
                Direction::PredictTail => {
                    let u = self.hr_reps.row(self.hr[&(fixed, rel)]);
                    self.model.score_against(u, cache.reps())
                }
                Direction::PredictHead => {
                    let us = &self.by_relation[&rel];
                    self.model.score_rows_against(us, cache.get(fixed))
                }
            }
        } else {
            let (c_part, d_part) = match query.direction {
                Direction::PredictTail => {
                    let u = self.model.encode_hr(self.texts, fixed, rel, Some(cost));
                    let inputs: Vec<EncoderInput> = candidates
                        .iter()
                        .map(|&e| self.model.t_input(self.texts, e))
                        .collect();
                    let vs = self.model.encode_inputs(&inputs, Some(cost));
                    self.model.score_against(&u, &vs)
                }
                Direction::PredictHead => {
                    let v = self.model.encode_t(self.texts, fixed, Some(cost));
                    let inputs: Vec<EncoderInput> = candidates
                        .iter()
                        .map(|&e| self.model.hr_input(self.texts, e, rel))
                        .collect();
                    let us = self.model.encode_inputs(&inputs, Some(cost));
                    self.model.score_rows_against(&us, &v)
                }
            };
            let mut s_c = vec![f64::NAN; n];
            let mut s_d = vec![f64::NAN; n];
            for (i, e) in candidates.iter().enumerate() {
                s_c[e.index()] = c_part[i];
                s_d[e.index()] = d_part[i];
            }
            (s_c, s_d)
        }
    }
}

impl<T: Real> LinkScorer for StarScorer<'_, T> {
    fn num_entities(&self) -> usize {
        self.texts.num_entities()
    }

    fn label(&self) -> String {
        format!("star:{:?}", self.basis).to_lowercase()
    }

    fn prepare(
        &mut self,
        queries: &[RankingQuery],
        options: &EvalOptions,
        cost: &CostCounter,
    ) -> Result<()> {
        self.basis = options.basis;
        self.use_cache = options.use_cache;
        if !self.use_cache {
            return Ok(());
        }
        if self
            .entity_cache
            .as_ref()
            .is_none_or(|c| !c.is_current(self.model))
        {
            self.entity_cache = Some(precompute_entity_reps(self.model, self.texts, Some(cost)));
        }
        let offset = self.hr_reps.rows();
        let mut pairs = Vec::new();
        let mut rels = Vec::new();
        for q in queries {
            let rel = q.triple.rel;
            match q.direction {
                Direction::PredictTail => {
                    let key = (q.fixed(), rel);
                    if let Entry::Vacant(slot) = self.hr.entry(key) {
                        slot.insert(offset + pairs.len());
                        pairs.push(key);
                    }
                }
                Direction::PredictHead => {
                    if !self.by_relation.contains_key(&rel) && !rels.contains(&rel) {
                        rels.push(rel);
                    }
                }
            }
        }
        let inputs: Vec<EncoderInput> = pairs
            .iter()
            .map(|&(h, r)| self.model.hr_input(self.texts, h, r))
            .collect();
        let fresh = self.model.encode_inputs(&inputs, Some(cost));
        let d = self.model.d_h();
        let mut data = std::mem::replace(&mut self.hr_reps, Matrix::zeros(0, d)).into_data();
        data.extend_from_slice(fresh.data());
        self.hr_reps = Matrix::from_vec(offset + pairs.len(), d, data);
        for r in rels {
            let inputs: Vec<EncoderInput> = (0..self.texts.num_entities())
                .map(|e| self.model.hr_input(self.texts, EntityId(e as u32), r))
                .collect();
            self.by_relation
                .insert(r, self.model.encode_inputs(&inputs, Some(cost)));
        }
        Ok(())
    }

    fn score_all(
        &self,
        query: &RankingQuery,
        candidates: &[EntityId],
        cost: &CostCounter,
    ) -> Result<Vec<f64>> {
        let (s_c, s_d) = self.raw_scores(query, candidates, cost);
        let cand_sd: Vec<f64> = candidates.iter().map(|e| s_d[e.index()]).collect();
        let ctx = RescaleContext::from_scores(&cand_sd);
        s_c.iter()
            .zip(&s_d)
            .map(|(&c, &d)| {
                if c.is_nan() {
                    Ok(f64::NEG_INFINITY)
                } else {
                    combine_basis(c, d, self.basis, ctx.as_ref())
                }
            })
            .collect()
    }
}

/// Link scorer that runs the cross-encoder on every candidate triple.
pub struct CrossScorer<'a, T> {
    model: &'a CrossEncoder<T>,
    texts: &'a TokenizedTexts,
}

impl<'a, T: Real> CrossScorer<'a, T> {
    pub fn new(model: &'a CrossEncoder<T>, texts: &'a TokenizedTexts) -> Self {
        CrossScorer { model, texts }
    }
}

impl<T: Real> LinkScorer for CrossScorer<'_, T> {
    fn num_entities(&self) -> usize {
        self.texts.num_entities()
    }

    fn label(&self) -> String {
        "cross".into()
    }

    fn prepare(
        &mut self,
        _queries: &[RankingQuery],
        _options: &EvalOptions,
        _cost: &CostCounter,
    ) -> Result<()> {
        Ok(())
    }

    fn score_all(
        &self,
        query: &RankingQuery,
        candidates: &[EntityId],
        cost: &CostCounter,
    ) -> Result<Vec<f64>> {
        let triples: Vec<Triple> = candidates
            .iter()
            .map(|&e| query.triple.with_target(query.direction, e))
            .collect();
        let s = self.model.score(self.texts, &triples, cost);
        let mut dense = vec![f64::NEG_INFINITY; self.texts.num_entities()];
        for (e, v) in candidates.iter().zip(s) {
            dense[e.index()] = v;
        }
        Ok(dense)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::GraphBuilder;

    #[test]
    fn filtered_candidate_examples() {
        let kg = GraphBuilder::new()
            .split(Split::Train, &[("A", "r", "B"), ("A", "r", "C")])
            .split(Split::Test, &[("D", "r", "A")])
            .build();
        let id = |k: &str| kg.entity_id(k).unwrap();
        let q = RankingQuery {
            index: 0,
            triple: Triple::new(id("A"), kg.relation_id("r").unwrap(), id("B")),
            direction: Direction::PredictTail,
        };
        let mut c = filtered_candidates(&kg, &q, false);
        c.sort();
        let mut want = vec![id("A"), id("B"), id("D")];
        want.sort();
        assert_eq!(c, want);
        let mut c = filtered_candidates(&kg, &q, true);
        c.sort();
        let mut want = vec![id("B"), id("D")];
        want.sort();
        assert_eq!(c, want);
    }

    /// Fixed (s_c, s_d) per entity, combined with s_d rescaled over the
    /// candidates it is given.
    struct RescalingScorer(Vec<(f64, f64)>);

    impl LinkScorer for RescalingScorer {
        fn num_entities(&self) -> usize {
            self.0.len()
        }

        fn label(&self) -> String {
            "rescaling".into()
        }

        fn prepare(&mut self, _: &[RankingQuery], _: &EvalOptions, _: &CostCounter) -> Result<()> {
            Ok(())
        }

        fn score_all(
            &self,
            _: &RankingQuery,
            candidates: &[EntityId],
            _: &CostCounter,
        ) -> Result<Vec<f64>> {
            let sd: Vec<f64> = candidates.iter().map(|e| self.0[e.index()].1).collect();
            let ctx = RescaleContext::from_scores(&sd);
            self.0
                .iter()
                .map(|&(c, d)| combine_basis(c, d, RankingBasis::Sum, ctx.as_ref()))
                .collect()
        }
    }

    #[test]
    fn self_loop_filter_keeps_the_rescale_context() {
        let kg = GraphBuilder::new()
            .split(Split::Train, &[("A", "s", "X"), ("G", "s", "X")])
            .split(Split::Test, &[("A", "r", "G")])
            .build();
        let id = |k: &str| kg.entity_id(k).unwrap().index();
        let mut scores = vec![(0.0, 0.0); kg.num_entities()];
        // A holds the s_d minimum; rescaling without it would lift X over G
        scores[id("A")] = (0.0, -10.0);
        scores[id("G")] = (0.9, -2.0);
        scores[id("X")] = (0.3, -1.0);
        let mut scorer = RescalingScorer(scores);
        let tails = |self_loop_filter| EvalOptions {
            directions: vec![Direction::PredictTail],
            self_loop_filter,
            threads: 1,
            ..EvalOptions::default()
        };
        let plain = evaluate(&mut scorer, &kg, Split::Test, &tails(false)).unwrap();
        let filtered = evaluate(&mut scorer, &kg, Split::Test, &tails(true)).unwrap();
        assert_eq!(plain.records[0].rank, 1);
        assert_eq!(filtered.records[0].rank, 1);
        assert_eq!(
            filtered.records[0].candidates,
            plain.records[0].candidates - 1
        );
    }

    #[test]
    fn rank_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c: Vec<EntityId> = (0..4).map(EntityId).collect();
        assert_eq!(
            rank_gold(&c, &[0.9, 0.1, 0.2, 0.3], EntityId(0), &mut rng).unwrap(),
            1
        );
        assert_eq!(
            rank_gold(&c, &[0.1, 0.4, 0.2, 0.3], EntityId(0), &mut rng).unwrap(),
            4
        );
        assert!(matches!(
            rank_gold(&c, &[0.1, 0.4, 0.2, 0.3], EntityId(9), &mut rng),
            Err(Error::GoldNotCandidate(9))
        ));
    }

    #[test]
    fn tie_block_mean() {
        // two strictly higher, gold tied with three others: uniform on 3..=6
        let scores = [0.9, 0.8, 0.5, 0.5, 0.5, 0.5, 0.1];
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 10_000;
        let sum: usize = (0..n).map(|_| rank_of(&scores, 3, &mut rng)).sum();
        let mean = sum as f64 / n as f64;
        assert!((mean - 4.5).abs() < 0.05, "mean {mean}");
    }

    #[test]
    fn metric_examples() {
        let m = metrics_from_ranks(&[1, 2, 4]);
        assert!((m.mr - 7.0 / 3.0).abs() < 1e-12);
        assert!((m.mrr - 1.75 / 3.0).abs() < 1e-12);
        assert!((m.hits_at_3 - 2.0 / 3.0).abs() < 1e-12);
        assert!((m.hits_at_1 - 1.0 / 3.0).abs() < 1e-12);
        let p = metrics_from_ranks(&[1, 1]);
        assert_eq!(
            (p.mr, p.mrr, p.hits_at_1, p.hits_at_10),
            (1.0, 1.0, 1.0, 1.0)
        );
        let s = metrics_from_ranks(&[10]);
        assert_eq!((s.hits_at_10, s.hits_at_3), (1.0, 0.0));
        assert_eq!(metrics_from_ranks(&[]), RankStats::default());
    }

    #[test]
    fn predicted_cost_examples() {
        assert_eq!(predicted_cost(Strategy::Cross, 64.0, 100.0, 500.0), 2.048e8);
        assert_eq!(
            predicted_cost(Strategy::Siamese, 64.0, 100.0, 500.0),
            6.144e5
        );
        assert!((whole_graph_ratio(64.0, 100.0, 5.0) - 1000.0 / 3.0).abs() < 1e-9);
        assert!((one_triple_ratio(64.0, 1e6) - 4.0).abs() < 1e-5);
        let big = whole_graph_ratio(64.0, 100.0, 1e9);
        assert!((big - 400.0).abs() < 1e-5);
    }

    #[test]
    fn cost_counter_accumulates() {
        let c = CostCounter::new();
        c.record_siamese(3);
        c.record_cross(4);
        let s = c.snapshot();
        assert_eq!(s.encoder_calls, 2);
        assert_eq!((s.siamese_sq_len, s.cross_sq_len), (9, 16));
    }
}
