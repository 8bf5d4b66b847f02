//! Self-adaptive ensemble of a textual scorer and a graph-embedding scorer:
//! per-query features, the α-MLP, score blending, top-k re-ranking and α
//! training with both base models frozen.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::eval::{rank_of, CostSnapshot, MetricsReport, RankRecord, RankingQuery};
use crate::io::{Container, ScoreBlock, ScoreMatrix};
use crate::kg::{EntityId, KnowledgeGraph};
use crate::scoring::ClassifierHead;
use crate::tensor::{cosine, Matrix};
use crate::training::Adam;

pub use crate::scoring::rescale_scores;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnsembleMode {
    /// One global α; α = 0.5 with every candidate re-ranked is plain score
    /// averaging.
    FixedAlpha(f64),
    SelfAdaptive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleConfig {
    /// Number of top textual candidates to re-rank; `None` re-ranks all.
    pub k: Option<usize>,
    pub mode: EnsembleMode,
    pub margin: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub n_negatives: usize,
    pub batch_size: usize,
    /// Size of the similarity pool averaged in the ambiguity features.
    pub m_sim: usize,
    /// Hidden width of the α-MLP.
    pub hidden: usize,
    /// Min-max rescale the textual scores per query as well; needed when
    /// they are not already probabilities.
    pub rescale_text: bool,
    pub seed: u64,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        EnsembleConfig {
            k: Some(1000),
            mode: EnsembleMode::SelfAdaptive,
            margin: 0.6,
            learning_rate: 1e-3,
            epochs: 20,
            n_negatives: 5,
            batch_size: 32,
            m_sim: 100,
            hidden: 32,
            rescale_text: false,
            seed: 0,
        }
    }
}

impl EnsembleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == Some(0) {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if let EnsembleMode::FixedAlpha(a) = self.mode {
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::Config(format!("fixed alpha {a} outside [0, 1]")));
            }
        }
        if self.mode == EnsembleMode::SelfAdaptive && self.k.is_none() {
            return Err(Error::Config(
                "the self-adaptive ensemble needs a finite k".into(),
            ));
        }
        if self.n_negatives == 0 || self.batch_size == 0 || self.m_sim == 0 || self.hidden == 0 {
            return Err(Error::Config(
                "n_negatives, batch_size, m_sim and hidden must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Per-dimension population standard deviation of the candidate
/// representations, followed by each candidate's neighbourhood similarity.
pub fn ambiguity_degree(candidate_reps: &[&[f64]], neighbourhood: &[f64]) -> Vec<f64> {
    assert_eq!(candidate_reps.len(), neighbourhood.len());
    let d = candidate_reps.first().map_or(0, |r| r.len());
    let n = candidate_reps.len() as f64;
    let mut out = Vec::with_capacity(d + neighbourhood.len());
    for j in 0..d {
        let mean = candidate_reps.iter().map(|r| r[j]).sum::<f64>() / n;
        let var = candidate_reps
            .iter()
            .map(|r| (r[j] - mean).powi(2))
            .sum::<f64>()
            / n;
        out.push(var.sqrt());
    }
    out.extend_from_slice(neighbourhood);
    out
}

/// For every entity, the mean of its `m_sim` largest cosine similarities
/// against all entities (itself included); all of them when fewer exist.
pub fn neighbourhood_similarity(reps: &Matrix<f64>, m_sim: usize) -> Vec<f64> {
    let n = reps.rows();
    let m = m_sim.min(n);
    (0..n)
        .map(|i| {
            let mut sims: Vec<f64> = (0..n).map(|j| cosine(reps.row(i), reps.row(j))).collect();
            sims.sort_by(|a, b| b.total_cmp(a));
            sims[..m].iter().sum::<f64>() / m as f64
        })
        .collect()
}

/// `[|s_tc − s_ge|; s_tc + s_ge; s_tc; s_ge]`.
pub fn score_consistency(s_tc: &[f64], s_ge: &[f64]) -> Vec<f64> {
    assert_eq!(s_tc.len(), s_ge.len());
    let mut out = Vec::with_capacity(4 * s_tc.len());
    out.extend(s_tc.iter().zip(s_ge).map(|(a, b)| (a - b).abs()));
    out.extend(s_tc.iter().zip(s_ge).map(|(a, b)| a + b));
    out.extend_from_slice(s_tc);
    out.extend_from_slice(s_ge);
    out
}

pub fn blend(alpha: f64, s_tc: f64, s_ge: f64) -> f64 {
    alpha * s_tc + (1.0 - alpha) * s_ge
}

/// The α-MLP: features → hidden (GELU) → one logit → logistic.
#[derive(Clone, Debug, PartialEq)]
pub struct AlphaModel {
    pub store: ParamStore<f64>,
    head: ClassifierHead,
    pub feature_dim: usize,
    pub k: usize,
    pub d_h: usize,
    pub m_sim: usize,
}

#[derive(Serialize, Deserialize)]
struct AlphaMeta {
    feature_dim: usize,
    k: usize,
    d_h: usize,
    m_sim: usize,
    hidden: usize,
}

impl AlphaModel {
    /// Xavier first layer; zero output layer, so every query starts at α = 0.5.
    pub fn new(d_h: usize, k: usize, m_sim: usize, hidden: usize, seed: u64) -> Self {
        let feature_dim = d_h + 5 * k;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let head =
            ClassifierHead::with_outputs(&mut store, "alpha", feature_dim, hidden, 1, &mut rng);
        store.get_mut(head.params()[2]).data_mut().fill(0.0);
        AlphaModel {
            store,
            head,
            feature_dim,
            k,
            d_h,
            m_sim,
        }
    }

    /// α for a single feature vector, or 1 when the query is unseen.
    pub fn alpha(&self, features: &[f64], unseen: bool) -> f64 {
        if unseen {
            return 1.0;
        }
        let mut tape = Tape::new(&self.store);
        let a = self.alpha_tape(&mut tape, Matrix::row_vector(features.to_vec()));
        tape.scalar(a)
    }

    fn alpha_tape(&self, tape: &mut Tape<'_, f64>, features: Matrix<f64>) -> Var {
        let x = tape.constant(features);
        let logits = self.head.logits_tape(tape, x);
        tape.sigmoid(logits)
    }

    pub fn params(&self) -> [ParamId; 4] {
        self.head.params()
    }

    pub fn to_container(&self) -> Container {
        let meta = AlphaMeta {
            feature_dim: self.feature_dim,
            k: self.k,
            d_h: self.d_h,
            m_sim: self.m_sim,
            hidden: self.store.get(self.head.params()[1]).cols(),
        };
        Container {
            kind: "ensemble".into(),
            meta: serde_json::to_value(meta).expect("metadata serializes"),
            store: self.store.cast(),
        }
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        c.expect_kind("ensemble")?;
        let meta: AlphaMeta = c.meta_as()?;
        let mut model = AlphaModel::new(meta.d_h, meta.k, meta.m_sim, meta.hidden, 0);
        if model.feature_dim != meta.feature_dim {
            return Err(Error::DimMismatch {
                expected: model.feature_dim,
                actual: meta.feature_dim,
            });
        }
        if c.store.names() != model.store.names() {
            return Err(Error::Format("unexpected tensors in ensemble file".into()));
        }
        for (dst, src) in model.store.tensors_mut().iter_mut().zip(c.store.tensors()) {
            if dst.shape() != src.shape() {
                return Err(Error::DimMismatch {
                    expected: dst.len(),
                    actual: src.len(),
                });
            }
            *dst = src.cast();
        }
        Ok(model)
    }
}

/// Everything the ensemble needs about one query, derived once from the two
/// frozen score matrices.
#[derive(Clone, Debug)]
pub struct PreparedQuery {
    pub query: RankingQuery,
    pub candidates: Vec<EntityId>,
    /// Textual and rescaled geo scores, aligned with `candidates`.
    pub s_tc: Vec<f64>,
    pub s_ge: Vec<f64>,
    /// Candidate positions sorted by textual score, best first.
    pub text_order: Vec<usize>,
    pub unseen: bool,
}

impl PreparedQuery {
    pub fn top(&self, k: Option<usize>) -> &[usize] {
        &self.text_order[..k.map_or(self.text_order.len(), |k| k.min(self.text_order.len()))]
    }

    fn gold_pos(&self) -> usize {
        self.candidates
            .iter()
            .position(|&e| e == self.query.gold())
            .expect("gold is always a candidate")
    }
}

fn candidates_of(block: &ScoreBlock) -> Vec<usize> {
    block
        .scores
        .iter()
        .enumerate()
        .filter(|(_, s)| s.is_finite())
        .map(|(i, _)| i)
        .collect()
}

/// Pairs up the blocks of both matrices, rescales the geo scores over each
/// query's candidates and sorts candidates by textual score.
pub fn prepare_queries(
    kg: &KnowledgeGraph,
    text: &ScoreMatrix,
    geo: &ScoreMatrix,
    rescale_text: bool,
) -> Result<Vec<PreparedQuery>> {
    text.check_aligned(geo)?;
    text.blocks
        .iter()
        .zip(&geo.blocks)
        .map(|(tb, gb)| {
            let idx = candidates_of(tb);
            if idx != candidates_of(gb) {
                return Err(Error::MatrixMismatch(format!(
                    "candidate sets differ for query {}",
                    tb.query_index
                )));
            }
            let query = RankingQuery {
                index: tb.query_index as usize,
                triple: tb.triple,
                direction: tb.direction,
            };
            let candidates: Vec<EntityId> = idx.iter().map(|&i| EntityId(i as u32)).collect();
            if !candidates.contains(&query.gold()) {
                return Err(Error::GoldNotCandidate(query.gold().0));
            }
            let raw_tc: Vec<f64> = idx.iter().map(|&i| tb.scores[i] as f64).collect();
            let s_tc = if rescale_text {
                rescale_scores(&raw_tc)
            } else {
                if let Some(bad) = raw_tc.iter().find(|s| !(0.0..=1.0).contains(*s)) {
                    return Err(Error::MatrixMismatch(format!(
                        "textual score {bad} outside [0, 1]; enable rescale_text"
                    )));
                }
                raw_tc
            };
            let s_ge =
                rescale_scores(&idx.iter().map(|&i| gb.scores[i] as f64).collect::<Vec<_>>());
            let mut text_order: Vec<usize> = (0..candidates.len()).collect();
            text_order.sort_by(|&a, &b| s_tc[b].total_cmp(&s_tc[a]).then(a.cmp(&b)));
            let fixed_unseen = {
                let f = kg.unseen_in_train(&query.triple);
                !kg.entity_seen_in_train(query.fixed()) || f.relation
            };
            Ok(PreparedQuery {
                query,
                candidates,
                s_tc,
                s_ge,
                text_order,
                unseen: fixed_unseen,
            })
        })
        .collect()
}

/// Ambiguity and consistency features over the top-k candidates, zero-padded
/// when fewer than `k` candidates exist.
pub fn query_features(
    q: &PreparedQuery,
    reps: &Matrix<f64>,
    neighbourhood: &[f64],
    k: usize,
) -> Vec<f64> {
    let top = q.top(Some(k));
    let cand_reps: Vec<&[f64]> = top
        .iter()
        .map(|&p| reps.row(q.candidates[p].index()))
        .collect();
    let nb: Vec<f64> = top
        .iter()
        .map(|&p| neighbourhood[q.candidates[p].index()])
        .collect();
    let mut tc: Vec<f64> = top.iter().map(|&p| q.s_tc[p]).collect();
    let mut ge: Vec<f64> = top.iter().map(|&p| q.s_ge[p]).collect();
    tc.resize(k, 0.0);
    ge.resize(k, 0.0);
    let mut x = ambiguity_degree(&cand_reps, &nb);
    x.resize(reps.cols() + k, 0.0);
    x.extend(score_consistency(&tc, &ge));
    x
}

/// Candidate order after blending the top-k block with weight `alpha`; the
/// rest keep their textual order after it. Ties inside the block fall back
/// to textual order.
pub fn ensemble_rerank(q: &PreparedQuery, alpha: f64, k: Option<usize>) -> Vec<EntityId> {
    let top = q.top(k);
    let mut block: Vec<(usize, f64)> = top
        .iter()
        .enumerate()
        .map(|(r, &p)| (r, blend(alpha, q.s_tc[p], q.s_ge[p])))
        .collect();
    block.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    block
        .iter()
        .map(|&(r, _)| q.candidates[top[r]])
        .chain(q.text_order[top.len()..].iter().map(|&p| q.candidates[p]))
        .collect()
}

/// Ranking keys consistent with [`ensemble_rerank`]: `(1, blend)` inside the
/// re-ranked block and `(0, s_tc)` for the rest, compared lexicographically.
pub fn ensemble_scores(q: &PreparedQuery, alpha: f64, k: Option<usize>) -> Vec<(u8, f64)> {
    let mut out: Vec<(u8, f64)> = q.s_tc.iter().map(|&s| (0, s)).collect();
    for &p in q.top(k) {
        out[p] = (1, blend(alpha, q.s_tc[p], q.s_ge[p]));
    }
    out
}

/// Precomputed inputs of the α-MLP for a set of queries.
pub struct FeatureSet {
    pub features: Vec<Vec<f64>>,
    pub queries: Vec<PreparedQuery>,
}

impl FeatureSet {
    pub fn new(queries: Vec<PreparedQuery>, reps: &Matrix<f64>, k: usize, m_sim: usize) -> Self {
        let nb = neighbourhood_similarity(reps, m_sim);
        let features = queries
            .iter()
            .map(|q| query_features(q, reps, &nb, k))
            .collect();
        FeatureSet { features, queries }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EnsembleTrainReport {
    pub epoch_losses: Vec<f64>,
    /// Queries without gradient because the gold fell outside the top k.
    pub skipped_gold_outside_top_k: usize,
    /// Queries without gradient because α is forced to 1.
    pub skipped_unseen: usize,
}

struct TrainItem {
    query: usize,
    gold: usize,
    top: Vec<usize>,
}

/// Hinge loss `max(0, margin − s_sa(gold) + s_sa(neg))` of a batch on the
/// tape, averaged over negatives and queries.
fn batch_loss(
    model: &AlphaModel,
    tape: &mut Tape<'_, f64>,
    set: &FeatureSet,
    items: &[(&TrainItem, Vec<usize>)],
    margin: f64,
) -> Var {
    let f = model.feature_dim;
    let mut x = Vec::with_capacity(items.len() * f);
    for (it, _) in items {
        x.extend_from_slice(&set.features[it.query]);
    }
    let alpha = model.alpha_tape(tape, Matrix::from_vec(items.len(), f, x));
    let mut rows = Vec::new();
    let (mut slope, mut offset, mut weight) = (Vec::new(), Vec::new(), Vec::new());
    let b = items.len() as f64;
    for (i, (it, negs)) in items.iter().enumerate() {
        let q = &set.queries[it.query];
        let dg = q.s_tc[it.gold] - q.s_ge[it.gold];
        for &n in negs {
            rows.push(i);
            slope.push(q.s_tc[n] - q.s_ge[n] - dg);
            offset.push(margin - q.s_ge[it.gold] + q.s_ge[n]);
            weight.push(1.0 / (b * negs.len() as f64));
        }
    }
    let n = rows.len();
    let a = tape.gather(alpha, &rows);
    let s = tape.constant(Matrix::from_vec(n, 1, slope));
    let o = tape.constant(Matrix::from_vec(n, 1, offset));
    let w = tape.constant(Matrix::from_vec(n, 1, weight));
    let scaled = tape.mul(a, s);
    let shifted = tape.add(scaled, o);
    let hinge = tape.relu(shifted);
    let weighted = tape.mul(hinge, w);
    tape.sum_all(weighted)
}

fn train_items(set: &FeatureSet, k: usize) -> (Vec<TrainItem>, usize, usize) {
    let (mut items, mut outside, mut unseen) = (Vec::new(), 0, 0);
    for (i, q) in set.queries.iter().enumerate() {
        if q.unseen {
            unseen += 1;
            continue;
        }
        let gold = q.gold_pos();
        let top = q.top(Some(k));
        if !top.contains(&gold) {
            outside += 1;
            continue;
        }
        let others: Vec<usize> = top.iter().copied().filter(|&p| p != gold).collect();
        if others.is_empty() {
            continue;
        }
        items.push(TrainItem {
            query: i,
            gold,
            top: others,
        });
    }
    (items, outside, unseen)
}

fn sample_items<'a, R: Rng>(
    items: &'a [TrainItem],
    m: usize,
    rng: &mut R,
) -> Vec<(&'a TrainItem, Vec<usize>)> {
    items
        .iter()
        .map(|it| {
            let negs = if it.top.len() <= m {
                it.top.clone()
            } else {
                it.top.choose_multiple(rng, m).copied().collect()
            };
            (it, negs)
        })
        .collect()
}

/// Trains only the α-MLP on dev-query features; the base models enter solely
/// through their precomputed score matrices and entity representations.
pub fn train_ensemble(
    set: &FeatureSet,
    d_h: usize,
    config: &EnsembleConfig,
) -> Result<(AlphaModel, EnsembleTrainReport)> {
    config.validate()?;
    let k = config
        .k
        .ok_or_else(|| Error::Config("the self-adaptive ensemble needs a finite k".into()))?;
    let mut model = AlphaModel::new(d_h, k, config.m_sim, config.hidden, config.seed);
    if let Some(f) = set.features.first() {
        if f.len() != model.feature_dim {
            return Err(Error::DimMismatch {
                expected: model.feature_dim,
                actual: f.len(),
            });
        }
    }
    let (mut items, outside, unseen) = train_items(set, k);
    let mut report = EnsembleTrainReport {
        skipped_gold_outside_top_k: outside,
        skipped_unseen: unseen,
        ..Default::default()
    };
    if outside > 0 {
        log::info!("{outside} training queries have the gold outside the top {k}; skipped");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut adam = Adam::new(&model.store, config.learning_rate, 0.9, 0.999, 1e-8, 0.0);
    for epoch in 1..=config.epochs {
        items.shuffle(&mut rng);
        let (mut sum, mut batches) = (0.0, 0usize);
        for (step, chunk) in items.chunks(config.batch_size).enumerate() {
            let sampled = sample_items(chunk, config.n_negatives, &mut rng);
            let grads = {
                let mut tape = Tape::new(&model.store);
                let loss = batch_loss(&model, &mut tape, set, &sampled, config.margin);
                let l = tape.scalar(loss);
                if !l.is_finite() {
                    return Err(Error::Diverged {
                        epoch,
                        step,
                        detail: format!("ensemble loss {l}"),
                    });
                }
                sum += l;
                batches += 1;
                tape.backward(loss)
            };
            adam.step(&mut model.store, &grads, None);
        }
        report.epoch_losses.push(sum / batches.max(1) as f64);
    }
    Ok((model, report))
}

/// Central finite-difference check of the ensemble loss gradient with
/// respect to every α-MLP parameter on one fixed batch.
pub fn ensemble_gradient_check(
    model: &AlphaModel,
    set: &FeatureSet,
    config: &EnsembleConfig,
    step: f64,
) -> f64 {
    let k = config.k.unwrap_or(1);
    let (items, _, _) = train_items(set, k);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let sampled = sample_items(&items, config.n_negatives, &mut rng);
    let eval = |m: &AlphaModel| {
        let mut tape = Tape::new(&m.store);
        let l = batch_loss(m, &mut tape, set, &sampled, config.margin);
        tape.scalar(l)
    };
    let grads = {
        let mut tape = Tape::new(&model.store);
        let l = batch_loss(model, &mut tape, set, &sampled, config.margin);
        tape.backward(l)
    };
    let mut probe = model.clone();
    let mut worst: f64 = 0.0;
    for ti in 0..probe.store.len() {
        for i in 0..probe.store.tensors()[ti].len() {
            let orig = probe.store.tensors()[ti].data()[i];
            probe.store.tensors_mut()[ti].data_mut()[i] = orig + step;
            let up = eval(&probe);
            probe.store.tensors_mut()[ti].data_mut()[i] = orig - step;
            let down = eval(&probe);
            probe.store.tensors_mut()[ti].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            let analytic = grads.params()[ti].as_ref().map_or(0.0, |g| g.data()[i]);
            let rel = (analytic - numeric).abs()
                / analytic
                    .abs()
                    .max(numeric.abs())
                    .max(crate::training::GRADCHECK_FLOOR);
            worst = worst.max(rel);
        }
    }
    worst
}

#[derive(Clone, Debug)]
pub struct EnsembleOutput {
    pub report: MetricsReport,
    pub records: Vec<RankRecord>,
    /// α used for each query, in query order.
    pub alphas: Vec<f64>,
}

/// Ranks every query with the blended scores under the RANDOM tie protocol.
pub fn evaluate_ensemble(
    kg: &KnowledgeGraph,
    set: &FeatureSet,
    alpha_model: Option<&AlphaModel>,
    config: &EnsembleConfig,
    seed: u64,
) -> Result<EnsembleOutput> {
    config.validate()?;
    let mut records = Vec::with_capacity(set.queries.len());
    let mut alphas = Vec::with_capacity(set.queries.len());
    for (q, x) in set.queries.iter().zip(&set.features) {
        let alpha = match config.mode {
            EnsembleMode::FixedAlpha(a) => a,
            EnsembleMode::SelfAdaptive => {
                let m = alpha_model.ok_or_else(|| {
                    Error::Config("self-adaptive mode needs trained α parameters".into())
                })?;
                m.alpha(x, q.unseen)
            }
        };
        let scores = ensemble_scores(q, alpha, config.k);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(q.query.index as u64);
        let rank = rank_of(&scores, q.gold_pos(), &mut rng);
        let gold_score = scores[q.gold_pos()].1;
        let order = ensemble_rerank(q, alpha, config.k);
        let top = order
            .iter()
            .take(10)
            .map(|e| {
                let p = q.candidates.iter().position(|c| c == e).expect("candidate");
                (*e, scores[p].1)
            })
            .collect();
        records.push(RankRecord {
            query: q.query,
            rank,
            candidates: q.candidates.len(),
            gold_score,
            top,
        });
        alphas.push(alpha);
    }
    Ok(EnsembleOutput {
        report: MetricsReport::from_records(kg, &records, CostSnapshot::default()),
        records,
        alphas,
    })
}

/// Features for a fixed-α run, where the α-MLP is never consulted.
pub fn fixed_alpha_set(queries: Vec<PreparedQuery>) -> FeatureSet {
    FeatureSet {
        features: vec![Vec::new(); queries.len()],
        queries,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::{Direction, RelationId, Triple};

    #[test]
    fn rescale_examples() {
        assert_eq!(rescale_scores(&[2.0, 4.0, 6.0]), vec![0.0, 0.5, 1.0]);
        assert_eq!(rescale_scores(&[3.0; 4]), vec![0.5; 4]);
    }

    #[test]
    fn consistency_and_blend_examples() {
        let x = score_consistency(&[0.8], &[0.4]);
        let want = [0.4, 1.2, 0.8, 0.4];
        for (a, b) in x.iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(
            &score_consistency(&[0.3, 0.6], &[0.3, 0.6])[..2],
            &[0.0, 0.0]
        );
        assert_eq!(score_consistency(&[0.0; 3], &[0.0; 3]), vec![0.0; 12]);
        assert_eq!(blend(1.0, 0.8, 0.4), 0.8);
        assert!((blend(0.5, 0.8, 0.4) - 0.6).abs() < 1e-15);
        assert_eq!(blend(0.0, 0.8, 0.4), 0.4);
    }

    #[test]
    fn ambiguity_examples() {
        let a = [1.0, -2.0, 0.5];
        assert_eq!(ambiguity_degree(&[&a], &[0.9]), vec![0.0, 0.0, 0.0, 0.9]);
        // one entity identical to every other → similarity 1
        let reps = Matrix::from_vec(4, 2, vec![1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 0.5, 0.5]);
        let nb = neighbourhood_similarity(&reps, 3);
        assert!(nb.iter().all(|s| (s - 1.0).abs() < 1e-12));
    }

    #[test]
    fn alpha_examples() {
        let m = AlphaModel::new(2, 1, 3, 4, 0);
        let x = vec![0.3; m.feature_dim];
        assert_eq!(m.alpha(&x, false), 0.5);
        let mut z = m.clone();
        z.store
            .tensors_mut()
            .iter_mut()
            .for_each(|t| t.data_mut().fill(0.0));
        assert_eq!(z.alpha(&x, false), 0.5);
        let mut big = m.clone();
        big.store
            .tensors_mut()
            .iter_mut()
            .for_each(|t| t.data_mut().fill(50.0));
        assert_eq!(big.alpha(&x, true), 1.0);
        let a = big.alpha(&x, false);
        assert!((0.0..=1.0).contains(&a));
    }

    fn prepared(s_tc: Vec<f64>, s_ge: Vec<f64>) -> PreparedQuery {
        let n = s_tc.len();
        let mut text_order: Vec<usize> = (0..n).collect();
        text_order.sort_by(|&a, &b| s_tc[b].total_cmp(&s_tc[a]).then(a.cmp(&b)));
        PreparedQuery {
            query: RankingQuery {
                index: 0,
                triple: Triple::new(EntityId(0), RelationId(0), EntityId(1)),
                direction: Direction::PredictTail,
            },
            candidates: (0..n as u32).map(EntityId).collect(),
            s_tc,
            s_ge,
            text_order,
            unseen: false,
        }
    }

    #[test]
    fn rerank_matches_brute_force() {
        let q = prepared(vec![0.9, 0.7, 0.5, 0.3, 0.1], vec![0.0, 1.0, 0.2, 0.9, 0.5]);
        // k = 3, α = 0.5: blended 0.45, 0.85, 0.35 → 1, 0, 2 then 3, 4
        let ids = |v: &[u32]| v.iter().map(|&i| EntityId(i)).collect::<Vec<_>>();
        assert_eq!(ensemble_rerank(&q, 0.5, Some(3)), ids(&[1, 0, 2, 3, 4]));
        // k = ∞: 0.45, 0.85, 0.35, 0.6, 0.3
        assert_eq!(ensemble_rerank(&q, 0.5, None), ids(&[1, 3, 0, 2, 4]));
        assert_eq!(ensemble_rerank(&q, 1.0, Some(3)), ids(&[0, 1, 2, 3, 4]));
        let s = ensemble_scores(&q, 0.5, Some(3));
        let mut by_score: Vec<usize> = (0..5).collect();
        by_score.sort_by(|&a, &b| s[b].partial_cmp(&s[a]).unwrap());
        assert_eq!(by_score, vec![1, 0, 2, 3, 4]);
    }
}
