//! Translation-based graph embedding baselines (TransE and RotatE), their
//! margin training, and inductive completion of unseen entities.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::ParamStore;
use crate::error::{Error, Result};
use crate::eval::{CostCounter, EvalOptions, LinkScorer, RankingQuery};
use crate::io::Container;
use crate::kg::{Direction, EntityId, KnowledgeGraph, RelationId, Triple};
use crate::tensor::Matrix;
use crate::training::sample_negatives;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GeoKind {
    TransE,
    RotatE,
}

impl std::str::FromStr for GeoKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "transe" => Ok(GeoKind::TransE),
            "rotate" => Ok(GeoKind::RotatE),
            other => Err(Error::Config(format!("unknown geo model `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeoConfig {
    pub kind: GeoKind,
    /// Real embedding width; RotatE uses `dim / 2` complex dimensions.
    /// Defaults to 64 for TransE and 128 for RotatE.
    pub dim: Option<usize>,
    /// Hinge margin; defaults to 0.3 for TransE (entities live in the unit
    /// ball) and 2.0 for RotatE.
    pub margin: Option<f64>,
    pub learning_rate: f64,
    pub epochs: usize,
    pub n_negatives: usize,
    pub batch_size: usize,
    /// Norm order of the TransE distance (1 or 2).
    pub norm_p: u8,
    pub seed: u64,
}

impl Default for GeoConfig {
    fn default() -> Self {
        GeoConfig {
            kind: GeoKind::TransE,
            dim: None,
            margin: None,
            learning_rate: 0.01,
            epochs: 300,
            n_negatives: 5,
            batch_size: 128,
            norm_p: 2,
            seed: 0,
        }
    }
}

impl GeoConfig {
    pub fn dim(&self) -> usize {
        self.dim.unwrap_or(match self.kind {
            GeoKind::TransE => 64,
            GeoKind::RotatE => 128,
        })
    }

    pub fn margin(&self) -> f64 {
        self.margin.unwrap_or(match self.kind {
            GeoKind::TransE => 0.3,
            GeoKind::RotatE => 2.0,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if d == 0 || (self.kind == GeoKind::RotatE && !d.is_multiple_of(2)) {
            return Err(Error::Config(format!(
                "invalid embedding width {d} for {:?}",
                self.kind
            )));
        }
        if !matches!(self.norm_p, 1 | 2) {
            return Err(Error::Config("norm_p must be 1 or 2".into()));
        }
        if self.n_negatives == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "n_negatives and batch_size must be at least 1".into(),
            ));
        }
        if self.margin() < 0.0 || self.learning_rate < 0.0 {
            return Err(Error::Config(
                "margin and learning_rate must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Entity and relation tables. RotatE entities interleave real and imaginary
/// parts; RotatE relations hold one phase per complex dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct GeoEmbeddings {
    pub kind: GeoKind,
    pub norm_p: u8,
    pub entities: Matrix<f64>,
    pub relations: Matrix<f64>,
}

impl GeoEmbeddings {
    pub fn init(num_entities: usize, num_relations: usize, config: &GeoConfig) -> Result<Self> {
        config.validate()?;
        let d = config.dim();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let bound = 6.0 / (d as f64).sqrt();
        let (entities, relations) = match config.kind {
            GeoKind::TransE => {
                let mut e = Matrix::uniform(num_entities, d, bound, &mut rng);
                for i in 0..num_entities {
                    project_unit_ball(e.row_mut(i));
                }
                let mut r = Matrix::uniform(num_relations, d, bound, &mut rng);
                for i in 0..num_relations {
                    let n = norm2(r.row(i));
                    if n > 0.0 {
                        r.row_mut(i).iter_mut().for_each(|x| *x /= n);
                    }
                }
                (e, r)
            }
            GeoKind::RotatE => (
                Matrix::uniform(num_entities, d, 1.0 / (d as f64).sqrt(), &mut rng),
                Matrix::uniform(num_relations, d / 2, std::f64::consts::PI, &mut rng),
            ),
        };
        Ok(GeoEmbeddings {
            kind: config.kind,
            norm_p: config.norm_p,
            entities,
            relations,
        })
    }

    pub fn num_entities(&self) -> usize {
        self.entities.rows()
    }

    pub fn entity(&self, e: EntityId) -> &[f64] {
        self.entities.row(e.index())
    }

    pub fn relation(&self, r: RelationId) -> &[f64] {
        self.relations.row(r.index())
    }

    pub fn score(&self, t: &Triple) -> f64 {
        match self.kind {
            GeoKind::TransE => transe_score(
                self.entity(t.head),
                self.relation(t.rel),
                self.entity(t.tail),
                self.norm_p,
            ),
            GeoKind::RotatE => rotate_score(
                self.entity(t.head),
                self.relation(t.rel),
                self.entity(t.tail),
            ),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.entities.is_finite() && self.relations.is_finite()
    }

    pub fn to_container(&self) -> Container {
        let mut store = ParamStore::new();
        store.add("entities", self.entities.cast());
        store.add("relations", self.relations.cast());
        Container {
            kind: "geo".into(),
            meta: serde_json::json!({ "kind": self.kind, "norm_p": self.norm_p }),
            store,
        }
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        #[derive(Deserialize)]
        struct Meta {
            kind: GeoKind,
            norm_p: u8,
        }
        c.expect_kind("geo")?;
        let meta: Meta = c.meta_as()?;
        let [e, r] = c.store.tensors() else {
            return Err(Error::Format("geo file must hold two tensors".into()));
        };
        let emb = GeoEmbeddings {
            kind: meta.kind,
            norm_p: meta.norm_p,
            entities: e.cast(),
            relations: r.cast(),
        };
        let expected = match emb.kind {
            GeoKind::TransE => emb.entities.cols(),
            GeoKind::RotatE => emb.entities.cols() / 2,
        };
        if emb.relations.cols() != expected {
            return Err(Error::DimMismatch {
                expected,
                actual: emb.relations.cols(),
            });
        }
        Ok(emb)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

fn norm2(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn project_unit_ball(x: &mut [f64]) {
    let n = norm2(x);
    // the slack keeps projection idempotent under rounding
    if n > 1.0 + 1e-12 {
        x.iter_mut().for_each(|v| *v /= n);
    }
}

fn p_norm(x: &[f64], p: u8) -> f64 {
    match p {
        1 => x.iter().map(|v| v.abs()).sum(),
        _ => norm2(x),
    }
}

/// `−‖h + r − t‖_p`.
pub fn transe_score(h: &[f64], r: &[f64], t: &[f64], p: u8) -> f64 {
    let d: Vec<f64> = h
        .iter()
        .zip(r)
        .zip(t)
        .map(|((a, b), c)| a + b - c)
        .collect();
    -p_norm(&d, p)
}

/// Complex product of interleaved `x` with unit rotations `phases`.
pub fn rotate(x: &[f64], phases: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (k, &th) in phases.iter().enumerate() {
        let (s, c) = th.sin_cos();
        let (a, b) = (x[2 * k], x[2 * k + 1]);
        out[2 * k] = a * c - b * s;
        out[2 * k + 1] = a * s + b * c;
    }
    out
}

/// `−‖h ∘ r − t‖` with `r` given as phases.
pub fn rotate_score(h: &[f64], phases: &[f64], t: &[f64]) -> f64 {
    let hr = rotate(h, phases);
    let d: Vec<f64> = hr.iter().zip(t).map(|(a, b)| a - b).collect();
    -norm2(&d)
}

/// Accumulates `w · ∂s/∂θ` for one triple into the gradient tables.
fn accumulate_grad(
    emb: &GeoEmbeddings,
    t: &Triple,
    w: f64,
    ge: &mut Matrix<f64>,
    gr: &mut Matrix<f64>,
) {
    let (h, r, tl) = (emb.entity(t.head), emb.relation(t.rel), emb.entity(t.tail));
    match emb.kind {
        GeoKind::TransE => {
            let d: Vec<f64> = h
                .iter()
                .zip(r)
                .zip(tl)
                .map(|((a, b), c)| a + b - c)
                .collect();
            let g: Vec<f64> = match emb.norm_p {
                1 => d.iter().map(|x| -x.signum() * w).collect(),
                _ => {
                    let n = norm2(&d);
                    if n == 0.0 {
                        return;
                    }
                    d.iter().map(|x| -x / n * w).collect()
                }
            };
            for (k, gk) in g.iter().enumerate() {
                ge.row_mut(t.head.index())[k] += gk;
                gr.row_mut(t.rel.index())[k] += gk;
                ge.row_mut(t.tail.index())[k] -= gk;
            }
        }
        GeoKind::RotatE => {
            let hr = rotate(h, r);
            let d: Vec<f64> = hr.iter().zip(tl).map(|(a, b)| a - b).collect();
            let n = norm2(&d);
            if n == 0.0 {
                return;
            }
            for (k, &th) in r.iter().enumerate() {
                let (s, c) = th.sin_cos();
                let (a, b) = (h[2 * k], h[2 * k + 1]);
                let (g_re, g_im) = (-d[2 * k] / n * w, -d[2 * k + 1] / n * w);
                let hi = t.head.index();
                ge.row_mut(hi)[2 * k] += g_re * c + g_im * s;
                ge.row_mut(hi)[2 * k + 1] += -g_re * s + g_im * c;
                gr.row_mut(t.rel.index())[k] += g_re * (-a * s - b * c) + g_im * (a * c - b * s);
                let ti = t.tail.index();
                ge.row_mut(ti)[2 * k] -= g_re;
                ge.row_mut(ti)[2 * k + 1] -= g_im;
            }
        }
    }
}

/// Margin hinge `max(0, margin − s(tp) + s(tp′))`, averaged over negatives
/// and positives, with its gradient. Returns the loss value.
fn hinge_loss_grad(
    emb: &GeoEmbeddings,
    batch: &[(Triple, Vec<Triple>)],
    margin: f64,
    ge: &mut Matrix<f64>,
    gr: &mut Matrix<f64>,
) -> f64 {
    let b = batch.len() as f64;
    let mut loss = 0.0;
    for (pos, negs) in batch {
        let sp = emb.score(pos);
        let w = 1.0 / (b * negs.len() as f64);
        for n in negs {
            let v = margin - sp + emb.score(n);
            if v > 0.0 {
                loss += w * v;
                accumulate_grad(emb, pos, -w, ge, gr);
                accumulate_grad(emb, n, w, ge, gr);
            }
        }
    }
    loss
}

struct DenseAdam {
    lr: f64,
    step: i32,
    m: Vec<Matrix<f64>>,
    v: Vec<Matrix<f64>>,
}

impl DenseAdam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(lr: f64, shapes: &[(usize, usize)]) -> Self {
        let z = || shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect();
        DenseAdam {
            lr,
            step: 0,
            m: z(),
            v: z(),
        }
    }

    fn step(&mut self, params: [&mut Matrix<f64>; 2], grads: [&Matrix<f64>; 2]) {
        self.step += 1;
        let bc1 = 1.0 - Self::B1.powi(self.step);
        let bc2 = 1.0 - Self::B2.powi(self.step);
        for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
            for (((x, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(self.m[i].data_mut())
                .zip(self.v[i].data_mut())
            {
                *mi = Self::B1 * *mi + (1.0 - Self::B1) * gi;
                *vi = Self::B2 * *vi + (1.0 - Self::B2) * gi * gi;
                *x -= self.lr * (*mi / bc1) / ((*vi / bc2).sqrt() + Self::EPS);
            }
        }
    }
}

/// Trained embeddings with the mean hinge loss of every epoch.
#[derive(Clone, Debug)]
pub struct GeoTraining {
    pub embeddings: GeoEmbeddings,
    pub epoch_losses: Vec<f64>,
}

pub fn train_geo(kg: &KnowledgeGraph, config: &GeoConfig) -> Result<GeoTraining> {
    let init = GeoEmbeddings::init(kg.num_entities(), kg.num_relations(), config)?;
    train_geo_from(init, kg, config)
}

/// Continues margin training from `emb`.
pub fn train_geo_from(
    mut emb: GeoEmbeddings,
    kg: &KnowledgeGraph,
    config: &GeoConfig,
) -> Result<GeoTraining> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let shapes = [emb.entities.shape(), emb.relations.shape()];
    let mut adam = DenseAdam::new(config.learning_rate, &shapes);
    let mut positives = kg.train().to_vec();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        positives.shuffle(&mut rng);
        let (mut sum, mut batches) = (0.0, 0usize);
        for (step, chunk) in positives.chunks(config.batch_size).enumerate() {
            let batch = chunk
                .iter()
                .map(|tp| Ok((*tp, sample_negatives(kg, tp, config.n_negatives, &mut rng)?)))
                .collect::<Result<Vec<_>>>()?;
            let mut ge = Matrix::zeros(shapes[0].0, shapes[0].1);
            let mut gr = Matrix::zeros(shapes[1].0, shapes[1].1);
            let loss = hinge_loss_grad(&emb, &batch, config.margin(), &mut ge, &mut gr);
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    detail: format!("geo loss {loss}"),
                });
            }
            adam.step([&mut emb.entities, &mut emb.relations], [&ge, &gr]);
            if emb.kind == GeoKind::TransE {
                for i in 0..emb.entities.rows() {
                    project_unit_ball(emb.entities.row_mut(i));
                }
            }
            sum += loss;
            batches += 1;
        }
        if !emb.is_finite() {
            return Err(Error::Diverged {
                epoch,
                step: batches,
                detail: "non-finite embeddings".into(),
            });
        }
        let mean = sum / batches.max(1) as f64;
        log::debug!("geo epoch {epoch}: loss {mean:.4}");
        epoch_losses.push(mean);
    }
    Ok(GeoTraining {
        embeddings: emb,
        epoch_losses,
    })
}

/// Which unseen entities received an inductive embedding.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InductiveReport {
    pub completed: Vec<EntityId>,
    /// Entities without a usable support triple; left at their initialization.
    pub unsupported: Vec<EntityId>,
}

/// Embeds every entity in `unseen` as the average of the vectors obtained by
/// solving the translation identity over its support triples. Support triples
/// whose other endpoint is also unseen are ignored.
pub fn inductive_complete(
    emb: &mut GeoEmbeddings,
    support: &[Triple],
    unseen: &[EntityId],
) -> InductiveReport {
    let is_unseen = |e: EntityId| unseen.contains(&e);
    let mut report = InductiveReport::default();
    let mut updates = Vec::new();
    for &e in unseen {
        let mut acc = vec![0.0; emb.entities.cols()];
        let mut n = 0usize;
        for t in support {
            let solved = if t.tail == e && t.head != e && !is_unseen(t.head) {
                let (h, r) = (emb.entity(t.head), emb.relation(t.rel));
                match emb.kind {
                    GeoKind::TransE => h.iter().zip(r).map(|(a, b)| a + b).collect(),
                    GeoKind::RotatE => rotate(h, r),
                }
            } else if t.head == e && t.tail != e && !is_unseen(t.tail) {
                let (tl, r) = (emb.entity(t.tail), emb.relation(t.rel));
                match emb.kind {
                    GeoKind::TransE => tl.iter().zip(r).map(|(a, b)| a - b).collect(),
                    GeoKind::RotatE => {
                        let conj: Vec<f64> = r.iter().map(|p| -p).collect();
                        rotate(tl, &conj)
                    }
                }
            } else {
                continue;
            };
            acc.iter_mut()
                .zip(&solved)
                .for_each(|(a, s): (&mut f64, &f64)| *a += s);
            n += 1;
        }
        if n == 0 {
            log::warn!("entity {e} has no support triple; keeping its initialization");
            report.unsupported.push(e);
        } else {
            acc.iter_mut().for_each(|a| *a /= n as f64);
            updates.push((e, acc));
            report.completed.push(e);
        }
    }
    for (e, v) in updates {
        emb.entities.row_mut(e.index()).copy_from_slice(&v);
    }
    report
}

/// Link scorer over trained graph embeddings.
pub struct GeoScorer<'a> {
    emb: &'a GeoEmbeddings,
}

impl<'a> GeoScorer<'a> {
    pub fn new(emb: &'a GeoEmbeddings) -> Self {
        GeoScorer { emb }
    }
}

impl LinkScorer for GeoScorer<'_> {
    fn num_entities(&self) -> usize {
        self.emb.num_entities()
    }

    fn label(&self) -> String {
        match self.emb.kind {
            GeoKind::TransE => "transe".into(),
            GeoKind::RotatE => "rotate".into(),
        }
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
        _cost: &CostCounter,
    ) -> Result<Vec<f64>> {
        let mut dense = vec![f64::NEG_INFINITY; self.emb.num_entities()];
        for &e in candidates {
            dense[e.index()] = self
                .emb
                .score(&query.triple.with_target(query.direction, e));
        }
        Ok(dense)
    }
}

/// Scores of every entity as the missing slot of `query`.
pub fn score_all_entities(emb: &GeoEmbeddings, triple: &Triple, direction: Direction) -> Vec<f64> {
    (0..emb.num_entities() as u32)
        .map(|e| emb.score(&triple.with_target(direction, EntityId(e))))
        .collect()
}
