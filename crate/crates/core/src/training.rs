//! Negative sampling, the classification and contrastive objectives, Adam,
//! and the training loops.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, ParamStore, Tape, Var};
use crate::encoder::{Mode, StarModel};
use crate::error::{Error, Result};
use crate::eval::{build_queries, evaluate_queries, EvalOptions, StarScorer};
use crate::kg::{Direction, EntityId, KnowledgeGraph, RelationId, Triple};
use crate::scoring::CrossEncoder;
use crate::tensor::{Matrix, Real};
use crate::tokenizer::{EncoderInput, TokenizedTexts};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub n_negatives: usize,
    /// Hinge margin λ of the contrastive objective.
    pub margin: f64,
    /// Weight γ of the contrastive objective.
    pub gamma: f64,
    pub dropout: f64,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    /// Compute dev Hits@10 after every epoch.
    pub dev_eval: bool,
    /// Cap on dev triples used for the per-epoch evaluation.
    pub dev_limit: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            learning_rate: 1e-3,
            epochs: 20,
            n_negatives: 5,
            margin: 1.0,
            gamma: 1.0,
            dropout: 0.1,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.0,
            dev_eval: true,
            dev_limit: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_negatives == 0 {
            return bad("n_negatives must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.margin < 0.0 || self.gamma < 0.0 {
            return bad("margin and gamma must be non-negative");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if self.learning_rate < 0.0 {
            return bad("learning_rate must be non-negative");
        }
        Ok(())
    }
}

/// `m` corruptions of `tp`, each replacing the head or the tail (fair coin)
/// with a uniformly drawn entity, rejecting training triples and `tp`.
pub fn sample_negatives<R: Rng + ?Sized>(
    kg: &KnowledgeGraph,
    tp: &Triple,
    m: usize,
    rng: &mut R,
) -> Result<Vec<Triple>> {
    let n = kg.num_entities() as u32;
    let limit = 1000 * m;
    let mut attempts = 0;
    let mut out = Vec::with_capacity(m);
    while out.len() < m {
        if attempts >= limit {
            return Err(Error::SamplingExhausted { attempts });
        }
        attempts += 1;
        let e = EntityId(rng.gen_range(0..n));
        let cand = if rng.gen_bool(0.5) {
            Triple::new(e, tp.rel, tp.tail)
        } else {
            Triple::new(tp.head, tp.rel, e)
        };
        if cand != *tp && !kg.is_train_triple(&cand) {
            out.push(cand);
        }
    }
    Ok(out)
}

const CLAMP_EPS: f64 = 1e-12;

/// Binary cross-entropy over positives and their negatives, each group
/// normalized by its size and averaged over positives.
pub fn classification_loss(pos: &[f64], negs: &[Vec<f64>]) -> f64 {
    assert_eq!(pos.len(), negs.len());
    if pos.is_empty() {
        return 0.0;
    }
    let clamp = |p: f64| p.clamp(CLAMP_EPS, 1.0 - CLAMP_EPS);
    let total: f64 = pos
        .iter()
        .zip(negs)
        .map(|(&p, ns)| {
            let s = clamp(p).ln() + ns.iter().map(|&q| (1.0 - clamp(q)).ln()).sum::<f64>();
            s / (1 + ns.len()) as f64
        })
        .sum();
    -total / pos.len() as f64
}

/// Mean over positives of the mean hinge `max(0, λ − s_d + s_d′)`.
pub fn contrastive_loss(pos: &[f64], negs: &[Vec<f64>], margin: f64) -> f64 {
    assert_eq!(pos.len(), negs.len());
    if pos.is_empty() {
        return 0.0;
    }
    let total: f64 = pos
        .iter()
        .zip(negs)
        .map(|(&p, ns)| {
            if ns.is_empty() {
                return 0.0;
            }
            ns.iter().map(|&q| (margin + (q - p)).max(0.0)).sum::<f64>() / ns.len() as f64
        })
        .sum();
    total / pos.len() as f64
}

pub fn total_loss(loss_c: f64, loss_d: f64, gamma: f64) -> f64 {
    loss_c + gamma * loss_d
}

/// A positive triple with its corruptions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainExample {
    pub positive: Triple,
    pub negatives: Vec<Triple>,
}

pub fn sample_batch<R: Rng + ?Sized>(
    kg: &KnowledgeGraph,
    positives: &[Triple],
    m: usize,
    rng: &mut R,
) -> Result<Vec<TrainExample>> {
    positives
        .iter()
        .map(|tp| {
            Ok(TrainExample {
                positive: *tp,
                negatives: sample_negatives(kg, tp, m, rng)?,
            })
        })
        .collect()
}

/// Loss terms of one batch recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub loss_c: Var,
    pub loss_d: Var,
    pub total: Var,
}

/// Which objective a gradient check differentiates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Classification,
    Contrastive,
    Total,
}

impl LossVars {
    pub fn get(&self, kind: LossKind) -> Var {
        match kind {
            LossKind::Classification => self.loss_c,
            LossKind::Contrastive => self.loss_d,
            LossKind::Total => self.total,
        }
    }
}

struct Interner<K> {
    index: HashMap<K, usize>,
    keys: Vec<K>,
}

impl<K: std::hash::Hash + Eq + Copy> Interner<K> {
    fn new() -> Self {
        Interner {
            index: HashMap::new(),
            keys: Vec::new(),
        }
    }

    fn id(&mut self, k: K) -> usize {
        *self.index.entry(k).or_insert_with(|| {
            self.keys.push(k);
            self.keys.len() - 1
        })
    }
}

/// Records both objectives for `batch` on `tape`. Every distinct
/// (head, relation) and tail text is encoded once; both branches run through
/// the same parameters.
pub fn batch_loss<T: Real>(
    model: &StarModel<T>,
    tape: &mut Tape<'_, T>,
    texts: &TokenizedTexts,
    batch: &[TrainExample],
    margin: f64,
    gamma: f64,
    mode: &mut Mode<'_>,
) -> LossVars {
    let mut hr: Interner<(EntityId, RelationId)> = Interner::new();
    let mut tails: Interner<EntityId> = Interner::new();
    let mut u_idx = Vec::new();
    let mut v_idx = Vec::new();
    let mut coef_c = Vec::new();
    let mut pos_of_neg = Vec::new();
    let mut neg_rows = Vec::new();
    let mut coef_d = Vec::new();
    let b = batch.len() as f64;
    for ex in batch {
        let group = 1.0 + ex.negatives.len() as f64;
        let pos_row = u_idx.len();
        for (k, t) in std::iter::once(&ex.positive)
            .chain(&ex.negatives)
            .enumerate()
        {
            u_idx.push(hr.id((t.head, t.rel)));
            v_idx.push(tails.id(t.tail));
            let w = -1.0 / (b * group);
            coef_c.extend(if k == 0 { [0.0, w] } else { [w, 0.0] });
            if k > 0 {
                pos_of_neg.push(pos_row);
                neg_rows.push(u_idx.len() - 1);
                coef_d.push(1.0 / (b * ex.negatives.len() as f64));
            }
        }
    }
    let hr_inputs: Vec<EncoderInput> = hr
        .keys
        .iter()
        .map(|&(h, r)| model.hr_input(texts, h, r))
        .collect();
    let t_inputs: Vec<EncoderInput> = tails
        .keys
        .iter()
        .map(|&t| model.t_input(texts, t))
        .collect();
    let us = model.encoder().forward_pooled(tape, &hr_inputs, mode);
    let vs = model.encoder().forward_pooled(tape, &t_inputs, mode);
    let u = tape.gather(us, &u_idx);
    let v = tape.gather(vs, &v_idx);
    let (logits, sd) = model.pair_scores_tape(tape, u, v);

    let logp = tape.log_softmax_rows(logits);
    let cc = tape.constant(Matrix::from_vec(
        u_idx.len(),
        2,
        coef_c.into_iter().map(T::lit).collect(),
    ));
    let weighted = tape.mul(logp, cc);
    let loss_c = tape.sum_all(weighted);

    let loss_d = if neg_rows.is_empty() {
        tape.constant(Matrix::zeros(1, 1))
    } else {
        let sp = tape.gather(sd, &pos_of_neg);
        let sn = tape.gather(sd, &neg_rows);
        let diff = tape.sub(sn, sp);
        let shifted = tape.add_scalar(diff, T::lit(margin));
        let hinge = tape.relu(shifted);
        let w = tape.constant(Matrix::from_vec(
            coef_d.len(),
            1,
            coef_d.into_iter().map(T::lit).collect(),
        ));
        let weighted = tape.mul(hinge, w);
        tape.sum_all(weighted)
    };
    let scaled = tape.scale(loss_d, T::lit(gamma));
    let total = tape.add(loss_c, scaled);
    LossVars {
        loss_c,
        loss_d,
        total,
    }
}

/// Adam with bias correction and optional decoupled weight decay.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    step: i32,
    m: Vec<Matrix<T>>,
    v: Vec<Matrix<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(
        store: &ParamStore<T>,
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
        weight_decay: f64,
    ) -> Self {
        let zeros = || {
            store
                .tensors()
                .iter()
                .map(|t| Matrix::zeros(t.rows(), t.cols()))
                .collect()
        };
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn from_config(store: &ParamStore<T>, c: &TrainConfig) -> Self {
        Self::new(
            store,
            c.learning_rate,
            c.beta1,
            c.beta2,
            c.adam_eps,
            c.weight_decay,
        )
    }

    /// Updates every tensor that received a gradient; `only` restricts the
    /// update to the listed tensor indices.
    pub fn step(
        &mut self,
        store: &mut ParamStore<T>,
        grads: &Gradients<T>,
        only: Option<&[usize]>,
    ) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let (one_b1, one_b2) = (T::lit(1.0 - self.beta1), T::lit(1.0 - self.beta2));
        let lr_t = T::lit(self.lr / bc1);
        let inv_bc2 = T::lit(1.0 / bc2);
        let eps = T::lit(self.eps);
        let decay = T::lit(self.lr * self.weight_decay);
        for (i, (g, p)) in grads.params().iter().zip(store.tensors_mut()).enumerate() {
            if only.is_some_and(|o| !o.contains(&i)) {
                continue;
            }
            let Some(g) = g else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((x, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1 * *mi + one_b1 * gi;
                *vi = b2 * *vi + one_b2 * gi * gi;
                let update = lr_t * *mi / ((*vi * inv_bc2).sqrt() + eps);
                *x -= update + decay * *x;
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss_c: f64,
    pub loss_d: f64,
    pub loss: f64,
    pub dev_hits_at_10: Option<f64>,
}

/// Trains `model` in place. `on_epoch` runs after every epoch, e.g. to write
/// a checkpoint; an error from it stops training.
pub fn train_star(
    model: &mut StarModel<f32>,
    kg: &KnowledgeGraph,
    texts: &TokenizedTexts,
    config: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochLog, &StarModel<f32>) -> Result<()>,
) -> Result<Vec<EpochLog>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::from_config(model.store(), config);
    let mut positives = kg.train().to_vec();
    let mut logs = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        positives.shuffle(&mut rng);
        let (mut sum_c, mut sum_d, mut sum_t, mut batches) = (0.0, 0.0, 0.0, 0usize);
        for (step, chunk) in positives.chunks(config.batch_size).enumerate() {
            let batch = sample_batch(kg, chunk, config.n_negatives, &mut rng)?;
            let grads = {
                let mut tape = Tape::new(model.store());
                let mut mode = Mode::Train {
                    rng: &mut rng,
                    dropout: config.dropout,
                };
                let loss = batch_loss(
                    model,
                    &mut tape,
                    texts,
                    &batch,
                    config.margin,
                    config.gamma,
                    &mut mode,
                );
                let (lc, ld, lt) = (
                    tape.scalar(loss.loss_c) as f64,
                    tape.scalar(loss.loss_d) as f64,
                    tape.scalar(loss.total) as f64,
                );
                if !lt.is_finite() {
                    return Err(Error::Diverged {
                        epoch,
                        step,
                        detail: format!("loss_c={lc} loss_d={ld}"),
                    });
                }
                sum_c += lc;
                sum_d += ld;
                sum_t += lt;
                batches += 1;
                tape.backward(loss.total)
            };
            adam.step(model.store_mut(), &grads, None);
        }
        if !model.store().is_finite() {
            return Err(Error::Diverged {
                epoch,
                step: batches,
                detail: "non-finite parameters".into(),
            });
        }
        let n = batches.max(1) as f64;
        let dev_hits_at_10 = if config.dev_eval && !kg.dev().is_empty() {
            Some(dev_hits_at_10(model, kg, texts, config)?)
        } else {
            None
        };
        let log = EpochLog {
            epoch,
            loss_c: sum_c / n,
            loss_d: sum_d / n,
            loss: sum_t / n,
            dev_hits_at_10,
        };
        log::info!(
            "epoch {epoch}: loss {:.4} (c {:.4}, d {:.4}) dev hits@10 {:?}",
            log.loss,
            log.loss_c,
            log.loss_d,
            log.dev_hits_at_10
        );
        on_epoch(&log, model)?;
        logs.push(log);
    }
    Ok(logs)
}

fn dev_hits_at_10(
    model: &StarModel<f32>,
    kg: &KnowledgeGraph,
    texts: &TokenizedTexts,
    config: &TrainConfig,
) -> Result<f64> {
    let dev = match config.dev_limit {
        Some(n) => &kg.dev()[..n.min(kg.dev().len())],
        None => kg.dev(),
    };
    let queries = build_queries(dev, &Direction::BOTH);
    let options = EvalOptions {
        seed: config.seed,
        threads: 1,
        ..EvalOptions::default()
    };
    let mut scorer = StarScorer::new(model, texts);
    Ok(evaluate_queries(&mut scorer, kg, &queries, &options)?
        .report
        .overall
        .hits_at_10)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub loss: LossKind,
    pub coordinates: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

/// Relative-error floor below which gradients count as zero.
pub const GRADCHECK_FLOOR: f64 = 1e-6;

/// Central finite differences of one objective on `n_coords` randomly chosen
/// parameter coordinates (tensor drawn uniformly, then an entry uniformly).
/// Runs in eval mode so the objective is deterministic.
#[allow(clippy::too_many_arguments)]
pub fn gradient_check<R: Rng + ?Sized>(
    model: &StarModel<f64>,
    texts: &TokenizedTexts,
    batch: &[TrainExample],
    margin: f64,
    gamma: f64,
    kind: LossKind,
    n_coords: usize,
    step: f64,
    rng: &mut R,
) -> GradCheckReport {
    let eval = |store: &ParamStore<f64>| {
        let mut tape = Tape::new(store);
        let loss = batch_loss(
            model,
            &mut tape,
            texts,
            batch,
            margin,
            gamma,
            &mut Mode::Eval,
        );
        tape.scalar(loss.get(kind))
    };
    let analytic = {
        let mut tape = Tape::new(model.store());
        let loss = batch_loss(
            model,
            &mut tape,
            texts,
            batch,
            margin,
            gamma,
            &mut Mode::Eval,
        );
        tape.backward(loss.get(kind))
    };
    let mut store = model.store().clone();
    let mut max_rel: f64 = 0.0;
    let mut max_abs: f64 = 0.0;
    let n_tensors = store.len();
    for _ in 0..n_coords {
        let ti = rng.gen_range(0..n_tensors);
        let k = rng.gen_range(0..store.tensors()[ti].len());
        let orig = store.tensors()[ti].data()[k];
        store.tensors_mut()[ti].data_mut()[k] = orig + step;
        let up = eval(&store);
        store.tensors_mut()[ti].data_mut()[k] = orig - step;
        let down = eval(&store);
        store.tensors_mut()[ti].data_mut()[k] = orig;
        let numeric = (up - down) / (2.0 * step);
        let a = analytic.params()[ti].as_ref().map_or(0.0, |g| g.data()[k]);
        let abs = (a - numeric).abs();
        max_abs = max_abs.max(abs);
        max_rel = max_rel.max(abs / a.abs().max(numeric.abs()).max(GRADCHECK_FLOOR));
    }
    GradCheckReport {
        loss: kind,
        coordinates: n_coords,
        max_rel_error: max_rel,
        max_abs_error: max_abs,
    }
}

/// Trains a cross-encoder on the classification objective alone.
pub fn train_cross_encoder(
    model: &mut CrossEncoder<f32>,
    kg: &KnowledgeGraph,
    texts: &TokenizedTexts,
    config: &TrainConfig,
) -> Result<Vec<EpochLog>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::from_config(&model.store, config);
    let mut positives = kg.train().to_vec();
    let mut logs = Vec::new();
    for epoch in 1..=config.epochs {
        positives.shuffle(&mut rng);
        let (mut sum, mut batches) = (0.0, 0usize);
        for (step, chunk) in positives.chunks(config.batch_size).enumerate() {
            let batch = sample_batch(kg, chunk, config.n_negatives, &mut rng)?;
            let mut triples = Vec::new();
            let mut coef = Vec::new();
            let b = batch.len() as f64;
            for ex in &batch {
                let w = -1.0 / (b * (1 + ex.negatives.len()) as f64);
                triples.push(ex.positive);
                coef.extend([0.0, w]);
                for n in &ex.negatives {
                    triples.push(*n);
                    coef.extend([w, 0.0]);
                }
            }
            let grads = {
                let mut tape = Tape::new(&model.store);
                let mut mode = Mode::Train {
                    rng: &mut rng,
                    dropout: config.dropout,
                };
                let logits = model.logits_tape(&mut tape, texts, &triples, &mut mode);
                let logp = tape.log_softmax_rows(logits);
                let c = tape.constant(Matrix::from_vec(
                    triples.len(),
                    2,
                    coef.into_iter().map(|x| x as f32).collect(),
                ));
                let weighted = tape.mul(logp, c);
                let loss = tape.sum_all(weighted);
                let l = tape.scalar(loss) as f64;
                if !l.is_finite() {
                    return Err(Error::Diverged {
                        epoch,
                        step,
                        detail: format!("loss={l}"),
                    });
                }
                sum += l;
                batches += 1;
                tape.backward(loss)
            };
            adam.step(&mut model.store, &grads, None);
        }
        let n = batches.max(1) as f64;
        logs.push(EpochLog {
            epoch,
            loss_c: sum / n,
            loss_d: 0.0,
            loss: sum / n,
            dev_hits_at_10: None,
        });
    }
    Ok(logs)
}
