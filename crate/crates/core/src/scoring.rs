//! Triple plausibility scores computed from a pair of contextualized vectors,
//! the ranking bases that combine them, and a cross-encoder baseline.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_in_place, ParamId, ParamStore, Tape, Var};
use crate::encoder::{EncoderConfig, Mode, TextEncoder};
use crate::error::{Error, Result};
use crate::eval::CostCounter;
use crate::kg::Triple;
use crate::tensor::{cosine, dot, Matrix, Real};
use crate::tokenizer::{build_context_triple, EncoderInput, TokenizedTexts, Vocabulary};

/// `[u; u⊙v; u−v; v]`.
pub fn interactive_concat<T: Real>(u: &[T], v: &[T]) -> Result<Vec<T>> {
    if u.len() != v.len() {
        return Err(Error::DimMismatch {
            expected: u.len(),
            actual: v.len(),
        });
    }
    let mut out = Vec::with_capacity(4 * u.len());
    out.extend_from_slice(u);
    out.extend(u.iter().zip(v).map(|(&a, &b)| a * b));
    out.extend(u.iter().zip(v).map(|(&a, &b)| a - b));
    out.extend_from_slice(v);
    Ok(out)
}

/// Row-wise [`interactive_concat`] of two `n×d` tape values.
pub fn interactive_concat_tape<T: Real>(tape: &mut Tape<'_, T>, u: Var, v: Var) -> Var {
    let prod = tape.mul(u, v);
    let diff = tape.sub(u, v);
    tape.concat_cols(&[u, prod, diff, v])
}

/// Softmax of two logits and the positive probability `p[1]`.
pub fn classify<T: Real>(logits: [T; 2]) -> ([T; 2], T) {
    let mut p = logits;
    softmax_in_place(&mut p);
    (p, p[1])
}

/// Two-layer MLP from a feature vector to logits (two for the plausibility
/// classifier), with a tanh-approximated GELU between the layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ClassifierHead {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl ClassifierHead {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        Self::with_outputs(store, prefix, input, hidden, 2, rng)
    }

    pub fn with_outputs<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        input: usize,
        hidden: usize,
        outputs: usize,
        rng: &mut R,
    ) -> Self {
        ClassifierHead {
            w1: store.add(format!("{prefix}.w1"), xavier(input, hidden, rng)),
            b1: store.add(format!("{prefix}.b1"), Matrix::zeros(1, hidden)),
            w2: store.add(format!("{prefix}.w2"), xavier(hidden, outputs, rng)),
            b2: store.add(format!("{prefix}.b2"), Matrix::zeros(1, outputs)),
        }
    }

    /// Logits for every row of `features`.
    pub fn logits_tape<T: Real>(&self, tape: &mut Tape<'_, T>, features: Var) -> Var {
        let (w1, b1, w2, b2) = (
            tape.param(self.w1),
            tape.param(self.b1),
            tape.param(self.w2),
            tape.param(self.b2),
        );
        let h = tape.linear(features, w1, b1);
        let h = tape.gelu(h);
        tape.linear(h, w2, b2)
    }

    pub fn logits<T: Real>(&self, store: &ParamStore<T>, features: &[T]) -> [T; 2] {
        let mut tape = Tape::new(store);
        let x = tape.constant(Matrix::row_vector(features.to_vec()));
        let l = self.logits_tape(&mut tape, x);
        let v = tape.value(l).data();
        [v[0], v[1]]
    }

    pub fn params(&self) -> [ParamId; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }
}

pub(crate) fn xavier<T: Real, R: Rng + ?Sized>(
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Matrix<T> {
    Matrix::randn(
        fan_in,
        fan_out,
        (2.0 / (fan_in + fan_out) as f64).sqrt(),
        rng,
    )
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceMetric {
    #[default]
    NegL2,
    /// `uᵀWv` with a learned `d×d` matrix, initialized to the identity.
    Bilinear,
    Cosine,
}

impl std::str::FromStr for DistanceMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "negl2" | "l2" => Ok(DistanceMetric::NegL2),
            "bilinear" => Ok(DistanceMetric::Bilinear),
            "cosine" | "cos" => Ok(DistanceMetric::Cosine),
            other => Err(Error::Config(format!("unknown distance metric `{other}`"))),
        }
    }
}

/// Spatial score `s_d`; `weight` is required for [`DistanceMetric::Bilinear`].
pub fn distance_score<T: Real>(
    u: &[T],
    v: &[T],
    metric: DistanceMetric,
    weight: Option<&Matrix<T>>,
) -> T {
    match metric {
        DistanceMetric::NegL2 => {
            let s: T = u.iter().zip(v).map(|(&a, &b)| (a - b) * (a - b)).sum();
            -s.sqrt()
        }
        DistanceMetric::Cosine => cosine(u, v),
        DistanceMetric::Bilinear => {
            let w = weight.expect("bilinear metric needs its weight matrix");
            let uw = Matrix::row_vector(u.to_vec()).matmul(w);
            dot(uw.data(), v)
        }
    }
}

/// Row-wise `s_d` of two `n×d` tape values, as an `n×1` value.
pub fn distance_tape<T: Real>(
    tape: &mut Tape<'_, T>,
    u: Var,
    v: Var,
    metric: DistanceMetric,
    weight: Option<ParamId>,
) -> Var {
    match metric {
        DistanceMetric::NegL2 => {
            let d = tape.sub(u, v);
            let n = tape.row_norm(d);
            tape.scale(n, -T::one())
        }
        DistanceMetric::Cosine => tape.row_cosine(u, v),
        DistanceMetric::Bilinear => {
            let w = tape.param(weight.expect("bilinear metric needs its weight matrix"));
            let uw = tape.matmul(u, w);
            let p = tape.mul(uw, v);
            tape.row_sum(p)
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RankingBasis {
    #[default]
    Sc,
    Sd,
    Sum,
    Prod,
}

impl RankingBasis {
    pub const ALL: [RankingBasis; 4] = [
        RankingBasis::Sc,
        RankingBasis::Sd,
        RankingBasis::Sum,
        RankingBasis::Prod,
    ];

    pub fn needs_rescale(self) -> bool {
        matches!(self, RankingBasis::Sum | RankingBasis::Prod)
    }
}

impl std::str::FromStr for RankingBasis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sc" => Ok(RankingBasis::Sc),
            "sd" => Ok(RankingBasis::Sd),
            "sum" => Ok(RankingBasis::Sum),
            "prod" => Ok(RankingBasis::Prod),
            other => Err(Error::Config(format!("unknown ranking basis `{other}`"))),
        }
    }
}

/// Min and max of a candidate list's scores, used for min-max rescaling.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RescaleContext {
    pub min: f64,
    pub max: f64,
}

impl RescaleContext {
    /// `None` for an empty list.
    pub fn from_scores(scores: &[f64]) -> Option<Self> {
        let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (!scores.is_empty()).then_some(RescaleContext { min, max })
    }

    /// Maps `x` into [0, 1]; every value maps to 0.5 when `max == min`.
    pub fn rescale(&self, x: f64) -> f64 {
        if self.max > self.min {
            (x - self.min) / (self.max - self.min)
        } else {
            0.5
        }
    }
}

/// Min-max rescaling of a whole list (all 0.5 when the values are equal).
pub fn rescale_scores(scores: &[f64]) -> Vec<f64> {
    match RescaleContext::from_scores(scores) {
        Some(ctx) => scores.iter().map(|&x| ctx.rescale(x)).collect(),
        None => Vec::new(),
    }
}

pub fn combine_basis(
    s_c: f64,
    s_d: f64,
    basis: RankingBasis,
    ctx: Option<&RescaleContext>,
) -> Result<f64> {
    match basis {
        RankingBasis::Sc => Ok(s_c),
        RankingBasis::Sd => Ok(s_d),
        RankingBasis::Sum | RankingBasis::Prod => {
            let ctx = ctx.ok_or_else(|| {
                Error::Config(format!(
                    "{basis:?} ranking needs the candidate list's s_d range"
                ))
            })?;
            let r = ctx.rescale(s_d);
            Ok(if basis == RankingBasis::Sum {
                r + s_c
            } else {
                r * s_c
            })
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreBundle {
    pub s_c: f64,
    pub s_d: f64,
    pub basis: RankingBasis,
    pub combined: f64,
}

/// Combined scores for a whole candidate list, rescaling `s_d` over that list.
pub fn score_candidates(s_c: &[f64], s_d: &[f64], basis: RankingBasis) -> Vec<ScoreBundle> {
    let ctx = RescaleContext::from_scores(s_d);
    s_c.iter()
        .zip(s_d)
        .map(|(&c, &d)| ScoreBundle {
            s_c: c,
            s_d: d,
            basis,
            combined: combine_basis(c, d, basis, ctx.as_ref())
                .expect("context present for non-empty list"),
        })
        .collect()
}

/// A single encoder over `[CLS] h [SEP] r [SEP] t [SEP]` with its own
/// classifier head; one encoder call per scored triple.
#[derive(Clone, Debug)]
pub struct CrossEncoder<T> {
    pub config: EncoderConfig,
    pub vocab: Vocabulary,
    pub store: ParamStore<T>,
    encoder: TextEncoder,
    head: ClassifierHead,
}

impl<T: Real> CrossEncoder<T> {
    /// The triple sequence length budget is `max_len_hr + max_len_t`.
    pub fn new(config: EncoderConfig, vocab: Vocabulary) -> Result<Self> {
        let mut config = config;
        config.vocab_size = vocab.len();
        config.validate()?;
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let encoder = TextEncoder::new(
            &mut store,
            &config,
            config.max_len_hr + config.max_len_t,
            &mut rng,
        );
        let head = ClassifierHead::new(&mut store, "cross_head", config.d_h, config.d_h, &mut rng);
        Ok(CrossEncoder {
            config,
            vocab,
            store,
            encoder,
            head,
        })
    }

    /// Rebuilds a model around saved parameters, checking names and shapes.
    pub(crate) fn with_store(
        config: EncoderConfig,
        vocab: Vocabulary,
        store: ParamStore<T>,
    ) -> Result<Self> {
        let mut model = Self::new(config, vocab)?;
        let same = model.store.names() == store.names()
            && model
                .store
                .tensors()
                .iter()
                .zip(store.tensors())
                .all(|(a, b)| a.shape() == b.shape());
        if !same {
            return Err(Error::Format(
                "checkpoint tensors do not match the cross-encoder layout".into(),
            ));
        }
        model.store = store;
        Ok(model)
    }

    pub fn max_len(&self) -> usize {
        self.config.max_len_hr + self.config.max_len_t
    }

    pub fn encoder(&self) -> &TextEncoder {
        &self.encoder
    }

    pub fn head(&self) -> &ClassifierHead {
        &self.head
    }

    pub fn input(&self, texts: &TokenizedTexts, t: &Triple) -> EncoderInput {
        build_context_triple(
            texts.entity(t.head.index()),
            texts.relation(t.rel.index()),
            texts.entity(t.tail.index()),
            self.max_len(),
        )
    }

    /// Logits for a batch of triples on `tape`.
    pub fn logits_tape(
        &self,
        tape: &mut Tape<'_, T>,
        texts: &TokenizedTexts,
        triples: &[Triple],
        mode: &mut Mode<'_>,
    ) -> Var {
        let inputs: Vec<_> = triples.iter().map(|t| self.input(texts, t)).collect();
        let pooled = self.encoder.forward_pooled(tape, &inputs, mode);
        self.head.logits_tape(tape, pooled)
    }

    /// Positive probabilities for `triples`, logging one call per triple.
    pub fn score(
        &self,
        texts: &TokenizedTexts,
        triples: &[Triple],
        cost: &CostCounter,
    ) -> Vec<f64> {
        let mut out = Vec::with_capacity(triples.len());
        for chunk in triples.chunks(64) {
            let inputs: Vec<_> = chunk.iter().map(|t| self.input(texts, t)).collect();
            for inp in &inputs {
                cost.record_cross(inp.len());
            }
            let mut tape = Tape::new(&self.store);
            let pooled = self
                .encoder
                .forward_pooled(&mut tape, &inputs, &mut Mode::Eval);
            let logits = self.head.logits_tape(&mut tape, pooled);
            let lv = tape.value(logits);
            out.extend((0..chunk.len()).map(|i| {
                let row = lv.row(i);
                classify([row[0], row[1]]).1.to_f64_lossy()
            }));
        }
        out
    }
}
