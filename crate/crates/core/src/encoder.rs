//! The shared transformer encoder, the two-branch model built on it, and the
//! entity representation cache.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::eval::CostCounter;
use crate::kg::{EntityId, RelationId, Triple};
use crate::scoring::{classify, interactive_concat_tape, xavier, ClassifierHead, DistanceMetric};
use crate::tensor::{Matrix, Real};
use crate::tokenizer::{
    build_context_hr, build_context_t, EncoderInput, TokenizedTexts, Vocabulary,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub d_h: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_len_hr: usize,
    pub max_len_t: usize,
    /// Filled in from the vocabulary when a model is built.
    pub vocab_size: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            d_h: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 128,
            max_len_hr: 64,
            max_len_t: 64,
            vocab_size: 0,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d_h == 0 || self.n_heads == 0 || !self.d_h.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_h={} must be a positive multiple of n_heads={}",
                self.d_h, self.n_heads
            ));
        }
        if self.max_len_hr < 3 || self.max_len_t < 3 {
            return bad("max lengths must be at least 3".into());
        }
        if self.d_ff == 0 {
            return bad("d_ff must be positive".into());
        }
        if self.vocab_size < 4 {
            return bad("vocabulary must hold the four special tokens".into());
        }
        Ok(())
    }
}

/// Forward-pass mode. Dropout is only active in `Train`, at the given rate.
pub enum Mode<'r> {
    Eval,
    Train {
        rng: &'r mut dyn RngCore,
        dropout: f64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct LayerIds {
    w_qkv: ParamId,
    b_qkv: ParamId,
    w_o: ParamId,
    b_o: ParamId,
    ln1_g: ParamId,
    ln1_b: ParamId,
    w_1: ParamId,
    b_1: ParamId,
    w_2: ParamId,
    b_2: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
}

/// Post-norm transformer encoder over token, position and segment embeddings.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TextEncoder {
    d_h: usize,
    n_heads: usize,
    table_len: usize,
    tok: ParamId,
    pos: ParamId,
    seg: ParamId,
    layers: Vec<LayerIds>,
}

impl TextEncoder {
    /// Registers the encoder's tensors in `store`; `table_len` bounds every
    /// input length.
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        config: &EncoderConfig,
        table_len: usize,
        rng: &mut R,
    ) -> Self {
        let d = config.d_h;
        let emb_std = 0.1;
        let tok = store.add("enc.tok", Matrix::randn(config.vocab_size, d, emb_std, rng));
        let pos = store.add("enc.pos", Matrix::randn(table_len, d, emb_std, rng));
        let seg = store.add("enc.seg", Matrix::randn(2, d, emb_std, rng));
        let layers = (0..config.n_layers)
            .map(|l| {
                let p = |s: &str| format!("enc.{l}.{s}");
                LayerIds {
                    w_qkv: store.add(p("w_qkv"), xavier(d, 3 * d, rng)),
                    b_qkv: store.add(p("b_qkv"), Matrix::zeros(1, 3 * d)),
                    w_o: store.add(p("w_o"), xavier(d, d, rng)),
                    b_o: store.add(p("b_o"), Matrix::zeros(1, d)),
                    ln1_g: store.add(p("ln1_g"), Matrix::filled(1, d, T::one())),
                    ln1_b: store.add(p("ln1_b"), Matrix::zeros(1, d)),
                    w_1: store.add(p("w_1"), xavier(d, config.d_ff, rng)),
                    b_1: store.add(p("b_1"), Matrix::zeros(1, config.d_ff)),
                    w_2: store.add(p("w_2"), xavier(config.d_ff, d, rng)),
                    b_2: store.add(p("b_2"), Matrix::zeros(1, d)),
                    ln2_g: store.add(p("ln2_g"), Matrix::filled(1, d, T::one())),
                    ln2_b: store.add(p("ln2_b"), Matrix::zeros(1, d)),
                }
            })
            .collect();
        TextEncoder {
            d_h: d,
            n_heads: config.n_heads,
            table_len,
            tok,
            pos,
            seg,
            layers,
        }
    }

    pub fn d_h(&self) -> usize {
        self.d_h
    }

    pub fn table_len(&self) -> usize {
        self.table_len
    }

    fn dropout<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var, mode: &mut Mode<'_>) -> Var {
        let Mode::Train { rng, dropout: rate } = mode else {
            return x;
        };
        let rate = *rate;
        if rate == 0.0 {
            return x;
        }
        let keep = T::lit(1.0 / (1.0 - rate));
        let mask = (0..tape.value(x).len())
            .map(|_| {
                if rng.gen::<f64>() < rate {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        tape.dropout(x, mask)
    }

    /// Output for every position of every input, packed row-wise in input
    /// order (`Σ len × d_h`).
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<'_, T>,
        inputs: &[EncoderInput],
        mode: &mut Mode<'_>,
    ) -> Var {
        let mut ids = Vec::new();
        let mut positions = Vec::new();
        let mut segments = Vec::new();
        let mut lens = Vec::with_capacity(inputs.len());
        for inp in inputs {
            assert!(
                !inp.is_empty(),
                "encoder input must hold at least one token"
            );
            assert!(
                inp.len() <= self.table_len,
                "input length {} exceeds positional table {}",
                inp.len(),
                self.table_len
            );
            ids.extend(inp.ids.iter().map(|&i| i as usize));
            positions.extend(0..inp.len());
            segments.extend(inp.segments.iter().map(|&s| s as usize));
            lens.push(inp.len());
        }
        let (tok, pos, seg) = (
            tape.param(self.tok),
            tape.param(self.pos),
            tape.param(self.seg),
        );
        let e_tok = tape.gather(tok, &ids);
        let e_pos = tape.gather(pos, &positions);
        let e_seg = tape.gather(seg, &segments);
        let mut x = tape.sum(&[e_tok, e_pos, e_seg]);
        x = self.dropout(tape, x, mode);
        let d = self.d_h;
        for l in &self.layers {
            let p = |id| tape.param(id);
            let (w_qkv, b_qkv, w_o, b_o) = (p(l.w_qkv), p(l.b_qkv), p(l.w_o), p(l.b_o));
            let (ln1_g, ln1_b, ln2_g, ln2_b) = (p(l.ln1_g), p(l.ln1_b), p(l.ln2_g), p(l.ln2_b));
            let (w_1, b_1, w_2, b_2) = (p(l.w_1), p(l.b_1), p(l.w_2), p(l.b_2));

            let qkv = tape.linear(x, w_qkv, b_qkv);
            let q = tape.slice_cols(qkv, 0, d);
            let k = tape.slice_cols(qkv, d, d);
            let v = tape.slice_cols(qkv, 2 * d, d);
            let att = tape.attention(q, k, v, &lens, self.n_heads);
            let att = tape.linear(att, w_o, b_o);
            let att = self.dropout(tape, att, mode);
            let res = tape.add(x, att);
            x = tape.layer_norm(res, ln1_g, ln1_b);

            let h = tape.linear(x, w_1, b_1);
            let h = tape.gelu(h);
            let h = tape.linear(h, w_2, b_2);
            let h = self.dropout(tape, h, mode);
            let res = tape.add(x, h);
            x = tape.layer_norm(res, ln2_g, ln2_b);
        }
        x
    }

    /// The `[CLS]` output of every input (`inputs.len() × d_h`).
    pub fn forward_pooled<T: Real>(
        &self,
        tape: &mut Tape<'_, T>,
        inputs: &[EncoderInput],
        mode: &mut Mode<'_>,
    ) -> Var {
        let out = self.forward(tape, inputs, mode);
        let starts: Vec<usize> = inputs
            .iter()
            .scan(0, |off, inp| {
                let s = *off;
                *off += inp.len();
                Some(s)
            })
            .collect();
        tape.gather(out, &starts)
    }

    /// Eval-mode output for one input: row `i` is position `i`.
    pub fn encode<T: Real>(&self, store: &ParamStore<T>, input: &EncoderInput) -> Matrix<T> {
        let mut tape = Tape::new(store);
        let out = self.forward(&mut tape, std::slice::from_ref(input), &mut Mode::Eval);
        tape.value(out).clone()
    }
}

/// First row of an encoder output.
pub fn pool<T: Real>(output: &Matrix<T>) -> Vec<T> {
    output.row(0).to_vec()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StarConfig {
    pub encoder: EncoderConfig,
    /// Width of the classifier's hidden layer; `d_h` when unset.
    pub classifier_hidden: Option<usize>,
    pub distance: DistanceMetric,
}

impl Default for StarConfig {
    fn default() -> Self {
        StarConfig {
            encoder: EncoderConfig::default(),
            classifier_hidden: None,
            distance: DistanceMetric::NegL2,
        }
    }
}

/// `u` from the head+relation branch and `v` from the tail branch.
#[derive(Clone, Debug, PartialEq)]
pub struct RepPair<T> {
    pub u: Vec<T>,
    pub v: Vec<T>,
}

static NEXT_VERSION: AtomicU64 = AtomicU64::new(1);

fn fresh_version() -> u64 {
    NEXT_VERSION.fetch_add(1, Ordering::Relaxed)
}

/// Both branches share one encoder and one parameter store.
#[derive(Clone, Debug)]
pub struct StarModel<T> {
    config: StarConfig,
    vocab: Vocabulary,
    store: ParamStore<T>,
    encoder: TextEncoder,
    head: ClassifierHead,
    bilinear: Option<ParamId>,
    version: u64,
}

const ENCODE_CHUNK: usize = 64;

impl<T: Real> StarModel<T> {
    pub fn new(config: StarConfig, vocab: Vocabulary) -> Result<Self> {
        let mut config = config;
        config.encoder.vocab_size = vocab.len();
        config.encoder.validate()?;
        let enc = &config.encoder;
        let mut rng = ChaCha8Rng::seed_from_u64(enc.seed);
        let mut store = ParamStore::new();
        let encoder =
            TextEncoder::new(&mut store, enc, enc.max_len_hr.max(enc.max_len_t), &mut rng);
        let hidden = config.classifier_hidden.unwrap_or(enc.d_h);
        let head = ClassifierHead::new(&mut store, "head", 4 * enc.d_h, hidden, &mut rng);
        let bilinear = (config.distance == DistanceMetric::Bilinear)
            .then(|| store.add("bilinear", Matrix::identity(enc.d_h)));
        Ok(StarModel {
            config,
            vocab,
            store,
            encoder,
            head,
            bilinear,
            version: fresh_version(),
        })
    }

    pub fn config(&self) -> &StarConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    /// Mutable parameters; invalidates every cache built from this model.
    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        self.version = fresh_version();
        &mut self.store
    }

    pub fn encoder(&self) -> &TextEncoder {
        &self.encoder
    }

    pub fn head(&self) -> &ClassifierHead {
        &self.head
    }

    pub fn bilinear(&self) -> Option<ParamId> {
        self.bilinear
    }

    pub fn distance(&self) -> DistanceMetric {
        self.config.distance
    }

    pub fn d_h(&self) -> usize {
        self.config.encoder.d_h
    }

    /// Changes whenever the parameters may have changed.
    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn cast<U: Real>(&self) -> StarModel<U> {
        StarModel {
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            store: self.store.cast(),
            encoder: self.encoder.clone(),
            head: self.head,
            bilinear: self.bilinear,
            version: fresh_version(),
        }
    }

    pub fn hr_input(&self, texts: &TokenizedTexts, h: EntityId, r: RelationId) -> EncoderInput {
        build_context_hr(
            texts.entity(h.index()),
            texts.relation(r.index()),
            self.config.encoder.max_len_hr,
        )
    }

    pub fn t_input(&self, texts: &TokenizedTexts, t: EntityId) -> EncoderInput {
        build_context_t(texts.entity(t.index()), self.config.encoder.max_len_t)
    }

    /// Pooled eval-mode representations of `inputs`, one row each; every
    /// input is logged as one Siamese encoder call.
    pub fn encode_inputs(&self, inputs: &[EncoderInput], cost: Option<&CostCounter>) -> Matrix<T> {
        let d = self.d_h();
        let mut data = Vec::with_capacity(inputs.len() * d);
        for chunk in inputs.chunks(ENCODE_CHUNK) {
            if let Some(c) = cost {
                chunk.iter().for_each(|i| c.record_siamese(i.len()));
            }
            let mut tape = Tape::new(&self.store);
            let pooled = self
                .encoder
                .forward_pooled(&mut tape, chunk, &mut Mode::Eval);
            data.extend_from_slice(tape.value(pooled).data());
        }
        Matrix::from_vec(inputs.len(), d, data)
    }

    pub fn encode_hr(
        &self,
        texts: &TokenizedTexts,
        h: EntityId,
        r: RelationId,
        cost: Option<&CostCounter>,
    ) -> Vec<T> {
        self.encode_inputs(&[self.hr_input(texts, h, r)], cost)
            .into_data()
    }

    pub fn encode_t(
        &self,
        texts: &TokenizedTexts,
        t: EntityId,
        cost: Option<&CostCounter>,
    ) -> Vec<T> {
        self.encode_inputs(&[self.t_input(texts, t)], cost)
            .into_data()
    }

    pub fn encode_pair(
        &self,
        texts: &TokenizedTexts,
        triple: &Triple,
        cost: Option<&CostCounter>,
    ) -> RepPair<T> {
        RepPair {
            u: self.encode_hr(texts, triple.head, triple.rel, cost),
            v: self.encode_t(texts, triple.tail, cost),
        }
    }

    /// `s_c` logits and `s_d` for every row pair of `u` and `v` on `tape`.
    pub fn pair_scores_tape(&self, tape: &mut Tape<'_, T>, u: Var, v: Var) -> (Var, Var) {
        let feats = interactive_concat_tape(tape, u, v);
        let logits = self.head.logits_tape(tape, feats);
        let sd = crate::scoring::distance_tape(tape, u, v, self.config.distance, self.bilinear);
        (logits, sd)
    }

    /// `(s_c, s_d)` of one query vector `u` against each row of `vs`.
    pub fn score_against(&self, u: &[T], vs: &Matrix<T>) -> (Vec<f64>, Vec<f64>) {
        let mut tape = Tape::new(&self.store);
        let u1 = tape.constant(Matrix::row_vector(u.to_vec()));
        let ub = tape.broadcast_rows(u1, vs.rows());
        let vv = tape.constant(vs.clone());
        self.read_scores(&mut tape, ub, vv)
    }

    /// `(s_c, s_d)` of each row of `us` against one tail vector `v`.
    pub fn score_rows_against(&self, us: &Matrix<T>, v: &[T]) -> (Vec<f64>, Vec<f64>) {
        let mut tape = Tape::new(&self.store);
        let uu = tape.constant(us.clone());
        let v1 = tape.constant(Matrix::row_vector(v.to_vec()));
        let vb = tape.broadcast_rows(v1, us.rows());
        self.read_scores(&mut tape, uu, vb)
    }

    fn read_scores(&self, tape: &mut Tape<'_, T>, u: Var, v: Var) -> (Vec<f64>, Vec<f64>) {
        let (logits, sd) = self.pair_scores_tape(tape, u, v);
        let lv = tape.value(logits);
        let s_c = (0..lv.rows())
            .map(|i| classify([lv[(i, 0)], lv[(i, 1)]]).1.to_f64_lossy())
            .collect();
        let s_d = tape
            .value(sd)
            .data()
            .iter()
            .map(|x| x.to_f64_lossy())
            .collect();
        (s_c, s_d)
    }

    /// `(s_c, s_d)` of a single pair.
    pub fn score_pair(&self, pair: &RepPair<T>) -> (f64, f64) {
        let (c, d) = self.score_against(&pair.u, &Matrix::row_vector(pair.v.clone()));
        (c[0], d[0])
    }

    /// Rebuilds a model around a loaded parameter store. The store must match
    /// the layout `new` would create for `config`.
    pub(crate) fn with_store(
        config: StarConfig,
        vocab: Vocabulary,
        store: ParamStore<T>,
    ) -> Result<Self> {
        let mut model = Self::new(config, vocab)?;
        if model.store.names() != store.names() {
            return Err(Error::Format(
                "checkpoint tensor names do not match the model layout".into(),
            ));
        }
        for (want, got) in model.store.tensors().iter().zip(store.tensors()) {
            if want.shape() != got.shape() {
                return Err(Error::Format(format!(
                    "checkpoint tensor shape {:?} differs from {:?}",
                    got.shape(),
                    want.shape()
                )));
            }
        }
        model.store = store;
        model.version = fresh_version();
        Ok(model)
    }
}

/// Tail-branch representations of every entity for one parameter version.
#[derive(Clone, Debug, PartialEq)]
pub struct EntityRepCache<T> {
    reps: Matrix<T>,
    version: u64,
}

impl<T: Real> EntityRepCache<T> {
    pub fn reps(&self) -> &Matrix<T> {
        &self.reps
    }

    pub fn get(&self, e: EntityId) -> &[T] {
        self.reps.row(e.index())
    }

    pub fn len(&self) -> usize {
        self.reps.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.reps.rows() == 0
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn is_current(&self, model: &StarModel<T>) -> bool {
        self.version == model.version()
    }

    /// Recomputes only when `model` changed since the cache was built.
    /// Returns whether any encoding happened.
    pub fn refresh(
        &mut self,
        model: &StarModel<T>,
        texts: &TokenizedTexts,
        cost: Option<&CostCounter>,
    ) -> bool {
        if self.is_current(model) {
            return false;
        }
        *self = precompute_entity_reps(model, texts, cost);
        true
    }

    /// A cache built from stored representations, e.g. loaded from disk.
    pub fn from_parts(reps: Matrix<T>, version: u64) -> Self {
        EntityRepCache { reps, version }
    }
}

/// One tail-branch encoding per entity.
pub fn precompute_entity_reps<T: Real>(
    model: &StarModel<T>,
    texts: &TokenizedTexts,
    cost: Option<&CostCounter>,
) -> EntityRepCache<T> {
    let inputs: Vec<EncoderInput> = (0..texts.num_entities())
        .map(|i| model.t_input(texts, EntityId(i as u32)))
        .collect();
    EntityRepCache {
        reps: model.encode_inputs(&inputs, cost),
        version: model.version(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::Vocabulary;

    fn model(seed: u64) -> StarModel<f64> {
        let vocab = Vocabulary::build(["alpha beta gamma delta", "rel one two"]);
        let config = StarConfig {
            encoder: EncoderConfig {
                d_h: 8,
                n_heads: 2,
                d_ff: 16,
                max_len_hr: 12,
                max_len_t: 10,
                seed,
                ..EncoderConfig::default()
            },
            ..StarConfig::default()
        };
        StarModel::new(config, vocab).unwrap()
    }

    fn input(model: &StarModel<f64>, words: &str) -> EncoderInput {
        let ids = crate::tokenizer::tokenize(words, model.vocab(), 64);
        build_context_t(&ids, model.config().encoder.max_len_t)
    }

    #[test]
    fn output_shape_and_pool() {
        let m = model(1);
        let inp = EncoderInput {
            ids: vec![crate::tokenizer::CLS],
            segments: vec![0],
        };
        let out = m.encoder().encode(m.store(), &inp);
        assert_eq!(out.shape(), (1, 8));
        assert_eq!(pool(&out), out.row(0).to_vec());
        let m2 = Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(pool(&m2), vec![1.0, 2.0]);
    }

    #[test]
    fn deterministic_given_seed() {
        let (a, b) = (model(5), model(5));
        let inp = input(&a, "alpha gamma");
        assert_eq!(
            a.encoder().encode(a.store(), &inp),
            b.encoder().encode(b.store(), &inp)
        );
        let c = model(6);
        assert_ne!(
            a.encoder().encode(a.store(), &inp),
            c.encoder().encode(c.store(), &inp)
        );
    }

    #[test]
    fn zero_params_make_output_token_independent() {
        let mut m = model(2);
        let store = m.store_mut();
        for (name, t) in store.names().to_vec().iter().zip(store.tensors_mut()) {
            if !name.ends_with("_g") {
                t.data_mut().iter_mut().for_each(|x| *x = 0.0);
            }
        }
        let a = m.encoder().encode(m.store(), &input(&m, "alpha beta"));
        let b = m.encoder().encode(m.store(), &input(&m, "gamma delta"));
        assert_eq!(a, b);
    }

    #[test]
    fn batched_encoding_is_bit_identical_to_single() {
        let m = model(3);
        let inputs = vec![
            input(&m, "alpha"),
            input(&m, "beta gamma delta"),
            input(&m, ""),
        ];
        let batch = m.encode_inputs(&inputs, None);
        for (i, inp) in inputs.iter().enumerate() {
            let single = m.encode_inputs(std::slice::from_ref(inp), None);
            assert_eq!(batch.row(i), single.row(0));
        }
    }

    #[test]
    fn token_order_matters() {
        let m = model(4);
        let a = m.encode_inputs(&[input(&m, "alpha beta")], None);
        let b = m.encode_inputs(&[input(&m, "beta alpha")], None);
        assert!(a
            .data()
            .iter()
            .zip(b.data())
            .any(|(x, y)| (x - y).abs() > 1e-9));
    }

    #[test]
    fn cast_preserves_layout() {
        let m = model(7);
        let f: StarModel<f32> = m.cast();
        assert_eq!(f.store().names(), m.store().names());
        assert_ne!(f.version(), m.version());
    }
}
