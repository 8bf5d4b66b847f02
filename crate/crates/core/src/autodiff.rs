//! Reverse-mode differentiation over matrices.
//!
//! A [`Tape`] borrows a [`ParamStore`]; parameters are addressed by
//! [`ParamId`] and appear on the tape as leaves without being copied. Every
//! op records its inputs so [`Tape::backward`] can replay them in reverse.

use sha2::{Digest, Sha256};

use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, Matrix, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable tensors, kept in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Matrix<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix<T>) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Matrix<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix<T> {
        &mut self.tensors[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Matrix<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Matrix<T>] {
        &mut self.tensors
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Matrix::len).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Matrix::cast).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Matrix::is_finite)
    }

    /// SHA-256 over names, shapes and the little-endian f64 image of every value.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.names.iter().zip(&self.tensors) {
            h.update(name.as_bytes());
            h.update((t.rows() as u64).to_le_bytes());
            h.update((t.cols() as u64).to_le_bytes());
            for x in t.data() {
                h.update(x.to_f64_lossy().to_le_bytes());
            }
        }
        h.finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect::<String>()
    }
}

/// Handle to a value on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op<T> {
    Constant,
    Input,
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Gelu(Var),
    Relu(Var),
    Sigmoid(Var),
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    StackRows(Vec<Var>),
    Row {
        x: Var,
        index: usize,
    },
    BroadcastRows(Var),
    RowSum(Var),
    RowNorm(Var),
    RowCosine(Var, Var),
    Pick {
        x: Var,
        row: usize,
        col: usize,
    },
    SumAll(Var),
    Sum(Vec<Var>),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        lens: Vec<usize>,
        heads: usize,
        probs: Vec<T>,
    },
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Matrix<T>,
    op: Op<T>,
}

pub struct Tape<'p, T> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
}

/// Gradients of one backward pass.
pub struct Gradients<T> {
    params: Vec<Option<Matrix<T>>>,
    inputs: Vec<(Var, Matrix<T>)>,
}

impl<T: Real> Gradients<T> {
    pub fn param(&self, id: ParamId) -> Option<&Matrix<T>> {
        self.params[id.0].as_ref()
    }

    pub fn params(&self) -> &[Option<Matrix<T>>] {
        &self.params
    }

    pub fn input(&self, var: Var) -> Option<&Matrix<T>> {
        self.inputs.iter().find(|(v, _)| *v == var).map(|(_, g)| g)
    }
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl<'p, T: Real> Tape<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Tape {
            params,
            nodes: Vec::with_capacity(256),
        }
    }

    pub fn param(&self, id: ParamId) -> Var {
        Var(id.0)
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        let np = self.params.len();
        if v.0 < np {
            self.params.get(ParamId(v.0))
        } else {
            &self.nodes[v.0 - np].value
        }
    }

    pub fn scalar(&self, v: Var) -> T {
        self.value(v).data()[0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.params.len() + self.nodes.len() - 1)
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Constant)
    }

    /// A leaf whose gradient is reported by [`Gradients::input`].
    pub fn input(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Input)
    }

    /// Rows of `table` selected by `ids`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let mut out = Matrix::zeros(ids.len(), t.cols());
        for (i, &id) in ids.iter().enumerate() {
            out.row_mut(i).copy_from_slice(t.row(id));
        }
        self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Matrix<T> {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "elementwise shape mismatch");
        Matrix::from_vec(
            x.rows(),
            x.cols(),
            x.data()
                .iter()
                .zip(y.data())
                .map(|(&p, &q)| f(p, q))
                .collect(),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_with(a, b, |p, q| p + q);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_with(a, b, |p, q| p - q);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_with(a, b, |p, q| p * q);
        self.push(v, Op::Mul(a, b))
    }

    /// Adds the `1×c` row `bias` to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let mut out = self.value(a).clone();
        let b = self.value(bias);
        assert_eq!(b.shape(), (1, out.cols()), "bias shape");
        for i in 0..out.rows() {
            for (o, &bj) in out.row_mut(i).iter_mut().zip(b.data()) {
                *o += bj;
            }
        }
        self.push(out, Op::AddRow(a, bias))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_nt(self.value(b));
        self.push(v, Op::MatMulNT(a, b))
    }

    /// `x · W + b`
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Var {
        let y = self.matmul(x, weight);
        self.add_row(y, bias)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).map(|x| x + s);
        self.push(v, Op::AddScalar(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for i in 0..out.rows() {
            softmax_in_place(out.row_mut(i));
        }
        self.push(out, Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for i in 0..out.rows() {
            let row = out.row_mut(i);
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<T>().ln();
            for x in row.iter_mut() {
                *x -= lse;
            }
        }
        self.push(out, Op::LogSoftmaxRows(a))
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` (both `1×c`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (n, c) = xv.shape();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let eps = T::lit(LN_EPS);
        let cf = T::from_usize(c).unwrap();
        let mut xhat = vec![T::zero(); n * c];
        let mut inv_std = vec![T::zero(); n];
        let mut out = Matrix::zeros(n, c);
        for i in 0..n {
            let row = xv.row(i);
            let mean = row.iter().copied().sum::<T>() / cf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cf;
            let is = T::one() / (var + eps).sqrt();
            inv_std[i] = is;
            let o = out.row_mut(i);
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[i * c + j] = h;
                o[j] = h * g[j] + b[j];
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let c = T::lit(GELU_C);
        let k = T::lit(GELU_A);
        let half = T::lit(0.5);
        let v = self
            .value(a)
            .map(|x| half * x * (T::one() + (c * (x + k * x * x * x)).tanh()));
        self.push(v, Op::Gelu(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(T::zero()));
        self.push(v, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    /// Multiplies by a fixed mask (entries are 0 or the inverse keep rate).
    pub fn dropout(&mut self, x: Var, mask: Vec<T>) -> Var {
        let xv = self.value(x);
        assert_eq!(mask.len(), xv.len());
        let out = Matrix::from_vec(
            xv.rows(),
            xv.cols(),
            xv.data().iter().zip(&mask).map(|(&p, &m)| p * m).collect(),
        );
        self.push(out, Op::Dropout { x, mask })
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        let mut out = Matrix::zeros(xv.rows(), len);
        for i in 0..xv.rows() {
            out.row_mut(i)
                .copy_from_slice(&xv.row(i)[start..start + len]);
        }
        self.push(out, Op::SliceCols { x, start })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Matrix::zeros(rows, cols);
        for i in 0..rows {
            let mut off = 0;
            for &p in parts {
                let pv = self.value(p);
                assert_eq!(pv.rows(), rows, "concat_cols row mismatch");
                out.row_mut(i)[off..off + pv.cols()].copy_from_slice(pv.row(i));
                off += pv.cols();
            }
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn stack_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let rows: usize = parts.iter().map(|&p| self.value(p).rows()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.cols(), cols, "stack_rows column mismatch");
            data.extend_from_slice(pv.data());
        }
        self.push(
            Matrix::from_vec(rows, cols, data),
            Op::StackRows(parts.to_vec()),
        )
    }

    pub fn row(&mut self, x: Var, index: usize) -> Var {
        let v = Matrix::row_vector(self.value(x).row(index).to_vec());
        self.push(v, Op::Row { x, index })
    }

    /// Repeats the `1×c` row `x` `n` times.
    pub fn broadcast_rows(&mut self, x: Var, n: usize) -> Var {
        let r = self.value(x);
        assert_eq!(r.rows(), 1);
        let mut data = Vec::with_capacity(n * r.cols());
        for _ in 0..n {
            data.extend_from_slice(r.data());
        }
        let cols = r.cols();
        self.push(Matrix::from_vec(n, cols, data), Op::BroadcastRows(x))
    }

    pub fn row_sum(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = (0..xv.rows())
            .map(|i| xv.row(i).iter().copied().sum())
            .collect();
        let n = xv.rows();
        self.push(Matrix::from_vec(n, 1, data), Op::RowSum(x))
    }

    /// Euclidean norm of every row.
    pub fn row_norm(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = (0..xv.rows())
            .map(|i| crate::tensor::l2_norm(xv.row(i)))
            .collect();
        let n = xv.rows();
        self.push(Matrix::from_vec(n, 1, data), Op::RowNorm(x))
    }

    /// Cosine similarity of matching rows; 0 for a zero row.
    pub fn row_cosine(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape());
        let data = (0..av.rows())
            .map(|i| crate::tensor::cosine(av.row(i), bv.row(i)))
            .collect();
        let n = av.rows();
        self.push(Matrix::from_vec(n, 1, data), Op::RowCosine(a, b))
    }

    pub fn pick(&mut self, x: Var, row: usize, col: usize) -> Var {
        let v = self.value(x)[(row, col)];
        self.push(Matrix::from_vec(1, 1, vec![v]), Op::Pick { x, row, col })
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Matrix::from_vec(1, 1, vec![s]), Op::SumAll(x))
    }

    /// Elementwise sum of equally shaped values.
    pub fn sum(&mut self, parts: &[Var]) -> Var {
        let mut acc = self.value(parts[0]).clone();
        for &p in &parts[1..] {
            acc.add_assign(self.value(p));
        }
        self.push(acc, Op::Sum(parts.to_vec()))
    }

    /// Multi-head scaled dot-product self-attention over packed sequences.
    ///
    /// `q`, `k`, `v` hold the rows of several sequences stacked in order;
    /// `lens` gives each sequence's length. Positions attend only within
    /// their own sequence. The result has the shape of `q`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, lens: &[usize], heads: usize) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (n, d) = qv.shape();
        assert_eq!(lens.iter().sum::<usize>(), n, "sequence lengths");
        assert_eq!(d % heads, 0, "width divisible by heads");
        let dk = d / heads;
        let scale = T::one() / T::from_usize(dk).unwrap().sqrt();
        let mut out = Matrix::zeros(n, d);
        let mut probs = Vec::with_capacity(lens.iter().map(|l| l * l).sum::<usize>() * heads);
        let mut start = 0;
        for &len in lens {
            for h in 0..heads {
                let c0 = h * dk;
                for i in 0..len {
                    let qi = &qv.row(start + i)[c0..c0 + dk];
                    let base = probs.len();
                    for j in 0..len {
                        let kj = &kv.row(start + j)[c0..c0 + dk];
                        probs.push(crate::tensor::dot(qi, kj) * scale);
                    }
                    softmax_in_place(&mut probs[base..]);
                    let orow = &mut out.row_mut(start + i)[c0..c0 + dk];
                    for j in 0..len {
                        let p = probs[base + j];
                        for (o, &x) in orow.iter_mut().zip(&vv.row(start + j)[c0..c0 + dk]) {
                            *o += p * x;
                        }
                    }
                }
            }
            start += len;
        }
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                lens: lens.to_vec(),
                heads,
                probs,
            },
        )
    }

    /// Back-propagates from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).shape(), (1, 1), "loss must be a scalar");
        let np = self.params.len();
        let total = np + self.nodes.len();
        let mut grads: Vec<Option<Matrix<T>>> = vec![None; total];
        grads[loss.0] = Some(Matrix::filled(1, 1, T::one()));

        for idx in (np..total).rev() {
            let node = &self.nodes[idx - np];
            if matches!(node.op, Op::Constant | Op::Input) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(node, &g, &mut grads);
        }

        let mut inputs = Vec::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Input) {
                if let Some(g) = grads[np + i].take() {
                    inputs.push((Var(np + i), g));
                }
            }
        }
        grads.truncate(np);
        Gradients {
            params: grads,
            inputs,
        }
    }

    fn backprop_node(&self, node: &Node<T>, g: &Matrix<T>, grads: &mut [Option<Matrix<T>>]) {
        let y = &node.value;
        match &node.op {
            Op::Constant | Op::Input => {}
            Op::Gather { table, ids } => {
                let t = self.value(*table);
                let gt = grad_slot(grads, *table, t.rows(), t.cols());
                for (i, &id) in ids.iter().enumerate() {
                    for (o, &gi) in gt.row_mut(id).iter_mut().zip(g.row(i)) {
                        *o += gi;
                    }
                }
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g);
                accumulate(grads, *b, g);
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g);
                accumulate(grads, *b, &g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                accumulate(grads, *a, &elementwise(g, bv, |p, q| p * q));
                accumulate(grads, *b, &elementwise(g, av, |p, q| p * q));
            }
            Op::AddRow(a, bias) => {
                accumulate(grads, *a, g);
                let gb = grad_slot(grads, *bias, 1, g.cols());
                for i in 0..g.rows() {
                    for (o, &gi) in gb.data_mut().iter_mut().zip(g.row(i)) {
                        *o += gi;
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.wants_grad(*a) {
                    let ga = grad_slot(grads, *a, av.rows(), av.cols());
                    gemm_nt(g, bv, ga);
                }
                if self.wants_grad(*b) {
                    let gb = grad_slot(grads, *b, bv.rows(), bv.cols());
                    gemm_tn(av, g, gb);
                }
            }
            Op::MatMulNT(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.wants_grad(*a) {
                    let ga = grad_slot(grads, *a, av.rows(), av.cols());
                    gemm_nn(g, bv, ga);
                }
                if self.wants_grad(*b) {
                    let gb = grad_slot(grads, *b, bv.rows(), bv.cols());
                    gemm_tn(g, av, gb);
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                accumulate(grads, *a, &g.map(|x| x * s));
            }
            Op::AddScalar(a) => accumulate(grads, *a, g),
            Op::SoftmaxRows(a) => {
                let mut ga = Matrix::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let (yr, gr) = (y.row(i), g.row(i));
                    let s: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                    for (j, o) in ga.row_mut(i).iter_mut().enumerate() {
                        *o = yr[j] * (gr[j] - s);
                    }
                }
                accumulate(grads, *a, &ga);
            }
            Op::LogSoftmaxRows(a) => {
                let mut ga = Matrix::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let (yr, gr) = (y.row(i), g.row(i));
                    let s: T = gr.iter().copied().sum();
                    for (j, o) in ga.row_mut(i).iter_mut().enumerate() {
                        *o = gr[j] - yr[j].exp() * s;
                    }
                }
                accumulate(grads, *a, &ga);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (n, c) = y.shape();
                let gam = self.value(*gamma).data();
                let cf = T::from_usize(c).unwrap();
                let mut ggam = vec![T::zero(); c];
                let mut gbet = vec![T::zero(); c];
                let mut gx = Matrix::zeros(n, c);
                for i in 0..n {
                    let gr = g.row(i);
                    let xh = &xhat[i * c..(i + 1) * c];
                    let mut mean_d = T::zero();
                    let mut mean_dx = T::zero();
                    for j in 0..c {
                        ggam[j] += gr[j] * xh[j];
                        gbet[j] += gr[j];
                        let d = gr[j] * gam[j];
                        mean_d += d;
                        mean_dx += d * xh[j];
                    }
                    mean_d /= cf;
                    mean_dx /= cf;
                    let is = inv_std[i];
                    for (j, o) in gx.row_mut(i).iter_mut().enumerate() {
                        let d = gr[j] * gam[j];
                        *o = is * (d - mean_d - xh[j] * mean_dx);
                    }
                }
                accumulate(grads, *x, &gx);
                accumulate(grads, *gamma, &Matrix::row_vector(ggam));
                accumulate(grads, *beta, &Matrix::row_vector(gbet));
            }
            Op::Gelu(a) => {
                let c = T::lit(GELU_C);
                let k = T::lit(GELU_A);
                let half = T::lit(0.5);
                let three = T::lit(3.0);
                let av = self.value(*a);
                let ga = elementwise(g, av, |gi, x| {
                    let t = (c * (x + k * x * x * x)).tanh();
                    let d = half * (T::one() + t)
                        + half * x * (T::one() - t * t) * c * (T::one() + three * k * x * x);
                    gi * d
                });
                accumulate(grads, *a, &ga);
            }
            Op::Relu(a) => {
                let av = self.value(*a);
                let ga = elementwise(g, av, |gi, x| if x > T::zero() { gi } else { T::zero() });
                accumulate(grads, *a, &ga);
            }
            Op::Sigmoid(a) => {
                let ga = elementwise(g, y, |gi, s| gi * s * (T::one() - s));
                accumulate(grads, *a, &ga);
            }
            Op::Dropout { x, mask } => {
                let ga = Matrix::from_vec(
                    g.rows(),
                    g.cols(),
                    g.data().iter().zip(mask).map(|(&p, &m)| p * m).collect(),
                );
                accumulate(grads, *x, &ga);
            }
            Op::SliceCols { x, start } => {
                let xv = self.value(*x);
                let gx = grad_slot(grads, *x, xv.rows(), xv.cols());
                for i in 0..g.rows() {
                    for (o, &gi) in gx.row_mut(i)[*start..*start + g.cols()]
                        .iter_mut()
                        .zip(g.row(i))
                    {
                        *o += gi;
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let pc = self.value(p).cols();
                    if self.wants_grad(p) {
                        let gp = grad_slot(grads, p, g.rows(), pc);
                        for i in 0..g.rows() {
                            for (o, &gi) in gp.row_mut(i).iter_mut().zip(&g.row(i)[off..off + pc]) {
                                *o += gi;
                            }
                        }
                    }
                    off += pc;
                }
            }
            Op::StackRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let pr = self.value(p).rows();
                    if self.wants_grad(p) {
                        let slice = Matrix::from_vec(
                            pr,
                            g.cols(),
                            g.data()[off * g.cols()..(off + pr) * g.cols()].to_vec(),
                        );
                        accumulate(grads, p, &slice);
                    }
                    off += pr;
                }
            }
            Op::Row { x, index } => {
                let xv = self.value(*x);
                let gx = grad_slot(grads, *x, xv.rows(), xv.cols());
                for (o, &gi) in gx.row_mut(*index).iter_mut().zip(g.data()) {
                    *o += gi;
                }
            }
            Op::BroadcastRows(x) => {
                let mut gx = vec![T::zero(); g.cols()];
                for i in 0..g.rows() {
                    for (o, &gi) in gx.iter_mut().zip(g.row(i)) {
                        *o += gi;
                    }
                }
                accumulate(grads, *x, &Matrix::row_vector(gx));
            }
            Op::RowSum(x) => {
                let xv = self.value(*x);
                let mut gx = Matrix::zeros(xv.rows(), xv.cols());
                for i in 0..xv.rows() {
                    let gi = g.data()[i];
                    gx.row_mut(i).iter_mut().for_each(|o| *o = gi);
                }
                accumulate(grads, *x, &gx);
            }
            Op::RowNorm(x) => {
                let xv = self.value(*x);
                let mut gx = Matrix::zeros(xv.rows(), xv.cols());
                for i in 0..xv.rows() {
                    let norm = y.data()[i];
                    if norm == T::zero() {
                        continue;
                    }
                    let s = g.data()[i] / norm;
                    for (o, &xi) in gx.row_mut(i).iter_mut().zip(xv.row(i)) {
                        *o = s * xi;
                    }
                }
                accumulate(grads, *x, &gx);
            }
            Op::RowCosine(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let mut ga = Matrix::zeros(av.rows(), av.cols());
                let mut gb = Matrix::zeros(bv.rows(), bv.cols());
                for i in 0..av.rows() {
                    let (ar, br) = (av.row(i), bv.row(i));
                    let na = crate::tensor::l2_norm(ar);
                    let nb = crate::tensor::l2_norm(br);
                    if na == T::zero() || nb == T::zero() {
                        continue;
                    }
                    let c = y.data()[i];
                    let gi = g.data()[i];
                    let inv = T::one() / (na * nb);
                    for j in 0..ar.len() {
                        ga[(i, j)] = gi * (br[j] * inv - c * ar[j] / (na * na));
                        gb[(i, j)] = gi * (ar[j] * inv - c * br[j] / (nb * nb));
                    }
                }
                accumulate(grads, *a, &ga);
                accumulate(grads, *b, &gb);
            }
            Op::Pick { x, row, col } => {
                let xv = self.value(*x);
                let gx = grad_slot(grads, *x, xv.rows(), xv.cols());
                gx[(*row, *col)] += g.data()[0];
            }
            Op::SumAll(x) => {
                let xv = self.value(*x);
                let gi = g.data()[0];
                accumulate(grads, *x, &Matrix::filled(xv.rows(), xv.cols(), gi));
            }
            Op::Sum(parts) => {
                for &p in parts {
                    accumulate(grads, p, g);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                lens,
                heads,
                probs,
            } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let (n, d) = qv.shape();
                let dk = d / heads;
                let scale = T::one() / T::from_usize(dk).unwrap().sqrt();
                let mut gq = Matrix::zeros(n, d);
                let mut gk = Matrix::zeros(n, d);
                let mut gv = Matrix::zeros(n, d);
                let mut ds = Vec::new();
                let mut start = 0;
                let mut off = 0;
                for &len in lens {
                    for h in 0..*heads {
                        let c0 = h * dk;
                        for i in 0..len {
                            let p = &probs[off + i * len..off + (i + 1) * len];
                            let gi = &g.row(start + i)[c0..c0 + dk];
                            ds.clear();
                            #[allow(clippy::needless_range_loop)]
                            for j in 0..len {
                                let vj = &vv.row(start + j)[c0..c0 + dk];
                                ds.push(crate::tensor::dot(gi, vj));
                                for (o, &x) in gv.row_mut(start + j)[c0..c0 + dk].iter_mut().zip(gi)
                                {
                                    *o += p[j] * x;
                                }
                            }
                            let dot_pd: T = p.iter().zip(&ds).map(|(&a, &b)| a * b).sum();
                            for j in 0..len {
                                let s = p[j] * (ds[j] - dot_pd) * scale;
                                if s == T::zero() {
                                    continue;
                                }
                                let kj = &kv.row(start + j)[c0..c0 + dk];
                                for (o, &x) in gq.row_mut(start + i)[c0..c0 + dk].iter_mut().zip(kj)
                                {
                                    *o += s * x;
                                }
                                let qi = &qv.row(start + i)[c0..c0 + dk];
                                for (o, &x) in gk.row_mut(start + j)[c0..c0 + dk].iter_mut().zip(qi)
                                {
                                    *o += s * x;
                                }
                            }
                        }
                        off += len * len;
                    }
                    start += len;
                }
                accumulate(grads, *q, &gq);
                accumulate(grads, *k, &gk);
                accumulate(grads, *v, &gv);
            }
        }
    }

    fn wants_grad(&self, v: Var) -> bool {
        let np = self.params.len();
        v.0 < np || !matches!(self.nodes[v.0 - np].op, Op::Constant)
    }
}

fn grad_slot<T: Real>(
    grads: &mut [Option<Matrix<T>>],
    v: Var,
    rows: usize,
    cols: usize,
) -> &mut Matrix<T> {
    grads[v.0].get_or_insert_with(|| Matrix::zeros(rows, cols))
}

fn accumulate<T: Real>(grads: &mut [Option<Matrix<T>>], v: Var, g: &Matrix<T>) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(g),
        slot @ None => *slot = Some(g.clone()),
    }
}

fn elementwise<T: Real>(a: &Matrix<T>, b: &Matrix<T>, f: impl Fn(T, T) -> T) -> Matrix<T> {
    Matrix::from_vec(
        a.rows(),
        a.cols(),
        a.data()
            .iter()
            .zip(b.data())
            .map(|(&p, &q)| f(p, q))
            .collect(),
    )
}

pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn softmax_in_place<T: Real>(row: &mut [T]) {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for x in row.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    for x in row.iter_mut() {
        *x /= s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central-difference check of d(loss)/d(input) for a closure building a
    /// scalar from one input leaf.
    fn check(shape: (usize, usize), build: impl Fn(&mut Tape<'_, f64>, Var) -> Var) {
        let store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x0 = Matrix::<f64>::randn(shape.0, shape.1, 1.0, &mut rng);
        let mut tape = Tape::new(&store);
        let x = tape.input(x0.clone());
        let loss = build(&mut tape, x);
        let analytic = tape.backward(loss).input(x).cloned().unwrap();
        let h = 1e-6;
        for k in 0..x0.len() {
            let eval = |delta: f64| {
                let mut xp = x0.clone();
                xp.data_mut()[k] += delta;
                let mut t = Tape::new(&store);
                let xv = t.input(xp);
                let l = build(&mut t, xv);
                t.scalar(l)
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic.data()[k];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            assert!(err < 1e-5, "coordinate {k}: analytic {a} numeric {numeric}");
        }
    }

    fn weights(t: &mut Tape<'_, f64>, rows: usize, cols: usize, seed: u64) -> Var {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        t.constant(Matrix::randn(rows, cols, 1.0, &mut rng))
    }

    #[test]
    fn grad_matmul_and_bias() {
        check((3, 4), |t, x| {
            let w = weights(t, 4, 2, 1);
            let b = weights(t, 1, 2, 2);
            let y = t.linear(x, w, b);
            let z = t.gelu(y);
            t.sum_all(z)
        });
    }

    #[test]
    fn grad_matmul_nt_both_sides() {
        check((3, 4), |t, x| {
            let w = weights(t, 5, 4, 3);
            let y = t.matmul_nt(x, w);
            let z = t.matmul_nt(y, y);
            let s = t.softmax_rows(z);
            let m = weights(t, 3, 3, 4);
            let p = t.mul(s, m);
            t.sum_all(p)
        });
    }

    #[test]
    fn grad_layer_norm() {
        check((2, 5), |t, x| {
            let g = weights(t, 1, 5, 5);
            let b = weights(t, 1, 5, 6);
            let y = t.layer_norm(x, g, b);
            let m = weights(t, 2, 5, 7);
            let p = t.mul(y, m);
            t.sum_all(p)
        });
    }

    #[test]
    fn grad_log_softmax_pick_and_sigmoid() {
        check((3, 2), |t, x| {
            let l = t.log_softmax_rows(x);
            let a = t.pick(l, 0, 1);
            let b = t.pick(l, 2, 0);
            let s = t.sum(&[a, b]);
            let q = t.sigmoid(x);
            let q = t.sum_all(q);
            t.add(s, q)
        });
    }

    #[test]
    fn grad_row_ops() {
        check((3, 4), |t, x| {
            let w = weights(t, 3, 4, 8);
            let d = t.sub(x, w);
            let n = t.row_norm(d);
            let c = t.row_cosine(x, w);
            let rs = t.row_sum(x);
            let a = t.sum_all(n);
            let b = t.sum_all(c);
            let r = t.sum_all(rs);
            t.sum(&[a, b, r])
        });
    }

    #[test]
    fn grad_structural_ops() {
        check((3, 4), |t, x| {
            let a = t.slice_cols(x, 1, 2);
            let b = t.slice_cols(x, 0, 1);
            let c = t.concat_cols(&[a, b, a]);
            let r = t.row(c, 1);
            let br = t.broadcast_rows(r, 2);
            let st = t.stack_rows(&[c, br]);
            let sc = t.scale(st, 0.3);
            let sh = t.add_scalar(sc, 0.2);
            let rl = t.relu(sh);
            let sq = t.mul(rl, rl);
            t.sum_all(sq)
        });
    }

    #[test]
    fn grad_packed_attention() {
        check((5, 4), |t, x| {
            let wq = weights(t, 4, 4, 9);
            let wk = weights(t, 4, 4, 10);
            let q = t.matmul(x, wq);
            let k = t.matmul(x, wk);
            let a = t.attention(q, k, x, &[3, 2], 2);
            let m = weights(t, 5, 4, 11);
            let p = t.mul(a, m);
            t.sum_all(p)
        });
    }

    #[test]
    fn attention_stays_within_sequences() {
        let store = ParamStore::<f64>::new();
        let mut tape = Tape::new(&store);
        let x = tape.input(Matrix::from_vec(3, 2, vec![1., 0., 0., 1., 5., 5.]));
        let a = tape.attention(x, x, x, &[2, 1], 1);
        // a length-1 sequence attends only to itself
        assert_eq!(tape.value(a).row(2), &[5.0, 5.0]);
        let first = tape.value(a).row(0).to_vec();
        assert!(first.iter().all(|&v| v < 1.0 + 1e-12));
    }

    #[test]
    fn grad_gather_accumulates_repeated_rows() {
        let mut store = ParamStore::<f64>::new();
        let table = store.add("emb", Matrix::from_vec(3, 2, vec![1., 2., 3., 4., 5., 6.]));
        let mut tape = Tape::new(&store);
        let t = tape.param(table);
        let g = tape.gather(t, &[2, 0, 2]);
        let loss = tape.sum_all(g);
        let grads = tape.backward(loss);
        assert_eq!(
            grads.param(table).unwrap().data(),
            &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]
        );
    }

    #[test]
    fn checksum_changes_with_values() {
        let mut store = ParamStore::<f32>::new();
        let id = store.add("w", Matrix::zeros(2, 2));
        let before = store.checksum();
        store.get_mut(id)[(0, 0)] = 1.0;
        assert_ne!(before, store.checksum());
    }
}
