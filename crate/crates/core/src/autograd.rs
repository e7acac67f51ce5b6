//! Reverse-mode differentiation on an append-only tape.
//!
//! Every value is a 2-D [`Matrix`]. Batched activations are `[batch × features]`,
//! weights are `[out × in]` and a matmul node computes `A · Wᵀ`. Nodes only
//! reference earlier nodes, so reverse iteration over the tape is a valid
//! topological order for backpropagation.
//!
//! The quantization node uses the straight-through estimator: the forward
//! value is the quantizer output (including the affine rescale for weights),
//! the backward pass copies the upstream gradient unchanged.

use rand::Rng;
use thiserror::Error;

use crate::quantizers::{self, ActivationRange, QuantConfig, QuantError};
use crate::tensor::Matrix;

/// Out-of-range excursions this small are snapped back before activation
/// quantization; anything larger is a domain error.
pub const ROUNDING_SLACK: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum AutogradError {
    #[error("loss must be a 1x1 scalar, got {0}x{1}")]
    NonScalarLoss(usize, usize),
    #[error("index {id} out of range for table with {rows} rows")]
    Index { id: usize, rows: usize },
    #[error(transparent)]
    Quant(#[from] QuantError),
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Quantizer applied by an STE node.
#[derive(Clone, Debug, PartialEq)]
pub enum SteKind {
    Weights(QuantConfig),
    Activation { bits: u8, range: ActivationRange },
}

#[derive(Clone, Debug)]
pub enum Op {
    Leaf,
    Constant,
    /// `a · wᵀ`
    MatMulT(Var, Var),
    /// Column-wise concatenation `[a, b]`.
    Concat(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// Adds a `1 × n` row to every row of `a`.
    AddRow(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Sigmoid(Var),
    Tanh(Var),
    Clip {
        input: Var,
        lo: f64,
        hi: f64,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    /// `mask` holds 0 or `1/(1-p)` per element.
    Dropout {
        input: Var,
        mask: Vec<f64>,
    },
    /// Mean cross entropy over the rows selected by `weights` (1.0 / 0.0).
    SoftmaxXent {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
        probs: Matrix,
    },
    Ste {
        input: Var,
        kind: SteKind,
    },
}

impl Op {
    pub fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf | Op::Constant => vec![],
            Op::MatMulT(a, b) | Op::Concat(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(a, _) | Op::Sum(a) | Op::Sigmoid(a) | Op::Tanh(a) => vec![*a],
            Op::Clip { input, .. } | Op::Dropout { input, .. } | Op::Ste { input, .. } => vec![*input],
            Op::Gather { table, .. } => vec![*table],
            Op::SoftmaxXent { logits, .. } => vec![*logits],
        }
    }
}

struct Node {
    op: Op,
    value: Matrix,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Matrix) -> Var {
        debug_assert!(op.inputs().iter().all(|v| v.0 < self.nodes.len()));
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn op(&self, v: Var) -> &Op {
        &self.nodes[v.0].op
    }

    /// All node handles in creation order.
    pub fn vars(&self) -> impl Iterator<Item = Var> {
        (0..self.nodes.len()).map(Var)
    }

    /// A trainable input; receives a gradient.
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(Op::Constant, value)
    }

    pub fn matmul_t(&mut self, a: Var, w: Var) -> Var {
        let v = self.value(a).matmul_t(self.value(w));
        self.push(Op::MatMulT(a, w), v)
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.rows(), y.rows(), "concat row mismatch");
        let cols = x.cols() + y.cols();
        let mut data = Vec::with_capacity(x.rows() * cols);
        for r in 0..x.rows() {
            data.extend_from_slice(x.row(r));
            data.extend_from_slice(y.row(r));
        }
        let v = Matrix::from_vec(x.rows(), cols, data);
        self.push(Op::Concat(a, b), v)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(Op::Add(a, b), v)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(Op::Sub(a, b), v)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(Op::Mul(a, b), v)
    }

    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let (x, b) = (self.value(a), self.value(bias));
        assert_eq!(b.shape(), (1, x.cols()), "bias must be 1 x cols");
        let mut v = x.clone();
        for r in 0..v.rows() {
            for (o, &bb) in v.row_mut(r).iter_mut().zip(b.data()) {
                *o += bb;
            }
        }
        self.push(Op::AddRow(a, bias), v)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| c * x);
        self.push(Op::Scale(a, c), v)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Matrix::from_vec(1, 1, vec![self.value(a).sum()]);
        self.push(Op::Sum(a), v)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(Op::Sigmoid(a), v)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.push(Op::Tanh(a), v)
    }

    /// `1 - a`, elementwise.
    pub fn one_minus(&mut self, a: Var) -> Var {
        let (r, c) = self.value(a).shape();
        let ones = self.constant(Matrix::filled(r, c, 1.0));
        self.sub(ones, a)
    }

    pub fn clip(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(Op::Clip { input: a, lo, hi }, v)
    }

    /// Rows `table[ids[i]]`; backward scatter-adds into the table.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var, AutogradError> {
        let t = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * t.cols());
        for &id in ids {
            if id >= t.rows() {
                return Err(AutogradError::Index { id, rows: t.rows() });
            }
            data.extend_from_slice(t.row(id));
        }
        let v = Matrix::from_vec(ids.len(), t.cols(), data);
        Ok(self.push(
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            v,
        ))
    }

    /// Inverted dropout: zero with probability `p`, scale survivors by `1/(1-p)`.
    ///
    /// `p >= 1` drops everything. Returns `a` itself when `p <= 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, p: f64, rng: &mut R) -> Var {
        if p <= 0.0 {
            return a;
        }
        let keep_scale = if p >= 1.0 { 0.0 } else { 1.0 / (1.0 - p) };
        let n = self.value(a).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep_scale })
            .collect();
        let x = self.value(a);
        let v = Matrix::from_vec(
            x.rows(),
            x.cols(),
            x.data().iter().zip(&mask).map(|(a, m)| a * m).collect(),
        );
        self.push(Op::Dropout { input: a, mask }, v)
    }

    /// Mean softmax cross entropy over rows whose `mask` entry is true.
    pub fn softmax_xent(&mut self, logits: Var, targets: &[usize], mask: Option<&[bool]>) -> Var {
        let l = self.value(logits);
        assert_eq!(l.rows(), targets.len(), "one target per logits row");
        let weights: Vec<f64> = match mask {
            Some(m) => m.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
            None => vec![1.0; targets.len()],
        };
        let count: f64 = weights.iter().sum();
        let mut probs = Matrix::zeros(l.rows(), l.cols());
        let mut total = 0.0;
        for r in 0..l.rows() {
            let row = l.row(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - m).exp()).sum();
            let lse = m + z.ln();
            for (p, x) in probs.row_mut(r).iter_mut().zip(row) {
                *p = (x - lse).exp();
            }
            total += weights[r] * (lse - row[targets[r]]);
        }
        let loss = if count > 0.0 { total / count } else { 0.0 };
        self.push(
            Op::SoftmaxXent {
                logits,
                targets: targets.to_vec(),
                weights,
                probs,
            },
            Matrix::from_vec(1, 1, vec![loss]),
        )
    }

    /// Straight-through quantization node.
    pub fn ste_quantize(&mut self, a: Var, kind: SteKind) -> Result<Var, AutogradError> {
        let x = self.value(a);
        let v = match &kind {
            SteKind::Weights(cfg) => quantizers::quantize_weights(x, cfg)?.0,
            SteKind::Activation { bits, range } => {
                let (lo, hi) = match range {
                    ActivationRange::Unit01 => (0.0, 1.0),
                    ActivationRange::Symmetric => (-0.5, 0.5),
                };
                // gate products can overshoot the range by an ulp
                if x.data().iter().any(|&v| v < lo || v > hi) {
                    let snapped = x.map(|v| {
                        if v < lo && v >= lo - ROUNDING_SLACK {
                            lo
                        } else if v > hi && v <= hi + ROUNDING_SLACK {
                            hi
                        } else {
                            v
                        }
                    });
                    quantizers::quantize_activation(&snapped, *bits, *range)?
                } else {
                    quantizers::quantize_activation(x, *bits, *range)?
                }
            }
        };
        Ok(self.push(Op::Ste { input: a, kind }, v))
    }

    /// Reverse accumulation from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, AutogradError> {
        let lv = self.value(loss);
        if lv.shape() != (1, 1) {
            return Err(AutogradError::NonScalarLoss(lv.rows(), lv.cols()));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf | Op::Constant) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let mut acc = |v: Var, d: Matrix| match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&d),
                slot @ None => *slot = Some(d),
            };
            match &node.op {
                Op::Leaf | Op::Constant => unreachable!(),
                Op::MatMulT(a, w) => {
                    // out = a · wᵀ ; da = g · w ; dw = gᵀ · a
                    acc(*a, g.matmul(self.value(*w)));
                    acc(*w, g.t_matmul(self.value(*a)));
                }
                Op::Concat(a, b) => {
                    let ca = self.value(*a).cols();
                    let cb = self.value(*b).cols();
                    let mut ga = Matrix::zeros(g.rows(), ca);
                    let mut gb = Matrix::zeros(g.rows(), cb);
                    for r in 0..g.rows() {
                        ga.row_mut(r).copy_from_slice(&g.row(r)[..ca]);
                        gb.row_mut(r).copy_from_slice(&g.row(r)[ca..]);
                    }
                    acc(*a, ga);
                    acc(*b, gb);
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::Sub(a, b) => {
                    acc(*b, g.map(|x| -x));
                    acc(*a, g);
                }
                Op::Mul(a, b) => {
                    acc(*a, g.zip_map(self.value(*b), |x, y| x * y));
                    acc(*b, g.zip_map(self.value(*a), |x, y| x * y));
                }
                Op::AddRow(a, bias) => {
                    let mut gb = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, x) in gb.data_mut().iter_mut().zip(g.row(r)) {
                            *o += x;
                        }
                    }
                    acc(*bias, gb);
                    acc(*a, g);
                }
                Op::Scale(a, c) => acc(*a, g.map(|x| c * x)),
                Op::Sum(a) => {
                    let (r, c) = self.value(*a).shape();
                    acc(*a, Matrix::filled(r, c, g.data()[0]));
                }
                Op::Sigmoid(a) => acc(*a, g.zip_map(&node.value, |x, s| x * s * (1.0 - s))),
                Op::Tanh(a) => acc(*a, g.zip_map(&node.value, |x, t| x * (1.0 - t * t))),
                Op::Clip { input, lo, hi } => {
                    let d = g.zip_map(self.value(*input), |x, v| if v > *lo && v < *hi { x } else { 0.0 });
                    acc(*input, d);
                }
                Op::Gather { table, ids } => {
                    let (r, c) = self.value(*table).shape();
                    let mut gt = Matrix::zeros(r, c);
                    for (i, &id) in ids.iter().enumerate() {
                        for (o, x) in gt.row_mut(id).iter_mut().zip(g.row(i)) {
                            *o += x;
                        }
                    }
                    acc(*table, gt);
                }
                Op::Dropout { input, mask } => {
                    let d = Matrix::from_vec(
                        g.rows(),
                        g.cols(),
                        g.data().iter().zip(mask).map(|(x, m)| x * m).collect(),
                    );
                    acc(*input, d);
                }
                Op::SoftmaxXent {
                    logits,
                    targets,
                    weights,
                    probs,
                } => {
                    let count: f64 = weights.iter().sum();
                    let scale = if count > 0.0 { g.data()[0] / count } else { 0.0 };
                    let mut d = probs.clone();
                    for r in 0..d.rows() {
                        let w = weights[r] * scale;
                        let row = d.row_mut(r);
                        row[targets[r]] -= 1.0;
                        row.iter_mut().for_each(|x| *x *= w);
                    }
                    acc(*logits, d);
                }
                Op::Ste { input, .. } => acc(*input, g),
            }
        }
        Ok(Gradients { grads })
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` when `v` does not reach the loss.
    ///
    /// Intermediate (non-leaf) gradients are consumed during the sweep; only
    /// leaves and constants keep theirs.
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for leaf `v`, zeros if it does not reach the loss.
    pub fn leaf(&self, tape: &Tape, v: Var) -> Matrix {
        match self.get(v) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = tape.value(v).shape();
                Matrix::zeros(r, c)
            }
        }
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// Largest relative error between `backward` and central finite differences.
///
/// `build` records a scalar function of the leaves it is handed. Relative
/// error is `|analytic - numeric| / max(|analytic|, |numeric|, 1e-6)`.
/// The graph must not contain quantization or dropout nodes.
pub fn grad_check<F>(build: F, inputs: &[Matrix], eps: f64) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let eval = |xs: &[Matrix]| -> f64 {
        let mut tape = Tape::new();
        let leaves: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        let out = build(&mut tape, &leaves);
        tape.value(out).data()[0]
    };

    let mut tape = Tape::new();
    let leaves: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let out = build(&mut tape, &leaves);
    let grads = tape.backward(out).expect("scalar output");

    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (k, leaf) in leaves.iter().enumerate() {
        let analytic = grads.leaf(&tape, *leaf);
        for i in 0..inputs[k].len() {
            let orig = inputs[k].data()[i];
            probe[k].data_mut()[i] = orig + eps;
            let plus = eval(&probe);
            probe[k].data_mut()[i] = orig - eps;
            let minus = eval(&probe);
            probe[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.data()[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(err);
        }
    }
    worst
}
