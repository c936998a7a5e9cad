use std::borrow::Cow;
use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels::{dot, matmul_nn, matmul_nt, matmul_tn};
use super::{Result, Tensor, TensorError};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

/// Which keys each query may attend to in [`Tape::attention`].
#[derive(Clone, Debug)]
pub struct AttentionMask {
    /// `[batch * seq]`, true for real tokens.
    pub key_mask: Vec<bool>,
    /// Restrict query `i` to keys `j <= i`.
    pub causal: bool,
}

impl AttentionMask {
    #[inline]
    fn allowed(&self, b: usize, seq: usize, i: usize, j: usize) -> bool {
        self.key_mask[b * seq + j] && (!self.causal || j <= i)
    }
}

enum Op {
    Leaf,
    MatMul(usize, usize),
    MatMulNt(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Scale(usize, f64),
    Sigmoid(usize),
    Gelu(usize),
    SoftmaxRows(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        normed: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Embedding {
        table: usize,
        ids: Vec<usize>,
    },
    Attention {
        q: usize,
        k: usize,
        v: usize,
        heads: usize,
        seq: usize,
        probs: Vec<f64>,
    },
    PoolRows {
        h: usize,
        seq: usize,
        weights: Vec<f64>,
    },
    Reshape(usize),
    Sum(usize),
    Mean(usize),
    BceWithLogits {
        logits: usize,
        targets: Vec<f64>,
        weights: Vec<f64>,
    },
    SoftCrossEntropy {
        logits: usize,
        targets: Vec<f64>,
        probs: Vec<f64>,
    },
}

struct Node<'p> {
    value: Cow<'p, Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Records one forward pass. Nodes are appended in evaluation order, so
/// the node list is already topologically sorted.
pub struct Tape<'p> {
    id: u64,
    nodes: Vec<Node<'p>>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// Logistic function clamped to the open interval (0, 1).
///
/// The exponential is only ever taken of a non-positive number. Results
/// that would round to exactly 0 or 1 are pulled to the nearest
/// representable interior value.
#[inline]
pub fn stable_sigmoid(z: f64) -> f64 {
    let s = if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    };
    s.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

#[inline]
fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

/// `max(x,0) - x t + ln(1 + e^{-|x|})`, the cancellation-free form of
/// `-(t ln σ(x) + (1-t) ln(1-σ(x)))`.
#[inline]
pub fn bce_logit_term(x: f64, t: f64) -> f64 {
    x.max(0.0) - x * t + (-x.abs()).exp().ln_1p()
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn add_into(dst: &mut Option<Vec<f64>>, src: &[f64]) {
    match dst {
        Some(d) => d.iter_mut().zip(src).for_each(|(a, b)| *a += b),
        None => *dst = Some(src.to_vec()),
    }
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(TensorError::ForeignVar);
        }
        Ok(v.index)
    }

    fn push(&mut self, value: Cow<'p, Tensor>, op: Op, needs_grad: bool, name: &'static str) -> Result<Var> {
        if !value.all_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        })
    }

    fn derived(
        &mut self,
        shape: &[usize],
        data: Vec<f64>,
        op: Op,
        inputs: &[usize],
        name: &'static str,
    ) -> Result<Var> {
        let needs_grad = inputs.iter().any(|&i| self.nodes[i].needs_grad);
        let t = Tensor::from_vec(shape, data)?;
        self.push(Cow::Owned(t), op, needs_grad, name)
    }

    /// Borrows a parameter; gradients are tracked iff `requires_grad` is set.
    pub fn param(&mut self, t: &'p Tensor) -> Var {
        let needs = t.requires_grad();
        self.push(Cow::Borrowed(t), Op::Leaf, needs, "param")
            .unwrap_or_else(|_| panic!("parameter of shape {:?} holds non-finite values", t.shape()))
    }

    pub fn leaf(&mut self, t: Tensor) -> Result<Var> {
        let needs = t.requires_grad();
        self.push(Cow::Owned(t), Op::Leaf, needs, "leaf")
    }

    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.push(Cow::Owned(t.with_requires_grad(false)), Op::Leaf, false, "constant")
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[self.check(v).expect("var from another tape")].value
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.index].needs_grad
    }

    fn dims2(&self, i: usize, op: &'static str) -> Result<(usize, usize)> {
        let s = self.nodes[i].value.shape();
        if s.len() != 2 {
            return Err(TensorError::Invalid {
                op,
                reason: format!("expected a rank-2 operand, got {s:?}"),
            });
        }
        Ok((s[0], s[1]))
    }

    fn shape_err(&self, op: &'static str, a: usize, b: usize) -> TensorError {
        TensorError::Shape {
            op,
            left: self.nodes[a].value.shape().to_vec(),
            right: self.nodes[b].value.shape().to_vec(),
        }
    }

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let (m, k) = self.dims2(ai, "matmul")?;
        let (k2, n) = self.dims2(bi, "matmul")?;
        if k != k2 {
            return Err(self.shape_err("matmul", ai, bi));
        }
        let mut out = vec![0.0; m * n];
        matmul_nn(
            self.nodes[ai].value.data(),
            self.nodes[bi].value.data(),
            m,
            k,
            n,
            &mut out,
        );
        self.derived(&[m, n], out, Op::MatMul(ai, bi), &[ai, bi], "matmul")
    }

    /// `a[m×k] · b[n×k]ᵀ`; the natural layout for `x Wᵀ` with `W` stored out×in.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let (m, k) = self.dims2(ai, "matmul_nt")?;
        let (n, k2) = self.dims2(bi, "matmul_nt")?;
        if k != k2 {
            return Err(self.shape_err("matmul_nt", ai, bi));
        }
        let mut out = vec![0.0; m * n];
        matmul_nt(
            self.nodes[ai].value.data(),
            self.nodes[bi].value.data(),
            m,
            k,
            n,
            &mut out,
        );
        self.derived(&[m, n], out, Op::MatMulNt(ai, bi), &[ai, bi], "matmul_nt")
    }

    fn zip_same(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: fn(usize, usize) -> Op,
    ) -> Result<Var> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        if self.nodes[ai].value.shape() != self.nodes[bi].value.shape() {
            return Err(self.shape_err(name, ai, bi));
        }
        let out: Vec<f64> = self.nodes[ai]
            .value
            .data()
            .iter()
            .zip(self.nodes[bi].value.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.nodes[ai].value.shape().to_vec();
        self.derived(&shape, out, op(ai, bi), &[ai, bi], name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "sub", |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "mul", |x, y| x * y, Op::Mul)
    }

    /// Adds a bias vector to every row (last axis).
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ai, bi) = (self.check(a)?, self.check(bias)?);
        let n = self.nodes[ai].value.cols();
        if self.nodes[bi].value.len() != n {
            return Err(self.shape_err("add_row", ai, bi));
        }
        let bias_data = self.nodes[bi].value.data();
        let out: Vec<f64> = self.nodes[ai]
            .value
            .data()
            .chunks(n)
            .flat_map(|row| row.iter().zip(bias_data).map(|(x, b)| x + b))
            .collect();
        let shape = self.nodes[ai].value.shape().to_vec();
        self.derived(&shape, out, Op::AddRow(ai, bi), &[ai, bi], "add_row")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let ai = self.check(a)?;
        let out = self.nodes[ai].value.data().iter().map(|x| x * c).collect();
        let shape = self.nodes[ai].value.shape().to_vec();
        self.derived(&shape, out, Op::Scale(ai, c), &[ai], "scale")
    }

    /// Elementwise logistic function, see [`stable_sigmoid`].
    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let ai = self.check(a)?;
        let out = self.nodes[ai].value.data().iter().map(|&z| stable_sigmoid(z)).collect();
        let shape = self.nodes[ai].value.shape().to_vec();
        self.derived(&shape, out, Op::Sigmoid(ai), &[ai], "sigmoid")
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let ai = self.check(a)?;
        let out = self.nodes[ai].value.data().iter().map(|&x| gelu(x)).collect();
        let shape = self.nodes[ai].value.shape().to_vec();
        self.derived(&shape, out, Op::Gelu(ai), &[ai], "gelu")
    }

    /// Softmax along the last axis with max-subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let ai = self.check(a)?;
        let n = self.nodes[ai].value.cols();
        let mut out = self.nodes[ai].value.data().to_vec();
        out.chunks_mut(n).for_each(softmax_in_place);
        let shape = self.nodes[ai].value.shape().to_vec();
        self.derived(&shape, out, Op::SoftmaxRows(ai), &[ai], "softmax_rows")
    }

    /// Normalizes each row (last axis) to zero mean and unit variance, then
    /// applies `gain ⊙ x̂ + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (xi, gi, bi) = (self.check(x)?, self.check(gain)?, self.check(bias)?);
        let n = self.nodes[xi].value.cols();
        if self.nodes[gi].value.len() != n {
            return Err(self.shape_err("layer_norm", xi, gi));
        }
        if self.nodes[bi].value.len() != n {
            return Err(self.shape_err("layer_norm", xi, bi));
        }
        let xs = self.nodes[xi].value.data();
        let g = self.nodes[gi].value.data();
        let b = self.nodes[bi].value.data();
        let rows = xs.len() / n;
        let mut normed = vec![0.0; xs.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xs.len()];
        for r in 0..rows {
            let row = &xs[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for c in 0..n {
                let h = (row[c] - mean) * inv;
                normed[r * n + c] = h;
                out[r * n + c] = g[c] * h + b[c];
            }
        }
        let shape = self.nodes[xi].value.shape().to_vec();
        self.derived(
            &shape,
            out,
            Op::LayerNorm {
                x: xi,
                gain: gi,
                bias: bi,
                normed,
                inv_std,
            },
            &[xi, gi, bi],
            "layer_norm",
        )
    }

    /// Row lookup `table[ids[i]]`, giving `[ids.len(), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let ti = self.check(table)?;
        let (vocab, d) = self.dims2(ti, "embedding")?;
        if ids.is_empty() {
            return Err(TensorError::Invalid {
                op: "embedding",
                reason: "no ids".into(),
            });
        }
        let tab = self.nodes[ti].value.data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(TensorError::IndexOutOfRange {
                    op: "embedding",
                    index: id,
                    bound: vocab,
                });
            }
            out.extend_from_slice(&tab[id * d..(id + 1) * d]);
        }
        self.derived(
            &[ids.len(), d],
            out,
            Op::Embedding {
                table: ti,
                ids: ids.to_vec(),
            },
            &[ti],
            "embedding",
        )
    }

    /// Scaled dot-product attention over `heads` heads for `batch` stacked
    /// sequences of length `seq`. `q`, `k`, `v` are `[batch*seq, d]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, seq: usize, mask: &AttentionMask) -> Result<Var> {
        let (qi, ki, vi) = (self.check(q)?, self.check(k)?, self.check(v)?);
        let (rows, d) = self.dims2(qi, "attention")?;
        if self.nodes[ki].value.shape() != [rows, d] {
            return Err(self.shape_err("attention", qi, ki));
        }
        if self.nodes[vi].value.shape() != [rows, d] {
            return Err(self.shape_err("attention", qi, vi));
        }
        if heads == 0 || d % heads != 0 || seq == 0 || rows % seq != 0 || mask.key_mask.len() != rows {
            return Err(TensorError::Invalid {
                op: "attention",
                reason: format!("rows={rows} d={d} heads={heads} seq={seq} mask={}", mask.key_mask.len()),
            });
        }
        let batch = rows / seq;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qs, ks, vs) = (
            self.nodes[qi].value.data(),
            self.nodes[ki].value.data(),
            self.nodes[vi].value.data(),
        );
        let mut probs = vec![0.0; batch * heads * seq * seq];
        let mut out = vec![0.0; rows * d];
        let mut scores = vec![0.0; seq];
        for b in 0..batch {
            for h in 0..heads {
                let at = |r: usize| (b * seq + r) * d + h * dh;
                for i in 0..seq {
                    let qrow = &qs[at(i)..][..dh];
                    let mut max = f64::NEG_INFINITY;
                    for (j, sj) in scores.iter_mut().enumerate() {
                        if mask.allowed(b, seq, i, j) {
                            *sj = dot(qrow, &ks[at(j)..][..dh]) * scale;
                            if !sj.is_finite() {
                                return Err(TensorError::NonFinite { op: "attention" });
                            }
                            max = max.max(*sj);
                        }
                    }
                    if max == f64::NEG_INFINITY {
                        return Err(TensorError::Invalid {
                            op: "attention",
                            reason: format!("sequence {b} position {i} has no visible key"),
                        });
                    }
                    let p = &mut probs[((b * heads + h) * seq + i) * seq..][..seq];
                    let mut sum = 0.0;
                    for (j, (pj, &sj)) in p.iter_mut().zip(&scores).enumerate() {
                        if mask.allowed(b, seq, i, j) {
                            *pj = (sj - max).exp();
                            sum += *pj;
                        }
                    }
                    let orow = &mut out[at(i)..][..dh];
                    for (j, pj) in p.iter_mut().enumerate() {
                        if *pj == 0.0 {
                            continue;
                        }
                        *pj /= sum;
                        for (o, &vv) in orow.iter_mut().zip(&vs[at(j)..][..dh]) {
                            *o += *pj * vv;
                        }
                    }
                }
            }
        }
        self.derived(
            &[rows, d],
            out,
            Op::Attention {
                q: qi,
                k: ki,
                v: vi,
                heads,
                seq,
                probs,
            },
            &[qi, ki, vi],
            "attention",
        )
    }

    /// Weighted sum over positions: `out[b] = Σ_s weights[b,s] · h[b*seq + s]`.
    /// Mean and last-token pooling are both expressed through the weights.
    pub fn pool_rows(&mut self, h: Var, seq: usize, weights: Vec<f64>) -> Result<Var> {
        let hi = self.check(h)?;
        let (rows, d) = self.dims2(hi, "pool_rows")?;
        if seq == 0 || rows % seq != 0 || weights.len() != rows {
            return Err(TensorError::Invalid {
                op: "pool_rows",
                reason: format!("rows={rows} seq={seq} weights={}", weights.len()),
            });
        }
        let batch = rows / seq;
        let hs = self.nodes[hi].value.data();
        let mut out = vec![0.0; batch * d];
        for b in 0..batch {
            for s in 0..seq {
                let w = weights[b * seq + s];
                if w == 0.0 {
                    continue;
                }
                let src = &hs[(b * seq + s) * d..(b * seq + s + 1) * d];
                for (o, &x) in out[b * d..(b + 1) * d].iter_mut().zip(src) {
                    *o += w * x;
                }
            }
        }
        self.derived(
            &[batch, d],
            out,
            Op::PoolRows { h: hi, seq, weights },
            &[hi],
            "pool_rows",
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ai = self.check(a)?;
        let data = self.nodes[ai].value.data().to_vec();
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(TensorError::Shape {
                op: "reshape",
                left: self.nodes[ai].value.shape().to_vec(),
                right: shape.to_vec(),
            });
        }
        self.derived(shape, data, Op::Reshape(ai), &[ai], "reshape")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ai = self.check(a)?;
        let s = self.nodes[ai].value.data().iter().sum();
        self.derived(&[1], vec![s], Op::Sum(ai), &[ai], "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let ai = self.check(a)?;
        let d = self.nodes[ai].value.data();
        let s = d.iter().sum::<f64>() / d.len() as f64;
        self.derived(&[1], vec![s], Op::Mean(ai), &[ai], "mean")
    }

    /// Mean over all cells of `w_label · bce(x, t)` using the stable logit form.
    /// `weights` is per label (last axis); empty means all ones.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64], weights: &[f64]) -> Result<Var> {
        let li = self.check(logits)?;
        let x = self.nodes[li].value.data();
        let labels = self.nodes[li].value.cols();
        if targets.len() != x.len() {
            return Err(TensorError::Shape {
                op: "bce_with_logits",
                left: self.nodes[li].value.shape().to_vec(),
                right: vec![targets.len()],
            });
        }
        if let Some(bad) = targets.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(TensorError::Invalid {
                op: "bce_with_logits",
                reason: format!("target {bad} outside [0,1]"),
            });
        }
        let weights = if weights.is_empty() {
            vec![1.0; labels]
        } else if weights.len() == labels {
            weights.to_vec()
        } else {
            return Err(TensorError::Shape {
                op: "bce_with_logits",
                left: vec![labels],
                right: vec![weights.len()],
            });
        };
        let total: f64 = x
            .iter()
            .zip(targets)
            .enumerate()
            .map(|(i, (&xv, &t))| weights[i % labels] * bce_logit_term(xv, t))
            .sum();
        let loss = total / x.len() as f64;
        self.derived(
            &[1],
            vec![loss],
            Op::BceWithLogits {
                logits: li,
                targets: targets.to_vec(),
                weights,
            },
            &[li],
            "bce_with_logits",
        )
    }

    /// Row-mean of `-Σ_j t_ij log softmax(z_i)_j` for target rows `t`.
    pub fn soft_cross_entropy(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let li = self.check(logits)?;
        let z = self.nodes[li].value.data();
        let n = self.nodes[li].value.cols();
        if targets.len() != z.len() {
            return Err(TensorError::Shape {
                op: "soft_cross_entropy",
                left: self.nodes[li].value.shape().to_vec(),
                right: vec![targets.len()],
            });
        }
        let rows = z.len() / n;
        let mut probs = vec![0.0; z.len()];
        let mut total = 0.0;
        for r in 0..rows {
            let zr = &z[r * n..(r + 1) * n];
            let max = zr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + zr.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for c in 0..n {
                probs[r * n + c] = (zr[c] - lse).exp();
                total -= targets[r * n + c] * (zr[c] - lse);
            }
        }
        self.derived(
            &[1],
            vec![total / rows as f64],
            Op::SoftCrossEntropy {
                logits: li,
                targets: targets.to_vec(),
                probs,
            },
            &[li],
            "soft_cross_entropy",
        )
    }

    /// Propagates `d loss / d node` to every node that needs a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let li = self.check(loss)?;
        if !self.nodes[li].value.is_scalar() {
            return Err(TensorError::NonScalarLoss(self.nodes[li].value.shape().to_vec()));
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[li] = Some(vec![1.0]);
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        for i in (0..=li).rev() {
            let Some(g) = grads[i].take() else { continue };
            if nodes[i].needs_grad {
                propagate(nodes, grads, i, &g);
            }
            grads[i] = Some(g);
        }
        Ok(())
    }

    /// Gradient of the last `backward` loss w.r.t. `v`, if it received one.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let i = self.check(v).ok()?;
        if !self.nodes[i].needs_grad {
            return None;
        }
        let g = self.grads.get(i)?.as_ref()?;
        Tensor::from_vec(self.nodes[i].value.shape(), g.clone()).ok()
    }

    pub fn grad_data(&self, v: Var) -> Option<&[f64]> {
        let i = self.check(v).ok()?;
        if !self.nodes[i].needs_grad {
            return None;
        }
        self.grads.get(i)?.as_deref()
    }
}

fn propagate(nodes: &[Node<'_>], grads: &mut [Option<Vec<f64>>], i: usize, g: &[f64]) {
    let wants = |j: usize| nodes[j].needs_grad;
    let val = |j: usize| nodes[j].value.data();
    let shape = |j: usize| nodes[j].value.shape();
    match &nodes[i].op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = (shape(*a)[0], shape(*a)[1]);
            let n = shape(*b)[1];
            if wants(*a) {
                let mut da = vec![0.0; m * k];
                matmul_nt(g, val(*b), m, n, k, &mut da);
                add_into(&mut grads[*a], &da);
            }
            if wants(*b) {
                let mut db = vec![0.0; k * n];
                matmul_tn(val(*a), g, k, m, n, &mut db);
                add_into(&mut grads[*b], &db);
            }
        }
        Op::MatMulNt(a, b) => {
            let (m, k) = (shape(*a)[0], shape(*a)[1]);
            let n = shape(*b)[0];
            if wants(*a) {
                let mut da = vec![0.0; m * k];
                matmul_nn(g, val(*b), m, n, k, &mut da);
                add_into(&mut grads[*a], &da);
            }
            if wants(*b) {
                let mut db = vec![0.0; n * k];
                matmul_tn(g, val(*a), n, m, k, &mut db);
                add_into(&mut grads[*b], &db);
            }
        }
        Op::Add(a, b) => {
            if wants(*a) {
                add_into(&mut grads[*a], g);
            }
            if wants(*b) {
                add_into(&mut grads[*b], g);
            }
        }
        Op::Sub(a, b) => {
            if wants(*a) {
                add_into(&mut grads[*a], g);
            }
            if wants(*b) {
                let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                add_into(&mut grads[*b], &neg);
            }
        }
        Op::Mul(a, b) => {
            if wants(*a) {
                let da: Vec<f64> = g.iter().zip(val(*b)).map(|(g, y)| g * y).collect();
                add_into(&mut grads[*a], &da);
            }
            if wants(*b) {
                let db: Vec<f64> = g.iter().zip(val(*a)).map(|(g, x)| g * x).collect();
                add_into(&mut grads[*b], &db);
            }
        }
        Op::AddRow(a, bias) => {
            if wants(*a) {
                add_into(&mut grads[*a], g);
            }
            if wants(*bias) {
                let n = val(*bias).len();
                let mut db = vec![0.0; n];
                for row in g.chunks(n) {
                    db.iter_mut().zip(row).for_each(|(d, x)| *d += x);
                }
                add_into(&mut grads[*bias], &db);
            }
        }
        Op::Scale(a, c) => {
            if wants(*a) {
                let da: Vec<f64> = g.iter().map(|x| x * c).collect();
                add_into(&mut grads[*a], &da);
            }
        }
        Op::Sigmoid(a) => {
            if wants(*a) {
                let s = nodes[i].value.data();
                let da: Vec<f64> = g.iter().zip(s).map(|(g, s)| g * s * (1.0 - s)).collect();
                add_into(&mut grads[*a], &da);
            }
        }
        Op::Gelu(a) => {
            if wants(*a) {
                let da: Vec<f64> = g.iter().zip(val(*a)).map(|(g, &x)| g * gelu_grad(x)).collect();
                add_into(&mut grads[*a], &da);
            }
        }
        Op::SoftmaxRows(a) => {
            if wants(*a) {
                let y = nodes[i].value.data();
                let n = nodes[i].value.cols();
                let mut da = vec![0.0; y.len()];
                for r in 0..y.len() / n {
                    let yr = &y[r * n..(r + 1) * n];
                    let gr = &g[r * n..(r + 1) * n];
                    let s = dot(yr, gr);
                    for c in 0..n {
                        da[r * n + c] = yr[c] * (gr[c] - s);
                    }
                }
                add_into(&mut grads[*a], &da);
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            normed,
            inv_std,
        } => {
            let n = val(*gain).len();
            let rows = normed.len() / n;
            if wants(*x) {
                let gv = val(*gain);
                let mut dx = vec![0.0; normed.len()];
                for r in 0..rows {
                    let mut sum_dh = 0.0;
                    let mut sum_dh_h = 0.0;
                    for c in 0..n {
                        let dh = g[r * n + c] * gv[c];
                        sum_dh += dh;
                        sum_dh_h += dh * normed[r * n + c];
                    }
                    let nf = n as f64;
                    for c in 0..n {
                        let dh = g[r * n + c] * gv[c];
                        dx[r * n + c] = inv_std[r] / nf * (nf * dh - sum_dh - normed[r * n + c] * sum_dh_h);
                    }
                }
                add_into(&mut grads[*x], &dx);
            }
            if wants(*gain) {
                let mut dg = vec![0.0; n];
                for (k, (&gv, &h)) in g.iter().zip(normed).enumerate() {
                    dg[k % n] += gv * h;
                }
                add_into(&mut grads[*gain], &dg);
            }
            if wants(*bias) {
                let mut db = vec![0.0; n];
                for (k, &gv) in g.iter().enumerate() {
                    db[k % n] += gv;
                }
                add_into(&mut grads[*bias], &db);
            }
        }
        Op::Embedding { table, ids } => {
            if wants(*table) {
                let d = shape(*table)[1];
                let mut dt = vec![0.0; val(*table).len()];
                for (r, &id) in ids.iter().enumerate() {
                    for c in 0..d {
                        dt[id * d + c] += g[r * d + c];
                    }
                }
                add_into(&mut grads[*table], &dt);
            }
        }
        Op::Attention {
            q,
            k,
            v,
            heads,
            seq,
            probs,
        } => {
            let (rows, d) = (shape(*q)[0], shape(*q)[1]);
            let (heads, seq) = (*heads, *seq);
            let batch = rows / seq;
            let dh = d / heads;
            let scale = 1.0 / (dh as f64).sqrt();
            let (qs, ks, vs) = (val(*q), val(*k), val(*v));
            let mut dq = vec![0.0; rows * d];
            let mut dk = vec![0.0; rows * d];
            let mut dv = vec![0.0; rows * d];
            let mut dp = vec![0.0; seq];
            for b in 0..batch {
                for h in 0..heads {
                    let at = |r: usize| (b * seq + r) * d + h * dh;
                    for i in 0..seq {
                        let p = &probs[((b * heads + h) * seq + i) * seq..][..seq];
                        let go = &g[at(i)..][..dh];
                        let mut s = 0.0;
                        for (j, (&pj, dpj)) in p.iter().zip(dp.iter_mut()).enumerate() {
                            if pj == 0.0 {
                                *dpj = 0.0;
                                continue;
                            }
                            let r = at(j);
                            *dpj = dot(go, &vs[r..][..dh]);
                            s += pj * *dpj;
                            for (x, &gc) in dv[r..][..dh].iter_mut().zip(go) {
                                *x += pj * gc;
                            }
                        }
                        let qrow = &qs[at(i)..][..dh];
                        let dq_row = &mut dq[at(i)..][..dh];
                        for (j, (&pj, &dpj)) in p.iter().zip(&dp).enumerate() {
                            if pj == 0.0 {
                                continue;
                            }
                            let ds = pj * (dpj - s) * scale;
                            let r = at(j);
                            let pairs = dq_row.iter_mut().zip(&mut dk[r..][..dh]);
                            for ((dqc, dkc), (&kc, &qc)) in pairs.zip(ks[r..][..dh].iter().zip(qrow)) {
                                *dqc += ds * kc;
                                *dkc += ds * qc;
                            }
                        }
                    }
                }
            }
            if wants(*q) {
                add_into(&mut grads[*q], &dq);
            }
            if wants(*k) {
                add_into(&mut grads[*k], &dk);
            }
            if wants(*v) {
                add_into(&mut grads[*v], &dv);
            }
        }
        Op::PoolRows { h, seq, weights } => {
            if wants(*h) {
                let d = shape(*h)[1];
                let rows = shape(*h)[0];
                let mut dh = vec![0.0; rows * d];
                for r in 0..rows {
                    let w = weights[r];
                    if w == 0.0 {
                        continue;
                    }
                    let b = r / seq;
                    for c in 0..d {
                        dh[r * d + c] = w * g[b * d + c];
                    }
                }
                add_into(&mut grads[*h], &dh);
            }
        }
        Op::Reshape(a) => {
            if wants(*a) {
                add_into(&mut grads[*a], g);
            }
        }
        Op::Sum(a) => {
            if wants(*a) {
                let da = vec![g[0]; val(*a).len()];
                add_into(&mut grads[*a], &da);
            }
        }
        Op::Mean(a) => {
            if wants(*a) {
                let n = val(*a).len();
                let da = vec![g[0] / n as f64; n];
                add_into(&mut grads[*a], &da);
            }
        }
        Op::BceWithLogits {
            logits,
            targets,
            weights,
        } => {
            if wants(*logits) {
                let x = val(*logits);
                let labels = weights.len();
                let scale = g[0] / x.len() as f64;
                let dx: Vec<f64> = x
                    .iter()
                    .zip(targets)
                    .enumerate()
                    .map(|(k, (&xv, &t))| scale * weights[k % labels] * (stable_sigmoid(xv) - t))
                    .collect();
                add_into(&mut grads[*logits], &dx);
            }
        }
        Op::SoftCrossEntropy { logits, targets, probs } => {
            if wants(*logits) {
                let n = shape(*logits).last().copied().unwrap_or(1);
                let rows = probs.len() / n;
                let scale = g[0] / rows as f64;
                let mut dz = vec![0.0; probs.len()];
                for r in 0..rows {
                    let mass: f64 = targets[r * n..(r + 1) * n].iter().sum();
                    for c in 0..n {
                        dz[r * n + c] = scale * (probs[r * n + c] * mass - targets[r * n + c]);
                    }
                }
                add_into(&mut grads[*logits], &dz);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(t: &mut Tape<'_>, rows: &[Vec<f64>]) -> Var {
        t.leaf(Tensor::from_rows(rows).with_requires_grad(true)).unwrap()
    }

    #[test]
    fn matmul_identity_and_projector() {
        let mut t = Tape::new();
        let i2 = t.constant(Tensor::from_rows(&[vec![1., 0.], vec![0., 1.]])).unwrap();
        let m = t.constant(Tensor::from_rows(&[vec![1., 2.], vec![3., 4.]])).unwrap();
        let c = t.matmul(i2, m).unwrap();
        assert_eq!(t.value(c).data(), &[1., 2., 3., 4.]);

        let p = t.constant(Tensor::from_rows(&[vec![1., 0.], vec![0., 0.]])).unwrap();
        let n = t.constant(Tensor::from_rows(&[vec![5., 6.], vec![7., 8.]])).unwrap();
        let c = t.matmul(p, n).unwrap();
        assert_eq!(t.value(c).data(), &[5., 6., 0., 0.]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 3])).unwrap();
        let b = t.constant(Tensor::zeros(&[2, 3])).unwrap();
        let msg = t.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(msg.contains("vs"), "{msg}");
    }

    #[test]
    fn sigmoid_reference_points() {
        assert_eq!(stable_sigmoid(0.0), 0.5);
        assert!((stable_sigmoid(3f64.ln()) - 0.75).abs() < 1e-15);
        let lo = stable_sigmoid(-1000.0);
        assert!(lo > 0.0 && lo.is_finite());
        let hi = stable_sigmoid(1000.0);
        assert!(hi < 1.0);
    }

    #[test]
    fn softmax_uniform_and_large_inputs() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::from_rows(&[vec![0., 0.], vec![1000., 0.]])).unwrap();
        let s = t.softmax_rows(a).unwrap();
        let v = t.value(s).data();
        assert_eq!(&v[..2], &[0.5, 0.5]);
        assert!((v[2] - 1.0).abs() < 1e-12 && v[3] >= 0.0 && v[3] < 1e-12);
    }

    #[test]
    fn layer_norm_constant_row_and_pair() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::from_rows(&[vec![4., 4., 4.]])).unwrap();
        let g = t.constant(Tensor::full(&[3], 1.0)).unwrap();
        let b = t.constant(Tensor::zeros(&[3])).unwrap();
        let y = t.layer_norm(x, g, b, 1e-9).unwrap();
        assert!(t.value(y).data().iter().all(|v| *v == 0.0));

        let x = t.constant(Tensor::from_rows(&[vec![1., 3.]])).unwrap();
        let g = t.constant(Tensor::full(&[2], 1.0)).unwrap();
        let b = t.constant(Tensor::zeros(&[2])).unwrap();
        let y = t.layer_norm(x, g, b, 1e-9).unwrap();
        let v = t.value(y).data();
        assert!((v[0] + 1.0).abs() < 1e-6 && (v[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn diamond_graph_accumulates_both_paths() {
        // y = sum(x*x + 3x), dy/dx = 2x + 3
        let mut t = Tape::new();
        let x = leaf(&mut t, &[vec![1.0, -2.0, 0.5]]);
        let sq = t.mul(x, x).unwrap();
        let lin = t.scale(x, 3.0).unwrap();
        let s = t.add(sq, lin).unwrap();
        let y = t.sum(s).unwrap();
        t.backward(y).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[5.0, -1.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_foreign_vars() {
        let mut t = Tape::new();
        let x = leaf(&mut t, &[vec![1.0, 2.0]]);
        assert!(matches!(t.backward(x), Err(TensorError::NonScalarLoss(_))));

        let mut other = Tape::new();
        let y = other.leaf(Tensor::scalar(1.0)).unwrap();
        assert!(matches!(t.backward(y), Err(TensorError::ForeignVar)));
    }

    #[test]
    fn frozen_leaves_get_no_gradient() {
        let w = Tensor::from_rows(&[vec![1.0, 2.0]]);
        let mut t = Tape::new();
        let wv = t.param(&w);
        let x = leaf(&mut t, &[vec![3.0, 4.0]]);
        let p = t.mul(wv, x).unwrap();
        let y = t.sum(p).unwrap();
        t.backward(y).unwrap();
        assert!(t.grad(wv).is_none());
        assert_eq!(t.grad(x).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn bce_rejects_targets_outside_unit_interval() {
        let mut t = Tape::new();
        let x = leaf(&mut t, &[vec![0.0]]);
        assert!(t.bce_with_logits(x, &[1.5], &[]).is_err());
    }

    #[test]
    fn embedding_out_of_range_id() {
        let table = Tensor::zeros(&[4, 2]);
        let mut t = Tape::new();
        let tv = t.param(&table);
        assert!(matches!(
            t.embedding(tv, &[1, 4]),
            Err(TensorError::IndexOutOfRange { index: 4, bound: 4, .. })
        ));
    }

    #[test]
    fn attention_ignores_masked_keys() {
        // two sequences of length 3, one head of width 2; last key masked
        let mask = AttentionMask {
            key_mask: vec![true, true, false, true, true, false],
            causal: false,
        };
        let base: Vec<Vec<f64>> = (0..6).map(|r| vec![r as f64 * 0.1, 1.0 - r as f64 * 0.2]).collect();
        let mut changed = base.clone();
        changed[2] = vec![9.0, -9.0];
        changed[5] = vec![-4.0, 7.0];
        let run = |rows: &Vec<Vec<f64>>| {
            let mut t = Tape::new();
            let x = t.constant(Tensor::from_rows(rows)).unwrap();
            let o = t.attention(x, x, x, 1, 3, &mask).unwrap();
            t.value(o).clone()
        };
        let (a, b) = (run(&base), run(&changed));
        // real positions must match a run with the masked rows removed
        let mut t = Tape::new();
        let keep: Vec<Vec<f64>> = [0, 1, 3, 4].iter().map(|&r| base[r].clone()).collect();
        let x = t.constant(Tensor::from_rows(&keep)).unwrap();
        let short = AttentionMask {
            key_mask: vec![true; 4],
            causal: false,
        };
        let o = t.attention(x, x, x, 1, 2, &short).unwrap();
        for (k, r) in [0usize, 1, 3, 4].iter().enumerate() {
            for c in 0..2 {
                assert!((t.value(o).row(k)[c] - b.row(*r)[c]).abs() < 1e-12);
                assert!((t.value(o).row(k)[c] - a.row(*r)[c]).abs() < 1e-12);
            }
        }
    }
}
