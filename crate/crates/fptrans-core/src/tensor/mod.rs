//! Dense f64 tensors on a reverse-mode gradient tape.
//!
//! A [`Tape`] owns every tensor created during one forward pass. Operations
//! record themselves as they run; [`Tape::backward`] replays the records in
//! reverse and accumulates gradients into each participating tensor that has
//! `requires_grad` set. The whole engine is single-threaded and allocation
//! order is fixed, so identical inputs give bitwise-identical outputs and
//! gradients.
//!
//! Shapes are explicit everywhere: the only implicit alignment is
//! scalar-tensor ([`Tape::scale`], [`Tape::add_scalar`]) plus the named
//! row-bias op [`Tape::add_bias`].

pub mod grad_check;
pub mod kernels;
#[cfg(test)]
mod tests;

use crate::error::{Error, Result};
use kernels::*;

/// Handle to a tensor stored on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

/// One node on the tape: value, shape, and gradient slot.
#[derive(Debug)]
pub struct Tensor {
    data: Vec<f64>,
    shape: Vec<usize>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
    op: Op,
}

impl Tensor {
    pub fn data(&self) -> &[f64] {
        &self.data
    }
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }
    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }
    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Recorded operation together with whatever forward context its backward
/// rule needs.
#[derive(Debug)]
enum Op {
    Leaf,
    Matmul { a: TensorId, b: TensorId },
    Transpose { a: TensorId },
    Add { a: TensorId, b: TensorId },
    Sub { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    Scale { a: TensorId, c: f64 },
    AddScalar { a: TensorId },
    AddBias { a: TensorId, bias: TensorId },
    Relu { a: TensorId },
    Gelu { a: TensorId },
    Sigmoid { a: TensorId },
    Exp { a: TensorId },
    Log { a: TensorId },
    Clamp { a: TensorId, lo: f64, hi: f64 },
    Softmax { a: TensorId, axis: usize },
    LayerNorm { a: TensorId, gamma: TensorId, beta: TensorId, eps: f64 },
    SumAll { a: TensorId },
    MeanAll { a: TensorId },
    SumAxis { a: TensorId, axis: usize },
    MeanAxis { a: TensorId, axis: usize },
    Concat { parts: Vec<TensorId>, axis: usize },
    Slice { a: TensorId, axis: usize, start: usize },
    Reshape { a: TensorId },
    RepeatRows { a: TensorId, times: usize },
    MeanRowsMasked { a: TensorId, rows: Vec<usize> },
    BilinearResize { a: TensorId, in_hw: (usize, usize) },
    TransposedConv2x2 { a: TensorId, w: TensorId, bias: TensorId },
    CosineSim { a: TensorId, b: TensorId, eps: f64 },
    /// Per-position two-way softmax over {sim to fg proxy, max sim to bg
    /// proxies}/tau; `arg` records which bg proxy won the max at each row.
    FgProbMap {
        feats: TensorId,
        fg: TensorId,
        bg: Vec<TensorId>,
        tau: f64,
        eps: f64,
        arg: Vec<usize>,
    },
    /// Mean BCE over feature pairs: sigma(cos(fq_i, fs_j)/tau) vs same-label.
    PairwiseBce {
        fq: TensorId,
        fs: Vec<TensorId>,
        yq: Vec<u8>,
        ys: Vec<Vec<u8>>,
        tau: f64,
        eps: f64,
        pairs: Vec<(u32, u32, u32)>,
        sig: Vec<f64>,
    },
}

/// Reverse-mode tape. Not thread-safe; one forward/backward at a time.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Tensor>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0]
    }

    pub fn data(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    /// Value of a single-element tensor.
    pub fn value(&self, id: TensorId) -> f64 {
        debug_assert_eq!(self.nodes[id.0].data.len(), 1);
        self.nodes[id.0].data[0]
    }

    fn push(&mut self, data: Vec<f64>, shape: Vec<usize>, requires_grad: bool, op: Op) -> TensorId {
        debug_assert_eq!(numel(&shape), data.len());
        self.nodes.push(Tensor {
            data,
            shape,
            requires_grad,
            grad: None,
            op,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn any_grad(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    // ── Construction ────────────────────────────────────────────────────

    pub fn leaf(&mut self, data: Vec<f64>, shape: &[usize], requires_grad: bool) -> Result<TensorId> {
        if numel(shape) != data.len() {
            return Err(Error::shape(
                "leaf",
                format!("shape {:?} holds {} elements, got {}", shape, numel(shape), data.len()),
            ));
        }
        Ok(self.push(data, shape.to_vec(), requires_grad, Op::Leaf))
    }

    pub fn scalar(&mut self, v: f64) -> TensorId {
        self.push(vec![v], vec![1], false, Op::Leaf)
    }

    // ── Linear algebra ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape(
                "matmul",
                format!("cannot multiply {:?} by {:?}", sa, sb),
            ));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_nn(self.data(a), self.data(b), m, k, n);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, vec![m, n], rg, Op::Matmul { a, b }))
    }

    pub fn transpose(&mut self, a: TensorId) -> Result<TensorId> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(Error::shape("transpose", format!("need 2-d, got {:?}", s)));
        }
        let (r, c) = (s[0], s[1]);
        let x = self.data(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = x[i * c + j];
            }
        }
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(out, vec![c, r], rg, Op::Transpose { a }))
    }

    // ── Elementwise ─────────────────────────────────────────────────────

    fn binary_same_shape(
        &mut self,
        op_name: &'static str,
        a: TensorId,
        b: TensorId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<TensorId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op_name,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let out: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, shape, rg, op))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_same_shape("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_same_shape("sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_same_shape("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> TensorId {
        let out: Vec<f64> = self.data(a).iter().map(|&x| x * c).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.nodes[a.0].requires_grad;
        self.push(out, shape, rg, Op::Scale { a, c })
    }

    pub fn add_scalar(&mut self, a: TensorId, c: f64) -> TensorId {
        let out: Vec<f64> = self.data(a).iter().map(|&x| x + c).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.nodes[a.0].requires_grad;
        self.push(out, shape, rg, Op::AddScalar { a })
    }

    /// Row-wise bias: x is [t, c], bias is [c].
    pub fn add_bias(&mut self, a: TensorId, bias: TensorId) -> Result<TensorId> {
        let s = self.shape(a).to_vec();
        let sb = self.shape(bias).to_vec();
        if s.len() != 2 || sb.len() != 1 || sb[0] != s[1] {
            return Err(Error::shape(
                "add_bias",
                format!("{:?} + bias {:?}", s, sb),
            ));
        }
        let (t, c) = (s[0], s[1]);
        let mut out = self.data(a).to_vec();
        let b = self.data(bias);
        for row in 0..t {
            for j in 0..c {
                out[row * c + j] += b[j];
            }
        }
        let rg = self.any_grad(&[a, bias]);
        Ok(self.push(out, s, rg, Op::AddBias { a, bias }))
    }

    fn unary(&mut self, a: TensorId, f: impl Fn(f64) -> f64, op: Op) -> TensorId {
        let out: Vec<f64> = self.data(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.nodes[a.0].requires_grad;
        self.push(out, shape, rg, op)
    }

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        self.unary(a, |x| x.max(0.0), Op::Relu { a })
    }

    pub fn gelu(&mut self, a: TensorId) -> TensorId {
        self.unary(a, gelu, Op::Gelu { a })
    }

    pub fn sigmoid(&mut self, a: TensorId) -> TensorId {
        self.unary(a, sigmoid, Op::Sigmoid { a })
    }

    pub fn exp(&mut self, a: TensorId) -> TensorId {
        self.unary(a, f64::exp, Op::Exp { a })
    }

    pub fn log(&mut self, a: TensorId) -> TensorId {
        self.unary(a, f64::ln, Op::Log { a })
    }

    pub fn clamp(&mut self, a: TensorId, lo: f64, hi: f64) -> TensorId {
        self.unary(a, |x| x.clamp(lo, hi), Op::Clamp { a, lo, hi })
    }

    // ── Normalization ───────────────────────────────────────────────────

    /// Softmax along `axis` of a 1-d or 2-d tensor, max-subtracted.
    pub fn softmax(&mut self, a: TensorId, axis: usize) -> Result<TensorId> {
        let s = self.shape(a).to_vec();
        let rg = self.nodes[a.0].requires_grad;
        let out = match (s.len(), axis) {
            (1, 0) => {
                let mut v = self.data(a).to_vec();
                softmax_rows(&mut v, 1, s[0]);
                v
            }
            (2, 1) => {
                let mut v = self.data(a).to_vec();
                softmax_rows(&mut v, s[0], s[1]);
                v
            }
            (2, 0) => {
                // Column softmax via gather/scatter per column.
                let (r, c) = (s[0], s[1]);
                let x = self.data(a);
                let mut v = vec![0.0; r * c];
                let mut col = vec![0.0; r];
                for j in 0..c {
                    for i in 0..r {
                        col[i] = x[i * c + j];
                    }
                    softmax_rows(&mut col, 1, r);
                    for i in 0..r {
                        v[i * c + j] = col[i];
                    }
                }
                v
            }
            _ => {
                return Err(Error::shape(
                    "softmax",
                    format!("axis {} invalid for shape {:?}", axis, s),
                ))
            }
        };
        Ok(self.push(out, s, rg, Op::Softmax { a, axis }))
    }

    /// Layer norm over the last dimension. `gamma`/`beta` are 1-d of that size.
    pub fn layer_norm(
        &mut self,
        a: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
    ) -> Result<TensorId> {
        let s = self.shape(a).to_vec();
        let c = *s.last().ok_or_else(|| Error::shape("layer_norm", "0-d input"))?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "gamma {:?} / beta {:?} must match last dim {} of {:?}",
                    self.shape(gamma),
                    self.shape(beta),
                    c,
                    s
                ),
            ));
        }
        let rows = numel(&s) / c;
        let x = self.data(a);
        let g = self.data(gamma);
        let b = self.data(beta);
        let mut out = vec![0.0; x.len()];
        for r in 0..rows {
            let row = &x[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..c {
                out[r * c + j] = (row[j] - mean) * inv * g[j] + b[j];
            }
        }
        let rg = self.any_grad(&[a, gamma, beta]);
        Ok(self.push(out, s, rg, Op::LayerNorm { a, gamma, beta, eps }))
    }

    // ── Reductions ──────────────────────────────────────────────────────

    pub fn sum_all(&mut self, a: TensorId) -> TensorId {
        let s: f64 = self.data(a).iter().sum();
        let rg = self.nodes[a.0].requires_grad;
        self.push(vec![s], vec![1], rg, Op::SumAll { a })
    }

    pub fn mean_all(&mut self, a: TensorId) -> TensorId {
        let n = self.data(a).len();
        let s: f64 = self.data(a).iter().sum();
        let rg = self.nodes[a.0].requires_grad;
        self.push(vec![s / n as f64], vec![1], rg, Op::MeanAll { a })
    }

    fn axis_reduce(&mut self, a: TensorId, axis: usize, mean: bool) -> Result<TensorId> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 || axis > 1 {
            return Err(Error::shape(
                "axis_reduce",
                format!("axis {} on shape {:?}", axis, s),
            ));
        }
        let (r, c) = (s[0], s[1]);
        let x = self.data(a);
        let (out_len, div) = if axis == 0 { (c, r) } else { (r, c) };
        let mut out = vec![0.0; out_len];
        for i in 0..r {
            for j in 0..c {
                let o = if axis == 0 { j } else { i };
                out[o] += x[i * c + j];
            }
        }
        if mean {
            for v in &mut out {
                *v /= div as f64;
            }
        }
        let rg = self.nodes[a.0].requires_grad;
        let op = if mean {
            Op::MeanAxis { a, axis }
        } else {
            Op::SumAxis { a, axis }
        };
        Ok(self.push(out, vec![out_len], rg, op))
    }

    pub fn sum_axis(&mut self, a: TensorId, axis: usize) -> Result<TensorId> {
        self.axis_reduce(a, axis, false)
    }

    pub fn mean_axis(&mut self, a: TensorId, axis: usize) -> Result<TensorId> {
        self.axis_reduce(a, axis, true)
    }

    // ── Shape manipulation ──────────────────────────────────────────────

    /// Concatenate 2-d tensors along `axis`.
    pub fn concat(&mut self, parts: &[TensorId], axis: usize) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::shape("concat", "empty part list"));
        }
        let first = self.shape(parts[0]).to_vec();
        if first.len() != 2 || axis > 1 {
            return Err(Error::shape(
                "concat",
                format!("axis {} on shape {:?}", axis, first),
            ));
        }
        let fixed = first[1 - axis];
        let mut total = 0;
        for &p in parts {
            let sp = self.shape(p);
            if sp.len() != 2 || sp[1 - axis] != fixed {
                return Err(Error::shape(
                    "concat",
                    format!("{:?} does not align with {:?} on axis {}", sp, first, axis),
                ));
            }
            total += sp[axis];
        }
        let shape = if axis == 0 {
            vec![total, fixed]
        } else {
            vec![fixed, total]
        };
        let mut out = vec![0.0; numel(&shape)];
        if axis == 0 {
            let mut off = 0;
            for &p in parts {
                let d = self.data(p);
                out[off..off + d.len()].copy_from_slice(d);
                off += d.len();
            }
        } else {
            let mut col_off = 0;
            for &p in parts {
                let sp = self.shape(p).to_vec();
                let d = self.data(p);
                for i in 0..fixed {
                    for j in 0..sp[1] {
                        out[i * total + col_off + j] = d[i * sp[1] + j];
                    }
                }
                col_off += sp[1];
            }
        }
        let rg = self.any_grad(parts);
        Ok(self.push(
            out,
            shape,
            rg,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    /// Contiguous slice of a 2-d tensor along `axis`.
    pub fn slice(&mut self, a: TensorId, axis: usize, start: usize, len: usize) -> Result<TensorId> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 || axis > 1 || start + len > s[axis] {
            return Err(Error::shape(
                "slice",
                format!("[{}, {}) on axis {} of {:?}", start, start + len, axis, s),
            ));
        }
        let (r, c) = (s[0], s[1]);
        let x = self.data(a);
        let (out, shape) = if axis == 0 {
            (x[start * c..(start + len) * c].to_vec(), vec![len, c])
        } else {
            let mut v = vec![0.0; r * len];
            for i in 0..r {
                v[i * len..(i + 1) * len].copy_from_slice(&x[i * c + start..i * c + start + len]);
            }
            (v, vec![r, len])
        };
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(out, shape, rg, Op::Slice { a, axis, start }))
    }

    /// Split a 2-d tensor into consecutive chunks of the given sizes.
    pub fn split(&mut self, a: TensorId, axis: usize, sizes: &[usize]) -> Result<Vec<TensorId>> {
        let total: usize = sizes.iter().sum();
        let s = self.shape(a).to_vec();
        if s.len() != 2 || axis > 1 || total != s[axis] {
            return Err(Error::shape(
                "split",
                format!("sizes {:?} do not cover axis {} of {:?}", sizes, axis, s),
            ));
        }
        let mut out = Vec::with_capacity(sizes.len());
        let mut off = 0;
        for &len in sizes {
            out.push(self.slice(a, axis, off, len)?);
            off += len;
        }
        Ok(out)
    }

    pub fn reshape(&mut self, a: TensorId, shape: &[usize]) -> Result<TensorId> {
        if numel(shape) != self.data(a).len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {:?}", self.shape(a), shape),
            ));
        }
        let out = self.data(a).to_vec();
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(out, shape.to_vec(), rg, Op::Reshape { a }))
    }

    /// Expand a 1-d vector [c] into [times, c] by row repetition.
    pub fn repeat_rows(&mut self, a: TensorId, times: usize) -> Result<TensorId> {
        let s = self.shape(a).to_vec();
        if s.len() != 1 {
            return Err(Error::shape("repeat_rows", format!("need 1-d, got {:?}", s)));
        }
        let c = s[0];
        let x = self.data(a);
        let mut out = Vec::with_capacity(times * c);
        for _ in 0..times {
            out.extend_from_slice(x);
        }
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(out, vec![times, c], rg, Op::RepeatRows { a, times }))
    }

    /// Mean of the selected rows of a [t, c] tensor; `rows` must be nonempty.
    pub fn mean_rows_masked(&mut self, a: TensorId, rows: &[usize]) -> Result<TensorId> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(Error::shape("mean_rows_masked", format!("need 2-d, got {:?}", s)));
        }
        if rows.is_empty() {
            return Err(Error::EpisodeInvalid {
                reason: "masked mean over an empty position set".into(),
            });
        }
        let (t, c) = (s[0], s[1]);
        if let Some(&bad) = rows.iter().find(|&&r| r >= t) {
            return Err(Error::shape(
                "mean_rows_masked",
                format!("row {} out of range for {:?}", bad, s),
            ));
        }
        let x = self.data(a);
        let mut out = vec![0.0; c];
        for &r in rows {
            for j in 0..c {
                out[j] += x[r * c + j];
            }
        }
        let inv = 1.0 / rows.len() as f64;
        for v in &mut out {
            *v *= inv;
        }
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(
            out,
            vec![c],
            rg,
            Op::MeanRowsMasked {
                a,
                rows: rows.to_vec(),
            },
        ))
    }

    // ── Spatial ops (maps stored [h, w, c] row-major) ───────────────────

    pub fn bilinear_resize(
        &mut self,
        a: TensorId,
        out_h: usize,
        out_w: usize,
    ) -> Result<TensorId> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 {
            return Err(Error::shape(
                "bilinear_resize",
                format!("need [h,w,c], got {:?}", s),
            ));
        }
        let (h, w, c) = (s[0], s[1], s[2]);
        let out = kernels::bilinear_resize(self.data(a), h, w, c, out_h, out_w);
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(
            out,
            vec![out_h, out_w, c],
            rg,
            Op::BilinearResize { a, in_hw: (h, w) },
        ))
    }

    /// 1x1 convolution over an [h,w,cin] map: per-position linear projection.
    pub fn pointwise_conv(
        &mut self,
        a: TensorId,
        weight: TensorId,
        bias: TensorId,
    ) -> Result<TensorId> {
        let s = self.shape(a).to_vec();
        let sw = self.shape(weight).to_vec();
        if s.len() != 3 || sw.len() != 2 || sw[0] != s[2] {
            return Err(Error::shape(
                "pointwise_conv",
                format!("map {:?} with weight {:?}", s, sw),
            ));
        }
        let (h, w, cout) = (s[0], s[1], sw[1]);
        let flat = self.reshape(a, &[h * w, s[2]])?;
        let proj = self.matmul(flat, weight)?;
        let biased = self.add_bias(proj, bias)?;
        self.reshape(biased, &[h, w, cout])
    }

    /// 2x2 stride-2 transposed convolution: [h,w,cin] -> [2h,2w,cout].
    /// Weight layout [4, cin, cout], offset index oy*2+ox.
    pub fn transposed_conv_2x2(
        &mut self,
        a: TensorId,
        weight: TensorId,
        bias: TensorId,
    ) -> Result<TensorId> {
        let s = self.shape(a).to_vec();
        let sw = self.shape(weight).to_vec();
        if s.len() != 3 || sw.len() != 3 || sw[0] != 4 || sw[1] != s[2] {
            return Err(Error::shape(
                "transposed_conv_2x2",
                format!("map {:?} with weight {:?}", s, sw),
            ));
        }
        let (h, w, cin) = (s[0], s[1], s[2]);
        let cout = sw[2];
        if self.shape(bias) != [cout] {
            return Err(Error::shape(
                "transposed_conv_2x2",
                format!("bias {:?} for cout {}", self.shape(bias), cout),
            ));
        }
        let x = self.data(a);
        let wt = self.data(weight);
        let b = self.data(bias);
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![0.0; oh * ow * cout];
        for i in 0..h {
            for j in 0..w {
                let xin = &x[(i * w + j) * cin..(i * w + j + 1) * cin];
                for o in 0..4 {
                    let (oy, ox) = (i * 2 + o / 2, j * 2 + o % 2);
                    let dst = &mut out[(oy * ow + ox) * cout..(oy * ow + ox + 1) * cout];
                    dst.copy_from_slice(b);
                    let wo = &wt[o * cin * cout..(o + 1) * cin * cout];
                    for (ci, &xv) in xin.iter().enumerate() {
                        let wrow = &wo[ci * cout..(ci + 1) * cout];
                        for (dv, &wv) in dst.iter_mut().zip(wrow) {
                            *dv += xv * wv;
                        }
                    }
                }
            }
        }
        let rg = self.any_grad(&[a, weight, bias]);
        Ok(self.push(
            out,
            vec![oh, ow, cout],
            rg,
            Op::TransposedConv2x2 { a, w: weight, bias },
        ))
    }

    // ── Similarity / objective heads ────────────────────────────────────

    /// Cosine similarity of two 1-d vectors, epsilon-floored norms.
    pub fn cosine_similarity(&mut self, a: TensorId, b: TensorId, eps: f64) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 1 || sa != sb {
            return Err(Error::shape(
                "cosine_similarity",
                format!("{:?} vs {:?}", sa, sb),
            ));
        }
        let v = cos_sim(self.data(a), self.data(b), eps);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(vec![v], vec![1], rg, Op::CosineSim { a, b, eps }))
    }

    /// For each row of `feats` [t, c]: p = sigma((sim_f - max_n sim_n)/tau),
    /// the two-way softmax of the classification head. With no background
    /// proxies the max term is dropped and p = sigma(sim_f/tau).
    /// Max gradient routes to the argmax proxy, lowest index on ties.
    pub fn fg_prob_map(
        &mut self,
        feats: TensorId,
        fg: TensorId,
        bg: &[TensorId],
        tau: f64,
        eps: f64,
    ) -> Result<TensorId> {
        let s = self.shape(feats).to_vec();
        if s.len() != 2 {
            return Err(Error::shape("fg_prob_map", format!("need 2-d feats, got {:?}", s)));
        }
        let c = s[1];
        if self.shape(fg) != [c] || bg.iter().any(|&p| self.shape(p) != [c]) {
            return Err(Error::shape(
                "fg_prob_map",
                format!("proxies must be [{}]-vectors", c),
            ));
        }
        let t = s[0];
        let mut probs = vec![0.0; t];
        let mut arg = vec![usize::MAX; t];
        for i in 0..t {
            let row = &self.data(feats)[i * c..(i + 1) * c];
            let sf = cos_sim(row, self.data(fg), eps);
            if bg.is_empty() {
                probs[i] = sigmoid(sf / tau);
            } else {
                let mut best = f64::NEG_INFINITY;
                let mut best_n = 0;
                for (n, &p) in bg.iter().enumerate() {
                    let sn = cos_sim(row, self.data(p), eps);
                    if sn > best {
                        best = sn;
                        best_n = n;
                    }
                }
                arg[i] = best_n;
                probs[i] = sigmoid((sf - best) / tau);
            }
        }
        let mut all = vec![feats, fg];
        all.extend_from_slice(bg);
        let rg = self.any_grad(&all);
        Ok(self.push(
            probs,
            vec![t],
            rg,
            Op::FgProbMap {
                feats,
                fg,
                bg: bg.to_vec(),
                tau,
                eps,
                arg,
            },
        ))
    }

    /// Mean BCE over the listed (shot, query position, support position)
    /// pairs of sigma(cos(fq_i, fs_j)/tau) against the same-label indicator.
    pub fn pairwise_bce(
        &mut self,
        fq: TensorId,
        fs: &[TensorId],
        yq: Vec<u8>,
        ys: Vec<Vec<u8>>,
        tau: f64,
        eps: f64,
        pairs: Vec<(u32, u32, u32)>,
    ) -> Result<TensorId> {
        let sq = self.shape(fq).to_vec();
        if sq.len() != 2 || sq[0] != yq.len() {
            return Err(Error::shape(
                "pairwise_bce",
                format!("query feats {:?} vs {} labels", sq, yq.len()),
            ));
        }
        if fs.len() != ys.len() {
            return Err(Error::shape(
                "pairwise_bce",
                format!("{} support maps vs {} label maps", fs.len(), ys.len()),
            ));
        }
        for (k, &f) in fs.iter().enumerate() {
            let ss = self.shape(f);
            if ss.len() != 2 || ss[1] != sq[1] || ss[0] != ys[k].len() {
                return Err(Error::shape(
                    "pairwise_bce",
                    format!("support map {} shape {:?} vs {} labels", k, ss, ys[k].len()),
                ));
            }
        }
        if pairs.is_empty() {
            return Err(Error::EpisodeInvalid {
                reason: "pairwise loss over zero qualifying pairs".into(),
            });
        }
        let c = sq[1];
        let mut sig = Vec::with_capacity(pairs.len());
        let mut loss = 0.0;
        for &(k, i, j) in &pairs {
            let a = &self.data(fq)[i as usize * c..(i as usize + 1) * c];
            let b = &self.data(fs[k as usize])[j as usize * c..(j as usize + 1) * c];
            let z = cos_sim(a, b, eps) / tau;
            let y = yq[i as usize] == ys[k as usize][j as usize];
            // BCE(sigma(z), y) = y*softplus(-z) + (1-y)*softplus(z)
            loss += if y { softplus(-z) } else { softplus(z) };
            sig.push(sigmoid(z));
        }
        loss /= pairs.len() as f64;
        let mut all = vec![fq];
        all.extend_from_slice(fs);
        let rg = self.any_grad(&all);
        Ok(self.push(
            vec![loss],
            vec![1],
            rg,
            Op::PairwiseBce {
                fq,
                fs: fs.to_vec(),
                yq,
                ys,
                tau,
                eps,
                pairs,
                sig,
            },
        ))
    }

    // ── Backward ────────────────────────────────────────────────────────

    fn accumulate(&mut self, id: TensorId, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        let n = self.nodes[id.0].data.len();
        let g = self.nodes[id.0].grad.get_or_insert_with(|| vec![0.0; n]);
        f(g);
    }

    /// Reverse replay from a scalar loss. Gradients accumulate (sum) where a
    /// tensor feeds several consumers.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.shape(loss)),
            ));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for idx in (0..self.nodes.len()).rev() {
            if self.nodes[idx].grad.is_none() {
                continue;
            }
            let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
            let g = self.nodes[idx].grad.as_ref().unwrap().clone();
            self.backprop_op(&op, TensorId(idx), &g);
            self.nodes[idx].op = op;
        }
        Ok(())
    }

    fn backprop_op(&mut self, op: &Op, out: TensorId, g: &[f64]) {
        match *op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[1];
                if self.nodes[a.0].requires_grad {
                    let da = matmul_nt(g, self.data(b), m, n, k);
                    self.accumulate(a, |ga| add_into(ga, &da));
                }
                if self.nodes[b.0].requires_grad {
                    let db = matmul_tn(self.data(a), g, k, m, n);
                    self.accumulate(b, |gb| add_into(gb, &db));
                }
            }
            Op::Transpose { a } => {
                let (r, c) = (self.shape(a)[0], self.shape(a)[1]);
                let mut da = vec![0.0; r * c];
                for j in 0..c {
                    for i in 0..r {
                        da[i * c + j] = g[j * r + i];
                    }
                }
                self.accumulate(a, |ga| add_into(ga, &da));
            }
            Op::Add { a, b } => {
                self.accumulate(a, |ga| add_into(ga, g));
                self.accumulate(b, |gb| add_into(gb, g));
            }
            Op::Sub { a, b } => {
                self.accumulate(a, |ga| add_into(ga, g));
                self.accumulate(b, |gb| {
                    for (x, &y) in gb.iter_mut().zip(g) {
                        *x -= y;
                    }
                });
            }
            Op::Mul { a, b } => {
                if self.nodes[a.0].requires_grad {
                    let da: Vec<f64> = g.iter().zip(self.data(b)).map(|(&x, &y)| x * y).collect();
                    self.accumulate(a, |ga| add_into(ga, &da));
                }
                if self.nodes[b.0].requires_grad {
                    let db: Vec<f64> = g.iter().zip(self.data(a)).map(|(&x, &y)| x * y).collect();
                    self.accumulate(b, |gb| add_into(gb, &db));
                }
            }
            Op::Scale { a, c } => {
                self.accumulate(a, |ga| {
                    for (x, &y) in ga.iter_mut().zip(g) {
                        *x += c * y;
                    }
                });
            }
            Op::AddScalar { a } => {
                self.accumulate(a, |ga| add_into(ga, g));
            }
            Op::AddBias { a, bias } => {
                self.accumulate(a, |ga| add_into(ga, g));
                if self.nodes[bias.0].requires_grad {
                    let c = self.shape(bias)[0];
                    let mut db = vec![0.0; c];
                    for (i, &gv) in g.iter().enumerate() {
                        db[i % c] += gv;
                    }
                    self.accumulate(bias, |gb| add_into(gb, &db));
                }
            }
            Op::Relu { a } => {
                let da: Vec<f64> = g
                    .iter()
                    .zip(self.data(a))
                    .map(|(&gv, &x)| if x > 0.0 { gv } else { 0.0 })
                    .collect();
                self.accumulate(a, |ga| add_into(ga, &da));
            }
            Op::Gelu { a } => {
                let da: Vec<f64> = g
                    .iter()
                    .zip(self.data(a))
                    .map(|(&gv, &x)| gv * gelu_grad(x))
                    .collect();
                self.accumulate(a, |ga| add_into(ga, &da));
            }
            Op::Sigmoid { a } => {
                let da: Vec<f64> = g
                    .iter()
                    .zip(self.data(out))
                    .map(|(&gv, &y)| gv * y * (1.0 - y))
                    .collect();
                self.accumulate(a, |ga| add_into(ga, &da));
            }
            Op::Exp { a } => {
                let da: Vec<f64> = g
                    .iter()
                    .zip(self.data(out))
                    .map(|(&gv, &y)| gv * y)
                    .collect();
                self.accumulate(a, |ga| add_into(ga, &da));
            }
            Op::Log { a } => {
                let da: Vec<f64> = g
                    .iter()
                    .zip(self.data(a))
                    .map(|(&gv, &x)| gv / x)
                    .collect();
                self.accumulate(a, |ga| add_into(ga, &da));
            }
            Op::Clamp { a, lo, hi } => {
                let da: Vec<f64> = g
                    .iter()
                    .zip(self.data(a))
                    .map(|(&gv, &x)| if x > lo && x < hi { gv } else { 0.0 })
                    .collect();
                self.accumulate(a, |ga| add_into(ga, &da));
            }
            Op::Softmax { a, axis } => {
                let s = self.shape(a).to_vec();
                let y = self.data(out);
                let mut da = vec![0.0; y.len()];
                let (rows, cols, row_major) = match (s.len(), axis) {
                    (1, 0) => (1, s[0], true),
                    (2, 1) => (s[0], s[1], true),
                    _ => (s[1], s[0], false), // 2-d axis 0: columns
                };
                for r in 0..rows {
                    let idx = |k: usize| if row_major { r * cols + k } else { k * rows + r };
                    let mut dot = 0.0;
                    for k in 0..cols {
                        dot += g[idx(k)] * y[idx(k)];
                    }
                    for k in 0..cols {
                        da[idx(k)] = y[idx(k)] * (g[idx(k)] - dot);
                    }
                }
                self.accumulate(a, |ga| add_into(ga, &da));
            }
            Op::LayerNorm { a, gamma, beta, eps } => {
                let s = self.shape(a).to_vec();
                let c = *s.last().unwrap();
                let rows = numel(&s) / c;
                let x = self.data(a).to_vec();
                let gm = self.data(gamma).to_vec();
                let mut da = vec![0.0; x.len()];
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for r in 0..rows {
                    let row = &x[r * c..(r + 1) * c];
                    let grow = &g[r * c..(r + 1) * c];
                    let mean = row.iter().sum::<f64>() / c as f64;
                    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|&v| (v - mean) * inv).collect();
                    let mut sum_gg = 0.0;
                    let mut sum_ggx = 0.0;
                    for j in 0..c {
                        let gg = grow[j] * gm[j];
                        sum_gg += gg;
                        sum_ggx += gg * xhat[j];
                        dgamma[j] += grow[j] * xhat[j];
                        dbeta[j] += grow[j];
                    }
                    let cn = c as f64;
                    for j in 0..c {
                        let gg = grow[j] * gm[j];
                        da[r * c + j] = inv * (gg - sum_gg / cn - xhat[j] * sum_ggx / cn);
                    }
                }
                self.accumulate(a, |ga| add_into(ga, &da));
                self.accumulate(gamma, |gg| add_into(gg, &dgamma));
                self.accumulate(beta, |gb| add_into(gb, &dbeta));
            }
            Op::SumAll { a } => {
                let gv = g[0];
                self.accumulate(a, |ga| {
                    for x in ga.iter_mut() {
                        *x += gv;
                    }
                });
            }
            Op::MeanAll { a } => {
                let n = self.nodes[a.0].data.len();
                let gv = g[0] / n as f64;
                self.accumulate(a, |ga| {
                    for x in ga.iter_mut() {
                        *x += gv;
                    }
                });
            }
            Op::SumAxis { a, axis } | Op::MeanAxis { a, axis } => {
                let s = self.shape(a).to_vec();
                let (r, c) = (s[0], s[1]);
                let div = match op {
                    Op::MeanAxis { .. } => {
                        if axis == 0 {
                            r as f64
                        } else {
                            c as f64
                        }
                    }
                    _ => 1.0,
                };
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        let o = if axis == 0 { j } else { i };
                        da[i * c + j] = g[o] / div;
                    }
                }
                self.accumulate(a, |ga| add_into(ga, &da));
            }
            Op::Concat { ref parts, axis } => {
                let out_shape = self.shape(out).to_vec();
                if axis == 0 {
                    let mut off = 0;
                    for &p in parts {
                        let len = self.nodes[p.0].data.len();
                        let piece = g[off..off + len].to_vec();
                        self.accumulate(p, |gp| add_into(gp, &piece));
                        off += len;
                    }
                } else {
                    let rows = out_shape[0];
                    let total = out_shape[1];
                    let mut col_off = 0;
                    for &p in parts {
                        let pc = self.shape(p)[1];
                        let mut piece = vec![0.0; rows * pc];
                        for i in 0..rows {
                            piece[i * pc..(i + 1) * pc]
                                .copy_from_slice(&g[i * total + col_off..i * total + col_off + pc]);
                        }
                        self.accumulate(p, |gp| add_into(gp, &piece));
                        col_off += pc;
                    }
                }
            }
            Op::Slice { a, axis, start } => {
                let s = self.shape(a).to_vec();
                let os = self.shape(out).to_vec();
                let (r, c) = (s[0], s[1]);
                let mut da = vec![0.0; r * c];
                if axis == 0 {
                    da[start * c..(start + os[0]) * c].copy_from_slice(g);
                } else {
                    for i in 0..r {
                        for j in 0..os[1] {
                            da[i * c + start + j] = g[i * os[1] + j];
                        }
                    }
                }
                self.accumulate(a, |ga| add_into(ga, &da));
            }
            Op::Reshape { a } => {
                self.accumulate(a, |ga| add_into(ga, g));
            }
            Op::RepeatRows { a, times } => {
                let c = self.shape(a)[0];
                let mut da = vec![0.0; c];
                for t in 0..times {
                    for j in 0..c {
                        da[j] += g[t * c + j];
                    }
                }
                self.accumulate(a, |ga| add_into(ga, &da));
            }
            Op::MeanRowsMasked { a, ref rows } => {
                let c = self.shape(a)[1];
                let inv = 1.0 / rows.len() as f64;
                let rows = rows.clone();
                self.accumulate(a, |ga| {
                    for &r in &rows {
                        for j in 0..c {
                            ga[r * c + j] += g[j] * inv;
                        }
                    }
                });
            }
            Op::BilinearResize { a, in_hw } => {
                let os = self.shape(out).to_vec();
                let c = os[2];
                let mut da = vec![0.0; in_hw.0 * in_hw.1 * c];
                bilinear_resize_adjoint(g, in_hw.0, in_hw.1, c, os[0], os[1], &mut da);
                self.accumulate(a, |ga| add_into(ga, &da));
            }
            Op::TransposedConv2x2 { a, w, bias } => {
                let s = self.shape(a).to_vec();
                let (h, wd, cin) = (s[0], s[1], s[2]);
                let cout = self.shape(w)[2];
                let ow = 2 * wd;
                let x = self.data(a).to_vec();
                let wt = self.data(w).to_vec();
                let mut da = vec![0.0; h * wd * cin];
                let mut dw = vec![0.0; 4 * cin * cout];
                let mut db = vec![0.0; cout];
                for i in 0..h {
                    for j in 0..wd {
                        let xin = &x[(i * wd + j) * cin..(i * wd + j + 1) * cin];
                        let dain = &mut da[(i * wd + j) * cin..(i * wd + j + 1) * cin];
                        for o in 0..4 {
                            let (oy, ox) = (i * 2 + o / 2, j * 2 + o % 2);
                            let gout = &g[(oy * ow + ox) * cout..(oy * ow + ox + 1) * cout];
                            let wo = &wt[o * cin * cout..(o + 1) * cin * cout];
                            let dwo = &mut dw[o * cin * cout..(o + 1) * cin * cout];
                            for ci in 0..cin {
                                let wrow = &wo[ci * cout..(ci + 1) * cout];
                                let dwrow = &mut dwo[ci * cout..(ci + 1) * cout];
                                let mut acc = 0.0;
                                for co in 0..cout {
                                    acc += gout[co] * wrow[co];
                                    dwrow[co] += xin[ci] * gout[co];
                                }
                                dain[ci] += acc;
                            }
                            for co in 0..cout {
                                db[co] += gout[co];
                            }
                        }
                    }
                }
                self.accumulate(a, |ga| add_into(ga, &da));
                self.accumulate(w, |gw| add_into(gw, &dw));
                self.accumulate(bias, |gb| add_into(gb, &db));
            }
            Op::CosineSim { a, b, eps } => {
                let av = self.data(a).to_vec();
                let bv = self.data(b).to_vec();
                let mut da = vec![0.0; av.len()];
                let mut db = vec![0.0; bv.len()];
                cos_sim_grad(&av, &bv, eps, g[0], &mut da, &mut db);
                self.accumulate(a, |ga| add_into(ga, &da));
                self.accumulate(b, |gb| add_into(gb, &db));
            }
            Op::FgProbMap {
                feats,
                fg,
                ref bg,
                tau,
                eps,
                ref arg,
            } => {
                let c = self.shape(feats)[1];
                let t = self.shape(feats)[0];
                let probs = self.data(out).to_vec();
                let fv = self.data(feats).to_vec();
                let fgv = self.data(fg).to_vec();
                let bgv: Vec<Vec<f64>> = bg.iter().map(|&p| self.data(p).to_vec()).collect();
                let mut dfeats = vec![0.0; fv.len()];
                let mut dfg = vec![0.0; c];
                let mut dbg = vec![vec![0.0; c]; bg.len()];
                for i in 0..t {
                    let p = probs[i];
                    let base = g[i] * p * (1.0 - p) / tau;
                    if base == 0.0 {
                        continue;
                    }
                    let row = &fv[i * c..(i + 1) * c];
                    let drow = &mut dfeats[i * c..(i + 1) * c];
                    cos_sim_grad(row, &fgv, eps, base, drow, &mut dfg);
                    if arg[i] != usize::MAX {
                        let n = arg[i];
                        cos_sim_grad(row, &bgv[n], eps, -base, drow, &mut dbg[n]);
                    }
                }
                self.accumulate(feats, |gf| add_into(gf, &dfeats));
                self.accumulate(fg, |gf| add_into(gf, &dfg));
                for (n, &p) in bg.iter().enumerate() {
                    self.accumulate(p, |gp| add_into(gp, &dbg[n]));
                }
            }
            Op::PairwiseBce {
                fq,
                ref fs,
                ref yq,
                ref ys,
                tau,
                eps,
                ref pairs,
                ref sig,
            } => {
                let c = self.shape(fq)[1];
                let fqv = self.data(fq).to_vec();
                let fsv: Vec<Vec<f64>> = fs.iter().map(|&f| self.data(f).to_vec()).collect();
                let mut dfq = vec![0.0; fqv.len()];
                let mut dfs: Vec<Vec<f64>> = fsv.iter().map(|v| vec![0.0; v.len()]).collect();
                let scale = g[0] / pairs.len() as f64;
                for (p, &(k, i, j)) in pairs.iter().enumerate() {
                    let (k, i, j) = (k as usize, i as usize, j as usize);
                    let y = if yq[i] == ys[k][j] { 1.0 } else { 0.0 };
                    // dBCE/dz = sigma(z) - y, then dz/dcos = 1/tau
                    let d_out = scale * (sig[p] - y) / tau;
                    let a = &fqv[i * c..(i + 1) * c];
                    let b = &fsv[k][j * c..(j + 1) * c];
                    cos_sim_grad(
                        a,
                        b,
                        eps,
                        d_out,
                        &mut dfq[i * c..(i + 1) * c],
                        &mut dfs[k][j * c..(j + 1) * c],
                    );
                }
                self.accumulate(fq, |gf| add_into(gf, &dfq));
                for (k, &f) in fs.iter().enumerate() {
                    self.accumulate(f, |gf| add_into(gf, &dfs[k]));
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
