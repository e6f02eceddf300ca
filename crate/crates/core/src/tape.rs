//! Reverse-mode automatic differentiation on a Wengert tape.
//!
//! Operations append nodes in topological order during the forward pass;
//! `backward` walks the same list in reverse and accumulates gradients into
//! every node that requires them. Parameters are persistent leaves registered
//! before [`Tape::commit_params`]; everything recorded after that watermark is
//! transient and discarded by [`Tape::reset`] between training steps.

// Index-based loops are the house style for these kernels: forward and
// backward passes mirror each other line by line.
#![allow(clippy::needless_range_loop)]

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

/// Attention mask selector for the fused softmax.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttnMask {
    /// Every query attends to every key.
    Full,
    /// Row i attends to columns 0..=i only.
    Causal,
}

#[derive(Debug, Clone)]
enum Op<F: Real> {
    Leaf,
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Scale(TensorId, F),
    Lerp { a: TensorId, b: TensorId, lam: F },
    AddRowBias { x: TensorId, bias: TensorId },
    Matmul(TensorId, TensorId),
    MatmulNT(TensorId, TensorId),
    Gelu(TensorId),
    Softmax { x: TensorId, axis: usize },
    CausalSoftmax { x: TensorId },
    LayerNorm { x: TensorId, gain: TensorId, bias: TensorId, eps: F },
    Dropout { x: TensorId, mask: Vec<F> },
    Conv2dValid { input: TensorId, kernels: TensorId, bias: TensorId, stride: usize },
    AddDecoupledPos { map: TensorId, freq: TensorId, time: TensorId },
    PatchFlatten { map: TensorId, kept_freq: Vec<usize>, kept_time: Vec<usize> },
    GatherRows { table: TensorId, ids: Vec<usize> },
    ConcatRows(Vec<TensorId>),
    ConcatCols(Vec<TensorId>),
    ColSlice { x: TensorId, start: usize, len: usize },
    MeanRows(TensorId),
    Sum(TensorId),
    CeSum { logits: TensorId, targets: Vec<usize>, counted: Vec<bool>, smoothing: F },
    BceMean { logits: TensorId, targets: Vec<F> },
}

struct Node<F: Real> {
    value: Tensor<F>,
    grad: Option<Vec<F>>,
    requires_grad: bool,
    op: Op<F>,
}

/// The Wengert tape plus the persistent parameter registry.
pub struct Tape<F: Real> {
    nodes: Vec<Node<F>>,
    params: Vec<(String, TensorId)>,
    persistent: Option<usize>,
    attn_score_flops: u64,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: Vec::new(), persistent: None, attn_score_flops: 0 }
    }

    // ── Leaves and bookkeeping ──────────────────────────────────────────

    /// Register a named trainable parameter. Only valid before `commit_params`.
    pub fn param(&mut self, name: impl Into<String>, value: Tensor<F>) -> Result<TensorId> {
        if self.persistent.is_some() {
            return Err(Error::Contract("param registered after commit_params".into()));
        }
        let id = self.push(value, true, Op::Leaf);
        self.params.push((name.into(), id));
        Ok(id)
    }

    /// Seal the parameter set; later nodes are transient and survive only
    /// until the next [`Tape::reset`].
    pub fn commit_params(&mut self) {
        self.persistent = Some(self.nodes.len());
    }

    /// Transient constant leaf (inputs, masks, sinusoids).
    pub fn constant(&mut self, value: Tensor<F>) -> TensorId {
        self.push(value, false, Op::Leaf)
    }

    /// Transient leaf that participates in gradients (used by tests).
    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> TensorId {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// Drop transient nodes and all gradients; persistent leaves survive.
    pub fn reset(&mut self) {
        let keep = self.persistent.unwrap_or(self.nodes.len());
        self.nodes.truncate(keep);
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub fn params(&self) -> &[(String, TensorId)] {
        &self.params
    }

    pub fn value(&self, id: TensorId) -> &Tensor<F> {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: TensorId) -> Option<&[F]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Freeze or unfreeze a leaf; frozen leaves receive no gradients.
    pub fn set_requires_grad(&mut self, id: TensorId, on: bool) {
        self.nodes[id.0].requires_grad = on;
    }

    /// Mutable access to a leaf's data (optimizer updates, checkpoint load).
    pub fn value_mut(&mut self, id: TensorId) -> &mut Tensor<F> {
        &mut self.nodes[id.0].value
    }

    pub fn take_grad(&mut self, id: TensorId) -> Option<Vec<F>> {
        self.nodes[id.0].grad.take()
    }

    /// Cumulative FLOPs spent on attention score matrices (Q·Kᵀ).
    pub fn attn_score_flops(&self) -> u64 {
        self.attn_score_flops
    }

    pub fn reset_attn_score_flops(&mut self) {
        self.attn_score_flops = 0;
    }

    pub(crate) fn count_attn_score_flops(&mut self, n: u64) {
        self.attn_score_flops += n;
    }

    fn push(&mut self, value: Tensor<F>, requires_grad: bool, op: Op<F>) -> TensorId {
        self.nodes.push(Node { value, grad: None, requires_grad, op });
        TensorId(self.nodes.len() - 1)
    }

    fn push_checked(&mut self, opname: &'static str, value: Tensor<F>, rg: bool, op: Op<F>) -> Result<TensorId> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: opname });
        }
        Ok(self.push(value, rg, op))
    }

    fn rg(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    // ── Elementwise and linear ops ──────────────────────────────────────

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let out = self.ew2("add", a, b, |x, y| x + y)?;
        self.push_checked("add", out, self.rg(&[a, b]), Op::Add(a, b))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let out = self.ew2("sub", a, b, |x, y| x - y)?;
        self.push_checked("sub", out, self.rg(&[a, b]), Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let out = self.ew2("mul", a, b, |x, y| x * y)?;
        self.push_checked("mul", out, self.rg(&[a, b]), Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: TensorId, c: F) -> Result<TensorId> {
        let out = self.value(a).map(|x| x * c);
        self.push_checked("scale", out, self.rg(&[a]), Op::Scale(a, c))
    }

    /// `lam * a + (1 - lam) * b`, the embedding-space Mixup primitive.
    pub fn lerp(&mut self, a: TensorId, b: TensorId, lam: F) -> Result<TensorId> {
        let out = self.value(a).lerp(self.value(b), lam)?;
        self.push_checked("lerp", out, self.rg(&[a, b]), Op::Lerp { a, b, lam })
    }

    fn ew2(&self, op: &'static str, a: TensorId, b: TensorId, f: impl Fn(F, F) -> F) -> Result<Tensor<F>> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape(op, format!("{:?} vs {:?}", va.shape(), vb.shape())));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape().to_vec(), data)
    }

    /// `[m×n] + [n]` broadcast along rows.
    pub fn add_row_bias(&mut self, x: TensorId, bias: TensorId) -> Result<TensorId> {
        let (vx, vb) = (self.value(x), self.value(bias));
        if vx.shape().len() != 2 || vb.numel() != vx.shape()[1] {
            return Err(Error::shape(
                "add_row_bias",
                format!("{:?} + {:?}", vx.shape(), vb.shape()),
            ));
        }
        let n = vx.shape()[1];
        let data = vx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + vb.data()[i % n])
            .collect();
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        self.push_checked("add_row_bias", out, self.rg(&[x, bias]), Op::AddRowBias { x, bias })
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape().len() != 2 || vb.shape().len() != 2 || va.cols() != vb.rows() {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", va.shape(), vb.shape()),
            ));
        }
        let out = matmul_raw(va, vb, false);
        self.push_checked("matmul", out, self.rg(&[a, b]), Op::Matmul(a, b))
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape().len() != 2 || vb.shape().len() != 2 || va.cols() != vb.cols() {
            return Err(Error::shape(
                "matmul_nt",
                format!("{:?} x {:?}ᵀ", va.shape(), vb.shape()),
            ));
        }
        let out = matmul_raw(va, vb, true);
        self.push_checked("matmul_nt", out, self.rg(&[a, b]), Op::MatmulNT(a, b))
    }

    // ── Nonlinearities ──────────────────────────────────────────────────

    /// GELU with the exact erf formulation: `x · Φ(x)`.
    pub fn gelu(&mut self, x: TensorId) -> Result<TensorId> {
        let out = self.value(x).map(|v| v * gauss_cdf(v));
        self.push_checked("gelu", out, self.rg(&[x]), Op::Gelu(x))
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: TensorId, axis: usize) -> Result<TensorId> {
        let vx = self.value(x);
        if axis >= vx.shape().len() {
            return Err(Error::shape(
                "softmax",
                format!("axis {axis} out of range for {:?}", vx.shape()),
            ));
        }
        let out = softmax_raw(vx, axis);
        self.push_checked("softmax", out, self.rg(&[x]), Op::Softmax { x, axis })
    }

    /// Row-wise softmax of a square score matrix where position i may only
    /// attend to positions 0..=i. Masked weights are exactly zero.
    pub fn causal_softmax(&mut self, x: TensorId) -> Result<TensorId> {
        let vx = self.value(x);
        if vx.shape().len() != 2 || vx.rows() != vx.cols() {
            return Err(Error::shape("causal_softmax", format!("{:?}", vx.shape())));
        }
        let (m, n) = (vx.rows(), vx.cols());
        let mut data = vec![F::zero(); m * n];
        for i in 0..m {
            let row = &vx.data()[i * n..(i + 1) * n];
            let limit = i + 1;
            let mx = row[..limit].iter().cloned().fold(F::neg_infinity(), F::max);
            let mut denom = F::zero();
            for j in 0..limit {
                let e = (row[j] - mx).exp();
                data[i * n + j] = e;
                denom += e;
            }
            for j in 0..limit {
                data[i * n + j] /= denom;
            }
        }
        let out = Tensor::new(vec![m, n], data)?;
        self.push_checked("causal_softmax", out, self.rg(&[x]), Op::CausalSoftmax { x })
    }

    /// Layer normalization over the last axis with learnable gain and bias.
    pub fn layer_norm(&mut self, x: TensorId, gain: TensorId, bias: TensorId, eps: F) -> Result<TensorId> {
        let (vx, vg, vb) = (self.value(x), self.value(gain), self.value(bias));
        let n = *vx.shape().last().unwrap();
        if vg.numel() != n || vb.numel() != n {
            return Err(Error::shape(
                "layer_norm",
                format!("x {:?}, gain {:?}, bias {:?}", vx.shape(), vg.shape(), vb.shape()),
            ));
        }
        if eps <= F::zero() {
            return Err(Error::InvalidConfig("layer_norm eps must be > 0".into()));
        }
        let rows = vx.numel() / n;
        let mut data = vec![F::zero(); vx.numel()];
        for r in 0..rows {
            let row = &vx.data()[r * n..(r + 1) * n];
            let (mean, var) = mean_var(row);
            let inv = (var + eps).sqrt().recip();
            for c in 0..n {
                let xhat = (row[c] - mean) * inv;
                data[r * n + c] = xhat * vg.data()[c] + vb.data()[c];
            }
        }
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        self.push_checked(
            "layer_norm",
            out,
            self.rg(&[x, gain, bias]),
            Op::LayerNorm { x, gain, bias, eps },
        )
    }

    /// Inverted dropout: kept elements are scaled by 1/(1-rate).
    pub fn dropout(&mut self, x: TensorId, rate: f64, rng: &mut crate::rng::Rng) -> Result<TensorId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidConfig(format!("dropout rate {rate} outside [0,1)")));
        }
        if rate == 0.0 {
            return Ok(x);
        }
        use rand::Rng as _;
        let keep = F::from_f64(1.0 / (1.0 - rate));
        let mask: Vec<F> = (0..self.value(x).numel())
            .map(|_| if rng.random::<f64>() < rate { F::zero() } else { keep })
            .collect();
        let vx = self.value(x);
        let data = vx.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        self.push_checked("dropout", out, self.rg(&[x]), Op::Dropout { x, mask })
    }

    // ── Structured ops for the patch frontend ───────────────────────────

    /// Valid (no padding) cross-correlation of a single-channel input with a
    /// bank of kernels, plus per-channel bias.
    ///
    /// input `[1×F×T]`, kernels `[d×1×k×k]`, bias `[d]` → `[d×F'×T']`.
    pub fn conv2d_valid(
        &mut self,
        input: TensorId,
        kernels: TensorId,
        bias: TensorId,
        stride: usize,
    ) -> Result<TensorId> {
        let (vi, vk, vb) = (self.value(input), self.value(kernels), self.value(bias));
        if vi.shape().len() != 3 || vi.shape()[0] != 1 {
            return Err(Error::shape("conv2d_valid", format!("input {:?}", vi.shape())));
        }
        if vk.shape().len() != 4 || vk.shape()[1] != 1 || vk.shape()[2] != vk.shape()[3] {
            return Err(Error::shape("conv2d_valid", format!("kernels {:?}", vk.shape())));
        }
        let (f, t) = (vi.shape()[1], vi.shape()[2]);
        let (d, k) = (vk.shape()[0], vk.shape()[2]);
        if vb.numel() != d {
            return Err(Error::shape("conv2d_valid", format!("bias {:?} for {d} kernels", vb.shape())));
        }
        if stride == 0 {
            return Err(Error::InvalidConfig("conv stride must be positive".into()));
        }
        if f < k || t < k {
            return Err(Error::shape(
                "conv2d_valid",
                format!("input {f}x{t} smaller than kernel {k}x{k}"),
            ));
        }
        let fo = (f - k) / stride + 1;
        let to = (t - k) / stride + 1;
        let mut data = vec![F::zero(); d * fo * to];
        for o in 0..d {
            let ker = &vk.data()[o * k * k..(o + 1) * k * k];
            let b = vb.data()[o];
            for i in 0..fo {
                for j in 0..to {
                    let mut acc = F::zero();
                    for u in 0..k {
                        let irow = &vi.data()[(i * stride + u) * t + j * stride..];
                        let krow = &ker[u * k..(u + 1) * k];
                        for v in 0..k {
                            acc += irow[v] * krow[v];
                        }
                    }
                    data[(o * fo + i) * to + j] = acc + b;
                }
            }
        }
        let out = Tensor::new(vec![d, fo, to], data)?;
        self.push_checked(
            "conv2d_valid",
            out,
            self.rg(&[input, kernels, bias]),
            Op::Conv2dValid { input, kernels, bias, stride },
        )
    }

    /// Decoupled positional add: `out[c,f,t] = map[c,f,t] + freq[c,f,0] + time[c,0,t]`.
    ///
    /// The embedding tables may be larger than the map; only the leading
    /// `F`/`T` slices contribute (and receive gradient).
    pub fn add_decoupled_pos(&mut self, map: TensorId, freq: TensorId, time: TensorId) -> Result<TensorId> {
        let (vm, vf, vt) = (self.value(map), self.value(freq), self.value(time));
        if vm.shape().len() != 3 {
            return Err(Error::shape("add_decoupled_pos", format!("map {:?}", vm.shape())));
        }
        let (d, f, t) = (vm.shape()[0], vm.shape()[1], vm.shape()[2]);
        let okf = vf.shape().len() == 3 && vf.shape()[0] == d && vf.shape()[2] == 1;
        let okt = vt.shape().len() == 3 && vt.shape()[0] == d && vt.shape()[1] == 1;
        if !okf || !okt {
            return Err(Error::shape(
                "add_decoupled_pos",
                format!("freq {:?}, time {:?} for map {:?}", vf.shape(), vt.shape(), vm.shape()),
            ));
        }
        let (fmax, tmax) = (vf.shape()[1], vt.shape()[2]);
        if f > fmax || t > tmax {
            return Err(Error::InvalidConfig(format!(
                "feature map {f}x{t} exceeds positional tables {fmax}x{tmax}"
            )));
        }
        let mut data = vec![F::zero(); vm.numel()];
        for c in 0..d {
            for fi in 0..f {
                let fe = vf.data()[c * fmax + fi];
                for ti in 0..t {
                    let te = vt.data()[c * tmax + ti];
                    let idx = (c * f + fi) * t + ti;
                    data[idx] = vm.data()[idx] + fe + te;
                }
            }
        }
        let out = Tensor::new(vec![d, f, t], data)?;
        self.push_checked(
            "add_decoupled_pos",
            out,
            self.rg(&[map, freq, time]),
            Op::AddDecoupledPos { map, freq, time },
        )
    }

    /// Select the kept rows and columns of a `[d×F×T]` feature map and
    /// flatten frequency-major into a `[L×d]` token sequence.
    pub fn patch_flatten(&mut self, map: TensorId, kept_freq: &[usize], kept_time: &[usize]) -> Result<TensorId> {
        let vm = self.value(map);
        if vm.shape().len() != 3 {
            return Err(Error::shape("patch_flatten", format!("map {:?}", vm.shape())));
        }
        let (d, f, t) = (vm.shape()[0], vm.shape()[1], vm.shape()[2]);
        if kept_freq.is_empty() || kept_time.is_empty() {
            return Err(Error::InvalidConfig("patch_flatten: empty kept set".into()));
        }
        for w in kept_freq.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::Contract("kept_freq not strictly increasing".into()));
            }
        }
        for w in kept_time.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::Contract("kept_time not strictly increasing".into()));
            }
        }
        if *kept_freq.last().unwrap() >= f || *kept_time.last().unwrap() >= t {
            return Err(Error::Contract("kept index out of grid bounds".into()));
        }
        let l = kept_freq.len() * kept_time.len();
        let mut data = vec![F::zero(); l * d];
        for (i, &fi) in kept_freq.iter().enumerate() {
            for (j, &ti) in kept_time.iter().enumerate() {
                let row = i * kept_time.len() + j;
                for c in 0..d {
                    data[row * d + c] = vm.data()[(c * f + fi) * t + ti];
                }
            }
        }
        let out = Tensor::new(vec![l, d], data)?;
        self.push_checked(
            "patch_flatten",
            out,
            self.rg(&[map]),
            Op::PatchFlatten { map, kept_freq: kept_freq.to_vec(), kept_time: kept_time.to_vec() },
        )
    }

    // ── Gather / reshape ────────────────────────────────────────────────

    /// Embedding lookup: stack `table[id]` rows. Repeated ids accumulate
    /// gradient additively.
    pub fn gather_rows(&mut self, table: TensorId, ids: &[usize]) -> Result<TensorId> {
        let vt = self.value(table);
        if vt.shape().len() != 2 {
            return Err(Error::shape("gather_rows", format!("table {:?}", vt.shape())));
        }
        if ids.is_empty() {
            return Err(Error::InvalidInput("gather_rows: empty id list".into()));
        }
        let (rows, d) = (vt.rows(), vt.cols());
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::InvalidInput(format!("row id {bad} out of range 0..{rows}")));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&vt.data()[i * d..(i + 1) * d]);
        }
        let out = Tensor::new(vec![ids.len(), d], data)?;
        self.push_checked("gather_rows", out, self.rg(&[table]), Op::GatherRows { table, ids: ids.to_vec() })
    }

    pub fn concat_rows(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::InvalidInput("concat_rows of nothing".into()));
        }
        let d = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.shape().len() != 2 || v.cols() != d {
                return Err(Error::shape("concat_rows", format!("{:?} vs width {d}", v.shape())));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let out = Tensor::new(vec![rows, d], data)?;
        self.push_checked("concat_rows", out, self.rg(parts), Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::InvalidInput("concat_cols of nothing".into()));
        }
        let m = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        for &p in parts {
            if self.value(p).shape().len() != 2 || self.value(p).rows() != m {
                return Err(Error::shape("concat_cols", format!("{:?} vs rows {m}", self.value(p).shape())));
            }
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![F::zero(); m * total];
        let mut off = 0;
        for (pi, &p) in parts.iter().enumerate() {
            let v = self.value(p);
            let w = widths[pi];
            for r in 0..m {
                data[r * total + off..r * total + off + w]
                    .copy_from_slice(&v.data()[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let out = Tensor::new(vec![m, total], data)?;
        self.push_checked("concat_cols", out, self.rg(parts), Op::ConcatCols(parts.to_vec()))
    }

    pub fn col_slice(&mut self, x: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let vx = self.value(x);
        if vx.shape().len() != 2 || start + len > vx.cols() {
            return Err(Error::shape(
                "col_slice",
                format!("cols {start}..{} of {:?}", start + len, vx.shape()),
            ));
        }
        let (m, n) = (vx.rows(), vx.cols());
        let mut data = Vec::with_capacity(m * len);
        for r in 0..m {
            data.extend_from_slice(&vx.data()[r * n + start..r * n + start + len]);
        }
        let out = Tensor::new(vec![m, len], data)?;
        self.push_checked("col_slice", out, self.rg(&[x]), Op::ColSlice { x, start, len })
    }

    /// Column means: `[m×n] → [1×n]`.
    pub fn mean_rows(&mut self, x: TensorId) -> Result<TensorId> {
        let vx = self.value(x);
        if vx.shape().len() != 2 {
            return Err(Error::shape("mean_rows", format!("{:?}", vx.shape())));
        }
        let (m, n) = (vx.rows(), vx.cols());
        let inv = F::from_f64(1.0 / m as f64);
        let mut data = vec![F::zero(); n];
        for r in 0..m {
            for c in 0..n {
                data[c] += vx.data()[r * n + c];
            }
        }
        for v in &mut data {
            *v *= inv;
        }
        let out = Tensor::new(vec![1, n], data)?;
        self.push_checked("mean_rows", out, self.rg(&[x]), Op::MeanRows(x))
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum(&mut self, x: TensorId) -> Result<TensorId> {
        let total = self.value(x).data().iter().fold(F::zero(), |a, &b| a + b);
        self.push_checked("sum", Tensor::scalar(total), self.rg(&[x]), Op::Sum(x))
    }

    // ── Losses ──────────────────────────────────────────────────────────

    /// Label-smoothed cross entropy, summed over the counted positions.
    ///
    /// `logits` is `[T×V]`; `targets[t]` is the gold class of row t and
    /// `counted[t]` excludes padding rows. The smoothed target distributes
    /// ε over all V classes: `q = (1-ε)·onehot + ε/V`.
    pub fn ce_sum(
        &mut self,
        logits: TensorId,
        targets: &[usize],
        counted: &[bool],
        smoothing: F,
    ) -> Result<TensorId> {
        let vl = self.value(logits);
        if vl.shape().len() != 2 {
            return Err(Error::shape("ce_sum", format!("logits {:?}", vl.shape())));
        }
        let (t, v) = (vl.rows(), vl.cols());
        if targets.len() != t || counted.len() != t {
            return Err(Error::shape(
                "ce_sum",
                format!("{t} logit rows vs {} targets / {} mask", targets.len(), counted.len()),
            ));
        }
        if smoothing < F::zero() || smoothing >= F::one() {
            return Err(Error::InvalidConfig("label smoothing must be in [0,1)".into()));
        }
        if !counted.iter().any(|&c| c) {
            return Err(Error::InvalidInput("ce_sum: no counted positions".into()));
        }
        if let Some(&bad) = targets.iter().find(|&&y| y >= v) {
            return Err(Error::InvalidInput(format!("target id {bad} out of vocab {v}")));
        }
        let eps_v = smoothing / F::from_f64(v as f64);
        let confid = F::one() - smoothing;
        let mut total = F::zero();
        for r in 0..t {
            if !counted[r] {
                continue;
            }
            let row = &vl.data()[r * v..(r + 1) * v];
            let logp = log_softmax_row(row);
            // -Σ_k q_k log p_k with q = (1-ε)·onehot + ε/V
            let mut loss = -confid * logp[targets[r]];
            if smoothing > F::zero() {
                let mut s = F::zero();
                for &lp in &logp {
                    s += lp;
                }
                loss -= eps_v * s;
            }
            total += loss;
        }
        self.push_checked(
            "ce_sum",
            Tensor::scalar(total),
            self.rg(&[logits]),
            Op::CeSum { logits, targets: targets.to_vec(), counted: counted.to_vec(), smoothing },
        )
    }

    /// Numerically stable mean binary cross entropy on logits.
    pub fn bce_mean(&mut self, logits: TensorId, targets: &[F]) -> Result<TensorId> {
        let vl = self.value(logits);
        if vl.numel() != targets.len() {
            return Err(Error::shape(
                "bce_mean",
                format!("{} logits vs {} targets", vl.numel(), targets.len()),
            ));
        }
        if targets.iter().any(|&y| y != F::zero() && y != F::one()) {
            return Err(Error::InvalidInput("bce targets must be 0 or 1".into()));
        }
        let n = F::from_f64(targets.len() as f64);
        let mut total = F::zero();
        for (&z, &y) in vl.data().iter().zip(targets) {
            // max(z,0) - z*y + ln(1 + e^{-|z|})
            total += z.max(F::zero()) - z * y + (F::one() + (-z.abs()).exp()).ln();
        }
        self.push_checked(
            "bce_mean",
            Tensor::scalar(total / n),
            self.rg(&[logits]),
            Op::BceMean { logits, targets: targets.to_vec() },
        )
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse-mode sweep from a scalar loss. Every tensor with
    /// `requires_grad` reachable from `loss` receives `∂loss/∂tensor`;
    /// fan-out contributions accumulate additively.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        if self.nodes.is_empty() {
            return Err(Error::Contract("backward on an empty tape".into()));
        }
        self.accumulate(loss, vec![F::one()]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad || self.nodes[idx].grad.is_none() {
                continue;
            }
            let grad = self.nodes[idx].grad.clone().unwrap();
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite { op: "backward" });
            }
            let op = self.nodes[idx].op.clone();
            self.backprop_node(idx, &grad, &op)?;
        }
        Ok(())
    }

    fn accumulate(&mut self, id: TensorId, contrib: Vec<F>) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut self.nodes[id.0].grad {
            Some(g) => {
                for (gi, ci) in g.iter_mut().zip(&contrib) {
                    *gi += *ci;
                }
            }
            None => self.nodes[id.0].grad = Some(contrib),
        }
    }

    fn accumulate_zeros_then(&mut self, id: TensorId, f: impl FnOnce(&mut [F])) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        let n = self.nodes[id.0].value.numel();
        if self.nodes[id.0].grad.is_none() {
            self.nodes[id.0].grad = Some(vec![F::zero(); n]);
        }
        f(self.nodes[id.0].grad.as_mut().unwrap());
    }

    fn backprop_node(&mut self, idx: usize, g: &[F], op: &Op<F>) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(*a, g.to_vec());
                self.accumulate(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(*a, g.to_vec());
                self.accumulate(*b, g.iter().map(|&x| -x).collect());
            }
            Op::Mul(a, b) => {
                let da: Vec<F> = g.iter().zip(self.value(*b).data()).map(|(&gi, &bi)| gi * bi).collect();
                let db: Vec<F> = g.iter().zip(self.value(*a).data()).map(|(&gi, &ai)| gi * ai).collect();
                self.accumulate(*a, da);
                self.accumulate(*b, db);
            }
            Op::Scale(a, c) => {
                self.accumulate(*a, g.iter().map(|&x| x * *c).collect());
            }
            Op::Lerp { a, b, lam } => {
                let l = *lam;
                self.accumulate(*a, g.iter().map(|&x| x * l).collect());
                self.accumulate(*b, g.iter().map(|&x| x * (F::one() - l)).collect());
            }
            Op::AddRowBias { x, bias } => {
                self.accumulate(*x, g.to_vec());
                let n = self.value(*bias).numel();
                self.accumulate_zeros_then(*bias, |gb| {
                    for (i, &gi) in g.iter().enumerate() {
                        gb[i % n] += gi;
                    }
                });
            }
            Op::Matmul(a, b) => {
                // out = a·b  →  da = g·bᵀ, db = aᵀ·g
                let (m, k) = (self.value(*a).rows(), self.value(*a).cols());
                let n = self.value(*b).cols();
                let vb = self.value(*b).data();
                let va = self.value(*a).data();
                let mut da = vec![F::zero(); m * k];
                for i in 0..m {
                    for j in 0..n {
                        let gij = g[i * n + j];
                        if gij == F::zero() {
                            continue;
                        }
                        for p in 0..k {
                            da[i * k + p] += gij * vb[p * n + j];
                        }
                    }
                }
                let mut db = vec![F::zero(); k * n];
                for i in 0..m {
                    for p in 0..k {
                        let aip = va[i * k + p];
                        if aip == F::zero() {
                            continue;
                        }
                        for j in 0..n {
                            db[p * n + j] += aip * g[i * n + j];
                        }
                    }
                }
                self.accumulate(*a, da);
                self.accumulate(*b, db);
            }
            Op::MatmulNT(a, b) => {
                // out = a·bᵀ  →  da = g·b, db = gᵀ·a
                let (m, k) = (self.value(*a).rows(), self.value(*a).cols());
                let n = self.value(*b).rows();
                let va = self.value(*a).data();
                let vb = self.value(*b).data();
                let mut da = vec![F::zero(); m * k];
                let mut db = vec![F::zero(); n * k];
                for i in 0..m {
                    for j in 0..n {
                        let gij = g[i * n + j];
                        if gij == F::zero() {
                            continue;
                        }
                        for p in 0..k {
                            da[i * k + p] += gij * vb[j * k + p];
                            db[j * k + p] += gij * va[i * k + p];
                        }
                    }
                }
                self.accumulate(*a, da);
                self.accumulate(*b, db);
            }
            Op::Gelu(x) => {
                let dx: Vec<F> = g
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(&gi, &xi)| gi * (gauss_cdf(xi) + xi * gauss_pdf(xi)))
                    .collect();
                self.accumulate(*x, dx);
            }
            Op::Softmax { x, axis } => {
                let y = &self.nodes[idx].value;
                let dx = softmax_backward(y, g, *axis);
                self.accumulate(*x, dx);
            }
            Op::CausalSoftmax { x } => {
                // Same Jacobian as softmax restricted to the unmasked prefix;
                // masked outputs are zero so the formula covers them too.
                let y = &self.nodes[idx].value;
                let dx = softmax_backward(y, g, 1);
                self.accumulate(*x, dx);
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let vx = self.value(*x);
                let vg = self.value(*gain);
                let n = *vx.shape().last().unwrap();
                let rows = vx.numel() / n;
                let mut dx = vec![F::zero(); vx.numel()];
                let mut dgain = vec![F::zero(); n];
                let mut dbias = vec![F::zero(); n];
                let nf = F::from_f64(n as f64);
                for r in 0..rows {
                    let row = &vx.data()[r * n..(r + 1) * n];
                    let grow = &g[r * n..(r + 1) * n];
                    let (mean, var) = mean_var(row);
                    let inv = (var + *eps).sqrt().recip();
                    // h = g ⊙ gain; dx = inv·(h - mean(h) - x̂·mean(h⊙x̂))
                    let mut mean_h = F::zero();
                    let mut mean_hx = F::zero();
                    for c in 0..n {
                        let xhat = (row[c] - mean) * inv;
                        let h = grow[c] * vg.data()[c];
                        mean_h += h;
                        mean_hx += h * xhat;
                        dgain[c] += grow[c] * xhat;
                        dbias[c] += grow[c];
                    }
                    mean_h /= nf;
                    mean_hx /= nf;
                    for c in 0..n {
                        let xhat = (row[c] - mean) * inv;
                        let h = grow[c] * vg.data()[c];
                        dx[r * n + c] = inv * (h - mean_h - xhat * mean_hx);
                    }
                }
                self.accumulate(*x, dx);
                self.accumulate(*gain, dgain);
                self.accumulate(*bias, dbias);
            }
            Op::Dropout { x, mask } => {
                let dx: Vec<F> = g.iter().zip(mask).map(|(&gi, &m)| gi * m).collect();
                self.accumulate(*x, dx);
            }
            Op::Conv2dValid { input, kernels, bias, stride } => {
                let vi = self.value(*input);
                let vk = self.value(*kernels);
                let (f, t) = (vi.shape()[1], vi.shape()[2]);
                let (d, k) = (vk.shape()[0], vk.shape()[2]);
                let s = *stride;
                let fo = (f - k) / s + 1;
                let to = (t - k) / s + 1;
                let mut din = vec![F::zero(); vi.numel()];
                let mut dker = vec![F::zero(); vk.numel()];
                let mut dbias = vec![F::zero(); d];
                for o in 0..d {
                    let ker = &vk.data()[o * k * k..(o + 1) * k * k];
                    for i in 0..fo {
                        for j in 0..to {
                            let go = g[(o * fo + i) * to + j];
                            if go == F::zero() {
                                continue;
                            }
                            dbias[o] += go;
                            for u in 0..k {
                                for v in 0..k {
                                    let pix = (i * s + u) * t + (j * s + v);
                                    din[pix] += go * ker[u * k + v];
                                    dker[o * k * k + u * k + v] += go * vi.data()[pix];
                                }
                            }
                        }
                    }
                }
                self.accumulate(*input, din);
                self.accumulate(*kernels, dker);
                self.accumulate(*bias, dbias);
            }
            Op::AddDecoupledPos { map, freq, time } => {
                let vm = self.value(*map);
                let (d, f, t) = (vm.shape()[0], vm.shape()[1], vm.shape()[2]);
                let fmax = self.value(*freq).shape()[1];
                let tmax = self.value(*time).shape()[2];
                self.accumulate(*map, g.to_vec());
                self.accumulate_zeros_then(*freq, |gf| {
                    for c in 0..d {
                        for fi in 0..f {
                            let mut s = F::zero();
                            for ti in 0..t {
                                s += g[(c * f + fi) * t + ti];
                            }
                            gf[c * fmax + fi] += s;
                        }
                    }
                });
                self.accumulate_zeros_then(*time, |gt| {
                    for c in 0..d {
                        for ti in 0..t {
                            let mut s = F::zero();
                            for fi in 0..f {
                                s += g[(c * f + fi) * t + ti];
                            }
                            gt[c * tmax + ti] += s;
                        }
                    }
                });
            }
            Op::PatchFlatten { map, kept_freq, kept_time } => {
                let vm = self.value(*map);
                let (d, f, t) = (vm.shape()[0], vm.shape()[1], vm.shape()[2]);
                let tp = kept_time.len();
                self.accumulate_zeros_then(*map, |gm| {
                    for (i, &fi) in kept_freq.iter().enumerate() {
                        for (j, &ti) in kept_time.iter().enumerate() {
                            let row = i * tp + j;
                            for c in 0..d {
                                gm[(c * f + fi) * t + ti] += g[row * d + c];
                            }
                        }
                    }
                });
            }
            Op::GatherRows { table, ids } => {
                let d = self.value(*table).cols();
                self.accumulate_zeros_then(*table, |gt| {
                    for (r, &i) in ids.iter().enumerate() {
                        for c in 0..d {
                            gt[i * d + c] += g[r * d + c];
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts.iter() {
                    let n = self.value(p).numel();
                    self.accumulate(p, g[off..off + n].to_vec());
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let m = self.value(parts[0]).rows();
                let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
                let mut off = 0;
                for &p in parts.iter() {
                    let w = self.value(p).cols();
                    let mut gp = vec![F::zero(); m * w];
                    for r in 0..m {
                        gp[r * w..(r + 1) * w].copy_from_slice(&g[r * total + off..r * total + off + w]);
                    }
                    self.accumulate(p, gp);
                    off += w;
                }
            }
            Op::ColSlice { x, start, len } => {
                let (m, n) = (self.value(*x).rows(), self.value(*x).cols());
                let (st, ln) = (*start, *len);
                self.accumulate_zeros_then(*x, |gx| {
                    for r in 0..m {
                        for c in 0..ln {
                            gx[r * n + st + c] += g[r * ln + c];
                        }
                    }
                });
            }
            Op::MeanRows(x) => {
                let (m, n) = (self.value(*x).rows(), self.value(*x).cols());
                let inv = F::from_f64(1.0 / m as f64);
                let mut dx = vec![F::zero(); m * n];
                for r in 0..m {
                    for c in 0..n {
                        dx[r * n + c] = g[c] * inv;
                    }
                }
                self.accumulate(*x, dx);
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                self.accumulate(*x, vec![g[0]; n]);
            }
            Op::CeSum { logits, targets, counted, smoothing } => {
                let vl = self.value(*logits);
                let (t, v) = (vl.rows(), vl.cols());
                let eps_v = *smoothing / F::from_f64(v as f64);
                let confid = F::one() - *smoothing;
                let mut dl = vec![F::zero(); t * v];
                for r in 0..t {
                    if !counted[r] {
                        continue;
                    }
                    let row = &vl.data()[r * v..(r + 1) * v];
                    let p = softmax_row(row);
                    // d/dz of -Σ q log softmax(z) = softmax(z) - q
                    for c in 0..v {
                        let q = if c == targets[r] { confid + eps_v } else { eps_v };
                        dl[r * v + c] = g[0] * (p[c] - q);
                    }
                }
                self.accumulate(*logits, dl);
            }
            Op::BceMean { logits, targets } => {
                let vl = self.value(*logits);
                let n = F::from_f64(targets.len() as f64);
                let dl: Vec<F> = vl
                    .data()
                    .iter()
                    .zip(targets)
                    .map(|(&z, &y)| g[0] * (sigmoid(z) - y) / n)
                    .collect();
                self.accumulate(*logits, dl);
            }
        }
        Ok(())
    }
}

// ── Raw kernels shared by forward and backward ──────────────────────────

fn matmul_raw<F: Real>(a: &Tensor<F>, b: &Tensor<F>, transpose_b: bool) -> Tensor<F> {
    let (m, k) = (a.rows(), a.cols());
    let n = if transpose_b { b.rows() } else { b.cols() };
    let mut out = vec![F::zero(); m * n];
    if transpose_b {
        for i in 0..m {
            let arow = &a.data()[i * k..(i + 1) * k];
            for j in 0..n {
                let brow = &b.data()[j * k..(j + 1) * k];
                let mut acc = F::zero();
                for p in 0..k {
                    acc += arow[p] * brow[p];
                }
                out[i * n + j] = acc;
            }
        }
    } else {
        // ikj order keeps the inner loop contiguous on both operands
        for i in 0..m {
            let arow = &a.data()[i * k..(i + 1) * k];
            let orow = &mut out[i * n..(i + 1) * n];
            for (p, &ap) in arow.iter().enumerate() {
                if ap == F::zero() {
                    continue;
                }
                let brow = &b.data()[p * n..(p + 1) * n];
                for j in 0..n {
                    orow[j] += ap * brow[j];
                }
            }
        }
    }
    Tensor::new(vec![m, n], out).expect("matmul shape")
}

fn softmax_raw<F: Real>(x: &Tensor<F>, axis: usize) -> Tensor<F> {
    let shape = x.shape();
    let alen = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut data = vec![F::zero(); x.numel()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * alen * inner + i;
            let mut mx = F::neg_infinity();
            for j in 0..alen {
                mx = mx.max(x.data()[base + j * inner]);
            }
            let mut denom = F::zero();
            for j in 0..alen {
                let e = (x.data()[base + j * inner] - mx).exp();
                data[base + j * inner] = e;
                denom += e;
            }
            for j in 0..alen {
                data[base + j * inner] /= denom;
            }
        }
    }
    Tensor::new(shape.to_vec(), data).expect("softmax shape")
}

fn softmax_backward<F: Real>(y: &Tensor<F>, g: &[F], axis: usize) -> Vec<F> {
    let shape = y.shape();
    let alen = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut dx = vec![F::zero(); y.numel()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * alen * inner + i;
            let mut dot = F::zero();
            for j in 0..alen {
                dot += g[base + j * inner] * y.data()[base + j * inner];
            }
            for j in 0..alen {
                let yj = y.data()[base + j * inner];
                dx[base + j * inner] = yj * (g[base + j * inner] - dot);
            }
        }
    }
    dx
}

fn log_softmax_row<F: Real>(row: &[F]) -> Vec<F> {
    let mx = row.iter().cloned().fold(F::neg_infinity(), F::max);
    let mut denom = F::zero();
    for &v in row {
        denom += (v - mx).exp();
    }
    let lse = mx + denom.ln();
    row.iter().map(|&v| v - lse).collect()
}

fn softmax_row<F: Real>(row: &[F]) -> Vec<F> {
    log_softmax_row(row).into_iter().map(|v| v.exp()).collect()
}

fn mean_var<F: Real>(row: &[F]) -> (F, F) {
    let n = F::from_f64(row.len() as f64);
    let mut mean = F::zero();
    for &v in row {
        mean += v;
    }
    mean /= n;
    let mut var = F::zero();
    for &v in row {
        let d = v - mean;
        var += d * d;
    }
    (mean, var / n)
}

fn sigmoid<F: Real>(z: F) -> F {
    if z >= F::zero() {
        (F::one() + (-z).exp()).recip()
    } else {
        let e = z.exp();
        e / (F::one() + e)
    }
}

/// Standard normal CDF via the exact error function.
fn gauss_cdf<F: Real>(x: F) -> F {
    let half = F::from_f64(0.5);
    let inv_sqrt2 = F::from_f64(std::f64::consts::FRAC_1_SQRT_2);
    half * (F::one() + (x * inv_sqrt2).erf())
}

/// Standard normal PDF.
fn gauss_pdf<F: Real>(x: F) -> F {
    let c = F::from_f64(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    c * (-(x * x) * F::from_f64(0.5)).exp()
}
