//! Scaled dot-product multi-head attention and the small parameter bundles
//! shared by the encoder and decoder.

use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng::Rng;
use crate::tape::{AttnMask, Tape, TensorId};
use crate::tensor::Tensor;

/// Weight + bias of one linear layer.
#[derive(Debug, Clone, Copy)]
pub struct LinearP {
    pub w: TensorId,
    pub b: TensorId,
}

impl LinearP {
    pub fn init<F: Real>(
        tape: &mut Tape<F>,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let w = tape.param(format!("{name}.weight"), Tensor::randn(vec![d_in, d_out], 0.02, rng))?;
        let b = tape.param(format!("{name}.bias"), Tensor::zeros(vec![d_out]))?;
        Ok(Self { w, b })
    }

    pub fn apply<F: Real>(&self, tape: &mut Tape<F>, x: TensorId) -> Result<TensorId> {
        let y = tape.matmul(x, self.w)?;
        tape.add_row_bias(y, self.b)
    }
}

/// Gain + bias of one layer norm.
#[derive(Debug, Clone, Copy)]
pub struct LayerNormP {
    pub gain: TensorId,
    pub bias: TensorId,
}

impl LayerNormP {
    pub fn init<F: Real>(tape: &mut Tape<F>, name: &str, dim: usize) -> Result<Self> {
        let gain = tape.param(format!("{name}.gain"), Tensor::full(vec![dim], F::one()))?;
        let bias = tape.param(format!("{name}.bias"), Tensor::zeros(vec![dim]))?;
        Ok(Self { gain, bias })
    }

    pub fn apply<F: Real>(&self, tape: &mut Tape<F>, x: TensorId) -> Result<TensorId> {
        tape.layer_norm(x, self.gain, self.bias, F::from_f64(1e-5))
    }
}

/// Q/K/V/output projections of one attention layer.
#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub q: LinearP,
    pub k: LinearP,
    pub v: LinearP,
    pub o: LinearP,
    pub heads: usize,
}

impl AttentionParams {
    /// `d_q` is the query-side width; keys/values may come from a memory of
    /// the same width (self-attention passes the same value for both).
    pub fn init<F: Real>(
        tape: &mut Tape<F>,
        name: &str,
        d_model: usize,
        heads: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if heads == 0 || !d_model.is_multiple_of(heads) {
            return Err(Error::InvalidConfig(format!(
                "width {d_model} not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            q: LinearP::init(tape, &format!("{name}.q"), d_model, d_model, rng)?,
            k: LinearP::init(tape, &format!("{name}.k"), d_model, d_model, rng)?,
            v: LinearP::init(tape, &format!("{name}.v"), d_model, d_model, rng)?,
            o: LinearP::init(tape, &format!("{name}.o"), d_model, d_model, rng)?,
            heads,
        })
    }
}

/// Standard multi-head attention with 1/√d_head scaling. Masked positions
/// get softmax weight exactly zero. Queries come from `q_in`, keys and
/// values from `kv_in`; both must share the layer width.
pub fn multi_head_attention<F: Real>(
    tape: &mut Tape<F>,
    q_in: TensorId,
    kv_in: TensorId,
    p: &AttentionParams,
    mask: AttnMask,
) -> Result<TensorId> {
    let d_model = tape.value(q_in).cols();
    if tape.value(kv_in).cols() != d_model {
        return Err(Error::shape(
            "multi_head_attention",
            format!("query width {d_model} vs memory width {}", tape.value(kv_in).cols()),
        ));
    }
    if !d_model.is_multiple_of(p.heads) {
        return Err(Error::Contract(format!("width {d_model} not divisible by {} heads", p.heads)));
    }
    let s_q = tape.value(q_in).rows();
    let s_k = tape.value(kv_in).rows();
    if mask == AttnMask::Causal && s_q != s_k {
        return Err(Error::Contract("causal mask requires a square score matrix".into()));
    }
    let d_head = d_model / p.heads;
    let scale = F::from_f64(1.0 / (d_head as f64).sqrt());

    let q = p.q.apply(tape, q_in)?;
    let k = p.k.apply(tape, kv_in)?;
    let v = p.v.apply(tape, kv_in)?;

    let mut heads = Vec::with_capacity(p.heads);
    for h in 0..p.heads {
        let qh = tape.col_slice(q, h * d_head, d_head)?;
        let kh = tape.col_slice(k, h * d_head, d_head)?;
        let vh = tape.col_slice(v, h * d_head, d_head)?;
        let raw = tape.matmul_nt(qh, kh)?;
        tape.count_attn_score_flops(2 * (s_q * s_k * d_head) as u64);
        let scores = tape.scale(raw, scale)?;
        let weights = match mask {
            AttnMask::Full => tape.softmax(scores, 1)?,
            AttnMask::Causal => tape.causal_softmax(scores)?,
        };
        heads.push(tape.matmul(weights, vh)?);
    }
    let ctx = tape.concat_cols(&heads)?;
    p.o.apply(tape, ctx)
}

/// Two linear layers with a GELU between them.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub lin1: LinearP,
    pub lin2: LinearP,
}

impl FeedForward {
    pub fn init<F: Real>(
        tape: &mut Tape<F>,
        name: &str,
        d_model: usize,
        d_hidden: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        Ok(Self {
            lin1: LinearP::init(tape, &format!("{name}.lin1"), d_model, d_hidden, rng)?,
            lin2: LinearP::init(tape, &format!("{name}.lin2"), d_hidden, d_model, rng)?,
        })
    }

    pub fn apply<F: Real>(&self, tape: &mut Tape<F>, x: TensorId) -> Result<TensorId> {
        let h = self.lin1.apply(tape, x)?;
        let h = tape.gelu(h)?;
        self.lin2.apply(tape, h)
    }
}
