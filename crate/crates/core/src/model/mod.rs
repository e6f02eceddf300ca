//! Transformer encoder-decoder with guiding-text conditioning.
//!
//! Encoder: CLS token ∥ patch tokens ∥ embedded guiding text through
//! pre-norm blocks (self-attention + GELU feed-forward), dropout-free.
//! Patchout upstream is the encoder's regularizer. The final hidden sequence
//! passes through a linear+GELU adapter into the decoder's cross-attention.
//! Decoder: word embeddings + sinusoidal positions, causal self-attention,
//! cross-attention, feed-forward, dropout only here, linear softmax head.

pub mod attention;

use crate::error::{Error, Result};
use crate::frontend::MelSpectrogram;
use crate::patchout::{self, PatchEmbed, PatchoutConfig, PositionalEmbeddings};
use crate::real::Real;
use crate::rng::Rng;
use crate::tape::{AttnMask, Tape, TensorId};
use crate::tensor::Tensor;
use crate::textguide::GuidingText;
use attention::{multi_head_attention, AttentionParams, FeedForward, LayerNormP, LinearP};
use serde::{Deserialize, Serialize};

/// Architecture hyperparameters. The default is the desk-scale model;
/// full-scale values (12/12/768 encoder, 6/8/512/2048 decoder) remain
/// expressible for shape tests.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    pub enc_blocks: usize,
    pub enc_heads: usize,
    /// Encoder width d (equals the patch embedding dimension).
    pub d: usize,
    pub enc_ffn_dim: usize,
    pub dec_blocks: usize,
    pub dec_heads: usize,
    pub dec_dim: usize,
    pub dec_ffn_dim: usize,
    pub decoder_dropout: f64,
    pub label_smoothing: f64,
    pub vocab_size: usize,
    pub max_caption_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            enc_blocks: 2,
            enc_heads: 4,
            d: 64,
            enc_ffn_dim: 256,
            dec_blocks: 2,
            dec_heads: 4,
            dec_dim: 64,
            dec_ffn_dim: 256,
            decoder_dropout: 0.2,
            label_smoothing: 0.1,
            vocab_size: 0,
            max_caption_len: 22,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.enc_heads == 0 || !self.d.is_multiple_of(self.enc_heads) {
            return Err(Error::InvalidConfig(format!(
                "encoder width {} not divisible by {} heads",
                self.d, self.enc_heads
            )));
        }
        if self.dec_heads == 0 || !self.dec_dim.is_multiple_of(self.dec_heads) {
            return Err(Error::InvalidConfig(format!(
                "decoder width {} not divisible by {} heads",
                self.dec_dim, self.dec_heads
            )));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::InvalidConfig("label smoothing must be in [0,1)".into()));
        }
        if !(0.0..1.0).contains(&self.decoder_dropout) {
            return Err(Error::InvalidConfig("decoder dropout must be in [0,1)".into()));
        }
        if self.vocab_size < 5 {
            return Err(Error::InvalidConfig("vocab must cover the reserved ids".into()));
        }
        if self.max_caption_len < 2 {
            return Err(Error::InvalidConfig("max caption length too small".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct EncoderBlock {
    pub ln1: LayerNormP,
    pub attn: AttentionParams,
    pub ln2: LayerNormP,
    pub ffn: FeedForward,
}

#[derive(Debug, Clone)]
pub struct DecoderBlock {
    pub ln1: LayerNormP,
    pub self_attn: AttentionParams,
    pub ln2: LayerNormP,
    pub cross_attn: AttentionParams,
    pub ln3: LayerNormP,
    pub ffn: FeedForward,
}

/// The full captioner: patch frontend, encoder, adapter, decoder, head.
/// Holds tape ids only; the numeric type lives on the tape.
pub struct CaptionerModel {
    pub cfg: ModelConfig,
    pub patch_cfg: PatchoutConfig,
    pub patch: PatchEmbed,
    pub pos: PositionalEmbeddings,
    pub cls: TensorId,
    /// Guiding-text word embeddings in the encoder space, `[V × d]`.
    pub guide_embed: TensorId,
    pub enc_blocks: Vec<EncoderBlock>,
    pub enc_norm: LayerNormP,
    pub adapter: LinearP,
    /// Decoder word embeddings, `[V × dec_dim]`.
    pub dec_embed: TensorId,
    pub dec_blocks: Vec<DecoderBlock>,
    pub dec_norm: LayerNormP,
    pub out_proj: LinearP,
}

/// CLS ∥ patches ∥ guiding text, assembled for the encoder.
#[derive(Debug, Clone, Copy)]
pub struct EncoderInput {
    pub sequence: TensorId,
    /// Patch-token count L.
    pub patch_len: usize,
    /// Guiding-text length W (zero when unconditioned).
    pub text_len: usize,
}

/// Patchout policy for one encode call.
#[derive(Debug, Clone, Copy)]
pub enum PatchoutMode {
    /// Structured Patchout with the given drop amounts.
    Train { p_f: usize, p_t: usize },
    /// Full-grid flatten.
    Eval,
}

/// Encoder output, adapted for the decoder.
#[derive(Debug, Clone, Copy)]
pub struct EncodeOutput {
    /// Hidden sequence `[(1+L+W) × d]`.
    pub hidden: TensorId,
    /// Adapter output `[(1+L+W) × dec_dim]`, the decoder's memory.
    pub memory: TensorId,
    pub patch_len: usize,
    pub text_len: usize,
}

impl CaptionerModel {
    /// Register all parameters on the tape. `f_max`/`t_max` size the
    /// positional tables for the largest supported input.
    pub fn init<F: Real>(
        tape: &mut Tape<F>,
        cfg: ModelConfig,
        patch_cfg: PatchoutConfig,
        f_max: usize,
        t_max: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        if patch_cfg.dim != cfg.d {
            return Err(Error::InvalidConfig(format!(
                "patch dim {} must equal encoder width {}",
                patch_cfg.dim, cfg.d
            )));
        }
        let patch = PatchEmbed::init(tape, "model", &patch_cfg, rng)?;
        let pos = PositionalEmbeddings::init(tape, "model", cfg.d, f_max, t_max, rng)?;
        let cls = tape.param("model.cls", Tensor::randn(vec![1, cfg.d], 0.02, rng))?;
        let guide_embed = tape.param(
            "model.guide_embed",
            Tensor::randn(vec![cfg.vocab_size, cfg.d], 0.02, rng),
        )?;
        let mut enc_blocks = Vec::with_capacity(cfg.enc_blocks);
        for i in 0..cfg.enc_blocks {
            let base = format!("model.enc.{i}");
            enc_blocks.push(EncoderBlock {
                ln1: LayerNormP::init(tape, &format!("{base}.ln1"), cfg.d)?,
                attn: AttentionParams::init(tape, &format!("{base}.attn"), cfg.d, cfg.enc_heads, rng)?,
                ln2: LayerNormP::init(tape, &format!("{base}.ln2"), cfg.d)?,
                ffn: FeedForward::init(tape, &format!("{base}.ffn"), cfg.d, cfg.enc_ffn_dim, rng)?,
            });
        }
        let enc_norm = LayerNormP::init(tape, "model.enc.norm", cfg.d)?;
        let adapter = LinearP::init(tape, "model.adapter", cfg.d, cfg.dec_dim, rng)?;
        let dec_embed = tape.param(
            "model.dec_embed",
            Tensor::randn(vec![cfg.vocab_size, cfg.dec_dim], 0.02, rng),
        )?;
        let mut dec_blocks = Vec::with_capacity(cfg.dec_blocks);
        for i in 0..cfg.dec_blocks {
            let base = format!("model.dec.{i}");
            dec_blocks.push(DecoderBlock {
                ln1: LayerNormP::init(tape, &format!("{base}.ln1"), cfg.dec_dim)?,
                self_attn: AttentionParams::init(
                    tape,
                    &format!("{base}.self_attn"),
                    cfg.dec_dim,
                    cfg.dec_heads,
                    rng,
                )?,
                ln2: LayerNormP::init(tape, &format!("{base}.ln2"), cfg.dec_dim)?,
                cross_attn: AttentionParams::init(
                    tape,
                    &format!("{base}.cross_attn"),
                    cfg.dec_dim,
                    cfg.dec_heads,
                    rng,
                )?,
                ln3: LayerNormP::init(tape, &format!("{base}.ln3"), cfg.dec_dim)?,
                ffn: FeedForward::init(tape, &format!("{base}.ffn"), cfg.dec_dim, cfg.dec_ffn_dim, rng)?,
            });
        }
        let dec_norm = LayerNormP::init(tape, "model.dec.norm", cfg.dec_dim)?;
        let out_proj = LinearP::init(tape, "model.out", cfg.dec_dim, cfg.vocab_size, rng)?;
        Ok(Self {
            cfg,
            patch_cfg,
            patch,
            pos,
            cls,
            guide_embed,
            enc_blocks,
            enc_norm,
            adapter,
            dec_embed,
            dec_blocks,
            dec_norm,
            out_proj,
        })
    }

    /// Ids of everything belonging to the (freezable) encoder side: the
    /// patch conv, positional tables, CLS token, encoder blocks and norm.
    /// Guiding-text embeddings stay trainable during the frozen stage.
    pub fn encoder_param_ids(&self) -> Vec<TensorId> {
        let mut ids = vec![
            self.patch.kernels,
            self.patch.bias,
            self.pos.freq,
            self.pos.time,
            self.cls,
        ];
        for b in &self.enc_blocks {
            ids.extend([b.ln1.gain, b.ln1.bias, b.ln2.gain, b.ln2.bias]);
            for lp in [b.attn.q, b.attn.k, b.attn.v, b.attn.o, b.ffn.lin1, b.ffn.lin2] {
                ids.extend([lp.w, lp.b]);
            }
        }
        ids.extend([self.enc_norm.gain, self.enc_norm.bias]);
        ids
    }

    /// Patch tokens for one (standardized) clip: conv, positional add,
    /// Patchout or full flatten.
    pub fn patch_tokens<F: Real>(
        &self,
        tape: &mut Tape<F>,
        mel: &MelSpectrogram<F>,
        mode: PatchoutMode,
        rng: &mut Rng,
    ) -> Result<patchout::PatchSequence> {
        let map = patchout::extract_feature_map(tape, mel, &self.patch, &self.patch_cfg)?;
        let map = patchout::add_positional(tape, map, &self.pos)?;
        match mode {
            PatchoutMode::Train { p_f, p_t } => patchout::apply_patchout(tape, map, p_f, p_t, rng),
            PatchoutMode::Eval => patchout::flatten_eval(tape, map),
        }
    }

    /// Assemble CLS ∥ patches ∥ guiding text. `text` is the already-embedded
    /// guiding sequence `[W × d]` (or None when unconditioned).
    pub fn build_encoder_input<F: Real>(
        &self,
        tape: &mut Tape<F>,
        patches: TensorId,
        text: Option<TensorId>,
    ) -> Result<EncoderInput> {
        let patch_len = tape.value(patches).rows();
        let mut parts = vec![self.cls, patches];
        let text_len = match text {
            Some(t) => {
                parts.push(t);
                tape.value(t).rows()
            }
            None => 0,
        };
        let sequence = tape.concat_rows(&parts)?;
        Ok(EncoderInput { sequence, patch_len, text_len })
    }

    /// Pre-norm encoder stack; no dropout anywhere. Returns the full hidden
    /// sequence (same shape as the input).
    pub fn encoder_forward<F: Real>(&self, tape: &mut Tape<F>, input: &EncoderInput) -> Result<TensorId> {
        let mut x = input.sequence;
        for block in &self.enc_blocks {
            let normed = block.ln1.apply(tape, x)?;
            let attn = multi_head_attention(tape, normed, normed, &block.attn, AttnMask::Full)?;
            x = tape.add(x, attn)?;
            let normed = block.ln2.apply(tape, x)?;
            let ffn = block.ffn.apply(tape, normed)?;
            x = tape.add(x, ffn)?;
        }
        self.enc_norm.apply(tape, x)
    }

    /// Linear d→dec_dim followed by GELU; feeds cross-attention keys/values.
    pub fn encoder_adapter<F: Real>(&self, tape: &mut Tape<F>, hidden: TensorId) -> Result<TensorId> {
        let y = self.adapter.apply(tape, hidden)?;
        tape.gelu(y)
    }

    /// Full encoder pass: patch tokens + guiding text → adapted memory.
    pub fn encode<F: Real>(
        &self,
        tape: &mut Tape<F>,
        mel: &MelSpectrogram<F>,
        guide: Option<&GuidingText>,
        mode: PatchoutMode,
        rng: &mut Rng,
    ) -> Result<EncodeOutput> {
        let patches = self.patch_tokens(tape, mel, mode, rng)?;
        let text = match guide {
            Some(g) => Some(crate::textguide::embed_guiding_text(tape, self.guide_embed, g)?),
            None => None,
        };
        self.encode_from_parts(tape, patches.tokens, text)
    }

    /// Encoder pass over pre-built patch tokens and optional pre-built
    /// (possibly mixed) guiding-text embeddings.
    pub fn encode_from_parts<F: Real>(
        &self,
        tape: &mut Tape<F>,
        patches: TensorId,
        text: Option<TensorId>,
    ) -> Result<EncodeOutput> {
        let input = self.build_encoder_input(tape, patches, text)?;
        let hidden = self.encoder_forward(tape, &input)?;
        let memory = self.encoder_adapter(tape, hidden)?;
        Ok(EncodeOutput { hidden, memory, patch_len: input.patch_len, text_len: input.text_len })
    }

    /// Decoder word embeddings for a caption prefix: `[T × dec_dim]`.
    pub fn embed_caption<F: Real>(&self, tape: &mut Tape<F>, ids: &[usize]) -> Result<TensorId> {
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.cfg.vocab_size) {
            return Err(Error::InvalidInput(format!(
                "caption id {bad} out of vocab {}",
                self.cfg.vocab_size
            )));
        }
        tape.gather_rows(self.dec_embed, ids)
    }

    /// Causal decoder over an embedded input sequence. Returns vocabulary
    /// logits `[T × V]`. Dropout fires only when `training` is set.
    pub fn decoder_forward<F: Real>(
        &self,
        tape: &mut Tape<F>,
        embedded: TensorId,
        memory: TensorId,
        training: bool,
        rng: &mut Rng,
    ) -> Result<TensorId> {
        let t_len = tape.value(embedded).rows();
        if tape.value(embedded).cols() != self.cfg.dec_dim {
            return Err(Error::shape(
                "decoder_forward",
                format!("embedded width {} != dec_dim {}", tape.value(embedded).cols(), self.cfg.dec_dim),
            ));
        }
        let pos = tape.constant(sinusoid::<F>(t_len, self.cfg.dec_dim));
        let mut x = tape.add(embedded, pos)?;
        x = self.dropout_if(tape, x, training, rng)?;
        for block in &self.dec_blocks {
            let normed = block.ln1.apply(tape, x)?;
            let attn = multi_head_attention(tape, normed, normed, &block.self_attn, AttnMask::Causal)?;
            let attn = self.dropout_if(tape, attn, training, rng)?;
            x = tape.add(x, attn)?;

            let normed = block.ln2.apply(tape, x)?;
            let cross = multi_head_attention(tape, normed, memory, &block.cross_attn, AttnMask::Full)?;
            let cross = self.dropout_if(tape, cross, training, rng)?;
            x = tape.add(x, cross)?;

            let normed = block.ln3.apply(tape, x)?;
            let ffn = block.ffn.apply(tape, normed)?;
            let ffn = self.dropout_if(tape, ffn, training, rng)?;
            x = tape.add(x, ffn)?;
        }
        let x = self.dec_norm.apply(tape, x)?;
        self.out_proj.apply(tape, x)
    }

    /// Token-id convenience route: embed then decode.
    pub fn decode_tokens<F: Real>(
        &self,
        tape: &mut Tape<F>,
        ids: &[usize],
        memory: TensorId,
        training: bool,
        rng: &mut Rng,
    ) -> Result<TensorId> {
        let emb = self.embed_caption(tape, ids)?;
        self.decoder_forward(tape, emb, memory, training, rng)
    }

    fn dropout_if<F: Real>(
        &self,
        tape: &mut Tape<F>,
        x: TensorId,
        training: bool,
        rng: &mut Rng,
    ) -> Result<TensorId> {
        if training && self.cfg.decoder_dropout > 0.0 {
            tape.dropout(x, self.cfg.decoder_dropout, rng)
        } else {
            Ok(x)
        }
    }

    /// Overwrite decoder word-embedding rows from an external embedding file
    /// (words resolved through the vocabulary; unknown words are skipped).
    pub fn load_word_embeddings<F: Real>(
        &self,
        tape: &mut Tape<F>,
        entries: &[crate::textguide::SentenceEmbedding],
        vocab: &crate::pipeline::Vocabulary,
    ) -> Result<usize> {
        let dim = self.cfg.dec_dim;
        let mut loaded = 0;
        for e in entries {
            if e.vector.len() != dim {
                return Err(Error::InvalidInput(format!(
                    "embedding for {:?} has dimension {}, decoder expects {dim}",
                    e.source_text,
                    e.vector.len()
                )));
            }
            let id = vocab.id_of(&e.source_text);
            if id == crate::pipeline::UNK_ID && e.source_text != crate::pipeline::UNK_TOKEN {
                continue;
            }
            let table = tape.value_mut(self.dec_embed);
            for (c, &v) in e.vector.iter().enumerate() {
                table.data_mut()[id * dim + c] = F::from_f64(v);
            }
            loaded += 1;
        }
        Ok(loaded)
    }
}

/// Fixed sinusoidal positional table `[t_len × dim]`.
pub fn sinusoid<F: Real>(t_len: usize, dim: usize) -> Tensor<F> {
    let mut data = vec![F::zero(); t_len * dim];
    for t in 0..t_len {
        for i in 0..dim / 2 {
            let rate = 1.0 / 10_000f64.powf(2.0 * i as f64 / dim as f64);
            let ang = t as f64 * rate;
            data[t * dim + 2 * i] = F::from_f64(ang.sin());
            data[t * dim + 2 * i + 1] = F::from_f64(ang.cos());
        }
    }
    Tensor::new(vec![t_len, dim], data).expect("sinusoid shape")
}

// ── Caption batches and the training loss ───────────────────────────────

/// Batch of caption rows padded to a common length. Every row starts with
/// `<SOS>` and carries exactly one `<EOS>` before the padding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaptionBatch {
    rows: Vec<Vec<usize>>,
    width: usize,
}

impl CaptionBatch {
    pub fn new(rows: Vec<Vec<usize>>) -> Result<Self> {
        use crate::pipeline::{EOS_ID, PAD_ID, SOS_ID};
        if rows.is_empty() {
            return Err(Error::InvalidInput("empty caption batch".into()));
        }
        let width = rows.iter().map(Vec::len).max().unwrap();
        let mut padded = Vec::with_capacity(rows.len());
        for (i, mut row) in rows.into_iter().enumerate() {
            if row.first() != Some(&SOS_ID) {
                return Err(Error::Contract(format!("caption row {i} does not start with <SOS>")));
            }
            let eos_count = row.iter().filter(|&&t| t == EOS_ID).count();
            if eos_count != 1 {
                return Err(Error::Contract(format!("caption row {i} has {eos_count} <EOS> tokens")));
            }
            let eos_at = row.iter().position(|&t| t == EOS_ID).unwrap();
            if row[eos_at + 1..].iter().any(|&t| t != PAD_ID) {
                return Err(Error::Contract(format!("caption row {i} has tokens after <EOS>")));
            }
            row.resize(width, PAD_ID);
            padded.push(row);
        }
        Ok(Self { rows: padded, width })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.rows[i]
    }

    /// Decoder input for row i: everything but the last position.
    pub fn decoder_input(&self, i: usize) -> &[usize] {
        &self.rows[i][..self.width - 1]
    }

    /// Teacher-forcing targets for row i (shifted left by one) and the mask
    /// of counted (non-pad) positions.
    pub fn targets(&self, i: usize) -> (Vec<usize>, Vec<bool>) {
        let t: Vec<usize> = self.rows[i][1..].to_vec();
        let counted = t.iter().map(|&id| id != crate::pipeline::PAD_ID).collect();
        (t, counted)
    }
}

/// [`ce_loss`] over a validated [`CaptionBatch`]: row i's logits are paired
/// with the batch's shifted targets and pad mask.
pub fn ce_loss_batch<F: Real>(
    tape: &mut Tape<F>,
    logits_per_row: &[TensorId],
    batch: &CaptionBatch,
    smoothing: f64,
) -> Result<TensorId> {
    if logits_per_row.len() != batch.len() {
        return Err(Error::shape(
            "ce_loss_batch",
            format!("{} logit rows for {} captions", logits_per_row.len(), batch.len()),
        ));
    }
    let items: Vec<(TensorId, Vec<usize>, Vec<bool>)> = logits_per_row
        .iter()
        .enumerate()
        .map(|(i, &logits)| {
            let (targets, counted) = batch.targets(i);
            (logits, targets, counted)
        })
        .collect();
    ce_loss(tape, &items, smoothing)
}

/// Label-smoothed cross entropy averaged over all counted (non-pad) target
/// positions of the batch. With ε = 0 this is exactly the mean negative
/// log-likelihood of the gold tokens.
pub fn ce_loss<F: Real>(
    tape: &mut Tape<F>,
    items: &[(TensorId, Vec<usize>, Vec<bool>)],
    smoothing: f64,
) -> Result<TensorId> {
    if items.is_empty() {
        return Err(Error::InvalidInput("ce_loss over an empty batch".into()));
    }
    let mut total_count = 0usize;
    let mut sums = Vec::with_capacity(items.len());
    for (logits, targets, counted) in items {
        total_count += counted.iter().filter(|&&c| c).count();
        sums.push(tape.ce_sum(*logits, targets, counted, F::from_f64(smoothing))?);
    }
    if total_count == 0 {
        return Err(Error::InvalidInput("ce_loss: batch is all padding".into()));
    }
    let mut acc = sums[0];
    for &s in &sums[1..] {
        acc = tape.add(acc, s)?;
    }
    tape.scale(acc, F::from_f64(1.0 / total_count as f64))
}

#[cfg(test)]
pub(crate) mod tests;
