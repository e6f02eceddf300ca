//! Training-time regularization: embedding-space Mixup and SpecAugment.

use crate::error::{Error, Result};
use crate::frontend::MelSpectrogram;
use crate::real::Real;
use crate::rng::Rng;
use crate::tensor::Tensor;
use rand_distr::Distribution;

/// Which caption(s) the loss sees under Mixup. The decoder always consumes
/// the mixed embeddings; targets stay unmixed either way.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MixupLoss {
    /// Target the caption of the λ-dominant sample.
    Dominant,
    /// λ-weighted sum of both captions' losses.
    BothWeighted,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixupConfig {
    pub alpha: f64,
    pub enabled: bool,
    pub loss: MixupLoss,
}

impl Default for MixupConfig {
    fn default() -> Self {
        Self { alpha: 0.3, enabled: true, loss: MixupLoss::Dominant }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpecAugmentConfig {
    pub n_freq_masks: usize,
    pub max_freq_width: usize,
    pub n_time_masks: usize,
    pub max_time_width: usize,
}

impl Default for SpecAugmentConfig {
    fn default() -> Self {
        Self { n_freq_masks: 2, max_freq_width: 8, n_time_masks: 2, max_time_width: 40 }
    }
}

/// One draw of λ ~ Beta(α, α).
pub fn sample_lambda(cfg: &MixupConfig, rng: &mut Rng) -> Result<f64> {
    if !cfg.enabled {
        return Err(Error::Contract("sample_lambda with mixup disabled".into()));
    }
    let beta = rand_distr::Beta::new(cfg.alpha, cfg.alpha)
        .map_err(|e| Error::InvalidConfig(format!("Beta({0},{0}): {e}", cfg.alpha)))?;
    Ok(beta.sample(rng))
}

/// Convex combinations of two spectrograms and the matching embedded caption
/// and guiding-text tensors. The caller aligns shapes beforehand (pad or
/// crop); the loss keeps consuming the unmixed caption tokens.
#[allow(clippy::too_many_arguments)]
pub fn mixup_pair<F: Real>(
    x_i: &MelSpectrogram<F>,
    x_j: &MelSpectrogram<F>,
    y_i: &Tensor<F>,
    y_j: &Tensor<F>,
    g_i: &Tensor<F>,
    g_j: &Tensor<F>,
    lambda: f64,
) -> Result<(MelSpectrogram<F>, Tensor<F>, Tensor<F>)> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidInput(format!("lambda {lambda} outside [0,1]")));
    }
    if x_i.values.shape() != x_j.values.shape() {
        return Err(Error::InvalidInput(format!(
            "mixup spectrogram shapes differ: {:?} vs {:?}",
            x_i.values.shape(),
            x_j.values.shape()
        )));
    }
    let lam = F::from_f64(lambda);
    let mel = MelSpectrogram {
        values: x_i.values.lerp(&x_j.values, lam)?,
        frame_hop: x_i.frame_hop,
    };
    let captions = y_i.lerp(y_j, lam).map_err(|_| {
        Error::InvalidInput(format!(
            "mixup caption shapes differ after alignment: {:?} vs {:?}",
            y_i.shape(),
            y_j.shape()
        ))
    })?;
    let guide = g_i.lerp(g_j, lam).map_err(|_| {
        Error::InvalidInput(format!(
            "mixup guiding-text shapes differ after alignment: {:?} vs {:?}",
            g_i.shape(),
            g_j.shape()
        ))
    })?;
    Ok((mel, captions, guide))
}

/// SpecAugment: mask random frequency bands and time spans with the
/// spectrogram's own mean. Masks may overlap; unmasked cells are untouched.
pub fn spec_augment<F: Real>(
    mel: &MelSpectrogram<F>,
    cfg: &SpecAugmentConfig,
    rng: &mut Rng,
) -> Result<MelSpectrogram<F>> {
    let (bins, frames) = (mel.mel_bins(), mel.frames());
    if cfg.max_freq_width >= bins && cfg.n_freq_masks > 0 {
        return Err(Error::InvalidConfig(format!(
            "freq mask width {} must stay below {bins} mel bins",
            cfg.max_freq_width
        )));
    }
    if cfg.max_time_width >= frames && cfg.n_time_masks > 0 {
        return Err(Error::InvalidConfig(format!(
            "time mask width {} must stay below {frames} frames",
            cfg.max_time_width
        )));
    }
    use rand::Rng as _;
    let mean = {
        let mut acc = F::zero();
        for &v in mel.values.data() {
            acc += v;
        }
        acc / F::from_f64(mel.values.numel() as f64)
    };
    let mut out = mel.values.clone();
    for _ in 0..cfg.n_freq_masks {
        let width = rng.random_range(1..=cfg.max_freq_width.max(1));
        let start = rng.random_range(0..=bins - width);
        for b in start..start + width {
            for t in 0..frames {
                out.data_mut()[b * frames + t] = mean;
            }
        }
    }
    for _ in 0..cfg.n_time_masks {
        let width = rng.random_range(1..=cfg.max_time_width.max(1));
        let start = rng.random_range(0..=frames - width);
        for b in 0..bins {
            for t in start..start + width {
                out.data_mut()[b * frames + t] = mean;
            }
        }
    }
    Ok(MelSpectrogram { values: out, frame_hop: mel.frame_hop })
}
