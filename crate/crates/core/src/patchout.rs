//! Patch extraction: conv feature map, decoupled positional embeddings,
//! structured Patchout, and flattening to the encoder token sequence.

use crate::error::{Error, Result};
use crate::frontend::MelSpectrogram;
use crate::real::Real;
use crate::rng::Rng;
use crate::tape::{Tape, TensorId};
use crate::tensor::Tensor;

/// Patch-embedding geometry and Patchout amounts.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PatchoutConfig {
    pub kernel: usize,
    pub stride: usize,
    /// Embedding dimension d (also the encoder width).
    pub dim: usize,
    /// Frequency rows deleted during training.
    pub p_f: usize,
    /// Time columns deleted during training.
    pub p_t: usize,
}

impl Default for PatchoutConfig {
    fn default() -> Self {
        Self { kernel: 16, stride: 10, dim: 64, p_f: 4, p_t: 80 }
    }
}

impl PatchoutConfig {
    /// Output extent of the valid conv along one axis.
    pub fn grid_extent(&self, input: usize) -> Option<usize> {
        if input < self.kernel {
            None
        } else {
            Some((input - self.kernel) / self.stride + 1)
        }
    }
}

/// Conv feature map `[d × F_m × T_m]`, resident on the tape.
#[derive(Debug, Clone, Copy)]
pub struct FeatureMap {
    pub id: TensorId,
    pub f_m: usize,
    pub t_m: usize,
}

/// Learnable decoupled positional tables, sized for the largest input.
#[derive(Debug, Clone, Copy)]
pub struct PositionalEmbeddings {
    /// `[d × F_max × 1]`
    pub freq: TensorId,
    /// `[d × 1 × T_max]`
    pub time: TensorId,
    pub f_max: usize,
    pub t_max: usize,
}

impl PositionalEmbeddings {
    pub fn init<F: Real>(
        tape: &mut Tape<F>,
        prefix: &str,
        dim: usize,
        f_max: usize,
        t_max: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let freq = tape.param(format!("{prefix}.pos.freq"), Tensor::randn(vec![dim, f_max, 1], 0.02, rng))?;
        let time = tape.param(format!("{prefix}.pos.time"), Tensor::randn(vec![dim, 1, t_max], 0.02, rng))?;
        Ok(Self { freq, time, f_max, t_max })
    }
}

/// Flattened patch tokens `[L × d]` with the kept-index bookkeeping.
#[derive(Debug, Clone)]
pub struct PatchSequence {
    pub tokens: TensorId,
    pub kept_freq: Vec<usize>,
    pub kept_time: Vec<usize>,
}

impl PatchSequence {
    pub fn len(&self) -> usize {
        self.kept_freq.len() * self.kept_time.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Conv patch-embedding parameters.
#[derive(Debug, Clone, Copy)]
pub struct PatchEmbed {
    pub kernels: TensorId,
    pub bias: TensorId,
}

impl PatchEmbed {
    pub fn init<F: Real>(
        tape: &mut Tape<F>,
        prefix: &str,
        cfg: &PatchoutConfig,
        rng: &mut Rng,
    ) -> Result<Self> {
        // Fan-in scaled init for the conv, zero bias.
        let k = cfg.kernel;
        let std = (2.0 / (k * k) as f64).sqrt();
        let kernels =
            tape.param(format!("{prefix}.patch.weight"), Tensor::randn(vec![cfg.dim, 1, k, k], std, rng))?;
        let bias = tape.param(format!("{prefix}.patch.bias"), Tensor::zeros(vec![cfg.dim]))?;
        Ok(Self { kernels, bias })
    }
}

/// Step (1): run the patch conv over a mel spectrogram already standardized
/// by the caller.
pub fn extract_feature_map<F: Real>(
    tape: &mut Tape<F>,
    mel: &MelSpectrogram<F>,
    weights: &PatchEmbed,
    cfg: &PatchoutConfig,
) -> Result<FeatureMap> {
    let (bins, frames) = (mel.mel_bins(), mel.frames());
    let f_m = cfg.grid_extent(bins).ok_or_else(|| {
        Error::InvalidInput(format!("{bins} mel bins smaller than kernel {}", cfg.kernel))
    })?;
    let t_m = cfg.grid_extent(frames).ok_or_else(|| {
        Error::InvalidInput(format!("{frames} frames smaller than kernel {}", cfg.kernel))
    })?;
    let input = tape.constant(Tensor::new(
        vec![1, bins, frames],
        mel.values.data().to_vec(),
    )?);
    let id = tape.conv2d_valid(input, weights.kernels, weights.bias, cfg.stride)?;
    Ok(FeatureMap { id, f_m, t_m })
}

/// Step (2): broadcast-add the frequency and time embeddings. Tables are
/// sliced to the map's extent, never interpolated.
pub fn add_positional<F: Real>(
    tape: &mut Tape<F>,
    map: FeatureMap,
    pos: &PositionalEmbeddings,
) -> Result<FeatureMap> {
    if map.f_m > pos.f_max || map.t_m > pos.t_max {
        return Err(Error::InvalidConfig(format!(
            "grid {}x{} exceeds positional tables {}x{}",
            map.f_m, map.t_m, pos.f_max, pos.t_max
        )));
    }
    let id = tape.add_decoupled_pos(map.id, pos.freq, pos.time)?;
    Ok(FeatureMap { id, ..map })
}

/// Choose the survivor indices for structured Patchout: drop `p_f` frequency
/// rows and `p_t` time columns uniformly without replacement.
pub fn sample_kept_indices(
    f_m: usize,
    t_m: usize,
    p_f: usize,
    p_t: usize,
    rng: &mut Rng,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if p_f >= f_m || p_t >= t_m {
        return Err(Error::InvalidConfig(format!(
            "patchout ({p_f},{p_t}) must leave at least one row/column of {f_m}x{t_m}"
        )));
    }
    Ok((sample_kept(f_m, p_f, rng), sample_kept(t_m, p_t, rng)))
}

fn sample_kept(extent: usize, drop: usize, rng: &mut Rng) -> Vec<usize> {
    let dropped = rand::seq::index::sample(rng, extent, drop);
    let mut is_dropped = vec![false; extent];
    for i in dropped {
        is_dropped[i] = true;
    }
    (0..extent).filter(|&i| !is_dropped[i]).collect()
}

/// Steps (3)+(4): training-mode structured Patchout followed by the
/// frequency-major flatten.
pub fn apply_patchout<F: Real>(
    tape: &mut Tape<F>,
    map: FeatureMap,
    p_f: usize,
    p_t: usize,
    rng: &mut Rng,
) -> Result<PatchSequence> {
    let (kept_freq, kept_time) = sample_kept_indices(map.f_m, map.t_m, p_f, p_t, rng)?;
    let tokens = tape.patch_flatten(map.id, &kept_freq, &kept_time)?;
    Ok(PatchSequence { tokens, kept_freq, kept_time })
}

/// Step (4) without Patchout: full-grid flatten used at inference.
pub fn flatten_eval<F: Real>(tape: &mut Tape<F>, map: FeatureMap) -> Result<PatchSequence> {
    let kept_freq: Vec<usize> = (0..map.f_m).collect();
    let kept_time: Vec<usize> = (0..map.t_m).collect();
    let tokens = tape.patch_flatten(map.id, &kept_freq, &kept_time)?;
    Ok(PatchSequence { tokens, kept_freq, kept_time })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    fn mel_of(bins: usize, frames: usize, fill: impl Fn(usize, usize) -> f64) -> MelSpectrogram<f64> {
        let mut data = vec![0.0; bins * frames];
        for b in 0..bins {
            for t in 0..frames {
                data[b * frames + t] = fill(b, t);
            }
        }
        MelSpectrogram { values: Tensor::new(vec![bins, frames], data).unwrap(), frame_hop: 512 }
    }

    fn setup(dim: usize, cfg: &PatchoutConfig) -> (Tape<f64>, PatchEmbed) {
        let mut tape = Tape::new();
        let mut rng = rng_from_seed(5);
        let mut c = cfg.clone();
        c.dim = dim;
        let embed = PatchEmbed::init(&mut tape, "m", &c, &mut rng).unwrap();
        (tape, embed)
    }

    #[test]
    fn full_scale_grid_extents() {
        let cfg = PatchoutConfig::default();
        assert_eq!(cfg.grid_extent(128), Some(12));
        assert_eq!(cfg.grid_extent(1875), Some(186));
        assert_eq!(cfg.grid_extent(166), Some(16));
        assert_eq!(cfg.grid_extent(15), None);
    }

    #[test]
    fn zero_input_zero_bias_gives_zero_map() {
        let cfg = PatchoutConfig { kernel: 4, stride: 2, dim: 3, p_f: 0, p_t: 0 };
        let (mut tape, embed) = setup(3, &cfg);
        let mel = mel_of(8, 10, |_, _| 0.0);
        let map = extract_feature_map(&mut tape, &mel, &embed, &cfg).unwrap();
        assert_eq!(map.f_m, 3);
        assert_eq!(map.t_m, 4);
        assert!(tape.value(map.id).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_positional_tables_leave_map_unchanged() {
        let cfg = PatchoutConfig { kernel: 4, stride: 2, dim: 2, p_f: 0, p_t: 0 };
        let (mut tape, embed) = setup(2, &cfg);
        let mel = mel_of(8, 12, |b, t| (b * 13 + t) as f64 * 0.01);
        let map = extract_feature_map(&mut tape, &mel, &embed, &cfg).unwrap();
        let freq = tape.leaf(Tensor::zeros(vec![2, 3, 1]), false);
        let time = tape.leaf(Tensor::zeros(vec![2, 1, 5]), false);
        let pos = PositionalEmbeddings { freq, time, f_max: 3, t_max: 5 };
        let before = tape.value(map.id).clone();
        let out = add_positional(&mut tape, map, &pos).unwrap();
        assert_eq!(tape.value(out.id), &before);
    }

    #[test]
    fn onehot_positional_tables_mark_one_cell() {
        // freq one-hot at f=2, time one-hot at t=5: cell (2,5) sums to 2.
        let mut tape = Tape::<f64>::new();
        let map_id = tape.leaf(Tensor::zeros(vec![1, 4, 7]), false);
        let map = FeatureMap { id: map_id, f_m: 4, t_m: 7 };
        let mut fdat = vec![0.0; 4];
        fdat[2] = 1.0;
        let mut tdat = vec![0.0; 7];
        tdat[5] = 1.0;
        let freq = tape.leaf(Tensor::new(vec![1, 4, 1], fdat).unwrap(), false);
        let time = tape.leaf(Tensor::new(vec![1, 1, 7], tdat).unwrap(), false);
        let pos = PositionalEmbeddings { freq, time, f_max: 4, t_max: 7 };
        let out = add_positional(&mut tape, map, &pos).unwrap();
        let v = tape.value(out.id);
        for f in 0..4 {
            for t in 0..7 {
                let expect = (f == 2) as u64 as f64 + (t == 5) as u64 as f64;
                assert_eq!(v.at3(0, f, t), expect, "cell ({f},{t})");
            }
        }
    }

    #[test]
    fn decoupled_embeddings_do_not_mix_axes() {
        // Moving a feature to a different time slice changes only the time
        // contribution; the frequency contribution is identical.
        let mut tape = Tape::<f64>::new();
        let mut rng = rng_from_seed(2);
        let freq_t = Tensor::<f64>::randn(vec![1, 3, 1], 1.0, &mut rng);
        let time_t = Tensor::<f64>::randn(vec![1, 1, 4], 1.0, &mut rng);
        let freq = tape.leaf(freq_t.clone(), false);
        let time = tape.leaf(time_t.clone(), false);
        let pos = PositionalEmbeddings { freq, time, f_max: 3, t_max: 4 };

        let zero = tape.leaf(Tensor::zeros(vec![1, 3, 4]), false);
        let out = add_positional(&mut tape, FeatureMap { id: zero, f_m: 3, t_m: 4 }, &pos).unwrap();
        let v = tape.value(out.id).clone();
        // Same frequency row, two different time slots.
        let a = v.at3(0, 1, 0);
        let b = v.at3(0, 1, 3);
        assert!((a - (freq_t.at3(0, 1, 0) + time_t.at3(0, 0, 0))).abs() < 1e-12);
        assert!((b - (freq_t.at3(0, 1, 0) + time_t.at3(0, 0, 3))).abs() < 1e-12);
        // The frequency part cancels exactly between the two placements.
        assert!(((a - b) - (time_t.at3(0, 0, 0) - time_t.at3(0, 0, 3))).abs() < 1e-12);
    }

    #[test]
    fn full_scale_patchout_sequence_length() {
        let mut tape = Tape::<f64>::new();
        let map_id = tape.leaf(Tensor::zeros(vec![2, 12, 186]), false);
        let map = FeatureMap { id: map_id, f_m: 12, t_m: 186 };
        let mut rng = rng_from_seed(0);
        let seq = apply_patchout(&mut tape, map, 4, 120, &mut rng).unwrap();
        assert_eq!(seq.kept_freq.len(), 8);
        assert_eq!(seq.kept_time.len(), 66);
        assert_eq!(seq.len(), 528);
        assert_eq!(tape.value(seq.tokens).shape(), &[528, 2]);
    }

    #[test]
    fn no_patchout_is_identity_flatten() {
        let mut tape = Tape::<f64>::new();
        let mut rng = rng_from_seed(1);
        let map_t = Tensor::<f64>::randn(vec![3, 2, 3], 1.0, &mut rng);
        let map_id = tape.leaf(map_t.clone(), false);
        let map = FeatureMap { id: map_id, f_m: 2, t_m: 3 };
        let seq = apply_patchout(&mut tape, map, 0, 0, &mut rng).unwrap();
        assert_eq!(seq.len(), 6);
        // Frequency-major ordering: (f0,t0),(f0,t1),(f0,t2),(f1,t0)...
        let v = tape.value(seq.tokens);
        for f in 0..2 {
            for t in 0..3 {
                for c in 0..3 {
                    assert_eq!(v.at2(f * 3 + t, c), map_t.at3(c, f, t));
                }
            }
        }
    }

    #[test]
    fn eval_flatten_equals_train_with_zero_patchout() {
        let mut tape = Tape::<f64>::new();
        let mut rng = rng_from_seed(8);
        let map_t = Tensor::<f64>::randn(vec![2, 3, 4], 1.0, &mut rng);
        let a_id = tape.leaf(map_t.clone(), false);
        let b_id = tape.leaf(map_t, false);
        let a = flatten_eval(&mut tape, FeatureMap { id: a_id, f_m: 3, t_m: 4 }).unwrap();
        let b = apply_patchout(&mut tape, FeatureMap { id: b_id, f_m: 3, t_m: 4 }, 0, 0, &mut rng).unwrap();
        assert_eq!(tape.value(a.tokens), tape.value(b.tokens));
        assert_eq!(a.kept_freq, b.kept_freq);
        assert_eq!(a.kept_time, b.kept_time);
    }

    #[test]
    fn unflatten_by_kept_indices_reproduces_the_map() {
        let mut tape = Tape::<f64>::new();
        let mut rng = rng_from_seed(3);
        let map_t = Tensor::<f64>::randn(vec![2, 4, 5], 1.0, &mut rng);
        let map_id = tape.leaf(map_t.clone(), false);
        let seq =
            apply_patchout(&mut tape, FeatureMap { id: map_id, f_m: 4, t_m: 5 }, 1, 2, &mut rng).unwrap();
        let v = tape.value(seq.tokens);
        for (i, &f) in seq.kept_freq.iter().enumerate() {
            for (j, &t) in seq.kept_time.iter().enumerate() {
                for c in 0..2 {
                    assert_eq!(v.at2(i * seq.kept_time.len() + j, c), map_t.at3(c, f, t));
                }
            }
        }
    }

    #[test]
    fn grid_larger_than_positional_tables_is_a_config_error() {
        let mut tape = Tape::<f64>::new();
        let map_id = tape.leaf(Tensor::zeros(vec![1, 5, 9]), false);
        let map = FeatureMap { id: map_id, f_m: 5, t_m: 9 };
        let freq = tape.leaf(Tensor::zeros(vec![1, 4, 1]), false);
        let time = tape.leaf(Tensor::zeros(vec![1, 1, 12]), false);
        let pos = PositionalEmbeddings { freq, time, f_max: 4, t_max: 12 };
        assert!(matches!(
            add_positional(&mut tape, map, &pos),
            Err(crate::error::Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn excessive_patchout_is_a_config_error() {
        let mut rng = rng_from_seed(0);
        assert!(sample_kept_indices(3, 4, 3, 0, &mut rng).is_err());
        assert!(sample_kept_indices(3, 4, 0, 4, &mut rng).is_err());
        assert!(sample_kept_indices(3, 4, 2, 3, &mut rng).is_ok());
    }

    #[test]
    fn kept_sets_are_deterministic_per_seed() {
        let mut a = rng_from_seed(77);
        let mut b = rng_from_seed(77);
        assert_eq!(
            sample_kept_indices(12, 186, 4, 120, &mut a).unwrap(),
            sample_kept_indices(12, 186, 4, 120, &mut b).unwrap()
        );
    }

    #[test]
    fn patchout_outcomes_are_uniform() {
        // F_m=3, T_m=4, p_f=1, p_t=2: C(3,1)·C(4,2)=18 equally likely kept sets.
        let mut rng = rng_from_seed(42);
        let mut counts = std::collections::HashMap::new();
        let draws = 18_000;
        for _ in 0..draws {
            let (kf, kt) = sample_kept_indices(3, 4, 1, 2, &mut rng).unwrap();
            *counts.entry((kf, kt)).or_insert(0usize) += 1;
        }
        assert_eq!(counts.len(), 18);
        for (key, count) in counts {
            let freq = count as f64 / draws as f64;
            assert!((freq - 1.0 / 18.0).abs() < 0.01, "{key:?}: {freq}");
        }
    }

    #[test]
    fn positional_add_commutes_with_patchout() {
        // Dropping rows/cols after the positional add equals adding sliced
        // embeddings to the dropped map.
        let mut tape = Tape::<f64>::new();
        let mut rng = rng_from_seed(4);
        let map_t = Tensor::<f64>::randn(vec![2, 4, 6], 1.0, &mut rng);
        let freq_t = Tensor::<f64>::randn(vec![2, 4, 1], 1.0, &mut rng);
        let time_t = Tensor::<f64>::randn(vec![2, 1, 6], 1.0, &mut rng);

        let (kept_f, kept_t) = sample_kept_indices(4, 6, 1, 2, &mut rng).unwrap();

        // Route A: add positional, then drop.
        let map = tape.leaf(map_t.clone(), false);
        let freq = tape.leaf(freq_t.clone(), false);
        let time = tape.leaf(time_t.clone(), false);
        let pos = PositionalEmbeddings { freq, time, f_max: 4, t_max: 6 };
        let summed = add_positional(&mut tape, FeatureMap { id: map, f_m: 4, t_m: 6 }, &pos).unwrap();
        let a = tape.patch_flatten(summed.id, &kept_f, &kept_t).unwrap();

        // Route B: drop map and embeddings first, then add by hand.
        let fp = kept_f.len();
        let tp = kept_t.len();
        let mut expect = vec![0.0; fp * tp * 2];
        for (i, &f) in kept_f.iter().enumerate() {
            for (j, &t) in kept_t.iter().enumerate() {
                for c in 0..2 {
                    expect[(i * tp + j) * 2 + c] =
                        map_t.at3(c, f, t) + freq_t.at3(c, f, 0) + time_t.at3(c, 0, t);
                }
            }
        }
        assert_eq!(tape.value(a).data(), expect.as_slice());
    }
}
