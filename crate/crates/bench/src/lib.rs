//! Shared fixtures for the criterion benchmarks.

use captioner_core::frontend::{AudioClip, FrontendConfig, MelSpectrogram};
use captioner_core::model::{CaptionerModel, ModelConfig};
use captioner_core::patchout::PatchoutConfig;
use captioner_core::rng_from_seed;
use captioner_core::tape::Tape;
use captioner_core::tensor::Tensor;

/// A 32 kHz test tone of the given length.
pub fn test_clip(seconds: f64) -> AudioClip {
    let rate = 32_000u32;
    let n = (seconds * rate as f64) as usize;
    let samples = (0..n)
        .map(|i| (2.0 * std::f64::consts::PI * 600.0 * i as f64 / rate as f64).sin() as f32 * 0.5)
        .collect();
    AudioClip { samples, sample_rate: rate }
}

pub fn bench_frontend_config() -> FrontendConfig {
    FrontendConfig { max_seconds: 10.0, ..Default::default() }
}

/// Standardized random mel of the requested frame count.
pub fn random_mel(frames: usize) -> MelSpectrogram<f32> {
    let mut rng = rng_from_seed(1);
    MelSpectrogram { values: Tensor::randn(vec![128, frames], 1.0, &mut rng), frame_hop: 512 }
}

/// Small encoder-decoder sized for benchmarking, plus its tape.
pub fn bench_model(d: usize, vocab: usize) -> (Tape<f32>, CaptionerModel) {
    let cfg = ModelConfig {
        enc_blocks: 2,
        enc_heads: 4,
        d,
        enc_ffn_dim: 4 * d,
        dec_blocks: 2,
        dec_heads: 4,
        dec_dim: d,
        dec_ffn_dim: 4 * d,
        decoder_dropout: 0.0,
        label_smoothing: 0.0,
        vocab_size: vocab,
        max_caption_len: 16,
    };
    let patch = PatchoutConfig { kernel: 16, stride: 10, dim: d, p_f: 4, p_t: 0 };
    let fcfg = bench_frontend_config();
    let f_max = patch.grid_extent(fcfg.n_mels).unwrap();
    let t_max = patch.grid_extent(fcfg.max_frames()).unwrap();
    let mut tape = Tape::new();
    let mut rng = rng_from_seed(2);
    let model = CaptionerModel::init(&mut tape, cfg, patch, f_max, t_max, &mut rng).unwrap();
    tape.commit_params();
    (tape, model)
}
