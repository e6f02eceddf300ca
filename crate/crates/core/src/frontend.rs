//! Audio frontend: WAV ingestion, resampling, STFT and log-mel features.

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;
use std::path::Path;

/// Frontend parameters. Defaults match the preprocessing used throughout:
/// 32 kHz audio, 1024-point Hann window with 50% overlap, 128 mel bins over
/// the full band, power mel with a log floor.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FrontendConfig {
    pub sample_rate: u32,
    pub win: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub f_min: f64,
    pub f_max: f64,
    pub floor_eps: f64,
    /// Longest clip the positional tables must cover, in seconds.
    pub max_seconds: f64,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        Self {
            sample_rate: 32_000,
            win: 1024,
            hop: 512,
            n_mels: 128,
            f_min: 0.0,
            f_max: 16_000.0,
            floor_eps: 1e-10,
            max_seconds: 30.0,
        }
    }
}

impl FrontendConfig {
    pub fn n_bins(&self) -> usize {
        self.win / 2 + 1
    }

    /// STFT frame count for an N-sample clip: floor((N - win)/hop) + 1.
    pub fn frames_for(&self, samples: usize) -> Option<usize> {
        if samples < self.win {
            None
        } else {
            Some((samples - self.win) / self.hop + 1)
        }
    }

    /// Frame count of the longest supported clip.
    pub fn max_frames(&self) -> usize {
        let samples = (self.max_seconds * self.sample_rate as f64).round() as usize;
        self.frames_for(samples).unwrap_or(1)
    }
}

/// Mono audio in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl AudioClip {
    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Log-mel features `[mel_bins × frames]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram<F: Real> {
    pub values: Tensor<F>,
    pub frame_hop: usize,
}

impl<F: Real> MelSpectrogram<F> {
    pub fn mel_bins(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn frames(&self) -> usize {
        self.values.shape()[1]
    }
}

// ── WAV I/O ──────────────────────────────────────────────────────────────

/// Read a mono or multichannel WAV (16-bit PCM or 32-bit float); channels
/// are averaged down to mono.
pub fn read_wav(path: &Path) -> Result<AudioClip> {
    let mut reader = hound::WavReader::open(path)
        .map_err(|e| Error::InvalidInput(format!("cannot open {}: {e}", path.display())))?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    let raw: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::InvalidInput(format!("bad sample in {}: {e}", path.display())))?,
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f32 / 32768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::InvalidInput(format!("bad sample in {}: {e}", path.display())))?,
        (fmt, bits) => {
            return Err(Error::InvalidInput(format!(
                "{}: unsupported WAV format {fmt:?}/{bits}-bit (use 16-bit PCM or 32-bit float)",
                path.display()
            )))
        }
    };
    if raw.is_empty() {
        return Err(Error::InvalidInput(format!("{}: empty audio", path.display())));
    }
    let samples = if channels == 1 {
        raw
    } else {
        raw.chunks(channels)
            .map(|frame| frame.iter().sum::<f32>() / channels as f32)
            .collect()
    };
    Ok(AudioClip { samples, sample_rate: spec.sample_rate })
}

/// Write a clip as 16-bit PCM WAV.
pub fn write_wav(path: &Path, clip: &AudioClip) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec)
        .map_err(|e| Error::InvalidInput(format!("cannot create {}: {e}", path.display())))?;
    for &s in &clip.samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        writer
            .write_sample(v)
            .map_err(|e| Error::InvalidInput(format!("write {}: {e}", path.display())))?;
    }
    writer
        .finalize()
        .map_err(|e| Error::InvalidInput(format!("finalize {}: {e}", path.display())))?;
    Ok(())
}

// ── Resampling ───────────────────────────────────────────────────────────

/// Linear-interpolation resampling. Output length is round(len · target/source);
/// equal rates return the clip untouched.
pub fn resample(clip: &AudioClip, target_rate: u32) -> Result<AudioClip> {
    if clip.samples.is_empty() {
        return Err(Error::InvalidInput("resample: empty clip".into()));
    }
    if target_rate == 0 {
        return Err(Error::InvalidInput("resample: target rate must be positive".into()));
    }
    if target_rate == clip.sample_rate {
        return Ok(clip.clone());
    }
    let src_len = clip.samples.len();
    let out_len = ((src_len as f64) * target_rate as f64 / clip.sample_rate as f64).round() as usize;
    let out_len = out_len.max(1);
    let ratio = clip.sample_rate as f64 / target_rate as f64;
    let mut samples = Vec::with_capacity(out_len);
    for i in 0..out_len {
        let pos = i as f64 * ratio;
        let lo = pos.floor() as usize;
        if lo + 1 >= src_len {
            samples.push(clip.samples[src_len - 1]);
        } else {
            let frac = (pos - lo as f64) as f32;
            samples.push(clip.samples[lo] * (1.0 - frac) + clip.samples[lo + 1] * frac);
        }
    }
    Ok(AudioClip { samples, sample_rate: target_rate })
}

// ── STFT ────────────────────────────────────────────────────────────────

/// Precomputed radix-2 FFT plan for one window size.
struct FftPlan {
    n: usize,
    rev: Vec<usize>,
    /// Per stage s (len = 2^(s+1)), twiddles e^{-2πik/len} for k < len/2.
    twiddles: Vec<Vec<(f64, f64)>>,
}

impl FftPlan {
    fn new(n: usize) -> Self {
        debug_assert!(n.is_power_of_two());
        let bits = n.trailing_zeros();
        let rev = (0..n).map(|i| i.reverse_bits() >> (usize::BITS - bits)).collect();
        let mut twiddles = Vec::new();
        let mut len = 2;
        while len <= n {
            let stage: Vec<(f64, f64)> = (0..len / 2)
                .map(|k| {
                    let ang = -2.0 * std::f64::consts::PI * k as f64 / len as f64;
                    (ang.cos(), ang.sin())
                })
                .collect();
            twiddles.push(stage);
            len <<= 1;
        }
        Self { n, rev, twiddles }
    }

    fn run(&self, re: &mut [f64], im: &mut [f64]) {
        let n = self.n;
        for i in 0..n {
            let j = self.rev[i];
            if i < j {
                re.swap(i, j);
                im.swap(i, j);
            }
        }
        let mut len = 2;
        let mut stage = 0;
        while len <= n {
            let half = len / 2;
            let tw = &self.twiddles[stage];
            for start in (0..n).step_by(len) {
                for k in 0..half {
                    let (wr, wi) = tw[k];
                    let (ur, ui) = (re[start + k], im[start + k]);
                    let (vr0, vi0) = (re[start + k + half], im[start + k + half]);
                    let vr = vr0 * wr - vi0 * wi;
                    let vi = vr0 * wi + vi0 * wr;
                    re[start + k] = ur + vr;
                    im[start + k] = ui + vi;
                    re[start + k + half] = ur - vr;
                    im[start + k + half] = ui - vi;
                }
            }
            len <<= 1;
            stage += 1;
        }
    }
}

/// Periodic Hann window of length n.
fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos()))
        .collect()
}

/// Hann-windowed magnitude spectrogram `[win/2+1 × frames]`.
///
/// frames = floor((len - win)/hop) + 1; no padding is applied, so the clip
/// must cover at least one full window.
pub fn stft_mag<F: Real>(clip: &AudioClip, cfg: &FrontendConfig) -> Result<Tensor<F>> {
    let (win, hop) = (cfg.win, cfg.hop);
    if !win.is_power_of_two() || win == 0 {
        return Err(Error::InvalidConfig(format!("window {win} must be a power of two")));
    }
    if hop == 0 {
        return Err(Error::InvalidConfig("hop must be positive".into()));
    }
    let frames = cfg
        .frames_for(clip.samples.len())
        .ok_or_else(|| {
            Error::InvalidInput(format!(
                "clip of {} samples shorter than one {win}-sample window",
                clip.samples.len()
            ))
        })?;
    let bins = win / 2 + 1;
    let window = hann(win);
    let plan = FftPlan::new(win);
    let mut out = vec![F::zero(); bins * frames];
    let mut re = vec![0.0f64; win];
    let mut im = vec![0.0f64; win];
    for f in 0..frames {
        let start = f * hop;
        for i in 0..win {
            re[i] = clip.samples[start + i] as f64 * window[i];
            im[i] = 0.0;
        }
        plan.run(&mut re, &mut im);
        for b in 0..bins {
            let mag = (re[b] * re[b] + im[b] * im[b]).sqrt();
            out[b * frames + f] = F::from_f64(mag);
        }
    }
    Tensor::new(vec![bins, frames], out)
}

// ── Mel filterbank ──────────────────────────────────────────────────────

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10.0f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular HTK-mel filterbank as a dense `[n_mels × n_bins]` matrix.
pub fn mel_filterbank<F: Real>(cfg: &FrontendConfig) -> Result<Tensor<F>> {
    let nyquist = cfg.sample_rate as f64 / 2.0;
    if cfg.n_mels == 0 {
        return Err(Error::InvalidConfig("n_mels must be >= 1".into()));
    }
    if !(0.0 <= cfg.f_min && cfg.f_min < cfg.f_max && cfg.f_max <= nyquist) {
        return Err(Error::InvalidConfig(format!(
            "frequency range {}..{} invalid for Nyquist {nyquist}",
            cfg.f_min, cfg.f_max
        )));
    }
    let n_bins = cfg.n_bins();
    let mel_lo = hz_to_mel(cfg.f_min);
    let mel_hi = hz_to_mel(cfg.f_max);
    let points: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();
    let bin_hz = cfg.sample_rate as f64 / cfg.win as f64;
    let mut fb = vec![F::zero(); cfg.n_mels * n_bins];
    for m in 0..cfg.n_mels {
        let (left, center, right) = (points[m], points[m + 1], points[m + 2]);
        for b in 0..n_bins {
            let f = b as f64 * bin_hz;
            let w = if f <= left || f >= right {
                0.0
            } else if f <= center {
                (f - left) / (center - left)
            } else {
                (right - f) / (right - center)
            };
            if w > 0.0 {
                fb[m * n_bins + b] = F::from_f64(w);
            }
        }
    }
    Tensor::new(vec![cfg.n_mels, n_bins], fb)
}

/// Center frequency (Hz) of each mel filter, for diagnostics and tests.
pub fn mel_filter_centers(cfg: &FrontendConfig) -> Vec<f64> {
    let mel_lo = hz_to_mel(cfg.f_min);
    let mel_hi = hz_to_mel(cfg.f_max);
    (0..cfg.n_mels)
        .map(|m| mel_to_hz(mel_lo + (mel_hi - mel_lo) * (m + 1) as f64 / (cfg.n_mels + 1) as f64))
        .collect()
}

/// Apply the filterbank to the power spectrogram (pre-log mel energies).
pub fn mel_power<F: Real>(spec: &Tensor<F>, cfg: &FrontendConfig) -> Result<Tensor<F>> {
    if spec.shape().len() != 2 || spec.shape()[0] != cfg.n_bins() {
        return Err(Error::shape(
            "mel_power",
            format!("expected [{} × frames], got {:?}", cfg.n_bins(), spec.shape()),
        ));
    }
    let fb = mel_filterbank::<F>(cfg)?;
    let (n_bins, frames) = (spec.shape()[0], spec.shape()[1]);
    let mut out = vec![F::zero(); cfg.n_mels * frames];
    for m in 0..cfg.n_mels {
        for b in 0..n_bins {
            let w = fb.data()[m * n_bins + b];
            if w == F::zero() {
                continue;
            }
            let row = &spec.data()[b * frames..(b + 1) * frames];
            let orow = &mut out[m * frames..(m + 1) * frames];
            for t in 0..frames {
                let mag = row[t];
                orow[t] += w * mag * mag;
            }
        }
    }
    Tensor::new(vec![cfg.n_mels, frames], out)
}

/// Log-mel features: triangular mel filterbank over the power spectrogram,
/// then `ln(x + floor_eps)`.
pub fn log_mel<F: Real>(spec: &Tensor<F>, cfg: &FrontendConfig) -> Result<MelSpectrogram<F>> {
    let power = mel_power(spec, cfg)?;
    let eps = F::from_f64(cfg.floor_eps);
    let values = power.map(|v| (v + eps).ln());
    if !values.all_finite() {
        return Err(Error::NonFinite { op: "log_mel" });
    }
    Ok(MelSpectrogram { values, frame_hop: cfg.hop })
}

/// Full pipeline: resample to the configured rate, STFT, log-mel.
pub fn extract_mel<F: Real>(clip: &AudioClip, cfg: &FrontendConfig) -> Result<MelSpectrogram<F>> {
    let clip = resample(clip, cfg.sample_rate)?;
    let spec = stft_mag::<F>(&clip, cfg)?;
    log_mel(&spec, cfg)
}

/// Per-clip standardization: zero mean, unit variance over the whole
/// spectrogram. Applied at model-input time, not stored in .mel files.
pub fn standardize<F: Real>(mel: &MelSpectrogram<F>) -> MelSpectrogram<F> {
    let data = mel.values.data();
    let n = F::from_f64(data.len() as f64);
    let mut mean = F::zero();
    for &v in data {
        mean += v;
    }
    mean /= n;
    let mut var = F::zero();
    for &v in data {
        let d = v - mean;
        var += d * d;
    }
    var /= n;
    let inv = (var + F::from_f64(1e-8)).sqrt().recip();
    MelSpectrogram {
        values: mel.values.map(|v| (v - mean) * inv),
        frame_hop: mel.frame_hop,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Naive O(n²) DFT magnitude at one bin; the independent STFT oracle.
    fn dft_mag(signal: &[f64], bin: usize) -> f64 {
        let n = signal.len() as f64;
        let (mut re, mut im) = (0.0, 0.0);
        for (i, &x) in signal.iter().enumerate() {
            let ang = -2.0 * std::f64::consts::PI * bin as f64 * i as f64 / n;
            re += x * ang.cos();
            im += x * ang.sin();
        }
        (re * re + im * im).sqrt()
    }

    fn sine(freq: f64, rate: u32, secs: f64) -> AudioClip {
        let n = (rate as f64 * secs) as usize;
        let samples = (0..n)
            .map(|i| (2.0 * std::f64::consts::PI * freq * i as f64 / rate as f64).sin() as f32 * 0.7)
            .collect();
        AudioClip { samples, sample_rate: rate }
    }

    #[test]
    fn resample_same_rate_is_identity() {
        let clip = sine(440.0, 32_000, 0.1);
        let out = resample(&clip, 32_000).unwrap();
        assert_eq!(out, clip);
    }

    #[test]
    fn resample_length_arithmetic() {
        let clip = sine(440.0, 16_000, 1.0);
        let out = resample(&clip, 32_000).unwrap();
        assert_eq!(out.samples.len(), 32_000);
    }

    #[test]
    fn resample_empty_clip_is_an_error() {
        let clip = AudioClip { samples: vec![], sample_rate: 8000 };
        assert!(resample(&clip, 32_000).is_err());
    }

    #[test]
    fn resample_preserves_dominant_frequency() {
        // 1 kHz sine at 8 kHz resampled to 32 kHz keeps its DFT peak at 1 kHz.
        let clip = sine(1000.0, 8_000, 0.25);
        let out = resample(&clip, 32_000).unwrap();
        let sig: Vec<f64> = out.samples.iter().map(|&s| s as f64).collect();
        let n = sig.len();
        // bin k corresponds to k*32000/n Hz
        let target = (1000.0 * n as f64 / 32_000.0).round() as usize;
        let peak_mag = dft_mag(&sig, target);
        for probe in [target / 2, target * 2, target + 40] {
            assert!(dft_mag(&sig, probe) < peak_mag * 0.2, "bin {probe} rivals 1 kHz");
        }
    }

    #[test]
    fn stft_frame_count_matches_shape_law() {
        let cfg = FrontendConfig::default();
        let clip = sine(500.0, 32_000, 1.0); // 32000 samples
        let spec = stft_mag::<f64>(&clip, &cfg).unwrap();
        assert_eq!(spec.shape(), &[513, 61]);
        // Shape law across a range of lengths.
        for n in [1024usize, 1025, 1535, 1536, 4096, 10_000] {
            let clip = AudioClip { samples: vec![0.1; n], sample_rate: 32_000 };
            let spec = stft_mag::<f64>(&clip, &cfg).unwrap();
            assert_eq!(spec.shape()[1], (n - 1024) / 512 + 1, "len {n}");
        }
    }

    #[test]
    fn stft_of_silence_is_zero() {
        let cfg = FrontendConfig::default();
        let clip = AudioClip { samples: vec![0.0; 4096], sample_rate: 32_000 };
        let spec = stft_mag::<f64>(&clip, &cfg).unwrap();
        assert!(spec.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn stft_too_short_clip_is_an_error() {
        let cfg = FrontendConfig::default();
        let clip = AudioClip { samples: vec![0.0; 1023], sample_rate: 32_000 };
        assert!(stft_mag::<f64>(&clip, &cfg).is_err());
    }

    #[test]
    fn pure_tone_peaks_at_expected_bin() {
        // 1 kHz at 32 kHz with a 1024 window lands on bin 32.
        let cfg = FrontendConfig::default();
        let clip = sine(1000.0, 32_000, 0.5);
        let spec = stft_mag::<f64>(&clip, &cfg).unwrap();
        let frames = spec.shape()[1];
        let mid = frames / 2;
        let mut best = (0, f64::MIN);
        for b in 0..513 {
            let v = spec.data()[b * frames + mid];
            if v > best.1 {
                best = (b, v);
            }
        }
        assert_eq!(best.0, 32);
    }

    #[test]
    fn fft_matches_naive_dft() {
        let mut rng = crate::rng::rng_from_seed(11);
        use rand::Rng as _;
        let sig: Vec<f64> = (0..64).map(|_| rng.random::<f64>() - 0.5).collect();
        let plan = FftPlan::new(64);
        let mut re = sig.clone();
        let mut im = vec![0.0; 64];
        plan.run(&mut re, &mut im);
        for bin in 0..=32 {
            let expect = dft_mag(&sig, bin);
            let got = (re[bin] * re[bin] + im[bin] * im[bin]).sqrt();
            assert!((got - expect).abs() < 1e-9, "bin {bin}: {got} vs {expect}");
        }
    }

    #[test]
    fn zero_spectrogram_yields_log_floor() {
        let cfg = FrontendConfig::default();
        let spec = Tensor::<f64>::zeros(vec![513, 5]);
        let mel = log_mel(&spec, &cfg).unwrap();
        let expect = (1e-10f64).ln();
        assert!(mel.values.data().iter().all(|&v| (v - expect).abs() < 1e-12));
    }

    #[test]
    fn filterbank_weights_nonnegative_and_filters_nonempty() {
        let cfg = FrontendConfig::default();
        let fb = mel_filterbank::<f64>(&cfg).unwrap();
        assert!(fb.data().iter().all(|&w| w >= 0.0));
        for m in 0..cfg.n_mels {
            let sum: f64 = fb.data()[m * 513..(m + 1) * 513].iter().sum();
            assert!(sum > 0.0, "filter {m} sums to zero");
        }
    }

    #[test]
    fn impulse_at_1khz_bin_hits_nearest_filter() {
        let cfg = FrontendConfig::default();
        // Single-bin impulse at bin 32 = 1000 Hz.
        let mut data = vec![0.0f64; 513 * 3];
        for t in 0..3 {
            data[32 * 3 + t] = 1.0;
        }
        let spec = Tensor::new(vec![513, 3], data).unwrap();
        let power = mel_power(&spec, &cfg).unwrap();
        let response: Vec<f64> = (0..cfg.n_mels).map(|m| power.data()[m * 3]).collect();
        let argmax = response
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        // Independent oracle: HTK center frequencies computed from scratch.
        let to_mel = |hz: f64| 2595.0 * (1.0 + hz / 700.0).log10();
        let to_hz = |mel: f64| 700.0 * (10.0f64.powf(mel / 2595.0) - 1.0);
        let top = to_mel(16_000.0);
        let centers: Vec<f64> =
            (0..128).map(|m| to_hz(top * (m + 1) as f64 / 129.0)).collect();
        let nearest = centers
            .iter()
            .enumerate()
            .min_by(|a, b| {
                (a.1 - 1000.0).abs().partial_cmp(&(b.1 - 1000.0).abs()).unwrap()
            })
            .unwrap()
            .0;
        assert_eq!(argmax, nearest);
    }

    #[test]
    fn doubling_amplitude_quadruples_mel_power() {
        let cfg = FrontendConfig::default();
        let clip = sine(700.0, 32_000, 0.2);
        let doubled = AudioClip {
            samples: clip.samples.iter().map(|&s| s * 2.0).collect(),
            sample_rate: 32_000,
        };
        let p1 = mel_power(&stft_mag::<f64>(&clip, &cfg).unwrap(), &cfg).unwrap();
        let p2 = mel_power(&stft_mag::<f64>(&doubled, &cfg).unwrap(), &cfg).unwrap();
        for (a, b) in p1.data().iter().zip(p2.data()) {
            if *a > 1e-12 {
                assert!((b / a - 4.0).abs() < 1e-6, "{b} vs 4·{a}");
            }
        }
    }

    #[test]
    fn extraction_is_deterministic() {
        let cfg = FrontendConfig::default();
        let clip = sine(1234.0, 32_000, 0.3);
        let a = extract_mel::<f32>(&clip, &cfg).unwrap();
        let b = extract_mel::<f32>(&clip, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn standardize_centers_and_scales() {
        let cfg = FrontendConfig::default();
        let clip = sine(900.0, 32_000, 0.2);
        let mel = extract_mel::<f64>(&clip, &cfg).unwrap();
        let std = standardize(&mel);
        let n = std.values.numel() as f64;
        let mean: f64 = std.values.data().iter().sum::<f64>() / n;
        let var: f64 = std.values.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-9);
        assert!((var - 1.0).abs() < 1e-6);
    }

    #[test]
    fn wav_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.wav");
        let clip = sine(500.0, 32_000, 0.05);
        write_wav(&path, &clip).unwrap();
        let back = read_wav(&path).unwrap();
        assert_eq!(back.sample_rate, 32_000);
        assert_eq!(back.samples.len(), clip.samples.len());
        for (a, b) in clip.samples.iter().zip(&back.samples) {
            assert!((a - b).abs() < 2.0 / 32768.0);
        }
    }
}
