//! Flat key-value run configuration.
//!
//! The file format is one `key = value` per line with `#` comments. Every
//! key has a default; unknown keys are rejected so typos surface early.
//! `CAPTIONER_SEED` in the environment overrides the configured seed.

use crate::augment::{MixupConfig, MixupLoss, SpecAugmentConfig};
use crate::decode::LengthNorm;
use crate::error::{Error, Result};
use crate::frontend::FrontendConfig;
use crate::model::ModelConfig;
use crate::patchout::PatchoutConfig;
use std::collections::HashMap;
use std::path::{Path, PathBuf};

/// Per-stage training knobs.
#[derive(Debug, Clone, PartialEq)]
pub struct StageConfig {
    pub epochs: usize,
    /// Constant learning rate (stages 1 and 2).
    pub lr: f64,
    pub p_f: usize,
    pub p_t: usize,
}

/// Everything a run needs, with desk-scale defaults.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub frontend: FrontendConfig,
    pub patch: PatchoutConfig,
    pub model: ModelConfig,
    pub guide_enabled: bool,
    pub guide_count: usize,
    pub guide_top_p: f64,
    pub mixup: MixupConfig,
    pub specaug: SpecAugmentConfig,
    pub specaug_enabled: bool,
    pub len_norm: LengthNorm,
    pub beam_width: usize,
    pub tagger_dim: usize,
    pub tagger_epochs: usize,
    pub tagger_lr: f64,
    pub batch_size: usize,
    pub stage1: StageConfig,
    pub stage2: StageConfig,
    pub stage3: StageConfig,
    /// Stage 3 linear warmup endpoints.
    pub stage3_lr_start: f64,
    pub stage3_lr_end: f64,
    pub train_manifest: Option<PathBuf>,
    pub pretrain_manifest: Option<PathBuf>,
    pub val_manifest: Option<PathBuf>,
    pub labels_file: Option<PathBuf>,
    pub caption_embeddings: Option<PathBuf>,
    pub label_embeddings: Option<PathBuf>,
    pub tagger_store: Option<PathBuf>,
    /// Optional pre-trained word embeddings for the decoder table.
    pub word_embeddings: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            frontend: FrontendConfig::default(),
            patch: PatchoutConfig::default(),
            model: ModelConfig::default(),
            guide_enabled: true,
            guide_count: 1,
            guide_top_p: 0.9,
            mixup: MixupConfig::default(),
            specaug: SpecAugmentConfig::default(),
            specaug_enabled: true,
            len_norm: LengthNorm::Mean,
            beam_width: 3,
            tagger_dim: 32,
            tagger_epochs: 30,
            tagger_lr: 1e-2,
            batch_size: 32,
            // Reference schedule: frozen pre-train at 1e-4, unfrozen at
            // 1e-5, fine-tune warming 1e-5 → 1e-4; Patchout p_f=4 with
            // p_t=80 pre-training and 120 fine-tuning.
            stage1: StageConfig { epochs: 10, lr: 1e-4, p_f: 4, p_t: 80 },
            stage2: StageConfig { epochs: 10, lr: 1e-5, p_f: 4, p_t: 80 },
            stage3: StageConfig { epochs: 20, lr: 1e-4, p_f: 4, p_t: 120 },
            stage3_lr_start: 1e-5,
            stage3_lr_end: 1e-4,
            train_manifest: None,
            pretrain_manifest: None,
            val_manifest: None,
            labels_file: None,
            caption_embeddings: None,
            label_embeddings: None,
            tagger_store: None,
            word_embeddings: None,
            out_dir: PathBuf::from("runs/out"),
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::InvalidConfig(format!("cannot read {}: {e}", path.display())))?;
        Self::from_str_with_env(&text)
    }

    pub fn from_str_with_env(text: &str) -> Result<Self> {
        let mut cfg = Self::parse(text)?;
        if let Ok(seed) = std::env::var("CAPTIONER_SEED") {
            cfg.seed = seed
                .parse()
                .map_err(|_| Error::InvalidConfig(format!("CAPTIONER_SEED={seed} is not a u64")))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = HashMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::InvalidConfig(format!("line {}: expected key = value", lineno + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            if seen.insert(key.to_string(), lineno).is_some() {
                return Err(Error::InvalidConfig(format!("duplicate key {key}")));
            }
            cfg.set(key, value)
                .map_err(|e| Error::InvalidConfig(format!("line {}: {e}", lineno + 1)))?;
        }
        Ok(cfg)
    }

    fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        fn num<T: std::str::FromStr>(v: &str) -> std::result::Result<T, String>
        where
            T::Err: std::fmt::Display,
        {
            v.parse::<T>().map_err(|e| format!("{v:?}: {e}"))
        }
        fn flag(v: &str) -> std::result::Result<bool, String> {
            match v {
                "true" | "1" | "on" | "yes" => Ok(true),
                "false" | "0" | "off" | "no" => Ok(false),
                other => Err(format!("{other:?} is not a boolean")),
            }
        }
        match key {
            "seed" => self.seed = num(v)?,
            "frontend.sample_rate" => self.frontend.sample_rate = num(v)?,
            "frontend.win" => self.frontend.win = num(v)?,
            "frontend.hop" => self.frontend.hop = num(v)?,
            "frontend.mels" => self.frontend.n_mels = num(v)?,
            "frontend.f_min" => self.frontend.f_min = num(v)?,
            "frontend.f_max" => self.frontend.f_max = num(v)?,
            "frontend.max_seconds" => self.frontend.max_seconds = num(v)?,
            "patch.kernel" => self.patch.kernel = num(v)?,
            "patch.stride" => self.patch.stride = num(v)?,
            // patch.dim and model.d are the same quantity; either key sets both.
            "patch.dim" | "model.d" => {
                self.patch.dim = num(v)?;
                self.model.d = self.patch.dim;
            }
            "patchout.freq" => {
                self.patch.p_f = num(v)?;
                self.stage1.p_f = self.patch.p_f;
                self.stage2.p_f = self.patch.p_f;
                self.stage3.p_f = self.patch.p_f;
            }
            "patchout.time" => {
                self.patch.p_t = num(v)?;
                self.stage1.p_t = self.patch.p_t;
                self.stage2.p_t = self.patch.p_t;
                self.stage3.p_t = self.patch.p_t;
            }
            "model.enc_blocks" => self.model.enc_blocks = num(v)?,
            "model.enc_heads" => self.model.enc_heads = num(v)?,
            "model.enc_ffn_dim" => self.model.enc_ffn_dim = num(v)?,
            "model.dec_blocks" => self.model.dec_blocks = num(v)?,
            "model.dec_heads" => self.model.dec_heads = num(v)?,
            "model.dec_dim" => self.model.dec_dim = num(v)?,
            "model.dec_ffn_dim" => self.model.dec_ffn_dim = num(v)?,
            "model.decoder_dropout" => self.model.decoder_dropout = num(v)?,
            "model.label_smoothing" => self.model.label_smoothing = num(v)?,
            "model.max_caption_len" => self.model.max_caption_len = num(v)?,
            "guide.enabled" => self.guide_enabled = flag(v)?,
            "guide.count" => self.guide_count = num(v)?,
            "guide.top_p" => self.guide_top_p = num(v)?,
            "mixup.enabled" => self.mixup.enabled = flag(v)?,
            "mixup.alpha" => self.mixup.alpha = num(v)?,
            "mixup.loss" => {
                self.mixup.loss = match v {
                    "dominant" => MixupLoss::Dominant,
                    "both_weighted" => MixupLoss::BothWeighted,
                    other => return Err(format!("mixup.loss {other:?} (dominant|both_weighted)")),
                }
            }
            "specaug.enabled" => self.specaug_enabled = flag(v)?,
            "specaug.n_freq_masks" => self.specaug.n_freq_masks = num(v)?,
            "specaug.max_freq_width" => self.specaug.max_freq_width = num(v)?,
            "specaug.n_time_masks" => self.specaug.n_time_masks = num(v)?,
            "specaug.max_time_width" => self.specaug.max_time_width = num(v)?,
            "decode.len_norm" => {
                self.len_norm = match v {
                    "none" => LengthNorm::None,
                    "mean" => LengthNorm::Mean,
                    other => return Err(format!("decode.len_norm {other:?} (none|mean)")),
                }
            }
            "decode.beam" => self.beam_width = num(v)?,
            "tagger.dim" => self.tagger_dim = num(v)?,
            "tagger.epochs" => self.tagger_epochs = num(v)?,
            "tagger.lr" => self.tagger_lr = num(v)?,
            "schedule.batch_size" => self.batch_size = num(v)?,
            "schedule.stage1.epochs" => self.stage1.epochs = num(v)?,
            "schedule.stage1.lr" => self.stage1.lr = num(v)?,
            "schedule.stage1.patchout.freq" => self.stage1.p_f = num(v)?,
            "schedule.stage1.patchout.time" => self.stage1.p_t = num(v)?,
            "schedule.stage2.epochs" => self.stage2.epochs = num(v)?,
            "schedule.stage2.lr" => self.stage2.lr = num(v)?,
            "schedule.stage2.patchout.freq" => self.stage2.p_f = num(v)?,
            "schedule.stage2.patchout.time" => self.stage2.p_t = num(v)?,
            "schedule.stage3.epochs" => self.stage3.epochs = num(v)?,
            "schedule.stage3.lr_start" => self.stage3_lr_start = num(v)?,
            "schedule.stage3.lr_end" => self.stage3_lr_end = num(v)?,
            "schedule.stage3.patchout.freq" => self.stage3.p_f = num(v)?,
            "schedule.stage3.patchout.time" => self.stage3.p_t = num(v)?,
            "data.train_manifest" => self.train_manifest = Some(PathBuf::from(v)),
            "data.pretrain_manifest" => self.pretrain_manifest = Some(PathBuf::from(v)),
            "data.val_manifest" => self.val_manifest = Some(PathBuf::from(v)),
            "data.labels" => self.labels_file = Some(PathBuf::from(v)),
            "data.caption_embeddings" => self.caption_embeddings = Some(PathBuf::from(v)),
            "data.label_embeddings" => self.label_embeddings = Some(PathBuf::from(v)),
            "data.tagger" => self.tagger_store = Some(PathBuf::from(v)),
            "data.word_embeddings" => self.word_embeddings = Some(PathBuf::from(v)),
            "data.out_dir" => self.out_dir = PathBuf::from(v),
            other => return Err(format!("unknown key {other:?}")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch.dim != self.model.d {
            return Err(Error::InvalidConfig(format!(
                "patch.dim {} disagrees with encoder width {}",
                self.patch.dim, self.model.d
            )));
        }
        if self.batch_size == 0 || self.beam_width == 0 {
            return Err(Error::InvalidConfig("batch size and beam width must be positive".into()));
        }
        if !(self.guide_top_p > 0.0 && self.guide_top_p <= 1.0) {
            return Err(Error::InvalidConfig("guide.top_p must be in (0,1]".into()));
        }
        if self.mixup.alpha <= 0.0 {
            return Err(Error::InvalidConfig("mixup.alpha must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse_from_empty_text() {
        let cfg = RunConfig::parse("").unwrap();
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn keys_override_defaults_and_comments_are_ignored() {
        let text = "
# desk run
seed = 12
patch.dim = 32          # encoder width follows
model.dec_dim = 48
mixup.enabled = false
decode.len_norm = none
schedule.stage3.patchout.time = 6
";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.seed, 12);
        assert_eq!(cfg.patch.dim, 32);
        assert_eq!(cfg.model.d, 32);
        assert_eq!(cfg.model.dec_dim, 48);
        assert!(!cfg.mixup.enabled);
        assert_eq!(cfg.len_norm, LengthNorm::None);
        assert_eq!(cfg.stage3.p_t, 6);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::parse("patch.dims = 3").unwrap_err();
        assert!(err.to_string().contains("unknown key"));
    }

    #[test]
    fn duplicate_keys_are_rejected() {
        assert!(RunConfig::parse("seed = 1\nseed = 2").is_err());
    }

    #[test]
    fn env_seed_wins() {
        std::env::set_var("CAPTIONER_SEED", "99");
        let cfg = RunConfig::from_str_with_env("seed = 3").unwrap();
        std::env::remove_var("CAPTIONER_SEED");
        assert_eq!(cfg.seed, 99);
    }
}
