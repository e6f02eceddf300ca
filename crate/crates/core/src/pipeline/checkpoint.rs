//! Full-system checkpoints on top of the tensor store: model (and tagger)
//! parameters, architecture config, vocabulary and label set.

use crate::error::{Error, Result};
use crate::frontend::{FrontendConfig, MelSpectrogram};
use crate::model::{CaptionerModel, ModelConfig};
use crate::patchout::PatchoutConfig;
use crate::pipeline::vocab::Vocabulary;
use crate::real::Real;
use crate::store;
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::textguide::{DeskTagger, LabelVocabulary};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TaggerConfig {
    pub dim: usize,
    pub n_labels: usize,
}

/// Everything needed to rebuild the system around the stored tensors.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CheckpointConfig {
    pub model: ModelConfig,
    pub patch: PatchoutConfig,
    pub frontend: FrontendConfig,
    pub guide_enabled: bool,
    pub guide_count: usize,
    pub guide_top_p: f64,
    pub f_max: usize,
    pub t_max: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tagger: Option<TaggerConfig>,
}

/// Write all tape parameters plus config, vocabulary and labels into `dir`.
pub fn save_checkpoint<F: Real>(
    dir: &Path,
    tape: &Tape<F>,
    cfg: &CheckpointConfig,
    vocab: &Vocabulary,
    labels: Option<&LabelVocabulary>,
) -> Result<()> {
    let tensors: Vec<(String, &Tensor<F>)> = tape
        .params()
        .iter()
        .map(|(name, id)| (name.clone(), tape.value(*id)))
        .collect();
    store::save(dir, &tensors, Some(serde_json::to_value(cfg)?))?;
    std::fs::write(dir.join("vocab.json"), serde_json::to_vec_pretty(vocab.words())?)?;
    if let Some(l) = labels {
        std::fs::write(dir.join("labels.json"), serde_json::to_vec_pretty(l.names())?)?;
    }
    Ok(())
}

/// Fill the parameters of an already-built tape by name, strictly: every
/// registered parameter must be present with a matching shape, and every
/// stored tensor must land somewhere.
pub fn load_params_into<F: Real>(dir: &Path, tape: &mut Tape<F>) -> Result<()> {
    let loaded = store::load::<F>(dir)?;
    let mut used = vec![false; loaded.tensors.len()];
    let params: Vec<(String, crate::tape::TensorId)> = tape.params().to_vec();
    for (name, id) in params {
        let pos = loaded
            .tensors
            .iter()
            .position(|(n, _)| *n == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name:?}")))?;
        let tensor = &loaded.tensors[pos].1;
        if tensor.shape() != tape.value(id).shape() {
            return Err(Error::Checkpoint(format!(
                "tensor {name:?} has shape {:?}, expected {:?}",
                tensor.shape(),
                tape.value(id).shape()
            )));
        }
        *tape.value_mut(id) = tensor.clone();
        used[pos] = true;
    }
    if let Some(pos) = used.iter().position(|&u| !u) {
        return Err(Error::Checkpoint(format!(
            "stored tensor {:?} matches no parameter",
            loaded.tensors[pos].0
        )));
    }
    Ok(())
}

/// A checkpoint rebuilt into a fresh tape.
pub struct LoadedCheckpoint<F: Real> {
    pub tape: Tape<F>,
    pub model: CaptionerModel,
    pub tagger: Option<DeskTagger>,
    pub config: CheckpointConfig,
    pub vocab: Vocabulary,
    pub labels: Option<LabelVocabulary>,
}

/// Rebuild model (+ tagger) from a checkpoint directory.
pub fn load_checkpoint<F: Real>(dir: &Path) -> Result<LoadedCheckpoint<F>> {
    let loaded = store::load::<F>(dir)?;
    let cfg: CheckpointConfig = serde_json::from_value(
        loaded
            .config
            .clone()
            .ok_or_else(|| Error::Checkpoint("checkpoint has no config blob".into()))?,
    )
    .map_err(|e| Error::Checkpoint(format!("bad checkpoint config: {e}")))?;

    let vocab_words: Vec<String> = serde_json::from_slice(
        &std::fs::read(dir.join("vocab.json"))
            .map_err(|e| Error::Checkpoint(format!("missing vocab.json: {e}")))?,
    )?;
    let vocab = Vocabulary::from_stored_words(vocab_words)?;

    let labels = match std::fs::read(dir.join("labels.json")) {
        Ok(bytes) => {
            let names: Vec<String> = serde_json::from_slice(&bytes)?;
            Some(LabelVocabulary::new(names)?)
        }
        Err(_) => None,
    };

    // Parameter registration order must not matter: values land by name.
    let mut tape = Tape::<F>::new();
    let mut rng = crate::rng::rng_from_seed(0);
    let model = CaptionerModel::init(
        &mut tape,
        cfg.model.clone(),
        cfg.patch.clone(),
        cfg.f_max,
        cfg.t_max,
        &mut rng,
    )?;
    let tagger = match &cfg.tagger {
        Some(t) => Some(DeskTagger::init(&mut tape, t.dim, t.n_labels, &mut rng)?),
        None => None,
    };
    tape.commit_params();
    load_params_into(dir, &mut tape)?;
    Ok(LoadedCheckpoint { tape, model, tagger, config: cfg, vocab, labels })
}

// ── Single-tensor .mel files ────────────────────────────────────────────

/// Write a mel spectrogram as a store directory holding one tensor `mel`.
pub fn save_mel<F: Real>(path: &Path, mel: &MelSpectrogram<F>) -> Result<()> {
    store::save(
        path,
        &[("mel".to_string(), &mel.values)],
        Some(serde_json::json!({ "frame_hop": mel.frame_hop })),
    )
}

pub fn load_mel<F: Real>(path: &Path) -> Result<MelSpectrogram<F>> {
    let loaded = store::load::<F>(path)?;
    let values = loaded
        .get("mel")
        .ok_or_else(|| Error::Checkpoint(format!("{}: no tensor named 'mel'", path.display())))?
        .clone();
    if values.shape().len() != 2 {
        return Err(Error::Checkpoint(format!(
            "{}: mel tensor must be 2-D, got {:?}",
            path.display(),
            values.shape()
        )));
    }
    let frame_hop = loaded
        .config
        .as_ref()
        .and_then(|c| c.get("frame_hop"))
        .and_then(|v| v.as_u64())
        .unwrap_or(512) as usize;
    Ok(MelSpectrogram { values, frame_hop })
}
