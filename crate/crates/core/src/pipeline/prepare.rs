//! The `prepare` step: build the vocabulary, pair captions with labels via
//! their sentence embeddings, fine-tune the desk tagger with BCE on those
//! pairs, and cache each clip's tag distribution in the manifest so training
//! can re-sample guiding text per epoch without running the tagger.

use crate::error::{Error, Result};
use crate::frontend::{self, FrontendConfig, MelSpectrogram};
use crate::optim::Adam;
use crate::pipeline::manifest::DatasetManifest;
use crate::pipeline::vocab::Vocabulary;
use crate::real::Real;
use crate::store;
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::textguide::{self, DeskTagger, LabelVocabulary, SentenceEmbedding, Tagger};
use std::collections::HashMap;
use std::path::Path;

#[derive(Debug, Clone)]
pub struct PrepareOptions {
    pub tagger_dim: usize,
    pub tagger_epochs: usize,
    pub tagger_lr: f64,
    pub seed: u64,
}

impl Default for PrepareOptions {
    fn default() -> Self {
        Self { tagger_dim: 32, tagger_epochs: 30, tagger_lr: 1e-2, seed: 7 }
    }
}

pub struct Prepared {
    pub vocab: Vocabulary,
    pub labels: LabelVocabulary,
    /// Manifests in input order, with `guide_probs` filled in.
    pub manifests: Vec<DatasetManifest>,
}

/// Pair every caption of the base manifest with its most similar label.
/// Returns per-clip multi-hot targets over the label set.
fn clip_targets(
    manifest: &DatasetManifest,
    captions_emb: &[SentenceEmbedding],
    labels_emb: &[SentenceEmbedding],
    n_labels: usize,
) -> Result<Vec<Vec<bool>>> {
    let by_text: HashMap<&str, usize> = captions_emb
        .iter()
        .enumerate()
        .map(|(i, e)| (e.source_text.as_str(), i))
        .collect();
    // Pair all embeddings once, then look up per caption.
    let pairs = textguide::pair_labels(captions_emb, labels_emb)?;
    let label_of_embedding: Vec<usize> = pairs.iter().map(|&(_, li, _)| li).collect();

    let mut targets = Vec::with_capacity(manifest.len());
    for entry in &manifest.entries {
        let mut hot = vec![false; n_labels];
        for caption in &entry.captions {
            let ei = by_text.get(caption.as_str()).copied().ok_or_else(|| {
                Error::InvalidInput(format!("no embedding for caption {caption:?}"))
            })?;
            hot[label_of_embedding[ei]] = true;
        }
        targets.push(hot);
    }
    Ok(targets)
}

/// Run the whole prepare step. The first manifest is the base split that
/// defines the vocabulary and trains the tagger; every manifest gets its
/// guide distributions cached.
pub fn prepare<F: Real>(
    manifests: &[DatasetManifest],
    labels: &LabelVocabulary,
    captions_emb: &[SentenceEmbedding],
    labels_emb: &[SentenceEmbedding],
    fcfg: &FrontendConfig,
    opts: &PrepareOptions,
) -> Result<(Prepared, Tape<F>, DeskTagger)> {
    if manifests.is_empty() {
        return Err(Error::InvalidInput("prepare needs at least one manifest".into()));
    }
    if labels_emb.len() != labels.len() {
        return Err(Error::InvalidInput(format!(
            "{} label embeddings for {} labels",
            labels_emb.len(),
            labels.len()
        )));
    }
    let base = &manifests[0];
    let vocab = Vocabulary::build(base.all_captions())?;

    // Featurize the base split once (raw mel; standardized at use).
    let mut mels: Vec<MelSpectrogram<F>> = Vec::with_capacity(base.len());
    for entry in &base.entries {
        let clip = frontend::read_wav(&base.clip_path(entry))?;
        mels.push(frontend::extract_mel(&clip, fcfg)?);
    }

    let targets = clip_targets(base, captions_emb, labels_emb, labels.len())?;

    // Fine-tune the tagger with BCE on the paired labels.
    let mut tape = Tape::<F>::new();
    let mut rng = crate::rng::rng_from_seed(opts.seed);
    let tagger = DeskTagger::init(&mut tape, opts.tagger_dim, labels.len(), &mut rng)?;
    tape.commit_params();
    let mut opt = Adam::new(opts.tagger_lr);
    opt.attach(&tape);
    for _epoch in 0..opts.tagger_epochs {
        for (mel, hot) in mels.iter().zip(&targets) {
            tape.reset();
            let std = frontend::standardize(mel);
            let logits = tagger.logits(&mut tape, &std)?;
            let loss = textguide::bce_loss(&mut tape, logits, hot)?;
            tape.backward(loss)?;
            opt.step(&mut tape)?;
        }
    }
    tape.reset();

    // Cache the tag distribution for every clip of every manifest.
    let mut out_manifests = Vec::with_capacity(manifests.len());
    for m in manifests {
        let mut updated = m.clone();
        for entry in &mut updated.entries {
            let clip = frontend::read_wav(&m.clip_path(entry))?;
            let mel = frontend::standardize(&frontend::extract_mel::<F>(&clip, fcfg)?);
            tape.reset();
            let dist = tagger.tag(&mut tape, &mel)?;
            entry.guide_probs = Some(dist.probs);
        }
        tape.reset();
        out_manifests.push(updated);
    }

    Ok((Prepared { vocab, labels: labels.clone(), manifests: out_manifests }, tape, tagger))
}

/// Persist just the tagger tensors (a plain tensor store).
pub fn save_tagger<F: Real>(dir: &Path, tape: &Tape<F>, tagger_dim: usize, n_labels: usize) -> Result<()> {
    let tensors: Vec<(String, &Tensor<F>)> = tape
        .params()
        .iter()
        .filter(|(name, _)| name.starts_with("tagger."))
        .map(|(name, id)| (name.clone(), tape.value(*id)))
        .collect();
    if tensors.is_empty() {
        return Err(Error::Contract("no tagger parameters on this tape".into()));
    }
    store::save(
        dir,
        &tensors,
        Some(serde_json::json!({ "tagger": { "dim": tagger_dim, "n_labels": n_labels } })),
    )
}

/// Read tagger dims from a saved tagger store.
pub fn tagger_dims(dir: &Path) -> Result<(usize, usize)> {
    let loaded = store::load::<f32>(dir)?;
    let cfg = loaded
        .config
        .as_ref()
        .and_then(|c| c.get("tagger"))
        .ok_or_else(|| Error::Checkpoint("tagger store has no tagger config".into()))?;
    let dim = cfg.get("dim").and_then(|v| v.as_u64()).unwrap_or(0) as usize;
    let n_labels = cfg.get("n_labels").and_then(|v| v.as_u64()).unwrap_or(0) as usize;
    if dim == 0 || n_labels == 0 {
        return Err(Error::Checkpoint("tagger store config incomplete".into()));
    }
    Ok((dim, n_labels))
}

/// Fill the `tagger.*` parameters of an existing tape from a tagger store.
pub fn load_tagger_params<F: Real>(dir: &Path, tape: &mut Tape<F>) -> Result<()> {
    let loaded = store::load::<F>(dir)?;
    let params: Vec<(String, crate::tape::TensorId)> = tape
        .params()
        .iter()
        .filter(|(name, _)| name.starts_with("tagger."))
        .cloned()
        .collect();
    if params.is_empty() {
        return Err(Error::Contract("tape has no tagger parameters to fill".into()));
    }
    for (name, id) in params {
        let tensor = loaded
            .get(&name)
            .ok_or_else(|| Error::Checkpoint(format!("tagger store missing {name:?}")))?;
        if tensor.shape() != tape.value(id).shape() {
            return Err(Error::Checkpoint(format!(
                "tagger tensor {name:?} has shape {:?}, expected {:?}",
                tensor.shape(),
                tape.value(id).shape()
            )));
        }
        *tape.value_mut(id) = tensor.clone();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::synth::{self, SynthOptions};

    #[test]
    fn prepare_caches_distributions_and_builds_vocab() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = synth::generate(
            dir.path(),
            &SynthOptions { n_clips: 6, captions_per_clip: 1, ..Default::default() },
        )
        .unwrap();
        let manifest = DatasetManifest::read(&corpus.train_manifest).unwrap();
        let labels = LabelVocabulary::from_lines(
            &std::fs::read_to_string(&corpus.labels_file).unwrap(),
        )
        .unwrap();
        let caps = textguide::read_embedding_file(&corpus.caption_embeddings).unwrap();
        let labs = textguide::read_embedding_file(&corpus.label_embeddings).unwrap();
        let fcfg = FrontendConfig::default();
        let opts = PrepareOptions { tagger_epochs: 2, ..Default::default() };

        let (prepared, tape, tagger) =
            prepare::<f32>(&[manifest], &labels, &caps, &labs, &fcfg, &opts).unwrap();
        assert!(prepared.vocab.len() > 4);
        for entry in &prepared.manifests[0].entries {
            let probs = entry.guide_probs.as_ref().expect("probs cached");
            assert_eq!(probs.len(), labels.len());
            let sum: f64 = probs.iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }

        // Tagger round-trips through its store.
        let tagger_dir = dir.path().join("tagger");
        save_tagger(&tagger_dir, &tape, tagger.cfg.dim, tagger.n_labels).unwrap();
        assert_eq!(tagger_dims(&tagger_dir).unwrap(), (32, labels.len()));
    }

    #[test]
    fn missing_caption_embedding_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = synth::generate(dir.path(), &SynthOptions { n_clips: 3, ..Default::default() })
            .unwrap();
        let manifest = DatasetManifest::read(&corpus.train_manifest).unwrap();
        let labels = LabelVocabulary::from_lines(
            &std::fs::read_to_string(&corpus.labels_file).unwrap(),
        )
        .unwrap();
        let labs = textguide::read_embedding_file(&corpus.label_embeddings).unwrap();
        // Deliberately empty caption embedding list.
        let caps = vec![SentenceEmbedding { source_text: "unrelated".into(), vector: vec![1.0; 16] }];
        let fcfg = FrontendConfig::default();
        let err = match prepare::<f32>(
            &[manifest],
            &labels,
            &caps,
            &labs,
            &fcfg,
            &PrepareOptions { tagger_epochs: 1, ..Default::default() },
        ) {
            Err(e) => e,
            Ok(_) => panic!("prepare should fail without caption embeddings"),
        };
        assert!(err.to_string().contains("no embedding for caption"), "{err}");
    }
}
