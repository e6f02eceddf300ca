//! Guiding text: nucleus-sample a tag label at train time, argmax at
//! inference, embed its words into the encoder input space, plus the
//! label-caption pairing used to fine-tune the tagger.

use crate::error::{Error, Result};
use crate::frontend::MelSpectrogram;
use crate::patchout::{self, PatchEmbed, PatchoutConfig};
use crate::real::Real;
use crate::rng::Rng;
use crate::tape::{Tape, TensorId};
use crate::tensor::Tensor;
use std::path::Path;

/// Flat list of multi-word class names.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVocabulary {
    labels: Vec<String>,
}

impl LabelVocabulary {
    pub fn new(labels: Vec<String>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::InvalidInput("label vocabulary is empty".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for l in &labels {
            if !seen.insert(l.as_str()) {
                return Err(Error::InvalidInput(format!("duplicate label {l:?}")));
            }
        }
        Ok(Self { labels })
    }

    pub fn from_lines(text: &str) -> Result<Self> {
        Self::new(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(str::to_string)
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn name(&self, index: usize) -> &str {
        &self.labels[index]
    }

    pub fn names(&self) -> &[String] {
        &self.labels
    }
}

/// Normalized probabilities over the label set.
#[derive(Debug, Clone, PartialEq)]
pub struct TagDistribution {
    pub probs: Vec<f64>,
}

impl TagDistribution {
    /// Normalize multi-label sigmoid scores into a sampling distribution.
    pub fn from_scores(scores: &[f64]) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::InvalidInput("empty score vector".into()));
        }
        if scores.iter().any(|&s| s < 0.0 || !s.is_finite()) {
            return Err(Error::InvalidInput("scores must be finite and nonnegative".into()));
        }
        let total: f64 = scores.iter().sum();
        if total <= 0.0 {
            return Err(Error::InvalidInput("all-zero score vector".into()));
        }
        Ok(Self { probs: scores.iter().map(|s| s / total).collect() })
    }
}

/// Sentence embedding ingested from an external encoder.
#[derive(Debug, Clone)]
pub struct SentenceEmbedding {
    pub source_text: String,
    pub vector: Vec<f64>,
}

/// Token ids of the selected label's words, ready for the encoder.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GuidingText {
    pub token_ids: Vec<usize>,
    pub label_indices: Vec<usize>,
}

// ── Label selection ─────────────────────────────────────────────────────

/// Indices of the nucleus: the smallest probability-sorted prefix whose
/// cumulative mass reaches p. Ties in probability are broken by index so the
/// nucleus is deterministic.
pub fn nucleus(dist: &TagDistribution, p: f64) -> Result<Vec<usize>> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::InvalidConfig(format!("top-p {p} outside (0, 1]")));
    }
    if dist.probs.is_empty() || dist.probs.iter().all(|&q| q == 0.0) {
        return Err(Error::InvalidInput("degenerate all-zero distribution".into()));
    }
    let mut order: Vec<usize> = (0..dist.probs.len()).collect();
    order.sort_by(|&a, &b| {
        dist.probs[b].partial_cmp(&dist.probs[a]).unwrap().then(a.cmp(&b))
    });
    let mut cum = 0.0;
    let mut keep = Vec::new();
    for &i in &order {
        keep.push(i);
        cum += dist.probs[i];
        if cum >= p - 1e-12 {
            break;
        }
    }
    Ok(keep)
}

/// Nucleus (top-p) sampling: renormalize within the nucleus and draw.
/// Labels outside the nucleus have probability exactly zero.
pub fn nucleus_sample(dist: &TagDistribution, p: f64, rng: &mut Rng) -> Result<usize> {
    use rand::Rng as _;
    let keep = nucleus(dist, p)?;
    let mass: f64 = keep.iter().map(|&i| dist.probs[i]).sum();
    let mut dart = rng.random::<f64>() * mass;
    for &i in &keep {
        dart -= dist.probs[i];
        if dart <= 0.0 {
            return Ok(i);
        }
    }
    Ok(*keep.last().unwrap())
}

/// Most probable label; ties break to the lowest index.
pub fn argmax_label(dist: &TagDistribution) -> Result<usize> {
    if dist.probs.is_empty() {
        return Err(Error::InvalidInput("empty distribution".into()));
    }
    let mut best = 0;
    for i in 1..dist.probs.len() {
        if dist.probs[i] > dist.probs[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Top-k distinct labels by probability (inference-side counterpart of
/// sampling k labels), ties to the lowest index.
pub fn top_k_labels(dist: &TagDistribution, k: usize) -> Result<Vec<usize>> {
    if dist.probs.is_empty() {
        return Err(Error::InvalidInput("empty distribution".into()));
    }
    let mut order: Vec<usize> = (0..dist.probs.len()).collect();
    order.sort_by(|&a, &b| {
        dist.probs[b].partial_cmp(&dist.probs[a]).unwrap().then(a.cmp(&b))
    });
    order.truncate(k.max(1).min(dist.probs.len()));
    Ok(order)
}

// ── Label-caption pairing ───────────────────────────────────────────────

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn cosine(u: &[f64], v: &[f64]) -> f64 {
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    dot / (norm(u) * norm(v))
}

/// For each caption, the label with the highest cosine similarity.
/// Returns `(caption_index, label_index, cosine)` triples.
pub fn pair_labels(
    captions: &[SentenceEmbedding],
    labels: &[SentenceEmbedding],
) -> Result<Vec<(usize, usize, f64)>> {
    if captions.is_empty() || labels.is_empty() {
        return Err(Error::InvalidInput("pairing needs captions and labels".into()));
    }
    let dim = captions[0].vector.len();
    for e in captions.iter().chain(labels) {
        if e.vector.len() != dim {
            return Err(Error::InvalidInput(format!(
                "embedding for {:?} has dimension {}, expected {dim}",
                e.source_text,
                e.vector.len()
            )));
        }
        if norm(&e.vector) == 0.0 {
            return Err(Error::InvalidInput(format!(
                "zero-norm embedding for {:?}",
                e.source_text
            )));
        }
    }
    let mut pairs = Vec::with_capacity(captions.len());
    for (ci, cap) in captions.iter().enumerate() {
        let mut best = (0usize, f64::NEG_INFINITY);
        for (li, lab) in labels.iter().enumerate() {
            let sim = cosine(&cap.vector, &lab.vector);
            if sim > best.1 {
                best = (li, sim);
            }
        }
        pairs.push((ci, best.0, best.1));
    }
    Ok(pairs)
}

/// Parse an embedding file: one `<text>\t<v1> <v2> ... <vD>` line per entry.
pub fn read_embedding_file(path: &Path) -> Result<Vec<SentenceEmbedding>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::InvalidInput(format!("cannot read {}: {e}", path.display())))?;
    parse_embeddings(&text).map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))
}

pub fn parse_embeddings(text: &str) -> std::result::Result<Vec<SentenceEmbedding>, String> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (name, rest) = line
            .split_once('\t')
            .ok_or_else(|| format!("line {}: missing tab separator", lineno + 1))?;
        let vector: Vec<f64> = rest
            .split_whitespace()
            .map(|tok| tok.parse::<f64>().map_err(|e| format!("line {}: {e}", lineno + 1)))
            .collect::<std::result::Result<_, _>>()?;
        if vector.is_empty() {
            return Err(format!("line {}: empty vector", lineno + 1));
        }
        out.push(SentenceEmbedding { source_text: name.to_string(), vector });
    }
    if out.is_empty() {
        return Err("no embeddings found".into());
    }
    Ok(out)
}

pub fn write_embedding_file(path: &Path, entries: &[SentenceEmbedding]) -> Result<()> {
    use std::fmt::Write as _;
    let mut text = String::new();
    for e in entries {
        write!(text, "{}\t", e.source_text).unwrap();
        for (i, v) in e.vector.iter().enumerate() {
            if i > 0 {
                text.push(' ');
            }
            write!(text, "{v}").unwrap();
        }
        text.push('\n');
    }
    std::fs::write(path, text)?;
    Ok(())
}

// ── Guiding-text embedding ──────────────────────────────────────────────

/// Tokenize the selected labels with the caption rules and resolve each word
/// in the caption vocabulary; out-of-vocabulary words collapse onto `<UNK>`.
pub fn guiding_token_ids(
    label_indices: &[usize],
    labels: &LabelVocabulary,
    vocab: &crate::pipeline::Vocabulary,
) -> Result<GuidingText> {
    if label_indices.is_empty() {
        return Err(Error::InvalidInput("no labels selected".into()));
    }
    let mut token_ids = Vec::new();
    for &li in label_indices {
        if li >= labels.len() {
            return Err(Error::InvalidInput(format!("label index {li} out of range")));
        }
        let words = crate::pipeline::tokenize(labels.name(li))?;
        for w in words {
            token_ids.push(vocab.id_of(&w));
        }
    }
    Ok(GuidingText { token_ids, label_indices: label_indices.to_vec() })
}

/// Gather the guiding-text embedding rows from the trainable table: `[W × d]`.
pub fn embed_guiding_text<F: Real>(
    tape: &mut Tape<F>,
    table: TensorId,
    guide: &GuidingText,
) -> Result<TensorId> {
    tape.gather_rows(table, &guide.token_ids)
}

// ── Desk-scale tagger ───────────────────────────────────────────────────

/// Anything that turns a mel spectrogram into a tag distribution.
pub trait Tagger<F: Real> {
    fn tag(&self, tape: &mut Tape<F>, mel: &MelSpectrogram<F>) -> Result<TagDistribution>;
}

/// Tiny trainable tagger: patch conv → mean-pooled features → linear layer,
/// trained with BCE against paired labels. Structurally mirrors fine-tuning
/// a large pretrained tagger, without the scale.
pub struct DeskTagger {
    pub patch: PatchEmbed,
    pub proj_w: TensorId,
    pub proj_b: TensorId,
    pub cfg: PatchoutConfig,
    pub n_labels: usize,
}

impl DeskTagger {
    pub fn init<F: Real>(
        tape: &mut Tape<F>,
        dim: usize,
        n_labels: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let cfg = PatchoutConfig { dim, p_f: 0, p_t: 0, ..PatchoutConfig::default() };
        let patch = PatchEmbed::init(tape, "tagger", &cfg, rng)?;
        let proj_w = tape.param(
            "tagger.proj.weight",
            Tensor::randn(vec![dim, n_labels], (1.0 / dim as f64).sqrt(), rng),
        )?;
        let proj_b = tape.param("tagger.proj.bias", Tensor::zeros(vec![n_labels]))?;
        Ok(Self { patch, proj_w, proj_b, cfg, n_labels })
    }

    /// Logits over the label set for one (standardized) clip.
    pub fn logits<F: Real>(&self, tape: &mut Tape<F>, mel: &MelSpectrogram<F>) -> Result<TensorId> {
        let map = patchout::extract_feature_map(tape, mel, &self.patch, &self.cfg)?;
        let seq = patchout::flatten_eval(tape, map)?;
        let pooled = tape.mean_rows(seq.tokens)?;
        let proj = tape.matmul(pooled, self.proj_w)?;
        tape.add_row_bias(proj, self.proj_b)
    }

    /// Parameter ids, for freezing after the fine-tune step.
    pub fn param_ids(&self) -> [TensorId; 4] {
        [self.patch.kernels, self.patch.bias, self.proj_w, self.proj_b]
    }
}

impl<F: Real> Tagger<F> for DeskTagger {
    fn tag(&self, tape: &mut Tape<F>, mel: &MelSpectrogram<F>) -> Result<TagDistribution> {
        let logits = self.logits(tape, mel)?;
        let scores: Vec<f64> = tape
            .value(logits)
            .data()
            .iter()
            .map(|&z| 1.0 / (1.0 + (-z.as_f64()).exp()))
            .collect();
        TagDistribution::from_scores(&scores)
    }
}

/// Mean BCE between label logits and a multi-hot target, on the tape.
pub fn bce_loss<F: Real>(tape: &mut Tape<F>, logits: TensorId, target: &[bool]) -> Result<TensorId> {
    let target: Vec<F> = target.iter().map(|&y| if y { F::one() } else { F::zero() }).collect();
    tape.bce_mean(logits, &target)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    fn dist(probs: &[f64]) -> TagDistribution {
        TagDistribution { probs: probs.to_vec() }
    }

    #[test]
    fn nucleus_of_reference_distribution() {
        let d = dist(&[0.5, 0.3, 0.15, 0.05]);
        assert_eq!(nucleus(&d, 0.7).unwrap(), vec![0, 1]);
        assert_eq!(nucleus(&d, 1.0).unwrap(), vec![0, 1, 2, 3]);
    }

    #[test]
    fn nucleus_sampling_frequencies_match_renormalized_probs() {
        let d = dist(&[0.5, 0.3, 0.15, 0.05]);
        let mut rng = rng_from_seed(1);
        let mut counts = [0usize; 4];
        let draws = 100_000;
        for _ in 0..draws {
            counts[nucleus_sample(&d, 0.7, &mut rng).unwrap()] += 1;
        }
        let freq: Vec<f64> = counts.iter().map(|&c| c as f64 / draws as f64).collect();
        assert!((freq[0] - 0.625).abs() < 0.01, "{freq:?}");
        assert!((freq[1] - 0.375).abs() < 0.01, "{freq:?}");
        assert_eq!(counts[2], 0);
        assert_eq!(counts[3], 0);
    }

    #[test]
    fn one_hot_distribution_always_wins() {
        let d = dist(&[0.0, 1.0, 0.0]);
        let mut rng = rng_from_seed(2);
        for p in [0.1, 0.5, 1.0] {
            for _ in 0..100 {
                assert_eq!(nucleus_sample(&d, p, &mut rng).unwrap(), 1);
            }
        }
    }

    #[test]
    fn p_one_samples_the_full_support() {
        let d = dist(&[0.25, 0.25, 0.25, 0.25]);
        let mut rng = rng_from_seed(3);
        let mut seen = [false; 4];
        for _ in 0..1000 {
            seen[nucleus_sample(&d, 1.0, &mut rng).unwrap()] = true;
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn nucleus_is_monotone_in_p() {
        let mut rng = rng_from_seed(4);
        use rand::Rng as _;
        for _ in 0..200 {
            let n = rng.random_range(2..12usize);
            let raw: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + 1e-3).collect();
            let d = TagDistribution::from_scores(&raw).unwrap();
            let p1: f64 = rng.random_range(0.05..1.0);
            let p2: f64 = rng.random_range(p1..=1.0);
            let n1: std::collections::HashSet<_> = nucleus(&d, p1).unwrap().into_iter().collect();
            let n2: std::collections::HashSet<_> = nucleus(&d, p2).unwrap().into_iter().collect();
            assert!(n1.is_subset(&n2), "p1={p1} p2={p2}");
        }
    }

    #[test]
    fn degenerate_distribution_is_an_error() {
        assert!(TagDistribution::from_scores(&[0.0, 0.0]).is_err());
        let d = dist(&[0.0, 0.0]);
        let mut rng = rng_from_seed(5);
        assert!(nucleus_sample(&d, 0.9, &mut rng).is_err());
    }

    #[test]
    fn argmax_basic_and_tie_break() {
        assert_eq!(argmax_label(&dist(&[0.1, 0.8, 0.1])).unwrap(), 1);
        assert_eq!(argmax_label(&dist(&[0.4, 0.4, 0.2])).unwrap(), 0);
    }

    #[test]
    fn argmax_invariant_under_monotone_transforms() {
        let mut rng = rng_from_seed(6);
        use rand::Rng as _;
        for _ in 0..100 {
            let n = rng.random_range(2..10usize);
            let probs: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
            let d = dist(&probs);
            let a = rng.random_range(0.5..3.0);
            let b = rng.random_range(0.0..2.0);
            // Strictly monotone maps x → a·x + b and x → eˣ.
            let lin = dist(&probs.iter().map(|&x| a * x + b).collect::<Vec<_>>());
            let exp = dist(&probs.iter().map(|&x| x.exp()).collect::<Vec<_>>());
            let want = argmax_label(&d).unwrap();
            assert_eq!(argmax_label(&lin).unwrap(), want);
            assert_eq!(argmax_label(&exp).unwrap(), want);
        }
    }

    fn emb(text: &str, v: &[f64]) -> SentenceEmbedding {
        SentenceEmbedding { source_text: text.into(), vector: v.to_vec() }
    }

    #[test]
    fn pairing_picks_the_aligned_axis() {
        let labels = vec![
            emb("l0", &[1.0, 0.0, 0.0]),
            emb("l1", &[0.0, 1.0, 0.0]),
            emb("l2", &[0.0, 0.0, 1.0]),
        ];
        let captions = vec![emb("c", &[0.0, 1.0, 0.0]), emb("c5", &[0.0, 5.0, 0.0])];
        let pairs = pair_labels(&captions, &labels).unwrap();
        // Both captions map to label 1; scaling by 5 changes nothing.
        assert_eq!(pairs[0].1, 1);
        assert_eq!(pairs[1].1, 1);
        assert!((pairs[0].2 - 1.0).abs() < 1e-12);
        assert!((pairs[1].2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pairing_matches_brute_force_on_random_embeddings() {
        let mut rng = rng_from_seed(7);
        use rand::Rng as _;
        let captions: Vec<SentenceEmbedding> = (0..20)
            .map(|i| {
                let v: Vec<f64> = (0..8).map(|_| rng.random::<f64>() - 0.5).collect();
                emb(&format!("c{i}"), &v)
            })
            .collect();
        let labels: Vec<SentenceEmbedding> = (0..10)
            .map(|i| {
                let v: Vec<f64> = (0..8).map(|_| rng.random::<f64>() - 0.5).collect();
                emb(&format!("l{i}"), &v)
            })
            .collect();
        let pairs = pair_labels(&captions, &labels).unwrap();
        for (ci, li, sim) in pairs {
            // Exhaustive double loop, recomputed from scratch.
            let mut best = (0usize, f64::NEG_INFINITY);
            for (j, lab) in labels.iter().enumerate() {
                let dot: f64 =
                    captions[ci].vector.iter().zip(&lab.vector).map(|(a, b)| a * b).sum();
                let nc = captions[ci].vector.iter().map(|x| x * x).sum::<f64>().sqrt();
                let nl = lab.vector.iter().map(|x| x * x).sum::<f64>().sqrt();
                let s = dot / (nc * nl);
                if s > best.1 {
                    best = (j, s);
                }
            }
            assert_eq!(li, best.0);
            assert!((sim - best.1).abs() < 1e-12);
        }
    }

    #[test]
    fn pairing_is_scale_invariant() {
        let mut rng = rng_from_seed(8);
        use rand::Rng as _;
        let captions: Vec<SentenceEmbedding> = (0..5)
            .map(|i| {
                let v: Vec<f64> = (0..6).map(|_| rng.random::<f64>() - 0.5).collect();
                emb(&format!("c{i}"), &v)
            })
            .collect();
        let labels: Vec<SentenceEmbedding> = (0..4)
            .map(|i| {
                let v: Vec<f64> = (0..6).map(|_| rng.random::<f64>() - 0.5).collect();
                emb(&format!("l{i}"), &v)
            })
            .collect();
        let base = pair_labels(&captions, &labels).unwrap();
        let scaled_caps: Vec<SentenceEmbedding> = captions
            .iter()
            .map(|e| emb(&e.source_text, &e.vector.iter().map(|v| v * 7.3).collect::<Vec<_>>()))
            .collect();
        let scaled = pair_labels(&scaled_caps, &labels).unwrap();
        for (a, b) in base.iter().zip(&scaled) {
            assert_eq!(a.1, b.1);
        }
    }

    #[test]
    fn zero_norm_embedding_names_the_offender() {
        let captions = vec![emb("fine", &[1.0, 0.0]), emb("broken one", &[0.0, 0.0])];
        let labels = vec![emb("l", &[1.0, 1.0])];
        let err = pair_labels(&captions, &labels).unwrap_err();
        assert!(err.to_string().contains("broken one"), "{err}");
    }

    #[test]
    fn embedding_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.emb");
        let entries = vec![emb("water drops", &[0.5, -1.25, 3.0]), emb("birds", &[1.0, 2.0, 3.0])];
        write_embedding_file(&path, &entries).unwrap();
        let back = read_embedding_file(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].source_text, "water drops");
        assert_eq!(back[0].vector, vec![0.5, -1.25, 3.0]);
    }

    #[test]
    fn bce_at_zero_logits_is_ln2() {
        let mut tape = Tape::<f64>::new();
        let z = tape.leaf(Tensor::zeros(vec![4]), false);
        let loss = bce_loss(&mut tape, z, &[true, false, true, false]).unwrap();
        assert!((tape.value(loss).data()[0] - (2.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn bce_saturates_toward_zero() {
        let mut tape = Tape::<f64>::new();
        let z = tape.leaf(Tensor::from_f64_slice(vec![2], &[20.0, -20.0]).unwrap(), false);
        let loss = bce_loss(&mut tape, z, &[true, false]).unwrap();
        assert!(tape.value(loss).data()[0] < 1e-8);
    }

    #[test]
    fn bce_is_nonnegative() {
        let mut rng = rng_from_seed(9);
        use rand::Rng as _;
        for _ in 0..100 {
            let mut tape = Tape::<f64>::new();
            let z = tape.leaf(Tensor::randn(vec![6], 3.0, &mut rng), false);
            let target: Vec<bool> = (0..6).map(|_| rng.random::<bool>()).collect();
            let loss = bce_loss(&mut tape, z, &target).unwrap();
            assert!(tape.value(loss).data()[0] >= 0.0);
        }
    }
}
