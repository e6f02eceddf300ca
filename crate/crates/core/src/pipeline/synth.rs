//! Synthetic corpus generator: procedural two-event clips with template
//! captions, a small label set, and deterministic pseudo sentence embeddings
//! so the whole prepare → train → eval pipeline runs without external data.

use crate::error::Result;
use crate::frontend::{write_wav, AudioClip};
use crate::pipeline::manifest::{DatasetManifest, ManifestEntry};
use crate::rng::{rng_from_seed, Rng};
use crate::textguide::SentenceEmbedding;
use rand::Rng as _;
use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

const SAMPLE_RATE: u32 = 32_000;
const EMBED_DIM: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Event {
    HighTone,
    LowTone,
    Static,
    Chirp,
    Silence,
}

const EVENTS: [Event; 5] =
    [Event::HighTone, Event::LowTone, Event::Static, Event::Chirp, Event::Silence];

impl Event {
    fn label(self) -> &'static str {
        match self {
            Event::HighTone => "high tone",
            Event::LowTone => "low tone",
            Event::Static => "static noise",
            Event::Chirp => "soft chirp",
            Event::Silence => "quiet silence",
        }
    }

    /// Caption fragment; shares words with the label so the pseudo-embedding
    /// pairing has real signal.
    fn fragment(self) -> &'static str {
        match self {
            Event::HighTone => "a high tone",
            Event::LowTone => "a low tone",
            Event::Static => "static noise",
            Event::Chirp => "a soft chirp",
            Event::Silence => "quiet silence",
        }
    }

    fn synthesize(self, n: usize, rng: &mut Rng) -> Vec<f32> {
        let two_pi = 2.0 * std::f64::consts::PI;
        match self {
            Event::HighTone => {
                let freq = rng.random_range(1200.0..2000.0);
                let amp = rng.random_range(0.4..0.6);
                (0..n)
                    .map(|i| (two_pi * freq * i as f64 / SAMPLE_RATE as f64).sin() as f32 * amp as f32)
                    .collect()
            }
            Event::LowTone => {
                let freq = rng.random_range(120.0..260.0);
                let amp = rng.random_range(0.4..0.6);
                (0..n)
                    .map(|i| (two_pi * freq * i as f64 / SAMPLE_RATE as f64).sin() as f32 * amp as f32)
                    .collect()
            }
            Event::Static => {
                let amp = rng.random_range(0.2..0.35);
                (0..n).map(|_| (rng.random::<f32>() * 2.0 - 1.0) * amp).collect()
            }
            Event::Chirp => {
                let f0 = rng.random_range(300.0..500.0);
                let f1 = rng.random_range(2000.0..3000.0);
                let amp = rng.random_range(0.35..0.55);
                (0..n)
                    .map(|i| {
                        let t = i as f64 / n as f64;
                        let freq = f0 + (f1 - f0) * t;
                        (two_pi * freq * i as f64 / SAMPLE_RATE as f64).sin() as f32 * amp as f32
                    })
                    .collect()
            }
            Event::Silence => (0..n).map(|_| (rng.random::<f32>() * 2.0 - 1.0) * 0.002).collect(),
        }
    }
}

const TEMPLATES: [&str; 3] = ["%A then %B", "%A followed by %B", "%A and then %B"];

fn caption_for(a: Event, b: Event, template: usize) -> String {
    TEMPLATES[template]
        .replace("%A", a.fragment())
        .replace("%B", b.fragment())
}

/// Stable FNV-1a hash; `DefaultHasher` is not guaranteed stable across
/// releases and these embeddings must reproduce bit-for-bit.
fn fnv1a(text: &str) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for b in text.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Deterministic pseudo sentence embedding: the normalized sum of per-word
/// hash-seeded Gaussian vectors. Shared words pull texts together, which is
/// all the pairing procedure needs.
pub fn pseudo_embedding(text: &str) -> SentenceEmbedding {
    let mut acc = vec![0.0f64; EMBED_DIM];
    for word in text.split_whitespace() {
        let mut rng = rng_from_seed(fnv1a(&word.to_lowercase()));
        for slot in acc.iter_mut() {
            use rand_distr::{Distribution, StandardNormal};
            let z: f64 = StandardNormal.sample(&mut rng);
            *slot += z;
        }
    }
    let norm = acc.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    SentenceEmbedding {
        source_text: text.to_string(),
        vector: acc.into_iter().map(|v| v / norm).collect(),
    }
}

#[derive(Debug, Clone)]
pub struct SynthOptions {
    pub n_clips: usize,
    pub val_clips: usize,
    pub captions_per_clip: usize,
    pub seed: u64,
    /// Per-event segment duration range in seconds.
    pub segment_secs: (f64, f64),
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            n_clips: 50,
            val_clips: 0,
            captions_per_clip: 1,
            seed: 7,
            segment_secs: (0.35, 0.55),
        }
    }
}

/// Paths of everything the generator wrote.
#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub train_manifest: PathBuf,
    pub val_manifest: Option<PathBuf>,
    pub labels_file: PathBuf,
    pub caption_embeddings: PathBuf,
    pub label_embeddings: PathBuf,
}

/// Generate WAVs, manifests, the label list and pseudo embedding files.
pub fn generate(out_dir: &Path, opts: &SynthOptions) -> Result<SynthCorpus> {
    std::fs::create_dir_all(out_dir.join("clips"))?;
    let mut rng = rng_from_seed(opts.seed);
    let captions_per_clip = opts.captions_per_clip.clamp(1, TEMPLATES.len());

    let total = opts.n_clips + opts.val_clips;
    let mut entries = Vec::with_capacity(total);
    let mut caption_texts = BTreeSet::new();
    for i in 0..total {
        let a = EVENTS[rng.random_range(0..EVENTS.len())];
        let b = EVENTS[rng.random_range(0..EVENTS.len())];
        let seg_a = (SAMPLE_RATE as f64 * rng.random_range(opts.segment_secs.0..opts.segment_secs.1))
            as usize;
        let seg_b = (SAMPLE_RATE as f64 * rng.random_range(opts.segment_secs.0..opts.segment_secs.1))
            as usize;
        let mut samples = a.synthesize(seg_a, &mut rng);
        samples.extend(b.synthesize(seg_b, &mut rng));
        let clip = AudioClip { samples, sample_rate: SAMPLE_RATE };
        let rel = format!("clips/clip_{i:04}.wav");
        write_wav(&out_dir.join(&rel), &clip)?;

        let captions: Vec<String> =
            (0..captions_per_clip).map(|t| caption_for(a, b, t)).collect();
        for c in &captions {
            caption_texts.insert(c.clone());
        }
        entries.push(ManifestEntry {
            clip: rel,
            captions,
            split: None,
            guide_probs: None,
            guide_labels: None,
        });
    }

    let (train_entries, val_entries) = {
        let mut train = entries;
        let val = train.split_off(opts.n_clips);
        (train, val)
    };
    let train_manifest = out_dir.join("train.jsonl");
    let mut train_m = DatasetManifest::new(train_entries, out_dir.to_path_buf())?;
    for e in &mut train_m.entries {
        e.split = Some("train".into());
    }
    train_m.write(&train_manifest)?;

    let val_manifest = if val_entries.is_empty() {
        None
    } else {
        let path = out_dir.join("val.jsonl");
        let mut val_m = DatasetManifest::new(val_entries, out_dir.to_path_buf())?;
        for e in &mut val_m.entries {
            e.split = Some("val".into());
        }
        val_m.write(&path)?;
        Some(path)
    };

    let labels_file = out_dir.join("labels.txt");
    let label_names: Vec<&str> = EVENTS.iter().map(|e| e.label()).collect();
    std::fs::write(&labels_file, label_names.join("\n") + "\n")?;

    let caption_embeddings = out_dir.join("captions.emb");
    let cap_embs: Vec<SentenceEmbedding> =
        caption_texts.iter().map(|c| pseudo_embedding(c)).collect();
    crate::textguide::write_embedding_file(&caption_embeddings, &cap_embs)?;

    let label_embeddings = out_dir.join("labels.emb");
    let lab_embs: Vec<SentenceEmbedding> =
        label_names.iter().map(|l| pseudo_embedding(l)).collect();
    crate::textguide::write_embedding_file(&label_embeddings, &lab_embs)?;

    Ok(SynthCorpus {
        train_manifest,
        val_manifest,
        labels_file,
        caption_embeddings,
        label_embeddings,
    })
}
