//! Caption metrics: BLEU-1..4, ROUGE-L and CIDEr.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::hash::Hash;

/// Scores of one evaluation run. BLEU and ROUGE-L live in [0,1]; CIDEr uses
/// its standard [0,10] scaling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub cider: f64,
}

impl std::fmt::Display for MetricReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "metric    score")?;
        writeln!(f, "BLEU-1    {:.4}", self.bleu1)?;
        writeln!(f, "BLEU-2    {:.4}", self.bleu2)?;
        writeln!(f, "BLEU-3    {:.4}", self.bleu3)?;
        writeln!(f, "BLEU-4    {:.4}", self.bleu4)?;
        writeln!(f, "ROUGE-L   {:.4}", self.rouge_l)?;
        write!(f, "CIDEr     {:.4}", self.cider)
    }
}

fn ngram_counts<T: Eq + Hash + Clone>(tokens: &[T], n: usize) -> HashMap<Vec<T>, u64> {
    let mut counts = HashMap::new();
    if tokens.len() >= n && n > 0 {
        for w in tokens.windows(n) {
            *counts.entry(w.to_vec()).or_insert(0) += 1;
        }
    }
    counts
}

// ── BLEU ────────────────────────────────────────────────────────────────

/// Corpus-style BLEU accumulator: clipped n-gram matches over orders 1..=4
/// plus candidate/effective-reference lengths for the brevity penalty.
pub struct BleuAccumulator<T> {
    clipped: [u64; 4],
    total: [u64; 4],
    cand_len: u64,
    ref_len: u64,
    _marker: std::marker::PhantomData<T>,
}

impl<T: Eq + Hash + Clone> Default for BleuAccumulator<T> {
    fn default() -> Self {
        Self {
            clipped: [0; 4],
            total: [0; 4],
            cand_len: 0,
            ref_len: 0,
            _marker: std::marker::PhantomData,
        }
    }
}

impl<T: Eq + Hash + Clone> BleuAccumulator<T> {
    pub fn push(&mut self, candidate: &[T], references: &[Vec<T>]) {
        self.cand_len += candidate.len() as u64;
        // Closest reference length; ties prefer the shorter reference.
        if let Some(closest) = references
            .iter()
            .map(|r| r.len())
            .min_by_key(|&rl| ((rl as i64 - candidate.len() as i64).abs(), rl))
        {
            self.ref_len += closest as u64;
        }
        for n in 1..=4usize {
            let cand = ngram_counts(candidate, n);
            let mut ref_max: HashMap<Vec<T>, u64> = HashMap::new();
            for r in references {
                for (gram, count) in ngram_counts(r, n) {
                    let slot = ref_max.entry(gram).or_insert(0);
                    *slot = (*slot).max(count);
                }
            }
            for (gram, count) in &cand {
                let clip = ref_max.get(gram).copied().unwrap_or(0);
                self.clipped[n - 1] += (*count).min(clip);
                self.total[n - 1] += *count;
            }
        }
    }

    /// BLEU-n: geometric mean of clipped precisions over orders 1..=n with
    /// the brevity penalty e^{1-r/c} when c < r.
    pub fn score(&self, n: usize) -> Result<f64> {
        if !(1..=4).contains(&n) {
            return Err(Error::InvalidConfig(format!("BLEU order {n} outside 1..=4")));
        }
        if self.cand_len == 0 {
            return Ok(0.0);
        }
        let mut log_sum = 0.0;
        for k in 0..n {
            if self.total[k] == 0 || self.clipped[k] == 0 {
                return Ok(0.0);
            }
            log_sum += (self.clipped[k] as f64 / self.total[k] as f64).ln() / n as f64;
        }
        let bp = if self.cand_len >= self.ref_len {
            1.0
        } else {
            (1.0 - self.ref_len as f64 / self.cand_len as f64).exp()
        };
        Ok(bp * log_sum.exp())
    }
}

/// Single-pair BLEU-n with corpus-style clipping and brevity penalty.
pub fn bleu_n<T: Eq + Hash + Clone>(candidate: &[T], references: &[Vec<T>], n: usize) -> Result<f64> {
    let mut acc = BleuAccumulator::default();
    acc.push(candidate, references);
    acc.score(n)
}

// ── ROUGE-L ─────────────────────────────────────────────────────────────

fn lcs_len<T: Eq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for ai in a {
        for (j, bj) in b.iter().enumerate() {
            cur[j + 1] = if ai == bj { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS-based F-measure with β = 1.2, maximized over the references.
pub fn rouge_l<T: Eq>(candidate: &[T], references: &[Vec<T>]) -> f64 {
    const BETA: f64 = 1.2;
    if candidate.is_empty() || references.is_empty() {
        return 0.0;
    }
    let mut best = 0.0f64;
    for r in references {
        if r.is_empty() {
            continue;
        }
        let lcs = lcs_len(candidate, r) as f64;
        if lcs == 0.0 {
            continue;
        }
        let p = lcs / candidate.len() as f64;
        let rec = lcs / r.len() as f64;
        let f = (1.0 + BETA * BETA) * p * rec / (rec + BETA * BETA * p);
        best = best.max(f);
    }
    best
}

// ── CIDEr ───────────────────────────────────────────────────────────────

/// Corpus CIDEr: tf-idf n-gram vectors (orders 1..=4), cosine similarity
/// averaged over references and orders, a Gaussian length penalty (σ = 6)
/// and the ×10 scaling. Document frequencies come from the reference sets
/// of the evaluation corpus itself.
pub struct CiderScorer<T> {
    items: Vec<(Vec<T>, Vec<Vec<T>>)>,
}

impl<T: Eq + Hash + Clone> Default for CiderScorer<T> {
    fn default() -> Self {
        Self { items: Vec::new() }
    }
}

impl<T: Eq + Hash + Clone> CiderScorer<T> {
    pub fn push(&mut self, candidate: Vec<T>, references: Vec<Vec<T>>) {
        self.items.push((candidate, references));
    }

    pub fn compute(&self) -> Result<f64> {
        const SIGMA: f64 = 6.0;
        if self.items.is_empty() {
            return Err(Error::InvalidConfig("CIDEr needs a nonempty corpus".into()));
        }
        let n_docs = self.items.len() as f64;
        // Document frequency: number of clips whose reference set contains
        // the n-gram.
        let mut df: [HashMap<Vec<T>, f64>; 4] = Default::default();
        for (_, refs) in &self.items {
            for n in 1..=4usize {
                let mut seen: HashMap<Vec<T>, ()> = HashMap::new();
                for r in refs {
                    for gram in ngram_counts(r, n).into_keys() {
                        seen.entry(gram).or_insert(());
                    }
                }
                for gram in seen.into_keys() {
                    *df[n - 1].entry(gram).or_insert(0.0) += 1.0;
                }
            }
        }
        // Smooth idf keeps weights strictly positive even when the corpus
        // is a single clip (plain ln(N/df) would zero every vector there).
        let idf = |order: usize, gram: &Vec<T>| -> f64 {
            let d = df[order - 1].get(gram).copied().unwrap_or(0.0);
            ((n_docs + 1.0) / (d + 1.0)).ln() + 1.0
        };

        let tfidf = |tokens: &[T], order: usize| -> HashMap<Vec<T>, f64> {
            ngram_counts(tokens, order)
                .into_iter()
                .map(|(g, c)| {
                    let w = c as f64 * idf(order, &g);
                    (g, w)
                })
                .collect()
        };
        let cos = |a: &HashMap<Vec<T>, f64>, b: &HashMap<Vec<T>, f64>| -> f64 {
            let dot: f64 = a
                .iter()
                .filter_map(|(g, w)| b.get(g).map(|u| w * u))
                .sum();
            let na: f64 = a.values().map(|w| w * w).sum::<f64>().sqrt();
            let nb: f64 = b.values().map(|w| w * w).sum::<f64>().sqrt();
            if na == 0.0 || nb == 0.0 {
                0.0
            } else {
                dot / (na * nb)
            }
        };

        let mut total = 0.0;
        for (cand, refs) in &self.items {
            if refs.is_empty() {
                return Err(Error::InvalidConfig("CIDEr entry without references".into()));
            }
            let cand_vecs: Vec<HashMap<Vec<T>, f64>> =
                (1..=4).map(|n| tfidf(cand, n)).collect();
            let mut item = 0.0;
            for r in refs {
                let delta = cand.len() as f64 - r.len() as f64;
                let penalty = (-delta * delta / (2.0 * SIGMA * SIGMA)).exp();
                let mut mean_orders = 0.0;
                for n in 1..=4usize {
                    mean_orders += cos(&cand_vecs[n - 1], &tfidf(r, n)) / 4.0;
                }
                item += penalty * mean_orders;
            }
            total += 10.0 * item / refs.len() as f64;
        }
        Ok(total / n_docs)
    }
}

/// All metrics over an evaluation corpus of (candidate, references) pairs.
pub fn evaluate_corpus(items: &[(Vec<String>, Vec<Vec<String>>)]) -> Result<MetricReport> {
    if items.is_empty() {
        return Err(Error::InvalidInput("nothing to evaluate".into()));
    }
    let mut bleu = BleuAccumulator::default();
    let mut cider = CiderScorer::default();
    let mut rouge_sum = 0.0;
    for (cand, refs) in items {
        bleu.push(cand, refs);
        rouge_sum += rouge_l(cand, refs);
        cider.push(cand.clone(), refs.clone());
    }
    Ok(MetricReport {
        bleu1: bleu.score(1)?,
        bleu2: bleu.score(2)?,
        bleu3: bleu.score(3)?,
        bleu4: bleu.score(4)?,
        rouge_l: rouge_sum / items.len() as f64,
        cider: cider.compute()?,
    })
}
