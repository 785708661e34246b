//! Automatic evaluation: corpus BLEU-1/2/3, ROUGE-L, CIDEr, Distinct-1/2,
//! avgLen, plus per-sample scores retained for paired significance tests.
//! All metrics are pure functions of their inputs.

mod stats;

pub use stats::{
    one_sample_t_test, paired_t_test, significance_mark, students_t_two_sided_p, TTest,
};

use std::collections::{HashMap, HashSet};

use serde::Serialize;

use crate::error::{Error, Result};

/// One hypothesis/reference pair, tokenized exactly like the training data
/// (whitespace split).
#[derive(Debug, Clone)]
pub struct EvalPair {
    pub index: usize,
    pub hypothesis: Vec<String>,
    pub reference: Vec<String>,
}

impl EvalPair {
    pub fn from_text(index: usize, hypothesis: &str, reference: &str) -> Self {
        EvalPair {
            index,
            hypothesis: tokenize(hypothesis),
            reference: tokenize(reference),
        }
    }
}

pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(|t| t.to_string()).collect()
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts: HashMap<&[String], usize> = HashMap::new();
    if tokens.len() >= n && n > 0 {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus-level BLEU-n: geometric mean of modified k-gram precisions for
/// k = 1..n under the brevity penalty, unsmoothed, reported ×100.
pub fn bleu_n(pairs: &[EvalPair], n: usize) -> Result<f64> {
    if !(1..=4).contains(&n) {
        return Err(Error::Config(format!(
            "BLEU order {n} unsupported (use 1..=4)"
        )));
    }
    if pairs.is_empty() {
        return Err(Error::Data("empty hypothesis set".into()));
    }
    let mut log_sum = 0.0;
    for k in 1..=n {
        let mut matches = 0usize;
        let mut total = 0usize;
        for pair in pairs {
            let hyp = ngram_counts(&pair.hypothesis, k);
            let refc = ngram_counts(&pair.reference, k);
            for (gram, &count) in &hyp {
                matches += count.min(refc.get(gram).copied().unwrap_or(0));
            }
            total += pair.hypothesis.len().saturating_sub(k - 1);
        }
        if matches == 0 || total == 0 {
            return Ok(0.0);
        }
        log_sum += (matches as f64 / total as f64).ln();
    }
    let hyp_len: usize = pairs.iter().map(|p| p.hypothesis.len()).sum();
    let ref_len: usize = pairs.iter().map(|p| p.reference.len()).sum();
    let bp = brevity_penalty(hyp_len, ref_len);
    Ok(100.0 * bp * (log_sum / n as f64).exp())
}

fn brevity_penalty(hyp_len: usize, ref_len: usize) -> f64 {
    if hyp_len == 0 {
        0.0
    } else if hyp_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    }
}

/// Sentence-level BLEU-n with add-one smoothing on every precision order
/// (used for significance testing; corpus BLEU stays unsmoothed).
pub fn sentence_bleu(hypothesis: &[String], reference: &[String], n: usize) -> f64 {
    if hypothesis.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for k in 1..=n {
        let hyp = ngram_counts(hypothesis, k);
        let refc = ngram_counts(reference, k);
        let mut matches = 0usize;
        for (gram, &count) in &hyp {
            matches += count.min(refc.get(gram).copied().unwrap_or(0));
        }
        let total = hypothesis.len().saturating_sub(k - 1);
        log_sum += ((matches + 1) as f64 / (total + 1) as f64).ln();
    }
    100.0 * brevity_penalty(hypothesis.len(), reference.len()) * (log_sum / n as f64).exp()
}

fn lcs_length(a: &[String], b: &[String]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for ai in a {
        for (j, bj) in b.iter().enumerate() {
            cur[j + 1] = if ai == bj {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L β²-weighted F-measure for one pair (β = 1.2, the reference
/// toolkit's constant): F = (1+β²)RP / (R + β²P) with R, P from the LCS.
pub fn rouge_l_pair(hypothesis: &[String], reference: &[String]) -> f64 {
    const BETA: f64 = 1.2;
    let lcs = lcs_length(hypothesis, reference) as f64;
    if lcs == 0.0 {
        return 0.0;
    }
    let p = lcs / hypothesis.len() as f64;
    let r = lcs / reference.len() as f64;
    (1.0 + BETA * BETA) * r * p / (r + BETA * BETA * p)
}

/// Mean per-pair ROUGE-L F-measure.
pub fn rouge_l(pairs: &[EvalPair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Data("empty hypothesis set".into()));
    }
    Ok(pairs
        .iter()
        .map(|p| rouge_l_pair(&p.hypothesis, &p.reference))
        .sum::<f64>()
        / pairs.len() as f64)
}

#[derive(Debug, Clone, Copy, Default)]
pub struct CiderOptions {
    /// CIDEr-D's Gaussian length penalty (σ = 6); plain CIDEr leaves it off.
    pub length_penalty: bool,
}

/// Per-pair CIDEr: mean over n = 1..4 of the cosine between tf-idf-weighted
/// n-gram vectors of hypothesis and reference, idf from the reference
/// corpus, ×10.
pub fn cider_per_pair(pairs: &[EvalPair], opts: CiderOptions) -> Result<Vec<f64>> {
    if pairs.len() < 2 {
        return Err(Error::Data(
            "CIDEr needs at least 2 pairs: idf requires a document-frequency base".into(),
        ));
    }
    const MAX_N: usize = 4;
    let n_docs = pairs.len() as f64;

    // Document frequency of each n-gram over the reference corpus.
    let mut df: Vec<HashMap<&[String], usize>> = vec![HashMap::new(); MAX_N];
    for pair in pairs {
        for (k, dfk) in df.iter_mut().enumerate() {
            let uniq: HashSet<&[String]> = if pair.reference.len() > k {
                pair.reference.windows(k + 1).collect()
            } else {
                HashSet::new()
            };
            for gram in uniq {
                *dfk.entry(gram).or_insert(0) += 1;
            }
        }
    }
    let idf = |k: usize, gram: &[String]| -> f64 {
        let d = df[k].get(gram).copied().unwrap_or(0).max(1) as f64;
        (n_docs / d).ln()
    };

    let mut scores = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let mut pair_score = 0.0;
        for k in 0..MAX_N {
            let hyp = ngram_counts(&pair.hypothesis, k + 1);
            let refc = ngram_counts(&pair.reference, k + 1);
            let mut dot = 0.0;
            let mut h_norm = 0.0;
            let mut r_norm = 0.0;
            for (gram, &count) in &hyp {
                let w = count as f64 * idf(k, gram);
                h_norm += w * w;
                if let Some(&rc) = refc.get(gram) {
                    dot += w * rc as f64 * idf(k, gram);
                }
            }
            for (gram, &count) in &refc {
                let w = count as f64 * idf(k, gram);
                r_norm += w * w;
            }
            if h_norm > 0.0 && r_norm > 0.0 {
                let mut cos = dot / (h_norm.sqrt() * r_norm.sqrt());
                if opts.length_penalty {
                    let delta = pair.hypothesis.len() as f64 - pair.reference.len() as f64;
                    cos *= (-delta * delta / (2.0 * 36.0)).exp();
                }
                pair_score += cos;
            }
        }
        scores.push(10.0 * pair_score / MAX_N as f64);
    }
    Ok(scores)
}

pub fn cider(pairs: &[EvalPair], opts: CiderOptions) -> Result<f64> {
    let per_pair = cider_per_pair(pairs, opts)?;
    Ok(per_pair.iter().sum::<f64>() / per_pair.len() as f64)
}

/// Corpus Distinct-n: unique n-grams across all hypotheses divided by the
/// total n-gram count. Zero total yields 0 with a warning.
pub fn distinct_n(hypotheses: &[Vec<String>], n: usize) -> f64 {
    let mut seen: HashSet<&[String]> = HashSet::new();
    let mut total = 0usize;
    for hyp in hypotheses {
        if hyp.len() >= n && n > 0 {
            for w in hyp.windows(n) {
                seen.insert(w);
                total += 1;
            }
        }
    }
    if total == 0 {
        eprintln!("warning: distinct-{n}: no n-grams in the hypothesis set; reporting 0");
        return 0.0;
    }
    seen.len() as f64 / total as f64
}

/// Within-hypothesis distinct ratio, the per-sample stand-in used only for
/// significance testing on the Distinct columns.
pub fn distinct_n_single(hypothesis: &[String], n: usize) -> f64 {
    if hypothesis.len() < n || n == 0 {
        return 0.0;
    }
    let total = hypothesis.len() - n + 1;
    let uniq: HashSet<&[String]> = hypothesis.windows(n).collect();
    uniq.len() as f64 / total as f64
}

pub fn avg_len(hypotheses: &[Vec<String>]) -> f64 {
    if hypotheses.is_empty() {
        return 0.0;
    }
    hypotheses.iter().map(|h| h.len() as f64).sum::<f64>() / hypotheses.len() as f64
}

/// Per-sample sentence-level scores kept for paired t-tests between systems.
#[derive(Debug, Clone, Serialize)]
pub struct PerSampleScores {
    pub bleu1: Vec<f64>,
    pub bleu2: Vec<f64>,
    pub bleu3: Vec<f64>,
    pub rouge_l: Vec<f64>,
    pub cider: Vec<f64>,
    pub dist1: Vec<f64>,
    pub dist2: Vec<f64>,
    pub length: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub n_pairs: usize,
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub rouge_l: f64,
    pub cider: f64,
    pub dist1: f64,
    pub dist2: f64,
    pub avg_len: f64,
    pub per_sample: PerSampleScores,
}

/// Full evaluation of aligned pairs: corpus metrics plus retained
/// per-sample scores.
pub fn evaluate(pairs: &[EvalPair]) -> Result<EvalReport> {
    if pairs.is_empty() {
        return Err(Error::Data("empty hypothesis set".into()));
    }
    let hyps: Vec<Vec<String>> = pairs.iter().map(|p| p.hypothesis.clone()).collect();
    let cider_scores = cider_per_pair(pairs, CiderOptions::default())?;
    let per_sample = PerSampleScores {
        bleu1: pairs
            .iter()
            .map(|p| sentence_bleu(&p.hypothesis, &p.reference, 1))
            .collect(),
        bleu2: pairs
            .iter()
            .map(|p| sentence_bleu(&p.hypothesis, &p.reference, 2))
            .collect(),
        bleu3: pairs
            .iter()
            .map(|p| sentence_bleu(&p.hypothesis, &p.reference, 3))
            .collect(),
        rouge_l: pairs
            .iter()
            .map(|p| rouge_l_pair(&p.hypothesis, &p.reference))
            .collect(),
        cider: cider_scores.clone(),
        dist1: hyps.iter().map(|h| distinct_n_single(h, 1)).collect(),
        dist2: hyps.iter().map(|h| distinct_n_single(h, 2)).collect(),
        length: hyps.iter().map(|h| h.len() as f64).collect(),
    };
    Ok(EvalReport {
        n_pairs: pairs.len(),
        bleu1: bleu_n(pairs, 1)?,
        bleu2: bleu_n(pairs, 2)?,
        bleu3: bleu_n(pairs, 3)?,
        rouge_l: rouge_l(pairs)?,
        cider: cider_scores.iter().sum::<f64>() / cider_scores.len() as f64,
        dist1: distinct_n(&hyps, 1),
        dist2: distinct_n(&hyps, 2),
        avg_len: avg_len(&hyps),
        per_sample,
    })
}
