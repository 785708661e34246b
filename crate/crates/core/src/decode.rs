//! Conditioned response generation: iterative mask-predict decoding — append
//! a `[MASK]`, predict it, repeat left-to-right — wrapped in a beam search
//! with duplicate-bigram blocking.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{
    load_dialogue_records_lenient, pack_source_block, AttentionMask, ConditionMap, DialogueRecord,
    InputEncoding, Vocabulary, BOS_ID, EOS_ID, MASK_ID, NUM_RESERVED, UNK_ID,
};
use crate::error::{Error, Result};
use crate::model::Model;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub beam_size: usize,
    pub max_new_tokens: usize,
    /// Final ranking divides scores by length^alpha; 0 disables.
    pub length_norm_alpha: f64,
    pub block_repeat_bigrams: bool,
    /// `[UNK]` is excluded from generation unless set.
    pub allow_unk: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            beam_size: 10,
            max_new_tokens: 24,
            length_norm_alpha: 0.0,
            block_repeat_bigrams: true,
            allow_unk: false,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_size == 0 {
            return Err(Error::Config("beam_size must be at least 1".into()));
        }
        if self.max_new_tokens == 0 {
            return Err(Error::Config("max_new_tokens must be at least 1".into()));
        }
        Ok(())
    }
}

/// One (partial or finished) decoded sequence. `tokens` holds content tokens
/// only; the terminating `[EOS]`, when any, contributes its log-probability
/// but is not stored.
#[derive(Debug, Clone)]
pub struct Hypothesis {
    pub tokens: Vec<u32>,
    pub log_prob: f64,
    pub finished: bool,
    pub ended_with_eos: bool,
    /// Set when every candidate was blocked and `[EOS]` was forced.
    pub forced_eos: bool,
}

impl Hypothesis {
    fn empty() -> Self {
        Hypothesis {
            tokens: Vec::new(),
            log_prob: 0.0,
            finished: false,
            ended_with_eos: false,
            forced_eos: false,
        }
    }

    /// Ranking score: raw log-probability, optionally length-normalized.
    pub fn score(&self, alpha: f64) -> f64 {
        if alpha == 0.0 {
            self.log_prob
        } else {
            self.log_prob / (self.tokens.len().max(1) as f64).powf(alpha)
        }
    }

    fn has_bigram(&self, a: u32, b: u32) -> bool {
        self.tokens.windows(2).any(|w| w[0] == a && w[1] == b)
    }
}

/// Pack `[source | [BOS] prefix [MASK]]` under the dialogue mask, run a
/// forward pass, and return the log-probabilities at the `[MASK]` position.
/// The source must already fit the decode budget (see [`pack_decode_source`]).
pub fn step_logits(
    model: &Model,
    source: &[u32],
    condition: Option<u32>,
    prefix: &[u32],
) -> Result<Vec<f64>> {
    let n_source = source.len();
    let mut token_ids = Vec::with_capacity(n_source + prefix.len() + 2);
    token_ids.extend_from_slice(source);
    token_ids.push(BOS_ID);
    token_ids.extend_from_slice(prefix);
    token_ids.push(MASK_ID);
    let n = token_ids.len();
    let enc = InputEncoding {
        position_ids: (0..n).collect(),
        type_ids: (0..n).map(|i| u8::from(i >= n_source)).collect(),
        mask: AttentionMask::dialogue(n_source, n - n_source),
        condition_id: condition,
        n_source,
        token_ids,
    };
    let (logits, vocab) = model.forward_logits_eval(&enc)?;
    let row = &logits[(n - 1) * vocab..n * vocab];
    Ok(log_softmax(row))
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

/// Truncate the dialogue history so that source + [BOS] + max_new_tokens +
/// [MASK] always fits `max_length`. The prefix is never truncated.
pub fn pack_decode_source(
    history: &[Vec<u32>],
    max_length: usize,
    max_new_tokens: usize,
) -> Result<Vec<u32>> {
    let target_budget = max_new_tokens + 2;
    if max_length < target_budget + 3 {
        return Err(Error::Config(format!(
            "max_length {max_length} cannot host {max_new_tokens} new tokens plus a minimal source"
        )));
    }
    pack_source_block(history, max_length - target_budget)
}

fn candidate_tokens(vocab_size: usize, allow_unk: bool) -> Vec<u32> {
    let mut cands = Vec::with_capacity(vocab_size - NUM_RESERVED as usize + 2);
    cands.push(EOS_ID);
    if allow_unk {
        cands.push(UNK_ID);
    }
    cands.extend(NUM_RESERVED..vocab_size as u32);
    cands
}

enum Expansion {
    /// (token, log-prob of that token)
    Extended(Vec<(u32, f64)>),
    /// Every candidate blocked; the hypothesis is force-finished with [EOS].
    ForcedEos { eos_log_prob: f64 },
}

/// Expand one live hypothesis against the candidate set, applying bigram
/// blocking: a token is discarded when appending it would recreate a bigram
/// already present in the hypothesis.
fn expand_hypothesis(
    hyp: &Hypothesis,
    log_probs: &[f64],
    candidates: &[u32],
    block_bigrams: bool,
) -> Expansion {
    let mut extensions = Vec::with_capacity(candidates.len());
    for &cand in candidates {
        if block_bigrams && cand != EOS_ID {
            if let Some(&last) = hyp.tokens.last() {
                if hyp.has_bigram(last, cand) {
                    continue;
                }
            }
        }
        extensions.push((cand, log_probs[cand as usize]));
    }
    if extensions.is_empty() {
        Expansion::ForcedEos {
            eos_log_prob: log_probs[EOS_ID as usize],
        }
    } else {
        Expansion::Extended(extensions)
    }
}

/// Standard beam search over mask-predict steps. Hypotheses finish on
/// `[EOS]` or at `max_new_tokens`; the final ranking uses the (optionally
/// length-normalized) score. Returned list is sorted best-first and contains
/// at most `beam_size` hypotheses.
pub fn beam_search(
    model: &Model,
    source: &[u32],
    condition: Option<u32>,
    cfg: &DecodeConfig,
) -> Result<Vec<Hypothesis>> {
    cfg.validate()?;
    let vocab_size = model.config().vocab_size;
    let candidates = candidate_tokens(vocab_size, cfg.allow_unk);

    let mut live = vec![Hypothesis::empty()];
    let mut finished: Vec<Hypothesis> = Vec::new();

    for _ in 0..cfg.max_new_tokens {
        let mut extensions: Vec<Hypothesis> = Vec::new();
        for hyp in &live {
            let log_probs = step_logits(model, source, condition, &hyp.tokens)?;
            match expand_hypothesis(hyp, &log_probs, &candidates, cfg.block_repeat_bigrams) {
                Expansion::Extended(exts) => {
                    for (tok, lp) in exts {
                        let mut next = hyp.clone();
                        next.log_prob += lp;
                        if tok == EOS_ID {
                            next.finished = true;
                            next.ended_with_eos = true;
                        } else {
                            next.tokens.push(tok);
                        }
                        extensions.push(next);
                    }
                }
                Expansion::ForcedEos { eos_log_prob } => {
                    let mut next = hyp.clone();
                    next.log_prob += eos_log_prob;
                    next.finished = true;
                    next.ended_with_eos = true;
                    next.forced_eos = true;
                    extensions.push(next);
                }
            }
        }
        extensions.sort_by(|a, b| b.log_prob.total_cmp(&a.log_prob));

        // An [EOS] extension finalizes only when it ranks within the top
        // beam_size extensions of the round (so beam 1 is exactly greedy);
        // the live beam refills with the best non-finished candidates.
        live = Vec::with_capacity(cfg.beam_size);
        for (rank, ext) in extensions.into_iter().enumerate() {
            if ext.finished {
                if rank < cfg.beam_size {
                    finished.push(ext);
                }
            } else if live.len() < cfg.beam_size {
                live.push(ext);
            }
            if live.len() >= cfg.beam_size && rank + 1 >= cfg.beam_size {
                break;
            }
        }
        if live.is_empty() {
            break;
        }
    }

    // Anything still live ran out of budget: finished without [EOS].
    for mut hyp in live {
        hyp.finished = true;
        finished.push(hyp);
    }

    finished.sort_by(|a, b| {
        b.score(cfg.length_norm_alpha)
            .total_cmp(&a.score(cfg.length_norm_alpha))
    });
    finished.truncate(cfg.beam_size);
    if finished.is_empty() {
        return Err(Error::Numerical(
            "beam search produced no hypotheses".into(),
        ));
    }
    Ok(finished)
}

/// Decode one dialogue sample (history + condition) end to end.
pub fn decode_sample(
    model: &Model,
    history: &[Vec<u32>],
    condition: Option<u32>,
    cfg: &DecodeConfig,
) -> Result<Vec<Hypothesis>> {
    let source = pack_decode_source(history, model.config().max_length, cfg.max_new_tokens)?;
    beam_search(model, &source, condition, cfg)
}

/// One line of a hypotheses file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HypothesisRecord {
    pub index: usize,
    pub condition: String,
    pub hypothesis: String,
    pub score: f64,
    pub length: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct GenerationSummary {
    pub count: usize,
    pub skipped: usize,
    pub avg_len: f64,
}

/// Decode every record of a dialogue-format test file (responses optional)
/// and write one hypothesis record per input line, order preserved.
/// Malformed lines and unknown condition labels are skipped with a logged
/// index. An empty input produces an empty output file.
pub fn generate_file(
    model: &Model,
    vocab: &Vocabulary,
    conditions: &ConditionMap,
    input: &Path,
    output: &Path,
    cfg: &DecodeConfig,
) -> Result<GenerationSummary> {
    let (records, mut skipped) = load_dialogue_records_lenient(input)?;
    let mut lines = String::new();
    let mut count = 0usize;
    let mut total_len = 0usize;
    for (index, record) in records.iter().enumerate() {
        match generate_one(model, vocab, conditions, record, index, cfg) {
            Ok(Some(rec)) => {
                total_len += rec.length;
                count += 1;
                lines.push_str(&serde_json::to_string(&rec).unwrap());
                lines.push('\n');
            }
            Ok(None) => {
                eprintln!(
                    "warning: input record {index}: unknown condition label {:?}; skipped",
                    record.condition
                );
                skipped += 1;
            }
            Err(e) => {
                eprintln!("warning: input record {index}: {e}; skipped");
                skipped += 1;
            }
        }
    }
    std::fs::write(output, lines).map_err(|e| Error::io(output, e))?;
    Ok(GenerationSummary {
        count,
        skipped,
        avg_len: if count == 0 {
            0.0
        } else {
            total_len as f64 / count as f64
        },
    })
}

fn generate_one(
    model: &Model,
    vocab: &Vocabulary,
    conditions: &ConditionMap,
    record: &DialogueRecord,
    index: usize,
    cfg: &DecodeConfig,
) -> Result<Option<HypothesisRecord>> {
    let condition = if model.config().num_conditions == 0 {
        None
    } else {
        match conditions.id(&record.condition) {
            Some(id) => Some(id),
            None => return Ok(None),
        }
    };
    let history: Vec<Vec<u32>> = record
        .history
        .iter()
        .map(|u| vocab.encode(u))
        .filter(|u| !u.is_empty())
        .collect();
    if history.is_empty() {
        return Err(Error::Data("record has an empty history".into()));
    }
    let hyps = decode_sample(model, &history, condition, cfg)?;
    let best = &hyps[0];
    Ok(Some(HypothesisRecord {
        index,
        condition: record.condition.clone(),
        hypothesis: vocab.decode(&best.tokens),
        score: best.score(cfg.length_norm_alpha),
        length: best.tokens.len(),
    }))
}
