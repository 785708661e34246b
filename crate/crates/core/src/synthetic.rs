//! Bundled synthetic corpus generator: conditions with disjoint response
//! vocabularies over template phrases, shared context vocabulary for the
//! histories, and an optional text-only vocabulary slice for studying the
//! effect of the extra text corpus. Fully seeded, so acceptance runs need no
//! external data.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{write_jsonl, DialogueRecord, TextRecord};
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub dialogues: usize,
    pub texts: usize,
    pub test: usize,
    pub conditions: usize,
    /// Response vocabulary size per condition (disjoint across conditions).
    pub vocab_per_condition: usize,
    /// Fraction of each condition's vocabulary that appears only in the
    /// text corpus (0 disables; used for the extra-text experiments).
    pub text_only_fraction: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            dialogues: 2000,
            texts: 500,
            test: 200,
            conditions: 2,
            vocab_per_condition: 50,
            text_only_fraction: 0.0,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticMeta {
    pub conditions: Vec<String>,
    /// Full per-condition vocabulary (dialogue-eligible + text-only).
    pub condition_vocab: BTreeMap<String, Vec<String>>,
    /// Slice of each condition's vocabulary reserved for the text corpus.
    pub text_only_vocab: BTreeMap<String, Vec<String>>,
    pub context_vocab: Vec<String>,
    /// Cue tokens; in template mode cue k selects response phrase k.
    pub cue_vocab: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub dialogue: Vec<DialogueRecord>,
    pub text: Vec<TextRecord>,
    pub test: Vec<DialogueRecord>,
    pub meta: SyntheticMeta,
}

const CONTEXT_VOCAB_SIZE: usize = 20;
const PHRASES_PER_CONDITION: usize = 12;
const TEXT_PHRASES_PER_CONDITION: usize = 12;
const PHRASE_LEN: usize = 5;
// Bridged mode (text_only_fraction > 0): cued two-token stems whose dialogue
// continuations are deliberately diffuse while the text corpus continues
// each stem with a fixed text-only tail.
const BRIDGE_STEMS: usize = 6;
const BRIDGE_TAIL_LEN: usize = 3;
const BRIDGE_END_PROB: f64 = 0.25;

fn draw_phrase(rng: &mut Rng, vocab: &[String], len: usize) -> Vec<String> {
    (0..len)
        .map(|_| vocab[rng.below(vocab.len())].clone())
        .collect()
}

/// History whose first utterance opens with a cue token that (in template
/// mode) deterministically selects the response phrase. The rest is filler
/// from the shared context vocabulary.
fn history(rng: &mut Rng, context: &[String], cue: &str) -> Vec<String> {
    let turns = 1 + rng.below(2);
    (0..turns)
        .map(|turn| {
            let len = 2 + rng.below(4);
            let mut toks = draw_phrase(rng, context, len);
            if turn == 0 {
                toks.insert(0, cue.to_string());
            }
            toks.join(" ")
        })
        .collect()
}

/// Bridged dialogue response: the cued stem, then either an immediate end
/// or a couple of i.i.d. filler tokens. The spread keeps every dialogue
/// continuation individually weak.
fn bridged_dialogue_response(
    rng: &mut Rng,
    eligible: &[String],
    fillers: &[String],
    stem: usize,
) -> String {
    let mut toks = vec![eligible[2 * stem].clone(), eligible[2 * stem + 1].clone()];
    if !rng.bernoulli(BRIDGE_END_PROB) {
        let n = 2 + rng.below(2);
        for _ in 0..n {
            toks.push(fillers[rng.below(fillers.len())].clone());
        }
    }
    toks.join(" ")
}

pub fn generate(cfg: &SyntheticConfig) -> Result<SyntheticCorpus> {
    if cfg.conditions == 0 || cfg.vocab_per_condition < 4 || cfg.dialogues == 0 {
        return Err(Error::Config(
            "synthetic corpus needs ≥1 condition, ≥4 vocabulary tokens and ≥1 dialogue".into(),
        ));
    }
    if !(0.0..0.9).contains(&cfg.text_only_fraction) {
        return Err(Error::Config(
            "text_only_fraction must lie in [0, 0.9)".into(),
        ));
    }
    let mut rng = Rng::from_seed_stream(cfg.seed, 0x5EED);

    let labels: Vec<String> = (0..cfg.conditions).map(|c| format!("cond{c}")).collect();
    let context_vocab: Vec<String> = (0..CONTEXT_VOCAB_SIZE)
        .map(|i| format!("ctx{i:02}"))
        .collect();
    let cue_vocab: Vec<String> = (0..PHRASES_PER_CONDITION)
        .map(|i| format!("cue{i:02}"))
        .collect();

    let n_text_only = (cfg.vocab_per_condition as f64 * cfg.text_only_fraction).round() as usize;
    let n_eligible = cfg.vocab_per_condition - n_text_only;

    let mut condition_vocab = BTreeMap::new();
    let mut text_only_vocab = BTreeMap::new();
    let mut eligible: Vec<Vec<String>> = Vec::new();
    let mut text_only: Vec<Vec<String>> = Vec::new();
    for label in &labels {
        let full: Vec<String> = (0..cfg.vocab_per_condition)
            .map(|j| format!("{label}_{j:02}"))
            .collect();
        eligible.push(full[..n_eligible].to_vec());
        text_only.push(full[n_eligible..].to_vec());
        condition_vocab.insert(label.clone(), full);
        text_only_vocab.insert(label.clone(), text_only.last().unwrap().clone());
    }

    // Template phrases make the corpora memorizable by a toy model: masked
    // tokens are recoverable from the rest of the phrase.
    let phrases: Vec<Vec<Vec<String>>> = (0..cfg.conditions)
        .map(|c| {
            (0..PHRASES_PER_CONDITION)
                .map(|_| draw_phrase(&mut rng, &eligible[c], PHRASE_LEN))
                .collect()
        })
        .collect();

    // Bridged-mode structure: stem k = (eligible[2k], eligible[2k+1]);
    // its text tail cycles through the text-only slice so every text-only
    // token occurs; dialogue suffixes draw from the remaining filler tokens.
    let n_stems = BRIDGE_STEMS.min(n_eligible / 2).max(1);
    let bridge_tails: Vec<Vec<Vec<String>>> = if n_text_only == 0 {
        Vec::new()
    } else {
        (0..cfg.conditions)
            .map(|c| {
                (0..n_stems)
                    .map(|k| {
                        (0..BRIDGE_TAIL_LEN.min(n_text_only))
                            .map(|j| text_only[c][(BRIDGE_TAIL_LEN * k + j) % n_text_only].clone())
                            .collect()
                    })
                    .collect()
            })
            .collect()
    };
    let bridge_fillers: Vec<Vec<String>> = (0..cfg.conditions)
        .map(|c| eligible[c][2 * n_stems..].to_vec())
        .collect();

    // Conditions and cues cycle deterministically, so every (cue, condition)
    // cell is equally frequent; content and filler are random.
    let mut dialogue = Vec::with_capacity(cfg.dialogues);
    for i in 0..cfg.dialogues {
        let c = i % cfg.conditions;
        let cue = (i / cfg.conditions) % PHRASES_PER_CONDITION;
        let response = if n_text_only == 0 {
            phrases[c][cue].join(" ")
        } else {
            bridged_dialogue_response(&mut rng, &eligible[c], &bridge_fillers[c], cue % n_stems)
        };
        let cue = if n_text_only == 0 { cue } else { cue % n_stems };
        let hist = if n_text_only == 0 {
            history(&mut rng, &context_vocab, &cue_vocab[cue])
        } else {
            vec![format!(
                "{} {}",
                cue_vocab[cue],
                context_vocab[rng.below(context_vocab.len())]
            )]
        };
        dialogue.push(DialogueRecord {
            history: hist,
            condition: labels[c].clone(),
            response,
        });
    }

    // Text corpus. Plain mode: extra phrases over the same vocabulary.
    // Bridged mode: trigger → text-only pairs, so that each text-only token
    // becomes the strongest continuation of one dialogue-eligible trigger.
    let text_phrases: Vec<Vec<Vec<String>>> = (0..cfg.conditions)
        .map(|c| {
            (0..TEXT_PHRASES_PER_CONDITION)
                .map(|_| draw_phrase(&mut rng, &eligible[c], PHRASE_LEN))
                .collect()
        })
        .collect();
    let mut text = Vec::with_capacity(cfg.texts);
    for i in 0..cfg.texts {
        let c = i % cfg.conditions;
        let body = if n_text_only == 0 {
            text_phrases[c][rng.below(TEXT_PHRASES_PER_CONDITION)].join(" ")
        } else {
            // Stem followed by its fixed text-only tail, with a little
            // context filler up front so target positions overlap the
            // dialogue layout.
            let k = rng.below(n_stems);
            let lead = 4 + rng.below(3);
            let mut toks = draw_phrase(&mut rng, &context_vocab, lead);
            toks.push(eligible[c][2 * k].clone());
            toks.push(eligible[c][2 * k + 1].clone());
            toks.extend(bridge_tails[c][k].iter().cloned());
            toks.join(" ")
        };
        text.push(TextRecord {
            condition: labels[c].clone(),
            text: body,
        });
    }

    let mut test = Vec::with_capacity(cfg.test);
    for i in 0..cfg.test {
        let c = i % cfg.conditions;
        let cue = (i / cfg.conditions) % PHRASES_PER_CONDITION;
        let response = if n_text_only == 0 {
            phrases[c][cue].join(" ")
        } else {
            bridged_dialogue_response(&mut rng, &eligible[c], &bridge_fillers[c], cue % n_stems)
        };
        let cue = if n_text_only == 0 { cue } else { cue % n_stems };
        let hist = if n_text_only == 0 {
            history(&mut rng, &context_vocab, &cue_vocab[cue])
        } else {
            vec![format!(
                "{} {}",
                cue_vocab[cue],
                context_vocab[rng.below(context_vocab.len())]
            )]
        };
        test.push(DialogueRecord {
            history: hist,
            condition: labels[c].clone(),
            response,
        });
    }

    Ok(SyntheticCorpus {
        dialogue,
        text,
        test,
        meta: SyntheticMeta {
            conditions: labels,
            condition_vocab,
            text_only_vocab,
            context_vocab,
            cue_vocab,
        },
    })
}

/// Write `dialogue.jsonl`, `text.jsonl`, `test.jsonl` and `meta.json`.
pub fn write_dir(corpus: &SyntheticCorpus, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_jsonl(&dir.join("dialogue.jsonl"), &corpus.dialogue)?;
    write_jsonl(&dir.join("text.jsonl"), &corpus.text)?;
    write_jsonl(&dir.join("test.jsonl"), &corpus.test)?;
    let meta = serde_json::to_string_pretty(&corpus.meta)
        .map_err(|e| Error::Data(format!("meta serialization: {e}")))?;
    let meta_path = dir.join("meta.json");
    std::fs::write(&meta_path, meta + "\n").map_err(|e| Error::io(&meta_path, e))
}
