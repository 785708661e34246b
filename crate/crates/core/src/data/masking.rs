use serde::{Deserialize, Serialize};

use crate::data::pack::InputEncoding;
use crate::data::tfidf::TfIdfTable;
use crate::data::vocab::{Vocabulary, BOS_ID, MASK_ID, NUM_RESERVED, PAD_ID};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// How a selected position's input token is replaced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskStyle {
    /// Always substitute `[MASK]` (default).
    PureMask,
    /// BERT-style 80% `[MASK]` / 10% random token / 10% keep.
    Bert801010,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleKind {
    Dialogue,
    Text,
}

/// A packed sample with MLM targets. `targets[i]` holds the original token
/// id where `active[i]`, `[PAD]` elsewhere; masked positions are always on
/// the target side.
#[derive(Debug, Clone)]
pub struct MaskedSample {
    pub enc: InputEncoding,
    pub targets: Vec<u32>,
    pub active: Vec<bool>,
    pub kind: SampleKind,
}

/// Exact masked-position count for `n_candidates` maskable positions.
fn mask_count(p: f64, n_candidates: usize) -> usize {
    ((p * n_candidates as f64).round() as usize).max(1)
}

fn replace_token(ids: &mut [u32], pos: usize, style: MaskStyle, vocab_size: usize, rng: &mut Rng) {
    match style {
        MaskStyle::PureMask => ids[pos] = MASK_ID,
        MaskStyle::Bert801010 => {
            let dart = rng.next_f64();
            if dart < 0.8 {
                ids[pos] = MASK_ID;
            } else if dart < 0.9 && vocab_size > NUM_RESERVED as usize {
                let span = vocab_size - NUM_RESERVED as usize;
                ids[pos] = NUM_RESERVED + rng.below(span) as u32;
            }
            // else keep the original token
        }
    }
}

fn finish(
    mut enc: InputEncoding,
    chosen: &[usize],
    style: MaskStyle,
    vocab_size: usize,
    rng: &mut Rng,
    kind: SampleKind,
) -> MaskedSample {
    let n = enc.len();
    let mut targets = vec![PAD_ID; n];
    let mut active = vec![false; n];
    for &pos in chosen {
        targets[pos] = enc.token_ids[pos];
        active[pos] = true;
        replace_token(&mut enc.token_ids, pos, style, vocab_size, rng);
    }
    MaskedSample {
        enc,
        targets,
        active,
        kind,
    }
}

/// Uniform masking of the target side. Candidates are all target-side
/// positions except `[BOS]`, i.e. the response/text tokens plus `[EOS]` (so
/// the model also learns to emit the terminator). Selects exactly
/// `max(1, round(p·n_candidates))` positions without replacement; source
/// positions are never masked.
pub fn apply_random_masking(
    enc: InputEncoding,
    rng: &mut Rng,
    p: f64,
    style: MaskStyle,
    vocab_size: usize,
) -> MaskedSample {
    let kind = if enc.n_source == 0 {
        SampleKind::Text
    } else {
        SampleKind::Dialogue
    };
    let candidates: Vec<usize> = (enc.n_source..enc.len())
        .filter(|&i| enc.token_ids[i] != BOS_ID)
        .collect();
    debug_assert!(
        !candidates.is_empty(),
        "packed samples always have a target side"
    );
    let count = mask_count(p, candidates.len()).min(candidates.len());
    let chosen: Vec<usize> = rng
        .sample_indices(candidates.len(), count)
        .into_iter()
        .map(|k| candidates[k])
        .collect();
    finish(enc, &chosen, style, vocab_size, rng, kind)
}

/// TF-IDF weighted masking for text samples: positions are drawn without
/// replacement with probability proportional to `tf(token, this text)·idf`.
/// Reserved tokens are excluded from candidacy. Dialogue samples are
/// rejected; all-zero weights fall back to uniform with a warning.
pub fn apply_tfidf_masking(
    enc: InputEncoding,
    table: &TfIdfTable,
    rng: &mut Rng,
    p: f64,
    style: MaskStyle,
    vocab_size: usize,
) -> Result<MaskedSample> {
    if enc.n_source != 0 {
        return Err(Error::Usage(
            "TF-IDF masking applies to text samples only, not dialogue".into(),
        ));
    }
    let candidates: Vec<usize> = (0..enc.len())
        .filter(|&i| !Vocabulary::is_reserved(enc.token_ids[i]))
        .collect();
    if candidates.is_empty() {
        eprintln!("warning: text sample has no maskable (non-reserved) tokens; masking uniformly");
        return Ok(apply_random_masking(enc, rng, p, style, vocab_size));
    }
    let tf = TfIdfTable::doc_tf(&enc.token_ids);
    let mut weights: Vec<f64> = candidates
        .iter()
        .map(|&i| table.weight(enc.token_ids[i], tf[&enc.token_ids[i]]))
        .collect();
    if weights.iter().sum::<f64>() <= 0.0 {
        eprintln!("warning: all tf-idf weights zero; falling back to uniform masking");
        weights.iter_mut().for_each(|w| *w = 1.0);
    }

    let count = mask_count(p, candidates.len()).min(candidates.len());
    let mut chosen = Vec::with_capacity(count);
    let mut live: Vec<usize> = (0..candidates.len()).collect();
    for _ in 0..count {
        let current: Vec<f64> = live.iter().map(|&k| weights[k]).collect();
        let pick = match rng.weighted_choice(&current) {
            Some(i) => i,
            // Remaining weights all zero: fall back to uniform over the rest.
            None => rng.below(live.len()),
        };
        chosen.push(candidates[live[pick]]);
        live.swap_remove(pick);
    }
    Ok(finish(
        enc,
        &chosen,
        style,
        vocab_size,
        rng,
        SampleKind::Text,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::pack::{pack_dialogue, pack_text, TextAttention};
    use crate::data::vocab::{EOS_ID, NUM_RESERVED};
    use crate::data::{DialogueSample, TextSample};

    fn tok(i: u32) -> u32 {
        NUM_RESERVED + i
    }

    fn packed_dialogue(resp_len: usize) -> InputEncoding {
        pack_dialogue(
            &DialogueSample {
                history: vec![vec![tok(0), tok(1)]],
                condition_id: 0,
                response: (0..resp_len as u32).map(|i| tok(10 + i)).collect(),
            },
            64,
        )
        .unwrap()
    }

    #[test]
    fn count_rule() {
        assert_eq!(mask_count(0.25, 4), 1);
        assert_eq!(mask_count(0.25, 1), 1);
        assert_eq!(mask_count(0.25, 8), 2);
        assert_eq!(mask_count(0.25, 6), 2); // 1.5 rounds half away from zero
    }

    #[test]
    fn source_positions_never_masked_and_bos_excluded() {
        let mut rng = Rng::seed_from_u64(1);
        for _ in 0..100 {
            let enc = packed_dialogue(5);
            let ns = enc.n_source;
            let masked = apply_random_masking(enc, &mut rng, 0.25, MaskStyle::PureMask, 64);
            for i in 0..ns + 1 {
                assert!(!masked.active[i], "source/[BOS] position {i} masked");
            }
            let n_active = masked.active.iter().filter(|&&a| a).count();
            // 5 response tokens + [EOS] = 6 candidates → round(1.5) = 2.
            assert_eq!(n_active, 2);
            assert_eq!(masked.kind, SampleKind::Dialogue);
            for (i, &a) in masked.active.iter().enumerate() {
                if a {
                    assert_eq!(masked.enc.token_ids[i], MASK_ID);
                    assert_ne!(masked.targets[i], PAD_ID);
                }
            }
        }
    }

    #[test]
    fn single_candidate_gets_masked() {
        // Response of 1 token: candidates are {token, EOS} → count 1.
        let mut rng = Rng::seed_from_u64(2);
        let enc = packed_dialogue(1);
        let masked = apply_random_masking(enc, &mut rng, 0.25, MaskStyle::PureMask, 64);
        assert_eq!(masked.active.iter().filter(|&&a| a).count(), 1);
    }

    #[test]
    fn tfidf_rejects_dialogue() {
        let mut rng = Rng::seed_from_u64(3);
        let table = TfIdfTable::compute(&[TextSample {
            condition_id: 0,
            text: vec![tok(0)],
        }])
        .unwrap();
        let enc = packed_dialogue(2);
        let err =
            apply_tfidf_masking(enc, &table, &mut rng, 0.25, MaskStyle::PureMask, 64).unwrap_err();
        assert!(err.to_string().contains("text samples only"));
    }

    #[test]
    fn tfidf_excludes_reserved_tokens() {
        let mut rng = Rng::seed_from_u64(4);
        let texts = vec![TextSample {
            condition_id: 0,
            text: vec![tok(0), tok(1), tok(2)],
        }];
        let table = TfIdfTable::compute(&texts).unwrap();
        for _ in 0..50 {
            let enc = pack_text(&texts[0], TextAttention::Bidirectional, 32).unwrap();
            let masked =
                apply_tfidf_masking(enc, &table, &mut rng, 0.25, MaskStyle::PureMask, 64).unwrap();
            let n = masked.enc.len();
            assert!(!masked.active[0], "[BOS] masked");
            assert!(!masked.active[n - 1], "[EOS] masked");
            assert_eq!(masked.kind, SampleKind::Text);
        }
    }

    #[test]
    fn tfidf_selection_follows_weights() {
        // Single-draw doc with two candidates: the rare token (higher idf)
        // must be selected with frequency w_a/(w_a+w_b) over many trials.
        let mut rng = Rng::seed_from_u64(5);
        // token A appears in 1 of 5 docs, token B in all 5 → idf(A) > idf(B).
        let mut texts = vec![TextSample {
            condition_id: 0,
            text: vec![tok(0), tok(1)],
        }];
        for _ in 0..4 {
            texts.push(TextSample {
                condition_id: 0,
                text: vec![tok(1)],
            });
        }
        let table = TfIdfTable::compute(&texts).unwrap();
        let doc = TextSample {
            condition_id: 0,
            text: vec![tok(0), tok(1)],
        };
        let w_a = table.weight(tok(0), 1);
        let w_b = table.weight(tok(1), 1);
        let expect = w_a / (w_a + w_b);

        let trials = 10_000;
        let mut hits = 0;
        for _ in 0..trials {
            let enc = pack_text(&doc, TextAttention::Bidirectional, 32).unwrap();
            let masked =
                apply_tfidf_masking(enc, &table, &mut rng, 0.25, MaskStyle::PureMask, 64).unwrap();
            if masked.active[1] {
                hits += 1;
            }
        }
        let frac = hits as f64 / trials as f64;
        assert!(
            (frac - expect).abs() < 0.02,
            "frac {frac} vs expected {expect}"
        );
    }

    #[test]
    fn bert_style_sometimes_keeps_or_replaces() {
        let mut rng = Rng::seed_from_u64(6);
        let mut saw_mask = 0;
        let mut saw_other = 0;
        for _ in 0..300 {
            let enc = packed_dialogue(6);
            let masked = apply_random_masking(enc, &mut rng, 0.25, MaskStyle::Bert801010, 64);
            for (i, &a) in masked.active.iter().enumerate() {
                if a {
                    if masked.enc.token_ids[i] == MASK_ID {
                        saw_mask += 1;
                    } else {
                        saw_other += 1;
                    }
                }
            }
        }
        assert!(saw_mask > 0 && saw_other > 0);
        let frac = saw_mask as f64 / (saw_mask + saw_other) as f64;
        assert!((frac - 0.8).abs() < 0.08, "mask fraction {frac}");
    }

    #[test]
    fn eos_is_a_random_masking_candidate() {
        let mut rng = Rng::seed_from_u64(7);
        let mut eos_masked = false;
        for _ in 0..200 {
            let enc = packed_dialogue(2);
            let n = enc.len();
            debug_assert_eq!(enc.token_ids[n - 1], EOS_ID);
            let masked = apply_random_masking(enc, &mut rng, 0.25, MaskStyle::PureMask, 64);
            if masked.active[n - 1] {
                eos_masked = true;
                assert_eq!(masked.targets[n - 1], EOS_ID);
            }
        }
        assert!(eos_masked);
    }
}
