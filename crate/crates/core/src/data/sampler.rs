use crate::data::corpus::{DialogueSample, TextSample};
use crate::data::masking::{apply_random_masking, apply_tfidf_masking, MaskStyle, MaskedSample};
use crate::data::pack::{pack_dialogue, pack_text, TextAttention};
use crate::data::tfidf::TfIdfTable;
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Masking scheme for the text quarter of each batch. `Random` implements
/// the w/o-tfidf ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TextMasking {
    TfIdf,
    Random,
}

#[derive(Debug, Clone)]
pub struct SamplerConfig {
    pub batch_size: usize,
    pub mask_probability: f64,
    pub text_masking: TextMasking,
    pub mask_style: MaskStyle,
    /// Probability of bidirectional (vs left-to-right) attention per text sample.
    pub bidirectional_prob: f64,
    pub max_length: usize,
    pub vocab_size: usize,
    /// Force condition_id = NONE on every sample (w/o-condition ablation).
    pub strip_conditions: bool,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            batch_size: 160,
            mask_probability: 0.25,
            text_masking: TextMasking::TfIdf,
            mask_style: MaskStyle::PureMask,
            bidirectional_prob: 0.5,
            max_length: 80,
            vocab_size: 0,
            strip_conditions: false,
            seed: 0,
        }
    }
}

/// One mixed training batch with its realized composition.
#[derive(Debug)]
pub struct Batch {
    pub samples: Vec<MaskedSample>,
    pub n_dialogue: usize,
    pub n_text: usize,
}

struct Stream {
    order: Vec<usize>,
    pos: usize,
}

impl Stream {
    fn new(len: usize) -> Self {
        Stream {
            order: (0..len).collect(),
            pos: len, // force an initial shuffle
        }
    }

    fn next(&mut self, rng: &mut Rng) -> usize {
        if self.pos >= self.order.len() {
            rng.shuffle(&mut self.order);
            self.pos = 0;
        }
        let idx = self.order[self.pos];
        self.pos += 1;
        idx
    }
}

/// Deterministic mixed-batch stream: each batch holds exactly
/// `round(0.75·batch_size)` dialogue samples (random masking) and the
/// remainder text samples (TF-IDF masking unless ablated). Within an epoch a
/// corpus is shuffled and consumed without replacement; exhausted corpora
/// reshuffle. An empty text corpus degrades to all-dialogue batches.
pub struct BatchSampler<'a> {
    dialogues: &'a [DialogueSample],
    texts: &'a [TextSample],
    tfidf: Option<TfIdfTable>,
    cfg: SamplerConfig,
    rng: Rng,
    dialogue_stream: Stream,
    text_stream: Stream,
    n_dialogue_per_batch: usize,
    n_text_per_batch: usize,
    skipped_overlong: usize,
}

impl<'a> BatchSampler<'a> {
    pub fn new(
        dialogues: &'a [DialogueSample],
        texts: &'a [TextSample],
        cfg: SamplerConfig,
    ) -> Result<Self> {
        if dialogues.is_empty() {
            return Err(Error::Data("dialogue corpus is empty".into()));
        }
        if cfg.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&cfg.mask_probability) {
            return Err(Error::Config("mask_probability must lie in [0, 1]".into()));
        }
        let (n_dialogue_per_batch, n_text_per_batch) = if texts.is_empty() {
            (cfg.batch_size, 0)
        } else {
            let nd = ((0.75 * cfg.batch_size as f64).round() as usize).clamp(1, cfg.batch_size);
            (nd, cfg.batch_size - nd)
        };
        let tfidf = if texts.is_empty() || cfg.text_masking == TextMasking::Random {
            None
        } else {
            Some(TfIdfTable::compute(texts)?)
        };
        Ok(BatchSampler {
            dialogue_stream: Stream::new(dialogues.len()),
            text_stream: Stream::new(texts.len()),
            rng: Rng::from_seed_stream(cfg.seed, 0xBA7C),
            dialogues,
            texts,
            tfidf,
            n_dialogue_per_batch,
            n_text_per_batch,
            cfg,
            skipped_overlong: 0,
        })
    }

    /// True when the sampler degraded to all-dialogue batches (no text data).
    pub fn all_dialogue_mode(&self) -> bool {
        self.n_text_per_batch == 0
    }

    pub fn composition(&self) -> (usize, usize) {
        (self.n_dialogue_per_batch, self.n_text_per_batch)
    }

    pub fn skipped_overlong(&self) -> usize {
        self.skipped_overlong
    }

    pub fn next_batch(&mut self) -> Result<Batch> {
        let mut samples = Vec::with_capacity(self.cfg.batch_size);
        let mut attempts = 0usize;
        let attempt_limit = 20 * self.cfg.batch_size.max(self.dialogues.len());

        while samples.len() < self.n_dialogue_per_batch {
            attempts += 1;
            if attempts > attempt_limit {
                return Err(Error::Data(
                    "could not assemble a batch: too many over-length dialogue samples".into(),
                ));
            }
            let idx = self.dialogue_stream.next(&mut self.rng);
            let mut enc = match pack_dialogue(&self.dialogues[idx], self.cfg.max_length) {
                Ok(enc) => enc,
                Err(_) => {
                    self.skipped_overlong += 1;
                    continue;
                }
            };
            if self.cfg.strip_conditions {
                enc.condition_id = None;
            }
            samples.push(apply_random_masking(
                enc,
                &mut self.rng,
                self.cfg.mask_probability,
                self.cfg.mask_style,
                self.cfg.vocab_size,
            ));
        }

        let mut n_text = 0;
        while n_text < self.n_text_per_batch {
            let idx = self.text_stream.next(&mut self.rng);
            let attn = if self.rng.bernoulli(self.cfg.bidirectional_prob) {
                TextAttention::Bidirectional
            } else {
                TextAttention::LeftToRight
            };
            let mut enc = pack_text(&self.texts[idx], attn, self.cfg.max_length)?;
            if self.cfg.strip_conditions {
                enc.condition_id = None;
            }
            let masked = match &self.tfidf {
                Some(table) => apply_tfidf_masking(
                    enc,
                    table,
                    &mut self.rng,
                    self.cfg.mask_probability,
                    self.cfg.mask_style,
                    self.cfg.vocab_size,
                )?,
                None => apply_random_masking(
                    enc,
                    &mut self.rng,
                    self.cfg.mask_probability,
                    self.cfg.mask_style,
                    self.cfg.vocab_size,
                ),
            };
            samples.push(masked);
            n_text += 1;
        }

        Ok(Batch {
            n_dialogue: self.n_dialogue_per_batch,
            n_text,
            samples,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::vocab::NUM_RESERVED;
    use crate::data::SampleKind;

    fn tok(i: u32) -> u32 {
        NUM_RESERVED + i
    }

    fn corpus(n_dialogue: usize, n_text: usize) -> (Vec<DialogueSample>, Vec<TextSample>) {
        let dialogues = (0..n_dialogue)
            .map(|i| DialogueSample {
                history: vec![vec![tok(i as u32 % 5)]],
                condition_id: (i % 2) as u32,
                response: vec![tok(10 + (i % 7) as u32), tok(3)],
            })
            .collect();
        let texts = (0..n_text)
            .map(|i| TextSample {
                condition_id: (i % 2) as u32,
                text: vec![tok(20 + (i % 5) as u32), tok(4)],
            })
            .collect();
        (dialogues, texts)
    }

    fn cfg(batch: usize, seed: u64) -> SamplerConfig {
        SamplerConfig {
            batch_size: batch,
            vocab_size: 64,
            seed,
            ..SamplerConfig::default()
        }
    }

    #[test]
    fn batch_composition_is_exact() {
        let (d, t) = corpus(40, 12);
        let mut s = BatchSampler::new(&d, &t, cfg(160, 1)).unwrap();
        assert_eq!(s.composition(), (120, 40));
        let b = s.next_batch().unwrap();
        assert_eq!(b.n_dialogue, 120);
        assert_eq!(b.n_text, 40);
        assert_eq!(b.samples.len(), 160);
        let kinds: Vec<_> = b.samples.iter().map(|m| m.kind).collect();
        assert_eq!(
            kinds.iter().filter(|&&k| k == SampleKind::Dialogue).count(),
            120
        );

        let s4 = BatchSampler::new(&d, &t, cfg(4, 1)).unwrap();
        assert_eq!(s4.composition(), (3, 1));
    }

    #[test]
    fn empty_text_corpus_degrades_to_all_dialogue() {
        let (d, _) = corpus(10, 0);
        let mut s = BatchSampler::new(&d, &[], cfg(8, 1)).unwrap();
        assert!(s.all_dialogue_mode());
        let b = s.next_batch().unwrap();
        assert_eq!(b.n_dialogue, 8);
        assert_eq!(b.n_text, 0);
    }

    #[test]
    fn fixed_seed_reproduces_batch_stream() {
        let (d, t) = corpus(25, 9);
        let collect = || {
            let mut s = BatchSampler::new(&d, &t, cfg(8, 42)).unwrap();
            let mut ids = Vec::new();
            for _ in 0..10 {
                let b = s.next_batch().unwrap();
                for m in &b.samples {
                    ids.extend_from_slice(&m.enc.token_ids);
                    ids.extend(m.active.iter().map(|&a| a as u32));
                }
            }
            ids
        };
        assert_eq!(collect(), collect());
    }

    #[test]
    fn strip_conditions_flag() {
        let (d, t) = corpus(10, 4);
        let mut config = cfg(8, 3);
        config.strip_conditions = true;
        let mut s = BatchSampler::new(&d, &t, config).unwrap();
        let b = s.next_batch().unwrap();
        assert!(b.samples.iter().all(|m| m.enc.condition_id.is_none()));
    }

    #[test]
    fn random_text_masking_for_ablation() {
        let (d, t) = corpus(10, 4);
        let mut config = cfg(8, 3);
        config.text_masking = TextMasking::Random;
        let mut s = BatchSampler::new(&d, &t, config).unwrap();
        let b = s.next_batch().unwrap();
        // Text samples still present and masked.
        assert!(b
            .samples
            .iter()
            .filter(|m| m.kind == SampleKind::Text)
            .all(|m| m.active.iter().any(|&a| a)));
    }
}
