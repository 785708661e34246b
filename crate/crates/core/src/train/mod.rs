//! Masked-LM training loop: AdamW with linear warmup/decay, pooled loss over
//! mixed batches, per-epoch checkpoints and the ablation switches.

mod optim;

pub use optim::{clip_global_norm, lr_at, AdamW};

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{
    apply_random_masking, pack_dialogue, BatchSampler, Corpus, DialogueSample, MaskStyle,
    SamplerConfig, TextMasking, Vocabulary,
};
use crate::error::{Error, Result};
use crate::model::{Checkpoint, Model, ParamBinder, RunMode};
use crate::rng::Rng;
use crate::tensor::Reduction;
use crate::Tape;

/// Ablation switches for the condition/text-corpus machinery.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationFlags {
    /// Train without condition labels; also drops the extra text corpus.
    pub no_condition: bool,
    /// Drop the extra text corpus but keep condition labels.
    pub no_ctext: bool,
    /// Mask text samples uniformly instead of by tf-idf.
    pub no_tfidf: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Peak learning rate. The from-scratch toy default is larger than the
    /// usual fine-tuning value, which assumes a pretrained initialization;
    /// the shipped `paper.cfg` profile restores the reference recipe.
    pub learning_rate: f64,
    pub warmup_proportion: f64,
    pub weight_decay: f64,
    pub label_smoothing: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Global-norm gradient clip; None disables.
    pub clip_norm: Option<f64>,
    pub mask_probability: f64,
    pub mask_style: MaskStyle,
    /// Probability of bidirectional attention for a text sample.
    pub bidirectional_prob: f64,
    pub ablations: AblationFlags,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            warmup_proportion: 0.1,
            weight_decay: 0.01,
            label_smoothing: 0.0,
            epochs: 4,
            batch_size: 32,
            seed: 17,
            clip_norm: Some(1.0),
            mask_probability: 0.25,
            mask_style: MaskStyle::PureMask,
            bidirectional_prob: 0.5,
            ablations: AblationFlags::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.warmup_proportion) {
            return Err(Error::Config("warmup_proportion must lie in [0, 1]".into()));
        }
        if self.learning_rate < 0.0 || self.weight_decay < 0.0 || self.label_smoothing < 0.0 {
            return Err(Error::Config("rates must be non-negative".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "epochs and batch_size must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.mask_probability) {
            return Err(Error::Config("mask_probability must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Resolved data-pipeline settings after applying the ablation switches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EffectivePipeline {
    pub use_texts: bool,
    pub text_masking: TextMasking,
    pub strip_conditions: bool,
}

/// Map ablation flags onto the pipeline. `no_condition` already implies the
/// text corpus is dropped, so combining it with the text-specific flags is a
/// contradiction and is rejected before any compute.
pub fn resolve_ablation(flags: AblationFlags) -> Result<EffectivePipeline> {
    if flags.no_condition && (flags.no_ctext || flags.no_tfidf) {
        return Err(Error::Config(
            "--no-condition already excludes the text corpus; combining it with \
             --no-ctext or --no-tfidf is contradictory"
                .into(),
        ));
    }
    if flags.no_ctext && flags.no_tfidf {
        return Err(Error::Config(
            "--no-ctext removes text batches, so --no-tfidf has nothing to change".into(),
        ));
    }
    Ok(EffectivePipeline {
        use_texts: !(flags.no_condition || flags.no_ctext),
        text_masking: if flags.no_tfidf {
            TextMasking::Random
        } else {
            TextMasking::TfIdf
        },
        strip_conditions: flags.no_condition,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub n_dialogue: usize,
    pub n_text: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub val_perplexity: Option<f64>,
}

/// Machine-readable account of one training run.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RunLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    pub notes: Vec<String>,
    pub wall_clock_secs: f64,
}

impl RunLog {
    pub fn final_loss(&self) -> Option<f64> {
        self.steps.last().map(|s| s.loss)
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut body = String::new();
        for note in &self.notes {
            body.push_str(&serde_json::json!({ "note": note }).to_string());
            body.push('\n');
        }
        for s in &self.steps {
            body.push_str(&serde_json::to_string(s).unwrap());
            body.push('\n');
        }
        for e in &self.epochs {
            body.push_str(&serde_json::to_string(e).unwrap());
            body.push('\n');
        }
        body.push_str(&serde_json::json!({ "wall_clock_secs": self.wall_clock_secs }).to_string());
        body.push('\n');
        std::fs::write(path, body).map_err(|e| Error::io(path, e))
    }
}

/// Train the model in place. Loss is the mean cross-entropy over every
/// active masked position in the batch, dialogue and text pooled. Writes a
/// checkpoint per epoch (plus `checkpoint.json`) and a run log when
/// `run_dir` is given. Divergence aborts with the last epoch checkpoint
/// intact on disk.
pub fn train(
    model: &mut Model,
    corpus: &Corpus,
    valid: Option<&[DialogueSample]>,
    cfg: &TrainConfig,
    vocab: &Vocabulary,
    run_dir: Option<&Path>,
) -> Result<RunLog> {
    cfg.validate()?;
    let pipeline = resolve_ablation(cfg.ablations)?;
    let start = Instant::now();

    let texts: &[crate::data::TextSample] = if pipeline.use_texts {
        &corpus.texts
    } else {
        &[]
    };
    let sampler_cfg = SamplerConfig {
        batch_size: cfg.batch_size,
        mask_probability: cfg.mask_probability,
        text_masking: pipeline.text_masking,
        mask_style: cfg.mask_style,
        bidirectional_prob: cfg.bidirectional_prob,
        max_length: model.config().max_length,
        vocab_size: model.config().vocab_size,
        strip_conditions: pipeline.strip_conditions,
        seed: cfg.seed,
    };
    let mut sampler = BatchSampler::new(&corpus.dialogues, texts, sampler_cfg)?;

    let mut log = RunLog::default();
    if sampler.all_dialogue_mode() && !corpus.texts.is_empty() {
        log.notes
            .push("text corpus excluded by ablation; all-dialogue batches".into());
    } else if sampler.all_dialogue_mode() {
        log.notes
            .push("no text corpus; degraded to all-dialogue batches (w/o-ctext mode)".into());
    }
    if pipeline.strip_conditions {
        log.notes
            .push("condition labels stripped (w/o-condition mode)".into());
    }
    if pipeline.text_masking == TextMasking::Random && pipeline.use_texts {
        log.notes
            .push("uniform text masking (w/o-tfidf mode)".into());
    }

    let (n_dialogue_per_batch, _) = sampler.composition();
    let steps_per_epoch = corpus.dialogues.len().div_ceil(n_dialogue_per_batch).max(1);
    let total_steps = steps_per_epoch * cfg.epochs;

    let mut optimizer = AdamW::new(model.params(), cfg.weight_decay);
    let mut dropout_rng = Rng::from_seed_stream(cfg.seed, 0xD0);

    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let mut epoch_loss_sum = 0.0;
        for _ in 0..steps_per_epoch {
            let batch = sampler.next_batch()?;
            let mut tape = Tape::new();
            let mut binder = ParamBinder::new(model.params());
            let mut mode = RunMode::train(&mut dropout_rng);

            let mut total_active = 0usize;
            let mut pooled = None;
            for sample in &batch.samples {
                let (loss_sum, active) = model.mlm_loss(
                    &mut tape,
                    &mut binder,
                    sample,
                    cfg.label_smoothing,
                    Reduction::Sum,
                    &mut mode,
                )?;
                total_active += active;
                pooled = Some(match pooled {
                    None => loss_sum,
                    Some(acc) => tape.add(acc, loss_sum)?,
                });
            }
            let pooled = pooled.ok_or_else(|| Error::Data("empty batch".into()))?;
            let loss_id = tape.scale(pooled, 1.0 / total_active as f64)?;
            let loss = tape.value(loss_id)[0];
            if !loss.is_finite() {
                if let Some(dir) = run_dir {
                    log.wall_clock_secs = start.elapsed().as_secs_f64();
                    let _ = log.write_jsonl(&dir.join("runlog.jsonl"));
                }
                return Err(Error::Numerical(format!(
                    "loss diverged ({loss}) at step {step}; last epoch checkpoint retained"
                )));
            }

            tape.backward(loss_id)?;
            binder.write_back_grads(&tape, model.params_mut());
            if let Some(max_norm) = cfg.clip_norm {
                clip_global_norm(model.params_mut(), max_norm);
            }
            let lr = lr_at(step, total_steps, cfg.learning_rate, cfg.warmup_proportion);
            optimizer.step(model.params_mut(), lr)?;
            model.params_mut().zero_grads();

            epoch_loss_sum += loss;
            log.steps.push(StepRecord {
                step,
                loss,
                lr,
                n_dialogue: batch.n_dialogue,
                n_text: batch.n_text,
            });
            step += 1;
        }

        let val_perplexity = match valid {
            Some(samples) if !samples.is_empty() => {
                Some(validate(model, samples, cfg.mask_probability, cfg.seed)?)
            }
            _ => None,
        };
        log.epochs.push(EpochRecord {
            epoch,
            mean_loss: epoch_loss_sum / steps_per_epoch as f64,
            val_perplexity,
        });

        if let Some(dir) = run_dir {
            let ckpt = Checkpoint::capture(
                model,
                vocab,
                &corpus.conditions,
                step as u64,
                Some(optimizer.state()),
            );
            ckpt.save(&dir.join(format!("checkpoint-epoch-{epoch}.json")))?;
            ckpt.save(&dir.join("checkpoint.json"))?;
        }
    }

    log.wall_clock_secs = start.elapsed().as_secs_f64();
    if let Some(dir) = run_dir {
        log.write_jsonl(&dir.join("runlog.jsonl"))?;
    }
    Ok(log)
}

/// Masked-LM perplexity on a held-out dialogue set: exp(mean NLL over masked
/// positions), with masking drawn from a fixed validation stream so repeated
/// calls are identical.
pub fn validate(
    model: &Model,
    samples: &[DialogueSample],
    mask_probability: f64,
    seed: u64,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Data("validation set is empty".into()));
    }
    let mut rng = Rng::from_seed_stream(seed, 0x7A11);
    let mut total_nll = 0.0;
    let mut total_active = 0usize;
    for sample in samples {
        let Ok(enc) = pack_dialogue(sample, model.config().max_length) else {
            continue;
        };
        let enc = if (enc.condition_id.unwrap_or(0) as usize) < model.config().num_conditions {
            enc
        } else {
            let mut e = enc;
            e.condition_id = None;
            e
        };
        let masked = apply_random_masking(
            enc,
            &mut rng,
            mask_probability,
            MaskStyle::PureMask,
            model.config().vocab_size,
        );
        let mut tape = Tape::new();
        let mut binder = ParamBinder::new(model.params());
        let (loss_id, active) = model.mlm_loss(
            &mut tape,
            &mut binder,
            &masked,
            0.0,
            Reduction::Sum,
            &mut RunMode::eval(),
        )?;
        total_nll += tape.value(loss_id)[0];
        total_active += active;
    }
    if total_active == 0 {
        return Err(Error::Data(
            "validation set produced no masked positions".into(),
        ));
    }
    Ok((total_nll / total_active as f64).exp())
}
