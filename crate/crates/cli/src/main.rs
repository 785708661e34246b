use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use condgen_cli::commands::{
    self, AblateGatesRequest, EvaluateRequest, GenerateRequest, InspectKind, TrainRequest,
};
use condgen_cli::config::RunConfig;
use condgen_cli::exit_code;
use condgen_core::data::TextAttention;
use condgen_core::synthetic::SyntheticConfig;
use condgen_core::train::AblationFlags;
use condgen_core::Result;

/// Conditioned dialogue generation toolkit: train a unified masked-attention
/// transformer on labeled dialogue plus labeled text, decode with beam
/// search, and score with the standard generation metrics.
#[derive(Parser)]
#[command(name = "condgen", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// Profile file of dotted config keys (JSON object).
    #[arg(long)]
    profile: Option<PathBuf>,
    /// Override one configuration key, e.g. --set model.hidden_size=64.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

impl ConfigArgs {
    fn build(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(profile) = &self.profile {
            cfg.apply_profile(profile)?;
        }
        cfg.apply_sets(&self.sets)?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Build a deterministic word-level vocabulary from corpus files.
    BuildVocab {
        /// Dialogue corpus files (JSONL).
        #[arg(long = "dialogue")]
        dialogue: Vec<PathBuf>,
        /// Text corpus files (JSONL).
        #[arg(long = "text")]
        text: Vec<PathBuf>,
        /// Tokens below this count map to [UNK].
        #[arg(long, default_value_t = 1)]
        min_count: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Precompute the tf-idf table of a text corpus.
    Tfidf {
        #[arg(long)]
        text: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes checkpoints, run log and the frozen config.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        dialogue: PathBuf,
        #[arg(long)]
        text: Option<PathBuf>,
        #[arg(long)]
        vocab: PathBuf,
        /// Held-out dialogue set for per-epoch perplexity.
        #[arg(long)]
        valid: Option<PathBuf>,
        /// Run directory (default: next free run-N under $CONDGEN_RUN_ROOT).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Train without condition labels (drops the text corpus too).
        #[arg(long)]
        no_condition: bool,
        /// Drop the extra text corpus, keep condition labels.
        #[arg(long)]
        no_ctext: bool,
        /// Mask text samples uniformly instead of by tf-idf.
        #[arg(long)]
        no_tfidf: bool,
        /// Gate variant: attention_routing, single_gate or double_gates.
        #[arg(long)]
        gate: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Decode a test file with beam search from a checkpoint.
    Generate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Beam size (default 10).
        #[arg(long)]
        beam: Option<usize>,
        #[arg(long)]
        max_new_tokens: Option<usize>,
        /// Length-normalization exponent for final ranking.
        #[arg(long)]
        alpha: Option<f64>,
        /// Disable duplicate-bigram blocking.
        #[arg(long)]
        no_bigram_block: bool,
        /// Allow [UNK] as a generation candidate.
        #[arg(long)]
        allow_unk: bool,
        /// Cross-check this vocabulary file against the checkpoint.
        #[arg(long)]
        vocab: Option<PathBuf>,
    },
    /// Score a hypotheses file against references; optionally compare a
    /// baseline system with paired significance tests.
    Evaluate {
        #[arg(long)]
        hypotheses: PathBuf,
        #[arg(long)]
        references: PathBuf,
        #[arg(long)]
        baseline: Option<PathBuf>,
        /// Write the machine-readable report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render the packed attention mask of one sample as a character grid.
    InspectMasks {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// "dialogue" or "text".
        #[arg(long, default_value = "dialogue")]
        kind: String,
        /// Text-sample attention: "bidirectional" or "left-to-right".
        #[arg(long, default_value = "bidirectional")]
        attn: String,
        #[arg(long, default_value_t = 80)]
        max_length: usize,
    },
    /// Train the three gating variants with identical seeds and emit the
    /// comparison table.
    AblateGates {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        dialogue: PathBuf,
        #[arg(long)]
        text: Option<PathBuf>,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Generate the bundled synthetic corpus (no external data needed).
    MakeSynthetic {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2000)]
        dialogues: usize,
        #[arg(long, default_value_t = 500)]
        texts: usize,
        #[arg(long, default_value_t = 200)]
        test: usize,
        #[arg(long, default_value_t = 2)]
        conditions: usize,
        #[arg(long, default_value_t = 50)]
        vocab_per_condition: usize,
        /// Fraction of each condition's vocabulary seen only in the text corpus.
        #[arg(long, default_value_t = 0.0)]
        text_only_fraction: f64,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::BuildVocab {
            dialogue,
            text,
            min_count,
            out,
        } => commands::cmd_build_vocab(&dialogue, &text, min_count, &out),
        Command::Tfidf { text, vocab, out } => commands::cmd_tfidf(&text, &vocab, &out),
        Command::Train {
            config,
            dialogue,
            text,
            vocab,
            valid,
            out,
            no_condition,
            no_ctext,
            no_tfidf,
            gate,
            epochs,
            batch_size,
            seed,
        } => {
            let mut run_config = config.build()?;
            if let Some(gate) = gate {
                run_config.set("model.gate", &gate)?;
            }
            if let Some(epochs) = epochs {
                run_config.set("train.epochs", &epochs.to_string())?;
            }
            if let Some(batch_size) = batch_size {
                run_config.set("train.batch_size", &batch_size.to_string())?;
            }
            if let Some(seed) = seed {
                run_config.set("train.seed", &seed.to_string())?;
            }
            let outcome = commands::cmd_train(&TrainRequest {
                config: run_config,
                dialogue,
                text,
                vocab,
                valid,
                out,
                ablations: AblationFlags {
                    no_condition,
                    no_ctext,
                    no_tfidf,
                },
            })?;
            println!(
                "run complete: {} steps, final loss {:.4}, artifacts in {}",
                outcome.log.steps.len(),
                outcome.log.final_loss().unwrap_or(f64::NAN),
                outcome.run_dir.display()
            );
            if let Some(epoch) = outcome.log.epochs.last() {
                if let Some(ppl) = epoch.val_perplexity {
                    println!("validation perplexity: {ppl:.3}");
                }
            }
            Ok(())
        }
        Command::Generate {
            config,
            checkpoint,
            input,
            out,
            beam,
            max_new_tokens,
            alpha,
            no_bigram_block,
            allow_unk,
            vocab,
        } => {
            let run_config = config.build()?;
            let mut decode = run_config.decode_config();
            if let Some(beam) = beam {
                decode.beam_size = beam;
            }
            if let Some(m) = max_new_tokens {
                decode.max_new_tokens = m;
            }
            if let Some(alpha) = alpha {
                decode.length_norm_alpha = alpha;
            }
            if no_bigram_block {
                decode.block_repeat_bigrams = false;
            }
            if allow_unk {
                decode.allow_unk = true;
            }
            commands::cmd_generate(&GenerateRequest {
                checkpoint,
                input,
                out,
                decode,
                vocab,
            })
        }
        Command::Evaluate {
            hypotheses,
            references,
            baseline,
            out,
        } => {
            commands::cmd_evaluate(&EvaluateRequest {
                hypotheses,
                references,
                baseline,
                out,
            })?;
            Ok(())
        }
        Command::InspectMasks {
            input,
            index,
            kind,
            attn,
            max_length,
        } => {
            let kind = match kind.as_str() {
                "dialogue" => InspectKind::Dialogue,
                "text" => InspectKind::Text {
                    attention: match attn.as_str() {
                        "bidirectional" => TextAttention::Bidirectional,
                        "left-to-right" | "l2r" => TextAttention::LeftToRight,
                        other => {
                            return Err(condgen_core::Error::Config(format!(
                                "unknown attention kind {other:?}"
                            )))
                        }
                    },
                },
                other => {
                    return Err(condgen_core::Error::Config(format!(
                        "unknown sample kind {other:?}"
                    )))
                }
            };
            let rendering = commands::cmd_inspect_masks(&input, index, kind, max_length)?;
            print!("{rendering}");
            Ok(())
        }
        Command::AblateGates {
            config,
            dialogue,
            text,
            vocab,
            test,
            out,
            epochs,
            batch_size,
            seed,
        } => {
            let mut run_config = config.build()?;
            if let Some(epochs) = epochs {
                run_config.set("train.epochs", &epochs.to_string())?;
            }
            if let Some(batch_size) = batch_size {
                run_config.set("train.batch_size", &batch_size.to_string())?;
            }
            if let Some(seed) = seed {
                run_config.set("train.seed", &seed.to_string())?;
            }
            commands::cmd_ablate_gates(&AblateGatesRequest {
                config: run_config,
                dialogue,
                text,
                vocab,
                test,
                out,
            })?;
            Ok(())
        }
        Command::MakeSynthetic {
            out,
            dialogues,
            texts,
            test,
            conditions,
            vocab_per_condition,
            text_only_fraction,
            seed,
        } => commands::cmd_make_synthetic(
            &SyntheticConfig {
                dialogues,
                texts,
                test,
                conditions,
                vocab_per_condition,
                text_only_fraction,
                seed,
            },
            &out,
        ),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err) as u8)
        }
    }
}
