//! Command implementations behind the CLI surface.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use condgen_core::data::{
    load_dialogue_records, load_text_records, pack_dialogue, pack_text, Corpus, DialogueSample,
    TextAttention, TextSample, TfIdfTable, Vocabulary,
};
use condgen_core::decode::{generate_file, DecodeConfig, HypothesisRecord};
use condgen_core::metrics::{
    paired_t_test, significance_mark, tokenize, EvalPair, EvalReport, TTest,
};
use condgen_core::model::{Checkpoint, ConditionBiasMask, GateVariant, Model};
use condgen_core::rng::Rng;
use condgen_core::synthetic::{self, SyntheticConfig};
use condgen_core::train::{resolve_ablation, train, AblationFlags, RunLog};
use condgen_core::{Error, Result};

use crate::config::RunConfig;

pub const RUN_ROOT_ENV: &str = "CONDGEN_RUN_ROOT";

/// Guard file preventing two processes from writing one run directory.
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(run_dir: &Path) -> Result<Self> {
        let path = run_dir.join(".lock");
        match std::fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
        {
            Ok(_) => Ok(RunLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Config(format!(
                "run directory {} is locked (stale .lock file?)",
                run_dir.display()
            ))),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

/// Resolve the run directory: explicit path, or the first free `run-N` under
/// `$CONDGEN_RUN_ROOT` (default `./runs`).
pub fn resolve_run_dir(out: Option<PathBuf>) -> Result<PathBuf> {
    let dir = match out {
        Some(dir) => dir,
        None => {
            let root = std::env::var(RUN_ROOT_ENV).unwrap_or_else(|_| "runs".into());
            let root = PathBuf::from(root);
            let mut n = 0;
            loop {
                let candidate = root.join(format!("run-{n}"));
                if !candidate.exists() {
                    break candidate;
                }
                n += 1;
            }
        }
    };
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

// ── build-vocab ──────────────────────────────────────────────────────

pub fn cmd_build_vocab(
    dialogue: &[PathBuf],
    text: &[PathBuf],
    min_count: u64,
    out: &Path,
) -> Result<()> {
    if dialogue.is_empty() && text.is_empty() {
        return Err(Error::Config(
            "build-vocab needs at least one corpus file".into(),
        ));
    }
    let mut texts: Vec<String> = Vec::new();
    for path in dialogue {
        for r in load_dialogue_records(path)? {
            texts.extend(r.history);
            texts.push(r.response);
        }
    }
    for path in text {
        for r in load_text_records(path)? {
            texts.push(r.text);
        }
    }
    let vocab = Vocabulary::build(texts.iter().map(|s| s.as_str()), min_count)?;
    vocab.save(out)?;
    println!(
        "wrote vocabulary of {} tokens ({} reserved) to {}",
        vocab.len(),
        condgen_core::data::NUM_RESERVED,
        out.display()
    );
    Ok(())
}

// ── tfidf ────────────────────────────────────────────────────────────

pub fn cmd_tfidf(text: &Path, vocab_path: &Path, out: &Path) -> Result<()> {
    let vocab = Vocabulary::load(vocab_path)?;
    let records = load_text_records(text)?;
    let texts: Vec<TextSample> = records
        .iter()
        .map(|r| TextSample {
            condition_id: 0,
            text: vocab.encode(&r.text),
        })
        .collect();
    let table = TfIdfTable::compute(&texts)?;
    table.save(out, &vocab)?;
    println!(
        "wrote tf-idf table over {} documents to {}",
        table.n_docs(),
        out.display()
    );
    Ok(())
}

// ── train ────────────────────────────────────────────────────────────

pub struct TrainRequest {
    pub config: RunConfig,
    pub dialogue: PathBuf,
    pub text: Option<PathBuf>,
    pub vocab: PathBuf,
    pub valid: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub ablations: AblationFlags,
}

pub struct TrainOutcome {
    pub run_dir: PathBuf,
    pub log: RunLog,
}

pub fn cmd_train(req: &TrainRequest) -> Result<TrainOutcome> {
    // Reject contradictory ablation flags before any compute.
    resolve_ablation(req.ablations)?;
    let train_cfg = req.config.train_config(req.ablations)?;
    train_cfg.validate()?;

    let vocab = Vocabulary::load(&req.vocab)?;
    let corpus = Corpus::load(&req.dialogue, req.text.as_deref(), &vocab)?;
    let valid = match &req.valid {
        Some(path) => {
            let recs = load_dialogue_records(path)?;
            let mut conditions = corpus.conditions.clone();
            Some(
                recs.iter()
                    .map(|r| DialogueSample {
                        history: r.history.iter().map(|u| vocab.encode(u)).collect(),
                        condition_id: conditions.intern(&r.condition),
                        response: vocab.encode(&r.response),
                    })
                    .collect::<Vec<_>>(),
            )
        }
        None => None,
    };

    let num_conditions = if req.ablations.no_condition {
        0
    } else {
        corpus.conditions.len()
    };
    let model_cfg = req.config.model_config(vocab.len(), num_conditions)?;
    let mut init_rng = Rng::from_seed_stream(train_cfg.seed, 0x1A17);
    let mut model = Model::new(model_cfg, &mut init_rng)?;

    let run_dir = resolve_run_dir(req.out.clone())?;
    let _lock = RunLock::acquire(&run_dir)?;
    req.config.freeze(&run_dir.join("config.json"))?;

    let log = train(
        &mut model,
        &corpus,
        valid.as_deref(),
        &train_cfg,
        &vocab,
        Some(&run_dir),
    )?;
    Ok(TrainOutcome { run_dir, log })
}

// ── generate ─────────────────────────────────────────────────────────

pub struct GenerateRequest {
    pub checkpoint: PathBuf,
    pub input: PathBuf,
    pub out: PathBuf,
    pub decode: DecodeConfig,
    /// Optional vocabulary cross-check.
    pub vocab: Option<PathBuf>,
}

pub fn cmd_generate(req: &GenerateRequest) -> Result<()> {
    let (model, vocab, conditions) = Checkpoint::load(&req.checkpoint)?.restore()?;
    if let Some(vocab_path) = &req.vocab {
        let external = Vocabulary::load(vocab_path)?;
        if external.fingerprint() != vocab.fingerprint() {
            return Err(Error::Vocab(format!(
                "vocabulary mismatch: checkpoint {:016x} vs {} {:016x}",
                vocab.fingerprint(),
                vocab_path.display(),
                external.fingerprint()
            )));
        }
    }
    let summary = generate_file(
        &model,
        &vocab,
        &conditions,
        &req.input,
        &req.out,
        &req.decode,
    )?;
    println!(
        "generated {} hypotheses to {} (skipped {}) | avgLen {:.2}",
        summary.count,
        req.out.display(),
        summary.skipped,
        summary.avg_len
    );
    Ok(())
}

// ── evaluate ─────────────────────────────────────────────────────────

pub fn read_hypothesis_records(path: &Path) -> Result<Vec<HypothesisRecord>> {
    let body = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (lineno, line) in body.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: HypothesisRecord = serde_json::from_str(line).map_err(|e| {
            Error::Data(format!(
                "{}:{}: malformed hypothesis record: {e}",
                path.display(),
                lineno + 1
            ))
        })?;
        records.push(rec);
    }
    Ok(records)
}

/// Align hypothesis records against a dialogue-format references file by
/// record index; the first out-of-range or duplicated index is an error.
pub fn read_eval_pairs(hyp_path: &Path, ref_path: &Path) -> Result<Vec<EvalPair>> {
    let hyps = read_hypothesis_records(hyp_path)?;
    let refs = load_dialogue_records(ref_path)?;
    let mut seen = vec![false; refs.len()];
    let mut pairs = Vec::with_capacity(hyps.len());
    for rec in &hyps {
        if rec.index >= refs.len() {
            return Err(Error::Data(format!(
                "hypothesis index {} has no reference (references file has {} records)",
                rec.index,
                refs.len()
            )));
        }
        if seen[rec.index] {
            return Err(Error::Data(format!(
                "duplicate hypothesis index {}",
                rec.index
            )));
        }
        seen[rec.index] = true;
        pairs.push(EvalPair {
            index: rec.index,
            hypothesis: tokenize(&rec.hypothesis),
            reference: tokenize(&refs[rec.index].response),
        });
    }
    if pairs.is_empty() {
        return Err(Error::Data("hypotheses file is empty".into()));
    }
    Ok(pairs)
}

pub struct MetricComparison {
    pub metric: &'static str,
    pub test: TTest,
    pub mark: &'static str,
}

/// Paired per-metric significance of `baseline` against `ours` on the
/// retained per-sample scores.
pub fn compare_systems(ours: &EvalReport, baseline: &EvalReport) -> Result<Vec<MetricComparison>> {
    let pairs: [(&'static str, &Vec<f64>, &Vec<f64>); 8] = [
        ("BLEU-1", &ours.per_sample.bleu1, &baseline.per_sample.bleu1),
        ("BLEU-2", &ours.per_sample.bleu2, &baseline.per_sample.bleu2),
        ("BLEU-3", &ours.per_sample.bleu3, &baseline.per_sample.bleu3),
        (
            "ROUGE-L",
            &ours.per_sample.rouge_l,
            &baseline.per_sample.rouge_l,
        ),
        ("CIDEr", &ours.per_sample.cider, &baseline.per_sample.cider),
        ("Dist-1", &ours.per_sample.dist1, &baseline.per_sample.dist1),
        ("Dist-2", &ours.per_sample.dist2, &baseline.per_sample.dist2),
        (
            "avgLen",
            &ours.per_sample.length,
            &baseline.per_sample.length,
        ),
    ];
    let mut out = Vec::with_capacity(pairs.len());
    for (metric, a, b) in pairs {
        let test = paired_t_test(a, b)?;
        out.push(MetricComparison {
            metric,
            test,
            mark: significance_mark(test.p),
        });
    }
    Ok(out)
}

fn report_row(name: &str, r: &EvalReport, marks: Option<&HashMap<&str, &str>>) -> String {
    let m = |key: &str| -> String {
        marks
            .and_then(|m| m.get(key))
            .map(|s| format!("({s})"))
            .unwrap_or_default()
    };
    format!(
        "{name:<12} {:>8.3}{:<4} {:>8.3}{:<4} {:>8.3}{:<4} {:>8.4}{:<4} {:>8.4}{:<4} {:>7.4}{:<4} {:>7.4}{:<4} {:>7.2}{:<4}",
        r.bleu1, m("BLEU-1"),
        r.bleu2, m("BLEU-2"),
        r.bleu3, m("BLEU-3"),
        r.rouge_l, m("ROUGE-L"),
        r.cider, m("CIDEr"),
        r.dist1, m("Dist-1"),
        r.dist2, m("Dist-2"),
        r.avg_len, m("avgLen"),
    )
}

pub struct EvaluateRequest {
    pub hypotheses: PathBuf,
    pub references: PathBuf,
    pub baseline: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

pub fn cmd_evaluate(req: &EvaluateRequest) -> Result<EvalReport> {
    let pairs = read_eval_pairs(&req.hypotheses, &req.references)?;
    let report = condgen_core::metrics::evaluate(&pairs)?;

    let header = format!(
        "{:<12} {:>8}     {:>8}     {:>8}     {:>8}     {:>8}     {:>7}     {:>7}     {:>7}",
        "system", "BLEU-1", "BLEU-2", "BLEU-3", "ROUGE-L", "CIDEr", "Dist-1", "Dist-2", "avgLen"
    );
    println!("{header}");
    println!("{}", report_row("ours", &report, None));

    let mut baseline_block = None;
    if let Some(baseline_path) = &req.baseline {
        let base_pairs = read_eval_pairs(baseline_path, &req.references)?;
        if base_pairs.len() != pairs.len()
            || base_pairs
                .iter()
                .zip(&pairs)
                .any(|(a, b)| a.index != b.index)
        {
            let first = base_pairs
                .iter()
                .zip(&pairs)
                .find(|(a, b)| a.index != b.index)
                .map(|(a, _)| a.index)
                .unwrap_or_else(|| base_pairs.len().min(pairs.len()));
            return Err(Error::Data(format!(
                "baseline and system hypotheses are misaligned (first mismatching index {first})"
            )));
        }
        let base_report = condgen_core::metrics::evaluate(&base_pairs)?;
        let comparisons = compare_systems(&report, &base_report)?;
        let marks: HashMap<&str, &str> = comparisons.iter().map(|c| (c.metric, c.mark)).collect();
        println!("{}", report_row("baseline", &base_report, Some(&marks)));
        println!("marks: ** p<0.01, * p<0.05, / not significant (two-sided paired t-test)");
        baseline_block = Some((base_report, comparisons));
    }

    if let Some(out) = &req.out {
        let mut doc = serde_json::json!({ "system": report });
        if let Some((base_report, comparisons)) = &baseline_block {
            doc["baseline"] = serde_json::to_value(base_report)
                .map_err(|e| Error::Data(format!("report serialization: {e}")))?;
            doc["significance"] = serde_json::Value::Object(
                comparisons
                    .iter()
                    .map(|c| {
                        (
                            c.metric.to_string(),
                            serde_json::json!({ "t": c.test.t, "p": c.test.p, "mark": c.mark }),
                        )
                    })
                    .collect(),
            );
        }
        let body = serde_json::to_string_pretty(&doc)
            .map_err(|e| Error::Data(format!("report serialization: {e}")))?;
        std::fs::write(out, body + "\n").map_err(|e| Error::io(out, e))?;
    }
    Ok(report)
}

// ── inspect-masks ────────────────────────────────────────────────────

pub enum InspectKind {
    Dialogue,
    Text { attention: TextAttention },
}

pub fn cmd_inspect_masks(
    input: &Path,
    index: usize,
    kind: InspectKind,
    max_length: usize,
) -> Result<String> {
    let mut out = String::new();
    let enc = match kind {
        InspectKind::Dialogue => {
            let records = load_dialogue_records(input)?;
            let record = records.get(index).ok_or_else(|| {
                Error::Usage(format!(
                    "index {index} out of range ({} records)",
                    records.len()
                ))
            })?;
            let joined = format!("{} {}", record.history.join(" "), record.response);
            let vocab = Vocabulary::build([joined.as_str()], 1)?;
            let sample = DialogueSample {
                history: record.history.iter().map(|u| vocab.encode(u)).collect(),
                condition_id: 0,
                response: vocab.encode(&record.response),
            };
            pack_dialogue(&sample, max_length)?
        }
        InspectKind::Text { attention } => {
            let records = load_text_records(input)?;
            let record = records.get(index).ok_or_else(|| {
                Error::Usage(format!(
                    "index {index} out of range ({} records)",
                    records.len()
                ))
            })?;
            let vocab = Vocabulary::build([record.text.as_str()], 1)?;
            let sample = TextSample {
                condition_id: 0,
                text: vocab.encode(&record.text),
            };
            pack_text(&sample, attention, max_length)?
        }
    };
    let n = enc.len();
    out.push_str(&format!(
        "packed length {n} ({} source + {} target positions)\n",
        enc.n_source,
        n - enc.n_source
    ));
    out.push_str("attention mask ('.' open, '#' blocked):\n");
    let boundary = if enc.n_source > 0 {
        Some(enc.n_source)
    } else {
        None
    };
    out.push_str(&enc.mask.render(boundary));
    out.push_str("condition-route bias mask M_b (rows [condition, generic]):\n");
    out.push_str(&ConditionBiasMask::from_type_ids(&enc.type_ids).render());
    Ok(out)
}

// ── make-synthetic ───────────────────────────────────────────────────

pub fn cmd_make_synthetic(cfg: &SyntheticConfig, out: &Path) -> Result<()> {
    let corpus = synthetic::generate(cfg)?;
    synthetic::write_dir(&corpus, out)?;
    println!(
        "wrote synthetic corpus to {}: {} dialogues, {} texts, {} test samples, {} conditions",
        out.display(),
        corpus.dialogue.len(),
        corpus.text.len(),
        corpus.test.len(),
        corpus.meta.conditions.len()
    );
    Ok(())
}

// ── ablate-gates ─────────────────────────────────────────────────────

pub struct AblateGatesRequest {
    pub config: RunConfig,
    pub dialogue: PathBuf,
    pub text: Option<PathBuf>,
    pub vocab: PathBuf,
    pub test: PathBuf,
    pub out: PathBuf,
}

pub struct GateRow {
    pub variant: GateVariant,
    pub bleu1: f64,
    pub bleu2: f64,
    pub dist2: f64,
    pub marks: [&'static str; 3],
    pub final_loss: f64,
}

/// Train the three gate variants with identical seeds and data order, decode
/// the shared test set, and emit the three-row (BLEU-1, BLEU-2, Dist-2)
/// comparison with paired significance marks against attention routing.
pub fn cmd_ablate_gates(req: &AblateGatesRequest) -> Result<Vec<GateRow>> {
    std::fs::create_dir_all(&req.out).map_err(|e| Error::io(&req.out, e))?;
    let variants = [
        GateVariant::SingleGate,
        GateVariant::DoubleGates,
        GateVariant::AttentionRouting,
    ];

    let mut reports: Vec<(GateVariant, EvalReport, f64)> = Vec::new();
    for variant in variants {
        let mut config = req.config.clone();
        config.model.gate = variant.to_string();
        let run_dir = req.out.join(variant.to_string());
        std::fs::create_dir_all(&run_dir).map_err(|e| Error::io(&run_dir, e))?;
        let outcome = cmd_train(&TrainRequest {
            config: config.clone(),
            dialogue: req.dialogue.clone(),
            text: req.text.clone(),
            vocab: req.vocab.clone(),
            valid: None,
            out: Some(run_dir.clone()),
            ablations: AblationFlags::default(),
        })?;
        let hyp_path = run_dir.join("hypotheses.jsonl");
        cmd_generate(&GenerateRequest {
            checkpoint: run_dir.join("checkpoint.json"),
            input: req.test.clone(),
            out: hyp_path.clone(),
            decode: config.decode_config(),
            vocab: None,
        })?;
        let pairs = read_eval_pairs(&hyp_path, &req.test)?;
        let report = condgen_core::metrics::evaluate(&pairs)?;
        reports.push((
            variant,
            report,
            outcome.log.final_loss().unwrap_or(f64::NAN),
        ));
    }

    let routing = reports
        .iter()
        .find(|(v, _, _)| *v == GateVariant::AttentionRouting)
        .map(|(_, r, _)| r.clone())
        .expect("routing variant always trained");

    let mut rows = Vec::new();
    for (variant, report, final_loss) in &reports {
        let marks = if *variant == GateVariant::AttentionRouting {
            ["-", "-", "-"]
        } else {
            let b1 = paired_t_test(&routing.per_sample.bleu1, &report.per_sample.bleu1)?;
            let b2 = paired_t_test(&routing.per_sample.bleu2, &report.per_sample.bleu2)?;
            let d2 = paired_t_test(&routing.per_sample.dist2, &report.per_sample.dist2)?;
            [
                significance_mark(b1.p),
                significance_mark(b2.p),
                significance_mark(d2.p),
            ]
        };
        rows.push(GateRow {
            variant: *variant,
            bleu1: report.bleu1,
            bleu2: report.bleu2,
            dist2: report.dist2,
            marks,
            final_loss: *final_loss,
        });
    }

    // Human-readable table plus a machine-readable comparison file.
    println!(
        "{:<18} {:>10} {:>10} {:>10}",
        "gate", "BLEU-1", "BLEU-2", "Dist-2"
    );
    for row in &rows {
        println!(
            "{:<18} {:>8.3}({}) {:>7.3}({}) {:>7.4}({})",
            row.variant.to_string(),
            row.bleu1,
            row.marks[0],
            row.bleu2,
            row.marks[1],
            row.dist2,
            row.marks[2]
        );
    }
    let doc: Vec<serde_json::Value> = rows
        .iter()
        .map(|r| {
            serde_json::json!({
                "gate": r.variant.to_string(),
                "bleu1": r.bleu1,
                "bleu2": r.bleu2,
                "dist2": r.dist2,
                "marks": r.marks,
                "final_loss": r.final_loss,
            })
        })
        .collect();
    let cmp_path = req.out.join("comparison.json");
    let body = serde_json::to_string_pretty(&doc)
        .map_err(|e| Error::Data(format!("comparison serialization: {e}")))?;
    std::fs::write(&cmp_path, body + "\n").map_err(|e| Error::io(&cmp_path, e))?;
    Ok(rows)
}
