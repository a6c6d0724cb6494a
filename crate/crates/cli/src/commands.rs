use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use qta_core::checks::{run_suite, Suite};
use qta_core::data::{gen_routing, load_meta, load_split, save_split_dataset};
use qta_core::encoders::Vocab;
use qta_core::fusion::QuestionTypeSet;
use qta_core::io::{write_atomic, write_json_atomic};
use qta_core::metrics::{evaluate_model, norm_report};
use qta_core::models::{build_model, load_checkpoint, save_checkpoint, train_with, Architecture, ModelSpec};

use crate::config::{RunConfig, RESOLVED_CONFIG};
use crate::CliError;

pub const CHECKPOINT_FILE: &str = "model.qtac";
pub const LOSS_CURVE_FILE: &str = "loss_curve.csv";
pub const EVAL_REPORT_FILE: &str = "eval_report.json";
pub const CONFUSION_FILE: &str = "confusion.json";

fn require(path: &Path) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(qta_core::Error::Data(format!("{} does not exist", path.display())).into())
    }
}

pub fn gen_data(config: Option<&Path>, out: &Path, seed: Option<u64>, threads: usize) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(s) = seed {
        cfg.data.seed = s;
    }
    cfg.threads = threads;
    cfg.paths.out = Some(out.to_path_buf());
    let data = gen_routing(&cfg.data)?;
    save_split_dataset(&data, out)?;
    write_json_atomic(&out.join(RESOLVED_CONFIG), &cfg)?;
    println!(
        "wrote {} train / {} test samples ({} types, {} answers) to {}",
        data.train.len(),
        data.test.len(),
        data.meta.types.len(),
        data.meta.answers.len(),
        out.display()
    );
    Ok(())
}

pub struct TrainOverrides {
    pub epochs: Option<usize>,
    pub arch: Option<String>,
    pub lr: Option<f64>,
}

fn parse_arch(name: &str) -> Result<Architecture, CliError> {
    serde_json::from_value(serde_json::Value::String(name.to_string())).map_err(|_| {
        let known: Vec<&str> = Architecture::ALL.iter().map(|a| a.name()).collect();
        CliError::Usage(format!("unknown architecture {name:?}; expected one of {}", known.join(", ")))
    })
}

pub fn train(config: Option<&Path>, data: &Path, out: &Path, ov: TrainOverrides, threads: usize) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(e) = ov.epochs {
        cfg.train.epochs = e;
    }
    if let Some(a) = ov.arch {
        cfg.model.architecture = parse_arch(&a)?;
    }
    if let Some(lr) = ov.lr {
        cfg.train.learning_rate = lr;
    }
    cfg.threads = threads;
    cfg.paths.data = Some(data.to_path_buf());
    cfg.paths.out = Some(out.to_path_buf());
    cfg.paths.checkpoint = Some(out.join(CHECKPOINT_FILE));

    require(data)?;
    let meta = load_meta(data)?;
    cfg.model.sources = meta.sources.clone();
    cfg.model.validate()?;
    cfg.train.validate()?;
    let train_split = load_split(data, "train")?;
    let vocab = Vocab::build(train_split.samples.iter().map(|s| s.question.as_str()));
    let types = QuestionTypeSet::new(meta.types.clone())?;
    let mut model = build_model(&cfg.model, &vocab, &types, &meta.answers)?;
    let encoded = model.encode(&train_split)?;
    eprintln!(
        "training {} ({} parameters) on {} samples for {} epochs",
        cfg.model.architecture.name(),
        model.num_parameters(),
        encoded.len(),
        cfg.train.epochs
    );
    let curve = train_with(&mut model, &encoded, &cfg.train, |epoch, loss, _| {
        eprintln!("epoch {:>4}  loss {loss:.6}", epoch + 1);
        Ok(())
    })?;

    let mut csv = String::from("epoch,loss\n");
    for (i, l) in curve.iter().enumerate() {
        writeln!(csv, "{},{l}", i + 1).unwrap();
    }
    std::fs::create_dir_all(out).map_err(qta_core::Error::from)?;
    save_checkpoint(&model, &out.join(CHECKPOINT_FILE))?;
    write_atomic(&out.join(LOSS_CURVE_FILE), csv.as_bytes())?;
    write_json_atomic(&out.join(RESOLVED_CONFIG), &cfg)?;
    println!("wrote {}", out.join(CHECKPOINT_FILE).display());
    Ok(())
}

/// Inputs of an evaluation, written next to its reports.
#[derive(Serialize)]
struct EvalRecord<'a> {
    checkpoint: &'a Path,
    data: &'a Path,
    split: &'a str,
    model: &'a ModelSpec,
}

pub fn eval(checkpoint: &Path, data: &Path, report: &Path, split: &str) -> Result<(), CliError> {
    require(checkpoint)?;
    require(data)?;
    let model = load_checkpoint(checkpoint)?;
    let ds = load_split(data, split)?;
    let samples = model.encode(&ds)?;
    let (eval, confusion) = evaluate_model(&model, &samples)?;
    write_json_atomic(&report.join(EVAL_REPORT_FILE), &eval)?;
    if let Some(c) = &confusion {
        write_json_atomic(&report.join(CONFUSION_FILE), c)?;
    }
    let record = EvalRecord {
        checkpoint,
        data,
        split,
        model: model.spec(),
    };
    write_json_atomic(&report.join(RESOLVED_CONFIG), &record)?;
    println!(
        "overall {:.2}%  arithmetic MPT {:.2}  harmonic MPT {:.2}",
        eval.overall_acc, eval.arithmetic_mpt, eval.harmonic_mpt
    );
    for (t, acc) in &eval.per_type_acc {
        println!("  {t:<12} {acc:6.2}%  (n = {})", eval.n_per_type[t]);
    }
    for t in &eval.absent_types {
        println!("  {t:<12}    n/a  (no samples)");
    }
    Ok(())
}

pub fn check(suite: &str, trials: Option<usize>, eps: Option<f64>, seed: u64, report: Option<&Path>) -> Result<(), CliError> {
    let s = Suite::parse(suite).ok_or_else(|| {
        let known: Vec<&str> = Suite::ALL.iter().map(|s| s.name()).collect();
        CliError::Usage(format!("unknown suite {suite:?}; expected one of {}", known.join(", ")))
    })?;
    let result = run_suite(s, trials, eps, seed)?;
    for m in &result.measurements {
        println!(
            "[{}] {}: {:e} (threshold {:e})",
            if m.passed { "PASS" } else { "FAIL" },
            m.name,
            m.value,
            m.threshold
        );
    }
    if let Some(path) = report {
        write_json_atomic(path, &result)?;
    }
    if result.passed {
        println!("suite {} passed", result.suite);
        Ok(())
    } else {
        let failed: Vec<&str> = result
            .measurements
            .iter()
            .filter(|m| !m.passed)
            .map(|m| m.name.as_str())
            .collect();
        Err(CliError::CheckFailed(failed.join("; ")))
    }
}

#[derive(Serialize)]
struct NormsRecord<'a> {
    checkpoint: &'a Path,
    data: &'a Path,
    split: &'a str,
    out: &'a Path,
}

pub fn norms(checkpoint: &Path, data: &Path, out: &Path, split: &str) -> Result<(), CliError> {
    require(checkpoint)?;
    require(data)?;
    let model = load_checkpoint(checkpoint)?;
    let ds = load_split(data, split)?;
    let samples = model.encode(&ds)?;
    let report = norm_report(&model, &samples)?;
    write_atomic(out, report.to_csv().as_bytes())?;
    let mut cfg_path = PathBuf::from(out);
    cfg_path.set_extension("config.json");
    write_json_atomic(
        &cfg_path,
        &NormsRecord {
            checkpoint,
            data,
            split,
            out,
        },
    )?;
    println!("wrote {} rows to {}", report.rows.len(), out.display());
    Ok(())
}
