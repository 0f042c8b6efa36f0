use std::path::{Path, PathBuf};

use thct_core::data::cache::{load_split, save_split};
use thct_core::data::synthetic::{generate_train_val, Archetype};
use thct_core::data::DatasetSplit;
use thct_core::train::eval::{evaluate, fusion_sweep, Metrics};
use thct_core::train::trainer::{BEST_CHECKPOINT, LAST_CHECKPOINT};
use thct_core::train::{train as run_training, Checkpoint, TrainOutput, TrainState};
use thct_core::verify::run_verification;
use thct_core::{ModelConfig, OpKind, ThctNet};

use crate::error::{CliError, Result};
use crate::settings::Settings;
use crate::{Common, EvalArgs, GenDataArgs, ModelFlags, TrainArgs, VerifyArgs};

const TRAIN_FILE: &str = "train.thctds";
const VAL_FILE: &str = "val.thctds";
const DEFAULT_DATA: &str = "data";
const DEFAULT_OUT: &str = "runs";

fn path_string(p: Option<PathBuf>) -> Option<String> {
    p.map(|p| p.display().to_string())
}

fn common_settings(common: &Common, base: ModelConfig) -> Result<Settings> {
    let mut s = Settings::load(common.config.as_deref(), base)?;
    s.flag("train.seed", common.seed)?;
    s.flag("num_classes", common.classes)?;
    s.harness_flag("data", path_string(common.data.clone()));
    s.harness_flag("out", path_string(common.out.clone()));
    Ok(s)
}

fn apply_model_flags(s: &mut Settings, m: &ModelFlags) -> Result<()> {
    s.flag("train.epochs", m.epochs)?;
    s.flag("train.lr", m.lr)?;
    s.flag("train.batch_size", m.batch)?;
    s.flag("window", m.window.as_deref())?;
    s.flag("fusion.weight", m.fusion_weight)
}

fn print_config(s: &Settings) {
    println!("# effective configuration");
    print!("{}", s.render());
    println!();
}

fn data_dir(s: &Settings) -> Result<PathBuf> {
    s.get_or("data", PathBuf::from(DEFAULT_DATA))
}

fn load(dir: &Path, file: &str) -> Result<DatasetSplit> {
    let path = dir.join(file);
    load_split(&path).map_err(|e| CliError::Data(format!("cannot load {}: {e}", path.display())))
}

fn check_classes(split: &DatasetSplit, cfg: &ModelConfig) -> Result<()> {
    if split.num_classes() != cfg.num_classes {
        return Err(CliError::Data(format!(
            "{} split has {} classes but the configuration expects {}",
            split.role.as_str(),
            split.num_classes(),
            cfg.num_classes
        )));
    }
    Ok(())
}

fn print_counts(path: &Path, split: &DatasetSplit) {
    println!("wrote {} ({} samples)", path.display(), split.len());
    for (name, count) in split.class_names.iter().zip(split.class_counts()) {
        println!("  {name:<12} {count}");
    }
}

pub fn gen_data(a: GenDataArgs) -> Result<()> {
    let mut s = common_settings(&a.common, ModelConfig::default())?;
    s.harness_flag("per_class", a.per_class);
    s.harness_flag("val_per_class", a.val_per_class);
    s.harness_flag("noise", a.noise);
    s.validate()?;
    let per_class: usize = s.get_or("per_class", 50)?;
    if per_class == 0 {
        return Err(CliError::Usage("--per-class must be at least 1".into()));
    }
    let val_per_class: usize = s.get_or("val_per_class", (per_class / 2).max(1))?;
    if val_per_class == 0 {
        return Err(CliError::Usage("--val-per-class must be at least 1".into()));
    }
    let noise: f64 = s.get_or("noise", 0.05)?;
    print_config(&s);
    let cfg = &s.model;
    let kinds = Archetype::first(cfg.num_classes).map_err(|e| CliError::Usage(e.to_string()))?;
    let (train, val) = generate_train_val(&kinds, per_class, val_per_class, cfg.frames, noise, cfg.train.seed)?;
    let dir = data_dir(&s)?;
    std::fs::create_dir_all(&dir)
        .map_err(|e| CliError::Data(format!("cannot create {}: {e}", dir.display())))?;
    for (split, file) in [(&train, TRAIN_FILE), (&val, VAL_FILE)] {
        let path = dir.join(file);
        save_split(split, &path).map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))?;
        print_counts(&path, split);
    }
    Ok(())
}

/// Name of the first configuration key whose value differs, ignoring the epoch count.
fn config_difference(a: &ModelConfig, b: &ModelConfig) -> Option<String> {
    let lines = |c: &ModelConfig| -> Vec<String> { c.to_text().lines().map(str::to_string).collect() };
    lines(a)
        .into_iter()
        .zip(lines(b))
        .find(|(x, y)| x != y && !x.starts_with("train.epochs"))
        .map(|(x, y)| format!("{x} vs {y}"))
}

pub fn train(a: TrainArgs) -> Result<()> {
    let mut s = common_settings(&a.common, ModelConfig::default())?;
    apply_model_flags(&mut s, &a.model)?;
    s.harness_flag("resume", a.resume.then_some(true));
    s.validate()?;
    print_config(&s);
    let dir = data_dir(&s)?;
    let (train, val) = (load(&dir, TRAIN_FILE)?, load(&dir, VAL_FILE)?);
    check_classes(&train, &s.model)?;
    check_classes(&val, &s.model)?;
    let out: PathBuf = s.get_or("out", PathBuf::from(DEFAULT_OUT))?;
    let last = out.join(LAST_CHECKPOINT);
    let mut state = if s.get_or("resume", false)? && last.exists() {
        let ckpt = Checkpoint::load(&last)?;
        let mut state = TrainState::from_checkpoint(&ckpt)?;
        if let Some(diff) = config_difference(&state.net.config, &s.model) {
            return Err(CliError::Usage(format!("cannot resume {}: configuration differs ({diff})", last.display())));
        }
        state.net.config.train.epochs = s.model.train.epochs;
        println!("resuming from {} after epoch {}", last.display(), state.epoch);
        state
    } else {
        TrainState::new(s.model.clone())?
    };
    println!(
        "{} parameters, {} train / {} val samples",
        state.net.num_parameters(),
        train.len(),
        val.len()
    );
    let total = s.model.train.epochs;
    let output = TrainOutput {
        dir: Some(out.clone()),
        stop_at: None,
    };
    run_training(&mut state, &train, &val, &output, |log| {
        println!(
            "epoch {:>3}/{total}  lr {:.2e}  train loss {:.4} top-1 {:.4}  val loss {:.4} top-1 {:.4}",
            log.epoch, log.lr, log.train_loss, log.train_top1, log.val_loss, log.val_top1
        );
    })?;
    println!("best val top-1 {:.4}; artifacts in {}", state.best_top1, out.display());
    Ok(())
}

fn print_metrics(title: &str, m: &Metrics, names: &[String], counts: &[usize]) {
    println!("per-class accuracy ({title}):");
    for ((name, acc), n) in names.iter().zip(&m.per_class).zip(counts) {
        match acc {
            Some(a) => println!("  {name:<12} {a:.4}  ({n} samples)"),
            None => println!("  {name:<12} -       (0 samples)"),
        }
    }
    println!("confusion matrix (rows: true class, columns: predicted):");
    print!("  {:<12}", "");
    for c in 0..names.len() {
        print!(" {c:>5}");
    }
    println!();
    for (c, row) in m.confusion.iter().enumerate() {
        print!("  {:<12}", format!("{c} {}", names[c]));
        for v in row {
            print!(" {v:>5}");
        }
        println!();
    }
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let mut s = common_settings(&a.common, ModelConfig::default())?;
    let out: PathBuf = s.get_or("out", PathBuf::from(DEFAULT_OUT))?;
    s.harness_flag("checkpoint", path_string(a.checkpoint.clone()));
    let ckpt_path: PathBuf = s.get_or("checkpoint", out.join(BEST_CHECKPOINT))?;
    let ckpt = Checkpoint::load(&ckpt_path)
        .map_err(|e| CliError::Data(format!("cannot load checkpoint {}: {e}", ckpt_path.display())))?;
    // The checkpoint's configuration is the base; file and flags override it.
    let mut s = common_settings(&a.common, ckpt.config()?)?;
    apply_model_flags(&mut s, &a.model)?;
    s.harness_flag("checkpoint", Some(ckpt_path.display()));
    s.harness_flag("split", a.split.clone());
    s.harness_flag("sweep_fusion", a.sweep_fusion.then_some(true));
    s.validate()?;
    print_config(&s);
    let split_name: String = s.get_or("split", "val".to_string())?;
    let file = match split_name.as_str() {
        "train" => TRAIN_FILE,
        "val" => VAL_FILE,
        other => return Err(CliError::Usage(format!("--split must be train or val, got {other:?}"))),
    };
    let mut net = ThctNet::<f32>::new(s.model.clone(), 0)?;
    ckpt.load_into(&mut net)?;
    let split = load(&data_dir(&s)?, file)?;
    check_classes(&split, &s.model)?;
    let report = evaluate(&mut net, &split)?;
    let fusion = s.model.fusion;
    println!(
        "{split_name}: {} samples, {} classes, checkpoint epoch {}",
        split.len(),
        split.num_classes(),
        ckpt.epoch
    );
    println!(
        "top-1 fused {:.4}  transformer {:.4}  cnn {:.4}  ({} fusion, w={})",
        report.fused.top1,
        report.transformer.top1,
        report.cnn.top1,
        fusion.space.as_str(),
        fusion.weight
    );
    println!("loss {:.6}", report.loss);
    print_metrics("fused", &report.fused, &split.class_names, &split.class_counts());
    if s.get_or("sweep_fusion", false)? {
        println!("fusion sweep ({} space; w weights the transformer stream):", fusion.space.as_str());
        println!("  {:<5} {}", "w", "top-1");
        for (w, acc) in fusion_sweep(&report.scores, fusion.space, s.model.num_classes)? {
            println!("  {w:<5.1} {acc:.4}");
        }
    }
    Ok(())
}

pub fn verify(a: VerifyArgs) -> Result<()> {
    let mut s = Settings::load(a.config.as_deref(), ModelConfig::gradcheck(2))?;
    s.flag("train.seed", a.seed)?;
    s.harness_flag("fault", a.fault.clone());
    let fault = match s.get::<String>("fault")? {
        Some(name) => {
            let op: OpKind = name.parse().map_err(|e: thct_core::Error| CliError::Usage(e.to_string()))?;
            if op == OpKind::Leaf {
                return Err(CliError::Usage("leaf has no backward rule to fault".into()));
            }
            Some(op)
        }
        None => None,
    };
    let seed = s.model.train.seed;
    println!("# verify seed {seed}{}", fault.map(|f| format!(", fault {f}")).unwrap_or_default());
    let report = run_verification(fault, seed)?;
    println!("oracle suites (max abs diff, tolerance {:e}):", thct_core::verify::ORACLE_TOLERANCE);
    for suite in ["conv2d", "conv3d", "matmul", "attention"] {
        let cases: Vec<_> = report.oracles.iter().filter(|c| c.suite == suite).collect();
        let max = cases.iter().map(|c| c.max_abs_diff).fold(0.0, f64::max);
        let ok = cases.iter().all(|c| c.passed());
        println!("  {suite:<10} {:>3} shapes  {max:.2e}  {}", cases.len(), status(ok));
    }
    println!("structure:");
    for c in &report.structure {
        println!("  {:<52} {}  {}", c.name, status(c.passed), c.detail);
    }
    println!("gradient checks (max relative error, tolerance {:e}):", report.model.tolerance);
    for l in &report.layers {
        println!("  {:<16} {:.2e}  {}", l.layer, l.report.max_rel_error(), status(l.passed()));
    }
    let m = &report.model;
    println!(
        "  {:<16} {:.2e}  {}  ({} tensors; {} kink-crossing entries re-differenced, error at the nominal step alone {:.2e})",
        "model",
        m.max_rel_error(),
        status(m.passed()),
        m.params.len(),
        m.kink_entries(),
        m.max_strict_rel_error()
    );
    if report.passed() {
        if let Some(op) = fault {
            println!("warning: fault in {op} was not detected");
        }
        println!("all checks passed");
        return Ok(());
    }
    let mut failing = report.failing_layers();
    if report.oracles.iter().any(|c| !c.passed()) {
        failing.push("oracles".into());
    }
    if report.structure.iter().any(|c| !c.passed) {
        failing.push("structure".into());
    }
    let cause = fault.map(|f| format!("backward rule of op `{f}` was faulted; ")).unwrap_or_default();
    Err(CliError::Verify(format!("{cause}failing checks: {}", failing.join(", "))))
}

fn status(ok: bool) -> &'static str {
    if ok {
        "ok"
    } else {
        "FAIL"
    }
}
