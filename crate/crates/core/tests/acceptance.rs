//! One PASS/FAIL line per acceptance criterion.
//!
//! Run with `cargo test --release -p thct-core --test acceptance -- --nocapture`.

mod common;

use std::time::{Duration, Instant};

use thct_core::train::eval::{evaluate, fusion_sweep, stream_scores};
use thct_core::train::trainer::METRICS_FILE;
use thct_core::train::{train, Checkpoint, TrainOutput, TrainState};
use thct_core::verify::{
    layer_gradcheck_suite, model_gradcheck, oracle_suite, structure_checks, GradCheckOptions, ORACLE_CASES,
};
use thct_core::{FusionSpace, ModelConfig};

const GRAD_STEP: f64 = 1e-3;
const GRAD_TOLERANCE: f64 = 1e-4;
const GRAD_BUDGET: Duration = Duration::from_secs(120);
const ORACLE_TOLERANCE: f64 = 1e-5;
const ORACLE_BUDGET: Duration = Duration::from_secs(60);
const FUSED_TARGET: f64 = 0.95;
const STREAM_TARGET: f64 = 0.85;
const TRAIN_EPOCHS: usize = 30;
const TRAIN_BUDGET: Duration = Duration::from_secs(600);

struct Outcome {
    id: usize,
    title: &'static str,
    passed: bool,
    lines: Vec<String>,
}

fn report(o: &Outcome) {
    println!("{} [{}] {}", if o.passed { "PASS" } else { "FAIL" }, o.id, o.title);
    for l in &o.lines {
        println!("       {l}");
    }
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let opts = GradCheckOptions {
        step: GRAD_STEP,
        tolerance: GRAD_TOLERANCE,
        fault: None,
    };
    let layers = layer_gradcheck_suite(opts, 0).unwrap();
    let cfg = ModelConfig::gradcheck(2);
    let model = model_gradcheck(&cfg, opts, 0).unwrap();
    let elapsed = start.elapsed();
    let layer_max = layers.iter().map(|l| l.report.max_rel_error()).fold(0.0, f64::max);
    let failing: Vec<_> = layers.iter().filter(|l| !l.passed()).map(|l| l.layer.clone()).collect();
    let values: usize = model.params.iter().map(|p| p.numel).sum();
    let mut lines = vec![
        format!("{} layer checks, max rel error {layer_max:.2e}, failing {failing:?}", layers.len()),
        format!(
            "micro model (U={}, D={}, L={}, H={}): {} tensors / {values} values, max rel error {:.2e}",
            cfg.tokens().unwrap(),
            cfg.transformer.d_model,
            cfg.transformer.layers,
            cfg.transformer.heads,
            model.params.len(),
            model.max_rel_error()
        ),
        format!(
            "{} entries straddled a ReLU kink at h={GRAD_STEP:e} and were re-differenced with a smaller step; \
             error with every entry at h={GRAD_STEP:e}: {:.2e}",
            model.kink_entries(),
            model.max_strict_rel_error()
        ),
        format!("tolerance {GRAD_TOLERANCE:e}, runtime {elapsed:.1?} (budget {GRAD_BUDGET:?})"),
    ];
    if let Some(w) = model.worst() {
        lines.push(format!("worst model tensor {} ({:.2e})", w.name, w.rel_error));
    }
    Outcome {
        id: 1,
        title: "gradient correctness over every layer type and the micro model",
        passed: failing.is_empty() && model.passed() && elapsed < GRAD_BUDGET,
        lines,
    }
}

fn kernel_oracles() -> Outcome {
    let start = Instant::now();
    let cases = oracle_suite(0).unwrap();
    let elapsed = start.elapsed();
    let mut lines = Vec::new();
    let mut passed = elapsed < ORACLE_BUDGET;
    for suite in ["conv2d", "conv3d", "matmul", "attention"] {
        let of: Vec<_> = cases.iter().filter(|c| c.suite == suite).collect();
        let max = of.iter().map(|c| c.max_abs_diff).fold(0.0, f64::max);
        passed &= of.len() >= ORACLE_CASES && max < ORACLE_TOLERANCE;
        lines.push(format!("{suite}: {} shapes, max abs diff {max:.2e}", of.len()));
    }
    lines.push(format!("tolerance {ORACLE_TOLERANCE:e}, runtime {elapsed:.1?} (budget {ORACLE_BUDGET:?})"));
    Outcome {
        id: 2,
        title: "kernel outputs match brute-force oracles",
        passed,
        lines,
    }
}

fn structure() -> Outcome {
    let checks = structure_checks(0).unwrap();
    Outcome {
        id: 3,
        title: "structural checks (token count, degenerate attention, static motion)",
        passed: checks.iter().all(|c| c.passed),
        lines: checks
            .iter()
            .map(|c| format!("{} {}: {}", if c.passed { "ok  " } else { "FAIL" }, c.name, c.detail))
            .collect(),
    }
}

/// Criteria 4 and 5 share one training run.
fn end_to_end() -> (Outcome, Outcome) {
    let (tr, val) = common::micro_data(4, 50, 25, 7);
    let mut cfg = ModelConfig::micro(4);
    cfg.train.epochs = TRAIN_EPOCHS;
    cfg.train.seed = 7;
    let start = Instant::now();
    let mut state = TrainState::new(cfg.clone()).unwrap();
    let mut best = 0.0f64;
    train(&mut state, &tr, &val, &TrainOutput::default(), |log| best = best.max(log.val_top1)).unwrap();
    let elapsed = start.elapsed();
    let report = evaluate(&mut state.net, &val).unwrap();
    let (f, t, c) = (report.fused.top1, report.transformer.top1, report.cnn.top1);
    let e2e = Outcome {
        id: 4,
        title: "desk-scale end-to-end on the synthetic 4-class set",
        passed: f >= FUSED_TARGET && t >= STREAM_TARGET && c >= STREAM_TARGET && elapsed < TRAIN_BUDGET,
        lines: vec![
            format!("{} train / {} val, {TRAIN_EPOCHS} epochs, lr {}", tr.len(), val.len(), cfg.train.lr),
            format!("final val top-1: fused {f:.3} (target {FUSED_TARGET}), best fused {best:.3}"),
            format!("transformer alone {t:.3}, CNN alone {c:.3} (target {STREAM_TARGET} each)"),
            format!("runtime {elapsed:.1?} (budget {TRAIN_BUDGET:?})"),
        ],
    };

    // The trained streams agree perfectly, so also sweep an untrained network
    // whose streams disagree.
    let mut fresh = thct_core::ThctNet::<f32>::new(cfg.clone(), 1).unwrap();
    let untrained = evaluate(&mut fresh, &val).unwrap();
    let mut lines = Vec::new();
    let mut passed = true;
    for (label, r) in [("trained", &report), ("untrained", &untrained)] {
        let (t, c) = (r.transformer.top1, r.cnn.top1);
        for space in [FusionSpace::Logit, FusionSpace::Probability] {
            let sweep = fusion_sweep(&r.scores, space, cfg.num_classes).unwrap();
            let (w0, w1) = (sweep.first().unwrap(), sweep.last().unwrap());
            let ok = w0.0 == 0.0 && w1.0 == 1.0 && w0.1 == c && w1.1 == t;
            passed &= ok;
            lines.push(format!(
                "{label} {}: w=0 -> {:.3} (CNN {c:.3}), w=1 -> {:.3} (transformer {t:.3}){}",
                space.as_str(),
                w0.1,
                w1.1,
                if ok { "" } else { "  MISMATCH" }
            ));
        }
    }
    let fusion = Outcome {
        id: 5,
        title: "fusion sweep endpoints equal the single-stream accuracies",
        passed,
        lines,
    };
    (e2e, fusion)
}

fn determinism() -> Outcome {
    let (tr, val) = common::micro_data(2, 8, 4, 11);
    let mut cfg = ModelConfig::micro(2);
    cfg.train.epochs = 3;
    cfg.train.milestones = vec![2];
    cfg.train.batch_size = 4;
    let dirs: Vec<_> = (0..3).map(|_| tempfile::tempdir().unwrap()).collect();
    let run = |dir: &std::path::Path, stop_at| {
        let mut s = TrainState::new(cfg.clone()).unwrap();
        let out = TrainOutput {
            dir: Some(dir.to_path_buf()),
            stop_at,
        };
        train(&mut s, &tr, &val, &out, |_| {}).unwrap();
        s
    };
    let mut a = run(dirs[0].path(), None);
    run(dirs[1].path(), None);
    let csv = |d: &tempfile::TempDir| std::fs::read(d.path().join(METRICS_FILE)).unwrap();
    let csv_same = csv(&dirs[0]) == csv(&dirs[1]);

    let path = dirs[0].path().join("probe.ckpt");
    a.checkpoint().save(&path).unwrap();
    let (mut loaded, _) = Checkpoint::load(&path).unwrap().restore().unwrap();
    let (x, y) = (stream_scores(&mut a.net, &val, 4).unwrap(), stream_scores(&mut loaded, &val, 4).unwrap());
    let bits = |s: &thct_core::train::StreamScores| {
        s.transformer.iter().chain(&s.cnn).flatten().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    let logits_same = bits(&x) == bits(&y);

    run(dirs[2].path(), Some(1));
    let ckpt = Checkpoint::load(&dirs[2].path().join("last.ckpt")).unwrap();
    let mut resumed = TrainState::from_checkpoint(&ckpt).unwrap();
    let out = TrainOutput {
        dir: Some(dirs[2].path().to_path_buf()),
        stop_at: None,
    };
    train(&mut resumed, &tr, &val, &out, |_| {}).unwrap();
    let params_same = a.net.store.ids().all(|id| a.net.store.get(id).bit_eq(resumed.net.store.get(id)));
    let resume_same = params_same && csv(&dirs[0]) == csv(&dirs[2]);
    let mark = |b: bool| if b { "identical" } else { "DIFFERENT" };
    Outcome {
        id: 6,
        title: "determinism and persistence",
        passed: csv_same && logits_same && resume_same,
        lines: vec![
            format!("metrics CSV across two runs: {}", mark(csv_same)),
            format!("eval logits after checkpoint save/load: {}", mark(logits_same)),
            format!("resume at epoch 1 vs uninterrupted (CSV and parameters): {}", mark(resume_same)),
        ],
    }
}

fn ntu_fixtures() -> Outcome {
    let outcomes = common::ntu_fixture_outcomes();
    Outcome {
        id: 7,
        title: "NTU skeleton parser fixtures (benchmark accuracies are not a desk-scale target)",
        passed: !outcomes.is_empty() && outcomes.iter().all(|o| o.passed),
        lines: outcomes
            .iter()
            .map(|o| format!("{} {}: {}", if o.passed { "ok  " } else { "FAIL" }, o.name, o.detail))
            .collect(),
    }
}

#[test]
fn acceptance() {
    let mut all = Vec::new();
    for f in [gradient_correctness, kernel_oracles, structure] {
        let o = f();
        report(&o);
        all.push(o);
    }
    let (e2e, fusion) = end_to_end();
    report(&e2e);
    report(&fusion);
    all.extend([e2e, fusion]);
    for f in [determinism, ntu_fixtures] {
        let o = f();
        report(&o);
        all.push(o);
    }
    let failed: Vec<_> = all.iter().filter(|o| !o.passed).map(|o| o.id).collect();
    println!("{} of {} criteria passed", all.len() - failed.len(), all.len());
    assert!(failed.is_empty(), "failing criteria: {failed:?}");
}
