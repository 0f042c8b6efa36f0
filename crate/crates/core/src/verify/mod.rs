//! Verification harness: brute-force oracle comparisons and finite-difference
//! gradient checks over every layer type and the full micro model.

pub mod gradcheck;
pub mod oracle;

use rand::{Rng as _, SeedableRng};

use crate::autograd::{OpKind, Tape, Var};
use crate::config::ModelConfig;
use crate::data::skeleton::{motion_difference, SequenceMeta, SkeletonSequence};
use crate::error::Result;
use crate::model::{positional_encoding, prepare_batch, AttentionBlock, ThctNet};
use crate::nn::{BatchNorm, Conv, Linear, Mode};
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::tensor::Tensor;
use crate::train::loss::two_stream_loss;
use crate::Rng;

pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport, ParamError};

/// Absolute tolerance of the forward oracle comparisons.
pub const ORACLE_TOLERANCE: f64 = 1e-5;
/// Seeded random shapes per oracle suite.
pub const ORACLE_CASES: usize = 10;

/// Outcome of one forward oracle comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleCase {
    pub suite: &'static str,
    pub shape: String,
    pub max_abs_diff: f64,
}

impl OracleCase {
    pub fn passed(&self) -> bool {
        self.max_abs_diff < ORACLE_TOLERANCE
    }
}

fn uniform(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

fn conv_case(spatial: usize, rng: &mut Rng) -> Result<OracleCase> {
    let n = rng.random_range(1..=2);
    let (cin, cout) = (rng.random_range(1..=4), rng.random_range(1..=4));
    let mut xs = vec![n, cin];
    let mut ws = vec![cout, cin];
    let (mut stride, mut pad) = (Vec::new(), Vec::new());
    for _ in 0..spatial {
        let extent = rng.random_range(if spatial == 3 { 2..=5 } else { 3..=9 });
        let k = rng.random_range(1..=3.min(extent));
        xs.push(extent);
        ws.push(k);
        stride.push(rng.random_range(1..=2));
        pad.push(rng.random_range(0..=k / 2));
    }
    let x = uniform(&xs, rng);
    let w = uniform(&ws, rng);
    let b = uniform(&[cout], rng);
    let mut tape = Tape::new();
    let (xv, wv, bv) = (tape.constant(x.clone()), tape.constant(w.clone()), tape.constant(b.clone()));
    let y = tape.conv(xv, wv, bv, &stride, &pad)?;
    let reference = oracle::conv_direct(&x, &w, &b, &stride, &pad)?;
    Ok(OracleCase {
        suite: if spatial == 2 { "conv2d" } else { "conv3d" },
        shape: format!("x{xs:?} w{ws:?} stride{stride:?} pad{pad:?}"),
        max_abs_diff: tape.value(y).max_abs_diff(&reference)?,
    })
}

fn matmul_case(rng: &mut Rng) -> Result<OracleCase> {
    let (m, k, n) = (rng.random_range(1..=16), rng.random_range(1..=16), rng.random_range(1..=16));
    let (a, b) = (uniform(&[m, k], rng), uniform(&[k, n], rng));
    Ok(OracleCase {
        suite: "matmul",
        shape: format!("{m}x{k} * {k}x{n}"),
        max_abs_diff: a.matmul(&b)?.max_abs_diff(&oracle::matmul_naive(&a, &b)?)?,
    })
}

fn attention_case(rng: &mut Rng) -> Result<OracleCase> {
    let n = rng.random_range(1..=3);
    let heads = rng.random_range(1..=3);
    let d = heads * rng.random_range(1..=3);
    let c_qkv = rng.random_range(1..=4);
    let grid = [rng.random_range(1..=4), rng.random_range(1..=3), rng.random_range(1..=2)];
    let u: usize = grid.iter().product();
    let mut store = ParamStore::<f64>::new();
    let c_beta = c_qkv * rng.random_range(1..=6);
    let block = AttentionBlock::with_dims(&mut store, "b", d, heads, c_qkv, u, c_beta, rng)?;
    store.get_mut(block.alpha).data_mut()[0] = rng.random_range(-2.0..2.0);
    *store.get_mut(block.bias) = uniform(&[u, u], rng);
    let mut xs = vec![n, d];
    xs.extend_from_slice(&grid);
    let x = uniform(&xs, rng);
    let pe = uniform(&[d, u], rng);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let mut pe_shape = vec![d];
    pe_shape.extend_from_slice(&grid);
    let pv = tape.constant(pe.reshape(pe_shape)?);
    let pv = tape.repeat(pv, n)?;
    let y = block.attention(&mut tape, &store, xv, pv)?;
    let reference = oracle::attention_reference(&store, &block, &x, &pe)?;
    Ok(OracleCase {
        suite: "attention",
        shape: format!("N={n} D={d} H={heads} Cqkv={c_qkv} grid={grid:?}"),
        max_abs_diff: tape.value(y).max_abs_diff(&reference)?,
    })
}

/// Compares convolution, matmul and attention against their direct-loop
/// oracles on [`ORACLE_CASES`] seeded random shapes each (64-bit).
pub fn oracle_suite(seed: u64) -> Result<Vec<OracleCase>> {
    let mut rng = Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for _ in 0..ORACLE_CASES {
        out.push(conv_case(2, &mut rng)?);
    }
    for _ in 0..ORACLE_CASES {
        out.push(conv_case(3, &mut rng)?);
    }
    for _ in 0..ORACLE_CASES {
        out.push(matmul_case(&mut rng)?);
    }
    for _ in 0..ORACLE_CASES {
        out.push(attention_case(&mut rng)?);
    }
    Ok(out)
}

/// Gradient-check result for one layer type (all its shapes merged).
#[derive(Clone, Debug)]
pub struct LayerCheck {
    pub layer: String,
    pub report: GradCheckReport,
}

impl LayerCheck {
    pub fn passed(&self) -> bool {
        self.report.passed()
    }
}

/// `Σ y ⊙ r` with a fixed random `r`, so every output element matters.
fn project(tape: &mut Tape<f64>, y: Var, rng_seed: u64) -> Result<Var> {
    let mut rng = Rng::seed_from_u64(rng_seed);
    let r = tape.constant(uniform(tape.shape(y), &mut rng));
    let p = tape.mul(y, r)?;
    Ok(tape.sum(p))
}

/// Inputs with magnitudes in `[0.1, 1]` keep ReLU arguments away from the kink.
fn input(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let mag: f64 = rng.random_range(0.1..1.0);
        if rng.random_bool(0.5) {
            mag
        } else {
            -mag
        }
    })
}

type Builder = Box<dyn Fn(&mut Tape<f64>, &mut ParamStore<f64>) -> Result<Var>>;

fn check_layer(
    layer: &str,
    cases: Vec<(ParamStore<f64>, Builder)>,
    opts: GradCheckOptions,
) -> Result<LayerCheck> {
    let mut params = Vec::new();
    for (i, (mut store, f)) in cases.into_iter().enumerate() {
        let report = grad_check(&mut store, |t, s| f(t, s), opts)?;
        params.extend(report.params.into_iter().map(|mut p| {
            p.name = format!("case{i}/{}", p.name);
            p
        }));
    }
    Ok(LayerCheck {
        layer: layer.to_string(),
        report: GradCheckReport {
            params,
            tolerance: opts.tolerance,
        },
    })
}

fn input_store(shape: &[usize], rng: &mut Rng) -> Result<(ParamStore<f64>, ParamId)> {
    let mut store = ParamStore::new();
    let id = store.add("input", input(shape, rng), ParamKind::Trainable)?;
    Ok((store, id))
}

fn linear_cases(rng: &mut Rng) -> Result<Vec<(ParamStore<f64>, Builder)>> {
    [(2usize, 3usize, 4usize), (4, 5, 2), (3, 1, 6)]
        .into_iter()
        .map(|(n, fin, fout)| {
            let (mut store, x) = input_store(&[n, fin], rng)?;
            let layer = Linear::new(&mut store, "linear", fin, fout, rng)?;
            let f: Builder = Box::new(move |t, s| {
                let xv = t.param(s, x);
                let y = layer.forward(t, s, xv)?;
                project(t, y, 1)
            });
            Ok((store, f))
        })
        .collect()
}

fn conv_cases<const D: usize>(rng: &mut Rng, shapes: &[([usize; D], [usize; D], usize)]) -> Result<Vec<(ParamStore<f64>, Builder)>> {
    shapes
        .iter()
        .map(|&(extent, kernel, stride)| {
            let (cin, cout) = (2, 3);
            let mut xs = vec![2, cin];
            xs.extend_from_slice(&extent);
            let (mut store, x) = input_store(&xs, rng)?;
            let pad = kernel.map(|k| k / 2);
            let layer = Conv::<D>::new(&mut store, "conv", cin, cout, kernel, [stride; D], pad, rng)?;
            let f: Builder = Box::new(move |t, s| {
                let xv = t.param(s, x);
                let y = layer.forward(t, s, xv)?;
                project(t, y, 2)
            });
            Ok((store, f))
        })
        .collect()
}

fn batchnorm_cases(rng: &mut Rng, mode: Mode) -> Result<Vec<(ParamStore<f64>, Builder)>> {
    [vec![3, 2, 4], vec![2, 3, 2, 3], vec![4, 2]]
        .into_iter()
        .map(|shape| {
            let (mut store, x) = input_store(&shape, rng)?;
            let bn = BatchNorm::new(&mut store, "bn", shape[1])?;
            let c = shape[1];
            *store.get_mut(bn.gamma) = input(&[c], rng);
            *store.get_mut(bn.beta) = input(&[c], rng);
            *store.get_mut(bn.running_mean) = input(&[c], rng);
            *store.get_mut(bn.running_var) = Tensor::from_fn([c], |_| rng.random_range(0.5..2.0));
            let f: Builder = Box::new(move |t, s| {
                let xv = t.param(s, x);
                let y = bn.forward(t, s, xv, mode)?;
                // Squaring makes the train-mode objective depend on more than the affine shift.
                let y2 = t.mul(y, y)?;
                let y = t.add(y, y2)?;
                project(t, y, 3)
            });
            Ok((store, f))
        })
        .collect()
}

fn unary_cases(
    rng: &mut Rng,
    shapes: &[Vec<usize>],
    op: fn(&mut Tape<f64>, Var) -> Result<Var>,
) -> Result<Vec<(ParamStore<f64>, Builder)>> {
    shapes
        .iter()
        .map(|shape| {
            let (store, x) = input_store(shape, rng)?;
            let f: Builder = Box::new(move |t, s| {
                let xv = t.param(s, x);
                let y = op(t, xv)?;
                project(t, y, 4)
            });
            Ok((store, f))
        })
        .collect()
}

fn binary_cases(
    rng: &mut Rng,
    shapes: &[(Vec<usize>, Vec<usize>)],
    op: fn(&mut Tape<f64>, Var, Var) -> Result<Var>,
) -> Result<Vec<(ParamStore<f64>, Builder)>> {
    shapes
        .iter()
        .map(|(sa, sb)| {
            let mut store = ParamStore::new();
            let a = store.add("a", input(sa, rng), ParamKind::Trainable)?;
            let b = store.add("b", input(sb, rng), ParamKind::Trainable)?;
            let f: Builder = Box::new(move |t, s| {
                let (av, bv) = (t.param(s, a), t.param(s, b));
                let y = op(t, av, bv)?;
                project(t, y, 5)
            });
            Ok((store, f))
        })
        .collect()
}

fn attention_block_cases(rng: &mut Rng) -> Result<Vec<(ParamStore<f64>, Builder)>> {
    [(2usize, 4usize, 2usize, [4usize, 1, 1]), (1, 6, 3, [2, 2, 1]), (3, 2, 1, [1, 3, 2])]
        .into_iter()
        .map(|(n, d, heads, grid)| {
            let u: usize = grid.iter().product();
            let mut xs = vec![n, d];
            xs.extend_from_slice(&grid);
            let (mut store, x) = input_store(&xs, rng)?;
            let block = AttentionBlock::with_dims(&mut store, "attn", d, heads, 2, u, 4, rng)?;
            *store.get_mut(block.bias) = input(&[u, u], rng);
            let mut pe_shape = vec![d];
            pe_shape.extend_from_slice(&grid);
            let pe = positional_encoding::<f64>(u, d)?.permute(&[1, 0])?.reshape(pe_shape)?;
            let f: Builder = Box::new(move |t, s| {
                let xv = t.param(s, x);
                let p = t.constant(pe.clone());
                let p = t.repeat(p, n)?;
                let y = block.forward(t, s, xv, p)?;
                project(t, y, 6)
            });
            Ok((store, f))
        })
        .collect()
}

fn cross_entropy_cases(rng: &mut Rng) -> Result<Vec<(ParamStore<f64>, Builder)>> {
    [(2usize, 2usize, 0.0, 1.0), (3, 4, 0.1, 1.0), (5, 3, 0.2, 0.5)]
        .into_iter()
        .map(|(n, k, eps, tau)| {
            let (store, x) = input_store(&[n, k], rng)?;
            let targets: Vec<usize> = (0..n).map(|i| i % k).collect();
            let f: Builder = Box::new(move |t, s| {
                let xv = t.param(s, x);
                t.cross_entropy_smoothed(xv, &targets, eps, tau)
            });
            Ok((store, f))
        })
        .collect()
}

/// Gradient checks for every differentiable op and layer, three shapes each.
pub fn layer_gradcheck_suite(opts: GradCheckOptions, seed: u64) -> Result<Vec<LayerCheck>> {
    let mut rng = Rng::seed_from_u64(seed);
    let r = &mut rng;
    let shapes3 = [vec![2, 3], vec![3, 2, 2], vec![1, 2, 3, 2]];
    let mut out = vec![
        check_layer("linear", linear_cases(r)?, opts)?,
        check_layer(
            "conv1d",
            conv_cases::<1>(r, &[([5], [3], 1), ([6], [2], 2), ([4], [1], 1)])?,
            opts,
        )?,
        check_layer(
            "conv2d",
            conv_cases::<2>(r, &[([4, 5], [3, 3], 1), ([5, 3], [3, 1], 1), ([6, 6], [2, 3], 2)])?,
            opts,
        )?,
        check_layer(
            "conv3d",
            conv_cases::<3>(
                r,
                &[([3, 2, 2], [1, 1, 1], 1), ([5, 2, 1], [5, 1, 1], 1), ([3, 3, 2], [3, 3, 2], 2)],
            )?,
            opts,
        )?,
        check_layer("batchnorm/train", batchnorm_cases(r, Mode::Train)?, opts)?,
        check_layer("batchnorm/eval", batchnorm_cases(r, Mode::Eval)?, opts)?,
        check_layer("attention", attention_block_cases(r)?, opts)?,
        check_layer("cross_entropy", cross_entropy_cases(r)?, opts)?,
        check_layer(
            "gap",
            unary_cases(r, &[vec![2, 3, 4], vec![1, 2, 2, 3], vec![3, 1, 2, 2, 2]], |t, x| t.gap(x))?,
            opts,
        )?,
        check_layer(
            "avgpool",
            unary_cases(r, &[vec![1, 2, 4, 4], vec![2, 1, 5, 4], vec![1, 3, 6, 2]], |t, x| t.avg_pool2d(x, 2))?,
            opts,
        )?,
        check_layer("tanh", unary_cases(r, &shapes3, |t, x| Ok(t.tanh(x)))?, opts)?,
        check_layer("relu", unary_cases(r, &shapes3, |t, x| Ok(t.relu(x)))?, opts)?,
        check_layer("scale", unary_cases(r, &shapes3, |t, x| Ok(t.scale(x, -1.7)))?, opts)?,
        check_layer(
            "mean",
            unary_cases(r, &shapes3, |t, x| {
                let sq = t.mul(x, x)?;
                Ok(t.mean(sq))
            })?,
            opts,
        )?,
        check_layer(
            "permute",
            unary_cases(r, &[vec![2, 3], vec![2, 3, 4], vec![1, 2, 3, 2]], |t, x| {
                let rank = t.shape(x).len();
                let order: Vec<usize> = (0..rank).rev().collect();
                t.permute(x, &order)
            })?,
            opts,
        )?,
        check_layer(
            "reshape",
            unary_cases(r, &shapes3, |t, x| {
                let n = t.value(x).numel();
                t.reshape(x, &[n])
            })?,
            opts,
        )?,
        check_layer(
            "narrow",
            unary_cases(r, &[vec![3, 2], vec![4, 3, 2], vec![5]], |t, x| t.narrow(x, 0, 1, 2))?,
            opts,
        )?,
        check_layer(
            "repeat",
            unary_cases(r, &shapes3, |t, x| t.repeat(x, 3))?,
            opts,
        )?,
        check_layer(
            "concat",
            binary_cases(
                r,
                &[(vec![2, 3], vec![1, 3]), (vec![2, 2, 2], vec![2, 1, 2]), (vec![3], vec![4])],
                |t, a, b| {
                    let axis = if t.shape(a)[0] == t.shape(b)[0] && t.shape(a).len() > 1 { 1 } else { 0 };
                    t.concat(&[a, b], axis)
                },
            )?,
            opts,
        )?,
        check_layer(
            "matmul",
            binary_cases(
                r,
                &[(vec![2, 3], vec![3, 4]), (vec![2, 3, 2], vec![2, 2, 5]), (vec![1, 4], vec![4, 1])],
                |t, a, b| t.matmul(a, b),
            )?,
            opts,
        )?,
        check_layer(
            "add",
            binary_cases(r, &[(vec![2, 3], vec![2, 3]), (vec![3, 2, 2], vec![1]), (vec![4], vec![4])], |t, a, b| {
                t.add(a, b)
            })?,
            opts,
        )?,
        check_layer(
            "sub",
            binary_cases(r, &[(vec![2, 3], vec![2, 3]), (vec![3, 2, 2], vec![1]), (vec![4], vec![4])], |t, a, b| {
                t.sub(a, b)
            })?,
            opts,
        )?,
        check_layer(
            "mul",
            binary_cases(r, &[(vec![2, 3], vec![2, 3]), (vec![3, 2, 2], vec![1]), (vec![4], vec![4])], |t, a, b| {
                t.mul(a, b)
            })?,
            opts,
        )?,
    ];
    out.retain(|c| !c.report.params.is_empty());
    Ok(out)
}

/// Random sequences matching `cfg`'s `(3, T, V, M)`, labels cycling over classes.
pub fn random_sequences(cfg: &ModelConfig, count: usize, seed: u64) -> Result<Vec<SkeletonSequence>> {
    let mut rng = Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let coords = Tensor::from_fn([3, cfg.frames, cfg.joints, cfg.entities], |_| rng.random_range(-1.0f32..1.0));
            let meta = SequenceMeta {
                sample_id: i as u64,
                source: "random".into(),
                original_frames: cfg.frames,
            };
            SkeletonSequence::new(coords, i % cfg.num_classes, meta)
        })
        .collect()
}

/// Moves every zero-initialized bias and shift to a seeded value with
/// magnitude in `[0.05, 0.2]`. Units whose receptive field is all zeros
/// (the final motion frame, padding) otherwise sit exactly on the ReLU kink.
pub fn offset_biases(store: &mut ParamStore<f64>, seed: u64) {
    let mut rng = Rng::seed_from_u64(seed);
    let ids: Vec<_> = store
        .trainable_ids()
        .filter(|&id| {
            let name = store.name(id);
            name.ends_with(".bias") || name.ends_with(".beta")
        })
        .collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            let mag: f64 = rng.random_range(0.05..0.2);
            *v = if rng.random_bool(0.5) { mag } else { -mag };
        }
    }
}

/// Gradient check of the summed two-stream loss of the full network, in
/// training mode, on a batch of three random sequences, at a point with
/// nonzero biases (see [`offset_biases`]).
pub fn model_gradcheck(cfg: &ModelConfig, opts: GradCheckOptions, seed: u64) -> Result<GradCheckReport> {
    let mut net = ThctNet::<f64>::new(cfg.clone(), seed)?;
    offset_biases(&mut net.store, seed.wrapping_add(2));
    let seqs = random_sequences(cfg, 3, seed.wrapping_add(1))?;
    let refs: Vec<_> = seqs.iter().collect();
    let perms = vec![(0..cfg.entities).collect::<Vec<_>>(); refs.len()];
    let batch = prepare_batch::<f64>(&refs, &perms, cfg)?;
    let mut store = net.store.clone();
    grad_check(
        &mut store,
        |tape, store| {
            let logits = net.forward_with(store, tape, &batch, Mode::Train)?;
            two_stream_loss(tape, logits, &batch.labels, &cfg.train)
        },
        opts,
    )
}

/// Outcome of one exact structural property.
#[derive(Clone, Debug, PartialEq)]
pub struct StructureCheck {
    pub name: &'static str,
    pub detail: String,
    pub passed: bool,
}

fn degenerate_attention(identity: bool, seed: u64) -> Result<StructureCheck> {
    let cfg = ModelConfig::gradcheck(2);
    let mut rng = Rng::seed_from_u64(seed);
    let mut store = ParamStore::<f64>::new();
    let block = AttentionBlock::new(&mut store, "b", &cfg, &mut rng)?;
    let grid = cfg.window.grid(cfg.frames, cfg.joints, cfg.entities)?;
    let u = grid.iter().product::<usize>();
    let d = cfg.transformer.d_model;
    store.get_mut(block.alpha).data_mut()[0] = 0.0;
    *store.get_mut(block.bias) = if identity { Tensor::eye(u) } else { Tensor::zeros([u, u]) };
    let mut shape = vec![3, d];
    shape.extend_from_slice(&grid);
    let x = uniform(&shape, &mut rng);
    let pe = positional_encoding::<f64>(u, d)?.permute(&[1, 0])?;
    let mut pe_shape = vec![d];
    pe_shape.extend_from_slice(&grid);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let pv = tape.constant(pe.reshape(pe_shape)?);
    let pv = tape.repeat(pv, 3)?;
    let y = block.attention(&mut tape, &store, xv, pv)?;
    let expected = if identity { x } else { Tensor::zeros(shape) };
    let diff = tape.value(y).max_abs_diff(&expected)?;
    Ok(StructureCheck {
        name: if identity { "alpha=0, A=I gives identity mixing" } else { "alpha=0, A=0 gives zero attention" },
        detail: format!("max |diff| = {diff:e} over {u} tokens"),
        passed: diff == 0.0,
    })
}

/// Exact structural properties: token count for the default window, the two
/// degenerate attention cases and zero motion for a static sequence.
pub fn structure_checks(seed: u64) -> Result<Vec<StructureCheck>> {
    let cfg = ModelConfig::default();
    let u = cfg.tokens()?;
    let mut out = vec![StructureCheck {
        name: "token count for window 20,1,2 on T=60, V=25, M=2",
        detail: format!("U = {u}"),
        passed: u == 75 && (cfg.window.t, cfg.window.v, cfg.window.m) == (20, 1, 2),
    }];
    out.push(degenerate_attention(false, seed)?);
    out.push(degenerate_attention(true, seed)?);
    let mut rng = Rng::seed_from_u64(seed);
    let frame = Tensor::<f32>::from_fn([3, 1, 25, 2], |_| rng.random_range(-1.0..1.0));
    let frames: Vec<_> = (0..60).map(|_| &frame).collect();
    let still = Tensor::concat(&frames, 1)?;
    let motion = motion_difference(&still)?;
    let nonzero = motion.data().iter().filter(|&&v| v != 0.0).count();
    out.push(StructureCheck {
        name: "static sequence gives all-zero motion",
        detail: format!("{nonzero} nonzero of {}", motion.numel()),
        passed: nonzero == 0 && motion.shape() == still.shape(),
    });
    Ok(out)
}

/// Full verification: oracle suite, per-layer gradient checks and the
/// micro-model gradient check.
#[derive(Clone, Debug)]
pub struct VerifyReport {
    pub oracles: Vec<OracleCase>,
    pub structure: Vec<StructureCheck>,
    pub layers: Vec<LayerCheck>,
    pub model: GradCheckReport,
    pub fault: Option<OpKind>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.oracles.iter().all(OracleCase::passed)
            && self.structure.iter().all(|c| c.passed)
            && self.layers.iter().all(LayerCheck::passed) && self.model.passed()
    }

    /// Layers (and `"model"`) whose gradient check failed.
    pub fn failing_layers(&self) -> Vec<String> {
        let mut out: Vec<String> = self.layers.iter().filter(|l| !l.passed()).map(|l| l.layer.clone()).collect();
        if !self.model.passed() {
            out.push("model".into());
        }
        out
    }
}

pub fn run_verification(fault: Option<OpKind>, seed: u64) -> Result<VerifyReport> {
    let opts = GradCheckOptions {
        fault,
        ..GradCheckOptions::default()
    };
    Ok(VerifyReport {
        oracles: oracle_suite(seed)?,
        structure: structure_checks(seed)?,
        layers: layer_gradcheck_suite(opts, seed)?,
        model: model_gradcheck(&ModelConfig::gradcheck(2), opts, seed)?,
        fault,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_suite_passes() {
        let cases = oracle_suite(0).unwrap();
        assert_eq!(cases.len(), 4 * ORACLE_CASES);
        for c in &cases {
            assert!(c.passed(), "{c:?}");
        }
    }

    #[test]
    fn structure_checks_pass() {
        for c in structure_checks(3).unwrap() {
            assert!(c.passed, "{c:?}");
        }
    }

    #[test]
    fn every_layer_passes_gradcheck() {
        for check in layer_gradcheck_suite(GradCheckOptions::default(), 0).unwrap() {
            assert!(check.passed(), "{}: {:?}", check.layer, check.report.worst());
        }
    }

    #[test]
    fn fault_injection_is_caught() {
        let opts = GradCheckOptions {
            fault: Some(OpKind::Tanh),
            ..GradCheckOptions::default()
        };
        let checks = layer_gradcheck_suite(opts, 0).unwrap();
        let failing: Vec<_> = checks.iter().filter(|c| !c.passed()).map(|c| c.layer.as_str()).collect();
        assert!(failing.contains(&"tanh"));
        assert!(failing.contains(&"attention"));
        assert!(!failing.contains(&"linear"));
    }

    #[test]
    fn every_faulted_op_is_caught_by_some_layer() {
        for op in OpKind::ALL.into_iter().filter(|&k| k != OpKind::Leaf) {
            let opts = GradCheckOptions {
                fault: Some(op),
                ..GradCheckOptions::default()
            };
            let checks = layer_gradcheck_suite(opts, 1).unwrap();
            assert!(checks.iter().any(|c| !c.passed()), "fault in {op} went unnoticed");
        }
    }
}
