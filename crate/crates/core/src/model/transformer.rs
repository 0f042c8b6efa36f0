//! Transformer stream: window tokenization, positional encoding, multi-head
//! attention with a learnable bias, temporal aggregation and classifier.

use crate::autograd::{Tape, Var};
use crate::config::{ModelConfig, WindowSpec};
use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Conv3d, Linear, Mode};
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::tensor::{Scalar, Tensor};
use crate::Rng;

/// Tokens of one sequence plus the window each token came from.
#[derive(Clone, Debug)]
pub struct Tokens<S: Scalar> {
    /// `(U, C·T_w·V_w·M_w)`.
    pub values: Tensor<S>,
    /// Window-grid coordinates `(t, v, m)` of each token.
    pub windows: Vec<[usize; 3]>,
    pub grid: [usize; 3],
}

/// Cuts `(C, T, V, M)` into non-overlapping windows, one token per window.
///
/// Tokens are ordered time-major, then joint, then entity. Features within a
/// token are ordered channel-major, then time, joint, entity offset.
/// Trailing frames, joints or entities that do not fill a window are dropped.
pub fn tokenize<S: Scalar>(x: &Tensor<S>, window: WindowSpec) -> Result<Tokens<S>> {
    let [c, t, v, m] = *x.shape() else {
        return Err(Error::shape(format!("tokenize needs (C, T, V, M), got {:?}", x.shape())));
    };
    let grid = window.grid(t, v, m)?;
    let feat = c * window.volume();
    let mut values = Vec::with_capacity(grid.iter().product::<usize>() * feat);
    let mut windows = Vec::new();
    for gt in 0..grid[0] {
        for gv in 0..grid[1] {
            for gm in 0..grid[2] {
                windows.push([gt, gv, gm]);
                for ch in 0..c {
                    for a in 0..window.t {
                        for b in 0..window.v {
                            for e in 0..window.m {
                                values.push(x.get(&[
                                    ch,
                                    gt * window.t + a,
                                    gv * window.v + b,
                                    gm * window.m + e,
                                ]));
                            }
                        }
                    }
                }
            }
        }
    }
    let values = Tensor::new([windows.len(), feat], values)?;
    Ok(Tokens { values, windows, grid })
}

/// Sinusoidal encoding `(U, D)`: even columns `sin(u / 10000^(2i/D))`, odd
/// columns the matching cosine.
pub fn positional_encoding<S: Scalar>(tokens: usize, d_model: usize) -> Result<Tensor<S>> {
    if d_model == 0 || d_model % 2 != 0 {
        return Err(Error::invalid(format!("positional encoding needs an even width, got {d_model}")));
    }
    Ok(Tensor::from_fn([tokens, d_model], |idx| {
        let (u, j) = (idx[0] as f64, idx[1]);
        let freq = 10000f64.powf((j - j % 2) as f64 / d_model as f64);
        let angle = u / freq;
        S::from_f64(if j % 2 == 0 { angle.sin() } else { angle.cos() })
    }))
}

/// Learnable pieces of one attention block.
#[derive(Clone, Debug)]
pub struct AttentionBlock {
    pub query: Conv3d,
    pub key: Conv3d,
    /// Scalar gain on the tanh scores, shape `[1]`.
    pub alpha: ParamId,
    /// Additive attention bias `(U, U)` shared by every head and sample.
    pub bias: ParamId,
    pub ffn: Conv3d,
    pub heads: usize,
    pub c_qkv: usize,
    /// Score normalizer `T_w·V_w·M_w·C_qkv`.
    pub c_beta: usize,
}

impl AttentionBlock {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        cfg: &ModelConfig,
        rng: &mut Rng,
    ) -> Result<Self> {
        let tc = &cfg.transformer;
        let c_beta = cfg.window.volume() * tc.c_qkv;
        Self::with_dims(store, name, tc.d_model, tc.heads, tc.c_qkv, cfg.tokens()?, c_beta, rng)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn with_dims<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        d_model: usize,
        heads: usize,
        c_qkv: usize,
        tokens: usize,
        c_beta: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if heads == 0 || d_model % heads != 0 {
            return Err(Error::invalid(format!("{d_model} channels do not split over {heads} heads")));
        }
        let (d, qk, u) = (d_model, heads * c_qkv, tokens);
        let unit = [1, 1, 1];
        Ok(Self {
            query: Conv3d::new(store, &format!("{name}.query"), d, qk, unit, unit, [0; 3], rng)?,
            key: Conv3d::new(store, &format!("{name}.key"), d, qk, unit, unit, [0; 3], rng)?,
            alpha: store.add(format!("{name}.alpha"), Tensor::ones([1]), ParamKind::Trainable)?,
            bias: store.add(format!("{name}.attn_bias"), Tensor::zeros([u, u]), ParamKind::Trainable)?,
            ffn: Conv3d::new(store, &format!("{name}.ffn"), d, d, unit, unit, [0; 3], rng)?,
            heads,
            c_qkv,
            c_beta,
        })
    }

    /// Multi-head attention on `x: (N, D, T', V', M')`. Queries and keys see
    /// `x + pe`; values are `x` itself split evenly across heads. Per head the
    /// weights are `α·tanh(QKᵀ/√C_β) + A`, applied without softmax.
    pub fn attention<S: Scalar>(&self, tape: &mut Tape<S>, store: &ParamStore<S>, x: Var, pe: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        let (n, d) = (shape[0], shape[1]);
        let u: usize = shape[2..].iter().product();
        let h = self.heads;
        if d % h != 0 {
            return Err(Error::shape(format!("{d} channels do not split over {h} heads")));
        }
        let xp = tape.add(x, pe)?;
        let q = self.query.forward(tape, store, xp)?;
        let q = tape.reshape(q, &[n * h, self.c_qkv, u])?;
        let q = tape.permute(q, &[0, 2, 1])?;
        let k = self.key.forward(tape, store, xp)?;
        let k = tape.reshape(k, &[n * h, self.c_qkv, u])?;
        let scores = tape.matmul(q, k)?;
        let scores = tape.scale(scores, S::one() / S::from_usize(self.c_beta).sqrt());
        let scores = tape.tanh(scores);
        let alpha = tape.param(store, self.alpha);
        let scores = tape.mul(scores, alpha)?;
        let bias = tape.param(store, self.bias);
        let bias = tape.repeat(bias, n * h)?;
        let weights = tape.add(scores, bias)?;
        let v = tape.reshape(x, &[n * h, d / h, u])?;
        let v = tape.permute(v, &[0, 2, 1])?;
        let out = tape.matmul(weights, v)?;
        let out = tape.permute(out, &[0, 2, 1])?;
        tape.reshape(out, &shape)
    }

    /// Attention followed by the feed-forward residual
    /// `a + relu(W_ffn * a)`.
    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, store: &ParamStore<S>, x: Var, pe: Var) -> Result<Var> {
        let a = self.attention(tape, store, x, pe)?;
        let f = self.ffn.forward(tape, store, a)?;
        let f = tape.relu(f);
        tape.add(a, f)
    }
}

#[derive(Clone, Debug)]
pub struct TransformerStream {
    pub embed: Conv3d,
    pub embed_bn: BatchNorm,
    pub blocks: Vec<AttentionBlock>,
    pub temporal: Conv3d,
    pub head: Linear,
    pub grid: [usize; 3],
    pub d_model: usize,
}

impl TransformerStream {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, cfg: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        let d = cfg.transformer.d_model;
        let feat = crate::data::skeleton::COORDS * cfg.window.volume();
        let unit = [1, 1, 1];
        let embed = Conv3d::new(store, "transformer.embed", feat, d, unit, unit, [0; 3], rng)?;
        let embed_bn = BatchNorm::new(store, "transformer.embed_bn", d)?;
        let blocks = (0..cfg.transformer.layers)
            .map(|l| AttentionBlock::new(store, &format!("transformer.block{l}"), cfg, rng))
            .collect::<Result<Vec<_>>>()?;
        let temporal = Conv3d::new(store, "transformer.temporal", d, d, [5, 1, 1], unit, [2, 0, 0], rng)?;
        let head = Linear::new(store, "transformer.fc", d, cfg.num_classes, rng)?;
        Ok(Self {
            embed,
            embed_bn,
            blocks,
            temporal,
            head,
            grid: cfg.window.grid(cfg.frames, cfg.joints, cfg.entities)?,
            d_model: d,
        })
    }

    /// `tokens: (N, F, T', V', M')` to logits `(N, K)`.
    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &mut ParamStore<S>,
        tokens: Var,
        mode: Mode,
    ) -> Result<Var> {
        let n = tape.shape(tokens)[0];
        let u: usize = self.grid.iter().product();
        let x = self.embed.forward(tape, store, tokens)?;
        let x = self.embed_bn.forward(tape, store, x, mode)?;
        let mut x = tape.relu(x);
        if !self.blocks.is_empty() {
            let pe = positional_encoding::<S>(u, self.d_model)?.permute(&[1, 0])?;
            let mut pe_shape = vec![self.d_model];
            pe_shape.extend_from_slice(&self.grid);
            let pe = tape.constant(pe.reshape(pe_shape)?);
            let pe = tape.repeat(pe, n)?;
            for block in &self.blocks {
                x = block.forward(tape, store, x, pe)?;
            }
        }
        let x = self.temporal.forward(tape, store, x)?;
        let x = tape.relu(x);
        let x = tape.gap(x)?;
        self.head.forward(tape, store, x)
    }
}

/// Stacks per-sample tokens into the `(N, F, T', V', M')` stream input.
pub fn tokens_to_batch<S: Scalar>(tokens: &[Tokens<S>]) -> Result<Tensor<S>> {
    let first = tokens.first().ok_or_else(|| Error::invalid("empty token batch"))?;
    let parts = tokens
        .iter()
        .map(|t| {
            let [u, f] = *t.values.shape() else { unreachable!() };
            let mut shape = vec![1, f];
            shape.extend_from_slice(&t.grid);
            debug_assert_eq!(u, t.grid.iter().product::<usize>());
            t.values.permute(&[1, 0])?.reshape(shape)
        })
        .collect::<Result<Vec<_>>>()?;
    if tokens.iter().any(|t| t.grid != first.grid || t.values.shape() != first.values.shape()) {
        return Err(Error::shape("token batches need a common grid"));
    }
    Tensor::concat(&parts.iter().collect::<Vec<_>>(), 0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::verify::oracle::attention_reference;
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn seq(t: usize, v: usize, m: usize) -> Tensor<f64> {
        Tensor::from_fn([3, t, v, m], |i| (i[0] * 1000 + i[1] * 100 + i[2] * 10 + i[3]) as f64)
    }

    #[test]
    fn default_window_gives_75_tokens_of_120_features() {
        let tok = tokenize(&seq(60, 25, 2), WindowSpec::new(20, 1, 2)).unwrap();
        assert_eq!(tok.values.shape(), &[75, 120]);
        assert_eq!(tok.grid, [3, 25, 1]);
    }

    #[test]
    fn tokens_index_their_windows() {
        let x = seq(6, 4, 2);
        let w = WindowSpec::new(3, 2, 1);
        let tok = tokenize(&x, w).unwrap();
        for (u, win) in tok.windows.iter().enumerate() {
            let mut f = 0;
            for c in 0..3 {
                for a in 0..w.t {
                    for b in 0..w.v {
                        for e in 0..w.m {
                            let src = [c, win[0] * w.t + a, win[1] * w.v + b, win[2] * w.m + e];
                            assert_eq!(tok.values.get(&[u, f]), x.get(&src));
                            f += 1;
                        }
                    }
                }
            }
        }
        assert_eq!(tok.windows[1], [0, 0, 1]);
        assert_eq!(tok.windows[2], [0, 1, 0]);
    }

    #[test]
    fn positional_encoding_values() {
        let pe = positional_encoding::<f64>(4, 6).unwrap();
        assert_eq!(pe.shape(), &[4, 6]);
        for j in 0..6 {
            let expect = if j % 2 == 0 { 0.0 } else { 1.0 };
            assert_eq!(pe.get(&[0, j]), expect);
        }
        let x: f64 = 3.0 / 10000f64.powf(2.0 / 6.0);
        assert!((pe.get(&[3, 2]) - x.sin()).abs() < 1e-12);
        assert!((pe.get(&[3, 3]) - x.cos()).abs() < 1e-12);
        assert!(pe.data().iter().all(|v| v.abs() <= 1.0));
        assert!(positional_encoding::<f64>(4, 5).is_err());
    }

    fn block_fixture() -> (ParamStore<f64>, AttentionBlock, Tensor<f64>, Tensor<f64>) {
        let cfg = ModelConfig::gradcheck(2);
        let mut rng = crate::Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let block = AttentionBlock::new(&mut store, "b", &cfg, &mut rng).unwrap();
        let d = cfg.transformer.d_model;
        let mut r2 = crate::Rng::seed_from_u64(5);
        let x = crate::nn::kaiming_uniform::<f64>(&[2, d, 4, 1, 1], 1, &mut r2);
        let pe = positional_encoding::<f64>(4, d).unwrap().permute(&[1, 0]).unwrap();
        (store, block, x, pe)
    }

    fn run_attention(store: &ParamStore<f64>, block: &AttentionBlock, x: &Tensor<f64>, pe: &Tensor<f64>) -> Tensor<f64> {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let pv = tape.constant(pe.reshape([pe.shape()[0], 4, 1, 1]).unwrap());
        let pv = tape.repeat(pv, x.shape()[0]).unwrap();
        let out = block.attention(&mut tape, store, xv, pv).unwrap();
        tape.value(out).clone()
    }

    #[test]
    fn zero_gain_and_zero_bias_give_zero_output() {
        let (mut store, block, x, pe) = block_fixture();
        store.get_mut(block.alpha).data_mut()[0] = 0.0;
        let out = run_attention(&store, &block, &x, &pe);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_gain_identity_bias_passes_values_through() {
        let (mut store, block, x, pe) = block_fixture();
        store.get_mut(block.alpha).data_mut()[0] = 0.0;
        *store.get_mut(block.bias) = Tensor::eye(4);
        let out = run_attention(&store, &block, &x, &pe);
        assert_eq!(out.max_abs_diff(&x).unwrap(), 0.0);
    }

    #[test]
    fn attention_matches_direct_loops() {
        let (mut store, block, x, pe) = block_fixture();
        store.get_mut(block.alpha).data_mut()[0] = 1.7;
        let mut r = crate::Rng::seed_from_u64(8);
        *store.get_mut(block.bias) = crate::nn::kaiming_uniform(&[4, 4], 6, &mut r);
        let out = run_attention(&store, &block, &x, &pe);
        let reference = attention_reference(&store, &block, &x, &pe).unwrap();
        assert!(out.max_abs_diff(&reference).unwrap() < 1e-5);
    }

    #[test]
    fn stream_output_shape() {
        let cfg = ModelConfig::gradcheck(3);
        let mut rng = crate::Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let stream = TransformerStream::new(&mut store, &cfg, &mut rng).unwrap();
        let toks: Vec<_> = (0..2)
            .map(|_| tokenize(&seq(8, 5, 2), cfg.window).unwrap())
            .collect();
        let mut tape = Tape::new();
        let input = tape.constant(tokens_to_batch(&toks).unwrap());
        let out = stream.forward(&mut tape, &mut store, input, Mode::Train).unwrap();
        assert_eq!(tape.shape(out), &[2, 3]);
    }

    proptest! {
        #[test]
        fn token_count_matches_grid(t in 2usize..30, v in 1usize..8, m in 1usize..3,
                                    wt in 1usize..5, wv in 1usize..4, wm in 1usize..3) {
            prop_assume!(wt <= t && wv <= v && wm <= m);
            let x = Tensor::<f64>::zeros([3, t, v, m]);
            let w = WindowSpec::new(wt, wv, wm);
            let tok = tokenize(&x, w).unwrap();
            prop_assert_eq!(tok.values.shape()[0], (t / wt) * (v / wv) * (m / wm));
            prop_assert_eq!(tok.values.shape()[1], 3 * wt * wv * wm);
        }
    }
}
