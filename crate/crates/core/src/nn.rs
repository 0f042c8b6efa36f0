//! Parameterized layers: convolution, batch normalization, fully connected.

use rand::Rng as _;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::tensor::{Scalar, Tensor};
use crate::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Kaiming-uniform (fan-in, ReLU gain) initialization.
pub fn kaiming_uniform<S: Scalar>(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Tensor<S> {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape.to_vec(), |_| S::from_f64(rng.random_range(-bound..bound)))
}

/// Convolution over `D` spatial axes.
#[derive(Clone, Debug)]
pub struct Conv<const D: usize> {
    pub weight: ParamId,
    pub bias: ParamId,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: [usize; D],
    pub stride: [usize; D],
    pub pad: [usize; D],
}

pub type Conv2d = Conv<2>;
pub type Conv3d = Conv<3>;

impl<const D: usize> Conv<D> {
    #[allow(clippy::too_many_arguments)]
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: [usize; D],
        stride: [usize; D],
        pad: [usize; D],
        rng: &mut Rng,
    ) -> Result<Self> {
        if c_in == 0 || c_out == 0 {
            return Err(Error::invalid(format!("{name}: channel counts must be positive")));
        }
        let mut wshape = vec![c_out, c_in];
        wshape.extend_from_slice(&kernel);
        let fan_in = c_in * kernel.iter().product::<usize>();
        let weight = store.add(
            format!("{name}.weight"),
            kaiming_uniform(&wshape, fan_in, rng),
            ParamKind::Trainable,
        )?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros([c_out]), ParamKind::Trainable)?;
        Ok(Self {
            weight,
            bias,
            c_in,
            c_out,
            kernel,
            stride,
            pad,
        })
    }

    /// Unit-stride convolution padded to keep every spatial extent ("same"
    /// padding for odd kernels).
    pub fn same<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: [usize; D],
        rng: &mut Rng,
    ) -> Result<Self> {
        Self::new(store, name, c_in, c_out, kernel, [1; D], kernel.map(|k| k / 2), rng)
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        tape.conv(x, w, b, &self.stride, &self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones([channels]), ParamKind::Trainable)?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros([channels]), ParamKind::Trainable)?,
            running_mean: store.add(format!("{name}.running_mean"), Tensor::zeros([channels]), ParamKind::Buffer)?,
            running_var: store.add(format!("{name}.running_var"), Tensor::ones([channels]), ParamKind::Buffer)?,
            channels,
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        })
    }

    /// Train mode normalizes with batch statistics and folds them into the
    /// running statistics; eval mode reads the running statistics only.
    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &mut ParamStore<S>,
        x: Var,
        mode: Mode,
    ) -> Result<Var> {
        let gamma = tape.param(store, self.gamma);
        let beta = tape.param(store, self.beta);
        let eps = S::from_f64(self.eps);
        match mode {
            Mode::Eval => {
                let (rm, rv) = (store.get(self.running_mean).data(), store.get(self.running_var).data());
                let (y, _) = tape.batch_norm(x, gamma, beta, eps, Some((rm, rv)))?;
                Ok(y)
            }
            Mode::Train => {
                let (y, stats) = tape.batch_norm(x, gamma, beta, eps, None)?;
                let stats = stats.expect("train-mode batch norm returns statistics");
                let m = S::from_f64(self.momentum);
                let blend = |run: &mut [S], batch: &[S]| {
                    for (r, &b) in run.iter_mut().zip(batch) {
                        *r = (S::one() - m) * *r + m * b;
                    }
                };
                blend(store.get_mut(self.running_mean).data_mut(), &stats.mean);
                blend(store.get_mut(self.running_var).data_mut(), &stats.var_unbiased);
                Ok(y)
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        in_features: usize,
        out_features: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let weight = store.add(
            format!("{name}.weight"),
            kaiming_uniform(&[out_features, in_features], in_features, rng),
            ParamKind::Trainable,
        )?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros([out_features]), ParamKind::Trainable)?;
        Ok(Self {
            weight,
            bias,
            in_features,
            out_features,
        })
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        tape.linear(x, w, b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng() -> Rng {
        Rng::seed_from_u64(3)
    }

    fn random(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
        Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn pointwise_conv3d_doubles_ones() {
        let mut store = ParamStore::<f64>::new();
        let conv = Conv3d::new(&mut store, "c", 1, 1, [1, 1, 1], [1; 3], [0; 3], &mut rng()).unwrap();
        store.get_mut(conv.weight).data_mut()[0] = 2.0;
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones([2, 1, 3, 4, 2]));
        let y = conv.forward(&mut tape, &store, x).unwrap();
        assert_eq!(tape.shape(y), &[2, 1, 3, 4, 2]);
        assert!(tape.value(y).data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn temporal_kernel_keeps_shape() {
        let mut store = ParamStore::<f64>::new();
        let conv = Conv3d::new(&mut store, "c", 3, 4, [5, 1, 1], [1; 3], [2, 0, 0], &mut rng()).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones([2, 3, 6, 25, 1]));
        let y = conv.forward(&mut tape, &store, x).unwrap();
        assert_eq!(tape.shape(y), &[2, 4, 6, 25, 1]);
    }

    #[test]
    fn conv2d_three_by_one_keeps_joint_axis() {
        let mut store = ParamStore::<f64>::new();
        let conv = Conv2d::new(&mut store, "c", 3, 5, [3, 1], [1, 1], [1, 0], &mut rng()).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones([2, 3, 10, 50]));
        let y = conv.forward(&mut tape, &store, x).unwrap();
        assert_eq!(tape.shape(y), &[2, 5, 10, 50]);
    }

    #[test]
    fn zero_weight_conv_outputs_bias() {
        let mut store = ParamStore::<f64>::new();
        let conv = Conv2d::same(&mut store, "c", 2, 3, [3, 3], &mut rng()).unwrap();
        store.get_mut(conv.weight).data_mut().fill(0.0);
        store.get_mut(conv.bias).data_mut().fill(0.75);
        let mut tape = Tape::new();
        let x = tape.constant(random(&[2, 2, 5, 4], &mut rng()));
        let y = conv.forward(&mut tape, &store, x).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.75));
    }

    #[test]
    fn conv_channel_mismatch_errors() {
        let mut store = ParamStore::<f64>::new();
        let conv = Conv2d::same(&mut store, "c", 2, 3, [3, 3], &mut rng()).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones([1, 4, 5, 5]));
        assert!(matches!(conv.forward(&mut tape, &store, x), Err(Error::Shape(_))));
    }

    #[test]
    fn conv_is_linear_without_bias() {
        let mut r = rng();
        let mut store = ParamStore::<f64>::new();
        let conv = Conv3d::new(&mut store, "c", 2, 3, [3, 2, 1], [1; 3], [1, 0, 0], &mut r).unwrap();
        let x1 = random(&[1, 2, 5, 4, 2], &mut r);
        let x2 = random(&[1, 2, 5, 4, 2], &mut r);
        let run = |x: Tensor<f64>| {
            let mut tape = Tape::new();
            let v = tape.constant(x);
            let y = conv.forward(&mut tape, &store, v).unwrap();
            tape.value(y).clone()
        };
        let sum = run(x1.add(&x2).unwrap());
        let parts = run(x1).add(&run(x2)).unwrap();
        assert!(sum.max_abs_diff(&parts).unwrap() < 1e-5);
    }

    #[test]
    fn conv_translation_equivariance() {
        let mut r = rng();
        let mut store = ParamStore::<f64>::new();
        let conv = Conv2d::same(&mut store, "c", 1, 2, [3, 1], &mut r).unwrap();
        let x = random(&[1, 1, 8, 3], &mut r);
        let shifted = Tensor::from_fn([1, 1, 8, 3], |i| if i[2] == 0 { 0.0 } else { x.get(&[0, 0, i[2] - 1, i[3]]) });
        let run = |x: Tensor<f64>| {
            let mut tape = Tape::new();
            let v = tape.constant(x);
            let y = conv.forward(&mut tape, &store, v).unwrap();
            tape.value(y).clone()
        };
        let (a, b) = (run(x), run(shifted));
        // Interior rows only: the first shifted row sees the zero border.
        for c in 0..2 {
            for t in 2..7 {
                for j in 0..3 {
                    assert!((b.get(&[0, c, t, j]) - a.get(&[0, c, t - 1, j])).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn batchnorm_train_normalizes() {
        let mut r = rng();
        let mut store = ParamStore::<f64>::new();
        let bn = BatchNorm::new(&mut store, "bn", 3).unwrap();
        let x = random(&[4, 3, 5], &mut r).map(|v| 3.0 * v + 1.5);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let y = bn.forward(&mut tape, &mut store, xv, Mode::Train).unwrap();
        let y = tape.value(y);
        for c in 0..3 {
            let vals: Vec<f64> = (0..4).flat_map(|n| (0..5).map(move |i| (n, i))).map(|(n, i)| y.get(&[n, c, i])).collect();
            let mean = vals.iter().sum::<f64>() / 20.0;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 20.0;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-3);
        }
        // Running statistics moved away from their initial values.
        assert!(store.get(bn.running_mean).data().iter().any(|&m| m != 0.0));
    }

    #[test]
    fn batchnorm_zero_gamma_outputs_beta() {
        let mut store = ParamStore::<f64>::new();
        let bn = BatchNorm::new(&mut store, "bn", 2).unwrap();
        store.get_mut(bn.gamma).data_mut().fill(0.0);
        store.get_mut(bn.beta).data_mut().copy_from_slice(&[0.5, -2.0]);
        let mut tape = Tape::new();
        let xv = tape.constant(random(&[3, 2, 4], &mut rng()));
        let y = bn.forward(&mut tape, &mut store, xv, Mode::Train).unwrap();
        let y = tape.value(y);
        for n in 0..3 {
            for i in 0..4 {
                assert_eq!(y.get(&[n, 0, i]), 0.5);
                assert_eq!(y.get(&[n, 1, i]), -2.0);
            }
        }
    }

    #[test]
    fn batchnorm_rejects_single_sample_in_train_mode() {
        let mut store = ParamStore::<f64>::new();
        let bn = BatchNorm::new(&mut store, "bn", 2).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(Tensor::ones([1, 2, 3]));
        assert!(matches!(
            bn.forward(&mut tape, &mut store, xv, Mode::Train),
            Err(Error::DegenerateBatch(1))
        ));
        assert!(bn.forward(&mut tape, &mut store, xv, Mode::Eval).is_ok());
    }

    #[test]
    fn batchnorm_eval_matches_hand_evaluation() {
        let mut store = ParamStore::<f64>::new();
        let bn = BatchNorm::new(&mut store, "bn", 3).unwrap();
        store.get_mut(bn.running_mean).data_mut().copy_from_slice(&[0.5, -1.0, 2.0]);
        store.get_mut(bn.running_var).data_mut().copy_from_slice(&[4.0, 0.25, 1.0]);
        store.get_mut(bn.gamma).data_mut().copy_from_slice(&[2.0, 1.0, -1.0]);
        store.get_mut(bn.beta).data_mut().copy_from_slice(&[0.0, 1.0, 0.5]);
        let x = Tensor::new([2, 3], vec![1.0, 0.0, 3.0, -0.5, -1.5, 2.0]).unwrap();
        // Hand-evaluated (x - mu) / sqrt(var + 1e-5) * gamma + beta.
        let expected = [
            (1.0 - 0.5) / (4.0f64 + 1e-5).sqrt() * 2.0,
            (0.0 + 1.0) / (0.25f64 + 1e-5).sqrt() + 1.0,
            -(3.0 - 2.0) / (1.0f64 + 1e-5).sqrt() + 0.5,
            (-0.5 - 0.5) / (4.0f64 + 1e-5).sqrt() * 2.0,
            (-1.5 + 1.0) / (0.25f64 + 1e-5).sqrt() + 1.0,
            -(2.0 - 2.0) / (1.0f64 + 1e-5).sqrt() + 0.5,
        ];
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let y = bn.forward(&mut tape, &mut store, xv, Mode::Eval).unwrap();
        for (a, b) in tape.value(y).data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-6);
        }
        // Eval mode leaves the running statistics alone.
        assert_eq!(store.get(bn.running_mean).data(), &[0.5, -1.0, 2.0]);
    }

    #[test]
    fn linear_identity_and_bias() {
        let mut store = ParamStore::<f64>::new();
        let lin = Linear::new(&mut store, "fc", 3, 3, &mut rng()).unwrap();
        *store.get_mut(lin.weight) = Tensor::eye(3);
        let x = random(&[2, 3], &mut rng());
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = lin.forward(&mut tape, &store, xv).unwrap();
        assert!(tape.value(y).bit_eq(&x));

        store.get_mut(lin.weight).data_mut().fill(0.0);
        store.get_mut(lin.bias).data_mut().copy_from_slice(&[1.0, 2.0, 3.0]);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let y = lin.forward(&mut tape, &store, xv).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn linear_feature_mismatch() {
        let mut store = ParamStore::<f64>::new();
        let lin = Linear::new(&mut store, "fc", 3, 2, &mut rng()).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(Tensor::ones([2, 4]));
        assert!(matches!(lin.forward(&mut tape, &store, xv), Err(Error::Shape(_))));
    }

    #[test]
    fn gap_constant_and_permutation_invariance() {
        let mut tape = Tape::<f64>::new();
        let c = tape.constant(Tensor::full([2, 3, 4, 5], 1.25));
        let g = tape.gap(c).unwrap();
        assert!(tape.value(g).data().iter().all(|&v| v == 1.25));

        let x = random(&[2, 3, 4, 5], &mut rng());
        let xp = x.permute(&[0, 1, 3, 2]).unwrap();
        let (a, b) = (tape.constant(x), tape.constant(xp));
        let (ga, gb) = (tape.gap(a).unwrap(), tape.gap(b).unwrap());
        assert!(tape.value(ga).max_abs_diff(tape.value(gb)).unwrap() < 1e-12);

        let flat = tape.constant(Tensor::ones([2, 3]));
        assert!(tape.gap(flat).is_err());
    }
}
