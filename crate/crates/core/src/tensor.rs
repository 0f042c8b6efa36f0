//! Dense row-major tensors.
//!
//! A [`Tensor`] owns a contiguous buffer and its shape. Every shape-changing
//! operation materializes a new buffer; there are no stride views. The element
//! type is fixed at construction: `f32` for training, `f64` for gradient
//! checking.

use std::fmt;

use crate::error::{Error, Result};

/// Element type of a tensor.
pub trait Scalar:
    num_traits::Float + Default + fmt::Debug + fmt::Display + Send + Sync + 'static
{
    const NAME: &'static str;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;

    fn from_usize(v: usize) -> Self {
        Self::from_f64(v as f64)
    }
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";

    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";

    fn from_f64(v: f64) -> Self {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }
}

/// Row-major strides for `shape`.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut out = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        out[i] = out[i + 1] * shape[i + 1];
    }
    out
}

/// Checks that `order` is a permutation of `0..rank`.
pub fn check_permutation(order: &[usize], rank: usize) -> Result<()> {
    let invalid = || Error::InvalidPermutation {
        order: order.to_vec(),
        rank,
    };
    if order.len() != rank {
        return Err(invalid());
    }
    let mut seen = vec![false; rank];
    for &axis in order {
        if axis >= rank || seen[axis] {
            return Err(invalid());
        }
        seen[axis] = true;
    }
    Ok(())
}

/// The permutation that undoes `order`.
pub fn inverse_permutation(order: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; order.len()];
    for (i, &axis) in order.iter().enumerate() {
        inv[axis] = i;
    }
    inv
}

#[derive(Clone, PartialEq)]
pub struct Tensor<S: Scalar = f32> {
    shape: Vec<usize>,
    data: Vec<S>,
    grad: Option<Vec<S>>,
    requires_grad: bool,
}

impl<S: Scalar> fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<_> = self.data.iter().take(8).collect();
        f.debug_struct("Tensor")
            .field("dtype", &S::NAME)
            .field("shape", &self.shape)
            .field("data", &preview)
            .field("has_grad", &self.grad.is_some())
            .finish()
    }
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<S>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::shape(format!("zero extent in shape {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape,
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: S) -> Self {
        let shape = shape.into();
        assert!(shape.iter().all(|&d| d > 0), "zero extent in {shape:?}");
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![value; numel],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, S::zero())
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, S::one())
    }

    /// Rank-0 tensor.
    pub fn scalar(value: S) -> Self {
        Self::full(Vec::new(), value)
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(&[usize]) -> S) -> Self {
        let shape = shape.into();
        let mut out = Self::zeros(shape.clone());
        let mut idx = vec![0; shape.len()];
        for slot in out.data.iter_mut() {
            *slot = f(&idx);
            increment_index(&mut idx, &shape);
        }
        out
    }

    pub fn eye(n: usize) -> Self {
        Self::from_fn([n, n], |i| if i[0] == i[1] { S::one() } else { S::zero() })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
    }

    pub fn with_requires_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn grad(&self) -> Option<&[S]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `g` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[S]) {
        assert_eq!(g.len(), self.data.len(), "gradient length mismatch");
        match &mut self.grad {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(a, &b)| *a = *a + b),
            None => self.grad = Some(g.to_vec()),
        }
    }

    /// Single value of a one-element tensor.
    pub fn item(&self) -> S {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn offset(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.shape.len());
        let mut off = 0;
        for (&i, &d) in idx.iter().zip(&self.shape) {
            debug_assert!(i < d);
            off = off * d + i;
        }
        off
    }

    pub fn get(&self, idx: &[usize]) -> S {
        self.data[self.offset(idx)]
    }

    pub fn set(&mut self, idx: &[usize], value: S) {
        let off = self.offset(idx);
        self.data[off] = value;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Errors if any element is NaN or infinite.
    pub fn check_finite(&self, what: &str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::NonFinite(format!(
                "{what}: element {i} of tensor {:?} is {}",
                self.shape, self.data[i]
            ))),
        }
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| T::from_f64(v.as_f64())).collect(),
            grad: None,
            requires_grad: self.requires_grad,
        }
    }

    /// Same data under a new shape with equal element count.
    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    pub fn permute(&self, order: &[usize]) -> Result<Self> {
        check_permutation(order, self.rank())?;
        let out_shape: Vec<usize> = order.iter().map(|&a| self.shape[a]).collect();
        let in_strides = strides(&self.shape);
        // Stride in the input for each output axis.
        let walk: Vec<usize> = order.iter().map(|&a| in_strides[a]).collect();
        let mut data = Vec::with_capacity(self.data.len());
        let mut idx = vec![0; out_shape.len()];
        let mut src = 0usize;
        for _ in 0..self.data.len() {
            data.push(self.data[src]);
            // Odometer increment over the output index, tracking the source offset.
            for ax in (0..idx.len()).rev() {
                idx[ax] += 1;
                src += walk[ax];
                if idx[ax] < out_shape[ax] {
                    break;
                }
                src -= walk[ax] * out_shape[ax];
                idx[ax] = 0;
            }
        }
        Self::new(out_shape, data)
    }

    pub fn concat(parts: &[&Tensor<S>], axis: usize) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat of zero tensors"))?;
        let rank = first.rank();
        if axis >= rank {
            return Err(Error::shape(format!("concat axis {axis} out of range for rank {rank}")));
        }
        for p in parts {
            let agrees = p.rank() == rank
                && p.shape
                    .iter()
                    .zip(&first.shape)
                    .enumerate()
                    .all(|(a, (x, y))| a == axis || x == y);
            if !agrees {
                return Err(Error::shape(format!(
                    "concat on axis {axis}: {:?} does not match {:?}",
                    p.shape, first.shape
                )));
            }
        }
        let outer: usize = first.shape[..axis].iter().product();
        let inner: usize = first.shape[axis + 1..].iter().product();
        let mut shape = first.shape.clone();
        shape[axis] = parts.iter().map(|p| p.shape[axis]).sum();
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for p in parts {
                let block = p.shape[axis] * inner;
                data.extend_from_slice(&p.data[o * block..(o + 1) * block]);
            }
        }
        Self::new(shape, data)
    }

    /// Sub-tensor `start..start+len` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Self> {
        if axis >= self.rank() || len == 0 || start + len > self.shape[axis] {
            return Err(Error::shape(format!(
                "narrow({axis}, {start}, {len}) out of range for {:?}",
                self.shape
            )));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut shape = self.shape.clone();
        shape[axis] = len;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * self.shape[axis] + start) * inner;
            data.extend_from_slice(&self.data[base..base + len * inner]);
        }
        Self::new(shape, data)
    }

    /// Splits along `axis` into consecutive pieces of the given sizes.
    pub fn split(&self, axis: usize, sizes: &[usize]) -> Result<Vec<Self>> {
        if axis >= self.rank() || sizes.iter().sum::<usize>() != self.shape[axis] {
            return Err(Error::shape(format!(
                "split sizes {sizes:?} do not cover axis {axis} of {:?}",
                self.shape
            )));
        }
        let mut start = 0;
        sizes
            .iter()
            .map(|&len| {
                let part = self.narrow(axis, start, len);
                start += len;
                part
            })
            .collect()
    }

    /// Matrix product of rank-2 tensors, or batched product of rank-3
    /// tensors with equal leading extent.
    pub fn matmul(&self, other: &Tensor<S>) -> Result<Self> {
        let (batch, m, k, n) = matmul_dims(&self.shape, &other.shape)?;
        let mut out = vec![S::zero(); batch * m * n];
        for b in 0..batch {
            matmul_into(
                &self.data[b * m * k..(b + 1) * m * k],
                &other.data[b * k * n..(b + 1) * k * n],
                &mut out[b * m * n..(b + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let shape = if self.rank() == 2 { vec![m, n] } else { vec![batch, m, n] };
        Self::new(shape, out)
    }

    /// Swaps the last two axes.
    pub fn transpose_last2(&self) -> Result<Self> {
        let r = self.rank();
        if r < 2 {
            return Err(Error::shape("transpose of rank < 2"));
        }
        let mut order: Vec<usize> = (0..r).collect();
        order.swap(r - 2, r - 1);
        self.permute(&order)
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            grad: None,
            requires_grad: false,
        }
    }

    /// Elementwise binary op. Shapes must match, or one side must hold a
    /// single element.
    pub fn zip_with(&self, other: &Tensor<S>, f: impl Fn(S, S) -> S) -> Result<Self> {
        let (shape, data) = if self.shape == other.shape {
            let d = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
            (self.shape.clone(), d)
        } else if other.numel() == 1 {
            let b = other.data[0];
            (self.shape.clone(), self.data.iter().map(|&a| f(a, b)).collect())
        } else if self.numel() == 1 {
            let a = self.data[0];
            (other.shape.clone(), other.data.iter().map(|&b| f(a, b)).collect())
        } else {
            return Err(Error::shape(format!(
                "cannot broadcast {:?} against {:?}",
                self.shape, other.shape
            )));
        };
        Self::new(shape, data)
    }

    pub fn add(&self, other: &Tensor<S>) -> Result<Self> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor<S>) -> Result<Self> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor<S>) -> Result<Self> {
        self.zip_with(other, |a, b| a * b)
    }

    pub fn scale(&self, factor: S) -> Self {
        self.map(|v| v * factor)
    }

    pub fn tanh(&self) -> Self {
        self.map(|v| v.tanh())
    }

    pub fn relu(&self) -> Self {
        self.map(|v| if v > S::zero() { v } else { S::zero() })
    }

    /// Sum in index order.
    pub fn sum(&self) -> S {
        self.data.iter().fold(S::zero(), |acc, &v| acc + v)
    }

    pub fn mean(&self) -> S {
        self.sum() / S::from_usize(self.numel())
    }

    pub fn max_abs_diff(&self, other: &Tensor<S>) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "comparing {:?} with {:?}",
                self.shape, other.shape
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max))
    }

    /// Index of the largest entry in each row of a rank-2 tensor; first wins ties.
    pub fn argmax_rows(&self) -> Vec<usize> {
        assert_eq!(self.rank(), 2, "argmax_rows needs rank 2");
        let cols = self.shape[1];
        self.data.chunks(cols).map(argmax).collect()
    }

    /// Bitwise equality of shape and data.
    pub fn bit_eq(&self, other: &Tensor<S>) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.as_f64().to_bits() == b.as_f64().to_bits())
    }
}

pub fn argmax<S: Scalar>(row: &[S]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Advances a row-major multi-index; wraps to all zeros after the last element.
pub fn increment_index(idx: &mut [usize], shape: &[usize]) {
    for ax in (0..idx.len()).rev() {
        idx[ax] += 1;
        if idx[ax] < shape[ax] {
            return;
        }
        idx[ax] = 0;
    }
}

pub(crate) fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(usize, usize, usize, usize)> {
    let dims = match (a, b) {
        ([m, k], [k2, n]) if k == k2 => (1, *m, *k, *n),
        ([ba, m, k], [bb, k2, n]) if ba == bb && k == k2 => (*ba, *m, *k, *n),
        _ => {
            return Err(Error::shape(format!("matmul of {a:?} by {b:?}")));
        }
    };
    Ok(dims)
}

/// `out += a · b` for row-major `a` (m×k) and `b` (k×n).
pub(crate) fn matmul_into<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == S::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
}

/// `out += aᵀ · b` for `a` (k×m) and `b` (k×n).
pub(crate) fn matmul_at_b_into<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == S::zero() {
                continue;
            }
            let row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
}

/// `out += a · bᵀ` for `a` (m×k) and `b` (n×k).
pub(crate) fn matmul_a_bt_into<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = S::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc = acc + x * y;
            }
            out[i * n + j] = out[i * n + j] + acc;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seq(shape: &[usize]) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|v| v as f64).collect()).unwrap()
    }

    #[test]
    fn permute_branch_transpose_shape() {
        let t = Tensor::<f32>::zeros([3, 60, 50]);
        assert_eq!(t.permute(&[2, 1, 0]).unwrap().shape(), &[50, 60, 3]);
    }

    #[test]
    fn permute_moves_elements() {
        let t = seq(&[2, 3, 4]);
        let p = t.permute(&[2, 0, 1]).unwrap();
        assert_eq!(p.shape(), &[4, 2, 3]);
        for i in 0..2 {
            for j in 0..3 {
                for k in 0..4 {
                    assert_eq!(p.get(&[k, i, j]), t.get(&[i, j, k]));
                }
            }
        }
    }

    #[test]
    fn permute_identity_is_noop() {
        let t = seq(&[2, 3, 4]);
        assert!(t.permute(&[0, 1, 2]).unwrap().bit_eq(&t));
    }

    #[test]
    fn permute_rejects_bad_orders() {
        let t = seq(&[2, 3]);
        assert!(matches!(t.permute(&[0]), Err(Error::InvalidPermutation { .. })));
        assert!(matches!(t.permute(&[1, 1]), Err(Error::InvalidPermutation { .. })));
        assert!(matches!(t.permute(&[0, 2]), Err(Error::InvalidPermutation { .. })));
    }

    #[test]
    fn concat_shapes_and_errors() {
        let a = seq(&[3, 4]);
        let b = seq(&[3, 4]);
        assert_eq!(Tensor::concat(&[&a, &b], 0).unwrap().shape(), &[6, 4]);
        assert!(Tensor::concat(&[&a], 1).unwrap().bit_eq(&a));
        let c = seq(&[2, 5]);
        assert!(matches!(Tensor::concat(&[&a, &c], 0), Err(Error::Shape(_))));
    }

    #[test]
    fn matmul_identity_and_zero() {
        let m = seq(&[3, 4]);
        assert!(Tensor::eye(3).matmul(&m).unwrap().bit_eq(&m));
        let z = Tensor::zeros([4, 2]);
        assert!(m.matmul(&z).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(m.matmul(&Tensor::zeros([3, 2])).is_err());
    }

    #[test]
    fn relu_and_tanh_values() {
        let t = Tensor::new([3], vec![-1.0f64, 0.0, 2.0]).unwrap();
        assert_eq!(t.relu().data(), &[0.0, 0.0, 2.0]);
        assert!(Tensor::<f64>::zeros([4]).tanh().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn broadcasting_is_scalar_only() {
        let a = seq(&[2, 3]);
        let s = Tensor::scalar(2.0);
        assert_eq!(a.mul(&s).unwrap().data()[5], 10.0);
        assert!(a.add(&seq(&[3])).is_err());
    }

    #[test]
    fn zero_extent_rejected() {
        assert!(Tensor::<f32>::new([2, 0], vec![]).is_err());
        assert!(Tensor::<f32>::new([2, 2], vec![0.0; 3]).is_err());
    }

    fn shape_strategy() -> impl Strategy<Value = Vec<usize>> {
        prop::collection::vec(1usize..5, 1..5)
    }

    proptest! {
        #[test]
        fn permute_inverse_round_trip(shape in shape_strategy(), seed in any::<u64>()) {
            use rand::{seq::SliceRandom, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let t = seq(&shape).map(|v| v * 0.37 - 1.5);
            let mut order: Vec<usize> = (0..shape.len()).collect();
            order.shuffle(&mut rng);
            let back = t.permute(&order).unwrap().permute(&inverse_permutation(&order)).unwrap();
            prop_assert!(back.bit_eq(&t));
        }

        #[test]
        fn split_then_concat_round_trip(shape in shape_strategy(), axis_pick in 0usize..4, cut_pick in 0usize..8) {
            let axis = axis_pick % shape.len();
            let t = seq(&shape);
            let extent = shape[axis];
            let sizes = if extent > 1 {
                let cut = 1 + cut_pick % (extent - 1);
                vec![cut, extent - cut]
            } else {
                vec![1]
            };
            let parts = t.split(axis, &sizes).unwrap();
            let refs: Vec<&Tensor<f64>> = parts.iter().collect();
            prop_assert!(Tensor::concat(&refs, axis).unwrap().bit_eq(&t));
        }

        #[test]
        fn matmul_is_linear(m in 1usize..5, k in 1usize..5, n in 1usize..5, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut rnd = |shape: [usize; 2]| Tensor::<f64>::from_fn(shape, |_| rng.random_range(-1.0..1.0));
            let a = rnd([m, k]);
            let b = rnd([m, k]);
            let c = rnd([k, n]);
            let lhs = a.add(&b).unwrap().matmul(&c).unwrap();
            let rhs = a.matmul(&c).unwrap().add(&b.matmul(&c).unwrap()).unwrap();
            for (x, y) in lhs.data().iter().zip(rhs.data()) {
                prop_assert!((x - y).abs() <= 1e-5 * x.abs().max(y.abs()).max(1.0));
            }
        }
    }
}
