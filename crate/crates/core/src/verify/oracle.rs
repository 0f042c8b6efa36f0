//! Direct-summation reference implementations. Deliberately naive: every
//! output element is an explicit loop over its inputs.

use crate::error::{Error, Result};
use crate::model::AttentionBlock;
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

/// Convolution by explicit summation over 1 to 3 spatial axes.
pub fn conv_direct<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    b: &Tensor<S>,
    stride: &[usize],
    pad: &[usize],
) -> Result<Tensor<S>> {
    let sp = x.rank().saturating_sub(2);
    if !(1..=3).contains(&sp) || w.rank() != sp + 2 || stride.len() != sp || pad.len() != sp {
        return Err(Error::shape("conv_direct: inconsistent ranks"));
    }
    let (n, cin, cout) = (x.shape()[0], x.shape()[1], w.shape()[0]);
    if w.shape()[1] != cin || b.shape() != [cout] {
        return Err(Error::shape("conv_direct: channel mismatch"));
    }
    let lift = |v: &[usize], fill: usize| {
        let mut a = [fill; 3];
        a[..sp].copy_from_slice(v);
        a
    };
    let (inp, ker) = (lift(&x.shape()[2..], 1), lift(&w.shape()[2..], 1));
    let (st, pd) = (lift(stride, 1), lift(pad, 0));
    let mut out_ext = [1usize; 3];
    for a in 0..3 {
        let padded = inp[a] + 2 * pd[a];
        if ker[a] > padded {
            return Err(Error::shape("conv_direct: kernel larger than input"));
        }
        out_ext[a] = (padded - ker[a]) / st[a] + 1;
    }
    let xi = |ni: usize, c: usize, p: [usize; 3]| ((ni * cin + c) * inp[0] + p[0]) * inp[1] * inp[2] + p[1] * inp[2] + p[2];
    let wi = |o: usize, c: usize, k: [usize; 3]| ((o * cin + c) * ker[0] + k[0]) * ker[1] * ker[2] + k[1] * ker[2] + k[2];
    let mut out = Vec::with_capacity(n * cout * out_ext.iter().product::<usize>());
    for ni in 0..n {
        for o in 0..cout {
            for o0 in 0..out_ext[0] {
                for o1 in 0..out_ext[1] {
                    for o2 in 0..out_ext[2] {
                        let mut acc = b.data()[o];
                        for c in 0..cin {
                            for k0 in 0..ker[0] {
                                for k1 in 0..ker[1] {
                                    for k2 in 0..ker[2] {
                                        let pos = [
                                            (o0 * st[0] + k0) as isize - pd[0] as isize,
                                            (o1 * st[1] + k1) as isize - pd[1] as isize,
                                            (o2 * st[2] + k2) as isize - pd[2] as isize,
                                        ];
                                        if (0..3).any(|a| pos[a] < 0 || pos[a] >= inp[a] as isize) {
                                            continue;
                                        }
                                        let p = pos.map(|v| v as usize);
                                        acc = acc + x.data()[xi(ni, c, p)] * w.data()[wi(o, c, [k0, k1, k2])];
                                    }
                                }
                            }
                        }
                        out.push(acc);
                    }
                }
            }
        }
    }
    let mut shape = vec![n, cout];
    shape.extend_from_slice(&out_ext[..sp]);
    Tensor::new(shape, out)
}

/// Triple-loop product of two rank-2 tensors.
pub fn matmul_naive<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let ([m, k], [k2, n]) = (a.shape(), b.shape()) else {
        return Err(Error::shape("matmul_naive needs rank-2 operands"));
    };
    let (m, k, k2, n) = (*m, *k, *k2, *n);
    if k != k2 {
        return Err(Error::shape("matmul_naive: inner extents differ"));
    }
    let mut out = vec![S::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = S::zero();
            for p in 0..k {
                acc = acc + a.data()[i * k + p] * b.data()[p * n + j];
            }
            out[i * n + j] = acc;
        }
    }
    Tensor::new([m, n], out)
}

/// Attention of one block computed head by head, token by token.
///
/// `x` is `(N, D, grid…)` and `pe` is `(D, U)`.
pub fn attention_reference<S: Scalar>(
    store: &ParamStore<S>,
    block: &AttentionBlock,
    x: &Tensor<S>,
    pe: &Tensor<S>,
) -> Result<Tensor<S>> {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let u: usize = x.shape()[2..].iter().product();
    if pe.shape() != [d, u] {
        return Err(Error::shape("attention_reference: positional encoding shape"));
    }
    let (h, cq) = (block.heads, block.c_qkv);
    let dh = d / h;
    let xv = |ni: usize, c: usize, t: usize| x.data()[(ni * d + c) * u + t];
    let (wq, bq) = (store.get(block.query.weight).data(), store.get(block.query.bias).data());
    let (wk, bk) = (store.get(block.key.weight).data(), store.get(block.key.bias).data());
    let alpha = store.get(block.alpha).data()[0];
    let bias = store.get(block.bias).data();
    let norm = S::from_usize(block.c_beta).sqrt();
    let mut out = vec![S::zero(); x.numel()];
    for ni in 0..n {
        let project = |w: &[S], b: &[S], o: usize, t: usize| {
            let mut acc = b[o];
            for c in 0..d {
                acc = acc + w[o * d + c] * (xv(ni, c, t) + pe.data()[c * u + t]);
            }
            acc
        };
        for hi in 0..h {
            for i in 0..u {
                for j in 0..u {
                    let mut dot = S::zero();
                    for c in 0..cq {
                        let o = hi * cq + c;
                        dot = dot + project(wq, bq, o, i) * project(wk, bk, o, j);
                    }
                    let weight = alpha * (dot / norm).tanh() + bias[i * u + j];
                    for c in 0..dh {
                        let ch = hi * dh + c;
                        out[(ni * d + ch) * u + i] = out[(ni * d + ch) * u + i] + weight * xv(ni, ch, j);
                    }
                }
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}
