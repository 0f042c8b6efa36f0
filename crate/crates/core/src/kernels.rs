//! Convolution and pooling kernels over three spatial axes.
//!
//! 2D convolution is the same kernel with a trailing unit axis. The forward
//! pass lowers each sample to a column matrix (im2col) and runs one matrix
//! product against the flattened weights.

use crate::error::{Error, Result};
use crate::tensor::{matmul_a_bt_into, matmul_at_b_into, matmul_into, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub output: [usize; 3],
}

impl ConvGeom {
    pub fn new(
        batch: usize,
        c_in: usize,
        c_out: usize,
        input: [usize; 3],
        kernel: [usize; 3],
        stride: [usize; 3],
        pad: [usize; 3],
    ) -> Result<Self> {
        let mut output = [0; 3];
        for ax in 0..3 {
            if stride[ax] == 0 || kernel[ax] == 0 {
                return Err(Error::invalid("kernel and stride extents must be positive"));
            }
            let padded = input[ax] + 2 * pad[ax];
            if kernel[ax] > padded {
                return Err(Error::shape(format!(
                    "kernel {:?} larger than padded input {:?} (pad {:?})",
                    kernel, input, pad
                )));
            }
            output[ax] = (padded - kernel[ax]) / stride[ax] + 1;
        }
        Ok(Self {
            batch,
            c_in,
            c_out,
            input,
            kernel,
            stride,
            pad,
            output,
        })
    }

    pub fn kernel_volume(&self) -> usize {
        self.kernel.iter().product()
    }

    pub fn input_volume(&self) -> usize {
        self.input.iter().product()
    }

    pub fn output_volume(&self) -> usize {
        self.output.iter().product()
    }

    /// Rows of the column matrix: one per (input channel, kernel offset).
    pub fn col_rows(&self) -> usize {
        self.c_in * self.kernel_volume()
    }

    /// Input coordinate on `ax` read by output position `o` at kernel offset `k`,
    /// or `None` when it falls in the zero padding.
    #[inline]
    fn source(&self, ax: usize, o: usize, k: usize) -> Option<usize> {
        let pos = (o * self.stride[ax] + k) as isize - self.pad[ax] as isize;
        (pos >= 0 && (pos as usize) < self.input[ax]).then_some(pos as usize)
    }
}

/// Lowers one sample `(c_in, d0, d1, d2)` to a `(c_in·kvol, out_vol)` matrix.
pub fn im2col<S: Scalar>(g: &ConvGeom, x: &[S], cols: &mut [S]) {
    let [_, i1, i2] = g.input;
    let [o0, o1, o2] = g.output;
    let [k0, k1, k2] = g.kernel;
    let l = g.output_volume();
    let mut row = 0;
    for c in 0..g.c_in {
        let xc = &x[c * g.input_volume()..(c + 1) * g.input_volume()];
        for a in 0..k0 {
            for b in 0..k1 {
                for e in 0..k2 {
                    let dst = &mut cols[row * l..(row + 1) * l];
                    let mut col = 0;
                    for p in 0..o0 {
                        let s0 = g.source(0, p, a);
                        for q in 0..o1 {
                            let s1 = g.source(1, q, b);
                            for r in 0..o2 {
                                dst[col] = match (s0, s1, g.source(2, r, e)) {
                                    (Some(u), Some(v), Some(w)) => xc[(u * i1 + v) * i2 + w],
                                    _ => S::zero(),
                                };
                                col += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the sample.
pub fn col2im<S: Scalar>(g: &ConvGeom, cols: &[S], dx: &mut [S]) {
    let [_, i1, i2] = g.input;
    let [o0, o1, o2] = g.output;
    let [k0, k1, k2] = g.kernel;
    let l = g.output_volume();
    let mut row = 0;
    for c in 0..g.c_in {
        let dxc = &mut dx[c * g.input_volume()..(c + 1) * g.input_volume()];
        for a in 0..k0 {
            for b in 0..k1 {
                for e in 0..k2 {
                    let src = &cols[row * l..(row + 1) * l];
                    let mut col = 0;
                    for p in 0..o0 {
                        let s0 = g.source(0, p, a);
                        for q in 0..o1 {
                            let s1 = g.source(1, q, b);
                            for r in 0..o2 {
                                if let (Some(u), Some(v), Some(w)) = (s0, s1, g.source(2, r, e)) {
                                    let at = (u * i1 + v) * i2 + w;
                                    dxc[at] = dxc[at] + src[col];
                                }
                                col += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Cross-correlation with bias. `x` is `(batch, c_in, input…)`, `weight` is
/// `(c_out, c_in, kernel…)`, output is `(batch, c_out, output…)`.
pub fn conv_forward<S: Scalar>(g: &ConvGeom, x: &[S], weight: &[S], bias: &[S]) -> Vec<S> {
    let rows = g.col_rows();
    let l = g.output_volume();
    let in_len = g.c_in * g.input_volume();
    let out_len = g.c_out * l;
    let mut cols = vec![S::zero(); rows * l];
    let mut out = vec![S::zero(); g.batch * out_len];
    for n in 0..g.batch {
        im2col(g, &x[n * in_len..(n + 1) * in_len], &mut cols);
        let y = &mut out[n * out_len..(n + 1) * out_len];
        for (co, chunk) in y.chunks_mut(l).enumerate() {
            chunk.fill(bias[co]);
        }
        matmul_into(weight, &cols, y, g.c_out, rows, l);
    }
    out
}

pub struct ConvGrads<S> {
    pub dx: Vec<S>,
    pub dweight: Vec<S>,
    pub dbias: Vec<S>,
}

pub fn conv_backward<S: Scalar>(g: &ConvGeom, x: &[S], weight: &[S], dy: &[S]) -> ConvGrads<S> {
    let rows = g.col_rows();
    let l = g.output_volume();
    let in_len = g.c_in * g.input_volume();
    let out_len = g.c_out * l;
    let mut cols = vec![S::zero(); rows * l];
    let mut dcols = vec![S::zero(); rows * l];
    let mut dx = vec![S::zero(); x.len()];
    let mut dweight = vec![S::zero(); weight.len()];
    let mut dbias = vec![S::zero(); g.c_out];
    for n in 0..g.batch {
        let dyn_ = &dy[n * out_len..(n + 1) * out_len];
        im2col(g, &x[n * in_len..(n + 1) * in_len], &mut cols);
        matmul_a_bt_into(dyn_, &cols, &mut dweight, g.c_out, l, rows);
        for (co, chunk) in dyn_.chunks(l).enumerate() {
            dbias[co] = chunk.iter().fold(dbias[co], |acc, &v| acc + v);
        }
        dcols.fill(S::zero());
        matmul_at_b_into(weight, dyn_, &mut dcols, rows, g.c_out, l);
        col2im(g, &dcols, &mut dx[n * in_len..(n + 1) * in_len]);
    }
    ConvGrads { dx, dweight, dbias }
}

/// Non-overlapping average pooling over the last two axes of `(outer, h, w)`;
/// trailing remainders are dropped.
pub fn avg_pool2d<S: Scalar>(x: &[S], outer: usize, h: usize, w: usize, k: usize) -> Vec<S> {
    let (oh, ow) = (h / k, w / k);
    let norm = S::from_usize(k * k);
    let mut out = vec![S::zero(); outer * oh * ow];
    for o in 0..outer {
        let plane = &x[o * h * w..(o + 1) * h * w];
        for i in 0..oh {
            for j in 0..ow {
                let mut acc = S::zero();
                for a in 0..k {
                    for b in 0..k {
                        acc = acc + plane[(i * k + a) * w + j * k + b];
                    }
                }
                out[(o * oh + i) * ow + j] = acc / norm;
            }
        }
    }
    out
}

pub fn avg_pool2d_backward<S: Scalar>(dy: &[S], outer: usize, h: usize, w: usize, k: usize) -> Vec<S> {
    let (oh, ow) = (h / k, w / k);
    let norm = S::from_usize(k * k);
    let mut dx = vec![S::zero(); outer * h * w];
    for o in 0..outer {
        for i in 0..oh {
            for j in 0..ow {
                let g = dy[(o * oh + i) * ow + j] / norm;
                for a in 0..k {
                    for b in 0..k {
                        dx[o * h * w + (i * k + a) * w + j * k + b] = g;
                    }
                }
            }
        }
    }
    dx
}
