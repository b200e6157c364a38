//! Stride-1, zero-padded ("same") 2-D convolution via im2col + GEMM.

use super::tensor::Tensor4;
use crate::error::{Error, Result};
use crate::scalar::{gemm, Op, Scalar};

/// Column-matrix budget (elements) for one batched im2col block.
const COL_BUDGET: usize = 1 << 18;

/// Unfolds one `(channels, rows, cols)` sample into rows of a patch matrix
/// with `channels * f * f` rows and leading dimension `ld`, starting at column `offset`.
fn im2col<T: Scalar>(
    input: &[T],
    channels: usize,
    rows: usize,
    cols: usize,
    f: usize,
    ld: usize,
    offset: usize,
    out: &mut [T],
) {
    let pad = (f / 2) as isize;
    let area = rows * cols;
    for c in 0..channels {
        let plane = &input[c * area..(c + 1) * area];
        for u in 0..f {
            for v in 0..f {
                let row_base = ((c * f + u) * f + v) * ld + offset;
                let dst = &mut out[row_base..row_base + area];
                let du = u as isize - pad;
                let dv = v as isize - pad;
                for i in 0..rows {
                    let si = i as isize + du;
                    let line = &mut dst[i * cols..(i + 1) * cols];
                    if si < 0 || si >= rows as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[si as usize * cols..(si as usize + 1) * cols];
                    for (j, slot) in line.iter_mut().enumerate() {
                        let sj = j as isize + dv;
                        *slot = if sj < 0 || sj >= cols as isize {
                            T::zero()
                        } else {
                            src[sj as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the input plane.
fn col2im<T: Scalar>(
    cols_buf: &[T],
    channels: usize,
    rows: usize,
    cols: usize,
    f: usize,
    ld: usize,
    offset: usize,
    out: &mut [T],
) {
    let pad = (f / 2) as isize;
    let area = rows * cols;
    out.fill(T::zero());
    for c in 0..channels {
        let plane = &mut out[c * area..(c + 1) * area];
        for u in 0..f {
            for v in 0..f {
                let row_base = ((c * f + u) * f + v) * ld + offset;
                let src = &cols_buf[row_base..row_base + area];
                let du = u as isize - pad;
                let dv = v as isize - pad;
                for i in 0..rows {
                    let si = i as isize + du;
                    if si < 0 || si >= rows as isize {
                        continue;
                    }
                    let dst = &mut plane[si as usize * cols..(si as usize + 1) * cols];
                    let (lo, hi) = (dv.max(0) as usize, (cols as isize + dv.min(0)) as usize);
                    let srow = &src[i * cols..(i + 1) * cols];
                    for sj in lo..hi {
                        let j = (sj as isize - dv) as usize;
                        dst[sj] = dst[sj] + srow[j];
                    }
                }
            }
        }
    }
}

fn check_kernels<T: Scalar>(
    input: &Tensor4<T>,
    kernels: &Tensor4<T>,
    bias: &[T],
) -> Result<(usize, usize)> {
    let [out_ch, in_ch, f, f2] = kernels.shape();
    if f != f2 || f % 2 == 0 {
        return Err(Error::InvalidArgument(format!(
            "kernel must be square with odd side, got {f}x{f2}"
        )));
    }
    if input.channels() != in_ch {
        return Err(Error::shape(
            format!("{in_ch} input channels"),
            input.channels(),
        ));
    }
    if bias.len() != out_ch {
        return Err(Error::shape(format!("{out_ch} biases"), bias.len()));
    }
    Ok((out_ch, f))
}

/// Samples per batched GEMM block.
fn block_len(patch: usize, area: usize, batch: usize) -> usize {
    (COL_BUDGET / (patch * area).max(1)).clamp(1, batch.max(1))
}

/// `out[n,k,i,j] = bias[k] + sum_{c,u,v} W[k,c,u,v] in[n,c,i+u-p,j+v-p]`.
pub fn conv2d_forward<T: Scalar>(
    input: &Tensor4<T>,
    kernels: &Tensor4<T>,
    bias: &[T],
) -> Result<Tensor4<T>> {
    let (out_ch, f) = check_kernels(input, kernels, bias)?;
    let [batch, in_ch, rows, cols] = input.shape();
    let area = rows * cols;
    let patch = in_ch * f * f;
    let mut out = Tensor4::zeros([batch, out_ch, rows, cols]);
    let block = block_len(patch, area, batch);
    let mut col_buf = vec![T::zero(); patch * area * block];
    let mut res = vec![T::zero(); out_ch * area * block];
    for start in (0..batch).step_by(block) {
        let nb = block.min(batch - start);
        let ld = nb * area;
        for s in 0..nb {
            im2col(
                input.sample(start + s),
                in_ch,
                rows,
                cols,
                f,
                ld,
                s * area,
                &mut col_buf,
            );
        }
        let res = &mut res[..out_ch * ld];
        for (k, row) in res.chunks_exact_mut(ld).enumerate() {
            row.fill(bias[k]);
        }
        gemm(
            Op::N,
            Op::N,
            out_ch,
            ld,
            patch,
            T::one(),
            kernels.data(),
            &col_buf[..patch * ld],
            T::one(),
            res,
        );
        for s in 0..nb {
            let dst = out.sample_mut(start + s);
            for k in 0..out_ch {
                dst[k * area..(k + 1) * area]
                    .copy_from_slice(&res[k * ld + s * area..k * ld + (s + 1) * area]);
            }
        }
    }
    Ok(out)
}

/// Gradients of [`conv2d_forward`].
#[derive(Debug, Clone)]
pub struct ConvGrads<T> {
    /// `None` when the caller did not ask for it (first layer of a network).
    pub input: Option<Tensor4<T>>,
    pub kernels: Tensor4<T>,
    pub bias: Vec<T>,
}

pub fn conv2d_backward<T: Scalar>(
    grad_out: &Tensor4<T>,
    input: &Tensor4<T>,
    kernels: &Tensor4<T>,
    need_input_grad: bool,
) -> Result<ConvGrads<T>> {
    let [out_ch, in_ch, f, _] = kernels.shape();
    let [batch, _, rows, cols] = input.shape();
    if input.channels() != in_ch {
        return Err(Error::shape(
            format!("{in_ch} input channels"),
            input.channels(),
        ));
    }
    if grad_out.shape() != [batch, out_ch, rows, cols] {
        return Err(Error::shape(
            format!("{:?}", [batch, out_ch, rows, cols]),
            format!("{:?}", grad_out.shape()),
        ));
    }
    let area = rows * cols;
    let patch = in_ch * f * f;
    let mut grad_k = Tensor4::zeros(kernels.shape());
    let mut grad_b = vec![T::zero(); out_ch];
    let mut grad_in = need_input_grad.then(|| Tensor4::zeros(input.shape()));
    let block = block_len(patch, area, batch);
    let mut col_buf = vec![T::zero(); patch * area * block];
    let mut dcol = vec![
        T::zero();
        if need_input_grad {
            patch * area * block
        } else {
            0
        }
    ];
    let mut go_cat = vec![T::zero(); out_ch * area * block];
    for start in (0..batch).step_by(block) {
        let nb = block.min(batch - start);
        let ld = nb * area;
        let go_cat = &mut go_cat[..out_ch * ld];
        for s in 0..nb {
            let go = grad_out.sample(start + s);
            for k in 0..out_ch {
                go_cat[k * ld + s * area..k * ld + (s + 1) * area]
                    .copy_from_slice(&go[k * area..(k + 1) * area]);
            }
            im2col(
                input.sample(start + s),
                in_ch,
                rows,
                cols,
                f,
                ld,
                s * area,
                &mut col_buf,
            );
        }
        for (k, row) in go_cat.chunks_exact(ld).enumerate() {
            grad_b[k] = grad_b[k] + row.iter().copied().sum::<T>();
        }
        let cols_mat = &col_buf[..patch * ld];
        // dW += dOut (out x ld) * cols^T (ld x patch)
        gemm(
            Op::N,
            Op::T,
            out_ch,
            patch,
            ld,
            T::one(),
            go_cat,
            cols_mat,
            T::one(),
            grad_k.data_mut(),
        );
        if let Some(gi) = grad_in.as_mut() {
            // dcols = W^T (patch x out) * dOut (out x ld)
            let dcol = &mut dcol[..patch * ld];
            gemm(
                Op::T,
                Op::N,
                patch,
                ld,
                out_ch,
                T::one(),
                kernels.data(),
                go_cat,
                T::zero(),
                dcol,
            );
            for s in 0..nb {
                col2im(
                    dcol,
                    in_ch,
                    rows,
                    cols,
                    f,
                    ld,
                    s * area,
                    gi.sample_mut(start + s),
                );
            }
        }
    }
    Ok(ConvGrads {
        input: grad_in,
        kernels: grad_k,
        bias: grad_b,
    })
}
