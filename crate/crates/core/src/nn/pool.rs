//! Max pooling and adaptive max pooling.

use crate::error::{shape_err, Error, Result};
use crate::real::Real;
use crate::tape::{GradTape, Var};
use crate::tensor::Tensor;

/// Kernel size that makes a stride-`floor(in/out)` max pool produce exactly
/// `out` positions: `k = in − (out − 1)·floor(in / out)`.
pub fn adaptive_kernel_size(in_extent: usize, out_extent: usize) -> Result<usize> {
    if out_extent == 0 || out_extent > in_extent {
        return Err(Error::Config(format!(
            "adaptive pooling needs 1 <= out <= in, got in={in_extent}, out={out_extent}"
        )));
    }
    Ok(in_extent - (out_extent - 1) * (in_extent / out_extent))
}

/// Window and stride used by [`adaptive_max_pool2d`] for one axis.
pub fn adaptive_window(in_extent: usize, out_extent: usize) -> Result<(usize, usize)> {
    Ok((
        adaptive_kernel_size(in_extent, out_extent)?,
        in_extent / out_extent,
    ))
}

/// Forward max pool over `[N,C,H,W]` without padding. Returns the pooled
/// values and, per output, the flat in-plane index of the selected input.
fn pool_forward<T: Real>(
    x: &Tensor<T>,
    window: (usize, usize),
    stride: (usize, usize),
) -> Result<(Tensor<T>, Vec<usize>)> {
    let (n, c, h, w) = x.dims4()?;
    let (kh, kw) = window;
    let (sh, sw) = stride;
    if kh == 0 || kw == 0 || sh == 0 || sw == 0 || kh > h || kw > w {
        return Err(shape_err(
            "max_pool2d",
            format!("window {window:?} stride {stride:?} on {h}x{w} input"),
        ));
    }
    let ho = (h - kh) / sh + 1;
    let wo = (w - kw) / sw + 1;
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut arg = Vec::with_capacity(n * c * ho * wo);
    for plane in x.data().chunks(h * w) {
        for oh in 0..ho {
            for ow in 0..wo {
                let mut best = oh * sh * w + ow * sw;
                // Row-major scan with strict comparison: ties keep the lowest index.
                for i in 0..kh {
                    let row = (oh * sh + i) * w;
                    for j in 0..kw {
                        let idx = row + ow * sw + j;
                        if plane[idx] > plane[best] {
                            best = idx;
                        }
                    }
                }
                out.push(plane[best]);
                arg.push(best);
            }
        }
    }
    Ok((Tensor::from_data(&[n, c, ho, wo], out)?, arg))
}

pub fn max_pool2d<T: Real>(
    x: &Tensor<T>,
    window: (usize, usize),
    stride: (usize, usize),
) -> Result<Tensor<T>> {
    Ok(pool_forward(x, window, stride)?.0)
}

/// Record a max pool; the backward pass routes each output gradient to the
/// selected input position.
pub fn max_pool2d_tape<T: Real>(
    tape: &mut GradTape<T>,
    x: Var,
    window: (usize, usize),
    stride: (usize, usize),
) -> Result<Var> {
    let (out, arg) = pool_forward(tape.value(x), window, stride)?;
    let (_, _, h, w) = tape.value(x).dims4()?;
    let (_, _, ho, wo) = out.dims4()?;
    Ok(tape.record(out, &[x], move |_, g, grads| {
        if let Some(dx) = grads.slot(x) {
            let (plane_in, plane_out) = (h * w, ho * wo);
            for (o, (&gv, &a)) in g.iter().zip(&arg).enumerate() {
                dx[(o / plane_out) * plane_in + a] += gv;
            }
        }
    }))
}

fn adaptive_params<T: Real>(
    x: &Tensor<T>,
    out: (usize, usize),
) -> Result<((usize, usize), (usize, usize))> {
    let (_, _, h, w) = x.dims4()?;
    if out.0 == 0 || out.1 == 0 || out.0 > h || out.1 > w {
        return Err(shape_err(
            "adaptive_max_pool2d",
            format!("target {out:?} exceeds input {h}x{w}"),
        ));
    }
    let (kh, sh) = adaptive_window(h, out.0)?;
    let (kw, sw) = adaptive_window(w, out.1)?;
    Ok(((kh, kw), (sh, sw)))
}

/// Max pool whose window comes from [`adaptive_kernel_size`], so the output
/// extent is exactly `out = (H_t, W_t)`.
pub fn adaptive_max_pool2d<T: Real>(x: &Tensor<T>, out: (usize, usize)) -> Result<Tensor<T>> {
    let (window, stride) = adaptive_params(x, out)?;
    max_pool2d(x, window, stride)
}

pub fn adaptive_max_pool2d_tape<T: Real>(
    tape: &mut GradTape<T>,
    x: Var,
    out: (usize, usize),
) -> Result<Var> {
    let (window, stride) = adaptive_params(tape.value(x), out)?;
    max_pool2d_tape(tape, x, window, stride)
}
