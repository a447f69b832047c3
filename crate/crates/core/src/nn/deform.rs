//! Deformable convolution: every kernel tap reads the input at
//! `p0 + pn + Δpn`, with fractional locations resolved by bilinear
//! interpolation and zero padding outside the image.
//!
//! Offsets are shared across input channels: one `(Δrow, Δcol)` pair per
//! tap per output location, laid out as `[N, 2·kH·kW, Ho, Wo]` with channel
//! `2t` holding Δrow and `2t+1` holding Δcol of tap `t = i·kW + j`.

use crate::error::{shape_err, Error, Result};
use crate::nn::conv::{gemm_backward_item, gemm_forward, ConvDims, ConvGeom, ConvKernel};
use crate::real::Real;
use crate::tape::{GradTape, Var};
use crate::tensor::Tensor;

/// One corner of a bilinear read: flat index into the plane (when inside),
/// interpolation weight and its derivatives with respect to row and column.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Corner<T> {
    pub index: Option<usize>,
    pub weight: T,
    pub d_row: T,
    pub d_col: T,
}

/// The four corners surrounding `(row, col)` in an `h x w` plane.
///
/// The cell is chosen by `floor`, so on the integer lattice the coordinate
/// derivative is the one of the cell whose lower corner is the sample point.
#[inline]
pub(crate) fn bilinear_corners<T: Real>(h: usize, w: usize, row: T, col: T) -> [Corner<T>; 4] {
    let r0 = row.floor();
    let c0 = col.floor();
    let fr = row - r0;
    let fc = col - c0;
    let one = T::one();
    let index = |dr: i64, dc: i64| -> Option<usize> {
        // Far-away samples would overflow the integer conversion.
        let r = r0.to_i64().unwrap_or(i64::MIN / 2) + dr;
        let c = c0.to_i64().unwrap_or(i64::MIN / 2) + dc;
        if r >= 0 && c >= 0 && (r as usize) < h && (c as usize) < w {
            Some(r as usize * w + c as usize)
        } else {
            None
        }
    };
    [
        Corner {
            index: index(0, 0),
            weight: (one - fr) * (one - fc),
            d_row: -(one - fc),
            d_col: -(one - fr),
        },
        Corner {
            index: index(0, 1),
            weight: (one - fr) * fc,
            d_row: -fc,
            d_col: one - fr,
        },
        Corner {
            index: index(1, 0),
            weight: fr * (one - fc),
            d_row: one - fc,
            d_col: -fr,
        },
        Corner {
            index: index(1, 1),
            weight: fr * fc,
            d_row: fc,
            d_col: fr,
        },
    ]
}

#[inline]
fn read<T: Real>(plane: &[T], corners: &[Corner<T>; 4]) -> T {
    let mut v = T::zero();
    for k in corners {
        if let Some(i) = k.index {
            v += k.weight * plane[i];
        }
    }
    v
}

/// Bilinear read of every channel of `x [C,H,W]` at fractional `(row, col)`.
pub fn bilinear_sample<T: Real>(x: &Tensor<T>, p: (T, T)) -> Result<Tensor<T>> {
    let (c, h, w) = x.dims3()?;
    if !x.all_finite() || !p.0.is_finite() || !p.1.is_finite() {
        return Err(Error::NonFinite("bilinear_sample"));
    }
    let corners = bilinear_corners(h, w, p.0, p.1);
    let out = (0..c)
        .map(|ci| read(&x.data()[ci * h * w..(ci + 1) * h * w], &corners))
        .collect();
    Tensor::from_data(&[c], out)
}

/// Record a bilinear read of `x [C,H,W]` at the location held in `p [2]`
/// (row, col). Gradients flow to both the image and the coordinates.
pub fn bilinear_sample_tape<T: Real>(tape: &mut GradTape<T>, x: Var, p: Var) -> Result<Var> {
    if tape.value(p).len() != 2 {
        return Err(shape_err("bilinear_sample", "location must hold (row, col)"));
    }
    let (row, col) = (tape.value(p).data()[0], tape.value(p).data()[1]);
    let out = bilinear_sample(tape.value(x), (row, col))?;
    let (_, h, w) = tape.value(x).dims3()?;
    Ok(tape.record(out, &[x, p], move |ctx, g, grads| {
        let corners = bilinear_corners(h, w, row, col);
        let plane = h * w;
        if let Some(dx) = grads.slot(x) {
            for (ci, &gc) in g.iter().enumerate() {
                for k in &corners {
                    if let Some(i) = k.index {
                        dx[ci * plane + i] += gc * k.weight;
                    }
                }
            }
        }
        if grads.wants(p) {
            let xv = ctx.value(x).data();
            let (mut dr, mut dc) = (T::zero(), T::zero());
            for (ci, &gc) in g.iter().enumerate() {
                for k in &corners {
                    if let Some(i) = k.index {
                        dr += gc * k.d_row * xv[ci * plane + i];
                        dc += gc * k.d_col * xv[ci * plane + i];
                    }
                }
            }
            let dp = grads.slot(p).unwrap();
            dp[0] += dr;
            dp[1] += dc;
        }
    }))
}

fn check_offsets<T: Real>(d: &ConvDims, off: &Tensor<T>) -> Result<()> {
    let expected = [d.n, 2 * d.geom.taps(), d.ho, d.wo];
    if off.shape() != expected {
        return Err(shape_err(
            "deform_conv2d",
            format!("offset field {:?}, expected {:?}", off.shape(), expected),
        ));
    }
    if !off.all_finite() {
        return Err(Error::NonFinite("deform_conv2d offsets"));
    }
    Ok(())
}

/// Sampling location of tap `(i, j)` at output `(oh, ow)` before offsets.
#[inline]
fn base_location(d: &ConvDims, oh: usize, ow: usize, i: usize, j: usize) -> (f64, f64) {
    (
        (oh * d.geom.stride.0 + i) as f64 - d.geom.padding.0 as f64,
        (ow * d.geom.stride.1 + j) as f64 - d.geom.padding.1 as f64,
    )
}

/// Deformable unfold of one image: `col[c·K + t, l] = x_c(p0 + pt + Δpt)`.
fn deform_im2col<T: Real>(x: &[T], off: &[T], d: &ConvDims, col: &mut [T]) {
    let (kh, kw) = d.geom.kernel;
    let taps = d.geom.taps();
    let l = d.locs();
    for i in 0..kh {
        for j in 0..kw {
            let t = i * kw + j;
            for oh in 0..d.ho {
                for ow in 0..d.wo {
                    let loc = oh * d.wo + ow;
                    let (br, bc) = base_location(d, oh, ow, i, j);
                    let r = T::c(br) + off[2 * t * l + loc];
                    let c = T::c(bc) + off[(2 * t + 1) * l + loc];
                    let corners = bilinear_corners(d.h, d.w, r, c);
                    for ci in 0..d.c_in {
                        let plane = &x[ci * d.in_plane()..(ci + 1) * d.in_plane()];
                        col[(ci * taps + t) * l + loc] = read(plane, &corners);
                    }
                }
            }
        }
    }
}

/// Adjoint of [`deform_im2col`] with respect to the image and the offsets.
fn deform_col2im<T: Real>(
    x: &[T],
    off: &[T],
    d: &ConvDims,
    dcol: &[T],
    mut dx: Option<&mut [T]>,
    mut doff: Option<&mut [T]>,
) {
    let (kh, kw) = d.geom.kernel;
    let taps = d.geom.taps();
    let l = d.locs();
    let plane_len = d.in_plane();
    let want_off = doff.is_some();
    for i in 0..kh {
        for j in 0..kw {
            let t = i * kw + j;
            for oh in 0..d.ho {
                for ow in 0..d.wo {
                    let loc = oh * d.wo + ow;
                    let (br, bc) = base_location(d, oh, ow, i, j);
                    let r = T::c(br) + off[2 * t * l + loc];
                    let c = T::c(bc) + off[(2 * t + 1) * l + loc];
                    let corners = bilinear_corners(d.h, d.w, r, c);
                    let (mut gr, mut gc) = (T::zero(), T::zero());
                    for ci in 0..d.c_in {
                        let g = dcol[(ci * taps + t) * l + loc];
                        if g == T::zero() {
                            continue;
                        }
                        let base = ci * plane_len;
                        for k in &corners {
                            if let Some(idx) = k.index {
                                if let Some(dx) = dx.as_deref_mut() {
                                    dx[base + idx] += g * k.weight;
                                }
                                if want_off {
                                    let v = x[base + idx];
                                    gr += g * k.d_row * v;
                                    gc += g * k.d_col * v;
                                }
                            }
                        }
                    }
                    if let Some(doff) = doff.as_deref_mut() {
                        doff[2 * t * l + loc] += gr;
                        doff[(2 * t + 1) * l + loc] += gc;
                    }
                }
            }
        }
    }
}

fn unfold_all<T: Real>(x: &[T], off: &[T], d: &ConvDims) -> Vec<Vec<T>> {
    let per_item = d.c_in * d.in_plane();
    let per_off = 2 * d.geom.taps() * d.locs();
    (0..d.n)
        .map(|n| {
            let mut col = vec![T::zero(); d.rows() * d.locs()];
            deform_im2col(
                &x[n * per_item..(n + 1) * per_item],
                &off[n * per_off..(n + 1) * per_off],
                d,
                &mut col,
            );
            col
        })
        .collect()
}

/// `y(p0) = Σ_{pn∈R} w(pn) x(p0 + pn + Δpn) + b`.
pub fn deform_conv2d<T: Real>(
    x: &Tensor<T>,
    k: &ConvKernel<T>,
    off: &Tensor<T>,
) -> Result<Tensor<T>> {
    let d = ConvDims::check("deform_conv2d", x, &k.weight, &k.bias, k.geom())?;
    check_offsets(&d, off)?;
    let cols = unfold_all(x.data(), off.data(), &d);
    let out = gemm_forward(&d, k.weight.data(), k.bias.data(), &cols);
    Tensor::from_data(&[d.n, d.c_out, d.ho, d.wo], out)
}

/// Record a deformable convolution; gradients flow to input, weight, bias and offsets.
pub fn deform_conv2d_tape<T: Real>(
    tape: &mut GradTape<T>,
    x: Var,
    w: Var,
    b: Var,
    off: Var,
    geom: ConvGeom,
) -> Result<Var> {
    let d = ConvDims::check(
        "deform_conv2d",
        tape.value(x),
        tape.value(w),
        tape.value(b),
        geom,
    )?;
    check_offsets(&d, tape.value(off))?;
    let cols = unfold_all(tape.value(x).data(), tape.value(off).data(), &d);
    let out = gemm_forward(&d, tape.value(w).data(), tape.value(b).data(), &cols);
    let out = Tensor::from_data(&[d.n, d.c_out, d.ho, d.wo], out)?;
    Ok(tape.record(out, &[x, w, b, off], move |ctx, g, grads| {
        let weight = ctx.value(w).data();
        let xv = ctx.value(x).data();
        let ov = ctx.value(off).data();
        let per_out = d.c_out * d.locs();
        let per_in = d.c_in * d.in_plane();
        let per_off = 2 * d.geom.taps() * d.locs();
        let (want_x, want_off) = (grads.wants(x), grads.wants(off));
        let mut dcol = vec![T::zero(); d.rows() * d.locs()];
        for n in 0..d.n {
            let gn = &g[n * per_out..(n + 1) * per_out];
            gemm_backward_item(&d, weight, &cols[n], gn, grads.slot(w), None, None);
            gemm_backward_item(&d, weight, &cols[n], gn, None, grads.slot(b), None);
            if !(want_x || want_off) {
                continue;
            }
            gemm_backward_item(&d, weight, &cols[n], gn, None, None, Some(&mut dcol));
            let xn = &xv[n * per_in..(n + 1) * per_in];
            let on = &ov[n * per_off..(n + 1) * per_off];
            let mut dx = vec![T::zero(); if want_x { per_in } else { 0 }];
            let mut doff = vec![T::zero(); if want_off { per_off } else { 0 }];
            deform_col2im(
                xn,
                on,
                &d,
                &dcol,
                want_x.then_some(dx.as_mut_slice()),
                want_off.then_some(doff.as_mut_slice()),
            );
            if let Some(gx) = grads.slot(x) {
                gx[n * per_in..(n + 1) * per_in].iter_mut().zip(&dx).for_each(|(a, &v)| *a += v);
            }
            if let Some(go) = grads.slot(off) {
                go[n * per_off..(n + 1) * per_off].iter_mut().zip(&doff).for_each(|(a, &v)| *a += v);
            }
        }
    }))
}

/// Companion convolution that predicts the offset field of `k`: same kernel
/// size, stride and padding, `2·kH·kW` output channels, all weights zero.
pub fn make_offset_branch<T: Real>(k: &ConvKernel<T>) -> ConvKernel<T> {
    let geom = k.geom();
    ConvKernel::zeros(2 * geom.taps(), k.c_in(), geom)
}
