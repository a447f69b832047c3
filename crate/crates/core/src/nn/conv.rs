//! Standard 2D convolution through im2col and gemm.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{shape_err, Result};
use crate::real::Real;
use crate::tape::{GradTape, Var};
use crate::tensor::Tensor;

/// Kernel extent, stride and zero padding, each as `(rows, cols)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl ConvGeom {
    pub fn new(kernel: (usize, usize), stride: (usize, usize), padding: (usize, usize)) -> Self {
        ConvGeom {
            kernel,
            stride,
            padding,
        }
    }

    /// 3x3, stride 1, padding 1.
    pub fn same3() -> Self {
        Self::new((3, 3), (1, 1), (1, 1))
    }

    pub fn taps(&self) -> usize {
        self.kernel.0 * self.kernel.1
    }

    pub fn output_extent(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (kh, kw) = self.kernel;
        let (sh, sw) = self.stride;
        let (ph, pw) = self.padding;
        if kh == 0 || kw == 0 || sh == 0 || sw == 0 {
            return Err(shape_err("conv", format!("degenerate geometry {self:?}")));
        }
        if h + 2 * ph < kh || w + 2 * pw < kw {
            return Err(shape_err(
                "conv",
                format!("kernel {kh}x{kw} larger than padded input {h}x{w}"),
            ));
        }
        Ok(((h + 2 * ph - kh) / sh + 1, (w + 2 * pw - kw) / sw + 1))
    }
}

/// Weights `[C_out, C_in, kH, kW]`, bias `[C_out]` and geometry of one convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvKernel<T: Real = f64> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl<T: Real> ConvKernel<T> {
    pub fn zeros(c_out: usize, c_in: usize, geom: ConvGeom) -> Self {
        let (kh, kw) = geom.kernel;
        ConvKernel {
            weight: Tensor::zeros(&[c_out, c_in, kh, kw]),
            bias: Tensor::zeros(&[c_out]),
            stride: geom.stride,
            padding: geom.padding,
        }
    }

    /// He (fan-in) normal initialization, zero bias.
    pub fn he_init<R: Rng>(c_out: usize, c_in: usize, geom: ConvGeom, rng: &mut R) -> Self {
        let mut k = Self::zeros(c_out, c_in, geom);
        let fan_in = (c_in * geom.taps()) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("valid std");
        for v in k.weight.data_mut() {
            *v = T::c(normal.sample(rng));
        }
        k
    }

    pub fn geom(&self) -> ConvGeom {
        let s = self.weight.shape();
        ConvGeom::new((s[2], s[3]), self.stride, self.padding)
    }

    pub fn c_out(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn c_in(&self) -> usize {
        self.weight.shape()[1]
    }
}

/// Validated dimensions of one convolution call.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub ho: usize,
    pub wo: usize,
    pub geom: ConvGeom,
}

impl ConvDims {
    pub fn check<T: Real>(
        op: &'static str,
        x: &Tensor<T>,
        weight: &Tensor<T>,
        bias: &Tensor<T>,
        geom: ConvGeom,
    ) -> Result<Self> {
        let (n, c_in, h, w) = x.dims4()?;
        let ws = weight.shape();
        if ws.len() != 4 || ws[2] != geom.kernel.0 || ws[3] != geom.kernel.1 {
            return Err(shape_err(
                op,
                format!("weight {:?} does not match kernel {:?}", ws, geom.kernel),
            ));
        }
        if ws[1] != c_in {
            return Err(shape_err(
                op,
                format!("input has {c_in} channels, kernel expects {}", ws[1]),
            ));
        }
        if bias.shape() != [ws[0]] {
            return Err(shape_err(
                op,
                format!("bias {:?} for {} output channels", bias.shape(), ws[0]),
            ));
        }
        let (ho, wo) = geom.output_extent(h, w)?;
        Ok(ConvDims {
            n,
            c_in,
            h,
            w,
            c_out: ws[0],
            ho,
            wo,
            geom,
        })
    }

    pub fn rows(&self) -> usize {
        self.c_in * self.geom.taps()
    }

    pub fn locs(&self) -> usize {
        self.ho * self.wo
    }

    pub fn in_plane(&self) -> usize {
        self.h * self.w
    }
}

/// Output columns `ow` whose input column `ow·s + j − p` lies in `[0, w)`.
#[inline]
fn valid_cols(wo: usize, w: usize, s: usize, j: usize, p: usize) -> std::ops::Range<usize> {
    let lo = if p > j { (p - j).div_ceil(s) } else { 0 };
    let hi = if w + p > j { ((w + p - j - 1) / s + 1).min(wo) } else { 0 };
    lo.min(hi)..hi
}

/// Unfold one image `[C, H, W]` into `[C*kH*kW, Ho*Wo]` columns.
pub(crate) fn im2col<T: Real>(x: &[T], d: &ConvDims, col: &mut [T]) {
    let (kh, kw) = d.geom.kernel;
    let (sh, sw) = d.geom.stride;
    let (ph, pw) = d.geom.padding;
    let l = d.locs();
    for c in 0..d.c_in {
        let plane = &x[c * d.in_plane()..(c + 1) * d.in_plane()];
        for i in 0..kh {
            for j in 0..kw {
                let row = &mut col[((c * kh + i) * kw + j) * l..][..l];
                let cols = valid_cols(d.wo, d.w, sw, j, pw);
                for oh in 0..d.ho {
                    let ih = (oh * sh + i) as isize - ph as isize;
                    let dst = &mut row[oh * d.wo..(oh + 1) * d.wo];
                    if ih < 0 || ih >= d.h as isize || cols.is_empty() {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[ih as usize * d.w..(ih as usize + 1) * d.w];
                    dst[..cols.start].fill(T::zero());
                    dst[cols.end..].fill(T::zero());
                    let first = cols.start * sw + j - pw;
                    if sw == 1 {
                        dst[cols.clone()].copy_from_slice(&src[first..first + cols.len()]);
                    } else {
                        for (k, v) in dst[cols.clone()].iter_mut().enumerate() {
                            *v = src[first + k * sw];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back onto the image.
pub(crate) fn col2im<T: Real>(col: &[T], d: &ConvDims, dx: &mut [T]) {
    let (kh, kw) = d.geom.kernel;
    let (sh, sw) = d.geom.stride;
    let (ph, pw) = d.geom.padding;
    let l = d.locs();
    for c in 0..d.c_in {
        let plane = &mut dx[c * d.in_plane()..(c + 1) * d.in_plane()];
        for i in 0..kh {
            for j in 0..kw {
                let row = &col[((c * kh + i) * kw + j) * l..][..l];
                let cols = valid_cols(d.wo, d.w, sw, j, pw);
                if cols.is_empty() {
                    continue;
                }
                let first = cols.start * sw + j - pw;
                for oh in 0..d.ho {
                    let ih = (oh * sh + i) as isize - ph as isize;
                    if ih < 0 || ih >= d.h as isize {
                        continue;
                    }
                    let dst = &mut plane[ih as usize * d.w..(ih as usize + 1) * d.w];
                    let src = &row[oh * d.wo + cols.start..oh * d.wo + cols.end];
                    if sw == 1 {
                        for (a, &v) in dst[first..first + src.len()].iter_mut().zip(src) {
                            *a += v;
                        }
                    } else {
                        for (k, &v) in src.iter().enumerate() {
                            dst[first + k * sw] += v;
                        }
                    }
                }
            }
        }
    }
}

/// `out[n] = W · col[n] + b` for every batch item.
pub(crate) fn gemm_forward<T: Real>(
    d: &ConvDims,
    weight: &[T],
    bias: &[T],
    cols: &[Vec<T>],
) -> Vec<T> {
    let l = d.locs();
    let k = d.rows();
    let mut out = vec![T::zero(); d.n * d.c_out * l];
    for (n, col) in cols.iter().enumerate() {
        let y = &mut out[n * d.c_out * l..(n + 1) * d.c_out * l];
        for (co, row) in y.chunks_mut(l).enumerate() {
            row.iter_mut().for_each(|v| *v = bias[co]);
        }
        T::gemm(d.c_out, k, l, T::one(), weight, (k, 1), col, (l, 1), T::one(), y, (l, 1));
    }
    out
}

/// Weight/bias gradients and column gradients for one batch item.
pub(crate) fn gemm_backward_item<T: Real>(
    d: &ConvDims,
    weight: &[T],
    col: &[T],
    g: &[T],
    dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
    dcol: Option<&mut [T]>,
) {
    let l = d.locs();
    let k = d.rows();
    if let Some(dw) = dw {
        // dW += G colᵀ
        T::gemm(d.c_out, l, k, T::one(), g, (l, 1), col, (1, l), T::one(), dw, (k, 1));
    }
    if let Some(db) = db {
        for (co, row) in g.chunks(l).enumerate() {
            db[co] += row.iter().copied().sum();
        }
    }
    if let Some(dcol) = dcol {
        // dcol = Wᵀ G
        T::gemm(k, d.c_out, l, T::one(), weight, (1, k), g, (l, 1), T::zero(), dcol, (l, 1));
    }
}

fn unfold_all<T: Real>(x: &[T], d: &ConvDims) -> Vec<Vec<T>> {
    let per_item = d.c_in * d.in_plane();
    (0..d.n)
        .map(|n| {
            let mut col = vec![T::zero(); d.rows() * d.locs()];
            im2col(&x[n * per_item..(n + 1) * per_item], d, &mut col);
            col
        })
        .collect()
}

/// Zero-padded 2D convolution: `y(p0) = Σ_{pn∈R} w(pn) x(p0 + pn) + b`.
pub fn conv2d<T: Real>(x: &Tensor<T>, k: &ConvKernel<T>) -> Result<Tensor<T>> {
    let d = ConvDims::check("conv2d", x, &k.weight, &k.bias, k.geom())?;
    let cols = unfold_all(x.data(), &d);
    let out = gemm_forward(&d, k.weight.data(), k.bias.data(), &cols);
    Tensor::from_data(&[d.n, d.c_out, d.ho, d.wo], out)
}

/// Record a convolution with input `x [N,C,H,W]`, weight `w` and bias `b`.
pub fn conv2d_tape<T: Real>(
    tape: &mut GradTape<T>,
    x: Var,
    w: Var,
    b: Var,
    geom: ConvGeom,
) -> Result<Var> {
    let d = ConvDims::check("conv2d", tape.value(x), tape.value(w), tape.value(b), geom)?;
    let cols = unfold_all(tape.value(x).data(), &d);
    let out = gemm_forward(&d, tape.value(w).data(), tape.value(b).data(), &cols);
    let out = Tensor::from_data(&[d.n, d.c_out, d.ho, d.wo], out)?;
    Ok(tape.record(out, &[x, w, b], move |ctx, g, grads| {
        let weight = ctx.value(w).data();
        let per_out = d.c_out * d.locs();
        let per_in = d.c_in * d.in_plane();
        let want_x = grads.wants(x);
        let mut dcol = vec![T::zero(); if want_x { d.rows() * d.locs() } else { 0 }];
        for n in 0..d.n {
            let gn = &g[n * per_out..(n + 1) * per_out];
            gemm_backward_item(
                &d,
                weight,
                &cols[n],
                gn,
                grads.slot(w),
                None,
                if want_x { Some(&mut dcol) } else { None },
            );
            if let Some(db) = grads.slot(b) {
                gemm_backward_item(&d, weight, &cols[n], gn, None, Some(db), None);
            }
            if want_x {
                let dx = grads.slot(x).unwrap();
                col2im(&dcol, &d, &mut dx[n * per_in..(n + 1) * per_in]);
            }
        }
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_data(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Direct six-loop summation of the convolution definition.
    fn conv_oracle(x: &Tensor<f64>, k: &ConvKernel<f64>) -> Tensor<f64> {
        let (n, c, h, w) = x.dims4().unwrap();
        let ws = k.weight.shape();
        let (co, kh, kw) = (ws[0], ws[2], ws[3]);
        let (ho, wo) = k.geom().output_extent(h, w).unwrap();
        let mut out = Tensor::zeros(&[n, co, ho, wo]);
        for b in 0..n {
            for o in 0..co {
                for y in 0..ho {
                    for xx in 0..wo {
                        let mut acc = k.bias.get(&[o]);
                        for ci in 0..c {
                            for i in 0..kh {
                                for j in 0..kw {
                                    let r = (y * k.stride.0 + i) as isize - k.padding.0 as isize;
                                    let s = (xx * k.stride.1 + j) as isize - k.padding.1 as isize;
                                    if r >= 0 && s >= 0 && (r as usize) < h && (s as usize) < w {
                                        acc += k.weight.get(&[o, ci, i, j])
                                            * x.get(&[b, ci, r as usize, s as usize]);
                                    }
                                }
                            }
                        }
                        out.set(&[b, o, y, xx], acc);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&[2, 1, 4, 5], &mut rng);
        let mut k = ConvKernel::<f64>::zeros(1, 1, ConvGeom::new((1, 1), (1, 1), (0, 0)));
        k.weight.data_mut()[0] = 1.0;
        assert_eq!(conv2d(&x, &k).unwrap(), x);
    }

    #[test]
    fn ones_kernel_on_constant_image() {
        let x = Tensor::<f64>::full(&[1, 1, 5, 5], 0.7);
        let mut k = ConvKernel::zeros(1, 1, ConvGeom::same3());
        k.weight = Tensor::ones(&[1, 1, 3, 3]);
        let y = conv2d(&x, &k).unwrap();
        assert!((y.get(&[0, 0, 2, 2]) - 9.0 * 0.7).abs() < 1e-12);
        // corner sees 4 of 9 taps
        assert!((y.get(&[0, 0, 0, 0]) - 4.0 * 0.7).abs() < 1e-12);
    }

    #[test]
    fn matches_direct_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for geom in [
            ConvGeom::same3(),
            ConvGeom::new((3, 3), (2, 2), (1, 1)),
            ConvGeom::new((2, 3), (1, 2), (0, 1)),
        ] {
            let x = random(&[1, 2, 5, 5], &mut rng);
            let mut k = ConvKernel::he_init(3, 2, geom, &mut rng);
            k.bias = random(&[3], &mut rng);
            let diff = conv2d(&x, &k).unwrap().max_abs_diff(&conv_oracle(&x, &k));
            assert!(diff < 1e-12, "{geom:?}: {diff}");
        }
    }

    #[test]
    fn geometry_errors() {
        let x = Tensor::<f64>::zeros(&[1, 2, 5, 5]);
        let k = ConvKernel::zeros(3, 1, ConvGeom::same3());
        assert!(conv2d(&x, &k).is_err());
        let k = ConvKernel::zeros(3, 2, ConvGeom::new((7, 7), (1, 1), (0, 0)));
        assert!(conv2d(&x, &k).is_err());
    }
}
