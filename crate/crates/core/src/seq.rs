//! Recurrent labeling stage: feature columns to frames, bidirectional LSTM,
//! and the per-frame class projection.

use rand::Rng;

use crate::error::{shape_err, Result};
use crate::real::Real;
use crate::tape::{sigmoid, GradTape, Var};
use crate::tensor::Tensor;

/// Frames `[T, D]` of one sequence, `T >= 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSequence<T: Real> {
    frames: Tensor<T>,
}

impl<T: Real> FrameSequence<T> {
    pub fn new(frames: Tensor<T>) -> Result<Self> {
        let (t, _) = frames.dims2()?;
        if t == 0 {
            return Err(shape_err("FrameSequence", "needs at least one frame"));
        }
        Ok(FrameSequence { frames })
    }

    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn frame(&self, t: usize) -> &[T] {
        let d = self.dim();
        &self.frames.data()[t * d..(t + 1) * d]
    }

    pub fn as_tensor(&self) -> &Tensor<T> {
        &self.frames
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.frames
    }
}

/// Weights of one LSTM direction. Gate blocks are stacked in the order
/// input, forget, cell, output: rows `[0,H)`, `[H,2H)`, `[2H,3H)`, `[3H,4H)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmParams<T: Real> {
    /// `[4H, I]`
    pub w: Tensor<T>,
    /// `[4H, H]`
    pub u: Tensor<T>,
    /// `[4H]`
    pub b: Tensor<T>,
}

/// Tape handles of one LSTM direction.
#[derive(Clone, Copy, Debug)]
pub struct LstmVars {
    pub w: Var,
    pub u: Var,
    pub b: Var,
}

impl<T: Real> LstmParams<T> {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        LstmParams {
            w: Tensor::zeros(&[4 * hidden, input]),
            u: Tensor::zeros(&[4 * hidden, hidden]),
            b: Tensor::zeros(&[4 * hidden]),
        }
    }

    /// Uniform `±1/sqrt(H)` weights, zero bias.
    pub fn init<R: Rng>(input: usize, hidden: usize, rng: &mut R) -> Self {
        let mut p = Self::zeros(input, hidden);
        let a = 1.0 / (hidden as f64).sqrt();
        for v in p.w.data_mut().iter_mut().chain(p.u.data_mut()) {
            *v = T::c(rng.gen_range(-a..a));
        }
        p
    }

    pub fn hidden(&self) -> usize {
        self.u.shape()[1]
    }

    pub fn input(&self) -> usize {
        self.w.shape()[1]
    }

    pub fn bind(&self, tape: &mut GradTape<T>) -> LstmVars {
        LstmVars {
            w: tape.leaf(self.w.clone()),
            u: tape.leaf(self.u.clone()),
            b: tape.leaf(self.b.clone()),
        }
    }
}

fn check_lstm<T: Real>(
    w: &Tensor<T>,
    u: &Tensor<T>,
    b: &Tensor<T>,
    input: usize,
) -> Result<usize> {
    let (g, i) = w.dims2()?;
    let (g2, h) = u.dims2()?;
    if g != 4 * h || g2 != g || b.shape() != [g] || i != input {
        return Err(shape_err(
            "lstm",
            format!(
                "W {:?}, U {:?}, b {:?} for input dim {input}",
                w.shape(),
                u.shape(),
                b.shape()
            ),
        ));
    }
    Ok(h)
}

/// Gate nonlinearities applied in place to pre-activations `[4H]`, followed by
/// the state update. Writes `c` and `h`, leaves activations in `pre`.
#[inline]
fn cell_pointwise<T: Real>(pre: &mut [T], c_prev: &[T], c: &mut [T], h: &mut [T]) {
    let hd = c.len();
    for k in 0..hd {
        let i = sigmoid(pre[k]);
        let f = sigmoid(pre[hd + k]);
        let g = pre[2 * hd + k].tanh();
        let o = sigmoid(pre[3 * hd + k]);
        pre[k] = i;
        pre[hd + k] = f;
        pre[2 * hd + k] = g;
        pre[3 * hd + k] = o;
        c[k] = f * c_prev[k] + i * g;
        h[k] = o * c[k].tanh();
    }
}

/// Gradient of the cell: from `dh`, `dc` (total, including the carry) and the
/// cached activations, write the pre-activation gradient `dpre [4H]` and the
/// gradient flowing to `c_prev`.
#[inline]
fn cell_pointwise_backward<T: Real>(
    act: &[T],
    c_prev: &[T],
    c: &[T],
    dh: &[T],
    dc_in: &[T],
    dpre: &mut [T],
    dc_prev: &mut [T],
) {
    let hd = c.len();
    let one = T::one();
    for k in 0..hd {
        let (i, f, g, o) = (act[k], act[hd + k], act[2 * hd + k], act[3 * hd + k]);
        let tc = c[k].tanh();
        let dc = dc_in[k] + dh[k] * o * (one - tc * tc);
        dpre[k] = dc * g * i * (one - i);
        dpre[hd + k] = dc * c_prev[k] * f * (one - f);
        dpre[2 * hd + k] = dc * i * (one - g * g);
        dpre[3 * hd + k] = dh[k] * tc * o * (one - o);
        dc_prev[k] = dc * f;
    }
}

/// One LSTM step: `i,f,o = σ(·)`, `g = tanh(·)`, `c = f⊙c_prev + i⊙g`,
/// `h = o⊙tanh(c)` with pre-activations `W x + U h_prev + b`.
pub fn lstm_cell<T: Real>(
    x: &[T],
    h_prev: &[T],
    c_prev: &[T],
    p: &LstmParams<T>,
) -> Result<(Vec<T>, Vec<T>)> {
    let hd = check_lstm(&p.w, &p.u, &p.b, x.len())?;
    if h_prev.len() != hd || c_prev.len() != hd {
        return Err(shape_err("lstm_cell", "state size does not match hidden size"));
    }
    let mut pre = p.b.data().to_vec();
    let i_dim = x.len();
    T::gemm(4 * hd, i_dim, 1, T::one(), p.w.data(), (i_dim, 1), x, (1, 1), T::one(), &mut pre, (1, 1));
    T::gemm(4 * hd, hd, 1, T::one(), p.u.data(), (hd, 1), h_prev, (1, 1), T::one(), &mut pre, (1, 1));
    let (mut c, mut h) = (vec![T::zero(); hd], vec![T::zero(); hd]);
    cell_pointwise(&mut pre, c_prev, &mut c, &mut h);
    Ok((h, c))
}

/// Record one LSTM step on vectors `x [I]`, `h_prev [H]`, `c_prev [H]`.
/// The output is `[2, H]`: row 0 holds `h`, row 1 holds `c`.
pub fn lstm_cell_tape<T: Real>(
    tape: &mut GradTape<T>,
    x: Var,
    h_prev: Var,
    c_prev: Var,
    p: LstmVars,
) -> Result<Var> {
    let i_dim = tape.value(x).len();
    let hd = check_lstm(tape.value(p.w), tape.value(p.u), tape.value(p.b), i_dim)?;
    if tape.value(h_prev).len() != hd || tape.value(c_prev).len() != hd {
        return Err(shape_err("lstm_cell", "state size does not match hidden size"));
    }
    let mut act = tape.value(p.b).data().to_vec();
    T::gemm(4 * hd, i_dim, 1, T::one(), tape.value(p.w).data(), (i_dim, 1), tape.value(x).data(), (1, 1), T::one(), &mut act, (1, 1));
    T::gemm(4 * hd, hd, 1, T::one(), tape.value(p.u).data(), (hd, 1), tape.value(h_prev).data(), (1, 1), T::one(), &mut act, (1, 1));
    let mut out = vec![T::zero(); 2 * hd];
    let (h, c) = out.split_at_mut(hd);
    cell_pointwise(&mut act, tape.value(c_prev).data(), c, h);
    let out = Tensor::from_data(&[2, hd], out)?;
    Ok(tape.record(out, &[x, h_prev, c_prev, p.w, p.u, p.b], move |ctx, g, grads| {
        let c = &ctx.output().data()[hd..];
        let cp = ctx.value(c_prev).data();
        let mut dpre = vec![T::zero(); 4 * hd];
        let mut dcp = vec![T::zero(); hd];
        cell_pointwise_backward(&act, cp, c, &g[..hd], &g[hd..], &mut dpre, &mut dcp);
        grads.add(c_prev, &dcp);
        grads.add(p.b, &dpre);
        let xv = ctx.value(x).data();
        let hv = ctx.value(h_prev).data();
        if let Some(dw) = grads.slot(p.w) {
            T::gemm(4 * hd, 1, i_dim, T::one(), &dpre, (1, 1), xv, (1, 1), T::one(), dw, (i_dim, 1));
        }
        if let Some(du) = grads.slot(p.u) {
            T::gemm(4 * hd, 1, hd, T::one(), &dpre, (1, 1), hv, (1, 1), T::one(), du, (hd, 1));
        }
        let wv = ctx.value(p.w).data();
        let uv = ctx.value(p.u).data();
        if let Some(dx) = grads.slot(x) {
            T::gemm(1, 4 * hd, i_dim, T::one(), &dpre, (4 * hd, 1), wv, (i_dim, 1), T::one(), dx, (i_dim, 1));
        }
        if let Some(dh) = grads.slot(h_prev) {
            T::gemm(1, 4 * hd, hd, T::one(), &dpre, (4 * hd, 1), uv, (hd, 1), T::one(), dh, (hd, 1));
        }
    }))
}

/// Activations cached by one direction of a recurrent pass over a batch.
struct DirectionCache<T> {
    /// `[T, N, 4H]` gate activations
    act: Vec<T>,
    /// `[T, N, H]` cell states
    c: Vec<T>,
    /// `[T, N, H]` hidden states
    h: Vec<T>,
}

/// Run one direction over `x [N, T, D]`, writing hidden states into
/// `out [N, T, 2H]` at column offset `col`.
#[allow(clippy::too_many_arguments)]
fn direction_forward<T: Real>(
    x: &[T],
    (n, steps, d): (usize, usize, usize),
    w: &[T],
    u: &[T],
    b: &[T],
    hd: usize,
    reverse: bool,
    out: &mut [T],
    col: usize,
) -> DirectionCache<T> {
    let g4 = 4 * hd;
    // Input projections for all (n, t) at once: [N*T, 4H].
    let mut xproj = vec![T::zero(); n * steps * g4];
    for row in xproj.chunks_mut(g4) {
        row.copy_from_slice(b);
    }
    T::gemm(n * steps, d, g4, T::one(), x, (d, 1), w, (1, d), T::one(), &mut xproj, (g4, 1));
    let mut cache = DirectionCache {
        act: vec![T::zero(); steps * n * g4],
        c: vec![T::zero(); steps * n * hd],
        h: vec![T::zero(); steps * n * hd],
    };
    let zeros = vec![T::zero(); n * hd];
    let mut prev_t: Option<usize> = None;
    for s in 0..steps {
        let t = if reverse { steps - 1 - s } else { s };
        let act = &mut cache.act[t * n * g4..(t + 1) * n * g4];
        for k in 0..n {
            act[k * g4..(k + 1) * g4].copy_from_slice(&xproj[(k * steps + t) * g4..][..g4]);
        }
        let h_prev = match prev_t {
            Some(p) => cache.h[p * n * hd..(p + 1) * n * hd].to_vec(),
            None => zeros.clone(),
        };
        let c_prev = match prev_t {
            Some(p) => cache.c[p * n * hd..(p + 1) * n * hd].to_vec(),
            None => zeros.clone(),
        };
        T::gemm(n, hd, g4, T::one(), &h_prev, (hd, 1), u, (1, hd), T::one(), act, (g4, 1));
        let (c_all, h_all) = (&mut cache.c, &mut cache.h);
        for k in 0..n {
            let c = &mut c_all[(t * n + k) * hd..][..hd];
            let h = &mut h_all[(t * n + k) * hd..][..hd];
            cell_pointwise(&mut act[k * g4..(k + 1) * g4], &c_prev[k * hd..(k + 1) * hd], c, h);
            out[(k * steps + t) * 2 * hd + col..][..hd].copy_from_slice(h);
        }
        prev_t = Some(t);
    }
    cache
}

/// Backpropagate one direction. `g` is the output gradient `[N, T, 2H]`.
/// Returns the pre-activation gradients `[N*T, 4H]` (row `n*T + t`) and adds
/// the recurrent weight gradient into `du`.
#[allow(clippy::too_many_arguments)]
fn direction_backward<T: Real>(
    cache: &DirectionCache<T>,
    g: &[T],
    (n, steps): (usize, usize),
    u: &[T],
    hd: usize,
    reverse: bool,
    col: usize,
    mut du: Option<&mut [T]>,
) -> Vec<T> {
    let g4 = 4 * hd;
    let mut dpre_all = vec![T::zero(); n * steps * g4];
    let mut dh_carry = vec![T::zero(); n * hd];
    let mut dc_carry = vec![T::zero(); n * hd];
    let zeros = vec![T::zero(); n * hd];
    let mut dpre = vec![T::zero(); n * g4];
    let mut dh = vec![T::zero(); hd];
    for s in (0..steps).rev() {
        let t = if reverse { steps - 1 - s } else { s };
        let prev_t = if s == 0 {
            None
        } else if reverse {
            Some(t + 1)
        } else {
            Some(t - 1)
        };
        let c_prev = match prev_t {
            Some(p) => &cache.c[p * n * hd..(p + 1) * n * hd],
            None => &zeros[..],
        };
        for k in 0..n {
            for j in 0..hd {
                dh[j] = g[(k * steps + t) * 2 * hd + col + j] + dh_carry[k * hd + j];
            }
            let mut dcp = vec![T::zero(); hd];
            cell_pointwise_backward(
                &cache.act[(t * n + k) * g4..][..g4],
                &c_prev[k * hd..(k + 1) * hd],
                &cache.c[(t * n + k) * hd..][..hd],
                &dh,
                &dc_carry[k * hd..(k + 1) * hd],
                &mut dpre[k * g4..(k + 1) * g4],
                &mut dcp,
            );
            dc_carry[k * hd..(k + 1) * hd].copy_from_slice(&dcp);
            dpre_all[(k * steps + t) * g4..][..g4].copy_from_slice(&dpre[k * g4..(k + 1) * g4]);
        }
        if let Some(p) = prev_t {
            let h_prev = &cache.h[p * n * hd..(p + 1) * n * hd];
            if let Some(du) = du.as_deref_mut() {
                // dU += dpreᵀ h_prev
                T::gemm(g4, n, hd, T::one(), &dpre, (1, g4), h_prev, (hd, 1), T::one(), du, (hd, 1));
            }
            // dh_prev = dpre U
            T::gemm(n, g4, hd, T::one(), &dpre, (g4, 1), u, (hd, 1), T::zero(), &mut dh_carry, (hd, 1));
        }
    }
    dpre_all
}

/// Record a bidirectional LSTM layer over `seq [N, T, D]`. The output is
/// `[N, T, 2H]` with forward-direction features first. Initial states are zero.
pub fn bilstm_tape<T: Real>(
    tape: &mut GradTape<T>,
    seq: Var,
    fwd: LstmVars,
    bwd: LstmVars,
) -> Result<Var> {
    let (n, steps, d) = tape.value(seq).dims3()?;
    if steps == 0 {
        return Err(shape_err("bilstm", "empty sequence"));
    }
    let hd = check_lstm(tape.value(fwd.w), tape.value(fwd.u), tape.value(fwd.b), d)?;
    let hb = check_lstm(tape.value(bwd.w), tape.value(bwd.u), tape.value(bwd.b), d)?;
    if hb != hd {
        return Err(shape_err("bilstm", format!("hidden sizes {hd} and {hb} differ")));
    }
    let mut out = vec![T::zero(); n * steps * 2 * hd];
    let x = tape.value(seq).data();
    let caches: Vec<DirectionCache<T>> = [(fwd, false, 0), (bwd, true, hd)]
        .iter()
        .map(|&(p, rev, col)| {
            direction_forward(
                x,
                (n, steps, d),
                tape.value(p.w).data(),
                tape.value(p.u).data(),
                tape.value(p.b).data(),
                hd,
                rev,
                &mut out,
                col,
            )
        })
        .collect();
    let out = Tensor::from_data(&[n, steps, 2 * hd], out)?;
    let inputs = [seq, fwd.w, fwd.u, fwd.b, bwd.w, bwd.u, bwd.b];
    Ok(tape.record(out, &inputs, move |ctx, g, grads| {
        let xv = ctx.value(seq).data();
        let g4 = 4 * hd;
        for (cache, (p, rev, col)) in caches.iter().zip([(fwd, false, 0), (bwd, true, hd)]) {
            let uv = ctx.value(p.u).data();
            let dpre = direction_backward(cache, g, (n, steps), uv, hd, rev, col, grads.slot(p.u));
            if let Some(db) = grads.slot(p.b) {
                for row in dpre.chunks(g4) {
                    db.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
                }
            }
            if let Some(dw) = grads.slot(p.w) {
                // dW += dpreᵀ X
                T::gemm(g4, n * steps, d, T::one(), &dpre, (1, g4), xv, (d, 1), T::one(), dw, (d, 1));
            }
            let wv = ctx.value(p.w).data();
            if let Some(dx) = grads.slot(seq) {
                // dX += dpre W
                T::gemm(n * steps, g4, d, T::one(), &dpre, (g4, 1), wv, (d, 1), T::one(), dx, (d, 1));
            }
        }
    }))
}

/// Bidirectional LSTM over one sequence, without recording gradients.
pub fn bilstm_layer<T: Real>(
    seq: &FrameSequence<T>,
    fwd: &LstmParams<T>,
    bwd: &LstmParams<T>,
) -> Result<FrameSequence<T>> {
    let mut tape = GradTape::new();
    let (t, d) = (seq.len(), seq.dim());
    let x = tape.constant(seq.as_tensor().clone().reshape(&[1, t, d])?);
    let f = fwd.bind(&mut tape);
    let b = bwd.bind(&mut tape);
    let y = bilstm_tape(&mut tape, x, f, b)?;
    let out = tape.value(y).clone();
    let h2 = out.shape()[2];
    FrameSequence::new(out.reshape(&[t, h2])?)
}

/// Split `[N, C, 1, W]` features into per-item frame sequences: column `w`
/// becomes frame `w` with the `C` channel values as its features.
pub fn map_to_sequence<T: Real>(x: &Tensor<T>) -> Result<Vec<FrameSequence<T>>> {
    let (n, c, h, w) = x.dims4()?;
    if h != 1 {
        return Err(shape_err("map_to_sequence", format!("height must be 1, got {h}")));
    }
    (0..n)
        .map(|b| {
            let mut frames = vec![T::zero(); w * c];
            for ch in 0..c {
                for t in 0..w {
                    frames[t * c + ch] = x.data()[(b * c + ch) * w + t];
                }
            }
            FrameSequence::new(Tensor::from_data(&[w, c], frames)?)
        })
        .collect()
}

/// Record the `[N, C, 1, W] -> [N, W, C]` transpose.
pub fn map_to_sequence_tape<T: Real>(tape: &mut GradTape<T>, x: Var) -> Result<Var> {
    let (n, c, h, w) = tape.value(x).dims4()?;
    if h != 1 {
        return Err(shape_err("map_to_sequence", format!("height must be 1, got {h}")));
    }
    let xd = tape.value(x).data();
    let mut out = vec![T::zero(); n * w * c];
    for b in 0..n {
        for ch in 0..c {
            for t in 0..w {
                out[(b * w + t) * c + ch] = xd[(b * c + ch) * w + t];
            }
        }
    }
    let out = Tensor::from_data(&[n, w, c], out)?;
    Ok(tape.record(out, &[x], move |_, g, grads| {
        if let Some(dx) = grads.slot(x) {
            for b in 0..n {
                for ch in 0..c {
                    for t in 0..w {
                        dx[(b * c + ch) * w + t] += g[(b * w + t) * c + ch];
                    }
                }
            }
        }
    }))
}

/// Record an affine map over the last axis: `[.., D] -> [.., K]` with
/// weight `[K, D]` and bias `[K]`.
pub fn linear_tape<T: Real>(tape: &mut GradTape<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let xs = tape.value(x).shape().to_vec();
    let (k, d) = tape.value(w).dims2()?;
    if xs.last() != Some(&d) || tape.value(b).shape() != [k] {
        return Err(shape_err(
            "linear",
            format!("input {xs:?}, weight [{k},{d}], bias {:?}", tape.value(b).shape()),
        ));
    }
    let rows = tape.value(x).len() / d.max(1);
    let mut out = vec![T::zero(); rows * k];
    for row in out.chunks_mut(k) {
        row.copy_from_slice(tape.value(b).data());
    }
    T::gemm(rows, d, k, T::one(), tape.value(x).data(), (d, 1), tape.value(w).data(), (1, d), T::one(), &mut out, (k, 1));
    let mut shape = xs.clone();
    *shape.last_mut().unwrap() = k;
    let out = Tensor::from_data(&shape, out)?;
    Ok(tape.record(out, &[x, w, b], move |ctx, g, grads| {
        if let Some(db) = grads.slot(b) {
            for row in g.chunks(k) {
                db.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
            }
        }
        if let Some(dw) = grads.slot(w) {
            let xv = ctx.value(x).data();
            T::gemm(k, rows, d, T::one(), g, (1, k), xv, (d, 1), T::one(), dw, (d, 1));
        }
        if grads.wants(x) {
            let wv = ctx.value(w).data();
            let dx = grads.slot(x).unwrap();
            T::gemm(rows, k, d, T::one(), g, (k, 1), wv, (d, 1), T::one(), dx, (d, 1));
        }
    }))
}

/// Per-frame class scores `[T, K+1]` (blank included); no softmax.
pub fn project_logits<T: Real>(
    seq: &FrameSequence<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
) -> Result<Tensor<T>> {
    let mut tape = GradTape::new();
    let x = tape.constant(seq.as_tensor().clone());
    let wv = tape.constant(w.clone());
    let bv = tape.constant(b.clone());
    let y = linear_tape(&mut tape, x, wv, bv)?;
    Ok(tape.value(y).clone())
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

    #[test]
    fn columns_become_frames() {
        let x = Tensor::<f64>::from_f64(&[1, 2, 1, 3], &[1., 2., 3., 4., 5., 6.]).unwrap();
        let seqs = map_to_sequence(&x).unwrap();
        assert_eq!(seqs[0].as_tensor().data(), &[1., 4., 2., 5., 3., 6.]);
        let single = map_to_sequence(&Tensor::<f64>::zeros(&[1, 4, 1, 1])).unwrap();
        assert_eq!(single[0].len(), 1);
        assert!(map_to_sequence(&Tensor::<f64>::zeros(&[1, 4, 2, 3])).is_err());
    }

    #[test]
    fn frames_reassemble_into_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&[3, 4, 1, 5], &mut rng);
        let seqs = map_to_sequence(&x).unwrap();
        let mut back = Tensor::zeros(&[3, 4, 1, 5]);
        for (b, s) in seqs.iter().enumerate() {
            for t in 0..s.len() {
                for (c, &v) in s.frame(t).iter().enumerate() {
                    back.set(&[b, c, 0, t], v);
                }
            }
        }
        assert_eq!(back, x);
    }

    #[test]
    fn zero_params_cell_closed_forms() {
        let p = LstmParams::<f64>::zeros(3, 2);
        let (h, c) = lstm_cell(&[0.5, -1.0, 2.0], &[0.3, 0.1], &[0.0, 0.0], &p).unwrap();
        assert_eq!((h, c), (vec![0.0, 0.0], vec![0.0, 0.0]));
        let v = [0.8, -2.0];
        let (h, c) = lstm_cell(&[1.0, 1.0, 1.0], &[0.0, 0.0], &v, &p).unwrap();
        for k in 0..2 {
            assert!((c[k] - 0.5 * v[k]).abs() < 1e-15);
            assert!((h[k] - 0.5 * (0.5 * v[k]).tanh()).abs() < 1e-15);
        }
    }

    /// The batched layer against a step-by-step loop over `lstm_cell`.
    #[test]
    fn bilstm_matches_cell_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (t, d, hd) = (5, 3, 4);
        let fwd = LstmParams::<f64>::init(d, hd, &mut rng);
        let bwd = LstmParams::<f64>::init(d, hd, &mut rng);
        let mut fb = fwd.clone();
        fb.b = random(&[4 * hd], &mut rng);
        let seq = FrameSequence::new(random(&[t, d], &mut rng)).unwrap();
        let out = bilstm_layer(&seq, &fb, &bwd).unwrap();
        assert_eq!(out.dim(), 2 * hd);
        let (mut h, mut c) = (vec![0.0; hd], vec![0.0; hd]);
        for s in 0..t {
            (h, c) = lstm_cell(seq.frame(s), &h, &c, &fb).unwrap();
            for k in 0..hd {
                assert!((out.frame(s)[k] - h[k]).abs() < 1e-12);
            }
        }
        let (mut h, mut c) = (vec![0.0; hd], vec![0.0; hd]);
        for s in (0..t).rev() {
            (h, c) = lstm_cell(seq.frame(s), &h, &c, &bwd).unwrap();
            for k in 0..hd {
                assert!((out.frame(s)[hd + k] - h[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_frame_sees_both_directions_independently() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let fwd = LstmParams::<f64>::init(2, 3, &mut rng);
        let bwd = LstmParams::<f64>::init(2, 3, &mut rng);
        let seq = FrameSequence::new(random(&[1, 2], &mut rng)).unwrap();
        let out = bilstm_layer(&seq, &fwd, &bwd).unwrap();
        let (hf, _) = lstm_cell(seq.frame(0), &[0.0; 3], &[0.0; 3], &fwd).unwrap();
        let (hb, _) = lstm_cell(seq.frame(0), &[0.0; 3], &[0.0; 3], &bwd).unwrap();
        assert_eq!(out.frame(0), [hf, hb].concat().as_slice());
    }

    #[test]
    fn reversal_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (t, d, hd) = (6, 3, 2);
        let fwd = LstmParams::<f64>::init(d, hd, &mut rng);
        let bwd = LstmParams::<f64>::init(d, hd, &mut rng);
        let x = random(&[t, d], &mut rng);
        let mut rev = Tensor::zeros(&[t, d]);
        for s in 0..t {
            for k in 0..d {
                rev.set(&[s, k], x.get(&[t - 1 - s, k]));
            }
        }
        let a = bilstm_layer(&FrameSequence::new(x).unwrap(), &fwd, &bwd).unwrap();
        let b = bilstm_layer(&FrameSequence::new(rev).unwrap(), &bwd, &fwd).unwrap();
        for s in 0..t {
            let fa = a.frame(t - 1 - s);
            let fb = b.frame(s);
            for k in 0..hd {
                assert!((fa[k] - fb[hd + k]).abs() < 1e-14);
                assert!((fa[hd + k] - fb[k]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn forward_direction_is_causal() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let (t, d, hd) = (7, 2, 3);
        let fwd = LstmParams::<f64>::init(d, hd, &mut rng);
        let bwd = LstmParams::<f64>::init(d, hd, &mut rng);
        let x = random(&[t, d], &mut rng);
        let full = bilstm_layer(&FrameSequence::new(x.clone()).unwrap(), &fwd, &bwd).unwrap();
        for cut in 0..t {
            // zero frames after `cut`: forward outputs up to `cut` unchanged
            let mut xz = x.clone();
            for s in cut + 1..t {
                for k in 0..d {
                    xz.set(&[s, k], 0.0);
                }
            }
            let z = bilstm_layer(&FrameSequence::new(xz).unwrap(), &fwd, &bwd).unwrap();
            for s in 0..=cut {
                assert_eq!(&full.frame(s)[..hd], &z.frame(s)[..hd]);
            }
            // and the backward direction from `cut` on depends only on frames >= cut
            let mut xb = x.clone();
            for s in 0..cut {
                for k in 0..d {
                    xb.set(&[s, k], 0.0);
                }
            }
            let zb = bilstm_layer(&FrameSequence::new(xb).unwrap(), &fwd, &bwd).unwrap();
            for s in cut..t {
                assert_eq!(&full.frame(s)[hd..], &zb.frame(s)[hd..]);
            }
        }
    }

    #[test]
    fn projection_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let seq = FrameSequence::new(random(&[4, 3], &mut rng)).unwrap();
        let b = Tensor::from_f64(&[3], &[0.5, -1.0, 2.0]).unwrap();
        let out = project_logits(&seq, &Tensor::zeros(&[3, 3]), &b).unwrap();
        for t in 0..4 {
            assert_eq!(&out.data()[t * 3..t * 3 + 3], b.data());
        }
        let mut eye = Tensor::zeros(&[3, 3]);
        for i in 0..3 {
            eye.set(&[i, i], 1.0);
        }
        let out = project_logits(&seq, &eye, &Tensor::zeros(&[3])).unwrap();
        assert_eq!(&out, seq.as_tensor());
        assert!(project_logits(&seq, &Tensor::zeros(&[3, 2]), &b).is_err());
    }
}
