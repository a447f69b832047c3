//! Per-channel batch normalization over `[N, C, H, W]`.

use crate::error::{shape_err, Error, Result};
use crate::real::Real;
use crate::tape::{GradTape, Var};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Normalize with batch statistics and update the running estimates.
    Train,
    /// Normalize with the running estimates.
    Eval,
}

/// Running mean/variance estimates of one normalization layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T: Real> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Real> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

/// Scale, shift and running statistics of one normalization layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm<T: Real> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub stats: RunningStats<T>,
}

impl<T: Real> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            gamma: Tensor::ones(&[channels]),
            beta: Tensor::zeros(&[channels]),
            stats: RunningStats::new(channels),
        }
    }

    /// Forward pass without recording gradients.
    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let mut tape = GradTape::new();
        let xv = tape.constant(x.clone());
        let g = tape.constant(self.gamma.clone());
        let b = tape.constant(self.beta.clone());
        let y = batch_norm_tape(&mut tape, xv, g, b, &mut self.stats, mode)?;
        Ok(tape.value(y).clone())
    }
}

/// Record batch normalization of `x` with per-channel `gamma`/`beta`.
/// Training mode also folds the batch statistics into `stats`.
pub fn batch_norm_tape<T: Real>(
    tape: &mut GradTape<T>,
    x: Var,
    gamma: Var,
    beta: Var,
    stats: &mut RunningStats<T>,
    mode: Mode,
) -> Result<Var> {
    let (n, c, h, w) = tape.value(x).dims4()?;
    if tape.value(gamma).shape() != [c] || tape.value(beta).shape() != [c] || stats.channels() != c
    {
        return Err(shape_err(
            "batch_norm",
            format!(
                "{c} channels, gamma {:?}, beta {:?}, stats {}",
                tape.value(gamma).shape(),
                tape.value(beta).shape(),
                stats.channels()
            ),
        ));
    }
    let m = n * h * w;
    let plane = h * w;
    let eps = T::c(BN_EPS);
    let xd = tape.value(x).data();
    let (mean, var) = match mode {
        Mode::Train => {
            if m == 0 {
                return Err(Error::Config("batch_norm: empty batch in training mode".into()));
            }
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            let mt = T::c(m as f64);
            for ch in 0..c {
                let mut s = T::zero();
                for b in 0..n {
                    s += xd[(b * c + ch) * plane..][..plane].iter().copied().sum();
                }
                let mu = s / mt;
                let mut v = T::zero();
                for b in 0..n {
                    for &val in &xd[(b * c + ch) * plane..][..plane] {
                        v += (val - mu) * (val - mu);
                    }
                }
                mean[ch] = mu;
                var[ch] = v / mt;
            }
            let mom = T::c(BN_MOMENTUM);
            let unbias = if m > 1 {
                T::c(m as f64 / (m - 1) as f64)
            } else {
                T::one()
            };
            for ch in 0..c {
                stats.mean[ch] = (T::one() - mom) * stats.mean[ch] + mom * mean[ch];
                stats.var[ch] = (T::one() - mom) * stats.var[ch] + mom * var[ch] * unbias;
            }
            (mean, var)
        }
        Mode::Eval => (stats.mean.clone(), stats.var.clone()),
    };
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let gd = tape.value(gamma).data();
    let bd = tape.value(beta).data();
    let mut xhat = vec![T::zero(); xd.len()];
    let mut out = vec![T::zero(); xd.len()];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * plane;
            for i in base..base + plane {
                xhat[i] = (xd[i] - mean[ch]) * inv_std[ch];
                out[i] = gd[ch] * xhat[i] + bd[ch];
            }
        }
    }
    let out = Tensor::from_data(&[n, c, h, w], out)?;
    Ok(tape.record(out, &[x, gamma, beta], move |ctx, g, grads| {
        let gd = ctx.value(gamma).data();
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * plane;
                for i in base..base + plane {
                    dgamma[ch] += g[i] * xhat[i];
                    dbeta[ch] += g[i];
                }
            }
        }
        if let Some(dx) = grads.slot(x) {
            match mode {
                Mode::Train => {
                    // dx = γ/σ · (g − mean(g) − x̂ · mean(g x̂))
                    let mt = T::c(m as f64);
                    for ch in 0..c {
                        let k = gd[ch] * inv_std[ch];
                        let mg = dbeta[ch] / mt;
                        let mgx = dgamma[ch] / mt;
                        for b in 0..n {
                            let base = (b * c + ch) * plane;
                            for i in base..base + plane {
                                dx[i] += k * (g[i] - mg - xhat[i] * mgx);
                            }
                        }
                    }
                }
                Mode::Eval => {
                    for b in 0..n {
                        for ch in 0..c {
                            let k = gd[ch] * inv_std[ch];
                            let base = (b * c + ch) * plane;
                            for i in base..base + plane {
                                dx[i] += k * g[i];
                            }
                        }
                    }
                }
            }
        }
        grads.add(gamma, &dgamma);
        grads.add(beta, &dbeta);
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalized_batch_passes_through() {
        // per channel: values ±1 → mean 0, biased variance 1
        let data = vec![1.0, -1.0, 1.0, -1.0, -1.0, 1.0, -1.0, 1.0];
        let x = Tensor::<f64>::from_data(&[2, 1, 2, 2], data).unwrap();
        let mut bn = BatchNorm::new(1);
        let y = bn.forward(&x, Mode::Train).unwrap();
        assert!(y.max_abs_diff(&x) < 1e-5);
    }

    #[test]
    fn zero_gamma_outputs_beta() {
        let x = Tensor::<f64>::from_f64(&[2, 2, 1, 2], &[0.3, -2.0, 5.0, 1.0, 0.1, 0.2, -0.3, 4.0])
            .unwrap();
        let mut bn = BatchNorm::new(2);
        bn.gamma = Tensor::zeros(&[2]);
        bn.beta = Tensor::from_f64(&[2], &[0.25, -1.5]).unwrap();
        for mode in [Mode::Train, Mode::Eval] {
            let y = bn.forward(&x, mode).unwrap();
            for b in 0..2 {
                for i in 0..2 {
                    assert_eq!(y.get(&[b, 0, 0, i]), 0.25);
                    assert_eq!(y.get(&[b, 1, 0, i]), -1.5);
                }
            }
        }
    }

    #[test]
    fn running_stats_follow_momentum() {
        let x = Tensor::<f64>::from_f64(&[1, 1, 1, 2], &[1.0, 3.0]).unwrap();
        let mut bn = BatchNorm::new(1);
        bn.forward(&x, Mode::Train).unwrap();
        assert!((bn.stats.mean[0] - 0.2).abs() < 1e-12);
        // unbiased batch variance is 2
        assert!((bn.stats.var[0] - (0.9 + 0.2)).abs() < 1e-12);
        let before = bn.stats.clone();
        bn.forward(&x, Mode::Eval).unwrap();
        assert_eq!(bn.stats, before);
    }

    #[test]
    fn empty_training_batch_is_an_error() {
        let mut bn = BatchNorm::<f64>::new(2);
        assert!(bn.forward(&Tensor::zeros(&[0, 2, 3, 3]), Mode::Train).is_err());
        assert!(bn.forward(&Tensor::zeros(&[1, 3, 3, 3]), Mode::Train).is_err());
    }
}
