use rand::Rng;

use crate::error::{shape_err, Result};
use crate::nn::conv::{conv2d_tape, ConvGeom, ConvKernel};
use crate::nn::norm::{batch_norm_tape, BatchNorm, Mode, RunningStats};
use crate::real::Real;
use crate::tape::{GradTape, Var};
use crate::tensor::Tensor;

/// Two 3x3 convolutions with batch norm and an identity skip connection:
/// `relu(bn2(conv2(relu(bn1(conv1(x))))) + x)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualBlock<T: Real> {
    pub conv1: ConvKernel<T>,
    pub bn1: BatchNorm<T>,
    pub conv2: ConvKernel<T>,
    pub bn2: BatchNorm<T>,
}

/// Tape handles of a residual block's parameters.
#[derive(Clone, Copy, Debug)]
pub struct ResidualVars {
    pub conv1: (Var, Var),
    pub bn1: (Var, Var),
    pub conv2: (Var, Var),
    pub bn2: (Var, Var),
}

impl<T: Real> ResidualBlock<T> {
    pub fn new<R: Rng>(channels: usize, rng: &mut R) -> Self {
        ResidualBlock {
            conv1: ConvKernel::he_init(channels, channels, ConvGeom::same3(), rng),
            bn1: BatchNorm::new(channels),
            conv2: ConvKernel::he_init(channels, channels, ConvGeom::same3(), rng),
            bn2: BatchNorm::new(channels),
        }
    }

    pub fn channels(&self) -> usize {
        self.conv1.c_in()
    }

    /// Put every parameter on `tape` as a leaf.
    pub fn bind(&self, tape: &mut GradTape<T>) -> ResidualVars {
        let mut pair = |a: &Tensor<T>, b: &Tensor<T>| (tape.leaf(a.clone()), tape.leaf(b.clone()));
        ResidualVars {
            conv1: pair(&self.conv1.weight, &self.conv1.bias),
            bn1: pair(&self.bn1.gamma, &self.bn1.beta),
            conv2: pair(&self.conv2.weight, &self.conv2.bias),
            bn2: pair(&self.bn2.gamma, &self.bn2.beta),
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let mut tape = GradTape::new();
        let vars = self.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let y = residual_block_tape(
            &mut tape,
            xv,
            &vars,
            (&mut self.bn1.stats, &mut self.bn2.stats),
            mode,
        )?;
        Ok(tape.value(y).clone())
    }
}

pub fn residual_block_tape<T: Real>(
    tape: &mut GradTape<T>,
    x: Var,
    vars: &ResidualVars,
    stats: (&mut RunningStats<T>, &mut RunningStats<T>),
    mode: Mode,
) -> Result<Var> {
    let (_, c, _, _) = tape.value(x).dims4()?;
    let ws = tape.value(vars.conv1.0).shape().to_vec();
    if ws.len() != 4 || ws[0] != c || ws[1] != c {
        return Err(shape_err(
            "residual_block",
            format!("input has {c} channels, block weight {ws:?}"),
        ));
    }
    let geom = ConvGeom::same3();
    let h = conv2d_tape(tape, x, vars.conv1.0, vars.conv1.1, geom)?;
    let h = batch_norm_tape(tape, h, vars.bn1.0, vars.bn1.1, stats.0, mode)?;
    let h = tape.relu(h);
    let h = conv2d_tape(tape, h, vars.conv2.0, vars.conv2.1, geom)?;
    let h = batch_norm_tape(tape, h, vars.bn2.0, vars.bn2.1, stats.1, mode)?;
    if tape.value(h).shape() != tape.value(x).shape() {
        return Err(shape_err(
            "residual_block",
            format!("{:?} vs skip {:?}", tape.value(h).shape(), tape.value(x).shape()),
        ));
    }
    let s = tape.add(h, x)?;
    Ok(tape.relu(s))
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
    fn zero_convolutions_leave_the_skip_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut blk = ResidualBlock::<f64>::new(3, &mut rng);
        blk.conv1.weight = Tensor::zeros(&[3, 3, 3, 3]);
        blk.conv2.weight = Tensor::zeros(&[3, 3, 3, 3]);
        let x = random(&[2, 3, 4, 5], &mut rng);
        // Eval mode with default stats is a pass-through normalization.
        let y = blk.forward(&x, Mode::Eval).unwrap();
        let relu_x = x.map(|v| v.max(0.0));
        assert!(y.max_abs_diff(&relu_x) < 1e-12);
    }

    #[test]
    fn shape_is_preserved() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut blk = ResidualBlock::<f64>::new(4, &mut rng);
        for shape in [[1, 4, 3, 3], [2, 4, 7, 5], [3, 4, 1, 9]] {
            let x = random(&shape, &mut rng);
            assert_eq!(blk.forward(&x, Mode::Train).unwrap().shape(), &shape);
        }
        assert!(blk.forward(&random(&[1, 3, 4, 4], &mut rng), Mode::Train).is_err());
    }
}
