//! The recognizer: convolutional stages (optionally deformable, optionally
//! followed by residual blocks), height reduction to one row, stacked
//! BiLSTMs and a per-frame class projection.

mod checkpoint;
mod config;

pub use checkpoint::{CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{parse_bool, parse_deformable_set, parse_num, parse_size, ModelConfig, DEFORMABLE_DOMAIN};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::ctc::{greedy_decode, Charset};
use crate::error::{shape_err, Error, Result};
use crate::nn::{
    adaptive_max_pool2d_tape, batch_norm_tape, conv2d_tape, deform_conv2d_tape, max_pool2d_tape,
    residual_block_tape, ConvGeom, ConvKernel, Mode, ResidualBlock, ResidualVars, RunningStats,
    TraceLayer,
};
use crate::real::Real;
use crate::seq::{bilstm_tape, linear_tape, map_to_sequence_tape, LstmParams, LstmVars};
use crate::tape::{GradTape, Var};
use crate::tensor::Tensor;

/// A named trainable tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T: Real> {
    pub name: String,
    pub value: Tensor<T>,
}

/// Batch-norm running statistics, stored under `name.running_mean` and
/// `name.running_var`.
#[derive(Clone, Debug, PartialEq)]
pub struct Buffer<T: Real> {
    pub name: String,
    pub stats: RunningStats<T>,
}

type Pair = (usize, usize);

#[derive(Clone, Debug)]
struct ResidualIdx {
    conv1: Pair,
    bn1: Pair,
    conv2: Pair,
    bn2: Pair,
    stats: Pair,
}

#[derive(Clone, Debug)]
struct Stage {
    conv: Pair,
    offset: Option<Pair>,
    bn: Pair,
    stats: usize,
    residual: Option<ResidualIdx>,
    pool: (usize, usize),
    out_extent: (usize, usize),
}

#[derive(Clone, Copy, Debug)]
struct LstmIdx {
    w: usize,
    u: usize,
    b: usize,
}

/// Height reduction applied after the last convolutional stage.
#[derive(Clone, Copy, Debug, PartialEq)]
enum Collapse {
    None,
    Adaptive,
    Pool2x1,
}

/// Outputs of one recorded forward pass.
pub struct Forward {
    /// `[N, T, K+1]`
    pub logits: Var,
    /// Offset fields of deformable layers, keyed by 1-based conv index.
    pub offsets: Vec<(usize, Var)>,
}

#[derive(Clone, Debug)]
pub struct Model<T: Real> {
    config: ModelConfig,
    charset: Charset,
    params: Vec<Param<T>>,
    buffers: Vec<Buffer<T>>,
    stages: Vec<Stage>,
    collapse: Collapse,
    lstm: Vec<(LstmIdx, LstmIdx)>,
    head: Pair,
    frames: usize,
    step: u64,
}

struct Builder<T: Real> {
    params: Vec<Param<T>>,
    buffers: Vec<Buffer<T>>,
}

impl<T: Real> Builder<T> {
    fn param(&mut self, name: String, value: Tensor<T>) -> usize {
        self.params.push(Param { name, value });
        self.params.len() - 1
    }

    fn conv(&mut self, prefix: &str, k: ConvKernel<T>) -> Pair {
        (
            self.param(format!("{prefix}.weight"), k.weight),
            self.param(format!("{prefix}.bias"), k.bias),
        )
    }

    fn bn(&mut self, prefix: &str, channels: usize) -> (Pair, usize) {
        let g = self.param(format!("{prefix}.gamma"), Tensor::ones(&[channels]));
        let b = self.param(format!("{prefix}.beta"), Tensor::zeros(&[channels]));
        self.buffers.push(Buffer {
            name: prefix.to_string(),
            stats: RunningStats::new(channels),
        });
        ((g, b), self.buffers.len() - 1)
    }

    fn lstm(&mut self, prefix: &str, p: LstmParams<T>) -> LstmIdx {
        LstmIdx {
            w: self.param(format!("{prefix}.w"), p.w),
            u: self.param(format!("{prefix}.u"), p.u),
            b: self.param(format!("{prefix}.b"), p.b),
        }
    }
}

impl<T: Real> Model<T> {
    /// Build a freshly initialized model: He-normal convolution and
    /// projection weights, uniform LSTM weights with forget-gate bias 1,
    /// zero offset branches. Everything is drawn from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let charset = config.charset()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut bld = Builder {
            params: Vec::new(),
            buffers: Vec::new(),
        };
        let geom = ConvGeom::same3();
        let (mut h, mut w) = (config.input_size.1, config.input_size.0);
        let mut c_in = config.input_channels;
        let mut stages = Vec::new();
        for (i, (&c_out, &pool)) in config.conv_widths.iter().zip(&config.pools).enumerate() {
            let id = i + 1;
            let kernel = ConvKernel::he_init(c_out, c_in, geom, &mut rng);
            let conv = bld.conv(&format!("conv{id}"), kernel);
            let offset = config.deformable_set.contains(&id).then(|| {
                let branch = ConvKernel::zeros(2 * geom.taps(), c_in, geom);
                bld.conv(&format!("conv{id}.offset"), branch)
            });
            let (bn, stats) = bld.bn(&format!("bn{id}"), c_out);
            let residual = (config.use_residual && config.residual_after.contains(&id)).then(|| {
                let block = ResidualBlock::<T>::new(c_out, &mut rng);
                let conv1 = bld.conv(&format!("res{id}.conv1"), block.conv1);
                let (bn1, s1) = bld.bn(&format!("res{id}.bn1"), c_out);
                let conv2 = bld.conv(&format!("res{id}.conv2"), block.conv2);
                let (bn2, s2) = bld.bn(&format!("res{id}.bn2"), c_out);
                ResidualIdx {
                    conv1,
                    bn1,
                    conv2,
                    bn2,
                    stats: (s1, s2),
                }
            });
            if pool.0 > h || pool.1 > w {
                return Err(Error::Config(format!(
                    "pool {}x{} after conv{id} exceeds feature map {h}x{w}",
                    pool.0, pool.1
                )));
            }
            h /= pool.0;
            w /= pool.1;
            stages.push(Stage {
                conv,
                offset,
                bn,
                stats,
                residual,
                pool,
                out_extent: (h, w),
            });
            c_in = c_out;
        }
        let collapse = match (h, config.use_adaptive_pool) {
            (1, _) => Collapse::None,
            (_, true) => Collapse::Adaptive,
            (2, false) => Collapse::Pool2x1,
            (h, false) => {
                return Err(Error::Config(format!(
                    "feature height {h} cannot be reduced to 1 without adaptive pooling"
                )))
            }
        };
        let frames = w;
        let mut lstm = Vec::new();
        let mut d = c_in;
        for l in 0..config.lstm_layers {
            let mut pair = [LstmIdx { w: 0, u: 0, b: 0 }; 2];
            for (slot, dir) in pair.iter_mut().zip(["fwd", "bwd"]) {
                let mut p = LstmParams::<T>::init(d, config.hidden, &mut rng);
                let hd = config.hidden;
                p.b.data_mut()[hd..2 * hd].fill(T::one());
                *slot = bld.lstm(&format!("lstm{}.{dir}", l + 1), p);
            }
            lstm.push((pair[0], pair[1]));
            d = 2 * config.hidden;
        }
        let k = charset.classes();
        let normal = Normal::new(0.0, (2.0 / d as f64).sqrt()).expect("valid std");
        let head_w = Tensor::from_data(
            &[k, d],
            (0..k * d).map(|_| T::c(normal.sample(&mut rng))).collect(),
        )?;
        let head = (
            bld.param("head.weight".into(), head_w),
            bld.param("head.bias".into(), Tensor::zeros(&[k])),
        );
        Ok(Model {
            config,
            charset,
            params: bld.params,
            buffers: bld.buffers,
            stages,
            collapse,
            lstm,
            head,
            frames,
            step: 0,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn charset(&self) -> &Charset {
        &self.charset
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[Buffer<T>] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [Buffer<T>] {
        &mut self.buffers
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Number of output frames `T` for the configured input size.
    pub fn frames(&self) -> usize {
        self.frames
    }

    /// Optimizer steps taken so far (persisted in checkpoints).
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    /// Shape of a batch of `n` input images.
    pub fn input_shape(&self, n: usize) -> [usize; 4] {
        let (w, h) = self.config.input_size;
        [n, self.config.input_channels, h, w]
    }

    /// Put every parameter on `tape` as a gradient-carrying leaf, in
    /// [`Model::params`] order.
    pub fn bind(&self, tape: &mut GradTape<T>) -> Vec<Var> {
        self.params.iter().map(|p| tape.leaf(p.value.clone())).collect()
    }

    /// Put every parameter on `tape` as a constant (inference).
    pub fn bind_frozen(&self, tape: &mut GradTape<T>) -> Vec<Var> {
        self.params.iter().map(|p| tape.constant(p.value.clone())).collect()
    }

    /// Record the forward pass of `images [N, C, H, W]`. In training mode
    /// batch-norm running statistics are updated.
    pub fn forward_tape(
        &mut self,
        tape: &mut GradTape<T>,
        vars: &[Var],
        images: Var,
        mode: Mode,
    ) -> Result<Forward> {
        if vars.len() != self.params.len() {
            return Err(shape_err(
                "model",
                format!("{} vars for {} parameters", vars.len(), self.params.len()),
            ));
        }
        let expect = self.input_shape(tape.value(images).shape().first().copied().unwrap_or(0));
        if tape.value(images).shape() != expect || expect[0] == 0 {
            return Err(shape_err(
                "model",
                format!("images {:?}, expected {:?}", tape.value(images).shape(), expect),
            ));
        }
        let geom = ConvGeom::same3();
        let v = |(a, b): Pair| (vars[a], vars[b]);
        let mut x = images;
        let mut offsets = Vec::new();
        for (i, stage) in self.stages.iter().enumerate() {
            let (w, b) = v(stage.conv);
            x = match stage.offset {
                Some(ob) => {
                    let (ow, obias) = v(ob);
                    let off = conv2d_tape(tape, x, ow, obias, geom)?;
                    offsets.push((i + 1, off));
                    deform_conv2d_tape(tape, x, w, b, off, geom)?
                }
                None => conv2d_tape(tape, x, w, b, geom)?,
            };
            let (g, bt) = v(stage.bn);
            x = batch_norm_tape(tape, x, g, bt, &mut self.buffers[stage.stats].stats, mode)?;
            x = tape.relu(x);
            if let Some(r) = &stage.residual {
                let rv = ResidualVars {
                    conv1: v(r.conv1),
                    bn1: v(r.bn1),
                    conv2: v(r.conv2),
                    bn2: v(r.bn2),
                };
                let (s1, s2) = two_mut(&mut self.buffers, r.stats);
                x = residual_block_tape(tape, x, &rv, (&mut s1.stats, &mut s2.stats), mode)?;
            }
            if stage.pool != (1, 1) {
                x = max_pool2d_tape(tape, x, stage.pool, stage.pool)?;
            }
        }
        x = match self.collapse {
            Collapse::None => x,
            Collapse::Adaptive => adaptive_max_pool2d_tape(tape, x, (1, self.frames))?,
            Collapse::Pool2x1 => max_pool2d_tape(tape, x, (2, 1), (2, 1))?,
        };
        let mut s = map_to_sequence_tape(tape, x)?;
        for &(f, b) in &self.lstm {
            let lv = |p: LstmIdx| LstmVars {
                w: vars[p.w],
                u: vars[p.u],
                b: vars[p.b],
            };
            s = bilstm_tape(tape, s, lv(f), lv(b))?;
        }
        let (hw, hb) = v(self.head);
        let logits = linear_tape(tape, s, hw, hb)?;
        Ok(Forward { logits, offsets })
    }

    /// Per-frame logits `[N, T, K+1]` without recording gradients.
    pub fn logits(&mut self, images: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let mut tape = GradTape::new();
        let vars = self.bind_frozen(&mut tape);
        let x = tape.constant(images.clone());
        let out = self.forward_tape(&mut tape, &vars, x, mode)?;
        Ok(tape.value(out.logits).clone())
    }

    /// Greedy transcriptions of a batch, in evaluation mode.
    pub fn predict(&mut self, images: &Tensor<T>) -> Result<Vec<String>> {
        let logits = self.logits(images, Mode::Eval)?;
        (0..logits.shape()[0])
            .map(|i| Ok(self.charset.decode(&greedy_decode(&logits.index_axis0(i))?)))
            .collect()
    }

    /// Add the tape gradients of `vars` into the parameters' gradient buffers.
    pub fn accumulate_grads(&mut self, tape: &GradTape<T>, vars: &[Var]) {
        for (p, &v) in self.params.iter_mut().zip(vars) {
            if let Some(g) = tape.grad(v) {
                p.value.accumulate_grad(g);
            }
        }
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(|p| p.value.zero_grad());
    }

    /// Stage layout of the convolutional trunk for one image `[C, H, W]` or
    /// `[1, C, H, W]`, with the offsets the deformable layers realize on it.
    /// Residual blocks are not part of the traced stack.
    pub fn trace_stack(&mut self, image: &Tensor<T>) -> Result<Vec<TraceLayer>> {
        let shape = image.shape().to_vec();
        let image = match shape.len() {
            3 => image.clone().reshape(&[1, shape[0], shape[1], shape[2]])?,
            _ => image.clone(),
        };
        let mut tape = GradTape::new();
        let vars = self.bind_frozen(&mut tape);
        let x = tape.constant(image);
        let out = self.forward_tape(&mut tape, &vars, x, Mode::Eval)?;
        let geom = ConvGeom::same3();
        let (mut h, mut w) = (self.config.input_size.1, self.config.input_size.0);
        let mut stack = Vec::new();
        for (i, stage) in self.stages.iter().enumerate() {
            let id = i + 1;
            let offsets = out
                .offsets
                .iter()
                .find(|(l, _)| *l == id)
                .map(|&(_, v)| tape.value(v).data().iter().map(|x| x.as_f64()).collect());
            stack.push(TraceLayer::Conv {
                id,
                geom,
                channels: self.config.conv_widths[i],
                out_extent: (h, w),
                offsets,
            });
            if stage.pool != (1, 1) {
                stack.push(TraceLayer::Pool {
                    window: stage.pool,
                    stride: stage.pool,
                    out_extent: stage.out_extent,
                });
            }
            (h, w) = stage.out_extent;
        }
        Ok(stack)
    }
}

fn two_mut<B>(v: &mut [B], (a, b): Pair) -> (&mut B, &mut B) {
    assert!(a < b, "buffer indices out of order");
    let (lo, hi) = v.split_at_mut(b);
    (&mut lo[a], &mut hi[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ctc::ctc_loss_tape;

    fn random_images(shape: [usize; 4], seed: u64) -> Tensor<f64> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::from_data(&shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn frame_counts() {
        let full = Model::<f32>::new(ModelConfig::default().with_toy_widths()).unwrap();
        assert_eq!(full.frames(), 50);
        let base = Model::<f32>::new(ModelConfig::baseline().with_toy_widths()).unwrap();
        assert_eq!(base.frames(), 25);
        let mut cfg = ModelConfig::default().with_toy_widths();
        cfg.use_adaptive_pool = false;
        assert!(matches!(Model::<f32>::new(cfg), Err(Error::Config(_))));
        let mut cfg = ModelConfig::baseline().with_toy_widths();
        cfg.use_adaptive_pool = false;
        assert_eq!(Model::<f32>::new(cfg).unwrap().frames(), 25);
    }

    #[test]
    fn same_seed_same_weights() {
        let a = Model::<f64>::new(ModelConfig::tiny()).unwrap();
        let b = Model::<f64>::new(ModelConfig::tiny()).unwrap();
        assert_eq!(a.params(), b.params());
        let mut cfg = ModelConfig::tiny();
        cfg.seed = 1;
        assert_ne!(Model::<f64>::new(cfg).unwrap().params(), a.params());
    }

    #[test]
    fn offset_branches_start_at_zero() {
        let m = Model::<f64>::new(ModelConfig::default().with_toy_widths()).unwrap();
        let offs: Vec<_> = m.params().iter().filter(|p| p.name.contains(".offset.")).collect();
        assert_eq!(offs.len(), 4);
        assert!(offs.iter().all(|p| p.value.data().iter().all(|&v| v == 0.0)));
        let w = m.params().iter().find(|p| p.name == "conv4.offset.weight").unwrap();
        assert_eq!(w.value.shape(), [18, 24, 3, 3]);
    }

    #[test]
    fn forward_shapes_and_gradients() {
        let mut m = Model::<f64>::new(ModelConfig::tiny()).unwrap();
        let mut tape = GradTape::new();
        let vars = m.bind(&mut tape);
        let x = tape.constant(random_images(m.input_shape(2), 3));
        let out = m.forward_tape(&mut tape, &vars, x, Mode::Train).unwrap();
        assert_eq!(tape.value(out.logits).shape(), [2, 16, 4]);
        assert_eq!(out.offsets.len(), 1);
        let labels = vec![m.charset().encode("12").unwrap(), m.charset().encode("0").unwrap()];
        let loss = ctc_loss_tape(&mut tape, out.logits, &labels).unwrap().loss.unwrap();
        tape.backward(loss).unwrap();
        for (p, v) in m.params().iter().zip(&vars) {
            let g = tape.grad(*v).unwrap();
            assert_eq!(g.len(), p.value.len(), "{}", p.name);
            assert!(g.iter().all(|x| x.is_finite()), "{}", p.name);
        }
        let head = vars[m.params().iter().position(|p| p.name == "head.weight").unwrap()];
        assert!(tape.grad(head).unwrap().iter().any(|&g| g != 0.0));
    }

    #[test]
    fn rejects_wrong_image_size() {
        let mut m = Model::<f64>::new(ModelConfig::tiny()).unwrap();
        let bad = random_images([1, 1, 16, 30], 0);
        assert!(matches!(m.logits(&bad, Mode::Eval), Err(Error::Shape { .. })));
    }

    #[test]
    fn trace_stack_layout() {
        let mut m = Model::<f64>::new(ModelConfig::tiny()).unwrap();
        let img = random_images(m.input_shape(1), 1);
        let stack = m.trace_stack(&img).unwrap();
        assert_eq!(stack.len(), 5);
        match &stack[3] {
            TraceLayer::Conv { id, offsets, out_extent, .. } => {
                assert_eq!(*id, 3);
                assert_eq!(*out_extent, (8, 16));
                assert_eq!(offsets.as_ref().unwrap().len(), 18 * 8 * 16);
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
