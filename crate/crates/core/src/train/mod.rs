//! Training loop, optimizer, evaluation, gradient checks and ablation sweeps.

pub mod ablation;
pub mod eval;
pub mod gradcheck;

pub use ablation::{ablation_csv, component_grid, placement_grid, run_ablation, AblationData, AblationResult, AblationRow};
pub use eval::{evaluate, levenshtein, normalized_edit_distance, EvalReport, Prediction, TagStats};
pub use gradcheck::{
    grad_check, model_probe, operator_suite, GradCheckOptions, GradCheckReport, GroupResult,
    ModelProbe, Probe, TapeProbe,
};

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::ctc::ctc_loss_tape;
use crate::data::Dataset;
use crate::error::{shape_err, Error, Result};
use crate::model::{parse_num, Model};
use crate::nn::{Mode, BN_MOMENTUM};
use crate::real::Real;
use crate::tape::GradTape;
use crate::tensor::Tensor;

/// Optimization settings.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Passes over the training set; ignored when `steps > 0`.
    pub epochs: usize,
    /// Fixed number of optimizer steps, or 0 to run `epochs`.
    pub steps: usize,
    pub momentum: f64,
    /// Global L2 clipping threshold; 0 disables clipping.
    pub clip_norm: f64,
    /// Shuffling seed.
    pub seed: u64,
    /// Evaluate on the held-out set every this many steps (0 = only at the end).
    pub eval_every: usize,
    /// Training batches used to re-estimate batch-norm statistics before each
    /// evaluation and at the end of training (0 keeps the moving averages).
    pub bn_recalibration: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.00005,
            batch_size: 64,
            epochs: 8,
            steps: 0,
            momentum: 0.0,
            clip_norm: 5.0,
            seed: 0,
            eval_every: 0,
            bn_recalibration: 32,
        }
    }
}

impl TrainConfig {
    /// Settings for CPU-scale runs on the synthetic toy data.
    pub fn toy() -> Self {
        TrainConfig {
            learning_rate: 0.02,
            batch_size: 16,
            steps: 2000,
            momentum: 0.9,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if self.clip_norm < 0.0 {
            return Err(Error::Config("clip_norm must be non-negative".into()));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "learning_rate = {}", self.learning_rate);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "steps = {}", self.steps);
        let _ = writeln!(s, "momentum = {}", self.momentum);
        let _ = writeln!(s, "clip_norm = {}", self.clip_norm);
        let _ = writeln!(s, "eval_every = {}", self.eval_every);
        let _ = writeln!(s, "bn_recalibration = {}", self.bn_recalibration);
        s
    }

    /// Set one key; `Ok(false)` for keys this type does not own.
    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "learning_rate" => self.learning_rate = parse_num(key, value)?,
            "batch_size" => self.batch_size = parse_num(key, value)?,
            "epochs" => self.epochs = parse_num(key, value)?,
            "steps" => self.steps = parse_num(key, value)?,
            "momentum" => self.momentum = parse_num(key, value)?,
            "clip_norm" => self.clip_norm = parse_num(key, value)?,
            "eval_every" => self.eval_every = parse_num(key, value)?,
            "bn_recalibration" => self.bn_recalibration = parse_num(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// What one optimizer call did.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    /// L2 norm of the raw gradient.
    pub grad_norm: f64,
    /// Factor the gradient was multiplied by (1 when not clipped).
    pub clip_scale: f64,
    /// The gradient was not finite and no update was made.
    pub skipped: bool,
}

/// Stochastic gradient descent with optional momentum and global L2 clipping:
/// `v ← μ·v + c·g`, `θ ← θ − lr·v` where `c = min(1, clip / ‖g‖)`.
#[derive(Clone, Debug)]
pub struct Sgd<T: Real> {
    pub learning_rate: f64,
    pub momentum: f64,
    pub clip_norm: f64,
    velocity: Vec<Vec<T>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(learning_rate: f64, momentum: f64, clip_norm: f64) -> Self {
        Sgd {
            learning_rate,
            momentum,
            clip_norm,
            velocity: Vec::new(),
        }
    }

    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self::new(cfg.learning_rate, cfg.momentum, cfg.clip_norm)
    }

    /// Update `params` in place with `grads` (same order and sizes).
    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[&[T]]) -> Result<StepStats> {
        if params.len() != grads.len() {
            return Err(shape_err("sgd", format!("{} params, {} grads", params.len(), grads.len())));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != g.len() {
                return Err(shape_err("sgd", format!("param {i}: {} values, {} grads", p.len(), g.len())));
            }
        }
        let sq: f64 = grads.iter().flat_map(|g| g.iter()).map(|v| v.as_f64() * v.as_f64()).sum();
        let norm = sq.sqrt();
        if !norm.is_finite() {
            return Ok(StepStats {
                grad_norm: norm,
                clip_scale: 0.0,
                skipped: true,
            });
        }
        let scale = if self.clip_norm > 0.0 && norm > self.clip_norm {
            self.clip_norm / norm
        } else {
            1.0
        };
        if self.velocity.len() != params.len() {
            self.velocity = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
        }
        let (lr, mu, c) = (T::c(self.learning_rate), T::c(self.momentum), T::c(scale));
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            if v.len() != p.len() {
                *v = vec![T::zero(); p.len()];
            }
            for ((x, &gi), vi) in p.data_mut().iter_mut().zip(g.iter()).zip(v.iter_mut()) {
                *vi = mu * *vi + c * gi;
                *x -= lr * *vi;
            }
        }
        Ok(StepStats {
            grad_norm: norm,
            clip_scale: scale,
            skipped: false,
        })
    }

    /// Apply the gradients accumulated on the model's parameters, then clear them.
    pub fn step_model(&mut self, model: &mut Model<T>) -> Result<StepStats> {
        let grads: Vec<Vec<T>> = model
            .params_mut()
            .iter_mut()
            .map(|p| {
                let n = p.value.len();
                p.value.take_grad().unwrap_or_else(|| vec![T::zero(); n])
            })
            .collect();
        let refs: Vec<&[T]> = grads.iter().map(|g| g.as_slice()).collect();
        let mut params: Vec<&mut Tensor<T>> = model.params_mut().iter_mut().map(|p| &mut p.value).collect();
        self.step(&mut params, &refs)
    }
}

/// Mean CTC loss of one batch and the gradients it leaves on `model`.
/// Returns `None` when no item in the batch can be aligned.
pub fn loss_and_grads<T: Real>(
    model: &mut Model<T>,
    images: &Tensor<T>,
    labels: &[crate::ctc::LabelSequence],
    mode: Mode,
) -> Result<(Option<f64>, usize)> {
    let mut tape = GradTape::new();
    let vars = model.bind(&mut tape);
    let x = tape.constant(images.clone());
    let out = model.forward_tape(&mut tape, &vars, x, mode)?;
    let batch = ctc_loss_tape(&mut tape, out.logits, labels)?;
    let Some(loss) = batch.loss else {
        return Ok((None, batch.skipped));
    };
    let value = tape.value(loss).item().as_f64();
    tape.backward(loss)?;
    model.accumulate_grads(&tape, &vars);
    Ok((Some(value), batch.skipped))
}

/// Where and how verbosely to record a run.
#[derive(Clone, Debug, Default)]
pub struct TrainOptions<'a> {
    /// Receives `loss.csv` and one checkpoint per epoch plus `final.ckpt`.
    pub out_dir: Option<PathBuf>,
    pub eval_set: Option<&'a Dataset>,
    /// Progress lines on stderr.
    pub verbose: bool,
}

/// Outcome of [`train`].
#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    /// `(step, loss)` for every step that produced a loss.
    pub curve: Vec<(u64, f64)>,
    /// Batch items without a valid alignment.
    pub skipped_items: usize,
    /// Steps with no alignable item or a non-finite gradient.
    pub skipped_steps: usize,
    pub evals: Vec<(u64, EvalReport)>,
    pub checkpoints: Vec<PathBuf>,
}

impl TrainReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.curve.last().map(|&(_, l)| l)
    }

    /// Mean of the last `n` recorded losses.
    pub fn tail_mean(&self, n: usize) -> Option<f64> {
        let tail = &self.curve[self.curve.len().saturating_sub(n)..];
        (!tail.is_empty()).then(|| tail.iter().map(|&(_, l)| l).sum::<f64>() / tail.len() as f64)
    }
}

pub fn write_loss_csv(path: &Path, curve: &[(u64, f64)]) -> Result<()> {
    let mut s = String::from("step,loss\n");
    for (step, loss) in curve {
        let _ = writeln!(s, "{step},{loss}");
    }
    std::fs::write(path, s)?;
    Ok(())
}

/// Replace every batch-norm running estimate with the plain average of the
/// batch statistics over `cfg.bn_recalibration` training batches. Gradients
/// and parameters are untouched; the batches come from a fixed shuffle of
/// `cfg.seed`.
pub fn recalibrate_batch_norm<T: Real>(model: &mut Model<T>, data: &Dataset, cfg: &TrainConfig) -> Result<()> {
    if cfg.bn_recalibration == 0 || data.is_empty() || model.buffers().is_empty() {
        return Ok(());
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6b6e_6f72_6d73));
    let batches: Vec<&[usize]> = order.chunks(cfg.batch_size).take(cfg.bn_recalibration).collect();
    let mut sums: Vec<(Vec<f64>, Vec<f64>)> =
        model.buffers().iter().map(|b| (vec![0.0; b.stats.channels()], vec![0.0; b.stats.channels()])).collect();
    // starting from zero, one training-mode update leaves momentum * batch statistic
    let scale = 1.0 / (BN_MOMENTUM * batches.len() as f64);
    for idx in &batches {
        for b in model.buffers_mut() {
            b.stats.mean.iter_mut().chain(b.stats.var.iter_mut()).for_each(|v| *v = T::zero());
        }
        let (images, _) = data.batch(idx)?;
        model.logits(&images.cast::<T>(), Mode::Train)?;
        for (b, (m, v)) in model.buffers().iter().zip(sums.iter_mut()) {
            m.iter_mut().zip(&b.stats.mean).for_each(|(s, x)| *s += x.as_f64());
            v.iter_mut().zip(&b.stats.var).for_each(|(s, x)| *s += x.as_f64());
        }
    }
    for (b, (m, v)) in model.buffers_mut().iter_mut().zip(&sums) {
        b.stats.mean = m.iter().map(|x| T::c(x * scale)).collect();
        b.stats.var = v.iter().map(|x| T::c(x * scale)).collect();
    }
    Ok(())
}

/// Train `model` on `data` with minibatch SGD. Batches are drawn from a
/// per-epoch shuffle seeded by `cfg.seed`, so runs are reproducible.
pub fn train<T: Real>(
    model: &mut Model<T>,
    data: &Dataset,
    cfg: &TrainConfig,
    opts: &TrainOptions,
) -> Result<TrainReport> {
    cfg.validate()?;
    let (w, h) = model.config().input_size;
    if data.size != (w, h) || data.channels != model.config().input_channels {
        return Err(shape_err(
            "train",
            format!(
                "dataset {}x{}x{}, model expects {w}x{h}x{}",
                data.size.0,
                data.size.1,
                data.channels,
                model.config().input_channels
            ),
        ));
    }
    if data.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if let Some(dir) = &opts.out_dir {
        std::fs::create_dir_all(dir)?;
    }
    let per_epoch = data.len().div_ceil(cfg.batch_size);
    let total = if cfg.steps > 0 { cfg.steps } else { cfg.epochs * per_epoch };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut sgd = Sgd::<T>::from_config(cfg);
    let mut report = TrainReport::default();
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut epoch = 0;
    model.zero_grads();
    for step in 1..=total as u64 {
        if cursor >= order.len() {
            order = (0..data.len()).collect();
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let end = (cursor + cfg.batch_size).min(order.len());
        let (images, labels) = data.batch(&order[cursor..end])?;
        cursor = end;
        let (loss, skipped) = loss_and_grads(model, &images.cast::<T>(), &labels, Mode::Train)?;
        report.skipped_items += skipped;
        match loss {
            Some(l) => {
                let stats = sgd.step_model(model)?;
                if stats.skipped {
                    report.skipped_steps += 1;
                }
                report.curve.push((step, l));
            }
            None => {
                model.zero_grads();
                report.skipped_steps += 1;
            }
        }
        model.set_step(model.step() + 1);
        if opts.verbose && (step % 50 == 0 || step == 1) {
            eprintln!("step {step}/{total} loss {:.4}", report.tail_mean(50).unwrap_or(f64::NAN));
        }
        if let (Some(eval_set), true) = (opts.eval_set, cfg.eval_every > 0 && step % cfg.eval_every as u64 == 0) {
            recalibrate_batch_norm(model, data, cfg)?;
            let r = evaluate(model, eval_set, cfg.batch_size)?;
            if opts.verbose {
                eprintln!("step {step}: accuracy {:.3}", r.total.accuracy());
            }
            report.evals.push((step, r));
        }
        let epoch_done = cursor >= order.len();
        if epoch_done {
            epoch += 1;
            if let Some(dir) = &opts.out_dir {
                let path = dir.join(format!("epoch_{epoch}.ckpt"));
                model.save(&path)?;
                report.checkpoints.push(path);
            }
        }
    }
    if report.evals.last().map(|(s, _)| *s) != Some(total as u64) {
        recalibrate_batch_norm(model, data, cfg)?;
    }
    if let Some(eval_set) = opts.eval_set {
        if report.evals.last().map(|(s, _)| *s) != Some(total as u64) {
            report.evals.push((total as u64, evaluate(model, eval_set, cfg.batch_size)?));
        }
    }
    if let Some(dir) = &opts.out_dir {
        let path = dir.join("final.ckpt");
        model.save(&path)?;
        report.checkpoints.push(path);
        write_loss_csv(&dir.join("loss.csv"), &report.curve)?;
    }
    Ok(report)
}
