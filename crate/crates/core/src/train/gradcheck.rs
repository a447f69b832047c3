//! Central finite-difference verification of hand-written backward passes.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::ctc::{ctc_loss_tape, LabelSequence};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::nn::{
    adaptive_max_pool2d_tape, batch_norm_tape, bilinear_sample_tape, conv2d_tape,
    deform_conv2d_tape, max_pool2d_tape, residual_block_tape, ConvGeom, Mode, ResidualVars,
    RunningStats,
};
use crate::seq::{bilstm_tape, linear_tape, lstm_cell_tape, map_to_sequence_tape, LstmVars};
use crate::tape::{GradTape, Var};
use crate::tensor::Tensor;

/// A scalar function of named `f64` inputs with an analytic gradient.
pub trait Probe {
    /// Operator family the probe belongs to.
    fn op(&self) -> &str;

    /// Input groups and their current values.
    fn inputs(&self) -> Vec<(String, Tensor<f64>)>;

    fn loss(&self, inputs: &[Tensor<f64>]) -> Result<f64>;

    /// Loss and one gradient vector per input group.
    fn loss_and_grads(&self, inputs: &[Tensor<f64>]) -> Result<(f64, Vec<Vec<f64>>)>;
}

type Build = dyn Fn(&mut GradTape<f64>, &[Var]) -> Result<Var>;

/// Probe over a tape program: `build` receives one leaf per input and
/// returns a scalar.
pub struct TapeProbe {
    op: String,
    inputs: Vec<(String, Tensor<f64>)>,
    build: Box<Build>,
}

impl TapeProbe {
    pub fn new(
        op: impl Into<String>,
        inputs: Vec<(String, Tensor<f64>)>,
        build: impl Fn(&mut GradTape<f64>, &[Var]) -> Result<Var> + 'static,
    ) -> Self {
        TapeProbe {
            op: op.into(),
            inputs,
            build: Box::new(build),
        }
    }

    fn run(&self, inputs: &[Tensor<f64>], grads: bool) -> Result<(f64, Vec<Vec<f64>>)> {
        let mut tape = GradTape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = (self.build)(&mut tape, &vars)?;
        let value = tape.value(out).item();
        if !grads {
            return Ok((value, Vec::new()));
        }
        tape.backward(out)?;
        let g = vars
            .iter()
            .zip(inputs)
            .map(|(&v, t)| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]))
            .collect();
        Ok((value, g))
    }
}

impl Probe for TapeProbe {
    fn op(&self) -> &str {
        &self.op
    }

    fn inputs(&self) -> Vec<(String, Tensor<f64>)> {
        self.inputs.clone()
    }

    fn loss(&self, inputs: &[Tensor<f64>]) -> Result<f64> {
        Ok(self.run(inputs, false)?.0)
    }

    fn loss_and_grads(&self, inputs: &[Tensor<f64>]) -> Result<(f64, Vec<Vec<f64>>)> {
        self.run(inputs, true)
    }
}

/// Mean CTC loss of a whole model on a fixed batch, as a function of every
/// parameter tensor. Batch-norm runs in training mode from fresh statistics.
pub struct ModelProbe {
    model: Model<f64>,
    images: Tensor<f64>,
    labels: Vec<LabelSequence>,
}

impl ModelProbe {
    pub fn new(model: Model<f64>, images: Tensor<f64>, labels: Vec<LabelSequence>) -> Self {
        ModelProbe { model, images, labels }
    }

    fn run(&self, inputs: &[Tensor<f64>], grads: bool) -> Result<(f64, Vec<Vec<f64>>)> {
        let mut m = self.model.clone();
        for (p, v) in m.params_mut().iter_mut().zip(inputs) {
            p.value = v.clone();
        }
        let mut tape = GradTape::new();
        let vars = m.bind(&mut tape);
        let x = tape.constant(self.images.clone());
        let out = m.forward_tape(&mut tape, &vars, x, Mode::Train)?;
        let loss = ctc_loss_tape(&mut tape, out.logits, &self.labels)?
            .loss
            .ok_or_else(|| Error::Config("gradient probe batch has no alignable item".into()))?;
        let value = tape.value(loss).item();
        if !grads {
            return Ok((value, Vec::new()));
        }
        tape.backward(loss)?;
        Ok((value, vars.iter().map(|&v| tape.grad(v).unwrap().to_vec()).collect()))
    }
}

impl Probe for ModelProbe {
    fn op(&self) -> &str {
        "model"
    }

    fn inputs(&self) -> Vec<(String, Tensor<f64>)> {
        self.model
            .params()
            .iter()
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect()
    }

    fn loss(&self, inputs: &[Tensor<f64>]) -> Result<f64> {
        Ok(self.run(inputs, false)?.0)
    }

    fn loss_and_grads(&self, inputs: &[Tensor<f64>]) -> Result<(f64, Vec<Vec<f64>>)> {
        self.run(inputs, true)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    pub tolerance: f64,
    /// Relative errors use `max(|analytic|, |numeric|, floor)` as denominator.
    pub floor: f64,
    /// Entries checked per input group (all of them if the group is smaller).
    pub max_entries: usize,
    /// Times the step is divided by 10 when the one-sided differences
    /// disagree, i.e. when the stencil straddles a ReLU or max switch.
    pub refinements: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            tolerance: 1e-3,
            floor: 1e-6,
            max_entries: 64,
            refinements: 2,
            seed: 0,
        }
    }
}

/// Outcome for one input group of one probe.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupResult {
    pub op: String,
    pub instance: usize,
    pub group: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub tolerance: f64,
}

impl GroupResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

/// Per-group results; an empty report means nothing had parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub groups: Vec<GroupResult>,
    /// Probes that could not be evaluated, with the error text.
    pub errors: Vec<(String, String)>,
}

/// Aggregate over all instances of one operator.
#[derive(Clone, Debug, PartialEq)]
pub struct OpSummary {
    pub op: String,
    pub instances: usize,
    pub groups: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.errors.is_empty() && self.groups.iter().all(GroupResult::passed)
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty() && self.errors.is_empty()
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        self.groups.extend(other.groups);
        self.errors.extend(other.errors);
    }

    pub fn summary(&self) -> Vec<OpSummary> {
        let mut by_op: BTreeMap<&str, OpSummary> = BTreeMap::new();
        let mut seen: BTreeMap<&str, std::collections::BTreeSet<usize>> = BTreeMap::new();
        for g in &self.groups {
            let s = by_op.entry(&g.op).or_insert_with(|| OpSummary {
                op: g.op.clone(),
                instances: 0,
                groups: 0,
                max_rel_err: 0.0,
                tolerance: g.tolerance,
                passed: true,
            });
            s.groups += 1;
            s.max_rel_err = s.max_rel_err.max(g.max_rel_err);
            s.passed &= g.passed();
            seen.entry(&g.op).or_default().insert(g.instance);
        }
        for (op, _) in &self.errors {
            if let Some(s) = by_op.get_mut(op.as_str()) {
                s.passed = false;
            }
        }
        by_op
            .into_values()
            .map(|mut s| {
                s.instances = seen[s.op.as_str()].len();
                s
            })
            .collect()
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for s in self.summary() {
            writeln!(
                f,
                "{} {:<16} instances {:>3}  groups {:>4}  max rel err {:.3e} (tol {:.0e})",
                if s.passed { "PASS" } else { "FAIL" },
                s.op,
                s.instances,
                s.groups,
                s.max_rel_err,
                s.tolerance
            )?;
        }
        for (op, e) in &self.errors {
            writeln!(f, "FAIL {op:<16} {e}")?;
        }
        Ok(())
    }
}

/// Compare analytic and central-difference gradients for each probe.
/// `instance` numbers probes sharing an op name in order.
pub fn grad_check(probes: &[Box<dyn Probe>], opts: &GradCheckOptions) -> GradCheckReport {
    let mut report = GradCheckReport::default();
    let mut counters: BTreeMap<String, usize> = BTreeMap::new();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    for probe in probes {
        let instance = {
            let c = counters.entry(probe.op().to_string()).or_default();
            *c += 1;
            *c - 1
        };
        match check_one(probe.as_ref(), instance, opts, &mut rng) {
            Ok(groups) => report.groups.extend(groups),
            Err(e) => report.errors.push((probe.op().to_string(), e.to_string())),
        }
    }
    report
}

fn check_one(
    probe: &dyn Probe,
    instance: usize,
    opts: &GradCheckOptions,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<GroupResult>> {
    let named = probe.inputs();
    let mut values: Vec<Tensor<f64>> = named.iter().map(|(_, t)| t.clone()).collect();
    let (base, analytic) = probe.loss_and_grads(&values)?;
    let mut out = Vec::new();
    for (gi, (name, t)) in named.iter().enumerate() {
        let n = t.len();
        if n == 0 {
            continue;
        }
        let entries: Vec<usize> = if n <= opts.max_entries {
            (0..n).collect()
        } else {
            sample(rng, n, opts.max_entries).into_vec()
        };
        let (mut max_rel, mut max_abs) = (0.0f64, 0.0f64);
        for &j in &entries {
            let orig = values[gi].data()[j];
            let mut step = opts.step;
            let mut numeric;
            let mut tries = 0;
            loop {
                values[gi].data_mut()[j] = orig + step;
                let plus = probe.loss(&values)?;
                values[gi].data_mut()[j] = orig - step;
                let minus = probe.loss(&values)?;
                values[gi].data_mut()[j] = orig;
                numeric = (plus - minus) / (2.0 * step);
                let (fwd, bwd) = ((plus - base) / step, (base - minus) / step);
                let spread = (fwd - bwd).abs() / fwd.abs().max(bwd.abs()).max(opts.floor);
                if spread < opts.tolerance || tries == opts.refinements {
                    break;
                }
                step /= 10.0;
                tries += 1;
            }
            let a = analytic[gi][j];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(opts.floor);
            max_rel = max_rel.max(if rel.is_nan() { f64::INFINITY } else { rel });
            max_abs = max_abs.max(abs);
        }
        out.push(GroupResult {
            op: probe.op().to_string(),
            instance,
            group: name.clone(),
            checked: entries.len(),
            max_rel_err: max_rel,
            max_abs_err: max_abs,
            tolerance: opts.tolerance,
        });
    }
    Ok(out)
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_data(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("sized")
}

fn named(items: Vec<(&str, Tensor<f64>)>) -> Vec<(String, Tensor<f64>)> {
    items.into_iter().map(|(n, t)| (n.to_string(), t)).collect()
}

/// Values whose fractional part stays in `[0.1, 0.9]`, away from the
/// bilinear kinks at integer coordinates.
fn off_lattice(shape: &[usize], span: i32, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| rng.gen_range(-span..span) as f64 + rng.gen_range(0.1..0.9))
        .collect();
    Tensor::from_data(shape, data).expect("sized")
}

/// Reduce a tensor to a scalar with fixed pseudo-random weights.
fn project(tape: &mut GradTape<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = (0..tape.value(y).len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    tape.weighted_sum(y, w)
}

fn random_geom(rng: &mut ChaCha8Rng) -> ConvGeom {
    match rng.gen_range(0..4) {
        0 => ConvGeom::same3(),
        1 => ConvGeom::new((3, 3), (2, 2), (0, 0)),
        2 => ConvGeom::new((2, 3), (1, 2), (0, 1)),
        _ => ConvGeom::new((1, 1), (1, 1), (0, 0)),
    }
}

fn conv_probe(rng: &mut ChaCha8Rng, deform: bool) -> Box<dyn Probe> {
    let geom = random_geom(rng);
    let (n, c, co) = (rng.gen_range(1..3), rng.gen_range(1..4), rng.gen_range(1..4));
    let (h, w) = (rng.gen_range(4..7), rng.gen_range(4..7));
    let (ho, wo) = geom.output_extent(h, w).expect("valid geometry");
    let (kh, kw) = geom.kernel;
    let seed = rng.gen();
    let mut inputs = vec![
        ("x", uniform(&[n, c, h, w], -1.0, 1.0, rng)),
        ("weight", uniform(&[co, c, kh, kw], -1.0, 1.0, rng)),
        ("bias", uniform(&[co], -1.0, 1.0, rng)),
    ];
    if deform {
        inputs.push(("offsets", off_lattice(&[n, 2 * kh * kw, ho, wo], 2, rng)));
        Box::new(TapeProbe::new("deform_conv2d", named(inputs), move |t, v| {
            let y = deform_conv2d_tape(t, v[0], v[1], v[2], v[3], geom)?;
            project(t, y, seed)
        }))
    } else {
        Box::new(TapeProbe::new("conv2d", named(inputs), move |t, v| {
            let y = conv2d_tape(t, v[0], v[1], v[2], geom)?;
            project(t, y, seed)
        }))
    }
}

fn bilinear_probe(rng: &mut ChaCha8Rng) -> Box<dyn Probe> {
    let (c, h, w) = (rng.gen_range(1..4), rng.gen_range(2..6), rng.gen_range(2..6));
    let p = Tensor::from_data(
        &[2],
        vec![
            rng.gen_range(-1..h as i32) as f64 + rng.gen_range(0.1..0.9),
            rng.gen_range(-1..w as i32) as f64 + rng.gen_range(0.1..0.9),
        ],
    )
    .expect("sized");
    let seed = rng.gen();
    let inputs = named(vec![("x", uniform(&[c, h, w], -1.0, 1.0, rng)), ("location", p)]);
    Box::new(TapeProbe::new("bilinear_sample", inputs, move |t, v| {
        let y = bilinear_sample_tape(t, v[0], v[1])?;
        project(t, y, seed)
    }))
}

fn batch_norm_probe(rng: &mut ChaCha8Rng, train: bool) -> Box<dyn Probe> {
    let (n, c, h, w) = (rng.gen_range(1..4), rng.gen_range(1..4), rng.gen_range(2..4), rng.gen_range(1..4));
    let stats = RunningStats {
        mean: (0..c).map(|_| rng.gen_range(-0.5..0.5)).collect(),
        var: (0..c).map(|_| rng.gen_range(0.5..2.0)).collect(),
    };
    let seed = rng.gen();
    let inputs = named(vec![
        ("x", uniform(&[n, c, h, w], -2.0, 2.0, rng)),
        ("gamma", uniform(&[c], 0.5, 1.5, rng)),
        ("beta", uniform(&[c], -0.5, 0.5, rng)),
    ]);
    let mode = if train { Mode::Train } else { Mode::Eval };
    Box::new(TapeProbe::new("batch_norm", inputs, move |t, v| {
        let mut s = stats.clone();
        let y = batch_norm_tape(t, v[0], v[1], v[2], &mut s, mode)?;
        project(t, y, seed)
    }))
}

fn pool_probe(rng: &mut ChaCha8Rng, adaptive: bool) -> Box<dyn Probe> {
    let (n, c, h, w) = (rng.gen_range(1..3), rng.gen_range(1..3), rng.gen_range(2..8), rng.gen_range(2..8));
    let seed = rng.gen();
    let x = uniform(&[n, c, h, w], -1.0, 1.0, rng);
    if adaptive {
        let out = (rng.gen_range(1..=h), rng.gen_range(1..=w));
        Box::new(TapeProbe::new("adaptive_max_pool2d", named(vec![("x", x)]), move |t, v| {
            let y = adaptive_max_pool2d_tape(t, v[0], out)?;
            project(t, y, seed)
        }))
    } else {
        let win = (rng.gen_range(1..=h.min(3)), rng.gen_range(1..=w.min(3)));
        let stride = (rng.gen_range(1..=win.0), rng.gen_range(1..=win.1));
        Box::new(TapeProbe::new("max_pool2d", named(vec![("x", x)]), move |t, v| {
            let y = max_pool2d_tape(t, v[0], win, stride)?;
            project(t, y, seed)
        }))
    }
}

fn lstm_inputs(prefix: &str, input: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Vec<(String, Tensor<f64>)> {
    vec![
        (format!("{prefix}w"), uniform(&[4 * hidden, input], -0.8, 0.8, rng)),
        (format!("{prefix}u"), uniform(&[4 * hidden, hidden], -0.8, 0.8, rng)),
        (format!("{prefix}b"), uniform(&[4 * hidden], -0.5, 0.5, rng)),
    ]
}

fn lstm_cell_probe(rng: &mut ChaCha8Rng) -> Box<dyn Probe> {
    let (i, h) = (rng.gen_range(1..5), rng.gen_range(1..5));
    let seed = rng.gen();
    let mut inputs = named(vec![
        ("x", uniform(&[i], -1.0, 1.0, rng)),
        ("h_prev", uniform(&[h], -1.0, 1.0, rng)),
        ("c_prev", uniform(&[h], -1.0, 1.0, rng)),
    ]);
    inputs.extend(lstm_inputs("", i, h, rng));
    Box::new(TapeProbe::new("lstm_cell", inputs, move |t, v| {
        let p = LstmVars { w: v[3], u: v[4], b: v[5] };
        let y = lstm_cell_tape(t, v[0], v[1], v[2], p)?;
        project(t, y, seed)
    }))
}

fn bilstm_probe(rng: &mut ChaCha8Rng) -> Box<dyn Probe> {
    let (n, steps, d, h) = (rng.gen_range(1..3), rng.gen_range(1..6), rng.gen_range(1..4), rng.gen_range(1..4));
    let seed = rng.gen();
    let mut inputs = named(vec![("seq", uniform(&[n, steps, d], -1.0, 1.0, rng))]);
    inputs.extend(lstm_inputs("fwd.", d, h, rng));
    inputs.extend(lstm_inputs("bwd.", d, h, rng));
    Box::new(TapeProbe::new("bilstm_layer", inputs, move |t, v| {
        let f = LstmVars { w: v[1], u: v[2], b: v[3] };
        let b = LstmVars { w: v[4], u: v[5], b: v[6] };
        let y = bilstm_tape(t, v[0], f, b)?;
        project(t, y, seed)
    }))
}

fn project_probe(rng: &mut ChaCha8Rng) -> Box<dyn Probe> {
    let (steps, d, k) = (rng.gen_range(1..6), rng.gen_range(1..5), rng.gen_range(2..6));
    let seed = rng.gen();
    let inputs = named(vec![
        ("frames", uniform(&[steps, d], -1.0, 1.0, rng)),
        ("weight", uniform(&[k, d], -1.0, 1.0, rng)),
        ("bias", uniform(&[k], -1.0, 1.0, rng)),
    ]);
    Box::new(TapeProbe::new("project_logits", inputs, move |t, v| {
        let y = linear_tape(t, v[0], v[1], v[2])?;
        project(t, y, seed)
    }))
}

fn random_label(max_len: usize, classes: usize, rng: &mut ChaCha8Rng) -> LabelSequence {
    let len = rng.gen_range(0..=max_len);
    LabelSequence::new((0..len).map(|_| rng.gen_range(1..classes)).collect()).expect("non-blank")
}

fn ctc_probe(rng: &mut ChaCha8Rng) -> Box<dyn Probe> {
    let (n, steps, classes) = (rng.gen_range(1..4), rng.gen_range(2..9), rng.gen_range(2..6));
    let labels: Vec<LabelSequence> = (0..n)
        .map(|_| loop {
            let l = random_label(4, classes, rng);
            if l.min_frames() <= steps {
                break l;
            }
        })
        .collect();
    let inputs = named(vec![("logits", uniform(&[n, steps, classes], -2.0, 2.0, rng))]);
    Box::new(TapeProbe::new("ctc_loss", inputs, move |t, v| {
        ctc_loss_tape(t, v[0], &labels)?
            .loss
            .ok_or_else(|| Error::Config("no alignable label".into()))
    }))
}

fn residual_probe(rng: &mut ChaCha8Rng) -> Box<dyn Probe> {
    let (n, c, h, w) = (rng.gen_range(1..3), rng.gen_range(1..3), rng.gen_range(2..5), rng.gen_range(2..5));
    let seed = rng.gen();
    let a = (1.0 / (9.0 * c as f64)).sqrt() * 1.5;
    let inputs = named(vec![
        ("x", uniform(&[n, c, h, w], -1.0, 1.0, rng)),
        ("conv1.weight", uniform(&[c, c, 3, 3], -a, a, rng)),
        ("conv1.bias", uniform(&[c], -0.2, 0.2, rng)),
        ("bn1.gamma", uniform(&[c], 0.5, 1.5, rng)),
        ("bn1.beta", uniform(&[c], -0.5, 0.5, rng)),
        ("conv2.weight", uniform(&[c, c, 3, 3], -a, a, rng)),
        ("conv2.bias", uniform(&[c], -0.2, 0.2, rng)),
        ("bn2.gamma", uniform(&[c], 0.5, 1.5, rng)),
        ("bn2.beta", uniform(&[c], -0.5, 0.5, rng)),
    ]);
    Box::new(TapeProbe::new("residual_block", inputs, move |t, v| {
        let vars = ResidualVars {
            conv1: (v[1], v[2]),
            bn1: (v[3], v[4]),
            conv2: (v[5], v[6]),
            bn2: (v[7], v[8]),
        };
        let (mut s1, mut s2) = (RunningStats::new(c), RunningStats::new(c));
        let y = residual_block_tape(t, v[0], &vars, (&mut s1, &mut s2), Mode::Train)?;
        project(t, y, seed)
    }))
}

fn elementwise_probe(rng: &mut ChaCha8Rng, which: usize) -> Box<dyn Probe> {
    let (r, c) = (rng.gen_range(1..4), rng.gen_range(1..4));
    let seed = rng.gen();
    let a = uniform(&[r, c], -2.0, 2.0, rng);
    let b = uniform(&[r, c], -2.0, 2.0, rng);
    let bt = uniform(&[c, rng.gen_range(1..4)], -2.0, 2.0, rng);
    let x4 = uniform(&[rng.gen_range(1..3), rng.gen_range(1..4), 1, rng.gen_range(1..5)], -1.0, 1.0, rng);
    let one = |op: &str, x: Tensor<f64>, f: fn(&mut GradTape<f64>, Var) -> Var| -> Box<dyn Probe> {
        Box::new(TapeProbe::new(op, named(vec![("a", x)]), move |t, v| {
            let y = f(t, v[0]);
            project(t, y, seed)
        }))
    };
    match which {
        0 => Box::new(TapeProbe::new("add", named(vec![("a", a), ("b", b)]), move |t, v| {
            let y = t.add(v[0], v[1])?;
            project(t, y, seed)
        })),
        1 => Box::new(TapeProbe::new("mul", named(vec![("a", a), ("b", b)]), move |t, v| {
            let y = t.mul(v[0], v[1])?;
            project(t, y, seed)
        })),
        2 => Box::new(TapeProbe::new("matmul", named(vec![("a", a), ("b", bt)]), move |t, v| {
            let y = t.matmul(v[0], v[1])?;
            project(t, y, seed)
        })),
        3 => one("relu", a, |t, v| t.relu(v)),
        4 => one("sigmoid", a, |t, v| t.sigmoid(v)),
        5 => one("tanh", a, |t, v| t.tanh(v)),
        _ => Box::new(TapeProbe::new("map_to_sequence", named(vec![("x", x4)]), move |t, v| {
            let y = map_to_sequence_tape(t, v[0])?;
            project(t, y, seed)
        })),
    }
}

/// `instances` random probes for every differentiable operator.
pub fn operator_suite(instances: usize, seed: u64) -> Vec<Box<dyn Probe>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probes = Vec::new();
    for i in 0..instances {
        probes.push(conv_probe(&mut rng, false));
        probes.push(conv_probe(&mut rng, true));
        probes.push(bilinear_probe(&mut rng));
        probes.push(batch_norm_probe(&mut rng, i % 4 != 3));
        probes.push(pool_probe(&mut rng, false));
        probes.push(pool_probe(&mut rng, true));
        probes.push(lstm_cell_probe(&mut rng));
        probes.push(bilstm_probe(&mut rng));
        probes.push(project_probe(&mut rng));
        probes.push(ctc_probe(&mut rng));
        probes.push(residual_probe(&mut rng));
        for which in 0..7 {
            probes.push(elementwise_probe(&mut rng, which));
        }
    }
    probes
}

/// Whole-model probe on `cfg` with a random two-image batch. Offset
/// branches get small random weights and non-integer biases so the
/// realized offsets sit away from the bilinear kinks at integer positions.
pub fn model_probe(cfg: &ModelConfig, seed: u64) -> Result<ModelProbe> {
    let mut cfg = cfg.clone();
    cfg.seed = seed;
    let mut model = Model::<f64>::new(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for p in model.params_mut() {
        if p.name.ends_with(".offset.weight") {
            p.value.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.002..0.002));
        } else if p.name.ends_with(".offset.bias") {
            p.value.data_mut().iter_mut().for_each(|v| {
                *v = rng.gen_range(-1..1) as f64 + rng.gen_range(0.3..0.7);
            });
        }
    }
    let images = uniform(&model.input_shape(2), -1.0, 1.0, &mut rng);
    let classes = model.charset().classes();
    let frames = model.frames();
    let labels = (0..2)
        .map(|_| loop {
            let l = random_label(3, classes, &mut rng);
            if !l.is_empty() && l.min_frames() <= frames {
                break l;
            }
        })
        .collect();
    Ok(ModelProbe::new(model, images, labels))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_on_a_few_instances() {
        let report = grad_check(&operator_suite(3, 1), &GradCheckOptions::default());
        assert!(report.passed(), "{report}");
        assert_eq!(report.summary().len(), 18);
    }

    #[test]
    fn empty_probe_gives_empty_report() {
        let p: Box<dyn Probe> = Box::new(TapeProbe::new("constant", Vec::new(), |t, _| {
            Ok(t.constant(Tensor::scalar(1.0)))
        }));
        let r = grad_check(&[p], &GradCheckOptions::default());
        assert!(r.is_empty() && r.passed());
        assert!(grad_check(&[], &GradCheckOptions::default()).is_empty());
    }

    #[test]
    fn corrupted_backward_is_caught() {
        let x = Tensor::from_data(&[3], vec![0.5, -1.0, 2.0]).unwrap();
        let p: Box<dyn Probe> = Box::new(TapeProbe::new("bad_square", named(vec![("x", x)]), |t, v| {
            let xv = t.value(v[0]).clone();
            let y = xv.map(|a| a * a);
            let x = v[0];
            let out = t.record(y, &[x], move |ctx, g, grads| {
                // Wrong: should be 2x.
                let d: Vec<f64> = ctx.value(x).data().iter().zip(g).map(|(a, g)| 3.0 * a * g).collect();
                grads.add(x, &d);
            });
            Ok(t.sum(out))
        }));
        let r = grad_check(&[p], &GradCheckOptions::default());
        assert!(!r.passed());
        assert!(r.groups[0].max_rel_err > 0.3);
        assert!(r.to_string().starts_with("FAIL bad_square"));
    }

    #[test]
    fn tiny_model_passes() {
        let probe = model_probe(&ModelConfig::tiny(), 3).unwrap();
        let opts = GradCheckOptions {
            tolerance: 1e-2,
            max_entries: 6,
            ..GradCheckOptions::default()
        };
        let r = grad_check(&[Box::new(probe) as Box<dyn Probe>], &opts);
        assert!(r.passed(), "{r}\n{:#?}", r.groups.iter().filter(|g| !g.passed()).collect::<Vec<_>>());
    }
}
