//! Connectionist temporal classification: loss with analytic gradient,
//! greedy best-path decoding and a brute-force alignment oracle.
//!
//! Class 0 is the blank; labels use classes `1..=K`.

use std::collections::HashMap;

use crate::error::{shape_err, Error, Result};
use crate::real::Real;
use crate::tape::{GradTape, Var};
use crate::tensor::Tensor;

pub const BLANK: usize = 0;

/// Largest number of paths [`ctc_brute_force`] will enumerate.
pub const BRUTE_FORCE_LIMIT: u128 = 10_000_000;

/// Class indices of a target string; never contains the blank.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct LabelSequence {
    indices: Vec<usize>,
}

impl LabelSequence {
    pub fn new(indices: Vec<usize>) -> Result<Self> {
        if indices.contains(&BLANK) {
            return Err(Error::Config("label sequences cannot contain the blank".into()));
        }
        Ok(LabelSequence { indices })
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Fewest frames that can emit this label: one per symbol plus a blank
    /// between each pair of equal neighbours.
    pub fn min_frames(&self) -> usize {
        self.indices.len() + self.indices.windows(2).filter(|w| w[0] == w[1]).count()
    }
}

/// Ordered symbol set; symbol `i` maps to class `i + 1`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Charset {
    symbols: Vec<char>,
    lookup: HashMap<char, usize>,
    fold_case: bool,
}

impl Charset {
    /// Symbols must be unique. With `fold_case`, symbols and inputs are
    /// lowercased before lookup.
    pub fn new(symbols: &str, fold_case: bool) -> Result<Self> {
        let mut out = Vec::new();
        let mut lookup = HashMap::new();
        for ch in symbols.chars() {
            let ch = if fold_case { fold(ch) } else { ch };
            if lookup.contains_key(&ch) {
                if fold_case {
                    continue;
                }
                return Err(Error::Config(format!("duplicate charset symbol {ch:?}")));
            }
            lookup.insert(ch, out.len() + 1);
            out.push(ch);
        }
        if out.is_empty() {
            return Err(Error::Config("empty charset".into()));
        }
        Ok(Charset {
            symbols: out,
            lookup,
            fold_case,
        })
    }

    pub fn digits() -> Self {
        Self::new("0123456789", false).expect("valid charset")
    }

    pub fn alphanumeric() -> Self {
        Self::new(
            "0123456789ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz",
            false,
        )
        .expect("valid charset")
    }

    /// Number of symbols, excluding the blank.
    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    /// Output classes including the blank.
    pub fn classes(&self) -> usize {
        self.symbols.len() + 1
    }

    pub fn fold_case(&self) -> bool {
        self.fold_case
    }

    pub fn symbols(&self) -> String {
        self.symbols.iter().collect()
    }

    pub fn encode(&self, text: &str) -> Result<LabelSequence> {
        let indices = text
            .chars()
            .map(|ch| {
                let key = if self.fold_case { fold(ch) } else { ch };
                self.lookup.get(&key).copied().ok_or(Error::Charset(ch))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(LabelSequence { indices })
    }

    pub fn decode(&self, label: &LabelSequence) -> String {
        label
            .indices
            .iter()
            .map(|&i| self.symbols.get(i - 1).copied().unwrap_or('?'))
            .collect()
    }
}

fn fold(ch: char) -> char {
    ch.to_lowercase().next().unwrap_or(ch)
}

fn log_sum_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Row-wise log-softmax of `[T, C]` scores, in `f64`.
fn log_softmax<T: Real>(logits: &[T], classes: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(classes) {
        let m = row.iter().fold(f64::NEG_INFINITY, |a, v| a.max(v.as_f64()));
        let s: f64 = row.iter().map(|v| (v.as_f64() - m).exp()).sum();
        let lse = m + s.ln();
        out.extend(row.iter().map(|v| v.as_f64() - lse));
    }
    out
}

fn check_logits<T: Real>(logits: &Tensor<T>, label: &LabelSequence) -> Result<(usize, usize)> {
    let (t, c) = logits.dims2()?;
    if t == 0 || c < 2 {
        return Err(shape_err("ctc", format!("logits {:?}", logits.shape())));
    }
    if let Some(&bad) = label.indices.iter().find(|&&i| i >= c) {
        return Err(shape_err("ctc", format!("label class {bad} with {c} output classes")));
    }
    if !logits.all_finite() {
        return Err(Error::NonFinite("ctc logits"));
    }
    let needed = label.min_frames();
    if needed > t {
        return Err(Error::NoAlignment {
            label_len: label.len(),
            needed,
            frames: t,
        });
    }
    Ok((t, c))
}

/// Negative log-likelihood and its gradient with respect to the logits.
fn loss_and_grad<T: Real>(
    logits: &Tensor<T>,
    label: &LabelSequence,
    want_grad: bool,
) -> Result<(f64, Vec<f64>)> {
    let (steps, classes) = check_logits(logits, label)?;
    let lp = log_softmax(logits.data(), classes);
    // Extended label: blanks around and between symbols.
    let mut ext = vec![BLANK; 2 * label.len() + 1];
    for (i, &k) in label.indices.iter().enumerate() {
        ext[2 * i + 1] = k;
    }
    let s_len = ext.len();
    let skip = |s: usize| s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2];
    let ninf = f64::NEG_INFINITY;

    let mut alpha = vec![ninf; steps * s_len];
    alpha[0] = lp[ext[0]];
    if s_len > 1 {
        alpha[1] = lp[ext[1]];
    }
    for t in 1..steps {
        for s in 0..s_len {
            let prev = &alpha[(t - 1) * s_len..t * s_len];
            let mut a = prev[s];
            if s >= 1 {
                a = log_sum_exp(a, prev[s - 1]);
            }
            if skip(s) {
                a = log_sum_exp(a, prev[s - 2]);
            }
            alpha[t * s_len + s] = if a == ninf { ninf } else { a + lp[t * classes + ext[s]] };
        }
    }
    let last = &alpha[(steps - 1) * s_len..];
    let log_p = if s_len > 1 {
        log_sum_exp(last[s_len - 1], last[s_len - 2])
    } else {
        last[0]
    };
    if log_p == ninf {
        return Err(Error::NoAlignment {
            label_len: label.len(),
            needed: label.min_frames(),
            frames: steps,
        });
    }
    if !want_grad {
        return Ok((-log_p, Vec::new()));
    }

    let mut beta = vec![ninf; steps * s_len];
    let tl = steps - 1;
    beta[tl * s_len + s_len - 1] = lp[tl * classes + ext[s_len - 1]];
    if s_len > 1 {
        beta[tl * s_len + s_len - 2] = lp[tl * classes + ext[s_len - 2]];
    }
    for t in (0..tl).rev() {
        for s in 0..s_len {
            let next = &beta[(t + 1) * s_len..(t + 2) * s_len];
            let mut b = next[s];
            if s + 1 < s_len {
                b = log_sum_exp(b, next[s + 1]);
            }
            if s + 2 < s_len && skip(s + 2) {
                b = log_sum_exp(b, next[s + 2]);
            }
            beta[t * s_len + s] = if b == ninf { ninf } else { b + lp[t * classes + ext[s]] };
        }
    }

    let mut grad = vec![0.0; steps * classes];
    let mut occupancy = vec![ninf; classes];
    for t in 0..steps {
        occupancy.iter_mut().for_each(|v| *v = ninf);
        for s in 0..s_len {
            let g = alpha[t * s_len + s] + beta[t * s_len + s] - lp[t * classes + ext[s]];
            occupancy[ext[s]] = log_sum_exp(occupancy[ext[s]], g);
        }
        for k in 0..classes {
            let p = lp[t * classes + k].exp();
            grad[t * classes + k] = p - (occupancy[k] - log_p).exp();
        }
    }
    Ok((-log_p, grad))
}

/// `−log P(label | softmax(logits))` for logits `[T, K+1]`.
pub fn ctc_loss<T: Real>(logits: &Tensor<T>, label: &LabelSequence) -> Result<T> {
    Ok(T::c(loss_and_grad(logits, label, false)?.0))
}

/// Loss together with its gradient with respect to the logits.
pub fn ctc_loss_with_grad<T: Real>(
    logits: &Tensor<T>,
    label: &LabelSequence,
) -> Result<(T, Tensor<T>)> {
    let (loss, grad) = loss_and_grad(logits, label, true)?;
    let grad = Tensor::from_data(logits.shape(), grad.into_iter().map(T::c).collect())?;
    Ok((T::c(loss), grad))
}

/// Collapse a frame-level path: merge runs, then drop blanks.
pub fn collapse_path(path: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &k in path {
        if Some(k) != prev && k != BLANK {
            out.push(k);
        }
        prev = Some(k);
    }
    out
}

/// Reference loss by enumerating every length-T path and summing the
/// probabilities of those that collapse to `label`.
pub fn ctc_brute_force<T: Real>(logits: &Tensor<T>, label: &LabelSequence) -> Result<f64> {
    let (steps, classes) = logits.dims2()?;
    let paths = (classes as u128)
        .checked_pow(steps as u32)
        .unwrap_or(u128::MAX);
    if paths > BRUTE_FORCE_LIMIT {
        return Err(Error::TooLarge {
            paths,
            limit: BRUTE_FORCE_LIMIT,
        });
    }
    let probs: Vec<f64> = log_softmax(logits.data(), classes)
        .into_iter()
        .map(f64::exp)
        .collect();
    let mut path = vec![0usize; steps];
    let mut total = 0.0;
    loop {
        if collapse_path(&path) == label.indices {
            total += path
                .iter()
                .enumerate()
                .map(|(t, &k)| probs[t * classes + k])
                .product::<f64>();
        }
        // odometer increment
        let mut t = steps;
        loop {
            if t == 0 {
                return if total > 0.0 {
                    Ok(-total.ln())
                } else {
                    Err(Error::NoAlignment {
                        label_len: label.len(),
                        needed: label.min_frames(),
                        frames: steps,
                    })
                };
            }
            t -= 1;
            path[t] += 1;
            if path[t] < classes {
                break;
            }
            path[t] = 0;
        }
    }
}

/// Size limits of the random instances drawn by [`oracle_sweep`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OracleLimits {
    pub max_frames: usize,
    /// Largest number of label symbols (classes excluding the blank).
    pub max_symbols: usize,
    pub max_label: usize,
}

impl Default for OracleLimits {
    fn default() -> Self {
        OracleLimits { max_frames: 8, max_symbols: 4, max_label: 4 }
    }
}

/// Worst disagreement between [`ctc_loss`] and [`ctc_brute_force`].
#[derive(Clone, Debug, PartialEq)]
pub struct OracleReport {
    pub instances: usize,
    pub max_abs_diff: f64,
    /// `(frames, symbols, label)` of the worst instance.
    pub worst: (usize, usize, Vec<usize>),
}

/// Compare the forward-backward loss with path enumeration on `instances`
/// random alignable problems in `f64`. Logits are uniform in `[-3, 3]`.
pub fn oracle_sweep(instances: usize, seed: u64, limits: OracleLimits) -> Result<OracleReport> {
    use rand::{Rng, SeedableRng};
    if limits.max_frames == 0 || limits.max_symbols == 0 {
        return Err(Error::Config("oracle limits must allow at least one frame and symbol".into()));
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut report = OracleReport { instances: 0, max_abs_diff: 0.0, worst: (0, 0, Vec::new()) };
    while report.instances < instances {
        let t = rng.gen_range(1..=limits.max_frames);
        let k = rng.gen_range(1..=limits.max_symbols);
        let len = rng.gen_range(0..=limits.max_label);
        let label = LabelSequence::new((0..len).map(|_| rng.gen_range(1..=k)).collect())?;
        if label.min_frames() > t {
            continue;
        }
        let logits = Tensor::from_data(
            &[t, k + 1],
            (0..t * (k + 1)).map(|_| rng.gen_range(-3.0..3.0)).collect(),
        )?;
        let diff = (ctc_loss(&logits, &label)? - ctc_brute_force(&logits, &label)?).abs();
        if !(diff <= report.max_abs_diff) {
            report.max_abs_diff = diff;
            report.worst = (t, k, label.indices.clone());
        }
        report.instances += 1;
    }
    Ok(report)
}

/// Best-path decoding: per-frame argmax (lowest index on ties), merge runs,
/// drop blanks.
pub fn greedy_decode<T: Real>(logits: &Tensor<T>) -> Result<LabelSequence> {
    let (_, classes) = logits.dims2()?;
    let path: Vec<usize> = logits
        .data()
        .chunks(classes)
        .map(|row| {
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect();
    Ok(LabelSequence {
        indices: collapse_path(&path),
    })
}

/// Result of recording a batch CTC loss.
pub struct CtcBatch<T: Real> {
    /// Mean loss over alignable items; `None` when no item can be aligned.
    pub loss: Option<Var>,
    /// Per-item loss, `None` for skipped items.
    pub per_item: Vec<Option<T>>,
    /// Items whose label cannot be aligned to the available frames.
    pub skipped: usize,
}

/// Record the mean CTC loss over a batch of logits `[N, T, K+1]`. Items
/// without a valid alignment are skipped and counted.
pub fn ctc_loss_tape<T: Real>(
    tape: &mut GradTape<T>,
    logits: Var,
    labels: &[LabelSequence],
) -> Result<CtcBatch<T>> {
    let (n, steps, classes) = tape.value(logits).dims3()?;
    if labels.len() != n {
        return Err(shape_err("ctc", format!("{} labels for batch of {n}", labels.len())));
    }
    let mut per_item = Vec::with_capacity(n);
    let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(n);
    let mut total = 0.0;
    let mut valid = 0usize;
    for (i, label) in labels.iter().enumerate() {
        let item = tape.value(logits).index_axis0(i);
        match loss_and_grad(&item, label, tape.requires_grad(logits)) {
            Ok((l, g)) => {
                total += l;
                valid += 1;
                per_item.push(Some(T::c(l)));
                grads.push(Some(g));
            }
            Err(Error::NoAlignment { .. }) => {
                per_item.push(None);
                grads.push(None);
            }
            Err(e) => return Err(e),
        }
    }
    let skipped = n - valid;
    if valid == 0 {
        return Ok(CtcBatch {
            loss: None,
            per_item,
            skipped,
        });
    }
    let scale = 1.0 / valid as f64;
    let per = steps * classes;
    let loss = tape.record(Tensor::scalar(T::c(total * scale)), &[logits], move |_, g, gs| {
        if let Some(dl) = gs.slot(logits) {
            let k = g[0].as_f64() * scale;
            for (i, item) in grads.iter().enumerate() {
                if let Some(item) = item {
                    for (d, &v) in dl[i * per..(i + 1) * per].iter_mut().zip(item) {
                        *d += T::c(k * v);
                    }
                }
            }
        }
    });
    Ok(CtcBatch {
        loss: Some(loss),
        per_item,
        skipped,
    })
}
