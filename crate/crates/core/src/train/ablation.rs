//! Sweeps over deformable placements and architecture components, each row
//! trained and evaluated on the same synthetic data.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::panic::{catch_unwind, AssertUnwindSafe};

use super::{evaluate, train, TrainConfig, TrainOptions};
use crate::data::{synthesize, Dataset, DatasetSpec, Distortion, SyntheticSample};
use crate::error::Result;
use crate::model::{Model, ModelConfig};

/// One configuration of a sweep and its table label.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub location: String,
    pub config: ModelConfig,
}

fn set_label(set: &BTreeSet<usize>) -> String {
    let items: Vec<String> = set.iter().map(|i| i.to_string()).collect();
    format!("{{{}}}", items.join(","))
}

/// Seven placements of deformable layers, with residual blocks and
/// 200x64 input as in the full model.
pub fn placement_grid(base: &ModelConfig) -> Vec<AblationRow> {
    let sets: [&[usize]; 7] = [&[3], &[4], &[5], &[3, 4], &[4, 5], &[3, 5], &[3, 4, 5]];
    sets.iter()
        .map(|s| {
            let set: BTreeSet<usize> = s.iter().copied().collect();
            let mut config = base.clone();
            config.deformable_set = set.clone();
            config.use_residual = true;
            config.input_size = (200, 64);
            AblationRow {
                location: set_label(&set),
                config,
            }
        })
        .collect()
}

/// Six component combinations: baseline, deformable {4,5}, residual
/// blocks, 200x64 input, deformable + residual, and all three.
pub fn component_grid(base: &ModelConfig) -> Vec<AblationRow> {
    let rows = [
        ("baseline", false, false, false),
        ("dconv", true, false, false),
        ("resblock", false, true, false),
        ("larger_size", false, false, true),
        ("dconv+resblock", true, true, false),
        ("dconv+resblock+larger_size", true, true, true),
    ];
    rows.iter()
        .map(|&(name, dconv, res, larger)| {
            let mut config = base.clone();
            config.deformable_set = if dconv { [4, 5].into_iter().collect() } else { BTreeSet::new() };
            config.use_residual = res;
            config.input_size = if larger { (200, 64) } else { (100, 32) };
            AblationRow {
                location: name.to_string(),
                config,
            }
        })
        .collect()
}

/// Training and test sets shared by every row, rendered once.
pub struct AblationData {
    train: Vec<SyntheticSample>,
    test: Vec<SyntheticSample>,
    cache: HashMap<((usize, usize), usize, String, bool), (Dataset, Dataset)>,
}

impl AblationData {
    pub fn new(train: &DatasetSpec, test: &DatasetSpec) -> Result<Self> {
        Ok(AblationData {
            train: synthesize(train)?,
            test: synthesize(test)?,
            cache: HashMap::new(),
        })
    }

    fn sets(&mut self, cfg: &ModelConfig) -> Result<&(Dataset, Dataset)> {
        let key = (cfg.input_size, cfg.input_channels, cfg.charset.clone(), cfg.fold_case);
        if !self.cache.contains_key(&key) {
            let cs = cfg.charset()?;
            let tr = Dataset::from_samples(&self.train, cfg.input_size, cfg.input_channels, &cs)?;
            let te = Dataset::from_samples(&self.test, cfg.input_size, cfg.input_channels, &cs)?;
            self.cache.insert(key.clone(), (tr, te));
        }
        Ok(&self.cache[&key])
    }
}

/// Accuracies of one row, or the error that stopped it.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationResult {
    pub location: String,
    pub regular: f64,
    pub curved: f64,
    pub tilted: f64,
    pub overall: f64,
    pub final_loss: Option<f64>,
    pub error: Option<String>,
}

impl AblationResult {
    pub fn failed(&self) -> bool {
        self.error.is_some()
    }
}

fn run_row(row: &AblationRow, data: &mut AblationData, cfg: &TrainConfig) -> Result<AblationResult> {
    let (train_set, test_set) = data.sets(&row.config)?;
    let mut model = Model::<f32>::new(row.config.clone())?;
    let report = train(&mut model, train_set, cfg, &TrainOptions::default())?;
    let eval = evaluate(&mut model, test_set, cfg.batch_size.max(32))?;
    let acc = |d| eval.accuracy(d).unwrap_or(0.0);
    Ok(AblationResult {
        location: row.location.clone(),
        regular: acc(Distortion::Regular),
        curved: acc(Distortion::Curved),
        tilted: acc(Distortion::Tilted),
        overall: eval.total.accuracy(),
        final_loss: report.tail_mean(20),
        error: None,
    })
}

/// Train and evaluate every row with the same seeds. A failing row is
/// recorded and the sweep continues.
pub fn run_ablation(
    rows: &[AblationRow],
    data: &mut AblationData,
    cfg: &TrainConfig,
    verbose: bool,
) -> Vec<AblationResult> {
    rows.iter()
        .map(|row| {
            let outcome = catch_unwind(AssertUnwindSafe(|| run_row(row, data, cfg)));
            let result = match outcome {
                Ok(Ok(r)) => r,
                Ok(Err(e)) => failed_row(row, e.to_string()),
                Err(panic) => failed_row(row, panic_message(&panic)),
            };
            if verbose {
                match &result.error {
                    None => eprintln!(
                        "{:<28} regular {:.3} curved {:.3} tilted {:.3} overall {:.3}",
                        result.location, result.regular, result.curved, result.tilted, result.overall
                    ),
                    Some(e) => eprintln!("{:<28} failed: {e}", result.location),
                }
            }
            result
        })
        .collect()
}

fn failed_row(row: &AblationRow, error: String) -> AblationResult {
    AblationResult {
        location: row.location.clone(),
        regular: f64::NAN,
        curved: f64::NAN,
        tilted: f64::NAN,
        overall: f64::NAN,
        final_loss: None,
        error: Some(error),
    }
}

fn panic_message(p: &Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<String>()
        .cloned()
        .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
        .unwrap_or_else(|| "panic".into())
}

/// `location,regular,curved,tilted,overall`, accuracies in percent. Failed
/// rows carry `NaN`.
pub fn ablation_csv(results: &[AblationResult]) -> String {
    let mut s = String::from("location,regular,curved,tilted,overall\n");
    for r in results {
        let loc = if r.location.contains(',') {
            format!("\"{}\"", r.location)
        } else {
            r.location.clone()
        };
        let pct = |v: f64| if v.is_nan() { "NaN".to_string() } else { format!("{:.1}", 100.0 * v) };
        let _ = writeln!(
            s,
            "{loc},{},{},{},{}",
            pct(r.regular),
            pct(r.curved),
            pct(r.tilted),
            pct(r.overall)
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grids_mirror_the_tables() {
        let base = ModelConfig::default().with_toy_widths();
        let p = placement_grid(&base);
        let labels: Vec<&str> = p.iter().map(|r| r.location.as_str()).collect();
        assert_eq!(labels, ["{3}", "{4}", "{5}", "{3,4}", "{4,5}", "{3,5}", "{3,4,5}"]);
        assert!(p.iter().all(|r| r.config.use_residual && r.config.input_size == (200, 64)));
        let c = component_grid(&base);
        assert_eq!(c.len(), 6);
        assert_eq!(c[0].config.input_size, (100, 32));
        assert!(c[0].config.deformable_set.is_empty() && !c[0].config.use_residual);
        assert_eq!(c[5].config.deformable_set, [4, 5].into_iter().collect());
        for r in p.iter().chain(&c) {
            r.config.validate().unwrap();
        }
    }

    fn tiny_data() -> AblationData {
        let spec = |n, seed| DatasetSpec {
            canvas: (32, 16),
            length: (1, 2),
            charset: "012".into(),
            ..DatasetSpec::balanced(n, seed)
        };
        AblationData::new(&spec(6, 1), &spec(3, 2)).unwrap()
    }

    fn tiny_row(name: &str, deform: &[usize]) -> AblationRow {
        let mut config = ModelConfig::tiny();
        config.deformable_set = deform.iter().copied().collect();
        AblationRow {
            location: name.into(),
            config,
        }
    }

    #[test]
    fn rows_are_order_independent_and_failures_isolated() {
        let cfg = TrainConfig {
            steps: 3,
            batch_size: 4,
            learning_rate: 0.01,
            ..TrainConfig::default()
        };
        let mut bad = tiny_row("bad", &[]);
        bad.config.charset = "ab".into();
        let rows = vec![tiny_row("a", &[3]), bad, tiny_row("b", &[])];
        let mut data = tiny_data();
        let fwd = run_ablation(&rows, &mut data, &cfg, false);
        assert!(fwd[1].failed() && !fwd[0].failed() && !fwd[2].failed());
        let rev: Vec<AblationRow> = rows.iter().rev().cloned().collect();
        let back = run_ablation(&rev, &mut data, &cfg, false);
        assert_eq!(fwd[0], back[2]);
        assert_eq!(fwd[2], back[0]);
        let csv = ablation_csv(&fwd);
        assert!(csv.starts_with("location,regular,curved,tilted,overall\na,"));
        assert!(csv.contains("bad,NaN,NaN,NaN,NaN"));
        assert!(run_ablation(&[], &mut data, &cfg, false).is_empty());
        assert_eq!(ablation_csv(&[]), "location,regular,curved,tilted,overall\n");
    }
}
