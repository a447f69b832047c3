use std::collections::BTreeMap;
use std::fmt::{self, Write as _};

use crate::ctc::greedy_decode;
use crate::data::{Dataset, Distortion};
use crate::error::Result;
use crate::model::Model;
use crate::real::Real;

/// Edit distance with unit insertion, deletion and substitution costs.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + (ca != cb) as usize;
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// `levenshtein / max(len)`, 0 when both strings are empty.
pub fn normalized_edit_distance(pred: &str, truth: &str) -> f64 {
    let n = pred.chars().count().max(truth.chars().count());
    if n == 0 {
        0.0
    } else {
        levenshtein(pred, truth) as f64 / n as f64
    }
}

/// Counts for one group of samples.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TagStats {
    pub count: usize,
    pub correct: usize,
    pub edit_sum: f64,
}

impl TagStats {
    fn add(&mut self, pred: &str, truth: &str) {
        self.count += 1;
        self.correct += (pred == truth) as usize;
        self.edit_sum += normalized_edit_distance(pred, truth);
    }

    /// Exact-match rate; 0 for an empty group.
    pub fn accuracy(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.correct as f64 / self.count as f64
        }
    }

    pub fn mean_edit(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.edit_sum / self.count as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub truth: String,
    pub predicted: String,
    pub tag: Distortion,
}

/// Accuracy and edit distance overall and per distortion tag.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub total: TagStats,
    pub by_tag: BTreeMap<Distortion, TagStats>,
    pub predictions: Vec<Prediction>,
}

impl EvalReport {
    pub fn from_predictions(predictions: Vec<Prediction>) -> Self {
        let mut r = EvalReport::default();
        for p in &predictions {
            r.total.add(&p.predicted, &p.truth);
            r.by_tag.entry(p.tag).or_default().add(&p.predicted, &p.truth);
        }
        r.predictions = predictions;
        r
    }

    /// Accuracy on one tag; `None` if the set has no such samples.
    pub fn accuracy(&self, tag: Distortion) -> Option<f64> {
        self.by_tag.get(&tag).map(TagStats::accuracy)
    }

    /// Pooled accuracy over several tags.
    pub fn pooled_accuracy(&self, tags: &[Distortion]) -> f64 {
        let (mut n, mut c) = (0, 0);
        for t in tags {
            if let Some(s) = self.by_tag.get(t) {
                n += s.count;
                c += s.correct;
            }
        }
        if n == 0 {
            0.0
        } else {
            c as f64 / n as f64
        }
    }

    /// `index,tag,truth,predicted,edit_distance`, one row per sample.
    pub fn predictions_csv(&self) -> String {
        let field = |v: &str| {
            if v.contains([',', '"', '\n']) {
                format!("\"{}\"", v.replace('"', "\"\""))
            } else {
                v.to_string()
            }
        };
        let mut s = String::from("index,tag,truth,predicted,edit_distance\n");
        for (i, p) in self.predictions.iter().enumerate() {
            let _ = writeln!(
                s,
                "{i},{},{},{},{}",
                p.tag.tag(),
                field(&p.truth),
                field(&p.predicted),
                levenshtein(&p.predicted, &p.truth)
            );
        }
        s
    }

    /// `group,count,accuracy,mean_edit_distance` rows, tags first.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("group,count,accuracy,mean_edit_distance\n");
        let rows = self
            .by_tag
            .iter()
            .map(|(t, st)| (t.tag(), st))
            .chain(std::iter::once(("overall", &self.total)));
        for (name, st) in rows {
            let _ = writeln!(s, "{name},{},{:.6},{:.6}", st.count, st.accuracy(), st.mean_edit());
        }
        s
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (t, st) in &self.by_tag {
            writeln!(
                f,
                "{:<8} n={:<5} accuracy {:6.2}%  edit {:.4}",
                t.tag(),
                st.count,
                100.0 * st.accuracy(),
                st.mean_edit()
            )?;
        }
        writeln!(
            f,
            "{:<8} n={:<5} accuracy {:6.2}%  edit {:.4}",
            "overall",
            self.total.count,
            100.0 * self.total.accuracy(),
            self.total.mean_edit()
        )?;
        for p in self.predictions.iter().filter(|p| p.predicted != p.truth).take(5) {
            writeln!(f, "  [{}] {:?} -> {:?}", p.tag, p.truth, p.predicted)?;
        }
        Ok(())
    }
}

/// Greedy-decode every item in evaluation mode and score it.
pub fn evaluate<T: Real>(model: &mut Model<T>, data: &Dataset, batch: usize) -> Result<EvalReport> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut predictions = Vec::with_capacity(data.len());
    for chunk in idx.chunks(batch.max(1)) {
        let (images, _) = data.batch(chunk)?;
        let logits = model.logits(&images.cast::<T>(), crate::nn::Mode::Eval)?;
        for (k, &i) in chunk.iter().enumerate() {
            let label = greedy_decode(&logits.index_axis0(k))?;
            predictions.push(Prediction {
                truth: data.items[i].text.clone(),
                predicted: model.charset().decode(&label),
                tag: data.items[i].tag,
            });
        }
    }
    Ok(EvalReport::from_predictions(predictions))
}
