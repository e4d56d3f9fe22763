//! Segmentation and embedding-space evaluation.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::sampling::{normalize_rows, LabelMap, IGNORE};
use crate::tensor::{matmul_into, Real};

/// Rows are ground truth, columns are predictions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    /// Accumulates one image; ignore pixels in `truth` are skipped.
    pub fn add(&mut self, truth: &LabelMap, pred: &[u8]) -> Result<()> {
        if pred.len() != truth.data().len() {
            return Err(Error::shape(format!(
                "{} predictions for {} labels",
                pred.len(),
                truth.data().len()
            )));
        }
        for (&t, &p) in truth.data().iter().zip(pred) {
            if t == IGNORE {
                continue;
            }
            let (t, p) = (t as usize, p as usize);
            if t >= self.classes || p >= self.classes {
                return Err(Error::Argument(format!(
                    "class pair ({t}, {p}) outside [0, {})",
                    self.classes
                )));
            }
            self.counts[t * self.classes + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::shape("confusion matrices of different sizes"));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// IoU per class, `None` where the union is empty.
    pub fn iou_per_class(&self) -> Vec<Option<f64>> {
        let c = self.classes;
        (0..c)
            .map(|k| {
                let tp = self.get(k, k);
                let row: u64 = (0..c).map(|j| self.get(k, j)).sum();
                let col: u64 = (0..c).map(|i| self.get(i, k)).sum();
                let union = row + col - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    /// Mean IoU over classes with a non-empty union.
    pub fn miou(&self) -> Result<f64> {
        if self.total() == 0 {
            return Err(Error::EmptyInput("confusion matrix has no pixels".into()));
        }
        let ious: Vec<f64> = self.iou_per_class().into_iter().flatten().collect();
        Ok(ious.iter().sum::<f64>() / ious.len() as f64)
    }
}

pub fn miou(cm: &ConfusionMatrix) -> Result<f64> {
    cm.miou()
}

/// Mean silhouette coefficient under cosine distance, clusters given by `labels`.
///
/// Points alone in their class score 0. Needs at least two classes.
pub fn separability<T: Real>(embeddings: &[T], labels: &[u8], d: usize) -> Result<f64> {
    let n = labels.len();
    if d == 0 || embeddings.len() != n * d {
        return Err(Error::shape(format!(
            "{} values for {n} embeddings of dim {d}",
            embeddings.len()
        )));
    }
    let mut members: BTreeMap<u8, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        members.entry(l).or_default().push(i);
    }
    if members.len() < 2 {
        return Err(Error::UndefinedMetric(format!(
            "silhouette needs at least 2 classes, got {}",
            members.len()
        )));
    }
    let mut unit: Vec<f64> = embeddings.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect();
    normalize_rows(&mut unit, d);
    let mut sim = vec![0.0; n * n];
    matmul_into(n, d, n, &unit, false, &unit, true, &mut sim, false);

    let classes: Vec<(u8, &Vec<usize>)> = members.iter().map(|(k, v)| (*k, v)).collect();
    let mut total = 0.0;
    for i in 0..n {
        let row = &sim[i * n..(i + 1) * n];
        let mut a = None;
        let mut b = f64::INFINITY;
        for (class, idx) in &classes {
            let dist: f64 = idx.iter().map(|&j| 1.0 - row[j]).sum();
            if *class == labels[i] {
                if idx.len() > 1 {
                    // self-distance is ~0 but not exactly, remove it explicitly
                    a = Some((dist - (1.0 - row[i])) / (idx.len() - 1) as f64);
                }
            } else {
                b = b.min(dist / idx.len() as f64);
            }
        }
        if let Some(a) = a {
            let m = a.max(b);
            if m > 0.0 {
                total += (b - a) / m;
            }
        }
    }
    Ok(total / n as f64)
}
