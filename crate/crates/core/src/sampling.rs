//! Label maps and class-balanced embedding sampling.
//!
//! Representations from the projectors live on a coarse `[h, w]` grid. Labels
//! are brought to that grid by nearest-neighbour subsampling, a per-batch
//! budget `n` is derived from the rarest class, and up to `n` positions are
//! drawn without replacement for every (instance, class) pair.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{lit, Real, Tensor};

/// Label value excluded from every loss and metric.
pub const IGNORE: u8 = 255;

/// Default cap on the per-class sample budget.
pub const DEFAULT_N_MAX: usize = 256;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(Error::shape(format!(
                "label map {height}x{width} with {} values",
                data.len()
            )));
        }
        Ok(LabelMap {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, class: u8) -> Self {
        LabelMap {
            height,
            width,
            data: vec![class; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    /// Errors if any non-ignore value is not below `num_classes`.
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        match self
            .data
            .iter()
            .find(|&&v| v != IGNORE && v as usize >= num_classes)
        {
            Some(v) => Err(Error::Argument(format!(
                "label {v} outside [0, {num_classes})"
            ))),
            None => Ok(()),
        }
    }

    pub fn valid_pixels(&self) -> usize {
        self.data.iter().filter(|&&v| v != IGNORE).count()
    }

    /// Mirrors the map left-to-right.
    pub fn flipped(&self) -> LabelMap {
        let mut data = Vec::with_capacity(self.data.len());
        for row in self.data.chunks_exact(self.width) {
            data.extend(row.iter().rev());
        }
        LabelMap { data, ..*self }
    }

    /// `[h, w, 1]` tensor of class ids, the on-disk label encoding.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        let data = self.data.iter().map(|&v| lit(v as f64)).collect();
        Tensor::new(&[self.height, self.width, 1], data).expect("dims match data")
    }

    pub fn from_tensor<T: Real>(t: &Tensor<T>) -> Result<Self> {
        let (h, w) = match t.dims() {
            &[h, w] | &[h, w, 1] => (h, w),
            d => return Err(Error::shape(format!("label tensor dims {d:?}"))),
        };
        let data = t
            .data()
            .iter()
            .map(|v| {
                let f = v.to_f64().unwrap_or(f64::NAN);
                if f.fract() == 0.0 && (0.0..=255.0).contains(&f) {
                    Ok(f as u8)
                } else {
                    Err(Error::Argument(format!("non-integral label value {f}")))
                }
            })
            .collect::<Result<_>>()?;
        LabelMap::new(h, w, data)
    }
}

/// Nearest-neighbour source index for output coordinate `i` when mapping `src` cells onto `dst`.
#[inline]
pub fn nearest_source(i: usize, src: usize, dst: usize) -> usize {
    // floor((i + 0.5) * src / dst) in exact integer arithmetic
    ((2 * i + 1) * src) / (2 * dst)
}

pub fn downscale_labels(label: &LabelMap, h: usize, w: usize) -> Result<LabelMap> {
    if h == 0 || w == 0 || h > label.height || w > label.width {
        return Err(Error::shape(format!(
            "cannot downscale {}x{} labels to {h}x{w}",
            label.height, label.width
        )));
    }
    let mut data = Vec::with_capacity(h * w);
    for y in 0..h {
        let sy = nearest_source(y, label.height, h);
        for x in 0..w {
            data.push(label.get(sy, nearest_source(x, label.width, w)));
        }
    }
    LabelMap::new(h, w, data)
}

/// Per-class pixel totals over a batch, ignore pixels excluded.
pub fn class_counts(labels: &[LabelMap]) -> BTreeMap<u8, usize> {
    let mut counts = BTreeMap::new();
    for l in labels {
        for &v in &l.data {
            if v != IGNORE {
                *counts.entry(v).or_insert(0) += 1;
            }
        }
    }
    counts
}

/// Per-class sample budget: the batch count of the rarest present class, capped at `n_max`.
pub fn compute_n(labels: &[LabelMap], n_max: usize) -> Result<usize> {
    if n_max == 0 {
        return Err(Error::Argument("n_max must be positive".into()));
    }
    class_counts(labels)
        .values()
        .copied()
        .min()
        .map(|n| n.min(n_max))
        .ok_or_else(|| Error::EmptyBatch("every label in the batch is ignored".into()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Modality {
    Visible,
    Auxiliary,
}

/// Where a sampled embedding came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SamplePoint {
    pub batch: usize,
    /// Row-major position `y * w + x` within the instance.
    pub position: usize,
    pub label: u8,
}

impl SamplePoint {
    /// Row of the point in a `[B·h·w, d]` flattening of the representations.
    pub fn row(&self, positions_per_instance: usize) -> usize {
        self.batch * positions_per_instance + self.position
    }
}

/// Draws up to `n` positions per (instance, class present in that instance), without replacement.
pub fn sample_positions(labels: &[LabelMap], n: usize, seed: u64) -> Result<Vec<SamplePoint>> {
    if n == 0 {
        return Err(Error::Argument("per-class sample count must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::new();
    for (batch, l) in labels.iter().enumerate() {
        let mut by_class: BTreeMap<u8, Vec<usize>> = BTreeMap::new();
        for (pos, &v) in l.data.iter().enumerate() {
            if v != IGNORE {
                by_class.entry(v).or_default().push(pos);
            }
        }
        for (label, positions) in by_class {
            let take = n.min(positions.len());
            for i in index::sample(&mut rng, positions.len(), take) {
                points.push(SamplePoint {
                    batch,
                    position: positions[i],
                    label,
                });
            }
        }
    }
    Ok(points)
}

/// Labelled embeddings drawn from one modality.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet<T> {
    pub embeddings: Tensor<T>,
    pub labels: Vec<u8>,
    pub modality: Modality,
    pub sources: Vec<SamplePoint>,
}

impl<T: Real> EmbeddingSet<T> {
    /// Builds a set from explicit rows; sources are synthesised as `(0, row)`.
    pub fn from_rows(embeddings: Tensor<T>, labels: Vec<u8>, modality: Modality) -> Result<Self> {
        let (n, _) = embeddings.as_matrix("embedding set")?;
        if labels.len() != n {
            return Err(Error::shape(format!("{n} embeddings but {} labels", labels.len())));
        }
        if labels.contains(&IGNORE) {
            return Err(Error::Argument("embedding carries the ignore label".into()));
        }
        let sources = labels
            .iter()
            .enumerate()
            .map(|(position, &label)| SamplePoint {
                batch: 0,
                position,
                label,
            })
            .collect();
        Ok(EmbeddingSet {
            embeddings,
            labels,
            modality,
            sources,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.dims()[1]
    }

    pub fn row(&self, i: usize) -> &[T] {
        let d = self.dim();
        &self.embeddings.data()[i * d..(i + 1) * d]
    }

    /// Concatenates two sets; the result keeps the modality of `self`.
    pub fn concat(&self, other: &EmbeddingSet<T>) -> Result<EmbeddingSet<T>> {
        if self.dim() != other.dim() {
            return Err(Error::shape("embedding dims differ"));
        }
        let mut data = self.embeddings.data().to_vec();
        data.extend_from_slice(other.embeddings.data());
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        let mut sources = self.sources.clone();
        sources.extend_from_slice(&other.sources);
        Ok(EmbeddingSet {
            embeddings: Tensor::new(&[labels.len(), self.dim()], data)?,
            labels,
            modality: self.modality,
            sources,
        })
    }
}

/// Scales each row of `[N, d]` data to unit length in place.
pub(crate) fn normalize_rows<T: Real>(data: &mut [T], d: usize) {
    let floor: T = lit(1e-12);
    for row in data.chunks_exact_mut(d) {
        let norm = row.iter().map(|v| *v * *v).sum::<T>().sqrt().max(floor);
        row.iter_mut().for_each(|v| *v = *v / norm);
    }
}

/// Samples a class-balanced embedding set from `[B, h, w, d]` representations.
pub fn sample_embeddings<T: Real>(
    reps: &Tensor<T>,
    labels: &[LabelMap],
    n: usize,
    modality: Modality,
    seed: u64,
    normalize: bool,
) -> Result<EmbeddingSet<T>> {
    let (batch, h, w, d) = match reps.dims() {
        &[b, h, w, d] => (b, h, w, d),
        dims => return Err(Error::shape(format!("representations must be [B,h,w,d], got {dims:?}"))),
    };
    if labels.len() != batch || labels.iter().any(|l| l.height != h || l.width != w) {
        return Err(Error::shape(format!(
            "labels are not aligned with representations of dims {:?}",
            reps.dims()
        )));
    }
    let points = sample_positions(labels, n, seed)?;
    if points.is_empty() {
        return Err(Error::EmptyBatch("no labelled positions to sample".into()));
    }
    let mut data = Vec::with_capacity(points.len() * d);
    for p in &points {
        let r = p.row(h * w);
        data.extend_from_slice(&reps.data()[r * d..(r + 1) * d]);
    }
    if normalize {
        normalize_rows(&mut data, d);
    }
    Ok(EmbeddingSet {
        embeddings: Tensor::new(&[points.len(), d], data)?,
        labels: points.iter().map(|p| p.label).collect(),
        modality,
        sources: points,
    })
}
