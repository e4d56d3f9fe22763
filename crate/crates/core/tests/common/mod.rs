//! Brute-force oracles shared by the loss tests and the acceptance target.
#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use smmcl::contrast::ContrastConfig;
use smmcl::sampling::{EmbeddingSet, Modality, IGNORE};
use smmcl::Tensor;

pub const TAUS: [f64; 3] = [0.1, 0.5, 1.0];

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// Naive InfoNCE straight from the definition, no max subtraction.
pub fn oracle_info_nce(anchor: &[f64], pos: &[f64], negs: &[&[f64]], tau: f64) -> f64 {
    let p = (dot(anchor, pos) / tau).exp();
    let mut denom = p;
    for n in negs {
        denom += (dot(anchor, n) / tau).exp();
    }
    -(p / denom).ln()
}

/// Mean over anchors with at least one positive of the mean InfoNCE over their positives.
pub fn oracle_contrast(anchors: &[Vec<f64>], al: &[u8], cands: &[Vec<f64>], cl: &[u8], tau: f64, same_set: bool) -> f64 {
    let mut total = 0.0;
    let mut valid = 0;
    for i in 0..anchors.len() {
        let mut positives = Vec::new();
        let mut negatives: Vec<&[f64]> = Vec::new();
        for j in 0..cands.len() {
            if same_set && i == j {
                continue;
            }
            if cl[j] == al[i] {
                positives.push(j);
            } else {
                negatives.push(&cands[j]);
            }
        }
        if positives.is_empty() {
            continue;
        }
        let mut s = 0.0;
        for &p in &positives {
            s += oracle_info_nce(&anchors[i], &cands[p], &negatives, tau);
        }
        total += s / positives.len() as f64;
        valid += 1;
    }
    if valid == 0 {
        0.0
    } else {
        total / valid as f64
    }
}

pub fn oracle_ce(logits: &[f64], labels: &[u8], c: usize) -> f64 {
    let mut total = 0.0;
    let mut count = 0;
    for (p, &y) in labels.iter().enumerate() {
        if y == IGNORE {
            continue;
        }
        let row = &logits[p * c..(p + 1) * c];
        let mut z = 0.0;
        for v in row {
            z += v.exp();
        }
        total += -(row[y as usize].exp() / z).ln();
        count += 1;
    }
    total / count as f64
}

pub struct Instance {
    pub v: Vec<Vec<f64>>,
    pub vl: Vec<u8>,
    pub a: Vec<Vec<f64>>,
    pub al: Vec<u8>,
    pub tau: f64,
}

pub fn instance(rng: &mut ChaCha8Rng) -> Instance {
    let d = rng.random_range(1..=8);
    let classes = rng.random_range(2..=4u8);
    let (nv, na) = (rng.random_range(2..=32), rng.random_range(2..=32));
    let mut rows = |n: usize| -> (Vec<Vec<f64>>, Vec<u8>) {
        let e = (0..n).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let l = (0..n).map(|_| rng.random_range(0..classes)).collect();
        (e, l)
    };
    let (v, vl) = rows(nv);
    let (a, al) = rows(na);
    let tau = TAUS[rng.random_range(0..3)];
    Instance { v, vl, a, al, tau }
}

pub fn set(rows: &[Vec<f64>], labels: &[u8], m: Modality) -> EmbeddingSet<f64> {
    let d = rows[0].len();
    let data = rows.iter().flatten().copied().collect();
    EmbeddingSet::from_rows(Tensor::new(&[rows.len(), d], data).unwrap(), labels.to_vec(), m).unwrap()
}

pub fn cfg(tau: f64) -> ContrastConfig {
    ContrastConfig {
        tau,
        ..Default::default()
    }
}
