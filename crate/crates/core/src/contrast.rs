//! Supervised contrastive losses and the segmentation objective.
//!
//! All contrastive terms share one kernel: for every anchor, same-class
//! candidates are positives and different-class candidates are negatives;
//! each positive contributes an InfoNCE term against the full negative set,
//! positives are averaged per anchor, and anchors are averaged over those that
//! have at least one positive. Anchors without a positive are dropped from the
//! mean. Every loss returns its gradient with respect to the embeddings from
//! the same pass, which is what the `*_on_tape` variants record.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampling::{EmbeddingSet, LabelMap, IGNORE};
use crate::tape::{Tape, Var};
use crate::tensor::{lit, matmul_into, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContrastConfig {
    /// Temperature dividing every similarity.
    pub tau: f64,
    pub lambda_cm: f64,
    pub lambda_vis: f64,
    pub lambda_aux: f64,
    /// Averages in the auxiliary-anchored cross-modal term as well.
    pub symmetrize_cm: bool,
}

impl Default for ContrastConfig {
    fn default() -> Self {
        ContrastConfig {
            tau: 0.1,
            lambda_cm: 0.05,
            lambda_vis: 0.05,
            lambda_aux: 0.05,
            symmetrize_cm: false,
        }
    }
}

impl ContrastConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Argument(format!("tau must be positive, got {}", self.tau)));
        }
        for (name, v) in [
            ("lambda_cm", self.lambda_cm),
            ("lambda_vis", self.lambda_vis),
            ("lambda_aux", self.lambda_aux),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Argument(format!("{name} must be non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::Argument(format!("tau must be positive, got {tau}")))
    }
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(x, y)| *x * *y).sum()
}

/// `log(1 + e^x)` without overflow.
fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Log-sum-exp with the maximum factored out; `-inf` for an empty input.
fn logsumexp<T: Real>(xs: impl Iterator<Item = T> + Clone) -> T {
    let max = xs.clone().fold(T::neg_infinity(), T::max);
    if max == T::neg_infinity() {
        return max;
    }
    max + xs.map(|x| (x - max).exp()).sum::<T>().ln()
}

/// InfoNCE for one anchor, one positive and `K = negatives.len() / d` negatives.
///
/// `negatives` is a flattened `[K, d]` block and may be empty, in which case
/// the loss is exactly zero.
pub fn info_nce<T: Real>(anchor: &[T], positive: &[T], negatives: &[T], tau: f64) -> Result<T> {
    check_tau(tau)?;
    let d = anchor.len();
    if d == 0 || positive.len() != d || !negatives.len().is_multiple_of(d) {
        return Err(Error::shape(format!(
            "info_nce: anchor {d}, positive {}, negatives {}",
            positive.len(),
            negatives.len()
        )));
    }
    let inv_tau: T = lit(1.0 / tau);
    let pos = dot(anchor, positive) * inv_tau;
    let lse_neg = logsumexp(negatives.chunks_exact(d).map(|n| dot(anchor, n) * inv_tau));
    if lse_neg == T::neg_infinity() {
        return Ok(T::zero());
    }
    Ok(softplus(lse_neg - pos))
}

struct Contrast<T> {
    loss: T,
    valid_anchors: usize,
    d_anchors: Vec<T>,
    d_candidates: Vec<T>,
}

/// Shared kernel. With `exclude_self` the anchors and candidates are the same
/// set and an anchor is never its own positive.
#[allow(clippy::too_many_arguments)]
fn contrast_kernel<T: Real>(
    anchors: &[T],
    anchor_labels: &[u8],
    candidates: &[T],
    candidate_labels: &[u8],
    d: usize,
    exclude_self: bool,
    tau: f64,
    want_grad: bool,
) -> Contrast<T> {
    let (na, nc) = (anchor_labels.len(), candidate_labels.len());
    let inv_tau: T = lit(1.0 / tau);
    let mut logits = vec![T::zero(); na * nc];
    matmul_into(na, d, nc, anchors, false, candidates, true, &mut logits, false);
    logits.iter_mut().for_each(|s| *s *= inv_tau);

    let is_positive = |i: usize, j: usize| anchor_labels[i] == candidate_labels[j] && !(exclude_self && i == j);
    let valid: Vec<usize> = (0..na).filter(|&i| (0..nc).any(|j| is_positive(i, j))).collect();
    let mut out = Contrast {
        loss: T::zero(),
        valid_anchors: valid.len(),
        d_anchors: Vec::new(),
        d_candidates: Vec::new(),
    };
    if valid.is_empty() {
        if want_grad {
            out.d_anchors = vec![T::zero(); na * d];
            out.d_candidates = vec![T::zero(); nc * d];
        }
        return out;
    }
    let outer: T = T::one() / lit::<T>(valid.len() as f64);
    let mut coeff = if want_grad { vec![T::zero(); na * nc] } else { Vec::new() };
    let mut total = T::zero();

    for &i in &valid {
        let row = &logits[i * nc..(i + 1) * nc];
        let negatives = (0..nc).filter(|&j| anchor_labels[i] != candidate_labels[j]);
        let lse_neg = logsumexp(negatives.clone().map(|j| row[j]));
        let positives: Vec<usize> = (0..nc).filter(|&j| is_positive(i, j)).collect();
        let inner: T = T::one() / lit::<T>(positives.len() as f64);

        let mut anchor_loss = T::zero();
        let mut push_total = T::zero();
        for &p in &positives {
            if lse_neg == T::neg_infinity() {
                continue;
            }
            let x = lse_neg - row[p];
            anchor_loss += softplus(x);
            if want_grad {
                let r = sigmoid(x);
                coeff[i * nc + p] -= outer * inner * r;
                push_total += r;
            }
        }
        total += anchor_loss * inner;
        if want_grad && push_total > T::zero() {
            let scale = outer * inner * push_total;
            for j in negatives {
                coeff[i * nc + j] += scale * (row[j] - lse_neg).exp();
            }
        }
    }
    out.loss = total * outer;

    if want_grad {
        coeff.iter_mut().for_each(|c| *c *= inv_tau);
        out.d_anchors = vec![T::zero(); na * d];
        matmul_into(na, nc, d, &coeff, false, candidates, false, &mut out.d_anchors, false);
        out.d_candidates = vec![T::zero(); nc * d];
        matmul_into(nc, na, d, &coeff, true, anchors, false, &mut out.d_candidates, false);
    }
    out
}

fn warn_all_skipped(what: &str) {
    log::warn!("{what}: no anchor has a same-class partner; loss set to 0");
}

fn check_pair<T: Real>(v: &EmbeddingSet<T>, a: &EmbeddingSet<T>) -> Result<()> {
    if v.dim() != a.dim() {
        return Err(Error::shape(format!(
            "embedding dims differ: {} vs {}",
            v.dim(),
            a.dim()
        )));
    }
    Ok(())
}

fn cross_modal_raw<T: Real>(
    v: &[T],
    v_labels: &[u8],
    a: &[T],
    a_labels: &[u8],
    d: usize,
    cfg: &ContrastConfig,
    want_grad: bool,
) -> (T, Vec<T>, Vec<T>) {
    let fwd = contrast_kernel(v, v_labels, a, a_labels, d, false, cfg.tau, want_grad);
    if !cfg.symmetrize_cm {
        if fwd.valid_anchors == 0 {
            warn_all_skipped("cross-modal loss");
        }
        return (fwd.loss, fwd.d_anchors, fwd.d_candidates);
    }
    let rev = contrast_kernel(a, a_labels, v, v_labels, d, false, cfg.tau, want_grad);
    if fwd.valid_anchors + rev.valid_anchors == 0 {
        warn_all_skipped("cross-modal loss");
    }
    let half: T = lit(0.5);
    let combine = |x: Vec<T>, y: Vec<T>| x.into_iter().zip(y).map(|(p, q)| half * (p + q)).collect();
    (
        half * (fwd.loss + rev.loss),
        combine(fwd.d_anchors, rev.d_candidates),
        combine(fwd.d_candidates, rev.d_anchors),
    )
}

/// Cross-modal contrast with visible anchors and auxiliary positives/negatives.
pub fn cross_modal_loss<T: Real>(v: &EmbeddingSet<T>, a: &EmbeddingSet<T>, cfg: &ContrastConfig) -> Result<T> {
    check_tau(cfg.tau)?;
    check_pair(v, a)?;
    let (loss, _, _) = cross_modal_raw(
        v.embeddings.data(),
        &v.labels,
        a.embeddings.data(),
        &a.labels,
        v.dim(),
        cfg,
        false,
    );
    Ok(loss)
}

/// [`cross_modal_loss`] together with its gradients with respect to `V` and `A`.
pub fn cross_modal_loss_with_grad<T: Real>(
    v: &EmbeddingSet<T>,
    a: &EmbeddingSet<T>,
    cfg: &ContrastConfig,
) -> Result<(T, Tensor<T>, Tensor<T>)> {
    check_tau(cfg.tau)?;
    check_pair(v, a)?;
    let (loss, dv, da) = cross_modal_raw(
        v.embeddings.data(),
        &v.labels,
        a.embeddings.data(),
        &a.labels,
        v.dim(),
        cfg,
        true,
    );
    Ok((
        loss,
        Tensor::new(v.embeddings.dims(), dv)?,
        Tensor::new(a.embeddings.dims(), da)?,
    ))
}

fn intra_raw<T: Real>(s: &[T], labels: &[u8], d: usize, tau: f64, want_grad: bool) -> (T, Vec<T>) {
    let k = contrast_kernel(s, labels, s, labels, d, true, tau, want_grad);
    if k.valid_anchors == 0 {
        warn_all_skipped("intra-modal loss");
    }
    let grad = if want_grad {
        k.d_anchors
            .into_iter()
            .zip(k.d_candidates)
            .map(|(x, y)| x + y)
            .collect()
    } else {
        Vec::new()
    };
    (k.loss, grad)
}

fn check_intra<T: Real>(s: &EmbeddingSet<T>, tau: f64) -> Result<()> {
    check_tau(tau)?;
    if s.len() < 2 {
        return Err(Error::Argument(format!(
            "intra-modal loss needs at least 2 embeddings, got {}",
            s.len()
        )));
    }
    Ok(())
}

/// Intra-modal contrast within one set, an anchor never being its own positive.
pub fn intra_modal_loss<T: Real>(s: &EmbeddingSet<T>, cfg: &ContrastConfig) -> Result<T> {
    check_intra(s, cfg.tau)?;
    Ok(intra_raw(s.embeddings.data(), &s.labels, s.dim(), cfg.tau, false).0)
}

pub fn intra_modal_loss_with_grad<T: Real>(s: &EmbeddingSet<T>, cfg: &ContrastConfig) -> Result<(T, Tensor<T>)> {
    check_intra(s, cfg.tau)?;
    let (loss, g) = intra_raw(s.embeddings.data(), &s.labels, s.dim(), cfg.tau, true);
    Ok((loss, Tensor::new(s.embeddings.dims(), g)?))
}

/// `ce + λ_cm·l_cm + λ_vis·l_vis + λ_aux·l_aux`.
pub fn full_objective<T: Real>(ce: T, l_cm: T, l_vis: T, l_aux: T, cfg: &ContrastConfig) -> T {
    ce + lit::<T>(cfg.lambda_cm) * l_cm + lit::<T>(cfg.lambda_vis) * l_vis + lit::<T>(cfg.lambda_aux) * l_aux
}

fn ce_raw<T: Real>(logits: &Tensor<T>, labels: &[LabelMap], want_grad: bool) -> Result<(T, Vec<T>)> {
    let (batch, h, w, c) = match logits.dims() {
        &[b, h, w, c] => (b, h, w, c),
        d => return Err(Error::shape(format!("logits must be [B,H,W,C], got {d:?}"))),
    };
    if labels.len() != batch || labels.iter().any(|l| l.height() != h || l.width() != w) {
        return Err(Error::shape("labels are not aligned with logits"));
    }
    let valid: usize = labels.iter().map(LabelMap::valid_pixels).sum();
    if valid == 0 {
        return Err(Error::EmptyBatch("every pixel is ignored".into()));
    }
    let inv: T = T::one() / lit::<T>(valid as f64);
    let mut grad = if want_grad { vec![T::zero(); logits.len()] } else { Vec::new() };
    let mut total = T::zero();
    let pixels = h * w;
    for (b, l) in labels.iter().enumerate() {
        for (p, &y) in l.data().iter().enumerate() {
            if y == IGNORE {
                continue;
            }
            let y = y as usize;
            if y >= c {
                return Err(Error::Argument(format!("label {y} outside [0, {c})")));
            }
            let base = (b * pixels + p) * c;
            let row = &logits.data()[base..base + c];
            let lse = logsumexp(row.iter().copied());
            total += lse - row[y];
            if want_grad {
                for k in 0..c {
                    let prob = (row[k] - lse).exp();
                    let target = if k == y { T::one() } else { T::zero() };
                    grad[base + k] = (prob - target) * inv;
                }
            }
        }
    }
    Ok((total * inv, grad))
}

/// Mean softmax cross-entropy over non-ignored pixels of `[B, H, W, C]` logits.
pub fn cross_entropy_seg<T: Real>(logits: &Tensor<T>, labels: &[LabelMap]) -> Result<T> {
    Ok(ce_raw(logits, labels, false)?.0)
}

pub fn cross_entropy_seg_with_grad<T: Real>(logits: &Tensor<T>, labels: &[LabelMap]) -> Result<(T, Tensor<T>)> {
    let (loss, g) = ce_raw(logits, labels, true)?;
    Ok((loss, Tensor::new(logits.dims(), g)?))
}

/// Records [`cross_entropy_seg`] on a tape.
pub fn cross_entropy_on_tape<T: Real>(tape: &mut Tape<T>, logits: Var, labels: &[LabelMap]) -> Result<Var> {
    let (loss, g) = cross_entropy_seg_with_grad(tape.value(logits), labels)?;
    tape.custom_scalar(loss, vec![(logits, g)])
}

/// Records the cross-modal loss between two `[N, d]` embedding matrices on a tape.
pub fn cross_modal_on_tape<T: Real>(
    tape: &mut Tape<T>,
    v: Var,
    v_labels: &[u8],
    a: Var,
    a_labels: &[u8],
    cfg: &ContrastConfig,
) -> Result<Var> {
    check_tau(cfg.tau)?;
    let (nv, d) = tape.value(v).as_matrix("visible embeddings")?;
    let (na, da) = tape.value(a).as_matrix("auxiliary embeddings")?;
    if d != da || nv != v_labels.len() || na != a_labels.len() {
        return Err(Error::shape("cross-modal inputs disagree with their labels"));
    }
    let (loss, dv, dav) = cross_modal_raw(
        tape.value(v).data(),
        v_labels,
        tape.value(a).data(),
        a_labels,
        d,
        cfg,
        true,
    );
    let gv = Tensor::new(&[nv, d], dv)?;
    let ga = Tensor::new(&[na, d], dav)?;
    tape.custom_scalar(loss, vec![(v, gv), (a, ga)])
}

/// Records the intra-modal loss of an `[N, d]` embedding matrix on a tape.
pub fn intra_modal_on_tape<T: Real>(tape: &mut Tape<T>, s: Var, labels: &[u8], cfg: &ContrastConfig) -> Result<Var> {
    check_tau(cfg.tau)?;
    let (n, d) = tape.value(s).as_matrix("embeddings")?;
    if n != labels.len() {
        return Err(Error::shape("intra-modal input disagrees with its labels"));
    }
    if n < 2 {
        return Err(Error::Argument("intra-modal loss needs at least 2 embeddings".into()));
    }
    let (loss, g) = intra_raw(tape.value(s).data(), labels, d, cfg.tau, true);
    let g = Tensor::new(&[n, d], g)?;
    tape.custom_scalar(loss, vec![(s, g)])
}

/// Records the weighted objective. Absent terms contribute nothing.
pub fn full_objective_on_tape<T: Real>(
    tape: &mut Tape<T>,
    ce: Var,
    l_cm: Option<Var>,
    l_vis: Option<Var>,
    l_aux: Option<Var>,
    cfg: &ContrastConfig,
) -> Result<Var> {
    let mut total = ce;
    for (term, weight) in [(l_cm, cfg.lambda_cm), (l_vis, cfg.lambda_vis), (l_aux, cfg.lambda_aux)] {
        if let Some(term) = term {
            let weighted = tape.scale(term, lit(weight));
            total = tape.add(total, weighted)?;
        }
    }
    Ok(total)
}
