//! Optimisation loop, evaluation, and the four-variant ablation.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::contrast::{
    cross_entropy_on_tape, cross_modal_on_tape, full_objective_on_tape, intra_modal_on_tape, ContrastConfig,
};
use crate::data::{stack_batch, SceneSample};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::metrics::{separability, ConfusionMatrix};
use crate::model::{predict, Model, ModelConfig};
use crate::params::ModelParams;
use crate::sampling::{compute_n, downscale_labels, sample_embeddings, sample_positions, LabelMap, Modality};
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub poly_power: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub use_cm: bool,
    pub use_intra: bool,
    pub seed: u64,
    /// Cap on the per-class sample budget.
    pub n_max: usize,
    pub normalize_embeddings: bool,
    /// Random horizontal flips of training scenes.
    pub flip: bool,
    /// Evaluate every this many epochs and after the last one.
    pub eval_every: usize,
    pub contrast: ContrastConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 60,
            batch_size: 16,
            base_lr: 1e-3,
            poly_power: 0.9,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            use_cm: true,
            use_intra: true,
            seed: 0,
            n_max: crate::sampling::DEFAULT_N_MAX,
            normalize_embeddings: true,
            flip: false,
            eval_every: 1,
            contrast: ContrastConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Argument("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 || self.n_max == 0 || self.eval_every == 0 {
            return Err(Error::Argument("batch_size, n_max and eval_every must be positive".into()));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Argument(format!("base_lr must be positive, got {}", self.base_lr)));
        }
        if !(self.poly_power >= 0.0 && self.weight_decay >= 0.0 && self.eps > 0.0) {
            return Err(Error::Argument("poly_power and weight_decay must be non-negative, eps positive".into()));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return Err(Error::Argument("betas must lie in [0, 1)".into()));
        }
        self.contrast.validate()
    }

    fn cm_active(&self) -> bool {
        self.use_cm && self.contrast.lambda_cm > 0.0
    }

    fn vis_active(&self) -> bool {
        self.use_intra && self.contrast.lambda_vis > 0.0
    }

    fn aux_active(&self) -> bool {
        self.use_intra && self.contrast.lambda_aux > 0.0
    }
}

/// `base · (1 − iter/total)^power`, zero from `total` on.
pub fn poly_lr(base: f64, iter: usize, total: usize, power: f64) -> f64 {
    if total == 0 || iter >= total {
        return 0.0;
    }
    base * (1.0 - iter as f64 / total as f64).powf(power)
}

/// Adaptive moments with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    t: i32,
    moments: BTreeMap<String, (Vec<f32>, Vec<f32>)>,
}

impl AdamW {
    pub fn new(cfg: &TrainConfig) -> Self {
        AdamW {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            t: 0,
            moments: BTreeMap::new(),
        }
    }

    /// Parameters without a gradient still decay.
    pub fn step(&mut self, params: &mut ModelParams<f32>, grads: &Gradients<f32>, lr: f64) {
        self.t += 1;
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let step = (lr / c1) as f32;
        let c2_sqrt = c2.sqrt() as f32;
        let eps = self.eps as f32;
        let decay = (1.0 - lr * self.weight_decay) as f32;
        for (name, p) in params.iter_mut() {
            let p = p.data_mut();
            p.iter_mut().for_each(|w| *w *= decay);
            let Some(g) = grads.get(name) else { continue };
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; p.len()], vec![0.0; p.len()]));
            for (((w, &g), m), v) in p.iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *w -= step * *m / ((*v).sqrt() / c2_sqrt + eps);
            }
        }
    }
}

/// Which contrastive terms a run trains with.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Variant {
    /// Segmentation loss only.
    Model1,
    /// Plus cross-modal contrast.
    Model2,
    /// Plus intra-modal contrast.
    Model3,
    /// Both contrastive terms.
    Model4,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Model1, Variant::Model2, Variant::Model3, Variant::Model4];

    pub fn flags(self) -> (bool, bool) {
        match self {
            Variant::Model1 => (false, false),
            Variant::Model2 => (true, false),
            Variant::Model3 => (false, true),
            Variant::Model4 => (true, true),
        }
    }

    pub fn apply(self, cfg: &TrainConfig) -> TrainConfig {
        let (use_cm, use_intra) = self.flags();
        TrainConfig {
            use_cm,
            use_intra,
            ..cfg.clone()
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let i = Variant::ALL.iter().position(|v| v == self).expect("listed") + 1;
        write!(f, "model{i}")
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.to_string() == s)
            .ok_or_else(|| Error::Argument(format!("unknown variant `{s}`")))
    }
}

/// Loss values of one optimisation step; disabled terms are exactly 0.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepLosses {
    pub ce: f64,
    pub cm: f64,
    pub vis: f64,
    pub aux: f64,
    pub total: f64,
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    // splitmix64 finaliser over a simple combination
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn sampled_rows<T: Real>(tape: &mut Tape<T>, rep: Var, rows: &[usize], normalize: bool) -> Result<Var> {
    let dims = tape.dims(rep).to_vec();
    let flat = tape.reshape(rep, &[dims[0] * dims[1] * dims[2], dims[3]])?;
    let picked = tape.gather_rows(flat, rows)?;
    if normalize {
        tape.l2_normalize_rows(picked)
    } else {
        Ok(picked)
    }
}

/// Forward and backward for one batch. `step_seed` drives embedding sampling.
pub fn step_gradients<T: Real>(
    model: &Model,
    params: &ModelParams<T>,
    vis: &Tensor<T>,
    aux: &Tensor<T>,
    labels: &[LabelMap],
    cfg: &TrainConfig,
    step_seed: u64,
) -> Result<(StepLosses, Gradients<T>)> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape)?;
    let v = tape.constant(vis.clone());
    let a = tape.constant(aux.clone());
    let out = model.forward(&mut tape, &bound, v, a)?;
    let ce = cross_entropy_on_tape(&mut tape, out.logits, labels)?;

    let (mut cm, mut lv, mut la) = (None, None, None);
    if cfg.cm_active() || cfg.vis_active() || cfg.aux_active() {
        let (h, w) = model.config().rep_dims();
        let small = labels
            .iter()
            .map(|l| downscale_labels(l, h, w))
            .collect::<Result<Vec<_>>>()?;
        let n = compute_n(&small, cfg.n_max)?;
        let pv = sample_positions(&small, n, mix(step_seed, 1, 0))?;
        let pa = sample_positions(&small, n, mix(step_seed, 2, 0))?;
        let rows = |p: &[crate::sampling::SamplePoint]| p.iter().map(|s| s.row(h * w)).collect::<Vec<_>>();
        let lab = |p: &[crate::sampling::SamplePoint]| p.iter().map(|s| s.label).collect::<Vec<_>>();
        let ev = sampled_rows(&mut tape, out.rep_vis, &rows(&pv), cfg.normalize_embeddings)?;
        let ea = sampled_rows(&mut tape, out.rep_aux, &rows(&pa), cfg.normalize_embeddings)?;
        let (lab_v, lab_a) = (lab(&pv), lab(&pa));
        if cfg.cm_active() {
            cm = Some(cross_modal_on_tape(&mut tape, ev, &lab_v, ea, &lab_a, &cfg.contrast)?);
        }
        if cfg.vis_active() && lab_v.len() >= 2 {
            lv = Some(intra_modal_on_tape(&mut tape, ev, &lab_v, &cfg.contrast)?);
        }
        if cfg.aux_active() && lab_a.len() >= 2 {
            la = Some(intra_modal_on_tape(&mut tape, ea, &lab_a, &cfg.contrast)?);
        }
    }
    let total = full_objective_on_tape(&mut tape, ce, cm, lv, la, &cfg.contrast)?;
    let scalar = |t: &Tape<T>, v: Option<Var>| v.map_or(0.0, |v| t.value(v).data()[0].to_f64().unwrap_or(f64::NAN));
    let losses = StepLosses {
        ce: scalar(&tape, Some(ce)),
        cm: scalar(&tape, cm),
        vis: scalar(&tape, lv),
        aux: scalar(&tape, la),
        total: scalar(&tape, Some(total)),
    };
    if !losses.total.is_finite() {
        let culprit = [
            ("logits", out.logits),
            ("rep_vis", out.rep_vis),
            ("rep_aux", out.rep_aux),
            ("loss_ce", ce),
        ]
        .into_iter()
        .find(|(_, v)| !tape.value(*v).all_finite())
        .map(|(n, _)| n.to_string())
        .or_else(|| params.first_non_finite().map(str::to_string))
        .unwrap_or_else(|| "contrastive loss".into());
        return Err(Error::NonFinite {
            tensor: culprit,
            step: 0,
        });
    }
    let grads = tape.backward(total)?;
    Ok((losses, grads))
}

/// Per-epoch training record.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss_ce: f64,
    pub loss_cm: f64,
    pub loss_vis: f64,
    pub loss_aux: f64,
    /// Mean total objective over the epoch's steps.
    pub loss_total: f64,
    pub miou: Option<f64>,
    pub separability: Option<f64>,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
}

pub const HISTORY_HEADER: &str = "epoch,loss_ce,loss_cm,loss_vis,loss_aux,miou,separability,lr";

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |v| format!("{v}"))
}

impl EpochRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.epoch,
            self.loss_ce,
            self.loss_cm,
            self.loss_vis,
            self.loss_aux,
            opt(self.miou),
            opt(self.separability),
            self.lr
        )
    }
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from(HISTORY_HEADER);
    s.push('\n');
    for r in history {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

pub fn write_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    write_atomic(path, history_csv(history).as_bytes())
}

/// Inference-time evaluation of a parameter set.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub confusion: ConfusionMatrix,
    pub miou: f64,
    pub iou: Vec<Option<f64>>,
    pub separability_vis: Option<f64>,
    pub separability_aux: Option<f64>,
    pub separability_pooled: Option<f64>,
}

impl EvalReport {
    /// `metric,value` rows; undefined values are left empty.
    pub fn csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        for (k, iou) in self.iou.iter().enumerate() {
            s.push_str(&format!("iou_class{k},{}\n", opt(*iou)));
        }
        s.push_str(&format!("miou,{}\n", self.miou));
        s.push_str(&format!("separability_vis,{}\n", opt(self.separability_vis)));
        s.push_str(&format!("separability_aux,{}\n", opt(self.separability_aux)));
        s.push_str(&format!("separability_pooled,{}\n", opt(self.separability_pooled)));
        s
    }
}

const EVAL_BATCH: usize = 16;
/// Embeddings drawn per (scene, class) when scoring separability.
const EVAL_PER_CLASS: usize = 1;

fn defined(r: Result<f64>) -> Result<Option<f64>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::UndefinedMetric(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Single-scale inference over `samples`: mIoU plus silhouette separability of
/// class-balanced, L2-normalised projector embeddings.
pub fn evaluate(model: &Model, params: &ModelParams<f32>, samples: &[SceneSample], seed: u64) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("no evaluation samples".into()));
    }
    let cfg = model.config();
    let (h, w) = cfg.rep_dims();
    let mut confusion = ConfusionMatrix::new(cfg.num_classes);
    let (mut ev, mut lv, mut ea, mut la) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (chunk_id, chunk) in samples.chunks(EVAL_BATCH).enumerate() {
        let refs: Vec<&SceneSample> = chunk.iter().collect();
        let (vis, aux, labels) = stack_batch(&refs)?;
        let (logits, rv, ra) = model.infer(params, &vis, &aux)?;
        for (l, p) in labels.iter().zip(predict(&logits)) {
            confusion.add(l, &p)?;
        }
        let small = labels
            .iter()
            .map(|l| downscale_labels(l, h, w))
            .collect::<Result<Vec<_>>>()?;
        if small.iter().all(|l| l.valid_pixels() == 0) {
            continue;
        }
        let s = mix(seed, 3, chunk_id as u64);
        let sv = sample_embeddings(&rv, &small, EVAL_PER_CLASS, Modality::Visible, s, true)?;
        let sa = sample_embeddings(&ra, &small, EVAL_PER_CLASS, Modality::Auxiliary, s, true)?;
        ev.extend_from_slice(sv.embeddings.data());
        lv.extend_from_slice(&sv.labels);
        ea.extend_from_slice(sa.embeddings.data());
        la.extend_from_slice(&sa.labels);
    }
    let d = cfg.proj_dim;
    let (separability_vis, separability_aux, separability_pooled) = if lv.is_empty() {
        (None, None, None)
    } else {
        let pooled: Vec<f32> = ev.iter().chain(&ea).copied().collect();
        let pooled_labels: Vec<u8> = lv.iter().chain(&la).copied().collect();
        (
            defined(separability(&ev, &lv, d))?,
            defined(separability(&ea, &la, d))?,
            defined(separability(&pooled, &pooled_labels, d))?,
        )
    };
    Ok(EvalReport {
        miou: confusion.miou()?,
        iou: confusion.iou_per_class(),
        confusion,
        separability_vis,
        separability_aux,
        separability_pooled,
    })
}

/// Trained parameters plus the per-epoch history.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams<f32>,
    pub history: Vec<EpochRecord>,
}

pub fn train(
    train_set: &[SceneSample],
    eval_set: Option<&[SceneSample]>,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    train_with(train_set, eval_set, model_cfg, cfg, |_, _| Ok(()))
}

/// Like [`train`], calling `on_epoch` after every epoch with the current parameters.
///
/// Metrics come from `eval_set`, or from the training set when it is absent.
pub fn train_with<F>(
    train_set: &[SceneSample],
    eval_set: Option<&[SceneSample]>,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    mut on_epoch: F,
) -> Result<TrainOutcome>
where
    F: FnMut(&EpochRecord, &ModelParams<f32>) -> Result<()>,
{
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::EmptyInput("training set is empty".into()));
    }
    let model = Model::new(model_cfg.clone())?;
    for s in train_set {
        s.label.validate(model_cfg.num_classes)?;
        if s.label.height() != model_cfg.height || s.label.width() != model_cfg.width {
            return Err(Error::Config(format!(
                "dataset scenes are {}x{}, model expects {}x{}",
                s.label.height(),
                s.label.width(),
                model_cfg.height,
                model_cfg.width
            )));
        }
    }
    let metric_set = eval_set.unwrap_or(train_set);

    let mut params = model.init_params::<f32>(cfg.seed)?;
    let mut opt = AdamW::new(cfg);
    let steps_per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let total_iters = steps_per_epoch * cfg.epochs;
    let mut iter = 0usize;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, 4, epoch as u64));
        order.shuffle(&mut rng);
        let mut sums = StepLosses::default();
        let mut lr = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let flipped: Vec<SceneSample>;
            let refs: Vec<&SceneSample> = if cfg.flip {
                flipped = batch
                    .iter()
                    .map(|&i| {
                        if rand::Rng::random_bool(&mut rng, 0.5) {
                            train_set[i].flipped()
                        } else {
                            train_set[i].clone()
                        }
                    })
                    .collect();
                flipped.iter().collect()
            } else {
                batch.iter().map(|&i| &train_set[i]).collect()
            };
            let (vis, aux, labels) = stack_batch(&refs)?;
            let (losses, grads) = step_gradients(&model, &params, &vis, &aux, &labels, cfg, mix(cfg.seed, 5, iter as u64))
                .map_err(|e| match e {
                    Error::NonFinite { tensor, .. } => Error::NonFinite { tensor, step: iter },
                    e => e,
                })?;
            lr = poly_lr(cfg.base_lr, iter, total_iters, cfg.poly_power);
            opt.step(&mut params, &grads, lr);
            if let Some(name) = params.first_non_finite() {
                return Err(Error::NonFinite {
                    tensor: name.to_string(),
                    step: iter,
                });
            }
            sums.ce += losses.ce;
            sums.cm += losses.cm;
            sums.vis += losses.vis;
            sums.aux += losses.aux;
            sums.total += losses.total;
            iter += 1;
        }
        let k = steps_per_epoch as f64;
        let evaluate_now = (epoch + 1) % cfg.eval_every == 0 || epoch + 1 == cfg.epochs;
        let (miou, sep) = if evaluate_now {
            let report = evaluate(&model, &params, metric_set, mix(cfg.seed, 6, 0))?;
            (Some(report.miou), report.separability_pooled)
        } else {
            (None, None)
        };
        let record = EpochRecord {
            epoch: epoch + 1,
            loss_ce: sums.ce / k,
            loss_cm: sums.cm / k,
            loss_vis: sums.vis / k,
            loss_aux: sums.aux / k,
            loss_total: sums.total / k,
            miou,
            separability: sep,
            lr,
        };
        log::info!(
            "epoch {}/{}: ce {:.4} cm {:.4} vis {:.4} aux {:.4} miou {} sep {}",
            record.epoch,
            cfg.epochs,
            record.loss_ce,
            record.loss_cm,
            record.loss_vis,
            record.loss_aux,
            opt_fmt(record.miou),
            opt_fmt(record.separability)
        );
        on_epoch(&record, &params)?;
        history.push(record);
    }
    Ok(TrainOutcome { params, history })
}

fn opt_fmt(v: Option<f64>) -> String {
    v.map_or("-".into(), |v| format!("{v:.4}"))
}

/// One (variant, seed) cell of the ablation.
#[derive(Clone, Debug)]
pub struct AblationCell {
    pub variant: Variant,
    pub seed: u64,
    pub miou: f64,
    pub separability: Option<f64>,
    pub history: Vec<EpochRecord>,
}

/// Mean and sample standard deviation of a variant's cells.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationSummary {
    pub variant: Variant,
    pub runs: usize,
    pub miou_mean: f64,
    pub miou_std: f64,
    pub separability_mean: Option<f64>,
    pub separability_std: Option<f64>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

pub fn summarize(cells: &[AblationCell]) -> Vec<AblationSummary> {
    Variant::ALL
        .into_iter()
        .filter_map(|variant| {
            let rows: Vec<&AblationCell> = cells.iter().filter(|c| c.variant == variant).collect();
            if rows.is_empty() {
                return None;
            }
            let mious: Vec<f64> = rows.iter().map(|c| c.miou).collect();
            let seps: Option<Vec<f64>> = rows.iter().map(|c| c.separability).collect();
            let (miou_mean, miou_std) = mean_std(&mious);
            let sep = seps.map(|s| mean_std(&s));
            Some(AblationSummary {
                variant,
                runs: rows.len(),
                miou_mean,
                miou_std,
                separability_mean: sep.map(|s| s.0),
                separability_std: sep.map(|s| s.1),
            })
        })
        .collect()
}

pub const ABLATION_HEADER: &str = "variant,seed,miou,separability";
pub const SUMMARY_HEADER: &str = "variant,runs,miou_mean,miou_std,separability_mean,separability_std";

pub fn ablation_csv(cells: &[AblationCell]) -> String {
    let mut s = format!("{ABLATION_HEADER}\n");
    for c in cells {
        s.push_str(&format!("{},{},{},{}\n", c.variant, c.seed, c.miou, opt(c.separability)));
    }
    s
}

pub fn summary_csv(summary: &[AblationSummary]) -> String {
    let mut s = format!("{SUMMARY_HEADER}\n");
    for r in summary {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.variant,
            r.runs,
            r.miou_mean,
            r.miou_std,
            opt(r.separability_mean),
            opt(r.separability_std)
        ));
    }
    s
}

/// Trains every variant for every seed with otherwise identical settings.
///
/// Cells run on up to `threads` scoped workers; each cell owns its RNG and
/// parameters, so results do not depend on scheduling. Cells are returned in
/// seed-major, variant-minor order. `on_cell` sees each cell as it finishes.
pub fn ablation_matrix<F>(
    train_set: &[SceneSample],
    eval_set: &[SceneSample],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    seeds: &[u64],
    threads: usize,
    on_cell: F,
) -> Result<Vec<AblationCell>>
where
    F: Fn(&AblationCell, &ModelParams<f32>) -> Result<()> + Sync,
{
    if seeds.is_empty() {
        return Err(Error::Argument("ablation needs at least one seed".into()));
    }
    cfg.validate()?;
    let jobs: Vec<(u64, Variant)> = seeds
        .iter()
        .flat_map(|&s| Variant::ALL.into_iter().map(move |v| (s, v)))
        .collect();
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<AblationCell>>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    let run = |(seed, variant): (u64, Variant)| -> Result<AblationCell> {
        let run_cfg = TrainConfig {
            seed,
            ..variant.apply(cfg)
        };
        let out = train(train_set, Some(eval_set), model_cfg, &run_cfg)?;
        let last = out.history.last().expect("epochs >= 1");
        let cell = AblationCell {
            variant,
            seed,
            miou: last.miou.expect("final epoch is evaluated"),
            separability: last.separability,
            history: out.history,
        };
        on_cell(&cell, &out.params)?;
        Ok(cell)
    };
    std::thread::scope(|scope| {
        for _ in 0..threads.clamp(1, jobs.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= jobs.len() {
                    break;
                }
                let r = run(jobs[i]);
                let failed = r.is_err();
                results.lock().expect("no worker panics while holding the lock")[i] = Some(r);
                if failed {
                    next.store(jobs.len(), Ordering::Relaxed);
                }
            });
        }
    });
    let results = results.into_inner().expect("workers joined");
    let mut cells = Vec::with_capacity(jobs.len());
    for r in results.into_iter().flatten() {
        cells.push(r?);
    }
    Ok(cells)
}

/// Writes `text` to `path` through the atomic writer; used for CSV reports.
pub fn write_report(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())
}

/// Human-readable one-line summary of a report, for logs.
pub fn describe(report: &EvalReport, out: &mut impl Write) -> std::io::Result<()> {
    writeln!(
        out,
        "miou {:.4}  separability vis {} aux {} pooled {}",
        report.miou,
        opt_fmt(report.separability_vis),
        opt_fmt(report.separability_aux),
        opt_fmt(report.separability_pooled)
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn poly_endpoints() {
        assert_eq!(poly_lr(1e-3, 0, 100, 0.9), 1e-3);
        assert_eq!(poly_lr(1e-3, 100, 100, 0.9), 0.0);
        let mid = poly_lr(1.0, 50, 100, 0.9);
        assert!((mid - 0.5f64.powf(0.9)).abs() < 1e-15);
    }

    #[test]
    fn variant_names_roundtrip() {
        for v in Variant::ALL {
            assert_eq!(v.to_string().parse::<Variant>().unwrap(), v);
        }
        assert_eq!(Variant::Model4.flags(), (true, true));
        assert!("model5".parse::<Variant>().is_err());
    }

    #[test]
    fn adamw_first_step_is_signed_lr() {
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut params = ModelParams::<f32>::new();
        params.insert("w", Tensor::from_f64(&[2], &[1.0, 1.0]).unwrap()).unwrap();
        let mut tape = Tape::<f32>::new();
        let bound = params.bind(&mut tape).unwrap();
        let w = bound.get("w").unwrap();
        let c = tape.constant(Tensor::from_f64(&[2], &[3.0, -2.0]).unwrap());
        let y = tape.mul(w, c).unwrap();
        let y = tape.sum(y);
        let grads = tape.backward(y).unwrap();
        let mut opt = AdamW::new(&cfg);
        opt.step(&mut params, &grads, 0.1);
        let got = params.get("w").unwrap().data();
        assert!((got[0] - 0.9).abs() < 1e-6 && (got[1] - 1.1).abs() < 1e-6);
    }

    #[test]
    fn decay_is_decoupled() {
        let cfg = TrainConfig::default();
        let mut params = ModelParams::<f32>::new();
        params.insert("w", Tensor::full(&[1], 2.0)).unwrap();
        let mut tape = Tape::<f32>::new();
        params.bind(&mut tape).unwrap();
        let c = tape.watch(Tensor::full(&[1], 1.0));
        let y = tape.sum(c);
        let grads = tape.backward(y).unwrap();
        assert!(grads.get("w").is_none());
        AdamW::new(&cfg).step(&mut params, &grads, 0.5);
        assert!((params.get("w").unwrap().data()[0] - 2.0 * (1.0 - 0.5 * 0.01)).abs() < 1e-7);
    }

    #[test]
    fn summary_is_mean_of_rows() {
        let cell = |variant, seed, miou| AblationCell {
            variant,
            seed,
            miou,
            separability: Some(miou / 2.0),
            history: Vec::new(),
        };
        let cells = [
            cell(Variant::Model1, 0, 0.2),
            cell(Variant::Model1, 1, 0.4),
            cell(Variant::Model4, 0, 0.5),
        ];
        let s = summarize(&cells);
        assert_eq!(s.len(), 2);
        assert!((s[0].miou_mean - 0.3).abs() < 1e-15);
        assert!((s[0].miou_std - 0.02f64.sqrt()).abs() < 1e-12);
        assert_eq!(s[1].miou_std, 0.0);
        assert_eq!(ablation_csv(&cells).lines().count(), 4);
    }
}
