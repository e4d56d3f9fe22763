//! Central finite-difference verification of analytic gradients.
//!
//! A [`Probe`] wraps a function that returns both a scalar value and its
//! analytic gradient with respect to a flat parameter vector. [`check`]
//! perturbs selected coordinates by `±step`, re-evaluates the value only, and
//! compares the numeric slope against the analytic one.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::contrast::{
    cross_entropy_on_tape, cross_modal_on_tape, full_objective_on_tape, intra_modal_on_tape, ContrastConfig,
};
use crate::error::{Error, Result};
use crate::fusion::{update_features, Activation, FusionModule};
use crate::model::{Model, ModelConfig};
use crate::params::{Bound, ModelParams};
use crate::sampling::{LabelMap, IGNORE};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::train::{step_gradients, TrainConfig};

/// Default perturbation for `f64` checks.
pub const STEP: f64 = 1e-5;

/// Magnitude below which gradients are compared absolutely rather than relatively.
pub const REL_FLOOR: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|, REL_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

pub type ProbeFn<'a> = Box<dyn Fn(&[f64]) -> Result<(f64, Vec<f64>)> + 'a>;

pub struct Probe<'a> {
    pub name: String,
    pub point: Vec<f64>,
    /// Coordinates to perturb; empty means all of them.
    pub coords: Vec<usize>,
    pub tolerance: f64,
    pub func: ProbeFn<'a>,
}

impl<'a> Probe<'a> {
    pub fn new(
        name: impl Into<String>,
        point: Vec<f64>,
        tolerance: f64,
        func: impl Fn(&[f64]) -> Result<(f64, Vec<f64>)> + 'a,
    ) -> Self {
        Probe {
            name: name.into(),
            point,
            coords: Vec::new(),
            tolerance,
            func: Box::new(func),
        }
    }

    pub fn with_coords(mut self, coords: Vec<usize>) -> Self {
        self.coords = coords;
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub checked: usize,
    pub worst_rel_err: f64,
    /// Coordinate with the worst error.
    pub worst_coord: usize,
    pub tolerance: f64,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.worst_rel_err <= self.tolerance
    }
}

/// Numeric partial derivatives of `f` at `x` along `coords` (all if empty).
pub fn central_difference(
    f: impl Fn(&[f64]) -> Result<f64>,
    x: &[f64],
    coords: &[usize],
    step: f64,
) -> Result<Vec<f64>> {
    let all: Vec<usize>;
    let coords = if coords.is_empty() {
        all = (0..x.len()).collect();
        &all
    } else {
        coords
    };
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(coords.len());
    for &i in coords {
        probe[i] = x[i] + step;
        let plus = f(&probe)?;
        probe[i] = x[i] - step;
        let minus = f(&probe)?;
        probe[i] = x[i];
        out.push((plus - minus) / (2.0 * step));
    }
    Ok(out)
}

pub fn check(probe: &Probe<'_>, step: f64) -> Result<CheckOutcome> {
    let (_, analytic) = (probe.func)(&probe.point)?;
    let coords: Vec<usize> = if probe.coords.is_empty() {
        (0..probe.point.len()).collect()
    } else {
        probe.coords.clone()
    };
    let numeric = central_difference(|x| Ok((probe.func)(x)?.0), &probe.point, &coords, step)?;
    let mut worst = (0.0f64, coords.first().copied().unwrap_or(0));
    for (&i, n) in coords.iter().zip(&numeric) {
        let err = relative_error(analytic[i], *n);
        // NaN must register as a failure
        if err > worst.0 || err.is_nan() {
            worst = (if err.is_nan() { f64::INFINITY } else { err }, i);
        }
    }
    Ok(CheckOutcome {
        name: probe.name.clone(),
        checked: coords.len(),
        worst_rel_err: worst.0,
        worst_coord: worst.1,
        tolerance: probe.tolerance,
    })
}

/// Outcomes for a whole suite of probes.
#[derive(Clone, Debug, Default)]
pub struct Report {
    pub outcomes: Vec<CheckOutcome>,
}

impl Report {
    pub fn run(probes: &[Probe<'_>], step: f64) -> Result<Report> {
        let outcomes = probes.iter().map(|p| check(p, step)).collect::<Result<_>>()?;
        Ok(Report { outcomes })
    }

    pub fn passed(&self) -> bool {
        self.outcomes.iter().all(CheckOutcome::passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckOutcome> {
        self.outcomes.iter().filter(|o| !o.passed())
    }

    pub fn worst(&self) -> Option<&CheckOutcome> {
        self.outcomes
            .iter()
            .max_by(|a, b| a.worst_rel_err.total_cmp(&b.worst_rel_err))
    }
}

/// Tolerance for loss and fusion probes.
pub const COMPONENT_TOLERANCE: f64 = 1e-4;
/// Tolerance for the end-to-end model probe.
pub const MODEL_TOLERANCE: f64 = 1e-3;
/// Perturbation for the end-to-end model probe.
pub const MODEL_STEP: f64 = 1e-6;

/// Which built-in suite to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scope {
    Losses,
    Fusion,
    Model,
}

impl Scope {
    pub const ALL: [Scope; 3] = [Scope::Losses, Scope::Fusion, Scope::Model];

    pub fn probes(self, seed: u64) -> Result<Vec<Probe<'static>>> {
        match self {
            Scope::Losses => loss_probes(seed),
            Scope::Fusion => fusion_probes(seed),
            Scope::Model => model_probes(seed),
        }
    }

    /// Piecewise-linear activations in the full network put kinks within
    /// `STEP` of some coordinates, so the model scope uses a finer step.
    pub fn step(self) -> f64 {
        match self {
            Scope::Model => MODEL_STEP,
            _ => STEP,
        }
    }

    pub fn run(self, seed: u64) -> Result<Report> {
        Report::run(&self.probes(seed)?, self.step())
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scope::Losses => "losses",
            Scope::Fusion => "fusion",
            Scope::Model => "model",
        })
    }
}

impl FromStr for Scope {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Scope::ALL
            .into_iter()
            .find(|v| v.to_string() == s)
            .ok_or_else(|| Error::Argument(format!("unknown gradcheck scope `{s}`")))
    }
}

fn normal(dims: &[usize], scale: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = dims.iter().product();
    let data = (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(dims, data).expect("non-zero dims")
}

fn labels_cycling(n: usize, classes: u8, rng: &mut ChaCha8Rng) -> Vec<u8> {
    // every class appears at least twice so all anchors have positives
    let mut l: Vec<u8> = (0..n).map(|i| (i % classes as usize) as u8).collect();
    for i in (1..n).rev() {
        l.swap(i, rng.random_range(0..=i));
    }
    l
}

type Build = dyn Fn(&mut Tape<f64>, &Bound, &[Var]) -> Result<Var>;

/// Probe over named parameters (flattened in name order) followed by free inputs.
fn module_probe(
    name: impl Into<String>,
    params: ModelParams<f64>,
    inputs: Vec<Tensor<f64>>,
    tolerance: f64,
    build: Box<Build>,
) -> Probe<'static> {
    let mut point: Vec<f64> = params.iter().flat_map(|(_, t)| t.data().to_vec()).collect();
    for t in &inputs {
        point.extend_from_slice(t.data());
    }
    Probe::new(name, point, tolerance, move |x: &[f64]| {
        let mut p = params.clone();
        let mut offset = 0;
        for (_, t) in p.iter_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&x[offset..offset + n]);
            offset += n;
        }
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape)?;
        let mut vars = Vec::with_capacity(inputs.len());
        for t in &inputs {
            let n = t.len();
            vars.push(tape.watch(Tensor::new(t.dims(), x[offset..offset + n].to_vec())?));
            offset += n;
        }
        let out = build(&mut tape, &bound, &vars)?;
        let value = tape.value(out).item()?;
        let grads = tape.backward(out)?;
        let mut flat = Vec::with_capacity(x.len());
        for (name, t) in p.iter() {
            match grads.get(name) {
                Some(g) => flat.extend_from_slice(g.data()),
                None => flat.extend(std::iter::repeat_n(0.0, t.len())),
            }
        }
        for (v, t) in vars.iter().zip(&inputs) {
            match grads.wrt(*v) {
                Some(g) => flat.extend_from_slice(g.data()),
                None => flat.extend(std::iter::repeat_n(0.0, t.len())),
            }
        }
        Ok((value, flat))
    })
}

fn input_probe(name: impl Into<String>, inputs: Vec<Tensor<f64>>, build: Box<Build>) -> Probe<'static> {
    module_probe(name, ModelParams::new(), inputs, COMPONENT_TOLERANCE, build)
}

/// `Σ weights ⊙ x`, a scalar readout with a non-trivial upstream gradient.
fn readout(tape: &mut Tape<f64>, x: Var, rng_seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let w = tape.constant(normal(tape.dims(x), 1.0, &mut rng));
    let prod = tape.mul(x, w)?;
    Ok(tape.sum(prod))
}

/// Every contrastive loss at several temperatures, segmentation cross-entropy,
/// and the weighted objective over normalised embeddings.
pub fn loss_probes(seed: u64) -> Result<Vec<Probe<'static>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, d) = (10, 4);
    let mut probes = Vec::new();
    for tau in [0.1, 0.5, 1.0] {
        let cfg = ContrastConfig {
            tau,
            ..Default::default()
        };
        let lv = labels_cycling(n, 3, &mut rng);
        let la = labels_cycling(n, 3, &mut rng);
        let (v, a) = (normal(&[n, d], 0.5, &mut rng), normal(&[n, d], 0.5, &mut rng));
        let (lv2, la2) = (lv.clone(), la.clone());
        probes.push(input_probe(
            format!("cross_modal(tau={tau})"),
            vec![v.clone(), a.clone()],
            Box::new(move |t, _, x| cross_modal_on_tape(t, x[0], &lv2, x[1], &la2, &cfg)),
        ));
        let sym = ContrastConfig {
            symmetrize_cm: true,
            ..cfg
        };
        let (lv2, la2) = (lv.clone(), la.clone());
        probes.push(input_probe(
            format!("cross_modal_symmetrized(tau={tau})"),
            vec![v.clone(), a.clone()],
            Box::new(move |t, _, x| cross_modal_on_tape(t, x[0], &lv2, x[1], &la2, &sym)),
        ));
        let lv2 = lv.clone();
        probes.push(input_probe(
            format!("intra_modal_vis(tau={tau})"),
            vec![v],
            Box::new(move |t, _, x| intra_modal_on_tape(t, x[0], &lv2, &cfg)),
        ));
        let la2 = la.clone();
        probes.push(input_probe(
            format!("intra_modal_aux(tau={tau})"),
            vec![a],
            Box::new(move |t, _, x| intra_modal_on_tape(t, x[0], &la2, &cfg)),
        ));
    }

    let mut seg = Vec::new();
    for _ in 0..2 {
        let mut data: Vec<u8> = (0..9).map(|_| rng.random_range(0..4)).collect();
        data[4] = IGNORE;
        seg.push(LabelMap::new(3, 3, data)?);
    }
    let logits = normal(&[2, 3, 3, 4], 1.5, &mut rng);
    let seg2 = seg.clone();
    probes.push(input_probe(
        "cross_entropy_seg",
        vec![logits.clone()],
        Box::new(move |t, _, x| cross_entropy_on_tape(t, x[0], &seg2)),
    ));

    let cfg = ContrastConfig::default();
    let lv = labels_cycling(n, 3, &mut rng);
    let la = labels_cycling(n, 3, &mut rng);
    let (v, a) = (normal(&[n, d], 1.0, &mut rng), normal(&[n, d], 1.0, &mut rng));
    probes.push(input_probe(
        "full_objective(normalized)",
        vec![logits, v, a],
        Box::new(move |t, _, x| {
            let ce = cross_entropy_on_tape(t, x[0], &seg)?;
            let v = t.l2_normalize_rows(x[1])?;
            let a = t.l2_normalize_rows(x[2])?;
            let cm = cross_modal_on_tape(t, v, &lv, a, &la, &cfg)?;
            let lvis = intra_modal_on_tape(t, v, &lv, &cfg)?;
            let laux = intra_modal_on_tape(t, a, &la, &cfg)?;
            full_objective_on_tape(t, ce, Some(cm), Some(lvis), Some(laux), &cfg)
        }),
    ));
    Ok(probes)
}

fn random_params(module: &FusionModule, rng: &mut ChaCha8Rng) -> Result<ModelParams<f64>> {
    let mut p = ModelParams::new();
    module.init_params(&mut p, rng)?;
    for (_, t) in p.iter_mut() {
        for v in t.data_mut() {
            *v += 0.1 * rng.sample::<f64, _>(StandardNormal);
        }
    }
    Ok(p)
}

/// Coefficient MLPs, feature exchange, 1×1 fusion, and the whole module.
pub fn fusion_probes(seed: u64) -> Result<Vec<Probe<'static>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (b, h, w, c) = (2, 3, 3, 3);
    let mut probes = Vec::new();
    for act in [Activation::Relu, Activation::Tanh] {
        let module = FusionModule::new("fusion", c, act);
        let params = random_params(&module, &mut rng)?;
        let fv = normal(&[b, h, w, c], 1.0, &mut rng);
        let fa = normal(&[b, h, w, c], 1.0, &mut rng);
        let tag = format!("{act:?}").to_lowercase();

        let m = module.clone();
        probes.push(module_probe(
            format!("fusion.spatial_coefficient({tag})"),
            params.clone(),
            vec![fv.clone(), fa.clone()],
            COMPONENT_TOLERANCE,
            Box::new(move |t, p, x| {
                let s = m.spatial_coefficient(t, p, x[0], x[1])?;
                readout(t, s, 1)
            }),
        ));
        let m = module.clone();
        probes.push(module_probe(
            format!("fusion.channel_coefficient({tag})"),
            params.clone(),
            vec![fv.clone(), fa.clone()],
            COMPONENT_TOLERANCE,
            Box::new(move |t, p, x| {
                let s = m.channel_coefficient(t, p, x[0], x[1])?;
                readout(t, s, 2)
            }),
        ));
        let m = module.clone();
        probes.push(module_probe(
            format!("fusion.module({tag})"),
            params.clone(),
            vec![fv.clone(), fa.clone()],
            COMPONENT_TOLERANCE,
            Box::new(move |t, p, x| {
                let out = m.forward(t, p, x[0], x[1])?;
                let r1 = readout(t, out.fused, 3)?;
                let r2 = readout(t, out.vis, 4)?;
                let r3 = readout(t, out.aux, 5)?;
                let s = t.add(r1, r2)?;
                t.add(s, r3)
            }),
        ));
        let m = module;
        probes.push(module_probe(
            format!("fusion.fuse({tag})"),
            params,
            vec![fv.clone(), fa.clone()],
            COMPONENT_TOLERANCE,
            Box::new(move |t, p, x| {
                let f = m.fuse(t, p, x[0], x[1])?;
                readout(t, f, 6)
            }),
        ));
    }
    let fv = normal(&[b, h, w, c], 1.0, &mut rng);
    let fa = normal(&[b, h, w, c], 1.0, &mut rng);
    let s = normal(&[b, h, w, 1], 1.0, &mut rng);
    let cv = normal(&[b, c], 1.0, &mut rng);
    probes.push(input_probe(
        "fusion.update_features",
        vec![fv, fa, s, cv],
        Box::new(|t, _, x| {
            let (v, a) = update_features(t, x[0], x[1], x[2], x[3])?;
            let r1 = readout(t, v, 7)?;
            let r2 = readout(t, a, 8)?;
            t.add(r1, r2)
        }),
    ));
    Ok(probes)
}

/// Labels for the model probe: quadrant blocks so the coarse grid repeats classes.
fn quadrant_labels(h: usize, w: usize, classes: [[u8; 4]; 2]) -> Result<Vec<LabelMap>> {
    classes
        .iter()
        .map(|q| {
            let mut data = Vec::with_capacity(h * w);
            for y in 0..h {
                for x in 0..w {
                    let k = 2 * (2 * y / h) + 2 * x / w;
                    data.push(if (y + x) % 7 == 0 { IGNORE } else { q[k] });
                }
            }
            LabelMap::new(h, w, data)
        })
        .collect()
}

/// Gradient of the full training objective through the whole network.
///
/// One coordinate per parameter tensor is perturbed. Inputs are 32×32, the
/// smallest size whose representation grid holds more than one position.
pub fn model_probes(seed: u64) -> Result<Vec<Probe<'static>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = ModelConfig {
        height: 32,
        width: 32,
        num_classes: 4,
        ..Default::default()
    };
    let model = Model::new(cfg.clone())?;
    let mut params = model.init_params::<f64>(seed)?;
    for (_, t) in params.iter_mut() {
        for v in t.data_mut() {
            *v += 0.02 * rng.sample::<f64, _>(StandardNormal);
        }
    }
    let vis = Tensor::from_f64(&[2, 32, 32, 3], &(0..2 * 32 * 32 * 3).map(|_| rng.random()).collect::<Vec<f64>>())?;
    let aux = Tensor::from_f64(&[2, 32, 32, 1], &(0..2 * 32 * 32).map(|_| rng.random()).collect::<Vec<f64>>())?;
    let labels = quadrant_labels(32, 32, [[0, 1, 1, 2], [2, 0, 3, 1]])?;
    let train_cfg = TrainConfig::default();

    let mut coords = Vec::new();
    let mut offset = 0;
    for (_, t) in params.iter() {
        coords.push(offset + rng.random_range(0..t.len()));
        offset += t.len();
    }
    let point: Vec<f64> = params.iter().flat_map(|(_, t)| t.data().to_vec()).collect();
    let probe = Probe::new("model.full_objective", point, MODEL_TOLERANCE, move |x: &[f64]| {
        let mut p = params.clone();
        let mut offset = 0;
        for (_, t) in p.iter_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&x[offset..offset + n]);
            offset += n;
        }
        let (losses, grads) = step_gradients(&model, &p, &vis, &aux, &labels, &train_cfg, seed)?;
        let mut flat = Vec::with_capacity(x.len());
        for (name, t) in p.iter() {
            match grads.get(name) {
                Some(g) => flat.extend_from_slice(g.data()),
                None => flat.extend(std::iter::repeat_n(0.0, t.len())),
            }
        }
        Ok((losses.total, flat))
    })
    .with_coords(coords);
    Ok(vec![probe])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_matches() {
        let p = Probe::new("quad", vec![1.0, -2.0], 1e-8, |x| {
            Ok((x[0] * x[0] + 3.0 * x[0] * x[1], vec![2.0 * x[0] + 3.0 * x[1], 3.0 * x[0]]))
        });
        let out = check(&p, STEP).unwrap();
        assert!(out.passed(), "{out:?}");
        assert_eq!(out.checked, 2);
    }

    #[test]
    fn wrong_gradient_is_caught_and_named() {
        let p = Probe::new("broken-op", vec![0.5], 1e-4, |x| Ok((x[0].sin(), vec![x[0].sin()])));
        let report = Report::run(&[p], STEP).unwrap();
        assert!(!report.passed());
        assert_eq!(report.failures().next().unwrap().name, "broken-op");
    }

    #[test]
    fn nan_gradient_fails() {
        let p = Probe::new("nan", vec![1.0], 1e-4, |x| Ok((x[0], vec![f64::NAN])));
        assert!(!check(&p, STEP).unwrap().passed());
    }

    #[test]
    fn builtin_suites_pass() {
        for scope in Scope::ALL {
            let report = scope.run(7).unwrap();
            for o in &report.outcomes {
                eprintln!("{scope} {} checked={} worst={:.3e}", o.name, o.checked, o.worst_rel_err);
            }
            assert!(report.passed(), "{scope}: {:?}", report.failures().collect::<Vec<_>>());
        }
    }

    #[test]
    fn scope_names_round_trip() {
        for s in Scope::ALL {
            assert_eq!(s.to_string().parse::<Scope>().unwrap(), s);
        }
        assert!("everything".parse::<Scope>().is_err());
    }
}
