//! One PASS/FAIL line per acceptance criterion.
//!
//! The ablation criterion needs hours of training. It evaluates, in order of
//! preference: a fresh run when `SMMCL_FULL_ACCEPTANCE=1`, the CSV named by
//! `SMMCL_ACCEPTANCE_ABLATION`, or the recorded `results/ablation.csv`.
//! Only the recorded file is judged without being enforced: its line still
//! reads PASS or FAIL, but it describes a stored artifact rather than code run
//! here, so it does not set the exit status.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use smmcl::contrast::{cross_entropy_seg, cross_modal_loss, full_objective, info_nce, intra_modal_loss, ContrastConfig};
use smmcl::data::{generate_set, read_dataset, stack_batch, write_dataset, GenConfig, SceneSample};
use smmcl::fusion::update_features;
use smmcl::gradcheck::Scope;
use smmcl::model::{load_checkpoint, save_checkpoint, Model, ModelConfig};
use smmcl::sampling::{compute_n, sample_positions, LabelMap, Modality, IGNORE};
use smmcl::train::{ablation_csv, ablation_matrix, train, TrainConfig};
use smmcl::{Tape, Tensor};

mod common;

use common::{cfg, instance, oracle_ce, oracle_contrast, set};

type Verdict = Result<String, String>;

/// Per variant: mIoU values and separability values.
type Columns = BTreeMap<String, (Vec<f64>, Vec<f64>)>;

enum Check {
    Ran(Verdict),
    Recorded(Verdict),
    Skipped,
}

type Criterion = (&'static str, fn() -> Check);

fn ensure(ok: bool, msg: impl Into<String>) -> std::result::Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn loss_oracles() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0f64;
    for _ in 0..200 {
        let ins = instance(&mut rng);
        let (v, a) = (set(&ins.v, &ins.vl, Modality::Visible), set(&ins.a, &ins.al, Modality::Auxiliary));
        let c = cfg(ins.tau);
        let pairs = [
            (cross_modal_loss(&v, &a, &c), oracle_contrast(&ins.v, &ins.vl, &ins.a, &ins.al, ins.tau, false)),
            (intra_modal_loss(&v, &c), oracle_contrast(&ins.v, &ins.vl, &ins.v, &ins.vl, ins.tau, true)),
            (intra_modal_loss(&a, &c), oracle_contrast(&ins.a, &ins.al, &ins.a, &ins.al, ins.tau, true)),
        ];
        for (got, want) in pairs {
            worst = worst.max((got.map_err(|e| e.to_string())? - want).abs());
        }

        let (b, h, w, k) = (rng.random_range(1..3), rng.random_range(1..5), rng.random_range(1..5), rng.random_range(2..5));
        let logits: Vec<f64> = (0..b * h * w * k).map(|_| rng.random_range(-4.0..4.0)).collect();
        let flat: Vec<u8> = (0..b * h * w).map(|_| rng.random_range(0..k as u8)).collect();
        let maps: Vec<LabelMap> = flat.chunks(h * w).map(|c| LabelMap::new(h, w, c.to_vec()).unwrap()).collect();
        let got = cross_entropy_seg(&Tensor::new(&[b, h, w, k], logits.clone()).unwrap(), &maps).map_err(|e| e.to_string())?;
        worst = worst.max((got - oracle_ce(&logits, &flat, k)).abs());
    }
    let took = start.elapsed();
    ensure(worst <= 1e-10, format!("max abs error {worst:.3e} > 1e-10"))?;
    ensure(took < Duration::from_secs(10), format!("took {took:?}"))?;
    Ok(format!("200 instances, max abs error {worst:.1e}, {took:.2?}"))
}

fn gradient_suite() -> Verdict {
    let start = Instant::now();
    let mut lines = Vec::new();
    for scope in Scope::ALL {
        let report = scope.run(7).map_err(|e| e.to_string())?;
        let worst = report.worst().map_or(0.0, |o| o.worst_rel_err);
        if let Some(f) = report.failures().next() {
            return Err(format!("{scope}/{}: rel err {:.3e} > {:.0e}", f.name, f.worst_rel_err, f.tolerance));
        }
        lines.push(format!("{scope} {} probes worst {worst:.1e}", report.outcomes.len()));
    }
    let took = start.elapsed();
    ensure(took < Duration::from_secs(120), format!("took {took:?}"))?;
    Ok(format!("{}, {took:.1?}", lines.join("; ")))
}

fn closed_forms() -> Verdict {
    let zero_negs = info_nce(&[0.3, -0.2], &[0.9, 0.1], &[], 0.1).map_err(|e| e.to_string())?;
    ensure(zero_negs == 0.0, format!("zero negatives gave {zero_negs}"))?;
    for tau in [0.1, 1.0] {
        let got = info_nce(&[1.0, 0.0], &[1.0, 0.0], &[0.0, 1.0], tau).map_err(|e| e.to_string())?;
        let want = (1.0 + (-1.0 / tau).exp()).ln();
        ensure((got - want).abs() <= 1e-12, format!("tau {tau}: {got} vs {want}"))?;
    }
    let zero = ContrastConfig {
        lambda_cm: 0.0,
        lambda_vis: 0.0,
        lambda_aux: 0.0,
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..1000 {
        let ce: f64 = rng.random_range(0.0..5.0);
        let total = full_objective(ce, rng.random(), rng.random(), rng.random(), &zero);
        ensure(total.to_bits() == ce.to_bits(), format!("{total} != {ce}"))?;
    }
    Ok("zero negatives, two-vector form at tau 0.1 and 1, lambda = 0 bitwise".into())
}

fn sampler_properties() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut violations = 0usize;
    let mut batches = 0;
    while batches < 100 {
        let (b, h, w) = (rng.random_range(1..5), rng.random_range(1..7), rng.random_range(1..7));
        let classes = rng.random_range(1..5u8);
        let labels: Vec<LabelMap> = (0..b)
            .map(|_| {
                let d = (0..h * w).map(|_| if rng.random_bool(0.15) { IGNORE } else { rng.random_range(0..classes) }).collect();
                LabelMap::new(h, w, d).unwrap()
            })
            .collect();
        let Ok(n) = compute_n(&labels, 8) else { continue };
        let seed = rng.random();
        let points = sample_positions(&labels, n, seed).map_err(|e| e.to_string())?;
        violations += (points != sample_positions(&labels, n, seed).map_err(|e| e.to_string())?) as usize;
        let mut per: BTreeMap<(usize, u8), usize> = BTreeMap::new();
        let mut seen = BTreeSet::new();
        for p in &points {
            violations += (p.label == IGNORE) as usize;
            violations += (labels[p.batch].data()[p.position] != p.label) as usize;
            violations += (!seen.insert((p.batch, p.position))) as usize;
            *per.entry((p.batch, p.label)).or_default() += 1;
        }
        violations += per.values().filter(|&&k| k > n).count();
        batches += 1;
    }
    ensure(violations == 0, format!("{violations} violations"))?;
    Ok("100 batches, 0 violations".into())
}

fn parse_ablation(text: &str) -> std::result::Result<Columns, String> {
    let mut rows = Columns::new();
    for line in text.lines().skip(1).filter(|l| !l.trim().is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(format!("malformed row `{line}`"));
        }
        let entry = rows.entry(f[0].to_string()).or_default();
        entry.0.push(f[2].parse().map_err(|_| format!("bad miou in `{line}`"))?);
        if let Ok(s) = f[3].parse() {
            entry.1.push(s);
        }
    }
    Ok(rows)
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn judge_ablation(text: &str, source: &str) -> Verdict {
    let rows = parse_ablation(text)?;
    let get = |v: &str| rows.get(v).ok_or_else(|| format!("{source}: no {v} rows"));
    let (m1, m4) = (get("model1")?, get("model4")?);
    ensure(m1.0.len() >= 5 && m4.0.len() >= 5, format!("{source}: fewer than 5 seeds"))?;
    ensure(m1.1.len() == m1.0.len() && m4.1.len() == m4.0.len(), format!("{source}: missing separability"))?;
    let gain = 100.0 * (mean(&m4.0) - mean(&m1.0));
    let (s1, s4) = (mean(&m1.1), mean(&m4.1));
    let detail = format!(
        "{source}: model1 {:.2} model4 {:.2} mIoU (gain {gain:+.2} points, need +1.00), separability {s1:.4} -> {s4:.4}",
        100.0 * mean(&m1.0),
        100.0 * mean(&m4.0)
    );
    ensure(gain >= 1.0 && s4 > s1, detail.clone())?;
    Ok(detail)
}

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn ablation_direction() -> Check {
    if std::env::var("SMMCL_FULL_ACCEPTANCE").as_deref() == Ok("1") {
        let start = Instant::now();
        let gen = GenConfig::default();
        let sets = generate_set(&gen, 0, 1000).and_then(|t| Ok((t, generate_set(&gen, 1000, 200)?)));
        let (train_set, eval_set) = match sets {
            Ok(s) => s,
            Err(e) => return Check::Ran(Err(e.to_string())),
        };
        let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
        let cells = ablation_matrix(
            &train_set,
            &eval_set,
            &ModelConfig::default(),
            &TrainConfig::default(),
            &[0, 1, 2, 3, 4],
            threads,
            |_, _| Ok(()),
        );
        return Check::Ran(match cells {
            Ok(cells) => judge_ablation(&ablation_csv(&cells), &format!("fresh run in {:.0?}", start.elapsed())),
            Err(e) => Err(e.to_string()),
        });
    }
    if let Some(path) = std::env::var_os("SMMCL_ACCEPTANCE_ABLATION") {
        let path = PathBuf::from(path);
        return Check::Ran(match std::fs::read_to_string(&path) {
            Ok(text) => judge_ablation(&text, &path.display().to_string()),
            Err(e) => Err(format!("{}: {e}", path.display())),
        });
    }
    match std::fs::read_to_string(workspace_root().join("results/ablation.csv")) {
        Ok(text) => Check::Recorded(judge_ablation(&text, "recorded results/ablation.csv")),
        Err(_) => Check::Skipped,
    }
}

fn persistence() -> Verdict {
    let gen = GenConfig {
        height: 32,
        width: 32,
        num_classes: 4,
        ..Default::default()
    };
    let model_cfg = ModelConfig {
        height: 32,
        width: 32,
        num_classes: 4,
        ..Default::default()
    };
    let data = generate_set(&gen, 0, 8).map_err(|e| e.to_string())?;
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 4,
        seed: 5,
        ..Default::default()
    };
    let a = train(&data, None, &model_cfg, &cfg).map_err(|e| e.to_string())?;
    let b = train(&data, None, &model_cfg, &cfg).map_err(|e| e.to_string())?;
    let same_history = a.history.iter().zip(&b.history).all(|(x, y)| {
        x.csv_row() == y.csv_row() && x.loss_total.to_bits() == y.loss_total.to_bits()
    });
    ensure(same_history && a.history.len() == b.history.len(), "histories differ")?;

    let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let ckpt = dir.path().join("ckpt");
    save_checkpoint(&ckpt, &model_cfg, &a.params).map_err(|e| e.to_string())?;
    let (loaded_cfg, loaded) = load_checkpoint::<f32>(&ckpt).map_err(|e| e.to_string())?;
    let model = Model::new(loaded_cfg).map_err(|e| e.to_string())?;
    let refs: Vec<&SceneSample> = data.iter().collect();
    let (vis, aux, _) = stack_batch(&refs).map_err(|e| e.to_string())?;
    let x = model.infer(&a.params, &vis, &aux).map_err(|e| e.to_string())?;
    let y = model.infer(&loaded, &vis, &aux).map_err(|e| e.to_string())?;
    ensure(bits(&x.0) == bits(&y.0) && bits(&x.1) == bits(&y.1), "checkpoint forward differs")?;

    let ds = dir.path().join("ds");
    write_dataset(&data, &ds).map_err(|e| e.to_string())?;
    let back = read_dataset(&ds).map_err(|e| e.to_string())?;
    let exact = back.len() == data.len()
        && data.iter().zip(&back).all(|(p, q)| {
            bits(&p.visible) == bits(&q.visible) && bits(&p.auxiliary) == bits(&q.auxiliary) && p.label == q.label
        });
    ensure(exact, "dataset round trip differs")?;
    Ok("histories, checkpoint forward and dataset all bit-identical".into())
}

fn fusion_identity() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..20 {
        let dims = [rng.random_range(1..3), rng.random_range(1..5), rng.random_range(1..5), rng.random_range(1..6)];
        let n: usize = dims.iter().product();
        let mut draw = |n: usize| (0..n).map(|_| rng.random_range(-10.0..10.0)).collect::<Vec<f64>>();
        let v = Tensor::new(&dims, draw(n)).unwrap();
        let a = Tensor::new(&dims, draw(n)).unwrap();
        let mut tape = Tape::new();
        let (vv, av) = (tape.constant(v.clone()), tape.constant(a.clone()));
        let s = tape.constant(Tensor::zeros(&[dims[0], dims[1], dims[2], 1]));
        let c = tape.constant(Tensor::zeros(&[dims[0], dims[3]]));
        let (vn, an) = update_features(&mut tape, vv, av, s, c).map_err(|e| e.to_string())?;
        ensure(tape.value(vn) == &v && tape.value(an) == &a, "update changed its inputs")?;
    }
    Ok("S = 0, c = 0 returns both inputs exactly".into())
}

fn main() {
    let criteria: [Criterion; 7] = [
        ("loss oracle equivalence", || Check::Ran(loss_oracles())),
        ("gradient suite", || Check::Ran(gradient_suite())),
        ("closed forms", || Check::Ran(closed_forms())),
        ("sampler properties", || Check::Ran(sampler_properties())),
        ("ablation direction", ablation_direction),
        ("determinism and persistence", || Check::Ran(persistence())),
        ("fusion identity", || Check::Ran(fusion_identity())),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let n = i + 1;
        match run() {
            Check::Ran(Ok(detail)) | Check::Recorded(Ok(detail)) => println!("criterion {n} {name}: PASS ({detail})"),
            Check::Ran(Err(detail)) => {
                failed += 1;
                println!("criterion {n} {name}: FAIL ({detail})");
            }
            Check::Recorded(Err(detail)) => {
                println!("criterion {n} {name}: FAIL ({detail}; not enforced, set SMMCL_ACCEPTANCE_ABLATION to enforce)")
            }
            Check::Skipped => println!(
                "criterion {n} {name}: SKIP (set SMMCL_FULL_ACCEPTANCE=1 or SMMCL_ACCEPTANCE_ABLATION=<ablation.csv>)"
            ),
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
