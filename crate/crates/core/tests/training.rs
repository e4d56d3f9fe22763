//! Training loop, variant flags, determinism and checkpoint persistence.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use smmcl::contrast::{cross_entropy_on_tape, ContrastConfig};
use smmcl::data::{generate_set, stack_batch, GenConfig, SceneSample};
use smmcl::model::{load_checkpoint, save_checkpoint, Model, ModelConfig};
use smmcl::params::ModelParams;
use smmcl::sampling::LabelMap;
use smmcl::train::{ablation_csv, ablation_matrix, step_gradients, train, TrainConfig, Variant};
use smmcl::{Error, Tape, Tensor};

fn small_model() -> ModelConfig {
    ModelConfig {
        height: 32,
        width: 32,
        num_classes: 4,
        ..Default::default()
    }
}

fn small_data(count: usize) -> Vec<SceneSample> {
    let cfg = GenConfig {
        height: 32,
        width: 32,
        num_classes: 4,
        ..Default::default()
    };
    generate_set(&cfg, 0, count).unwrap()
}

fn f64_batch(samples: &[SceneSample]) -> (Tensor<f64>, Tensor<f64>, Vec<LabelMap>) {
    let refs: Vec<&SceneSample> = samples.iter().collect();
    let (v, a, l) = stack_batch(&refs).unwrap();
    (v.cast(), a.cast(), l)
}

fn perturbed(model: &Model, seed: u64) -> ModelParams<f64> {
    let mut params = model.init_params::<f64>(seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, t) in params.iter_mut() {
        for v in t.data_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v += 0.02 * z;
        }
    }
    params
}

fn max_grad_diff(a: &smmcl::Gradients<f64>, b: &smmcl::Gradients<f64>) -> f64 {
    assert_eq!(a.named().keys().collect::<Vec<_>>(), b.named().keys().collect::<Vec<_>>());
    a.named()
        .iter()
        .map(|(k, g)| g.max_abs_diff(b.get(k).unwrap()).unwrap())
        .fold(0.0, f64::max)
}

#[test]
fn disabled_terms_reduce_to_cross_entropy() {
    let model = Model::new(small_model()).unwrap();
    let params = perturbed(&model, 1);
    let (vis, aux, labels) = f64_batch(&small_data(2));

    let mut tape = Tape::new();
    let bound = params.bind(&mut tape).unwrap();
    let (v, a) = (tape.constant(vis.clone()), tape.constant(aux.clone()));
    let out = model.forward(&mut tape, &bound, v, a).unwrap();
    let ce = cross_entropy_on_tape(&mut tape, out.logits, &labels).unwrap();
    let ce_value = tape.value(ce).item().unwrap();
    let manual = tape.backward(ce).unwrap();

    let model1 = Variant::Model1.apply(&TrainConfig::default());
    let (l1, g1) = step_gradients(&model, &params, &vis, &aux, &labels, &model1, 3).unwrap();
    assert_eq!(l1.total, ce_value);
    assert_eq!((l1.cm, l1.vis, l1.aux), (0.0, 0.0, 0.0));
    assert!(max_grad_diff(&g1, &manual) <= 1e-12);

    let zero = TrainConfig {
        contrast: ContrastConfig {
            lambda_cm: 0.0,
            lambda_vis: 0.0,
            lambda_aux: 0.0,
            ..Default::default()
        },
        ..Variant::Model4.apply(&TrainConfig::default())
    };
    let (l4, g4) = step_gradients(&model, &params, &vis, &aux, &labels, &zero, 3).unwrap();
    assert_eq!(l4.total, ce_value);
    assert!(max_grad_diff(&g4, &manual) <= 1e-12);
}

#[test]
fn variant_flags_select_terms() {
    let model = Model::new(small_model()).unwrap();
    let params = perturbed(&model, 2);
    let (vis, aux, labels) = f64_batch(&small_data(2));
    let base = TrainConfig::default();
    let losses = |v: Variant| step_gradients(&model, &params, &vis, &aux, &labels, &v.apply(&base), 5).unwrap().0;

    let m2 = losses(Variant::Model2);
    assert!(m2.cm > 0.0);
    assert_eq!((m2.vis, m2.aux), (0.0, 0.0));
    let m3 = losses(Variant::Model3);
    assert_eq!(m3.cm, 0.0);
    assert!(m3.vis > 0.0 && m3.aux > 0.0);
    let m4 = losses(Variant::Model4);
    assert_eq!((m4.cm, m4.vis, m4.aux), (m2.cm, m3.vis, m3.aux));
    let c = &base.contrast;
    let want = m4.ce + c.lambda_cm * m4.cm + c.lambda_vis * m4.vis + c.lambda_aux * m4.aux;
    assert!((m4.total - want).abs() <= 1e-12);
    for v in Variant::ALL {
        assert_eq!(v.to_string().parse::<Variant>().unwrap(), v);
    }
    assert!("model5".parse::<Variant>().is_err());
}

fn quick_config(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 4,
        seed,
        ..Default::default()
    }
}

#[test]
fn same_seed_is_bit_identical_and_training_moves_params() {
    let data = small_data(8);
    let cfg = quick_config(2, 9);
    let a = train(&data, None, &small_model(), &cfg).unwrap();
    let b = train(&data, None, &small_model(), &cfg).unwrap();
    assert_eq!(a.history, b.history);
    for ((na, ta), (nb, tb)) in a.params.iter().zip(b.params.iter()) {
        assert_eq!(na, nb);
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(ta), bits(tb), "{na}");
    }
    let init = Model::new(small_model()).unwrap().init_params::<f32>(9).unwrap();
    assert!(a.params.iter().zip(init.iter()).any(|((_, x), (_, y))| x != y));
    assert_eq!(a.history.len(), 2);
    assert!(a.history.iter().all(|r| r.miou.is_some() && r.loss_total.is_finite()));

    let other = train(&data, None, &small_model(), &quick_config(2, 10)).unwrap();
    assert_ne!(other.history, a.history);
}

#[test]
fn invalid_training_requests_are_rejected() {
    let data = small_data(2);
    let err = train(&data, None, &small_model(), &quick_config(0, 0)).unwrap_err();
    assert!(err.is_validation(), "{err}");
    assert!(train(&[], None, &small_model(), &quick_config(1, 0)).is_err());
    let wrong = ModelConfig {
        height: 64,
        width: 64,
        num_classes: 4,
        ..Default::default()
    };
    assert!(matches!(train(&data, None, &wrong, &quick_config(1, 0)), Err(Error::Config(_))));
}

#[test]
fn loss_decreases_on_default_data() {
    let data = generate_set(&GenConfig::default(), 0, 1000).unwrap();
    let cfg = TrainConfig {
        epochs: 6,
        eval_every: 1000,
        ..Default::default()
    };
    let out = train(&data, None, &ModelConfig::default(), &cfg).unwrap();
    let totals: Vec<f64> = out.history.iter().map(|r| r.loss_total).collect();
    let down = totals.windows(2).filter(|w| w[1] <= w[0]).count();
    assert!(down >= 4, "{totals:?}");
    assert!(totals[5] < totals[0]);
}

#[test]
fn ablation_grid_is_complete_and_repeatable() {
    let data = small_data(4);
    let cfg = quick_config(1, 0);
    let run = || ablation_matrix(&data, &data, &small_model(), &cfg, &[3], 2, |_, _| Ok(())).unwrap();
    let a = run();
    assert_eq!(a.iter().map(|c| c.variant).collect::<Vec<_>>(), Variant::ALL);
    assert!(a.iter().all(|c| c.seed == 3 && (0.0..=1.0).contains(&c.miou)));
    let csv = ablation_csv(&a);
    assert_eq!(csv.lines().count(), 5);
    assert_eq!(csv, ablation_csv(&run()));
    assert!(ablation_matrix(&data, &data, &small_model(), &cfg, &[], 1, |_, _| Ok(())).is_err());
}

#[test]
fn checkpoint_round_trip_gives_identical_forward() {
    let data = small_data(4);
    let out = train(&data, None, &small_model(), &quick_config(1, 4)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("ckpt");
    save_checkpoint(&ckpt, &small_model(), &out.params).unwrap();
    let (cfg, loaded) = load_checkpoint::<f32>(&ckpt).unwrap();
    assert_eq!(cfg, small_model());
    let model = Model::new(cfg).unwrap();
    let refs: Vec<&SceneSample> = data.iter().collect();
    let (vis, aux, _) = stack_batch(&refs).unwrap();
    let before = model.infer(&out.params, &vis, &aux).unwrap();
    let after = model.infer(&loaded, &vis, &aux).unwrap();
    let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&before.0), bits(&after.0));
    assert_eq!(bits(&before.1), bits(&after.1));

    // overwriting keeps a loadable checkpoint in place
    save_checkpoint(&ckpt, &small_model(), &loaded).unwrap();
    std::fs::remove_file(ckpt.join("manifest.txt")).unwrap();
    assert!(load_checkpoint::<f32>(&ckpt).is_err());
}
