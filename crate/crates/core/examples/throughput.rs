//! Times forward+backward steps on default-sized batches.
//!
//! `cargo run --release -p smmcl --example throughput -- [steps] [batch]`

use std::time::Instant;

use smmcl::data::{generate_set, stack_batch, GenConfig};
use smmcl::model::{Model, ModelConfig};
use smmcl::train::{step_gradients, TrainConfig};

fn main() -> smmcl::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(10);
    let batch: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(16);
    let scenes = generate_set(&GenConfig::default(), 0, batch)?;
    let refs: Vec<_> = scenes.iter().collect();
    let (vis, aux, labels) = stack_batch(&refs)?;
    let model = Model::new(ModelConfig::default())?;
    let params = model.init_params::<f32>(0)?;
    let cfg = TrainConfig::default();
    step_gradients(&model, &params, &vis, &aux, &labels, &cfg, 0)?;
    let start = Instant::now();
    for i in 0..steps {
        step_gradients(&model, &params, &vis, &aux, &labels, &cfg, i as u64)?;
    }
    let per = start.elapsed().as_secs_f64() / steps as f64;
    println!("train: {:.2} ms/step, {:.3} ms/sample", per * 1e3, per * 1e3 / batch as f64);
    let start = Instant::now();
    for _ in 0..steps {
        model.infer(&params, &vis, &aux)?;
    }
    let per = start.elapsed().as_secs_f64() / steps as f64;
    println!("infer: {:.2} ms/batch, {:.3} ms/sample", per * 1e3, per * 1e3 / batch as f64);
    Ok(())
}
