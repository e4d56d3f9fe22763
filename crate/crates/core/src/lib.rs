//! Supervised multi-modal contrastive learning for segmenting dark scenes.
//!
//! A two-stream encoder reads a visible image and an auxiliary (depth or
//! thermal) image, exchanges features between the streams at every stage,
//! and decodes a segmentation map. Training adds supervised contrastive
//! losses across and within the modalities. Everything is differentiated by
//! the reverse-mode [`Tape`].
//!
//! ```
//! use smmcl::data::{generate_set, GenConfig};
//! use smmcl::model::{Model, ModelConfig};
//! use smmcl::data::stack_batch;
//!
//! let gen = GenConfig { height: 32, width: 32, ..Default::default() };
//! let scenes = generate_set(&gen, 0, 2)?;
//! let model = Model::new(ModelConfig { height: 32, width: 32, ..Default::default() })?;
//! let params = model.init_params::<f32>(0)?;
//! let (vis, aux, _) = stack_batch(&scenes.iter().collect::<Vec<_>>())?;
//! let (logits, rep_vis, _) = model.infer(&params, &vis, &aux)?;
//! assert_eq!(logits.dims(), &[2, 32, 32, 6]);
//! assert_eq!(rep_vis.dims(), &[2, 2, 2, 32]);
//! # Ok::<(), smmcl::Error>(())
//! ```

pub mod config;
pub mod contrast;
pub mod data;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod io;
pub mod metrics;
pub mod model;
pub mod params;
pub mod sampling;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{DType, Real, Tensor};

#[cfg(doctest)]
mod book {
    macro_rules! chapter {
        ($name:ident, $file:literal) => {
            #[doc = include_str!(concat!("../../../book/src/", $file))]
            mod $name {}
        };
    }
    chapter!(introduction, "introduction.md");
    chapter!(tape, "tape.md");
    chapter!(losses, "losses.md");
    chapter!(sampling, "sampling.md");
    chapter!(fusion, "fusion.md");
    chapter!(data, "data.md");
    chapter!(training, "training.md");
    chapter!(evaluation, "evaluation.md");
    chapter!(gradcheck, "gradcheck.md");
    chapter!(cli, "cli.md");

    #[doc = include_str!("../../../README.md")]
    mod readme {}
}
