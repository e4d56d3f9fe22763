//! Dual-stream segmentation network.
//!
//! ```text
//! vis ─ stage1 ─┐        ┌─ stage2 ─┐        ┌─ ... stage4 ─┐
//!               ├ fusion1┤          ├ fusion2┤              ├ fusion4 ─ F4_fus
//! aux ─ stage1 ─┘   │    └─ stage2 ─┘   │    └─ ... stage4 ─┘
//!                   F1_fus              F2_fus
//! ```
//!
//! Each encoder stage halves the spatial size. Every fusion module feeds its
//! updated streams to the next stage and emits a fused map; the decoder
//! projects the four fused maps to a common width at quarter resolution,
//! sums them, mixes with a 3×3 convolution, and classifies. The projectors
//! map the last stage's features to `d`-dimensional representations on the
//! `H/16 × W/16` grid used for contrastive sampling.
//!
//! The decoder applies its 1×1 classifier before the final ×4 bilinear
//! upsampling rather than after; both maps are linear and per-pixel weights
//! of bilinear interpolation sum to one, so the logits are identical and the
//! classifier runs on 16× fewer pixels.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{Activation, FusionModule};
use crate::io::{read_tensor, write_atomic, write_tensor};
use crate::params::{kaiming_uniform, Bound, ModelParams};
use crate::sampling::Modality;
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

pub const STAGES: usize = 4;

/// Spatial reduction between input and representations.
pub const OUTPUT_STRIDE: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub stage_channels: [usize; STAGES],
    pub proj_dim: usize,
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    pub vis_channels: usize,
    pub aux_channels: usize,
    pub decoder_width: usize,
    /// Feed the projectors the exchanged stage-4 features instead of the raw ones.
    pub project_updated: bool,
    pub mlp_activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            stage_channels: [8, 16, 32, 64],
            proj_dim: 32,
            num_classes: 6,
            height: 64,
            width: 64,
            vis_channels: 3,
            aux_channels: 1,
            decoder_width: 16,
            project_updated: false,
            mlp_activation: Activation::Relu,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let c = &self.stage_channels;
        if c[0] == 0 || c.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!("stage_channels must be strictly increasing and positive, got {c:?}")));
        }
        if self.proj_dim == 0 || self.decoder_width == 0 || self.vis_channels == 0 || self.aux_channels == 0 {
            return Err(Error::Config("widths must be positive".into()));
        }
        if self.num_classes < 2 || self.num_classes > 255 {
            return Err(Error::Config(format!("num_classes must be in [2, 255], got {}", self.num_classes)));
        }
        check_input_dims(self.height, self.width)
    }

    /// Representation grid `[H/16, W/16]`.
    pub fn rep_dims(&self) -> (usize, usize) {
        (self.height / OUTPUT_STRIDE, self.width / OUTPUT_STRIDE)
    }
}

fn check_input_dims(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || !h.is_multiple_of(OUTPUT_STRIDE) || !w.is_multiple_of(OUTPUT_STRIDE) {
        return Err(Error::shape(format!(
            "input {h}x{w} is not divisible by {OUTPUT_STRIDE}"
        )));
    }
    Ok(())
}

fn stream(m: Modality) -> &'static str {
    match m {
        Modality::Visible => "vis",
        Modality::Auxiliary => "aux",
    }
}

/// Tape handles produced by [`Model::forward`].
#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    /// `[B, H, W, C]`
    pub logits: Var,
    /// `[B, H/16, W/16, d]`
    pub rep_vis: Var,
    pub rep_aux: Var,
}

#[derive(Clone, Debug)]
pub struct Model {
    cfg: ModelConfig,
    fusion: Vec<FusionModule>,
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let fusion = cfg
            .stage_channels
            .iter()
            .enumerate()
            .map(|(i, &c)| FusionModule::new(format!("fusion{}", i + 1), c, cfg.mlp_activation))
            .collect();
        Ok(Model { cfg, fusion })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn fusion_module(&self, stage: usize) -> &FusionModule {
        &self.fusion[stage]
    }

    fn conv_shapes(&self) -> Vec<(String, [usize; 4])> {
        let c = &self.cfg;
        let mut shapes = Vec::new();
        for m in [Modality::Visible, Modality::Auxiliary] {
            let mut c_in = match m {
                Modality::Visible => c.vis_channels,
                Modality::Auxiliary => c.aux_channels,
            };
            for (s, &c_out) in c.stage_channels.iter().enumerate() {
                let base = format!("encoder.{}.stage{}", stream(m), s + 1);
                shapes.push((format!("{base}.conv1"), [3, 3, c_in, c_out]));
                shapes.push((format!("{base}.conv2"), [3, 3, c_out, c_out]));
                c_in = c_out;
            }
        }
        let e = c.decoder_width;
        shapes.push(("decoder.mix".into(), [3, 3, e, e]));
        shapes
    }

    fn linear_shapes(&self) -> Vec<(String, [usize; 2])> {
        let c = &self.cfg;
        let c4 = c.stage_channels[STAGES - 1];
        let mut shapes = Vec::new();
        for (s, &ch) in c.stage_channels.iter().enumerate() {
            shapes.push((format!("decoder.lateral{}", s + 1), [ch, c.decoder_width]));
        }
        shapes.push(("decoder.classifier".into(), [c.decoder_width, c.num_classes]));
        for m in [Modality::Visible, Modality::Auxiliary] {
            let base = format!("projector.{}", stream(m));
            shapes.push((format!("{base}.0"), [c4, c4]));
            shapes.push((format!("{base}.1"), [c4, c4]));
            shapes.push((format!("{base}.2"), [c4, c.proj_dim]));
        }
        shapes
    }

    /// Fresh parameters: Kaiming-uniform weights, zero biases, seeded.
    pub fn init_params<T: Real>(&self, seed: u64) -> Result<ModelParams<T>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ModelParams::new();
        for (name, dims) in self.conv_shapes() {
            let fan_in = dims[0] * dims[1] * dims[2];
            p.insert(format!("{name}.weight"), kaiming_uniform(&dims, fan_in, &mut rng))?;
            p.insert(format!("{name}.bias"), Tensor::zeros(&[dims[3]]))?;
        }
        for f in &self.fusion {
            f.init_params(&mut p, &mut rng)?;
        }
        for (name, [fan_in, fan_out]) in self.linear_shapes() {
            p.insert(format!("{name}.weight"), kaiming_uniform(&[fan_in, fan_out], fan_in, &mut rng))?;
            p.insert(format!("{name}.bias"), Tensor::zeros(&[fan_out]))?;
        }
        Ok(p)
    }

    /// Checks that `params` holds exactly the tensors this architecture needs.
    pub fn check_params<T: Real>(&self, params: &ModelParams<T>) -> Result<()> {
        let expected = self.init_params::<T>(0)?;
        for (name, t) in expected.iter() {
            let got = params
                .get(name)
                .map_err(|_| Error::Config(format!("checkpoint lacks `{name}`")))?;
            if got.dims() != t.dims() {
                return Err(Error::Config(format!(
                    "`{name}` has dims {:?}, model expects {:?}",
                    got.dims(),
                    t.dims()
                )));
            }
        }
        if let Some(extra) = params.names().find(|n| expected.get(n).is_err()) {
            return Err(Error::Config(format!("checkpoint has unexpected tensor `{extra}`")));
        }
        Ok(())
    }

    fn conv<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, name: &str, x: Var, stride: usize) -> Result<Var> {
        let w = p.get(&format!("{name}.weight"))?;
        let b = p.get(&format!("{name}.bias"))?;
        tape.conv2d(x, w, Some(b), stride, 1)
    }

    fn linear<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, name: &str, x: Var) -> Result<Var> {
        let w = p.get(&format!("{name}.weight"))?;
        let b = p.get(&format!("{name}.bias"))?;
        tape.linear(x, w, Some(b))
    }

    /// Stride-2 3×3 conv + ReLU, then stride-1 3×3 conv + ReLU. `stage` is 0-based.
    pub fn encode_stage<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        x: Var,
        modality: Modality,
        stage: usize,
    ) -> Result<Var> {
        let dims = tape.dims(x);
        if dims.len() != 4 || !dims[1].is_multiple_of(2) || !dims[2].is_multiple_of(2) {
            return Err(Error::shape(format!(
                "encoder stage needs even spatial dims, got {dims:?}"
            )));
        }
        let base = format!("encoder.{}.stage{}", stream(modality), stage + 1);
        let h = self.conv(tape, p, &format!("{base}.conv1"), x, 2)?;
        let h = tape.relu(h);
        let h = self.conv(tape, p, &format!("{base}.conv2"), h, 1)?;
        Ok(tape.relu(h))
    }

    fn project<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var, modality: Modality) -> Result<Var> {
        let base = format!("projector.{}", stream(modality));
        let h = self.linear(tape, p, &format!("{base}.0"), x)?;
        let h = tape.relu(h);
        let h = self.linear(tape, p, &format!("{base}.1"), h)?;
        let h = tape.relu(h);
        self.linear(tape, p, &format!("{base}.2"), h)
    }

    /// Full forward pass over `[B, H, W, 3]` visible and `[B, H, W, 1]` auxiliary images.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, vis: Var, aux: Var) -> Result<ForwardOutput> {
        let c = &self.cfg;
        let (vd, ad) = (tape.dims(vis).to_vec(), tape.dims(aux).to_vec());
        if vd.len() != 4 || ad.len() != 4 || vd[..3] != ad[..3] {
            return Err(Error::shape(format!("input pair {vd:?} / {ad:?}")));
        }
        if vd[3] != c.vis_channels || ad[3] != c.aux_channels {
            return Err(Error::shape(format!(
                "expected {} visible and {} auxiliary channels, got {} and {}",
                c.vis_channels, c.aux_channels, vd[3], ad[3]
            )));
        }
        let (batch, height, width) = (vd[0], vd[1], vd[2]);
        check_input_dims(height, width)?;

        let (mut xv, mut xa) = (vis, aux);
        let mut fused = Vec::with_capacity(STAGES);
        let mut last = (vis, aux);
        for (s, module) in self.fusion.iter().enumerate() {
            let fv = self.encode_stage(tape, p, xv, Modality::Visible, s)?;
            let fa = self.encode_stage(tape, p, xa, Modality::Auxiliary, s)?;
            let out = module.forward(tape, p, fv, fa)?;
            fused.push(out.fused);
            last = if c.project_updated { (out.vis, out.aux) } else { (fv, fa) };
            xv = out.vis;
            xa = out.aux;
        }

        let (qh, qw) = (height / 4, width / 4);
        let mut sum: Option<Var> = None;
        for (s, f) in fused.into_iter().enumerate() {
            let lateral = self.linear(tape, p, &format!("decoder.lateral{}", s + 1), f)?;
            let lateral = if tape.dims(lateral)[1..3] == [qh, qw] {
                lateral
            } else {
                tape.resize_bilinear(lateral, qh, qw)?
            };
            sum = Some(match sum {
                None => lateral,
                Some(acc) => tape.add(acc, lateral)?,
            });
        }
        let mixed = self.conv(tape, p, "decoder.mix", sum.expect("four stages"), 1)?;
        let mixed = tape.relu(mixed);
        let coarse = self.linear(tape, p, "decoder.classifier", mixed)?;
        let logits = tape.resize_bilinear(coarse, height, width)?;
        debug_assert_eq!(tape.dims(logits), [batch, height, width, c.num_classes]);

        let rep_vis = self.project(tape, p, last.0, Modality::Visible)?;
        let rep_aux = self.project(tape, p, last.1, Modality::Auxiliary)?;
        Ok(ForwardOutput {
            logits,
            rep_vis,
            rep_aux,
        })
    }

    /// Gradient-free forward returning `(logits, rep_vis, rep_aux)` tensors.
    pub fn infer<T: Real>(
        &self,
        params: &ModelParams<T>,
        vis: &Tensor<T>,
        aux: &Tensor<T>,
    ) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
        let mut tape = Tape::new();
        let bound = params.bind_frozen(&mut tape);
        let v = tape.constant(vis.clone());
        let a = tape.constant(aux.clone());
        let out = self.forward(&mut tape, &bound, v, a)?;
        Ok((
            tape.value(out.logits).clone(),
            tape.value(out.rep_vis).clone(),
            tape.value(out.rep_aux).clone(),
        ))
    }
}

/// Per-pixel argmax of `[B, H, W, C]` logits.
pub fn predict<T: Real>(logits: &Tensor<T>) -> Vec<Vec<u8>> {
    let dims = logits.dims();
    let (batch, c) = (dims[0], dims[3]);
    let per = dims[1] * dims[2];
    (0..batch)
        .map(|b| {
            logits.data()[b * per * c..(b + 1) * per * c]
                .chunks_exact(c)
                .map(|row| {
                    let mut best = 0;
                    for k in 1..c {
                        if row[k] > row[best] {
                            best = k;
                        }
                    }
                    best as u8
                })
                .collect()
        })
        .collect()
}

const MANIFEST: &str = "manifest.txt";
const MODEL_CONFIG: &str = "model.toml";

fn tensor_file(name: &str) -> String {
    format!("{name}.smt")
}

/// Writes a checkpoint directory: one tensor file per parameter, a
/// `name<TAB>file` manifest, and the model config as TOML. The directory is
/// assembled under a temporary name and swapped in by rename.
pub fn save_checkpoint<T: Real>(dir: &Path, cfg: &ModelConfig, params: &ModelParams<T>) -> Result<()> {
    let staging = dir.with_extension("partial");
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
    }
    fs::create_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
    let mut manifest = String::new();
    for (name, t) in params.iter() {
        let file = tensor_file(name);
        write_tensor(&staging.join(&file), t)?;
        manifest.push_str(&format!("{name}\t{file}\n"));
    }
    write_atomic(&staging.join(MANIFEST), manifest.as_bytes())?;
    let toml = toml::to_string(cfg).map_err(|e| Error::Config(e.to_string()))?;
    write_atomic(&staging.join(MODEL_CONFIG), toml.as_bytes())?;

    let retired = dir.with_extension("old");
    if dir.exists() {
        if retired.exists() {
            fs::remove_dir_all(&retired).map_err(|e| Error::io(&retired, e))?;
        }
        fs::rename(dir, &retired).map_err(|e| Error::io(dir, e))?;
    }
    fs::rename(&staging, dir).map_err(|e| Error::io(dir, e))?;
    if retired.exists() {
        fs::remove_dir_all(&retired).map_err(|e| Error::io(&retired, e))?;
    }
    Ok(())
}

pub fn load_model_config(dir: &Path) -> Result<ModelConfig> {
    let path = dir.join(MODEL_CONFIG);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    toml::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))
}

pub fn load_checkpoint<T: Real>(dir: &Path) -> Result<(ModelConfig, ModelParams<T>)> {
    let cfg = load_model_config(dir)?;
    let path = dir.join(MANIFEST);
    let manifest = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut params = ModelParams::new();
    for line in manifest.lines().filter(|l| !l.trim().is_empty()) {
        let (name, file) = line
            .split_once('\t')
            .ok_or_else(|| Error::format(&path, format!("malformed manifest line `{line}`")))?;
        if file.contains('/') || file.contains("..") {
            return Err(Error::format(&path, format!("manifest entry escapes checkpoint: `{file}`")));
        }
        params.insert(name, read_tensor(&dir.join(file))?)?;
    }
    Model::new(cfg.clone())?.check_params(&params)?;
    Ok((cfg, params))
}
