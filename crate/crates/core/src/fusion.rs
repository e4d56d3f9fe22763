//! Cross-modal intermediate module: shared spatial and channel coefficients,
//! the additive feature exchange between the two streams, and the 1×1 fusion.
//!
//! For a feature pair `F_vis, F_aux` of shape `[B, h, w, c]`:
//!
//! * the spatial coefficient `S` (`[B, h, w, 1]`) is a per-pixel three-layer MLP
//!   over the `2c` concatenated channels followed by a sigmoid;
//! * the channel coefficient (`[B, c]`) is a three-layer MLP over the `4c`
//!   concatenation of global max- and average-pooled features, then a sigmoid;
//! * each stream receives `S ∗ other + c ⊛ other`;
//! * the fused map is a 1×1 convolution of the two updated streams.
//!
//! Channel plans per module with width `c`:
//!
//! | MLP     | layer 1      | layer 2      | layer 3    |
//! |---------|--------------|--------------|------------|
//! | spatial | `[2c, 2c]`   | `[2c, 2c]`   | `[2c, 1]`  |
//! | channel | `[4c, 4c]`   | `[4c, 4c]`   | `[4c, c]`  |

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{kaiming_uniform, Bound, ModelParams};
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

/// Activation between the hidden layers of the coefficient MLPs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    pub fn apply<T: Real>(self, tape: &mut Tape<T>, x: Var) -> Var {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::Tanh => tape.tanh(x),
        }
    }
}

/// One intermediate module, addressing its weights under `prefix`.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionModule {
    prefix: String,
    channels: usize,
    activation: Activation,
}

/// Outputs of [`FusionModule::forward`].
#[derive(Clone, Copy, Debug)]
pub struct FusionOutput {
    pub spatial: Var,
    pub channel: Var,
    pub vis: Var,
    pub aux: Var,
    pub fused: Var,
}

impl FusionModule {
    pub fn new(prefix: impl Into<String>, channels: usize, activation: Activation) -> Self {
        FusionModule {
            prefix: prefix.into(),
            channels,
            activation,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    fn name(&self, part: &str) -> String {
        format!("{}.{part}", self.prefix)
    }

    /// `(name, [in, out])` for every MLP layer and the fusion projection.
    pub fn layer_plan(&self) -> Vec<(String, [usize; 2])> {
        let c = self.channels;
        vec![
            (self.name("spatial.0"), [2 * c, 2 * c]),
            (self.name("spatial.1"), [2 * c, 2 * c]),
            (self.name("spatial.2"), [2 * c, 1]),
            (self.name("channel.0"), [4 * c, 4 * c]),
            (self.name("channel.1"), [4 * c, 4 * c]),
            (self.name("channel.2"), [4 * c, c]),
            (self.name("fuse"), [2 * c, c]),
        ]
    }

    /// Registers Kaiming-uniform weights and zero biases.
    pub fn init_params<T: Real>(&self, params: &mut ModelParams<T>, rng: &mut ChaCha8Rng) -> Result<()> {
        for (name, [fan_in, fan_out]) in self.layer_plan() {
            params.insert(format!("{name}.weight"), kaiming_uniform(&[fan_in, fan_out], fan_in, rng))?;
            params.insert(format!("{name}.bias"), Tensor::zeros(&[fan_out]))?;
        }
        Ok(())
    }

    fn layer<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, name: &str, x: Var) -> Result<Var> {
        let w = p.get(&format!("{name}.weight"))?;
        let b = p.get(&format!("{name}.bias"))?;
        tape.linear(x, w, Some(b))
    }

    fn mlp<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, which: &str, x: Var) -> Result<Var> {
        let h = self.layer(tape, p, &self.name(&format!("{which}.0")), x)?;
        let h = self.activation.apply(tape, h);
        let h = self.layer(tape, p, &self.name(&format!("{which}.1")), h)?;
        let h = self.activation.apply(tape, h);
        let out = self.layer(tape, p, &self.name(&format!("{which}.2")), h)?;
        Ok(tape.sigmoid(out))
    }

    fn check_pair<T: Real>(&self, tape: &Tape<T>, vis: Var, aux: Var) -> Result<()> {
        let (dv, da) = (tape.dims(vis), tape.dims(aux));
        if dv != da || dv.len() != 4 || dv[3] != self.channels {
            return Err(Error::shape(format!(
                "{}: feature pair {dv:?} / {da:?} does not match {} channels",
                self.prefix, self.channels
            )));
        }
        Ok(())
    }

    /// `[B, h, w, 1]` map in `(0, 1)`.
    pub fn spatial_coefficient<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, vis: Var, aux: Var) -> Result<Var> {
        self.check_pair(tape, vis, aux)?;
        let both = tape.concat(vis, aux)?;
        self.mlp(tape, p, "spatial", both)
    }

    /// `[B, c]` vector in `(0, 1)`.
    pub fn channel_coefficient<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, vis: Var, aux: Var) -> Result<Var> {
        self.check_pair(tape, vis, aux)?;
        let both = tape.concat(vis, aux)?;
        let max = tape.global_max_pool(both)?;
        let avg = tape.global_avg_pool(both)?;
        let pooled = tape.concat(max, avg)?;
        self.mlp(tape, p, "channel", pooled)
    }

    /// 1×1 convolution of the concatenated updated streams down to `c` channels.
    pub fn fuse<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, vis: Var, aux: Var) -> Result<Var> {
        self.check_pair(tape, vis, aux)?;
        let both = tape.concat(vis, aux)?;
        self.layer(tape, p, &self.name("fuse"), both)
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, vis: Var, aux: Var) -> Result<FusionOutput> {
        let spatial = self.spatial_coefficient(tape, p, vis, aux)?;
        let channel = self.channel_coefficient(tape, p, vis, aux)?;
        let (vis_next, aux_next) = update_features(tape, vis, aux, spatial, channel)?;
        let fused = self.fuse(tape, p, vis_next, aux_next)?;
        Ok(FusionOutput {
            spatial,
            channel,
            vis: vis_next,
            aux: aux_next,
            fused,
        })
    }
}

/// Exchanges information between the streams with one shared pair of coefficients:
///
/// `vis' = vis + S ∗ aux + c ⊛ aux` and `aux' = aux + S ∗ vis + c ⊛ vis`.
pub fn update_features<T: Real>(
    tape: &mut Tape<T>,
    vis: Var,
    aux: Var,
    spatial: Var,
    channel: Var,
) -> Result<(Var, Var)> {
    let dv = tape.dims(vis).to_vec();
    if tape.dims(aux) != dv.as_slice() || dv.len() != 4 {
        return Err(Error::shape(format!(
            "update_features: {dv:?} vs {:?}",
            tape.dims(aux)
        )));
    }
    let (b, h, w, c) = (dv[0], dv[1], dv[2], dv[3]);
    if tape.dims(spatial) != [b, h, w, 1] {
        return Err(Error::shape(format!(
            "spatial coefficient dims {:?}, expected [{b}, {h}, {w}, 1]",
            tape.dims(spatial)
        )));
    }
    if tape.dims(channel) != [b, c] {
        return Err(Error::shape(format!(
            "channel coefficient dims {:?}, expected [{b}, {c}]",
            tape.dims(channel)
        )));
    }
    let exchange = |tape: &mut Tape<T>, own: Var, other: Var| -> Result<Var> {
        let by_space = tape.mul(other, spatial)?;
        let by_channel = tape.mul_channels(other, channel)?;
        let sum = tape.add(own, by_space)?;
        tape.add(sum, by_channel)
    };
    let vis_next = exchange(tape, vis, aux)?;
    let aux_next = exchange(tape, aux, vis)?;
    Ok((vis_next, aux_next))
}
