//! Generator and critic networks for label-conditioned image synthesis.
//!
//! Generator: `[z ; embed(label)] -> dense(1024) -> dropout -> reshape to a
//! (S/16)×(S/16) seed map -> 3 × (upsample, conv3×3, leaky ReLU) -> upsample,
//! conv3×3 -> tanh`.
//!
//! Critic: `4 × (conv5×5 stride 2, leaky ReLU) -> flatten -> dense(1024)`
//! giving the feature vector, then dropout and two linear heads (score and
//! class logits).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Mode, Tape, Tensor, Var};

/// Width of the generator's first dense layer.
pub const GEN_DENSE_WIDTH: usize = 1024;
/// Width of the critic feature vector shared by both heads.
pub const FEATURE_DIM: usize = 1024;
/// Standard deviation of the initial label embeddings, matching the noise.
pub const EMBED_INIT_STD: f32 = 1.0;

const GEN_KERNEL: usize = 3;
const CRITIC_KERNEL: usize = 5;
const STAGES: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    pub image_size: usize,
    pub noise_dim: usize,
    pub embed_dim: usize,
    pub num_classes: usize,
    pub leaky_slope: f32,
    pub base_channels: usize,
    pub dropout_rate: f32,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            image_size: 128,
            noise_dim: 100,
            embed_dim: 20,
            num_classes: 5,
            leaky_slope: 0.2,
            base_channels: 32,
            dropout_rate: 0.25,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        let s = self.image_size;
        if s < 16 || !s.is_power_of_two() {
            return Err(Error::Config(format!(
                "image_size {s} must be a power of two >= 16"
            )));
        }
        let seed = s / 16;
        if seed * seed > GEN_DENSE_WIDTH {
            return Err(Error::Config(format!(
                "image_size {s} too large: a {seed}×{seed} seed map cannot hold {GEN_DENSE_WIDTH} units"
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be at least 2".into()));
        }
        if self.noise_dim == 0 || self.embed_dim == 0 || self.base_channels == 0 {
            return Err(Error::Config(
                "noise_dim, embed_dim and base_channels must be positive".into(),
            ));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::Config(format!(
                "leaky_slope {} not in (0, 1)",
                self.leaky_slope
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout_rate {} not in [0, 1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    /// Spatial extent of the generator seed map and the critic's last conv map.
    pub fn seed_size(&self) -> usize {
        self.image_size / 16
    }

    /// Channel widths of the generator: seed map, then the output of each conv.
    pub fn generator_channels(&self) -> [usize; STAGES + 1] {
        let s = self.seed_size();
        let c0 = GEN_DENSE_WIDTH / (s * s);
        [c0, (c0 / 2).max(1), (c0 / 4).max(1), (c0 / 8).max(1), 1]
    }

    /// Channel widths of the critic convs, input first.
    pub fn critic_channels(&self) -> [usize; STAGES + 1] {
        let b = self.base_channels;
        [1, b, 2 * b, 4 * b, 8 * b]
    }
}

/// Ordered, named parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Params {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl Params {
    fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    fn push(&mut self, name: String, t: Tensor) {
        self.names.push(name);
        self.tensors.push(t);
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Registers every parameter on `tape` as a gradient-tracked leaf.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| tape.leaf(t.clone(), true))
            .collect()
    }

    /// Registers every parameter as a constant (no gradient tracking).
    pub fn bind_frozen(&self, tape: &mut Tape) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.constant(t.clone())).collect()
    }

    /// Replaces tensors by name; shapes must match. All-or-nothing.
    pub fn load(&mut self, mut lookup: impl FnMut(&str) -> Option<Tensor>) -> Result<()> {
        let mut fresh = Vec::with_capacity(self.tensors.len());
        for (name, cur) in self.iter() {
            let t = lookup(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            if t.shape() != cur.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    cur.shape()
                )));
            }
            fresh.push(t);
        }
        self.tensors = fresh;
        Ok(())
    }
}

/// Glorot-uniform weights. Dense weights are `[in, out]`, conv kernels
/// `[out, in, k, k]`.
fn weight(shape: &[usize], rng: &mut Rng) -> Tensor {
    let (fan_in, fan_out) = match *shape {
        [i, o] => (i, o),
        [o, i, kh, kw] => (i * kh * kw, o * kh * kw),
        _ => unreachable!("weights are rank 2 or 4"),
    };
    let a = (6.0 / (fan_in + fan_out) as f32).sqrt();
    Tensor::uniform(shape, -a, a, rng)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorNet {
    config: NetConfig,
    params: Params,
}

/// Parameter slots of the generator.
const G_EMBED: usize = 0;
const G_DENSE_W: usize = 1;
const G_DENSE_B: usize = 2;
const G_CONV0: usize = 3;

impl GeneratorNet {
    pub fn new(config: &NetConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut params = Params::new();
        params.push(
            "generator.embedding".into(),
            Tensor::randn(&[config.num_classes, config.embed_dim], EMBED_INIT_STD, rng),
        );
        params.push(
            "generator.dense.weight".into(),
            weight(&[config.noise_dim + config.embed_dim, GEN_DENSE_WIDTH], rng),
        );
        params.push(
            "generator.dense.bias".into(),
            Tensor::zeros(&[GEN_DENSE_WIDTH]),
        );
        let ch = config.generator_channels();
        for i in 0..STAGES {
            params.push(
                format!("generator.conv{i}.weight"),
                weight(&[ch[i + 1], ch[i], GEN_KERNEL, GEN_KERNEL], rng),
            );
            params.push(format!("generator.conv{i}.bias"), Tensor::zeros(&[ch[i + 1]]));
        }
        Ok(Self {
            config: config.clone(),
            params,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    /// Row `label` of the embedding table.
    pub fn embed_label(&self, label: usize) -> Result<Tensor> {
        let table = &self.params.tensors[G_EMBED];
        if label >= self.config.num_classes {
            return Err(Error::Label {
                label,
                num_classes: self.config.num_classes,
            });
        }
        let e = self.config.embed_dim;
        Tensor::new(vec![e], table.data()[label * e..(label + 1) * e].to_vec())
    }

    /// Records the generator on `tape`. `p` are this network's parameters bound
    /// to the same tape (see [`Params::bind`]).
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &[Var],
        z: Var,
        labels: &[usize],
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<Var> {
        let cfg = &self.config;
        let batch = labels.len();
        if tape.shape(z) != [batch, cfg.noise_dim] {
            return Err(Error::dim(format!(
                "noise has shape {:?}, expected [{batch}, {}]",
                tape.shape(z),
                cfg.noise_dim
            )));
        }
        let emb = tape.gather_rows(p[G_EMBED], labels)?;
        let h = tape.concat_cols(z, emb)?;
        let h = tape.dense(h, p[G_DENSE_W], p[G_DENSE_B])?;
        let h = tape.dropout(h, cfg.dropout_rate, mode, rng)?;
        let ch = cfg.generator_channels();
        let s = cfg.seed_size();
        let mut h = tape.reshape(h, &[batch, ch[0], s, s])?;
        for i in 0..STAGES {
            h = tape.upsample_nearest2x(h)?;
            h = tape.conv2d_bias(h, p[G_CONV0 + 2 * i], p[G_CONV0 + 2 * i + 1], 1, GEN_KERNEL / 2)?;
            h = if i + 1 < STAGES {
                tape.leaky_relu(h, cfg.leaky_slope)?
            } else {
                tape.tanh(h)?
            };
        }
        Ok(h)
    }

    /// Generates images without recording gradients.
    pub fn generate(&self, z: &Tensor, labels: &[usize], mode: Mode, rng: &mut Rng) -> Result<Tensor> {
        let mut tape = Tape::new();
        tape.set_recording(false);
        let p = self.params.bind_frozen(&mut tape);
        let zv = tape.constant(z.clone());
        let out = self.forward(&mut tape, &p, zv, labels, mode, rng)?;
        Ok(tape.value(out).clone())
    }

    pub fn sample_noise(&self, batch: usize, rng: &mut Rng) -> Tensor {
        Tensor::randn(&[batch, self.config.noise_dim], 1.0, rng)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CriticNet {
    config: NetConfig,
    params: Params,
}

#[derive(Clone, Copy, Debug)]
pub struct CriticOutput {
    pub scores: Var,
    pub logits: Var,
    pub features: Var,
}

/// Parameter slots of the critic.
const C_FEAT_W: usize = 2 * STAGES;
const C_FEAT_B: usize = C_FEAT_W + 1;
const C_SCORE_W: usize = C_FEAT_W + 2;
const C_SCORE_B: usize = C_FEAT_W + 3;
const C_CLS_W: usize = C_FEAT_W + 4;
const C_CLS_B: usize = C_FEAT_W + 5;

impl CriticNet {
    pub fn new(config: &NetConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut params = Params::new();
        let ch = config.critic_channels();
        for i in 0..STAGES {
            params.push(
                format!("critic.conv{i}.weight"),
                weight(&[ch[i + 1], ch[i], CRITIC_KERNEL, CRITIC_KERNEL], rng),
            );
            params.push(format!("critic.conv{i}.bias"), Tensor::zeros(&[ch[i + 1]]));
        }
        let s = config.seed_size();
        let flat = ch[STAGES] * s * s;
        params.push("critic.features.weight".into(), weight(&[flat, FEATURE_DIM], rng));
        params.push("critic.features.bias".into(), Tensor::zeros(&[FEATURE_DIM]));
        params.push("critic.score.weight".into(), weight(&[FEATURE_DIM, 1], rng));
        params.push("critic.score.bias".into(), Tensor::zeros(&[1]));
        params.push(
            "critic.classifier.weight".into(),
            weight(&[FEATURE_DIM, config.num_classes], rng),
        );
        params.push(
            "critic.classifier.bias".into(),
            Tensor::zeros(&[config.num_classes]),
        );
        Ok(Self {
            config: config.clone(),
            params,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &[Var],
        images: Var,
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<CriticOutput> {
        let cfg = &self.config;
        let shape = tape.shape(images);
        let s = cfg.image_size;
        if shape.len() != 4 || shape[1] != 1 || shape[2] != s || shape[3] != s {
            return Err(Error::dim(format!(
                "critic expects [B, 1, {s}, {s}] images, got {shape:?}"
            )));
        }
        let mut h = images;
        for i in 0..STAGES {
            h = tape.conv2d_bias(h, p[2 * i], p[2 * i + 1], 2, CRITIC_KERNEL / 2)?;
            h = tape.leaky_relu(h, cfg.leaky_slope)?;
        }
        let h = tape.flatten(h)?;
        let features = tape.dense(h, p[C_FEAT_W], p[C_FEAT_B])?;
        let d = tape.dropout(features, cfg.dropout_rate, mode, rng)?;
        let scores = tape.dense(d, p[C_SCORE_W], p[C_SCORE_B])?;
        let logits = tape.dense(d, p[C_CLS_W], p[C_CLS_B])?;
        Ok(CriticOutput {
            scores,
            logits,
            features,
        })
    }

    /// Runs the critic without recording gradients, returning
    /// `(scores [B,1], logits [B,K], features [B,1024])`.
    pub fn criticize(&self, images: &Tensor, mode: Mode, rng: &mut Rng) -> Result<(Tensor, Tensor, Tensor)> {
        let mut tape = Tape::new();
        tape.set_recording(false);
        let p = self.params.bind_frozen(&mut tape);
        let x = tape.constant(images.clone());
        let out = self.forward(&mut tape, &p, x, mode, rng)?;
        Ok((
            tape.value(out.scores).clone(),
            tape.value(out.logits).clone(),
            tape.value(out.features).clone(),
        ))
    }
}

/// Builds both networks from one seed: generator parameters are drawn first.
pub fn init_params(config: &NetConfig, rng: &mut Rng) -> Result<(GeneratorNet, CriticNet)> {
    let g = GeneratorNet::new(config, rng)?;
    let c = CriticNet::new(config, rng)?;
    Ok((g, c))
}
