//! Adversarial losses with gradient penalty and auxiliary classification.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::CriticNet;
use crate::rng::Rng;
use crate::tensor::{Mode, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Gradient-penalty weight.
    pub lambda1: f32,
    /// Auxiliary classification weight.
    pub lambda2: f32,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda1: 10.0,
            lambda2: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 >= 0.0 && self.lambda1.is_finite()) {
            return Err(Error::Config(format!("lambda1 must be >= 0, got {}", self.lambda1)));
        }
        if !(self.lambda2 >= 0.0 && self.lambda2.is_finite()) {
            return Err(Error::Config(format!("lambda2 must be >= 0, got {}", self.lambda2)));
        }
        Ok(())
    }
}

/// Random points on the segments between paired real and fake samples, one
/// mixing weight per sample.
pub fn interpolate(real: &Tensor, fake: &Tensor, rng: &mut Rng) -> Result<Tensor> {
    let batch = real.shape().first().copied().unwrap_or(0);
    let eps: Vec<f32> = (0..batch).map(|_| rng.uniform_f32()).collect();
    interpolate_with(real, fake, &eps)
}

/// `eps[b]·real[b] + (1 − eps[b])·fake[b]`.
pub fn interpolate_with(real: &Tensor, fake: &Tensor, eps: &[f32]) -> Result<Tensor> {
    if real.shape() != fake.shape() {
        return Err(Error::dim(format!(
            "cannot interpolate {:?} with {:?}",
            real.shape(),
            fake.shape()
        )));
    }
    if real.rank() == 0 || eps.len() != real.shape()[0] {
        return Err(Error::dim(format!(
            "{} mixing weights for a batch of shape {:?}",
            eps.len(),
            real.shape()
        )));
    }
    let per = real.len() / eps.len();
    let mut out = fake.clone();
    for (i, (o, &r)) in out.data_mut().iter_mut().zip(real.data()).enumerate() {
        let e = eps[i / per];
        // Exact at the endpoints.
        *o = if e == 1.0 {
            r
        } else if e == 0.0 {
            *o
        } else {
            e * r + (1.0 - e) * *o
        };
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug)]
pub struct Penalty {
    /// `mean_b (‖∇ D(x̂_b)‖ − 1)²`, differentiable in the critic parameters.
    pub value: Var,
    /// Per-sample gradient norms `[B]`.
    pub norms: Var,
}

/// Penalty for per-sample `scores` that were computed from `inputs`.
pub fn penalty_from_scores(tape: &mut Tape, scores: Var, inputs: Var) -> Result<Penalty> {
    if !tape.is_recording() {
        return Err(Error::State("gradient penalty needs a recording tape".into()));
    }
    if !tape.requires_grad(inputs) {
        return Err(Error::State(
            "gradient penalty inputs must be tracked leaves".into(),
        ));
    }
    let total = tape.sum(scores)?;
    let g = tape.grad(total, &[inputs], true)?[0];
    let norms = tape.l2_norm_per_sample(g)?;
    let dev = tape.add_scalar(norms, -1.0)?;
    let sq = tape.square(dev)?;
    let value = tape.mean(sq)?;
    Ok(Penalty { value, norms })
}

/// Runs the critic on `interpolates` (which must require grad) and builds the
/// penalty. The critic must be evaluated in train mode.
pub fn gradient_penalty(
    tape: &mut Tape,
    critic: &CriticNet,
    params: &[Var],
    interpolates: Var,
    mode: Mode,
    rng: &mut Rng,
) -> Result<Penalty> {
    if mode != Mode::Train {
        return Err(Error::State("gradient penalty evaluated in eval mode".into()));
    }
    if !tape.requires_grad(interpolates) {
        return Err(Error::State(
            "gradient penalty inputs must be tracked leaves".into(),
        ));
    }
    let out = critic.forward(tape, params, interpolates, mode, rng)?;
    penalty_from_scores(tape, out.scores, interpolates)
}

/// Scores and class logits of one batch with the labels it is judged against.
#[derive(Clone, Copy, Debug)]
pub struct Scored<'a> {
    pub scores: Var,
    pub logits: Var,
    pub labels: &'a [usize],
}

#[derive(Clone, Copy, Debug)]
pub struct GeneratorLoss {
    pub total: Var,
    /// `−mean(scores_fake)`.
    pub adversarial: Var,
    /// Unweighted cross-entropy on the conditioning labels.
    pub ce: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct CriticLoss {
    pub total: Var,
    /// `mean(scores_fake) − mean(scores_real)`.
    pub adversarial: Var,
    /// Unweighted penalty term.
    pub penalty: Var,
    pub ce_real: Var,
    pub ce_fake: Var,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GeneratorLossValues {
    pub total: f32,
    pub adversarial: f32,
    pub ce: f32,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CriticLossValues {
    pub total: f32,
    pub adversarial: f32,
    pub penalty: f32,
    pub ce_real: f32,
    pub ce_fake: f32,
}

impl GeneratorLoss {
    pub fn values(&self, tape: &Tape) -> GeneratorLossValues {
        GeneratorLossValues {
            total: tape.value(self.total).item(),
            adversarial: tape.value(self.adversarial).item(),
            ce: tape.value(self.ce).item(),
        }
    }
}

impl CriticLoss {
    pub fn values(&self, tape: &Tape) -> CriticLossValues {
        CriticLossValues {
            total: tape.value(self.total).item(),
            adversarial: tape.value(self.adversarial).item(),
            penalty: tape.value(self.penalty).item(),
            ce_real: tape.value(self.ce_real).item(),
            ce_fake: tape.value(self.ce_fake).item(),
        }
    }
}

fn check_batch(tape: &Tape, s: &Scored) -> Result<usize> {
    let b = s.labels.len();
    let ss = tape.shape(s.scores);
    if ss.len() != 2 || ss[0] != b || ss[1] != 1 {
        return Err(Error::dim(format!("scores {ss:?} for {b} labels")));
    }
    let ls = tape.shape(s.logits);
    if ls.len() != 2 || ls[0] != b {
        return Err(Error::dim(format!("logits {ls:?} for {b} labels")));
    }
    Ok(b)
}

/// `−mean(scores) + λ₂·CE(logits, labels)`.
pub fn generator_loss(tape: &mut Tape, fake: Scored, cfg: &LossConfig) -> Result<GeneratorLoss> {
    check_batch(tape, &fake)?;
    let m = tape.mean(fake.scores)?;
    let adversarial = tape.neg(m)?;
    let ce = tape.sparse_cross_entropy(fake.logits, fake.labels)?;
    let weighted = tape.scale(ce, cfg.lambda2)?;
    let total = tape.add(adversarial, weighted)?;
    Ok(GeneratorLoss {
        total,
        adversarial,
        ce,
    })
}

/// `mean(fake) − mean(real) + λ₁·gp + λ₂·½(CE_real + CE_fake)`.
pub fn critic_loss(
    tape: &mut Tape,
    real: Scored,
    fake: Scored,
    penalty: Var,
    cfg: &LossConfig,
) -> Result<CriticLoss> {
    let br = check_batch(tape, &real)?;
    let bf = check_batch(tape, &fake)?;
    if br != bf {
        return Err(Error::dim(format!("real batch {br} but fake batch {bf}")));
    }
    if !tape.shape(penalty).is_empty() {
        return Err(Error::dim("penalty must be a scalar"));
    }
    let mf = tape.mean(fake.scores)?;
    let mr = tape.mean(real.scores)?;
    let adversarial = tape.sub(mf, mr)?;
    let ce_real = tape.sparse_cross_entropy(real.logits, real.labels)?;
    let ce_fake = tape.sparse_cross_entropy(fake.logits, fake.labels)?;
    let gp = tape.scale(penalty, cfg.lambda1)?;
    let ce = tape.add(ce_real, ce_fake)?;
    let ce = tape.scale(ce, 0.5 * cfg.lambda2)?;
    let total = tape.add(adversarial, gp)?;
    let total = tape.add(total, ce)?;
    Ok(CriticLoss {
        total,
        adversarial,
        penalty,
        ce_real,
        ce_fake,
    })
}

/// `mean(scores_real) − mean(scores_fake)`, for monitoring.
pub fn wasserstein_estimate(scores_real: &Tensor, scores_fake: &Tensor) -> f32 {
    (scores_real.data().iter().map(|&v| v as f64).sum::<f64>() / scores_real.len() as f64
        - scores_fake.data().iter().map(|&v| v as f64).sum::<f64>() / scores_fake.len() as f64) as f32
}
