//! Alternating critic/generator optimization, checkpoints and step metrics.

pub mod adam;
pub mod checkpoint;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{Checkpoint, Entry};

use crate::data::Corpus;
use crate::error::{Error, Result};
use crate::loss::{self, LossConfig, Scored};
use crate::net::{init_params, CriticNet, GeneratorNet, NetConfig};
use crate::rng::Rng;
use crate::tensor::{Mode, Tape};

const INIT_STREAM: u64 = 1;
const TRAIN_STREAM: u64 = 2;
const EPOCH_STREAM: u64 = 0x4550_4f43 << 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub adam_eps: f32,
    pub critic_steps_per_gen: usize,
    pub epochs: u64,
    pub seed: u64,
    pub loss: LossConfig,
    pub net: NetConfig,
    /// Checkpoint period in total steps; 0 disables periodic checkpoints.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            lr: 5e-5,
            beta1: 0.5,
            beta2: 0.9,
            adam_eps: 1e-8,
            critic_steps_per_gen: 5,
            epochs: 6000,
            seed: 0,
            loss: LossConfig::default(),
            net: NetConfig::default(),
            checkpoint_every: 1000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad(format!("betas must lie in [0, 1), got {} and {}", self.beta1, self.beta2));
        }
        if !(self.adam_eps >= 0.0) {
            return bad(format!("adam_eps must be >= 0, got {}", self.adam_eps));
        }
        if self.critic_steps_per_gen == 0 {
            return bad("critic_steps_per_gen must be at least 1".into());
        }
        self.loss.validate()?;
        self.net.validate()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StepKind {
    Critic,
    Gen,
}

/// One row of the metrics log. Fields that do not apply to a step kind are
/// left empty.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub kind: StepKind,
    pub wasserstein: Option<f32>,
    pub gp: Option<f32>,
    pub ce_real: Option<f32>,
    pub ce_fake: Option<f32>,
    pub ce_gen: Option<f32>,
    pub loss: f32,
    /// Batch mean of per-sample interpolate gradient norms.
    pub grad_norm: Option<f32>,
    /// Generator adversarial term `−mean(scores_fake)`.
    pub adv_gen: Option<f32>,
}

/// Complete optimization state. Everything needed to continue bit-identically
/// is captured by [`Trainer::to_checkpoint`].
#[derive(Clone, Debug, PartialEq)]
pub struct Trainer {
    config: TrainConfig,
    config_json: String,
    generator: GeneratorNet,
    critic: CriticNet,
    gen_adam: AdamState,
    critic_adam: AdamState,
    rng: Rng,
    critic_steps: u64,
    gen_steps: u64,
    epoch: u64,
    cursor: usize,
    train: Vec<usize>,
    order: Vec<usize>,
}

impl Trainer {
    /// Fresh networks drawn from `config.seed`; `train` indexes the corpus
    /// images used for critic minibatches.
    pub fn new(config: &TrainConfig, train: Vec<usize>) -> Result<Self> {
        config.validate()?;
        if train.is_empty() {
            return Err(Error::Data("training set is empty".into()));
        }
        if config.batch_size > train.len() {
            return Err(Error::Data(format!(
                "batch_size {} exceeds the {} training images",
                config.batch_size,
                train.len()
            )));
        }
        let mut init = Rng::derive(config.seed, INIT_STREAM);
        let (generator, critic) = init_params(&config.net, &mut init)?;
        let gen_adam = AdamState::new(generator.params().tensors());
        let critic_adam = AdamState::new(critic.params().tensors());
        let mut t = Self {
            config: config.clone(),
            config_json: serde_json::to_string(config)?,
            generator,
            critic,
            gen_adam,
            critic_adam,
            rng: Rng::derive(config.seed, TRAIN_STREAM),
            critic_steps: 0,
            gen_steps: 0,
            epoch: 0,
            cursor: 0,
            train,
            order: Vec::new(),
        };
        t.order = t.epoch_order();
        Ok(t)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn generator(&self) -> &GeneratorNet {
        &self.generator
    }

    pub fn critic(&self) -> &CriticNet {
        &self.critic
    }

    pub fn critic_steps(&self) -> u64 {
        self.critic_steps
    }

    pub fn gen_steps(&self) -> u64 {
        self.gen_steps
    }

    pub fn total_steps(&self) -> u64 {
        self.critic_steps + self.gen_steps
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    fn epoch_order(&self) -> Vec<usize> {
        let mut rng = Rng::derive(self.config.seed, EPOCH_STREAM | self.epoch);
        let perm = rng.permutation(self.train.len());
        perm.into_iter().map(|i| self.train[i]).collect()
    }

    fn gen_pending(&self) -> bool {
        self.gen_steps < self.critic_steps / self.config.critic_steps_per_gen as u64
    }

    /// True once `epochs` full passes are done and no generator step is owed.
    pub fn finished(&self) -> bool {
        self.epoch >= self.config.epochs && !self.gen_pending()
    }

    /// Performs the next step of the schedule: a generator step whenever one
    /// is owed after `critic_steps_per_gen` critic steps, otherwise a critic
    /// step on the next minibatch. A failed step leaves parameters, optimizer
    /// state and counters untouched.
    pub fn step(&mut self, corpus: &Corpus) -> Result<StepMetrics> {
        if self.gen_pending() {
            self.generator_step()
        } else {
            self.critic_step(corpus)
        }
    }

    /// One critic update on the next minibatch of the epoch order.
    pub fn critic_step(&mut self, corpus: &Corpus) -> Result<StepMetrics> {
        let b = self.config.batch_size;
        let idx = self.order[self.cursor..self.cursor + b].to_vec();
        let (real, labels_real) = corpus.batch(&idx)?;
        let mut rng = self.rng.clone();
        let z = self.generator.sample_noise(b, &mut rng);
        let k = self.config.net.num_classes;
        let labels_fake: Vec<usize> = (0..b).map(|_| rng.below(k)).collect();
        let fake = self.generator.generate(&z, &labels_fake, Mode::Train, &mut rng)?;
        let mixed = loss::interpolate(&real, &fake, &mut rng)?;

        let mut tape = Tape::new();
        let p = self.critic.params().bind(&mut tape);
        let xr = tape.constant(real);
        let xf = tape.constant(fake);
        let xh = tape.leaf(mixed, true);
        let out_real = self.critic.forward(&mut tape, &p, xr, Mode::Train, &mut rng)?;
        let out_fake = self.critic.forward(&mut tape, &p, xf, Mode::Train, &mut rng)?;
        let gp = loss::gradient_penalty(&mut tape, &self.critic, &p, xh, Mode::Train, &mut rng)?;
        let l = loss::critic_loss(
            &mut tape,
            Scored {
                scores: out_real.scores,
                logits: out_real.logits,
                labels: &labels_real,
            },
            Scored {
                scores: out_fake.scores,
                logits: out_fake.logits,
                labels: &labels_fake,
            },
            gp.value,
            &self.config.loss,
        )?;
        let vals = l.values(&tape);
        let w = loss::wasserstein_estimate(tape.value(out_real.scores), tape.value(out_fake.scores));
        let grad_norm = tape.value(gp.norms).mean();
        let grads = tape.gradients(l.total, &p)?;
        if !vals.total.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("critic step"));
        }

        adam_step(
            self.critic.params_mut().tensors_mut(),
            &grads,
            &mut self.critic_adam,
            &self.config.adam(),
        )?;
        self.rng = rng;
        self.critic_steps += 1;
        self.cursor += b;
        if self.cursor + b > self.order.len() {
            self.epoch += 1;
            self.cursor = 0;
            self.order = self.epoch_order();
        }
        Ok(StepMetrics {
            step: self.total_steps(),
            kind: StepKind::Critic,
            wasserstein: Some(w),
            gp: Some(vals.penalty),
            ce_real: Some(vals.ce_real),
            ce_fake: Some(vals.ce_fake),
            ce_gen: None,
            loss: vals.total,
            grad_norm: Some(grad_norm),
            adv_gen: None,
        })
    }

    /// One generator update through the frozen critic.
    pub fn generator_step(&mut self) -> Result<StepMetrics> {
        let b = self.config.batch_size;
        let mut rng = self.rng.clone();
        let z = self.generator.sample_noise(b, &mut rng);
        let k = self.config.net.num_classes;
        let labels: Vec<usize> = (0..b).map(|_| rng.below(k)).collect();

        let mut tape = Tape::new();
        let gp = self.generator.params().bind(&mut tape);
        let cp = self.critic.params().bind_frozen(&mut tape);
        let zv = tape.constant(z);
        let fake = self.generator.forward(&mut tape, &gp, zv, &labels, Mode::Train, &mut rng)?;
        let out = self.critic.forward(&mut tape, &cp, fake, Mode::Train, &mut rng)?;
        let l = loss::generator_loss(
            &mut tape,
            Scored {
                scores: out.scores,
                logits: out.logits,
                labels: &labels,
            },
            &self.config.loss,
        )?;
        let vals = l.values(&tape);
        let grads = tape.gradients(l.total, &gp)?;
        if !vals.total.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("generator step"));
        }
        adam_step(
            self.generator.params_mut().tensors_mut(),
            &grads,
            &mut self.gen_adam,
            &self.config.adam(),
        )?;
        self.rng = rng;
        self.gen_steps += 1;
        Ok(StepMetrics {
            step: self.total_steps(),
            kind: StepKind::Gen,
            wasserstein: None,
            gp: None,
            ce_real: None,
            ce_fake: None,
            ce_gen: Some(vals.ce),
            loss: vals.total,
            grad_norm: None,
            adv_gen: Some(vals.adversarial),
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut entries = Vec::new();
        for (name, t) in self.generator.params().iter().chain(self.critic.params().iter()) {
            entries.push((name.to_string(), Entry::F32(t.clone())));
        }
        for (net, params, st) in [
            ("generator", self.generator.params(), &self.gen_adam),
            ("critic", self.critic.params(), &self.critic_adam),
        ] {
            for (i, name) in params.names().iter().enumerate() {
                entries.push((format!("adam.m.{name}"), Entry::F32(st.m[i].clone())));
                entries.push((format!("adam.v.{name}"), Entry::F32(st.v[i].clone())));
            }
            entries.push((format!("adam.t.{net}"), Entry::U64(vec![st.t])));
        }
        entries.push(("rng.train".into(), Entry::U64(vec![self.rng.state()])));
        entries.push((
            "counters".into(),
            Entry::U64(vec![self.critic_steps, self.gen_steps, self.epoch, self.cursor as u64]),
        ));
        Checkpoint {
            config_json: self.config_json.clone(),
            entries,
        }
    }

    /// Rebuilds a trainer from a checkpoint. `train` must be the same training
    /// index set the checkpoint was produced with.
    pub fn from_checkpoint(ckpt: &Checkpoint, train: Vec<usize>) -> Result<Self> {
        let config: TrainConfig = serde_json::from_str(&ckpt.config_json)
            .map_err(|e| Error::Checkpoint(format!("config: {e}")))?;
        let mut t = Self::new(&config, train)?;
        t.config_json = ckpt.config_json.clone();
        load_params(ckpt, t.generator.params_mut())?;
        load_params(ckpt, t.critic.params_mut())?;
        for (net, params, st) in [
            ("generator", t.generator.params().clone(), &mut t.gen_adam),
            ("critic", t.critic.params().clone(), &mut t.critic_adam),
        ] {
            for (i, (name, p)) in params.iter().enumerate() {
                for (kind, slot) in [("m", &mut st.m[i]), ("v", &mut st.v[i])] {
                    let v = ckpt.tensor(&format!("adam.{kind}.{name}"))?;
                    if v.shape() != p.shape() {
                        return Err(Error::Checkpoint(format!("adam.{kind}.{name}: shape mismatch")));
                    }
                    *slot = v.clone();
                }
            }
            st.t = single(ckpt.u64s(&format!("adam.t.{net}"))?, "adam step")?;
        }
        t.rng = Rng::from_state(single(ckpt.u64s("rng.train")?, "rng")?);
        let c = ckpt.u64s("counters")?;
        if c.len() != 4 {
            return Err(Error::Checkpoint("counters record has wrong length".into()));
        }
        t.critic_steps = c[0];
        t.gen_steps = c[1];
        t.epoch = c[2];
        t.cursor = c[3] as usize;
        if t.cursor + t.config.batch_size > t.train.len() {
            return Err(Error::Checkpoint("minibatch cursor beyond training set".into()));
        }
        t.order = t.epoch_order();
        Ok(t)
    }

    /// Replaces `self` with the checkpointed state; on error `self` is unchanged.
    pub fn restore(&mut self, ckpt: &Checkpoint) -> Result<()> {
        *self = Self::from_checkpoint(ckpt, self.train.clone())?;
        Ok(())
    }

}

fn single(v: &[u64], what: &str) -> Result<u64> {
    match v {
        [x] => Ok(*x),
        _ => Err(Error::Checkpoint(format!("{what} record has wrong length"))),
    }
}

fn load_params(ckpt: &Checkpoint, params: &mut crate::net::Params) -> Result<()> {
    params.load(|name| ckpt.tensor(name).ok().cloned())
}

/// Rebuilds just the generator from a checkpoint, for sampling.
pub fn load_generator(ckpt: &Checkpoint) -> Result<GeneratorNet> {
    let config: TrainConfig = serde_json::from_str(&ckpt.config_json)
        .map_err(|e| Error::Checkpoint(format!("config: {e}")))?;
    let mut g = GeneratorNet::new(&config.net, &mut Rng::new(0))?;
    load_params(ckpt, g.params_mut())?;
    Ok(g)
}

/// Rebuilds just the critic from a checkpoint.
pub fn load_critic(ckpt: &Checkpoint) -> Result<CriticNet> {
    let config: TrainConfig = serde_json::from_str(&ckpt.config_json)
        .map_err(|e| Error::Checkpoint(format!("config: {e}")))?;
    let mut c = CriticNet::new(&config.net, &mut Rng::new(0))?;
    load_params(ckpt, c.params_mut())?;
    Ok(c)
}

/// Appends metrics rows to a CSV file, writing the header only when the file
/// is new or empty.
pub struct MetricsLog {
    writer: csv::Writer<fs::File>,
    path: PathBuf,
}

impl MetricsLog {
    pub fn open(path: &Path) -> Result<Self> {
        let fresh = fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
        let file = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let writer = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
        Ok(Self {
            writer,
            path: path.to_path_buf(),
        })
    }

    pub fn write(&mut self, m: &StepMetrics) -> Result<()> {
        self.writer.serialize(m)?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.writer.flush().map_err(|e| Error::io(&self.path, e))
    }
}

/// Where [`run`] writes its outputs.
#[derive(Clone, Debug, Default)]
pub struct RunOutputs {
    /// Directory for `metrics.csv`, periodic `step-NNNNNNNN.acwg`, `final.acwg`
    /// and, on a numerical failure, `abort.acwg`.
    pub dir: Option<PathBuf>,
    /// Stop after this many total steps even if epochs remain.
    pub max_steps: Option<u64>,
}

/// Drives `trainer` until its epochs are exhausted (or `max_steps`), returning
/// the metrics of every step taken.
pub fn run(trainer: &mut Trainer, corpus: &Corpus, out: &RunOutputs) -> Result<Vec<StepMetrics>> {
    let mut log = match &out.dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            Some(MetricsLog::open(&dir.join("metrics.csv"))?)
        }
        None => None,
    };
    let mut metrics = Vec::new();
    let every = trainer.config.checkpoint_every;
    while !trainer.finished() && out.max_steps.is_none_or(|m| trainer.total_steps() < m) {
        let m = match trainer.step(corpus) {
            Ok(m) => m,
            Err(e) => {
                if let (Some(dir), Error::NonFinite(_)) = (&out.dir, &e) {
                    trainer.to_checkpoint().save(&dir.join("abort.acwg"))?;
                }
                if let Some(log) = &mut log {
                    log.flush()?;
                }
                return Err(e);
            }
        };
        if let Some(log) = &mut log {
            log.write(&m)?;
        }
        if let (Some(dir), true) = (&out.dir, every > 0 && m.step % every == 0) {
            if let Some(log) = &mut log {
                log.flush()?;
            }
            trainer
                .to_checkpoint()
                .save(&dir.join(format!("step-{:08}.acwg", m.step)))?;
        }
        if m.step % 100 == 0 {
            log::info!(
                "step {} epoch {} {:?} loss {:.4}",
                m.step,
                trainer.epoch,
                m.kind,
                m.loss
            );
        }
        metrics.push(m);
    }
    if let Some(dir) = &out.dir {
        if let Some(log) = &mut log {
            log.flush()?;
        }
        trainer.to_checkpoint().save(&dir.join("final.acwg"))?;
    }
    Ok(metrics)
}

/// Builds a trainer on the corpus's stratified training split and runs it.
pub fn train_loop(corpus: &Corpus, cfg: &TrainConfig, out: &RunOutputs) -> Result<(Trainer, Vec<StepMetrics>)> {
    if corpus.is_empty() {
        return Err(Error::Data("corpus is empty".into()));
    }
    let split = corpus.split(cfg.seed);
    let mut trainer = Trainer::new(cfg, split.train)?;
    let metrics = run(&mut trainer, corpus, out)?;
    Ok((trainer, metrics))
}

/// Reads a metrics CSV written by [`MetricsLog`].
pub fn read_metrics(path: &Path) -> Result<Vec<StepMetrics>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

