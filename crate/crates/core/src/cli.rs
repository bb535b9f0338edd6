//! Command-line front end: `prep`, `train`, `generate`, `eval`.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::data::{self, pgm, CoolingMethod, Corpus, CorpusConfig, Image};
use crate::error::{Error, Result};
use crate::eval::{self, EvalOptions, TsneConfig};
use crate::rng::Rng;
use crate::train::{self, Checkpoint, RunOutputs, TrainConfig, Trainer};
use crate::Tensor;

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

/// Environment variable capping worker threads.
pub const THREADS_ENV: &str = "ACWGAN_THREADS";

#[derive(Debug, Parser)]
#[command(name = "acwgan", version, about = "Conditional microstructure synthesis with an auxiliary-classifier WGAN-GP")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a training corpus from micrographs (or the synthetic texture set).
    Prep(PrepArgs),
    /// Train generator and critic on a prepared corpus.
    Train(TrainArgs),
    /// Write generated images from a checkpoint.
    Generate(GenerateArgs),
    /// Compare generated and real images: S2 curves and a feature embedding.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct PrepArgs {
    /// Metadata CSV with columns path,cooling_method,magnification.
    #[arg(long, required_unless_present = "synthetic")]
    pub metadata: Option<PathBuf>,
    /// Directory the metadata paths are relative to.
    #[arg(long, required_unless_present = "synthetic")]
    pub images: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = data::DEFAULT_CROP)]
    pub crop: usize,
    #[arg(long, default_value_t = data::DEFAULT_TARGET_PER_CLASS)]
    pub target_per_class: usize,
    #[arg(long, default_value_t = data::DEFAULT_MAGNIFICATION)]
    pub magnification: f64,
    #[arg(long, default_value_t = data::DEFAULT_MAGNIFICATION_TOL)]
    pub magnification_tol: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Use the built-in synthetic textures instead of micrographs.
    #[arg(long, conflicts_with_all = ["metadata", "images"])]
    pub synthetic: bool,
    /// Images per class for `--synthetic`.
    #[arg(long, default_value_t = 200, requires = "synthetic")]
    pub per_class: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// JSON run configuration; flags given here override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f32>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub critic_steps_per_gen: Option<usize>,
    #[arg(long)]
    pub lambda1: Option<f32>,
    #[arg(long)]
    pub lambda2: Option<f32>,
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    /// Stop after this many total steps.
    #[arg(long)]
    pub max_steps: Option<u64>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Cooling method name or code; required unless `--grid`.
    #[arg(long, required_unless_present = "grid")]
    pub label: Option<String>,
    /// Images to write (columns per row with `--grid`).
    #[arg(long, default_value_t = 1)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// One row per cooling method; column j shares its noise vector across rows.
    #[arg(long, conflicts_with = "label")]
    pub grid: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, default_value_t = eval::DEFAULT_PAIRS)]
    pub pairs: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = TsneConfig::default().iters)]
    pub tsne_iters: usize,
}

/// JSON run configuration for `train`. Every field is optional.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub corpus: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub max_steps: Option<u64>,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Applies flags on top of the file values.
    pub fn apply(&mut self, a: &TrainArgs) {
        let t = &mut self.train;
        if a.corpus.is_some() {
            self.corpus.clone_from(&a.corpus);
        }
        if a.out.is_some() {
            self.out.clone_from(&a.out);
        }
        if a.max_steps.is_some() {
            self.max_steps = a.max_steps;
        }
        if let Some(v) = a.epochs {
            t.epochs = v;
        }
        if let Some(v) = a.batch_size {
            t.batch_size = v;
        }
        if let Some(v) = a.lr {
            t.lr = v;
        }
        if let Some(v) = a.seed {
            t.seed = v;
        }
        if let Some(v) = a.critic_steps_per_gen {
            t.critic_steps_per_gen = v;
        }
        if let Some(v) = a.lambda1 {
            t.loss.lambda1 = v;
        }
        if let Some(v) = a.lambda2 {
            t.loss.lambda2 = v;
        }
        if let Some(v) = a.checkpoint_every {
            t.checkpoint_every = v;
        }
    }
}

/// Maps an error to the process exit code.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::NonFinite(_) => EXIT_NUMERIC,
        _ => EXIT_INPUT,
    }
}

/// Reads the thread cap. All kernels here run on the calling thread, so any
/// valid cap is already satisfied.
pub fn thread_cap() -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(Error::Config(format!("{THREADS_ENV} must be a positive integer, got {v:?}"))),
        },
    }
}

pub fn run(cli: Cli) -> Result<()> {
    if let Some(n) = thread_cap()? {
        log::debug!("thread cap {n}; running single-threaded");
    }
    match cli.command {
        Command::Prep(a) => cmd_prep(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Generate(a) => cmd_generate(&a),
        Command::Eval(a) => cmd_eval(&a),
    }
}

pub fn cmd_prep(a: &PrepArgs) -> Result<()> {
    let corpus = if a.synthetic {
        if a.per_class == 0 || a.crop == 0 {
            return Err(Error::Config("--per-class and --crop must be positive".into()));
        }
        data::synth::synth_corpus(a.seed, a.per_class, a.crop)
    } else {
        let (Some(meta), Some(images)) = (&a.metadata, &a.images) else {
            return Err(Error::Config("--metadata and --images are required".into()));
        };
        let records = data::load_metadata(meta)?;
        let cfg = CorpusConfig {
            crop: a.crop,
            target_per_class: a.target_per_class,
            magnification: a.magnification,
            magnification_tol: a.magnification_tol,
            seed: a.seed,
        };
        let (corpus, report) = data::build_corpus(&records, images, &cfg)?;
        if report.rejected_by_magnification > 0 {
            log::warn!(
                "{} source images rejected by magnification filter",
                report.rejected_by_magnification
            );
        }
        for (class, n) in &report.crops_per_source {
            log::info!("{class}: {n} crops per source image");
        }
        corpus
    };
    corpus.save(&a.out)?;
    let counts = corpus.per_class_counts();
    log::info!("wrote {} images to {} (per class {counts:?})", corpus.len(), a.out.display());
    Ok(())
}

pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    cfg.apply(a);
    let corpus_dir = cfg
        .corpus
        .clone()
        .ok_or_else(|| Error::Config("no corpus given (--corpus or \"corpus\" in the config)".into()))?;
    let out = cfg
        .out
        .clone()
        .ok_or_else(|| Error::Config("no output directory given (--out or \"out\" in the config)".into()))?;
    let corpus = Corpus::load(&corpus_dir)?;
    let size = corpus.image_size()?;
    if cfg.train.net.image_size != size {
        log::info!("image_size set to {size} from the corpus");
        cfg.train.net.image_size = size;
    }
    let split = corpus.split(cfg.train.seed);
    if cfg.train.batch_size > split.train.len() {
        log::warn!(
            "batch_size {} exceeds the {} training images; using {}",
            cfg.train.batch_size,
            split.train.len(),
            split.train.len()
        );
        cfg.train.batch_size = split.train.len();
    }
    cfg.train.validate()?;

    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let manifest = out.join("run.json");
    fs::write(&manifest, serde_json::to_string_pretty(&cfg)?).map_err(|e| Error::io(&manifest, e))?;
    let metrics = out.join("metrics.csv");
    if metrics.exists() {
        fs::remove_file(&metrics).map_err(|e| Error::io(&metrics, e))?;
    }
    log::info!(
        "training on {} images ({} held out), lr {}, batch {}, {} epochs",
        split.train.len(),
        split.eval.len(),
        cfg.train.lr,
        cfg.train.batch_size,
        cfg.train.epochs
    );

    let mut trainer = Trainer::new(&cfg.train, split.train)?;
    let outputs = RunOutputs {
        dir: Some(out.clone()),
        max_steps: cfg.max_steps,
    };
    let steps = train::run(&mut trainer, &corpus, &outputs)?;
    log::info!(
        "{} steps ({} critic, {} generator); final checkpoint in {}",
        steps.len(),
        trainer.critic_steps(),
        trainer.gen_steps(),
        out.join("final.acwg").display()
    );
    Ok(())
}

fn write_image(path: &Path, pixels: &[f32], size: usize) -> Result<()> {
    pgm::write(path, &Image::new(size, size, data::to_gray8(pixels))?)
}

pub fn cmd_generate(a: &GenerateArgs) -> Result<()> {
    if a.count == 0 {
        return Err(Error::Config("--count must be at least 1".into()));
    }
    let label = match (&a.label, a.grid) {
        (Some(l), false) => Some(l.parse::<CoolingMethod>().map_err(Error::Config)?),
        _ => None,
    };
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let g = train::load_generator(&ckpt)?;
    let s = g.config().image_size;
    let mut rng = Rng::new(a.seed);
    let z = g.sample_noise(a.count, &mut rng);
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;

    let rows: Vec<CoolingMethod> = match label {
        Some(l) => vec![l],
        None => CoolingMethod::ALL.to_vec(),
    };
    let mut grid = vec![0f32; rows.len() * a.count * s * s];
    let row_len = a.count * s;
    for (r, class) in rows.iter().enumerate() {
        let labels = vec![class.index(); a.count];
        let images = g.generate(&z, &labels, crate::Mode::Eval, &mut rng)?;
        for (j, px) in images.data().chunks(s * s).enumerate() {
            write_image(&a.out.join(format!("{}-{j:04}.pgm", class.name())), px, s)?;
            for y in 0..s {
                let dst = (r * s + y) * row_len + j * s;
                grid[dst..dst + s].copy_from_slice(&px[y * s..(y + 1) * s]);
            }
        }
    }
    if a.grid {
        let img = Image::new(row_len, rows.len() * s, data::to_gray8(&grid))?;
        pgm::write(&a.out.join("grid.pgm"), &img)?;
    }
    log::info!("wrote {} images to {}", rows.len() * a.count, a.out.display());
    Ok(())
}

pub fn cmd_eval(a: &EvalArgs) -> Result<()> {
    if a.pairs == 0 {
        return Err(Error::Config("--pairs must be at least 1".into()));
    }
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let config: TrainConfig = serde_json::from_str(&ckpt.config_json)
        .map_err(|e| Error::Checkpoint(format!("config: {e}")))?;
    let g = train::load_generator(&ckpt)?;
    let critic = train::load_critic(&ckpt)?;
    let corpus = Corpus::load(&a.corpus)?;
    if corpus.image_size()? != config.net.image_size {
        return Err(Error::Data(format!(
            "corpus images are {0}x{0} but the checkpoint expects {1}x{1}",
            corpus.image_size()?,
            config.net.image_size
        )));
    }
    // the held-out part of the split used in training
    let split = corpus.split(config.seed);
    let (real, labels): (Tensor, Vec<usize>) = corpus.batch(&split.eval)?;
    let opts = EvalOptions {
        pairs: a.pairs,
        seed: a.seed,
        tsne: TsneConfig {
            iters: a.tsne_iters,
            ..TsneConfig::default()
        },
        ..EvalOptions::default()
    };
    let s = eval::evaluate(&g, &critic, &real, &labels, &opts, &a.out)?;
    log::info!(
        "S2 MAE {:.5} (real-vs-real {:.5}, ratio {:.3}); overlap {:.3} (k={}); critic accuracy {:.3}",
        s.s2_synth.mean,
        s.s2_real_baseline.mean,
        s.s2_ratio,
        s.overlap_score,
        s.overlap_k,
        s.critic_accuracy_real
    );
    Ok(())
}
