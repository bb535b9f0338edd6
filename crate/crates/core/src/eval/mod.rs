//! Validation of synthesized images against real ones: two-point statistics of
//! binarized phase maps, and a 2-D embedding of network features with a
//! nearest-neighbor mixing score.

pub mod otsu;
pub mod s2;
pub mod tsne;

use std::fs;
use std::path::Path;

use serde::Serialize;

pub use otsu::{binarize_otsu, PhaseIndicator};
pub use s2::{s2_compare, two_point_correlation, CorrelationCurve, MaeSummary, S2Comparison};
pub use tsne::{tsne, TsneConfig, TsneResult};

use crate::data::CoolingMethod;
use crate::error::{Error, Result};
use crate::net::{CriticNet, GeneratorNet, NetConfig};
use crate::rng::Rng;
use crate::tensor::{Mode, Tape, Tensor};
use crate::train::{adam_step, AdamConfig, AdamState};

pub const DEFAULT_PAIRS: usize = 4000;
pub const DEFAULT_OVERLAP_K: usize = 20;
const CHUNK: usize = 64;

/// Anything that maps an image batch `[B,1,S,S]` to feature rows `[B,D]`.
pub trait FeatureExtractor {
    fn features(&self, images: &Tensor) -> Result<Tensor>;
}

impl FeatureExtractor for CriticNet {
    /// Pre-dropout features in eval mode.
    fn features(&self, images: &Tensor) -> Result<Tensor> {
        let mut unused = Rng::new(0);
        Ok(self.criticize(images, Mode::Eval, &mut unused)?.2)
    }
}

/// Features for a large image set, evaluated in fixed-size chunks.
pub fn extract_features(net: &dyn FeatureExtractor, images: &Tensor) -> Result<Vec<Vec<f64>>> {
    let n = images.shape()[0];
    let mut rows = Vec::with_capacity(n);
    let mut start = 0;
    while start < n {
        let count = CHUNK.min(n - start);
        let f = net.features(&images.slice_leading(start, count)?)?;
        let d = f.shape()[1];
        rows.extend(f.data().chunks(d).map(|r| r.iter().map(|&v| v as f64).collect::<Vec<_>>()));
        start += count;
    }
    Ok(rows)
}

fn dist2(a: &[f64; 2], b: &[f64; 2]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

/// Mean silhouette coefficient of `labels` over 2-D points.
pub fn silhouette_score(points: &[[f64; 2]], labels: &[usize]) -> Result<f64> {
    if points.len() != labels.len() || points.len() < 2 {
        return Err(Error::Data("silhouette needs matching points and labels".into()));
    }
    let k = labels.iter().max().unwrap() + 1;
    let sizes = labels.iter().fold(vec![0usize; k], |mut c, &l| {
        c[l] += 1;
        c
    });
    if sizes.iter().filter(|&&s| s > 0).count() < 2 {
        return Err(Error::Data("silhouette needs at least two clusters".into()));
    }
    let mut total = 0.0;
    for (i, p) in points.iter().enumerate() {
        let mut sums = vec![0.0; k];
        for (j, q) in points.iter().enumerate() {
            if i != j {
                sums[labels[j]] += dist2(p, q).sqrt();
            }
        }
        let own = labels[i];
        if sizes[own] == 1 {
            continue;
        }
        let a = sums[own] / (sizes[own] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != own && sizes[c] > 0)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        total += (b - a) / a.max(b);
    }
    Ok(total / points.len() as f64)
}

/// Two-sample k-nearest-neighbor mixing: the average, over all pooled points,
/// of the fraction of a point's `k` nearest neighbors (itself excluded) drawn
/// from the other set. Distance ties are broken by a seeded random order.
/// About 0.5 for well-mixed sets, near 0 for separated ones.
pub fn overlap_score(real: &[[f64; 2]], synth: &[[f64; 2]], k: usize, rng: &mut Rng) -> Result<f64> {
    if k == 0 || real.len() < k + 1 || synth.len() < k + 1 {
        return Err(Error::Data(format!(
            "overlap with k={k} needs at least {} points per set (got {} and {})",
            k + 1,
            real.len(),
            synth.len()
        )));
    }
    let pooled: Vec<([f64; 2], bool)> = real
        .iter()
        .map(|&p| (p, false))
        .chain(synth.iter().map(|&p| (p, true)))
        .collect();
    let tie: Vec<u64> = (0..pooled.len()).map(|_| rng.next_u64()).collect();
    let mut total = 0.0;
    let mut order: Vec<(f64, u64, bool)> = Vec::with_capacity(pooled.len());
    for (i, (p, src)) in pooled.iter().enumerate() {
        order.clear();
        order.extend(
            pooled
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(j, (q, s))| (dist2(p, q), tie[j], *s)),
        );
        order.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let other = order[..k].iter().filter(|o| o.2 != *src).count();
        total += other as f64 / k as f64;
    }
    Ok(total / pooled.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 32,
            lr: 5e-4,
            seed: 0,
        }
    }
}

/// Applies an independent random rotation/reflection to every square image
/// of a `[B,1,S,S]` batch.
fn dihedral_jitter(x: &mut Tensor, rng: &mut Rng) {
    let s = x.shape()[3];
    let mut tmp = vec![0f32; s * s];
    for img in x.data_mut().chunks_mut(s * s) {
        let (rot, flip) = (rng.below(4), rng.below(2) == 1);
        for y in 0..s {
            for c in 0..s {
                let c2 = if flip { s - 1 - c } else { c };
                let (sy, sx) = match rot {
                    0 => (y, c2),
                    1 => (s - 1 - c2, y),
                    2 => (s - 1 - y, s - 1 - c2),
                    _ => (c2, s - 1 - y),
                };
                tmp[y * s + c] = img[sy * s + sx];
            }
        }
        img.copy_from_slice(&tmp);
    }
}

/// Trains a freshly initialized critic-architecture network on the
/// classification objective alone, for use as an independent label probe.
/// Each minibatch is randomly rotated and reflected.
pub fn train_probe_classifier(
    net: &NetConfig,
    images: &Tensor,
    labels: &[usize],
    cfg: &ProbeConfig,
) -> Result<CriticNet> {
    let n = labels.len();
    if n == 0 || images.shape()[0] != n {
        return Err(Error::Data("probe training set is empty or mislabeled".into()));
    }
    let mut rng = Rng::derive(cfg.seed, 0x5052_4f42);
    let mut clf = CriticNet::new(net, &mut rng)?;
    let mut adam = AdamState::new(clf.params().tensors());
    let adam_cfg = AdamConfig {
        lr: cfg.lr,
        beta1: 0.5,
        beta2: 0.9,
        eps: 1e-8,
    };
    let b = cfg.batch_size.min(n);
    for _ in 0..cfg.epochs {
        let perm = rng.permutation(n);
        for chunk in perm.chunks_exact(b) {
            let mut x = images.select_leading(chunk)?;
            dihedral_jitter(&mut x, &mut rng);
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let mut tape = Tape::new();
            let p = clf.params().bind(&mut tape);
            let xv = tape.constant(x);
            let out = clf.forward(&mut tape, &p, xv, Mode::Train, &mut rng)?;
            let ce = tape.sparse_cross_entropy(out.logits, &y)?;
            let grads = tape.gradients(ce, &p)?;
            adam_step(clf.params_mut().tensors_mut(), &grads, &mut adam, &adam_cfg)?;
        }
    }
    Ok(clf)
}

/// Fraction of images whose arg-max class logit (eval mode) equals the label.
pub fn classifier_accuracy(net: &CriticNet, images: &Tensor, labels: &[usize]) -> Result<f64> {
    let n = labels.len();
    if n == 0 || images.shape()[0] != n {
        return Err(Error::Data("accuracy needs a non-empty labeled set".into()));
    }
    let mut unused = Rng::new(0);
    let mut correct = 0;
    let mut start = 0;
    while start < n {
        let count = CHUNK.min(n - start);
        let (_, logits, _) = net.criticize(&images.slice_leading(start, count)?, Mode::Eval, &mut unused)?;
        let k = logits.shape()[1];
        for (r, row) in logits.data().chunks(k).enumerate() {
            let arg = row
                .iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0;
            correct += (arg == labels[start + r]) as usize;
        }
        start += count;
    }
    Ok(correct as f64 / n as f64)
}

/// Generates one image per label, in eval mode, with noise drawn from `rng`.
pub fn generate_for_labels(g: &GeneratorNet, labels: &[usize], rng: &mut Rng) -> Result<Tensor> {
    let s = g.config().image_size;
    let mut data = Vec::with_capacity(labels.len() * s * s);
    let mut start = 0;
    while start < labels.len() {
        let count = CHUNK.min(labels.len() - start);
        let z = g.sample_noise(count, rng);
        data.extend(g.generate(&z, &labels[start..start + count], Mode::Eval, rng)?.into_data());
        start += count;
    }
    Tensor::new(vec![labels.len(), 1, s, s], data)
}

/// Otsu-binarized `S₂` curve for every image in a `[B,1,S,S]` batch.
pub fn correlation_curves(images: &Tensor) -> Result<Vec<CorrelationCurve>> {
    let shape = images.shape();
    if shape.len() != 4 || shape[1] != 1 {
        return Err(Error::dim(format!("expected [B,1,S,S] images, got {shape:?}")));
    }
    let (h, w) = (shape[2], shape[3]);
    images
        .data()
        .chunks(h * w)
        .map(|px| Ok(two_point_correlation(&binarize_otsu(px, w, h)?)))
        .collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalSummary {
    pub real_images: usize,
    pub synth_images: usize,
    pub s2_synth: MaeSummary,
    pub s2_real_baseline: MaeSummary,
    pub s2_ratio: f64,
    pub tsne_perplexity: f64,
    pub tsne_final_kl: f64,
    pub overlap_k: usize,
    pub overlap_score: f64,
    pub silhouette_by_label: Option<f64>,
    pub critic_accuracy_real: f64,
}

#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub pairs: usize,
    pub seed: u64,
    pub tsne: TsneConfig,
    pub overlap_k: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            pairs: DEFAULT_PAIRS,
            seed: 0,
            tsne: TsneConfig::default(),
            overlap_k: DEFAULT_OVERLAP_K,
        }
    }
}

/// Full evaluation of a trained pair against real images with labels; one
/// synthesized image is generated per real image, with the same label.
/// Writes `s2_pairs.csv`, `embedding.csv` and `summary.json` under `out`.
/// Perplexity and `k` are reduced automatically for small sets.
pub fn evaluate(
    g: &GeneratorNet,
    critic: &CriticNet,
    real: &Tensor,
    labels: &[usize],
    opts: &EvalOptions,
    out: &Path,
) -> Result<EvalSummary> {
    let n = labels.len();
    if n < 2 {
        return Err(Error::Data("evaluation needs at least two real images".into()));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut rng = Rng::derive(opts.seed, 0x4556_414c);
    let synth = generate_for_labels(g, labels, &mut rng)?;

    let real_curves = correlation_curves(real)?;
    let synth_curves = correlation_curves(&synth)?;
    let cmp = s2::s2_compare(&real_curves, &synth_curves, opts.pairs, &mut rng)?;
    let base = s2::s2_baseline(&real_curves, opts.pairs, &mut rng)?;
    s2::write_pair_curves(&out.join("s2_pairs.csv"), &real_curves, &synth_curves, &cmp)?;

    let mut feats = extract_features(critic, real)?;
    feats.extend(extract_features(critic, &synth)?);
    let pooled = feats.len();
    let max_perp = ((pooled - 1) as f64 / 3.0).floor();
    let mut tcfg = opts.tsne.clone();
    tcfg.seed = opts.seed;
    if tcfg.perplexity > max_perp {
        log::warn!("reducing t-SNE perplexity from {} to {max_perp} for {pooled} points", tcfg.perplexity);
        tcfg.perplexity = max_perp;
    }
    let emb = tsne::tsne(&feats, &tcfg)?;
    let (rp, sp) = emb.points.split_at(n);
    let k = opts.overlap_k.min(n - 1);
    let overlap = overlap_score(rp, sp, k, &mut rng)?;
    let all_labels: Vec<usize> = labels.iter().chain(labels).copied().collect();
    let silhouette = silhouette_score(&emb.points, &all_labels).ok();

    let mut w = csv::Writer::from_path(out.join("embedding.csv"))?;
    w.write_record(["x", "y", "source", "label"])?;
    for (i, p) in emb.points.iter().enumerate() {
        let source = if i < n { "real" } else { "synthesized" };
        let label = CoolingMethod::from_code(all_labels[i] as u8).map_or_else(|| all_labels[i].to_string(), |c| c.name().to_string());
        w.write_record([p[0].to_string(), p[1].to_string(), source.to_string(), label])?;
    }
    w.flush().map_err(|e| Error::io(out, e))?;

    let summary = EvalSummary {
        real_images: n,
        synth_images: n,
        s2_ratio: cmp.summary.mean / base.summary.mean,
        s2_synth: cmp.summary,
        s2_real_baseline: base.summary,
        tsne_perplexity: tcfg.perplexity,
        tsne_final_kl: *emb.kl.last().unwrap_or(&f64::NAN),
        overlap_k: k,
        overlap_score: overlap,
        silhouette_by_label: silhouette,
        critic_accuracy_real: classifier_accuracy(critic, real, labels)?,
    };
    let path = out.join("summary.json");
    fs::write(&path, serde_json::to_string_pretty(&summary)?).map_err(|e| Error::io(&path, e))?;
    Ok(summary)
}
