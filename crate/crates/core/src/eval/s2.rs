//! Two-point correlation `S₂` of binary phase maps, estimated without
//! periodic wrap-around: for each offset Δ the number of in-bounds pairs
//! `(p, p+Δ)` with both pixels set is divided by the number of in-bounds pairs.
//! Offsets are pooled into radial bins `round(‖Δ‖)` by summing both counts.

use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::Serialize;

use super::otsu::PhaseIndicator;
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationCurve {
    /// `s2[r]` for radii `0..=R`, `R = floor(S/2)`.
    pub s2: Vec<f64>,
}

impl CorrelationCurve {
    pub fn max_radius(&self) -> usize {
        self.s2.len() - 1
    }
}

fn max_radius(ind: &PhaseIndicator) -> usize {
    ind.width.min(ind.height) / 2
}

/// Pair counts `Σ_p ind(p)·ind(p+Δ)` for `|dy|, |dx| ≤ r`, row-major over
/// `(dy + r, dx + r)`, by direct summation.
pub fn offset_counts_direct(ind: &PhaseIndicator, r: usize) -> Vec<u64> {
    let (h, w) = (ind.height as isize, ind.width as isize);
    let ri = r as isize;
    let side = 2 * r + 1;
    let mut out = vec![0u64; side * side];
    for dy in -ri..=ri {
        for dx in -ri..=ri {
            let mut c = 0u64;
            for y in 0.max(-dy)..h.min(h - dy) {
                for x in 0.max(-dx)..w.min(w - dx) {
                    c += (ind.data[(y * w + x) as usize] & ind.data[((y + dy) * w + x + dx) as usize]) as u64;
                }
            }
            out[(dy + ri) as usize * side + (dx + ri) as usize] = c;
        }
    }
    out
}

/// Same counts as [`offset_counts_direct`] via a zero-padded FFT
/// autocorrelation, rounded to integers.
pub fn offset_counts_fft(ind: &PhaseIndicator, r: usize) -> Vec<u64> {
    let (h, w) = (ind.height, ind.width);
    let (ph, pw) = (2 * h, 2 * w);
    let mut grid = vec![Complex::new(0.0f64, 0.0); ph * pw];
    for y in 0..h {
        for x in 0..w {
            grid[y * pw + x].re = ind.data[y * w + x] as f64;
        }
    }
    let mut planner = FftPlanner::new();
    fft2(&mut grid, ph, pw, &mut planner, false);
    for v in &mut grid {
        *v = Complex::new(v.norm_sqr(), 0.0);
    }
    fft2(&mut grid, ph, pw, &mut planner, true);
    let scale = 1.0 / (ph * pw) as f64;
    let ri = r as isize;
    let side = 2 * r + 1;
    let mut out = vec![0u64; side * side];
    for dy in -ri..=ri {
        for dx in -ri..=ri {
            let iy = dy.rem_euclid(ph as isize) as usize;
            let ix = dx.rem_euclid(pw as isize) as usize;
            let v = grid[iy * pw + ix].re * scale;
            out[(dy + ri) as usize * side + (dx + ri) as usize] = v.round().max(0.0) as u64;
        }
    }
    out
}

fn fft2(grid: &mut [Complex<f64>], h: usize, w: usize, planner: &mut FftPlanner<f64>, inverse: bool) {
    let row = if inverse { planner.plan_fft_inverse(w) } else { planner.plan_fft_forward(w) };
    for chunk in grid.chunks_exact_mut(w) {
        row.process(chunk);
    }
    let col = if inverse { planner.plan_fft_inverse(h) } else { planner.plan_fft_forward(h) };
    let mut buf = vec![Complex::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            buf[y] = grid[y * w + x];
        }
        col.process(&mut buf);
        for y in 0..h {
            grid[y * w + x] = buf[y];
        }
    }
}

fn radial_curve(counts: &[u64], h: usize, w: usize, r: usize) -> CorrelationCurve {
    let ri = r as isize;
    let side = 2 * r + 1;
    let mut num = vec![0u64; r + 1];
    let mut den = vec![0u64; r + 1];
    for dy in -ri..=ri {
        for dx in -ri..=ri {
            let bin = ((dy * dy + dx * dx) as f64).sqrt().round() as usize;
            if bin > r {
                continue;
            }
            num[bin] += counts[(dy + ri) as usize * side + (dx + ri) as usize];
            den[bin] += ((h as isize - dy.abs()) * (w as isize - dx.abs())) as u64;
        }
    }
    CorrelationCurve {
        s2: num.iter().zip(&den).map(|(&n, &d)| n as f64 / d as f64).collect(),
    }
}

/// Radially binned `S₂` using FFT pair counts.
pub fn two_point_correlation(ind: &PhaseIndicator) -> CorrelationCurve {
    let r = max_radius(ind);
    radial_curve(&offset_counts_fft(ind, r), ind.height, ind.width, r)
}

/// Radially binned `S₂` by direct pair counting.
pub fn two_point_correlation_direct(ind: &PhaseIndicator) -> CorrelationCurve {
    let r = max_radius(ind);
    radial_curve(&offset_counts_direct(ind, r), ind.height, ind.width, r)
}

/// `S₂` at a single offset `(dy, dx)`.
pub fn s2_at_offset(ind: &PhaseIndicator, dy: isize, dx: isize) -> f64 {
    let (h, w) = (ind.height as isize, ind.width as isize);
    let (mut c, mut n) = (0u64, 0u64);
    for y in 0.max(-dy)..h.min(h - dy) {
        for x in 0.max(-dx)..w.min(w - dx) {
            c += (ind.data[(y * w + x) as usize] & ind.data[((y + dy) * w + x + dx) as usize]) as u64;
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        c as f64 / n as f64
    }
}

/// Mean absolute difference over radial bins.
pub fn curve_mae(a: &CorrelationCurve, b: &CorrelationCurve) -> f64 {
    let n = a.s2.len().min(b.s2.len());
    a.s2[..n].iter().zip(&b.s2[..n]).map(|(x, y)| (x - y).abs()).sum::<f64>() / n as f64
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MaeSummary {
    pub pairs: usize,
    pub mean: f64,
    pub p05: f64,
    pub p25: f64,
    pub median: f64,
    pub p75: f64,
    pub p95: f64,
}

impl MaeSummary {
    fn from_values(values: &[f64]) -> Self {
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let q = |p: f64| {
            let pos = p * (v.len() - 1) as f64;
            let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
            v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
        };
        Self {
            pairs: v.len(),
            mean: v.iter().sum::<f64>() / v.len() as f64,
            p05: q(0.05),
            p25: q(0.25),
            median: q(0.5),
            p75: q(0.75),
            p95: q(0.95),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct S2Comparison {
    /// `(real index, synthesized index)` per pair.
    pub pairs: Vec<(usize, usize)>,
    pub mae: Vec<f64>,
    pub summary: MaeSummary,
}

/// Per-pair MAE for explicitly given pairs.
pub fn s2_compare_pairs(
    real: &[CorrelationCurve],
    synth: &[CorrelationCurve],
    pairs: Vec<(usize, usize)>,
) -> Result<S2Comparison> {
    if pairs.is_empty() {
        return Err(Error::Data("no pairs to compare".into()));
    }
    let mut mae = Vec::with_capacity(pairs.len());
    for &(i, j) in &pairs {
        let (a, b) = real
            .get(i)
            .zip(synth.get(j))
            .ok_or_else(|| Error::Data(format!("pair ({i}, {j}) out of range")))?;
        mae.push(curve_mae(a, b));
    }
    let summary = MaeSummary::from_values(&mae);
    Ok(S2Comparison { pairs, mae, summary })
}

/// `n_pairs` (real, synthesized) pairs drawn uniformly with replacement.
pub fn s2_compare(
    real: &[CorrelationCurve],
    synth: &[CorrelationCurve],
    n_pairs: usize,
    rng: &mut Rng,
) -> Result<S2Comparison> {
    if real.is_empty() || synth.is_empty() {
        return Err(Error::Data("s2_compare needs non-empty real and synthesized sets".into()));
    }
    let pairs = (0..n_pairs)
        .map(|_| (rng.below(real.len()), rng.below(synth.len())))
        .collect();
    s2_compare_pairs(real, synth, pairs)
}

/// Real-vs-real reference: pairs of distinct images from the same set.
pub fn s2_baseline(real: &[CorrelationCurve], n_pairs: usize, rng: &mut Rng) -> Result<S2Comparison> {
    if real.len() < 2 {
        return Err(Error::Data("baseline needs at least two real images".into()));
    }
    let pairs = (0..n_pairs)
        .map(|_| {
            let i = rng.below(real.len());
            let j = (i + 1 + rng.below(real.len() - 1)) % real.len();
            (i, j)
        })
        .collect();
    s2_compare_pairs(real, real, pairs)
}

/// Writes `pair_id,radius,s2_real,s2_synth` rows.
pub fn write_pair_curves(
    path: &Path,
    real: &[CorrelationCurve],
    synth: &[CorrelationCurve],
    cmp: &S2Comparison,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["pair_id", "radius", "s2_real", "s2_synth"])?;
    for (id, &(i, j)) in cmp.pairs.iter().enumerate() {
        for (r, (a, b)) in real[i].s2.iter().zip(&synth[j].s2).enumerate() {
            w.write_record([id.to_string(), r.to_string(), a.to_string(), b.to_string()])?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}
