use crate::error::{Error, Result};

/// Binary phase map: 1 where the pixel is above the threshold.
#[derive(Clone, Debug, PartialEq)]
pub struct PhaseIndicator {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
    pub volume_fraction: f64,
    /// Set when the image was constant and no threshold exists.
    pub degenerate: bool,
}

impl PhaseIndicator {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width * height != data.len() || data.is_empty() {
            return Err(Error::Data(format!(
                "{width}x{height} indicator with {} values",
                data.len()
            )));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::Data("indicator values must be 0 or 1".into()));
        }
        let ones = data.iter().filter(|&&v| v == 1).count();
        Ok(Self {
            width,
            height,
            volume_fraction: ones as f64 / data.len() as f64,
            data,
            degenerate: false,
        })
    }
}

/// Threshold `t` maximizing between-class variance for the split
/// `{≤ t} | {> t}`; ties go to the lowest `t`. `None` when fewer than two
/// bins are occupied.
pub fn otsu_threshold(hist: &[u64; 256]) -> Option<u8> {
    let total: u64 = hist.iter().sum();
    if hist.iter().filter(|&&c| c > 0).count() < 2 {
        return None;
    }
    let total_f = total as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum();
    let (mut w0, mut sum0) = (0u64, 0f64);
    let mut best = (f64::NEG_INFINITY, 0u8);
    for t in 0..255usize {
        w0 += hist[t];
        sum0 += t as f64 * hist[t] as f64;
        let w1 = total - w0;
        if w0 == 0 || w1 == 0 {
            continue;
        }
        let m0 = sum0 / w0 as f64;
        let m1 = (sum_all - sum0) / w1 as f64;
        let between = (w0 as f64 / total_f) * (w1 as f64 / total_f) * (m0 - m1) * (m0 - m1);
        if between > best.0 {
            best = (between, t as u8);
        }
    }
    Some(best.1)
}

/// Otsu binarization of an image with values in `[−1, 1]`, histogrammed
/// after rescaling to 8-bit levels.
pub fn binarize_otsu(pixels: &[f32], width: usize, height: usize) -> Result<PhaseIndicator> {
    if width * height != pixels.len() || pixels.is_empty() {
        return Err(Error::Data(format!(
            "{width}x{height} image with {} pixels",
            pixels.len()
        )));
    }
    let levels = crate::data::to_gray8(pixels);
    let mut hist = [0u64; 256];
    for &l in &levels {
        hist[l as usize] += 1;
    }
    match otsu_threshold(&hist) {
        Some(t) => PhaseIndicator::new(width, height, levels.iter().map(|&l| (l > t) as u8).collect()),
        None => Ok(PhaseIndicator {
            width,
            height,
            data: vec![0; pixels.len()],
            volume_fraction: 0.0,
            degenerate: true,
        }),
    }
}
