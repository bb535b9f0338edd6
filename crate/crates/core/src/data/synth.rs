//! Three-phase random textures standing in for real micrographs.
//!
//! Each image is white Gaussian noise box-blurred with a class-specific
//! radius, rescaled back to unit variance, and cut at two class-specific
//! thresholds into dark (−1), matrix (0) and bright (+1) phases. Classes
//! therefore differ both in feature size and in phase fractions.

use super::{CoolingMethod, Corpus, LabeledImage, Provenance};
use crate::rng::Rng;

/// Per class: blur radius, then lower and upper thresholds on the unit-variance
/// field. The thresholds are standard normal quantiles, giving expected
/// dark/bright fractions of (0.15, 0.35), (0.25, 0.25), (0.35, 0.35),
/// (0.45, 0.20) and (0.55, 0.30).
const CLASS_PARAMS: [(usize, f32, f32); 5] = [
    (1, -1.0364, 0.3853),
    (2, -0.6745, 0.6745),
    (3, -0.3853, 0.3853),
    (4, -0.1257, 0.8416),
    (5, 0.1257, 0.5244),
];

const SYNTH_STREAM: u64 = 0x5359_4e54 << 32;

/// Expected fraction of dark-phase pixels for a class.
pub fn expected_dark_fraction(class: CoolingMethod) -> f64 {
    [0.15, 0.25, 0.35, 0.45, 0.55][class.code() as usize]
}

/// One texture image; pixels are exactly −1, 0 or +1.
pub fn synth_image(class: CoolingMethod, size: usize, rng: &mut Rng) -> Vec<f32> {
    let (r, lo, hi) = CLASS_PARAMS[class.code() as usize];
    let padded = size + 2 * r;
    let noise: Vec<f32> = (0..padded * padded).map(|_| rng.normal() as f32).collect();
    let win = 2 * r + 1;

    // horizontal box sum: rows padded, columns size
    let mut horiz = vec![0f32; padded * size];
    for y in 0..padded {
        let row = &noise[y * padded..(y + 1) * padded];
        let mut acc: f32 = row[..win].iter().sum();
        horiz[y * size] = acc;
        for x in 1..size {
            acc += row[x + win - 1] - row[x - 1];
            horiz[y * size + x] = acc;
        }
    }
    // A sum of win² unit normals has standard deviation win.
    let norm = 1.0 / win as f32;
    let mut out = vec![0f32; size * size];
    for x in 0..size {
        let mut acc: f32 = (0..win).map(|y| horiz[y * size + x]).sum();
        for y in 0..size {
            if y > 0 {
                acc += horiz[(y + win - 1) * size + x] - horiz[(y - 1) * size + x];
            }
            let z = acc * norm;
            out[y * size + x] = if z < lo {
                -1.0
            } else if z > hi {
                1.0
            } else {
                0.0
            };
        }
    }
    out
}

/// `n_per_class` images for every class, classes in code order.
pub fn synth_corpus(seed: u64, n_per_class: usize, size: usize) -> Corpus {
    let mut images = Vec::with_capacity(5 * n_per_class);
    for class in CoolingMethod::ALL {
        for i in 0..n_per_class {
            let stream = SYNTH_STREAM | (class.code() as u64) << 24 | i as u64;
            let mut rng = Rng::derive(seed, stream);
            images.push(LabeledImage {
                size,
                pixels: synth_image(class, size, &mut rng),
                label: class,
                provenance: Provenance {
                    source: format!("synthetic/{}/{i}", class.name()),
                    offset: (0, 0),
                    rotation: 0,
                },
            });
        }
    }
    Corpus::new(images, seed)
}
