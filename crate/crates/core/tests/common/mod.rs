//! Independent double-precision oracles shared by the integration suites.
//!
//! Nothing here calls into the tape: reference forwards are written as plain
//! nested loops over `f64`, and derivatives come from central finite
//! differences of those references.

#![allow(dead_code)]

use acwgan::{Rng, Tape, Tensor, Var};

pub const FD_STEP: f64 = 1e-3;
pub const REL_TOL: f64 = 1e-3;

pub fn to_f64(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

/// Central finite-difference gradient of `f` with respect to input `which`.
pub fn fd_grad(f: &dyn Fn(&[Vec<f64>]) -> f64, inputs: &[Vec<f64>], which: usize, h: f64) -> Vec<f64> {
    let mut work = inputs.to_vec();
    (0..inputs[which].len())
        .map(|i| {
            let orig = work[which][i];
            work[which][i] = orig + h;
            let up = f(&work);
            work[which][i] = orig - h;
            let down = f(&work);
            work[which][i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Mixed relative check: `|got − want| ≤ rtol · max(|want|, 0.1·‖want‖∞, 1e-6)`.
/// Returns the worst ratio of error to allowed error.
pub fn rel_check(got: &[f32], want: &[f64], rtol: f64) -> f64 {
    assert_eq!(got.len(), want.len(), "length mismatch");
    let scale = want.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    got.iter()
        .zip(want)
        .map(|(&g, &w)| {
            let allowed = rtol * w.abs().max(0.1 * scale).max(1e-6);
            (g as f64 - w).abs() / allowed
        })
        .fold(0.0, f64::max)
}

pub fn assert_rel(name: &str, got: &[f32], want: &[f64], rtol: f64) {
    let worst = rel_check(got, want, rtol);
    assert!(
        worst <= 1.0,
        "{name}: worst error/tolerance ratio {worst:.3}\n got  {:?}\n want {:?}",
        &got[..got.len().min(8)],
        &want[..want.len().min(8)]
    );
}

/// Checks the tape gradient of `Σ r ⊙ op(inputs)` against finite differences
/// of the same projection through the f64 reference. Returns the worst ratio.
pub fn check_primitive(
    inputs: &[Tensor],
    tape_fn: &dyn Fn(&mut Tape, &[Var]) -> acwgan::Result<Var>,
    ref_fn: &dyn Fn(&[Vec<f64>]) -> Vec<f64>,
    rng: &mut Rng,
) -> Result<f64, String> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = tape_fn(&mut tape, &vars).map_err(|e| e.to_string())?;
    let out_shape = tape.shape(out).to_vec();
    let proj = Tensor::uniform(&out_shape, -1.0, 1.0, rng);
    let r = tape.constant(proj.clone());
    let weighted = tape.mul(out, r).map_err(|e| e.to_string())?;
    let loss = tape.sum(weighted).map_err(|e| e.to_string())?;
    let grads = tape.gradients(loss, &vars).map_err(|e| e.to_string())?;

    let inputs64: Vec<Vec<f64>> = inputs.iter().map(to_f64).collect();
    let forward_ref = ref_fn(&inputs64);
    let forward_ratio = rel_check(tape.value(out).data(), &forward_ref, 1e-4);
    if forward_ratio > 1.0 {
        return Err(format!("forward mismatch (ratio {forward_ratio:.3})"));
    }
    let r64 = to_f64(&proj);
    let objective = |x: &[Vec<f64>]| -> f64 { ref_fn(x).iter().zip(&r64).map(|(a, b)| a * b).sum() };
    let mut worst = 0.0f64;
    for (i, g) in grads.iter().enumerate() {
        let fd = fd_grad(&objective, &inputs64, i, FD_STEP);
        worst = worst.max(rel_check(g.data(), &fd, REL_TOL));
    }
    Ok(worst)
}

// ---- f64 reference forwards -------------------------------------------------

pub fn leaky_ref(x: &[f64], slope: f64) -> Vec<f64> {
    x.iter().map(|&v| if v >= 0.0 { v } else { slope * v }).collect()
}

/// `op(a)[m,k] · op(b)[k,n]` with explicit storage shapes.
pub fn matmul_ref(a: &[f64], a_shape: (usize, usize), ta: bool, b: &[f64], b_shape: (usize, usize), tb: bool) -> Vec<f64> {
    let at = |i: usize, p: usize| if ta { a[p * a_shape.1 + i] } else { a[i * a_shape.1 + p] };
    let bt = |p: usize, j: usize| if tb { b[j * b_shape.1 + p] } else { b[p * b_shape.1 + j] };
    let (m, k) = if ta { (a_shape.1, a_shape.0) } else { a_shape };
    let n = if tb { b_shape.0 } else { b_shape.1 };
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[i * n + j] = (0..k).map(|p| at(i, p) * bt(p, j)).sum();
        }
    }
    out
}

pub fn conv_out(h: usize, k: usize, stride: usize, pad: usize) -> usize {
    (h + 2 * pad - k) / stride + 1
}

/// Direct nested-loop cross-correlation. Shapes: x `[b,c,h,w]`, k `[o,c,kk,kk]`.
pub fn conv_ref(x: &[f64], xs: [usize; 4], k: &[f64], ks: [usize; 4], stride: usize, pad: usize) -> Vec<f64> {
    let [b, c, h, w] = xs;
    let [o, _, kk, _] = ks;
    let (oh, ow) = (conv_out(h, kk, stride, pad), conv_out(w, kk, stride, pad));
    let mut out = vec![0.0; b * o * oh * ow];
    for bi in 0..b {
        for oi in 0..o {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        for ki in 0..kk {
                            for kj in 0..kk {
                                let iy = (y * stride + ki) as isize - pad as isize;
                                let ix = (xx * stride + kj) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc += x[((bi * c + ci) * h + iy as usize) * w + ix as usize]
                                    * k[((oi * c + ci) * kk + ki) * kk + kj];
                            }
                        }
                    }
                    out[((bi * o + oi) * oh + y) * ow + xx] = acc;
                }
            }
        }
    }
    out
}

/// Adjoint of `conv_ref` in its input: scatters `gy` back through the kernel.
pub fn conv_input_adjoint_ref(gy: &[f64], k: &[f64], xs: [usize; 4], ks: [usize; 4], stride: usize, pad: usize) -> Vec<f64> {
    let [b, c, h, w] = xs;
    let [o, _, kk, _] = ks;
    let (oh, ow) = (conv_out(h, kk, stride, pad), conv_out(w, kk, stride, pad));
    let mut dx = vec![0.0; b * c * h * w];
    for bi in 0..b {
        for oi in 0..o {
            for y in 0..oh {
                for xx in 0..ow {
                    let g = gy[((bi * o + oi) * oh + y) * ow + xx];
                    for ci in 0..c {
                        for ki in 0..kk {
                            for kj in 0..kk {
                                let iy = (y * stride + ki) as isize - pad as isize;
                                let ix = (xx * stride + kj) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                dx[((bi * c + ci) * h + iy as usize) * w + ix as usize] +=
                                    g * k[((oi * c + ci) * kk + ki) * kk + kj];
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Adjoint of `conv_ref` in its kernel.
pub fn conv_kernel_adjoint_ref(x: &[f64], gy: &[f64], xs: [usize; 4], ks: [usize; 4], stride: usize, pad: usize) -> Vec<f64> {
    let [b, c, h, w] = xs;
    let [o, _, kk, _] = ks;
    let (oh, ow) = (conv_out(h, kk, stride, pad), conv_out(w, kk, stride, pad));
    let mut dk = vec![0.0; o * c * kk * kk];
    for bi in 0..b {
        for oi in 0..o {
            for y in 0..oh {
                for xx in 0..ow {
                    let g = gy[((bi * o + oi) * oh + y) * ow + xx];
                    for ci in 0..c {
                        for ki in 0..kk {
                            for kj in 0..kk {
                                let iy = (y * stride + ki) as isize - pad as isize;
                                let ix = (xx * stride + kj) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                dk[((oi * c + ci) * kk + ki) * kk + kj] +=
                                    g * x[((bi * c + ci) * h + iy as usize) * w + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    dk
}

pub fn upsample_ref(x: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; planes * 4 * h * w];
    for p in 0..planes {
        for y in 0..2 * h {
            for xx in 0..2 * w {
                out[(p * 2 * h + y) * 2 * w + xx] = x[(p * h + y / 2) * w + xx / 2];
            }
        }
    }
    out
}

pub fn log_softmax_ref(x: &[f64], k: usize) -> Vec<f64> {
    x.chunks(k)
        .flat_map(|row| {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            row.iter().map(move |v| v - lse).collect::<Vec<_>>()
        })
        .collect()
}

/// A small critic used by the double-backward checks:
/// `D(x) = Σ v ⊙ leaky(conv(leaky(conv(x, w1) + b1), w2) + b2)` per sample.
#[derive(Clone, Debug)]
pub struct TinyCritic {
    pub xs: [usize; 4],
    pub k1s: [usize; 4],
    pub k2s: [usize; 4],
    pub stride1: usize,
    pub stride2: usize,
    pub pad: usize,
    pub slope: f64,
}

impl TinyCritic {
    pub fn h1_shape(&self) -> [usize; 4] {
        let [b, _, h, w] = self.xs;
        let [o, _, k, _] = self.k1s;
        [b, o, conv_out(h, k, self.stride1, self.pad), conv_out(w, k, self.stride1, self.pad)]
    }

    pub fn h2_shape(&self) -> [usize; 4] {
        let [b, _, h, w] = self.h1_shape();
        let [o, _, k, _] = self.k2s;
        [b, o, conv_out(h, k, self.stride2, self.pad), conv_out(w, k, self.stride2, self.pad)]
    }

    fn add_channel_bias(y: &mut [f64], shape: [usize; 4], bias: &[f64]) {
        let plane = shape[2] * shape[3];
        for (i, v) in y.iter_mut().enumerate() {
            *v += bias[(i / plane) % shape[1]];
        }
    }

    /// Per-sample scores plus the smallest |pre-activation| (for kink detection).
    /// params = [w1, b1, w2, b2, v].
    pub fn scores(&self, x: &[f64], params: &[Vec<f64>]) -> (Vec<f64>, f64) {
        let mut a1 = conv_ref(x, self.xs, &params[0], self.k1s, self.stride1, self.pad);
        Self::add_channel_bias(&mut a1, self.h1_shape(), &params[1]);
        let mut margin = a1.iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
        let h1 = leaky_ref(&a1, self.slope);
        let mut a2 = conv_ref(&h1, self.h1_shape(), &params[2], self.k2s, self.stride2, self.pad);
        Self::add_channel_bias(&mut a2, self.h2_shape(), &params[3]);
        margin = a2.iter().fold(margin, |m, v| m.min(v.abs()));
        let h2 = leaky_ref(&a2, self.slope);
        let per = h2.len() / self.xs[0];
        let scores = h2
            .chunks(per)
            .map(|c| c.iter().zip(&params[4]).map(|(a, b)| a * b).sum())
            .collect();
        (scores, margin)
    }

    /// Penalty `mean_b (‖∇_x D(x_b)‖ − 1)²`, with the input gradient taken by
    /// central finite differences (so the whole oracle is derivative-free).
    pub fn penalty_fd(&self, x: &[f64], params: &[Vec<f64>], h: f64) -> f64 {
        let b = self.xs[0];
        let per = x.len() / b;
        let mut sq = vec![0.0; b];
        let mut work = x.to_vec();
        for i in 0..x.len() {
            let orig = work[i];
            work[i] = orig + h;
            let up = self.scores(&work, params).0;
            work[i] = orig - h;
            let down = self.scores(&work, params).0;
            work[i] = orig;
            let sample = i / per;
            let d = (up[sample] - down[sample]) / (2.0 * h);
            sq[sample] += d * d;
        }
        sq.iter().map(|s| (s.sqrt() - 1.0).powi(2)).sum::<f64>() / b as f64
    }
}
