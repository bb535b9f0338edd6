//! Gradient checks shared by the autodiff tests and the acceptance run.

use acwgan::{Mode, Rng, Tape, Tensor, Var};
use super::common::*;

const TRIALS: usize = 5;

fn dims(rng: &mut Rng, lo: usize, hi: usize) -> usize {
    lo + rng.below(hi - lo + 1)
}

fn rand(shape: &[usize], rng: &mut Rng) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, rng)
}

/// Uniform values with |x| in [0.1, 1], away from the leaky-ReLU kink.
fn rand_off_kink(shape: &[usize], rng: &mut Rng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = 0.1 + 0.9 * rng.uniform_f32();
        if rng.uniform() < 0.5 {
            -m
        } else {
            m
        }
    })
}

fn positive(shape: &[usize], rng: &mut Rng) -> Tensor {
    Tensor::uniform(shape, 0.5, 2.0, rng)
}

fn run(name: &str, seed: u64, mut make: impl FnMut(&mut Rng) -> (Vec<Tensor>, Box<dyn Fn(&mut Tape, &[Var]) -> acwgan::Result<Var>>, Box<dyn Fn(&[Vec<f64>]) -> Vec<f64>>)) {
    let mut rng = Rng::new(seed);
    for trial in 0..TRIALS {
        let (inputs, tape_fn, ref_fn) = make(&mut rng);
        let worst = check_primitive(&inputs, &*tape_fn, &*ref_fn, &mut rng)
            .unwrap_or_else(|e| panic!("{name} trial {trial}: {e}"));
        assert!(worst <= 1.0, "{name} trial {trial}: gradient error ratio {worst:.3}");
    }
}

pub fn elementwise_binary() {
    run("add", 1, |rng| {
        let s = [dims(rng, 1, 4), dims(rng, 1, 6)];
        (vec![rand(&s, rng), rand(&s, rng)], Box::new(|t, v| t.add(v[0], v[1])), Box::new(|x| x[0].iter().zip(&x[1]).map(|(a, b)| a + b).collect()))
    });
    run("sub", 2, |rng| {
        let s = [dims(rng, 1, 4), dims(rng, 1, 6)];
        (vec![rand(&s, rng), rand(&s, rng)], Box::new(|t, v| t.sub(v[0], v[1])), Box::new(|x| x[0].iter().zip(&x[1]).map(|(a, b)| a - b).collect()))
    });
    run("mul", 3, |rng| {
        let s = [dims(rng, 1, 4), dims(rng, 1, 6)];
        (vec![rand(&s, rng), rand(&s, rng)], Box::new(|t, v| t.mul(v[0], v[1])), Box::new(|x| x[0].iter().zip(&x[1]).map(|(a, b)| a * b).collect()))
    });
}

pub fn elementwise_unary() {
    run("scale", 4, |rng| {
        let s = [dims(rng, 1, 5), dims(rng, 1, 5)];
        let k = rng.uniform() as f32 * 4.0 - 2.0;
        (vec![rand(&s, rng)], Box::new(move |t, v| t.scale(v[0], k)), Box::new(move |x| x[0].iter().map(|a| a * k as f64).collect()))
    });
    run("add_scalar", 5, |rng| {
        let s = [dims(rng, 1, 5), dims(rng, 1, 5)];
        (vec![rand(&s, rng)], Box::new(|t, v| t.add_scalar(v[0], 0.75)), Box::new(|x| x[0].iter().map(|a| a + 0.75).collect()))
    });
    run("recip", 6, |rng| {
        let s = [dims(rng, 1, 5), dims(rng, 1, 5)];
        (vec![positive(&s, rng)], Box::new(|t, v| t.recip(v[0])), Box::new(|x| x[0].iter().map(|a| 1.0 / a).collect()))
    });
    run("sqrt", 7, |rng| {
        let s = [dims(rng, 1, 5), dims(rng, 1, 5)];
        (vec![positive(&s, rng)], Box::new(|t, v| t.sqrt(v[0])), Box::new(|x| x[0].iter().map(|a| a.sqrt()).collect()))
    });
    run("exp", 8, |rng| {
        let s = [dims(rng, 1, 5), dims(rng, 1, 5)];
        (vec![rand(&s, rng)], Box::new(|t, v| t.exp(v[0])), Box::new(|x| x[0].iter().map(|a| a.exp()).collect()))
    });
    run("tanh", 9, |rng| {
        let s = [dims(rng, 1, 5), dims(rng, 1, 5)];
        (vec![Tensor::uniform(&s, -2.0, 2.0, rng)], Box::new(|t, v| t.tanh(v[0])), Box::new(|x| x[0].iter().map(|a| a.tanh()).collect()))
    });
    run("leaky_relu", 10, |rng| {
        let s = [dims(rng, 1, 5), dims(rng, 1, 5)];
        (vec![rand_off_kink(&s, rng)], Box::new(|t, v| t.leaky_relu(v[0], 0.2)), Box::new(|x| leaky_ref(&x[0], 0.2f32 as f64)))
    });
    run("square", 11, |rng| {
        let s = [dims(rng, 1, 5), dims(rng, 1, 5)];
        (vec![rand(&s, rng)], Box::new(|t, v| t.square(v[0])), Box::new(|x| x[0].iter().map(|a| a * a).collect()))
    });
}

pub fn dropout_with_recovered_mask() {
    let mut rng = Rng::new(12);
    for _ in 0..TRIALS {
        let s = [dims(&mut rng, 2, 6), dims(&mut rng, 2, 6)];
        let x = positive(&s, &mut rng);
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone(), true);
        let mut drop_rng = Rng::new(rng.next_u64());
        let y = tape.dropout(xv, 0.25, Mode::Train, &mut drop_rng).unwrap();
        let mask: Vec<f64> = tape.value(y).data().iter().zip(x.data()).map(|(&a, &b)| a as f64 / b as f64).collect();
        for &m in &mask {
            assert!(m.abs() < 1e-6 || (m - 1.0 / 0.75).abs() < 1e-5, "mask value {m}");
        }
        let proj = rand(&s, &mut rng);
        let r = tape.constant(proj.clone());
        let w = tape.mul(y, r).unwrap();
        let loss = tape.sum(w).unwrap();
        let g = tape.gradients(loss, &[xv]).unwrap();
        let r64 = to_f64(&proj);
        let f = |x: &[Vec<f64>]| x[0].iter().zip(&mask).zip(&r64).map(|((a, m), r)| a * m * r).sum::<f64>();
        let fd = fd_grad(&f, &[to_f64(&x)], 0, FD_STEP);
        assert_rel("dropout", g[0].data(), &fd, REL_TOL);
    }
}

pub fn matmul_all_transpose_combinations() {
    for (ta, tb) in [(false, false), (false, true), (true, false), (true, true)] {
        run("matmul", 20 + ta as u64 * 2 + tb as u64, |rng| {
            let (m, k, n) = (dims(rng, 1, 5), dims(rng, 1, 5), dims(rng, 1, 5));
            let a_shape = if ta { (k, m) } else { (m, k) };
            let b_shape = if tb { (n, k) } else { (k, n) };
            (
                vec![rand(&[a_shape.0, a_shape.1], rng), rand(&[b_shape.0, b_shape.1], rng)],
                Box::new(move |t, v| t.matmul_t(v[0], v[1], ta, tb)),
                Box::new(move |x| matmul_ref(&x[0], a_shape, ta, &x[1], b_shape, tb)),
            )
        });
    }
}

pub fn dense_layer() {
    run("dense", 30, |rng| {
        let (b, i, o) = (dims(rng, 1, 4), dims(rng, 1, 5), dims(rng, 1, 4));
        (
            vec![rand(&[b, i], rng), rand(&[i, o], rng), rand(&[o], rng)],
            Box::new(|t, v| t.dense(v[0], v[1], v[2])),
            Box::new(move |x| {
                let mut y = matmul_ref(&x[0], (b, i), false, &x[1], (i, o), false);
                for (j, v) in y.iter_mut().enumerate() {
                    *v += x[2][j % o];
                }
                y
            }),
        )
    });
}

pub fn dense_weight_gradient_on_4x3x2() {
    // gradient of sum(dense(x, W, b)) w.r.t. W on a random 4×3×2 case
    let mut rng = Rng::new(31);
    let x = rand(&[4, 3], &mut rng);
    let w = rand(&[3, 2], &mut rng);
    let b = rand(&[2], &mut rng);
    let mut tape = Tape::new();
    let (xv, wv, bv) = (tape.constant(x.clone()), tape.leaf(w.clone(), true), tape.constant(b.clone()));
    let y = tape.dense(xv, wv, bv).unwrap();
    let s = tape.sum(y).unwrap();
    let g = tape.gradients(s, &[wv]).unwrap();
    let x64 = to_f64(&x);
    let b64 = to_f64(&b);
    let f = |p: &[Vec<f64>]| matmul_ref(&x64, (4, 3), false, &p[0], (3, 2), false).iter().sum::<f64>() + 4.0 * b64.iter().sum::<f64>();
    let fd = fd_grad(&f, &[to_f64(&w)], 0, FD_STEP);
    assert_rel("dense dW", g[0].data(), &fd, REL_TOL);
}

fn conv_case(rng: &mut Rng) -> ([usize; 4], [usize; 4], usize, usize) {
    let k = [1, 3, 5][rng.below(3)];
    let stride = 1 + rng.below(2);
    let pad = rng.below(k / 2 + 1);
    let b = dims(rng, 1, 2);
    let c = dims(rng, 1, 3);
    let o = dims(rng, 1, 3);
    let h = dims(rng, k.max(2), 7);
    let w = dims(rng, k.max(2), 7);
    ([b, c, h, w], [o, c, k, k], stride, pad)
}

pub fn conv2d_gradients() {
    run("conv2d", 40, |rng| {
        let (xs, ks, stride, pad) = conv_case(rng);
        (
            vec![rand(&xs, rng), rand(&ks, rng)],
            Box::new(move |t, v| t.conv2d(v[0], v[1], stride, pad)),
            Box::new(move |x| conv_ref(&x[0], xs, &x[1], ks, stride, pad)),
        )
    });
}

pub fn conv2d_adjoint_ops_gradients() {
    run("conv2d_input_grad", 41, |rng| {
        let (xs, ks, stride, pad) = conv_case(rng);
        let gs = [xs[0], ks[0], conv_out(xs[2], ks[2], stride, pad), conv_out(xs[3], ks[2], stride, pad)];
        (
            vec![rand(&gs, rng), rand(&ks, rng)],
            Box::new(move |t, v| t.conv2d_input_grad(v[0], v[1], stride, pad, (xs[2], xs[3]))),
            Box::new(move |x| conv_input_adjoint_ref(&x[0], &x[1], xs, ks, stride, pad)),
        )
    });
    run("conv2d_weight_grad", 42, |rng| {
        let (xs, ks, stride, pad) = conv_case(rng);
        let gs = [xs[0], ks[0], conv_out(xs[2], ks[2], stride, pad), conv_out(xs[3], ks[2], stride, pad)];
        (
            vec![rand(&xs, rng), rand(&gs, rng)],
            Box::new(move |t, v| t.conv2d_weight_grad(v[0], v[1], stride, pad, ks[2])),
            Box::new(move |x| conv_kernel_adjoint_ref(&x[0], &x[1], xs, ks, stride, pad)),
        )
    });
}

pub fn conv2d_matches_nested_loop_oracle() {
    let mut rng = Rng::new(43);
    // Integer-valued operands keep every partial sum exact in f32, so the
    // comparison is bitwise.
    let xs = [2, 2, 5, 5];
    for (ks, stride, pad) in [([3, 2, 3, 3], 1, 1), ([2, 2, 5, 5], 1, 2), ([3, 2, 3, 3], 2, 0)] {
        let x = Tensor::from_fn(&xs, |_| rng.below(7) as f32 - 3.0);
        let k = Tensor::from_fn(&ks, |_| rng.below(5) as f32 - 2.0);
        let mut tape = Tape::new();
        let (xv, kv) = (tape.constant(x.clone()), tape.constant(k.clone()));
        let y = tape.conv2d(xv, kv, stride, pad).unwrap();
        let want = conv_ref(&to_f64(&x), xs, &to_f64(&k), ks, stride, pad);
        let got: Vec<f64> = tape.value(y).data().iter().map(|&v| v as f64).collect();
        assert_eq!(got, want);
    }
    // Real-valued: agreement to f32 rounding.
    let x = rand(&xs, &mut rng);
    let k = rand(&[2, 2, 5, 5], &mut rng);
    let mut tape = Tape::new();
    let (xv, kv) = (tape.constant(x.clone()), tape.constant(k.clone()));
    let y = tape.conv2d(xv, kv, 1, 2).unwrap();
    let want = conv_ref(&to_f64(&x), xs, &to_f64(&k), [2, 2, 5, 5], 1, 2);
    assert_rel("conv forward", tape.value(y).data(), &want, 1e-5);
}

pub fn resampling_and_shape_ops() {
    run("upsample_nearest2x", 50, |rng| {
        let s = [dims(rng, 1, 2), dims(rng, 1, 3), dims(rng, 1, 4), dims(rng, 1, 4)];
        (vec![rand(&s, rng)], Box::new(|t, v| t.upsample_nearest2x(v[0])), Box::new(move |x| upsample_ref(&x[0], s[0] * s[1], s[2], s[3])))
    });
    run("sumpool2x", 51, |rng| {
        let s = [dims(rng, 1, 2), dims(rng, 1, 3), 2 * dims(rng, 1, 3), 2 * dims(rng, 1, 3)];
        (
            vec![rand(&s, rng)],
            Box::new(|t, v| t.sumpool2x(v[0])),
            Box::new(move |x| {
                let (p, h, w) = (s[0] * s[1], s[2], s[3]);
                let mut out = vec![0.0; p * h * w / 4];
                for pi in 0..p {
                    for y in 0..h {
                        for xx in 0..w {
                            out[(pi * h / 2 + y / 2) * w / 2 + xx / 2] += x[0][(pi * h + y) * w + xx];
                        }
                    }
                }
                out
            }),
        )
    });
    run("reshape", 52, |rng| {
        let (a, b, c) = (dims(rng, 1, 3), dims(rng, 1, 3), dims(rng, 1, 3));
        (vec![rand(&[a, b, c], rng)], Box::new(move |t, v| t.reshape(v[0], &[a * b, c])), Box::new(|x| x[0].clone()))
    });
    run("concat_cols", 53, |rng| {
        let (r, a, b) = (dims(rng, 1, 3), dims(rng, 1, 4), dims(rng, 1, 4));
        (
            vec![rand(&[r, a], rng), rand(&[r, b], rng)],
            Box::new(|t, v| t.concat_cols(v[0], v[1])),
            Box::new(move |x| (0..r).flat_map(|i| x[0][i * a..(i + 1) * a].iter().chain(&x[1][i * b..(i + 1) * b]).cloned().collect::<Vec<_>>()).collect()),
        )
    });
    run("slice_cols", 54, |rng| {
        let (r, c) = (dims(rng, 1, 3), dims(rng, 2, 6));
        let start = rng.below(c - 1);
        let len = 1 + rng.below(c - start);
        (
            vec![rand(&[r, c], rng)],
            Box::new(move |t, v| t.slice_cols(v[0], start, len)),
            Box::new(move |x| (0..r).flat_map(|i| x[0][i * c + start..i * c + start + len].to_vec()).collect()),
        )
    });
    run("pad_cols", 55, |rng| {
        let (r, c) = (dims(rng, 1, 3), dims(rng, 1, 4));
        let start = rng.below(3);
        let total = start + c + rng.below(3);
        (
            vec![rand(&[r, c], rng)],
            Box::new(move |t, v| t.pad_cols(v[0], start, total)),
            Box::new(move |x| {
                let mut out = vec![0.0; r * total];
                for i in 0..r {
                    out[i * total + start..i * total + start + c].copy_from_slice(&x[0][i * c..(i + 1) * c]);
                }
                out
            }),
        )
    });
}

pub fn gather_scatter() {
    run("gather_rows", 60, |rng| {
        let (n, d, b) = (dims(rng, 2, 5), dims(rng, 1, 4), dims(rng, 1, 6));
        let idx: Vec<usize> = (0..b).map(|_| rng.below(n)).collect();
        let i2 = idx.clone();
        (
            vec![rand(&[n, d], rng)],
            Box::new(move |t, v| t.gather_rows(v[0], &idx)),
            Box::new(move |x| i2.iter().flat_map(|&i| x[0][i * d..(i + 1) * d].to_vec()).collect()),
        )
    });
    run("scatter_rows", 61, |rng| {
        let (n, d, b) = (dims(rng, 2, 5), dims(rng, 1, 4), dims(rng, 1, 6));
        let idx: Vec<usize> = (0..b).map(|_| rng.below(n)).collect();
        let i2 = idx.clone();
        (
            vec![rand(&[b, d], rng)],
            Box::new(move |t, v| t.scatter_rows(v[0], &idx, n)),
            Box::new(move |x| {
                let mut out = vec![0.0; n * d];
                for (r, &i) in i2.iter().enumerate() {
                    for c in 0..d {
                        out[i * d + c] += x[0][r * d + c];
                    }
                }
                out
            }),
        )
    });
}

pub fn reductions_and_broadcasts() {
    run("sum", 70, |rng| {
        let s = [dims(rng, 1, 4), dims(rng, 1, 4)];
        (vec![rand(&s, rng)], Box::new(|t, v| t.sum(v[0])), Box::new(|x| vec![x[0].iter().sum()]))
    });
    run("mean", 71, |rng| {
        let s = [dims(rng, 1, 4), dims(rng, 1, 4)];
        (vec![rand(&s, rng)], Box::new(|t, v| t.mean(v[0])), Box::new(|x| vec![x[0].iter().sum::<f64>() / x[0].len() as f64]))
    });
    run("expand", 72, |rng| {
        let s = [dims(rng, 1, 4), dims(rng, 1, 4)];
        (vec![rand(&[1], rng)], Box::new(move |t, v| t.expand(v[0], &s)), Box::new(move |x| vec![x[0][0]; s[0] * s[1]]))
    });
    run("sum_per_sample", 73, |rng| {
        let s = [dims(rng, 1, 4), dims(rng, 1, 3), dims(rng, 1, 3)];
        let per = s[1] * s[2];
        (vec![rand(&s, rng)], Box::new(|t, v| t.sum_per_sample(v[0])), Box::new(move |x| x[0].chunks(per).map(|c| c.iter().sum()).collect()))
    });
    run("expand_per_sample", 74, |rng| {
        let s = [dims(rng, 1, 4), dims(rng, 1, 3), dims(rng, 1, 3)];
        let per = s[1] * s[2];
        (vec![rand(&[s[0]], rng)], Box::new(move |t, v| t.expand_per_sample(v[0], &s)), Box::new(move |x| x[0].iter().flat_map(|&v| vec![v; per]).collect()))
    });
    run("sum_rows", 75, |rng| {
        let (r, c) = (dims(rng, 1, 4), dims(rng, 1, 4));
        (
            vec![rand(&[r, c], rng)],
            Box::new(|t, v| t.sum_rows(v[0])),
            Box::new(move |x| (0..c).map(|j| (0..r).map(|i| x[0][i * c + j]).sum()).collect()),
        )
    });
    run("broadcast_rows", 76, |rng| {
        let (r, c) = (dims(rng, 1, 4), dims(rng, 1, 4));
        (vec![rand(&[c], rng)], Box::new(move |t, v| t.broadcast_rows(v[0], r)), Box::new(move |x| (0..r).flat_map(|_| x[0].clone()).collect()))
    });
    run("sum_channels", 77, |rng| {
        let s = [dims(rng, 1, 3), dims(rng, 1, 3), dims(rng, 1, 3), dims(rng, 1, 3)];
        let plane = s[2] * s[3];
        (
            vec![rand(&s, rng)],
            Box::new(|t, v| t.sum_channels(v[0])),
            Box::new(move |x| {
                let mut out = vec![0.0; s[1]];
                for (i, v) in x[0].iter().enumerate() {
                    out[(i / plane) % s[1]] += v;
                }
                out
            }),
        )
    });
    run("broadcast_channels", 78, |rng| {
        let s = [dims(rng, 1, 3), dims(rng, 1, 3), dims(rng, 1, 3), dims(rng, 1, 3)];
        let plane = s[2] * s[3];
        let like = Tensor::zeros(&s);
        (
            vec![rand(&[s[1]], rng)],
            Box::new(move |t, v| {
                let l = t.constant(like.clone());
                t.broadcast_channels(v[0], l)
            }),
            Box::new(move |x| (0..s.iter().product::<usize>()).map(|i| x[0][(i / plane) % s[1]]).collect()),
        )
    });
    run("l2_norm_per_sample", 79, |rng| {
        let s = [dims(rng, 1, 4), dims(rng, 1, 3), dims(rng, 1, 3)];
        let per = s[1] * s[2];
        (
            vec![rand(&s, rng)],
            Box::new(|t, v| t.l2_norm_per_sample(v[0])),
            Box::new(move |x| x[0].chunks(per).map(|c| (c.iter().map(|v| v * v).sum::<f64>() + 1e-12).sqrt()).collect()),
        )
    });
}

pub fn classification_ops() {
    run("log_softmax", 80, |rng| {
        let (r, k) = (dims(rng, 1, 4), dims(rng, 2, 6));
        (vec![Tensor::uniform(&[r, k], -3.0, 3.0, rng)], Box::new(|t, v| t.log_softmax(v[0])), Box::new(move |x| log_softmax_ref(&x[0], k)))
    });
    run("pick", 81, |rng| {
        let (r, k) = (dims(rng, 1, 5), dims(rng, 2, 5));
        let labels: Vec<usize> = (0..r).map(|_| rng.below(k)).collect();
        let l2 = labels.clone();
        (
            vec![rand(&[r, k], rng)],
            Box::new(move |t, v| t.pick(v[0], &labels)),
            Box::new(move |x| l2.iter().enumerate().map(|(i, &l)| x[0][i * k + l]).collect()),
        )
    });
    run("unpick", 82, |rng| {
        let (r, k) = (dims(rng, 1, 5), dims(rng, 2, 5));
        let labels: Vec<usize> = (0..r).map(|_| rng.below(k)).collect();
        let l2 = labels.clone();
        (
            vec![rand(&[r], rng)],
            Box::new(move |t, v| t.unpick(v[0], &labels, k)),
            Box::new(move |x| {
                let mut out = vec![0.0; r * k];
                for (i, &l) in l2.iter().enumerate() {
                    out[i * k + l] = x[0][i];
                }
                out
            }),
        )
    });
    run("sparse_cross_entropy", 83, |rng| {
        let (r, k) = (dims(rng, 1, 5), dims(rng, 2, 6));
        let labels: Vec<usize> = (0..r).map(|_| rng.below(k)).collect();
        let l2 = labels.clone();
        (
            vec![Tensor::uniform(&[r, k], -3.0, 3.0, rng)],
            Box::new(move |t, v| t.sparse_cross_entropy(v[0], &labels)),
            Box::new(move |x| {
                let ls = log_softmax_ref(&x[0], k);
                vec![-l2.iter().enumerate().map(|(i, &l)| ls[i * k + l]).sum::<f64>() / r as f64]
            }),
        )
    });
}

pub fn cross_entropy_matches_high_precision_oracle() {
    let mut rng = Rng::new(84);
    let logits = Tensor::uniform(&[4, 5], -4.0, 4.0, &mut rng);
    let labels = [0usize, 3, 4, 1];
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let ce = tape.sparse_cross_entropy(l, &labels).unwrap();
    let x = to_f64(&logits);
    let mut want = 0.0;
    for (row, &lab) in labels.iter().enumerate() {
        let z = &x[row * 5..row * 5 + 5];
        let denom: f64 = z.iter().map(|v| v.exp()).sum();
        want -= (z[lab].exp() / denom).ln();
    }
    want /= 4.0;
    assert!((tape.value(ce).item() as f64 - want).abs() < 1e-6, "{} vs {want}", tape.value(ce).item());
}

/// Nested finite differences (inner: input gradient, outer: parameters) on
/// an f64 reference critic versus the tape's double-backward gradient.
pub fn double_backward_penalty_matches_nested_finite_differences() {
    let mut rng = Rng::new(90);
    for (trial, (k1, k2, s1, s2, pad)) in [(3usize, 3usize, 1usize, 1usize, 1usize), (3, 3, 2, 1, 1), (1, 3, 1, 2, 1), (3, 1, 1, 1, 0), (3, 3, 1, 2, 1)]
        .into_iter()
        .enumerate()
    {
        let critic = TinyCritic {
            xs: [2, 1, 4, 4],
            k1s: [2, 1, k1, k1],
            k2s: [2, 2, k2, k2],
            stride1: s1,
            stride2: s2,
            pad,
            slope: 0.2f32 as f64,
        };
        let (x, params) = loop {
            let x = rand(&critic.xs, &mut rng);
            let h2 = critic.h2_shape();
            let params = vec![
                rand(&critic.k1s, &mut rng),
                rand(&[critic.k1s[0]], &mut rng),
                rand(&critic.k2s, &mut rng),
                rand(&[critic.k2s[0]], &mut rng),
                rand(&[h2[1] * h2[2] * h2[3]], &mut rng),
            ];
            let p64: Vec<Vec<f64>> = params.iter().map(to_f64).collect();
            if critic.scores(&to_f64(&x), &p64).1 > 5e-2 {
                break (x, params);
            }
        };
        let got = tape_penalty_grads(&critic, &x, &params);
        let x64 = to_f64(&x);
        let p64: Vec<Vec<f64>> = params.iter().map(to_f64).collect();
        let f = |p: &[Vec<f64>]| critic.penalty_fd(&x64, p, FD_STEP);
        let fds: Vec<Vec<f64>> = (0..p64.len()).map(|i| fd_grad(&f, &p64, i, FD_STEP)).collect();
        // Biases do not move a piecewise-linear input gradient, so their exact
        // penalty gradient is zero; judge every block against the overall scale.
        let scale = fds.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
        for (i, (g, fd)) in got.iter().zip(&fds).enumerate() {
            for (&a, &b) in g.data().iter().zip(fd) {
                let allowed = REL_TOL * b.abs().max(0.1 * scale);
                assert!((a as f64 - b).abs() <= allowed, "penalty grad trial {trial} param {i}: {a} vs {b}");
            }
        }
    }
}

fn tape_penalty_grads(critic: &TinyCritic, x: &Tensor, params: &[Tensor]) -> Vec<Tensor> {
    let mut tape = Tape::new();
    let p: Vec<Var> = params.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let xv = tape.leaf(x.clone(), true);
    let a1 = tape.conv2d_bias(xv, p[0], p[1], critic.stride1, critic.pad).unwrap();
    let h1 = tape.leaky_relu(a1, 0.2).unwrap();
    let a2 = tape.conv2d_bias(h1, p[2], p[3], critic.stride2, critic.pad).unwrap();
    let h2 = tape.leaky_relu(a2, 0.2).unwrap();
    let flat = tape.flatten(h2).unwrap();
    let n = tape.shape(flat)[1];
    let v = tape.reshape(p[4], &[n, 1]).unwrap();
    let scores = tape.matmul(flat, v).unwrap();
    let total = tape.sum(scores).unwrap();
    let gx = tape.grad(total, &[xv], true).unwrap()[0];
    let norms = tape.l2_norm_per_sample(gx).unwrap();
    let d = tape.add_scalar(norms, -1.0).unwrap();
    let sq = tape.square(d).unwrap();
    let penalty = tape.mean(sq).unwrap();
    tape.gradients(penalty, &p).unwrap()
}

/// Gradient of a function of first-order gradients through dense, upsample
/// and leaky ReLU layers.
pub fn double_backward_dense_upsample_composition() {
    let mut rng = Rng::new(91);
    for trial in 0..TRIALS {
        let (b, i) = (2usize, 3usize);
        let x = rand(&[b, i], &mut rng);
        let w = rand(&[i, 4], &mut rng);
        let k = rand(&[1, 1, 3, 3], &mut rng);
        let proj = rand(&[b * 16], &mut rng);
        // f(x; w, k) = Σ proj ⊙ leaky(conv(upsample(reshape(x·w, [b,1,2,2])), k))
        let forward = |x: &[f64], w: &[f64], k: &[f64]| -> (Vec<f64>, f64) {
            let xw = matmul_ref(x, (b, i), false, w, (i, 4), false);
            let up = upsample_ref(&xw, b, 2, 2);
            let a = conv_ref(&up, [b, 1, 4, 4], k, [1, 1, 3, 3], 1, 1);
            let margin = a.iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
            let h = leaky_ref(&a, 0.2f32 as f64);
            let p64 = to_f64(&proj);
            let per = h.len() / b;
            (h.chunks(per).enumerate().map(|(s, c)| c.iter().zip(&p64[s * per..]).map(|(a, r)| a * r).sum()).collect(), margin)
        };
        if forward(&to_f64(&x), &to_f64(&w), &to_f64(&k)).1 < 2e-2 {
            continue;
        }
        // outer objective: Σ ‖∇_x f‖² over samples
        let objective = |p: &[Vec<f64>]| -> f64 {
            let gx = fd_grad(&|xx: &[Vec<f64>]| forward(&xx[0], &p[0], &p[1]).0.iter().sum::<f64>(), &[to_f64(&x)], 0, FD_STEP);
            gx.iter().map(|g| g * g).sum()
        };
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone(), true);
        let wv = tape.leaf(w.clone(), true);
        let kv = tape.leaf(k.clone(), true);
        let y = tape.matmul(xv, wv).unwrap();
        let y = tape.reshape(y, &[b, 1, 2, 2]).unwrap();
        let y = tape.upsample_nearest2x(y).unwrap();
        let y = tape.conv2d(y, kv, 1, 1).unwrap();
        let y = tape.leaky_relu(y, 0.2).unwrap();
        let y = tape.flatten(y).unwrap();
        let r = tape.constant(proj.clone().reshape(&[b, 16]).unwrap());
        let y = tape.mul(y, r).unwrap();
        let s = tape.sum(y).unwrap();
        let gx = tape.grad(s, &[xv], true).unwrap()[0];
        let sq = tape.square(gx).unwrap();
        let obj = tape.sum(sq).unwrap();
        let grads = tape.gradients(obj, &[wv, kv]).unwrap();
        let p64 = vec![to_f64(&w), to_f64(&k)];
        for (j, g) in grads.iter().enumerate() {
            let fd = fd_grad(&objective, &p64, j, FD_STEP);
            assert_rel(&format!("composition trial {trial} param {j}"), g.data(), &fd, REL_TOL);
        }
    }
}

pub fn operations_are_bit_deterministic() {
    let run_once = || {
        let mut rng = Rng::new(99);
        let x = rand(&[2, 3, 8, 8], &mut rng);
        let k = rand(&[4, 3, 5, 5], &mut rng);
        let mut tape = Tape::new();
        let (xv, kv) = (tape.leaf(x, true), tape.leaf(k, true));
        let y = tape.conv2d(xv, kv, 2, 2).unwrap();
        let y = tape.leaky_relu(y, 0.2).unwrap();
        let y = tape.dropout(y, 0.25, Mode::Train, &mut rng).unwrap();
        let s = tape.sum(y).unwrap();
        let g = tape.grad(s, &[xv], true).unwrap()[0];
        let n = tape.l2_norm_per_sample(g).unwrap();
        let m = tape.mean(n).unwrap();
        let grads = tape.gradients(m, &[kv]).unwrap();
        (tape.value(y).clone(), grads)
    };
    assert_eq!(run_once(), run_once());
}

#[allow(dead_code)]
pub const ALL: &[(&str, fn())] = &[
    ("elementwise_binary", elementwise_binary),
    ("elementwise_unary", elementwise_unary),
    ("dropout_with_recovered_mask", dropout_with_recovered_mask),
    ("matmul_all_transpose_combinations", matmul_all_transpose_combinations),
    ("dense_layer", dense_layer),
    ("dense_weight_gradient_on_4x3x2", dense_weight_gradient_on_4x3x2),
    ("conv2d_gradients", conv2d_gradients),
    ("conv2d_adjoint_ops_gradients", conv2d_adjoint_ops_gradients),
    ("conv2d_matches_nested_loop_oracle", conv2d_matches_nested_loop_oracle),
    ("resampling_and_shape_ops", resampling_and_shape_ops),
    ("gather_scatter", gather_scatter),
    ("reductions_and_broadcasts", reductions_and_broadcasts),
    ("classification_ops", classification_ops),
    ("cross_entropy_matches_high_precision_oracle", cross_entropy_matches_high_precision_oracle),
    ("double_backward_penalty_matches_nested_finite_differences", double_backward_penalty_matches_nested_finite_differences),
    ("double_backward_dense_upsample_composition", double_backward_dense_upsample_composition),
    ("operations_are_bit_deterministic", operations_are_bit_deterministic),
];
