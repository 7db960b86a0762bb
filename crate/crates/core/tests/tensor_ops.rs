use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use specrecon::gradcheck::check_gradients;
use specrecon::tensor::{BatchNormStats, NormMode, Tape, Tensor, Var};
use specrecon::{Error, Result};

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Values with magnitude in [0.1, 1], away from relu/abs kinks.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.1..1.0);
        if rng.random::<bool>() {
            m
        } else {
            -m
        }
    })
}

/// Projects `out` onto a fixed random direction so every output element
/// contributes a distinct weight to the scalar loss.
fn project(tape: &Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = tape.constant(random(&tape.shape(out), &mut rng));
    Ok(tape.sum(tape.mul(out, r)?))
}

fn direct_conv2d(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    b: &[f64],
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let (n, c_in, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (c_out, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = Vec::new();
    for ni in 0..n {
        for co in 0..c_out {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b[co];
                    for ci in 0..c_in {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x.at(&[ni, ci, iy as usize, ix as usize])
                                    * w.at(&[co, ci, ky, kx]);
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    out
}

proptest! {
    #[test]
    fn conv2d_matches_direct_loop(
        seed in any::<u64>(),
        n in 1usize..3, c_in in 1usize..4, c_out in 1usize..4,
        k in prop::sample::select(vec![1usize, 3]),
        stride in 1usize..3, pad in 0usize..2,
        h in 3usize..9, w in 3usize..9,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[n, c_in, h, w], &mut rng);
        let wt = random(&[c_out, c_in, k, k], &mut rng);
        let bias = random(&[c_out], &mut rng);
        let tape = Tape::new();
        let (xv, wv, bv) = (tape.constant(x.clone()), tape.constant(wt.clone()), tape.constant(bias.clone()));
        match tape.conv2d(xv, wv, Some(bv), stride, pad) {
            Ok(y) => {
                let got = tape.value(y).to_vec();
                let want = direct_conv2d(&x, &wt, &bias.to_vec(), stride, pad);
                prop_assert_eq!(got.len(), want.len());
                for (a, b) in got.iter().zip(&want) {
                    prop_assert!((a - b).abs() < 1e-9);
                }
            }
            Err(Error::Config(_)) => prop_assert!((h + 2 * pad - k) % stride != 0 || (w + 2 * pad - k) % stride != 0),
            Err(e) => prop_assert!(false, "unexpected error {e}"),
        }
    }

    #[test]
    fn bilinear_resize_matches_formula(
        seed in any::<u64>(), h in 1usize..6, w in 1usize..6, oh in 1usize..9, ow in 1usize..9,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[1, 2, h, w], &mut rng);
        let tape = Tape::new();
        let y = tape.bilinear_resize(tape.constant(x.clone()), oh, ow).unwrap();
        let y = tape.value(y);
        let coord = |o: usize, out: usize, inp: usize| if out > 1 { o as f64 * (inp - 1) as f64 / (out - 1) as f64 } else { 0.0 };
        for c in 0..2 {
            for oy in 0..oh {
                for ox in 0..ow {
                    let (sy, sx) = (coord(oy, oh, h), coord(ox, ow, w));
                    let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
                    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
                    let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
                    let v = |yy, xx| x.at(&[0, c, yy, xx]);
                    let want = (1.0 - fy) * ((1.0 - fx) * v(y0, x0) + fx * v(y0, x1))
                        + fy * ((1.0 - fx) * v(y1, x0) + fx * v(y1, x1));
                    prop_assert!((y.at(&[0, c, oy, ox]) - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn resize_to_same_shape_is_identity(seed in any::<u64>(), h in 1usize..7, w in 1usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[2, 3, h, w], &mut rng);
        let tape = Tape::new();
        let y = tape.bilinear_resize(tape.constant(x.clone()), h, w).unwrap();
        prop_assert!(tape.value(y).values_eq(&x));
    }

    #[test]
    fn concat_then_slice_round_trips(seed in any::<u64>(), axis in 0usize..4, a in 1usize..4, b in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut sa = vec![2, 3, 2, 2];
        let mut sb = sa.clone();
        sa[axis] = a;
        sb[axis] = b;
        let (x, y) = (random(&sa, &mut rng), random(&sb, &mut rng));
        let tape = Tape::new();
        let cat = tape.concat(&[tape.constant(x.clone()), tape.constant(y.clone())], axis).unwrap();
        prop_assert!(tape.value(tape.slice(cat, axis, 0, a).unwrap()).values_eq(&x));
        prop_assert!(tape.value(tape.slice(cat, axis, a, b).unwrap()).values_eq(&y));
    }

    #[test]
    fn permute_round_trips(seed in any::<u64>(), perm in Just(vec![0usize, 1, 2, 3]).prop_shuffle()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[2, 3, 4, 5], &mut rng);
        let mut inverse = vec![0; 4];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        let back = x.permute(&perm).unwrap().permute(&inverse).unwrap();
        prop_assert!(back.values_eq(&x));
        prop_assert_eq!(back.contiguous().to_vec(), x.to_vec());
    }

    #[test]
    fn conv1d_matches_direct_loop(seed in any::<u64>(), n in 1usize..3, len in 1usize..12, k in prop::sample::select(vec![1usize, 3, 5])) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[n, 1, len], &mut rng);
        let w = random(&[1, 1, k], &mut rng);
        let tape = Tape::new();
        let y = tape.conv1d(tape.constant(x.clone()), tape.constant(w.clone()), (k - 1) / 2).unwrap();
        let y = tape.value(y);
        let half = (k - 1) / 2;
        for ni in 0..n {
            for i in 0..len {
                let mut acc = 0.0;
                for j in 0..k {
                    let src = i as isize + j as isize - half as isize;
                    if src >= 0 && (src as usize) < len {
                        acc += x.at(&[ni, 0, src as usize]) * w.at(&[0, 0, j]);
                    }
                }
                prop_assert!((y.at(&[ni, 0, i]) - acc).abs() < 1e-12);
            }
        }
    }
}

const STEP: f64 = 1e-5;
const OP_TOL: f64 = 1e-4;

fn assert_grad(name: &str, inputs: &[Tensor<f64>], f: impl Fn(&Tape<f64>, &[Var]) -> Result<Var>) {
    let report = check_gradients(inputs, STEP, f).unwrap();
    assert!(report.checked > 0, "{name}: nothing checked");
    assert!(
        report.max_rel_error < OP_TOL,
        "{name}: max relative error {} at {:?}",
        report.max_rel_error,
        report.worst
    );
}

#[test]
fn elementwise_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = away_from_zero(&[2, 3, 4], &mut rng);
    let y = random(&[2, 3, 4], &mut rng);
    let pos = Tensor::from_fn(&[2, 3, 4], |_| rng.random_range(0.2..2.0));
    assert_grad("relu", &[x.clone()], |t, v| project(t, t.relu(v[0]), 1));
    assert_grad("sigmoid", &[y.clone()], |t, v| project(t, t.sigmoid(v[0]), 2));
    assert_grad("abs", &[x.clone()], |t, v| project(t, t.abs(v[0]), 3));
    assert_grad("log10", &[pos], |t, v| project(t, t.log10(v[0]), 4));
    assert_grad("scale", &[y.clone()], |t, v| project(t, t.scale(v[0], -2.5), 5));
    assert_grad("add_scalar", &[y.clone()], |t, v| project(t, t.add_scalar(v[0], 0.3), 6));
    assert_grad("add", &[x.clone(), y.clone()], |t, v| project(t, t.add(v[0], v[1])?, 7));
    assert_grad("sub", &[x.clone(), y.clone()], |t, v| project(t, t.sub(v[0], v[1])?, 8));
    assert_grad("mul", &[x, y.clone()], |t, v| project(t, t.mul(v[0], v[1])?, 9));
    assert_grad("sum", &[y], |t, v| Ok(t.sum(v[0])));
}

#[test]
fn structural_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random(&[2, 3, 4, 5], &mut rng);
    let y = random(&[2, 2, 4, 5], &mut rng);
    assert_grad("permute", &[x.clone()], |t, v| project(t, t.permute(v[0], &[0, 3, 1, 2])?, 1));
    assert_grad("reshape", &[x.clone()], |t, v| project(t, t.reshape(v[0], &[6, 20])?, 2));
    assert_grad("concat", &[x.clone(), y], |t, v| project(t, t.concat(&[v[0], v[1]], 1)?, 3));
    assert_grad("slice", &[x.clone()], |t, v| project(t, t.slice(v[0], 3, 1, 3)?, 4));
    assert_grad("global_avg_pool", &[x.clone()], |t, v| project(t, t.global_avg_pool(v[0])?, 5));
    let gate = random(&[2, 3, 1, 1], &mut rng);
    assert_grad("channel_scale", &[x.clone(), gate], |t, v| {
        project(t, t.channel_scale(v[0], v[1])?, 6)
    });
    assert_grad("bilinear_resize up", &[x.clone()], |t, v| project(t, t.bilinear_resize(v[0], 7, 9)?, 7));
    assert_grad("bilinear_resize down", &[x.clone()], |t, v| project(t, t.bilinear_resize(v[0], 3, 2)?, 8));
    let even = random(&[1, 2, 4, 6], &mut rng);
    assert_grad("subsample2d", &[even], |t, v| project(t, t.subsample2d(v[0], 2)?, 9));
}

#[test]
fn convolution_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for (stride, pad, h) in [(1, 1, 5), (1, 0, 5), (2, 1, 5), (2, 0, 7)] {
        let x = random(&[2, 2, h, h], &mut rng);
        let w = random(&[3, 2, 3, 3], &mut rng);
        let b = random(&[3], &mut rng);
        assert_grad(&format!("conv2d s{stride} p{pad}"), &[x, w, b], |t, v| {
            project(t, t.conv2d(v[0], v[1], Some(v[2]), stride, pad)?, 10)
        });
    }
    let x = random(&[2, 1, 7], &mut rng);
    let w = random(&[1, 1, 3], &mut rng);
    assert_grad("conv1d", &[x, w], |t, v| project(t, t.conv1d(v[0], v[1], 1)?, 11));
}

#[test]
fn batchnorm_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random(&[2, 3, 3, 3], &mut rng);
    let gamma = Tensor::from_fn(&[3], |_| rng.random_range(0.5..1.5));
    let beta = random(&[3], &mut rng);
    for mode in [NormMode::Train, NormMode::Eval] {
        assert_grad(&format!("batchnorm {mode:?}"), &[x.clone(), gamma.clone(), beta.clone()], |t, v| {
            let mut stats = BatchNormStats {
                mean: vec![0.1, -0.2, 0.05],
                var: vec![0.8, 1.2, 0.5],
            };
            project(t, t.batchnorm2d(v[0], v[1], v[2], &mut stats, mode, 0.1, 1e-5)?, 12)
        });
    }
}

#[test]
fn eval_batchnorm_uses_running_stats() {
    let tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::full(&[1, 1, 2, 2], 3.0));
    let g = tape.constant(Tensor::ones(&[1]));
    let b = tape.constant(Tensor::zeros(&[1]));
    let mut stats = BatchNormStats {
        mean: vec![1.0],
        var: vec![4.0],
    };
    let y = tape.batchnorm2d(x, g, b, &mut stats, NormMode::Eval, 0.1, 1e-12).unwrap();
    assert!(tape.value(y).to_vec().iter().all(|&v| (v - 1.0).abs() < 1e-10));
    assert_eq!(stats.mean, vec![1.0]);
}
