use latentcf_autodiff::{grad_check, Activation, AutodiffError, Reduction, Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn naive_matmul(x: &Tensor, w: &Tensor, b: &Tensor) -> Vec<f64> {
    let (n, k, m) = (x.shape()[0], x.shape()[1], w.shape()[1]);
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            let mut acc = b.data()[j];
            for l in 0..k {
                acc += x.data()[i * k + l] * w.data()[l * m + j];
            }
            out[i * m + j] = acc;
        }
    }
    out
}

/// Direct sliding-window cross-correlation over a zero-padded copy.
fn naive_conv(x: &Tensor, k: &Tensor, b: &Tensor, stride: usize, pad: usize) -> (Vec<usize>, Vec<f64>) {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    let mut padded = vec![0.0; n * c * ph * pw];
    for ni in 0..n {
        for ci in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    padded[((ni * c + ci) * ph + y + pad) * pw + xx + pad] = x.data()[((ni * c + ci) * h + y) * w + xx];
                }
            }
        }
    }
    let (oh, ow) = ((ph - kh) / stride + 1, (pw - kw) / stride + 1);
    let mut out = Vec::new();
    for ni in 0..n {
        for oi in 0..o {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = b.data()[oi];
                    for ci in 0..c {
                        for dy in 0..kh {
                            for dx in 0..kw {
                                acc += padded[((ni * c + ci) * ph + y * stride + dy) * pw + xx * stride + dx]
                                    * k.data()[((oi * c + ci) * kh + dy) * kw + dx];
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    (vec![n, o, oh, ow], out)
}

#[test]
fn linear_examples() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::matrix(&[&[1.0, 0.0]]).unwrap());
    let w = tape.constant(Tensor::identity(2));
    let b = tape.constant(Tensor::vector(&[0.0, 0.0]));
    assert_eq!(tape.value(tape.linear(x, w, b).unwrap()).data(), &[1.0, 0.0]);

    let x = tape.constant(Tensor::matrix(&[&[1.0, 2.0]]).unwrap());
    let w = tape.constant(Tensor::matrix(&[&[1.0], &[1.0]]).unwrap());
    let b = tape.constant(Tensor::vector(&[3.0]));
    assert_eq!(tape.value(tape.linear(x, w, b).unwrap()).data(), &[6.0]);

    let bad = tape.constant(Tensor::matrix(&[&[1.0, 2.0, 3.0]]).unwrap());
    assert!(matches!(tape.linear(bad, w, b), Err(AutodiffError::Shape { .. })));
}

#[test]
fn linear_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (x, w, b) = (random(&mut rng, &[4, 8], -2.0, 2.0), random(&mut rng, &[8, 3], -2.0, 2.0), random(&mut rng, &[3], -2.0, 2.0));
    let tape = Tape::new();
    let y = tape.linear(tape.constant(x.clone()), tape.constant(w.clone()), tape.constant(b.clone())).unwrap();
    for (a, e) in tape.value(y).data().iter().zip(naive_matmul(&x, &w, &b)) {
        assert!((a - e).abs() < 1e-12);
    }
}

#[test]
fn conv_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random(&mut rng, &[1, 1, 5, 5], -2.0, 2.0);
    let tape = Tape::new();
    let xv = tape.constant(x.clone());
    let one = tape.constant(Tensor::full(&[1, 1, 1, 1], 1.0));
    let zero_b = tape.constant(Tensor::vector(&[0.0]));
    assert_eq!(*tape.value(tape.conv2d(xv, one, zero_b, 1, 0).unwrap()), x);

    let zk = tape.constant(Tensor::zeros(&[1, 1, 3, 3]));
    let cb = tape.constant(Tensor::vector(&[2.5]));
    let y = tape.value(tape.conv2d(xv, zk, cb, 1, 1).unwrap());
    assert!(y.data().iter().all(|&v| v == 2.5));
    assert_eq!(y.shape(), &[1, 1, 5, 5]);

    assert!(matches!(tape.conv2d(xv, zk, cb, 0, 1), Err(AutodiffError::Parameter { .. })));
}

#[test]
fn conv_matches_sliding_window() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for (stride, pad) in [(1, 0), (1, 1), (2, 1), (2, 0)] {
        let x = random(&mut rng, &[2, 3, 5, 5], -2.0, 2.0);
        let k = random(&mut rng, &[4, 3, 3, 3], -2.0, 2.0);
        let b = random(&mut rng, &[4], -2.0, 2.0);
        let tape = Tape::new();
        let y = tape
            .conv2d(tape.constant(x.clone()), tape.constant(k.clone()), tape.constant(b.clone()), stride, pad)
            .unwrap();
        let (shape, expect) = naive_conv(&x, &k, &b, stride, pad);
        let got = tape.value(y);
        assert_eq!(got.shape(), &shape[..]);
        for (a, e) in got.data().iter().zip(expect) {
            assert!((a - e).abs() < 1e-12);
        }
    }
}

#[test]
fn activation_and_softmax_examples() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::vector(&[-1.0, 2.0]));
    assert_eq!(tape.value(tape.relu(x).unwrap()).data(), &[0.0, 2.0]);
    let z = tape.constant(Tensor::vector(&[0.0, 0.0]));
    assert_eq!(tape.value(tape.softmax(z, 0).unwrap()).data(), &[0.5, 0.5]);
    assert!(tape.softmax(z, 1).is_err());
}

#[test]
fn loss_examples() {
    let tape = Tape::new();
    let a = tape.constant(Tensor::vector(&[0.3, -1.2, 4.0]));
    assert_eq!(tape.value(tape.mse(a, a, Reduction::Mean).unwrap()).item(), 0.0);

    let zeros = tape.constant(Tensor::zeros(&[1, 4]));
    assert_eq!(tape.value(tape.gaussian_kl(zeros, zeros, Reduction::BatchMean).unwrap()).item(), 0.0);
    let ones = tape.constant(Tensor::full(&[1, 1], 1.0));
    let lv = tape.constant(Tensor::zeros(&[1, 1]));
    assert!((tape.value(tape.gaussian_kl(ones, lv, Reduction::BatchMean).unwrap()).item() - 0.5).abs() < 1e-15);
}

#[test]
fn backward_examples() {
    let tape = Tape::new();
    let x = tape.param(Tensor::vector(&[1.0, -2.0, 0.5]));
    let s = tape.sum(x).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.wrt(x).unwrap().data(), &[1.0, 1.0, 1.0]);

    let tape = Tape::new();
    let x = tape.param(Tensor::scalar(3.0));
    let sq = tape.mul(x, x).unwrap();
    assert_eq!(tape.backward(sq).unwrap().wrt(x).unwrap().item(), 6.0);

    assert!(matches!(tape.backward(x), Ok(_)));
    let v = tape.param(Tensor::vector(&[1.0, 2.0]));
    assert!(matches!(tape.backward(v), Err(AutodiffError::Contract(_))));
}

#[test]
fn grad_check_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random(&mut rng, &[3, 4], -2.0, 2.0);
    let r = grad_check(|t, v| t.sum(v), &x, 1e-4).unwrap();
    assert!(r.max_rel_error < 1e-8, "{}", r.max_rel_error);

    let target = random(&mut rng, &[3, 4], -2.0, 2.0);
    let r = grad_check(
        |t, v| {
            let c = t.constant(target.clone());
            t.mse(v, c, Reduction::Mean)
        },
        &x,
        1e-4,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-6, "{}", r.max_rel_error);

    let logvar = random(&mut rng, &[3, 4], -2.0, 2.0);
    let r = grad_check(
        |t, v| {
            let lv = t.constant(logvar.clone());
            t.gaussian_kl(v, lv, Reduction::BatchMean)
        },
        &x,
        1e-4,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-6, "{}", r.max_rel_error);
    let r = grad_check(
        |t, v| {
            let mu = t.constant(logvar.clone());
            t.gaussian_kl(mu, v, Reduction::BatchMean)
        },
        &x,
        1e-4,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-6, "{}", r.max_rel_error);
}

#[test]
fn forward_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(&mut rng, &[2, 2, 4, 4], -2.0, 2.0);
    let k = random(&mut rng, &[3, 2, 3, 3], -1.0, 1.0);
    let run = || {
        let tape = Tape::new();
        let y = tape
            .conv2d(tape.constant(x.clone()), tape.constant(k.clone()), tape.constant(Tensor::zeros(&[3])), 2, 1)
            .unwrap();
        let y = tape.tanh(y).unwrap();
        tape.value(y).as_ref().clone()
    };
    assert_eq!(run().data(), run().data());
}

#[test]
fn cross_entropy_floor_for_confident_logits() {
    // logits = m at the target, 0 elsewhere: loss = ln(1 + (k-1) e^{-m}).
    let (k, m) = (6usize, 7.0);
    let mut logits = vec![0.0; 2 * k * 3];
    let targets = [0usize, 5, 2, 1, 4, 3];
    for n in 0..2 {
        for i in 0..3 {
            logits[(n * k + targets[n * 3 + i]) * 3 + i] = m;
        }
    }
    let tape = Tape::new();
    let l = tape.constant(Tensor::new(vec![2, k, 3], logits).unwrap());
    let ce = tape.value(tape.cross_entropy(l, &targets, Reduction::Mean).unwrap()).item();
    let floor = (1.0 + (k as f64 - 1.0) * (-m as f64).exp()).ln();
    assert!((ce - floor).abs() < 1e-12);
}

fn check_op(name: &str, err: f64) {
    assert!(err < 1e-3, "{name}: relative error {err}");
}

#[test]
fn every_primitive_passes_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..20 {
        let x = random(&mut rng, &[3, 4], -2.0, 2.0);
        let w = random(&mut rng, &[4, 5], -2.0, 2.0);
        let b = random(&mut rng, &[5], -2.0, 2.0);
        let other = random(&mut rng, &[3, 4], -2.0, 2.0);
        let (w2, b2) = (w.clone(), b.clone());
        check_op(
            "linear/x",
            grad_check(
                move |t, v| {
                    let y = t.linear(v, t.constant(w2.clone()), t.constant(b2.clone()))?;
                    let y = t.mul(y, y)?;
                    t.sum(y)
                },
                &x,
                1e-4,
            )
            .unwrap()
            .max_rel_error,
        );
        let x2 = x.clone();
        check_op(
            "linear/w",
            grad_check(
                move |t, v| {
                    let y = t.linear(t.constant(x2.clone()), v, t.constant(b.clone()))?;
                    let y = t.mul(y, y)?;
                    t.sum(y)
                },
                &w,
                1e-4,
            )
            .unwrap()
            .max_rel_error,
        );
        for kind in [Activation::Relu, Activation::Tanh, Activation::Sigmoid] {
            let o = other.clone();
            check_op(
                "activation",
                grad_check(
                    move |t, v| {
                        let y = t.activation(v, kind)?;
                        let y = t.mul(y, t.constant(o.clone()))?;
                        t.sum(y)
                    },
                    &x,
                    1e-4,
                )
                .unwrap()
                .max_rel_error,
            );
        }
        for axis in [0, 1] {
            let o = other.clone();
            check_op(
                "softmax",
                grad_check(
                    move |t, v| {
                        let y = t.softmax(v, axis)?;
                        let y = t.mul(y, t.constant(o.clone()))?;
                        t.sum(y)
                    },
                    &x,
                    1e-4,
                )
                .unwrap()
                .max_rel_error,
            );
        }
        let o = other.clone();
        check_op(
            "exp/scale/sub/norm",
            grad_check(
                move |t, v| {
                    let y = t.exp(t.scale(v, 0.5)?)?;
                    let y = t.sub(y, t.constant(o.clone()))?;
                    t.norm(y)
                },
                &x,
                1e-4,
            )
            .unwrap()
            .max_rel_error,
        );
        let o = other.clone();
        check_op(
            "reshape/narrow/concat",
            grad_check(
                move |t, v| {
                    let a = t.narrow(v, 1, 1, 2)?;
                    let b = t.narrow(v, 1, 0, 2)?;
                    let b = t.reshape(b, &[6])?;
                    let b = t.reshape(b, &[3, 2])?;
                    let c = t.concat(&[a, b, a], 1)?;
                    let c = t.mul(c, c)?;
                    let s = t.sum(c)?;
                    let d = t.add(v, t.constant(o.clone()))?;
                    let d = t.mul(d, d)?;
                    let d = t.sum(d)?;
                    t.add(s, d)
                },
                &x,
                1e-4,
            )
            .unwrap()
            .max_rel_error,
        );
        let targets: Vec<usize> = (0..3).map(|_| rng.random_range(0..4)).collect();
        check_op(
            "cross_entropy",
            grad_check(move |t, v| t.cross_entropy(v, &targets, Reduction::BatchMean), &x, 1e-4)
                .unwrap()
                .max_rel_error,
        );
        let o = other.clone();
        check_op(
            "mse",
            grad_check(move |t, v| t.mse(t.constant(o.clone()), v, Reduction::Sum), &x, 1e-4)
                .unwrap()
                .max_rel_error,
        );
        let o = other.clone();
        check_op(
            "kl",
            grad_check(move |t, v| t.gaussian_kl(v, t.constant(o.clone()), Reduction::Mean), &x, 1e-4)
                .unwrap()
                .max_rel_error,
        );

        let img = random(&mut rng, &[2, 2, 5, 5], -2.0, 2.0);
        let k = random(&mut rng, &[3, 2, 3, 3], -1.0, 1.0);
        let (img2, k2) = (img.clone(), k.clone());
        check_op(
            "conv2d/x",
            grad_check(
                move |t, v| {
                    let y = t.conv2d(v, t.constant(k2.clone()), t.constant(Tensor::vector(&[0.1, 0.2, 0.3])), 2, 1)?;
                    let y = t.mul(y, y)?;
                    t.sum(y)
                },
                &img,
                1e-4,
            )
            .unwrap()
            .max_rel_error,
        );
        check_op(
            "conv2d/k",
            grad_check(
                move |t, v| {
                    let y = t.conv2d(t.constant(img2.clone()), v, t.constant(Tensor::vector(&[0.1, 0.2, 0.3])), 1, 1)?;
                    let y = t.mul(y, y)?;
                    t.sum(y)
                },
                &k,
                1e-4,
            )
            .unwrap()
            .max_rel_error,
        );
    }
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(values in proptest::collection::vec(-30.0f64..30.0, 12)) {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![3, 4], values).unwrap());
        let y = tape.value(tape.softmax(x, 1).unwrap());
        for r in 0..3 {
            let s: f64 = y.data()[r * 4..(r + 1) * 4].iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn kl_is_nonnegative(mu in proptest::collection::vec(-5.0f64..5.0, 6), lv in proptest::collection::vec(-8.0f64..8.0, 6)) {
        let tape = Tape::new();
        let m = tape.constant(Tensor::new(vec![2, 3], mu).unwrap());
        let l = tape.constant(Tensor::new(vec![2, 3], lv).unwrap());
        prop_assert!(tape.value(tape.gaussian_kl(m, l, Reduction::BatchMean).unwrap()).item() >= 0.0);
    }
}
