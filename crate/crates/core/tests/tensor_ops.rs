use equivar_core::tensor::{grad_check, Tape, Tensor, Var};
use equivar_core::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;

/// Direct six-nested-loop cross-correlation with zero padding.
fn conv_loop_oracle(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    stride: usize,
    pad: usize,
) -> Tensor<f64> {
    let (b, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, k) = (w.shape()[0], w.shape()[2]);
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; b * o * ho * wo];
    for bi in 0..b {
        for oi in 0..o {
            for y in 0..ho {
                for xx in 0..wo {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (y * stride + ky) as isize - pad as isize;
                                let ix = (xx * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += w.at(&[oi, ci, ky, kx])
                                    * x.at(&[bi, ci, iy as usize, ix as usize]);
                            }
                        }
                    }
                    out[((bi * o + oi) * ho + y) * wo + xx] = acc;
                }
            }
        }
    }
    Tensor::new(vec![b, o, ho, wo], out).unwrap()
}

fn conv(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Result<Tensor<f64>> {
    let tape = Tape::new();
    let (xv, wv) = (tape.constant(x.clone()), tape.constant(w.clone()));
    let y = tape.conv2d(xv, wv, stride, pad)?;
    Ok(tape.value(y))
}

#[test]
fn conv2d_scalar_kernel() {
    let x = Tensor::full(vec![1, 1, 3, 3], 1.0);
    let w = Tensor::full(vec![1, 1, 1, 1], 2.0);
    let y = conv(&x, &w, 1, 0).unwrap();
    assert_eq!(y.shape(), &[1, 1, 3, 3]);
    assert!(y.data().iter().all(|&v| v == 2.0));
}

#[test]
fn conv2d_hand_sum() {
    let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let w = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let y = conv(&x, &w, 1, 0).unwrap();
    assert_eq!(y.shape(), &[1, 1, 1, 1]);
    assert_eq!(y.data(), &[5.0]);
}

#[test]
fn conv2d_matches_loop_oracle_fixed_case() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = Tensor::randn(vec![2, 3, 8, 8], 1.0, &mut rng);
    let w = Tensor::randn(vec![4, 3, 3, 3], 1.0, &mut rng);
    for pad in 0..=1 {
        let y = conv(&x, &w, 1, pad).unwrap();
        assert!(y.max_abs_diff(&conv_loop_oracle(&x, &w, 1, pad)) <= 1e-6);
    }
}

#[test]
fn conv2d_matches_loop_oracle_randomized() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let h = rng.random_range(1..=8);
        let wd = rng.random_range(1..=8);
        let pad = rng.random_range(0..=2);
        let k = rng.random_range(1..=(h.min(wd) + 2 * pad).min(8));
        let stride = rng.random_range(1..=3);
        let b = rng.random_range(1..=3);
        let c = rng.random_range(1..=4);
        let o = rng.random_range(1..=4);
        let x = Tensor::randn(vec![b, c, h, wd], 1.0, &mut rng);
        let w = Tensor::randn(vec![o, c, k, k], 1.0, &mut rng);
        let y = conv(&x, &w, stride, pad).unwrap();
        let expected = conv_loop_oracle(&x, &w, stride, pad);
        assert_eq!(y.shape(), expected.shape());
        assert!(y.max_abs_diff(&expected) <= 1e-6);
    }
}

#[test]
fn conv2d_reports_offending_axes() {
    let x = Tensor::<f64>::zeros(vec![1, 2, 4, 4]);
    let w = Tensor::<f64>::zeros(vec![1, 3, 3, 3]);
    match conv(&x, &w, 1, 0) {
        Err(Error::Shape { detail, .. }) => assert!(detail.contains("axis 1"), "{detail}"),
        other => panic!("expected shape error, got {other:?}"),
    }
    let big = Tensor::<f64>::zeros(vec![1, 2, 5, 5]);
    assert!(conv(&x, &Tensor::zeros(vec![1, 2, 5, 5]), 1, 0).is_err());
    assert!(conv(&big, &Tensor::zeros(vec![1, 2, 5, 5]), 1, 0).is_ok());
}

#[test]
fn softmax_of_zeros_is_uniform() {
    let tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros(vec![3]));
    let y = tape.value(tape.softmax(x, 0).unwrap());
    for &v in y.data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn l2_normalize_three_four_five() {
    let tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::new(vec![2], vec![3.0, 4.0]).unwrap());
    let y = tape.value(tape.l2_normalize(x, 0, 1e-12).unwrap());
    assert!((y.data()[0] - 0.6).abs() < 1e-15);
    assert!((y.data()[1] - 0.8).abs() < 1e-15);
}

#[test]
fn identity_index_permute_is_bit_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let t = Tensor::<f64>::randn(vec![2, 5, 3], 1.0, &mut rng);
    let tape = Tape::new();
    let x = tape.constant(t.clone());
    let y = tape.index_permute(x, 1, &[0, 1, 2, 3, 4]).unwrap();
    assert_eq!(tape.value(y), t);
}

#[test]
fn index_permute_rejects_non_bijections() {
    let tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros(vec![3, 2]));
    assert!(matches!(
        tape.index_permute(x, 0, &[0, 0, 1]),
        Err(Error::Permutation(_))
    ));
    assert!(matches!(
        tape.index_permute(x, 0, &[0, 1]),
        Err(Error::Permutation(_))
    ));
    assert!(tape.index_permute(x, 0, &[2, 0, 1]).is_ok());
}

#[test]
fn permute_axes_transposes() {
    let tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::from_fn(vec![2, 3], |i| i as f64));
    let y = tape.value(tape.permute_axes(x, &[1, 0]).unwrap());
    assert_eq!(y.shape(), &[3, 2]);
    assert_eq!(y.data(), &[0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
}

#[test]
fn stop_gradient_blocks_flow() {
    let tape = Tape::<f64>::new();
    let x = tape.param(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
    let sg = tape.stop_gradient(x);
    assert_eq!(tape.value(sg), tape.value(x));
    let sq = tape.mul(sg, sg).unwrap();
    let loss = tape.sum(sq);
    let grads = tape.backward(loss).unwrap();
    let g = grads.get_or_zeros(x, &[2]);
    assert!(g.data().iter().all(|&v| v == 0.0));

    // mixed path: only the live branch contributes
    let tape = Tape::<f64>::new();
    let x = tape.param(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
    let sg = tape.stop_gradient(x);
    let prod = tape.mul(x, sg).unwrap();
    let loss = tape.sum(prod);
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[1.0, 2.0]);
}

#[test]
fn constants_receive_no_gradient() {
    let tape = Tape::<f64>::new();
    let c = tape.constant(Tensor::full(vec![2], 3.0));
    let p = tape.param(Tensor::full(vec![2], 2.0));
    let prod = tape.mul(c, p).unwrap();
    let loss = tape.sum(prod);
    let g = tape.backward(loss).unwrap();
    assert!(g.get(c).is_none());
    assert_eq!(g.get(p).unwrap().data(), &[3.0, 3.0]);
}

#[test]
fn cross_entropy_matches_log_softmax_composition() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let logits = Tensor::<f64>::randn(vec![3, 5], 1.0, &mut rng);
    let labels = [4usize, 0, 2];
    let tape = Tape::new();
    let x = tape.constant(logits.clone());
    let ce = tape.value(tape.cross_entropy(x, &labels).unwrap()).item();
    let ls = tape.value(tape.log_softmax(x, 1).unwrap());
    let manual = -labels
        .iter()
        .enumerate()
        .map(|(i, &y)| ls.at(&[i, y]))
        .sum::<f64>()
        / 3.0;
    assert!((ce - manual).abs() < 1e-14);
}

// ---- finite-difference checks, one per differentiable op ----

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape.to_vec(), 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Random weighting so that no coordinate of the gradient is structurally zero.
fn weighted_sum(tape: &Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(y);
    let w = Tensor::uniform(shape, 0.5, 1.5, &mut ChaCha8Rng::seed_from_u64(seed));
    let wv = tape.constant(w);
    let p = tape.mul(y, wv)?;
    Ok(tape.sum(p))
}

fn check(name: &str, shape: &[usize], f: impl Fn(&Tape<f64>, Var) -> Result<Var>) {
    let x = rand_tensor(shape, 99);
    let err = grad_check(|t, v| weighted_sum(t, f(t, v)?, 1234), &x, 1e-5).unwrap();
    assert!(err <= 1e-4, "{name}: max rel err {err:e}");
}

#[test]
fn quadratic_grad_check_is_tight() {
    let x = Tensor::uniform(vec![6], 0.5, 2.0, &mut ChaCha8Rng::seed_from_u64(1));
    let err = grad_check(
        |t, v| {
            let sq = t.mul(v, v)?;
            Ok(t.sum(sq))
        },
        &x,
        1e-4,
    )
    .unwrap();
    assert!(err <= 1e-7, "{err:e}");
}

#[test]
fn conv2d_grad_check() {
    let w = rand_tensor(&[3, 2, 3, 3], 8);
    let x = rand_tensor(&[1, 2, 5, 5], 9);
    let err = grad_check(
        |t, v| {
            let wv = t.constant(w.clone());
            let y = t.conv2d(v, wv, 1, 1)?;
            Ok(t.sum(y))
        },
        &x,
        1e-4,
    )
    .unwrap();
    assert!(err <= 1e-4, "input grad {err:e}");
    let err = grad_check(
        |t, v| {
            let xv = t.constant(x.clone());
            let y = t.conv2d(xv, v, 2, 1)?;
            weighted_sum(t, y, 3)
        },
        &w,
        1e-5,
    )
    .unwrap();
    assert!(err <= 1e-4, "weight grad {err:e}");
}

#[test]
fn elementwise_grad_checks() {
    let other = rand_tensor(&[3, 4], 17);
    check("add", &[3, 4], |t, v| {
        let o = t.constant(other.clone());
        t.add(v, o)
    });
    check("sub", &[3, 4], |t, v| {
        let o = t.constant(other.clone());
        t.sub(o, v)
    });
    check("mul", &[3, 4], |t, v| {
        let o = t.constant(other.clone());
        t.mul(v, o)
    });
    check("mul_self", &[3, 4], |t, v| t.mul(v, v));
    check("scale", &[3, 4], |t, v| Ok(t.scale(v, -2.5)));
    check("add_scalar", &[3, 4], |t, v| Ok(t.add_scalar(v, 0.3)));
    check("exp", &[3, 4], |t, v| Ok(t.exp(v)));
    check("log", &[3, 4], |t, v| {
        let sq = t.mul(v, v)?;
        let pos = t.add_scalar(sq, 0.5);
        Ok(t.log(pos))
    });
    check("relu", &[3, 4], |t, v| Ok(t.relu(v)));
    check("reshape", &[3, 4], |t, v| t.reshape(v, vec![2, 6]));
}

#[test]
fn reduction_grad_checks() {
    check("sum", &[3, 4], |t, v| {
        let e = t.exp(v);
        Ok(t.sum(e))
    });
    check("mean", &[3, 4], |t, v| {
        let e = t.exp(v);
        Ok(t.mean(e))
    });
    check("sum_axis", &[2, 3, 4], |t, v| t.sum_axis(v, 1));
    check("mean_axis", &[2, 3, 4], |t, v| t.mean_axis(v, 2));
    check("spatial_mean", &[2, 3, 4, 4], |t, v| t.spatial_mean(v));
    check("avg_pool2d", &[2, 3, 4, 6], |t, v| t.avg_pool2d(v, 2));
    check("group_mean", &[2, 4, 3], |t, v| t.group_mean(v, 1));
}

#[test]
fn linear_algebra_grad_checks() {
    let b = rand_tensor(&[4, 5], 21);
    check("matmul_left", &[3, 4], |t, v| {
        let bv = t.constant(b.clone());
        t.matmul(v, bv)
    });
    let a = rand_tensor(&[3, 4], 22);
    check("matmul_right", &[4, 5], |t, v| {
        let av = t.constant(a.clone());
        t.matmul(av, v)
    });
    let o = rand_tensor(&[3, 2], 23);
    check("concat", &[3, 4], |t, v| {
        let ov = t.constant(o.clone());
        t.concat(v, ov, 1)
    });
    check("concat_axis0", &[3, 4], |t, v| t.concat(v, v, 0));
    check("dot_last", &[3, 4], |t, v| {
        let bv = t.constant(a.clone());
        t.dot_last(v, bv)
    });
}

#[test]
fn normalization_grad_checks() {
    check("softmax", &[3, 5], |t, v| t.softmax(v, 1));
    check("softmax_axis0", &[3, 5], |t, v| t.softmax(v, 0));
    check("log_softmax", &[3, 5], |t, v| t.log_softmax(v, 1));
    check("l2_normalize", &[3, 5], |t, v| t.l2_normalize(v, 1, 1e-12));
    check("l2_normalize_axis0", &[3, 5], |t, v| t.l2_normalize(v, 0, 1e-12));
    let gamma = Tensor::uniform(vec![3], 0.5, 1.5, &mut ChaCha8Rng::seed_from_u64(4));
    let beta = rand_tensor(&[3], 5);
    check("batch_norm", &[4, 3, 2, 2], |t, v| {
        let (g, b) = (t.constant(gamma.clone()), t.constant(beta.clone()));
        Ok(t.batch_norm(v, g, b, 1, 1e-5)?.0)
    });
    let x = rand_tensor(&[4, 3, 2], 6);
    check("batch_norm_gamma", &[3], |t, v| {
        let (xv, b) = (t.constant(x.clone()), t.constant(beta.clone()));
        Ok(t.batch_norm(xv, v, b, 1, 1e-5)?.0)
    });
    check("batch_norm_beta", &[3], |t, v| {
        let (xv, g) = (t.constant(x.clone()), t.constant(gamma.clone()));
        Ok(t.batch_norm(xv, g, v, 1, 1e-5)?.0)
    });
    check("add_channel", &[3], |t, v| {
        let xv = t.constant(x.clone());
        t.add_channel(xv, v, 1)
    });
    check("add_channel_input", &[4, 3, 2], |t, v| {
        let b = t.constant(beta.clone());
        t.add_channel(v, b, 1)
    });
}

#[test]
fn indexing_grad_checks() {
    check("gather_with_repeats", &[6], |t, v| {
        t.gather(v, Arc::new(vec![5, 0, 0, 3, 2, 2, 1, 4]), vec![2, 4])
    });
    check("index_permute", &[3, 4], |t, v| t.index_permute(v, 1, &[2, 0, 3, 1]));
    check("permute_axes", &[2, 3, 4], |t, v| t.permute_axes(v, &[2, 0, 1]));
}

#[test]
fn cross_entropy_grad_check() {
    let x = rand_tensor(&[4, 6], 31);
    let err = grad_check(|t, v| t.cross_entropy(v, &[1, 5, 0, 3]), &x, 1e-5).unwrap();
    assert!(err <= 1e-4, "{err:e}");
}

#[test]
fn grad_check_rejects_non_finite() {
    let x = Tensor::new(vec![2], vec![-1.0, 1.0]).unwrap();
    let r = grad_check(|t, v| Ok(t.sum(t.log(v))), &x, 1e-4);
    assert!(matches!(r, Err(Error::Numeric(_))));
}
