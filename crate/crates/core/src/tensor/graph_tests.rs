use proptest::prelude::*;
use rand::Rng;

use super::*;
use crate::rng::{stream, Purpose};
use crate::testutil::{max_abs_diff, max_grad_error, randn};

fn triple_loop(a: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a.at(&[i, p]) * b.at(&[p, j]);
            }
            out[i * n + j] = s;
        }
    }
    out
}

fn erf_series(x: f64) -> f64 {
    // Maclaurin series, summed until terms vanish.
    let mut sum = 0.0;
    let mut term = x;
    let mut n = 0.0;
    loop {
        let contrib = term / (2.0 * n + 1.0);
        sum += contrib;
        if contrib.abs() < 1e-18 {
            break;
        }
        n += 1.0;
        term *= -x * x / n;
    }
    2.0 / std::f64::consts::PI.sqrt() * sum
}

fn run1(t: Tensor<f64>, f: impl FnOnce(&mut Graph<f64>, Var) -> Var) -> Tensor<f64> {
    let mut g = Graph::new();
    let v = g.input(t);
    let out = f(&mut g, v);
    g.value(out).clone()
}

// ------------------------------------------------------------------ matmul

#[test]
fn matmul_identity() {
    let m = randn(&[3, 4], 1);
    let mut g = Graph::new();
    let (i, mv) = (g.input(Tensor::eye(3)), g.input(m.clone()));
    let out = g.matmul(i, mv).unwrap();
    assert_eq!(g.data(out), m.data());
}

#[test]
fn matmul_annihilator() {
    let mut g = Graph::new();
    let z = g.input(Tensor::zeros([2, 3]));
    let r = g.input(randn(&[3, 4], 2));
    let out = g.matmul(z, r).unwrap();
    assert_eq!(g.shape(out), &[2, 4]);
    assert!(g.data(out).iter().all(|&v| v == 0.0));
}

#[test]
fn matmul_matches_triple_loop() {
    let (a, b) = (randn(&[3, 3], 3), randn(&[3, 3], 4));
    let expected = triple_loop(&a, &b);
    let mut g = Graph::new();
    let (va, vb) = (g.input(a), g.input(b));
    let out = g.matmul(va, vb).unwrap();
    for (x, y) in g.data(out).iter().zip(&expected) {
        assert!((x - y).abs() <= 1e-12 * y.abs().max(1e-300), "{x} vs {y}");
    }
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut g = Graph::<f64>::new();
    let a = g.input(Tensor::zeros([2, 3]));
    let b = g.input(Tensor::zeros([4, 5]));
    let err = g.matmul(a, b).unwrap_err().to_string();
    assert!(err.contains("[2, 3]") && err.contains("[4, 5]"), "{err}");
}

#[test]
fn matmul_variants_gradients() {
    let inputs = [randn(&[2, 3, 4], 5), randn(&[5, 4], 6)];
    let err = max_grad_error(&inputs, 1e-5, |g, v| {
        let y = g.matmul_nt(v[0], v[1])?;
        let y = g.mul(y, y)?;
        Ok(g.sum(y))
    });
    assert!(err < 1e-6, "matmul_nt grad error {err}");

    let inputs = [randn(&[3, 2, 4], 7), randn(&[3, 5, 4], 8)];
    let err = max_grad_error(&inputs, 1e-5, |g, v| {
        let y = g.bmm(v[0], v[1], true)?;
        let y = g.gelu(y);
        Ok(g.sum(y))
    });
    assert!(err < 1e-6, "bmm_nt grad error {err}");

    let inputs = [randn(&[3, 2, 4], 9), randn(&[3, 4, 5], 10)];
    let err = max_grad_error(&inputs, 1e-5, |g, v| {
        let y = g.bmm(v[0], v[1], false)?;
        let y = g.mul(y, y)?;
        Ok(g.mean(y))
    });
    assert!(err < 1e-6, "bmm grad error {err}");
}

// ------------------------------------------------------------- elementwise

#[test]
fn relu_sign_cases_and_zero_gradient() {
    let x = Tensor::new([3], vec![-1.0, 0.0, 2.0]).unwrap();
    assert_eq!(run1(x.clone(), |g, v| g.relu(v)).data(), &[0.0, 0.0, 2.0]);

    let mut g = Graph::new();
    let v = g.input(x.with_requires_grad(true));
    let r = g.relu(v);
    let s = g.sum(r);
    g.backward(s).unwrap();
    assert_eq!(g.grad(v).unwrap(), &[0.0, 0.0, 1.0]);
}

#[test]
fn add_zero_is_identity() {
    let x = randn(&[4, 5], 11);
    let mut g = Graph::new();
    let (a, z) = (g.input(x.clone()), g.input(Tensor::zeros([4, 5])));
    let out = g.elementwise(ElementwiseKind::Add, a, Some(z)).unwrap();
    assert_eq!(g.data(out), x.data());
}

#[test]
fn gelu_matches_erf_series() {
    let pts: Vec<f64> = (0..10).map(|i| -3.0 + 0.63 * i as f64).collect();
    let x = Tensor::new([10], pts.clone()).unwrap();
    let y = run1(x, |g, v| g.gelu(v));
    for (&p, &v) in pts.iter().zip(y.data()) {
        let oracle = 0.5 * p * (1.0 + erf_series(p / 2f64.sqrt()));
        assert!((v - oracle).abs() <= 1e-10, "gelu({p}) = {v}, oracle {oracle}");
    }
}

#[test]
fn broadcast_rules() {
    let mut g = Graph::<f64>::new();
    let a = g.input(randn(&[2, 3, 4], 12));
    let row = g.input(randn(&[4], 13));
    let block = g.input(randn(&[3, 4], 14));
    let s = g.input(Tensor::scalar(2.0));
    let bad = g.input(randn(&[3], 15));
    assert!(g.add(a, row).is_ok());
    assert!(g.mul(a, block).is_ok());
    assert!(g.mul(a, s).is_ok());
    assert!(matches!(g.add(a, bad), Err(crate::Error::Shape { .. })));

    let inputs = [randn(&[2, 3, 4], 16), randn(&[4], 17), randn(&[3, 4], 18)];
    let err = max_grad_error(&inputs, 1e-5, |g, v| {
        let y = g.mul(v[0], v[1])?;
        let y = g.sub(y, v[2])?;
        let y = g.mul(y, y)?;
        Ok(g.sum(y))
    });
    assert!(err < 1e-6, "broadcast grad error {err}");
}

// --------------------------------------------------------------- layernorm

fn ln(g: &mut Graph<f64>, x: Var, d: usize) -> Var {
    let gamma = g.input(Tensor::ones([d]));
    let beta = g.input(Tensor::zeros([d]));
    g.layernorm(x, gamma, beta, 1e-5).unwrap()
}

#[test]
fn layernorm_constant_row_is_zero() {
    let y = run1(Tensor::full([2, 6], 3.25), |g, v| ln(g, v, 6));
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn layernorm_normalizes_rows() {
    let y = run1(randn(&[5, 16], 19), |g, v| ln(g, v, 16));
    for row in y.data().chunks(16) {
        let mean = row.iter().sum::<f64>() / 16.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
        assert!(mean.abs() <= 1e-9, "mean {mean}");
        assert!((var - 1.0).abs() <= 1e-4, "var {var}");
    }
}

#[test]
fn layernorm_gradient_matches_finite_differences() {
    let inputs = [randn(&[4, 8], 20), randn(&[8], 21), randn(&[8], 22)];
    let weights = randn(&[4, 8], 23);
    let err = max_grad_error(&inputs, 1e-5, |g, v| {
        let y = g.layernorm(v[0], v[1], v[2], 1e-5)?;
        let w = g.input(weights.clone());
        let y = g.mul(y, w)?;
        Ok(g.sum(y))
    });
    assert!(err <= 1e-5, "layernorm grad error {err}");
}

#[test]
fn layernorm_rejects_empty_axis() {
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::zeros([3, 0]));
    let gamma = g.input(Tensor::zeros([0]));
    let beta = g.input(Tensor::zeros([0]));
    assert!(matches!(
        g.layernorm(x, gamma, beta, 1e-5),
        Err(crate::Error::EmptyAxis(_))
    ));
}

// ----------------------------------------------------------------- softmax

#[test]
fn softmax_uniform_row() {
    let y = run1(Tensor::full([1, 9], 0.7), |g, v| g.softmax_rows(v).unwrap());
    for &v in y.data() {
        assert!((v - 1.0 / 9.0).abs() < 1e-15);
    }
}

#[test]
fn softmax_is_stabilized() {
    let y = run1(Tensor::new([1, 2], vec![1000.0, 0.0]).unwrap(), |g, v| {
        g.softmax_rows(v).unwrap()
    });
    assert!((y.data()[0] - 1.0).abs() < 1e-12);
    assert!(y.data()[1] >= 0.0 && y.data()[1] < 1e-300);
}

#[test]
fn softmax_rejects_non_finite() {
    let mut g = Graph::<f64>::new();
    let v = g.input(Tensor::new([2], vec![f64::NAN, 0.0]).unwrap());
    assert!(matches!(g.softmax_rows(v), Err(crate::Error::Numeric(_))));
}

#[test]
fn softmax_gradient() {
    let inputs = [randn(&[3, 5], 24)];
    let w = randn(&[3, 5], 25);
    let err = max_grad_error(&inputs, 1e-5, |g, v| {
        let y = g.softmax_rows(v[0])?;
        let w = g.input(w.clone());
        let y = g.mul(y, w)?;
        Ok(g.sum(y))
    });
    assert!(err < 1e-6, "softmax grad error {err}");
}

// ----------------------------------------------------------------- dropout

#[test]
fn dropout_identity_cases() {
    let x = randn(&[50], 26);
    for training in [true, false] {
        let mut rng = stream(1, Purpose::Dropout, 0);
        let y = run1(x.clone(), |g, v| g.dropout(v, 0.0, &mut rng, training).unwrap());
        assert_eq!(y.data(), x.data());
    }
    let mut rng = stream(1, Purpose::Dropout, 0);
    let y = run1(x.clone(), |g, v| g.dropout(v, 0.5, &mut rng, false).unwrap());
    assert_eq!(y.data(), x.data());
}

#[test]
fn dropout_rejects_p_one() {
    let mut g = Graph::<f64>::new();
    let v = g.input(Tensor::zeros([3]));
    let mut rng = stream(1, Purpose::Dropout, 0);
    assert!(matches!(
        g.dropout(v, 1.0, &mut rng, true),
        Err(crate::Error::Config(_))
    ));
}

#[test]
fn dropout_monte_carlo() {
    let n = 100_000;
    let mut src = stream(3, Purpose::Init, 0);
    let x = Tensor::from_fn([n], |_| 1.0 + src.gen::<f64>());
    let mut rng = stream(3, Purpose::Dropout, 0);
    let y = run1(x.clone(), |g, v| g.dropout(v, 0.5, &mut rng, true).unwrap());
    let survivors = y.data().iter().filter(|&&v| v != 0.0).count() as f64 / n as f64;
    assert!((survivors - 0.5).abs() <= 0.01 * 0.5, "survivor fraction {survivors}");
    let mean_in = x.data().iter().sum::<f64>() / n as f64;
    let mean_out = y.data().iter().sum::<f64>() / n as f64;
    assert!(((mean_out - mean_in) / mean_in).abs() <= 0.02);
}

#[test]
fn dropout_masks_are_reproducible() {
    let x = Tensor::<f64>::ones([1000]);
    let mask = |seed| {
        let mut rng = stream(seed, Purpose::Dropout, 7);
        run1(x.clone(), |g, v| g.dropout(v, 0.3, &mut rng, true).unwrap())
    };
    assert_eq!(mask(5).data(), mask(5).data());
    assert_ne!(mask(5).data(), mask(6).data());
}

// ----------------------------------------------------------- cross-entropy

fn ce(logits: &Tensor<f64>, targets: &[usize], eps: f64) -> f64 {
    let mut g = Graph::new();
    let v = g.input(logits.clone());
    let l = g.cross_entropy_label_smoothed(v, targets, eps).unwrap();
    g.value(l).item().unwrap()
}

#[test]
fn cross_entropy_uniform_logits_is_ln_c() {
    let logits = Tensor::full([3, 9], 0.25);
    for eps in [0.0, 0.1, 0.5, 0.9] {
        let loss = ce(&logits, &[0, 4, 8], eps);
        assert!((loss - 9f64.ln()).abs() <= 1e-9, "eps {eps}: {loss}");
    }
}

#[test]
fn cross_entropy_without_smoothing_is_nll() {
    let logits = randn(&[4, 9], 27);
    let targets = [1, 0, 8, 3];
    let mut expected = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        let row = &logits.data()[i * 9..(i + 1) * 9];
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        expected -= (row[t].exp() / z).ln();
    }
    expected /= 4.0;
    assert!((ce(&logits, &targets, 0.0) - expected).abs() < 1e-12);
}

#[test]
fn cross_entropy_smoothed_matches_direct_sum() {
    let logits = randn(&[4, 9], 28);
    let targets = [2, 2, 7, 0];
    let eps = 0.1;
    let mut expected = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        let row = &logits.data()[i * 9..(i + 1) * 9];
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        for c in 0..9 {
            let q = if c == t { 1.0 - eps + eps / 9.0 } else { eps / 9.0 };
            expected -= q * (row[c].exp() / z).ln();
        }
    }
    expected /= 4.0;
    assert!((ce(&logits, &targets, eps) - expected).abs() <= 1e-10);
}

#[test]
fn cross_entropy_errors() {
    let mut g = Graph::<f64>::new();
    let v = g.input(Tensor::zeros([2, 3]));
    assert!(matches!(
        g.cross_entropy_label_smoothed(v, &[0, 3], 0.1),
        Err(crate::Error::Index(_))
    ));
    assert!(matches!(
        g.cross_entropy_label_smoothed(v, &[0, 1], 1.0),
        Err(crate::Error::Config(_))
    ));
}

#[test]
fn cross_entropy_gradient() {
    let inputs = [randn(&[4, 9], 29)];
    let err = max_grad_error(&inputs, 1e-5, |g, v| {
        g.cross_entropy_label_smoothed(v[0], &[1, 5, 8, 0], 0.1)
    });
    assert!(err < 1e-6, "ce grad error {err}");
}

// ---------------------------------------------------------------- backward

#[test]
fn backward_of_sum_is_ones() {
    let mut g = Graph::new();
    let x = g.input(randn(&[3, 4], 30).with_requires_grad(true));
    let s = g.sum(x);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0; 12]);
}

#[test]
fn off_tape_leaf_gets_no_grad() {
    let mut g = Graph::new();
    let x = g.input(randn(&[3], 31).with_requires_grad(true));
    let frozen = g.input(randn(&[3], 32));
    let unused = g.input(randn(&[3], 33).with_requires_grad(true));
    let y = g.mul(x, frozen).unwrap();
    let s = g.sum(y);
    g.backward(s).unwrap();
    assert!(g.grad(frozen).is_none());
    assert_eq!(g.grad(unused).unwrap(), &[0.0; 3]);
    let stray = Tensor::<f64>::zeros([3]).with_requires_grad(true);
    assert!(stray.grad().is_none());
}

#[test]
fn backward_requires_scalar() {
    let mut g = Graph::new();
    let x = g.input(randn(&[3], 34).with_requires_grad(true));
    assert!(matches!(g.backward(x), Err(crate::Error::Contract(_))));
}

#[test]
fn repeated_backward_accumulates() {
    let mut g = Graph::new();
    let x = g.input(randn(&[3], 35).with_requires_grad(true));
    let y = g.scale(x, 3.0);
    let s = g.sum(y);
    g.backward(s).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[6.0; 3]);
}

#[test]
fn two_layer_mlp_gradient_check() {
    let inputs = [
        randn(&[5, 6], 36),
        randn(&[8, 6], 37),
        randn(&[8], 38),
        randn(&[3, 8], 39),
        randn(&[3], 40),
    ];
    let err = max_grad_error(&inputs, 1e-5, |g, v| {
        let h = g.matmul_nt(v[0], v[1])?;
        let h = g.add(h, v[2])?;
        let h = g.relu(h);
        let o = g.matmul_nt(h, v[3])?;
        let o = g.add(o, v[4])?;
        g.cross_entropy_label_smoothed(o, &[0, 1, 2, 1, 0], 0.1)
    });
    assert!(err <= 1e-4, "mlp grad error {err}");
}

#[test]
fn token_and_layout_ops_gradients() {
    let inputs = [randn(&[2, 3, 4], 41), randn(&[4], 42)];
    let w = randn(&[2, 4, 4], 43);
    let err = max_grad_error(&inputs, 1e-5, |g, v| {
        let t = g.prepend_token(v[0], v[1])?;
        let w = g.input(w.clone());
        let y = g.mul(t, w)?;
        let p = g.permute(y, &[2, 0, 1])?;
        let p = g.reshape(p, &[4, 8])?;
        let p = g.gelu(p);
        let p = g.reshape(p, &[2, 4, 4])?;
        let a = g.select_token(p, 1)?;
        let b = g.mean_tokens(p)?;
        let s = g.mul(a, b)?;
        Ok(g.sum(s))
    });
    assert!(err < 1e-6, "token ops grad error {err}");
}

#[test]
fn im2col_matches_direct_convolution() {
    // 1 image, 4x5, 2 channels; 3x3 kernel, stride 1, padding 1.
    let x = randn(&[1, 4, 5, 2], 44);
    let w = randn(&[3, 18], 45);
    let geom = ConvGeom {
        kernel: 3,
        stride: 1,
        padding: 1,
    };
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let wv = g.input(w.clone());
    let cols = g.im2col(xv, geom).unwrap();
    let y = g.matmul_nt(cols, wv).unwrap();
    assert_eq!(g.shape(y), &[20, 3]);
    for oy in 0..4 {
        for ox in 0..5 {
            for co in 0..3 {
                let mut s = 0.0;
                for ky in 0..3 {
                    for kx in 0..3 {
                        let (iy, ix) = (oy as isize + ky as isize - 1, ox as isize + kx as isize - 1);
                        if !(0..4).contains(&iy) || !(0..5).contains(&ix) {
                            continue;
                        }
                        for c in 0..2 {
                            s += x.at(&[0, iy as usize, ix as usize, c])
                                * w.at(&[co, (ky * 3 + kx) * 2 + c]);
                        }
                    }
                }
                let got = g.data(y)[(oy * 5 + ox) * 3 + co];
                assert!((got - s).abs() < 1e-12);
            }
        }
    }

    let inputs = [randn(&[2, 5, 5, 2], 46), randn(&[3, 18], 47)];
    let geom = ConvGeom {
        kernel: 3,
        stride: 2,
        padding: 1,
    };
    let err = max_grad_error(&inputs, 1e-5, |g, v| {
        let c = g.im2col(v[0], geom)?;
        let y = g.matmul_nt(c, v[1])?;
        let y = g.mul(y, y)?;
        Ok(g.sum(y))
    });
    assert!(err < 1e-6, "im2col grad error {err}");
}

#[test]
fn row_norm_scale_gradient_and_zero_row() {
    let inputs = [randn(&[4, 5], 48), randn(&[4], 49)];
    let w = randn(&[4, 5], 50);
    let err = max_grad_error(&inputs, 1e-5, |g, v| {
        let y = g.row_norm_scale(v[0], v[1])?;
        let w = g.input(w.clone());
        let y = g.mul(y, w)?;
        Ok(g.sum(y))
    });
    assert!(err < 1e-6, "row_norm_scale grad error {err}");

    let mut g = Graph::<f64>::new();
    let v = g.input(Tensor::new([2, 2], vec![1.0, 1.0, 0.0, 0.0]).unwrap());
    let m = g.input(Tensor::ones([2]));
    assert!(matches!(g.row_norm_scale(v, m), Err(crate::Error::Numeric(_))));
}

// -------------------------------------------------------------- properties

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn prop_softmax_rows_are_distributions(rows in 1usize..6, cols in 1usize..9, seed in 0u64..1000) {
        let x = randn(&[rows, cols], seed);
        let x = Tensor::new([rows, cols], x.data().iter().map(|v| v * 10.0).collect()).unwrap();
        let y = run1(x, |g, v| g.softmax_rows(v).unwrap());
        for row in y.data().chunks(cols) {
            let s: f64 = row.iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-9);
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn prop_matmul_matches_oracle(m in 1usize..7, k in 1usize..7, n in 1usize..7, seed in 0u64..1000) {
        let (a, b) = (randn(&[m, k], seed), randn(&[k, n], seed + 1));
        let expected = triple_loop(&a, &b);
        let got = a.matmul(&b).unwrap();
        for (x, y) in got.data().iter().zip(&expected) {
            prop_assert!((x - y).abs() <= 1e-12 * y.abs().max(1.0));
        }
    }

    #[test]
    fn prop_composed_gradients_match_finite_differences(
        b in 1usize..4, d in 2usize..5, h in 2usize..5, seed in 0u64..1000,
    ) {
        let inputs = [randn(&[b, d], seed), randn(&[h, d], seed + 1), randn(&[h], seed + 2), randn(&[h], seed + 3)];
        let err = max_grad_error(&inputs, 1e-5, |g, v| {
            let y = g.matmul_nt(v[0], v[1])?;
            let y = g.layernorm(y, v[2], v[3], 1e-5)?;
            let y = g.gelu(y);
            let y = g.softmax_rows(y)?;
            let t: Vec<usize> = (0..b).map(|i| i % h).collect();
            g.cross_entropy_label_smoothed(y, &t, 0.1)
        });
        prop_assert!(err <= 1e-4, "grad error {}", err);
    }

    #[test]
    fn prop_uniform_logits_loss_is_ln_c(c in 2usize..20, v in -50.0f64..50.0, eps in 0.0f64..0.99) {
        let logits = Tensor::full([2, c], v);
        let loss = ce(&logits, &[0, c - 1], eps);
        prop_assert!((loss - (c as f64).ln()).abs() <= 1e-9);
    }
}

#[test]
fn max_abs_diff_helper() {
    assert_eq!(max_abs_diff(&[1.0, 2.0], &[1.5, 2.0]), 0.5);
}
