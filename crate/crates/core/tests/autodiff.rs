use std::collections::BTreeMap;

use evoloss::autodiff::{fd_check, fd_check_against, Graph};
use evoloss::rng;
use evoloss::tensor::Tensor;
use proptest::prelude::*;
use rand::Rng as _;

fn random(shape: &[usize], r: &mut evoloss::rng::Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn matmul_matches_triple_loop() {
    let mut r = rng::rng(11, &[]);
    let a = random(&[3, 4], &mut r);
    let b = random(&[4, 2], &mut r);
    let mut g = Graph::new();
    let (x, w) = (g.constant(a.clone()), g.constant(b.clone()));
    let y = g.matmul(x, w).unwrap();
    let mut expected = vec![0.0; 6];
    for i in 0..3 {
        for j in 0..2 {
            for k in 0..4 {
                expected[i * 2 + j] += a.data()[i * 4 + k] * b.data()[k * 2 + j];
            }
        }
    }
    assert_eq!(g.value(y).shape(), &[3, 2]);
    for (got, want) in g.value(y).data().iter().zip(&expected) {
        assert!((got - want).abs() < 1e-15, "{got} vs {want}");
    }
}

#[test]
fn mse_matches_element_loop() {
    let mut r = rng::rng(12, &[]);
    let (p, t) = (random(&[5, 7], &mut r), random(&[5, 7], &mut r));
    let oracle: f64 = p.data().iter().zip(t.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / 35.0;
    let mut g = Graph::new();
    let (a, b) = (g.constant(p), g.constant(t));
    let l = g.mse(a, b).unwrap();
    assert!((g.value(l).item() - oracle).abs() < 1e-12);

    let mut g = Graph::new();
    let (a, b) = (g.constant(Tensor::vector(vec![2.0])), g.constant(Tensor::vector(vec![0.0])));
    let l = g.mse(a, b).unwrap();
    assert_eq!(g.value(l).item(), 4.0);
}

fn bce(logits: &[f64], labels: &[f64]) -> f64 {
    let mut g = Graph::new();
    let x = g.constant(Tensor::vector(logits.to_vec()));
    let l = g.binary_ce(x, labels).unwrap();
    g.value(l).item()
}

#[test]
#[allow(clippy::excessive_precision)]
fn binary_ce_against_high_precision_values() {
    // reference values computed with 50-digit arithmetic
    let cases: [(&[f64], &[f64], f64); 4] = [
        (&[-3.7, 0.25, 12.0, -40.0, 1e-3], &[1.0, 0.0, 1.0, 0.0, 1.0], 1.048603143113208112),
        (
            &[-3.7, 0.25, 12.0, -40.0, 700.0, -999.0, 1e-3],
            &[1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 1.0],
            243.46328795936657722,
        ),
        (&[0.5, -0.5], &[1.0, 1.0], 0.72407698418010668087),
        (&[-50.0], &[0.0], 1.928749847963917783e-22),
    ];
    for (logits, labels, want) in cases {
        let got = bce(logits, labels);
        assert!(((got - want) / want).abs() < 1e-10, "{got} vs {want}");
    }
    assert!(bce(&[50.0], &[1.0]) < 1e-20);
    assert!((bce(&[0.0], &[1.0]) - std::f64::consts::LN_2).abs() < 1e-15);
}

#[test]
fn binary_ce_rejects_bad_labels() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::vector(vec![0.0, 1.0]));
    assert!(g.binary_ce(x, &[1.0, 0.5]).is_err());
}

#[test]
fn fd_exact_on_linear_loss() {
    let mut r = rng::rng(13, &[]);
    let mut g = Graph::new();
    let x = g.constant(random(&[4, 3], &mut r));
    let w = g.param(random(&[3, 2], &mut r));
    let y = g.matmul(x, w).unwrap();
    let l = g.sum(y).unwrap();
    assert!(fd_check(&g, l, 1e-5).unwrap() < 1e-9);
}

#[test]
fn fd_affine_relu_mse() {
    for seed in 0..20 {
        let mut r = rng::rng(14, &[seed]);
        let mut g = Graph::new();
        let x = g.constant(random(&[6, 5], &mut r));
        let w = g.param(random(&[5, 4], &mut r));
        let b = g.param(random(&[4], &mut r));
        let h = g.affine(x, w, b).unwrap();
        let h = g.relu(h).unwrap();
        let w2 = g.param(random(&[4, 3], &mut r));
        let b2 = g.param(random(&[3], &mut r));
        let y = g.affine(h, w2, b2).unwrap();
        let t = g.constant(random(&[6, 3], &mut r));
        let l = g.mse(y, t).unwrap();
        let err = fd_check(&g, l, 1e-5).unwrap();
        assert!(err < 1e-4, "seed {seed}: {err}");
    }
}

#[test]
fn fd_every_op() {
    for seed in 0..20 {
        let mut r = rng::rng(15, &[seed]);
        let mut g = Graph::new();
        let a = g.param(random(&[4, 3], &mut r));
        let b = g.param(random(&[4, 3], &mut r));
        let m = g.mul(a, b).unwrap();
        let s = g.sub(m, b).unwrap();
        let sc = g.scale(s, 1.7).unwrap();
        let sg = g.sigmoid(sc).unwrap();
        let mean = g.mean(sg).unwrap();
        let w = g.param(random(&[3, 1], &mut r));
        let logits = g.matmul(a, w).unwrap();
        let ce = g.binary_ce(logits, &[1.0, 0.0, 0.0, 1.0]).unwrap();
        let w3 = g.param(random(&[3, 3], &mut r));
        let z = g.matmul(b, w3).unwrap();
        let sce = g.softmax_ce(z, &[0, 2, 1, 2]).unwrap();
        let mc = g.margin_contrastive(a, b, 1.0).unwrap();
        let parts = [mean, ce, sce, mc];
        let mut total = parts[0];
        for p in &parts[1..] {
            total = g.add(total, *p).unwrap();
        }
        let err = fd_check(&g, total, 1e-5).unwrap();
        assert!(err < 1e-4, "seed {seed}: {err}");
    }
}

#[test]
fn fd_checker_catches_corrupted_gradient() {
    let mut r = rng::rng(16, &[]);
    let mut g = Graph::new();
    let x = g.constant(random(&[3, 2], &mut r));
    let w = g.param(random(&[2, 2], &mut r));
    let y = g.matmul(x, w).unwrap();
    let l = g.sum(y).unwrap();
    let mut grads: BTreeMap<_, _> = g.backward(l).unwrap();
    grads.get_mut(&w).unwrap().data_mut()[0] += 0.5;
    assert!(fd_check_against(&g, l, 1e-5, &grads).unwrap() > 1e-2);
}

#[test]
fn constant_loss_has_zero_gradients() {
    let mut g = Graph::new();
    let p = g.param(Tensor::vector(vec![1.0, 2.0]));
    let c = g.constant(Tensor::scalar(3.0));
    let grads = g.backward(c).unwrap();
    assert_eq!(grads[&p].data(), &[0.0, 0.0]);
}

#[test]
fn non_scalar_loss_is_rejected() {
    let mut g = Graph::new();
    let p = g.param(Tensor::vector(vec![1.0, 2.0]));
    assert!(g.backward(p).is_err());
}

proptest! {
    #[test]
    fn affine_is_linear_in_input(alpha in -3.0f64..3.0, seed in 0u64..1000) {
        let mut r = rng::rng(17, &[seed]);
        let (x, w, b) = (random(&[3, 4], &mut r), random(&[4, 2], &mut r), random(&[2], &mut r));
        let mut g = Graph::new();
        let xs = g.constant(x.map(|v| alpha * v));
        let (xn, wn, bn) = (g.constant(x), g.constant(w), g.constant(b.clone()));
        let scaled = g.affine(xs, wn, bn).unwrap();
        let plain = g.affine(xn, wn, bn).unwrap();
        for (i, (s, p)) in g.value(scaled).data().iter().zip(g.value(plain).data()).enumerate() {
            let bias = b.data()[i % 2];
            prop_assert!((s - (alpha * p - (alpha - 1.0) * bias)).abs() < 1e-12);
        }
    }

    #[test]
    fn relu_gradient_is_indicator(v in prop::collection::vec(-2.0f64..2.0, 1..12)) {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(v.clone()));
        let y = g.relu(x).unwrap();
        let l = g.sum(y).unwrap();
        let grads = g.backward(l).unwrap();
        for (gv, xv) in grads[&x].data().iter().zip(&v) {
            prop_assert_eq!(*gv, if *xv > 0.0 { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn forward_is_deterministic(seed in 0u64..1000) {
        let build = || {
            let mut r = rng::rng(18, &[seed]);
            let mut g = Graph::new();
            let x = g.constant(random(&[5, 3], &mut r));
            let w = g.param(random(&[3, 1], &mut r));
            let y = g.matmul(x, w).unwrap();
            let l = g.binary_ce(y, &[1.0, 0.0, 1.0, 1.0, 0.0]).unwrap();
            let grads = g.backward(l).unwrap();
            (g.value(l).item().to_bits(), grads[&w].data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
        };
        prop_assert_eq!(build(), build());
    }

    #[test]
    fn binary_ce_is_finite_for_large_logits(l in -1000.0f64..1000.0, label in 0u8..2) {
        let v = bce(&[l], &[f64::from(label)]);
        prop_assert!(v.is_finite() && v >= 0.0);
    }
}
