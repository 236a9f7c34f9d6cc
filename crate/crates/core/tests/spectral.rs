mod common;

use std::sync::Arc;
use std::time::Instant;

use csm_core::autodiff::Tape;
use csm_core::cohort::make_icosphere;
use common::{dense_normalised_laplacian, random_topology, spectral_oracle};
use csm_core::mesh::{cheb_conv, cheb_filter, gather_rows};
use ndarray::{Array2, Array3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn filter_matches_dense_spectral_oracle_on_random_graphs() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let t = random_topology(&mut rng);
        let n = t.vertex_count();
        let k = rng.random_range(1..=8);
        let (f_in, f_out) = (rng.random_range(1..=3), rng.random_range(1..=3));
        let x = Array2::from_shape_fn((n, f_in), |_| rng.random_range(-1.0..1.0));
        let theta = Array3::from_shape_fn((k, f_in, f_out), |_| rng.random_range(-1.0..1.0));
        let fast = cheb_filter(&t, x.view(), &theta).unwrap();
        let slow = spectral_oracle(&t, &x, &theta);
        let err = (&fast - &slow).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        worst = worst.max(err);
    }
    assert!(worst <= 1e-8, "max error {worst:e}");
    assert!(start.elapsed().as_secs_f64() < 30.0);
}

#[test]
fn power_iteration_bounds_the_dense_spectrum() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..50 {
        let t = random_topology(&mut rng);
        let top = dense_normalised_laplacian(&t)
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .fold(0.0f64, |m, &v| m.max(v));
        assert!(t.lambda_max() >= top - 1e-12);
        assert!(t.lambda_max() <= top * (1.0 + 1e-5) + 1e-12);
    }
}

#[test]
fn order_one_is_a_pointwise_linear_map() {
    let t = make_icosphere(1).topology().clone();
    let x = Array2::from_shape_fn((42, 2), |(i, j)| (i + 3 * j) as f64 * 0.1);
    let theta = Array3::from_shape_fn((1, 2, 3), |(_, i, j)| (i as f64) - (j as f64) * 0.5);
    let w = theta.index_axis(ndarray::Axis(0), 0).to_owned();
    assert_eq!(cheb_filter(&t, x.view(), &theta).unwrap(), x.dot(&w));
}

#[test]
fn shape_errors_are_reported() {
    let t = make_icosphere(0).topology().clone();
    let x = Array2::zeros((12, 2));
    assert!(cheb_filter(&t, x.view(), &Array3::zeros((0, 2, 1))).is_err());
    assert!(cheb_filter(&t, x.view(), &Array3::zeros((2, 3, 1))).is_err());
    assert!(cheb_filter(&t, Array2::zeros((11, 2)).view(), &Array3::zeros((2, 2, 1))).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn filter_is_linear_in_signal_and_weights(seed in 0u64..10_000, alpha in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = random_topology(&mut rng);
        let n = t.vertex_count();
        let k = rng.random_range(1..=6);
        let x1 = Array2::from_shape_fn((n, 2), |_| rng.random_range(-1.0..1.0));
        let x2 = Array2::from_shape_fn((n, 2), |_| rng.random_range(-1.0..1.0));
        let th1 = Array3::from_shape_fn((k, 2, 2), |_| rng.random_range(-1.0..1.0));
        let th2 = Array3::from_shape_fn((k, 2, 2), |_| rng.random_range(-1.0..1.0));
        let f = |x: &Array2<f64>, th: &Array3<f64>| cheb_filter(&t, x.view(), th).unwrap();

        let lhs = f(&(&x1 * alpha + &x2), &th1);
        let rhs = f(&x1, &th1) * alpha + f(&x2, &th1);
        prop_assert!((&lhs - &rhs).iter().all(|v| v.abs() < 1e-9));

        let lhs = f(&x1, &(&th1 * alpha + &th2));
        let rhs = f(&x1, &th1) * alpha + f(&x1, &th2);
        prop_assert!((&lhs - &rhs).iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn order_k_filter_reaches_only_k_minus_one_hops(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = random_topology(&mut rng);
        let n = t.vertex_count();
        let k = rng.random_range(1..=5);
        let source = rng.random_range(0..n);
        let mut x = Array2::zeros((n, 1));
        x[[source, 0]] = 1.0;
        let theta = Array3::from_shape_fn((k, 1, 1), |_| rng.random_range(0.5..1.5));
        let y = cheb_filter(&t, x.view(), &theta).unwrap();
        let nb = t.neighbours();
        let mut hops = vec![usize::MAX; n];
        hops[source] = 0;
        let mut frontier = vec![source];
        while let Some(v) = frontier.pop() {
            for &w in &nb[v] {
                if hops[w] > hops[v] + 1 {
                    hops[w] = hops[v] + 1;
                    frontier.push(w);
                }
            }
        }
        for i in 0..n {
            if hops[i] >= k {
                prop_assert_eq!(y[[i, 0]], 0.0);
            }
        }
    }
}

fn loss_and_grad(
    t: &Arc<csm_core::mesh::CsrMatrix>,
    x: &Array2<f64>,
    w: &Array2<f64>,
    k: usize,
    probe: &Array2<f64>,
) -> (f64, Array2<f64>, Array2<f64>) {
    let tape = Tape::new();
    let xv = tape.variable(x.clone());
    let wv = tape.variable(w.clone());
    let y = cheb_conv(&tape, t, xv, wv, k);
    let p = tape.constant(probe.clone());
    let loss = tape.sum(tape.mul(tape.square(y), p));
    let g = tape.backward(loss);
    (tape.scalar(loss), g.get(xv).unwrap().clone(), g.get(wv).unwrap().clone())
}

#[test]
fn cheb_conv_gradients_match_finite_differences() {
    let mesh = make_icosphere(1);
    let lap = mesh.topology().scale_laplacian();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (batch, f_in, f_out, k) = (2, 3, 2, 4);
    let x = Array2::from_shape_fn((batch * 42, f_in), |_| rng.random_range(-1.0..1.0));
    let w = Array2::from_shape_fn((k * f_in, f_out), |_| rng.random_range(-1.0..1.0));
    let probe = Array2::from_shape_fn((batch * 42, f_out), |_| rng.random_range(0.1..1.0));
    let (_, gx, gw) = loss_and_grad(&lap, &x, &w, k, &probe);
    let h = 1e-6;
    let check = |analytic: f64, plus: f64, minus: f64| {
        let fd = (plus - minus) / (2.0 * h);
        assert!((analytic - fd).abs() <= 1e-3 * fd.abs().max(1e-3), "{analytic} vs {fd}");
    };
    for idx in [(0, 0), (17, 2), (50, 1), (83, 0)] {
        let mut xp = x.clone();
        xp[idx] += h;
        let mut xm = x.clone();
        xm[idx] -= h;
        check(gx[idx], loss_and_grad(&lap, &xp, &w, k, &probe).0, loss_and_grad(&lap, &xm, &w, k, &probe).0);
    }
    for idx in [(0, 0), (5, 1), (11, 0)] {
        let mut wp = w.clone();
        wp[idx] += h;
        let mut wm = w.clone();
        wm[idx] -= h;
        check(gw[idx], loss_and_grad(&lap, &x, &wp, k, &probe).0, loss_and_grad(&lap, &x, &wm, k, &probe).0);
    }
}

#[test]
fn batched_conv_matches_single_filter() {
    let mesh = make_icosphere(1);
    let t = mesh.topology();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (f_in, f_out, k) = (2, 3, 3);
    let theta = Array3::from_shape_fn((k, f_in, f_out), |_| rng.random_range(-1.0..1.0));
    let x = Array2::from_shape_fn((84, f_in), |_| rng.random_range(-1.0..1.0));
    let tape = Tape::new();
    let w = theta.clone().into_shape_with_order((k * f_in, f_out)).unwrap();
    let y = cheb_conv(&tape, &t.scale_laplacian(), tape.constant(x.clone()), tape.constant(w), k);
    let y = tape.to_owned(y);
    for b in 0..2 {
        let xs = x.slice(ndarray::s![b * 42..(b + 1) * 42, ..]);
        let single = cheb_filter(t, xs, &theta).unwrap();
        let part = y.slice(ndarray::s![b * 42..(b + 1) * 42, ..]);
        assert!((&part - &single).iter().all(|v| v.abs() < 1e-12));
    }
}

#[test]
fn gather_rows_scatters_gradients_back() {
    let tape = Tape::new();
    let x = tape.variable(Array2::from_shape_fn((4, 2), |(i, j)| (i * 2 + j) as f64));
    let index = Arc::new(vec![3, 0, 3]);
    let y = gather_rows(&tape, x, &index, 4);
    assert_eq!(tape.value(y).row(0), tape.value(x).row(3));
    let g = tape.backward(tape.sum(y));
    let gx = g.get(x).unwrap();
    assert_eq!(gx.column(0).to_vec(), vec![1.0, 0.0, 0.0, 2.0]);
}
