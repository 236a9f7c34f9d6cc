mod common;

use std::time::Instant;

use common::{contexts, mechanisms, random_flows};
use csm_core::flows::{fit_normalisation, SPLINE_BOUND};
use csm_core::scm::CovariateRecord;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

#[test]
fn round_trip_over_ten_thousand_samples() {
    let start = Instant::now();
    let (store, flows) = random_flows(1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for m in mechanisms(&flows) {
        let mut worst = 0.0f64;
        for _ in 0..10_000 {
            let eps: f64 = StandardNormal.sample(&mut rng);
            let ctx = contexts(&mut rng, m.context_dim());
            let (value, hat) = m.forward(&store, eps, &ctx).unwrap();
            let (back, hat_back) = m.inverse(&store, value, &ctx).unwrap();
            worst = worst.max((back - eps).abs() / eps.abs().max(1.0));
            assert!((hat - hat_back).abs() < 1e-9);
        }
        assert!(worst < 1e-6, "{}: {worst:e}", m.node);
    }
    assert!(start.elapsed().as_secs_f64() < 60.0);
}

#[test]
fn log_det_matches_numerical_jacobian() {
    let (store, flows) = random_flows(3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let h = 1e-6;
    for m in mechanisms(&flows) {
        for _ in 0..500 {
            let mut eps: f64 = StandardNormal.sample(&mut rng);
            // Keep the stencil inside one spline bin.
            if (eps.abs() - SPLINE_BOUND).abs() < 1e-3 {
                eps += 1e-2;
            }
            let ctx = contexts(&mut rng, m.context_dim());
            let f = |e: f64| m.forward(&store, e, &ctx).unwrap().0;
            let fd = (f(eps + h) - f(eps - h)) / (2.0 * h);
            let analytic = m.log_abs_det_jacobian(&store, eps, &ctx).unwrap().exp();
            if (analytic - fd).abs() > 1e-4 * analytic {
                // A knot inside the stencil; a one-sided difference is exact
                // on each linear piece.
                let right = (f(eps + h) - f(eps)) / h;
                let left = (f(eps) - f(eps - h)) / h;
                let ok = [right, left].iter().any(|d| (analytic - d).abs() <= 1e-4 * analytic);
                assert!(ok, "{} at {eps}: {analytic} vs {fd}", m.node);
            }
        }
    }
}

#[test]
fn densities_integrate_to_one() {
    let (store, flows) = random_flows(5);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for m in mechanisms(&flows) {
        let ctx = contexts(&mut rng, m.context_dim());
        // Integrate over the image of eps in [-9, 9] with the trapezoid rule.
        let n = 40_000;
        let values: Vec<f64> = (0..=n)
            .map(|i| m.forward(&store, -9.0 + 18.0 * i as f64 / n as f64, &ctx).unwrap().0)
            .collect();
        let mass: f64 = values
            .windows(2)
            .map(|w| {
                let pa = m.log_prob(&store, w[0], &ctx).unwrap().exp();
                let pb = m.log_prob(&store, w[1], &ctx).unwrap().exp();
                0.5 * (pa + pb) * (w[1] - w[0])
            })
            .sum();
        assert!((mass - 1.0).abs() < 1e-4, "{}: {mass}", m.node);
    }
}

#[test]
fn mechanisms_are_monotone_increasing() {
    let (store, flows) = random_flows(7);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for m in mechanisms(&flows) {
        let ctx = contexts(&mut rng, m.context_dim());
        let values: Vec<f64> = (0..2000)
            .map(|i| m.forward(&store, -6.0 + 12.0 * i as f64 / 1999.0, &ctx).unwrap().0)
            .collect();
        assert!(values.windows(2).all(|w| w[1] > w[0]), "{}", m.node);
        assert!(values.iter().all(|&v| v > 0.0));
    }
}

#[test]
fn abduction_then_replay_is_exact_for_records() {
    let (store, mut flows) = random_flows(9);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let records: Vec<CovariateRecord> = (0..300)
        .map(|_| CovariateRecord {
            a: rng.random_range(45.0..80.0),
            s: if rng.random_bool(0.4) { 1.0 } else { 0.0 },
            b: rng.random_range(1.0e6..1.4e6),
            v: rng.random_range(3000.0..5000.0),
        })
        .collect();
    flows.fit_statistics(&records).unwrap();
    assert!((flows.sex.theta - records.iter().map(|r| r.s).sum::<f64>() / 300.0).abs() < 1e-15);
    for r in &records {
        let noise = flows.abduct(&store, r).unwrap();
        let h = flows.intermediates(r).unwrap();
        let (a, _) = flows.age.forward(&store, noise.eps_a, &[]).unwrap();
        let (b, _) = flows.brain.forward(&store, noise.eps_b, &[noise.eps_s, h.a_hat]).unwrap();
        let (v, _) = flows.structure.forward(&store, noise.eps_v, &[h.b_hat, h.a_hat]).unwrap();
        assert!((a - r.a).abs() <= 1e-9 * r.a);
        assert!((b - r.b).abs() <= 1e-9 * r.b);
        assert!((v - r.v).abs() <= 1e-9 * r.v);
        let terms = flows.log_prob_terms(&store, r).unwrap();
        assert!((terms.iter().sum::<f64>() - flows.log_evidence(&store, r).unwrap()).abs() < 1e-12);
    }
}

#[test]
fn normalisation_whitens_log_values() {
    let xs: Vec<f64> = (1..=100).map(|i| i as f64).collect();
    let n = fit_normalisation(&xs).unwrap();
    let white: Vec<f64> = xs.iter().map(|x| n.inverse(x.ln())).collect();
    let mean = white.iter().sum::<f64>() / 100.0;
    assert!(mean.abs() < 1e-12);
    for x in &xs {
        assert!((n.forward(n.inverse(x.ln())) - x.ln()).abs() < 1e-12);
    }
    assert!(fit_normalisation(&[1.0, -1.0]).is_err());
}
