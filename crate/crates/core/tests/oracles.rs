mod common;

use nalgebra::DMatrix;
use rand::Rng;

use common::{circle_generator, empirical_w2, exact_mvn_generator, linear_generator, translation_generator};
use grcgan::data::{make_mvn_params, true_conditional};
use grcgan::gan::sample_perturbations;
use grcgan::metrics::{evaluate_circular, evaluate_mvn, evaluation_angles, lipschitz_audit, w2_gaussians};
use grcgan::{rng, CircularSpec, GaussianSpec, MvnSpec, Perturbation, Tensor};

fn g(mean: &[f64], cov: &[f64]) -> GaussianSpec {
    GaussianSpec::new(mean.to_vec(), cov.to_vec()).unwrap()
}

fn random_gaussian_2d<R: Rng>(r: &mut R, mean_scale: f64) -> GaussianSpec {
    let a: Vec<f64> = (0..4).map(|_| r.gen_range(-1.0..1.0)).collect();
    let cov = vec![
        a[0] * a[0] + a[1] * a[1] + 0.05,
        a[0] * a[2] + a[1] * a[3],
        a[0] * a[2] + a[1] * a[3],
        a[2] * a[2] + a[3] * a[3] + 0.05,
    ];
    let mean = vec![r.gen_range(-1.0..1.0) * mean_scale, r.gen_range(-1.0..1.0) * mean_scale];
    g(&mean, &cov)
}

#[test]
fn w2_hand_values() {
    let a = g(&[0.3, -1.2], &[1.0, 0.4, 0.4, 2.0]);
    assert!(w2_gaussians(&a, &a).unwrap() < 1e-9);

    let p = g(&[0.0, 0.0], &[0.0; 4]);
    let q = g(&[3.0, 4.0], &[0.0; 4]);
    assert!((w2_gaussians(&p, &q).unwrap() - 5.0).abs() < 1e-9);

    let i = g(&[1.0, 1.0], &[1.0, 0.0, 0.0, 1.0]);
    let four = g(&[1.0, 1.0], &[4.0, 0.0, 0.0, 4.0]);
    assert!((w2_gaussians(&i, &four).unwrap() - 2f64.sqrt()).abs() < 1e-9);
}

#[test]
fn assignment_solver_finds_the_optimum() {
    // brute force over all permutations of a 6x6 problem
    let mut r = rng::stream(11, 0);
    let n = 6;
    let cost: Vec<f64> = (0..n * n).map(|_| r.gen::<f64>()).collect();
    let m = common::assignment(&cost, n);
    let got: f64 = m.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum();
    let mut best = f64::INFINITY;
    let mut perm: Vec<usize> = (0..n).collect();
    permute(&mut perm, 0, &mut |p| {
        let c: f64 = p.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum();
        best = best.min(c);
    });
    assert!((got - best).abs() < 1e-12);
}

fn permute(v: &mut Vec<usize>, k: usize, f: &mut impl FnMut(&[usize])) {
    if k == v.len() {
        f(v);
        return;
    }
    for i in k..v.len() {
        v.swap(k, i);
        permute(v, k + 1, f);
        v.swap(k, i);
    }
}

#[test]
fn commuting_case_matches_empirical_transport() {
    let i = g(&[0.0, 0.0], &[1.0, 0.0, 0.0, 1.0]);
    let four = g(&[0.0, 0.0], &[4.0, 0.0, 0.0, 4.0]);
    let a = i.sample(2000, &mut rng::stream(5, 0)).unwrap();
    let b = four.sample(2000, &mut rng::stream(5, 1)).unwrap();
    let emp = empirical_w2(&a, &b);
    let exact = w2_gaussians(&i, &four).unwrap();
    assert!((emp - exact).abs() / exact < 0.05, "empirical {emp} vs {exact}");
}

#[test]
fn w2_matches_empirical_transport_on_random_pairs() {
    let mut r = rng::stream(2024, 0);
    for k in 0..3 {
        let a = random_gaussian_2d(&mut r, 1.5);
        let b = random_gaussian_2d(&mut r, 1.5);
        let exact = w2_gaussians(&a, &b).unwrap();
        let sa = a.sample(2000, &mut rng::stream(2024, 1 + 2 * k)).unwrap();
        let sb = b.sample(2000, &mut rng::stream(2024, 2 + 2 * k)).unwrap();
        let emp = empirical_w2(&sa, &sb);
        assert!((emp - exact).abs() / exact < 0.05, "pair {k}: empirical {emp} vs {exact}");
    }
}

#[test]
fn perturbations_are_centered() {
    let n = 100_000;
    for law in [
        Perturbation::SphereSurface { radius: 0.1 },
        Perturbation::GaussianIso { sigma: 0.1 },
    ] {
        let d = sample_perturbations(n, 3, law, 1e-6, &mut rng::stream(8, 0)).unwrap();
        for c in 0..3 {
            let col: Vec<f64> = (0..n).map(|r| d.get(r, c)).collect();
            let m = col.iter().sum::<f64>() / n as f64;
            let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1) as f64;
            let se = (var / n as f64).sqrt();
            assert!(m.abs() < 3.0 * se, "{law:?} column {c}: mean {m}, se {se}");
        }
    }
}

#[test]
fn perfect_circular_generator_converges() {
    let spec = CircularSpec::full();
    let gen = circle_generator(spec.radius, spec.sigma);
    let labels = evaluation_angles(36);
    let mut prev = f64::INFINITY;
    for n in [100, 1000, 10_000] {
        let (rep, _) = evaluate_circular(&gen, &labels, &spec, n, 3).unwrap();
        assert_eq!(rep.pct_recovered(), 100.0);
        let w2 = rep.mean_w2();
        assert!(w2 < prev, "W2 {w2} at n={n} not below {prev}");
        prev = w2;
    }
    assert!(prev < 0.01);
}

#[test]
fn collapsed_generator_is_high_quality_but_far_in_w2() {
    let spec = CircularSpec::full();
    let gen = circle_generator(spec.radius, 0.0);
    let (rep, _) = evaluate_circular(&gen, &evaluation_angles(360), &spec, 100, 4).unwrap();
    assert_eq!(rep.pct_high_quality(), 100.0);
    assert_eq!(rep.pct_recovered(), 100.0);
    let expected = spec.sigma * 2f64.sqrt();
    assert!((rep.mean_w2() - expected).abs() < 1e-6, "{} vs {expected}", rep.mean_w2());
}

#[test]
fn exact_mvn_generator_sits_at_the_sampling_floor() {
    let spec = make_mvn_params(10, 8, 17).unwrap();
    let gen = exact_mvn_generator(&spec);
    let small = evaluate_mvn(&gen, &spec, 30, 250, 1).unwrap();
    let large = evaluate_mvn(&gen, &spec, 30, 5000, 1).unwrap();
    assert!(large.mean_w2_exact() < small.mean_w2_exact());
    assert!(large.mean_w2() < small.mean_w2());
    // generated and true sets are exchangeable, so their distance matches the floor
    let ratio = small.mean_w2() / small.mean_floor();
    assert!((0.8..1.25).contains(&ratio), "w2 / floor = {ratio}");
    assert!(large.mean_w2_exact() < 0.01);
}

#[test]
fn independent_blocks_make_w2_label_free() {
    let (k, p) = (4, 2);
    let mut sigma = DMatrix::<f64>::zeros(k, k);
    sigma[(0, 0)] = 0.2;
    sigma[(0, 1)] = 0.05;
    sigma[(1, 0)] = 0.05;
    sigma[(1, 1)] = 0.1;
    sigma[(2, 2)] = 0.15;
    sigma[(2, 3)] = -0.04;
    sigma[(3, 2)] = -0.04;
    sigma[(3, 3)] = 0.08;
    let spec = MvnSpec {
        k,
        p,
        mu: vec![10.0, 11.0, 12.0, 13.0],
        sigma: grcgan::metrics::matrix_to_vec(&sigma),
    };
    let a = true_conditional(&spec, &[9.0, 9.0]).unwrap();
    let b = true_conditional(&spec, &[12.0, 10.5]).unwrap();
    assert!(w2_gaussians(&a, &b).unwrap() < 1e-9);

    // a generator that ignores x scores the same at every label, up to noise
    let wz = Tensor::from_vec(2, 2, vec![0.3, 0.0, 0.0, 0.2]).unwrap();
    let gen = linear_generator(&wz, &Tensor::zeros(2, 2), &[12.0, 13.0]);
    let rep = evaluate_mvn(&gen, &spec, 40, 250, 6).unwrap();
    let w: Vec<f64> = rep.rows.iter().map(|r| r.w2_exact).collect();
    let m = w.iter().sum::<f64>() / w.len() as f64;
    let sd = (w.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (w.len() - 1) as f64).sqrt();
    assert!(sd < 0.5 * m, "spread {sd} against mean {m}");
}

#[test]
fn translation_saturates_the_lipschitz_bound() {
    let gen = translation_generator(2);
    let audit = lipschitz_audit(&gen, &[0.5, -0.2], &[0.8, 0.2], 10_000, &mut rng::stream(9, 0)).unwrap();
    assert!((audit.k_hat - 1.0).abs() < 1e-12);
    assert!((audit.w2_fitted - 0.5).abs() < 1e-9);
    assert!(audit.bound_slack.abs() <= 2.0 * audit.w2_std_error + 1e-12);
}

#[test]
fn condition_free_generator_has_zero_lipschitz_estimate() {
    let wz = Tensor::identity(2);
    let gen = linear_generator(&wz, &Tensor::zeros(1, 2), &[1.0, -1.0]);
    let audit = lipschitz_audit(&gen, &[0.1], &[2.0], 500, &mut rng::stream(10, 0)).unwrap();
    assert_eq!(audit.k_hat, 0.0);
    assert!(audit.w2_fitted < 1e-9);
    assert!(audit.bound_slack <= 0.0 && audit.bound_slack > -1e-9);
}
