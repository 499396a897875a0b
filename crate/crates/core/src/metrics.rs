//! Evaluation: Gaussian fits, the closed-form 2-Wasserstein distance between
//! Gaussians, sample-quality and mode-recovery scores, and an empirical check of the
//! Lipschitz bound `W2(G(x1,·), G(x2,·)) ≤ K·‖x1 − x2‖`.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{true_conditional, CircularSpec, GaussianSpec, MvnSpec};
use crate::error::{Error, Result};
use crate::gan::{generate, norm, CondGenerator, ConditionalGenerator};
use crate::graph::Graph;
use crate::linalg::{is_symmetric, to_row_major};
use crate::nn::Mode;
use crate::rng;
use crate::tensor::Tensor;

const EIG_CLAMP: f64 = 1e-10;

/// Sample mean and unbiased (divisor `n − 1`) covariance of the rows of `samples`.
pub fn gaussian_fit(samples: &Tensor) -> Result<GaussianSpec> {
    let (n, d) = samples.shape();
    if n < d + 1 {
        return Err(Error::Numerical(format!("{n} samples cannot fit a {d}-dim Gaussian")));
    }
    let mut mean = vec![0.0; d];
    for r in 0..n {
        for (m, v) in mean.iter_mut().zip(samples.row(r)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = vec![0.0; d * d];
    for r in 0..n {
        let row = samples.row(r);
        for i in 0..d {
            let di = row[i] - mean[i];
            for j in i..d {
                cov[i * d + j] += di * (row[j] - mean[j]);
            }
        }
    }
    let denom = (n - 1) as f64;
    for i in 0..d {
        for j in i..d {
            let v = cov[i * d + j] / denom;
            cov[i * d + j] = v;
            cov[j * d + i] = v;
        }
    }
    GaussianSpec::new(mean, cov)
}

/// Symmetric PSD square root through the eigendecomposition. Eigenvalues down to
/// `−1e-10` (relative to the largest) are treated as zero.
pub fn matrix_sqrt_psd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !m.is_square() {
        return Err(Error::Shape(format!("{}x{} matrix has no square root", m.nrows(), m.ncols())));
    }
    if !is_symmetric(m, 1e-9) {
        return Err(Error::Numerical("matrix square root of an asymmetric matrix".into()));
    }
    if m.nrows() == 0 {
        return Ok(m.clone());
    }
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let scale = eig.eigenvalues.iter().fold(1.0f64, |a, l| a.max(l.abs()));
    if let Some(l) = eig.eigenvalues.iter().find(|&&l| l < -EIG_CLAMP * scale) {
        return Err(Error::Numerical(format!("matrix is indefinite (eigenvalue {l})")));
    }
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    let v = &eig.eigenvectors;
    let s = v * DMatrix::from_diagonal(&roots) * v.transpose();
    Ok((&s + s.transpose()) * 0.5)
}

/// Closed-form square root of a 2×2 PSD matrix: `(M + √det·I) / √(tr + 2√det)`.
pub fn matrix_sqrt_2x2(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if m.shape() != (2, 2) {
        return Err(Error::Shape("closed-form square root needs a 2x2 matrix".into()));
    }
    let det = m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)];
    let s = det.max(0.0).sqrt();
    let t = (m.trace() + 2.0 * s).max(0.0).sqrt();
    if t == 0.0 {
        return Ok(DMatrix::zeros(2, 2));
    }
    Ok((m + DMatrix::identity(2, 2) * s) / t)
}

/// `W2² = ‖μ1 − μ2‖² + tr(Σ1 + Σ2 − 2(Σ2^½ Σ1 Σ2^½)^½)`, clamped at 0 before the root.
pub fn w2_gaussians(a: &GaussianSpec, b: &GaussianSpec) -> Result<f64> {
    let d = a.dim();
    if b.dim() != d {
        return Err(Error::Shape(format!("W2 between {d}-dim and {}-dim Gaussians", b.dim())));
    }
    let mean_sq: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y) * (x - y)).sum();
    let s1 = a.cov_matrix();
    let s2 = b.cov_matrix();
    let root2 = matrix_sqrt_psd(&s2)?;
    let inner = &root2 * &s1 * &root2;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross = matrix_sqrt_psd(&inner)?;
    let scale = s1.trace() + s2.trace();
    let mut spread = scale - 2.0 * cross.trace();
    // cancellation noise would otherwise survive the square root as ~1e-8
    if spread.abs() <= 64.0 * f64::EPSILON * scale {
        spread = 0.0;
    }
    Ok((mean_sq + spread).max(0.0).sqrt())
}

fn within(sample: &[f64], center: &[f64], threshold: f64) -> bool {
    let d2: f64 = sample.iter().zip(center).map(|(a, b)| (a - b) * (a - b)).sum();
    d2.sqrt() < threshold
}

/// Number of rows strictly closer than `threshold` to `center`.
pub fn high_quality_count(samples: &Tensor, center: &[f64], threshold: f64) -> Result<usize> {
    if !(threshold > 0.0) {
        return Err(Error::Config(format!("threshold must be > 0, got {threshold}")));
    }
    if samples.cols() != center.len() {
        return Err(Error::Shape("sample and center dimensions differ".into()));
    }
    Ok((0..samples.rows())
        .filter(|&r| within(samples.row(r), center, threshold))
        .count())
}

/// Fraction of rows strictly closer than `threshold` to `center`.
pub fn high_quality_fraction(samples: &Tensor, center: &[f64], threshold: f64) -> Result<f64> {
    if samples.rows() == 0 {
        return Err(Error::Shape("no samples".into()));
    }
    Ok(high_quality_count(samples, center, threshold)? as f64 / samples.rows() as f64)
}

/// Fraction of labels with at least one high-quality sample.
pub fn recovered_modes(per_label_hq_counts: &[usize]) -> f64 {
    if per_label_hq_counts.is_empty() {
        return 0.0;
    }
    let hit = per_label_hq_counts.iter().filter(|&&c| c >= 1).count();
    hit as f64 / per_label_hq_counts.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelReport {
    pub label: f64,
    pub hq_frac: f64,
    pub recovered: bool,
    pub w2: f64,
}

/// Per-label scores of one or more evaluation runs.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub rows: Vec<LabelReport>,
    pub repetitions: usize,
}

impl ExperimentReport {
    pub const CSV_HEADER: &'static str = "label,hq_frac,recovered,w2";

    /// Mean high-quality fraction in percent.
    pub fn pct_high_quality(&self) -> f64 {
        100.0 * mean(self.rows.iter().map(|r| r.hq_frac))
    }

    pub fn pct_recovered(&self) -> f64 {
        100.0 * mean(self.rows.iter().map(|r| if r.recovered { 1.0 } else { 0.0 }))
    }

    pub fn mean_w2(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.w2))
    }

    /// Concatenates reports from independent repetitions.
    pub fn merge(reports: &[ExperimentReport]) -> Self {
        Self {
            rows: reports.iter().flat_map(|r| r.rows.iter().copied()).collect(),
            repetitions: reports.iter().map(|r| r.repetitions).sum(),
        }
    }

    /// Per-label rows followed by a `summary` row of aggregates.
    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::CSV_HEADER);
        for r in &self.rows {
            s.push_str(&format!("{},{},{},{}\n", r.label, r.hq_frac, r.recovered as u8, r.w2));
        }
        s.push_str(&format!(
            "summary,{},{},{}\n",
            self.pct_high_quality() / 100.0,
            self.pct_recovered() / 100.0,
            self.mean_w2()
        ));
        s
    }
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

/// Samples generated at one evaluation label.
pub struct LabelSamples {
    pub label: f64,
    pub samples: Tensor,
}

/// Scores a generator on the circular task. Label `i` uses RNG stream `i` of `seed`.
pub fn evaluate_circular(
    gen: &CondGenerator,
    labels: &[f64],
    spec: &CircularSpec,
    n_per_label: usize,
    seed: u64,
) -> Result<(ExperimentReport, Vec<LabelSamples>)> {
    let threshold = spec.hq_threshold();
    let mut rows = Vec::with_capacity(labels.len());
    let mut dumps = Vec::with_capacity(labels.len());
    for (i, &label) in labels.iter().enumerate() {
        let mut r = rng::stream(seed, i as u64);
        let samples = generate(gen, &[label], n_per_label, &mut r)?;
        let center = spec.center(label);
        let hq = high_quality_count(&samples, &center, threshold)?;
        let fit = gaussian_fit(&samples)?;
        let w2 = w2_gaussians(&fit, &spec.true_conditional(label))?;
        rows.push(LabelReport {
            label,
            hq_frac: hq as f64 / n_per_label as f64,
            recovered: hq >= 1,
            w2,
        });
        dumps.push(LabelSamples { label, samples });
    }
    Ok((
        ExperimentReport {
            rows,
            repetitions: 1,
        },
        dumps,
    ))
}

/// `n` angles evenly spaced over `[0, 2π)`.
pub fn evaluation_angles(n: usize) -> Vec<f64> {
    (0..n).map(|i| std::f64::consts::TAU * i as f64 / n as f64).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MvnLabelReport {
    pub label: Vec<f64>,
    /// W2 between Gaussian fits of generated and true conditional samples.
    pub w2: f64,
    /// W2 between the fit of generated samples and the exact conditional law.
    pub w2_exact: f64,
    /// W2 between fits of two independent true sample sets (finite-sample floor).
    pub w2_floor: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MvnReport {
    pub rows: Vec<MvnLabelReport>,
}

impl MvnReport {
    pub const CSV_HEADER: &'static str = "label,w2,w2_exact,w2_floor";

    pub fn mean_w2(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.w2))
    }

    pub fn mean_w2_exact(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.w2_exact))
    }

    pub fn mean_floor(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.w2_floor))
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::CSV_HEADER);
        for (i, r) in self.rows.iter().enumerate() {
            s.push_str(&format!("{i},{},{},{}\n", r.w2, r.w2_exact, r.w2_floor));
        }
        s.push_str(&format!(
            "summary,{},{},{}\n",
            self.mean_w2(),
            self.mean_w2_exact(),
            self.mean_floor()
        ));
        s
    }
}

/// Scores a generator on the multivariate Gaussian task: labels are drawn from the
/// condition marginal, and at each label `n_per_label` generated samples are compared
/// with as many draws from the true conditional.
pub fn evaluate_mvn(
    gen: &CondGenerator,
    spec: &MvnSpec,
    n_labels: usize,
    n_per_label: usize,
    seed: u64,
) -> Result<MvnReport> {
    let labels = spec.condition_marginal().sample(n_labels, &mut rng::stream(seed, 0))?;
    let labels: Vec<Vec<f64>> = (0..n_labels).map(|i| labels.row(i).to_vec()).collect();
    evaluate_mvn_at(gen, spec, &labels, n_per_label, seed)
}

/// [`evaluate_mvn`] at explicit labels.
pub fn evaluate_mvn_at(
    gen: &CondGenerator,
    spec: &MvnSpec,
    labels: &[Vec<f64>],
    n_per_label: usize,
    seed: u64,
) -> Result<MvnReport> {
    let mut rows = Vec::with_capacity(labels.len());
    for (i, x) in labels.iter().enumerate() {
        let base = 1 + 3 * i as u64;
        let truth = true_conditional(spec, x)?;
        let fake = generate(gen, x, n_per_label, &mut rng::stream(seed, base))?;
        let real = truth.sample(n_per_label, &mut rng::stream(seed, base + 1))?;
        let real2 = truth.sample(n_per_label, &mut rng::stream(seed, base + 2))?;
        let fake_fit = gaussian_fit(&fake)?;
        let real_fit = gaussian_fit(&real)?;
        rows.push(MvnLabelReport {
            label: x.clone(),
            w2: w2_gaussians(&fake_fit, &real_fit)?,
            w2_exact: w2_gaussians(&fake_fit, &truth)?,
            w2_floor: w2_gaussians(&gaussian_fit(&real2)?, &real_fit)?,
        });
    }
    Ok(MvnReport { rows })
}

/// Labels `μ_x + c·σ_x` for `c ∈ {−0.5, −0.25, 0, 0.25, 0.5}`.
pub fn mvn_panel_labels(spec: &MvnSpec) -> Vec<Vec<f64>> {
    let sd = spec.marginal_std();
    [-0.5, -0.25, 0.0, 0.25, 0.5]
        .iter()
        .map(|c| (0..spec.p).map(|i| spec.mu[i] + c * sd[i]).collect())
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LipschitzAudit {
    pub x1: Vec<f64>,
    pub x2: Vec<f64>,
    /// Largest `‖G(x1,z) − G(x2,z)‖ / ‖x1 − x2‖` over the shared noise draws.
    pub k_hat: f64,
    /// W2 between Gaussian fits of `G(x1,·)` and `G(x2,·)`.
    pub w2_fitted: f64,
    /// Bootstrap standard error of `w2_fitted`.
    pub w2_std_error: f64,
    /// `k_hat·‖x1 − x2‖ − w2_fitted`; non-negative when the bound holds.
    pub bound_slack: f64,
}

const BOOTSTRAP_ROUNDS: usize = 100;

/// Empirical check of the Lipschitz bound with `n_z` shared noise draws.
pub fn lipschitz_audit<G: ConditionalGenerator + ?Sized, R: Rng + ?Sized>(
    gen: &G,
    x1: &[f64],
    x2: &[f64],
    n_z: usize,
    rng: &mut R,
) -> Result<LipschitzAudit> {
    let p = gen.cond_dim();
    if x1.len() != p || x2.len() != p {
        return Err(Error::Shape(format!("conditions must have length {p}")));
    }
    let dist = norm(&x1.iter().zip(x2).map(|(a, b)| a - b).collect::<Vec<_>>());
    if dist == 0.0 {
        return Err(Error::Config("audit needs two distinct conditions".into()));
    }
    if n_z < 2 {
        return Err(Error::Config("audit needs at least two noise draws".into()));
    }
    let z = rng::normal_tensor(n_z, gen.noise_dim(), rng);
    let outputs = |x: &[f64]| -> Result<Tensor> {
        let xs = Tensor::from_fn(n_z, p, |_, c| x[c]);
        let mut g = Graph::new();
        let f = gen.record(&mut g, &xs, &z, Mode::Eval, false)?;
        Ok(g.value(f.output).clone())
    };
    let a = outputs(x1)?;
    let b = outputs(x2)?;
    let k_hat = (0..n_z)
        .map(|r| {
            let d: Vec<f64> = a.row(r).iter().zip(b.row(r)).map(|(u, v)| u - v).collect();
            norm(&d) / dist
        })
        .fold(0.0, f64::max);
    let w2_fitted = w2_gaussians(&gaussian_fit(&a)?, &gaussian_fit(&b)?)?;

    let mut boot = Vec::with_capacity(BOOTSTRAP_ROUNDS);
    for _ in 0..BOOTSTRAP_ROUNDS {
        let idx: Vec<usize> = (0..n_z).map(|_| rng.gen_range(0..n_z)).collect();
        let fa = gaussian_fit(&a.select_rows(&idx))?;
        let fb = gaussian_fit(&b.select_rows(&idx))?;
        boot.push(w2_gaussians(&fa, &fb)?);
    }
    let bm = boot.iter().sum::<f64>() / boot.len() as f64;
    let var = boot.iter().map(|v| (v - bm) * (v - bm)).sum::<f64>() / (boot.len() - 1) as f64;

    Ok(LipschitzAudit {
        x1: x1.to_vec(),
        x2: x2.to_vec(),
        k_hat,
        w2_fitted,
        w2_std_error: var.sqrt(),
        bound_slack: k_hat * dist - w2_fitted,
    })
}

/// Row-major copy of a Gaussian's covariance as a matrix (for callers outside the crate).
pub fn cov_to_matrix(g: &GaussianSpec) -> DMatrix<f64> {
    g.cov_matrix()
}

/// Row-major buffer of a matrix.
pub fn matrix_to_vec(m: &DMatrix<f64>) -> Vec<f64> {
    to_row_major(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn g(mean: &[f64], cov: &[f64]) -> GaussianSpec {
        GaussianSpec::new(mean.to_vec(), cov.to_vec()).unwrap()
    }

    #[test]
    fn fit_identical_and_two_points() {
        let same = Tensor::from_rows(&[[1.0, 2.0], [1.0, 2.0], [1.0, 2.0]]).unwrap();
        let f = gaussian_fit(&same).unwrap();
        assert_eq!(f.mean, vec![1.0, 2.0]);
        assert_eq!(f.cov, vec![0.0; 4]);

        // (0,0), (2,0), and a third point to meet n ≥ d+1 ... two points only fit d=1
        let two = Tensor::from_rows(&[[0.0], [2.0]]).unwrap();
        let f = gaussian_fit(&two).unwrap();
        assert_eq!(f.mean, vec![1.0]);
        assert_eq!(f.cov, vec![2.0]);
        assert!(gaussian_fit(&Tensor::from_rows(&[[0.0, 0.0], [2.0, 0.0]]).unwrap()).is_err());
    }

    #[test]
    fn sqrt_known_cases() {
        let i = DMatrix::<f64>::identity(3, 3);
        assert!((matrix_sqrt_psd(&i).unwrap() - &i).amax() < 1e-15);
        let d = DMatrix::from_row_slice(2, 2, &[4.0, 0.0, 0.0, 9.0]);
        let s = matrix_sqrt_psd(&d).unwrap();
        assert!((s - DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 3.0])).amax() < 1e-14);
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(matrix_sqrt_psd(&asym).is_err());
        let indef = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(matrix_sqrt_psd(&indef).is_err());
    }

    #[test]
    fn closed_form_2x2_matches_eigen_path() {
        let mut r = rng::stream(11, 0);
        for _ in 0..100 {
            let a = DMatrix::from_fn(2, 2, |_, _| r.gen_range(-2.0..2.0));
            let m = &a * a.transpose();
            let e = matrix_sqrt_psd(&m).unwrap();
            let c = matrix_sqrt_2x2(&m).unwrap();
            assert!((&e - &c).amax() < 1e-10);
            assert!((&e * &e - &m).amax() < 1e-10);
        }
    }

    #[test]
    fn w2_hand_values() {
        let a = g(&[0.0, 0.0], &[1.0, 0.0, 0.0, 1.0]);
        assert!(w2_gaussians(&a, &a).unwrap() < 1e-12);
        let p0 = g(&[0.0, 0.0], &[0.0; 4]);
        let p1 = g(&[3.0, 4.0], &[0.0; 4]);
        assert!((w2_gaussians(&p0, &p1).unwrap() - 5.0).abs() < 1e-12);
        let b = g(&[0.0, 0.0], &[4.0, 0.0, 0.0, 4.0]);
        assert!((w2_gaussians(&a, &b).unwrap() - 2f64.sqrt()).abs() < 1e-12);
        assert!(w2_gaussians(&a, &g(&[0.0], &[1.0])).is_err());
    }

    #[test]
    fn hq_strict_threshold() {
        let s = Tensor::from_rows(&[[0.0, 1.0], [0.43, 1.0], [0.3, 1.3]]).unwrap();
        assert_eq!(high_quality_count(&s, &[0.0, 1.0], 0.43).unwrap(), 2);
        assert!((high_quality_fraction(&s, &[0.0, 1.0], 0.43).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!(high_quality_fraction(&Tensor::zeros(0, 2), &[0.0, 0.0], 0.43).is_err());
        assert!(high_quality_count(&s, &[0.0, 1.0], 0.0).is_err());
    }

    #[test]
    fn recovered_mode_counting() {
        assert_eq!(recovered_modes(&[1, 5, 100]), 1.0);
        assert_eq!(recovered_modes(&[0, 0, 0]), 0.0);
        let mut counts = vec![3usize; 360];
        counts[17] = 0;
        assert!((recovered_modes(&counts) - 359.0 / 360.0).abs() < 1e-15);
    }

    #[test]
    fn report_aggregates() {
        let rep = ExperimentReport {
            rows: vec![
                LabelReport { label: 0.0, hq_frac: 1.0, recovered: true, w2: 0.1 },
                LabelReport { label: 1.0, hq_frac: 0.5, recovered: false, w2: 0.3 },
            ],
            repetitions: 1,
        };
        assert!((rep.pct_high_quality() - 75.0).abs() < 1e-12);
        assert!((rep.pct_recovered() - 50.0).abs() < 1e-12);
        assert!((rep.mean_w2() - 0.2).abs() < 1e-12);
        let csv = rep.to_csv();
        assert!(csv.starts_with("label,hq_frac,recovered,w2\n0,1,1,0.1\n"));
        assert!(csv.ends_with("summary,0.75,0.5,0.2\n"));
        assert_eq!(ExperimentReport::merge(&[rep.clone(), rep]).repetitions, 2);
    }
}
