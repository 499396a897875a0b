//! Synthetic datasets: circular 2-D Gaussians (full and gapped) and a conditional
//! multivariate Gaussian with its exact conditional law.

use std::f64::consts::{PI, TAU};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::rng;
use crate::tensor::Tensor;

/// Conditions and outputs, row-aligned.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub conditions: Tensor,
    pub outputs: Tensor,
}

impl LabeledDataset {
    pub fn new(conditions: Tensor, outputs: Tensor) -> Result<Self> {
        if conditions.rows() != outputs.rows() {
            return Err(Error::Shape(format!(
                "{} condition rows vs {} output rows",
                conditions.rows(),
                outputs.rows()
            )));
        }
        Ok(Self {
            conditions,
            outputs,
        })
    }

    pub fn len(&self) -> usize {
        self.conditions.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// CSV with header `x_1..x_p,y_1..y_q`.
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(w);
        let p = self.conditions.cols();
        let q = self.outputs.cols();
        let header: Vec<String> = (1..=p)
            .map(|i| format!("x_{i}"))
            .chain((1..=q).map(|i| format!("y_{i}")))
            .collect();
        wr.write_record(&header)?;
        for r in 0..self.len() {
            let rec: Vec<String> = self
                .conditions
                .row(r)
                .iter()
                .chain(self.outputs.row(r))
                .map(|v| v.to_string())
                .collect();
            wr.write_record(&rec)?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(r: R) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let header = rd.headers()?.clone();
        let p = header.iter().filter(|h| h.starts_with("x_")).count();
        let q = header.iter().filter(|h| h.starts_with("y_")).count();
        if p + q != header.len() || p == 0 || q == 0 {
            return Err(Error::Shape(format!("unexpected dataset header {header:?}")));
        }
        let (mut xs, mut ys) = (Vec::new(), Vec::new());
        let mut n = 0;
        for rec in rd.records() {
            let rec = rec?;
            for (i, field) in rec.iter().enumerate() {
                let v: f64 = field
                    .parse()
                    .map_err(|_| Error::Shape(format!("bad number {field:?} in row {n}")))?;
                if i < p {
                    xs.push(v);
                } else {
                    ys.push(v);
                }
            }
            n += 1;
        }
        Self::new(Tensor::from_vec(n, p, xs)?, Tensor::from_vec(n, q, ys)?)
    }
}

/// Mean and covariance of a Gaussian.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianSpec {
    pub mean: Vec<f64>,
    /// Row-major `d×d`.
    pub cov: Vec<f64>,
}

impl GaussianSpec {
    pub fn new(mean: Vec<f64>, cov: Vec<f64>) -> Result<Self> {
        let d = mean.len();
        if cov.len() != d * d {
            return Err(Error::Shape(format!("{d}-dim mean with {} covariance entries", cov.len())));
        }
        Ok(Self { mean, cov })
    }

    /// Isotropic `N(mean, s²·I)`.
    pub fn isotropic(mean: Vec<f64>, s: f64) -> Self {
        let d = mean.len();
        let cov = (0..d * d).map(|i| if i % (d + 1) == 0 { s * s } else { 0.0 }).collect();
        Self { mean, cov }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn cov_matrix(&self) -> DMatrix<f64> {
        let d = self.dim();
        DMatrix::from_row_slice(d, d, &self.cov)
    }

    /// `count` draws as rows.
    pub fn sample<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Result<Tensor> {
        let factor = linalg::psd_factor(&self.cov_matrix())?;
        let d = self.dim();
        let mut out = Tensor::zeros(count, d);
        for r in 0..count {
            let e = DVector::from_fn(d, |_, _| rng.sample(StandardNormal));
            let v = &factor * e;
            for (c, o) in out.row_mut(r).iter_mut().enumerate() {
                *o = self.mean[c] + v[c];
            }
        }
        Ok(out)
    }
}

/// Circle of Gaussians `y ~ N((R sin x, R cos x), σ̃² I)` indexed by the angle `x`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CircularSpec {
    pub radius: f64,
    pub sigma: f64,
    pub n_labels: usize,
    pub samples_per_label: usize,
    /// Angle intervals `[start, end)` with no training labels.
    #[serde(default)]
    pub gaps: Vec<(f64, f64)>,
}

impl Default for CircularSpec {
    fn default() -> Self {
        Self::full()
    }
}

impl CircularSpec {
    pub fn full() -> Self {
        Self {
            radius: 1.0,
            sigma: 0.2,
            n_labels: 120,
            samples_per_label: 10,
            gaps: Vec::new(),
        }
    }

    /// Three gaps of width π/12 centered at π/3, π and 5π/3.
    pub fn partial() -> Self {
        let w = PI / 12.0;
        let gaps = [PI / 3.0, PI, 5.0 * PI / 3.0]
            .iter()
            .map(|c| (c - w / 2.0, c + w / 2.0))
            .collect();
        Self {
            gaps,
            ..Self::full()
        }
    }

    /// Radius of the circle holding about 90% of each Gaussian's mass (2.15σ̃).
    pub fn hq_threshold(&self) -> f64 {
        2.15 * self.sigma
    }

    pub fn center(&self, angle: f64) -> [f64; 2] {
        [self.radius * angle.sin(), self.radius * angle.cos()]
    }

    pub fn true_conditional(&self, angle: f64) -> GaussianSpec {
        GaussianSpec::isotropic(self.center(angle).to_vec(), self.sigma)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.radius > 0.0) || !(self.sigma >= 0.0) || self.n_labels == 0 {
            return Err(Error::Config(format!("invalid circular spec {self:?}")));
        }
        let mut gaps = self.gaps.clone();
        gaps.sort_by(|a, b| a.0.total_cmp(&b.0));
        for (i, &(a, b)) in gaps.iter().enumerate() {
            if !(0.0 <= a && a < b && b <= TAU) {
                return Err(Error::Config(format!("gap [{a}, {b}) not inside [0, 2π)")));
            }
            if i > 0 && a < gaps[i - 1].1 {
                return Err(Error::Config("gaps overlap".into()));
            }
        }
        let covered: f64 = gaps.iter().map(|(a, b)| b - a).sum();
        if covered >= TAU - 1e-12 {
            return Err(Error::Config("gaps cover the whole circle".into()));
        }
        Ok(())
    }

    pub fn in_gap(&self, angle: f64) -> bool {
        self.gaps.iter().any(|&(a, b)| angle >= a && angle < b)
    }
}

/// Training and test angles. Without gaps the training angles are `2πi/n`; with gaps
/// they are spread evenly (by arc length) over the circle minus the gaps, half a step
/// in from each gap edge, and the gap midpoints are the test labels.
pub fn circular_labels(spec: &CircularSpec) -> Result<(Vec<f64>, Vec<f64>)> {
    spec.validate()?;
    let n = spec.n_labels;
    if spec.gaps.is_empty() {
        let train = (0..n).map(|i| TAU * i as f64 / n as f64).collect();
        return Ok((train, Vec::new()));
    }
    let mut gaps = spec.gaps.clone();
    gaps.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Arcs between consecutive gaps, walking around the circle from the first gap's end.
    let arcs: Vec<(f64, f64)> = (0..gaps.len())
        .map(|i| {
            let start = gaps[i].1;
            let mut end = gaps[(i + 1) % gaps.len()].0;
            if end <= start {
                end += TAU;
            }
            (start, end)
        })
        .collect();
    let total: f64 = arcs.iter().map(|(a, b)| b - a).sum();
    let step = total / n as f64;
    let mut train = Vec::with_capacity(n);
    for i in 0..n {
        let mut s = (i as f64 + 0.5) * step;
        for &(a, b) in &arcs {
            if s < b - a || (a, b) == *arcs.last().expect("non-empty") {
                train.push((a + s).rem_euclid(TAU));
                break;
            }
            s -= b - a;
        }
    }
    train.sort_by(f64::total_cmp);
    let test = spec.gaps.iter().map(|(a, b)| 0.5 * (a + b)).collect();
    Ok((train, test))
}

/// `samples_per_label` draws for every label.
pub fn sample_circular<R: Rng + ?Sized>(
    spec: &CircularSpec,
    labels: &[f64],
    rng: &mut R,
) -> Result<LabeledDataset> {
    let per = spec.samples_per_label;
    let n = labels.len() * per;
    let mut x = Tensor::zeros(n, 1);
    let mut y = Tensor::zeros(n, 2);
    let mut r = 0;
    for &angle in labels {
        let c = spec.center(angle);
        for _ in 0..per {
            x.set(r, 0, angle);
            for (j, cj) in c.iter().enumerate() {
                let e: f64 = rng.sample(StandardNormal);
                y.set(r, j, cj + spec.sigma * e);
            }
            r += 1;
        }
    }
    LabeledDataset::new(x, y)
}

/// Joint Gaussian over `k` dimensions: the first `p` are the condition, the rest the output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MvnSpec {
    pub k: usize,
    pub p: usize,
    pub mu: Vec<f64>,
    /// Row-major `k×k`.
    pub sigma: Vec<f64>,
}

impl MvnSpec {
    pub fn q(&self) -> usize {
        self.k - self.p
    }

    pub fn joint(&self) -> GaussianSpec {
        GaussianSpec {
            mean: self.mu.clone(),
            cov: self.sigma.clone(),
        }
    }

    fn sigma_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.k, self.k, &self.sigma)
    }

    /// Marginal of the condition block.
    pub fn condition_marginal(&self) -> GaussianSpec {
        let s = self.sigma_matrix();
        let sxx = s.view((0, 0), (self.p, self.p)).into_owned();
        GaussianSpec {
            mean: self.mu[..self.p].to_vec(),
            cov: linalg::to_row_major(&sxx),
        }
    }

    /// Marginal standard deviation of every coordinate.
    pub fn marginal_std(&self) -> Vec<f64> {
        (0..self.k).map(|i| self.sigma[i * self.k + i].max(0.0).sqrt()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.p == 0 || self.p >= self.k {
            return Err(Error::Config(format!("need 0 < p < k, got p={} k={}", self.p, self.k)));
        }
        if self.mu.len() != self.k || self.sigma.len() != self.k * self.k {
            return Err(Error::Shape("mean/covariance size does not match k".into()));
        }
        linalg::check_psd(&self.sigma_matrix(), 1e-10)
    }
}

/// Random parameters: `μ_i ~ U[10, 15]`; `Σ = c·A·Aᵀ` with `A_ij ~ U[−1, 1]` and `c`
/// chosen so the largest entry of `Σ` has magnitude 0.25.
pub fn make_mvn_params(k: usize, p: usize, seed: u64) -> Result<MvnSpec> {
    if k < 2 {
        return Err(Error::Config(format!("k must be >= 2, got {k}")));
    }
    let mut rng = rng::stream(seed, 0);
    let mu: Vec<f64> = (0..k).map(|_| rng.gen_range(10.0..=15.0)).collect();
    let a = DMatrix::from_fn(k, k, |_, _| rng.gen_range(-1.0..=1.0));
    let gram = &a * a.transpose();
    let max = gram.iter().fold(0.0f64, |m, v: &f64| m.max(v.abs()));
    let mut sigma = gram * (0.25 / max);
    sigma = (&sigma + sigma.transpose()) * 0.5;
    let sigma = linalg::clamp_psd(&sigma, 1e-12)?;
    // clamping can nudge entries; keep the range constraint exact
    let sigma = sigma.map(|v| v.clamp(-0.25, 0.25));
    let spec = MvnSpec {
        k,
        p,
        mu,
        sigma: linalg::to_row_major(&sigma),
    };
    spec.validate()?;
    Ok(spec)
}

/// `n` joint draws split into conditions (first `p`) and outputs.
pub fn sample_mvn<R: Rng + ?Sized>(spec: &MvnSpec, n: usize, rng: &mut R) -> Result<LabeledDataset> {
    spec.validate()?;
    let draws = spec.joint().sample(n, rng)?;
    let p = spec.p;
    let x = Tensor::from_fn(n, p, |r, c| draws.get(r, c));
    let y = Tensor::from_fn(n, spec.q(), |r, c| draws.get(r, p + c));
    LabeledDataset::new(x, y)
}

/// Law of the output block given the condition block equals `x`:
/// mean `μ_y + Σ_yx Σ_xx⁻¹ (x − μ_x)`, covariance `Σ_yy − Σ_yx Σ_xx⁻¹ Σ_xy`.
pub fn true_conditional(spec: &MvnSpec, x: &[f64]) -> Result<GaussianSpec> {
    let (p, k) = (spec.p, spec.k);
    if x.len() != p {
        return Err(Error::Shape(format!("condition of length {} for p={p}", x.len())));
    }
    let s = spec.sigma_matrix();
    let sxx = s.view((0, 0), (p, p)).into_owned();
    let syx = s.view((p, 0), (k - p, p)).into_owned();
    let syy = s.view((p, p), (k - p, k - p)).into_owned();
    let chol = match sxx.clone().cholesky() {
        Some(c) => c,
        None => (sxx + DMatrix::identity(p, p) * 1e-10)
            .cholesky()
            .ok_or_else(|| Error::Numerical("condition covariance is singular".into()))?,
    };
    let dx = DVector::from_fn(p, |i, _| x[i] - spec.mu[i]);
    let mean_shift = &syx * chol.solve(&dx);
    let gain = chol.solve(&syx.transpose());
    let cov = &syy - &syx * gain;
    let cov = (&cov + cov.transpose()) * 0.5;
    let mean = (0..k - p).map(|i| spec.mu[p + i] + mean_shift[i]).collect();
    Ok(GaussianSpec {
        mean,
        cov: linalg::to_row_major(&cov),
    })
}
