//! Conditional GAN objectives, the generator regularizers, and the training loop.
//!
//! The generator regularizer penalizes how fast `G(x, z)` moves when the condition
//! `x` moves with `z` held fixed. Two forms are provided:
//!
//! * [`gr_penalty_exact`]: batch mean of the Frobenius norm of `∂G/∂x`, with the
//!   Jacobian formed by central differences over the raw condition.
//! * [`gr_penalty_ratio`]: batch mean of `min(‖G(x+Δx,z) − G(x,z)‖ / ‖Δx‖, τ1)`.
//!
//! Both are evaluated at conditions interpolated between random pairs of training
//! conditions, so conditions that never appear in the training set are covered too.
//! No second-order derivatives are needed: every penalty is a function of extra
//! forward passes, differentiated once with respect to the network parameters.

use std::time::Instant;

use rand::seq::index;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::adam::{AdamConfig, AdamState};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Forward, MlpSpec, Mode, Network};
use crate::rng;
use crate::tensor::Tensor;

/// Probability clamp used inside every BCE logarithm.
pub const PROB_CLAMP: f64 = 1e-7;
/// Smallest perturbation norm the ratio penalty accepts.
pub const MIN_PERTURBATION_NORM: f64 = 1e-12;
const MAX_PERTURBATION_RETRIES: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LossKind {
    VanillaBce,
    WassersteinGp { gp_coeff: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RegForm {
    /// Jacobian Frobenius norm by central differences with step `h`.
    ExactFd { h: f64 },
    /// Finite-difference ratio with a random perturbation.
    Ratio,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Perturbation {
    SphereSurface { radius: f64 },
    GaussianIso { sigma: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionEncoding {
    Raw,
    /// A scalar angle `x` enters the networks as `(sin x, cos x)`.
    SinCos,
}

impl ConditionEncoding {
    pub fn encoded_dim(self, raw_dim: usize) -> usize {
        match self {
            Self::Raw => raw_dim,
            Self::SinCos => 2 * raw_dim,
        }
    }

    pub fn encode(self, x: &Tensor) -> Tensor {
        match self {
            Self::Raw => x.clone(),
            Self::SinCos => Tensor::from_fn(x.rows(), 2 * x.cols(), |r, c| {
                let v = x.get(r, c / 2);
                if c % 2 == 0 {
                    v.sin()
                } else {
                    v.cos()
                }
            }),
        }
    }
}

/// Training hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GanConfig {
    pub loss: LossKind,
    /// Regularization weight; 0 gives the unregularized baseline.
    pub lambda: f64,
    pub reg_form: RegForm,
    /// Cap on the ratio penalty; `None` means no cap.
    #[serde(default)]
    pub tau1: Option<f64>,
    #[serde(default = "default_tau2")]
    pub tau2: f64,
    pub perturbation: Perturbation,
    /// Evaluate the penalty at interpolated condition pairs (otherwise at the
    /// sampled training conditions).
    #[serde(default = "yes")]
    pub interpolate: bool,
    /// Use `-log D(G)` instead of the saturating `log(1 - D(G))` generator term.
    #[serde(default)]
    pub non_saturating: bool,
    /// Step of the finite-difference directional derivative in the critic penalty.
    #[serde(default = "default_gp_delta")]
    pub gp_delta: f64,
    pub n_critic: usize,
    pub batch_size: usize,
    pub iterations: usize,
    pub adam_g: AdamConfig,
    pub adam_d: AdamConfig,
    pub noise_dim: usize,
    pub seed: u64,
}

fn default_tau2() -> f64 {
    1e-6
}

fn default_gp_delta() -> f64 {
    1e-3
}

fn yes() -> bool {
    true
}

impl GanConfig {
    /// Circular 2-D Gaussians with the Jacobian penalty (λ = 0.02).
    pub fn circular(seed: u64) -> Self {
        Self {
            loss: LossKind::VanillaBce,
            lambda: 0.02,
            reg_form: RegForm::ExactFd { h: 1e-3 },
            tau1: None,
            tau2: default_tau2(),
            perturbation: Perturbation::SphereSurface { radius: 1e-3 },
            interpolate: true,
            non_saturating: false,
            gp_delta: default_gp_delta(),
            n_critic: 1,
            batch_size: 128,
            iterations: 6000,
            adam_g: AdamConfig::new(5e-5, 0.5, 0.999),
            adam_d: AdamConfig::new(5e-5, 0.5, 0.999),
            noise_dim: 2,
            seed,
        }
    }

    /// Multivariate Gaussian experiment: WGAN-GP critic, ratio penalty with λ = 1 and
    /// perturbations on the sphere of radius 0.1.
    pub fn mvn(q: usize, seed: u64) -> Self {
        Self {
            loss: LossKind::WassersteinGp { gp_coeff: 0.1 },
            lambda: 1.0,
            reg_form: RegForm::Ratio,
            tau1: None,
            tau2: default_tau2(),
            perturbation: Perturbation::SphereSurface { radius: 0.1 },
            interpolate: true,
            non_saturating: false,
            gp_delta: default_gp_delta(),
            n_critic: 1,
            batch_size: 256,
            iterations: 50_000,
            adam_g: AdamConfig::new(2e-5, 0.5, 0.9),
            adam_d: AdamConfig::new(2e-5, 0.5, 0.9),
            noise_dim: q,
            seed,
        }
    }

    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.lambda = lambda;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return bad(format!("lambda must be finite and >= 0, got {}", self.lambda));
        }
        if let RegForm::ExactFd { h } = self.reg_form {
            if !(h > 0.0) {
                return bad(format!("finite-difference step must be > 0, got {h}"));
            }
        }
        if let Some(t) = self.tau1 {
            if !(t > 0.0) {
                return bad(format!("tau1 must be > 0, got {t}"));
            }
        }
        if !(self.tau2 >= 0.0) {
            return bad(format!("tau2 must be >= 0, got {}", self.tau2));
        }
        match self.perturbation {
            Perturbation::SphereSurface { radius } if !(radius >= self.tau2 && radius > 0.0) => {
                return bad(format!("sphere radius {radius} below tau2 {}", self.tau2));
            }
            Perturbation::GaussianIso { sigma } if !(sigma > 0.0) => {
                return bad(format!("perturbation sigma must be > 0, got {sigma}"));
            }
            _ => {}
        }
        if let LossKind::WassersteinGp { gp_coeff } = self.loss {
            if !(gp_coeff >= 0.0) {
                return bad(format!("gradient penalty coefficient {gp_coeff} < 0"));
            }
        }
        if !(self.gp_delta > 0.0) {
            return bad("gp_delta must be > 0".into());
        }
        if self.n_critic == 0 || self.batch_size == 0 || self.noise_dim == 0 {
            return bad("n_critic, batch_size and noise_dim must be >= 1".into());
        }
        self.adam_g.validate()?;
        self.adam_d.validate()
    }
}

/// Anything that maps raw conditions and noise to outputs on a [`Graph`].
pub trait ConditionalGenerator {
    fn cond_dim(&self) -> usize;
    fn noise_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    /// Records `G(x, z)`; `x` holds raw (unencoded) conditions.
    fn record(
        &self,
        g: &mut Graph,
        x: &Tensor,
        z: &Tensor,
        mode: Mode,
        track_params: bool,
    ) -> Result<Forward>;
}

/// Generator network fed with `concat(z, encode(x))`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CondGenerator {
    pub net: Network,
    pub encoding: ConditionEncoding,
    pub cond_dim: usize,
    pub noise_dim: usize,
}

impl CondGenerator {
    pub fn new(net: Network, encoding: ConditionEncoding, cond_dim: usize, noise_dim: usize) -> Result<Self> {
        let want = noise_dim + encoding.encoded_dim(cond_dim);
        if net.input_dim() != want {
            return Err(Error::Shape(format!(
                "generator input width {} but noise {noise_dim} + encoded condition needs {want}",
                net.input_dim()
            )));
        }
        Ok(Self {
            net,
            encoding,
            cond_dim,
            noise_dim,
        })
    }

    fn input(&self, x: &Tensor, z: &Tensor) -> Result<Tensor> {
        if x.cols() != self.cond_dim || z.cols() != self.noise_dim || x.rows() != z.rows() {
            return Err(Error::Shape(format!(
                "generator got conditions {:?} and noise {:?}",
                x.shape(),
                z.shape()
            )));
        }
        Tensor::hstack(&[z, &self.encoding.encode(x)])
    }

    /// `G(x, z)` without recording a tape.
    pub fn forward(&self, x: &Tensor, z: &Tensor, mode: Mode) -> Result<Tensor> {
        self.net.forward(&self.input(x, z)?, mode)
    }
}

impl ConditionalGenerator for CondGenerator {
    fn cond_dim(&self) -> usize {
        self.cond_dim
    }

    fn noise_dim(&self) -> usize {
        self.noise_dim
    }

    fn output_dim(&self) -> usize {
        self.net.output_dim()
    }

    fn record(
        &self,
        g: &mut Graph,
        x: &Tensor,
        z: &Tensor,
        mode: Mode,
        track_params: bool,
    ) -> Result<Forward> {
        let input = g.constant(self.input(x, z)?);
        self.net.forward_graph(g, input, mode, track_params)
    }
}

/// Discriminator network fed with `concat(y, encode(x))`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CondDiscriminator {
    pub net: Network,
    pub encoding: ConditionEncoding,
    pub cond_dim: usize,
}

impl CondDiscriminator {
    pub fn new(net: Network, encoding: ConditionEncoding, cond_dim: usize) -> Result<Self> {
        if net.output_dim() != 1 {
            return Err(Error::Shape("discriminator must output one value".into()));
        }
        Ok(Self {
            net,
            encoding,
            cond_dim,
        })
    }

    /// Records `D(x, y)` where `y` is already on the graph.
    pub fn record(&self, g: &mut Graph, x: &Tensor, y: Var, track_params: bool) -> Result<Forward> {
        if x.cols() != self.cond_dim || x.rows() != g.value(y).rows() {
            return Err(Error::Shape(format!(
                "discriminator got conditions {:?} and samples {:?}",
                x.shape(),
                g.value(y).shape()
            )));
        }
        let enc = g.constant(self.encoding.encode(x));
        let input = g.concat_cols(&[y, enc])?;
        self.net.forward_graph(g, input, Mode::Train, track_params)
    }
}

/// Builds the generator/discriminator pair for a given architecture.
pub fn build_pair(
    g_spec: &MlpSpec,
    d_spec: &MlpSpec,
    encoding: ConditionEncoding,
    cond_dim: usize,
    noise_dim: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(CondGenerator, CondDiscriminator)> {
    let gen = CondGenerator::new(Network::new(g_spec, rng)?, encoding, cond_dim, noise_dim)?;
    let want = gen.output_dim() + encoding.encoded_dim(cond_dim);
    if d_spec.input_dim != want {
        return Err(Error::Shape(format!(
            "discriminator input width {} but sample + encoded condition needs {want}",
            d_spec.input_dim
        )));
    }
    let disc = CondDiscriminator::new(Network::new(d_spec, rng)?, encoding, cond_dim)?;
    Ok((gen, disc))
}

/// `x''_j = ε_j x_j + (1 − ε_j) x'_j` with one `ε_j ~ U[0, 1]` per row.
pub fn sample_interpolated_conditions<R: Rng + ?Sized>(
    x: &Tensor,
    x_prime: &Tensor,
    rng: &mut R,
) -> Result<Tensor> {
    let eps: Vec<f64> = (0..x.rows()).map(|_| rng.gen::<f64>()).collect();
    interpolate_with(x, x_prime, &eps)
}

/// Interpolation with explicit per-row weights.
pub fn interpolate_with(x: &Tensor, x_prime: &Tensor, eps: &[f64]) -> Result<Tensor> {
    if x.shape() != x_prime.shape() || eps.len() != x.rows() {
        return Err(Error::Shape(format!(
            "interpolating {:?} and {:?} with {} weights",
            x.shape(),
            x_prime.shape(),
            eps.len()
        )));
    }
    Ok(Tensor::from_fn(x.rows(), x.cols(), |r, c| {
        eps[r] * x.get(r, c) + (1.0 - eps[r]) * x_prime.get(r, c)
    }))
}

/// One perturbation vector `Δx` with `‖Δx‖ ≥ τ2`.
pub fn sample_perturbation<R: Rng + ?Sized>(
    dim: usize,
    law: Perturbation,
    tau2: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if dim == 0 {
        return Err(Error::Config("perturbation dimension must be >= 1".into()));
    }
    match law {
        Perturbation::SphereSurface { radius } => {
            if radius < tau2 {
                return Err(Error::Config(format!("sphere radius {radius} below tau2 {tau2}")));
            }
            Ok(rng::unit_sphere(dim, rng).into_iter().map(|v| v * radius).collect())
        }
        Perturbation::GaussianIso { sigma } => {
            for _ in 0..MAX_PERTURBATION_RETRIES {
                let v: Vec<f64> = (0..dim)
                    .map(|_| sigma * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                if norm(&v) >= tau2 {
                    return Ok(v);
                }
            }
            Err(Error::Numerical(format!(
                "no Gaussian perturbation with norm >= {tau2} after {MAX_PERTURBATION_RETRIES} draws"
            )))
        }
    }
}

/// A batch of perturbations, one per row.
pub fn sample_perturbations<R: Rng + ?Sized>(
    rows: usize,
    dim: usize,
    law: Perturbation,
    tau2: f64,
    rng: &mut R,
) -> Result<Tensor> {
    let mut data = Vec::with_capacity(rows * dim);
    for _ in 0..rows {
        data.extend(sample_perturbation(dim, law, tau2, rng)?);
    }
    Tensor::from_vec(rows, dim, data)
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

fn repeat_rows(t: &Tensor, times: usize) -> Tensor {
    let parts: Vec<&Tensor> = std::iter::repeat(t).take(times).collect();
    Tensor::vstack(&parts).expect("same width")
}

/// A penalty value on the graph plus the generator pass that produced it.
pub struct Penalty {
    pub value: Var,
    pub forward: Forward,
}

/// Batch mean of the Frobenius norm of the central-difference Jacobian of `G`
/// with respect to its raw condition.
///
/// All `2·p` shifted copies of the batch go through the generator as one batch in
/// train mode, so batch-norm layers see a single set of statistics.
pub fn gr_penalty_exact<G: ConditionalGenerator + ?Sized>(
    g: &mut Graph,
    gen: &G,
    x: &Tensor,
    z: &Tensor,
    h: f64,
    track_params: bool,
) -> Result<Penalty> {
    if !(h > 0.0) {
        return Err(Error::Config(format!("finite-difference step must be > 0, got {h}")));
    }
    let (m, p) = x.shape();
    let mut shifted = Vec::with_capacity(2 * p);
    for j in 0..p {
        for sign in [1.0, -1.0] {
            let mut s = x.clone();
            for r in 0..m {
                let v = s.get(r, j) + sign * h;
                s.set(r, j, v);
            }
            shifted.push(s);
        }
    }
    let refs: Vec<&Tensor> = shifted.iter().collect();
    let xs = Tensor::vstack(&refs)?;
    let zs = repeat_rows(z, 2 * p);
    let forward = gen.record(g, &xs, &zs, Mode::Train, track_params)?;
    let out = forward.output;

    let mut sq_norm: Option<Var> = None;
    for j in 0..p {
        let plus = g.slice_rows(out, 2 * j * m, (2 * j + 1) * m)?;
        let minus = g.slice_rows(out, (2 * j + 1) * m, (2 * j + 2) * m)?;
        let diff = g.sub(plus, minus)?;
        let col = g.scale(diff, 0.5 / h);
        let sq = g.mul(col, col)?;
        let s = g.row_sum(sq);
        sq_norm = Some(match sq_norm {
            None => s,
            Some(acc) => g.add(acc, s)?,
        });
    }
    let sq_norm = sq_norm.ok_or_else(|| Error::Shape("condition dimension is 0".into()))?;
    let fro = g.sqrt(sq_norm);
    let value = g.mean(fro);
    if !g.value(value).is_finite() {
        return Err(Error::NonFinite("Jacobian penalty".into()));
    }
    Ok(Penalty { value, forward })
}

/// Batch mean of `min(‖G(x+Δx, z) − G(x, z)‖ / ‖Δx‖, τ1)`.
pub fn gr_penalty_ratio<G: ConditionalGenerator + ?Sized>(
    g: &mut Graph,
    gen: &G,
    x: &Tensor,
    z: &Tensor,
    delta: &Tensor,
    tau1: Option<f64>,
    track_params: bool,
) -> Result<Penalty> {
    if delta.shape() != x.shape() {
        return Err(Error::Shape(format!(
            "perturbations {:?} for conditions {:?}",
            delta.shape(),
            x.shape()
        )));
    }
    let m = x.rows();
    let mut inv = Vec::with_capacity(m);
    for r in 0..m {
        let n = norm(delta.row(r));
        if !(n >= MIN_PERTURBATION_NORM) {
            return Err(Error::Numerical(format!(
                "perturbation norm {n} in row {r} is below the numeric floor"
            )));
        }
        inv.push(1.0 / n);
    }
    let mut moved = x.clone();
    moved.add_assign(delta);
    let xs = Tensor::vstack(&[&moved, x])?;
    let zs = repeat_rows(z, 2);
    let forward = gen.record(g, &xs, &zs, Mode::Train, track_params)?;
    let out = forward.output;
    let a = g.slice_rows(out, 0, m)?;
    let b = g.slice_rows(out, m, 2 * m)?;
    let diff = g.sub(a, b)?;
    let dist = g.row_norm(diff)?;
    let ratio = g.scale_rows(dist, inv)?;
    let capped = match tau1 {
        Some(t) => g.min_const(ratio, t),
        None => ratio,
    };
    let value = g.mean(capped);
    if !g.value(value).is_finite() {
        return Err(Error::NonFinite("ratio penalty".into()));
    }
    Ok(Penalty { value, forward })
}

fn clamped_log(g: &mut Graph, p: Var, complement: bool) -> Var {
    let c = g.clamp(p, PROB_CLAMP, 1.0 - PROB_CLAMP);
    let arg = if complement { g.affine(c, -1.0, 1.0) } else { c };
    g.log(arg)
}

/// Discriminator loss, already negated so that minimizing it trains the discriminator.
pub struct DiscriminatorLoss {
    pub value: Var,
    pub forward: Forward,
}

/// Inputs for the critic penalty of the Wasserstein loss.
pub struct CriticPenaltyDraws {
    /// Interpolation weight per row, `U[0,1]`.
    pub t: Vec<f64>,
    /// Unit direction per row in sample space.
    pub dir: Tensor,
}

impl CriticPenaltyDraws {
    pub fn sample<R: Rng + ?Sized>(rows: usize, dim: usize, rng: &mut R) -> Self {
        let t = (0..rows).map(|_| rng.gen::<f64>()).collect();
        let mut data = Vec::with_capacity(rows * dim);
        for _ in 0..rows {
            data.extend(rng::unit_sphere(dim, rng));
        }
        Self {
            t,
            dir: Tensor::from_vec(rows, dim, data).expect("shape"),
        }
    }
}

/// Loss for one discriminator update on real pairs `(x, y)` and fake pairs `(x, ŷ)`.
///
/// * `VanillaBce`: `−mean[log D(x,y)] − mean[log(1 − D(x,ŷ))]`.
/// * `WassersteinGp`: `mean D(x,ŷ) − mean D(x,y) + c·mean[(δ-directional slope − 1)²]`,
///   with the slope `(D(x,u+δv) − D(x,u))/δ` taken at `u = t·y + (1−t)·ŷ`.
pub fn discriminator_loss(
    g: &mut Graph,
    disc: &CondDiscriminator,
    x: &Tensor,
    y_real: &Tensor,
    y_fake: &Tensor,
    config: &GanConfig,
    gp: Option<&CriticPenaltyDraws>,
) -> Result<DiscriminatorLoss> {
    if y_real.shape() != y_fake.shape() || y_real.rows() != x.rows() {
        return Err(Error::Shape(format!(
            "real {:?} / fake {:?} / conditions {:?}",
            y_real.shape(),
            y_fake.shape(),
            x.shape()
        )));
    }
    let m = x.rows();
    match config.loss {
        LossKind::VanillaBce => {
            let ys = g.constant(Tensor::vstack(&[y_real, y_fake])?);
            let xs = repeat_rows(x, 2);
            let forward = disc.record(g, &xs, ys, true)?;
            let real = g.slice_rows(forward.output, 0, m)?;
            let fake = g.slice_rows(forward.output, m, 2 * m)?;
            let lr = clamped_log(g, real, false);
            let lf = clamped_log(g, fake, true);
            let mr = g.mean(lr);
            let mf = g.mean(lf);
            let s = g.add(mr, mf)?;
            let value = g.scale(s, -1.0);
            Ok(DiscriminatorLoss { value, forward })
        }
        LossKind::WassersteinGp { gp_coeff } => {
            let draws = gp.ok_or_else(|| {
                Error::Config("Wasserstein loss needs critic penalty draws".into())
            })?;
            let q = y_real.cols();
            if draws.t.len() != m || draws.dir.shape() != (m, q) {
                return Err(Error::Shape("critic penalty draws do not match the batch".into()));
            }
            let delta = config.gp_delta;
            let u = Tensor::from_fn(m, q, |r, c| {
                draws.t[r] * y_real.get(r, c) + (1.0 - draws.t[r]) * y_fake.get(r, c)
            });
            let u_moved = Tensor::from_fn(m, q, |r, c| u.get(r, c) + delta * draws.dir.get(r, c));
            let ys = g.constant(Tensor::vstack(&[y_real, y_fake, &u, &u_moved])?);
            let xs = repeat_rows(x, 4);
            let forward = disc.record(g, &xs, ys, true)?;
            let out = forward.output;
            let real = g.slice_rows(out, 0, m)?;
            let fake = g.slice_rows(out, m, 2 * m)?;
            let at_u = g.slice_rows(out, 2 * m, 3 * m)?;
            let at_moved = g.slice_rows(out, 3 * m, 4 * m)?;
            let mr = g.mean(real);
            let mf = g.mean(fake);
            let gap = g.sub(mf, mr)?;
            let rise = g.sub(at_moved, at_u)?;
            let dev = g.affine(rise, 1.0 / delta, -1.0);
            let sq = g.mul(dev, dev)?;
            let pen = g.mean(sq);
            let pen = g.scale(pen, gp_coeff);
            let value = g.add(gap, pen)?;
            Ok(DiscriminatorLoss { value, forward })
        }
    }
}

/// Loss for one generator update plus the passes needed to apply its gradient.
pub struct GeneratorLoss {
    pub total: Var,
    pub adversarial: Var,
    pub penalty: Option<Var>,
    /// Pass on the real conditions; its batch statistics feed the running estimates.
    pub adversarial_forward: Forward,
    pub penalty_forward: Option<Forward>,
}

/// Regularizer inputs for one generator step.
pub struct RegInputs<'a> {
    /// Conditions at which the penalty is evaluated (`x''`).
    pub x: &'a Tensor,
    /// Perturbations, required by the ratio form.
    pub delta: Option<&'a Tensor>,
}

/// Adversarial generator term plus `λ` times the selected penalty. With `λ = 0` the
/// penalty is not evaluated at all.
pub fn generator_loss(
    g: &mut Graph,
    gen: &CondGenerator,
    disc: &CondDiscriminator,
    x: &Tensor,
    z: &Tensor,
    reg: &RegInputs<'_>,
    config: &GanConfig,
) -> Result<GeneratorLoss> {
    let adversarial_forward = gen.record(g, x, z, Mode::Train, true)?;
    let d = disc.record(g, x, adversarial_forward.output, false)?;
    let adversarial = match config.loss {
        LossKind::VanillaBce if config.non_saturating => {
            let l = clamped_log(g, d.output, false);
            let mean = g.mean(l);
            g.scale(mean, -1.0)
        }
        LossKind::VanillaBce => {
            let l = clamped_log(g, d.output, true);
            g.mean(l)
        }
        LossKind::WassersteinGp { .. } => {
            let mean = g.mean(d.output);
            g.scale(mean, -1.0)
        }
    };
    if config.lambda == 0.0 {
        return Ok(GeneratorLoss {
            total: adversarial,
            adversarial,
            penalty: None,
            adversarial_forward,
            penalty_forward: None,
        });
    }
    let pen = match config.reg_form {
        RegForm::ExactFd { h } => gr_penalty_exact(g, gen, reg.x, z, h, true)?,
        RegForm::Ratio => {
            let delta = reg
                .delta
                .ok_or_else(|| Error::Config("ratio penalty needs perturbations".into()))?;
            gr_penalty_ratio(g, gen, reg.x, z, delta, config.tau1, true)?
        }
    };
    let weighted = g.scale(pen.value, config.lambda);
    let total = g.add(adversarial, weighted)?;
    Ok(GeneratorLoss {
        total,
        adversarial,
        penalty: Some(pen.value),
        adversarial_forward,
        penalty_forward: Some(pen.forward),
    })
}

/// One row of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iter: usize,
    /// Discriminator loss of the last critic update in this iteration.
    pub d_loss: f64,
    pub g_adv: f64,
    /// Unweighted penalty value (0 when the penalty is disabled).
    pub g_reg: f64,
    pub wall_ms: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub rows: Vec<LogRow>,
}

impl TrainingLog {
    pub const CSV_HEADER: &'static str = "iter,d_loss,g_adv,g_reg,wall_ms";

    pub fn csv_line(row: &LogRow) -> String {
        format!(
            "{},{},{},{},{}",
            row.iter, row.d_loss, row.g_adv, row.g_reg, row.wall_ms
        )
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&Self::csv_line(r));
            s.push('\n');
        }
        s
    }
}

/// Mutable training state: both networks, their optimizers, and the RNG stream.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainerState {
    pub generator: CondGenerator,
    pub discriminator: CondDiscriminator,
    pub opt_g: AdamState,
    pub opt_d: AdamState,
    pub rng: ChaCha8Rng,
    pub iteration: usize,
}

/// Options that do not change the learned parameters.
#[derive(Clone, Copy, Debug, Default)]
pub struct TrainOptions {
    /// Fill `wall_ms` with elapsed wall-clock time (otherwise 0 for reproducible logs).
    pub wall_clock: bool,
}

impl TrainerState {
    /// Fresh networks and optimizers, all drawn from the config seed.
    pub fn init(
        g_spec: &MlpSpec,
        d_spec: &MlpSpec,
        encoding: ConditionEncoding,
        cond_dim: usize,
        config: &GanConfig,
    ) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(config.seed, 0);
        let (generator, discriminator) =
            build_pair(g_spec, d_spec, encoding, cond_dim, config.noise_dim, &mut rng)?;
        Ok(Self {
            generator,
            discriminator,
            opt_g: AdamState::new(config.adam_g),
            opt_d: AdamState::new(config.adam_d),
            rng,
            iteration: 0,
        })
    }

    fn sample_batch(&mut self, data: &LabeledDataset, m: usize) -> (Tensor, Tensor) {
        let n = data.len();
        let idx: Vec<usize> = if m <= n {
            index::sample(&mut self.rng, n, m).into_vec()
        } else {
            (0..m).map(|_| self.rng.gen_range(0..n)).collect()
        };
        (
            data.conditions.select_rows(&idx),
            data.outputs.select_rows(&idx),
        )
    }

    fn noise(&mut self, rows: usize) -> Tensor {
        let l = self.generator.noise_dim;
        rng::normal_tensor(rows, l, &mut self.rng)
    }

    /// One discriminator update. Returns the loss value.
    pub fn discriminator_step(&mut self, data: &LabeledDataset, config: &GanConfig) -> Result<f64> {
        let m = config.batch_size;
        let (x, y) = self.sample_batch(data, m);
        let z = self.noise(m);
        let gp = match config.loss {
            LossKind::WassersteinGp { .. } => {
                Some(CriticPenaltyDraws::sample(m, y.cols(), &mut self.rng))
            }
            LossKind::VanillaBce => None,
        };
        let mut g = Graph::new();
        let fake_fwd = self.generator.record(&mut g, &x, &z, Mode::Train, false)?;
        let y_fake = g.value(fake_fwd.output).clone();
        self.generator.net.update_running_stats(&fake_fwd);

        let loss = discriminator_loss(
            &mut g,
            &self.discriminator,
            &x,
            &y,
            &y_fake,
            config,
            gp.as_ref(),
        )?;
        let value = g.value(loss.value).item()?;
        if !value.is_finite() {
            return Err(Error::NonFinite("discriminator loss".into()));
        }
        let grads = g.backward(loss.value)?;
        self.discriminator.net.zero_grad();
        self.discriminator.net.accumulate_grads(&grads, &loss.forward);
        self.opt_d.step_network(&mut self.discriminator.net)?;
        Ok(value)
    }

    /// One generator update. Returns `(adversarial term, unweighted penalty)`.
    pub fn generator_step(&mut self, data: &LabeledDataset, config: &GanConfig) -> Result<(f64, f64)> {
        let m = config.batch_size;
        let (x, _) = self.sample_batch(data, m);
        let (x_prime, _) = self.sample_batch(data, m);
        let z = self.noise(m);
        let eps: Vec<f64> = (0..m).map(|_| self.rng.gen::<f64>()).collect();
        let delta = match config.reg_form {
            RegForm::Ratio => Some(sample_perturbations(
                m,
                x.cols(),
                config.perturbation,
                config.tau2,
                &mut self.rng,
            )?),
            RegForm::ExactFd { .. } => None,
        };
        let x_reg = if config.interpolate {
            interpolate_with(&x, &x_prime, &eps)?
        } else {
            x.clone()
        };

        let mut g = Graph::new();
        let loss = generator_loss(
            &mut g,
            &self.generator,
            &self.discriminator,
            &x,
            &z,
            &RegInputs {
                x: &x_reg,
                delta: delta.as_ref(),
            },
            config,
        )?;
        let adv = g.value(loss.adversarial).item()?;
        let reg = match loss.penalty {
            Some(p) => g.value(p).item()?,
            None => 0.0,
        };
        let total = g.value(loss.total).item()?;
        if !total.is_finite() {
            return Err(Error::NonFinite("generator loss".into()));
        }
        let grads = g.backward(loss.total)?;
        let net = &mut self.generator.net;
        net.zero_grad();
        net.accumulate_grads(&grads, &loss.adversarial_forward);
        if let Some(f) = &loss.penalty_forward {
            net.accumulate_grads(&grads, f);
        }
        net.update_running_stats(&loss.adversarial_forward);
        self.opt_g.step_network(net)?;
        Ok((adv, reg))
    }

    /// Runs the remaining iterations up to `config.iterations`, calling `on_row` after
    /// each one.
    pub fn run(
        &mut self,
        data: &LabeledDataset,
        config: &GanConfig,
        opts: TrainOptions,
        mut on_row: impl FnMut(&LogRow) -> Result<()>,
    ) -> Result<TrainingLog> {
        config.validate()?;
        if data.is_empty() {
            return Err(Error::Config("training set is empty".into()));
        }
        if data.conditions.cols() != self.generator.cond_dim
            || data.outputs.cols() != self.generator.output_dim()
        {
            return Err(Error::Shape(format!(
                "dataset has {} condition / {} output columns, networks expect {} / {}",
                data.conditions.cols(),
                data.outputs.cols(),
                self.generator.cond_dim,
                self.generator.output_dim()
            )));
        }
        let start = Instant::now();
        let mut log = TrainingLog::default();
        while self.iteration < config.iterations {
            let k = self.iteration;
            let diverged = |e: Error| Error::Diverged {
                iteration: k,
                reason: e.to_string(),
            };
            let mut d_loss = f64::NAN;
            for _ in 0..config.n_critic {
                d_loss = self.discriminator_step(data, config).map_err(diverged)?;
            }
            let (g_adv, g_reg) = self.generator_step(data, config).map_err(diverged)?;
            let row = LogRow {
                iter: k,
                d_loss,
                g_adv,
                g_reg,
                wall_ms: if opts.wall_clock {
                    start.elapsed().as_millis() as u64
                } else {
                    0
                },
            };
            on_row(&row)?;
            log.rows.push(row);
            self.iteration += 1;
        }
        Ok(log)
    }
}

/// Trains a fresh generator/discriminator pair on `data`.
pub fn train(
    data: &LabeledDataset,
    g_spec: &MlpSpec,
    d_spec: &MlpSpec,
    config: &GanConfig,
    encoding: ConditionEncoding,
) -> Result<(TrainerState, TrainingLog)> {
    let mut state = TrainerState::init(g_spec, d_spec, encoding, data.conditions.cols(), config)?;
    let log = state.run(data, config, TrainOptions::default(), |_| Ok(()))?;
    Ok((state, log))
}

/// `count` samples `G(x, z_i)` with `z_i ~ N(0, I)`, batch norm in eval mode.
pub fn generate<R: Rng + ?Sized>(
    gen: &CondGenerator,
    x: &[f64],
    count: usize,
    rng: &mut R,
) -> Result<Tensor> {
    if x.len() != gen.cond_dim {
        return Err(Error::Shape(format!(
            "condition of length {} for a generator with {} condition dims",
            x.len(),
            gen.cond_dim
        )));
    }
    if count == 0 {
        return Ok(Tensor::zeros(0, gen.output_dim()));
    }
    let xs = Tensor::from_fn(count, x.len(), |_, c| x[c]);
    let z = rng::normal_tensor(count, gen.noise_dim, rng);
    gen.forward(&xs, &z, Mode::Eval)
}
