//! Finite-difference checks of the reverse-mode gradients.
//!
//! Each check builds a scalar loss from a small network, backpropagates it, and
//! compares every parameter gradient with a central difference of the same loss.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::GaussianSpec;
use crate::error::Result;
use crate::gan::{
    discriminator_loss, generator_loss, gr_penalty_exact, gr_penalty_ratio, sample_perturbations,
    CondDiscriminator, CondGenerator, ConditionEncoding, CriticPenaltyDraws, GanConfig, LossKind,
    Perturbation, RegForm, RegInputs,
};
use crate::graph::{Graph, Var};
use crate::nn::{Activation, Forward, HiddenLayer, MlpSpec, Mode, Network};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub h: f64,
    /// Tolerance for plain layer and loss checks.
    pub param_tol: f64,
    /// Tolerance for the generator penalties.
    pub penalty_tol: f64,
    /// Perturb every analytic gradient before comparing (negative control).
    pub corrupt_backward: bool,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            h: 1e-5,
            param_tol: 1e-4,
            penalty_tol: 1e-3,
            corrupt_backward: false,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub params: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Floor of the relative-error denominator; below it the error is effectively absolute.
const REL_FLOOR: f64 = 1e-5;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares `analytic[i]` against `numeric(i)` for every index. An empty parameter
/// set passes.
pub fn compare(
    name: &str,
    analytic: &[f64],
    tolerance: f64,
    mut numeric: impl FnMut(usize) -> Result<f64>,
) -> Result<CheckResult> {
    let mut worst = 0.0f64;
    for (i, &a) in analytic.iter().enumerate() {
        let n = numeric(i)?;
        let e = relative_error(a, n);
        worst = if e.is_nan() { f64::INFINITY } else { worst.max(e) };
    }
    Ok(CheckResult {
        name: name.to_string(),
        params: analytic.len(),
        max_rel_error: worst,
        tolerance,
        passed: worst < tolerance,
    })
}

fn set_flat(net: &mut Network, mut i: usize, v: f64) {
    for p in net.params_mut() {
        let n = p.value.len();
        if i < n {
            p.value.data_mut()[i] = v;
            return;
        }
        i -= n;
    }
    panic!("parameter index out of range");
}

fn corrupt(grads: &mut [f64]) {
    for g in grads.iter_mut() {
        *g = *g * 1.01 + 1e-3;
    }
}

type LossFn<'a, T> = dyn Fn(&T, &mut Graph, bool) -> Result<(Var, Vec<Forward>)> + 'a;

/// Checks the gradient of `loss` with respect to the parameters of the network that
/// `net_of` selects inside `subject`.
fn check_subject<T>(
    name: &str,
    subject: &mut T,
    net_of: fn(&mut T) -> &mut Network,
    tolerance: f64,
    opts: &GradCheckOptions,
    loss: &LossFn<'_, T>,
) -> Result<CheckResult> {
    let mut g = Graph::new();
    let (l, fwds) = loss(subject, &mut g, true)?;
    let grads = g.backward(l)?;
    let net = net_of(subject);
    net.zero_grad();
    for f in &fwds {
        net.accumulate_grads(&grads, f);
    }
    let mut analytic = net.flat_grads();
    if opts.corrupt_backward {
        corrupt(&mut analytic);
    }
    let base = net.flat_params();
    let h = opts.h;
    let eval = |s: &mut T, i: usize, v: f64| -> Result<f64> {
        set_flat(net_of(s), i, v);
        let mut g = Graph::new();
        let (l, _) = loss(s, &mut g, false)?;
        g.value(l).item()
    };
    let result = compare(name, &analytic, tolerance, |i| {
        let plus = eval(subject, i, base[i] + h)?;
        let minus = eval(subject, i, base[i] - h)?;
        set_flat(net_of(subject), i, base[i]);
        Ok((plus - minus) / (2.0 * h))
    });
    result
}

fn net_itself(n: &mut Network) -> &mut Network {
    n
}

fn gen_net(p: &mut (CondGenerator, CondDiscriminator)) -> &mut Network {
    &mut p.0.net
}

fn disc_net(p: &mut (CondGenerator, CondDiscriminator)) -> &mut Network {
    &mut p.1.net
}

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    rng::normal_tensor(rows, cols, rng)
}

/// Checks one network on `sum(W ⊙ net(input))` for a fixed random `W`.
fn check_layer(
    name: &str,
    spec: MlpSpec,
    mode: Mode,
    opts: &GradCheckOptions,
    rng: &mut ChaCha8Rng,
) -> Result<CheckResult> {
    let mut net = Network::new(&spec, rng)?;
    let input = random(8, spec.input_dim, rng);
    if mode == Mode::Eval {
        // move the running statistics away from their initial values
        let mut g = Graph::new();
        let x = g.constant(random(16, spec.input_dim, rng).map(|v| 2.0 * v + 0.5));
        let f = net.forward_graph(&mut g, x, Mode::Train, false)?;
        net.update_running_stats(&f);
    }
    let w = random(8, spec.output_dim, rng);
    let loss = move |n: &Network, g: &mut Graph, track: bool| {
        let x = g.constant(input.clone());
        let f = n.forward_graph(g, x, mode, track)?;
        let wv = g.constant(w.clone());
        let prod = g.mul(f.output, wv)?;
        Ok((g.sum(prod), vec![f]))
    };
    check_subject(name, &mut net, net_itself, opts.param_tol, opts, &loss)
}

fn hidden(width: usize, activation: Activation, batch_norm: bool) -> HiddenLayer {
    HiddenLayer {
        width,
        activation,
        batch_norm,
    }
}

fn small_pair(rng: &mut ChaCha8Rng, cond_dim: usize, encoding: ConditionEncoding) -> Result<(CondGenerator, CondDiscriminator)> {
    let noise = 2;
    let enc = encoding.encoded_dim(cond_dim);
    let g_spec = MlpSpec {
        input_dim: noise + enc,
        hidden: vec![
            hidden(7, Activation::LeakyRelu(0.1), true),
            hidden(6, Activation::Relu, true),
        ],
        output_dim: 2,
        output_activation: Activation::Identity,
    };
    let d_spec = MlpSpec {
        input_dim: 2 + enc,
        hidden: vec![hidden(6, Activation::LeakyRelu(0.2), false)],
        output_dim: 1,
        output_activation: Activation::Sigmoid,
    };
    let gen = CondGenerator::new(Network::new(&g_spec, rng)?, encoding, cond_dim, noise)?;
    let disc = CondDiscriminator::new(Network::new(&d_spec, rng)?, encoding, cond_dim)?;
    Ok((gen, disc))
}

/// Median of the uncapped ratios, so a cap there clips about half the rows.
fn median_ratio(gen: &CondGenerator, x: &Tensor, z: &Tensor, delta: &Tensor) -> Result<f64> {
    let mut moved = x.clone();
    moved.add_assign(delta);
    let xs = Tensor::vstack(&[&moved, x])?;
    let zs = Tensor::vstack(&[z, z])?;
    let out = gen.forward(&xs, &zs, Mode::Train)?;
    let m = x.rows();
    let mut ratios: Vec<f64> = (0..m)
        .map(|r| {
            let d: f64 = (0..out.cols())
                .map(|c| (out.get(r, c) - out.get(m + r, c)).powi(2))
                .sum();
            let n: f64 = delta.row(r).iter().map(|v| v * v).sum();
            (d / n).sqrt()
        })
        .collect();
    ratios.sort_by(f64::total_cmp);
    Ok(0.5 * (ratios[m / 2 - 1] + ratios[m / 2]))
}

/// Runs every check and returns one result per check.
pub fn run_all(opts: &GradCheckOptions) -> Result<Vec<CheckResult>> {
    let mut rng = rng::stream(opts.seed, 0);
    let r = &mut rng;
    let mut out = Vec::new();

    let plain = |hidden: Vec<HiddenLayer>, out_act| MlpSpec {
        input_dim: 3,
        hidden,
        output_dim: 4,
        output_activation: out_act,
    };
    out.push(check_layer("dense", plain(vec![], Activation::Identity), Mode::Train, opts, r)?);
    out.push(check_layer(
        "relu",
        plain(vec![hidden(6, Activation::Relu, false)], Activation::Identity),
        Mode::Train,
        opts,
        r,
    )?);
    out.push(check_layer(
        "leaky_relu",
        plain(vec![hidden(6, Activation::LeakyRelu(0.1), false)], Activation::Identity),
        Mode::Train,
        opts,
        r,
    )?);
    out.push(check_layer("sigmoid", plain(vec![], Activation::Sigmoid), Mode::Train, opts, r)?);
    let bn = plain(vec![hidden(5, Activation::LeakyRelu(0.1), true)], Activation::Identity);
    out.push(check_layer("batch_norm_train", bn.clone(), Mode::Train, opts, r)?);
    out.push(check_layer("batch_norm_eval", bn, Mode::Eval, opts, r)?);

    // losses on the circular layout: scalar angle, sin/cos encoding
    let m = 6;
    let mut pair = small_pair(r, 1, ConditionEncoding::SinCos)?;
    let x = Tensor::from_fn(m, 1, |_, _| r.gen_range(0.0..std::f64::consts::TAU));
    let x2 = Tensor::from_fn(m, 1, |_, _| r.gen_range(0.0..std::f64::consts::TAU));
    let z = random(m, 2, r);
    let y_real = random(m, 2, r);
    let y_fake = random(m, 2, r);
    let mut bce = GanConfig::circular(0);
    bce.lambda = 0.5;

    let cfg = bce.clone();
    let (xr, yr, yf) = (x.clone(), y_real.clone(), y_fake.clone());
    out.push(check_subject(
        "discriminator_bce",
        &mut pair,
        disc_net,
        opts.param_tol,
        opts,
        &move |p: &(CondGenerator, CondDiscriminator), g: &mut Graph, _| {
            let l = discriminator_loss(g, &p.1, &xr, &yr, &yf, &cfg, None)?;
            Ok((l.value, vec![l.forward]))
        },
    )?);

    let mut wgan = bce.clone();
    wgan.loss = LossKind::WassersteinGp { gp_coeff: 0.1 };
    let draws = CriticPenaltyDraws::sample(m, 2, r);
    let (xr, yr, yf) = (x.clone(), y_real.clone(), y_fake.clone());
    out.push(check_subject(
        "discriminator_wgan_gp",
        &mut pair,
        disc_net,
        opts.param_tol,
        opts,
        &move |p: &(CondGenerator, CondDiscriminator), g: &mut Graph, _| {
            let l = discriminator_loss(g, &p.1, &xr, &yr, &yf, &wgan, Some(&draws))?;
            Ok((l.value, vec![l.forward]))
        },
    )?);

    let cfg = bce.clone();
    let (xr, zr, xi) = (x.clone(), z.clone(), x2.clone());
    out.push(check_subject(
        "generator_bce_exact",
        &mut pair,
        gen_net,
        opts.penalty_tol,
        opts,
        &move |p: &(CondGenerator, CondDiscriminator), g: &mut Graph, _| {
            let reg = RegInputs { x: &xi, delta: None };
            let l = generator_loss(g, &p.0, &p.1, &xr, &zr, &reg, &cfg)?;
            let mut f = vec![l.adversarial_forward];
            f.extend(l.penalty_forward);
            Ok((l.total, f))
        },
    )?);

    let (xr, zr) = (x2.clone(), z.clone());
    out.push(check_subject(
        "penalty_exact",
        &mut pair,
        gen_net,
        opts.penalty_tol,
        opts,
        &move |p: &(CondGenerator, CondDiscriminator), g: &mut Graph, track| {
            let pen = gr_penalty_exact(g, &p.0, &xr, &zr, 1e-3, track)?;
            Ok((pen.value, vec![pen.forward]))
        },
    )?);

    // ratio penalty on a raw multi-dimensional condition
    let p_dim = 3;
    let mut pair = small_pair(r, p_dim, ConditionEncoding::Raw)?;
    let x = random(m, p_dim, r);
    let z = random(m, 2, r);
    let delta = sample_perturbations(m, p_dim, Perturbation::SphereSurface { radius: 0.1 }, 1e-6, r)?;
    let tau1 = median_ratio(&pair.0, &x, &z, &delta)?;
    for (name, tau1) in [("penalty_ratio", None), ("penalty_ratio_capped", Some(tau1))] {
        let (xr, zr, dr) = (x.clone(), z.clone(), delta.clone());
        out.push(check_subject(
            name,
            &mut pair,
            gen_net,
            opts.penalty_tol,
            opts,
            &move |p: &(CondGenerator, CondDiscriminator), g: &mut Graph, track| {
                let pen = gr_penalty_ratio(g, &p.0, &xr, &zr, &dr, tau1, track)?;
                Ok((pen.value, vec![pen.forward]))
            },
        )?);
    }

    let mut wcfg = GanConfig::mvn(2, 0);
    wcfg.reg_form = RegForm::Ratio;
    let (xr, zr, dr) = (x.clone(), z.clone(), delta.clone());
    let xi = GaussianSpec::isotropic(vec![0.0; p_dim], 1.0).sample(m, r)?;
    out.push(check_subject(
        "generator_wgan_ratio",
        &mut pair,
        gen_net,
        opts.penalty_tol,
        opts,
        &move |p: &(CondGenerator, CondDiscriminator), g: &mut Graph, _| {
            let reg = RegInputs { x: &xi, delta: Some(&dr) };
            let l = generator_loss(g, &p.0, &p.1, &xr, &zr, &reg, &wcfg)?;
            let mut f = vec![l.adversarial_forward];
            f.extend(l.penalty_forward);
            Ok((l.total, f))
        },
    )?);

    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_checks_pass() {
        let results = run_all(&GradCheckOptions::default()).unwrap();
        assert!(results.len() >= 12);
        for r in &results {
            assert!(r.params > 0, "{}", r.name);
            assert!(r.passed, "{r:?}");
        }
    }

    #[test]
    fn corrupted_backward_is_caught() {
        let opts = GradCheckOptions {
            corrupt_backward: true,
            ..Default::default()
        };
        let results = run_all(&opts).unwrap();
        assert!(results.iter().all(|r| !r.passed));
    }

    #[test]
    fn empty_parameter_set_passes() {
        let r = compare("none", &[], 1e-4, |_| unreachable!()).unwrap();
        assert!(r.passed);
        assert_eq!(r.params, 0);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert!(relative_error(1e-12, 0.0) < 1e-6);
    }
}
