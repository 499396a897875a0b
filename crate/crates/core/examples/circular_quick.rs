//! Short circular run printing per-iteration cost and the resulting scores.
use std::time::Instant;

use grcgan::data::{circular_labels, sample_circular};
use grcgan::gan::{train, ConditionEncoding, GanConfig};
use grcgan::metrics::{evaluate_circular, evaluation_angles};
use grcgan::{rng, CircularSpec, MlpSpec};

fn main() -> grcgan::Result<()> {
    let iters: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(200);
    let lambda: f64 = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(0.02);
    let spec = CircularSpec::full();
    let (labels, _) = circular_labels(&spec)?;
    let data = sample_circular(&spec, &labels, &mut rng::stream(1, 0))?;
    let seed: u64 = std::env::args().nth(4).and_then(|s| s.parse().ok()).unwrap_or(1);
    let mut cfg = GanConfig::circular(seed).with_lambda(lambda);
    cfg.iterations = iters;
    cfg.non_saturating = std::env::args().nth(3).is_some_and(|s| s == "ns");
    let t = Instant::now();
    let (state, log) = train(
        &data,
        &MlpSpec::circular_generator(),
        &MlpSpec::circular_discriminator(),
        &cfg,
        ConditionEncoding::SinCos,
    )?;
    let secs = t.elapsed().as_secs_f64();
    println!("{iters} iterations in {secs:.2}s ({:.2} ms/iter)", 1e3 * secs / iters as f64);
    let last = log.rows.last().unwrap();
    println!("last row: {last:?}");
    let (rep, dumps) = evaluate_circular(&state.generator, &evaluation_angles(360), &spec, 100, 7)?;
    println!(
        "HQ {:.2}% recovered {:.2}% W2 {:.4}",
        rep.pct_high_quality(),
        rep.pct_recovered(),
        rep.mean_w2()
    );
    let (mut off, mut sd) = (0.0, 0.0);
    for d in &dumps {
        let fit = grcgan::metrics::gaussian_fit(&d.samples)?;
        let c = spec.center(d.label);
        off += ((fit.mean[0] - c[0]).powi(2) + (fit.mean[1] - c[1]).powi(2)).sqrt();
        sd += (0.5 * (fit.cov[0] + fit.cov[3])).sqrt();
    }
    let n = dumps.len() as f64;
    println!("mean offset {:.4} mean sd {:.4}", off / n, sd / n);
    let mut r = rng::stream(99, 0);
    let m = 1000;
    let xs = grcgan::Tensor::from_fn(m, 1, |_, _| 0.0);
    let xs = {
        use rand::Rng;
        let mut t = xs;
        for i in 0..m {
            t.set(i, 0, r.gen_range(0.0..std::f64::consts::TAU));
        }
        t
    };
    let z = rng::normal_tensor(m, 2, &mut r);
    for mode in [grcgan::Mode::Train, grcgan::Mode::Eval] {
        let out = state.generator.forward(&xs, &z, mode)?;
        let mut ss = 0.0;
        for i in 0..m {
            let c = spec.center(xs.get(i, 0));
            ss += (out.get(i, 0) - c[0]).powi(2) + (out.get(i, 1) - c[1]).powi(2);
        }
        println!("{mode:?}: residual sd {:.4}", (ss / (2.0 * m as f64)).sqrt());
    }
    Ok(())
}
