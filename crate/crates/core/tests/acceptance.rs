//! Acceptance suite. Prints one PASS/FAIL line per criterion.
//!
//! Environment:
//! * `GRCGAN_ACCEPTANCE_SCALE`: fraction of the circular iteration budget (default 1).
//! * `GRCGAN_ACCEPTANCE_MVN_SCALE`: run the Gaussian criteria at this fraction of the
//!   50,000-iteration budget (skipped by default).
//! * `GRCGAN_ACCEPTANCE_STRICT=1`: exit non-zero on any FAIL line.
//!
//! Without strict mode only the deterministic criteria (5 to 8) decide the exit status.

mod common;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;

use common::{empirical_w2, translation_generator};
use grcgan::experiment::{
    eval_checkpoint, gen_data, reproduce, run_circular, run_mvn, train_to_dir, CircularRun,
};
use grcgan::gradcheck::{run_all, GradCheckOptions};
use grcgan::metrics::{lipschitz_audit, w2_gaussians};
use grcgan::{rng, Checkpoint, ExperimentId, GaussianSpec, RunManifest, Variant};

struct Line {
    id: u32,
    passed: bool,
    gating: bool,
    text: String,
}

fn env_f64(name: &str) -> Option<f64> {
    std::env::var(name).ok().and_then(|v| v.parse().ok())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn circular_runs(exp: ExperimentId, variants: &[Variant], scale: f64) -> Vec<CircularRun> {
    let mut m = RunManifest::new(exp);
    m.scale = scale;
    let mut out = Vec::new();
    for &v in variants {
        for rep in 0..m.repetitions {
            let run = run_circular(&m, v, rep, |_| Ok(())).expect("circular run");
            println!(
                "    {exp} {v} rep {rep}: HQ {:.2}% recovered {:.2}% W2 {:.4}{} ({:.0}s)",
                run.report.pct_high_quality(),
                run.report.pct_recovered(),
                run.report.mean_w2(),
                run.test_report
                    .as_ref()
                    .map(|t| format!(" test W2 {:.4}", t.mean_w2()))
                    .unwrap_or_default(),
                run.seconds
            );
            out.push(run);
        }
    }
    out
}

fn criterion_1(runs: &[CircularRun], note: &str) -> Line {
    let gr: Vec<&CircularRun> = runs.iter().filter(|r| r.variant == Variant::GrExact).collect();
    let rec = mean(&gr.iter().map(|r| r.report.pct_recovered()).collect::<Vec<_>>());
    let hq = mean(&gr.iter().map(|r| r.report.pct_high_quality()).collect::<Vec<_>>());
    let w2 = mean(&gr.iter().map(|r| r.report.mean_w2()).collect::<Vec<_>>());
    let w2_sq = mean(
        &gr.iter()
            .flat_map(|r| r.report.rows.iter().map(|l| l.w2 * l.w2))
            .collect::<Vec<_>>(),
    );
    let secs = gr.iter().map(|r| r.seconds).fold(0.0, f64::max);
    let passed = rec == 100.0 && hq >= 88.0 && w2 <= 0.05 && secs <= 600.0;
    Line {
        id: 1,
        passed,
        gating: false,
        text: format!(
            "circular full{note}: recovered {rec:.2}% (= 100), HQ {hq:.2}% (>= 88), mean W2 {w2:.4} (<= 0.05), \
             slowest repetition {secs:.0}s (<= 600); mean W2^2 {w2_sq:.4}"
        ),
    }
}

fn criterion_2(runs: &[CircularRun], note: &str) -> Line {
    let pick = |v: Variant| -> Vec<&CircularRun> { runs.iter().filter(|r| r.variant == v).collect() };
    let gr = pick(Variant::GrExact);
    let base = pick(Variant::Unregularized);
    let test = |r: &CircularRun| r.test_report.as_ref().expect("partial dataset has test labels").clone();
    let rec = mean(&gr.iter().map(|r| test(r).pct_recovered()).collect::<Vec<_>>());
    let w2 = mean(&gr.iter().map(|r| test(r).mean_w2()).collect::<Vec<_>>());
    let base_w2 = mean(&base.iter().map(|r| test(r).mean_w2()).collect::<Vec<_>>());
    let wins = gr
        .iter()
        .zip(&base)
        .filter(|(g, b)| test(b).mean_w2() > test(g).mean_w2())
        .count();
    let passed = rec == 100.0 && w2 <= 0.06 && wins >= 2;
    Line {
        id: 2,
        passed,
        gating: false,
        text: format!(
            "circular partial{note}: test recovered {rec:.2}% (= 100), test mean W2 {w2:.4} (<= 0.06), \
             λ=0 worse in {wins} of {} repetitions (>= 2; its mean {base_w2:.4})",
            gr.len()
        ),
    }
}

fn mvn_criteria(scale: Option<f64>) -> Vec<Line> {
    let Some(scale) = scale else {
        let not_run = |id, what: &str| Line {
            id,
            passed: false,
            gating: false,
            text: format!(
                "{what}: not run (about 0.3 s per iteration on one core; the 20,000-iteration budget \
                 needs roughly {} h); set GRCGAN_ACCEPTANCE_MVN_SCALE to run",
                if id == 3 { 10 } else { 40 }
            ),
        };
        return vec![
            not_run(3, "mvn p=8 regularized W2 < unregularized"),
            not_run(4, "mvn sweep p in {5,8,11,15} regularized W2 <= unregularized"),
        ];
    };
    let mut lines = Vec::new();
    for (id, exp) in [(3, ExperimentId::Mvn), (4, ExperimentId::MvnSweep)] {
        let mut m = RunManifest::new(exp);
        m.scale = scale;
        let mut parts = Vec::new();
        let mut passed = true;
        for p in m.mvn_dims() {
            let avg = |v: Variant| {
                let w: Vec<f64> = (0..m.repetitions)
                    .map(|rep| run_mvn(&m, v, p, rep, |_| Ok(())).expect("mvn run").report.mean_w2())
                    .collect();
                mean(&w)
            };
            let gr = avg(Variant::GrRatio);
            let base = avg(Variant::Unregularized);
            let ok = if id == 3 { gr < base } else { gr <= base };
            passed &= ok;
            parts.push(format!("p={p}: {gr:.4} vs {base:.4}"));
        }
        lines.push(Line {
            id,
            passed,
            gating: false,
            text: format!("{exp} at scale {scale}: regularized vs unregularized mean W2, {}", parts.join("; ")),
        });
    }
    lines
}

fn criterion_5() -> Line {
    let opts = GradCheckOptions::default();
    let start = Instant::now();
    let results = run_all(&opts).expect("gradient checks run");
    let secs = start.elapsed().as_secs_f64();
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    let worst = |tol: f64| {
        results
            .iter()
            .filter(|r| r.tolerance == tol)
            .map(|r| r.max_rel_error)
            .fold(0.0, f64::max)
    };
    Line {
        id: 5,
        passed: failed.is_empty() && secs < 30.0,
        gating: true,
        text: format!(
            "gradient suite: {} checks, failed [{}], worst relative error {:.2e} on layers (< {:.0e}) \
             and {:.2e} on penalties (< {:.0e}), {secs:.2}s (< 30)",
            results.len(),
            failed.join(", "),
            worst(opts.param_tol),
            opts.param_tol,
            worst(opts.penalty_tol),
            opts.penalty_tol
        ),
    }
}

fn criterion_6() -> Line {
    let g = |m: &[f64], c: &[f64]| GaussianSpec::new(m.to_vec(), c.to_vec()).unwrap();
    let a = g(&[0.3, -1.2], &[1.0, 0.4, 0.4, 2.0]);
    let hand = [
        (w2_gaussians(&a, &a).unwrap(), 0.0),
        (
            w2_gaussians(&g(&[0.0, 0.0], &[0.0; 4]), &g(&[3.0, 4.0], &[0.0; 4])).unwrap(),
            5.0,
        ),
        (
            w2_gaussians(&g(&[1.0, 1.0], &[1.0, 0.0, 0.0, 1.0]), &g(&[1.0, 1.0], &[4.0, 0.0, 0.0, 4.0]))
                .unwrap(),
            2f64.sqrt(),
        ),
    ];
    let hand_err = hand.iter().map(|(v, e)| (v - e).abs()).fold(0.0, f64::max);

    let mut r = rng::stream(606, 0);
    let mut worst: f64 = 0.0;
    for k in 0..3u64 {
        let mut random = || {
            let a: Vec<f64> = (0..4).map(|_| r.gen_range(-1.0..1.0)).collect();
            let off = a[0] * a[2] + a[1] * a[3];
            let cov = [a[0] * a[0] + a[1] * a[1] + 0.05, off, off, a[2] * a[2] + a[3] * a[3] + 0.05];
            let mean = [r.gen_range(-1.5..1.5), r.gen_range(-1.5..1.5)];
            g(&mean, &cov)
        };
        let (p, q) = (random(), random());
        let exact = w2_gaussians(&p, &q).unwrap();
        let sp = p.sample(2000, &mut rng::stream(606, 1 + 2 * k)).unwrap();
        let sq = q.sample(2000, &mut rng::stream(606, 2 + 2 * k)).unwrap();
        worst = worst.max((empirical_w2(&sp, &sq) - exact).abs() / exact);
    }
    Line {
        id: 6,
        passed: hand_err <= 1e-9 && worst < 0.05,
        gating: true,
        text: format!(
            "W2 oracles: hand cases max error {hand_err:.1e} (<= 1e-9), exact-assignment OT on 3 pairs of \
             2000 samples worst relative error {:.2}% (< 5%)",
            100.0 * worst
        ),
    }
}

fn criterion_7(runs: &[&CircularRun]) -> Line {
    let t = lipschitz_audit(
        &translation_generator(2),
        &[0.5, -0.2],
        &[0.8, 0.2],
        10_000,
        &mut rng::stream(707, 0),
    )
    .unwrap();
    let translation_ok = t.bound_slack.abs() <= 2.0 * t.w2_std_error + 1e-12;

    let mut worst = f64::INFINITY;
    let mut violations = 0;
    let mut r = rng::stream(707, 1);
    for run in runs {
        for _ in 0..20 {
            let x1 = r.gen_range(0.0..std::f64::consts::TAU);
            let mut x2 = r.gen_range(0.0..std::f64::consts::TAU);
            if x2 == x1 {
                x2 += 0.1;
            }
            let a = lipschitz_audit(&run.state.generator, &[x1], &[x2], 500, &mut r).unwrap();
            let margin = a.bound_slack / a.w2_std_error.max(1e-12);
            worst = worst.min(margin);
            if a.bound_slack < -2.0 * a.w2_std_error {
                violations += 1;
            }
        }
    }
    Line {
        id: 7,
        passed: translation_ok && violations == 0 && !runs.is_empty(),
        gating: true,
        text: format!(
            "Lipschitz audit: translation K_hat {:.3}, slack {:.1e} vs 2 SE {:.1e}; {} trained generators x 20 \
             pairs, {violations} below -2 SE (lowest slack {worst:.1} SE)",
            t.k_hat,
            t.bound_slack,
            2.0 * t.w2_std_error,
            runs.len()
        ),
    }
}

fn csv_files(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|x| x == "csv") {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn small_manifests() -> Vec<RunManifest> {
    let mut c = RunManifest::new(ExperimentId::CircularPartial);
    c.seed = 42;
    c.repetitions = 2;
    c.overrides.iterations = Some(25);
    c.overrides.batch_size = Some(32);
    c.eval.n_angles = 12;
    c.eval.n_per_label = 20;

    let mut v = RunManifest::new(ExperimentId::MvnSweep);
    v.seed = 43;
    v.repetitions = 1;
    v.mvn.sweep = vec![2, 3];
    v.mvn.n_train = 100;
    v.overrides.iterations = Some(5);
    v.overrides.batch_size = Some(16);
    v.eval.mvn_labels = 4;
    v.eval.mvn_per_label = 20;
    vec![c, v]
}

fn run_everything(m: &RunManifest, dir: &Path) {
    reproduce(m, &dir.join("reproduce"), |_| {}).unwrap();
    gen_data(m, &dir.join("data")).unwrap();
    train_to_dir(m, &dir.join("train")).unwrap();
    let ckpt = Checkpoint::load(&dir.join("train").join("checkpoint.json")).unwrap();
    eval_checkpoint(&ckpt, &dir.join("eval")).unwrap();
}

fn criterion_8() -> Line {
    let mut compared = 0;
    let mut differing = Vec::new();
    for m in small_manifests() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        run_everything(&m, a.path());
        run_everything(&m, b.path());
        let fa = csv_files(a.path());
        if fa != csv_files(b.path()) {
            differing.push(format!("{}: file sets differ", m.experiment));
            continue;
        }
        for f in fa {
            compared += 1;
            if fs::read(a.path().join(&f)).unwrap() != fs::read(b.path().join(&f)).unwrap() {
                differing.push(format!("{}/{}", m.experiment, f.display()));
            }
        }
    }
    Line {
        id: 8,
        passed: differing.is_empty() && compared > 0,
        gating: true,
        text: format!(
            "determinism: {compared} CSV files from two manifests rerun, differing [{}]",
            differing.join(", ")
        ),
    }
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    if args.iter().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let scale = env_f64("GRCGAN_ACCEPTANCE_SCALE").unwrap_or(1.0).clamp(1e-4, 1.0);
    let note = if scale < 1.0 {
        format!(" (reduced budget, scale {scale})")
    } else {
        String::new()
    };
    let strict = std::env::var("GRCGAN_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");

    println!("acceptance: circular runs at scale {scale}");
    let full = circular_runs(ExperimentId::CircularFull, &[Variant::GrExact], scale);
    let partial = circular_runs(
        ExperimentId::CircularPartial,
        &[Variant::GrExact, Variant::Unregularized],
        scale,
    );
    let regularized: Vec<&CircularRun> = full
        .iter()
        .chain(&partial)
        .filter(|r| r.variant == Variant::GrExact)
        .collect();

    let mut lines = vec![criterion_1(&full, &note), criterion_2(&partial, &note)];
    lines.extend(mvn_criteria(env_f64("GRCGAN_ACCEPTANCE_MVN_SCALE")));
    lines.push(criterion_5());
    lines.push(criterion_6());
    lines.push(criterion_7(&regularized));
    lines.push(criterion_8());

    println!();
    for l in &lines {
        println!("[{}] criterion {}: {}", if l.passed { "PASS" } else { "FAIL" }, l.id, l.text);
    }
    let failed = lines.iter().filter(|l| !l.passed).count();
    let gating_failed = lines.iter().filter(|l| !l.passed && l.gating).count();
    println!(
        "\nacceptance: {} passed, {failed} failed ({gating_failed} of them deterministic){}",
        lines.len() - failed,
        if strict { ", strict mode" } else { "" }
    );
    if gating_failed > 0 || (strict && failed > 0) {
        std::process::exit(1);
    }
}
