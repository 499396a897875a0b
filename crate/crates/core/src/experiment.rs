//! Run manifests and the experiment drivers behind the command line.
//!
//! A [`RunManifest`] fully determines an experiment: every dataset, initialization
//! and evaluation draw comes from seeds derived from `manifest.seed`, so rerunning a
//! manifest reproduces every CSV byte for byte.

use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::data::{
    circular_labels, make_mvn_params, sample_circular, sample_mvn, true_conditional,
    CircularSpec, LabeledDataset, MvnSpec,
};
use crate::error::{Error, Result};
use crate::gan::{
    generate, ConditionEncoding, GanConfig, LogRow, RegForm, TrainOptions, TrainerState,
    TrainingLog,
};
use crate::metrics::{
    evaluate_circular, evaluate_mvn, evaluation_angles, mvn_panel_labels, ExperimentReport,
    MvnReport,
};
use crate::nn::MlpSpec;
use crate::rng;

pub const MANIFEST_VERSION: u32 = 1;
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentId {
    CircularFull,
    CircularPartial,
    Mvn,
    MvnSweep,
}

impl ExperimentId {
    pub const ALL: [ExperimentId; 4] = [
        Self::CircularFull,
        Self::CircularPartial,
        Self::Mvn,
        Self::MvnSweep,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::CircularFull => "circular-full",
            Self::CircularPartial => "circular-partial",
            Self::Mvn => "mvn",
            Self::MvnSweep => "mvn-sweep",
        }
    }

    pub fn is_circular(self) -> bool {
        matches!(self, Self::CircularFull | Self::CircularPartial)
    }
}

impl fmt::Display for ExperimentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ExperimentId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|e| e.as_str() == s)
            .ok_or_else(|| Error::Manifest(format!("unknown experiment '{s}'")))
    }
}

/// Model variants compared by the experiments.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Jacobian penalty by central differences.
    GrExact,
    /// Finite-difference ratio penalty.
    GrRatio,
    /// λ = 0.
    Unregularized,
    /// Jacobian penalty evaluated at the training conditions only.
    NoInterpolation,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::GrExact => "gr-exact",
            Self::GrRatio => "gr-ratio",
            Self::Unregularized => "unregularized",
            Self::NoInterpolation => "no-interpolation",
        }
    }

    fn apply(self, cfg: &mut GanConfig) {
        match self {
            Self::GrExact => cfg.reg_form = RegForm::ExactFd { h: 1e-3 },
            Self::GrRatio => cfg.reg_form = RegForm::Ratio,
            Self::Unregularized => cfg.lambda = 0.0,
            Self::NoInterpolation => {
                cfg.reg_form = RegForm::ExactFd { h: 1e-3 };
                cfg.interpolate = false;
            }
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSettings {
    pub n_angles: usize,
    pub n_per_label: usize,
    pub mvn_labels: usize,
    pub mvn_per_label: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            n_angles: 360,
            n_per_label: 100,
            mvn_labels: 100,
            mvn_per_label: 250,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MvnSettings {
    /// Condition dimension of the single `mvn` experiment.
    pub p: usize,
    /// Output dimension; `k = p + q`.
    pub q: usize,
    pub n_train: usize,
    /// Condition dimensions of the sweep.
    pub sweep: Vec<usize>,
}

impl Default for MvnSettings {
    fn default() -> Self {
        Self {
            p: 8,
            q: 2,
            n_train: 1000,
            sweep: vec![5, 8, 11, 15],
        }
    }
}

/// Optional changes to the preset hyperparameters.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Overrides {
    pub lambda: Option<f64>,
    pub iterations: Option<usize>,
    pub batch_size: Option<usize>,
    pub non_saturating: Option<bool>,
}

/// Everything needed to rerun an experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub version: u32,
    pub experiment: ExperimentId,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_reps")]
    pub repetitions: usize,
    /// Fraction of the preset iteration budget.
    #[serde(default = "default_scale")]
    pub scale: f64,
    /// Variants to train; empty means the experiment's default set.
    #[serde(default)]
    pub variants: Vec<Variant>,
    #[serde(default)]
    pub circular: Option<CircularSpec>,
    #[serde(default)]
    pub mvn: MvnSettings,
    #[serde(default)]
    pub eval: EvalSettings,
    #[serde(default)]
    pub overrides: Overrides,
}

fn default_reps() -> usize {
    3
}

fn default_scale() -> f64 {
    1.0
}

/// Seed-derivation tags.
const TAG_DATA: u64 = 1;
const TAG_TRAIN: u64 = 2;
const TAG_EVAL: u64 = 3;
const TAG_PARAMS: u64 = 4;

fn derive_seed(seed: u64, tag: u64, index: u64) -> u64 {
    rng::stream(seed, (tag << 32) | index).next_u64()
}

/// 64-bit FNV-1a, used as a stable fingerprint of the manifest text.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl RunManifest {
    pub fn new(experiment: ExperimentId) -> Self {
        Self {
            version: MANIFEST_VERSION,
            experiment,
            seed: 0,
            repetitions: default_reps(),
            scale: default_scale(),
            variants: Vec::new(),
            circular: None,
            mvn: MvnSettings::default(),
            eval: EvalSettings::default(),
            overrides: Overrides::default(),
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let m: Self = toml::from_str(s).map_err(|e| Error::Manifest(e.to_string()))?;
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Manifest(e.to_string()))
    }

    /// Hex fingerprint of the canonical TOML form.
    pub fn config_hash(&self) -> Result<String> {
        Ok(format!("{:016x}", fnv1a(self.to_toml()?.as_bytes())))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Manifest(m));
        if self.version != MANIFEST_VERSION {
            return bad(format!(
                "manifest version {} (this build reads version {MANIFEST_VERSION})",
                self.version
            ));
        }
        if self.repetitions == 0 {
            return bad("repetitions must be >= 1".into());
        }
        if !(self.scale > 0.0 && self.scale <= 1.0) {
            return bad(format!("scale must be in (0, 1], got {}", self.scale));
        }
        if self.experiment.is_circular() {
            self.circular_spec().validate()?;
        } else {
            if self.mvn.p == 0 || self.mvn.q == 0 || self.mvn.n_train < 2 {
                return bad("mvn settings need p, q >= 1 and n_train >= 2".into());
            }
            if self.experiment == ExperimentId::MvnSweep && self.mvn.sweep.is_empty() {
                return bad("mvn sweep lists no dimensions".into());
            }
        }
        if self.eval.n_per_label < 3 || self.eval.mvn_per_label < self.mvn.q + 1 {
            return bad("too few evaluation samples per label for a Gaussian fit".into());
        }
        Ok(())
    }

    pub fn variants(&self) -> Vec<Variant> {
        if !self.variants.is_empty() {
            return self.variants.clone();
        }
        if self.experiment.is_circular() {
            vec![
                Variant::GrExact,
                Variant::GrRatio,
                Variant::Unregularized,
                Variant::NoInterpolation,
            ]
        } else {
            vec![Variant::GrRatio, Variant::Unregularized]
        }
    }

    pub fn circular_spec(&self) -> CircularSpec {
        self.circular.clone().unwrap_or_else(|| match self.experiment {
            ExperimentId::CircularPartial => CircularSpec::partial(),
            _ => CircularSpec::full(),
        })
    }

    /// Condition dimensions this manifest trains on.
    pub fn mvn_dims(&self) -> Vec<usize> {
        match self.experiment {
            ExperimentId::MvnSweep => self.mvn.sweep.clone(),
            _ => vec![self.mvn.p],
        }
    }

    /// Preset for the experiment with the variant, scale and overrides applied.
    /// Repetition `rep` gets its own initialization seed, shared by all variants.
    pub fn gan_config(&self, variant: Variant, rep: usize) -> GanConfig {
        let seed = derive_seed(self.seed, TAG_TRAIN, rep as u64);
        let mut cfg = if self.experiment.is_circular() {
            GanConfig::circular(seed)
        } else {
            GanConfig::mvn(self.mvn.q, seed)
        };
        variant.apply(&mut cfg);
        let o = &self.overrides;
        if let Some(l) = o.lambda {
            if variant != Variant::Unregularized {
                cfg.lambda = l;
            }
        }
        if let Some(i) = o.iterations {
            cfg.iterations = i;
        }
        if let Some(b) = o.batch_size {
            cfg.batch_size = b;
        }
        if let Some(ns) = o.non_saturating {
            cfg.non_saturating = ns;
        }
        cfg.iterations = ((cfg.iterations as f64 * self.scale).ceil() as usize).max(1);
        cfg
    }

    /// Training set for repetition `rep`, with the train and test labels.
    pub fn circular_dataset(&self, rep: usize) -> Result<(LabeledDataset, Vec<f64>, Vec<f64>)> {
        let spec = self.circular_spec();
        let (train, test) = circular_labels(&spec)?;
        let mut r = rng::stream(derive_seed(self.seed, TAG_DATA, rep as u64), 0);
        let data = sample_circular(&spec, &train, &mut r)?;
        Ok((data, train, test))
    }

    /// Distribution parameters for condition dimension `p`.
    pub fn mvn_spec(&self, p: usize) -> Result<MvnSpec> {
        make_mvn_params(p + self.mvn.q, p, derive_seed(self.seed, TAG_PARAMS, p as u64))
    }

    /// Training set for condition dimension `p`, shared by every repetition.
    pub fn mvn_dataset(&self, spec: &MvnSpec) -> Result<LabeledDataset> {
        let mut r = rng::stream(derive_seed(self.seed, TAG_DATA, 1000 + spec.p as u64), 0);
        sample_mvn(spec, self.mvn.n_train, &mut r)
    }

    fn eval_seed(&self, rep: usize) -> u64 {
        derive_seed(self.seed, TAG_EVAL, rep as u64)
    }
}

/// A trained circular model with its scores.
pub struct CircularRun {
    pub variant: Variant,
    pub rep: usize,
    pub config: GanConfig,
    pub state: TrainerState,
    pub log: TrainingLog,
    /// Scores at the evenly spaced evaluation angles.
    pub report: ExperimentReport,
    /// Scores at the gap midpoints (partial dataset only).
    pub test_report: Option<ExperimentReport>,
    pub seconds: f64,
}

/// Trains and scores one circular variant. `on_row` sees every log row as it is produced.
pub fn run_circular(
    m: &RunManifest,
    variant: Variant,
    rep: usize,
    on_row: impl FnMut(&LogRow) -> Result<()>,
) -> Result<CircularRun> {
    if !m.experiment.is_circular() {
        return Err(Error::Manifest(format!("{} is not a circular experiment", m.experiment)));
    }
    let (data, _, test) = m.circular_dataset(rep)?;
    let config = m.gan_config(variant, rep);
    let start = Instant::now();
    let mut state = TrainerState::init(
        &MlpSpec::circular_generator(),
        &MlpSpec::circular_discriminator(),
        ConditionEncoding::SinCos,
        1,
        &config,
    )?;
    let log = state.run(&data, &config, TrainOptions::default(), on_row)?;
    let (report, test_report) = score_circular(m, &state, rep, &test)?;
    Ok(CircularRun {
        variant,
        rep,
        config,
        state,
        log,
        report,
        test_report,
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn score_circular(
    m: &RunManifest,
    state: &TrainerState,
    rep: usize,
    test: &[f64],
) -> Result<(ExperimentReport, Option<ExperimentReport>)> {
    let spec = m.circular_spec();
    let seed = m.eval_seed(rep);
    let angles = evaluation_angles(m.eval.n_angles);
    let (report, _) = evaluate_circular(&state.generator, &angles, &spec, m.eval.n_per_label, seed)?;
    let test_report = if test.is_empty() {
        None
    } else {
        let (r, _) = evaluate_circular(
            &state.generator,
            test,
            &spec,
            m.eval.n_per_label,
            seed ^ 0x5eed,
        )?;
        Some(r)
    };
    Ok((report, test_report))
}

/// A trained multivariate-Gaussian model with its scores.
pub struct MvnRun {
    pub variant: Variant,
    pub p: usize,
    pub rep: usize,
    pub config: GanConfig,
    pub state: TrainerState,
    pub log: TrainingLog,
    pub report: MvnReport,
    pub seconds: f64,
}

pub fn run_mvn(
    m: &RunManifest,
    variant: Variant,
    p: usize,
    rep: usize,
    on_row: impl FnMut(&LogRow) -> Result<()>,
) -> Result<MvnRun> {
    if m.experiment.is_circular() {
        return Err(Error::Manifest(format!("{} is not a Gaussian experiment", m.experiment)));
    }
    let spec = m.mvn_spec(p)?;
    let data = m.mvn_dataset(&spec)?;
    let config = m.gan_config(variant, rep);
    let start = Instant::now();
    let q = spec.q();
    let mut state = TrainerState::init(
        &MlpSpec::mvn_generator(p, q),
        &MlpSpec::mvn_discriminator(p, q),
        ConditionEncoding::Raw,
        p,
        &config,
    )?;
    let log = state.run(&data, &config, TrainOptions::default(), on_row)?;
    let report = evaluate_mvn(
        &state.generator,
        &spec,
        m.eval.mvn_labels,
        m.eval.mvn_per_label,
        m.eval_seed(rep),
    )?;
    Ok(MvnRun {
        variant,
        p,
        rep,
        config,
        state,
        log,
        report,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Saved training state plus everything needed to rebuild the data and evaluation.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub manifest: RunManifest,
    pub variant: Variant,
    pub rep: usize,
    /// Condition dimension (Gaussian experiments).
    pub p: Option<usize>,
    pub config: GanConfig,
    pub state: TrainerState,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer(&mut w, self)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c: Self = serde_json::from_reader(std::io::BufReader::new(File::open(path)?))?;
        if c.version != CHECKPOINT_VERSION {
            return Err(Error::Manifest(format!("checkpoint version {}", c.version)));
        }
        Ok(c)
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text)?;
    Ok(())
}

/// Writes the training data of repetition 0 (or the first condition dimension) and a
/// manifest that regenerates it.
pub fn gen_data(m: &RunManifest, out: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out)?;
    let mut written = Vec::new();
    let data = if m.experiment.is_circular() {
        let (data, train, test) = m.circular_dataset(0)?;
        let labels = out.join("labels.csv");
        let mut s = String::from("split,label\n");
        for a in &train {
            s.push_str(&format!("train,{a}\n"));
        }
        for a in &test {
            s.push_str(&format!("test,{a}\n"));
        }
        write_text(&labels, &s)?;
        written.push(labels);
        data
    } else {
        let p = m.mvn_dims()[0];
        let spec = m.mvn_spec(p)?;
        let path = out.join("mvn_spec.json");
        write_text(&path, &serde_json::to_string_pretty(&spec)?)?;
        written.push(path);
        m.mvn_dataset(&spec)?
    };
    let path = out.join("data.csv");
    data.write_csv(BufWriter::new(File::create(&path)?))?;
    written.push(path);
    let path = out.join("data_manifest.toml");
    write_text(&path, &m.to_toml()?)?;
    written.push(path);
    Ok(written)
}

/// Trains the manifest's first variant (repetition 0), writing `checkpoint.json` and a
/// `log.csv` that grows as training proceeds.
pub fn train_to_dir(m: &RunManifest, out: &Path) -> Result<Checkpoint> {
    fs::create_dir_all(out)?;
    let variant = m.variants()[0];
    let mut log = BufWriter::new(File::create(out.join("log.csv"))?);
    writeln!(log, "{}", TrainingLog::CSV_HEADER)?;
    let on_row = |row: &LogRow| -> Result<()> {
        writeln!(log, "{}", TrainingLog::csv_line(row))?;
        if row.iter % 100 == 99 {
            log.flush()?;
        }
        Ok(())
    };
    let ckpt = if m.experiment.is_circular() {
        let run = run_circular(m, variant, 0, on_row)?;
        Checkpoint {
            version: CHECKPOINT_VERSION,
            manifest: m.clone(),
            variant,
            rep: 0,
            p: None,
            config: run.config,
            state: run.state,
        }
    } else {
        let p = m.mvn_dims()[0];
        let run = run_mvn(m, variant, p, 0, on_row)?;
        Checkpoint {
            version: CHECKPOINT_VERSION,
            manifest: m.clone(),
            variant,
            rep: 0,
            p: Some(p),
            config: run.config,
            state: run.state,
        }
    };
    log.flush()?;
    ckpt.save(&out.join("checkpoint.json"))?;
    Ok(ckpt)
}

/// Headline numbers of one evaluation.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalSummary {
    pub experiment: ExperimentId,
    pub variant: Variant,
    pub config_hash: String,
    pub seed: u64,
    pub repetitions: usize,
    pub pct_high_quality: Option<f64>,
    pub pct_recovered: Option<f64>,
    pub mean_w2: f64,
    pub test_pct_recovered: Option<f64>,
    pub test_mean_w2: Option<f64>,
    pub mean_w2_exact: Option<f64>,
    pub mean_w2_floor: Option<f64>,
}

/// Angles for the sample plots: the gap midpoints on the partial dataset, otherwise
/// eight angles halfway between training labels.
fn display_angles(spec: &CircularSpec, test: &[f64]) -> Vec<f64> {
    if !test.is_empty() {
        return test.to_vec();
    }
    let half = std::f64::consts::PI / spec.n_labels as f64;
    (0..8)
        .map(|j| std::f64::consts::TAU * j as f64 / 8.0 + half)
        .collect()
}

/// Scores a checkpoint and writes the report, plot data and a JSON summary.
pub fn eval_checkpoint(ckpt: &Checkpoint, out: &Path) -> Result<EvalSummary> {
    fs::create_dir_all(out)?;
    let m = &ckpt.manifest;
    let seed = m.eval_seed(ckpt.rep);
    let hash = m.config_hash()?;
    let summary = if m.experiment.is_circular() {
        let spec = m.circular_spec();
        let (_, _, test) = m.circular_dataset(ckpt.rep)?;
        let (report, test_report) = score_circular(m, &ckpt.state, ckpt.rep, &test)?;
        write_text(&out.join("report.csv"), &report.to_csv())?;
        if let Some(t) = &test_report {
            write_text(&out.join("test_report.csv"), &t.to_csv())?;
        }
        let angles = display_angles(&spec, &test);
        let (_, dumps) = evaluate_circular(&ckpt.state.generator, &angles, &spec, m.eval.n_per_label, seed ^ 0xd1)?;
        let mut s = String::from("label,x,y\n");
        let mut o = String::from("label,center_x,center_y,radius\n");
        for d in &dumps {
            for r in 0..d.samples.rows() {
                s.push_str(&format!("{},{},{}\n", d.label, d.samples.get(r, 0), d.samples.get(r, 1)));
            }
            let c = spec.center(d.label);
            o.push_str(&format!("{},{},{},{}\n", d.label, c[0], c[1], spec.hq_threshold()));
        }
        write_text(&out.join("samples.csv"), &s)?;
        write_text(&out.join("overlay.csv"), &o)?;
        EvalSummary {
            experiment: m.experiment,
            variant: ckpt.variant,
            config_hash: hash,
            seed: m.seed,
            repetitions: 1,
            pct_high_quality: Some(report.pct_high_quality()),
            pct_recovered: Some(report.pct_recovered()),
            mean_w2: report.mean_w2(),
            test_pct_recovered: test_report.as_ref().map(|t| t.pct_recovered()),
            test_mean_w2: test_report.as_ref().map(|t| t.mean_w2()),
            mean_w2_exact: None,
            mean_w2_floor: None,
        }
    } else {
        let p = ckpt.p.unwrap_or(m.mvn.p);
        let spec = m.mvn_spec(p)?;
        let report = evaluate_mvn(&ckpt.state.generator, &spec, m.eval.mvn_labels, m.eval.mvn_per_label, seed)?;
        write_text(&out.join("report.csv"), &report.to_csv())?;
        write_text(&out.join("panel_samples.csv"), &mvn_panels(ckpt, &spec, seed)?)?;
        EvalSummary {
            experiment: m.experiment,
            variant: ckpt.variant,
            config_hash: hash,
            seed: m.seed,
            repetitions: 1,
            pct_high_quality: None,
            pct_recovered: None,
            mean_w2: report.mean_w2(),
            test_pct_recovered: None,
            test_mean_w2: None,
            mean_w2_exact: Some(report.mean_w2_exact()),
            mean_w2_floor: Some(report.mean_floor()),
        }
    };
    write_text(&out.join("summary.json"), &serde_json::to_string_pretty(&summary)?)?;
    Ok(summary)
}

/// Generated and true samples at the five panel labels, first two output coordinates.
fn mvn_panels(ckpt: &Checkpoint, spec: &MvnSpec, seed: u64) -> Result<String> {
    let n = ckpt.manifest.eval.mvn_per_label;
    let mut s = String::from("panel,source,y1,y2\n");
    for (i, x) in mvn_panel_labels(spec).iter().enumerate() {
        let fake = generate(&ckpt.state.generator, x, n, &mut rng::stream(seed, 10_000 + 2 * i as u64))?;
        let real = true_conditional(spec, x)?.sample(n, &mut rng::stream(seed, 10_001 + 2 * i as u64))?;
        for (name, t) in [("fake", &fake), ("true", &real)] {
            for r in 0..t.rows() {
                let y2 = if t.cols() > 1 { t.get(r, 1) } else { 0.0 };
                s.push_str(&format!("{i},{name},{},{y2}\n", t.get(r, 0)));
            }
        }
    }
    Ok(s)
}

/// One pass/fail line of `reproduce --check`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckLine {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// Aggregate results of a reproduction.
#[derive(Clone, Debug, Default, Serialize)]
pub struct ReproduceOutcome {
    pub aggregate_csv: String,
    pub checks: Vec<CheckLine>,
    pub seconds: f64,
}

impl ReproduceOutcome {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Trains every variant and repetition of the manifest, writing per-run reports and
/// logs under `out/<variant>/rep<r>/` and the aggregate table to `out/aggregate.csv`.
/// `progress` receives one line per finished run.
pub fn reproduce(
    m: &RunManifest,
    out: &Path,
    mut progress: impl FnMut(&str),
) -> Result<ReproduceOutcome> {
    fs::create_dir_all(out)?;
    write_text(&out.join("manifest.toml"), &m.to_toml()?)?;
    let start = Instant::now();
    let outcome = if m.experiment.is_circular() {
        reproduce_circular(m, out, &mut progress)?
    } else {
        reproduce_mvn(m, out, &mut progress)?
    };
    let outcome = ReproduceOutcome {
        seconds: start.elapsed().as_secs_f64(),
        ..outcome
    };
    write_text(&out.join("aggregate.csv"), &outcome.aggregate_csv)?;
    let summary = serde_json::json!({
        "experiment": m.experiment,
        "config_hash": m.config_hash()?,
        "seed": m.seed,
        "repetitions": m.repetitions,
        "scale": m.scale,
        "checks": outcome.checks,
    });
    write_text(&out.join("summary.json"), &serde_json::to_string_pretty(&summary)?)?;
    Ok(outcome)
}

fn run_dir(out: &Path, variant: Variant, tag: &str) -> Result<PathBuf> {
    let d = out.join(variant.as_str()).join(tag);
    fs::create_dir_all(&d)?;
    Ok(d)
}

struct CircularScores {
    variant: Variant,
    hq: Vec<f64>,
    rec: Vec<f64>,
    w2: Vec<f64>,
    test_rec: Vec<f64>,
    test_w2: Vec<f64>,
}

fn reproduce_circular(
    m: &RunManifest,
    out: &Path,
    progress: &mut dyn FnMut(&str),
) -> Result<ReproduceOutcome> {
    let partial = !m.circular_spec().gaps.is_empty();
    let mut csv = String::from(if partial {
        "variant,rep,hq_pct,recovered_pct,w2,test_recovered_pct,test_w2\n"
    } else {
        "variant,rep,hq_pct,recovered_pct,w2\n"
    });
    let mut all = Vec::new();
    for variant in m.variants() {
        let mut sc = CircularScores {
            variant,
            hq: vec![],
            rec: vec![],
            w2: vec![],
            test_rec: vec![],
            test_w2: vec![],
        };
        for rep in 0..m.repetitions {
            let run = run_circular(m, variant, rep, |_| Ok(()))?;
            let dir = run_dir(out, variant, &format!("rep{rep}"))?;
            write_text(&dir.join("log.csv"), &run.log.to_csv())?;
            write_text(&dir.join("report.csv"), &run.report.to_csv())?;
            sc.hq.push(run.report.pct_high_quality());
            sc.rec.push(run.report.pct_recovered());
            sc.w2.push(run.report.mean_w2());
            let mut line = format!(
                "{variant},{rep},{},{},{}",
                run.report.pct_high_quality(),
                run.report.pct_recovered(),
                run.report.mean_w2()
            );
            if let Some(t) = &run.test_report {
                write_text(&dir.join("test_report.csv"), &t.to_csv())?;
                sc.test_rec.push(t.pct_recovered());
                sc.test_w2.push(t.mean_w2());
                line.push_str(&format!(",{},{}", t.pct_recovered(), t.mean_w2()));
            }
            csv.push_str(&line);
            csv.push('\n');
            progress(&format!(
                "{} {variant} rep {rep}: HQ {:.2}% recovered {:.2}% W2 {:.4} ({:.1}s)",
                m.experiment,
                run.report.pct_high_quality(),
                run.report.pct_recovered(),
                run.report.mean_w2(),
                run.seconds
            ));
        }
        let mut line = format!("{variant},mean,{},{},{}", mean(&sc.hq), mean(&sc.rec), mean(&sc.w2));
        if partial {
            line.push_str(&format!(",{},{}", mean(&sc.test_rec), mean(&sc.test_w2)));
        }
        csv.push_str(&line);
        csv.push('\n');
        all.push(sc);
    }
    Ok(ReproduceOutcome {
        aggregate_csv: csv,
        checks: circular_checks(m, &all),
        seconds: 0.0,
    })
}

/// Table-band checks for the circular experiments.
fn circular_checks(m: &RunManifest, all: &[CircularScores]) -> Vec<CheckLine> {
    let mut checks = Vec::new();
    let Some(gr) = all.iter().find(|s| s.variant == Variant::GrExact) else {
        return checks;
    };
    let line = |name: &str, passed: bool, detail: String| CheckLine {
        name: name.to_string(),
        passed,
        detail,
    };
    if m.experiment == ExperimentId::CircularFull {
        let (hq, rec, w2) = (mean(&gr.hq), mean(&gr.rec), mean(&gr.w2));
        checks.push(line("recovered = 100%", rec == 100.0, format!("{rec:.2}%")));
        checks.push(line("high quality >= 88%", hq >= 88.0, format!("{hq:.2}%")));
        checks.push(line("mean W2 <= 0.05", w2 <= 0.05, format!("{w2:.4}")));
    } else {
        let (rec, w2) = (mean(&gr.test_rec), mean(&gr.test_w2));
        checks.push(line("test labels recovered = 100%", rec == 100.0, format!("{rec:.2}%")));
        checks.push(line("test mean W2 <= 0.06", w2 <= 0.06, format!("{w2:.4}")));
        if let Some(base) = all.iter().find(|s| s.variant == Variant::Unregularized) {
            let wins = base
                .test_w2
                .iter()
                .zip(&gr.test_w2)
                .filter(|(b, g)| b > g)
                .count();
            let need = (2 * m.repetitions).div_ceil(3);
            checks.push(line(
                "unregularized test W2 worse in >= 2/3 of repetitions",
                wins >= need,
                format!("{wins} of {}", m.repetitions),
            ));
        }
    }
    checks
}

fn reproduce_mvn(
    m: &RunManifest,
    out: &Path,
    progress: &mut dyn FnMut(&str),
) -> Result<ReproduceOutcome> {
    let mut csv = String::from("variant,p,rep,w2,w2_exact,w2_floor\n");
    let mut checks = Vec::new();
    for p in m.mvn_dims() {
        let mut means = Vec::new();
        for variant in m.variants() {
            let mut w2s = Vec::new();
            let (mut ex, mut fl) = (Vec::new(), Vec::new());
            for rep in 0..m.repetitions {
                let run = run_mvn(m, variant, p, rep, |_| Ok(()))?;
                let dir = run_dir(out, variant, &format!("p{p}/rep{rep}"))?;
                write_text(&dir.join("log.csv"), &run.log.to_csv())?;
                write_text(&dir.join("report.csv"), &run.report.to_csv())?;
                let r = &run.report;
                csv.push_str(&format!(
                    "{variant},{p},{rep},{},{},{}\n",
                    r.mean_w2(),
                    r.mean_w2_exact(),
                    r.mean_floor()
                ));
                progress(&format!(
                    "{} p={p} {variant} rep {rep}: W2 {:.4} (exact {:.4}, floor {:.4}) ({:.1}s)",
                    m.experiment,
                    r.mean_w2(),
                    r.mean_w2_exact(),
                    r.mean_floor(),
                    run.seconds
                ));
                w2s.push(r.mean_w2());
                ex.push(r.mean_w2_exact());
                fl.push(r.mean_floor());
            }
            csv.push_str(&format!("{variant},{p},mean,{},{},{}\n", mean(&w2s), mean(&ex), mean(&fl)));
            means.push((variant, mean(&w2s)));
        }
        let find = |v: Variant| means.iter().find(|(x, _)| *x == v).map(|(_, w)| *w);
        if let (Some(gr), Some(base)) = (find(Variant::GrRatio), find(Variant::Unregularized)) {
            let (name, passed) = if m.experiment == ExperimentId::Mvn {
                (format!("p={p}: regularized W2 < unregularized"), gr < base)
            } else {
                (format!("p={p}: regularized W2 <= unregularized"), gr <= base)
            };
            checks.push(CheckLine {
                name,
                passed,
                detail: format!("{gr:.4} vs {base:.4}"),
            });
        }
    }
    Ok(ReproduceOutcome {
        aggregate_csv: csv,
        checks,
        seconds: 0.0,
    })
}
