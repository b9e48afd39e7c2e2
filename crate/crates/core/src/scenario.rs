//! Experiment configuration and the named end-to-end scenarios.
//!
//! A scenario reads one [`ExperimentConfig`], derives every random stream
//! from the master seed, runs its realisations in parallel, writes all raw
//! records and reports to the output directory and finishes with a
//! `summary.json` holding the metrics and the pass/fail state of each check.
//!
//! Seed schedule (master seed `m`):
//!
//! - excitation: the multisine seed is `m` itself (detection lines from
//!   stream 0, phases of realisation `r` from stream `1 + r`)
//! - open-loop sensor noise of realisation `r`: [`derive_seed`]`(m, OPEN_NOISE, r)`
//! - closed-loop sensor noise of realisation `r`: `derive_seed(m, CLOSED_NOISE, r)`
//! - closed-loop noise of the sine test: `derive_seed(m, SINE_NOISE, 0)`

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{self, bla, compare_runs, distortions, spectra, ComparisonReport, DistortionReport, DistortionSummary};
use crate::closed_loop::{run_linearised, run_open_loop, ClosedLoopConfig, ClosedLoopRecord, LoopMetrics};
use crate::error::{Error, Result};
use crate::excitation::{realisations, MultisineKind, MultisineSpec, Realisation};
use crate::io;
use crate::model::{bundled, PolyNlssModel};
use crate::mpc::{precompute_gains, MpcWeights};
use crate::plant::{DuffingParams, DuffingPlant, NoiseConfig, NoiseLevel, NoiseSource, Plant, SurrogatePlant};
use crate::signal::{rms, SignalRecord};
use crate::ukf::UkfSettings;

pub const SCHEMA: &str = "experiment/1";

pub const OPEN_NOISE: u64 = 1;
pub const CLOSED_NOISE: u64 = 2;
pub const SINE_NOISE: u64 = 3;

/// Seed of item `index` of stream `stream`, drawn from the master seed.
pub fn derive_seed(master: u64, stream: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream((stream << 32) | index);
    rng.next_u64()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScenarioId {
    /// Distortion analysis of the Duffing oscillator without control.
    DuffingOpen,
    /// Duffing oscillator linearised with the full identified model.
    DuffingLinearised,
    /// Same, with the quadratic term removed from the controller's model.
    DuffingCubicOnly,
    /// Full model driven at a larger amplitude than it was identified on.
    DuffingExtrapolated,
    /// Beam model with an artificial hardening spring.
    BeamSurrogate,
}

impl ScenarioId {
    pub const ALL: [ScenarioId; 5] = [
        ScenarioId::DuffingOpen,
        ScenarioId::DuffingLinearised,
        ScenarioId::DuffingCubicOnly,
        ScenarioId::DuffingExtrapolated,
        ScenarioId::BeamSurrogate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScenarioId::DuffingOpen => "duffing-open",
            ScenarioId::DuffingLinearised => "duffing-linearised",
            ScenarioId::DuffingCubicOnly => "duffing-cubic-only",
            ScenarioId::DuffingExtrapolated => "duffing-extrapolated",
            ScenarioId::BeamSurrogate => "beam-surrogate",
        }
    }

    /// The configuration shipped with the crate for this scenario.
    pub fn shipped_config(self) -> &'static str {
        match self {
            ScenarioId::DuffingOpen => include_str!("../configs/duffing-open.toml"),
            ScenarioId::DuffingLinearised => include_str!("../configs/duffing-linearised.toml"),
            ScenarioId::DuffingCubicOnly => include_str!("../configs/duffing-cubic-only.toml"),
            ScenarioId::DuffingExtrapolated => include_str!("../configs/duffing-extrapolated.toml"),
            ScenarioId::BeamSurrogate => include_str!("../configs/beam-surrogate.toml"),
        }
    }
}

impl fmt::Display for ScenarioId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScenarioId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|id| id.name() == s)
            .ok_or_else(|| {
                let known: Vec<_> = Self::ALL.iter().map(|id| id.name()).collect();
                Error::Config(format!("unknown scenario `{s}` (known: {})", known.join(", ")))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PlantConfig {
    /// Continuous-time Duffing oscillator integrated with RK4.
    Duffing {
        #[serde(flatten)]
        params: DuffingParams,
    },
    /// A discrete-time model, by default reduced to its linear part, with a
    /// cubic spring fed back from the previous output sample.
    Surrogate {
        model: String,
        k_c: f64,
        /// Keep the model's polynomial term instead of taking the linear part.
        #[serde(default)]
        keep_polynomial: bool,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// `bundled:<name>` or a path to a model file.
    pub source: String,
    /// Zero the quadratic column of E before use.
    #[serde(default)]
    pub cubic_only: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExcitationConfig {
    pub n_samples: usize,
    pub fs: f64,
    pub f_min: f64,
    pub f_max: f64,
    pub rms: f64,
    /// Odd lines per group with one withheld; 0 gives a full multisine.
    pub group_size: usize,
    /// Amplitude of the comparison run, for scenarios that need one.
    #[serde(default)]
    pub baseline_rms: Option<f64>,
}

impl ExcitationConfig {
    pub fn spec(&self, seed: u64) -> MultisineSpec {
        MultisineSpec {
            n_samples: self.n_samples,
            fs: self.fs,
            f_min: self.f_min,
            f_max: self.f_max,
            rms: self.rms,
            kind: if self.group_size == 0 {
                MultisineKind::Full
            } else {
                MultisineKind::OddWithDetection {
                    group_size: self.group_size,
                }
            },
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunSize {
    pub realisations: usize,
    pub periods: usize,
    /// Leading periods dropped as transient.
    pub discard: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisConfig {
    /// Band centres in Hz; the first is the resonance.
    pub centres: Vec<f64>,
    pub half_width: f64,
    /// Search range for resonance peaks of the frequency response.
    #[serde(default)]
    pub peak_range: Option<[f64; 2]>,
    /// Upper edge of the low-frequency band used as the static level.
    #[serde(default)]
    pub dc_band: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SineConfig {
    pub frequency: f64,
    pub amplitude: f64,
    /// Length of the test, s.
    pub duration: f64,
    /// Leading part left out of the metrics, s.
    pub settle: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub schema: String,
    pub scenario: ScenarioId,
    /// Master seed.
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    pub size: RunSize,
    /// Realisation and period counts used by `--full-scale`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub full_scale: Option<RunSize>,
    pub plant: PlantConfig,
    pub model: ModelConfig,
    pub excitation: ExcitationConfig,
    pub rates: ClosedLoopConfig,
    pub mpc: MpcWeights,
    pub ukf: UkfSettings,
    /// Sensor noise of the open-loop runs; closed loops reuse its standard deviation.
    pub noise: NoiseLevel,
    pub analysis: AnalysisConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sine: Option<SineConfig>,
    /// Directory that relative model paths are resolved against.
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        if cfg.schema != SCHEMA {
            return Err(Error::Config(format!(
                "unsupported config schema `{}` (expected `{SCHEMA}`)",
                cfg.schema
            )));
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut cfg = Self::from_toml(&std::fs::read_to_string(path)?)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf);
        Ok(cfg)
    }

    pub fn shipped(id: ScenarioId) -> Self {
        Self::from_toml(id.shipped_config()).expect("shipped configs are valid")
    }

    /// Switches to the full-scale realisation and period counts.
    pub fn use_full_scale(&mut self) -> Result<()> {
        self.size = self
            .full_scale
            .ok_or_else(|| Error::Config(format!("{} has no full-scale settings", self.scenario)))?;
        Ok(())
    }

    pub fn spec(&self) -> MultisineSpec {
        self.excitation.spec(self.seed)
    }

    fn document(&self, source: &str) -> Result<String> {
        if let Some(name) = source.strip_prefix("bundled:") {
            return bundled::document(name)
                .map(str::to_string)
                .ok_or_else(|| Error::Config(format!("no bundled model named `{name}`")));
        }
        let path = match &self.base_dir {
            Some(dir) if Path::new(source).is_relative() => dir.join(source),
            _ => PathBuf::from(source),
        };
        std::fs::read_to_string(&path)
            .map_err(|e| Error::Config(format!("cannot read model {}: {e}", path.display())))
    }

    /// Controller model, with the quadratic term removed when configured.
    pub fn model(&self) -> Result<PolyNlssModel> {
        let m = PolyNlssModel::from_toml(&self.document(&self.model.source)?)?;
        if self.model.cubic_only {
            zero_quadratic(&m)
        } else {
            Ok(m)
        }
    }

    /// SHA-256 of every model document the run reads.
    pub fn model_hashes(&self) -> Result<BTreeMap<String, String>> {
        let mut out = BTreeMap::new();
        out.insert(self.model.source.clone(), io::content_hash(&self.document(&self.model.source)?));
        if let PlantConfig::Surrogate { model, .. } = &self.plant {
            out.insert(model.clone(), io::content_hash(&self.document(model)?));
        }
        Ok(out)
    }

    pub fn plant(&self) -> Result<Box<dyn Plant>> {
        Ok(match &self.plant {
            PlantConfig::Duffing { params } => Box::new(DuffingPlant::new(*params, self.rates.substep())?),
            PlantConfig::Surrogate {
                model,
                k_c,
                keep_polynomial,
            } => {
                let m = PolyNlssModel::from_toml(&self.document(model)?)?;
                let m = if *keep_polynomial { m } else { m.linear_part() };
                Box::new(SurrogatePlant::new(m, *k_c))
            }
        })
    }

    /// Checks every cross-module constraint before anything runs.
    pub fn validate(&self) -> Result<()> {
        let np = self.rates.validate()?;
        let model = self.model()?;
        if ((model.ts() - self.rates.ts_in) / self.rates.ts_in).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "model sample time {} differs from ts_in {}",
                model.ts(),
                self.rates.ts_in
            )));
        }
        if ((self.excitation.fs * self.rates.ts_out) - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "excitation rate {} Hz must equal the outer-loop rate {} Hz",
                self.excitation.fs,
                1.0 / self.rates.ts_out
            )));
        }
        let plant = self.plant()?;
        drop(plant);
        if let PlantConfig::Surrogate { model, .. } = &self.plant {
            let m = PolyNlssModel::from_toml(&self.document(model)?)?;
            crate::closed_loop::integer_ratio(self.rates.ts_in, m.ts(), "inner rate/surrogate rate")?;
        }
        let s = self.size;
        if s.realisations == 0 || s.periods <= s.discard {
            return Err(Error::Config(format!(
                "need at least one realisation and more periods ({}) than discarded ({})",
                s.periods, s.discard
            )));
        }
        crate::excitation::classify(&self.spec())?;
        if self.analysis.centres.is_empty() || !(self.analysis.half_width > 0.0) {
            return Err(Error::Config("analysis needs band centres and a positive half width".into()));
        }
        if !(self.mpc.q > 0.0 && self.mpc.r_delta > 0.0) {
            return Err(Error::Config("MPC weights must be positive".into()));
        }
        precompute_gains(&model, self.mpc, np)?;
        if !(self.ukf.r_cov > 0.0 && self.ukf.q_scale >= 0.0) {
            return Err(Error::Config("UKF covariances must be positive".into()));
        }
        match self.scenario {
            ScenarioId::DuffingExtrapolated if self.excitation.baseline_rms.is_none() => {
                return Err(Error::Config("extrapolation needs excitation.baseline_rms".into()));
            }
            ScenarioId::BeamSurrogate if self.sine.is_none() => {
                return Err(Error::Config("beam scenario needs a [sine] section".into()));
            }
            ScenarioId::DuffingCubicOnly if !self.model.cubic_only => {
                return Err(Error::Config("cubic-only scenario needs model.cubic_only = true".into()));
            }
            _ => {}
        }
        if self.scenario != ScenarioId::DuffingOpen && self.spec().kind == MultisineKind::Full {
            return Err(Error::Config("distortion analysis needs detection lines (group_size > 0)".into()));
        }
        Ok(())
    }
}

/// Copy of `model` with the E column of the quadratic monomial zeroed.
pub fn zero_quadratic(model: &PolyNlssModel) -> Result<PolyNlssModel> {
    let col = model
        .exponents()
        .iter()
        .position(|&p| p == 2)
        .ok_or_else(|| Error::InvalidModel("model has no quadratic monomial".into()))?;
    let mut e: DMatrix<f64> = model.e().clone();
    e.column_mut(col).fill(0.0);
    model.with_e(e)
}

/// A threshold on one summary value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Bound {
    Within { lo: f64, hi: f64 },
    AtMost { hi: f64 },
    AtLeast { lo: f64 },
}

impl Bound {
    pub fn holds(&self, x: f64) -> bool {
        match *self {
            Bound::Within { lo, hi } => x >= lo && x <= hi,
            Bound::AtMost { hi } => x <= hi,
            Bound::AtLeast { lo } => x >= lo,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    /// NaN when the value could not be computed.
    pub value: f64,
    pub bound: Bound,
    pub passed: bool,
}

impl Check {
    pub fn new(name: impl Into<String>, value: f64, bound: Bound) -> Self {
        Self {
            name: name.into(),
            value,
            bound,
            passed: value.is_finite() && bound.holds(value),
        }
    }

    fn opt(name: impl Into<String>, value: Option<f64>, bound: Bound) -> Self {
        Self::new(name, value.unwrap_or(f64::NAN), bound)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioResult {
    pub scenario: ScenarioId,
    pub out_dir: PathBuf,
    pub artifacts: Vec<PathBuf>,
    pub metrics: BTreeMap<String, f64>,
    pub checks: Vec<Check>,
    /// Set when a run blew up; outputs written before that point are kept.
    pub diverged: Option<String>,
}

impl ScenarioResult {
    pub fn passed(&self) -> bool {
        self.diverged.is_none() && self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }
}

#[derive(Serialize)]
struct RunMetadata<'a> {
    scenario: ScenarioId,
    crate_version: &'static str,
    seed: u64,
    seeds: BTreeMap<&'static str, Vec<u64>>,
    model_sha256: BTreeMap<String, String>,
    config: &'a ExperimentConfig,
}

/// Artifact bookkeeping for one output directory.
struct Outputs {
    dir: PathBuf,
    written: Vec<PathBuf>,
}

impl Outputs {
    fn new(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            written: Vec::new(),
        })
    }

    fn path(&mut self, name: &str) -> PathBuf {
        let p = self.dir.join(name);
        self.written.push(p.clone());
        p
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let p = self.path(name);
        io::write_json(p, value)
    }

    fn report(&mut self, stem: &str, rep: &DistortionReport) -> Result<()> {
        let p = self.path(&format!("{stem}.csv"));
        io::write_report_csv(p, rep)?;
        self.json(&format!("{stem}.json"), rep)
    }
}

fn seeds_of(cfg: &ExperimentConfig, stream: u64) -> Vec<u64> {
    (0..cfg.size.realisations as u64).map(|r| derive_seed(cfg.seed, stream, r)).collect()
}

fn write_metadata(cfg: &ExperimentConfig, out: &mut Outputs) -> Result<()> {
    let mut seeds = BTreeMap::new();
    seeds.insert("excitation", vec![cfg.seed]);
    seeds.insert("open_noise", seeds_of(cfg, OPEN_NOISE));
    seeds.insert("closed_noise", seeds_of(cfg, CLOSED_NOISE));
    if cfg.sine.is_some() {
        seeds.insert("sine_noise", vec![derive_seed(cfg.seed, SINE_NOISE, 0)]);
    }
    let meta = RunMetadata {
        scenario: cfg.scenario,
        crate_version: env!("CARGO_PKG_VERSION"),
        seed: cfg.seed,
        seeds,
        model_sha256: cfg.model_hashes()?,
        config: cfg,
    };
    out.json("metadata.json", &meta)?;
    let p = out.path("config.toml");
    std::fs::write(p, cfg.to_toml())?;
    Ok(())
}

/// Multisine realisations at a given RMS level.
pub fn excitations(cfg: &ExperimentConfig, rms_level: f64) -> Result<Vec<Realisation>> {
    let mut spec = cfg.spec();
    spec.rms = rms_level;
    realisations(&spec, cfg.size.realisations, cfg.size.periods)
}

/// Open-loop runs, one per realisation, logged at `ts_in`.
pub fn open_loop_runs(cfg: &ExperimentConfig, exc: &[Realisation]) -> Result<Vec<SignalRecord>> {
    let seeds = seeds_of(cfg, OPEN_NOISE);
    exc.par_iter()
        .zip(seeds)
        .map(|(r, seed)| {
            let mut plant = cfg.plant()?;
            let noise = NoiseConfig { level: cfg.noise, seed };
            run_open_loop(plant.as_mut(), &r.record.u, 1.0 / cfg.excitation.fs, cfg.rates.ts_in, &noise)
        })
        .collect()
}

/// Noise standard deviation of each open-loop run, reused by the closed loops.
pub fn frozen_sigmas(cfg: &ExperimentConfig, open: &[SignalRecord]) -> Vec<f64> {
    open.iter()
        .map(|rec| {
            let y = rec.y_true.as_deref().unwrap_or(&rec.y);
            NoiseConfig { level: cfg.noise, seed: 0 }.sigma_for(rms(y))
        })
        .collect()
}

/// Linearised runs with the configured model, one per realisation.
pub fn closed_loop_runs(
    cfg: &ExperimentConfig,
    model: &PolyNlssModel,
    exc: &[Realisation],
    sigmas: &[f64],
) -> Result<Vec<ClosedLoopRecord>> {
    let seeds = seeds_of(cfg, CLOSED_NOISE);
    let ukf = cfg.ukf.config(model.n());
    exc.par_iter()
        .zip(seeds)
        .zip(sigmas)
        .map(|((r, seed), &sigma)| {
            let mut plant = cfg.plant()?;
            run_linearised(
                plant.as_mut(),
                model,
                &r.record.u,
                cfg.mpc,
                ukf.clone(),
                NoiseSource::new(sigma, seed),
                &cfg.rates,
            )
        })
        .collect()
}

/// Distortion report of records that each hold `size.periods` periods.
pub fn analyse_records(
    cfg: &ExperimentConfig,
    exc: &[Realisation],
    records: &[SignalRecord],
) -> Result<(DistortionReport, DistortionSummary)> {
    let design = &exc[0].design;
    let est = spectra(records, design, cfg.size.periods, cfg.size.discard)?;
    let rep = distortions(&est, design)?;
    let summary = rep.summarise(&cfg.analysis.centres, cfg.analysis.half_width)?;
    Ok((rep, summary))
}

fn steady(cfg: &ExperimentConfig, recs: &[ClosedLoopRecord]) -> Vec<ClosedLoopRecord> {
    recs.iter()
        .map(|r| r.tail(r.len() / cfg.size.periods * cfg.size.discard))
        .collect()
}

fn record_metrics(metrics: &mut BTreeMap<String, f64>, prefix: &str, m: &LoopMetrics) {
    metrics.insert(format!("{prefix}.rms_output"), m.rms_output);
    metrics.insert(format!("{prefix}.rms_mpc"), m.rms_mpc);
    metrics.insert(format!("{prefix}.rms_ukf"), m.rms_ukf);
    metrics.insert(format!("{prefix}.mpc_percent"), m.mpc_percent);
    metrics.insert(format!("{prefix}.ukf_percent"), m.ukf_percent);
    metrics.insert(format!("{prefix}.mean_ukf"), m.mean_ukf);
    metrics.insert(format!("{prefix}.stderr_ukf"), m.stderr_ukf);
}

fn record_summary(metrics: &mut BTreeMap<String, f64>, prefix: &str, s: &DistortionSummary) {
    metrics.insert(format!("{prefix}.resonance_hz"), s.resonance_hz);
    for b in &s.bands {
        let c = b.centre;
        for (name, v) in [
            ("odd_rel_db", b.odd_rel_db),
            ("even_rel_db", b.even_rel_db),
            ("noise_rel_db", b.noise_rel_db),
            ("odd_peak_rel_db", b.odd_peak_rel_db),
            ("even_peak_rel_db", b.even_peak_rel_db),
        ] {
            if let Some(v) = v {
                metrics.insert(format!("{prefix}.{c}hz.{name}"), v);
            }
        }
    }
}

/// Worst (highest) odd or even band level over all bands.
fn worst_residual(s: &DistortionSummary) -> Option<f64> {
    s.bands
        .iter()
        .flat_map(|b| [b.odd_rel_db, b.even_rel_db])
        .flatten()
        .max_by(f64::total_cmp)
}

fn suppression_checks(checks: &mut Vec<Check>, tag: &str, s: &DistortionSummary, limit: f64) {
    for b in &s.bands {
        for (class, v) in [("odd", b.odd_rel_db), ("even", b.even_rel_db)] {
            checks.push(Check::opt(
                format!("{tag} {class} level near {} Hz (dB rel. output)", b.centre),
                v,
                Bound::AtMost { hi: -limit },
            ));
        }
    }
}

/// State shared by the Duffing pipelines.
struct Study<'a> {
    cfg: &'a ExperimentConfig,
    out: Outputs,
    metrics: BTreeMap<String, f64>,
    checks: Vec<Check>,
}

/// One amplitude level: excitations, open-loop runs and their analysis.
struct OpenStage {
    exc: Vec<Realisation>,
    records: Vec<SignalRecord>,
    sigmas: Vec<f64>,
    report: DistortionReport,
    summary: DistortionSummary,
}

struct ClosedStage {
    metrics: LoopMetrics,
    /// Outer input against measured output, per realisation.
    records: Vec<SignalRecord>,
    report: DistortionReport,
    summary: DistortionSummary,
}

impl Study<'_> {
    fn open_stage(&mut self, rms_level: f64, tag: &str) -> Result<OpenStage> {
        let cfg = self.cfg;
        let exc = excitations(cfg, rms_level)?;
        for (r, e) in exc.iter().enumerate() {
            let p = self.out.path(&format!("{tag}excitation_r{r}.csv"));
            io::write_excitation_csv(p, cfg.excitation.fs, &e.record.u)?;
            self.out.json(&format!("{tag}excitation_r{r}.json"), &e.design.metadata())?;
        }
        let open = open_loop_runs(cfg, &exc)?;
        for (r, rec) in open.iter().enumerate() {
            let p = self.out.path(&format!("{tag}open_r{r}.csv"));
            io::write_signal_csv(p, rec)?;
        }
        let sigmas = frozen_sigmas(cfg, &open);
        let (report, summary) = analyse_records(cfg, &exc, &open)?;
        self.out.report(&format!("{tag}report_open"), &report)?;
        self.out.json(&format!("{tag}summary_open.json"), &summary)?;
        record_summary(&mut self.metrics, &format!("{tag}open"), &summary);
        Ok(OpenStage {
            exc,
            records: open,
            sigmas,
            report,
            summary,
        })
    }

    /// Linearised runs on the excitations of `open`; returns pooled metrics
    /// and the distortion analysis of the closed loop.
    fn closed_stage(&mut self, model: &PolyNlssModel, open: &OpenStage, tag: &str) -> Result<ClosedStage> {
        let cfg = self.cfg;
        let recs = closed_loop_runs(cfg, model, &open.exc, &open.sigmas)?;
        for (r, rec) in recs.iter().enumerate() {
            let p = self.out.path(&format!("{tag}closed_r{r}.csv"));
            io::write_closed_loop_csv(p, rec)?;
        }
        let m = LoopMetrics::pooled(&steady(cfg, &recs));
        record_metrics(&mut self.metrics, &format!("{tag}closed"), &m);
        let io_recs: Vec<SignalRecord> = recs.iter().map(ClosedLoopRecord::io_record).collect();
        let (rep, summary) = analyse_records(cfg, &open.exc, &io_recs)?;
        self.out.report(&format!("{tag}report_closed"), &rep)?;
        self.out.json(&format!("{tag}summary_closed.json"), &summary)?;
        self.out
            .json(&format!("{tag}comparison.json"), &compare_runs(&open.report, &rep)?)?;
        record_summary(&mut self.metrics, &format!("{tag}closed"), &summary);
        Ok(ClosedStage {
            metrics: m,
            records: io_recs,
            report: rep,
            summary,
        })
    }

    fn open_check(&mut self, s: &DistortionSummary) {
        self.checks.push(Check::opt(
            "open-loop odd level at resonance (dB rel. output)",
            s.bands[0].odd_rel_db,
            Bound::Within { lo: -15.0, hi: -5.0 },
        ));
    }
}

fn duffing_study(study: &mut Study<'_>) -> Result<()> {
    let cfg = study.cfg;
    let model = cfg.model()?;
    let gains = precompute_gains(&model, cfg.mpc, cfg.rates.np_max()?)?;
    if cfg.scenario != ScenarioId::DuffingOpen {
        let p = study.out.path("gains.txt");
        std::fs::write(p, gains.dump())?;
    }
    match cfg.scenario {
        ScenarioId::DuffingOpen => {
            let open = study.open_stage(cfg.excitation.rms, "")?;
            study.open_check(&open.summary);
        }
        ScenarioId::DuffingLinearised => {
            let open = study.open_stage(cfg.excitation.rms, "")?;
            study.open_check(&open.summary);
            let closed = study.closed_stage(&model, &open, "")?;
            let (m, s) = (closed.metrics, closed.summary);
            study.checks.push(Check::new(
                "MPC error (% of output RMS)",
                m.mpc_percent,
                Bound::Within { lo: 0.02, hi: 0.2 },
            ));
            study.checks.push(Check::new(
                "UKF error (% of output RMS)",
                m.ukf_percent,
                Bound::Within { lo: 1.5, hi: 6.0 },
            ));
            suppression_checks(&mut study.checks, "linearised", &s, 35.0);
        }
        ScenarioId::DuffingCubicOnly => {
            let open = study.open_stage(cfg.excitation.rms, "")?;
            let full = full_model(cfg)?;
            let m_full = study.closed_stage(&full, &open, "full_")?.metrics;
            let cubic = study.closed_stage(&model, &open, "")?;
            let (m_cub, rep_cub) = (cubic.metrics, cubic.report);
            let c = cfg.analysis.centres[0];
            let (_, _, even) = ComparisonReport::band_deltas(&open.report, &rep_cub, c, cfg.analysis.half_width);
            let mpc_ratio = m_cub.mpc_percent / m_full.mpc_percent;
            let ukf_ratio = m_cub.ukf_percent / m_full.ukf_percent;
            study.metrics.insert("mpc_ratio_cubic_over_full".into(), mpc_ratio);
            study.metrics.insert("ukf_ratio_cubic_over_full".into(), ukf_ratio);
            if let Some(d) = even {
                study.metrics.insert("even_reduction_at_resonance_db".into(), -d);
            }
            study.checks.push(Check::new(
                "MPC error ratio cubic-only / full",
                mpc_ratio,
                Bound::Within { lo: 0.5, hi: 2.0 },
            ));
            study.checks.push(Check::new(
                "UKF error ratio cubic-only / full",
                ukf_ratio,
                Bound::AtLeast { lo: 1.7 },
            ));
            study.checks.push(Check::opt(
                "even-distortion reduction at resonance (dB)",
                even.map(|d| -d),
                Bound::Within { lo: 8.0, hi: 25.0 },
            ));
            study.checks.push(Check::new(
                "UKF error mean / standard error",
                m_cub.mean_ukf.abs() / m_cub.stderr_ukf,
                Bound::AtLeast { lo: 3.0 },
            ));
        }
        ScenarioId::DuffingExtrapolated => {
            let base_rms = cfg.excitation.baseline_rms.expect("validated");
            let base = study.open_stage(base_rms, "baseline_")?;
            let s_base = study.closed_stage(&model, &base, "baseline_")?.summary;
            let open = study.open_stage(cfg.excitation.rms, "")?;
            let closed = study.closed_stage(&model, &open, "")?;
            let (m, s) = (closed.metrics, closed.summary);
            study.checks.push(Check::new(
                "MPC error (% of output RMS)",
                m.mpc_percent,
                Bound::AtMost { hi: 0.1 },
            ));
            suppression_checks(&mut study.checks, "extrapolated", &s, 30.0);
            let (w, w_base) = (worst_residual(&s), worst_residual(&s_base));
            study.checks.push(Check::opt(
                "worst residual rise over baseline amplitude (dB)",
                w.zip(w_base).map(|(a, b)| a - b),
                Bound::AtLeast { lo: 0.0 },
            ));
        }
        ScenarioId::BeamSurrogate => unreachable!("handled by beam_study"),
    }
    Ok(())
}

/// The full model for comparison in the cubic-only scenario.
fn full_model(cfg: &ExperimentConfig) -> Result<PolyNlssModel> {
    let mut full = cfg.clone();
    full.model.cubic_only = false;
    full.model()
}

fn beam_study(study: &mut Study<'_>) -> Result<()> {
    let cfg = study.cfg;
    let model = cfg.model()?;
    let sine = cfg.sine.expect("validated");
    let sigma = cfg.noise_sigma_fixed()?;
    let gains = precompute_gains(&model, cfg.mpc, cfg.rates.np_max()?)?;
    let p = study.out.path("gains.txt");
    std::fs::write(p, gains.dump())?;

    // Open loop first so the before/after comparison survives a closed-loop blow-up.
    let open = study.open_stage(cfg.excitation.rms, "")?;
    let range = cfg.analysis.peak_range.unwrap_or([0.0, cfg.excitation.f_max]);
    let dc_band = cfg.analysis.dc_band.unwrap_or(1.0);
    let open_est = spectra(&open.records, &open.exc[0].design, cfg.size.periods, cfg.size.discard)?;
    let open_peak = bla(&open_est)?.peak_in(range[0], range[1]).map(|p| p.0);
    if let Some(f) = open_peak {
        study.metrics.insert("open.frf_peak_hz".into(), f);
    }
    let open_dc = open.report.mean_output_db(0.0, dc_band);

    // A blow-up in one test leaves its checks unevaluated (NaN, failed) and
    // the other test still runs.
    let mut blow_up = None;
    let mut diverged = |e: Error| -> Result<()> {
        if !e.is_divergence() {
            return Err(e);
        }
        blow_up.get_or_insert(e);
        Ok(())
    };

    let (err, peak) = match sine_test(study, &model, &sine, sigma) {
        Ok(x) => x,
        Err(e) => {
            diverged(e)?;
            (f64::NAN, f64::NAN)
        }
    };
    study.checks.push(Check::new(
        "sine tracking error (% of output RMS)",
        err,
        Bound::Within { lo: 0.5, hi: 3.0 },
    ));
    study.checks.push(Check::new(
        "plant-input peak / outer amplitude",
        peak,
        Bound::AtLeast { lo: 10.0 },
    ));

    let (closed_peak, closed_dc) = match study.closed_stage(&model, &open, "") {
        Ok(closed) => {
            let est = spectra(&closed.records, &open.exc[0].design, cfg.size.periods, cfg.size.discard)?;
            let peak = bla(&est)?.peak_in(range[0], range[1]).map(|p| p.0);
            if let Some(f) = peak {
                study.metrics.insert("closed.frf_peak_hz".into(), f);
            }
            (peak, closed.report.mean_output_db(0.0, dc_band))
        }
        Err(e) => {
            diverged(e)?;
            (None, None)
        }
    };
    study.checks.push(Check::opt(
        "resonance shift (open-loop peak minus linearised peak, Hz)",
        open_peak.zip(closed_peak).map(|(a, b)| a - b),
        Bound::AtLeast { lo: f64::MIN_POSITIVE },
    ));
    study.checks.push(Check::opt(
        "static level increase (dB)",
        open_dc.zip(closed_dc).map(|(a, b)| b - a),
        Bound::AtLeast { lo: f64::MIN_POSITIVE },
    ));
    blow_up.map_or(Ok(()), Err)
}

/// Outer-loop sine through the linearised loop; returns the tracking error
/// (% of output RMS) and the plant-input peak relative to the sine amplitude.
fn sine_test(study: &mut Study<'_>, model: &PolyNlssModel, sine: &SineConfig, sigma: f64) -> Result<(f64, f64)> {
    let cfg = study.cfg;
    let n_out = (sine.duration / cfg.rates.ts_out).round() as usize;
    let v: Vec<f64> = (0..n_out)
        .map(|k| sine.amplitude * (std::f64::consts::TAU * sine.frequency * k as f64 * cfg.rates.ts_out).sin())
        .collect();
    let mut plant = cfg.plant()?;
    let noise = NoiseSource::new(sigma, derive_seed(cfg.seed, SINE_NOISE, 0));
    let rec = run_linearised(plant.as_mut(), model, &v, cfg.mpc, cfg.ukf.config(model.n()), noise, &cfg.rates)?;
    let p = study.out.path("sine_closed.csv");
    io::write_closed_loop_csv(p, &rec)?;
    let tail = rec.tail(((sine.settle / cfg.rates.ts_in).round() as usize).min(rec.len()));
    let m = LoopMetrics::from_record(&tail);
    record_metrics(&mut study.metrics, "sine", &m);
    let u_peak = tail.u.iter().fold(0.0f64, |a, u| a.max(u.abs()));
    Ok((m.mpc_percent, u_peak / sine.amplitude))
}

impl ExperimentConfig {
    /// Standard deviation for configs that fix the noise level in output units.
    fn noise_sigma_fixed(&self) -> Result<f64> {
        match self.noise {
            NoiseLevel::Sigma(s) => Ok(s),
            NoiseLevel::None => Ok(0.0),
            NoiseLevel::SnrDb(_) => Err(Error::Config(
                "the beam scenario needs a fixed noise level (sigma) for its sine test".into(),
            )),
        }
    }
}

/// Runs a scenario end to end and writes everything to `out_dir`.
///
/// Divergence of a closed loop does not abort: the result carries the
/// message, the checks computed so far, and everything already written.
pub fn run_scenario(cfg: &ExperimentConfig, out_dir: &Path) -> Result<ScenarioResult> {
    let name = cfg.scenario.name();
    cfg.validate().map_err(|e| e.in_scenario(name))?;
    let mut study = Study {
        cfg,
        out: Outputs::new(out_dir)?,
        metrics: BTreeMap::new(),
        checks: Vec::new(),
    };
    write_metadata(cfg, &mut study.out)?;
    log::info!("running {name} with seed {}", cfg.seed);
    let outcome = match cfg.scenario {
        ScenarioId::BeamSurrogate => beam_study(&mut study),
        _ => duffing_study(&mut study),
    };
    let diverged = match outcome {
        Ok(()) => None,
        Err(e) if e.is_divergence() => {
            log::warn!("{name}: {e}");
            study.checks.push(Check::new("closed loop stays bounded", 0.0, Bound::AtLeast { lo: 1.0 }));
            Some(e.to_string())
        }
        Err(e) => return Err(e.in_scenario(name)),
    };
    let summary_path = study.out.path("summary.json");
    let mut result = ScenarioResult {
        scenario: cfg.scenario,
        out_dir: out_dir.to_path_buf(),
        artifacts: study.out.written,
        metrics: study.metrics,
        checks: study.checks,
        diverged,
    };
    result.artifacts.sort();
    io::write_json(summary_path, &result)?;
    Ok(result)
}

/// Writes the multisine realisations of a config as `t, u` CSV plus design JSON.
pub fn excite(cfg: &ExperimentConfig, out_dir: &Path) -> Result<Vec<PathBuf>> {
    crate::excitation::classify(&cfg.spec())?;
    let mut out = Outputs::new(out_dir)?;
    for (r, e) in excitations(cfg, cfg.excitation.rms)?.iter().enumerate() {
        let p = out.path(&format!("excitation_r{r}.csv"));
        io::write_excitation_csv(p, cfg.excitation.fs, &e.record.u)?;
        out.json(&format!("excitation_r{r}.json"), &e.design.metadata())?;
    }
    Ok(out.written)
}

/// Open-loop runs of every realisation.
pub fn simulate(cfg: &ExperimentConfig, out_dir: &Path) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let mut out = Outputs::new(out_dir)?;
    write_metadata(cfg, &mut out)?;
    let exc = excitations(cfg, cfg.excitation.rms)?;
    for (r, rec) in open_loop_runs(cfg, &exc)?.iter().enumerate() {
        let p = out.path(&format!("open_r{r}.csv"));
        io::write_signal_csv(p, rec)?;
    }
    Ok(out.written)
}

/// Linearised runs of every realisation, plus pooled metrics.
pub fn linearise(cfg: &ExperimentConfig, out_dir: &Path) -> Result<(LoopMetrics, Vec<PathBuf>)> {
    cfg.validate()?;
    let mut out = Outputs::new(out_dir)?;
    write_metadata(cfg, &mut out)?;
    let model = cfg.model()?;
    let exc = excitations(cfg, cfg.excitation.rms)?;
    let sigmas = match cfg.noise {
        NoiseLevel::SnrDb(_) => frozen_sigmas(cfg, &open_loop_runs(cfg, &exc)?),
        _ => vec![cfg.noise_sigma_fixed()?; exc.len()],
    };
    let recs = closed_loop_runs(cfg, &model, &exc, &sigmas)?;
    for (r, rec) in recs.iter().enumerate() {
        let p = out.path(&format!("closed_r{r}.csv"));
        io::write_closed_loop_csv(p, rec)?;
    }
    let m = LoopMetrics::pooled(&steady(cfg, &recs));
    out.json("metrics.json", &m)?;
    Ok((m, out.written))
}

/// Distortion report of measured records against the config's excitation design.
pub fn analyse(cfg: &ExperimentConfig, inputs: &[PathBuf], out_dir: &Path) -> Result<(DistortionSummary, Vec<PathBuf>)> {
    let exc = excitations(cfg, cfg.excitation.rms)?;
    if inputs.len() > exc.len() {
        return Err(Error::Config(format!(
            "{} records given but the config defines {} realisations",
            inputs.len(),
            exc.len()
        )));
    }
    let records: Vec<SignalRecord> = inputs.iter().map(io::read_signal_csv).collect::<Result<_>>()?;
    let mut out = Outputs::new(out_dir)?;
    let (rep, summary) = analyse_records(cfg, &exc[..records.len()], &records)?;
    out.report("report", &rep)?;
    out.json("summary.json", &summary)?;
    Ok((summary, out.written))
}

/// Per-line and band deltas between two stored reports.
pub fn compare(
    before: &Path,
    after: &Path,
    centres: &[f64],
    half_width: f64,
    out_dir: &Path,
) -> Result<(Vec<analysis::BandDelta>, Vec<PathBuf>)> {
    let b: DistortionReport = io::read_json(before)?;
    let a: DistortionReport = io::read_json(after)?;
    let cmp = compare_runs(&b, &a)?;
    let bands = centres
        .iter()
        .map(|&c| analysis::BandDelta::new(&b, &a, c, half_width))
        .collect::<Vec<_>>();
    let mut out = Outputs::new(out_dir)?;
    out.json("comparison.json", &cmp)?;
    out.json("band_deltas.json", &bands)?;
    Ok((bands, out.written))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_configs_parse_validate_and_round_trip() {
        for id in ScenarioId::ALL {
            let cfg = ExperimentConfig::shipped(id);
            assert_eq!(cfg.scenario, id);
            cfg.validate().unwrap_or_else(|e| panic!("{id}: {e}"));
            let back = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
            assert_eq!(back, cfg);
            assert_eq!(id.name().parse::<ScenarioId>().unwrap(), id);
        }
    }

    #[test]
    fn wrong_schema_is_rejected() {
        let text = ScenarioId::DuffingOpen
            .shipped_config()
            .replace("experiment/1", "experiment/0");
        assert!(matches!(ExperimentConfig::from_toml(&text), Err(Error::Config(_))));
    }

    #[test]
    fn rate_mismatch_is_rejected() {
        let mut cfg = ExperimentConfig::shipped(ScenarioId::DuffingLinearised);
        cfg.rates.ts_in = 2e-3;
        cfg.rates.ts_out = 2e-2;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn unknown_scenario_name() {
        assert!("duffing".parse::<ScenarioId>().is_err());
    }

    #[test]
    fn zero_quadratic_keeps_the_rest() {
        let m = bundled::duffing();
        let z = zero_quadratic(&m).unwrap();
        assert_eq!(z.a(), m.a());
        assert_eq!(z.b(), m.b());
        assert_eq!(z.c(), m.c());
        assert!(z.e().column(0).iter().all(|&x| x == 0.0));
        assert_eq!(z.e().column(1), m.e().column(1));
        assert_eq!(zero_quadratic(&z).unwrap(), z);
    }

    #[test]
    fn zero_quadratic_needs_a_quadratic_term() {
        let m = bundled::duffing();
        let cubic = PolyNlssModel::new(
            m.a().clone(),
            m.b().clone(),
            m.c().clone(),
            m.e().columns(1, 1).into_owned(),
            vec![3],
            m.ts(),
        )
        .unwrap();
        assert!(matches!(zero_quadratic(&cubic), Err(Error::InvalidModel(_))));
    }

    #[test]
    fn derived_seeds_differ_by_stream_and_index() {
        let a = derive_seed(7, OPEN_NOISE, 0);
        assert_eq!(a, derive_seed(7, OPEN_NOISE, 0));
        assert_ne!(a, derive_seed(7, OPEN_NOISE, 1));
        assert_ne!(a, derive_seed(7, CLOSED_NOISE, 0));
        assert_ne!(a, derive_seed(8, OPEN_NOISE, 0));
    }

    #[test]
    fn bounds() {
        assert!(Check::new("x", 1.0, Bound::Within { lo: 0.0, hi: 1.0 }).passed);
        assert!(!Check::new("x", f64::NAN, Bound::AtMost { hi: 1.0 }).passed);
        assert!(!Check::new("x", -1.0, Bound::AtLeast { lo: 0.0 }).passed);
    }
}
