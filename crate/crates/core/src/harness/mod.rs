//! Experiment configuration and the end-to-end pipelines behind the CLI.
//!
//! A run directory holds everything needed to re-check a run later:
//!
//! ```text
//! <out>/<family>-seed<seed>/
//!     config.toml        the experiment configuration
//!     codebook.json      (gd, sgd)
//!     dataset.json       (gd, sgd)
//!     trajectory.bin     stored iterates, little-endian f64
//!     trajectory.json    layout, step indices, seed and event summary
//!     verify.json        closed-form, norm and margin checks
//!     risk.csv           one row per suffix length
//!     risk.json
//! ```

pub mod suites;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::codebook::{coherence, default_dprime, generate_codebook, Codebook, MAX_COHERENCE};
use crate::error::{Error, Result};
use crate::instance_gd::{
    good_event_gd, sample_gd_dataset, sample_gd_dataset_in_event, theorem_eta, GdDataset,
    GdEmpirical, GdInstance, GdParams,
};
use crate::instance_sgd::{
    force_good_event_sgd, good_event_sgd, sample_sgd_dataset, SgdDataset, SgdEmpirical,
    SgdInstance, SgdParams,
};
use crate::instance_smallstep::SmallStepParams;
use crate::objective::Objective;
use crate::optim::{
    read_checkpoint, run_gd, run_sgd, suffix_average, write_checkpoint, Record, Trajectory,
};
use crate::risk::{
    gap_report_gd, gap_report_sgd, gap_report_smallstep, write_csv_file, RiskReport,
};
use crate::smoothing::{verify_trajectory_preservation, SmoothingConfig};
use crate::vecops::max_abs_diff;
use crate::verify;

pub use suites::{cmd_acceptance, run_suite, CriterionResult, SUITES};

/// Environment variable naming the default output directory.
pub const OUTPUT_ENV: &str = "SCO_ADVERSARY_OUT";

/// Output directory used when neither the config nor the environment names
/// one.
pub const DEFAULT_OUTPUT: &str = "sco-out";

/// Stored trajectories above this many bytes keep only the suffix window.
pub const MEMORY_CAP_BYTES: usize = 1 << 30;

const CODEBOOK_ATTEMPTS: usize = 1_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Gd,
    Sgd,
    Smallstep,
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Family::Gd => "gd",
            Family::Sgd => "sgd",
            Family::Smallstep => "smallstep",
        })
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gd" => Ok(Family::Gd),
            "sgd" => Ok(Family::Sgd),
            "smallstep" => Ok(Family::Smallstep),
            _ => Err(Error::InvalidParams(format!(
                "unknown family `{s}` (gd, sgd, smallstep)"
            ))),
        }
    }
}

/// How datasets relate to the good events the closed forms assume.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EventPolicy {
    /// Redraw until the dataset lies in the event; the number of rejections
    /// is reported.
    #[default]
    RejectUntilE,
    /// Build an SGD dataset inside the event directly.
    ForceEPrime,
    /// Use the first draw as is.
    Unconditioned,
}

impl fmt::Display for EventPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EventPolicy::RejectUntilE => "reject-until-e",
            EventPolicy::ForceEPrime => "force-e-prime",
            EventPolicy::Unconditioned => "unconditioned",
        })
    }
}

impl FromStr for EventPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reject-until-e" => Ok(EventPolicy::RejectUntilE),
            "force-e-prime" => Ok(EventPolicy::ForceEPrime),
            "unconditioned" => Ok(EventPolicy::Unconditioned),
            _ => Err(Error::InvalidParams(format!(
                "unknown event policy `{s}` (reject-until-e, force-e-prime, unconditioned)"
            ))),
        }
    }
}

/// Either an explicit list or a half-open range `start..end`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Seeds {
    List(Vec<u64>),
    Range { start: u64, end: u64 },
}

impl Seeds {
    pub fn to_vec(&self) -> Vec<u64> {
        match self {
            Seeds::List(v) => v.clone(),
            Seeds::Range { start, end } => (*start..*end).collect(),
        }
    }
}

impl FromStr for Seeds {
    type Err = Error;

    /// `1,2,5` or `0..10`.
    fn from_str(s: &str) -> Result<Self> {
        let bad =
            || Error::InvalidParams(format!("cannot parse seeds `{s}` (use `1,2,5` or `0..10`)"));
        if let Some((a, b)) = s.split_once("..") {
            let start = a.trim().parse().map_err(|_| bad())?;
            let end = b.trim().parse().map_err(|_| bad())?;
            return Ok(Seeds::Range { start, end });
        }
        s.split(',')
            .map(|x| x.trim().parse().map_err(|_| bad()))
            .collect::<Result<_>>()
            .map(Seeds::List)
    }
}

fn default_true() -> bool {
    true
}
fn default_seeds() -> Seeds {
    Seeds::List(vec![0])
}
fn default_mc() -> usize {
    20_000
}
fn default_smoothing_samples() -> usize {
    100_000
}
fn default_max_draws() -> usize {
    10_000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub family: Family,
    /// Number of samples (gd, sgd).
    #[serde(default)]
    pub n: usize,
    /// Number of iterates (gd, smallstep).
    #[serde(rename = "T", default)]
    pub t: usize,
    /// Step size; when absent the theorem rule `1/(5√T)` (gd) or `1/(5√n)`
    /// (sgd) applies.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta: Option<f64>,
    /// Reject step sizes above the theorem rule instead of warning.
    #[serde(default = "default_true")]
    pub theorem_mode: bool,
    /// Codebook size (gd, sgd).
    #[serde(rename = "N", default)]
    pub universe: usize,
    /// Codebook dimension; defaults to `max(256, ⌈178 log2 N⌉)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dprime: Option<usize>,
    #[serde(default)]
    pub codebook_seed: u64,
    #[serde(default = "default_seeds")]
    pub seeds: Seeds,
    #[serde(default)]
    pub projected: bool,
    /// Suffix lengths `m`; defaults to `1` and the full run.
    #[serde(default)]
    pub suffix: Vec<usize>,
    #[serde(default = "default_mc")]
    pub mc_samples: usize,
    #[serde(default)]
    pub smoothing: bool,
    #[serde(default = "default_smoothing_samples")]
    pub smoothing_samples: usize,
    #[serde(default)]
    pub event: EventPolicy,
    #[serde(default = "default_max_draws")]
    pub max_draws: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
}

impl ExperimentConfig {
    /// Defaults for `family` with every size left at zero.
    pub fn new(family: Family) -> Self {
        Self {
            family,
            n: 0,
            t: 0,
            eta: None,
            theorem_mode: true,
            universe: 0,
            dprime: None,
            codebook_seed: 0,
            seeds: default_seeds(),
            projected: false,
            suffix: Vec::new(),
            mc_samples: default_mc(),
            smoothing: false,
            smoothing_samples: default_smoothing_samples(),
            event: EventPolicy::default(),
            max_draws: default_max_draws(),
            output: None,
        }
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        Ok(toml::from_str(s)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Number of iterates of the run.
    pub fn len(&self) -> usize {
        match self.family {
            Family::Sgd => self.n,
            _ => self.t,
        }
    }

    pub fn dprime(&self) -> usize {
        self.dprime.unwrap_or_else(|| default_dprime(self.universe))
    }

    pub fn suffixes(&self) -> Vec<usize> {
        if self.suffix.is_empty() {
            let mut v = vec![1, self.len()];
            v.dedup();
            v
        } else {
            self.suffix.clone()
        }
    }

    /// Output root: the config's own setting, else `$SCO_ADVERSARY_OUT`, else
    /// [`DEFAULT_OUTPUT`].
    pub fn output_dir(&self) -> PathBuf {
        self.output
            .clone()
            .or_else(|| std::env::var_os(OUTPUT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT))
    }

    /// Checks parameter coherence without running anything.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParams(msg));
        match self.family {
            Family::Gd => {
                self.gd_params()?;
                if self.event == EventPolicy::ForceEPrime {
                    return bad("event policy force-e-prime applies to the sgd family only".into());
                }
            }
            Family::Sgd => {
                self.sgd_params()?;
                if self.event == EventPolicy::ForceEPrime && self.universe < self.n + 1 {
                    return Err(Error::InfeasibleForcing {
                        n: self.n,
                        universe: self.universe,
                    });
                }
            }
            Family::Smallstep => {
                self.smallstep_params()?;
            }
        }
        if let Some(&m) = self.suffixes().iter().find(|&&m| m == 0 || m > self.len()) {
            return bad(format!("suffix length {m} outside 1..={}", self.len()));
        }
        if self.mc_samples < 2 || (self.smoothing && self.smoothing_samples < 2) {
            return bad("Monte-Carlo budgets need at least 2 samples".into());
        }
        if self.seeds.to_vec().is_empty() {
            return bad("no seeds given".into());
        }
        Ok(())
    }

    pub fn gd_params(&self) -> Result<GdParams> {
        let eta = self.eta.unwrap_or_else(|| theorem_eta(self.t));
        GdParams::new(
            self.n,
            self.t,
            eta,
            self.universe,
            self.dprime(),
            self.theorem_mode,
        )
    }

    pub fn sgd_params(&self) -> Result<SgdParams> {
        let eta = self.eta.unwrap_or_else(|| theorem_eta(self.n));
        SgdParams::new(self.n, eta, self.universe, self.dprime(), self.theorem_mode)
    }

    pub fn smallstep_params(&self) -> Result<SmallStepParams> {
        let eta = self.eta.ok_or_else(|| {
            Error::InvalidParams("the smallstep family needs an explicit eta".into())
        })?;
        SmallStepParams::new(eta, self.t)
    }

    fn codebook(&self) -> Result<Codebook> {
        generate_codebook(
            self.universe,
            self.dprime(),
            self.codebook_seed,
            CODEBOOK_ATTEMPTS,
        )
    }

    fn record(&self, dim: usize) -> Record {
        if dim.saturating_mul(self.len()).saturating_mul(8) > MEMORY_CAP_BYTES {
            Record::Suffix(self.suffixes().into_iter().max().unwrap_or(1))
        } else {
            Record::All
        }
    }
}

/// Generates a codebook and writes it as JSON.
pub fn cmd_gen_codebook(
    universe: usize,
    dprime: Option<usize>,
    seed: u64,
    path: &Path,
) -> Result<Codebook> {
    let dprime = dprime.unwrap_or_else(|| default_dprime(universe));
    let cb = generate_codebook(universe, dprime, seed, CODEBOOK_ATTEMPTS)?;
    write(path, &cb.to_json()?)?;
    log::info!(
        "codebook: {universe} vectors in dimension {dprime}, coherence {:.4}",
        coherence(&cb)
    );
    Ok(cb)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EventSummary {
    pub policy: EventPolicy,
    pub holds: bool,
    pub rejections: usize,
    pub diagnosis: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub name: String,
    /// `None` when the check was skipped.
    pub pass: Option<bool>,
    pub detail: serde_json::Value,
}

impl Check {
    fn ran<T: Serialize>(name: &str, pass: bool, detail: &T) -> Self {
        Self {
            name: name.into(),
            pass: Some(pass),
            detail: serde_json::to_value(detail).expect("serializable"),
        }
    }

    fn skipped(name: &str, reason: &str) -> Self {
        Self {
            name: name.into(),
            pass: None,
            detail: serde_json::Value::String(reason.into()),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct VerifyReport {
    pub family: Family,
    pub seed: u64,
    pub event: EventSummary,
    pub checks: Vec<Check>,
    pub pass: bool,
}

impl VerifyReport {
    fn new(family: Family, seed: u64, event: EventSummary, checks: Vec<Check>) -> Self {
        let pass = checks.iter().all(|c| c.pass != Some(false));
        Self {
            family,
            seed,
            event,
            checks,
            pass,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SeedOutcome {
    pub dir: PathBuf,
    pub verify: VerifyReport,
    pub risk: Vec<RiskReport>,
}

#[derive(Clone, Debug, Serialize)]
pub struct RunSummary {
    pub config: ExperimentConfig,
    pub seeds: Vec<SeedOutcome>,
    pub pass: bool,
}

/// Everything the pipeline reads back from a run directory.
enum Loaded {
    Gd { inst: GdInstance, ds: GdDataset },
    Sgd { inst: SgdInstance, ds: SgdDataset },
    Smallstep { p: SmallStepParams },
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn run_dir(root: &Path, family: Family, seed: u64) -> PathBuf {
    root.join(format!("{family}-seed{seed}"))
}

fn sgd_dataset(
    cfg: &ExperimentConfig,
    p: &SgdParams,
    seed: u64,
) -> Result<(SgdDataset, EventSummary)> {
    let (ds, rejections) = match cfg.event {
        EventPolicy::ForceEPrime => (force_good_event_sgd(p, seed)?, 0),
        EventPolicy::Unconditioned => (sample_sgd_dataset(p, seed), 0),
        EventPolicy::RejectUntilE => {
            let found = (0..cfg.max_draws).find_map(|i| {
                let ds = sample_sgd_dataset(p, crate::rng::derive_seed(seed, i as u64));
                good_event_sgd(&ds.masks, p.universe)
                    .holds
                    .then_some((ds, i))
            });
            found.ok_or_else(|| {
                Error::EventViolated(format!(
                    "no SGD dataset in the good event after {} draws",
                    cfg.max_draws
                ))
            })?
        }
    };
    let ev = good_event_sgd(&ds.masks, p.universe);
    let diagnosis = if ev.holds {
        "ok".into()
    } else {
        format!("{:?}", ev.failures)
    };
    Ok((
        ds,
        EventSummary {
            policy: cfg.event,
            holds: ev.holds,
            rejections,
            diagnosis,
        },
    ))
}

fn gd_dataset(
    cfg: &ExperimentConfig,
    p: &GdParams,
    seed: u64,
) -> Result<(GdDataset, EventSummary)> {
    let (ds, rejections) = match cfg.event {
        EventPolicy::RejectUntilE => sample_gd_dataset_in_event(p, seed, cfg.max_draws)?,
        _ => (sample_gd_dataset(p, seed), 0),
    };
    let ev = good_event_gd(&ds, p.universe);
    Ok((
        ds,
        EventSummary {
            policy: cfg.event,
            holds: ev.holds,
            rejections,
            diagnosis: ev.diagnosis,
        },
    ))
}

/// Samples (or forces) a dataset, runs the optimizer, verifies the run and
/// reports risks, once per seed. Artifacts go to one directory per seed.
pub fn cmd_run(cfg: &ExperimentConfig) -> Result<RunSummary> {
    cfg.validate()?;
    let root = cfg.output_dir();
    let mut seeds = Vec::new();
    for seed in cfg.seeds.to_vec() {
        let dir = run_dir(&root, cfg.family, seed);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        write(&dir.join("config.toml"), &cfg.to_toml())?;
        let (loaded, event) = match cfg.family {
            Family::Gd => {
                let inst = GdInstance::new(cfg.gd_params()?, cfg.codebook()?)?;
                let (ds, event) = gd_dataset(cfg, &inst.params, seed)?;
                log::info!(
                    "gd seed {seed}: {} rejected draws before the good event",
                    event.rejections
                );
                write(&dir.join("codebook.json"), &inst.codebook.to_json()?)?;
                write(&dir.join("dataset.json"), &ds.to_json()?)?;
                (Loaded::Gd { inst, ds }, event)
            }
            Family::Sgd => {
                let inst = SgdInstance::new(cfg.sgd_params()?, cfg.codebook()?)?;
                let (ds, event) = sgd_dataset(cfg, &inst.params, seed)?;
                write(&dir.join("codebook.json"), &inst.codebook.to_json()?)?;
                write(&dir.join("dataset.json"), &ds.to_json()?)?;
                (Loaded::Sgd { inst, ds }, event)
            }
            Family::Smallstep => {
                let p = cfg.smallstep_params()?;
                let event = EventSummary {
                    policy: cfg.event,
                    holds: true,
                    rejections: 0,
                    diagnosis: "deterministic".into(),
                };
                (Loaded::Smallstep { p }, event)
            }
        };
        let traj = match &loaded {
            Loaded::Gd { inst, ds } => run_gd(
                inst,
                &ds.samples,
                inst.params.eta,
                cfg.t,
                cfg.projected,
                cfg.record(inst.params.d),
            )?,
            Loaded::Sgd { inst, ds } => run_sgd(
                inst,
                &ds.masks,
                inst.params.eta,
                cfg.projected,
                cfg.record(inst.params.d),
            )?,
            Loaded::Smallstep { p } => {
                run_gd(p, &[()], p.eta, p.t, cfg.projected, cfg.record(p.d))?
            }
        };
        let sidecar = serde_json::json!({ "family": cfg.family, "seed": seed, "event": event });
        write_checkpoint(&traj, &dir.join("trajectory"), sidecar)?;
        let verify = verify_loaded(cfg, &loaded, &traj, seed, event)?;
        write(
            &dir.join("verify.json"),
            &serde_json::to_string_pretty(&verify)?,
        )?;
        let risk = risk_loaded(cfg, &loaded, &traj, cfg.mc_samples, seed)?;
        write_risk(&dir, &risk)?;
        seeds.push(SeedOutcome { dir, verify, risk });
    }
    let pass = seeds.iter().all(|s| s.verify.pass);
    let summary = RunSummary {
        config: cfg.clone(),
        seeds,
        pass,
    };
    write(
        &root.join("summary.json"),
        &serde_json::to_string_pretty(&summary)?,
    )?;
    Ok(summary)
}

fn write_risk(dir: &Path, risk: &[RiskReport]) -> Result<()> {
    write_csv_file(risk, &dir.join("risk.csv"))?;
    write(&dir.join("risk.json"), &serde_json::to_string_pretty(risk)?)
}

fn load_run(dir: &Path) -> Result<(ExperimentConfig, Loaded, Trajectory, u64, EventSummary)> {
    let cfg = ExperimentConfig::from_toml(&read(&dir.join("config.toml"))?)?;
    let (traj, side) = read_checkpoint(&dir.join("trajectory"))?;
    let seed = side["seed"]
        .as_u64()
        .ok_or_else(|| Error::InvalidParams(format!("{}: sidecar has no seed", dir.display())))?;
    let event: EventSummary = serde_json::from_value(side["event"].clone())?;
    let loaded = match cfg.family {
        Family::Gd => Loaded::Gd {
            inst: GdInstance::new(
                cfg.gd_params()?,
                Codebook::from_json(&read(&dir.join("codebook.json"))?)?,
            )?,
            ds: GdDataset::from_json(&read(&dir.join("dataset.json"))?)?,
        },
        Family::Sgd => Loaded::Sgd {
            inst: SgdInstance::new(
                cfg.sgd_params()?,
                Codebook::from_json(&read(&dir.join("codebook.json"))?)?,
            )?,
            ds: SgdDataset::from_json(&read(&dir.join("dataset.json"))?)?,
        },
        Family::Smallstep => Loaded::Smallstep {
            p: cfg.smallstep_params()?,
        },
    };
    Ok((cfg, loaded, traj, seed, event))
}

/// Re-checks a stored run against the closed forms and rewrites
/// `verify.json`.
pub fn cmd_verify(dir: &Path) -> Result<VerifyReport> {
    let (cfg, loaded, traj, seed, event) = load_run(dir)?;
    let report = verify_loaded(&cfg, &loaded, &traj, seed, event)?;
    write(
        &dir.join("verify.json"),
        &serde_json::to_string_pretty(&report)?,
    )?;
    Ok(report)
}

/// Recomputes the risk reports of a stored run, optionally with a different
/// Monte-Carlo budget, and rewrites `risk.csv` and `risk.json`.
pub fn cmd_risk(dir: &Path, mc_samples: Option<usize>) -> Result<Vec<RiskReport>> {
    let (cfg, loaded, traj, seed, _) = load_run(dir)?;
    let risk = risk_loaded(
        &cfg,
        &loaded,
        &traj,
        mc_samples.unwrap_or(cfg.mc_samples),
        seed,
    )?;
    write_risk(dir, &risk)?;
    Ok(risk)
}

fn risk_loaded(
    cfg: &ExperimentConfig,
    loaded: &Loaded,
    traj: &Trajectory,
    mc: usize,
    seed: u64,
) -> Result<Vec<RiskReport>> {
    let ms = cfg.suffixes();
    let mc_seed = crate::rng::derive_seed(seed, u64::MAX);
    match loaded {
        Loaded::Gd { inst, ds } => gap_report_gd(traj, inst, ds, &ms, mc, mc_seed),
        Loaded::Sgd { inst, ds } => gap_report_sgd(traj, inst, &ds.masks, &ms, mc, mc_seed),
        Loaded::Smallstep { p } => gap_report_smallstep(traj, p, &ms),
    }
}

/// Tolerance for `O(η)` quantities.
pub const TRAJECTORY_TOL: f64 = 1e-9;
/// Tolerance for the `O(ηε/T²)` correction terms.
pub const CORRECTION_TOL: f64 = 1e-15;

fn verify_loaded(
    cfg: &ExperimentConfig,
    loaded: &Loaded,
    traj: &Trajectory,
    seed: u64,
    event: EventSummary,
) -> Result<VerifyReport> {
    let mut checks = Vec::new();
    let norm = verify::check_norm_bound(traj);
    checks.push(Check::ran("norm_bound", norm.pass, &norm));
    let window = traj.steps.clone();
    match loaded {
        Loaded::Gd { inst, ds } => {
            let p = &inst.params;
            if !event.holds {
                checks.push(Check::skipped(
                    "closed_form",
                    "dataset is outside the good event",
                ));
            } else if p.t < 8 {
                checks.push(Check::skipped(
                    "closed_form",
                    "the closed form needs T >= 8",
                ));
            } else {
                let rep = verify::check_trajectory(
                    traj,
                    window.iter().copied().filter(|&t| t >= 2),
                    TRAJECTORY_TOL,
                    |t| verify::expected_gd_iterate(t, inst, ds),
                )?;
                checks.push(Check::ran("trajectory", rep.pass, &rep));
                let rep = verify::check_gd_corrections(traj, inst, ds, CORRECTION_TOL)?;
                checks.push(Check::ran("corrections", rep.pass, &rep));
                let rep = verify::check_margins_gd(traj, inst)?;
                checks.push(Check::ran("margins", rep.pass, &rep));
                for m in cfg.suffixes() {
                    let name = format!("suffix_m{m}");
                    match suffix_average(traj, m) {
                        Ok(w) => {
                            let dev = max_abs_diff(&w, &verify::expected_gd_suffix(m, inst, ds)?);
                            checks.push(Check::ran(&name, dev <= TRAJECTORY_TOL, &dev));
                        }
                        Err(_) => {
                            checks.push(Check::skipped(&name, "suffix window was not recorded"))
                        }
                    }
                }
                if cfg.smoothing {
                    let surface = GdEmpirical {
                        inst,
                        samples: &ds.samples,
                    };
                    let points = pick_points(traj, 2, 5);
                    let sc = smoothing_config(cfg, p.smooth_delta, seed);
                    let rep = verify_trajectory_preservation(
                        &surface,
                        &points,
                        |w| inst.batch_grad(w, &ds.samples),
                        &sc,
                    )?;
                    checks.push(Check::ran("smoothing", rep.pass, &rep));
                }
            }
        }
        Loaded::Sgd { inst, ds } => {
            let p = &inst.params;
            if !event.holds {
                checks.push(Check::skipped(
                    "closed_form",
                    "dataset is outside the good event",
                ));
            } else {
                let rep = verify::check_trajectory(
                    traj,
                    window.iter().copied().filter(|&t| t >= 2),
                    TRAJECTORY_TOL,
                    |t| verify::expected_sgd_iterate(t, inst, &ds.masks),
                )?;
                checks.push(Check::ran("trajectory", rep.pass, &rep));
                let rep = verify::check_sgd_corrections(traj, inst, CORRECTION_TOL);
                checks.push(Check::ran("corrections", rep.pass, &rep));
                let rep = verify::check_margins_sgd(traj, inst, &ds.masks)?;
                checks.push(Check::ran("margins", rep.pass, &rep));
                if cfg.smoothing {
                    let sc = smoothing_config(cfg, p.smooth_delta, seed);
                    let mut rows = Vec::new();
                    for (t, w) in pick_points(traj, 1, 5)
                        .into_iter()
                        .filter(|(t, _)| *t < p.n)
                    {
                        let sample = &ds.masks[t - 1..t];
                        let surface = SgdEmpirical {
                            inst,
                            samples: sample,
                        };
                        let rep = verify_trajectory_preservation(
                            &surface,
                            &[(t, w)],
                            |w| inst.grad(w, &sample[0]),
                            &sc,
                        )?;
                        rows.extend(rep.rows);
                    }
                    let pass = rows.iter().all(|r| r.pass);
                    checks.push(Check::ran("smoothing", pass, &rows));
                }
            }
        }
        Loaded::Smallstep { p } => {
            if cfg.projected {
                checks.push(Check::skipped(
                    "closed_form",
                    "the prediction covers unprojected runs",
                ));
            } else {
                let rep = verify::check_trajectory(traj, window.iter().copied(), 0.0, |t| {
                    Ok(verify::expected_smallstep_iterate(t, p))
                })?;
                checks.push(Check::ran("trajectory", rep.pass, &rep));
            }
            let rep = verify::check_margins_smallstep(traj, p);
            checks.push(Check::ran("margins", rep.pass, &rep));
            let cap = 0.5 / (p.d as f64).sqrt();
            let top = traj
                .iterates
                .iter()
                .flatten()
                .copied()
                .fold(f64::NEG_INFINITY, f64::max);
            checks.push(Check::ran(
                "coordinate_cap",
                top <= cap,
                &serde_json::json!({ "max": top, "cap": cap }),
            ));
            if cfg.smoothing {
                let points = pick_points(traj, 1, 5);
                let sc = smoothing_config(cfg, p.smooth_delta, seed);
                let rep = verify_trajectory_preservation(p, &points, |w| Ok(p.grad(w)), &sc)?;
                checks.push(Check::ran("smoothing", rep.pass, &rep));
            }
        }
    }
    Ok(VerifyReport::new(cfg.family, seed, event, checks))
}

fn smoothing_config(cfg: &ExperimentConfig, delta: f64, seed: u64) -> SmoothingConfig {
    SmoothingConfig {
        delta,
        samples: cfg.smoothing_samples,
        seed: crate::rng::derive_seed(seed, 7),
        antithetic: false,
    }
}

/// Up to `count` stored iterates with `t ≥ from`, spread evenly.
pub fn pick_points(traj: &Trajectory, from: usize, count: usize) -> Vec<(usize, Vec<f64>)> {
    let idx: Vec<usize> = (0..traj.steps.len())
        .filter(|&i| traj.steps[i] >= from)
        .collect();
    if idx.is_empty() || count == 0 {
        return Vec::new();
    }
    let mut chosen: Vec<usize> = (0..count.min(idx.len()))
        .map(|j| idx[j * (idx.len() - 1) / (count.min(idx.len()) - 1).max(1)])
        .collect();
    chosen.dedup();
    chosen
        .into_iter()
        .map(|i| (traj.steps[i], traj.iterates[i].clone()))
        .collect()
}

/// Largest pairwise coherence over `codebooks`, and whether all stay within
/// `1/8`.
pub fn check_coherence(codebooks: &[&Codebook]) -> (f64, bool) {
    let worst = codebooks.iter().map(|cb| coherence(cb)).fold(0.0, f64::max);
    (worst, worst <= MAX_COHERENCE)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trip_and_validation() {
        let text = r#"
family = "sgd"
n = 4
N = 8
seeds = { start = 0, end = 3 }
event = "force-e-prime"
suffix = [1, 4]
"#;
        let cfg = ExperimentConfig::from_toml(text).unwrap();
        assert_eq!(cfg.seeds.to_vec(), vec![0, 1, 2]);
        cfg.validate().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);

        let mut too_small = cfg.clone();
        too_small.universe = 4;
        assert!(matches!(
            too_small.validate(),
            Err(Error::InfeasibleForcing { .. })
        ));

        let mut gd = ExperimentConfig::new(Family::Gd);
        gd.n = 2;
        gd.t = 16;
        gd.universe = 4;
        gd.eta = Some(0.1);
        assert!(
            gd.validate().is_err(),
            "eta above 1/(5 sqrt T) in theorem mode"
        );
        gd.theorem_mode = false;
        gd.validate().unwrap();
    }

    #[test]
    fn seeds_parse() {
        assert_eq!(
            "1, 2,5".parse::<Seeds>().unwrap(),
            Seeds::List(vec![1, 2, 5])
        );
        assert_eq!("3..5".parse::<Seeds>().unwrap().to_vec(), vec![3, 4]);
        assert!("x".parse::<Seeds>().is_err());
    }

    #[test]
    fn unknown_fields_are_rejected() {
        assert!(ExperimentConfig::from_toml("family = \"gd\"\nbogus = 1\n").is_err());
    }
}
