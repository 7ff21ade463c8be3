//! Empirical risk, Monte-Carlo population risk, the exact population risk of
//! the closed-form GD iterates, and per-suffix gap reports.
//!
//! Monte-Carlo draws are split into chunks of [`CHUNK`] samples. Chunk `c`
//! uses stream `c` of the generator seeded by `seed`, and chunk moments are
//! merged in chunk order, so an estimate depends only on `(M, seed)`.

use std::io::Write;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::codebook::Codebook;
use crate::error::{Error, Result};
use crate::instance_gd::{draw_sample, GdDataset, GdInstance, GdParams, Mode};
use crate::instance_sgd::{draw_set, SgdInstance};
use crate::instance_smallstep::SmallStepParams;
use crate::objective::Objective;
use crate::optim::{suffix_average, Trajectory};
use crate::stats::Moments;
use crate::verify::gd_coefficients;

pub const CHUNK: usize = 1024;

/// Mean and standard error of a Monte-Carlo average.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Estimate {
    pub mean: f64,
    pub stderr: f64,
    pub samples: usize,
}

/// Total plus per-term estimates, in the instance's term order.
#[derive(Clone, Debug, Serialize)]
pub struct PopulationEstimate {
    pub total: Estimate,
    pub terms: Vec<(String, Estimate)>,
}

impl PopulationEstimate {
    pub fn term(&self, name: &str) -> Option<Estimate> {
        self.terms.iter().find(|(n, _)| n == name).map(|&(_, e)| e)
    }
}

/// Mean of per-sample losses.
pub fn empirical_risk<O: Objective>(obj: &O, w: &[f64], samples: &[O::Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::InvalidParams(
            "empirical risk of an empty dataset".into(),
        ));
    }
    obj.batch_loss(w, samples)
}

/// Runs `eval` on `m` draws and returns the estimates of each of its `K`
/// components followed by their sum.
fn monte_carlo<const K: usize>(
    m: usize,
    seed: u64,
    eval: impl Fn(&mut ChaCha8Rng) -> Result<[f64; K]> + Sync,
) -> Result<(Vec<Estimate>, Estimate)> {
    if m < 2 {
        return Err(Error::InvalidParams(format!(
            "Monte-Carlo needs at least 2 samples, got {m}"
        )));
    }
    let chunks = m.div_ceil(CHUNK);
    // Per chunk: running (count, mean, squared deviations) of each component
    // and of the total, merged with the pairwise update.
    let partial: Vec<Vec<Moments>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = crate::rng::stream(seed, c as u64);
            let len = CHUNK.min(m - c * CHUNK);
            let mut acc = vec![Moments::default(); K + 1];
            for _ in 0..len {
                let x = eval(&mut rng)?;
                let total: f64 = x.iter().sum();
                for (a, &v) in acc.iter_mut().zip(x.iter().chain(std::iter::once(&total))) {
                    a.push(v);
                }
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    let mut acc = vec![Moments::default(); K + 1];
    for part in &partial {
        for (a, p) in acc.iter_mut().zip(part) {
            a.merge(p);
        }
    }
    let mut est: Vec<Estimate> = acc
        .iter()
        .map(|m| {
            let (mean, stderr) = m.mean_stderr();
            Estimate {
                mean,
                stderr,
                samples: m.count(),
            }
        })
        .collect();
    let total = est.pop().expect("K + 1 entries");
    Ok((est, total))
}

/// `F(w)` by Monte-Carlo over `m` fresh samples from `draw`.
pub fn population_risk_mc<O: Objective>(
    obj: &O,
    w: &[f64],
    draw: impl Fn(&mut ChaCha8Rng) -> O::Sample + Sync,
    m: usize,
    seed: u64,
) -> Result<Estimate> {
    let (_, total) = monte_carlo(m, seed, |rng| Ok([obj.loss(w, &draw(rng))?]))?;
    Ok(total)
}

/// GD population risk with the four terms estimated separately. The
/// sample-independent terms are computed once.
pub fn population_risk_mc_gd(
    inst: &GdInstance,
    w: &[f64],
    m: usize,
    seed: u64,
) -> Result<PopulationEstimate> {
    let point = inst.at(w, Mode::Oracle)?;
    let (terms, total) = monte_carlo(m, seed, |rng| {
        let s = draw_sample(&inst.params, rng);
        let t = point.terms(&s);
        Ok([t.l1, t.l2, t.l3, t.l4])
    })?;
    Ok(PopulationEstimate {
        total,
        terms: named(["l1", "l2", "l3", "l4"], terms),
    })
}

/// SGD population risk with the three terms estimated separately.
pub fn population_risk_mc_sgd(
    inst: &SgdInstance,
    w: &[f64],
    m: usize,
    seed: u64,
) -> Result<PopulationEstimate> {
    let point = inst.at(w, Mode::Oracle)?;
    let (terms, total) = monte_carlo(m, seed, |rng| {
        let t = point.terms(draw_set(&inst.params, rng))?;
        Ok([t.l1, t.l2, t.l3])
    })?;
    Ok(PopulationEstimate {
        total,
        terms: named(["l1", "l2", "l3"], terms),
    })
}

fn named<const K: usize>(names: [&str; K], est: Vec<Estimate>) -> Vec<(String, Estimate)> {
    names.iter().map(|s| s.to_string()).zip(est).collect()
}

/// Where a closed-form GD risk is evaluated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum At {
    Iterate(usize),
    /// Average of the last `m` iterates of the length-`T` run.
    Suffix(usize),
}

/// Exact expected loss over a fresh sample, split by term.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ClosedRisk {
    pub l1: f64,
    /// Always zero: the codepoints of all subsets sum to zero.
    pub l2: f64,
    pub l3: f64,
    pub l4: f64,
    pub total: f64,
}

/// `F(0) = (3η/32)√(T-1) + δ1 + δ2`: every term sits on its floor and `ℓ2`
/// vanishes.
pub fn gd_baseline(p: &GdParams) -> f64 {
    p.l1_floor() * ((p.t - 1) as f64).sqrt() + p.delta1 + p.delta2
}

/// Population risk of the closed-form GD iterate (or suffix average) whose
/// data subspaces are multiples of codebook vector `u0`.
///
/// A fresh `V` contains `u0` with probability 1/2. If it does, subspace `k`
/// contributes `max(3η/32, c_k)`; otherwise every subspace sits on the floor
/// because the other directions see at most `c_k/8 ≤ η/16`. `ℓ3` and `ℓ4`
/// do not depend on the sample.
pub fn population_risk_closed_gd(
    at: At,
    p: &GdParams,
    codebook: &Codebook,
    u0: usize,
) -> Result<ClosedRisk> {
    if p.t < 8 {
        return Err(Error::InvalidClosedForm(format!(
            "closed form needs T >= 8, got {}",
            p.t
        )));
    }
    let (c, enc_scale) = match at {
        At::Iterate(t) if (5..=p.t).contains(&t) => (gd_coefficients(t, p), 1.0),
        At::Iterate(t) => {
            return Err(Error::InvalidClosedForm(format!(
                "iterate {t} is outside 5..=T"
            )))
        }
        At::Suffix(m) if (1..=p.t).contains(&m) => {
            let mut c = vec![0.0; p.t + 1];
            for t in p.t + 1 - m..=p.t {
                for (a, x) in c.iter_mut().zip(gd_coefficients(t, p)) {
                    *a += x / m as f64;
                }
            }
            // w_1 = 0 is the only iterate with an empty encoding subspace.
            let enc = if m == p.t {
                (m - 1) as f64 / m as f64
            } else {
                1.0
            };
            (c, enc)
        }
        At::Suffix(m) => {
            return Err(Error::OutOfRange(format!(
                "suffix length {m} outside 1..={}",
                p.t
            )))
        }
    };
    if c[1] > 0.0 || c[2..].iter().any(|&x| x < 0.0) {
        return Err(Error::InvalidClosedForm(format!(
            "{at:?} lies outside the sign pattern the closed form assumes"
        )));
    }
    let floor = p.l1_floor();
    let inside: f64 = c[2..]
        .iter()
        .map(|&x| x.max(floor).powi(2))
        .sum::<f64>()
        .sqrt();
    let outside = floor * ((p.t - 1) as f64).sqrt();
    let l1 = 0.5 * (inside + outside);
    // Picking the training codepoints in their own slots gives (1/n)·n·(η/n),
    // and the decoded index is u0.
    let l3 = (enc_scale * p.eta / p.n as f64 - p.beta * c[1]).max(p.delta1);
    let min_ip = (0..codebook.len())
        .map(|u| codebook.inner(u, u0))
        .fold(f64::INFINITY, f64::min);
    let l4 = (1..p.t)
        .map(|k| {
            let s = 0.375 * c[k] - 0.5 * c[k + 1];
            if s >= 0.0 {
                s
            } else {
                s * min_ip
            }
        })
        .fold(p.delta2, f64::max);
    Ok(ClosedRisk {
        l1,
        l2: 0.0,
        l3,
        l4,
        total: l1 + l3 + l4,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct Threshold {
    pub name: String,
    pub value: f64,
    /// The quantity compared against `value`.
    pub measured: f64,
    pub satisfied: bool,
}

impl Threshold {
    fn new(name: &str, value: f64, measured: f64) -> Self {
        Self {
            name: name.into(),
            value,
            measured,
            satisfied: measured >= value,
        }
    }
}

/// Risks of one suffix average `w_{T,m}`.
#[derive(Clone, Debug, Serialize)]
pub struct RiskReport {
    pub family: String,
    pub m: usize,
    pub empirical: f64,
    pub population: Estimate,
    /// Exact population risk where a closed form exists.
    pub population_closed: Option<f64>,
    /// Risk at the reference point standing in for the minimizer: `F(0)`
    /// for GD, `F̂(0)` for SGD and `0` for the small-step loss.
    pub baseline: f64,
    /// `population.mean - baseline` for GD and small-step, `empirical -
    /// baseline` for SGD.
    pub excess: f64,
    pub thresholds: Vec<Threshold>,
}

/// One report per `m` for a GD run. `mc_samples` fresh draws estimate `F`;
/// the closed form is attached whenever it applies.
pub fn gap_report_gd(
    traj: &Trajectory,
    inst: &GdInstance,
    ds: &GdDataset,
    ms: &[usize],
    mc_samples: usize,
    seed: u64,
) -> Result<Vec<RiskReport>> {
    let p = &inst.params;
    let u0 = crate::encoding::alpha_gd(&ds.masks(), p.universe);
    let baseline = gd_baseline(p);
    let scale = p.eta * (p.t as f64).sqrt();
    ms.iter()
        .enumerate()
        .map(|(i, &m)| {
            let w = suffix_average(traj, m)?;
            let population = population_risk_mc_gd(
                inst,
                &w,
                mc_samples,
                crate::rng::derive_seed(seed, i as u64),
            )?
            .total;
            let closed = population_risk_closed_gd(At::Suffix(m), p, &inst.codebook, u0)
                .ok()
                .map(|r| r.total);
            let excess = population.mean - baseline;
            Ok(RiskReport {
                family: "gd".into(),
                m,
                empirical: empirical_risk(inst, &w, &ds.samples)?,
                population,
                population_closed: closed,
                baseline,
                excess,
                thresholds: vec![
                    Threshold::new("eta*sqrt(T)/128", scale / 128.0, excess),
                    Threshold::new("eta*sqrt(T)/3200", scale / 3200.0, excess),
                ],
            })
        })
        .collect()
}

/// One report per `m` for an SGD run; the gap is measured on the training
/// set against `F̂(0)`.
pub fn gap_report_sgd(
    traj: &Trajectory,
    inst: &SgdInstance,
    masks: &[crate::encoding::SubsetMask],
    ms: &[usize],
    mc_samples: usize,
    seed: u64,
) -> Result<Vec<RiskReport>> {
    let p = &inst.params;
    let baseline = empirical_risk(inst, &vec![0.0; p.d], masks)?;
    let threshold = p.eta * (p.n as f64).sqrt() / 64000.0;
    ms.iter()
        .enumerate()
        .map(|(i, &m)| {
            let w = suffix_average(traj, m)?;
            let empirical = empirical_risk(inst, &w, masks)?;
            let population = population_risk_mc_sgd(
                inst,
                &w,
                mc_samples,
                crate::rng::derive_seed(seed, i as u64),
            )?
            .total;
            Ok(RiskReport {
                family: "sgd".into(),
                m,
                empirical,
                population,
                population_closed: None,
                baseline,
                excess: empirical - baseline,
                thresholds: vec![Threshold::new(
                    "eta*sqrt(n)/64000",
                    threshold,
                    empirical - baseline,
                )],
            })
        })
        .collect()
}

/// Small-step reports. The loss is deterministic, so empirical and
/// population risk coincide and carry no error.
pub fn gap_report_smallstep(
    traj: &Trajectory,
    p: &SmallStepParams,
    ms: &[usize],
) -> Result<Vec<RiskReport>> {
    ms.iter()
        .map(|&m| {
            let w = suffix_average(traj, m)?;
            let f = p.loss(&w);
            Ok(RiskReport {
                family: "smallstep".into(),
                m,
                empirical: f,
                population: Estimate {
                    mean: f,
                    stderr: 0.0,
                    samples: 1,
                },
                population_closed: Some(f),
                baseline: 0.0,
                excess: f,
                thresholds: vec![Threshold::new("min(1/4,1/(20*eta*T))", p.bound(), f)],
            })
        })
        .collect()
}

#[derive(Serialize)]
struct CsvRow<'a> {
    family: &'a str,
    m: usize,
    empirical: f64,
    population: f64,
    stderr: f64,
    samples: usize,
    population_closed: Option<f64>,
    baseline: f64,
    excess: f64,
    /// `name=value:satisfied` entries separated by `;`.
    thresholds: String,
}

/// One CSV row per report, header included.
pub fn write_csv<W: Write>(reports: &[RiskReport], out: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(out);
    for r in reports {
        let thresholds = r
            .thresholds
            .iter()
            .map(|t| format!("{}={:e}:{}", t.name, t.value, t.satisfied))
            .collect::<Vec<_>>()
            .join(";");
        wr.serialize(CsvRow {
            family: &r.family,
            m: r.m,
            empirical: r.empirical,
            population: r.population.mean,
            stderr: r.population.stderr,
            samples: r.population.samples,
            population_closed: r.population_closed,
            baseline: r.baseline,
            excess: r.excess,
            thresholds,
        })?;
    }
    wr.flush().map_err(|e| Error::Csv(e.into()))
}

pub fn write_csv_file(reports: &[RiskReport], path: &Path) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_csv(reports, f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codebook::generate_codebook;
    use crate::instance_gd::sample_gd_dataset_in_event;
    use crate::objective::Objective;
    use crate::optim::{run_gd, Record};

    struct Constant;

    impl Objective for Constant {
        type Sample = ();
        fn dim(&self) -> usize {
            1
        }
        fn loss(&self, _: &[f64], _: &()) -> Result<f64> {
            Ok(0.7)
        }
        fn grad(&self, _: &[f64], _: &()) -> Result<Vec<f64>> {
            Ok(vec![0.0])
        }
    }

    #[test]
    fn constant_loss_is_exact() {
        let e = population_risk_mc(&Constant, &[0.0], |_| (), 5000, 1).unwrap();
        assert_eq!((e.mean, e.stderr), (0.7, 0.0));
        assert!((empirical_risk(&Constant, &[0.0], &[(); 3]).unwrap() - 0.7).abs() < 1e-15);
    }

    #[test]
    fn estimates_are_seed_deterministic() {
        let f = |rng: &mut ChaCha8Rng| Ok([rand::Rng::random::<f64>(rng)]);
        let a = monte_carlo(3000, 9, f).unwrap();
        let b = monte_carlo(3000, 9, f).unwrap();
        assert_eq!(a.1, b.1);
        assert!((a.1.mean - 0.5).abs() < 4.0 * a.1.stderr);
    }

    fn gd_run() -> (GdInstance, GdDataset, Trajectory) {
        let p = GdParams::theorem(4, 12, 8, 256).unwrap();
        let inst = GdInstance::new(p, generate_codebook(8, 256, 2, 100_000).unwrap()).unwrap();
        let (ds, _) = sample_gd_dataset_in_event(&inst.params, 2, 1000).unwrap();
        let traj = run_gd(
            &inst,
            &ds.samples,
            inst.params.eta,
            inst.params.t,
            false,
            Record::All,
        )
        .unwrap();
        (inst, ds, traj)
    }

    #[test]
    fn closed_form_matches_direct_shared_terms() {
        let (inst, ds, traj) = gd_run();
        let u0 = crate::encoding::alpha_gd(&ds.masks(), inst.params.universe);
        for t in 5..=inst.params.t {
            let closed =
                population_risk_closed_gd(At::Iterate(t), &inst.params, &inst.codebook, u0)
                    .unwrap();
            let point = inst.at(traj.iterate(t).unwrap(), Mode::Oracle).unwrap();
            assert!(
                (closed.l3 - point.l3.value).abs() < 1e-12,
                "t={t}: {} vs {}",
                closed.l3,
                point.l3.value
            );
            assert!((closed.l4 - point.l4.value).abs() < 1e-12, "t={t}");
        }
        for m in 1..=inst.params.t {
            let closed =
                population_risk_closed_gd(At::Suffix(m), &inst.params, &inst.codebook, u0).unwrap();
            let w = suffix_average(&traj, m).unwrap();
            let point = inst.at(&w, Mode::Oracle).unwrap();
            assert!((closed.l3 - point.l3.value).abs() < 1e-12, "m={m}");
            assert!((closed.l4 - point.l4.value).abs() < 1e-12, "m={m}");
        }
    }

    #[test]
    fn closed_form_agrees_with_monte_carlo() {
        let (inst, ds, traj) = gd_run();
        let u0 = crate::encoding::alpha_gd(&ds.masks(), inst.params.universe);
        let closed =
            population_risk_closed_gd(At::Iterate(inst.params.t), &inst.params, &inst.codebook, u0)
                .unwrap();
        let mc = population_risk_mc_gd(&inst, traj.last(), 20_000, 4).unwrap();
        assert!((mc.total.mean - closed.total).abs() < 3.0 * mc.total.stderr);
        let l2 = mc.term("l2").unwrap();
        assert!(l2.mean.abs() < 3.0 * l2.stderr);
    }

    #[test]
    fn baseline_is_the_origin_risk() {
        let (inst, ds, _) = gd_run();
        let zero = vec![0.0; inst.params.d];
        let mc = population_risk_mc_gd(&inst, &zero, 200, 1).unwrap();
        assert!((mc.total.mean - gd_baseline(&inst.params)).abs() < 1e-15);
        assert!(
            (empirical_risk(&inst, &zero, &ds.samples).unwrap() - gd_baseline(&inst.params)).abs()
                < 1e-15
        );
    }

    #[test]
    fn closed_form_rejects_early_iterates() {
        let (inst, _, _) = gd_run();
        let r = population_risk_closed_gd(At::Iterate(4), &inst.params, &inst.codebook, 0);
        assert!(matches!(r, Err(Error::InvalidClosedForm(_))));
    }
}
