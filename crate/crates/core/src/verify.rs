//! Closed-form iterates and the checks that compare recorded runs against
//! them.
//!
//! Under the good events the three families have fully explicit dynamics:
//!
//! * GD: `w^(0) = (η/n) Σ φ(V_i, j_i)` from step 2 on, and every data subspace
//!   is a multiple of the decoded direction `u0`. With `β = ε/(4T²)`,
//!   `w_3^(1) = ηβ u0`, and for `t ≥ 4` the coefficients are
//!   `-3η/8 + (t-2)ηβ` on subspace 1, `η/8` on `2..=t-3`, `η/2` on `t-2` and
//!   zero beyond.
//! * SGD: subspace `k ≥ 2` carries `η/8 u_k`, the newest one `η/2 u_{t-1}`,
//!   where `u_k` is the lowest member of `V_1 ∩ .. ∩ V_{k-1}`; subspace 1
//!   carries `(-3/8 + (t-1)/n³) η u_1`.
//! * Small step: coordinate `i` has been raised `⌊(t-1)/d⌋` or one more times,
//!   in index order.

use serde::Serialize;

use crate::encoding::{alpha_gd, alpha_sgd, SubsetMask};
use crate::error::{Error, Result};
use crate::instance_gd::{good_event_gd, GdDataset, GdInstance, GdParams, Mode};
use crate::instance_sgd::{good_event_sgd, SgdInstance, FIRST_DIRECTION};
use crate::instance_smallstep::SmallStepParams;
use crate::optim::Trajectory;
use crate::vecops::{axpy, dot, dot_compensated, max_abs_diff, norm, sub};

/// Two-sided 95% normal quantile used by the Wilson interval.
pub const Z95: f64 = 1.959_963_984_540_054;

/// Coefficients of `w_t^(k)` along `u0` for `k = 0..=T` (entry 0 unused).
pub fn gd_coefficients(t: usize, p: &GdParams) -> Vec<f64> {
    let mut c = vec![0.0; p.t + 1];
    let eta = p.eta;
    match t {
        0..=2 => {}
        3 => c[1] = eta * p.beta,
        _ => {
            c[1] = -0.375 * eta + (t - 2) as f64 * eta * p.beta;
            for ck in c.iter_mut().take(t - 2).skip(2) {
                *ck = eta / 8.0;
            }
            c[t - 2] = eta / 2.0;
        }
    }
    c
}

/// The part of `w_t^(1)` that differs from `-3η/8 u0`: `(t-2)ηβ` for `t ≥ 4`.
pub fn gd_correction(t: usize, p: &GdParams) -> f64 {
    match t {
        0..=2 => 0.0,
        3 => p.eta * p.beta,
        _ => (t - 2) as f64 * p.eta * p.beta,
    }
}

/// Suffix-average coefficient of subspace `k` in `2..=T-2`:
/// `η/8` for `k ≤ T-m-2`, otherwise `η(T-k+2)/(8m)`.
pub fn gd_suffix_coefficient(k: usize, m: usize, p: &GdParams) -> Result<f64> {
    if !(2..=p.t - 2).contains(&k) || m == 0 || m > p.t {
        return Err(Error::OutOfRange(format!(
            "suffix formula needs 2 <= k <= T-2 and 1 <= m <= T (k={k}, m={m})"
        )));
    }
    Ok(if k + m + 2 <= p.t {
        p.eta / 8.0
    } else {
        p.eta * (p.t + 2 - k) as f64 / (8.0 * m as f64)
    })
}

fn require_gd_event(inst: &GdInstance, ds: &GdDataset) -> Result<usize> {
    let ev = good_event_gd(ds, inst.params.universe);
    if !ev.holds {
        return Err(Error::EventViolated(ev.diagnosis));
    }
    Ok(alpha_gd(&ds.masks(), inst.params.universe))
}

fn gd_encoding(inst: &GdInstance, ds: &GdDataset, scale: f64, w: &mut [f64]) {
    let p = &inst.params;
    for s in &ds.samples {
        let g = s.mask.codepoint();
        let r = p.slot(s.slot);
        w[r.start] += scale * g[0];
        w[r.start + 1] += scale * g[1];
    }
}

/// `w_t` of full-batch GD under the good event. Requires `T ≥ 8`, below
/// which the piecewise ranges of the general form overlap.
pub fn expected_gd_iterate(t: usize, inst: &GdInstance, ds: &GdDataset) -> Result<Vec<f64>> {
    let p = &inst.params;
    if p.t < 8 {
        return Err(Error::InvalidClosedForm(format!(
            "closed form needs T >= 8, got {}",
            p.t
        )));
    }
    if t == 0 || t > p.t {
        return Err(Error::OutOfRange(format!("step {t} outside 1..={}", p.t)));
    }
    let u0 = require_gd_event(inst, ds)?;
    let mut w = vec![0.0; p.d];
    if t >= 2 {
        gd_encoding(inst, ds, p.eta / p.n as f64, &mut w);
    }
    let c = gd_coefficients(t, p);
    for (k, &ck) in c.iter().enumerate().skip(1) {
        if ck != 0.0 {
            axpy(ck, inst.codebook.vector(u0), &mut w[p.block(k)]);
        }
    }
    Ok(w)
}

/// Mean of the last `m` closed-form iterates. Blocks `2..=T-2` come from the
/// piecewise suffix formula, the remaining blocks from averaging the
/// per-step closed forms.
pub fn expected_gd_suffix(m: usize, inst: &GdInstance, ds: &GdDataset) -> Result<Vec<f64>> {
    let p = &inst.params;
    if m == 0 || m > p.t {
        return Err(Error::OutOfRange(format!(
            "suffix length {m} outside 1..={}",
            p.t
        )));
    }
    let mut w = vec![0.0; p.d];
    for t in p.t + 1 - m..=p.t {
        axpy(1.0 / m as f64, &expected_gd_iterate(t, inst, ds)?, &mut w);
    }
    let u0 = require_gd_event(inst, ds)?;
    for k in 2..=p.t - 2 {
        let c = gd_suffix_coefficient(k, m, p)?;
        let block = &mut w[p.block(k)];
        for (x, v) in block.iter_mut().zip(inst.codebook.vector(u0)) {
            *x = c * v;
        }
    }
    Ok(w)
}

/// Directions `u_k` for `k = 1..=n` (entry 0 unused): `u_1` is the fixed
/// direction of the linear term, `u_k` the lowest member of the first `k-1`
/// sets' intersection.
pub fn sgd_directions(masks: &[SubsetMask], universe: usize) -> Vec<usize> {
    let mut u = vec![0; masks.len() + 1];
    u[1] = FIRST_DIRECTION;
    for k in 2..=masks.len() {
        u[k] = alpha_sgd(&masks[..k - 1], universe);
    }
    u
}

/// Coefficients of `w_t^(k)` along `u_k`, `k = 0..=n` (entry 0 unused).
pub fn sgd_coefficients(t: usize, n: usize, eta: f64) -> Vec<f64> {
    let n3 = (n * n * n) as f64;
    let mut c = vec![0.0; n + 1];
    match t {
        0 | 1 => {}
        2 => c[1] = eta / n3,
        _ => {
            c[1] = (-0.375 + (t - 1) as f64 / n3) * eta;
            for ck in c.iter_mut().take(t - 1).skip(2) {
                *ck = eta / 8.0;
            }
            c[t - 1] = eta / 2.0;
        }
    }
    c
}

/// `w_t^(1)` coefficient minus its `t = ∞` part `-3η/8` (for `t ≥ 3`).
pub fn sgd_correction(t: usize, n: usize, eta: f64) -> f64 {
    let n3 = (n * n * n) as f64;
    match t {
        0 | 1 => 0.0,
        2 => eta / n3,
        _ => (t - 1) as f64 * eta / n3,
    }
}

/// `w_t` of one-pass SGD under the good event.
pub fn expected_sgd_iterate(
    t: usize,
    inst: &SgdInstance,
    masks: &[SubsetMask],
) -> Result<Vec<f64>> {
    let p = &inst.params;
    if masks.len() != p.n {
        return Err(Error::InvalidParams(format!(
            "expected {} sets, got {}",
            p.n,
            masks.len()
        )));
    }
    if t == 0 || t > p.n {
        return Err(Error::OutOfRange(format!("step {t} outside 1..={}", p.n)));
    }
    let ev = good_event_sgd(masks, p.universe);
    if !ev.holds {
        return Err(Error::EventViolated(format!("{:?}", ev.failures)));
    }
    let mut w = vec![0.0; p.d];
    if t == 1 {
        return Ok(w);
    }
    let q = p.eta / (4 * p.n * p.n) as f64;
    // Group 1, position 0: the sets V_2..V_{t-1}.
    for v in &masks[1..t - 1] {
        let g = v.codepoint();
        let r = p.enc(1, 0);
        w[r.start] += q * g[0];
        w[r.start + 1] += q * g[1];
    }
    // Group t-1: the encoded prefix V_1..V_{t-1}, each at its own position.
    for (i, v) in masks[..t - 1].iter().enumerate() {
        let g = v.codepoint();
        let r = p.enc(t - 1, i);
        w[r.start] += q * g[0];
        w[r.start + 1] += q * g[1];
    }
    let u = sgd_directions(masks, p.universe);
    for (k, &ck) in sgd_coefficients(t, p.n, p.eta).iter().enumerate().skip(1) {
        if ck != 0.0 {
            axpy(ck, inst.codebook.vector(u[k]), &mut w[p.block(k)]);
        }
    }
    Ok(w)
}

/// `w_t` of GD on the small-step loss: coordinate `i` (0-based) has been
/// chosen `⌊(t-1)/d⌋` times, plus once more if `i < (t-1) mod d`.
pub fn expected_smallstep_iterate(t: usize, p: &SmallStepParams) -> Vec<f64> {
    let steps = t.saturating_sub(1);
    let (rounds, extra) = (steps / p.d, steps % p.d);
    (0..p.d)
        .map(|i| p.eta * (rounds + usize::from(i < extra)) as f64)
        .collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct StepDeviation {
    pub t: usize,
    pub deviation: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct TrajectoryReport {
    pub tolerance: f64,
    pub rows: Vec<StepDeviation>,
    pub max_deviation: f64,
    pub first_failure: Option<usize>,
    pub pass: bool,
}

/// Max-norm deviation of each stored iterate in `steps` from `expected(t)`.
pub fn check_trajectory(
    traj: &Trajectory,
    steps: impl IntoIterator<Item = usize>,
    tolerance: f64,
    mut expected: impl FnMut(usize) -> Result<Vec<f64>>,
) -> Result<TrajectoryReport> {
    let mut rows = Vec::new();
    for t in steps {
        let w = traj
            .iterate(t)
            .ok_or_else(|| Error::OutOfRange(format!("iterate {t} was not recorded")))?;
        rows.push(StepDeviation {
            t,
            deviation: max_abs_diff(w, &expected(t)?),
        });
    }
    Ok(deviation_report(rows, tolerance))
}

fn deviation_report(rows: Vec<StepDeviation>, tolerance: f64) -> TrajectoryReport {
    let max_deviation = rows.iter().map(|r| r.deviation).fold(0.0, f64::max);
    let first_failure = rows
        .iter()
        .find(|r| !(r.deviation <= tolerance))
        .map(|r| r.t);
    TrajectoryReport {
        tolerance,
        max_deviation,
        first_failure,
        pass: first_failure.is_none(),
        rows,
    }
}

/// Compares the small `ε/T²`-scale part of `w_t^(1)` with its closed form.
/// The inner product with the direction uses compensated summation so that
/// the comparison is limited by the iterate, not by the check.
pub fn check_gd_corrections(
    traj: &Trajectory,
    inst: &GdInstance,
    ds: &GdDataset,
    tolerance: f64,
) -> Result<TrajectoryReport> {
    let p = &inst.params;
    let u0 = require_gd_event(inst, ds)?;
    let mut rows = Vec::new();
    for t in 3..=p.t {
        let Some(w) = traj.iterate(t) else { continue };
        let along = dot_compensated(&w[p.block(1)], inst.codebook.vector(u0));
        let measured = if t == 3 { along } else { along + 0.375 * p.eta };
        rows.push(StepDeviation {
            t,
            deviation: (measured - gd_correction(t, p)).abs(),
        });
    }
    Ok(deviation_report(rows, tolerance))
}

/// SGD analogue of [`check_gd_corrections`] for the `(t-1)η/n³` drift of
/// `w_t^(1)`.
pub fn check_sgd_corrections(
    traj: &Trajectory,
    inst: &SgdInstance,
    tolerance: f64,
) -> TrajectoryReport {
    let p = &inst.params;
    let mut rows = Vec::new();
    for t in 2..=p.n {
        let Some(w) = traj.iterate(t) else { continue };
        let along = dot_compensated(&w[p.block(1)], inst.codebook.vector(FIRST_DIRECTION));
        let measured = if t == 2 { along } else { along + 0.375 * p.eta };
        rows.push(StepDeviation {
            t,
            deviation: (measured - sgd_correction(t, p.n, p.eta)).abs(),
        });
    }
    deviation_report(rows, tolerance)
}

#[derive(Clone, Debug, Serialize)]
pub struct NormReport {
    pub max_norm: f64,
    pub pass: bool,
}

/// All iterates strictly inside the unit ball.
pub fn check_norm_bound(traj: &Trajectory) -> NormReport {
    let max_norm = traj.max_norm();
    NormReport {
        max_norm,
        pass: max_norm < 1.0,
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct EventProbability {
    pub trials: usize,
    pub hits: usize,
    pub frequency: f64,
    pub lower: f64,
    pub upper: f64,
}

/// Wilson score interval at `z`.
pub fn wilson(hits: usize, trials: usize, z: f64) -> (f64, f64) {
    let n = trials as f64;
    let p = hits as f64 / n;
    let z2 = z * z;
    let centre = (p + z2 / (2.0 * n)) / (1.0 + z2 / n);
    let half = z / (1.0 + z2 / n) * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt();
    ((centre - half).max(0.0), (centre + half).min(1.0))
}

/// Frequency of the GD good event over `trials` independent datasets with
/// a 95% Wilson interval. Dataset `i` uses seed `derive_seed(seed, i)`.
pub fn check_event_probability_gd(p: &GdParams, trials: usize, seed: u64) -> EventProbability {
    let hits = (0..trials)
        .filter(|&i| {
            let ds =
                crate::instance_gd::sample_gd_dataset(p, crate::rng::derive_seed(seed, i as u64));
            good_event_gd(&ds, p.universe).holds
        })
        .count();
    let (lower, upper) = wilson(hits, trials, Z95);
    EventProbability {
        trials,
        hits,
        frequency: hits as f64 / trials as f64,
        lower,
        upper,
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct MarginRow {
    pub t: usize,
    /// Whether a piece (rather than the floor) attains the maximum.
    pub piece_active: bool,
    /// Distance from the maximum to the nearest competitor: the runner-up
    /// piece or the floor when a piece is active, the best piece otherwise.
    pub separation: f64,
    pub slack: f64,
    pub pass: bool,
}

impl MarginRow {
    fn new(t: usize, piece_active: bool, separation: f64, slack: f64) -> Self {
        Self {
            t,
            piece_active,
            separation,
            slack,
            pass: separation >= slack,
        }
    }

    /// Row from the two largest pieces and the floor.
    fn from_values(t: usize, best: f64, second: f64, floor: f64, slack: f64) -> Self {
        if best > floor {
            Self::new(t, true, (best - second).min(best - floor), slack)
        } else {
            Self::new(t, false, floor - best, slack)
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct MarginReport {
    pub rows: Vec<MarginRow>,
    pub min_separation: f64,
    /// Steps whose active piece differs from the predicted one.
    pub wrong_piece: Vec<usize>,
    pub pass: bool,
}

impl MarginReport {
    fn new(rows: Vec<MarginRow>, wrong_piece: Vec<usize>) -> Self {
        let min_separation = rows
            .iter()
            .map(|r| r.separation)
            .fold(f64::INFINITY, f64::min);
        let pass = wrong_piece.is_empty() && rows.iter().all(|r| r.pass);
        Self {
            rows,
            min_separation,
            wrong_piece,
            pass,
        }
    }
}

/// Separation of the `ℓ4` maximum at every stored iterate: `η/64` once the
/// round-robin has started (`t ≥ 4`), `ηβ/8` before.
pub fn check_margins_gd(traj: &Trajectory, inst: &GdInstance) -> Result<MarginReport> {
    let p = &inst.params;
    let mut rows = Vec::new();
    for (&t, w) in traj.steps.iter().zip(&traj.iterates) {
        let point = inst.at(w, Mode::Oracle).map_err(|e| e.at_step(t))?;
        let slack = if t >= 4 {
            p.eta / 64.0
        } else {
            p.eta * p.beta / 8.0
        };
        rows.push(MarginRow::from_values(
            t,
            point.l4.best,
            point.l4.second,
            p.delta2,
            slack,
        ));
    }
    Ok(MarginReport::new(rows, Vec::new()))
}

/// Separation of the `ℓ2` maximum for the sample used at each step, against
/// the decode margin `εη/(16n²)`. The separation equals the slack exactly
/// at some steps and is computed from `1 - cos(2π/M)`, whose rounding is a
/// few ulp of 1; the slack is lowered by that much relative to `2sin²(π/M)`
/// (about `4e-7` at `M = 2^16`). Also
/// checks that from step 2 on the active piece is the newest step `t-1`
/// with decoded index `J_t`.
pub fn check_margins_sgd(
    traj: &Trajectory,
    inst: &SgdInstance,
    masks: &[SubsetMask],
) -> Result<MarginReport> {
    let p = &inst.params;
    let chord = p.eps * (p.n * p.n) as f64;
    let allowance = (8.0 * f64::EPSILON / chord).min(0.5);
    let slack = p.eps * p.eta / (16 * p.n * p.n) as f64 * (1.0 - allowance);
    let u = sgd_directions(masks, p.universe);
    let (mut rows, mut wrong) = (Vec::new(), Vec::new());
    for (&t, w) in traj.steps.iter().zip(&traj.iterates) {
        if t >= p.n {
            continue;
        }
        let point = inst.at(w, Mode::Oracle).map_err(|e| e.at_step(t))?;
        let l2 = point.l2(masks[t - 1]).map_err(|e| e.at_step(t))?;
        let expected = (t >= 2).then(|| (t - 1, u[t]));
        if l2.active.as_ref().map(|a| (a.k, a.alpha)) != expected {
            wrong.push(t);
        }
        rows.push(MarginRow::new(t, l2.active.is_some(), l2.margin, slack));
    }
    Ok(MarginReport::new(rows, wrong))
}

/// Separation of the small-step argmax, against `η/(8d)`.
pub fn check_margins_smallstep(traj: &Trajectory, p: &SmallStepParams) -> MarginReport {
    let slack = p.eta / (8.0 * p.d as f64);
    let rows = traj
        .steps
        .iter()
        .zip(&traj.iterates)
        .map(|(&t, w)| {
            let (gap, best) = p.margins(w);
            MarginRow::from_values(t, best, best - gap, 0.0, slack)
        })
        .collect();
    MarginReport::new(rows, Vec::new())
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct PropertyReport {
    pub trials: usize,
    pub lipschitz: f64,
    pub slack: f64,
    pub convexity_violations: usize,
    pub lipschitz_violations: usize,
    pub subgradient_violations: usize,
    /// Largest observed `f(λx+(1-λ)y) - λf(x) - (1-λ)f(y)`.
    pub worst_convexity: f64,
    /// Largest observed `|f(x)-f(y)| / ‖x-y‖`.
    pub worst_ratio: f64,
    /// Largest observed `f(x) + <g(x), y-x> - f(y)`.
    pub worst_subgradient: f64,
    pub pass: bool,
}

/// Random-probe checks of convexity, `L`-Lipschitzness and the subgradient
/// inequality, each with additive `slack`.
pub fn check_loss_properties<R: rand::Rng>(
    value: impl Fn(&[f64]) -> Result<f64>,
    grad: impl Fn(&[f64]) -> Result<Vec<f64>>,
    mut sample_point: impl FnMut(&mut R) -> Vec<f64>,
    lipschitz: f64,
    trials: usize,
    slack: f64,
    rng: &mut R,
) -> Result<PropertyReport> {
    let mut rep = PropertyReport {
        trials,
        lipschitz,
        slack,
        worst_convexity: f64::NEG_INFINITY,
        worst_subgradient: f64::NEG_INFINITY,
        ..Default::default()
    };
    for _ in 0..trials {
        let x = sample_point(rng);
        let y = sample_point(rng);
        let lambda: f64 = rng.random();
        let mut z = x.clone();
        crate::vecops::scale(lambda, &mut z);
        axpy(1.0 - lambda, &y, &mut z);
        let (fx, fy, fz) = (value(&x)?, value(&y)?, value(&z)?);
        let conv = fz - lambda * fx - (1.0 - lambda) * fy;
        rep.worst_convexity = rep.worst_convexity.max(conv);
        rep.convexity_violations += usize::from(conv > slack);
        let dist = norm(&sub(&x, &y));
        if dist > 0.0 {
            rep.worst_ratio = rep.worst_ratio.max((fx - fy).abs() / dist);
        }
        rep.lipschitz_violations += usize::from((fx - fy).abs() > lipschitz * dist + slack);
        let gx = grad(&x)?;
        let sg = fx + dot(&gx, &sub(&y, &x)) - fy;
        rep.worst_subgradient = rep.worst_subgradient.max(sg);
        rep.subgradient_violations += usize::from(sg > slack);
    }
    rep.pass = rep.convexity_violations == 0
        && rep.lipschitz_violations == 0
        && rep.subgradient_violations == 0;
    Ok(rep)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::{run_gd, Record};

    #[test]
    fn smallstep_prediction_matches_run() {
        let p = SmallStepParams::new(0.02, 100).unwrap();
        let traj = run_gd(&p, &[()], p.eta, 100, false, Record::All).unwrap();
        let rep = check_trajectory(&traj, 1..=100, 0.0, |t| {
            Ok(expected_smallstep_iterate(t, &p))
        })
        .unwrap();
        assert!(rep.pass, "{rep:?}");
        assert!(check_margins_smallstep(&traj, &p).pass);
    }

    #[test]
    fn injected_fault_is_located() {
        let p = SmallStepParams::new(0.02, 100).unwrap();
        let mut traj = run_gd(&p, &[()], p.eta, 100, false, Record::All).unwrap();
        traj.iterates[41][7] += 1e-6;
        let rep = check_trajectory(&traj, 1..=100, 1e-9, |t| {
            Ok(expected_smallstep_iterate(t, &p))
        })
        .unwrap();
        assert_eq!(rep.first_failure, Some(42));
    }

    #[test]
    fn wilson_interval_contains_the_frequency() {
        let (lo, hi) = wilson(30, 100, Z95);
        assert!(lo < 0.3 && 0.3 < hi);
        // Evaluated independently in 30-digit arithmetic.
        assert!((lo - 0.218_948_852_949_327_6).abs() < 1e-14);
        assert!((hi - 0.395_848_546_333_466_7).abs() < 1e-14);
    }

    #[test]
    fn suffix_formula_matches_averaged_coefficients() {
        let p = GdParams::theorem(4, 32, 16, 712).unwrap();
        for m in [1, 4, 16, 32] {
            for k in 2..=30 {
                let avg: f64 = (33 - m..=32)
                    .map(|t| gd_coefficients(t, &p)[k])
                    .sum::<f64>()
                    / m as f64;
                assert!((avg - gd_suffix_coefficient(k, m, &p).unwrap()).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn nonconvex_function_is_caught() {
        let mut rng = crate::rng::seeded(1);
        let rep = check_loss_properties(
            |x| Ok(-dot(x, x)),
            |x| Ok(x.iter().map(|v| -2.0 * v).collect()),
            |r: &mut rand_chacha::ChaCha8Rng| {
                (0..3)
                    .map(|_| rand::Rng::random_range(r, -1.0..1.0))
                    .collect()
            },
            10.0,
            200,
            1e-10,
            &mut rng,
        )
        .unwrap();
        assert!(!rep.pass && rep.convexity_violations > 0);
    }
}
