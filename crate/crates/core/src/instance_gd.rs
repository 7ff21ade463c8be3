//! The gradient-descent overfitting instance.
//!
//! Samples are pairs `(V, j)` of a codebook subset and one of `n²` slots.
//! The weight vector splits into an encoding subspace `w^(0)` of `n²` blocks
//! of two coordinates and `T` data subspaces `w^(1..T)` of dimension `d'`.
//! The loss is `ℓ1 + ℓ2 + ℓ3 + ℓ4`:
//!
//! * `ℓ1(w, V) = sqrt(Σ_{k≥2} max(3η/32, max_{u∈V} <u, w^(k)>)²)` punishes
//!   weight on directions the sample contains;
//! * `ℓ2(w, (V, j)) = -<φ(V, j), w^(0)>` makes the first step memorize the
//!   training set;
//! * `ℓ3(w) = max(δ1, max_ψ <ψ, w^(0)> - β <α(ψ), w^(1)>)` reads the memorized
//!   set back and pushes `w^(1)` toward a direction no sample contains;
//! * `ℓ4(w) = max(δ2, max_{u, k<T} 3/8 <u, w^(k)> - 1/2 <u, w^(k+1)>)` moves
//!   that direction one data subspace further per step.
//!
//! The oracle evaluates the maximum over encoded datasets `ψ` through
//! [`crate::certify`], which either proves its answer or refuses with
//! [`Error::OracleDomain`]. Reference mode enumerates every `ψ` and is meant
//! for tiny universes only.

use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::certify::{self, AlphaRule, Problem, Solution};
use crate::codebook::Codebook;
use crate::encoding::{check_universe, margin_eps, SubsetMask};
use crate::error::{Error, Result};
use crate::floor_norm;
use crate::objective::{Expansion, Objective, Surface};
use crate::vecops::{dot, norm};

/// Enumeration budget for reference mode.
pub const REFERENCE_BUDGET: u128 = 100_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Oracle,
    Reference,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GdParams {
    pub n: usize,
    #[serde(rename = "T")]
    pub t: usize,
    pub eta: f64,
    #[serde(rename = "N")]
    pub universe: usize,
    pub dprime: usize,
    pub d: usize,
    pub eps: f64,
    pub beta: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub smooth_delta: f64,
    pub theorem_mode: bool,
}

impl GdParams {
    /// Derives every constant from `(n, T, η, N, d')`. In theorem mode a step
    /// size above `1/(5√T)` is rejected; otherwise it only draws a warning.
    pub fn new(
        n: usize,
        t: usize,
        eta: f64,
        universe: usize,
        dprime: usize,
        theorem_mode: bool,
    ) -> Result<Self> {
        if n == 0 || t < 2 || dprime == 0 || !(eta > 0.0) {
            return Err(Error::InvalidParams(format!(
                "GD instance needs n >= 1, T >= 2, d' >= 1 and eta > 0 (got n={n}, T={t}, d'={dprime}, eta={eta})"
            )));
        }
        check_universe(universe)?;
        let bound = theorem_eta(t);
        if eta > bound * (1.0 + 1e-12) {
            if theorem_mode {
                return Err(Error::InvalidParams(format!(
                    "eta = {eta} exceeds 1/(5 sqrt(T)) = {bound}"
                )));
            }
            log::warn!("eta = {eta} exceeds 1/(5 sqrt(T)) = {bound}; closed forms may not apply");
        }
        let eps = margin_eps(n, 1u64 << universe);
        let beta = eps / (4.0 * (t * t) as f64);
        Ok(Self {
            n,
            t,
            eta,
            universe,
            dprime,
            d: t * dprime + 2 * n * n,
            eps,
            beta,
            delta1: eta / (2.0 * n as f64),
            delta2: 3.0 * eta * beta / 16.0,
            smooth_delta: eta * beta / 32.0,
            theorem_mode,
        })
    }

    /// Theorem mode with `η = 1/(5√T)`.
    pub fn theorem(n: usize, t: usize, universe: usize, dprime: usize) -> Result<Self> {
        Self::new(n, t, theorem_eta(t), universe, dprime, true)
    }

    pub fn slots(&self) -> usize {
        self.n * self.n
    }

    pub fn enc_len(&self) -> usize {
        2 * self.n * self.n
    }

    pub fn modulus(&self) -> u64 {
        1 << self.universe
    }

    /// Coordinates of subspace `k`: `0` is the encoding subspace, `1..=T`
    /// the data subspaces.
    pub fn block(&self, k: usize) -> Range<usize> {
        assert!(k <= self.t, "subspace {k} out of 0..={}", self.t);
        if k == 0 {
            0..self.enc_len()
        } else {
            let start = self.enc_len() + (k - 1) * self.dprime;
            start..start + self.dprime
        }
    }

    /// Coordinates of encoding slot `j` (0-based).
    pub fn slot(&self, j: usize) -> Range<usize> {
        2 * j..2 * j + 2
    }

    /// The floor `3η/32` inside `ℓ1`.
    pub fn l1_floor(&self) -> f64 {
        3.0 * self.eta / 32.0
    }
}

/// Largest step size allowed in theorem mode, `1/(5√T)`.
pub fn theorem_eta(t: usize) -> f64 {
    1.0 / (5.0 * (t as f64).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GdSample {
    pub mask: SubsetMask,
    /// Slot in `0..n²`.
    pub slot: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GdDataset {
    pub seed: u64,
    pub samples: Vec<GdSample>,
}

#[derive(Serialize, Deserialize)]
struct DatasetJson {
    seed: u64,
    n: usize,
    universe: usize,
    samples: Vec<SampleJson>,
}

#[derive(Serialize, Deserialize)]
struct SampleJson {
    mask: u64,
    slot: usize,
}

impl GdDataset {
    pub fn masks(&self) -> Vec<SubsetMask> {
        self.samples.iter().map(|s| s.mask).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        let universe = self.samples.first().map_or(1, |s| s.mask.universe());
        let doc = DatasetJson {
            seed: self.seed,
            n: self.samples.len(),
            universe,
            samples: self
                .samples
                .iter()
                .map(|s| SampleJson {
                    mask: s.mask.bits(),
                    slot: s.slot,
                })
                .collect(),
        };
        Ok(serde_json::to_string(&doc)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let doc: DatasetJson = serde_json::from_str(s)?;
        let samples = doc
            .samples
            .iter()
            .map(|s| {
                Ok(GdSample {
                    mask: SubsetMask::new(s.mask, doc.universe)?,
                    slot: s.slot,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if samples.len() != doc.n {
            return Err(Error::InvalidParams(format!(
                "dataset declares n = {} but has {} samples",
                doc.n,
                samples.len()
            )));
        }
        Ok(Self {
            seed: doc.seed,
            samples,
        })
    }
}

/// One draw from `D`: each codebook vector joins `V` with probability 1/2,
/// and the slot is uniform.
pub fn draw_sample<R: Rng>(params: &GdParams, rng: &mut R) -> GdSample {
    let full = SubsetMask::full(params.universe).bits();
    let mask = SubsetMask::new(rng.random::<u64>() & full, params.universe).expect("masked bits");
    GdSample {
        mask,
        slot: rng.random_range(0..params.slots()),
    }
}

pub fn sample_gd_dataset(params: &GdParams, seed: u64) -> GdDataset {
    let mut rng = crate::rng::seeded(seed);
    GdDataset {
        seed,
        samples: (0..params.n)
            .map(|_| draw_sample(params, &mut rng))
            .collect(),
    }
}

/// Draws datasets with derived seeds until one lies in the good event.
/// Returns the dataset and the number of rejected draws.
pub fn sample_gd_dataset_in_event(
    params: &GdParams,
    seed: u64,
    max_draws: usize,
) -> Result<(GdDataset, usize)> {
    for attempt in 0..max_draws {
        let ds = sample_gd_dataset(params, crate::rng::derive_seed(seed, attempt as u64));
        if good_event_gd(&ds, params.universe).holds {
            return Ok((ds, attempt));
        }
    }
    Err(Error::EventViolated(format!(
        "no dataset in the good event after {max_draws} draws"
    )))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GdEvent {
    pub holds: bool,
    pub uncovered: bool,
    pub distinct_slots: bool,
    pub diagnosis: String,
}

/// The good event: the union of the training sets misses some codebook
/// vector, and no two samples share a slot.
pub fn good_event_gd(ds: &GdDataset, universe: usize) -> GdEvent {
    let union = ds
        .samples
        .iter()
        .fold(SubsetMask::empty(universe), |a, s| a.union(s.mask));
    let uncovered = !union.is_full();
    let mut slots: Vec<usize> = ds.samples.iter().map(|s| s.slot).collect();
    slots.sort_unstable();
    let distinct_slots = slots.windows(2).all(|p| p[0] != p[1]);
    let mut problems = Vec::new();
    if !uncovered {
        problems.push("training sets cover the whole codebook");
    }
    if !distinct_slots {
        problems.push("two samples share a slot");
    }
    GdEvent {
        holds: uncovered && distinct_slots,
        uncovered,
        distinct_slots,
        diagnosis: if problems.is_empty() {
            "ok".into()
        } else {
            problems.join("; ")
        },
    }
}

#[derive(Clone, Debug)]
pub struct GdInstance {
    pub params: GdParams,
    pub codebook: Codebook,
}

/// Loss split into its four terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct GdTerms {
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
    pub l4: f64,
}

impl GdTerms {
    pub fn total(&self) -> f64 {
        self.l1 + self.l2 + self.l3 + self.l4
    }
}

/// The winning piece of `ℓ3`, if it beats the floor.
#[derive(Clone, Debug)]
pub struct L3Eval {
    pub value: f64,
    pub active: Option<L3Piece>,
    /// Separation between the active piece (or floor) and everything else.
    pub margin: f64,
}

#[derive(Clone, Debug)]
pub struct L3Piece {
    pub sets: Vec<(usize, SubsetMask)>,
    pub alpha: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct L4Eval {
    pub value: f64,
    /// `(u, k)` of the winning piece when it beats the floor.
    pub active: Option<(usize, usize)>,
    pub best: f64,
    pub second: f64,
    pub margin: f64,
}

impl GdInstance {
    pub fn new(params: GdParams, codebook: Codebook) -> Result<Self> {
        if codebook.len() != params.universe || codebook.dim() != params.dprime {
            return Err(Error::InvalidParams(format!(
                "codebook has {} vectors of dimension {}, params expect {} of dimension {}",
                codebook.len(),
                codebook.dim(),
                params.universe,
                params.dprime
            )));
        }
        Ok(Self { params, codebook })
    }

    /// Precomputes everything at `w` that does not depend on the sample.
    pub fn at<'a>(&'a self, w: &'a [f64], mode: Mode) -> Result<GdPoint<'a>> {
        GdPoint::new(self, w, mode)
    }

    pub fn terms(&self, w: &[f64], s: &GdSample, mode: Mode) -> Result<GdTerms> {
        Ok(self.at(w, mode)?.terms(s))
    }

    pub fn loss_mode(&self, w: &[f64], s: &GdSample, mode: Mode) -> Result<f64> {
        Ok(self.terms(w, s, mode)?.total())
    }

    pub fn grad_mode(&self, w: &[f64], s: &GdSample, mode: Mode) -> Result<Vec<f64>> {
        Ok(self.at(w, mode)?.grad(s))
    }
}

impl Objective for GdInstance {
    type Sample = GdSample;

    fn dim(&self) -> usize {
        self.params.d
    }

    fn loss(&self, w: &[f64], z: &GdSample) -> Result<f64> {
        self.loss_mode(w, z, Mode::Oracle)
    }

    fn grad(&self, w: &[f64], z: &GdSample) -> Result<Vec<f64>> {
        self.grad_mode(w, z, Mode::Oracle)
    }

    fn batch_loss(&self, w: &[f64], zs: &[GdSample]) -> Result<f64> {
        Ok(self.at(w, Mode::Oracle)?.batch_loss(zs))
    }

    fn batch_grad(&self, w: &[f64], zs: &[GdSample]) -> Result<Vec<f64>> {
        Ok(self.at(w, Mode::Oracle)?.batch_grad(zs))
    }
}

/// Sample-independent state of the loss at one point.
pub struct GdPoint<'a> {
    inst: &'a GdInstance,
    w: &'a [f64],
    /// `ip[u * (T + 1) + k] = <u, w^(k)>` for `k` in `1..=T`.
    ip: Vec<f64>,
    pub l3: L3Eval,
    pub l4: L4Eval,
}

impl<'a> GdPoint<'a> {
    fn new(inst: &'a GdInstance, w: &'a [f64], mode: Mode) -> Result<Self> {
        let p = &inst.params;
        if w.len() != p.d {
            return Err(Error::InvalidParams(format!(
                "weight has length {}, expected {}",
                w.len(),
                p.d
            )));
        }
        let stride = p.t + 1;
        let mut ip = vec![0.0; p.universe * stride];
        for k in 1..=p.t {
            let wk = &w[p.block(k)];
            for u in 0..p.universe {
                ip[u * stride + k] = dot(inst.codebook.vector(u), wk);
            }
        }
        let mut point = Self {
            inst,
            w,
            ip,
            l3: L3Eval {
                value: 0.0,
                active: None,
                margin: 0.0,
            },
            l4: L4Eval {
                value: 0.0,
                active: None,
                best: 0.0,
                second: 0.0,
                margin: 0.0,
            },
        };
        point.l3 = point.eval_l3(mode)?;
        point.l4 = point.eval_l4();
        Ok(point)
    }

    pub fn params(&self) -> &GdParams {
        &self.inst.params
    }

    /// `<u, w^(k)>` for codebook index `u` and data subspace `k`.
    pub fn inner(&self, u: usize, k: usize) -> f64 {
        self.ip[u * (self.inst.params.t + 1) + k]
    }

    fn encoding_blocks(&self) -> Vec<[f64; 2]> {
        let p = &self.inst.params;
        self.w[p.block(0)]
            .chunks_exact(2)
            .map(|b| [b[0], b[1]])
            .collect()
    }

    fn eval_l3(&self, mode: Mode) -> Result<L3Eval> {
        let p = &self.inst.params;
        let blocks = self.encoding_blocks();
        let penalty: Vec<f64> = (0..p.universe)
            .map(|u| -p.beta * self.inner(u, 1))
            .collect();
        let problem = Problem {
            blocks: &blocks,
            pick: p.n,
            scale: 1.0 / p.n as f64,
            rule: AlphaRule::Union,
            penalty: &penalty,
            universe: p.universe,
        };
        let sol = match mode {
            Mode::Oracle => certify::solve(&problem),
            Mode::Reference => certify::enumerate(&problem, REFERENCE_BUDGET)?,
        };
        resolve_floor(sol, p.delta1, "l3")
    }

    fn eval_l4(&self) -> L4Eval {
        let p = &self.inst.params;
        let mut best = f64::NEG_INFINITY;
        let mut second = f64::NEG_INFINITY;
        let mut arg = (0, 1);
        for u in 0..p.universe {
            for k in 1..p.t {
                let v = 0.375 * self.inner(u, k) - 0.5 * self.inner(u, k + 1);
                if v > best {
                    second = best;
                    best = v;
                    arg = (u, k);
                } else if v > second {
                    second = v;
                }
            }
        }
        if best > p.delta2 {
            L4Eval {
                value: best,
                active: Some(arg),
                best,
                second,
                margin: (best - second).min(best - p.delta2),
            }
        } else {
            L4Eval {
                value: p.delta2,
                active: None,
                best,
                second,
                margin: p.delta2 - best,
            }
        }
    }

    pub fn l1(&self, v: SubsetMask) -> f64 {
        let p = &self.inst.params;
        floor_norm::value(&floor_norm::heights(
            &floor_norm::maxima(v, p.t, |u, k| self.inner(u, k)),
            p.l1_floor(),
        ))
    }

    pub fn l2(&self, s: &GdSample) -> f64 {
        let g = s.mask.codepoint();
        let b = &self.w[self.inst.params.slot(s.slot)];
        -(g[0] * b[0] + g[1] * b[1])
    }

    pub fn terms(&self, s: &GdSample) -> GdTerms {
        GdTerms {
            l1: self.l1(s.mask),
            l2: self.l2(s),
            l3: self.l3.value,
            l4: self.l4.value,
        }
    }

    pub fn loss(&self, s: &GdSample) -> f64 {
        self.terms(s).total()
    }

    /// Adds the sample-dependent gradient (`ℓ1 + ℓ2`) times `weight` to `out`.
    fn add_sample_grad(&self, s: &GdSample, weight: f64, out: &mut [f64]) {
        let p = &self.inst.params;
        let maxima = floor_norm::maxima(s.mask, p.t, |u, k| self.inner(u, k));
        for (k, u, c) in floor_norm::grad_pieces(&maxima, p.l1_floor()) {
            crate::vecops::axpy(
                weight * c,
                self.inst.codebook.vector(u),
                &mut out[p.block(k)],
            );
        }
        let g = s.mask.codepoint();
        let r = p.slot(s.slot);
        out[r.start] -= weight * g[0];
        out[r.start + 1] -= weight * g[1];
    }

    /// Adds the gradient of `ℓ3 + ℓ4` to `out`.
    fn add_shared_grad(&self, out: &mut [f64]) {
        let p = &self.inst.params;
        if let Some(piece) = &self.l3.active {
            let inv_n = 1.0 / p.n as f64;
            for &(j, v) in &piece.sets {
                let g = v.codepoint();
                let r = p.slot(j);
                out[r.start] += inv_n * g[0];
                out[r.start + 1] += inv_n * g[1];
            }
            crate::vecops::axpy(
                -p.beta,
                self.inst.codebook.vector(piece.alpha),
                &mut out[p.block(1)],
            );
        }
        if let Some((u, k)) = self.l4.active {
            let v = self.inst.codebook.vector(u);
            crate::vecops::axpy(0.375, v, &mut out[p.block(k)]);
            crate::vecops::axpy(-0.5, v, &mut out[p.block(k + 1)]);
        }
    }

    pub fn grad(&self, s: &GdSample) -> Vec<f64> {
        let mut out = vec![0.0; self.inst.params.d];
        self.add_sample_grad(s, 1.0, &mut out);
        self.add_shared_grad(&mut out);
        out
    }

    pub fn batch_loss(&self, zs: &[GdSample]) -> f64 {
        let sample_part: f64 =
            zs.iter().map(|s| self.l1(s.mask) + self.l2(s)).sum::<f64>() / zs.len() as f64;
        sample_part + self.l3.value + self.l4.value
    }

    /// Mean subgradient: the sample-dependent terms are averaged in index
    /// order, the shared terms are added once.
    pub fn batch_grad(&self, zs: &[GdSample]) -> Vec<f64> {
        let mut out = vec![0.0; self.inst.params.d];
        let weight = 1.0 / zs.len() as f64;
        for s in zs {
            self.add_sample_grad(s, weight, &mut out);
        }
        self.add_shared_grad(&mut out);
        out
    }

    /// Exact local expansion of the empirical risk over `zs` around this
    /// point; see [`GdExpansion`].
    pub fn expansion(&self, zs: &'a [GdSample]) -> GdExpansion<'a> {
        GdExpansion::new(self, zs)
    }
}

/// Turns a certified bracket into the value of `max(floor, ·)`.
pub(crate) fn resolve_floor(sol: Solution, floor: f64, term: &'static str) -> Result<L3Eval> {
    if sol.upper <= floor || (sol.exact && sol.lower <= floor) {
        let top = if sol.exact { sol.lower } else { sol.upper };
        return Ok(L3Eval {
            value: floor,
            active: None,
            margin: floor - top,
        });
    }
    if !sol.exact {
        return Err(Error::OracleDomain {
            term,
            reason: format!(
                "encoded maximum bracketed in [{:e}, {:e}] above the floor {:e}, and the decode gap cannot separate it",
                sol.lower, sol.upper, floor
            ),
        });
    }
    Ok(L3Eval {
        value: sol.lower,
        margin: sol.margin.min(sol.lower - floor),
        active: Some(L3Piece {
            sets: sol.sets,
            alpha: sol.alpha,
        }),
    })
}

/// The empirical risk of a dataset as a deterministic surface.
pub struct GdEmpirical<'a> {
    pub inst: &'a GdInstance,
    pub samples: &'a [GdSample],
}

impl Surface for GdEmpirical<'_> {
    fn dim(&self) -> usize {
        self.inst.params.d
    }

    fn value(&self, w: &[f64]) -> Result<f64> {
        self.inst.batch_loss(w, self.samples)
    }

    fn expand<'b>(&'b self, w: &'b [f64]) -> Result<Box<dyn Expansion + 'b>> {
        let point = self.inst.at(w, Mode::Oracle)?;
        let exp = GdExpansion::new(&point, self.samples);
        Ok(Box::new(exp))
    }
}

/// `F̂(w + x) - F̂(w)` evaluated from the gaps between linear pieces at `w`
/// instead of subtracting two rounded loss values.
///
/// `ℓ1`, `ℓ2` and `ℓ4` are handled exactly for any `x`. The encoded maximum in
/// `ℓ3` is represented by its winning piece only, which is exact while `‖x‖`
/// stays below half the certified margin; larger perturbations are refused.
pub struct GdExpansion<'a> {
    codebook: &'a Codebook,
    params: GdParams,
    samples: &'a [GdSample],
    base: f64,
    l1: Vec<floor_norm::Local>,
    l2_dir: Vec<f64>,
    l3_radius: f64,
    l3_piece: Option<L3Piece>,
    /// `gap[u * T + k]` for `k` in `1..T`.
    l4_gap: Vec<f64>,
    l4_floor_gap: f64,
}

impl<'a> GdExpansion<'a> {
    fn new(point: &GdPoint<'a>, samples: &'a [GdSample]) -> Self {
        let p = point.inst.params.clone();
        let l1 = samples
            .iter()
            .map(|s| floor_norm::Local::new(s.mask, p.t, p.l1_floor(), |u, k| point.inner(u, k)))
            .collect();
        let mut l2_dir = vec![0.0; p.enc_len()];
        for s in samples {
            let g = s.mask.codepoint();
            let r = p.slot(s.slot);
            l2_dir[r.start] -= g[0] / samples.len() as f64;
            l2_dir[r.start + 1] -= g[1] / samples.len() as f64;
        }
        let mut l4_gap = vec![f64::NEG_INFINITY; p.universe * p.t];
        for u in 0..p.universe {
            for k in 1..p.t {
                l4_gap[u * p.t + k] =
                    0.375 * point.inner(u, k) - 0.5 * point.inner(u, k + 1) - point.l4.value;
            }
        }
        Self {
            codebook: &point.inst.codebook,
            samples,
            base: point.batch_loss(samples),
            l1,
            l2_dir,
            l3_radius: 0.5 * point.l3.margin,
            l3_piece: point.l3.active.clone(),
            l4_gap,
            l4_floor_gap: p.delta2 - point.l4.value,
            params: p,
        }
    }

    /// Largest perturbation norm for which the expansion is exact.
    pub fn radius(&self) -> f64 {
        self.l3_radius
    }
}

impl Expansion for GdExpansion<'_> {
    fn base(&self) -> f64 {
        self.base
    }

    fn increment(&self, x: &[f64]) -> Result<f64> {
        let p = &self.params;
        let xn = norm(x);
        if xn > self.l3_radius {
            return Err(Error::OutsideLocalRadius {
                radius: self.l3_radius,
                norm: xn,
            });
        }
        let t = p.t;
        let mut xs = vec![0.0; p.universe * (t + 1)];
        for k in 1..=t {
            let xk = &x[p.block(k)];
            for u in 0..p.universe {
                xs[u * (t + 1) + k] = dot(self.codebook.vector(u), xk);
            }
        }
        let at = |u: usize, k: usize| xs[u * (t + 1) + k];

        let mut d4 = self.l4_floor_gap;
        for u in 0..p.universe {
            for k in 1..t {
                d4 = d4.max(self.l4_gap[u * t + k] + 0.375 * at(u, k) - 0.5 * at(u, k + 1));
            }
        }

        let d1: f64 = self.l1.iter().map(|loc| loc.increment(at)).sum::<f64>();
        let d1 = d1 / self.samples.len() as f64;

        let x0 = &x[p.block(0)];
        let d2 = dot(&self.l2_dir, x0);
        let d3 = match &self.l3_piece {
            None => 0.0,
            Some(piece) => {
                let mut s = 0.0;
                for &(j, v) in &piece.sets {
                    let g = v.codepoint();
                    let r = p.slot(j);
                    s += g[0] * x0[r.start] + g[1] * x0[r.start + 1];
                }
                s / p.n as f64 - p.beta * at(piece.alpha, 1)
            }
        };
        Ok(d1 + d2 + d3 + d4)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codebook::generate_codebook;

    fn small() -> GdInstance {
        let params = GdParams::theorem(2, 4, 3, 64).unwrap();
        let cb = generate_codebook(3, 64, 5, 10_000).unwrap();
        GdInstance::new(params, cb).unwrap()
    }

    #[test]
    fn derived_constants() {
        let p = GdParams::theorem(4, 32, 16, 712).unwrap();
        assert_eq!(p.d, 32 * 712 + 32);
        assert_eq!(p.beta, p.eps / 4096.0);
        assert_eq!(p.delta1, p.eta / 8.0);
        assert!(GdParams::new(4, 32, 0.05, 16, 712, true).is_err());
        assert!(GdParams::new(4, 32, 0.05, 16, 712, false).is_ok());
    }

    #[test]
    fn origin_sits_on_every_floor() {
        let inst = small();
        let p = &inst.params;
        let w = vec![0.0; p.d];
        let s = GdSample {
            mask: SubsetMask::new(5, 3).unwrap(),
            slot: 1,
        };
        let t = inst.terms(&w, &s, Mode::Oracle).unwrap();
        assert!((t.l1 - p.l1_floor() * 3f64.sqrt()).abs() < 1e-16);
        assert_eq!(t.l2, 0.0);
        assert_eq!(t.l3, p.delta1);
        assert_eq!(t.l4, p.delta2);
        let r = inst.terms(&w, &s, Mode::Reference).unwrap();
        assert_eq!(t, r);
    }

    #[test]
    fn event_clauses() {
        let empty = SubsetMask::empty(3);
        let ds = GdDataset {
            seed: 0,
            samples: vec![
                GdSample {
                    mask: empty,
                    slot: 0,
                },
                GdSample {
                    mask: empty,
                    slot: 1,
                },
            ],
        };
        assert!(good_event_gd(&ds, 3).holds);
        let clash = GdDataset {
            seed: 0,
            samples: vec![
                GdSample {
                    mask: empty,
                    slot: 2,
                },
                GdSample {
                    mask: empty,
                    slot: 2,
                },
            ],
        };
        let ev = good_event_gd(&clash, 3);
        assert!(!ev.holds && !ev.distinct_slots && ev.uncovered);
        let cover = GdDataset {
            seed: 0,
            samples: vec![GdSample {
                mask: SubsetMask::full(3),
                slot: 0,
            }],
        };
        let ev = good_event_gd(&cover, 3);
        assert!(!ev.holds && !ev.uncovered);
    }

    #[test]
    fn dataset_json_round_trip() {
        let p = GdParams::theorem(3, 8, 5, 256).unwrap();
        let ds = sample_gd_dataset(&p, 42);
        assert_eq!(GdDataset::from_json(&ds.to_json().unwrap()).unwrap(), ds);
        assert_eq!(sample_gd_dataset(&p, 42), ds);
    }
}
