//! The one-pass SGD underfitting instance.
//!
//! Samples are codebook subsets in which every vector appears independently
//! with probability `1/(4n²)`. The encoding subspace holds `n` groups
//! `w^(0,1..n)` of `n` two-dimensional position blocks each; position `p`
//! (0-based) carries the `p`-th sample seen by SGD. There are `n` data
//! subspaces, one per step.
//!
//! The loss is `ℓ1 + ℓ2 + ℓ3`. `ℓ1` is the floored norm shared with the GD
//! instance. `ℓ2` is the maximum, over a step `k`, a direction `u` and an
//! encoded prefix `ψ` of `k` sets, of
//!
//! ```text
//! 3/8 <u, w^(k)> - 1/2 <α(ψ), w^(k+1)> + <w^(0,k) - w^(0,k+1), ψ/(4n)>
//!     - <w^(0,k+1), φ(V, k+1)>/(4n²)
//! ```
//!
//! floored at `δ1`, where `α` returns the lowest index in the intersection
//! of the prefix. `ℓ3` is linear and gives the first step its direction.

use std::ops::Range;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::certify::{self, AlphaRule, Problem, Solution};
use crate::codebook::Codebook;
use crate::encoding::{check_universe, margin_eps, SubsetMask};
use crate::error::{Error, Result};
use crate::floor_norm;
use crate::instance_gd::{theorem_eta, Mode, REFERENCE_BUDGET};
use crate::objective::{Expansion, Objective, Surface};
use crate::vecops::{dot, norm};

/// Codebook index of the fixed direction in `ℓ3`.
pub const FIRST_DIRECTION: usize = 0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdParams {
    pub n: usize,
    pub eta: f64,
    #[serde(rename = "N")]
    pub universe: usize,
    pub dprime: usize,
    pub d: usize,
    pub inclusion: f64,
    pub eps: f64,
    pub delta1: f64,
    pub smooth_delta: f64,
    pub theorem_mode: bool,
}

impl SgdParams {
    pub fn new(
        n: usize,
        eta: f64,
        universe: usize,
        dprime: usize,
        theorem_mode: bool,
    ) -> Result<Self> {
        if n < 2 || dprime == 0 || !(eta > 0.0) {
            return Err(Error::InvalidParams(format!(
                "SGD instance needs n >= 2, d' >= 1 and eta > 0 (got n={n}, d'={dprime}, eta={eta})"
            )));
        }
        check_universe(universe)?;
        let bound = theorem_eta(n);
        if eta > bound * (1.0 + 1e-12) {
            if theorem_mode {
                return Err(Error::InvalidParams(format!(
                    "eta = {eta} exceeds 1/(5 sqrt(n)) = {bound}"
                )));
            }
            log::warn!("eta = {eta} exceeds 1/(5 sqrt(n)) = {bound}; closed forms may not apply");
        }
        let eps = margin_eps(n, 1u64 << universe);
        let n3 = (n * n * n) as f64;
        Ok(Self {
            n,
            eta,
            universe,
            dprime,
            d: n * dprime + 2 * n * n,
            inclusion: 1.0 / (4 * n * n) as f64,
            eps,
            delta1: eta / (8.0 * n3),
            smooth_delta: eta * eps / (32.0 * n3),
            theorem_mode,
        })
    }

    /// Theorem mode with `η = 1/(5√n)`.
    pub fn theorem(n: usize, universe: usize, dprime: usize) -> Result<Self> {
        Self::new(n, theorem_eta(n), universe, dprime, true)
    }

    /// Number of iterates, equal to `n`.
    pub fn t(&self) -> usize {
        self.n
    }

    pub fn enc_len(&self) -> usize {
        2 * self.n * self.n
    }

    /// Data subspace `k` in `1..=n`.
    pub fn block(&self, k: usize) -> Range<usize> {
        assert!(
            (1..=self.n).contains(&k),
            "subspace {k} out of 1..={}",
            self.n
        );
        let start = self.enc_len() + (k - 1) * self.dprime;
        start..start + self.dprime
    }

    /// Encoding group `w^(0,k)` for `k` in `1..=n`.
    pub fn group(&self, k: usize) -> Range<usize> {
        assert!((1..=self.n).contains(&k), "group {k} out of 1..={}", self.n);
        let start = 2 * self.n * (k - 1);
        start..start + 2 * self.n
    }

    /// Block of position `p` (0-based) inside group `k`.
    pub fn enc(&self, k: usize, p: usize) -> Range<usize> {
        let start = self.group(k).start + 2 * p;
        start..start + 2
    }

    pub fn l1_floor(&self) -> f64 {
        3.0 * self.eta / 32.0
    }

    fn quarter_n2(&self) -> f64 {
        1.0 / (4 * self.n * self.n) as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SgdDataset {
    pub seed: u64,
    pub masks: Vec<SubsetMask>,
}

#[derive(Serialize, Deserialize)]
struct DatasetJson {
    seed: u64,
    n: usize,
    universe: usize,
    masks: Vec<u64>,
}

impl SgdDataset {
    pub fn to_json(&self) -> Result<String> {
        let doc = DatasetJson {
            seed: self.seed,
            n: self.masks.len(),
            universe: self.masks.first().map_or(1, |m| m.universe()),
            masks: self.masks.iter().map(|m| m.bits()).collect(),
        };
        Ok(serde_json::to_string(&doc)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let doc: DatasetJson = serde_json::from_str(s)?;
        if doc.masks.len() != doc.n {
            return Err(Error::InvalidParams(format!(
                "dataset declares n = {} but has {} masks",
                doc.n,
                doc.masks.len()
            )));
        }
        let masks = doc
            .masks
            .iter()
            .map(|&b| SubsetMask::new(b, doc.universe))
            .collect::<Result<_>>()?;
        Ok(Self {
            seed: doc.seed,
            masks,
        })
    }
}

pub fn draw_set<R: Rng>(params: &SgdParams, rng: &mut R) -> SubsetMask {
    let bits = (0..params.universe)
        .filter(|_| rng.random_bool(params.inclusion))
        .fold(0u64, |b, i| b | 1 << i);
    SubsetMask::new(bits, params.universe).expect("bits below universe")
}

pub fn sample_sgd_dataset(params: &SgdParams, seed: u64) -> SgdDataset {
    let mut rng = crate::rng::seeded(seed);
    SgdDataset {
        seed,
        masks: (0..params.n).map(|_| draw_set(params, &mut rng)).collect(),
    }
}

/// Prefix intersections `P_t`, suffix complements `S_t` and `J_t = min P_t`
/// for `t = 1..=n`, stored 0-based.
#[derive(Clone, Debug, PartialEq)]
pub struct SgdEventState {
    pub prefix: Vec<SubsetMask>,
    pub suffix: Vec<SubsetMask>,
    pub j: Vec<Option<usize>>,
}

impl SgdEventState {
    pub fn new(sets: &[SubsetMask], universe: usize) -> Self {
        let n = sets.len();
        let mut prefix = Vec::with_capacity(n);
        let mut p = SubsetMask::full(universe);
        for v in sets {
            prefix.push(p);
            p = p.intersection(*v);
        }
        let mut suffix = vec![SubsetMask::full(universe); n];
        let mut s = SubsetMask::full(universe);
        for t in (0..n).rev() {
            s = s.intersection(sets[t].complement());
            suffix[t] = s;
        }
        let j = prefix.iter().map(|p| p.min_index()).collect();
        Self { prefix, suffix, j }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SgdEvent {
    pub holds: bool,
    pub state: SgdEventState,
    /// `(t, reason)` with `t` 1-based.
    pub failures: Vec<(usize, &'static str)>,
}

/// The good event: every prefix intersection is nonempty and its lowest
/// member avoids all later sets.
pub fn good_event_sgd(sets: &[SubsetMask], universe: usize) -> SgdEvent {
    let state = SgdEventState::new(sets, universe);
    let mut failures = Vec::new();
    for t in 0..sets.len() {
        match state.j[t] {
            None => failures.push((t + 1, "prefix intersection is empty")),
            Some(j) if !state.suffix[t].contains(j) => {
                failures.push((t + 1, "lowest prefix member reappears later"))
            }
            Some(_) => {}
        }
    }
    SgdEvent {
        holds: failures.is_empty(),
        state,
        failures,
    }
}

/// Builds a dataset inside the good event. Distinct indices
/// `0 = c_1 < c_2 < .. < c_n` are planted so that `c_s` belongs to exactly the
/// sets before position `s`; every other membership is drawn from the
/// sampling distribution and then cut back where it would undercut a
/// planted index.
pub fn force_good_event_sgd(params: &SgdParams, seed: u64) -> Result<SgdDataset> {
    let (n, universe) = (params.n, params.universe);
    if universe < n + 1 {
        return Err(Error::InfeasibleForcing { n, universe });
    }
    let mut rng = crate::rng::seeded(seed);
    let mut c: Vec<usize> = sample_indices(&mut rng, universe - 1, n - 1)
        .into_iter()
        .map(|x| x + 1)
        .collect();
    c.sort_unstable();
    c.insert(0, 0);
    let mut masks: Vec<SubsetMask> = (0..n).map(|_| draw_set(params, &mut rng)).collect();
    for (s, &cs) in c.iter().enumerate() {
        for (i, m) in masks.iter_mut().enumerate() {
            *m = if i < s { m.with(cs) } else { m.without(cs) };
        }
    }
    for x in (0..universe).filter(|x| !c.contains(x)) {
        let run = masks.iter().take_while(|m| m.contains(x)).count();
        // x sits in P_t for t <= run + 1 and must exceed c_t there.
        let last_ok = (0..=run.min(n - 1)).rev().find(|&r| c[r] < x).unwrap_or(0);
        if last_ok < run.min(n - 1) {
            masks[last_ok] = masks[last_ok].without(x);
        }
    }
    let ev = good_event_sgd(&masks, universe);
    if !ev.holds {
        return Err(Error::EventViolated(format!(
            "forced dataset fails the event: {:?}",
            ev.failures
        )));
    }
    Ok(SgdDataset { seed, masks })
}

#[derive(Clone, Debug)]
pub struct SgdInstance {
    pub params: SgdParams,
    pub codebook: Codebook,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SgdTerms {
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
}

impl SgdTerms {
    pub fn total(&self) -> f64 {
        self.l1 + self.l2 + self.l3
    }
}

/// The winning piece of `ℓ2`.
#[derive(Clone, Debug, PartialEq)]
pub struct L2Piece {
    /// Step `k` in `1..n`.
    pub k: usize,
    pub u: usize,
    /// Prefix sets by position.
    pub sets: Vec<(usize, SubsetMask)>,
    pub alpha: usize,
}

#[derive(Clone, Debug)]
pub struct L2Eval {
    pub value: f64,
    pub active: Option<L2Piece>,
    pub margin: f64,
}

impl SgdInstance {
    pub fn new(params: SgdParams, codebook: Codebook) -> Result<Self> {
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

    pub fn at<'a>(&'a self, w: &'a [f64], mode: Mode) -> Result<SgdPoint<'a>> {
        SgdPoint::new(self, w, mode)
    }

    pub fn terms(&self, w: &[f64], v: SubsetMask, mode: Mode) -> Result<SgdTerms> {
        self.at(w, mode)?.terms(v)
    }

    pub fn loss_mode(&self, w: &[f64], v: SubsetMask, mode: Mode) -> Result<f64> {
        Ok(self.terms(w, v, mode)?.total())
    }

    pub fn grad_mode(&self, w: &[f64], v: SubsetMask, mode: Mode) -> Result<Vec<f64>> {
        self.at(w, mode)?.grad(v)
    }
}

impl Objective for SgdInstance {
    type Sample = SubsetMask;

    fn dim(&self) -> usize {
        self.params.d
    }

    fn loss(&self, w: &[f64], v: &SubsetMask) -> Result<f64> {
        self.loss_mode(w, *v, Mode::Oracle)
    }

    fn grad(&self, w: &[f64], v: &SubsetMask) -> Result<Vec<f64>> {
        self.grad_mode(w, *v, Mode::Oracle)
    }

    fn batch_loss(&self, w: &[f64], zs: &[SubsetMask]) -> Result<f64> {
        let point = self.at(w, Mode::Oracle)?;
        let mut total = 0.0;
        for v in zs {
            total += point.terms(*v)?.total();
        }
        Ok(total / zs.len() as f64)
    }
}

/// Sample-independent parts of the loss at one step `k`.
struct StepBound {
    /// Best `3/8 <u, w^(k)>`, its argmax and the runner-up value.
    a_best: f64,
    a_arg: usize,
    a_second: f64,
    sol: Solution,
}

pub struct SgdPoint<'a> {
    inst: &'a SgdInstance,
    w: &'a [f64],
    /// `ip[u * (n + 1) + k] = <u, w^(k)>`.
    ip: Vec<f64>,
    steps: Vec<StepBound>,
}

impl<'a> SgdPoint<'a> {
    fn new(inst: &'a SgdInstance, w: &'a [f64], mode: Mode) -> Result<Self> {
        let p = &inst.params;
        if w.len() != p.d {
            return Err(Error::InvalidParams(format!(
                "weight has length {}, expected {}",
                w.len(),
                p.d
            )));
        }
        let stride = p.n + 1;
        let mut ip = vec![0.0; p.universe * stride];
        for k in 1..=p.n {
            let wk = &w[p.block(k)];
            for u in 0..p.universe {
                ip[u * stride + k] = dot(inst.codebook.vector(u), wk);
            }
        }
        let mut point = Self {
            inst,
            w,
            ip,
            steps: Vec::with_capacity(p.n - 1),
        };
        for k in 1..p.n {
            let step = point.step_bound(k, mode)?;
            point.steps.push(step);
        }
        Ok(point)
    }

    pub fn params(&self) -> &SgdParams {
        &self.inst.params
    }

    pub fn inner(&self, u: usize, k: usize) -> f64 {
        self.ip[u * (self.inst.params.n + 1) + k]
    }

    fn step_bound(&self, k: usize, mode: Mode) -> Result<StepBound> {
        let p = &self.inst.params;
        let (mut a_best, mut a_arg, mut a_second) = (f64::NEG_INFINITY, 0, f64::NEG_INFINITY);
        for u in 0..p.universe {
            let v = 0.375 * self.inner(u, k);
            if v > a_best {
                a_second = a_best;
                a_best = v;
                a_arg = u;
            } else if v > a_second {
                a_second = v;
            }
        }
        let blocks: Vec<[f64; 2]> = (0..k)
            .map(|i| {
                let (x, y) = (&self.w[p.enc(k, i)], &self.w[p.enc(k + 1, i)]);
                [x[0] - y[0], x[1] - y[1]]
            })
            .collect();
        let penalty: Vec<f64> = (0..p.universe)
            .map(|u| -0.5 * self.inner(u, k + 1))
            .collect();
        let problem = Problem {
            blocks: &blocks,
            pick: k,
            scale: p.quarter_n2(),
            rule: AlphaRule::Intersection,
            penalty: &penalty,
            universe: p.universe,
        };
        let sol = match mode {
            Mode::Oracle => certify::solve(&problem),
            Mode::Reference => certify::enumerate(&problem, REFERENCE_BUDGET)?,
        };
        Ok(StepBound {
            a_best,
            a_arg,
            a_second,
            sol,
        })
    }

    /// `-<w^(0,k+1) at position k, g(V)>/(4n²)`, the only sample-dependent
    /// part of step `k`.
    fn sample_shift(&self, k: usize, v: SubsetMask) -> f64 {
        let p = &self.inst.params;
        let g = v.codepoint();
        let b = &self.w[p.enc(k + 1, k)];
        -(g[0] * b[0] + g[1] * b[1]) * p.quarter_n2()
    }

    pub fn l2(&self, v: SubsetMask) -> Result<L2Eval> {
        let p = &self.inst.params;
        let mut lo = Vec::with_capacity(self.steps.len());
        let mut hi = Vec::with_capacity(self.steps.len());
        for (i, st) in self.steps.iter().enumerate() {
            let base = st.a_best + self.sample_shift(i + 1, v);
            lo.push(base + st.sol.lower);
            hi.push(
                base + if st.sol.exact {
                    st.sol.lower
                } else {
                    st.sol.upper
                },
            );
        }
        let max_hi = hi.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max_hi <= p.delta1 {
            return Ok(L2Eval {
                value: p.delta1,
                active: None,
                margin: p.delta1 - max_hi,
            });
        }
        let mut best = 0;
        for i in 1..lo.len() {
            if lo[i] > lo[best] {
                best = i;
            }
        }
        let others = (0..hi.len())
            .filter(|&i| i != best)
            .map(|i| hi[i])
            .fold(f64::NEG_INFINITY, f64::max);
        let st = &self.steps[best];
        if !st.sol.exact || lo[best] < others {
            return Err(Error::OracleDomain {
                term: "l2_sgd",
                reason: format!(
                    "step {} leads with {:e} but the maxima cannot be separated (competing bound {:e}, certified {})",
                    best + 1,
                    lo[best],
                    others,
                    st.sol.exact
                ),
            });
        }
        if lo[best] <= p.delta1 {
            return Ok(L2Eval {
                value: p.delta1,
                active: None,
                margin: p.delta1 - lo[best],
            });
        }
        let margin = st
            .sol
            .margin
            .min(st.a_best - st.a_second)
            .min(lo[best] - others)
            .min(lo[best] - p.delta1);
        Ok(L2Eval {
            value: lo[best],
            margin,
            active: Some(L2Piece {
                k: best + 1,
                u: st.a_arg,
                sets: st.sol.sets.clone(),
                alpha: st.sol.alpha,
            }),
        })
    }

    pub fn l1(&self, v: SubsetMask) -> f64 {
        let p = &self.inst.params;
        floor_norm::value(&floor_norm::heights(
            &floor_norm::maxima(v, p.n, |u, k| self.inner(u, k)),
            p.l1_floor(),
        ))
    }

    pub fn l3(&self, v: SubsetMask) -> f64 {
        let p = &self.inst.params;
        let g = v.codepoint();
        let b = &self.w[p.enc(1, 0)];
        let n3 = (p.n * p.n * p.n) as f64;
        -(g[0] * b[0] + g[1] * b[1]) * p.quarter_n2() - self.inner(FIRST_DIRECTION, 1) / n3
    }

    pub fn terms(&self, v: SubsetMask) -> Result<SgdTerms> {
        Ok(SgdTerms {
            l1: self.l1(v),
            l2: self.l2(v)?.value,
            l3: self.l3(v),
        })
    }

    pub fn grad(&self, v: SubsetMask) -> Result<Vec<f64>> {
        let p = &self.inst.params;
        let cb = &self.inst.codebook;
        let mut out = vec![0.0; p.d];
        let maxima = floor_norm::maxima(v, p.n, |u, k| self.inner(u, k));
        for (k, u, c) in floor_norm::grad_pieces(&maxima, p.l1_floor()) {
            crate::vecops::axpy(c, cb.vector(u), &mut out[p.block(k)]);
        }
        if let Some(piece) = self.l2(v)?.active {
            l2_piece(p, &piece, v).add_to(cb, p, &mut out);
        }
        l3_piece(p, v).add_to(cb, p, &mut out);
        Ok(out)
    }
}

/// A linear function on the weight space given by sparse encoding
/// coordinates and `(codebook index, subspace, coefficient)` triples.
#[derive(Clone, Debug, Default)]
struct LinearPiece {
    enc: Vec<(usize, f64)>,
    data: Vec<(usize, usize, f64)>,
}

impl LinearPiece {
    fn push_block(&mut self, range: Range<usize>, g: [f64; 2], c: f64) {
        self.enc.push((range.start, c * g[0]));
        self.enc.push((range.start + 1, c * g[1]));
    }

    fn add_to(&self, cb: &Codebook, p: &SgdParams, out: &mut [f64]) {
        for &(i, c) in &self.enc {
            out[i] += c;
        }
        for &(u, k, c) in &self.data {
            crate::vecops::axpy(c, cb.vector(u), &mut out[p.block(k)]);
        }
    }

    fn apply(&self, x: &[f64], dx: impl Fn(usize, usize) -> f64) -> f64 {
        self.enc.iter().map(|&(i, c)| c * x[i]).sum::<f64>()
            + self.data.iter().map(|&(u, k, c)| c * dx(u, k)).sum::<f64>()
    }
}

fn l2_piece(p: &SgdParams, piece: &L2Piece, v: SubsetMask) -> LinearPiece {
    let q = p.quarter_n2();
    let k = piece.k;
    let mut lp = LinearPiece {
        enc: Vec::new(),
        data: vec![(piece.u, k, 0.375), (piece.alpha, k + 1, -0.5)],
    };
    for &(i, set) in &piece.sets {
        let g = set.codepoint();
        lp.push_block(p.enc(k, i), g, q);
        lp.push_block(p.enc(k + 1, i), g, -q);
    }
    lp.push_block(p.enc(k + 1, k), v.codepoint(), -q);
    lp
}

fn l3_piece(p: &SgdParams, v: SubsetMask) -> LinearPiece {
    let n3 = (p.n * p.n * p.n) as f64;
    let mut lp = LinearPiece {
        enc: Vec::new(),
        data: vec![(FIRST_DIRECTION, 1, -1.0 / n3)],
    };
    lp.push_block(p.enc(1, 0), v.codepoint(), -p.quarter_n2());
    lp
}

/// Mean loss over a list of sets as a deterministic surface.
pub struct SgdEmpirical<'a> {
    pub inst: &'a SgdInstance,
    pub samples: &'a [SubsetMask],
}

impl Surface for SgdEmpirical<'_> {
    fn dim(&self) -> usize {
        self.inst.params.d
    }

    fn value(&self, w: &[f64]) -> Result<f64> {
        self.inst.batch_loss(w, self.samples)
    }

    fn expand<'b>(&'b self, w: &'b [f64]) -> Result<Box<dyn Expansion + 'b>> {
        let point = self.inst.at(w, Mode::Oracle)?;
        Ok(Box::new(SgdExpansion::new(&point, self.samples)?))
    }
}

/// Gap-based increment of the mean loss; exact within the reported radius.
pub struct SgdExpansion<'a> {
    codebook: &'a Codebook,
    params: SgdParams,
    base: f64,
    radius: f64,
    l1: Vec<floor_norm::Local>,
    pieces: Vec<LinearPiece>,
}

impl<'a> SgdExpansion<'a> {
    pub fn new(point: &SgdPoint<'a>, samples: &[SubsetMask]) -> Result<Self> {
        let p = point.inst.params.clone();
        let mut base = 0.0;
        let mut radius = f64::INFINITY;
        let mut l1 = Vec::with_capacity(samples.len());
        let mut pieces = Vec::with_capacity(samples.len());
        for &v in samples {
            let local = floor_norm::Local::new(v, p.n, p.l1_floor(), |u, k| point.inner(u, k));
            let l2 = point.l2(v)?;
            base += local.value() + l2.value + point.l3(v);
            radius = radius.min(0.5 * l2.margin);
            let mut piece = l3_piece(&p, v);
            if let Some(active) = &l2.active {
                let extra = l2_piece(&p, active, v);
                piece.enc.extend(extra.enc);
                piece.data.extend(extra.data);
            }
            l1.push(local);
            pieces.push(piece);
        }
        Ok(Self {
            codebook: &point.inst.codebook,
            base: base / samples.len() as f64,
            radius,
            l1,
            pieces,
            params: p,
        })
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }
}

impl Expansion for SgdExpansion<'_> {
    fn base(&self) -> f64 {
        self.base
    }

    fn increment(&self, x: &[f64]) -> Result<f64> {
        let p = &self.params;
        let xn = norm(x);
        if xn > self.radius {
            return Err(Error::OutsideLocalRadius {
                radius: self.radius,
                norm: xn,
            });
        }
        let stride = p.n + 1;
        let mut xs = vec![0.0; p.universe * stride];
        for k in 1..=p.n {
            let xk = &x[p.block(k)];
            for u in 0..p.universe {
                xs[u * stride + k] = dot(self.codebook.vector(u), xk);
            }
        }
        let dx = |u: usize, k: usize| xs[u * stride + k];
        let total: f64 = self
            .l1
            .iter()
            .zip(&self.pieces)
            .map(|(l, piece)| l.increment(dx) + piece.apply(x, dx))
            .sum();
        Ok(total / self.l1.len() as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codebook::generate_codebook;

    #[test]
    fn origin_sits_on_the_floors() {
        let params = SgdParams::theorem(3, 4, 64).unwrap();
        let cb = generate_codebook(4, 64, 2, 10_000).unwrap();
        let inst = SgdInstance::new(params.clone(), cb.clone()).unwrap();
        let w = vec![0.0; params.d];
        let v = SubsetMask::new(3, 4).unwrap();
        let t = inst.terms(&w, v, Mode::Oracle).unwrap();
        assert!((t.l1 - params.l1_floor() * 2f64.sqrt()).abs() < 1e-16);
        assert_eq!(t.l2, params.delta1);
        assert_eq!(t.l3, 0.0);
        let g = inst.grad_mode(&w, v, Mode::Oracle).unwrap();
        let expect: Vec<f64> = cb
            .vector(FIRST_DIRECTION)
            .iter()
            .map(|x| -x / 27.0)
            .collect();
        assert_eq!(&g[params.block(1)], &expect[..]);
        let enc = &g[params.enc(1, 0)];
        let g0 = v.codepoint();
        assert!((enc[0] + g0[0] / 36.0).abs() < 1e-17 && (enc[1] + g0[1] / 36.0).abs() < 1e-17);
    }

    #[test]
    fn event_state_recursion() {
        let m = |b| SubsetMask::new(b, 4).unwrap();
        let sets = [m(0b1110), m(0b0110), m(0b0100)];
        let st = SgdEventState::new(&sets, 4);
        assert_eq!(st.prefix, vec![m(0b1111), m(0b1110), m(0b0110)]);
        assert_eq!(st.suffix, vec![m(0b0001), m(0b1001), m(0b1011)]);
        assert_eq!(st.j, vec![Some(0), Some(1), Some(1)]);
        let ev = good_event_sgd(&sets, 4);
        assert_eq!(
            ev.failures,
            vec![(2, "lowest prefix member reappears later")]
        );
    }

    #[test]
    fn forcing_respects_the_event() {
        let params = SgdParams::theorem(3, 8, 64).unwrap();
        for seed in 0..50 {
            let ds = force_good_event_sgd(&params, seed).unwrap();
            assert!(good_event_sgd(&ds.masks, 8).holds);
        }
        let small = SgdParams::theorem(3, 2, 64).unwrap();
        assert!(matches!(
            force_good_event_sgd(&small, 0),
            Err(Error::InfeasibleForcing { .. })
        ));
    }

    #[test]
    fn dataset_json_round_trip() {
        let params = SgdParams::theorem(4, 6, 64).unwrap();
        let ds = force_good_event_sgd(&params, 3).unwrap();
        assert_eq!(SgdDataset::from_json(&ds.to_json().unwrap()).unwrap(), ds);
    }
}
