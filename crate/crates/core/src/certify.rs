//! Certified maximization over encoded datasets.
//!
//! Both adversarial losses contain a term of the form
//!
//! ```text
//! max over ψ = (1/n) Σ φ(V_i, b_i)   of   scale · Σ <g(V_i), a_{b_i}> + q[α(V_1, .., V_k)]
//! ```
//!
//! where the blocks `b_i` are either all blocks (SGD) or any `pick` distinct
//! blocks (GD), and `α` is a decoder returning a codebook index. The candidate
//! set is exponential, so this module solves the linear part exactly block by
//! block and then brackets the decoder term: the returned piece has value
//! `lower`, and no piece exceeds `upper`. When every competing piece loses
//! more in the linear part than the decoder term can recover, the bracket
//! collapses to an exact answer. Otherwise the caller learns that the point
//! lies outside what can be certified.

use crate::encoding::{best_codepoint, SubsetMask};
use crate::error::{Error, Result};

/// Blocks whose norm is at most this are treated as unconstrained: any
/// subset may sit there, so the decoder term is free to vary.
pub const FREE_BLOCK_TOL: f64 = 1e-15;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AlphaRule {
    /// Lowest index outside the union (GD).
    Union,
    /// Lowest index inside the intersection (SGD).
    Intersection,
}

impl AlphaRule {
    pub fn apply(self, sets: &[SubsetMask], universe: usize) -> usize {
        match self {
            AlphaRule::Union => crate::encoding::alpha_gd(sets, universe),
            AlphaRule::Intersection => crate::encoding::alpha_sgd(sets, universe),
        }
    }
}

pub struct Problem<'a> {
    pub blocks: &'a [[f64; 2]],
    /// How many distinct blocks a candidate occupies.
    pub pick: usize,
    pub scale: f64,
    pub rule: AlphaRule,
    /// `q[u]` is added when the decoder returns `u`.
    pub penalty: &'a [f64],
    pub universe: usize,
}

#[derive(Clone, Debug)]
pub struct Solution {
    /// Value of the returned piece.
    pub lower: f64,
    /// No piece exceeds this.
    pub upper: f64,
    pub exact: bool,
    /// Occupied blocks and their subsets, sorted by block.
    pub sets: Vec<(usize, SubsetMask)>,
    pub alpha: usize,
    /// Lower bound on how far every other piece sits below the returned one.
    /// Zero when distinct pieces tie.
    pub margin: f64,
}

pub fn solve(p: &Problem<'_>) -> Solution {
    assert!(p.pick >= 1 && p.pick <= p.blocks.len());
    let modulus = 1u64 << p.universe;
    let best: Vec<_> = p
        .blocks
        .iter()
        .map(|&a| best_codepoint(a, modulus))
        .collect();
    let free: Vec<bool> = p
        .blocks
        .iter()
        .map(|a| a[0].hypot(a[1]) <= FREE_BLOCK_TOL)
        .collect();

    // Order blocks by their best value, non-free first on ties, then by index.
    let mut order: Vec<usize> = (0..p.blocks.len()).collect();
    order.sort_by(|&i, &k| {
        let vi = if free[i] { 0.0 } else { best[i].value };
        let vk = if free[k] { 0.0 } else { best[k].value };
        vk.total_cmp(&vi)
            .then(free[i].cmp(&free[k]))
            .then(i.cmp(&k))
    });
    let chosen = &order[..p.pick];
    let mut sel_gap = f64::INFINITY;
    if p.pick < order.len() {
        let (last, next) = (order[p.pick - 1], order[p.pick]);
        if !(free[last] && free[next]) {
            let vl = if free[last] { 0.0 } else { best[last].value };
            let vn = if free[next] { 0.0 } else { best[next].value };
            sel_gap = vl - vn;
        }
    }

    let mut determined = Vec::new();
    let mut free_blocks = Vec::new();
    let mut gap_min = sel_gap;
    for &b in chosen {
        if free[b] {
            free_blocks.push(b);
        } else {
            let v = SubsetMask::new(best[b].index, p.universe).expect("index below modulus");
            determined.push((b, v));
            gap_min = gap_min.min(best[b].gap);
        }
    }
    let det_sets: Vec<SubsetMask> = determined.iter().map(|&(_, v)| v).collect();

    // Decoder values reachable without changing the determined blocks.
    let last = p.universe - 1;
    let reachable: Vec<usize> = if free_blocks.is_empty() {
        vec![p.rule.apply(&det_sets, p.universe)]
    } else {
        let mut r: Vec<usize> = match p.rule {
            AlphaRule::Union => {
                let u = det_sets
                    .iter()
                    .fold(SubsetMask::empty(p.universe), |a, s| a.union(*s));
                u.complement().iter().collect()
            }
            AlphaRule::Intersection => {
                let m = det_sets
                    .iter()
                    .fold(SubsetMask::full(p.universe), |a, s| a.intersection(*s));
                m.iter().collect()
            }
        };
        if !r.contains(&last) {
            r.push(last);
        }
        r
    };
    let alpha = argmax_lowest(reachable.iter().copied(), p.penalty);
    let q_reach = p.penalty[alpha];
    let q_all = p.penalty[argmax_lowest(0..p.universe, p.penalty)];

    let mut sets = determined.clone();
    for (i, &b) in free_blocks.iter().enumerate() {
        sets.push((b, free_set(p.rule, alpha, i, &det_sets, p.universe)));
    }
    sets.sort_by_key(|&(b, _)| b);
    debug_assert_eq!(
        p.rule.apply(
            &sets.iter().map(|&(_, v)| v).collect::<Vec<_>>(),
            p.universe
        ),
        alpha
    );

    let lin: f64 = sets
        .iter()
        .map(|&(b, v)| {
            let g = v.codepoint();
            g[0] * p.blocks[b][0] + g[1] * p.blocks[b][1]
        })
        .sum::<f64>()
        * p.scale;
    let free_slack: f64 = free_blocks
        .iter()
        .map(|&b| p.blocks[b][0].hypot(p.blocks[b][1]))
        .sum::<f64>()
        * p.scale;
    let lower = lin + q_reach;
    let upper = lin + free_slack + q_all;
    let scaled_gap = gap_min * p.scale;
    let exact = q_reach == q_all || scaled_gap > upper - lower;
    let margin = if !free_blocks.is_empty() {
        0.0
    } else if scaled_gap.is_infinite() {
        f64::INFINITY
    } else {
        lower - (upper - scaled_gap)
    };
    Solution {
        lower,
        upper,
        exact,
        sets,
        alpha,
        margin,
    }
}

fn free_set(
    rule: AlphaRule,
    alpha: usize,
    nth: usize,
    det: &[SubsetMask],
    universe: usize,
) -> SubsetMask {
    match rule {
        AlphaRule::Union => {
            if nth > 0 {
                return SubsetMask::empty(universe);
            }
            let covered = det
                .iter()
                .fold(SubsetMask::empty(universe), |a, s| a.union(*s));
            if covered.contains(alpha) {
                // Only reachable as the fallback of a full union.
                SubsetMask::full(universe)
            } else {
                SubsetMask::new((1u64 << alpha) - 1, universe).expect("prefix mask")
            }
        }
        AlphaRule::Intersection => {
            let meet = det
                .iter()
                .fold(SubsetMask::full(universe), |a, s| a.intersection(*s));
            if meet.contains(alpha) {
                SubsetMask::empty(universe).with(alpha)
            } else {
                SubsetMask::empty(universe)
            }
        }
    }
}

fn argmax_lowest(candidates: impl Iterator<Item = usize>, q: &[f64]) -> usize {
    let mut best: Option<usize> = None;
    for c in candidates {
        match best {
            Some(b) if q[c] < q[b] || (q[c] == q[b] && c > b) => {}
            _ => best = Some(c),
        }
    }
    best.expect("non-empty candidate set")
}

/// Number of candidates an exhaustive search visits.
pub fn candidate_count(blocks: usize, pick: usize, universe: usize) -> u128 {
    let mut choose: u128 = 1;
    for i in 0..pick as u128 {
        choose = choose * (blocks as u128 - i) / (i + 1);
    }
    choose.saturating_mul((1u128 << universe).saturating_pow(pick as u32))
}

/// Exhaustive maximization; ties keep the first candidate in enumeration
/// order (block combinations lexicographic, then subsets by integer value).
pub fn enumerate(p: &Problem<'_>, budget: u128) -> Result<Solution> {
    let count = candidate_count(p.blocks.len(), p.pick, p.universe);
    if count > budget {
        return Err(Error::ReferenceTooLarge { count, budget });
    }
    let modulus = 1u64 << p.universe;
    let mut best: Option<(f64, Vec<(usize, SubsetMask)>, usize)> = None;
    let mut combo: Vec<usize> = (0..p.pick).collect();
    loop {
        let mut masks = vec![0u64; p.pick];
        loop {
            let sets: Vec<SubsetMask> = masks
                .iter()
                .map(|&m| SubsetMask::new(m, p.universe).expect("mask"))
                .collect();
            let lin: f64 = combo
                .iter()
                .zip(&sets)
                .map(|(&b, v)| {
                    let g = v.codepoint();
                    g[0] * p.blocks[b][0] + g[1] * p.blocks[b][1]
                })
                .sum::<f64>()
                * p.scale;
            let alpha = p.rule.apply(&sets, p.universe);
            let value = lin + p.penalty[alpha];
            if best.as_ref().is_none_or(|(v, _, _)| value > *v) {
                best = Some((value, combo.iter().copied().zip(sets).collect(), alpha));
            }
            if !advance_masks(&mut masks, modulus) {
                break;
            }
        }
        if !advance_combo(&mut combo, p.blocks.len()) {
            break;
        }
    }
    let (value, sets, alpha) = best.expect("at least one candidate");
    Ok(Solution {
        lower: value,
        upper: value,
        exact: true,
        sets,
        alpha,
        margin: 0.0,
    })
}

fn advance_masks(masks: &mut [u64], modulus: u64) -> bool {
    for m in masks.iter_mut().rev() {
        *m += 1;
        if *m < modulus {
            return true;
        }
        *m = 0;
    }
    false
}

fn advance_combo(combo: &mut [usize], n: usize) -> bool {
    let k = combo.len();
    for i in (0..k).rev() {
        if combo[i] < n - k + i {
            combo[i] += 1;
            for j in i + 1..k {
                combo[j] = combo[j - 1] + 1;
            }
            return true;
        }
    }
    false
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_problem(rng: &mut ChaCha8Rng, blocks: usize) -> (Vec<[f64; 2]>, Vec<f64>) {
        let b = (0..blocks)
            .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
            .collect();
        let q = (0..3).map(|_| rng.random_range(-0.01..0.01)).collect();
        (b, q)
    }

    #[test]
    fn certified_answers_match_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut certified = 0;
        for trial in 0..400 {
            let (rule, nblocks, pick) = if trial % 2 == 0 {
                (AlphaRule::Union, 4, 2)
            } else {
                (AlphaRule::Intersection, 3, 3)
            };
            let (blocks, q) = random_problem(&mut rng, nblocks);
            let p = Problem {
                blocks: &blocks,
                pick,
                scale: 0.5,
                rule,
                penalty: &q,
                universe: 3,
            };
            let fast = solve(&p);
            let slow = enumerate(&p, 1 << 20).unwrap();
            assert!(fast.lower <= slow.lower + 1e-15);
            assert!(fast.upper >= slow.lower - 1e-15);
            if fast.exact {
                certified += 1;
                assert!((fast.lower - slow.lower).abs() < 1e-14, "trial {trial}");
            }
        }
        assert!(certified > 300);
    }

    #[test]
    fn zero_blocks_leave_the_decoder_free() {
        let blocks = [[0.0, 0.0]; 4];
        let q = [0.0, -1.0, 3.0];
        for rule in [AlphaRule::Union, AlphaRule::Intersection] {
            let p = Problem {
                blocks: &blocks,
                pick: 2,
                scale: 1.0,
                rule,
                penalty: &q,
                universe: 3,
            };
            let s = solve(&p);
            assert!(s.exact);
            assert_eq!(s.alpha, 2);
            assert_eq!(s.lower, 3.0);
            assert_eq!(enumerate(&p, 1 << 20).unwrap().lower, 3.0);
        }
    }

    #[test]
    fn budget_is_enforced() {
        let blocks = [[1.0, 0.0]; 16];
        let p = Problem {
            blocks: &blocks,
            pick: 4,
            scale: 1.0,
            rule: AlphaRule::Union,
            penalty: &[0.0; 16],
            universe: 16,
        };
        assert!(matches!(
            enumerate(&p, 100_000),
            Err(Error::ReferenceTooLarge { .. })
        ));
    }
}
