//! Circle-code encoding of training sets.
//!
//! Every subset `V` of an `N`-vector codebook is identified with the integer
//! whose bits mark its members. That integer `i` is also a position on a
//! circle of `M = 2^N` equally spaced points, `g(i) = (sin 2πi/M, cos 2πi/M)`.
//! An encoded sample writes `g(V)` into one 2-dimensional block of an
//! encoding subspace; distinct codepoints have inner product at most
//! `cos(2π/M)`, which is what makes the encoded dataset the unique maximizer
//! of `<ψ, ψ*>`.
//!
//! Indices here are 0-based throughout: codebook vector `0` is the first
//! element of the enumeration and GD slots run over `0..n²`.
//!
//! ```
//! use sco_adversary::encoding::{decode_blocks, encode_gd, SubsetMask};
//!
//! let v = SubsetMask::from_indices([1, 3], 4).unwrap();
//! let (n, eta) = (2, 0.1);
//! let mut w0 = encode_gd(v, 2, n);
//! w0.iter_mut().for_each(|x| *x *= eta / n as f64);
//! let decoded = decode_blocks(&w0, 4, eta / n as f64, eta / (2.0 * n as f64)).unwrap();
//! assert_eq!(decoded, vec![(2, v)]);
//! ```

use std::f64::consts::PI;
use std::fmt;

use crate::error::{Error, Result};

/// Universes above this size are refused outright.
pub const MAX_UNIVERSE: usize = 40;
/// Universes above this size trigger a precision warning.
pub const WARN_UNIVERSE: usize = 16;

/// Validates a universe size, warning when the circle margin gets close to
/// double-precision resolution.
pub fn check_universe(n_vectors: usize) -> Result<()> {
    if n_vectors == 0 {
        return Err(Error::InvalidParams(
            "universe must contain at least one vector".into(),
        ));
    }
    if n_vectors > MAX_UNIVERSE {
        return Err(Error::UniverseTooLarge(n_vectors));
    }
    if n_vectors > WARN_UNIVERSE {
        log::warn!(
            "universe of {n_vectors} vectors: circle margins approach double precision; \
             unique-argmax checks may lose meaning"
        );
    }
    Ok(())
}

/// A subset of `{0, .., N-1}` stored as a bitmask. The integer value of the
/// mask doubles as the subset's position on the circle code.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct SubsetMask {
    bits: u64,
    universe: u8,
}

impl SubsetMask {
    pub fn new(bits: u64, universe: usize) -> Result<Self> {
        if universe == 0 || universe > MAX_UNIVERSE {
            return Err(Error::UniverseTooLarge(universe));
        }
        if bits >> universe != 0 {
            return Err(Error::OutOfRange(format!(
                "mask {bits:#x} for a universe of {universe}"
            )));
        }
        Ok(Self {
            bits,
            universe: universe as u8,
        })
    }

    pub fn empty(universe: usize) -> Self {
        Self::new(0, universe).expect("valid universe")
    }

    pub fn full(universe: usize) -> Self {
        Self::new(full_bits(universe), universe).expect("valid universe")
    }

    pub fn from_indices(indices: impl IntoIterator<Item = usize>, universe: usize) -> Result<Self> {
        let mut bits = 0u64;
        for i in indices {
            if i >= universe {
                return Err(Error::OutOfRange(format!(
                    "index {i} in a universe of {universe}"
                )));
            }
            bits |= 1 << i;
        }
        Self::new(bits, universe)
    }

    pub fn bits(self) -> u64 {
        self.bits
    }

    pub fn universe(self) -> usize {
        usize::from(self.universe)
    }

    /// Number of codepoints on the circle, `2^N`.
    pub fn modulus(self) -> u64 {
        1 << self.universe
    }

    pub fn contains(self, i: usize) -> bool {
        i < self.universe() && self.bits >> i & 1 == 1
    }

    pub fn with(self, i: usize) -> Self {
        debug_assert!(i < self.universe());
        Self {
            bits: self.bits | 1 << i,
            ..self
        }
    }

    pub fn without(self, i: usize) -> Self {
        Self {
            bits: self.bits & !(1 << i),
            ..self
        }
    }

    pub fn union(self, other: Self) -> Self {
        Self {
            bits: self.bits | other.bits,
            ..self
        }
    }

    pub fn intersection(self, other: Self) -> Self {
        Self {
            bits: self.bits & other.bits,
            ..self
        }
    }

    pub fn complement(self) -> Self {
        Self {
            bits: !self.bits & full_bits(self.universe()),
            ..self
        }
    }

    pub fn len(self) -> usize {
        self.bits.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.bits == 0
    }

    pub fn is_full(self) -> bool {
        self.bits == full_bits(self.universe())
    }

    /// Smallest member, if any.
    pub fn min_index(self) -> Option<usize> {
        (self.bits != 0).then(|| self.bits.trailing_zeros() as usize)
    }

    pub fn iter(self) -> impl Iterator<Item = usize> {
        (0..self.universe()).filter(move |&i| self.contains(i))
    }

    /// The subset's codepoint `g(V)`.
    pub fn codepoint(self) -> [f64; 2] {
        circle_point(self.bits, self.modulus())
    }
}

impl fmt::Debug for SubsetMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{")?;
        for (k, i) in self.iter().enumerate() {
            if k > 0 {
                write!(f, ",")?;
            }
            write!(f, "{i}")?;
        }
        write!(f, "}}/{}", self.universe)
    }
}

fn full_bits(universe: usize) -> u64 {
    if universe >= 64 {
        u64::MAX
    } else {
        (1u64 << universe) - 1
    }
}

/// `(sin 2πi/M, cos 2πi/M)`.
pub fn circle_point(i: u64, modulus: u64) -> [f64; 2] {
    debug_assert!(i < modulus);
    // i/M is exact for power-of-two moduli up to 2^52.
    let theta = 2.0 * PI * (i as f64 / modulus as f64);
    let (s, c) = theta.sin_cos();
    [s, c]
}

/// Decode margin `(1 - cos(2π/M)) / n²`, computed as `2 sin²(π/M) / n²` to
/// avoid cancellation when `M` is large.
pub fn margin_eps(n: usize, modulus: u64) -> f64 {
    let s = (PI / modulus as f64).sin();
    2.0 * s * s / (n * n) as f64
}

/// `φ(V, j)` for GD: `n²` blocks of 2, block `slot` holds `g(V)`.
pub fn encode_gd(v: SubsetMask, slot: usize, n: usize) -> Vec<f64> {
    encode_block(v, slot, n * n)
}

/// `φ(V, t)` for SGD: `n` blocks of 2, block `position` holds `g(V)`.
pub fn encode_sgd(v: SubsetMask, position: usize, n: usize) -> Vec<f64> {
    encode_block(v, position, n)
}

fn encode_block(v: SubsetMask, block: usize, blocks: usize) -> Vec<f64> {
    assert!(block < blocks, "block {block} out of {blocks}");
    let mut out = vec![0.0; 2 * blocks];
    out[2 * block..2 * block + 2].copy_from_slice(&v.codepoint());
    out
}

/// Codepoint index nearest to the direction of a 2-vector, via
/// `θ = atan2(x, y)` to match the `(sin, cos)` layout.
pub fn nearest_index(block: [f64; 2], modulus: u64) -> u64 {
    let theta = block[0].atan2(block[1]);
    let pos = (modulus as f64 * theta / (2.0 * PI)).round() as i64;
    pos.rem_euclid(modulus as i64) as u64
}

/// Recovers `(block, subset)` pairs from an encoding subspace whose occupied
/// blocks each hold one scaled codepoint of norm `magnitude`. Blocks with
/// norm at most `threshold` are treated as empty.
pub fn decode_blocks(
    w0: &[f64],
    universe: usize,
    magnitude: f64,
    threshold: f64,
) -> Result<Vec<(usize, SubsetMask)>> {
    if !(threshold > 0.0) {
        return Err(Error::InvalidParams(
            "occupancy threshold must be positive".into(),
        ));
    }
    let modulus = 1u64 << universe;
    let mut out = Vec::new();
    for (slot, b) in w0.chunks_exact(2).enumerate() {
        let norm = b[0].hypot(b[1]);
        if norm <= threshold {
            continue;
        }
        if (norm - magnitude).abs() > 0.5 * magnitude {
            return Err(Error::AmbiguousBlock {
                slot,
                norm,
                expected: magnitude,
            });
        }
        out.push((
            slot,
            SubsetMask::new(nearest_index([b[0], b[1]], modulus), universe)?,
        ));
    }
    Ok(out)
}

/// Lowest index outside the union of `sets`; the last index `N-1` when the
/// union covers everything.
pub fn alpha_gd(sets: &[SubsetMask], universe: usize) -> usize {
    let union = sets
        .iter()
        .fold(SubsetMask::empty(universe), |acc, s| acc.union(*s));
    union.complement().min_index().unwrap_or(universe - 1)
}

/// Lowest index inside the intersection of `sets`; the last index `N-1` when
/// the intersection is empty.
pub fn alpha_sgd(sets: &[SubsetMask], universe: usize) -> usize {
    let meet = sets
        .iter()
        .fold(SubsetMask::full(universe), |acc, s| acc.intersection(*s));
    meet.min_index().unwrap_or(universe - 1)
}

/// Best codepoint for a single block `a`: the maximizer of `<g(i), a>`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlockBest {
    pub index: u64,
    /// `<g(index), a>`.
    pub value: f64,
    /// Value of the best codepoint minus that of the runner-up; zero on ties.
    pub gap: f64,
}

/// Maximizes `<g(i), a>` over all `M` codepoints analytically.
///
/// The gap is computed as `2|a| sin(π/M) sin(π/M - d)` with `d` the angular
/// distance to the nearest codepoint, which stays accurate when the gap is
/// far below the block's magnitude.
pub fn best_codepoint(a: [f64; 2], modulus: u64) -> BlockBest {
    let r = a[0].hypot(a[1]);
    if r == 0.0 {
        return BlockBest {
            index: 0,
            value: 0.0,
            gap: 0.0,
        };
    }
    let m = modulus as f64;
    let theta = a[0].atan2(a[1]);
    let pos = m * theta / (2.0 * PI);
    let nearest = pos.round();
    let index = (nearest as i64).rem_euclid(modulus as i64) as u64;
    let frac = (pos - nearest).abs().min(0.5);
    let step = PI / m;
    let gap = 2.0 * r * step.sin() * (step * (1.0 - 2.0 * frac)).sin();
    let g = circle_point(index, modulus);
    BlockBest {
        index,
        value: g[0] * a[0] + g[1] * a[1],
        gap,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: [f64; 2], b: [f64; 2]) -> bool {
        (a[0] - b[0]).abs() < 1e-15 && (a[1] - b[1]).abs() < 1e-15
    }

    #[test]
    fn circle_points() {
        assert!(close(circle_point(0, 8), [0.0, 1.0]));
        assert!(close(circle_point(2, 8), [1.0, 0.0]));
        let (p, q) = (circle_point(1, 4), circle_point(3, 4));
        assert!((p[0] * q[0] + p[1] * q[1] + 1.0).abs() < 1e-15);
    }

    #[test]
    fn margins() {
        assert!((margin_eps(1, 2) - 2.0).abs() < 1e-15);
        assert!((margin_eps(1, 4) - 1.0).abs() < 1e-15);
        // 1 - cos(2π/256), frozen from a high-precision evaluation.
        let reference = 3.011_813_037_957_799e-4 / 16.0;
        assert!((margin_eps(4, 256) - reference).abs() / reference < 1e-14);
    }

    #[test]
    fn empty_set_sits_at_the_top_of_the_circle() {
        let phi = encode_gd(SubsetMask::empty(3), 0, 2);
        assert_eq!(phi.len(), 8);
        assert_eq!(&phi[..2], &[0.0, 1.0]);
        assert!(phi[2..].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn encodings_are_unit_and_slots_are_orthogonal() {
        let v = SubsetMask::new(5, 3).unwrap();
        let a = encode_sgd(v, 0, 3);
        let b = encode_sgd(v, 1, 3);
        assert!((crate::vecops::norm(&a) - 1.0).abs() < 1e-15);
        assert_eq!(crate::vecops::dot(&a, &b), 0.0);
    }

    #[test]
    fn collision_is_ambiguous() {
        let (n, eta) = (2usize, 0.1);
        let scale = eta / n as f64;
        let mut w0 = encode_gd(SubsetMask::new(1, 4).unwrap(), 1, n);
        crate::vecops::axpy(
            1.0,
            &encode_gd(SubsetMask::new(2, 4).unwrap(), 1, n),
            &mut w0,
        );
        crate::vecops::scale(scale, &mut w0);
        let err = decode_blocks(&w0, 4, scale, scale / 2.0).unwrap_err();
        assert!(matches!(err, Error::AmbiguousBlock { slot: 1, .. }));
    }

    #[test]
    fn alpha_rules() {
        let n = 4;
        assert_eq!(alpha_gd(&[SubsetMask::empty(n)], n), 0);
        assert_eq!(alpha_gd(&[SubsetMask::from_indices([0], n).unwrap()], n), 1);
        assert_eq!(
            alpha_gd(
                &[
                    SubsetMask::from_indices([0, 1], n).unwrap(),
                    SubsetMask::from_indices([2, 3], n).unwrap()
                ],
                n
            ),
            3
        );
        assert_eq!(alpha_sgd(&[SubsetMask::full(n)], n), 0);
        let s = [
            SubsetMask::from_indices([1, 2], n).unwrap(),
            SubsetMask::from_indices([2], n).unwrap(),
        ];
        assert_eq!(alpha_sgd(&s, n), 2);
        let d = [
            SubsetMask::from_indices([0], n).unwrap(),
            SubsetMask::from_indices([1], n).unwrap(),
        ];
        assert_eq!(alpha_sgd(&d, n), 3);
    }

    #[test]
    fn best_codepoint_matches_enumeration() {
        let m = 16u64;
        for &(x, y) in &[(0.3, -0.7), (-1.0, 0.0), (0.01, 0.9), (-0.2, -0.2)] {
            let best = best_codepoint([x, y], m);
            let mut vals: Vec<f64> = (0..m)
                .map(|i| {
                    let g = circle_point(i, m);
                    g[0] * x + g[1] * y
                })
                .collect();
            let top = vals.iter().cloned().fold(f64::MIN, f64::max);
            assert!((best.value - top).abs() < 1e-15);
            vals.sort_by(|a, b| b.partial_cmp(a).unwrap());
            assert!((best.gap - (vals[0] - vals[1])).abs() < 1e-14);
        }
    }
}
