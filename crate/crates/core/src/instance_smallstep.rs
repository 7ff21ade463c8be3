//! A deterministic loss on which short runs with small steps stay far from
//! the minimum:
//!
//! ```text
//! f(w) = max(0, max_i 1/√d - w[i] - η i/(4d)),   i = 1..d,   d = max(⌈25η²T²⌉, 1)
//! ```
//!
//! Starting from the origin, each gradient step raises the currently
//! largest term's coordinate by `η`, cycling through the coordinates. After
//! `T` steps no coordinate has moved past `1/(2√d)`, so `f` stays at least
//! `min(1/4, 1/(20ηT))`.
//!
//! ```
//! use sco_adversary::instance_smallstep::SmallStepParams;
//!
//! let p = SmallStepParams::new(0.02, 100).unwrap();
//! assert_eq!(p.d, 100);
//! assert!(p.loss(&vec![0.0; 100]) > 0.09);
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objective::{Expansion, Objective, Surface};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmallStepParams {
    pub eta: f64,
    #[serde(rename = "T")]
    pub t: usize,
    pub d: usize,
    pub smooth_delta: f64,
}

/// `max(⌈x⌉, 1)`, except that values within a relative `1e-9` of an integer
/// are rounded to it so that representation error in `25η²T²` cannot add a
/// dimension.
pub fn dimension_for(eta: f64, t: usize) -> usize {
    let x = 25.0 * eta * eta * (t as f64) * (t as f64);
    let r = x.round();
    let d = if (x - r).abs() <= 1e-9 * r.max(1.0) {
        r
    } else {
        x.ceil()
    };
    (d as usize).max(1)
}

impl SmallStepParams {
    pub fn new(eta: f64, t: usize) -> Result<Self> {
        if !(eta > 0.0) || t == 0 {
            return Err(Error::InvalidParams(format!(
                "need eta > 0 and T >= 1 (got eta={eta}, T={t})"
            )));
        }
        let d = dimension_for(eta, t);
        Ok(Self {
            eta,
            t,
            d,
            smooth_delta: eta / (16.0 * d as f64),
        })
    }

    /// The `i`-th term (0-based `i`, so the offset uses `i + 1`).
    pub fn term(&self, w: &[f64], i: usize) -> f64 {
        let d = self.d as f64;
        1.0 / d.sqrt() - w[i] - self.eta * (i + 1) as f64 / (4.0 * d)
    }

    /// Lowest-index argmax of the terms and its value.
    pub fn argmax(&self, w: &[f64]) -> (usize, f64) {
        let mut best = (0, self.term(w, 0));
        for i in 1..self.d {
            let v = self.term(w, i);
            if v > best.1 {
                best = (i, v);
            }
        }
        best
    }

    pub fn loss(&self, w: &[f64]) -> f64 {
        self.argmax(w).1.max(0.0)
    }

    /// `-e_j` for the lowest argmax `j` when the maximum is positive.
    pub fn grad(&self, w: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.d];
        let (j, v) = self.argmax(w);
        if v > 0.0 {
            g[j] = -1.0;
        }
        g
    }

    /// Gap between the two largest terms and between the largest and `0`.
    pub fn margins(&self, w: &[f64]) -> (f64, f64) {
        let (j, best) = self.argmax(w);
        let second = (0..self.d)
            .filter(|&i| i != j)
            .map(|i| self.term(w, i))
            .fold(f64::NEG_INFINITY, f64::max);
        (best - second, best)
    }

    /// The lower bound `min(1/4, 1/(20ηT))` on the loss of every iterate
    /// and suffix average.
    pub fn bound(&self) -> f64 {
        (0.25f64).min(1.0 / (20.0 * self.eta * self.t as f64))
    }
}

impl Objective for SmallStepParams {
    type Sample = ();

    fn dim(&self) -> usize {
        self.d
    }

    fn loss(&self, w: &[f64], _: &()) -> Result<f64> {
        Ok(SmallStepParams::loss(self, w))
    }

    fn grad(&self, w: &[f64], _: &()) -> Result<Vec<f64>> {
        Ok(SmallStepParams::grad(self, w))
    }
}

impl Surface for SmallStepParams {
    fn dim(&self) -> usize {
        self.d
    }

    fn value(&self, w: &[f64]) -> Result<f64> {
        Ok(self.loss(w))
    }

    fn expand<'a>(&'a self, w: &'a [f64]) -> Result<Box<dyn Expansion + 'a>> {
        let base = self.loss(w);
        let gaps = (0..self.d).map(|i| self.term(w, i) - base).collect();
        Ok(Box::new(SmallStepExpansion { base, gaps }))
    }
}

/// `f(w + x) - f(w) = max(-f(w), max_i gap_i - x[i])`, exact for every `x`.
struct SmallStepExpansion {
    base: f64,
    gaps: Vec<f64>,
}

impl Expansion for SmallStepExpansion {
    fn base(&self) -> f64 {
        self.base
    }

    fn increment(&self, x: &[f64]) -> Result<f64> {
        Ok(self
            .gaps
            .iter()
            .zip(x)
            .map(|(g, xi)| g - xi)
            .fold(-self.base, f64::max))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dimension_absorbs_rounding() {
        assert!(25.0 * 0.07f64 * 0.07 * 100.0 * 100.0 > 1225.0);
        assert_eq!(dimension_for(0.07, 100), 1225);
        assert_eq!(dimension_for(0.02, 100), 100);
        assert_eq!(dimension_for(0.021, 100), 111);
        assert_eq!(dimension_for(0.001, 10), 1);
    }

    #[test]
    fn single_coordinate_value() {
        let p = SmallStepParams {
            eta: 0.1,
            t: 1,
            d: 1,
            smooth_delta: 0.1 / 16.0,
        };
        assert!((p.loss(&[0.0]) - 0.975).abs() < 1e-15);
        assert_eq!(p.grad(&[0.0]), vec![-1.0]);
    }

    #[test]
    fn flat_region_has_zero_gradient() {
        let p = SmallStepParams::new(0.02, 100).unwrap();
        let w = vec![2.0 / 10.0; 100];
        assert_eq!(p.loss(&w), 0.0);
        assert!(p.grad(&w).iter().all(|&g| g == 0.0));
    }

    #[test]
    fn first_argmax_and_margin() {
        let p = SmallStepParams::new(0.02, 100).unwrap();
        let w = vec![0.0; 100];
        assert_eq!(p.argmax(&w).0, 0);
        let (gap, _) = p.margins(&w);
        assert!((gap - 0.02 / 400.0).abs() < 1e-17);
    }
}
