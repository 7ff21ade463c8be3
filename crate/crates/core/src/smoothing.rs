//! Monte-Carlo estimates of ball-smoothed losses
//! `f̃(w) = E_{v ~ unit ball} f(w + δv)` and of their gradients
//! `∇f̃(w) = (d/δ) E_{a ~ unit sphere} f(w + δa) a`.
//!
//! The theorem-scale `δ` is many orders of magnitude below the loss values,
//! so `f(w + δa) - f(w)` cannot be formed by subtracting two rounded
//! evaluations. The estimators work with the increment of a
//! [`Surface::expand`] expansion instead, which the instance families
//! compute from the gaps between their linear pieces.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::objective::{Expansion, Surface};
use crate::stats::Moments;
use crate::vecops::{dot, norm, scale};

/// Draws per chunk; chunk `c` uses stream `c` of the configured seed.
pub const CHUNK: usize = 1024;

const MAX_RETRIES: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SmoothingConfig {
    pub delta: f64,
    /// Number of random directions.
    pub samples: usize,
    pub seed: u64,
    /// Evaluate each direction together with its negation.
    pub antithetic: bool,
}

/// Uniform point on the unit sphere, from a normalized Gaussian vector.
pub fn sphere_sample<R: Rng>(dim: usize, rng: &mut R) -> Result<Vec<f64>> {
    if dim == 0 {
        return Err(Error::InvalidParams("sphere of dimension 0".into()));
    }
    for _ in 0..MAX_RETRIES {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let r = norm(&v);
        if r.is_finite() && r > f64::MIN_POSITIVE {
            v.iter_mut().for_each(|x| *x /= r);
            return Ok(v);
        }
    }
    Err(Error::DegenerateDraw(MAX_RETRIES))
}

/// Uniform point in the unit ball: a sphere point scaled by `U^{1/dim}`.
pub fn ball_sample<R: Rng>(dim: usize, rng: &mut R) -> Result<Vec<f64>> {
    let mut v = sphere_sample(dim, rng)?;
    let r = rng.random::<f64>().powf(1.0 / dim as f64);
    scale(r, &mut v);
    Ok(v)
}

#[derive(Clone, Debug, Serialize)]
pub struct SmoothedValue {
    pub estimate: f64,
    pub stderr: f64,
    /// `f(w)` itself.
    pub exact: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct SmoothedGrad {
    pub estimate: Vec<f64>,
    pub stderr: Vec<f64>,
}

fn check_config(cfg: &SmoothingConfig) -> Result<()> {
    if !(cfg.delta > 0.0) || cfg.samples < 2 {
        return Err(Error::InvalidParams(format!(
            "smoothing needs delta > 0 and at least 2 samples (got delta={}, samples={})",
            cfg.delta, cfg.samples
        )));
    }
    Ok(())
}

/// Chunked, order-merged moments of a vector-valued statistic of random
/// directions.
fn directional_moments(
    cfg: &SmoothingConfig,
    width: usize,
    stat: impl Fn(&mut ChaCha8Rng, &mut [f64]) -> Result<()> + Sync,
) -> Result<Vec<Moments>> {
    let chunks = cfg.samples.div_ceil(CHUNK);
    let parts: Vec<Vec<Moments>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = crate::rng::stream(cfg.seed, c as u64);
            let mut acc = vec![Moments::default(); width];
            let mut buf = vec![0.0; width];
            for _ in 0..CHUNK.min(cfg.samples - c * CHUNK) {
                stat(&mut rng, &mut buf)?;
                for (m, &x) in acc.iter_mut().zip(&buf) {
                    m.push(x);
                }
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    let mut acc = vec![Moments::default(); width];
    for part in &parts {
        for (a, p) in acc.iter_mut().zip(part) {
            a.merge(p);
        }
    }
    Ok(acc)
}

fn increment_at(exp: &dyn Expansion, dir: &[f64], delta: f64) -> Result<f64> {
    let x: Vec<f64> = dir.iter().map(|v| delta * v).collect();
    exp.increment(&x)
}

/// `f(w) + mean(f(w + δv) - f(w))` over ball samples `v`.
pub fn smoothed_value<S: Surface + ?Sized>(
    surface: &S,
    w: &[f64],
    cfg: &SmoothingConfig,
) -> Result<SmoothedValue> {
    check_config(cfg)?;
    let exp = surface.expand(w)?;
    let dim = surface.dim();
    let m = directional_moments(cfg, 1, |rng, out| {
        let v = ball_sample(dim, rng)?;
        let up = increment_at(exp.as_ref(), &v, cfg.delta)?;
        out[0] = if cfg.antithetic {
            0.5 * (up + increment_at(exp.as_ref(), &v, -cfg.delta)?)
        } else {
            up
        };
        Ok(())
    })?;
    let (mean, stderr) = m[0].mean_stderr();
    Ok(SmoothedValue {
        estimate: exp.base() + mean,
        stderr,
        exact: exp.base(),
    })
}

/// `(d/δ) mean(Δ(δa) a)` over sphere samples `a`, or the antithetic form
/// `(d/2δ) mean((Δ(δa) - Δ(-δa)) a)`.
pub fn smoothed_grad<S: Surface + ?Sized>(
    surface: &S,
    w: &[f64],
    cfg: &SmoothingConfig,
) -> Result<SmoothedGrad> {
    check_config(cfg)?;
    let exp = surface.expand(w)?;
    let dim = surface.dim();
    let factor = dim as f64 / cfg.delta;
    let m = directional_moments(cfg, dim, |rng, out| {
        let a = sphere_sample(dim, rng)?;
        let up = increment_at(exp.as_ref(), &a, cfg.delta)?;
        let c = if cfg.antithetic {
            0.5 * factor * (up - increment_at(exp.as_ref(), &a, -cfg.delta)?)
        } else {
            factor * up
        };
        for (o, ai) in out.iter_mut().zip(&a) {
            *o = c * ai;
        }
        Ok(())
    })?;
    let (estimate, stderr) = m.iter().map(Moments::mean_stderr).unzip();
    Ok(SmoothedGrad { estimate, stderr })
}

/// Two-sided critical value that keeps the family-wise false-alarm rate of
/// `dim` simultaneous componentwise tests at that of a single `3σ` test,
/// and never below `3`.
pub fn bonferroni_z(dim: usize) -> f64 {
    let alpha = 2.0 * (1.0 - Normal::standard().cdf(3.0));
    let z = Normal::standard().inverse_cdf(1.0 - alpha / (2.0 * dim.max(1) as f64));
    z.max(3.0)
}

#[derive(Clone, Debug, Serialize)]
pub struct GradientComparison {
    pub t: usize,
    pub max_abs_discrepancy: f64,
    /// Largest `|estimate - exact| / stderr` over components.
    pub max_z: f64,
    pub z_crit: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct PreservationReport {
    pub delta: f64,
    pub samples: usize,
    pub rows: Vec<GradientComparison>,
    pub pass: bool,
}

/// Compares a smoothed gradient with an exact one componentwise.
/// Components whose estimate has zero spread must match to `1e-12`.
pub fn compare_gradient(t: usize, est: &SmoothedGrad, exact: &[f64]) -> GradientComparison {
    let z_crit = bonferroni_z(exact.len());
    let (mut max_abs, mut max_z, mut ok) = (0.0f64, 0.0f64, true);
    for ((e, s), x) in est.estimate.iter().zip(&est.stderr).zip(exact) {
        let diff = (e - x).abs();
        max_abs = max_abs.max(diff);
        if *s > 0.0 {
            max_z = max_z.max(diff / s);
            ok &= diff <= z_crit * s;
        } else {
            ok &= diff <= 1e-12;
        }
    }
    GradientComparison {
        t,
        max_abs_discrepancy: max_abs,
        max_z,
        z_crit,
        pass: ok,
    }
}

/// At each `(t, w_t)` compares the exact subgradient with the smoothed
/// gradient. Agreement at every point is numerical evidence that replacing
/// the loss by its smoothing does not change the trajectory.
pub fn verify_trajectory_preservation<S: Surface + ?Sized>(
    surface: &S,
    points: &[(usize, Vec<f64>)],
    exact_grad: impl Fn(&[f64]) -> Result<Vec<f64>>,
    cfg: &SmoothingConfig,
) -> Result<PreservationReport> {
    let mut rows = Vec::with_capacity(points.len());
    for (i, (t, w)) in points.iter().enumerate() {
        let cfg_i = SmoothingConfig {
            seed: crate::rng::derive_seed(cfg.seed, i as u64),
            ..*cfg
        };
        let est = smoothed_grad(surface, w, &cfg_i).map_err(|e| e.at_step(*t))?;
        rows.push(compare_gradient(*t, &est, &exact_grad(w)?));
    }
    let pass = rows.iter().all(|r| r.pass);
    Ok(PreservationReport {
        delta: cfg.delta,
        samples: cfg.samples,
        rows,
        pass,
    })
}

/// `⟨g, w⟩ + c` as a surface; its increments are exact for every `x`.
pub struct Linear {
    pub g: Vec<f64>,
    pub c: f64,
}

impl Surface for Linear {
    fn dim(&self) -> usize {
        self.g.len()
    }

    fn value(&self, w: &[f64]) -> Result<f64> {
        Ok(dot(&self.g, w) + self.c)
    }

    fn expand<'a>(&'a self, w: &'a [f64]) -> Result<Box<dyn Expansion + 'a>> {
        Ok(Box::new(LinearExpansion {
            base: self.value(w)?,
            g: &self.g,
        }))
    }
}

struct LinearExpansion<'a> {
    base: f64,
    g: &'a [f64],
}

impl Expansion for LinearExpansion<'_> {
    fn base(&self) -> f64 {
        self.base
    }

    fn increment(&self, x: &[f64]) -> Result<f64> {
        Ok(dot(self.g, x))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instance_smallstep::SmallStepParams;
    use crate::objective::FnSurface;

    fn cfg(delta: f64, samples: usize, antithetic: bool) -> SmoothingConfig {
        SmoothingConfig {
            delta,
            samples,
            seed: 17,
            antithetic,
        }
    }

    #[test]
    fn one_dimensional_sphere_is_plus_minus_one() {
        let mut rng = crate::rng::seeded(3);
        for _ in 0..20 {
            assert_eq!(sphere_sample(1, &mut rng).unwrap()[0].abs(), 1.0);
        }
    }

    #[test]
    fn constant_surface_is_exact() {
        let s = FnSurface {
            dim: 4,
            f: |_: &[f64]| 2.5,
        };
        let v = smoothed_value(&s, &[0.0; 4], &cfg(0.1, 500, false)).unwrap();
        assert_eq!((v.estimate, v.stderr), (2.5, 0.0));
    }

    #[test]
    fn antithetic_gradient_of_linear_is_exact() {
        let s = Linear {
            g: vec![0.3, -1.0, 2.0],
            c: 1.0,
        };
        let est = smoothed_grad(&s, &[0.1, 0.2, 0.3], &cfg(0.01, 4096, true)).unwrap();
        // Each antithetic pair returns d<g,a>a, which averages to g; the
        // stderr shrinks as the sample grows.
        for (e, (g, s)) in est.estimate.iter().zip(s.g.iter().zip(&est.stderr)) {
            assert!((e - g).abs() <= 4.0 * s);
        }
        let v = smoothed_value(&s, &[0.1, 0.2, 0.3], &cfg(0.01, 64, true)).unwrap();
        assert!((v.estimate - v.exact).abs() <= 1e-10);
    }

    #[test]
    fn smallstep_gradient_is_preserved_at_theorem_delta() {
        let p = SmallStepParams::new(0.02, 100).unwrap();
        let w = vec![0.0; p.d];
        let c = cfg(p.smooth_delta, 20_000, false);
        let est = smoothed_grad(&p, &w, &c).unwrap();
        assert!(compare_gradient(1, &est, &p.grad(&w)).pass);
    }

    #[test]
    fn oversized_delta_is_detected() {
        let p = SmallStepParams::new(0.02, 100).unwrap();
        let w = vec![0.0; p.d];
        let est = smoothed_grad(&p, &w, &cfg(0.05, 20_000, false)).unwrap();
        assert!(!compare_gradient(1, &est, &p.grad(&w)).pass);
    }

    #[test]
    fn bonferroni_reduces_to_three_sigma() {
        assert!((bonferroni_z(1) - 3.0).abs() < 1e-9);
        assert!(bonferroni_z(4096) > 4.5);
    }
}
