//! Interfaces shared by the three instance families.

use crate::error::Result;

/// A stochastic objective `f(w, z)` with a subgradient oracle.
pub trait Objective: Sync {
    type Sample: Sync;

    fn dim(&self) -> usize;

    fn loss(&self, w: &[f64], z: &Self::Sample) -> Result<f64>;

    fn grad(&self, w: &[f64], z: &Self::Sample) -> Result<Vec<f64>>;

    /// Empirical risk over `zs`.
    fn batch_loss(&self, w: &[f64], zs: &[Self::Sample]) -> Result<f64> {
        let mut total = 0.0;
        for z in zs {
            total += self.loss(w, z)?;
        }
        Ok(total / zs.len() as f64)
    }

    /// Mean subgradient over `zs`, accumulated in index order.
    fn batch_grad(&self, w: &[f64], zs: &[Self::Sample]) -> Result<Vec<f64>> {
        let mut acc = vec![0.0; self.dim()];
        for z in zs {
            crate::vecops::axpy(1.0, &self.grad(w, z)?, &mut acc);
        }
        crate::vecops::scale(1.0 / zs.len() as f64, &mut acc);
        Ok(acc)
    }
}

/// A deterministic function that can be expanded around a point.
pub trait Surface: Sync {
    fn dim(&self) -> usize;

    fn value(&self, w: &[f64]) -> Result<f64>;

    /// Local view at `w` used by the smoothing estimators. The default
    /// subtracts two evaluations; families whose interesting perturbations
    /// fall below the rounding error of `value` override it.
    fn expand<'a>(&'a self, w: &'a [f64]) -> Result<Box<dyn Expansion + 'a>> {
        Ok(Box::new(Difference {
            surface: self,
            w,
            base: self.value(w)?,
        }))
    }
}

/// `f(w + x) - f(w)` for a fixed base point `w`.
pub trait Expansion: Sync {
    fn base(&self) -> f64;

    fn increment(&self, x: &[f64]) -> Result<f64>;
}

struct Difference<'a, S: Surface + ?Sized> {
    surface: &'a S,
    w: &'a [f64],
    base: f64,
}

impl<S: Surface + ?Sized> Expansion for Difference<'_, S> {
    fn base(&self) -> f64 {
        self.base
    }

    fn increment(&self, x: &[f64]) -> Result<f64> {
        let moved = crate::vecops::add(self.w, x);
        Ok(self.surface.value(&moved)? - self.base)
    }
}

/// Adapts a closure into a [`Surface`].
pub struct FnSurface<F> {
    pub dim: usize,
    pub f: F,
}

impl<F: Fn(&[f64]) -> f64 + Sync> Surface for FnSurface<F> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn value(&self, w: &[f64]) -> Result<f64> {
        Ok((self.f)(w))
    }
}
