//! The term `sqrt(Σ_{k=2..T} max(floor, max_{u∈V} <u, w^(k)>)²)` shared by the
//! GD and SGD instances. Inner products come in through a closure so that
//! callers can reuse their precomputed tables.

use crate::encoding::SubsetMask;

/// Per-subspace maxima for `k = 2..=t` with the winning member, lowest index
/// on ties; `None` for an empty set.
pub(crate) fn maxima(
    v: SubsetMask,
    t: usize,
    ip: impl Fn(usize, usize) -> f64,
) -> Vec<Option<(usize, f64)>> {
    (2..=t)
        .map(|k| {
            let mut best: Option<(usize, f64)> = None;
            for u in v.iter() {
                let x = ip(u, k);
                if best.is_none_or(|(_, b)| x > b) {
                    best = Some((u, x));
                }
            }
            best
        })
        .collect()
}

pub(crate) fn heights(m: &[Option<(usize, f64)>], floor: f64) -> Vec<f64> {
    m.iter()
        .map(|m| m.map_or(floor, |(_, x)| x.max(floor)))
        .collect()
}

pub(crate) fn value(h: &[f64]) -> f64 {
    h.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Gradient pieces `(k, u, coefficient)`: subspace `k` receives
/// `coefficient · u`.
pub(crate) fn grad_pieces(m: &[Option<(usize, f64)>], floor: f64) -> Vec<(usize, usize, f64)> {
    let total = value(&heights(m, floor));
    m.iter()
        .enumerate()
        .filter_map(|(i, m)| match *m {
            Some((u, x)) if x > floor => Some((i + 2, u, x / total)),
            _ => None,
        })
        .collect()
}

/// Exact increment of the term under a perturbation, from gaps at the base.
pub(crate) struct Local {
    value: f64,
    t: usize,
    h: Vec<f64>,
    floor_gap: Vec<f64>,
    members: Vec<usize>,
    /// `member_gap[m * (t - 1) + (k - 2)]`
    member_gap: Vec<f64>,
}

impl Local {
    pub(crate) fn new(
        v: SubsetMask,
        t: usize,
        floor: f64,
        ip: impl Fn(usize, usize) -> f64,
    ) -> Self {
        let members: Vec<usize> = v.iter().collect();
        let h = heights(&maxima(v, t, &ip), floor);
        let floor_gap = h.iter().map(|&hk| floor - hk).collect();
        let mut member_gap = Vec::with_capacity(members.len() * (t - 1));
        for &u in &members {
            for k in 2..=t {
                member_gap.push(ip(u, k) - h[k - 2]);
            }
        }
        Self {
            value: value(&h),
            t,
            h,
            floor_gap,
            members,
            member_gap,
        }
    }

    pub(crate) fn value(&self) -> f64 {
        self.value
    }

    /// `dx(u, k)` is `<u, x^(k)>` for the perturbation `x`.
    pub(crate) fn increment(&self, dx: impl Fn(usize, usize) -> f64) -> f64 {
        let t = self.t;
        let mut num = 0.0;
        let mut new_sq = 0.0;
        for k in 2..=t {
            let mut dh = self.floor_gap[k - 2];
            for (m, &u) in self.members.iter().enumerate() {
                dh = dh.max(self.member_gap[m * (t - 1) + k - 2] + dx(u, k));
            }
            let h = self.h[k - 2];
            // (h+dh)² - h² over the sum of norms avoids cancellation.
            num += dh * (2.0 * h + dh);
            new_sq += (h + dh) * (h + dh);
        }
        num / (new_sq.sqrt() + self.value)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn increment_matches_difference() {
        let ip = |u: usize, k: usize| 0.01 * (u as f64 + 1.0) * (k as f64 - 2.5);
        let dx = |u: usize, k: usize| 1e-3 * ((u * 7 + k * 3) % 5) as f64 - 2e-3;
        let v = SubsetMask::new(0b101, 3).unwrap();
        let (t, floor) = (5, 0.004);
        let local = Local::new(v, t, floor, ip);
        let moved = value(&heights(&maxima(v, t, |u, k| ip(u, k) + dx(u, k)), floor));
        assert!((local.increment(dx) - (moved - local.value())).abs() < 1e-16);
    }
}
