//! Nearly-orthogonal sign-vector codebooks.
//!
//! A [`Codebook`] is an ordered list of `N` unit vectors in `R^{d'}` whose
//! entries are all `±1/√d'` and whose pairwise inner products are at most
//! `1/8` in magnitude. The order is part of the data: downstream decoders
//! pick "the lowest-index vector" with some property, so index `0` plays the
//! role of the first vector of the enumeration.
//!
//! ```
//! use sco_adversary::codebook::{coherence, generate_codebook};
//!
//! let cb = generate_codebook(16, 256, 1, 10_000).unwrap();
//! assert_eq!(cb.len(), 16);
//! assert!(coherence(&cb) <= 0.125);
//! ```

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest admissible pairwise inner product.
pub const MAX_COHERENCE: f64 = 0.125;

#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    dim: usize,
    seed: u64,
    signs: Vec<Vec<i8>>,
    /// Row-major `N x dim` copy with entries `±1/√dim`.
    values: Vec<f64>,
}

/// On-disk form: signs rather than floats so that a round trip is bit-exact.
#[derive(Serialize, Deserialize)]
struct CodebookJson {
    dim: usize,
    seed: u64,
    vectors: Vec<Vec<i8>>,
}

impl Codebook {
    /// Builds a codebook from explicit sign patterns. Entries must be `±1`.
    /// No coherence check is made; see [`coherence`].
    pub fn from_signs(dim: usize, seed: u64, signs: Vec<Vec<i8>>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidParams(
                "codebook dimension must be positive".into(),
            ));
        }
        for (i, s) in signs.iter().enumerate() {
            if s.len() != dim || s.iter().any(|&x| x != 1 && x != -1) {
                return Err(Error::InvalidParams(format!(
                    "vector {i} must have {dim} entries, each +1 or -1"
                )));
            }
        }
        let unit = 1.0 / (dim as f64).sqrt();
        let values = signs
            .iter()
            .flatten()
            .map(|&s| f64::from(s) * unit)
            .collect();
        Ok(Self {
            dim,
            seed,
            signs,
            values,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.signs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.signs.is_empty()
    }

    /// The `i`-th unit vector (0-based).
    pub fn vector(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn signs(&self, i: usize) -> &[i8] {
        &self.signs[i]
    }

    /// Exact integer inner product of two sign patterns.
    pub fn sign_dot(&self, i: usize, k: usize) -> i64 {
        sign_dot(&self.signs[i], &self.signs[k])
    }

    /// `<v_i, v_k>`; exact up to one rounding because it is computed from
    /// the integer sign product.
    pub fn inner(&self, i: usize, k: usize) -> f64 {
        self.sign_dot(i, k) as f64 / self.dim as f64
    }

    /// Inner products `<v_i, x>` for every vector, with `x` of length `dim`.
    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        (0..self.len())
            .map(|i| crate::vecops::dot(self.vector(i), x))
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = CodebookJson {
            dim: self.dim,
            seed: self.seed,
            vectors: self.signs.clone(),
        };
        Ok(serde_json::to_string(&doc)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let doc: CodebookJson = serde_json::from_str(s)?;
        Self::from_signs(doc.dim, doc.seed, doc.vectors)
    }
}

fn sign_dot(a: &[i8], b: &[i8]) -> i64 {
    a.iter().zip(b).map(|(&x, &y)| i64::from(x * y)).sum()
}

/// Default subspace dimension for a universe of `n_vectors`:
/// `max(256, ceil(178 * log2(max(N, 2))))`.
pub fn default_dprime(n_vectors: usize) -> usize {
    let n = n_vectors.max(2);
    let raw = 178.0 * (n as f64).log2();
    // log2 is exact for powers of two, so the ceiling never overshoots there.
    (raw.ceil() as usize).max(256)
}

/// Rejection sampler: draw uniform sign vectors and keep a candidate iff its
/// inner product with every accepted vector is at most `1/8` in magnitude.
pub fn generate_codebook(
    n_vectors: usize,
    dprime: usize,
    seed: u64,
    max_attempts: usize,
) -> Result<Codebook> {
    if n_vectors == 0 || dprime == 0 {
        return Err(Error::InvalidParams(
            "codebook needs N >= 1 and d' >= 1".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut accepted: Vec<Vec<i8>> = Vec::with_capacity(n_vectors);
    // |<u,v>| <= 1/8  <=>  8 |sum s_i t_i| <= d'
    let limit = dprime as i64;
    let mut attempts = 0;
    while accepted.len() < n_vectors {
        if attempts == max_attempts {
            return Err(Error::AttemptsExhausted {
                attempts,
                accepted: accepted.len(),
                wanted: n_vectors,
            });
        }
        attempts += 1;
        let cand: Vec<i8> = (0..dprime)
            .map(|_| if rng.random::<bool>() { 1 } else { -1 })
            .collect();
        if accepted
            .iter()
            .all(|v| 8 * sign_dot(v, &cand).abs() <= limit)
        {
            accepted.push(cand);
        }
    }
    Codebook::from_signs(dprime, seed, accepted)
}

/// Largest `|<u_i, u_k>|` over distinct pairs; zero for fewer than two vectors.
pub fn coherence(cb: &Codebook) -> f64 {
    let mut worst = 0i64;
    for i in 0..cb.len() {
        for k in i + 1..cb.len() {
            worst = worst.max(cb.sign_dot(i, k).abs());
        }
    }
    worst as f64 / cb.dim() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_vector_has_zero_coherence() {
        let cb = generate_codebook(1, 4, 7, 10).unwrap();
        assert_eq!(cb.len(), 1);
        assert_eq!(coherence(&cb), 0.0);
    }

    #[test]
    fn identical_vectors_have_coherence_one() {
        let cb = Codebook::from_signs(3, 0, vec![vec![1, -1, 1], vec![1, -1, 1]]).unwrap();
        assert_eq!(coherence(&cb), 1.0);
    }

    #[test]
    fn default_dimension() {
        assert_eq!(default_dprime(1), 256);
        assert_eq!(default_dprime(16), 712);
        assert_eq!(default_dprime(3), 283);
        assert_eq!(default_dprime(256), 1424);
    }

    #[test]
    fn tiny_dimension_exhausts_attempts() {
        // In dimension 2 any two sign vectors have |<u,v>| in {0, 1}, and a
        // third vector is always parallel to one of two orthogonal ones.
        let err = generate_codebook(3, 2, 0, 500).unwrap_err();
        assert!(matches!(err, Error::AttemptsExhausted { accepted: 2, .. }));
    }

    #[test]
    fn json_round_trip_is_exact() {
        let cb = generate_codebook(5, 64, 9, 10_000).unwrap();
        let back = Codebook::from_json(&cb.to_json().unwrap()).unwrap();
        assert_eq!(cb, back);
    }
}
