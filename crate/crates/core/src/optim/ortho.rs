//! Fixed orthogonal transforms used to rotate gradients into an optimizer
//! basis.
//!
//! Two non-trivial constructions are available:
//!
//! * `Dense`: an explicit `n×n` matrix, the Q factor of a seeded Gaussian
//!   matrix with columns sign-corrected so that R has a positive diagonal
//!   (a Haar-distributed rotation).
//! * `Hadamard`: a seeded permutation of the `n` coordinates, zero-padded to
//!   a multiple of the block size `B`, then per block `(1/√B)·H_B·diag(s)` with
//!   random signs `s`. Applying it costs `O(n log B)`.

use crate::error::{Error, Result};
use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Largest dense transform built by default.
pub const DEFAULT_DENSE_LIMIT: usize = 4096;
/// Default Hadamard block size.
pub const DEFAULT_BLOCK_SIZE: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OrthoBackend {
    Identity,
    DenseRandom,
    HadamardBlock {
        block_size: usize,
    },
    /// Dense up to the dense limit, Hadamard blocks above it.
    Auto {
        block_size: usize,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub enum OrthoTransform {
    Identity {
        n: usize,
    },
    Dense {
        n: usize,
        /// Row-major `n×n`.
        q: Vec<f64>,
    },
    Hadamard {
        n: usize,
        block: usize,
        /// `perm[j]` is the source coordinate placed at slot `j`.
        perm: Vec<usize>,
        /// One sign per padded slot.
        signs: Vec<f64>,
    },
}

/// Builds the seeded transform for a parameter with `n` elements.
pub fn make_ortho(n: usize, backend: OrthoBackend, dense_limit: usize, seed: u64) -> Result<OrthoTransform> {
    if n == 0 {
        return Err(Error::config("orthogonal transform needs n >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match backend {
        OrthoBackend::Identity => Ok(OrthoTransform::Identity { n }),
        OrthoBackend::DenseRandom => {
            if n > dense_limit {
                return Err(Error::DenseLimit { n, limit: dense_limit });
            }
            Ok(dense_random(n, &mut rng))
        }
        OrthoBackend::HadamardBlock { block_size } => hadamard_random(n, block_size, &mut rng),
        OrthoBackend::Auto { block_size } => {
            if n <= dense_limit {
                Ok(dense_random(n, &mut rng))
            } else {
                hadamard_random(n, block_size, &mut rng)
            }
        }
    }
}

fn dense_random(n: usize, rng: &mut ChaCha8Rng) -> OrthoTransform {
    let g = DMatrix::<f64>::from_fn(n, n, |_, _| rng.sample(StandardNormal));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..n {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    let mut rows = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            rows.push(q[(i, j)]);
        }
    }
    OrthoTransform::Dense { n, q: rows }
}

fn hadamard_random(n: usize, block_size: usize, rng: &mut ChaCha8Rng) -> Result<OrthoTransform> {
    let block = effective_block(n, block_size)?;
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    let padded = n.div_ceil(block) * block;
    let signs = (0..padded)
        .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
        .collect();
    Ok(OrthoTransform::Hadamard { n, block, perm, signs })
}

fn effective_block(n: usize, block_size: usize) -> Result<usize> {
    if block_size == 0 || !block_size.is_power_of_two() {
        return Err(Error::config(format!(
            "Hadamard block size {block_size} is not a power of two"
        )));
    }
    Ok(block_size.min(n.next_power_of_two()))
}

/// In-place orthonormal Walsh–Hadamard transform of a power-of-two slice.
pub fn fwht_normalized(x: &mut [f64]) {
    let n = x.len();
    debug_assert!(n.is_power_of_two());
    let mut h = 1;
    while h < n {
        for start in (0..n).step_by(2 * h) {
            for i in start..start + h {
                let (a, b) = (x[i], x[i + h]);
                x[i] = a + b;
                x[i + h] = a - b;
            }
        }
        h *= 2;
    }
    let s = 1.0 / (n as f64).sqrt();
    for v in x {
        *v *= s;
    }
}

impl OrthoTransform {
    /// Hadamard transform with explicit permutation and signs.
    pub fn hadamard_with(perm: Vec<usize>, signs: Vec<f64>, block_size: usize) -> Result<Self> {
        let n = perm.len();
        let block = effective_block(n, block_size)?;
        let padded = n.div_ceil(block) * block;
        let mut seen = vec![false; n];
        for &p in &perm {
            if p >= n || std::mem::replace(&mut seen[p], true) {
                return Err(Error::config("hadamard permutation is not a permutation"));
            }
        }
        if signs.len() != padded || signs.iter().any(|s| s.abs() != 1.0) {
            return Err(Error::config("hadamard signs must be ±1 for every padded slot"));
        }
        Ok(OrthoTransform::Hadamard { n, block, perm, signs })
    }

    /// Parameter length `n`.
    pub fn len(&self) -> usize {
        match self {
            OrthoTransform::Identity { n } | OrthoTransform::Dense { n, .. } | OrthoTransform::Hadamard { n, .. } => *n,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Length of vectors in the rotated basis (`n` rounded up to whole blocks
    /// for the Hadamard backend).
    pub fn basis_len(&self) -> usize {
        match self {
            OrthoTransform::Hadamard { signs, .. } => signs.len(),
            _ => self.len(),
        }
    }

    /// `y = Q·x`.
    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_len(x.len(), self.len())?;
        Ok(match self {
            OrthoTransform::Identity { .. } => x.to_vec(),
            OrthoTransform::Dense { n, q } => crate::tensor::linalg::matmul(q, x, *n, *n, 1),
            OrthoTransform::Hadamard { block, perm, signs, .. } => {
                let mut y = vec![0.0; signs.len()];
                for (slot, &src) in perm.iter().enumerate() {
                    y[slot] = x[src];
                }
                for (chunk, s) in y.chunks_mut(*block).zip(signs.chunks(*block)) {
                    for (v, s) in chunk.iter_mut().zip(s) {
                        *v *= s;
                    }
                    fwht_normalized(chunk);
                }
                y
            }
        })
    }

    /// `x = Qᵀ·y`, truncated back to `n` coordinates for the Hadamard backend.
    pub fn apply_transpose(&self, y: &[f64]) -> Result<Vec<f64>> {
        self.check_len(y.len(), self.basis_len())?;
        Ok(match self {
            OrthoTransform::Identity { .. } => y.to_vec(),
            OrthoTransform::Dense { n, q } => {
                let mut x = vec![0.0; *n];
                crate::tensor::linalg::gemm(
                    *n,
                    *n,
                    1,
                    1.0,
                    q,
                    crate::tensor::linalg::View::transposed(0, *n),
                    y,
                    crate::tensor::linalg::View::rows(0, 1),
                    0.0,
                    &mut x,
                    crate::tensor::linalg::View::rows(0, 1),
                );
                x
            }
            OrthoTransform::Hadamard { n, block, perm, signs } => {
                let mut z = y.to_vec();
                for (chunk, s) in z.chunks_mut(*block).zip(signs.chunks(*block)) {
                    fwht_normalized(chunk);
                    for (v, s) in chunk.iter_mut().zip(s) {
                        *v *= s;
                    }
                }
                let mut x = vec![0.0; *n];
                for (slot, &src) in perm.iter().enumerate() {
                    x[src] = z[slot];
                }
                x
            }
        })
    }

    fn check_len(&self, got: usize, want: usize) -> Result<()> {
        if got != want {
            return Err(Error::ShapeMismatch {
                op: "orthogonal transform",
                lhs: vec![want],
                rhs: vec![got],
            });
        }
        Ok(())
    }

    /// Explicit matrix of a dense transform, for inspection.
    pub fn dense_matrix(&self) -> Option<&[f64]> {
        match self {
            OrthoTransform::Dense { q, .. } => Some(q),
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn norm(x: &[f64]) -> f64 {
        x.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    #[test]
    fn n_one_is_plus_minus_one() {
        for backend in [
            OrthoBackend::Identity,
            OrthoBackend::DenseRandom,
            OrthoBackend::HadamardBlock { block_size: 256 },
        ] {
            let q = make_ortho(1, backend, DEFAULT_DENSE_LIMIT, 7).unwrap();
            let y = q.apply(&[2.5]).unwrap();
            assert_eq!(y.len(), 1);
            assert_eq!(y[0].abs(), 2.5);
            assert_eq!(q.apply_transpose(&y).unwrap(), vec![2.5]);
        }
    }

    #[test]
    fn dense_is_orthogonal() {
        let q = make_ortho(64, OrthoBackend::DenseRandom, DEFAULT_DENSE_LIMIT, 11).unwrap();
        let m = q.dense_matrix().unwrap();
        let mut worst: f64 = 0.0;
        for i in 0..64 {
            for j in 0..64 {
                let dot: f64 = (0..64).map(|k| m[k * 64 + i] * m[k * 64 + j]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((dot - want).abs());
            }
        }
        assert!(worst < 1e-10, "max |QᵀQ - I| = {worst}");
    }

    #[test]
    fn dense_limit_enforced() {
        assert!(matches!(
            make_ortho(10, OrthoBackend::DenseRandom, 8, 0),
            Err(Error::DenseLimit { .. })
        ));
        assert!(matches!(
            make_ortho(10, OrthoBackend::Auto { block_size: 4 }, 8, 0).unwrap(),
            OrthoTransform::Hadamard { .. }
        ));
    }

    #[test]
    fn hadamard_spreads_basis_vector() {
        let q = OrthoTransform::hadamard_with(vec![0, 1, 2, 3], vec![1.0; 4], 4).unwrap();
        let y = q.apply(&[1.0, 0.0, 0.0, 0.0]).unwrap();
        assert!(y.iter().all(|v| (v.abs() - 0.5).abs() < 1e-15));
    }

    #[test]
    fn hadamard_uniform_spread_ratio() {
        let n = 64;
        let q = make_ortho(n, OrthoBackend::HadamardBlock { block_size: n }, DEFAULT_DENSE_LIMIT, 3).unwrap();
        let mut x = vec![0.0; n];
        x[17] = 3.0;
        let y = q.apply(&x).unwrap();
        let inf = y.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let ratio = inf * inf / y.iter().map(|v| v * v).sum::<f64>();
        assert!((ratio - 1.0 / n as f64).abs() < 1e-12);
    }

    #[test]
    fn padded_round_trip() {
        let q = make_ortho(
            37,
            OrthoBackend::HadamardBlock { block_size: 16 },
            DEFAULT_DENSE_LIMIT,
            5,
        )
        .unwrap();
        assert_eq!(q.basis_len(), 48);
        let x: Vec<f64> = (0..37).map(|i| (i as f64 * 0.37).sin()).collect();
        let y = q.apply(&x).unwrap();
        assert!((norm(&y) - norm(&x)).abs() < 1e-12);
        let back = q.apply_transpose(&y).unwrap();
        for (a, b) in back.iter().zip(&x) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_maps_to_zero_and_lengths_checked() {
        let q = make_ortho(8, OrthoBackend::DenseRandom, DEFAULT_DENSE_LIMIT, 1).unwrap();
        assert_eq!(q.apply(&[0.0; 8]).unwrap(), vec![0.0; 8]);
        assert!(q.apply(&[0.0; 7]).is_err());
        assert!(OrthoTransform::hadamard_with(vec![0, 0], vec![1.0; 2], 2).is_err());
        assert!(make_ortho(8, OrthoBackend::HadamardBlock { block_size: 6 }, 16, 1).is_err());
    }

    #[test]
    fn seeds_are_deterministic() {
        let a = make_ortho(32, OrthoBackend::DenseRandom, 64, 42).unwrap();
        let b = make_ortho(32, OrthoBackend::DenseRandom, 64, 42).unwrap();
        let c = make_ortho(32, OrthoBackend::DenseRandom, 64, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
