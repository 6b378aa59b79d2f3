//! Shared meta-knowledge subspace: two low-rank factors whose product is the
//! seed every expert expands from.
//!
//! Slices are anchored at the top-left, so a sliced product is exactly the
//! corresponding block of the full product (same entries, same summation
//! order) and gradients only ever reach the sliced rows of B and columns
//! of A.

use crate::error::{EptError, Result};
use crate::numeric::{matmul, Matrix, NodeId, Tape};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// The two trainable factors of the shared seed.
#[derive(Debug, Clone)]
pub struct MetaSubspace {
    factor_b: Matrix,
    factor_a: Matrix,
    rank: usize,
}

/// Tape handles for a staged subspace.
#[derive(Debug, Clone, Copy)]
pub struct SubspaceNodes {
    pub factor_b: NodeId,
    pub factor_a: NodeId,
}

/// Draw both factors from N(0, std^2) with a seeded generator. With
/// `gaussian_init_a` false (the AB-init ablation), A is zero-filled instead,
/// making the initial seed exactly zero.
pub fn init_subspace_with_init(
    h_max: usize,
    w_max: usize,
    rank: usize,
    gaussian_std: f64,
    seed: u64,
    gaussian_init_a: bool,
) -> Result<MetaSubspace> {
    if h_max == 0 || w_max == 0 || rank == 0 {
        return Err(EptError::Parameter(format!(
            "init_subspace: dimensions must be >= 1, got h_max={h_max} w_max={w_max} rank={rank}"
        )));
    }
    if !(gaussian_std > 0.0) {
        return Err(EptError::Parameter(format!(
            "init_subspace: gaussian std must be > 0, got {gaussian_std}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, gaussian_std).expect("std validated above");
    let factor_b = Matrix::from_fn(h_max, rank, |_, _| normal.sample(&mut rng));
    let factor_a = if gaussian_init_a {
        Matrix::from_fn(rank, w_max, |_, _| normal.sample(&mut rng))
    } else {
        Matrix::zeros(rank, w_max)
    };
    Ok(MetaSubspace { factor_b, factor_a, rank })
}

/// Standard construction: both factors Gaussian.
pub fn init_subspace(
    h_max: usize,
    w_max: usize,
    rank: usize,
    gaussian_std: f64,
    seed: u64,
) -> Result<MetaSubspace> {
    init_subspace_with_init(h_max, w_max, rank, gaussian_std, seed, true)
}

impl MetaSubspace {
    /// Wrap existing factors (checkpoint restore).
    pub fn from_factors(factor_b: Matrix, factor_a: Matrix) -> Result<Self> {
        if factor_b.cols() != factor_a.rows() {
            return Err(EptError::Shape(format!(
                "subspace factors disagree on rank: B is {}x{}, A is {}x{}",
                factor_b.rows(),
                factor_b.cols(),
                factor_a.rows(),
                factor_a.cols()
            )));
        }
        let rank = factor_b.cols();
        Ok(MetaSubspace { factor_b, factor_a, rank })
    }

    pub fn h_max(&self) -> usize {
        self.factor_b.rows()
    }

    pub fn w_max(&self) -> usize {
        self.factor_a.cols()
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn factor_b(&self) -> &Matrix {
        &self.factor_b
    }

    pub fn factor_a(&self) -> &Matrix {
        &self.factor_a
    }

    pub fn factor_b_mut(&mut self) -> &mut Matrix {
        &mut self.factor_b
    }

    pub fn factor_a_mut(&mut self) -> &mut Matrix {
        &mut self.factor_a
    }

    /// The full `H_max x W_max` seed `B * A`.
    pub fn full_seed(&self) -> Matrix {
        matmul(&self.factor_b, &self.factor_a).expect("factor shapes fixed at construction")
    }

    fn check_slice(&self, h_t: usize, w_t: usize) -> Result<()> {
        if h_t == 0 || w_t == 0 {
            return Err(EptError::Parameter(format!(
                "slice_seed: slice dims must be >= 1, got {h_t}x{w_t}"
            )));
        }
        if h_t > self.h_max() {
            return Err(EptError::Capacity(format!(
                "slice_seed: requested {h_t} rows exceeds H_max={}",
                self.h_max()
            )));
        }
        if w_t > self.w_max() {
            return Err(EptError::Capacity(format!(
                "slice_seed: requested {w_t} cols exceeds W_max={}",
                self.w_max()
            )));
        }
        Ok(())
    }

    /// Scale-specific seed `B[0:h_t, :] * A[:, 0:w_t]`.
    pub fn slice_seed(&self, h_t: usize, w_t: usize) -> Result<Matrix> {
        self.check_slice(h_t, w_t)?;
        let b = self.factor_b.crop(h_t, self.rank)?;
        let a = self.factor_a.crop(self.rank, w_t)?;
        matmul(&b, &a)
    }

    /// Register both factors as parameters on a tape.
    pub fn stage(&self, tape: &mut Tape) -> SubspaceNodes {
        SubspaceNodes {
            factor_b: tape.param(self.factor_b.clone()),
            factor_a: tape.param(self.factor_a.clone()),
        }
    }

    /// Sliced seed as a tape node; gradients flow only into the sliced
    /// rows/columns of the staged factors.
    pub fn slice_seed_on_tape(
        &self,
        tape: &mut Tape,
        nodes: SubspaceNodes,
        h_t: usize,
        w_t: usize,
    ) -> Result<NodeId> {
        self.check_slice(h_t, w_t)?;
        let b = tape.crop(nodes.factor_b, h_t, self.rank)?;
        let a = tape.crop(nodes.factor_a, self.rank, w_t)?;
        tape.matmul(b, a)
    }
}
