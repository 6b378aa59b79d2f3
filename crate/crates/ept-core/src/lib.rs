//! Expert pyramid tuning over frozen linear weights.
//!
//! A frozen weight is adapted by a bank of deconvolutional experts that all
//! read from one shared low-rank seed: the seed is sliced to a per-scale
//! granularity, expanded by a per-expert transposed-convolution kernel, and
//! cropped back to the frozen weight's shape. A temperature-gated top-k
//! router mixes the expert deltas per token, and learnable task prototypes
//! trained with a contrastive objective keep tasks separable.
//!
//! The `numeric` module supplies the dense kernels and the reverse-mode tape
//! everything differentiates through; `reference` holds the independent
//! naive implementations the test suites compare against.

pub mod adapter;
pub mod error;
pub mod experts;
pub mod numeric;
pub mod reference;
pub mod router;
pub mod subspace;
pub mod tasks;

pub use error::{EptError, Result};
pub use numeric::{Matrix, Tape};

/// Small deterministic generator for test data (xorshift64*).
#[cfg(test)]
pub(crate) fn testrng(seed: u64) -> TestRng {
    TestRng { state: seed.wrapping_mul(0x9E3779B97F4A7C15) | 1 }
}

#[cfg(test)]
pub(crate) struct TestRng {
    state: u64,
}

#[cfg(test)]
impl TestRng {
    /// Uniform in [0, 1).
    pub fn next(&mut self) -> f64 {
        self.state ^= self.state >> 12;
        self.state ^= self.state << 25;
        self.state ^= self.state >> 27;
        let bits = self.state.wrapping_mul(0x2545F4914F6CDD1D);
        (bits >> 11) as f64 / (1u64 << 53) as f64
    }
}
