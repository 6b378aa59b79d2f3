//! Deconvolutional expert bank.
//!
//! Each expert owns one square kernel; its weight delta is produced by
//! slicing the shared seed to the scale's granularity, expanding it with a
//! stride-equals-kernel-size transposed convolution, and cropping the result
//! to the frozen weight's exact shape (the adaptive pruner's alignment).
//! Kernels start at zero so a fresh bank perturbs nothing.

use crate::error::{EptError, Result};
use crate::numeric::{transposed_conv2d, Matrix, NodeId, Tape};
use crate::subspace::{MetaSubspace, SubspaceNodes};

/// One deconvolutional expert: an `s x s` trainable kernel applied at
/// stride `s`.
#[derive(Debug, Clone)]
pub struct DeconvExpert {
    kernel: Matrix,
    scale: usize,
    index: usize,
}

impl DeconvExpert {
    fn new(scale: usize, index: usize) -> Self {
        DeconvExpert {
            kernel: Matrix::zeros(scale, scale),
            scale,
            index,
        }
    }

    pub fn kernel(&self) -> &Matrix {
        &self.kernel
    }

    pub fn kernel_mut(&mut self) -> &mut Matrix {
        &mut self.kernel
    }

    /// Kernel size, which is also the deconvolution stride.
    pub fn scale(&self) -> usize {
        self.scale
    }

    pub fn index(&self) -> usize {
        self.index
    }
}

/// Ordered bank of experts targeting one frozen weight shape. Router
/// indices refer to this order.
#[derive(Debug, Clone)]
pub struct ExpertBank {
    experts: Vec<DeconvExpert>,
    d_out: usize,
    d_in: usize,
}

/// Slice granularity for a target shape at kernel scale `s`:
/// `(ceil(d_out/s), ceil(d_in/s))`.
pub fn target_slice_dims(d_out: usize, d_in: usize, s: usize) -> (usize, usize) {
    (d_out.div_ceil(s), d_in.div_ceil(s))
}

/// Trainable kernel entries across a scale list: sum of `s_i^2`.
pub fn expert_param_count(scales: &[usize]) -> usize {
    scales.iter().map(|&s| s * s).sum()
}

/// One zero-initialized expert per scale, in list order. Duplicate scales
/// get independent kernels.
pub fn init_bank(scales: &[usize], d_out: usize, d_in: usize) -> Result<ExpertBank> {
    if scales.is_empty() {
        return Err(EptError::Parameter("init_bank: empty scale list".into()));
    }
    if d_out == 0 || d_in == 0 {
        return Err(EptError::Parameter(format!(
            "init_bank: target shape must be >= 1x1, got {d_out}x{d_in}"
        )));
    }
    for &s in scales {
        if s == 0 {
            return Err(EptError::Parameter("init_bank: scale 0 is invalid".into()));
        }
    }
    let experts = scales
        .iter()
        .enumerate()
        .map(|(i, &s)| DeconvExpert::new(s, i))
        .collect();
    Ok(ExpertBank { experts, d_out, d_in })
}

impl ExpertBank {
    pub fn len(&self) -> usize {
        self.experts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.experts.is_empty()
    }

    pub fn expert(&self, i: usize) -> &DeconvExpert {
        &self.experts[i]
    }

    pub fn expert_mut(&mut self, i: usize) -> &mut DeconvExpert {
        &mut self.experts[i]
    }

    pub fn experts(&self) -> &[DeconvExpert] {
        &self.experts
    }

    pub fn scales(&self) -> Vec<usize> {
        self.experts.iter().map(|e| e.scale).collect()
    }

    pub fn d_out(&self) -> usize {
        self.d_out
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    /// Smallest kernel scale in the bank; it dictates the largest slice and
    /// therefore the subspace capacity.
    pub fn min_scale(&self) -> usize {
        self.experts.iter().map(|e| e.scale).min().expect("bank is non-empty")
    }
}

/// Materialize one expert's weight delta:
/// `crop(deconv(slice_seed(ms, h_t, w_t), kernel, stride=s), d_out, d_in)`.
pub fn project_expert(
    ms: &MetaSubspace,
    expert: &DeconvExpert,
    d_out: usize,
    d_in: usize,
) -> Result<Matrix> {
    let (h_t, w_t) = target_slice_dims(d_out, d_in, expert.scale);
    let seed = ms.slice_seed(h_t, w_t)?;
    let expanded = transposed_conv2d(&seed, &expert.kernel, expert.scale)?;
    expanded.crop(d_out, d_in)
}

/// Same projection with the full (unsliced) seed; the pruner-disabled
/// ablation path. The expansion is still cropped to the target shape.
pub fn project_expert_full_seed(
    ms: &MetaSubspace,
    expert: &DeconvExpert,
    d_out: usize,
    d_in: usize,
) -> Result<Matrix> {
    let expanded = transposed_conv2d(&ms.full_seed(), &expert.kernel, expert.scale)?;
    expanded.crop(d_out, d_in)
}

/// Tape handles for a staged bank (one kernel parameter per expert).
#[derive(Debug, Clone)]
pub struct BankNodes {
    pub kernels: Vec<NodeId>,
}

impl ExpertBank {
    /// Register every kernel as a parameter on the tape, bank order.
    pub fn stage(&self, tape: &mut Tape) -> BankNodes {
        BankNodes {
            kernels: self.experts.iter().map(|e| tape.param(e.kernel.clone())).collect(),
        }
    }

    /// Expert delta as a tape node, differentiable w.r.t. both factors and
    /// the kernel. With `use_full_seed` the slice step is skipped.
    pub fn project_on_tape(
        &self,
        tape: &mut Tape,
        ms: &MetaSubspace,
        subspace: SubspaceNodes,
        nodes: &BankNodes,
        expert_index: usize,
        use_full_seed: bool,
    ) -> Result<NodeId> {
        let expert = &self.experts[expert_index];
        let seed = if use_full_seed {
            tape.matmul(subspace.factor_b, subspace.factor_a)?
        } else {
            let (h_t, w_t) = target_slice_dims(self.d_out, self.d_in, expert.scale);
            ms.slice_seed_on_tape(tape, subspace, h_t, w_t)?
        };
        let expanded = tape.transposed_conv(seed, nodes.kernels[expert_index], expert.scale)?;
        tape.crop(expanded, self.d_out, self.d_in)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::finite_diff_check;
    use crate::reference;
    use crate::subspace::init_subspace;

    #[test]
    fn published_bank_has_240_kernel_entries() {
        let scales = [2, 2, 4, 4, 6, 6, 8, 8];
        let bank = init_bank(&scales, 768, 768).unwrap();
        assert_eq!(bank.len(), 8);
        assert_eq!(expert_param_count(&scales), 240);
    }

    #[test]
    fn homogeneous_and_trivial_banks() {
        let bank = init_bank(&[4; 8], 64, 64).unwrap();
        assert_eq!(bank.scales(), vec![4; 8]);
        assert_eq!(expert_param_count(&[1]), 1);
        assert_eq!(expert_param_count(&[3, 5]), 34);
        assert!(init_bank(&[], 4, 4).is_err());
    }

    #[test]
    fn duplicate_scales_hold_independent_kernels() {
        let mut bank = init_bank(&[2, 2], 8, 8).unwrap();
        bank.expert_mut(0).kernel_mut().set(0, 0, 5.0);
        assert_eq!(bank.expert(1).kernel().get(0, 0), 0.0);
    }

    #[test]
    fn slice_dims_use_ceiling() {
        assert_eq!(target_slice_dims(768, 768, 8), (96, 96));
        assert_eq!(target_slice_dims(768, 768, 2), (384, 384));
        assert_eq!(target_slice_dims(10, 7, 3), (4, 3));
    }

    #[test]
    fn zero_kernel_projects_to_zero() {
        let ms = init_subspace(16, 16, 4, 0.3, 2).unwrap();
        let bank = init_bank(&[1, 2, 4], 13, 11).unwrap();
        for e in bank.experts() {
            let w = project_expert(&ms, e, 13, 11).unwrap();
            assert_eq!(w.shape(), (13, 11));
            assert!(w.as_slice().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn divisible_case_is_a_kronecker_product() {
        let ms = init_subspace(12, 12, 3, 0.4, 4).unwrap();
        let mut bank = init_bank(&[2], 12, 12).unwrap();
        let mut rng = crate::testrng(17);
        for p in 0..2 {
            for q in 0..2 {
                bank.expert_mut(0).kernel_mut().set(p, q, rng.next() - 0.5);
            }
        }
        let w = project_expert(&ms, bank.expert(0), 12, 12).unwrap();
        let seed = ms.slice_seed(6, 6).unwrap();
        assert!(w.bits_eq(&reference::kronecker(&seed, bank.expert(0).kernel())));
    }

    #[test]
    fn non_divisible_case_matches_scatter_then_crop() {
        let ms = init_subspace(8, 8, 2, 0.4, 5).unwrap();
        let mut bank = init_bank(&[2], 5, 5).unwrap();
        let mut rng = crate::testrng(23);
        for p in 0..2 {
            for q in 0..2 {
                bank.expert_mut(0).kernel_mut().set(p, q, rng.next() - 0.5);
            }
        }
        let w = project_expert(&ms, bank.expert(0), 5, 5).unwrap();
        assert_eq!(w.shape(), (5, 5));
        let seed = ms.slice_seed(3, 3).unwrap();
        let full = reference::deconv_scatter(&seed, bank.expert(0).kernel(), 2);
        assert_eq!(full.shape(), (6, 6));
        assert!(w.bits_eq(&full.crop(5, 5).unwrap()));
    }

    #[test]
    fn scale_one_expert_is_scalar_times_seed() {
        let ms = init_subspace(7, 9, 2, 0.4, 6).unwrap();
        let mut bank = init_bank(&[1], 7, 9).unwrap();
        bank.expert_mut(0).kernel_mut().set(0, 0, 2.5);
        let w = project_expert(&ms, bank.expert(0), 7, 9).unwrap();
        let want = ms.slice_seed(7, 9).unwrap().scale(2.5);
        assert!(w.max_abs_diff(&want) == 0.0);
    }

    #[test]
    fn projection_shape_law_holds_for_every_scale() {
        let ms = init_subspace(33, 29, 3, 0.3, 7).unwrap();
        let bank = init_bank(&[1, 2, 3, 5, 8], 33, 29).unwrap();
        for e in bank.experts() {
            assert_eq!(project_expert(&ms, e, 33, 29).unwrap().shape(), (33, 29));
        }
    }

    #[test]
    fn capacity_error_propagates_from_slicing() {
        // subspace too small for the scale-1 slice of a 9-row target
        let ms = init_subspace(4, 4, 2, 0.3, 8).unwrap();
        let bank = init_bank(&[1], 9, 4).unwrap();
        assert!(matches!(
            project_expert(&ms, bank.expert(0), 9, 4),
            Err(EptError::Capacity(_))
        ));
    }

    #[test]
    fn projection_gradients_match_finite_differences() {
        let ms = init_subspace(6, 6, 2, 0.4, 9).unwrap();
        let mut bank = init_bank(&[2], 5, 5).unwrap();
        let mut rng = crate::testrng(31);
        for p in 0..2 {
            for q in 0..2 {
                bank.expert_mut(0).kernel_mut().set(p, q, rng.next() - 0.5);
            }
        }
        let probe = Matrix::from_fn(5, 5, |_, _| rng.next() - 0.5);

        let mut tape = Tape::new();
        let sub_nodes = ms.stage(&mut tape);
        let bank_nodes = bank.stage(&mut tape);
        let w = bank
            .project_on_tape(&mut tape, &ms, sub_nodes, &bank_nodes, 0, false)
            .unwrap();
        let probe_node = tape.constant(probe.clone());
        let loss = tape.dot(w, probe_node).unwrap();
        tape.backward(loss).unwrap();

        let params = vec![
            ms.factor_b().clone(),
            ms.factor_a().clone(),
            bank.expert(0).kernel().clone(),
        ];
        let analytic = vec![
            tape.grad(sub_nodes.factor_b).unwrap().clone(),
            tape.grad(sub_nodes.factor_a).unwrap().clone(),
            tape.grad(bank_nodes.kernels[0]).unwrap().clone(),
        ];
        let err = finite_diff_check(
            |ps: &[Matrix]| {
                let ms = MetaSubspace::from_factors(ps[0].clone(), ps[1].clone())?;
                let mut bank = init_bank(&[2], 5, 5)?;
                *bank.expert_mut(0).kernel_mut() = ps[2].clone();
                let w = project_expert(&ms, bank.expert(0), 5, 5)?;
                Ok(w.as_slice()
                    .iter()
                    .zip(probe.as_slice())
                    .map(|(a, b)| a * b)
                    .sum())
            },
            &params,
            &analytic,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-5, "projection grad err {err}");
    }
}
