//! Exact per-layer parameter accounting, with the independent-expert and
//! shared low-rank baselines for comparison. Router and task-embedding
//! counts are excluded from the headline totals and reported as addenda.

use serde::Serialize;

use crate::error::{Result, TrainError};

/// Integer parameter counts for one adapted layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ParamBreakdown {
    /// Shared subspace factors: `2 * d_sub * r`.
    pub subspace: u64,
    /// Deconvolution kernels: sum of `s_i^2`.
    pub kernels: u64,
    /// Headline total: subspace + kernels.
    pub ept_total: u64,
    /// Independent low-rank experts: `N * 2 * d * r`.
    pub moe_lora_baseline: u64,
    /// One shared low-rank pair: `2 * d * r`.
    pub shared_lora_baseline: u64,
    /// Router weight (`N * d`), reported separately.
    pub router_addendum: u64,
    /// One task prototype (`d_e = d` by default), reported separately.
    pub task_embedding_per_task_addendum: u64,
}

/// Count parameters for a `d x d` adapted layer with `n_experts` kernels of
/// the given scales sharing a `d_sub`-dimensional rank-`r` subspace.
pub fn count_params(
    d: u64,
    r: u64,
    n_experts: u64,
    scales: &[u64],
    d_sub: u64,
) -> Result<ParamBreakdown> {
    if d == 0 || r == 0 || d_sub == 0 {
        return Err(TrainError::Config(format!(
            "count_params: d, r, d_sub must be >= 1, got d={d} r={r} d_sub={d_sub}"
        )));
    }
    if scales.is_empty() || scales.iter().any(|&s| s == 0) {
        return Err(TrainError::Config("count_params: scales must be non-empty and >= 1".into()));
    }
    if n_experts != scales.len() as u64 {
        return Err(TrainError::Config(format!(
            "count_params: {n_experts} experts but {} scales",
            scales.len()
        )));
    }
    let subspace = 2 * d_sub * r;
    let kernels: u64 = scales.iter().map(|&s| s * s).sum();
    Ok(ParamBreakdown {
        subspace,
        kernels,
        ept_total: subspace + kernels,
        moe_lora_baseline: n_experts * 2 * d * r,
        shared_lora_baseline: 2 * d * r,
        router_addendum: n_experts * d,
        task_embedding_per_task_addendum: d,
    })
}

impl ParamBreakdown {
    /// Plain-text table.
    pub fn table(&self) -> String {
        format!(
            "category                      parameters\n\
             subspace (2*d_sub*r)          {}\n\
             kernels (sum s_i^2)           {}\n\
             ept total                     {}\n\
             moe-lora baseline (N*2*d*r)   {}\n\
             shared low-rank (2*d*r)       {}\n\
             router addendum (N*d)         {}\n\
             task embedding per task (d)   {}\n",
            self.subspace,
            self.kernels,
            self.ept_total,
            self.moe_lora_baseline,
            self.shared_lora_baseline,
            self.router_addendum,
            self.task_embedding_per_task_addendum,
        )
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("breakdown serializes")
    }
}
