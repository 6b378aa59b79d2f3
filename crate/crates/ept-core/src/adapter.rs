//! The adapted linear layer: a frozen base weight plus gated, scale-aware
//! pyramid deltas, with merged-weight export for re-parameterized inference.
//!
//! In training mode every expert delta is applied as `(W_i x)` and then
//! gated; the pre-summed merged matrix exists only as an export. Both paths
//! must agree to 1e-9 per element, which is what makes the merge claim an
//! algebraic fact rather than an approximation.

use crate::error::{EptError, Result};
use crate::experts::{
    init_bank, project_expert, project_expert_full_seed, target_slice_dims, BankNodes, ExpertBank,
};
use crate::numeric::{Matrix, NodeId, Tape};
use crate::router::{
    gate_scores, route_logits, select_topk, Conditioning, RouterState,
};
use crate::subspace::{init_subspace_with_init, MetaSubspace, SubspaceNodes};

/// Per-expert multiplier applied on top of the gate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScalingMode {
    /// `h_t / T` where `h_t = ceil(d_out / s_i)` (the default).
    SliceHeightOverT,
    /// `s_i / T`.
    KernelOverT,
    /// No extra factor; reproduces the literal merged-weight formula.
    None,
}

/// Construction knobs for one adapted layer.
#[derive(Debug, Clone)]
pub struct LayerConfig {
    pub scales: Vec<usize>,
    pub rank: usize,
    pub gaussian_std: f64,
    pub top_k: usize,
    pub tau_gate: f64,
    pub conditioning: Conditioning,
    pub task_embed_dim: usize,
    pub scaling_mode: ScalingMode,
    pub n_tasks: usize,
    /// AB-init toggle: false zero-initializes factor A.
    pub gaussian_init_a: bool,
    /// Pruner toggle: true skips slicing and expands the full seed.
    pub use_full_seed: bool,
}

impl LayerConfig {
    pub fn basic(scales: Vec<usize>, rank: usize, top_k: usize, n_tasks: usize) -> Self {
        LayerConfig {
            scales,
            rank,
            gaussian_std: 0.02,
            top_k,
            tau_gate: 1.0,
            conditioning: Conditioning::TokenOnly,
            task_embed_dim: 1,
            scaling_mode: ScalingMode::SliceHeightOverT,
            n_tasks,
            gaussian_init_a: true,
            use_full_seed: false,
        }
    }
}

/// A frozen weight wrapped with its subspace, expert bank, and router.
#[derive(Debug, Clone)]
pub struct EptLayer {
    w0: Matrix,
    subspace: MetaSubspace,
    bank: ExpertBank,
    router: RouterState,
    scaling_mode: ScalingMode,
    n_tasks: usize,
    use_full_seed: bool,
}

/// The routing outcome for one token, enough to replay the merge.
#[derive(Debug, Clone, PartialEq)]
pub struct GatingDecision {
    /// Selected expert indices, ascending.
    pub selected: Vec<usize>,
    /// Dense gate vector; zero outside the selection, sums to 1 on it.
    pub gates: Vec<f64>,
    /// Dense per-expert scaling factors.
    pub scales: Vec<f64>,
}

/// Tape handles for a staged layer: parameters, the frozen base, and the
/// materialized (transposed) expert deltas shared by every token.
#[derive(Debug, Clone)]
pub struct LayerNodes {
    pub subspace: SubspaceNodes,
    pub kernels: BankNodes,
    pub w_r: NodeId,
    pub task_proj: Option<NodeId>,
    w0_t: NodeId,
    w_r_t: NodeId,
    task_proj_t: Option<NodeId>,
    expert_wt: Vec<NodeId>,
}

/// Dimension-aware scaling factor for one expert of a layer.
pub fn scaling_factor(mode: ScalingMode, scale: usize, d_out: usize, n_tasks: usize) -> f64 {
    match mode {
        ScalingMode::SliceHeightOverT => d_out.div_ceil(scale) as f64 / n_tasks as f64,
        ScalingMode::KernelOverT => scale as f64 / n_tasks as f64,
        ScalingMode::None => 1.0,
    }
}

impl EptLayer {
    /// Wrap a frozen weight. The subspace capacity is sized by the smallest
    /// kernel, which needs the largest slice: `H_max = ceil(d_out / s_min)`,
    /// `W_max = ceil(d_in / s_min)`.
    pub fn new(w0: Matrix, cfg: &LayerConfig, seed: u64) -> Result<Self> {
        if cfg.n_tasks == 0 {
            return Err(EptError::Parameter("EptLayer: need at least one task".into()));
        }
        let (d_out, d_in) = w0.shape();
        let bank = init_bank(&cfg.scales, d_out, d_in)?;
        let s_min = bank.min_scale();
        let (h_max, w_max) = target_slice_dims(d_out, d_in, s_min);
        let subspace = init_subspace_with_init(
            h_max,
            w_max,
            cfg.rank,
            cfg.gaussian_std,
            seed,
            cfg.gaussian_init_a,
        )?;
        let router = RouterState::new(
            bank.len(),
            d_in,
            cfg.top_k,
            cfg.tau_gate,
            cfg.conditioning,
            cfg.task_embed_dim,
        )?;
        Ok(EptLayer {
            w0,
            subspace,
            bank,
            router,
            scaling_mode: cfg.scaling_mode,
            n_tasks: cfg.n_tasks,
            use_full_seed: cfg.use_full_seed,
        })
    }

    pub fn d_out(&self) -> usize {
        self.w0.rows()
    }

    pub fn d_in(&self) -> usize {
        self.w0.cols()
    }

    pub fn n_experts(&self) -> usize {
        self.bank.len()
    }

    pub fn n_tasks(&self) -> usize {
        self.n_tasks
    }

    pub fn w0(&self) -> &Matrix {
        &self.w0
    }

    pub fn subspace(&self) -> &MetaSubspace {
        &self.subspace
    }

    pub fn subspace_mut(&mut self) -> &mut MetaSubspace {
        &mut self.subspace
    }

    pub fn bank(&self) -> &ExpertBank {
        &self.bank
    }

    pub fn bank_mut(&mut self) -> &mut ExpertBank {
        &mut self.bank
    }

    pub fn router(&self) -> &RouterState {
        &self.router
    }

    pub fn router_mut(&mut self) -> &mut RouterState {
        &mut self.router
    }

    pub fn scaling_mode(&self) -> ScalingMode {
        self.scaling_mode
    }

    pub fn uses_full_seed(&self) -> bool {
        self.use_full_seed
    }

    /// Scaling factor for expert `i` under this layer's mode.
    pub fn expert_scale(&self, i: usize) -> f64 {
        scaling_factor(self.scaling_mode, self.bank.expert(i).scale(), self.d_out(), self.n_tasks)
    }

    fn all_scales(&self) -> Vec<f64> {
        (0..self.bank.len()).map(|i| self.expert_scale(i)).collect()
    }

    /// Materialize expert `i`'s weight delta from the current parameters.
    pub fn expert_delta(&self, i: usize) -> Result<Matrix> {
        if self.use_full_seed {
            project_expert_full_seed(&self.subspace, self.bank.expert(i), self.d_out(), self.d_in())
        } else {
            project_expert(&self.subspace, self.bank.expert(i), self.d_out(), self.d_in())
        }
    }

    /// Names and shapes of every trainable tensor, in staging order:
    /// the two subspace factors, each kernel, the router weight, and the
    /// task projection when present. The frozen base never appears.
    pub fn trainable_parameters(&self) -> Vec<(String, &Matrix)> {
        let mut out: Vec<(String, &Matrix)> = vec![
            ("subspace.b".into(), self.subspace.factor_b()),
            ("subspace.a".into(), self.subspace.factor_a()),
        ];
        for (i, e) in self.bank.experts().iter().enumerate() {
            out.push((format!("kernel.{i}"), e.kernel()));
        }
        out.push(("router.w_r".into(), self.router.weights()));
        if let Some(p) = self.router.task_proj() {
            out.push(("router.p_e".into(), p));
        }
        out
    }

    /// Mutable access in the exact order of [`EptLayer::trainable_parameters`].
    pub fn trainable_parameters_mut(&mut self) -> Vec<&mut Matrix> {
        let n = self.bank.len();
        let mut out: Vec<*mut Matrix> = Vec::with_capacity(n + 4);
        out.push(self.subspace.factor_b_mut() as *mut Matrix);
        out.push(self.subspace.factor_a_mut() as *mut Matrix);
        for i in 0..n {
            out.push(self.bank.expert_mut(i).kernel_mut() as *mut Matrix);
        }
        out.push(self.router.weights_mut() as *mut Matrix);
        if let Some(p) = self.router.task_proj_mut() {
            out.push(p as *mut Matrix);
        }
        // Each pointer refers to a distinct field, collected one at a time.
        out.into_iter().map(|p| unsafe { &mut *p }).collect()
    }

    /// Register parameters and materialize per-step constants on a tape.
    pub fn stage(&self, tape: &mut Tape) -> Result<LayerNodes> {
        let subspace = self.subspace.stage(tape);
        let kernels = self.bank.stage(tape);
        let w_r = tape.param(self.router.weights().clone());
        let task_proj = self.router.task_proj().map(|p| tape.param(p.clone()));

        let w0 = tape.constant(self.w0.clone());
        let w0_t = tape.transpose(w0);
        let w_r_t = tape.transpose(w_r);
        let task_proj_t = task_proj.map(|p| tape.transpose(p));
        let mut expert_wt = Vec::with_capacity(self.bank.len());
        for i in 0..self.bank.len() {
            let w_i = self.bank.project_on_tape(
                tape,
                &self.subspace,
                subspace,
                &kernels,
                i,
                self.use_full_seed,
            )?;
            expert_wt.push(tape.transpose(w_i));
        }
        Ok(LayerNodes {
            subspace,
            kernels,
            w_r,
            task_proj,
            w0_t,
            w_r_t,
            task_proj_t,
            expert_wt,
        })
    }

    /// Frozen-path product `x W_0^T` for a staged layer; the adapters-off
    /// forward. Accepts a row or a whole seq x d_in matrix.
    pub fn base_forward_on_tape(
        &self,
        tape: &mut Tape,
        nodes: &LayerNodes,
        x: NodeId,
    ) -> Result<NodeId> {
        tape.matmul(x, nodes.w0_t)
    }

    /// Adapted forward for one token held as a 1 x d_in row node:
    /// `y = W_0 x + sum_{i in P} G_i * scale_i * (W_i x)`.
    ///
    /// `task_embedding` must be a 1 x d_e row node under task conditioning.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        nodes: &LayerNodes,
        x: NodeId,
        task_embedding: Option<NodeId>,
    ) -> Result<(NodeId, GatingDecision)> {
        if tape.value(x).shape() != (1, self.d_in()) {
            return Err(EptError::Shape(format!(
                "adapter forward: token is {}x{}, layer expects 1x{}",
                tape.value(x).rows(),
                tape.value(x).cols(),
                self.d_in()
            )));
        }
        let x_eff = match self.router.conditioning() {
            Conditioning::TokenOnly => x,
            Conditioning::TokenPlusTask => {
                let e = task_embedding.ok_or_else(|| {
                    EptError::Contract(
                        "adapter forward: task conditioning requires a task embedding node".into(),
                    )
                })?;
                let proj_t = nodes.task_proj_t.expect("projection staged under task conditioning");
                let shifted = tape.matmul(e, proj_t)?;
                tape.add(x, shifted)?
            }
        };
        let logits = tape.matmul(x_eff, nodes.w_r_t)?;
        let selected = select_topk(tape.value(logits).row(0), self.router.k())?;
        let coords: Vec<(usize, usize)> = selected.iter().map(|&i| (0, i)).collect();
        let gathered = tape.gather(logits, coords)?;
        let gate_row = tape.softmax_rows(gathered, self.router.tau_g())?;

        let scales = self.all_scales();
        let mut y = tape.matmul(x, nodes.w0_t)?;
        for (j, &i) in selected.iter().enumerate() {
            let delta = tape.matmul(x, nodes.expert_wt[i])?;
            let gate = tape.gather(gate_row, vec![(0, j)])?;
            let gated = tape.mul_scalar(delta, gate)?;
            let scaled = tape.scale(gated, scales[i]);
            y = tape.add(y, scaled)?;
        }

        let mut gates = vec![0.0; self.bank.len()];
        for (j, &i) in selected.iter().enumerate() {
            gates[i] = tape.value(gate_row).get(0, j);
        }
        Ok((y, GatingDecision { selected, gates, scales }))
    }

    /// Pure adapted forward for one token. Runs the same tape path the
    /// training loop uses, on a throwaway tape.
    pub fn adapter_forward(
        &self,
        x: &[f64],
        task: usize,
        task_embedding: Option<&[f64]>,
    ) -> Result<(Vec<f64>, GatingDecision)> {
        if task >= self.n_tasks {
            return Err(EptError::Index(format!(
                "adapter forward: task {task} out of range for {} tasks",
                self.n_tasks
            )));
        }
        if x.len() != self.d_in() {
            return Err(EptError::Shape(format!(
                "adapter forward: token has {} entries, layer expects {}",
                x.len(),
                self.d_in()
            )));
        }
        let mut tape = Tape::new();
        let nodes = self.stage(&mut tape)?;
        let x_node = tape.constant(Matrix::row_vector(x));
        let e_node = match task_embedding {
            Some(e) => Some(tape.constant(Matrix::row_vector(e))),
            None => None,
        };
        let (y, decision) = self.forward_on_tape(&mut tape, &nodes, x_node, e_node)?;
        Ok((tape.value(y).row(0).to_vec(), decision))
    }

    /// Routing decision for one token without applying the deltas.
    pub fn route_token(&self, x: &[f64], task_embedding: Option<&[f64]>) -> Result<GatingDecision> {
        let logits = route_logits(&self.router, x, task_embedding)?;
        let selected = select_topk(&logits, self.router.k())?;
        let gates = gate_scores(&logits, &selected, self.router.tau_g())?;
        Ok(GatingDecision { selected, gates, scales: self.all_scales() })
    }

    /// Dense merged weight for a fixed gating decision:
    /// `W = W_0 + sum_{i in P} G_i * scale_i * W_i`.
    pub fn merged_weight(&self, decision: &GatingDecision) -> Result<Matrix> {
        let mut w = self.w0.clone();
        for &i in &decision.selected {
            if i >= self.bank.len() {
                return Err(EptError::Index(format!(
                    "merged_weight: expert {i} out of range for bank of {}",
                    self.bank.len()
                )));
            }
            let delta = self.expert_delta(i)?;
            w.add_scaled(&delta, decision.gates[i] * decision.scales[i])?;
        }
        Ok(w)
    }
}
