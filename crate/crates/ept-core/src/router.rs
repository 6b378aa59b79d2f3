//! Token-conditioned top-k gating and routing statistics.
//!
//! Selection is a pure function of the logits: ties break to the lowest
//! index and the temperature plays no part in who gets picked, only in how
//! the gate mass is shared among the picked. Router weights start at zero
//! so routing begins unbiased.

use crate::error::{EptError, Result};
use crate::numeric::{softmax_temp, Matrix};
use std::fmt::Write as _;

/// How the router logits are conditioned.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Conditioning {
    /// `r = W_r x` (the default, literal reading).
    TokenOnly,
    /// `r = W_r (x + P_e e_t)` with a trainable projection of the task
    /// embedding added to the token.
    TokenPlusTask,
}

/// Trainable router state for one adapted layer.
#[derive(Debug, Clone)]
pub struct RouterState {
    w_r: Matrix,
    k: usize,
    tau_g: f64,
    conditioning: Conditioning,
    task_proj: Option<Matrix>,
}

impl RouterState {
    /// Zero-initialized router over `n_experts` logits. With task
    /// conditioning a zero-filled `d_in x d_e` projection is allocated.
    pub fn new(
        n_experts: usize,
        d_in: usize,
        k: usize,
        tau_g: f64,
        conditioning: Conditioning,
        d_e: usize,
    ) -> Result<Self> {
        if n_experts == 0 || d_in == 0 {
            return Err(EptError::Parameter("router: empty expert set or input".into()));
        }
        if k == 0 || k > n_experts {
            return Err(EptError::Parameter(format!(
                "router: k must be in 1..={n_experts}, got {k}"
            )));
        }
        if !(tau_g > 0.0) {
            return Err(EptError::Parameter(format!(
                "router: gating temperature must be > 0, got {tau_g}"
            )));
        }
        let task_proj = match conditioning {
            Conditioning::TokenOnly => None,
            Conditioning::TokenPlusTask => Some(Matrix::zeros(d_in, d_e)),
        };
        Ok(RouterState {
            w_r: Matrix::zeros(n_experts, d_in),
            k,
            tau_g,
            conditioning,
            task_proj,
        })
    }

    pub fn n_experts(&self) -> usize {
        self.w_r.rows()
    }

    pub fn d_in(&self) -> usize {
        self.w_r.cols()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Override the selection count (the dense-gating ablation sets k = N).
    pub fn set_k(&mut self, k: usize) -> Result<()> {
        if k == 0 || k > self.n_experts() {
            return Err(EptError::Parameter(format!(
                "router: k must be in 1..={}, got {k}",
                self.n_experts()
            )));
        }
        self.k = k;
        Ok(())
    }

    pub fn tau_g(&self) -> f64 {
        self.tau_g
    }

    pub fn conditioning(&self) -> Conditioning {
        self.conditioning
    }

    pub fn weights(&self) -> &Matrix {
        &self.w_r
    }

    pub fn weights_mut(&mut self) -> &mut Matrix {
        &mut self.w_r
    }

    pub fn task_proj(&self) -> Option<&Matrix> {
        self.task_proj.as_ref()
    }

    pub fn task_proj_mut(&mut self) -> Option<&mut Matrix> {
        self.task_proj.as_mut()
    }
}

/// Router logits for one token: `W_r x`, or `W_r (x + P_e e_t)` under task
/// conditioning (where `e_t` is then required).
pub fn route_logits(rs: &RouterState, x: &[f64], e_t: Option<&[f64]>) -> Result<Vec<f64>> {
    if x.len() != rs.d_in() {
        return Err(EptError::Shape(format!(
            "route_logits: token has {} entries, router expects {}",
            x.len(),
            rs.d_in()
        )));
    }
    let effective: Vec<f64> = match rs.conditioning {
        Conditioning::TokenOnly => x.to_vec(),
        Conditioning::TokenPlusTask => {
            let proj = rs.task_proj.as_ref().expect("projection exists under task conditioning");
            let e = e_t.ok_or_else(|| {
                EptError::Contract("route_logits: task conditioning requires a task vector".into())
            })?;
            if e.len() != proj.cols() {
                return Err(EptError::Shape(format!(
                    "route_logits: task vector has {} entries, projection expects {}",
                    e.len(),
                    proj.cols()
                )));
            }
            (0..rs.d_in())
                .map(|i| {
                    let mut acc = x[i];
                    for (j, ev) in e.iter().enumerate() {
                        acc += proj.get(i, j) * ev;
                    }
                    acc
                })
                .collect()
        }
    };
    Ok((0..rs.n_experts())
        .map(|row| {
            let w = rs.w_r.row(row);
            let mut acc = 0.0;
            for (wi, xi) in w.iter().zip(&effective) {
                acc += wi * xi;
            }
            acc
        })
        .collect())
}

/// Indices of the k largest logits, ascending index order, ties broken to
/// the lowest index.
pub fn select_topk(logits: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > logits.len() {
        return Err(EptError::Parameter(format!(
            "select_topk: k must be in 1..={}, got {k}",
            logits.len()
        )));
    }
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    let mut picked: Vec<usize> = order[..k].to_vec();
    picked.sort_unstable();
    Ok(picked)
}

/// Temperature softmax over the selected logits, scattered back into a
/// dense length-N vector; entries outside the selection are exactly zero.
pub fn gate_scores(logits: &[f64], selected: &[usize], tau_g: f64) -> Result<Vec<f64>> {
    if selected.is_empty() {
        return Err(EptError::Contract("gate_scores: empty selection".into()));
    }
    for &i in selected {
        if i >= logits.len() {
            return Err(EptError::Index(format!(
                "gate_scores: expert {i} out of range for {} logits",
                logits.len()
            )));
        }
    }
    let restricted: Vec<f64> = selected.iter().map(|&i| logits[i]).collect();
    let probs = softmax_temp(&restricted, tau_g)?;
    let mut gates = vec![0.0; logits.len()];
    for (slot, p) in selected.iter().zip(probs) {
        gates[*slot] = p;
    }
    Ok(gates)
}

/// Per-(task, expert) selection counts and gate mass accumulated over a
/// routed token stream.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingStats {
    n_tasks: usize,
    n_experts: usize,
    k: usize,
    counts: Vec<u64>,
    gate_mass: Vec<f64>,
    tokens: Vec<u64>,
}

impl RoutingStats {
    pub fn new(n_tasks: usize, n_experts: usize, k: usize) -> Self {
        RoutingStats {
            n_tasks,
            n_experts,
            k,
            counts: vec![0; n_tasks * n_experts],
            gate_mass: vec![0.0; n_tasks * n_experts],
            tokens: vec![0; n_tasks],
        }
    }

    pub fn n_tasks(&self) -> usize {
        self.n_tasks
    }

    pub fn n_experts(&self) -> usize {
        self.n_experts
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn tokens(&self, task: usize) -> u64 {
        self.tokens[task]
    }

    pub fn count(&self, task: usize, expert: usize) -> u64 {
        self.counts[task * self.n_experts + expert]
    }

    pub fn gate_mass(&self, task: usize, expert: usize) -> f64 {
        self.gate_mass[task * self.n_experts + expert]
    }

    /// Raw accumulator views, for persistence.
    pub fn parts(&self) -> (&[u64], &[f64], &[u64]) {
        (&self.counts, &self.gate_mass, &self.tokens)
    }

    /// Rebuild from persisted accumulators.
    pub fn from_parts(
        n_tasks: usize,
        n_experts: usize,
        k: usize,
        counts: Vec<u64>,
        gate_mass: Vec<f64>,
        tokens: Vec<u64>,
    ) -> Result<Self> {
        if counts.len() != n_tasks * n_experts
            || gate_mass.len() != n_tasks * n_experts
            || tokens.len() != n_tasks
        {
            return Err(EptError::Shape(format!(
                "routing stats parts disagree: {} counts, {} masses, {} token rows for {n_tasks}x{n_experts}",
                counts.len(),
                gate_mass.len(),
                tokens.len()
            )));
        }
        Ok(RoutingStats { n_tasks, n_experts, k, counts, gate_mass, tokens })
    }

    /// Mean gate vector observed for one task (sums to 1 over experts).
    pub fn mean_gates(&self, task: usize) -> Result<Vec<f64>> {
        if task >= self.n_tasks {
            return Err(EptError::Contract(format!("mean_gates: unknown task {task}")));
        }
        let t = self.tokens[task];
        if t == 0 {
            return Err(EptError::Contract(format!("mean_gates: no tokens recorded for task {task}")));
        }
        Ok((0..self.n_experts)
            .map(|e| self.gate_mass[task * self.n_experts + e] / t as f64)
            .collect())
    }
}

/// Record one routed token: bump selection counts for the chosen experts,
/// add their gates to the task's mass, count the token.
pub fn record_routing(
    stats: &mut RoutingStats,
    task: usize,
    selected: &[usize],
    gates: &[f64],
) -> Result<()> {
    if task >= stats.n_tasks {
        return Err(EptError::Contract(format!(
            "record_routing: unknown task {task} (have {})",
            stats.n_tasks
        )));
    }
    if gates.len() != stats.n_experts {
        return Err(EptError::Shape(format!(
            "record_routing: {} gates for {} experts",
            gates.len(),
            stats.n_experts
        )));
    }
    for &i in selected {
        if i >= stats.n_experts {
            return Err(EptError::Index(format!("record_routing: expert {i} out of range")));
        }
        stats.counts[task * stats.n_experts + i] += 1;
        stats.gate_mass[task * stats.n_experts + i] += gates[i];
    }
    stats.tokens[task] += 1;
    Ok(())
}

/// One row of the routing report.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingRow {
    pub task: usize,
    pub expert: usize,
    pub count: u64,
    pub fraction: f64,
}

/// Selection fractions per (task, expert), sorted by (task, expert).
/// `fraction = count / (tokens * k)`, so fractions sum to 1 per task.
/// Tasks with no recorded tokens are omitted; empty stats give an empty
/// table.
pub fn routing_report(stats: &RoutingStats) -> Vec<RoutingRow> {
    let mut rows = Vec::new();
    for task in 0..stats.n_tasks {
        let tokens = stats.tokens[task];
        if tokens == 0 {
            continue;
        }
        let denom = (tokens * stats.k as u64) as f64;
        for expert in 0..stats.n_experts {
            rows.push(RoutingRow {
                task,
                expert,
                count: stats.count(task, expert),
                fraction: stats.count(task, expert) as f64 / denom,
            });
        }
    }
    rows
}

/// Routing report as CSV: `task,expert,count,fraction`, LF line endings.
pub fn routing_report_csv(stats: &RoutingStats) -> String {
    let mut out = String::from("task,expert,count,fraction\n");
    for row in routing_report(stats) {
        writeln!(out, "{},{},{},{}", row.task, row.expert, row.count, row.fraction)
            .expect("string write");
    }
    out
}
