//! Merged-weight export: fold the gated pyramid deltas into each frozen
//! base and emit a dense-weights-only checkpoint.

use ept_core::adapter::GatingDecision;
use ept_core::numeric::Matrix;
use ept_core::router::RoutingStats;

use crate::backbone::{EptModel, SubLayer, SUBLAYER_NAMES};
use crate::error::{Result, TrainError};

/// Which gate vector to merge with.
#[derive(Debug, Clone, PartialEq)]
pub enum GatePolicy {
    /// Per task, the mean gate vector observed in the routing stats; emits
    /// one weight set per task.
    PerTaskMean,
    /// One fixed dense gate vector for every layer and task.
    Fixed(Vec<f64>),
}

/// Build a decision for a dense gate vector over a layer's experts.
fn decision_for_gates(layer: &ept_core::adapter::EptLayer, gates: &[f64]) -> Result<GatingDecision> {
    if gates.len() != layer.n_experts() {
        return Err(TrainError::Config(format!(
            "merge: {} gates for {} experts",
            gates.len(),
            layer.n_experts()
        )));
    }
    if gates.iter().any(|g| !g.is_finite() || *g < 0.0) {
        return Err(TrainError::Config("merge: gates must be finite and >= 0".into()));
    }
    let selected: Vec<usize> = (0..gates.len()).filter(|&i| gates[i] != 0.0).collect();
    if selected.is_empty() {
        return Err(TrainError::Config("merge: gate vector is all zero".into()));
    }
    Ok(GatingDecision {
        selected,
        gates: gates.to_vec(),
        scales: (0..layer.n_experts()).map(|i| layer.expert_scale(i)).collect(),
    })
}

/// Dense tensors of the merged model. Frozen sub-layers, the embedding and
/// the head appear once; adapted sub-layers appear per task under the
/// per-task-mean policy, or once under a fixed policy.
pub fn export_merged(
    model: &EptModel,
    routing: Option<&RoutingStats>,
    policy: &GatePolicy,
) -> Result<Vec<(String, Matrix)>> {
    let mut out: Vec<(String, Matrix)> = Vec::new();
    out.push(("embedding".into(), model.embedding().clone()));
    out.push(("head".into(), model.head().clone()));

    let mean_gates: Option<Vec<Vec<f64>>> = match policy {
        GatePolicy::PerTaskMean => {
            let stats = routing.ok_or_else(|| {
                TrainError::Core(ept_core::EptError::Contract(
                    "merge: per_task_mean policy requires routing stats".into(),
                ))
            })?;
            let per_task: ept_core::Result<Vec<Vec<f64>>> =
                (0..model.cfg().n_tasks()).map(|t| stats.mean_gates(t)).collect();
            Some(per_task.map_err(TrainError::Core)?)
        }
        GatePolicy::Fixed(_) => None,
    };

    for (b, block) in model.blocks().iter().enumerate() {
        for (i, sub) in block.sublayers.iter().enumerate() {
            let path = format!("block{b}.{}", SUBLAYER_NAMES[i]);
            match sub {
                SubLayer::Frozen(w) => out.push((format!("{path}.weight"), w.clone())),
                SubLayer::Adapted(layer) => match policy {
                    GatePolicy::Fixed(gates) => {
                        let decision = decision_for_gates(layer, gates)?;
                        let merged = layer.merged_weight(&decision).map_err(TrainError::Core)?;
                        out.push((format!("{path}.weight"), merged));
                    }
                    GatePolicy::PerTaskMean => {
                        for (t, gates) in mean_gates.as_ref().expect("stats checked").iter().enumerate() {
                            let decision = decision_for_gates(layer, gates)?;
                            let merged = layer.merged_weight(&decision).map_err(TrainError::Core)?;
                            out.push((format!("task{t}.{path}.weight"), merged));
                        }
                    }
                },
            }
        }
    }
    Ok(out)
}

/// Forward one sample through a per-task merged tensor set; the dense
/// counterpart of the adapted forward, for path-equivalence checks.
pub fn merged_forward(
    model: &EptModel,
    tensors: &[(String, Matrix)],
    tokens: &[u32],
    task: usize,
) -> Result<Vec<f64>> {
    let lookup = |name: &str| -> Result<&Matrix> {
        tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, m)| m)
            .ok_or_else(|| TrainError::Manifest(format!("merged export missing {name}")))
    };
    let weight = |b: usize, i: usize| -> Result<&Matrix> {
        let path = format!("block{b}.{}.weight", SUBLAYER_NAMES[i]);
        let per_task = format!("task{task}.{path}");
        if tensors.iter().any(|(n, _)| *n == per_task) {
            lookup(&per_task)
        } else {
            lookup(&path)
        }
    };

    let cfg = model.cfg();
    let d = cfg.d_model;
    let embed = lookup("embedding")?;
    let mut x = Matrix::from_fn(tokens.len(), d, |r, c| embed.get(tokens[r] as usize, c));
    let linear = |x: &Matrix, w: &Matrix| -> Result<Matrix> {
        ept_core::numeric::matmul(x, &w.transposed()).map_err(TrainError::Core)
    };
    let scale = 1.0 / (d as f64).sqrt();
    for b in 0..model.blocks().len() {
        let q = linear(&x, weight(b, 0)?)?;
        let k = linear(&x, weight(b, 1)?)?;
        let v = linear(&x, weight(b, 2)?)?;
        let scores = ept_core::numeric::matmul(&q, &k.transposed())
            .map_err(TrainError::Core)?
            .scale(scale);
        let mut attn = Matrix::zeros(scores.rows(), scores.cols());
        for r in 0..scores.rows() {
            let p = ept_core::numeric::softmax_temp(scores.row(r), 1.0).map_err(TrainError::Core)?;
            attn.row_mut(r).copy_from_slice(&p);
        }
        let ctx = ept_core::numeric::matmul(&attn, &v).map_err(TrainError::Core)?;
        let o = linear(&ctx, weight(b, 3)?)?;
        x = x.add(&o).map_err(TrainError::Core)?;
        let up = linear(&x, weight(b, 4)?)?.map(f64::tanh);
        let down = linear(&up, weight(b, 5)?)?;
        x = x.add(&down).map_err(TrainError::Core)?;
    }
    let inv = 1.0 / x.rows() as f64;
    let mean = Matrix::from_fn(1, d, |_, c| {
        let mut acc = 0.0;
        for r in 0..x.rows() {
            acc += x.get(r, c);
        }
        acc * inv
    });
    let head = lookup("head")?;
    let logits = linear(&mean, head)?;
    Ok(logits.row(0).to_vec())
}
