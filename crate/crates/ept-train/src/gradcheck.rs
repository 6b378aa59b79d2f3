//! End-to-end gradient verification: analytic gradients of the joint
//! objective against central finite differences, over every trainable
//! tensor of a (miniature) model.

use ept_core::numeric::{finite_diff_check, Matrix, Tape};
use ept_core::tasks::contrastive_term_on_tape;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::backbone::EptModel;
use crate::config::{derive_seed, EptConfig};
use crate::data::{batch_for_step, make_tasks, TaskDataset};
use crate::error::Result;

/// Batch-mean joint loss for the model's current parameters.
fn batch_loss(model: &EptModel, datasets: &[TaskDataset], batch: &[(usize, usize)]) -> Result<f64> {
    let cfg = model.cfg();
    let mut total = 0.0;
    for &(task, idx) in batch {
        let ds = &datasets[task];
        let mut tape = Tape::new();
        let staged = model.stage(&mut tape)?;
        let fwd = model.forward_sample(&mut tape, &staged, &ds.train.tokens[idx], task, true)?;
        let l_gen = tape.cross_entropy(fwd.logits, ds.train.labels[idx])?;
        let l_con = contrastive_term_on_tape(
            &mut tape,
            model.task_table(),
            staged.table_node,
            fwd.pooled_feature,
            task,
        )?;
        total += tape.scalar_value(l_gen) + cfg.lambda_con * tape.scalar_value(l_con);
    }
    Ok(total / batch.len() as f64)
}

/// Analytic batch gradients via the tape, aligned with `model.params()`.
fn batch_gradients(
    model: &EptModel,
    datasets: &[TaskDataset],
    batch: &[(usize, usize)],
) -> Result<Vec<Matrix>> {
    let cfg = model.cfg();
    let inv = 1.0 / batch.len() as f64;
    let mut grads: Vec<Matrix> = model
        .params()
        .iter()
        .map(|p| Matrix::zeros(p.rows(), p.cols()))
        .collect();
    for &(task, idx) in batch {
        let ds = &datasets[task];
        let mut tape = Tape::new();
        let staged = model.stage(&mut tape)?;
        let fwd = model.forward_sample(&mut tape, &staged, &ds.train.tokens[idx], task, true)?;
        let l_gen = tape.cross_entropy(fwd.logits, ds.train.labels[idx])?;
        let l_con = contrastive_term_on_tape(
            &mut tape,
            model.task_table(),
            staged.table_node,
            fwd.pooled_feature,
            task,
        )?;
        let weighted = tape.scale(l_con, cfg.lambda_con);
        let total = tape.add(l_gen, weighted)?;
        let root = tape.scale(total, inv);
        tape.backward(root)?;
        for (slot, &node) in grads.iter_mut().zip(&staged.param_nodes) {
            if let Some(g) = tape.grad(node) {
                slot.add_scaled(g, 1.0).expect("gradient shapes match");
            }
        }
    }
    Ok(grads)
}

/// Run the end-to-end check on the given configuration: randomize every
/// trainable tensor (so no code path sits at a trivial zero), take one
/// balanced batch, and compare the tape's gradients of the joint loss with
/// central finite differences at step `h`. Returns the max relative error.
///
/// The miniature config keeps k equal to the expert count, so top-k
/// selection has no decision boundary for the probes to cross.
pub fn end_to_end_gradcheck(cfg: &EptConfig, h: f64) -> Result<f64> {
    cfg.validate()?;
    let mut model = EptModel::new(cfg.clone())?;
    // Perturb all trainables well away from the zero-init manifold. The
    // perturbation is deliberately large: weakly coupled entries would have
    // gradients small enough for finite-difference cancellation noise
    // (~eps*|loss|/2h) to dominate their relative error.
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "gradcheck", 0));
    let normal = Normal::new(0.0, 0.5).expect("positive std");
    {
        let mut params = model.params_mut();
        for p in params.iter_mut() {
            for j in 0..p.len() {
                p.as_mut_slice()[j] += normal.sample(&mut rng);
            }
        }
    }
    let datasets = make_tasks(cfg)?;
    let batch = batch_for_step(cfg, &datasets, 1)?;

    let analytic = batch_gradients(&model, &datasets, &batch)?;
    let params: Vec<Matrix> = model.params().into_iter().cloned().collect();

    let model_ref = &model;
    let datasets_ref = &datasets;
    let batch_ref = &batch;
    finite_diff_check(
        move |ps: &[Matrix]| {
            let mut probe = model_ref.clone();
            {
                let mut slots = probe.params_mut();
                for (slot, value) in slots.iter_mut().zip(ps) {
                    **slot = value.clone();
                }
            }
            batch_loss(&probe, datasets_ref, batch_ref).map_err(|e| {
                ept_core::EptError::Numeric(format!("gradcheck probe failed: {e}"))
            })
        },
        &params,
        &analytic,
        h,
    )
    .map_err(crate::error::TrainError::Core)
}
