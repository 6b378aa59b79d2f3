//! The training loop: balanced batches, joint generation + contrastive
//! objective, per-sample reverse sweeps with a fixed-order batch reduction,
//! AdamW updates on the warmup/decay schedule.
//!
//! Every random stream is derived statelessly from (seed, purpose, step), so
//! a resumed run replays exactly the stream an uninterrupted run would see.

use ept_core::numeric::{Matrix, Tape};
use ept_core::router::{record_routing, RoutingStats};
use ept_core::tasks::contrastive_term_on_tape;
use serde::{Deserialize, Serialize};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

use crate::backbone::EptModel;
use crate::config::EptConfig;
use crate::data::{batch_for_step, make_tasks, TaskDataset};
use crate::error::{Result, TrainError};
use crate::optim::{optimizer_step, AdamWParams, AdamWState};
use crate::schedule::{lr_at, LrSchedule};

/// One metrics line: a per-step loss record or a per-epoch accuracy record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MetricLine {
    Step { step: u64, lr: f64, l_gen: f64, l_con: f64, l_total: f64 },
    EpochEval { step: u64, epoch: u64, task: usize, accuracy: f64 },
}

/// Metrics as JSON lines, one record per line.
pub fn metrics_to_jsonl(metrics: &[MetricLine]) -> String {
    let mut out = String::new();
    for m in metrics {
        out.push_str(&serde_json::to_string(m).expect("metric serializes"));
        out.push('\n');
    }
    out
}

/// Mean cross entropy over a batch of single-token targets.
pub fn generation_loss(logits: &[Vec<f64>], targets: &[usize]) -> Result<f64> {
    if logits.is_empty() || logits.len() != targets.len() {
        return Err(TrainError::Core(ept_core::EptError::Contract(format!(
            "generation_loss: {} logit rows vs {} targets",
            logits.len(),
            targets.len()
        ))));
    }
    let mut total = 0.0;
    for (row, &t) in logits.iter().zip(targets) {
        total += ept_core::numeric::cross_entropy(row, t)?;
    }
    Ok(total / logits.len() as f64)
}

/// Joint objective: `l_gen + lambda * l_con`.
pub fn total_loss(l_gen: f64, l_con: f64, lambda: f64) -> Result<f64> {
    if lambda < 0.0 {
        return Err(TrainError::Config(format!("total_loss: lambda must be >= 0, got {lambda}")));
    }
    Ok(l_gen + lambda * l_con)
}

/// Extra knobs for partial or resumed runs.
#[derive(Debug, Clone, Copy, Default)]
pub struct TrainOptions {
    /// Stop after this step (1-based, inclusive); None runs to the schedule's
    /// end.
    pub stop_after: Option<u64>,
}

/// Everything a finished (or paused) run hands back.
pub struct TrainRun {
    pub model: EptModel,
    pub opt_state: AdamWState,
    /// Records for the steps this call executed.
    pub metrics: Vec<MetricLine>,
    /// Step the run stopped at.
    pub step: u64,
    /// Routing statistics of the final model over the eval split.
    pub final_routing: RoutingStats,
    pub datasets: Vec<TaskDataset>,
}

struct SampleResult {
    l_gen: f64,
    l_con: f64,
    grads: Vec<Option<Matrix>>,
}

fn run_sample(
    model: &EptModel,
    tokens: &[u32],
    task: usize,
    label: usize,
    inv_batch: f64,
) -> Result<SampleResult> {
    let cfg = model.cfg();
    let mut tape = Tape::new();
    let staged = model.stage(&mut tape)?;
    let fwd = model.forward_sample(&mut tape, &staged, tokens, task, true)?;
    let l_gen = tape.cross_entropy(fwd.logits, label)?;
    let l_con = contrastive_term_on_tape(
        &mut tape,
        model.task_table(),
        staged.table_node,
        fwd.pooled_feature,
        task,
    )?;
    let weighted_con = tape.scale(l_con, cfg.lambda_con);
    let total = tape.add(l_gen, weighted_con)?;
    let root = tape.scale(total, inv_batch);
    tape.backward(root)?;
    Ok(SampleResult {
        l_gen: tape.scalar_value(l_gen),
        l_con: tape.scalar_value(l_con),
        grads: staged
            .param_nodes
            .iter()
            .map(|&n| tape.grad(n).cloned())
            .collect(),
    })
}

fn batch_results(
    model: &EptModel,
    datasets: &[TaskDataset],
    batch: &[(usize, usize)],
) -> Result<Vec<SampleResult>> {
    let inv = 1.0 / batch.len() as f64;
    let work = |&(task, idx): &(usize, usize)| {
        let ds = &datasets[task];
        run_sample(model, &ds.train.tokens[idx], task, ds.train.labels[idx], inv)
    };
    #[cfg(feature = "parallel")]
    {
        batch.par_iter().map(work).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        batch.iter().map(work).collect()
    }
}

/// Train a fresh model for the full configured schedule.
pub fn train_loop(cfg: &EptConfig) -> Result<TrainRun> {
    let model = EptModel::new(cfg.clone())?;
    let opt = AdamWState::new(&model.params());
    train_from(model, opt, TrainOptions::default())
}

/// Continue training a model (fresh or restored) from its optimizer state.
/// The starting step is the optimizer's step counter.
pub fn train_from(
    mut model: EptModel,
    mut opt_state: AdamWState,
    options: TrainOptions,
) -> Result<TrainRun> {
    let cfg = model.cfg().clone();
    let datasets = make_tasks(&cfg)?;
    let schedule = LrSchedule::new(
        cfg.learning_rate,
        cfg.warmup_steps as u64,
        cfg.total_steps() as u64,
    )?;
    let steps_per_epoch = cfg.steps_per_epoch() as u64;
    let last = options
        .stop_after
        .unwrap_or(schedule.total)
        .min(schedule.total);
    let hp = AdamWParams { weight_decay: cfg.weight_decay, ..AdamWParams::default() };

    let mut metrics = Vec::new();
    let mut step = opt_state.step;
    while step < last {
        let next_step = step + 1;
        let batch = batch_for_step(&cfg, &datasets, next_step)?;
        let results = match batch_results(&model, &datasets, &batch) {
            Ok(r) => r,
            Err(TrainError::Core(ept_core::EptError::Numeric(msg))) => {
                return Err(diverged(next_step, &model, &format!("forward failed: {msg}")));
            }
            Err(e) => return Err(e),
        };

        let inv = 1.0 / batch.len() as f64;
        let mut l_gen = 0.0;
        let mut l_con = 0.0;
        let mut grads: Vec<Matrix> = model
            .params()
            .iter()
            .map(|p| Matrix::zeros(p.rows(), p.cols()))
            .collect();
        for r in &results {
            l_gen += r.l_gen;
            l_con += r.l_con;
            for (slot, g) in grads.iter_mut().zip(&r.grads) {
                if let Some(g) = g {
                    slot.add_scaled(g, 1.0).expect("gradient shapes match");
                }
            }
        }
        l_gen *= inv;
        l_con *= inv;
        let l_total = total_loss(l_gen, l_con, cfg.lambda_con)?;
        if !l_total.is_finite() {
            return Err(diverged(next_step, &model, &format!("l_gen={l_gen} l_con={l_con}")));
        }

        if cfg.share_subspace {
            sync_shared_subspace_grads(&model, &mut grads);
        }

        let lr = lr_at(next_step, &schedule)?;
        {
            let mut params = model.params_mut();
            optimizer_step(&mut params, &grads, &mut opt_state, lr, &hp)?;
        }
        step = next_step;
        metrics.push(MetricLine::Step { step, lr, l_gen, l_con, l_total });

        if step % steps_per_epoch == 0 {
            let epoch = step / steps_per_epoch;
            let accuracies = evaluate_eval_split(&model, &datasets)?;
            for (task, accuracy) in accuracies.into_iter().enumerate() {
                metrics.push(MetricLine::EpochEval { step, epoch, task, accuracy });
            }
        }
    }

    let final_routing = routing_stats_on_eval(&model, &datasets)?;
    Ok(TrainRun { model, opt_state, metrics, step, final_routing, datasets })
}

fn diverged(step: u64, model: &EptModel, detail: &str) -> TrainError {
    let norms: Vec<String> = model
        .param_names()
        .iter()
        .zip(model.params())
        .map(|(n, p)| format!("{n}={:.3e}", p.frobenius_norm()))
        .collect();
    TrainError::Diverged(format!(
        "step {step}: {detail}; parameter norms: {}",
        norms.join(", ")
    ))
}

/// Sum the subspace-factor gradients across adapted layers and give every
/// layer the same total, keeping the synchronized copies exactly tied.
fn sync_shared_subspace_grads(model: &EptModel, grads: &mut [Matrix]) {
    let groups = model.subspace_param_indices();
    if groups.len() < 2 {
        return;
    }
    for pick in [0usize, 1] {
        let first = if pick == 0 { groups[0].0 } else { groups[0].1 };
        let mut total = grads[first].clone();
        for g in &groups[1..] {
            let idx = if pick == 0 { g.0 } else { g.1 };
            total.add_scaled(&grads[idx], 1.0).expect("shared shapes match");
        }
        for g in &groups {
            let idx = if pick == 0 { g.0 } else { g.1 };
            grads[idx] = total.clone();
        }
    }
}

/// Per-task argmax accuracy over the eval split (adapters active). The
/// argmax runs over each task's own class count.
pub fn evaluate_eval_split(model: &EptModel, datasets: &[TaskDataset]) -> Result<Vec<f64>> {
    let per_task = |ds: &TaskDataset| -> Result<f64> {
        let correct_for = |i: usize| -> Result<usize> {
            let logits = model.infer_logits(&ds.eval.tokens[i], ds.task_id)?;
            let mut best = 0;
            for c in 1..ds.classes {
                if logits[c] > logits[best] {
                    best = c;
                }
            }
            Ok((best == ds.eval.labels[i]) as usize)
        };
        #[cfg(feature = "parallel")]
        let counts: Result<Vec<usize>> = (0..ds.eval.len()).into_par_iter().map(correct_for).collect();
        #[cfg(not(feature = "parallel"))]
        let counts: Result<Vec<usize>> = (0..ds.eval.len()).map(correct_for).collect();
        Ok(counts?.iter().sum::<usize>() as f64 / ds.eval.len() as f64)
    };
    datasets.iter().map(per_task).collect()
}

/// Routing statistics of the current model over the eval split: one forward
/// per sample, every adapted layer's per-token decision recorded.
pub fn routing_stats_on_eval(model: &EptModel, datasets: &[TaskDataset]) -> Result<RoutingStats> {
    let cfg = model.cfg();
    let mut stats = RoutingStats::new(cfg.n_tasks(), cfg.expert_kernel_sizes.len(), cfg.effective_top_k());
    for ds in datasets {
        let decisions_for = |i: usize| -> Result<Vec<ept_core::adapter::GatingDecision>> {
            let mut tape = Tape::new();
            let staged = model.stage(&mut tape)?;
            let fwd = model.forward_sample(&mut tape, &staged, &ds.eval.tokens[i], ds.task_id, true)?;
            Ok(fwd.decisions)
        };
        #[cfg(feature = "parallel")]
        let all: Result<Vec<_>> = (0..ds.eval.len()).into_par_iter().map(decisions_for).collect();
        #[cfg(not(feature = "parallel"))]
        let all: Result<Vec<_>> = (0..ds.eval.len()).map(decisions_for).collect();
        for decisions in all? {
            for d in decisions {
                record_routing(&mut stats, ds.task_id, &d.selected, &d.gates)?;
            }
        }
    }
    Ok(stats)
}

/// One on/off assignment of the three ablation axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationToggles {
    pub ab_init: bool,
    pub top_k: bool,
    pub alp: bool,
}

impl AblationToggles {
    pub fn all_on() -> Self {
        AblationToggles { ab_init: true, top_k: true, alp: true }
    }
}

/// A finished ablation arm.
pub struct AblationRun {
    pub toggles: AblationToggles,
    pub run: TrainRun,
}

/// Apply toggles onto a base configuration.
pub fn apply_toggles(base: &EptConfig, t: AblationToggles) -> EptConfig {
    let mut cfg = base.clone();
    cfg.ab_init = t.ab_init;
    cfg.top_k_enabled = t.top_k;
    cfg.alp_enabled = t.alp;
    cfg
}

/// Train one arm per requested toggle combination.
pub fn run_ablation(base: &EptConfig, combos: &[AblationToggles]) -> Result<Vec<AblationRun>> {
    combos
        .iter()
        .map(|&toggles| {
            let run = train_loop(&apply_toggles(base, toggles))?;
            Ok(AblationRun { toggles, run })
        })
        .collect()
}

/// Mean training loss over the last up-to-10 step records.
pub fn final_train_loss(metrics: &[MetricLine]) -> Option<f64> {
    let losses: Vec<f64> = metrics
        .iter()
        .filter_map(|m| match m {
            MetricLine::Step { l_total, .. } => Some(*l_total),
            _ => None,
        })
        .collect();
    if losses.is_empty() {
        return None;
    }
    let tail = &losses[losses.len().saturating_sub(10)..];
    Some(tail.iter().sum::<f64>() / tail.len() as f64)
}

/// Comparative JSON table over finished ablation arms.
pub fn ablation_summary_json(arms: &[AblationRun]) -> String {
    #[derive(Serialize)]
    struct Row {
        ab_init: bool,
        top_k: bool,
        alp: bool,
        final_train_loss: f64,
        task_accuracy: Vec<f64>,
    }
    let rows: Vec<Row> = arms
        .iter()
        .map(|arm| {
            let task_accuracy = last_accuracies(&arm.run.metrics, arm.run.model.cfg().n_tasks());
            Row {
                ab_init: arm.toggles.ab_init,
                top_k: arm.toggles.top_k,
                alp: arm.toggles.alp,
                final_train_loss: final_train_loss(&arm.run.metrics).unwrap_or(f64::NAN),
                task_accuracy,
            }
        })
        .collect();
    serde_json::to_string_pretty(&rows).expect("summary serializes")
}

/// Last logged per-task accuracies, in task order.
pub fn last_accuracies(metrics: &[MetricLine], n_tasks: usize) -> Vec<f64> {
    let mut acc = vec![f64::NAN; n_tasks];
    for m in metrics {
        if let MetricLine::EpochEval { task, accuracy, .. } = m {
            acc[*task] = *accuracy;
        }
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick_cfg() -> EptConfig {
        let mut cfg = EptConfig::miniature();
        cfg.batch_size = 4;
        for t in cfg.tasks.iter_mut() {
            t.samples = 16;
        }
        cfg.eval_samples = 4;
        cfg.epochs = 2;
        cfg.warmup_steps = 2;
        cfg
    }

    #[test]
    fn pure_loss_helpers() {
        let logits = vec![vec![0.5; 4], vec![0.5; 4]];
        let loss = generation_loss(&logits, &[1, 3]).unwrap();
        assert!((loss - 4.0f64.ln()).abs() < 1e-12);
        let confident = vec![vec![12.0, -12.0], vec![-12.0, 12.0]];
        assert!(generation_loss(&confident, &[0, 1]).unwrap() < 1e-4);
        assert_eq!(total_loss(2.0, 3.0, 0.5).unwrap(), 3.5);
        assert_eq!(total_loss(2.0, 99.0, 0.0).unwrap(), 2.0);
        assert!(total_loss(1.0, 1.0, -0.1).is_err());
        assert!(generation_loss(&[], &[]).is_err());
    }

    #[test]
    fn alp_off_keeps_kernel_shapes_but_maximal_seeds() {
        let mut cfg = quick_cfg();
        cfg.alp_enabled = false;
        let dense = EptModel::new(cfg.clone()).unwrap();
        cfg.alp_enabled = true;
        let pruned = EptModel::new(cfg).unwrap();
        for ((_, a), (_, b)) in dense.adapted_layers().iter().zip(pruned.adapted_layers().iter()) {
            assert!(a.uses_full_seed());
            assert!(!b.uses_full_seed());
            for i in 0..a.n_experts() {
                assert_eq!(
                    a.bank().expert(i).kernel().shape(),
                    b.bank().expert(i).kernel().shape()
                );
            }
            assert_eq!(a.expert_scale(0), 1.0, "pruner off drops the scaling factor");
        }
    }

    #[test]
    fn zero_steps_returns_initial_state() {
        let cfg = quick_cfg();
        let model = EptModel::new(cfg.clone()).unwrap();
        let before: Vec<Matrix> = model.params().into_iter().cloned().collect();
        let opt = AdamWState::new(&model.params());
        let run = train_from(model, opt, TrainOptions { stop_after: Some(0) }).unwrap();
        assert!(run.metrics.is_empty());
        assert_eq!(run.step, 0);
        for (a, b) in run.model.params().iter().zip(&before) {
            assert!(a.bits_eq(b));
        }
    }

    #[test]
    fn same_seed_twice_is_bitwise_identical() {
        let cfg = quick_cfg();
        let a = train_loop(&cfg).unwrap();
        let b = train_loop(&cfg).unwrap();
        assert_eq!(metrics_to_jsonl(&a.metrics), metrics_to_jsonl(&b.metrics));
        for (x, y) in a.model.params().iter().zip(b.model.params().iter()) {
            assert!(x.bits_eq(y));
        }
        assert_eq!(a.final_routing, b.final_routing);
    }

    #[test]
    fn training_moves_adapters_but_never_frozen_weights() {
        let cfg = quick_cfg();
        let fresh = EptModel::new(cfg.clone()).unwrap();
        let frozen_embed = fresh.embedding().clone();
        let frozen_head = fresh.head().clone();
        let frozen_bases: Vec<Matrix> = fresh
            .blocks()
            .iter()
            .flat_map(|b| b.sublayers.iter().map(|s| s.base_weight().clone()))
            .collect();

        let run = train_loop(&cfg).unwrap();
        assert!(run.model.embedding().bits_eq(&frozen_embed));
        assert!(run.model.head().bits_eq(&frozen_head));
        let after: Vec<Matrix> = run
            .model
            .blocks()
            .iter()
            .flat_map(|b| b.sublayers.iter().map(|s| s.base_weight().clone()))
            .collect();
        for (a, b) in frozen_bases.iter().zip(&after) {
            assert!(a.bits_eq(b), "frozen base weight changed during training");
        }
        // kernels must have moved
        let kernel_norm: f64 = run
            .model
            .adapted_layers()
            .iter()
            .map(|(_, l)| {
                (0..l.n_experts())
                    .map(|i| l.bank().expert(i).kernel().frobenius_norm())
                    .sum::<f64>()
            })
            .sum();
        assert!(kernel_norm > 0.0);
    }

    #[test]
    fn stop_and_resume_replays_the_uninterrupted_run() {
        let cfg = quick_cfg();
        let full = train_loop(&cfg).unwrap();

        let part = {
            let model = EptModel::new(cfg.clone()).unwrap();
            let opt = AdamWState::new(&model.params());
            train_from(model, opt, TrainOptions { stop_after: Some(3) }).unwrap()
        };
        let resumed = train_from(part.model, part.opt_state, TrainOptions::default()).unwrap();

        let mut merged = part.metrics.clone();
        merged.extend(resumed.metrics.clone());
        assert_eq!(metrics_to_jsonl(&merged), metrics_to_jsonl(&full.metrics));
        for (a, b) in resumed.model.params().iter().zip(full.model.params().iter()) {
            assert!(a.bits_eq(b));
        }
    }

    #[test]
    fn non_finite_loss_aborts_with_step_and_norms() {
        let cfg = quick_cfg();
        let mut model = EptModel::new(cfg).unwrap();
        {
            let mut params = model.params_mut();
            params[0].as_mut_slice()[0] = f64::NAN;
        }
        let opt = AdamWState::new(&model.params());
        match train_from(model, opt, TrainOptions { stop_after: Some(1) }) {
            Err(TrainError::Diverged(msg)) => {
                assert!(msg.contains("step 1"), "{msg}");
                assert!(msg.contains("block0.q.subspace.b"), "{msg}");
            }
            other => panic!("expected divergence error, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn metric_lines_serialize_flat() {
        let lines = vec![
            MetricLine::Step { step: 1, lr: 1e-4, l_gen: 1.5, l_con: 2.0, l_total: 1.7 },
            MetricLine::EpochEval { step: 8, epoch: 1, task: 0, accuracy: 0.5 },
        ];
        let jsonl = metrics_to_jsonl(&lines);
        let mut it = jsonl.lines();
        let step: serde_json::Value = serde_json::from_str(it.next().unwrap()).unwrap();
        assert_eq!(step["step"], 1);
        assert_eq!(step["l_total"], 1.7);
        let epoch: serde_json::Value = serde_json::from_str(it.next().unwrap()).unwrap();
        assert_eq!(epoch["accuracy"], 0.5);
        let parsed: Vec<MetricLine> = jsonl
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(parsed, lines);
    }

    #[test]
    fn ablation_all_on_equals_default_run() {
        let cfg = quick_cfg();
        let base = train_loop(&cfg).unwrap();
        let arms = run_ablation(&cfg, &[AblationToggles::all_on()]).unwrap();
        assert_eq!(
            metrics_to_jsonl(&arms[0].run.metrics),
            metrics_to_jsonl(&base.metrics)
        );
    }

    #[test]
    fn top_k_off_gives_every_expert_gate_mass() {
        let mut cfg = quick_cfg();
        cfg.top_k_enabled = false;
        let model = EptModel::new(cfg.clone()).unwrap();
        let datasets = make_tasks(&cfg).unwrap();
        let mut tape = Tape::new();
        let staged = model.stage(&mut tape).unwrap();
        let fwd = model
            .forward_sample(&mut tape, &staged, &datasets[0].train.tokens[0], 0, true)
            .unwrap();
        assert!(!fwd.decisions.is_empty());
        for d in &fwd.decisions {
            assert_eq!(d.selected.len(), cfg.expert_kernel_sizes.len());
            assert!(d.gates.iter().all(|&g| g > 0.0));
        }
    }

    #[test]
    fn ab_init_off_zeroes_the_initial_seed() {
        let mut cfg = quick_cfg();
        cfg.ab_init = false;
        let model = EptModel::new(cfg).unwrap();
        for (_, layer) in model.adapted_layers() {
            let seed = layer.subspace().full_seed();
            assert!(seed.as_slice().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn shared_subspace_copies_stay_tied_through_updates() {
        let mut cfg = quick_cfg();
        cfg.share_subspace = true;
        cfg.target_modules = vec!["q".into(), "v".into()];
        let run = train_from(
            EptModel::new(cfg.clone()).unwrap(),
            AdamWState::new(&EptModel::new(cfg).unwrap().params()),
            TrainOptions { stop_after: Some(4) },
        )
        .unwrap();
        let layers = run.model.adapted_layers();
        assert!(layers[0].1.subspace().factor_b().bits_eq(layers[1].1.subspace().factor_b()));
        assert!(layers[0].1.subspace().factor_a().bits_eq(layers[1].1.subspace().factor_a()));
        // and they actually moved
        assert!(layers[0].1.subspace().factor_b().frobenius_norm() > 0.0);
    }
}
