//! Synthetic multi-task data with engineered difficulty heterogeneity.
//!
//! Each family owns a contiguous slice of the vocabulary and one hidden
//! labeling transform of the configured rank; tasks inside a family share
//! that transform (up to the noise amplitude) but draw tokens with their own
//! bias. Labels are the argmax of the transform applied to the mean frozen
//! embedding of the sequence, with bounded per-sample noise on the scores.
//! Sequences whose clean top-two score gap falls under twice the default
//! noise bound are redrawn, so default-noise labels stay consistent with the
//! clean functional.

use ept_core::numeric::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::{derive_seed, EptConfig, SamplerCfg};
use crate::error::{Result, TrainError};

/// Minimum clean top-two score gap. Well above twice the default noise
/// amplitude, so default-noise labels never flip, and wide enough that a
/// least-squares probe separates the classes cleanly.
const LABEL_MARGIN: f64 = 0.3;
const MAX_REDRAWS: usize = 64;

/// A generated split: token sequences and their labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleSet {
    pub tokens: Vec<Vec<u32>>,
    pub labels: Vec<usize>,
}

impl SampleSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// One task's resolved spec plus its train and eval splits.
#[derive(Debug, Clone)]
pub struct TaskDataset {
    pub task_id: usize,
    pub family: usize,
    pub rank: usize,
    pub classes: usize,
    pub seq_len: usize,
    pub train: SampleSet,
    pub eval: SampleSet,
}

/// The frozen token embedding table shared by the model and the labeler.
pub fn frozen_embedding(cfg: &EptConfig) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "embed", 0));
    let normal = Normal::new(0.0, 1.0).expect("unit std");
    Matrix::from_fn(cfg.vocab_size, cfg.d_model, |_, _| normal.sample(&mut rng))
}

fn family_count(cfg: &EptConfig) -> usize {
    cfg.tasks.iter().map(|t| t.family).max().unwrap_or(0) + 1
}

/// Family labeling transform: a rank-limited `classes x d_model` map with
/// roughly unit-norm rows.
fn family_transform(cfg: &EptConfig, family: usize, rank: usize, classes: usize) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "family", family as u64));
    let d = cfg.d_model;
    let rank = rank.min(d);
    let left = Normal::new(0.0, (1.0 / rank as f64).sqrt()).expect("positive std");
    let right = Normal::new(0.0, (1.0 / d as f64).sqrt()).expect("positive std");
    let u = Matrix::from_fn(classes, rank, |_, _| left.sample(&mut rng));
    let v = Matrix::from_fn(rank, d, |_, _| right.sample(&mut rng));
    ept_core::numeric::matmul(&u, &v).expect("shapes fixed")
}

/// Strength of the per-task token bias inside the family's vocabulary
/// slice. Kept moderate: tasks in one family must stay distributionally
/// close (their prototypes should cluster) while remaining distinguishable.
const TILT_STD: f64 = 0.5;

/// Per-task token distribution over the family's vocabulary slice.
fn task_token_weights(cfg: &EptConfig, task: usize, range: std::ops::Range<usize>) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "tilt", task as u64));
    let normal = Normal::new(0.0, TILT_STD).expect("positive std");
    let raw: Vec<f64> = range.map(|_| normal.sample(&mut rng)).collect();
    ept_core::numeric::softmax_temp(&raw, 1.0).expect("finite tilt")
}

fn draw_weighted(rng: &mut ChaCha8Rng, weights: &[f64]) -> usize {
    let mut dart: f64 = rng.gen::<f64>();
    for (i, w) in weights.iter().enumerate() {
        dart -= w;
        if dart <= 0.0 {
            return i;
        }
    }
    weights.len() - 1
}

fn mean_embedding(embedding: &Matrix, tokens: &[u32]) -> Vec<f64> {
    let d = embedding.cols();
    let inv = 1.0 / tokens.len() as f64;
    let mut m = vec![0.0; d];
    for &t in tokens {
        for (c, slot) in m.iter_mut().enumerate() {
            *slot += embedding.get(t as usize, c);
        }
    }
    for slot in m.iter_mut() {
        *slot *= inv;
    }
    m
}

fn scores(transform: &Matrix, mean: &[f64]) -> Vec<f64> {
    (0..transform.rows())
        .map(|r| {
            let mut acc = 0.0;
            for (c, m) in mean.iter().enumerate() {
                acc += transform.get(r, c) * m;
            }
            acc
        })
        .collect()
}

fn top_two_gap(s: &[f64]) -> f64 {
    let mut best = f64::NEG_INFINITY;
    let mut second = f64::NEG_INFINITY;
    for &v in s {
        if v > best {
            second = best;
            best = v;
        } else if v > second {
            second = v;
        }
    }
    best - second
}

fn argmax(s: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in s.iter().enumerate() {
        if *v > s[best] {
            best = i;
        }
    }
    best
}

fn generate_split(
    rng: &mut ChaCha8Rng,
    embedding: &Matrix,
    transform: &Matrix,
    weights: &[f64],
    token_base: u32,
    seq_len: usize,
    count: usize,
    noise: f64,
    classes: usize,
) -> SampleSet {
    let mut tokens = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    for _ in 0..count {
        let mut seq: Vec<u32> = Vec::new();
        let mut clean: Vec<f64> = Vec::new();
        for attempt in 0..MAX_REDRAWS {
            seq = (0..seq_len)
                .map(|_| token_base + draw_weighted(rng, weights) as u32)
                .collect();
            clean = scores(transform, &mean_embedding(embedding, &seq));
            if top_two_gap(&clean) >= LABEL_MARGIN || attempt == MAX_REDRAWS - 1 {
                break;
            }
        }
        let noisy: Vec<f64> = clean
            .iter()
            .map(|&s| s + noise * (2.0 * rng.gen::<f64>() - 1.0))
            .collect();
        debug_assert_eq!(noisy.len(), classes);
        tokens.push(seq);
        labels.push(argmax(&noisy));
    }
    SampleSet { tokens, labels }
}

/// Generate every task's train and eval splits, deterministically from the
/// config and its seed.
pub fn make_tasks(cfg: &EptConfig) -> Result<Vec<TaskDataset>> {
    cfg.validate()?;
    let embedding = frozen_embedding(cfg);
    let n_families = family_count(cfg);
    let slice = cfg.vocab_size / n_families;
    if slice == 0 {
        return Err(TrainError::Config(format!(
            "vocab of {} cannot cover {} families",
            cfg.vocab_size, n_families
        )));
    }
    let mut out = Vec::with_capacity(cfg.tasks.len());
    for (task_id, spec) in cfg.tasks.iter().enumerate() {
        let seq_len = spec.seq_len.unwrap_or(cfg.max_seq_len);
        let family = family_transform(cfg, spec.family, spec.rank, spec.classes);
        let transform = if spec.noise > 0.0 {
            // task-specific bounded deviation from the family transform
            let mut rng =
                ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "taskdelta", task_id as u64));
            let normal = Normal::new(0.0, (1.0 / cfg.d_model as f64).sqrt()).expect("positive std");
            let delta = Matrix::from_fn(spec.classes, cfg.d_model, |_, _| normal.sample(&mut rng));
            let mut t = family;
            t.add_scaled(&delta, spec.noise).expect("same shape");
            t
        } else {
            family
        };
        let range = spec.family * slice..(spec.family + 1) * slice;
        let token_base = range.start as u32;
        let weights = task_token_weights(cfg, task_id, range);

        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "data", task_id as u64));
        let train = generate_split(
            &mut rng, &embedding, &transform, &weights, token_base, seq_len, spec.samples,
            spec.noise, spec.classes,
        );
        let eval = generate_split(
            &mut rng, &embedding, &transform, &weights, token_base, seq_len, cfg.eval_samples,
            spec.noise, spec.classes,
        );
        out.push(TaskDataset {
            task_id,
            family: spec.family,
            rank: spec.rank,
            classes: spec.classes,
            seq_len,
            train,
            eval,
        });
    }
    Ok(out)
}

/// Draw a balanced batch: task uniform over T, then a uniform sample within
/// the task, both with replacement. Returns (task, train index) pairs.
pub fn balanced_sample(
    datasets: &[TaskDataset],
    rng: &mut ChaCha8Rng,
    batch_size: usize,
) -> Result<Vec<(usize, usize)>> {
    if datasets.is_empty() || datasets.iter().any(|d| d.train.is_empty()) {
        return Err(TrainError::Core(ept_core::EptError::Contract(
            "balanced_sample: every dataset must be non-empty".into(),
        )));
    }
    Ok((0..batch_size)
        .map(|_| {
            let task = rng.gen_range(0..datasets.len());
            let idx = rng.gen_range(0..datasets[task].train.len());
            (task, idx)
        })
        .collect())
}

/// Deterministic round-robin batch: global position `offset + j` maps to
/// task `pos % T` and sample `(pos / T) % len`. Counts are exactly equal
/// after any multiple of T draws.
pub fn round_robin_batch(
    datasets: &[TaskDataset],
    offset: u64,
    batch_size: usize,
) -> Result<Vec<(usize, usize)>> {
    if datasets.is_empty() || datasets.iter().any(|d| d.train.is_empty()) {
        return Err(TrainError::Core(ept_core::EptError::Contract(
            "round_robin_batch: every dataset must be non-empty".into(),
        )));
    }
    let t = datasets.len() as u64;
    Ok((0..batch_size as u64)
        .map(|j| {
            let pos = offset + j;
            let task = (pos % t) as usize;
            let idx = ((pos / t) % datasets[task].train.len() as u64) as usize;
            (task, idx)
        })
        .collect())
}

/// Batch for a given 1-based step under the configured sampler, derived
/// statelessly from the seed so a resumed run replays the same stream.
pub fn batch_for_step(
    cfg: &EptConfig,
    datasets: &[TaskDataset],
    step: u64,
) -> Result<Vec<(usize, usize)>> {
    match cfg.sampler {
        SamplerCfg::Uniform => {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "batch", step));
            balanced_sample(datasets, &mut rng, cfg.batch_size)
        }
        SamplerCfg::RoundRobin => {
            round_robin_batch(datasets, (step - 1) * cfg.batch_size as u64, cfg.batch_size)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::TaskSpecConfig;
    use ept_core::reference;

    #[test]
    fn generation_is_deterministic() {
        let cfg = EptConfig::toy();
        let a = make_tasks(&cfg).unwrap();
        let b = make_tasks(&cfg).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.train, y.train);
            assert_eq!(x.eval, y.eval);
        }
        assert_eq!(a[0].train.len(), 480);
        assert_eq!(a[0].eval.len(), 64);
    }

    #[test]
    fn families_partition_the_vocabulary() {
        let cfg = EptConfig::toy();
        let data = make_tasks(&cfg).unwrap();
        for ds in &data {
            let lo = (ds.family * 32) as u32;
            let hi = lo + 32;
            for seq in ds.train.tokens.iter().chain(&ds.eval.tokens) {
                assert!(seq.iter().all(|&t| t >= lo && t < hi));
            }
        }
    }

    #[test]
    fn same_family_zero_noise_shares_the_labeling_function() {
        let mut cfg = EptConfig::toy();
        for t in cfg.tasks.iter_mut() {
            t.noise = 0.0;
        }
        // tasks 0 and 1 are one family: relabel task 1's sequences with
        // task 0's generator inputs and the labels must match
        let data = make_tasks(&cfg).unwrap();
        let embedding = frozen_embedding(&cfg);
        let transform = family_transform(&cfg, 0, cfg.tasks[0].rank, cfg.tasks[0].classes);
        for (seq, &label) in data[1].train.tokens.iter().zip(&data[1].train.labels).take(50) {
            let s = scores(&transform, &mean_embedding(&embedding, seq));
            assert_eq!(argmax(&s), label);
        }
    }

    #[test]
    fn full_rank_zero_noise_labels_are_probe_recoverable() {
        let mut cfg = EptConfig::toy();
        cfg.warmup_steps = 2;
        cfg.tasks = vec![TaskSpecConfig {
            family: 0,
            rank: 32,
            classes: 4,
            samples: 256,
            noise: 0.0,
            seq_len: None,
        }];
        let data = make_tasks(&cfg).unwrap();
        let embedding = frozen_embedding(&cfg);
        let ds = &data[0];

        // least-squares probe from mean embeddings to one-hot labels
        let n = ds.train.len();
        let feats = Matrix::from_fn(n, cfg.d_model, |r, c| {
            mean_embedding(&embedding, &ds.train.tokens[r])[c]
        });
        let onehot = Matrix::from_fn(n, 4, |r, c| if ds.train.labels[r] == c { 1.0 } else { 0.0 });
        let probe = reference::least_squares(&feats, &onehot);
        let predictions = reference::matmul_naive(&feats, &probe);
        let mut correct = 0;
        for r in 0..n {
            let row: Vec<f64> = (0..4).map(|c| predictions.get(r, c)).collect();
            if argmax(&row) == ds.train.labels[r] {
                correct += 1;
            }
        }
        assert_eq!(correct, n, "probe recovered {correct}/{n}");
    }

    #[test]
    fn balanced_sampling_is_roughly_uniform_over_tasks() {
        let mut cfg = EptConfig::toy();
        cfg.tasks = vec![
            TaskSpecConfig { family: 0, rank: 1, classes: 2, samples: 10, noise: 0.05, seq_len: Some(4) },
            TaskSpecConfig { family: 1, rank: 2, classes: 2, samples: 10_000, noise: 0.05, seq_len: Some(4) },
        ];
        cfg.eval_samples = 2;
        let data = make_tasks(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut counts = [0usize; 2];
        for _ in 0..100 {
            for (task, idx) in balanced_sample(&data, &mut rng, 100).unwrap() {
                counts[task] += 1;
                assert!(idx < data[task].train.len());
            }
        }
        // 3-sigma binomial bounds around 5000 of 10^4
        assert!(counts[0] >= 4700 && counts[0] <= 5300, "counts {counts:?}");
    }

    #[test]
    fn single_task_draws_only_task_zero() {
        let mut cfg = EptConfig::toy();
        cfg.tasks.truncate(1);
        cfg.eval_samples = 2;
        let data = make_tasks(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(balanced_sample(&data, &mut rng, 50)
            .unwrap()
            .iter()
            .all(|&(task, _)| task == 0));
    }

    #[test]
    fn round_robin_counts_are_exactly_equal() {
        let cfg = EptConfig::toy();
        let data = make_tasks(&cfg).unwrap();
        let mut counts = [0usize; 4];
        for (task, _) in round_robin_batch(&data, 0, 4 * 25).unwrap() {
            counts[task] += 1;
        }
        assert_eq!(counts, [25; 4]);
    }

    #[test]
    fn batches_differ_across_steps_but_not_runs() {
        let cfg = EptConfig::toy();
        let data = make_tasks(&cfg).unwrap();
        let a1 = batch_for_step(&cfg, &data, 1).unwrap();
        let a2 = batch_for_step(&cfg, &data, 2).unwrap();
        let b1 = batch_for_step(&cfg, &data, 1).unwrap();
        assert_eq!(a1, b1);
        assert_ne!(a1, a2);
    }
}
