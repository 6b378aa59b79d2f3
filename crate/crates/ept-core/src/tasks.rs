//! Learnable task prototypes and the task-aware contrastive objective.
//!
//! Each task owns one prototype vector; pooled sample features are pulled
//! toward their own task's prototype and pushed from the rest through a
//! temperature-scaled softmax over cosine similarities.

use crate::error::{EptError, Result};
use crate::numeric::{pca2d, Matrix, NodeId, Tape};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::fmt::Write as _;

/// Trainable prototype table: one row per task.
#[derive(Debug, Clone)]
pub struct TaskEmbeddingTable {
    embeddings: Matrix,
    tau_c: f64,
}

/// A pooled backbone feature tagged with its source task.
#[derive(Debug, Clone)]
pub struct PooledFeature {
    pub feature: Vec<f64>,
    pub task: usize,
}

impl TaskEmbeddingTable {
    /// Rows drawn i.i.d. from N(0, 1/d_e); prototypes are used unnormalized
    /// (cosine similarity absorbs the scale).
    pub fn new(n_tasks: usize, d_e: usize, tau_c: f64, seed: u64) -> Result<Self> {
        if n_tasks == 0 || d_e == 0 {
            return Err(EptError::Parameter(format!(
                "task table: need n_tasks >= 1 and d_e >= 1, got {n_tasks}, {d_e}"
            )));
        }
        if !(tau_c > 0.0) {
            return Err(EptError::Parameter(format!(
                "task table: contrastive temperature must be > 0, got {tau_c}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, (1.0 / d_e as f64).sqrt()).expect("positive std");
        Ok(TaskEmbeddingTable {
            embeddings: Matrix::from_fn(n_tasks, d_e, |_, _| normal.sample(&mut rng)),
            tau_c,
        })
    }

    pub fn from_matrix(embeddings: Matrix, tau_c: f64) -> Result<Self> {
        if !(tau_c > 0.0) {
            return Err(EptError::Parameter("task table: temperature must be > 0".into()));
        }
        Ok(TaskEmbeddingTable { embeddings, tau_c })
    }

    pub fn n_tasks(&self) -> usize {
        self.embeddings.rows()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn tau_c(&self) -> f64 {
        self.tau_c
    }

    pub fn embeddings(&self) -> &Matrix {
        &self.embeddings
    }

    pub fn embeddings_mut(&mut self) -> &mut Matrix {
        &mut self.embeddings
    }

    pub fn prototype(&self, task: usize) -> &[f64] {
        self.embeddings.row(task)
    }
}

/// Mean over sequence positions, then an optional trainable projection when
/// the prototype dimension differs from the model width.
#[derive(Debug, Clone)]
pub struct FeaturePooler {
    proj: Option<Matrix>,
}

impl FeaturePooler {
    /// Identity pooling (d_e == d_model).
    pub fn identity() -> Self {
        FeaturePooler { proj: None }
    }

    /// Pooling with a trainable `d_e x d_model` map, Gaussian initialized.
    pub fn projected(d_model: usize, d_e: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, (1.0 / d_model as f64).sqrt()).expect("positive std");
        FeaturePooler {
            proj: Some(Matrix::from_fn(d_e, d_model, |_, _| normal.sample(&mut rng))),
        }
    }

    pub fn proj(&self) -> Option<&Matrix> {
        self.proj.as_ref()
    }

    pub fn proj_mut(&mut self) -> Option<&mut Matrix> {
        self.proj.as_mut()
    }

    /// Pool a `seq_len x d_model` hidden-state matrix.
    pub fn pool_features(&self, hidden: &Matrix) -> Result<Vec<f64>> {
        if hidden.rows() == 0 {
            return Err(EptError::Contract("pool_features: empty sequence".into()));
        }
        let inv = 1.0 / hidden.rows() as f64;
        let mean: Vec<f64> = (0..hidden.cols())
            .map(|c| {
                let mut acc = 0.0;
                for r in 0..hidden.rows() {
                    acc += hidden.get(r, c);
                }
                acc * inv
            })
            .collect();
        match &self.proj {
            None => Ok(mean),
            Some(p) => {
                if p.cols() != hidden.cols() {
                    return Err(EptError::Shape(format!(
                        "pool_features: hidden width {} vs projection input {}",
                        hidden.cols(),
                        p.cols()
                    )));
                }
                Ok((0..p.rows())
                    .map(|r| {
                        let mut acc = 0.0;
                        for (c, m) in mean.iter().enumerate() {
                            acc += p.get(r, c) * m;
                        }
                        acc
                    })
                    .collect())
            }
        }
    }

    /// Tape version: `hidden` is a seq_len x d_model node, the result a
    /// 1 x d_e row node. `proj_t` must be the staged transpose of the
    /// projection when one exists.
    pub fn pool_on_tape(
        &self,
        tape: &mut Tape,
        hidden: NodeId,
        proj_t: Option<NodeId>,
    ) -> Result<NodeId> {
        let mean = tape.mean_rows(hidden);
        match (&self.proj, proj_t) {
            (None, _) => Ok(mean),
            (Some(_), Some(pt)) => tape.matmul(mean, pt),
            (Some(_), None) => Err(EptError::Contract(
                "pool_on_tape: projection exists but no staged transpose given".into(),
            )),
        }
    }
}

/// Cosine similarity; rejects zero-norm vectors.
pub fn similarity(f: &[f64], e: &[f64]) -> Result<f64> {
    if f.len() != e.len() {
        return Err(EptError::Shape(format!(
            "similarity: lengths {} vs {}",
            f.len(),
            e.len()
        )));
    }
    let nf = f.iter().map(|x| x * x).sum::<f64>().sqrt();
    let ne = e.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nf == 0.0 || ne == 0.0 {
        return Err(EptError::Degenerate("similarity: zero-norm vector".into()));
    }
    let dot: f64 = f.iter().zip(e).map(|(a, b)| a * b).sum();
    Ok(dot / (nf * ne))
}

/// Per-sample contrastive term on the tape: cross entropy of the
/// temperature-scaled cosine similarities against the sample's task.
/// `feature` is a 1 x d_e row node, `table_node` the staged T x d_e matrix.
pub fn contrastive_term_on_tape(
    tape: &mut Tape,
    table: &TaskEmbeddingTable,
    table_node: NodeId,
    feature: NodeId,
    task: usize,
) -> Result<NodeId> {
    if task >= table.n_tasks() {
        return Err(EptError::Contract(format!(
            "contrastive term: task {task} out of range for {} tasks",
            table.n_tasks()
        )));
    }
    let norm_f = tape.norm(feature)?;
    let inv_f = tape.recip(norm_f)?;
    let mut sims = Vec::with_capacity(table.n_tasks());
    for t in 0..table.n_tasks() {
        let proto = tape.row(table_node, t)?;
        let norm_e = tape.norm(proto)?;
        let inv_e = tape.recip(norm_e)?;
        let dot = tape.dot(feature, proto)?;
        let cos_f = tape.mul_scalar(dot, inv_f)?;
        let cos = tape.mul_scalar(cos_f, inv_e)?;
        sims.push(tape.scale(cos, 1.0 / table.tau_c()));
    }
    let logits = tape.stack_rows(&sims)?;
    tape.cross_entropy(logits, task)
}

/// Batch-mean contrastive loss over pooled features. Evaluates the same
/// graph the training loop records, on a throwaway tape.
pub fn contrastive_loss(feats: &[PooledFeature], table: &TaskEmbeddingTable) -> Result<f64> {
    if feats.is_empty() {
        return Err(EptError::Contract("contrastive_loss: empty batch".into()));
    }
    let mut tape = Tape::new();
    let table_node = tape.constant(table.embeddings().clone());
    let mut total: Option<NodeId> = None;
    for feat in feats {
        let f = tape.constant(Matrix::row_vector(&feat.feature));
        let term = contrastive_term_on_tape(&mut tape, table, table_node, f, feat.task)?;
        total = Some(match total {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    let total = total.expect("non-empty batch");
    let mean = tape.scale(total, 1.0 / feats.len() as f64);
    Ok(tape.scalar_value(mean))
}

/// CSV exports of the prototype table: raw coordinates, and 2-D PCA
/// coordinates when at least three tasks exist.
#[derive(Debug, Clone)]
pub struct EmbeddingExport {
    pub raw_csv: String,
    pub pca_csv: Option<String>,
    pub notice: Option<String>,
}

pub fn embedding_export(table: &TaskEmbeddingTable) -> Result<EmbeddingExport> {
    let e = table.embeddings();
    let mut raw = String::from("task");
    for d in 0..e.cols() {
        write!(raw, ",dim_{d}").expect("string write");
    }
    raw.push('\n');
    for t in 0..e.rows() {
        write!(raw, "{t}").expect("string write");
        for d in 0..e.cols() {
            write!(raw, ",{}", e.get(t, d)).expect("string write");
        }
        raw.push('\n');
    }

    if e.rows() < 3 {
        return Ok(EmbeddingExport {
            raw_csv: raw,
            pca_csv: None,
            notice: Some(format!(
                "PCA section omitted: need >= 3 tasks, have {}",
                e.rows()
            )),
        });
    }
    let coords = pca2d(e)?;
    let mut pca = String::from("task,pc1,pc2\n");
    for t in 0..coords.rows() {
        writeln!(pca, "{t},{},{}", coords.get(t, 0), coords.get(t, 1)).expect("string write");
    }
    Ok(EmbeddingExport { raw_csv: raw, pca_csv: Some(pca), notice: None })
}
