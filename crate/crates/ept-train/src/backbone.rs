//! Toy transformer backbone with adapted linear sub-layers.
//!
//! Everything except the adapter stacks is frozen after seeded random init:
//! the token embedding, the attention and feed-forward weights (which become
//! the adapters' frozen bases), and by default the classifier head. Blocks
//! are single-head self-attention plus a tanh feed-forward, both residual.

use ept_core::adapter::{EptLayer, GatingDecision, LayerConfig, LayerNodes};
use ept_core::numeric::{Matrix, NodeId, Tape};
use ept_core::router::Conditioning;
use ept_core::tasks::{FeaturePooler, TaskEmbeddingTable};
use ept_core::EptError;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::{derive_seed, EptConfig};
use crate::data::frozen_embedding;
use crate::error::{Result, TrainError};

/// Sub-layer order inside a block; target-module names index into this.
pub const SUBLAYER_NAMES: [&str; 6] = ["q", "k", "v", "o", "up", "down"];

/// One linear sub-layer: adapted or plain frozen.
#[derive(Debug, Clone)]
pub enum SubLayer {
    Adapted(EptLayer),
    Frozen(Matrix),
}

impl SubLayer {
    pub fn base_weight(&self) -> &Matrix {
        match self {
            SubLayer::Adapted(layer) => layer.w0(),
            SubLayer::Frozen(w) => w,
        }
    }

    pub fn as_adapted(&self) -> Option<&EptLayer> {
        match self {
            SubLayer::Adapted(layer) => Some(layer),
            SubLayer::Frozen(_) => None,
        }
    }
}

/// One transformer block: q, k, v, o, up, down in that order.
#[derive(Debug, Clone)]
pub struct Block {
    pub sublayers: Vec<SubLayer>,
}

/// The assembled model.
#[derive(Debug, Clone)]
pub struct EptModel {
    cfg: EptConfig,
    embed: Matrix,
    blocks: Vec<Block>,
    head: Matrix,
    task_table: TaskEmbeddingTable,
    pooler: FeaturePooler,
}

/// Tape handles for one staged sub-layer.
enum StagedSubLayer {
    Adapted(LayerNodes),
    Frozen { w_t: NodeId },
}

/// Tape handles for a fully staged model; parameter nodes are aligned with
/// [`EptModel::param_names`].
pub struct StagedModel {
    pub param_nodes: Vec<NodeId>,
    pub table_node: NodeId,
    sublayers: Vec<Vec<StagedSubLayer>>,
    pooler_proj_t: Option<NodeId>,
    head_t: NodeId,
}

/// Forward outputs for one sample.
pub struct SampleForward {
    /// 1 x n_classes logits row.
    pub logits: NodeId,
    /// 1 x d_e pooled feature for the contrastive objective.
    pub pooled_feature: NodeId,
    /// Final seq_len x d_model hidden states.
    pub final_hidden: NodeId,
    /// Gating decisions in (block, sub-layer, token) order; empty when the
    /// adapters are bypassed.
    pub decisions: Vec<GatingDecision>,
}

fn gaussian_matrix(rows: usize, cols: usize, std: f64, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, std).expect("positive std");
    Matrix::from_fn(rows, cols, |_, _| normal.sample(&mut rng))
}

impl EptModel {
    pub fn new(cfg: EptConfig) -> Result<Self> {
        cfg.validate()?;
        let embed = frozen_embedding(&cfg);
        let d = cfg.d_model;
        let ffn = cfg.ffn_dim;

        let layer_cfg = LayerConfig {
            scales: cfg.expert_kernel_sizes.clone(),
            rank: cfg.lora_rank,
            gaussian_std: cfg.gaussian_std,
            top_k: cfg.effective_top_k(),
            tau_gate: cfg.tau_gate,
            conditioning: cfg.router_conditioning.into(),
            task_embed_dim: cfg.d_e(),
            scaling_mode: cfg.effective_scaling_mode().into(),
            n_tasks: cfg.n_tasks(),
            gaussian_init_a: cfg.ab_init,
            use_full_seed: !cfg.alp_enabled,
        };

        if cfg.share_subspace {
            // Synchronized-update sharing only works across equal shapes.
            let mut shapes = std::collections::BTreeSet::new();
            for name in &cfg.target_modules {
                let shape = match name.as_str() {
                    "up" => (ffn, d),
                    "down" => (d, ffn),
                    _ => (d, d),
                };
                shapes.insert(shape);
            }
            if shapes.len() > 1 {
                return Err(TrainError::Config(format!(
                    "share_subspace requires equal adapted shapes, got {shapes:?}"
                )));
            }
        }

        let mut blocks = Vec::with_capacity(cfg.n_blocks);
        for b in 0..cfg.n_blocks {
            let mut sublayers = Vec::with_capacity(6);
            for (i, name) in SUBLAYER_NAMES.iter().enumerate() {
                let (rows, cols) = match *name {
                    "up" => (ffn, d),
                    "down" => (d, ffn),
                    _ => (d, d),
                };
                let ordinal = (b * 6 + i) as u64;
                let w0 = gaussian_matrix(
                    rows,
                    cols,
                    (1.0 / cols as f64).sqrt(),
                    derive_seed(cfg.seed, "w0", ordinal),
                );
                if cfg.target_modules.iter().any(|m| m == name) {
                    let adapter_seed = if cfg.share_subspace {
                        derive_seed(cfg.seed, "adapter-shared", 0)
                    } else {
                        derive_seed(cfg.seed, "adapter", ordinal)
                    };
                    sublayers.push(SubLayer::Adapted(EptLayer::new(w0, &layer_cfg, adapter_seed)?));
                } else {
                    sublayers.push(SubLayer::Frozen(w0));
                }
            }
            blocks.push(Block { sublayers });
        }

        let head = gaussian_matrix(
            cfg.n_classes(),
            d,
            (1.0 / d as f64).sqrt(),
            derive_seed(cfg.seed, "head", 0),
        );
        let task_table = TaskEmbeddingTable::new(
            cfg.n_tasks(),
            cfg.d_e(),
            cfg.tau_con,
            derive_seed(cfg.seed, "task-table", 0),
        )?;
        let pooler = if cfg.d_e() == d {
            FeaturePooler::identity()
        } else {
            FeaturePooler::projected(d, cfg.d_e(), derive_seed(cfg.seed, "pooler", 0))
        };

        Ok(EptModel { cfg, embed, blocks, head, task_table, pooler })
    }

    pub fn cfg(&self) -> &EptConfig {
        &self.cfg
    }

    pub fn embedding(&self) -> &Matrix {
        &self.embed
    }

    pub fn head(&self) -> &Matrix {
        &self.head
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn task_table(&self) -> &TaskEmbeddingTable {
        &self.task_table
    }

    pub fn task_table_mut(&mut self) -> &mut TaskEmbeddingTable {
        &mut self.task_table
    }

    pub fn pooler(&self) -> &FeaturePooler {
        &self.pooler
    }

    /// Adapted layers with their `block{b}.{name}` path, staging order.
    pub fn adapted_layers(&self) -> Vec<(String, &EptLayer)> {
        let mut out = Vec::new();
        for (b, block) in self.blocks.iter().enumerate() {
            for (i, sub) in block.sublayers.iter().enumerate() {
                if let SubLayer::Adapted(layer) = sub {
                    out.push((format!("block{b}.{}", SUBLAYER_NAMES[i]), layer));
                }
            }
        }
        out
    }

    /// Trainable tensor names, in staging order.
    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for (path, layer) in self.adapted_layers() {
            for (local, _) in layer.trainable_parameters() {
                names.push(format!("{path}.{local}"));
            }
        }
        names.push("task_embeddings".into());
        if self.pooler.proj().is_some() {
            names.push("pooler.proj".into());
        }
        if self.cfg.trainable_head {
            names.push("head".into());
        }
        names
    }

    /// Trainable tensors, aligned with [`EptModel::param_names`].
    pub fn params(&self) -> Vec<&Matrix> {
        let mut out = Vec::new();
        for (_, layer) in self.adapted_layers() {
            for (_, m) in layer.trainable_parameters() {
                out.push(m);
            }
        }
        out.push(self.task_table.embeddings());
        if let Some(p) = self.pooler.proj() {
            out.push(p);
        }
        if self.cfg.trainable_head {
            out.push(&self.head);
        }
        out
    }

    /// Mutable trainable tensors, same alignment.
    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out: Vec<*mut Matrix> = Vec::new();
        for block in self.blocks.iter_mut() {
            for sub in block.sublayers.iter_mut() {
                if let SubLayer::Adapted(layer) = sub {
                    for m in layer.trainable_parameters_mut() {
                        out.push(m as *mut Matrix);
                    }
                }
            }
        }
        out.push(self.task_table.embeddings_mut() as *mut Matrix);
        if let Some(p) = self.pooler.proj_mut() {
            out.push(p as *mut Matrix);
        }
        if self.cfg.trainable_head {
            out.push(&mut self.head as *mut Matrix);
        }
        // Pointers address disjoint fields gathered one at a time.
        out.into_iter().map(|p| unsafe { &mut *p }).collect()
    }

    /// Indices of each adapted layer's (factor B, factor A) in the parameter
    /// list; the subspace-sharing sync uses these.
    pub fn subspace_param_indices(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        let mut idx = 0;
        for (_, layer) in self.adapted_layers() {
            out.push((idx, idx + 1));
            idx += layer.trainable_parameters().len();
        }
        out
    }

    /// Register every trainable tensor and stage all sub-layers on a tape.
    pub fn stage(&self, tape: &mut Tape) -> Result<StagedModel> {
        let mut param_nodes = Vec::new();
        let mut sublayers = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let mut staged_block = Vec::with_capacity(6);
            for sub in &block.sublayers {
                match sub {
                    SubLayer::Adapted(layer) => {
                        let nodes = layer.stage(tape)?;
                        param_nodes.push(nodes.subspace.factor_b);
                        param_nodes.push(nodes.subspace.factor_a);
                        param_nodes.extend(nodes.kernels.kernels.iter().copied());
                        param_nodes.push(nodes.w_r);
                        if let Some(p) = nodes.task_proj {
                            param_nodes.push(p);
                        }
                        staged_block.push(StagedSubLayer::Adapted(nodes));
                    }
                    SubLayer::Frozen(w) => {
                        let w_node = tape.constant(w.clone());
                        let w_t = tape.transpose(w_node);
                        staged_block.push(StagedSubLayer::Frozen { w_t });
                    }
                }
            }
            sublayers.push(staged_block);
        }
        let table_node = tape.param(self.task_table.embeddings().clone());
        param_nodes.push(table_node);
        let pooler_proj_t = match self.pooler.proj() {
            Some(p) => {
                let node = tape.param(p.clone());
                param_nodes.push(node);
                Some(tape.transpose(node))
            }
            None => None,
        };
        let head_node = if self.cfg.trainable_head {
            let node = tape.param(self.head.clone());
            param_nodes.push(node);
            node
        } else {
            tape.constant(self.head.clone())
        };
        let head_t = tape.transpose(head_node);
        Ok(StagedModel { param_nodes, table_node, sublayers, pooler_proj_t, head_t })
    }

    /// Apply one sub-layer to a seq x d_in node. Adapted layers route and
    /// gate per token row; with `adapters_on` false (or a frozen sub-layer)
    /// the base weight applies to the whole sequence at once, which is
    /// bitwise identical to the per-row product.
    #[allow(clippy::too_many_arguments)]
    fn apply_sublayer(
        &self,
        tape: &mut Tape,
        staged: &StagedModel,
        block: usize,
        sub: usize,
        x: NodeId,
        e_node: Option<NodeId>,
        adapters_on: bool,
        decisions: &mut Vec<GatingDecision>,
    ) -> Result<NodeId> {
        match (&self.blocks[block].sublayers[sub], &staged.sublayers[block][sub]) {
            (_, StagedSubLayer::Frozen { w_t }) => Ok(tape.matmul(x, *w_t)?),
            (SubLayer::Adapted(layer), StagedSubLayer::Adapted(nodes)) => {
                if !adapters_on {
                    return Ok(layer.base_forward_on_tape(tape, nodes, x)?);
                }
                let seq = tape.value(x).rows();
                let mut rows = Vec::with_capacity(seq);
                for r in 0..seq {
                    let x_row = tape.row(x, r)?;
                    let (y, decision) = layer.forward_on_tape(tape, nodes, x_row, e_node)?;
                    decisions.push(decision);
                    rows.push(y);
                }
                Ok(tape.stack_rows(&rows)?)
            }
            _ => unreachable!("staging mirrors the block structure"),
        }
    }

    /// Encode one token sequence to final hidden states.
    fn encode(
        &self,
        tape: &mut Tape,
        staged: &StagedModel,
        tokens: &[u32],
        task: usize,
        adapters_on: bool,
        decisions: &mut Vec<GatingDecision>,
    ) -> Result<NodeId> {
        if tokens.is_empty() {
            return Err(TrainError::Core(EptError::Contract("encode: empty sequence".into())));
        }
        for &t in tokens {
            if t as usize >= self.cfg.vocab_size {
                return Err(TrainError::Core(EptError::Index(format!(
                    "encode: token {t} outside vocab of {}",
                    self.cfg.vocab_size
                ))));
            }
        }
        let d = self.cfg.d_model;
        let x0 = Matrix::from_fn(tokens.len(), d, |r, c| self.embed.get(tokens[r] as usize, c));
        let mut x = tape.constant(x0);

        let conditioned =
            matches!(Conditioning::from(self.cfg.router_conditioning), Conditioning::TokenPlusTask);
        let e_node = if conditioned && adapters_on {
            Some(tape.row(staged.table_node, task)?)
        } else {
            None
        };

        let scale = 1.0 / (d as f64).sqrt();
        for b in 0..self.blocks.len() {
            let q = self.apply_sublayer(tape, staged, b, 0, x, e_node, adapters_on, decisions)?;
            let k = self.apply_sublayer(tape, staged, b, 1, x, e_node, adapters_on, decisions)?;
            let v = self.apply_sublayer(tape, staged, b, 2, x, e_node, adapters_on, decisions)?;
            let k_t = tape.transpose(k);
            let raw_scores = tape.matmul(q, k_t)?;
            let scores = tape.scale(raw_scores, scale);
            let attn = tape.softmax_rows(scores, 1.0)?;
            let ctx = tape.matmul(attn, v)?;
            let o = self.apply_sublayer(tape, staged, b, 3, ctx, e_node, adapters_on, decisions)?;
            x = tape.add(x, o)?;

            let up = self.apply_sublayer(tape, staged, b, 4, x, e_node, adapters_on, decisions)?;
            let act = tape.tanh(up);
            let down = self.apply_sublayer(tape, staged, b, 5, act, e_node, adapters_on, decisions)?;
            x = tape.add(x, down)?;
        }
        Ok(x)
    }

    /// Full forward for one sample: logits, pooled contrastive feature, and
    /// the routing decisions made along the way.
    pub fn forward_sample(
        &self,
        tape: &mut Tape,
        staged: &StagedModel,
        tokens: &[u32],
        task: usize,
        adapters_on: bool,
    ) -> Result<SampleForward> {
        if task >= self.cfg.n_tasks() {
            return Err(TrainError::Core(EptError::Index(format!(
                "forward: task {task} out of range for {}",
                self.cfg.n_tasks()
            ))));
        }
        let mut decisions = Vec::new();
        let final_hidden = self.encode(tape, staged, tokens, task, adapters_on, &mut decisions)?;
        let mean = tape.mean_rows(final_hidden);
        let logits = tape.matmul(mean, staged.head_t)?;

        let feature_hidden = if self.cfg.pool_pre_adapter && adapters_on {
            let mut ignored = Vec::new();
            self.encode(tape, staged, tokens, task, false, &mut ignored)?
        } else {
            final_hidden
        };
        let pooled_feature =
            self.pooler.pool_on_tape(tape, feature_hidden, staged.pooler_proj_t)?;

        Ok(SampleForward { logits, pooled_feature, final_hidden, decisions })
    }

    /// Plain (no-tape) logits for one sample; used by evaluation.
    pub fn infer_logits(&self, tokens: &[u32], task: usize) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let staged = self.stage(&mut tape)?;
        let fwd = self.forward_sample(&mut tape, &staged, tokens, task, true)?;
        Ok(tape.value(fwd.logits).row(0).to_vec())
    }
}
