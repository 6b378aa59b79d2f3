//! Checkpoint persistence: a JSON manifest (format version, full config
//! echo, tensor directory with per-tensor CRCs, optimizer step, routing
//! stats) next to one raw blob of little-endian f64 tensors.
//!
//! Round trips are bitwise lossless. Loading is strict: every expected
//! tensor must be present exactly once, nothing extra, every CRC valid.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ept_core::numeric::Matrix;
use ept_core::router::RoutingStats;
use serde::{Deserialize, Serialize};

use crate::backbone::EptModel;
use crate::config::EptConfig;
use crate::error::{Result, TrainError};
use crate::optim::AdamWState;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "tensors.bin";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
    /// Byte offset into the blob.
    offset: u64,
    /// Element count (f64 values).
    len: usize,
    crc32: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RoutingStatsDto {
    n_tasks: usize,
    n_experts: usize,
    k: usize,
    counts: Vec<u64>,
    gate_mass: Vec<f64>,
    tokens: Vec<u64>,
}

impl From<&RoutingStats> for RoutingStatsDto {
    fn from(s: &RoutingStats) -> Self {
        let (counts, gate_mass, tokens) = s.parts();
        RoutingStatsDto {
            n_tasks: s.n_tasks(),
            n_experts: s.n_experts(),
            k: s.k(),
            counts: counts.to_vec(),
            gate_mass: gate_mass.to_vec(),
            tokens: tokens.to_vec(),
        }
    }
}

impl RoutingStatsDto {
    fn into_stats(self) -> Result<RoutingStats> {
        RoutingStats::from_parts(
            self.n_tasks,
            self.n_experts,
            self.k,
            self.counts,
            self.gate_mass,
            self.tokens,
        )
        .map_err(TrainError::Core)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    step: u64,
    config: EptConfig,
    tensors: Vec<TensorEntry>,
    routing: Option<RoutingStatsDto>,
    /// Marks a merged (dense-weights-only) export.
    #[serde(default)]
    merged: bool,
    #[serde(default)]
    merge_policy: Option<String>,
}

/// An on-disk checkpoint, decoded.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: EptConfig,
    pub step: u64,
    pub tensors: BTreeMap<String, Matrix>,
    pub routing: Option<RoutingStats>,
    pub merged: bool,
    pub merge_policy: Option<String>,
}

fn blob_append(blob: &mut Vec<u8>, entries: &mut Vec<TensorEntry>, name: &str, m: &Matrix) {
    let offset = blob.len() as u64;
    let start = blob.len();
    for v in m.as_slice() {
        blob.extend_from_slice(&v.to_le_bytes());
    }
    entries.push(TensorEntry {
        name: name.to_string(),
        rows: m.rows(),
        cols: m.cols(),
        offset,
        len: m.len(),
        crc32: crc32fast::hash(&blob[start..]),
    });
}

fn write_files(dir: &Path, manifest: &Manifest, blob: &[u8]) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(BLOB_FILE), blob)?;
    let json = serde_json::to_string_pretty(manifest)
        .map_err(|e| TrainError::Manifest(format!("manifest encode: {e}")))?;
    fs::write(dir.join(MANIFEST_FILE), json)?;
    Ok(())
}

/// Persist a training state: every trainable tensor plus the optimizer
/// moments, step counter, full config echo, and routing stats.
pub fn save_checkpoint(
    dir: &Path,
    model: &EptModel,
    opt: &AdamWState,
    routing: Option<&RoutingStats>,
) -> Result<()> {
    let names = model.param_names();
    let params = model.params();
    let mut blob = Vec::new();
    let mut entries = Vec::new();
    for (name, m) in names.iter().zip(&params) {
        blob_append(&mut blob, &mut entries, name, m);
    }
    for (name, m) in names.iter().zip(&opt.m) {
        blob_append(&mut blob, &mut entries, &format!("adam.m.{name}"), m);
    }
    for (name, v) in names.iter().zip(&opt.v) {
        blob_append(&mut blob, &mut entries, &format!("adam.v.{name}"), v);
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        step: opt.step,
        config: model.cfg().clone(),
        tensors: entries,
        routing: routing.map(RoutingStatsDto::from),
        merged: false,
        merge_policy: None,
    };
    write_files(dir, &manifest, &blob)
}

/// Persist an arbitrary named tensor set (merged exports).
pub fn save_tensor_set(
    dir: &Path,
    config: &EptConfig,
    step: u64,
    tensors: &[(String, Matrix)],
    policy: &str,
) -> Result<()> {
    let mut blob = Vec::new();
    let mut entries = Vec::new();
    for (name, m) in tensors {
        blob_append(&mut blob, &mut entries, name, m);
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        step,
        config: config.clone(),
        tensors: entries,
        routing: None,
        merged: true,
        merge_policy: Some(policy.to_string()),
    };
    write_files(dir, &manifest, &blob)
}

/// Decode a checkpoint directory, verifying version and per-tensor CRCs.
pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let manifest_text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let manifest: Manifest = serde_json::from_str(&manifest_text)
        .map_err(|e| TrainError::Manifest(format!("manifest parse: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(TrainError::Manifest(format!(
            "unsupported format version {} (expected {FORMAT_VERSION})",
            manifest.format_version
        )));
    }
    let blob = fs::read(dir.join(BLOB_FILE))?;
    let mut tensors = BTreeMap::new();
    for entry in &manifest.tensors {
        let start = entry.offset as usize;
        let bytes = entry.len * 8;
        let end = start
            .checked_add(bytes)
            .ok_or_else(|| TrainError::Manifest(format!("tensor {}: offset overflow", entry.name)))?;
        if end > blob.len() {
            return Err(TrainError::Manifest(format!(
                "tensor {}: blob too short ({} < {end})",
                entry.name,
                blob.len()
            )));
        }
        if entry.len != entry.rows * entry.cols {
            return Err(TrainError::Manifest(format!(
                "tensor {}: length {} does not fill {}x{}",
                entry.name, entry.len, entry.rows, entry.cols
            )));
        }
        let slice = &blob[start..end];
        if crc32fast::hash(slice) != entry.crc32 {
            return Err(TrainError::Integrity(format!(
                "tensor {}: checksum mismatch",
                entry.name
            )));
        }
        let mut data = Vec::with_capacity(entry.len);
        for chunk in slice.chunks_exact(8) {
            data.push(f64::from_le_bytes(chunk.try_into().expect("8-byte chunk")));
        }
        let matrix = Matrix::from_vec(entry.rows, entry.cols, data).map_err(TrainError::Core)?;
        if tensors.insert(entry.name.clone(), matrix).is_some() {
            return Err(TrainError::Manifest(format!(
                "tensor {} appears twice in the manifest",
                entry.name
            )));
        }
    }
    let routing = manifest.routing.map(RoutingStatsDto::into_stats).transpose()?;
    Ok(Checkpoint {
        config: manifest.config,
        step: manifest.step,
        tensors,
        routing,
        merged: manifest.merged,
        merge_policy: manifest.merge_policy,
    })
}

/// Rebuild a model and optimizer from a checkpoint. The frozen weights are
/// regenerated from the config echo; trainable tensors and moments are
/// restored bitwise. The manifest must contain exactly the expected set.
pub fn restore(ckpt: &Checkpoint) -> Result<(EptModel, AdamWState)> {
    if ckpt.merged {
        return Err(TrainError::Manifest(
            "cannot restore a training state from a merged export".into(),
        ));
    }
    let mut model = EptModel::new(ckpt.config.clone())?;
    let names = model.param_names();

    let mut expected: Vec<String> = Vec::with_capacity(names.len() * 3);
    expected.extend(names.iter().cloned());
    expected.extend(names.iter().map(|n| format!("adam.m.{n}")));
    expected.extend(names.iter().map(|n| format!("adam.v.{n}")));
    for name in &expected {
        if !ckpt.tensors.contains_key(name) {
            return Err(TrainError::Manifest(format!("missing tensor {name}")));
        }
    }
    if ckpt.tensors.len() != expected.len() {
        let extra: Vec<&String> = ckpt
            .tensors
            .keys()
            .filter(|k| !expected.contains(k))
            .collect();
        return Err(TrainError::Manifest(format!("unknown tensors in manifest: {extra:?}")));
    }

    {
        let mut params = model.params_mut();
        for (i, name) in names.iter().enumerate() {
            let tensor = &ckpt.tensors[name];
            if tensor.shape() != params[i].shape() {
                return Err(TrainError::Manifest(format!(
                    "tensor {name}: shape {:?} does not match model {:?}",
                    tensor.shape(),
                    params[i].shape()
                )));
            }
            *params[i] = tensor.clone();
        }
    }
    let opt = AdamWState {
        m: names.iter().map(|n| ckpt.tensors[&format!("adam.m.{n}")].clone()).collect(),
        v: names.iter().map(|n| ckpt.tensors[&format!("adam.v.{n}")].clone()).collect(),
        step: ckpt.step,
    };
    Ok((model, opt))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::AdamWState;

    fn small_model() -> (EptModel, AdamWState) {
        let mut cfg = EptConfig::miniature();
        cfg.seed = 9;
        let mut model = EptModel::new(cfg).unwrap();
        // make the state non-trivial
        {
            let mut params = model.params_mut();
            for (i, p) in params.iter_mut().enumerate() {
                for j in 0..p.len() {
                    p.as_mut_slice()[j] = ((i * 31 + j) as f64 * 0.37).sin();
                }
            }
        }
        let mut opt = AdamWState::new(&model.params());
        opt.step = 17;
        for m in opt.m.iter_mut() {
            for j in 0..m.len() {
                m.as_mut_slice()[j] = 0.01 * j as f64;
            }
        }
        (model, opt)
    }

    #[test]
    fn roundtrip_is_bitwise() {
        let (model, opt) = small_model();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &model, &opt, None).unwrap();
        let ckpt = load_checkpoint(dir.path()).unwrap();
        let (restored, ropt) = restore(&ckpt).unwrap();
        assert_eq!(ropt.step, 17);
        for (a, b) in model.params().iter().zip(restored.params().iter()) {
            assert!(a.bits_eq(b));
        }
        for (a, b) in opt.m.iter().zip(&ropt.m) {
            assert!(a.bits_eq(b));
        }
        for (a, b) in opt.v.iter().zip(&ropt.v) {
            assert!(a.bits_eq(b));
        }
    }

    #[test]
    fn corrupted_blob_names_the_tensor() {
        let (model, opt) = small_model();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &model, &opt, None).unwrap();
        let blob_path = dir.path().join(BLOB_FILE);
        let mut blob = fs::read(&blob_path).unwrap();
        blob[3] ^= 0x40;
        fs::write(&blob_path, blob).unwrap();
        match load_checkpoint(dir.path()) {
            Err(TrainError::Integrity(msg)) => assert!(msg.contains("block0.q.subspace.b"), "{msg}"),
            other => panic!("expected integrity error, got {other:?}"),
        }
    }

    #[test]
    fn extra_and_missing_tensors_are_manifest_errors() {
        let (model, opt) = small_model();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &model, &opt, None).unwrap();
        let mut ckpt = load_checkpoint(dir.path()).unwrap();
        ckpt.tensors.insert("bogus".into(), Matrix::scalar(1.0));
        match restore(&ckpt) {
            Err(TrainError::Manifest(msg)) => assert!(msg.contains("bogus"), "{msg}"),
            other => panic!("expected manifest error, got {other:?}"),
        }

        let mut ckpt = load_checkpoint(dir.path()).unwrap();
        let key = "block0.q.router.w_r".to_string();
        ckpt.tensors.remove(&key);
        match restore(&ckpt) {
            Err(TrainError::Manifest(msg)) => assert!(msg.contains(&key), "{msg}"),
            other => panic!("expected manifest error, got {other:?}"),
        }
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let (model, opt) = small_model();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &model, &opt, None).unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        let text = fs::read_to_string(&path)
            .unwrap()
            .replace("\"format_version\": 1", "\"format_version\": 2");
        fs::write(&path, text).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(TrainError::Manifest(_))));
    }

    #[test]
    fn routing_stats_roundtrip() {
        let (model, opt) = small_model();
        let mut stats = RoutingStats::new(2, 2, 1);
        ept_core::router::record_routing(&mut stats, 0, &[1], &[0.0, 1.0]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &model, &opt, Some(&stats)).unwrap();
        let ckpt = load_checkpoint(dir.path()).unwrap();
        assert_eq!(ckpt.routing.unwrap(), stats);
    }
}
