//! Condition directories: shards, the condition manifest and the training
//! config.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use rewrite_forge_core::digest::Checksum;
use rewrite_forge_core::mixture::{emit_training_config, plan_shards};
use rewrite_forge_core::{ConditionDataset, ConditionSpec, Document, TokenCounter, TrainingConfig};
use serde::{Deserialize, Serialize};

use crate::manifest::{file_sha256, write_json, ARTIFACT_VERSION};
use crate::records::{read_documents_strict, write_document};

pub const MANIFEST_FILE: &str = "condition-manifest.json";
pub const TRAINING_CONFIG_FILE: &str = "training-config.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardDescriptor {
    pub file: String,
    pub sha256: String,
    pub token_count: u64,
    pub doc_count: u64,
}

/// Where the condition's documents came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionInputs {
    pub subset_seed: u64,
    pub subset_manifest_sha256: String,
    pub subset_tokens: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rewrite: Option<RewriteInputs>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewriteInputs {
    pub model: String,
    pub attempt_seed: u64,
    pub sampling_digest: String,
    pub template_digest: String,
    pub rewrite_manifest_sha256: String,
    pub synthetic_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionManifest {
    pub artifact_version: String,
    pub condition: String,
    pub spec: ConditionSpec,
    pub tolerance_fraction: f64,
    pub tolerance_tokens: u64,
    pub total_tokens: u64,
    pub unique_tokens: u64,
    pub epochs: u32,
    pub doc_count: u64,
    pub shard_tokens: u64,
    pub shards: Vec<ShardDescriptor>,
    pub inputs: ConditionInputs,
    pub training_config: TrainingConfig,
}

pub fn condition_dir(root: &Path, spec: &ConditionSpec) -> PathBuf {
    root.join("conditions").join(spec.name())
}

pub fn shard_file(index: usize) -> String {
    format!("shard-{index:05}.jsonl")
}

/// Writes `docs`, in order, as shards of at most `shard_tokens` tokens.
pub fn write_shards(dir: &Path, docs: &[&Document], shard_tokens: u64) -> anyhow::Result<Vec<ShardDescriptor>> {
    let plan = plan_shards(docs, shard_tokens)?;
    fs::create_dir_all(dir)?;
    let mut out = Vec::with_capacity(plan.len());
    for (i, range) in plan.into_iter().enumerate() {
        let file = shard_file(i);
        let path = dir.join(&file);
        let mut sink = BufWriter::new(File::create(&path).with_context(|| path.display().to_string())?);
        let mut checksum = Checksum::new();
        let mut tokens = 0;
        for doc in &docs[range.clone()] {
            let mut line = Vec::new();
            write_document(doc, &mut line)?;
            checksum.update(&line);
            sink.write_all(&line)?;
            tokens += doc.token_count;
        }
        sink.into_inner().map_err(io::IntoInnerError::into_error)?.sync_all()?;
        out.push(ShardDescriptor {
            file,
            sha256: checksum.finish_hex(),
            token_count: tokens,
            doc_count: range.len() as u64,
        });
    }
    Ok(out)
}

/// Concatenates the shards back into the document sequence, verifying each
/// checksum and count.
pub fn read_shards(dir: &Path, shards: &[ShardDescriptor], counter: &TokenCounter) -> anyhow::Result<Vec<Document>> {
    let mut all = Vec::new();
    for shard in shards {
        let path = dir.join(&shard.file);
        let digest = file_sha256(&path).with_context(|| path.display().to_string())?;
        if digest != shard.sha256 {
            bail!("{} does not match its recorded checksum", path.display());
        }
        let docs = read_documents_strict(&path, counter, true).with_context(|| path.display().to_string())?;
        let tokens: u64 = docs.iter().map(|d| d.token_count).sum();
        if docs.len() as u64 != shard.doc_count || tokens != shard.token_count {
            bail!(
                "{} holds {} documents / {tokens} tokens, expected {} / {}",
                path.display(),
                docs.len(),
                shard.doc_count,
                shard.token_count
            );
        }
        all.extend(docs);
    }
    Ok(all)
}

/// Writes the shards, the training config and the manifest of one condition.
pub fn write_condition(
    dir: &Path,
    dataset: &ConditionDataset<'_>,
    tolerance_fraction: f64,
    shard_tokens: u64,
    inputs: ConditionInputs,
) -> anyhow::Result<ConditionManifest> {
    if dir.exists() {
        // stale shards from a larger earlier run would otherwise linger
        for entry in fs::read_dir(dir)? {
            let path = entry?.path();
            let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
            if name.starts_with("shard-") && name.ends_with(".jsonl") {
                fs::remove_file(&path)?;
            }
        }
    }
    let shards = write_shards(dir, &dataset.sequence, shard_tokens)?;
    let training_config = emit_training_config(&dataset.spec);
    write_json(&dir.join(TRAINING_CONFIG_FILE), &training_config)?;
    let manifest = ConditionManifest {
        artifact_version: ARTIFACT_VERSION.to_string(),
        condition: dataset.spec.name(),
        spec: dataset.spec.clone(),
        tolerance_fraction,
        tolerance_tokens: dataset.tolerance_tokens,
        total_tokens: dataset.total_tokens,
        unique_tokens: dataset.unique_tokens,
        epochs: dataset.epochs,
        doc_count: dataset.sequence.len() as u64,
        shard_tokens,
        shards,
        inputs,
        training_config,
    };
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

pub fn read_condition_manifest(dir: &Path) -> anyhow::Result<ConditionManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).with_context(|| path.display().to_string())?;
    serde_json::from_str(&text).with_context(|| path.display().to_string())
}
