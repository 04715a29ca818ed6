//! Partition stage on disk: one directory per tier holding the selected
//! documents and their manifest.

use std::collections::HashMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use rewrite_forge_core::partition::PartitionError;
use rewrite_forge_core::{
    select_subset, CountingScheme, Document, QualityTier, SubsetManifest, TierPolicy, TokenCounter,
};
use serde::{Deserialize, Serialize};

use crate::manifest::{file_sha256, write_json, InputChecksum, ARTIFACT_VERSION};
use crate::records::{read_documents_strict, write_documents_to};

pub const MANIFEST_FILE: &str = "subset-manifest.json";
pub const DOCUMENTS_FILE: &str = "documents.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetFile {
    pub artifact_version: String,
    pub input: InputChecksum,
    /// Input lines that failed validation and were left out.
    pub skipped_records: u64,
    pub documents_file: String,
    pub documents_sha256: String,
    #[serde(flatten)]
    pub manifest: SubsetManifest,
}

pub fn tier_dir(root: &Path, tier: QualityTier) -> PathBuf {
    root.join("partition").join(tier.as_str())
}

/// Runs selection and returns the manifest with the selected documents in
/// admission order.
pub fn partition<'a>(
    documents: &'a [Document],
    tier: QualityTier,
    budget: u64,
    seed: u64,
    policy: &TierPolicy,
    scheme: &CountingScheme,
) -> Result<(SubsetManifest, Vec<&'a Document>), PartitionError> {
    let manifest = select_subset(documents, tier, budget, seed, policy, scheme.clone())?;
    let by_id: HashMap<&str, &Document> = documents.iter().map(|d| (d.id.as_str(), d)).collect();
    let selected = manifest.document_ids.iter().map(|id| by_id[id.as_str()]).collect();
    Ok((manifest, selected))
}

pub fn write_subset(
    dir: &Path,
    manifest: SubsetManifest,
    selected: &[&Document],
    input: InputChecksum,
    skipped_records: u64,
) -> io::Result<SubsetFile> {
    fs::create_dir_all(dir)?;
    let docs_path = dir.join(DOCUMENTS_FILE);
    write_documents_to(&docs_path, selected).map_err(|e| e.source)?;
    let file = SubsetFile {
        artifact_version: ARTIFACT_VERSION.to_string(),
        input,
        skipped_records,
        documents_file: DOCUMENTS_FILE.to_string(),
        documents_sha256: file_sha256(&docs_path)?,
        manifest,
    };
    write_json(&dir.join(MANIFEST_FILE), &file)?;
    Ok(file)
}

/// Loads a tier subset, checking the document file against its manifest.
pub fn read_subset(dir: &Path, counter: &TokenCounter) -> anyhow::Result<(SubsetFile, Vec<Document>)> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path)
        .with_context(|| format!("reading {} (run `partition` first)", manifest_path.display()))?;
    let file: SubsetFile =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", manifest_path.display()))?;
    let docs_path = dir.join(&file.documents_file);
    if file_sha256(&docs_path)? != file.documents_sha256 {
        bail!(
            "{} does not match the checksum in {}",
            docs_path.display(),
            manifest_path.display()
        );
    }
    let docs = read_documents_strict(&docs_path, counter, false).with_context(|| docs_path.display().to_string())?;
    let ids: Vec<&str> = docs.iter().map(|d| d.id.as_str()).collect();
    if ids
        != file
            .manifest
            .document_ids
            .iter()
            .map(String::as_str)
            .collect::<Vec<_>>()
    {
        bail!(
            "{} does not list the documents named in its manifest",
            docs_path.display()
        );
    }
    let total: u64 = docs.iter().map(|d| d.token_count).sum();
    if total != file.manifest.total_tokens {
        bail!(
            "{} recounts to {total} tokens but the manifest says {}; was the counting scheme changed?",
            docs_path.display(),
            file.manifest.total_tokens
        );
    }
    Ok((file, docs))
}
