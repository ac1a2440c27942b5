//! Versioned on-disk model store shared by the training service and the
//! inference engine.
//!
//! Layout under the store root:
//!   ingest/<table>/data.csv      raw table copy
//!   ingest/<table>/stats.json    schema sidecar + per-column histograms
//!   ingest/<table>/sample.json   stored sample for NDV and fallback paths
//!   ingest/<table>/pending.csv   appended rows awaiting retrain
//!   join/schema.json             collected key classes
//!   <kind>/<id>/<timestamp>.model
//!   flags.json                   fallback flags set by the monitor

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baselines::TableStats;
use crate::bn::TreeBayesNet;
use crate::error::{CardError, Result};
use crate::join::{BucketStats, JoinBucketSpec, PairCounts};
use crate::ndv::NdvModel;
use crate::schema::{JoinSchema, TableData};
use crate::util::now_secs;

pub const MAGIC: &str = "CARDFORGE";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    TreeBn,
    JoinStats,
    Ndv,
}

impl ModelKind {
    pub fn dir_name(self) -> &'static str {
        match self {
            ModelKind::TreeBn => "tree_bn",
            ModelKind::JoinStats => "join_stats",
            ModelKind::Ndv => "ndv",
        }
    }
}

/// One key class's bucket layout plus one member table's statistics; stored
/// one file per (class, table).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JoinArtifact {
    pub class_id: usize,
    pub table: String,
    pub spec: JoinBucketSpec,
    pub stats: BucketStats,
    /// Joint bucket counts with this table's other key classes (stored on
    /// the file of the smaller class id only).
    pub pairs: Vec<PairCounts>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum ModelPayload {
    TreeBn(TreeBayesNet),
    JoinStats(JoinArtifact),
    Ndv(NdvModel),
}

impl ModelPayload {
    pub fn kind(&self) -> ModelKind {
        match self {
            ModelPayload::TreeBn(_) => ModelKind::TreeBn,
            ModelPayload::JoinStats(_) => ModelKind::JoinStats,
            ModelPayload::Ndv(_) => ModelKind::Ndv,
        }
    }
}

/// Self-describing serialization header + payload.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Envelope {
    pub magic: String,
    pub format: u32,
    pub kind: ModelKind,
    pub id: String,
    pub timestamp: i64,
    pub schema_digest: String,
    pub payload: ModelPayload,
}

pub fn join_stats_id(class_id: usize, table: &str) -> String {
    format!("c{class_id}__{table}")
}

pub const NDV_GLOBAL_ID: &str = "global";

#[derive(Debug, Clone)]
pub struct Store {
    root: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StoredSample {
    pub rate: f64,
    pub data: TableData,
}

impl Store {
    pub fn open(root: impl AsRef<Path>) -> Result<Store> {
        let root = root.as_ref().to_path_buf();
        std::fs::create_dir_all(&root)?;
        Ok(Store { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn ingest_dir(&self, table: &str) -> PathBuf {
        self.root.join("ingest").join(table)
    }

    pub fn model_dir(&self, kind: ModelKind, id: &str) -> PathBuf {
        self.root.join(kind.dir_name()).join(id)
    }

    /// Strictly-increasing version per model id; same-second retrains get a
    /// sequence suffix in the file name.
    pub fn next_version(&self, kind: ModelKind, id: &str) -> Result<(i64, PathBuf)> {
        let dir = self.model_dir(kind, id);
        std::fs::create_dir_all(&dir)?;
        let mut latest: i64 = i64::MIN;
        for entry in std::fs::read_dir(&dir)? {
            let entry = entry?;
            if let Some((ts, _)) = parse_model_file_name(&entry.file_name().to_string_lossy()) {
                latest = latest.max(ts);
            }
        }
        let ts = now_secs().max(latest + 1);
        let mut seq = 0u32;
        let path = loop {
            let name = if seq == 0 {
                format!("{ts}.model")
            } else {
                format!("{ts}.{seq}.model")
            };
            let p = dir.join(name);
            if !p.exists() {
                break p;
            }
            seq += 1;
        };
        Ok((ts, path))
    }

    /// Write a payload under a fresh version; returns (timestamp, path).
    pub fn save_model(
        &self,
        id: &str,
        schema_digest: &str,
        payload: ModelPayload,
    ) -> Result<(i64, PathBuf)> {
        let kind = payload.kind();
        let (timestamp, path) = self.next_version(kind, id)?;
        let envelope = Envelope {
            magic: MAGIC.to_string(),
            format: FORMAT_VERSION,
            kind,
            id: id.to_string(),
            timestamp,
            schema_digest: schema_digest.to_string(),
            payload,
        };
        write_atomic(&path, &serde_json::to_vec(&envelope)?)?;
        Ok((timestamp, path))
    }

    /// Newest model file for an id, if any.
    pub fn latest_model_path(&self, kind: ModelKind, id: &str) -> Option<PathBuf> {
        let dir = self.model_dir(kind, id);
        let mut best: Option<(i64, u32, PathBuf)> = None;
        for entry in std::fs::read_dir(dir).ok()? {
            let entry = entry.ok()?;
            let name = entry.file_name().to_string_lossy().to_string();
            if let Some((ts, seq)) = parse_model_file_name(&name) {
                if best.as_ref().map_or(true, |(bt, bs, _)| (ts, seq) > (*bt, *bs)) {
                    best = Some((ts, seq, entry.path()));
                }
            }
        }
        best.map(|(_, _, p)| p)
    }

    pub fn list_model_ids(&self, kind: ModelKind) -> Vec<String> {
        let dir = self.root.join(kind.dir_name());
        let mut ids = Vec::new();
        if let Ok(entries) = std::fs::read_dir(dir) {
            for entry in entries.flatten() {
                if entry.path().is_dir() {
                    ids.push(entry.file_name().to_string_lossy().to_string());
                }
            }
        }
        ids.sort();
        ids
    }

    // ---- ingest side ----

    pub fn save_ingested(
        &self,
        table: &TableData,
        raw_csv: &[u8],
        stats: &TableStats,
        sample: &StoredSample,
    ) -> Result<()> {
        let dir = self.ingest_dir(&table.name);
        std::fs::create_dir_all(&dir)?;
        write_atomic(&dir.join("data.csv"), raw_csv)?;
        write_atomic(&dir.join("stats.json"), &serde_json::to_vec_pretty(stats)?)?;
        write_atomic(&dir.join("sample.json"), &serde_json::to_vec(sample)?)?;
        Ok(())
    }

    pub fn list_tables(&self) -> Vec<String> {
        let mut out = Vec::new();
        if let Ok(entries) = std::fs::read_dir(self.root.join("ingest")) {
            for entry in entries.flatten() {
                if entry.path().join("stats.json").exists() {
                    out.push(entry.file_name().to_string_lossy().to_string());
                }
            }
        }
        out.sort();
        out
    }

    pub fn load_stats(&self, table: &str) -> Result<TableStats> {
        let path = self.ingest_dir(table).join("stats.json");
        let bytes = std::fs::read(&path)
            .map_err(|_| CardError::Store(format!("table {table} not ingested (run ingest first)")))?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    pub fn load_sample(&self, table: &str) -> Result<StoredSample> {
        let path = self.ingest_dir(table).join("sample.json");
        let bytes = std::fs::read(&path)
            .map_err(|_| CardError::Store(format!("no stored sample for table {table}")))?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    pub fn data_csv_path(&self, table: &str) -> PathBuf {
        self.ingest_dir(table).join("data.csv")
    }

    pub fn pending_csv_path(&self, table: &str) -> PathBuf {
        self.ingest_dir(table).join("pending.csv")
    }

    // ---- join schema ----

    pub fn save_join_schema(&self, schema: &JoinSchema) -> Result<()> {
        let dir = self.root.join("join");
        std::fs::create_dir_all(&dir)?;
        write_atomic(&dir.join("schema.json"), &serde_json::to_vec_pretty(schema)?)
    }

    pub fn load_join_schema(&self) -> Result<Option<JoinSchema>> {
        let path = self.root.join("join").join("schema.json");
        if !path.exists() {
            return Ok(None);
        }
        Ok(Some(serde_json::from_slice(&std::fs::read(path)?)?))
    }

    // ---- fallback flags (monitor -> engine) ----

    pub fn load_flags(&self) -> BTreeSet<String> {
        std::fs::read(self.root.join("flags.json"))
            .ok()
            .and_then(|b| serde_json::from_slice(&b).ok())
            .unwrap_or_default()
    }

    pub fn save_flags(&self, flags: &BTreeSet<String>) -> Result<()> {
        write_atomic(&self.root.join("flags.json"), &serde_json::to_vec_pretty(flags)?)
    }

    // ---- update accounting ----

    pub fn load_update_state(&self, table: &str) -> UpdateState {
        std::fs::read(self.ingest_dir(table).join("updates.json"))
            .ok()
            .and_then(|b| serde_json::from_slice(&b).ok())
            .unwrap_or_default()
    }

    pub fn save_update_state(&self, table: &str, state: &UpdateState) -> Result<()> {
        write_atomic(
            &self.ingest_dir(table).join("updates.json"),
            &serde_json::to_vec(state)?,
        )
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct UpdateState {
    pub pending_rows: usize,
    pub trained_rows: usize,
}

fn parse_model_file_name(name: &str) -> Option<(i64, u32)> {
    let stem = name.strip_suffix(".model")?;
    match stem.split_once('.') {
        None => stem.parse().ok().map(|ts| (ts, 0)),
        Some((ts, seq)) => Some((ts.parse().ok()?, seq.parse().ok()?)),
    }
}

/// Write-to-temp-then-rename so concurrent readers never observe a torn file.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Deserialize a model file, checking magic and format version.
/// Returns the envelope and the on-disk byte size.
pub fn load_model_file(path: impl AsRef<Path>) -> Result<(Envelope, usize)> {
    let bytes = std::fs::read(path.as_ref())
        .map_err(|e| CardError::Store(format!("{}: {e}", path.as_ref().display())))?;
    let envelope: Envelope = serde_json::from_slice(&bytes)
        .map_err(|e| CardError::Format(format!("unreadable model file: {e}")))?;
    if envelope.magic != MAGIC {
        return Err(CardError::Format(format!("bad magic `{}`", envelope.magic)));
    }
    if envelope.format != FORMAT_VERSION {
        return Err(CardError::Format(format!(
            "unsupported format version {}",
            envelope.format
        )));
    }
    Ok((envelope, bytes.len()))
}

/// Assemble the join-estimation context from stored artifacts.
pub struct JoinArtifactSet {
    pub specs: BTreeMap<usize, JoinBucketSpec>,
    pub stats: BTreeMap<(String, usize), BucketStats>,
    pub pairs: BTreeMap<(String, usize, usize), PairCounts>,
}

impl JoinArtifactSet {
    pub fn from_artifacts<'a>(artifacts: impl Iterator<Item = &'a JoinArtifact>) -> Self {
        let mut specs = BTreeMap::new();
        let mut stats = BTreeMap::new();
        let mut pairs = BTreeMap::new();
        for a in artifacts {
            specs.entry(a.class_id).or_insert_with(|| a.spec.clone());
            stats.insert((a.table.clone(), a.class_id), a.stats.clone());
            for p in &a.pairs {
                pairs.insert((p.table.clone(), p.class_a, p.class_b), p.clone());
            }
        }
        JoinArtifactSet { specs, stats, pairs }
    }
}
