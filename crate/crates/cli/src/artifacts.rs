//! On-disk layout of prepared corpora and training runs.
//!
//! ```text
//! prepared/
//!   registry.toml
//!   records.json
//!   splits/target-<t>/manifest.json
//!   splits/target-<t>/gold.json
//!   digests.json
//! runs/target-<t>/
//!   run_manifest.json
//!   train_log.tsv
//!   checkpoint.json
//!   report.tsv, report.txt
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use xtopic_aes::corpus::{CrossTopicSplit, EssayRecord, SealedGold, SplitManifest, TopicRegistry};
use xtopic_aes::trainer::TrainConfig;
use xtopic_aes::{Error, Result};

pub const REGISTRY_FILE: &str = "registry.toml";
pub const RECORDS_FILE: &str = "records.json";
pub const DIGESTS_FILE: &str = "digests.json";
pub const RUN_MANIFEST_FILE: &str = "run_manifest.json";
pub const LOG_FILE: &str = "train_log.tsv";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const REPORT_TSV: &str = "report.tsv";
pub const REPORT_TXT: &str = "report.txt";

pub fn split_dir(prepared: &Path, target: u32) -> PathBuf {
    prepared.join("splits").join(format!("target-{target}"))
}

pub fn run_dir(runs: &Path, target: u32) -> PathBuf {
    runs.join(format!("target-{target}"))
}

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| file_error(path, e))?;
    Ok(sha256_bytes(&bytes))
}

pub fn file_error(path: &Path, source: std::io::Error) -> Error {
    Error::File {
        path: path.to_path_buf(),
        source,
    }
}

pub fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| file_error(path, e))
}

pub fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| file_error(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| file_error(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_file(path, text)
}

/// A directory written by `xtopic prepare`.
pub struct Prepared {
    pub dir: PathBuf,
    pub registry: TopicRegistry,
    pub records: Vec<EssayRecord>,
}

impl Prepared {
    pub fn open(dir: &Path) -> Result<Self> {
        let registry = TopicRegistry::load(dir.join(REGISTRY_FILE))?;
        let records: Vec<EssayRecord> = read_json(&dir.join(RECORDS_FILE))?;
        Ok(Prepared {
            dir: dir.to_path_buf(),
            registry,
            records,
        })
    }

    /// Target topics with a prepared split, ascending.
    pub fn targets(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.records.iter().map(|r| r.topic_id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids.into_iter()
            .filter(|&t| split_dir(&self.dir, t).join("manifest.json").is_file())
            .collect()
    }

    pub fn split(&self, target: u32) -> Result<CrossTopicSplit> {
        let dir = split_dir(&self.dir, target);
        let manifest: SplitManifest = read_json(&dir.join("manifest.json"))?;
        if manifest.target_topic_id != target {
            return Err(Error::Contract(format!(
                "{} describes target {}, expected {target}",
                dir.display(),
                manifest.target_topic_id
            )));
        }
        Ok(CrossTopicSplit::from_manifest(&manifest, &self.records)?.0)
    }

    /// The sealed gold sidecar, if it was written.
    pub fn gold(&self, target: u32) -> Result<Option<SealedGold>> {
        let path = split_dir(&self.dir, target).join("gold.json");
        if !path.is_file() {
            return Ok(None);
        }
        SealedGold::load(path).map(Some)
    }

    /// Digests of the files a run on `target` reads.
    pub fn input_digests(&self, target: u32) -> Result<BTreeMap<String, String>> {
        let dir = split_dir(&self.dir, target);
        let mut out = BTreeMap::new();
        for path in [
            self.dir.join(REGISTRY_FILE),
            self.dir.join(RECORDS_FILE),
            dir.join("manifest.json"),
            dir.join("gold.json"),
        ] {
            if path.is_file() {
                out.insert(path.display().to_string(), sha256_file(&path)?);
            }
        }
        Ok(out)
    }
}

/// Written before a training run touches any other output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub target_topic_id: u32,
    pub resumed_from: Option<String>,
    pub config: TrainConfig,
    pub inputs: BTreeMap<String, String>,
    /// Digest of the executable that produced the run.
    pub code_version: String,
    pub outputs: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(
        target_topic_id: u32,
        config: &TrainConfig,
        inputs: BTreeMap<String, String>,
        resumed_from: Option<String>,
        outputs: BTreeMap<String, String>,
    ) -> Result<Self> {
        let code_version = match std::env::current_exe() {
            Ok(exe) => sha256_file(&exe)?,
            Err(_) => "unknown".to_string(),
        };
        let mut id_source = config.to_toml_string();
        id_source.push_str(&target_topic_id.to_string());
        for (k, v) in &inputs {
            id_source.push_str(k);
            id_source.push_str(v);
        }
        if let Some(r) = &resumed_from {
            id_source.push_str(r);
        }
        let run_id = sha256_bytes(id_source.as_bytes())[..16].to_string();
        Ok(RunManifest {
            run_id,
            target_topic_id,
            resumed_from,
            config: config.clone(),
            inputs,
            code_version,
            outputs,
        })
    }
}
