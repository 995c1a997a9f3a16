//! One directory per run:
//!
//! ```text
//! <out>/config.txt                resolved configuration
//! <out>/manifest.txt              counts, seed, config hash
//! <out>/splits/{train,test,valid,discarded}.tsv
//! <out>/metrics/{pretrain,finetune}/
//! <out>/checkpoints/final/        embeddings handed to evaluation
//! <out>/checkpoints/<stage>/      best table of each stage
//! <out>/checkpoints/state/<stage>/  resumable optimiser state
//! <out>/logs/train.jsonl          one record per epoch
//! <out>/logs/pair_losses.tsv      first-stage per-pair losses
//! <out>/provenance.json
//! <out>/reports/
//! ```
//!
//! Every file carries the config hash: as a `config_hash` key in manifests
//! and JSON records, or as a leading `# config_hash=...` comment elsewhere.

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde_json::Value;

use crate::error::{CliError, CliResult};

pub const HASH_KEY: &str = "config_hash";

#[derive(Clone, Debug)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn new(root: &Path) -> Self {
        RunDir { root: root.to_path_buf() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.txt")
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.txt")
    }

    pub fn split(&self, part: &str) -> PathBuf {
        self.root.join("splits").join(format!("{part}.tsv"))
    }

    pub fn metrics(&self, stage: &str) -> PathBuf {
        self.root.join("metrics").join(stage)
    }

    pub fn final_checkpoint(&self) -> PathBuf {
        self.root.join("checkpoints").join("final")
    }

    pub fn stage_checkpoint(&self, stage: &str) -> PathBuf {
        self.root.join("checkpoints").join(stage)
    }

    pub fn state(&self, stage: &str) -> PathBuf {
        self.root.join("checkpoints").join("state").join(stage)
    }

    pub fn train_log(&self) -> PathBuf {
        self.root.join("logs").join("train.jsonl")
    }

    pub fn pair_losses(&self) -> PathBuf {
        self.root.join("logs").join("pair_losses.tsv")
    }

    pub fn provenance(&self) -> PathBuf {
        self.root.join("provenance.json")
    }

    pub fn report(&self, name: &str) -> PathBuf {
        self.root.join("reports").join(name)
    }
}

/// Writes `text`, creating parent directories.
pub fn write_text(path: &Path, text: &str) -> CliResult<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| CliError::runtime(anyhow::anyhow!("{}: {e}", parent.display())))?;
    }
    fs::write(path, text).map_err(|e| CliError::runtime(anyhow::anyhow!("{}: {e}", path.display())))
}

/// `# config_hash=<hash>` comment line.
pub fn stamp(hash: &str) -> String {
    format!("# {HASH_KEY}={hash}\n")
}

/// Hash stamp from the leading comment block of a text file, if any.
pub fn read_stamp(path: &Path) -> CliResult<Option<String>> {
    let file = fs::File::open(path).map_err(|e| CliError::runtime(anyhow::anyhow!("{}: {e}", path.display())))?;
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| CliError::runtime(anyhow::anyhow!("{}: {e}", path.display())))?;
        let Some(comment) = line.strip_prefix('#') else { break };
        if let Some(h) = comment.trim().strip_prefix(HASH_KEY).and_then(|r| r.strip_prefix('=')) {
            return Ok(Some(h.trim().to_string()));
        }
    }
    Ok(None)
}

/// Adds the hash to a JSON object and renders it on one line.
pub fn json_line(mut record: Value, hash: &str) -> String {
    if let Value::Object(map) = &mut record {
        map.insert(HASH_KEY.into(), Value::String(hash.to_string()));
    }
    let mut line = serde_json::to_string(&record).expect("plain JSON value");
    line.push('\n');
    line
}

/// `key=value` manifest text, keys in the given order.
pub fn manifest_text(entries: &[(&str, String)]) -> String {
    entries.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}
