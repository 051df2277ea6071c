use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::Serialize;

use trajret_core::pairs::{PoolKind, PoolSet, RetrievalPair};
use trajret_core::trajectory::{content_hash, read_manifest, TrajectoryRecord};

use crate::config::PipelineConfig;
use crate::error::CliError;

/// A stage output and the command that produces it.
#[derive(Debug, Clone, Copy)]
pub struct Artifact {
    pub rel: &'static str,
    pub command: &'static str,
}

pub const CORPUS: Artifact = Artifact {
    rel: "corpus/manifest.jsonl",
    command: "ingest",
};
pub const ANNOTATED: Artifact = Artifact {
    rel: "annotate/corpus.jsonl",
    command: "annotate",
};
pub const SILVER: Artifact = Artifact {
    rel: "annotate/silver.jsonl",
    command: "annotate",
};
pub const PAIRS: Artifact = Artifact {
    rel: "extract/pairs.jsonl",
    command: "extract",
};
pub const POOLS: Artifact = Artifact {
    rel: "pools/pools.jsonl",
    command: "pools",
};
pub const SPLIT_PAIRS: Artifact = Artifact {
    rel: "split/pairs.jsonl",
    command: "split",
};
pub const CHECKPOINT: Artifact = Artifact {
    rel: "train/checkpoint.bin",
    command: "train",
};
pub const RECALL: Artifact = Artifact {
    rel: "eval/report.json",
    command: "eval",
};

pub fn store_artifact(kind: PoolKind) -> Artifact {
    Artifact {
        rel: match kind {
            PoolKind::State => "embed/state.bin",
            PoolKind::Trajectory => "embed/trajectory.bin",
            PoolKind::Interval => "embed/interval.bin",
        },
        command: "embed",
    }
}

/// Id map written next to a store: `x.bin` becomes `x.ids.jsonl`.
pub fn ids_path(store: &Path) -> PathBuf {
    store.with_extension("ids.jsonl")
}

/// The working directory holding one subdirectory per stage.
pub struct Workspace {
    pub root: PathBuf,
}

impl Workspace {
    pub fn new(root: PathBuf) -> Self {
        Self { root }
    }

    pub fn path(&self, a: Artifact) -> PathBuf {
        self.root.join(a.rel)
    }

    /// Path of an upstream artifact, or an error naming the command that
    /// produces it.
    pub fn require(&self, a: Artifact) -> Result<PathBuf, CliError> {
        let p = self.path(a);
        if p.is_file() {
            Ok(p)
        } else {
            Err(CliError::user(format!(
                "missing {}; run `trajret {}` first",
                p.display(),
                a.command
            )))
        }
    }

    /// Creates the stage directory and echoes the effective config into it.
    pub fn stage(&self, name: &str, cfg: &PipelineConfig) -> Result<PathBuf, CliError> {
        let dir = self.root.join(name);
        fs::create_dir_all(&dir).map_err(|e| CliError::user(format!("cannot create {}: {e}", dir.display())))?;
        write_bytes(&dir.join("config.toml"), cfg.to_toml().as_bytes())?;
        Ok(dir)
    }

    /// Screenshot root of the ingested corpus.
    pub fn image_root(&self) -> PathBuf {
        self.root.join("corpus")
    }

    /// Reads a corpus manifest and recomputes screenshot hashes.
    pub fn load_corpus(&self, a: Artifact) -> Result<Vec<TrajectoryRecord>, CliError> {
        let path = self.require(a)?;
        let mut corpus = read_manifest(&path)?;
        let root = self.image_root();
        corpus.par_iter_mut().try_for_each(|t| {
            for step in &mut t.steps {
                let p = root.join(&step.state.screenshot.path);
                let bytes = fs::read(&p).map_err(|e| {
                    CliError::integrity(format!("trajectory {}: cannot read {}: {e}", t.id, p.display()))
                })?;
                step.state.content_hash = content_hash(&bytes);
            }
            Ok::<_, CliError>(())
        })?;
        Ok(corpus)
    }

    pub fn load_pools(&self) -> Result<PoolSet, CliError> {
        let path = self.require(POOLS)?;
        let file = open(&path)?;
        Ok(PoolSet::read_jsonl(BufReader::new(file))?)
    }
}

pub fn open(path: &Path) -> Result<fs::File, CliError> {
    fs::File::open(path).map_err(|e| CliError::user(format!("cannot open {}: {e}", path.display())))
}

pub fn create(path: &Path) -> Result<BufWriter<fs::File>, CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::user(format!("cannot create {}: {e}", dir.display())))?;
    }
    fs::File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::user(format!("cannot create {}: {e}", path.display())))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let mut w = create(path)?;
    w.write_all(bytes)
        .and_then(|_| w.flush())
        .map_err(|e| CliError::user(format!("cannot write {}: {e}", path.display())))
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), CliError> {
    let mut out = Vec::new();
    for item in items {
        serde_json::to_writer(&mut out, item).expect("records serialize");
        out.push(b'\n');
    }
    write_bytes(path, &out)
}

/// Parses a JSONL file; a malformed line is an integrity error.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, CliError> {
    let reader = BufReader::new(open(path)?);
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| CliError::user(format!("cannot read {}: {e}", path.display())))?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line)
            .map_err(|e| CliError::integrity(format!("{}:{}: {e}", path.display(), n + 1)))?;
        out.push(item);
    }
    Ok(out)
}

/// Pairs file; every pair must agree with its subtask's key and value kinds.
pub fn read_pairs(path: &Path) -> Result<Vec<RetrievalPair>, CliError> {
    let pairs: Vec<RetrievalPair> = read_jsonl(path)?;
    if let Some(n) = pairs.iter().position(|p| !p.shape_is_consistent()) {
        return Err(CliError::integrity(format!(
            "{}:{}: segments do not match subtask {}",
            path.display(),
            n + 1,
            pairs[n].subtask.code()
        )));
    }
    Ok(pairs)
}

/// Trajectory lookup by id.
pub fn index(corpus: &[TrajectoryRecord]) -> HashMap<&str, &TrajectoryRecord> {
    corpus.iter().map(|t| (t.id.as_str(), t)).collect()
}

/// Source name of every trajectory.
pub fn sources(corpus: &[TrajectoryRecord]) -> HashMap<String, String> {
    corpus.iter().map(|t| (t.id.clone(), t.source.clone())).collect()
}
