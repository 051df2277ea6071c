use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use trajret_annotate::AnnotationBackend;
use trajret_core::engine::TrainConfig;
use trajret_core::eval::DEFAULT_KS;
use trajret_core::pairs::{LiteCap, Split, SplitConfig};
use trajret_core::token_select::DEFAULT_PATCH_SIZE;

use crate::error::CliError;

/// One input corpus: a directory holding a JSONL manifest and its screenshots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceConfig {
    pub name: String,
    pub root: PathBuf,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtractSection {
    /// Seed of the instruction-template draws.
    pub seed: u64,
    /// Apply the length cap to pairs and pools.
    pub lite: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ImageSection {
    pub patch_size: u32,
}

impl Default for ImageSection {
    fn default() -> Self {
        Self {
            patch_size: DEFAULT_PATCH_SIZE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    pub ks: Vec<usize>,
    /// Splits whose pairs are evaluated.
    pub splits: Vec<Split>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            ks: DEFAULT_KS.to_vec(),
            splits: vec![Split::Ind, Split::Ood],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReportSection {
    /// Screenshots rendered by `report masks`.
    pub mask_limit: usize,
}

impl Default for ReportSection {
    fn default() -> Self {
        Self { mask_limit: 8 }
    }
}

/// Everything that affects artifact bytes. Read from TOML; command-line flags
/// override individual fields and the result is echoed next to each output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub work_dir: PathBuf,
    pub sources: Vec<SourceConfig>,
    pub extract: ExtractSection,
    pub lite: LiteCap,
    pub split: SplitConfig,
    pub images: ImageSection,
    pub annotation: AnnotationBackend,
    pub train: TrainConfig,
    pub eval: EvalSection,
    pub report: ReportSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            work_dir: PathBuf::from("work"),
            sources: Vec::new(),
            extract: ExtractSection::default(),
            lite: LiteCap::default(),
            split: SplitConfig::default(),
            images: ImageSection::default(),
            annotation: AnnotationBackend::default(),
            train: TrainConfig::default(),
            eval: EvalSection::default(),
            report: ReportSection::default(),
        }
    }
}

impl PipelineConfig {
    /// Parses `path`; relative paths inside are resolved against its directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::user(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: Self =
            toml::from_str(&text).map_err(|e| CliError::user(format!("invalid config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.work_dir = base.join(&cfg.work_dir);
        for s in &mut cfg.sources {
            s.root = base.join(&s.root);
        }
        if let Some(lexicon) = &mut cfg.annotation.lexicon {
            *lexicon = base.join(&*lexicon);
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("pipeline config serializes")
    }

    pub fn check(&self) -> Result<(), CliError> {
        if self.images.patch_size == 0 {
            return Err(CliError::user("images.patch_size must be positive"));
        }
        if self.eval.ks.is_empty() || self.eval.ks.contains(&0) {
            return Err(CliError::user("eval.ks must list positive cutoffs"));
        }
        if self.lite.interval_cap == 0 || self.lite.trajectory_cap == 0 {
            return Err(CliError::user("lite caps must be positive"));
        }
        self.train.check().map_err(CliError::from)?;
        self.annotation.check().map_err(CliError::from)
    }
}
