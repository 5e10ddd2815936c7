//! Pipeline configuration, read from one TOML file with a section per stage.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cleanse::CleansePolicy;
use crate::cluster::ClusterParams;
use crate::combine::MergeParams;
use crate::evalkit::{HardTrialParams, MatrixParams, SplitSpec};
use crate::manifest::{QualityPolicy, SegmentationOptions};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("cannot parse config {path}: {source}")]
    Parse { path: PathBuf, source: Box<toml::de::Error> },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("input file {0} does not exist")]
    MissingInput(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub videos: PathBuf,
    pub segments: PathBuf,
    pub audio_emb: PathBuf,
    pub face_emb: PathBuf,
    pub genre_probs: PathBuf,
    #[serde(default = "default_workdir")]
    pub workdir: PathBuf,
}

fn default_workdir() -> PathBuf {
    PathBuf::from("work")
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub seed: u64,
    /// Worker threads; 0 uses every available core.
    pub jobs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenreSection {
    /// Utterances whose top genre probability is below this keep genre unset.
    pub min_conf: f64,
}

impl Default for GenreSection {
    fn default() -> Self {
        Self { min_conf: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSection {
    pub test_speaker_count: usize,
}

impl Default for SplitSection {
    fn default() -> Self {
        Self { test_speaker_count: SplitSpec::default().test_speaker_count }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrialsSection {
    pub easy_pairs: usize,
    pub hard_pairs: usize,
    pub cross_genre_frac: f64,
    pub hard_neg_percentile: f64,
    pub exact_pair_limit: usize,
}

impl Default for TrialsSection {
    fn default() -> Self {
        let hard = HardTrialParams::default();
        Self {
            easy_pairs: 2000,
            hard_pairs: hard.n_pairs,
            cross_genre_frac: hard.cross_genre_frac,
            hard_neg_percentile: hard.hard_neg_percentile,
            exact_pair_limit: hard.exact_pair_limit,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatrixSection {
    pub utts_per_genre: usize,
    pub pairs_per_cell: usize,
}

impl Default for MatrixSection {
    fn default() -> Self {
        let m = MatrixParams::default();
        Self { utts_per_genre: m.utts_per_genre, pairs_per_cell: m.pairs_per_cell }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub paths: Paths,
    #[serde(default)]
    pub run: RunSection,
    #[serde(default)]
    pub filter: QualityPolicy,
    #[serde(default)]
    pub segment: SegmentationOptions,
    #[serde(default)]
    pub cluster: ClusterParams,
    #[serde(default)]
    pub cleanse: CleansePolicy,
    #[serde(default)]
    pub combine: MergeParams,
    #[serde(default)]
    pub genre: GenreSection,
    #[serde(default)]
    pub split: SplitSection,
    #[serde(default)]
    pub trials: TrialsSection,
    #[serde(default)]
    pub matrix: MatrixSection,
}

impl PipelineConfig {
    /// Reads and validates a config; relative paths resolve against the file's directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text =
            std::fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.to_path_buf(), source })?;
        let mut cfg: Self = toml::from_str(&text)
            .map_err(|source| ConfigError::Parse { path: path.to_path_buf(), source: Box::new(source) })?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let p = &mut self.paths;
        for path in [&mut p.videos, &mut p.segments, &mut p.audio_emb, &mut p.face_emb, &mut p.genre_probs, &mut p.workdir] {
            if path.is_relative() {
                *path = base.join(&*path);
            }
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        self.cluster.validate().map_err(|e| invalid(&e))?;
        self.cleanse.validate().map_err(|e| invalid(&e))?;
        self.combine.validate().map_err(|e| invalid(&e))?;
        self.hard_trial_params().validate().map_err(|e| invalid(&e))?;
        if !(0.0..=1.0).contains(&self.genre.min_conf) {
            return Err(ConfigError::Invalid(format!("genre.min_conf must lie in [0, 1], got {}", self.genre.min_conf)));
        }
        if !(self.segment.min_duration_s >= 0.0) || self.segment.sample_rate_hz == 0 {
            return Err(ConfigError::Invalid("segment.min_duration_s must be >= 0 and sample_rate_hz positive".into()));
        }
        if self.split.test_speaker_count == 0 {
            return Err(ConfigError::Invalid("split.test_speaker_count must be positive".into()));
        }
        if self.matrix.utts_per_genre == 0 || self.matrix.pairs_per_cell < 2 {
            return Err(ConfigError::Invalid("matrix.utts_per_genre must be positive and pairs_per_cell >= 2".into()));
        }
        Ok(())
    }

    /// Fails on the first configured input file that does not exist.
    pub fn check_inputs(&self) -> Result<(), ConfigError> {
        let p = &self.paths;
        for path in [&p.videos, &p.segments, &p.audio_emb, &p.face_emb, &p.genre_probs] {
            if !path.is_file() {
                return Err(ConfigError::MissingInput(path.clone()));
            }
        }
        Ok(())
    }

    pub fn split_spec(&self) -> SplitSpec {
        SplitSpec { test_speaker_count: self.split.test_speaker_count, seed: self.run.seed }
    }

    pub fn easy_trial_seed(&self) -> u64 {
        self.run.seed.wrapping_add(1)
    }

    pub fn hard_trial_params(&self) -> HardTrialParams {
        HardTrialParams {
            n_pairs: self.trials.hard_pairs,
            cross_genre_frac: self.trials.cross_genre_frac,
            hard_neg_percentile: self.trials.hard_neg_percentile,
            seed: self.run.seed.wrapping_add(2),
            exact_pair_limit: self.trials.exact_pair_limit,
        }
    }

    pub fn matrix_params(&self) -> MatrixParams {
        MatrixParams {
            utts_per_genre: self.matrix.utts_per_genre,
            pairs_per_cell: self.matrix.pairs_per_cell,
            seed: self.run.seed.wrapping_add(3),
        }
    }
}
