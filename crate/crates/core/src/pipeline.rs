//! Stage runner with checksum-keyed resume.
//!
//! Every stage reads named inputs, writes its artifacts into the work
//! directory and then records a stamp in `.stamps/<stage>.json` holding the
//! SHA-256 of each input, of the config it depends on, and of each output.
//! A stage whose stamp still matches is skipped.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::cleanse::{self, CleanseError};
use crate::cluster::{self, ClusterError, ClusterRecord, SpeakerCluster};
use crate::combine::{self, CombineError};
use crate::config::{ConfigError, PipelineConfig};
use crate::embedding::{self, EmbeddingError, EmbeddingTable, Modality};
use crate::evalkit::{self, EvalError, Split};
use crate::genre::{self, GenreError, GenreProbs};
use crate::manifest::{self, ManifestError, ManifestRecord, SegmentRecord, UtteranceRecord, VideoRecord};
use crate::par;

pub const VIDEOS_FILTERED: &str = "videos.filtered.jsonl";
pub const UTTS_SEGMENTED: &str = "utterances.segmented.jsonl";
pub const CLUSTERS: &str = "clusters.jsonl";
pub const CLEANSE_REPORT: &str = "cleanse_report.jsonl";
pub const CLUSTERS_CLEANSED: &str = "clusters.cleansed.jsonl";
pub const SPEAKERS: &str = "speakers.jsonl";
pub const UTTS_SPEAKERS: &str = "utterances.speakers.jsonl";
pub const UTTS_FINAL: &str = "utterances.jsonl";
pub const STATS: &str = "stats.json";
pub const SPLIT: &str = "split.json";
pub const TRIALS_EASY: &str = "trials_easy.txt";
pub const TRIALS_HARD: &str = "trials_hard.txt";
pub const STAMP_DIR: &str = ".stamps";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Filter,
    Segment,
    Cluster,
    Cleanse,
    Combine,
    Genre,
    Stats,
    Split,
    Trials,
}

impl Stage {
    pub const ALL: [Stage; 9] = [
        Stage::Filter,
        Stage::Segment,
        Stage::Cluster,
        Stage::Cleanse,
        Stage::Combine,
        Stage::Genre,
        Stage::Stats,
        Stage::Split,
        Stage::Trials,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Filter => "filter",
            Stage::Segment => "segment",
            Stage::Cluster => "cluster",
            Stage::Cleanse => "cleanse",
            Stage::Combine => "combine",
            Stage::Genre => "genre",
            Stage::Stats => "stats",
            Stage::Split => "split",
            Stage::Trials => "trials",
        }
    }

    /// Files this stage writes into the work directory.
    pub fn outputs(self) -> &'static [&'static str] {
        match self {
            Stage::Filter => &[VIDEOS_FILTERED],
            Stage::Segment => &[UTTS_SEGMENTED],
            Stage::Cluster => &[CLUSTERS],
            Stage::Cleanse => &[CLEANSE_REPORT, CLUSTERS_CLEANSED],
            Stage::Combine => &[SPEAKERS, UTTS_SPEAKERS],
            Stage::Genre => &[UTTS_FINAL],
            Stage::Stats => &[STATS],
            Stage::Split => &[SPLIT],
            Stage::Trials => &[TRIALS_EASY, TRIALS_HARD],
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Stage::ALL.into_iter().find(|st| st.name() == s).ok_or_else(|| format!("unknown stage {s:?}"))
    }
}

/// Errors from the modules, wrapped so the runner can classify them.
#[derive(Debug, Error)]
pub enum ModuleError {
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error(transparent)]
    Cleanse(#[from] CleanseError),
    #[error(transparent)]
    Combine(#[from] CombineError),
    #[error(transparent)]
    Genre(#[from] GenreError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Broad failure classes, one per exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FailureKind {
    Config,
    Input,
    Invariant,
    Other,
}

impl FailureKind {
    pub fn exit_code(self) -> i32 {
        match self {
            FailureKind::Other => 1,
            FailureKind::Config => 2,
            FailureKind::Input => 3,
            FailureKind::Invariant => 4,
        }
    }
}

impl ModuleError {
    pub fn kind(&self) -> FailureKind {
        use FailureKind::*;
        match self {
            ModuleError::Manifest(e) => match e {
                ManifestError::MissingFile(_) | ManifestError::MalformedLine { .. } => Input,
                ManifestError::Io(_) => Other,
                _ => Invariant,
            },
            ModuleError::Embedding(e) => match e {
                EmbeddingError::BadMagic(_) | EmbeddingError::TruncatedFile { .. } | EmbeddingError::TrailingBytes(_) => {
                    Input
                }
                EmbeddingError::Io(err) if err.kind() == std::io::ErrorKind::NotFound => Input,
                EmbeddingError::Io(_) => Other,
                _ => Invariant,
            },
            ModuleError::Cluster(ClusterError::InvalidParams(_)) => Config,
            ModuleError::Cleanse(CleanseError::InvalidPolicy(_)) => Config,
            ModuleError::Combine(CombineError::InvalidParams(_)) => Config,
            ModuleError::Eval(EvalError::InvalidParams(_)) => Config,
            ModuleError::Eval(EvalError::Parse { .. }) | ModuleError::Json { .. } => Input,
            ModuleError::Eval(EvalError::Io(_)) | ModuleError::Io(_) => Other,
            _ => Invariant,
        }
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("stage {stage}: required input {path} is missing")]
    StageInputMissing { stage: Stage, path: PathBuf },
    #[error("stage {stage}: {source}")]
    Stage { stage: Stage, source: ModuleError },
}

impl PipelineError {
    pub fn kind(&self) -> FailureKind {
        match self {
            PipelineError::Config(ConfigError::MissingInput(_)) => FailureKind::Input,
            PipelineError::Config(_) => FailureKind::Config,
            PipelineError::StageInputMissing { .. } => FailureKind::Input,
            PipelineError::Stage { source, .. } => source.kind(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        self.kind().exit_code()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageOutcome {
    Ran,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct Stamp {
    stage: Stage,
    config: String,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
}

pub fn sha256_file(path: &Path) -> std::io::Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

fn sha256_json<T: Serialize>(value: &T) -> String {
    hex::encode(Sha256::digest(serde_json::to_vec(value).expect("config serializes")))
}

/// Writes through a sibling temp file so readers never observe a partial artifact.
fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)
}

fn jsonl<R: ManifestRecord>(records: &[R]) -> Result<Vec<u8>, ModuleError> {
    let mut buf = Vec::new();
    manifest::write_records(&mut buf, records)?;
    Ok(buf)
}

fn json_pretty<T: Serialize>(value: &T) -> Vec<u8> {
    let mut v = serde_json::to_vec_pretty(value).expect("artifact serializes");
    v.push(b'\n');
    v
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, ModuleError> {
    let bytes = fs::read(path)?;
    serde_json::from_slice(&bytes).map_err(|source| ModuleError::Json { path: path.to_path_buf(), source })
}

pub struct Pipeline {
    cfg: PipelineConfig,
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig) -> Self {
        Self { cfg }
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn workdir(&self) -> &Path {
        &self.cfg.paths.workdir
    }

    pub fn artifact(&self, name: &str) -> PathBuf {
        self.workdir().join(name)
    }

    fn stamp_path(&self, stage: Stage) -> PathBuf {
        self.workdir().join(STAMP_DIR).join(format!("{}.json", stage.name()))
    }

    /// Named input files of a stage: external inputs and earlier artifacts.
    fn inputs(&self, stage: Stage) -> Vec<(&'static str, PathBuf)> {
        let p = &self.cfg.paths;
        let art = |name: &'static str| (name, self.artifact(name));
        match stage {
            Stage::Filter => vec![("videos", p.videos.clone())],
            Stage::Segment => {
                vec![("videos", p.videos.clone()), ("segments", p.segments.clone()), art(VIDEOS_FILTERED)]
            }
            Stage::Cluster => vec![art(UTTS_SEGMENTED), ("audio_emb", p.audio_emb.clone())],
            Stage::Cleanse => {
                vec![art(CLUSTERS), ("audio_emb", p.audio_emb.clone()), ("face_emb", p.face_emb.clone())]
            }
            Stage::Combine => vec![
                art(CLUSTERS_CLEANSED),
                art(UTTS_SEGMENTED),
                ("audio_emb", p.audio_emb.clone()),
                ("face_emb", p.face_emb.clone()),
            ],
            Stage::Genre => vec![art(UTTS_SPEAKERS), ("genre_probs", p.genre_probs.clone())],
            Stage::Stats => vec![art(UTTS_FINAL)],
            Stage::Split => vec![art(UTTS_FINAL)],
            Stage::Trials => vec![art(UTTS_FINAL), art(SPLIT), ("audio_emb", p.audio_emb.clone())],
        }
    }

    /// Digest of the config fields a stage depends on.
    fn config_digest(&self, stage: Stage) -> String {
        let c = &self.cfg;
        match stage {
            Stage::Filter => sha256_json(&c.filter),
            Stage::Segment => sha256_json(&c.segment),
            Stage::Cluster => sha256_json(&c.cluster),
            Stage::Cleanse => sha256_json(&c.cleanse),
            Stage::Combine => sha256_json(&c.combine),
            Stage::Genre => sha256_json(&(&c.genre, &c.segment.sample_rate_hz)),
            Stage::Stats => sha256_json(&()),
            Stage::Split => sha256_json(&c.split_spec()),
            Stage::Trials => sha256_json(&(&c.trials, c.easy_trial_seed(), c.hard_trial_params())),
        }
    }

    fn current_stamp(&self, stage: Stage) -> Result<Stamp, PipelineError> {
        let mut inputs = BTreeMap::new();
        for (name, path) in self.inputs(stage) {
            if !path.is_file() {
                return Err(PipelineError::StageInputMissing { stage, path });
            }
            let digest = sha256_file(&path).map_err(|e| PipelineError::Stage { stage, source: e.into() })?;
            inputs.insert(name.to_owned(), digest);
        }
        Ok(Stamp { stage, config: self.config_digest(stage), inputs, outputs: BTreeMap::new() })
    }

    fn is_up_to_date(&self, stamp: &Stamp) -> bool {
        let Ok(recorded) = read_json::<Stamp>(&self.stamp_path(stamp.stage)) else { return false };
        recorded.config == stamp.config
            && recorded.inputs == stamp.inputs
            && stamp.stage.outputs().iter().all(|name| {
                recorded.outputs.get(*name).is_some_and(|d| sha256_file(&self.artifact(name)).is_ok_and(|cur| &cur == d))
            })
    }

    /// Runs one stage unless its stamp shows it is current (or `force` is set).
    pub fn run_stage(&self, stage: Stage, force: bool) -> Result<StageOutcome, PipelineError> {
        let mut stamp = self.current_stamp(stage)?;
        if !force && self.is_up_to_date(&stamp) {
            log::info!("{stage}: skipped (up-to-date)");
            return Ok(StageOutcome::Skipped);
        }
        let wrap = |source: ModuleError| PipelineError::Stage { stage, source };
        fs::create_dir_all(self.workdir().join(STAMP_DIR)).map_err(|e| wrap(e.into()))?;
        let artifacts = par::with_jobs(self.cfg.run.jobs, || self.execute(stage)).map_err(wrap)?;
        for (name, bytes) in &artifacts {
            write_atomic(&self.artifact(name), bytes).map_err(|e| wrap(e.into()))?;
            stamp.outputs.insert((*name).to_owned(), hex::encode(Sha256::digest(bytes)));
        }
        write_atomic(&self.stamp_path(stage), &json_pretty(&stamp)).map_err(|e| wrap(e.into()))?;
        log::info!("{stage}: done");
        Ok(StageOutcome::Ran)
    }

    /// Runs `stages` (all when empty) in pipeline order.
    pub fn run(&self, stages: &[Stage], force: bool) -> Result<Vec<(Stage, StageOutcome)>, PipelineError> {
        if stages.is_empty() || stages.contains(&Stage::Filter) {
            self.cfg.check_inputs()?;
        }
        let selected: BTreeSet<Stage> = stages.iter().copied().collect();
        Stage::ALL
            .into_iter()
            .filter(|s| selected.is_empty() || selected.contains(s))
            .map(|s| self.run_stage(s, force).map(|o| (s, o)))
            .collect()
    }

    fn audio(&self) -> Result<EmbeddingTable, ModuleError> {
        Ok(embedding::read_embeddings_as(&self.cfg.paths.audio_emb, Modality::Audio)?)
    }

    fn face(&self) -> Result<EmbeddingTable, ModuleError> {
        Ok(embedding::read_embeddings_as(&self.cfg.paths.face_emb, Modality::Face)?)
    }

    fn load<R: ManifestRecord>(&self, name: &str) -> Result<Vec<R>, ModuleError> {
        Ok(manifest::load_manifest(&self.artifact(name))?)
    }

    fn clusters_from(&self, name: &str, audio: &EmbeddingTable, face: Option<&EmbeddingTable>) -> Result<Vec<SpeakerCluster>, ModuleError> {
        let records: Vec<ClusterRecord> = self.load(name)?;
        par::try_map(&records, |r| {
            SpeakerCluster::from_members(
                r.cluster_id.clone(),
                r.playlist_id.clone(),
                r.member_utts.iter().cloned().collect(),
                audio,
                face,
            )
        })
        .map_err(ModuleError::from)
    }

    /// Computes a stage's artifacts in memory.
    fn execute(&self, stage: Stage) -> Result<Vec<(&'static str, Vec<u8>)>, ModuleError> {
        let c = &self.cfg;
        Ok(match stage {
            Stage::Filter => {
                let videos: Vec<VideoRecord> = manifest::load_manifest(&c.paths.videos)?;
                vec![(VIDEOS_FILTERED, jsonl(&manifest::filter_videos(&videos, &c.filter))?)]
            }
            Stage::Segment => {
                let raw: Vec<VideoRecord> = manifest::load_manifest(&c.paths.videos)?;
                let kept: Vec<VideoRecord> = self.load(VIDEOS_FILTERED)?;
                let segments: Vec<SegmentRecord> = manifest::load_manifest(&c.paths.segments)?;
                let kept_ids: BTreeSet<&str> = kept.iter().map(|v| v.video_id.as_str()).collect();
                // Validate against the full crawl, then keep segments of videos that passed the filter.
                let utts: Vec<UtteranceRecord> = manifest::apply_segmentation(&raw, &segments, &c.segment)?
                    .into_iter()
                    .filter(|u| kept_ids.contains(u.video_id.as_str()))
                    .collect();
                vec![(UTTS_SEGMENTED, jsonl(&utts)?)]
            }
            Stage::Cluster => {
                let utts: Vec<UtteranceRecord> = self.load(UTTS_SEGMENTED)?;
                let clusters = cluster::cluster_corpus(&utts, &self.audio()?, &c.cluster)?;
                let records: Vec<ClusterRecord> = clusters.iter().map(SpeakerCluster::to_record).collect();
                vec![(CLUSTERS, jsonl(&records)?)]
            }
            Stage::Cleanse => {
                let (audio, face) = (self.audio()?, self.face()?);
                let clusters = self.clusters_from(CLUSTERS, &audio, None)?;
                let outcomes = cleanse::cleanse_clusters(&clusters, &audio, &face, &c.cleanse)?;
                let report: Vec<_> = outcomes.iter().flat_map(|o| o.decisions.iter().cloned()).collect();
                let kept: Vec<ClusterRecord> =
                    outcomes.iter().filter_map(|o| o.cluster.as_ref().map(SpeakerCluster::to_record)).collect();
                vec![(CLEANSE_REPORT, jsonl(&report)?), (CLUSTERS_CLEANSED, jsonl(&kept)?)]
            }
            Stage::Combine => {
                let (audio, face) = (self.audio()?, self.face()?);
                let clusters = self.clusters_from(CLUSTERS_CLEANSED, &audio, Some(&face))?;
                let candidates = combine::find_merge_candidates(&clusters, &c.combine);
                let identities = combine::merge_speakers(&clusters, &candidates)?;
                let utts: Vec<UtteranceRecord> = self.load(UTTS_SEGMENTED)?;
                let labelled = combine::label_utterances(&utts, &identities);
                let speakers: Vec<_> = identities.iter().map(combine::SpeakerIdentity::to_record).collect();
                vec![(SPEAKERS, jsonl(&speakers)?), (UTTS_SPEAKERS, jsonl(&labelled)?)]
            }
            Stage::Genre => {
                let utts: Vec<UtteranceRecord> = self.load(UTTS_SPEAKERS)?;
                let probs: Vec<GenreProbs> = manifest::load_manifest(&c.paths.genre_probs)?;
                let assigned = genre::assign_genres(&utts, &probs, c.genre.min_conf)?;
                manifest::check_finalized(&assigned, c.segment.sample_rate_hz)?;
                vec![(UTTS_FINAL, jsonl(&assigned)?)]
            }
            Stage::Stats => {
                let utts: Vec<UtteranceRecord> = self.load(UTTS_FINAL)?;
                vec![(STATS, json_pretty(&genre::corpus_stats(&utts)))]
            }
            Stage::Split => {
                let utts: Vec<UtteranceRecord> = self.load(UTTS_FINAL)?;
                vec![(SPLIT, json_pretty(&evalkit::split_speakers(&utts, &c.split_spec())?))]
            }
            Stage::Trials => {
                let utts: Vec<UtteranceRecord> = self.load(UTTS_FINAL)?;
                let split: Split = read_json(&self.artifact(SPLIT))?;
                let test = split.test_utterances(&utts);
                let easy = evalkit::generate_easy_trials(&test, c.trials.easy_pairs, c.easy_trial_seed())?;
                let hard = evalkit::generate_hard_trials(&test, &self.audio()?, &c.hard_trial_params())?;
                vec![(TRIALS_EASY, trial_bytes(&easy)), (TRIALS_HARD, trial_bytes(&hard))]
            }
        })
    }
}

fn trial_bytes(trials: &[evalkit::TrialPair]) -> Vec<u8> {
    evalkit::io::format_trials(trials).into_bytes()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_names_round_trip() {
        for s in Stage::ALL {
            assert_eq!(s.name().parse::<Stage>().unwrap(), s);
        }
        assert!("scoring".parse::<Stage>().is_err());
    }

    #[test]
    fn stage_order_matches_dependencies() {
        let produced: BTreeMap<&str, Stage> =
            Stage::ALL.iter().flat_map(|&s| s.outputs().iter().map(move |o| (*o, s))).collect();
        let dummy: PipelineConfig = toml::from_str(crate::synth::DEMO_CONFIG).unwrap();
        let p = Pipeline::new(dummy);
        for s in Stage::ALL {
            for (name, _) in p.inputs(s) {
                if let Some(&producer) = produced.get(name) {
                    assert!(producer < s, "{s} reads {name} from {producer}");
                }
            }
        }
    }

    #[test]
    fn exit_codes() {
        assert_eq!(PipelineError::StageInputMissing { stage: Stage::Cleanse, path: "x".into() }.exit_code(), 3);
        assert_eq!(PipelineError::Config(ConfigError::Invalid("x".into())).exit_code(), 2);
        let inv = PipelineError::Stage {
            stage: Stage::Segment,
            source: ManifestError::UnknownVideo("v".into()).into(),
        };
        assert_eq!(inv.exit_code(), 4);
        let malformed = PipelineError::Stage {
            stage: Stage::Filter,
            source: ManifestError::MalformedLine { line: 1, reason: "x".into() }.into(),
        };
        assert_eq!(malformed.exit_code(), 3);
    }
}
