//! Corpus data model and JSONL persistence.
//!
//! Three manifests flow through the pipeline: `videos.jsonl` (crawl metadata),
//! `segments.jsonl` (diarizer output) and `utterances.jsonl` (the corpus
//! itself). Each file holds one JSON object per line. Loading is fail-fast:
//! a single bad line rejects the whole file.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::genre::Genre;

/// Sample rate every finalized utterance must carry.
pub const CORPUS_SAMPLE_RATE_HZ: u32 = 16_000;

const DURATION_TOLERANCE_S: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("manifest not found: {0}")]
    MissingFile(PathBuf),
    #[error("line {line}: malformed record: {reason}")]
    MalformedLine { line: usize, reason: String },
    #[error("duplicate id {0:?}")]
    DuplicateId(String),
    #[error("record {id:?} violates invariant: {rule}")]
    InvariantViolation { id: String, rule: String },
    #[error("segment references unknown video {0:?}")]
    UnknownVideo(String),
    #[error("segment of video {video_id:?} has non-positive duration ({start_s} .. {end_s})")]
    NegativeDuration { video_id: String, start_s: f64, end_s: f64 },
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = ManifestError> = std::result::Result<T, E>;

/// Crawl metadata for one video.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoRecord {
    pub video_id: String,
    pub playlist_id: String,
    pub channel_id: String,
    pub title: String,
    pub upload_date: NaiveDate,
    pub height_px: u32,
    pub duration_s: f64,
}

/// One speaker-homogeneous span produced by the external diarizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentRecord {
    pub video_id: String,
    pub start_s: f64,
    pub end_s: f64,
    pub diar_label: String,
}

/// One corpus utterance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceRecord {
    pub utt_id: String,
    pub video_id: String,
    pub playlist_id: String,
    pub start_s: f64,
    pub end_s: f64,
    pub duration_s: f64,
    pub sample_rate_hz: u32,
    pub speaker_id: Option<String>,
    pub genre: Option<Genre>,
    pub genre_conf: Option<f64>,
}

/// A record type that can live in a JSONL manifest.
pub trait ManifestRecord: Serialize + DeserializeOwned {
    /// Key that must be unique within a manifest, if the kind has one.
    fn unique_key(&self) -> Option<&str>;

    /// Name used in error messages.
    fn label(&self) -> String;

    /// Per-record invariants.
    fn check(&self) -> std::result::Result<(), String>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ManifestKind {
    Videos,
    Segments,
    Utterances,
}

/// A loaded manifest of any kind.
#[derive(Debug, Clone, PartialEq)]
pub enum Manifest {
    Videos(Vec<VideoRecord>),
    Segments(Vec<SegmentRecord>),
    Utterances(Vec<UtteranceRecord>),
}

impl Manifest {
    pub fn len(&self) -> usize {
        match self {
            Manifest::Videos(v) => v.len(),
            Manifest::Segments(v) => v.len(),
            Manifest::Utterances(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn finite_nonneg(x: f64) -> bool {
    x.is_finite() && x >= 0.0
}

impl ManifestRecord for VideoRecord {
    fn unique_key(&self) -> Option<&str> {
        Some(&self.video_id)
    }

    fn label(&self) -> String {
        self.video_id.clone()
    }

    fn check(&self) -> std::result::Result<(), String> {
        if self.height_px == 0 {
            return Err("height_px must be positive".into());
        }
        if !finite_nonneg(self.duration_s) {
            return Err(format!("duration_s must be finite and >= 0, got {}", self.duration_s));
        }
        Ok(())
    }
}

impl ManifestRecord for SegmentRecord {
    fn unique_key(&self) -> Option<&str> {
        None
    }

    fn label(&self) -> String {
        format!("{}@{}-{}", self.video_id, self.start_s, self.end_s)
    }

    fn check(&self) -> std::result::Result<(), String> {
        if !finite_nonneg(self.start_s) || !self.end_s.is_finite() {
            return Err("start_s must be finite and >= 0, end_s finite".into());
        }
        if self.end_s <= self.start_s {
            return Err(format!("end_s ({}) must exceed start_s ({})", self.end_s, self.start_s));
        }
        Ok(())
    }
}

impl ManifestRecord for UtteranceRecord {
    fn unique_key(&self) -> Option<&str> {
        Some(&self.utt_id)
    }

    fn label(&self) -> String {
        self.utt_id.clone()
    }

    fn check(&self) -> std::result::Result<(), String> {
        if !finite_nonneg(self.start_s) || !self.end_s.is_finite() || !self.duration_s.is_finite() {
            return Err("timing fields must be finite, start_s >= 0".into());
        }
        if self.end_s <= self.start_s {
            return Err(format!("end_s ({}) must exceed start_s ({})", self.end_s, self.start_s));
        }
        if (self.duration_s - (self.end_s - self.start_s)).abs() > DURATION_TOLERANCE_S {
            return Err(format!(
                "duration_s ({}) != end_s - start_s ({})",
                self.duration_s,
                self.end_s - self.start_s
            ));
        }
        if self.sample_rate_hz == 0 {
            return Err("sample_rate_hz must be positive".into());
        }
        match parse_utt_id(&self.utt_id) {
            Some((video, _, _)) if video == self.video_id => {}
            Some(_) => return Err(format!("utt_id must start with video_id {:?}", self.video_id)),
            None => return Err("utt_id must have the form video_id/start_ms-end_ms".into()),
        }
        if let Some(c) = self.genre_conf {
            if !(0.0..=1.0).contains(&c) {
                return Err(format!("genre_conf must lie in [0,1], got {c}"));
            }
        }
        Ok(())
    }
}

/// Reads a JSONL manifest, validating every record and id uniqueness.
pub fn load_manifest<R: ManifestRecord>(path: &Path) -> Result<Vec<R>> {
    let file = File::open(path).map_err(|e| match e.kind() {
        io::ErrorKind::NotFound => ManifestError::MissingFile(path.to_path_buf()),
        _ => ManifestError::Io(e),
    })?;
    read_records(BufReader::new(file))
}

/// Loads a manifest whose kind is only known at runtime.
pub fn load_manifest_kind(path: &Path, kind: ManifestKind) -> Result<Manifest> {
    Ok(match kind {
        ManifestKind::Videos => Manifest::Videos(load_manifest(path)?),
        ManifestKind::Segments => Manifest::Segments(load_manifest(path)?),
        ManifestKind::Utterances => Manifest::Utterances(load_manifest(path)?),
    })
}

/// Parses JSONL records from any reader. Line numbers in errors are 1-based.
pub fn read_records<R: ManifestRecord>(reader: impl BufRead) -> Result<Vec<R>> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = idx + 1;
        let record: R = serde_json::from_str(&line).map_err(|e| ManifestError::MalformedLine {
            line: lineno,
            reason: e.to_string(),
        })?;
        record
            .check()
            .map_err(|rule| ManifestError::InvariantViolation { id: record.label(), rule })?;
        if let Some(key) = record.unique_key() {
            if !seen.insert(key.to_owned()) {
                return Err(ManifestError::DuplicateId(key.to_owned()));
            }
        }
        out.push(record);
    }
    Ok(out)
}

/// Writes records as JSONL, one object per line.
pub fn write_manifest<R: ManifestRecord>(path: &Path, records: &[R]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_records(&mut w, records)?;
    w.flush()?;
    Ok(())
}

pub fn write_records<R: ManifestRecord>(mut w: impl Write, records: &[R]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(io::Error::other)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Crawl quality gate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QualityPolicy {
    pub min_height_px: u32,
    pub min_upload_date: NaiveDate,
}

impl Default for QualityPolicy {
    fn default() -> Self {
        Self {
            min_height_px: 480,
            min_upload_date: NaiveDate::from_ymd_opt(2018, 1, 1).expect("valid date"),
        }
    }
}

/// Keeps videos meeting both the resolution and the upload-date floor. Order is preserved.
pub fn filter_videos(videos: &[VideoRecord], policy: &QualityPolicy) -> Vec<VideoRecord> {
    videos
        .iter()
        .filter(|v| v.height_px >= policy.min_height_px && v.upload_date >= policy.min_upload_date)
        .cloned()
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmentationOptions {
    /// Segments shorter than this are dropped.
    pub min_duration_s: f64,
    pub sample_rate_hz: u32,
}

impl Default for SegmentationOptions {
    fn default() -> Self {
        Self { min_duration_s: 1.0, sample_rate_hz: CORPUS_SAMPLE_RATE_HZ }
    }
}

/// Builds the utterance id `video_id/start_ms-end_ms`.
pub fn make_utt_id(video_id: &str, start_s: f64, end_s: f64) -> String {
    format!("{video_id}/{}-{}", seconds_to_ms(start_s), seconds_to_ms(end_s))
}

fn seconds_to_ms(s: f64) -> u64 {
    (s * 1000.0).round() as u64
}

/// Splits an utterance id back into `(video_id, start_ms, end_ms)`.
pub fn parse_utt_id(utt_id: &str) -> Option<(&str, u64, u64)> {
    let (video, span) = utt_id.rsplit_once('/')?;
    let (start, end) = span.split_once('-')?;
    if video.is_empty() {
        return None;
    }
    Some((video, start.parse().ok()?, end.parse().ok()?))
}

/// Turns diarizer segments into utterance records, dropping short segments.
pub fn apply_segmentation(
    videos: &[VideoRecord],
    segments: &[SegmentRecord],
    opts: &SegmentationOptions,
) -> Result<Vec<UtteranceRecord>> {
    let by_id: HashMap<&str, &VideoRecord> = videos.iter().map(|v| (v.video_id.as_str(), v)).collect();
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(segments.len());
    for seg in segments {
        let video = by_id
            .get(seg.video_id.as_str())
            .ok_or_else(|| ManifestError::UnknownVideo(seg.video_id.clone()))?;
        if !(seg.end_s > seg.start_s) {
            return Err(ManifestError::NegativeDuration {
                video_id: seg.video_id.clone(),
                start_s: seg.start_s,
                end_s: seg.end_s,
            });
        }
        let utt_id = make_utt_id(&seg.video_id, seg.start_s, seg.end_s);
        if seg.start_s < 0.0 || seg.end_s > video.duration_s + DURATION_TOLERANCE_S {
            return Err(ManifestError::InvariantViolation {
                id: utt_id,
                rule: format!("segment must lie within [0, {}] of its video", video.duration_s),
            });
        }
        let duration_s = seg.end_s - seg.start_s;
        if duration_s < opts.min_duration_s {
            continue;
        }
        if !seen.insert(utt_id.clone()) {
            return Err(ManifestError::DuplicateId(utt_id));
        }
        out.push(UtteranceRecord {
            utt_id,
            video_id: seg.video_id.clone(),
            playlist_id: video.playlist_id.clone(),
            start_s: seg.start_s,
            end_s: seg.end_s,
            duration_s,
            sample_rate_hz: opts.sample_rate_hz,
            speaker_id: None,
            genre: None,
            genre_conf: None,
        });
    }
    Ok(out)
}

/// Checks the finalized-corpus invariants: every utterance at the corpus sample rate.
pub fn check_finalized(utts: &[UtteranceRecord], sample_rate_hz: u32) -> Result<()> {
    for u in utts {
        if u.sample_rate_hz != sample_rate_hz {
            return Err(ManifestError::InvariantViolation {
                id: u.utt_id.clone(),
                rule: format!("sample_rate_hz {} != {sample_rate_hz}", u.sample_rate_hz),
            });
        }
    }
    Ok(())
}
