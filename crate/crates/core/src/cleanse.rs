//! Audio-visual cluster cleansing.
//!
//! Each member of a speaker cluster gets a cohesion score per modality: its
//! mean cosine to every other member, clamped to `[0, 1]`. The audio and face
//! scores are fused by harmonic mean and compared with a threshold. Members
//! without a face embedding fall back to the audio score against a stricter
//! threshold. All scores are computed against the original membership, so
//! one member's removal never changes another member's score.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cluster::{ClusterError, SpeakerCluster};
use crate::embedding::{self, EmbeddingError, EmbeddingTable, Modality, UnitRows};
use crate::manifest::ManifestRecord;
use crate::par;

#[derive(Debug, Error)]
pub enum CleanseError {
    #[error("cluster {0:?} has fewer than two scorable members")]
    SingletonCluster(String),
    #[error("no {modality:?} embedding for utterance {utt_id:?}")]
    MissingEmbedding { utt_id: String, modality: Modality },
    #[error("utterance {utt_id:?} is not a member of cluster {cluster_id:?}")]
    NotAMember { utt_id: String, cluster_id: String },
    #[error("invalid cleansing policy: {0}")]
    InvalidPolicy(String),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
}

pub type Result<T, E = CleanseError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CohesionScore {
    pub value: f64,
    pub modality: Modality,
}

/// How fused scores are compared with the threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreSemantics {
    /// Scores are cohesions; keep iff `fused >= threshold`.
    #[default]
    Similarity,
    /// Scores are `1 - cohesion`; reject iff `fused >= threshold`.
    Distance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CleansePolicy {
    pub threshold: f64,
    pub semantics: ScoreSemantics,
    /// Added to (similarity) or subtracted from (distance) the threshold for members without a face.
    pub no_face_margin: f64,
}

impl Default for CleansePolicy {
    fn default() -> Self {
        Self { threshold: 0.75, semantics: ScoreSemantics::Similarity, no_face_margin: 0.05 }
    }
}

impl CleansePolicy {
    pub fn with_threshold(threshold: f64) -> Self {
        Self { threshold, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold <= 1.0) {
            return Err(CleanseError::InvalidPolicy(format!("threshold must lie in (0, 1], got {}", self.threshold)));
        }
        if !(0.0..1.0).contains(&self.no_face_margin) {
            return Err(CleanseError::InvalidPolicy(format!(
                "no_face_margin must lie in [0, 1), got {}",
                self.no_face_margin
            )));
        }
        Ok(())
    }

    /// Returns `(fused, effective threshold, kept)`.
    pub fn decide(&self, audio: f64, face: Option<f64>) -> (f64, f64, bool) {
        match self.semantics {
            ScoreSemantics::Similarity => {
                let (fused, thr) = match face {
                    Some(f) => (fuse_scores(audio, f), self.threshold),
                    None => (audio, self.threshold + self.no_face_margin),
                };
                (fused, thr, fused >= thr)
            }
            ScoreSemantics::Distance => {
                let (fused, thr) = match face {
                    Some(f) => (fuse_scores(1.0 - audio, 1.0 - f), self.threshold),
                    None => (1.0 - audio, self.threshold - self.no_face_margin),
                };
                (fused, thr, fused < thr)
            }
        }
    }
}

/// One line of `cleanse_report.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CleanseDecision {
    pub utt_id: String,
    pub audio_score: f64,
    pub face_score: Option<f64>,
    pub fused: f64,
    pub kept: bool,
    /// Threshold actually applied (includes the no-face margin).
    pub threshold: f64,
}

impl ManifestRecord for CleanseDecision {
    fn unique_key(&self) -> Option<&str> {
        Some(&self.utt_id)
    }

    fn label(&self) -> String {
        self.utt_id.clone()
    }

    fn check(&self) -> std::result::Result<(), String> {
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        if !unit(self.audio_score) || !self.face_score.is_none_or(unit) || !unit(self.fused) {
            return Err("scores must lie in [0, 1]".into());
        }
        Ok(())
    }
}

/// Harmonic mean `2af / (a + f)`, 0 when both are 0.
pub fn fuse_scores(audio: f64, face: f64) -> f64 {
    let s = audio + face;
    if s == 0.0 {
        0.0
    } else {
        2.0 * audio * face / s
    }
}

/// Cohesion of every row against all other rows, in input order.
fn cohesions(rows: &UnitRows) -> Vec<f64> {
    let n = rows.len();
    let mut total = vec![0.0f64; rows.dim()];
    for i in 0..n {
        total.iter_mut().zip(rows.row(i)).for_each(|(t, x)| *t += x);
    }
    let others = (n - 1) as f64;
    par::map_range(n, |i| {
        let r = rows.row(i);
        ((embedding::dot(r, &total) - embedding::dot(r, r)) / others).clamp(0.0, 1.0)
    })
}

fn member_rows<'a>(ids: &[&'a str], table: &'a EmbeddingTable) -> Result<UnitRows> {
    let rows = ids
        .iter()
        .map(|&id| {
            table
                .get(id)
                .map(|v| (id, v))
                .ok_or_else(|| CleanseError::MissingEmbedding { utt_id: id.to_owned(), modality: table.modality() })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(UnitRows::from_rows(table.dim(), rows)?)
}

/// Cohesion of one member against the other members that have an embedding in `table`.
pub fn cohesion_score(utt_id: &str, cluster: &SpeakerCluster, table: &EmbeddingTable) -> Result<CohesionScore> {
    if !cluster.member_utts.contains(utt_id) {
        return Err(CleanseError::NotAMember { utt_id: utt_id.to_owned(), cluster_id: cluster.cluster_id.clone() });
    }
    if !table.contains(utt_id) {
        return Err(CleanseError::MissingEmbedding { utt_id: utt_id.to_owned(), modality: table.modality() });
    }
    let ids: Vec<&str> = cluster.member_utts.iter().map(String::as_str).filter(|id| table.contains(id)).collect();
    if ids.len() < 2 {
        return Err(CleanseError::SingletonCluster(cluster.cluster_id.clone()));
    }
    let rows = member_rows(&ids, table)?;
    let pos = ids.iter().position(|&id| id == utt_id).expect("member present");
    Ok(CohesionScore { value: cohesions(&rows)[pos], modality: table.modality() })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CleanseOutcome {
    pub cluster_id: String,
    pub kept: BTreeSet<String>,
    /// One decision per member, in ascending id order.
    pub decisions: Vec<CleanseDecision>,
    /// The cleansed cluster with refreshed centroids, or `None` if fewer than two members survived.
    pub cluster: Option<SpeakerCluster>,
}

impl CleanseOutcome {
    pub fn removed(&self) -> impl Iterator<Item = &CleanseDecision> {
        self.decisions.iter().filter(|d| !d.kept)
    }
}

/// Scores every member of `cluster` and keeps those passing `policy`.
pub fn cleanse_cluster(
    cluster: &SpeakerCluster,
    audio: &EmbeddingTable,
    face: &EmbeddingTable,
    policy: &CleansePolicy,
) -> Result<CleanseOutcome> {
    policy.validate()?;
    if cluster.len() < 2 {
        return Err(CleanseError::SingletonCluster(cluster.cluster_id.clone()));
    }
    let ids: Vec<&str> = cluster.member_utts.iter().map(String::as_str).collect();
    let audio_scores = cohesions(&member_rows(&ids, audio)?);

    let face_ids: Vec<&str> = ids.iter().copied().filter(|id| face.contains(id)).collect();
    let mut face_scores: Vec<Option<f64>> = vec![None; ids.len()];
    if face_ids.len() >= 2 {
        let scores = cohesions(&member_rows(&face_ids, face)?);
        let mut it = face_ids.iter().zip(scores).peekable();
        for (slot, id) in face_scores.iter_mut().zip(&ids) {
            if let Some(&(fid, s)) = it.peek() {
                if fid == id {
                    *slot = Some(s);
                    it.next();
                }
            }
        }
    }

    let mut kept = BTreeSet::new();
    let decisions: Vec<CleanseDecision> = ids
        .iter()
        .zip(audio_scores)
        .zip(face_scores)
        .map(|((&id, a), f)| {
            let (fused, threshold, keep) = policy.decide(a, f);
            if keep {
                kept.insert(id.to_owned());
            }
            CleanseDecision { utt_id: id.to_owned(), audio_score: a, face_score: f, fused, kept: keep, threshold }
        })
        .collect();

    let cleansed = if kept.len() >= 2 {
        Some(SpeakerCluster::from_members(
            cluster.cluster_id.clone(),
            cluster.playlist_id.clone(),
            kept.clone(),
            audio,
            Some(face),
        )?)
    } else {
        None
    };
    Ok(CleanseOutcome { cluster_id: cluster.cluster_id.clone(), kept, decisions, cluster: cleansed })
}

/// Cleanses every cluster with at least two members. Smaller clusters are passed over.
pub fn cleanse_clusters(
    clusters: &[SpeakerCluster],
    audio: &EmbeddingTable,
    face: &EmbeddingTable,
    policy: &CleansePolicy,
) -> Result<Vec<CleanseOutcome>> {
    policy.validate()?;
    let eligible: Vec<&SpeakerCluster> = clusters.iter().filter(|c| c.len() >= 2).collect();
    par::try_map(&eligible, |c| cleanse_cluster(c, audio, face, policy))
}
