//! Speaker clustering over audio embeddings.
//!
//! [`dbscan`] is plain DBSCAN with cosine distance `1 - cos`. Points are visited
//! in ascending id order, so border points shared by two clusters go to the one
//! whose seed comes first and the labelling is fully deterministic.
//!
//! [`cluster_playlist`] runs three stages per playlist:
//! 1. DBSCAN inside each video; every non-noise cluster yields a sub-centroid.
//! 2. DBSCAN over the playlist's sub-centroids groups them into speakers.
//! 3. Every utterance of the playlist (stage-1 noise included) joins its most
//!    similar speaker centroid if the cosine reaches `assign_floor`.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{self, EmbeddingError, EmbeddingTable, UnitRows};
use crate::manifest::UtteranceRecord;
use crate::par;

pub const NOISE: i32 = -1;
const UNCLASSIFIED: i32 = i32::MIN;

#[derive(Debug, Error)]
pub enum ClusterError {
    #[error("cannot cluster an empty embedding table")]
    EmptyTable,
    #[error("no audio embedding for utterance {0:?}")]
    MissingEmbedding(String),
    #[error("invalid clustering parameters: {0}")]
    InvalidParams(String),
    #[error("utterances from several playlists passed to cluster_playlist ({0:?} and {1:?})")]
    MixedPlaylists(String, String),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
}

pub type Result<T, E = ClusterError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterParams {
    /// Neighbourhood radius in cosine distance (`1 - cos`).
    pub eps: f64,
    /// Minimum neighbourhood size (self included) for a core point.
    pub min_pts: usize,
    /// Minimum cosine for attaching an utterance to a speaker centroid in stage 3.
    pub assign_floor: f64,
    /// `min_pts` for stage 2. Each sub-centroid already stands for a dense
    /// stage-1 cluster, so the default of 1 groups them by `eps`-connectivity.
    pub playlist_min_pts: usize,
}

impl Default for ClusterParams {
    fn default() -> Self {
        Self { eps: 0.35, min_pts: 4, assign_floor: 0.5, playlist_min_pts: 1 }
    }
}

impl ClusterParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0 && self.eps < 2.0) {
            return Err(ClusterError::InvalidParams(format!("eps must lie in (0, 2), got {}", self.eps)));
        }
        if self.min_pts < 2 {
            return Err(ClusterError::InvalidParams(format!("min_pts must be >= 2, got {}", self.min_pts)));
        }
        if !(0.0..=1.0).contains(&self.assign_floor) {
            return Err(ClusterError::InvalidParams(format!(
                "assign_floor must lie in [0, 1], got {}",
                self.assign_floor
            )));
        }
        if self.playlist_min_pts < 1 {
            return Err(ClusterError::InvalidParams("playlist_min_pts must be >= 1".into()));
        }
        Ok(())
    }
}

/// DBSCAN over unit rows. Returns one label per row: cluster index or [`NOISE`].
pub(crate) fn dbscan_rows(rows: &UnitRows, eps: f64, min_pts: usize) -> Vec<i32> {
    let n = rows.len();
    let min_cos = 1.0 - eps;
    let neighbors: Vec<Vec<u32>> =
        par::map_range(n, |i| (0..n).filter(|&j| rows.cosine(i, j) >= min_cos).map(|j| j as u32).collect());

    let mut labels = vec![UNCLASSIFIED; n];
    let mut next = 0i32;
    let mut queue = VecDeque::new();
    for i in 0..n {
        if labels[i] != UNCLASSIFIED {
            continue;
        }
        if neighbors[i].len() < min_pts {
            labels[i] = NOISE;
            continue;
        }
        let c = next;
        next += 1;
        labels[i] = c;
        queue.extend(neighbors[i].iter().map(|&j| j as usize));
        while let Some(j) = queue.pop_front() {
            if labels[j] == NOISE {
                labels[j] = c;
            }
            if labels[j] != UNCLASSIFIED {
                continue;
            }
            labels[j] = c;
            if neighbors[j].len() >= min_pts {
                queue.extend(neighbors[j].iter().map(|&k| k as usize));
            }
        }
    }
    labels
}

/// Labels every embedding in `table`: cluster index (from 0) or [`NOISE`].
pub fn dbscan(table: &EmbeddingTable, params: &ClusterParams) -> Result<BTreeMap<String, i32>> {
    params.validate()?;
    if table.is_empty() {
        return Err(ClusterError::EmptyTable);
    }
    let rows = UnitRows::from_rows(table.dim(), table.iter())?;
    let labels = dbscan_rows(&rows, params.eps, params.min_pts);
    Ok(table.ids().map(str::to_owned).zip(labels).collect())
}

/// A speaker group inside one playlist.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerCluster {
    /// `playlist_id#k`.
    pub cluster_id: String,
    pub playlist_id: String,
    pub member_utts: BTreeSet<String>,
    /// Unit-norm mean of the members' audio embeddings.
    pub audio_centroid: Vec<f64>,
    /// Unit-norm mean over members that have a face embedding, if any do.
    pub face_centroid: Option<Vec<f64>>,
}

impl SpeakerCluster {
    /// Builds a cluster and its centroids from member ids.
    pub fn from_members(
        cluster_id: String,
        playlist_id: String,
        member_utts: BTreeSet<String>,
        audio: &EmbeddingTable,
        face: Option<&EmbeddingTable>,
    ) -> Result<Self> {
        let audio_vecs = member_utts
            .iter()
            .map(|id| audio.get(id).ok_or_else(|| ClusterError::MissingEmbedding(id.clone())))
            .collect::<Result<Vec<_>>>()?;
        let audio_centroid = embedding::centroid(audio_vecs)?;
        let mut cluster = Self { cluster_id, playlist_id, member_utts, audio_centroid, face_centroid: None };
        if let Some(face) = face {
            cluster.attach_face_centroid(face)?;
        }
        Ok(cluster)
    }

    /// Sets `face_centroid` from the members that have a face embedding.
    pub fn attach_face_centroid(&mut self, face: &EmbeddingTable) -> Result<()> {
        let vecs: Vec<&[f32]> = self.member_utts.iter().filter_map(|id| face.get(id)).collect();
        self.face_centroid = if vecs.is_empty() { None } else { Some(embedding::centroid(vecs)?) };
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.member_utts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.member_utts.is_empty()
    }

    pub fn to_record(&self) -> ClusterRecord {
        ClusterRecord {
            cluster_id: self.cluster_id.clone(),
            playlist_id: self.playlist_id.clone(),
            member_utts: self.member_utts.iter().cloned().collect(),
            size: self.member_utts.len(),
        }
    }
}

/// One line of `clusters.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterRecord {
    pub cluster_id: String,
    pub playlist_id: String,
    pub member_utts: Vec<String>,
    pub size: usize,
}

impl crate::manifest::ManifestRecord for ClusterRecord {
    fn unique_key(&self) -> Option<&str> {
        Some(&self.cluster_id)
    }

    fn label(&self) -> String {
        self.cluster_id.clone()
    }

    fn check(&self) -> std::result::Result<(), String> {
        let distinct: BTreeSet<&String> = self.member_utts.iter().collect();
        if self.member_utts.is_empty() {
            return Err("member_utts must be nonempty".into());
        }
        if distinct.len() != self.member_utts.len() {
            return Err("member_utts must be distinct".into());
        }
        if self.size != self.member_utts.len() {
            return Err(format!("size {} != {} members", self.size, self.member_utts.len()));
        }
        Ok(())
    }
}

struct SubCluster {
    members: Vec<usize>,
}

/// Three-stage clustering of one playlist's utterances. Zero clusters is a legal result.
pub fn cluster_playlist(
    utts: &[UtteranceRecord],
    audio: &EmbeddingTable,
    params: &ClusterParams,
) -> Result<Vec<SpeakerCluster>> {
    params.validate()?;
    let Some(first) = utts.first() else { return Ok(Vec::new()) };
    let playlist_id = first.playlist_id.clone();
    if let Some(other) = utts.iter().find(|u| u.playlist_id != playlist_id) {
        return Err(ClusterError::MixedPlaylists(playlist_id, other.playlist_id.clone()));
    }

    // Ascending-id order is the determinism anchor for every stage.
    let mut order: Vec<&UtteranceRecord> = utts.iter().collect();
    order.sort_by(|a, b| a.utt_id.cmp(&b.utt_id));
    let ids: Vec<&str> = order.iter().map(|u| u.utt_id.as_str()).collect();
    let vectors = ids
        .iter()
        .map(|&id| audio.get(id).map(|v| (id, v)).ok_or_else(|| ClusterError::MissingEmbedding(id.to_owned())))
        .collect::<Result<Vec<_>>>()?;
    let rows = UnitRows::from_rows(audio.dim(), vectors.iter().copied())?;

    // Stage 1: per-video DBSCAN.
    let mut by_video: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, u) in order.iter().enumerate() {
        by_video.entry(u.video_id.as_str()).or_default().push(i);
    }
    let videos: Vec<Vec<usize>> = by_video.into_values().collect();
    let per_video: Vec<Vec<SubCluster>> = par::map(&videos, |members| {
        let local = UnitRows::from_rows(
            audio.dim(),
            members.iter().map(|&i| (ids[i], rows.row(i))),
        )
        .expect("rows already normalized");
        let labels = dbscan_rows(&local, params.eps, params.min_pts);
        let mut groups: BTreeMap<i32, Vec<usize>> = BTreeMap::new();
        for (&i, &l) in members.iter().zip(&labels) {
            if l != NOISE {
                groups.entry(l).or_default().push(i);
            }
        }
        groups.into_values().map(|members| SubCluster { members }).collect()
    });
    let subs: Vec<SubCluster> = per_video.into_iter().flatten().collect();
    if subs.is_empty() {
        return Ok(Vec::new());
    }

    // Stage 2: group sub-centroids into playlist-level speakers.
    let sub_centroids = subs
        .iter()
        .map(|s| embedding::centroid(s.members.iter().map(|&i| rows.row(i))))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let sub_labels: Vec<String> = (0..subs.len()).map(|k| format!("sub{k}")).collect();
    let sub_rows = UnitRows::from_rows(
        audio.dim(),
        sub_labels.iter().map(String::as_str).zip(sub_centroids.iter().map(Vec::as_slice)),
    )?;
    let group_labels = dbscan_rows(&sub_rows, params.eps, params.playlist_min_pts);
    let mut groups: BTreeMap<i32, Vec<usize>> = BTreeMap::new();
    for (k, &l) in group_labels.iter().enumerate() {
        if l != NOISE {
            groups.entry(l).or_default().extend(&subs[k].members);
        }
    }
    let group_centroids = groups
        .values()
        .map(|members| embedding::centroid(members.iter().map(|&i| rows.row(i))))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    if group_centroids.is_empty() {
        return Ok(Vec::new());
    }

    // Stage 3: attach every utterance to its nearest speaker centroid.
    let assignment: Vec<Option<usize>> = par::map_range(rows.len(), |i| {
        let mut best: Option<(usize, f64)> = None;
        for (g, c) in group_centroids.iter().enumerate() {
            let cos = embedding::dot(rows.row(i), c).clamp(-1.0, 1.0);
            if best.is_none_or(|(_, b)| cos > b) {
                best = Some((g, cos));
            }
        }
        best.filter(|&(_, cos)| cos >= params.assign_floor).map(|(g, _)| g)
    });
    let mut members: Vec<BTreeSet<String>> = vec![BTreeSet::new(); group_centroids.len()];
    for (i, g) in assignment.into_iter().enumerate() {
        if let Some(g) = g {
            members[g].insert(ids[i].to_owned());
        }
    }
    let mut members: Vec<BTreeSet<String>> = members.into_iter().filter(|m| !m.is_empty()).collect();
    members.sort_by(|a, b| a.first().cmp(&b.first()));

    members
        .into_iter()
        .enumerate()
        .map(|(k, m)| SpeakerCluster::from_members(format!("{playlist_id}#{k}"), playlist_id.clone(), m, audio, None))
        .collect()
}

/// Clusters every playlist independently; output is ordered by playlist id.
pub fn cluster_corpus(
    utts: &[UtteranceRecord],
    audio: &EmbeddingTable,
    params: &ClusterParams,
) -> Result<Vec<SpeakerCluster>> {
    params.validate()?;
    let mut by_playlist: BTreeMap<&str, Vec<UtteranceRecord>> = BTreeMap::new();
    for u in utts {
        by_playlist.entry(u.playlist_id.as_str()).or_default().push(u.clone());
    }
    let playlists: Vec<Vec<UtteranceRecord>> = by_playlist.into_values().collect();
    let per = par::try_map(&playlists, |p| cluster_playlist(p, audio, params))?;
    Ok(per.into_iter().flatten().collect())
}
