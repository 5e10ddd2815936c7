//! Cross-playlist speaker merging.
//!
//! Two clusters from different playlists are linked when their audio
//! centroids and face centroids are both close. Linked clusters are merged
//! transitively with union-find, and every component becomes one speaker.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cluster::SpeakerCluster;
use crate::embedding;
use crate::manifest::{ManifestRecord, UtteranceRecord};
use crate::par;

#[derive(Debug, Error)]
pub enum CombineError {
    #[error("candidate pair references unknown cluster {0:?}")]
    UnknownCluster(String),
    #[error("cluster id {0:?} appears more than once")]
    DuplicateCluster(String),
    #[error("utterance {utt_id:?} belongs to both {first:?} and {second:?}")]
    OverlappingClusters { utt_id: String, first: String, second: String },
    #[error("invalid merge parameters: {0}")]
    InvalidParams(String),
}

pub type Result<T, E = CombineError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MergeParams {
    pub audio_threshold: f64,
    pub face_threshold: f64,
    /// Exclude pairs where either cluster has no face centroid.
    pub require_both: bool,
}

impl Default for MergeParams {
    fn default() -> Self {
        Self { audio_threshold: 0.75, face_threshold: 0.75, require_both: true }
    }
}

impl MergeParams {
    /// Thresholds must be positive; anything above 1 disables merging.
    pub fn validate(&self) -> Result<()> {
        for (name, t) in [("audio_threshold", self.audio_threshold), ("face_threshold", self.face_threshold)] {
            if !(t.is_finite() && t > 0.0) {
                return Err(CombineError::InvalidParams(format!("{name} must be positive, got {t}")));
            }
        }
        Ok(())
    }
}

/// An unordered pair of cluster ids, stored with the smaller id first.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ClusterPair(pub String, pub String);

impl ClusterPair {
    pub fn new(a: impl Into<String>, b: impl Into<String>) -> Self {
        let (a, b) = (a.into(), b.into());
        if a <= b {
            Self(a, b)
        } else {
            Self(b, a)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpeakerIdentity {
    pub speaker_id: String,
    pub source_clusters: BTreeSet<String>,
    pub member_utts: BTreeSet<String>,
}

impl SpeakerIdentity {
    pub fn to_record(&self) -> SpeakerRecord {
        SpeakerRecord {
            speaker_id: self.speaker_id.clone(),
            source_clusters: self.source_clusters.iter().cloned().collect(),
            n_utts: self.member_utts.len(),
        }
    }
}

/// One line of `speakers.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerRecord {
    pub speaker_id: String,
    pub source_clusters: Vec<String>,
    pub n_utts: usize,
}

impl ManifestRecord for SpeakerRecord {
    fn unique_key(&self) -> Option<&str> {
        Some(&self.speaker_id)
    }

    fn label(&self) -> String {
        self.speaker_id.clone()
    }

    fn check(&self) -> std::result::Result<(), String> {
        if self.source_clusters.is_empty() {
            return Err("source_clusters must be nonempty".into());
        }
        Ok(())
    }
}

pub fn speaker_label(ordinal: usize) -> String {
    format!("spk{ordinal:05}")
}

fn centroid_cos(a: &[f64], b: &[f64]) -> f64 {
    embedding::dot(a, b).clamp(-1.0, 1.0)
}

fn is_candidate(a: &SpeakerCluster, b: &SpeakerCluster, params: &MergeParams) -> bool {
    if a.playlist_id == b.playlist_id || centroid_cos(&a.audio_centroid, &b.audio_centroid) < params.audio_threshold {
        return false;
    }
    match (&a.face_centroid, &b.face_centroid) {
        (Some(fa), Some(fb)) => centroid_cos(fa, fb) >= params.face_threshold,
        _ => !params.require_both,
    }
}

/// All cross-playlist pairs passing both similarity gates, sorted.
pub fn find_merge_candidates(clusters: &[SpeakerCluster], params: &MergeParams) -> Vec<ClusterPair> {
    let per_row = par::map_range(clusters.len(), |i| {
        let a = &clusters[i];
        clusters[i + 1..]
            .iter()
            .filter(|b| is_candidate(a, b, params))
            .map(|b| ClusterPair::new(a.cluster_id.clone(), b.cluster_id.clone()))
            .collect::<Vec<_>>()
    });
    let mut pairs: Vec<ClusterPair> = per_row.into_iter().flatten().collect();
    pairs.sort();
    pairs
}

struct UnionFind {
    parent: Vec<usize>,
    rank: Vec<u8>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self { parent: (0..n).collect(), rank: vec![0; n] }
    }

    fn find(&mut self, mut x: usize) -> usize {
        let mut root = x;
        while self.parent[root] != root {
            root = self.parent[root];
        }
        while self.parent[x] != root {
            let next = self.parent[x];
            self.parent[x] = root;
            x = next;
        }
        root
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return;
        }
        match self.rank[ra].cmp(&self.rank[rb]) {
            std::cmp::Ordering::Less => self.parent[ra] = rb,
            std::cmp::Ordering::Greater => self.parent[rb] = ra,
            std::cmp::Ordering::Equal => {
                self.parent[rb] = ra;
                self.rank[ra] += 1;
            }
        }
    }
}

/// Merges clusters along candidate edges. Identities are numbered in
/// ascending order of their smallest member utterance id.
pub fn merge_speakers(clusters: &[SpeakerCluster], candidates: &[ClusterPair]) -> Result<Vec<SpeakerIdentity>> {
    let mut index: BTreeMap<&str, usize> = BTreeMap::new();
    for (i, c) in clusters.iter().enumerate() {
        if index.insert(&c.cluster_id, i).is_some() {
            return Err(CombineError::DuplicateCluster(c.cluster_id.clone()));
        }
    }
    let mut owner: BTreeMap<&str, &str> = BTreeMap::new();
    for c in clusters {
        for u in &c.member_utts {
            if let Some(first) = owner.insert(u, &c.cluster_id) {
                return Err(CombineError::OverlappingClusters {
                    utt_id: u.clone(),
                    first: first.to_owned(),
                    second: c.cluster_id.clone(),
                });
            }
        }
    }
    let lookup = |id: &str| index.get(id).copied().ok_or_else(|| CombineError::UnknownCluster(id.to_owned()));

    let mut uf = UnionFind::new(clusters.len());
    for ClusterPair(a, b) in candidates {
        let (ia, ib) = (lookup(a)?, lookup(b)?);
        uf.union(ia, ib);
    }

    let mut components: BTreeMap<usize, (BTreeSet<String>, BTreeSet<String>)> = BTreeMap::new();
    for (i, c) in clusters.iter().enumerate() {
        let entry = components.entry(uf.find(i)).or_default();
        entry.0.insert(c.cluster_id.clone());
        entry.1.extend(c.member_utts.iter().cloned());
    }
    let mut groups: Vec<_> = components.into_values().collect();
    // Ties only arise between memberless groups; the smallest cluster id breaks them.
    groups.sort_by(|a, b| (a.1.first(), a.0.first()).cmp(&(b.1.first(), b.0.first())));
    Ok(groups
        .into_iter()
        .enumerate()
        .map(|(k, (source_clusters, member_utts))| SpeakerIdentity {
            speaker_id: speaker_label(k),
            source_clusters,
            member_utts,
        })
        .collect())
}

/// Returns the utterances that belong to some identity, with `speaker_id` set.
/// Input order is preserved; unassigned utterances are dropped.
pub fn label_utterances(utts: &[UtteranceRecord], identities: &[SpeakerIdentity]) -> Vec<UtteranceRecord> {
    let speaker_of: BTreeMap<&str, &str> = identities
        .iter()
        .flat_map(|s| s.member_utts.iter().map(move |u| (u.as_str(), s.speaker_id.as_str())))
        .collect();
    utts.iter()
        .filter_map(|u| {
            speaker_of.get(u.utt_id.as_str()).map(|&spk| UtteranceRecord { speaker_id: Some(spk.to_owned()), ..u.clone() })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(angle: f64) -> Vec<f64> {
        vec![angle.cos(), angle.sin()]
    }

    fn cluster(id: &str, playlist: &str, members: &[&str], audio: Vec<f64>, face: Option<Vec<f64>>) -> SpeakerCluster {
        SpeakerCluster {
            cluster_id: id.into(),
            playlist_id: playlist.into(),
            member_utts: members.iter().map(|s| s.to_string()).collect(),
            audio_centroid: audio,
            face_centroid: face,
        }
    }

    fn with_cos(audio: f64, face: Option<f64>) -> (SpeakerCluster, SpeakerCluster) {
        let a = cluster("p1#0", "p1", &["a"], unit(0.0), Some(unit(0.0)));
        let b = cluster("p2#0", "p2", &["b"], unit(audio.acos()), face.map(|f| unit(f.acos())));
        (a, b)
    }

    #[test]
    fn both_gates_pass() {
        let (a, b) = with_cos(0.9, Some(0.9));
        assert_eq!(find_merge_candidates(&[a, b], &MergeParams::default()), vec![ClusterPair::new("p1#0", "p2#0")]);
    }

    #[test]
    fn weak_face_blocks_merge() {
        let (a, b) = with_cos(0.9, Some(0.5));
        assert!(find_merge_candidates(&[a, b], &MergeParams::default()).is_empty());
    }

    #[test]
    fn missing_face_blocks_merge_only_when_required() {
        let (a, b) = with_cos(0.9, None);
        let clusters = [a, b];
        assert!(find_merge_candidates(&clusters, &MergeParams::default()).is_empty());
        let loose = MergeParams { require_both: false, ..Default::default() };
        assert_eq!(find_merge_candidates(&clusters, &loose).len(), 1);
    }

    #[test]
    fn same_playlist_never_merges() {
        let a = cluster("p1#0", "p1", &["a"], unit(0.0), Some(unit(0.0)));
        let b = cluster("p1#1", "p1", &["b"], unit(0.0), Some(unit(0.0)));
        assert!(find_merge_candidates(&[a, b], &MergeParams::default()).is_empty());
    }

    #[test]
    fn transitive_closure() {
        let cs = [
            cluster("A", "p1", &["u1"], unit(0.0), None),
            cluster("B", "p2", &["u0"], unit(0.0), None),
            cluster("C", "p3", &["u2"], unit(0.0), None),
            cluster("D", "p4", &["u3"], unit(0.0), None),
        ];
        let ids = merge_speakers(&cs, &[ClusterPair::new("A", "B"), ClusterPair::new("C", "B")]).unwrap();
        assert_eq!(ids.len(), 2);
        assert_eq!(ids[0].speaker_id, "spk00000");
        assert_eq!(ids[0].source_clusters, ["A", "B", "C"].iter().map(|s| s.to_string()).collect());
        assert_eq!(ids[1].source_clusters.len(), 1);
    }

    #[test]
    fn no_candidates_yields_singletons() {
        let cs: Vec<_> = (0..5).map(|i| cluster(&format!("c{i}"), "p", &[&format!("u{}", 4 - i)], unit(0.0), None)).collect();
        let ids = merge_speakers(&cs, &[]).unwrap();
        assert_eq!(ids.len(), 5);
        // numbered by smallest member: u0 belongs to c4
        assert!(ids[0].source_clusters.contains("c4"));
    }

    #[test]
    fn unknown_cluster_is_rejected() {
        let cs = [cluster("A", "p1", &["u"], unit(0.0), None)];
        assert!(matches!(merge_speakers(&cs, &[ClusterPair::new("A", "Z")]), Err(CombineError::UnknownCluster(z)) if z == "Z"));
    }

    #[test]
    fn overlapping_clusters_are_rejected() {
        let cs = [cluster("A", "p1", &["u"], unit(0.0), None), cluster("B", "p2", &["u"], unit(0.0), None)];
        assert!(matches!(merge_speakers(&cs, &[]), Err(CombineError::OverlappingClusters { .. })));
    }

    #[test]
    fn unreachable_thresholds_keep_clusters_apart() {
        let cs: Vec<_> =
            (0..6).map(|i| cluster(&format!("c{i}"), &format!("p{i}"), &[&format!("u{i}")], unit(0.0), Some(unit(0.0)))).collect();
        let p = MergeParams { audio_threshold: 1.01, face_threshold: 1.01, require_both: true };
        p.validate().unwrap();
        let cands = find_merge_candidates(&cs, &p);
        assert!(cands.is_empty());
        let ids = merge_speakers(&cs, &cands).unwrap();
        assert_eq!(ids.len(), 6);
        for (id, c) in ids.iter().zip(&cs) {
            assert_eq!(id.member_utts, c.member_utts);
        }
    }

    #[test]
    fn labelling_sets_speaker_and_drops_unassigned() {
        let cs = [cluster("A", "p1", &["u1"], unit(0.0), None)];
        let ids = merge_speakers(&cs, &[]).unwrap();
        let mk = |id: &str| UtteranceRecord {
            utt_id: id.into(),
            video_id: "v".into(),
            playlist_id: "p1".into(),
            start_s: 0.0,
            end_s: 2.0,
            duration_s: 2.0,
            sample_rate_hz: 16000,
            speaker_id: None,
            genre: None,
            genre_conf: None,
        };
        let out = label_utterances(&[mk("u0"), mk("u1")], &ids);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].speaker_id.as_deref(), Some("spk00000"));
    }
}
