//! Seeded synthetic fixtures: planted embedding partitions, a corpus with the
//! reference duration/genre marginals, a planted genre-shift pool, and a small
//! end-to-end demo corpus for the pipeline.
//!
//! Everything here is generation only. Expected values are checked by tests.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;

use chrono::NaiveDate;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::embedding::{self, EmbeddingTable, Modality};
use crate::genre::{Genre, GenreProbs};
use crate::manifest::{self, make_utt_id, SegmentRecord, UtteranceRecord, VideoRecord};

/// Uniformly random unit vector.
pub fn unit_gaussian(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        if let Ok(u) = embedding::normalize(&v) {
            return u;
        }
    }
}

/// `k` random orthonormal vectors (Gram-Schmidt on Gaussian draws).
pub fn orthonormal(k: usize, dim: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    assert!(k <= dim);
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(k);
    while out.len() < k {
        let mut v = unit_gaussian(rng, dim);
        for b in &out {
            let d = embedding::dot(&v, b);
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
        }
        if let Ok(u) = embedding::normalize(&v) {
            out.push(u);
        }
    }
    out
}

/// `center + noise` where the noise has expected norm `spread`.
///
/// For a unit centre the expected cosine between two draws is about `1 / (1 + spread²)`.
pub fn perturb(center: &[f64], spread: f64, rng: &mut impl Rng) -> Vec<f32> {
    let sigma = spread / (center.len() as f64).sqrt();
    center
        .iter()
        .map(|&c| {
            let g: f64 = StandardNormal.sample(rng);
            (c + sigma * g) as f32
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct PlantedSpec {
    pub clusters: usize,
    pub per_cluster: usize,
    /// Number of uniformly random noise directions.
    pub noise: usize,
    pub dim: usize,
    pub spread: f64,
}

impl PlantedSpec {
    /// 3 × 200 points plus 5% uniform noise in 64 dimensions.
    pub fn three_by_two_hundred() -> Self {
        Self { clusters: 3, per_cluster: 200, noise: 30, dim: 64, spread: 0.2 }
    }
}

#[derive(Debug, Clone)]
pub struct PlantedPartition {
    pub table: EmbeddingTable,
    /// Planted cluster per id; noise points carry -1.
    pub truth: BTreeMap<String, i32>,
    pub centers: Vec<Vec<f64>>,
}

/// Points around orthonormal centres, ids shuffled so id order carries no cluster information.
pub fn planted_partition(spec: &PlantedSpec, rng: &mut impl Rng) -> PlantedPartition {
    let centers = orthonormal(spec.clusters, spec.dim, rng);
    let total = spec.clusters * spec.per_cluster + spec.noise;
    let mut slots: Vec<usize> = (0..total).collect();
    slots.shuffle(rng);
    let mut table = EmbeddingTable::new(spec.dim, Modality::Audio);
    let mut truth = BTreeMap::new();
    let mut next = slots.into_iter();
    for (k, c) in centers.iter().enumerate() {
        for _ in 0..spec.per_cluster {
            let id = format!("p{:05}", next.next().expect("slot"));
            table.insert(id.clone(), perturb(c, spec.spread, rng)).expect("finite");
            truth.insert(id, k as i32);
        }
    }
    for _ in 0..spec.noise {
        let id = format!("p{:05}", next.next().expect("slot"));
        let v = unit_gaussian(rng, spec.dim).into_iter().map(|x| x as f32).collect();
        table.insert(id.clone(), v).expect("finite");
        truth.insert(id, -1);
    }
    PlantedPartition { table, truth, centers }
}

/// Reference duration-bucket counts (`<2, 2-5, 5-10, 10-20, >20`).
pub const TABLE_BUCKET_COUNTS: [usize; 5] = [44_288, 95_932, 23_426, 19_125, 5_209];
/// Reference per-genre utterance counts (spontaneous, reading, singing).
pub const TABLE_GENRE_UTTS: [usize; 3] = [150_513, 31_702, 5_765];
/// Reference per-genre speaker counts.
pub const TABLE_GENRE_SPEAKERS: [usize; 3] = [1_261, 717, 545];
/// Reference per-genre hours.
pub const TABLE_GENRE_HOURS: [f64; 3] = [207.82, 41.80, 11.91];
/// Distinct speakers overall.
pub const TABLE_DISTINCT_SPEAKERS: usize = 1_406;

/// A labelled corpus whose statistics reproduce the reference duration and genre tables.
pub fn reference_stats_corpus() -> Vec<UtteranceRecord> {
    let n: usize = TABLE_BUCKET_COUNTS.iter().sum();
    assert_eq!(n, TABLE_GENRE_UTTS.iter().sum::<usize>());

    // Spread genres evenly over the utterance sequence, then cut it into buckets.
    let mut genre_seq = Vec::with_capacity(n);
    let mut assigned = [0usize; 3];
    for i in 0..n {
        let g = (0..3)
            .max_by(|&a, &b| {
                let da = (TABLE_GENRE_UTTS[a] * (i + 1)) as f64 / n as f64 - assigned[a] as f64;
                let db = (TABLE_GENRE_UTTS[b] * (i + 1)) as f64 / n as f64 - assigned[b] as f64;
                da.total_cmp(&db).then(b.cmp(&a))
            })
            .expect("three genres");
        assigned[g] += 1;
        genre_seq.push(g);
    }
    let mut bucket_seq = Vec::with_capacity(n);
    for (b, &count) in TABLE_BUCKET_COUNTS.iter().enumerate() {
        bucket_seq.extend(std::iter::repeat_n(b, count));
    }

    const BASE_S: [f64; 5] = [1.0, 3.0, 7.0, 14.0, 20.0];
    let mut base_total = [0.0f64; 3];
    let mut long_count = [0usize; 3];
    for (&g, &b) in genre_seq.iter().zip(&bucket_seq) {
        base_total[g] += BASE_S[b];
        if b == 4 {
            long_count[g] += 1;
        }
    }
    // Longest bucket absorbs the residual so each genre hits its reference hours.
    let extra: Vec<f64> = (0..3)
        .map(|g| {
            let residual = TABLE_GENRE_HOURS[g] * 3600.0 - base_total[g];
            assert!(residual >= 0.0 && long_count[g] > 0);
            residual / long_count[g] as f64
        })
        .collect();

    let first_speaker = [0usize, TABLE_DISTINCT_SPEAKERS - TABLE_GENRE_SPEAKERS[1], 0];
    let mut per_genre_seen = [0usize; 3];
    genre_seq
        .iter()
        .zip(&bucket_seq)
        .enumerate()
        .map(|(i, (&g, &b))| {
            let duration = if b == 4 { BASE_S[b] + extra[g] } else { BASE_S[b] };
            let spk = first_speaker[g] + per_genre_seen[g] % TABLE_GENRE_SPEAKERS[g];
            per_genre_seen[g] += 1;
            let video = format!("v{i:06}");
            UtteranceRecord {
                utt_id: make_utt_id(&video, 0.0, duration),
                video_id: video,
                playlist_id: format!("pl{:04}", spk),
                start_s: 0.0,
                end_s: duration,
                duration_s: duration,
                sample_rate_hz: manifest::CORPUS_SAMPLE_RATE_HZ,
                speaker_id: Some(format!("spk{spk:05}")),
                genre: Some(Genre::ALL[g]),
                genre_conf: Some(1.0),
            }
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct GenreShiftSpec {
    pub speakers: usize,
    pub utts_per_genre: usize,
    pub dim: usize,
    /// Within-speaker spread for speech genres.
    pub spread: f64,
    /// Weight of a shared direction mixed into singing utterances (0 = no shift).
    pub singing_shift: f64,
    /// Extra within-speaker spread for singing utterances.
    pub singing_spread: f64,
}

impl Default for GenreShiftSpec {
    fn default() -> Self {
        Self { speakers: 24, utts_per_genre: 8, dim: 64, spread: 0.9, singing_shift: 1.2, singing_spread: 1.4 }
    }
}

/// Multi-genre speaker pool whose singing utterances are pulled toward a shared direction.
pub fn genre_shift_pool(spec: &GenreShiftSpec, rng: &mut impl Rng) -> (Vec<UtteranceRecord>, EmbeddingTable) {
    let basis = orthonormal(spec.speakers + 1, spec.dim, rng);
    let shared = &basis[spec.speakers];
    let mut table = EmbeddingTable::new(spec.dim, Modality::Audio);
    let mut utts = Vec::new();
    for (s, own) in basis[..spec.speakers].iter().enumerate() {
        for g in Genre::ALL {
            for i in 0..spec.utts_per_genre {
                let video = format!("s{s:03}{}", g.as_str());
                let start = i as f64 * 10.0;
                let u = UtteranceRecord {
                    utt_id: make_utt_id(&video, start, start + 4.0),
                    video_id: video,
                    playlist_id: format!("pl{s:03}"),
                    start_s: start,
                    end_s: start + 4.0,
                    duration_s: 4.0,
                    sample_rate_hz: manifest::CORPUS_SAMPLE_RATE_HZ,
                    speaker_id: Some(format!("spk{s:05}")),
                    genre: Some(g),
                    genre_conf: Some(1.0),
                };
                let v = if g == Genre::Singing {
                    let center: Vec<f64> =
                        own.iter().zip(shared).map(|(a, b)| a + spec.singing_shift * b).collect();
                    perturb(&center, spec.singing_spread, rng)
                } else {
                    perturb(own, spec.spread, rng)
                };
                table.insert(u.utt_id.clone(), v).expect("finite");
                utts.push(u);
            }
        }
    }
    (utts, table)
}

/// Inputs for a complete pipeline run.
#[derive(Debug, Clone)]
pub struct DemoCorpus {
    pub videos: Vec<VideoRecord>,
    pub segments: Vec<SegmentRecord>,
    pub genre_probs: Vec<GenreProbs>,
    pub audio: EmbeddingTable,
    pub face: EmbeddingTable,
}

#[derive(Debug, Clone)]
pub struct DemoSpec {
    pub speakers: usize,
    pub playlists: usize,
    pub videos_per_playlist: usize,
    pub segments_per_speaker_video: usize,
    pub dim: usize,
    pub seed: u64,
}

impl Default for DemoSpec {
    fn default() -> Self {
        Self { speakers: 36, playlists: 24, videos_per_playlist: 3, segments_per_speaker_video: 6, dim: 64, seed: 2024 }
    }
}

/// Playlists with one or two predominant speakers (some recurring across
/// playlists), guest utterances, face-mismatched intruders, missing faces,
/// sub-second segments and videos that fail the quality gate.
pub fn demo_corpus(spec: &DemoSpec) -> DemoCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let voices: Vec<Vec<f64>> = (0..spec.speakers).map(|_| unit_gaussian(&mut rng, spec.dim)).collect();
    let faces: Vec<Vec<f64>> = (0..spec.speakers).map(|_| unit_gaussian(&mut rng, spec.dim)).collect();
    // each speaker leans to one genre but has some of the others
    let lean: Vec<Genre> = (0..spec.speakers).map(|s| Genre::ALL[s % 3]).collect();

    let mut audio = EmbeddingTable::new(spec.dim, Modality::Audio);
    let mut face = EmbeddingTable::new(spec.dim, Modality::Face);
    let mut videos = Vec::new();
    let mut segments = Vec::new();
    let mut genre_probs = Vec::new();
    let base_date = NaiveDate::from_ymd_opt(2019, 3, 1).expect("valid date");

    for p in 0..spec.playlists {
        let playlist_id = format!("pl{p:03}");
        let main = p % spec.speakers;
        let second = (p * 7 + 5) % spec.speakers;
        let hosts: Vec<usize> = if p % 2 == 0 { vec![main] } else { vec![main, second] };
        for v in 0..=spec.videos_per_playlist {
            let video_id = format!("{playlist_id}v{v}");
            // the extra video fails the quality gate
            let low_quality = v == spec.videos_per_playlist;
            videos.push(VideoRecord {
                video_id: video_id.clone(),
                playlist_id: playlist_id.clone(),
                channel_id: format!("ch{:03}", p / 2),
                title: format!("episode {v} of {playlist_id}"),
                upload_date: if low_quality && p % 2 == 0 {
                    NaiveDate::from_ymd_opt(2016, 6, 1).expect("valid date")
                } else {
                    base_date + chrono::Duration::days((p * 11 + v) as i64)
                },
                height_px: if low_quality && p % 2 == 1 { 360 } else { 720 },
                duration_s: 1800.0,
            });

            let mut t = 5.0;
            let mut push = |segments: &mut Vec<SegmentRecord>, len: f64, label: &str| {
                let seg = SegmentRecord { video_id: video_id.clone(), start_s: t, end_s: t + len, diar_label: label.into() };
                t += len + 1.5;
                segments.push(seg.clone());
                seg
            };
            let mut emit = |seg: &SegmentRecord, voice: &[f64], spread: f64, face_vec: Option<&[f64]>, genre: Genre, rng: &mut ChaCha8Rng| {
                let id = make_utt_id(&seg.video_id, seg.start_s, seg.end_s);
                audio.insert(id.clone(), perturb(voice, spread, rng)).expect("finite");
                if let Some(f) = face_vec {
                    face.insert(id.clone(), perturb(f, 0.3, rng)).expect("finite");
                }
                let mut p = [0.05, 0.05, 0.05];
                p[Genre::ALL.iter().position(|g| *g == genre).expect("genre")] = 0.9;
                genre_probs.push(GenreProbs { utt_id: id, p_spontaneous: p[0], p_reading: p[1], p_singing: p[2] });
            };

            for (h, &s) in hosts.iter().enumerate() {
                for i in 0..spec.segments_per_speaker_video {
                    let len = 1.5 + ((p + v + i) % 7) as f64 * 1.7;
                    let seg = push(&mut segments, len, &format!("SPEAKER_{h:02}"));
                    let genre = if (i + v) % 3 == 0 { Genre::ALL[(s + 1 + v) % 3] } else { lean[s] };
                    // one in seven utterances has no visible face
                    let show_face = (i + 2 * v + p) % 7 != 0;
                    emit(&seg, &voices[s], 0.3, show_face.then_some(faces[s].as_slice()), genre, &mut rng);
                }
            }
            // an intruder: voice close to the host, face of somebody else
            {
                let host = hosts[0];
                let other = (host + 13) % spec.speakers;
                let seg = push(&mut segments, 3.2, "SPEAKER_00");
                let blend: Vec<f64> = voices[host].iter().zip(&voices[other]).map(|(a, b)| 0.8 * a + 0.45 * b).collect();
                emit(&seg, &blend, 0.3, Some(faces[other].as_slice()), lean[host], &mut rng);
            }
            // an unknown guest and a sub-second blip
            {
                let seg = push(&mut segments, 2.4, "SPEAKER_09");
                let voice = unit_gaussian(&mut rng, spec.dim);
                emit(&seg, &voice, 0.3, None, Genre::Spontaneous, &mut rng);
                let blip = push(&mut segments, 0.6, "SPEAKER_00");
                emit(&blip, &voices[hosts[0]], 0.3, None, Genre::Spontaneous, &mut rng);
            }
        }
    }

    DemoCorpus { videos, segments, genre_probs, audio, face }
}

/// Configuration matching [`DemoCorpus::write_to`]'s file names.
pub const DEMO_CONFIG: &str = r#"# corpusforge demo configuration
[paths]
videos = "videos.jsonl"
segments = "segments.jsonl"
audio_emb = "corpus.audio.emb"
face_emb = "corpus.face.emb"
genre_probs = "genre_probs.jsonl"
workdir = "work"

[run]
seed = 7
jobs = 0

[filter]
min_height_px = 480
min_upload_date = "2018-01-01"

[segment]
min_duration_s = 1.0
sample_rate_hz = 16000

[cluster]
eps = 0.35
min_pts = 4
assign_floor = 0.5

[cleanse]
threshold = 0.75
semantics = "similarity"
no_face_margin = 0.05

[combine]
audio_threshold = 0.75
face_threshold = 0.75
require_both = true

[genre]
min_conf = 0.0

[split]
test_speaker_count = 8

[trials]
easy_pairs = 200
hard_pairs = 200
cross_genre_frac = 0.2
hard_neg_percentile = 0.95
"#;

impl DemoCorpus {
    /// Writes the five input files and `corpusforge.toml` into `dir`.
    pub fn write_to(&self, dir: &Path) -> io::Result<()> {
        fs::create_dir_all(dir)?;
        let to_io = |e: Box<dyn std::error::Error + Send + Sync>| io::Error::other(e);
        manifest::write_manifest(&dir.join("videos.jsonl"), &self.videos).map_err(|e| to_io(e.into()))?;
        manifest::write_manifest(&dir.join("segments.jsonl"), &self.segments).map_err(|e| to_io(e.into()))?;
        manifest::write_manifest(&dir.join("genre_probs.jsonl"), &self.genre_probs).map_err(|e| to_io(e.into()))?;
        embedding::write_embeddings(&self.audio, &dir.join("corpus.audio.emb")).map_err(|e| to_io(e.into()))?;
        embedding::write_embeddings(&self.face, &dir.join("corpus.face.emb")).map_err(|e| to_io(e.into()))?;
        fs::write(dir.join("corpusforge.toml"), DEMO_CONFIG)?;
        Ok(())
    }
}
