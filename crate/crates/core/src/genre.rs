//! Per-utterance genre assignment from external classifier probabilities, and
//! corpus statistics (duration histogram, per-genre speaker/utterance/hour rows).

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::manifest::{ManifestRecord, UtteranceRecord};

const DISTRIBUTION_TOLERANCE: f64 = 1e-3;

/// Speech style of an utterance. Declaration order is the tie-break priority.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Genre {
    Spontaneous,
    Reading,
    Singing,
}

impl Genre {
    pub const ALL: [Genre; 3] = [Genre::Spontaneous, Genre::Reading, Genre::Singing];

    pub fn as_str(self) -> &'static str {
        match self {
            Genre::Spontaneous => "spontaneous",
            Genre::Reading => "reading",
            Genre::Singing => "singing",
        }
    }
}

impl fmt::Display for Genre {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Genre {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Genre::ALL
            .into_iter()
            .find(|g| g.as_str() == s)
            .ok_or_else(|| format!("unknown genre {s:?}"))
    }
}

#[derive(Debug, Error)]
pub enum GenreError {
    #[error("no genre probabilities for utterance {0:?}")]
    MissingProbs(String),
    #[error("genre probabilities for {0:?} are not a distribution")]
    InvalidDistribution(String),
    #[error("duplicate genre probabilities for {0:?}")]
    DuplicateProbs(String),
}

/// One row of `genre_probs.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenreProbs {
    pub utt_id: String,
    pub p_spontaneous: f64,
    pub p_reading: f64,
    pub p_singing: f64,
}

impl GenreProbs {
    fn probs(&self) -> [f64; 3] {
        [self.p_spontaneous, self.p_reading, self.p_singing]
    }

    pub fn is_distribution(&self) -> bool {
        let p = self.probs();
        p.iter().all(|x| (0.0..=1.0).contains(x)) && (p.iter().sum::<f64>() - 1.0).abs() <= DISTRIBUTION_TOLERANCE
    }

    /// Most probable genre (ties go to the earlier genre) and its probability.
    pub fn argmax(&self) -> (Genre, f64) {
        let p = self.probs();
        let mut best = 0;
        for i in 1..3 {
            if p[i] > p[best] {
                best = i;
            }
        }
        (Genre::ALL[best], p[best])
    }
}

impl ManifestRecord for GenreProbs {
    fn unique_key(&self) -> Option<&str> {
        Some(&self.utt_id)
    }

    fn label(&self) -> String {
        self.utt_id.clone()
    }

    fn check(&self) -> Result<(), String> {
        if self.is_distribution() {
            Ok(())
        } else {
            Err("probabilities must lie in [0,1] and sum to 1 ± 1e-3".into())
        }
    }
}

/// Sets `genre`/`genre_conf` from the argmax of each utterance's probabilities.
/// Utterances whose top probability is below `min_conf` keep genre unset.
pub fn assign_genres(
    utts: &[UtteranceRecord],
    probs: &[GenreProbs],
    min_conf: f64,
) -> Result<Vec<UtteranceRecord>, GenreError> {
    let mut by_id: HashMap<&str, &GenreProbs> = HashMap::with_capacity(probs.len());
    for p in probs {
        if by_id.insert(p.utt_id.as_str(), p).is_some() {
            return Err(GenreError::DuplicateProbs(p.utt_id.clone()));
        }
    }
    utts.iter()
        .map(|u| {
            let p = by_id.get(u.utt_id.as_str()).ok_or_else(|| GenreError::MissingProbs(u.utt_id.clone()))?;
            if !p.is_distribution() {
                return Err(GenreError::InvalidDistribution(u.utt_id.clone()));
            }
            let (genre, conf) = p.argmax();
            let mut out = u.clone();
            if conf >= min_conf {
                out.genre = Some(genre);
                out.genre_conf = Some(conf);
            } else {
                out.genre = None;
                out.genre_conf = None;
            }
            Ok(out)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BucketStat {
    pub count: u64,
    /// Fraction of all utterances, in `[0, 1]`.
    pub proportion: f64,
}

/// Utterance-duration histogram with half-open second buckets.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DurationBuckets {
    #[serde(rename = "<2")]
    pub under_2: BucketStat,
    #[serde(rename = "2-5")]
    pub from_2_to_5: BucketStat,
    #[serde(rename = "5-10")]
    pub from_5_to_10: BucketStat,
    #[serde(rename = "10-20")]
    pub from_10_to_20: BucketStat,
    #[serde(rename = ">20")]
    pub over_20: BucketStat,
}

impl DurationBuckets {
    pub const LABELS: [&'static str; 5] = ["<2", "2-5", "5-10", "10-20", ">20"];
    const UPPER_BOUNDS_S: [f64; 4] = [2.0, 5.0, 10.0, 20.0];

    /// Bucket index for a duration: `[0,2) [2,5) [5,10) [10,20) [20,∞)`.
    pub fn index_of(duration_s: f64) -> usize {
        Self::UPPER_BOUNDS_S.iter().position(|&hi| duration_s < hi).unwrap_or(4)
    }

    pub fn as_array(&self) -> [&BucketStat; 5] {
        [&self.under_2, &self.from_2_to_5, &self.from_5_to_10, &self.from_10_to_20, &self.over_20]
    }

    fn as_array_mut(&mut self) -> [&mut BucketStat; 5] {
        [
            &mut self.under_2,
            &mut self.from_2_to_5,
            &mut self.from_5_to_10,
            &mut self.from_10_to_20,
            &mut self.over_20,
        ]
    }

    pub fn get(&self, label: &str) -> Option<&BucketStat> {
        Self::LABELS.iter().position(|l| *l == label).map(|i| self.as_array()[i])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct GenreRow {
    pub n_speakers: usize,
    pub n_utts: usize,
    /// Total duration in hours, rounded to 2 decimals.
    pub hours: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub duration_buckets: DurationBuckets,
    pub genre_rows: BTreeMap<Genre, GenreRow>,
    /// `n_speakers` counts a speaker once per genre it appears in.
    pub totals: GenreRow,
}

fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

/// Duration histogram over all utterances plus per-genre rows over genre-labelled ones.
pub fn corpus_stats(utts: &[UtteranceRecord]) -> CorpusStats {
    let mut buckets = DurationBuckets::default();
    {
        let slots = buckets.as_array_mut();
        let mut counts = [0u64; 5];
        for u in utts {
            counts[DurationBuckets::index_of(u.duration_s)] += 1;
        }
        let total = utts.len() as f64;
        for (slot, count) in slots.into_iter().zip(counts) {
            slot.count = count;
            slot.proportion = if utts.is_empty() { 0.0 } else { count as f64 / total };
        }
    }

    #[derive(Default)]
    struct Acc<'a> {
        speakers: BTreeSet<&'a str>,
        n_utts: usize,
        seconds: f64,
    }
    let mut acc: BTreeMap<Genre, Acc> = Genre::ALL.iter().map(|&g| (g, Acc::default())).collect();
    for u in utts {
        let Some(g) = u.genre else { continue };
        let a = acc.get_mut(&g).expect("all genres present");
        if let Some(s) = &u.speaker_id {
            a.speakers.insert(s);
        }
        a.n_utts += 1;
        a.seconds += u.duration_s;
    }

    let mut total_seconds = 0.0;
    let mut totals = GenreRow::default();
    let genre_rows = acc
        .into_iter()
        .map(|(g, a)| {
            total_seconds += a.seconds;
            totals.n_speakers += a.speakers.len();
            totals.n_utts += a.n_utts;
            (g, GenreRow { n_speakers: a.speakers.len(), n_utts: a.n_utts, hours: round2(a.seconds / 3600.0) })
        })
        .collect();
    totals.hours = round2(total_seconds / 3600.0);

    CorpusStats { duration_buckets: buckets, genre_rows, totals }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifest::make_utt_id;
    use proptest::prelude::*;

    fn utt(i: usize, dur: f64, spk: Option<&str>, genre: Option<Genre>) -> UtteranceRecord {
        let start = i as f64 * 100.0;
        UtteranceRecord {
            utt_id: make_utt_id("v", start, start + dur),
            video_id: "v".into(),
            playlist_id: "p".into(),
            start_s: start,
            end_s: start + dur,
            duration_s: dur,
            sample_rate_hz: 16_000,
            speaker_id: spk.map(str::to_owned),
            genre,
            genre_conf: None,
        }
    }

    fn probs(u: &UtteranceRecord, p: [f64; 3]) -> GenreProbs {
        GenreProbs { utt_id: u.utt_id.clone(), p_spontaneous: p[0], p_reading: p[1], p_singing: p[2] }
    }

    #[test]
    fn argmax_and_tie_priority() {
        let us = [utt(0, 3.0, None, None), utt(1, 3.0, None, None), utt(2, 3.0, None, None)];
        let ps = [probs(&us[0], [0.7, 0.2, 0.1]), probs(&us[1], [0.4, 0.4, 0.2]), probs(&us[2], [0.1, 0.3, 0.6])];
        let out = assign_genres(&us, &ps, 0.0).unwrap();
        assert_eq!(out[0].genre, Some(Genre::Spontaneous));
        assert_eq!(out[0].genre_conf, Some(0.7));
        assert_eq!(out[1].genre, Some(Genre::Spontaneous));
        assert_eq!(out[2].genre, Some(Genre::Singing));
        // reading beats singing on a tie
        let tie = assign_genres(&us[..1], &[probs(&us[0], [0.2, 0.4, 0.4])], 0.0).unwrap();
        assert_eq!(tie[0].genre, Some(Genre::Reading));
    }

    #[test]
    fn min_conf_leaves_genre_unset() {
        let u = utt(0, 3.0, None, None);
        let out = assign_genres(std::slice::from_ref(&u), &[probs(&u, [0.5, 0.3, 0.2])], 0.6).unwrap();
        assert_eq!(out[0].genre, None);
        assert_eq!(out[0].genre_conf, None);
    }

    #[test]
    fn missing_and_invalid_probs() {
        let u = utt(0, 3.0, None, None);
        assert!(matches!(assign_genres(std::slice::from_ref(&u), &[], 0.0), Err(GenreError::MissingProbs(_))));
        assert!(matches!(
            assign_genres(std::slice::from_ref(&u), &[probs(&u, [0.5, 0.5, 0.5])], 0.0),
            Err(GenreError::InvalidDistribution(_))
        ));
        assert!(matches!(
            assign_genres(std::slice::from_ref(&u), &[probs(&u, [1.2, -0.1, -0.1])], 0.0),
            Err(GenreError::InvalidDistribution(_))
        ));
        assert!(matches!(
            assign_genres(std::slice::from_ref(&u), &[probs(&u, [1.0, 0.0, 0.0]), probs(&u, [1.0, 0.0, 0.0])], 0.0),
            Err(GenreError::DuplicateProbs(_))
        ));
    }

    #[test]
    fn single_reading_utterance_stats() {
        let s = corpus_stats(&[utt(0, 3.0, Some("spk1"), Some(Genre::Reading))]);
        assert_eq!(s.duration_buckets.from_2_to_5, BucketStat { count: 1, proportion: 1.0 });
        assert_eq!(s.genre_rows[&Genre::Reading], GenreRow { n_speakers: 1, n_utts: 1, hours: 0.0 });
        assert_eq!(s.genre_rows[&Genre::Singing], GenreRow::default());
        assert_eq!(s.totals.n_utts, 1);
    }

    #[test]
    fn bucket_boundaries_are_half_open() {
        assert_eq!(DurationBuckets::index_of(0.0), 0);
        assert_eq!(DurationBuckets::index_of(1.999), 0);
        assert_eq!(DurationBuckets::index_of(2.0), 1);
        assert_eq!(DurationBuckets::index_of(5.0), 2);
        assert_eq!(DurationBuckets::index_of(10.0), 3);
        assert_eq!(DurationBuckets::index_of(19.99), 3);
        assert_eq!(DurationBuckets::index_of(20.0), 4);
    }

    #[test]
    fn speakers_counted_once_per_genre() {
        let us = [
            utt(0, 3.0, Some("a"), Some(Genre::Reading)),
            utt(1, 3.0, Some("a"), Some(Genre::Singing)),
            utt(2, 3.0, Some("a"), Some(Genre::Singing)),
            utt(3, 3.0, Some("b"), Some(Genre::Singing)),
        ];
        let s = corpus_stats(&us);
        assert_eq!(s.genre_rows[&Genre::Singing].n_speakers, 2);
        assert_eq!(s.totals.n_speakers, 3);
    }

    #[test]
    fn stats_json_uses_table_labels() {
        let s = corpus_stats(&[utt(0, 25.0, Some("a"), Some(Genre::Spontaneous))]);
        let json = serde_json::to_string(&s).unwrap();
        assert!(json.contains(r#""<2":"#) && json.contains(r#"">20":{"count":1"#));
        assert!(json.contains(r#""spontaneous":"#));
    }

    proptest! {
        #[test]
        fn buckets_partition_and_genre_only_fields_change(
            rows in proptest::collection::vec((0.01f64..60.0, 0usize..5, 0usize..4, [0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0]), 1..60)
        ) {
            let utts: Vec<_> = rows.iter().enumerate().map(|(i, &(d, spk, g, _))| {
                let genre = (g < 3).then(|| Genre::ALL[g]);
                utt(i, d, Some(&format!("s{spk}")), genre)
            }).collect();
            let s = corpus_stats(&utts);
            let total: u64 = s.duration_buckets.as_array().iter().map(|b| b.count).sum();
            prop_assert_eq!(total as usize, utts.len());
            let prop_sum: f64 = s.duration_buckets.as_array().iter().map(|b| b.proportion).sum();
            prop_assert!((prop_sum - 1.0).abs() < 1e-6);
            let labelled = utts.iter().filter(|u| u.genre.is_some()).count();
            prop_assert_eq!(s.totals.n_utts, labelled);
            let distinct: BTreeSet<_> = utts.iter().filter(|u| u.genre.is_some()).filter_map(|u| u.speaker_id.clone()).collect();
            prop_assert!(s.totals.n_speakers >= distinct.len());

            let ps: Vec<_> = utts.iter().zip(&rows).map(|(u, r)| {
                let sum: f64 = r.3.iter().sum::<f64>().max(1e-9);
                probs(u, [r.3[0] / sum, r.3[1] / sum, r.3[2] / sum])
            }).filter(|p| p.is_distribution()).collect();
            if ps.len() == utts.len() {
                let out = assign_genres(&utts, &ps, 0.0).unwrap();
                for (a, b) in utts.iter().zip(&out) {
                    let mut b2 = b.clone();
                    b2.genre = a.genre;
                    b2.genre_conf = a.genre_conf;
                    prop_assert_eq!(a, &b2);
                }
            }
        }
    }
}
