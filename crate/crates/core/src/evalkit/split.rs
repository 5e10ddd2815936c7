use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{EvalError, Result};
use crate::manifest::UtteranceRecord;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub test_speaker_count: usize,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self { test_speaker_count: 150, seed: 0 }
    }
}

/// Speaker-disjoint train/test partition; the easy and hard trial lists share `test`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: BTreeSet<String>,
    pub test: BTreeSet<String>,
}

impl Split {
    pub fn test_utterances(&self, utts: &[UtteranceRecord]) -> Vec<UtteranceRecord> {
        utts.iter().filter(|u| u.speaker_id.as_ref().is_some_and(|s| self.test.contains(s))).cloned().collect()
    }
}

/// Draws the test speakers uniformly without replacement from the sorted speaker list.
pub fn split_speakers(utts: &[UtteranceRecord], spec: &SplitSpec) -> Result<Split> {
    let mut speakers = BTreeSet::new();
    for u in utts {
        let s = u.speaker_id.as_ref().ok_or_else(|| EvalError::MissingSpeaker(u.utt_id.clone()))?;
        speakers.insert(s.as_str());
    }
    if spec.test_speaker_count >= speakers.len() {
        return Err(EvalError::NotEnoughSpeakers { requested: spec.test_speaker_count, available: speakers.len() });
    }
    let sorted: Vec<&str> = speakers.into_iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let chosen: BTreeSet<usize> =
        rand::seq::index::sample(&mut rng, sorted.len(), spec.test_speaker_count).into_iter().collect();
    type Indexed<'a> = Vec<(usize, &'a str)>;
    let (test, train): (Indexed, Indexed) = sorted.iter().copied().enumerate().partition(|(i, _)| chosen.contains(i));
    Ok(Split {
        train: train.into_iter().map(|(_, s)| s.to_owned()).collect(),
        test: test.into_iter().map(|(_, s)| s.to_owned()).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn pool(speakers: usize, per: usize) -> Vec<UtteranceRecord> {
        (0..speakers)
            .flat_map(|s| {
                (0..per).map(move |i| UtteranceRecord {
                    utt_id: format!("v{s}/{i}"),
                    video_id: format!("v{s}"),
                    playlist_id: "p".into(),
                    start_s: 0.0,
                    end_s: 2.0,
                    duration_s: 2.0,
                    sample_rate_hz: 16000,
                    speaker_id: Some(format!("spk{s:05}")),
                    genre: None,
                    genre_conf: None,
                })
            })
            .collect()
    }

    #[test]
    fn table_four_sizes() {
        let utts = pool(1406, 1);
        let split = split_speakers(&utts, &SplitSpec { test_speaker_count: 150, seed: 3 }).unwrap();
        assert_eq!((split.train.len(), split.test.len()), (1256, 150));
        assert!(split.train.is_disjoint(&split.test));
    }

    #[test]
    fn deterministic_per_seed() {
        let utts = pool(40, 2);
        let spec = SplitSpec { test_speaker_count: 10, seed: 11 };
        assert_eq!(split_speakers(&utts, &spec).unwrap(), split_speakers(&utts, &spec).unwrap());
        let other = split_speakers(&utts, &SplitSpec { seed: 12, ..spec.clone() }).unwrap();
        assert_ne!(split_speakers(&utts, &spec).unwrap(), other);
    }

    #[test]
    fn count_must_leave_training_speakers() {
        let utts = pool(5, 1);
        assert!(matches!(
            split_speakers(&utts, &SplitSpec { test_speaker_count: 5, seed: 0 }),
            Err(EvalError::NotEnoughSpeakers { requested: 5, available: 5 })
        ));
        let mut bad = pool(3, 1);
        bad[1].speaker_id = None;
        assert!(matches!(split_speakers(&bad, &SplitSpec::default()), Err(EvalError::MissingSpeaker(_))));
    }

    #[test]
    fn test_utterances_follow_speakers() {
        let utts = pool(6, 3);
        let split = split_speakers(&utts, &SplitSpec { test_speaker_count: 2, seed: 1 }).unwrap();
        let test = split.test_utterances(&utts);
        assert_eq!(test.len(), 6);
        assert!(test.iter().all(|u| split.test.contains(u.speaker_id.as_ref().unwrap())));
    }
}
