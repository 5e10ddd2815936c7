//! Within-genre and cross-genre EER matrix.
//!
//! Every cell draws from the same speakers and the same utterances per
//! speaker and genre, so the cells differ only in which genres are paired.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::eer::compute_eer;
use super::{EvalError, Result};
use crate::embedding::{EmbeddingTable, UnitRows};
use crate::genre::Genre;
use crate::manifest::UtteranceRecord;
use crate::par;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatrixParams {
    /// Utterances drawn per speaker and genre; only speakers with this many in every genre take part.
    pub utts_per_genre: usize,
    pub pairs_per_cell: usize,
    pub seed: u64,
}

impl Default for MatrixParams {
    fn default() -> Self {
        Self { utts_per_genre: 4, pairs_per_cell: 2000, seed: 0 }
    }
}

/// EER (as a fraction) keyed by enrolment genre, then test genre.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GenreMatrix {
    pub cells: BTreeMap<Genre, BTreeMap<Genre, f64>>,
}

impl GenreMatrix {
    pub fn get(&self, enrol: Genre, test: Genre) -> f64 {
        self.cells[&enrol][&test]
    }
}

pub fn genre_eer_matrix(utts: &[UtteranceRecord], audio: &EmbeddingTable, params: &MatrixParams) -> Result<GenreMatrix> {
    let m = params.utts_per_genre;
    if m == 0 || params.pairs_per_cell < 2 {
        return Err(EvalError::InvalidParams("utts_per_genre must be positive and pairs_per_cell at least 2".into()));
    }
    let mut by_speaker: BTreeMap<&str, [Vec<&str>; 3]> = BTreeMap::new();
    for u in utts {
        let spk = u.speaker_id.as_deref().ok_or_else(|| EvalError::MissingSpeaker(u.utt_id.clone()))?;
        let genre = u.genre.ok_or_else(|| EvalError::MissingGenre(u.utt_id.clone()))?;
        by_speaker.entry(spk).or_default()[genre as usize].push(&u.utt_id);
    }
    let eligible: Vec<[Vec<&str>; 3]> =
        by_speaker.into_values().filter(|per_genre| per_genre.iter().all(|v| v.len() >= m)).collect();
    if eligible.len() < 2 {
        return Err(EvalError::InsufficientGenreCoverage(format!(
            "{} speakers have {m} utterances in every genre, 2 needed",
            eligible.len()
        )));
    }

    // Row index of (speaker s, genre g, draw a) is (s * 3 + g) * m + a.
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut chosen: Vec<&str> = Vec::with_capacity(eligible.len() * 3 * m);
    for mut per_genre in eligible.iter().cloned() {
        for ids in per_genre.iter_mut() {
            ids.sort_unstable();
            let mut picks = rand::seq::index::sample(&mut rng, ids.len(), m).into_vec();
            picks.sort_unstable();
            chosen.extend(picks.into_iter().map(|i| ids[i]));
        }
    }
    let rows = UnitRows::from_rows(
        audio.dim(),
        chosen
            .iter()
            .map(|&id| audio.get(id).map(|v| (id, v)).ok_or_else(|| EvalError::MissingEmbedding(id.to_owned())))
            .collect::<Result<Vec<_>>>()?,
    )?;

    let n_speakers = eligible.len();
    let row = |s: usize, g: usize, a: usize| (s * 3 + g) * m + a;
    let cells: Vec<(usize, usize)> = (0..3).flat_map(|e| (0..3).map(move |t| (e, t))).collect();
    let eers = par::try_map(&cells, |&(ge, gt)| {
        let mut targets = Vec::new();
        let mut nontargets = Vec::new();
        for s in 0..n_speakers {
            for s2 in 0..n_speakers {
                if ge == gt && s2 < s {
                    continue;
                }
                for a in 0..m {
                    for b in 0..m {
                        let pair = (row(s, ge, a), row(s2, gt, b));
                        if s == s2 {
                            if ge != gt || a < b {
                                targets.push(pair);
                            }
                        } else {
                            nontargets.push(pair);
                        }
                    }
                }
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        rng.set_stream((ge * 3 + gt + 1) as u64);
        let n_target = (params.pairs_per_cell / 2).min(targets.len());
        let n_nontarget = (params.pairs_per_cell - params.pairs_per_cell / 2).min(nontargets.len());
        let mut scored = Vec::with_capacity(n_target + n_nontarget);
        for (pool, n, is_target) in [(&targets, n_target, true), (&nontargets, n_nontarget, false)] {
            for k in rand::seq::index::sample(&mut rng, pool.len(), n) {
                let (i, j) = pool[k];
                scored.push((rows.cosine(i, j), is_target));
            }
        }
        compute_eer(&scored).map(|r| r.eer)
    })?;

    let mut matrix: BTreeMap<Genre, BTreeMap<Genre, f64>> = BTreeMap::new();
    for (&(ge, gt), eer) in cells.iter().zip(eers) {
        matrix.entry(Genre::ALL[ge]).or_default().insert(Genre::ALL[gt], eer);
    }
    Ok(GenreMatrix { cells: matrix })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{self, GenreShiftSpec};

    #[test]
    fn reproducible_and_json_keyed_by_genre() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (utts, table) = synth::genre_shift_pool(&GenreShiftSpec { speakers: 6, utts_per_genre: 4, ..Default::default() }, &mut rng);
        let params = MatrixParams { utts_per_genre: 3, pairs_per_cell: 100, seed: 5 };
        let a = genre_eer_matrix(&utts, &table, &params).unwrap();
        assert_eq!(a, genre_eer_matrix(&utts, &table, &params).unwrap());
        let json: serde_json::Value = serde_json::to_value(&a).unwrap();
        for g in ["spontaneous", "reading", "singing"] {
            assert_eq!(json[g].as_object().unwrap().len(), 3);
        }
    }

    #[test]
    fn genre_irrelevant_cells_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let spec = GenreShiftSpec { speakers: 40, utts_per_genre: 6, singing_shift: 0.0, singing_spread: 0.9, ..Default::default() };
        let (utts, table) = synth::genre_shift_pool(&spec, &mut rng);
        let m = genre_eer_matrix(&utts, &table, &MatrixParams { utts_per_genre: 6, pairs_per_cell: 4000, seed: 1 }).unwrap();
        let values: Vec<f64> = m.cells.values().flat_map(|r| r.values().copied()).collect();
        let (lo, hi) = values.iter().fold((1.0f64, 0.0f64), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        assert!(hi - lo <= 0.05, "{values:?}");
    }

    #[test]
    fn coverage_is_checked() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (utts, table) = synth::genre_shift_pool(&GenreShiftSpec { speakers: 3, utts_per_genre: 2, ..Default::default() }, &mut rng);
        let params = MatrixParams { utts_per_genre: 3, pairs_per_cell: 10, seed: 0 };
        assert!(matches!(genre_eer_matrix(&utts, &table, &params), Err(EvalError::InsufficientGenreCoverage(_))));
    }
}
