//! Trial list generation and cosine scoring.
//!
//! Pools are ordered by speaker, then genre, then utterance id. In that order
//! the same-speaker partners of an utterance, its cross-genre partners and
//! its cross-speaker partners each form one contiguous run, so every pair
//! family can be indexed densely and sampled without replacement.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{EvalError, Result};
use crate::embedding::{self, EmbeddingTable, UnitRows};
use crate::manifest::UtteranceRecord;
use crate::par;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Target,
    Nontarget,
}

impl Label {
    pub fn is_target(self) -> bool {
        self == Label::Target
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialTag {
    Easy,
    CrossGenrePos,
    HardNeg,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TrialPair {
    pub enrol_utt: String,
    pub test_utt: String,
    pub label: Label,
    pub tag: TrialTag,
}

impl TrialPair {
    /// The pair as an unordered key.
    pub fn key(&self) -> (&str, &str) {
        if self.enrol_utt <= self.test_utt {
            (&self.enrol_utt, &self.test_utt)
        } else {
            (&self.test_utt, &self.enrol_utt)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HardTrialParams {
    pub n_pairs: usize,
    /// Minimum share of target pairs whose two utterances differ in genre.
    pub cross_genre_frac: f64,
    /// Hard negatives score at or above this percentile of all cross-speaker similarities.
    pub hard_neg_percentile: f64,
    pub seed: u64,
    /// Above this many cross-speaker pairs the percentile is estimated from a sample.
    pub exact_pair_limit: usize,
}

impl Default for HardTrialParams {
    fn default() -> Self {
        Self { n_pairs: 2000, cross_genre_frac: 0.2, hard_neg_percentile: 0.95, seed: 0, exact_pair_limit: 5_000_000 }
    }
}

impl HardTrialParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("cross_genre_frac", self.cross_genre_frac), ("hard_neg_percentile", self.hard_neg_percentile)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(EvalError::InvalidParams(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        Ok(())
    }
}

const PERCENTILE_SAMPLE: usize = 200_000;

/// Test pool ordered by (speaker, genre, utt_id) with run boundaries.
struct Pool<'a> {
    utts: Vec<&'a UtteranceRecord>,
    speaker_end: Vec<usize>,
    genre_end: Vec<usize>,
    n_speakers: usize,
}

impl<'a> Pool<'a> {
    fn new(utts: &'a [UtteranceRecord], need_genre: bool) -> Result<Self> {
        for u in utts {
            if u.speaker_id.is_none() {
                return Err(EvalError::MissingSpeaker(u.utt_id.clone()));
            }
            if need_genre && u.genre.is_none() {
                return Err(EvalError::MissingGenre(u.utt_id.clone()));
            }
        }
        let mut sorted: Vec<&UtteranceRecord> = utts.iter().collect();
        sorted.sort_by(|a, b| (&a.speaker_id, a.genre, &a.utt_id).cmp(&(&b.speaker_id, b.genre, &b.utt_id)));
        if let Some(w) = sorted.windows(2).find(|w| w[0].utt_id == w[1].utt_id) {
            return Err(EvalError::InvalidParams(format!("utterance {:?} appears twice in the pool", w[0].utt_id)));
        }
        let n = sorted.len();
        let mut speaker_end = vec![n; n];
        let mut genre_end = vec![n; n];
        let mut n_speakers = usize::from(n > 0);
        for i in (0..n.saturating_sub(1)).rev() {
            let (a, b) = (sorted[i], sorted[i + 1]);
            if a.speaker_id != b.speaker_id {
                speaker_end[i] = i + 1;
                genre_end[i] = i + 1;
                n_speakers += 1;
            } else {
                speaker_end[i] = speaker_end[i + 1];
                genre_end[i] = if a.genre != b.genre { i + 1 } else { genre_end[i + 1] };
            }
        }
        Ok(Self { utts: sorted, speaker_end, genre_end, n_speakers })
    }

    fn len(&self) -> usize {
        self.utts.len()
    }

    fn targets(&self) -> PairSpace {
        PairSpace::new(self.len(), |i| (i + 1, self.speaker_end[i] - i - 1))
    }

    fn cross_genre_targets(&self) -> PairSpace {
        PairSpace::new(self.len(), |i| (self.genre_end[i], self.speaker_end[i] - self.genre_end[i]))
    }

    fn nontargets(&self) -> PairSpace {
        PairSpace::new(self.len(), |i| (self.speaker_end[i], self.len() - self.speaker_end[i]))
    }

    fn rows(&self, audio: &EmbeddingTable) -> Result<UnitRows> {
        let rows = self
            .utts
            .iter()
            .map(|u| {
                audio.get(&u.utt_id).map(|v| (u.utt_id.as_str(), v)).ok_or_else(|| EvalError::MissingEmbedding(u.utt_id.clone()))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(UnitRows::from_rows(audio.dim(), rows)?)
    }

    fn pair(&self, (i, j): (usize, usize), label: Label, tag: TrialTag) -> TrialPair {
        let (a, b) = (&self.utts[i].utt_id, &self.utts[j].utt_id);
        let (enrol, test) = if a <= b { (a, b) } else { (b, a) };
        TrialPair { enrol_utt: enrol.clone(), test_utt: test.clone(), label, tag }
    }
}

/// Dense index over pairs `(i, j)` where each `i` owns the partner run `first[i]..first[i] + count`.
struct PairSpace {
    offsets: Vec<usize>,
    first: Vec<usize>,
}

impl PairSpace {
    fn new(n: usize, run: impl Fn(usize) -> (usize, usize)) -> Self {
        let mut offsets = Vec::with_capacity(n + 1);
        let mut first = Vec::with_capacity(n);
        let mut total = 0;
        for i in 0..n {
            let (f, c) = run(i);
            offsets.push(total);
            first.push(f);
            total += c;
        }
        offsets.push(total);
        Self { offsets, first }
    }

    fn total(&self) -> usize {
        *self.offsets.last().expect("offsets never empty")
    }

    fn decode(&self, k: usize) -> (usize, usize) {
        let i = self.offsets.partition_point(|&o| o <= k) - 1;
        (i, self.first[i] + (k - self.offsets[i]))
    }

    fn sample(&self, amount: usize, rng: &mut impl Rng, what: &str) -> Result<Vec<usize>> {
        let total = self.total();
        if amount > total {
            return Err(EvalError::InsufficientUtterances(format!("{amount} {what} pairs requested, {total} available")));
        }
        Ok(rand::seq::index::sample(rng, total, amount).into_vec())
    }

    /// Uniform sample of `amount` indices outside `taken`.
    fn sample_excluding(&self, amount: usize, taken: &HashSet<usize>, rng: &mut impl Rng, what: &str) -> Result<Vec<usize>> {
        let free = self.total() - taken.len();
        if amount > free {
            return Err(EvalError::InsufficientUtterances(format!("{amount} more {what} pairs requested, {free} available")));
        }
        let draw = (amount + taken.len()).min(self.total());
        let pool: Vec<usize> = self.sample(draw, rng, what)?.into_iter().filter(|k| !taken.contains(k)).collect();
        Ok(rand::seq::index::sample(rng, pool.len(), amount).into_iter().map(|i| pool[i]).collect())
    }
}

fn split_counts(n_pairs: usize) -> (usize, usize) {
    let n_target = n_pairs / 2;
    (n_target, n_pairs - n_target)
}

/// Uniformly sampled target and nontarget pairs, half each (nontargets take the odd one).
pub fn generate_easy_trials(utts: &[UtteranceRecord], n_pairs: usize, seed: u64) -> Result<Vec<TrialPair>> {
    let pool = Pool::new(utts, false)?;
    if pool.n_speakers < 2 {
        return Err(EvalError::InsufficientUtterances("the pool needs at least two speakers".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n_target, n_nontarget) = split_counts(n_pairs);
    let (targets, nontargets) = (pool.targets(), pool.nontargets());
    let mut trials: Vec<TrialPair> = targets
        .sample(n_target, &mut rng, "target")?
        .into_iter()
        .map(|k| pool.pair(targets.decode(k), Label::Target, TrialTag::Easy))
        .collect();
    trials.extend(
        nontargets
            .sample(n_nontarget, &mut rng, "nontarget")?
            .into_iter()
            .map(|k| pool.pair(nontargets.decode(k), Label::Nontarget, TrialTag::Easy)),
    );
    trials.shuffle(&mut rng);
    Ok(trials)
}

/// Value at rank `floor(p * (m - 1))` of the ascending sort.
fn percentile(mut values: Vec<f64>, p: f64) -> f64 {
    let rank = (p * (values.len() - 1) as f64).floor() as usize;
    let (_, v, _) = values.select_nth_unstable_by(rank, f64::total_cmp);
    *v
}

/// Nontarget indices scoring at or above the percentile threshold, and the threshold.
fn hard_negative_indices(
    pool: &Pool,
    rows: &UnitRows,
    space: &PairSpace,
    params: &HardTrialParams,
    wanted: usize,
    rng: &mut impl Rng,
) -> Vec<usize> {
    let total = space.total();
    let sim = |k: usize| {
        let (i, j) = space.decode(k);
        rows.cosine(i, j)
    };
    if total <= params.exact_pair_limit {
        // Row-major order matches the index order of `space`.
        let per_row: Vec<Vec<f64>> = par::map_range(pool.len(), |i| {
            let first = pool.speaker_end[i];
            (first..pool.len()).map(|j| rows.cosine(i, j)).collect()
        });
        let sims: Vec<f64> = per_row.into_iter().flatten().collect();
        let threshold = percentile(sims.clone(), params.hard_neg_percentile);
        let eligible: Vec<usize> = (0..total).filter(|&k| sims[k] >= threshold).collect();
        let take = wanted.min(eligible.len());
        return rand::seq::index::sample(rng, eligible.len(), take).into_iter().map(|i| eligible[i]).collect();
    }

    let probe = rand::seq::index::sample(rng, total, PERCENTILE_SAMPLE.min(total)).into_vec();
    let threshold = percentile(par::map(&probe, |&k| sim(k)), params.hard_neg_percentile);
    let mut chosen = Vec::new();
    let mut seen = HashSet::new();
    let budget = wanted.saturating_mul(400).max(PERCENTILE_SAMPLE);
    for _ in 0..budget {
        if chosen.len() == wanted {
            break;
        }
        let k = rng.random_range(0..total);
        if seen.insert(k) && sim(k) >= threshold {
            chosen.push(k);
        }
    }
    chosen
}

/// Balanced trials with injected cross-genre targets and high-similarity nontargets.
pub fn generate_hard_trials(
    utts: &[UtteranceRecord],
    audio: &EmbeddingTable,
    params: &HardTrialParams,
) -> Result<Vec<TrialPair>> {
    params.validate()?;
    let pool = Pool::new(utts, true)?;
    let cross = pool.cross_genre_targets();
    if cross.total() == 0 {
        return Err(EvalError::NoCrossGenreSpeakers);
    }
    let rows = pool.rows(audio)?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let (n_target, n_nontarget) = split_counts(params.n_pairs);
    let n_cross = ((params.cross_genre_frac * n_target as f64).ceil() as usize).min(n_target);

    let mut trials = Vec::with_capacity(params.n_pairs);
    let targets = pool.targets();
    let mut taken = HashSet::new();
    for k in cross.sample(n_cross, &mut rng, "cross-genre target")? {
        let (i, j) = cross.decode(k);
        // Translate to the index of the same pair in the all-targets space.
        taken.insert(targets.offsets[i] + (j - targets.first[i]));
        trials.push(pool.pair((i, j), Label::Target, TrialTag::CrossGenrePos));
    }
    for k in targets.sample_excluding(n_target - n_cross, &taken, &mut rng, "target")? {
        trials.push(pool.pair(targets.decode(k), Label::Target, TrialTag::Easy));
    }

    let nontargets = pool.nontargets();
    if nontargets.total() == 0 {
        return Err(EvalError::InsufficientUtterances("the pool needs at least two speakers".into()));
    }
    let hard = hard_negative_indices(&pool, &rows, &nontargets, params, n_nontarget, &mut rng);
    let hard_set: HashSet<usize> = hard.iter().copied().collect();
    for &k in &hard {
        trials.push(pool.pair(nontargets.decode(k), Label::Nontarget, TrialTag::HardNeg));
    }
    for k in nontargets.sample_excluding(n_nontarget - hard.len(), &hard_set, &mut rng, "nontarget")? {
        trials.push(pool.pair(nontargets.decode(k), Label::Nontarget, TrialTag::Easy));
    }
    trials.shuffle(&mut rng);
    Ok(trials)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredTrial {
    pub pair: TrialPair,
    pub score: f64,
}

/// Cosine similarity of the raw embeddings of each pair.
pub fn score_trials(trials: &[TrialPair], audio: &EmbeddingTable) -> Result<Vec<ScoredTrial>> {
    let lookup = |id: &str| audio.get(id).ok_or_else(|| EvalError::MissingEmbedding(id.to_owned()));
    par::try_map(trials, |t| {
        let score = embedding::cosine_similarity(lookup(&t.enrol_utt)?, lookup(&t.test_utt)?)?;
        Ok(ScoredTrial { pair: t.clone(), score })
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::Modality;
    use crate::genre::Genre;
    use std::collections::{BTreeMap, BTreeSet};

    fn utt(speaker: usize, i: usize, genre: Option<Genre>) -> UtteranceRecord {
        UtteranceRecord {
            utt_id: format!("v{speaker:02}/{i:03}"),
            video_id: format!("v{speaker:02}"),
            playlist_id: "p".into(),
            start_s: 0.0,
            end_s: 2.0,
            duration_s: 2.0,
            sample_rate_hz: 16000,
            speaker_id: Some(format!("spk{speaker:05}")),
            genre,
            genre_conf: genre.map(|_| 1.0),
        }
    }

    fn check_labels(utts: &[UtteranceRecord], trials: &[TrialPair]) {
        let spk: BTreeMap<&str, &str> =
            utts.iter().map(|u| (u.utt_id.as_str(), u.speaker_id.as_deref().unwrap())).collect();
        let mut keys = BTreeSet::new();
        for t in trials {
            assert_ne!(t.enrol_utt, t.test_utt);
            assert_eq!(t.label.is_target(), spk[t.enrol_utt.as_str()] == spk[t.test_utt.as_str()], "{t:?}");
            assert!(keys.insert(t.key()), "duplicate {t:?}");
        }
    }

    #[test]
    fn pair_space_enumerates_each_family_once() {
        let utts: Vec<_> = (0..4)
            .flat_map(|s| (0..5).map(move |i| utt(s, i, Some(Genre::ALL[(i + s) % 3]))))
            .collect();
        let pool = Pool::new(&utts, true).unwrap();
        let n = utts.len();
        let mut brute = (0, 0, 0);
        for i in 0..n {
            for j in i + 1..n {
                let (a, b) = (pool.utts[i], pool.utts[j]);
                if a.speaker_id == b.speaker_id {
                    brute.0 += 1;
                    if a.genre != b.genre {
                        brute.1 += 1;
                    }
                } else {
                    brute.2 += 1;
                }
            }
        }
        assert_eq!((pool.targets().total(), pool.cross_genre_targets().total(), pool.nontargets().total()), brute);
        let space = pool.cross_genre_targets();
        let decoded: BTreeSet<_> = (0..space.total()).map(|k| space.decode(k)).collect();
        assert_eq!(decoded.len(), space.total());
        for (i, j) in decoded {
            assert!(i < j);
            assert_eq!(pool.utts[i].speaker_id, pool.utts[j].speaker_id);
            assert_ne!(pool.utts[i].genre, pool.utts[j].genre);
        }
    }

    #[test]
    fn easy_two_speakers_ten_each() {
        let utts: Vec<_> = (0..2).flat_map(|s| (0..10).map(move |i| utt(s, i, None))).collect();
        let trials = generate_easy_trials(&utts, 20, 4).unwrap();
        assert_eq!(trials.len(), 20);
        assert_eq!(trials.iter().filter(|t| t.label.is_target()).count(), 10);
        check_labels(&utts, &trials);
        assert_eq!(trials, generate_easy_trials(&utts, 20, 4).unwrap());
    }

    #[test]
    fn easy_exhausting_pairs_fails() {
        let utts: Vec<_> = (0..2).flat_map(|s| (0..3).map(move |i| utt(s, i, None))).collect();
        // 6 target pairs and 9 nontarget pairs exist
        assert!(generate_easy_trials(&utts, 12, 0).is_ok());
        assert!(matches!(generate_easy_trials(&utts, 14, 0), Err(EvalError::InsufficientUtterances(_))));
        let single: Vec<_> = (0..5).map(|i| utt(0, i, None)).collect();
        assert!(matches!(generate_easy_trials(&single, 2, 0), Err(EvalError::InsufficientUtterances(_))));
    }

    fn genre_pool(speakers: usize, per_genre: usize, dim: usize, seed: u64) -> (Vec<UtteranceRecord>, EmbeddingTable) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut table = EmbeddingTable::new(dim, Modality::Audio);
        let mut utts = Vec::new();
        for s in 0..speakers {
            let center = crate::synth::unit_gaussian(&mut rng, dim);
            for (g_idx, g) in Genre::ALL.iter().enumerate() {
                for i in 0..per_genre {
                    let u = utt(s, g_idx * per_genre + i, Some(*g));
                    table.insert(u.utt_id.clone(), crate::synth::perturb(&center, 0.8, &mut rng)).unwrap();
                    utts.push(u);
                }
            }
        }
        (utts, table)
    }

    #[test]
    fn hard_trials_meet_cross_genre_share() {
        let (utts, table) = genre_pool(8, 4, 16, 1);
        let params = HardTrialParams { n_pairs: 60, seed: 3, ..Default::default() };
        let trials = generate_hard_trials(&utts, &table, &params).unwrap();
        check_labels(&utts, &trials);
        let n_target = trials.iter().filter(|t| t.label.is_target()).count();
        let cross = trials.iter().filter(|t| t.tag == TrialTag::CrossGenrePos).count();
        assert_eq!(n_target, 30);
        assert!(cross as f64 >= 0.2 * n_target as f64);
        assert_eq!(trials, generate_hard_trials(&utts, &table, &params).unwrap());
    }

    #[test]
    fn planted_imposter_is_a_hard_negative() {
        // Background speakers are mutually orthogonal; one pair of different speakers is nearly identical.
        let dim = 32;
        let mut table = EmbeddingTable::new(dim, Modality::Audio);
        let mut utts = Vec::new();
        for s in 0..10 {
            for (i, g) in [Genre::Reading, Genre::Singing].into_iter().enumerate() {
                let u = utt(s, i, Some(g));
                let mut v = vec![0.0f32; dim];
                v[s] = 1.0;
                v[10 + i] = 0.05;
                table.insert(u.utt_id.clone(), v).unwrap();
                utts.push(u);
            }
        }
        let imposter = utt(10, 0, Some(Genre::Reading));
        let mut v = vec![0.0f32; dim];
        v[3] = 1.0;
        v[11] = 0.3;
        table.insert(imposter.utt_id.clone(), v).unwrap();
        utts.push(imposter.clone());
        let params = HardTrialParams { n_pairs: 8, hard_neg_percentile: 0.995, seed: 9, ..Default::default() };
        let trials = generate_hard_trials(&utts, &table, &params).unwrap();
        let hard: Vec<_> = trials.iter().filter(|t| t.tag == TrialTag::HardNeg).collect();
        assert!(!hard.is_empty());
        assert!(hard.iter().all(|t| t.key().1 == imposter.utt_id || t.key().0 == imposter.utt_id));
    }

    #[test]
    fn single_genre_pool_has_no_cross_genre_speakers() {
        let utts: Vec<_> = (0..3).flat_map(|s| (0..4).map(move |i| utt(s, i, Some(Genre::Reading)))).collect();
        let table = EmbeddingTable::from_entries(2, Modality::Audio, utts.iter().map(|u| (u.utt_id.clone(), vec![1.0, 0.5])))
            .unwrap();
        assert!(matches!(
            generate_hard_trials(&utts, &table, &HardTrialParams { n_pairs: 4, ..Default::default() }),
            Err(EvalError::NoCrossGenreSpeakers)
        ));
    }

    #[test]
    fn sampled_percentile_path_still_selects_high_pairs() {
        let (utts, table) = genre_pool(12, 3, 16, 2);
        let params = HardTrialParams { n_pairs: 40, exact_pair_limit: 10, seed: 1, ..Default::default() };
        let trials = generate_hard_trials(&utts, &table, &params).unwrap();
        check_labels(&utts, &trials);
        assert_eq!(trials.len(), 40);
    }

    #[test]
    fn scoring_is_cosine() {
        let table = EmbeddingTable::from_entries(
            2,
            Modality::Audio,
            [("a", vec![1.0, 0.0]), ("b", vec![2.0, 0.0]), ("c", vec![0.0, 3.0])],
        )
        .unwrap();
        let mk = |a: &str, b: &str| TrialPair { enrol_utt: a.into(), test_utt: b.into(), label: Label::Target, tag: TrialTag::Easy };
        let scored = score_trials(&[mk("a", "b"), mk("a", "c")], &table).unwrap();
        assert_eq!(scored[0].score, 1.0);
        assert_eq!(scored[1].score, 0.0);
        assert!(matches!(score_trials(&[mk("a", "z")], &table), Err(EvalError::MissingEmbedding(_))));
    }
}
