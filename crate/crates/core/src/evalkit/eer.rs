//! Equal error rate with linear interpolation between adjacent ROC points.
//!
//! Operating points are taken at every distinct score plus `+inf`. At a
//! threshold `t` the false-accept rate is the share of nontargets scoring
//! `>= t` and the false-reject rate the share of targets scoring `< t`. The
//! crossing is located with integer arithmetic so the result depends only on
//! the ranks of the scores, never on float round-off.

use serde::{Deserialize, Serialize};

use super::{EvalError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EerResult {
    /// Fraction in `[0, 1]`; above 0.5 only for scores that rank nontargets higher.
    pub eer: f64,
    /// Score at which the interpolated FAR and FRR meet.
    pub threshold: f64,
}

impl EerResult {
    pub fn percent(&self) -> f64 {
        self.eer * 100.0
    }
}

/// `scores` pairs a score with `true` for a target trial.
pub fn compute_eer(scores: &[(f64, bool)]) -> Result<EerResult> {
    if let Some((s, _)) = scores.iter().find(|(s, _)| s.is_nan()) {
        return Err(EvalError::InvalidParams(format!("score {s} is not a number")));
    }
    let n_target = scores.iter().filter(|(_, t)| *t).count();
    let n_nontarget = scores.len() - n_target;
    if n_target == 0 || n_nontarget == 0 {
        return Err(EvalError::DegenerateLabels);
    }

    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));

    // (threshold, targets below it, nontargets at or above it)
    let mut points: Vec<(f64, i128, i128)> = Vec::new();
    let (mut targets_below, mut seen_nontargets) = (0i128, 0i128);
    let mut i = 0;
    while i < sorted.len() {
        let t = sorted[i].0;
        points.push((t, targets_below, n_nontarget as i128 - seen_nontargets));
        while i < sorted.len() && sorted[i].0 == t {
            if sorted[i].1 {
                targets_below += 1;
            } else {
                seen_nontargets += 1;
            }
            i += 1;
        }
    }
    points.push((f64::INFINITY, n_target as i128, 0));

    let (t_count, n_count) = (n_target as i128, n_nontarget as i128);
    // FAR - FRR scaled by both class sizes; non-increasing along the sweep.
    let gap = |&(_, a, b): &(f64, i128, i128)| b * t_count - a * n_count;
    let k = (0..points.len() - 1)
        .find(|&k| gap(&points[k]) >= 0 && gap(&points[k + 1]) <= 0)
        .expect("gap runs from positive to negative");
    let (lo, hi) = (points[k], points[k + 1]);
    let (d_lo, d_hi) = (gap(&lo), gap(&hi));

    let (eer, alpha) = if d_lo == d_hi {
        (lo.1 as f64 / t_count as f64, 0.0)
    } else {
        let span = d_lo - d_hi;
        let num = lo.1 * span + d_lo * (hi.1 - lo.1);
        (num as f64 / (t_count * span) as f64, d_lo as f64 / span as f64)
    };
    let threshold = if hi.0.is_finite() { lo.0 + alpha * (hi.0 - lo.0) } else { lo.0 };
    Ok(EerResult { eer, threshold })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn labelled(targets: &[f64], nontargets: &[f64]) -> Vec<(f64, bool)> {
        targets.iter().map(|&s| (s, true)).chain(nontargets.iter().map(|&s| (s, false))).collect()
    }

    #[test]
    fn separable_is_zero() {
        let r = compute_eer(&labelled(&[0.9, 0.8], &[0.2, 0.1])).unwrap();
        assert_eq!(r.eer, 0.0);
        assert!(r.threshold > 0.2 && r.threshold <= 0.8);
    }

    #[test]
    fn reversed_is_one() {
        assert_eq!(compute_eer(&labelled(&[0.1], &[0.9])).unwrap().eer, 1.0);
    }

    #[test]
    fn interleaved_four_scores() {
        // Operating points (FAR, FRR): (1,0) (.5,0) (.5,.5) (0,.5) (0,1); the crossing is (.5,.5).
        let r = compute_eer(&labelled(&[0.8, 0.4], &[0.6, 0.2])).unwrap();
        assert_eq!(r.eer, 0.5);
        assert_eq!(r.threshold, 0.6);
    }

    #[test]
    fn interpolates_between_points() {
        // FAR stays at 1/3 while FRR jumps from 0 to 1/2 between t=0.5 and t=0.7.
        let r = compute_eer(&labelled(&[0.5, 0.9], &[0.1, 0.3, 0.7])).unwrap();
        assert_eq!(r.eer, 1.0 / 3.0);
        assert!((r.threshold - (0.5 + 0.2 * 2.0 / 3.0)).abs() < 1e-12);
    }

    fn same_distribution_eer(seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = Normal::new(0.0, 1.0).unwrap();
        let t: Vec<f64> = (0..1000).map(|_| d.sample(&mut rng)).collect();
        let n: Vec<f64> = (0..1000).map(|_| d.sample(&mut rng)).collect();
        compute_eer(&labelled(&t, &n)).unwrap().eer
    }

    #[test]
    fn same_distribution_is_near_half() {
        let eers: Vec<f64> = (0..20).map(same_distribution_eer).collect();
        let mean = eers.iter().sum::<f64>() / eers.len() as f64;
        assert!((mean - 0.5).abs() <= 0.01, "{eers:?}");
    }

    #[test]
    fn degenerate_and_nan() {
        assert!(matches!(compute_eer(&labelled(&[0.3], &[])), Err(EvalError::DegenerateLabels)));
        assert!(matches!(compute_eer(&labelled(&[], &[0.3])), Err(EvalError::DegenerateLabels)));
        assert!(matches!(compute_eer(&labelled(&[f64::NAN], &[0.3])), Err(EvalError::InvalidParams(_))));
    }

    #[test]
    fn all_tied_is_half() {
        assert_eq!(compute_eer(&labelled(&[0.5, 0.5], &[0.5])).unwrap().eer, 0.5);
    }
}
