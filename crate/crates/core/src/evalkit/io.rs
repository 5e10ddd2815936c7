//! Text formats for trial lists and score files.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::trials::{ScoredTrial, TrialPair};
use super::{EvalError, Result};

/// One line of a trials file: `label enrol test`, label 1 for target.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrialLine {
    pub target: bool,
    pub enrol: String,
    pub test: String,
}

/// One line of a scores file: `enrol test score`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreLine {
    pub enrol: String,
    pub test: String,
    pub score: f64,
}

pub fn format_trials(trials: &[TrialPair]) -> String {
    trials
        .iter()
        .map(|t| format!("{} {} {}\n", u8::from(t.label.is_target()), t.enrol_utt, t.test_utt))
        .collect()
}

pub fn write_trials(path: &Path, trials: &[TrialPair]) -> Result<()> {
    std::fs::write(path, format_trials(trials))?;
    Ok(())
}

pub fn write_scores(path: &Path, scored: &[ScoredTrial]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for s in scored {
        writeln!(w, "{} {} {}", s.pair.enrol_utt, s.pair.test_utt, s.score)?;
    }
    w.flush()?;
    Ok(())
}

fn read_lines<T>(path: &Path, mut parse: impl FnMut(&[&str]) -> std::result::Result<T, String>) -> Result<Vec<T>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        out.push(parse(&fields).map_err(|reason| EvalError::Parse {
            path: path.display().to_string(),
            line: n + 1,
            reason,
        })?);
    }
    Ok(out)
}

pub fn read_trials(path: &Path) -> Result<Vec<TrialLine>> {
    read_lines(path, |f| match f {
        [label, enrol, test] => {
            let target = match *label {
                "1" => true,
                "0" => false,
                other => return Err(format!("label must be 0 or 1, got {other:?}")),
            };
            Ok(TrialLine { target, enrol: enrol.to_string(), test: test.to_string() })
        }
        _ => Err(format!("expected 3 fields, got {}", f.len())),
    })
}

pub fn read_scores(path: &Path) -> Result<Vec<ScoreLine>> {
    read_lines(path, |f| match f {
        [enrol, test, score] => {
            let score: f64 = score.parse().map_err(|e| format!("bad score {score:?}: {e}"))?;
            if score.is_nan() {
                return Err("score is NaN".into());
            }
            Ok(ScoreLine { enrol: enrol.to_string(), test: test.to_string(), score })
        }
        _ => Err(format!("expected 3 fields, got {}", f.len())),
    })
}

/// Attaches a score to every trial; pairs match in either order.
pub fn join_scores(trials: &[TrialLine], scores: &[ScoreLine]) -> Result<Vec<(f64, bool)>> {
    let mut by_pair: HashMap<(&str, &str), f64> = HashMap::with_capacity(scores.len());
    for s in scores {
        by_pair.insert((&s.enrol, &s.test), s.score);
    }
    trials
        .iter()
        .map(|t| {
            by_pair
                .get(&(t.enrol.as_str(), t.test.as_str()))
                .or_else(|| by_pair.get(&(t.test.as_str(), t.enrol.as_str())))
                .map(|&s| (s, t.target))
                .ok_or_else(|| EvalError::MissingScore { enrol: t.enrol.clone(), test: t.test.clone() })
        })
        .collect()
}
