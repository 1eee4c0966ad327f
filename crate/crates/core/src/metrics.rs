//! Ranking metrics for OOD scores (higher means more likely OOD) and
//! classification accuracy.

use std::cmp::Ordering;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoredSample {
    pub score: f64,
    /// `true` for OOD.
    pub label: bool,
}

impl ScoredSample {
    pub fn new(score: f64, label: bool) -> Self {
        ScoredSample { score, label }
    }
}

fn counts(samples: &[ScoredSample]) -> Result<(usize, usize)> {
    if let Some(s) = samples.iter().find(|s| !s.score.is_finite()) {
        return Err(Error::invalid(format!("non-finite score {}", s.score)));
    }
    let pos = samples.iter().filter(|s| s.label).count();
    Ok((pos, samples.len() - pos))
}

fn both_classes(samples: &[ScoredSample]) -> Result<(usize, usize)> {
    let (pos, neg) = counts(samples)?;
    if pos == 0 || neg == 0 {
        return Err(Error::invalid(format!("need both classes, got {pos} positive and {neg} negative")));
    }
    Ok((pos, neg))
}

/// Samples sorted by descending score, split into groups of equal score.
fn tie_groups(samples: &[ScoredSample]) -> Vec<(usize, usize)> {
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap_or(Ordering::Equal));
    let mut groups: Vec<(usize, usize)> = Vec::new();
    let mut last = f64::NAN;
    for s in sorted {
        if s.score != last || groups.is_empty() {
            groups.push((0, 0));
            last = s.score;
        }
        let g = groups.last_mut().expect("pushed");
        if s.label {
            g.0 += 1;
        } else {
            g.1 += 1;
        }
    }
    groups
}

/// Probability that a random positive outscores a random negative, ties
/// counted one half.
pub fn auroc(samples: &[ScoredSample]) -> Result<f64> {
    let (pos, neg) = both_classes(samples)?;
    // walk from the highest score: each positive beats every negative below it
    let mut negatives_above = 0usize;
    let mut wins = 0.0;
    let mut ties = 0.0;
    let mut neg_below = neg;
    for (p, n) in tie_groups(samples) {
        neg_below -= n;
        wins += (p * neg_below) as f64;
        ties += (p * n) as f64;
        negatives_above += n;
    }
    debug_assert_eq!(negatives_above, neg);
    Ok((wins + 0.5 * ties) / (pos as f64 * neg as f64))
}

/// Mean precision at each positive in descending score order; tied groups
/// are ranked together with precision taken after the whole group.
pub fn average_precision(samples: &[ScoredSample]) -> Result<f64> {
    let (pos, _) = counts(samples)?;
    if pos == 0 {
        return Err(Error::invalid("average precision needs at least one positive"));
    }
    let (mut tp, mut seen, mut sum) = (0usize, 0usize, 0.0);
    for (p, n) in tie_groups(samples) {
        tp += p;
        seen += p + n;
        sum += p as f64 * tp as f64 / seen as f64;
    }
    Ok(sum / pos as f64)
}

/// False-positive rate at the largest threshold `t` whose true-positive rate
/// (`score >= t`) reaches `tpr_target`.
pub fn fpr_at_tpr(samples: &[ScoredSample], tpr_target: f64) -> Result<f64> {
    let (pos, neg) = both_classes(samples)?;
    if !(0.0..=1.0).contains(&tpr_target) {
        return Err(Error::invalid(format!("TPR target {tpr_target} outside [0, 1]")));
    }
    let (mut tp, mut fp) = (0usize, 0usize);
    for (p, n) in tie_groups(samples) {
        tp += p;
        fp += n;
        if tp as f64 / pos as f64 >= tpr_target {
            return Ok(fp as f64 / neg as f64);
        }
    }
    Ok(fp as f64 / neg as f64)
}

/// FPR at 95% TPR.
pub fn fpr95(samples: &[ScoredSample]) -> Result<f64> {
    fpr_at_tpr(samples, 0.95)
}

pub fn accuracy<T: PartialEq>(predictions: &[T], labels: &[T]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::invalid("accuracy of an empty sequence"));
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Parses a `score,label` CSV with labels `0`/`1`.
pub fn read_scores_csv(text: &str) -> Result<Vec<ScoredSample>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    match lines.next().map(str::trim) {
        Some("score,label") => {}
        other => return Err(Error::Format(format!("expected header `score,label`, found {other:?}"))),
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let (s, l) = line
                .trim()
                .split_once(',')
                .ok_or_else(|| Error::Format(format!("line {}: expected two fields", i + 2)))?;
            let score: f64 = s
                .trim()
                .parse()
                .map_err(|_| Error::Format(format!("line {}: bad score `{s}`", i + 2)))?;
            let label = match l.trim() {
                "0" => false,
                "1" => true,
                other => return Err(Error::Format(format!("line {}: label `{other}` is not 0 or 1", i + 2))),
            };
            Ok(ScoredSample { score, label })
        })
        .collect()
}

pub fn write_scores_csv(samples: &[ScoredSample]) -> String {
    let mut s = String::from("score,label\n");
    for x in samples {
        s.push_str(&format!("{:e},{}\n", x.score, x.label as u8));
    }
    s
}
