//! Similarity threshold below which reconstructions stop being identifiable.
//!
//! Given attack outcomes scored by feature similarity together with whether
//! an identification attempt on the reconstruction succeeded, the search
//! finds the highest similarity level whose cohort (every outcome at or below
//! it) is still identified no better than chance.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ThresholdSearch {
    /// Highest qualifying similarity level; the minimum observed score when
    /// nothing qualifies.
    pub t_fsim: f64,
    /// False when even the lowest-similarity cohort is identified above
    /// chance (nothing is safe) or no cohort is non-empty.
    pub qualified: bool,
    /// Outcomes in the qualifying cohort.
    pub cohort: usize,
}

/// `outcomes` pairs each attack's similarity score in [0, 1] with whether
/// the reconstruction was identified correctly. Candidate thresholds are the
/// upper edges of `bins` equal similarity bins, scanned from the top; the
/// first whose cohort identification rate is strictly below `1 / n_class`
/// wins.
pub fn find_t_fsim(outcomes: &[(f64, bool)], n_class: usize, bins: usize) -> Result<ThresholdSearch> {
    if n_class < 2 {
        return Err(Error::InvalidArgument(format!(
            "chance level needs at least 2 classes, got {n_class}"
        )));
    }
    if bins == 0 {
        return Err(Error::InvalidArgument("threshold search needs at least 1 bin".into()));
    }
    if outcomes.is_empty() {
        return Err(Error::InvalidArgument("threshold search over no outcomes".into()));
    }
    for &(score, _) in outcomes {
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::InvalidArgument(format!(
                "similarity score {score} outside [0, 1]"
            )));
        }
    }
    let chance = 1.0 / n_class as f64;
    for j in (1..=bins).rev() {
        let edge = j as f64 / bins as f64;
        let cohort: Vec<bool> = outcomes
            .iter()
            .filter(|(score, _)| *score <= edge)
            .map(|&(_, hit)| hit)
            .collect();
        if cohort.is_empty() {
            continue;
        }
        let rate = cohort.iter().filter(|&&h| h).count() as f64 / cohort.len() as f64;
        if rate < chance {
            return Ok(ThresholdSearch { t_fsim: edge, qualified: true, cohort: cohort.len() });
        }
    }
    let floor = outcomes.iter().map(|&(s, _)| s).fold(f64::INFINITY, f64::min);
    Ok(ThresholdSearch { t_fsim: floor, qualified: false, cohort: 0 })
}
