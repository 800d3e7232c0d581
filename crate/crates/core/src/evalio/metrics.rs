//! Image- and pixel-level ROC-AUC and PR-AUC.

use std::cmp::Ordering;
use std::fmt;

use crate::error::{Error, Result};
use crate::numerics::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Level {
    Image,
    Pixel,
}

/// Scores with binary ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredSet {
    pub scores: Vec<f64>,
    pub labels: Vec<bool>,
    pub level: Level,
}

impl ScoredSet {
    pub fn new<T: Scalar>(scores: &[T], labels: &[bool], level: Level) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::Metric(format!(
                "{} scores for {} labels",
                scores.len(),
                labels.len()
            )));
        }
        let scores: Vec<f64> = scores.iter().map(|s| s.to_f64_lossy()).collect();
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("metric scores".into()));
        }
        Ok(Self {
            scores,
            labels: labels.to_vec(),
            level,
        })
    }

    fn counts(&self) -> (usize, usize) {
        let pos = self.labels.iter().filter(|&&l| l).count();
        (pos, self.labels.len() - pos)
    }

    /// Indices ordered by descending score.
    fn descending(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.scores.len()).collect();
        idx.sort_by(|&a, &b| self.scores[b].partial_cmp(&self.scores[a]).unwrap_or(Ordering::Equal));
        idx
    }
}

/// Mann-Whitney AUC: the probability that a random positive outscores a
/// random negative, ties counting one half.
pub fn roc_auc(s: &ScoredSet) -> Result<f64> {
    let (pos, neg) = s.counts();
    if pos == 0 || neg == 0 {
        return Err(Error::Metric(format!(
            "ROC-AUC needs both classes ({pos} positive, {neg} negative)"
        )));
    }
    let mut idx: Vec<usize> = (0..s.scores.len()).collect();
    idx.sort_by(|&a, &b| s.scores[a].partial_cmp(&s.scores[b]).unwrap_or(Ordering::Equal));
    // sum of positive ranks, doubled so tied average ranks stay integral
    let mut twice_rank_sum: u128 = 0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && s.scores[idx[j + 1]] == s.scores[idx[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share the average (i + j + 2) / 2
        let twice_avg = (i + j + 2) as u128;
        let group_pos = idx[i..=j].iter().filter(|&&k| s.labels[k]).count() as u128;
        twice_rank_sum += twice_avg * group_pos;
        i = j + 1;
    }
    let p = pos as u128;
    let twice_u = twice_rank_sum - p * (p + 1);
    Ok(twice_u as f64 / 2.0 / (pos as f64 * neg as f64))
}

/// Average precision: `sum_k (R_k - R_{k-1}) P_k` over descending score
/// thresholds, tied scores forming one threshold.
pub fn pr_auc(s: &ScoredSet) -> Result<f64> {
    let (pos, _) = s.counts();
    if pos == 0 {
        return Err(Error::Metric("PR-AUC needs at least one positive".into()));
    }
    let idx = s.descending();
    let (mut tp, mut seen, mut ap) = (0usize, 0usize, 0.0);
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && s.scores[idx[j + 1]] == s.scores[idx[i]] {
            j += 1;
        }
        let group_tp = idx[i..=j].iter().filter(|&&k| s.labels[k]).count();
        tp += group_tp;
        seen += j - i + 1;
        if group_tp > 0 {
            ap += (group_tp as f64 / pos as f64) * (tp as f64 / seen as f64);
        }
        i = j + 1;
    }
    Ok(ap)
}

/// The four reported indicators.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub p_roc: f64,
    pub i_roc: f64,
    pub p_pr: f64,
    pub i_pr: f64,
}

impl Metrics {
    pub const HEADER: [&'static str; 4] = ["P-ROC", "I-ROC", "P-PR", "I-PR"];

    pub fn values(&self) -> [f64; 4] {
        [self.p_roc, self.i_roc, self.p_pr, self.i_pr]
    }
}

impl fmt::Display for Metrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let v = self.values();
        write!(
            f,
            "P-ROC {:.4}  I-ROC {:.4}  P-PR {:.4}  I-PR {:.4}",
            v[0], v[1], v[2], v[3]
        )
    }
}

/// Image metrics from per-image scores, pixel metrics from pooled maps.
pub fn evaluate<T: Scalar>(
    image_scores: &[T],
    image_labels: &[bool],
    pixel_scores: &[T],
    pixel_labels: &[bool],
) -> Result<Metrics> {
    let img = ScoredSet::new(image_scores, image_labels, Level::Image)?;
    let pix = ScoredSet::new(pixel_scores, pixel_labels, Level::Pixel)?;
    Ok(Metrics {
        p_roc: roc_auc(&pix)?,
        i_roc: roc_auc(&img)?,
        p_pr: pr_auc(&pix)?,
        i_pr: pr_auc(&img)?,
    })
}
