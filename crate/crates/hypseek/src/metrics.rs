//! Screening and ranking metrics: AUROC, BEDROC, enrichment factor, ROC
//! enrichment, Pearson and Spearman correlations.
//!
//! Ranks are defined by a descending-score sort with ties broken by ascending
//! input index; BEDROC and EF are tie-sensitive, so the convention matters
//! and is shared by every metric here.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("scores and labels have different lengths ({scores} vs {labels})")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("metric requires at least one active and one inactive")]
    SingleClass,
    #[error("metric requires at least {0} observations")]
    TooFewObservations(usize),
    #[error("zero variance in {0}")]
    ZeroVariance(&'static str),
    #[error("cutoff percentage must lie in (0, 100], got {0}")]
    InvalidCutoff(f64),
    #[error("non-finite input")]
    NonFinite,
}

/// Scores with binary activity labels and, optionally, per-item affinities.
#[derive(Debug, Clone)]
pub struct LabeledRanking {
    scores: Vec<f64>,
    labels: Vec<bool>,
    affinities: Option<Vec<f64>>,
}

impl LabeledRanking {
    pub fn new(scores: Vec<f64>, labels: Vec<bool>) -> Result<Self, MetricError> {
        if scores.len() != labels.len() {
            return Err(MetricError::LengthMismatch {
                scores: scores.len(),
                labels: labels.len(),
            });
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(MetricError::NonFinite);
        }
        Ok(Self { scores, labels, affinities: None })
    }

    pub fn with_affinities(mut self, affinities: Vec<f64>) -> Result<Self, MetricError> {
        if affinities.len() != self.scores.len() {
            return Err(MetricError::LengthMismatch {
                scores: self.scores.len(),
                labels: affinities.len(),
            });
        }
        self.affinities = Some(affinities);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn labels(&self) -> &[bool] {
        &self.labels
    }

    pub fn affinities(&self) -> Option<&[f64]> {
        self.affinities.as_deref()
    }

    pub fn actives(&self) -> usize {
        self.labels.iter().filter(|&&l| l).count()
    }

    fn require_both_classes(&self) -> Result<(usize, usize), MetricError> {
        let pos = self.actives();
        let neg = self.len() - pos;
        if pos == 0 || neg == 0 {
            return Err(MetricError::SingleClass);
        }
        Ok((pos, neg))
    }

    /// Indices sorted by descending score, ties by ascending index.
    pub fn descending_order(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by(|&a, &b| {
            self.scores[b]
                .partial_cmp(&self.scores[a])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        order
    }

    /// Labels in rank order (best score first).
    pub fn ranked_labels(&self) -> Vec<bool> {
        self.descending_order().into_iter().map(|i| self.labels[i]).collect()
    }
}

/// AUROC as the Mann-Whitney statistic: the probability that a random active
/// outscores a random inactive, with tied pairs counting one half.
pub fn auroc(data: &LabeledRanking) -> Result<f64, MetricError> {
    let (pos, neg) = data.require_both_classes()?;
    // Sort ascending by score; walk up accumulating inactive counts so each
    // active contributes (#inactives below) + 0.5 (#inactives tied).
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.sort_by(|&a, &b| data.scores[a].partial_cmp(&data.scores[b]).unwrap());
    let mut wins = 0.0f64;
    let mut inactives_below = 0usize;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && data.scores[order[j]] == data.scores[order[i]] {
            j += 1;
        }
        let tied = &order[i..j];
        let tied_inactives = tied.iter().filter(|&&k| !data.labels[k]).count();
        let tied_actives = tied.len() - tied_inactives;
        wins += tied_actives as f64 * (inactives_below as f64 + 0.5 * tied_inactives as f64);
        inactives_below += tied_inactives;
        i = j;
    }
    Ok(wins / (pos as f64 * neg as f64))
}

/// Default early-enrichment focus: the top ~2% of ranks dominate the score.
pub const BEDROC_ALPHA: f64 = 80.5;

/// Boltzmann-enhanced discrimination of ROC.
///
/// With `N` items, `N_t` actives at 1-based ranks `r_i`, `R = N_t / N`:
///
/// ```text
/// BEDROC = [sum_i e^(-a r_i / N)] / [R (1 - e^(-a)) / (e^(a/N) - 1)]
///          * R sinh(a/2) / (cosh(a/2) - cosh(a/2 - a R))
///          + 1 / (1 - e^(a (1 - R)))
/// ```
///
/// The closed form is a large-`N` normalization, so the result is clamped to
/// `[0, 1]`; it can stray below zero by ~1e-17 for worst-case rankings.
pub fn bedroc(data: &LabeledRanking, alpha: f64) -> Result<f64, MetricError> {
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(MetricError::InvalidCutoff(alpha));
    }
    data.require_both_classes()?;
    let n = data.len() as f64;
    let ranked = data.ranked_labels();
    let sum_exp: f64 = ranked
        .iter()
        .enumerate()
        .filter(|(_, &active)| active)
        .map(|(idx, _)| (-(alpha * (idx + 1) as f64) / n).exp())
        .sum();
    let r_alpha = data.actives() as f64 / n;
    let random_sum = r_alpha * (1.0 - (-alpha).exp()) / ((alpha / n).exp() - 1.0);
    let rie = sum_exp / random_sum;
    let scale = r_alpha * (alpha / 2.0).sinh()
        / ((alpha / 2.0).cosh() - (alpha / 2.0 - alpha * r_alpha).cosh());
    let tail = 1.0 / (1.0 - (alpha * (1.0 - r_alpha)).exp());
    Ok((rie * scale + tail).clamp(0.0, 1.0))
}

/// Enrichment factor at a top `alpha_percent` cutoff:
/// `NTB_alpha / (NTB_total * alpha / 100)` with the cutoff count
/// `ceil(alpha/100 * N)`.
pub fn enrichment_factor(data: &LabeledRanking, alpha_percent: f64) -> Result<f64, MetricError> {
    if !(alpha_percent > 0.0 && alpha_percent <= 100.0) {
        return Err(MetricError::InvalidCutoff(alpha_percent));
    }
    let total_binders = data.actives();
    if total_binders == 0 {
        return Err(MetricError::SingleClass);
    }
    let n = data.len();
    let cutoff = ((alpha_percent / 100.0 * n as f64).ceil() as usize).clamp(1, n);
    let ranked = data.ranked_labels();
    let top_binders = ranked[..cutoff].iter().filter(|&&l| l).count();
    Ok(top_binders as f64 / (total_binders as f64 * alpha_percent / 100.0))
}

/// Denominator convention for the raw-count ROC-enrichment variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReDenominator {
    /// `FP / N` with `N` the library size, as printed.
    LibrarySize,
    /// `FP / (number of inactives)`, the standard FPR.
    InactiveCount,
}

/// ROC enrichment at a false-positive rate of `x_percent`: the true-positive
/// rate at `FPR = x/100` divided by `x/100`, with TPR linearly interpolated
/// on the ROC curve. Interpolation resolves the fractional-count ambiguity of
/// discrete cutoffs.
pub fn roc_enrichment(data: &LabeledRanking, x_percent: f64) -> Result<f64, MetricError> {
    if !(x_percent > 0.0 && x_percent <= 100.0) {
        return Err(MetricError::InvalidCutoff(x_percent));
    }
    let curve = roc_curve(data)?;
    let x = x_percent / 100.0;
    Ok(interpolate_tpr(&curve, x) / x)
}

/// Raw-count ROC enrichment: walk the ranked list to the first prefix whose
/// false positives reach `x%` of the chosen denominator, then report
/// `(TP/P) / (FP/denom)` at that prefix.
pub fn roc_enrichment_raw(
    data: &LabeledRanking,
    x_percent: f64,
    denominator: ReDenominator,
) -> Result<f64, MetricError> {
    if !(x_percent > 0.0 && x_percent <= 100.0) {
        return Err(MetricError::InvalidCutoff(x_percent));
    }
    let (pos, neg) = data.require_both_classes()?;
    let denom = match denominator {
        ReDenominator::LibrarySize => data.len() as f64,
        ReDenominator::InactiveCount => neg as f64,
    };
    let fp_budget = x_percent / 100.0 * denom;
    let ranked = data.ranked_labels();
    let mut tp = 0usize;
    let mut fp = 0usize;
    for &active in &ranked {
        if active {
            tp += 1;
        } else {
            fp += 1;
        }
        if (fp as f64) >= fp_budget {
            break;
        }
    }
    if fp == 0 {
        // Never accumulated a false positive: perfect separation.
        return Ok((tp as f64 / pos as f64) / (x_percent / 100.0));
    }
    Ok((tp as f64 / pos as f64) / (fp as f64 / denom))
}

/// ROC curve as (FPR, TPR) vertices, handling score ties as diagonal
/// segments (Fawcett's construction).
fn roc_curve(data: &LabeledRanking) -> Result<Vec<(f64, f64)>, MetricError> {
    let (pos, neg) = data.require_both_classes()?;
    let order = data.descending_order();
    let mut curve = vec![(0.0, 0.0)];
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && data.scores[order[j]] == data.scores[order[i]] {
            j += 1;
        }
        for &k in &order[i..j] {
            if data.labels[k] {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        curve.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
        i = j;
    }
    Ok(curve)
}

fn interpolate_tpr(curve: &[(f64, f64)], x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    for w in curve.windows(2) {
        let (x0, y0) = w[0];
        let (x1, y1) = w[1];
        if x <= x1 {
            if x1 == x0 {
                // Vertical segment at this FPR: take the upper TPR.
                return y1;
            }
            return y0 + (y1 - y0) * (x - x0) / (x1 - x0);
        }
    }
    1.0
}

/// Textbook centered Pearson correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64, MetricError> {
    if x.len() != y.len() {
        return Err(MetricError::LengthMismatch { scores: x.len(), labels: y.len() });
    }
    if x.len() < 2 {
        return Err(MetricError::TooFewObservations(2));
    }
    let n = x.len() as f64;
    let mean_x = x.iter().sum::<f64>() / n;
    let mean_y = y.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut var_x = 0.0;
    let mut var_y = 0.0;
    for (a, b) in x.iter().zip(y) {
        let dx = a - mean_x;
        let dy = b - mean_y;
        cov += dx * dy;
        var_x += dx * dx;
        var_y += dy * dy;
    }
    if var_x == 0.0 {
        return Err(MetricError::ZeroVariance("x"));
    }
    if var_y == 0.0 {
        return Err(MetricError::ZeroVariance("y"));
    }
    Ok(cov / (var_x.sqrt() * var_y.sqrt()))
}

/// Average ranks (1-based, ties averaged).
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap());
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && values[order[j]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + 1 + j) as f64 / 2.0; // mean of ranks i+1 ..= j
        for &k in &order[i..j] {
            ranks[k] = avg;
        }
        i = j;
    }
    ranks
}

/// Spearman rank correlation. Without ties this equals
/// `1 - 6 sum d_i^2 / (n (n^2 - 1))`; with ties it falls back to Pearson on
/// average ranks, since the closed form is invalid under ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64, MetricError> {
    if x.len() != y.len() {
        return Err(MetricError::LengthMismatch { scores: x.len(), labels: y.len() });
    }
    if x.len() < 2 {
        return Err(MetricError::TooFewObservations(2));
    }
    let has_ties = |v: &[f64]| {
        let mut sorted = v.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        sorted.windows(2).any(|w| w[0] == w[1])
    };
    let rx = average_ranks(x);
    let ry = average_ranks(y);
    if has_ties(x) || has_ties(y) {
        return pearson(&rx, &ry).map_err(|e| match e {
            MetricError::ZeroVariance(which) => MetricError::ZeroVariance(which),
            other => other,
        });
    }
    let n = x.len() as f64;
    let d_sq: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(1.0 - 6.0 * d_sq / (n * (n * n - 1.0)))
}
