//! Training-signal terms: symmetric contrastive loss, Plackett-Luce listwise
//! loss, cone-hierarchy hinges (radial + angular), the angular-margin and
//! heterogeneity regularizers, and the weighted total.
//!
//! Everything here is a pure function over plain `f64` data. The autodiff
//! path in [`crate::model`] re-derives the same quantities on a tape and is
//! cross-checked against this module, so the two implementations must stay
//! independent.
//!
//! Conventions:
//! * natural logarithm throughout;
//! * softmax always uses the max-shift trick;
//! * hinge terms are `max(x, 0)`;
//! * affinity orientation is the caller's problem. The bucket assignment and
//!   the heterogeneity condition `v < v_th` are applied literally to the
//!   values passed in; the trainer feeds bucket inputs on a
//!   smaller-is-stronger scale (so bucket 0 holds the strongest binders) and
//!   heterogeneity inputs on the normalized larger-is-stronger scale.

use crate::geometry::{
    exterior_angle, half_aperture, lorentz_distance, Curvature, GeometryError, LorentzPoint,
};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("empty score list")]
    EmptyScores,
    #[error("positive index {index} out of range for {cols} columns")]
    PositiveOutOfRange { index: usize, cols: usize },
    #[error("bucket index {bucket} exceeds configured tiers ({tiers})")]
    BucketOutOfRange { bucket: usize, tiers: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("non-finite {term} term")]
    NonFinite { term: &'static str },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Similarity logits for one batch: rows are query assays, columns are the
/// candidate ligands, values already scaled by `1/tau`.
#[derive(Debug, Clone)]
pub struct LogitMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
    tau: f64,
}

impl LogitMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>, tau: f64) -> Result<Self, LossError> {
        if values.len() != rows * cols {
            return Err(LossError::ShapeMismatch(format!(
                "{} values for a {rows}x{cols} matrix",
                values.len()
            )));
        }
        if !(tau.is_finite() && tau > 0.0) {
            return Err(LossError::InvalidConfig(format!("tau must be positive, got {tau}")));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(LossError::NonFinite { term: "logits" });
        }
        Ok(Self { rows, cols, values, tau })
    }

    /// Builds the matrix from raw inner products, applying the `1/tau` scale.
    pub fn from_inner_products(
        rows: usize,
        cols: usize,
        inner: &[f64],
        tau: f64,
    ) -> Result<Self, LossError> {
        let values = inner.iter().map(|s| s / tau).collect();
        Self::new(rows, cols, values, tau)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.values[row * self.cols..(row + 1) * self.cols]
    }

    fn col(&self, col: usize) -> impl Iterator<Item = f64> + Clone + '_ {
        (0..self.rows).map(move |r| self.get(r, col))
    }
}

/// `log(sum(exp(x_i)))` with the max-shift trick.
fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = values.map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Symmetric in-batch contrastive loss.
///
/// For each row `i` with positive column set `L_i`, the query-to-ligand term
/// averages `-log softmax` over the row at each positive, the ligand-to-query
/// term averages `-log softmax` over the column at each positive, and the
/// total is `1/2 * sum_i` of both. Rows with no positives are skipped; every
/// non-positive column acts as a negative.
pub fn contrastive_loss(logits: &LogitMatrix, positives: &[Vec<usize>]) -> Result<f64, LossError> {
    if logits.rows == 0 || logits.cols == 0 {
        return Err(LossError::EmptyBatch);
    }
    if positives.len() != logits.rows {
        return Err(LossError::ShapeMismatch(format!(
            "{} positive sets for {} rows",
            positives.len(),
            logits.rows
        )));
    }
    let mut total = 0.0;
    for (i, pos) in positives.iter().enumerate() {
        if pos.is_empty() {
            continue;
        }
        for &k in pos {
            if k >= logits.cols {
                return Err(LossError::PositiveOutOfRange { index: k, cols: logits.cols });
            }
        }
        let row_lse = log_sum_exp(logits.row(i).iter().copied());
        let query_to_ligand: f64 =
            pos.iter().map(|&k| row_lse - logits.get(i, k)).sum::<f64>() / pos.len() as f64;
        let ligand_to_query: f64 = pos
            .iter()
            .map(|&k| log_sum_exp(logits.col(k)) - logits.get(i, k))
            .sum::<f64>()
            / pos.len() as f64;
        total += 0.5 * (query_to_ligand + ligand_to_query);
    }
    Ok(total)
}

/// Plackett-Luce decay weight `mu_k = 1 / (sqrt(B) ln(k + 1))`, `k` 1-based.
pub fn listwise_decay(k: usize, list_len: usize) -> f64 {
    1.0 / ((list_len as f64).sqrt() * ((k + 1) as f64).ln())
}

/// Plackett-Luce listwise loss over scores already sorted by ground-truth
/// affinity, strongest first: `-sum_k mu_k log p_k` where `p_k` is the
/// softmax of `scores[k]` over the remaining suffix. The final step is a
/// singleton softmax and contributes zero.
pub fn listwise_rank_loss(scores: &[f64]) -> Result<f64, LossError> {
    if scores.is_empty() {
        return Err(LossError::EmptyScores);
    }
    let b = scores.len();
    let mut loss = 0.0;
    for k in 0..b {
        let suffix_lse = log_sum_exp(scores[k..].iter().copied());
        loss += listwise_decay(k + 1, b) * (suffix_lse - scores[k]);
    }
    Ok(loss)
}

/// Affinity-tier configuration: bucket thresholds plus the per-tier radial
/// and angular cap parameters.
///
/// With thresholds `t_0 < ... < t_K`, bucket `k < K` is `[t_k, t_{k+1})` and
/// bucket `K` is `[t_K, inf)`; values below `t_0` clamp to bucket 0. Inputs
/// must be oriented so that smaller values mean stronger binders, making
/// bucket 0 the strongest tier.
#[derive(Debug, Clone, PartialEq)]
pub struct BucketConfig {
    pub thresholds: Vec<f64>,
    pub base_radius: f64,
    pub radius_step: f64,
    pub base_angle_scale: f64,
    pub angle_step: f64,
}

impl BucketConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        if self.thresholds.is_empty() {
            return Err(LossError::InvalidConfig("thresholds must be non-empty".into()));
        }
        if self.thresholds.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(LossError::InvalidConfig(
                "thresholds must be strictly increasing".into(),
            ));
        }
        if self.thresholds.iter().any(|t| !t.is_finite()) {
            return Err(LossError::InvalidConfig("thresholds must be finite".into()));
        }
        if !(self.base_radius > 0.0 && self.radius_step > 0.0) {
            return Err(LossError::InvalidConfig("radius parameters must be positive".into()));
        }
        let max_bucket = self.thresholds.len() - 1;
        if !(self.base_angle_scale - max_bucket as f64 * self.angle_step > 0.0) {
            return Err(LossError::InvalidConfig(
                "every tier must keep a positive aperture scale".into(),
            ));
        }
        if !(self.angle_step > 0.0) {
            return Err(LossError::InvalidConfig("angle step must be positive".into()));
        }
        Ok(())
    }

    /// Number of tiers (= number of thresholds; the top tier is open-ended).
    pub fn tiers(&self) -> usize {
        self.thresholds.len()
    }

    /// Radial cap `r_0 + b * dr` for bucket `b`.
    pub fn radius_cap(&self, bucket: usize) -> f64 {
        self.base_radius + bucket as f64 * self.radius_step
    }

    /// Angular scale `eta_0 - b * d_eta` for bucket `b`.
    pub fn angle_scale(&self, bucket: usize) -> f64 {
        self.base_angle_scale - bucket as f64 * self.angle_step
    }
}

/// Maps each value to its bucket index. Total after clamping: values below
/// the first threshold go to bucket 0, values at or above the last go to the
/// last tier. Monotone by construction.
pub fn assign_buckets(affinities: &[f64], config: &BucketConfig) -> Vec<usize> {
    let t = &config.thresholds;
    affinities
        .iter()
        .map(|&v| {
            // partition_point gives the count of thresholds <= v.
            let above = t.partition_point(|&thr| thr <= v);
            above.saturating_sub(1)
        })
        .collect()
}

/// Which loss terms to weight by how much in the total objective.
#[derive(Debug, Clone, PartialEq)]
pub struct LossWeights {
    pub alpha_poc: f64,
    pub alpha_seq: f64,
    pub lambda_rank: f64,
    pub gamma_cone: f64,
    pub lambda_rad: f64,
    pub lambda_ang_cone: f64,
    pub lambda_ang_reg: f64,
    pub lambda_het: f64,
    pub margin: f64,
    pub affinity_threshold: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha_poc: 1.0,
            alpha_seq: 0.5,
            lambda_rank: 1.0,
            gamma_cone: 1.0,
            lambda_rad: 1.0,
            lambda_ang_cone: 1.0,
            lambda_ang_reg: 0.1,
            lambda_het: 0.1,
            margin: 0.1,
            affinity_threshold: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), LossError> {
        let named = [
            ("alpha_poc", self.alpha_poc),
            ("alpha_seq", self.alpha_seq),
            ("lambda_rank", self.lambda_rank),
            ("gamma_cone", self.gamma_cone),
            ("lambda_rad", self.lambda_rad),
            ("lambda_ang_cone", self.lambda_ang_cone),
            ("lambda_ang_reg", self.lambda_ang_reg),
            ("lambda_het", self.lambda_het),
            ("margin", self.margin),
        ];
        for (name, v) in named {
            if !(v.is_finite() && v >= 0.0) {
                return Err(LossError::InvalidConfig(format!(
                    "{name} must be a non-negative finite number, got {v}"
                )));
            }
        }
        if !self.affinity_threshold.is_finite() {
            return Err(LossError::InvalidConfig("affinity_threshold must be finite".into()));
        }
        if self.alpha_poc <= 0.0 && self.alpha_seq <= 0.0 && self.gamma_cone <= 0.0 {
            return Err(LossError::InvalidConfig(
                "at least one tower weight must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Unweighted radial and angular hinge sums plus their weighted combination.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConeTerms {
    pub radial: f64,
    pub angular: f64,
    pub combined: f64,
}

/// Cone-hierarchy loss over per-assay pockets and their ligands.
///
/// Pair `(i, j)` with bucket `b` violates when its geodesic distance exceeds
/// `r_0 + b dr` or its exterior angle exceeds `(eta_0 - b d_eta) * omega_i`.
/// Both hinge sums are normalized by `1/sqrt(N)` with `N` the pair count;
/// `combined = lambda_rad * L_rad + lambda_ang_cone * L_ang`.
pub fn cone_loss(
    pockets: &[LorentzPoint],
    ligands: &[Vec<LorentzPoint>],
    buckets: &[Vec<usize>],
    config: &BucketConfig,
    weights: &LossWeights,
    curvature: Curvature,
) -> Result<ConeTerms, LossError> {
    let (radial, angular) = cone_hinge_sums(pockets, ligands, buckets, config, curvature, 0.0)?;
    Ok(ConeTerms {
        radial,
        angular,
        combined: weights.lambda_rad * radial + weights.lambda_ang_cone * angular,
    })
}

/// Angular-margin regularizer: the angular hinge with a fixed margin `m`
/// added inside, `1/sqrt(N) * sum max(phi - eta omega + m, 0)`.
pub fn angular_margin_reg(
    pockets: &[LorentzPoint],
    ligands: &[Vec<LorentzPoint>],
    buckets: &[Vec<usize>],
    config: &BucketConfig,
    margin: f64,
    curvature: Curvature,
) -> Result<f64, LossError> {
    let (_, angular) = cone_hinge_sums(pockets, ligands, buckets, config, curvature, margin)?;
    Ok(angular)
}

fn cone_hinge_sums(
    pockets: &[LorentzPoint],
    ligands: &[Vec<LorentzPoint>],
    buckets: &[Vec<usize>],
    config: &BucketConfig,
    curvature: Curvature,
    margin: f64,
) -> Result<(f64, f64), LossError> {
    config.validate()?;
    if pockets.len() != ligands.len() || pockets.len() != buckets.len() {
        return Err(LossError::ShapeMismatch(format!(
            "{} pockets, {} ligand groups, {} bucket groups",
            pockets.len(),
            ligands.len(),
            buckets.len()
        )));
    }
    let n_pairs: usize = ligands.iter().map(|l| l.len()).sum();
    if n_pairs == 0 {
        return Ok((0.0, 0.0));
    }
    let mut radial = 0.0;
    let mut angular = 0.0;
    for ((pocket, group), group_buckets) in pockets.iter().zip(ligands).zip(buckets) {
        if group.len() != group_buckets.len() {
            return Err(LossError::ShapeMismatch(
                "ligand group and bucket group lengths differ".into(),
            ));
        }
        if group.is_empty() {
            continue;
        }
        let aperture = half_aperture(pocket, config.base_radius, curvature)?;
        for (ligand, &bucket) in group.iter().zip(group_buckets) {
            if bucket >= config.tiers() {
                return Err(LossError::BucketOutOfRange { bucket, tiers: config.tiers() });
            }
            let d = lorentz_distance(pocket, ligand, curvature)?;
            let phi = exterior_angle(pocket, ligand, curvature)?;
            radial += (d - config.radius_cap(bucket)).max(0.0);
            angular += (phi - config.angle_scale(bucket) * aperture + margin).max(0.0);
        }
    }
    let norm = (n_pairs as f64).sqrt();
    Ok((radial / norm, angular / norm))
}

/// One assay's contribution to the heterogeneity regularizer: the logits and
/// affinities of its active ligands (active by label).
#[derive(Debug, Clone)]
pub struct ActiveSet {
    pub logits: Vec<f64>,
    pub affinities: Vec<f64>,
}

/// Heterogeneity regularizer.
///
/// Within each assay's active set, ligands whose affinity satisfies
/// `v < v_th` contribute `-w log p`, where `p` is the softmax of the ligand's
/// logit over the assay's active set and `w = 1 / log2(rank + 1)` with ranks
/// assigned by descending affinity within the active set (ties keep input
/// order). Averaged over assays with at least one active; zero actives
/// anywhere yields zero.
pub fn heterogeneity_reg(active_sets: &[ActiveSet], affinity_threshold: f64) -> f64 {
    let mut total = 0.0;
    let mut assays_with_actives = 0usize;
    for set in active_sets {
        debug_assert_eq!(set.logits.len(), set.affinities.len());
        if set.logits.is_empty() {
            continue;
        }
        assays_with_actives += 1;
        let lse = log_sum_exp(set.logits.iter().copied());
        let ranks = descending_ranks(&set.affinities);
        for (j, (&logit, &aff)) in set.logits.iter().zip(&set.affinities).enumerate() {
            if aff < affinity_threshold {
                let w = 1.0 / ((ranks[j] + 1) as f64).log2();
                total += w * (lse - logit);
            }
        }
    }
    total / (assays_with_actives.max(1) as f64)
}

/// 1-based ranks by descending value; ties broken by input order.
fn descending_ranks(values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].partial_cmp(&values[a]).unwrap_or(std::cmp::Ordering::Equal));
    let mut ranks = vec![0usize; values.len()];
    for (rank, &idx) in order.iter().enumerate() {
        ranks[idx] = rank + 1;
    }
    ranks
}

/// Raw (unweighted) values of every term in the training objective.
/// Sequence-tower terms are `None` when no sequence features were available.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub contrastive_pocket: f64,
    pub rank_pocket: f64,
    pub contrastive_sequence: Option<f64>,
    pub rank_sequence: Option<f64>,
    pub cone_radial: f64,
    pub cone_angular: f64,
    pub angular_margin: f64,
    pub heterogeneity: f64,
}

impl LossBreakdown {
    /// Re-applies the weights and sums; the bookkeeping identity checked by
    /// the tests.
    pub fn weighted_total(&self, w: &LossWeights) -> f64 {
        let pocket = w.alpha_poc * (self.contrastive_pocket + w.lambda_rank * self.rank_pocket);
        let sequence = w.alpha_seq
            * (self.contrastive_sequence.unwrap_or(0.0)
                + w.lambda_rank * self.rank_sequence.unwrap_or(0.0));
        let cone = w.gamma_cone
            * (w.lambda_rad * self.cone_radial + w.lambda_ang_cone * self.cone_angular);
        pocket + sequence + cone + w.lambda_ang_reg * self.angular_margin
            + w.lambda_het * self.heterogeneity
    }

    fn terms(&self) -> [(&'static str, f64); 8] {
        [
            ("contrastive_pocket", self.contrastive_pocket),
            ("rank_pocket", self.rank_pocket),
            ("contrastive_sequence", self.contrastive_sequence.unwrap_or(0.0)),
            ("rank_sequence", self.rank_sequence.unwrap_or(0.0)),
            ("cone_radial", self.cone_radial),
            ("cone_angular", self.cone_angular),
            ("angular_margin", self.angular_margin),
            ("heterogeneity", self.heterogeneity),
        ]
    }
}

/// Combines the raw terms into the full training objective
/// `alpha_poc (L_cont^poc + lambda_rank L_rank^poc)
///  + alpha_seq (L_cont^seq + lambda_rank L_rank^seq)
///  + gamma_cone L_cone + lambda_ang R_ang + lambda_het R_het`,
/// returning the scalar together with the breakdown for logging.
pub fn total_loss(breakdown: &LossBreakdown, weights: &LossWeights) -> Result<f64, LossError> {
    weights.validate()?;
    for (name, value) in breakdown.terms() {
        if !value.is_finite() {
            return Err(LossError::NonFinite {
                term: match name {
                    "contrastive_pocket" => "contrastive_pocket",
                    "rank_pocket" => "rank_pocket",
                    "contrastive_sequence" => "contrastive_sequence",
                    "rank_sequence" => "rank_sequence",
                    "cone_radial" => "cone_radial",
                    "cone_angular" => "cone_angular",
                    "angular_margin" => "angular_margin",
                    _ => "heterogeneity",
                },
            });
        }
    }
    let total = breakdown.weighted_total(weights);
    if !total.is_finite() {
        return Err(LossError::NonFinite { term: "total" });
    }
    Ok(total)
}
