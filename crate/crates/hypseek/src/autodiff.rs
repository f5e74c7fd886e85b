//! Reverse-mode gradients of the full training objective.
//!
//! The forward pass is rebuilt on a [`Tape`] op by op, mirroring the
//! plain-`f64` route in [`crate::model::forward_loss`]; the two are
//! independent implementations of the same math and are cross-checked to
//! 1e-10 in tests. Gradients flow through the affine heads, the exponential
//! map, the geodesic distance, the exterior angle, the cone aperture and all
//! loss terms, with hinge subgradient 0 at the kink.

use crate::geometry::Curvature;
use crate::losses::{listwise_decay, BucketConfig, LossBreakdown, LossWeights};
use crate::model::{GradientBundle, ModelError, ModelParams, ProjectionHead, TrainBatch};
use crate::tape::{NodeId, Tape};

/// Node ids of one head's parameters, in the same layout the flat parameter
/// vector uses.
struct TapeHead {
    hidden: Option<(Vec<NodeId>, Vec<NodeId>)>,
    weight: Vec<NodeId>,
    bias: Vec<NodeId>,
    n_out: usize,
    inner_dim: usize,
}

impl TapeHead {
    fn register(tape: &mut Tape, head: &ProjectionHead) -> Self {
        let hidden = head.hidden.as_ref().map(|h| {
            let w: Vec<NodeId> = h.weight.data().iter().map(|&v| tape.leaf(v)).collect();
            let b: Vec<NodeId> = h.bias.iter().map(|&v| tape.leaf(v)).collect();
            (w, b)
        });
        let weight: Vec<NodeId> = head.weight.data().iter().map(|&v| tape.leaf(v)).collect();
        let bias: Vec<NodeId> = head.bias.iter().map(|&v| tape.leaf(v)).collect();
        Self {
            hidden,
            weight,
            bias,
            n_out: head.n_out(),
            inner_dim: head.weight.cols(),
        }
    }

    /// `W x + b` (with the optional tanh hidden layer) for a constant input.
    fn forward(&self, tape: &mut Tape, features: &[f64]) -> Vec<NodeId> {
        match &self.hidden {
            None => (0..self.n_out)
                .map(|r| {
                    let row = &self.weight[r * self.inner_dim..(r + 1) * self.inner_dim];
                    tape.affine_const_input(row, features, self.bias[r])
                })
                .collect(),
            Some((hw, hb)) => {
                let hidden_dim = hb.len();
                let n_in = features.len();
                let activations: Vec<NodeId> = (0..hidden_dim)
                    .map(|r| {
                        let row = &hw[r * n_in..(r + 1) * n_in];
                        let pre = tape.affine_const_input(row, features, hb[r]);
                        tape.tanh(pre)
                    })
                    .collect();
                (0..self.n_out)
                    .map(|r| {
                        let row = &self.weight[r * self.inner_dim..(r + 1) * self.inner_dim];
                        let wx = tape.dot(row, &activations);
                        tape.add(wx, self.bias[r])
                    })
                    .collect()
            }
        }
    }
}

/// An embedded point on the tape: spatial coordinate nodes plus the time
/// node derived from them.
struct TapePoint {
    spatial: Vec<NodeId>,
    time: NodeId,
}

/// Mirrors `exp_map_origin`: spatial = sinh(a)/a * v with the small-norm
/// series guard, time = sqrt(1/kappa + ||spatial||^2).
fn exp_map_on_tape(tape: &mut Tape, tangent: &[NodeId], curvature: Curvature) -> TapePoint {
    let norm_sq = tape.dot(tangent, tangent);
    let norm = tape.sqrt(norm_sq);
    let a = tape.scale(norm, curvature.sqrt_kappa());
    let coeff = if tape.value(norm) < 1e-8 {
        let a_sq = tape.mul(a, a);
        let scaled = tape.scale(a_sq, 1.0 / 6.0);
        tape.add_const(scaled, 1.0)
    } else {
        let sh = tape.sinh(a);
        tape.div(sh, a)
    };
    let spatial: Vec<NodeId> = tangent.iter().map(|&t| tape.mul(coeff, t)).collect();
    let spatial_sq = tape.dot(&spatial, &spatial);
    let shifted = tape.add_const(spatial_sq, 1.0 / curvature.kappa());
    let time = tape.sqrt(shifted);
    TapePoint { spatial, time }
}

/// Mirrors `lorentz_distance`: chord identity plus `acosh(1 + x)` via
/// `ln_1p`, with the `x >= 0` clamp as a hinge.
fn distance_on_tape(tape: &mut Tape, p: &TapePoint, q: &TapePoint, curvature: Curvature) -> NodeId {
    let dt = tape.sub(p.time, q.time);
    let dt_sq = tape.mul(dt, dt);
    let diffs: Vec<NodeId> = p
        .spatial
        .iter()
        .zip(&q.spatial)
        .map(|(&a, &b)| tape.sub(a, b))
        .collect();
    let spatial_sq = tape.dot(&diffs, &diffs);
    let chord = tape.sub(spatial_sq, dt_sq);
    let excess_raw = tape.scale(chord, 0.5 * curvature.kappa());
    let excess = tape.hinge(excess_raw);
    let plus_two = tape.add_const(excess, 2.0);
    let prod = tape.mul(excess, plus_two);
    let root = tape.sqrt_clamped(prod);
    let arg = tape.add(excess, root);
    let acosh = tape.ln_1p(arg);
    tape.scale(acosh, 1.0 / curvature.sqrt_kappa())
}

/// Mirrors `exterior_angle` with the same clamp placements.
fn exterior_angle_on_tape(
    tape: &mut Tape,
    pocket: &TapePoint,
    pocket_norm: NodeId,
    ligand: &TapePoint,
    curvature: Curvature,
) -> NodeId {
    let kappa = curvature.kappa();
    let time_prod = tape.mul(pocket.time, ligand.time);
    let spatial_dot = tape.dot(&pocket.spatial, &ligand.spatial);
    let inner = tape.sub(spatial_dot, time_prod);
    let u = tape.scale(inner, kappa);
    let u_sq = tape.mul(u, u);
    let sinh_sq = tape.add_const(u_sq, -1.0);
    let sinh = tape.sqrt_clamped(sinh_sq);
    let denom = tape.mul(pocket_norm, sinh);
    let u_p0 = tape.mul(u, pocket.time);
    let numer = tape.add(ligand.time, u_p0);
    let cos_phi = tape.div(numer, denom);
    tape.acos_clamped(cos_phi)
}

/// Mirrors `half_aperture`: `asin(min(1, 2 r0 / (sqrt(kappa) ||p~||)))`.
fn aperture_on_tape(tape: &mut Tape, pocket_norm: NodeId, r0: f64, curvature: Curvature) -> NodeId {
    let arg = tape.const_over(2.0 * r0 / curvature.sqrt_kappa(), pocket_norm);
    tape.asin_clamped(arg)
}

struct TermNodes {
    contrastive_pocket: NodeId,
    rank_pocket: NodeId,
    contrastive_sequence: Option<NodeId>,
    rank_sequence: Option<NodeId>,
    cone_radial: NodeId,
    cone_angular: NodeId,
    angular_margin: NodeId,
    heterogeneity: NodeId,
}

/// Computes the total loss and its exact gradients for one batch.
///
/// The returned loss matches [`crate::model::forward_loss`] on the same batch
/// within 1e-10; gradients are the exact reverse-mode derivatives of the
/// tape's forward expression.
pub fn grad_total_loss(
    batch: &TrainBatch,
    params: &ModelParams,
    weights: &LossWeights,
    tiers: &BucketConfig,
) -> Result<(f64, LossBreakdown, GradientBundle), ModelError> {
    batch.validate(params.n_in())?;
    weights.validate()?;
    tiers.validate()?;
    let curvature = params.curvature;
    let n_assays = batch.assays.len();
    let n_cols = batch.n_ligands();
    let offsets = batch.column_offsets();

    let mut tape = Tape::with_capacity(1 << 16, 1 << 20);

    // Parameter leaves, in flat order.
    let pocket_head = TapeHead::register(&mut tape, &params.pocket_head);
    let ligand_head = TapeHead::register(&mut tape, &params.ligand_head);
    let sequence_head = TapeHead::register(&mut tape, &params.sequence_head);
    let log_tau_leaf = params.learn_tau.then(|| tape.leaf(params.tau.ln()));
    let n_leaves = params.trainable_count();

    // Range guard on every tangent, matching the plain path.
    let check_tangent = |tape: &Tape, nodes: &[NodeId], what: &str| -> Result<(), ModelError> {
        let norm_sq: f64 = nodes.iter().map(|&n| tape.value(n) * tape.value(n)).sum();
        let norm = norm_sq.sqrt();
        if !norm.is_finite() {
            return Err(ModelError::NonFinite { term: format!("{what} tangent") });
        }
        if norm > crate::model::TANGENT_NORM_LIMIT {
            return Err(ModelError::TangentOutOfRange { norm });
        }
        Ok(())
    };

    // Embed pockets, ligands, sequences.
    let mut pocket_points = Vec::with_capacity(n_assays);
    for assay in &batch.assays {
        let tangent = pocket_head.forward(&mut tape, &assay.pocket_features);
        check_tangent(&tape, &tangent, "pocket")?;
        pocket_points.push(exp_map_on_tape(&mut tape, &tangent, curvature));
    }
    let mut ligand_points: Vec<Vec<TapePoint>> = Vec::with_capacity(n_assays);
    for assay in &batch.assays {
        let mut group = Vec::with_capacity(assay.ligands.len());
        for ligand in &assay.ligands {
            let tangent = ligand_head.forward(&mut tape, &ligand.features);
            check_tangent(&tape, &tangent, "ligand")?;
            group.push(exp_map_on_tape(&mut tape, &tangent, curvature));
        }
        ligand_points.push(group);
    }
    let mut sequence_points: Vec<Option<TapePoint>> = Vec::with_capacity(n_assays);
    for assay in &batch.assays {
        sequence_points.push(match &assay.sequence_features {
            Some(features) => {
                let tangent = sequence_head.forward(&mut tape, features);
                check_tangent(&tape, &tangent, "sequence")?;
                Some(exp_map_on_tape(&mut tape, &tangent, curvature))
            }
            None => None,
        });
    }

    // 1/tau as a node (constant when tau is frozen).
    let inv_tau = match log_tau_leaf {
        Some(lt) => {
            let neg = tape.neg(lt);
            Some(tape.exp(neg))
        }
        None => None,
    };
    let mut scale_logit = |tape: &mut Tape, raw: NodeId| -> NodeId {
        match inv_tau {
            Some(it) => tape.mul(raw, it),
            None => tape.scale(raw, 1.0 / params.tau),
        }
    };

    let flat_ligands: Vec<&TapePoint> = ligand_points.iter().flatten().collect();

    // Logit matrices, row-major node grids.
    let mut pocket_logits = Vec::with_capacity(n_assays * n_cols);
    for point in &pocket_points {
        for ligand in &flat_ligands {
            let raw = tape.dot(&point.spatial, &ligand.spatial);
            pocket_logits.push(scale_logit(&mut tape, raw));
        }
    }
    let seq_rows: Vec<usize> = (0..n_assays).filter(|&i| sequence_points[i].is_some()).collect();
    let mut seq_logits = Vec::with_capacity(seq_rows.len() * n_cols);
    for &i in &seq_rows {
        let point = sequence_points[i].as_ref().unwrap();
        for ligand in &flat_ligands {
            let raw = tape.dot(&point.spatial, &ligand.spatial);
            seq_logits.push(scale_logit(&mut tape, raw));
        }
    }

    let positives: Vec<Vec<usize>> = batch
        .assays
        .iter()
        .enumerate()
        .map(|(i, assay)| {
            assay
                .ligands
                .iter()
                .enumerate()
                .filter(|(_, l)| l.active)
                .map(|(j, _)| offsets[i] + j)
                .collect()
        })
        .collect();

    // Contrastive: 1/2 sum_i (row term + column term), rows without
    // positives skipped.
    let contrastive =
        |tape: &mut Tape, logits: &[NodeId], rows: usize, row_positives: &[&[usize]]| -> NodeId {
            let mut per_row = Vec::new();
            let mut col_lse_cache: Vec<Option<NodeId>> = vec![None; n_cols];
            for r in 0..rows {
                let pos = row_positives[r];
                if pos.is_empty() {
                    continue;
                }
                let row_nodes = &logits[r * n_cols..(r + 1) * n_cols];
                let row_lse = tape.log_sum_exp(row_nodes);
                let mut q2l_terms = Vec::with_capacity(pos.len());
                let mut l2q_terms = Vec::with_capacity(pos.len());
                for &k in pos {
                    let s = logits[r * n_cols + k];
                    q2l_terms.push(tape.sub(row_lse, s));
                    let col_lse = match col_lse_cache[k] {
                        Some(n) => n,
                        None => {
                            let col_nodes: Vec<NodeId> =
                                (0..rows).map(|rr| logits[rr * n_cols + k]).collect();
                            let n = tape.log_sum_exp(&col_nodes);
                            col_lse_cache[k] = Some(n);
                            n
                        }
                    };
                    l2q_terms.push(tape.sub(col_lse, s));
                }
                let q2l_sum = tape.sum(&q2l_terms);
                let q2l = tape.scale(q2l_sum, 1.0 / pos.len() as f64);
                let l2q_sum = tape.sum(&l2q_terms);
                let l2q = tape.scale(l2q_sum, 1.0 / pos.len() as f64);
                let both = tape.add(q2l, l2q);
                per_row.push(tape.scale(both, 0.5));
            }
            tape.sum(&per_row)
        };
    let pos_refs: Vec<&[usize]> = positives.iter().map(|p| p.as_slice()).collect();
    let contrastive_pocket = contrastive(&mut tape, &pocket_logits, n_assays, &pos_refs);
    let contrastive_sequence = if seq_rows.is_empty() {
        None
    } else {
        let seq_pos: Vec<&[usize]> = seq_rows.iter().map(|&i| positives[i].as_slice()).collect();
        Some(contrastive(&mut tape, &seq_logits, seq_rows.len(), &seq_pos))
    };

    // Listwise rank loss per assay over its own affinity-labeled ligands.
    let rank_orders = batch.rank_orders();
    let listwise = |tape: &mut Tape, logits: &[NodeId], row: usize, assay_idx: usize| -> Option<NodeId> {
        let order = &rank_orders[assay_idx];
        if order.is_empty() {
            return None;
        }
        let scores: Vec<NodeId> = order
            .iter()
            .map(|&j| logits[row * n_cols + offsets[assay_idx] + j])
            .collect();
        let b = scores.len();
        let mut terms = Vec::with_capacity(b);
        for k in 0..b {
            let suffix_lse = tape.log_sum_exp(&scores[k..]);
            let diff = tape.sub(suffix_lse, scores[k]);
            terms.push((diff, listwise_decay(k + 1, b)));
        }
        Some(tape.weighted_sum(&terms))
    };
    let rank_terms: Vec<NodeId> =
        (0..n_assays).filter_map(|i| listwise(&mut tape, &pocket_logits, i, i)).collect();
    let rank_pocket = tape.sum(&rank_terms);
    let rank_sequence = if seq_rows.is_empty() {
        None
    } else {
        let terms: Vec<NodeId> = seq_rows
            .iter()
            .enumerate()
            .filter_map(|(row, &i)| listwise(&mut tape, &seq_logits, row, i))
            .collect();
        Some(tape.sum(&terms))
    };

    // Cone hinges over bucketed ligands, pocket tower only.
    let mut radial_hinges = Vec::new();
    let mut angular_hinges = Vec::new();
    let mut margin_hinges = Vec::new();
    for (i, assay) in batch.assays.iter().enumerate() {
        let bucketed: Vec<(usize, usize)> = assay
            .ligands
            .iter()
            .enumerate()
            .filter_map(|(j, l)| l.bucket.map(|b| (j, b)))
            .collect();
        if bucketed.is_empty() {
            continue;
        }
        let pocket = &pocket_points[i];
        let norm_sq = tape.dot(&pocket.spatial, &pocket.spatial);
        let pocket_norm = tape.sqrt(norm_sq);
        let aperture = aperture_on_tape(&mut tape, pocket_norm, tiers.base_radius, curvature);
        for (j, bucket) in bucketed {
            let ligand = &ligand_points[i][j];
            let d = distance_on_tape(&mut tape, pocket, ligand, curvature);
            let phi = exterior_angle_on_tape(&mut tape, pocket, pocket_norm, ligand, curvature);
            let d_excess = tape.add_const(d, -tiers.radius_cap(bucket));
            radial_hinges.push(tape.hinge(d_excess));
            let cap = tape.scale(aperture, tiers.angle_scale(bucket));
            let ang_excess = tape.sub(phi, cap);
            angular_hinges.push(tape.hinge(ang_excess));
            let with_margin = tape.add_const(ang_excess, weights.margin);
            margin_hinges.push(tape.hinge(with_margin));
        }
    }
    let n_pairs = radial_hinges.len();
    let cone_norm = if n_pairs > 0 { 1.0 / (n_pairs as f64).sqrt() } else { 0.0 };
    let radial_sum = tape.sum(&radial_hinges);
    let cone_radial = tape.scale(radial_sum, cone_norm);
    let angular_sum = tape.sum(&angular_hinges);
    let cone_angular = tape.scale(angular_sum, cone_norm);
    let margin_sum = tape.sum(&margin_hinges);
    let angular_margin = tape.scale(margin_sum, cone_norm);

    // Heterogeneity over affinity-labeled actives.
    let mut het_terms: Vec<(NodeId, f64)> = Vec::new();
    let mut assays_with_actives = 0usize;
    for (i, assay) in batch.assays.iter().enumerate() {
        let mut logits_nodes = Vec::new();
        let mut affinities = Vec::new();
        for (j, ligand) in assay.ligands.iter().enumerate() {
            if ligand.active {
                if let Some(v) = ligand.affinity {
                    logits_nodes.push(pocket_logits[i * n_cols + offsets[i] + j]);
                    affinities.push(v);
                }
            }
        }
        if logits_nodes.is_empty() {
            continue;
        }
        assays_with_actives += 1;
        let lse = tape.log_sum_exp(&logits_nodes);
        let ranks = descending_ranks(&affinities);
        for (j, &node) in logits_nodes.iter().enumerate() {
            if affinities[j] < weights.affinity_threshold {
                let w = 1.0 / ((ranks[j] + 1) as f64).log2();
                let diff = tape.sub(lse, node);
                het_terms.push((diff, w));
            }
        }
    }
    let het_sum = tape.weighted_sum(&het_terms);
    let heterogeneity = tape.scale(het_sum, 1.0 / assays_with_actives.max(1) as f64);

    let terms = TermNodes {
        contrastive_pocket,
        rank_pocket,
        contrastive_sequence,
        rank_sequence,
        cone_radial,
        cone_angular,
        angular_margin,
        heterogeneity,
    };

    // Total: mirrors LossBreakdown::weighted_total.
    let pocket_part = tape.weighted_sum(&[
        (terms.contrastive_pocket, 1.0),
        (terms.rank_pocket, weights.lambda_rank),
    ]);
    let cone_part = tape.weighted_sum(&[
        (terms.cone_radial, weights.lambda_rad),
        (terms.cone_angular, weights.lambda_ang_cone),
    ]);
    let mut total_terms = vec![
        (pocket_part, weights.alpha_poc),
        (cone_part, weights.gamma_cone),
        (terms.angular_margin, weights.lambda_ang_reg),
        (terms.heterogeneity, weights.lambda_het),
    ];
    if let (Some(cs), Some(rs)) = (terms.contrastive_sequence, terms.rank_sequence) {
        let seq_part = tape.weighted_sum(&[(cs, 1.0), (rs, weights.lambda_rank)]);
        total_terms.push((seq_part, weights.alpha_seq));
    }
    let total = tape.weighted_sum(&total_terms);

    // Surface non-finite terms by name before differentiating.
    let named = [
        ("contrastive_pocket", Some(terms.contrastive_pocket)),
        ("rank_pocket", Some(terms.rank_pocket)),
        ("contrastive_sequence", terms.contrastive_sequence),
        ("rank_sequence", terms.rank_sequence),
        ("cone_radial", Some(terms.cone_radial)),
        ("cone_angular", Some(terms.cone_angular)),
        ("angular_margin", Some(terms.angular_margin)),
        ("heterogeneity", Some(terms.heterogeneity)),
    ];
    for (name, node) in named {
        if let Some(node) = node {
            if !tape.value(node).is_finite() {
                return Err(ModelError::NonFinite { term: name.into() });
            }
        }
    }
    let loss = tape.value(total);
    if !loss.is_finite() {
        return Err(ModelError::NonFinite { term: "total".into() });
    }

    let adjoint = tape.backward(total);
    let flat: Vec<f64> = adjoint[..n_leaves].to_vec();
    let bundle = GradientBundle::from_flat(params, &flat);
    if !bundle.is_finite() {
        return Err(ModelError::NonFinite { term: "gradient".into() });
    }

    let breakdown = LossBreakdown {
        contrastive_pocket: tape.value(terms.contrastive_pocket),
        rank_pocket: tape.value(terms.rank_pocket),
        contrastive_sequence: terms.contrastive_sequence.map(|n| tape.value(n)),
        rank_sequence: terms.rank_sequence.map(|n| tape.value(n)),
        cone_radial: tape.value(terms.cone_radial),
        cone_angular: tape.value(terms.cone_angular),
        angular_margin: tape.value(terms.angular_margin),
        heterogeneity: tape.value(terms.heterogeneity),
    };
    Ok((loss, breakdown, bundle))
}

fn descending_ranks(values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].partial_cmp(&values[a]).unwrap_or(std::cmp::Ordering::Equal));
    let mut ranks = vec![0usize; values.len()];
    for (rank, &idx) in order.iter().enumerate() {
        ranks[idx] = rank + 1;
    }
    ranks
}

/// Worst relative disagreement between a gradient vector and central finite
/// differences of `f`, with denominator `max(|analytic|, |numeric|, 1e-8)`.
pub fn max_relative_fd_error<F>(f: F, at: &[f64], analytic: &[f64], h: f64) -> f64
where
    F: Fn(&[f64]) -> f64,
{
    let mut worst = 0.0f64;
    for i in 0..at.len() {
        let mut up = at.to_vec();
        let mut dn = at.to_vec();
        up[i] += h;
        dn[i] -= h;
        let numeric = (f(&up) - f(&dn)) / (2.0 * h);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    worst
}

/// Central-difference validation of [`grad_total_loss`] against the plain
/// forward pass. Returns the worst relative error over all trainable
/// parameters.
pub fn finite_diff_check(
    batch: &TrainBatch,
    params: &ModelParams,
    weights: &LossWeights,
    tiers: &BucketConfig,
    h: f64,
) -> Result<f64, ModelError> {
    let (_, _, bundle) = grad_total_loss(batch, params, weights, tiers)?;
    let analytic = bundle.flatten();
    let at = params.flatten_trainable();
    let f = |flat: &[f64]| {
        let mut p = params.clone();
        p.set_trainable(flat);
        crate::model::forward_loss(batch, &p, weights, tiers)
            .map(|(loss, _)| loss)
            .unwrap_or(f64::NAN)
    };
    Ok(max_relative_fd_error(f, &at, &analytic, h))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{exterior_angle, half_aperture, lorentz_distance};
    use crate::model::{embed, forward_loss, BatchAssay, BatchLigand, Matrix};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn tiers() -> BucketConfig {
        BucketConfig {
            thresholds: vec![-1.0, 0.0, 1.0],
            base_radius: 0.1,
            radius_step: 0.5,
            base_angle_scale: 1.0,
            angle_step: 0.2,
        }
    }

    fn random_batch(rng: &mut StdRng, n_assays: usize, n_ligands: usize, n_in: usize) -> TrainBatch {
        let assays = (0..n_assays)
            .map(|i| {
                let ligands = (0..n_ligands)
                    .map(|j| BatchLigand {
                        features: (0..n_in).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                        active: j % 2 == 0,
                        affinity: Some(rng.gen_range(-1.5..1.5)),
                        bucket: Some(rng.gen_range(0..3)),
                    })
                    .collect();
                BatchAssay {
                    assay_id: format!("a{i}"),
                    pocket_features: (0..n_in).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                    sequence_features: (i % 2 == 0)
                        .then(|| (0..n_in).map(|_| rng.gen_range(-1.0..1.0)).collect()),
                    ligands,
                }
            })
            .collect();
        TrainBatch { assays }
    }

    fn random_params(rng: &mut StdRng, n_in: usize, n_out: usize, hidden: usize) -> ModelParams {
        ModelParams::init(n_in, n_out, hidden, Curvature::default(), 0.2, 0.6, rng)
    }

    /// Minimum distance from every hinge/clamp/branch boundary the forward
    /// pass crosses, so FD test batches can be chosen away from kinks.
    fn kink_clearance(batch: &TrainBatch, params: &ModelParams, cfg: &BucketConfig) -> f64 {
        let c = params.curvature;
        let mut clearance = f64::INFINITY;
        for assay in &batch.assays {
            let pocket = embed(&assay.pocket_features, &params.pocket_head, c).unwrap();
            let pocket_tangent = params.pocket_head.forward(&assay.pocket_features).unwrap();
            let t_norm = pocket_tangent.iter().map(|x| x * x).sum::<f64>().sqrt();
            clearance = clearance.min(t_norm); // sqrt kink at 0
            let aperture_arg =
                2.0 * cfg.base_radius / (c.sqrt_kappa() * pocket.spatial_norm());
            clearance = clearance.min((aperture_arg - 1.0).abs()); // asin clamp
            let omega = half_aperture(&pocket, cfg.base_radius, c).unwrap();
            for ligand in &assay.ligands {
                let point = embed(&ligand.features, &params.ligand_head, c).unwrap();
                let lig_tangent = params.ligand_head.forward(&ligand.features).unwrap();
                let norm = lig_tangent.iter().map(|x| x * x).sum::<f64>().sqrt();
                clearance = clearance.min(norm);
                let d = lorentz_distance(&pocket, &point, c).unwrap();
                clearance = clearance.min(d); // distance kink at coincidence
                if let Some(b) = ligand.bucket {
                    let phi = exterior_angle(&pocket, &point, c).unwrap();
                    clearance = clearance.min((d - cfg.radius_cap(b)).abs());
                    let gap = phi - cfg.angle_scale(b) * omega;
                    clearance = clearance.min(gap.abs());
                    clearance = clearance.min((gap + 0.1).abs()); // margin hinge
                    // acos argument away from +-1
                    clearance = clearance.min(1.0 - (phi.cos()).abs());
                }
            }
        }
        clearance
    }

    /// Deterministically selects `count` seeds whose batches are clear of
    /// kinks by at least `min_clearance`.
    fn clear_batches(
        count: usize,
        min_clearance: f64,
        n_assays: usize,
        n_ligands: usize,
        n_in: usize,
        n_out: usize,
    ) -> Vec<(TrainBatch, ModelParams)> {
        let cfg = tiers();
        let mut out = Vec::new();
        let mut seed = 1000u64;
        while out.len() < count {
            let mut rng = StdRng::seed_from_u64(seed);
            seed += 1;
            let batch = random_batch(&mut rng, n_assays, n_ligands, n_in);
            let params = random_params(&mut rng, n_in, n_out, 0);
            if kink_clearance(&batch, &params, &cfg) > min_clearance {
                out.push((batch, params));
            }
        }
        out
    }

    #[test]
    fn tape_loss_matches_plain_forward() {
        let cfg = tiers();
        let weights = LossWeights::default();
        let mut rng = StdRng::seed_from_u64(7);
        for _ in 0..20 {
            let batch = random_batch(&mut rng, 3, 4, 6);
            let params = random_params(&mut rng, 6, 5, 0);
            let (plain, plain_breakdown) = forward_loss(&batch, &params, &weights, &cfg).unwrap();
            let (taped, breakdown, _) = grad_total_loss(&batch, &params, &weights, &cfg).unwrap();
            assert!(
                (plain - taped).abs() < 1e-10,
                "plain {plain} vs tape {taped}"
            );
            assert!((breakdown.contrastive_pocket - plain_breakdown.contrastive_pocket).abs() < 1e-10);
            assert!((breakdown.rank_pocket - plain_breakdown.rank_pocket).abs() < 1e-10);
            assert!((breakdown.cone_radial - plain_breakdown.cone_radial).abs() < 1e-10);
            assert!((breakdown.cone_angular - plain_breakdown.cone_angular).abs() < 1e-10);
            assert!((breakdown.angular_margin - plain_breakdown.angular_margin).abs() < 1e-10);
            assert!((breakdown.heterogeneity - plain_breakdown.heterogeneity).abs() < 1e-10);
        }
    }

    #[test]
    fn all_zero_weights_give_zero_gradients() {
        let cfg = tiers();
        let weights = LossWeights {
            alpha_poc: 1.0,
            alpha_seq: 0.0,
            lambda_rank: 0.0,
            gamma_cone: 0.0,
            lambda_rad: 0.0,
            lambda_ang_cone: 0.0,
            lambda_ang_reg: 0.0,
            lambda_het: 0.0,
            margin: 0.0,
            affinity_threshold: -1e300,
        };
        // alpha_poc stays positive to satisfy validation, but a batch with no
        // actives has no contrastive signal either.
        let mut rng = StdRng::seed_from_u64(8);
        let mut batch = random_batch(&mut rng, 2, 3, 4);
        for assay in &mut batch.assays {
            for ligand in &mut assay.ligands {
                ligand.active = false;
            }
        }
        let params = random_params(&mut rng, 4, 3, 0);
        let (loss, _, bundle) = grad_total_loss(&batch, &params, &weights, &cfg).unwrap();
        assert_eq!(loss, 0.0);
        assert!(bundle.flatten().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn finite_differences_validate_gradients() {
        let cfg = tiers();
        let weights = LossWeights::default();
        for (batch, params) in clear_batches(5, 5e-3, 3, 4, 8, 8) {
            let err = finite_diff_check(&batch, &params, &weights, &cfg, 1e-4).unwrap();
            assert!(err < 1e-4, "relative FD error {err}");
        }
    }

    #[test]
    fn finite_differences_validate_hidden_layer_gradients() {
        let cfg = tiers();
        let weights = LossWeights::default();
        let mut seed = 5000u64;
        let (batch, params) = loop {
            let mut rng = StdRng::seed_from_u64(seed);
            seed += 1;
            let batch = random_batch(&mut rng, 2, 3, 5);
            let params = random_params(&mut rng, 5, 4, 3);
            if kink_clearance(&batch, &params, &cfg) > 5e-3 {
                break (batch, params);
            }
        };
        let err = finite_diff_check(&batch, &params, &weights, &cfg, 1e-4).unwrap();
        assert!(err < 1e-4, "relative FD error with hidden layer: {err}");
    }

    #[test]
    fn finite_differences_validate_learned_tau() {
        let cfg = tiers();
        let weights = LossWeights::default();
        let mut seed = 9000u64;
        let (batch, mut params) = loop {
            let mut rng = StdRng::seed_from_u64(seed);
            seed += 1;
            let batch = random_batch(&mut rng, 2, 3, 5);
            let params = random_params(&mut rng, 5, 4, 0);
            if kink_clearance(&batch, &params, &cfg) > 5e-3 {
                break (batch, params);
            }
        };
        params.learn_tau = true;
        let err = finite_diff_check(&batch, &params, &weights, &cfg, 1e-4).unwrap();
        assert!(err < 1e-4, "relative FD error with learned tau: {err}");
    }

    #[test]
    fn corrupted_gradient_is_detected() {
        let cfg = tiers();
        let weights = LossWeights::default();
        let (batch, params) = clear_batches(1, 5e-3, 3, 4, 8, 8).pop().unwrap();
        let (_, _, bundle) = grad_total_loss(&batch, &params, &weights, &cfg).unwrap();
        let mut corrupted = bundle.flatten();
        // Double the largest entry; relative error at that entry becomes ~0.5.
        let (idx, _) = corrupted
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).unwrap())
            .unwrap();
        corrupted[idx] *= 2.0;
        let at = params.flatten_trainable();
        let f = |flat: &[f64]| {
            let mut p = params.clone();
            p.set_trainable(flat);
            forward_loss(&batch, &p, &weights, &cfg).map(|(l, _)| l).unwrap()
        };
        let err = max_relative_fd_error(f, &at, &corrupted, 1e-4);
        assert!(err > 0.3, "corrupted gradient slipped through: {err}");
    }

    #[test]
    fn quadratic_toy_loss_fd_is_exact() {
        // ||W x||^2 is quadratic, so central differences are exact up to
        // round-off.
        let x = [0.7, -0.3];
        let w = Matrix::from_vec(2, 2, vec![0.5, 1.0, -0.25, 0.75]).unwrap();
        let f = |flat: &[f64]| {
            let m = Matrix::from_vec(2, 2, flat.to_vec()).unwrap();
            let y = m.affine(&x, &[0.0, 0.0]);
            y.iter().map(|v| v * v).sum::<f64>()
        };
        // Analytic gradient: d/dW[r,c] = 2 y_r x_c.
        let y = w.affine(&x, &[0.0, 0.0]);
        let analytic = vec![
            2.0 * y[0] * x[0],
            2.0 * y[0] * x[1],
            2.0 * y[1] * x[0],
            2.0 * y[1] * x[1],
        ];
        let err = max_relative_fd_error(f, w.data(), &analytic, 1e-4);
        assert!(err < 1e-10, "quadratic FD error {err}");
    }

    #[test]
    fn batch_permutation_leaves_gradients_unchanged() {
        let cfg = tiers();
        let weights = LossWeights::default();
        let mut rng = StdRng::seed_from_u64(77);
        let batch = random_batch(&mut rng, 4, 3, 5);
        let params = random_params(&mut rng, 5, 4, 0);
        let (loss_a, _, grad_a) = grad_total_loss(&batch, &params, &weights, &cfg).unwrap();
        let mut permuted = batch.clone();
        permuted.assays.swap(0, 3);
        permuted.assays.swap(1, 2);
        let (loss_b, _, grad_b) = grad_total_loss(&permuted, &params, &weights, &cfg).unwrap();
        assert!((loss_a - loss_b).abs() < 1e-10);
        for (a, b) in grad_a.flatten().iter().zip(grad_b.flatten()) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn gradients_vanish_at_symmetric_stationary_point() {
        // All-zero heads put every embedding at the origin... which is not
        // allowed for cone terms; disable them and check the contrastive
        // gradient alone vanishes under full symmetry: every logit is equal,
        // every softmax uniform, and positives are symmetric across rows.
        let cfg = tiers();
        let weights = LossWeights {
            gamma_cone: 0.0,
            lambda_ang_reg: 0.0,
            lambda_het: 0.0,
            lambda_rank: 0.0,
            alpha_seq: 0.0,
            ..LossWeights::default()
        };
        let n_in = 3;
        let mut params = {
            let mut rng = StdRng::seed_from_u64(1);
            random_params(&mut rng, n_in, 2, 0)
        };
        for head in [&mut params.pocket_head, &mut params.ligand_head, &mut params.sequence_head] {
            head.weight.data_mut().iter_mut().for_each(|v| *v = 0.0);
            head.bias.iter_mut().for_each(|v| *v = 0.0);
        }
        let assay = |id: &str, f: f64| BatchAssay {
            assay_id: id.into(),
            pocket_features: vec![f; n_in],
            sequence_features: None,
            ligands: vec![
                BatchLigand { features: vec![f; n_in], active: true, affinity: None, bucket: None },
                BatchLigand { features: vec![-f; n_in], active: false, affinity: None, bucket: None },
            ],
        };
        let batch = TrainBatch { assays: vec![assay("a", 1.0), assay("b", -1.0)] };
        let (_, _, bundle) = grad_total_loss(&batch, &params, &weights, &cfg).unwrap();
        for g in bundle.flatten() {
            assert!(g.abs() < 1e-12, "gradient entry {g} at symmetric point");
        }
    }
}
