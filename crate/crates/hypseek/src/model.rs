//! Projection heads, the embedding pipeline (affine map, tangent at the
//! origin, exponential map), the plain-`f64` forward pass of the training
//! objective, and the checkpoint format.
//!
//! The forward pass here composes the [`crate::losses`] functions directly
//! and is the reference the autodiff route in [`crate::autodiff`] is checked
//! against.

use crate::geometry::{exp_map_origin, Curvature, GeometryError, LorentzPoint, TangentAtOrigin};
use crate::losses::{
    angular_margin_reg, cone_loss, contrastive_loss, heterogeneity_reg, listwise_rank_loss,
    total_loss, ActiveSet, BucketConfig, LogitMatrix, LossBreakdown, LossError, LossWeights,
};
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

/// Tangent norms past this raise a range error instead of overflowing the
/// hyperbolic lift.
pub const TANGENT_NORM_LIMIT: f64 = 20.0;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("tangent norm {norm:.3} exceeds the supported range ({TANGENT_NORM_LIMIT})")]
    TangentOutOfRange { norm: f64 },
    #[error("non-finite value in {term}")]
    NonFinite { term: String },
    #[error("empty batch")]
    EmptyBatch,
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, ModelError> {
        if data.len() != rows * cols {
            return Err(ModelError::Dimension { expected: rows * cols, got: data.len() });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// `self * x + b`.
    pub fn affine(&self, x: &[f64], b: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(b.len(), self.rows);
        (0..self.rows)
            .map(|r| {
                let mut acc = b[r];
                for (w, xi) in self.row(r).iter().zip(x) {
                    acc += w * xi;
                }
                acc
            })
            .collect()
    }
}

/// Optional pre-projection layer with tanh activation.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenLayer {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

/// Affine projection head: `W x + b`, optionally preceded by one
/// tanh-activated hidden layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionHead {
    pub hidden: Option<HiddenLayer>,
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl ProjectionHead {
    pub fn n_in(&self) -> usize {
        match &self.hidden {
            Some(h) => h.weight.cols(),
            None => self.weight.cols(),
        }
    }

    pub fn n_out(&self) -> usize {
        self.weight.rows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden.as_ref().map_or(0, |h| h.weight.rows())
    }

    /// Applies the head to a feature vector, yielding a tangent-space vector.
    pub fn forward(&self, features: &[f64]) -> Result<Vec<f64>, ModelError> {
        if features.len() != self.n_in() {
            return Err(ModelError::Dimension { expected: self.n_in(), got: features.len() });
        }
        let out = match &self.hidden {
            Some(h) => {
                let mut act = h.weight.affine(features, &h.bias);
                for v in &mut act {
                    *v = v.tanh();
                }
                self.weight.affine(&act, &self.bias)
            }
            None => self.weight.affine(features, &self.bias),
        };
        Ok(out)
    }

    /// Shape-congruent head filled with zeros.
    pub fn zeros_like(&self) -> Self {
        Self {
            hidden: self.hidden.as_ref().map(|h| HiddenLayer {
                weight: Matrix::zeros(h.weight.rows(), h.weight.cols()),
                bias: vec![0.0; h.bias.len()],
            }),
            weight: Matrix::zeros(self.weight.rows(), self.weight.cols()),
            bias: vec![0.0; self.bias.len()],
        }
    }

    pub fn param_count(&self) -> usize {
        let hidden = self
            .hidden
            .as_ref()
            .map_or(0, |h| h.weight.data().len() + h.bias.len());
        hidden + self.weight.data().len() + self.bias.len()
    }

    fn push_flat(&self, out: &mut Vec<f64>) {
        if let Some(h) = &self.hidden {
            out.extend_from_slice(h.weight.data());
            out.extend_from_slice(&h.bias);
        }
        out.extend_from_slice(self.weight.data());
        out.extend_from_slice(&self.bias);
    }

    fn read_flat(&mut self, flat: &[f64], cursor: &mut usize) {
        let mut take = |n: usize, cursor: &mut usize| {
            let s = &flat[*cursor..*cursor + n];
            *cursor += n;
            s.to_vec()
        };
        if let Some(h) = &mut self.hidden {
            let n = h.weight.data().len();
            h.weight.data_mut().copy_from_slice(&take(n, cursor));
            let n = h.bias.len();
            h.bias.copy_from_slice(&take(n, cursor));
        }
        let n = self.weight.data().len();
        self.weight.data_mut().copy_from_slice(&take(n, cursor));
        let n = self.bias.len();
        self.bias.copy_from_slice(&take(n, cursor));
    }
}

/// The trainable state: three projection heads plus curvature and
/// temperature. Curvature is fixed during training; `tau` is trainable only
/// when `learn_tau` is set (it is optimized as `log tau` to stay positive).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub pocket_head: ProjectionHead,
    pub ligand_head: ProjectionHead,
    pub sequence_head: ProjectionHead,
    pub curvature: Curvature,
    pub tau: f64,
    pub learn_tau: bool,
}

impl ModelParams {
    /// Seeded Gaussian initialization: entries `~ N(0, (scale / sqrt(n_in))^2)`.
    pub fn init<R: rand::Rng>(
        n_in: usize,
        n_out: usize,
        hidden_dim: usize,
        curvature: Curvature,
        tau: f64,
        init_scale: f64,
        rng: &mut R,
    ) -> Self {
        use rand_distr::{Distribution, StandardNormal};
        let mut head = |n_in: usize, n_out: usize, hidden_dim: usize| {
            let mut fill = |rows: usize, cols: usize| {
                let std = init_scale / (cols as f64).sqrt();
                let data: Vec<f64> = (0..rows * cols)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(rng);
                        z * std
                    })
                    .collect();
                Matrix::from_vec(rows, cols, data).expect("sized data")
            };
            let hidden = (hidden_dim > 0).then(|| HiddenLayer {
                weight: fill(hidden_dim, n_in),
                bias: vec![0.0; hidden_dim],
            });
            let in_dim = if hidden_dim > 0 { hidden_dim } else { n_in };
            ProjectionHead {
                hidden,
                weight: fill(n_out, in_dim),
                bias: vec![0.0; n_out],
            }
        };
        Self {
            pocket_head: head(n_in, n_out, hidden_dim),
            ligand_head: head(n_in, n_out, hidden_dim),
            sequence_head: head(n_in, n_out, hidden_dim),
            curvature,
            tau,
            learn_tau: false,
        }
    }

    pub fn n_in(&self) -> usize {
        self.pocket_head.n_in()
    }

    pub fn n_out(&self) -> usize {
        self.pocket_head.n_out()
    }

    pub fn heads(&self) -> [&ProjectionHead; 3] {
        [&self.pocket_head, &self.ligand_head, &self.sequence_head]
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.heads().iter().map(|h| h.param_count()).sum::<usize>()
            + usize::from(self.learn_tau)
    }

    /// Trainable parameters in a fixed flat order: pocket, ligand, sequence
    /// heads (hidden weight, hidden bias, weight, bias each), then `log tau`
    /// when it is trainable.
    pub fn flatten_trainable(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.trainable_count());
        for head in self.heads() {
            head.push_flat(&mut out);
        }
        if self.learn_tau {
            out.push(self.tau.ln());
        }
        out
    }

    /// Writes a flat parameter vector (same order as [`flatten_trainable`])
    /// back into the heads.
    pub fn set_trainable(&mut self, flat: &[f64]) {
        debug_assert_eq!(flat.len(), self.trainable_count());
        let mut cursor = 0usize;
        self.pocket_head.read_flat(flat, &mut cursor);
        self.ligand_head.read_flat(flat, &mut cursor);
        self.sequence_head.read_flat(flat, &mut cursor);
        if self.learn_tau {
            self.tau = flat[cursor].exp();
        }
    }
}

/// Gradients, shape-congruent with the trainable fields of [`ModelParams`].
#[derive(Debug, Clone)]
pub struct GradientBundle {
    pub pocket_head: ProjectionHead,
    pub ligand_head: ProjectionHead,
    pub sequence_head: ProjectionHead,
    /// Derivative with respect to `log tau`; present only when trainable.
    pub log_tau: Option<f64>,
}

impl GradientBundle {
    pub fn zeros_like(params: &ModelParams) -> Self {
        Self {
            pocket_head: params.pocket_head.zeros_like(),
            ligand_head: params.ligand_head.zeros_like(),
            sequence_head: params.sequence_head.zeros_like(),
            log_tau: params.learn_tau.then_some(0.0),
        }
    }

    pub fn from_flat(params: &ModelParams, flat: &[f64]) -> Self {
        let mut bundle = Self::zeros_like(params);
        let mut cursor = 0usize;
        bundle.pocket_head.read_flat(flat, &mut cursor);
        bundle.ligand_head.read_flat(flat, &mut cursor);
        bundle.sequence_head.read_flat(flat, &mut cursor);
        if params.learn_tau {
            bundle.log_tau = Some(flat[cursor]);
        }
        bundle
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.pocket_head.push_flat(&mut out);
        self.ligand_head.push_flat(&mut out);
        self.sequence_head.push_flat(&mut out);
        if let Some(g) = self.log_tau {
            out.push(g);
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.flatten().iter().all(|g| g.is_finite())
    }
}

/// Applies a head and lifts the result onto the hyperboloid.
pub fn embed(
    features: &[f64],
    head: &ProjectionHead,
    curvature: Curvature,
) -> Result<LorentzPoint, ModelError> {
    let tangent = head.forward(features)?;
    lift_tangent(&tangent, curvature)
}

fn lift_tangent(tangent: &[f64], curvature: Curvature) -> Result<LorentzPoint, ModelError> {
    let norm = tangent.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !norm.is_finite() {
        return Err(ModelError::NonFinite { term: "tangent".into() });
    }
    if norm > TANGENT_NORM_LIMIT {
        return Err(ModelError::TangentOutOfRange { norm });
    }
    let v = TangentAtOrigin::new(tangent.to_vec())?;
    Ok(exp_map_origin(&v, curvature))
}

/// One ligand inside a training batch.
#[derive(Debug, Clone)]
pub struct BatchLigand {
    pub features: Vec<f64>,
    pub active: bool,
    /// Normalized affinity (larger = stronger), when measured.
    pub affinity: Option<f64>,
    /// Affinity tier (0 = strongest); assigned by the trainer for ligands
    /// with affinities.
    pub bucket: Option<usize>,
}

/// One assay inside a training batch, with the pocket already sampled.
#[derive(Debug, Clone)]
pub struct BatchAssay {
    pub assay_id: String,
    pub pocket_features: Vec<f64>,
    pub sequence_features: Option<Vec<f64>>,
    pub ligands: Vec<BatchLigand>,
}

/// A batch of assays; ligands from every assay form the shared in-batch
/// candidate pool (non-positive columns act as negatives).
#[derive(Debug, Clone)]
pub struct TrainBatch {
    pub assays: Vec<BatchAssay>,
}

impl TrainBatch {
    pub fn n_ligands(&self) -> usize {
        self.assays.iter().map(|a| a.ligands.len()).sum()
    }

    pub fn validate(&self, n_in: usize) -> Result<(), ModelError> {
        if self.assays.is_empty() || self.n_ligands() == 0 {
            return Err(ModelError::EmptyBatch);
        }
        for assay in &self.assays {
            if assay.pocket_features.len() != n_in {
                return Err(ModelError::Dimension { expected: n_in, got: assay.pocket_features.len() });
            }
            if assay.pocket_features.iter().any(|x| !x.is_finite()) {
                return Err(ModelError::NonFinite { term: format!("pocket features of {}", assay.assay_id) });
            }
            if let Some(seq) = &assay.sequence_features {
                if seq.len() != n_in {
                    return Err(ModelError::Dimension { expected: n_in, got: seq.len() });
                }
            }
            for ligand in &assay.ligands {
                if ligand.features.len() != n_in {
                    return Err(ModelError::Dimension { expected: n_in, got: ligand.features.len() });
                }
                if ligand.features.iter().any(|x| !x.is_finite()) {
                    return Err(ModelError::NonFinite { term: format!("ligand features in {}", assay.assay_id) });
                }
            }
        }
        Ok(())
    }

    /// Global column index of each assay's first ligand.
    pub fn column_offsets(&self) -> Vec<usize> {
        let mut offsets = Vec::with_capacity(self.assays.len());
        let mut acc = 0;
        for assay in &self.assays {
            offsets.push(acc);
            acc += assay.ligands.len();
        }
        offsets
    }

    /// Per-assay ligand orderings for the listwise loss: indices of
    /// affinity-labeled ligands sorted by descending affinity, ties keeping
    /// input order.
    pub fn rank_orders(&self) -> Vec<Vec<usize>> {
        self.assays
            .iter()
            .map(|assay| {
                let mut labeled: Vec<usize> = (0..assay.ligands.len())
                    .filter(|&j| assay.ligands[j].affinity.is_some())
                    .collect();
                labeled.sort_by(|&a, &b| {
                    let va = assay.ligands[a].affinity.unwrap();
                    let vb = assay.ligands[b].affinity.unwrap();
                    vb.partial_cmp(&va).unwrap_or(std::cmp::Ordering::Equal)
                });
                labeled
            })
            .collect()
    }
}

/// Plain-`f64` forward pass of the full training objective.
///
/// Embeds pockets, ligands and (when present) sequences, builds the
/// pocket-tower and sequence-tower logit matrices over the shared in-batch
/// ligand pool, and assembles every loss term via [`crate::losses`].
pub fn forward_loss(
    batch: &TrainBatch,
    params: &ModelParams,
    weights: &LossWeights,
    tiers: &BucketConfig,
) -> Result<(f64, LossBreakdown), ModelError> {
    batch.validate(params.n_in())?;
    let curvature = params.curvature;
    let n_cols = batch.n_ligands();
    let offsets = batch.column_offsets();

    // Embed everything once.
    let pocket_points: Vec<LorentzPoint> = batch
        .assays
        .iter()
        .map(|a| embed(&a.pocket_features, &params.pocket_head, curvature))
        .collect::<Result<_, _>>()?;
    let ligand_points: Vec<Vec<LorentzPoint>> = batch
        .assays
        .iter()
        .map(|a| {
            a.ligands
                .iter()
                .map(|l| embed(&l.features, &params.ligand_head, curvature))
                .collect::<Result<_, _>>()
        })
        .collect::<Result<_, _>>()?;
    let sequence_points: Vec<Option<LorentzPoint>> = batch
        .assays
        .iter()
        .map(|a| {
            a.sequence_features
                .as_ref()
                .map(|s| embed(s, &params.sequence_head, curvature))
                .transpose()
        })
        .collect::<Result<_, _>>()?;

    let flat_ligands: Vec<&LorentzPoint> = ligand_points.iter().flatten().collect();

    let inner_matrix = |queries: &[&LorentzPoint]| -> Vec<f64> {
        let mut values = Vec::with_capacity(queries.len() * n_cols);
        for q in queries {
            for l in &flat_ligands {
                let mut acc = 0.0;
                for (a, b) in q.spatial().iter().zip(l.spatial()) {
                    acc += a * b;
                }
                values.push(acc);
            }
        }
        values
    };

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

    // Pocket tower.
    let pocket_refs: Vec<&LorentzPoint> = pocket_points.iter().collect();
    let pocket_logits =
        LogitMatrix::from_inner_products(batch.assays.len(), n_cols, &inner_matrix(&pocket_refs), params.tau)?;
    let contrastive_pocket = contrastive_loss(&pocket_logits, &positives)?;

    let rank_orders = batch.rank_orders();
    let tower_rank = |logits: &LogitMatrix, row_of_assay: &dyn Fn(usize) -> Option<usize>| {
        let mut total = 0.0;
        for (i, order) in rank_orders.iter().enumerate() {
            let Some(row) = row_of_assay(i) else { continue };
            if order.is_empty() {
                continue;
            }
            let scores: Vec<f64> = order.iter().map(|&j| logits.get(row, offsets[i] + j)).collect();
            total += listwise_rank_loss(&scores)?;
        }
        Ok::<f64, LossError>(total)
    };
    let rank_pocket = tower_rank(&pocket_logits, &|i| Some(i))?;

    // Sequence tower over the assays that have sequence features.
    let seq_rows: Vec<usize> = (0..batch.assays.len())
        .filter(|&i| sequence_points[i].is_some())
        .collect();
    let (contrastive_sequence, rank_sequence) = if seq_rows.is_empty() {
        (None, None)
    } else {
        let seq_refs: Vec<&LorentzPoint> =
            seq_rows.iter().map(|&i| sequence_points[i].as_ref().unwrap()).collect();
        let seq_logits =
            LogitMatrix::from_inner_products(seq_rows.len(), n_cols, &inner_matrix(&seq_refs), params.tau)?;
        let seq_positives: Vec<Vec<usize>> =
            seq_rows.iter().map(|&i| positives[i].clone()).collect();
        let cont = contrastive_loss(&seq_logits, &seq_positives)?;
        let row_of = |i: usize| seq_rows.iter().position(|&r| r == i);
        let rank = tower_rank(&seq_logits, &row_of)?;
        (Some(cont), Some(rank))
    };

    // Cone terms run on the pocket tower over bucketed (affinity-labeled)
    // ligands only.
    let bucketed_points: Vec<Vec<LorentzPoint>> = batch
        .assays
        .iter()
        .enumerate()
        .map(|(i, assay)| {
            assay
                .ligands
                .iter()
                .enumerate()
                .filter(|(_, l)| l.bucket.is_some())
                .map(|(j, _)| ligand_points[i][j].clone())
                .collect()
        })
        .collect();
    let buckets: Vec<Vec<usize>> = batch
        .assays
        .iter()
        .map(|assay| assay.ligands.iter().filter_map(|l| l.bucket).collect())
        .collect();
    let cone = cone_loss(&pocket_points, &bucketed_points, &buckets, tiers, weights, curvature)?;
    let angular_margin = angular_margin_reg(
        &pocket_points,
        &bucketed_points,
        &buckets,
        tiers,
        weights.margin,
        curvature,
    )?;

    // Heterogeneity over each assay's affinity-labeled actives.
    let active_sets: Vec<ActiveSet> = batch
        .assays
        .iter()
        .enumerate()
        .map(|(i, assay)| {
            let mut logits = Vec::new();
            let mut affinities = Vec::new();
            for (j, ligand) in assay.ligands.iter().enumerate() {
                if ligand.active {
                    if let Some(v) = ligand.affinity {
                        logits.push(pocket_logits.get(i, offsets[i] + j));
                        affinities.push(v);
                    }
                }
            }
            ActiveSet { logits, affinities }
        })
        .collect();
    let heterogeneity = heterogeneity_reg(&active_sets, weights.affinity_threshold);

    let breakdown = LossBreakdown {
        contrastive_pocket,
        rank_pocket,
        contrastive_sequence,
        rank_sequence,
        cone_radial: cone.radial,
        cone_angular: cone.angular,
        angular_margin,
        heterogeneity,
    };
    let total = total_loss(&breakdown, weights)?;
    Ok((total, breakdown))
}

// ---------------------------------------------------------------------------
// Checkpoint format
// ---------------------------------------------------------------------------

/// Magic bytes opening a checkpoint file.
pub const CHECKPOINT_MAGIC: &[u8; 6] = b"HYPSK1";
/// Current checkpoint container version.
pub const CHECKPOINT_VERSION: u32 = 1;

fn push_f64(buf: &mut Vec<u8>, v: f64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn push_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        if self.pos + n > self.data.len() {
            return Err(ModelError::Checkpoint("unexpected end of file".into()));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, ModelError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Serializes the parameters: magic, version, then a CRC-guarded payload of
/// kappa, tau, head dimensions and the row-major little-endian head data in
/// pocket/ligand/sequence order.
pub fn checkpoint_bytes(params: &ModelParams) -> Vec<u8> {
    let mut payload = Vec::new();
    push_f64(&mut payload, params.curvature.kappa());
    push_f64(&mut payload, params.tau);
    push_u32(&mut payload, params.n_in() as u32);
    push_u32(&mut payload, params.n_out() as u32);
    push_u32(&mut payload, params.pocket_head.hidden_dim() as u32);
    for head in params.heads() {
        if let Some(h) = &head.hidden {
            for v in h.weight.data() {
                push_f64(&mut payload, *v);
            }
            for v in &h.bias {
                push_f64(&mut payload, *v);
            }
        }
        for v in head.weight.data() {
            push_f64(&mut payload, *v);
        }
        for v in &head.bias {
            push_f64(&mut payload, *v);
        }
    }
    let crc = crc32fast::hash(&payload);
    let mut out = Vec::with_capacity(6 + 4 + payload.len() + 4);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    push_u32(&mut out, CHECKPOINT_VERSION);
    out.extend_from_slice(&payload);
    push_u32(&mut out, crc);
    out
}

/// Parses a checkpoint produced by [`checkpoint_bytes`]. Round-trips
/// bit-exactly.
pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<ModelParams, ModelError> {
    if bytes.len() < 14 {
        return Err(ModelError::Checkpoint("file too short".into()));
    }
    if &bytes[..6] != CHECKPOINT_MAGIC {
        return Err(ModelError::Checkpoint("bad magic".into()));
    }
    let version = u32::from_le_bytes(bytes[6..10].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(ModelError::Checkpoint(format!(
            "unsupported version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let payload = &bytes[10..bytes.len() - 4];
    let stored_crc = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    let crc = crc32fast::hash(payload);
    if crc != stored_crc {
        return Err(ModelError::Checkpoint(format!(
            "CRC mismatch: stored {stored_crc:#010x}, computed {crc:#010x}"
        )));
    }
    let mut cur = Cursor { data: payload, pos: 0 };
    let kappa = cur.f64()?;
    let tau = cur.f64()?;
    let n_in = cur.u32()? as usize;
    let n_out = cur.u32()? as usize;
    let hidden_dim = cur.u32()? as usize;
    if n_in == 0 || n_out == 0 {
        return Err(ModelError::Checkpoint("zero head dimension".into()));
    }
    let curvature = Curvature::new(kappa)
        .map_err(|e| ModelError::Checkpoint(format!("invalid curvature: {e}")))?;
    let mut read_head = |cur: &mut Cursor| -> Result<ProjectionHead, ModelError> {
        let hidden = if hidden_dim > 0 {
            let mut data = Vec::with_capacity(hidden_dim * n_in);
            for _ in 0..hidden_dim * n_in {
                data.push(cur.f64()?);
            }
            let mut bias = Vec::with_capacity(hidden_dim);
            for _ in 0..hidden_dim {
                bias.push(cur.f64()?);
            }
            Some(HiddenLayer { weight: Matrix::from_vec(hidden_dim, n_in, data)?, bias })
        } else {
            None
        };
        let in_dim = if hidden_dim > 0 { hidden_dim } else { n_in };
        let mut data = Vec::with_capacity(n_out * in_dim);
        for _ in 0..n_out * in_dim {
            data.push(cur.f64()?);
        }
        let mut bias = Vec::with_capacity(n_out);
        for _ in 0..n_out {
            bias.push(cur.f64()?);
        }
        Ok(ProjectionHead { hidden, weight: Matrix::from_vec(n_out, in_dim, data)?, bias })
    };
    let pocket_head = read_head(&mut cur)?;
    let ligand_head = read_head(&mut cur)?;
    let sequence_head = read_head(&mut cur)?;
    if cur.pos != payload.len() {
        return Err(ModelError::Checkpoint("trailing bytes in payload".into()));
    }
    Ok(ModelParams {
        pocket_head,
        ligand_head,
        sequence_head,
        curvature,
        tau,
        learn_tau: false,
    })
}

/// Writes a checkpoint atomically (temp file in the same directory, then
/// rename).
pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<(), ModelError> {
    let bytes = checkpoint_bytes(params);
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name().and_then(|n| n.to_str()).unwrap_or("checkpoint")
    ));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams, ModelError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    checkpoint_from_bytes(&bytes)
}

/// CRC-32 of an entire checkpoint file, used to fingerprint ranked outputs.
pub fn checkpoint_hash(path: &Path) -> Result<u32, ModelError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    Ok(crc32fast::hash(&bytes))
}
