//! Assay-level batching, Adam optimization, seeded determinism and training
//! telemetry.
//!
//! Every random choice (head initialization, per-epoch assay shuffles,
//! pocket sampling) is drawn from labeled streams of one master seed, so a
//! run is reproducible from `(inputs, config)` alone and resuming from a
//! saved state at an epoch boundary replays the exact remaining epochs.

use crate::autodiff::grad_total_loss;
use crate::data::{validate_features, Assay, DataError, FeatureStore};
use crate::losses::{assign_buckets, BucketConfig, LossBreakdown, LossWeights};
use crate::model::{
    checkpoint_bytes, checkpoint_from_bytes, BatchAssay, BatchLigand, GradientBundle, ModelError,
    ModelParams, TrainBatch,
};
use crate::rng::stream;
use rand::Rng;
use std::io::Write;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] crate::losses::LossError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("training state: {0}")]
    State(String),
}

/// Affinity-tier knobs as configured: the thresholds apply to the negated
/// normalized affinity (so bucket 0 is the strongest tier); when empty, each
/// assay gets quartile thresholds computed from its own ligands.
#[derive(Debug, Clone, PartialEq)]
pub struct TierSpec {
    pub thresholds: Vec<f64>,
    pub base_radius: f64,
    pub radius_step: f64,
    pub base_angle_scale: f64,
    pub angle_step: f64,
}

impl Default for TierSpec {
    fn default() -> Self {
        Self {
            thresholds: Vec::new(),
            base_radius: 0.1,
            radius_step: 0.5,
            base_angle_scale: 1.0,
            angle_step: 0.2,
        }
    }
}

impl TierSpec {
    /// Tier geometry (caps and aperture base) used by the cone terms. The
    /// thresholds member is only meaningful for bucket assignment; when the
    /// spec has no explicit thresholds, per-assay quartiles yield at most
    /// three tiers, matching the placeholder here.
    pub fn cap_config(&self) -> BucketConfig {
        let thresholds = if self.thresholds.is_empty() {
            vec![0.0, 1.0, 2.0]
        } else {
            self.thresholds.clone()
        };
        BucketConfig {
            thresholds,
            base_radius: self.base_radius,
            radius_step: self.radius_step,
            base_angle_scale: self.base_angle_scale,
            angle_step: self.angle_step,
        }
    }
}

/// Optimizer, schedule and model-shape configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub epochs: usize,
    pub batch_assays: usize,
    pub seed: u64,
    pub grad_clip: f64,
    pub cosine_lr: bool,
    pub n_out: usize,
    pub hidden_dim: usize,
    pub kappa: f64,
    pub tau: f64,
    pub init_scale: f64,
    pub learn_tau: bool,
    pub weights: LossWeights,
    pub tiers: TierSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            epochs: 50,
            batch_assays: 8,
            seed: 0,
            grad_clip: 10.0,
            cosine_lr: false,
            n_out: 32,
            hidden_dim: 0,
            kappa: 1.0,
            tau: 0.07,
            init_scale: 0.5,
            learn_tau: false,
            weights: LossWeights::default(),
            tiers: TierSpec::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let positive = [
            ("learning_rate", self.learning_rate),
            ("adam_eps", self.adam_eps),
            ("grad_clip", self.grad_clip),
            ("kappa", self.kappa),
            ("tau", self.tau),
            ("init_scale", self.init_scale),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(TrainError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(TrainError::Config(format!("{name} must lie in (0, 1), got {v}")));
            }
        }
        if self.epochs == 0 {
            return Err(TrainError::Config("epochs must be at least 1".into()));
        }
        if self.batch_assays == 0 {
            return Err(TrainError::Config("batch_assays must be at least 1".into()));
        }
        if self.n_out == 0 {
            return Err(TrainError::Config("n_out must be at least 1".into()));
        }
        self.weights.validate()?;
        self.tiers.cap_config().validate()?;
        Ok(())
    }
}

/// Optimizer state: parameters plus Adam moments and the step counter.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: ModelParams,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step: u64,
    pub next_epoch: usize,
    pub master_seed: u64,
}

impl TrainState {
    pub fn new(params: ModelParams, master_seed: u64) -> Self {
        let n = params.trainable_count();
        Self {
            params,
            first_moment: vec![0.0; n],
            second_moment: vec![0.0; n],
            step: 0,
            next_epoch: 0,
            master_seed,
        }
    }
}

/// One bias-corrected Adam update. Gradients must be finite; the step
/// counter advances even for all-zero gradients.
pub fn adam_step(
    state: &mut TrainState,
    grads: &GradientBundle,
    config: &TrainConfig,
    learning_rate: f64,
) -> Result<(), TrainError> {
    let flat = grads.flatten();
    if flat.iter().any(|g| !g.is_finite()) {
        return Err(TrainError::Model(ModelError::NonFinite { term: "gradient".into() }));
    }
    if flat.len() != state.first_moment.len() {
        return Err(TrainError::State(format!(
            "gradient has {} entries, state expects {}",
            flat.len(),
            state.first_moment.len()
        )));
    }
    state.step += 1;
    let t = state.step as f64;
    let (b1, b2) = (config.adam_beta1, config.adam_beta2);
    let bias1 = 1.0 - b1.powf(t);
    let bias2 = 1.0 - b2.powf(t);
    let mut params = state.params.flatten_trainable();
    for i in 0..flat.len() {
        let g = flat[i];
        state.first_moment[i] = b1 * state.first_moment[i] + (1.0 - b1) * g;
        state.second_moment[i] = b2 * state.second_moment[i] + (1.0 - b2) * g * g;
        let m_hat = state.first_moment[i] / bias1;
        let v_hat = state.second_moment[i] / bias2;
        params[i] -= learning_rate * m_hat / (v_hat.sqrt() + config.adam_eps);
    }
    state.params.set_trainable(&params);
    Ok(())
}

/// Per-epoch telemetry.
#[derive(Debug, Clone)]
pub struct EpochStats {
    pub epoch: usize,
    pub batches: usize,
    pub mean_total: f64,
    pub mean_breakdown: LossBreakdown,
    pub clip_events: usize,
}

/// Result of a training run.
#[derive(Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub epochs: Vec<EpochStats>,
    pub state: TrainState,
}

/// Header of the tab-separated loss log.
pub const LOSS_LOG_HEADER: &str =
    "epoch\tbatch\ttotal\tcont_poc\trank_poc\tcont_seq\trank_seq\tcone_rad\tcone_ang\tr_ang\tr_het";

fn log_line(epoch: usize, batch: usize, total: f64, b: &LossBreakdown) -> String {
    let f = |v: f64| format!("{v:.9e}");
    format!(
        "{epoch}\t{batch}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
        f(total),
        f(b.contrastive_pocket),
        f(b.rank_pocket),
        f(b.contrastive_sequence.unwrap_or(0.0)),
        f(b.rank_sequence.unwrap_or(0.0)),
        f(b.cone_radial),
        f(b.cone_angular),
        f(b.angular_margin),
        f(b.heterogeneity),
    )
}

/// Linear-interpolated quartiles, the default per-assay bucket thresholds.
fn quartiles(sorted: &[f64]) -> [f64; 3] {
    let q = |p: f64| {
        let idx = p * (sorted.len() - 1) as f64;
        let lo = idx.floor() as usize;
        let hi = idx.ceil() as usize;
        let frac = idx - lo as f64;
        sorted[lo] * (1.0 - frac) + sorted[hi] * frac
    };
    [q(0.25), q(0.5), q(0.75)]
}

/// Buckets for one assay's ligands (index-aligned, `None` when unlabeled).
/// Bucketing runs on the negated normalized affinity so that bucket 0 holds
/// the strongest binders.
fn assay_buckets(assay: &Assay, tiers: &TierSpec) -> Vec<Option<usize>> {
    let negated: Vec<f64> = assay
        .ligands
        .iter()
        .filter_map(|l| l.affinity)
        .map(|v| -v)
        .collect();
    if negated.is_empty() {
        return vec![None; assay.ligands.len()];
    }
    let thresholds: Vec<f64> = if tiers.thresholds.is_empty() {
        let mut sorted = negated.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut qs = quartiles(&sorted).to_vec();
        qs.dedup_by(|a, b| *a <= *b);
        qs
    } else {
        tiers.thresholds.clone()
    };
    if thresholds.is_empty() || thresholds.windows(2).any(|w| !(w[0] < w[1])) {
        // Degenerate (all affinities equal): everything in the strongest tier.
        let buckets: Vec<Option<usize>> = assay
            .ligands
            .iter()
            .map(|l| l.affinity.map(|_| 0usize))
            .collect();
        return buckets;
    }
    let cfg = BucketConfig {
        thresholds,
        base_radius: tiers.base_radius,
        radius_step: tiers.radius_step,
        base_angle_scale: tiers.base_angle_scale,
        angle_step: tiers.angle_step,
    };
    let assigned = assign_buckets(&negated, &cfg);
    let mut it = assigned.into_iter();
    assay
        .ligands
        .iter()
        .map(|l| l.affinity.map(|_| it.next().expect("one bucket per labeled ligand")))
        .collect()
}

/// Materializes a training batch: resolves features and attaches buckets.
fn build_batch(
    assays: &[&Assay],
    pocket_choice: &[usize],
    features: &FeatureStore,
    tiers: &TierSpec,
) -> Result<TrainBatch, TrainError> {
    let mut batch_assays = Vec::with_capacity(assays.len());
    for (assay, &pocket_idx) in assays.iter().zip(pocket_choice) {
        let pocket_id = &assay.pocket_feature_ids[pocket_idx];
        let pocket_features = features.resolve(pocket_id)?.to_vec();
        let sequence_features = assay
            .sequence_feature_id
            .as_ref()
            .map(|id| features.resolve(id).map(|f| f.to_vec()))
            .transpose()?;
        let buckets = assay_buckets(assay, tiers);
        let ligands = assay
            .ligands
            .iter()
            .zip(buckets)
            .map(|(l, bucket)| {
                Ok(BatchLigand {
                    features: features.resolve(&l.feature_id)?.to_vec(),
                    active: l.active,
                    affinity: l.affinity,
                    bucket,
                })
            })
            .collect::<Result<Vec<_>, TrainError>>()?;
        batch_assays.push(BatchAssay {
            assay_id: assay.assay_id.clone(),
            pocket_features,
            sequence_features,
            ligands,
        });
    }
    Ok(TrainBatch { assays: batch_assays })
}

/// Trains from scratch: seeds the heads, then runs [`run_epochs`].
pub fn train(
    assays: &[Assay],
    features: &FeatureStore,
    config: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if assays.is_empty() || assays.iter().all(|a| a.ligands.is_empty()) {
        return Err(TrainError::Config("need at least one assay with one ligand".into()));
    }
    validate_features(assays, features)?;
    let curvature = crate::geometry::Curvature::new(config.kappa)
        .map_err(|e| TrainError::Config(e.to_string()))?;
    let mut init_rng = stream(config.seed, "init", 0);
    let mut params = ModelParams::init(
        features.dim(),
        config.n_out,
        config.hidden_dim,
        curvature,
        config.tau,
        config.init_scale,
        &mut init_rng,
    );
    params.learn_tau = config.learn_tau;
    let state = TrainState::new(params, config.seed);
    if let Some(log) = log.as_deref_mut() {
        writeln!(log, "{LOSS_LOG_HEADER}")?;
    }
    run_epochs(state, assays, features, config, log)
}

/// Runs epochs `state.next_epoch .. config.epochs`; resuming a saved state
/// replays the same epoch streams an uninterrupted run would have used.
pub fn run_epochs(
    mut state: TrainState,
    assays: &[Assay],
    features: &FeatureStore,
    config: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    let mut epochs = Vec::new();
    let batches_per_epoch = assays.len().div_ceil(config.batch_assays);
    let total_steps = (config.epochs * batches_per_epoch) as f64;
    for epoch in state.next_epoch..config.epochs {
        let mut rng = stream(state.master_seed, "epoch", epoch as u64);
        // Pocket choice per assay (original order), then the shuffle.
        let pocket_choice: Vec<usize> = assays
            .iter()
            .map(|a| rng.gen_range(0..a.pocket_feature_ids.len()))
            .collect();
        let mut order: Vec<usize> = (0..assays.len()).collect();
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let mut sum_total = 0.0;
        let mut sum_breakdown = LossBreakdown::default();
        let mut seq_terms_seen = false;
        let mut clip_events = 0usize;
        let mut batches = 0usize;
        for (batch_idx, chunk) in order.chunks(config.batch_assays).enumerate() {
            let chosen: Vec<&Assay> = chunk.iter().map(|&i| &assays[i]).collect();
            let choices: Vec<usize> = chunk.iter().map(|&i| pocket_choice[i]).collect();
            let batch = build_batch(&chosen, &choices, features, &config.tiers)?;
            let (total, breakdown, mut grads) =
                grad_total_loss(&batch, &state.params, &config.weights, &config.tiers.cap_config())?;
            if !total.is_finite() {
                return Err(TrainError::Model(ModelError::NonFinite { term: "total".into() }));
            }
            // Global-norm clip.
            let mut flat = grads.flatten();
            let norm = flat.iter().map(|g| g * g).sum::<f64>().sqrt();
            if norm > config.grad_clip {
                let scale = config.grad_clip / norm;
                for g in &mut flat {
                    *g *= scale;
                }
                grads = GradientBundle::from_flat(&state.params, &flat);
                clip_events += 1;
            }
            let lr = if config.cosine_lr {
                let progress = state.step as f64 / total_steps.max(1.0);
                config.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
            } else {
                config.learning_rate
            };
            adam_step(&mut state, &grads, config, lr)?;
            if let Some(log) = log.as_deref_mut() {
                writeln!(log, "{}", log_line(epoch, batch_idx, total, &breakdown))?;
            }
            sum_total += total;
            sum_breakdown.contrastive_pocket += breakdown.contrastive_pocket;
            sum_breakdown.rank_pocket += breakdown.rank_pocket;
            if let Some(v) = breakdown.contrastive_sequence {
                seq_terms_seen = true;
                *sum_breakdown.contrastive_sequence.get_or_insert(0.0) += v;
            }
            if let Some(v) = breakdown.rank_sequence {
                *sum_breakdown.rank_sequence.get_or_insert(0.0) += v;
            }
            sum_breakdown.cone_radial += breakdown.cone_radial;
            sum_breakdown.cone_angular += breakdown.cone_angular;
            sum_breakdown.angular_margin += breakdown.angular_margin;
            sum_breakdown.heterogeneity += breakdown.heterogeneity;
            batches += 1;
        }
        let n = batches as f64;
        let mean_breakdown = LossBreakdown {
            contrastive_pocket: sum_breakdown.contrastive_pocket / n,
            rank_pocket: sum_breakdown.rank_pocket / n,
            contrastive_sequence: seq_terms_seen
                .then(|| sum_breakdown.contrastive_sequence.unwrap_or(0.0) / n),
            rank_sequence: seq_terms_seen
                .then(|| sum_breakdown.rank_sequence.unwrap_or(0.0) / n),
            cone_radial: sum_breakdown.cone_radial / n,
            cone_angular: sum_breakdown.cone_angular / n,
            angular_margin: sum_breakdown.angular_margin / n,
            heterogeneity: sum_breakdown.heterogeneity / n,
        };
        let mean_total = sum_total / n;
        if !mean_total.is_finite() {
            return Err(TrainError::Model(ModelError::NonFinite { term: "epoch mean".into() }));
        }
        epochs.push(EpochStats { epoch, batches, mean_total, mean_breakdown, clip_events });
        state.next_epoch = epoch + 1;
    }
    Ok(TrainOutcome { params: state.params.clone(), epochs, state })
}

// ---------------------------------------------------------------------------
// Training-state serialization (resume support)
// ---------------------------------------------------------------------------

const STATE_MAGIC: &[u8; 6] = b"HYPST1";
const STATE_VERSION: u32 = 1;

/// Serializes the full optimizer state. The RNG "state" is the master seed
/// plus the next epoch index, since every epoch derives a fresh labeled
/// stream.
pub fn state_bytes(state: &TrainState) -> Vec<u8> {
    let params = checkpoint_bytes(&state.params);
    let mut payload = Vec::new();
    payload.extend_from_slice(&state.master_seed.to_le_bytes());
    payload.extend_from_slice(&(state.next_epoch as u64).to_le_bytes());
    payload.extend_from_slice(&state.step.to_le_bytes());
    payload.extend_from_slice(&(params.len() as u64).to_le_bytes());
    payload.extend_from_slice(&params);
    payload.extend_from_slice(&(state.first_moment.len() as u64).to_le_bytes());
    for v in state.first_moment.iter().chain(&state.second_moment) {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    let crc = crc32fast::hash(&payload);
    let mut out = Vec::with_capacity(10 + payload.len() + 4);
    out.extend_from_slice(STATE_MAGIC);
    out.extend_from_slice(&STATE_VERSION.to_le_bytes());
    out.extend_from_slice(&payload);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn state_from_bytes(bytes: &[u8]) -> Result<TrainState, TrainError> {
    let fail = |m: &str| TrainError::State(m.to_string());
    if bytes.len() < 14 || &bytes[..6] != STATE_MAGIC {
        return Err(fail("bad magic or truncated file"));
    }
    let version = u32::from_le_bytes(bytes[6..10].try_into().unwrap());
    if version != STATE_VERSION {
        return Err(fail(&format!("unsupported version {version}")));
    }
    let payload = &bytes[10..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    if crc32fast::hash(payload) != stored {
        return Err(fail("CRC mismatch"));
    }
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8], TrainError> {
        if pos + n > payload.len() {
            return Err(TrainError::State("truncated payload".into()));
        }
        let s = &payload[pos..pos + n];
        pos += n;
        Ok(s)
    };
    let master_seed = u64::from_le_bytes(take(8)?.try_into().unwrap());
    let next_epoch = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
    let step = u64::from_le_bytes(take(8)?.try_into().unwrap());
    let params_len = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
    let params = checkpoint_from_bytes(take(params_len)?)?;
    let moments = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
    if moments != params.trainable_count() {
        return Err(fail("moment buffers do not match parameter count"));
    }
    let mut first = Vec::with_capacity(moments);
    for _ in 0..moments {
        first.push(f64::from_le_bytes(take(8)?.try_into().unwrap()));
    }
    let mut second = Vec::with_capacity(moments);
    for _ in 0..moments {
        second.push(f64::from_le_bytes(take(8)?.try_into().unwrap()));
    }
    if first.iter().chain(&second).any(|v| !v.is_finite()) {
        return Err(fail("non-finite moment buffer"));
    }
    Ok(TrainState {
        params,
        first_moment: first,
        second_moment: second,
        step,
        next_epoch,
        master_seed,
    })
}

/// Atomic write of a training state file.
pub fn save_state(state: &TrainState, path: &Path) -> Result<(), TrainError> {
    let bytes = state_bytes(state);
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name().and_then(|n| n.to_str()).unwrap_or("state")
    ));
    std::fs::write(&tmp, &bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_state(path: &Path) -> Result<TrainState, TrainError> {
    let bytes = std::fs::read(path)?;
    state_from_bytes(&bytes)
}
