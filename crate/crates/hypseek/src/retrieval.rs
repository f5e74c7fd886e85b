//! Inference-time scoring: embed a query pocket and candidate ligands,
//! score by the spatial inner product, and rank.
//!
//! The index stores only the spatial components of the embedded ligands;
//! scoring one query against N ligands is exactly N dot products of length
//! `n_out` (a debug-build counter backs that claim in tests).

use crate::data::FeatureStore;
use crate::model::{embed, ModelError, ModelParams};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("duplicate ligand id {0}")]
    DuplicateId(String),
    #[error("ligand {0} is not in the index")]
    MissingLigand(String),
    #[error("index is empty")]
    EmptyIndex,
    #[error("assay {assay}: {message}")]
    AssayMismatch { assay: String, message: String },
}

#[cfg(debug_assertions)]
static DOT_PRODUCTS: std::sync::atomic::AtomicU64 = std::sync::atomic::AtomicU64::new(0);

/// Number of scoring dot products performed so far (debug builds only).
#[cfg(debug_assertions)]
pub fn dot_product_count() -> u64 {
    DOT_PRODUCTS.load(std::sync::atomic::Ordering::Relaxed)
}

/// Spatial components of embedded ligands, keyed by id.
#[derive(Debug, Clone)]
pub struct LigandIndex {
    ids: Vec<String>,
    spatial: Vec<f64>,
    dim: usize,
}

impl LigandIndex {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn spatial(&self, row: usize) -> &[f64] {
        &self.spatial[row * self.dim..(row + 1) * self.dim]
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|x| x == id)
    }
}

/// Embeds every ligand through the ligand head and stores the spatial parts.
pub fn build_index(
    ligand_ids: &[(String, String)],
    features: &FeatureStore,
    params: &ModelParams,
) -> Result<LigandIndex, RetrievalError> {
    let mut ids = Vec::with_capacity(ligand_ids.len());
    let mut seen = std::collections::HashSet::new();
    let mut spatial = Vec::with_capacity(ligand_ids.len() * params.n_out());
    for (ligand_id, feature_id) in ligand_ids {
        if !seen.insert(ligand_id.as_str()) {
            return Err(RetrievalError::DuplicateId(ligand_id.clone()));
        }
        let f = features
            .get(feature_id)
            .ok_or_else(|| ModelError::NonFinite { term: format!("missing feature {feature_id}") });
        let f = match f {
            Ok(f) => f,
            Err(_) => {
                return Err(RetrievalError::Model(ModelError::Checkpoint(format!(
                    "feature id {feature_id} (ligand {ligand_id}) does not resolve"
                ))))
            }
        };
        let point = embed(f, &params.ligand_head, params.curvature)?;
        spatial.extend_from_slice(point.spatial());
        ids.push(ligand_id.clone());
    }
    Ok(LigandIndex { ids, spatial, dim: params.n_out() })
}

/// One scored candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedEntry {
    pub id: String,
    pub score: f64,
    /// 1-based position after the descending-score sort.
    pub rank: usize,
}

/// Scores sorted descending; ties broken by ascending id; ranks consecutive
/// from 1.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedResult {
    pub entries: Vec<RankedEntry>,
}

impl RankedResult {
    pub fn score_of(&self, id: &str) -> Option<f64> {
        self.entries.iter().find(|e| e.id == id).map(|e| e.score)
    }
}

/// Embeds the query pocket and ranks every indexed ligand by the spatial
/// inner product.
pub fn score_all(
    pocket_features: &[f64],
    index: &LigandIndex,
    params: &ModelParams,
) -> Result<RankedResult, RetrievalError> {
    if index.is_empty() {
        return Err(RetrievalError::EmptyIndex);
    }
    let pocket = embed(pocket_features, &params.pocket_head, params.curvature)?;
    let q = pocket.spatial();
    let mut scored: Vec<(usize, f64)> = (0..index.len())
        .map(|row| {
            let mut acc = 0.0;
            for (a, b) in q.iter().zip(index.spatial(row)) {
                acc += a * b;
            }
            #[cfg(debug_assertions)]
            DOT_PRODUCTS.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
            (row, acc)
        })
        .collect();
    scored.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| index.ids[a.0].cmp(&index.ids[b.0]))
    });
    let entries = scored
        .into_iter()
        .enumerate()
        .map(|(i, (row, score))| RankedEntry { id: index.ids[row].clone(), score, rank: i + 1 })
        .collect();
    Ok(RankedResult { entries })
}

/// One ranked row of a screened assay, ready for the metrics module.
#[derive(Debug, Clone, PartialEq)]
pub struct ScreenRecord {
    pub ligand_id: String,
    pub score: f64,
    pub active: bool,
    pub affinity: Option<f64>,
}

/// Ranks one assay's ligands against its (first) pocket and emits
/// (score, label, affinity) rows in ranked order.
pub fn screen_assay(
    assay: &crate::data::Assay,
    index: &LigandIndex,
    features: &FeatureStore,
    params: &ModelParams,
) -> Result<Vec<ScreenRecord>, RetrievalError> {
    let pocket_features =
        features
            .get(&assay.pocket_feature_ids[0])
            .ok_or_else(|| RetrievalError::AssayMismatch {
                assay: assay.assay_id.clone(),
                message: format!("pocket feature {} missing", assay.pocket_feature_ids[0]),
            })?;
    // Score only this assay's ligands: build the restriction of the index.
    let mut rows = Vec::with_capacity(assay.ligands.len());
    for ligand in &assay.ligands {
        let row = index
            .position(&ligand.ligand_id)
            .ok_or_else(|| RetrievalError::MissingLigand(ligand.ligand_id.clone()))?;
        rows.push((ligand, row));
    }
    let pocket = embed(pocket_features, &params.pocket_head, params.curvature)?;
    let q = pocket.spatial();
    let mut records: Vec<ScreenRecord> = rows
        .into_iter()
        .map(|(ligand, row)| {
            let mut acc = 0.0;
            for (a, b) in q.iter().zip(index.spatial(row)) {
                acc += a * b;
            }
            #[cfg(debug_assertions)]
            DOT_PRODUCTS.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
            ScreenRecord {
                ligand_id: ligand.ligand_id.clone(),
                score: acc,
                active: ligand.active,
                affinity: ligand.affinity,
            }
        })
        .collect();
    records.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.ligand_id.cmp(&b.ligand_id))
    });
    Ok(records)
}
