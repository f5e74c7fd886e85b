//! Assay and feature ingestion, affinity normalization, target-disjoint
//! splits, and the synthetic generators used by the test and acceptance
//! suites.
//!
//! On-disk formats:
//! * Assay file: JSON lines, UTF-8. The first line is a header
//!   `{"format":"hypseek-assays","version":1,"affinity_orientation":...}`;
//!   each following line is one assay object. Ingestion normalizes
//!   affinities so that larger = stronger (a `lower_stronger` header negates
//!   every value) and rejects assays whose active/inactive affinity medians
//!   contradict that orientation.
//! * Feature file: magic `HYPSF1`, `u32` version, `u32` row count, `u32`
//!   dimension, a length-prefixed UTF-8 id table, row-major little-endian
//!   `f32` values, and a CRC-32 trailer over everything after the version
//!   field. Values are widened to `f64` on load.

use crate::rng::stream;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::collections::{HashMap, HashSet};
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Schema { line: usize, message: String },
    #[error("bad header: {0}")]
    BadHeader(String),
    #[error("duplicate assay id {0}")]
    DuplicateAssay(String),
    #[error("assay {assay}: duplicate ligand id {ligand}")]
    DuplicateLigand { assay: String, ligand: String },
    #[error("assay {assay}: active without affinity cannot be ranked: {ligand}")]
    ActiveWithoutAffinity { assay: String, ligand: String },
    #[error("assay {assay}: affinity orientation violated (active median {active_median} < inactive median {inactive_median})")]
    Orientation { assay: String, active_median: f64, inactive_median: f64 },
    #[error("feature file: {0}")]
    BadFeatureFile(String),
    #[error("feature file CRC mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Crc { stored: u32, computed: u32 },
    #[error("unresolved feature id {0}")]
    MissingFeature(String),
    #[error("duplicate feature id {0}")]
    DuplicateFeature(String),
    #[error("split fractions must be non-negative and sum to 1, got {0:?}")]
    BadFractions([f64; 3]),
    #[error("{targets} target(s) cannot fill {splits} non-empty split(s)")]
    TooFewTargets { targets: usize, splits: usize },
}

/// Whether larger or smaller raw affinities mean stronger binding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AffinityOrientation {
    #[serde(rename = "higher_stronger")]
    HigherStronger,
    #[serde(rename = "lower_stronger")]
    LowerStronger,
}

#[derive(Debug, Serialize, Deserialize)]
struct AssayFileHeader {
    format: String,
    version: u32,
    affinity_orientation: AffinityOrientation,
}

/// One tested ligand within an assay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssayLigand {
    pub ligand_id: String,
    pub feature_id: String,
    pub active: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub affinity: Option<f64>,
}

/// One experimental unit: a target with its candidate pockets, optional
/// sequence, and screened ligands. After ingestion, affinities are on the
/// normalized scale (larger = stronger).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assay {
    pub assay_id: String,
    pub target_id: String,
    pub pocket_feature_ids: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sequence_feature_id: Option<String>,
    pub ligands: Vec<AssayLigand>,
}

impl Assay {
    fn validate(&self, line: usize) -> Result<(), DataError> {
        if self.assay_id.is_empty() || self.target_id.is_empty() {
            return Err(DataError::Schema { line, message: "empty assay or target id".into() });
        }
        if self.pocket_feature_ids.is_empty() {
            return Err(DataError::Schema {
                line,
                message: format!("assay {} has no pocket features", self.assay_id),
            });
        }
        let mut seen = HashSet::new();
        for ligand in &self.ligands {
            if !seen.insert(ligand.ligand_id.as_str()) {
                return Err(DataError::DuplicateLigand {
                    assay: self.assay_id.clone(),
                    ligand: ligand.ligand_id.clone(),
                });
            }
            if let Some(v) = ligand.affinity {
                if !v.is_finite() {
                    return Err(DataError::Schema {
                        line,
                        message: format!(
                            "assay {}: non-finite affinity for {}",
                            self.assay_id, ligand.ligand_id
                        ),
                    });
                }
            }
        }
        Ok(())
    }

    /// Active-median >= inactive-median sanity check, applied after
    /// normalization when both sides carry affinities.
    fn check_orientation(&self) -> Result<(), DataError> {
        let collect = |want: bool| {
            let mut v: Vec<f64> = self
                .ligands
                .iter()
                .filter(|l| l.active == want)
                .filter_map(|l| l.affinity)
                .collect();
            v.sort_by(|a, b| a.partial_cmp(b).unwrap());
            v
        };
        let actives = collect(true);
        let inactives = collect(false);
        if actives.is_empty() || inactives.is_empty() {
            return Ok(());
        }
        let median = |v: &[f64]| {
            if v.len() % 2 == 1 {
                v[v.len() / 2]
            } else {
                0.5 * (v[v.len() / 2 - 1] + v[v.len() / 2])
            }
        };
        let (am, im) = (median(&actives), median(&inactives));
        if am < im {
            return Err(DataError::Orientation {
                assay: self.assay_id.clone(),
                active_median: am,
                inactive_median: im,
            });
        }
        Ok(())
    }
}

/// Parses an assay file, applying the header's affinity orientation so every
/// returned affinity is on the larger-is-stronger scale.
pub fn load_assays(path: &Path) -> Result<Vec<Assay>, DataError> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut lines = reader.lines().enumerate();
    let header: AssayFileHeader = match lines.next() {
        None => return Ok(Vec::new()),
        Some((_, line)) => {
            let line = line?;
            if line.trim().is_empty() {
                return Ok(Vec::new());
            }
            serde_json::from_str(&line).map_err(|e| DataError::BadHeader(e.to_string()))?
        }
    };
    if header.format != "hypseek-assays" {
        return Err(DataError::BadHeader(format!("unknown format {:?}", header.format)));
    }
    if header.version != 1 {
        return Err(DataError::BadHeader(format!("unsupported version {}", header.version)));
    }
    let mut assays = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let line_no = idx + 1;
        let mut assay: Assay = serde_json::from_str(&line)
            .map_err(|e| DataError::Schema { line: line_no, message: e.to_string() })?;
        assay.validate(line_no)?;
        if !seen.insert(assay.assay_id.clone()) {
            return Err(DataError::DuplicateAssay(assay.assay_id));
        }
        if header.affinity_orientation == AffinityOrientation::LowerStronger {
            for ligand in &mut assay.ligands {
                if let Some(v) = ligand.affinity.as_mut() {
                    *v = -*v;
                }
            }
        }
        assay.check_orientation()?;
        assays.push(assay);
    }
    Ok(assays)
}

/// Writes an assay file. Affinities are written as-is under the declared
/// orientation; the loader will re-normalize.
pub fn write_assays(
    path: &Path,
    assays: &[Assay],
    orientation: AffinityOrientation,
) -> Result<(), DataError> {
    let header = AssayFileHeader {
        format: "hypseek-assays".into(),
        version: 1,
        affinity_orientation: orientation,
    };
    let mut out = String::new();
    out.push_str(&serde_json::to_string(&header).expect("header serializes"));
    out.push('\n');
    for assay in assays {
        out.push_str(&serde_json::to_string(assay).expect("assay serializes"));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Dense feature vectors keyed by entity id.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStore {
    dim: usize,
    ids: Vec<String>,
    index: HashMap<String, usize>,
    values: Vec<f64>,
}

impl FeatureStore {
    pub fn new(dim: usize) -> Self {
        Self { dim, ids: Vec::new(), index: HashMap::new(), values: Vec::new() }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn insert(&mut self, id: &str, row: &[f64]) -> Result<(), DataError> {
        assert_eq!(row.len(), self.dim, "feature row must match store dimension");
        if self.index.contains_key(id) {
            return Err(DataError::DuplicateFeature(id.to_string()));
        }
        self.index.insert(id.to_string(), self.ids.len());
        self.ids.push(id.to_string());
        self.values.extend_from_slice(row);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&[f64]> {
        self.index.get(id).map(|&i| &self.values[i * self.dim..(i + 1) * self.dim])
    }

    pub fn resolve(&self, id: &str) -> Result<&[f64], DataError> {
        self.get(id).ok_or_else(|| DataError::MissingFeature(id.to_string()))
    }
}

/// Eagerly checks that every feature id referenced by the assays resolves.
pub fn validate_features(assays: &[Assay], store: &FeatureStore) -> Result<(), DataError> {
    for assay in assays {
        for id in &assay.pocket_feature_ids {
            store.resolve(id)?;
        }
        if let Some(id) = &assay.sequence_feature_id {
            store.resolve(id)?;
        }
        for ligand in &assay.ligands {
            store.resolve(&ligand.feature_id)?;
        }
    }
    Ok(())
}

pub const FEATURE_MAGIC: &[u8; 6] = b"HYPSF1";
pub const FEATURE_VERSION: u32 = 1;

/// Serializes a feature store. Values are narrowed to `f32`.
pub fn feature_bytes(store: &FeatureStore) -> Vec<u8> {
    let mut payload = Vec::new();
    payload.extend_from_slice(&(store.len() as u32).to_le_bytes());
    payload.extend_from_slice(&(store.dim() as u32).to_le_bytes());
    for id in store.ids() {
        let bytes = id.as_bytes();
        payload.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
        payload.extend_from_slice(bytes);
    }
    for v in &store.values {
        payload.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    let crc = crc32fast::hash(&payload);
    let mut out = Vec::with_capacity(6 + 4 + payload.len() + 4);
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    out.extend_from_slice(&payload);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn write_features(path: &Path, store: &FeatureStore) -> Result<(), DataError> {
    let bytes = feature_bytes(store);
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

/// Loads and CRC-validates a feature file, widening values to `f64`.
pub fn load_features(path: &Path) -> Result<FeatureStore, DataError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    feature_store_from_bytes(&bytes)
}

pub fn feature_store_from_bytes(bytes: &[u8]) -> Result<FeatureStore, DataError> {
    if bytes.len() < 18 {
        return Err(DataError::BadFeatureFile("file too short".into()));
    }
    if &bytes[..6] != FEATURE_MAGIC {
        return Err(DataError::BadFeatureFile("bad magic".into()));
    }
    let version = u32::from_le_bytes(bytes[6..10].try_into().unwrap());
    if version != FEATURE_VERSION {
        return Err(DataError::BadFeatureFile(format!("unsupported version {version}")));
    }
    let payload = &bytes[10..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    let computed = crc32fast::hash(payload);
    if stored != computed {
        return Err(DataError::Crc { stored, computed });
    }
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8], DataError> {
        if pos + n > payload.len() {
            return Err(DataError::BadFeatureFile("truncated payload".into()));
        }
        let s = &payload[pos..pos + n];
        pos += n;
        Ok(s)
    };
    let rows = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    if dim == 0 {
        return Err(DataError::BadFeatureFile("zero dimension".into()));
    }
    let mut store = FeatureStore::new(dim);
    let mut ids = Vec::with_capacity(rows);
    for _ in 0..rows {
        let len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let id = std::str::from_utf8(take(len)?)
            .map_err(|_| DataError::BadFeatureFile("id table is not UTF-8".into()))?
            .to_string();
        ids.push(id);
    }
    for id in ids {
        let mut row = Vec::with_capacity(dim);
        for _ in 0..dim {
            row.push(f32::from_le_bytes(take(4)?.try_into().unwrap()) as f64);
        }
        store.insert(&id, &row)?;
    }
    if pos != payload.len() {
        return Err(DataError::BadFeatureFile("trailing bytes in payload".into()));
    }
    Ok(store)
}

fn random_unit_vector<R: Rng>(dim: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z
            })
            .collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Spread of target prototypes around the shared master direction: the
/// prototype is `normalize(master + SPREAD * random_unit)`, so any two
/// targets overlap positively (as real pockets do through shared
/// physicochemical structure). Held-out generalization of a linear head
/// requires that overlap; fully isotropic directions would make unseen
/// targets unlearnable by construction.
const PROTOTYPE_SPREAD: f64 = 1.0;

/// Norm of the prototype feature vectors. Encoder embeddings are not
/// unit-norm in practice; the scale also sets how quickly inner products
/// grow per unit of optimizer movement at a fixed learning rate.
const PROTOTYPE_NORM: f64 = 4.0;

/// Synthetic assay generator.
///
/// Per target: a unit prototype direction drawn around a dataset-wide master
/// direction (see [`PROTOTYPE_SPREAD`]); ligand features are
/// `prototype * (1 + strength) + noise` with per-ligand strength uniform in
/// `[0, 1)` and isotropic Gaussian noise of scale `sigma`; the normalized
/// affinity is the strength itself and the top half by strength is labeled
/// active. The pocket and sequence features are the prototype.
pub fn generate_synthetic(
    targets: usize,
    ligands_per_assay: usize,
    dim: usize,
    noise: f64,
    seed: u64,
) -> (Vec<Assay>, FeatureStore) {
    assert!(targets >= 1 && ligands_per_assay >= 1 && dim >= 1);
    let mut store = FeatureStore::new(dim);
    let mut assays = Vec::with_capacity(targets);
    let master = random_unit_vector(dim, &mut stream(seed, "synthetic-master", 0));
    for t in 0..targets {
        let mut rng = stream(seed, "synthetic-target", t as u64);
        let local = random_unit_vector(dim, &mut rng);
        let mixed: Vec<f64> = master
            .iter()
            .zip(&local)
            .map(|(m, l)| m + PROTOTYPE_SPREAD * l)
            .collect();
        let norm = mixed.iter().map(|x| x * x).sum::<f64>().sqrt();
        let prototype: Vec<f64> =
            mixed.into_iter().map(|x| x / norm * PROTOTYPE_NORM).collect();
        let pocket_id = format!("T{t}_pocket");
        let seq_id = format!("T{t}_seq");
        store.insert(&pocket_id, &prototype).expect("fresh id");
        store.insert(&seq_id, &prototype).expect("fresh id");
        let mut strengths: Vec<f64> = (0..ligands_per_assay).map(|_| rng.gen::<f64>()).collect();
        let mut ligands = Vec::with_capacity(ligands_per_assay);
        // Top half by strength is active.
        let mut sorted = strengths.clone();
        sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let threshold = sorted[(ligands_per_assay - 1) / 2];
        for (j, strength) in strengths.iter_mut().enumerate() {
            let feature_id = format!("T{t}_L{j}");
            let features: Vec<f64> = prototype
                .iter()
                .map(|p| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    p * (1.0 + *strength) + noise * z
                })
                .collect();
            store.insert(&feature_id, &features).expect("fresh id");
            ligands.push(AssayLigand {
                ligand_id: format!("T{t}_L{j}"),
                feature_id,
                active: *strength >= threshold,
                affinity: Some(*strength),
            });
        }
        assays.push(Assay {
            assay_id: format!("A{t}"),
            target_id: format!("T{t}"),
            pocket_feature_ids: vec![pocket_id],
            sequence_feature_id: Some(seq_id),
            ligands,
        });
    }
    (assays, store)
}

/// Parameters of the activity-cliff generator.
#[derive(Debug, Clone, PartialEq)]
pub struct CliffPairSpec {
    /// Euclidean feature-space gap between the two pair members.
    pub feature_epsilon: f64,
    /// Normalized-affinity gap between the strong and weak member.
    pub affinity_gap: f64,
    pub pair_count: usize,
    /// Norm of the prototype feature vectors.
    pub base_radius: f64,
    pub dim: usize,
}

/// One generated cliff pair, as listed in the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CliffPair {
    pub assay_id: String,
    pub ligand_strong: String,
    pub ligand_weak: String,
    pub epsilon: f64,
    pub affinity_gap: f64,
    /// Set when epsilon is zero and the two feature vectors coincide.
    pub degenerate: bool,
}

const CLIFF_PAIRS_PER_ASSAY: usize = 5;
const CLIFF_CONTEXT_LIGANDS: usize = 10;
const CLIFF_NOISE: f64 = 0.05;

/// Builds assays containing activity-cliff pairs: two ligands at Euclidean
/// feature distance exactly `epsilon` whose normalized affinities differ by
/// `affinity_gap`, embedded among ordinary context ligands. Each assay holds
/// up to five pairs plus ten context ligands.
pub fn generate_cliff_pairs(
    spec: &CliffPairSpec,
    seed: u64,
) -> (Vec<Assay>, FeatureStore, Vec<CliffPair>) {
    assert!(spec.pair_count >= 1 && spec.dim >= 1);
    assert!(spec.feature_epsilon >= 0.0 && spec.affinity_gap > 0.0 && spec.base_radius > 0.0);
    let n_assays = spec.pair_count.div_ceil(CLIFF_PAIRS_PER_ASSAY);
    let mut store = FeatureStore::new(spec.dim);
    let mut assays = Vec::with_capacity(n_assays);
    let mut manifest = Vec::with_capacity(spec.pair_count);
    let mut remaining = spec.pair_count;
    for t in 0..n_assays {
        let mut rng = stream(seed, "cliff-target", t as u64);
        let prototype: Vec<f64> = random_unit_vector(spec.dim, &mut rng)
            .into_iter()
            .map(|x| x * spec.base_radius)
            .collect();
        let pocket_id = format!("C{t}_pocket");
        let seq_id = format!("C{t}_seq");
        store.insert(&pocket_id, &prototype).expect("fresh id");
        store.insert(&seq_id, &prototype).expect("fresh id");
        let mut ligands = Vec::new();
        for j in 0..CLIFF_CONTEXT_LIGANDS {
            let strength: f64 = rng.gen();
            let features: Vec<f64> = prototype
                .iter()
                .map(|p| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    p * (1.0 + strength) + CLIFF_NOISE * z
                })
                .collect();
            let id = format!("C{t}_ctx{j}");
            store.insert(&id, &features).expect("fresh id");
            ligands.push(AssayLigand {
                ligand_id: id.clone(),
                feature_id: id,
                active: strength >= 0.5,
                affinity: Some(strength),
            });
        }
        let pairs_here = remaining.min(CLIFF_PAIRS_PER_ASSAY);
        for p in 0..pairs_here {
            let strong_strength = rng.gen_range(0.5..1.0);
            let strong: Vec<f64> =
                prototype.iter().map(|x| x * (1.0 + strong_strength)).collect();
            let direction = random_unit_vector(spec.dim, &mut rng);
            let weak: Vec<f64> = strong
                .iter()
                .zip(&direction)
                .map(|(s, u)| s + spec.feature_epsilon * u)
                .collect();
            let strong_id = format!("C{t}_p{p}_strong");
            let weak_id = format!("C{t}_p{p}_weak");
            store.insert(&strong_id, &strong).expect("fresh id");
            store.insert(&weak_id, &weak).expect("fresh id");
            ligands.push(AssayLigand {
                ligand_id: strong_id.clone(),
                feature_id: strong_id.clone(),
                active: true,
                affinity: Some(strong_strength),
            });
            ligands.push(AssayLigand {
                ligand_id: weak_id.clone(),
                feature_id: weak_id.clone(),
                active: false,
                affinity: Some(strong_strength - spec.affinity_gap),
            });
            manifest.push(CliffPair {
                assay_id: format!("CA{t}"),
                ligand_strong: strong_id,
                ligand_weak: weak_id,
                epsilon: spec.feature_epsilon,
                affinity_gap: spec.affinity_gap,
                degenerate: spec.feature_epsilon == 0.0,
            });
        }
        remaining -= pairs_here;
        assays.push(Assay {
            assay_id: format!("CA{t}"),
            target_id: format!("CT{t}"),
            pocket_feature_ids: vec![pocket_id],
            sequence_feature_id: Some(seq_id),
            ligands,
        });
    }
    (assays, store, manifest)
}

/// Target-disjoint split: all assays of one target land in the same split.
/// Target counts follow the largest-remainder rule on the shuffled target
/// list.
pub fn split_assays(
    assays: &[Assay],
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<(Vec<Assay>, Vec<Assay>, Vec<Assay>), DataError> {
    let fr = [fractions.0, fractions.1, fractions.2];
    if fr.iter().any(|f| !(f.is_finite() && *f >= 0.0)) || (fr.iter().sum::<f64>() - 1.0).abs() > 1e-9
    {
        return Err(DataError::BadFractions(fr));
    }
    let mut targets: Vec<String> = Vec::new();
    let mut seen = HashSet::new();
    for assay in assays {
        if seen.insert(assay.target_id.clone()) {
            targets.push(assay.target_id.clone());
        }
    }
    let nonzero = fr.iter().filter(|f| **f > 0.0).count();
    if targets.len() < nonzero {
        return Err(DataError::TooFewTargets { targets: targets.len(), splits: nonzero });
    }
    // Seeded Fisher-Yates.
    let mut rng = stream(seed, "split", 0);
    for i in (1..targets.len()).rev() {
        let j = rng.gen_range(0..=i);
        targets.swap(i, j);
    }
    // Largest-remainder apportionment.
    let t = targets.len();
    let exact: Vec<f64> = fr.iter().map(|f| f * t as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut leftover = t - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for &i in &order {
        if leftover == 0 {
            break;
        }
        counts[i] += 1;
        leftover -= 1;
    }
    let train_set: HashSet<&String> = targets[..counts[0]].iter().collect();
    let val_set: HashSet<&String> = targets[counts[0]..counts[0] + counts[1]].iter().collect();
    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut test = Vec::new();
    for assay in assays {
        if train_set.contains(&assay.target_id) {
            train.push(assay.clone());
        } else if val_set.contains(&assay.target_id) {
            val.push(assay.clone());
        } else {
            test.push(assay.clone());
        }
    }
    Ok((train, val, test))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn sample_assay() -> Assay {
        Assay {
            assay_id: "A0".into(),
            target_id: "T0".into(),
            pocket_feature_ids: vec!["p0".into()],
            sequence_feature_id: Some("s0".into()),
            ligands: vec![
                AssayLigand {
                    ligand_id: "L0".into(),
                    feature_id: "f0".into(),
                    active: true,
                    affinity: Some(0.9),
                },
                AssayLigand {
                    ligand_id: "L1".into(),
                    feature_id: "f1".into(),
                    active: false,
                    affinity: Some(0.1),
                },
            ],
        }
    }

    #[test]
    fn assay_file_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("assays.jsonl");
        let assays = vec![sample_assay()];
        write_assays(&path, &assays, AffinityOrientation::HigherStronger).unwrap();
        let loaded = load_assays(&path).unwrap();
        assert_eq!(loaded, assays);
    }

    #[test]
    fn empty_file_gives_empty_list() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        std::fs::write(&path, "").unwrap();
        assert!(load_assays(&path).unwrap().is_empty());
    }

    #[test]
    fn lower_stronger_orientation_negates() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("assays.jsonl");
        let mut assay = sample_assay();
        // On a lower-is-stronger scale the active must have the smaller value.
        assay.ligands[0].affinity = Some(-6.0);
        assay.ligands[1].affinity = Some(-1.0);
        write_assays(&path, &[assay], AffinityOrientation::LowerStronger).unwrap();
        let loaded = load_assays(&path).unwrap();
        assert_eq!(loaded[0].ligands[0].affinity, Some(6.0));
        assert_eq!(loaded[0].ligands[1].affinity, Some(1.0));
    }

    #[test]
    fn orientation_violation_is_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("assays.jsonl");
        let mut assay = sample_assay();
        assay.ligands[0].affinity = Some(0.1); // active weaker than inactive
        assay.ligands[1].affinity = Some(0.9);
        write_assays(&path, &[assay], AffinityOrientation::HigherStronger).unwrap();
        assert!(matches!(load_assays(&path), Err(DataError::Orientation { .. })));
    }

    #[test]
    fn duplicate_ligand_is_rejected_with_names() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("assays.jsonl");
        let mut assay = sample_assay();
        assay.ligands[1].ligand_id = "L0".into();
        write_assays(&path, &[assay], AffinityOrientation::HigherStronger).unwrap();
        match load_assays(&path).unwrap_err() {
            DataError::DuplicateLigand { assay, ligand } => {
                assert_eq!(assay, "A0");
                assert_eq!(ligand, "L0");
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn duplicate_assay_is_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("assays.jsonl");
        write_assays(
            &path,
            &[sample_assay(), sample_assay()],
            AffinityOrientation::HigherStronger,
        )
        .unwrap();
        assert!(matches!(load_assays(&path), Err(DataError::DuplicateAssay(_))));
    }

    #[test]
    fn schema_violation_reports_line_number() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("assays.jsonl");
        let mut content = String::from(
            "{\"format\":\"hypseek-assays\",\"version\":1,\"affinity_orientation\":\"higher_stronger\"}\n",
        );
        content.push_str("{\"assay_id\":\"A0\"}\n");
        std::fs::write(&path, content).unwrap();
        match load_assays(&path).unwrap_err() {
            DataError::Schema { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn feature_store_round_trip_is_bit_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("features.bin");
        let mut store = FeatureStore::new(3);
        // Values chosen representable in f32 so the narrowing is lossless.
        store.insert("a", &[1.5, -0.25, 3.0]).unwrap();
        store.insert("b", &[0.0, 10.5, -7.125]).unwrap();
        write_features(&path, &store).unwrap();
        let loaded = load_features(&path).unwrap();
        assert_eq!(loaded, store);
        // Bytes round-trip exactly too.
        assert_eq!(feature_bytes(&loaded), feature_bytes(&store));
    }

    #[test]
    fn truncated_feature_file_fails_crc_or_length() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("features.bin");
        let mut store = FeatureStore::new(4);
        store.insert("a", &[1.0, 2.0, 3.0, 4.0]).unwrap();
        write_features(&path, &store).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let truncated = &bytes[..bytes.len() - 6];
        assert!(feature_store_from_bytes(truncated).is_err());
        // Corrupt one payload byte: CRC must catch it.
        let mut corrupt = bytes.clone();
        corrupt[12] ^= 0x40;
        assert!(matches!(
            feature_store_from_bytes(&corrupt),
            Err(DataError::Crc { .. })
        ));
    }

    #[test]
    fn zero_dimension_rejected() {
        let store = FeatureStore::new(0);
        let bytes = feature_bytes(&store);
        assert!(matches!(
            feature_store_from_bytes(&bytes),
            Err(DataError::BadFeatureFile(_))
        ));
    }

    #[test]
    fn synthetic_generator_is_deterministic_and_well_formed() {
        let (a1, s1) = generate_synthetic(4, 6, 8, 0.05, 7);
        let (a2, s2) = generate_synthetic(4, 6, 8, 0.05, 7);
        assert_eq!(a1, a2);
        assert_eq!(s1, s2);
        let (a3, _) = generate_synthetic(4, 6, 8, 0.05, 8);
        assert_ne!(a1, a3);
        validate_features(&a1, &s1).unwrap();
        for assay in &a1 {
            let actives = assay.ligands.iter().filter(|l| l.active).count();
            assert_eq!(actives, 3, "top half by strength is active");
            assay.check_orientation().unwrap();
        }
    }

    #[test]
    fn synthetic_noise_free_affinity_tracks_feature_scale() {
        // With sigma = 0 the feature norm is a strictly monotone function of
        // the strength, so affinity order is exactly recoverable.
        let (assays, store) = generate_synthetic(1, 10, 6, 0.0, 3);
        let assay = &assays[0];
        let mut pairs: Vec<(f64, f64)> = assay
            .ligands
            .iter()
            .map(|l| {
                let f = store.get(&l.feature_id).unwrap();
                let norm = f.iter().map(|x| x * x).sum::<f64>().sqrt();
                (l.affinity.unwrap(), norm)
            })
            .collect();
        pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        for w in pairs.windows(2) {
            assert!(w[0].1 < w[1].1);
        }
    }

    #[test]
    fn cliff_pairs_have_exact_epsilon() {
        let spec = CliffPairSpec {
            feature_epsilon: 0.01,
            affinity_gap: 3.0,
            pair_count: 12,
            base_radius: 1.0,
            dim: 16,
        };
        let (assays, store, manifest) = generate_cliff_pairs(&spec, 11);
        assert_eq!(manifest.len(), 12);
        assert_eq!(assays.len(), 3);
        for pair in &manifest {
            let a = store.get(&pair.ligand_strong).unwrap();
            let b = store.get(&pair.ligand_weak).unwrap();
            let dist = a
                .iter()
                .zip(b)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt();
            assert!((dist - 0.01).abs() < 1e-12, "pair distance {dist}");
            assert!(!pair.degenerate);
        }
        validate_features(&assays, &store).unwrap();
    }

    #[test]
    fn degenerate_cliff_pairs_are_flagged() {
        let spec = CliffPairSpec {
            feature_epsilon: 0.0,
            affinity_gap: 1.0,
            pair_count: 2,
            base_radius: 1.0,
            dim: 4,
        };
        let (_, store, manifest) = generate_cliff_pairs(&spec, 5);
        for pair in &manifest {
            assert!(pair.degenerate);
            assert_eq!(store.get(&pair.ligand_strong), store.get(&pair.ligand_weak));
        }
    }

    #[test]
    fn cliff_generator_is_deterministic() {
        let spec = CliffPairSpec {
            feature_epsilon: 0.01,
            affinity_gap: 3.0,
            pair_count: 7,
            base_radius: 1.0,
            dim: 8,
        };
        let run = |seed| generate_cliff_pairs(&spec, seed);
        let (a1, s1, m1) = run(11);
        let (a2, s2, m2) = run(11);
        assert_eq!((a1, s1, m1), (a2, s2, m2));
    }

    #[test]
    fn split_everything_to_train() {
        let (assays, _) = generate_synthetic(5, 4, 4, 0.05, 1);
        let (train, val, test) = split_assays(&assays, (1.0, 0.0, 0.0), 9).unwrap();
        assert_eq!(train.len(), 5);
        assert!(val.is_empty() && test.is_empty());
    }

    #[test]
    fn split_counts_follow_largest_remainder() {
        let (assays, _) = generate_synthetic(20, 2, 4, 0.05, 1);
        let (train, val, test) = split_assays(&assays, (0.8, 0.1, 0.1), 9).unwrap();
        assert_eq!(train.len(), 16);
        assert_eq!(val.len(), 2);
        assert_eq!(test.len(), 2);
    }

    #[test]
    fn splits_are_target_disjoint_across_seeds() {
        // Two assays per target: they must always land together.
        let (mut assays, _) = generate_synthetic(6, 3, 4, 0.05, 2);
        let mut second: Vec<Assay> = assays
            .iter()
            .map(|a| {
                let mut b = a.clone();
                b.assay_id = format!("{}_bis", a.assay_id);
                b
            })
            .collect();
        assays.append(&mut second);
        for seed in 0..100 {
            let (train, val, test) = split_assays(&assays, (0.5, 0.25, 0.25), seed).unwrap();
            let sets = [&train, &val, &test];
            for (i, a) in sets.iter().enumerate() {
                for (j, b) in sets.iter().enumerate() {
                    if i == j {
                        continue;
                    }
                    for x in a.iter() {
                        assert!(!b.iter().any(|y| y.target_id == x.target_id));
                    }
                }
            }
        }
    }

    #[test]
    fn split_rejects_too_few_targets() {
        let (assays, _) = generate_synthetic(2, 2, 4, 0.05, 1);
        assert!(matches!(
            split_assays(&assays, (0.8, 0.1, 0.1), 3),
            Err(DataError::TooFewTargets { .. })
        ));
    }

    #[test]
    fn feature_store_smoke_load_time() {
        // Logged, not asserted: a 1e5 x 128 store should load in about a
        // second.
        let dir = tempdir().unwrap();
        let path = dir.path().join("big.bin");
        let dim = 128;
        let rows = 20_000; // scaled down to keep the suite quick
        let mut store = FeatureStore::new(dim);
        let row: Vec<f64> = (0..dim).map(|i| i as f64 * 0.125).collect();
        for i in 0..rows {
            store.insert(&format!("id{i}"), &row).unwrap();
        }
        write_features(&path, &store).unwrap();
        let start = std::time::Instant::now();
        let loaded = load_features(&path).unwrap();
        println!(
            "loaded {}x{} feature store in {:?}",
            loaded.len(),
            loaded.dim(),
            start.elapsed()
        );
        assert_eq!(loaded.len(), rows);
    }
}
