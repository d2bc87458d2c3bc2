//! Delta log persistence and attack-ready representations.
//!
//! A log is a directory holding `manifest.json` (layout, device table, record
//! index) and `deltas.bin`: an 8-byte magic header followed by every record's
//! layers as little-endian `f32`, in manifest layer order. Record offsets are
//! byte positions into `deltas.bin`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fed::{DeltaRecord, DeviceState, Role};
use crate::nn::{Layer, LayerShape, ParamVector};
use crate::scalar::{l2_norm, Scalar};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PAYLOAD_FILE: &str = "deltas.bin";
pub const PAYLOAD_MAGIC: &[u8; 8] = b"FLDELTA1";
pub const FORMAT_NAME: &str = "fedleak-delta-log";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceEntry {
    pub device_id: u32,
    pub user_id: u32,
    pub role: Role,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordEntry {
    pub round: usize,
    pub device_id: u32,
    pub user_id: u32,
    pub role: Role,
    pub n_k: usize,
    pub offset: u64,
    pub byte_len: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeltaManifest {
    pub format: String,
    pub version: u32,
    pub layers: Vec<LayerShape>,
    pub rounds: usize,
    pub devices: Vec<DeviceEntry>,
    /// Filled in by [`write_records`].
    #[serde(default)]
    pub records: Vec<RecordEntry>,
}

impl DeltaManifest {
    pub fn new<T>(layers: Vec<LayerShape>, rounds: usize, devices: &[DeviceState<T>]) -> Self {
        DeltaManifest {
            format: FORMAT_NAME.to_owned(),
            version: FORMAT_VERSION,
            layers,
            rounds,
            devices: devices
                .iter()
                .map(|d| DeviceEntry {
                    device_id: d.device_id,
                    user_id: d.user_id,
                    role: d.role,
                })
                .collect(),
            records: Vec::new(),
        }
    }

    fn record_bytes(&self) -> u64 {
        self.layers.iter().map(|l| l.len() as u64 * 4).sum()
    }
}

/// Writes `records` into `dir` (created if missing). The record index of
/// `manifest` is replaced.
pub fn write_records<T: Scalar>(
    dir: &Path,
    manifest: &DeltaManifest,
    records: &[DeltaRecord<T>],
) -> Result<DeltaManifest> {
    let mut manifest = manifest.clone();
    manifest.records.clear();
    let per_record = manifest.record_bytes();
    let mut payload = Vec::with_capacity(PAYLOAD_MAGIC.len() + records.len() * per_record as usize);
    payload.extend_from_slice(PAYLOAD_MAGIC);
    for rec in records {
        if rec.delta.layout() != manifest.layers {
            return Err(Error::ShapeMismatch(format!(
                "record (round {}, device {}) layout {:?} differs from manifest {:?}",
                rec.round,
                rec.device_id,
                rec.delta.layout(),
                manifest.layers
            )));
        }
        let offset = payload.len() as u64;
        for v in rec.delta.iter() {
            payload.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
        manifest.records.push(RecordEntry {
            round: rec.round,
            device_id: rec.device_id,
            user_id: rec.user_id,
            role: rec.role,
            n_k: rec.n_k,
            offset,
            byte_len: per_record,
        });
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Serde(e.to_string()))?;
    fs::write(&manifest_path, text).map_err(|e| Error::io(&manifest_path, e))?;
    let payload_path = dir.join(PAYLOAD_FILE);
    fs::write(&payload_path, payload).map_err(|e| Error::io(&payload_path, e))?;
    Ok(manifest)
}

pub fn read_records<T: Scalar>(dir: &Path) -> Result<(DeltaManifest, Vec<DeltaRecord<T>>)> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: DeltaManifest =
        serde_json::from_str(&text).map_err(|e| Error::CorruptHeader(format!("manifest: {e}")))?;
    if manifest.format != FORMAT_NAME || manifest.version != FORMAT_VERSION {
        return Err(Error::CorruptHeader(format!(
            "unsupported format {} v{}",
            manifest.format, manifest.version
        )));
    }
    let payload_path = dir.join(PAYLOAD_FILE);
    let payload = fs::read(&payload_path).map_err(|e| Error::io(&payload_path, e))?;
    if payload.len() < PAYLOAD_MAGIC.len() || &payload[..PAYLOAD_MAGIC.len()] != PAYLOAD_MAGIC {
        return Err(Error::CorruptHeader("bad magic bytes in payload".into()));
    }
    let expected = manifest.record_bytes();
    let mut records = Vec::with_capacity(manifest.records.len());
    for entry in &manifest.records {
        if entry.byte_len != expected {
            return Err(Error::ShapeMismatch(format!(
                "record (round {}, device {}) spans {} bytes, layout needs {expected}",
                entry.round, entry.device_id, entry.byte_len
            )));
        }
        let start = entry.offset as usize;
        let end = start + entry.byte_len as usize;
        if start < PAYLOAD_MAGIC.len() || end > payload.len() {
            return Err(Error::Truncated(format!(
                "record (round {}, device {}) needs bytes {start}..{end}, payload has {}",
                entry.round,
                entry.device_id,
                payload.len()
            )));
        }
        let mut floats = payload[start..end]
            .chunks_exact(4)
            .map(|c| T::lit(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64));
        let layers = manifest
            .layers
            .iter()
            .map(|l| Layer {
                name: l.name.clone(),
                shape: l.shape.clone(),
                values: floats.by_ref().take(l.len()).collect(),
            })
            .collect();
        records.push(DeltaRecord {
            round: entry.round,
            device_id: entry.device_id,
            user_id: entry.user_id,
            role: entry.role,
            n_k: entry.n_k,
            delta: ParamVector::new(layers)?,
        });
    }
    Ok((manifest, records))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReprConfig {
    pub layer: String,
    pub normalize: bool,
}

impl ReprConfig {
    pub fn layer(name: impl Into<String>) -> Self {
        ReprConfig {
            layer: name.into(),
            normalize: true,
        }
    }
}

/// Selected layer flattened row-major, L2-normalized unless zero.
pub fn represent_delta<T: Scalar>(record: &DeltaRecord<T>, cfg: &ReprConfig) -> Result<Vec<T>> {
    let layer = record
        .delta
        .layer(&cfg.layer)
        .ok_or_else(|| Error::UnknownLayer(cfg.layer.clone()))?;
    Ok(represent_values(&layer.values, cfg.normalize))
}

pub(crate) fn represent_values<T: Scalar>(values: &[T], normalize: bool) -> Vec<T> {
    let mut v = values.to_vec();
    if normalize {
        let n = l2_norm(&v);
        if n > T::zero() {
            v.iter_mut().for_each(|x| *x /= n);
        }
    }
    v
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RecordFilter {
    /// Half-open `[lo, hi)` range of rounds.
    pub rounds: Option<(usize, usize)>,
    pub roles: Option<BTreeSet<Role>>,
    pub max_per_user: Option<usize>,
    pub seed: u64,
}

/// Keeps records inside the round range and role set, then subsamples each
/// `(role, user)` group down to `max_per_user` records. Order is preserved.
pub fn filter_records<T: Clone>(
    records: &[DeltaRecord<T>],
    filter: &RecordFilter,
) -> Result<Vec<DeltaRecord<T>>> {
    if let Some((lo, hi)) = filter.rounds {
        if lo >= hi {
            return Err(Error::invalid(format!("empty round range [{lo}, {hi})")));
        }
    }
    let kept: Vec<&DeltaRecord<T>> = records
        .iter()
        .filter(|r| filter.rounds.is_none_or(|(lo, hi)| r.round >= lo && r.round < hi))
        .filter(|r| filter.roles.as_ref().is_none_or(|s| s.contains(&r.role)))
        .collect();
    let Some(max) = filter.max_per_user else {
        return Ok(kept.into_iter().cloned().collect());
    };
    let mut groups: BTreeMap<(Role, u32), Vec<usize>> = BTreeMap::new();
    for (i, r) in kept.iter().enumerate() {
        groups.entry((r.role, r.user_id)).or_default().push(i);
    }
    let mut keep = vec![false; kept.len()];
    for ((role, user), idx) in &groups {
        if idx.len() <= max {
            idx.iter().for_each(|&i| keep[i] = true);
        } else {
            let salt = ((*role as u64) << 32) | *user as u64;
            let mut rng = ChaCha8Rng::seed_from_u64(crate::fed::mix_seed(filter.seed, salt, 7));
            for j in index::sample(&mut rng, idx.len(), max) {
                keep[idx[j]] = true;
            }
        }
    }
    Ok(kept
        .into_iter()
        .zip(keep)
        .filter(|(_, k)| *k)
        .map(|(r, _)| r.clone())
        .collect())
}
