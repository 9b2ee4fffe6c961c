//! On-disk formats: HGAF embedding files, the TOML task manifest, and checkpoints.
//!
//! HGAF layout (all integers little-endian):
//!
//! ```text
//! offset  size  field
//! 0       4     magic "HGAF"
//! 4       4     version (u32, = 1)
//! 8       1     dtype (u8, 0 = f32)
//! 9       3     reserved, zero
//! 12      8     rows (u64)
//! 20      8     dim (u64)
//! 28      4·rows·dim  row-major f32 payload
//! ```
//!
//! Checkpoints use a similar fixed header (`"HGCK"`, version, payload length,
//! CRC-32 of the payload). The payload is a length-prefixed JSON block with
//! the run metadata followed by nine raw tensors: the three adapter matrices,
//! then the first and second AdamW moments of each.

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, OnceLock};

use serde::{Deserialize, Serialize};

use crate::adapter::AdapterWeights;
use crate::error::{Error, Result};
use crate::graph::{prompt_nodes, ClassManifest, HeteroGraph};
use crate::optim::{AdamWConfig, OptimState};
use crate::tensor::{row_l2_normalize, Matrix};
use crate::train::{Checkpoint, EpochRecord, TestSet, TrainConfig, Variant};

pub const HGAF_MAGIC: [u8; 4] = *b"HGAF";
pub const HGAF_VERSION: u32 = 1;
pub const HGAF_HEADER_LEN: usize = 28;
const DTYPE_F32: u8 = 0;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"HGCK";
pub const CHECKPOINT_VERSION: u32 = 1;
const CHECKPOINT_HEADER_LEN: usize = 20;

/// Template used to build negative prompts from class names.
pub const NEGATIVE_TEMPLATE: &str = "A photo of no {class}";

fn path_lock(path: &Path) -> Arc<Mutex<()>> {
    static LOCKS: OnceLock<Mutex<HashMap<PathBuf, Arc<Mutex<()>>>>> = OnceLock::new();
    let key = path
        .parent()
        .and_then(|p| fs::canonicalize(p).ok())
        .and_then(|p| path.file_name().map(|n| p.join(n)))
        .unwrap_or_else(|| path.to_path_buf());
    let mut locks = LOCKS.get_or_init(Default::default).lock().unwrap_or_else(|e| e.into_inner());
    locks.entry(key).or_default().clone()
}

/// Writes `bytes` to `path` while holding the in-process lock for that path,
/// and syncs to disk before returning.
fn write_locked(path: &Path, bytes: &[u8]) -> Result<()> {
    let lock = path_lock(path);
    let _guard = lock.lock().unwrap_or_else(|e| e.into_inner());
    let mut file = File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(bytes).map_err(|e| Error::io(path, e))?;
    file.sync_all().map_err(|e| Error::io(path, e))
}

pub fn encode_hgaf(m: &Matrix<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(HGAF_HEADER_LEN + 4 * m.as_slice().len());
    out.extend_from_slice(&HGAF_MAGIC);
    out.extend_from_slice(&HGAF_VERSION.to_le_bytes());
    out.extend_from_slice(&[DTYPE_F32, 0, 0, 0]);
    out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
    for x in m.as_slice() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

fn u32_at(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

fn u64_at(bytes: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(bytes[at..at + 8].try_into().expect("8 bytes"))
}

/// Parses an in-memory HGAF image. `path` is only used in error messages.
pub fn decode_hgaf(bytes: &[u8], path: &Path) -> Result<Matrix<f32>> {
    let truncated = |expected: u64| Error::TruncatedFile {
        path: path.to_path_buf(),
        expected,
        found: bytes.len() as u64,
    };
    if bytes.len() < 4 {
        return Err(truncated(HGAF_HEADER_LEN as u64));
    }
    if bytes[..4] != HGAF_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            found: bytes[..4].try_into().expect("4 bytes"),
        });
    }
    if bytes.len() < HGAF_HEADER_LEN {
        return Err(truncated(HGAF_HEADER_LEN as u64));
    }
    let version = u32_at(bytes, 4);
    if version != HGAF_VERSION {
        return Err(Error::BadVersion {
            path: path.to_path_buf(),
            found: version,
        });
    }
    if bytes[8] != DTYPE_F32 {
        return Err(Error::UnsupportedDtype {
            path: path.to_path_buf(),
            code: bytes[8],
        });
    }
    let rows = u64_at(bytes, 12);
    let dim = u64_at(bytes, 20);
    let expected = rows
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(HGAF_HEADER_LEN as u64))
        .ok_or_else(|| truncated(u64::MAX))?;
    if bytes.len() as u64 != expected {
        return Err(truncated(expected));
    }
    let data = bytes[HGAF_HEADER_LEN..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
        .collect();
    Matrix::from_vec(rows as usize, dim as usize, data)
}

/// Reads an HGAF file exactly as stored; rows are not normalized.
pub fn read_hgaf(path: &Path) -> Result<Matrix<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_hgaf(&bytes, path)
}

pub fn write_hgaf(m: &Matrix<f32>, path: &Path) -> Result<()> {
    write_locked(path, &encode_hgaf(m))
}

/// Per-task hyperparameter overrides, applied on top of the built-in defaults
/// and below any command-line flags.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperOverrides {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warmup_lr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha_pp: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha_vp: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha_np: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha_np_test: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta_pn: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta_vn: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
}

impl HyperOverrides {
    pub fn apply(&self, cfg: &mut TrainConfig) {
        let set = |dst: &mut f64, src: Option<f64>| {
            if let Some(v) = src {
                *dst = v;
            }
        };
        if let Some(e) = self.epochs {
            cfg.epochs = e;
        }
        if let Some(b) = self.batch_size {
            cfg.batch_size = b;
        }
        set(&mut cfg.optimizer.lr_base, self.lr);
        set(&mut cfg.warmup_lr, self.warmup_lr);
        set(&mut cfg.loss.lambda, self.lambda);
        set(&mut cfg.hyper.alpha_pp, self.alpha_pp);
        set(&mut cfg.hyper.alpha_vp, self.alpha_vp);
        set(&mut cfg.hyper.alpha_np_train, self.alpha_np);
        set(&mut cfg.hyper.alpha_np_test, self.alpha_np_test);
        set(&mut cfg.hyper.beta_pn, self.beta_pn);
        set(&mut cfg.hyper.beta_vn, self.beta_vn);
        set(&mut cfg.hyper.gamma, self.gamma);
    }
}

/// The task description shared with the feature exporter.
///
/// Paths are relative to the manifest's directory unless absolute. Prompt
/// files hold every prompt embedding grouped by class in class order;
/// `*_counts` gives the group sizes and defaults to an even split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskManifest {
    pub classes: Vec<String>,
    pub shots: usize,
    pub tau: f64,
    pub positive_prompts: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub positive_counts: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub negative_prompts: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub negative_counts: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub negative_template: Option<String>,
    pub cache: String,
    pub cache_labels: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_labels: Option<Vec<usize>>,
    #[serde(default)]
    pub hyper: HyperOverrides,
}

impl TaskManifest {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let field = e
                .message()
                .split('`')
                .nth(1)
                .unwrap_or("manifest")
                .to_string();
            Error::manifest(field, e.message().trim().to_string())
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest fields are always representable")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_locked(path, self.to_toml().as_bytes())
    }

    pub fn resolve(&self, base: &Path, file: &str) -> PathBuf {
        let p = Path::new(file);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            base.join(p)
        }
    }

    /// Positive-prompt group sizes, explicit or evenly split over `rows`.
    fn counts(&self, field: &str, explicit: Option<&Vec<usize>>, rows: usize) -> Result<Vec<usize>> {
        let c = self.classes.len();
        let counts = match explicit {
            Some(v) => v.clone(),
            None => {
                if !rows.is_multiple_of(c) {
                    return Err(Error::manifest(
                        field,
                        format!("{rows} prompt rows do not split evenly over {c} classes; give explicit counts"),
                    ));
                }
                vec![rows / c; c]
            }
        };
        if counts.len() != c {
            return Err(Error::manifest(
                field,
                format!("{} entries for {c} classes", counts.len()),
            ));
        }
        if let Some(class) = counts.iter().position(|&n| n == 0) {
            return Err(Error::manifest(field, format!("class {class} has no prompts")));
        }
        let total: usize = counts.iter().sum();
        if total != rows {
            return Err(Error::manifest(
                field,
                format!("counts sum to {total} but the file has {rows} rows"),
            ));
        }
        Ok(counts)
    }

    fn check_labels(&self, field: &str, labels: &[usize], rows: usize) -> Result<()> {
        if labels.len() != rows {
            return Err(Error::manifest(
                field,
                format!("{} labels for {rows} rows", labels.len()),
            ));
        }
        let c = self.classes.len();
        if let Some(l) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::manifest(field, format!("label {l} is out of range for {c} classes")));
        }
        Ok(())
    }
}

/// A task as loaded from disk.
#[derive(Clone, Debug)]
pub struct LoadedTask {
    pub manifest: TaskManifest,
    pub class_manifest: ClassManifest,
    pub graph: HeteroGraph<f32>,
    pub test: Option<TestSet>,
}

impl LoadedTask {
    /// Built-in defaults for `variant` with the manifest overrides applied.
    pub fn config(&self, variant: Variant) -> TrainConfig {
        let mut cfg = TrainConfig {
            variant,
            ..TrainConfig::default()
        };
        cfg.loss.tau = self.manifest.tau;
        self.manifest.hyper.apply(&mut cfg);
        cfg
    }
}

/// Normalizes prompt rows, then averages each class group into one node.
pub(crate) fn group_nodes(m: &Matrix<f32>, counts: &[usize]) -> Result<Matrix<f32>> {
    let m = row_l2_normalize(m)?;
    let mut start = 0;
    let groups: Vec<Matrix<f32>> = counts
        .iter()
        .map(|&n| {
            let idx: Vec<usize> = (start..start + n).collect();
            start += n;
            m.select_rows(&idx)
        })
        .collect();
    prompt_nodes(&groups)
}

fn load_embeddings(manifest: &TaskManifest, base: &Path, field: &str, file: &str) -> Result<Matrix<f32>> {
    let path = manifest.resolve(base, file);
    if !path.exists() {
        return Err(Error::manifest(
            field,
            format!("referenced file {} does not exist", path.display()),
        ));
    }
    read_hgaf(&path)
}

/// Reads the manifest and every file it references, and builds the graph.
///
/// The negative-prompt file may be absent when `variant` does not use
/// negative nodes.
pub fn load_task(path: &Path, variant: Variant) -> Result<LoadedTask> {
    let manifest = TaskManifest::load(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let c = manifest.classes.len();
    if !(manifest.tau.is_finite() && manifest.tau > 0.0) {
        return Err(Error::manifest("tau", format!("must be positive, got {}", manifest.tau)));
    }

    let positive = load_embeddings(&manifest, base, "positive_prompts", &manifest.positive_prompts)?;
    let pos_counts = manifest.counts("positive_counts", manifest.positive_counts.as_ref(), positive.rows())?;
    let class_manifest = ClassManifest {
        class_names: manifest.classes.clone(),
        positive_prompt_counts: pos_counts.clone(),
        shots: manifest.shots,
    };
    class_manifest.validate()?;
    let dim = positive.cols();

    let negative = match &manifest.negative_prompts {
        Some(file) => {
            let p = manifest.resolve(base, file);
            if p.exists() || variant.uses_negatives() {
                Some(load_embeddings(&manifest, base, "negative_prompts", file)?)
            } else {
                None
            }
        }
        None if variant.uses_negatives() => {
            return Err(Error::manifest(
                "negative_prompts",
                format!("variant {variant} needs negative prompts"),
            ))
        }
        None => None,
    };
    let xn = match negative {
        Some(neg) => {
            if neg.cols() != dim {
                return Err(Error::manifest(
                    "negative_prompts",
                    format!("embedding width {} differs from positive prompts ({dim})", neg.cols()),
                ));
            }
            let counts = manifest.counts("negative_counts", manifest.negative_counts.as_ref(), neg.rows())?;
            Some(group_nodes(&neg, &counts)?)
        }
        None => None,
    };

    let cache = load_embeddings(&manifest, base, "cache", &manifest.cache)?;
    if cache.cols() != dim {
        return Err(Error::manifest(
            "cache",
            format!("embedding width {} differs from positive prompts ({dim})", cache.cols()),
        ));
    }
    manifest.check_labels("cache_labels", &manifest.cache_labels, cache.rows())?;
    let mut per_class = vec![0usize; c];
    for &l in &manifest.cache_labels {
        per_class[l] += 1;
    }
    if let Some(class) = per_class.iter().position(|&n| n != manifest.shots) {
        return Err(Error::manifest(
            "cache_labels",
            format!(
                "class {class} has {} cache samples but shots = {}",
                per_class[class], manifest.shots
            ),
        ));
    }

    let test = match (&manifest.test, &manifest.test_labels) {
        (Some(file), Some(labels)) => {
            let m = load_embeddings(&manifest, base, "test", file)?;
            if m.cols() != dim {
                return Err(Error::manifest(
                    "test",
                    format!("embedding width {} differs from positive prompts ({dim})", m.cols()),
                ));
            }
            manifest.check_labels("test_labels", labels, m.rows())?;
            Some(TestSet::new(row_l2_normalize(&m)?, labels.clone())?)
        }
        (None, None) => None,
        (Some(_), None) => return Err(Error::manifest("test_labels", "missing while `test` is set")),
        (None, Some(_)) => return Err(Error::manifest("test", "missing while `test_labels` is set")),
    };

    let xp = group_nodes(&positive, &pos_counts)?;
    let graph = HeteroGraph::new(xp, xn, cache, manifest.cache_labels.clone())?;
    graph.validate()?;
    Ok(LoadedTask {
        manifest,
        class_manifest,
        graph,
        test,
    })
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    config: TrainConfig,
    epoch: usize,
    optim_step: u64,
    optim_config: AdamWConfig,
    history: Vec<EpochRecord>,
    manifest: Option<String>,
}

fn push_tensor(out: &mut Vec<u8>, m: &Matrix<f32>) {
    out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
    for x in m.as_slice() {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Vec<u8> {
    let meta = CheckpointMeta {
        config: ck.config.clone(),
        epoch: ck.epoch,
        optim_step: ck.optim.step,
        optim_config: ck.optim.config,
        history: ck.history.clone(),
        manifest: ck.manifest.clone(),
    };
    let json = serde_json::to_vec(&meta).expect("checkpoint metadata serializes");
    let mut payload = Vec::new();
    payload.extend_from_slice(&(json.len() as u64).to_le_bytes());
    payload.extend_from_slice(&json);
    for set in [&ck.weights, &ck.optim.m, &ck.optim.v] {
        for m in set.iter() {
            push_tensor(&mut payload, m);
        }
    }
    let mut out = Vec::with_capacity(CHECKPOINT_HEADER_LEN + payload.len());
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
    out.extend_from_slice(&payload);
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.at..end];
                self.at = end;
                Ok(s)
            }
            None => Err(Error::TruncatedFile {
                path: self.path.to_path_buf(),
                expected: (self.at as u64).saturating_add(n as u64),
                found: self.bytes.len() as u64,
            }),
        }
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn tensor(&mut self) -> Result<Matrix<f32>> {
        let rows = self.u64()? as usize;
        let cols = self.u64()? as usize;
        let n = rows.checked_mul(cols).and_then(|n| n.checked_mul(4)).unwrap_or(usize::MAX);
        let data = self
            .take(n)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        Matrix::from_vec(rows, cols, data)
    }

    fn weights(&mut self) -> Result<AdapterWeights<f32>> {
        let wn = self.tensor()?;
        let wp = self.tensor()?;
        let wv = self.tensor()?;
        let d = wn.rows();
        for m in [&wn, &wp, &wv] {
            if m.shape() != (d, d) {
                return Err(Error::dims("checkpoint tensor", format!("{d}x{d}"), format!("{:?}", m.shape())));
            }
        }
        Ok(AdapterWeights { wn, wp, wv })
    }
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let mut header = Cursor { bytes, at: 0, path };
    let magic = header.take(4)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            found: magic.try_into().expect("4 bytes"),
        });
    }
    let version = u32::from_le_bytes(header.take(4)?.try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            path: path.to_path_buf(),
            found: version,
        });
    }
    let len = header.u64()?;
    let crc = u32::from_le_bytes(header.take(4)?.try_into().expect("4 bytes"));
    let payload = &bytes[CHECKPOINT_HEADER_LEN..];
    if payload.len() as u64 != len {
        return Err(Error::TruncatedFile {
            path: path.to_path_buf(),
            expected: CHECKPOINT_HEADER_LEN as u64 + len,
            found: bytes.len() as u64,
        });
    }
    if crc32fast::hash(payload) != crc {
        return Err(Error::CorruptChecksum {
            path: path.to_path_buf(),
        });
    }

    let mut cur = Cursor {
        bytes: payload,
        at: 0,
        path,
    };
    let json_len = cur.u64()? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(cur.take(json_len)?)
        .map_err(|e| Error::manifest("checkpoint metadata", e.to_string()))?;
    let weights = cur.weights()?;
    let m = cur.weights()?;
    let v = cur.weights()?;
    let d = weights.dim();
    if m.dim() != d || v.dim() != d {
        return Err(Error::dims("checkpoint optimizer moments", d, m.dim().max(v.dim())));
    }
    Ok(Checkpoint {
        config: meta.config,
        weights,
        optim: OptimState {
            m,
            v,
            step: meta.optim_step,
            config: meta.optim_config,
        },
        epoch: meta.epoch,
        history: meta.history,
        manifest: meta.manifest,
    })
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    write_locked(path, &encode_checkpoint(ck))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, SyntheticSpec};
    use crate::train::train;
    use proptest::prelude::*;

    fn tmp() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn scalar_file_layout() {
        let dir = tmp();
        let p = dir.path().join("x.hgaf");
        write_hgaf(&Matrix::from_vec(1, 1, vec![42.0]).unwrap(), &p).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert_eq!(bytes.len(), 32);
        assert_eq!(&bytes[..4], b"HGAF");
        assert_eq!(&bytes[4..8], &[1, 0, 0, 0]);
        assert_eq!(&bytes[8..12], &[0, 0, 0, 0]);
        assert_eq!(&bytes[12..20], &[1, 0, 0, 0, 0, 0, 0, 0]);
        assert_eq!(&bytes[20..28], &[1, 0, 0, 0, 0, 0, 0, 0]);
        assert_eq!(&bytes[28..], &[0x00, 0x00, 0x28, 0x42]);
    }

    #[test]
    fn empty_and_identity_files() {
        let dir = tmp();
        let p = dir.path().join("e.hgaf");
        write_hgaf(&Matrix::zeros(0, 7), &p).unwrap();
        assert_eq!(fs::metadata(&p).unwrap().len(), 28);
        let back = read_hgaf(&p).unwrap();
        assert_eq!(back.shape(), (0, 7));

        write_hgaf(&Matrix::identity(2), &p).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert_eq!(bytes.len(), 44);
        let payload: Vec<f32> = bytes[28..]
            .chunks(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        assert_eq!(payload, vec![1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn header_errors() {
        let good = encode_hgaf(&Matrix::identity(3));
        let p = Path::new("mem.hgaf");

        let cut = &good[..good.len() - 1];
        assert!(matches!(
            decode_hgaf(cut, p),
            Err(Error::TruncatedFile { expected: 64, found: 63, .. })
        ));
        assert!(matches!(decode_hgaf(&good[..10], p), Err(Error::TruncatedFile { .. })));

        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(decode_hgaf(&bad, p), Err(Error::BadMagic { found, .. }) if &found == b"XGAF"));

        let mut bad = good.clone();
        bad[4] = 2;
        assert!(matches!(decode_hgaf(&bad, p), Err(Error::BadVersion { found: 2, .. })));

        let mut bad = good;
        bad[8] = 1;
        assert!(matches!(decode_hgaf(&bad, p), Err(Error::UnsupportedDtype { code: 1, .. })));
    }

    #[test]
    fn large_round_trip_without_normalization() {
        let dir = tmp();
        let p = dir.path().join("big.hgaf");
        let m = Matrix::from_fn(100, 512, |i, j| ((i * 512 + j) as f32).sin() * 3.0);
        write_hgaf(&m, &p).unwrap();
        assert_eq!(read_hgaf(&p).unwrap(), m);
    }

    proptest! {
        #[test]
        fn hgaf_round_trip_is_bitwise(rows in 0usize..6, cols in 0usize..6, bits in prop::collection::vec(any::<u32>(), 36)) {
            let m = Matrix::from_fn(rows, cols, |i, j| f32::from_bits(bits[i * 6 + j]));
            let back = decode_hgaf(&encode_hgaf(&m), Path::new("p")).unwrap();
            let a: Vec<u32> = m.as_slice().iter().map(|x| x.to_bits()).collect();
            let b: Vec<u32> = back.as_slice().iter().map(|x| x.to_bits()).collect();
            prop_assert_eq!(back.shape(), (rows, cols));
            prop_assert_eq!(a, b);
        }
    }

    fn small_task(dir: &Path) -> PathBuf {
        generate(&SyntheticSpec {
            classes: 2,
            shots: 1,
            dim: 8,
            test_per_class: 2,
            ..SyntheticSpec::default()
        })
        .unwrap()
        .write(dir)
        .unwrap()
    }

    #[test]
    fn minimal_task_loads_with_invariants() {
        let dir = tmp();
        let path = small_task(dir.path());
        let task = load_task(&path, Variant::Full).unwrap();
        task.graph.validate().unwrap();
        assert_eq!(task.graph.num_classes(), 2);
        assert_eq!(task.graph.shots, 1);
        assert!(task.graph.negative.is_some());
        assert_eq!(task.test.unwrap().len(), 4);
        assert_eq!(task.manifest.negative_template.as_deref(), Some(NEGATIVE_TEMPLATE));
    }

    #[test]
    fn loaded_task_matches_in_memory_graph() {
        let dir = tmp();
        let spec = SyntheticSpec {
            classes: 3,
            shots: 2,
            dim: 8,
            ..SyntheticSpec::default()
        };
        let t = generate(&spec).unwrap();
        let path = t.write(dir.path()).unwrap();
        let loaded = load_task(&path, Variant::Full).unwrap();
        assert_eq!(loaded.graph, t.graph().unwrap());
        assert_eq!(loaded.test.unwrap(), t.test_set().unwrap());
    }

    #[test]
    fn mismatched_labels_name_the_field() {
        let dir = tmp();
        let path = small_task(dir.path());
        let mut m = TaskManifest::load(&path).unwrap();
        m.cache_labels.push(0);
        m.save(&path).unwrap();
        match load_task(&path, Variant::Full) {
            Err(Error::Manifest { field, .. }) => assert_eq!(field, "cache_labels"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn missing_negatives_depend_on_variant() {
        let dir = tmp();
        let path = small_task(dir.path());
        fs::remove_file(dir.path().join("negative.hgaf")).unwrap();
        let task = load_task(&path, Variant::TextPositive).unwrap();
        assert!(task.graph.negative.is_none());
        load_task(&path, Variant::Base).unwrap();
        match load_task(&path, Variant::Full) {
            Err(Error::Manifest { field, .. }) => assert_eq!(field, "negative_prompts"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn missing_and_unknown_fields() {
        let dir = tmp();
        let path = small_task(dir.path());
        let text = fs::read_to_string(&path).unwrap();
        let without_cache: String = text
            .lines()
            .filter(|l| !l.starts_with("cache ="))
            .map(|l| format!("{l}\n"))
            .collect();
        match TaskManifest::from_toml(&without_cache) {
            Err(Error::Manifest { field, .. }) => assert_eq!(field, "cache"),
            other => panic!("{other:?}"),
        }
        let extra = format!("bogus = 1\n{text}");
        assert!(matches!(TaskManifest::from_toml(&extra), Err(Error::Manifest { .. })));
    }

    #[test]
    fn explicit_prompt_counts() {
        let dir = tmp();
        let path = small_task(dir.path());
        let mut m = TaskManifest::load(&path).unwrap();
        m.positive_counts = Some(vec![2, 0]);
        m.save(&path).unwrap();
        assert!(matches!(load_task(&path, Variant::Full), Err(Error::Manifest { field, .. }) if field == "positive_counts"));
        m.positive_counts = Some(vec![1, 1]);
        m.save(&path).unwrap();
        load_task(&path, Variant::Full).unwrap();
    }

    #[test]
    fn hyper_overrides_apply() {
        let h = HyperOverrides {
            lr: Some(0.01),
            epochs: Some(100),
            alpha_np_test: Some(0.05),
            ..Default::default()
        };
        let mut cfg = TrainConfig::default();
        h.apply(&mut cfg);
        assert_eq!(cfg.optimizer.lr_base, 0.01);
        assert_eq!(cfg.epochs, 100);
        assert_eq!(cfg.hyper.alpha_np_test, 0.05);
        assert_eq!(cfg.hyper.alpha_np_train, 0.2);
    }

    fn trained() -> (HeteroGraph<f32>, Checkpoint) {
        let t = generate(&SyntheticSpec {
            classes: 3,
            shots: 2,
            dim: 6,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let g = t.graph().unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let ck = train(&g, &cfg, Some(&t.test_set().unwrap())).unwrap();
        (g, ck)
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tmp();
        let p = dir.path().join("run.ckpt");
        let (_, ck) = trained();
        save_checkpoint(&p, &ck).unwrap();
        let back = load_checkpoint(&p).unwrap();
        assert_eq!(back, ck);
        assert_eq!(encode_checkpoint(&back), fs::read(&p).unwrap());
    }

    #[test]
    fn checkpoint_corruption() {
        let (_, ck) = trained();
        let good = encode_checkpoint(&ck);
        let p = Path::new("mem.ckpt");

        let mut flipped = good.clone();
        let last = flipped.len() - 1;
        flipped[last] ^= 0x40;
        assert!(matches!(decode_checkpoint(&flipped, p), Err(Error::CorruptChecksum { .. })));

        let mut version = good.clone();
        version[4] = 9;
        assert!(matches!(decode_checkpoint(&version, p), Err(Error::VersionMismatch { found: 9, .. })));

        assert!(matches!(decode_checkpoint(&good[..good.len() - 3], p), Err(Error::TruncatedFile { .. })));
        assert!(matches!(decode_checkpoint(b"HGAF", p), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn concurrent_writers_leave_a_valid_file() {
        let dir = tmp();
        let p = dir.path().join("shared.hgaf");
        std::thread::scope(|s| {
            for k in 0..8 {
                let p = &p;
                s.spawn(move || {
                    let m = Matrix::from_fn(50, 50, |_, _| k as f32);
                    write_hgaf(&m, p).unwrap();
                });
            }
        });
        let m = read_hgaf(&p).unwrap();
        let first = m.get(0, 0);
        assert!(m.as_slice().iter().all(|&x| x == first));
    }
}
