//! Named parameter storage, parameter groups, digests and on-disk formats.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Array2<f64>,
}

/// Ordered collection of named 2-D parameters. Vectors are stored as `1 x d`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    params: Vec<Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a parameter and returns its index.
    pub fn push(&mut self, name: impl Into<String>, value: Array2<f64>) -> usize {
        let name = name.into();
        debug_assert!(self.index_of(&name).is_none(), "duplicate parameter {name}");
        self.params.push(Param { name, value });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn get(&self, idx: usize) -> &Array2<f64> {
        &self.params[idx].value
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut Array2<f64> {
        &mut self.params[idx].value
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.params[idx].name
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut Array2<f64>> {
        self.params.iter_mut().map(|p| &mut p.value)
    }

    /// Total number of scalars.
    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// SHA-256 over names, shapes and the exact bit patterns of every value.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.params {
            h.update(p.name.as_bytes());
            h.update([0u8]);
            h.update((p.value.nrows() as u64).to_le_bytes());
            h.update((p.value.ncols() as u64).to_le_bytes());
            for v in p.value.iter() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn infos(&self) -> Vec<TensorInfo> {
        self.params
            .iter()
            .map(|p| TensorInfo {
                name: p.name.clone(),
                shape: [p.value.nrows(), p.value.ncols()],
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: [usize; 2],
}

impl TensorInfo {
    pub fn numel(&self) -> usize {
        self.shape[0] * self.shape[1]
    }
}

/// A named set of parameters sharing one trainability flag and learning rate.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGroup {
    pub name: String,
    pub tensors: Vec<TensorInfo>,
    pub trainable: bool,
    /// Ignored when `trainable` is false.
    pub learning_rate: f64,
}

impl ParamGroup {
    pub fn from_set(name: impl Into<String>, set: &ParamSet, trainable: bool, learning_rate: f64) -> Self {
        Self {
            name: name.into(),
            tensors: set.infos(),
            trainable,
            learning_rate,
        }
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(TensorInfo::numel).sum()
    }
}

/// Fails if any tensor name appears in more than one group.
pub fn check_partition(groups: &[ParamGroup]) -> Result<()> {
    let mut seen = HashSet::new();
    for g in groups {
        for t in &g.tensors {
            if !seen.insert(t.name.as_str()) {
                return Err(Error::Partition(t.name.clone()));
            }
        }
    }
    Ok(())
}

const MAGIC: &[u8; 8] = b"RSEGARCH";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub group: String,
    pub trainable: bool,
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    manifest: Vec<ManifestEntry>,
    meta: serde_json::Value,
}

/// Versioned binary blob: magic, version, JSON header (manifest + metadata),
/// then every tensor as raw little-endian `f64` in manifest order.
#[derive(Clone, Debug, PartialEq)]
pub struct Archive {
    pub kind: String,
    pub meta: serde_json::Value,
    pub manifest: Vec<ManifestEntry>,
    pub tensors: Vec<Array2<f64>>,
}

impl Archive {
    pub fn new(kind: impl Into<String>, meta: serde_json::Value) -> Self {
        Self {
            kind: kind.into(),
            meta,
            manifest: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add_set(&mut self, group: &str, set: &ParamSet, trainable: bool) {
        for p in set.iter() {
            self.manifest.push(ManifestEntry {
                name: p.name.clone(),
                shape: [p.value.nrows(), p.value.ncols()],
                group: group.to_string(),
                trainable,
            });
            self.tensors.push(p.value.clone());
        }
    }

    /// Rebuilds the parameters of `group` in manifest order.
    pub fn group_set(&self, group: &str) -> ParamSet {
        let mut set = ParamSet::new();
        for (e, t) in self.manifest.iter().zip(&self.tensors) {
            if e.group == group {
                set.push(e.name.clone(), t.clone());
            }
        }
        set
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            kind: self.kind.clone(),
            manifest: self.manifest.clone(),
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let payload: usize = self.tensors.iter().map(|t| t.len() * 8).sum();
        let mut out = Vec::with_capacity(24 + json.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in &self.tensors {
            for v in t.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let err = |m: &str| Error::Format(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(err("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = bytes.get(20..20 + hlen).ok_or_else(|| err("truncated header"))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| Error::Format(e.to_string()))?;
        let mut off = 20 + hlen;
        let mut tensors = Vec::with_capacity(header.manifest.len());
        for e in &header.manifest {
            let n = e.shape[0] * e.shape[1];
            let raw = bytes
                .get(off..off + n * 8)
                .ok_or_else(|| Error::Format(format!("truncated tensor {}", e.name)))?;
            let data: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push(Array2::from_shape_vec((e.shape[0], e.shape[1]), data).unwrap());
            off += n * 8;
        }
        if off != bytes.len() {
            return Err(err("trailing bytes"));
        }
        Ok(Self {
            kind: header.kind,
            meta: header.meta,
            manifest: header.manifest,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(Error::io(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(Error::io(path))?;
        Self::from_bytes(&bytes)
    }
}

pub const WEIGHT_INDEX: &str = "index.txt";

/// Writes `set` as a weight-import directory: `index.txt` with lines
/// `<name> <file>`, each file a one-line shape header followed by raw
/// little-endian `f32` values.
pub fn export_weights(set: &ParamSet, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(Error::io(dir))?;
    let mut index = String::new();
    for (i, p) in set.iter().enumerate() {
        let file = format!("{i:04}.bin");
        index.push_str(&format!("{} {}\n", p.name, file));
        let path = dir.join(&file);
        let mut bytes = format!("{} {}\n", p.value.nrows(), p.value.ncols()).into_bytes();
        for v in p.value.iter() {
            bytes.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        fs::write(&path, bytes).map_err(Error::io(&path))?;
    }
    let path = dir.join(WEIGHT_INDEX);
    fs::File::create(&path)
        .and_then(|mut f| f.write_all(index.as_bytes()))
        .map_err(Error::io(&path))
}

/// Reads a weight-import directory into name → array. A one-number shape
/// header is read as a `1 x d` row.
pub fn read_weights(dir: &Path) -> Result<BTreeMap<String, Array2<f64>>> {
    let index_path = dir.join(WEIGHT_INDEX);
    let index = fs::read_to_string(&index_path).map_err(Error::io(&index_path))?;
    let mut out = BTreeMap::new();
    for (lineno, line) in index.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let (Some(name), Some(file), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(Error::Ingestion(format!(
                "{}:{}: expected `<name> <file>`",
                index_path.display(),
                lineno + 1
            )));
        };
        let path = dir.join(file);
        let bytes = fs::read(&path).map_err(Error::io(&path))?;
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Ingestion(format!("{}: missing shape header", path.display())))?;
        let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| Error::Ingestion(format!("{}: bad header", path.display())))?;
        let dims: Vec<usize> = header
            .split_whitespace()
            .map(|d| d.parse())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Ingestion(format!("{}: bad shape header `{header}`", path.display())))?;
        let (rows, cols) = match dims.as_slice() {
            [d] => (1, *d),
            [r, c] => (*r, *c),
            _ => return Err(Error::Ingestion(format!("{}: expected 1 or 2 dims", path.display()))),
        };
        let raw = &bytes[nl + 1..];
        if raw.len() != rows * cols * 4 {
            return Err(Error::Ingestion(format!(
                "{}: expected {} bytes of f32 data, found {}",
                path.display(),
                rows * cols * 4,
                raw.len()
            )));
        }
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        out.insert(name.to_string(), Array2::from_shape_vec((rows, cols), data).unwrap());
    }
    Ok(out)
}
