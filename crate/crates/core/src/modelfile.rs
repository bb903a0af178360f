//! Deduplicating binary model container.
//!
//! Layout, all little-endian:
//!
//! ```text
//! "CTTS" | version: u32 | manifest_len: u64 | manifest (UTF-8 JSON)
//! zero padding to a 64-byte boundary
//! blob 0 | padding to 64 | blob 1 | padding to 64 | ...
//! ```
//!
//! Each physical tensor is written once. Slots that share it appear in the
//! manifest with `alias_of` and carry no blob. Blob offsets are relative to
//! the start of the blob section.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dtype::Dtype;
use crate::frontend::{FrontendConfig, Inventory, InventoryError};
use crate::params::{Param, ParamStore, PhysicalParam, SparsityMeta, I8_HEADER_BYTES};
use crate::pipeline::{Stage, TtsModel, COMPONENTS};
use crate::quant::QTensorI8;
use crate::sparse::{BlockShape, BlockSparseMatrix, SPARSE_HEADER_BYTES};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"CTTS";
pub const VERSION: u32 = 1;
/// Magic, version and manifest length.
pub const HEADER_BYTES: usize = 16;
pub const ALIGN: usize = 64;

pub const MODEL_FILE: &str = "model.ctts";
pub const GRAPHEME_FILE: &str = "graphemes.txt";
pub const PHONEME_FILE: &str = "phonemes.txt";

#[derive(Debug, Error)]
pub enum ModelFileError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic at offset {offset}: expected \"CTTS\"")]
    BadMagic { offset: usize },
    #[error("unsupported container version {found} (this build reads {VERSION})")]
    Version { found: u32 },
    #[error("truncated container: {what} needs {needed} bytes, file has {available}")]
    Truncated { what: String, needed: u64, available: u64 },
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error("tensor `{name}`: {detail}")]
    Shape { name: String, detail: String },
    #[error("validation error: {0}")]
    Validation(String),
    #[error("inventory: {0}")]
    Inventory(#[from] InventoryError),
}

pub fn align_up(n: usize) -> usize {
    n.div_ceil(ALIGN) * ALIGN
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub components: Vec<ComponentManifest>,
    pub conventions: Conventions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentManifest {
    pub name: String,
    pub config: serde_json::Value,
    pub sharing: String,
    pub tensors: Vec<TensorDescriptor>,
}

/// One logical slot. Ids are unique across the whole file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorDescriptor {
    pub id: usize,
    pub name: String,
    /// `dense`, `int8` or `block-sparse`.
    pub kind: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale: Option<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub block_shape: Option<BlockShape>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kept_blocks: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alias_of: Option<usize>,
    /// Blob offset from the start of the blob section; absent for aliases.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub offset: Option<u64>,
    /// Unpadded blob length; absent for aliases.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bytes: Option<u64>,
    pub quantizable: bool,
    pub prunable: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sparsity: Option<SparsityMeta>,
}

impl TensorDescriptor {
    pub fn is_alias(&self) -> bool {
        self.alias_of.is_some()
    }
}

/// Fixed conventions a reader needs to run the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conventions {
    pub byte_order: String,
    pub f16: String,
    pub int8: String,
    pub block_sparse: String,
    pub gru_gates: String,
    pub variance: String,
    pub mu_law: String,
}

impl Default for Conventions {
    fn default() -> Self {
        Conventions {
            byte_order: "little-endian".into(),
            f16: "IEEE 754 binary16, widened to f32 on load".into(),
            int8: "f32 scale then codes; symmetric, w = scale * q, q in [-127, 127], round half to even".into(),
            block_sparse: "u32 kept, u32 block_rows, u32 block_cols, u32 reserved; kept u32 linear tile indices \
                           (row-major over the tile grid, ascending); tile values row-major at the stored dtype"
                .into(),
            gru_gates: "z, r, n (update, reset, candidate); w_ih [in x 3h] applied as x.W, w_hh [3h x h]".into(),
            variance: "per-phoneme pitch and energy, quantized into uniform buckets over the configured range, \
                       then expanded to frames by duration"
                .into(),
            mu_law: "mu = 255, 256 classes, class 128 is silence".into(),
        }
    }
}

/// Byte accounting of a container. Rows sum to the file size.
#[derive(Debug, Clone, PartialEq)]
pub struct FootprintReport {
    pub header: usize,
    /// Manifest text plus padding to the first blob.
    pub manifest: usize,
    pub components: Vec<ComponentFootprint>,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComponentFootprint {
    pub name: String,
    pub logical_tensors: usize,
    pub blobs: usize,
    /// Unpadded blob bytes.
    pub raw_bytes: usize,
    /// Blob bytes including alignment padding.
    pub bytes: usize,
}

impl FootprintReport {
    pub fn component(&self, name: &str) -> Option<&ComponentFootprint> {
        self.components.iter().find(|c| c.name == name)
    }

    /// Bytes each extra voice adds when the frontend is shared.
    pub fn per_voice(&self) -> usize {
        self.components.iter().filter(|c| c.name != "frontend").map(|c| c.bytes).sum()
    }

    pub fn blob_count(&self) -> usize {
        self.components.iter().map(|c| c.blobs).sum()
    }

    /// One `name bytes` line per row.
    pub fn lines(&self) -> Vec<String> {
        let mut out = vec![format!("header {}", self.header), format!("manifest {}", self.manifest)];
        for c in &self.components {
            out.push(format!("{} {} ({} blobs, {} slots)", c.name, c.bytes, c.blobs, c.logical_tensors));
        }
        out.push(format!("total {}", self.total));
        out.push(format!("per_voice {}", self.per_voice()));
        out
    }
}

fn write_blob(p: &PhysicalParam, out: &mut Vec<u8>) {
    match &p.param {
        Param::Dense(t) => write_values(t.data(), p.storage, out),
        Param::Quantized(q) => {
            out.extend_from_slice(&q.scale().to_le_bytes());
            out.extend(q.data().iter().map(|&c| c as u8));
        }
        Param::Sparse(m) => {
            let block = m.block();
            let (_, gc) = m.grid();
            for v in [m.kept_blocks().len(), block.rows, block.cols, 0] {
                out.extend_from_slice(&(v as u32).to_le_bytes());
            }
            for &(r, c) in m.kept_blocks() {
                out.extend_from_slice(&(r * gc as u32 + c).to_le_bytes());
            }
            write_values(m.block_data(), p.storage, out);
        }
    }
}

fn write_values(values: &[f32], dtype: Dtype, out: &mut Vec<u8>) {
    match dtype {
        Dtype::F16 => {
            for v in values {
                out.extend_from_slice(&half::f16::from_f32(*v).to_le_bytes());
            }
        }
        _ => {
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
}

fn read_values(bytes: &[u8], dtype: Dtype) -> Vec<f32> {
    match dtype {
        Dtype::F16 => bytes.chunks_exact(2).map(|c| half::f16::from_le_bytes([c[0], c[1]]).to_f32()).collect(),
        _ => bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect(),
    }
}

fn component_config(model: &TtsModel, name: &str) -> Result<(serde_json::Value, String), ModelFileError> {
    let json = |r: serde_json::Result<serde_json::Value>| r.map_err(|e| ModelFileError::Manifest(e.to_string()));
    Ok(match name {
        "frontend" => {
            (json(serde_json::to_value(&model.frontend.config))?, model.frontend.config.plan().describe().into())
        }
        "acoustic" => (json(serde_json::to_value(&model.acoustic.config))?, "none".into()),
        _ => (json(serde_json::to_value(&model.vocoder.config))?, "none".into()),
    })
}

/// Serializes the model. Identical models give identical bytes.
pub fn to_bytes(model: &TtsModel) -> Result<Vec<u8>, ModelFileError> {
    let mut components = Vec::new();
    let mut blobs: Vec<Vec<u8>> = Vec::new();
    let mut next_id = 0usize;
    let mut offset = 0u64;
    for (name, store) in model.stores() {
        let referenced: std::collections::BTreeSet<usize> = store.slots().map(|(_, id)| id).collect();
        if referenced.len() != store.physical_params().len() {
            return Err(ModelFileError::Validation(format!(
                "{name}: {} physical tensors but only {} are referenced by a slot",
                store.physical_params().len(),
                referenced.len()
            )));
        }
        let mut primary_desc = vec![None; store.physical_params().len()];
        let mut tensors = Vec::with_capacity(store.n_slots());
        for (slot, pid) in store.slots() {
            let p = store.physical(pid);
            p.check_storage(slot).map_err(|e| ModelFileError::Validation(e.to_string()))?;
            let mut d = TensorDescriptor {
                id: next_id,
                name: slot.to_string(),
                kind: p.param.kind().to_string(),
                dtype: p.storage,
                shape: p.param.shape(),
                scale: None,
                block_shape: None,
                kept_blocks: None,
                alias_of: None,
                offset: None,
                bytes: None,
                quantizable: p.quantizable,
                prunable: p.prunable,
                sparsity: p.sparsity,
            };
            match &p.param {
                Param::Quantized(q) => d.scale = Some(q.scale()),
                Param::Sparse(m) => {
                    d.block_shape = Some(m.block());
                    d.kept_blocks = Some(m.kept_blocks().len());
                }
                Param::Dense(_) => {}
            }
            match primary_desc[pid] {
                Some(first) => d.alias_of = Some(first),
                None => {
                    primary_desc[pid] = Some(next_id);
                    let mut blob = Vec::with_capacity(p.blob_bytes());
                    write_blob(p, &mut blob);
                    debug_assert_eq!(blob.len(), p.blob_bytes());
                    d.offset = Some(offset);
                    d.bytes = Some(blob.len() as u64);
                    offset += align_up(blob.len()) as u64;
                    blobs.push(blob);
                }
            }
            tensors.push(d);
            next_id += 1;
        }
        let (config, sharing) = component_config(model, name)?;
        components.push(ComponentManifest { name: name.to_string(), config, sharing, tensors });
    }
    let manifest = Manifest { format_version: VERSION, components, conventions: Conventions::default() };
    let text = serde_json::to_vec_pretty(&manifest).map_err(|e| ModelFileError::Manifest(e.to_string()))?;

    let data_start = align_up(HEADER_BYTES + text.len());
    let mut out = Vec::with_capacity(data_start + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(text.len() as u64).to_le_bytes());
    out.extend_from_slice(&text);
    out.resize(data_start, 0);
    for blob in &blobs {
        out.extend_from_slice(blob);
        out.resize(align_up(out.len()), 0);
    }
    Ok(out)
}

/// Writes the container; returns bytes written.
pub fn save(model: &TtsModel, path: &Path) -> Result<usize, ModelFileError> {
    let bytes = to_bytes(model)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    Ok(bytes.len())
}

/// Parses the header and manifest; returns the manifest and the blob
/// section's file offset.
pub fn read_manifest(bytes: &[u8]) -> Result<(Manifest, usize), ModelFileError> {
    let available = bytes.len() as u64;
    if bytes.len() < HEADER_BYTES {
        return Err(ModelFileError::Truncated { what: "header".into(), needed: HEADER_BYTES as u64, available });
    }
    if &bytes[..4] != MAGIC {
        let offset = bytes[..4].iter().zip(MAGIC).position(|(a, b)| a != b).unwrap_or(0);
        return Err(ModelFileError::BadMagic { offset });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(ModelFileError::Version { found: version });
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let end = (HEADER_BYTES as u64).saturating_add(len);
    if end > available {
        return Err(ModelFileError::Truncated { what: "manifest".into(), needed: end, available });
    }
    let manifest: Manifest = serde_json::from_slice(&bytes[HEADER_BYTES..end as usize])
        .map_err(|e| ModelFileError::Manifest(e.to_string()))?;
    if manifest.format_version != version {
        return Err(ModelFileError::Manifest(format!(
            "manifest says version {} but header says {version}",
            manifest.format_version
        )));
    }
    Ok((manifest, align_up(end as usize)))
}

fn shape_err(d: &TensorDescriptor, detail: impl Into<String>) -> ModelFileError {
    ModelFileError::Shape { name: d.name.clone(), detail: detail.into() }
}

fn decode_blob(d: &TensorDescriptor, blob: &[u8]) -> Result<PhysicalParam, ModelFileError> {
    let numel: usize = d.shape.iter().product();
    let param = match (d.kind.as_str(), d.dtype) {
        ("dense", Dtype::F32 | Dtype::F16) => {
            let want = numel * d.dtype.width();
            if blob.len() != want {
                return Err(shape_err(
                    d,
                    format!("{} bytes for shape {:?} at {}, expected {want}", blob.len(), d.shape, d.dtype),
                ));
            }
            Param::Dense(
                Tensor::new(d.shape.clone(), read_values(blob, d.dtype)).map_err(|e| shape_err(d, e.to_string()))?,
            )
        }
        ("int8", Dtype::I8) => {
            if blob.len() != I8_HEADER_BYTES + numel {
                return Err(shape_err(d, format!("{} bytes for {numel} INT8 codes", blob.len())));
            }
            let scale = f32::from_le_bytes(blob[..4].try_into().expect("4 bytes"));
            if d.scale.map(f32::to_bits) != Some(scale.to_bits()) {
                return Err(shape_err(d, format!("blob scale {scale} disagrees with manifest {:?}", d.scale)));
            }
            let codes = blob[4..].iter().map(|&b| b as i8).collect();
            Param::Quantized(QTensorI8::new(d.shape.clone(), codes, scale).map_err(|e| shape_err(d, e.to_string()))?)
        }
        ("block-sparse", Dtype::F32 | Dtype::F16) => decode_sparse(d, blob)?,
        (kind, dtype) => return Err(shape_err(d, format!("unsupported kind {kind} at {dtype}"))),
    };
    Ok(PhysicalParam {
        param,
        storage: d.dtype,
        quantizable: d.quantizable,
        prunable: d.prunable,
        sparsity: d.sparsity,
    })
}

fn decode_sparse(d: &TensorDescriptor, blob: &[u8]) -> Result<Param, ModelFileError> {
    let [rows, cols] = d.shape[..] else {
        return Err(shape_err(d, format!("block-sparse tensor must be 2-D, got {:?}", d.shape)));
    };
    if blob.len() < SPARSE_HEADER_BYTES {
        return Err(shape_err(d, "blob shorter than the sparse header"));
    }
    let word = |i: usize| u32::from_le_bytes(blob[4 * i..4 * i + 4].try_into().expect("4 bytes")) as usize;
    let (kept, block) = (word(0), BlockShape::new(word(1), word(2)));
    if Some(block) != d.block_shape || Some(kept) != d.kept_blocks {
        return Err(shape_err(d, "sparse header disagrees with manifest"));
    }
    if block.rows == 0 || block.cols == 0 || cols % block.cols != 0 {
        return Err(shape_err(d, format!("block {}x{} does not tile {rows}x{cols}", block.rows, block.cols)));
    }
    let want = SPARSE_HEADER_BYTES + kept * (4 + block.area() * d.dtype.width());
    if blob.len() != want {
        return Err(shape_err(d, format!("{} bytes for {kept} kept blocks, expected {want}", blob.len())));
    }
    let gc = (cols / block.cols) as u32;
    let idx_end = SPARSE_HEADER_BYTES + 4 * kept;
    let kept_blocks = blob[SPARSE_HEADER_BYTES..idx_end]
        .chunks_exact(4)
        .map(|c| {
            let i = u32::from_le_bytes([c[0], c[1], c[2], c[3]]);
            (i / gc, i % gc)
        })
        .collect();
    let values = read_values(&blob[idx_end..], d.dtype);
    BlockSparseMatrix::new(rows, cols, block, kept_blocks, values)
        .map(Param::Sparse)
        .map_err(|e| shape_err(d, e.to_string()))
}

fn rebuild_store(c: &ComponentManifest, bytes: &[u8], data_start: usize) -> Result<ParamStore, ModelFileError> {
    let mut store = ParamStore::new();
    // descriptor id -> physical id in the new store
    let mut physical_of = std::collections::HashMap::new();
    for d in &c.tensors {
        let pid = match d.alias_of {
            Some(target) => {
                let &pid = physical_of.get(&target).ok_or_else(|| {
                    ModelFileError::Validation(format!(
                        "`{}` aliases descriptor {target}, which is not an earlier blob",
                        d.name
                    ))
                })?;
                let primary = &c.tensors.iter().find(|t| t.id == target).expect("id was recorded");
                if primary.shape != d.shape || primary.dtype != d.dtype || primary.kind != d.kind {
                    return Err(shape_err(d, "alias disagrees with its target's shape, dtype or kind"));
                }
                store.alias(d.name.clone(), pid).map_err(|e| ModelFileError::Validation(e.to_string()))?;
                pid
            }
            None => {
                let (off, len) = d.offset.zip(d.bytes).ok_or_else(|| {
                    ModelFileError::Validation(format!("`{}` has neither a blob nor an alias", d.name))
                })?;
                let start = data_start as u64 + off;
                let end = start + len;
                if end > bytes.len() as u64 {
                    return Err(ModelFileError::Truncated {
                        what: format!("blob `{}`", d.name),
                        needed: end,
                        available: bytes.len() as u64,
                    });
                }
                let p = decode_blob(d, &bytes[start as usize..end as usize])?;
                store.insert(d.name.clone(), p).map_err(|e| ModelFileError::Validation(e.to_string()))?
            }
        };
        if physical_of.insert(d.id, pid).is_some() {
            return Err(ModelFileError::Validation(format!("descriptor id {} is used twice", d.id)));
        }
    }
    Ok(store)
}

fn config<T: serde::de::DeserializeOwned>(c: &ComponentManifest) -> Result<T, ModelFileError> {
    serde_json::from_value(c.config.clone()).map_err(|e| ModelFileError::Manifest(format!("{} config: {e}", c.name)))
}

/// Parses a container and revalidates every invariant.
pub fn from_bytes(bytes: &[u8]) -> Result<TtsModel, ModelFileError> {
    let (manifest, data_start) = read_manifest(bytes)?;
    let names: Vec<&str> = manifest.components.iter().map(|c| c.name.as_str()).collect();
    if names != COMPONENTS {
        return Err(ModelFileError::Manifest(format!("expected components {COMPONENTS:?}, found {names:?}")));
    }
    let expected_len = data_start + blob_section_bytes(&manifest);
    if bytes.len() < expected_len {
        return Err(ModelFileError::Truncated {
            what: "blob section".into(),
            needed: expected_len as u64,
            available: bytes.len() as u64,
        });
    }
    if bytes.len() > expected_len {
        return Err(ModelFileError::Validation(format!(
            "{} trailing bytes after the last blob",
            bytes.len() - expected_len
        )));
    }
    let c = &manifest.components;
    let fe_cfg: FrontendConfig = config(&c[0])?;
    let model = TtsModel {
        frontend: Stage { config: fe_cfg, store: rebuild_store(&c[0], bytes, data_start)? },
        acoustic: Stage { config: config(&c[1])?, store: rebuild_store(&c[1], bytes, data_start)? },
        vocoder: Stage { config: config(&c[2])?, store: rebuild_store(&c[2], bytes, data_start)? },
    };
    model.synthesizer().map_err(|e| ModelFileError::Validation(format!("{}: {e}", e.stage())))?;
    Ok(model)
}

pub fn load(path: &Path) -> Result<TtsModel, ModelFileError> {
    from_bytes(&fs::read(path)?)
}

fn blob_section_bytes(m: &Manifest) -> usize {
    m.components.iter().flat_map(|c| &c.tensors).filter_map(|d| d.bytes).map(|b| align_up(b as usize)).sum()
}

/// Byte accounting from the container itself.
pub fn footprint_report(bytes: &[u8]) -> Result<FootprintReport, ModelFileError> {
    let (manifest, data_start) = read_manifest(bytes)?;
    let components = manifest
        .components
        .iter()
        .map(|c| {
            let blobs: Vec<usize> = c.tensors.iter().filter_map(|d| d.bytes).map(|b| b as usize).collect();
            ComponentFootprint {
                name: c.name.clone(),
                logical_tensors: c.tensors.len(),
                blobs: blobs.len(),
                raw_bytes: blobs.iter().sum(),
                bytes: blobs.iter().map(|&b| align_up(b)).sum(),
            }
        })
        .collect();
    Ok(FootprintReport { header: HEADER_BYTES, manifest: data_start - HEADER_BYTES, components, total: bytes.len() })
}

/// Writes `model.ctts` and both inventories into `dir`; returns the
/// container size.
pub fn save_dir(
    dir: &Path,
    model: &TtsModel,
    graphemes: &Inventory,
    phonemes: &Inventory,
) -> Result<usize, ModelFileError> {
    model.validate(graphemes, phonemes).map_err(|e| ModelFileError::Validation(e.to_string()))?;
    fs::create_dir_all(dir)?;
    let n = save(model, &dir.join(MODEL_FILE))?;
    graphemes.save(&dir.join(GRAPHEME_FILE))?;
    phonemes.save(&dir.join(PHONEME_FILE))?;
    Ok(n)
}

pub struct ModelDir {
    pub model: TtsModel,
    pub graphemes: Inventory,
    pub phonemes: Inventory,
}

pub fn load_dir(dir: &Path) -> Result<ModelDir, ModelFileError> {
    let model = load(&dir.join(MODEL_FILE))?;
    let graphemes = Inventory::load(&dir.join(GRAPHEME_FILE))?;
    let phonemes = Inventory::load(&dir.join(PHONEME_FILE))?;
    model.validate(&graphemes, &phonemes).map_err(|e| ModelFileError::Validation(e.to_string()))?;
    Ok(ModelDir { model, graphemes, phonemes })
}
