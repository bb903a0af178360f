//! Parameter store: named logical slots mapped onto physical tensors.
//!
//! Several slots may resolve to the same physical tensor (weight sharing);
//! footprint is counted over physical tensors only. All three model
//! components keep their weights here, which is also what the model
//! container serializes.

use std::collections::{BTreeSet, HashMap};

use thiserror::Error;

use crate::dtype::{snap_f16, Dtype};
use crate::quant::{quantize_with_report, CalibMethod, CalibReport, QTensorI8, QuantError};
use crate::sparse::{BlockSparseMatrix, PruneSchedule, SPARSE_HEADER_BYTES};
use crate::tensor::{Projection, Tensor};

/// Bytes of an INT8 blob ahead of the codes (the `f32` scale).
pub const I8_HEADER_BYTES: usize = 4;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ParamError {
    #[error("no parameter slot named `{0}`")]
    Missing(String),
    #[error("slot `{slot}` holds a {found} tensor, expected {expected}")]
    Kind { slot: String, expected: &'static str, found: &'static str },
    #[error("slot `{0}` is defined twice")]
    Duplicate(String),
    #[error("slot `{slot}` aliases unknown physical tensor {id}")]
    BadAlias { slot: String, id: usize },
    #[error("slot `{slot}`: expected shape {expected:?}, found {found:?}")]
    Shape { slot: String, expected: Vec<usize>, found: Vec<usize> },
    #[error("invalid storage for `{slot}`: {detail}")]
    Storage { slot: String, detail: String },
    #[error("quantizing `{slot}`: {source}")]
    Quant { slot: String, source: QuantError },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Param {
    Dense(Tensor<f32>),
    Quantized(QTensorI8),
    Sparse(BlockSparseMatrix<f32>),
}

impl Param {
    pub fn kind(&self) -> &'static str {
        match self {
            Param::Dense(_) => "dense",
            Param::Quantized(_) => "int8",
            Param::Sparse(_) => "block-sparse",
        }
    }

    pub fn shape(&self) -> Vec<usize> {
        match self {
            Param::Dense(t) => t.shape().to_vec(),
            Param::Quantized(q) => q.shape().to_vec(),
            Param::Sparse(m) => vec![m.rows(), m.cols()],
        }
    }

    /// Logical element count (dense-equivalent).
    pub fn numel(&self) -> usize {
        self.shape().iter().product()
    }

    /// Elements actually stored.
    pub fn stored_values(&self) -> usize {
        match self {
            Param::Sparse(m) => m.block_data().len(),
            other => other.numel(),
        }
    }

    pub fn as_projection(&self) -> Option<&dyn Projection<f32>> {
        match self {
            Param::Dense(t) => Some(t),
            Param::Quantized(q) => Some(q),
            Param::Sparse(_) => None,
        }
    }
}

/// Sparsification metadata carried alongside a block-sparse tensor.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SparsityMeta {
    pub target: f64,
    pub achieved: f64,
    pub schedule: Option<PruneSchedule>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhysicalParam {
    pub param: Param,
    pub storage: Dtype,
    /// Eligible for INT8 conversion under the quantization policy.
    pub quantizable: bool,
    /// Eligible for block pruning.
    pub prunable: bool,
    pub sparsity: Option<SparsityMeta>,
}

impl PhysicalParam {
    /// Wraps a parameter, rounding float values to `storage` precision so the
    /// in-memory weights equal what a save/load cycle reproduces.
    pub fn new(param: Param, storage: Dtype) -> Self {
        let param = match (param, storage) {
            (Param::Dense(t), Dtype::F16) => Param::Dense(t.map(snap_f16)),
            (Param::Sparse(m), Dtype::F16) => Param::Sparse(m.map_values(snap_f16)),
            (p, _) => p,
        };
        PhysicalParam { param, storage, quantizable: false, prunable: false, sparsity: None }
    }

    pub fn quantizable(mut self, yes: bool) -> Self {
        self.quantizable = yes;
        self
    }

    pub fn prunable(mut self, yes: bool) -> Self {
        self.prunable = yes;
        self
    }

    /// Bytes of this tensor's serialized blob (before alignment).
    pub fn blob_bytes(&self) -> usize {
        match &self.param {
            Param::Dense(t) => t.len() * self.storage.width(),
            Param::Quantized(q) => I8_HEADER_BYTES + q.len(),
            Param::Sparse(m) => crate::sparse::sparse_footprint_bytes(m, self.storage),
        }
    }

    /// Bytes the same tensor would occupy stored densely at `dtype`.
    pub fn dense_bytes_at(&self, dtype: Dtype) -> usize {
        self.param.numel() * dtype.width()
    }

    pub(crate) fn check_storage(&self, slot: &str) -> Result<(), ParamError> {
        let ok = matches!(
            (&self.param, self.storage),
            (Param::Dense(_) | Param::Sparse(_), Dtype::F32 | Dtype::F16) | (Param::Quantized(_), Dtype::I8)
        );
        if ok {
            Ok(())
        } else {
            Err(ParamError::Storage {
                slot: slot.to_string(),
                detail: format!("{} tensor cannot be stored as {}", self.param.kind(), self.storage),
            })
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    physical: Vec<PhysicalParam>,
    slots: Vec<(String, usize)>,
    index: HashMap<String, usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ParamCount {
    pub logical_tensors: usize,
    pub physical_tensors: usize,
    pub logical_params: usize,
    pub physical_params: usize,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a new physical tensor under `slot`; returns its physical id.
    pub fn insert(&mut self, slot: impl Into<String>, param: PhysicalParam) -> Result<usize, ParamError> {
        let slot = slot.into();
        param.check_storage(&slot)?;
        let id = self.physical.len();
        self.bind(slot, id)?;
        self.physical.push(param);
        Ok(id)
    }

    /// Points `slot` at an existing physical tensor.
    pub fn alias(&mut self, slot: impl Into<String>, id: usize) -> Result<(), ParamError> {
        let slot = slot.into();
        if id >= self.physical.len() {
            return Err(ParamError::BadAlias { slot, id });
        }
        self.bind(slot, id)
    }

    fn bind(&mut self, slot: String, id: usize) -> Result<(), ParamError> {
        if self.index.contains_key(&slot) {
            return Err(ParamError::Duplicate(slot));
        }
        self.index.insert(slot.clone(), self.slots.len());
        self.slots.push((slot, id));
        Ok(())
    }

    pub fn physical_id(&self, slot: &str) -> Result<usize, ParamError> {
        self.index.get(slot).map(|&i| self.slots[i].1).ok_or_else(|| ParamError::Missing(slot.to_string()))
    }

    pub fn get(&self, slot: &str) -> Result<&Param, ParamError> {
        Ok(&self.physical[self.physical_id(slot)?].param)
    }

    pub fn entry(&self, slot: &str) -> Result<&PhysicalParam, ParamError> {
        Ok(&self.physical[self.physical_id(slot)?])
    }

    pub fn dense(&self, slot: &str) -> Result<&Tensor<f32>, ParamError> {
        match self.get(slot)? {
            Param::Dense(t) => Ok(t),
            other => Err(ParamError::Kind { slot: slot.to_string(), expected: "dense", found: other.kind() }),
        }
    }

    pub fn projection(&self, slot: &str) -> Result<&dyn Projection<f32>, ParamError> {
        let p = self.get(slot)?;
        p.as_projection().ok_or_else(|| ParamError::Kind {
            slot: slot.to_string(),
            expected: "dense or int8",
            found: p.kind(),
        })
    }

    /// Fetches a slot and checks its logical shape.
    pub fn shaped(&self, slot: &str, shape: &[usize]) -> Result<&Param, ParamError> {
        let p = self.get(slot)?;
        if p.shape() != shape {
            return Err(ParamError::Shape { slot: slot.to_string(), expected: shape.to_vec(), found: p.shape() });
        }
        Ok(p)
    }

    pub fn physical(&self, id: usize) -> &PhysicalParam {
        &self.physical[id]
    }

    /// Mutable access to a physical tensor; visible through every alias.
    pub fn physical_mut(&mut self, id: usize) -> &mut PhysicalParam {
        &mut self.physical[id]
    }

    pub fn physical_params(&self) -> &[PhysicalParam] {
        &self.physical
    }

    /// Logical slots in definition order with their physical ids.
    pub fn slots(&self) -> impl Iterator<Item = (&str, usize)> {
        self.slots.iter().map(|(s, id)| (s.as_str(), *id))
    }

    pub fn n_slots(&self) -> usize {
        self.slots.len()
    }

    pub fn contains(&self, slot: &str) -> bool {
        self.index.contains_key(slot)
    }

    /// Slot that first introduced each physical tensor.
    pub fn primary_slot(&self, id: usize) -> Option<&str> {
        self.slots.iter().find(|(_, p)| *p == id).map(|(s, _)| s.as_str())
    }

    pub fn count(&self) -> ParamCount {
        let referenced: BTreeSet<usize> = self.slots.iter().map(|(_, id)| *id).collect();
        ParamCount {
            logical_tensors: self.slots.len(),
            physical_tensors: referenced.len(),
            logical_params: self.slots.iter().map(|(_, id)| self.physical[*id].param.numel()).sum(),
            physical_params: referenced.iter().map(|&id| self.physical[id].param.numel()).sum(),
        }
    }

    /// Serialized bytes over physical tensors (each counted once).
    pub fn physical_bytes(&self) -> usize {
        self.physical.iter().map(PhysicalParam::blob_bytes).sum()
    }

    /// Serialized bytes if every slot carried its own copy.
    pub fn logical_bytes(&self) -> usize {
        self.slots.iter().map(|(_, id)| self.physical[*id].blob_bytes()).sum()
    }

    /// A copy where every slot owns a private physical tensor.
    pub fn expand_aliases(&self) -> ParamStore {
        let mut out = ParamStore::new();
        for (slot, id) in &self.slots {
            out.insert(slot.clone(), self.physical[*id].clone()).expect("slots are unique in the source store");
        }
        out
    }

    /// Replaces the parameter held by physical tensor `id`.
    pub fn replace(&mut self, id: usize, param: PhysicalParam) -> Result<(), ParamError> {
        let slot = self.primary_slot(id).unwrap_or("?").to_string();
        param.check_storage(&slot)?;
        self.physical[id] = param;
        Ok(())
    }

    /// Converts every quantizable dense tensor to INT8. Tensors already in
    /// INT8 are listed in `skipped` and left untouched.
    pub fn quantize(&mut self, method: CalibMethod) -> Result<QuantizeOutcome, ParamError> {
        let mut out = QuantizeOutcome::default();
        for id in 0..self.physical.len() {
            if !self.physical[id].quantizable {
                continue;
            }
            let name = self.primary_slot(id).unwrap_or("?").to_string();
            let entry = &self.physical[id];
            let (q, report) = match &entry.param {
                Param::Dense(t) => quantize_with_report(&name, t, method)
                    .map_err(|source| ParamError::Quant { slot: name.clone(), source })?,
                Param::Quantized(_) => {
                    out.skipped.push(name);
                    continue;
                }
                Param::Sparse(_) => continue,
            };
            let mut updated = PhysicalParam::new(Param::Quantized(q), Dtype::I8).quantizable(true);
            updated.prunable = entry.prunable;
            self.physical[id] = updated;
            out.reports.push(report);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct QuantizeOutcome {
    pub reports: Vec<CalibReport>,
    /// Primary slot names of tensors that were already INT8.
    pub skipped: Vec<String>,
}

/// How a freshly built tensor is filled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform in `±bound`.
    Uniform(f32),
    Const(f32),
}

impl Init {
    /// Uniform in `±1/sqrt(fan_in)`.
    pub fn fan_in(fan_in: usize) -> Self {
        Init::Uniform(1.0 / (fan_in.max(1) as f32).sqrt())
    }
}

/// One logical slot to create: name, shape, initializer and storage policy.
#[derive(Debug, Clone, PartialEq)]
pub struct SlotSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
    pub storage: Dtype,
    pub quantizable: bool,
    pub prunable: bool,
}

impl SlotSpec {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, init: Init) -> Self {
        SlotSpec { name: name.into(), shape, init, storage: Dtype::F32, quantizable: false, prunable: false }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Builds a store from slot specs. `physical_key` names the physical tensor
/// each slot resolves to; slots with equal keys share one tensor, which is
/// initialized (in slot order, from one seeded stream) when first seen.
pub fn build_store(
    specs: &[SlotSpec],
    physical_key: impl Fn(&str) -> String,
    seed: u64,
) -> Result<ParamStore, ParamError> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let mut by_key: HashMap<String, (usize, Vec<usize>)> = HashMap::new();
    for spec in specs {
        let key = physical_key(&spec.name);
        if let Some((id, shape)) = by_key.get(&key) {
            if *shape != spec.shape {
                return Err(ParamError::Shape {
                    slot: spec.name.clone(),
                    expected: shape.clone(),
                    found: spec.shape.clone(),
                });
            }
            store.alias(spec.name.clone(), *id)?;
            continue;
        }
        let n = spec.numel();
        let data = match spec.init {
            Init::Uniform(bound) => (0..n).map(|_| rng.gen_range(-bound..=bound)).collect(),
            Init::Const(v) => vec![v; n],
        };
        let tensor = Tensor::new(spec.shape.clone(), data).expect("spec shape");
        let param = PhysicalParam::new(Param::Dense(tensor), spec.storage)
            .quantizable(spec.quantizable)
            .prunable(spec.prunable);
        let id = store.insert(spec.name.clone(), param)?;
        by_key.insert(key, (id, spec.shape.clone()));
    }
    Ok(store)
}

/// Counts logical and physical parameters of a slot layout without
/// allocating it.
pub fn count_specs(specs: &[SlotSpec], physical_key: impl Fn(&str) -> String) -> ParamCount {
    let mut seen = std::collections::HashSet::new();
    let mut count = ParamCount::default();
    for spec in specs {
        count.logical_tensors += 1;
        count.logical_params += spec.numel();
        if seen.insert(physical_key(&spec.name)) {
            count.physical_tensors += 1;
            count.physical_params += spec.numel();
        }
    }
    count
}

/// Sparse layout size helper used by the container for validation.
pub fn sparse_blob_bytes(kept: usize, block_area: usize, dtype: Dtype) -> usize {
    SPARSE_HEADER_BYTES + kept * (crate::sparse::BLOCK_INDEX_BYTES + block_area * dtype.width())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense(n: usize, v: f32) -> PhysicalParam {
        PhysicalParam::new(Param::Dense(Tensor::filled(vec![n], v)), Dtype::F32)
    }

    #[test]
    fn aliases_share_storage() {
        let mut s = ParamStore::new();
        let id = s.insert("a", dense(4, 1.0)).unwrap();
        s.alias("b", id).unwrap();
        s.insert("c", dense(2, 0.0)).unwrap();
        let c = s.count();
        assert_eq!(c.logical_tensors, 3);
        assert_eq!(c.physical_tensors, 2);
        assert_eq!(c.logical_params, 10);
        assert_eq!(c.physical_params, 6);
        assert_eq!(s.physical_bytes(), 24);
        assert_eq!(s.logical_bytes(), 40);
        if let Param::Dense(t) = &mut s.physical_mut(id).param {
            t.data_mut()[0] = 7.0;
        }
        assert_eq!(s.dense("b").unwrap().data()[0], 7.0);
    }

    #[test]
    fn duplicate_and_missing_slots() {
        let mut s = ParamStore::new();
        s.insert("a", dense(1, 0.0)).unwrap();
        assert_eq!(s.insert("a", dense(1, 0.0)), Err(ParamError::Duplicate("a".into())));
        assert!(matches!(s.alias("z", 9), Err(ParamError::BadAlias { .. })));
        assert!(matches!(s.get("nope"), Err(ParamError::Missing(_))));
    }

    #[test]
    fn expansion_removes_sharing() {
        let mut s = ParamStore::new();
        let id = s.insert("a", dense(3, 2.0)).unwrap();
        s.alias("b", id).unwrap();
        let e = s.expand_aliases();
        assert_eq!(e.count().physical_tensors, 2);
        assert_eq!(e.dense("b").unwrap(), s.dense("b").unwrap());
    }

    #[test]
    fn f16_storage_snaps_values() {
        let p = PhysicalParam::new(Param::Dense(Tensor::vector(vec![0.1f32])), Dtype::F16);
        let Param::Dense(t) = &p.param else { unreachable!() };
        assert_eq!(t.data()[0], half::f16::from_f32(0.1).to_f32());
        assert_eq!(p.blob_bytes(), 2);
    }

    #[test]
    fn storage_mismatch_rejected() {
        let mut s = ParamStore::new();
        let bad = PhysicalParam::new(Param::Dense(Tensor::vector(vec![0.0f32])), Dtype::I8);
        assert!(matches!(s.insert("x", bad), Err(ParamError::Storage { .. })));
    }
}
