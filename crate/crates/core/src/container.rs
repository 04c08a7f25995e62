//! Named-tensor checkpoints and the TMC1 container format.
//!
//! Layout of a `.tmc` file:
//!
//! ```text
//!   0..4        magic "TMC1"
//!   4..12       header length H, u64 little-endian
//!   12..12+H    UTF-8 JSON header (sorted keys, no whitespace)
//!   12+H..      payload: tensors back to back, row-major, little-endian
//! ```
//!
//! Header: `{"meta":{..},"tensors":{name:{"dtype","offset","role","shape"}},"version":1}`.
//! Offsets are relative to the payload start. Tensors are laid out in header
//! order with no padding, so the payload length is exactly the sum of the
//! tensor byte sizes.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;

use serde::de::{MapAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize};
use serde_json::{json, Map, Value};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"TMC1";
pub const FORMAT_VERSION: u32 = 1;

pub const RUNNING_MEAN: &str = "running_mean";
pub const RUNNING_VAR: &str = "running_var";
pub const NUM_BATCHES_TRACKED: &str = "num_batches_tracked";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
    I64,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 | DType::I64 => 8,
        }
    }

    pub fn is_float(self) -> bool {
        !matches!(self, DType::I64)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
            DType::I64 => "i64",
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// What a tensor is to the model: learnable, tracked statistic, or batch counter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Param,
    Buffer,
    Count,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Param => "param",
            Role::Buffer => "buffer",
            Role::Count => "count",
        }
    }
}

/// Scalar storage. Equality is bitwise, so `-0.0 != 0.0` and identical NaN
/// payloads compare equal.
#[derive(Debug, Clone)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    I64(Vec<i64>),
}

impl PartialEq for TensorData {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (TensorData::F32(a), TensorData::F32(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            (TensorData::F64(a), TensorData::F64(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            (TensorData::I64(a), TensorData::I64(b)) => a == b,
            _ => false,
        }
    }
}

impl Eq for TensorData {}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
            TensorData::I64(_) => DType::I64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
            TensorData::I64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Widens every scalar to f64 (exact for f32; i64 beyond 2^53 rounds).
    pub fn to_f64(&self) -> Vec<f64> {
        match self {
            TensorData::F32(v) => v.iter().map(|&x| f64::from(x)).collect(),
            TensorData::F64(v) => v.clone(),
            TensorData::I64(v) => v.iter().map(|&x| x as f64).collect(),
        }
    }

    /// Builds storage of `dtype` from f64 values, rounding once per scalar.
    pub fn from_f64(dtype: DType, values: &[f64]) -> TensorData {
        match dtype {
            DType::F32 => TensorData::F32(values.iter().map(|&x| x as f32).collect()),
            DType::F64 => TensorData::F64(values.to_vec()),
            DType::I64 => TensorData::I64(values.iter().map(|&x| x.round() as i64).collect()),
        }
    }

    fn write_le(&self, out: &mut Vec<u8>) {
        match self {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::I64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }

    fn read_le(dtype: DType, bytes: &[u8]) -> TensorData {
        match dtype {
            DType::F32 => TensorData::F32(
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::F64 => TensorData::F64(
                bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::I64 => TensorData::I64(
                bytes
                    .chunks_exact(8)
                    .map(|c| i64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
        }
    }
}

/// One named tensor. The name lives in the owning [`Checkpoint`] map.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorEntry {
    pub shape: Vec<usize>,
    pub data: TensorData,
    pub role: Role,
}

impl TensorEntry {
    pub fn new(shape: Vec<usize>, data: TensorData, role: Role) -> Self {
        TensorEntry { shape, data, role }
    }

    pub fn param_f32(shape: Vec<usize>, data: Vec<f32>) -> Self {
        Self::new(shape, TensorData::F32(data), Role::Param)
    }

    pub fn param_f64(shape: Vec<usize>, data: Vec<f64>) -> Self {
        Self::new(shape, TensorData::F64(data), Role::Param)
    }

    pub fn buffer(shape: Vec<usize>, data: TensorData) -> Self {
        Self::new(shape, data, Role::Buffer)
    }

    pub fn count(n: i64) -> Self {
        Self::new(Vec::new(), TensorData::I64(vec![n]), Role::Count)
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn nbytes(&self) -> usize {
        self.data.len() * self.dtype().size()
    }

    fn check(&self, name: &str) -> Result<()> {
        if name.is_empty() {
            return Err(Error::Validation("tensor name must be non-empty".into()));
        }
        if self.numel() != self.data.len() {
            return Err(Error::Validation(format!(
                "tensor {name}: shape {:?} holds {} scalars but data has {}",
                self.shape,
                self.numel(),
                self.data.len()
            )));
        }
        match self.role {
            Role::Count => {
                if self.dtype() != DType::I64 || !self.shape.is_empty() {
                    return Err(Error::Validation(format!(
                        "tensor {name}: count tensors must be i64 scalars, got {} {:?}",
                        self.dtype(),
                        self.shape
                    )));
                }
            }
            Role::Param => {
                if !self.dtype().is_float() {
                    return Err(Error::Validation(format!(
                        "tensor {name}: parameters must be floating point, got {}",
                        self.dtype()
                    )));
                }
            }
            Role::Buffer => {}
        }
        Ok(())
    }
}

/// Ordered map of named tensors plus free-form string metadata.
///
/// Tensors iterate in name order, which is also their serialized order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Checkpoint {
    tensors: BTreeMap<String, TensorEntry>,
    pub meta: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a tensor after checking its own invariants. Cross-tensor
    /// invariants (BN triples) are checked by [`Checkpoint::validate`].
    pub fn insert(&mut self, name: impl Into<String>, entry: TensorEntry) -> Result<()> {
        let name = name.into();
        entry.check(&name)?;
        self.tensors.insert(name, entry);
        Ok(())
    }

    pub fn with(mut self, name: impl Into<String>, entry: TensorEntry) -> Result<Self> {
        self.insert(name, entry)?;
        Ok(self)
    }

    pub fn get(&self, name: &str) -> Option<&TensorEntry> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut TensorEntry> {
        self.tensors.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&TensorEntry> {
        self.get(name)
            .ok_or_else(|| Error::Validation(format!("missing tensor {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<TensorEntry> {
        self.tensors.remove(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &TensorEntry)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    /// Prefixes `P` for which any of `P.running_mean`, `P.running_var`,
    /// `P.num_batches_tracked` exists.
    pub fn bn_prefixes(&self) -> Vec<String> {
        let mut out = BTreeSet::new();
        for name in self.tensors.keys() {
            if let Some((prefix, suffix)) = name.rsplit_once('.') {
                if matches!(suffix, RUNNING_MEAN | RUNNING_VAR | NUM_BATCHES_TRACKED) {
                    out.insert(prefix.to_string());
                }
            }
        }
        out.into_iter().collect()
    }

    /// Checks every per-tensor and cross-tensor invariant.
    pub fn validate(&self) -> Result<()> {
        for (name, entry) in &self.tensors {
            entry.check(name)?;
        }
        for prefix in self.bn_prefixes() {
            let mean_name = format!("{prefix}.{RUNNING_MEAN}");
            let var_name = format!("{prefix}.{RUNNING_VAR}");
            let count_name = format!("{prefix}.{NUM_BATCHES_TRACKED}");
            let missing = |n: &str| {
                Error::Validation(format!("batch-norm layer {prefix}: missing {n}"))
            };
            let mean = self.get(&mean_name).ok_or_else(|| missing(&mean_name))?;
            let var = self.get(&var_name).ok_or_else(|| missing(&var_name))?;
            let count = self.get(&count_name).ok_or_else(|| missing(&count_name))?;
            for (n, e) in [(&mean_name, mean), (&var_name, var)] {
                if e.role != Role::Buffer || !e.dtype().is_float() {
                    return Err(Error::Validation(format!(
                        "tensor {n}: running statistics must be floating-point buffers, got {} {}",
                        e.role.as_str(),
                        e.dtype()
                    )));
                }
            }
            if count.role != Role::Count || count.dtype() != DType::I64 {
                return Err(Error::Validation(format!(
                    "tensor {count_name}: expected an i64 count, got {} {}",
                    count.role.as_str(),
                    count.dtype()
                )));
            }
            if mean.shape != var.shape {
                return Err(Error::Validation(format!(
                    "batch-norm layer {prefix}: running_mean shape {:?} != running_var shape {:?}",
                    mean.shape, var.shape
                )));
            }
        }
        Ok(())
    }

    /// Equality of the tensor maps, ignoring metadata.
    pub fn tensors_eq(&self, other: &Checkpoint) -> bool {
        self.tensors == other.tensors
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(|e| e.data.len()).sum()
    }

    /// Serializes to TMC1 bytes. Fails without producing output if the
    /// checkpoint violates an invariant.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut tensors = Map::new();
        let mut offset = 0usize;
        for (name, e) in &self.tensors {
            tensors.insert(
                name.clone(),
                json!({
                    "dtype": e.dtype().as_str(),
                    "offset": offset,
                    "role": e.role.as_str(),
                    "shape": e.shape,
                }),
            );
            offset += e.nbytes();
        }
        let mut header = Map::new();
        header.insert("meta".into(), json!(self.meta));
        header.insert("tensors".into(), Value::Object(tensors));
        header.insert("version".into(), json!(FORMAT_VERSION));
        let header = serde_json::to_vec(&Value::Object(header))?;

        let mut out = Vec::with_capacity(12 + header.len() + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for e in self.tensors.values() {
            e.data.write_le(&mut out);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        if bytes.len() < 12 {
            return Err(Error::Size(format!(
                "file is {} bytes, shorter than the 12-byte preamble",
                bytes.len()
            )));
        }
        if &bytes[0..4] != MAGIC {
            return Err(Error::Format {
                offset: 0,
                msg: format!("bad magic {:?}, expected \"TMC1\"", &bytes[0..4]),
            });
        }
        let header_len = u64::from_le_bytes(bytes[4..12].try_into().unwrap());
        let payload_start = 12u64
            .checked_add(header_len)
            .filter(|&end| end <= bytes.len() as u64)
            .ok_or_else(|| {
                Error::Size(format!(
                    "header length {header_len} exceeds file size {}",
                    bytes.len()
                ))
            })? as usize;

        let header: RawHeader =
            serde_json::from_slice(&bytes[12..payload_start]).map_err(|e| Error::Format {
                offset: 12 + e.column().saturating_sub(1) as u64,
                msg: format!("invalid header: {e}"),
            })?;
        if header.version != FORMAT_VERSION {
            return Err(Error::Format {
                offset: 12,
                msg: format!("unsupported version {}", header.version),
            });
        }

        let payload = &bytes[payload_start..];
        let mut ckpt = Checkpoint {
            tensors: BTreeMap::new(),
            meta: header.meta,
        };
        let mut cursor = 0u64;
        for (name, raw) in header.tensors.0 {
            if ckpt.tensors.contains_key(&name) {
                return Err(Error::Validation(format!("duplicate tensor name {name}")));
            }
            let numel = raw
                .shape
                .iter()
                .try_fold(1u64, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Size(format!("tensor {name}: shape overflows")))?;
            let nbytes = numel
                .checked_mul(raw.dtype.size() as u64)
                .ok_or_else(|| Error::Size(format!("tensor {name}: byte size overflows")))?;
            let end = raw
                .offset
                .checked_add(nbytes)
                .filter(|&end| end <= payload.len() as u64)
                .ok_or_else(|| {
                    Error::Size(format!(
                        "tensor {name}: bytes {}..{} lie beyond the {}-byte payload",
                        raw.offset,
                        raw.offset.saturating_add(nbytes),
                        payload.len()
                    ))
                })?;
            if raw.offset != cursor {
                return Err(Error::Format {
                    offset: payload_start as u64 + raw.offset,
                    msg: format!(
                        "tensor {name}: offset {} breaks contiguous layout (expected {cursor})",
                        raw.offset
                    ),
                });
            }
            cursor = end;
            let data = TensorData::read_le(raw.dtype, &payload[raw.offset as usize..end as usize]);
            let shape = raw.shape.iter().map(|&d| d as usize).collect();
            ckpt.insert(name, TensorEntry::new(shape, data, raw.role))?;
        }
        if cursor != payload.len() as u64 {
            return Err(Error::Size(format!(
                "payload has {} bytes but tensors account for {cursor}",
                payload.len()
            )));
        }
        ckpt.validate()?;
        Ok(ckpt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::load(path)
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    ckpt.save(path)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawHeader {
    version: u32,
    #[serde(default)]
    meta: BTreeMap<String, String>,
    tensors: RawEntries,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEntry {
    dtype: DType,
    shape: Vec<u64>,
    offset: u64,
    role: Role,
}

/// Tensor table in declaration order, keeping duplicates so they can be reported.
struct RawEntries(Vec<(String, RawEntry)>);

impl<'de> Deserialize<'de> for RawEntries {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        struct EntriesVisitor;

        impl<'de> Visitor<'de> for EntriesVisitor {
            type Value = RawEntries;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a map of tensor name to tensor descriptor")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> std::result::Result<RawEntries, A::Error> {
                let mut out = Vec::new();
                while let Some((k, v)) = map.next_entry::<String, RawEntry>()? {
                    out.push((k, v));
                }
                Ok(RawEntries(out))
            }
        }

        deserializer.deserialize_map(EntriesVisitor)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MismatchReason {
    Missing,
    Shape,
    Dtype,
    Role,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mismatch {
    pub name: String,
    pub reason: MismatchReason,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CompatReport {
    pub compatible: bool,
    pub mismatches: Vec<Mismatch>,
}

impl CompatReport {
    fn from_mismatches(mismatches: Vec<Mismatch>) -> Self {
        CompatReport {
            compatible: mismatches.is_empty(),
            mismatches,
        }
    }

    pub fn summary(&self) -> String {
        if self.compatible {
            return "compatible".into();
        }
        let shown: Vec<String> = self
            .mismatches
            .iter()
            .take(5)
            .map(|m| format!("{} ({})", m.name, serde_json::to_value(m.reason).unwrap().as_str().unwrap()))
            .collect();
        let more = self.mismatches.len().saturating_sub(shown.len());
        if more > 0 {
            format!("{} and {more} more", shown.join(", "))
        } else {
            shown.join(", ")
        }
    }
}

/// Compares name sets, shapes, dtypes and roles. At most one mismatch is
/// reported per name, in the order missing, shape, dtype, role.
pub fn validate_compatibility(a: &Checkpoint, b: &Checkpoint) -> CompatReport {
    let names: BTreeSet<&String> = a.names().chain(b.names()).collect();
    let mut mismatches = Vec::new();
    for name in names {
        let reason = match (a.get(name), b.get(name)) {
            (Some(x), Some(y)) => {
                if x.shape != y.shape {
                    Some(MismatchReason::Shape)
                } else if x.dtype() != y.dtype() {
                    Some(MismatchReason::Dtype)
                } else if x.role != y.role {
                    Some(MismatchReason::Role)
                } else {
                    None
                }
            }
            _ => Some(MismatchReason::Missing),
        };
        if let Some(reason) = reason {
            mismatches.push(Mismatch {
                name: name.clone(),
                reason,
            });
        }
    }
    CompatReport::from_mismatches(mismatches)
}

/// Errors with [`Error::Incompatible`] unless every checkpoint matches the first.
pub fn ensure_compatible<'a>(inputs: impl IntoIterator<Item = &'a Checkpoint>) -> Result<()> {
    let mut iter = inputs.into_iter();
    let Some(first) = iter.next() else {
        return Ok(());
    };
    for other in iter {
        let report = validate_compatibility(first, other);
        if !report.compatible {
            return Err(Error::Incompatible(report));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Summary {
    pub format: &'static str,
    pub params: usize,
    pub buffers: usize,
    pub counts: usize,
    pub total_scalars: usize,
    pub bn_prefixes: Vec<String>,
    pub meta: BTreeMap<String, String>,
}

pub fn inspect(ckpt: &Checkpoint) -> Summary {
    let count_role = |r: Role| ckpt.iter().filter(|(_, e)| e.role == r).count();
    Summary {
        format: "basinmerge-inspect/1",
        params: count_role(Role::Param),
        buffers: count_role(Role::Buffer),
        counts: count_role(Role::Count),
        total_scalars: ckpt.num_scalars(),
        bn_prefixes: ckpt.bn_prefixes(),
        meta: ckpt.meta.clone(),
    }
}
