//! Checkpoint container I/O.
//!
//! Layout: an 8-byte little-endian header length `N`, `N` bytes of a JSON
//! object mapping tensor names to `{"data_offsets", "dtype", "shape"}`, then
//! the raw little-endian row-major tensor bytes. Offsets are relative to the
//! start of the data section. An optional `__metadata__` entry holds a flat
//! string map; the checkpoint name lives there under `name`.
//!
//! Writers emit keys in sorted order, lay tensors out contiguously in name
//! order and pad the header with spaces to an 8-byte boundary, so a given
//! checkpoint always serializes to the same bytes.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;
use serde_json::Value;

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Conventional file extension for checkpoint containers.
pub const EXTENSION: &str = "ckpt.st";

const METADATA_KEY: &str = "__metadata__";
const NAME_KEY: &str = "name";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn as_str(self) -> &'static str {
        match self {
            DType::F32 => "F32",
            DType::F64 => "F64",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "F32" => Some(DType::F32),
            "F64" => Some(DType::F64),
            _ => None,
        }
    }

    pub fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Debug, Clone)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }
}

/// A dense row-major tensor.
#[derive(Debug, Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: TensorData,
}

/// Bitwise equality: NaN payloads and signed zeros must match too.
impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        if self.shape != other.shape {
            return false;
        }
        match (&self.data, &other.data) {
            (TensorData::F32(a), TensorData::F32(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            (TensorData::F64(a), TensorData::F64(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            _ => false,
        }
    }
}

fn element_count(shape: &[usize]) -> Option<usize> {
    shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d))
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: TensorData) -> Result<Self> {
        let numel =
            element_count(&shape).ok_or_else(|| Error::Shape(format!("element count of {shape:?} overflows")))?;
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {numel} elements, buffer has {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>, dtype: DType) -> Self {
        let n = element_count(&shape).expect("shape overflow");
        let data = match dtype {
            DType::F32 => TensorData::F32(vec![0.0; n]),
            DType::F64 => TensorData::F64(vec![0.0; n]),
        };
        Tensor { shape, data }
    }

    /// Builds a tensor of `dtype` from float64 values, rounding to nearest for F32.
    pub fn from_f64(shape: Vec<usize>, values: Vec<f64>, dtype: DType) -> Result<Self> {
        let data = match dtype {
            DType::F64 => TensorData::F64(values),
            DType::F32 => TensorData::F32(values.into_iter().map(|v| v as f32).collect()),
        };
        Tensor::new(shape, data)
    }

    pub fn from_matrix(m: &Matrix, dtype: DType) -> Self {
        let mut values = Vec::with_capacity(m.nrows() * m.ncols());
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                values.push(m[(i, j)]);
            }
        }
        Tensor::from_f64(vec![m.nrows(), m.ncols()], values, dtype).expect("consistent shape")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dtype(&self) -> DType {
        match self.data {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
        }
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        match &self.data {
            TensorData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::F64(v) => v.clone(),
        }
    }

    /// Views a 2D tensor as a float64 matrix.
    pub fn to_matrix(&self) -> Result<Matrix> {
        if self.shape.len() != 2 {
            return Err(Error::Shape(format!(
                "expected a 2D tensor, got shape {:?}",
                self.shape
            )));
        }
        Ok(Matrix::from_row_slice(self.shape[0], self.shape[1], &self.to_f64()))
    }

    fn write_le(&self, out: &mut Vec<u8>) {
        match &self.data {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }
}

/// One model's parameters: a name plus an ordered map of named tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub name: String,
    /// Free-form string metadata stored alongside the tensors.
    pub metadata: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn new(name: impl Into<String>) -> Self {
        Checkpoint {
            name: name.into(),
            ..Default::default()
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Option<Tensor> {
        self.tensors.insert(name.into(), tensor)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn matrix(&self, name: &str) -> Result<Matrix> {
        self.get(name)
            .ok_or_else(|| Error::InvalidInput(format!("no tensor named {name:?}")))?
            .to_matrix()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        #[derive(Serialize)]
        #[serde(untagged)]
        enum Entry<'a> {
            // field order is alphabetical so the output keys are sorted
            Tensor {
                data_offsets: [usize; 2],
                dtype: &'static str,
                shape: &'a [usize],
            },
            Metadata(BTreeMap<&'a str, &'a str>),
        }

        let mut header: BTreeMap<&str, Entry> = BTreeMap::new();
        let mut meta: BTreeMap<&str, &str> = self.metadata.iter().map(|(k, v)| (k.as_str(), v.as_str())).collect();
        if !self.name.is_empty() {
            meta.insert(NAME_KEY, &self.name);
        }
        if !meta.is_empty() {
            header.insert(METADATA_KEY, Entry::Metadata(meta));
        }
        let mut offset = 0usize;
        for (name, t) in &self.tensors {
            let len = t.numel() * t.dtype().width();
            header.insert(
                name,
                Entry::Tensor {
                    data_offsets: [offset, offset + len],
                    dtype: t.dtype().as_str(),
                    shape: &t.shape,
                },
            );
            offset += len;
        }
        let mut json = serde_json::to_vec(&header).expect("header serializes");
        while !json.len().is_multiple_of(8) {
            json.push(b' ');
        }

        let mut out = Vec::with_capacity(8 + json.len() + offset);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in self.tensors.values() {
            t.write_le(&mut out);
        }
        out
    }

    /// Parses container bytes. `default_name` is used when the file has no stored name.
    pub fn from_bytes(bytes: &[u8], default_name: &str) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::format(0, "truncated header length"));
        }
        let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap());
        let data_start = 8u64
            .checked_add(header_len)
            .filter(|&end| end <= bytes.len() as u64)
            .ok_or_else(|| {
                Error::format(
                    0,
                    format!(
                        "truncated header: length field {header_len} exceeds file size {}",
                        bytes.len()
                    ),
                )
            })? as usize;
        let header_bytes = &bytes[8..data_start];
        let header: Value = serde_json::from_slice(header_bytes).map_err(|e| {
            let pos = 8 + line_col_to_offset(header_bytes, e.line(), e.column()) as u64;
            Error::format(pos, format!("malformed header: {e}"))
        })?;
        let Value::Object(entries) = header else {
            return Err(Error::format(8, "malformed header: not a JSON object"));
        };

        let key_pos = |key: &str| -> u64 {
            let quoted = serde_json::to_string(key).unwrap();
            8 + find_subslice(header_bytes, quoted.as_bytes()).unwrap_or(0) as u64
        };
        let data = &bytes[data_start..];

        let mut ckpt = Checkpoint::new(default_name);
        let mut spans: Vec<(usize, usize, &str)> = Vec::new();
        for (key, value) in &entries {
            if key == METADATA_KEY {
                let Value::Object(meta) = value else {
                    return Err(Error::format(
                        key_pos(key),
                        "malformed header: metadata is not an object",
                    ));
                };
                for (mk, mv) in meta {
                    let Value::String(s) = mv else {
                        return Err(Error::format(
                            key_pos(key),
                            format!("malformed header: metadata value for {mk:?} is not a string"),
                        ));
                    };
                    if mk == NAME_KEY {
                        ckpt.name = s.clone();
                    } else {
                        ckpt.metadata.insert(mk.clone(), s.clone());
                    }
                }
                continue;
            }

            let pos = key_pos(key);
            let bad = |what: &str| Error::format(pos, format!("malformed header: tensor {key:?}: {what}"));
            let Value::Object(fields) = value else {
                return Err(bad("entry is not an object"));
            };
            let dtype_str = fields
                .get("dtype")
                .and_then(Value::as_str)
                .ok_or_else(|| bad("missing dtype"))?;
            let dtype = DType::parse(dtype_str)
                .ok_or_else(|| Error::format(pos, format!("unknown dtype {dtype_str:?} for tensor {key:?}")))?;
            let shape = fields
                .get("shape")
                .and_then(Value::as_array)
                .ok_or_else(|| bad("missing shape"))?
                .iter()
                .map(|d| d.as_u64().map(|d| d as usize))
                .collect::<Option<Vec<usize>>>()
                .ok_or_else(|| bad("shape entries must be non-negative integers"))?;
            let offsets = fields
                .get("data_offsets")
                .and_then(Value::as_array)
                .filter(|a| a.len() == 2)
                .and_then(|a| Some((a[0].as_u64()? as usize, a[1].as_u64()? as usize)))
                .ok_or_else(|| bad("data_offsets must be two non-negative integers"))?;
            let (begin, end) = offsets;
            let abs = (data_start + begin) as u64;
            if end < begin {
                return Err(Error::format(
                    abs,
                    format!("tensor {key:?}: data_offsets end before begin"),
                ));
            }
            if end > data.len() {
                return Err(Error::format(
                    (data_start + data.len()) as u64,
                    format!(
                        "truncated data: tensor {key:?} ends at offset {end}, data section has {} bytes",
                        data.len()
                    ),
                ));
            }
            let numel = element_count(&shape).ok_or_else(|| bad("element count overflows"))?;
            if numel.checked_mul(dtype.width()) != Some(end - begin) {
                return Err(Error::format(
                    abs,
                    format!(
                        "tensor {key:?}: {} bytes declared, shape {shape:?} of {} needs {}",
                        end - begin,
                        dtype.as_str(),
                        numel * dtype.width()
                    ),
                ));
            }
            let raw = &data[begin..end];
            let tdata = match dtype {
                DType::F32 => TensorData::F32(
                    raw.chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                DType::F64 => TensorData::F64(
                    raw.chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
            };
            spans.push((begin, end, key));
            ckpt.tensors.insert(key.clone(), Tensor { shape, data: tdata });
        }

        spans.sort_unstable();
        for pair in spans.windows(2) {
            let (_, prev_end, prev) = pair[0];
            let (begin, _, cur) = pair[1];
            if begin < prev_end {
                return Err(Error::format(
                    (data_start + begin) as u64,
                    format!("overlapping data offsets: {cur:?} starts inside {prev:?}"),
                ));
            }
        }
        Ok(ckpt)
    }
}

fn line_col_to_offset(bytes: &[u8], line: usize, column: usize) -> usize {
    let mut offset = 0;
    for _ in 1..line {
        match bytes[offset..].iter().position(|&b| b == b'\n') {
            Some(p) => offset += p + 1,
            None => break,
        }
    }
    (offset + column.saturating_sub(1)).min(bytes.len())
}

fn find_subslice(haystack: &[u8], needle: &[u8]) -> Option<usize> {
    haystack.windows(needle.len()).position(|w| w == needle)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let stem = path
        .file_name()
        .and_then(|n| n.to_str())
        .map(|n| n.split('.').next().unwrap_or(n))
        .unwrap_or("");
    Checkpoint::from_bytes(&bytes, stem)
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, ckpt.to_bytes()).map_err(|e| Error::io(path, e))
}

/// Checks that two checkpoints have identical tensor names, shapes and dtypes.
pub fn check_compatible(a: &Checkpoint, b: &Checkpoint) -> Result<()> {
    let mut bad: Vec<String> = Vec::new();
    for (name, ta) in &a.tensors {
        match b.tensors.get(name) {
            Some(tb) if tb.shape == ta.shape && tb.dtype() == ta.dtype() => {}
            _ => bad.push(name.clone()),
        }
    }
    bad.extend(b.tensors.keys().filter(|k| !a.tensors.contains_key(*k)).cloned());
    if bad.is_empty() {
        Ok(())
    } else {
        bad.sort();
        Err(Error::Incompatible { names: bad })
    }
}

/// Per-tensor differences `fine_tuned − pretrained` for one task.
///
/// Deltas are always stored as F64. For F32 checkpoints the difference of
/// two F32 values is then exact, so adding it back reproduces the fine-tuned
/// weights bit for bit.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskVector {
    pub task_id: String,
    pub deltas: BTreeMap<String, Tensor>,
}

impl TaskVector {
    pub fn delta_matrix(&self, name: &str) -> Result<Matrix> {
        self.deltas
            .get(name)
            .ok_or_else(|| Error::InvalidInput(format!("task vector {:?} has no tensor {name:?}", self.task_id)))?
            .to_matrix()
    }

    /// `pretrained + Δ`, rounded back to each pretrained tensor's dtype.
    pub fn apply_to(&self, pretrained: &Checkpoint) -> Result<Checkpoint> {
        let mut out = Checkpoint::new(self.task_id.clone());
        for (name, base) in &pretrained.tensors {
            let delta = self.deltas.get(name).ok_or_else(|| Error::Incompatible {
                names: vec![name.clone()],
            })?;
            if delta.shape != base.shape {
                return Err(Error::Incompatible {
                    names: vec![name.clone()],
                });
            }
            let values = base.to_f64().iter().zip(delta.to_f64()).map(|(w, d)| w + d).collect();
            out.insert(
                name.clone(),
                Tensor::from_f64(base.shape.clone(), values, base.dtype())?,
            );
        }
        Ok(out)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::new(self.task_id.clone());
        ckpt.metadata.insert("kind".into(), "task_vector".into());
        ckpt.tensors = self.deltas.clone();
        ckpt
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Self {
        TaskVector {
            task_id: ckpt.name,
            deltas: ckpt.tensors,
        }
    }
}

pub fn compute_task_vector(
    pretrained: &Checkpoint,
    fine_tuned: &Checkpoint,
    task_id: impl Into<String>,
) -> Result<TaskVector> {
    check_compatible(pretrained, fine_tuned)?;
    let deltas = pretrained
        .tensors
        .iter()
        .map(|(name, base)| {
            let ft = &fine_tuned.tensors[name];
            let values: Vec<f64> = ft.to_f64().iter().zip(base.to_f64()).map(|(w, w0)| w - w0).collect();
            let t = Tensor::from_f64(base.shape.clone(), values, DType::F64)?;
            Ok((name.clone(), t))
        })
        .collect::<Result<_>>()?;
    Ok(TaskVector {
        task_id: task_id.into(),
        deltas,
    })
}
