//! Model checkpoint files.
//!
//! Layout (little-endian): 8-byte magic `HTCNCKPT`, `u32` version, `u64`
//! length and bytes of the canonical ModelConfig JSON, `u32` tensor count,
//! then per tensor: `u32` name length, UTF-8 name, `u8` dtype code, `u32`
//! rank, `u64` per dimension and the raw values. Names are `param.*` for
//! weights, `buffer.*` for running statistics and `adam.m.*`, `adam.v.*`,
//! `adam.step` for optimizer state.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use ndarray::{Array2, ArrayD, ArrayViewD, IxDyn};
use sha2::{Digest, Sha256};

use super::{Model, ModelBuffers, ModelConfig};
use crate::error::{Error, Result};
use crate::nn::{AdamState, Params};
use crate::real::{DType, Real};

pub const CKPT_MAGIC: &[u8; 8] = b"HTCNCKPT";
pub const CKPT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T: Real> {
    pub model: Model<T>,
    pub buffers: ModelBuffers<T>,
    pub optimizer: Option<AdamState<T>>,
}

struct Tensor {
    dtype: DType,
    dims: Vec<usize>,
    data: Vec<u8>,
}

impl Tensor {
    fn from_view<T: Real>(t: &ArrayViewD<'_, T>) -> Tensor {
        let mut data = Vec::with_capacity(t.len() * T::DTYPE.width());
        for &v in t.iter() {
            match T::DTYPE {
                DType::F32 => data.extend_from_slice(&(v.as_f64() as f32).to_le_bytes()),
                DType::F64 => data.extend_from_slice(&v.as_f64().to_le_bytes()),
            }
        }
        Tensor { dtype: T::DTYPE, dims: t.shape().to_vec(), data }
    }

    fn values<T: Real>(&self) -> Vec<T> {
        match self.dtype {
            DType::F32 => self.data.chunks_exact(4).map(|c| T::of(f32::from_le_bytes(c.try_into().unwrap()) as f64)).collect(),
            DType::F64 => self.data.chunks_exact(8).map(|c| T::of(f64::from_le_bytes(c.try_into().unwrap()))).collect(),
        }
    }

    fn array<T: Real>(&self) -> ArrayD<T> {
        ArrayD::from_shape_vec(IxDyn(&self.dims), self.values()).expect("length checked on read")
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("checkpoint truncated".into()))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Format("length overflows".into()))
    }
}

fn fill<T: Real>(name: &str, dst: &mut ndarray::ArrayViewMutD<'_, T>, tensors: &HashMap<String, Tensor>) -> Result<()> {
    let t = tensors.get(name).ok_or_else(|| Error::Format(format!("checkpoint lacks tensor {name}")))?;
    if t.dims != dst.shape() {
        return Err(Error::Format(format!("tensor {name} has shape {:?}, expected {:?}", t.dims, dst.shape())));
    }
    for (d, v) in dst.iter_mut().zip(t.values::<T>()) {
        *d = v;
    }
    Ok(())
}

impl<T: Real> Checkpoint<T> {
    pub fn new(model: Model<T>, buffers: ModelBuffers<T>) -> Self {
        Checkpoint { model, buffers, optimizer: None }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut named: Vec<(String, Tensor)> = Vec::new();
        for (n, t) in self.model.tensors() {
            named.push((format!("param.{n}"), Tensor::from_view(&t)));
        }
        for (n, t) in self.buffers.tensors() {
            named.push((format!("buffer.{n}"), Tensor::from_view(&t)));
        }
        if let Some(opt) = &self.optimizer {
            for ((n, _), m) in self.model.tensors().iter().zip(&opt.m) {
                named.push((format!("adam.m.{n}"), Tensor::from_view(&m.view())));
            }
            for ((n, _), v) in self.model.tensors().iter().zip(&opt.v) {
                named.push((format!("adam.v.{n}"), Tensor::from_view(&v.view())));
            }
            let step = Tensor { dtype: DType::F64, dims: vec![1], data: (opt.step as f64).to_le_bytes().to_vec() };
            named.push(("adam.step".into(), step));
        }
        let json = self.model.config.to_canonical_json();
        let mut out = Vec::new();
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(json.as_bytes());
        out.extend_from_slice(&(named.len() as u32).to_le_bytes());
        for (name, t) in &named {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.dtype.code());
            out.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
            for &d in &t.dims {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&t.data);
        }
        out
    }

    /// Parses a checkpoint, converting stored values to `T`.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(8)? != CKPT_MAGIC {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != CKPT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let json_len = r.len()?;
        let json = std::str::from_utf8(r.take(json_len)?).map_err(|_| Error::Format("config is not UTF-8".into()))?;
        let config: ModelConfig = serde_json::from_str(json)?;
        let count = r.u32()?;
        let mut tensors = HashMap::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            let dtype = DType::from_code(r.u8()?).ok_or_else(|| Error::Format(format!("tensor {name}: unknown dtype")))?;
            let rank = r.u32()? as usize;
            let dims = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
            let n = dims.iter().try_fold(dtype.width(), |a, &d| a.checked_mul(d));
            let n = n.ok_or_else(|| Error::Format(format!("tensor {name} is too large")))?;
            let data = r.take(n)?.to_vec();
            tensors.insert(name, Tensor { dtype, dims, data });
        }
        if r.at != bytes.len() {
            return Err(Error::Format("trailing bytes after last tensor".into()));
        }
        let mut model = Model::<T>::zeros(&config)?;
        for (n, mut t) in model.tensors_mut() {
            fill(&format!("param.{n}"), &mut t, &tensors)?;
        }
        let mut buffers = model.new_buffers();
        let names: Vec<String> = buffers.tensors().into_iter().map(|(n, _)| n).collect();
        for n in names {
            let key = format!("buffer.{n}");
            let t = tensors.get(&key).ok_or_else(|| Error::Format(format!("checkpoint lacks tensor {key}")))?;
            let a: Array2<T> = t.array::<T>().into_dimensionality().map_err(|_| Error::Format(format!("tensor {key} is not 2-D")))?;
            buffers.set_tensor(&n, a)?;
        }
        let optimizer = match tensors.get("adam.step") {
            None => None,
            Some(step) => {
                let mut state = AdamState::new(&model);
                let names: Vec<String> = model.tensors().into_iter().map(|(n, _)| n).collect();
                for (i, n) in names.iter().enumerate() {
                    fill(&format!("adam.m.{n}"), &mut state.m[i].view_mut(), &tensors)?;
                    fill(&format!("adam.v.{n}"), &mut state.v[i].view_mut(), &tensors)?;
                }
                state.step = step.values::<f64>().first().copied().unwrap_or(0.0) as u64;
                Some(state)
            }
        };
        if !model.all_finite() {
            return Err(Error::Numeric("checkpoint holds non-finite parameters".into()));
        }
        Ok(Checkpoint { model, buffers, optimizer })
    }

    /// Writes atomically: a temporary sibling file is renamed into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Short content hash used as a model version tag.
pub fn fingerprint(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}
