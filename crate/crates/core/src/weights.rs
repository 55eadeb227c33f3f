//! Named tensor bundles for importing externally trained weights.
//!
//! Layout (all little-endian): magic `CMFW`, `u32` version 1, `u32` entry
//! count, then per entry a `u16` name length, the UTF-8 name, a `u8` rank,
//! `rank` `u32` dimensions and the row-major `f64` values.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::nn::{Linear, LinearStack};
use crate::sparse::ConvKernel;

const MAGIC: &[u8; 4] = b"CMFW";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct WeightTensor {
    pub dims: Vec<usize>,
    pub values: Vec<f64>,
}

/// Ordered name -> tensor map.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct WeightBundle {
    entries: BTreeMap<String, WeightTensor>,
}

fn missing(name: &str) -> Error {
    Error::Weights(format!("missing entry `{name}`"))
}

impl WeightBundle {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn get(&self, name: &str) -> Option<&WeightTensor> {
        self.entries.get(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, dims: Vec<usize>, values: Vec<f64>) -> Result<()> {
        let name = name.into();
        if name.is_empty() || name.len() > u16::MAX as usize {
            return Err(Error::Weights("entry names must be 1..=65535 bytes".into()));
        }
        if dims.len() > u8::MAX as usize || dims.iter().any(|&d| d > u32::MAX as usize) {
            return Err(Error::Weights(format!("`{name}`: shape {dims:?} not representable")));
        }
        if dims.iter().product::<usize>() != values.len() {
            return Err(Error::Weights(format!(
                "`{name}`: shape {dims:?} does not match {} values",
                values.len()
            )));
        }
        self.entries.insert(name, WeightTensor { dims, values });
        Ok(())
    }

    fn take(&self, name: &str, dims: &[usize]) -> Result<&WeightTensor> {
        let t = self.entries.get(name).ok_or_else(|| missing(name))?;
        if t.dims != dims {
            return Err(Error::Weights(format!(
                "`{name}` has shape {:?}, expected {dims:?}",
                t.dims
            )));
        }
        Ok(t)
    }

    pub fn insert_linear(&mut self, name: &str, l: &Linear) -> Result<()> {
        self.insert(format!("{name}.weight"), vec![l.in_dim, l.out_dim], l.weight.clone())?;
        self.insert(format!("{name}.bias"), vec![l.out_dim], l.bias.clone())
    }

    /// Reads `name.weight` (`[in, out]`) and `name.bias` (`[out]`).
    pub fn linear(&self, name: &str) -> Result<Linear> {
        let w = self.entries.get(&format!("{name}.weight")).ok_or_else(|| missing(&format!("{name}.weight")))?;
        if w.dims.len() != 2 {
            return Err(Error::Weights(format!("`{name}.weight` must be rank 2")));
        }
        let b = self.take(&format!("{name}.bias"), &[w.dims[1]])?;
        Linear::new(w.dims[0], w.dims[1], w.values.clone(), b.values.clone())
    }

    /// Stores layer `i` under `name.{i}`.
    pub fn insert_stack(&mut self, name: &str, s: &LinearStack) -> Result<()> {
        for (i, l) in s.layers.iter().enumerate() {
            self.insert_linear(&format!("{name}.{i}"), l)?;
        }
        Ok(())
    }

    pub fn stack(&self, name: &str) -> Result<LinearStack> {
        let mut layers = Vec::new();
        while self.entries.contains_key(&format!("{name}.{}.weight", layers.len())) {
            layers.push(self.linear(&format!("{name}.{}", layers.len()))?);
        }
        if layers.is_empty() {
            return Err(missing(&format!("{name}.0.weight")));
        }
        LinearStack::new(layers)
    }

    /// Kernel weights as `[k, k, (k,) c_in, c_out]`, bias as `[c_out]`.
    pub fn insert_kernel(&mut self, name: &str, k: &ConvKernel) -> Result<()> {
        let mut dims = vec![k.kernel_size; k.ndim];
        dims.extend([k.c_in, k.c_out]);
        self.insert(format!("{name}.weight"), dims, k.weights.clone())?;
        self.insert(format!("{name}.bias"), vec![k.c_out], k.bias.clone())
    }

    /// The stride is part of the architecture, not the file.
    pub fn kernel(&self, name: &str, stride: usize) -> Result<ConvKernel> {
        let key = format!("{name}.weight");
        let w = self.entries.get(&key).ok_or_else(|| missing(&key))?;
        let rank = w.dims.len();
        if !(rank == 4 || rank == 5) || w.dims[..rank - 2].iter().any(|&d| d != w.dims[0]) {
            return Err(Error::Weights(format!("`{key}` has shape {:?}, not a cubic kernel", w.dims)));
        }
        let (c_in, c_out) = (w.dims[rank - 2], w.dims[rank - 1]);
        let b = self.take(&format!("{name}.bias"), &[c_out])?;
        ConvKernel::new(rank - 2, w.dims[0], stride, c_in, c_out, w.values.clone(), b.values.clone())
            .map_err(|e| Error::Weights(format!("`{name}`: {e}")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.dims.len() as u8);
            for &d in &t.dims {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in &t.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::MalformedFile("weight bundle: bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::MalformedFile(format!("weight bundle: unsupported version {version}")));
        }
        let n = r.u32()?;
        let mut bundle = Self::new();
        for _ in 0..n {
            let len = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::MalformedFile("weight bundle: entry name is not UTF-8".into()))?
                .to_string();
            let rank = r.take(1)?[0] as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.u32()? as usize);
            }
            let count = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|c| c.checked_mul(8).is_some_and(|b| b <= bytes.len()))
                .ok_or_else(|| Error::MalformedFile(format!("weight bundle: `{name}` is truncated")))?;
            let raw = r.take(count * 8)?;
            let values = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            if bundle.entries.contains_key(&name) {
                return Err(Error::MalformedFile(format!("weight bundle: duplicate entry `{name}`")));
            }
            bundle.insert(name, dims, values)?;
        }
        if r.at != bytes.len() {
            return Err(Error::MalformedFile("weight bundle: trailing bytes".into()));
        }
        Ok(bundle)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::MalformedFile("weight bundle: truncated".into()))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}
