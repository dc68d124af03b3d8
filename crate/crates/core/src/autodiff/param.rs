//! Named trainable tensors and the binary checkpoint format.
//!
//! Checkpoint layout (little-endian): magic `CKPT`, `u32` parameter count,
//! then per parameter `u32` name length, name bytes (UTF-8), `u8` rank,
//! `rank × u32` extents and the row-major values as `f32`.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CKPT";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Vec<T>,
    /// RMSprop running average of squared gradients.
    pub slot: Vec<T>,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let n = value.len();
        self.params.push(Parameter {
            name: name.into(),
            value,
            grad: vec![T::zero(); n],
            slot: vec![T::zero(); n],
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = T::zero());
        }
    }

    pub fn accumulate(&mut self, id: ParamId, grad: &[T]) {
        let dst = &mut self.params[id.0].grad;
        debug_assert_eq!(dst.len(), grad.len());
        dst.iter_mut().zip(grad).for_each(|(d, &g)| *d = *d + g);
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: p.grad.iter().map(|&g| U::from_f64(g.as_f64())).collect(),
                    slot: p.slot.iter().map(|&g| U::from_f64(g.as_f64())).collect(),
                })
                .collect(),
        }
    }

    /// Copies values (not grads or slots) from `other`, which must have the
    /// same layout.
    pub fn copy_values_from(&mut self, other: &ParamStore<T>) {
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            dst.value = src.value.clone();
        }
    }

    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for p in &self.params {
            let name = p.name.as_bytes();
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name)?;
            w.write_all(&[p.value.rank() as u8])?;
            for &d in p.value.shape() {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            for &x in p.value.data() {
                w.write_all(&(x.as_f64() as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format(format!("bad checkpoint magic {magic:?}")));
        }
        let count = read_u32(&mut r)? as usize;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
            let mut rank = [0u8; 1];
            r.read_exact(&mut rank)?;
            let shape = (0..rank[0])
                .map(|_| read_u32(&mut r).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            let mut buf = [0u8; 4];
            for _ in 0..n {
                r.read_exact(&mut buf)?;
                data.push(T::from_f64(f32::from_le_bytes(buf) as f64));
            }
            store.add(name, Tensor::new(shape, data)?);
        }
        Ok(store)
    }

    /// Loads values by name from a checkpoint store with identical layout.
    pub fn load_values(&mut self, other: &ParamStore<T>) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::Format(format!(
                "checkpoint holds {} parameters, model expects {}",
                other.len(),
                self.len()
            )));
        }
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            if dst.name != src.name || dst.value.shape() != src.value.shape() {
                return Err(Error::Format(format!(
                    "checkpoint parameter {} {:?} does not match {} {:?}",
                    src.name,
                    src.value.shape(),
                    dst.name,
                    dst.value.shape()
                )));
            }
            dst.value = src.value.clone();
        }
        Ok(())
    }
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}
