//! Binary weight files.
//!
//! Little-endian: `u32` FC layer count, then `u32 in, u32 out` per layer, then
//! for every layer its weights row-major followed by its bias, all as `f64`.
//! ReLU is implied between consecutive layers.

use std::path::Path;

use super::{Dense, Matrix, ModelSpec, NnError};
use crate::scalar::Real;

pub fn weights_to_bytes<T: Real>(model: &ModelSpec<T>) -> Vec<u8> {
    let dense = model.dense();
    let mut out = Vec::with_capacity(4 + 8 * dense.len() + 8 * model.parameter_count());
    out.extend_from_slice(&(dense.len() as u32).to_le_bytes());
    for d in dense {
        out.extend_from_slice(&(d.in_dim() as u32).to_le_bytes());
        out.extend_from_slice(&(d.out_dim() as u32).to_le_bytes());
    }
    for d in dense {
        for v in d.w.data().iter().chain(&d.b) {
            out.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    }
    out
}

pub fn weights_from_bytes<T: Real>(name: &str, bytes: &[u8]) -> Result<ModelSpec<T>, NnError> {
    let mut pos = 0;
    let u32_at = |pos: &mut usize| -> Result<usize, NnError> {
        let raw = bytes
            .get(*pos..*pos + 4)
            .ok_or_else(|| NnError::Format("truncated header".into()))?;
        *pos += 4;
        Ok(u32::from_le_bytes(raw.try_into().expect("4 bytes")) as usize)
    };
    let layers = u32_at(&mut pos)?;
    if layers == 0 {
        return Err(NnError::Format("zero layers".into()));
    }
    let mut dims = Vec::with_capacity(layers);
    for _ in 0..layers {
        dims.push((u32_at(&mut pos)?, u32_at(&mut pos)?));
    }
    let mut chain = vec![dims[0].0];
    for (i, &(din, dout)) in dims.iter().enumerate() {
        if din != chain[i] {
            return Err(NnError::Format("layer dims do not chain".into()));
        }
        chain.push(dout);
    }
    let mut model = ModelSpec::<T>::zeros(name, &chain)?;
    let mut floats = bytes[pos..].chunks_exact(8).map(|c| {
        T::of(f64::from_le_bytes(c.try_into().expect("8 bytes")))
    });
    let expected = model.parameter_count();
    if bytes.len() - pos != 8 * expected {
        return Err(NnError::Format(format!(
            "expected {expected} parameters, found {} bytes",
            bytes.len() - pos
        )));
    }
    for d in model.dense_mut() {
        let (i, o) = (d.in_dim(), d.out_dim());
        let w: Vec<T> = floats.by_ref().take(i * o).collect();
        let b: Vec<T> = floats.by_ref().take(o).collect();
        *d = Dense {
            w: Matrix::new(i, o, w),
            b,
        };
    }
    Ok(model)
}

pub fn save_weights<T: Real>(model: &ModelSpec<T>, path: &Path) -> Result<(), NnError> {
    std::fs::write(path, weights_to_bytes(model)).map_err(|e| NnError::Io(e.to_string()))
}

pub fn load_weights<T: Real>(path: &Path) -> Result<ModelSpec<T>, NnError> {
    let bytes = std::fs::read(path).map_err(|e| NnError::Io(e.to_string()))?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    weights_from_bytes(&name, &bytes)
}
