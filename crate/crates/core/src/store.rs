use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
struct ParamEntry {
    name: String,
    value: Arc<Tensor>,
    grad: Tensor,
    adam_m: Tensor,
    adam_v: Tensor,
    steps: u64,
    trainable: bool,
}

/// Named parameter tensors with matching gradient and Adam moment buffers.
/// Entries keep insertion order, which fixes checkpoint layout and makes
/// training runs reproducible.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"BSBCKP01";

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        self.register_inner(name, value, true)
    }

    /// Non-trainable entry (normalization stats, target-network copies are
    /// still `register`ed; buffers are never handed to `adam_step`).
    pub fn register_buffer(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        self.register_inner(name, value, false)
    }

    fn register_inner(&mut self, name: &str, value: Tensor, trainable: bool) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::Argument(format!("duplicate parameter `{name}`")));
        }
        let (r, c) = value.shape();
        let id = ParamId(self.entries.len());
        self.index.insert(name.to_string(), id.0);
        self.entries.push(ParamEntry {
            name: name.to_string(),
            value: Arc::new(value),
            grad: Tensor::zeros(r, c),
            adam_m: Tensor::zeros(r, c),
            adam_v: Tensor::zeros(r, c),
            steps: 0,
            trainable,
        });
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub(crate) fn value_arc(&self, id: ParamId) -> Arc<Tensor> {
        Arc::clone(&self.entries[id.0].value)
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor) {
        debug_assert_eq!(value.shape(), self.entries[id.0].value.shape());
        self.entries[id.0].value = Arc::new(value);
    }

    /// Point mutation used by the finite-difference checker.
    pub fn nudge(&mut self, id: ParamId, coord: usize, delta: f64) {
        let entry = &mut self.entries[id.0];
        let t = Arc::make_mut(&mut entry.value);
        t.data_mut()[coord] += delta;
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].grad
    }

    pub fn steps(&self, id: ParamId) -> u64 {
        self.entries[id.0].steps
    }

    pub fn accumulate_grad(&mut self, id: ParamId, grad: &Tensor) {
        self.entries[id.0].grad.add_assign_scaled(grad, 1.0);
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.fill(0.0);
        }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        (0..self.entries.len()).map(ParamId).collect()
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        (0..self.entries.len())
            .filter(|&i| self.entries[i].trainable)
            .map(ParamId)
            .collect()
    }

    /// Bias-corrected Adam update over `ids`, in place; the stepped
    /// parameters' gradients are zeroed afterward.
    pub fn adam_step(&mut self, ids: &[ParamId], lr: f64, beta1: f64, beta2: f64, eps: f64) {
        for &id in ids {
            let entry = &mut self.entries[id.0];
            entry.steps += 1;
            let t = entry.steps as i32;
            let bc1 = 1.0 - beta1.powi(t);
            let bc2 = 1.0 - beta2.powi(t);
            let value = Arc::make_mut(&mut entry.value);
            let n = value.len();
            let (vals, grads, ms, vs) = (
                value.data_mut(),
                entry.grad.data_mut(),
                entry.adam_m.data_mut(),
                entry.adam_v.data_mut(),
            );
            for i in 0..n {
                let g = grads[i];
                ms[i] = beta1 * ms[i] + (1.0 - beta1) * g;
                vs[i] = beta2 * vs[i] + (1.0 - beta2) * g * g;
                let m_hat = ms[i] / bc1;
                let v_hat = vs[i] / bc2;
                vals[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            entry.grad.fill(0.0);
        }
    }

    /// dst <- tau * src + (1 - tau) * dst, elementwise per paired entry.
    pub fn ema_update(&mut self, dst: &[ParamId], src: &[ParamId], tau: f64) {
        assert_eq!(dst.len(), src.len());
        for (&d, &s) in dst.iter().zip(src) {
            let src_val = Arc::clone(&self.entries[s.0].value);
            let entry = &mut self.entries[d.0];
            let t = Arc::make_mut(&mut entry.value);
            for (dv, sv) in t.data_mut().iter_mut().zip(src_val.data()) {
                *dv = tau * sv + (1.0 - tau) * *dv;
            }
        }
    }

    pub fn copy_values(&mut self, dst: &[ParamId], src: &[ParamId]) {
        self.ema_update(dst, src, 1.0);
    }

    /// SHA-256 over names, shapes and value bits; detects any parameter
    /// mutation (used by probe no-mutation assertions).
    pub fn checksum(&self) -> [u8; 32] {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for e in &self.entries {
            h.update(e.name.as_bytes());
            h.update((e.value.rows() as u64).to_le_bytes());
            h.update((e.value.cols() as u64).to_le_bytes());
            for v in e.value.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        h.finalize().into()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes();
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, &bytes)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        for e in &self.entries {
            let name = e.name.as_bytes();
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name);
            out.extend_from_slice(&(e.value.rows() as u32).to_le_bytes());
            out.extend_from_slice(&(e.value.cols() as u32).to_le_bytes());
            out.push(e.trainable as u8);
            for v in e.value.data() {
                out.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        }
        out
    }

    pub fn load(path: &Path) -> Result<ParamStore> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<ParamStore> {
        let mut cur = std::io::Cursor::new(bytes);
        let mut magic = [0u8; 8];
        cur.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Compatibility("bad checkpoint magic".into()));
        }
        let mut store = ParamStore::new();
        let n = read_u64(&mut cur)?;
        for _ in 0..n {
            let name_len = read_u32(&mut cur)? as usize;
            let mut name = vec![0u8; name_len];
            cur.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::Compatibility("non-utf8 parameter name".into()))?;
            let rows = read_u32(&mut cur)? as usize;
            let cols = read_u32(&mut cur)? as usize;
            let mut flag = [0u8; 1];
            cur.read_exact(&mut flag)?;
            let mut data = vec![0.0; rows * cols];
            for d in data.iter_mut() {
                let mut b = [0u8; 8];
                cur.read_exact(&mut b)?;
                *d = f64::from_bits(u64::from_le_bytes(b));
            }
            store.register_inner(&name, Tensor::new(rows, cols, data)?, flag[0] != 0)?;
        }
        Ok(store)
    }

    /// Copy values from `other` into this store. Every entry here must exist
    /// in `other` with the same shape; extra entries in `other` are an error
    /// too, so an eval agent cannot silently drop checkpoint content.
    pub fn load_values_from(&mut self, other: &ParamStore) -> Result<()> {
        if other.entries.len() != self.entries.len() {
            return Err(Error::Compatibility(format!(
                "checkpoint has {} parameters, architecture expects {}",
                other.entries.len(),
                self.entries.len()
            )));
        }
        for e in &mut self.entries {
            let src = other
                .index
                .get(&e.name)
                .map(|&i| &other.entries[i])
                .ok_or_else(|| {
                    Error::Compatibility(format!("checkpoint missing parameter `{}`", e.name))
                })?;
            if src.value.shape() != e.value.shape() {
                return Err(Error::Compatibility(format!(
                    "parameter `{}`: checkpoint shape {:?}, expected {:?}",
                    e.name,
                    src.value.shape(),
                    e.value.shape()
                )));
            }
            e.value = Arc::clone(&src.value);
        }
        Ok(())
    }
}

fn read_u64(cur: &mut std::io::Cursor<&[u8]>) -> Result<u64> {
    let mut b = [0u8; 8];
    cur.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_u32(cur: &mut std::io::Cursor<&[u8]>) -> Result<u32> {
    let mut b = [0u8; 4];
    cur.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Convenience writer that keeps checkpoint writes atomic.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}
