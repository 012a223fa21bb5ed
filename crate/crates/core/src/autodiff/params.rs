//! Named, ordered collections of trainable tensors, plus the whole-model
//! arithmetic used by the training loops (SGD step, norm clipping,
//! snapshot/restore, checkpoint serialization).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::Float;

use super::tensor::Tensor;

/// Ordered map from parameter name to tensor. Two stores are *congruent*
/// when they hold the same names with the same shapes in the same order;
/// all whole-store arithmetic requires congruence.
#[derive(Default)]
pub struct ParamStore {
    entries: IndexMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore { entries: IndexMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter name {name:?}")));
        }
        self.entries.insert(name, t);
        Ok(())
    }

    /// Swap the tensor behind an existing name (used when the condition
    /// embedding table grows a row for adaptation).
    pub fn replace(&mut self, name: &str, t: Tensor) -> Result<()> {
        match self.entries.get_mut(name) {
            Some(slot) => {
                *slot = t;
                Ok(())
            }
            None => Err(Error::invalid(format!("no parameter named {name:?}"))),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name).ok_or_else(|| Error::invalid(format!("no parameter named {name:?}")))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|k| k.as_str())
    }

    /// Total number of scalar values across all entries.
    pub fn total_values(&self) -> usize {
        self.entries.values().map(|t| t.numel()).sum()
    }

    pub fn congruent(&self, other: &ParamStore) -> bool {
        self.len() == other.len()
            && self
                .iter()
                .zip(other.iter())
                .all(|((an, at), (bn, bt))| an == bn && at.shape() == bt.shape())
    }

    fn congruence_check(&self, other: &ParamStore, op: &str) -> Result<()> {
        if self.congruent(other) {
            Ok(())
        } else {
            Err(Error::NotCongruent(format!(
                "{op}: stores differ in names or shapes ({} vs {} entries)",
                self.len(),
                other.len()
            )))
        }
    }

    /// Deep copy: fresh storage, same values and `requires_grad`, no grads.
    pub fn snapshot(&self) -> ParamStore {
        let mut out = ParamStore::new();
        for (name, t) in self.iter() {
            let c = t.detached();
            c.set_requires_grad(t.requires_grad());
            out.entries.insert(name.to_string(), c);
        }
        out
    }

    /// Copy values from a congruent snapshot back into this store's
    /// existing tensors (handles are preserved).
    pub fn restore(&self, snap: &ParamStore) -> Result<()> {
        self.congruence_check(snap, "restore")?;
        for ((_, dst), (_, src)) in self.iter().zip(snap.iter()) {
            dst.set_data(&src.data());
        }
        Ok(())
    }

    pub fn zero_grads(&self) {
        for (_, t) in self.iter() {
            t.zero_grad();
        }
    }

    /// Materialize accumulated gradients as a congruent store of plain
    /// values (zeros where no gradient flowed).
    pub fn grad_store(&self) -> ParamStore {
        let mut out = ParamStore::new();
        for (name, t) in self.iter() {
            let g = t.grad().unwrap_or_else(|| vec![0.0; t.numel()]);
            let gt = Tensor::from_data(&t.shape(), g).expect("grad shape");
            out.entries.insert(name.to_string(), gt);
        }
        out
    }

    /// In-place `self += scale * other` over the raw values.
    pub fn add_scaled(&self, other: &ParamStore, scale: Float) -> Result<()> {
        self.congruence_check(other, "add_scaled")?;
        for ((_, dst), (_, src)) in self.iter().zip(other.iter()) {
            let mut v = dst.data_vec();
            for (a, b) in v.iter_mut().zip(src.data().iter()) {
                *a += scale * b;
            }
            dst.set_data(&v)?;
        }
        Ok(())
    }

    // ── Checkpoint serialization ─────────────────────────────────────
    //
    // Layout: magic, entry count, then a manifest of (name, shape, dtype)
    // records, then all values row-major little-endian. Round-trips are
    // bit-exact for f64.

    const MAGIC: &'static [u8; 8] = b"SMLPST1\n";

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(Self::MAGIC)?;
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        for (name, t) in self.iter() {
            let nb = name.as_bytes();
            w.write_all(&(nb.len() as u64).to_le_bytes())?;
            w.write_all(nb)?;
            let shape = t.shape();
            w.write_all(&(shape.len() as u64).to_le_bytes())?;
            for d in &shape {
                w.write_all(&(*d as u64).to_le_bytes())?;
            }
            w.write_all(&[0u8])?; // dtype tag: 0 = f64
        }
        for (_, t) in self.iter() {
            for v in t.data().iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ParamStore> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != Self::MAGIC {
            return Err(Error::data(format!("{}: not a parameter checkpoint", path.display())));
        }
        let count = read_u64(&mut r)? as usize;
        let mut manifest = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = read_u64(&mut r)? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::data("checkpoint: non-utf8 parameter name"))?;
            let ndim = read_u64(&mut r)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(read_u64(&mut r)? as usize);
            }
            let mut dtype = [0u8; 1];
            r.read_exact(&mut dtype)?;
            if dtype[0] != 0 {
                return Err(Error::data(format!("checkpoint: unknown dtype tag {}", dtype[0])));
            }
            manifest.push((name, shape));
        }
        let mut out = ParamStore::new();
        for (name, shape) in manifest {
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            let mut buf = [0u8; 8];
            for _ in 0..n {
                r.read_exact(&mut buf)?;
                data.push(Float::from_le_bytes(buf));
            }
            let t = Tensor::param(&shape, data)?;
            out.insert(name, t)?;
        }
        Ok(out)
    }
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

/// In-place SGD: `p <- p - lr * g` for each entry. `lr` must be
/// nonnegative; zero is a legal no-op step.
pub fn sgd_step(params: &ParamStore, grads: &ParamStore, lr: Float) -> Result<()> {
    if lr < 0.0 || !lr.is_finite() {
        return Err(Error::invalid(format!("sgd_step: learning rate {lr} must be >= 0")));
    }
    params.add_scaled(grads, -lr)
}

/// Scale all entries so the global L2 norm does not exceed `max_norm`.
/// Returns the pre-clip norm; an empty store returns 0.
pub fn clip_grad_norm(grads: &ParamStore, max_norm: Float) -> Result<Float> {
    if max_norm <= 0.0 {
        return Err(Error::invalid(format!("clip_grad_norm: max_norm {max_norm} must be > 0")));
    }
    let mut sq = 0.0;
    for (_, t) in grads.iter() {
        for v in t.data().iter() {
            sq += v * v;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for (_, t) in grads.iter() {
            let mut v = t.data_vec();
            for x in v.iter_mut() {
                *x *= scale;
            }
            t.set_data(&v)?;
        }
    }
    Ok(norm)
}

/// Name-to-tensor lookup used by the forward passes. A view starts as the
/// identity over a store and can override individual entries with
/// graph-produced tensors (e.g. gated decoder weights), letting the same
/// forward code run on raw or modulated parameters.
#[derive(Clone, Default)]
pub struct ParamView {
    map: IndexMap<String, Tensor>,
}

impl ParamView {
    pub fn from_store(store: &ParamStore) -> ParamView {
        let mut map = IndexMap::new();
        for (name, t) in store.iter() {
            map.insert(name.to_string(), t.clone());
        }
        ParamView { map }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name).ok_or_else(|| Error::invalid(format!("view has no entry {name:?}")))
    }

    pub fn set(&mut self, name: impl Into<String>, t: Tensor) {
        self.map.insert(name.into(), t);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Copy current values into a fresh store of trainable leaves.
    pub fn leaf_snapshot(&self) -> ParamStore {
        let mut out = ParamStore::new();
        for (name, t) in self.iter() {
            let leaf = t.detached();
            leaf.set_requires_grad(true);
            out.insert(name, leaf).expect("unique names in view");
        }
        out
    }
}
