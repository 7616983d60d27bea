//! Named parameter store and the binary checkpoint format.
//!
//! All model parameters live in one flat, insertion-ordered store; encoder
//! layouts hold ids into it. Binding a store to a tape turns parameters
//! into leaves (or constants on a forward-only tape).

use std::fs;
use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numeric::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub usize);

#[derive(Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, _, t)| t.requires_grad)
            .map(|(id, _, _)| id)
            .collect()
    }

    /// Register every trainable parameter as a leaf on the tape. Frozen
    /// parameters are not bound; they are read directly from the store by
    /// off-tape code.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Result<Bound<'t>> {
        let mut vars = Vec::with_capacity(self.tensors.len());
        for t in &self.tensors {
            vars.push(if t.requires_grad {
                Some(tape.leaf_from(t)?)
            } else {
                None
            });
        }
        Ok(Bound { vars })
    }
}

/// Tape-bound view of a store.
pub struct Bound<'t> {
    vars: Vec<Option<Var<'t>>>,
}

impl<'t> Bound<'t> {
    pub fn var(&self, id: ParamId) -> Var<'t> {
        self.vars[id.0].expect("parameter is frozen and was not bound to the tape")
    }

    pub fn get(&self, id: ParamId) -> Option<Var<'t>> {
        self.vars[id.0]
    }

    /// Bind a specific subset of parameters, leaving the rest unbound.
    pub fn bind_ids(tape: &'t Tape, store: &ParamStore, ids: &[ParamId]) -> Result<Bound<'t>> {
        let mut vars = vec![None; store.len()];
        for &id in ids {
            vars[id.0] = Some(tape.leaf_from(store.get(id))?);
        }
        Ok(Bound { vars })
    }

    /// Assemble a bound view from explicit (id, var) pairs; used by gradient
    /// checks that substitute perturbed parameter values.
    pub fn from_pairs(
        store_len: usize,
        pairs: impl IntoIterator<Item = (ParamId, Var<'t>)>,
    ) -> Bound<'t> {
        let mut vars = vec![None; store_len];
        for (id, var) in pairs {
            vars[id.0] = Some(var);
        }
        Bound { vars }
    }
}

// ── Checkpoint format ────────────────────────────────────────────────
//
// magic "CMG1" | u32 version | u32 meta_len | meta JSON
// | u32 block_count | per block:
//   u16 name_len | name | u8 requires_grad | u8 ndim | u32 dims[] | f32 data[]
// All integers and floats little-endian.

const MAGIC: &[u8; 4] = b"CMG1";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint(path: &Path, meta: &serde_json::Value, store: &ParamStore) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let meta_bytes = serde_json::to_vec(meta)?;
    out.extend_from_slice(&(meta_bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta_bytes);
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (_, name, tensor) in store.iter() {
        let name_bytes = name.as_bytes();
        out.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
        out.extend_from_slice(name_bytes);
        out.push(tensor.requires_grad as u8);
        out.push(tensor.shape.len() as u8);
        for &d in &tensor.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &tensor.data {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    fs::write(path, out)?;
    Ok(())
}

pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub params: Vec<(String, Tensor)>,
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut cur = 0usize;
    let take = |cur: &mut usize, n: usize| -> Result<&[u8]> {
        if *cur + n > bytes.len() {
            return Err(Error::parse("checkpoint truncated"));
        }
        let s = &bytes[*cur..*cur + n];
        *cur += n;
        Ok(s)
    };
    if take(&mut cur, 4)? != MAGIC {
        return Err(Error::parse("not a checkpoint file (bad magic)"));
    }
    let version = u32::from_le_bytes(take(&mut cur, 4)?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::parse(format!(
            "checkpoint version {version} unsupported (expected {CHECKPOINT_VERSION})"
        )));
    }
    let meta_len = u32::from_le_bytes(take(&mut cur, 4)?.try_into().unwrap()) as usize;
    let meta: serde_json::Value = serde_json::from_slice(take(&mut cur, meta_len)?)?;
    let count = u32::from_le_bytes(take(&mut cur, 4)?.try_into().unwrap()) as usize;
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = u16::from_le_bytes(take(&mut cur, 2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut cur, name_len)?.to_vec())
            .map_err(|_| Error::parse("checkpoint: non-utf8 parameter name"))?;
        let requires_grad = take(&mut cur, 1)?[0] != 0;
        let ndim = take(&mut cur, 1)?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u32::from_le_bytes(take(&mut cur, 4)?.try_into().unwrap()) as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = take(&mut cur, numel * 4)?;
        let data: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        let mut tensor = Tensor::new(data, shape)?;
        tensor.requires_grad = requires_grad;
        params.push((name, tensor));
    }
    Ok(Checkpoint { meta, params })
}

/// Overwrite store values from a checkpoint, matching by name and shape.
pub fn load_into_store(ckpt: &Checkpoint, store: &mut ParamStore) -> Result<()> {
    if ckpt.params.len() != store.len() {
        return Err(Error::contract(format!(
            "checkpoint has {} parameters, model expects {}",
            ckpt.params.len(),
            store.len()
        )));
    }
    for (i, (name, tensor)) in ckpt.params.iter().enumerate() {
        let id = ParamId(i);
        if store.name(id) != name {
            return Err(Error::contract(format!(
                "checkpoint parameter {i} is '{name}', model expects '{}'",
                store.name(id)
            )));
        }
        if store.get(id).shape != tensor.shape {
            return Err(Error::Shape {
                op: "load_checkpoint",
                lhs: store.get(id).shape.clone(),
                rhs: tensor.shape.clone(),
            });
        }
        let dst = store.get_mut(id);
        dst.data = tensor.data.clone();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn checkpoint_round_trips_at_f32_precision() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        store.add("a.w", Tensor::kaiming_uniform(&[3, 4], 4, &mut rng).trainable());
        store.add("a.b", Tensor::zeros(&[4]));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let meta = serde_json::json!({"classes": 12});
        write_checkpoint(&path, &meta, &store).unwrap();

        let ckpt = read_checkpoint(&path).unwrap();
        assert_eq!(ckpt.meta["classes"], 12);
        assert_eq!(ckpt.params.len(), 2);
        assert_eq!(ckpt.params[0].0, "a.w");
        assert!(ckpt.params[0].1.requires_grad);
        assert!(!ckpt.params[1].1.requires_grad);
        for (orig, read) in store.get(ParamId(0)).data.iter().zip(&ckpt.params[0].1.data) {
            assert!((orig - read).abs() < 1e-7, "f32 round trip too lossy");
            assert_eq!(*read, *read as f32 as f64, "values must be exact f32");
        }

        let mut restored = ParamStore::new();
        restored.add("a.w", Tensor::zeros(&[3, 4]).trainable());
        restored.add("a.b", Tensor::zeros(&[4]));
        load_into_store(&ckpt, &mut restored).unwrap();
        assert_eq!(restored.get(ParamId(0)).data, ckpt.params[0].1.data);
    }

    #[test]
    fn bad_magic_is_a_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"NOPE").unwrap();
        assert!(read_checkpoint(&path).is_err());
    }

    #[test]
    fn shape_mismatch_on_load_is_rejected() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::zeros(&[2, 2]));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        write_checkpoint(&path, &serde_json::json!({}), &store).unwrap();
        let ckpt = read_checkpoint(&path).unwrap();
        let mut other = ParamStore::new();
        other.add("w", Tensor::zeros(&[3, 2]));
        assert!(load_into_store(&ckpt, &mut other).is_err());
    }
}
