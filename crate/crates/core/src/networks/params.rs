//! Named parameter storage, initialization, and the checkpoint archive.

use crate::autodiff::{Tape, Tensor, Var};
use crate::Real;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;
use std::io::{BufRead, Write};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("manifest: {0}")]
    Manifest(#[from] serde_json::Error),
}

/// Ordered, named parameter tensors. Registration order is the canonical
/// order everywhere (tape leaves, optimizer state, checkpoints).
#[derive(Debug, Clone)]
pub struct ParamSet<S> {
    names: Vec<String>,
    tensors: Vec<Tensor<S>>,
    index: HashMap<String, usize>,
}

impl<S: Real> Default for ParamSet<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Real> ParamSet<S> {
    pub fn new() -> Self {
        Self { names: Vec::new(), tensors: Vec::new(), index: HashMap::new() }
    }

    pub fn register(&mut self, name: impl Into<String>, tensor: Tensor<S>) -> usize {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.tensors.len());
        self.names.push(name);
        self.tensors.push(tensor);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn total_values(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensor(&self, i: usize) -> &Tensor<S> {
        &self.tensors[i]
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor<S> {
        &mut self.tensors[i]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<S>> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Tensor<S>> {
        self.index.get(name).copied().map(move |i| &mut self.tensors[i])
    }

    /// Push every tensor onto the tape as a differentiable leaf,
    /// in registration order.
    pub fn bind(&self, tape: &mut Tape<S>) -> BoundParams {
        let vars = self.tensors.iter().map(|t| tape.leaf(t.clone())).collect();
        BoundParams { vars, index: self.index.clone() }
    }

    /// Bind as constants (inference: no gradient bookkeeping).
    pub fn bind_frozen(&self, tape: &mut Tape<S>) -> BoundParams {
        let vars = self.tensors.iter().map(|t| tape.constant(t.clone())).collect();
        BoundParams { vars, index: self.index.clone() }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.is_finite())
    }
}

/// Tape handles for a bound parameter set.
pub struct BoundParams {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Var {
        self.vars[*self.index.get(name).unwrap_or_else(|| panic!("unknown parameter {name}"))]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Kaiming-style uniform initializer over `fan_in`.
pub fn conv_init<S: Real>(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<S> {
    let fan_in: usize = shape[1..].iter().product();
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| S::lit(rng.gen_range(-bound..bound))).collect())
}

const CKPT_MAGIC: &str = "rigsplat-ckpt 1";

/// Write a checkpoint archive: a human-readable JSON manifest followed by
/// named little-endian f64 tensor records.
pub fn write_archive<S: Real, W: Write>(
    mut w: W,
    manifest: &serde_json::Value,
    sets: &[(&str, &ParamSet<S>)],
) -> Result<(), StoreError> {
    writeln!(w, "{CKPT_MAGIC}")?;
    let json = serde_json::to_string_pretty(manifest)?;
    writeln!(w, "{}", json.len())?;
    w.write_all(json.as_bytes())?;
    writeln!(w)?;
    for (prefix, set) in sets {
        for (name, tensor) in set.names.iter().zip(&set.tensors) {
            let full = format!("{prefix}{name}");
            w.write_all(&(full.len() as u32).to_le_bytes())?;
            w.write_all(full.as_bytes())?;
            w.write_all(&(tensor.shape.len() as u32).to_le_bytes())?;
            for &d in &tensor.shape {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for &v in &tensor.data {
                w.write_all(&v.to_f64().to_le_bytes())?;
            }
        }
    }
    Ok(())
}

/// Read an archive into (manifest, name -> tensor) form.
pub fn read_archive<S: Real, R: BufRead>(
    mut r: R,
) -> Result<(serde_json::Value, HashMap<String, Tensor<S>>), StoreError> {
    let mut line = String::new();
    r.read_line(&mut line)?;
    if line.trim() != CKPT_MAGIC {
        return Err(StoreError::Malformed(format!("bad magic {line:?}")));
    }
    line.clear();
    r.read_line(&mut line)?;
    let json_len: usize = line
        .trim()
        .parse()
        .map_err(|_| StoreError::Malformed("bad manifest length".into()))?;
    let mut json = vec![0u8; json_len];
    r.read_exact(&mut json)?;
    let manifest: serde_json::Value = serde_json::from_slice(&json)?;
    let mut newline = [0u8; 1];
    r.read_exact(&mut newline)?;

    let mut tensors = HashMap::new();
    loop {
        let mut len4 = [0u8; 4];
        match r.read_exact(&mut len4) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        }
        let name_len = u32::from_le_bytes(len4) as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| StoreError::Malformed("tensor name".into()))?;
        r.read_exact(&mut len4)?;
        let ndims = u32::from_le_bytes(len4) as usize;
        let mut shape = Vec::with_capacity(ndims);
        for _ in 0..ndims {
            let mut d8 = [0u8; 8];
            r.read_exact(&mut d8)?;
            shape.push(u64::from_le_bytes(d8) as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut v8 = [0u8; 8];
        for _ in 0..n {
            r.read_exact(&mut v8)?;
            data.push(S::lit(f64::from_le_bytes(v8)));
        }
        tensors.insert(name, Tensor::new(shape, data));
    }
    Ok((manifest, tensors))
}

/// Load values into an existing set from `prefix`-qualified archive tensors.
pub fn load_into<S: Real>(
    set: &mut ParamSet<S>,
    prefix: &str,
    archive: &HashMap<String, Tensor<S>>,
) -> Result<(), StoreError> {
    for (name, tensor) in set.names.iter().zip(&mut set.tensors) {
        let full = format!("{prefix}{name}");
        let loaded = archive
            .get(&full)
            .ok_or_else(|| StoreError::Malformed(format!("missing tensor {full}")))?;
        if loaded.shape != tensor.shape {
            return Err(StoreError::Malformed(format!(
                "shape mismatch for {full}: {:?} vs {:?}",
                loaded.shape, tensor.shape
            )));
        }
        tensor.data.clone_from(&loaded.data);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn archive_round_trip_is_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut set = ParamSet::<f32>::new();
        set.register("a.w", conv_init(&mut rng, vec![4, 3, 3, 3]));
        set.register("a.b", Tensor::zeros(vec![4]));
        let manifest = serde_json::json!({"step": 7, "note": "test"});
        let mut buf = Vec::new();
        write_archive(&mut buf, &manifest, &[("net.", &set)]).unwrap();
        assert!(buf.starts_with(b"rigsplat-ckpt 1\n"));
        let (m2, tensors) = read_archive::<f32, _>(std::io::BufReader::new(&buf[..])).unwrap();
        assert_eq!(m2["step"], 7);
        let mut set2 = ParamSet::<f32>::new();
        set2.register("a.w", Tensor::zeros(vec![4, 3, 3, 3]));
        set2.register("a.b", Tensor::zeros(vec![4]));
        load_into(&mut set2, "net.", &tensors).unwrap();
        for i in 0..set.len() {
            assert_eq!(set.tensor(i).data, set2.tensor(i).data);
        }
    }

    #[test]
    fn missing_tensor_is_reported() {
        let mut set = ParamSet::<f32>::new();
        set.register("a.w", Tensor::zeros(vec![2]));
        let archive = HashMap::new();
        assert!(matches!(
            load_into(&mut set, "x.", &archive),
            Err(StoreError::Malformed(_))
        ));
    }
}
