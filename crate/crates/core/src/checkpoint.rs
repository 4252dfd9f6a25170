//! Checkpoint container: a text manifest followed by raw little-endian
//! parameter data. Round-trips bit-exactly.
//!
//! Layout:
//!
//! ```text
//! JPIS1
//! <one JSON line of caller metadata>
//! param <name> f64 <rank> <dim...> <byte offset>
//! ...
//! DATA
//! <raw little-endian f64 data>
//! ```

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::params::ParameterStore;
use crate::tensor::Tensor;

const MAGIC: &str = "JPIS1";

pub fn save_checkpoint<M: Serialize>(
    path: &Path,
    store: &ParameterStore,
    meta: &M,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{MAGIC}")?;
    let meta_line = serde_json::to_string(meta)?;
    writeln!(w, "{meta_line}")?;
    let mut offset = 0usize;
    for (_, p) in store.iter() {
        write!(w, "param {} f64 {}", p.name, p.value.rank())?;
        for d in p.value.shape() {
            write!(w, " {d}")?;
        }
        writeln!(w, " {offset}")?;
        offset += p.value.numel() * 8;
    }
    writeln!(w, "DATA")?;
    for (_, p) in store.iter() {
        for v in p.value.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub struct LoadedCheckpoint {
    pub meta: serde_json::Value,
    /// `(name, shape, data)` in manifest order.
    pub params: Vec<(String, Vec<usize>, Vec<f64>)>,
}

impl LoadedCheckpoint {
    pub fn meta_as<M: DeserializeOwned>(&self) -> Result<M> {
        Ok(serde_json::from_value(self.meta.clone())?)
    }
}

pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint> {
    let mut r = BufReader::new(File::open(path)?);
    let mut line = String::new();
    r.read_line(&mut line)?;
    if line.trim_end() != MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic {:?} in {}",
            line.trim_end(),
            path.display()
        )));
    }
    line.clear();
    r.read_line(&mut line)?;
    let meta: serde_json::Value = serde_json::from_str(line.trim_end())
        .map_err(|e| Error::Checkpoint(format!("metadata line: {e}")))?;

    let mut manifest: Vec<(String, Vec<usize>, usize)> = Vec::new();
    loop {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            return Err(Error::Checkpoint("missing DATA marker".to_string()));
        }
        let trimmed = line.trim_end();
        if trimmed == "DATA" {
            break;
        }
        let mut it = trimmed.split(' ');
        let tag = it.next();
        if tag != Some("param") {
            return Err(Error::Checkpoint(format!("unexpected manifest line {trimmed:?}")));
        }
        let name = it
            .next()
            .ok_or_else(|| Error::Checkpoint("manifest line missing name".to_string()))?
            .to_string();
        let dtype = it.next();
        if dtype != Some("f64") {
            return Err(Error::Checkpoint(format!("unsupported dtype {dtype:?}")));
        }
        let parse = |s: Option<&str>| -> Result<usize> {
            s.and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Checkpoint(format!("bad manifest line {trimmed:?}")))
        };
        let rank = parse(it.next())?;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(parse(it.next())?);
        }
        let offset = parse(it.next())?;
        manifest.push((name, shape, offset));
    }

    let mut blob = Vec::new();
    r.read_to_end(&mut blob)?;
    let mut params = Vec::with_capacity(manifest.len());
    for (name, shape, offset) in manifest {
        let numel: usize = shape.iter().product();
        let end = offset + numel * 8;
        if end > blob.len() {
            return Err(Error::Checkpoint(format!(
                "parameter {name} extends past end of data ({} of {} bytes)",
                end,
                blob.len()
            )));
        }
        let data: Vec<f64> = blob[offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.push((name, shape, data));
    }
    Ok(LoadedCheckpoint { meta, params })
}

/// Copy loaded values into `store`, matching by name and checking shapes.
/// Every store parameter must be present in the checkpoint.
pub fn restore_into(store: &mut ParameterStore, loaded: &LoadedCheckpoint) -> Result<()> {
    for (name, shape, data) in &loaded.params {
        let id = store.lookup(name).ok_or_else(|| {
            Error::Checkpoint(format!("checkpoint parameter {name} unknown to this model"))
        })?;
        let t = Tensor::new(shape.clone(), data.clone())?;
        if t.shape() != store.value(id).shape() {
            return Err(Error::Checkpoint(format!(
                "parameter {name}: checkpoint shape {:?} vs model shape {:?}",
                t.shape(),
                store.value(id).shape()
            )));
        }
        store.get_mut(id).value = t;
    }
    let missing: Vec<&str> = store
        .iter()
        .map(|(_, p)| p.name.as_str())
        .filter(|n| !loaded.params.iter().any(|(ln, _, _)| ln == n))
        .collect();
    if !missing.is_empty() {
        return Err(Error::Checkpoint(format!("missing parameters: {missing:?}")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Init;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParameterStore::new();
        store.add("a.weight", vec![3, 5], Init::Glorot, &mut rng);
        store.add("b.embed", vec![7, 2], Init::Embedding, &mut rng);
        store.add("c.bias", vec![4], Init::Zero, &mut rng);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        save_checkpoint(&path, &store, &serde_json::json!({"k": "v"})).unwrap();

        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.meta["k"], "v");
        let mut restored = store.clone();
        for (_, p) in restored.clone().iter() {
            // scramble, then restore
            let id = restored.lookup(&p.name).unwrap();
            restored.get_mut(id).value.data_mut().fill(f64::NAN);
        }
        restore_into(&mut restored, &loaded).unwrap();
        for ((_, a), (_, b)) in store.iter().zip(restored.iter()) {
            assert_eq!(a.value.data(), b.value.data(), "{}", a.name);
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParameterStore::new();
        store.add("w", vec![2, 2], Init::Glorot, &mut rng);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        save_checkpoint(&path, &store, &serde_json::json!({})).unwrap();
        let loaded = load_checkpoint(&path).unwrap();

        let mut other = ParameterStore::new();
        other.add("w", vec![2, 3], Init::Glorot, &mut rng);
        assert!(restore_into(&mut other, &loaded).is_err());
    }
}
