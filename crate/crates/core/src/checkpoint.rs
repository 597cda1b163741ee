//! Flat binary parameter checkpoints.
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic    8 bytes  "GAPNET01"
//! version  u32      currently 1
//! count    u32      number of parameters
//! per parameter, in store order:
//!   name_len u32, name bytes (UTF-8),
//!   rank     u32, dims (u64 each),
//!   payload  numel x f64
//! ```
//!
//! Values are stored as `f64` regardless of the in-memory scalar type.
//! Serialization follows store insertion order, so two stores built the same
//! way produce byte-identical files.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"GAPNET01";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad checkpoint magic: expected {MAGIC:?}")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("checkpoint is truncated or corrupt: {0}")]
    Corrupt(String),
    #[error("checkpoint does not fit the configured model: {0}")]
    Incompatible(String),
}

/// Checks that `loaded` carries exactly the parameters of `expected`, with
/// matching shapes, so a forward pass cannot fail halfway through on a
/// checkpoint trained under a different configuration.
pub fn check_compatible<S: Scalar>(
    loaded: &ParamStore<S>,
    expected: &ParamStore<S>,
) -> Result<(), CheckpointError> {
    for name in expected.names() {
        if !loaded.names().contains(&name) {
            return Err(CheckpointError::Incompatible(format!(
                "missing parameter {name:?}"
            )));
        }
        let want = expected.get(&name).shape();
        let got = loaded.get(&name).shape();
        if want != got {
            return Err(CheckpointError::Incompatible(format!(
                "parameter {name:?} has shape {got:?}, expected {want:?}"
            )));
        }
    }
    for name in loaded.names() {
        if !expected.names().contains(&name) {
            return Err(CheckpointError::Incompatible(format!(
                "unexpected parameter {name:?}"
            )));
        }
    }
    Ok(())
}

pub fn save<S: Scalar>(store: &ParamStore<S>, path: &Path) -> Result<(), CheckpointError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for (name, tensor) in store.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(tensor.rank() as u32).to_le_bytes())?;
        for &d in tensor.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in tensor.data() {
            w.write_all(&v.as_f64().to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Loads a checkpoint into a fresh store. The seed only matters if callers
/// later add parameters; loaded values are exactly the file contents.
pub fn load<S: Scalar>(path: &Path, seed: u64) -> Result<ParamStore<S>, CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(CheckpointError::BadVersion(version));
    }
    let count = read_u32(&mut r)?;
    let mut store = ParamStore::new(seed);
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|e| CheckpointError::Corrupt(format!("parameter name: {e}")))?;
        let rank = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(&mut r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut buf = [0u8; 8];
        for _ in 0..numel {
            r.read_exact(&mut buf)?;
            data.push(S::lit(f64::from_le_bytes(buf)));
        }
        let tensor = Tensor::from_vec(shape, data)
            .map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        store.insert(&name, tensor);
    }
    Ok(store)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, CheckpointError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, CheckpointError> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_names_shapes_and_bits() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        let mut store = ParamStore::<f64>::new(3);
        store.add_uniform("layer.w", &[3, 4], 4);
        store.add_zeros("layer.b", &[4]);
        save(&store, &path).unwrap();
        let loaded: ParamStore<f64> = load(&path, 3).unwrap();
        assert_eq!(loaded.len(), 2);
        for (name, t) in store.iter() {
            assert_eq!(loaded.get(name).shape(), t.shape());
            assert_eq!(loaded.get(name).to_vec(), t.to_vec());
        }
    }

    #[test]
    fn identical_stores_serialize_byte_identically() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.bin");
        let b = dir.path().join("b.bin");
        let mut s1 = ParamStore::<f64>::new(9);
        s1.add_uniform("w", &[8, 8], 8);
        let mut s2 = ParamStore::<f64>::new(9);
        s2.add_uniform("w", &[8, 8], 8);
        save(&s1, &a).unwrap();
        save(&s2, &b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.bin");
        std::fs::write(&path, b"NOTMAGIC____").unwrap();
        assert!(matches!(
            load::<f64>(&path, 0),
            Err(CheckpointError::BadMagic)
        ));
    }
}
