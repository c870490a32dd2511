//! Portable binary checkpoints.
//!
//! Layout (all integers and floats little-endian):
//!   bytes 0..12   magic `RSLLMCKPT\0\0\0`
//!   bytes 12..16  u32 format version (currently 1)
//!   u64           record count
//!   per record:   u64 name length, UTF-8 name bytes, u64 rank,
//!                 rank × u64 dims, product(dims) × f64 values
//!
//! Values are stored as 64-bit floats regardless of the in-memory
//! scalar type, so files written by any build read back bit-exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::Error;
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MAGIC: [u8; 12] = *b"RSLLMCKPT\0\0\0";
const VERSION: u32 = 1;

pub fn save<S: Scalar>(store: &ParamStore<S>, path: &Path) -> Result<(), Error> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(store.len() as u64).to_le_bytes())?;
    for (_, entry) in store.iter() {
        let name = entry.name.as_bytes();
        w.write_all(&(name.len() as u64).to_le_bytes())?;
        w.write_all(name)?;
        let shape = entry.value.shape();
        w.write_all(&(shape.len() as u64).to_le_bytes())?;
        for &d in shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in entry.value.values() {
            w.write_all(&v.as_f64().to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load<S: Scalar>(path: &Path) -> Result<ParamStore<S>, Error> {
    let mut r = BufReader::new(File::open(path)?);

    let mut magic = [0u8; 12];
    r.read_exact(&mut magic)?;
    if magic != MAGIC {
        return Err(Error::Checkpoint(format!("{}: bad magic", path.display())));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }

    let count = read_u64(&mut r)? as usize;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = read_u64(&mut r)? as usize;
        if name_len > 1 << 20 {
            return Err(Error::Checkpoint(format!("unreasonable name length {name_len}")));
        }
        let mut name_buf = vec![0u8; name_len];
        r.read_exact(&mut name_buf)?;
        let name = String::from_utf8(name_buf)
            .map_err(|_| Error::Checkpoint("name is not UTF-8".into()))?;

        let rank = read_u64(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(&mut r)? as usize);
        }
        let n: usize = shape.iter().product();
        let mut values = Vec::with_capacity(n);
        for _ in 0..n {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            values.push(S::of(f64::from_le_bytes(b)));
        }
        let tensor = Tensor::new(shape.clone(), values)
            .map_err(|e| Error::Checkpoint(format!("record `{name}`: {e}")))?;
        store.register(&name, tensor)?;
    }

    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Checkpoint("trailing bytes after last record".into()));
    }
    Ok(store)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, Error> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, Error> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::init;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = std::env::temp_dir().join(format!("rsllm-ckpt-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("roundtrip.ckpt");

        let mut store: ParamStore = ParamStore::new();
        let mut rng = init::seeded_rng(3);
        store.register("a.w", init::normal(&mut rng, vec![3, 5], 0.02)).unwrap();
        store.register("a.b", init::normal(&mut rng, vec![5], 1.0)).unwrap();
        store.register("scalar", Tensor::scalar(2.0)).unwrap();

        save(&store, &path).unwrap();
        let loaded: ParamStore = load(&path).unwrap();
        assert_eq!(loaded.len(), store.len());
        for ((_, a), (_, b)) in store.iter().zip(loaded.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value, b.value);
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = std::env::temp_dir().join(format!("rsllm-ckpt-bad-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.ckpt");
        std::fs::write(&path, b"NOTACHECKPOINTFILE").unwrap();
        assert!(load::<f64>(&path).is_err());
        std::fs::remove_dir_all(&dir).ok();
    }
}
