//! `BNASCKPT` checkpoint files: little-endian, magic + version, then one
//! blob per parameter in store order: name length (u32), utf-8 name, rank
//! (u32), extents (u32 each), f32 data.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::params::ParamStore;
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"BNASCKPT";
const VERSION: u32 = 1;

pub fn save_checkpoint(store: &ParamStore, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for (_, p) in store.iter() {
        w.write_all(&(p.name.len() as u32).to_le_bytes())?;
        w.write_all(p.name.as_bytes())?;
        w.write_all(&(p.shape.len() as u32).to_le_bytes())?;
        for &e in &p.shape {
            w.write_all(&(e as u32).to_le_bytes())?;
        }
        for &v in &p.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Load a checkpoint into an already-built store. Every blob must match an
/// existing parameter by name and shape; missing parameters are an error so
/// a checkpoint cannot silently half-restore a network.
pub fn load_checkpoint(store: &mut ParamStore, path: &Path) -> Result<()> {
    let fmt = |detail: String| Error::Format { path: path.display().to_string(), detail };
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(fmt("bad magic, not a BNASCKPT file".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(fmt(format!("unsupported version {version}")));
    }
    let mut seen = 0usize;
    loop {
        let mut lenbuf = [0u8; 4];
        match r.read(&mut lenbuf)? {
            0 => break,
            4 => {}
            n => {
                r.read_exact(&mut lenbuf[n..])
                    .map_err(|_| fmt("truncated blob header".into()))?;
            }
        }
        let name_len = u32::from_le_bytes(lenbuf) as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name).map_err(|_| fmt("truncated name".into()))?;
        let name = String::from_utf8(name).map_err(|_| fmt("non-utf8 name".into()))?;
        let rank = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut r)? as usize);
        }
        let count: usize = shape.iter().product();
        let mut data = vec![0.0f32; count];
        let mut buf = [0u8; 4];
        for v in data.iter_mut() {
            r.read_exact(&mut buf).map_err(|_| fmt(format!("truncated data for {name:?}")))?;
            *v = f32::from_le_bytes(buf);
        }
        let id = store
            .lookup(&name)
            .ok_or_else(|| fmt(format!("unknown parameter {name:?}")))?;
        let p = store.get_mut(id);
        if p.shape != shape {
            return Err(fmt(format!("{name:?}: shape {shape:?} != expected {:?}", p.shape)));
        }
        p.data = data;
        seen += 1;
    }
    if seen != store.len() {
        return Err(fmt(format!("checkpoint holds {seen} parameters, network has {}", store.len())));
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndtensor::ParamGroup;

    #[test]
    fn checkpoint_round_trip() {
        let dir = std::env::temp_dir().join("bnas_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("roundtrip.ckpt");

        let mut store = ParamStore::new();
        store.add("stem.w", vec![2, 3], vec![1.0, -2.0, 3.5, 0.0, 4.0, -1.0], ParamGroup::Weight).unwrap();
        store.add("bn.running_mean", vec![2], vec![0.25, -0.5], ParamGroup::Buffer).unwrap();
        save_checkpoint(&store, &path).unwrap();

        let mut fresh = ParamStore::new();
        fresh.add("stem.w", vec![2, 3], vec![0.0; 6], ParamGroup::Weight).unwrap();
        fresh.add("bn.running_mean", vec![2], vec![0.0; 2], ParamGroup::Buffer).unwrap();
        load_checkpoint(&mut fresh, &path).unwrap();

        assert_eq!(fresh.get(fresh.lookup("stem.w").unwrap()).data, store.get(store.lookup("stem.w").unwrap()).data);
        assert_eq!(fresh.get(fresh.lookup("bn.running_mean").unwrap()).data, vec![0.25, -0.5]);
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let dir = std::env::temp_dir().join("bnas_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("mismatch.ckpt");

        let mut store = ParamStore::new();
        store.add("w", vec![4], vec![1.0; 4], ParamGroup::Weight).unwrap();
        save_checkpoint(&store, &path).unwrap();

        let mut other = ParamStore::new();
        other.add("w", vec![2, 2, 1], vec![0.0; 4], ParamGroup::Weight).unwrap();
        assert!(load_checkpoint(&mut other, &path).is_err());
        std::fs::remove_file(&path).ok();
    }
}
