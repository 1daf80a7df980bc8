//! `BNASGRD1` gradient-magnitude logs: little-endian, magic + version,
//! then one series per record — name blob, value count (u32), f32 values.
//! The trainer emits one per-step series ("total", the whole-network
//! weight-gradient L2 norm); the format carries several so per-layer
//! breakdowns stay representable.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use bnas_core::{Error, Result};

pub const MAGIC: &[u8; 8] = b"BNASGRD1";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct GradSeries {
    pub name: String,
    pub values: Vec<f32>,
}

pub fn write_gradlog(path: &Path, series: &[GradSeries]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(series.len() as u32).to_le_bytes())?;
    for s in series {
        w.write_all(&(s.name.len() as u32).to_le_bytes())?;
        w.write_all(s.name.as_bytes())?;
        w.write_all(&(s.values.len() as u32).to_le_bytes())?;
        for &v in &s.values {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_gradlog(path: &Path) -> Result<Vec<GradSeries>> {
    let fmt = |detail: String| Error::Format { path: path.display().to_string(), detail };
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| fmt("file shorter than the magic".into()))?;
    if &magic != MAGIC {
        return Err(fmt("bad magic, not a BNASGRD1 file".into()));
    }
    if read_u32(&mut r)? != VERSION {
        return Err(fmt("unsupported version".into()));
    }
    let count = read_u32(&mut r)? as usize;
    let mut series = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name).map_err(|_| fmt("truncated series name".into()))?;
        let name = String::from_utf8(name).map_err(|_| fmt("non-utf8 series name".into()))?;
        let n = read_u32(&mut r)? as usize;
        let mut values = Vec::with_capacity(n);
        let mut buf = [0u8; 4];
        for _ in 0..n {
            r.read_exact(&mut buf).map_err(|_| fmt(format!("truncated values for {name:?}")))?;
            values.push(f32::from_le_bytes(buf));
        }
        series.push(GradSeries { name, values });
    }
    Ok(series)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}
