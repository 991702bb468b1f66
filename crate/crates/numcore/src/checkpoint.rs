//! Flat binary tensor container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes  "NCTENSR1"
//! count        u64      number of records
//! record*      name_len u32, name (utf-8), rank u32,
//!              extents u64 × rank, payload f64 × product(extents)
//! ```
//!
//! Payloads are written with `f64::to_le_bytes`, so a round trip is
//! bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::{Error, Result, Tensor};

pub const MAGIC: [u8; 8] = *b"NCTENSR1";

/// Upper bound on a single record's name, guarding against corrupt input.
const MAX_NAME: u32 = 1 << 16;
const MAX_RANK: u32 = 16;

pub fn write<W: Write>(mut w: W, records: &[(&str, &Tensor)]) -> Result<()> {
    w.write_all(&MAGIC)?;
    w.write_all(&(records.len() as u64).to_le_bytes())?;
    for (name, t) in records {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &e in t.shape() {
            w.write_all(&(e as u64).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read<R: Read>(mut r: R) -> Result<Vec<(String, Tensor)>> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let count = read_u64(&mut r)?;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = read_u32(&mut r)?;
        if len > MAX_NAME {
            return Err(Error::Format(format!("record name of {len} bytes")));
        }
        let mut name = vec![0u8; len as usize];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| Error::Format(e.to_string()))?;
        let rank = read_u32(&mut r)?;
        if rank > MAX_RANK {
            return Err(Error::Format(format!("rank {rank} for {name}")));
        }
        let shape = (0..rank)
            .map(|_| read_u64(&mut r).map(|e| e as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .ok_or_else(|| Error::Format(format!("extents {shape:?} overflow")))?;
        let mut payload = vec![0u8; numel.checked_mul(8).ok_or_else(|| Error::Format("payload overflow".into()))?];
        r.read_exact(&mut payload)?;
        let data = payload
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

pub fn save(path: impl AsRef<Path>, records: &[(&str, &Tensor)]) -> Result<()> {
    write(BufWriter::new(File::create(path)?), records)
}

pub fn load(path: impl AsRef<Path>) -> Result<Vec<(String, Tensor)>> {
    read(BufReader::new(File::open(path)?))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let t = Tensor::new([2], vec![1.5, -0.0]).unwrap();
        let mut buf = Vec::new();
        write(&mut buf, &[("w", &t)]).unwrap();
        assert_eq!(&buf[..8], b"NCTENSR1");
        assert_eq!(u64::from_le_bytes(buf[8..16].try_into().unwrap()), 1);
        // 8 magic + 8 count + 4 len + 1 name + 4 rank + 8 extent + 16 payload
        assert_eq!(buf.len(), 49);
        let back = read(&buf[..]).unwrap();
        assert_eq!(back[0].0, "w");
        assert_eq!(back[0].1.data()[1].to_bits(), (-0.0f64).to_bits());
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(matches!(read(&b"NOTATENS\0\0\0\0\0\0\0\0"[..]), Err(Error::Format(_))));
        let t = Tensor::zeros([3]);
        let mut buf = Vec::new();
        write(&mut buf, &[("x", &t)]).unwrap();
        buf.truncate(buf.len() - 1);
        assert!(matches!(read(&buf[..]), Err(Error::Io(_))));
    }
}
