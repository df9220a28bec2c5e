//! Flat binary parameter checkpoints.
//!
//! Layout: the 8 magic bytes `HIBCKPT1`, then one record per tensor until
//! end of file. A record is the name length (u64), the UTF-8 name, the rank
//! (u64), each dimension (u64) and the payload (f64). All integers and
//! floats are little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use crate::error::{NumError, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"HIBCKPT1";

pub fn write_checkpoint<'a, W: Write>(
    mut w: W,
    entries: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
) -> Result<()> {
    w.write_all(MAGIC)?;
    for (name, t) in entries {
        w.write_all(&(name.len() as u64).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rank() as u64).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|e| NumError::Checkpoint(format!("truncated record: {e}")))?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Vec<(String, Tensor)>> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| NumError::Checkpoint("file shorter than magic".into()))?;
    if &magic != MAGIC {
        return Err(NumError::Checkpoint("bad magic bytes".into()));
    }
    let mut out = Vec::new();
    loop {
        let mut b = [0u8; 8];
        // Clean EOF is only legal between records.
        match r.read(&mut b[..1]) {
            Ok(0) => break,
            Ok(_) => {}
            Err(e) if e.kind() == ErrorKind::Interrupted => continue,
            Err(e) => return Err(e.into()),
        }
        r.read_exact(&mut b[1..]).map_err(|e| NumError::Checkpoint(format!("truncated record: {e}")))?;
        let name_len = u64::from_le_bytes(b) as usize;
        if name_len > 1 << 16 {
            return Err(NumError::Checkpoint(format!("implausible name length {name_len}")));
        }
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name).map_err(|e| NumError::Checkpoint(format!("truncated name: {e}")))?;
        let name = String::from_utf8(name).map_err(|_| NumError::Checkpoint("name is not UTF-8".into()))?;
        let rank = read_u64(&mut r)? as usize;
        if rank > 8 {
            return Err(NumError::Checkpoint(format!("`{name}`: implausible rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(&mut r)? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            let mut fb = [0u8; 8];
            r.read_exact(&mut fb).map_err(|e| NumError::Checkpoint(format!("`{name}`: truncated payload: {e}")))?;
            data.push(f64::from_le_bytes(fb));
        }
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

impl ParamStore {
    pub fn save(&self, path: &Path) -> Result<()> {
        let f = BufWriter::new(File::create(path)?);
        write_checkpoint(f, self.iter())
    }

    /// Loads every tensor in the file into this store (names must exist).
    pub fn load(&mut self, path: &Path) -> Result<()> {
        let entries = read_checkpoint(BufReader::new(File::open(path)?))?;
        self.load_entries(&entries)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bitwise() {
        let a = Tensor::matrix(2, 3, vec![1.0, -0.0, f64::MIN_POSITIVE, 3.5e300, -1e-300, 0.1]).unwrap();
        let b = Tensor::scalar(std::f64::consts::PI);
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, [("psi/w", &a), ("alpha", &b)]).unwrap();
        let back = read_checkpoint(&buf[..]).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].0, "psi/w");
        assert_eq!(back[0].1.shape(), &[2, 3]);
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back[0].1), bits(&a));
        assert_eq!(back[1].1.shape(), &[] as &[usize]);
        assert_eq!(bits(&back[1].1), bits(&b));
    }

    #[test]
    fn layout_matches_documented_format() {
        let t = Tensor::vector(vec![2.0]);
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, [("x", &t)]).unwrap();
        let mut expected = b"HIBCKPT1".to_vec();
        expected.extend(1u64.to_le_bytes());
        expected.extend(b"x");
        expected.extend(1u64.to_le_bytes());
        expected.extend(1u64.to_le_bytes());
        expected.extend(2.0f64.to_le_bytes());
        assert_eq!(buf, expected);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(read_checkpoint(&b"NOTACKPT"[..]).is_err());
        let t = Tensor::vector(vec![1.0, 2.0]);
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, [("x", &t)]).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(read_checkpoint(&buf[..]).is_err());
    }
}
