//! Flat binary parameter files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic  "SQPW"
//! u32    format version (1)
//! u64    seed
//! u32    section count
//! per section: u32 name length, name bytes (UTF-8), u64 rows, u64 cols
//! f64    values of every section, row-major, in table order
//! ```

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

const MAGIC: &[u8; 4] = b"SQPW";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamFile {
    pub seed: u64,
    pub sections: Vec<(String, Matrix)>,
}

impl ParamFile {
    pub fn new(seed: u64) -> Self {
        Self { seed, sections: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, m: Matrix) {
        self.sections.push((name.into(), m));
    }

    pub fn get(&self, name: &str) -> Result<&Matrix> {
        self.sections
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, m)| m)
            .ok_or_else(|| Error::InvalidInput(format!("parameter file has no section `{name}`")))
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&self.seed.to_le_bytes())?;
        w.write_all(&(self.sections.len() as u32).to_le_bytes())?;
        for (name, m) in &self.sections {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(m.rows() as u64).to_le_bytes())?;
            w.write_all(&(m.cols() as u64).to_le_bytes())?;
        }
        for (_, m) in &self.sections {
            for x in m.data() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::InvalidInput("not a parameter file (bad magic)".into()));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(Error::InvalidInput(format!("unsupported parameter file version {version}")));
        }
        let seed = read_u64(r)?;
        let n = read_u32(r)? as usize;
        let mut table = Vec::with_capacity(n);
        for _ in 0..n {
            let len = read_u32(r)? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::InvalidInput("section name is not UTF-8".into()))?;
            let rows = read_u64(r)? as usize;
            let cols = read_u64(r)? as usize;
            table.push((name, rows, cols));
        }
        let mut sections = Vec::with_capacity(n);
        for (name, rows, cols) in table {
            let mut data = Vec::with_capacity(rows * cols);
            let mut buf = [0u8; 8];
            for _ in 0..rows * cols {
                r.read_exact(&mut buf)?;
                data.push(f64::from_le_bytes(buf));
            }
            sections.push((name, Matrix::from_vec(rows, cols, data)?));
        }
        Ok(Self { seed, sections })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut f)
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let mut p = ParamFile::new(42);
        p.push("a", Matrix::from_rows(&[vec![1.0, -2.5], vec![f64::MIN_POSITIVE, 3.0]]).unwrap());
        p.push("empty", Matrix::zeros(0, 3));
        let mut buf = Vec::new();
        p.write_to(&mut buf).unwrap();
        let back = ParamFile::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, p);
        assert!(ParamFile::read_from(&mut &b"XXXX"[..]).is_err());
    }
}
