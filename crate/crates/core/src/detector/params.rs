//! Flat parameter storage, gradients of the same layout, and the binary
//! checkpoint format.
//!
//! Checkpoint layout (little endian):
//! `b"DGDETCK1"`, `u32` format version, 32-byte config hash, `u64`
//! iteration, `u32` tensor count, then per tensor: `u32` name length, name
//! bytes, `u32` rank, `u32` dims, `f32` values. A `u8` flag follows; when it
//! is 1 the momentum buffers are stored in the same order (values only).

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"DGDETCK1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    data: Vec<Vec<f32>>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> ParamId {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "shape/data mismatch");
        self.names.push(name.into());
        self.shapes.push(shape);
        self.data.push(data);
        ParamId(self.data.len() - 1)
    }

    #[inline]
    pub fn get(&self, id: ParamId) -> &[f32] {
        &self.data[id.0]
    }

    #[inline]
    pub fn get_mut(&mut self, id: ParamId) -> &mut [f32] {
        &mut self.data[id.0]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn shape(&self, id: ParamId) -> &[usize] {
        &self.shapes[id.0]
    }

    pub fn num_values(&self) -> usize {
        self.data.iter().map(Vec::len).sum()
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            names: self.names.clone(),
            shapes: self.shapes.clone(),
            data: self.data.iter().map(|d| vec![0.0; d.len()]).collect(),
        }
    }

    pub fn tensors(&self) -> impl Iterator<Item = &[f32]> {
        self.data.iter().map(Vec::as_slice)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Vec<f32>> {
        self.data.iter_mut()
    }

    pub fn add_assign(&mut self, other: &ParamSet) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += *y;
            }
        }
    }

    pub fn scale(&mut self, s: f32) {
        for a in &mut self.data {
            a.iter_mut().for_each(|x| *x *= s);
        }
    }

    pub fn sq_norm(&self) -> f64 {
        self.data
            .iter()
            .flat_map(|d| d.iter())
            .map(|&v| (v as f64) * (v as f64))
            .sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().flat_map(|d| d.iter()).all(|v| v.is_finite())
    }

    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.names == other.names && self.shapes == other.shapes
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_hash: [u8; 32],
    pub iteration: u64,
    pub params: ParamSet,
    pub momentum: Option<ParamSet>,
}

fn w_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn r_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn w_values(w: &mut impl Write, v: &[f32]) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(v.len() * 4);
    for x in v {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    w.write_all(&buf)
}

fn r_values(r: &mut impl Read, n: usize) -> std::io::Result<Vec<f32>> {
    let mut buf = vec![0u8; n * 4];
    r.read_exact(&mut buf)?;
    Ok(buf.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    fn write(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w_u32(w, CHECKPOINT_VERSION)?;
        w.write_all(&self.config_hash)?;
        w.write_all(&self.iteration.to_le_bytes())?;
        w_u32(w, self.params.len() as u32)?;
        for i in 0..self.params.len() {
            let name = self.params.names[i].as_bytes();
            w_u32(w, name.len() as u32)?;
            w.write_all(name)?;
            w_u32(w, self.params.shapes[i].len() as u32)?;
            for &d in &self.params.shapes[i] {
                w_u32(w, d as u32)?;
            }
            w_values(w, &self.params.data[i])?;
        }
        match &self.momentum {
            Some(m) => {
                w.write_all(&[1])?;
                for d in &m.data {
                    w_values(w, d)?;
                }
            }
            None => w.write_all(&[0])?,
        }
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |e: std::io::Error| Error::Checkpoint(format!("truncated or corrupt: {e}"));
        let mut r = bytes;
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(bad)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r_u32(&mut r).map_err(bad)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let mut config_hash = [0u8; 32];
        r.read_exact(&mut config_hash).map_err(bad)?;
        let mut it = [0u8; 8];
        r.read_exact(&mut it).map_err(bad)?;
        let n = r_u32(&mut r).map_err(bad)? as usize;
        let mut params = ParamSet::new();
        for _ in 0..n {
            let len = r_u32(&mut r).map_err(bad)? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name).map_err(bad)?;
            let rank = r_u32(&mut r).map_err(bad)? as usize;
            let shape = (0..rank)
                .map(|_| r_u32(&mut r).map(|d| d as usize))
                .collect::<std::io::Result<Vec<_>>>()
                .map_err(bad)?;
            let data = r_values(&mut r, shape.iter().product()).map_err(bad)?;
            let name = String::from_utf8(name).map_err(|_| Error::Checkpoint("non-utf8 name".into()))?;
            params.push(name, shape, data);
        }
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag).map_err(bad)?;
        let momentum = if flag[0] == 1 {
            let mut m = params.zeros_like();
            for d in m.data.iter_mut() {
                let len = d.len();
                *d = r_values(&mut r, len).map_err(bad)?;
            }
            Some(m)
        } else {
            None
        };
        if !r.is_empty() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(Self { config_hash, iteration: u64::from_le_bytes(it), params, momentum })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    /// Reads a checkpoint and rejects it unless it was written for
    /// `expected_hash`.
    pub fn load(path: &Path, expected_hash: &[u8; 32]) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let ck = Self::from_bytes(&bytes)?;
        if &ck.config_hash != expected_hash {
            return Err(Error::Checkpoint(format!(
                "config hash mismatch: checkpoint {} vs expected {}",
                hex::encode(ck.config_hash),
                hex::encode(expected_hash)
            )));
        }
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut p = ParamSet::new();
        p.push("a", vec![2, 3], (0..6).map(|v| v as f32 * 0.5).collect());
        p.push("b", vec![1], vec![-1.25]);
        let mut m = p.zeros_like();
        m.get_mut(ParamId(1))[0] = 3.0;
        Checkpoint { config_hash: [7; 32], iteration: 42, params: p, momentum: Some(m) }
    }

    #[test]
    fn bytes_round_trip() {
        let ck = sample();
        assert_eq!(Checkpoint::from_bytes(&ck.to_bytes()).unwrap(), ck);
        let mut no_m = ck.clone();
        no_m.momentum = None;
        assert_eq!(Checkpoint::from_bytes(&no_m.to_bytes()).unwrap(), no_m);
    }

    #[test]
    fn rejects_corruption_and_hash_mismatch() {
        let ck = sample();
        let bytes = ck.to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        ck.save(&path).unwrap();
        assert!(Checkpoint::load(&path, &[7; 32]).is_ok());
        assert!(matches!(Checkpoint::load(&path, &[8; 32]), Err(Error::Checkpoint(_))));
    }
}
