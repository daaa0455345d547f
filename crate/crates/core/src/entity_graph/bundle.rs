//! `.hmgg` graph bundles (little-endian):
//!
//! ```text
//! "HMG1" | u32 version=1 | u32 N_V | u32 N_E | u32 a | u8 channels=3
//! vertex tiles  N_V·a·a·3 bytes
//! edge tiles    N_E·a·a·3 bytes
//! edge index    N_E × (u32 i, u32 j)
//! centroids     N_V × (f32 row, f32 col)
//! ```

use std::io::Write;
use std::path::Path;

use super::{degrees_from_edges, EntityGraph};
use crate::error::{Error, Result};

pub const BUNDLE_MAGIC: &[u8; 4] = b"HMG1";
pub const BUNDLE_EXTENSION: &str = "hmgg";
const VERSION: u32 = 1;

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Format("bundle truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

impl EntityGraph {
    pub fn to_bundle_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(21 + self.vertex_tiles.len() + self.edge_tiles.len() + 8 * (self.num_edges() + self.num_vertices()));
        out.extend_from_slice(BUNDLE_MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.num_vertices() as u32).to_le_bytes());
        out.extend_from_slice(&(self.num_edges() as u32).to_le_bytes());
        out.extend_from_slice(&(self.tile as u32).to_le_bytes());
        out.push(3);
        out.extend_from_slice(&self.vertex_tiles);
        out.extend_from_slice(&self.edge_tiles);
        for &(i, j) in &self.edge_index {
            out.extend_from_slice(&i.to_le_bytes());
            out.extend_from_slice(&j.to_le_bytes());
        }
        for c in &self.centroids {
            out.extend_from_slice(&c[0].to_le_bytes());
            out.extend_from_slice(&c[1].to_le_bytes());
        }
        out
    }

    pub fn from_bundle_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4)? != BUNDLE_MAGIC {
            return Err(Error::Format("bad bundle magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported bundle version {version}")));
        }
        let nv = r.u32()? as usize;
        let ne = r.u32()? as usize;
        let a = r.u32()? as usize;
        let ch = r.take(1)?[0];
        if ch != 3 {
            return Err(Error::Format(format!("expected 3 channels, found {ch}")));
        }
        let tb = a * a * 3;
        let vertex_tiles = r.take(nv * tb)?.to_vec();
        let edge_tiles = r.take(ne * tb)?.to_vec();
        let mut edge_index = Vec::with_capacity(ne);
        for _ in 0..ne {
            edge_index.push((r.u32()?, r.u32()?));
        }
        let mut centroids = Vec::with_capacity(nv);
        for _ in 0..nv {
            centroids.push([r.f32()?, r.f32()?]);
        }
        if r.pos != buf.len() {
            return Err(Error::Format("trailing bytes after bundle".into()));
        }
        if edge_index.iter().any(|&(i, j)| j as usize >= nv || i >= j) {
            return Err(Error::Format("edge index out of range".into()));
        }
        let degrees = degrees_from_edges(&edge_index, nv);
        let g = EntityGraph {
            tile: a,
            vertex_tiles,
            edge_tiles,
            edge_index,
            centroids,
            degrees,
        };
        g.validate().map_err(|e| Error::Format(e.to_string()))?;
        Ok(g)
    }

    pub fn save_bundle(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bundle_bytes())?;
        Ok(())
    }

    pub fn load_bundle(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bundle_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> EntityGraph {
        EntityGraph {
            tile: 2,
            vertex_tiles: (0..24).collect(),
            edge_tiles: (100..112).collect(),
            edge_index: vec![(0, 1)],
            centroids: vec![[0.5, 1.25], [3.0, 4.5]],
            degrees: vec![1, 1],
        }
    }

    #[test]
    fn header_layout() {
        let b = sample().to_bundle_bytes();
        assert_eq!(&b[..4], b"HMG1");
        assert_eq!(&b[4..8], &1u32.to_le_bytes());
        assert_eq!(&b[8..12], &2u32.to_le_bytes());
        assert_eq!(&b[12..16], &1u32.to_le_bytes());
        assert_eq!(&b[16..20], &2u32.to_le_bytes());
        assert_eq!(b[20], 3);
        assert_eq!(b.len(), 21 + 24 + 12 + 8 + 16);
    }

    #[test]
    fn round_trip() {
        let g = sample();
        assert_eq!(EntityGraph::from_bundle_bytes(&g.to_bundle_bytes()).unwrap(), g);
    }

    #[test]
    fn rejects_corruption() {
        let mut b = sample().to_bundle_bytes();
        assert!(EntityGraph::from_bundle_bytes(&b[..b.len() - 1]).is_err());
        b[0] = b'X';
        assert!(EntityGraph::from_bundle_bytes(&b).is_err());
    }
}
