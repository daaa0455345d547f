//! Latent entity graphs and their `.hmgl` files (little-endian):
//!
//! ```text
//! "HMGL" | u32 version=1 | u32 N_V | u32 N_E | u32 l | u32 c
//! vertex latents  N_V·l·l·c f32
//! edge latents    N_E·l·l·c f32
//! edge index      N_E × (u32 i, u32 j)
//! degrees         N_V × u32
//! ```

use std::path::Path;

use crate::entity_graph::degrees_from_edges;
use crate::error::{Error, Result};

pub const LATENT_MAGIC: &[u8; 4] = b"HMGL";
const VERSION: u32 = 1;

/// Entity graph with every tile replaced by its flattened `l×l×c` latent.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGraph {
    pub side: usize,
    pub channels: usize,
    pub vertex_latents: Vec<f32>,
    pub edge_latents: Vec<f32>,
    pub edge_index: Vec<(u32, u32)>,
    pub degrees: Vec<u32>,
}

impl LatentGraph {
    pub fn latent_dim(&self) -> usize {
        self.side * self.side * self.channels
    }

    pub fn num_vertices(&self) -> usize {
        self.degrees.len()
    }

    pub fn num_edges(&self) -> usize {
        self.edge_index.len()
    }

    pub fn vertex(&self, i: usize) -> &[f32] {
        let d = self.latent_dim();
        &self.vertex_latents[i * d..(i + 1) * d]
    }

    pub fn edge(&self, i: usize) -> &[f32] {
        let d = self.latent_dim();
        &self.edge_latents[i * d..(i + 1) * d]
    }

    pub fn validate(&self) -> Result<()> {
        let (nv, d) = (self.num_vertices(), self.latent_dim());
        if d == 0 {
            return Err(Error::Invariant("latent width is zero".into()));
        }
        if self.vertex_latents.len() != nv * d || self.edge_latents.len() != self.num_edges() * d {
            return Err(Error::Invariant("latent buffers do not match counts".into()));
        }
        if self.edge_index.iter().any(|&(i, j)| i >= j || j as usize >= nv) {
            return Err(Error::Invariant("edge endpoints out of order or range".into()));
        }
        if degrees_from_edges(&self.edge_index, nv) != self.degrees {
            return Err(Error::Invariant("degrees inconsistent with edges".into()));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(LATENT_MAGIC);
        for v in [VERSION, self.num_vertices() as u32, self.num_edges() as u32, self.side as u32, self.channels as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in self.vertex_latents.iter().chain(&self.edge_latents) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for &(i, j) in &self.edge_index {
            out.extend_from_slice(&i.to_le_bytes());
            out.extend_from_slice(&j.to_le_bytes());
        }
        for d in &self.degrees {
            out.extend_from_slice(&d.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        if buf.len() < 24 || &buf[..4] != LATENT_MAGIC {
            return Err(Error::Format("not a latent graph file".into()));
        }
        let mut words = buf[4..].chunks_exact(4).map(|c| <[u8; 4]>::try_from(c).unwrap());
        let mut next = || words.next().ok_or_else(|| Error::Format("latent graph truncated".into()));
        let header: Vec<usize> = (0..5).map(|_| next().map(|w| u32::from_le_bytes(w) as usize)).collect::<Result<_>>()?;
        let [version, nv, ne, side, channels] = header[..] else { unreachable!() };
        if version != VERSION as usize {
            return Err(Error::Format(format!("unsupported latent graph version {version}")));
        }
        let d = side * side * channels;
        let expected = 24 + 4 * ((nv + ne) * d + 2 * ne + nv);
        if buf.len() != expected {
            return Err(Error::Format(format!("latent graph is {} bytes, expected {expected}", buf.len())));
        }
        let mut f32s = |n: usize| -> Result<Vec<f32>> { (0..n).map(|_| next().map(f32::from_le_bytes)).collect() };
        let vertex_latents = f32s(nv * d)?;
        let edge_latents = f32s(ne * d)?;
        let mut u32s = |n: usize| -> Result<Vec<u32>> { (0..n).map(|_| next().map(u32::from_le_bytes)).collect() };
        let flat = u32s(2 * ne)?;
        let degrees = u32s(nv)?;
        let g = LatentGraph {
            side,
            channels,
            vertex_latents,
            edge_latents,
            edge_index: flat.chunks(2).map(|p| (p[0], p[1])).collect(),
            degrees,
        };
        g.validate().map_err(|e| Error::Format(e.to_string()))?;
        Ok(g)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> LatentGraph {
        LatentGraph {
            side: 1,
            channels: 2,
            vertex_latents: vec![0.5, -1.0, 2.0, 3.5, 0.0, 1e-3],
            edge_latents: vec![7.0, 8.0, -9.0, 0.25],
            edge_index: vec![(0, 1), (1, 2)],
            degrees: vec![1, 2, 1],
        }
    }

    #[test]
    fn round_trip() {
        let g = sample();
        let b = g.to_bytes();
        assert_eq!(&b[..4], b"HMGL");
        assert_eq!(LatentGraph::from_bytes(&b).unwrap(), g);
    }

    #[test]
    fn rejects_bad_input() {
        let b = sample().to_bytes();
        assert!(LatentGraph::from_bytes(&b[..b.len() - 4]).is_err());
        let mut extra = b.clone();
        extra.push(0);
        assert!(LatentGraph::from_bytes(&extra).is_err());
        let mut wrong_deg = b;
        let n = wrong_deg.len();
        wrong_deg[n - 4] = 9;
        assert!(LatentGraph::from_bytes(&wrong_deg).is_err());
    }
}
