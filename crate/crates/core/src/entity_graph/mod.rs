//! Conversion of an RGB patch into a pixel-space entity graph: superpixel
//! vertices, boundary-band edges, and their adjacency.

mod adjacency;
mod bundle;
mod slic;
mod tiles;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use adjacency::{build_adjacency, degrees_from_edges};
pub use bundle::{BUNDLE_EXTENSION, BUNDLE_MAGIC};
pub use slic::segment_superpixels;
pub use tiles::{extract_edge_tiles, extract_vertex_tiles, BACKGROUND};

/// An 8-bit RGB image stored row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImagePatch {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
}

impl ImagePatch {
    pub fn new(height: usize, width: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != height * width * 3 {
            return Err(Error::InvalidInput(format!(
                "{height}x{width} RGB image needs {} bytes, got {}",
                height * width * 3,
                pixels.len()
            )));
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let img = image::open(path)?.to_rgb8();
        Ok(Self::from(img))
    }

    pub fn pixel(&self, y: usize, x: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn to_rgb_image(&self) -> image::RgbImage {
        image::RgbImage::from_raw(self.width as u32, self.height as u32, self.pixels.clone())
            .expect("buffer length checked at construction")
    }
}

impl From<image::RgbImage> for ImagePatch {
    fn from(img: image::RgbImage) -> Self {
        Self {
            height: img.height() as usize,
            width: img.width() as usize,
            pixels: img.into_raw(),
        }
    }
}

/// Superpixel assignment of every pixel; labels are `0..n_regions`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u32>,
    pub n_regions: usize,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::InvalidInput("label count does not match image size".into()));
        }
        let n_regions = labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0);
        let mut seen = vec![false; n_regions];
        labels.iter().for_each(|&l| seen[l as usize] = true);
        if seen.iter().any(|s| !s) {
            return Err(Error::InvalidInput("labels are not contiguous".into()));
        }
        Ok(Self {
            height,
            width,
            labels,
            n_regions,
        })
    }

    pub fn label(&self, y: usize, x: usize) -> u32 {
        self.labels[y * self.width + x]
    }

    /// True when every label's pixel set is 4-connected.
    pub fn regions_connected(&self) -> bool {
        let (_, n) = slic::components(&self.labels, self.height, self.width);
        n == self.n_regions
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GraphParams {
    pub n_regions: usize,
    pub compactness: f32,
    pub iterations: usize,
    /// Tile side `a`.
    pub tile: usize,
    pub dilation_radius: usize,
}

impl Default for GraphParams {
    fn default() -> Self {
        Self {
            n_regions: 500,
            compactness: 10.0,
            iterations: 10,
            tile: 64,
            dilation_radius: 2,
        }
    }
}

impl GraphParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_regions < 1 {
            return Err(Error::InvalidParameter("n_regions must be at least 1".into()));
        }
        if !(self.compactness.is_finite() && self.compactness > 0.0) {
            return Err(Error::InvalidParameter("compactness must be positive".into()));
        }
        if self.iterations < 1 {
            return Err(Error::InvalidParameter("iterations must be positive".into()));
        }
        if self.tile < 1 {
            return Err(Error::InvalidParameter("tile side must be positive".into()));
        }
        if self.dilation_radius < 1 {
            return Err(Error::InvalidParameter("dilation radius must be positive".into()));
        }
        Ok(())
    }
}

/// Pixel-space entity graph.
#[derive(Debug, Clone, PartialEq)]
pub struct EntityGraph {
    pub tile: usize,
    /// `N_V · a · a · 3` bytes, tile-major then row-major RGB.
    pub vertex_tiles: Vec<u8>,
    /// `N_E · a · a · 3` bytes.
    pub edge_tiles: Vec<u8>,
    /// Sorted, unique, `i < j`.
    pub edge_index: Vec<(u32, u32)>,
    /// Region centroid `(row, col)`.
    pub centroids: Vec<[f32; 2]>,
    pub degrees: Vec<u32>,
}

impl EntityGraph {
    pub fn num_vertices(&self) -> usize {
        self.centroids.len()
    }

    pub fn num_edges(&self) -> usize {
        self.edge_index.len()
    }

    pub fn tile_bytes(&self) -> usize {
        self.tile * self.tile * 3
    }

    pub fn vertex_tile(&self, i: usize) -> &[u8] {
        let n = self.tile_bytes();
        &self.vertex_tiles[i * n..(i + 1) * n]
    }

    pub fn edge_tile(&self, i: usize) -> &[u8] {
        let n = self.tile_bytes();
        &self.edge_tiles[i * n..(i + 1) * n]
    }

    /// Checks the structural invariants of the graph.
    pub fn validate(&self) -> Result<()> {
        let nv = self.num_vertices();
        if nv == 0 {
            return Err(Error::Invariant("graph has no vertices".into()));
        }
        if self.vertex_tiles.len() != nv * self.tile_bytes() || self.edge_tiles.len() != self.num_edges() * self.tile_bytes() {
            return Err(Error::Invariant("tile buffers do not match counts".into()));
        }
        for w in self.edge_index.windows(2) {
            if w[0] >= w[1] {
                return Err(Error::Invariant("edge index not strictly sorted".into()));
            }
        }
        if self.edge_index.iter().any(|&(i, j)| i >= j || j as usize >= nv) {
            return Err(Error::Invariant("edge endpoints out of order or range".into()));
        }
        if degrees_from_edges(&self.edge_index, nv) != self.degrees {
            return Err(Error::Invariant("degrees inconsistent with edges".into()));
        }
        Ok(())
    }
}

/// Segmentation, adjacency, and tile extraction composed.
pub fn build_entity_graph(image: &ImagePatch, params: &GraphParams) -> Result<EntityGraph> {
    params.validate()?;
    let labels = segment_superpixels(image, params.n_regions, params.compactness, params.iterations)?;
    graph_from_labels(image, &labels, params.tile, params.dilation_radius)
}

pub fn graph_from_labels(image: &ImagePatch, labels: &LabelMap, tile: usize, dilation_radius: usize) -> Result<EntityGraph> {
    let (edge_index, degrees) = build_adjacency(labels);
    let (vertex_tiles, centroids) = extract_vertex_tiles(image, labels, tile)?;
    let edge_tiles = extract_edge_tiles(image, labels, &edge_index, tile, dilation_radius)?;
    Ok(EntityGraph {
        tile,
        vertex_tiles,
        edge_tiles,
        edge_index,
        centroids,
        degrees,
    })
}
