//! Random division of a latent graph into a visible condition subgraph and
//! a masked target subgraph.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::entity_graph::degrees_from_edges;
use crate::error::{Error, Result};
use crate::latent_codec::LatentGraph;
use crate::nn::Tensor;

/// Which entities went to the masked subgraph (`true` = masked).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskSplit {
    #[serde(with = "bitset")]
    pub vertex_mask: Vec<bool>,
    #[serde(with = "bitset")]
    pub edge_mask: Vec<bool>,
    pub ratio: f64,
    pub seed: u64,
}

mod bitset {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    struct Bits {
        len: usize,
        words: Vec<u64>,
    }

    pub fn serialize<S: Serializer>(mask: &[bool], s: S) -> Result<S::Ok, S::Error> {
        let mut words = vec![0u64; mask.len().div_ceil(64)];
        for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
            words[i / 64] |= 1 << (i % 64);
        }
        Bits { len: mask.len(), words }.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<bool>, D::Error> {
        let b = Bits::deserialize(d)?;
        if b.words.len() != b.len.div_ceil(64) {
            return Err(serde::de::Error::custom("bitset word count does not match length"));
        }
        Ok((0..b.len).map(|i| b.words[i / 64] >> (i % 64) & 1 == 1).collect())
    }
}

/// Masked count for `n` items: `round(r·n)` clamped to `[lo, hi]`.
pub fn masked_count(n: usize, ratio: f64, lo: usize, hi: usize) -> usize {
    ((ratio * n as f64).round() as usize).clamp(lo, hi)
}

fn check_ratio(ratio: f64) -> Result<()> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidParameter(format!("mask ratio {ratio} outside (0, 1)")));
    }
    Ok(())
}

impl MaskSplit {
    /// Samples vertex and edge masks independently, uniformly without
    /// replacement.
    pub fn sample(n_vertices: usize, n_edges: usize, ratio: f64, seed: u64) -> Result<Self> {
        check_ratio(ratio)?;
        if n_vertices < 2 {
            return Err(Error::InvalidInput(format!("cannot split a graph with {n_vertices} vertices")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let kv = masked_count(n_vertices, ratio, 1, n_vertices - 1);
        let ke = masked_count(n_edges, ratio, 0, n_edges);
        let mut vertex_mask = vec![false; n_vertices];
        sample(&mut rng, n_vertices, kv).into_iter().for_each(|i| vertex_mask[i] = true);
        let mut edge_mask = vec![false; n_edges];
        sample(&mut rng, n_edges, ke).into_iter().for_each(|i| edge_mask[i] = true);
        Ok(Self {
            vertex_mask,
            edge_mask,
            ratio,
            seed,
        })
    }

    pub fn masked_vertices(&self) -> usize {
        self.vertex_mask.iter().filter(|&&m| m).count()
    }

    pub fn masked_edges(&self) -> usize {
        self.edge_mask.iter().filter(|&&m| m).count()
    }
}

/// One side of a split.
#[derive(Debug, Clone, PartialEq)]
pub struct SubGraph {
    /// `[n_v, d]` latents of the kept vertices, in ascending original order.
    pub vertices: Tensor,
    /// `[n_e, d]` latents of the kept edges, in ascending original order.
    pub edges: Tensor,
    /// Parent indices of the kept vertices.
    pub vertex_ids: Vec<usize>,
    /// Parent indices of the kept edges.
    pub edge_ids: Vec<usize>,
    /// Parent endpoints of each kept edge; the dual graph is built from these.
    pub edge_endpoints: Vec<(u32, u32)>,
    /// Links among kept vertices in local indices.
    pub adjacency: Vec<(u32, u32)>,
    pub degrees: Vec<u32>,
}

impl SubGraph {
    pub fn num_vertices(&self) -> usize {
        self.vertex_ids.len()
    }

    pub fn num_edges(&self) -> usize {
        self.edge_ids.len()
    }
}

/// Keeps exactly the edges with both endpoints in `kept`, renumbered.
/// `remap[old]` is the new index of a kept vertex.
pub fn restrict_adjacency(
    edge_index: &[(u32, u32)],
    degrees: &[u32],
    kept: &[usize],
) -> (Vec<(u32, u32)>, Vec<u32>, Vec<Option<u32>>) {
    let mut remap = vec![None; degrees.len()];
    let mut sorted = kept.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    for (new, &old) in sorted.iter().enumerate() {
        remap[old] = Some(new as u32);
    }
    let sub: Vec<(u32, u32)> = edge_index
        .iter()
        .filter_map(|&(i, j)| match (remap[i as usize], remap[j as usize]) {
            (Some(a), Some(b)) => Some((a.min(b), a.max(b))),
            _ => None,
        })
        .collect();
    let deg = degrees_from_edges(&sub, sorted.len());
    (sub, deg, remap)
}

fn gather(src: &[f32], d: usize, ids: &[usize]) -> Tensor {
    let mut data = Vec::with_capacity(ids.len() * d);
    for &i in ids {
        data.extend(src[i * d..(i + 1) * d].iter().map(|&v| v as f64));
    }
    Tensor {
        shape: vec![ids.len(), d],
        data,
    }
}

fn side(g: &LatentGraph, vmask: &[bool], emask: &[bool], want: bool) -> SubGraph {
    let d = g.latent_dim();
    let vertex_ids: Vec<usize> = (0..vmask.len()).filter(|&i| vmask[i] == want).collect();
    let edge_ids: Vec<usize> = (0..emask.len()).filter(|&i| emask[i] == want).collect();
    let (adjacency, degrees, _) = restrict_adjacency(&g.edge_index, &g.degrees, &vertex_ids);
    SubGraph {
        vertices: gather(&g.vertex_latents, d, &vertex_ids),
        edges: gather(&g.edge_latents, d, &edge_ids),
        edge_endpoints: edge_ids.iter().map(|&e| g.edge_index[e]).collect(),
        vertex_ids,
        edge_ids,
        adjacency,
        degrees,
    }
}

/// Materializes `(visible, masked)` subgraphs for a given split.
pub fn apply_split(g: &LatentGraph, split: &MaskSplit) -> Result<(SubGraph, SubGraph)> {
    if split.vertex_mask.len() != g.num_vertices() || split.edge_mask.len() != g.num_edges() {
        return Err(Error::Shape("mask lengths do not match the graph".into()));
    }
    Ok((
        side(g, &split.vertex_mask, &split.edge_mask, false),
        side(g, &split.vertex_mask, &split.edge_mask, true),
    ))
}

/// The whole graph as a single visible side, as used at inference.
pub fn full_subgraph(g: &LatentGraph) -> SubGraph {
    side(g, &vec![false; g.num_vertices()], &vec![false; g.num_edges()], false)
}

/// Samples a split and returns `(G_e, G_d, split)`.
pub fn split_graph(g: &LatentGraph, ratio: f64, seed: u64) -> Result<(SubGraph, SubGraph, MaskSplit)> {
    let split = MaskSplit::sample(g.num_vertices(), g.num_edges(), ratio, seed)?;
    let (ge, gd) = apply_split(g, &split)?;
    Ok((ge, gd, split))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn path_graph(n: usize) -> LatentGraph {
        let edge_index: Vec<(u32, u32)> = (0..n as u32 - 1).map(|i| (i, i + 1)).collect();
        LatentGraph {
            side: 1,
            channels: 1,
            vertex_latents: (0..n).map(|i| i as f32).collect(),
            edge_latents: (0..n - 1).map(|i| 100.0 + i as f32).collect(),
            degrees: degrees_from_edges(&edge_index, n),
            edge_index,
        }
    }

    #[test]
    fn ten_vertices_at_sixty_percent() {
        let g = path_graph(10);
        let (ge, gd, s) = split_graph(&g, 0.6, 4).unwrap();
        assert_eq!((gd.num_vertices(), ge.num_vertices()), (6, 4));
        assert_eq!(s.masked_vertices(), 6);
        assert_eq!(s.masked_edges(), 5);
    }

    #[test]
    fn complementary_and_latents_follow_ids() {
        let g = path_graph(9);
        for seed in 0..20 {
            let (ge, gd, _) = split_graph(&g, 0.5, seed).unwrap();
            let mut all: Vec<usize> = ge.vertex_ids.iter().chain(&gd.vertex_ids).copied().collect();
            all.sort();
            assert_eq!(all, (0..9).collect::<Vec<_>>());
            let mut edges: Vec<usize> = ge.edge_ids.iter().chain(&gd.edge_ids).copied().collect();
            edges.sort();
            assert_eq!(edges, (0..8).collect::<Vec<_>>());
            for (k, &v) in gd.vertex_ids.iter().enumerate() {
                assert_eq!(gd.vertices.data[k], v as f64);
            }
            for (k, &e) in ge.edge_ids.iter().enumerate() {
                assert_eq!(ge.edges.data[k], 100.0 + e as f64);
            }
        }
    }

    #[test]
    fn every_vertex_is_masked_equally_often() {
        let mut hits = [0usize; 10];
        for seed in 0..10_000 {
            let s = MaskSplit::sample(10, 0, 0.5, seed).unwrap();
            s.vertex_mask.iter().enumerate().filter(|(_, &m)| m).for_each(|(i, _)| hits[i] += 1);
        }
        assert!(hits.iter().all(|&h| h.abs_diff(5000) <= 150), "{hits:?}");
    }

    #[test]
    fn clamps_and_errors() {
        let g = path_graph(2);
        let (ge, gd, _) = split_graph(&g, 0.9, 0).unwrap();
        assert_eq!((ge.num_vertices(), gd.num_vertices()), (1, 1));
        assert!(matches!(split_graph(&g, 0.0, 0), Err(Error::InvalidParameter(_))));
        assert!(matches!(split_graph(&g, 1.0, 0), Err(Error::InvalidParameter(_))));
        assert!(split_graph(&path_graph(1), 0.5, 0).is_err());
    }

    #[test]
    fn restriction_cases() {
        let edges = vec![(0, 1), (1, 2)];
        let deg = vec![1, 2, 1];
        let (sub, d, remap) = restrict_adjacency(&edges, &deg, &[0, 1, 2]);
        assert_eq!((sub, d), (edges.clone(), deg.clone()));
        assert_eq!(remap, vec![Some(0), Some(1), Some(2)]);
        let (sub, d, remap) = restrict_adjacency(&edges, &deg, &[0, 2]);
        assert!(sub.is_empty());
        assert_eq!(d, vec![0, 0]);
        assert_eq!(remap, vec![Some(0), None, Some(1)]);
    }

    #[test]
    fn split_serializes_as_bitsets() {
        let s = MaskSplit::sample(70, 3, 0.5, 9).unwrap();
        let json = serde_json::to_string(&s).unwrap();
        assert!(json.contains("words"));
        let back: MaskSplit = serde_json::from_str(&json).unwrap();
        assert_eq!(back, s);
    }
}
