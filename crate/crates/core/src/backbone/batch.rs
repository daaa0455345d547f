use std::ops::Range;
use std::rc::Rc;

use super::graph_ops::{dual_adjacency, normalize_adjacency};
use crate::error::{Error, Result};
use crate::mask_split::SubGraph;
use crate::nn::{Csr, Tensor};

/// Disjoint union of subgraphs: stacked latents, per-graph row ranges, and
/// block-diagonal normalized operators for vertices and the line graph.
#[derive(Debug, Clone)]
pub struct BatchSide {
    pub vertices: Tensor,
    pub edges: Tensor,
    pub vertex_segs: Rc<Vec<Range<usize>>>,
    pub edge_segs: Rc<Vec<Range<usize>>>,
    pub adjacency: Rc<Csr>,
    pub dual: Rc<Csr>,
}

fn stack(parts: &[&Tensor], d: usize) -> Tensor {
    let rows: usize = parts.iter().map(|t| t.rows()).sum();
    let mut data = Vec::with_capacity(rows * d);
    parts.iter().for_each(|t| data.extend_from_slice(&t.data));
    Tensor {
        shape: vec![rows, d],
        data,
    }
}

fn segments(lens: impl Iterator<Item = usize>) -> Vec<Range<usize>> {
    let mut start = 0;
    lens.map(|n| {
        let r = start..start + n;
        start += n;
        r
    })
    .collect()
}

impl BatchSide {
    pub fn new(graphs: &[&SubGraph], self_loops: bool) -> Result<Self> {
        let Some(first) = graphs.first() else {
            return Err(Error::InvalidInput("empty batch".into()));
        };
        let d = first.vertices.cols();
        if graphs.iter().any(|g| g.vertices.cols() != d || g.edges.cols() != d) {
            return Err(Error::Shape("subgraph latent widths differ within a batch".into()));
        }
        let adj: Vec<Csr> = graphs
            .iter()
            .map(|g| normalize_adjacency(&g.adjacency, g.num_vertices(), self_loops))
            .collect();
        let dual: Vec<Csr> = graphs.iter().map(|g| dual_adjacency(&g.edge_endpoints, self_loops)).collect();
        Ok(Self {
            vertices: stack(&graphs.iter().map(|g| &g.vertices).collect::<Vec<_>>(), d),
            edges: stack(&graphs.iter().map(|g| &g.edges).collect::<Vec<_>>(), d),
            vertex_segs: Rc::new(segments(graphs.iter().map(|g| g.num_vertices()))),
            edge_segs: Rc::new(segments(graphs.iter().map(|g| g.num_edges()))),
            adjacency: Rc::new(Csr::block_diag(&adj.iter().collect::<Vec<_>>())),
            dual: Rc::new(Csr::block_diag(&dual.iter().collect::<Vec<_>>())),
        })
    }

    pub fn num_graphs(&self) -> usize {
        self.vertex_segs.len()
    }

    pub fn width(&self) -> usize {
        self.vertices.cols()
    }

    /// Rows of each graph in the requested stream.
    pub fn segs(&self, stream: super::Stream) -> &Rc<Vec<Range<usize>>> {
        match stream {
            super::Stream::Vertex => &self.vertex_segs,
            super::Stream::Edge => &self.edge_segs,
        }
    }
}
