use crate::error::{Error, Result};
use crate::nn::{gelu_scalar, Csr, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Gelu,
}

/// `D^{-1/2} A D^{-1/2}` over an undirected edge list, optionally on
/// `A + I`. Zero-degree rows stay zero.
pub fn normalize_adjacency(edge_index: &[(u32, u32)], n: usize, self_loops: bool) -> Csr {
    let mut deg = vec![if self_loops { 1.0 } else { 0.0 }; n];
    for &(i, j) in edge_index {
        deg[i as usize] += 1.0;
        deg[j as usize] += 1.0;
    }
    let inv: Vec<f64> = deg.iter().map(|&d: &f64| if d > 0.0 { 1.0 / d.sqrt() } else { 0.0 }).collect();
    let mut trip = Vec::with_capacity(2 * edge_index.len() + n);
    for &(i, j) in edge_index {
        let (i, j) = (i as usize, j as usize);
        let w = inv[i] * inv[j];
        trip.push((i, j, w));
        trip.push((j, i, w));
    }
    if self_loops {
        for i in 0..n {
            trip.push((i, i, inv[i] * inv[i]));
        }
    }
    Csr::from_triplets(n, n, trip)
}

/// Line-graph links: pairs of edges sharing an endpoint, as sorted `(a, b)`
/// with `a < b` indexing into `edge_index`.
pub fn line_graph(edge_index: &[(u32, u32)]) -> Vec<(u32, u32)> {
    let n = edge_index.iter().map(|&(i, j)| i.max(j) as usize + 1).max().unwrap_or(0);
    let mut incident: Vec<Vec<u32>> = vec![Vec::new(); n];
    for (e, &(i, j)) in edge_index.iter().enumerate() {
        incident[i as usize].push(e as u32);
        if j != i {
            incident[j as usize].push(e as u32);
        }
    }
    let mut out = Vec::new();
    for inc in &incident {
        for (a, &x) in inc.iter().enumerate() {
            for &y in &inc[a + 1..] {
                out.push((x.min(y), x.max(y)));
            }
        }
    }
    out.sort_unstable();
    out.dedup();
    out
}

/// Normalized adjacency of the line graph over the given edges.
pub fn dual_adjacency(edge_index: &[(u32, u32)], self_loops: bool) -> Csr {
    normalize_adjacency(&line_graph(edge_index), edge_index.len(), self_loops)
}

/// `σ(Ã·X·W)` on plain tensors.
pub fn gcn_layer(x: &Tensor, adj: &Csr, w: &Tensor, activation: Activation) -> Result<Tensor> {
    if x.shape.len() != 2 || w.shape.len() != 2 || adj.n_cols != x.shape[0] || x.shape[1] != w.shape[0] {
        return Err(Error::Shape(format!(
            "gcn layer: adjacency {}x{}, features {:?}, weights {:?}",
            adj.n_rows, adj.n_cols, x.shape, w.shape
        )));
    }
    let mut out = adj.apply(x).matmul(w)?;
    if activation == Activation::Gelu {
        out.data.iter_mut().for_each(|v| *v = gelu_scalar(*v));
    }
    Ok(out)
}

/// Sinusoidal step embedding: `sin(t/10000^{2k/dim})` in the first half,
/// the matching cosines in the second.
pub fn time_embedding(t: usize, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(Error::InvalidParameter(format!("time embedding width {dim} must be even and positive")));
    }
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for k in 0..half {
        let arg = t as f64 / 10000f64.powf(2.0 * k as f64 / dim as f64);
        out[k] = arg.sin();
        out[half + k] = arg.cos();
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense_oracle(edges: &[(u32, u32)], n: usize, self_loops: bool) -> Vec<Vec<f64>> {
        let mut a = vec![vec![0.0; n]; n];
        for &(i, j) in edges {
            a[i as usize][j as usize] = 1.0;
            a[j as usize][i as usize] = 1.0;
        }
        if self_loops {
            (0..n).for_each(|i| a[i][i] = 1.0);
        }
        let d: Vec<f64> = a.iter().map(|r| r.iter().sum()).collect();
        let mut out = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..n {
                if d[i] > 0.0 && d[j] > 0.0 {
                    out[i][j] = a[i][j] / (d[i] * d[j]).sqrt();
                }
            }
        }
        out
    }

    #[test]
    fn path_normalization() {
        let a = normalize_adjacency(&[(0, 1), (1, 2)], 3, true);
        assert!((a.get(0, 0) - 0.5).abs() < 1e-15);
        assert!((a.get(0, 1) - 1.0 / 6f64.sqrt()).abs() < 1e-15);
        assert!((a.get(1, 1) - 1.0 / 3.0).abs() < 1e-15);
        let oracle = dense_oracle(&[(0, 1), (1, 2)], 3, true);
        for i in 0..3 {
            for j in 0..3 {
                assert!((a.get(i, j) - oracle[i][j]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn single_vertex_and_isolated() {
        assert_eq!(normalize_adjacency(&[], 1, true).get(0, 0), 1.0);
        let a = normalize_adjacency(&[(0, 1)], 3, false);
        assert_eq!((0..3).map(|j| a.get(2, j)).sum::<f64>(), 0.0);
    }

    #[test]
    fn regular_graph_rows_sum_to_one() {
        // 6-cycle, degree 2
        let edges: Vec<(u32, u32)> = (0..6).map(|i| (i.min((i + 1) % 6), i.max((i + 1) % 6))).collect();
        let a = normalize_adjacency(&edges, 6, true);
        for i in 0..6 {
            let s: f64 = (0..6).map(|j| a.get(i, j)).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn line_graph_cases() {
        assert_eq!(line_graph(&[(0, 1), (1, 2)]), vec![(0, 1)]);
        assert_eq!(line_graph(&[(0, 1), (0, 2), (1, 2)]), vec![(0, 1), (0, 2), (1, 2)]);
        assert!(line_graph(&[(3, 7)]).is_empty());
        let d = dual_adjacency(&[(3, 7)], true);
        assert_eq!((d.n_rows, d.get(0, 0)), (1, 1.0));
    }

    #[test]
    fn gcn_layer_identity_and_one_hot() {
        let x = Tensor::identity(3);
        let id = Csr::identity(3);
        assert_eq!(gcn_layer(&x, &id, &Tensor::identity(3), Activation::Identity).unwrap(), x);
        let a = normalize_adjacency(&[(0, 1), (1, 2)], 3, true);
        let out = gcn_layer(&x, &a, &Tensor::identity(3), Activation::Identity).unwrap();
        assert_eq!(out, a.to_dense());
        assert!(matches!(
            gcn_layer(&x, &a, &Tensor::identity(2), Activation::Gelu),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn time_embedding_cases() {
        let e = time_embedding(0, 8).unwrap();
        assert_eq!(&e[..4], &[0.0; 4]);
        assert_eq!(&e[4..], &[1.0; 4]);
        for t in [1, 17, 999] {
            let n: f64 = time_embedding(t, 8).unwrap().iter().map(|v| v * v).sum();
            assert!((n - 4.0).abs() < 1e-12, "sin²+cos² pairs sum to dim/2");
        }
        assert!(time_embedding(3, 7).is_err());
        let all: Vec<Vec<f64>> = (0..=1000).map(|t| time_embedding(t, 4).unwrap()).collect();
        for i in 0..all.len() {
            for j in i + 1..all.len() {
                let d: f64 = all[i].iter().zip(&all[j]).map(|(a, b)| (a - b).powi(2)).sum();
                assert!(d > 0.0, "t={i} and t={j} collide");
            }
        }
    }
}
