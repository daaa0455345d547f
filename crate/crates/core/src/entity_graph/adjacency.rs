use std::collections::BTreeSet;

use super::LabelMap;

/// Region adjacency under 4-connectivity: `(i, j)` with `i < j`, sorted and
/// unique, plus per-region degrees.
pub fn build_adjacency(labels: &LabelMap) -> (Vec<(u32, u32)>, Vec<u32>) {
    let (h, w) = (labels.height, labels.width);
    let mut set = BTreeSet::new();
    for y in 0..h {
        for x in 0..w {
            let a = labels.label(y, x);
            if x + 1 < w {
                let b = labels.label(y, x + 1);
                if a != b {
                    set.insert((a.min(b), a.max(b)));
                }
            }
            if y + 1 < h {
                let b = labels.label(y + 1, x);
                if a != b {
                    set.insert((a.min(b), a.max(b)));
                }
            }
        }
    }
    let edges: Vec<_> = set.into_iter().collect();
    let degrees = degrees_from_edges(&edges, labels.n_regions);
    (edges, degrees)
}

pub fn degrees_from_edges(edges: &[(u32, u32)], n: usize) -> Vec<u32> {
    let mut d = vec![0u32; n];
    for &(i, j) in edges {
        d[i as usize] += 1;
        d[j as usize] += 1;
    }
    d
}
