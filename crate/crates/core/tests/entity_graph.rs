use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use hmgdm::entity_graph::{build_adjacency, build_entity_graph, extract_vertex_tiles, segment_superpixels, EntityGraph, GraphParams, ImagePatch, LabelMap};
use hmgdm::synthetic::texture_patch;

fn noise_image(h: usize, w: usize, levels: u8, seed: u64) -> ImagePatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let step = 255 / levels.max(1);
    let pixels = (0..h * w * 3).map(|_| rng.random_range(0..=levels) * step).collect();
    ImagePatch::new(h, w, pixels).unwrap()
}

fn brute_adjacency(labels: &LabelMap) -> Vec<(u32, u32)> {
    let mut pairs = std::collections::BTreeSet::new();
    for y in 0..labels.height {
        for x in 0..labels.width {
            let a = labels.label(y, x);
            for (dy, dx) in [(0, 1), (1, 0)] {
                let (ny, nx) = (y + dy, x + dx);
                if ny < labels.height && nx < labels.width {
                    let b = labels.label(ny, nx);
                    if a != b {
                        pairs.insert((a.min(b), a.max(b)));
                    }
                }
            }
        }
    }
    pairs.into_iter().collect()
}

fn check_graph_invariants(g: &EntityGraph) {
    let n = g.num_vertices();
    assert!(n >= 1);
    assert!(g.edge_index.windows(2).all(|w| w[0] < w[1]), "edges sorted and unique");
    assert!(g.edge_index.iter().all(|&(i, j)| i < j && (j as usize) < n));
    let mut deg = vec![0u32; n];
    for &(i, j) in &g.edge_index {
        deg[i as usize] += 1;
        deg[j as usize] += 1;
    }
    assert_eq!(deg, g.degrees);
    assert_eq!(g.degrees.iter().sum::<u32>() as usize, 2 * g.num_edges());
}

#[test]
fn large_patch_yields_about_five_hundred_regions() {
    let image = texture_patch(0, 512, 3).unwrap();
    let labels = segment_superpixels(&image, 500, 10.0, 10).unwrap();
    assert!((400..=600).contains(&labels.n_regions), "{} regions", labels.n_regions);
    assert!(labels.regions_connected());
}

#[test]
fn region_graphs_respect_the_planar_edge_bound() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for k in 0..100 {
        let side = rng.random_range(32..=96);
        let image = if k % 2 == 0 {
            texture_patch(k % 4 / 2, side, rng.random()).unwrap()
        } else {
            noise_image(side, side, rng.random_range(1..8), rng.random())
        };
        let params = GraphParams {
            n_regions: rng.random_range(2..120),
            tile: 8,
            ..GraphParams::default()
        };
        let g = build_entity_graph(&image, &params).unwrap();
        check_graph_invariants(&g);
        let (nv, ne) = (g.num_vertices(), g.num_edges());
        if nv >= 3 {
            assert!(ne <= 3 * nv - 6, "image {k}: {ne} edges on {nv} vertices");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn superpixels_partition_the_image(h in 4usize..40, w in 4usize..40, regions in 1usize..30, levels in 1u8..6, seed: u64) {
        let image = noise_image(h, w, levels, seed);
        let regions = regions.min(h * w);
        let labels = segment_superpixels(&image, regions, 10.0, 5).unwrap();
        prop_assert_eq!(labels.labels.len(), h * w);
        let mut seen = vec![false; labels.n_regions];
        labels.labels.iter().for_each(|&l| seen[l as usize] = true);
        prop_assert!(seen.iter().all(|&s| s));
        prop_assert!(labels.regions_connected());
        prop_assert_eq!(&labels, &segment_superpixels(&image, regions, 10.0, 5).unwrap());

        let (edges, degrees) = build_adjacency(&labels);
        prop_assert_eq!(&edges, &brute_adjacency(&labels));
        prop_assert_eq!(degrees.iter().sum::<u32>() as usize, 2 * edges.len());
    }

    #[test]
    fn vertex_tiles_mask_everything_outside_the_region(h in 6usize..30, w in 6usize..30, regions in 1usize..12, a in 1usize..6, seed: u64) {
        let image = noise_image(h, w, 4, seed);
        let labels = segment_superpixels(&image, regions, 10.0, 5).unwrap();
        let (tiles, _) = extract_vertex_tiles(&image, &labels, a).unwrap();
        for s in 0..labels.n_regions {
            let members: Vec<(usize, usize)> = (0..h).flat_map(|y| (0..w).map(move |x| (y, x))).filter(|&(y, x)| labels.label(y, x) as usize == s).collect();
            let n = members.len();
            let cy = (2 * members.iter().map(|p| p.0).sum::<usize>() + n) / (2 * n);
            let cx = (2 * members.iter().map(|p| p.1).sum::<usize>() + n) / (2 * n);
            let top = cy.saturating_sub(a / 2).min(h - a);
            let left = cx.saturating_sub(a / 2).min(w - a);
            let tile = &tiles[s * a * a * 3..(s + 1) * a * a * 3];
            for dy in 0..a {
                for dx in 0..a {
                    let (y, x) = (top + dy, left + dx);
                    let want = if labels.label(y, x) as usize == s { image.pixel(y, x) } else { [255, 255, 255] };
                    let at = (dy * a + dx) * 3;
                    prop_assert_eq!(&tile[at..at + 3], &want[..]);
                }
            }
        }
    }

    #[test]
    fn graphs_are_deterministic_and_round_trip(side in 16usize..48, regions in 1usize..40, seed: u64) {
        let image = noise_image(side, side, 3, seed);
        let params = GraphParams { n_regions: regions, tile: 8, ..GraphParams::default() };
        let g = build_entity_graph(&image, &params).unwrap();
        check_graph_invariants(&g);
        let bytes = g.to_bundle_bytes();
        prop_assert_eq!(&bytes, &build_entity_graph(&image, &params).unwrap().to_bundle_bytes());
        prop_assert_eq!(EntityGraph::from_bundle_bytes(&bytes).unwrap(), g);
    }
}
