//! Superpixels, region adjacency and entity tiles for one synthetic patch.
//!
//! `cargo run --release --example entity_graph -- [out.hmgg]`

use hmgdm::entity_graph::{build_adjacency, build_entity_graph, segment_superpixels, EntityGraph, GraphParams};
use hmgdm::synthetic::texture_patch;

fn main() -> hmgdm::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "patch.hmgg".into());
    let image = texture_patch(1, 256, 0)?;
    let params = GraphParams {
        n_regions: 64,
        tile: 32,
        ..GraphParams::default()
    };

    let labels = segment_superpixels(&image, params.n_regions, params.compactness, params.iterations)?;
    let (edges, degrees) = build_adjacency(&labels);
    println!("{} superpixels, {} adjacent pairs", labels.n_regions, edges.len());
    let max_deg = degrees.iter().copied().max().unwrap_or(0);
    for d in 0..=max_deg {
        let n = degrees.iter().filter(|&&x| x == d).count();
        if n > 0 {
            println!("  degree {d:>2}: {n}");
        }
    }

    let graph = build_entity_graph(&image, &params)?;
    println!(
        "entity graph: {} vertex tiles, {} edge tiles of {a}x{a}x3",
        graph.num_vertices(),
        graph.num_edges(),
        a = graph.tile
    );
    graph.save_bundle(&out)?;
    assert_eq!(EntityGraph::load_bundle(&out)?, graph);
    println!("wrote {out} ({} bytes)", graph.to_bundle_bytes().len());
    Ok(())
}
