//! Random vertex and edge masking of a latent graph into visible and
//! masked subgraphs.
//!
//! `cargo run --release --example masking -- [ratio]`

use hmgdm::entity_graph::{build_entity_graph, GraphParams};
use hmgdm::latent_codec::{Codec, CodecConfig};
use hmgdm::mask_split::split_graph;
use hmgdm::synthetic::texture_patch;

fn main() -> hmgdm::Result<()> {
    let ratio: f64 = std::env::args().nth(1).map_or(0.6, |r| r.parse().expect("mask ratio"));
    let params = GraphParams { n_regions: 24, tile: 16, ..GraphParams::default() };
    let graph = build_entity_graph(&texture_patch(0, 128, 2)?, &params)?;
    let codec = Codec::new(CodecConfig { tile: 16, factor: 4, hidden: 8, ..CodecConfig::default() }, 0)?;
    let latent = codec.encode_graph(&graph)?;
    println!("graph: {} vertices, {} edges, latent width {}", latent.num_vertices(), latent.num_edges(), latent.latent_dim());

    for seed in 0..3 {
        let (visible, masked, split) = split_graph(&latent, ratio, seed)?;
        println!(
            "seed {seed}: masked {} vertices / {} edges; visible side keeps {} internal links, masked side {}",
            split.masked_vertices(),
            split.masked_edges(),
            visible.adjacency.len(),
            masked.adjacency.len()
        );
        println!("  masked vertices {:?}", masked.vertex_ids);
    }
    Ok(())
}
