//! Stage-1 training of the convolutional VAE on entity tiles, then encoding
//! a whole graph into latents.
//!
//! `cargo run --release --example latent_codec -- [epochs]`

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use hmgdm::entity_graph::{build_entity_graph, GraphParams};
use hmgdm::latent_codec::{normalize_tile, Codec, CodecConfig};
use hmgdm::metrics::rmse;
use hmgdm::pretrain::{train_stage1, TrainConfig};
use hmgdm::synthetic::texture_corpus;

fn main() -> hmgdm::Result<()> {
    let epochs: usize = std::env::args().nth(1).map_or(8, |e| e.parse().expect("epoch count"));
    let params = GraphParams { n_regions: 24, tile: 16, ..GraphParams::default() };
    let corpus = texture_corpus(24, 128, 4)?;
    let graphs = corpus.images.iter().map(|im| build_entity_graph(im, &params)).collect::<hmgdm::Result<Vec<_>>>()?;
    let tiles: Vec<&[u8]> = graphs
        .iter()
        .flat_map(|g| (0..g.num_vertices()).map(|i| g.vertex_tile(i)).chain((0..g.num_edges()).map(|i| g.edge_tile(i))))
        .collect();
    println!("{} tiles from {} graphs", tiles.len(), graphs.len());

    let config = CodecConfig { tile: 16, factor: 4, latent_channels: 4, hidden: 16, ..CodecConfig::default() };
    let training = TrainConfig { codec_epochs: epochs, codec_lr: 2e-3, ..TrainConfig::default() };
    let (codec, trace) = train_stage1(&tiles, Codec::new(config, 0)?, &training)?;
    for e in &trace {
        println!("epoch {:>2}  loss {:.5}  rec {:.5}  kl {:.2}", e.epoch, e.loss, e.rec, e.kl);
    }

    let tile = normalize_tile(graphs[0].vertex_tile(0));
    let z = codec.encode_entity(&tile, false, &mut ChaCha8Rng::seed_from_u64(0))?;
    let back = codec.decode_latent(&z)?;
    println!("first tile reconstruction RMSE {:.4}", rmse(&back, &tile)?);

    let latent = codec.encode_graph(&graphs[0])?;
    println!(
        "graph 0 -> {} vertex and {} edge latents of width {} ({}x{}x{})",
        latent.num_vertices(),
        latent.num_edges(),
        latent.latent_dim(),
        latent.side,
        latent.side,
        latent.channels
    );
    Ok(())
}
