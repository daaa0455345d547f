//! Stage-2 masked latent diffusion pre-training and the denoising RMSE of
//! the trained decoder against an untrained one at several steps.
//!
//! `cargo run --release --example pretrain -- [patches] [epochs]`

use hmgdm::backbone::{Backbone, BackboneConfig, Strategy};
use hmgdm::entity_graph::{build_entity_graph, GraphParams};
use hmgdm::latent_codec::{Codec, CodecConfig, LatentGraph};
use hmgdm::pretrain::{rmse_vs_t, train_stage1, train_stage2, TrainConfig};
use hmgdm::synthetic::texture_corpus;

fn main() -> hmgdm::Result<()> {
    let mut args = std::env::args().skip(1);
    let patches: usize = args.next().map_or(96, |n| n.parse().expect("patch count"));
    let epochs: usize = args.next().map_or(6, |n| n.parse().expect("epoch count"));

    let params = GraphParams { n_regions: 24, tile: 16, ..GraphParams::default() };
    let corpus = texture_corpus(patches, 128, 1)?;
    let graphs = corpus.images.iter().map(|im| build_entity_graph(im, &params)).collect::<hmgdm::Result<Vec<_>>>()?;
    let tiles: Vec<&[u8]> = graphs.iter().flat_map(|g| (0..g.num_vertices()).map(|i| g.vertex_tile(i))).take(4096).collect();

    let training = TrainConfig {
        codec_epochs: 4,
        codec_lr: 2e-3,
        epochs,
        batch_size: 16,
        lr: 1e-3,
        ..TrainConfig::default()
    };
    let codec_config = CodecConfig { tile: 16, factor: 4, latent_channels: 4, hidden: 16, ..CodecConfig::default() };
    let (codec, _) = train_stage1(&tiles, Codec::new(codec_config, 0)?, &training)?;
    let latents: Vec<LatentGraph> = graphs.iter().map(|g| codec.encode_graph(g)).collect::<hmgdm::Result<_>>()?;
    let (train, held_out) = latents.split_at(latents.len() * 3 / 4);

    let config = BackboneConfig {
        width: codec_config.latent_dim(),
        layers: 2,
        heads: 4,
        strategy: Strategy::NtoNEtoE,
        ..BackboneConfig::default()
    };
    let untrained = Backbone::new(config, 0)?;
    let (trained, trace) = train_stage2(train, untrained.clone(), &training)?;
    for e in &trace {
        println!("epoch {:>2}  loss {:.5}  lr {:.1e}  skipped {}", e.epoch, e.loss, e.lr, e.skipped);
    }

    let schedule = training.schedule.build()?;
    let grid = [1, 100, 250, 500, 750, 1000];
    let a = rmse_vs_t(&trained, held_out, &grid, training.mask_ratio, 3, &schedule)?;
    let b = rmse_vs_t(&untrained, held_out, &grid, training.mask_ratio, 3, &schedule)?;
    println!("{:>5} {:>9} {:>9}", "t", "trained", "untrained");
    for (x, y) in a.iter().zip(&b) {
        println!("{:>5} {:>9.4} {:>9.4}", x.t, x.rmse, y.rmse);
    }
    Ok(())
}
