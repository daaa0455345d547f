//! Frozen-encoder classification: pre-train briefly, fit a linear head on
//! pooled encoder features, and score held-out patches.
//!
//! `cargo run --release --example classification -- [patches]`

use hmgdm::backbone::{Backbone, BackboneConfig};
use hmgdm::downstream::{finetune_head, FinetuneConfig, ReadoutMode, Targets, Task};
use hmgdm::entity_graph::{build_entity_graph, GraphParams};
use hmgdm::latent_codec::{Codec, CodecConfig, LatentGraph};
use hmgdm::metrics::{accuracy, macro_f1};
use hmgdm::pretrain::{train_stage1, train_stage2, TrainConfig};
use hmgdm::synthetic::texture_corpus;

fn main() -> hmgdm::Result<()> {
    let patches: usize = std::env::args().nth(1).map_or(160, |n| n.parse().expect("patch count"));
    let params = GraphParams { n_regions: 24, tile: 16, ..GraphParams::default() };
    let corpus = texture_corpus(patches, 128, 9)?;
    let graphs = corpus.images.iter().map(|im| build_entity_graph(im, &params)).collect::<hmgdm::Result<Vec<_>>>()?;
    let tiles: Vec<&[u8]> = graphs.iter().flat_map(|g| (0..g.num_vertices()).map(|i| g.vertex_tile(i))).take(4096).collect();

    let training = TrainConfig { codec_epochs: 3, codec_lr: 2e-3, epochs: 3, batch_size: 16, lr: 1e-3, ..TrainConfig::default() };
    let codec_config = CodecConfig { tile: 16, factor: 4, hidden: 16, ..CodecConfig::default() };
    let (codec, _) = train_stage1(&tiles, Codec::new(codec_config, 0)?, &training)?;
    let latents: Vec<LatentGraph> = graphs.iter().map(|g| codec.encode_graph(g)).collect::<hmgdm::Result<_>>()?;
    let backbone = Backbone::new(BackboneConfig { width: codec_config.latent_dim(), layers: 2, ..BackboneConfig::default() }, 0)?;
    let (mut backbone, _) = train_stage2(&latents, backbone, &training)?;

    let n_train = patches * 4 / 5;
    let probe = FinetuneConfig { readout: ReadoutMode::Mean, epochs: 150, lr: 1e-2, batch_size: 0, ..FinetuneConfig::default() };
    let (head, trace) = finetune_head(
        &latents[..n_train],
        Targets::Labels(&corpus.labels[..n_train]),
        Task::Classify { classes: 2 },
        probe,
        &mut backbone,
    )?;
    let last = trace.last().expect("at least one epoch");
    println!("head: final loss {:.4}, train accuracy {:.3}", last.loss, last.metric);

    let logits = head.predict_graphs(&backbone, &latents[n_train..])?;
    let preds: Vec<usize> = (0..logits.rows()).map(|r| usize::from(logits.row(r)[1] > logits.row(r)[0])).collect();
    let truth = &corpus.labels[n_train..];
    println!("held-out accuracy {:.3}, macro F1 {:.3}", accuracy(&preds, truth)?, macro_f1(&preds, truth, 2)?);
    Ok(())
}
