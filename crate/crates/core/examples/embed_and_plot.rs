//! Graph embeddings for a set of patches, a t-SNE map of them, and a
//! per-entity attention heatmap over one patch.
//!
//! `cargo run --release --example embed_and_plot -- [out dir]`

use std::collections::HashMap;
use std::path::PathBuf;

use hmgdm::backbone::{Backbone, BackboneConfig};
use hmgdm::downstream::{embed_inference, finetune_head, write_embeddings, FinetuneConfig, ReadoutMode, Targets, Task};
use hmgdm::entity_graph::{build_entity_graph, GraphParams};
use hmgdm::latent_codec::{Codec, CodecConfig, LatentGraph};
use hmgdm::plot::{plot_heatmap, plot_tsne, TsneConfig};
use hmgdm::synthetic::{patch_name, texture_corpus};

fn main() -> hmgdm::Result<()> {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "plots".into()));
    std::fs::create_dir_all(&dir)?;
    let params = GraphParams { n_regions: 24, tile: 16, ..GraphParams::default() };
    let corpus = texture_corpus(60, 128, 8)?;
    let codec = Codec::new(CodecConfig { tile: 16, factor: 4, hidden: 16, ..CodecConfig::default() }, 0)?;
    let backbone = Backbone::new(BackboneConfig { width: 64, layers: 2, ..BackboneConfig::default() }, 0)?;

    let embeddings = corpus
        .images
        .iter()
        .enumerate()
        .map(|(i, im)| embed_inference(patch_name(i), im, &params, &codec, &backbone, ReadoutMode::Mean))
        .collect::<hmgdm::Result<Vec<_>>>()?;
    write_embeddings(dir.join("embeddings.csv"), &embeddings)?;
    let labels: HashMap<String, usize> = (0..corpus.labels.len()).map(|i| (patch_name(i), corpus.labels[i])).collect();
    let cfg = TsneConfig { perplexity: 10.0, iterations: 500, ..TsneConfig::default() };
    plot_tsne(&embeddings, Some(&labels), &cfg, &dir.join("tsne.svg"))?;

    // an attention readout gives one weight per entity
    let latents: Vec<LatentGraph> = corpus
        .images
        .iter()
        .map(|im| codec.encode_graph(&build_entity_graph(im, &params)?))
        .collect::<hmgdm::Result<_>>()?;
    let config = FinetuneConfig { readout: ReadoutMode::Attention, epochs: 100, lr: 1e-2, batch_size: 0, ..FinetuneConfig::default() };
    let mut frozen = backbone.clone();
    let (head, _) = finetune_head(&latents, Targets::Labels(&corpus.labels), Task::Classify { classes: 2 }, config, &mut frozen)?;
    let weights = plot_heatmap(&corpus.images[0], &params, &codec, &frozen, &head, &dir.join("heatmap.png"))?;
    let top = weights.iter().cloned().fold(0.0, f64::max);
    println!("{} embeddings; heatmap over {} entities (max weight {top:.3})", embeddings.len(), weights.len());
    println!("wrote {}", ["embeddings.csv", "tsne.svg", "heatmap.png"].map(|f| dir.join(f).display().to_string()).join(", "));
    Ok(())
}
