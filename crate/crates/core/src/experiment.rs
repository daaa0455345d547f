//! Desk-scale end-to-end run on procedural textures: graphs, codec,
//! masked diffusion pre-training, and a frozen linear probe compared with a
//! randomly initialized encoder.

use std::time::Instant;

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig};
use crate::downstream::{encode_full, finetune_on_features, FinetuneConfig, Head, Targets, Task};
use crate::entity_graph::{build_entity_graph, EntityGraph, GraphParams};
use crate::error::Result;
use crate::latent_codec::{Codec, CodecConfig, LatentGraph};
use crate::metrics::accuracy;
use crate::nn::Tensor;
use crate::pretrain::{rmse_vs_t, train_stage1, train_stage2, RmsePoint, Stage1Epoch, Stage2Epoch, TrainConfig};
use crate::synthetic::texture_corpus;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeskConfig {
    pub patches: usize,
    pub patch_size: usize,
    /// Fraction of patches used to fit the probe; the rest are held out.
    pub train_fraction: f64,
    /// Tiles sampled per epoch for codec training (0 uses every tile).
    pub codec_tiles: usize,
    pub graph: GraphParams,
    pub codec: CodecConfig,
    pub backbone: BackboneConfig,
    pub training: TrainConfig,
    pub probe: FinetuneConfig,
    pub seed: u64,
}

impl Default for DeskConfig {
    fn default() -> Self {
        Self {
            patches: 2000,
            patch_size: 128,
            train_fraction: 0.8,
            codec_tiles: 8192,
            graph: GraphParams {
                n_regions: 24,
                tile: 16,
                ..GraphParams::default()
            },
            codec: CodecConfig {
                tile: 16,
                factor: 4,
                latent_channels: 4,
                hidden: 16,
                ..CodecConfig::default()
            },
            backbone: BackboneConfig {
                width: 64,
                layers: 2,
                heads: 4,
                ..BackboneConfig::default()
            },
            training: TrainConfig {
                batch_size: 16,
                lr: 1e-3,
                epochs: 6,
                codec_epochs: 6,
                codec_lr: 2e-3,
                ..TrainConfig::default()
            },
            probe: FinetuneConfig {
                epochs: 150,
                lr: 1e-2,
                batch_size: 0,
                ..FinetuneConfig::default()
            },
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct DeskReport {
    pub pretrained_accuracy: f64,
    pub random_accuracy: f64,
    pub codec_trace: Vec<Stage1Epoch>,
    pub pretrain_trace: Vec<Stage2Epoch>,
    pub rmse_trained: Vec<RmsePoint>,
    pub rmse_untrained: Vec<RmsePoint>,
}

/// Builds entity graphs for the synthetic corpus in parallel.
pub fn desk_graphs(config: &DeskConfig) -> Result<(Vec<EntityGraph>, Vec<usize>)> {
    let corpus = texture_corpus(config.patches, config.patch_size, config.seed)?;
    let graphs = corpus
        .images
        .par_iter()
        .map(|img| build_entity_graph(img, &config.graph))
        .collect::<Result<Vec<_>>>()?;
    Ok((graphs, corpus.labels))
}

fn sample_tiles(graphs: &[EntityGraph], limit: usize, seed: u64) -> Vec<&[u8]> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut all: Vec<&[u8]> = graphs
        .iter()
        .flat_map(|g| (0..g.num_vertices()).map(|i| g.vertex_tile(i)).chain((0..g.num_edges()).map(|i| g.edge_tile(i))))
        .collect();
    if limit > 0 && all.len() > limit {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        all.shuffle(&mut rng);
        all.truncate(limit);
    }
    all
}

fn probe_accuracy(backbone: &Backbone, latents: &[LatentGraph], labels: &[usize], n_train: usize, probe: FinetuneConfig) -> Result<(f64, Head)> {
    let features = latents.par_iter().map(|g| encode_full(backbone, g)).collect::<Result<Vec<Tensor>>>()?;
    let (train, test) = features.split_at(n_train);
    let (head, _) = finetune_on_features(train, Targets::Labels(&labels[..n_train]), Task::Classify { classes: 2 }, probe)?;
    let logits = head.predict(test)?;
    let preds: Vec<usize> = (0..logits.rows())
        .map(|r| {
            let row = logits.row(r);
            usize::from(row[1] > row[0])
        })
        .collect();
    Ok((accuracy(&preds, &labels[n_train..])?, head))
}

/// Runs the whole desk experiment.
pub fn run_desk(config: &DeskConfig) -> Result<DeskReport> {
    let clock = Instant::now();
    let (graphs, labels) = desk_graphs(config)?;
    info!("built {} graphs in {:.1}s", graphs.len(), clock.elapsed().as_secs_f64());

    let tiles = sample_tiles(&graphs, config.codec_tiles, config.seed);
    let codec = Codec::new(config.codec, config.seed)?;
    let (codec, codec_trace) = train_stage1(&tiles, codec, &config.training)?;
    info!("codec trained in {:.1}s", clock.elapsed().as_secs_f64());

    let latents = graphs.par_iter().map(|g| codec.encode_graph(g)).collect::<Result<Vec<_>>>()?;
    let n_train = ((config.patches as f64) * config.train_fraction).round() as usize;

    let untrained = Backbone::new(config.backbone, config.seed)?;
    let (trained, pretrain_trace) = train_stage2(&latents[..n_train], untrained.clone(), &config.training)?;
    info!("pre-trained in {:.1}s", clock.elapsed().as_secs_f64());

    let schedule = config.training.schedule.build()?;
    let t_max = schedule.steps();
    let grid: Vec<usize> = [1, t_max / 10, t_max / 4, t_max / 2, 3 * t_max / 4, t_max].into_iter().filter(|&t| t >= 1).collect();
    let held_out = &latents[n_train..];
    let eval = &held_out[..held_out.len().min(200)];
    let rmse_trained = rmse_vs_t(&trained, eval, &grid, config.training.mask_ratio, config.seed, &schedule)?;
    let rmse_untrained = rmse_vs_t(&untrained, eval, &grid, config.training.mask_ratio, config.seed, &schedule)?;

    let (pretrained_accuracy, _) = probe_accuracy(&trained, &latents, &labels, n_train, config.probe)?;
    let (random_accuracy, _) = probe_accuracy(&untrained, &latents, &labels, n_train, config.probe)?;
    info!("desk run finished in {:.1}s", clock.elapsed().as_secs_f64());
    Ok(DeskReport {
        pretrained_accuracy,
        random_accuracy,
        codec_trace,
        pretrain_trace,
        rmse_trained,
        rmse_untrained,
    })
}
