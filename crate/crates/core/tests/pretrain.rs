use hmgdm::backbone::{Backbone, BackboneConfig, Strategy};
use hmgdm::diffusion::ScheduleConfig;
use hmgdm::downstream::{embed_latent, ReadoutMode};
use hmgdm::entity_graph::EntityGraph;
use hmgdm::experiment::{desk_graphs, DeskConfig};
use hmgdm::latent_codec::{Codec, LatentGraph};
use hmgdm::mask_split::masked_count;
use hmgdm::nn::Adam;
use hmgdm::pretrain::{pretrain_step, train_stage1, train_stage2, Stage2Trainer, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_desk(patches: usize) -> DeskConfig {
    DeskConfig {
        patches,
        ..DeskConfig::default()
    }
}

fn tiles(graphs: &[EntityGraph], limit: usize) -> Vec<&[u8]> {
    graphs
        .iter()
        .flat_map(|g| (0..g.num_vertices()).map(move |i| g.vertex_tile(i)))
        .take(limit)
        .collect()
}

#[test]
fn stage1_halves_reconstruction_loss_in_30_epochs() {
    let cfg = small_desk(40);
    let (graphs, _) = desk_graphs(&cfg).unwrap();
    let corpus = tiles(&graphs, 512);
    assert_eq!(corpus.len(), 512);
    let train = TrainConfig {
        codec_epochs: 30,
        ..TrainConfig::default()
    };
    let (_, trace) = train_stage1(&corpus, Codec::new(cfg.codec, 0).unwrap(), &train).unwrap();
    let first = trace[0].rec;
    let last = trace.last().unwrap().rec;
    assert!(last <= 0.5 * first, "epoch-1 rec {first}, final rec {last}");
}

fn latent_corpus(patches: usize) -> (Vec<LatentGraph>, DeskConfig) {
    let cfg = small_desk(patches);
    let (graphs, _) = desk_graphs(&cfg).unwrap();
    let codec = Codec::new(cfg.codec, 1).unwrap();
    (graphs.iter().map(|g| codec.encode_graph(g).unwrap()).collect(), cfg)
}

fn binomial(n: u64, k: u64) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

#[test]
fn consecutive_steps_redraw_the_mask() {
    let (latents, cfg) = latent_corpus(2);
    let g = latents.iter().min_by_key(|g| g.num_vertices()).unwrap().clone();
    let g = restrict_to(&g, 7);
    let n = g.num_vertices();
    let mut b = Backbone::new(
        BackboneConfig {
            width: cfg.codec.latent_dim(),
            layers: 1,
            heads: 1,
            strategy: Strategy::NtoN,
            ..BackboneConfig::default()
        },
        0,
    )
    .unwrap();
    let mut adam = Adam::new(1e-4, b.params());
    let schedule = ScheduleConfig::default().build().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let steps = 2000;
    let mut prev = None;
    let mut collisions = 0;
    for _ in 0..steps {
        let r = pretrain_step(&[&g], &mut b, &mut adam, &schedule, 0.5, &mut rng, None).unwrap();
        let mask = r.splits[0].vertex_mask.clone();
        if prev.as_ref() == Some(&mask) {
            collisions += 1;
        }
        prev = Some(mask);
    }
    let k = masked_count(n, 0.5, 1, n - 1) as u64;
    let p = 1.0 / binomial(n as u64, k);
    let expected = p * (steps - 1) as f64;
    let sd = (expected * (1.0 - p)).sqrt();
    assert!(
        (collisions as f64 - expected).abs() < 4.0 * sd,
        "{collisions} collisions, expected {expected:.1} ± {sd:.1}"
    );
}

/// Induced subgraph on the first `n` vertices.
fn restrict_to(g: &LatentGraph, n: usize) -> LatentGraph {
    let d = g.latent_dim();
    let keep: Vec<usize> = (0..g.num_edges())
        .filter(|&e| (g.edge_index[e].0 as usize) < n && (g.edge_index[e].1 as usize) < n)
        .collect();
    let edge_index: Vec<(u32, u32)> = keep.iter().map(|&e| g.edge_index[e]).collect();
    LatentGraph {
        side: g.side,
        channels: g.channels,
        vertex_latents: g.vertex_latents[..n * d].to_vec(),
        edge_latents: keep.iter().flat_map(|&e| g.edge_latents[e * d..(e + 1) * d].iter().copied()).collect(),
        degrees: hmgdm::entity_graph::degrees_from_edges(&edge_index, n),
        edge_index,
    }
}

fn stage2_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 8,
        lr: 1e-3,
        ..TrainConfig::default()
    }
}

fn stage2_backbone(d: usize) -> Backbone {
    Backbone::new(
        BackboneConfig {
            width: d,
            layers: 2,
            heads: 2,
            ..BackboneConfig::default()
        },
        5,
    )
    .unwrap()
}

#[test]
fn stage2_loss_trends_down_under_moving_average() {
    let (latents, cfg) = latent_corpus(64);
    let (_, trace) = train_stage2(&latents, stage2_backbone(cfg.codec.latent_dim()), &stage2_config(40)).unwrap();
    let losses: Vec<f64> = trace.iter().map(|e| e.loss).collect();
    let ma: Vec<f64> = losses.windows(10).map(|w| w.iter().sum::<f64>() / 10.0).collect();
    for (i, w) in ma.windows(2).enumerate() {
        assert!(w[1] <= w[0], "moving average rose at window {i}: {} -> {}", w[0], w[1]);
    }
}

#[test]
fn resumed_training_reproduces_the_uninterrupted_trace() {
    let (latents, cfg) = latent_corpus(12);
    let d = cfg.codec.latent_dim();
    let config = stage2_config(6);
    let (full, trace) = train_stage2(&latents, stage2_backbone(d), &config).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("stage2.json");
    let mut t = Stage2Trainer::new(stage2_backbone(d), config).unwrap();
    for _ in 0..3 {
        t.run_epoch(&latents, &[]).unwrap();
    }
    t.save(&path).unwrap();
    drop(t);
    let mut t = Stage2Trainer::load(&path).unwrap();
    for _ in 0..3 {
        t.run_epoch(&latents, &[]).unwrap();
    }
    assert_eq!(t.trace, trace);
    assert_eq!(t.into_backbone().unwrap().params(), full.params());
}

#[test]
fn pretrained_embeddings_separate_distinct_textures() {
    let cfg = small_desk(8);
    let (graphs, labels) = desk_graphs(&cfg).unwrap();
    let codec = Codec::new(cfg.codec, 1).unwrap();
    let latents: Vec<LatentGraph> = graphs.iter().map(|g| codec.encode_graph(g).unwrap()).collect();
    let d = cfg.codec.latent_dim();
    let (backbone, _) = train_stage2(&latents, stage2_backbone(d), &stage2_config(3)).unwrap();
    let pick = |class| labels.iter().position(|&l| l == class).unwrap();
    let (a, b) = (&latents[pick(0)], &latents[pick(1)]);
    let ea = embed_latent("a", a, &backbone, ReadoutMode::Mean).unwrap();
    let eb = embed_latent("b", b, &backbone, ReadoutMode::Mean).unwrap();
    assert_eq!(ea.values.len(), d);
    assert_eq!(ea.values, embed_latent("a", a, &backbone, ReadoutMode::Mean).unwrap().values);
    let dist: f64 = ea.values.iter().zip(&eb.values).map(|(x, y)| (x - y).powi(2)).sum();
    assert!(dist > 0.0);
}
