//! Stage-1 codec training, stage-2 masked latent-graph diffusion training,
//! and the denoising RMSE-vs-t diagnostic.

use std::path::Path;

use log::warn;
use rand::{Rng, RngCore, SeedableRng};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig, BatchSide};
use crate::diffusion::{forward_noise, GraphLatents, NoiseSchedule, ScheduleConfig};
use crate::error::{Error, Result};
use crate::latent_codec::{normalize_tile, Codec, CodecConfig, LatentGraph};
use crate::mask_split::{split_graph, MaskSplit, SubGraph};
use crate::nn::{Adam, ParamStore, PlateauScheduler, Tape};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub epochs: usize,
    /// Epochs without improvement before the learning rate is halved.
    pub patience: usize,
    pub codec_epochs: usize,
    pub codec_batch_size: usize,
    pub codec_lr: f64,
    pub schedule: ScheduleConfig,
    pub mask_ratio: f64,
    pub seed: u64,
    /// Trains at this step instead of sampling `t`.
    pub fixed_t: Option<usize>,
    /// Evaluate denoising RMSE every this many epochs (0 disables).
    pub rmse_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            lr: 3e-4,
            min_lr: 1e-5,
            epochs: 250,
            patience: 10,
            codec_epochs: 30,
            codec_batch_size: 64,
            codec_lr: 3e-4,
            schedule: ScheduleConfig::default(),
            mask_ratio: 0.6,
            seed: 0,
            fixed_t: None,
            rmse_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.lr, self.min_lr, self.codec_lr].iter().all(|v| *v > 0.0 && v.is_finite());
        if !positive || self.batch_size == 0 || self.codec_batch_size == 0 {
            return Err(Error::Config("learning rates and batch sizes must be positive".into()));
        }
        if self.min_lr > self.lr {
            return Err(Error::Config("min_lr exceeds lr".into()));
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(Error::Config(format!("mask ratio {} outside (0, 1)", self.mask_ratio)));
        }
        let schedule = self.schedule.build()?;
        if let Some(t) = self.fixed_t {
            schedule.check_step(t)?;
        }
        Ok(())
    }
}

/// Independent stream for `(seed, stage, epoch)`, so an interrupted run can
/// resume at any epoch boundary with identical randomness.
pub fn epoch_rng(seed: u64, stage: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stage << 32 | epoch as u64);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stage1Epoch {
    pub epoch: usize,
    pub loss: f64,
    pub rec: f64,
    pub kl: f64,
}

/// Resumable stage-1 state.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Stage1Trainer {
    codec_config: CodecConfig,
    params: ParamStore,
    adam: Adam,
    pub epoch: usize,
    pub trace: Vec<Stage1Epoch>,
    #[serde(skip)]
    codec: Option<Codec>,
}

impl Stage1Trainer {
    pub fn new(codec: Codec, lr: f64) -> Self {
        Self {
            codec_config: *codec.config(),
            params: codec.params().clone(),
            adam: Adam::new(lr, codec.params()),
            epoch: 0,
            trace: Vec::new(),
            codec: Some(codec),
        }
    }

    pub fn codec(&mut self) -> Result<&mut Codec> {
        if self.codec.is_none() {
            let mut c = Codec::new(self.codec_config, 0)?;
            c.params_mut().load_from(&self.params)?;
            self.codec = Some(c);
        }
        Ok(self.codec.as_mut().expect("just set"))
    }

    pub fn into_codec(mut self) -> Result<Codec> {
        self.codec()?;
        Ok(self.codec.take().expect("materialized"))
    }

    /// One pass over `tiles` (HWC `u8`) in a seeded order.
    pub fn run_epoch(&mut self, tiles: &[&[u8]], batch_size: usize, seed: u64) -> Result<Stage1Epoch> {
        if tiles.is_empty() {
            return Err(Error::InvalidInput("stage 1 needs at least one tile".into()));
        }
        let epoch = self.epoch;
        let mut rng = epoch_rng(seed, 1, epoch);
        let mut order: Vec<usize> = (0..tiles.len()).collect();
        order.shuffle(&mut rng);
        let mut adam = std::mem::replace(&mut self.adam, Adam::new(0.0, &ParamStore::new()));
        let codec = self.codec()?;
        let (mut loss, mut rec, mut kl) = (0.0, 0.0, 0.0);
        let batches = order.chunks(batch_size.max(1)).count();
        for batch in order.chunks(batch_size.max(1)) {
            let norm: Vec<Vec<f64>> = batch.iter().map(|&i| normalize_tile(tiles[i])).collect();
            let refs: Vec<&[f64]> = norm.iter().map(Vec::as_slice).collect();
            let mut tape = Tape::new();
            let p = codec.params().bind(&mut tape, true);
            let out = codec.forward_batch(&mut tape, &p, &refs, &mut rng)?;
            let l = tape.value(out.total).item();
            if !l.is_finite() {
                return Err(Error::Numeric(format!("stage-1 loss became {l} at epoch {epoch}")));
            }
            loss += l;
            rec += tape.value(out.rec).item();
            kl += tape.value(out.kl).item();
            let mut g = tape.backward(out.total);
            let grads = p.grads(codec.params(), &mut g);
            adam.step(codec.params_mut(), &grads);
        }
        if !codec.params().all_finite() {
            return Err(Error::Numeric(format!("codec parameters became non-finite at epoch {epoch}")));
        }
        self.params = codec.params().clone();
        self.adam = adam;
        let n = batches as f64;
        let rec_ = Stage1Epoch {
            epoch,
            loss: loss / n,
            rec: rec / n,
            kl: kl / n,
        };
        self.trace.push(rec_);
        self.epoch += 1;
        Ok(rec_)
    }
}

/// Trains the codec on a tile corpus with Adam on `L_VAE`.
pub fn train_stage1(tiles: &[&[u8]], codec: Codec, config: &TrainConfig) -> Result<(Codec, Vec<Stage1Epoch>)> {
    config.validate()?;
    let mut trainer = Stage1Trainer::new(codec, config.codec_lr);
    for _ in 0..config.codec_epochs {
        let e = trainer.run_epoch(tiles, config.codec_batch_size, config.seed)?;
        log::info!("stage 1 epoch {}: loss {:.6} rec {:.6} kl {:.3}", e.epoch, e.loss, e.rec, e.kl);
    }
    let trace = trainer.trace.clone();
    Ok((trainer.into_codec()?, trace))
}

/// Outcome of one optimization step.
#[derive(Debug, Clone)]
pub struct StepReport {
    /// `None` when every graph in the batch was skipped.
    pub loss: Option<f64>,
    pub splits: Vec<MaskSplit>,
    pub steps: Vec<usize>,
    pub skipped: usize,
}

struct Prepared {
    visible: SubGraph,
    masked: SubGraph,
    noisy: GraphLatents,
    split: MaskSplit,
    t: usize,
}

fn prepare(g: &LatentGraph, backbone: &Backbone, schedule: &NoiseSchedule, ratio: f64, t: usize, split_seed: u64, rng: &mut impl Rng) -> Result<Option<Prepared>> {
    if g.num_vertices() < 2 {
        warn!("skipping graph with {} vertices", g.num_vertices());
        return Ok(None);
    }
    let (visible, masked, split) = split_graph(g, ratio, split_seed)?;
    let strategy = backbone.config().strategy;
    let vis = BatchSide::new(&[&visible], backbone.config().self_loops)?;
    if let Err(e) = strategy.check_conditions(&vis) {
        warn!("skipping graph: {e}");
        return Ok(None);
    }
    let clean = GraphLatents::new(masked.vertices.clone(), masked.edges.clone())?;
    let state = forward_noise(&clean, t, rng, schedule)?;
    Ok(Some(Prepared {
        noisy: GraphLatents::new(state.vertices, state.edges)?,
        visible,
        masked,
        split,
        t,
    }))
}

/// One step of masked latent-graph denoising: fresh split and step per
/// graph, noise the masked side, encode the visible side, predict the clean
/// masked latents, and apply Adam on the vertex-plus-edge MSE.
pub fn pretrain_step(
    batch: &[&LatentGraph],
    backbone: &mut Backbone,
    adam: &mut Adam,
    schedule: &NoiseSchedule,
    ratio: f64,
    rng: &mut ChaCha8Rng,
    fixed_t: Option<usize>,
) -> Result<StepReport> {
    let mut prepared = Vec::with_capacity(batch.len());
    let mut skipped = 0;
    for g in batch {
        let t = match fixed_t {
            Some(t) => t,
            None => rng.random_range(1..=schedule.steps()),
        };
        let split_seed = rng.next_u64();
        match prepare(g, backbone, schedule, ratio, t, split_seed, rng)? {
            Some(p) => prepared.push(p),
            None => skipped += 1,
        }
    }
    if prepared.is_empty() {
        return Ok(StepReport {
            loss: None,
            splits: Vec::new(),
            steps: Vec::new(),
            skipped,
        });
    }
    let self_loops = backbone.config().self_loops;
    let vis = BatchSide::new(&prepared.iter().map(|p| &p.visible).collect::<Vec<_>>(), self_loops)?;
    let tgt = BatchSide::new(&prepared.iter().map(|p| &p.masked).collect::<Vec<_>>(), self_loops)?;
    let noisy_v = crate::nn::Tensor {
        shape: tgt.vertices.shape.clone(),
        data: prepared.iter().flat_map(|p| p.noisy.vertices.data.iter().copied()).collect(),
    };
    let noisy_e = crate::nn::Tensor {
        shape: tgt.edges.shape.clone(),
        data: prepared.iter().flat_map(|p| p.noisy.edges.data.iter().copied()).collect(),
    };
    let steps: Vec<usize> = prepared.iter().map(|p| p.t).collect();

    let mut tape = Tape::new();
    let p = backbone.params().bind(&mut tape, true);
    let conds = backbone.encoder_forward(&mut tape, &p, &vis)?;
    let nv = tape.constant(noisy_v);
    let ne = tape.constant(noisy_e);
    let out = backbone.decoder_forward(&mut tape, &p, nv, ne, &steps, &tgt, &vis, &conds)?;
    let cv = tape.constant(tgt.vertices.clone());
    let ce = tape.constant(tgt.edges.clone());
    let lv = tape.mse(out.vertices, cv);
    let le = tape.mse(out.edges, ce);
    let loss = tape.add(lv, le);
    let value = tape.value(loss).item();
    if !value.is_finite() {
        return Err(Error::Numeric(format!("stage-2 loss became {value}")));
    }
    let mut g = tape.backward(loss);
    let grads = p.grads(backbone.params(), &mut g);
    adam.step(backbone.params_mut(), &grads);
    if !backbone.params().all_finite() {
        return Err(Error::Numeric("backbone parameters became non-finite".into()));
    }
    Ok(StepReport {
        loss: Some(value),
        splits: prepared.into_iter().map(|p| p.split).collect(),
        steps,
        skipped,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stage2Epoch {
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub skipped: usize,
    pub rmse: Option<f64>,
}

/// Resumable stage-2 state.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Stage2Trainer {
    config: TrainConfig,
    backbone_config: BackboneConfig,
    params: ParamStore,
    adam: Adam,
    scheduler: PlateauScheduler,
    pub lr: f64,
    pub epoch: usize,
    pub trace: Vec<Stage2Epoch>,
    /// Split of the first trained graph of every epoch, kept for audit.
    pub splits: Vec<Option<MaskSplit>>,
    #[serde(skip)]
    backbone: Option<Backbone>,
}

impl Stage2Trainer {
    pub fn new(backbone: Backbone, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            backbone_config: *backbone.config(),
            params: backbone.params().clone(),
            adam: Adam::new(config.lr, backbone.params()),
            scheduler: PlateauScheduler::new(0.5, config.patience, config.min_lr),
            lr: config.lr,
            epoch: 0,
            trace: Vec::new(),
            splits: Vec::new(),
            backbone: Some(backbone),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn backbone(&mut self) -> Result<&mut Backbone> {
        if self.backbone.is_none() {
            let mut b = Backbone::new(self.backbone_config, 0)?;
            b.params_mut().load_from(&self.params)?;
            self.backbone = Some(b);
        }
        Ok(self.backbone.as_mut().expect("just set"))
    }

    pub fn into_backbone(mut self) -> Result<Backbone> {
        self.backbone()?;
        Ok(self.backbone.take().expect("materialized"))
    }

    /// One pass over `graphs`; `eval` feeds the periodic RMSE check.
    pub fn run_epoch(&mut self, graphs: &[LatentGraph], eval: &[LatentGraph]) -> Result<Stage2Epoch> {
        let cfg = self.config;
        let schedule = cfg.schedule.build()?;
        let epoch = self.epoch;
        let mut rng = epoch_rng(cfg.seed, 2, epoch);
        let mut order: Vec<usize> = (0..graphs.len()).collect();
        order.shuffle(&mut rng);
        let mut adam = std::mem::replace(&mut self.adam, Adam::new(0.0, &ParamStore::new()));
        adam.lr = self.lr;
        let backbone = self.backbone()?;
        let (mut total, mut n, mut skipped) = (0.0, 0usize, 0usize);
        let mut first_split = None;
        for batch in order.chunks(cfg.batch_size) {
            let refs: Vec<&LatentGraph> = batch.iter().map(|&i| &graphs[i]).collect();
            let report = pretrain_step(&refs, backbone, &mut adam, &schedule, cfg.mask_ratio, &mut rng, cfg.fixed_t)?;
            skipped += report.skipped;
            if first_split.is_none() {
                first_split = report.splits.first().cloned();
            }
            if let Some(l) = report.loss {
                total += l;
                n += 1;
            }
        }
        let rmse = if cfg.rmse_every > 0 && (epoch + 1).is_multiple_of(cfg.rmse_every) && !eval.is_empty() {
            let grid = [schedule.steps() / 4, schedule.steps() / 2, schedule.steps()];
            let table = rmse_vs_t(&*backbone, eval, &grid, cfg.mask_ratio, cfg.seed, &schedule)?;
            Some(table.iter().map(|p| p.rmse).sum::<f64>() / table.len() as f64)
        } else {
            None
        };
        self.params = backbone.params().clone();
        self.adam = adam;
        let loss = if n == 0 { f64::NAN } else { total / n as f64 };
        let record = Stage2Epoch {
            epoch,
            loss,
            lr: self.lr,
            skipped,
            rmse,
        };
        if n > 0 {
            self.lr = self.scheduler.observe(loss, self.lr);
        }
        self.trace.push(record);
        self.splits.push(first_split);
        self.epoch += 1;
        Ok(record)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

impl Stage1Trainer {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

/// Runs stage-2 pre-training for `config.epochs` epochs.
pub fn train_stage2(graphs: &[LatentGraph], backbone: Backbone, config: &TrainConfig) -> Result<(Backbone, Vec<Stage2Epoch>)> {
    if graphs.is_empty() {
        return Err(Error::InvalidInput("stage 2 needs at least one latent graph".into()));
    }
    let mut trainer = Stage2Trainer::new(backbone, *config)?;
    for _ in 0..config.epochs {
        let e = trainer.run_epoch(graphs, &[])?;
        log::info!("stage 2 epoch {}: loss {:.6} lr {:.2e}", e.epoch, e.loss, e.lr);
    }
    let trace = trainer.trace.clone();
    Ok((trainer.into_backbone()?, trace))
}

/// Anything that predicts clean masked latents from a split.
pub trait Denoiser {
    fn denoise(&self, visible: &SubGraph, masked: &SubGraph, noisy: &GraphLatents, t: usize) -> Result<GraphLatents>;
}

impl Denoiser for Backbone {
    fn denoise(&self, visible: &SubGraph, masked: &SubGraph, noisy: &GraphLatents, t: usize) -> Result<GraphLatents> {
        Backbone::denoise(self, visible, masked, noisy, t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RmsePoint {
    pub t: usize,
    pub rmse: f64,
}

/// Denoising RMSE per step, averaged over graphs. Splits and noise depend
/// only on `(seed, graph, t)`, so two models see identical inputs.
pub fn rmse_vs_t(
    model: &impl Denoiser,
    graphs: &[LatentGraph],
    t_grid: &[usize],
    ratio: f64,
    seed: u64,
    schedule: &NoiseSchedule,
) -> Result<Vec<RmsePoint>> {
    let mut out = Vec::with_capacity(t_grid.len());
    for &t in t_grid {
        schedule.check_step(t)?;
        let (mut sum, mut n) = (0.0, 0usize);
        for (gi, g) in graphs.iter().enumerate() {
            if g.num_vertices() < 2 {
                continue;
            }
            let split_seed = seed ^ (gi as u64 + 1).wrapping_mul(0x2545_f491_4f6c_dd1d);
            let (visible, masked, _) = split_graph(g, ratio, split_seed)?;
            let mut rng = ChaCha8Rng::seed_from_u64(split_seed);
            rng.set_stream(t as u64 + 1);
            let clean = GraphLatents::new(masked.vertices.clone(), masked.edges.clone())?;
            let state = forward_noise(&clean, t, &mut rng, schedule)?;
            let noisy = GraphLatents::new(state.vertices, state.edges)?;
            let pred = match model.denoise(&visible, &masked, &noisy, t) {
                Ok(p) => p,
                Err(Error::Config(msg)) => {
                    warn!("rmse: skipping graph {gi}: {msg}");
                    continue;
                }
                Err(e) => return Err(e),
            };
            let p: Vec<f64> = pred.vertices.data.iter().chain(&pred.edges.data).copied().collect();
            let c: Vec<f64> = clean.vertices.data.iter().chain(&clean.edges.data).copied().collect();
            sum += crate::metrics::rmse(&p, &c)?;
            n += 1;
        }
        if n == 0 {
            return Err(Error::InvalidInput("no evaluable graphs for rmse_vs_t".into()));
        }
        out.push(RmsePoint { t, rmse: sum / n as f64 });
    }
    Ok(out)
}

/// Writes serializable rows as CSV with a header.
pub fn write_csv<T: Serialize>(path: impl AsRef<Path>, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::Strategy;
    use crate::entity_graph::degrees_from_edges;
    use crate::latent_codec::CodecConfig;

    fn graph(n: usize, d: usize, seed: u64) -> LatentGraph {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut edge_index: Vec<(u32, u32)> = (1..n as u32).map(|j| (rng.random_range(0..j), j)).collect();
        edge_index.push((0, n as u32 - 1));
        edge_index.sort_unstable();
        edge_index.dedup();
        LatentGraph {
            side: 1,
            channels: d,
            vertex_latents: (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect(),
            edge_latents: (0..edge_index.len() * d).map(|_| rng.random_range(-1.0..1.0)).collect(),
            degrees: degrees_from_edges(&edge_index, n),
            edge_index,
        }
    }

    fn small_backbone(d: usize) -> Backbone {
        Backbone::new(
            BackboneConfig {
                width: d,
                layers: 2,
                heads: 2,
                strategy: Strategy::NtoNEtoE,
                ..BackboneConfig::default()
            },
            1,
        )
        .unwrap()
    }

    fn quick(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 2,
            lr: 3e-3,
            schedule: ScheduleConfig { steps: 50, beta_min: 1e-4, beta_max: 0.05, ..ScheduleConfig::default() },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn stage1_smoke_single_tile() {
        let codec = Codec::new(CodecConfig { tile: 8, factor: 2, latent_channels: 2, hidden: 4, ..CodecConfig::default() }, 0).unwrap();
        let tile: Vec<u8> = (0..8 * 8 * 3).map(|i| (i * 7 % 256) as u8).collect();
        let cfg = TrainConfig { codec_epochs: 1, ..TrainConfig::default() };
        let (_, trace) = train_stage1(&[&tile], codec, &cfg).unwrap();
        assert_eq!(trace.len(), 1);
        assert!(trace[0].loss.is_finite());
    }

    #[test]
    fn step_is_finite_and_masks_change() {
        let graphs: Vec<LatentGraph> = (0..2).map(|s| graph(9, 4, s)).collect();
        let mut b = small_backbone(4);
        let mut adam = Adam::new(1e-3, b.params());
        let schedule = quick(1).schedule.build().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let refs: Vec<&LatentGraph> = graphs.iter().collect();
        let a = pretrain_step(&refs, &mut b, &mut adam, &schedule, 0.5, &mut rng, None).unwrap();
        let c = pretrain_step(&refs, &mut b, &mut adam, &schedule, 0.5, &mut rng, None).unwrap();
        assert!(a.loss.unwrap() > 0.0 && a.loss.unwrap().is_finite());
        assert!(a.steps.iter().all(|&t| (1..=50).contains(&t)));
        assert_ne!(a.splits, c.splits);
        assert!(b.params().all_finite());
    }

    #[test]
    fn degenerate_graphs_are_skipped() {
        let tiny = LatentGraph { side: 1, channels: 4, vertex_latents: vec![0.0; 4], edge_latents: vec![], edge_index: vec![], degrees: vec![0] };
        let mut b = small_backbone(4);
        let mut adam = Adam::new(1e-3, b.params());
        let schedule = quick(1).schedule.build().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = pretrain_step(&[&tiny], &mut b, &mut adam, &schedule, 0.5, &mut rng, None).unwrap();
        assert_eq!((r.loss, r.skipped), (None, 1));
    }

    #[test]
    fn fixed_t_zero_means_clean_input() {
        let g = graph(8, 4, 3);
        let schedule = quick(1).schedule.build().unwrap();
        let b = small_backbone(4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = prepare(&g, &b, &schedule, 0.5, 0, 5, &mut rng).unwrap().unwrap();
        assert_eq!(p.noisy.vertices, p.masked.vertices);
        assert_eq!(p.noisy.edges, p.masked.edges);
    }

    #[test]
    fn identical_seeds_give_identical_traces_and_resume_matches() {
        let graphs: Vec<LatentGraph> = (0..4).map(|s| graph(8, 4, s + 10)).collect();
        let cfg = quick(4);
        let (_, a) = train_stage2(&graphs, small_backbone(4), &cfg).unwrap();
        let (_, b) = train_stage2(&graphs, small_backbone(4), &cfg).unwrap();
        assert_eq!(a, b);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.json");
        let mut t = Stage2Trainer::new(small_backbone(4), cfg).unwrap();
        t.run_epoch(&graphs, &[]).unwrap();
        t.run_epoch(&graphs, &[]).unwrap();
        t.save(&path).unwrap();
        let mut resumed = Stage2Trainer::load(&path).unwrap();
        resumed.run_epoch(&graphs, &[]).unwrap();
        resumed.run_epoch(&graphs, &[]).unwrap();
        assert_eq!(resumed.trace, a);
    }

    struct Identity;

    impl Denoiser for Identity {
        fn denoise(&self, _: &SubGraph, _: &SubGraph, noisy: &GraphLatents, _: usize) -> Result<GraphLatents> {
            Ok(noisy.clone())
        }
    }

    #[test]
    fn identity_harness_has_zero_rmse_at_t0() {
        let graphs: Vec<LatentGraph> = (0..3).map(|s| graph(7, 4, s)).collect();
        let schedule = quick(1).schedule.build().unwrap();
        let table = rmse_vs_t(&Identity, &graphs, &[0, 25, 50], 0.5, 0, &schedule).unwrap();
        assert_eq!(table[0].rmse, 0.0);
        assert!(table[1].rmse > 0.0 && table[2].rmse > table[1].rmse);
    }
}
