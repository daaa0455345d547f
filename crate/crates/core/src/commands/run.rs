use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::build::{list_bundles, stem};
use crate::backbone::Backbone;
use crate::config::ExperimentConfig;
use crate::entity_graph::EntityGraph;
use crate::error::{Error, Result};
use crate::latent_codec::{Codec, LatentGraph};
use crate::pretrain::{rmse_vs_t, write_csv, Stage1Trainer, Stage2Trainer};

pub const RUN_FILE: &str = "run.json";
pub const CODEC_FILE: &str = "codec.json";
pub const BACKBONE_FILE: &str = "backbone.json";
pub const LATENT_DIR: &str = "latents";
const STAGE1_STATE: &str = "stage1_state.json";
const STAGE2_STATE: &str = "stage2_state.json";

/// Identity of a run directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunInfo {
    pub config_hash: String,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub run_dir: PathBuf,
    /// Bundles skipped as unreadable.
    pub skipped: Vec<String>,
    /// Whether both stages have finished.
    pub complete: bool,
}

#[derive(Debug, Clone, Default)]
pub struct PretrainOptions {
    /// Overrides the hash-named run directory.
    pub run_dir: Option<PathBuf>,
    /// Stop stage 2 after this many epochs in this invocation; a later call
    /// resumes from the saved state.
    pub stop_after: Option<usize>,
}

/// Creates the run directory or checks that an existing one belongs to
/// this configuration.
pub fn open_run(config: &ExperimentConfig, dir: &Path) -> Result<RunInfo> {
    let info = RunInfo {
        config_hash: config.hash(),
        seed: config.seed,
    };
    let path = dir.join(RUN_FILE);
    if path.exists() {
        let prev: RunInfo = serde_json::from_slice(&fs::read(&path)?)?;
        if prev != info {
            return Err(Error::Config(format!(
                "{} belongs to config {} seed {}; refusing to resume with config {} seed {}",
                dir.display(),
                prev.config_hash,
                prev.seed,
                info.config_hash,
                info.seed
            )));
        }
    } else {
        fs::create_dir_all(dir)?;
        fs::write(&path, serde_json::to_vec_pretty(&info)?)?;
        fs::write(dir.join("config.toml"), config.to_toml_string()?)?;
    }
    Ok(info)
}

/// Reads the run identity; used by the downstream commands.
pub fn read_run(dir: &Path) -> Result<RunInfo> {
    let path = dir.join(RUN_FILE);
    let bytes = fs::read(&path).map_err(|e| Error::InvalidInput(format!("{} is not a run directory: {e}", dir.display())))?;
    Ok(serde_json::from_slice(&bytes)?)
}

fn load_bundles(dir: &Path, tile: usize) -> Result<(Vec<(String, EntityGraph)>, Vec<String>)> {
    if !dir.is_dir() {
        return Err(Error::InvalidInput(format!("graph directory {} does not exist", dir.display())));
    }
    let (mut graphs, mut skipped) = (Vec::new(), Vec::new());
    for p in list_bundles(dir)? {
        match EntityGraph::load_bundle(&p) {
            Ok(g) if g.tile == tile => graphs.push((stem(&p), g)),
            Ok(g) => {
                warn!("skipping {}: tile {} but config expects {tile}", p.display(), g.tile);
                skipped.push(stem(&p));
            }
            Err(e) => {
                warn!("skipping corrupted bundle {}: {e}", p.display());
                skipped.push(stem(&p));
            }
        }
    }
    if graphs.is_empty() {
        return Err(Error::InvalidInput(format!("no readable bundles in {}", dir.display())));
    }
    Ok((graphs, skipped))
}

fn codec_tiles(graphs: &[(String, EntityGraph)], limit: usize, seed: u64) -> Vec<&[u8]> {
    let mut all: Vec<&[u8]> = graphs
        .iter()
        .flat_map(|(_, g)| (0..g.num_vertices()).map(|i| g.vertex_tile(i)).chain((0..g.num_edges()).map(|i| g.edge_tile(i))))
        .collect();
    if limit > 0 && all.len() > limit {
        all.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        all.truncate(limit);
    }
    all
}

#[derive(Serialize)]
struct ScheduleRow {
    t: usize,
    beta: f64,
    alpha_bar: f64,
    snr: f64,
}

#[derive(Serialize)]
struct RmseRow {
    t: usize,
    trained: f64,
    untrained: f64,
}

/// Loads the latent graphs written by `pretrain`, sorted by id.
pub fn load_latents(run_dir: &Path) -> Result<Vec<(String, LatentGraph)>> {
    let dir = run_dir.join(LATENT_DIR);
    let mut paths: Vec<PathBuf> = fs::read_dir(&dir)
        .map_err(|e| Error::InvalidInput(format!("{}: {e}; run pretrain first", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().and_then(|e| e.to_str()) == Some("hmgl"))
        .collect();
    paths.sort();
    paths.iter().map(|p| Ok((stem(p), LatentGraph::load(p)?))).collect()
}

/// Stage 1, latent encoding, then stage 2, checkpointing after every epoch
/// so an interrupted run resumes where it stopped.
pub fn cmd_pretrain(config: &ExperimentConfig, options: &PretrainOptions) -> Result<PretrainOutcome> {
    config.validate()?;
    let dir = options.run_dir.clone().unwrap_or_else(|| config.run_dir());
    open_run(config, &dir)?;
    let train = config.train_config();
    let schedule = train.schedule.build()?;
    let rows: Vec<ScheduleRow> = (0..=schedule.steps())
        .map(|t| ScheduleRow {
            t,
            beta: schedule.beta(t),
            alpha_bar: schedule.alpha_bar(t),
            snr: schedule.snr(t),
        })
        .collect();
    write_csv(dir.join("schedule.csv"), &rows)?;

    let (graphs, skipped) = load_bundles(&config.paths.graphs, config.graph.tile)?;
    info!("loaded {} bundles ({} skipped)", graphs.len(), skipped.len());

    let codec_path = dir.join(CODEC_FILE);
    let codec = if codec_path.exists() {
        Codec::load(&codec_path)?
    } else {
        let state = dir.join(STAGE1_STATE);
        let mut trainer = if state.exists() {
            Stage1Trainer::load(&state)?
        } else {
            Stage1Trainer::new(Codec::new(config.codec_config(), config.seed)?, train.codec_lr)
        };
        let tiles = codec_tiles(&graphs, config.training.codec_tiles, config.seed);
        while trainer.epoch < train.codec_epochs {
            let e = trainer.run_epoch(&tiles, train.codec_batch_size, train.seed)?;
            info!("stage 1 epoch {}: loss {:.6} rec {:.6} kl {:.3}", e.epoch, e.loss, e.rec, e.kl);
            trainer.save(&state)?;
            write_csv(dir.join("stage1_trace.csv"), &trainer.trace)?;
        }
        write_csv(dir.join("stage1_trace.csv"), &trainer.trace)?;
        let codec = trainer.into_codec()?;
        codec.save(&codec_path)?;
        codec
    };

    let latent_dir = dir.join(LATENT_DIR);
    fs::create_dir_all(&latent_dir)?;
    let mut latents = Vec::with_capacity(graphs.len());
    for (id, g) in &graphs {
        let l = codec.encode_graph(g)?;
        l.save(latent_dir.join(format!("{id}.hmgl")))?;
        latents.push(l);
    }
    let eval = &latents[..latents.len().min(64)];

    let backbone_path = dir.join(BACKBONE_FILE);
    if backbone_path.exists() {
        return Ok(PretrainOutcome { run_dir: dir, skipped, complete: true });
    }
    let state = dir.join(STAGE2_STATE);
    let mut trainer = if state.exists() {
        Stage2Trainer::load(&state)?
    } else {
        Stage2Trainer::new(Backbone::new(config.backbone_config(), config.seed)?, train)?
    };
    let mut ran = 0;
    while trainer.epoch < train.epochs {
        if options.stop_after.is_some_and(|n| ran >= n) {
            return Ok(PretrainOutcome { run_dir: dir, skipped, complete: false });
        }
        let e = trainer.run_epoch(&latents, eval)?;
        info!("stage 2 epoch {}: loss {:.6} lr {:.2e}", e.epoch, e.loss, e.lr);
        trainer.save(&state)?;
        write_stage2_logs(&dir, &trainer)?;
        ran += 1;
    }
    write_stage2_logs(&dir, &trainer)?;
    let trained = trainer.into_backbone()?;
    let untrained = Backbone::new(config.backbone_config(), config.seed)?;
    let t_max = schedule.steps();
    let grid: Vec<usize> = [1, t_max / 10, t_max / 4, t_max / 2, 3 * t_max / 4, t_max].into_iter().filter(|&t| t >= 1).collect();
    let a = rmse_vs_t(&trained, eval, &grid, train.mask_ratio, train.seed, &schedule)?;
    let b = rmse_vs_t(&untrained, eval, &grid, train.mask_ratio, train.seed, &schedule)?;
    let rows: Vec<RmseRow> = a
        .iter()
        .zip(&b)
        .map(|(a, b)| RmseRow { t: a.t, trained: a.rmse, untrained: b.rmse })
        .collect();
    write_csv(dir.join("rmse_t.csv"), &rows)?;
    trained.save(&backbone_path)?;
    Ok(PretrainOutcome { run_dir: dir, skipped, complete: true })
}

fn write_stage2_logs(dir: &Path, trainer: &Stage2Trainer) -> Result<()> {
    write_csv(dir.join("stage2_trace.csv"), &trainer.trace)?;
    let mut f = std::io::BufWriter::new(fs::File::create(dir.join("masks.jsonl"))?);
    for (epoch, split) in trainer.splits.iter().enumerate() {
        serde_json::to_writer(&mut f, &serde_json::json!({ "epoch": epoch, "split": split }))?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}
