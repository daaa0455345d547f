use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hmgdm::backbone::Backbone;
use hmgdm::commands::{
    cmd_build_graphs, cmd_embed, cmd_eval, cmd_finetune, cmd_pretrain, head_dir, PretrainOptions, TaskKind, BACKBONE_FILE, CODEC_FILE,
    KERNEL_BINARY,
};
use hmgdm::config::ExperimentConfig;
use hmgdm::downstream::{read_embeddings, read_labels, Head};
use hmgdm::entity_graph::ImagePatch;
use hmgdm::latent_codec::Codec;
use hmgdm::plot::{plot_heatmap, plot_km_from_risks, plot_rmse_t, plot_tsne, TsneConfig};
use hmgdm::{Error, Result};

#[derive(Parser)]
#[command(name = "hmgdm", version, about = "Masked latent graph diffusion pre-training for pathology patches")]
struct Cli {
    /// Experiment configuration (TOML); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed (HMGDM_SEED takes precedence).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Build one `.hmgg` entity-graph bundle per image.
    BuildGraphs {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Delegate to the accelerated kernel binary.
        #[arg(long, num_args = 0..=1, default_missing_value = KERNEL_BINARY)]
        kernel: Option<PathBuf>,
        #[arg(long)]
        regions: Option<usize>,
        #[arg(long)]
        compactness: Option<f32>,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        tile: Option<usize>,
        #[arg(long)]
        dilation: Option<usize>,
    },
    /// Train the codec, then the masked graph diffusion model.
    Pretrain {
        #[arg(long)]
        graphs: Option<PathBuf>,
        #[arg(long)]
        mask_ratio: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        run_dir: Option<PathBuf>,
        /// Stop stage 2 after this many epochs; rerun to resume.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Fit a classification or survival head on a pre-trained encoder.
    Finetune {
        #[arg(long)]
        run: Option<PathBuf>,
        #[arg(long)]
        task: TaskKind,
        /// `id,label` or `id,time,event` CSV.
        #[arg(long)]
        labels: PathBuf,
    },
    /// Score held-out graphs and write a metric report.
    Eval {
        #[arg(long)]
        run: Option<PathBuf>,
        #[arg(long)]
        task: TaskKind,
        #[arg(long)]
        labels: PathBuf,
    },
    /// Embed every image of a directory.
    Embed {
        #[arg(long)]
        run: Option<PathBuf>,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Render a figure to a file.
    #[command(subcommand)]
    Plot(PlotCmd),
}

#[derive(Subcommand)]
enum PlotCmd {
    Tsne {
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long, default_value_t = 30.0)]
        perplexity: f64,
        #[arg(long)]
        output: PathBuf,
    },
    Heatmap {
        #[arg(long)]
        run: Option<PathBuf>,
        #[arg(long, default_value = "classify")]
        task: TaskKind,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    Km {
        /// `risks.csv` written by `eval --task survival`.
        #[arg(long)]
        risks: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    #[command(name = "rmse_t", alias = "rmse-t")]
    RmseT {
        /// `rmse_t.csv` written by `pretrain`.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
}

fn resolve_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut c = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        c.seed = s;
    }
    match &cli.command {
        Cmd::BuildGraphs { regions, compactness, iters, tile, dilation, .. } => {
            let g = &mut c.graph;
            g.n_regions = regions.unwrap_or(g.n_regions);
            g.compactness = compactness.unwrap_or(g.compactness);
            g.iterations = iters.unwrap_or(g.iterations);
            g.tile = tile.unwrap_or(g.tile);
            g.dilation_radius = dilation.unwrap_or(g.dilation_radius);
        }
        Cmd::Pretrain { graphs, mask_ratio, epochs, .. } => {
            if let Some(g) = graphs {
                c.paths.graphs = g.clone();
            }
            c.mask.ratio = mask_ratio.unwrap_or(c.mask.ratio);
            c.training.epochs = epochs.unwrap_or(c.training.epochs);
        }
        _ => {}
    }
    let c = c.with_env_seed()?;
    c.validate()?;
    Ok(c)
}

/// Ok(true) when every item succeeded.
fn run(cli: Cli) -> Result<bool> {
    let config = resolve_config(&cli)?;
    let run_dir = |r: &Option<PathBuf>| r.clone().unwrap_or_else(|| config.run_dir());
    match cli.command {
        Cmd::BuildGraphs { input, output, kernel, .. } => {
            let entries = cmd_build_graphs(&config.graph, &input, &output, kernel.as_deref())?;
            let failed = entries.iter().filter(|e| !e.ok()).count();
            println!("{} bundles written, {failed} failed", entries.len() - failed);
            Ok(failed == 0)
        }
        Cmd::Pretrain { run_dir, stop_after, .. } => {
            let out = cmd_pretrain(&config, &PretrainOptions { run_dir, stop_after })?;
            println!("{}", out.run_dir.display());
            Ok(out.skipped.is_empty())
        }
        Cmd::Finetune { run, task, labels } => {
            let out = cmd_finetune(&config, &run_dir(&run), task, &labels)?;
            if let Some(last) = out.trace.last() {
                println!("{}: loss {:.5} training metric {:.4}", out.head_dir.display(), last.loss, last.metric);
            }
            Ok(out.skipped.is_empty())
        }
        Cmd::Eval { run, task, labels } => {
            let report = cmd_eval(&config, &run_dir(&run), task, &labels)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(true)
        }
        Cmd::Embed { run, input, output } => {
            let out = cmd_embed(&config, &run_dir(&run), &input, &output)?;
            println!("{} embeddings written, {} failed", out.embeddings.len(), out.failed.len());
            Ok(out.failed.is_empty())
        }
        Cmd::Plot(kind) => plot(kind, &config, run_dir).map(|()| true),
    }
}

fn plot(kind: PlotCmd, config: &ExperimentConfig, run_dir: impl Fn(&Option<PathBuf>) -> PathBuf) -> Result<()> {
    let need = |p: &Path| -> Result<()> {
        if p.exists() {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("{} does not exist", p.display())))
        }
    };
    match kind {
        PlotCmd::Tsne { embeddings, labels, perplexity, output } => {
            need(&embeddings)?;
            let e = read_embeddings(&embeddings)?;
            let l: Option<HashMap<String, usize>> = labels.map(|p| read_labels(p).map(|v| v.into_iter().collect())).transpose()?;
            let cfg = TsneConfig { perplexity, seed: config.seed, ..TsneConfig::default() };
            plot_tsne(&e, l.as_ref(), &cfg, &output)?;
        }
        PlotCmd::Heatmap { run, task, image, output } => {
            let dir = run_dir(&run);
            let head_path = head_dir(&dir, task).join("head.json");
            for p in [&image, &dir.join(CODEC_FILE), &dir.join(BACKBONE_FILE), &head_path] {
                need(p)?;
            }
            let tuned = head_dir(&dir, task).join(BACKBONE_FILE);
            let backbone = Backbone::load(if tuned.exists() { tuned } else { dir.join(BACKBONE_FILE) })?;
            let img = ImagePatch::open(&image)?;
            plot_heatmap(&img, &config.graph, &Codec::load(dir.join(CODEC_FILE))?, &backbone, &Head::load(head_path)?, &output)?;
        }
        PlotCmd::Km { risks, output } => {
            plot_km_from_risks(&risks, &output)?;
        }
        PlotCmd::RmseT { input, output } => plot_rmse_t(&input, &output)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e @ Error::Config(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
