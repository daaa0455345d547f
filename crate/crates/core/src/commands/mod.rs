//! The operations behind each subcommand of the `hmgdm` binary.

mod build;
mod run;
mod tasks;

pub use build::{cmd_build_graphs, list_bundles, list_images, read_manifest, write_manifest, ManifestEntry, KERNEL_BINARY, MANIFEST_FILE};
pub use run::{cmd_pretrain, load_latents, open_run, read_run, PretrainOptions, PretrainOutcome, RunInfo, BACKBONE_FILE, CODEC_FILE, LATENT_DIR, RUN_FILE};
pub use tasks::{cmd_embed, cmd_eval, cmd_finetune, head_dir, EmbedOutcome, FinetuneOutcome, Report, SplitIds, TaskKind};
