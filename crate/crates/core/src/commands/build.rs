use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::entity_graph::{build_entity_graph, GraphParams, ImagePatch, BUNDLE_EXTENSION};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const KERNEL_BINARY: &str = "hmgdm-kernel";

/// One line of `manifest.jsonl`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bundle: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_v: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_e: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sha256: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl ManifestEntry {
    pub fn ok(&self) -> bool {
        self.error.is_none()
    }
}

fn is_image(p: &Path) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "ppm" | "pnm"))
}

/// Image files in `dir`, sorted by name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_image(p))
        .collect();
    out.sort();
    Ok(out)
}

/// `.hmgg` bundles in `dir`, sorted by name.
pub fn list_bundles(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().and_then(|e| e.to_str()) == Some(BUNDLE_EXTENSION))
        .collect();
    out.sort();
    Ok(out)
}

pub fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn build_one(path: &Path, params: &GraphParams, out: &Path) -> ManifestEntry {
    let file = path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let run = || -> Result<ManifestEntry> {
        let g = build_entity_graph(&ImagePatch::open(path)?, params)?;
        let bytes = g.to_bundle_bytes();
        let bundle = format!("{}.{BUNDLE_EXTENSION}", stem(path));
        fs::write(out.join(&bundle), &bytes)?;
        Ok(ManifestEntry {
            file: file.clone(),
            bundle: Some(bundle),
            n_v: Some(g.num_vertices()),
            n_e: Some(g.num_edges()),
            sha256: Some(hex::encode(Sha256::digest(&bytes))),
            error: None,
        })
    };
    run().unwrap_or_else(|e| {
        log::warn!("{file}: {e}");
        ManifestEntry {
            file: file.clone(),
            bundle: None,
            n_v: None,
            n_e: None,
            sha256: None,
            error: Some(e.to_string()),
        }
    })
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for e in entries {
        serde_json::to_writer(&mut f, e)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Format(format!("manifest {}: {e}", path.display())))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

/// Builds one bundle per image with the reference implementation, or
/// hands the directory to an external kernel binary speaking the same
/// manifest format. Per-file failures are recorded, not raised.
pub fn cmd_build_graphs(params: &GraphParams, input: &Path, output: &Path, kernel: Option<&Path>) -> Result<Vec<ManifestEntry>> {
    params.validate().map_err(|e| Error::Config(e.to_string()))?;
    if !input.is_dir() {
        return Err(Error::InvalidInput(format!("{} is not a directory", input.display())));
    }
    fs::create_dir_all(output)?;
    if let Some(kernel) = kernel {
        return run_kernel(kernel, params, input, output);
    }
    let images = list_images(input)?;
    let mut entries: Vec<ManifestEntry> = images.par_iter().map(|p| build_one(p, params, output)).collect();
    entries.sort_by(|a, b| a.file.cmp(&b.file));
    write_manifest(&output.join(MANIFEST_FILE), &entries)?;
    Ok(entries)
}

fn run_kernel(kernel: &Path, params: &GraphParams, input: &Path, output: &Path) -> Result<Vec<ManifestEntry>> {
    let status = Command::new(kernel)
        .arg("--in")
        .arg(input)
        .arg("--out")
        .arg(output)
        .args(["--regions", &params.n_regions.to_string()])
        .args(["--compactness", &params.compactness.to_string()])
        .args(["--iters", &params.iterations.to_string()])
        .args(["--tile", &params.tile.to_string()])
        .args(["--dilation", &params.dilation_radius.to_string()])
        .args(["--workers", &rayon::current_num_threads().to_string()])
        .status()
        .map_err(|e| Error::InvalidInput(format!("cannot run graph kernel {}: {e}", kernel.display())))?;
    let manifest = output.join(MANIFEST_FILE);
    if !manifest.exists() {
        return Err(Error::Format(format!("graph kernel {} exited with {status} and wrote no manifest", kernel.display())));
    }
    let mut entries = read_manifest(&manifest)?;
    entries.sort_by(|a, b| a.file.cmp(&b.file));
    if !status.success() && entries.iter().all(ManifestEntry::ok) {
        return Err(Error::Format(format!("graph kernel {} exited with {status}", kernel.display())));
    }
    Ok(entries)
}
