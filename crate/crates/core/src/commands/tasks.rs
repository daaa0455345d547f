use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::build::{list_images, stem};
use super::run::{load_latents, read_run, BACKBONE_FILE, CODEC_FILE};
use crate::backbone::Backbone;
use crate::config::ExperimentConfig;
use crate::downstream::{
    embed_inference, finetune_head, read_labels, read_survival, write_embeddings, EpochMetric, GraphEmbedding, Head, SurvivalRecord, Targets, Task,
};
use crate::entity_graph::ImagePatch;
use crate::error::{Error, Result};
use crate::latent_codec::{Codec, LatentGraph};
use crate::metrics::{concordance_index, km_estimator, logrank_test, macro_f1, median_risk_split, accuracy, KmCurve};
use crate::pretrain::write_csv;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Classify,
    Survival,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Classify => "classify",
            TaskKind::Survival => "survival",
        }
    }
}

impl std::str::FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "classify" => Ok(Self::Classify),
            "survival" => Ok(Self::Survival),
            _ => Err(Error::Config(format!("unknown task {s:?}"))),
        }
    }
}

pub fn head_dir(run_dir: &Path, task: TaskKind) -> PathBuf {
    run_dir.join("heads").join(task.name())
}

/// Graph ids used to fit the head and those held out for `eval`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIds {
    pub train: Vec<String>,
    pub test: Vec<String>,
}

enum TaskData {
    Labels(HashMap<String, usize>),
    Survival(HashMap<String, SurvivalRecord>),
}

impl TaskData {
    fn read(task: TaskKind, path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::InvalidInput(format!("label file {} does not exist", path.display())));
        }
        Ok(match task {
            TaskKind::Classify => TaskData::Labels(read_labels(path)?.into_iter().collect()),
            TaskKind::Survival => TaskData::Survival(read_survival(path)?.into_iter().map(|r| (r.id.clone(), r)).collect()),
        })
    }

    fn contains(&self, id: &str) -> bool {
        match self {
            TaskData::Labels(m) => m.contains_key(id),
            TaskData::Survival(m) => m.contains_key(id),
        }
    }
}

fn load_backbone(run_dir: &Path, task: TaskKind) -> Result<Backbone> {
    let tuned = head_dir(run_dir, task).join(BACKBONE_FILE);
    let path = if tuned.exists() { tuned } else { run_dir.join(BACKBONE_FILE) };
    if !path.exists() {
        return Err(Error::InvalidInput(format!("{} missing; run pretrain first", path.display())));
    }
    Backbone::load(path)
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub head_dir: PathBuf,
    pub split: SplitIds,
    pub trace: Vec<EpochMetric>,
    /// Labeled ids without a latent graph.
    pub skipped: Vec<String>,
}

/// Fits a head on the non-held-out labeled graphs of a pre-trained run.
pub fn cmd_finetune(config: &ExperimentConfig, run_dir: &Path, task: TaskKind, data: &Path) -> Result<FinetuneOutcome> {
    config.validate()?;
    read_run(run_dir)?;
    let labels = TaskData::read(task, data)?;
    let mut backbone = load_backbone(run_dir, task)?;
    let latents: HashMap<String, LatentGraph> = load_latents(run_dir)?.into_iter().collect();
    let mut ids: Vec<String> = latents.keys().filter(|id| labels.contains(id)).cloned().collect();
    let mut skipped: Vec<String> = match &labels {
        TaskData::Labels(m) => m.keys().filter(|k| !latents.contains_key(*k)).cloned().collect(),
        TaskData::Survival(m) => m.keys().filter(|k| !latents.contains_key(*k)).cloned().collect(),
    };
    skipped.sort();
    for id in &skipped {
        warn!("no latent graph for labeled id {id}");
    }
    if ids.is_empty() {
        return Err(Error::InvalidInput("no labeled id matches a latent graph".into()));
    }
    ids.sort();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(config.seed));
    let n_test = (ids.len() as f64 * config.downstream.holdout).round() as usize;
    let mut test = ids[..n_test].to_vec();
    let mut train = ids[n_test..].to_vec();
    test.sort();
    train.sort();

    let graphs: Vec<LatentGraph> = train.iter().map(|id| latents[id].clone()).collect();
    let ft = config.finetune_config();
    let (head, trace) = match &labels {
        TaskData::Labels(m) => {
            let y: Vec<usize> = train.iter().map(|id| m[id]).collect();
            let classes = m.values().copied().max().unwrap_or(0).max(1) + 1;
            finetune_head(&graphs, Targets::Labels(&y), Task::Classify { classes }, ft, &mut backbone)?
        }
        TaskData::Survival(m) => {
            let r: Vec<SurvivalRecord> = train.iter().map(|id| m[id].clone()).collect();
            finetune_head(&graphs, Targets::Survival(&r), Task::Survival, ft, &mut backbone)?
        }
    };
    let dir = head_dir(run_dir, task);
    fs::create_dir_all(&dir)?;
    head.save(dir.join("head.json"))?;
    if !ft.freeze_encoder {
        backbone.save(dir.join(BACKBONE_FILE))?;
    }
    let split = SplitIds { train, test };
    fs::write(dir.join("split.json"), serde_json::to_vec_pretty(&split)?)?;
    write_csv(dir.join("finetune_trace.csv"), &trace)?;
    Ok(FinetuneOutcome { head_dir: dir, split, trace, skipped })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "lowercase")]
pub enum Report {
    Classify {
        config_hash: String,
        n: usize,
        accuracy: f64,
        macro_f1: f64,
    },
    Survival {
        config_hash: String,
        n: usize,
        events: usize,
        c_index: f64,
        logrank_statistic: f64,
        p_value: f64,
        km_high: KmCurve,
        km_low: KmCurve,
    },
}

#[derive(Serialize)]
struct RiskRow<'a> {
    id: &'a str,
    time: f64,
    event: u8,
    risk: f64,
}

/// Scores the held-out graphs (all fitted graphs when nothing was held
/// out) and writes `report.json`; survival runs also write `risks.csv`.
pub fn cmd_eval(config: &ExperimentConfig, run_dir: &Path, task: TaskKind, data: &Path) -> Result<Report> {
    config.validate()?;
    let dir = head_dir(run_dir, task);
    let head_path = dir.join("head.json");
    if !head_path.exists() {
        return Err(Error::InvalidInput(format!("{} missing; run finetune first", head_path.display())));
    }
    let head = Head::load(&head_path)?;
    let split: SplitIds = serde_json::from_slice(&fs::read(dir.join("split.json"))?)?;
    let ids = if split.test.is_empty() {
        warn!("nothing was held out; evaluating on the fitted graphs");
        split.train
    } else {
        split.test
    };
    let labels = TaskData::read(task, data)?;
    if let Some(missing) = ids.iter().find(|id| !labels.contains(id)) {
        return Err(Error::InvalidInput(format!("no label for {missing} in {}", data.display())));
    }
    let backbone = load_backbone(run_dir, task)?;
    let latents: HashMap<String, LatentGraph> = load_latents(run_dir)?.into_iter().collect();
    let graphs = ids
        .iter()
        .map(|id| latents.get(id).cloned().ok_or_else(|| Error::InvalidInput(format!("no latent graph for {id}"))))
        .collect::<Result<Vec<_>>>()?;
    let out = head.predict_graphs(&backbone, &graphs)?;
    let config_hash = config.hash();
    let report = match (&labels, head.task()) {
        (TaskData::Labels(m), Task::Classify { classes }) => {
            let y: Vec<usize> = ids.iter().map(|id| m[id]).collect();
            let preds: Vec<usize> = (0..out.rows())
                .map(|r| {
                    let row = out.row(r);
                    (0..row.len()).fold(0, |best, k| if row[k] > row[best] { k } else { best })
                })
                .collect();
            Report::Classify {
                config_hash,
                n: ids.len(),
                accuracy: accuracy(&preds, &y)?,
                macro_f1: macro_f1(&preds, &y, classes)?,
            }
        }
        (TaskData::Survival(m), Task::Survival) => {
            let recs: Vec<&SurvivalRecord> = ids.iter().map(|id| &m[id]).collect();
            let risks = out.data.clone();
            let times: Vec<f64> = recs.iter().map(|r| r.time).collect();
            let events: Vec<bool> = recs.iter().map(|r| r.event).collect();
            let (high, low) = median_risk_split(&risks)?;
            let pick = |idx: &[usize]| -> (Vec<f64>, Vec<bool>) { (idx.iter().map(|&i| times[i]).collect(), idx.iter().map(|&i| events[i]).collect()) };
            let (th, eh) = pick(&high);
            let (tl, el) = pick(&low);
            let lr = logrank_test(&th, &eh, &tl, &el)?;
            let rows: Vec<RiskRow> = recs
                .iter()
                .zip(&risks)
                .map(|(r, &risk)| RiskRow { id: &r.id, time: r.time, event: u8::from(r.event), risk })
                .collect();
            write_csv(dir.join("risks.csv"), &rows)?;
            Report::Survival {
                config_hash,
                n: ids.len(),
                events: events.iter().filter(|&&e| e).count(),
                c_index: concordance_index(&risks, &times, &events)?,
                logrank_statistic: lr.statistic,
                p_value: lr.p_value,
                km_high: km_estimator(&th, &eh)?,
                km_low: km_estimator(&tl, &el)?,
            }
        }
        _ => return Err(Error::InvalidInput(format!("head in {} was not trained for {}", dir.display(), task.name()))),
    };
    fs::write(dir.join("report.json"), serde_json::to_vec_pretty(&report)?)?;
    Ok(report)
}

#[derive(Debug, Clone)]
pub struct EmbedOutcome {
    pub embeddings: Vec<GraphEmbedding>,
    pub failed: Vec<String>,
}

/// Embeds every image in `input` with the run's codec and encoder and
/// writes `id,e0,...` rows to `out`.
pub fn cmd_embed(config: &ExperimentConfig, run_dir: &Path, input: &Path, out: &Path) -> Result<EmbedOutcome> {
    config.validate()?;
    read_run(run_dir)?;
    let codec_path = run_dir.join(CODEC_FILE);
    let backbone_path = run_dir.join(BACKBONE_FILE);
    if !codec_path.exists() || !backbone_path.exists() {
        return Err(Error::InvalidInput(format!("{} lacks trained checkpoints; run pretrain first", run_dir.display())));
    }
    let codec = Codec::load(&codec_path)?;
    let backbone = Backbone::load(&backbone_path)?;
    let (mut embeddings, mut failed) = (Vec::new(), Vec::new());
    for p in list_images(input)? {
        let id = stem(&p);
        match ImagePatch::open(&p).and_then(|img| embed_inference(id.clone(), &img, &config.graph, &codec, &backbone, config.downstream.readout)) {
            Ok(e) => embeddings.push(e),
            Err(e) => {
                warn!("{}: {e}", p.display());
                failed.push(id);
            }
        }
    }
    write_embeddings(out, &embeddings)?;
    Ok(EmbedOutcome { embeddings, failed })
}
