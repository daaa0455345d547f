use std::ops::Range;
use std::path::Path;
use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{encode_full, ReadoutMode, SurvivalRecord};
use crate::backbone::{Backbone, BatchSide};
use crate::error::{Error, Result};
use crate::latent_codec::LatentGraph;
use crate::mask_split::full_subgraph;
use crate::metrics::{accuracy, concordance_index};
use crate::nn::{Adam, Bound, ParamId, ParamStore, PoolMode, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum Task {
    Classify { classes: usize },
    Survival,
}

impl Task {
    fn outputs(self) -> usize {
        match self {
            Task::Classify { classes } => classes,
            Task::Survival => 1,
        }
    }
}

pub enum Targets<'a> {
    Labels(&'a [usize]),
    Survival(&'a [SurvivalRecord]),
}

impl Targets<'_> {
    fn len(&self) -> usize {
        match self {
            Targets::Labels(l) => l.len(),
            Targets::Survival(r) => r.len(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    /// Hidden units of the head; 0 gives a linear head.
    pub hidden: usize,
    pub readout: ReadoutMode,
    pub epochs: usize,
    pub lr: f64,
    /// Graphs per step; 0 trains on the full set each step.
    pub batch_size: usize,
    pub freeze_encoder: bool,
    /// Standardize encoder features per dimension before readout.
    pub standardize: bool,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            hidden: 0,
            readout: ReadoutMode::Mean,
            epochs: 100,
            lr: 1e-3,
            batch_size: 32,
            freeze_encoder: true,
            standardize: true,
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("finetune needs positive epochs and learning rate".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochMetric {
    pub epoch: usize,
    pub loss: f64,
    /// Training accuracy, or training C-index for survival.
    pub metric: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct HeadIds {
    score: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: Option<(ParamId, ParamId)>,
}

/// Readout plus a linear or one-hidden-layer MLP.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Head {
    task: Task,
    config: FinetuneConfig,
    params: ParamStore,
    ids: HeadIds,
    mean: Vec<f64>,
    inv_std: Vec<f64>,
}

fn stack(rows: &[&Tensor], d: usize) -> (Tensor, Rc<Vec<Range<usize>>>) {
    let mut data = Vec::new();
    let mut segs = Vec::with_capacity(rows.len());
    let mut start = 0;
    for t in rows {
        data.extend_from_slice(&t.data);
        segs.push(start..start + t.rows());
        start += t.rows();
    }
    (Tensor { shape: vec![start, d], data }, Rc::new(segs))
}

impl Head {
    fn new(task: Task, config: FinetuneConfig, features: &[&Tensor], d: usize) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let out = task.outputs();
        let score = params.zeros("readout.score", &[d, 1]);
        let (w1, b1, w2) = if config.hidden == 0 {
            (params.normal("head.w", &[d, out], 1.0 / (d as f64).sqrt(), &mut rng), params.zeros("head.b", &[out]), None)
        } else {
            let h = config.hidden;
            let w1 = params.normal("head.w1", &[d, h], (2.0 / d as f64).sqrt(), &mut rng);
            let b1 = params.zeros("head.b1", &[h]);
            let w2 = params.normal("head.w2", &[h, out], 1.0 / (h as f64).sqrt(), &mut rng);
            let b2 = params.zeros("head.b2", &[out]);
            (w1, b1, Some((w2, b2)))
        };
        let (mut mean, mut inv_std) = (vec![0.0; d], vec![1.0; d]);
        if config.standardize {
            let n: usize = features.iter().map(|t| t.rows()).sum();
            let mut sq = vec![0.0; d];
            for t in features {
                for r in 0..t.rows() {
                    for (k, v) in t.row(r).iter().enumerate() {
                        mean[k] += v;
                        sq[k] += v * v;
                    }
                }
            }
            for k in 0..d {
                mean[k] /= n as f64;
                let var = (sq[k] / n as f64 - mean[k] * mean[k]).max(0.0);
                inv_std[k] = if var > 1e-12 { 1.0 / var.sqrt() } else { 1.0 };
            }
        }
        Ok(Self {
            task,
            config,
            params,
            ids: HeadIds { score, w1, b1, w2 },
            mean,
            inv_std,
        })
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn config(&self) -> &FinetuneConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn standardized(&self, tape: &mut Tape, x: Var) -> Var {
        let d = self.mean.len();
        let neg = tape.constant(Tensor { shape: vec![d], data: self.mean.iter().map(|m| -m).collect() });
        let inv = tape.constant(Tensor { shape: vec![d], data: self.inv_std.clone() });
        let c = tape.add_row(x, neg);
        tape.mul_row(c, inv)
    }

    /// `[Σ N_V, d]` vertex features with per-graph `segs` to `[B, outputs]`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var, segs: Rc<Vec<Range<usize>>>) -> Var {
        let x = self.standardized(tape, x);
        let pooled = match self.config.readout {
            ReadoutMode::Mean => tape.segment_pool(x, segs, PoolMode::Mean),
            ReadoutMode::Max => tape.segment_pool(x, segs, PoolMode::Max),
            ReadoutMode::Sum => tape.segment_pool(x, segs, PoolMode::Sum),
            ReadoutMode::Attention => {
                let s = tape.matmul(x, p[self.ids.score]);
                tape.softmax_pool(x, s, segs)
            }
        };
        let h = tape.matmul(pooled, p[self.ids.w1]);
        let h = tape.add_row(h, p[self.ids.b1]);
        match self.ids.w2 {
            None => h,
            Some((w2, b2)) => {
                let h = tape.gelu(h);
                let h = tape.matmul(h, p[w2]);
                tape.add_row(h, p[b2])
            }
        }
    }

    /// Logits `[B, C]` or risks `[B, 1]` from per-graph vertex features.
    pub fn predict(&self, features: &[Tensor]) -> Result<Tensor> {
        let d = self.mean.len();
        if features.iter().any(|t| t.cols() != d || t.rows() == 0) {
            return Err(Error::Shape(format!("head expects non-empty [n, {d}] features")));
        }
        let (x, segs) = stack(&features.iter().collect::<Vec<_>>(), d);
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let xv = tape.constant(x);
        let out = self.forward(&mut tape, &p, xv, segs);
        Ok(tape.value(out).clone())
    }

    pub fn predict_graphs(&self, backbone: &Backbone, graphs: &[LatentGraph]) -> Result<Tensor> {
        let f = graphs.iter().map(|g| encode_full(backbone, g)).collect::<Result<Vec<_>>>()?;
        self.predict(&f)
    }

    /// Softmax readout weights over the vertices of one graph.
    pub fn readout_weights(&self, vertices: &Tensor) -> Result<Vec<f64>> {
        let std: Vec<f64> = (0..vertices.rows())
            .flat_map(|r| vertices.row(r).iter().enumerate().map(|(k, v)| (v - self.mean[k]) * self.inv_std[k]).collect::<Vec<_>>())
            .collect();
        let x = Tensor::new(vertices.shape.clone(), std)?;
        super::attention_weights(&x, &self.params.get(self.ids.score).data)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

/// Training-set metric: accuracy from argmax logits, or C-index of risks.
fn evaluate(task: Task, out: &Tensor, targets: &Targets) -> f64 {
    match (task, targets) {
        (Task::Classify { .. }, Targets::Labels(labels)) => {
            let preds: Vec<usize> = (0..out.rows())
                .map(|r| {
                    let row = out.row(r);
                    (0..row.len()).fold(0, |b, k| if row[k] > row[b] { k } else { b })
                })
                .collect();
            accuracy(&preds, labels).unwrap_or(f64::NAN)
        }
        (Task::Survival, Targets::Survival(recs)) => {
            let times: Vec<f64> = recs.iter().map(|r| r.time).collect();
            let events: Vec<bool> = recs.iter().map(|r| r.event).collect();
            concordance_index(&out.data, &times, &events).unwrap_or(f64::NAN)
        }
        _ => f64::NAN,
    }
}

fn check_targets(task: Task, targets: &Targets, n: usize) -> Result<()> {
    if targets.len() != n {
        return Err(Error::InvalidInput(format!("{} targets for {n} inputs", targets.len())));
    }
    match (task, targets) {
        (Task::Classify { classes }, Targets::Labels(l)) => {
            if let Some(bad) = l.iter().find(|&&y| y >= classes) {
                return Err(Error::InvalidInput(format!("label {bad} outside 0..{classes}")));
            }
        }
        (Task::Survival, Targets::Survival(r)) => {
            if !r.iter().any(|r| r.event) {
                return Err(Error::Undefined("survival targets contain no events".into()));
            }
        }
        _ => return Err(Error::InvalidInput("targets do not match the task".into())),
    }
    Ok(())
}

fn loss_var(tape: &mut Tape, out: Var, batch: &[usize], targets: &Targets) -> Option<Var> {
    match targets {
        Targets::Labels(l) => Some(tape.cross_entropy(out, Rc::new(batch.iter().map(|&i| l[i]).collect()))),
        Targets::Survival(r) => {
            let events: Vec<bool> = batch.iter().map(|&i| r[i].event).collect();
            if !events.iter().any(|&e| e) {
                return None;
            }
            let times = batch.iter().map(|&i| r[i].time).collect();
            Some(tape.cox(out, Rc::new(times), Rc::new(events)))
        }
    }
}

fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x9e37_79b9_7f4a_7c15u64.wrapping_mul(epoch as u64 + 1)));
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Trains a head on fixed per-graph vertex features (a frozen encoder).
pub fn finetune_on_features(
    features: &[Tensor],
    targets: Targets,
    task: Task,
    config: FinetuneConfig,
) -> Result<(Head, Vec<EpochMetric>)> {
    config.validate()?;
    check_targets(task, &targets, features.len())?;
    let d = features.first().map(|t| t.cols()).ok_or_else(|| Error::InvalidInput("no training inputs".into()))?;
    if features.iter().any(|t| t.cols() != d || t.rows() == 0) {
        return Err(Error::Shape("features must be non-empty with a common width".into()));
    }
    let refs: Vec<&Tensor> = features.iter().collect();
    let mut head = Head::new(task, config, &refs, d)?;
    let mut adam = Adam::new(config.lr, &head.params);
    let bs = if config.batch_size == 0 { features.len() } else { config.batch_size };
    let mut trace = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let order = epoch_order(features.len(), config.seed, epoch);
        let (mut total, mut steps) = (0.0, 0);
        for batch in order.chunks(bs) {
            let (x, segs) = stack(&batch.iter().map(|&i| &features[i]).collect::<Vec<_>>(), d);
            let mut tape = Tape::new();
            let p = head.params.bind(&mut tape, true);
            let xv = tape.constant(x);
            let out = head.forward(&mut tape, &p, xv, segs);
            let Some(loss) = loss_var(&mut tape, out, batch, &targets) else { continue };
            let lv = tape.value(loss).item();
            if !lv.is_finite() {
                return Err(Error::Numeric(format!("head loss became {lv} at epoch {epoch}")));
            }
            let mut g = tape.backward(loss);
            let grads = p.grads(&head.params, &mut g);
            adam.step(&mut head.params, &grads);
            total += lv;
            steps += 1;
        }
        let out = head.predict(features)?;
        trace.push(EpochMetric {
            epoch,
            loss: total / steps.max(1) as f64,
            metric: evaluate(task, &out, &targets),
        });
    }
    Ok((head, trace))
}

/// Trains a head on latent graphs. With `freeze_encoder` the encoder runs
/// once up front; otherwise its parameters are updated along with the head.
pub fn finetune_head(
    graphs: &[LatentGraph],
    targets: Targets,
    task: Task,
    config: FinetuneConfig,
    backbone: &mut Backbone,
) -> Result<(Head, Vec<EpochMetric>)> {
    config.validate()?;
    check_targets(task, &targets, graphs.len())?;
    let features = graphs.iter().map(|g| encode_full(backbone, g)).collect::<Result<Vec<_>>>()?;
    if config.freeze_encoder {
        return finetune_on_features(&features, targets, task, config);
    }
    let d = backbone.config().width;
    let refs: Vec<&Tensor> = features.iter().collect();
    let mut head = Head::new(task, config, &refs, d)?;
    let mut head_adam = Adam::new(config.lr, &head.params);
    let mut enc_adam = Adam::new(config.lr, backbone.params());
    let subgraphs: Vec<_> = graphs.iter().map(full_subgraph).collect();
    let bs = if config.batch_size == 0 { graphs.len() } else { config.batch_size };
    let self_loops = backbone.config().self_loops;
    let mut trace = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let order = epoch_order(graphs.len(), config.seed, epoch);
        let (mut total, mut steps) = (0.0, 0);
        for batch in order.chunks(bs) {
            let side = BatchSide::new(&batch.iter().map(|&i| &subgraphs[i]).collect::<Vec<_>>(), self_loops)?;
            let mut tape = Tape::new();
            let pb = backbone.params().bind(&mut tape, true);
            let ph = head.params.bind(&mut tape, true);
            let states = backbone.encoder_forward(&mut tape, &pb, &side)?;
            let x = states.last().expect("at least one layer").vertices;
            let out = head.forward(&mut tape, &ph, x, side.vertex_segs.clone());
            let Some(loss) = loss_var(&mut tape, out, batch, &targets) else { continue };
            let lv = tape.value(loss).item();
            if !lv.is_finite() {
                return Err(Error::Numeric(format!("head loss became {lv} at epoch {epoch}")));
            }
            let mut g = tape.backward(loss);
            let hg = ph.grads(&head.params, &mut g);
            let bg = pb.grads(backbone.params(), &mut g);
            head_adam.step(&mut head.params, &hg);
            enc_adam.step(backbone.params_mut(), &bg);
            total += lv;
            steps += 1;
        }
        let out = head.predict_graphs(backbone, graphs)?;
        trace.push(EpochMetric {
            epoch,
            loss: total / steps.max(1) as f64,
            metric: evaluate(task, &out, &targets),
        });
    }
    Ok((head, trace))
}
