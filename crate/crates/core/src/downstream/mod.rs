//! Inference embeddings, graph readout, and the classification and
//! survival heads.

mod head;
mod records;

use std::ops::Range;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::entity_graph::{build_entity_graph, GraphParams, ImagePatch};
use crate::error::{Error, Result};
use crate::latent_codec::{Codec, LatentGraph};
use crate::mask_split::full_subgraph;
use crate::nn::{PoolMode, Tape, Tensor};

pub use head::{finetune_head, finetune_on_features, EpochMetric, FinetuneConfig, Head, Targets, Task};
pub use records::{read_embeddings, read_labels, read_survival, write_embeddings, SurvivalRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReadoutMode {
    Mean,
    Max,
    Sum,
    Attention,
}

impl std::str::FromStr for ReadoutMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Self::Mean),
            "max" => Ok(Self::Max),
            "sum" => Ok(Self::Sum),
            "attention" => Ok(Self::Attention),
            _ => Err(Error::Config(format!("unknown readout {s:?}"))),
        }
    }
}

/// Global graph embedding `O_G`.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphEmbedding {
    pub id: String,
    pub values: Vec<f64>,
}

/// Softmax of `x·score` over the rows of `x`.
pub fn attention_weights(vertices: &Tensor, score: &[f64]) -> Result<Vec<f64>> {
    if vertices.cols() != score.len() {
        return Err(Error::Shape(format!("score width {} for {} features", score.len(), vertices.cols())));
    }
    let logits: Vec<f64> = (0..vertices.rows())
        .map(|r| vertices.row(r).iter().zip(score).map(|(a, b)| a * b).sum())
        .collect();
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = e.iter().sum();
    Ok(e.into_iter().map(|v| v / z).collect())
}

/// Pools `[N_V, d]` vertex latents into one vector. `score` is the
/// attention scoring vector and is ignored by the other modes.
pub fn readout(vertices: &Tensor, mode: ReadoutMode, score: Option<&[f64]>) -> Result<Vec<f64>> {
    if vertices.shape.len() != 2 || vertices.rows() == 0 {
        return Err(Error::InvalidInput("readout needs at least one vertex".into()));
    }
    let mut tape = Tape::new();
    let x = tape.constant(vertices.clone());
    #[allow(clippy::single_range_in_vec_init)]
    let segs: Rc<Vec<Range<usize>>> = Rc::new(vec![0..vertices.rows()]);
    let out = match mode {
        ReadoutMode::Mean => tape.segment_pool(x, segs, PoolMode::Mean),
        ReadoutMode::Max => tape.segment_pool(x, segs, PoolMode::Max),
        ReadoutMode::Sum => tape.segment_pool(x, segs, PoolMode::Sum),
        ReadoutMode::Attention => {
            let d = vertices.cols();
            let s = score.map_or_else(|| vec![0.0; d], <[f64]>::to_vec);
            if s.len() != d {
                return Err(Error::Shape(format!("score width {} for {d} features", s.len())));
            }
            let w = tape.constant(Tensor::new(vec![d, 1], s)?);
            let scores = tape.matmul(x, w);
            tape.softmax_pool(x, scores, segs)
        }
    };
    Ok(tape.value(out).data.clone())
}

/// Final-layer encoder vertex states of the unmasked graph.
pub fn encode_full(backbone: &Backbone, g: &LatentGraph) -> Result<Tensor> {
    let states = backbone.encode(&full_subgraph(g))?;
    Ok(states.last().expect("at least one layer").vertices.clone())
}

/// Image → entity graph → latents → encoder → readout. The decoder is not
/// used; every step is deterministic.
pub fn embed_inference(
    id: impl Into<String>,
    image: &ImagePatch,
    params: &GraphParams,
    codec: &Codec,
    backbone: &Backbone,
    mode: ReadoutMode,
) -> Result<GraphEmbedding> {
    let graph = build_entity_graph(image, params)?;
    let latent = codec.encode_graph(&graph)?;
    embed_latent(id, &latent, backbone, mode)
}

pub fn embed_latent(id: impl Into<String>, g: &LatentGraph, backbone: &Backbone, mode: ReadoutMode) -> Result<GraphEmbedding> {
    let v = encode_full(backbone, g)?;
    Ok(GraphEmbedding {
        id: id.into(),
        values: readout(&v, mode, None)?,
    })
}

/// Softmax cross-entropy averaged over the batch.
pub fn ce_loss(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    if logits.shape.len() != 2 || logits.rows() != labels.len() || labels.is_empty() {
        return Err(Error::InvalidInput("logits must be [B, C] with one label per row".into()));
    }
    if let Some(bad) = labels.iter().find(|&&y| y >= logits.cols()) {
        return Err(Error::InvalidInput(format!("label {bad} outside 0..{}", logits.cols())));
    }
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let out = tape.cross_entropy(l, Rc::new(labels.to_vec()));
    Ok(tape.value(out).item())
}

/// Negative Cox partial log-likelihood over the risk sets
/// `{j : t_j ≥ t_i}`, averaged over events.
pub fn cox_loss(risks: &[f64], times: &[f64], events: &[bool]) -> Result<f64> {
    if risks.len() != times.len() || risks.len() != events.len() {
        return Err(Error::InvalidInput("risks, times and events differ in length".into()));
    }
    if !events.iter().any(|&e| e) {
        return Err(Error::Undefined("Cox loss needs at least one event".into()));
    }
    if risks.iter().chain(times).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("Cox loss input contains NaN or infinity".into()));
    }
    let mut tape = Tape::new();
    let h = tape.constant(Tensor::new(vec![risks.len()], risks.to_vec())?);
    let out = tape.cox(h, Rc::new(times.to_vec()), Rc::new(events.to_vec()));
    Ok(tape.value(out).item())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn readout_examples() {
        let x = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]], 2).unwrap();
        assert_eq!(readout(&x, ReadoutMode::Mean, None).unwrap(), vec![2.0, 3.0]);
        assert_eq!(readout(&x, ReadoutMode::Max, None).unwrap(), vec![3.0, 4.0]);
        assert_eq!(readout(&x, ReadoutMode::Sum, None).unwrap(), vec![4.0, 6.0]);
        let att = readout(&x, ReadoutMode::Attention, Some(&[0.0, 0.0])).unwrap();
        assert!((att[0] - 2.0).abs() < 1e-12 && (att[1] - 3.0).abs() < 1e-12);
        assert!(readout(&Tensor::zeros(&[0, 2]), ReadoutMode::Mean, None).is_err());
        let w = attention_weights(&x, &[0.3, -1.0]).unwrap();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ce_examples() {
        let u = Tensor::from_rows(&[vec![0.5, 0.5]], 2).unwrap();
        assert!((ce_loss(&u, &[1]).unwrap() - 2f64.ln()).abs() < 1e-12);
        let l = Tensor::from_rows(&[vec![1.0, 0.0]], 2).unwrap();
        assert!((ce_loss(&l, &[0]).unwrap() - (1.0 + (-1f64).exp()).ln()).abs() < 1e-12);
        let sure = Tensor::from_rows(&[vec![800.0, 0.0]], 2).unwrap();
        assert_eq!(ce_loss(&sure, &[0]).unwrap(), 0.0);
        assert!(matches!(ce_loss(&l, &[2]), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn cox_examples() {
        let two = cox_loss(&[0.0, 0.0], &[1.0, 2.0], &[true, true]).unwrap();
        assert!((two - 2f64.ln() / 2.0).abs() < 1e-12);
        assert_eq!(cox_loss(&[1.7], &[3.0], &[true]).unwrap(), 0.0);
        let h = [0.3, -1.2, 2.0, 0.1];
        let t = [5.0, 2.0, 2.0, 9.0];
        let e = [true, false, true, true];
        let shifted: Vec<f64> = h.iter().map(|v| v + 4.25).collect();
        assert!((cox_loss(&h, &t, &e).unwrap() - cox_loss(&shifted, &t, &e).unwrap()).abs() < 1e-8);
        assert!(matches!(cox_loss(&h, &t, &[false; 4]), Err(Error::Undefined(_))));
    }
}
