use std::path::Path;

use serde::{Deserialize, Serialize};

use super::GraphEmbedding;
use crate::error::{Error, Result};

/// One subject of a survival cohort.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SurvivalRecord {
    pub id: String,
    pub time: f64,
    pub event: bool,
    pub risk: Option<f64>,
}

#[derive(Deserialize)]
struct SurvivalRow {
    id: String,
    time: f64,
    event: u8,
}

/// Reads `id,time,event` rows; `event` is 0 or 1 and `time` positive.
pub fn read_survival(path: impl AsRef<Path>) -> Result<Vec<SurvivalRecord>> {
    let mut out = Vec::new();
    for (line, row) in csv::Reader::from_path(path)?.deserialize::<SurvivalRow>().enumerate() {
        let row = row?;
        if !(row.time.is_finite() && row.time > 0.0) {
            return Err(Error::InvalidInput(format!("row {}: time must be positive", line + 1)));
        }
        if row.event > 1 {
            return Err(Error::InvalidInput(format!("row {}: event must be 0 or 1", line + 1)));
        }
        out.push(SurvivalRecord {
            id: row.id,
            time: row.time,
            event: row.event == 1,
            risk: None,
        });
    }
    Ok(out)
}

#[derive(Deserialize)]
struct LabelRow {
    id: String,
    label: usize,
}

/// Reads `id,label` rows.
pub fn read_labels(path: impl AsRef<Path>) -> Result<Vec<(String, usize)>> {
    csv::Reader::from_path(path)?
        .deserialize::<LabelRow>()
        .map(|r| r.map(|r| (r.id, r.label)).map_err(Error::from))
        .collect()
}

/// Writes `id,e0,e1,...` rows.
pub fn write_embeddings(path: impl AsRef<Path>, embeddings: &[GraphEmbedding]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let d = embeddings.first().map_or(0, |e| e.values.len());
    let mut header = vec!["id".to_string()];
    header.extend((0..d).map(|k| format!("e{k}")));
    w.write_record(&header)?;
    for e in embeddings {
        if e.values.len() != d {
            return Err(Error::Shape("embeddings differ in width".into()));
        }
        let mut rec = vec![e.id.clone()];
        rec.extend(e.values.iter().map(|v| format!("{v:?}")));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_embeddings(path: impl AsRef<Path>) -> Result<Vec<GraphEmbedding>> {
    let mut out = Vec::new();
    for rec in csv::Reader::from_path(path)?.records() {
        let rec = rec?;
        let id = rec.get(0).ok_or_else(|| Error::Format("embedding row without id".into()))?.to_string();
        let values = rec
            .iter()
            .skip(1)
            .map(|v| v.parse::<f64>().map_err(|e| Error::Format(format!("embedding {id}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        out.push(GraphEmbedding { id, values });
    }
    Ok(out)
}
