//! File-only figures: t-SNE scatter, Kaplan-Meier curves and RMSE-vs-t as
//! SVG, and readout-weight heatmaps as PNG.

mod tsne;

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use image::RgbImage;
use serde::Deserialize;

use crate::downstream::{encode_full, GraphEmbedding, Head, ReadoutMode};
use crate::entity_graph::{graph_from_labels, segment_superpixels, GraphParams, ImagePatch, LabelMap};
use crate::error::{Error, Result};
use crate::latent_codec::Codec;
use crate::backbone::Backbone;
use crate::metrics::{km_estimator, logrank_test, median_risk_split, KmCurve};

pub use tsne::{tsne, TsneConfig};

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf", "#8c564b", "#7f7f7f"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Minimal SVG canvas with a data-space transform.
pub struct Figure {
    width: f64,
    height: f64,
    margin: f64,
    x: (f64, f64),
    y: (f64, f64),
    body: String,
}

impl Figure {
    pub fn new(title: &str, x: (f64, f64), y: (f64, f64)) -> Self {
        let pad = |r: (f64, f64)| if r.1 > r.0 { r } else { (r.0 - 0.5, r.0 + 0.5) };
        let mut f = Self {
            width: 640.0,
            height: 480.0,
            margin: 60.0,
            x: pad(x),
            y: pad(y),
            body: String::new(),
        };
        let _ = write!(
            f.body,
            r#"<text x="{}" y="30" text-anchor="middle" font-size="16">{}</text>"#,
            f.width / 2.0,
            escape(title)
        );
        f
    }

    fn px(&self, x: f64) -> f64 {
        self.margin + (x - self.x.0) / (self.x.1 - self.x.0) * (self.width - 2.0 * self.margin)
    }

    fn py(&self, y: f64) -> f64 {
        self.height - self.margin - (y - self.y.0) / (self.y.1 - self.y.0) * (self.height - 2.0 * self.margin)
    }

    pub fn axes(&mut self, xlabel: &str, ylabel: &str) {
        let (l, r, t, b) = (self.margin, self.width - self.margin, self.margin, self.height - self.margin);
        let _ = write!(self.body, r#"<rect x="{l}" y="{t}" width="{}" height="{}" fill="none" stroke="black"/>"#, r - l, b - t);
        for k in 0..=4 {
            let fx = self.x.0 + (self.x.1 - self.x.0) * k as f64 / 4.0;
            let fy = self.y.0 + (self.y.1 - self.y.0) * k as f64 / 4.0;
            let (sx, sy) = (self.px(fx), self.py(fy));
            let _ = write!(self.body, r#"<line x1="{sx}" y1="{b}" x2="{sx}" y2="{}" stroke="black"/>"#, b + 5.0);
            let _ = write!(self.body, r#"<text x="{sx}" y="{}" text-anchor="middle" font-size="11">{fx:.3}</text>"#, b + 18.0);
            let _ = write!(self.body, r#"<line x1="{}" y1="{sy}" x2="{l}" y2="{sy}" stroke="black"/>"#, l - 5.0);
            let _ = write!(self.body, r#"<text x="{}" y="{}" text-anchor="end" font-size="11">{fy:.3}</text>"#, l - 8.0, sy + 4.0);
        }
        let _ = write!(self.body, r#"<text x="{}" y="{}" text-anchor="middle" font-size="13">{}</text>"#, self.width / 2.0, self.height - 15.0, escape(xlabel));
        let _ = write!(
            self.body,
            r#"<text x="15" y="{}" text-anchor="middle" font-size="13" transform="rotate(-90 15 {})">{}</text>"#,
            self.height / 2.0,
            self.height / 2.0,
            escape(ylabel)
        );
    }

    pub fn polyline(&mut self, pts: &[(f64, f64)], colour: &str) {
        let d: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", self.px(x), self.py(y))).collect();
        let _ = write!(self.body, r#"<polyline points="{}" fill="none" stroke="{colour}" stroke-width="2"/>"#, d.join(" "));
    }

    /// Right-continuous step function through `pts`.
    pub fn steps(&mut self, pts: &[(f64, f64)], colour: &str) {
        let mut path = Vec::with_capacity(pts.len() * 2);
        for (k, &(x, y)) in pts.iter().enumerate() {
            if k > 0 {
                path.push((x, pts[k - 1].1));
            }
            path.push((x, y));
        }
        self.polyline(&path, colour);
    }

    pub fn points(&mut self, pts: &[(f64, f64)], colour: &str) {
        for &(x, y) in pts {
            let _ = write!(self.body, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{colour}" fill-opacity="0.8"/>"#, self.px(x), self.py(y));
        }
    }

    pub fn legend(&mut self, entries: &[(String, &str)]) {
        for (k, (label, colour)) in entries.iter().enumerate() {
            let y = self.margin + 16.0 + 18.0 * k as f64;
            let x = self.width - self.margin - 150.0;
            let _ = write!(self.body, r#"<rect x="{x}" y="{}" width="12" height="12" fill="{colour}"/>"#, y - 10.0);
            let _ = write!(self.body, r#"<text x="{}" y="{y}" font-size="12">{}</text>"#, x + 18.0, escape(label));
        }
    }

    pub fn finish(&self) -> String {
        format!(
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}" viewBox="0 0 {} {}"><rect width="100%" height="100%" fill="white"/>{}</svg>"#,
            self.width, self.height, self.width, self.height, self.body
        )
        + "\n"
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.finish())?;
        Ok(())
    }
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
}

fn require_ext(path: &Path, ext: &str) -> Result<()> {
    if path.extension().and_then(|e| e.to_str()) != Some(ext) {
        return Err(Error::InvalidInput(format!("{} must end in .{ext}", path.display())));
    }
    Ok(())
}

fn require_file(path: &Path) -> Result<()> {
    if !path.is_file() {
        return Err(Error::InvalidInput(format!("{} does not exist", path.display())));
    }
    Ok(())
}

/// t-SNE layout of `embeddings`, coloured by label when given. Returns the
/// layout.
pub fn plot_tsne(embeddings: &[GraphEmbedding], labels: Option<&HashMap<String, usize>>, config: &TsneConfig, out: &Path) -> Result<Vec<[f64; 2]>> {
    require_ext(out, "svg")?;
    let data: Vec<Vec<f64>> = embeddings.iter().map(|e| e.values.clone()).collect();
    let y = tsne(&data, config)?;
    let (xr, yr) = (range(y.iter().map(|p| p[0])), range(y.iter().map(|p| p[1])));
    let mut fig = Figure::new("t-SNE of graph embeddings", xr, yr);
    fig.axes("t-SNE 1", "t-SNE 2");
    let mut groups: Vec<(Option<usize>, Vec<(f64, f64)>)> = Vec::new();
    for (e, p) in embeddings.iter().zip(&y) {
        let key = labels.and_then(|m| m.get(&e.id).copied());
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, pts)) => pts.push((p[0], p[1])),
            None => groups.push((key, vec![(p[0], p[1])])),
        }
    }
    groups.sort_by_key(|(k, _)| k.map_or(usize::MAX, |k| k));
    let mut legend = Vec::new();
    for (k, (key, pts)) in groups.iter().enumerate() {
        let colour = PALETTE[k % PALETTE.len()];
        fig.points(pts, colour);
        legend.push((key.map_or_else(|| "unlabeled".to_string(), |l| format!("class {l}")), colour));
    }
    if labels.is_some() {
        fig.legend(&legend);
    }
    fig.save(out)?;
    Ok(y)
}

/// Two Kaplan-Meier curves with the log-rank p-value in the legend.
pub fn plot_km(high: &KmCurve, low: &KmCurve, p_value: Option<f64>, out: &Path) -> Result<()> {
    require_ext(out, "svg")?;
    let t_max = high.steps.iter().chain(&low.steps).map(|s| s.time).fold(0.0, f64::max);
    let mut fig = Figure::new("Kaplan-Meier by median risk", (0.0, t_max.max(1.0)), (0.0, 1.0));
    fig.axes("time", "survival probability");
    let curve = |c: &KmCurve| -> Vec<(f64, f64)> {
        let mut pts = vec![(0.0, 1.0)];
        pts.extend(c.steps.iter().map(|s| (s.time, s.survival)));
        if let Some(&(_, s)) = pts.last() {
            pts.push((t_max, s));
        }
        pts
    };
    fig.steps(&curve(high), PALETTE[1]);
    fig.steps(&curve(low), PALETTE[0]);
    let mut legend = vec![("high risk".to_string(), PALETTE[1]), ("low risk".to_string(), PALETTE[0])];
    if let Some(p) = p_value {
        legend.push((format!("log-rank p = {p:.3e}"), "white"));
    }
    fig.legend(&legend);
    fig.save(out)
}

#[derive(Deserialize)]
struct RiskRow {
    time: f64,
    event: u8,
    risk: f64,
}

/// KM plot from an `id,time,event,risk` table split at the median risk.
/// Returns the high- and low-risk curves.
pub fn plot_km_from_risks(risks_csv: &Path, out: &Path) -> Result<(KmCurve, KmCurve)> {
    require_file(risks_csv)?;
    let rows = csv::Reader::from_path(risks_csv)?.deserialize::<RiskRow>().collect::<std::result::Result<Vec<_>, _>>()?;
    let risks: Vec<f64> = rows.iter().map(|r| r.risk).collect();
    let (hi, lo) = median_risk_split(&risks)?;
    let pick = |idx: &[usize]| -> (Vec<f64>, Vec<bool>) { (idx.iter().map(|&i| rows[i].time).collect(), idx.iter().map(|&i| rows[i].event == 1).collect()) };
    let (th, eh) = pick(&hi);
    let (tl, el) = pick(&lo);
    let (high, low) = (km_estimator(&th, &eh)?, km_estimator(&tl, &el)?);
    let p = logrank_test(&th, &eh, &tl, &el).ok().map(|l| l.p_value);
    plot_km(&high, &low, p, out)?;
    Ok((high, low))
}

/// Line per numeric column of a CSV whose first column is `t`.
pub fn plot_rmse_t(csv_path: &Path, out: &Path) -> Result<()> {
    require_ext(out, "svg")?;
    require_file(csv_path)?;
    let mut reader = csv::Reader::from_path(csv_path)?;
    let names: Vec<String> = reader.headers()?.iter().skip(1).map(str::to_string).collect();
    let mut series: Vec<Vec<(f64, f64)>> = vec![Vec::new(); names.len()];
    for rec in reader.records() {
        let rec = rec?;
        let parse = |s: &str| s.parse::<f64>().map_err(|e| Error::Format(format!("{}: {e}", csv_path.display())));
        let t = parse(rec.get(0).unwrap_or(""))?;
        for (k, s) in series.iter_mut().enumerate() {
            s.push((t, parse(rec.get(k + 1).unwrap_or(""))?));
        }
    }
    if series.iter().all(Vec::is_empty) {
        return Err(Error::InvalidInput(format!("{} has no rows", csv_path.display())));
    }
    let xr = range(series.iter().flatten().map(|p| p.0));
    let yr = range(series.iter().flatten().map(|p| p.1));
    let mut fig = Figure::new("denoising RMSE over t", xr, (0.0f64.min(yr.0), yr.1 * 1.05));
    fig.axes("t", "RMSE");
    let mut legend = Vec::new();
    for (k, (s, name)) in series.iter().zip(&names).enumerate() {
        let colour = PALETTE[k % PALETTE.len()];
        fig.polyline(s, colour);
        fig.points(s, colour);
        legend.push((name.clone(), colour));
    }
    fig.legend(&legend);
    fig.save(out)
}

fn colormap(v: f64) -> [f64; 3] {
    let stops = [[20.0, 20.0, 90.0], [200.0, 30.0, 40.0], [255.0, 230.0, 60.0]];
    let v = v.clamp(0.0, 1.0) * 2.0;
    let (a, b, f) = if v < 1.0 { (stops[0], stops[1], v) } else { (stops[1], stops[2], v - 1.0) };
    [a[0] + (b[0] - a[0]) * f, a[1] + (b[1] - a[1]) * f, a[2] + (b[2] - a[2]) * f]
}

/// Paints per-entity weights onto their superpixels over the image.
pub fn paint_heatmap(image: &ImagePatch, labels: &LabelMap, weights: &[f64]) -> Result<RgbImage> {
    if weights.len() != labels.n_regions || (image.height, image.width) != (labels.height, labels.width) {
        return Err(Error::Shape(format!("{} weights for {} regions", weights.len(), labels.n_regions)));
    }
    let top = weights.iter().cloned().fold(f64::MIN_POSITIVE, f64::max);
    let mut out = RgbImage::new(image.width as u32, image.height as u32);
    for y in 0..image.height {
        for x in 0..image.width {
            let c = colormap(weights[labels.label(y, x) as usize] / top);
            let p = image.pixel(y, x);
            let mix = |k: usize| (0.45 * p[k] as f64 + 0.55 * c[k]).round() as u8;
            out.put_pixel(x as u32, y as u32, image::Rgb([mix(0), mix(1), mix(2)]));
        }
    }
    Ok(out)
}

/// Readout weights of `head` for one image, painted to `out` (PNG).
/// Returns the weights, which sum to one over entities.
pub fn plot_heatmap(image: &ImagePatch, params: &GraphParams, codec: &Codec, backbone: &Backbone, head: &Head, out: &Path) -> Result<Vec<f64>> {
    require_ext(out, "png")?;
    if head.config().readout != ReadoutMode::Attention {
        log::warn!("head uses {:?} readout; its attention weights are uniform", head.config().readout);
    }
    let labels = segment_superpixels(image, params.n_regions, params.compactness, params.iterations)?;
    let graph = graph_from_labels(image, &labels, params.tile, params.dilation_radius)?;
    let latent = codec.encode_graph(&graph)?;
    let weights = head.readout_weights(&encode_full(backbone, &latent)?)?;
    paint_heatmap(image, &labels, &weights)?.save(out)?;
    Ok(weights)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn svg_is_well_formed_enough() {
        let mut f = Figure::new("a <b>", (0.0, 1.0), (0.0, 0.0));
        f.axes("x", "y");
        f.steps(&[(0.0, 1.0), (0.5, 0.5), (1.0, 0.0)], "red");
        let s = f.finish();
        assert!(s.starts_with("<svg") && s.trim_end().ends_with("</svg>"));
        assert!(s.contains("a &lt;b&gt;"));
        assert!(!s.contains("NaN"));
    }

    #[test]
    fn heatmap_paints_each_region_by_weight() {
        let img = ImagePatch::new(2, 2, vec![255; 12]).unwrap();
        let labels = LabelMap::new(2, 2, vec![0, 0, 1, 1]).unwrap();
        let out = paint_heatmap(&img, &labels, &[0.25, 0.75]).unwrap();
        assert_eq!(out.get_pixel(0, 0), out.get_pixel(1, 0));
        assert_ne!(out.get_pixel(0, 0), out.get_pixel(0, 1));
        assert!(paint_heatmap(&img, &labels, &[1.0]).is_err());
    }
}
