//! Procedural two-class tissue textures for desk-scale experiments.
//!
//! Class 0 is a dense field of dark round nuclei on a pink background;
//! class 1 is oriented fibrous stroma with a few pale lumens and sparse
//! small nuclei.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp, Normal};
use rayon::prelude::*;

use crate::downstream::SurvivalRecord;
use crate::entity_graph::ImagePatch;
use crate::error::{Error, Result};

const BACKGROUND: [f64; 3] = [232.0, 170.0, 200.0];
const NUCLEUS: [f64; 3] = [88.0, 48.0, 138.0];
const FIBER: [f64; 3] = [205.0, 115.0, 165.0];
const LUMEN: [f64; 3] = [246.0, 240.0, 246.0];

struct Canvas {
    size: usize,
    px: Vec<[f64; 3]>,
}

impl Canvas {
    fn blend(&mut self, y: usize, x: usize, colour: [f64; 3], alpha: f64) {
        let p = &mut self.px[y * self.size + x];
        for c in 0..3 {
            p[c] = (1.0 - alpha) * p[c] + alpha * colour[c];
        }
    }

    /// Filled ellipse with a one-pixel soft rim.
    fn ellipse(&mut self, cy: f64, cx: f64, ry: f64, rx: f64, colour: [f64; 3]) {
        let y0 = (cy - ry - 1.0).floor().max(0.0) as usize;
        let y1 = ((cy + ry + 1.0).ceil() as usize).min(self.size - 1);
        let x0 = (cx - rx - 1.0).floor().max(0.0) as usize;
        let x1 = ((cx + rx + 1.0).ceil() as usize).min(self.size - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let dy = (y as f64 - cy) / ry;
                let dx = (x as f64 - cx) / rx;
                let r = (dy * dy + dx * dx).sqrt();
                let alpha = ((1.0 - r) * rx.min(ry) + 0.5).clamp(0.0, 1.0);
                if alpha > 0.0 {
                    self.blend(y, x, colour, alpha);
                }
            }
        }
    }
}

fn jitter(rng: &mut ChaCha8Rng, colour: [f64; 3], amount: f64) -> [f64; 3] {
    let n = Normal::new(0.0, amount).expect("positive spread");
    [colour[0] + rng.sample(n), colour[1] + rng.sample(n), colour[2] + rng.sample(n)]
}

fn nuclei(c: &mut Canvas, rng: &mut ChaCha8Rng, count: usize, radius: (f64, f64)) {
    let s = c.size as f64;
    for _ in 0..count {
        let r = rng.random_range(radius.0..radius.1);
        let aspect = rng.random_range(0.75..1.25);
        let colour = jitter(rng, NUCLEUS, 10.0);
        c.ellipse(rng.random_range(0.0..s), rng.random_range(0.0..s), r * aspect, r / aspect, colour);
    }
}

/// One `size×size` texture of the given class (0 or 1).
pub fn texture_patch(class: usize, size: usize, seed: u64) -> Result<ImagePatch> {
    if class > 1 {
        return Err(Error::InvalidParameter(format!("synthetic class {class} outside 0..2")));
    }
    if size < 8 {
        return Err(Error::InvalidParameter("synthetic patches need a side of at least 8".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = jitter(&mut rng, BACKGROUND, 6.0);
    let mut c = Canvas {
        size,
        px: vec![base; size * size],
    };
    let area = (size * size) as f64 / (128.0 * 128.0);
    if class == 0 {
        let count = (rng.random_range(45.0..65.0) * area).round() as usize;
        nuclei(&mut c, &mut rng, count, (3.5, 6.5));
    } else {
        let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
        let period = rng.random_range(7.0..12.0);
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        let (sn, cs) = theta.sin_cos();
        for y in 0..size {
            for x in 0..size {
                let u = (x as f64 * cs + y as f64 * sn) / period * std::f64::consts::TAU + phase;
                let a = 0.5 + 0.5 * u.sin();
                c.blend(y, x, FIBER, 0.85 * a * a);
            }
        }
        let s = size as f64;
        for _ in 0..rng.random_range(1..=3) {
            let r = rng.random_range(0.08..0.14) * s;
            c.ellipse(rng.random_range(0.0..s), rng.random_range(0.0..s), r, r * rng.random_range(0.7..1.3), LUMEN);
        }
        let count = (rng.random_range(5.0..10.0) * area).round() as usize;
        nuclei(&mut c, &mut rng, count, (2.0, 3.2));
    }
    let noise = Normal::new(0.0, 5.0).expect("positive spread");
    let mut pixels = Vec::with_capacity(size * size * 3);
    for p in &c.px {
        for v in p {
            pixels.push((v + rng.sample(noise)).round().clamp(0.0, 255.0) as u8);
        }
    }
    ImagePatch::new(size, size, pixels)
}

fn patch_seed(seed: u64, i: usize) -> u64 {
    seed ^ (i as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

pub struct TextureCorpus {
    pub images: Vec<ImagePatch>,
    pub labels: Vec<usize>,
}

/// `n` patches with alternating labels `0, 1, 0, ...`.
pub fn texture_corpus(n: usize, size: usize, seed: u64) -> Result<TextureCorpus> {
    let images = (0..n)
        .into_par_iter()
        .map(|i| texture_patch(i % 2, size, patch_seed(seed, i)))
        .collect::<Result<Vec<_>>>()?;
    Ok(TextureCorpus {
        images,
        labels: (0..n).map(|i| i % 2).collect(),
    })
}

/// File stem of patch `i` in a written corpus.
pub fn patch_name(i: usize) -> String {
    format!("patch_{i:05}")
}

/// Writes `patch_NNNNN.png` files and `labels.csv` (`id,label`).
pub fn write_texture_corpus(dir: impl AsRef<Path>, n: usize, size: usize, seed: u64) -> Result<TextureCorpus> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let corpus = texture_corpus(n, size, seed)?;
    corpus
        .images
        .par_iter()
        .enumerate()
        .try_for_each(|(i, img)| img.to_rgb_image().save(dir.join(format!("{}.png", patch_name(i)))))?;
    let mut w = csv::Writer::from_path(dir.join("labels.csv"))?;
    w.write_record(["id", "label"])?;
    for (i, l) in corpus.labels.iter().enumerate() {
        w.write_record([patch_name(i), l.to_string()])?;
    }
    w.flush()?;
    Ok(corpus)
}

/// Exponential survival times whose hazard depends on the class, with
/// uniform censoring. Class 0 carries the higher hazard.
pub fn survival_cohort(labels: &[usize], seed: u64) -> Vec<SurvivalRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    labels
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            let rate = if y == 0 { 1.0 / 12.0 } else { 1.0 / 40.0 };
            let t: f64 = rng.sample(Exp::new(rate).expect("positive rate"));
            let censor = rng.random_range(10.0..80.0);
            SurvivalRecord {
                id: patch_name(i),
                time: t.min(censor).max(1e-3),
                event: t <= censor,
                risk: None,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mean_rgb(img: &ImagePatch) -> [f64; 3] {
        let mut m = [0.0; 3];
        for p in img.pixels.chunks(3) {
            (0..3).for_each(|c| m[c] += p[c] as f64);
        }
        m.map(|v| v / (img.height * img.width) as f64)
    }

    #[test]
    fn deterministic_and_sized() {
        let a = texture_patch(0, 64, 3).unwrap();
        assert_eq!(a, texture_patch(0, 64, 3).unwrap());
        assert_ne!(a, texture_patch(0, 64, 4).unwrap());
        assert_eq!(a.pixels.len(), 64 * 64 * 3);
        assert!(texture_patch(2, 64, 0).is_err());
    }

    #[test]
    fn classes_differ_in_colour_statistics() {
        let c = texture_corpus(20, 64, 9).unwrap();
        let green = |k: usize| -> f64 {
            c.images.iter().zip(&c.labels).filter(|(_, &l)| l == k).map(|(i, _)| mean_rgb(i)[1]).sum::<f64>() / 10.0
        };
        assert!((green(0) - green(1)).abs() > 5.0);
    }

    #[test]
    fn cohort_has_events_and_positive_times() {
        let labels: Vec<usize> = (0..50).map(|i| i % 2).collect();
        let r = survival_cohort(&labels, 1);
        assert!(r.iter().all(|r| r.time > 0.0));
        assert!(r.iter().filter(|r| r.event).count() > 10);
    }
}
