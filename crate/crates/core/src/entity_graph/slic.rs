//! Deterministic SLIC superpixels in RGB space.
//!
//! Every floating-point step is `f32` and evaluated in a fixed order so that
//! an independent implementation following the same recipe reproduces the
//! label map bit for bit:
//!
//! * one 3×3 box blur (border pixels average their in-bounds neighbours)
//!   with colours scaled to `[0, 1]`;
//! * an `nx × ny` grid of cell centres with `nx = ceil(sqrt(n·w/h))` and
//!   `ny = round(n/nx)`; each centre may move to a strictly lower-gradient
//!   pixel of its 3×3 neighbourhood;
//! * `D = sqrt(d_rgb² + (d_xy² / S²)·m²)` with `S = floor(sqrt(h·w/n))`,
//!   candidates visited in label order, strict `<` (lower label wins ties);
//! * centre updates accumulate pixels in row-major order;
//! * 4-connected components smaller than `S²/4` merge into the neighbour
//!   sharing the most boundary pixel pairs (ties to the lowest id), then
//!   labels are renumbered by first row-major occurrence.

use super::{ImagePatch, LabelMap};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
struct Center {
    rgb: [f32; 3],
    y: f32,
    x: f32,
}

/// Blurred colours scaled to `[0, 1]`.
pub(crate) fn box_blur(image: &ImagePatch) -> Vec<[f32; 3]> {
    let (h, w) = (image.height, image.width);
    let mut out = vec![[0f32; 3]; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut s = [0f32; 3];
            let mut n = 0u32;
            for yy in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                for xx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                    let p = image.pixel(yy, xx);
                    for c in 0..3 {
                        s[c] += p[c] as f32;
                    }
                    n += 1;
                }
            }
            let nf = n as f32 * 255.0;
            out[y * w + x] = [s[0] / nf, s[1] / nf, s[2] / nf];
        }
    }
    out
}

fn sq_diff(a: &[f32; 3], b: &[f32; 3]) -> f32 {
    let d0 = a[0] - b[0];
    let d1 = a[1] - b[1];
    let d2 = a[2] - b[2];
    d0 * d0 + d1 * d1 + d2 * d2
}

fn gradient(img: &[[f32; 3]], h: usize, w: usize, y: usize, x: usize) -> f32 {
    let p = &img[y * w + x];
    let mut g = 0f32;
    if x + 1 < w {
        g += sq_diff(&img[y * w + x + 1], p);
    }
    if y + 1 < h {
        g += sq_diff(&img[(y + 1) * w + x], p);
    }
    g
}

/// Largest `s ≥ 1` with `s²·n ≤ h·w`.
pub(crate) fn grid_step(h: usize, w: usize, n: usize) -> usize {
    let area = (h * w) as u64;
    let n = n as u64;
    let mut s = ((area / n) as f64).sqrt() as u64;
    while (s + 1) * (s + 1) * n <= area {
        s += 1;
    }
    while s > 1 && s * s * n > area {
        s -= 1;
    }
    s.max(1) as usize
}

pub(crate) fn grid_shape(h: usize, w: usize, n: usize) -> (usize, usize) {
    let nx = ((n as f64 * w as f64 / h as f64).sqrt().ceil() as usize).clamp(1, w);
    let ny = ((n as f64 / nx as f64).round() as usize).clamp(1, h);
    (ny, nx)
}

fn initial_centers(img: &[[f32; 3]], h: usize, w: usize, n: usize) -> (Vec<Center>, usize, usize) {
    let (ny, nx) = grid_shape(h, w, n);
    let mut centers = Vec::with_capacity(ny * nx);
    for i in 0..ny {
        for j in 0..nx {
            let ay = (2 * i + 1) * h / (2 * ny);
            let ax = (2 * j + 1) * w / (2 * nx);
            let cy = ((2 * i + 1) * h - ny) as f32 / (2 * ny) as f32;
            let cx = ((2 * j + 1) * w - nx) as f32 / (2 * nx) as f32;
            let mut best = gradient(img, h, w, ay, ax);
            let mut moved: Option<(usize, usize)> = None;
            for yy in ay.saturating_sub(1)..=(ay + 1).min(h - 1) {
                for xx in ax.saturating_sub(1)..=(ax + 1).min(w - 1) {
                    let g = gradient(img, h, w, yy, xx);
                    if g < best {
                        best = g;
                        moved = Some((yy, xx));
                    }
                }
            }
            let c = match moved {
                Some((yy, xx)) => Center {
                    rgb: img[yy * w + xx],
                    y: yy as f32,
                    x: xx as f32,
                },
                None => Center {
                    rgb: img[ay * w + ax],
                    y: cy,
                    x: cx,
                },
            };
            centers.push(c);
        }
    }
    let cell = h.div_ceil(ny).max(w.div_ceil(nx));
    (centers, ny * nx, cell)
}

pub fn segment_superpixels(
    image: &ImagePatch,
    n_regions: usize,
    compactness: f32,
    iterations: usize,
) -> Result<LabelMap> {
    if n_regions < 1 {
        return Err(Error::InvalidParameter("n_regions must be at least 1".into()));
    }
    if image.height == 0 || image.width == 0 {
        return Err(Error::InvalidInput("empty image".into()));
    }
    let (h, w) = (image.height, image.width);
    if n_regions > h * w {
        return Err(Error::InvalidParameter(format!(
            "n_regions {n_regions} exceeds pixel count {}",
            h * w
        )));
    }
    if !(compactness.is_finite() && compactness > 0.0) {
        return Err(Error::InvalidParameter("compactness must be positive".into()));
    }
    if iterations < 1 {
        return Err(Error::InvalidParameter("iterations must be positive".into()));
    }

    let img = box_blur(image);
    let step = grid_step(h, w, n_regions);
    let (mut centers, k, cell) = initial_centers(&img, h, w, n_regions);
    let radius = step.max(cell) as f32;
    let s2 = (step * step) as f32;
    let m2 = compactness * compactness;

    let mut labels = vec![0u32; h * w];
    let mut dist = vec![f32::INFINITY; h * w];
    for _ in 0..iterations {
        dist.iter_mut().for_each(|d| *d = f32::INFINITY);
        for (ki, c) in centers.iter().enumerate() {
            let y0 = (c.y - radius).floor().max(0.0) as usize;
            let y1 = ((c.y + radius).ceil() as usize).min(h - 1);
            let x0 = (c.x - radius).floor().max(0.0) as usize;
            let x1 = ((c.x + radius).ceil() as usize).min(w - 1);
            for y in y0..=y1 {
                let dy = y as f32 - c.y;
                for x in x0..=x1 {
                    let p = y * w + x;
                    let dx = x as f32 - c.x;
                    let drgb = sq_diff(&img[p], &c.rgb);
                    let dxy = dy * dy + dx * dx;
                    let d = (drgb + (dxy / s2) * m2).sqrt();
                    if d < dist[p] {
                        dist[p] = d;
                        labels[p] = ki as u32;
                    }
                }
            }
        }
        let mut sums = vec![[0f32; 5]; k];
        let mut counts = vec![0u32; k];
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                let l = labels[p] as usize;
                let s = &mut sums[l];
                s[0] += img[p][0];
                s[1] += img[p][1];
                s[2] += img[p][2];
                s[3] += y as f32;
                s[4] += x as f32;
                counts[l] += 1;
            }
        }
        for (c, (s, &n)) in centers.iter_mut().zip(sums.iter().zip(&counts)) {
            if n == 0 {
                continue;
            }
            let nf = n as f32;
            c.rgb = [s[0] / nf, s[1] / nf, s[2] / nf];
            c.y = s[3] / nf;
            c.x = s[4] / nf;
        }
    }

    let min_size = step * step / 4;
    let labels = enforce_connectivity(&labels, h, w, min_size);
    let n = labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0);
    Ok(LabelMap {
        height: h,
        width: w,
        labels,
        n_regions: n,
    })
}

fn neighbors(p: usize, h: usize, w: usize) -> impl Iterator<Item = usize> {
    let (y, x) = (p / w, p % w);
    let up = (y > 0).then(|| p - w);
    let left = (x > 0).then(|| p - 1);
    let right = (x + 1 < w).then(|| p + 1);
    let down = (y + 1 < h).then(|| p + w);
    [up, left, right, down].into_iter().flatten()
}

/// Splits labels into 4-connected components numbered by first row-major
/// occurrence.
pub(crate) fn components(labels: &[u32], h: usize, w: usize) -> (Vec<usize>, usize) {
    let mut comp = vec![usize::MAX; h * w];
    let mut n = 0;
    let mut stack = Vec::new();
    for start in 0..h * w {
        if comp[start] != usize::MAX {
            continue;
        }
        comp[start] = n;
        stack.push(start);
        while let Some(p) = stack.pop() {
            for q in neighbors(p, h, w) {
                if comp[q] == usize::MAX && labels[q] == labels[start] {
                    comp[q] = n;
                    stack.push(q);
                }
            }
        }
        n += 1;
    }
    (comp, n)
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

fn enforce_connectivity(labels: &[u32], h: usize, w: usize, min_size: usize) -> Vec<u32> {
    let (comp, n) = components(labels, h, w);
    let mut pixels: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (p, &c) in comp.iter().enumerate() {
        pixels[c].push(p);
    }
    let mut parent: Vec<usize> = (0..n).collect();
    let mut counts: Vec<usize> = vec![0; n];
    for c in 0..n {
        if find(&mut parent, c) != c || pixels[c].len() >= min_size {
            continue;
        }
        let mut touched = Vec::new();
        for &p in &pixels[c] {
            for q in neighbors(p, h, w) {
                let r = find(&mut parent, comp[q]);
                if r != c {
                    if counts[r] == 0 {
                        touched.push(r);
                    }
                    counts[r] += 1;
                }
            }
        }
        let mut target: Option<usize> = None;
        for &r in &touched {
            target = match target {
                Some(t) if counts[t] > counts[r] || (counts[t] == counts[r] && t < r) => Some(t),
                _ => Some(r),
            };
        }
        for &r in &touched {
            counts[r] = 0;
        }
        if let Some(t) = target {
            parent[c] = t;
            let moved = std::mem::take(&mut pixels[c]);
            pixels[t].extend(moved);
        }
    }
    let mut remap = vec![u32::MAX; n];
    let mut next = 0u32;
    let mut out = vec![0u32; h * w];
    for p in 0..h * w {
        let r = find(&mut parent, comp[p]);
        if remap[r] == u32::MAX {
            remap[r] = next;
            next += 1;
        }
        out[p] = remap[r];
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant(h: usize, w: usize, rgb: [u8; 3]) -> ImagePatch {
        ImagePatch::new(h, w, rgb.repeat(h * w)).unwrap()
    }

    #[test]
    fn constant_image_keeps_initial_grid() {
        let lm = segment_superpixels(&constant(8, 8, [200, 100, 50]), 4, 10.0, 10).unwrap();
        assert_eq!(lm.n_regions, 4);
        for y in 0..8 {
            for x in 0..8 {
                let expect = (y / 4) * 2 + x / 4;
                assert_eq!(lm.label(y, x) as usize, expect, "pixel ({y},{x})");
            }
        }
    }

    #[test]
    fn half_planes_separate() {
        let mut px = Vec::new();
        for _y in 0..16 {
            for x in 0..16 {
                px.extend_from_slice(if x < 8 { &[220, 40, 40] } else { &[40, 40, 220] });
            }
        }
        let img = ImagePatch::new(16, 16, px).unwrap();
        let lm = segment_superpixels(&img, 2, 10.0, 10).unwrap();
        assert_eq!(lm.n_regions, 2);
        for y in 0..16 {
            for x in 0..16 {
                assert_eq!(lm.label(y, x), u32::from(x >= 8));
            }
        }
    }

    #[test]
    fn parameter_errors() {
        let img = constant(4, 4, [0, 0, 0]);
        assert!(matches!(segment_superpixels(&img, 0, 10.0, 5), Err(Error::InvalidParameter(_))));
        assert!(matches!(segment_superpixels(&img, 17, 10.0, 5), Err(Error::InvalidParameter(_))));
        let empty = ImagePatch::new(0, 0, vec![]).unwrap();
        assert!(matches!(segment_superpixels(&empty, 1, 10.0, 5), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn grid_step_is_integer_floor_sqrt() {
        assert_eq!(grid_step(8, 8, 4), 4);
        assert_eq!(grid_step(16, 16, 2), 11);
        assert_eq!(grid_step(512, 512, 500), 22);
        assert_eq!(grid_step(3, 3, 9), 1);
    }
}
