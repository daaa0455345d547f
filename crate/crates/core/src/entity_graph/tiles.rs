use super::{ImagePatch, LabelMap};
use crate::error::{Error, Result};

/// Fill colour for window pixels outside the entity.
pub const BACKGROUND: [u8; 3] = [255, 255, 255];

/// Mean of pixel coordinates, rounded half-up per axis.
fn rounded_centroid(sum_y: u64, sum_x: u64, n: u64) -> (usize, usize) {
    (((2 * sum_y + n) / (2 * n)) as usize, ((2 * sum_x + n) / (2 * n)) as usize)
}

/// Top-left corner of an `a×a` window centred at `c`, shifted inside bounds.
fn window_origin(c: usize, a: usize, extent: usize) -> usize {
    c.saturating_sub(a / 2).min(extent - a)
}

fn check_fits(image: &ImagePatch, labels: &LabelMap, a: usize) -> Result<()> {
    if a == 0 {
        return Err(Error::InvalidParameter("tile side must be positive".into()));
    }
    if image.height != labels.height || image.width != labels.width {
        return Err(Error::InvalidInput("label map does not match image".into()));
    }
    if image.height < a || image.width < a {
        return Err(Error::InvalidInput(format!(
            "{}x{} image smaller than tile side {a}",
            image.height, image.width
        )));
    }
    Ok(())
}

fn paint_window(
    image: &ImagePatch,
    top: usize,
    left: usize,
    a: usize,
    out: &mut Vec<u8>,
    mut member: impl FnMut(usize, usize) -> bool,
) {
    for y in top..top + a {
        for x in left..left + a {
            if member(y, x) {
                out.extend_from_slice(&image.pixel(y, x));
            } else {
                out.extend_from_slice(&BACKGROUND);
            }
        }
    }
}

/// One `a×a×3` tile per region, in label order, with the region's centroid.
pub fn extract_vertex_tiles(image: &ImagePatch, labels: &LabelMap, a: usize) -> Result<(Vec<u8>, Vec<[f32; 2]>)> {
    check_fits(image, labels, a)?;
    let n = labels.n_regions;
    let mut sums = vec![(0u64, 0u64, 0u64); n];
    for y in 0..labels.height {
        for x in 0..labels.width {
            let s = &mut sums[labels.label(y, x) as usize];
            s.0 += y as u64;
            s.1 += x as u64;
            s.2 += 1;
        }
    }
    let mut tiles = Vec::with_capacity(n * a * a * 3);
    let mut centroids = Vec::with_capacity(n);
    for (s, &(sy, sx, cnt)) in sums.iter().enumerate() {
        let (cy, cx) = rounded_centroid(sy, sx, cnt);
        let top = window_origin(cy, a, image.height);
        let left = window_origin(cx, a, image.width);
        paint_window(image, top, left, a, &mut tiles, |y, x| labels.label(y, x) as usize == s);
        centroids.push([(sy as f64 / cnt as f64) as f32, (sx as f64 / cnt as f64) as f32]);
    }
    Ok((tiles, centroids))
}

/// One tile per edge: the boundary between the two regions dilated by a
/// square of the given radius, restricted to the union of both regions.
pub fn extract_edge_tiles(
    image: &ImagePatch,
    labels: &LabelMap,
    edge_index: &[(u32, u32)],
    a: usize,
    dilation_radius: usize,
) -> Result<Vec<u8>> {
    check_fits(image, labels, a)?;
    let (h, w) = (labels.height, labels.width);
    let mut boundary: Vec<Vec<usize>> = vec![Vec::new(); edge_index.len()];
    let mut seen: Vec<u32> = Vec::with_capacity(4);
    for y in 0..h {
        for x in 0..w {
            let u = labels.label(y, x);
            seen.clear();
            let nbrs = [
                (y > 0).then(|| (y - 1, x)),
                (x > 0).then(|| (y, x - 1)),
                (x + 1 < w).then(|| (y, x + 1)),
                (y + 1 < h).then(|| (y + 1, x)),
            ];
            for (yy, xx) in nbrs.into_iter().flatten() {
                let v = labels.label(yy, xx);
                if v != u && !seen.contains(&v) {
                    seen.push(v);
                    let key = (u.min(v), u.max(v));
                    if let Ok(e) = edge_index.binary_search(&key) {
                        boundary[e].push(y * w + x);
                    }
                }
            }
        }
    }

    let r = dilation_radius;
    let mut tiles = Vec::with_capacity(edge_index.len() * a * a * 3);
    let mut mask = vec![false; a * a];
    for (e, &(i, j)) in edge_index.iter().enumerate() {
        let pts = &boundary[e];
        if pts.is_empty() {
            return Err(Error::Invariant(format!("edge ({i}, {j}) has no boundary pixels")));
        }
        let (mut sy, mut sx) = (0u64, 0u64);
        for &p in pts {
            sy += (p / w) as u64;
            sx += (p % w) as u64;
        }
        let (cy, cx) = rounded_centroid(sy, sx, pts.len() as u64);
        let top = window_origin(cy, a, h);
        let left = window_origin(cx, a, w);
        mask.iter_mut().for_each(|m| *m = false);
        for &p in pts {
            let (py, px) = (p / w, p % w);
            let y0 = py.saturating_sub(r).max(top);
            let y1 = (py + r).min(top + a - 1);
            let x0 = px.saturating_sub(r).max(left);
            let x1 = (px + r).min(left + a - 1);
            if y0 > y1 || x0 > x1 {
                continue;
            }
            for yy in y0..=y1 {
                for xx in x0..=x1 {
                    mask[(yy - top) * a + (xx - left)] = true;
                }
            }
        }
        paint_window(image, top, left, a, &mut tiles, |y, x| {
            let l = labels.label(y, x);
            (l == i || l == j) && mask[(y - top) * a + (x - left)]
        });
    }
    Ok(tiles)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::entity_graph::build_adjacency;

    fn halves(h: usize, w: usize) -> (ImagePatch, LabelMap) {
        let mut px = Vec::new();
        let mut lab = Vec::new();
        for _ in 0..h {
            for x in 0..w {
                px.extend_from_slice(if x < w / 2 { &[200, 30, 30] } else { &[30, 30, 200] });
                lab.push(u32::from(x >= w / 2));
            }
        }
        (ImagePatch::new(h, w, px).unwrap(), LabelMap::new(h, w, lab).unwrap())
    }

    fn non_background(tile: &[u8]) -> usize {
        tile.chunks(3).filter(|p| *p != BACKGROUND).count()
    }

    /// Members of the dilated boundary band computed over the whole image.
    fn band_oracle(lm: &LabelMap, r: usize) -> Vec<bool> {
        let (h, w) = (lm.height, lm.width);
        let is_boundary = |y: usize, x: usize| {
            let l = lm.label(y, x);
            (y > 0 && lm.label(y - 1, x) != l)
                || (y + 1 < h && lm.label(y + 1, x) != l)
                || (x > 0 && lm.label(y, x - 1) != l)
                || (x + 1 < w && lm.label(y, x + 1) != l)
        };
        let mut out = vec![false; h * w];
        for y in 0..h {
            for x in 0..w {
                for by in 0..h {
                    for bx in 0..w {
                        if is_boundary(by, bx) && by.abs_diff(y) <= r && bx.abs_diff(x) <= r {
                            out[y * w + x] = true;
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn full_window_has_no_background() {
        let img = ImagePatch::new(4, 4, [10u8, 20, 30].repeat(16)).unwrap();
        let lm = LabelMap::new(4, 4, vec![0; 16]).unwrap();
        let (tiles, c) = extract_vertex_tiles(&img, &lm, 4).unwrap();
        assert_eq!(tiles, img.pixels);
        assert_eq!(c, vec![[1.5, 1.5]]);
    }

    #[test]
    fn corner_pixel_window_shifts_inside() {
        let img = ImagePatch::new(6, 6, [0u8, 0, 0].repeat(36)).unwrap();
        let mut lab = vec![1u32; 36];
        lab[0] = 0;
        let lm = LabelMap::new(6, 6, lab).unwrap();
        let (tiles, _) = extract_vertex_tiles(&img, &lm, 4).unwrap();
        let t0 = &tiles[..4 * 4 * 3];
        assert_eq!(non_background(t0), 1);
        assert_eq!(&t0[..3], &[0, 0, 0]);
    }

    #[test]
    fn half_plane_band_width() {
        let (img, lm) = halves(16, 16);
        let (edges, _) = build_adjacency(&lm);
        for r in [0usize, 1, 2] {
            let tiles = extract_edge_tiles(&img, &lm, &edges, 16, r).unwrap();
            let oracle = band_oracle(&lm, r);
            let got: Vec<bool> = tiles.chunks(3).map(|p| p != BACKGROUND).collect();
            assert_eq!(got, oracle, "radius {r}");
            assert_eq!(non_background(&tiles), 16 * (2 * r + 2));
        }
    }

    #[test]
    fn one_tile_per_edge() {
        let mut lab = vec![0u32; 64];
        for y in 0..8 {
            for x in 0..8 {
                lab[y * 8 + x] = ((y / 4) * 2 + x / 4) as u32;
            }
        }
        let lm = LabelMap::new(8, 8, lab).unwrap();
        let img = ImagePatch::new(8, 8, [5u8, 6, 7].repeat(64)).unwrap();
        let (edges, _) = build_adjacency(&lm);
        let tiles = extract_edge_tiles(&img, &lm, &edges, 4, 1).unwrap();
        assert_eq!(tiles.len(), edges.len() * 4 * 4 * 3);
    }

    #[test]
    fn image_smaller_than_tile_is_rejected() {
        let (img, lm) = halves(4, 4);
        assert!(extract_vertex_tiles(&img, &lm, 8).is_err());
    }
}
