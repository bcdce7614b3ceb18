//! Watermark application and the procedural host/watermark generators.
//!
//! A watermark is blended over a host with the alpha-over model
//! `out = (1 - t·a)·host + t·a·color`, where `a` is the asset's alpha
//! resampled to the placement size and `t` the global transparency.

use std::path::Path;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::imaging::load_image;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Side length of the square host images used by all experiments.
pub const HOST_SIZE: usize = 64;
/// Resolution at which procedural watermark assets are drawn.
pub const ASSET_SIZE: usize = 32;
/// Default rendered watermark side (a 64-pixel analogue of 80×80 on 256).
pub const DEFAULT_WATERMARK_SIZE: usize = 20;
pub const DEFAULT_TRANSPARENCY: f32 = 0.55;
/// Watermark sides for the size sweep (60..100 on 256 scaled to 64).
pub const SIZE_GRID: [usize; 5] = [15, 18, 20, 23, 25];
pub const TRANSPARENCY_GRID: [f32; 5] = [0.45, 0.50, 0.55, 0.60, 0.65];
/// Mask values above this count as "watermarked".
pub const MASK_THRESHOLD: f32 = 0.01;

/// Colour pattern plus per-pixel alpha.
#[derive(Clone, Debug, PartialEq)]
pub struct WatermarkAsset {
    color: Tensor,
    alpha: Tensor,
}

impl WatermarkAsset {
    pub fn new(color: Tensor, alpha: Tensor) -> Result<Self> {
        let [n, c, h, w] = color.shape();
        if n != 1 || c != 3 || h == 0 || w == 0 {
            return Err(Error::InvalidArgument(format!(
                "watermark colour must be 1x3xHxW, got {:?}",
                color.shape()
            )));
        }
        alpha.expect_shape("watermark alpha", [1, 1, h, w])?;
        if alpha.data().iter().any(|&a| !(0.0..=1.0).contains(&a)) {
            return Err(Error::InvalidArgument("watermark alpha outside [0, 1]".into()));
        }
        if !alpha.data().iter().any(|&a| a > 0.0) {
            return Err(Error::InvalidArgument("watermark alpha is empty".into()));
        }
        Ok(Self { color, alpha })
    }

    /// Loads an RGBA PNG; its alpha channel becomes the watermark alpha.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let img = load_image(path.as_ref())?;
        let alpha = img.alpha.ok_or_else(|| Error::UnsupportedImage {
            path: path.as_ref().to_path_buf(),
            reason: "watermark assets need an alpha channel (RGBA)".into(),
        })?;
        Self::new(img.rgb, alpha)
    }

    pub fn color(&self) -> &Tensor {
        &self.color
    }

    pub fn alpha(&self) -> &Tensor {
        &self.alpha
    }

    pub fn height(&self) -> usize {
        self.alpha.height()
    }

    pub fn width(&self) -> usize {
        self.alpha.width()
    }
}

/// Where and how strongly a watermark is applied.
///
/// The rendered region covers rows `q..q+u` and columns `p..p+v`.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Placement {
    pub p: usize,
    pub q: usize,
    pub u: usize,
    pub v: usize,
    pub alpha: f32,
}

impl Placement {
    /// A `size`×`size` watermark centred on an `h`×`w` host.
    pub fn centered(h: usize, w: usize, size: usize, alpha: f32) -> Self {
        Self {
            p: w.saturating_sub(size) / 2,
            q: h.saturating_sub(size) / 2,
            u: size,
            v: size,
            alpha,
        }
    }

    fn check(&self, h: usize, w: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidArgument(format!(
                "transparency {} outside [0, 1]",
                self.alpha
            )));
        }
        if self.u == 0 || self.v == 0 || self.q + self.u > h || self.p + self.v > w {
            return Err(Error::OutOfBounds {
                rows: (self.q, self.q + self.u),
                cols: (self.p, self.p + self.v),
                height: h,
                width: w,
            });
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct CompositeResult {
    pub watermarked: Tensor,
    /// Effective blend weight `t·a` per pixel (1×1×H×W), zero outside the region.
    pub gt_mask: Tensor,
}

/// Per-axis resampling taps: (first index, second index, weight of second).
fn axis_taps(src: usize, dst: usize) -> Vec<(usize, usize, f32)> {
    (0..dst)
        .map(|i| {
            if src == 1 {
                return (0, 0, 0.0);
            }
            let pos = i as f64 * (src - 1) as f64 / (dst - 1) as f64;
            let i0 = (pos.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, (pos - i0 as f64) as f32)
        })
        .collect()
}

fn resample_rows(t: &Tensor, dst_h: usize) -> Tensor {
    let [n, c, h, w] = t.shape();
    if dst_h == 1 {
        return Tensor::from_fn([n, c, 1, w], |ni, ci, _, x| {
            (0..h).map(|y| t.get(ni, ci, y, x) as f64).sum::<f64>() as f32 / h as f32
        });
    }
    let taps = axis_taps(h, dst_h);
    Tensor::from_fn([n, c, dst_h, w], |ni, ci, y, x| {
        let (i0, i1, f) = taps[y];
        t.get(ni, ci, i0, x) * (1.0 - f) + t.get(ni, ci, i1, x) * f
    })
}

fn resample_cols(t: &Tensor, dst_w: usize) -> Tensor {
    let [n, c, h, w] = t.shape();
    if dst_w == 1 {
        return Tensor::from_fn([n, c, h, 1], |ni, ci, y, _| {
            (0..w).map(|x| t.get(ni, ci, y, x) as f64).sum::<f64>() as f32 / w as f32
        });
    }
    let taps = axis_taps(w, dst_w);
    Tensor::from_fn([n, c, h, dst_w], |ni, ci, y, x| {
        let (i0, i1, f) = taps[x];
        t.get(ni, ci, y, i0) * (1.0 - f) + t.get(ni, ci, y, i1) * f
    })
}

/// Bilinear resize (align-corners) of colour and alpha to `u` rows × `v` columns.
pub fn resize_bilinear(asset: &WatermarkAsset, u: usize, v: usize) -> Result<WatermarkAsset> {
    if u == 0 || v == 0 {
        return Err(Error::InvalidArgument(format!("resize target {u}x{v} is empty")));
    }
    if (u, v) == (asset.height(), asset.width()) {
        return Ok(asset.clone());
    }
    let resize = |t: &Tensor| resample_cols(&resample_rows(t, u), v);
    Ok(WatermarkAsset {
        color: resize(&asset.color),
        alpha: resize(&asset.alpha).clamp(0.0, 1.0),
    })
}

/// Applies `asset` to `host` (1×3×H×W) at `placement`.
pub fn composite(host: &Tensor, asset: &WatermarkAsset, placement: &Placement) -> Result<CompositeResult> {
    let [n, c, h, w] = host.shape();
    if n != 1 || c != 3 {
        return Err(Error::InvalidArgument(format!("host must be 1x3xHxW, got {:?}", host.shape())));
    }
    placement.check(h, w)?;
    let Placement { p, q, u, v, alpha } = *placement;
    let rendered = resize_bilinear(asset, u, v)?;

    let mut out = host.clone();
    let mut mask = Tensor::zeros([1, 1, h, w]);
    for y in 0..u {
        for x in 0..v {
            let m = alpha * rendered.alpha.get(0, 0, y, x);
            mask.set(0, 0, q + y, p + x, m);
            for ch in 0..3 {
                let base = host.get(0, ch, q + y, p + x);
                let mark = rendered.color.get(0, ch, y, x);
                out.set(0, ch, q + y, p + x, (1.0 - m) * base + m * mark);
            }
        }
    }
    Ok(CompositeResult {
        watermarked: out,
        gt_mask: mask,
    })
}

/// Binary version of a continuous mask (1 where `mask > MASK_THRESHOLD`).
pub fn binarize_mask(mask: &Tensor) -> Tensor {
    mask.map(|m| if m > MASK_THRESHOLD { 1.0 } else { 0.0 })
}

/// Draws a placement uniformly over sizes in `size_range` (inclusive),
/// positions that keep it inside the host, and transparency in `alpha_range`.
pub fn sample_placement(
    rng: &mut Rng,
    host_dims: (usize, usize),
    size_range: (usize, usize),
    alpha_range: (f32, f32),
) -> Result<Placement> {
    let (h, w) = host_dims;
    let (smin, smax) = size_range;
    let (amin, amax) = alpha_range;
    if smin == 0 || smin > smax || smax > h.min(w) {
        return Err(Error::InvalidArgument(format!(
            "size range {smin}..={smax} invalid for a {h}x{w} host"
        )));
    }
    if !(0.0..=1.0).contains(&amin) || !(0.0..=1.0).contains(&amax) || amin > amax {
        return Err(Error::InvalidArgument(format!("transparency range {amin}..={amax} invalid")));
    }
    let u = rng.gen_range(smin..=smax);
    let v = rng.gen_range(smin..=smax);
    let q = rng.gen_range(0..=h - u);
    let p = rng.gen_range(0..=w - v);
    let alpha = if amin == amax { amin } else { rng.gen_range(amin..=amax) };
    Ok(Placement { p, q, u, v, alpha })
}

// ---- procedural shapes -------------------------------------------------

/// Signed distance (negative inside) from a point to a 2-D shape.
#[derive(Clone, Debug)]
enum Shape2d {
    Rect { cx: f32, cy: f32, hx: f32, hy: f32 },
    Ellipse { cx: f32, cy: f32, rx: f32, ry: f32 },
    Stroke { a: (f32, f32), b: (f32, f32), half_width: f32 },
    /// Convex polygon with counter-clockwise vertices.
    Polygon(Vec<(f32, f32)>),
}

impl Shape2d {
    fn distance(&self, x: f32, y: f32) -> f32 {
        match self {
            Shape2d::Rect { cx, cy, hx, hy } => {
                let dx = (x - cx).abs() - hx;
                let dy = (y - cy).abs() - hy;
                let outside = (dx.max(0.0).powi(2) + dy.max(0.0).powi(2)).sqrt();
                outside + dx.max(dy).min(0.0)
            }
            Shape2d::Ellipse { cx, cy, rx, ry } => {
                let nx = (x - cx) / rx;
                let ny = (y - cy) / ry;
                ((nx * nx + ny * ny).sqrt() - 1.0) * rx.min(*ry)
            }
            Shape2d::Stroke { a, b, half_width } => {
                let (px, py) = (x - a.0, y - a.1);
                let (bx, by) = (b.0 - a.0, b.1 - a.1);
                let len2 = bx * bx + by * by;
                let t = if len2 > 0.0 { ((px * bx + py * by) / len2).clamp(0.0, 1.0) } else { 0.0 };
                let (dx, dy) = (px - t * bx, py - t * by);
                (dx * dx + dy * dy).sqrt() - half_width
            }
            Shape2d::Polygon(pts) => {
                let mut d = f32::NEG_INFINITY;
                for i in 0..pts.len() {
                    let (x0, y0) = pts[i];
                    let (x1, y1) = pts[(i + 1) % pts.len()];
                    let (ex, ey) = (x1 - x0, y1 - y0);
                    let len = (ex * ex + ey * ey).sqrt().max(1e-6);
                    // Outward normal of a CCW edge in image coordinates (y down).
                    let dist = ((x - x0) * ey - (y - y0) * ex) / len;
                    d = d.max(-dist);
                }
                d
            }
        }
    }

    /// Pixel coverage with a one-pixel linear feather across the edge.
    fn coverage(&self, x: f32, y: f32) -> f32 {
        (0.5 - self.distance(x, y)).clamp(0.0, 1.0)
    }
}

fn random_color(rng: &mut Rng) -> [f32; 3] {
    [rng.gen(), rng.gen(), rng.gen()]
}

/// Fully saturated, full-value colour with a random hue.
fn saturated_color(rng: &mut Rng) -> [f32; 3] {
    let hue: f32 = rng.gen_range(0.0..6.0);
    let f = hue.fract();
    match hue as u32 {
        0 => [1.0, f, 0.0],
        1 => [1.0 - f, 1.0, 0.0],
        2 => [0.0, 1.0, f],
        3 => [0.0, 1.0 - f, 1.0],
        4 => [f, 0.0, 1.0],
        _ => [1.0, 0.0, 1.0 - f],
    }
}

/// A smooth two-colour gradient overlaid with 3–8 anti-aliased rectangles
/// and ellipses.
pub fn synth_host(rng: &mut Rng, h: usize, w: usize) -> Tensor {
    let c0 = random_color(rng);
    let c1 = random_color(rng);
    let angle: f32 = rng.gen_range(0.0..std::f32::consts::TAU);
    let (dx, dy) = (angle.cos(), angle.sin());
    // Project corners to normalise the gradient parameter onto [0, 1].
    let corners = [(0.0, 0.0), (w as f32, 0.0), (0.0, h as f32), (w as f32, h as f32)];
    let proj: Vec<f32> = corners.iter().map(|(x, y)| x * dx + y * dy).collect();
    let lo = proj.iter().cloned().fold(f32::INFINITY, f32::min);
    let hi = proj.iter().cloned().fold(f32::NEG_INFINITY, f32::max);

    let mut img = Tensor::from_fn([1, 3, h, w], |_, c, y, x| {
        let t = ((x as f32 + 0.5) * dx + (y as f32 + 0.5) * dy - lo) / (hi - lo);
        c0[c] * (1.0 - t) + c1[c] * t
    });

    let n_shapes = rng.gen_range(3..=8);
    for _ in 0..n_shapes {
        let color = random_color(rng);
        let cx = rng.gen_range(0.0..w as f32);
        let cy = rng.gen_range(0.0..h as f32);
        let sx = rng.gen_range(0.05..0.25) * w as f32;
        let sy = rng.gen_range(0.05..0.25) * h as f32;
        let shape = if rng.gen_bool(0.5) {
            Shape2d::Rect { cx, cy, hx: sx, hy: sy }
        } else {
            Shape2d::Ellipse { cx, cy, rx: sx, ry: sy }
        };
        paint(&mut img, &shape, color);
    }
    img
}

fn paint(img: &mut Tensor, shape: &Shape2d, color: [f32; 3]) {
    let (h, w) = (img.height(), img.width());
    for y in 0..h {
        for x in 0..w {
            let cov = shape.coverage(x as f32 + 0.5, y as f32 + 0.5);
            if cov <= 0.0 {
                continue;
            }
            for (c, &col) in color.iter().enumerate() {
                let v = img.get(0, c, y, x);
                img.set(0, c, y, x, (1.0 - cov) * v + cov * col);
            }
        }
    }
}

/// A glyph-like watermark: 2–6 strokes or filled polygons laid out on a grid,
/// all in one saturated colour.
pub fn synth_watermark(rng: &mut Rng, h: usize, w: usize) -> WatermarkAsset {
    let color = saturated_color(rng);
    let n_glyphs: usize = rng.gen_range(2..=6);
    let cols = (n_glyphs as f32).sqrt().ceil() as usize;
    let rows = n_glyphs.div_ceil(cols);
    let cell_w = w as f32 / cols as f32;
    let cell_h = h as f32 / rows as f32;

    let mut shapes = Vec::new();
    for g in 0..n_glyphs {
        let (x0, y0) = ((g % cols) as f32 * cell_w, (g / cols) as f32 * cell_h);
        let pt = |rng: &mut Rng| {
            (
                x0 + rng.gen_range(0.15..0.85) * cell_w,
                y0 + rng.gen_range(0.15..0.85) * cell_h,
            )
        };
        let stroke_w = rng.gen_range(0.08..0.16) * cell_w.min(cell_h);
        match rng.gen_range(0..3) {
            0 => {
                // One or two connected strokes.
                let a = pt(rng);
                let b = pt(rng);
                shapes.push(Shape2d::Stroke { a, b, half_width: stroke_w });
                if rng.gen_bool(0.5) {
                    let c = pt(rng);
                    shapes.push(Shape2d::Stroke { a: b, b: c, half_width: stroke_w });
                }
            }
            1 => {
                let mut tri = vec![pt(rng), pt(rng), pt(rng)];
                orient_ccw(&mut tri);
                shapes.push(Shape2d::Polygon(tri));
            }
            _ => {
                // Jittered inset rectangle, convex by construction.
                let j = |rng: &mut Rng| rng.gen_range(-0.08..0.08);
                let (l, r) = (0.2, 0.8);
                let mut quad = vec![
                    (x0 + (l + j(rng)) * cell_w, y0 + (l + j(rng)) * cell_h),
                    (x0 + (l + j(rng)) * cell_w, y0 + (r + j(rng)) * cell_h),
                    (x0 + (r + j(rng)) * cell_w, y0 + (r + j(rng)) * cell_h),
                    (x0 + (r + j(rng)) * cell_w, y0 + (l + j(rng)) * cell_h),
                ];
                orient_ccw(&mut quad);
                shapes.push(Shape2d::Polygon(quad));
            }
        }
    }

    let alpha = Tensor::from_fn([1, 1, h, w], |_, _, y, x| {
        let (px, py) = (x as f32 + 0.5, y as f32 + 0.5);
        shapes.iter().map(|s| s.coverage(px, py)).fold(0.0, f32::max)
    });
    let color = Tensor::from_fn([1, 3, h, w], |_, c, _, _| color[c]);
    if alpha.data().iter().any(|&a| a > 0.0) {
        WatermarkAsset { color, alpha }
    } else {
        // Degenerate draw (possible only for tiny assets): fall back to a centre dot.
        let mut alpha = alpha;
        alpha.set(0, 0, h / 2, w / 2, 1.0);
        WatermarkAsset { color, alpha }
    }
}

/// Orders polygon vertices so that `Shape2d::Polygon` sees them counter-clockwise
/// on screen (negative shoelace sum with y pointing down).
fn orient_ccw(pts: &mut [(f32, f32)]) {
    let area: f32 = (0..pts.len())
        .map(|i| {
            let (x0, y0) = pts[i];
            let (x1, y1) = pts[(i + 1) % pts.len()];
            x0 * y1 - x1 * y0
        })
        .sum();
    if area > 0.0 {
        pts.reverse();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn asset_from(color: f32, alpha: Vec<f32>, h: usize, w: usize) -> WatermarkAsset {
        WatermarkAsset::new(
            Tensor::full([1, 3, h, w], color),
            Tensor::new([1, 1, h, w], alpha).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn resize_to_same_size_is_identity() {
        let mut rng = seeded(3);
        let a = synth_watermark(&mut rng, 9, 7);
        assert_eq!(resize_bilinear(&a, 9, 7).unwrap(), a);
    }

    #[test]
    fn resize_midpoint_column() {
        let a = asset_from(1.0, vec![0.0, 1.0, 0.0, 1.0], 2, 2);
        let r = resize_bilinear(&a, 2, 3).unwrap();
        assert_eq!(r.alpha().data(), &[0.0, 0.5, 1.0, 0.0, 0.5, 1.0]);
    }

    #[test]
    fn resize_to_single_pixel_takes_mean() {
        let a = asset_from(1.0, vec![0.0, 1.0, 0.5, 0.5], 2, 2);
        let r = resize_bilinear(&a, 1, 1).unwrap();
        assert!((r.alpha().item() - 0.5).abs() < 1e-7);
    }

    /// Direct (non-separable) bilinear interpolation of one plane.
    fn reference_bilinear(src: &Tensor, c: usize, dst_h: usize, dst_w: usize) -> Vec<f32> {
        let (h, w) = (src.height(), src.width());
        let mut out = Vec::new();
        for y in 0..dst_h {
            for x in 0..dst_w {
                let sy = y as f64 * (h - 1) as f64 / (dst_h - 1) as f64;
                let sx = x as f64 * (w - 1) as f64 / (dst_w - 1) as f64;
                let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
                let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
                let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
                let g = |yy, xx| src.get(0, c, yy, xx) as f64;
                let v = g(y0, x0) * (1.0 - fy) * (1.0 - fx)
                    + g(y0, x1) * (1.0 - fy) * fx
                    + g(y1, x0) * fy * (1.0 - fx)
                    + g(y1, x1) * fy * fx;
                out.push(v as f32);
            }
        }
        out
    }

    #[test]
    fn resize_down_and_up_matches_reference() {
        let mut rng = seeded(11);
        let color = Tensor::from_fn([1, 3, 16, 16], |_, _, _, _| rng.gen());
        let alpha = Tensor::from_fn([1, 1, 16, 16], |_, _, _, _| rng.gen());
        let a = WatermarkAsset::new(color, alpha).unwrap();
        let down = resize_bilinear(&a, 8, 8).unwrap();
        let up = resize_bilinear(&down, 16, 16).unwrap();
        for c in 0..3 {
            let want_down = reference_bilinear(a.color(), c, 8, 8);
            let want_up = reference_bilinear(down.color(), c, 16, 16);
            let got_down = &down.color().data()[c * 64..(c + 1) * 64];
            let got_up = &up.color().data()[c * 256..(c + 1) * 256];
            for (g, r) in got_down.iter().zip(&want_down).chain(got_up.iter().zip(&want_up)) {
                assert!((g - r).abs() < 1e-5, "{g} vs {r}");
            }
        }
        // Round trip stays within the local range of each source neighbourhood.
        for y in 0..16usize {
            for x in 0..16usize {
                let (y0, y1) = (y.saturating_sub(2), (y + 2).min(15));
                let (x0, x1) = (x.saturating_sub(2), (x + 2).min(15));
                let mut lo = f32::INFINITY;
                let mut hi = f32::NEG_INFINITY;
                for yy in y0..=y1 {
                    for xx in x0..=x1 {
                        let v = a.alpha().get(0, 0, yy, xx);
                        lo = lo.min(v);
                        hi = hi.max(v);
                    }
                }
                let v = up.alpha().get(0, 0, y, x);
                assert!(v >= lo - 1e-5 && v <= hi + 1e-5);
            }
        }
    }

    #[test]
    fn zero_transparency_leaves_host() {
        let mut rng = seeded(5);
        let host = synth_host(&mut rng, 32, 32);
        let wm = synth_watermark(&mut rng, 16, 16);
        let r = composite(&host, &wm, &Placement::centered(32, 32, 12, 0.0)).unwrap();
        assert_eq!(r.watermarked, host);
        assert!(r.gt_mask.data().iter().all(|&m| m == 0.0));
    }

    #[test]
    fn closed_form_blend() {
        let host = Tensor::full([1, 3, 8, 8], 0.5);
        let wm = asset_from(1.0, vec![1.0; 16], 4, 4);
        let r = composite(&host, &wm, &Placement { p: 0, q: 0, u: 8, v: 8, alpha: 0.55 }).unwrap();
        for &v in r.watermarked.data() {
            assert!((v - 0.775).abs() < 1e-6);
        }
        assert!(r.gt_mask.data().iter().all(|&m| (m - 0.55).abs() < 1e-7));
    }

    #[test]
    fn outside_region_is_bit_equal_and_mask_support_matches() {
        let mut rng = seeded(17);
        for _ in 0..20 {
            let host = synth_host(&mut rng, 40, 48);
            let wm = synth_watermark(&mut rng, 20, 20);
            let pl = sample_placement(&mut rng, (40, 48), (5, 30), (0.2, 0.9)).unwrap();
            let r = composite(&host, &wm, &pl).unwrap();
            let rendered = resize_bilinear(&wm, pl.u, pl.v).unwrap();
            for y in 0..40 {
                for x in 0..48 {
                    let inside = y >= pl.q && y < pl.q + pl.u && x >= pl.p && x < pl.p + pl.v;
                    let m = r.gt_mask.get(0, 0, y, x);
                    if !inside {
                        assert_eq!(m, 0.0);
                        for c in 0..3 {
                            assert_eq!(r.watermarked.get(0, c, y, x).to_bits(), host.get(0, c, y, x).to_bits());
                        }
                    } else {
                        let a = rendered.alpha().get(0, 0, y - pl.q, x - pl.p);
                        assert_eq!(m > 0.0, a > 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn host_jacobian_is_one_minus_mask() {
        use crate::autodiff::finite_diff_grad;
        let mut rng = seeded(23);
        let host = synth_host(&mut rng, 12, 12).cast::<f64>();
        let wm = synth_watermark(&mut rng, 8, 8);
        let pl = Placement { p: 2, q: 3, u: 8, v: 7, alpha: 0.6 };
        let mask = composite(&host.cast(), &wm, &pl).unwrap().gt_mask;
        // d(sum(out))/d(host) = 1 - t·a per channel pixel.
        let g = finite_diff_grad(
            |h| composite(&h.cast(), &wm, &pl).unwrap().watermarked.sum_f64(),
            &host,
            1e-2,
        )
        .unwrap();
        for c in 0..3 {
            for y in 0..12 {
                for x in 0..12 {
                    let want = 1.0 - mask.get(0, 0, y, x) as f64;
                    assert!((g.get(0, c, y, x) - want).abs() < 1e-3);
                }
            }
        }
    }

    #[test]
    fn out_of_bounds_placement_is_rejected() {
        let host = Tensor::zeros([1, 3, 16, 16]);
        let wm = asset_from(1.0, vec![1.0; 4], 2, 2);
        let pl = Placement { p: 10, q: 0, u: 4, v: 8, alpha: 0.5 };
        assert!(matches!(composite(&host, &wm, &pl), Err(Error::OutOfBounds { .. })));
        let pl = Placement { p: 0, q: 0, u: 0, v: 8, alpha: 0.5 };
        assert!(composite(&host, &wm, &pl).is_err());
    }

    #[test]
    fn placement_sampling() {
        let mut rng = seeded(1);
        let full = sample_placement(&mut rng, (64, 64), (64, 64), (0.5, 0.5)).unwrap();
        assert_eq!((full.p, full.q, full.u, full.v), (0, 0, 64, 64));
        for _ in 0..10_000 {
            let pl = sample_placement(&mut rng, (64, 48), (3, 30), (0.3, 0.7)).unwrap();
            assert!(pl.q + pl.u <= 64 && pl.p + pl.v <= 48);
            assert!((3..=30).contains(&pl.u) && (3..=30).contains(&pl.v));
            assert!((0.3..=0.7).contains(&pl.alpha));
        }
        let seq = |seed| {
            let mut r = seeded(seed);
            (0..50)
                .map(|_| sample_placement(&mut r, (64, 64), (10, 30), (0.4, 0.7)).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(seq(99), seq(99));
        assert!(sample_placement(&mut rng, (16, 16), (4, 20), (0.5, 0.5)).is_err());
        assert!(sample_placement(&mut rng, (16, 16), (4, 8), (0.7, 0.5)).is_err());
    }

    #[test]
    fn synth_host_range_and_reproducibility() {
        let a = synth_host(&mut seeded(8), 64, 64);
        assert_eq!(a, synth_host(&mut seeded(8), 64, 64));
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let mut rng = seeded(1234);
        let mean: f64 = (0..1000).map(|_| synth_host(&mut rng, 64, 64).mean_f64()).sum::<f64>() / 1000.0;
        assert!(mean > 0.2 && mean < 0.8, "mean {mean}");
    }

    #[test]
    fn synth_watermark_contract() {
        let a = synth_watermark(&mut seeded(4), ASSET_SIZE, ASSET_SIZE);
        assert_eq!(a, synth_watermark(&mut seeded(4), ASSET_SIZE, ASSET_SIZE));
        let mut rng = seeded(77);
        let mut total = 0.0;
        for _ in 0..500 {
            let wm = synth_watermark(&mut rng, ASSET_SIZE, ASSET_SIZE);
            assert!(wm.alpha().data().iter().any(|&v| v == 0.0));
            assert!(wm.alpha().data().iter().any(|&v| v > 0.0));
            let cov = wm.alpha().data().iter().filter(|&&v| v > 0.5).count() as f64
                / wm.alpha().len() as f64;
            total += cov;
        }
        let mean_cov = total / 500.0;
        assert!(mean_cov > 0.05 && mean_cov < 0.6, "coverage {mean_cov}");
    }

    #[test]
    fn polygon_interior_has_negative_distance() {
        for mut tri in [vec![(0.0, 0.0), (10.0, 0.0), (0.0, 10.0)], vec![(0.0, 0.0), (0.0, 10.0), (10.0, 0.0)]] {
            orient_ccw(&mut tri);
            let s = Shape2d::Polygon(tri);
            assert!(s.distance(2.0, 2.0) < 0.0);
            assert!(s.distance(9.0, 9.0) > 0.0);
            assert_eq!(s.coverage(2.0, 2.0), 1.0);
        }
    }

    #[test]
    fn invalid_assets_are_rejected() {
        let c = Tensor::full([1, 3, 2, 2], 0.5);
        assert!(WatermarkAsset::new(c.clone(), Tensor::zeros([1, 1, 2, 2])).is_err());
        assert!(WatermarkAsset::new(c.clone(), Tensor::full([1, 1, 2, 2], 1.5)).is_err());
        assert!(WatermarkAsset::new(c, Tensor::full([1, 1, 3, 2], 0.5)).is_err());
    }
}
