//! Differentiable wireframe rasterization and schematic SVG/PNG export.
//!
//! Each element renders into its own grayscale wireframe: every box edge is
//! a 1-pixel hat kernel across the edge times a clamped coverage ramp along
//! it, and the element image is the pixel-wise maximum over its four edges.
//! Layout images take the per-class maximum over elements weighted by class
//! probability (and by dropout bit for the local view). Pixel `(u, v)` is
//! sampled at integer coordinates on a canvas spanning `[0, W] x [0, H]`.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BackwardArgs, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::layout::{ensure_valid, validate_layout, ClassVocab, Geometry, Layout};

/// `W x H x M` raster, stored channel-major (`[c][y][x]`).
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl RenderedImage {
    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.width * self.height;
        &self.data[c * n..(c + 1) * n]
    }
}

/// Per-element keep bits for the local (element-dropout) view.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DropoutMask {
    pub bits: Vec<u8>,
    pub keep_prob: f64,
}

impl DropoutMask {
    pub fn all_kept(n: usize) -> Self {
        Self {
            bits: vec![1; n],
            keep_prob: 1.0,
        }
    }

    pub fn weights(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| b as f64).collect()
    }
}

/// Independent Bernoulli(`keep_prob`) bits, reproducible from `seed`.
pub fn sample_dropout_mask(n: usize, keep_prob: f64, seed: u64) -> Result<DropoutMask> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_dropout_mask_with(n, keep_prob, &mut rng)
}

pub fn sample_dropout_mask_with<R: Rng>(n: usize, keep_prob: f64, rng: &mut R) -> Result<DropoutMask> {
    if !(0.0..=1.0).contains(&keep_prob) {
        return Err(Error::validation(format!("keep probability {keep_prob} outside [0,1]")));
    }
    let bits = (0..n).map(|_| u8::from(rng.random::<f64>() < keep_prob)).collect();
    Ok(DropoutMask { bits, keep_prob })
}

/// Box edges in pixel units.
#[derive(Clone, Copy, Debug)]
struct PixelBox {
    xl: f64,
    xr: f64,
    yt: f64,
    yb: f64,
}

impl PixelBox {
    fn new(g: &Geometry, width: usize, height: usize) -> Self {
        let (w, h) = (width as f64, height as f64);
        Self {
            xl: g.xl() * w,
            xr: g.xr() * w,
            yt: g.yt() * h,
            yb: g.yb() * h,
        }
    }
}

/// Coverage ramp along an edge spanning `[lo, hi]`, with partials with
/// respect to `lo` and `hi`.
#[inline]
fn coverage(t: f64, lo: f64, hi: f64) -> (f64, f64, f64) {
    let a = t - lo;
    let b = hi - t;
    let m = a.min(b) + 1.0;
    if m <= 0.0 {
        (0.0, 0.0, 0.0)
    } else if m >= 1.0 {
        (1.0, 0.0, 0.0)
    } else if a <= b {
        (m, -1.0, 0.0)
    } else {
        (m, 0.0, 1.0)
    }
}

/// 1-pixel hat kernel centred on `at`, with its partial with respect to `at`.
#[inline]
fn hat(t: f64, at: f64) -> (f64, f64) {
    let d = t - at;
    if d.abs() >= 1.0 {
        (0.0, 0.0)
    } else {
        (1.0 - d.abs(), d.signum() * f64::from(d != 0.0))
    }
}

/// Wireframe value at pixel `(u, v)` and its partials with respect to
/// `(xl, xr, yt, yb)` in pixel units.
#[inline]
fn wireframe_pixel(b: &PixelBox, u: f64, v: f64) -> (f64, [f64; 4]) {
    let (cx, cx_l, cx_r) = coverage(u, b.xl, b.xr);
    let (cy, cy_t, cy_b) = coverage(v, b.yt, b.yb);
    let mut best = 0.0;
    let mut grad = [0.0; 4];
    if cx > 0.0 {
        for (edge_y, slot) in [(b.yt, 2), (b.yb, 3)] {
            let (t, dt) = hat(v, edge_y);
            let val = cx * t;
            if val > best {
                best = val;
                grad = [cx_l * t, cx_r * t, 0.0, 0.0];
                grad[slot] += cx * dt;
            }
        }
    }
    if cy > 0.0 {
        for (edge_x, slot) in [(b.xl, 0), (b.xr, 1)] {
            let (t, dt) = hat(u, edge_x);
            let val = cy * t;
            if val > best {
                best = val;
                grad = [0.0, 0.0, cy_t * t, cy_b * t];
                grad[slot] += cy * dt;
            }
        }
    }
    (best, grad)
}

fn check_size(width: usize, height: usize) -> Result<()> {
    if width < 1 || height < 1 {
        return Err(Error::validation(format!(
            "render size {width}x{height} must be at least 1x1"
        )));
    }
    Ok(())
}

/// Grayscale wireframe of one box, row-major `H x W`.
pub fn render_element_wireframe(g: &Geometry, width: usize, height: usize) -> Result<Vec<f64>> {
    check_size(width, height)?;
    if !g.is_finite() {
        return Err(Error::validation("non-finite geometry"));
    }
    let b = PixelBox::new(g, width, height);
    let mut out = vec![0.0; width * height];
    for v in 0..height {
        for u in 0..width {
            out[v * width + u] = wireframe_pixel(&b, u as f64, v as f64).0;
        }
    }
    Ok(out)
}

fn check_shapes(class_probs: &[Vec<f64>], geoms: &[Geometry]) -> Result<usize> {
    if class_probs.len() != geoms.len() {
        return Err(Error::validation(format!(
            "{} class rows for {} geometries",
            class_probs.len(),
            geoms.len()
        )));
    }
    let m = class_probs.first().map_or(0, Vec::len);
    if m == 0 || class_probs.iter().any(|p| p.len() != m) {
        return Err(Error::validation("class probability rows have inconsistent length"));
    }
    if geoms.iter().any(|g| !g.is_finite()) {
        return Err(Error::validation("non-finite geometry"));
    }
    Ok(m)
}

pub fn compose_layout_image(
    class_probs: &[Vec<f64>],
    geoms: &[Geometry],
    width: usize,
    height: usize,
) -> Result<RenderedImage> {
    compose_dropout_image(class_probs, geoms, &DropoutMask::all_kept(geoms.len()), width, height)
}

pub fn compose_dropout_image(
    class_probs: &[Vec<f64>],
    geoms: &[Geometry],
    mask: &DropoutMask,
    width: usize,
    height: usize,
) -> Result<RenderedImage> {
    check_size(width, height)?;
    let m = check_shapes(class_probs, geoms)?;
    if mask.bits.len() != geoms.len() {
        return Err(Error::validation(format!(
            "dropout mask has {} bits for {} elements",
            mask.bits.len(),
            geoms.len()
        )));
    }
    let weights: Vec<Vec<f64>> = class_probs
        .iter()
        .zip(&mask.bits)
        .map(|(p, &bit)| p.iter().map(|x| x * bit as f64).collect())
        .collect();
    let raster = rasterize(&weights, geoms, width, height, m, false);
    Ok(RenderedImage {
        width,
        height,
        channels: m,
        data: raster.image,
    })
}

struct Raster {
    /// `[M][H][W]`.
    image: Vec<f64>,
    /// Winning element per image entry (`u8::MAX` = none).
    winner: Vec<u8>,
    /// Per element, per pixel: partials w.r.t. `(xl, xr, yt, yb)` in pixels.
    partials: Vec<[f64; 4]>,
}

/// Composes `max_i weights[i][c] * F_i` for one layout. `weights` already
/// folds in dropout bits.
fn rasterize(
    weights: &[Vec<f64>],
    geoms: &[Geometry],
    width: usize,
    height: usize,
    m: usize,
    keep_partials: bool,
) -> Raster {
    let hw = width * height;
    let mut image = vec![0.0; m * hw];
    let mut winner = if keep_partials {
        vec![u8::MAX; m * hw]
    } else {
        Vec::new()
    };
    let mut partials = if keep_partials {
        vec![[0.0; 4]; geoms.len() * hw]
    } else {
        Vec::new()
    };
    let mut f = vec![0.0; hw];
    for (i, g) in geoms.iter().enumerate() {
        if weights[i].iter().all(|&w| w == 0.0) {
            continue;
        }
        let b = PixelBox::new(g, width, height);
        // Only pixels within one pixel of the box can be non-zero.
        let u0 = (b.xl.min(b.xr) - 1.0).floor().max(0.0) as usize;
        let u1 = ((b.xl.max(b.xr) + 1.0).ceil().max(0.0) as usize).min(width.saturating_sub(1));
        let v0 = (b.yt.min(b.yb) - 1.0).floor().max(0.0) as usize;
        let v1 = ((b.yt.max(b.yb) + 1.0).ceil().max(0.0) as usize).min(height.saturating_sub(1));
        f.fill(0.0);
        if u0 > u1 || v0 > v1 || u0 >= width || v0 >= height {
            continue;
        }
        for v in v0..=v1 {
            for u in u0..=u1 {
                let (val, grad) = wireframe_pixel(&b, u as f64, v as f64);
                f[v * width + u] = val;
                if keep_partials {
                    partials[i * hw + v * width + u] = grad;
                }
            }
        }
        for (c, &w) in weights[i].iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let plane = &mut image[c * hw..(c + 1) * hw];
            for v in v0..=v1 {
                for u in u0..=u1 {
                    let p = v * width + u;
                    let val = w * f[p];
                    if val > plane[p] {
                        plane[p] = val;
                        if keep_partials {
                            winner[c * hw + p] = i as u8;
                        }
                    }
                }
            }
        }
    }
    Raster {
        image,
        winner,
        partials,
    }
}

/// One layout inside a batched render: its rows in the geometry matrix,
/// per-element class weights and optional dropout bits.
#[derive(Clone, Debug)]
pub struct RenderItem {
    pub start: usize,
    pub class_probs: Vec<Vec<f64>>,
    pub mask: Option<Vec<u8>>,
}

/// Differentiable batched render. `geoms` is `[total, 4]` with rows
/// `(xC, yC, w, h)`; the result is `[B, M, H, W]`. Gradients flow to the
/// geometry only.
pub fn render_batch(
    graph: &mut Graph,
    geoms: Var,
    items: &[RenderItem],
    width: usize,
    height: usize,
    classes: usize,
) -> Var {
    let gvals = graph.value(geoms).data().to_vec();
    let hw = width * height;
    let mut image = Vec::with_capacity(items.len() * classes * hw);
    let mut rasters = Vec::with_capacity(items.len());
    for item in items {
        let n = item.class_probs.len();
        let gs: Vec<Geometry> = (0..n)
            .map(|i| {
                let r = &gvals[(item.start + i) * 4..(item.start + i + 1) * 4];
                Geometry::new(r[0], r[1], r[2], r[3])
            })
            .collect();
        let weights: Vec<Vec<f64>> = item
            .class_probs
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let bit = item.mask.as_ref().map_or(1.0, |m| m[i] as f64);
                p.iter().map(|x| x * bit).collect()
            })
            .collect();
        let raster = rasterize(&weights, &gs, width, height, classes, true);
        image.extend_from_slice(&raster.image);
        rasters.push((raster, weights));
    }
    let value = Tensor::new(vec![items.len(), classes, height, width], image);
    let starts: Vec<usize> = items.iter().map(|it| it.start).collect();
    let (w, h) = (width as f64, height as f64);
    graph.custom(&[geoms], value, move |g: &BackwardArgs<'_>| {
        let mut d = vec![0.0; g.inputs[0].len()];
        for (bi, ((raster, weights), &start)) in rasters.iter().zip(&starts).enumerate() {
            let gimg = &g.grad.data()[bi * classes * hw..(bi + 1) * classes * hw];
            for (idx, &win) in raster.winner.iter().enumerate() {
                if win == u8::MAX {
                    continue;
                }
                let go = gimg[idx];
                if go == 0.0 {
                    continue;
                }
                let (c, p) = (idx / hw, idx % hw);
                let i = win as usize;
                let scale = go * weights[i][c];
                let [dxl, dxr, dyt, dyb] = raster.partials[i * hw + p];
                let row = &mut d[(start + i) * 4..(start + i + 1) * 4];
                row[0] += scale * w * (dxl + dxr);
                row[1] += scale * h * (dyt + dyb);
                row[2] += scale * w * 0.5 * (dxr - dxl);
                row[3] += scale * h * 0.5 * (dyb - dyt);
            }
        }
        vec![Some(Tensor::new(g.inputs[0].shape().to_vec(), d))]
    })
}

// ----- schematic export --------------------------------------------------

pub const DEFAULT_PALETTE: [&str; 6] = ["#e6194b", "#3cb44b", "#4363d8", "#f58231", "#911eb4", "#808080"];

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StyleConfig {
    /// Colors indexed by class id; falls back to the default palette.
    pub palette: Vec<String>,
    pub show_labels: bool,
    pub placeholder_content: bool,
    /// Reading-order numerals drawn at each box's top-left corner.
    pub show_orders: bool,
}

impl StyleConfig {
    pub fn color(&self, class_id: usize) -> &str {
        if self.palette.is_empty() {
            DEFAULT_PALETTE[class_id % DEFAULT_PALETTE.len()]
        } else {
            &self.palette[class_id % self.palette.len()]
        }
    }
}

fn is_image_class(name: &str) -> bool {
    matches!(name, "logo" | "product_image")
}

/// SVG 1.1 schematic: one `<rect>` per element in class colors. Output is
/// a pure function of its inputs.
pub fn export_svg(layout: &Layout, style: &StyleConfig, vocab: &ClassVocab) -> Result<String> {
    ensure_valid(validate_layout(layout))?;
    let (cw, ch) = (layout.canvas.width_px as f64, layout.canvas.height_px as f64);
    let mut s = String::new();
    let _ = writeln!(s, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{w}" height="{h}" viewBox="0 0 {w} {h}" style="background:#ffffff">"#,
        w = layout.canvas.width_px,
        h = layout.canvas.height_px
    );
    for (i, e) in layout.elements.iter().enumerate() {
        let g = &e.geometry;
        let (x, y, w, h) = (g.xl() * cw, g.yt() * ch, g.w * cw, g.h * ch);
        let cid = e.class_id();
        let name = vocab.name(cid).unwrap_or("element");
        let color = style.color(cid);
        let _ = writeln!(
            s,
            r#"  <rect data-index="{i}" data-class="{name}" x="{x:.2}" y="{y:.2}" width="{w:.2}" height="{h:.2}" fill="{color}" fill-opacity="0.25" stroke="{color}" stroke-width="2"/>"#
        );
        if style.placeholder_content {
            if is_image_class(name) {
                let _ = writeln!(
                    s,
                    r#"  <path d="M{x:.2} {y:.2} L{x2:.2} {y2:.2} M{x2:.2} {y:.2} L{x:.2} {y2:.2}" stroke="{color}" stroke-width="1"/>"#,
                    x2 = x + w,
                    y2 = y + h
                );
            } else {
                let lines = ((h / 14.0).floor() as usize).clamp(1, 6);
                for k in 0..lines {
                    let ly = y + h * (k as f64 + 1.0) / (lines as f64 + 1.0);
                    let _ = writeln!(
                        s,
                        r#"  <line x1="{:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="1" stroke-opacity="0.6"/>"#,
                        x + 0.1 * w,
                        x + 0.9 * w
                    );
                }
            }
        }
        if style.show_labels {
            let _ = writeln!(
                s,
                r#"  <text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="11" fill="{color}">{name}</text>"#,
                x + 3.0,
                y + h - 3.0
            );
        }
        if style.show_orders {
            if let Some(o) = e.order {
                let _ = writeln!(
                    s,
                    r#"  <text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="14" font-weight="bold" fill="{color}">{o}</text>"#,
                    x + 3.0,
                    y + 14.0
                );
            }
        }
    }
    s.push_str("</svg>\n");
    Ok(s)
}

fn parse_hex(color: &str) -> [u8; 3] {
    let hex = color.trim_start_matches('#');
    let ch = |i: usize| {
        hex.get(i..i + 2)
            .and_then(|h| u8::from_str_radix(h, 16).ok())
            .unwrap_or(0x80)
    };
    [ch(0), ch(2), ch(4)]
}

/// Rasterizes the schematic (filled boxes with outlines) to PNG bytes at
/// `dpi`, where 96 dpi maps one canvas pixel to one image pixel.
pub fn export_png(layout: &Layout, style: &StyleConfig, dpi: f64) -> Result<Vec<u8>> {
    ensure_valid(validate_layout(layout))?;
    if !(dpi > 0.0 && dpi.is_finite()) {
        return Err(Error::validation(format!("dpi {dpi} must be positive")));
    }
    let scale = dpi / 96.0;
    let w = ((layout.canvas.width_px as f64 * scale).round() as u32).max(1);
    let h = ((layout.canvas.height_px as f64 * scale).round() as u32).max(1);
    let mut px = vec![255u8; (w * h * 3) as usize];
    let stroke = (2.0 * scale).max(1.0);
    for e in &layout.elements {
        let g = &e.geometry;
        let (x0, x1) = (g.xl() * w as f64, g.xr() * w as f64);
        let (y0, y1) = (g.yt() * h as f64, g.yb() * h as f64);
        let rgb = parse_hex(style.color(e.class_id()));
        let ys = y0.floor().max(0.0) as u32..(y1.ceil().max(0.0) as u32).min(h);
        for y in ys {
            let yc = y as f64 + 0.5;
            if yc < y0 || yc > y1 {
                continue;
            }
            for x in x0.floor().max(0.0) as u32..(x1.ceil().max(0.0) as u32).min(w) {
                let xc = x as f64 + 0.5;
                if xc < x0 || xc > x1 {
                    continue;
                }
                let edge = xc - x0 < stroke || x1 - xc < stroke || yc - y0 < stroke || y1 - yc < stroke;
                let alpha = if edge { 1.0 } else { 0.25 };
                let o = ((y * w + x) * 3) as usize;
                for k in 0..3 {
                    let bg = px[o + k] as f64;
                    px[o + k] = (bg * (1.0 - alpha) + rgb[k] as f64 * alpha).round() as u8;
                }
            }
        }
    }
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, w, h);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc
            .write_header()
            .map_err(|e| Error::validation(format!("png encoding: {e}")))?;
        writer
            .write_image_data(&px)
            .map_err(|e| Error::validation(format!("png encoding: {e}")))?;
    }
    Ok(out)
}
