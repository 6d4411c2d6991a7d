//! Synthetic corpus generation, attribute extraction and layout JSON I/O.
//!
//! Synthetic layouts are vertical stacks in a fixed class order with one
//! shared alignment coordinate (left edge or horizontal center). Corners
//! are snapped to a `2^-12` grid so that shared coordinates compare equal
//! and touching boxes have exactly zero overlap.

use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{assign_reading_orders, origin_distance};
use crate::layout::{
    ensure_valid, validate_layout, AspectClass, AttributeVector, Canvas, ClassVocab, Element, Extras, Geometry, Layout,
    MAX_ELEMENTS, MIN_ELEMENTS,
};

const GRID: f64 = 4096.0;

fn snap(x: f64) -> f64 {
    (x * GRID).round() / GRID
}

/// Sampling ranges for one element class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassStyle {
    pub class: String,
    /// Log-uniform range of the box area as a fraction of the canvas.
    pub area: (f64, f64),
    /// Uniform range of the normalized box width.
    pub width: (f64, f64),
}

impl ClassStyle {
    fn new(class: &str, area: (f64, f64), width: (f64, f64)) -> Self {
        Self {
            class: class.to_string(),
            area,
            width,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub size: usize,
    pub seed: u64,
    /// Probabilities of portrait, square and landscape canvases.
    pub aspect_mix: [f64; 3],
    /// Probabilities of 2, 3, 4, 5 and 6 elements.
    pub count_weights: [f64; 5],
    /// Probabilities of left and horizontal-center alignment.
    pub alignment_mix: [f64; 2],
    /// Class styles in top-to-bottom stacking order.
    pub classes: Vec<ClassStyle>,
    /// Class present in every layout.
    pub anchor_class: String,
    /// Minimum distance from boxes to the canvas border.
    pub margin: f64,
    /// Minimum vertical gap between consecutive boxes.
    pub min_gap: f64,
    pub max_attempts: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            size: 2000,
            seed: 0,
            aspect_mix: [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0],
            count_weights: [0.2; 5],
            alignment_mix: [0.5, 0.5],
            classes: vec![
                ClassStyle::new("logo", (0.01, 0.03), (0.15, 0.35)),
                ClassStyle::new("headline", (0.03, 0.07), (0.55, 0.9)),
                ClassStyle::new("product_image", (0.08, 0.2), (0.35, 0.7)),
                ClassStyle::new("offer", (0.02, 0.05), (0.35, 0.8)),
                ClassStyle::new("button", (0.01, 0.025), (0.2, 0.4)),
                ClassStyle::new("disclaimer", (0.004, 0.012), (0.45, 0.9)),
            ],
            anchor_class: "product_image".to_string(),
            margin: 0.04,
            min_gap: 0.01,
            max_attempts: 200,
        }
    }
}

/// Default pixel size of each canvas family.
pub fn default_canvas(aspect: AspectClass) -> Canvas {
    let (w, h) = match aspect {
        AspectClass::Portrait => (300, 600),
        AspectClass::Square => (400, 400),
        AspectClass::Landscape => (600, 300),
    };
    Canvas::new(w, h).expect("default canvases are valid")
}

fn check_distribution(name: &str, w: &[f64]) -> Result<()> {
    let sum: f64 = w.iter().sum();
    if w.iter().any(|x| !(*x >= 0.0)) || (sum - 1.0).abs() > 1e-6 {
        return Err(Error::validation(format!(
            "{name} {w:?} must be non-negative and sum to 1"
        )));
    }
    Ok(())
}

impl CorpusConfig {
    /// A config producing only one canvas family.
    pub fn for_aspect(aspect: AspectClass, size: usize, seed: u64) -> Self {
        let mut mix = [0.0; 3];
        mix[AspectClass::ALL.iter().position(|a| *a == aspect).expect("listed")] = 1.0;
        Self {
            size,
            seed,
            aspect_mix: mix,
            ..Default::default()
        }
    }

    pub fn validate(&self, vocab: &ClassVocab) -> Result<()> {
        if self.size < 1 {
            return Err(Error::validation("corpus size must be >= 1"));
        }
        check_distribution("aspect_mix", &self.aspect_mix)?;
        check_distribution("count_weights", &self.count_weights)?;
        check_distribution("alignment_mix", &self.alignment_mix)?;
        if self.classes.len() < MIN_ELEMENTS {
            return Err(Error::validation("at least two class styles are required"));
        }
        for s in &self.classes {
            if vocab.id(&s.class).is_none() {
                return Err(Error::validation(format!(
                    "class `{}` is not in the vocabulary",
                    s.class
                )));
            }
            let (a0, a1) = s.area;
            let (w0, w1) = s.width;
            if !(a0 > 0.0 && a0 <= a1 && a1 <= 1.0 && w0 > 0.0 && w0 <= w1 && w1 <= 1.0) {
                return Err(Error::validation(format!("invalid ranges for class `{}`", s.class)));
            }
        }
        if !self.classes.iter().any(|s| s.class == self.anchor_class) {
            return Err(Error::validation(format!(
                "anchor class `{}` has no style",
                self.anchor_class
            )));
        }
        let max_n = self.max_count();
        if self.count_weights[max_n - MIN_ELEMENTS + 1..].iter().any(|&w| w > 0.0) {
            return Err(Error::validation(format!(
                "element counts above {max_n} need more class styles"
            )));
        }
        if !(self.margin >= 0.0 && self.min_gap >= 0.0 && 2.0 * self.margin < 1.0) {
            return Err(Error::validation("margin and min_gap must be >= 0 with margin < 0.5"));
        }
        Ok(())
    }

    fn max_count(&self) -> usize {
        self.classes.len().min(MAX_ELEMENTS)
    }
}

struct Sampler<'a> {
    cfg: &'a CorpusConfig,
    vocab: &'a ClassVocab,
    aspect: WeightedIndex<f64>,
    count: WeightedIndex<f64>,
    align: WeightedIndex<f64>,
    anchor: usize,
}

impl Sampler<'_> {
    fn layout(&self, rng: &mut ChaCha8Rng) -> Option<Layout> {
        let canvas = default_canvas(AspectClass::ALL[rng.sample(&self.aspect)]);
        let n = MIN_ELEMENTS + rng.sample(&self.count);
        let left = rng.sample(&self.align) == 0;
        let cfg = self.cfg;

        // Anchor plus n-1 distinct other classes, in stacking order.
        let others: Vec<usize> = (0..cfg.classes.len()).filter(|&i| i != self.anchor).collect();
        let mut picked: Vec<usize> = sample(rng, others.len(), n - 1)
            .into_iter()
            .map(|k| others[k])
            .collect();
        picked.push(self.anchor);
        picked.sort_unstable();

        let usable = 1.0 - 2.0 * cfg.margin;
        let mut sizes = Vec::with_capacity(n);
        for &k in &picked {
            let style = &cfg.classes[k];
            let s = (rng.random_range(style.area.0.ln()..=style.area.1.ln())).exp();
            let w = rng.random_range(style.width.0..=style.width.1).min(usable);
            sizes.push((w, s / w));
        }
        let total_h: f64 = sizes.iter().map(|s| s.1).sum();
        let free = usable - total_h - cfg.min_gap * (n - 1) as f64;
        if free < 0.0 {
            return None;
        }
        // Slack split over the n+1 gaps with random proportions.
        let weights: Vec<f64> = (0..=n).map(|_| rng.random_range(0.5..1.5)).collect();
        let wsum: f64 = weights.iter().sum();
        let widest = sizes.iter().map(|s| s.0).fold(0.0, f64::max);
        let x0 = snap(cfg.margin + rng.random_range(0.0..=(usable - widest).max(0.0)));

        let min_px = 1.0 / canvas.max_side() as f64;
        let mut y = cfg.margin + free * weights[0] / wsum;
        let mut elements = Vec::with_capacity(n);
        for (idx, (&k, &(w, h))) in picked.iter().zip(&sizes).enumerate() {
            let yt = snap(y);
            let yb = snap(y + h);
            let (xl, xr) = if left {
                (x0, snap(x0 + w))
            } else {
                let xl = snap(0.5 - w / 2.0);
                (xl, 1.0 - xl)
            };
            if xr - xl < min_px || yb - yt < min_px || yb > 1.0 - cfg.margin + 1e-9 {
                return None;
            }
            let class = self.vocab.id(&cfg.classes[k].class).expect("validated");
            let g = Geometry::from_corners(xl, yt, xr, yb);
            elements.push(Element::new(
                self.vocab.one_hot(class),
                g,
                AttributeVector::new(g.area(), 0.0, 0.0),
            ));
            y = yb + cfg.min_gap + free * weights[idx + 1] / wsum;
        }
        let mut layout = Layout::new(elements, canvas);
        let attrs = extract_attributes(&layout, &default_ratio_fixed(self.vocab), self.vocab).ok()?;
        let orders = assign_reading_orders(&layout);
        for ((e, a), o) in layout.elements.iter_mut().zip(attrs).zip(orders) {
            e.attributes = a;
            e.order = Some(o);
        }
        Some(layout)
    }
}

/// Deterministic corpus of stacked, aligned, non-overlapping layouts.
pub fn generate_synthetic_corpus(cfg: &CorpusConfig, vocab: &ClassVocab) -> Result<Vec<Layout>> {
    cfg.validate(vocab)?;
    let weighted = |w: &[f64]| WeightedIndex::new(w.iter().copied()).map_err(|e| Error::validation(e.to_string()));
    let sampler = Sampler {
        cfg,
        vocab,
        aspect: weighted(&cfg.aspect_mix)?,
        count: weighted(&cfg.count_weights)?,
        align: weighted(&cfg.alignment_mix)?,
        anchor: cfg
            .classes
            .iter()
            .position(|s| s.class == cfg.anchor_class)
            .expect("validated"),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::with_capacity(cfg.size);
    for index in 0..cfg.size {
        let layout = (0..cfg.max_attempts.max(1))
            .find_map(|_| sampler.layout(&mut rng))
            .ok_or_else(|| Error::Generation {
                index,
                message: format!(
                    "no arrangement fit after {} attempts; sampled areas exceed the canvas",
                    cfg.max_attempts
                ),
            })?;
        out.push(layout);
    }
    Ok(out)
}

/// Classes whose aspect ratio is a hard constraint by default.
pub fn default_ratio_fixed(vocab: &ClassVocab) -> Vec<usize> {
    ["logo", "product_image"].iter().filter_map(|n| vocab.id(n)).collect()
}

/// `s = w*h`, `r = h/w` for ratio-fixed classes (else 0), `d` = origin
/// distance.
pub fn extract_attributes(layout: &Layout, ratio_fixed: &[usize], vocab: &ClassVocab) -> Result<Vec<AttributeVector>> {
    ensure_valid(validate_layout(layout))?;
    layout
        .elements
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let g = &e.geometry;
            let class = e.class_id();
            let r = if ratio_fixed.contains(&class) {
                if g.w <= 0.0 {
                    return Err(Error::validation(format!(
                        "element {i} ({}) has zero width but a fixed aspect ratio",
                        vocab.name(class).unwrap_or("?")
                    )));
                }
                g.h / g.w
            } else {
                0.0
            };
            Ok(AttributeVector::new(g.area(), r, origin_distance(g)?))
        })
        .collect()
}

/// Seeded shuffle split into `(train, held_out)`.
pub fn split_corpus(layouts: &[Layout], train_fraction: f64, seed: u64) -> (Vec<Layout>, Vec<Layout>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..layouts.len()).collect();
    for i in (1..idx.len()).rev() {
        idx.swap(i, rng.random_range(0..=i));
    }
    let cut = ((layouts.len() as f64 * train_fraction).round() as usize).min(layouts.len());
    let pick = |ids: &[usize]| ids.iter().map(|&i| layouts[i].clone()).collect();
    (pick(&idx[..cut]), pick(&idx[cut..]))
}

// ----- JSON ------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct CanvasDoc {
    width_px: u32,
    height_px: u32,
    aspect_class: AspectClass,
    #[serde(flatten)]
    extra: Extras,
}

#[derive(Serialize, Deserialize)]
struct ElementDoc {
    class: String,
    #[serde(rename = "xC")]
    xc: f64,
    #[serde(rename = "yC")]
    yc: f64,
    w: f64,
    h: f64,
    attributes: AttributeVector,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    order: Option<usize>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    frozen: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    class_probs: Option<Vec<f64>>,
    #[serde(flatten)]
    extra: Extras,
}

#[derive(Serialize, Deserialize)]
struct LayoutDoc {
    canvas: CanvasDoc,
    elements: Vec<ElementDoc>,
    #[serde(flatten)]
    extra: Extras,
}

fn is_one_hot(p: &[f64]) -> bool {
    p.iter().filter(|&&x| x == 1.0).count() == 1 && p.iter().all(|&x| x == 0.0 || x == 1.0)
}

fn to_doc(layout: &Layout, vocab: &ClassVocab) -> Result<LayoutDoc> {
    let elements = layout
        .elements
        .iter()
        .map(|e| {
            let class = vocab
                .name(e.class_id())
                .ok_or_else(|| Error::validation(format!("class id {} not in vocabulary", e.class_id())))?;
            Ok(ElementDoc {
                class: class.to_string(),
                xc: e.geometry.xc,
                yc: e.geometry.yc,
                w: e.geometry.w,
                h: e.geometry.h,
                attributes: e.attributes,
                order: e.order,
                frozen: e.frozen,
                class_probs: (!is_one_hot(&e.class_probs)).then(|| e.class_probs.clone()),
                extra: e.extra.clone(),
            })
        })
        .collect::<Result<_>>()?;
    Ok(LayoutDoc {
        canvas: CanvasDoc {
            width_px: layout.canvas.width_px,
            height_px: layout.canvas.height_px,
            aspect_class: layout.canvas.aspect_class,
            extra: layout.canvas.extra.clone(),
        },
        elements,
        extra: layout.extra.clone(),
    })
}

fn from_doc(doc: LayoutDoc, vocab: &ClassVocab, path_prefix: &str) -> Result<Layout> {
    let elements = doc
        .elements
        .into_iter()
        .enumerate()
        .map(|(i, e)| {
            let class_probs = match e.class_probs {
                Some(p) => {
                    if p.len() != vocab.len() {
                        return Err(Error::Parse {
                            path: format!("{path_prefix}elements[{i}].class_probs"),
                            message: format!("expected {} entries, found {}", vocab.len(), p.len()),
                        });
                    }
                    p
                }
                None => {
                    let id = vocab.id(&e.class).ok_or_else(|| Error::Parse {
                        path: format!("{path_prefix}elements[{i}].class"),
                        message: format!("unknown class `{}`", e.class),
                    })?;
                    vocab.one_hot(id)
                }
            };
            Ok(Element {
                class_probs,
                geometry: Geometry::new(e.xc, e.yc, e.w, e.h),
                attributes: e.attributes,
                frozen: e.frozen,
                order: e.order,
                extra: e.extra,
            })
        })
        .collect::<Result<_>>()?;
    Ok(Layout {
        elements,
        canvas: Canvas {
            width_px: doc.canvas.width_px,
            height_px: doc.canvas.height_px,
            aspect_class: doc.canvas.aspect_class,
            extra: doc.canvas.extra,
        },
        extra: doc.extra,
    })
}

fn parse<T: serde::de::DeserializeOwned>(text: &str) -> Result<T> {
    let mut de = serde_json::Deserializer::from_str(text);
    let value = serde_path_to_error::deserialize(&mut de).map_err(|e| Error::Parse {
        path: e.path().to_string(),
        message: e.inner().to_string(),
    })?;
    de.end().map_err(|e| Error::Parse {
        path: ".".to_string(),
        message: e.to_string(),
    })?;
    Ok(value)
}

/// Serializes one layout. Floats use the shortest representation that
/// reads back to the same `f64`.
pub fn layout_to_json(layout: &Layout, vocab: &ClassVocab) -> Result<String> {
    Ok(serde_json::to_string_pretty(&to_doc(layout, vocab)?)?)
}

pub fn layout_to_value(layout: &Layout, vocab: &ClassVocab) -> Result<serde_json::Value> {
    Ok(serde_json::to_value(to_doc(layout, vocab)?)?)
}

/// Parses one layout; schema errors carry the path of the offending field.
pub fn layout_from_json(text: &str, vocab: &ClassVocab) -> Result<Layout> {
    from_doc(parse(text)?, vocab, "")
}

pub fn layout_from_value(value: serde_json::Value, vocab: &ClassVocab) -> Result<Layout> {
    layout_from_json(&value.to_string(), vocab)
}

pub fn layouts_to_json(layouts: &[Layout], vocab: &ClassVocab) -> Result<String> {
    let docs = layouts.iter().map(|l| to_doc(l, vocab)).collect::<Result<Vec<_>>>()?;
    Ok(serde_json::to_string(&docs)?)
}

pub fn layouts_from_json(text: &str, vocab: &ClassVocab) -> Result<Vec<Layout>> {
    let docs: Vec<LayoutDoc> = parse(text)?;
    docs.into_iter()
        .enumerate()
        .map(|(i, d)| from_doc(d, vocab, &format!("[{i}].")))
        .collect()
}

pub fn save_corpus(path: impl AsRef<Path>, layouts: &[Layout], vocab: &ClassVocab) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, layouts_to_json(layouts, vocab)?)?;
    Ok(())
}

pub fn load_corpus(path: impl AsRef<Path>, vocab: &ClassVocab) -> Result<Vec<Layout>> {
    layouts_from_json(&std::fs::read_to_string(path)?, vocab)
}
