//! Domain types: element classes, geometry, attributes, elements, canvases
//! and layouts, plus structural validation.

use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};

/// Opaque JSON fields carried through serialization untouched.
pub type Extras = Map<String, Value>;

pub const DEFAULT_CLASS_NAMES: [&str; 6] = ["logo", "product_image", "headline", "button", "offer", "disclaimer"];

/// Minimum and maximum element counts for corpus and request layouts.
pub const MIN_ELEMENTS: usize = 2;
pub const MAX_ELEMENTS: usize = 6;

const PROB_SUM_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ElementClass {
    pub id: usize,
    pub name: String,
}

/// Dense, ordered set of element class names. Ids are positions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct ClassVocab {
    names: Vec<String>,
}

impl ClassVocab {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        if names.is_empty() {
            return Err(Error::validation("class vocabulary must not be empty"));
        }
        for (i, n) in names.iter().enumerate() {
            if n.is_empty() {
                return Err(Error::validation(format!("class {i} has an empty name")));
            }
            if names[..i].contains(n) {
                return Err(Error::validation(format!("duplicate class name `{n}`")));
            }
        }
        Ok(Self { names })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn name(&self, id: usize) -> Option<&str> {
        self.names.get(id).map(String::as_str)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn classes(&self) -> impl Iterator<Item = ElementClass> + '_ {
        self.names
            .iter()
            .enumerate()
            .map(|(id, name)| ElementClass { id, name: name.clone() })
    }

    pub fn one_hot(&self, id: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.len()];
        v[id] = 1.0;
        v
    }
}

impl Default for ClassVocab {
    fn default() -> Self {
        Self {
            names: DEFAULT_CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl TryFrom<Vec<String>> for ClassVocab {
    type Error = Error;

    fn try_from(names: Vec<String>) -> Result<Self> {
        Self::new(names)
    }
}

impl From<ClassVocab> for Vec<String> {
    fn from(v: ClassVocab) -> Self {
        v.names
    }
}

/// Box geometry in normalized canvas units: center, width, height.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub xc: f64,
    pub yc: f64,
    pub w: f64,
    pub h: f64,
}

impl Geometry {
    pub const fn new(xc: f64, yc: f64, w: f64, h: f64) -> Self {
        Self { xc, yc, w, h }
    }

    pub fn from_corners(xl: f64, yt: f64, xr: f64, yb: f64) -> Self {
        Self {
            xc: (xl + xr) / 2.0,
            yc: (yt + yb) / 2.0,
            w: xr - xl,
            h: yb - yt,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.xc.is_finite() && self.yc.is_finite() && self.w.is_finite() && self.h.is_finite()
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.xc, self.yc, self.w, self.h]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn xl(&self) -> f64 {
        self.xc - self.w / 2.0
    }

    pub fn xr(&self) -> f64 {
        self.xc + self.w / 2.0
    }

    pub fn yt(&self) -> f64 {
        self.yc - self.h / 2.0
    }

    pub fn yb(&self) -> f64 {
        self.yc + self.h / 2.0
    }

    /// Horizontal mirror image across the canvas's vertical centerline.
    pub fn mirrored(&self) -> Self {
        Self::new(1.0 - self.xc, self.yc, self.w, self.h)
    }
}

/// Per-element conditioning triple: expected area `s`, target aspect ratio
/// `r` (height / width, 0 = unconstrained) and origin distance `d`
/// (0 = order-unconditioned).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AttributeVector {
    pub s: f64,
    pub r: f64,
    pub d: f64,
}

impl AttributeVector {
    pub const fn new(s: f64, r: f64, d: f64) -> Self {
        Self { s, r, d }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Element {
    pub class_probs: Vec<f64>,
    pub geometry: Geometry,
    pub attributes: AttributeVector,
    /// Geometry was supplied as a fixed input condition.
    pub frozen: bool,
    /// 0-indexed reading-order rank.
    pub order: Option<usize>,
    pub extra: Extras,
}

impl Element {
    pub fn new(class_probs: Vec<f64>, geometry: Geometry, attributes: AttributeVector) -> Self {
        Self {
            class_probs,
            geometry,
            attributes,
            frozen: false,
            order: None,
            extra: Extras::new(),
        }
    }

    /// Most probable class; the lowest id wins ties.
    pub fn class_id(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.class_probs.iter().enumerate() {
            if p > self.class_probs[best] {
                best = i;
            }
        }
        best
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AspectClass {
    Portrait,
    Square,
    Landscape,
}

impl AspectClass {
    pub const ALL: [AspectClass; 3] = [Self::Portrait, Self::Square, Self::Landscape];

    /// Square within 5% of 1:1, otherwise by width/height ratio.
    pub fn of(width_px: u32, height_px: u32) -> Self {
        let ratio = width_px as f64 / height_px as f64;
        if (ratio - 1.0).abs() <= 0.05 {
            AspectClass::Square
        } else if ratio < 1.0 {
            AspectClass::Portrait
        } else {
            AspectClass::Landscape
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            AspectClass::Portrait => "portrait",
            AspectClass::Square => "square",
            AspectClass::Landscape => "landscape",
        }
    }
}

impl fmt::Display for AspectClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for AspectClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "portrait" => Ok(Self::Portrait),
            "square" => Ok(Self::Square),
            "landscape" => Ok(Self::Landscape),
            other => Err(Error::validation(format!("unknown aspect class `{other}`"))),
        }
    }
}

pub const MIN_CANVAS_PX: u32 = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct Canvas {
    pub width_px: u32,
    pub height_px: u32,
    pub aspect_class: AspectClass,
    pub extra: Extras,
}

impl Canvas {
    pub fn new(width_px: u32, height_px: u32) -> Result<Self> {
        if width_px < MIN_CANVAS_PX || height_px < MIN_CANVAS_PX {
            return Err(Error::validation(format!(
                "canvas {width_px}x{height_px} is smaller than {MIN_CANVAS_PX}px"
            )));
        }
        Ok(Self {
            width_px,
            height_px,
            aspect_class: AspectClass::of(width_px, height_px),
            extra: Extras::new(),
        })
    }

    /// Height over width.
    pub fn height_over_width(&self) -> f64 {
        self.height_px as f64 / self.width_px as f64
    }

    pub fn max_side(&self) -> u32 {
        self.width_px.max(self.height_px)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    pub elements: Vec<Element>,
    pub canvas: Canvas,
    pub extra: Extras,
}

impl Layout {
    pub fn new(elements: Vec<Element>, canvas: Canvas) -> Self {
        Self {
            elements,
            canvas,
            extra: Extras::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn geometries(&self) -> Vec<Geometry> {
        self.elements.iter().map(|e| e.geometry).collect()
    }

    pub fn orders(&self) -> Option<Vec<usize>> {
        self.elements.iter().map(|e| e.order).collect()
    }

    pub fn mirrored(&self) -> Self {
        let mut out = self.clone();
        for e in &mut out.elements {
            e.geometry = e.geometry.mirrored();
        }
        out
    }
}

/// One failed invariant.
#[derive(Clone, Debug, PartialEq)]
pub enum Invariant {
    ElementCount { count: usize },
    ClassProbsLength { expected: usize, found: usize },
    ClassProbsNegative,
    ClassProbsNormalization { sum: f64 },
    NonFiniteGeometry,
    NegativeSize,
    FrozenOutOfRange,
    NonPositiveArea,
    NegativeAspect,
    NegativeDistance,
    NonFiniteAttributes,
    OrderNotPermutation,
    PartialOrders,
    CanvasTooSmall,
    AspectClassMismatch { expected: AspectClass },
    OutsideCanvas,
    BelowPixelSize,
}

impl fmt::Display for Invariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Invariant::ElementCount { count } => {
                write!(f, "element count {count} outside {MIN_ELEMENTS} <= N <= {MAX_ELEMENTS}")
            }
            Invariant::ClassProbsLength { expected, found } => {
                write!(f, "class_probs has length {found}, expected {expected}")
            }
            Invariant::ClassProbsNegative => f.write_str("class_probs has a negative entry"),
            Invariant::ClassProbsNormalization { sum } => {
                write!(f, "class_probs normalization: entries sum to {sum}")
            }
            Invariant::NonFiniteGeometry => f.write_str("geometry is not finite"),
            Invariant::NegativeSize => f.write_str("geometry has negative width or height"),
            Invariant::FrozenOutOfRange => f.write_str("frozen geometry outside [0,1]"),
            Invariant::NonPositiveArea => f.write_str("attribute s must be > 0"),
            Invariant::NegativeAspect => f.write_str("attribute r must be >= 0"),
            Invariant::NegativeDistance => f.write_str("attribute d must be >= 0"),
            Invariant::NonFiniteAttributes => f.write_str("attributes are not finite"),
            Invariant::OrderNotPermutation => f.write_str("orders are not a permutation of 0..N"),
            Invariant::PartialOrders => f.write_str("orders given for some elements only"),
            Invariant::CanvasTooSmall => write!(f, "canvas side smaller than {MIN_CANVAS_PX}px"),
            Invariant::AspectClassMismatch { expected } => {
                write!(f, "aspect class does not match canvas size (expected {expected})")
            }
            Invariant::OutsideCanvas => f.write_str("box extends outside the canvas"),
            Invariant::BelowPixelSize => f.write_str("box narrower or shorter than one pixel"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Violation {
    /// `None` for layout-level violations.
    pub element: Option<usize>,
    pub invariant: Invariant,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.element {
            Some(i) => write!(f, "element {i}: {}", self.invariant),
            None => write!(f, "layout: {}", self.invariant),
        }
    }
}

/// Checks every structural invariant. Never fails; an empty list means valid.
pub fn validate_layout(layout: &Layout) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |element, invariant| out.push(Violation { element, invariant });

    let n = layout.elements.len();
    if !(MIN_ELEMENTS..=MAX_ELEMENTS).contains(&n) {
        push(None, Invariant::ElementCount { count: n });
    }

    let c = &layout.canvas;
    if c.width_px < MIN_CANVAS_PX || c.height_px < MIN_CANVAS_PX {
        push(None, Invariant::CanvasTooSmall);
    } else {
        let expected = AspectClass::of(c.width_px, c.height_px);
        if expected != c.aspect_class {
            push(None, Invariant::AspectClassMismatch { expected });
        }
    }

    let m = layout.elements.first().map_or(0, |e| e.class_probs.len());
    for (i, e) in layout.elements.iter().enumerate() {
        let i = Some(i);
        if e.class_probs.len() != m || m == 0 {
            push(
                i,
                Invariant::ClassProbsLength {
                    expected: m,
                    found: e.class_probs.len(),
                },
            );
        } else if e.class_probs.iter().any(|&p| !(p >= 0.0)) {
            push(i, Invariant::ClassProbsNegative);
        } else {
            let sum: f64 = e.class_probs.iter().sum();
            if (sum - 1.0).abs() > PROB_SUM_TOLERANCE {
                push(i, Invariant::ClassProbsNormalization { sum });
            }
        }

        let g = &e.geometry;
        if !g.is_finite() {
            push(i, Invariant::NonFiniteGeometry);
        } else {
            if g.w < 0.0 || g.h < 0.0 {
                push(i, Invariant::NegativeSize);
            }
            if e.frozen && g.to_array().iter().any(|v| !(0.0..=1.0).contains(v)) {
                push(i, Invariant::FrozenOutOfRange);
            }
        }

        let a = &e.attributes;
        if !(a.s.is_finite() && a.r.is_finite() && a.d.is_finite()) {
            push(i, Invariant::NonFiniteAttributes);
        } else {
            if a.s <= 0.0 {
                push(i, Invariant::NonPositiveArea);
            }
            if a.r < 0.0 {
                push(i, Invariant::NegativeAspect);
            }
            if a.d < 0.0 {
                push(i, Invariant::NegativeDistance);
            }
        }
    }

    let given = layout.elements.iter().filter(|e| e.order.is_some()).count();
    if given > 0 && given < n {
        push(None, Invariant::PartialOrders);
    } else if given == n && n > 0 {
        let mut seen = vec![false; n];
        let ok = layout.elements.iter().all(|e| {
            let o = e.order.unwrap_or(usize::MAX);
            o < n && !std::mem::replace(&mut seen[o], true)
        });
        if !ok {
            push(None, Invariant::OrderNotPermutation);
        }
    }
    out
}

/// Structural checks plus the requirements on finished output: every box
/// lies inside the canvas and spans at least one pixel in each direction.
pub fn validate_final_layout(layout: &Layout) -> Vec<Violation> {
    const EPS: f64 = 1e-9;
    let mut out = validate_layout(layout);
    let min_side = 1.0 / layout.canvas.max_side().max(1) as f64;
    for (i, e) in layout.elements.iter().enumerate() {
        let g = &e.geometry;
        if !g.is_finite() {
            continue;
        }
        if g.xl() < -EPS || g.yt() < -EPS || g.xr() > 1.0 + EPS || g.yb() > 1.0 + EPS {
            out.push(Violation {
                element: Some(i),
                invariant: Invariant::OutsideCanvas,
            });
        }
        if g.w < min_side - EPS || g.h < min_side - EPS {
            out.push(Violation {
                element: Some(i),
                invariant: Invariant::BelowPixelSize,
            });
        }
    }
    out
}

pub(crate) fn ensure_valid(violations: Vec<Violation>) -> Result<()> {
    if violations.is_empty() {
        return Ok(());
    }
    let msg = violations
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("; ");
    Err(Error::Validation(msg))
}
