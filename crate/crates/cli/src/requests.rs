//! Request bodies shared by the CLI and the HTTP service, and the work
//! each one triggers.

use layoutforge_core::data::{layout_from_value, layout_to_value};
use layoutforge_core::geometry::assign_reading_orders;
use layoutforge_core::layout::validate_layout;
use layoutforge_core::metrics::{evaluate, order_match_fraction, MetricReport, DEFAULT_THRESHOLDS};
use layoutforge_core::pipeline::{
    run_pipeline, specs_to_conditions, CandidateSet, ElementSpec, PipelineConfig, RankOrder,
};
use layoutforge_core::render::{export_svg, StyleConfig};
use layoutforge_core::{pipeline, Canvas, ClassVocab, Error, Layout, ModelCheckpoint, Result};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CanvasSpec {
    pub width_px: u32,
    pub height_px: u32,
}

impl CanvasSpec {
    pub fn canvas(&self) -> Result<Canvas> {
        Canvas::new(self.width_px, self.height_px)
    }
}

impl std::str::FromStr for CanvasSpec {
    type Err = String;

    /// Parses `WIDTHxHEIGHT` in pixels.
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let (w, h) = s
            .split_once(['x', 'X'])
            .ok_or_else(|| format!("canvas {s:?} must look like 400x600"))?;
        let px = |v: &str| v.trim().parse::<u32>().map_err(|e| format!("canvas {s:?}: {e}"));
        Ok(Self {
            width_px: px(w)?,
            height_px: px(h)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateRequest {
    pub elements: Vec<ElementSpec>,
    pub canvas: CanvasSpec,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid_n: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rank_order: Option<RankOrder>,
}

impl GenerateRequest {
    pub fn pipeline_config(&self) -> PipelineConfig {
        let d = PipelineConfig::default();
        PipelineConfig {
            k: self.k.unwrap_or(d.k),
            grid_n: self.grid_n.unwrap_or(d.grid_n),
            rank_order: self.rank_order.unwrap_or(d.rank_order),
            seed: self.seed,
            ..d
        }
    }

    /// Checks the element specs and canvas without running a model.
    pub fn validate(&self, vocab: &ClassVocab) -> Result<Canvas> {
        let canvas = self.canvas.canvas()?;
        specs_to_conditions(&self.elements, &canvas, vocab)?;
        Ok(canvas)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetargetRequest {
    /// Source layout in the layout JSON schema.
    pub layout: Value,
    pub canvas: CanvasSpec,
    #[serde(default)]
    pub seed: u64,
}

impl RetargetRequest {
    pub fn validate(&self, vocab: &ClassVocab) -> Result<(Layout, Canvas)> {
        let layout = layout_from_value(self.layout.clone(), vocab)?;
        let violations = validate_layout(&layout);
        if !violations.is_empty() {
            let msg: Vec<String> = violations.iter().map(ToString::to_string).collect();
            return Err(Error::Validation(msg.join("; ")));
        }
        Ok((layout, self.canvas.canvas()?))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateRequest {
    pub layouts: Vec<Value>,
}

/// A finished job's artifacts: the JSON document and one SVG per layout.
#[derive(Clone, Debug)]
pub struct Output {
    pub document: Value,
    pub svgs: Vec<String>,
}

fn style() -> StyleConfig {
    StyleConfig {
        show_labels: true,
        show_orders: true,
        ..Default::default()
    }
}

pub fn run_generate(req: &GenerateRequest, ckpt: &ModelCheckpoint) -> Result<(CandidateSet, Output)> {
    let vocab = &ckpt.config.classes;
    let canvas = req.validate(vocab)?;
    let set = run_pipeline(&req.elements, &canvas, ckpt, &req.pipeline_config())?;
    let svgs = set
        .candidates
        .iter()
        .map(|c| export_svg(&c.candidate.layout, &style(), vocab))
        .collect::<Result<Vec<_>>>()?;
    let document = set.to_value(vocab)?;
    Ok((set, Output { document, svgs }))
}

pub fn run_retarget(req: &RetargetRequest, ckpt: &ModelCheckpoint) -> Result<(Layout, Output)> {
    let vocab = &ckpt.config.classes;
    let (source, canvas) = req.validate(vocab)?;
    let out = pipeline::retarget_layout(&source, &canvas, ckpt, req.seed)?;
    let document = json!({
        "seed": req.seed,
        "layout": layout_to_value(&out, vocab)?,
        "source_orders": assign_reading_orders(&source),
        "order_match": order_match_fraction(&out)?,
    });
    let svgs = vec![export_svg(&out, &style(), vocab)?];
    Ok((out, Output { document, svgs }))
}

pub fn run_evaluate(req: &EvaluateRequest, vocab: &ClassVocab) -> Result<(MetricReport, Output)> {
    let layouts = req
        .layouts
        .iter()
        .map(|v| layout_from_value(v.clone(), vocab))
        .collect::<Result<Vec<_>>>()?;
    let report = evaluate(&layouts, vocab, &DEFAULT_THRESHOLDS)?;
    let document = serde_json::to_value(&report)?;
    Ok((
        report,
        Output {
            document,
            svgs: Vec::new(),
        },
    ))
}
