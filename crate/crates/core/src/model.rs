//! The conditional generator, the two-branch discriminator, the named
//! parameter store and the binary checkpoint container.
//!
//! Generator: per-element features `[p, theta_in, s, r, d, frozen]` pass
//! through a two-layer encoder, a stack of residual self-attention relation
//! blocks applied within each layout, and an MLP decoder squashed to
//! `[0, 1]`. Heights of ratio-fixed elements are then replaced by `r * w`,
//! and frozen elements get their supplied geometry back.
//!
//! Discriminator: a global and a local CNN branch with independent weights,
//! each `k=4, s=2, p=1` convolutions with leaky rectifiers, a flattened
//! linear logit and a sigmoid. The global branch also carries the class-area
//! head (global average pool, linear, softplus).

use std::collections::HashMap;
use std::io::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::layout::{AspectClass, AttributeVector, ClassVocab, Geometry};
use crate::optim::AdamState;

pub const INIT_STD: f64 = 0.02;
const LEAKY_SLOPE: f64 = 0.2;
const KERNEL: usize = 4;
const LOGIT_CLAMP: f64 = 1e-3;

// ----- parameters ------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
}

impl ParamSpec {
    fn weight(name: impl Into<String>, shape: Vec<usize>) -> Self {
        Self {
            name: name.into(),
            shape,
            kind: ParamKind::Weight,
        }
    }

    fn bias(name: impl Into<String>, len: usize) -> Self {
        Self {
            name: name.into(),
            shape: vec![len],
            kind: ParamKind::Bias,
        }
    }
}

/// Ordered, named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Params {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl Params {
    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.names.push(name.into());
        self.tensors.push(t);
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensor(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.tensors[i]
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect(),
        }
    }

    /// Places every tensor on the tape, as trainable leaves or constants.
    pub fn bind(&self, graph: &mut Graph, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    graph.param(t.clone())
                } else {
                    graph.constant(t.clone())
                }
            })
            .collect::<Vec<_>>();
        let index = self.names.iter().cloned().zip(vars.iter().copied()).collect();
        Bound { vars, index }
    }

    fn check_specs(&self, specs: &[ParamSpec]) -> Result<()> {
        if specs.len() != self.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                specs.len(),
                self.len()
            )));
        }
        for (spec, (name, t)) in specs.iter().zip(self.iter()) {
            if spec.name != name || spec.shape != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` {:?} does not match config (`{}` {:?})",
                    t.shape(),
                    spec.name,
                    spec.shape
                )));
            }
        }
        Ok(())
    }
}

/// Parameter tensors placed on a graph.
pub struct Bound {
    vars: Vec<Var>,
    index: HashMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Var {
        *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` is not bound"))
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradients aligned with the parameter order.
    pub fn grads(&self, grads: &mut Gradients) -> Vec<Option<Tensor>> {
        self.vars.iter().map(|&v| grads.take(v)).collect()
    }
}

/// Weights i.i.d. `N(0, 0.02^2)`, biases zero.
pub fn init_parameters(specs: &[ParamSpec], seed: u64) -> Params {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, INIT_STD).expect("valid normal");
    let mut p = Params::default();
    for s in specs {
        let n: usize = s.shape.iter().product();
        let data = match s.kind {
            ParamKind::Weight => (0..n).map(|_| normal.sample(&mut rng)).collect(),
            ParamKind::Bias => vec![0.0; n],
        };
        p.push(s.name.clone(), Tensor::new(s.shape.clone(), data));
    }
    p
}

fn linear(graph: &mut Graph, b: &Bound, name: &str, x: Var) -> Var {
    let w = b.var(&format!("{name}.w"));
    let bias = b.var(&format!("{name}.b"));
    let y = graph.matmul(x, w);
    graph.add_row(y, bias)
}

// ----- configs ---------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub embed_dim: usize,
    pub encoder_hidden: usize,
    pub relation_blocks: usize,
    pub heads: usize,
    pub decoder_hidden: Vec<usize>,
    /// Largest log-factor between a generated box area and its conditioned
    /// area `s`.
    pub area_log_range: f64,
    /// Largest absolute log aspect ratio `ln(h/w)` of free-ratio elements.
    pub aspect_log_range: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            embed_dim: 128,
            encoder_hidden: 128,
            relation_blocks: 2,
            heads: 1,
            decoder_hidden: vec![128],
            area_log_range: std::f64::consts::LN_2,
            aspect_log_range: 20f64.ln(),
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim < 8 {
            return Err(Error::validation(format!("embed_dim {} must be >= 8", self.embed_dim)));
        }
        if self.relation_blocks < 1 {
            return Err(Error::validation("at least one relation block is required"));
        }
        if self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::validation(format!(
                "{} heads do not divide embed_dim {}",
                self.heads, self.embed_dim
            )));
        }
        for (name, v) in [
            ("area_log_range", self.area_log_range),
            ("aspect_log_range", self.aspect_log_range),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::validation(format!("{name} {v} must be > 0")));
            }
        }
        if self.encoder_hidden == 0 || self.decoder_hidden.contains(&0) {
            return Err(Error::validation("hidden layer widths must be positive"));
        }
        Ok(())
    }

    /// Per-element input width for `m` classes.
    pub fn input_dim(m: usize) -> usize {
        m + 8
    }

    pub fn param_specs(&self, m: usize) -> Vec<ParamSpec> {
        let e = self.embed_dim;
        let mut specs = vec![
            ParamSpec::weight("enc0.w", vec![Self::input_dim(m), self.encoder_hidden]),
            ParamSpec::bias("enc0.b", self.encoder_hidden),
            ParamSpec::weight("enc1.w", vec![self.encoder_hidden, e]),
            ParamSpec::bias("enc1.b", e),
        ];
        for k in 0..self.relation_blocks {
            for proj in ["q", "k", "v", "o"] {
                specs.push(ParamSpec::weight(format!("rel{k}.{proj}"), vec![e, e]));
            }
            specs.push(ParamSpec::weight(format!("rel{k}.ff0.w"), vec![e, e]));
            specs.push(ParamSpec::bias(format!("rel{k}.ff0.b"), e));
            specs.push(ParamSpec::weight(format!("rel{k}.ff1.w"), vec![e, e]));
            specs.push(ParamSpec::bias(format!("rel{k}.ff1.b"), e));
        }
        let mut width = e;
        for (k, &h) in self.decoder_hidden.iter().enumerate() {
            specs.push(ParamSpec::weight(format!("dec{k}.w"), vec![width, h]));
            specs.push(ParamSpec::bias(format!("dec{k}.b"), h));
            width = h;
        }
        specs.push(ParamSpec::weight("out.w", vec![width, 4]));
        specs.push(ParamSpec::bias("out.b", 4));
        specs
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscriminatorConfig {
    pub conv_channels: Vec<usize>,
    /// Keep probability of element dropout in the local branch.
    pub dropout_b: f64,
    pub local_branch: bool,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            conv_channels: vec![32, 64, 128, 256],
            dropout_b: 0.5,
            local_branch: true,
        }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self, render_size: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.dropout_b) {
            return Err(Error::validation(format!("dropout_b {} outside [0,1]", self.dropout_b)));
        }
        if self.conv_channels.is_empty() || self.conv_channels.contains(&0) {
            return Err(Error::validation("conv_channels must be non-empty and positive"));
        }
        let down = 1usize << self.conv_channels.len();
        if render_size < down || !render_size.is_multiple_of(down) {
            return Err(Error::validation(format!(
                "render size {render_size} must be a positive multiple of {down} for {} stride-2 layers",
                self.conv_channels.len()
            )));
        }
        Ok(())
    }

    /// Width of the pooled last-layer feature vector.
    pub fn feature_len(&self) -> usize {
        self.conv_channels.last().copied().unwrap_or(0)
    }

    /// Width of the flattened last activation map.
    pub fn feature_dim(&self, render_size: usize) -> usize {
        let side = render_size >> self.conv_channels.len();
        self.feature_len() * side * side
    }

    fn branch_specs(&self, prefix: &str, m: usize, render_size: usize, specs: &mut Vec<ParamSpec>) {
        let mut c_in = m;
        for (k, &c) in self.conv_channels.iter().enumerate() {
            specs.push(ParamSpec::weight(
                format!("{prefix}.conv{k}.w"),
                vec![c, c_in, KERNEL, KERNEL],
            ));
            specs.push(ParamSpec::bias(format!("{prefix}.conv{k}.b"), c));
            c_in = c;
        }
        specs.push(ParamSpec::weight(
            format!("{prefix}.fc.w"),
            vec![self.feature_dim(render_size), 1],
        ));
        specs.push(ParamSpec::bias(format!("{prefix}.fc.b"), 1));
    }

    pub fn param_specs(&self, m: usize, render_size: usize) -> Vec<ParamSpec> {
        let mut specs = Vec::new();
        self.branch_specs("global", m, render_size, &mut specs);
        specs.push(ParamSpec::weight("area.w", vec![self.feature_len(), m]));
        specs.push(ParamSpec::bias("area.b", m));
        if self.local_branch {
            self.branch_specs("local", m, render_size, &mut specs);
        }
        specs
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub classes: ClassVocab,
    /// Square raster side used by the discriminator.
    pub render_size: usize,
    /// Canvas family the model serves; `None` for a mixed-canvas model.
    pub aspect_class: Option<AspectClass>,
    pub order_conditioning: bool,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            classes: ClassVocab::default(),
            render_size: 64,
            aspect_class: None,
            order_conditioning: false,
            generator: GeneratorConfig::default(),
            discriminator: DiscriminatorConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.discriminator.validate(self.render_size)
    }

    pub fn classes(&self) -> usize {
        self.classes.len()
    }

    pub fn generator_specs(&self) -> Vec<ParamSpec> {
        self.generator.param_specs(self.classes())
    }

    pub fn discriminator_specs(&self) -> Vec<ParamSpec> {
        self.discriminator.param_specs(self.classes(), self.render_size)
    }

    /// Fresh generator and discriminator parameters from one seed.
    pub fn init(&self, seed: u64) -> Result<(Params, Params)> {
        self.validate()?;
        let g = init_parameters(&self.generator_specs(), seed);
        let d = init_parameters(&self.discriminator_specs(), seed ^ 0x9e37_79b9_7f4a_7c15);
        Ok((g, d))
    }
}

// ----- generator -------------------------------------------------------

/// A batch of layouts flattened into element rows.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GeneratorInput {
    /// `(start, len)` rows of each layout.
    pub segments: Vec<(usize, usize)>,
    pub class_probs: Vec<Vec<f64>>,
    pub init: Vec<Geometry>,
    pub attributes: Vec<AttributeVector>,
    /// Supplied geometry of frozen elements.
    pub frozen: Vec<Option<Geometry>>,
}

impl GeneratorInput {
    pub fn push_layout(
        &mut self,
        class_probs: Vec<Vec<f64>>,
        init: Vec<Geometry>,
        attributes: Vec<AttributeVector>,
        frozen: Vec<Option<Geometry>>,
    ) {
        self.segments.push((self.init.len(), init.len()));
        self.class_probs.extend(class_probs);
        self.init.extend(init);
        self.attributes.extend(attributes);
        self.frozen.extend(frozen);
    }

    pub fn rows(&self) -> usize {
        self.init.len()
    }

    pub fn validate(&self, m: usize) -> Result<()> {
        let t = self.init.len();
        if self.class_probs.len() != t || self.attributes.len() != t || self.frozen.len() != t {
            return Err(Error::validation(format!(
                "generator input has {} geometries, {} class rows, {} attribute rows, {} frozen flags",
                t,
                self.class_probs.len(),
                self.attributes.len(),
                self.frozen.len()
            )));
        }
        let mut next = 0;
        for &(start, len) in &self.segments {
            if start != next || len == 0 {
                return Err(Error::validation("layout segments must be contiguous and non-empty"));
            }
            next = start + len;
        }
        if next != t {
            return Err(Error::validation("layout segments do not cover every row"));
        }
        for i in 0..t {
            if self.class_probs[i].len() != m {
                return Err(Error::validation(format!(
                    "element {i} has {} class probabilities, model expects {m}",
                    self.class_probs[i].len()
                )));
            }
            let a = self.attributes[i];
            if !(a.r >= 0.0) || !a.r.is_finite() {
                return Err(Error::validation(format!("element {i} has aspect ratio {} < 0", a.r)));
            }
            if !(a.s.is_finite() && a.d.is_finite()) {
                return Err(Error::validation(format!("element {i} has non-finite attributes")));
            }
            if !self.init[i].is_finite() || self.frozen[i].is_some_and(|g| !g.is_finite()) {
                return Err(Error::validation(format!("element {i} has non-finite geometry")));
            }
        }
        Ok(())
    }

    fn features(&self, m: usize) -> Tensor {
        let width = GeneratorConfig::input_dim(m);
        let mut data = Vec::with_capacity(self.rows() * width);
        for i in 0..self.rows() {
            data.extend_from_slice(&self.class_probs[i]);
            let g = self.frozen[i].unwrap_or(self.init[i]);
            data.extend_from_slice(&g.to_array());
            let a = self.attributes[i];
            data.extend_from_slice(&[a.s, a.r, a.d, f64::from(u8::from(self.frozen[i].is_some()))]);
        }
        Tensor::new(vec![self.rows(), width], data)
    }
}

fn relation_block(
    graph: &mut Graph,
    b: &Bound,
    cfg: &GeneratorConfig,
    k: usize,
    h: Var,
    segments: &[(usize, usize)],
) -> Var {
    let q = graph.matmul(h, b.var(&format!("rel{k}.q")));
    let kk = graph.matmul(h, b.var(&format!("rel{k}.k")));
    let v = graph.matmul(h, b.var(&format!("rel{k}.v")));
    let hd = cfg.embed_dim / cfg.heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.heads);
    for head in 0..cfg.heads {
        let (qh, kh, vh) = if cfg.heads == 1 {
            (q, kk, v)
        } else {
            (
                graph.slice_cols(q, head * hd, hd),
                graph.slice_cols(kk, head * hd, hd),
                graph.slice_cols(v, head * hd, hd),
            )
        };
        let mut outs = Vec::with_capacity(segments.len());
        for &(start, len) in segments {
            let qs = graph.slice_rows(qh, start, len);
            let ks = graph.slice_rows(kh, start, len);
            let vs = graph.slice_rows(vh, start, len);
            let logits = graph.matmul_nt(qs, ks);
            let logits = graph.scale(logits, scale);
            let att = graph.softmax_rows(logits);
            outs.push(graph.matmul(att, vs));
        }
        heads.push(graph.concat_rows(&outs));
    }
    let mixed = if heads.len() == 1 {
        heads[0]
    } else {
        graph.concat_cols(&heads)
    };
    let attended = graph.matmul(mixed, b.var(&format!("rel{k}.o")));
    let h = graph.add(h, attended);
    let f = linear(graph, b, &format!("rel{k}.ff0"), h);
    let f = graph.relu(f);
    let f = linear(graph, b, &format!("rel{k}.ff1"), f);
    graph.add(h, f)
}

/// Maps a squashed position `u` in `[0, 1]` to a center in
/// `[side/2, 1 - side/2]`, so the box lies inside the canvas.
fn inside_center(graph: &mut Graph, u: Var, side: Var) -> Var {
    let half = graph.scale(side, 0.5);
    let shrink = graph.mul(u, side);
    let offset = graph.sub(half, shrink);
    graph.add(u, offset)
}

/// Elementwise `min(x, cap)` with constant caps.
fn min_const(graph: &mut Graph, x: Var, cap: Tensor) -> Var {
    let neg_x = graph.scale(x, -1.0);
    let gap = graph.add_const(neg_x, &cap);
    let gap = graph.relu(gap);
    let neg_gap = graph.scale(gap, -1.0);
    graph.add_const(neg_gap, &cap)
}

/// Refined geometries `[T, 4]` for every element row of `input`.
///
/// Positions are a sigmoid of the decoder output plus the logit of the
/// initial position, squashed so each box lies inside the canvas. Sizes
/// are parameterized around the condition: the log area is
/// `ln s + area_log_range * tanh(.)`, free-ratio elements get a log
/// aspect `aspect_log_range * tanh(.)`, and ratio-fixed elements take
/// `h = r * w` with `w` capped at `min(1, 1/r)`. Free sides are capped at 1.
pub fn generator_forward(graph: &mut Graph, b: &Bound, cfg: &ModelConfig, input: &GeneratorInput) -> Result<Var> {
    let m = cfg.classes();
    input.validate(m)?;
    let g = &cfg.generator;
    let t = input.rows();
    let x = graph.constant(input.features(m));
    let h = linear(graph, b, "enc0", x);
    let h = graph.relu(h);
    let mut h = linear(graph, b, "enc1", h);
    for k in 0..g.relation_blocks {
        h = relation_block(graph, b, g, k, h, &input.segments);
    }
    for k in 0..g.decoder_hidden.len() {
        h = linear(graph, b, &format!("dec{k}"), h);
        h = graph.relu(h);
    }
    let delta = linear(graph, b, "out", h);

    let logit = |v: f64| {
        let v = v.clamp(LOGIT_CLAMP, 1.0 - LOGIT_CLAMP);
        (v / (1.0 - v)).ln()
    };
    let mut pos_base = Vec::with_capacity(2 * t);
    let mut log_s = Vec::with_capacity(t);
    let mut log_r = Vec::with_capacity(t);
    let mut free = Vec::with_capacity(t);
    let mut ratio = Vec::with_capacity(t);
    let mut w_cap = Vec::with_capacity(t);
    for (init, a) in input.init.iter().zip(&input.attributes) {
        pos_base.extend_from_slice(&[logit(init.xc), logit(init.yc)]);
        log_s.push(a.s.max(f64::MIN_POSITIVE).ln());
        if a.r > 0.0 {
            log_r.push(a.r.ln());
            free.push(0.0);
            ratio.push(a.r);
            w_cap.push((1.0 / a.r).min(1.0));
        } else {
            log_r.push(0.0);
            free.push(1.0);
            ratio.push(0.0);
            w_cap.push(1.0);
        }
    }
    let col = |v: Vec<f64>| Tensor::new(vec![t, 1], v);

    let pos = graph.slice_cols(delta, 0, 2);
    let pos = graph.add_const(pos, &Tensor::new(vec![t, 2], pos_base));
    let pos = graph.sigmoid(pos);

    let area = graph.slice_cols(delta, 2, 1);
    let area = graph.tanh(area);
    let area = graph.scale(area, g.area_log_range);
    let log_area = graph.add_const(area, &col(log_s));
    let aspect = graph.slice_cols(delta, 3, 1);
    let aspect = graph.tanh(aspect);
    let aspect = graph.scale(aspect, g.aspect_log_range);
    // Fixed elements ignore the aspect head and use ln r instead.
    let aspect = graph.mul_const(aspect, col(free.clone()));
    let log_aspect = graph.add_const(aspect, &col(log_r));

    let lw = graph.sub(log_area, log_aspect);
    let lw = graph.scale(lw, 0.5);
    let w = graph.exp(lw);
    let w = min_const(graph, w, col(w_cap));
    let lh = graph.add(log_area, log_aspect);
    let lh = graph.scale(lh, 0.5);
    let h_free = graph.exp(lh);
    let h_free = min_const(graph, h_free, col(vec![1.0; t]));
    let h_free = graph.mul_const(h_free, col(free));
    let h_fixed = graph.mul_const(w, col(ratio));
    let h_final = graph.add(h_free, h_fixed);

    let ux = graph.slice_cols(pos, 0, 1);
    let uy = graph.slice_cols(pos, 1, 1);
    let xc = inside_center(graph, ux, w);
    let yc = inside_center(graph, uy, h_final);
    let out = graph.concat_cols(&[xc, yc, w, h_final]);

    if input.frozen.iter().all(Option::is_none) {
        return Ok(out);
    }
    let mut keep = Vec::with_capacity(4 * t);
    let mut fixed = Vec::with_capacity(4 * t);
    for f in &input.frozen {
        match f {
            Some(g) => {
                keep.extend_from_slice(&[0.0; 4]);
                fixed.extend_from_slice(&g.to_array());
            }
            None => {
                keep.extend_from_slice(&[1.0; 4]);
                fixed.extend_from_slice(&[0.0; 4]);
            }
        }
    }
    let kept = graph.mul_const(out, Tensor::new(vec![t, 4], keep));
    Ok(graph.add_const(kept, &Tensor::new(vec![t, 4], fixed)))
}

/// Inference-only generator pass.
pub fn generate(params: &Params, cfg: &ModelConfig, input: &GeneratorInput) -> Result<Vec<Geometry>> {
    let mut graph = Graph::new();
    let b = params.bind(&mut graph, false);
    let out = generator_forward(&mut graph, &b, cfg, input)?;
    Ok(graph
        .value(out)
        .data()
        .chunks(4)
        .map(|c| Geometry::new(c[0], c[1], c[2], c[3]))
        .collect())
}

// ----- discriminator ---------------------------------------------------

pub struct DiscriminatorOutput {
    /// `[B, 1]` realness of the full render.
    pub p_global: Var,
    /// `[B, 1]` realness of the dropout render, when the branch exists.
    pub p_local: Option<Var>,
    /// `[B, M]` predicted class-area totals.
    pub s_pred: Var,
    /// `[B, C_last]` pooled last convolution of the global branch.
    pub features: Var,
}

fn branch(graph: &mut Graph, b: &Bound, cfg: &DiscriminatorConfig, prefix: &str, x: Var) -> (Var, Var) {
    let mut h = x;
    for k in 0..cfg.conv_channels.len() {
        let w = b.var(&format!("{prefix}.conv{k}.w"));
        let bias = b.var(&format!("{prefix}.conv{k}.b"));
        h = graph.conv2d(h, w, bias, 2, 1);
        h = graph.leaky_relu(h, LEAKY_SLOPE);
    }
    let batch = graph.value(h).shape()[0];
    let flat_len = graph.value(h).len() / batch.max(1);
    let flat = graph.reshape(h, vec![batch, flat_len]);
    let logit = linear(graph, b, &format!("{prefix}.fc"), flat);
    (graph.sigmoid(logit), h)
}

fn check_image(graph: &Graph, x: Var, cfg: &ModelConfig) -> Result<()> {
    let s = graph.value(x).shape();
    let want = [cfg.classes(), cfg.render_size, cfg.render_size];
    if s.len() != 4 || s[1..] != want {
        return Err(Error::validation(format!(
            "discriminator expects [B, {}, {}, {}] images, got {s:?}",
            want[0], want[1], want[2]
        )));
    }
    Ok(())
}

pub fn discriminator_forward(
    graph: &mut Graph,
    b: &Bound,
    cfg: &ModelConfig,
    global: Var,
    local: Option<Var>,
) -> Result<DiscriminatorOutput> {
    check_image(graph, global, cfg)?;
    let (p_global, last) = branch(graph, b, &cfg.discriminator, "global", global);
    let features = graph.global_avg_pool(last);
    let s = linear(graph, b, "area", features);
    let s_pred = graph.softplus(s);
    let p_local = match (local, cfg.discriminator.local_branch) {
        (Some(x), true) => {
            check_image(graph, x, cfg)?;
            if graph.value(x).shape() != graph.value(global).shape() {
                return Err(Error::validation("global and local images differ in shape"));
            }
            Some(branch(graph, b, &cfg.discriminator, "local", x).0)
        }
        _ => None,
    };
    Ok(DiscriminatorOutput {
        p_global,
        p_local,
        s_pred,
        features,
    })
}

// ----- checkpoint ------------------------------------------------------

const MAGIC: &[u8; 4] = b"LFCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub generator: AdamState,
    pub discriminator: AdamState,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelCheckpoint {
    pub config: ModelConfig,
    /// Training configuration that produced the checkpoint, kept opaque.
    pub training: serde_json::Value,
    pub generator: Params,
    pub discriminator: Params,
    pub optimizer: Option<OptimizerState>,
    pub seed: u64,
    pub step: u64,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    group: String,
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    config: ModelConfig,
    training: serde_json::Value,
    seed: u64,
    step: u64,
    adam_steps: Option<(u64, u64)>,
    tensors: Vec<TensorEntry>,
}

const GROUPS: [&str; 6] = [
    "generator",
    "discriminator",
    "adam.g.m",
    "adam.g.v",
    "adam.d.m",
    "adam.d.v",
];

impl ModelCheckpoint {
    /// A step-0 checkpoint with freshly initialized parameters.
    pub fn initialize(config: ModelConfig, seed: u64) -> Result<Self> {
        let (generator, discriminator) = config.init(seed)?;
        Ok(Self {
            config,
            training: serde_json::Value::Null,
            generator,
            discriminator,
            optimizer: None,
            seed,
            step: 0,
        })
    }

    fn groups(&self) -> Vec<(&'static str, &Params)> {
        let mut g = vec![(GROUPS[0], &self.generator), (GROUPS[1], &self.discriminator)];
        if let Some(o) = &self.optimizer {
            g.extend([
                (GROUPS[2], &o.generator.m),
                (GROUPS[3], &o.generator.v),
                (GROUPS[4], &o.discriminator.m),
                (GROUPS[5], &o.discriminator.v),
            ]);
        }
        g
    }

    /// `LFCK`, little-endian `u32` version, `u64` header length, JSON header,
    /// then every tensor as little-endian `f64` in header order.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let groups = self.groups();
        let tensors = groups
            .iter()
            .flat_map(|(group, p)| {
                p.iter().map(move |(name, t)| TensorEntry {
                    group: (*group).to_string(),
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                })
            })
            .collect();
        let header = Header {
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            training: self.training.clone(),
            seed: self.seed,
            step: self.step,
            adam_steps: self.optimizer.as_ref().map(|o| (o.generator.t, o.discriminator.t)),
            tensors,
        };
        let json = serde_json::to_vec(&header)?;
        let scalars: usize = groups.iter().map(|(_, p)| p.scalar_count()).sum();
        let mut out = Vec::with_capacity(16 + json.len() + 8 * scalars);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, p) in &groups {
            for (_, t) in p.iter() {
                for x in t.data() {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(bad("not a layoutforge checkpoint"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body)?;
        header.config.validate()?;
        let mut blob = &bytes[16 + hlen..];
        let mut groups: Vec<Params> = vec![Params::default(); GROUPS.len()];
        for e in &header.tensors {
            let gi = GROUPS
                .iter()
                .position(|g| *g == e.group)
                .ok_or_else(|| Error::Checkpoint(format!("unknown tensor group `{}`", e.group)))?;
            let n: usize = e.shape.iter().product();
            if blob.len() < 8 * n {
                return Err(bad("truncated tensor data"));
            }
            let data = blob[..8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            blob = &blob[8 * n..];
            groups[gi].push(e.name.clone(), Tensor::new(e.shape.clone(), data));
        }
        if !blob.is_empty() {
            return Err(bad("trailing bytes after tensor data"));
        }
        let mut it = groups.into_iter();
        let generator = it.next().expect("group");
        let discriminator = it.next().expect("group");
        generator.check_specs(&header.config.generator_specs())?;
        discriminator.check_specs(&header.config.discriminator_specs())?;
        let optimizer = match header.adam_steps {
            Some((tg, td)) => {
                let (gm, gv, dm, dv) = (
                    it.next().expect("group"),
                    it.next().expect("group"),
                    it.next().expect("group"),
                    it.next().expect("group"),
                );
                for (p, like) in [
                    (&gm, &generator),
                    (&gv, &generator),
                    (&dm, &discriminator),
                    (&dv, &discriminator),
                ] {
                    if p.names() != like.names() {
                        return Err(bad("optimizer moments do not match parameters"));
                    }
                }
                Some(OptimizerState {
                    generator: AdamState { t: tg, m: gm, v: gv },
                    discriminator: AdamState { t: td, m: dm, v: dv },
                })
            }
            None => None,
        };
        Ok(Self {
            config: header.config,
            training: header.training,
            generator,
            discriminator,
            optimizer,
            seed: header.seed,
            step: header.step,
        })
    }

    /// Writes through a temporary file and renames it into place.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes()?)?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes =
            std::fs::read(path).map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::autodiff::{finite_difference, relative_error};
    use proptest::prelude::*;
    use rand::Rng;

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            render_size: 16,
            generator: GeneratorConfig {
                embed_dim: 16,
                encoder_hidden: 16,
                relation_blocks: 2,
                heads: 2,
                decoder_hidden: vec![16],
                ..Default::default()
            },
            discriminator: DiscriminatorConfig {
                conv_channels: vec![4, 8],
                ..Default::default()
            },
            ..Default::default()
        }
    }

    fn one_hot(c: usize) -> Vec<f64> {
        ClassVocab::default().one_hot(c)
    }

    fn random_input(rng: &mut ChaCha8Rng, layouts: usize) -> GeneratorInput {
        let mut input = GeneratorInput::default();
        for _ in 0..layouts {
            let n = rng.random_range(2..=6);
            let mut probs = Vec::new();
            let mut init = Vec::new();
            let mut attrs = Vec::new();
            for _ in 0..n {
                probs.push(one_hot(rng.random_range(0..6)));
                init.push(Geometry::new(
                    rng.random_range(0.05..0.95),
                    rng.random_range(0.05..0.95),
                    rng.random_range(0.05..0.95),
                    rng.random_range(0.05..0.95),
                ));
                let r = if rng.random_bool(0.5) {
                    rng.random_range(0.2..4.0)
                } else {
                    0.0
                };
                attrs.push(AttributeVector::new(rng.random_range(0.01..0.3), r, 0.0));
            }
            input.push_layout(probs, init, attrs, vec![None; n]);
        }
        input
    }

    /// Scales every weight so that outputs are far from the sigmoid midpoint.
    fn spread(p: &mut Params, k: f64) {
        for i in 0..p.len() {
            for x in p.tensor_mut(i).data_mut() {
                *x *= k;
            }
        }
    }

    #[test]
    fn init_is_reproducible_and_gaussian() {
        let specs = vec![ParamSpec::weight("w", vec![300, 300]), ParamSpec::bias("b", 7)];
        let a = init_parameters(&specs, 5);
        assert_eq!(a, init_parameters(&specs, 5));
        assert_ne!(a, init_parameters(&specs, 6));
        let w = a.get("w").unwrap().data();
        let n = w.len() as f64;
        let mean = w.iter().sum::<f64>() / n;
        let std = (w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() < 3.0 * INIT_STD / n.sqrt(), "mean {mean}");
        assert!((std - INIT_STD).abs() < 0.05 * INIT_STD, "std {std}");
        assert!(a.get("b").unwrap().data().iter().all(|&x| x == 0.0));
        assert!(init_parameters(&[], 1).is_empty());
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let mut c = tiny_config();
        c.generator.embed_dim = 4;
        assert!(c.validate().is_err());
        let mut c = tiny_config();
        c.generator.relation_blocks = 0;
        assert!(c.validate().is_err());
        let mut c = tiny_config();
        c.discriminator.dropout_b = 1.5;
        assert!(c.validate().is_err());
        let mut c = tiny_config();
        c.render_size = 10;
        assert!(c.validate().is_err());
    }

    #[test]
    fn generator_contracts() {
        let cfg = tiny_config();
        let (mut g, _) = cfg.init(1).unwrap();
        spread(&mut g, 40.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let input = random_input(&mut rng, 8);
        let out = generate(&g, &cfg, &input).unwrap();
        assert_eq!(out.len(), input.rows());
        for (o, a) in out.iter().zip(&input.attributes) {
            for x in o.to_array() {
                assert!((0.0..=1.0).contains(&x), "{o:?}");
            }
            if a.r > 0.0 && o.w > 1e-6 {
                assert!((o.h / o.w - a.r).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn frozen_element_returns_supplied_geometry() {
        let cfg = tiny_config();
        let (g, _) = cfg.init(3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut input = random_input(&mut rng, 2);
        let fixed = Geometry::new(0.31, 0.62, 0.4, 0.3);
        input.frozen[1] = Some(fixed);
        let out = generate(&g, &cfg, &input).unwrap();
        assert_eq!(out[1], fixed);
    }

    #[test]
    fn generator_rejects_bad_input() {
        let cfg = tiny_config();
        let (g, _) = cfg.init(3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut input = random_input(&mut rng, 1);
        input.attributes[0].r = -1.0;
        assert!(generate(&g, &cfg, &input).is_err());
        let mut input = random_input(&mut rng, 1);
        input.class_probs[0] = vec![1.0];
        assert!(generate(&g, &cfg, &input).is_err());
    }

    #[test]
    fn discriminator_contracts() {
        let cfg = tiny_config();
        let (_, d) = cfg.init(5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let img: Vec<f64> = (0..2 * 6 * 16 * 16).map(|_| rng.random::<f64>()).collect();
        let run = || {
            let mut graph = Graph::new();
            let b = d.bind(&mut graph, false);
            let x = graph.constant(Tensor::new(vec![2, 6, 16, 16], img.clone()));
            let out = discriminator_forward(&mut graph, &b, &cfg, x, Some(x)).unwrap();
            let p = graph.value(out.p_global).data().to_vec();
            let q = graph.value(out.p_local.unwrap()).data().to_vec();
            let s = graph.value(out.s_pred).clone();
            let f = graph.value(out.features).clone();
            (p, q, s, f)
        };
        let (p, q, s, f) = run();
        assert_eq!((p.clone(), q.clone(), s.clone(), f.clone()), run());
        assert!(p.iter().chain(&q).all(|&x| x > 0.0 && x < 1.0));
        assert_eq!(s.shape(), &[2, 6]);
        assert_eq!(f.shape(), &[2, cfg.discriminator.feature_len()]);

        let mut graph = Graph::new();
        let b = d.bind(&mut graph, false);
        let x = graph.constant(Tensor::zeros(vec![1, 6, 8, 8]));
        assert!(discriminator_forward(&mut graph, &b, &cfg, x, None).is_err());
    }

    #[test]
    fn end_to_end_gradient_spot_check() {
        use crate::losses::bce_mean;
        use crate::render::{render_batch, RenderItem};
        let cfg = tiny_config();
        let (mut g, d) = cfg.init(7).unwrap();
        spread(&mut g, 10.0);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let input = random_input(&mut rng, 2);
        let loss_of = |g: &Params, graph: &mut Graph, trainable: bool| {
            let gb = g.bind(graph, trainable);
            let db = d.bind(graph, false);
            let geoms = generator_forward(graph, &gb, &cfg, &input).unwrap();
            let items: Vec<RenderItem> = input
                .segments
                .iter()
                .map(|&(s, l)| RenderItem {
                    start: s,
                    class_probs: input.class_probs[s..s + l].to_vec(),
                    mask: None,
                })
                .collect();
            let img = render_batch(graph, geoms, &items, 16, 16, 6);
            let out = discriminator_forward(graph, &db, &cfg, img, None).unwrap();
            let l = bce_mean(graph, out.p_global, true);
            (gb, l)
        };
        let mut graph = Graph::new();
        let (gb, l) = loss_of(&g, &mut graph, true);
        let mut grads = graph.backward(l);
        let all = gb.grads(&mut grads);
        // Spot-check entries of the output layer.
        let idx = g.names().iter().position(|n| n == "out.w").unwrap();
        let analytic: Vec<f64> = all[idx].as_ref().unwrap().data()[..8].to_vec();
        let base = g.tensor(idx).data()[..8].to_vec();
        let numeric = finite_difference(
            |x| {
                let mut p = g.clone();
                p.tensor_mut(idx).data_mut()[..8].copy_from_slice(x);
                let mut graph = Graph::new();
                let (_, l) = loss_of(&p, &mut graph, false);
                graph.value(l).item()
            },
            &base,
            1e-6,
        );
        let err = relative_error(&analytic, &numeric);
        assert!(err < 1e-2, "relative error {err}");
    }

    #[test]
    fn checkpoint_round_trip() {
        let cfg = tiny_config();
        let mut ck = ModelCheckpoint::initialize(cfg, 9).unwrap();
        ck.step = 12;
        ck.training = serde_json::json!({"lr": 0.001});
        ck.optimizer = Some(OptimizerState {
            generator: AdamState::new(&ck.generator),
            discriminator: AdamState::new(&ck.discriminator),
        });
        let bytes = ck.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"LFCK");
        let back = ModelCheckpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.lfck");
        ck.save(&path).unwrap();
        assert_eq!(ModelCheckpoint::load(&path).unwrap(), ck);
    }

    #[test]
    fn corrupt_checkpoints_rejected() {
        let ck = ModelCheckpoint::initialize(tiny_config(), 9).unwrap();
        let bytes = ck.to_bytes().unwrap();
        assert!(ModelCheckpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(ModelCheckpoint::from_bytes(&wrong).is_err());
        let mut version = bytes;
        version[4] = 9;
        assert!(ModelCheckpoint::from_bytes(&version).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn generator_is_permutation_equivariant(seed in any::<u64>()) {
            let cfg = tiny_config();
            let (mut g, _) = cfg.init(seed).unwrap();
            spread(&mut g, 20.0);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let input = random_input(&mut rng, 1);
            let n = input.rows();
            let perm: Vec<usize> = (0..n).rev().collect();
            let mut permuted = GeneratorInput::default();
            permuted.push_layout(
                perm.iter().map(|&i| input.class_probs[i].clone()).collect(),
                perm.iter().map(|&i| input.init[i]).collect(),
                perm.iter().map(|&i| input.attributes[i]).collect(),
                perm.iter().map(|&i| input.frozen[i]).collect(),
            );
            let a = generate(&g, &cfg, &input).unwrap();
            let b = generate(&g, &cfg, &permuted).unwrap();
            for (k, &i) in perm.iter().enumerate() {
                for (x, y) in a[i].to_array().iter().zip(b[k].to_array()) {
                    prop_assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }
}
