//! Alternating adversarial training: one discriminator update followed by
//! one generator update per batch, with periodic held-out evaluation.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor};
use crate::data::split_corpus;
use crate::error::{Error, Result};
use crate::geometry::legalize_geometry;
use crate::layout::{AspectClass, AttributeVector, Element, Geometry, Layout};
use crate::losses::{
    alignment_value_grad, bce_mean, class_area_totals, geometry_loss, l1_rows_mean, margin_area_value_grad,
    order_value_grad, overlap_value_grad, LossWeights, DEFAULT_ALPHA,
};
use crate::metrics::{evaluate, MetricReport, DEFAULT_THRESHOLDS};
use crate::model::{
    discriminator_forward, generate, generator_forward, GeneratorInput, ModelCheckpoint, ModelConfig, OptimizerState,
};
use crate::optim::{AdamConfig, AdamState};
use crate::render::{render_batch, sample_dropout_mask_with, RenderItem};

/// Mean and standard deviation of each initial geometry coordinate.
pub const INIT_MEAN: f64 = 0.5;
pub const INIT_STD: f64 = 0.15;
pub const INIT_CLIP: (f64, f64) = (0.05, 0.95);

const EVAL_SALT: u64 = 0x5eed_e7a1;
const GENERATE_CHUNK: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub steps: u64,
    /// Keep probability of element dropout.
    pub dropout_b: f64,
    pub weights: LossWeights,
    pub alpha: f64,
    pub seed: u64,
    pub aspect_class: Option<AspectClass>,
    pub order_conditioning: bool,
    /// Probability that a batch layout's product image is frozen at its
    /// real geometry, so the model learns to arrange around a fixed image.
    pub freeze_product_prob: f64,
    pub train_fraction: f64,
    /// Evaluate every this many steps; 0 evaluates only before and after.
    pub eval_every: u64,
    /// Held-out layouts used per evaluation; 0 disables evaluation.
    pub eval_samples: usize,
    /// Write a checkpoint every this many steps when `out_dir` is set.
    pub checkpoint_every: u64,
    pub out_dir: Option<PathBuf>,
    pub model: ModelConfig,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-5,
            beta1: 0.5,
            beta2: 0.999,
            batch_size: 64,
            steps: 5000,
            dropout_b: 0.5,
            weights: LossWeights::default(),
            alpha: DEFAULT_ALPHA,
            seed: 0,
            aspect_class: None,
            order_conditioning: false,
            freeze_product_prob: 0.5,
            train_fraction: 0.9,
            eval_every: 500,
            eval_samples: 200,
            checkpoint_every: 0,
            out_dir: None,
            model: ModelConfig::default(),
        }
    }
}

impl TrainingConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let de = toml::Deserializer::parse(text).map_err(|e| Error::Parse {
            path: String::new(),
            message: e.to_string(),
        })?;
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| Error::Parse {
            path: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::validation(format!("cannot encode config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::validation(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::validation("batch_size must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.dropout_b) {
            return Err(Error::validation(format!(
                "dropout_b must lie in [0, 1], got {}",
                self.dropout_b
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::validation("beta1 and beta2 must lie in [0, 1)"));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::validation(format!("alpha must be > 0, got {}", self.alpha)));
        }
        if !(0.0..=1.0).contains(&self.freeze_product_prob) {
            return Err(Error::validation("freeze_product_prob must lie in [0, 1]"));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return Err(Error::validation("train_fraction must lie in (0, 1]"));
        }
        self.weights.validate()?;
        self.model_config().validate()
    }

    /// Model configuration with the training-level aspect, order and
    /// dropout settings applied.
    pub fn model_config(&self) -> ModelConfig {
        let mut m = self.model.clone();
        m.aspect_class = self.aspect_class;
        m.order_conditioning = self.order_conditioning;
        m.discriminator.dropout_b = self.dropout_b;
        m
    }

    /// Loss weights in effect: the order weight is zero without order
    /// conditioning.
    pub fn effective_weights(&self) -> LossWeights {
        let mut w = self.weights;
        if !self.order_conditioning {
            w.w_ord = 0.0;
        }
        w
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            ..AdamConfig::default()
        }
    }
}

/// Every loss value from one training step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: u64,
    pub d_total: f64,
    /// Cross-entropy part of the discriminator loss.
    pub d_adv: f64,
    /// Attribute reconstruction part of the discriminator loss.
    pub d_recon: f64,
    pub g_total: f64,
    pub adv: f64,
    pub area: f64,
    pub over: f64,
    pub alg: f64,
    pub ord: f64,
}

impl LossReport {
    pub const CSV_HEADER: &'static str = "step,d_total,d_adv,d_recon,g_total,adv,area,over,alg,ord";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.d_total,
            self.d_adv,
            self.d_recon,
            self.g_total,
            self.adv,
            self.area,
            self.over,
            self.alg,
            self.ord
        )
    }

    fn check_finite(&self) -> Result<()> {
        let terms = [
            ("d_total", self.d_total),
            ("d_adv", self.d_adv),
            ("d_recon", self.d_recon),
            ("g_total", self.g_total),
            ("adv", self.adv),
            ("area", self.area),
            ("over", self.over),
            ("alg", self.alg),
            ("ord", self.ord),
        ];
        match terms.iter().find(|(_, v)| !v.is_finite()) {
            Some((term, _)) => Err(Error::NonFinite { term, step: self.step }),
            None => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: u64,
    pub report: MetricReport,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: ModelCheckpoint,
    pub losses: Vec<LossReport>,
    pub evaluations: Vec<EvalRecord>,
}

/// Draws each coordinate from `N(0.5, 0.15^2)` clipped to `[0.05, 0.95]`.
pub fn sample_initial_geometries(n: usize, seed: u64) -> Vec<Geometry> {
    sample_initial_geometries_with(n, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn sample_initial_geometries_with<R: Rng>(n: usize, rng: &mut R) -> Vec<Geometry> {
    let normal = Normal::new(INIT_MEAN, INIT_STD).expect("valid normal parameters");
    let mut draw = || normal.sample(rng).clamp(INIT_CLIP.0, INIT_CLIP.1);
    (0..n).map(|_| Geometry::new(draw(), draw(), draw(), draw())).collect()
}

/// Per-step random stream: the run seed selects the key and the step
/// selects the stream, so any step can be replayed in isolation.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

/// Generator conditions of a layout's elements; `d` is zeroed without
/// order conditioning.
pub fn generator_conditions(layout: &Layout, order_conditioning: bool) -> Vec<AttributeVector> {
    layout
        .elements
        .iter()
        .map(|e| {
            let mut a = e.attributes;
            if !order_conditioning {
                a.d = 0.0;
            }
            a
        })
        .collect()
}

/// Appends one layout's conditions to a generator batch. Elements marked
/// frozen keep their geometry, and `freeze_class` additionally freezes
/// every element of that class.
pub fn push_conditions<R: Rng>(
    input: &mut GeneratorInput,
    layout: &Layout,
    order_conditioning: bool,
    freeze_class: Option<usize>,
    rng: &mut R,
) {
    let n = layout.len();
    let frozen = layout
        .elements
        .iter()
        .map(|e| (e.frozen || Some(e.class_id()) == freeze_class).then_some(e.geometry))
        .collect();
    input.push_layout(
        layout.elements.iter().map(|e| e.class_probs.clone()).collect(),
        sample_initial_geometries_with(n, rng),
        generator_conditions(layout, order_conditioning),
        frozen,
    );
}

fn geometry_rows(geoms: impl IntoIterator<Item = Geometry>) -> Tensor {
    let data: Vec<f64> = geoms.into_iter().flat_map(Geometry::to_array).collect();
    Tensor::new(vec![data.len() / 4, 4], data)
}

fn check_batch(real: &[Layout], specs: &GeneratorInput, m: usize) -> Result<()> {
    specs.validate(m)?;
    if real.is_empty() || real.len() != specs.segments.len() {
        return Err(Error::validation(format!(
            "{} real layouts for {} generator layouts",
            real.len(),
            specs.segments.len()
        )));
    }
    for (i, (l, &(_, len))) in real.iter().zip(&specs.segments).enumerate() {
        if l.len() != len {
            return Err(Error::validation(format!(
                "batch layout {i} has {} real elements but {len} generator rows",
                l.len()
            )));
        }
        if l.elements.iter().any(|e| e.class_probs.len() != m) {
            return Err(Error::validation(format!(
                "batch layout {i} does not match the class vocabulary"
            )));
        }
    }
    Ok(())
}

/// One discriminator update then one generator update. `real` and `specs`
/// are paired: `specs` holds the generation conditions of `real`.
pub fn train_step(
    cfg: &TrainingConfig,
    state: &mut ModelCheckpoint,
    real: &[Layout],
    specs: &GeneratorInput,
    rng: &mut ChaCha8Rng,
) -> Result<LossReport> {
    let model = state.config.clone();
    let m = model.classes();
    let size = model.render_size;
    check_batch(real, specs, m)?;
    let weights = cfg.effective_weights();
    let adam = cfg.adam();
    let local = model.discriminator.local_branch;
    let b = real.len();
    let step = state.step;
    let optimizer = state.optimizer.get_or_insert_with(|| OptimizerState {
        generator: AdamState::new(&state.generator),
        discriminator: AdamState::new(&state.discriminator),
    });

    let mut report = LossReport {
        step,
        ..LossReport::default()
    };

    // Discriminator update on real and generated layouts in one batch.
    let fake = generate(&state.generator, &model, specs)?;
    let real_rows: usize = real.iter().map(Layout::len).sum();
    let mut global_items = Vec::with_capacity(2 * b);
    let mut local_items = Vec::with_capacity(2 * b);
    let mut start = 0;
    let mut real_totals = Vec::with_capacity(b * m);
    for l in real {
        let probs: Vec<Vec<f64>> = l.elements.iter().map(|e| e.class_probs.clone()).collect();
        let areas: Vec<f64> = l.elements.iter().map(|e| e.geometry.area()).collect();
        real_totals.extend(class_area_totals(&probs, &areas)?);
        let mask = sample_dropout_mask_with(l.len(), cfg.dropout_b, rng)?;
        global_items.push(RenderItem {
            start,
            class_probs: probs.clone(),
            mask: None,
        });
        local_items.push(RenderItem {
            start,
            class_probs: probs,
            mask: Some(mask.bits),
        });
        start += l.len();
    }
    for &(s, len) in &specs.segments {
        let probs = specs.class_probs[s..s + len].to_vec();
        let mask = sample_dropout_mask_with(len, cfg.dropout_b, rng)?;
        global_items.push(RenderItem {
            start: real_rows + s,
            class_probs: probs.clone(),
            mask: None,
        });
        local_items.push(RenderItem {
            start: real_rows + s,
            class_probs: probs,
            mask: Some(mask.bits),
        });
    }
    {
        let mut graph = Graph::new();
        let d = state.discriminator.bind(&mut graph, true);
        let rows = geometry_rows(real.iter().flat_map(|l| l.geometries()).chain(fake.iter().copied()));
        let geoms = graph.constant(rows);
        let global = render_batch(&mut graph, geoms, &global_items, size, size, m);
        let local_img = local.then(|| render_batch(&mut graph, geoms, &local_items, size, size, m));
        let out = discriminator_forward(&mut graph, &d, &model, global, local_img)?;
        let pr = graph.slice_rows(out.p_global, 0, b);
        let pf = graph.slice_rows(out.p_global, b, b);
        let mut terms = vec![bce_mean(&mut graph, pr, true), bce_mean(&mut graph, pf, false)];
        if let Some(pl) = out.p_local {
            let plr = graph.slice_rows(pl, 0, b);
            let plf = graph.slice_rows(pl, b, b);
            terms.push(bce_mean(&mut graph, plr, true));
            terms.push(bce_mean(&mut graph, plf, false));
        }
        let l_a = graph.add_all(&terms);
        let s_real = graph.slice_rows(out.s_pred, 0, b);
        let l_r = l1_rows_mean(&mut graph, s_real, Tensor::new(vec![b, m], real_totals));
        let l_r_w = graph.scale(l_r, weights.w_r);
        let total = graph.add(l_a, l_r_w);
        report.d_adv = graph.value(l_a).item();
        report.d_recon = graph.value(l_r).item();
        report.d_total = graph.value(total).item();
        if !report.d_total.is_finite() {
            report.check_finite()?;
        }
        let mut grads = graph.backward(total);
        let g = d.grads(&mut grads);
        optimizer.discriminator.step(&adam, &mut state.discriminator, &g)?;
    }

    // Generator update against the refreshed discriminator.
    {
        let mut graph = Graph::new();
        let g = state.generator.bind(&mut graph, true);
        let d = state.discriminator.bind(&mut graph, false);
        let geoms = generator_forward(&mut graph, &g, &model, specs)?;
        let mut global_items = Vec::with_capacity(b);
        let mut local_items = Vec::with_capacity(b);
        for &(s, len) in &specs.segments {
            let probs = specs.class_probs[s..s + len].to_vec();
            let mask = sample_dropout_mask_with(len, cfg.dropout_b, rng)?;
            global_items.push(RenderItem {
                start: s,
                class_probs: probs.clone(),
                mask: None,
            });
            local_items.push(RenderItem {
                start: s,
                class_probs: probs,
                mask: Some(mask.bits),
            });
        }
        let global = render_batch(&mut graph, geoms, &global_items, size, size, m);
        let local_img = local.then(|| render_batch(&mut graph, geoms, &local_items, size, size, m));
        let out = discriminator_forward(&mut graph, &d, &model, global, local_img)?;
        let mut adv_terms = vec![bce_mean(&mut graph, out.p_global, true)];
        if let Some(pl) = out.p_local {
            adv_terms.push(bce_mean(&mut graph, pl, true));
        }
        let adv = graph.add_all(&adv_terms);

        let targets: Vec<Vec<f64>> = specs
            .segments
            .iter()
            .map(|&(s, len)| specs.attributes[s..s + len].iter().map(|a| a.s).collect())
            .collect();
        let alpha = cfg.alpha;
        let area = geometry_loss(&mut graph, geoms, &specs.segments, |li, gs| {
            margin_area_value_grad(gs, &targets[li], alpha)
        })?;
        let over = geometry_loss(&mut graph, geoms, &specs.segments, |_, gs| Ok(overlap_value_grad(gs)))?;
        let alg = geometry_loss(&mut graph, geoms, &specs.segments, |_, gs| Ok(alignment_value_grad(gs)))?;
        let ord = if cfg.order_conditioning {
            let orders = real
                .iter()
                .enumerate()
                .map(|(i, l)| {
                    l.orders()
                        .ok_or_else(|| Error::validation(format!("batch layout {i} has no order annotations")))
                })
                .collect::<Result<Vec<_>>>()?;
            Some(geometry_loss(&mut graph, geoms, &specs.segments, |li, gs| {
                order_value_grad(gs, &orders[li])
            })?)
        } else {
            None
        };

        let mut weighted = vec![
            graph.scale(adv, weights.w_adv),
            graph.scale(area, weights.w_area),
            graph.scale(over, weights.w_over),
            graph.scale(alg, weights.w_alg),
        ];
        if let Some(o) = ord {
            weighted.push(graph.scale(o, weights.w_ord));
        }
        let total = graph.add_all(&weighted);
        report.adv = graph.value(adv).item();
        report.area = graph.value(area).item();
        report.over = graph.value(over).item();
        report.alg = graph.value(alg).item();
        report.ord = ord.map_or(0.0, |o| graph.value(o).item());
        report.g_total = graph.value(total).item();
        report.check_finite()?;
        let mut grads = graph.backward(total);
        let gg = g.grads(&mut grads);
        optimizer.generator.step(&adam, &mut state.generator, &gg)?;
    }
    state.step += 1;
    Ok(report)
}

/// Samples a batch for `step` and runs one training step.
pub fn run_step(cfg: &TrainingConfig, state: &mut ModelCheckpoint, train_set: &[Layout]) -> Result<LossReport> {
    if train_set.is_empty() {
        return Err(Error::validation("training split is empty"));
    }
    let mut rng = step_rng(cfg.seed, state.step);
    let freeze = state.config.classes.id("product_image");
    let mut real = Vec::with_capacity(cfg.batch_size);
    let mut specs = GeneratorInput::default();
    for _ in 0..cfg.batch_size {
        let l = &train_set[rng.random_range(0..train_set.len())];
        let f = if cfg.freeze_product_prob > 0.0 && rng.random_bool(cfg.freeze_product_prob) {
            freeze
        } else {
            None
        };
        push_conditions(&mut specs, l, cfg.order_conditioning, f, &mut rng);
        real.push(l.clone());
    }
    train_step(cfg, state, &real, &specs, &mut rng)
}

/// Turns generator output into final layouts: geometry is legalized to
/// stay inside the canvas with every side at least one pixel, while
/// classes, conditions, frozen flags and input orders carry over.
pub fn finalize_layouts(conditions: &[Layout], geoms: &[Geometry]) -> Result<Vec<Layout>> {
    let rows: usize = conditions.iter().map(Layout::len).sum();
    if rows != geoms.len() {
        return Err(Error::validation(format!(
            "{} geometries for {rows} elements",
            geoms.len()
        )));
    }
    let mut it = geoms.iter();
    Ok(conditions
        .iter()
        .map(|c| {
            let min_side = 1.0 / f64::from(c.canvas.max_side().max(1));
            let elements = c
                .elements
                .iter()
                .map(|e| {
                    let g = it.next().copied().unwrap_or(e.geometry);
                    let g = if e.frozen {
                        e.geometry
                    } else {
                        legalize_geometry(&g, min_side)
                    };
                    Element {
                        geometry: g,
                        ..e.clone()
                    }
                })
                .collect();
            Layout {
                elements,
                canvas: c.canvas.clone(),
                extra: c.extra.clone(),
            }
        })
        .collect())
}

/// Raw generator geometries for each condition layout, in row order.
/// Initial geometries come from `seed`.
pub fn generate_raw(ckpt: &ModelCheckpoint, conditions: &[Layout], seed: u64) -> Result<Vec<Geometry>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for chunk in conditions.chunks(GENERATE_CHUNK) {
        let mut input = GeneratorInput::default();
        for l in chunk {
            push_conditions(&mut input, l, ckpt.config.order_conditioning, None, &mut rng);
        }
        out.extend(generate(&ckpt.generator, &ckpt.config, &input)?);
    }
    Ok(out)
}

/// Generated final layouts for each condition layout.
pub fn generate_layouts(ckpt: &ModelCheckpoint, conditions: &[Layout], seed: u64) -> Result<Vec<Layout>> {
    let geoms = generate_raw(ckpt, conditions, seed)?;
    finalize_layouts(conditions, &geoms)
}

/// Conditions of a real layout without any frozen element.
pub fn unfrozen(layout: &Layout) -> Layout {
    let mut l = layout.clone();
    for e in &mut l.elements {
        e.frozen = false;
    }
    l
}

/// Metrics of layouts generated from the unfrozen conditions of `held_out`.
pub fn evaluate_checkpoint(ckpt: &ModelCheckpoint, held_out: &[Layout], seed: u64) -> Result<MetricReport> {
    let conditions: Vec<Layout> = held_out.iter().map(unfrozen).collect();
    let generated = generate_layouts(ckpt, &conditions, seed)?;
    evaluate(&generated, &ckpt.config.classes, &DEFAULT_THRESHOLDS)
}

fn check_corpus(cfg: &TrainingConfig, corpus: &[Layout]) -> Result<()> {
    if corpus.is_empty() {
        return Err(Error::validation("training corpus is empty"));
    }
    let m = cfg.model.classes.len();
    for (i, l) in corpus.iter().enumerate() {
        if let Some(a) = cfg.aspect_class {
            if l.canvas.aspect_class != a {
                return Err(Error::validation(format!(
                    "layout {i} has aspect class {} but the model is for {}",
                    l.canvas.aspect_class.as_str(),
                    a.as_str()
                )));
            }
        }
        if l.is_empty() || l.elements.iter().any(|e| e.class_probs.len() != m) {
            return Err(Error::validation(format!(
                "layout {i} is empty or does not match the class vocabulary"
            )));
        }
        if cfg.order_conditioning && l.orders().is_none() {
            return Err(Error::validation(format!(
                "layout {i} lacks order annotations required by order conditioning"
            )));
        }
    }
    Ok(())
}

/// Trains from a fresh initialization.
pub fn train(cfg: &TrainingConfig, corpus: &[Layout]) -> Result<TrainOutcome> {
    train_from(cfg, corpus, None)
}

/// Trains until `cfg.steps` total steps, resuming from `resume` when given.
pub fn train_from(cfg: &TrainingConfig, corpus: &[Layout], resume: Option<ModelCheckpoint>) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_corpus(cfg, corpus)?;
    let (train_set, held_out) = split_corpus(corpus, cfg.train_fraction, cfg.seed);
    let train_set = if train_set.is_empty() {
        corpus.to_vec()
    } else {
        train_set
    };
    let eval_set: Vec<Layout> = held_out.into_iter().take(cfg.eval_samples).collect();
    let mut state = match resume {
        Some(c) => {
            if c.config != cfg.model_config() {
                return Err(Error::Checkpoint(
                    "checkpoint model config differs from the training config".into(),
                ));
            }
            c
        }
        None => {
            let mut c = ModelCheckpoint::initialize(cfg.model_config(), cfg.seed)?;
            c.training = serde_json::to_value(cfg)?;
            c
        }
    };
    let eval_seed = cfg.seed ^ EVAL_SALT;
    let mut losses = Vec::new();
    let mut evaluations = Vec::new();
    let eval = |state: &ModelCheckpoint, evaluations: &mut Vec<EvalRecord>| -> Result<()> {
        if !eval_set.is_empty() {
            evaluations.push(EvalRecord {
                step: state.step,
                report: evaluate_checkpoint(state, &eval_set, eval_seed)?,
            });
        }
        Ok(())
    };
    if let Some(dir) = &cfg.out_dir {
        fs::create_dir_all(dir)?;
    }
    if state.step < cfg.steps {
        eval(&state, &mut evaluations)?;
    }
    while state.step < cfg.steps {
        losses.push(run_step(cfg, &mut state, &train_set)?);
        let step = state.step;
        if cfg.eval_every > 0 && step % cfg.eval_every == 0 && step < cfg.steps {
            eval(&state, &mut evaluations)?;
        }
        if let Some(dir) = &cfg.out_dir {
            if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
                state.save(dir.join(format!("checkpoint_{step:06}.lfck")))?;
            }
        }
    }
    if !losses.is_empty() {
        eval(&state, &mut evaluations)?;
    }
    if let Some(dir) = &cfg.out_dir {
        write_logs(dir, &losses, &evaluations)?;
        state.save(dir.join("final.lfck"))?;
    }
    Ok(TrainOutcome {
        checkpoint: state,
        losses,
        evaluations,
    })
}

/// Writes `losses.csv`, `losses.json` and `evaluations.json`.
pub fn write_logs(dir: &Path, losses: &[LossReport], evaluations: &[EvalRecord]) -> Result<()> {
    let mut csv = fs::File::create(dir.join("losses.csv"))?;
    writeln!(csv, "{}", LossReport::CSV_HEADER)?;
    for r in losses {
        writeln!(csv, "{}", r.csv_row())?;
    }
    fs::write(dir.join("losses.json"), serde_json::to_string_pretty(losses)?)?;
    fs::write(dir.join("evaluations.json"), serde_json::to_string_pretty(evaluations)?)?;
    Ok(())
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::data::{generate_synthetic_corpus, CorpusConfig};
    use crate::layout::ClassVocab;
    use crate::model::tests::tiny_config;

    pub(crate) fn tiny_training(steps: u64) -> TrainingConfig {
        TrainingConfig {
            learning_rate: 1e-3,
            batch_size: 4,
            steps,
            eval_every: 0,
            eval_samples: 8,
            aspect_class: Some(AspectClass::Square),
            model: tiny_config(),
            ..TrainingConfig::default()
        }
    }

    pub(crate) fn corpus(n: usize) -> Vec<Layout> {
        let cfg = CorpusConfig::for_aspect(AspectClass::Square, n, 3);
        generate_synthetic_corpus(&cfg, &ClassVocab::default()).unwrap()
    }

    #[test]
    fn initial_geometries_statistics() {
        assert_eq!(sample_initial_geometries(5, 9), sample_initial_geometries(5, 9));
        let gs = sample_initial_geometries(100_000, 1);
        let mean = gs.iter().map(|g| g.xc).sum::<f64>() / gs.len() as f64;
        assert!((0.49..=0.51).contains(&mean), "{mean}");
        assert!(gs.iter().flat_map(|g| g.to_array()).all(|v| (0.05..=0.95).contains(&v)));
    }

    #[test]
    fn config_toml_round_trip_and_validation() {
        let cfg = tiny_training(3);
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(TrainingConfig::from_toml_str(&text).unwrap(), cfg);
        let partial = TrainingConfig::from_toml_str("steps = 7\nbatch_size = 2\n").unwrap();
        assert_eq!(partial.steps, 7);
        assert_eq!(partial.learning_rate, 1e-5);
        assert!(TrainingConfig::from_toml_str("learning_rate = 0.0").is_err());
        assert!(TrainingConfig::from_toml_str("batch_size = 0").is_err());
        match TrainingConfig::from_toml_str("[weights]\nw_adv = \"x\"") {
            Err(Error::Parse { path, .. }) => assert_eq!(path, "weights.w_adv"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn step_is_deterministic_finite_and_moves_parameters() {
        let cfg = tiny_training(1);
        let data = corpus(12);
        let run = || {
            let mut s = ModelCheckpoint::initialize(cfg.model_config(), cfg.seed).unwrap();
            let r = run_step(&cfg, &mut s, &data).unwrap();
            (s, r)
        };
        let (s1, r1) = run();
        let (s2, r2) = run();
        assert_eq!(r1, r2);
        assert_eq!(s1, s2);
        for v in [
            r1.d_total, r1.d_adv, r1.d_recon, r1.g_total, r1.adv, r1.area, r1.over, r1.alg, r1.ord,
        ] {
            assert!(v.is_finite() && v >= 0.0);
        }
        let init = ModelCheckpoint::initialize(cfg.model_config(), cfg.seed).unwrap();
        assert_ne!(init.generator, s1.generator);
        assert_ne!(init.discriminator, s1.discriminator);
        assert_eq!(s1.step, 1);
    }

    #[test]
    fn generator_update_leaves_discriminator_untouched() {
        let cfg = tiny_training(1);
        let data = corpus(8);
        let mut s = ModelCheckpoint::initialize(cfg.model_config(), cfg.seed).unwrap();
        // Replaying the step with every generator weight at zero must give
        // the same discriminator and an unchanged generator.
        let before = s.clone();
        run_step(&cfg, &mut s, &data).unwrap();
        let mut d_only = before.clone();
        let mut g_frozen_cfg = cfg.clone();
        g_frozen_cfg.weights = LossWeights {
            w_adv: 0.0,
            w_area: 0.0,
            w_over: 0.0,
            w_alg: 0.0,
            w_ord: 0.0,
            ..cfg.weights
        };
        run_step(&g_frozen_cfg, &mut d_only, &data).unwrap();
        assert_eq!(s.discriminator, d_only.discriminator);
        assert_eq!(d_only.generator, before.generator);
    }

    #[test]
    fn zero_steps_returns_initialization() {
        let cfg = tiny_training(0);
        let out = train(&cfg, &corpus(10)).unwrap();
        let init = ModelCheckpoint::initialize(cfg.model_config(), cfg.seed).unwrap();
        assert_eq!(out.checkpoint.generator, init.generator);
        assert_eq!(out.checkpoint.discriminator, init.discriminator);
        assert_eq!(out.checkpoint.step, 0);
        assert!(out.losses.is_empty());
    }

    #[test]
    fn corpus_validation() {
        let cfg = tiny_training(1);
        assert!(matches!(train(&cfg, &[]), Err(Error::Validation(_))));
        let other = generate_synthetic_corpus(
            &CorpusConfig::for_aspect(AspectClass::Portrait, 4, 1),
            &ClassVocab::default(),
        )
        .unwrap();
        assert!(matches!(train(&cfg, &other), Err(Error::Validation(_))));
        let mut unordered = corpus(4);
        unordered[0].elements[0].order = None;
        let ord_cfg = TrainingConfig {
            order_conditioning: true,
            ..cfg
        };
        assert!(matches!(train(&ord_cfg, &unordered), Err(Error::Validation(_))));
    }

    #[test]
    fn resume_reproduces_next_step() {
        let cfg = tiny_training(2);
        let data = corpus(20);
        let out = train(&cfg, &data).unwrap();
        let bytes = out.checkpoint.to_bytes().unwrap();
        let reloaded = ModelCheckpoint::from_bytes(&bytes).unwrap();
        let (train_set, _) = split_corpus(&data, cfg.train_fraction, cfg.seed);
        let mut a = out.checkpoint.clone();
        let mut b = reloaded;
        let ra = run_step(&cfg, &mut a, &train_set).unwrap();
        let rb = run_step(&cfg, &mut b, &train_set).unwrap();
        assert_eq!(ra.csv_row(), rb.csv_row());
        let cont = train_from(
            &TrainingConfig {
                steps: 3,
                ..cfg.clone()
            },
            &data,
            Some(out.checkpoint),
        )
        .unwrap();
        assert_eq!(cont.losses[0], ra);
        assert_eq!(cont.checkpoint.to_bytes().unwrap(), a.to_bytes().unwrap());
    }

    #[test]
    fn training_is_reproducible_and_writes_logs() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainingConfig {
            eval_every: 2,
            checkpoint_every: 2,
            out_dir: Some(dir.path().to_path_buf()),
            ..tiny_training(3)
        };
        let data = corpus(30);
        let a = train(&cfg, &data).unwrap();
        let b = train(&cfg, &data).unwrap();
        assert_eq!(a.checkpoint.to_bytes().unwrap(), b.checkpoint.to_bytes().unwrap());
        assert_eq!(a.evaluations.iter().map(|e| e.step).collect::<Vec<_>>(), vec![0, 2, 3]);
        let csv = fs::read_to_string(dir.path().join("losses.csv")).unwrap();
        assert_eq!(csv.lines().count(), 4);
        assert!(dir.path().join("checkpoint_000002.lfck").exists());
        let saved = ModelCheckpoint::load(dir.path().join("final.lfck")).unwrap();
        assert_eq!(saved, a.checkpoint);
    }

    #[test]
    fn unconditioned_order_is_zeroed() {
        let l = &corpus(1)[0];
        assert!(generator_conditions(l, false).iter().all(|a| a.d == 0.0));
        assert!(generator_conditions(l, true).iter().any(|a| a.d > 0.0));
        assert_eq!(tiny_training(1).effective_weights().w_ord, 0.0);
    }

    #[test]
    fn generated_layouts_are_legal_and_keep_conditions() {
        let cfg = tiny_training(0);
        let ckpt = ModelCheckpoint::initialize(cfg.model_config(), 1).unwrap();
        let conditions = corpus(5);
        let out = generate_layouts(&ckpt, &conditions, 4).unwrap();
        assert_eq!(out, generate_layouts(&ckpt, &conditions, 4).unwrap());
        for (g, c) in out.iter().zip(&conditions) {
            assert!(crate::layout::validate_final_layout(g).is_empty());
            assert_eq!(g.orders(), c.orders());
            for (e, ce) in g.elements.iter().zip(&c.elements) {
                assert_eq!(e.attributes, ce.attributes);
                if ce.attributes.r > 0.0 {
                    assert!((e.geometry.h / e.geometry.w - ce.attributes.r).abs() < 1e-6);
                }
            }
        }
    }
}
