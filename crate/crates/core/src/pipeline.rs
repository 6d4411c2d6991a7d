//! Design pipeline: image-location sampling, candidate generation,
//! discriminator-feature grouping, cost ranking, retargeting and the
//! template-retrieval baseline.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor};
use crate::data::{default_ratio_fixed, extract_attributes, layout_to_value};
use crate::error::{Error, Result};
use crate::geometry::{assign_reading_orders, origin_distance};
use crate::layout::{
    ensure_valid, validate_layout, AspectClass, AttributeVector, Canvas, ClassVocab, Element, Geometry, Layout,
};
use crate::losses::{alignment_loss, overlap_loss, LossWeights, PROB_EPS};
use crate::model::{discriminator_forward, ModelCheckpoint};
use crate::render::{render_batch, RenderItem};
use crate::training::generate_layouts;

pub const DEFAULT_K: usize = 5;
pub const DEFAULT_GRID_N: usize = 8;
pub const DEFAULT_KMEANS_ITERS: usize = 100;
/// Element slots of the retrieval query vector.
pub const QUERY_SLOTS: usize = 6;
const CANDIDATE_SALT: u64 = 0x9e37_79b9_7f4a_7c15;
const PRODUCT_CLASS: &str = "product_image";

/// One requested element: class, expected area, aspect ratio (0 = free)
/// and an optional reading order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElementSpec {
    pub class: String,
    pub s: f64,
    #[serde(default)]
    pub r: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub order: Option<usize>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RankOrder {
    /// Lowest cost first.
    #[default]
    #[serde(alias = "ascending")]
    Asc,
    /// Highest cost first.
    #[serde(alias = "descending")]
    Desc,
}

impl std::str::FromStr for RankOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "asc" | "ascending" => Ok(Self::Asc),
            "desc" | "descending" => Ok(Self::Desc),
            other => Err(Error::validation(format!(
                "rank order must be asc or desc, got {other:?}"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub k: usize,
    pub grid_n: usize,
    pub kmeans_iters: usize,
    pub rank_order: RankOrder,
    /// Only `w_adv`, `w_over` and `w_alg` enter the ranking cost.
    pub weights: LossWeights,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            grid_n: DEFAULT_GRID_N,
            kmeans_iters: DEFAULT_KMEANS_ITERS,
            rank_order: RankOrder::Asc,
            weights: LossWeights::default(),
            seed: 0,
        }
    }
}

/// Terms of the ranking cost `E = w_adv*adv + w_over*over + w_alg*alg`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CostTerms {
    pub adv: f64,
    pub over: f64,
    pub alg: f64,
    pub cost: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    pub location: (f64, f64),
    pub seed: u64,
    pub layout: Layout,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankedCandidate {
    pub candidate: Candidate,
    pub features: Vec<f64>,
    pub cluster: usize,
    pub cost: CostTerms,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterSummary {
    pub cluster: usize,
    /// Candidate indices in rank order.
    pub members: Vec<usize>,
    pub recommended: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CandidateSet {
    pub seed: u64,
    pub k: usize,
    pub rank_order: RankOrder,
    pub kmeans_iters: usize,
    pub candidates: Vec<RankedCandidate>,
    /// Non-empty clusters in cluster-id order.
    pub clusters: Vec<ClusterSummary>,
}

#[derive(Serialize)]
struct CandidateDoc {
    index: usize,
    location: [f64; 2],
    seed: u64,
    cluster: usize,
    cost: CostTerms,
    features: Vec<f64>,
    layout: serde_json::Value,
}

#[derive(Serialize)]
struct CandidateSetDoc<'a> {
    seed: u64,
    k: usize,
    rank_order: RankOrder,
    kmeans_iters: usize,
    candidates: Vec<CandidateDoc>,
    clusters: &'a [ClusterSummary],
}

impl CandidateSet {
    pub fn to_value(&self, vocab: &ClassVocab) -> Result<serde_json::Value> {
        let candidates = self
            .candidates
            .iter()
            .enumerate()
            .map(|(index, c)| {
                Ok(CandidateDoc {
                    index,
                    location: [c.candidate.location.0, c.candidate.location.1],
                    seed: c.candidate.seed,
                    cluster: c.cluster,
                    cost: c.cost,
                    features: c.features.clone(),
                    layout: layout_to_value(&c.candidate.layout, vocab)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(serde_json::to_value(CandidateSetDoc {
            seed: self.seed,
            k: self.k,
            rank_order: self.rank_order,
            kmeans_iters: self.kmeans_iters,
            candidates,
            clusters: &self.clusters,
        })?)
    }

    pub fn to_json(&self, vocab: &ClassVocab) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_value(vocab)?)?)
    }

    /// Recommended layouts, one per non-empty cluster.
    pub fn recommended(&self) -> Vec<&Layout> {
        self.clusters
            .iter()
            .map(|c| &self.candidates[c.recommended].candidate.layout)
            .collect()
    }
}

// ----- image locations -------------------------------------------------

/// `grid_n x grid_n` product-image centers spanning the feasible region
/// `[w/2, 1-w/2] x [h/2, 1-h/2]`; coincident centers are merged.
pub fn sample_image_locations(image_w: f64, image_h: f64, grid_n: usize) -> Result<Vec<(f64, f64)>> {
    if grid_n == 0 {
        return Err(Error::validation("grid_n must be >= 1"));
    }
    if !(image_w > 0.0 && image_h > 0.0) || !image_w.is_finite() || !image_h.is_finite() {
        return Err(Error::validation(format!(
            "image size {image_w}x{image_h} must be positive"
        )));
    }
    if image_w > 1.0 || image_h > 1.0 {
        return Err(Error::Infeasible(format!(
            "a {image_w:.4}x{image_h:.4} product image does not fit the canvas"
        )));
    }
    let axis = |side: f64| -> Vec<f64> {
        let (lo, hi) = (side / 2.0, 1.0 - side / 2.0);
        let mut v: Vec<f64> = if grid_n == 1 {
            vec![0.5]
        } else {
            (0..grid_n)
                .map(|i| {
                    let f = i as f64 / (grid_n - 1) as f64;
                    lo * (1.0 - f) + hi * f
                })
                .collect()
        };
        v.dedup();
        v
    };
    let xs = axis(image_w);
    let ys = axis(image_h);
    Ok(ys.iter().flat_map(|&y| xs.iter().map(move |&x| (x, y))).collect())
}

/// Width and height of a box with area `s` and aspect ratio `r`
/// (`r = 0` gives a square).
pub fn size_from_attributes(s: f64, r: f64) -> Result<(f64, f64)> {
    if !(s > 0.0 && s.is_finite()) || !(r >= 0.0 && r.is_finite()) {
        return Err(Error::validation(format!("invalid area {s} or aspect ratio {r}")));
    }
    Ok(if r > 0.0 {
        let w = (s / r).sqrt();
        (w, r * w)
    } else {
        (s.sqrt(), s.sqrt())
    })
}

// ----- candidates --------------------------------------------------------

/// Condition layout for a set of element specs. Geometry is a placeholder
/// of the requested area at the canvas center.
pub fn specs_to_conditions(specs: &[ElementSpec], canvas: &Canvas, vocab: &ClassVocab) -> Result<Layout> {
    let elements = specs
        .iter()
        .enumerate()
        .map(|(i, sp)| {
            let class = vocab.id(&sp.class).ok_or_else(|| Error::Parse {
                path: format!("elements[{i}].class"),
                message: format!("unknown class {:?}", sp.class),
            })?;
            let (w, h) =
                size_from_attributes(sp.s, sp.r).map_err(|e| Error::validation(format!("element {i}: {e}")))?;
            let mut e = Element::new(
                vocab.one_hot(class),
                Geometry::new(0.5, 0.5, w.min(1.0), h.min(1.0)),
                AttributeVector::new(sp.s, sp.r, 0.0),
            );
            e.order = sp.order;
            Ok(e)
        })
        .collect::<Result<Vec<_>>>()?;
    let layout = Layout::new(elements, canvas.clone());
    ensure_valid(validate_layout(&layout))?;
    Ok(layout)
}

fn check_aspect(ckpt: &ModelCheckpoint, canvas: &Canvas) -> Result<()> {
    if let Some(a) = ckpt.config.aspect_class {
        if a != canvas.aspect_class {
            return Err(Error::validation(format!(
                "checkpoint serves {} canvases but the canvas is {}",
                a.as_str(),
                canvas.aspect_class.as_str()
            )));
        }
    }
    Ok(())
}

fn candidate_seed(seed: u64, index: usize) -> u64 {
    seed ^ (index as u64 + 1).wrapping_mul(CANDIDATE_SALT)
}

/// One layout per location, with the product image frozen at that
/// location and sized from its attributes.
pub fn generate_candidates(
    specs: &[ElementSpec],
    ckpt: &ModelCheckpoint,
    canvas: &Canvas,
    locations: &[(f64, f64)],
    seed: u64,
) -> Result<Vec<Candidate>> {
    check_aspect(ckpt, canvas)?;
    let base = specs_to_conditions(specs, canvas, &ckpt.config.classes)?;
    let product = ckpt
        .config
        .classes
        .id(PRODUCT_CLASS)
        .ok_or_else(|| Error::validation("the class vocabulary has no product_image"))?;
    let pi = match base.elements.iter().position(|e| e.class_id() == product) {
        Some(i) if base.elements.iter().filter(|e| e.class_id() == product).count() == 1 => i,
        _ => {
            return Err(Error::validation(
                "element specs must contain exactly one product_image",
            ))
        }
    };
    let (w, h) = size_from_attributes(base.elements[pi].attributes.s, base.elements[pi].attributes.r)?;
    if w > 1.0 || h > 1.0 {
        return Err(Error::Infeasible(format!(
            "product image {w:.4}x{h:.4} does not fit the canvas"
        )));
    }
    locations
        .iter()
        .enumerate()
        .map(|(i, &(x, y))| {
            let mut cond = base.clone();
            cond.elements[pi].geometry = Geometry::new(x, y, w, h);
            cond.elements[pi].frozen = true;
            ensure_valid(validate_layout(&cond))?;
            let cs = candidate_seed(seed, i);
            let layout = generate_layouts(ckpt, std::slice::from_ref(&cond), cs)?.remove(0);
            Ok(Candidate {
                location: (x, y),
                seed: cs,
                layout,
            })
        })
        .collect()
}

fn require_trained(ckpt: &ModelCheckpoint) -> Result<()> {
    if ckpt.step == 0 {
        return Err(Error::Checkpoint("checkpoint is untrained (step 0)".into()));
    }
    Ok(())
}

struct Scored {
    features: Vec<Vec<f64>>,
    p_global: Vec<f64>,
    p_local: Option<Vec<f64>>,
}

fn score_layouts(layouts: &[Layout], ckpt: &ModelCheckpoint) -> Result<Scored> {
    let cfg = &ckpt.config;
    let m = cfg.classes();
    let mut rows = Vec::new();
    let mut items = Vec::with_capacity(layouts.len());
    for l in layouts {
        if l.elements.iter().any(|e| e.class_probs.len() != m) {
            return Err(Error::validation(
                "layout does not match the checkpoint's class vocabulary",
            ));
        }
        items.push(RenderItem {
            start: rows.len() / 4,
            class_probs: l.elements.iter().map(|e| e.class_probs.clone()).collect(),
            mask: None,
        });
        rows.extend(l.geometries().into_iter().flat_map(Geometry::to_array));
    }
    let mut graph = Graph::new();
    let bound = ckpt.discriminator.bind(&mut graph, false);
    let geoms = graph.constant(Tensor::new(vec![rows.len() / 4, 4], rows));
    let image = render_batch(&mut graph, geoms, &items, cfg.render_size, cfg.render_size, m);
    let local = cfg.discriminator.local_branch.then_some(image);
    let out = discriminator_forward(&mut graph, &bound, cfg, image, local)?;
    let feats = graph.value(out.features);
    let dim = feats.shape()[1];
    Ok(Scored {
        features: feats.data().chunks(dim).map(<[f64]>::to_vec).collect(),
        p_global: graph.value(out.p_global).data().to_vec(),
        p_local: out.p_local.map(|p| graph.value(p).data().to_vec()),
    })
}

/// Spatially averaged last convolution of the global branch on the full
/// render; its length is the last convolution's channel count.
pub fn extract_layout_features(layout: &Layout, ckpt: &ModelCheckpoint) -> Result<Vec<f64>> {
    Ok(extract_features(std::slice::from_ref(layout), ckpt)?.remove(0))
}

pub fn extract_features(layouts: &[Layout], ckpt: &ModelCheckpoint) -> Result<Vec<Vec<f64>>> {
    require_trained(ckpt)?;
    if layouts.is_empty() {
        return Ok(Vec::new());
    }
    Ok(score_layouts(layouts, ckpt)?.features)
}

fn neg_log(p: f64) -> f64 {
    -p.clamp(PROB_EPS, 1.0).ln()
}

/// Ranking cost of each layout. Both discriminator branches see the full
/// render.
pub fn layout_costs(layouts: &[Layout], ckpt: &ModelCheckpoint, weights: &LossWeights) -> Result<Vec<CostTerms>> {
    require_trained(ckpt)?;
    if layouts.is_empty() {
        return Ok(Vec::new());
    }
    let scored = score_layouts(layouts, ckpt)?;
    Ok(layouts
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let adv = neg_log(scored.p_global[i]) + scored.p_local.as_ref().map_or(0.0, |p| neg_log(p[i]));
            let geoms = l.geometries();
            let over = overlap_loss(&geoms);
            let alg = alignment_loss(&geoms);
            CostTerms {
                adv,
                over,
                alg,
                cost: weights.w_adv * adv + weights.w_over * over + weights.w_alg * alg,
            }
        })
        .collect())
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Seeded k-means with k-means++ seeding and a fixed number of Lloyd
/// iterations. Returns a cluster id in `[0, k)` per point.
pub fn kmeans(points: &[Vec<f64>], k: usize, iters: usize, seed: u64) -> Result<Vec<usize>> {
    let n = points.len();
    if k == 0 || k > n {
        return Err(Error::validation(format!("k = {k} must lie in [1, {n}]")));
    }
    let dim = points[0].len();
    if points
        .iter()
        .any(|p| p.len() != dim || p.iter().any(|x| !x.is_finite()))
    {
        return Err(Error::validation("feature vectors must be finite and of equal length"));
    }
    if k == n {
        return Ok((0..n).collect());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers: Vec<Vec<f64>> = vec![points[rng.random_range(0..n)].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 && target < d {
                    pick = i;
                    break;
                }
                target -= d;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        centers.push(points[next].clone());
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, &centers[centers.len() - 1]));
        }
    }
    let assign = |centers: &[Vec<f64>]| -> Vec<usize> {
        points
            .iter()
            .map(|p| {
                let mut best = (f64::INFINITY, 0);
                for (c, ctr) in centers.iter().enumerate() {
                    let d = sq_dist(p, ctr);
                    if d < best.0 {
                        best = (d, c);
                    }
                }
                best.1
            })
            .collect()
    };
    let mut labels = assign(&centers);
    for _ in 0..iters {
        for (c, ctr) in centers.iter_mut().enumerate() {
            let members: Vec<&Vec<f64>> = points
                .iter()
                .zip(&labels)
                .filter(|(_, &l)| l == c)
                .map(|(p, _)| p)
                .collect();
            if members.is_empty() {
                continue;
            }
            for (j, v) in ctr.iter_mut().enumerate() {
                *v = members.iter().map(|p| p[j]).sum::<f64>() / members.len() as f64;
            }
        }
        let next = assign(&centers);
        if next == labels {
            break;
        }
        labels = next;
    }
    Ok(labels)
}

/// Clusters candidates on discriminator features and ranks each cluster
/// by cost; the first-ranked member is recommended.
pub fn group_and_rank(
    candidates: Vec<Candidate>,
    ckpt: &ModelCheckpoint,
    cfg: &PipelineConfig,
) -> Result<CandidateSet> {
    if cfg.k == 0 || cfg.k > candidates.len() {
        return Err(Error::validation(format!(
            "k = {} must lie in [1, {}] (number of candidates)",
            cfg.k,
            candidates.len()
        )));
    }
    let layouts: Vec<Layout> = candidates.iter().map(|c| c.layout.clone()).collect();
    let features = extract_features(&layouts, ckpt)?;
    let costs = layout_costs(&layouts, ckpt, &cfg.weights)?;
    let labels = kmeans(&features, cfg.k, cfg.kmeans_iters, cfg.seed)?;
    let mut clusters = Vec::new();
    for c in 0..cfg.k {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        if members.is_empty() {
            continue;
        }
        members.sort_by(|&a, &b| {
            let ord = costs[a].cost.total_cmp(&costs[b].cost);
            let ord = match cfg.rank_order {
                RankOrder::Asc => ord,
                RankOrder::Desc => ord.reverse(),
            };
            ord.then(a.cmp(&b))
        });
        clusters.push(ClusterSummary {
            cluster: c,
            recommended: members[0],
            members,
        });
    }
    let candidates = candidates
        .into_iter()
        .zip(features)
        .zip(costs)
        .zip(labels)
        .map(|(((candidate, features), cost), cluster)| RankedCandidate {
            candidate,
            features,
            cluster,
            cost,
        })
        .collect();
    Ok(CandidateSet {
        seed: cfg.seed,
        k: cfg.k,
        rank_order: cfg.rank_order,
        kmeans_iters: cfg.kmeans_iters,
        candidates,
        clusters,
    })
}

/// Sample locations, generate, group and rank.
pub fn run_pipeline(
    specs: &[ElementSpec],
    canvas: &Canvas,
    ckpt: &ModelCheckpoint,
    cfg: &PipelineConfig,
) -> Result<CandidateSet> {
    let conditions = specs_to_conditions(specs, canvas, &ckpt.config.classes)?;
    let product = ckpt.config.classes.id(PRODUCT_CLASS);
    let spec = conditions
        .elements
        .iter()
        .find(|e| Some(e.class_id()) == product)
        .ok_or_else(|| Error::validation("element specs must contain exactly one product_image"))?;
    let (w, h) = size_from_attributes(spec.attributes.s, spec.attributes.r)?;
    let locations = sample_image_locations(w, h, cfg.grid_n)?;
    let candidates = generate_candidates(specs, ckpt, canvas, &locations, cfg.seed)?;
    group_and_rank(candidates, ckpt, cfg)
}

// ----- t-SNE -------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub exaggeration: f64,
    pub exaggeration_iters: usize,
}

impl Default for TsneConfig {
    fn default() -> Self {
        Self {
            perplexity: 30.0,
            iterations: 1000,
            learning_rate: 200.0,
            exaggeration: 12.0,
            exaggeration_iters: 250,
        }
    }
}

/// Conditional probabilities of one row with the precision found by
/// bisection so that the entropy matches `log(perplexity)`.
fn row_affinities(d2: &[f64], i: usize, perplexity: f64) -> Vec<f64> {
    let target = perplexity.ln();
    let (mut lo, mut hi, mut beta) = (0.0, f64::INFINITY, 1.0);
    let mut p = vec![0.0; d2.len()];
    for _ in 0..100 {
        let mut sum = 0.0;
        for (j, pj) in p.iter_mut().enumerate() {
            *pj = if j == i { 0.0 } else { (-beta * d2[j]).exp() };
            sum += *pj;
        }
        if sum <= 0.0 {
            hi = beta;
            beta = (lo + hi) / 2.0;
            continue;
        }
        let mut h = 0.0;
        for (j, pj) in p.iter_mut().enumerate() {
            *pj /= sum;
            if *pj > 0.0 {
                h -= *pj * pj.ln();
            }
            let _ = j;
        }
        if (h - target).abs() < 1e-5 {
            break;
        }
        if h > target {
            lo = beta;
            beta = if hi.is_finite() { (lo + hi) / 2.0 } else { beta * 2.0 };
        } else {
            hi = beta;
            beta = (lo + hi) / 2.0;
        }
    }
    p
}

/// Exact t-SNE to two dimensions.
pub fn tsne_embed(features: &[Vec<f64>], seed: u64, cfg: &TsneConfig) -> Result<Vec<[f64; 2]>> {
    let n = features.len();
    if n < 2 {
        return Err(Error::validation(format!("t-SNE needs at least 2 points, got {n}")));
    }
    if !(cfg.perplexity > 0.0) || cfg.perplexity >= n as f64 {
        return Err(Error::validation(format!(
            "perplexity {} must lie in (0, {n})",
            cfg.perplexity
        )));
    }
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        let d2: Vec<f64> = features.iter().map(|f| sq_dist(&features[i], f)).collect();
        let row = row_affinities(&d2, i, cfg.perplexity);
        p[i * n..(i + 1) * n].copy_from_slice(&row);
    }
    for i in 0..n {
        for j in i + 1..n {
            let v = ((p[i * n + j] + p[j * n + i]) / (2.0 * n as f64)).max(1e-12);
            p[i * n + j] = v;
            p[j * n + i] = v;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1e-4).expect("valid normal parameters");
    let mut y: Vec<[f64; 2]> = (0..n)
        .map(|_| [normal.sample(&mut rng), normal.sample(&mut rng)])
        .collect();
    let mut vel = vec![[0.0; 2]; n];
    let mut gains = vec![[1.0; 2]; n];
    let mut q = vec![0.0; n * n];
    for it in 0..cfg.iterations {
        let exag = if it < cfg.exaggeration_iters {
            cfg.exaggeration
        } else {
            1.0
        };
        let momentum = if it < cfg.exaggeration_iters { 0.5 } else { 0.8 };
        let mut qsum = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    let d = sq_dist(&y[i], &y[j]);
                    q[i * n + j] = 1.0 / (1.0 + d);
                    qsum += q[i * n + j];
                }
            }
        }
        for i in 0..n {
            let mut grad = [0.0; 2];
            for j in 0..n {
                if i == j {
                    continue;
                }
                let num = q[i * n + j];
                let mult = 4.0 * (exag * p[i * n + j] - (num / qsum).max(1e-12)) * num;
                grad[0] += mult * (y[i][0] - y[j][0]);
                grad[1] += mult * (y[i][1] - y[j][1]);
            }
            for c in 0..2 {
                gains[i][c] = if (grad[c] > 0.0) != (vel[i][c] > 0.0) {
                    gains[i][c] + 0.2
                } else {
                    (gains[i][c] * 0.8f64).max(0.01)
                };
                vel[i][c] = momentum * vel[i][c] - cfg.learning_rate * gains[i][c] * grad[c];
            }
        }
        for i in 0..n {
            y[i][0] += vel[i][0];
            y[i][1] += vel[i][1];
        }
        let mean = [
            y.iter().map(|v| v[0]).sum::<f64>() / n as f64,
            y.iter().map(|v| v[1]).sum::<f64>() / n as f64,
        ];
        for v in &mut y {
            v[0] -= mean[0];
            v[1] -= mean[1];
        }
    }
    Ok(y)
}

/// Scatter plot of embedded points coloured by cluster.
pub fn scatter_svg(points: &[[f64; 2]], clusters: &[usize], palette: &[&str]) -> String {
    let size = 480.0;
    let pad = 24.0;
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for p in points {
        x0 = x0.min(p[0]);
        x1 = x1.max(p[0]);
        y0 = y0.min(p[1]);
        y1 = y1.max(p[1]);
    }
    let span = (x1 - x0).max(y1 - y0).max(1e-12);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">"#
    );
    for (p, &c) in points.iter().zip(clusters) {
        let x = pad + (p[0] - x0) / span * (size - 2.0 * pad);
        let y = pad + (p[1] - y0) / span * (size - 2.0 * pad);
        let color = palette.get(c % palette.len().max(1)).copied().unwrap_or("#000000");
        let _ = writeln!(
            s,
            r#"  <circle cx="{x:.2}" cy="{y:.2}" r="5" fill="{color}" data-cluster="{c}"/>"#
        );
    }
    s.push_str("</svg>\n");
    s
}

// ----- retargeting -------------------------------------------------------

/// `r_tgt = r_src * (H_src / W_src) * (W_tgt / H_tgt)`, which keeps the
/// physical aspect of the box.
pub fn transform_aspect(r_src: f64, source: &Canvas, target: &Canvas) -> f64 {
    r_src * source.height_over_width() / target.height_over_width()
}

/// Regenerates `source` for `target` with an order-conditioned model,
/// keeping areas, physical aspect ratios and reading order.
pub fn retarget_layout(source: &Layout, target: &Canvas, ckpt: &ModelCheckpoint, seed: u64) -> Result<Layout> {
    if !ckpt.config.order_conditioning {
        return Err(Error::Checkpoint(
            "retargeting needs an order-conditioned adjustment model".into(),
        ));
    }
    check_aspect(ckpt, target)?;
    let vocab = &ckpt.config.classes;
    let attrs = extract_attributes(source, &default_ratio_fixed(vocab), vocab)?;
    let orders = assign_reading_orders(source);
    let elements = source
        .elements
        .iter()
        .zip(&attrs)
        .zip(&orders)
        .map(|((e, a), &o)| {
            let r = transform_aspect(a.r, &source.canvas, target);
            let mut el = Element::new(
                e.class_probs.clone(),
                e.geometry,
                AttributeVector::new(a.s, r, origin_distance(&e.geometry)?),
            );
            el.order = Some(o);
            el.extra = e.extra.clone();
            Ok(el)
        })
        .collect::<Result<Vec<_>>>()?;
    let conditions = Layout::new(elements, target.clone());
    Ok(generate_layouts(ckpt, std::slice::from_ref(&conditions), seed)?.remove(0))
}

// ----- template retrieval ------------------------------------------------

/// Fixed-length attribute vector: six slots of `one-hot(class) ++ (s, r)`,
/// elements sorted by class id then descending area, empty slots zero.
pub fn query_vector(elements: &[(usize, f64, f64)], classes: usize) -> Result<Vec<f64>> {
    if elements.len() > QUERY_SLOTS {
        return Err(Error::validation(format!(
            "{} elements exceed the {QUERY_SLOTS} query slots",
            elements.len()
        )));
    }
    let mut sorted = elements.to_vec();
    sorted.sort_by(|a, b| a.0.cmp(&b.0).then(b.1.total_cmp(&a.1)));
    let width = classes + 2;
    let mut v = vec![0.0; QUERY_SLOTS * width];
    for (slot, &(c, s, r)) in sorted.iter().enumerate() {
        if c >= classes {
            return Err(Error::validation(format!("class id {c} out of range")));
        }
        v[slot * width + c] = 1.0;
        v[slot * width + classes] = s;
        v[slot * width + classes + 1] = r;
    }
    Ok(v)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Index and cosine similarity of the most attribute-similar corpus
/// layout; ties go to the lowest index.
pub fn template_retrieve(query: &[ElementSpec], corpus: &[Layout], vocab: &ClassVocab) -> Result<(usize, f64)> {
    if corpus.is_empty() {
        return Err(Error::validation("template corpus is empty"));
    }
    let q: Vec<(usize, f64, f64)> = query
        .iter()
        .enumerate()
        .map(|(i, sp)| {
            vocab
                .id(&sp.class)
                .map(|c| (c, sp.s, sp.r))
                .ok_or_else(|| Error::Parse {
                    path: format!("elements[{i}].class"),
                    message: format!("unknown class {:?}", sp.class),
                })
        })
        .collect::<Result<_>>()?;
    let qv = query_vector(&q, vocab.len())?;
    if qv.iter().all(|&x| x == 0.0) {
        return Err(Error::validation("query vector is zero"));
    }
    let mut best = (0, f64::NEG_INFINITY);
    for (i, l) in corpus.iter().enumerate() {
        let els: Vec<(usize, f64, f64)> = l
            .elements
            .iter()
            .map(|e| (e.class_id(), e.attributes.s, e.attributes.r))
            .collect();
        let sim = cosine(&qv, &query_vector(&els, vocab.len())?);
        if sim > best.1 {
            best = (i, sim);
        }
    }
    Ok(best)
}

/// Specs describing an existing layout's elements.
pub fn layout_specs(layout: &Layout, vocab: &ClassVocab) -> Vec<ElementSpec> {
    layout
        .elements
        .iter()
        .map(|e| ElementSpec {
            class: vocab.name(e.class_id()).unwrap_or("?").to_string(),
            s: e.attributes.s,
            r: e.attributes.r,
            order: e.order,
        })
        .collect()
}

/// Aspect class of a canvas, for callers that only know pixel sizes.
pub fn aspect_of(width_px: u32, height_px: u32) -> AspectClass {
    AspectClass::of(width_px, height_px)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::tiny_config;
    use crate::training::tests::{corpus, tiny_training};
    use crate::training::train;
    use proptest::prelude::*;

    fn trained(order_conditioning: bool, aspect: Option<AspectClass>) -> ModelCheckpoint {
        let cfg = crate::training::TrainingConfig {
            order_conditioning,
            aspect_class: aspect,
            eval_samples: 0,
            ..tiny_training(1)
        };
        train(&cfg, &corpus(8)).unwrap().checkpoint
    }

    fn specs() -> Vec<ElementSpec> {
        vec![
            ElementSpec {
                class: "logo".into(),
                s: 0.02,
                r: 0.5,
                order: None,
            },
            ElementSpec {
                class: "product_image".into(),
                s: 0.12,
                r: 0.75,
                order: None,
            },
            ElementSpec {
                class: "headline".into(),
                s: 0.05,
                r: 0.0,
                order: None,
            },
        ]
    }

    #[test]
    fn location_grid_examples() {
        assert_eq!(sample_image_locations(0.2, 0.2, 3).unwrap().len(), 9);
        assert_eq!(sample_image_locations(1.0, 1.0, 8).unwrap(), vec![(0.5, 0.5)]);
        assert!(matches!(sample_image_locations(1.2, 0.5, 3), Err(Error::Infeasible(_))));
        let pts = sample_image_locations(0.4, 0.2, 4).unwrap();
        assert!(pts
            .iter()
            .all(|&(x, y)| (0.2..=0.8).contains(&x) && (0.1..=0.9).contains(&y)));
        assert_eq!(sample_image_locations(1.0, 0.5, 3).unwrap().len(), 3);
    }

    #[test]
    fn candidates_freeze_product_location() {
        let ckpt = trained(false, Some(AspectClass::Square));
        let canvas = Canvas::new(400, 400).unwrap();
        let locs = sample_image_locations(0.4, 0.3, 2).unwrap();
        let a = generate_candidates(&specs(), &ckpt, &canvas, &locs, 3).unwrap();
        assert_eq!(a.len(), locs.len());
        for (c, &(x, y)) in a.iter().zip(&locs) {
            let p = &c.layout.elements[1].geometry;
            assert_eq!((p.xc, p.yc), (x, y));
            assert!((p.h / p.w - 0.75).abs() < 1e-12);
        }
        assert_eq!(a, generate_candidates(&specs(), &ckpt, &canvas, &locs, 3).unwrap());
        let portrait = Canvas::new(300, 600).unwrap();
        assert!(generate_candidates(&specs(), &ckpt, &portrait, &locs, 3).is_err());
        let untrained = ModelCheckpoint::initialize(tiny_config(), 0).unwrap();
        let l = &a[0].layout;
        assert!(matches!(
            extract_layout_features(l, &untrained),
            Err(Error::Checkpoint(_))
        ));
    }

    #[test]
    fn features_have_fixed_length() {
        let ckpt = trained(false, Some(AspectClass::Square));
        let ls = corpus(3);
        let f = extract_features(&ls, &ckpt).unwrap();
        let want = *ckpt.config.discriminator.conv_channels.last().unwrap();
        assert!(f.iter().all(|v| v.len() == want));
        assert_eq!(extract_layout_features(&ls[0], &ckpt).unwrap(), f[0]);
    }

    #[test]
    fn ranking_and_recommendation() {
        let ckpt = trained(false, Some(AspectClass::Square));
        let canvas = Canvas::new(400, 400).unwrap();
        let cfg = PipelineConfig {
            k: 2,
            grid_n: 2,
            ..Default::default()
        };
        let set = run_pipeline(&specs(), &canvas, &ckpt, &cfg).unwrap();
        assert_eq!(set.candidates.len(), 4);
        for c in &set.clusters {
            let min = c
                .members
                .iter()
                .map(|&i| set.candidates[i].cost.cost)
                .fold(f64::INFINITY, f64::min);
            assert_eq!(set.candidates[c.recommended].cost.cost, min);
            assert!(c.members.iter().all(|&i| set.candidates[i].cluster == c.cluster));
        }
        let again = run_pipeline(&specs(), &canvas, &ckpt, &cfg).unwrap();
        let vocab = &ckpt.config.classes;
        assert_eq!(set.to_json(vocab).unwrap(), again.to_json(vocab).unwrap());
        let desc = run_pipeline(
            &specs(),
            &canvas,
            &ckpt,
            &PipelineConfig {
                rank_order: RankOrder::Desc,
                ..cfg.clone()
            },
        )
        .unwrap();
        for c in &desc.clusters {
            let max = c
                .members
                .iter()
                .map(|&i| desc.candidates[i].cost.cost)
                .fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(desc.candidates[c.recommended].cost.cost, max);
        }
        let all = PipelineConfig { k: 4, ..cfg.clone() };
        let each = run_pipeline(&specs(), &canvas, &ckpt, &all).unwrap();
        assert_eq!(each.clusters.len(), 4);
        assert!(each.clusters.iter().all(|c| c.members.len() == 1));
        assert!(run_pipeline(&specs(), &canvas, &ckpt, &PipelineConfig { k: 5, ..cfg }).is_err());
    }

    #[test]
    fn cost_is_zero_for_clean_layout_and_certain_discriminator() {
        let ckpt = trained(false, Some(AspectClass::Square));
        let l = corpus(1).remove(0);
        let c = layout_costs(&[l], &ckpt, &LossWeights::default()).unwrap()[0];
        assert_eq!(c.over, 0.0);
        assert_eq!(c.alg, 0.0);
        assert!((c.cost - 0.6 * c.adv).abs() < 1e-12);
        assert_eq!(neg_log(1.0), 0.0);
    }

    #[test]
    fn kmeans_contracts() {
        let pts = vec![
            vec![0.0, 0.0],
            vec![0.0, 0.1],
            vec![5.0, 5.0],
            vec![5.0, 5.1],
            vec![0.0, 0.0],
        ];
        let l = kmeans(&pts, 2, 100, 1).unwrap();
        assert_eq!(l[0], l[1]);
        assert_eq!(l[0], l[4]);
        assert_eq!(l[2], l[3]);
        assert_ne!(l[0], l[2]);
        assert_eq!(l, kmeans(&pts, 2, 100, 1).unwrap());
        assert!(kmeans(&pts, 6, 100, 1).is_err());
        assert!(kmeans(&pts, 0, 100, 1).is_err());
    }

    #[test]
    fn tsne_contracts() {
        let pts: Vec<Vec<f64>> = (0..12)
            .map(|i| vec![(i / 6) as f64 * 10.0 + (i % 6) as f64 * 0.1, (i % 3) as f64 * 0.1])
            .collect();
        let cfg = TsneConfig {
            perplexity: 3.0,
            iterations: 300,
            ..Default::default()
        };
        let a = tsne_embed(&pts, 4, &cfg).unwrap();
        assert_eq!(a.len(), 12);
        assert_eq!(a, tsne_embed(&pts, 4, &cfg).unwrap());
        assert!(a.iter().all(|p| p[0].is_finite() && p[1].is_finite()));
        let within = sq_dist(&a[0], &a[1]).sqrt();
        let across = sq_dist(&a[0], &a[7]).sqrt();
        assert!(within < across);
        assert!(tsne_embed(&pts[..1], 4, &cfg).is_err());
        assert!(tsne_embed(&pts[..3], 4, &cfg).is_err());
        let svg = scatter_svg(&a, &[0; 12], &["#ff0000"]);
        assert_eq!(svg.matches("<circle").count(), 12);
    }

    #[test]
    fn aspect_transform_examples() {
        let sq = Canvas::new(400, 400).unwrap();
        let portrait = Canvas::new(300, 600).unwrap();
        assert_eq!(transform_aspect(0.8, &sq, &sq), 0.8);
        assert!((transform_aspect(0.8, &sq, &portrait) - 0.4).abs() < 1e-15);
    }

    #[test]
    fn retarget_keeps_physical_aspect_and_canvas() {
        let ckpt = trained(true, None);
        let src = corpus(1).remove(0);
        let target = Canvas::new(300, 600).unwrap();
        let out = retarget_layout(&src, &target, &ckpt, 2).unwrap();
        assert_eq!(out.canvas, target);
        assert_eq!(out.orders(), Some(assign_reading_orders(&src)));
        for (o, s) in out.elements.iter().zip(&src.elements) {
            if s.attributes.r > 0.0 {
                let phys_out = o.geometry.h * 600.0 / (o.geometry.w * 300.0);
                let phys_src = s.geometry.h * 400.0 / (s.geometry.w * 400.0);
                assert!((phys_out - phys_src).abs() < 1e-6, "{phys_out} vs {phys_src}");
            }
        }
        let plain = trained(false, None);
        assert!(matches!(
            retarget_layout(&src, &target, &plain, 2),
            Err(Error::Checkpoint(_))
        ));
    }

    #[test]
    fn retrieval_examples() {
        let vocab = ClassVocab::default();
        let ls = corpus(6);
        let (i, sim) = template_retrieve(&layout_specs(&ls[3], &vocab), &ls, &vocab).unwrap();
        assert!((sim - 1.0).abs() < 1e-12);
        assert!(i <= 3);
        let q = query_vector(&[(1, 0.1, 0.0), (0, 0.3, 0.5)], 6).unwrap();
        assert!((cosine(&q, &q) - 1.0).abs() < 1e-12);
        assert_eq!(q[0], 1.0);
        assert_eq!((q[6], q[7]), (0.3, 0.5));
        assert_eq!(q[8 + 1], 1.0);
        assert!(query_vector(&[(0, 0.1, 0.0); 7], 6).is_err());
        let twins = vec![ls[2].clone(), ls[2].clone()];
        assert_eq!(
            template_retrieve(&layout_specs(&ls[2], &vocab), &twins, &vocab)
                .unwrap()
                .0,
            0
        );
        assert!(template_retrieve(&[], &ls, &vocab).is_err());
        assert!(template_retrieve(&layout_specs(&ls[0], &vocab), &[], &vocab).is_err());
    }

    proptest! {
        #[test]
        fn retrieval_prefers_positive_similarity(s in 0.001f64..0.5, r in 0.0f64..2.0) {
            let vocab = ClassVocab::default();
            let mk = |class: usize| {
                Element::new(vocab.one_hot(class), Geometry::new(0.5, 0.3, 0.2, 0.1), AttributeVector::new(0.02, 0.0, 0.0))
            };
            let orth = Layout::new(vec![mk(0), mk(0)], Canvas::new(400, 400).unwrap());
            let hl = vocab.id("headline").unwrap();
            let pos = Layout::new(vec![mk(hl), mk(hl)], Canvas::new(400, 400).unwrap());
            let q = vec![ElementSpec { class: "headline".into(), s, r, order: None }];
            let (i, _) = template_retrieve(&q, &[orth, pos], &vocab).unwrap();
            prop_assert_eq!(i, 1);
        }

        #[test]
        fn location_grid_within_feasible_region(w in 0.01f64..1.0, h in 0.01f64..1.0, n in 1usize..9) {
            let pts = sample_image_locations(w, h, n).unwrap();
            prop_assert!(!pts.is_empty() && pts.len() <= n * n);
            for (x, y) in pts {
                prop_assert!(x >= w / 2.0 - 1e-12 && x <= 1.0 - w / 2.0 + 1e-12);
                prop_assert!(y >= h / 2.0 - 1e-12 && y <= 1.0 - h / 2.0 + 1e-12);
            }
        }
    }
}
