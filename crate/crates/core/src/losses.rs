//! Generator and discriminator objective terms.
//!
//! Every geometric loss is a plain function of one layout's boxes that
//! returns its value together with the gradient with respect to each box's
//! `(xC, yC, w, h)`. The metrics reuse the same functions, and
//! [`geometry_loss`] lifts them onto the autodiff tape for batched training.

use serde::{Deserialize, Serialize};

use crate::autodiff::{BackwardArgs, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::layout::Geometry;

/// Clamp applied to probabilities inside every logarithm.
pub const PROB_EPS: f64 = 1e-7;
/// Floor for predicted box areas in overlap denominators.
pub const AREA_EPS: f64 = 1e-6;
/// Upper clamp on alignment gaps before `-log(1 - x)`.
pub const GAP_MAX: f64 = 1.0 - 1e-6;
pub const DEFAULT_ALPHA: f64 = 0.3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub w_adv: f64,
    pub w_area: f64,
    pub w_over: f64,
    pub w_alg: f64,
    pub w_ord: f64,
    pub w_r: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_adv: 0.6,
            w_area: 4.0,
            w_over: 8.0,
            w_alg: 20.0,
            w_ord: 20.0,
            w_r: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.w_adv, self.w_area, self.w_over, self.w_alg, self.w_ord, self.w_r];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::validation(format!(
                "loss weights must be finite and >= 0: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Per-term generator losses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub adv: f64,
    pub area: f64,
    pub over: f64,
    pub alg: f64,
    pub ord: f64,
}

pub fn generator_total_loss(c: &LossComponents, w: &LossWeights) -> f64 {
    w.w_adv * c.adv + w.w_area * c.area + w.w_over * c.over + w.w_alg * c.alg + w.w_ord * c.ord
}

/// A loss value and its gradient with respect to each box's
/// `(xC, yC, w, h)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ValueGrad {
    pub value: f64,
    pub grad: Vec<[f64; 4]>,
}

/// Gradient accumulator in corner coordinates `(xL, xR, yT, yB)`.
struct CornerGrad(Vec<[f64; 4]>);

impl CornerGrad {
    fn new(n: usize) -> Self {
        Self(vec![[0.0; 4]; n])
    }

    fn into_value_grad(self, value: f64) -> ValueGrad {
        let grad = self
            .0
            .into_iter()
            .map(|[xl, xr, yt, yb]| [xl + xr, yt + yb, 0.5 * (xr - xl), 0.5 * (yb - yt)])
            .collect();
        ValueGrad { value, grad }
    }
}

const XL: usize = 0;
const XR: usize = 1;
const YT: usize = 2;
const YB: usize = 3;

fn check_finite(geoms: &[Geometry]) -> Result<()> {
    if let Some(i) = geoms.iter().position(|g| !g.is_finite()) {
        return Err(Error::validation(format!("element {i} has non-finite geometry")));
    }
    Ok(())
}

// ----- margin area -------------------------------------------------------

fn check_targets(s_target: &[f64], alpha: f64) -> Result<()> {
    if let Some(i) = s_target.iter().position(|s| !(*s > 0.0 && s.is_finite())) {
        return Err(Error::validation(format!(
            "expected area of element {i} must be > 0, got {}",
            s_target[i]
        )));
    }
    if !(alpha >= 0.0) {
        return Err(Error::validation(format!("alpha {alpha} must be >= 0")));
    }
    Ok(())
}

/// `sum_i max(0, |s'_i - s_i| / s_i - alpha)`.
pub fn margin_area_loss(s_pred: &[f64], s_target: &[f64], alpha: f64) -> Result<f64> {
    Ok(margin_area_terms(s_pred, s_target, alpha)?.0)
}

/// Value and gradient with respect to the predicted areas.
pub fn margin_area_terms(s_pred: &[f64], s_target: &[f64], alpha: f64) -> Result<(f64, Vec<f64>)> {
    if s_pred.len() != s_target.len() {
        return Err(Error::validation(format!(
            "{} predicted areas for {} targets",
            s_pred.len(),
            s_target.len()
        )));
    }
    check_targets(s_target, alpha)?;
    let mut value = 0.0;
    let mut grad = vec![0.0; s_pred.len()];
    for (i, (&sp, &st)) in s_pred.iter().zip(s_target).enumerate() {
        let excess = (sp - st).abs() / st - alpha;
        if excess > 0.0 {
            value += excess;
            grad[i] = (sp - st).signum() / st;
        }
    }
    Ok((value, grad))
}

/// Margin area loss on box areas `w * h`.
pub fn margin_area_value_grad(geoms: &[Geometry], s_target: &[f64], alpha: f64) -> Result<ValueGrad> {
    check_finite(geoms)?;
    let areas: Vec<f64> = geoms.iter().map(Geometry::area).collect();
    let (value, ds) = margin_area_terms(&areas, s_target, alpha)?;
    let grad = geoms
        .iter()
        .zip(ds)
        .map(|(g, d)| [0.0, 0.0, d * g.h, d * g.w])
        .collect();
    Ok(ValueGrad { value, grad })
}

// ----- overlap -----------------------------------------------------------

/// Clamped overlap of `[a0, a1]` and `[b0, b1]` with the index of the
/// binding endpoint on each side (`0` = first interval, `1` = second).
#[inline]
fn overlap_1d(a0: f64, a1: f64, b0: f64, b1: f64) -> (f64, usize, usize) {
    let (hi, hi_from) = if a1 <= b1 { (a1, 0) } else { (b1, 1) };
    let (lo, lo_from) = if a0 >= b0 { (a0, 0) } else { (b0, 1) };
    ((hi - lo).max(0.0), hi_from, lo_from)
}

/// `sum_i sum_{j != i} |box_i ∩ box_j| / max(area_i, eps)`.
pub fn overlap_value_grad(geoms: &[Geometry]) -> ValueGrad {
    let n = geoms.len();
    let mut cg = CornerGrad::new(n);
    let mut value = 0.0;
    for i in 0..n {
        let gi = &geoms[i];
        let area = gi.w * gi.h;
        let denom = area.max(AREA_EPS);
        for j in 0..n {
            if j == i {
                continue;
            }
            let gj = &geoms[j];
            let (ox, xr_from, xl_from) = overlap_1d(gi.xl(), gi.xr(), gj.xl(), gj.xr());
            let (oy, yb_from, yt_from) = overlap_1d(gi.yt(), gi.yb(), gj.yt(), gj.yb());
            let inter = ox * oy;
            if inter <= 0.0 {
                continue;
            }
            value += inter / denom;
            let pair = [i, j];
            let kx = oy / denom;
            let ky = ox / denom;
            cg.0[pair[xr_from]][XR] += kx;
            cg.0[pair[xl_from]][XL] -= kx;
            cg.0[pair[yb_from]][YB] += ky;
            cg.0[pair[yt_from]][YT] -= ky;
            if area > AREA_EPS {
                // d(1/area) through w = xR - xL and h = yB - yT.
                let k = -inter / (area * area);
                cg.0[i][XR] += k * gi.h;
                cg.0[i][XL] -= k * gi.h;
                cg.0[i][YB] += k * gi.w;
                cg.0[i][YT] -= k * gi.w;
            }
        }
    }
    cg.into_value_grad(value)
}

pub fn overlap_loss(geoms: &[Geometry]) -> f64 {
    overlap_value_grad(geoms).value
}

// ----- alignment ---------------------------------------------------------

/// The six alignment coordinates `(xL, xC, xR, yT, yC, yB)` and, for each,
/// its weights on the corners `(xL, xR, yT, yB)`.
fn alignment_channels(g: &Geometry) -> [f64; 6] {
    [g.xl(), g.xc, g.xr(), g.yt(), g.yc, g.yb()]
}

const CHANNEL_CORNERS: [[f64; 4]; 6] = [
    [1.0, 0.0, 0.0, 0.0],
    [0.5, 0.5, 0.0, 0.0],
    [0.0, 1.0, 0.0, 0.0],
    [0.0, 0.0, 1.0, 0.0],
    [0.0, 0.0, 0.5, 0.5],
    [0.0, 0.0, 0.0, 1.0],
];

/// `sum_i min_k g(min_{j != i} |c_ik - c_jk|)` with `g(x) = -log(1 - x)`;
/// zero when fewer than two elements.
pub fn alignment_value_grad(geoms: &[Geometry]) -> ValueGrad {
    let n = geoms.len();
    let mut cg = CornerGrad::new(n);
    if n < 2 {
        return cg.into_value_grad(0.0);
    }
    let ch: Vec<[f64; 6]> = geoms.iter().map(alignment_channels).collect();
    let mut value = 0.0;
    for i in 0..n {
        // (g value, channel, neighbour, signed diff)
        let mut best: Option<(f64, usize, usize, f64)> = None;
        for k in 0..6 {
            let mut gap = f64::INFINITY;
            let mut nb = 0;
            for j in 0..n {
                if j != i {
                    let d = (ch[i][k] - ch[j][k]).abs();
                    if d < gap {
                        gap = d;
                        nb = j;
                    }
                }
            }
            let gv = -(1.0 - gap.min(GAP_MAX)).ln();
            if best.is_none_or(|b| gv < b.0) {
                best = Some((gv, k, nb, ch[i][k] - ch[nb][k]));
            }
        }
        let (gv, k, j, diff) = best.expect("six channels");
        value += gv;
        let gap = diff.abs();
        if gap < GAP_MAX && diff != 0.0 {
            let dg = diff.signum() / (1.0 - gap);
            for c in 0..4 {
                cg.0[i][c] += dg * CHANNEL_CORNERS[k][c];
                cg.0[j][c] -= dg * CHANNEL_CORNERS[k][c];
            }
        }
    }
    cg.into_value_grad(value)
}

pub fn alignment_loss(geoms: &[Geometry]) -> f64 {
    alignment_value_grad(geoms).value
}

// ----- reading order -----------------------------------------------------

fn check_permutation(orders: &[usize]) -> Result<()> {
    let mut seen = vec![false; orders.len()];
    for &o in orders {
        if o >= orders.len() || std::mem::replace(&mut seen[o], true) {
            return Err(Error::validation(format!(
                "orders {orders:?} are not a permutation of 0..{}",
                orders.len()
            )));
        }
    }
    Ok(())
}

/// `sum_i sum_j 1[o_i < o_j] max(0, d_i - d_j)`.
pub fn order_loss(orders: &[usize], distances: &[f64]) -> Result<f64> {
    if orders.len() != distances.len() {
        return Err(Error::validation(format!(
            "{} orders for {} distances",
            orders.len(),
            distances.len()
        )));
    }
    check_permutation(orders)?;
    let mut total = 0.0;
    for i in 0..orders.len() {
        for j in 0..orders.len() {
            if orders[i] < orders[j] {
                total += (distances[i] - distances[j]).max(0.0);
            }
        }
    }
    Ok(total)
}

/// Order loss on origin distances `sqrt(xL^2 + yT^2)` of the boxes.
pub fn order_value_grad(geoms: &[Geometry], orders: &[usize]) -> Result<ValueGrad> {
    check_finite(geoms)?;
    let n = geoms.len();
    let d: Vec<f64> = geoms.iter().map(|g| g.xl().hypot(g.yt())).collect();
    let value = order_loss(orders, &d)?;
    let mut dd = vec![0.0; n];
    for i in 0..n {
        for j in 0..n {
            if orders[i] < orders[j] && d[i] > d[j] {
                dd[i] += 1.0;
                dd[j] -= 1.0;
            }
        }
    }
    let mut cg = CornerGrad::new(n);
    for (i, g) in geoms.iter().enumerate() {
        if dd[i] != 0.0 && d[i] > 0.0 {
            cg.0[i][XL] += dd[i] * g.xl() / d[i];
            cg.0[i][YT] += dd[i] * g.yt() / d[i];
        }
    }
    Ok(cg.into_value_grad(value))
}

// ----- attribute reconstruction and adversarial terms --------------------

/// `S_c = sum_i p_ic * s_i`.
pub fn class_area_totals(class_probs: &[Vec<f64>], areas: &[f64]) -> Result<Vec<f64>> {
    if class_probs.len() != areas.len() {
        return Err(Error::validation(format!(
            "{} class rows for {} areas",
            class_probs.len(),
            areas.len()
        )));
    }
    let m = class_probs.first().map_or(0, Vec::len);
    if class_probs.iter().any(|p| p.len() != m) {
        return Err(Error::validation("class probability rows have inconsistent length"));
    }
    let mut totals = vec![0.0; m];
    for (p, &s) in class_probs.iter().zip(areas) {
        for (t, &pc) in totals.iter_mut().zip(p) {
            *t += pc * s;
        }
    }
    Ok(totals)
}

fn neg_log(p: f64) -> f64 {
    -p.clamp(PROB_EPS, 1.0).ln()
}

/// `-log p_global - log p_local` with probabilities clamped to `[eps, 1]`.
pub fn generator_adversarial_loss(p_global: f64, p_local: f64) -> f64 {
    neg_log(p_global) + neg_log(p_local)
}

/// Discriminator probabilities for one real/fake pair.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiscriminatorOutputs {
    pub real_global: f64,
    pub fake_global: f64,
    pub real_local: f64,
    pub fake_local: f64,
}

/// Four-term cross-entropy plus `w_r * sum_c |S_c - S'_c|`.
pub fn discriminator_loss(d: &DiscriminatorOutputs, s_pred: &[f64], s_real: &[f64], w_r: f64) -> Result<f64> {
    if s_pred.len() != s_real.len() {
        return Err(Error::validation(format!(
            "area vectors differ in length: {} vs {}",
            s_pred.len(),
            s_real.len()
        )));
    }
    let l_a =
        neg_log(d.real_global) + neg_log(1.0 - d.fake_global) + neg_log(d.real_local) + neg_log(1.0 - d.fake_local);
    let l_r: f64 = s_pred.iter().zip(s_real).map(|(a, b)| (a - b).abs()).sum();
    Ok(l_a + w_r * l_r)
}

// ----- tape wrappers -----------------------------------------------------

/// Mean over layouts of a per-layout geometric loss. `geoms` is `[total, 4]`
/// and `segments` lists each layout's `(start, len)` rows.
pub fn geometry_loss<F>(graph: &mut Graph, geoms: Var, segments: &[(usize, usize)], eval: F) -> Result<Var>
where
    F: Fn(usize, &[Geometry]) -> Result<ValueGrad>,
{
    let rows = graph.value(geoms).data();
    let batch = segments.len().max(1) as f64;
    let mut total = 0.0;
    let mut grad = vec![0.0; rows.len()];
    for (li, &(start, len)) in segments.iter().enumerate() {
        let gs: Vec<Geometry> = (start..start + len)
            .map(|r| Geometry::new(rows[4 * r], rows[4 * r + 1], rows[4 * r + 2], rows[4 * r + 3]))
            .collect();
        let vg = eval(li, &gs)?;
        total += vg.value;
        for (k, gr) in vg.grad.iter().enumerate() {
            for c in 0..4 {
                grad[4 * (start + k) + c] = gr[c] / batch;
            }
        }
    }
    let shape = graph.value(geoms).shape().to_vec();
    let grad = Tensor::new(shape, grad);
    Ok(
        graph.custom(&[geoms], Tensor::scalar(total / batch), move |a: &BackwardArgs<'_>| {
            let g = a.grad.item();
            vec![Some(grad.map(|x| x * g))]
        }),
    )
}

/// Mean binary cross-entropy of probabilities `p` (any shape) against a
/// constant label, with the probability clamp.
pub fn bce_mean(graph: &mut Graph, p: Var, label: bool) -> Var {
    let v = graph.value(p);
    let n = v.len().max(1) as f64;
    let q = move |x: f64| if label { x } else { 1.0 - x };
    let total: f64 = v.data().iter().map(|&x| neg_log(q(x))).sum();
    graph.custom(&[p], Tensor::scalar(total / n), move |a: &BackwardArgs<'_>| {
        let g = a.grad.item();
        let sign = if label { 1.0 } else { -1.0 };
        let d = a.inputs[0].map(|x| {
            let qx = q(x);
            if qx > PROB_EPS && qx <= 1.0 {
                -g * sign / (qx * n)
            } else {
                0.0
            }
        });
        vec![Some(d)]
    })
}

/// Mean over rows of `sum_c |a_rc - target_rc|`.
pub fn l1_rows_mean(graph: &mut Graph, a: Var, target: Tensor) -> Var {
    let v = graph.value(a);
    let rows = v.shape().first().copied().unwrap_or(1).max(1) as f64;
    let total: f64 = v.data().iter().zip(target.data()).map(|(x, t)| (x - t).abs()).sum();
    graph.custom(&[a], Tensor::scalar(total / rows), move |b: &BackwardArgs<'_>| {
        let g = b.grad.item();
        let data = b.inputs[0]
            .data()
            .iter()
            .zip(target.data())
            .map(|(x, t)| g * (x - t).signum() * f64::from(x != t) / rows)
            .collect();
        vec![Some(Tensor::new(b.inputs[0].shape().to_vec(), data))]
    })
}
