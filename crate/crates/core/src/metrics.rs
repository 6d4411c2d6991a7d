//! Evaluation metrics: overlap and alignment indices, symmetry score,
//! per-class area differences and reading-order retention.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::assign_reading_orders;
use crate::layout::{AttributeVector, ClassVocab, Layout};
use crate::losses::{alignment_loss, overlap_loss};

/// Thresholds reported by default for order retention.
pub const DEFAULT_THRESHOLDS: [f64; 6] = [0.5, 0.6, 0.7, 0.8, 0.9, 1.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassAreaStat {
    pub class: String,
    pub count: usize,
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetentionPoint {
    pub threshold: f64,
    pub proportion: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub layouts: usize,
    pub overlap_index: f64,
    pub alignment_index: f64,
    /// Mean per-layout symmetry score.
    pub symmetry_score: f64,
    pub area_difference: Vec<ClassAreaStat>,
    /// Present when every layout carries input orders.
    pub order_retention: Option<Vec<RetentionPoint>>,
}

fn non_empty(layouts: &[Layout]) -> Result<()> {
    if layouts.is_empty() {
        return Err(Error::validation("metric needs at least one layout"));
    }
    Ok(())
}

fn mean_of(layouts: &[Layout], f: impl Fn(&Layout) -> f64) -> Result<f64> {
    non_empty(layouts)?;
    Ok(layouts.iter().map(f).sum::<f64>() / layouts.len() as f64)
}

/// Mean over layouts of the overlap loss.
pub fn overlap_index(layouts: &[Layout]) -> Result<f64> {
    mean_of(layouts, |l| overlap_loss(&l.geometries()))
}

/// Mean over layouts of the alignment loss.
pub fn alignment_index(layouts: &[Layout]) -> Result<f64> {
    mean_of(layouts, |l| alignment_loss(&l.geometries()))
}

/// Binary filled-box occupancy on a `width x height` grid: a pixel is on
/// when some box covers at least half of it.
pub fn occupancy(layout: &Layout, width: usize, height: usize) -> Vec<bool> {
    let (wf, hf) = (width as f64, height as f64);
    let mut on = vec![false; width * height];
    for e in &layout.elements {
        let g = &e.geometry;
        let (x0, x1) = (g.xl() * wf, g.xr() * wf);
        let (y0, y1) = (g.yt() * hf, g.yb() * hf);
        let cover = |a: f64, b: f64, p: usize| (b.min(p as f64 + 1.0) - a.max(p as f64)).clamp(0.0, 1.0);
        let cols: Vec<f64> = (0..width).map(|u| cover(x0, x1, u)).collect();
        for v in 0..height {
            let cy = cover(y0, y1, v);
            if cy == 0.0 {
                continue;
            }
            for (u, &cx) in cols.iter().enumerate() {
                if cx * cy >= 0.5 {
                    on[v * width + u] = true;
                }
            }
        }
    }
    on
}

/// Fraction of occupied pixels whose mirror across the vertical centerline
/// (`u -> W-1-u`) is also occupied. A blank rendering scores 1.
pub fn symmetry_score(layout: &Layout, width: usize, height: usize) -> Result<f64> {
    if width == 0 || height == 0 {
        return Err(Error::validation("symmetry raster must be at least 1x1"));
    }
    let on = occupancy(layout, width, height);
    let mut total = 0usize;
    let mut matched = 0usize;
    for v in 0..height {
        for u in 0..width {
            if on[v * width + u] {
                total += 1;
                if on[v * width + (width - 1 - u)] {
                    matched += 1;
                }
            }
        }
    }
    Ok(if total == 0 { 1.0 } else { matched as f64 / total as f64 })
}

/// Mean symmetry over layouts, each rastered at its own canvas size.
pub fn mean_symmetry(layouts: &[Layout]) -> Result<f64> {
    non_empty(layouts)?;
    let mut sum = 0.0;
    for l in layouts {
        sum += symmetry_score(l, l.canvas.width_px as usize, l.canvas.height_px as usize)?;
    }
    Ok(sum / layouts.len() as f64)
}

/// Per-class mean and population standard deviation of `|s' - s| / s`,
/// where `s'` is the box area and `s` the conditioned area. Classes with
/// no elements are omitted.
pub fn area_difference_stats(
    layouts: &[Layout],
    conditions: &[Vec<AttributeVector>],
    vocab: &ClassVocab,
) -> Result<Vec<ClassAreaStat>> {
    if layouts.len() != conditions.len() {
        return Err(Error::validation(format!(
            "{} layouts but {} condition sets",
            layouts.len(),
            conditions.len()
        )));
    }
    let mut per_class: Vec<Vec<f64>> = vec![Vec::new(); vocab.len()];
    for (li, (l, c)) in layouts.iter().zip(conditions).enumerate() {
        if l.len() != c.len() {
            return Err(Error::validation(format!(
                "layout {li} has {} elements but {} conditions",
                l.len(),
                c.len()
            )));
        }
        for (e, a) in l.elements.iter().zip(c) {
            if !(a.s > 0.0) {
                return Err(Error::validation(format!(
                    "layout {li} has a non-positive area condition"
                )));
            }
            let class = e.class_id();
            if class >= vocab.len() {
                return Err(Error::validation(format!("class id {class} not in vocabulary")));
            }
            per_class[class].push((e.geometry.area() - a.s).abs() / a.s);
        }
    }
    Ok(per_class
        .into_iter()
        .enumerate()
        .filter(|(_, v)| !v.is_empty())
        .map(|(c, v)| {
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            ClassAreaStat {
                class: vocab.name(c).unwrap_or("?").to_string(),
                count: v.len(),
                mean,
                std: var.sqrt(),
            }
        })
        .collect())
}

/// Area conditions carried by the layouts' own elements.
pub fn layout_conditions(layouts: &[Layout]) -> Vec<Vec<AttributeVector>> {
    layouts
        .iter()
        .map(|l| l.elements.iter().map(|e| e.attributes).collect())
        .collect()
}

/// Fraction of elements whose reading-order rank equals the input order.
pub fn order_match_fraction(layout: &Layout) -> Result<f64> {
    let input = layout
        .orders()
        .ok_or_else(|| Error::validation("layout has no input order annotations"))?;
    let actual = assign_reading_orders(layout);
    let hits = input.iter().zip(&actual).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / layout.len().max(1) as f64)
}

/// For each threshold `t`, the fraction of layouts whose per-layout match
/// fraction is at least `t`.
pub fn order_retention_curve(layouts: &[Layout], thresholds: &[f64]) -> Result<Vec<RetentionPoint>> {
    non_empty(layouts)?;
    let fractions = layouts.iter().map(order_match_fraction).collect::<Result<Vec<_>>>()?;
    Ok(thresholds
        .iter()
        .map(|&t| RetentionPoint {
            threshold: t,
            proportion: fractions.iter().filter(|&&f| f >= t - 1e-12).count() as f64 / fractions.len() as f64,
        })
        .collect())
}

pub fn evaluate(layouts: &[Layout], vocab: &ClassVocab, thresholds: &[f64]) -> Result<MetricReport> {
    non_empty(layouts)?;
    let with_orders = layouts.iter().all(|l| l.orders().is_some());
    Ok(MetricReport {
        layouts: layouts.len(),
        overlap_index: overlap_index(layouts)?,
        alignment_index: alignment_index(layouts)?,
        symmetry_score: mean_symmetry(layouts)?,
        area_difference: area_difference_stats(layouts, &layout_conditions(layouts), vocab)?,
        order_retention: if with_orders {
            Some(order_retention_curve(layouts, thresholds)?)
        } else {
            None
        },
    })
}

/// Plain-text table with one row per labelled report.
pub fn render_table(rows: &[(String, MetricReport)]) -> String {
    let label_w = rows.iter().map(|(l, _)| l.len()).max().unwrap_or(0).max(5);
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<label_w$}  {:>8}  {:>8}  {:>8}  {:>9}",
        "Model", "Overlap", "Align", "Symmetry", "Area diff"
    );
    let _ = writeln!(s, "{}", "-".repeat(label_w + 43));
    for (label, r) in rows {
        let worst = r.area_difference.iter().map(|c| c.mean).fold(0.0, f64::max);
        let _ = writeln!(
            s,
            "{:<label_w$}  {:>8.4}  {:>8.4}  {:>7.2}%  {:>9.4}",
            label,
            r.overlap_index,
            r.alignment_index,
            100.0 * r.symmetry_score,
            worst
        );
    }
    for (label, r) in rows {
        if r.area_difference.is_empty() {
            continue;
        }
        let _ = writeln!(s, "\n{label}: relative area difference per class");
        for c in &r.area_difference {
            let _ = writeln!(
                s,
                "  {:<14} n={:<5} mean={:.4} std={:.4}",
                c.class, c.count, c.mean, c.std
            );
        }
        if let Some(curve) = &r.order_retention {
            let pts: Vec<String> = curve
                .iter()
                .map(|p| format!("{:.1}:{:.3}", p.threshold, p.proportion))
                .collect();
            let _ = writeln!(s, "  order retention {}", pts.join(" "));
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::{Canvas, Element, Geometry};
    use proptest::prelude::*;

    fn layout(geoms: &[Geometry]) -> Layout {
        let vocab = ClassVocab::default();
        Layout::new(
            geoms
                .iter()
                .enumerate()
                .map(|(i, g)| {
                    Element::new(
                        vocab.one_hot(i % 6),
                        *g,
                        AttributeVector::new(g.area().max(1e-4), 0.0, 0.0),
                    )
                })
                .collect(),
            Canvas::new(64, 64).unwrap(),
        )
    }

    #[test]
    fn indices_of_duplicated_pairs() {
        let g = Geometry::new(0.4, 0.4, 0.2, 0.3);
        let ls = vec![layout(&[g, g]), layout(&[g, g])];
        assert!((overlap_index(&ls).unwrap() - 2.0).abs() < 1e-12);
        assert!(overlap_index(&[]).is_err());
        assert!(alignment_index(&[]).is_err());
    }

    #[test]
    fn alignment_index_of_half_gaps() {
        let p = Geometry::from_corners(0.0, 0.0, 0.25, 0.25);
        let q = Geometry::from_corners(0.5, 0.5, 0.75, 0.75);
        let v = alignment_index(&[layout(&[p, q])]).unwrap();
        assert!((v - 2.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn symmetry_examples() {
        let centered = layout(&[Geometry::new(0.5, 0.5, 0.5, 0.25)]);
        assert_eq!(symmetry_score(&centered, 64, 64).unwrap(), 1.0);
        let left = layout(&[Geometry::from_corners(0.0, 0.2, 0.25, 0.4)]);
        assert_eq!(symmetry_score(&left, 64, 64).unwrap(), 0.0);
        let blank = layout(&[Geometry::new(0.5, 0.5, 0.0, 0.0)]);
        assert_eq!(symmetry_score(&blank, 64, 64).unwrap(), 1.0);
    }

    #[test]
    fn area_stats_examples() {
        let vocab = ClassVocab::default();
        let g = Geometry::new(0.5, 0.5, 0.2, 0.2);
        let l = layout(&[g, g]);
        let exact = vec![vec![AttributeVector::new(0.04, 0.0, 0.0); 2]];
        let stats = area_difference_stats(std::slice::from_ref(&l), &exact, &vocab).unwrap();
        assert!(stats.iter().all(|c| c.mean.abs() < 1e-12 && c.std == 0.0));
        let small = vec![vec![AttributeVector::new(0.04 / 1.4, 0.0, 0.0); 2]];
        let stats = area_difference_stats(std::slice::from_ref(&l), &small, &vocab).unwrap();
        assert!(stats.iter().all(|c| (c.mean - 0.4).abs() < 1e-12 && c.std < 1e-12));
        assert!(area_difference_stats(&[l], &[], &vocab).is_err());
    }

    fn ordered(geoms: &[Geometry], orders: &[usize]) -> Layout {
        let mut l = layout(geoms);
        for (e, &o) in l.elements.iter_mut().zip(orders) {
            e.order = Some(o);
        }
        l
    }

    #[test]
    fn retention_examples() {
        let stack: Vec<Geometry> = (0..4)
            .map(|i| Geometry::from_corners(0.1, 0.1 + 0.2 * i as f64, 0.5, 0.2 + 0.2 * i as f64))
            .collect();
        let perfect = ordered(&stack, &[0, 1, 2, 3]);
        let curve = order_retention_curve(std::slice::from_ref(&perfect), &DEFAULT_THRESHOLDS).unwrap();
        assert!(curve.iter().all(|p| p.proportion == 1.0));
        let half = ordered(&stack, &[0, 1, 3, 2]);
        assert_eq!(order_match_fraction(&half).unwrap(), 0.5);
        let c = order_retention_curve(&[half], &[0.4, 0.5, 0.6]).unwrap();
        assert_eq!(c.iter().map(|p| p.proportion).collect::<Vec<_>>(), vec![1.0, 1.0, 0.0]);
        assert!(order_retention_curve(std::slice::from_ref(&perfect), &[])
            .unwrap()
            .is_empty());
        assert!(order_retention_curve(&[layout(&stack)], &[0.5]).is_err());
    }

    #[test]
    fn table_lists_every_row() {
        let g = Geometry::new(0.5, 0.5, 0.2, 0.2);
        let r = evaluate(&[layout(&[g, g])], &ClassVocab::default(), &DEFAULT_THRESHOLDS).unwrap();
        let t = render_table(&[("a".into(), r.clone()), ("b".into(), r)]);
        assert!(t.contains("Overlap"));
        assert_eq!(
            t.lines().filter(|l| l.starts_with("a ") || l.starts_with("b ")).count(),
            2
        );
    }

    fn grid_geom() -> impl Strategy<Value = Geometry> {
        (0u32..64, 0u32..64, 1u32..32, 1u32..32).prop_map(|(x, y, w, h)| {
            let x0 = x as f64 / 64.0;
            let y0 = y as f64 / 64.0;
            Geometry::from_corners(x0, y0, (x0 + w as f64 / 64.0).min(1.0), (y0 + h as f64 / 64.0).min(1.0))
        })
    }

    proptest! {
        #[test]
        fn symmetry_mirror_invariant(gs in prop::collection::vec(grid_geom(), 1..5)) {
            let l = layout(&gs);
            let a = symmetry_score(&l, 64, 48).unwrap();
            let b = symmetry_score(&l.mirrored(), 64, 48).unwrap();
            prop_assert!((0.0..=1.0).contains(&a));
            prop_assert_eq!(a, b);
        }

        #[test]
        fn retention_non_increasing(seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let layouts: Vec<Layout> = (0..8).map(|_| {
                let n = rng.random_range(2..6);
                let gs: Vec<Geometry> = (0..n).map(|_| Geometry::new(
                    rng.random_range(0.2..0.8), rng.random_range(0.2..0.8), 0.1, 0.1)).collect();
                let mut o: Vec<usize> = (0..n).collect();
                for i in (1..n).rev() { o.swap(i, rng.random_range(0..=i)); }
                ordered(&gs, &o)
            }).collect();
            let curve = order_retention_curve(&layouts, &[0.0, 0.2, 0.4, 0.6, 0.8, 1.0]).unwrap();
            for w in curve.windows(2) {
                prop_assert!(w[1].proportion <= w[0].proportion);
            }
        }
    }
}
