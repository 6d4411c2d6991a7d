//! Geometric derivations shared by the losses, renderer, metrics and
//! pipeline: box corners, origin distance, reading orders, the hard
//! aspect-ratio constraint and rectangle intersection.

use crate::error::{Error, Result};
use crate::layout::{Geometry, Layout};

/// Top-left, center and bottom-right coordinates of a box.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Corners {
    pub xl: f64,
    pub yt: f64,
    pub xc: f64,
    pub yc: f64,
    pub xr: f64,
    pub yb: f64,
}

impl Corners {
    pub fn to_array(self) -> [f64; 6] {
        [self.xl, self.yt, self.xc, self.yc, self.xr, self.yb]
    }
}

pub fn derive_corners(g: &Geometry) -> Result<Corners> {
    if !g.is_finite() {
        return Err(Error::validation(format!("non-finite geometry {g:?}")));
    }
    Ok(Corners {
        xl: g.xl(),
        yt: g.yt(),
        xc: g.xc,
        yc: g.yc,
        xr: g.xr(),
        yb: g.yb(),
    })
}

/// Distance from the box's top-left corner to the canvas origin.
pub fn origin_distance(g: &Geometry) -> Result<f64> {
    let c = derive_corners(g)?;
    Ok(c.xl.hypot(c.yt))
}

/// Ascending-distance ranks; equal distances keep list order.
pub fn orders_from_distances(distances: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..distances.len()).collect();
    idx.sort_by(|&a, &b| distances[a].total_cmp(&distances[b]));
    let mut orders = vec![0; distances.len()];
    for (rank, &i) in idx.iter().enumerate() {
        orders[i] = rank;
    }
    orders
}

pub fn reading_orders(geoms: &[Geometry]) -> Vec<usize> {
    let d: Vec<f64> = geoms.iter().map(|g| g.xl().hypot(g.yt())).collect();
    orders_from_distances(&d)
}

pub fn assign_reading_orders(layout: &Layout) -> Vec<usize> {
    reading_orders(&layout.geometries())
}

/// Final height under the aspect constraint: `h_pred` when `r == 0`,
/// otherwise `r * w_pred`.
pub fn apply_aspect_constraint(w_pred: f64, h_pred: f64, r: f64) -> Result<f64> {
    if !(r >= 0.0) {
        return Err(Error::validation(format!("aspect ratio {r} must be >= 0")));
    }
    Ok(if r == 0.0 { h_pred } else { r * w_pred })
}

/// Overlap length of two closed intervals, clamped at zero.
#[inline]
pub fn interval_overlap(a0: f64, a1: f64, b0: f64, b1: f64) -> f64 {
    (a1.min(b1) - a0.max(b0)).max(0.0)
}

pub fn intersection_area(g1: &Geometry, g2: &Geometry) -> f64 {
    interval_overlap(g1.xl(), g1.xr(), g2.xl(), g2.xr()) * interval_overlap(g1.yt(), g1.yb(), g2.yt(), g2.yb())
}

/// Scales a box down uniformly until it fits the unit canvas, then shifts it
/// inside. The aspect ratio is kept.
pub fn legalize_geometry(g: &Geometry, min_side: f64) -> Geometry {
    let mut w = g.w.max(0.0);
    let mut h = g.h.max(0.0);
    let largest = w.max(h);
    if largest > 1.0 {
        w /= largest;
        h /= largest;
    }
    // Grow tiny boxes to the minimum renderable size, keeping the ratio.
    let smallest = w.min(h);
    if smallest < min_side {
        if smallest > 0.0 {
            let k = (min_side / smallest).min(1.0 / w.max(h));
            w *= k;
            h *= k;
        }
        w = w.max(min_side);
        h = h.max(min_side);
    }
    let xc = g.xc.clamp(w / 2.0, 1.0 - w / 2.0);
    let yc = g.yc.clamp(h / 2.0, 1.0 - h / 2.0);
    Geometry::new(xc, yc, w, h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn corners_of_full_canvas_box() {
        let c = derive_corners(&Geometry::new(0.5, 0.5, 1.0, 1.0)).unwrap();
        assert_eq!(c.to_array(), [0.0, 0.0, 0.5, 0.5, 1.0, 1.0]);
    }

    #[test]
    fn corners_of_offset_box() {
        let c = derive_corners(&Geometry::new(0.5, 0.5, 0.4, 0.2)).unwrap();
        let want = [0.3, 0.4, 0.5, 0.5, 0.7, 0.6];
        for (a, b) in c.to_array().iter().zip(want) {
            assert!(close(*a, b), "{a} vs {b}");
        }
    }

    #[test]
    fn zero_width_collapses_corners() {
        let c = derive_corners(&Geometry::new(0.3, 0.5, 0.0, 0.2)).unwrap();
        assert_eq!(c.xl, c.xc);
        assert_eq!(c.xr, c.xc);
    }

    #[test]
    fn non_finite_geometry_rejected() {
        assert!(derive_corners(&Geometry::new(f64::NAN, 0.5, 0.1, 0.1)).is_err());
        assert!(origin_distance(&Geometry::new(0.5, f64::INFINITY, 0.1, 0.1)).is_err());
    }

    #[test]
    fn origin_distances() {
        let at = |xl: f64, yt: f64| Geometry::new(xl + 0.1, yt + 0.1, 0.2, 0.2);
        assert!(close(origin_distance(&at(0.0, 0.0)).unwrap(), 0.0));
        assert!(close(origin_distance(&at(0.3, 0.4)).unwrap(), 0.5));
        assert!(close(origin_distance(&at(1.0, 0.0)).unwrap(), 1.0));
    }

    #[test]
    fn orders_from_sorted_distances() {
        assert_eq!(orders_from_distances(&[0.2, 0.5, 0.1]), vec![1, 2, 0]);
        assert_eq!(orders_from_distances(&[0.3, 0.3, 0.3]), vec![0, 1, 2]);
        assert_eq!(orders_from_distances(&[0.7]), vec![0]);
    }

    #[test]
    fn aspect_constraint_cases() {
        assert_eq!(apply_aspect_constraint(0.5, 0.3, 0.0).unwrap(), 0.3);
        assert!(close(apply_aspect_constraint(0.1, 0.9, 2.0).unwrap(), 0.2));
        assert!(close(apply_aspect_constraint(0.25, 0.9, 1.0).unwrap(), 0.25));
        assert!(apply_aspect_constraint(0.25, 0.9, -1.0).is_err());
    }

    #[test]
    fn intersection_cases() {
        let a = Geometry::new(0.4, 0.4, 0.2, 0.3);
        assert_eq!(intersection_area(&a, &a), a.w * a.h);
        let b = Geometry::new(0.9, 0.9, 0.1, 0.1);
        assert_eq!(intersection_area(&a, &b), 0.0);
        let p = Geometry::from_corners(0.0, 0.0, 0.5, 0.5);
        let q = Geometry::from_corners(0.25, 0.0, 0.75, 0.5);
        assert!(close(intersection_area(&p, &q), 0.125));
    }

    /// Pixel-membership Monte Carlo estimate of the intersection area.
    #[test]
    fn intersection_matches_monte_carlo() {
        use rand::{Rng, SeedableRng};
        let p = Geometry::from_corners(0.0, 0.0, 0.5, 0.5);
        let q = Geometry::from_corners(0.25, 0.0, 0.75, 0.5);
        let inside = |g: &Geometry, x: f64, y: f64| x >= g.xl() && x <= g.xr() && y >= g.yt() && y <= g.yb();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let n = 1_000_000;
        let hits = (0..n)
            .filter(|_| {
                let (x, y) = (rng.random::<f64>(), rng.random::<f64>());
                inside(&p, x, y) && inside(&q, x, y)
            })
            .count();
        let mc = hits as f64 / n as f64;
        assert!((mc - 0.125).abs() < 0.002, "mc estimate {mc}");
        assert!((intersection_area(&p, &q) - mc).abs() < 0.002);
    }

    #[test]
    fn legalize_keeps_ratio_and_fits() {
        let g = legalize_geometry(&Geometry::new(0.9, 0.5, 0.8, 1.6), 1.0 / 64.0);
        assert!((g.h / g.w - 2.0).abs() < 1e-12);
        assert!(g.xl() >= 0.0 && g.xr() <= 1.0 && g.yt() >= 0.0 && g.yb() <= 1.0);
        let tiny = legalize_geometry(&Geometry::new(0.5, 0.5, 0.001, 0.002), 0.01);
        assert!((tiny.h / tiny.w - 2.0).abs() < 1e-12);
        assert!(tiny.w >= 0.01);
    }

    fn geom() -> impl Strategy<Value = Geometry> {
        (0.0..1.0f64, 0.0..1.0f64, 0.0..1.0f64, 0.0..1.0f64).prop_map(|(x, y, w, h)| Geometry::new(x, y, w, h))
    }

    proptest! {
        #[test]
        fn corners_round_trip(g in geom()) {
            let c = derive_corners(&g).unwrap();
            let back = Geometry::from_corners(c.xl, c.yt, c.xr, c.yb);
            prop_assert!((back.xc - g.xc).abs() < 1e-9);
            prop_assert!((back.yc - g.yc).abs() < 1e-9);
            prop_assert!((back.w - g.w).abs() < 1e-9);
            prop_assert!((back.h - g.h).abs() < 1e-9);
        }

        #[test]
        fn intersection_symmetric_and_bounded(a in geom(), b in geom()) {
            let ab = intersection_area(&a, &b);
            prop_assert_eq!(ab, intersection_area(&b, &a));
            prop_assert!(ab >= 0.0);
            prop_assert!(ab <= a.area().min(b.area()) + 1e-15);
            prop_assert!((intersection_area(&a, &a) - a.w * a.h).abs() < 1e-15);
        }

        #[test]
        fn orders_invariant_under_scaling(
            d in prop::collection::vec(0.0..2.0f64, 1..8),
            k in 1e-3..1e3f64,
        ) {
            let scaled: Vec<f64> = d.iter().map(|x| x * k).collect();
            prop_assert_eq!(orders_from_distances(&d), orders_from_distances(&scaled));
        }

        #[test]
        fn aspect_constraint_exact(w in 1e-6..1.0f64, h in 0.0..1.0f64, r in 1e-3..10.0f64) {
            let hf = apply_aspect_constraint(w, h, r).unwrap();
            prop_assert!((hf / w - r).abs() <= 1e-12 * r);
        }
    }
}
