//! The four relation predicates and relation-vector evaluation.

use super::{Anchor, FeatureParams, RelationSchema, RelationVector, SlotRef};
use crate::error::Result;
use crate::vision::contour::{contour_area, contour_contains};
use crate::vision::{Primitive, PrimitiveKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LocationLabel {
    Up,
    Down,
    Left,
    Right,
    Inside,
    Outside,
    Empty,
}

impl LocationLabel {
    pub fn name(self) -> &'static str {
        match self {
            LocationLabel::Up => "up",
            LocationLabel::Down => "down",
            LocationLabel::Left => "left",
            LocationLabel::Right => "right",
            LocationLabel::Inside => "inside",
            LocationLabel::Outside => "outside",
            LocationLabel::Empty => "empty",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "up" => LocationLabel::Up,
            "down" => LocationLabel::Down,
            "left" => LocationLabel::Left,
            "right" => LocationLabel::Right,
            "inside" => LocationLabel::Inside,
            "outside" => LocationLabel::Outside,
            "empty" => LocationLabel::Empty,
            _ => return None,
        })
    }
}

/// Spatial relation of `a` relative to `b`.
///
/// Identical primitives (and the degenerate coincident-centroid case) give
/// `empty`. Containment applies when one side is a closed contour whose
/// fitted ellipse holds the other's centroid; mutually containing contours
/// resolve by area (smaller is inside). Otherwise the dominant axis of the
/// centroid offset decides, vertical winning ties.
pub fn location_relation(a: &Primitive, b: &Primitive) -> LocationLabel {
    if a == b {
        return LocationLabel::Empty;
    }
    let (ax, ay) = a.centroid();
    let (bx, by) = b.centroid();
    let a_in_b = b.kind == PrimitiveKind::ClosedContour && contour_contains(b, ax, ay);
    let b_in_a = a.kind == PrimitiveKind::ClosedContour && contour_contains(a, bx, by);
    match (a_in_b, b_in_a) {
        (true, true) => {
            // nested contours: the smaller one is inside
            if contour_area(a) < contour_area(b) {
                return LocationLabel::Inside;
            } else if contour_area(a) > contour_area(b) {
                return LocationLabel::Outside;
            }
        }
        (true, false) => return LocationLabel::Inside,
        (false, true) => return LocationLabel::Outside,
        (false, false) => {}
    }
    let dx = ax - bx;
    let dy = ay - by;
    if dx == 0.0 && dy == 0.0 {
        return LocationLabel::Empty;
    }
    if dy.abs() >= dx.abs() {
        if dy > 0.0 {
            LocationLabel::Down
        } else {
            LocationLabel::Up
        }
    } else if dx < 0.0 {
        LocationLabel::Left
    } else {
        LocationLabel::Right
    }
}

/// 1 iff the rasterized strokes come within one pixel of each other
/// (Chebyshev distance <= 1), which equals sharing a pixel after one
/// dilation. Symmetric by construction.
pub fn intersect_relation(a: &Primitive, b: &Primitive) -> u8 {
    let ra = rasterize(a);
    let rb = rasterize(b);
    for &(ax, ay) in &ra {
        for &(bx, by) in &rb {
            if (ax - bx).abs() <= 1 && (ay - by).abs() <= 1 {
                return 1;
            }
        }
    }
    0
}

/// 1 iff the anchor points lie within `threshold` (closed comparison).
pub fn distance_relation(a: &Primitive, b: &Primitive, threshold: f64) -> u8 {
    anchored_distance_relation(a, Anchor::Center, b, Anchor::Center, threshold, 0.0)
}

/// Banded variant: 1 iff `min < dist <= threshold`. A zero `min` gives
/// the plain closed comparison.
pub fn anchored_distance_relation(
    a: &Primitive,
    anchor_a: Anchor,
    b: &Primitive,
    anchor_b: Anchor,
    threshold: f64,
    min: f64,
) -> u8 {
    let (ax, ay) = anchor_point(a, anchor_a);
    let (bx, by) = anchor_point(b, anchor_b);
    let d = (ax - bx).hypot(ay - by);
    (d <= threshold && (min == 0.0 || d > min)) as u8
}

fn anchor_point(p: &Primitive, anchor: Anchor) -> (f64, f64) {
    match (p.kind, anchor) {
        (PrimitiveKind::Line, Anchor::Start) => (p.props[0], p.props[1]),
        (PrimitiveKind::Line, Anchor::End) => (p.props[2], p.props[3]),
        (PrimitiveKind::Arc, Anchor::Start) => (p.props[0], p.props[1]),
        (PrimitiveKind::Arc, Anchor::Mid) => (p.props[2], p.props[3]),
        (PrimitiveKind::Arc, Anchor::End) => (p.props[4], p.props[5]),
        (PrimitiveKind::ClosedContour, Anchor::Start | Anchor::End | Anchor::Mid) => {
            let (cx, cy) = (p.props[0], p.props[1]);
            let rot = p.props[4].to_radians();
            match anchor {
                Anchor::Start => {
                    let a = p.props[2] / 2.0;
                    (cx + a * rot.cos(), cy + a * rot.sin())
                }
                Anchor::End => {
                    let a = p.props[2] / 2.0;
                    (cx - a * rot.cos(), cy - a * rot.sin())
                }
                _ => {
                    let b = p.props[3] / 2.0;
                    (cx - b * rot.sin(), cy + b * rot.cos())
                }
            }
        }
        _ => p.centroid(),
    }
}

/// 1 iff the included angle (folded into `[0, 90]`) falls in the bin
/// `[lo, hi)`, upper bound inclusive at 90. Zero when either orientation
/// is undefined (color regions, symbols, degenerate arcs). A primitive
/// paired with itself bins its own orientation against the horizontal
/// axis.
pub fn angle_relation(a: &Primitive, b: &Primitive, lo: f64, hi: f64) -> u8 {
    let ang = if a == b {
        match a.orientation() {
            Some(t) => included_angle_deg(t, 0.0),
            None => return 0,
        }
    } else {
        let (Some(ta), Some(tb)) = (a.orientation(), b.orientation()) else {
            return 0;
        };
        included_angle_deg(ta, tb)
    };
    let hit = if hi >= 90.0 {
        ang >= lo && ang <= 90.0
    } else {
        ang >= lo && ang < hi
    };
    hit as u8
}

/// Included angle between two orientations in degrees, folded into [0, 90].
pub fn included_angle_deg(a_deg: f64, b_deg: f64) -> f64 {
    let d = (a_deg - b_deg).abs() % 180.0;
    d.min(180.0 - d)
}

/// Evaluates every schema feature over the primitive list (expected in
/// `select_typical` order). A bit is 1 iff both slots resolve and the
/// predicate holds; missing primitives give 0.
pub fn compute_relation_vector(
    primitives: &[Primitive],
    schema: &RelationSchema,
) -> Result<RelationVector> {
    let mut bits = Vec::with_capacity(schema.len());
    for feature in &schema.features {
        let a = resolve(primitives, &feature.a);
        let b = resolve(primitives, &feature.b);
        let bit = match (a, b) {
            (Some(a), Some(b)) => match &feature.params {
                FeatureParams::Int => intersect_relation(a, b),
                FeatureParams::Dis {
                    anchor_a,
                    anchor_b,
                    threshold,
                    min,
                } => anchored_distance_relation(a, *anchor_a, b, *anchor_b, *threshold, *min),
                FeatureParams::Ang { lo, hi } => angle_relation(a, b, *lo, *hi),
                FeatureParams::Loc { label } => (location_relation(a, b) == *label) as u8,
            },
            _ => 0,
        };
        bits.push(bit);
    }
    Ok(RelationVector {
        bits,
        schema_hash: schema.hash().to_string(),
    })
}

fn resolve<'a>(primitives: &'a [Primitive], slot: &SlotRef) -> Option<&'a Primitive> {
    match slot {
        SlotRef::Ranked { kind, rank } => {
            primitives.iter().filter(|p| p.kind == *kind).nth(*rank)
        }
        SlotRef::Tagged { kind, tag } => primitives
            .iter()
            .find(|p| p.kind == *kind && p.tag.as_deref() == Some(tag.as_str())),
    }
}

/// Integer-lattice rasterization of a primitive's stroke for the
/// intersect predicate.
fn rasterize(p: &Primitive) -> Vec<(i64, i64)> {
    let mut px: Vec<(i64, i64)> = Vec::new();
    let mut push = |x: f64, y: f64, px: &mut Vec<(i64, i64)>| {
        let q = (x.round() as i64, y.round() as i64);
        if px.last() != Some(&q) {
            px.push(q);
        }
    };
    match p.kind {
        PrimitiveKind::Line => {
            let (x0, y0, x1, y1) = (p.props[0], p.props[1], p.props[2], p.props[3]);
            let steps = ((x1 - x0).hypot(y1 - y0).ceil() as usize * 2).max(1);
            for i in 0..=steps {
                let t = i as f64 / steps as f64;
                push(x0 + t * (x1 - x0), y0 + t * (y1 - y0), &mut px);
            }
        }
        PrimitiveKind::Arc => {
            for (x, y) in arc_points(p) {
                push(x, y, &mut px);
            }
        }
        PrimitiveKind::ClosedContour => {
            let (cx, cy) = (p.props[0], p.props[1]);
            let a = p.props[2] / 2.0;
            let b = p.props[3] / 2.0;
            let rot = p.props[4].to_radians();
            let steps = ((a.max(b) * std::f64::consts::TAU).ceil() as usize * 2).max(8);
            for i in 0..=steps {
                let t = i as f64 / steps as f64 * std::f64::consts::TAU;
                let (ex, ey) = (a * t.cos(), b * t.sin());
                push(
                    cx + ex * rot.cos() - ey * rot.sin(),
                    cy + ex * rot.sin() + ey * rot.cos(),
                    &mut px,
                );
            }
        }
        PrimitiveKind::ColorRegion => {
            let (x0, y0, x1, y1) = (p.props[3], p.props[4], p.props[5], p.props[6]);
            for x in x0 as i64..=x1 as i64 {
                px.push((x, y0 as i64));
                px.push((x, y1 as i64));
            }
            for y in y0 as i64..=y1 as i64 {
                px.push((x0 as i64, y));
                px.push((x1 as i64, y));
            }
        }
        PrimitiveKind::Symbol => {
            let (cx, cy, w, h) = (p.props[0], p.props[1], p.props[2], p.props[3]);
            let (x0, y0) = ((cx - w / 2.0) as i64, (cy - h / 2.0) as i64);
            let (x1, y1) = ((cx + w / 2.0) as i64, (cy + h / 2.0) as i64);
            for x in x0..=x1 {
                px.push((x, y0));
                px.push((x, y1));
            }
            for y in y0..=y1 {
                px.push((x0, y));
                px.push((x1, y));
            }
        }
    }
    px.sort_unstable();
    px.dedup();
    px
}

/// Samples an arc primitive: the circle through its three stored points,
/// swept from start to end through the midpoint; collinear points fall
/// back to the two chords.
fn arc_points(p: &Primitive) -> Vec<(f64, f64)> {
    let (x0, y0) = (p.props[0], p.props[1]);
    let (xm, ym) = (p.props[2], p.props[3]);
    let (x1, y1) = (p.props[4], p.props[5]);
    if let Some((cx, cy, r)) = circumcircle(x0, y0, xm, ym, x1, y1) {
        let a0 = (y0 - cy).atan2(x0 - cx);
        let am = (ym - cy).atan2(xm - cx);
        let a1 = (y1 - cy).atan2(x1 - cx);
        // sweep from a0 to a1 in the direction that passes through am
        let ccw_span = (a1 - a0).rem_euclid(std::f64::consts::TAU);
        let ccw_mid = (am - a0).rem_euclid(std::f64::consts::TAU);
        let (span, sign) = if ccw_mid <= ccw_span {
            (ccw_span, 1.0)
        } else {
            (std::f64::consts::TAU - ccw_span, -1.0)
        };
        let steps = ((r * span).ceil() as usize * 2).max(2);
        (0..=steps)
            .map(|i| {
                let t = a0 + sign * span * i as f64 / steps as f64;
                (cx + r * t.cos(), cy + r * t.sin())
            })
            .collect()
    } else {
        let mut out = Vec::new();
        for (ax, ay, bx, by) in [(x0, y0, xm, ym), (xm, ym, x1, y1)] {
            let steps = ((bx - ax).hypot(by - ay).ceil() as usize * 2).max(1);
            for i in 0..=steps {
                let t = i as f64 / steps as f64;
                out.push((ax + t * (bx - ax), ay + t * (by - ay)));
            }
        }
        out
    }
}

fn circumcircle(
    x0: f64,
    y0: f64,
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
) -> Option<(f64, f64, f64)> {
    let d = 2.0 * (x0 * (y1 - y2) + x1 * (y2 - y0) + x2 * (y0 - y1));
    if d.abs() < 1e-9 {
        return None;
    }
    let s0 = x0 * x0 + y0 * y0;
    let s1 = x1 * x1 + y1 * y1;
    let s2 = x2 * x2 + y2 * y2;
    let cx = (s0 * (y1 - y2) + s1 * (y2 - y0) + s2 * (y0 - y1)) / d;
    let cy = (s0 * (x2 - x1) + s1 * (x0 - x2) + s2 * (x1 - x0)) / d;
    Some((cx, cy, (x0 - cx).hypot(y0 - cy)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vision::fold_angle_deg;

    fn line(x0: f64, y0: f64, x1: f64, y1: f64) -> Primitive {
        Primitive {
            kind: PrimitiveKind::Line,
            props: [
                x0,
                y0,
                x1,
                y1,
                (x1 - x0).hypot(y1 - y0),
                fold_angle_deg((y1 - y0).atan2(x1 - x0).to_degrees()),
                0.0,
                0.0,
            ],
            match_score: 0.0,
            tag: None,
        }
    }

    fn contour(cx: f64, cy: f64, d: f64) -> Primitive {
        Primitive {
            kind: PrimitiveKind::ClosedContour,
            props: [cx, cy, d, d, 0.0, 0.0, 0.0, 0.0],
            match_score: 0.0,
            tag: None,
        }
    }

    #[test]
    fn same_primitive_is_empty() {
        let l = line(0.0, 0.0, 5.0, 0.0);
        assert_eq!(location_relation(&l, &l), LocationLabel::Empty);
    }

    #[test]
    fn below_is_down_and_swaps_to_up() {
        let a = line(5.0, 20.0, 10.0, 20.0);
        let b = line(5.0, 4.0, 10.0, 4.0);
        assert_eq!(location_relation(&a, &b), LocationLabel::Down);
        assert_eq!(location_relation(&b, &a), LocationLabel::Up);
    }

    #[test]
    fn containment_and_antisymmetry() {
        let c = contour(14.0, 14.0, 16.0);
        let l = line(12.0, 14.0, 16.0, 14.0);
        assert_eq!(location_relation(&l, &c), LocationLabel::Inside);
        assert_eq!(location_relation(&c, &l), LocationLabel::Outside);
    }

    #[test]
    fn crossing_lines_intersect() {
        let a = line(0.0, 0.0, 10.0, 10.0);
        let b = line(0.0, 10.0, 10.0, 0.0);
        assert_eq!(intersect_relation(&a, &b), 1);
    }

    #[test]
    fn parallel_lines_ten_apart_do_not() {
        let a = line(0.0, 0.0, 20.0, 0.0);
        let b = line(0.0, 10.0, 20.0, 10.0);
        assert_eq!(intersect_relation(&a, &b), 0);
    }

    #[test]
    fn intersect_matches_float_distance_oracle() {
        // independent oracle: minimum distance between two segments,
        // sampled densely in floating point
        let cases = [
            ((0.0, 0.0, 10.0, 10.0), (0.0, 10.0, 10.0, 0.0)),
            ((0.0, 0.0, 10.0, 0.0), (0.0, 3.0, 10.0, 3.0)),
            ((0.0, 0.0, 10.0, 0.0), (11.0, 0.0, 20.0, 0.0)),
            ((2.0, 2.0, 8.0, 9.0), (8.5, 9.5, 14.0, 16.0)),
        ];
        for ((ax0, ay0, ax1, ay1), (bx0, by0, bx1, by1)) in cases {
            let a = line(ax0, ay0, ax1, ay1);
            let b = line(bx0, by0, bx1, by1);
            let mut min_d = f64::INFINITY;
            for i in 0..=200 {
                let t = i as f64 / 200.0;
                let (px, py) = (ax0 + t * (ax1 - ax0), ay0 + t * (ay1 - ay0));
                for j in 0..=200 {
                    let u = j as f64 / 200.0;
                    let (qx, qy) = (bx0 + u * (bx1 - bx0), by0 + u * (by1 - by0));
                    min_d = min_d.min((px - qx).hypot(py - qy));
                }
            }
            // Chebyshev-1 pixel adjacency corresponds to about 1.5 px of
            // true distance after rounding; stay away from the boundary.
            if min_d < 0.8 {
                assert_eq!(intersect_relation(&a, &b), 1, "expected hit at {}", min_d);
            }
            if min_d > 2.5 {
                assert_eq!(intersect_relation(&a, &b), 0, "expected miss at {}", min_d);
            }
        }
    }

    #[test]
    fn distance_boundary_is_closed() {
        let a = line(0.0, 0.0, 2.0, 0.0); // centroid (1, 0)
        let b = line(6.0, 0.0, 8.0, 0.0); // centroid (7, 0); distance 6
        assert_eq!(distance_relation(&a, &b, 6.0), 1);
        assert_eq!(distance_relation(&a, &b, 5.999), 0);
        assert_eq!(distance_relation(&a, &a, 0.001), 1);
    }

    #[test]
    fn perpendicular_bin_and_folding() {
        let a = line(0.0, 0.0, 10.0, 0.0); // 0 deg
        let b = line(5.0, -5.0, 5.0, 5.0); // 90 deg
        assert_eq!(angle_relation(&a, &b, 80.0, 90.0), 1);
        let c = line(0.0, 0.0, 10.0, 0.1); // ~0.6 deg
        assert_eq!(angle_relation(&a, &c, 80.0, 90.0), 0);
        assert!((included_angle_deg(10.0, 170.0) - 20.0).abs() < 1e-12);
    }

    #[test]
    fn empty_primitive_list_gives_zero_vector() {
        let schema = RelationSchema::default_mnist();
        let v = compute_relation_vector(&[], &schema).unwrap();
        assert_eq!(v.len(), 127);
        assert_eq!(v.count_ones(), 0);
    }

    #[test]
    fn single_contour_bits_match_per_feature_oracle() {
        // a lone closed contour fills only the c1 slot: per-feature oracle
        // says exactly the c1 presence bit fires, everything else needs a
        // second primitive
        let schema = RelationSchema::default_mnist();
        let prims = vec![contour(14.0, 14.0, 16.0)];
        let v = compute_relation_vector(&prims, &schema).unwrap();
        assert_eq!(v.len(), 127);
        for (feature, bit) in schema.features.iter().zip(&v.bits) {
            let c1 = super::super::SlotRef::Ranked {
                kind: PrimitiveKind::ClosedContour,
                rank: 0,
            };
            let expected = if feature.a == c1 && feature.b == c1 {
                match &feature.params {
                    FeatureParams::Loc { label } => (*label == LocationLabel::Empty) as u8,
                    FeatureParams::Dis {
                        anchor_a,
                        anchor_b,
                        threshold,
                        min,
                    } => {
                        // circle with both axes 16: major endpoints are 16
                        // apart, center to minor endpoint is 8
                        let d = match (anchor_a, anchor_b) {
                            (Anchor::Start, Anchor::End) => 16.0,
                            (Anchor::Center, Anchor::Mid) => 8.0,
                            _ => panic!("unexpected anchors in default schema"),
                        };
                        (d <= *threshold && d > *min) as u8
                    }
                    _ => 0,
                }
            } else {
                0
            };
            assert_eq!(*bit, expected, "feature {:?}", feature);
        }
        // presence bit plus one band from each of the two c1 size groups
        assert_eq!(v.count_ones(), 3);
    }

    #[test]
    fn antisymmetry_of_location_swaps() {
        let pairs = [
            (line(0.0, 0.0, 4.0, 0.0), line(10.0, 1.0, 14.0, 1.0)),
            (line(0.0, 0.0, 4.0, 0.0), line(1.0, 10.0, 5.0, 10.0)),
            (contour(5.0, 5.0, 8.0), line(20.0, 5.0, 24.0, 5.0)),
        ];
        for (a, b) in pairs {
            let fwd = location_relation(&a, &b);
            let rev = location_relation(&b, &a);
            let expect = match fwd {
                LocationLabel::Up => LocationLabel::Down,
                LocationLabel::Down => LocationLabel::Up,
                LocationLabel::Left => LocationLabel::Right,
                LocationLabel::Right => LocationLabel::Left,
                LocationLabel::Inside => LocationLabel::Outside,
                LocationLabel::Outside => LocationLabel::Inside,
                LocationLabel::Empty => LocationLabel::Empty,
            };
            assert_eq!(rev, expect);
        }
    }
}
