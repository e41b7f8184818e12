//! Stroke tracing on a skeleton and line/arc classification.
//!
//! The skeleton is read as a pixel graph: orthogonal neighbors are always
//! connected, diagonal neighbors only when no orthogonal stepping stone
//! exists (removes the redundant triangles Zhang–Suen leaves behind).
//! Strokes are walked between endpoints/junctions, anti-collinear strokes
//! meeting at a junction are merged, and each stroke is classified as a
//! line when its maximum deviation from the chord stays under
//! [`LINE_MAX_DEVIATION`], otherwise as an arc.

use super::image::GrayImage;
use super::{fold_angle_deg, Primitive, PrimitiveKind};

/// Strokes deviating less than this (pixels) from their chord are lines.
pub const LINE_MAX_DEVIATION: f64 = 1.5;
/// Cosine bound for merging two stroke ends at a junction (about 35 deg
/// away from perfectly anti-parallel).
const MERGE_COS_BOUND: f64 = -0.82;
/// Points sampled from a stroke end when estimating its direction.
const DIR_SAMPLE: usize = 4;

type Point = (usize, usize);

pub fn detect_lines(skeleton: &GrayImage, min_length: f64) -> Vec<Primitive> {
    strokes_of(skeleton)
        .into_iter()
        .filter_map(|s| classify(&s))
        .filter(|p| p.kind == PrimitiveKind::Line && p.props[4] >= min_length)
        .collect()
}

pub fn detect_arcs(skeleton: &GrayImage, min_span: f64) -> Vec<Primitive> {
    strokes_of(skeleton)
        .into_iter()
        .filter_map(|s| {
            let span = polyline_length(&s);
            classify(&s).map(|p| (p, span))
        })
        .filter(|(p, span)| p.kind == PrimitiveKind::Arc && *span >= min_span)
        .map(|(p, _)| p)
        .collect()
}

/// Traces all strokes (merged across junctions) as pixel polylines.
pub fn strokes_of(skeleton: &GrayImage) -> Vec<Vec<Point>> {
    let (w, h) = (skeleton.width(), skeleton.height());
    let fg = skeleton.mask(0.5);
    if w == 0 || h == 0 {
        return Vec::new();
    }

    let idx = |x: usize, y: usize| y * w + x;
    let neighbors = |x: usize, y: usize| -> Vec<Point> {
        let mut out = Vec::with_capacity(8);
        let (xi, yi) = (x as isize, y as isize);
        // fixed order: N, NE, E, SE, S, SW, W, NW
        const DIRS: [(isize, isize); 8] = [
            (0, -1),
            (1, -1),
            (1, 0),
            (1, 1),
            (0, 1),
            (-1, 1),
            (-1, 0),
            (-1, -1),
        ];
        for &(dx, dy) in &DIRS {
            let (nx, ny) = (xi + dx, yi + dy);
            if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                continue;
            }
            let (nxu, nyu) = (nx as usize, ny as usize);
            if !fg[idx(nxu, nyu)] {
                continue;
            }
            if dx != 0 && dy != 0 {
                // diagonal edge is redundant when an orthogonal path exists
                let side_a = fg[idx(nxu, y)];
                let side_b = fg[idx(x, nyu)];
                if side_a || side_b {
                    continue;
                }
            }
            out.push((nxu, nyu));
        }
        out
    };

    let mut degree = vec![0u8; w * h];
    for y in 0..h {
        for x in 0..w {
            if fg[idx(x, y)] {
                degree[idx(x, y)] = neighbors(x, y).len() as u8;
            }
        }
    }

    // Walk chains between nodes (degree != 2), marking used directed edges.
    let mut used: std::collections::HashSet<(usize, usize)> = Default::default();
    let mut strokes: Vec<Vec<Point>> = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let i = idx(x, y);
            if !fg[i] || degree[i] == 2 {
                continue;
            }
            for (nx, ny) in neighbors(x, y) {
                let ni = idx(nx, ny);
                if used.contains(&(i, ni)) {
                    continue;
                }
                let mut poly = vec![(x, y), (nx, ny)];
                used.insert((i, ni));
                used.insert((ni, i));
                let (mut px, mut py) = (x, y);
                let (mut cx, mut cy) = (nx, ny);
                while degree[idx(cx, cy)] == 2 {
                    let nbrs = neighbors(cx, cy);
                    let next = nbrs.into_iter().find(|&(qx, qy)| (qx, qy) != (px, py));
                    match next {
                        Some((qx, qy)) => {
                            used.insert((idx(cx, cy), idx(qx, qy)));
                            used.insert((idx(qx, qy), idx(cx, cy)));
                            poly.push((qx, qy));
                            px = cx;
                            py = cy;
                            cx = qx;
                            cy = qy;
                        }
                        None => break,
                    }
                }
                strokes.push(poly);
            }
        }
    }

    // Pure cycles: chains never touched by a node walk.
    let mut in_stroke = vec![false; w * h];
    for s in &strokes {
        for &(x, y) in s {
            in_stroke[idx(x, y)] = true;
        }
    }
    for y in 0..h {
        for x in 0..w {
            let i = idx(x, y);
            if !fg[i] || degree[i] != 2 || in_stroke[i] {
                continue;
            }
            let mut poly = vec![(x, y)];
            in_stroke[i] = true;
            let (mut px, mut py) = (x, y);
            let (mut cx, mut cy) = neighbors(x, y)[0];
            while (cx, cy) != (x, y) {
                poly.push((cx, cy));
                in_stroke[idx(cx, cy)] = true;
                let nbrs = neighbors(cx, cy);
                let next = nbrs.into_iter().find(|&(qx, qy)| (qx, qy) != (px, py));
                match next {
                    Some(q) => {
                        px = cx;
                        py = cy;
                        cx = q.0;
                        cy = q.1;
                    }
                    None => break,
                }
            }
            poly.push((x, y));
            strokes.push(poly);
        }
    }

    let merged = merge_at_junctions(strokes, &degree, w);
    let mut out = Vec::new();
    for poly in merged {
        split_cornered(poly, &mut out);
    }
    out
}

/// Maximum radial deviation from the circle through start / arc-length
/// midpoint / end for a stroke to count as one smooth arc.
const ARC_FIT_TOLERANCE: f64 = 1.6;

/// Recursively splits a stroke at its sharpest corner until every piece
/// is either straight or a smooth circular arc. Closed polylines are kept
/// whole.
fn split_cornered(poly: Vec<Point>, out: &mut Vec<Vec<Point>>) {
    if poly.len() < 8 || poly.first() == poly.last() {
        out.push(poly);
        return;
    }
    if max_chord_deviation(&poly) < LINE_MAX_DEVIATION || arc_fit_ok(&poly) {
        out.push(poly);
        return;
    }
    let split = farthest_from_chord(&poly);
    if split < 3 || split + 3 >= poly.len() {
        out.push(poly);
        return;
    }
    let head = poly[..=split].to_vec();
    let tail = poly[split..].to_vec();
    split_cornered(head, out);
    split_cornered(tail, out);
}

fn farthest_from_chord(poly: &[Point]) -> usize {
    let (x0, y0) = (poly[0].0 as f64, poly[0].1 as f64);
    let pn = poly[poly.len() - 1];
    let (x1, y1) = (pn.0 as f64, pn.1 as f64);
    let dx = x1 - x0;
    let dy = y1 - y0;
    let len = dx.hypot(dy).max(1e-9);
    let mut best = (0.0f64, poly.len() / 2);
    for (i, &(px, py)) in poly.iter().enumerate() {
        let d = ((px as f64 - x0) * dy - (py as f64 - y0) * dx).abs() / len;
        if d > best.0 {
            best = (d, i);
        }
    }
    best.1
}

/// True when every point lies within [`ARC_FIT_TOLERANCE`] of the circle
/// through the stroke's start, arc-length midpoint and end.
fn arc_fit_ok(poly: &[Point]) -> bool {
    let mid = arclength_midpoint(poly);
    let (x0, y0) = (poly[0].0 as f64, poly[0].1 as f64);
    let (xm, ym) = (mid.0 as f64, mid.1 as f64);
    let pn = poly[poly.len() - 1];
    let (x1, y1) = (pn.0 as f64, pn.1 as f64);
    let d = 2.0 * (x0 * (ym - y1) + xm * (y1 - y0) + x1 * (y0 - ym));
    if d.abs() < 1e-9 {
        return false;
    }
    let s0 = x0 * x0 + y0 * y0;
    let sm = xm * xm + ym * ym;
    let s1 = x1 * x1 + y1 * y1;
    let cx = (s0 * (ym - y1) + sm * (y1 - y0) + s1 * (y0 - ym)) / d;
    let cy = (s0 * (x1 - xm) + sm * (x0 - x1) + s1 * (xm - x0)) / d;
    let r = (x0 - cx).hypot(y0 - cy);
    poly.iter().all(|&(px, py)| {
        ((px as f64 - cx).hypot(py as f64 - cy) - r).abs() <= ARC_FIT_TOLERANCE
    })
}

fn arclength_midpoint(poly: &[Point]) -> Point {
    let total = polyline_length(poly);
    let mut acc = 0.0;
    for pair in poly.windows(2) {
        let seg = (pair[1].0 as f64 - pair[0].0 as f64)
            .hypot(pair[1].1 as f64 - pair[0].1 as f64);
        if acc + seg >= total / 2.0 {
            return pair[1];
        }
        acc += seg;
    }
    poly[poly.len() / 2]
}

/// Merges pairs of strokes that continue straight through a junction.
fn merge_at_junctions(strokes: Vec<Vec<Point>>, degree: &[u8], w: usize) -> Vec<Vec<Point>> {
    let mut strokes: Vec<Option<Vec<Point>>> = strokes.into_iter().map(Some).collect();

    // junction clusters: 8-connected groups of degree>=3 pixels
    let mut cluster_of: std::collections::HashMap<usize, usize> = Default::default();
    let mut n_clusters = 0;
    let junction_pixels: Vec<usize> = (0..degree.len()).filter(|&i| degree[i] >= 3).collect();
    for &start in &junction_pixels {
        if cluster_of.contains_key(&start) {
            continue;
        }
        let id = n_clusters;
        n_clusters += 1;
        let mut stack = vec![start];
        cluster_of.insert(start, id);
        while let Some(i) = stack.pop() {
            let (x, y) = ((i % w) as isize, (i / w) as isize);
            for dy in -1..=1isize {
                for dx in -1..=1isize {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let (nx, ny) = (x + dx, y + dy);
                    if nx < 0 || ny < 0 || nx >= w as isize {
                        continue;
                    }
                    let ni = ny as usize * w + nx as usize;
                    if ni < degree.len() && degree[ni] >= 3 && !cluster_of.contains_key(&ni) {
                        cluster_of.insert(ni, id);
                        stack.push(ni);
                    }
                }
            }
        }
    }
    if n_clusters == 0 {
        return strokes.into_iter().flatten().collect();
    }

    for cluster in 0..n_clusters {
        loop {
            // live stroke ends terminating in this cluster
            let mut ends: Vec<(usize, bool, (f64, f64))> = Vec::new(); // (stroke, at_front, dir into junction)
            for (si, s) in strokes.iter().enumerate() {
                let Some(poly) = s else { continue };
                if poly.len() < 2 || poly.first() == poly.last() {
                    continue;
                }
                for &front in &[true, false] {
                    let p = if front { poly[0] } else { *poly.last().unwrap() };
                    let pi = p.1 * w + p.0;
                    if cluster_of.get(&pi) == Some(&cluster) {
                        ends.push((si, front, end_direction(poly, front)));
                    }
                }
            }
            // best anti-parallel pair
            let mut best: Option<(f64, usize, usize)> = None;
            for a in 0..ends.len() {
                for b in a + 1..ends.len() {
                    if ends[a].0 == ends[b].0 {
                        continue;
                    }
                    let cosv = ends[a].2 .0 * ends[b].2 .0 + ends[a].2 .1 * ends[b].2 .1;
                    if cosv <= MERGE_COS_BOUND
                        && best.map(|(c, _, _)| cosv < c).unwrap_or(true)
                    {
                        best = Some((cosv, a, b));
                    }
                }
            }
            let Some((_, a, b)) = best else { break };
            let (sa, fa, _) = ends[a];
            let (sb, fb, _) = ends[b];
            let mut pa = strokes[sa].take().unwrap();
            let mut pb = strokes[sb].take().unwrap();
            // orient pa to end at the junction and pb to start at it
            if fa {
                pa.reverse();
            }
            if !fb {
                pb.reverse();
            }
            if pa.last() == pb.first() {
                pb.remove(0);
            }
            pa.extend(pb);
            strokes[sa] = Some(pa);
        }
    }
    strokes.into_iter().flatten().collect()
}

/// Unit direction pointing from inside the stroke toward the given end.
fn end_direction(poly: &[Point], front: bool) -> (f64, f64) {
    let k = DIR_SAMPLE.min(poly.len() - 1);
    let (tip, inner) = if front {
        (poly[0], poly[k])
    } else {
        (poly[poly.len() - 1], poly[poly.len() - 1 - k])
    };
    let dx = tip.0 as f64 - inner.0 as f64;
    let dy = tip.1 as f64 - inner.1 as f64;
    let n = dx.hypot(dy);
    if n == 0.0 {
        (0.0, 0.0)
    } else {
        (dx / n, dy / n)
    }
}

fn polyline_length(poly: &[Point]) -> f64 {
    poly.windows(2)
        .map(|p| {
            (p[1].0 as f64 - p[0].0 as f64).hypot(p[1].1 as f64 - p[0].1 as f64)
        })
        .sum()
}

/// Maximum perpendicular distance of polyline points from the chord.
fn max_chord_deviation(poly: &[Point]) -> f64 {
    let (x0, y0) = (poly[0].0 as f64, poly[0].1 as f64);
    let pn = poly[poly.len() - 1];
    let (x1, y1) = (pn.0 as f64, pn.1 as f64);
    let dx = x1 - x0;
    let dy = y1 - y0;
    let len = dx.hypot(dy);
    let mut worst = 0.0f64;
    for &(px, py) in poly {
        let (fx, fy) = (px as f64, py as f64);
        let d = if len == 0.0 {
            (fx - x0).hypot(fy - y0)
        } else {
            ((fx - x0) * dy - (fy - y0) * dx).abs() / len
        };
        worst = worst.max(d);
    }
    worst
}

/// Classifies a traced polyline as a line or arc primitive.
fn classify(poly: &[Point]) -> Option<Primitive> {
    if poly.len() < 2 {
        return None;
    }
    let closed = poly.first() == poly.last();
    let (x0, y0) = (poly[0].0 as f64, poly[0].1 as f64);
    let pn = poly[poly.len() - 1];
    let (x1, y1) = (pn.0 as f64, pn.1 as f64);
    if !closed && max_chord_deviation(poly) < LINE_MAX_DEVIATION {
        let length = (x1 - x0).hypot(y1 - y0);
        let angle = fold_angle_deg((y1 - y0).atan2(x1 - x0).to_degrees());
        return Some(Primitive {
            kind: PrimitiveKind::Line,
            props: [x0, y0, x1, y1, length, angle, 0.0, 0.0],
            match_score: 0.0,
            tag: None,
        });
    }
    // arc: start / arc-length midpoint / end
    let total = polyline_length(poly);
    let mut acc = 0.0;
    let mut mid = poly[poly.len() / 2];
    for pair in poly.windows(2) {
        let seg = (pair[1].0 as f64 - pair[0].0 as f64)
            .hypot(pair[1].1 as f64 - pair[0].1 as f64);
        if acc + seg >= total / 2.0 {
            mid = pair[1];
            break;
        }
        acc += seg;
    }
    Some(Primitive {
        kind: PrimitiveKind::Arc,
        props: [
            x0,
            y0,
            mid.0 as f64,
            mid.1 as f64,
            x1,
            y1,
            0.0,
            0.0,
        ],
        match_score: 0.0,
        tag: None,
    })
}

#[cfg(test)]
mod tests {
    use super::super::render;
    use super::*;

    #[test]
    fn blank_has_no_lines_or_arcs() {
        let img = GrayImage::blank(28, 28);
        assert!(detect_lines(&img, 3.0).is_empty());
        assert!(detect_arcs(&img, 3.0).is_empty());
    }

    #[test]
    fn vertical_stroke_is_one_line() {
        let mut img = GrayImage::blank(28, 28);
        render::draw_line(&mut img, 14.0, 4.0, 14.0, 23.0, 1.0);
        let lines = detect_lines(&img, 3.0);
        assert_eq!(lines.len(), 1);
        let l = &lines[0];
        assert!((l.props[5] - 90.0).abs() < 5.0, "angle {}", l.props[5]);
        assert!((l.props[4] - 19.0).abs() <= 2.0, "length {}", l.props[4]);
    }

    #[test]
    fn crossing_strokes_merge_into_two_lines() {
        let mut img = GrayImage::blank(29, 29);
        render::draw_line(&mut img, 4.0, 4.0, 24.0, 24.0, 1.0);
        render::draw_line(&mut img, 24.0, 4.0, 4.0, 24.0, 1.0);
        let lines = detect_lines(&img, 5.0);
        assert_eq!(lines.len(), 2, "got {:?}", lines);
        let mut angles: Vec<f64> = lines.iter().map(|l| l.props[5]).collect();
        angles.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!((angles[0] - 45.0).abs() < 6.0, "angles {:?}", angles);
        assert!((angles[1] - 135.0).abs() < 6.0, "angles {:?}", angles);
    }

    #[test]
    fn half_circle_is_an_arc_with_mid_off_chord() {
        let mut img = GrayImage::blank(32, 32);
        render::draw_arc(&mut img, 16.0, 16.0, 10.0, std::f64::consts::PI, 2.0 * std::f64::consts::PI, 1.0);
        let arcs = detect_arcs(&img, 5.0);
        assert_eq!(arcs.len(), 1, "got {:?}", arcs);
        let a = &arcs[0];
        // chord runs between the two ends; mid should sit ~radius off it
        let (xs, ys, xm, ym, xe, ye) = (
            a.props[0], a.props[1], a.props[2], a.props[3], a.props[4], a.props[5],
        );
        let dx = xe - xs;
        let dy = ye - ys;
        let len = dx.hypot(dy);
        let dist = ((xm - xs) * dy - (ym - ys) * dx).abs() / len;
        assert!((dist - 10.0).abs() <= 2.0, "mid off chord by {}", dist);
    }

    #[test]
    fn straight_stroke_is_not_an_arc() {
        let mut img = GrayImage::blank(28, 28);
        render::draw_line(&mut img, 4.0, 14.0, 24.0, 14.0, 1.0);
        assert!(detect_arcs(&img, 3.0).is_empty());
        assert_eq!(detect_lines(&img, 3.0).len(), 1);
    }
}
