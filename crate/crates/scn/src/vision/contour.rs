//! Closed-contour extraction from a skeleton.
//!
//! A closed loop in the skeleton encloses background pixels that cannot be
//! reached from the image border. Each such hole identifies one loop; the
//! skeleton pixels bordering the hole are the loop itself. An ellipse is
//! fitted to the loop pixels by second moments, and the loop pixels are
//! erased from the returned residual.

use super::image::GrayImage;
use super::{fold_angle_deg, Primitive, PrimitiveKind};

/// Holes smaller than this many background pixels are treated as stroke
/// curl, not contours (digit loops enclose well over this many pixels).
const MIN_HOLE_AREA: usize = 7;
/// A loop needs at least this many skeleton pixels to fit an ellipse.
const MIN_LOOP_PIXELS: usize = 8;

pub fn detect_closed_contours(skeleton: &GrayImage) -> (Vec<Primitive>, GrayImage) {
    let (w, h) = (skeleton.width(), skeleton.height());
    let fg = skeleton.mask(0.5);
    if w == 0 || h == 0 {
        return (Vec::new(), skeleton.clone());
    }

    // Flood the outside background from the border (4-connectivity).
    let mut outside = vec![false; w * h];
    let mut stack: Vec<usize> = Vec::new();
    for x in 0..w {
        for &y in &[0, h - 1] {
            let i = y * w + x;
            if !fg[i] && !outside[i] {
                outside[i] = true;
                stack.push(i);
            }
        }
    }
    for y in 0..h {
        for &x in &[0, w - 1] {
            let i = y * w + x;
            if !fg[i] && !outside[i] {
                outside[i] = true;
                stack.push(i);
            }
        }
    }
    while let Some(i) = stack.pop() {
        let (x, y) = (i % w, i / w);
        let mut visit = |nx: usize, ny: usize, outside: &mut Vec<bool>, stack: &mut Vec<usize>| {
            let ni = ny * w + nx;
            if !fg[ni] && !outside[ni] {
                outside[ni] = true;
                stack.push(ni);
            }
        };
        if x > 0 {
            visit(x - 1, y, &mut outside, &mut stack);
        }
        if x + 1 < w {
            visit(x + 1, y, &mut outside, &mut stack);
        }
        if y > 0 {
            visit(x, y - 1, &mut outside, &mut stack);
        }
        if y + 1 < h {
            visit(x, y + 1, &mut outside, &mut stack);
        }
    }

    // Group the remaining background into holes (4-connectivity).
    let mut hole_id = vec![usize::MAX; w * h];
    let mut holes: Vec<Vec<usize>> = Vec::new();
    for start in 0..w * h {
        if fg[start] || outside[start] || hole_id[start] != usize::MAX {
            continue;
        }
        let id = holes.len();
        let mut members = Vec::new();
        hole_id[start] = id;
        stack.push(start);
        while let Some(i) = stack.pop() {
            members.push(i);
            let (x, y) = (i % w, i / w);
            let mut visit = |nx: usize, ny: usize, hole_id: &mut Vec<usize>, stack: &mut Vec<usize>| {
                let ni = ny * w + nx;
                if !fg[ni] && !outside[ni] && hole_id[ni] == usize::MAX {
                    hole_id[ni] = id;
                    stack.push(ni);
                }
            };
            if x > 0 {
                visit(x - 1, y, &mut hole_id, &mut stack);
            }
            if x + 1 < w {
                visit(x + 1, y, &mut hole_id, &mut stack);
            }
            if y > 0 {
                visit(x, y - 1, &mut hole_id, &mut stack);
            }
            if y + 1 < h {
                visit(x, y + 1, &mut hole_id, &mut stack);
            }
        }
        holes.push(members);
    }

    // Loop pixels: skeleton pixels 8-adjacent to a hole.
    let mut residual = fg.clone();
    let mut contours = Vec::new();
    for members in holes.iter() {
        if members.len() < MIN_HOLE_AREA {
            continue;
        }
        let mut loop_px: Vec<(usize, usize)> = Vec::new();
        let mut on_loop = vec![false; w * h];
        for &i in members {
            let (x, y) = ((i % w) as isize, (i / w) as isize);
            for dy in -1..=1isize {
                for dx in -1..=1isize {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let (nx, ny) = (x + dx, y + dy);
                    if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                        continue;
                    }
                    let ni = ny as usize * w + nx as usize;
                    if fg[ni] && !on_loop[ni] {
                        on_loop[ni] = true;
                        loop_px.push((nx as usize, ny as usize));
                    }
                }
            }
        }
        if loop_px.len() < MIN_LOOP_PIXELS {
            continue;
        }
        loop_px.sort_by_key(|&(x, y)| (y, x));
        contours.push(fit_ellipse(&loop_px));
        for &(x, y) in &loop_px {
            residual[y * w + x] = false;
        }
    }

    (contours, GrayImage::from_mask(w, h, &residual))
}

/// Second-moment ellipse fit of boundary pixels. For points distributed on
/// an ellipse outline, the principal second moments are `a^2/2` and
/// `b^2/2`, so the axis lengths are `2 * sqrt(2 * lambda)`.
fn fit_ellipse(px: &[(usize, usize)]) -> Primitive {
    let n = px.len() as f64;
    let (mut sx, mut sy) = (0.0, 0.0);
    for &(x, y) in px {
        sx += x as f64;
        sy += y as f64;
    }
    let (cx, cy) = (sx / n, sy / n);
    let (mut m20, mut m02, mut m11) = (0.0, 0.0, 0.0);
    for &(x, y) in px {
        let dx = x as f64 - cx;
        let dy = y as f64 - cy;
        m20 += dx * dx;
        m02 += dy * dy;
        m11 += dx * dy;
    }
    m20 /= n;
    m02 /= n;
    m11 /= n;
    let tr = (m20 + m02) / 2.0;
    let det = (((m20 - m02) / 2.0).powi(2) + m11 * m11).sqrt();
    let l1 = (tr + det).max(0.0);
    let l2 = (tr - det).max(0.0);
    let long_axis = 2.0 * (2.0 * l1).sqrt();
    let short_axis = 2.0 * (2.0 * l2).sqrt();
    let rot = fold_angle_deg((0.5 * (2.0 * m11).atan2(m20 - m02)).to_degrees());
    Primitive {
        kind: PrimitiveKind::ClosedContour,
        props: [cx, cy, long_axis, short_axis, rot, 0.0, 0.0, 0.0],
        match_score: 0.0,
        tag: None,
    }
}

/// Point-in-fitted-ellipse test used by the location relation.
pub fn contour_contains(contour: &Primitive, x: f64, y: f64) -> bool {
    debug_assert_eq!(contour.kind, PrimitiveKind::ClosedContour);
    let (cx, cy) = (contour.props[0], contour.props[1]);
    let a = (contour.props[2] / 2.0).max(1e-9);
    let b = (contour.props[3] / 2.0).max(1e-9);
    let rot = contour.props[4].to_radians();
    let (dx, dy) = (x - cx, y - cy);
    let u = dx * rot.cos() + dy * rot.sin();
    let v = -dx * rot.sin() + dy * rot.cos();
    (u / a).powi(2) + (v / b).powi(2) <= 1.0
}

/// Area of the fitted ellipse, for nested-contour disambiguation.
pub fn contour_area(contour: &Primitive) -> f64 {
    std::f64::consts::PI * (contour.props[2] / 2.0) * (contour.props[3] / 2.0)
}

#[cfg(test)]
mod tests {
    use super::super::render;
    use super::super::thin::thin;
    use super::*;

    #[test]
    fn circle_yields_one_contour_with_blank_residual() {
        let mut img = GrayImage::blank(28, 28);
        render::draw_circle(&mut img, 14.0, 14.0, 8.0, 1.0);
        let skel = thin(&img, 0.5);
        let (contours, residual) = detect_closed_contours(&skel);
        assert_eq!(contours.len(), 1);
        let c = &contours[0];
        assert!((c.props[0] - 14.0).abs() < 1.5, "cx {}", c.props[0]);
        assert!((c.props[1] - 14.0).abs() < 1.5, "cy {}", c.props[1]);
        assert!((c.props[2] - 16.0).abs() < 1.5, "long {}", c.props[2]);
        assert!((c.props[3] - 16.0).abs() < 1.5, "short {}", c.props[3]);
        assert_eq!(residual.count_foreground(0.5), 0);
    }

    #[test]
    fn stroke_has_no_contours() {
        let mut img = GrayImage::blank(28, 28);
        render::draw_line(&mut img, 14.0, 4.0, 14.0, 24.0, 2.0);
        let skel = thin(&img, 0.5);
        let before = skel.count_foreground(0.5);
        let (contours, residual) = detect_closed_contours(&skel);
        assert!(contours.is_empty());
        assert_eq!(residual.count_foreground(0.5), before);
    }

    #[test]
    fn figure_eight_yields_two_contours() {
        let mut img = GrayImage::blank(32, 32);
        render::draw_circle(&mut img, 16.0, 9.0, 6.0, 1.5);
        render::draw_circle(&mut img, 16.0, 21.0, 6.0, 1.5);
        let skel = thin(&img, 0.5);
        let (contours, _) = detect_closed_contours(&skel);
        assert_eq!(contours.len(), 2);
    }

    #[test]
    fn containment_test_matches_geometry() {
        let c = Primitive {
            kind: PrimitiveKind::ClosedContour,
            props: [14.0, 14.0, 16.0, 16.0, 0.0, 0.0, 0.0, 0.0],
            match_score: 0.0,
            tag: None,
        };
        assert!(contour_contains(&c, 14.0, 14.0));
        assert!(contour_contains(&c, 20.0, 14.0));
        assert!(!contour_contains(&c, 24.0, 14.0));
    }
}
