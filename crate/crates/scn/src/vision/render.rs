//! Synthetic shape renderer. Produces ground-truth images for the
//! detection tests and for building small labeled corpora.

use super::image::GrayImage;

/// Stamps all pixels within `thickness / 2` of the segment (round caps).
pub fn draw_line(img: &mut GrayImage, x0: f64, y0: f64, x1: f64, y1: f64, thickness: f64) {
    let r = thickness / 2.0;
    let (minx, maxx) = ((x0.min(x1) - r).floor(), (x0.max(x1) + r).ceil());
    let (miny, maxy) = ((y0.min(y1) - r).floor(), (y0.max(y1) + r).ceil());
    let dx = x1 - x0;
    let dy = y1 - y0;
    let len2 = dx * dx + dy * dy;
    for py in miny.max(0.0) as usize..=(maxy.min(img.height() as f64 - 1.0)) as usize {
        for px in minx.max(0.0) as usize..=(maxx.min(img.width() as f64 - 1.0)) as usize {
            let (fx, fy) = (px as f64, py as f64);
            let t = if len2 == 0.0 {
                0.0
            } else {
                (((fx - x0) * dx + (fy - y0) * dy) / len2).clamp(0.0, 1.0)
            };
            let (cx, cy) = (x0 + t * dx, y0 + t * dy);
            if (fx - cx).hypot(fy - cy) <= r {
                img.set(px, py, 1.0);
            }
        }
    }
}

/// Axis-aligned filled rectangle (flat-ended bars).
pub fn fill_rect(img: &mut GrayImage, x0: usize, y0: usize, x1: usize, y1: usize) {
    for y in y0..=y1.min(img.height() - 1) {
        for x in x0..=x1.min(img.width() - 1) {
            img.set(x, y, 1.0);
        }
    }
}

/// Circle outline of the given stroke thickness.
pub fn draw_circle(img: &mut GrayImage, cx: f64, cy: f64, r: f64, thickness: f64) {
    draw_arc(img, cx, cy, r, 0.0, std::f64::consts::TAU, thickness);
}

/// Ellipse outline; `rot_deg` rotates the major axis from horizontal.
pub fn draw_ellipse(
    img: &mut GrayImage,
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    rot_deg: f64,
    thickness: f64,
) {
    let rot = rot_deg.to_radians();
    let (cr, sr) = (rot.cos(), rot.sin());
    let steps = (8.0 * (a.max(b)) * std::f64::consts::TAU).ceil() as usize;
    let mut prev: Option<(f64, f64)> = None;
    for i in 0..=steps {
        let t = i as f64 / steps as f64 * std::f64::consts::TAU;
        let (ex, ey) = (a * t.cos(), b * t.sin());
        let (px, py) = (cx + ex * cr - ey * sr, cy + ex * sr + ey * cr);
        if let Some((qx, qy)) = prev {
            draw_line(img, qx, qy, px, py, thickness);
        }
        prev = Some((px, py));
    }
}

/// Circular arc from `theta0` to `theta1` (radians, y-down image frame).
pub fn draw_arc(
    img: &mut GrayImage,
    cx: f64,
    cy: f64,
    r: f64,
    theta0: f64,
    theta1: f64,
    thickness: f64,
) {
    let span = (theta1 - theta0).abs();
    let steps = ((8.0 * r * span).ceil() as usize).max(2);
    let mut prev: Option<(f64, f64)> = None;
    for i in 0..=steps {
        let t = theta0 + (theta1 - theta0) * i as f64 / steps as f64;
        let (px, py) = (cx + r * t.cos(), cy + r * t.sin());
        if let Some((qx, qy)) = prev {
            draw_line(img, qx, qy, px, py, thickness);
        }
        prev = Some((px, py));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn thin_line_is_connected() {
        let mut img = GrayImage::blank(28, 28);
        draw_line(&mut img, 14.0, 4.0, 14.0, 23.0, 1.0);
        assert!(img.count_foreground(0.5) >= 20);
    }

    #[test]
    fn circle_has_ring_pixels() {
        let mut img = GrayImage::blank(28, 28);
        draw_circle(&mut img, 14.0, 14.0, 8.0, 1.0);
        let n = img.count_foreground(0.5);
        // circumference 2*pi*8 with 8-connected rasterization
        assert!(n > 40 && n < 90, "ring pixel count {}", n);
    }
}
