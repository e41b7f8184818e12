//! Two-subiteration morphological thinning (Zhang–Suen).

use super::image::GrayImage;

/// Skeletonizes a grayscale image: binarize at `binarize_threshold`, then
/// peel boundary pixels with the classic two-subiteration rules until a
/// fixed point. The fixed point makes the operation idempotent and
/// connectivity-preserving; strokes come out one pixel wide.
pub fn thin(img: &GrayImage, binarize_threshold: f64) -> GrayImage {
    let (w, h) = (img.width(), img.height());
    let mut fg = img.mask(binarize_threshold);
    if w < 3 || h < 3 {
        return GrayImage::from_mask(w, h, &fg);
    }

    let at = |fg: &[bool], x: isize, y: isize| -> bool {
        if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
            false
        } else {
            fg[y as usize * w + x as usize]
        }
    };

    let mut to_delete: Vec<usize> = Vec::new();
    loop {
        let mut changed = false;
        for pass in 0..2 {
            to_delete.clear();
            for y in 0..h as isize {
                for x in 0..w as isize {
                    if !fg[y as usize * w + x as usize] {
                        continue;
                    }
                    // Neighbors clockwise from north: P2..P9.
                    let p = [
                        at(&fg, x, y - 1),
                        at(&fg, x + 1, y - 1),
                        at(&fg, x + 1, y),
                        at(&fg, x + 1, y + 1),
                        at(&fg, x, y + 1),
                        at(&fg, x - 1, y + 1),
                        at(&fg, x - 1, y),
                        at(&fg, x - 1, y - 1),
                    ];
                    let b: usize = p.iter().filter(|&&v| v).count();
                    if !(2..=6).contains(&b) {
                        continue;
                    }
                    let a = (0..8).filter(|&i| !p[i] && p[(i + 1) % 8]).count();
                    if a != 1 {
                        continue;
                    }
                    // P2=N, P4=E, P6=S, P8=W
                    let (n, e, s, wd) = (p[0], p[2], p[4], p[6]);
                    let ok = if pass == 0 {
                        !(n && e && s) && !(e && s && wd)
                    } else {
                        !(n && e && wd) && !(n && s && wd)
                    };
                    if ok {
                        to_delete.push(y as usize * w + x as usize);
                    }
                }
            }
            if !to_delete.is_empty() {
                changed = true;
                for &i in &to_delete {
                    fg[i] = false;
                }
            }
        }
        if !changed {
            break;
        }
    }
    GrayImage::from_mask(w, h, &fg)
}

/// Number of 8-connected foreground components.
pub fn count_components(img: &GrayImage, threshold: f64) -> usize {
    let (w, h) = (img.width(), img.height());
    let fg = img.mask(threshold);
    let mut seen = vec![false; fg.len()];
    let mut count = 0;
    let mut stack = Vec::new();
    for start in 0..fg.len() {
        if !fg[start] || seen[start] {
            continue;
        }
        count += 1;
        seen[start] = true;
        stack.push(start);
        while let Some(i) = stack.pop() {
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
                    if fg[ni] && !seen[ni] {
                        seen[ni] = true;
                        stack.push(ni);
                    }
                }
            }
        }
    }
    count
}

#[cfg(test)]
mod tests {
    use super::super::render;
    use super::*;

    #[test]
    fn blank_stays_blank() {
        let img = GrayImage::blank(28, 28);
        let out = thin(&img, 0.5);
        assert_eq!(out.count_foreground(0.5), 0);
    }

    #[test]
    fn thick_bar_thins_to_single_pixel_column() {
        // 5 px wide, 20 px tall flat-ended bar
        let mut img = GrayImage::blank(28, 28);
        render::fill_rect(&mut img, 10, 4, 14, 23);
        let skel = thin(&img, 0.5);
        // every remaining row holds exactly one pixel, on the center column
        let mut rows = 0;
        for y in 0..28 {
            let count = (0..28).filter(|&x| skel.get(x, y) >= 0.5).count();
            assert!(count <= 1, "row {} has width {}", y, count);
            if count == 1 {
                rows += 1;
                assert!(skel.get(12, y) >= 0.5, "skeleton off center at row {}", y);
            }
        }
        // medial axis of a flat-ended bar: height - 2*floor(width/2)
        assert!((rows as i32 - 16).abs() <= 1, "skeleton height {}", rows);
    }

    #[test]
    fn thinning_is_idempotent() {
        let mut img = GrayImage::blank(28, 28);
        render::draw_circle(&mut img, 14.0, 14.0, 8.0, 3.0);
        render::draw_line(&mut img, 4.0, 4.0, 22.0, 20.0, 2.0);
        let once = thin(&img, 0.5);
        let twice = thin(&once, 0.5);
        assert_eq!(once, twice);
    }

    #[test]
    fn connectivity_preserved() {
        let mut img = GrayImage::blank(40, 40);
        render::draw_circle(&mut img, 12.0, 12.0, 7.0, 3.0);
        render::draw_line(&mut img, 25.0, 30.0, 38.0, 32.0, 3.0);
        assert_eq!(count_components(&img, 0.5), 2);
        let skel = thin(&img, 0.5);
        assert_eq!(count_components(&skel, 0.5), 2);
    }
}
