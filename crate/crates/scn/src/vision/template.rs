//! Normalized cross-correlation template matching, adaptive binarization,
//! and the on-disk template bank.

use std::path::{Path, PathBuf};

use super::image::GrayImage;
use super::{Primitive, PrimitiveKind};
use crate::error::{Result, ScnError};

/// Best normalized cross-correlation of `template` over all valid offsets.
///
/// Returns `(score, (offset_x, offset_y))` with the score clamped to
/// `[0, 1]` (negative correlations score 0). A zero-variance template or
/// window scores 0 at that offset. Ties resolve to the smallest `(y, x)`.
pub fn match_template(img: &GrayImage, template: &GrayImage) -> Result<(f64, (usize, usize))> {
    let (iw, ih) = (img.width(), img.height());
    let (tw, th) = (template.width(), template.height());
    if tw > iw || th > ih {
        return Err(ScnError::InvalidArgument {
            op: "match_template",
            detail: format!("template {}x{} larger than image {}x{}", tw, th, iw, ih),
        });
    }
    let tn = (tw * th) as f64;
    let tmean = template.data().iter().sum::<f64>() / tn;
    let tvar: f64 = template
        .data()
        .iter()
        .map(|v| (v - tmean) * (v - tmean))
        .sum();
    if tvar <= 0.0 {
        return Ok((0.0, (0, 0)));
    }

    let mut best = (f64::NEG_INFINITY, (0usize, 0usize));
    for oy in 0..=ih - th {
        for ox in 0..=iw - tw {
            let mut psum = 0.0;
            for ty in 0..th {
                for tx in 0..tw {
                    psum += img.get(ox + tx, oy + ty);
                }
            }
            let pmean = psum / tn;
            let mut cross = 0.0;
            let mut pvar = 0.0;
            for ty in 0..th {
                for tx in 0..tw {
                    let pv = img.get(ox + tx, oy + ty) - pmean;
                    let tv = template.get(tx, ty) - tmean;
                    cross += pv * tv;
                    pvar += pv * pv;
                }
            }
            let ncc = if pvar <= 0.0 {
                0.0
            } else {
                cross / (pvar * tvar).sqrt()
            };
            if ncc > best.0 {
                best = (ncc, (ox, oy));
            }
        }
    }
    Ok((best.0.clamp(0.0, 1.0), best.1))
}

/// Local-mean thresholding: pixel is foreground iff
/// `intensity > mean(window) - offset`, the window clipped at borders.
pub fn binarize_adaptive(img: &GrayImage, window: usize, offset: f64) -> Result<GrayImage> {
    if window < 3 || window % 2 == 0 {
        return Err(ScnError::InvalidArgument {
            op: "binarize_adaptive",
            detail: format!("window must be odd and >= 3, got {}", window),
        });
    }
    let (w, h) = (img.width(), img.height());
    let r = window / 2;
    // integral image with one row/col of zero padding
    let mut integral = vec![0.0f64; (w + 1) * (h + 1)];
    for y in 0..h {
        let mut row = 0.0;
        for x in 0..w {
            row += img.get(x, y);
            integral[(y + 1) * (w + 1) + x + 1] = integral[y * (w + 1) + x + 1] + row;
        }
    }
    let mut out = GrayImage::blank(w, h);
    for y in 0..h {
        let y0 = y.saturating_sub(r);
        let y1 = (y + r).min(h - 1);
        for x in 0..w {
            let x0 = x.saturating_sub(r);
            let x1 = (x + r).min(w - 1);
            let area = ((x1 - x0 + 1) * (y1 - y0 + 1)) as f64;
            let total = integral[(y1 + 1) * (w + 1) + x1 + 1]
                - integral[y0 * (w + 1) + x1 + 1]
                - integral[(y1 + 1) * (w + 1) + x0]
                + integral[y0 * (w + 1) + x0];
            if img.get(x, y) > total / area - offset {
                out.set(x, y, 1.0);
            }
        }
    }
    Ok(out)
}

/// One entry of the template bank manifest.
#[derive(Debug, Clone)]
pub struct TemplateEntry {
    pub name: String,
    /// `shape` entries become closed-contour primitives, `symbol` entries
    /// become symbol primitives.
    pub kind: String,
    pub threshold: f64,
    pub image: GrayImage,
}

/// Directory of grayscale template images plus a `manifest.txt` listing
/// `name kind threshold filename` per line.
#[derive(Debug, Clone, Default)]
pub struct TemplateBank {
    pub entries: Vec<TemplateEntry>,
}

impl TemplateBank {
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = dir.join("manifest.txt");
        let text = std::fs::read_to_string(&manifest).map_err(|e| ScnError::io(&manifest, e))?;
        let mut entries = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            if parts.len() != 4 {
                return Err(ScnError::Config(format!(
                    "{}:{}: expected `name kind threshold filename`",
                    manifest.display(),
                    ln + 1
                )));
            }
            let threshold: f64 = parts[2].parse().map_err(|_| {
                ScnError::Config(format!(
                    "{}:{}: bad threshold {}",
                    manifest.display(),
                    ln + 1,
                    parts[2]
                ))
            })?;
            if parts[1] != "shape" && parts[1] != "symbol" {
                return Err(ScnError::Config(format!(
                    "{}:{}: kind must be `shape` or `symbol`, got {}",
                    manifest.display(),
                    ln + 1,
                    parts[1]
                )));
            }
            let img_path = dir.join(parts[3]);
            let image = load_gray(&img_path)?;
            entries.push(TemplateEntry {
                name: parts[0].to_string(),
                kind: parts[1].to_string(),
                threshold,
                image,
            });
        }
        Ok(TemplateBank { entries })
    }

    /// Runs every template over the image; entries scoring at or above
    /// their threshold yield one primitive each.
    pub fn detect(&self, img: &GrayImage) -> Result<Vec<Primitive>> {
        let mut out = Vec::new();
        for entry in &self.entries {
            if entry.image.width() > img.width() || entry.image.height() > img.height() {
                continue;
            }
            let (score, (ox, oy)) = match_template(img, &entry.image)?;
            if score < entry.threshold {
                continue;
            }
            let (tw, th) = (entry.image.width() as f64, entry.image.height() as f64);
            let cx = ox as f64 + tw / 2.0;
            let cy = oy as f64 + th / 2.0;
            let prim = if entry.kind == "shape" {
                Primitive {
                    kind: PrimitiveKind::ClosedContour,
                    props: [cx, cy, tw, th, 0.0, 0.0, 0.0, 0.0],
                    match_score: score,
                    tag: Some(entry.name.clone()),
                }
            } else {
                Primitive {
                    kind: PrimitiveKind::Symbol,
                    props: [cx, cy, tw, th, 0.0, 0.0, 0.0, 0.0],
                    match_score: score,
                    tag: Some(entry.name.clone()),
                }
            };
            out.push(prim);
        }
        Ok(out)
    }
}

/// Loads any `image`-crate-supported file as grayscale in [0,1].
pub fn load_gray(path: &Path) -> Result<GrayImage> {
    let img = image::open(path).map_err(|e| ScnError::Corrupt {
        path: PathBuf::from(path),
        detail: e.to_string(),
    })?;
    let gray = img.to_luma8();
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    let data = gray.as_raw().iter().map(|&v| v as f64 / 255.0).collect();
    GrayImage::new(w, h, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_template_scores_one_at_origin() {
        let mut img = GrayImage::blank(8, 8);
        img.set(2, 3, 1.0);
        img.set(5, 5, 0.7);
        let (score, offset) = match_template(&img, &img).unwrap();
        assert!((score - 1.0).abs() < 1e-12);
        assert_eq!(offset, (0, 0));
    }

    #[test]
    fn constant_template_scores_zero() {
        let mut img = GrayImage::blank(8, 8);
        img.set(1, 1, 1.0);
        let tpl = GrayImage::new(3, 3, vec![0.5; 9]).unwrap();
        let (score, _) = match_template(&img, &tpl).unwrap();
        assert_eq!(score, 0.0);
    }

    #[test]
    fn shifted_copy_found_at_shift() {
        let mut tpl = GrayImage::blank(5, 5);
        tpl.set(1, 1, 1.0);
        tpl.set(2, 2, 0.8);
        tpl.set(3, 1, 0.6);
        let mut img = GrayImage::blank(12, 12);
        for y in 0..5 {
            for x in 0..5 {
                img.set(x + 4, y + 6, tpl.get(x, y));
            }
        }
        let (score, offset) = match_template(&img, &tpl).unwrap();
        assert!((score - 1.0).abs() < 1e-9);
        assert_eq!(offset, (4, 6));
    }

    #[test]
    fn oversized_template_is_an_error() {
        let img = GrayImage::blank(4, 4);
        let tpl = GrayImage::blank(5, 5);
        assert!(match_template(&img, &tpl).is_err());
    }

    #[test]
    fn constant_image_with_positive_offset_is_all_ones() {
        let img = GrayImage::new(6, 6, vec![0.4; 36]).unwrap();
        let out = binarize_adaptive(&img, 3, 0.1).unwrap();
        assert_eq!(out.count_foreground(0.5), 36);
    }

    #[test]
    fn gradient_matches_direct_oracle() {
        let (w, h) = (16, 12);
        let mut data = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                data.push((x + y) as f64 / ((w + h) as f64));
            }
        }
        let img = GrayImage::new(w, h, data).unwrap();
        let window = 5;
        let offset = 0.02;
        let fast = binarize_adaptive(&img, window, offset).unwrap();
        // direct per-pixel mean, independent of the integral-image path
        let r = window / 2;
        for y in 0..h {
            for x in 0..w {
                let mut total = 0.0;
                let mut n = 0.0;
                for yy in y.saturating_sub(r)..=(y + r).min(h - 1) {
                    for xx in x.saturating_sub(r)..=(x + r).min(w - 1) {
                        total += img.get(xx, yy);
                        n += 1.0;
                    }
                }
                let expect = img.get(x, y) > total / n - offset;
                assert_eq!(fast.get(x, y) >= 0.5, expect, "mismatch at {},{}", x, y);
            }
        }
    }

    #[test]
    fn checkerboard_preserved_at_window_three() {
        let (w, h) = (8, 8);
        let mut data = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                data.push(((x + y) % 2) as f64);
            }
        }
        let img = GrayImage::new(w, h, data).unwrap();
        let out = binarize_adaptive(&img, 3, 0.0).unwrap();
        for y in 0..h {
            for x in 0..w {
                assert_eq!(out.get(x, y) >= 0.5, (x + y) % 2 == 1, "at {},{}", x, y);
            }
        }
    }
}
