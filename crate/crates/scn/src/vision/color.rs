//! Color preprocessing and segmentation for traffic-sign images.

use std::path::Path;

use super::image::{rgb_to_hsv, ColorImage};
use super::{Primitive, PrimitiveKind};
use crate::error::{Result, ScnError};

/// Histogram equalization over luminance, 256 bins.
///
/// Each pixel's luminance `Y` maps to `CDF(Y)` and the three channels are
/// rescaled by `CDF(Y)/Y` (clamped to `[0,1]`). Convention notes:
/// an image occupying a single luminance bin is returned unchanged, and
/// zero-luminance pixels map to the gray level `CDF(0)`.
pub fn equalize_histogram(img: &ColorImage) -> ColorImage {
    let (w, h) = (img.width(), img.height());
    let total = (w * h) as f64;
    let mut hist = [0u64; 256];
    for y in 0..h {
        for x in 0..w {
            hist[bin(img.luminance(x, y))] += 1;
        }
    }
    if hist.iter().filter(|&&c| c > 0).count() <= 1 {
        return img.clone();
    }
    let mut cdf = [0.0f64; 256];
    let mut acc = 0u64;
    for (i, &c) in hist.iter().enumerate() {
        acc += c;
        cdf[i] = acc as f64 / total;
    }
    let mut out = img.clone();
    for y in 0..h {
        for x in 0..w {
            let yv = img.luminance(x, y);
            let target = cdf[bin(yv)];
            let [r, g, b] = img.get(x, y);
            if yv <= 0.0 {
                out.set(x, y, [target, target, target]);
            } else {
                let k = target / yv;
                out.set(
                    x,
                    y,
                    [
                        (r * k).clamp(0.0, 1.0),
                        (g * k).clamp(0.0, 1.0),
                        (b * k).clamp(0.0, 1.0),
                    ],
                );
            }
        }
    }
    out
}

fn bin(v: f64) -> usize {
    ((v * 255.0).round() as usize).min(255)
}

/// One HSV segmentation rule. Hue bounds wrap: `lo > hi` means the range
/// passes through 0 degrees.
#[derive(Debug, Clone)]
pub struct ColorRule {
    pub name: String,
    pub hue_lo: f64,
    pub hue_hi: f64,
    pub sat_min: f64,
    pub sat_max: f64,
    pub val_min: f64,
    pub val_max: f64,
    pub min_area_fraction: f64,
}

impl ColorRule {
    fn matches(&self, h: f64, s: f64, v: f64) -> bool {
        let hue_ok = if self.hue_lo <= self.hue_hi {
            (self.hue_lo..=self.hue_hi).contains(&h)
        } else {
            h >= self.hue_lo || h <= self.hue_hi
        };
        hue_ok
            && (self.sat_min..=self.sat_max).contains(&s)
            && (self.val_min..=self.val_max).contains(&v)
    }
}

/// Segmentation palette; the shipped default covers the red/blue/white
/// traffic-sign colors and can be overridden from a config file.
#[derive(Debug, Clone)]
pub struct ColorSegConfig {
    pub rules: Vec<ColorRule>,
}

impl Default for ColorSegConfig {
    fn default() -> Self {
        ColorSegConfig {
            rules: vec![
                ColorRule {
                    name: "red".into(),
                    hue_lo: 330.0,
                    hue_hi: 30.0,
                    sat_min: 0.35,
                    sat_max: 1.0,
                    val_min: 0.2,
                    val_max: 1.0,
                    min_area_fraction: 0.005,
                },
                ColorRule {
                    name: "blue".into(),
                    hue_lo: 190.0,
                    hue_hi: 260.0,
                    sat_min: 0.35,
                    sat_max: 1.0,
                    val_min: 0.2,
                    val_max: 1.0,
                    min_area_fraction: 0.005,
                },
                ColorRule {
                    name: "white".into(),
                    hue_lo: 0.0,
                    hue_hi: 360.0,
                    sat_min: 0.0,
                    sat_max: 0.25,
                    val_min: 0.6,
                    val_max: 1.0,
                    min_area_fraction: 0.005,
                },
            ],
        }
    }
}

impl ColorSegConfig {
    /// Parses `rule <name> <hue_lo> <hue_hi> <sat_min> <sat_max> <val_min>
    /// <val_max> <min_area>` lines; `#` starts a comment.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| ScnError::io(path, e))?;
        let mut rules = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            if parts.len() != 9 || parts[0] != "rule" {
                return Err(ScnError::Config(format!(
                    "{}:{}: expected `rule <name> <6 bounds> <min_area>`",
                    path.display(),
                    ln + 1
                )));
            }
            let num = |s: &str| -> Result<f64> {
                s.parse().map_err(|_| {
                    ScnError::Config(format!("{}:{}: bad number {}", path.display(), ln + 1, s))
                })
            };
            rules.push(ColorRule {
                name: parts[1].to_string(),
                hue_lo: num(parts[2])?,
                hue_hi: num(parts[3])?,
                sat_min: num(parts[4])?,
                sat_max: num(parts[5])?,
                val_min: num(parts[6])?,
                val_max: num(parts[7])?,
                min_area_fraction: num(parts[8])?,
            });
        }
        if rules.is_empty() {
            return Err(ScnError::Config(format!(
                "{}: no rules defined",
                path.display()
            )));
        }
        Ok(ColorSegConfig { rules })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::from("# color segmentation rules\n# rule <name> <hue_lo> <hue_hi> <sat_min> <sat_max> <val_min> <val_max> <min_area>\n");
        for r in &self.rules {
            out.push_str(&format!(
                "rule {} {} {} {} {} {} {} {}\n",
                r.name, r.hue_lo, r.hue_hi, r.sat_min, r.sat_max, r.val_min, r.val_max,
                r.min_area_fraction
            ));
        }
        std::fs::write(path, out).map_err(|e| ScnError::io(path, e))
    }
}

/// One color-region primitive per rule with enough matching area.
/// Properties: `(area_fraction, cx, cy, bbox_x0, bbox_y0, bbox_x1, bbox_y1, 0)`.
pub fn segment_colors(img: &ColorImage, config: &ColorSegConfig) -> Vec<Primitive> {
    let (w, h) = (img.width(), img.height());
    let total = (w * h) as f64;
    let mut out = Vec::new();
    for rule in &config.rules {
        let mut count = 0usize;
        let (mut sx, mut sy) = (0.0f64, 0.0f64);
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0usize, 0usize);
        for y in 0..h {
            for x in 0..w {
                let [r, g, b] = img.get(x, y);
                let (hh, ss, vv) = rgb_to_hsv(r, g, b);
                if rule.matches(hh, ss, vv) {
                    count += 1;
                    sx += x as f64;
                    sy += y as f64;
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x);
                    y1 = y1.max(y);
                }
            }
        }
        let area = count as f64 / total;
        if count == 0 || area < rule.min_area_fraction {
            continue;
        }
        out.push(Primitive {
            kind: PrimitiveKind::ColorRegion,
            props: [
                area,
                sx / count as f64,
                sy / count as f64,
                x0 as f64,
                y0 as f64,
                x1 as f64,
                y1 as f64,
                0.0,
            ],
            match_score: area,
            tag: Some(rule.name.clone()),
        });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_image_unchanged() {
        let img = ColorImage::filled(8, 8, [0.4, 0.4, 0.4]);
        let eq = equalize_histogram(&img);
        assert_eq!(img, eq);
    }

    #[test]
    fn two_level_image_spreads_to_half_and_one() {
        let mut img = ColorImage::filled(8, 8, [0.2, 0.2, 0.2]);
        for y in 4..8 {
            for x in 0..8 {
                img.set(x, y, [0.8, 0.8, 0.8]);
            }
        }
        let eq = equalize_histogram(&img);
        let lo = eq.luminance(0, 0);
        let hi = eq.luminance(0, 7);
        assert!((lo - 0.5).abs() < 1.0 / 255.0, "low level {}", lo);
        assert!((hi - 1.0).abs() < 1.0 / 255.0, "high level {}", hi);
    }

    #[test]
    fn noise_image_cdf_is_nearly_linear() {
        // deterministic pseudo-noise
        let mut data = Vec::with_capacity(64 * 64 * 3);
        let mut state = 0x243F6A8885A308D3u64;
        for _ in 0..64 * 64 {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let v = (state >> 11) as f64 / (1u64 << 53) as f64;
            data.extend_from_slice(&[v, v, v]);
        }
        let img = ColorImage::new(64, 64, data).unwrap();
        let eq = equalize_histogram(&img);
        let values: Vec<f64> = (0..64 * 64)
            .map(|i| eq.luminance(i % 64, i / 64))
            .collect();
        // at every produced level v, the empirical CDF must sit within one
        // histogram bin of the identity line
        let mut levels = values.clone();
        levels.sort_by(|a, b| a.partial_cmp(b).unwrap());
        levels.dedup();
        for v in levels {
            let frac = values.iter().filter(|&&x| x <= v + 1e-12).count() as f64
                / values.len() as f64;
            assert!((frac - v).abs() <= 1.0 / 256.0 + 1e-9, "cdf off at level {}: {}", v, frac);
        }
    }

    #[test]
    fn pure_red_is_one_full_region() {
        let img = ColorImage::filled(16, 16, [1.0, 0.0, 0.0]);
        let prims = segment_colors(&img, &ColorSegConfig::default());
        assert_eq!(prims.len(), 1);
        assert_eq!(prims[0].tag.as_deref(), Some("red"));
        assert_eq!(prims[0].props[0], 1.0);
    }

    #[test]
    fn red_ring_on_white_field() {
        let mut img = ColorImage::filled(32, 32, [1.0, 1.0, 1.0]);
        for y in 0..32 {
            for x in 0..32 {
                let d = ((x as f64 - 16.0).powi(2) + (y as f64 - 16.0).powi(2)).sqrt();
                if (8.0..=11.0).contains(&d) {
                    img.set(x, y, [0.9, 0.05, 0.05]);
                }
            }
        }
        let prims = segment_colors(&img, &ColorSegConfig::default());
        let red = prims.iter().find(|p| p.tag.as_deref() == Some("red")).unwrap();
        assert!((red.props[1] - 16.0).abs() <= 2.0);
        assert!((red.props[2] - 16.0).abs() <= 2.0);
        assert!(prims.iter().any(|p| p.tag.as_deref() == Some("white")));
    }

    #[test]
    fn pure_black_yields_nothing() {
        let img = ColorImage::filled(8, 8, [0.0, 0.0, 0.0]);
        assert!(segment_colors(&img, &ColorSegConfig::default()).is_empty());
    }
}
