//! Fixed detection pipelines feeding the relation engine.

use super::color::{equalize_histogram, segment_colors, ColorSegConfig};
use super::contour::detect_closed_contours;
use super::image::{ColorImage, GrayImage};
use super::stroke::{detect_arcs, detect_lines};
use super::template::{binarize_adaptive, TemplateBank};
use super::thin::thin;
use super::{select_typical, Primitive};
use crate::error::Result;

#[derive(Debug, Clone)]
pub struct MnistPipelineConfig {
    pub binarize_threshold: f64,
    pub min_line_length: f64,
    pub min_arc_span: f64,
    pub per_type: usize,
}

impl Default for MnistPipelineConfig {
    fn default() -> Self {
        MnistPipelineConfig {
            binarize_threshold: 0.5,
            min_line_length: 4.0,
            min_arc_span: 4.0,
            per_type: 2,
        }
    }
}

/// Grayscale pipeline, in fixed order: thin, closed contours (with loop
/// removal), lines, arcs, then per-kind typicality pruning.
pub fn detect_primitives_mnist(img: &GrayImage, cfg: &MnistPipelineConfig) -> Vec<Primitive> {
    let skeleton = thin(img, cfg.binarize_threshold);
    let (contours, residual) = detect_closed_contours(&skeleton);
    let lines = detect_lines(&residual, cfg.min_line_length);
    let arcs = detect_arcs(&residual, cfg.min_arc_span);
    let mut all = contours;
    all.extend(lines);
    all.extend(arcs);
    select_typical(all, cfg.per_type)
}

/// Color pipeline: histogram equalization, color segmentation, adaptive
/// binarization, then template-bank shape/symbol detection, pruned per
/// kind.
pub fn detect_primitives_gtsrb(
    img: &ColorImage,
    colors: &ColorSegConfig,
    bank: &TemplateBank,
    per_type: usize,
) -> Result<Vec<Primitive>> {
    let eq = equalize_histogram(img);
    let mut all = segment_colors(&eq, colors);
    let gray = eq.to_gray();
    let binarized = binarize_adaptive(&gray, 11, 0.02)?;
    all.extend(bank.detect(&binarized)?);
    Ok(select_typical(all, per_type))
}

#[cfg(test)]
mod tests {
    use super::super::render;
    use super::super::PrimitiveKind;
    use super::*;

    #[test]
    fn circle_image_gives_one_contour_nothing_else() {
        let mut img = GrayImage::blank(28, 28);
        render::draw_circle(&mut img, 14.0, 14.0, 8.0, 2.0);
        let prims = detect_primitives_mnist(&img, &MnistPipelineConfig::default());
        assert_eq!(prims.len(), 1);
        assert_eq!(prims[0].kind, PrimitiveKind::ClosedContour);
    }

    #[test]
    fn detection_is_deterministic() {
        let mut img = GrayImage::blank(28, 28);
        render::draw_circle(&mut img, 10.0, 10.0, 6.0, 2.0);
        render::draw_line(&mut img, 4.0, 22.0, 24.0, 24.0, 2.0);
        let a = detect_primitives_mnist(&img, &MnistPipelineConfig::default());
        let b = detect_primitives_mnist(&img, &MnistPipelineConfig::default());
        assert_eq!(a, b);
    }

    #[test]
    fn coordinates_stay_in_bounds() {
        let mut img = GrayImage::blank(28, 28);
        render::draw_circle(&mut img, 9.0, 9.0, 7.0, 2.0);
        render::draw_line(&mut img, 2.0, 20.0, 26.0, 22.0, 2.0);
        render::draw_arc(&mut img, 20.0, 20.0, 6.0, 3.4, 6.0, 2.0);
        for p in detect_primitives_mnist(&img, &MnistPipelineConfig::default()) {
            let pts: Vec<(f64, f64)> = match p.kind {
                PrimitiveKind::ClosedContour => vec![(p.props[0], p.props[1])],
                PrimitiveKind::Line => {
                    vec![(p.props[0], p.props[1]), (p.props[2], p.props[3])]
                }
                PrimitiveKind::Arc => vec![
                    (p.props[0], p.props[1]),
                    (p.props[2], p.props[3]),
                    (p.props[4], p.props[5]),
                ],
                _ => vec![],
            };
            for (x, y) in pts {
                assert!((0.0..28.0).contains(&x), "{:?}", p);
                assert!((0.0..28.0).contains(&y), "{:?}", p);
            }
        }
    }
}
