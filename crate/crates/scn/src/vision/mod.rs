//! Semantic primitive detection: skeletonization, contour/line/arc
//! extraction, color segmentation, and template matching.

pub mod color;
pub mod contour;
pub mod image;
pub mod pipeline;
pub mod render;
pub mod stroke;
pub mod template;
pub mod thin;

pub use color::{equalize_histogram, segment_colors, ColorRule, ColorSegConfig};
pub use contour::detect_closed_contours;
pub use image::{rgb_to_hsv, ColorImage, GrayImage};
pub use pipeline::{detect_primitives_gtsrb, detect_primitives_mnist, MnistPipelineConfig};
pub use stroke::{detect_arcs, detect_lines};
pub use template::{binarize_adaptive, match_template, TemplateBank, TemplateEntry};
pub use thin::{count_components, thin};

/// The five primitive categories, in the fixed ordering used everywhere
/// (ranking, schema slots, reports).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum PrimitiveKind {
    ClosedContour,
    Line,
    Arc,
    ColorRegion,
    Symbol,
}

impl PrimitiveKind {
    pub fn letter(self) -> char {
        match self {
            PrimitiveKind::ClosedContour => 'c',
            PrimitiveKind::Line => 'l',
            PrimitiveKind::Arc => 'a',
            PrimitiveKind::ColorRegion => 'r',
            PrimitiveKind::Symbol => 'y',
        }
    }

    pub fn from_letter(ch: char) -> Option<Self> {
        Some(match ch {
            'c' => PrimitiveKind::ClosedContour,
            'l' => PrimitiveKind::Line,
            'a' => PrimitiveKind::Arc,
            'r' => PrimitiveKind::ColorRegion,
            'y' => PrimitiveKind::Symbol,
            _ => return None,
        })
    }
}

/// One detected semantic primitive with its 8-dimensional property vector.
///
/// Property layout by kind:
/// - closed contour: `(cx, cy, long_axis, short_axis, rotation_deg, 0, 0, 0)`
/// - line: `(x0, y0, x1, y1, length, angle_deg, 0, 0)`
/// - arc: `(x_start, y_start, x_mid, y_mid, x_end, y_end, 0, 0)`
/// - color region: `(area_fraction, cx, cy, bbox_x0, bbox_y0, bbox_x1, bbox_y1, 0)`
/// - symbol: `(cx, cy, width, height, 0, 0, 0, 0)`
///
/// Angles are degrees in `[0, 180)` measured in image coordinates (y down).
#[derive(Debug, Clone, PartialEq)]
pub struct Primitive {
    pub kind: PrimitiveKind,
    pub props: [f64; 8],
    pub match_score: f64,
    /// Color class or template name, when the detector assigns one.
    pub tag: Option<String>,
}

impl Primitive {
    /// Reference point used for ranking ties and location relations.
    pub fn anchor_point(&self) -> (f64, f64) {
        match self.kind {
            PrimitiveKind::ClosedContour => (self.props[0], self.props[1]),
            PrimitiveKind::Line => (self.props[0], self.props[1]),
            PrimitiveKind::Arc => (self.props[0], self.props[1]),
            PrimitiveKind::ColorRegion => (self.props[1], self.props[2]),
            PrimitiveKind::Symbol => (self.props[0], self.props[1]),
        }
    }

    /// Centroid used by location/distance relations.
    pub fn centroid(&self) -> (f64, f64) {
        match self.kind {
            PrimitiveKind::ClosedContour => (self.props[0], self.props[1]),
            PrimitiveKind::Line => (
                (self.props[0] + self.props[2]) / 2.0,
                (self.props[1] + self.props[3]) / 2.0,
            ),
            PrimitiveKind::Arc => (self.props[2], self.props[3]),
            PrimitiveKind::ColorRegion => (self.props[1], self.props[2]),
            PrimitiveKind::Symbol => (self.props[0], self.props[1]),
        }
    }

    /// Orientation in degrees `[0, 180)`; `None` for color regions and
    /// symbols.
    pub fn orientation(&self) -> Option<f64> {
        match self.kind {
            PrimitiveKind::Line => Some(self.props[5]),
            PrimitiveKind::ClosedContour => Some(self.props[4]),
            PrimitiveKind::Arc => {
                let dx = self.props[4] - self.props[0];
                let dy = self.props[5] - self.props[1];
                if dx == 0.0 && dy == 0.0 {
                    None
                } else {
                    Some(fold_angle_deg(dy.atan2(dx).to_degrees()))
                }
            }
            _ => None,
        }
    }

    /// Size measure used by the typicality ranking.
    pub fn size(&self) -> f64 {
        match self.kind {
            PrimitiveKind::ClosedContour => {
                // Ramanujan perimeter approximation of the fitted ellipse
                let a = self.props[2] / 2.0;
                let b = self.props[3] / 2.0;
                std::f64::consts::PI
                    * (3.0 * (a + b) - ((3.0 * a + b) * (a + 3.0 * b)).sqrt())
            }
            PrimitiveKind::Line => self.props[4],
            PrimitiveKind::Arc => {
                let d1 = (self.props[2] - self.props[0]).hypot(self.props[3] - self.props[1]);
                let d2 = (self.props[4] - self.props[2]).hypot(self.props[5] - self.props[3]);
                d1 + d2
            }
            PrimitiveKind::ColorRegion => self.props[0],
            PrimitiveKind::Symbol => self.props[2] * self.props[3],
        }
    }

    /// Typicality used by [`select_typical`]: template-derived primitives
    /// rank by match score, geometric ones by size.
    pub fn typicality(&self) -> f64 {
        match self.kind {
            PrimitiveKind::Symbol => self.match_score,
            PrimitiveKind::ClosedContour if self.tag.is_some() => self.match_score,
            _ => self.size(),
        }
    }
}

/// Folds an angle in degrees into `[0, 180)`.
pub fn fold_angle_deg(deg: f64) -> f64 {
    let mut a = deg.rem_euclid(180.0);
    if a >= 180.0 {
        a -= 180.0;
    }
    a
}

/// Keeps at most `per_type` primitives of each kind, ranked by typicality
/// (descending), ties broken by the smaller `(y, x)` of the anchor point.
/// Output is ordered by kind, then rank.
pub fn select_typical(mut primitives: Vec<Primitive>, per_type: usize) -> Vec<Primitive> {
    primitives.sort_by(|a, b| {
        a.kind.cmp(&b.kind).then_with(|| {
            b.typicality()
                .partial_cmp(&a.typicality())
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| {
                    let (ax, ay) = a.anchor_point();
                    let (bx, by) = b.anchor_point();
                    (ay, ax)
                        .partial_cmp(&(by, bx))
                        .unwrap_or(std::cmp::Ordering::Equal)
                })
        })
    });
    let mut out = Vec::new();
    let mut counts: std::collections::BTreeMap<PrimitiveKind, usize> = Default::default();
    for p in primitives {
        let c = counts.entry(p.kind).or_insert(0);
        if *c < per_type {
            *c += 1;
            out.push(p);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(x0: f64, y0: f64, x1: f64, y1: f64) -> Primitive {
        let len = (x1 - x0).hypot(y1 - y0);
        let angle = fold_angle_deg((y1 - y0).atan2(x1 - x0).to_degrees());
        Primitive {
            kind: PrimitiveKind::Line,
            props: [x0, y0, x1, y1, len, angle, 0.0, 0.0],
            match_score: 0.0,
            tag: None,
        }
    }

    #[test]
    fn keeps_two_longest_lines() {
        let prims = vec![
            line(0.0, 0.0, 10.0, 0.0),
            line(0.0, 2.0, 7.0, 2.0),
            line(0.0, 4.0, 4.0, 4.0),
        ];
        let kept = select_typical(prims, 2);
        assert_eq!(kept.len(), 2);
        assert_eq!(kept[0].props[4], 10.0);
        assert_eq!(kept[1].props[4], 7.0);
    }

    #[test]
    fn single_contour_retained() {
        let c = Primitive {
            kind: PrimitiveKind::ClosedContour,
            props: [14.0, 14.0, 16.0, 16.0, 0.0, 0.0, 0.0, 0.0],
            match_score: 0.0,
            tag: None,
        };
        let kept = select_typical(vec![c.clone()], 2);
        assert_eq!(kept, vec![c]);
    }

    #[test]
    fn empty_in_empty_out() {
        assert!(select_typical(Vec::new(), 2).is_empty());
    }

    #[test]
    fn angle_folding() {
        assert_eq!(fold_angle_deg(190.0), 10.0);
        assert_eq!(fold_angle_deg(-45.0), 135.0);
        assert_eq!(fold_angle_deg(0.0), 0.0);
    }
}
