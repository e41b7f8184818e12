//! Declarative relation schemas and binary relation vectors.
//!
//! A schema is data: an ordered list of features, each pairing two
//! primitive slots with a predicate (intersect / distance / included-angle
//! / location). The relation vector has one bit per feature, in file line
//! order; a bit is 1 iff both slots are filled and the predicate holds.

pub mod predicates;

use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Result, ScnError};
use crate::vision::PrimitiveKind;

pub use predicates::{
    angle_relation, compute_relation_vector, distance_relation, intersect_relation,
    location_relation, LocationLabel,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RelationKind {
    Int,
    Dis,
    Ang,
    Loc,
}

impl RelationKind {
    pub fn name(self) -> &'static str {
        match self {
            RelationKind::Int => "int",
            RelationKind::Dis => "dis",
            RelationKind::Ang => "ang",
            RelationKind::Loc => "loc",
        }
    }
}

/// Reference to a primitive produced by `select_typical`: either the n-th
/// best of a kind (`l1`, `c2`) or the best one carrying a tag
/// (`y:sym_07`, `r:red`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SlotRef {
    Ranked { kind: PrimitiveKind, rank: usize },
    Tagged { kind: PrimitiveKind, tag: String },
}

impl SlotRef {
    pub fn kind(&self) -> PrimitiveKind {
        match self {
            SlotRef::Ranked { kind, .. } | SlotRef::Tagged { kind, .. } => *kind,
        }
    }

    fn encode(&self) -> String {
        match self {
            SlotRef::Ranked { kind, rank } => format!("{}{}", kind.letter(), rank + 1),
            SlotRef::Tagged { kind, tag } => format!("{}:{}", kind.letter(), tag),
        }
    }

    fn decode(s: &str) -> Option<SlotRef> {
        let mut chars = s.chars();
        let kind = PrimitiveKind::from_letter(chars.next()?)?;
        let rest: String = chars.collect();
        if let Some(tag) = rest.strip_prefix(':') {
            if tag.is_empty() {
                return None;
            }
            Some(SlotRef::Tagged {
                kind,
                tag: tag.to_string(),
            })
        } else {
            let rank: usize = rest.parse().ok()?;
            if rank == 0 {
                return None;
            }
            Some(SlotRef::Ranked {
                kind,
                rank: rank - 1,
            })
        }
    }
}

/// Anchor point for distance features. `Center` is the centroid. For
/// lines and arcs, start/mid/end are the stored curve points. For closed
/// contours, start and end are the major-axis endpoints of the fitted
/// ellipse and mid is a minor-axis endpoint, so `start..end` spans the
/// long axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Anchor {
    Center,
    Start,
    Mid,
    End,
}

impl Anchor {
    fn name(self) -> &'static str {
        match self {
            Anchor::Center => "center",
            Anchor::Start => "start",
            Anchor::Mid => "mid",
            Anchor::End => "end",
        }
    }

    fn parse(s: &str) -> Option<Anchor> {
        Some(match s {
            "center" => Anchor::Center,
            "start" => Anchor::Start,
            "mid" => Anchor::Mid,
            "end" => Anchor::End,
            _ => return None,
        })
    }

    fn valid_for(self, kind: PrimitiveKind) -> bool {
        match kind {
            PrimitiveKind::Line | PrimitiveKind::Arc | PrimitiveKind::ClosedContour => true,
            _ => self == Anchor::Center,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum FeatureParams {
    Int,
    Dis {
        anchor_a: Anchor,
        anchor_b: Anchor,
        threshold: f64,
        /// Band lower bound: the bit fires iff `min < dist <= threshold`.
        min: f64,
    },
    /// Included angle in `[lo, hi)` degrees; the upper bound is inclusive
    /// when `hi == 90`.
    Ang { lo: f64, hi: f64 },
    Loc { label: LocationLabel },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Feature {
    pub a: SlotRef,
    pub b: SlotRef,
    pub params: FeatureParams,
}

impl Feature {
    pub fn kind(&self) -> RelationKind {
        match self.params {
            FeatureParams::Int => RelationKind::Int,
            FeatureParams::Dis { .. } => RelationKind::Dis,
            FeatureParams::Ang { .. } => RelationKind::Ang,
            FeatureParams::Loc { .. } => RelationKind::Loc,
        }
    }

    fn encode(&self) -> String {
        match &self.params {
            FeatureParams::Int => format!("int {} {}", self.a.encode(), self.b.encode()),
            FeatureParams::Dis {
                anchor_a,
                anchor_b,
                threshold,
                min,
            } => {
                let mut s = format!(
                    "dis {} {} {} {} {}",
                    self.a.encode(),
                    self.b.encode(),
                    anchor_a.name(),
                    anchor_b.name(),
                    threshold
                );
                if *min > 0.0 {
                    s.push_str(&format!(" {}", min));
                }
                s
            }
            FeatureParams::Ang { lo, hi } => {
                format!("ang {} {} {} {}", self.a.encode(), self.b.encode(), lo, hi)
            }
            FeatureParams::Loc { label } => format!(
                "loc {} {} {}",
                self.a.encode(),
                self.b.encode(),
                label.name()
            ),
        }
    }
}

/// Ordered, versioned feature list. The feature order is the bit order of
/// every relation vector computed under this schema.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationSchema {
    pub version: u32,
    pub features: Vec<Feature>,
    hash: String,
}

/// Binary relation vector tied to the schema that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationVector {
    pub bits: Vec<u8>,
    pub schema_hash: String,
}

impl RelationVector {
    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b == 1).count()
    }
}

impl RelationSchema {
    pub fn from_features(version: u32, features: Vec<Feature>) -> Result<Self> {
        let mut schema = RelationSchema {
            version,
            features,
            hash: String::new(),
        };
        schema.validate()?;
        schema.hash = schema.compute_hash();
        Ok(schema)
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    /// Hex digest of the canonical feature listing.
    pub fn hash(&self) -> &str {
        &self.hash
    }

    /// Feature counts per relation kind: (int, dis, ang, loc).
    pub fn counts(&self) -> (usize, usize, usize, usize) {
        let mut c = (0, 0, 0, 0);
        for f in &self.features {
            match f.kind() {
                RelationKind::Int => c.0 += 1,
                RelationKind::Dis => c.1 += 1,
                RelationKind::Ang => c.2 += 1,
                RelationKind::Loc => c.3 += 1,
            }
        }
        c
    }

    fn compute_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for f in &self.features {
            hasher.update(f.encode().as_bytes());
            hasher.update(b"\n");
        }
        hex::encode(&hasher.finalize()[..8])
    }

    fn validate(&self) -> Result<()> {
        for (i, f) in self.features.iter().enumerate() {
            if let FeatureParams::Dis {
                anchor_a,
                anchor_b,
                threshold,
                min,
            } = &f.params
            {
                if *min < 0.0 || min >= threshold {
                    return Err(ScnError::Schema(format!(
                        "feature {}: band [{}, {}] is empty",
                        i + 1,
                        min,
                        threshold
                    )));
                }
                if *threshold <= 0.0 {
                    return Err(ScnError::Schema(format!(
                        "feature {}: distance threshold must be positive",
                        i + 1
                    )));
                }
                if !anchor_a.valid_for(f.a.kind()) || !anchor_b.valid_for(f.b.kind()) {
                    return Err(ScnError::Schema(format!(
                        "feature {}: start/mid/end anchors only apply to lines and arcs",
                        i + 1
                    )));
                }
            }
            if let FeatureParams::Ang { lo, hi } = f.params {
                if !(0.0..=90.0).contains(&lo) || !(0.0..=90.0).contains(&hi) || lo >= hi {
                    return Err(ScnError::Schema(format!(
                        "feature {}: angle bin [{}, {}) invalid; bounds lie in [0, 90]",
                        i + 1,
                        lo,
                        hi
                    )));
                }
            }
            if matches!(f.params, FeatureParams::Int) && f.a == f.b {
                return Err(ScnError::Schema(format!(
                    "feature {}: intersect features exclude self-pairs",
                    i + 1
                )));
            }
        }
        Ok(())
    }

    /// Serializes to the text format: header comments (version, hash,
    /// per-kind counts), then one feature per line. Line order is the bit
    /// order.
    pub fn to_text(&self) -> String {
        let (i, d, a, l) = self.counts();
        let mut out = String::new();
        let _ = writeln!(out, "# scn-relation-schema v{}", self.version);
        let _ = writeln!(out, "# hash {}", self.hash);
        let _ = writeln!(out, "# counts int={} dis={} ang={} loc={}", i, d, a, l);
        for f in &self.features {
            let _ = writeln!(out, "{}", f.encode());
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| ScnError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| ScnError::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            ScnError::Schema(msg) => ScnError::Schema(format!("{}: {}", path.display(), msg)),
            other => other,
        })
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut version = None;
        let mut declared_hash = None;
        let mut declared_counts = None;
        let mut features = Vec::new();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                let rest = rest.trim();
                if let Some(v) = rest.strip_prefix("scn-relation-schema v") {
                    version = Some(v.trim().parse::<u32>().map_err(|_| {
                        ScnError::Schema(format!("line {}: bad version", ln + 1))
                    })?);
                } else if let Some(hash) = rest.strip_prefix("hash ") {
                    declared_hash = Some(hash.trim().to_string());
                } else if let Some(counts) = rest.strip_prefix("counts ") {
                    declared_counts = Some(parse_counts(counts, ln + 1)?);
                }
                continue;
            }
            features.push(parse_feature(line, ln + 1)?);
        }
        let version = version.ok_or_else(|| {
            ScnError::Schema("missing `# scn-relation-schema v<N>` header".into())
        })?;
        let schema = RelationSchema::from_features(version, features)?;
        if let Some(h) = declared_hash {
            if h != schema.hash {
                return Err(ScnError::SchemaHashMismatch {
                    expected: h,
                    found: schema.hash,
                });
            }
        }
        if let Some((i, d, a, l)) = declared_counts {
            let actual = schema.counts();
            if actual != (i, d, a, l) {
                return Err(ScnError::Schema(format!(
                    "declared counts int={} dis={} ang={} loc={} but body has int={} dis={} ang={} loc={}",
                    i, d, a, l, actual.0, actual.1, actual.2, actual.3
                )));
            }
        }
        Ok(schema)
    }

    /// The default 127-feature schema for 28x28 grayscale digits:
    /// 8 intersect, 95 distance, 11 included-angle and 13 location
    /// features over the slots c1 c2 l1 l2 a1 a2.
    ///
    /// Self-pair features encode single-primitive evidence: a self-pair
    /// location feature with label `empty` is a presence bit, a self-pair
    /// distance between two anchors measures the primitive's own extent,
    /// and a self-pair angle bins the orientation against horizontal.
    pub fn default_mnist() -> RelationSchema {
        use PrimitiveKind::*;
        let r = |kind: PrimitiveKind, rank: usize| SlotRef::Ranked { kind, rank };
        let (c1, c2) = (r(ClosedContour, 0), r(ClosedContour, 1));
        let (l1, l2) = (r(Line, 0), r(Line, 1));
        let (a1, a2) = (r(Arc, 0), r(Arc, 1));
        let mut features = Vec::new();

        // intersect: eight stroke/contour pairs (no contour-contour or
        // arc-arc pairs)
        let int_pairs = [
            (&c1, &l1),
            (&c1, &l2),
            (&c1, &a1),
            (&c2, &l1),
            (&l1, &l2),
            (&l1, &a1),
            (&l1, &a2),
            (&l2, &a1),
        ];
        for (a, b) in int_pairs {
            features.push(Feature {
                a: a.clone(),
                b: b.clone(),
                params: FeatureParams::Int,
            });
        }

        // distance features: overlapping bands so that detection noise
        // near a boundary still lights the class's dominant bit
        let band = |a: &SlotRef, aa: Anchor, b: &SlotRef, ab: Anchor, lo: f64, hi: f64| Feature {
            a: a.clone(),
            b: b.clone(),
            params: FeatureParams::Dis {
                anchor_a: aa,
                anchor_b: ab,
                threshold: hi,
                min: lo,
            },
        };
        let bandl = |features: &mut Vec<Feature>,
                     a: &SlotRef,
                     aa: Anchor,
                     b: &SlotRef,
                     ab: Anchor,
                     list: &[(f64, f64)]| {
            for &(lo, hi) in list {
                features.push(band(a, aa, b, ab, lo, hi));
            }
        };
        use Anchor::*;
        // own extents
        bandl(&mut features, &l1, Start, &l1, End,
            &[(0.0, 7.0), (4.0, 10.0), (7.0, 13.0), (10.0, 16.0), (13.0, 19.0), (16.0, 64.0)]); // 6
        bandl(&mut features, &l2, Start, &l2, End, &[(0.0, 7.0), (5.0, 11.0), (9.0, 64.0)]); // 3
        bandl(&mut features, &a1, Start, &a1, End,
            &[(0.0, 5.0), (3.0, 8.0), (6.0, 11.0), (9.0, 14.0), (12.0, 17.0), (15.0, 64.0)]); // 6
        bandl(&mut features, &a1, Start, &a1, Mid,
            &[(0.0, 5.0), (3.0, 9.0), (7.0, 13.0), (11.0, 64.0)]); // 4
        bandl(&mut features, &a1, Mid, &a1, End,
            &[(0.0, 5.0), (3.0, 9.0), (7.0, 13.0), (11.0, 64.0)]); // 4
        bandl(&mut features, &a2, Start, &a2, End, &[(0.0, 6.0), (4.0, 11.0), (9.0, 64.0)]); // 3
        bandl(&mut features, &c1, Start, &c1, End,
            &[(0.0, 7.0), (5.0, 10.0), (8.0, 13.0), (11.0, 64.0)]); // 4
        bandl(&mut features, &c1, Center, &c1, Mid,
            &[(0.0, 2.5), (1.5, 4.0), (3.0, 64.0)]); // 3
        bandl(&mut features, &c2, Start, &c2, End, &[(0.0, 9.0), (7.0, 64.0)]); // 2
        // centroid separation between slots
        bandl(&mut features, &c1, Center, &l1, Center,
            &[(0.0, 5.0), (3.0, 9.0), (7.0, 13.0), (11.0, 64.0)]); // 4
        bandl(&mut features, &c1, Center, &a1, Center,
            &[(0.0, 5.0), (3.0, 9.0), (7.0, 13.0), (11.0, 64.0)]); // 4
        bandl(&mut features, &c1, Center, &c2, Center,
            &[(0.0, 5.0), (3.0, 9.0), (7.0, 13.0), (11.0, 64.0)]); // 4
        bandl(&mut features, &l1, Center, &l2, Center,
            &[(0.0, 4.0), (2.5, 7.0), (5.0, 10.0), (8.0, 13.0), (11.0, 64.0)]); // 5
        bandl(&mut features, &l1, Center, &a1, Center,
            &[(0.0, 4.0), (2.5, 7.0), (5.0, 10.0), (8.0, 13.0), (11.0, 64.0)]); // 5
        bandl(&mut features, &l2, Center, &a1, Center,
            &[(0.0, 5.0), (3.0, 9.0), (7.0, 13.0), (11.0, 64.0)]); // 4
        bandl(&mut features, &a1, Center, &a2, Center,
            &[(0.0, 4.0), (2.5, 7.0), (5.0, 10.0), (8.0, 13.0), (11.0, 64.0)]); // 5
        bandl(&mut features, &c2, Center, &l1, Center, &[(0.0, 7.0), (5.0, 64.0)]); // 2
        bandl(&mut features, &c2, Center, &a1, Center, &[(0.0, 7.0), (5.0, 64.0)]); // 2
        // endpoint adjacency (stroke joins)
        let dis = |a: &SlotRef, aa: Anchor, b: &SlotRef, ab: Anchor, t: f64| Feature {
            a: a.clone(),
            b: b.clone(),
            params: FeatureParams::Dis {
                anchor_a: aa,
                anchor_b: ab,
                threshold: t,
                min: 0.0,
            },
        };
        for (aa, ab) in [(Start, Start), (Start, End), (End, Start), (End, End)] {
            features.push(dis(&l1, aa, &l2, ab, 2.5)); // 4
        }
        for (aa, ab) in [(Start, Start), (Start, End), (End, Start), (End, End)] {
            features.push(dis(&l1, aa, &a1, ab, 2.5)); // 4
        }
        for (aa, ab) in [(Start, End), (End, Start)] {
            features.push(dis(&a1, aa, &a2, ab, 2.5)); // 2
        }
        for (aa, ab) in [(Start, Start), (End, End)] {
            features.push(dis(&l2, aa, &a1, ab, 2.5)); // 2
        }
        // midpoint geometry
        bandl(&mut features, &a1, Mid, &l1, Mid, &[(0.0, 4.0), (2.5, 7.0), (5.0, 64.0)]); // 3
        bandl(&mut features, &a1, Mid, &c1, Center, &[(0.0, 5.0), (3.0, 9.0), (7.0, 64.0)]); // 3
        bandl(&mut features, &l1, Mid, &c1, Center, &[(0.0, 5.0), (3.0, 9.0), (7.0, 64.0)]); // 3
        bandl(&mut features, &a2, Start, &a2, Mid, &[(0.0, 6.0), (4.0, 64.0)]); // 2
        features.push(dis(&l2, Center, &a2, Center, 8.0)); // 1
        features.push(dis(&c1, Center, &l2, Center, 8.0)); // 1

        // angles: absolute orientation bins for l1/a1, included angles for
        // the stroke pairs
        let ang = |a: &SlotRef, b: &SlotRef, lo: f64, hi: f64| Feature {
            a: a.clone(),
            b: b.clone(),
            params: FeatureParams::Ang { lo, hi },
        };
        for (lo, hi) in [(0.0, 20.0), (12.0, 45.0), (38.0, 70.0), (62.0, 90.0)] {
            features.push(ang(&l1, &l1, lo, hi)); // 4: l1 orientation
        }
        for (lo, hi) in [(0.0, 35.0), (25.0, 65.0), (55.0, 90.0)] {
            features.push(ang(&a1, &a1, lo, hi)); // 3: a1 chord orientation
        }
        for (lo, hi) in [(0.0, 30.0), (20.0, 60.0), (50.0, 90.0)] {
            features.push(ang(&l1, &l2, lo, hi)); // 3
        }
        features.push(ang(&l1, &a1, 55.0, 90.0)); // 1

        // locations: presence bits plus relative placement
        use LocationLabel::*;
        let loc = |a: &SlotRef, b: &SlotRef, label: LocationLabel| Feature {
            a: a.clone(),
            b: b.clone(),
            params: FeatureParams::Loc { label },
        };
        features.push(loc(&c1, &c1, Empty));
        features.push(loc(&c2, &c2, Empty));
        features.push(loc(&l1, &l1, Empty));
        features.push(loc(&l2, &l2, Empty));
        features.push(loc(&a1, &a1, Empty));
        features.push(loc(&a2, &a2, Empty));
        features.push(loc(&c1, &l1, Up));
        features.push(loc(&c1, &l1, Down));
        features.push(loc(&c1, &a1, Up));
        features.push(loc(&c1, &a1, Down));
        features.push(loc(&l1, &c1, Inside));
        features.push(loc(&a1, &c1, Inside));
        features.push(loc(&l1, &l2, Up));

        RelationSchema::from_features(1, features).expect("default schema is valid")
    }

    /// The default traffic-sign schema: presence bits for 3 template
    /// shapes, 3 segmentation colors and 43 symbol templates, plus
    /// distance features tying symbols/colors/shapes together.
    pub fn default_gtsrb() -> RelationSchema {
        use PrimitiveKind::*;
        let tag = |kind: PrimitiveKind, tag: &str| SlotRef::Tagged {
            kind,
            tag: tag.to_string(),
        };
        let presence = |slot: SlotRef| Feature {
            a: slot.clone(),
            b: slot,
            params: FeatureParams::Loc {
                label: LocationLabel::Empty,
            },
        };
        let mut features = Vec::new();
        for shape in ["circle", "triangle", "octagon"] {
            features.push(presence(tag(ClosedContour, shape)));
        }
        for color in ["red", "blue", "white"] {
            features.push(presence(tag(ColorRegion, color)));
        }
        for idx in 0..43 {
            features.push(presence(tag(Symbol, &format!("sym_{:02}", idx))));
        }
        let dis = |a: SlotRef, b: SlotRef, t: f64| Feature {
            a,
            b,
            params: FeatureParams::Dis {
                anchor_a: Anchor::Center,
                anchor_b: Anchor::Center,
                threshold: t,
                min: 0.0,
            },
        };
        for shape in ["circle", "triangle", "octagon"] {
            features.push(dis(tag(ClosedContour, shape), tag(ColorRegion, "red"), 8.0));
        }
        features.push(dis(tag(ClosedContour, "circle"), tag(ColorRegion, "white"), 8.0));
        features.push(dis(tag(ClosedContour, "triangle"), tag(ColorRegion, "white"), 8.0));
        features.push(dis(tag(ColorRegion, "red"), tag(ColorRegion, "white"), 6.0));
        features.push(dis(tag(ColorRegion, "red"), tag(ColorRegion, "blue"), 6.0));
        let y1 = SlotRef::Ranked {
            kind: Symbol,
            rank: 0,
        };
        features.push(dis(y1.clone(), tag(ClosedContour, "circle"), 8.0));
        features.push(dis(y1.clone(), tag(ClosedContour, "triangle"), 8.0));
        features.push(dis(y1.clone(), tag(ColorRegion, "red"), 8.0));
        features.push(dis(y1, tag(ColorRegion, "blue"), 8.0));
        RelationSchema::from_features(1, features).expect("default schema is valid")
    }
}

fn parse_counts(s: &str, line: usize) -> Result<(usize, usize, usize, usize)> {
    let (mut i, mut d, mut a, mut l) = (None, None, None, None);
    for part in s.split_whitespace() {
        let (key, value) = part.split_once('=').ok_or_else(|| {
            ScnError::Schema(format!("line {}: bad counts entry {}", line, part))
        })?;
        let value: usize = value
            .parse()
            .map_err(|_| ScnError::Schema(format!("line {}: bad count {}", line, value)))?;
        match key {
            "int" => i = Some(value),
            "dis" => d = Some(value),
            "ang" => a = Some(value),
            "loc" => l = Some(value),
            _ => {
                return Err(ScnError::Schema(format!(
                    "line {}: unknown count key {}",
                    line, key
                )))
            }
        }
    }
    match (i, d, a, l) {
        (Some(i), Some(d), Some(a), Some(l)) => Ok((i, d, a, l)),
        _ => Err(ScnError::Schema(format!(
            "line {}: counts must list int, dis, ang and loc",
            line
        ))),
    }
}

fn parse_feature(line: &str, ln: usize) -> Result<Feature> {
    let parts: Vec<&str> = line.split_whitespace().collect();
    let bad = |msg: &str| ScnError::Schema(format!("line {}: {}", ln, msg));
    if parts.len() < 3 {
        return Err(bad("feature needs `kind slotA slotB params...`"));
    }
    let a = SlotRef::decode(parts[1]).ok_or_else(|| bad(&format!("bad slot {}", parts[1])))?;
    let b = SlotRef::decode(parts[2]).ok_or_else(|| bad(&format!("bad slot {}", parts[2])))?;
    let params = match parts[0] {
        "int" => {
            if parts.len() != 3 {
                return Err(bad("intersect features take no params"));
            }
            FeatureParams::Int
        }
        "dis" => {
            if parts.len() != 6 && parts.len() != 7 {
                return Err(bad("distance features take `anchorA anchorB threshold [min]`"));
            }
            let anchor_a =
                Anchor::parse(parts[3]).ok_or_else(|| bad(&format!("bad anchor {}", parts[3])))?;
            let anchor_b =
                Anchor::parse(parts[4]).ok_or_else(|| bad(&format!("bad anchor {}", parts[4])))?;
            let threshold: f64 = parts[5]
                .parse()
                .map_err(|_| bad(&format!("bad threshold {}", parts[5])))?;
            let min: f64 = if parts.len() == 7 {
                parts[6]
                    .parse()
                    .map_err(|_| bad(&format!("bad band bound {}", parts[6])))?
            } else {
                0.0
            };
            FeatureParams::Dis {
                anchor_a,
                anchor_b,
                threshold,
                min,
            }
        }
        "ang" => {
            if parts.len() != 5 {
                return Err(bad("angle features take `lo hi`"));
            }
            let lo: f64 = parts[3]
                .parse()
                .map_err(|_| bad(&format!("bad bound {}", parts[3])))?;
            let hi: f64 = parts[4]
                .parse()
                .map_err(|_| bad(&format!("bad bound {}", parts[4])))?;
            FeatureParams::Ang { lo, hi }
        }
        "loc" => {
            if parts.len() != 4 {
                return Err(bad("location features take `label`"));
            }
            let label = LocationLabel::parse(parts[3])
                .ok_or_else(|| bad(&format!("bad location label {}", parts[3])))?;
            FeatureParams::Loc { label }
        }
        other => return Err(bad(&format!("unknown relation kind {}", other))),
    };
    Ok(Feature { a, b, params })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_mnist_counts_are_pinned() {
        let schema = RelationSchema::default_mnist();
        assert_eq!(schema.len(), 127);
        assert_eq!(schema.counts(), (8, 95, 11, 13));
    }

    #[test]
    fn text_round_trip_preserves_schema_and_hash() {
        let schema = RelationSchema::default_mnist();
        let text = schema.to_text();
        let parsed = RelationSchema::parse(&text).unwrap();
        assert_eq!(schema, parsed);
        assert_eq!(schema.hash(), parsed.hash());
    }

    #[test]
    fn tampered_hash_is_rejected() {
        let schema = RelationSchema::default_mnist();
        let text = schema.to_text().replace("int c1 l1", "int c1 l2");
        let err = RelationSchema::parse(&text).unwrap_err();
        assert!(matches!(err, ScnError::SchemaHashMismatch { .. }), "{err}");
    }

    #[test]
    fn count_mismatch_is_rejected() {
        let text = "# scn-relation-schema v1\n# counts int=2 dis=0 ang=0 loc=0\nint c1 l1\n";
        let err = RelationSchema::parse(text).unwrap_err();
        assert!(err.to_string().contains("declared counts"));
    }

    #[test]
    fn gtsrb_schema_loads_and_hashes() {
        let schema = RelationSchema::default_gtsrb();
        assert_eq!(schema.len(), 60);
        let parsed = RelationSchema::parse(&schema.to_text()).unwrap();
        assert_eq!(parsed.hash(), schema.hash());
    }

    #[test]
    fn invalid_anchor_rejected() {
        // color regions only have a centroid anchor
        let text = "# scn-relation-schema v1\ndis r1 r1 start center 5\n";
        assert!(RelationSchema::parse(text).is_err());
        // empty distance band
        let text = "# scn-relation-schema v1\ndis l1 l2 center center 5 7\n";
        assert!(RelationSchema::parse(text).is_err());
    }
}
