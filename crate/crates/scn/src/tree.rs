//! The knowledge-driven branch: per-class count templates over relation
//! vectors, matching-degree scoring and softmax classification. Templates
//! are built once from labeled samples and never change afterwards.

use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Result, ScnError};
use crate::relation::RelationVector;

const DICT_MAGIC: &[u8; 4] = b"SCND";
const DICT_VERSION: u32 = 1;

/// Per-class accumulated counts: element i is the number of training
/// samples of this class whose relation bit i was set.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticTemplate {
    pub class_id: usize,
    pub counts: Vec<u32>,
    pub num_samples: u32,
    pub schema_hash: String,
}

impl SemanticTemplate {
    pub fn l1(&self) -> u64 {
        self.counts.iter().map(|&c| c as u64).sum()
    }
}

/// All templates for one schema, class ids `0..num_classes` complete.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticDictionary {
    pub schema_hash: String,
    pub templates: Vec<SemanticTemplate>,
    /// Named levels for presentation only; classification runs on the
    /// flat primitive-to-class path.
    pub hierarchy: Vec<String>,
}

/// Matching degrees and their softmax probabilities for one input.
#[derive(Debug, Clone)]
pub struct TreePrediction {
    pub degrees: Vec<f64>,
    pub probabilities: Vec<f64>,
}

impl TreePrediction {
    /// Argmax with smallest-index tie-break.
    pub fn predicted_class(&self) -> usize {
        argmax(&self.probabilities)
    }
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Elementwise sum of the relation vectors per class.
pub fn build_templates(
    samples: &[(RelationVector, usize)],
    num_classes: usize,
) -> Result<SemanticDictionary> {
    if samples.is_empty() {
        return Err(ScnError::InvalidArgument {
            op: "build_templates",
            detail: "no samples".into(),
        });
    }
    let schema_hash = samples[0].0.schema_hash.clone();
    let alpha = samples[0].0.len();
    let mut templates: Vec<SemanticTemplate> = (0..num_classes)
        .map(|class_id| SemanticTemplate {
            class_id,
            counts: vec![0; alpha],
            num_samples: 0,
            schema_hash: schema_hash.clone(),
        })
        .collect();
    for (vector, label) in samples {
        if vector.schema_hash != schema_hash {
            return Err(ScnError::SchemaHashMismatch {
                expected: schema_hash,
                found: vector.schema_hash.clone(),
            });
        }
        if *label >= num_classes {
            return Err(ScnError::InvalidArgument {
                op: "build_templates",
                detail: format!("label {} outside 0..{}", label, num_classes),
            });
        }
        add_sample(&mut templates[*label], vector);
    }
    for t in &templates {
        if t.num_samples == 0 {
            return Err(ScnError::EmptyClass(t.class_id));
        }
    }
    Ok(SemanticDictionary {
        schema_hash,
        templates,
        hierarchy: Vec::new(),
    })
}

/// Incremental accumulation; summing is associative, so adding samples
/// one by one equals a batch rebuild.
pub fn add_sample(template: &mut SemanticTemplate, vector: &RelationVector) {
    debug_assert_eq!(template.counts.len(), vector.len());
    for (c, b) in template.counts.iter_mut().zip(&vector.bits) {
        *c += *b as u32;
    }
    template.num_samples += 1;
}

/// Matching degree `d = (T . R) / |T|_1`, in `[0, 1]` for binary `R`.
/// An all-zero template scores 0 (an untrainable class never wins).
pub fn matching_degree(vector: &RelationVector, template: &SemanticTemplate) -> Result<f64> {
    if vector.schema_hash != template.schema_hash {
        return Err(ScnError::SchemaHashMismatch {
            expected: template.schema_hash.clone(),
            found: vector.schema_hash.clone(),
        });
    }
    let l1 = template.l1();
    if l1 == 0 {
        return Ok(0.0);
    }
    let dot: u64 = template
        .counts
        .iter()
        .zip(&vector.bits)
        .map(|(&c, &b)| c as u64 * b as u64)
        .sum();
    Ok(dot as f64 / l1 as f64)
}

/// Degrees for every class followed by a stable softmax.
pub fn classify(vector: &RelationVector, dict: &SemanticDictionary) -> Result<TreePrediction> {
    if vector.schema_hash != dict.schema_hash {
        return Err(ScnError::SchemaHashMismatch {
            expected: dict.schema_hash.clone(),
            found: vector.schema_hash.clone(),
        });
    }
    let degrees: Vec<f64> = dict
        .templates
        .iter()
        .map(|t| matching_degree(vector, t))
        .collect::<Result<_>>()?;
    let probabilities = softmax(&degrees);
    Ok(TreePrediction {
        degrees,
        probabilities,
    })
}

/// Max-subtracted softmax over a plain slice.
pub fn softmax(values: &[f64]) -> Vec<f64> {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = values.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

impl SemanticDictionary {
    pub fn num_classes(&self) -> usize {
        self.templates.len()
    }

    pub fn alpha(&self) -> usize {
        self.templates.first().map(|t| t.counts.len()).unwrap_or(0)
    }

    /// Byte layout (all integers little-endian u32):
    /// magic `SCND`, version, alpha, num_classes, hash length, hash bytes,
    /// then per class `K_j` followed by `alpha` counts, then a SHA-256 of
    /// everything preceding.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut body: Vec<u8> = Vec::new();
        body.extend_from_slice(DICT_MAGIC);
        body.extend_from_slice(&DICT_VERSION.to_le_bytes());
        body.extend_from_slice(&(self.alpha() as u32).to_le_bytes());
        body.extend_from_slice(&(self.num_classes() as u32).to_le_bytes());
        let hash_bytes = self.schema_hash.as_bytes();
        body.extend_from_slice(&(hash_bytes.len() as u32).to_le_bytes());
        body.extend_from_slice(hash_bytes);
        for t in &self.templates {
            body.extend_from_slice(&t.num_samples.to_le_bytes());
            for c in &t.counts {
                body.extend_from_slice(&c.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&body);
        let mut file = std::fs::File::create(path).map_err(|e| ScnError::io(path, e))?;
        file.write_all(&body).map_err(|e| ScnError::io(path, e))?;
        file.write_all(&digest).map_err(|e| ScnError::io(path, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| ScnError::io(path, e))?;
        let corrupt = |detail: &str| ScnError::Corrupt {
            path: path.to_path_buf(),
            detail: detail.into(),
        };
        if bytes.len() < 4 + 4 + 4 + 4 + 4 + 32 {
            return Err(corrupt("file too short"));
        }
        let (body, checksum) = bytes.split_at(bytes.len() - 32);
        let digest = Sha256::digest(body);
        if digest.as_slice() != checksum {
            return Err(corrupt("checksum mismatch"));
        }
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            if *pos + n > body.len() {
                return Err(corrupt("truncated"));
            }
            let s = &body[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        let read_u32 = |pos: &mut usize| -> Result<u32> {
            let s = take(pos, 4)?;
            Ok(u32::from_le_bytes([s[0], s[1], s[2], s[3]]))
        };
        if take(&mut pos, 4)? != DICT_MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = read_u32(&mut pos)?;
        if version != DICT_VERSION {
            return Err(corrupt(&format!("unsupported version {}", version)));
        }
        let alpha = read_u32(&mut pos)? as usize;
        let num_classes = read_u32(&mut pos)? as usize;
        let hash_len = read_u32(&mut pos)? as usize;
        let schema_hash = String::from_utf8(take(&mut pos, hash_len)?.to_vec())
            .map_err(|_| corrupt("schema hash is not utf-8"))?;
        let mut templates = Vec::with_capacity(num_classes);
        for class_id in 0..num_classes {
            let num_samples = read_u32(&mut pos)?;
            let mut counts = Vec::with_capacity(alpha);
            for _ in 0..alpha {
                counts.push(read_u32(&mut pos)?);
            }
            for &c in &counts {
                if c > num_samples {
                    return Err(corrupt(&format!(
                        "class {}: count {} exceeds sample total {}",
                        class_id, c, num_samples
                    )));
                }
            }
            templates.push(SemanticTemplate {
                class_id,
                counts,
                num_samples,
                schema_hash: schema_hash.clone(),
            });
        }
        if pos != body.len() {
            return Err(corrupt("trailing bytes"));
        }
        Ok(SemanticDictionary {
            schema_hash,
            templates,
            hierarchy: Vec::new(),
        })
    }

    /// Load and refuse dictionaries built under a different schema.
    pub fn load_checked(path: &Path, expected_schema_hash: &str) -> Result<Self> {
        let dict = Self::load(path)?;
        if dict.schema_hash != expected_schema_hash {
            return Err(ScnError::SchemaHashMismatch {
                expected: expected_schema_hash.to_string(),
                found: dict.schema_hash,
            });
        }
        Ok(dict)
    }
}
