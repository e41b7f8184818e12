//! Dataset loading, normalization and reduced training subsets.

mod gtsrb;
mod mnist;

pub use gtsrb::load_gtsrb;
pub use mnist::load_mnist;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, ScnError};
use crate::tensor::Tensor;

/// Ordered provenance record: source files, checksums, sampling seed.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Manifest {
    pub entries: Vec<(String, String)>,
}

impl Manifest {
    pub fn push(&mut self, key: &str, value: impl Into<String>) {
        self.entries.push((key.to_string(), value.into()));
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            out.push_str(k);
            out.push('=');
            out.push_str(v);
            out.push('\n');
        }
        out
    }
}

/// Immutable labeled image batch, pixels in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    /// `[N, C, H, W]`
    pub images: Tensor,
    pub labels: Vec<u8>,
    pub num_classes: usize,
    pub manifest: Manifest,
}

impl Dataset {
    pub fn new(
        name: String,
        images: Tensor,
        labels: Vec<u8>,
        num_classes: usize,
        manifest: Manifest,
    ) -> Result<Self> {
        let shape = images.shape();
        if shape.len() != 4 || shape[0] != labels.len() {
            return Err(ScnError::ShapeMismatch {
                op: "Dataset::new",
                detail: format!("images {:?} vs {} labels", shape, labels.len()),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= num_classes) {
            return Err(ScnError::InvalidArgument {
                op: "Dataset::new",
                detail: format!("label {} outside 0..{}", bad, num_classes),
            });
        }
        Ok(Dataset {
            name,
            images,
            labels,
            num_classes,
            manifest,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_dims(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    fn image_len(&self) -> usize {
        let (c, h, w) = self.image_dims();
        c * h * w
    }

    pub fn image_data(&self, index: usize) -> &[f64] {
        let n = self.image_len();
        &self.images.data()[index * n..(index + 1) * n]
    }

    /// Single image as a `[1, C, H, W]` tensor.
    pub fn image_tensor(&self, index: usize) -> Tensor {
        let (c, h, w) = self.image_dims();
        Tensor::from_raw(vec![1, c, h, w], self.image_data(index).to_vec())
    }

    /// Gathers a batch `[M, C, H, W]` in the order of `indices`.
    pub fn batch(&self, indices: &[usize]) -> Tensor {
        let (c, h, w) = self.image_dims();
        let n = self.image_len();
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            data.extend_from_slice(self.image_data(i));
        }
        Tensor::from_raw(vec![indices.len(), c, h, w], data)
    }

    pub fn label_histogram(&self) -> Vec<usize> {
        let mut hist = vec![0usize; self.num_classes];
        for &l in &self.labels {
            hist[l as usize] += 1;
        }
        hist
    }
}

/// Subset size, either absolute or a fraction of the parent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SampleSpec {
    Count(usize),
    Fraction(f64),
}

impl std::fmt::Display for SampleSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SampleSpec::Count(n) => write!(f, "count:{}", n),
            SampleSpec::Fraction(x) => write!(f, "fraction:{}", x),
        }
    }
}

/// Deterministic stratified sample. Per-class quotas follow the class
/// proportions (largest-remainder rounding); each class's members are
/// shuffled with the seeded generator and the selection is returned in
/// ascending original order. A fraction of exactly 1 (or the full count)
/// returns the dataset unchanged.
pub fn subsample(ds: &Dataset, spec: SampleSpec, seed: u64) -> Result<Dataset> {
    let total = ds.len();
    let count = match spec {
        SampleSpec::Count(n) => n,
        SampleSpec::Fraction(f) => {
            if !(0.0..=1.0).contains(&f) {
                return Err(ScnError::InvalidArgument {
                    op: "subsample",
                    detail: format!("fraction {} outside [0,1]", f),
                });
            }
            (f * total as f64).round() as usize
        }
    };
    if count > total {
        return Err(ScnError::InvalidArgument {
            op: "subsample",
            detail: format!("requested {} of {} items", count, total),
        });
    }
    if count == total {
        let mut out = ds.clone();
        out.manifest.push("subsample", format!("{} seed={} identity", spec, seed));
        return Ok(out);
    }

    // group indices per class, preserving order
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); ds.num_classes];
    for (i, &l) in ds.labels.iter().enumerate() {
        per_class[l as usize].push(i);
    }
    // largest-remainder quotas
    let mut quotas: Vec<usize> = Vec::with_capacity(ds.num_classes);
    let mut remainders: Vec<(f64, usize)> = Vec::with_capacity(ds.num_classes);
    let mut assigned = 0usize;
    for (class, members) in per_class.iter().enumerate() {
        let exact = count as f64 * members.len() as f64 / total as f64;
        let base = exact.floor() as usize;
        quotas.push(base);
        assigned += base;
        remainders.push((exact - base as f64, class));
    }
    remainders.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.1.cmp(&b.1))
    });
    for &(_, class) in remainders.iter().take(count - assigned) {
        quotas[class] += 1;
    }
    for (class, (&quota, members)) in quotas.iter().zip(&per_class).enumerate() {
        if quota == 0 && !members.is_empty() {
            return Err(ScnError::InvalidArgument {
                op: "subsample",
                detail: format!("class {} would become empty at {}", class, spec),
            });
        }
        if quota > members.len() {
            return Err(ScnError::InvalidArgument {
                op: "subsample",
                detail: format!(
                    "class {} has {} members, quota {}",
                    class,
                    members.len(),
                    quota
                ),
            });
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut selected: Vec<usize> = Vec::with_capacity(count);
    for (quota, members) in quotas.iter().zip(per_class.iter()) {
        let mut members = members.clone();
        members.shuffle(&mut rng);
        selected.extend_from_slice(&members[..*quota]);
    }
    selected.sort_unstable();

    let images = ds.batch(&selected);
    let labels: Vec<u8> = selected.iter().map(|&i| ds.labels[i]).collect();
    let mut manifest = ds.manifest.clone();
    manifest.push("subsample", format!("{} seed={}", spec, seed));
    Dataset::new(
        format!("{}[{}]", ds.name, spec),
        images,
        labels,
        ds.num_classes,
        manifest,
    )
}
