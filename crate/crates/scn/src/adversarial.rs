//! Sign-gradient attacks on the capsule branch and the robustness
//! evaluation harness.
//!
//! Attacks are white-box against the differentiable branch only: the
//! gradient is taken through the capsule margin loss. The tree pipeline
//! sees the perturbed pixels but contributes no gradient.

use std::path::Path;

use rayon::prelude::*;

use crate::capsnet::CapsNetModel;
use crate::data::Dataset;
use crate::error::{Result, ScnError};
use crate::tensor::{Tape, Tensor};
use crate::training::{fuse, margin_loss_on_tape, onehot_tensor, FusionWeights};
use crate::tree::argmax;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttackMethod {
    Fgsm,
    Bim,
}

impl AttackMethod {
    pub fn name(self) -> &'static str {
        match self {
            AttackMethod::Fgsm => "fgsm",
            AttackMethod::Bim => "bim",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fgsm" => Some(AttackMethod::Fgsm),
            "bim" => Some(AttackMethod::Bim),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttackConfig {
    pub method: AttackMethod,
    /// Perturbation budget on the [0,1] pixel scale.
    pub eps: f64,
    pub iterations: usize,
    pub step: f64,
}

impl AttackConfig {
    pub fn fgsm(eps: f64) -> Result<Self> {
        AttackConfig {
            method: AttackMethod::Fgsm,
            eps,
            iterations: 1,
            step: eps,
        }
        .validated()
    }

    /// Step size defaults to `eps / iterations`.
    pub fn bim(eps: f64, iterations: usize) -> Result<Self> {
        AttackConfig {
            method: AttackMethod::Bim,
            eps,
            iterations,
            step: if iterations > 0 { eps / iterations as f64 } else { eps },
        }
        .validated()
    }

    pub fn validated(self) -> Result<Self> {
        if self.eps < 0.0 {
            return Err(ScnError::InvalidArgument {
                op: "AttackConfig",
                detail: "eps must be non-negative".into(),
            });
        }
        if self.iterations == 0 {
            return Err(ScnError::InvalidArgument {
                op: "AttackConfig",
                detail: "iterations must be >= 1".into(),
            });
        }
        if self.step > self.eps {
            return Err(ScnError::InvalidArgument {
                op: "AttackConfig",
                detail: format!("step {} exceeds eps {}", self.step, self.eps),
            });
        }
        Ok(self)
    }
}

/// Gradient of the capsule-branch margin loss w.r.t. a batch of images.
/// Attaching or detaching the tree cannot change this value: the tree
/// never records onto the tape.
pub fn input_gradient(model: &CapsNetModel, images: &Tensor, labels: &[u8]) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let vars = model.register(&mut tape, false);
    let iv = tape.input(images.clone().with_grad());
    let (q, _) = model.forward(&mut tape, &vars, iv)?;
    let onehot = onehot_tensor(labels, model.config.num_classes);
    let loss = margin_loss_on_tape(&mut tape, q, &onehot)?;
    let grads = tape.backward(loss)?;
    Ok(grads.get(iv).expect("input registered with grad").to_vec())
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Single-step attack: `adv = clip_[0,1](x + eps * sign(grad))`.
/// `eps = 0` returns the clean image bit for bit.
pub fn fgsm(model: &CapsNetModel, images: &Tensor, labels: &[u8], eps: f64) -> Result<Tensor> {
    if eps == 0.0 {
        return Ok(images.clone());
    }
    let grad = input_gradient(model, images, labels)?;
    let data: Vec<f64> = images
        .data()
        .iter()
        .zip(&grad)
        .map(|(&x, &g)| (x + eps * sign(g)).clamp(0.0, 1.0))
        .collect();
    Tensor::new(images.shape().to_vec(), data)
}

/// Iterated attack. Each step moves by `step * sign(grad)`, clips to
/// `[0,1]`, then projects back into the eps-ball of the clean image.
pub fn bim(
    model: &CapsNetModel,
    images: &Tensor,
    labels: &[u8],
    eps: f64,
    iterations: usize,
    step: f64,
) -> Result<Tensor> {
    if eps == 0.0 {
        return Ok(images.clone());
    }
    if iterations == 0 {
        return Err(ScnError::InvalidArgument {
            op: "bim",
            detail: "iterations must be >= 1".into(),
        });
    }
    if step > eps {
        return Err(ScnError::InvalidArgument {
            op: "bim",
            detail: format!("step {} exceeds eps {}", step, eps),
        });
    }
    let clean = images.data();
    let mut current = images.clone();
    for _ in 0..iterations {
        let grad = input_gradient(model, &current, labels)?;
        let data: Vec<f64> = current
            .data()
            .iter()
            .zip(&grad)
            .zip(clean)
            .map(|((&x, &g), &x0)| {
                let moved = (x + step * sign(g)).clamp(0.0, 1.0);
                moved.clamp(x0 - eps, x0 + eps)
            })
            .collect();
        current = Tensor::new(current.shape().to_vec(), data)?;
    }
    Ok(current)
}

pub fn attack(
    model: &CapsNetModel,
    images: &Tensor,
    labels: &[u8],
    config: &AttackConfig,
) -> Result<Tensor> {
    match config.method {
        AttackMethod::Fgsm => fgsm(model, images, labels, config.eps),
        AttackMethod::Bim => bim(
            model,
            images,
            labels,
            config.eps,
            config.iterations,
            config.step,
        ),
    }
}

/// A generated adversarial test set with its provenance.
#[derive(Debug, Clone)]
pub struct AdversarialSet {
    pub config: AttackConfig,
    pub source_model: String,
    pub indices: Vec<usize>,
    pub labels: Vec<u8>,
    /// `[N, C, H, W]` perturbed pixels, still in `[0, 1]`.
    pub images: Tensor,
}

const ATTACK_CHUNK: usize = 50;

/// Attacks every listed image of the dataset (parallel over fixed-size
/// chunks; the per-image results do not depend on the chunking because
/// `sign` erases the batch-mean scale).
pub fn generate_adversarial_set(
    model: &CapsNetModel,
    dataset: &Dataset,
    indices: &[usize],
    config: &AttackConfig,
    source_model: &str,
) -> Result<AdversarialSet> {
    let chunks: Vec<Result<Tensor>> = indices
        .par_chunks(ATTACK_CHUNK)
        .map(|chunk| {
            let images = dataset.batch(chunk);
            let labels: Vec<u8> = chunk.iter().map(|&i| dataset.labels[i]).collect();
            attack(model, &images, &labels, config)
        })
        .collect();
    let (c, h, w) = dataset.image_dims();
    let mut data = Vec::with_capacity(indices.len() * c * h * w);
    for chunk in chunks {
        data.extend_from_slice(chunk?.data());
    }
    let images = Tensor::new(vec![indices.len(), c, h, w], data)?;
    let set = AdversarialSet {
        config: *config,
        source_model: source_model.to_string(),
        indices: indices.to_vec(),
        labels: indices.iter().map(|&i| dataset.labels[i]).collect(),
        images,
    };
    set.check_budget(dataset)?;
    Ok(set)
}

impl AdversarialSet {
    /// Verifies `max |adv - clean| <= eps` and pixel clipping for every
    /// sample.
    pub fn check_budget(&self, clean: &Dataset) -> Result<()> {
        let n = self.images.len() / self.indices.len().max(1);
        for (row, &idx) in self.indices.iter().enumerate() {
            let adv = &self.images.data()[row * n..(row + 1) * n];
            let orig = clean.image_data(idx);
            for (a, o) in adv.iter().zip(orig) {
                if !(0.0..=1.0).contains(a) {
                    return Err(ScnError::InvalidArgument {
                        op: "AdversarialSet",
                        detail: format!("pixel {} escaped [0,1]", a),
                    });
                }
                if (a - o).abs() > self.config.eps + 1e-9 {
                    return Err(ScnError::InvalidArgument {
                        op: "AdversarialSet",
                        detail: format!(
                            "perturbation {} exceeds eps {}",
                            (a - o).abs(),
                            self.config.eps
                        ),
                    });
                }
            }
        }
        Ok(())
    }

    /// Writes `manifest.csv` (`index,label,method,eps` rows, provenance in
    /// `#` comments) and `images.f64le` (raw little-endian f64 in the
    /// dataset's `[N, C, H, W]` layout).
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| ScnError::io(dir, e))?;
        let shape = self.images.shape();
        let mut manifest = String::new();
        manifest.push_str(&format!("# model {}\n", self.source_model));
        manifest.push_str(&format!(
            "# dims {} {} {}\n# iterations {}\n# step {}\n",
            shape[1], shape[2], shape[3], self.config.iterations, self.config.step
        ));
        manifest.push_str("index,label,method,eps\n");
        for (i, &idx) in self.indices.iter().enumerate() {
            manifest.push_str(&format!(
                "{},{},{},{}\n",
                idx,
                self.labels[i],
                self.config.method.name(),
                self.config.eps
            ));
        }
        let mpath = dir.join("manifest.csv");
        std::fs::write(&mpath, manifest).map_err(|e| ScnError::io(&mpath, e))?;
        let mut blob = Vec::with_capacity(self.images.len() * 8);
        for v in self.images.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        let bpath = dir.join("images.f64le");
        std::fs::write(&bpath, blob).map_err(|e| ScnError::io(&bpath, e))?;
        Ok(())
    }
}

/// One robustness table row.
#[derive(Debug, Clone)]
pub struct RobustnessRow {
    pub model_id: String,
    pub method: String,
    pub eps: f64,
    pub acc_tree: f64,
    pub acc_caps: f64,
    pub acc_scn: f64,
}

/// Attack grid matching the evaluation protocol.
#[derive(Debug, Clone)]
pub struct AttackGrid {
    pub methods: Vec<AttackMethod>,
    pub eps_values: Vec<f64>,
    pub bim_iterations: usize,
}

impl AttackGrid {
    /// Digits: eps 0.1 .. 0.3, two-step iterated attack.
    pub fn mnist() -> Self {
        AttackGrid {
            methods: vec![AttackMethod::Fgsm, AttackMethod::Bim],
            eps_values: vec![0.1, 0.15, 0.2, 0.25, 0.3],
            bim_iterations: 2,
        }
    }

    /// Traffic signs: eps 0.01 .. 0.05, two-step iterated attack.
    pub fn gtsrb() -> Self {
        AttackGrid {
            methods: vec![AttackMethod::Fgsm, AttackMethod::Bim],
            eps_values: vec![0.01, 0.02, 0.03, 0.04, 0.05],
            bim_iterations: 2,
        }
    }

    pub fn configs(&self) -> Result<Vec<AttackConfig>> {
        let mut out = Vec::new();
        for &m in &self.methods {
            for &eps in &self.eps_values {
                out.push(match m {
                    AttackMethod::Fgsm => AttackConfig::fgsm(eps)?,
                    AttackMethod::Bim => AttackConfig::bim(eps, self.bim_iterations)?,
                });
            }
        }
        Ok(out)
    }
}

/// Full robustness sweep. For each model and grid point: generate the
/// white-box adversarial set against that model's capsule branch, rerun
/// the tree pipeline on the perturbed pixels, and measure all three
/// accuracies. `tree_probs_for` maps perturbed images to tree
/// probabilities.
pub fn evaluate_robustness<F>(
    models: &[(String, &CapsNetModel)],
    dataset: &Dataset,
    indices: &[usize],
    fusion: &FusionWeights,
    grid: &AttackGrid,
    tree_probs_for: F,
) -> Result<Vec<RobustnessRow>>
where
    F: Fn(&Tensor) -> Result<Vec<Vec<f64>>> + Sync,
{
    let mut rows = Vec::new();
    for (model_id, model) in models {
        for config in grid.configs()? {
            let set = generate_adversarial_set(model, dataset, indices, &config, model_id)?;
            let row = evaluate_set(model, &set, fusion, &tree_probs_for)?;
            rows.push(RobustnessRow {
                model_id: model_id.clone(),
                method: config.method.name().to_string(),
                eps: config.eps,
                acc_tree: row.0,
                acc_caps: row.1,
                acc_scn: row.2,
            });
        }
    }
    Ok(rows)
}

/// Accuracies (tree, caps, fused) of a model on an adversarial set.
pub fn evaluate_set<F>(
    model: &CapsNetModel,
    set: &AdversarialSet,
    fusion: &FusionWeights,
    tree_probs_for: &F,
) -> Result<(f64, f64, f64)>
where
    F: Fn(&Tensor) -> Result<Vec<Vec<f64>>> + Sync,
{
    let n = set.indices.len();
    let classes = model.config.num_classes;
    let tree_probs = tree_probs_for(&set.images)?;
    if tree_probs.len() != n {
        return Err(ScnError::ShapeMismatch {
            op: "evaluate_set",
            detail: format!("{} tree probabilities for {} images", tree_probs.len(), n),
        });
    }
    let shape = set.images.shape();
    let per_image = shape[1] * shape[2] * shape[3];
    let counts: Vec<Result<(usize, usize, usize)>> = (0..n)
        .collect::<Vec<_>>()
        .par_chunks(ATTACK_CHUNK)
        .map(|chunk| {
            let mut data = Vec::with_capacity(chunk.len() * per_image);
            for &i in chunk {
                data.extend_from_slice(
                    &set.images.data()[i * per_image..(i + 1) * per_image],
                );
            }
            let images =
                Tensor::from_raw(vec![chunk.len(), shape[1], shape[2], shape[3]], data);
            let q = model.forward_values(&images)?;
            let mut c = (0usize, 0usize, 0usize);
            for (row, &i) in chunk.iter().enumerate() {
                let truth = set.labels[i] as usize;
                let qrow = &q[row * classes..(row + 1) * classes];
                let o = fuse(&tree_probs[i], qrow, fusion)?;
                if argmax(&tree_probs[i]) == truth {
                    c.0 += 1;
                }
                if argmax(qrow) == truth {
                    c.1 += 1;
                }
                if argmax(&o) == truth {
                    c.2 += 1;
                }
            }
            Ok(c)
        })
        .collect();
    let mut total = (0usize, 0usize, 0usize);
    for c in counts {
        let c = c?;
        total.0 += c.0;
        total.1 += c.1;
        total.2 += c.2;
    }
    Ok((
        total.0 as f64 / n as f64,
        total.1 as f64 / n as f64,
        total.2 as f64 / n as f64,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::capsnet::CapsNetConfig;
    use crate::data::Manifest;
    use rand::Rng as _;
    use rand::SeedableRng as _;

    fn toy_model(seed: u64) -> CapsNetModel {
        CapsNetModel::init(CapsNetConfig::toy(17, 2, 1, 3).unwrap(), seed)
    }

    fn toy_images(n: usize, seed: u64) -> Tensor {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..n * 17 * 17).map(|_| rng.gen_range(0.0..1.0)).collect();
        Tensor::new(vec![n, 1, 17, 17], data).unwrap()
    }

    #[test]
    fn zero_eps_is_bitwise_clean() {
        let model = toy_model(1);
        let images = toy_images(2, 7);
        let adv = fgsm(&model, &images, &[0, 1], 0.0).unwrap();
        for (a, c) in adv.data().iter().zip(images.data()) {
            assert_eq!(a.to_bits(), c.to_bits());
        }
    }

    #[test]
    fn perturbation_budget_holds() {
        let model = toy_model(2);
        let images = toy_images(4, 9);
        let labels = [0, 1, 2, 0];
        for &eps in &[0.05, 0.1, 0.3] {
            let adv = fgsm(&model, &images, &labels, eps).unwrap();
            for (a, c) in adv.data().iter().zip(images.data()) {
                assert!((a - c).abs() <= eps + 1e-12);
                assert!((0.0..=1.0).contains(a));
            }
            let adv = bim(&model, &images, &labels, eps, 2, eps / 2.0).unwrap();
            for (a, c) in adv.data().iter().zip(images.data()) {
                assert!((a - c).abs() <= eps + 1e-12);
                assert!((0.0..=1.0).contains(a));
            }
        }
    }

    #[test]
    fn bim_single_full_step_equals_fgsm_bitwise() {
        let model = toy_model(3);
        let images = toy_images(3, 11);
        let labels = [1, 2, 0];
        let eps = 0.2;
        let a = fgsm(&model, &images, &labels, eps).unwrap();
        let b = bim(&model, &images, &labels, eps, 1, eps).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn step_larger_than_eps_rejected() {
        let model = toy_model(4);
        let images = toy_images(1, 1);
        assert!(bim(&model, &images, &[0], 0.1, 1, 0.2).is_err());
        assert!(AttackConfig::bim(0.1, 2).unwrap().step <= 0.1);
    }

    #[test]
    fn gradient_identical_with_and_without_tree_attached() {
        let model = toy_model(5);
        let images = toy_images(2, 13);
        let labels = [0, 2];
        let g1 = input_gradient(&model, &images, &labels).unwrap();
        // "attach" the tree: evaluate tree probabilities and fusion on the
        // side, then recompute the gradient
        let tree_probs = vec![vec![0.4, 0.3, 0.3], vec![0.2, 0.5, 0.3]];
        let q = model.forward_values(&images).unwrap();
        let _o = fuse(&tree_probs[0], &q[0..3], &FusionWeights::default()).unwrap();
        let g2 = input_gradient(&model, &images, &labels).unwrap();
        for (a, b) in g1.iter().zip(&g2) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn adversarial_set_round_trips_and_validates() {
        let model = toy_model(6);
        let images = toy_images(4, 17);
        let ds = Dataset::new(
            "toy".into(),
            images,
            vec![0, 1, 2, 0],
            3,
            Manifest::default(),
        )
        .unwrap();
        let cfg = AttackConfig::fgsm(0.1).unwrap();
        let set =
            generate_adversarial_set(&model, &ds, &[0, 1, 2, 3], &cfg, "toy-model").unwrap();
        set.check_budget(&ds).unwrap();
        let dir = tempfile::tempdir().unwrap();
        set.save(dir.path()).unwrap();
        let manifest = std::fs::read_to_string(dir.path().join("manifest.csv")).unwrap();
        assert!(manifest.contains("index,label,method,eps"));
        assert!(manifest.contains("fgsm,0.1"));
        let blob = std::fs::read(dir.path().join("images.f64le")).unwrap();
        assert_eq!(blob.len(), 4 * 17 * 17 * 8);
    }

    #[test]
    fn grid_shapes() {
        assert_eq!(AttackGrid::mnist().configs().unwrap().len(), 10);
        assert_eq!(AttackGrid::gtsrb().configs().unwrap().len(), 10);
    }
}
