//! Fusion of the two branches, margin losses, the adaptive total loss,
//! and the training loop that updates only the capsule branch.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::capsnet::CapsNetModel;
use crate::data::Dataset;
use crate::error::{Result, ScnError};
use crate::relation::{compute_relation_vector, RelationSchema, RelationVector};
use crate::tensor::{Tape, Tensor, Var};
use crate::tree::{argmax, classify, SemanticDictionary};
use crate::vision::{detect_primitives_mnist, ColorSegConfig, MnistPipelineConfig, TemplateBank};

/// Convex fusion coefficients for tree and capsule probabilities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionWeights {
    pub beta1: f64,
    pub beta2: f64,
}

impl Default for FusionWeights {
    fn default() -> Self {
        FusionWeights {
            beta1: 0.6,
            beta2: 0.4,
        }
    }
}

impl FusionWeights {
    pub fn new(beta1: f64, beta2: f64) -> Result<Self> {
        if beta1 < 0.0 || beta2 < 0.0 || (beta1 + beta2 - 1.0).abs() > 1e-9 {
            return Err(ScnError::InvalidArgument {
                op: "FusionWeights::new",
                detail: format!("coefficients must be non-negative and sum to 1, got {} + {}", beta1, beta2),
            });
        }
        Ok(FusionWeights { beta1, beta2 })
    }
}

/// Per-batch loss summary.
#[derive(Debug, Clone, Copy)]
pub struct LossReport {
    pub l_st: f64,
    pub l_caps: f64,
    pub l_scn: f64,
    pub tau: f64,
    pub weight: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Multiplicative decay applied per epoch.
    pub lr_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Stop after the first epoch whose fused eval accuracy reaches this.
    pub stop_at_fused_acc: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            epochs: 10,
            learning_rate: 1e-3,
            lr_decay: 0.96,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            stop_at_fused_acc: None,
        }
    }
}

/// Per-class convex combination `o_j = beta1 * p_j + beta2 * q_j`.
pub fn fuse(p: &[f64], q: &[f64], w: &FusionWeights) -> Result<Vec<f64>> {
    if p.len() != q.len() {
        return Err(ScnError::ShapeMismatch {
            op: "fuse",
            detail: format!("{} tree and {} capsule entries", p.len(), q.len()),
        });
    }
    Ok(p.iter()
        .zip(q)
        .map(|(pv, qv)| w.beta1 * pv + w.beta2 * qv)
        .collect())
}

/// Margin loss of one prediction vector against a one-hot target:
/// `sum_j H_j max(0, 0.9 - x_j)^2 + 0.5 (1 - H_j) max(0, x_j - 0.1)^2`.
pub fn margin_loss(probs: &[f64], onehot: &[f64]) -> Result<f64> {
    if probs.len() != onehot.len() {
        return Err(ScnError::ShapeMismatch {
            op: "margin_loss",
            detail: format!("{} probs vs {} targets", probs.len(), onehot.len()),
        });
    }
    let ones = onehot.iter().filter(|&&h| h == 1.0).count();
    if ones != 1 || onehot.iter().any(|&h| h != 0.0 && h != 1.0) {
        return Err(ScnError::InvalidArgument {
            op: "margin_loss",
            detail: "target must be one-hot".into(),
        });
    }
    Ok(margin_loss_unchecked(probs, onehot))
}

fn margin_loss_unchecked(probs: &[f64], onehot: &[f64]) -> f64 {
    probs
        .iter()
        .zip(onehot)
        .map(|(&x, &h)| {
            let pos = (0.9 - x).max(0.0);
            let neg = (x - 0.1).max(0.0);
            h * pos * pos + 0.5 * (1.0 - h) * neg * neg
        })
        .sum()
}

/// Margin loss averaged over a batch laid out as `M` rows of `N` values.
pub fn margin_batch(rows: &[f64], labels: &[u8], num_classes: usize) -> f64 {
    let m = labels.len();
    let mut total = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        let row = &rows[i * num_classes..(i + 1) * num_classes];
        for (j, &x) in row.iter().enumerate() {
            if j == label as usize {
                let pos = (0.9 - x).max(0.0);
                total += pos * pos;
            } else {
                let neg = (x - 0.1).max(0.0);
                total += 0.5 * neg * neg;
            }
        }
    }
    total / m as f64
}

/// Batch losses for the tree, capsule and fused predictions (each the
/// batch mean of the per-sample margin loss).
pub fn batch_losses(
    tree_p: &[f64],
    caps_q: &[f64],
    fused_o: &[f64],
    labels: &[u8],
    num_classes: usize,
) -> (f64, f64, f64) {
    (
        margin_batch(tree_p, labels, num_classes),
        margin_batch(caps_q, labels, num_classes),
        margin_batch(fused_o, labels, num_classes),
    )
}

/// Adaptive total loss: `tau = L_st / (L_st + L_caps)` (0.5 when both are
/// zero), `w = 1 / (1 + exp(100 (0.5 - tau)))`, `L = w * L_scn`. The
/// weight is treated as a plain scalar; gradients flow only through
/// `L_scn`.
pub fn total_loss(l_st: f64, l_caps: f64, l_scn: f64) -> Result<(f64, f64, f64)> {
    if l_st < 0.0 || l_caps < 0.0 {
        return Err(ScnError::InvalidArgument {
            op: "total_loss",
            detail: "margin losses are non-negative".into(),
        });
    }
    let tau = if l_st + l_caps == 0.0 {
        0.5
    } else {
        l_st / (l_st + l_caps)
    };
    let weight = 1.0 / (1.0 + (100.0 * (0.5 - tau)).exp());
    Ok((weight * l_scn, tau, weight))
}

/// One-hot rows `[M, N]` for a label batch.
pub fn onehot_tensor(labels: &[u8], num_classes: usize) -> Tensor {
    let mut data = vec![0.0; labels.len() * num_classes];
    for (i, &l) in labels.iter().enumerate() {
        data[i * num_classes + l as usize] = 1.0;
    }
    Tensor::from_raw(vec![labels.len(), num_classes], data)
}

/// Margin loss composite on the tape: scalar mean over the batch.
pub fn margin_loss_on_tape(tape: &mut Tape, x: Var, onehot: &Tensor) -> Result<Var> {
    let m = onehot.shape()[0] as f64;
    let h = tape.constant(onehot.clone());
    let hc_data: Vec<f64> = onehot.data().iter().map(|&v| 0.5 * (1.0 - v)).collect();
    let hc = tape.constant(Tensor::from_raw(onehot.shape().to_vec(), hc_data));

    let pos = tape.affine(x, -1.0, 0.9);
    let pos = tape.relu(pos);
    let pos2 = tape.mul(pos, pos)?;
    let pos_term = tape.mul(pos2, h)?;

    let neg = tape.affine(x, 1.0, -0.1);
    let neg = tape.relu(neg);
    let neg2 = tape.mul(neg, neg)?;
    let neg_term = tape.mul(neg2, hc)?;

    let total = tape.add(pos_term, neg_term)?;
    let total = tape.sum(total);
    Ok(tape.scale(total, 1.0 / m))
}

/// Adam state for the five parameter tensors.
pub struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(model: &CapsNetModel, cfg: &TrainConfig) -> Self {
        let sizes: Vec<usize> = model.parameters().iter().map(|t| t.len()).collect();
        Adam {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
        }
    }

    pub fn step(&mut self, model: &mut CapsNetModel, grads: &[Vec<f64>; 5], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (idx, param) in model.parameters_mut().into_iter().enumerate() {
            let g = &grads[idx];
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            for ((pv, (mv, vv)), &gv) in param
                .data_mut()
                .iter_mut()
                .zip(m.iter_mut().zip(v.iter_mut()))
                .zip(g.iter())
            {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let mh = *mv / bc1;
                let vh = *vv / bc2;
                *pv -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

/// One optimization step over a batch. Returns the loss report; the tree
/// probabilities enter as constants, so no gradient reaches the tree.
pub fn train_step(
    model: &mut CapsNetModel,
    adam: &mut Adam,
    images: Tensor,
    tree_p: Tensor,
    labels: &[u8],
    fusion: &FusionWeights,
    lr: f64,
) -> Result<LossReport> {
    let n = model.config.num_classes;
    let mut tape = Tape::new();
    let vars = model.register(&mut tape, true);
    let images = tape.input(images);
    let (q, _) = model.forward(&mut tape, &vars, images)?;
    let p = tape.constant(tree_p);
    let p_scaled = tape.scale(p, fusion.beta1);
    let q_scaled = tape.scale(q, fusion.beta2);
    let o = tape.add(p_scaled, q_scaled)?;

    let onehot = onehot_tensor(labels, n);
    let l_scn_var = margin_loss_on_tape(&mut tape, o, &onehot)?;
    let l_scn = tape.value(l_scn_var).item();
    let l_caps = margin_batch(tape.value(q).data(), labels, n);
    let l_st = margin_batch(tape.value(p).data(), labels, n);
    let (total, tau, weight) = total_loss(l_st, l_caps, l_scn)?;

    let loss_var = tape.scale(l_scn_var, weight);
    let grads = tape.backward(loss_var)?;
    let collected: [Vec<f64>; 5] = [
        grads.get(vars.conv1_kernels).unwrap().to_vec(),
        grads.get(vars.conv1_bias).unwrap().to_vec(),
        grads.get(vars.primary_kernels).unwrap().to_vec(),
        grads.get(vars.primary_bias).unwrap().to_vec(),
        grads.get(vars.digit_weights).unwrap().to_vec(),
    ];
    adam.step(model, &collected, lr);

    Ok(LossReport {
        l_st,
        l_caps,
        l_scn,
        tau,
        weight,
        total,
    })
}

/// Mean loss statistics and evaluation accuracies for one epoch.
#[derive(Debug, Clone)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: LossReport,
    pub acc_tree: f64,
    pub acc_caps: f64,
    pub acc_scn: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
}

/// Evaluation data: a dataset plus its frozen tree probabilities.
pub struct TreeView<'a> {
    pub dataset: &'a Dataset,
    pub tree_probs: &'a [Vec<f64>],
}

/// Trains the capsule branch under the adaptive loss; the tree
/// probabilities are fixed inputs. Evaluates on `eval` after every epoch.
pub fn train(
    model: &mut CapsNetModel,
    train_data: TreeView<'_>,
    eval_data: TreeView<'_>,
    fusion: &FusionWeights,
    cfg: &TrainConfig,
) -> Result<TrainHistory> {
    let n = train_data.dataset.len();
    if train_data.tree_probs.len() != n {
        return Err(ScnError::ShapeMismatch {
            op: "train",
            detail: format!("{} tree probabilities for {} images", train_data.tree_probs.len(), n),
        });
    }
    let mut adam = Adam::new(model, cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut indices: Vec<usize> = (0..n).collect();
    let mut history = TrainHistory::default();

    for epoch in 0..cfg.epochs {
        indices.shuffle(&mut rng);
        let lr = cfg.learning_rate * cfg.lr_decay.powi(epoch as i32);
        let mut sums = [0.0f64; 6];
        let mut steps = 0usize;
        for batch in indices.chunks(cfg.batch_size) {
            let images = train_data.dataset.batch(batch);
            let labels: Vec<u8> = batch.iter().map(|&i| train_data.dataset.labels[i]).collect();
            let classes = model.config.num_classes;
            let mut pdata = Vec::with_capacity(batch.len() * classes);
            for &i in batch {
                pdata.extend_from_slice(&train_data.tree_probs[i]);
            }
            let tree_p = Tensor::from_raw(vec![batch.len(), classes], pdata);
            let report = train_step(model, &mut adam, images, tree_p, &labels, fusion, lr)?;
            if !report.total.is_finite() {
                return Err(ScnError::Diverged { epoch, step: steps });
            }
            sums[0] += report.l_st;
            sums[1] += report.l_caps;
            sums[2] += report.l_scn;
            sums[3] += report.tau;
            sums[4] += report.weight;
            sums[5] += report.total;
            steps += 1;
        }
        let k = steps as f64;
        let eval = evaluate(model, eval_data.tree_probs, eval_data.dataset, fusion)?;
        history.epochs.push(EpochStats {
            epoch,
            loss: LossReport {
                l_st: sums[0] / k,
                l_caps: sums[1] / k,
                l_scn: sums[2] / k,
                tau: sums[3] / k,
                weight: sums[4] / k,
                total: sums[5] / k,
            },
            acc_tree: eval.acc_tree,
            acc_caps: eval.acc_caps,
            acc_scn: eval.acc_scn,
        });
        if let Some(target) = cfg.stop_at_fused_acc {
            if eval.acc_scn >= target {
                break;
            }
        }
    }
    Ok(history)
}

/// Per-branch accuracies and confusion matrices (rows true, columns
/// predicted).
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub acc_tree: f64,
    pub acc_caps: f64,
    pub acc_scn: f64,
    pub confusion_tree: Vec<Vec<usize>>,
    pub confusion_caps: Vec<Vec<usize>>,
    pub confusion_scn: Vec<Vec<usize>>,
}

const EVAL_CHUNK: usize = 50;

/// Evaluates all three branches. Work is sharded over fixed-size chunks;
/// all aggregation is integer counting, so the result does not depend on
/// scheduling.
pub fn evaluate(
    model: &CapsNetModel,
    tree_probs: &[Vec<f64>],
    dataset: &Dataset,
    fusion: &FusionWeights,
) -> Result<EvalReport> {
    let n = dataset.len();
    if tree_probs.len() != n {
        return Err(ScnError::ShapeMismatch {
            op: "evaluate",
            detail: format!("{} tree probabilities for {} images", tree_probs.len(), n),
        });
    }
    let classes = model.config.num_classes;
    let chunk_results: Vec<Result<ChunkCounts>> = (0..n)
        .collect::<Vec<_>>()
        .par_chunks(EVAL_CHUNK)
        .map(|chunk| eval_chunk(model, tree_probs, dataset, fusion, chunk))
        .collect();
    let mut counts = ChunkCounts::new(classes);
    for r in chunk_results {
        counts.merge(r?);
    }
    let total = n as f64;
    Ok(EvalReport {
        acc_tree: counts.correct[0] as f64 / total,
        acc_caps: counts.correct[1] as f64 / total,
        acc_scn: counts.correct[2] as f64 / total,
        confusion_tree: counts.confusion[0].clone(),
        confusion_caps: counts.confusion[1].clone(),
        confusion_scn: counts.confusion[2].clone(),
    })
}

struct ChunkCounts {
    correct: [usize; 3],
    confusion: [Vec<Vec<usize>>; 3],
}

impl ChunkCounts {
    fn new(classes: usize) -> Self {
        ChunkCounts {
            correct: [0; 3],
            confusion: [
                vec![vec![0; classes]; classes],
                vec![vec![0; classes]; classes],
                vec![vec![0; classes]; classes],
            ],
        }
    }

    fn merge(&mut self, other: ChunkCounts) {
        for b in 0..3 {
            self.correct[b] += other.correct[b];
            for (row, orow) in self.confusion[b].iter_mut().zip(&other.confusion[b]) {
                for (c, oc) in row.iter_mut().zip(orow) {
                    *c += oc;
                }
            }
        }
    }
}

fn eval_chunk(
    model: &CapsNetModel,
    tree_probs: &[Vec<f64>],
    dataset: &Dataset,
    fusion: &FusionWeights,
    chunk: &[usize],
) -> Result<ChunkCounts> {
    let classes = model.config.num_classes;
    let images = dataset.batch(chunk);
    let q = model.forward_values(&images)?;
    let mut counts = ChunkCounts::new(classes);
    for (row, &i) in chunk.iter().enumerate() {
        let truth = dataset.labels[i] as usize;
        let qrow = &q[row * classes..(row + 1) * classes];
        let p = &tree_probs[i];
        let o = fuse(p, qrow, fusion)?;
        let preds = [argmax(p), argmax(qrow), argmax(&o)];
        for (b, &pred) in preds.iter().enumerate() {
            counts.confusion[b][truth][pred] += 1;
            if pred == truth {
                counts.correct[b] += 1;
            }
        }
    }
    Ok(counts)
}

/// Relation vectors for every image of a grayscale dataset (parallel,
/// deterministic).
pub fn relation_vectors_mnist(
    dataset: &Dataset,
    pipeline: &MnistPipelineConfig,
    schema: &RelationSchema,
) -> Result<Vec<RelationVector>> {
    let (c, h, w) = dataset.image_dims();
    if c != 1 {
        return Err(ScnError::ShapeMismatch {
            op: "relation_vectors_mnist",
            detail: format!("expected single-channel images, got {}", c),
        });
    }
    (0..dataset.len())
        .into_par_iter()
        .map(|i| {
            let img = crate::vision::GrayImage::new(w, h, dataset.image_data(i).to_vec())?;
            let prims = detect_primitives_mnist(&img, pipeline);
            compute_relation_vector(&prims, schema)
        })
        .collect()
}

/// Relation vectors for a color dataset via the traffic-sign pipeline.
pub fn relation_vectors_gtsrb(
    dataset: &Dataset,
    colors: &ColorSegConfig,
    bank: &TemplateBank,
    per_type: usize,
    schema: &RelationSchema,
) -> Result<Vec<RelationVector>> {
    let (c, h, w) = dataset.image_dims();
    if c != 3 {
        return Err(ScnError::ShapeMismatch {
            op: "relation_vectors_gtsrb",
            detail: format!("expected three-channel images, got {}", c),
        });
    }
    (0..dataset.len())
        .into_par_iter()
        .map(|i| {
            let planar = dataset.image_data(i);
            let mut interleaved = Vec::with_capacity(planar.len());
            for px in 0..h * w {
                interleaved.push(planar[px]);
                interleaved.push(planar[h * w + px]);
                interleaved.push(planar[2 * h * w + px]);
            }
            let img = crate::vision::ColorImage::new(w, h, interleaved)?;
            let prims = crate::vision::detect_primitives_gtsrb(&img, colors, bank, per_type)?;
            compute_relation_vector(&prims, schema)
        })
        .collect()
}

/// Tree probabilities for precomputed relation vectors.
pub fn tree_probabilities(
    vectors: &[RelationVector],
    dict: &SemanticDictionary,
) -> Result<Vec<Vec<f64>>> {
    vectors
        .iter()
        .map(|v| classify(v, dict).map(|p| p.probabilities))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::capsnet::{CapsNetConfig, SimplifyFactor};
    use crate::data::Manifest;

    #[test]
    fn fuse_hand_values() {
        let w = FusionWeights::default();
        let o = fuse(&[0.8, 0.2], &[0.5, 0.5], &w).unwrap();
        assert!((o[0] - 0.68).abs() < 1e-15);
        assert!((o[1] - 0.32).abs() < 1e-15);

        let same = fuse(&[0.3, 0.7], &[0.3, 0.7], &w).unwrap();
        assert_eq!(same, vec![0.3, 0.7]);
        let ones = fuse(&[1.0], &[1.0], &w).unwrap();
        assert!((ones[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn fuse_length_mismatch_errors() {
        assert!(fuse(&[0.5], &[0.5, 0.5], &FusionWeights::default()).is_err());
    }

    #[test]
    fn margin_loss_hand_values() {
        // all satisfied
        let l = margin_loss(&[0.9, 0.1, 0.1], &[1.0, 0.0, 0.0]).unwrap();
        assert_eq!(l, 0.0);
        // target at 0.4, others exactly at slack
        let l = margin_loss(&[0.4, 0.1, 0.1], &[1.0, 0.0, 0.0]).unwrap();
        assert!((l - 0.25).abs() < 1e-15);
        // N=2: target fine, other at 0.6
        let l = margin_loss(&[0.9, 0.6], &[1.0, 0.0]).unwrap();
        assert!((l - 0.125).abs() < 1e-15);
    }

    #[test]
    fn malformed_onehot_rejected() {
        assert!(margin_loss(&[0.5, 0.5], &[1.0, 1.0]).is_err());
        assert!(margin_loss(&[0.5, 0.5], &[0.0, 0.0]).is_err());
        assert!(margin_loss(&[0.5, 0.5], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn batch_losses_reduce_to_margin_loss_at_m1() {
        let p = [0.4, 0.1, 0.1];
        let (l_st, _, _) = batch_losses(&p, &p, &p, &[0], 3);
        assert!((l_st - 0.25).abs() < 1e-15);
    }

    #[test]
    fn batch_mean_is_mean_of_per_sample() {
        let rows = [0.4, 0.1, 0.9, 0.6];
        let l = margin_batch(&rows, &[0, 0], 2);
        let l0 = margin_loss(&[0.4, 0.1], &[1.0, 0.0]).unwrap();
        let l1 = margin_loss(&[0.9, 0.6], &[1.0, 0.0]).unwrap();
        assert!((l - (l0 + l1) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn total_loss_hand_values() {
        let (l, tau, w) = total_loss(0.3, 0.3, 0.8).unwrap();
        assert_eq!(tau, 0.5);
        assert!((w - 0.5).abs() < 1e-15);
        assert!((l - 0.4).abs() < 1e-15);

        // tau = 0.6: w = 1/(1+e^-10)
        let (_, tau, w) = total_loss(0.6, 0.4, 1.0).unwrap();
        assert!((tau - 0.6).abs() < 1e-12);
        assert!((w - 1.0 / (1.0 + (-10.0f64).exp())).abs() < 1e-12);
        assert!((w - 0.9999546).abs() < 1e-6);

        // tau = 0.4: vanishing weight
        let (l, tau, w) = total_loss(0.4, 0.6, 1.0).unwrap();
        assert!((tau - 0.4).abs() < 1e-12);
        assert!((w - 1.0 / (1.0 + (10.0f64).exp())).abs() < 1e-12);
        assert!(w < 5e-5 && l < 5e-5);

        // both zero: tau defined as 0.5
        let (_, tau, w) = total_loss(0.0, 0.0, 0.0).unwrap();
        assert_eq!(tau, 0.5);
        assert!((w - 0.5).abs() < 1e-15);
    }

    #[test]
    fn weight_is_increasing_and_symmetric() {
        let w_at = |tau: f64| total_loss(tau, 1.0 - tau, 1.0).unwrap().2;
        // strictly increasing wherever f64 resolves the sigmoid (the tails
        // saturate to exactly 0 and 1 beyond about tau = 0.5 +- 0.35)
        let mut prev = w_at(0.4);
        for i in 1..=40 {
            let w = w_at(0.4 + i as f64 * 0.005);
            assert!(w > prev, "not increasing at step {}", i);
            prev = w;
        }
        let mut prev = w_at(0.0);
        for i in 1..=20 {
            let w = w_at(i as f64 / 20.0);
            assert!(w >= prev);
            prev = w;
        }
        assert!((w_at(0.0) + w_at(1.0) - 1.0).abs() < 1e-12);
        assert!((w_at(0.5) - 0.5).abs() < 1e-12);
    }

    fn toy_dataset(n: usize, classes: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = Vec::with_capacity(n * 17 * 17);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let label = (i % classes) as u8;
            for px in 0..17 * 17 {
                use rand::Rng;
                let v: f64 = rng.gen_range(0.0..0.3);
                // class-dependent bright block so the batch is separable
                let x = px % 17;
                let y = px / 17;
                let lit = x / 6 == label as usize % 3 && y / 6 == label as usize / 3;
                data.push(if lit { (0.7 + v).min(1.0) } else { v });
            }
            labels.push(label);
        }
        Dataset::new(
            "toy".into(),
            Tensor::new(vec![n, 1, 17, 17], data).unwrap(),
            labels,
            classes,
            Manifest::default(),
        )
        .unwrap()
    }

    fn uniform_probs(n: usize, classes: usize) -> Vec<Vec<f64>> {
        vec![vec![1.0 / classes as f64; classes]; n]
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged() {
        let cfg = CapsNetConfig::toy(17, 2, 1, 3).unwrap();
        let mut model = CapsNetModel::init(cfg, 5);
        let before: Vec<Vec<f64>> = model.parameters().iter().map(|t| t.data().to_vec()).collect();
        let ds = toy_dataset(12, 3, 1);
        let probs = uniform_probs(12, 3);
        let tcfg = TrainConfig {
            epochs: 1,
            learning_rate: 0.0,
            batch_size: 4,
            ..TrainConfig::default()
        };
        train(
            &mut model,
            TreeView { dataset: &ds, tree_probs: &probs },
            TreeView { dataset: &ds, tree_probs: &probs },
            &FusionWeights::default(),
            &tcfg,
        )
        .unwrap();
        let after: Vec<Vec<f64>> = model.parameters().iter().map(|t| t.data().to_vec()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn one_batch_overfit_drives_caps_loss_down() {
        let cfg = CapsNetConfig::toy(17, 4, 2, 2).unwrap();
        let mut model = CapsNetModel::init(cfg, 3);
        let ds = toy_dataset(8, 2, 2);
        // deliberately wrong tree: all mass on the wrong class, so the
        // adaptive weight stays near one and the capsule branch trains at
        // full speed
        let probs: Vec<Vec<f64>> = ds
            .labels
            .iter()
            .map(|&l| {
                let mut p = vec![0.9; 2];
                p[l as usize] = 0.1;
                let s: f64 = p.iter().sum();
                p.iter().map(|v| v / s).collect()
            })
            .collect();
        let mut adam = Adam::new(&model, &TrainConfig::default());
        let all: Vec<usize> = (0..8).collect();
        let images = ds.batch(&all);
        let mut pdata = Vec::new();
        for p in &probs {
            pdata.extend_from_slice(p);
        }
        let mut last = f64::INFINITY;
        for _ in 0..200 {
            let report = train_step(
                &mut model,
                &mut adam,
                images.clone(),
                Tensor::from_raw(vec![8, 2], pdata.clone()),
                &ds.labels,
                &FusionWeights::default(),
                0.01,
            )
            .unwrap();
            last = report.l_caps;
        }
        assert!(last < 0.01, "caps loss after overfit: {}", last);
    }

    #[test]
    fn tree_receives_no_gradient() {
        // the tree probabilities enter as tape constants: backward must
        // produce no gradient entry for them
        let cfg = CapsNetConfig::toy(17, 2, 1, 2).unwrap();
        let model = CapsNetModel::init(cfg, 1);
        let mut tape = Tape::new();
        let vars = model.register(&mut tape, true);
        let images = tape.input(Tensor::filled(vec![2, 1, 17, 17], 0.4).unwrap());
        let (q, _) = model.forward(&mut tape, &vars, images).unwrap();
        let p = tape.constant(Tensor::filled(vec![2, 2], 0.5).unwrap());
        let ps = tape.scale(p, 0.6);
        let qs = tape.scale(q, 0.4);
        let o = tape.add(ps, qs).unwrap();
        let onehot = onehot_tensor(&[0, 1], 2);
        let loss = margin_loss_on_tape(&mut tape, o, &onehot).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(p).is_none());
        assert!(grads.get(vars.digit_weights).is_some());
    }

    #[test]
    fn evaluate_counts_and_fusion_degeneracy() {
        let cfg = CapsNetConfig::toy(17, 2, 1, 3).unwrap();
        let model = CapsNetModel::init(cfg, 11);
        let ds = toy_dataset(9, 3, 4);
        // tree that is always right
        let probs: Vec<Vec<f64>> = ds
            .labels
            .iter()
            .map(|&l| {
                let mut p = vec![0.05; 3];
                p[l as usize] = 0.9;
                p
            })
            .collect();
        let beta_tree_only = FusionWeights::new(1.0, 0.0).unwrap();
        let report = evaluate(&model, &probs, &ds, &beta_tree_only).unwrap();
        assert_eq!(report.acc_tree, 1.0);
        assert_eq!(report.acc_scn, report.acc_tree);
        // confusion matrices count every sample exactly once
        let total: usize = report.confusion_scn.iter().flatten().sum();
        assert_eq!(total, 9);
    }
}
