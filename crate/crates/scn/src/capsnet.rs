//! The data-driven branch: conv layer, primary capsules, class capsules
//! with agreement routing. Output per class is the length of its capsule
//! vector, in `[0, 1)`.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Result, ScnError};
use crate::tensor::{Tape, Tensor, Var};

const CKPT_MAGIC: &[u8; 4] = b"SCNC";
const CKPT_VERSION: u32 = 1;

/// Channel-count multiplier for the slimmed-down variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SimplifyFactor {
    One,
    Half,
    Quarter,
    Eighth,
    Sixteenth,
}

impl SimplifyFactor {
    pub const ALL: [SimplifyFactor; 5] = [
        SimplifyFactor::One,
        SimplifyFactor::Half,
        SimplifyFactor::Quarter,
        SimplifyFactor::Eighth,
        SimplifyFactor::Sixteenth,
    ];

    pub fn denominator(self) -> u32 {
        match self {
            SimplifyFactor::One => 1,
            SimplifyFactor::Half => 2,
            SimplifyFactor::Quarter => 4,
            SimplifyFactor::Eighth => 8,
            SimplifyFactor::Sixteenth => 16,
        }
    }

    pub fn value(self) -> f64 {
        1.0 / self.denominator() as f64
    }

    /// Scales a channel count, never below one.
    pub fn scale(self, base: usize) -> usize {
        (base / self.denominator() as usize).max(1)
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "1" => SimplifyFactor::One,
            "1/2" => SimplifyFactor::Half,
            "1/4" => SimplifyFactor::Quarter,
            "1/8" => SimplifyFactor::Eighth,
            "1/16" => SimplifyFactor::Sixteenth,
            _ => return None,
        })
    }

    pub fn label(self) -> &'static str {
        match self {
            SimplifyFactor::One => "1",
            SimplifyFactor::Half => "1/2",
            SimplifyFactor::Quarter => "1/4",
            SimplifyFactor::Eighth => "1/8",
            SimplifyFactor::Sixteenth => "1/16",
        }
    }
}

impl std::fmt::Display for SimplifyFactor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CapsNetConfig {
    pub input_height: usize,
    pub input_width: usize,
    pub input_channels: usize,
    pub conv1_filters: usize,
    pub conv1_kernel: usize,
    pub conv1_stride: usize,
    pub primary_channels: usize,
    pub primary_dim: usize,
    pub primary_kernel: usize,
    pub primary_stride: usize,
    pub digit_dim: usize,
    pub num_classes: usize,
    pub routing_iterations: usize,
    pub factor: SimplifyFactor,
}

impl CapsNetConfig {
    /// 28x28 grayscale config; the factor scales the first conv layer and
    /// the primary-capsule channels.
    pub fn mnist(factor: SimplifyFactor) -> Result<Self> {
        CapsNetConfig {
            input_height: 28,
            input_width: 28,
            input_channels: 1,
            conv1_filters: factor.scale(256),
            conv1_kernel: 9,
            conv1_stride: 1,
            primary_channels: factor.scale(32),
            primary_dim: 8,
            primary_kernel: 9,
            primary_stride: 2,
            digit_dim: 16,
            num_classes: 10,
            routing_iterations: 3,
            factor,
        }
        .validated()
    }

    /// 32x32 RGB config with one class capsule per traffic-sign class.
    pub fn gtsrb(factor: SimplifyFactor) -> Result<Self> {
        CapsNetConfig {
            input_height: 32,
            input_width: 32,
            input_channels: 3,
            conv1_filters: factor.scale(256),
            conv1_kernel: 9,
            conv1_stride: 1,
            primary_channels: factor.scale(32),
            primary_dim: 8,
            primary_kernel: 9,
            primary_stride: 2,
            digit_dim: 16,
            num_classes: 43,
            routing_iterations: 3,
            factor,
        }
        .validated()
    }

    /// Small config for gradient checks and fast tests.
    pub fn toy(input: usize, conv1_filters: usize, primary_channels: usize, classes: usize) -> Result<Self> {
        CapsNetConfig {
            input_height: input,
            input_width: input,
            input_channels: 1,
            conv1_filters,
            conv1_kernel: 9,
            conv1_stride: 1,
            primary_channels,
            primary_dim: 8,
            primary_kernel: 9,
            primary_stride: 2,
            digit_dim: 16,
            num_classes: classes,
            routing_iterations: 3,
            factor: SimplifyFactor::One,
        }
        .validated()
    }

    pub fn validated(self) -> Result<Self> {
        if self.conv1_kernel > self.input_height || self.conv1_kernel > self.input_width {
            return Err(ScnError::Config(format!(
                "conv kernel {} exceeds input {}x{}",
                self.conv1_kernel, self.input_height, self.input_width
            )));
        }
        let (ch, cw) = self.conv1_out();
        if ch < self.primary_kernel || cw < self.primary_kernel {
            return Err(ScnError::Config(format!(
                "primary kernel {} exceeds conv output {}x{}",
                self.primary_kernel, ch, cw
            )));
        }
        if self.routing_iterations == 0 {
            return Err(ScnError::Config("routing needs at least one iteration".into()));
        }
        Ok(self)
    }

    pub fn conv1_out(&self) -> (usize, usize) {
        (
            (self.input_height - self.conv1_kernel) / self.conv1_stride + 1,
            (self.input_width - self.conv1_kernel) / self.conv1_stride + 1,
        )
    }

    pub fn primary_out(&self) -> (usize, usize) {
        let (ch, cw) = self.conv1_out();
        (
            (ch - self.primary_kernel) / self.primary_stride + 1,
            (cw - self.primary_kernel) / self.primary_stride + 1,
        )
    }

    /// Number of primary capsules feeding the routing.
    pub fn num_primary_caps(&self) -> usize {
        let (ph, pw) = self.primary_out();
        self.primary_channels * ph * pw
    }

    /// Exact trainable-parameter count.
    pub fn param_count(&self) -> usize {
        let conv1 = self.conv1_filters * self.input_channels * self.conv1_kernel * self.conv1_kernel
            + self.conv1_filters;
        let pchan = self.primary_channels * self.primary_dim;
        let primary =
            pchan * self.conv1_filters * self.primary_kernel * self.primary_kernel + pchan;
        let digit = self.num_primary_caps() * self.num_classes * self.digit_dim * self.primary_dim;
        conv1 + primary + digit
    }

    /// Multiply-accumulate estimate of one forward pass.
    pub fn flops_estimate(&self) -> FlopsBreakdown {
        let (ch, cw) = self.conv1_out();
        let (ph, pw) = self.primary_out();
        let conv1 = ch
            * cw
            * self.conv1_filters
            * self.input_channels
            * self.conv1_kernel
            * self.conv1_kernel;
        let pchan = self.primary_channels * self.primary_dim;
        let primary = ph * pw * pchan * self.conv1_filters * self.primary_kernel * self.primary_kernel;
        let n_in = self.num_primary_caps();
        let digit = n_in * self.num_classes * self.digit_dim * self.primary_dim;
        let routing = self.routing_iterations * 2 * n_in * self.num_classes * self.digit_dim;
        FlopsBreakdown {
            conv1,
            primary,
            digit,
            routing,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlopsBreakdown {
    pub conv1: usize,
    pub primary: usize,
    pub digit: usize,
    pub routing: usize,
}

impl FlopsBreakdown {
    pub fn total(&self) -> usize {
        self.conv1 + self.primary + self.digit + self.routing
    }
}

/// All trainable parameters, held as plain tensors between steps.
#[derive(Debug, Clone)]
pub struct CapsNetModel {
    pub config: CapsNetConfig,
    pub conv1_kernels: Tensor,
    pub conv1_bias: Tensor,
    pub primary_kernels: Tensor,
    pub primary_bias: Tensor,
    pub digit_weights: Tensor,
}

/// Forward-pass handles for the parameters registered on a tape.
#[derive(Debug, Clone, Copy)]
pub struct ModelVars {
    pub conv1_kernels: Var,
    pub conv1_bias: Var,
    pub primary_kernels: Var,
    pub primary_bias: Var,
    pub digit_weights: Var,
}

impl ModelVars {
    pub fn all(&self) -> [Var; 5] {
        [
            self.conv1_kernels,
            self.conv1_bias,
            self.primary_kernels,
            self.primary_bias,
            self.digit_weights,
        ]
    }
}

impl CapsNetModel {
    /// Xavier-uniform conv kernels, zero biases, normal(0, 0.01) routing
    /// weights; deterministic per seed.
    pub fn init(config: CapsNetConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k2 = config.conv1_kernel * config.conv1_kernel;
        let conv1_shape = vec![
            config.conv1_filters,
            config.input_channels,
            config.conv1_kernel,
            config.conv1_kernel,
        ];
        let fan_in = config.input_channels * k2;
        let fan_out = config.conv1_filters * k2;
        let conv1_kernels = xavier(&mut rng, conv1_shape, fan_in, fan_out);
        let conv1_bias = Tensor::zeros(vec![config.conv1_filters]);

        let pk2 = config.primary_kernel * config.primary_kernel;
        let pchan = config.primary_channels * config.primary_dim;
        let primary_shape = vec![pchan, config.conv1_filters, config.primary_kernel, config.primary_kernel];
        let fan_in = config.conv1_filters * pk2;
        let fan_out = pchan * pk2;
        let primary_kernels = xavier(&mut rng, primary_shape, fan_in, fan_out);
        let primary_bias = Tensor::zeros(vec![pchan]);

        let n_in = config.num_primary_caps();
        let w_len = n_in * config.num_classes * config.digit_dim * config.primary_dim;
        let data: Vec<f64> = (0..w_len).map(|_| normal01(&mut rng) * 0.01).collect();
        let digit_weights = Tensor::new(
            vec![n_in, config.num_classes, config.digit_dim, config.primary_dim],
            data,
        )
        .expect("finite init");

        CapsNetModel {
            config,
            conv1_kernels,
            conv1_bias,
            primary_kernels,
            primary_bias,
            digit_weights,
        }
    }

    pub fn param_count(&self) -> usize {
        self.parameters().iter().map(|t| t.len()).sum()
    }

    pub fn parameters(&self) -> [&Tensor; 5] {
        [
            &self.conv1_kernels,
            &self.conv1_bias,
            &self.primary_kernels,
            &self.primary_bias,
            &self.digit_weights,
        ]
    }

    pub fn parameters_mut(&mut self) -> [&mut Tensor; 5] {
        [
            &mut self.conv1_kernels,
            &mut self.conv1_bias,
            &mut self.primary_kernels,
            &mut self.primary_bias,
            &mut self.digit_weights,
        ]
    }

    /// Registers the parameters on a tape, with or without gradients.
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> ModelVars {
        let reg = |tape: &mut Tape, t: &Tensor| {
            if trainable {
                tape.input(t.clone().with_grad())
            } else {
                tape.input(t.clone())
            }
        };
        ModelVars {
            conv1_kernels: reg(tape, &self.conv1_kernels),
            conv1_bias: reg(tape, &self.conv1_bias),
            primary_kernels: reg(tape, &self.primary_kernels),
            primary_bias: reg(tape, &self.primary_bias),
            digit_weights: reg(tape, &self.digit_weights),
        }
    }

    /// Full forward pass on the tape. Returns (q, v): per-class capsule
    /// lengths `[N, classes]` and the capsule vectors `[N, classes, dim]`.
    pub fn forward(&self, tape: &mut Tape, vars: &ModelVars, images: Var) -> Result<(Var, Var)> {
        let shape = tape.shape(images).to_vec();
        let expect = [
            self.config.input_channels,
            self.config.input_height,
            self.config.input_width,
        ];
        if shape.len() != 4 || shape[1..] != expect {
            return Err(ScnError::ShapeMismatch {
                op: "capsnet_forward",
                detail: format!("images {:?}, expected [N, {}, {}, {}]", shape, expect[0], expect[1], expect[2]),
            });
        }
        let c1 = tape.conv2d(
            images,
            vars.conv1_kernels,
            vars.conv1_bias,
            self.config.conv1_stride,
        )?;
        let c1 = tape.relu(c1);
        let pc = tape.conv2d(
            c1,
            vars.primary_kernels,
            vars.primary_bias,
            self.config.primary_stride,
        )?;
        let caps = tape.caps_reshape(pc, self.config.primary_channels, self.config.primary_dim)?;
        let u = tape.squash(caps)?;
        let uhat = tape.caps_predict(u, vars.digit_weights)?;
        let v = routing_on_tape(tape, uhat, self.config.routing_iterations)?;
        let q = tape.norm_last(v)?;
        Ok((q, v))
    }

    /// Convenience forward for plain evaluation; returns q values.
    pub fn forward_values(&self, images: &Tensor) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false);
        let iv = tape.input(images.clone());
        let (q, _) = self.forward(&mut tape, &vars, iv)?;
        Ok(tape.value(q).data().to_vec())
    }

    /// Byte layout: magic `SCNC`, version u32, 13 config words (all
    /// little-endian u32), then each parameter tensor's f64 values in
    /// declaration order, then a SHA-256 of everything preceding.
    pub fn save(&self, path: &Path) -> Result<()> {
        let c = &self.config;
        let mut body: Vec<u8> = Vec::new();
        body.extend_from_slice(CKPT_MAGIC);
        body.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        for v in [
            c.input_height,
            c.input_width,
            c.input_channels,
            c.conv1_filters,
            c.conv1_kernel,
            c.conv1_stride,
            c.primary_channels,
            c.primary_dim,
            c.primary_kernel,
            c.primary_stride,
            c.digit_dim,
            c.num_classes,
            c.routing_iterations,
        ] {
            body.extend_from_slice(&(v as u32).to_le_bytes());
        }
        body.extend_from_slice(&c.factor.denominator().to_le_bytes());
        for t in self.parameters() {
            for v in t.data() {
                body.extend_from_slice(&v.to_le_bytes());
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
        if bytes.len() < 4 + 4 + 14 * 4 + 32 {
            return Err(corrupt("file too short"));
        }
        let (body, checksum) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != checksum {
            return Err(corrupt("checksum mismatch"));
        }
        if &body[..4] != CKPT_MAGIC {
            return Err(corrupt("bad magic"));
        }
        let word = |i: usize| -> u32 {
            let o = 4 + i * 4;
            u32::from_le_bytes([body[o], body[o + 1], body[o + 2], body[o + 3]])
        };
        if word(0) != CKPT_VERSION {
            return Err(corrupt("unsupported version"));
        }
        let factor = match word(14) {
            1 => SimplifyFactor::One,
            2 => SimplifyFactor::Half,
            4 => SimplifyFactor::Quarter,
            8 => SimplifyFactor::Eighth,
            16 => SimplifyFactor::Sixteenth,
            other => return Err(corrupt(&format!("bad simplify factor {}", other))),
        };
        let config = CapsNetConfig {
            input_height: word(1) as usize,
            input_width: word(2) as usize,
            input_channels: word(3) as usize,
            conv1_filters: word(4) as usize,
            conv1_kernel: word(5) as usize,
            conv1_stride: word(6) as usize,
            primary_channels: word(7) as usize,
            primary_dim: word(8) as usize,
            primary_kernel: word(9) as usize,
            primary_stride: word(10) as usize,
            digit_dim: word(11) as usize,
            num_classes: word(12) as usize,
            routing_iterations: word(13) as usize,
            factor,
        }
        .validated()?;
        let mut pos = 4 + 15 * 4;
        let mut template = CapsNetModel::init(config.clone(), 0);
        let expected: usize = template.parameters().iter().map(|t| t.len()).sum();
        if body.len() - pos != expected * 8 {
            return Err(corrupt(&format!(
                "parameter payload {} bytes, expected {}",
                body.len() - pos,
                expected * 8
            )));
        }
        for t in template.parameters_mut() {
            for v in t.data_mut() {
                *v = f64::from_le_bytes(body[pos..pos + 8].try_into().unwrap());
                pos += 8;
            }
        }
        Ok(template)
    }
}

fn xavier(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape, data).expect("finite init")
}

/// Standard-normal sample via Box-Muller (avoids extra dependencies and is
/// reproducible across platforms).
fn normal01(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Agreement routing recorded on the tape, gradients flowing through the
/// unrolled iterations.
///
/// Logits start at zero each call. Per iteration the coupling
/// coefficients are a softmax of the logits over the input-capsule axis
/// (for each class capsule the couplings over inputs sum to 1), the class
/// capsule is the squashed coupling-weighted sum, and the logits move by
/// the prediction/output agreement. The logit update is skipped after the
/// final iteration.
pub fn routing_on_tape(tape: &mut Tape, uhat: Var, iterations: usize) -> Result<Var> {
    let (v, _) = routing_with_couplings(tape, uhat, iterations)?;
    Ok(v)
}

/// Routing that also returns the final coupling coefficients `[N, I, J]`.
pub fn routing_with_couplings(
    tape: &mut Tape,
    uhat: Var,
    iterations: usize,
) -> Result<(Var, Var)> {
    if iterations == 0 {
        return Err(ScnError::InvalidArgument {
            op: "dynamic_routing",
            detail: "iterations must be >= 1".into(),
        });
    }
    let hs = tape.shape(uhat).to_vec();
    if hs.len() != 4 {
        return Err(ScnError::ShapeMismatch {
            op: "dynamic_routing",
            detail: format!("predictions must be [N,I,J,D], got {:?}", hs),
        });
    }
    let (n, ni, nj) = (hs[0], hs[1], hs[2]);
    let mut b = tape.constant(Tensor::zeros(vec![n, ni, nj]));
    let mut out = None;
    for iter in 0..iterations {
        let c = tape.softmax(b, 1)?;
        let s = tape.caps_weighted_sum(c, uhat)?;
        let v = tape.squash(s)?;
        if iter + 1 < iterations {
            let agreement = tape.caps_agreement(uhat, v)?;
            b = tape.add(b, agreement)?;
        } else {
            out = Some((v, c));
        }
    }
    Ok(out.expect("at least one iteration"))
}

/// Single-instance routing: predictions `[I, J, D]` to outputs `[J, D]`.
pub fn dynamic_routing(predictions: &Tensor, iterations: usize) -> Result<Tensor> {
    let shape = predictions.shape().to_vec();
    if shape.len() != 3 {
        return Err(ScnError::ShapeMismatch {
            op: "dynamic_routing",
            detail: format!("predictions must be [I,J,D], got {:?}", shape),
        });
    }
    let mut tape = Tape::new();
    let batched = Tensor::new(
        vec![1, shape[0], shape[1], shape[2]],
        predictions.data().to_vec(),
    )?;
    let uhat = tape.input(batched);
    let v = routing_on_tape(&mut tape, uhat, iterations)?;
    Tensor::new(vec![shape[1], shape[2]], tape.value(v).data().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_pinned_param_counts() {
        // conv1 256*81+256, primary 2048*(256*81)/8..., digit 1152*10*16*8
        let full = CapsNetConfig::mnist(SimplifyFactor::One).unwrap();
        assert_eq!(full.param_count(), 6_804_224);
        assert!((full.param_count() as f64 / 6.8e6 - 1.0).abs() < 0.05);
        let quarter = CapsNetConfig::mnist(SimplifyFactor::Quarter).unwrap();
        assert_eq!(quarter.param_count(), 705_728);
        assert!((quarter.param_count() as f64 / 7.1e5 - 1.0).abs() < 0.05);
    }

    #[test]
    fn toy_param_count_hand_counted() {
        // 17x17 input: conv out 9x9, primary out 1x1, one capsule
        let cfg = CapsNetConfig::toy(17, 1, 1, 2).unwrap();
        // conv1: 81 + 1; primary: 8*81 + 8; digit: 1*2*16*8
        assert_eq!(cfg.param_count(), 82 + 656 + 256);
        let model = CapsNetModel::init(cfg, 7);
        assert_eq!(model.param_count(), 994);
    }

    #[test]
    fn param_count_strictly_decreasing_in_factor() {
        let mut prev = usize::MAX;
        for f in SimplifyFactor::ALL {
            let c = CapsNetConfig::mnist(f).unwrap().param_count();
            assert!(c < prev, "factor {} did not shrink: {} vs {}", f, c, prev);
            prev = c;
        }
    }

    #[test]
    fn flops_orders_match_published_complexity() {
        let full = CapsNetConfig::mnist(SimplifyFactor::One).unwrap().flops_estimate().total();
        assert!((1e8..4e8).contains(&(full as f64)), "full {}", full);
        let quarter = CapsNetConfig::mnist(SimplifyFactor::Quarter).unwrap().flops_estimate().total();
        assert!((1e7..4e7).contains(&(quarter as f64)), "quarter {}", quarter);
    }

    #[test]
    fn halving_conv1_halves_its_flops_term() {
        let base = CapsNetConfig::toy(28, 32, 4, 3).unwrap();
        let mut halved = base.clone();
        halved.conv1_filters = 16;
        assert_eq!(base.flops_estimate().conv1, 2 * halved.flops_estimate().conv1);
    }

    #[test]
    fn routing_single_input_capsule_is_squash() {
        // one input capsule, two classes: couplings are 1 regardless of
        // iteration count, so v_j = squash(uhat_j)
        let uhat = Tensor::new(
            vec![1, 2, 3],
            vec![0.4, 0.0, 0.0, 0.0, 3.0, 0.0],
        )
        .unwrap();
        for iters in 1..=4 {
            let v = dynamic_routing(&uhat, iters).unwrap();
            // |s|=0.4 -> 0.16/1.16 * unit
            let expect0 = 0.4 / (1.0 + 0.16) * 0.4;
            assert!((v.data()[0] - expect0).abs() < 1e-12, "iters {}", iters);
            // |s|=3 -> |v| = 0.9
            assert!((v.data()[4] - 0.9).abs() < 1e-12);
        }
    }

    #[test]
    fn routing_identical_predictions_give_squashed_mean() {
        let row = [0.3, -0.2, 0.9];
        let mut data = Vec::new();
        for _ in 0..2 {
            data.extend_from_slice(&row);
        }
        let uhat = Tensor::new(vec![2, 1, 3], data).unwrap();
        for iters in 1..=3 {
            let v = dynamic_routing(&uhat, iters).unwrap();
            // mean of two identical rows is the row itself
            let n2: f64 = row.iter().map(|x| x * x).sum();
            let k = n2.sqrt() / (1.0 + n2);
            for (got, want) in v.data().iter().zip(row.iter().map(|x| k * x)) {
                assert!((got - want).abs() < 1e-12, "iters {}", iters);
            }
        }
    }

    #[test]
    fn one_iteration_is_uniform_average_then_squash() {
        let uhat = Tensor::new(
            vec![2, 1, 2],
            vec![1.0, 0.0, 0.0, 1.0],
        )
        .unwrap();
        let v = dynamic_routing(&uhat, 1).unwrap();
        // uniform couplings 1/2 each: s = (0.5, 0.5), |s| = sqrt(0.5)
        let s = [0.5, 0.5];
        let n2 = 0.5f64;
        let coef = n2.sqrt() / (1.0 + n2);
        for (got, want) in v.data().iter().zip(s.iter().map(|x| coef * x)) {
            assert!((got - want).abs() < 1e-12, "{} vs {}", got, want);
        }
    }

    #[test]
    fn couplings_sum_to_one_every_iteration() {
        for iters in 1..=3 {
            let mut tape = Tape::new();
            let mut data = Vec::new();
            let mut seed = 1u64;
            for _ in 0..(4 * 5 * 2) {
                seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1);
                data.push(((seed >> 11) as f64 / (1u64 << 53) as f64) - 0.5);
            }
            let uhat = tape.input(Tensor::new(vec![1, 4, 5, 2], data).unwrap());
            let (_, c) = routing_with_couplings(&mut tape, uhat, iters).unwrap();
            let cd = tape.value(c).data();
            for j in 0..5 {
                let total: f64 = (0..4).map(|i| cd[i * 5 + j]).sum();
                assert!((total - 1.0).abs() < 1e-12, "iters {} class {}: {}", iters, j, total);
            }
        }
    }

    #[test]
    fn forward_q_bounded_and_zero_image_gives_zero() {
        let cfg = CapsNetConfig::toy(17, 2, 1, 3).unwrap();
        let model = CapsNetModel::init(cfg.clone(), 42);
        let mut data = vec![0.0; 17 * 17];
        for (i, v) in data.iter_mut().enumerate() {
            *v = (i % 7) as f64 / 7.0;
        }
        let images = Tensor::new(vec![1, 1, 17, 17], data).unwrap();
        let q = model.forward_values(&images).unwrap();
        assert_eq!(q.len(), 3);
        for v in &q {
            assert!((0.0..1.0).contains(v), "q out of range: {}", v);
        }

        let zero = Tensor::zeros(vec![1, 1, 17, 17]);
        let q = model.forward_values(&zero).unwrap();
        assert!(q.iter().all(|&v| v == 0.0), "zero image must give q=0: {:?}", q);
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = CapsNetConfig::toy(17, 2, 1, 3).unwrap();
        let model = CapsNetModel::init(cfg, 42);
        let images = Tensor::filled(vec![1, 1, 17, 17], 0.3).unwrap();
        let a = model.forward_values(&images).unwrap();
        let b = model.forward_values(&images).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let cfg = CapsNetConfig::toy(17, 2, 1, 3).unwrap();
        let model = CapsNetModel::init(cfg, 9);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        model.save(&path).unwrap();
        let loaded = CapsNetModel::load(&path).unwrap();
        assert_eq!(model.config, loaded.config);
        for (a, b) in model.parameters().iter().zip(loaded.parameters().iter()) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn corrupted_checkpoint_rejected() {
        let cfg = CapsNetConfig::toy(17, 1, 1, 2).unwrap();
        let model = CapsNetModel::init(cfg, 1);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        model.save(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 1;
        std::fs::write(&path, bytes).unwrap();
        assert!(CapsNetModel::load(&path).is_err());
    }
}
