//! Small convolutional classifier shared by teacher and student, plus
//! class activation maps.
//!
//! Architecture: per stage 3x3 conv (stride 1, pad 1) -> ReLU -> 2x average
//! downsample, then global average pooling and a linear head. No batch norm;
//! an optional per-stage layer norm over channels is available.

use crate::adam::Param;
use crate::error::{Error, Result};
use crate::rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub stage_channels: Vec<usize>,
    pub input_side: usize,
    pub num_classes: usize,
    pub layer_norm: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            in_channels: 3,
            stage_channels: vec![16, 32, 64],
            input_side: 32,
            num_classes: 3,
            layer_norm: false,
        }
    }
}

impl BackboneConfig {
    /// (d, h, w) of the final feature map.
    pub fn feature_dims(&self) -> (usize, usize, usize) {
        let d = *self.stage_channels.last().expect("at least one stage");
        let side = self.input_side >> self.stage_channels.len();
        (d, side, side)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.is_empty() {
            return Err(Error::Config("backbone needs at least one stage".into()));
        }
        if self.input_side % (1 << self.stage_channels.len()) != 0 {
            return Err(Error::Config(format!(
                "input side {} not divisible by 2^{}",
                self.input_side,
                self.stage_channels.len()
            )));
        }
        let (d, h, w) = self.feature_dims();
        if d % 4 != 0 {
            return Err(Error::Config(format!(
                "feature dim {d} must be divisible by 4"
            )));
        }
        if h * w < 4 {
            return Err(Error::Config(format!(
                "feature map {h}x{w} has fewer than 4 positions"
            )));
        }
        Ok(())
    }
}

/// Trainable state of one classifier. Parameter names carry the model
/// prefix ("teacher." / "student.") for checkpointing.
#[derive(Clone)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    pub prefix: String,
    pub params: Vec<Param>,
}

/// Tape handles for one forward pass.
pub struct BackboneVars {
    conv_w: Vec<Var>,
    conv_b: Vec<Var>,
    fc_w: Var,
    fc_b: Var,
}

/// Everything the rest of the pipeline consumes from one forward pass.
pub struct ClassifierOutput {
    /// [N, d, h, w]
    pub features: Var,
    /// [N, d]
    pub gap: Var,
    /// [N, C]
    pub logits: Var,
    /// [C, d]
    pub fc_weights: Var,
}

impl Backbone {
    pub fn init(cfg: BackboneConfig, prefix: &str, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng::stream(seed, &format!("{prefix}-init"));
        let mut params = Vec::new();
        let mut ci = cfg.in_channels;
        for (i, &co) in cfg.stage_channels.iter().enumerate() {
            let std = (2.0 / (ci as f64 * 9.0)).sqrt();
            params.push(Param::new(
                format!("{prefix}.conv{i}.weight"),
                rng::normal_tensor(&mut rng, vec![co, ci, 3, 3], std),
            ));
            params.push(Param::new(
                format!("{prefix}.conv{i}.bias"),
                Tensor::zeros(vec![co]),
            ));
            ci = co;
        }
        let (d, _, _) = cfg.feature_dims();
        let std = (1.0 / d as f64).sqrt();
        params.push(Param::new(
            format!("{prefix}.fc.weight"),
            rng::normal_tensor(&mut rng, vec![cfg.num_classes, d], std),
        ));
        params.push(Param::new(
            format!("{prefix}.fc.bias"),
            Tensor::zeros(vec![cfg.num_classes]),
        ));
        Ok(Backbone {
            cfg,
            prefix: prefix.to_string(),
            params,
        })
    }

    /// Marks every parameter frozen: values still flow, the optimizer and
    /// backward skip them.
    pub fn freeze(&mut self) {
        for p in &mut self.params {
            p.trainable = false;
        }
    }

    pub fn is_frozen(&self) -> bool {
        self.params.iter().all(|p| !p.trainable)
    }

    pub fn num_stages(&self) -> usize {
        self.cfg.stage_channels.len()
    }

    /// Registers the parameters as leaves on `tape`.
    pub fn bind(&self, tape: &Tape) -> BackboneVars {
        let stages = self.num_stages();
        let mut conv_w = Vec::with_capacity(stages);
        let mut conv_b = Vec::with_capacity(stages);
        for i in 0..stages {
            conv_w.push(tape.leaf(self.params[2 * i].value.clone(), self.params[2 * i].trainable));
            conv_b.push(tape.leaf(
                self.params[2 * i + 1].value.clone(),
                self.params[2 * i + 1].trainable,
            ));
        }
        let fc_w = tape.leaf(
            self.params[2 * stages].value.clone(),
            self.params[2 * stages].trainable,
        );
        let fc_b = tape.leaf(
            self.params[2 * stages + 1].value.clone(),
            self.params[2 * stages + 1].trainable,
        );
        BackboneVars {
            conv_w,
            conv_b,
            fc_w,
            fc_b,
        }
    }

    /// Pulls accumulated gradients for the bound leaves back into `params`.
    pub fn collect_grads(&mut self, tape: &Tape, vars: &BackboneVars) {
        let stages = self.num_stages();
        for i in 0..stages {
            self.params[2 * i].grad = tape.grad(vars.conv_w[i]);
            self.params[2 * i + 1].grad = tape.grad(vars.conv_b[i]);
        }
        self.params[2 * stages].grad = tape.grad(vars.fc_w);
        self.params[2 * stages + 1].grad = tape.grad(vars.fc_b);
    }

    /// images: [N, in_channels, side, side].
    pub fn forward(&self, tape: &Tape, vars: &BackboneVars, images: Var) -> Result<ClassifierOutput> {
        {
            let shape = tape.shape(images);
            if shape.len() != 4
                || shape[1] != self.cfg.in_channels
                || shape[2] != self.cfg.input_side
                || shape[3] != self.cfg.input_side
            {
                return Err(Error::Dimension {
                    op: "backbone forward",
                    lhs: shape,
                    rhs: vec![
                        0,
                        self.cfg.in_channels,
                        self.cfg.input_side,
                        self.cfg.input_side,
                    ],
                });
            }
        }
        let mut x = images;
        for i in 0..self.num_stages() {
            x = tape.conv2d(x, vars.conv_w[i], vars.conv_b[i])?;
            x = tape.relu(x);
            x = tape.avg_pool2(x)?;
            // normalize only the final stage: that is the map the heads
            // and classifier consume, and normalizing earlier stages
            // strips the amplitude information the task depends on
            if self.cfg.layer_norm && i + 1 == self.num_stages() {
                let s = tape.shape(x);
                let rows = tape.nchw_to_rows(x)?;
                let normed = tape.layer_norm(rows, 1e-5)?;
                // back to [n, c, h, w] via the transpose of the flattening
                x = rows_to_nchw(tape, normed, s[0], s[1], s[2], s[3])?;
            }
        }
        let gap = tape.global_avg_pool(x)?;
        let fc_wt = tape.transpose(vars.fc_w)?;
        let logits0 = tape.matmul(gap, fc_wt)?;
        let logits = tape.add_row_vec(logits0, vars.fc_b)?;
        Ok(ClassifierOutput {
            features: x,
            gap,
            logits,
            fc_weights: vars.fc_w,
        })
    }
}

fn rows_to_nchw(tape: &Tape, rows: Var, n: usize, c: usize, h: usize, w: usize) -> Result<Var> {
    // [n*h*w, c] -> [n, h*w, c] -> transpose per image; do it via reshape and
    // the flattening's inverse expressed with transpose on each image block.
    let mut parts = Vec::with_capacity(n);
    for img in 0..n {
        let block = tape.slice_rows(rows, img * h * w, (img + 1) * h * w)?; // [h*w, c]
        let t = tape.transpose(block)?; // [c, h*w]
        parts.push(t);
    }
    let stacked = tape.concat_rows(&parts)?; // [n*c, h*w]
    tape.reshape(stacked, vec![n, c, h, w])
}

/// CAM before normalization: cam[n, p] = sum_d fc_w[class, d] * features[n, d, p].
pub fn compute_cam_raw(tape: &Tape, out: &ClassifierOutput, class_id: usize) -> Result<Tensor> {
    let fc = tape.value_clone(out.fc_weights);
    let feats = tape.value_clone(out.features);
    let (classes, d) = (fc.rows(), fc.cols());
    if class_id >= classes {
        return Err(Error::Index(format!(
            "class {class_id} out of range 0..{classes}"
        )));
    }
    let fs = feats.shape();
    let (n, fd, h, w) = (fs[0], fs[1], fs[2], fs[3]);
    debug_assert_eq!(fd, d);
    let hw = h * w;
    let mut cam = vec![0.0; n * hw];
    let weights = &fc.data()[class_id * d..(class_id + 1) * d];
    for img in 0..n {
        for (ch, &wv) in weights.iter().enumerate() {
            let plane = &feats.data()[(img * d + ch) * hw..(img * d + ch + 1) * hw];
            let dst = &mut cam[img * hw..(img + 1) * hw];
            for (o, v) in dst.iter_mut().zip(plane) {
                *o += wv * v;
            }
        }
    }
    Ok(Tensor::new(vec![n, h, w], cam))
}

/// Per-image min-max normalization to [0,1]; a constant map maps to 0.5.
pub fn normalize_cam(cam: &Tensor) -> Tensor {
    let s = cam.shape();
    let (n, hw) = (s[0], s[1] * s[2]);
    let mut out = cam.data().to_vec();
    for img in 0..n {
        let slice = &mut out[img * hw..(img + 1) * hw];
        let min = slice.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = slice.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if max - min < 1e-12 {
            for v in slice.iter_mut() {
                *v = 0.5;
            }
        } else {
            for v in slice.iter_mut() {
                *v = (*v - min) / (max - min);
            }
        }
    }
    Tensor::new(s.to_vec(), out)
}

/// Normalized class activation map, [N, h, w] in [0,1].
pub fn compute_cam(tape: &Tape, out: &ClassifierOutput, class_id: usize) -> Result<Tensor> {
    Ok(normalize_cam(&compute_cam_raw(tape, out, class_id)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> BackboneConfig {
        BackboneConfig {
            in_channels: 3,
            stage_channels: vec![16, 32, 64],
            input_side: 32,
            num_classes: 3,
            layer_norm: false,
        }
    }

    #[test]
    fn forward_shapes_default_cfg() {
        let bb = Backbone::init(tiny_cfg(), "student", 1).unwrap();
        let tape = Tape::new();
        let vars = bb.bind(&tape);
        let img = tape.constant(Tensor::zeros(vec![1, 3, 32, 32]));
        let out = bb.forward(&tape, &vars, img).unwrap();
        assert_eq!(tape.shape(out.features), vec![1, 64, 4, 4]);
        assert_eq!(tape.shape(out.logits), vec![1, 3]);
    }

    #[test]
    fn zero_weights_give_zero_logits() {
        let mut bb = Backbone::init(tiny_cfg(), "t", 1).unwrap();
        for p in &mut bb.params {
            p.value = Tensor::zeros(p.value.shape().to_vec());
        }
        let tape = Tape::new();
        let vars = bb.bind(&tape);
        let img = tape.constant(Tensor::full(vec![2, 3, 32, 32], 0.3));
        let out = bb.forward(&tape, &vars, img).unwrap();
        assert!(tape.value_clone(out.logits).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn wrong_input_side_errors() {
        let bb = Backbone::init(tiny_cfg(), "t", 1).unwrap();
        let tape = Tape::new();
        let vars = bb.bind(&tape);
        let img = tape.constant(Tensor::zeros(vec![1, 3, 16, 16]));
        assert!(matches!(
            bb.forward(&tape, &vars, img),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn logits_match_gap_fc_recomputation() {
        let bb = Backbone::init(tiny_cfg(), "t", 7).unwrap();
        let tape = Tape::new();
        let vars = bb.bind(&tape);
        let mut r = crate::rng::stream(3, "img");
        let img = tape.constant(crate::rng::uniform_tensor(&mut r, vec![2, 3, 32, 32], 0.0, 1.0));
        let out = bb.forward(&tape, &vars, img).unwrap();
        // independent recomputation of GAP + fc from the returned features
        let feats = tape.value_clone(out.features);
        let fc_w = tape.value_clone(out.fc_weights);
        let fc_b = &bb.params[bb.params.len() - 1].value;
        let (n, d, hw) = (feats.shape()[0], feats.shape()[1], 16);
        let logits = tape.value_clone(out.logits);
        for img_i in 0..n {
            for c in 0..3 {
                let mut want = fc_b.data()[c];
                for ch in 0..d {
                    let gap: f64 = feats.data()
                        [(img_i * d + ch) * hw..(img_i * d + ch + 1) * hw]
                        .iter()
                        .sum::<f64>()
                        / hw as f64;
                    want += gap * fc_w.at2(c, ch);
                }
                assert!((logits.at2(img_i, c) - want).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn batch_forward_equals_per_image() {
        let bb = Backbone::init(tiny_cfg(), "t", 9).unwrap();
        let mut r = crate::rng::stream(5, "img");
        let batch = crate::rng::uniform_tensor(&mut r, vec![3, 3, 32, 32], 0.0, 1.0);
        let tape = Tape::new();
        let vars = bb.bind(&tape);
        let img = tape.constant(batch.clone());
        let out = bb.forward(&tape, &vars, img).unwrap();
        let batch_logits = tape.value_clone(out.logits);
        for i in 0..3 {
            let tape2 = Tape::new();
            let vars2 = bb.bind(&tape2);
            let one = Tensor::new(
                vec![1, 3, 32, 32],
                batch.data()[i * 3 * 1024..(i + 1) * 3 * 1024].to_vec(),
            );
            let v = tape2.constant(one);
            let o = bb.forward(&tape2, &vars2, v).unwrap();
            let l = tape2.value_clone(o.logits);
            for c in 0..3 {
                assert!((l.at2(0, c) - batch_logits.at2(i, c)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn cam_one_hot_fc_row_selects_channel() {
        let mut bb = Backbone::init(tiny_cfg(), "t", 11).unwrap();
        let n_params = bb.params.len();
        let mut fc = Tensor::zeros(vec![3, 64]);
        fc.data_mut()[0] = 1.0; // class 0 reads channel 0
        bb.params[n_params - 2].value = fc;
        let tape = Tape::new();
        let vars = bb.bind(&tape);
        let mut r = crate::rng::stream(2, "img");
        let img = tape.constant(crate::rng::uniform_tensor(&mut r, vec![1, 3, 32, 32], 0.0, 1.0));
        let out = bb.forward(&tape, &vars, img).unwrap();
        let raw = compute_cam_raw(&tape, &out, 0).unwrap();
        let feats = tape.value_clone(out.features);
        for p in 0..16 {
            assert!((raw.data()[p] - feats.data()[p]).abs() < 1e-12);
        }
    }

    #[test]
    fn cam_constant_map_normalizes_to_half() {
        let cam = Tensor::full(vec![2, 4, 4], 3.3);
        let norm = normalize_cam(&cam);
        assert!(norm.data().iter().all(|v| *v == 0.5));
    }

    #[test]
    fn cam_brute_force_oracle() {
        let bb = Backbone::init(tiny_cfg(), "t", 13).unwrap();
        let tape = Tape::new();
        let vars = bb.bind(&tape);
        let mut r = crate::rng::stream(8, "img");
        let img = tape.constant(crate::rng::uniform_tensor(&mut r, vec![2, 3, 32, 32], 0.0, 1.0));
        let out = bb.forward(&tape, &vars, img).unwrap();
        let raw = compute_cam_raw(&tape, &out, 1).unwrap();
        let feats = tape.value_clone(out.features);
        let fc = tape.value_clone(out.fc_weights);
        for img_i in 0..2 {
            for y in 0..4 {
                for x in 0..4 {
                    let mut want = 0.0;
                    for ch in 0..64 {
                        want += fc.at2(1, ch) * feats.data()[(img_i * 64 + ch) * 16 + y * 4 + x];
                    }
                    let got = raw.data()[img_i * 16 + y * 4 + x];
                    assert!((got - want).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn cam_class_out_of_range() {
        let bb = Backbone::init(tiny_cfg(), "t", 1).unwrap();
        let tape = Tape::new();
        let vars = bb.bind(&tape);
        let img = tape.constant(Tensor::zeros(vec![1, 3, 32, 32]));
        let out = bb.forward(&tape, &vars, img).unwrap();
        assert!(matches!(
            compute_cam(&tape, &out, 3),
            Err(Error::Index(_))
        ));
    }

    #[test]
    fn cam_linearity_and_argmax_invariance() {
        let bb = Backbone::init(tiny_cfg(), "t", 17).unwrap();
        let tape = Tape::new();
        let vars = bb.bind(&tape);
        let mut r = crate::rng::stream(21, "img");
        let img = tape.constant(crate::rng::uniform_tensor(&mut r, vec![1, 3, 32, 32], 0.0, 1.0));
        let out = bb.forward(&tape, &vars, img).unwrap();
        let raw = compute_cam_raw(&tape, &out, 0).unwrap();
        // scaling features by alpha scales the raw CAM by alpha
        let alpha = 2.5;
        let scaled = tape.scale(out.features, alpha);
        let out2 = ClassifierOutput {
            features: scaled,
            gap: out.gap,
            logits: out.logits,
            fc_weights: out.fc_weights,
        };
        let raw2 = compute_cam_raw(&tape, &out2, 0).unwrap();
        for (a, b) in raw.data().iter().zip(raw2.data()) {
            assert!((a * alpha - b).abs() < 1e-10);
        }
        // argmax location unchanged by min-max normalization
        let norm = normalize_cam(&raw);
        let argmax = |d: &[f64]| {
            d.iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0
        };
        assert_eq!(argmax(raw.data()), argmax(norm.data()));
    }

    #[test]
    fn frozen_backbone_gets_no_grads() {
        let mut bb = Backbone::init(tiny_cfg(), "teacher", 1).unwrap();
        bb.freeze();
        let tape = Tape::new();
        let vars = bb.bind(&tape);
        let img = tape.constant(Tensor::full(vec![1, 3, 32, 32], 0.2));
        let out = bb.forward(&tape, &vars, img).unwrap();
        let loss = tape.mean_all(out.logits);
        tape.backward(loss).unwrap();
        bb.collect_grads(&tape, &vars);
        assert!(bb.params.iter().all(|p| p.grad.is_none()));
    }
}
