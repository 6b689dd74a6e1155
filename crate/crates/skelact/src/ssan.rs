//! Temporal attention over sub-image features: an LSTM scans the n
//! sub-images, and at each step the previous hidden state produces a spatial
//! (softmax over K² positions) or spatial-channel (sigmoid, K²×D) mask that
//! pools the K×K×D feature block into the next LSTM input.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{AffineLayer, ConvNet, NnError};
use crate::tensor::{concat, Graph, Parameter, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum SsanError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("expected feature blocks of shape [N,{k},{k},{d}], got {got:?}")]
    BadFeatureShape { k: usize, d: usize, got: Vec<usize> },
    #[error("empty feature list")]
    Empty,
}

type Result<T> = std::result::Result<T, SsanError>;

fn uniform_init(rng: &mut ChaCha8Rng, fan_in: usize, len: usize) -> Vec<f64> {
    let bound = (1.0 / fan_in as f64).sqrt();
    (0..len).map(|_| rng.gen_range(-bound..bound)).collect()
}

pub struct LstmCell {
    pub weight: Parameter, // [d + input, 4d], gate order i, f, o, g
    pub bias: Parameter,   // [4d]
    pub hidden: usize,
    pub input: usize,
}

impl LstmCell {
    pub fn new(rng: &mut ChaCha8Rng, name: &str, input: usize, hidden: usize) -> Self {
        let rows = hidden + input;
        Self {
            weight: Parameter::new(
                format!("{name}.w"),
                vec![rows, 4 * hidden],
                uniform_init(rng, rows, rows * 4 * hidden),
            ),
            bias: Parameter::new(format!("{name}.b"), vec![4 * hidden], vec![0.0; 4 * hidden]),
            hidden,
            input,
        }
    }

    /// One step: gates from an affine map of [h_prev; x], then
    /// `c = f⊙c_prev + i⊙g`, `h = o⊙tanh(c)`. Returns (h, c).
    pub fn step(
        &self,
        g: &Graph,
        x: &Tensor,
        h_prev: &Tensor,
        c_prev: &Tensor,
    ) -> Result<(Tensor, Tensor)> {
        let d = self.hidden;
        let z = concat(&[h_prev.clone(), x.clone()], 1)?;
        let gates = z.affine(&g.bind(&self.weight), &g.bind(&self.bias))?;
        let i = gates.slice(1, 0, d)?.sigmoid();
        let f = gates.slice(1, d, d)?.sigmoid();
        let o = gates.slice(1, 2 * d, d)?.sigmoid();
        let cand = gates.slice(1, 3 * d, d)?.tanh();
        let c = f.mul(c_prev)?.add(&i.mul(&cand)?)?;
        let h = o.mul(&c.tanh())?;
        Ok((h, c))
    }

    pub fn collect_params(&self, out: &mut Vec<Parameter>) {
        out.push(self.weight.clone());
        out.push(self.bias.clone());
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttentionMode {
    /// One weight row per spatial position; the mask is a probability
    /// distribution over the K² positions.
    SoftmaxSpatial,
    /// One weight row per (position, channel) pair; each mask entry is an
    /// independent sigmoid, and pooling divides by K².
    SigmoidSpatialChannel,
}

pub struct AttentionHead {
    pub mode: AttentionMode,
    pub weight: Parameter, // [d, K²] or [d, K²·D]
    pub k: usize,
    pub channels: usize,
}

impl AttentionHead {
    pub fn new(
        rng: &mut ChaCha8Rng,
        name: &str,
        mode: AttentionMode,
        hidden: usize,
        k: usize,
        channels: usize,
    ) -> Self {
        let cols = match mode {
            AttentionMode::SoftmaxSpatial => k * k,
            AttentionMode::SigmoidSpatialChannel => k * k * channels,
        };
        Self {
            mode,
            weight: Parameter::new(
                format!("{name}.w"),
                vec![hidden, cols],
                uniform_init(rng, hidden, hidden * cols),
            ),
            k,
            channels,
        }
    }

    /// Mask from the previous hidden state `h: [N, d]`. Softmax mode returns
    /// [N, K²]; sigmoid mode returns [N, K², D].
    pub fn mask(&self, g: &Graph, h: &Tensor) -> Result<Tensor> {
        let n = h.shape()[0];
        let zeros_len = self.weight.shape()[1];
        let zero_bias = g.zeros(vec![zeros_len]);
        let logits = h.affine(&g.bind(&self.weight), &zero_bias)?;
        Ok(match self.mode {
            AttentionMode::SoftmaxSpatial => logits.softmax(&[1])?,
            AttentionMode::SigmoidSpatialChannel => logits
                .sigmoid()
                .reshape(vec![n, self.k * self.k, self.channels])?,
        })
    }

    /// Pool features `[N, K, K, D]` with the mask into `[N, D]`.
    pub fn apply(&self, features: &Tensor, mask: &Tensor) -> Result<Tensor> {
        let shape = features.shape();
        if shape.len() != 4 || shape[1] != self.k || shape[2] != self.k || shape[3] != self.channels
        {
            return Err(SsanError::BadFeatureShape {
                k: self.k,
                d: self.channels,
                got: shape,
            });
        }
        let n = shape[0];
        let kk = self.k * self.k;
        let flat = features.reshape(vec![n, kk, self.channels])?;
        match self.mode {
            AttentionMode::SoftmaxSpatial => {
                let m = mask.reshape(vec![n, kk, 1])?;
                Ok(flat.mul(&m)?.sum(&[1])?)
            }
            AttentionMode::SigmoidSpatialChannel => {
                Ok(flat.mul(mask)?.sum(&[1])?.scale(1.0 / kk as f64))
            }
        }
    }

    pub fn collect_params(&self, out: &mut Vec<Parameter>) {
        out.push(self.weight.clone());
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Readout {
    /// Average the per-step logits over all n steps (default).
    MeanLogits,
    /// Classify from the final hidden state only.
    LastStep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SsanConfig {
    pub hidden: usize,
    pub mode: AttentionMode,
    pub readout: Readout,
    pub num_classes: usize,
    /// Feature block side K and channel count D from the backbone.
    pub feature_size: usize,
    pub feature_channels: usize,
}

pub struct SsanModel {
    pub config: SsanConfig,
    pub head: AttentionHead,
    pub cell: LstmCell,
    pub classifier: AffineLayer,
}

impl SsanModel {
    pub fn new(config: SsanConfig, rng: &mut ChaCha8Rng) -> Self {
        let head = AttentionHead::new(
            rng,
            "ssan.attn",
            config.mode,
            config.hidden,
            config.feature_size,
            config.feature_channels,
        );
        let cell = LstmCell::new(rng, "ssan.lstm", config.feature_channels, config.hidden);
        let classifier = AffineLayer::new(rng, "ssan.cls", config.hidden, config.num_classes);
        Self {
            config,
            head,
            cell,
            classifier,
        }
    }

    /// Scan the n feature blocks. State starts at zero; the step-t mask comes
    /// from h_{t-1}, so the first mask is input-independent.
    pub fn forward(&self, g: &Graph, features: &[Tensor]) -> Result<Tensor> {
        if features.is_empty() {
            return Err(SsanError::Empty);
        }
        let n = features[0].shape()[0];
        let d = self.config.hidden;
        let mut h = g.zeros(vec![n, d]);
        let mut c = g.zeros(vec![n, d]);
        let mut step_logits = Vec::with_capacity(features.len());
        for feat in features {
            let mask = self.head.mask(g, &h)?;
            let x = self.head.apply(feat, &mask)?;
            let (h2, c2) = self.cell.step(g, &x, &h, &c)?;
            h = h2;
            c = c2;
            step_logits.push(self.classifier.forward(g, &h)?);
        }
        match self.config.readout {
            Readout::LastStep => Ok(step_logits.pop().unwrap()),
            Readout::MeanLogits => {
                let mut acc = step_logits[0].clone();
                for l in &step_logits[1..] {
                    acc = acc.add(l)?;
                }
                Ok(acc.scale(1.0 / step_logits.len() as f64))
            }
        }
    }

    pub fn parameters(&self) -> Vec<Parameter> {
        let mut out = Vec::new();
        self.head.collect_params(&mut out);
        self.cell.collect_params(&mut out);
        self.classifier.collect_params(&mut out);
        out
    }
}

/// Backbone features for each sub-image (weights shared across the n images),
/// then the temporal scan. `images` holds one [N,H,W,C] batch per sub-image.
pub fn ssan_with_backbone(
    g: &Graph,
    net: &ConvNet,
    ssan: &SsanModel,
    images: &[Tensor],
    training: bool,
) -> Result<Tensor> {
    if images.is_empty() {
        return Err(SsanError::Empty);
    }
    let features = images
        .iter()
        .map(|img| net.feature_forward(g, img, training))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    ssan.forward(g, &features)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{AttentionKind, NetworkConfig};
    use crate::tensor::{backward, gradcheck::max_relative_error, Graph};
    use rand::prelude::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn rand_values(n: usize, r: &mut ChaCha8Rng) -> Vec<f64> {
        (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()
    }

    fn sigmoid(v: f64) -> f64 {
        1.0 / (1.0 + (-v).exp())
    }

    #[test]
    fn lstm_step_zero_weights() {
        let mut r = rng(1);
        let cell = LstmCell::new(&mut r, "c", 3, 2);
        cell.weight.set_values(vec![0.0; 5 * 8]);
        let g = Graph::new();
        let x = g.tensor(vec![1, 3], vec![0.3, -0.7, 1.1]);

        // Zero previous memory: everything collapses to zero hidden state.
        let h0 = g.zeros(vec![1, 2]);
        let c0 = g.zeros(vec![1, 2]);
        let (h, c) = cell.step(&g, &x, &h0, &c0).unwrap();
        assert_eq!(h.values(), vec![0.0, 0.0]);
        assert_eq!(c.values(), vec![0.0, 0.0]);

        // Nonzero memory: c' = 0.5c, h' = 0.5 tanh(0.5c).
        let c0 = g.tensor(vec![1, 2], vec![0.8, -0.4]);
        let (h, c) = cell.step(&g, &x, &h0, &c0).unwrap();
        for j in 0..2 {
            let cv = 0.5 * c0.values()[j];
            assert!((c.values()[j] - cv).abs() < 1e-12);
            assert!((h.values()[j] - 0.5 * cv.tanh()).abs() < 1e-12);
        }
    }

    #[test]
    fn lstm_step_matches_scalar_oracle() {
        let mut r = rng(2);
        let (din, d) = (3, 4);
        let cell = LstmCell::new(&mut r, "c", din, d);
        let g = Graph::new();
        let x = g.tensor(vec![1, din], rand_values(din, &mut r));
        let h0 = g.tensor(vec![1, d], rand_values(d, &mut r));
        let c0 = g.tensor(vec![1, d], rand_values(d, &mut r));
        let (h, c) = cell.step(&g, &x, &h0, &c0).unwrap();

        let w = cell.weight.values();
        let b = cell.bias.values();
        let z: Vec<f64> = h0.values().into_iter().chain(x.values()).collect();
        for j in 0..d {
            let gate = |col: usize| -> f64 {
                b[col] + z.iter().enumerate().map(|(r_, zv)| zv * w[r_ * 4 * d + col]).sum::<f64>()
            };
            let i = sigmoid(gate(j));
            let f = sigmoid(gate(d + j));
            let o = sigmoid(gate(2 * d + j));
            let cand = gate(3 * d + j).tanh();
            let cj = f * c0.values()[j] + i * cand;
            let hj = o * cj.tanh();
            assert!((c.values()[j] - cj).abs() < 1e-12);
            assert!((h.values()[j] - hj).abs() < 1e-12);
        }
    }

    #[test]
    fn lstm_forget_gate_carries_memory() {
        let mut r = rng(3);
        let d = 3;
        let cell = LstmCell::new(&mut r, "c", 2, d);
        cell.weight.set_values(vec![0.0; (d + 2) * 4 * d]);
        // Saturate f towards 1 and i towards 0 via biases.
        let mut bias = vec![0.0; 4 * d];
        for j in 0..d {
            bias[j] = -30.0; // input gate
            bias[d + j] = 30.0; // forget gate
        }
        cell.bias.set_values(bias);
        let g = Graph::new();
        let x = g.tensor(vec![1, 2], vec![0.0, 0.0]);
        let h0 = g.zeros(vec![1, d]);
        let c0 = g.tensor(vec![1, d], vec![0.9, -0.2, 0.5]);
        let (_, c) = cell.step(&g, &x, &h0, &c0).unwrap();
        for j in 0..d {
            assert!((c.values()[j] - c0.values()[j]).abs() < 1e-6);
        }
    }

    #[test]
    fn attention_masks_zero_weights() {
        let mut r = rng(4);
        let (d, k, ch) = (3, 2, 2);
        let g = Graph::new();
        let h = g.tensor(vec![1, d], vec![0.4, -1.0, 2.2]);

        let head = AttentionHead::new(&mut r, "a", AttentionMode::SoftmaxSpatial, d, k, ch);
        head.weight.set_values(vec![0.0; d * k * k]);
        let m = head.mask(&g, &h).unwrap();
        assert_eq!(m.shape(), vec![1, 4]);
        for v in m.values() {
            assert!((v - 0.25).abs() < 1e-12);
        }

        let head = AttentionHead::new(&mut r, "b", AttentionMode::SigmoidSpatialChannel, d, k, ch);
        head.weight.set_values(vec![0.0; d * k * k * ch]);
        let m = head.mask(&g, &h).unwrap();
        assert_eq!(m.shape(), vec![1, 4, 2]);
        for v in m.values() {
            assert!((v - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_mask_normalizes_for_random_weights() {
        let mut r = rng(5);
        let head = AttentionHead::new(&mut r, "a", AttentionMode::SoftmaxSpatial, 6, 3, 4);
        let g = Graph::new();
        let h = g.tensor(vec![5, 6], rand_values(30, &mut r));
        let m = head.mask(&g, &h).unwrap();
        for row in m.values().chunks(9) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn apply_attention_oracles() {
        let mut r = rng(6);
        let (k, ch) = (2, 3);
        let head = AttentionHead::new(&mut r, "a", AttentionMode::SoftmaxSpatial, 4, k, ch);
        let g = Graph::new();
        let feats = g.tensor(vec![1, k, k, ch], rand_values(k * k * ch, &mut r));

        // Uniform mask → spatial mean.
        let uniform = g.tensor(vec![1, k * k], vec![0.25; 4]);
        let x = head.apply(&feats, &uniform).unwrap();
        let fv = feats.values();
        for z in 0..ch {
            let mean = (0..4).map(|i| fv[i * ch + z]).sum::<f64>() / 4.0;
            assert!((x.values()[z] - mean).abs() < 1e-12);
        }

        // One-hot mask at position 2 → that position's channel vector.
        let onehot = g.tensor(vec![1, k * k], vec![0.0, 0.0, 1.0, 0.0]);
        let x = head.apply(&feats, &onehot).unwrap();
        for z in 0..ch {
            assert!((x.values()[z] - fv[2 * ch + z]).abs() < 1e-12);
        }

        // Random mask → triple-loop oracle; also convex-hull bound per channel.
        let mut mask_vals = rand_values(4, &mut r).iter().map(|v| v.abs()).collect::<Vec<_>>();
        let s: f64 = mask_vals.iter().sum();
        mask_vals.iter_mut().for_each(|v| *v /= s);
        let mask = g.tensor(vec![1, k * k], mask_vals.clone());
        let x = head.apply(&feats, &mask).unwrap();
        for z in 0..ch {
            let want: f64 = (0..4).map(|i| mask_vals[i] * fv[i * ch + z]).sum();
            assert!((x.values()[z] - want).abs() < 1e-12);
            let lo = (0..4).map(|i| fv[i * ch + z]).fold(f64::INFINITY, f64::min);
            let hi = (0..4).map(|i| fv[i * ch + z]).fold(f64::NEG_INFINITY, f64::max);
            assert!(x.values()[z] >= lo - 1e-12 && x.values()[z] <= hi + 1e-12);
        }

        // Sigmoid mode matches its loop oracle with the 1/K² factor.
        let head = AttentionHead::new(&mut r, "b", AttentionMode::SigmoidSpatialChannel, 4, k, ch);
        let mvals = rand_values(k * k * ch, &mut r).iter().map(|v| sigmoid(*v)).collect::<Vec<_>>();
        let mask = g.tensor(vec![1, k * k, ch], mvals.clone());
        let x = head.apply(&feats, &mask).unwrap();
        for z in 0..ch {
            let want: f64 =
                (0..4).map(|i| mvals[i * ch + z] * fv[i * ch + z]).sum::<f64>() / 4.0;
            assert!((x.values()[z] - want).abs() < 1e-12);
        }
    }

    fn tiny_config(mode: AttentionMode) -> SsanConfig {
        SsanConfig {
            hidden: 4,
            mode,
            readout: Readout::MeanLogits,
            num_classes: 3,
            feature_size: 2,
            feature_channels: 3,
        }
    }

    #[test]
    fn ssan_forward_matches_unrolled_trace() {
        let mut r = rng(7);
        let model = SsanModel::new(tiny_config(AttentionMode::SoftmaxSpatial), &mut r);
        let g = Graph::new();
        let feats: Vec<Tensor> = (0..3)
            .map(|_| g.tensor(vec![2, 2, 2, 3], rand_values(24, &mut r)))
            .collect();
        let logits = model.forward(&g, &feats).unwrap();
        assert_eq!(logits.shape(), vec![2, 3]);

        // Hand-unrolled trace using the same public pieces, step by step.
        let mut h = g.zeros(vec![2, 4]);
        let mut c = g.zeros(vec![2, 4]);
        let mut acc = vec![0.0; 6];
        for feat in &feats {
            let m = model.head.mask(&g, &h).unwrap();
            let x = model.head.apply(feat, &m).unwrap();
            let (h2, c2) = model.cell.step(&g, &x, &h, &c).unwrap();
            h = h2;
            c = c2;
            let l = model.classifier.forward(&g, &h).unwrap();
            for (a, v) in acc.iter_mut().zip(l.values()) {
                *a += v / 3.0;
            }
        }
        for (a, b) in acc.iter().zip(logits.values()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn ssan_single_step_and_zero_weight_mask() {
        let mut r = rng(8);
        let model = SsanModel::new(tiny_config(AttentionMode::SoftmaxSpatial), &mut r);
        let g = Graph::new();
        let feat = g.tensor(vec![1, 2, 2, 3], rand_values(12, &mut r));
        let logits = model.forward(&g, &[feat]).unwrap();
        assert_eq!(logits.shape(), vec![1, 3]);
        assert!(model.forward(&g, &[]).is_err());

        // Zero LSTM weights keep h at zero, so every step's mask is the
        // input-independent uniform mask.
        let len = model.cell.weight.values().len();
        model.cell.weight.set_values(vec![0.0; len]);
        let h = g.zeros(vec![1, 4]);
        let m1 = model.head.mask(&g, &h).unwrap();
        let feats: Vec<Tensor> = (0..2)
            .map(|_| g.tensor(vec![1, 2, 2, 3], rand_values(12, &mut r)))
            .collect();
        let mut hh = g.zeros(vec![1, 4]);
        let mut cc = g.zeros(vec![1, 4]);
        for feat in &feats {
            let m = model.head.mask(&g, &hh).unwrap();
            assert_eq!(m.values(), m1.values());
            let x = model.head.apply(feat, &m).unwrap();
            let (h2, c2) = model.cell.step(&g, &x, &hh, &cc).unwrap();
            hh = h2;
            cc = c2;
            assert_eq!(hh.values(), vec![0.0; 4]);
        }
    }

    #[test]
    fn ssan_gradient_check_tiny() {
        for mode in [AttentionMode::SoftmaxSpatial, AttentionMode::SigmoidSpatialChannel] {
            let mut r = rng(9);
            let model = SsanModel::new(tiny_config(mode), &mut r);
            let inputs: Vec<Parameter> = (0..2)
                .map(|t| Parameter::new(format!("f{t}"), vec![1, 2, 2, 3], rand_values(12, &mut r)))
                .collect();
            let mut params = model.parameters();
            params.extend(inputs.iter().cloned());
            let err = max_relative_error(&params, |g| {
                let feats: Vec<Tensor> = inputs.iter().map(|p| g.bind(p)).collect();
                let logits = model.forward(g, &feats).unwrap();
                crate::tensor::cross_entropy(&logits, &[1]).unwrap()
            });
            assert!(err < 1e-4, "ssan {mode:?}: {err}");
        }
    }

    #[test]
    fn backbone_integration_gradients_everywhere() {
        let mut r = rng(10);
        let net = crate::nn::ConvNet::new(
            NetworkConfig::tiny(3, AttentionKind::Glan),
            &mut r,
        )
        .unwrap();
        let cfg = SsanConfig {
            hidden: 4,
            mode: AttentionMode::SoftmaxSpatial,
            readout: Readout::MeanLogits,
            num_classes: 3,
            feature_size: net.feature_size,
            feature_channels: net.config.stage_channels[3],
        };
        let model = SsanModel::new(cfg, &mut r);
        let g = Graph::new();
        let images: Vec<Tensor> = (0..2)
            .map(|_| g.tensor(vec![1, 28, 28, 3], rand_values(28 * 28 * 3, &mut r)))
            .collect();
        let logits = ssan_with_backbone(&g, &net, &model, &images, true).unwrap();
        assert_eq!(logits.shape(), vec![1, 3]);
        let loss = crate::tensor::cross_entropy(&logits, &[2]).unwrap();
        backward(&loss).unwrap();
        g.flush_param_grads();
        for p in net.parameters().into_iter().chain(model.parameters()) {
            // The backbone's own pooled classifier is bypassed in this path.
            if !p.is_trainable() || p.name().starts_with("classifier.") {
                continue;
            }
            assert!(
                p.grad().iter().any(|&v| v != 0.0),
                "zero grad at {}",
                p.name()
            );
        }

        // Weight sharing: same sub-image input → identical features.
        let g2 = Graph::new();
        let img = g2.tensor(vec![1, 28, 28, 3], images[0].values());
        let f1 = net.feature_forward(&g2, &img, false).unwrap();
        let f2 = net.feature_forward(&g2, &img, false).unwrap();
        assert_eq!(f1.values(), f2.values());
    }
}
