//! Skeleton sequences and their encoding into fixed-size skeleton images.
//!
//! A sequence is laid out as a raw time × order × axis grid (row = frame,
//! column = joint-order entry, channel = coordinate axis), min-max scaled per
//! channel into 0..255 and bilinearly resized to a square target. Sequences can
//! also be split into overlapped sub-sequences, one image per window.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::skeleton::{JointOrder, OrderKind};

#[derive(Debug, Error)]
pub enum EncodeError {
    #[error("sequence has no frames")]
    EmptySequence,
    #[error("order references joint {0} but the sequence has {1} joints")]
    OrderOutOfRange(usize, usize),
    #[error("resize target {0}x{1} must be nonzero")]
    ZeroSizeTarget(usize, usize),
    #[error("cannot split {frames} frames into {windows} windows")]
    TooFewFrames { frames: usize, windows: usize },
    #[error("overlap rate {0} outside [0, 1)")]
    BadOverlap(f64),
}

/// One frame: per-joint coordinates (row-major joints × axes) plus a per-joint
/// confidence in [0, 1]. Capture data uses confidence 1.0 throughout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkeletonFrame {
    pub coords: Vec<f64>,
    pub confidence: Vec<f64>,
}

impl SkeletonFrame {
    pub fn coord(&self, joint: usize, axis: usize, axis_count: usize) -> f64 {
        self.coords[joint * axis_count + axis]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkeletonSequence {
    pub joint_count: usize,
    pub axis_count: usize,
    pub frames: Vec<SkeletonFrame>,
    pub frame_rate: f64,
    pub person_id: u32,
}

impl SkeletonSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Mean confidence over all frames and joints; 1.0 for an empty sequence.
    pub fn mean_confidence(&self) -> f64 {
        let mut sum = 0.0;
        let mut count = 0usize;
        for frame in &self.frames {
            for &c in &frame.confidence {
                sum += c;
                count += 1;
            }
        }
        if count == 0 {
            1.0
        } else {
            sum / count as f64
        }
    }
}

/// H × W × C grid of pixel values in [0, 255], H = W = target size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkeletonImage {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Row-major (h, w, c).
    pub pixels: Vec<f64>,
    pub order_kind: String,
    pub source_frames: usize,
    pub channel_semantics: Vec<String>,
}

impl SkeletonImage {
    pub fn get(&self, h: usize, w: usize, c: usize) -> f64 {
        self.pixels[(h * self.width + w) * self.channels + c]
    }
}

/// Number of sub-images `n` and overlap rate `alpha` in [0, 1).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubSequenceConfig {
    pub n: usize,
    pub alpha: f64,
}

impl SubSequenceConfig {
    pub fn new(n: usize, alpha: f64) -> Result<Self, EncodeError> {
        if !(0.0..1.0).contains(&alpha) {
            return Err(EncodeError::BadOverlap(alpha));
        }
        Ok(Self { n: n.max(1), alpha })
    }

    /// Window length: T = t_sub · [1 + (1 − α)(n − 1)], floored.
    pub fn window_len(&self, total_frames: usize) -> usize {
        let denom = 1.0 + (1.0 - self.alpha) * (self.n as f64 - 1.0);
        ((total_frames as f64 / denom).floor() as usize).max(1)
    }
}

fn order_kind_tag(kind: OrderKind) -> &'static str {
    match kind {
        OrderKind::Chain => "chain",
        OrderKind::EulerTour => "tssi",
    }
}

/// Raw pre-normalization grid: T × order-len × channels. Channel layout is the
/// coordinate axes, with confidence appended as a third channel for 2D input.
pub fn raw_grid(seq: &SkeletonSequence, order: &JointOrder) -> Result<Vec<f64>, EncodeError> {
    if seq.is_empty() {
        return Err(EncodeError::EmptySequence);
    }
    for id in order.ids() {
        if id < 1 || id > seq.joint_count {
            return Err(EncodeError::OrderOutOfRange(id, seq.joint_count));
        }
    }
    let channels = image_channels(seq.axis_count);
    let width = order.len();
    let mut grid = vec![0.0; seq.len() * width * channels];
    for (t, frame) in seq.frames.iter().enumerate() {
        for (col, id) in order.ids().enumerate() {
            let joint = id - 1;
            for c in 0..channels {
                let v = if c < seq.axis_count {
                    frame.coord(joint, c, seq.axis_count)
                } else {
                    frame.confidence[joint]
                };
                grid[(t * width + col) * channels + c] = v;
            }
        }
    }
    Ok(grid)
}

/// Channel count of the encoded image: the coordinate axes, plus confidence
/// as a third channel when the input is 2D.
pub fn image_channels(axis_count: usize) -> usize {
    if axis_count == 2 {
        3
    } else {
        axis_count
    }
}

fn channel_semantics(axis_count: usize) -> Vec<String> {
    let axes = ["x", "y", "z", "w"];
    let mut out: Vec<String> = (0..axis_count.min(4)).map(|a| axes[a].to_string()).collect();
    if axis_count == 2 {
        out.push("confidence".to_string());
    }
    out
}

/// Min-max scales a channel plane into [0, 255]; a constant plane maps to 0.
pub fn normalize_channel(values: &mut [f64]) {
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for &v in values.iter() {
        min = min.min(v);
        max = max.max(v);
    }
    if max <= min {
        values.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    let span = max - min;
    for v in values.iter_mut() {
        *v = 255.0 * (*v - min) / span;
    }
}

/// Align-corners bilinear resize of an H × W × C grid. A same-size call
/// reproduces the input exactly and corner pixels are always preserved.
pub fn resize_bilinear(
    grid: &[f64],
    h: usize,
    w: usize,
    channels: usize,
    out_h: usize,
    out_w: usize,
) -> Result<Vec<f64>, EncodeError> {
    if out_h == 0 || out_w == 0 {
        return Err(EncodeError::ZeroSizeTarget(out_h, out_w));
    }
    assert_eq!(grid.len(), h * w * channels, "grid shape mismatch");
    let mut out = vec![0.0; out_h * out_w * channels];
    let scale = |out_i: usize, out_n: usize, in_n: usize| -> f64 {
        if out_n <= 1 || in_n <= 1 {
            0.0
        } else {
            out_i as f64 * (in_n as f64 - 1.0) / (out_n as f64 - 1.0)
        }
    };
    for oy in 0..out_h {
        let sy = scale(oy, out_h, h);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let fy = sy - y0 as f64;
        for ox in 0..out_w {
            let sx = scale(ox, out_w, w);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let fx = sx - x0 as f64;
            for c in 0..channels {
                let at = |y: usize, x: usize| grid[(y * w + x) * channels + c];
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out[(oy * out_w + ox) * channels + c] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    Ok(out)
}

/// Encodes a sequence into one skeleton image under the given column order.
pub fn encode(
    seq: &SkeletonSequence,
    order: &JointOrder,
    target_size: usize,
) -> Result<SkeletonImage, EncodeError> {
    let channels = image_channels(seq.axis_count);
    let width = order.len();
    let height = seq.len();
    let mut grid = raw_grid(seq, order)?;

    // Per-channel min-max over the whole (sub-)sequence.
    for c in 0..channels {
        let mut plane: Vec<f64> = (0..height * width)
            .map(|i| grid[i * channels + c])
            .collect();
        normalize_channel(&mut plane);
        for (i, v) in plane.into_iter().enumerate() {
            grid[i * channels + c] = v;
        }
    }

    let pixels = resize_bilinear(&grid, height, width, channels, target_size, target_size)?;
    Ok(SkeletonImage {
        height: target_size,
        width: target_size,
        channels,
        pixels,
        order_kind: order_kind_tag(order.kind).to_string(),
        source_frames: height,
        channel_semantics: channel_semantics(seq.axis_count),
    })
}

/// Splits a sequence into `n` equal overlapped windows. Window length and
/// stride are floored; the last window is shifted left rather than overrun.
pub fn split_subsequences(
    seq: &SkeletonSequence,
    cfg: SubSequenceConfig,
) -> Result<Vec<SkeletonSequence>, EncodeError> {
    let total = seq.len();
    if total < cfg.n {
        return Err(EncodeError::TooFewFrames {
            frames: total,
            windows: cfg.n,
        });
    }
    let t_sub = cfg.window_len(total);
    let stride = ((t_sub as f64 * (1.0 - cfg.alpha)).floor() as usize).max(1);
    let mut out = Vec::with_capacity(cfg.n);
    for k in 0..cfg.n {
        let mut start = k * stride;
        if start + t_sub > total {
            start = total - t_sub;
        }
        out.push(SkeletonSequence {
            joint_count: seq.joint_count,
            axis_count: seq.axis_count,
            frames: seq.frames[start..start + t_sub].to_vec(),
            frame_rate: seq.frame_rate,
            person_id: seq.person_id,
        });
    }
    Ok(out)
}

/// Window starts as produced by `split_subsequences`.
pub fn subsequence_starts(total: usize, cfg: SubSequenceConfig) -> Result<Vec<usize>, EncodeError> {
    if total < cfg.n {
        return Err(EncodeError::TooFewFrames {
            frames: total,
            windows: cfg.n,
        });
    }
    let t_sub = cfg.window_len(total);
    let stride = ((t_sub as f64 * (1.0 - cfg.alpha)).floor() as usize).max(1);
    Ok((0..cfg.n)
        .map(|k| {
            if k + 1 == cfg.n {
                // The flooring of t_sub and stride can leave the nominal last
                // window short of the end; anchor it to cover the tail.
                total - t_sub
            } else {
                (k * stride).min(total - t_sub)
            }
        })
        .collect())
}

/// One image per sub-sequence window, normalization computed per window.
pub fn encode_subimages(
    seq: &SkeletonSequence,
    order: &JointOrder,
    cfg: SubSequenceConfig,
    target_size: usize,
) -> Result<Vec<SkeletonImage>, EncodeError> {
    split_subsequences(seq, cfg)?
        .iter()
        .map(|window| encode(window, order, target_size))
        .collect()
}

/// Fills missing joints (confidence 0): carry the coordinate forward from the
/// last frame where the joint was seen; joints never seen take the per-frame
/// mean of that frame's visible joints.
pub fn fill_missing_joints(seq: &mut SkeletonSequence) {
    let joints = seq.joint_count;
    let axes = seq.axis_count;
    let mut last_seen: Vec<Option<Vec<f64>>> = vec![None; joints];
    let mut pending: Vec<(usize, usize)> = Vec::new(); // (frame, joint) never seen so far

    for t in 0..seq.frames.len() {
        // Mean position of this frame's visible joints, as the last resort.
        let mut mean = vec![0.0; axes];
        let mut visible = 0usize;
        for j in 0..joints {
            if seq.frames[t].confidence[j] > 0.0 {
                for a in 0..axes {
                    mean[a] += seq.frames[t].coord(j, a, axes);
                }
                visible += 1;
            }
        }
        if visible > 0 {
            mean.iter_mut().for_each(|m| *m /= visible as f64);
        }

        for j in 0..joints {
            if seq.frames[t].confidence[j] > 0.0 {
                let coords: Vec<f64> = (0..axes).map(|a| seq.frames[t].coord(j, a, axes)).collect();
                last_seen[j] = Some(coords);
            } else {
                match &last_seen[j] {
                    Some(coords) => {
                        for a in 0..axes {
                            seq.frames[t].coords[j * axes + a] = coords[a];
                        }
                    }
                    None => {
                        for a in 0..axes {
                            seq.frames[t].coords[j * axes + a] = mean[a];
                        }
                        pending.push((t, j));
                    }
                }
            }
        }
    }
    let _ = pending;
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::skeleton::SkeletonTopology;

    fn seq_from_fn(
        joints: usize,
        axes: usize,
        frames: usize,
        f: impl Fn(usize, usize, usize) -> f64,
    ) -> SkeletonSequence {
        let frames = (0..frames)
            .map(|t| SkeletonFrame {
                coords: (0..joints * axes)
                    .map(|i| f(t, i / axes, i % axes))
                    .collect(),
                confidence: vec![1.0; joints],
            })
            .collect();
        SkeletonSequence {
            joint_count: joints,
            axis_count: axes,
            frames,
            frame_rate: 30.0,
            person_id: 0,
        }
    }

    #[test]
    fn normalize_channel_examples() {
        let mut grid = vec![0.0, 10.0];
        normalize_channel(&mut grid);
        assert_eq!(grid, vec![0.0, 255.0]);

        let mut grid = vec![0.0, 5.0, 10.0];
        normalize_channel(&mut grid);
        assert_eq!(grid, vec![0.0, 127.5, 255.0]);

        let mut grid = vec![7.0, 7.0];
        normalize_channel(&mut grid);
        assert_eq!(grid, vec![0.0, 0.0]);
    }

    #[test]
    fn resize_bilinear_hand_cases() {
        // 2x2 -> 3x3: corners preserved, center is the mean of all four.
        let out = resize_bilinear(&[1.0, 2.0, 3.0, 4.0], 2, 2, 1, 3, 3).unwrap();
        assert_eq!(out[0], 1.0);
        assert_eq!(out[2], 2.0);
        assert_eq!(out[6], 3.0);
        assert_eq!(out[8], 4.0);
        assert!((out[4] - 2.5).abs() < 1e-12);

        // Same-size call is the identity.
        let grid = vec![0.3, -1.0, 2.0, 7.5, 0.0, 9.0];
        let out = resize_bilinear(&grid, 2, 3, 1, 2, 3).unwrap();
        assert_eq!(out, grid);

        // 1x1 -> 4x4 broadcasts the constant.
        let out = resize_bilinear(&[5.0], 1, 1, 1, 4, 4).unwrap();
        assert!(out.iter().all(|&v| v == 5.0));

        assert!(resize_bilinear(&[1.0], 1, 1, 1, 0, 3).is_err());
    }

    #[test]
    fn resize_exact_for_bilinear_fields() {
        // A degree-<=1 per-axis field must be reproduced exactly up to rounding.
        let (h, w) = (4, 5);
        let field = |y: f64, x: f64| 2.0 * y + 3.0 * x + 1.0 + 0.5 * y * x;
        let grid: Vec<f64> = (0..h * w)
            .map(|i| field((i / w) as f64, (i % w) as f64))
            .collect();
        let (oh, ow) = (7, 9);
        let out = resize_bilinear(&grid, h, w, 1, oh, ow).unwrap();
        for oy in 0..oh {
            for ox in 0..ow {
                let sy = oy as f64 * (h as f64 - 1.0) / (oh as f64 - 1.0);
                let sx = ox as f64 * (w as f64 - 1.0) / (ow as f64 - 1.0);
                assert!((out[oy * ow + ox] - field(sy, sx)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn encode_tssi_shape_and_meta() {
        let topo = SkeletonTopology::builtin("ntu25").unwrap();
        let order = topo.euler_tour().unwrap();
        let seq = seq_from_fn(25, 3, 40, |t, j, a| (t * 7 + j * 3 + a) as f64 * 0.1);
        let img = encode(&seq, &order, 224).unwrap();
        assert_eq!((img.height, img.width, img.channels), (224, 224, 3));
        assert_eq!(img.order_kind, "tssi");
        assert_eq!(img.source_frames, 40);
        assert_eq!(raw_grid(&seq, &order).unwrap().len(), 40 * 49 * 3);
        assert!(img.pixels.iter().all(|&v| (0.0..=255.0).contains(&v)));
    }

    #[test]
    fn encode_identity_on_matching_size() {
        // Values already span min/max per channel; same-size resize keeps corners.
        let joints = 8;
        let seq = seq_from_fn(joints, 3, 8, |t, j, a| (t * joints + j + a * 13) as f64);
        let perm: Vec<usize> = (1..=joints).collect();
        let topo = {
            use std::collections::HashMap;
            let mut children = HashMap::new();
            for j in 2..=joints {
                children.entry(j - 1).or_insert_with(Vec::new).push(j);
            }
            SkeletonTopology::new(
                "chain8",
                (0..joints).map(|i| format!("j{i}")).collect(),
                1,
                &children,
            )
        };
        let order = topo.chain_order(&perm).unwrap();
        let img = encode(&seq, &order, 8).unwrap();
        // Corner checks against the normalized raw grid.
        let mut grid = raw_grid(&seq, &order).unwrap();
        for c in 0..3 {
            let mut plane: Vec<f64> = (0..64).map(|i| grid[i * 3 + c]).collect();
            normalize_channel(&mut plane);
            for (i, v) in plane.into_iter().enumerate() {
                grid[i * 3 + c] = v;
            }
        }
        assert_eq!(img.pixels, grid);
    }

    #[test]
    fn constant_sequence_encodes_to_zero() {
        let seq = seq_from_fn(5, 3, 10, |_, _, _| 4.2);
        let topo = SkeletonTopology::builtin("sbu15").unwrap();
        let order = topo
            .chain_order(&(1..=15).collect::<Vec<_>>())
            .ok()
            .map(|_| ());
        let _ = order;
        let perm: Vec<usize> = (1..=5).collect();
        let order = JointOrder {
            order: perm.iter().map(|&i| crate::skeleton::JointId(i)).collect(),
            kind: OrderKind::Chain,
        };
        let img = encode(&seq, &order, 16).unwrap();
        assert!(img.pixels.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn empty_sequence_rejected() {
        let seq = SkeletonSequence {
            joint_count: 3,
            axis_count: 3,
            frames: vec![],
            frame_rate: 30.0,
            person_id: 0,
        };
        let order = JointOrder {
            order: vec![crate::skeleton::JointId(1)],
            kind: OrderKind::Chain,
        };
        assert!(matches!(
            encode(&seq, &order, 8),
            Err(EncodeError::EmptySequence)
        ));
    }

    #[test]
    fn split_subsequences_examples() {
        let seq = seq_from_fn(3, 3, 300, |t, j, a| (t + j + a) as f64);
        let cfg = SubSequenceConfig::new(5, 0.5).unwrap();
        assert_eq!(cfg.window_len(300), 100);
        assert_eq!(
            subsequence_starts(300, cfg).unwrap(),
            vec![0, 50, 100, 150, 200]
        );
        let windows = split_subsequences(&seq, cfg).unwrap();
        assert_eq!(windows.len(), 5);
        assert!(windows.iter().all(|w| w.len() == 100));

        let cfg = SubSequenceConfig::new(1, 0.3).unwrap();
        let windows = split_subsequences(&seq, cfg).unwrap();
        assert_eq!(windows.len(), 1);
        assert_eq!(windows[0].frames, seq.frames);

        let cfg = SubSequenceConfig::new(3, 0.0).unwrap();
        assert_eq!(subsequence_starts(300, cfg).unwrap(), vec![0, 100, 200]);

        let short = seq_from_fn(3, 3, 2, |_, _, _| 0.0);
        assert!(split_subsequences(&short, SubSequenceConfig::new(5, 0.5).unwrap()).is_err());
    }

    #[test]
    fn encode_subimages_counts_and_degenerate() {
        let topo = SkeletonTopology::builtin("ntu25").unwrap();
        let order = topo.euler_tour().unwrap();
        let seq = seq_from_fn(25, 3, 300, |t, j, a| ((t * j) as f64).sin() + a as f64);
        let cfg = SubSequenceConfig::new(5, 0.5).unwrap();
        let images = encode_subimages(&seq, &order, cfg, 56).unwrap();
        assert_eq!(images.len(), 5);
        assert!(images.iter().all(|i| i.height == 56 && i.channels == 3));

        let one = encode_subimages(&seq, &order, SubSequenceConfig::new(1, 0.0).unwrap(), 56)
            .unwrap();
        assert_eq!(one[0], encode(&seq, &order, 56).unwrap());

        let constant = seq_from_fn(25, 3, 300, |_, _, _| 1.0);
        let images = encode_subimages(&constant, &order, cfg, 32).unwrap();
        assert!(images
            .iter()
            .all(|img| img.pixels.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn scaling_covariance_of_encoding() {
        // Positive per-channel affine maps cancel in min-max scaling. Inputs are
        // multiples of 0.25 in a small range so the affine map is exact in
        // floating point and the images compare bitwise equal.
        let topo = SkeletonTopology::builtin("sbu15").unwrap();
        let order = topo.euler_tour().unwrap();
        let base = seq_from_fn(15, 3, 20, |t, j, a| ((t * 5 + j * 3 + a * 7) % 16) as f64 * 0.25);
        let mut scaled = base.clone();
        for frame in &mut scaled.frames {
            for v in &mut frame.coords {
                *v = 2.0 * *v + 1.0;
            }
        }
        let a = encode(&base, &order, 28).unwrap();
        let b = encode(&scaled, &order, 28).unwrap();
        assert_eq!(a.pixels, b.pixels);
    }

    #[test]
    fn raw_grid_row_locality() {
        let topo = SkeletonTopology::builtin("sbu15").unwrap();
        let order = topo.euler_tour().unwrap();
        let seq = seq_from_fn(15, 3, 12, |t, j, a| (t * 100 + j * 5 + a) as f64);
        let grid = raw_grid(&seq, &order).unwrap();

        let mut changed = seq.clone();
        for v in &mut changed.frames[4].coords {
            *v += 1000.0;
        }
        let grid2 = raw_grid(&changed, &order).unwrap();
        let row = order.len() * 3;
        for (i, (a, b)) in grid.iter().zip(grid2.iter()).enumerate() {
            if i / row == 4 {
                assert_ne!(a, b);
            } else {
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn missing_joint_fill_rule() {
        let mut seq = seq_from_fn(2, 2, 3, |t, j, a| (t * 10 + j + a) as f64);
        // Joint 1 lost in frame 1: carry frame 0 coordinates forward.
        seq.frames[1].confidence[1] = 0.0;
        seq.frames[1].coords[2] = -99.0;
        seq.frames[1].coords[3] = -99.0;
        let expect = (seq.frames[0].coords[2], seq.frames[0].coords[3]);
        fill_missing_joints(&mut seq);
        assert_eq!((seq.frames[1].coords[2], seq.frames[1].coords[3]), expect);

        // Joint never seen: per-frame mean of visible joints.
        let mut seq = seq_from_fn(2, 2, 2, |t, j, a| (t * 10 + j * 2 + a) as f64);
        for t in 0..2 {
            seq.frames[t].confidence[0] = 0.0;
        }
        fill_missing_joints(&mut seq);
        for t in 0..2 {
            assert_eq!(seq.frames[t].coords[0], seq.frames[t].coords[2]);
            assert_eq!(seq.frames[t].coords[1], seq.frames[t].coords[3]);
        }
    }
}
