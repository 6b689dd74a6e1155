//! Training harness: image pre-encoding, self-paced curriculum over
//! confidence thresholds, SGD with cosine decay, and split evaluation with
//! multi-person score averaging.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{filter_by_confidence, DataError, DatasetManifest, Split};
use crate::encode::{encode, encode_subimages, EncodeError, SubSequenceConfig};
use crate::metrics::MetricsReport;
use crate::nn::{ConvNet, NnError};
use crate::skeleton::{JointOrder, SkeletonError, SkeletonTopology};
use crate::ssan::{ssan_with_backbone, SsanError, SsanModel};
use crate::tensor::{backward, cross_entropy, Graph, Parameter, Sgd, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Encode(#[from] EncodeError),
    #[error(transparent)]
    Skeleton(#[from] SkeletonError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Ssan(#[from] SsanError),
    #[error("curriculum thresholds must be non-increasing, got {0:?}")]
    BadSchedule(Vec<f64>),
    #[error("no samples in the requested split")]
    EmptySplit,
    #[error("samples disagree on sub-image count ({0} vs {1})")]
    RaggedSteps(usize, usize),
}

type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum OrderChoice {
    /// Depth-first tree-traversal column order.
    Tssi,
    /// Identity chain 1..joint_count.
    Chain,
    /// A fixed random permutation chain, reproducible from the seed.
    RandomChain { seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncodeSettings {
    pub order: OrderChoice,
    pub target_size: usize,
    /// When set, each sequence becomes n overlapped sub-images.
    pub sub: Option<SubSequenceConfig>,
}

pub fn resolve_order(
    topology: &SkeletonTopology,
    choice: OrderChoice,
) -> std::result::Result<JointOrder, SkeletonError> {
    match choice {
        OrderChoice::Tssi => topology.euler_tour(),
        OrderChoice::Chain => Ok(topology.identity_chain()),
        OrderChoice::RandomChain { seed } => {
            let mut perm: Vec<usize> = (1..=topology.joint_count()).collect();
            perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            topology.chain_order(&perm)
        }
    }
}

/// One person's encoded sequence: pixel values scaled to [0,1], one image
/// per temporal step.
#[derive(Debug, Clone)]
pub struct EncodedSample {
    pub images: Vec<Vec<f64>>,
    pub label: usize,
    /// Index of the originating manifest sample; persons share it.
    pub group: usize,
    pub confidence: f64,
}

/// Encodes every person of every sample in the split (in parallel); training
/// consumes persons as independent samples, evaluation merges them by group.
pub fn pre_encode(
    manifest: &DatasetManifest,
    split: Split,
    settings: &EncodeSettings,
) -> Result<Vec<EncodedSample>> {
    let topology = SkeletonTopology::builtin(&manifest.topology)?;
    let order = resolve_order(topology, settings.order)?;
    let picked: Vec<(usize, &crate::data::Sample)> = manifest
        .samples
        .iter()
        .enumerate()
        .filter(|(_, s)| s.split == split)
        .collect();
    if picked.is_empty() {
        return Err(TrainError::EmptySplit);
    }
    let encoded: Vec<Result<Vec<EncodedSample>>> = picked
        .par_iter()
        .map(|(group, sample)| {
            sample
                .sequences
                .iter()
                .map(|seq| {
                    let images = match settings.sub {
                        Some(cfg) => encode_subimages(seq, &order, cfg, settings.target_size)?,
                        None => vec![encode(seq, &order, settings.target_size)?],
                    };
                    Ok(EncodedSample {
                        images: images
                            .into_iter()
                            .map(|img| img.pixels.iter().map(|v| v / 255.0).collect())
                            .collect(),
                        label: sample.label,
                        group: *group,
                        confidence: sample.mean_confidence,
                    })
                })
                .collect()
        })
        .collect();
    let mut out = Vec::new();
    for group in encoded {
        out.extend(group?);
    }
    Ok(out)
}

/// Backbone plus optional temporal attention head.
pub struct Model {
    pub net: ConvNet,
    pub ssan: Option<SsanModel>,
}

impl Model {
    /// `steps` holds one [N,H,W,C] batch per temporal step; without the
    /// temporal head exactly one step is expected.
    pub fn forward(&self, g: &Graph, steps: &[Tensor], training: bool) -> Result<Tensor> {
        match &self.ssan {
            Some(ssan) => Ok(ssan_with_backbone(g, &self.net, ssan, steps, training)?),
            None => {
                if steps.len() != 1 {
                    return Err(TrainError::RaggedSteps(steps.len(), 1));
                }
                Ok(self.net.forward(g, &steps[0], training)?)
            }
        }
    }

    pub fn parameters(&self) -> Vec<Parameter> {
        let mut out = self.net.parameters();
        if let Some(ssan) = &self.ssan {
            out.extend(ssan.parameters());
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub cosine_decay: bool,
    /// Stop as soon as a training epoch reaches this accuracy.
    pub target_accuracy: Option<f64>,
    pub seed: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            momentum: 0.9,
            batch_size: 8,
            cosine_decay: true,
            target_accuracy: None,
            seed: 0,
        }
    }
}

pub fn lr_at(cfg: &OptimConfig, epoch: usize, total_epochs: usize) -> f64 {
    if cfg.cosine_decay && total_epochs > 0 {
        0.5 * cfg.lr * (1.0 + (std::f64::consts::PI * epoch as f64 / total_epochs as f64).cos())
    } else {
        cfg.lr
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurriculumSchedule {
    /// (confidence threshold, epoch count) stages, thresholds non-increasing.
    pub stages: Vec<(f64, usize)>,
}

impl CurriculumSchedule {
    /// Single stage at threshold 0: plain training.
    pub fn plain(epochs: usize) -> Self {
        Self {
            stages: vec![(0.0, epochs)],
        }
    }

    /// Default self-paced ramp 0.5 → 0.3 → 0.1 → 0.0 over four equal stages.
    pub fn default_for(total_epochs: usize) -> Self {
        let q = (total_epochs / 4).max(1);
        let last = total_epochs.saturating_sub(3 * q).max(1);
        Self {
            stages: vec![(0.5, q), (0.3, q), (0.1, q), (0.0, last)],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let taus: Vec<f64> = self.stages.iter().map(|s| s.0).collect();
        let ok = !taus.is_empty()
            && taus.iter().all(|t| (0.0..=1.0).contains(t))
            && taus.windows(2).all(|w| w[0] >= w[1]);
        if ok {
            Ok(())
        } else {
            Err(TrainError::BadSchedule(taus))
        }
    }

    pub fn total_epochs(&self) -> usize {
        self.stages.iter().map(|s| s.1).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub stage: usize,
    pub threshold: f64,
    pub epoch: usize,
    pub train_size: usize,
    pub loss: f64,
    pub accuracy: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    /// Training-set size per curriculum stage (including skipped stages).
    pub stage_sizes: Vec<usize>,
    pub stopped_early: bool,
}

fn batch_tensors(
    g: &Graph,
    samples: &[&EncodedSample],
    image_shape: &[usize],
) -> Result<Vec<Tensor>> {
    let steps = samples[0].images.len();
    for s in samples {
        if s.images.len() != steps {
            return Err(TrainError::RaggedSteps(s.images.len(), steps));
        }
    }
    let mut shape = vec![samples.len()];
    shape.extend_from_slice(image_shape);
    Ok((0..steps)
        .map(|t| {
            let mut values = Vec::with_capacity(samples.len() * samples[0].images[t].len());
            for s in samples {
                values.extend_from_slice(&s.images[t]);
            }
            g.tensor(shape.clone(), values)
        })
        .collect())
}

/// Lowest index wins ties, so evaluation is deterministic.
pub fn argmax_low(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Mean of per-person score vectors.
pub fn average_scores(scores: &[Vec<f64>]) -> Vec<f64> {
    let mut out = vec![0.0; scores[0].len()];
    for s in scores {
        for (o, v) in out.iter_mut().zip(s) {
            *o += v / scores.len() as f64;
        }
    }
    out
}

/// Self-paced training: stage s trains only on samples whose mean confidence
/// reaches the stage threshold. Runs batched SGD, logs every epoch, and can
/// stop early on a target training accuracy.
pub fn curriculum_train(
    model: &Model,
    manifest: &DatasetManifest,
    schedule: &CurriculumSchedule,
    optim: &OptimConfig,
    settings: &EncodeSettings,
) -> Result<TrainLog> {
    schedule.validate()?;
    let image_shape = vec![settings.target_size, settings.target_size, 3];
    let encoded = pre_encode(manifest, Split::Train, settings)?;
    let params = model.parameters();
    let mut sgd = Sgd::new(optim.lr, optim.momentum);
    let mut rng = ChaCha8Rng::seed_from_u64(optim.seed);
    let total_epochs = schedule.total_epochs();
    let mut log = TrainLog::default();
    let mut global_epoch = 0usize;

    'stages: for (stage, &(tau, stage_epochs)) in schedule.stages.iter().enumerate() {
        // Validated threshold range mirrors the manifest-level filter.
        filter_by_confidence(manifest, tau)?;
        let pool: Vec<&EncodedSample> =
            encoded.iter().filter(|s| s.confidence >= tau).collect();
        log.stage_sizes.push(pool.len());
        if pool.is_empty() {
            eprintln!("warning: curriculum stage {stage} (threshold {tau}) has no samples; skipped");
            global_epoch += stage_epochs;
            continue;
        }
        for _ in 0..stage_epochs {
            sgd.lr = lr_at(optim, global_epoch, total_epochs);
            let mut order: Vec<usize> = (0..pool.len()).collect();
            order.shuffle(&mut rng);
            let mut loss_sum = 0.0;
            let mut correct = 0usize;
            for chunk in order.chunks(optim.batch_size.max(1)) {
                let batch: Vec<&EncodedSample> = chunk.iter().map(|&i| pool[i]).collect();
                let labels: Vec<usize> = batch.iter().map(|s| s.label).collect();
                let g = Graph::new();
                let steps = batch_tensors(&g, &batch, &image_shape)?;
                let logits = model.forward(&g, &steps, true)?;
                let loss = cross_entropy(&logits, &labels)?;
                loss_sum += loss.values()[0] * batch.len() as f64;
                let lv = logits.values();
                let classes = logits.shape()[1];
                for (b, &label) in labels.iter().enumerate() {
                    if argmax_low(&lv[b * classes..(b + 1) * classes]) == label {
                        correct += 1;
                    }
                }
                backward(&loss)?;
                g.flush_param_grads();
                sgd.step(&params);
                for p in &params {
                    p.zero_grad();
                }
            }
            let accuracy = correct as f64 / pool.len() as f64;
            log.epochs.push(EpochLog {
                stage,
                threshold: tau,
                epoch: global_epoch,
                train_size: pool.len(),
                loss: loss_sum / pool.len() as f64,
                accuracy,
                lr: sgd.lr,
            });
            global_epoch += 1;
            if optim.target_accuracy.is_some_and(|t| accuracy >= t) {
                log.stopped_early = true;
                break 'stages;
            }
        }
    }
    Ok(log)
}

/// Per-sample class scores on a split: persons are scored independently and
/// averaged per sample before the argmax.
pub fn evaluate(
    model: &Model,
    manifest: &DatasetManifest,
    split: Split,
    settings: &EncodeSettings,
    batch_size: usize,
) -> Result<MetricsReport> {
    let image_shape = vec![settings.target_size, settings.target_size, 3];
    let encoded = pre_encode(manifest, split, settings)?;
    let mut scores: Vec<Vec<f64>> = Vec::with_capacity(encoded.len());
    for chunk in encoded.chunks(batch_size.max(1)) {
        let batch: Vec<&EncodedSample> = chunk.iter().collect();
        let g = Graph::new();
        let steps = batch_tensors(&g, &batch, &image_shape)?;
        let probs = model.forward(&g, &steps, false)?.softmax(&[1])?;
        let classes = probs.shape()[1];
        let pv = probs.values();
        for b in 0..batch.len() {
            scores.push(pv[b * classes..(b + 1) * classes].to_vec());
        }
    }
    // Merge persons by originating sample.
    let mut truth = Vec::new();
    let mut predicted = Vec::new();
    let mut i = 0usize;
    while i < encoded.len() {
        let group = encoded[i].group;
        let mut person_scores = Vec::new();
        while i < encoded.len() && encoded[i].group == group {
            person_scores.push(scores[i].clone());
            i += 1;
        }
        truth.push(encoded[i - 1].label);
        predicted.push(argmax_low(&average_scores(&person_scores)));
    }
    Ok(MetricsReport::from_predictions(
        &truth,
        &predicted,
        &manifest.classes,
    ))
}
