use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use skelact::checkpoint;
use skelact::data::{load_canonical, synth_generate, NoiseConfig, Split};
use skelact::encode::SubSequenceConfig;
use skelact::metrics::MetricsReport;
use skelact::nn::{AttentionKind, ConvNet, MaskActivation, NetworkConfig};
use skelact::ssan::{AttentionMode, Readout, SsanConfig, SsanModel};
use skelact::suite::gradient_checks;
use skelact::train::{
    curriculum_train, evaluate, CurriculumSchedule, EncodeSettings, Model,
    OptimConfig, OrderChoice,
};

#[derive(Parser)]
#[command(name = "skelact", about = "Skeleton-image action recognition toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum OrderArg {
    Tssi,
    Chain,
}

#[derive(Clone, Copy, ValueEnum)]
enum ArchArg {
    Plain,
    BaseAttn,
    Glan,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SsanModeArg {
    Softmax,
    Sigmoid,
}

#[derive(Subcommand)]
enum Cmd {
    /// Encode one sample to a skeleton-image JSON dump.
    Encode {
        /// Canonical dataset manifest.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        sample: usize,
        #[arg(long, default_value_t = 0)]
        person: usize,
        #[arg(long, value_enum, default_value_t = OrderArg::Tssi)]
        order: OrderArg,
        #[arg(long, default_value_t = 224)]
        size: usize,
        /// Split into n overlapped sub-images instead of one image.
        #[arg(long)]
        subimages: Option<usize>,
        #[arg(long, default_value_t = 0.5)]
        overlap: f64,
        #[arg(long)]
        output: PathBuf,
    },
    /// Generate a deterministic synthetic dataset manifest.
    Synth {
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 20)]
        per_class: usize,
        #[arg(long, default_value_t = 120)]
        frames: usize,
        #[arg(long, default_value = "ntu25")]
        topology: String,
        #[arg(long, default_value_t = 0.0)]
        coord_noise: f64,
        /// Fraction of samples with degraded confidences.
        #[arg(long, default_value_t = 0.0)]
        degrade: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        output: PathBuf,
    },
    /// Train a model, optionally with the temporal attention head.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = ArchArg::Glan)]
        arch: ArchArg,
        #[arg(long, value_enum, default_value_t = OrderArg::Tssi)]
        order: OrderArg,
        /// Input image side; picks the matching network plan (28/56/224).
        #[arg(long, default_value_t = 56)]
        size: usize,
        /// Enable the LSTM + spatial attention head over sub-images.
        #[arg(long)]
        ssan: bool,
        #[arg(long, default_value_t = 32)]
        hidden: usize,
        #[arg(long, value_enum, default_value_t = SsanModeArg::Softmax)]
        ssan_mode: SsanModeArg,
        #[arg(long)]
        subimages: Option<usize>,
        #[arg(long, default_value_t = 0.5)]
        overlap: f64,
        /// Curriculum as "tau:epochs,..." (e.g. "0.5:10,0.3:10,0.0:20");
        /// defaults to a single stage at threshold 0 over --epochs.
        #[arg(long)]
        schedule: Option<String>,
        #[arg(long, default_value_t = 50)]
        epochs: usize,
        #[arg(long, default_value_t = 0.01)]
        lr: f64,
        #[arg(long, default_value_t = 0.9)]
        momentum: f64,
        #[arg(long, default_value_t = 8)]
        batch_size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Stop once a training epoch reaches this accuracy.
        #[arg(long)]
        target_acc: Option<f64>,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Evaluate a checkpoint on a split.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        /// Also write the machine-readable report here.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck,
    /// Pretty-print a saved metrics report.
    Report {
        #[arg(long)]
        input: PathBuf,
    },
}

fn order_choice(order: OrderArg) -> OrderChoice {
    match order {
        OrderArg::Tssi => OrderChoice::Tssi,
        OrderArg::Chain => OrderChoice::Chain,
    }
}

fn network_config(size: usize, classes: usize, arch: ArchArg) -> Result<NetworkConfig, String> {
    let attention = match arch {
        ArchArg::Plain => AttentionKind::Plain,
        ArchArg::BaseAttn => AttentionKind::Base {
            activation: MaskActivation::Sigmoid,
        },
        ArchArg::Glan => AttentionKind::Glan,
    };
    match size {
        28 => Ok(NetworkConfig::tiny(classes, attention)),
        56 => Ok(NetworkConfig::desk(classes, attention)),
        224 => Ok(NetworkConfig::full(classes, attention)),
        other => Err(format!("no network plan for input size {other}; use 28, 56 or 224")),
    }
}

fn parse_schedule(text: &str) -> Result<CurriculumSchedule, String> {
    let mut stages = Vec::new();
    for part in text.split(',') {
        let (tau, epochs) = part
            .split_once(':')
            .ok_or_else(|| format!("bad schedule stage '{part}', expected tau:epochs"))?;
        stages.push((
            tau.trim().parse::<f64>().map_err(|e| e.to_string())?,
            epochs.trim().parse::<usize>().map_err(|e| e.to_string())?,
        ));
    }
    Ok(CurriculumSchedule { stages })
}

fn round6(v: f64) -> f64 {
    (v * 1e6).round() / 1e6
}

fn run(cli: Cli) -> Result<(), Box<dyn std::error::Error>> {
    match cli.cmd {
        Cmd::Encode {
            data,
            sample,
            person,
            order,
            size,
            subimages,
            overlap,
            output,
        } => {
            let manifest = load_canonical(&data)?;
            let s = manifest
                .samples
                .get(sample)
                .ok_or_else(|| format!("sample {sample} out of range"))?;
            let seq = s
                .sequences
                .get(person)
                .ok_or_else(|| format!("person {person} out of range"))?;
            let topology = skelact::skeleton::SkeletonTopology::builtin(&manifest.topology)?;
            let joint_order =
                skelact::train::resolve_order(topology, order_choice(order))?;
            let images = match subimages {
                Some(n) => skelact::encode::encode_subimages(
                    seq,
                    &joint_order,
                    SubSequenceConfig::new(n, overlap)?,
                    size,
                )?,
                None => vec![skelact::encode::encode(seq, &joint_order, size)?],
            };
            let dump = serde_json::json!({
                "height": images[0].height,
                "width": images[0].width,
                "channels": images[0].channels,
                "order_kind": images[0].order_kind,
                "source_frames": images[0].source_frames,
                "channel_semantics": images[0].channel_semantics,
                "images": images
                    .iter()
                    .map(|img| img.pixels.iter().map(|&v| round6(v)).collect::<Vec<_>>())
                    .collect::<Vec<_>>(),
            });
            std::fs::write(&output, serde_json::to_string(&dump)?)?;
            println!("wrote {} image(s) to {}", images.len(), output.display());
        }
        Cmd::Synth {
            classes,
            per_class,
            frames,
            topology,
            coord_noise,
            degrade,
            seed,
            output,
        } => {
            let manifest = synth_generate(
                classes,
                per_class,
                frames,
                &topology,
                NoiseConfig {
                    coord_noise,
                    degrade_fraction: degrade,
                },
                seed,
            )?;
            manifest.save(&output)?;
            println!(
                "wrote {} samples ({} classes) to {}",
                manifest.samples.len(),
                classes,
                output.display()
            );
        }
        Cmd::Train {
            data,
            arch,
            order,
            size,
            ssan,
            hidden,
            ssan_mode,
            subimages,
            overlap,
            schedule,
            epochs,
            lr,
            momentum,
            batch_size,
            seed,
            target_acc,
            checkpoint: ckpt_path,
        } => {
            let manifest = load_canonical(&data)?;
            let classes = manifest.num_classes();
            let config = network_config(size, classes, arch)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let net = ConvNet::new(config.clone(), &mut rng)?;
            let ssan_cfg = if ssan {
                if subimages.is_none() {
                    return Err("--ssan requires --subimages".into());
                }
                Some(SsanConfig {
                    hidden,
                    mode: match ssan_mode {
                        SsanModeArg::Softmax => AttentionMode::SoftmaxSpatial,
                        SsanModeArg::Sigmoid => AttentionMode::SigmoidSpatialChannel,
                    },
                    readout: Readout::MeanLogits,
                    num_classes: classes,
                    feature_size: net.feature_size,
                    feature_channels: config.stage_channels[3],
                })
            } else {
                None
            };
            let model = Model {
                ssan: ssan_cfg.clone().map(|c| SsanModel::new(c, &mut rng)),
                net,
            };
            let settings = EncodeSettings {
                order: order_choice(order),
                target_size: size,
                sub: match subimages {
                    Some(n) => Some(SubSequenceConfig::new(n, overlap)?),
                    None => None,
                },
            };
            let sched = match schedule {
                Some(text) => parse_schedule(&text)?,
                None => CurriculumSchedule::plain(epochs),
            };
            let optim = OptimConfig {
                lr,
                momentum,
                batch_size,
                cosine_decay: true,
                target_accuracy: target_acc,
                seed,
            };
            let log = curriculum_train(&model, &manifest, &sched, &optim, &settings)?;
            for e in &log.epochs {
                println!(
                    "stage {} (tau {:.2}) epoch {:>4} size {:>4} loss {:.4} acc {:.4} lr {:.5}",
                    e.stage, e.threshold, e.epoch, e.train_size, e.loss, e.accuracy, e.lr
                );
            }
            let meta = serde_json::json!({
                "network": config,
                "ssan": ssan_cfg,
                "settings": settings,
                "classes": manifest.classes,
                "topology": manifest.topology,
            });
            checkpoint::save(&ckpt_path, &meta, &model.parameters())?;
            println!("checkpoint written to {}", ckpt_path.display());
        }
        Cmd::Eval {
            data,
            checkpoint: ckpt_path,
            split,
            report,
        } => {
            let manifest = load_canonical(&data)?;
            let ckpt = checkpoint::load(&ckpt_path)?;
            let config: NetworkConfig = serde_json::from_value(ckpt.meta["network"].clone())?;
            let ssan_cfg: Option<SsanConfig> =
                serde_json::from_value(ckpt.meta["ssan"].clone())?;
            let settings: EncodeSettings =
                serde_json::from_value(ckpt.meta["settings"].clone())?;
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let model = Model {
                net: ConvNet::new(config, &mut rng)?,
                ssan: ssan_cfg.map(|c| SsanModel::new(c, &mut rng)),
            };
            ckpt.restore(&model.parameters())?;
            let metrics = evaluate(&model, &manifest, split.into(), &settings, 8)?;
            print!("{}", metrics.render());
            if let Some(path) = report {
                std::fs::write(&path, serde_json::to_string(&metrics)?)?;
                println!("report written to {}", path.display());
            }
        }
        Cmd::Gradcheck => {
            let outcomes = gradient_checks();
            let mut failed = false;
            for o in &outcomes {
                println!(
                    "{:<24} max rel error {:>12.3e}  {}",
                    o.name,
                    o.max_rel_error,
                    if o.passed() { "pass" } else { "FAIL" }
                );
                failed |= !o.passed();
            }
            if failed {
                return Err("gradient check failed".into());
            }
        }
        Cmd::Report { input } => {
            let text = std::fs::read_to_string(&input)?;
            let metrics: MetricsReport = serde_json::from_str(&text)?;
            print!("{}", metrics.render());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::FAILURE
        }
    }
}
