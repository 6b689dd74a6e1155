//! Sub-sequence attention: split each sequence into overlapped windows, run
//! the shared backbone per window, and let an LSTM with a spatial soft mask
//! pool the feature blocks over time.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use skelact::data::{synth_generate, NoiseConfig, Split};
use skelact::encode::SubSequenceConfig;
use skelact::nn::{AttentionKind, ConvNet, NetworkConfig};
use skelact::ssan::{AttentionMode, Readout, SsanConfig, SsanModel};
use skelact::tensor::Graph;
use skelact::train::*;

fn main() {
    let cfg = SubSequenceConfig::new(5, 0.5).unwrap();
    println!(
        "T=120, n=5, overlap 0.5 -> window {} frames",
        cfg.window_len(120)
    );

    let manifest = synth_generate(4, 20, 120, "ntu25", NoiseConfig::default(), 9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let net = ConvNet::new(NetworkConfig::tiny(4, AttentionKind::Glan), &mut rng).unwrap();
    let ssan = SsanModel::new(
        SsanConfig {
            hidden: 16,
            mode: AttentionMode::SoftmaxSpatial,
            readout: Readout::MeanLogits,
            num_classes: 4,
            feature_size: net.feature_size,
            feature_channels: net.config.stage_channels[3],
        },
        &mut rng,
    );
    let model = Model {
        net,
        ssan: Some(ssan),
    };
    let settings = EncodeSettings {
        order: OrderChoice::Tssi,
        target_size: 28,
        sub: Some(cfg),
    };
    let optim = OptimConfig {
        target_accuracy: Some(0.95),
        seed: 4,
        ..OptimConfig::default()
    };
    let log = curriculum_train(
        &model,
        &manifest,
        &CurriculumSchedule::plain(30),
        &optim,
        &settings,
    )
    .unwrap();
    println!(
        "trained {} epochs, final train acc {:.3}",
        log.epochs.len(),
        log.epochs.last().unwrap().accuracy
    );

    let report = evaluate(&model, &manifest, Split::Test, &settings, 8).unwrap();
    println!("test top-1: {:.3}", report.top1);

    // Peek at a learned mask: the step-2 attention over the 7x7 grid.
    let encoded = pre_encode(&manifest, Split::Test, &settings).unwrap();
    let g = Graph::new();
    let s = &encoded[0];
    let ssan = model.ssan.as_ref().unwrap();
    let mut h = g.zeros(vec![1, 16]);
    let mut c = g.zeros(vec![1, 16]);
    for (t, img) in s.images.iter().enumerate() {
        let x = g.tensor(vec![1, 28, 28, 3], img.clone());
        let feat = model.net.feature_forward(&g, &x, false).unwrap();
        let mask = ssan.head.mask(&g, &h).unwrap();
        if t == 2 {
            println!("step-2 mask over positions:");
            for row in mask.values().chunks(ssan.config.feature_size) {
                let cells: Vec<String> = row.iter().map(|v| format!("{v:.3}")).collect();
                println!("  {}", cells.join(" "));
            }
        }
        let pooled = ssan.head.apply(&feat, &mask).unwrap();
        let (h2, c2) = ssan.cell.step(&g, &pooled, &h, &c).unwrap();
        h = h2;
        c = c2;
    }
}
