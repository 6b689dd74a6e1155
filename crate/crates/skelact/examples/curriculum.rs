//! Self-paced training on a noisy dataset: start with high-confidence
//! samples only, then admit noisier ones stage by stage.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use skelact::data::{synth_generate, NoiseConfig, Split};
use skelact::nn::{AttentionKind, ConvNet, NetworkConfig};
use skelact::train::*;

fn main() {
    // Half the samples get degraded confidences.
    let noise = NoiseConfig {
        coord_noise: 0.02,
        degrade_fraction: 0.5,
    };
    let manifest = synth_generate(4, 20, 60, "ntu25", noise, 3).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let model = Model {
        net: ConvNet::new(NetworkConfig::tiny(4, AttentionKind::Plain), &mut rng).unwrap(),
        ssan: None,
    };
    let settings = EncodeSettings {
        order: OrderChoice::Tssi,
        target_size: 28,
        sub: None,
    };
    let schedule = CurriculumSchedule::default_for(20);
    let optim = OptimConfig {
        seed: 2,
        ..OptimConfig::default()
    };
    let log = curriculum_train(&model, &manifest, &schedule, &optim, &settings).unwrap();

    println!("stage sizes: {:?}", log.stage_sizes);
    for e in &log.epochs {
        println!(
            "stage {} tau {:.1}  epoch {:>2}  {} samples  loss {:.4}  acc {:.3}",
            e.stage, e.threshold, e.epoch, e.train_size, e.loss, e.accuracy
        );
    }
    let report = evaluate(&model, &manifest, Split::Test, &settings, 8).unwrap();
    println!("test top-1: {:.3}", report.top1);
}
