//! Train the desk-scale attention network on synthetic motions and score
//! the held-out split. Run with --release; the debug build is slow.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use skelact::data::{synth_generate, NoiseConfig, Split};
use skelact::nn::{AttentionKind, ConvNet, NetworkConfig};
use skelact::train::*;

fn main() {
    let manifest = synth_generate(4, 20, 120, "ntu25", NoiseConfig::default(), 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let model = Model {
        net: ConvNet::new(NetworkConfig::desk(4, AttentionKind::Glan), &mut rng).unwrap(),
        ssan: None,
    };
    let settings = EncodeSettings {
        order: OrderChoice::Tssi,
        target_size: 56,
        sub: None,
    };
    let optim = OptimConfig {
        target_accuracy: Some(0.95),
        seed: 1,
        ..OptimConfig::default()
    };
    let log = curriculum_train(
        &model,
        &manifest,
        &CurriculumSchedule::plain(200),
        &optim,
        &settings,
    )
    .unwrap();
    for e in &log.epochs {
        println!("epoch {:>3}  loss {:.4}  train acc {:.3}", e.epoch, e.loss, e.accuracy);
    }

    let report = evaluate(&model, &manifest, Split::Test, &settings, 8).unwrap();
    print!("{}", report.render());
}
