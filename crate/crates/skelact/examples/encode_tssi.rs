//! Encode the same synthetic sequence with a naive chain order and with the
//! tree-traversal order, and compare how many neighbouring columns are
//! actually connected in the skeleton.

use skelact::data::{synth_generate, NoiseConfig};
use skelact::encode::encode;
use skelact::skeleton::{adjacency_fraction, SkeletonTopology};

fn main() {
    let topo = SkeletonTopology::builtin("ntu25").unwrap();
    let chain = topo.identity_chain();
    let tour = topo.euler_tour().unwrap();

    println!("chain order:  {} columns", chain.order.len());
    println!("tour order:   {} columns", tour.order.len());
    println!(
        "adjacent-column fraction: chain {:.3}, tour {:.3}",
        adjacency_fraction(&chain, topo).unwrap(),
        adjacency_fraction(&tour, topo).unwrap()
    );

    let manifest = synth_generate(4, 1, 120, "ntu25", NoiseConfig::default(), 0).unwrap();
    let seq = &manifest.samples[0].sequences[0];

    for (name, order) in [("chain", &chain), ("tssi", &tour)] {
        let img = encode(seq, order, 224).unwrap();
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for &v in &img.pixels {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        println!(
            "{name}: {}x{}x{} image from {} frames, pixel range [{lo:.1}, {hi:.1}]",
            img.height, img.width, img.channels, img.source_frames
        );
    }
}
