//! Run the finite-difference suite over every op and composed block.

fn main() {
    let mut worst = 0.0f64;
    for o in skelact::suite::gradient_checks() {
        println!(
            "{:<24} {:>12.3e}  {}",
            o.name,
            o.max_rel_error,
            if o.passed() { "ok" } else { "FAIL" }
        );
        worst = worst.max(o.max_rel_error);
    }
    println!("worst: {worst:.3e} (bound 1e-4)");
}
