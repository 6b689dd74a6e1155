//! Central finite-difference checking of reverse-mode gradients.
//!
//! The numeric side only ever evaluates forward passes on fresh tapes, so it
//! is independent of the backward implementation it checks.

use super::{backward, Graph, Parameter, Tensor};

pub const DEFAULT_STEP: f64 = 1e-5;

/// Maximum relative error between analytic and numeric gradients of a scalar
/// loss with respect to every element of every parameter in `params`.
///
/// `build` must construct the loss on the given tape from the current
/// parameter values and be deterministic.
pub fn max_relative_error<F>(params: &[Parameter], build: F) -> f64
where
    F: Fn(&Graph) -> Tensor,
{
    for p in params {
        p.zero_grad();
    }
    let graph = Graph::new();
    let loss = build(&graph);
    assert_eq!(loss.len(), 1, "gradcheck loss must be scalar");
    backward(&loss).expect("scalar loss");
    graph.flush_param_grads();

    let eval = || -> f64 {
        let g = Graph::new();
        build(&g).values()[0]
    };

    let mut worst = 0.0f64;
    for p in params {
        let analytic = p.grad();
        let base = p.values();
        for i in 0..base.len() {
            let mut plus = base.clone();
            plus[i] += DEFAULT_STEP;
            p.set_values(plus);
            let f_plus = eval();

            let mut minus = base.clone();
            minus[i] -= DEFAULT_STEP;
            p.set_values(minus);
            let f_minus = eval();

            p.set_values(base.clone());
            let numeric = (f_plus - f_minus) / (2.0 * DEFAULT_STEP);
            let denom = analytic[i].abs().max(numeric.abs()).max(1e-3);
            worst = worst.max((analytic[i] - numeric).abs() / denom);
        }
    }
    worst
}

/// One named check and its observed error, against the shared 1e-4 bound.
#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: String,
    pub max_rel_error: f64,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.max_rel_error < 1e-4
    }
}
