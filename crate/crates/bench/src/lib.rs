//! Fixed inputs shared by the kernel benchmarks.

use lit_core::rng::seeded;
use lit_core::{Tape, Tensor, Var};

pub fn uniform(shape: &[usize], seed: u64) -> Tensor<f32> {
    Tensor::uniform(shape, -1.0, 1.0, &mut seeded(seed))
}

/// Records `inputs` as differentiable leaves of a fresh tape.
pub fn leaves(inputs: &[&Tensor<f32>]) -> (Tape<f32>, Vec<Var>) {
    let mut tape = Tape::new();
    let vars = inputs.iter().map(|t| tape.leaf(&(*t).clone().with_grad())).collect();
    (tape, vars)
}
