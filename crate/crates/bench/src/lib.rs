//! Fixtures shared by the benchmarks.

use dba_core::mlp::{backward_per_sample, forward, loss, Architecture, MlpParams, PerSampleGrads};
use dba_core::{Matrix, RngState};

pub struct StepInputs {
    pub params: MlpParams,
    pub images: Matrix,
    pub labels: Vec<u8>,
    pub grads: PerSampleGrads,
    pub batch_loss: f64,
}

/// A random MNIST-shaped batch with its per-sample gradients.
pub fn step_inputs(batch: usize, seed: u64) -> StepInputs {
    let mut rng = RngState::new(seed);
    let params = MlpParams::init(Architecture::MNIST, &mut rng);
    let images = Matrix::from_fn(batch, 784, |_, _| rng.uniform());
    let labels: Vec<u8> = (0..batch).map(|i| (i % 10) as u8).collect();
    let cache = forward(&params, &images).expect("shapes match");
    let batch_loss = loss(&cache, &labels).expect("labels match").mean_loss;
    let grads = backward_per_sample(&params, &cache, &labels).expect("cache matches");
    StepInputs {
        params,
        images,
        labels,
        grads,
        batch_loss,
    }
}

pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = RngState::new(seed);
    Matrix::from_fn(rows, cols, |_, _| rng.uniform_range(-1.0, 1.0))
}
