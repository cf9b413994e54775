//! Fixtures shared by the benchmarks in `benches/`.

use rand::Rng;
use smix_core::replay::Batch;
use smix_core::rng;
use smix_core::tensor::Tensor;
use smix_core::trainer::{TrainConfig, Trainer};

pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut r = rng::stream(seed, 0);
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// A trainer with the default m-step configuration whose buffer already
/// holds a full batch, plus one sampled batch.
pub fn warm_trainer() -> (Trainer, Batch) {
    let config = TrainConfig::default();
    let batch_size = config.batch_size;
    let mut trainer = Trainer::new(config).unwrap();
    while trainer.buffer().len() < batch_size {
        trainer.iterate().unwrap();
    }
    let batch = trainer
        .buffer()
        .sample_batch(batch_size, &mut rng::stream(0, 3))
        .unwrap();
    (trainer, batch)
}
