use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::numcore::Tensor;

/// Deterministic parameter initializer.
///
/// Weights are uniform on `[-1/√fan_in, 1/√fan_in]`, biases are zero and
/// layer-norm gains are one.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn uniform(&mut self, shape: Vec<usize>, bound: f64) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.rng.gen_range(-bound..bound)).collect();
        Tensor::new(shape, data).expect("init shape")
    }

    /// Weight matrix `[fan_in × fan_out]`.
    pub fn weight(&mut self, fan_in: usize, fan_out: usize) -> Tensor {
        self.uniform(vec![fan_in, fan_out], 1.0 / (fan_in as f64).sqrt())
    }

    /// Embedding table `[rows × width]` with unit-scale entries.
    pub fn table(&mut self, rows: usize, width: usize) -> Tensor {
        self.uniform(vec![rows, width], 1.0)
    }

    pub fn zeros(&mut self, len: usize) -> Tensor {
        Tensor::zeros(vec![len])
    }

    pub fn ones(&mut self, len: usize) -> Tensor {
        Tensor::new(vec![len], vec![1.0; len]).expect("ones")
    }
}
