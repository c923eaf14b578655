//! HE weight initialization.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Draw `n` weights from `Normal(0, sqrt(2 / fan_in))`, deterministically
/// per seed.
pub fn he_init(n: usize, fan_in: usize, seed: u64) -> Vec<f64> {
    assert!(fan_in > 0, "he_init needs fan_in > 0");
    let sd = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, sd).expect("valid normal");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| normal.sample(&mut rng)).collect()
}
