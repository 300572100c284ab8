//! Parameters, layers, optimisation and numerical gradient checking.

pub mod gradcheck;
pub mod layers;
pub mod optim;
pub mod params;

pub use params::{Binding, ParamBuilder, ParamEntry, ParamId, ParamStore};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
