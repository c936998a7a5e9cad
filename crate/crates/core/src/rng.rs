//! The only entropy source in the crate.
//!
//! Every random draw comes from ChaCha8 (`rand_chacha::ChaCha8Rng`): a
//! 64-bit seed is expanded into the 256-bit key with `seed_from_u64`
//! (PCG32 key expansion, as documented by `rand_core`) and independent
//! consumers are separated by the 64-bit ChaCha stream id. Same seed and
//! stream give the same bytes on every platform.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream ids used across the pipeline, so no two consumers share draws.
pub mod stream {
    pub const COHORT: u64 = 1;
    pub const SPLIT: u64 = 2;
    pub const TEACHER_INIT: u64 = 3;
    pub const TEACHER_SHUFFLE: u64 = 4;
    pub const STUDENT_INIT: u64 = 5;
    pub const STUDENT_SHUFFLE: u64 = 6;
    pub const FIXTURE: u64 = 7;
}

pub fn seeded(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
