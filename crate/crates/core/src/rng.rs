//! Seeded random streams. Each purpose gets its own ChaCha8 stream derived from
//! the master seed and a fixed label, so changing how many draws one purpose
//! makes never shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub fn child_seed(master: u64, label: &str) -> [u8; 32] {
    let digest = Sha256::digest(format!("{master}:{label}").as_bytes());
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    seed
}

pub fn child_rng(master: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::from_seed(child_seed(master, label))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RngStreams {
    pub data: ChaCha8Rng,
    pub test_data: ChaCha8Rng,
    pub particles: ChaCha8Rng,
    pub backward: ChaCha8Rng,
    pub init: ChaCha8Rng,
}

impl RngStreams {
    pub fn new(master: u64) -> Self {
        Self {
            data: child_rng(master, "data"),
            test_data: child_rng(master, "test-data"),
            particles: child_rng(master, "particles"),
            backward: child_rng(master, "backward"),
            init: child_rng(master, "init"),
        }
    }
}
