//! Counter-based random streams. Each `(seed, trial, round, lane)` tuple keys
//! its own ChaCha stream, so results never depend on execution order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// What a stream is used for within a round of a trial.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Lane {
    /// Round-0 data for a node.
    Init(usize),
    /// Independent dataset for an edge (by edge index).
    Edge(usize),
    /// Shared dataset drawn once by a broadcasting source node.
    Source(usize),
    /// Fresh natural data for a node's benchmark fit.
    Oracle(usize),
    /// The ground-truth parameter of an experiment.
    BetaStar,
    /// Monte Carlo draws for population moments.
    Sandwich,
}

impl Lane {
    fn code(self) -> u64 {
        let (tag, idx) = match self {
            Lane::Init(i) => (1u64, i),
            Lane::Edge(i) => (2, i),
            Lane::Source(i) => (3, i),
            Lane::Oracle(i) => (4, i),
            Lane::BetaStar => (5, 0),
            Lane::Sandwich => (6, 0),
        };
        (tag << 56) | idx as u64
    }
}

pub fn stream(seed: u64, trial: u64, round: u64, lane: Lane) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&trial.to_le_bytes());
    key[16..24].copy_from_slice(&round.to_le_bytes());
    key[24..32].copy_from_slice(&lane.code().to_le_bytes());
    ChaCha8Rng::from_seed(key)
}
