//! Counter-style random streams. Each stream is keyed by the experiment
//! seed plus a (purpose, client, round) triple, so the draws a client makes
//! in a round never depend on what any other client or strategy consumed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// What a stream is used for. The discriminant is part of the key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Purpose {
    DataCluster = 1,
    DataFeatures = 2,
    DataTest = 3,
    ModelInit = 4,
    LocalTrain = 5,
    Dropout = 6,
    Heterogeneity = 7,
    Synthetic = 8,
}

/// Client slot used for streams that are not tied to a client.
pub const SERVER: u64 = u64::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RngStream {
    pub seed: u64,
    pub purpose: Purpose,
    pub client: u64,
    pub round: u64,
}

impl RngStream {
    pub fn new(seed: u64, purpose: Purpose, client: u64, round: u64) -> Self {
        Self {
            seed,
            purpose,
            client,
            round,
        }
    }

    pub fn server(seed: u64, purpose: Purpose, round: u64) -> Self {
        Self::new(seed, purpose, SERVER, round)
    }

    /// Derives a sibling stream that differs only in the client slot.
    pub fn for_client(self, client: u64) -> Self {
        Self { client, ..self }
    }

    pub fn for_round(self, round: u64) -> Self {
        Self { round, ..self }
    }

    /// Instantiates the generator. The 256-bit ChaCha key is the four key
    /// words laid out little-endian, so the mapping is platform independent.
    pub fn rng(&self) -> ChaCha8Rng {
        let mut key = [0u8; 32];
        key[0..8].copy_from_slice(&self.seed.to_le_bytes());
        key[8..16].copy_from_slice(&(self.purpose as u64).to_le_bytes());
        key[16..24].copy_from_slice(&self.client.to_le_bytes());
        key[24..32].copy_from_slice(&self.round.to_le_bytes());
        ChaCha8Rng::from_seed(key)
    }
}
