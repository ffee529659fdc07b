//! Named, counter-derived random substreams.
//!
//! Every random quantity in the crate is drawn from a stream identified by
//! `(seed, purpose, index...)`. Two tasks never share a stream, so grid
//! points, replicates and oracles are reproducible on their own and can run
//! in any order or in parallel.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

pub type SimRng = ChaCha12Rng;

/// Purposes with fixed ids so that renaming a variable never reshuffles draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Purpose {
    Service = 1,
    Delay = 2,
    Lag = 3,
    MonteCarlo = 4,
    Fallback = 5,
    Parameters = 6,
}

fn splitmix(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Builds the stream for `(seed, purpose, path)`.
pub fn substream(seed: u64, purpose: Purpose, path: &[u64]) -> SimRng {
    let mut state = seed ^ 0x5155_4C41_4700_0000;
    let mut mix = splitmix(&mut state) ^ (purpose as u64).wrapping_mul(0xA24B_AED4_963E_E407);
    for &p in path {
        let mut s = mix ^ p.wrapping_mul(0x9FB2_1C65_1E98_DF25);
        mix = splitmix(&mut s);
    }
    let mut key = [0u8; 32];
    let mut s = mix;
    for chunk in key.chunks_mut(8) {
        chunk.copy_from_slice(&splitmix(&mut s).to_le_bytes());
    }
    ChaCha12Rng::from_seed(key)
}
