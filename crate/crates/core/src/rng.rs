//! Counter-based random streams.
//!
//! Every random draw in the crate is addressed by `(tag, index, counter)`:
//! the tag names the purpose (initialisation, per-particle noise, common
//! noise, batch permutations), the index is usually a particle number and
//! the counter is usually the step. The triple selects a ChaCha8 stream and
//! a position inside it, so a draw never depends on which worker produced
//! it or in which order rows were visited.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Words reserved per counter value inside one stream. A block of normals
/// for one particle in one step must fit in this budget; the standard
/// normal sampler consumes two words per attempt, so dimensions up to
/// roughly 2^22 are safe.
const WORDS_PER_COUNTER: u128 = 1 << 24;

const INDEX_BITS: u32 = 56;

/// Purpose of a random stream. Distinct tags never share a stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum StreamTag {
    Init = 1,
    Noise = 2,
    CommonNoise = 3,
    Permutation = 4,
    Auxiliary = 5,
}

/// Deterministic source of all randomness for one run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngPlan {
    master_seed: u64,
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RngPlan {
    pub fn new(master_seed: u64) -> Self {
        Self { master_seed }
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    /// Child plan for the `run`-th member of a campaign.
    pub fn derive(&self, run: u64) -> RngPlan {
        let mut s = self.master_seed ^ run.wrapping_mul(0xD1B5_4A32_D192_ED03);
        splitmix64(&mut s);
        RngPlan::new(splitmix64(&mut s))
    }

    fn key(&self) -> [u8; 32] {
        let mut s = self.master_seed;
        let mut key = [0u8; 32];
        for chunk in key.chunks_exact_mut(8) {
            chunk.copy_from_slice(&splitmix64(&mut s).to_le_bytes());
        }
        key
    }

    /// Stream positioned at `counter` for the given purpose and index.
    pub fn stream(&self, tag: StreamTag, index: u64, counter: u64) -> ChaCha8Rng {
        debug_assert!(index < (1 << INDEX_BITS));
        let mut rng = ChaCha8Rng::from_seed(self.key());
        rng.set_stream(((tag as u64) << INDEX_BITS) | index);
        rng.set_word_pos(counter as u128 * WORDS_PER_COUNTER);
        rng
    }

    /// Fill `out` with standard normal draws from one `(tag, index, counter)` block.
    pub fn fill_normals(&self, tag: StreamTag, index: u64, counter: u64, out: &mut [f64]) {
        let mut rng = self.stream(tag, index, counter);
        for z in out.iter_mut() {
            *z = StandardNormal.sample(&mut rng);
        }
    }

    /// Noise generator for one step of the dynamics.
    pub fn step_noise(&self, step: u64, common: bool) -> StepNoise {
        StepNoise::new(*self, step, common)
    }
}

/// Gaussian increments for one time step.
///
/// With independent noise every particle reads its own block; with common
/// noise a single block of `d` normals is drawn once and shared.
#[derive(Debug, Clone)]
pub struct StepNoise {
    plan: RngPlan,
    step: u64,
    shared: Option<Vec<f64>>,
    common: bool,
}

impl StepNoise {
    fn new(plan: RngPlan, step: u64, common: bool) -> Self {
        Self {
            plan,
            step,
            shared: None,
            common,
        }
    }

    /// Pre-draw the shared block for common noise of dimension `d`.
    pub fn prepare(&mut self, d: usize) {
        if self.common {
            let mut z = vec![0.0; d];
            self.plan
                .fill_normals(StreamTag::CommonNoise, 0, self.step, &mut z);
            self.shared = Some(z);
        }
    }

    pub fn is_common(&self) -> bool {
        self.common
    }

    /// Normals for particle `particle`, written into `out`.
    pub fn fill(&self, particle: usize, out: &mut [f64]) {
        match (&self.shared, self.common) {
            (Some(z), true) => out.copy_from_slice(&z[..out.len()]),
            (None, true) => {
                self.plan
                    .fill_normals(StreamTag::CommonNoise, 0, self.step, out)
            }
            _ => self
                .plan
                .fill_normals(StreamTag::Noise, particle as u64, self.step, out),
        }
    }
}
