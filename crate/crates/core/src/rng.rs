//! Seeded 64-bit linear congruential generator.
//!
//! The constants and output rule are fixed so that the same seed yields the
//! same stream in every implementation: the state advances as
//! `state = state * 6364136223846793005 + 1442695040888963407 (mod 2^64)` and
//! each draw returns the high 32 bits of the advanced state.

pub const LCG_MULTIPLIER: u64 = 6364136223846793005;
pub const LCG_INCREMENT: u64 = 1442695040888963407;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Lcg64 {
    state: u64,
}

impl Lcg64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u32(&mut self) -> u32 {
        self.state = self
            .state
            .wrapping_mul(LCG_MULTIPLIER)
            .wrapping_add(LCG_INCREMENT);
        (self.state >> 32) as u32
    }

    /// Uniform draw in `[0, 1)` with 32 bits of resolution.
    pub fn next_unit(&mut self) -> f64 {
        f64::from(self.next_u32()) / 4_294_967_296.0
    }
}
