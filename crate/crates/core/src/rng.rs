/// Counter-based pseudo-random generator (SplitMix64).
///
/// Every stochastic choice in the project flows through this generator so
/// datasets, initializations, and training runs replay bit-identically from
/// their seeds on any platform.
///
/// Splitting rule: stream `i` of base seed `b` starts from
/// `mix(b + (i + 1) * GOLDEN)`, where GOLDEN is the 64-bit golden-ratio
/// increment. `crate::datagen` derives per-sample seeds with this rule.
#[derive(Debug, Clone)]
pub struct Rng {
    state: u64,
}

pub const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { state: seed }
    }

    /// Independent stream `i` derived from `base` (the documented splitting rule).
    pub fn split(base: u64, i: u64) -> Self {
        Rng::new(mix(base.wrapping_add((i.wrapping_add(1)).wrapping_mul(GOLDEN))))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN);
        mix(self.state)
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi).
    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.next_u64() % n as u64) as usize
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f64 {
        let u1 = self.uniform().max(1e-300);
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }
}
