//! Counter-based pseudo-random generator.
//!
//! Every stochastic piece of the pipeline (scene generation, parameter
//! initialization, probe selection) draws from this generator so that results
//! reproduce bit-for-bit across platforms. The algorithm is SplitMix64: the
//! i-th output is `mix64(seed + i * GOLDEN_GAMMA)`, a pure function of
//! `(seed, i)` with no float state, which makes streams cheap to fork by
//! offsetting the counter.

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 stream addressed by `(seed, counter)`.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    counter: u64,
}

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { seed, counter: 0 }
    }

    /// Independent stream for a sub-task, keyed by a label hash.
    /// Forked streams never collide with the parent because the label is
    /// mixed into the seed, not the counter.
    pub fn fork(&self, label: u64) -> Rng {
        Rng {
            seed: mix64(self.seed ^ mix64(label.wrapping_add(GOLDEN_GAMMA))),
            counter: 0,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        let z = self.seed.wrapping_add(self.counter.wrapping_mul(GOLDEN_GAMMA));
        self.counter += 1;
        mix64(z.wrapping_add(GOLDEN_GAMMA))
    }

    /// Uniform in [0, 1) with 53-bit resolution.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi).
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: u64) -> u64 {
        // Desk-scale n; modulo bias is negligible and keeps the stream
        // consumption fixed at one draw.
        self.next_u64() % n.max(1)
    }

    /// Standard normal via Box-Muller. Consumes exactly two draws.
    pub fn normal(&mut self) -> f64 {
        let u1 = self.uniform().max(f64::MIN_POSITIVE);
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    pub fn normal_scaled(&mut self, std: f64) -> f64 {
        self.normal() * std
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_are_reproducible() {
        let mut a = Rng::new(42);
        let mut b = Rng::new(42);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn forks_diverge_from_parent() {
        let parent = Rng::new(7);
        let mut f1 = parent.fork(1);
        let mut f2 = parent.fork(2);
        assert_ne!(f1.next_u64(), f2.next_u64());
    }

    #[test]
    fn uniform_stays_in_unit_interval() {
        let mut r = Rng::new(123);
        for _ in 0..10_000 {
            let x = r.uniform();
            assert!((0.0..1.0).contains(&x));
        }
    }

    #[test]
    fn known_first_output() {
        // Frozen so that any change to the mixing constants is caught: the
        // generator is part of the scene-file contract.
        let mut r = Rng::new(0);
        assert_eq!(r.next_u64(), mix64(GOLDEN_GAMMA));
    }

    #[test]
    fn normal_has_sane_moments() {
        let mut r = Rng::new(9);
        let n = 20_000;
        let xs: Vec<f64> = (0..n).map(|_| r.normal()).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.05, "mean {mean}");
        assert!((var - 1.0).abs() < 0.1, "var {var}");
    }
}
