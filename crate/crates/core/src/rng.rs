//! Seeded pseudo-random numbers with a fixed, documented algorithm so that
//! dataset splits, initial weights and dropout masks are reproducible
//! across builds and implementations.
//!
//! * Seeding: the user seed is passed once through SplitMix64
//!   (`z += 0x9E3779B97F4A7C15; z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9;
//!   z = (z ^ (z >> 27)) * 0x94D049BB133111EB; z ^= z >> 31`). A zero result
//!   is replaced by `0x9E3779B97F4A7C15`.
//! * Stream: xorshift64* with shifts (12, 25, 27) and output multiplier
//!   `0x2545F4914F6CDD1D`.
//! * `next_f64` uses the top 53 bits: `(x >> 11) * 2^-53`.
//! * `below(n)` rejects draws above the largest multiple of `n` and then
//!   reduces modulo `n`; powers of two take the top bits directly.
//! * `shuffle` is Fisher–Yates running from the last index down, swapping
//!   `i` with `below(i + 1)`.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rng {
    state: u64,
}

fn splitmix64(seed: u64) -> u64 {
    let mut z = seed.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        let state = match splitmix64(seed) {
            0 => GOLDEN,
            s => s,
        };
        Rng { state }
    }

    /// Derives an independent stream, e.g. one per epoch.
    pub fn fork(&mut self, salt: u64) -> Rng {
        Rng::new(self.next_u64() ^ salt.wrapping_mul(GOLDEN))
    }

    pub fn next_u64(&mut self) -> u64 {
        let mut x = self.state;
        x ^= x >> 12;
        x ^= x << 25;
        x ^= x >> 27;
        self.state = x;
        x.wrapping_mul(0x2545_F491_4F6C_DD1D)
    }

    /// Uniform in `[0, 1)`.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in `[0, n)`. `n` must be positive.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        if n == 1 {
            return 0;
        }
        if n.is_power_of_two() {
            return self.next_u64() >> (64 - n.trailing_zeros());
        }
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let v = self.next_u64();
            if v < zone {
                return v % n;
            }
        }
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}
