//! Counter-based deterministic random stream.
//!
//! Every draw is a pure function of `(seed, counter)`, so independent workers
//! can be handed disjoint substreams and replays are bit-identical on any
//! platform. This is a splitmix64 generator indexed by counter rather than
//! advanced by mutation.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stateless-indexable random stream: `(seed, counter)` fully determines output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngStream {
    pub seed: u64,
    pub counter: u64,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        RngStream { seed, counter: 0 }
    }

    /// Derive an independent substream. Substream draws never collide with the
    /// parent's because the derivation remixes the seed itself.
    pub fn substream(&self, id: u64) -> RngStream {
        RngStream {
            seed: mix(self.seed ^ mix(id.wrapping_add(GOLDEN))),
            counter: 0,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        let v = mix(self.seed.wrapping_add(self.counter.wrapping_add(1).wrapping_mul(GOLDEN)));
        self.counter += 1;
        v
    }

    /// Uniform in [0, 1): 24-bit mantissa so the value is exact in f32.
    pub fn next_f32(&mut self) -> f32 {
        (self.next_u64() >> 40) as f32 * (1.0 / (1u64 << 24) as f32)
    }

    /// Uniform in [lo, hi).
    pub fn next_range(&mut self, lo: f32, hi: f32) -> f32 {
        lo + (hi - lo) * self.next_f32()
    }

    /// Standard normal via Box-Muller. Consumes two uniforms per call and
    /// discards the sibling draw to stay stateless-per-counter.
    pub fn next_normal(&mut self) -> f32 {
        // Avoid ln(0) by nudging the first uniform off zero.
        let u1 = (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        let r = (-2.0 * (1.0 - u1).ln()).sqrt();
        (r * (2.0 * std::f64::consts::PI * u2).cos()) as f32
    }

    pub fn fill_uniform(&mut self, out: &mut [f32], lo: f32, hi: f32) {
        for v in out.iter_mut() {
            *v = self.next_range(lo, hi);
        }
    }

    pub fn fill_normal(&mut self, out: &mut [f32], mean: f32, std: f32) {
        for v in out.iter_mut() {
            *v = mean + std * self.next_normal();
        }
    }
}
