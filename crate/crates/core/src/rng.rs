//! Seeded, purpose-keyed random streams.
//!
//! Every stochastic component (channel draws, noise, measurement matrices,
//! perturbations) pulls from its own ChaCha stream derived from one root
//! seed. Monte Carlo trials are keyed by trial index, so results do not
//! depend on scheduling or worker count.

use num_complex::Complex64;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

/// Stream purposes, encoded into the high bits of the ChaCha stream id.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Purpose {
    Channel,
    Noise,
    Matrices,
    Perturbation,
    Trial,
    Bench,
}

impl Purpose {
    fn tag(self) -> u64 {
        match self {
            Purpose::Channel => 1,
            Purpose::Noise => 2,
            Purpose::Matrices => 3,
            Purpose::Perturbation => 4,
            Purpose::Trial => 5,
            Purpose::Bench => 6,
        }
    }
}

/// Root seed from which all substreams are derived.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedTree {
    root: u64,
}

impl SeedTree {
    pub fn new(root: u64) -> Self {
        Self { root }
    }

    pub fn root(&self) -> u64 {
        self.root
    }

    /// Independent stream for (purpose, index). Indices below 2^48 only,
    /// which leaves 16 bits for the purpose tag.
    pub fn stream(&self, purpose: Purpose, index: u64) -> ChaCha12Rng {
        debug_assert!(index < (1 << 48));
        let mut rng = ChaCha12Rng::seed_from_u64(self.root);
        rng.set_stream((purpose.tag() << 48) | index);
        rng
    }

    /// Derive a subtree whose streams are disjoint from this one's.
    pub fn subtree(&self, label: u64) -> SeedTree {
        // SplitMix64 step keeps subtree roots well separated.
        let mut z = self.root.wrapping_add(label.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        SeedTree { root: z ^ (z >> 31) }
    }
}

/// Draw from the circularly symmetric complex Gaussian CN(0, variance).
pub fn complex_normal<R: Rng>(rng: &mut R, variance: f64) -> Complex64 {
    let s = (variance * 0.5).sqrt();
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    Complex64::new(s * re, s * im)
}

/// Unit-modulus complex number with phase uniform on [0, 2pi).
pub fn random_phase<R: Rng>(rng: &mut R) -> Complex64 {
    let phi: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    Complex64::from_polar(1.0, phi)
}
