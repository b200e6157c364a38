//! Reproducible random streams.
//!
//! Every Monte-Carlo sample draws from its own ChaCha stream selected by
//! `(seed, index)`, so datasets can be generated in any order (or in
//! parallel) and still be bit-identical.

use num_complex::Complex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::scalar::Scalar;

pub type SampleRng = ChaCha8Rng;

/// The independent stream for sample `index` under `seed`.
pub fn sample_stream(seed: u64, index: u64) -> SampleRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Derives a child seed for a named purpose ("train", "val", "test/snr=10", ...).
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 digest has 32 bytes"))
}

/// One draw from CN(0, variance): real and imaginary parts each N(0, variance/2).
pub fn complex_gaussian<T: Scalar, R: Rng + ?Sized>(rng: &mut R, variance: T) -> Complex<T> {
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    let sd = (variance / T::lit(2.0)).sqrt();
    Complex::new(T::lit(re) * sd, T::lit(im) * sd)
}

/// Uniform draw on `[lo, hi]`, computed in `f64` for cross-precision stability.
pub fn uniform<T: Scalar, R: Rng + ?Sized>(rng: &mut R, lo: T, hi: T) -> T {
    let u: f64 = rng.random();
    let (lo, hi) = (lo.to_f64_lossy(), hi.to_f64_lossy());
    T::lit(lo + (hi - lo) * u)
}
