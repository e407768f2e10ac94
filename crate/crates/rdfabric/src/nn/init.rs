//! Deterministic weight initialization. Gaussian draws go through Box–Muller
//! on top of ChaCha20 so results are identical across platforms.

use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use super::Scalar;

pub struct Init {
    rng: ChaCha20Rng,
}

impl Init {
    pub fn seeded(seed: u64) -> Self {
        Init { rng: ChaCha20Rng::seed_from_u64(seed) }
    }

    /// Independent generator sharing `seed` — used when two consumers (say,
    /// base texture and defect geometry) must not perturb each other's draws.
    pub fn seeded_stream(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Init { rng }
    }

    /// Standard-normal draw (Box–Muller, one of the pair discarded).
    pub fn standard_normal(&mut self) -> f64 {
        let u1: f64 = 1.0 - self.rng.random::<f64>(); // (0, 1]
        let u2: f64 = self.rng.random::<f64>();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn normal<F: Scalar>(&mut self, shape: &[usize], std: f64) -> ArrayD<F> {
        ArrayD::from_shape_simple_fn(IxDyn(shape), || F::fl(self.standard_normal() * std))
    }

    /// He initialization for a conv weight `[c_out, c_in, k, k]`:
    /// `std = sqrt(2 / (c_in * k * k))`.
    pub fn he_conv<F: Scalar>(&mut self, c_out: usize, c_in: usize, k: usize) -> ArrayD<F> {
        let std = (2.0 / (c_in * k * k) as f64).sqrt();
        self.normal(&[c_out, c_in, k, k], std)
    }

    /// He initialization for a fully connected weight `[out, inp]`.
    pub fn he_linear<F: Scalar>(&mut self, out: usize, inp: usize) -> ArrayD<F> {
        let std = (2.0 / inp as f64).sqrt();
        self.normal(&[out, inp], std)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_across_instances() {
        let a = Init::seeded(7).normal::<f32>(&[32, 8], 0.5);
        let b = Init::seeded(7).normal::<f32>(&[32, 8], 0.5);
        assert_eq!(a, b);
        let c = Init::seeded(8).normal::<f32>(&[32, 8], 0.5);
        assert_ne!(a, c);
    }

    #[test]
    fn moments_are_plausible() {
        let w = Init::seeded(0).normal::<f64>(&[200, 200], 1.0);
        let n = w.len() as f64;
        let mean = w.sum() / n;
        let var = w.mapv(|v| (v - mean) * (v - mean)).sum() / n;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.03, "var {var}");
    }

    #[test]
    fn he_conv_scale() {
        let w = Init::seeded(1).he_conv::<f64>(64, 32, 3);
        let n = w.len() as f64;
        let var = w.mapv(|v| v * v).sum() / n;
        let expect = 2.0 / (32.0 * 9.0);
        assert!((var / expect - 1.0).abs() < 0.1, "var {var} vs {expect}");
    }
}
