//! Seeded, platform-independent random streams.
//!
//! Every stochastic stage takes an explicit [`Rng`]. Parallel work never
//! shares one; it derives independent `(seed, stream)` children instead.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use statrs::function::gamma::ln_gamma;

use crate::error::{domain, Result};

/// Below this mean the sampler inverts the CDF by sequential search.
const INVERSION_LIMIT: f64 = 30.0;

#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Rng { seed, stream, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// An independent stream keyed by `(seed, id)`; does not advance `self`.
    pub fn fork(&self, id: u64) -> Rng {
        // Mix the parent's stream into the child seed so nested forks stay distinct.
        let mixed = splitmix64(self.seed ^ splitmix64(self.stream.wrapping_add(0x9e37_79b9)));
        Rng::with_stream(mixed, id)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform on [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn poisson(&mut self, lambda: f64) -> Result<u64> {
        if !lambda.is_finite() || lambda < 0.0 {
            return Err(domain(format!("Poisson mean must be finite and >= 0, got {lambda}")));
        }
        if lambda == 0.0 {
            return Ok(0);
        }
        Ok(if lambda < INVERSION_LIMIT {
            self.poisson_inversion(lambda)
        } else {
            self.poisson_ptrs(lambda)
        })
    }

    fn poisson_inversion(&mut self, lambda: f64) -> u64 {
        let u = self.uniform();
        let mut k = 0u64;
        let mut p = (-lambda).exp();
        let mut cdf = p;
        while u > cdf {
            k += 1;
            p *= lambda / k as f64;
            cdf += p;
            // Tail mass lost to rounding; stop once the pmf underflows.
            if p < f64::MIN_POSITIVE {
                break;
            }
        }
        k
    }

    /// Hörmann's transformed rejection with squeeze (PTRS).
    fn poisson_ptrs(&mut self, lambda: f64) -> u64 {
        let slam = lambda.sqrt();
        let loglam = lambda.ln();
        let b = 0.931 + 2.53 * slam;
        let a = -0.059 + 0.02483 * b;
        let inv_alpha = 1.1239 + 1.1328 / (b - 3.4);
        let v_r = 0.9277 - 3.6224 / (b - 2.0);
        loop {
            let u = self.uniform() - 0.5;
            let v = self.uniform();
            let us = 0.5 - u.abs();
            let k = ((2.0 * a / us + b) * u + lambda + 0.43).floor();
            if us >= 0.07 && v <= v_r {
                return k as u64;
            }
            if k < 0.0 || (us < 0.013 && v > us) {
                continue;
            }
            let lhs = v.ln() + inv_alpha.ln() - (a / (us * us) + b).ln();
            let rhs = -lambda + k * loglam - ln_gamma(k + 1.0);
            if lhs <= rhs {
                return k as u64;
            }
        }
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;
    use statrs::distribution::{ChiSquared, ContinuousCDF, Discrete, Poisson};

    fn moments(lambda: f64, n: usize, seed: u64) -> (f64, f64) {
        let mut rng = Rng::new(seed);
        let xs: Vec<f64> = (0..n).map(|_| rng.poisson(lambda).unwrap() as f64).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        (mean, var)
    }

    #[test]
    fn zero_mean_is_degenerate() {
        let mut rng = Rng::new(1);
        assert!((0..1000).all(|_| rng.poisson(0.0).unwrap() == 0));
    }

    #[test]
    fn rejects_bad_lambda() {
        let mut rng = Rng::new(1);
        assert!(rng.poisson(-1.0).is_err());
        assert!(rng.poisson(f64::NAN).is_err());
        assert!(rng.poisson(f64::INFINITY).is_err());
    }

    #[test]
    fn mean_and_variance_lambda_10() {
        let (mean, var) = moments(10.0, 1_000_000, 42);
        assert!((9.99..=10.01).contains(&mean), "mean {mean}");
        assert!((9.9..=10.1).contains(&var), "var {var}");
    }

    #[test]
    fn large_lambda_moments() {
        let (mean, var) = moments(400.0, 200_000, 5);
        assert!((mean - 400.0).abs() < 0.3, "mean {mean}");
        assert!((var / 400.0 - 1.0).abs() < 0.02, "var {var}");
    }

    /// Pearson chi-squared statistic with tail bins merged until expected >= 5.
    pub(crate) fn chi_squared_gof(lambda: f64, samples: &[u64]) -> (f64, usize) {
        let n = samples.len() as f64;
        let pois = Poisson::new(lambda).unwrap();
        let max_k = *samples.iter().max().unwrap() as usize;
        let mut observed = vec![0.0; max_k + 2];
        for &s in samples {
            observed[s as usize] += 1.0;
        }
        let mut bins: Vec<(f64, f64)> = Vec::new();
        let (mut obs_acc, mut exp_acc, mut cum) = (0.0, 0.0, 0.0);
        for (k, &o) in observed.iter().enumerate().take(max_k + 1) {
            let p = pois.pmf(k as u64);
            cum += p;
            obs_acc += o;
            exp_acc += p * n;
            if exp_acc >= 5.0 && (1.0 - cum) * n >= 5.0 {
                bins.push((obs_acc, exp_acc));
                obs_acc = 0.0;
                exp_acc = 0.0;
            }
        }
        // Remaining upper tail, including mass beyond the largest sample.
        bins.push((obs_acc, exp_acc + (1.0 - cum).max(0.0) * n));
        let stat = bins.iter().map(|(o, e)| (o - e).powi(2) / e).sum();
        (stat, bins.len() - 1)
    }

    #[test]
    fn chi_squared_goodness_of_fit() {
        for (i, &lambda) in [0.5, 5.0, 50.0].iter().enumerate() {
            let mut rng = Rng::new(1000 + i as u64);
            let samples: Vec<u64> = (0..100_000).map(|_| rng.poisson(lambda).unwrap()).collect();
            let (stat, dof) = chi_squared_gof(lambda, &samples);
            let crit = ChiSquared::new(dof as f64).unwrap().inverse_cdf(1.0 - 0.001);
            assert!(stat < crit, "lambda {lambda}: chi2 {stat} >= {crit} (dof {dof})");
        }
    }

    #[test]
    fn same_seed_same_stream() {
        let mut a = Rng::new(9);
        let mut b = Rng::new(9);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        let mut c = Rng::with_stream(9, 1);
        let mut d = Rng::new(9);
        assert_ne!(c.next_u64(), d.next_u64());
    }

    #[test]
    fn forks_are_distinct_and_stable() {
        let root = Rng::new(3);
        let mut f1 = root.fork(1);
        let mut f1b = root.fork(1);
        let mut f2 = root.fork(2);
        let x = f1.next_u64();
        assert_eq!(x, f1b.next_u64());
        assert_ne!(x, f2.next_u64());
    }
}
