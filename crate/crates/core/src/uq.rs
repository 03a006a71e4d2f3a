//! Monte-Carlo dropout inference and thresholded uncertainty maps.
//!
//! `σ̂ = √Ĉ` uses the pass-averaged variance head. The across-pass variance
//! of the mean head (epistemic spread) is returned separately and not mixed
//! into `σ̂`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::losses::HeteroPrediction;
use crate::micronet::{Dropout, MicroNet};
use crate::rng::Rng;
use crate::tensor::{Image, MultimodalStack};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UqConfig {
    pub num_passes: usize,
    /// Residual threshold for BM1, in normalized intensity units.
    pub delta_r: f64,
    /// Uncertainty threshold for BM2, same units.
    pub delta_u: f64,
    /// Keep every pass's outputs (memory heavy).
    pub keep_passes: bool,
}

impl Default for UqConfig {
    fn default() -> Self {
        UqConfig {
            num_passes: 50,
            delta_r: 0.25,
            delta_u: 0.03,
            keep_passes: false,
        }
    }
}

impl UqConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.num_passes == 0 {
            errs.push("uq.num_passes must be >= 1".to_string());
        }
        if !(self.delta_r > 0.0) {
            errs.push(format!("uq.delta_r must be > 0, got {}", self.delta_r));
        }
        if !(self.delta_u > 0.0) {
            errs.push(format!("uq.delta_u must be > 0, got {}", self.delta_u));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct McPrediction {
    pub y_mean: Image,
    pub c_mean: Image,
    /// Across-pass variance of the mean head (zero when M = 1).
    pub y_spread: Image,
    pub passes: Option<Vec<HeteroPrediction>>,
}

/// Averages `num_passes` forward passes, pass `m` drawing its dropout mask
/// from `rng.fork(m)`. Summation is in pass order.
pub fn mc_infer(
    net: &MicroNet,
    input: &MultimodalStack,
    num_passes: usize,
    rng: &Rng,
    keep_passes: bool,
) -> Result<McPrediction> {
    if num_passes == 0 {
        return Err(domain("MC inference needs at least one pass"));
    }
    log::debug!("MC dropout inference with M = {num_passes}");
    let passes: Vec<HeteroPrediction> = (0..num_passes)
        .into_par_iter()
        .map(|m| net.predict(input, Dropout::Sample(&mut rng.fork(m as u64))))
        .collect::<Result<_>>()?;
    let n = passes[0].y_hat.len();
    let inv = 1.0 / num_passes as f64;
    let mut y = vec![0.0; n];
    let mut c = vec![0.0; n];
    for p in &passes {
        for k in 0..n {
            y[k] += p.y_hat.data()[k];
            c[k] += p.c_hat.data()[k];
        }
    }
    y.iter_mut().for_each(|v| *v *= inv);
    c.iter_mut().for_each(|v| *v *= inv);
    let mut spread = vec![0.0; n];
    for p in &passes {
        for k in 0..n {
            spread[k] += (p.y_hat.data()[k] - y[k]).powi(2);
        }
    }
    spread.iter_mut().for_each(|v| *v *= inv);
    let template = &passes[0].y_hat;
    Ok(McPrediction {
        y_mean: template.with_data(y),
        c_mean: template.with_data(c),
        y_spread: template.with_data(spread),
        passes: keep_passes.then_some(passes),
    })
}

/// `σ̂ = √Ĉ` elementwise.
pub fn uncertainty_map(c_mean: &Image) -> Result<Image> {
    if let Some(v) = c_mean.data().iter().find(|&&v| v < 0.0) {
        return Err(domain(format!("variance map has a negative voxel {v}")));
    }
    Ok(c_mean.map(f64::sqrt))
}

#[derive(Clone, Debug, PartialEq)]
pub struct QMaps {
    pub q1: Image,
    pub q2: Image,
    /// 1 where `|residual| ≥ δ_R`.
    pub bm1: Image,
    /// 1 where `σ̂ ≥ δ_U`.
    pub bm2: Image,
}

impl QMaps {
    /// `|supp Q1 ∩ supp Q2| / |supp Q1|`; `None` when Q1 is empty.
    pub fn containment(&self) -> Option<f64> {
        let mut q1 = 0usize;
        let mut both = 0usize;
        for (a, b) in self.q1.data().iter().zip(self.q2.data()) {
            if *a != 0.0 {
                q1 += 1;
                if *b != 0.0 {
                    both += 1;
                }
            }
        }
        (q1 > 0).then(|| both as f64 / q1 as f64)
    }
}

pub fn q_maps(sigma: &Image, residual_abs: &Image, cfg: &UqConfig) -> Result<QMaps> {
    sigma.check_same_shape(residual_abs)?;
    let bm1 = residual_abs.map(|r| if r >= cfg.delta_r { 1.0 } else { 0.0 });
    let bm2 = sigma.map(|s| if s >= cfg.delta_u { 1.0 } else { 0.0 });
    let q1 = sigma.zip_map(&bm1, |s, m| s * m)?;
    let q2 = sigma.zip_map(&bm2, |s, m| s * m)?;
    Ok(QMaps { q1, q2, bm1, bm2 })
}

/// Mean of `img` over voxels where `mask` is true.
pub fn masked_mean(img: &Image, mask: &[bool]) -> Result<f64> {
    if mask.len() != img.len() {
        return Err(domain("mask length does not match the image"));
    }
    let (sum, n) = img
        .data()
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .fold((0.0, 0usize), |(s, n), (v, _)| (s + v, n + 1));
    if n == 0 {
        return Err(domain("mask is empty"));
    }
    Ok(sum / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::micronet::MicroNetConfig;
    use crate::tensor::{Channel, Modality};

    fn img(data: Vec<f64>) -> Image {
        let n = (data.len() as f64).sqrt() as usize;
        Image::from_vec(n, n, 2.0, data).unwrap()
    }

    fn net_and_input() -> (MicroNet, MultimodalStack) {
        let net = MicroNet::new(MicroNetConfig {
            in_channels: 1,
            widths: [4, 4, 8],
            dropout_p: 0.25,
            init_seed: 2,
            ..Default::default()
        })
        .unwrap();
        let mut rng = Rng::new(3);
        let image = Image::from_vec(16, 16, 2.0, (0..256).map(|_| rng.uniform()).collect()).unwrap();
        let stack = MultimodalStack::new(
            vec![Modality::Pet],
            vec![0],
            vec![Channel {
                modality: Modality::Pet,
                offset: 0,
                image,
            }],
        )
        .unwrap();
        (net, stack)
    }

    #[test]
    fn single_pass_equals_one_stochastic_forward() {
        let (net, x) = net_and_input();
        let rng = Rng::new(11);
        let mc = mc_infer(&net, &x, 1, &rng, true).unwrap();
        let direct = net.predict(&x, Dropout::Sample(&mut rng.fork(0))).unwrap();
        assert_eq!(mc.y_mean, direct.y_hat);
        assert_eq!(mc.c_mean, direct.c_hat);
        assert_eq!(mc.passes.unwrap().len(), 1);
        assert!(mc.y_spread.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn full_pass_count_accepted_and_deterministic() {
        let (net, x) = net_and_input();
        let cfg = UqConfig::default();
        assert_eq!(cfg.num_passes, 50);
        let a = mc_infer(&net, &x, cfg.num_passes, &Rng::new(1), false).unwrap();
        let b = mc_infer(&net, &x, cfg.num_passes, &Rng::new(1), false).unwrap();
        assert_eq!(a, b);
        assert!(a.passes.is_none());
        assert!(mc_infer(&net, &x, 0, &Rng::new(1), false).is_err());
    }

    #[test]
    fn averaging_reduces_run_to_run_variance() {
        let (net, x) = net_and_input();
        let spread = |m: usize| {
            let runs: Vec<Image> = (0..20)
                .map(|r| mc_infer(&net, &x, m, &Rng::new(100 + r), false).unwrap().y_mean)
                .collect();
            let n = runs[0].len();
            (0..n)
                .map(|k| {
                    let vals: Vec<f64> = runs.iter().map(|i| i.data()[k]).collect();
                    let mean = vals.iter().sum::<f64>() / 20.0;
                    vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 19.0
                })
                .sum::<f64>()
                / n as f64
        };
        let (v50, v1) = (spread(50), spread(1));
        assert!(v50 <= v1, "{v50} vs {v1}");
    }

    #[test]
    fn uncertainty_map_examples() {
        assert!(uncertainty_map(&img(vec![4.0; 4])).unwrap().data().iter().all(|&v| v == 2.0));
        assert!(uncertainty_map(&img(vec![0.0; 4])).unwrap().data().iter().all(|&v| v == 0.0));
        let s = img(vec![0.1, 0.7, 1.3, 2.0]);
        assert_eq!(uncertainty_map(&s.map(|v| v * v)).unwrap(), s);
        assert!(matches!(uncertainty_map(&img(vec![1.0, -1.0, 1.0, 1.0])), Err(Error::Domain(_))));
    }

    #[test]
    fn zero_residual_gives_empty_q1() {
        let sigma = img(vec![0.5; 16]);
        let q = q_maps(&sigma, &sigma.zeros_like(), &UqConfig::default()).unwrap();
        assert!(q.bm1.data().iter().all(|&v| v == 0.0));
        assert!(q.q1.data().iter().all(|&v| v == 0.0));
        assert_eq!(q.containment(), None);
        let cfg = UqConfig::default();
        assert_eq!((cfg.delta_r, cfg.delta_u), (0.25, 0.03));
    }

    #[test]
    fn supports_and_containment_by_enumeration() {
        let mut rng = Rng::new(9);
        let sigma = img((0..64).map(|_| rng.range(0.0, 0.1)).collect());
        let resid = img((0..64).map(|_| rng.range(0.0, 0.5)).collect());
        let cfg = UqConfig::default();
        let q = q_maps(&sigma, &resid, &cfg).unwrap();
        let mut q1 = 0;
        let mut both = 0;
        for k in 0..64 {
            let (s, r) = (sigma.data()[k], resid.data()[k]);
            if q.q1.data()[k] != 0.0 {
                assert_eq!(q.bm1.data()[k], 1.0);
            }
            if q.q2.data()[k] != 0.0 {
                assert_eq!(q.bm2.data()[k], 1.0);
            }
            if r >= cfg.delta_r && s != 0.0 {
                q1 += 1;
                if s >= cfg.delta_u {
                    both += 1;
                }
            }
        }
        assert_eq!(q.containment(), Some(both as f64 / q1 as f64));

        // Full containment when σ̂ clears δ_U wherever the residual clears δ_R.
        let covered = sigma.zip_map(&resid, |s, r| if r >= cfg.delta_r { 0.05 } else { s }).unwrap();
        assert_eq!(q_maps(&covered, &resid, &cfg).unwrap().containment(), Some(1.0));
    }

    #[test]
    fn raising_delta_u_never_grows_q2() {
        let mut rng = Rng::new(10);
        let sigma = img((0..64).map(|_| rng.range(0.0, 0.1)).collect());
        let resid = sigma.zeros_like();
        let mut prev = usize::MAX;
        for du in [0.01, 0.02, 0.03, 0.05, 0.08] {
            let cfg = UqConfig {
                delta_u: du,
                ..Default::default()
            };
            let n = q_maps(&sigma, &resid, &cfg).unwrap().q2.data().iter().filter(|&&v| v != 0.0).count();
            assert!(n <= prev);
            prev = n;
        }
        assert!(q_maps(&sigma, &img(vec![0.0; 4]), &UqConfig::default()).is_err());
    }
}
