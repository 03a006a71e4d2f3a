//! Training objectives with analytic gradients with respect to both network
//! outputs.
//!
//! The heteroscedastic losses are Gaussian negative log-likelihoods: in the
//! image domain with per-voxel variance `ĉ`, and in the sinogram domain with
//! per-bin variance `S·ĉ` (cross-bin covariances are not modeled). Both are
//! returned as totals over voxels / bins, not means.

use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::projector::Projector;
use crate::tensor::Image;

/// Paired mean and variance outputs of the dual-head network.
#[derive(Clone, Debug, PartialEq)]
pub struct HeteroPrediction {
    pub y_hat: Image,
    pub c_hat: Image,
}

impl HeteroPrediction {
    pub fn new(y_hat: Image, c_hat: Image) -> Result<Self> {
        y_hat.check_same_shape(&c_hat)?;
        if y_hat.data().iter().any(|&v| v < 0.0) {
            return Err(domain("predicted mean must be nonnegative"));
        }
        check_positive(&c_hat)?;
        Ok(HeteroPrediction { y_hat, c_hat })
    }
}

fn check_positive(c_hat: &Image) -> Result<()> {
    if let Some(v) = c_hat.data().iter().find(|&&v| v <= 0.0) {
        return Err(domain(format!("predicted variance must be positive, found {v}")));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Image-domain stabilizer added to `ĉ`.
    pub epsilon: f64,
    /// Sinogram-domain stabilizer added to `S·ĉ`.
    pub tau: f64,
    /// Weight of the sinogram NLL in the combined loss.
    pub lambda_s: f64,
    /// Weight of the encoding loss in the MSE+E objective.
    pub lambda_e: f64,
    /// Weight of the sinogram MSE in the MSE+S objective.
    pub lambda_s_mse: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            epsilon: 1e-6,
            tau: 1e-6,
            lambda_s: 0.003,
            lambda_e: 0.002,
            lambda_s_mse: 0.003,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if !(self.epsilon > 0.0) {
            errs.push("loss.epsilon must be > 0".to_string());
        }
        if !(self.tau > 0.0) {
            errs.push("loss.tau must be > 0".to_string());
        }
        for (name, v) in [
            ("lambda_s", self.lambda_s),
            ("lambda_e", self.lambda_e),
            ("lambda_s_mse", self.lambda_s_mse),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                errs.push(format!("loss.{name} must be >= 0"));
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

/// Loss value with gradients with respect to the mean and variance outputs.
#[derive(Clone, Debug)]
pub struct LossGrad {
    pub value: f64,
    pub grad_y: Image,
    pub grad_c: Image,
}

impl LossGrad {
    fn scaled_add(mut self, weight: f64, other: &LossGrad) -> LossGrad {
        self.value += weight * other.value;
        for (a, b) in self.grad_y.data_mut().iter_mut().zip(other.grad_y.data()) {
            *a += weight * b;
        }
        for (a, b) in self.grad_c.data_mut().iter_mut().zip(other.grad_c.data()) {
            *a += weight * b;
        }
        self
    }
}

/// Gaussian NLL terms for residual `d` and variance `v`:
/// value `d²/v + ln v`, derivatives `2d/v` and `1/v − d²/v²`.
#[inline]
fn nll_terms(d: f64, v: f64) -> (f64, f64, f64) {
    let inv = 1.0 / v;
    let d2 = d * d;
    (d2 * inv + v.ln(), 2.0 * d * inv, inv - d2 * inv * inv)
}

/// Image-domain heteroscedastic loss `Σ_k (ŷ−u)²/(ĉ+ε) + ln(ĉ+ε)`.
pub fn loss_u(pred: &HeteroPrediction, target: &Image, eps: f64) -> Result<LossGrad> {
    pred.y_hat.check_same_shape(target)?;
    pred.y_hat.check_same_shape(&pred.c_hat)?;
    check_positive(&pred.c_hat)?;
    let n = target.len();
    let mut value = 0.0;
    let mut gy = vec![0.0; n];
    let mut gc = vec![0.0; n];
    for k in 0..n {
        let d = pred.y_hat.data()[k] - target.data()[k];
        let (v, dy, dc) = nll_terms(d, pred.c_hat.data()[k] + eps);
        value += v;
        gy[k] = dy;
        gc[k] = dc;
    }
    Ok(LossGrad {
        value,
        grad_y: target.with_data(gy),
        grad_c: target.with_data(gc),
    })
}

/// Sinogram-domain heteroscedastic loss: residual `Sŷ − Su` with per-bin
/// variance `Sĉ + τ`. Gradients are backprojected to image space.
pub fn loss_s(pred: &HeteroPrediction, target: &Image, projector: &Projector, tau: f64) -> Result<LossGrad> {
    pred.y_hat.check_same_shape(target)?;
    pred.y_hat.check_same_shape(&pred.c_hat)?;
    check_positive(&pred.c_hat)?;
    let p = projector.forward(&pred.y_hat)?;
    let q = projector.forward(target)?;
    let v = projector.forward(&pred.c_hat)?;
    let l = p.len();
    let mut value = 0.0;
    let mut gp = vec![0.0; l];
    let mut gv = vec![0.0; l];
    for i in 0..l {
        let (val, dp, dv) = nll_terms(p.data()[i] - q.data()[i], v.data()[i] + tau);
        value += val;
        gp[i] = dp;
        gv[i] = dv;
    }
    Ok(LossGrad {
        value,
        grad_y: projector.adjoint(&p.with_data(gp))?,
        grad_c: projector.adjoint(&v.with_data(gv))?,
    })
}

/// `loss_u + λ_s · loss_s`.
pub fn loss_su(pred: &HeteroPrediction, target: &Image, projector: &Projector, cfg: &LossConfig) -> Result<LossGrad> {
    let u = loss_u(pred, target, cfg.epsilon)?;
    if cfg.lambda_s == 0.0 {
        return Ok(u);
    }
    let s = loss_s(pred, target, projector, cfg.tau)?;
    Ok(u.scaled_add(cfg.lambda_s, &s))
}

/// Mean squared error `(1/K) Σ (ŷ−u)²`.
pub fn loss_mse(y_hat: &Image, target: &Image) -> Result<(f64, Image)> {
    y_hat.check_same_shape(target)?;
    let k = y_hat.len() as f64;
    let resid: Vec<f64> = y_hat.data().iter().zip(target.data()).map(|(a, b)| a - b).collect();
    let value = resid.iter().map(|r| r * r).sum::<f64>() / k;
    Ok((value, y_hat.with_data(resid.iter().map(|r| 2.0 * r / k).collect())))
}

/// Squared Frobenius norm of the sinogram residual, `‖Sŷ − Su‖²`.
pub fn loss_sinogram_mse(y_hat: &Image, target: &Image, projector: &Projector) -> Result<(f64, Image)> {
    y_hat.check_same_shape(target)?;
    let p = projector.forward(y_hat)?;
    let q = projector.forward(target)?;
    let resid: Vec<f64> = p.data().iter().zip(q.data()).map(|(a, b)| a - b).collect();
    let value = resid.iter().map(|r| r * r).sum();
    let grad = projector.adjoint(&p.with_data(resid.iter().map(|r| 2.0 * r).collect()))?;
    Ok((value, grad))
}

/// A differentiable image-to-feature map used by the encoding loss.
pub trait Encoder {
    fn encode(&self, img: &Image) -> Result<Vec<f64>>;

    /// Transposed Jacobian at `img` applied to `cotangent`.
    fn vjp(&self, img: &Image, cotangent: &[f64]) -> Result<Image>;
}

/// Block average pooling followed by flattening. Linear, so its transposed
/// Jacobian is exact and independent of the input.
#[derive(Clone, Copy, Debug)]
pub struct AvgPoolEncoder {
    pub factor: usize,
}

impl Default for AvgPoolEncoder {
    fn default() -> Self {
        AvgPoolEncoder { factor: 4 }
    }
}

impl AvgPoolEncoder {
    fn check(&self, img: &Image) -> Result<(usize, usize)> {
        let f = self.factor;
        if f == 0 || img.width() % f != 0 || img.height() % f != 0 {
            return Err(domain(format!(
                "pooling factor {f} must divide the image size {}x{}",
                img.width(),
                img.height()
            )));
        }
        Ok((img.width() / f, img.height() / f))
    }
}

impl Encoder for AvgPoolEncoder {
    fn encode(&self, img: &Image) -> Result<Vec<f64>> {
        let (ow, oh) = self.check(img)?;
        let f = self.factor;
        let norm = 1.0 / (f * f) as f64;
        let mut out = vec![0.0; ow * oh];
        for r in 0..img.height() {
            for c in 0..img.width() {
                out[(r / f) * ow + c / f] += img.get(r, c) * norm;
            }
        }
        Ok(out)
    }

    fn vjp(&self, img: &Image, cotangent: &[f64]) -> Result<Image> {
        let (ow, oh) = self.check(img)?;
        if cotangent.len() != ow * oh {
            return Err(domain("cotangent length does not match the encoding"));
        }
        let f = self.factor;
        let norm = 1.0 / (f * f) as f64;
        let mut out = img.zeros_like();
        for r in 0..img.height() {
            for c in 0..img.width() {
                out.set(r, c, cotangent[(r / f) * ow + c / f] * norm);
            }
        }
        Ok(out)
    }
}

/// `‖Φ(ŷ) − Φ(u)‖²` for an encoder `Φ`.
pub fn loss_manifold(y_hat: &Image, target: &Image, encoder: &dyn Encoder) -> Result<(f64, Image)> {
    y_hat.check_same_shape(target)?;
    let a = encoder.encode(y_hat)?;
    let b = encoder.encode(target)?;
    if a.len() != b.len() {
        return Err(domain("encoder produced features of different lengths"));
    }
    let resid: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
    let value = resid.iter().map(|r| r * r).sum();
    let cot: Vec<f64> = resid.iter().map(|r| 2.0 * r).collect();
    Ok((value, encoder.vjp(y_hat, &cot)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::projector::ProjectorGeometry;
    use crate::rng::Rng;

    fn rand_img(n: usize, lo: f64, hi: f64, rng: &mut Rng) -> Image {
        Image::from_vec(n, n, 2.0, (0..n * n).map(|_| rng.range(lo, hi)).collect()).unwrap()
    }

    fn pred(n: usize, rng: &mut Rng) -> HeteroPrediction {
        HeteroPrediction::new(rand_img(n, 0.0, 1.0, rng), rand_img(n, 0.05, 0.5, rng)).unwrap()
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    #[test]
    fn zero_residual_loss_u() {
        let mut rng = Rng::new(1);
        let p = pred(6, &mut rng);
        let r = loss_u(&p, &p.y_hat, 1e-6).unwrap();
        let expected: f64 = p.c_hat.data().iter().map(|c| (c + 1e-6).ln()).sum();
        assert!((r.value - expected).abs() < 1e-12);
        assert!(r.grad_y.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn nonpositive_variance_rejected() {
        let y = Image::new(2, 2, 1.0, 0.0).unwrap();
        let bad = HeteroPrediction {
            y_hat: y.clone(),
            c_hat: y.clone(),
        };
        assert!(matches!(loss_u(&bad, &y, 1e-6), Err(Error::Domain(_))));
        assert!(HeteroPrediction::new(y.clone(), y).is_err());
    }

    #[test]
    fn loss_u_gradients_match_finite_differences() {
        let mut rng = Rng::new(2);
        let p = pred(8, &mut rng);
        let u = rand_img(8, 0.0, 1.0, &mut rng);
        let g = loss_u(&p, &u, 1e-6).unwrap();
        let h = 1e-6;
        for k in [0, 17, 63] {
            let bump = |img: &Image, s: f64| {
                let mut d = img.clone();
                d.data_mut()[k] += s;
                d
            };
            let f = |y: Image, c: Image| loss_u(&HeteroPrediction { y_hat: y, c_hat: c }, &u, 1e-6).unwrap().value;
            let fy = (f(bump(&p.y_hat, h), p.c_hat.clone()) - f(bump(&p.y_hat, -h), p.c_hat.clone())) / (2.0 * h);
            let fc = (f(p.y_hat.clone(), bump(&p.c_hat, h)) - f(p.y_hat.clone(), bump(&p.c_hat, -h))) / (2.0 * h);
            assert!(rel_err(fy, g.grad_y.data()[k]) < 1e-6);
            assert!(rel_err(fc, g.grad_c.data()[k]) < 1e-6);
        }
    }

    #[test]
    fn loss_s_zero_residual_and_scaling() {
        let g = ProjectorGeometry::standard(8, 8, 2.0, 12).unwrap();
        let proj = Projector::new(g).unwrap();
        let mut rng = Rng::new(3);
        let p = pred(8, &mut rng);
        let r = loss_s(&p, &p.y_hat, &proj, 1e-6).unwrap();
        assert!(r.grad_y.data().iter().all(|&v| v == 0.0));
        let v = proj.forward(&p.c_hat).unwrap();
        let expected: f64 = v.data().iter().map(|x| (x + 1e-6).ln()).sum();
        assert!((r.value - expected).abs() < 1e-9);

        // ĉ → 10ĉ shifts each log term by ~ln 10 once Sĉ ≫ τ.
        let scaled = HeteroPrediction {
            y_hat: p.y_hat.clone(),
            c_hat: p.c_hat.map(|c| 10.0 * c),
        };
        let r10 = loss_s(&scaled, &p.y_hat, &proj, 1e-6).unwrap();
        let tau = 1e-6;
        let expected_shift: f64 = v.data().iter().map(|&x| ((10.0 * x + tau) / (x + tau)).ln()).sum();
        assert!((r10.value - r.value - expected_shift).abs() < 1e-9 * expected_shift.abs());
        for &x in v.data().iter().filter(|&&x| x > 1e3 * tau) {
            assert!((((10.0 * x + tau) / (x + tau)).ln() - 10f64.ln()).abs() < 1e-3);
        }
    }

    #[test]
    fn su_degenerate_and_linear() {
        let g = ProjectorGeometry::standard(8, 8, 2.0, 12).unwrap();
        let proj = Projector::new(g).unwrap();
        let mut rng = Rng::new(4);
        let p = pred(8, &mut rng);
        let u = rand_img(8, 0.0, 1.0, &mut rng);
        let cfg0 = LossConfig {
            lambda_s: 0.0,
            ..Default::default()
        };
        let su0 = loss_su(&p, &u, &proj, &cfg0).unwrap();
        let lu = loss_u(&p, &u, cfg0.epsilon).unwrap();
        assert_eq!(su0.value, lu.value);
        let ls = loss_s(&p, &u, &proj, cfg0.tau).unwrap();
        let cfg2 = LossConfig {
            lambda_s: 2.0,
            ..cfg0
        };
        let su2 = loss_su(&p, &u, &proj, &cfg2).unwrap();
        for k in 0..64 {
            let want = lu.grad_y.data()[k] + 2.0 * ls.grad_y.data()[k];
            assert!((su2.grad_y.data()[k] - want).abs() <= 1e-12 * want.abs().max(1.0));
        }
    }

    #[test]
    fn mse_examples() {
        let a = Image::new(4, 4, 1.0, 0.3).unwrap();
        assert_eq!(loss_mse(&a, &a).unwrap().0, 0.0);
        let b = a.map(|v| v + 1.0);
        assert!((loss_mse(&b, &a).unwrap().0 - 1.0).abs() < 1e-15);
    }

    #[test]
    fn pooling_encoder_by_hand() {
        let img = Image::from_vec(4, 4, 1.0, (1..=16).map(|v| v as f64).collect()).unwrap();
        let zero = img.zeros_like();
        let (v, g) = loss_manifold(&img, &zero, &AvgPoolEncoder::default()).unwrap();
        // One 4x4 block: mean 8.5, squared 72.25.
        assert!((v - 72.25).abs() < 1e-12);
        assert!(g.data().iter().all(|&x| (x - 2.0 * 8.5 / 16.0).abs() < 1e-12));
        let two = AvgPoolEncoder { factor: 2 };
        // Block means 3.5, 5.5, 11.5, 13.5.
        let (v2, _) = loss_manifold(&img, &zero, &two).unwrap();
        assert!((v2 - (3.5f64.powi(2) + 5.5f64.powi(2) + 11.5f64.powi(2) + 13.5f64.powi(2))).abs() < 1e-12);
        assert!(AvgPoolEncoder { factor: 3 }.encode(&img).is_err());
    }
}
