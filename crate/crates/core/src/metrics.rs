//! PSNR, SSIM, and the paired t-test.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{domain, Result};
use crate::tensor::Image;

/// Reported instead of +∞ when the two images are identical.
pub const PSNR_CAP_DB: f64 = 99.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PsnrValue {
    pub db: f64,
    pub capped: bool,
}

/// PSNR in dB with peak = max(reference).
pub fn psnr(test: &Image, reference: &Image) -> Result<f64> {
    psnr_detailed(test, reference).map(|p| p.db)
}

pub fn psnr_detailed(test: &Image, reference: &Image) -> Result<PsnrValue> {
    test.check_same_shape(reference)?;
    let peak = reference.max();
    if peak <= 0.0 {
        return Err(domain("PSNR reference must have a positive maximum"));
    }
    let mse = mse(test, reference);
    let db = 10.0 * (peak * peak / mse).log10();
    if mse == 0.0 || db >= PSNR_CAP_DB {
        Ok(PsnrValue {
            db: PSNR_CAP_DB,
            capped: true,
        })
    } else {
        Ok(PsnrValue { db, capped: false })
    }
}

pub fn mse(a: &Image, b: &Image) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        / a.len() as f64
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DynamicRange {
    /// max(reference) − min(reference).
    #[default]
    Reference,
    /// Range over both images together; makes SSIM symmetric.
    Joint,
}

pub fn ssim(test: &Image, reference: &Image) -> Result<f64> {
    ssim_with(test, reference, DynamicRange::Reference)
}

/// Mean local SSIM over all fully-contained 11×11 Gaussian windows.
pub fn ssim_with(test: &Image, reference: &Image, range: DynamicRange) -> Result<f64> {
    test.check_same_shape(reference)?;
    if test.width() < SSIM_WINDOW || test.height() < SSIM_WINDOW {
        return Err(domain(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} images, got {}x{}",
            test.width(),
            test.height()
        )));
    }
    let mut l = match range {
        DynamicRange::Reference => reference.max() - reference.min(),
        DynamicRange::Joint => reference.max().max(test.max()) - reference.min().min(test.min()),
    };
    if l <= 0.0 {
        // Constant images carry no range; fall back to unit range.
        l = 1.0;
    }
    let c1 = (SSIM_K1 * l).powi(2);
    let c2 = (SSIM_K2 * l).powi(2);

    let kernel = ssim_kernel();
    let x = test.data();
    let y = reference.data();
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let (w, h) = (test.width(), test.height());
    let mu_x = valid_filter(x, w, h, &kernel);
    let mu_y = valid_filter(y, w, h, &kernel);
    let e_xx = valid_filter(&xx, w, h, &kernel);
    let e_yy = valid_filter(&yy, w, h, &kernel);
    let e_xy = valid_filter(&xy, w, h, &kernel);

    let n = mu_x.len();
    let mut total = 0.0;
    for i in 0..n {
        let (mx, my) = (mu_x[i], mu_y[i]);
        let sxx = e_xx[i] - mx * mx;
        let syy = e_yy[i] - my * my;
        let sxy = e_xy[i] - mx * my;
        let num = (2.0 * mx * my + c1) * (2.0 * sxy + c2);
        let den = (mx * mx + my * my + c1) * (sxx + syy + c2);
        total += num / den;
    }
    Ok(total / n as f64)
}

fn ssim_kernel() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut k: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| {
            let d = i as f64 - r;
            (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable filtering keeping only positions where the window fits.
fn valid_filter(src: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let ow = w - n + 1;
    let oh = h - n + 1;
    let mut tmp = vec![0.0; ow * h];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for x in 0..ow {
            tmp[y * ow + x] = k.iter().zip(&row[x..x + n]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for (t, &kv) in k.iter().enumerate() {
            let src_row = &tmp[(y + t) * ow..(y + t + 1) * ow];
            for (o, s) in out[y * ow..(y + 1) * ow].iter_mut().zip(src_row) {
                *o += kv * s;
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub p: f64,
    pub dof: usize,
    pub mean_difference: f64,
}

/// Two-sided paired t-test of `a` against `b`.
pub fn paired_ttest(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() {
        return Err(domain(format!("paired samples differ in length: {} vs {}", a.len(), b.len())));
    }
    let n = a.len();
    if n < 2 {
        return Err(domain("paired t-test needs at least two pairs"));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    // Spread below rounding noise of the mean counts as none.
    if !(var > (f64::EPSILON * mean.abs()).powi(2) * n as f64) {
        return Err(domain("paired differences have zero variance; t is undefined"));
    }
    let t = mean / (var / n as f64).sqrt();
    let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64).map_err(|e| domain(e.to_string()))?;
    let p = (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0);
    Ok(TTest {
        t,
        p,
        dof: n - 1,
        mean_difference: mean,
    })
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Pearson correlation coefficient.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(domain("correlation needs two equal-length series of at least two values"));
    }
    let (ma, _) = mean_std(a);
    let (mb, _) = mean_std(b);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(domain("correlation is undefined for a constant series"));
    }
    Ok(sab / (saa * sbb).sqrt())
}

/// A named comparison between two methods on matched slices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub a: String,
    pub b: String,
    pub metric: String,
    pub result: Option<TTest>,
    pub note: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub label: String,
    pub psnr_peak: String,
    pub psnr: Vec<f64>,
    pub psnr_capped: Vec<bool>,
    pub ssim: Vec<f64>,
    pub psnr_mean: f64,
    pub psnr_std: f64,
    pub ssim_mean: f64,
    pub ssim_std: f64,
    pub comparisons: Vec<Comparison>,
}

impl MetricReport {
    /// Scores matched `(test, reference)` slices.
    pub fn evaluate(label: impl Into<String>, pairs: &[(Image, Image)]) -> Result<Self> {
        let mut report = MetricReport {
            label: label.into(),
            psnr_peak: "max(reference)".into(),
            ..Default::default()
        };
        for (test, reference) in pairs {
            let p = psnr_detailed(test, reference)?;
            report.psnr.push(p.db);
            report.psnr_capped.push(p.capped);
            report.ssim.push(ssim(test, reference)?);
        }
        report.summarize();
        Ok(report)
    }

    pub fn summarize(&mut self) {
        (self.psnr_mean, self.psnr_std) = mean_std(&self.psnr);
        (self.ssim_mean, self.ssim_std) = mean_std(&self.ssim);
    }

    pub fn compare(&mut self, other: &MetricReport) {
        for (metric, a, b) in [("psnr", &self.psnr, &other.psnr), ("ssim", &self.ssim, &other.ssim)] {
            let (result, note) = match paired_ttest(a, b) {
                Ok(t) => (Some(t), None),
                Err(e) => (None, Some(e.to_string())),
            };
            self.comparisons.push(Comparison {
                a: self.label.clone(),
                b: other.label.clone(),
                metric: metric.into(),
                result,
                note,
            });
        }
    }

    /// `slice,psnr_db,psnr_capped,ssim` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("slice,psnr_db,psnr_capped,ssim\n");
        for (i, ((p, c), s)) in self.psnr.iter().zip(&self.psnr_capped).zip(&self.ssim).enumerate() {
            out.push_str(&format!("{i},{p:.6},{c},{s:.6}\n"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn ramp(w: usize, h: usize) -> Image {
        Image::from_vec(w, h, 1.0, (0..w * h).map(|i| ((i * 37) % 101) as f64 / 100.0).collect()).unwrap()
    }

    #[test]
    fn identical_images_cap_psnr() {
        let a = ramp(16, 16);
        let p = psnr_detailed(&a, &a).unwrap();
        assert_eq!(p.db, PSNR_CAP_DB);
        assert!(p.capped);
    }

    #[test]
    fn uniform_error_closed_form() {
        let mut reference = Image::new(16, 16, 1.0, 0.5).unwrap();
        reference.set(0, 0, 1.0);
        let test = reference.map(|v| v + 0.1);
        assert!((psnr(&test, &reference).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn psnr_scale_invariant() {
        let a = ramp(16, 16);
        let b = a.map(|v| v * 0.9 + 0.02);
        let p1 = psnr(&b, &a).unwrap();
        let p2 = psnr(&b.map(|v| 2.0 * v), &a.map(|v| 2.0 * v)).unwrap();
        assert!((p1 - p2).abs() < 1e-9);
    }

    #[test]
    fn psnr_errors() {
        let z = Image::new(4, 4, 1.0, 0.0).unwrap();
        assert!(psnr(&z, &z).is_err());
        assert!(psnr(&ramp(4, 4), &ramp(5, 4)).is_err());
    }

    #[test]
    fn psnr_decreases_with_noise() {
        let reference = ramp(32, 32);
        let mut last = f64::INFINITY;
        for amp in [0.01, 0.02, 0.05, 0.1, 0.2] {
            let mut rng = Rng::new(4);
            let noisy = reference.map(|v| v + amp * rng.normal());
            let p = psnr(&noisy, &reference).unwrap();
            assert!(p < last);
            last = p;
        }
    }

    #[test]
    fn ssim_identity_and_noise() {
        let a = ramp(32, 32);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        let mut rng = Rng::new(8);
        // SNR 0 dB: noise power equals the mean-square signal power.
        let rms = (a.dot(&a) / a.len() as f64).sqrt();
        let noisy = a.map(|v| v + rms * rng.normal());
        assert!(ssim(&noisy, &a).unwrap() < 0.5);
        assert!(ssim(&ramp(10, 32), &ramp(10, 32)).is_err());
    }

    #[test]
    fn ssim_joint_range_symmetric() {
        let a = ramp(20, 20);
        let mut rng = Rng::new(1);
        let b = a.map(|v| 1.3 * v + 0.1 * rng.normal());
        let ab = ssim_with(&a, &b, DynamicRange::Joint).unwrap();
        let ba = ssim_with(&b, &a, DynamicRange::Joint).unwrap();
        assert!((ab - ba).abs() < 1e-12);
    }

    #[test]
    fn ttest_degenerate_cases() {
        let a: Vec<f64> = (0..10).map(|i| i as f64).collect();
        assert!(paired_ttest(&a, &a).is_err());
        let b: Vec<f64> = a.iter().map(|v| v + 1.0).collect();
        assert!(paired_ttest(&b, &a).is_err());
        assert!(paired_ttest(&[1.0], &[2.0]).is_err());
    }

    #[test]
    fn ttest_known_value() {
        // d = [1, 2, 3, 4]: mean 2.5, sd 1.2910, t = 3.8730, dof 3, p ≈ 0.03047.
        let r = paired_ttest(&[2.0, 4.0, 6.0, 8.0], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!((r.t - 3.872983346).abs() < 1e-8);
        assert!((r.p - 0.030466).abs() < 1e-4, "{}", r.p);
    }

    #[test]
    fn pearson_examples() {
        let a = [1.0, 2.0, 3.0, 4.0];
        assert!((pearson(&a, &[2.0, 4.0, 6.0, 8.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((pearson(&a, &[4.0, 3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
        // Deviations (-1.5,-.5,.5,1.5) and (-1.5,.5,-.5,1.5): 4/5.
        let r = pearson(&a, &[1.0, 3.0, 2.0, 4.0]).unwrap();
        assert!((r - 0.8).abs() < 1e-12);
        assert!(pearson(&a, &[1.0; 4]).is_err());
    }

    #[test]
    fn report_csv_shape() {
        let a = ramp(16, 16);
        let b = a.map(|v| v * 0.95);
        let r = MetricReport::evaluate("m", &[(b.clone(), a.clone()), (a.clone(), a.clone())]).unwrap();
        assert_eq!(r.to_csv().lines().count(), 3);
        assert!(r.psnr_capped[1]);
    }
}
