//! OSEM / MLEM reconstruction with optional image-space PSF modeling and
//! post-reconstruction Gaussian smoothing.

use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::projector::{Projector, SubsetPartition};
use crate::tensor::{Image, Sinogram};

/// FWHM = 2·sqrt(2·ln 2)·σ.
pub const FWHM_PER_SIGMA: f64 = 2.3548;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReconConfig {
    pub num_iterations: usize,
    pub num_subsets: usize,
    pub psf_fwhm: f64,
    pub post_smooth_fwhm: f64,
    pub init_value: f64,
    pub epsilon_div: f64,
}

impl Default for ReconConfig {
    fn default() -> Self {
        ReconConfig {
            num_iterations: 3,
            num_subsets: 21,
            psf_fwhm: 4.0,
            post_smooth_fwhm: 4.0,
            init_value: 1.0,
            epsilon_div: 1e-12,
        }
    }
}

impl ReconConfig {
    /// Plain OSEM without resolution modeling or smoothing.
    pub fn unsmoothed(num_iterations: usize, num_subsets: usize) -> Self {
        ReconConfig {
            num_iterations,
            num_subsets,
            psf_fwhm: 0.0,
            post_smooth_fwhm: 0.0,
            ..Default::default()
        }
    }

    pub fn mlem(num_iterations: usize) -> Self {
        Self::unsmoothed(num_iterations, 1)
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.num_iterations == 0 {
            errs.push("recon.num_iterations must be >= 1".to_string());
        }
        if self.num_subsets == 0 {
            errs.push("recon.num_subsets must be >= 1".to_string());
        }
        if !(self.psf_fwhm >= 0.0 && self.psf_fwhm.is_finite()) {
            errs.push("recon.psf_fwhm must be >= 0".to_string());
        }
        if !(self.post_smooth_fwhm >= 0.0 && self.post_smooth_fwhm.is_finite()) {
            errs.push("recon.post_smooth_fwhm must be >= 0".to_string());
        }
        if !(self.init_value > 0.0 && self.init_value.is_finite()) {
            errs.push("recon.init_value must be > 0".to_string());
        }
        if !(self.epsilon_div > 0.0 && self.epsilon_div.is_finite()) {
            errs.push("recon.epsilon_div must be > 0".to_string());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    /// The same config with `num_subsets` replaced by the divisor of
    /// `num_angles` closest to the request (ties go to the smaller one).
    pub fn resolved_for(&self, num_angles: usize) -> ReconConfig {
        let chosen = nearest_divisor(num_angles, self.num_subsets);
        if chosen != self.num_subsets {
            log::info!(
                "{} subsets do not divide {num_angles} angles; using {chosen}",
                self.num_subsets
            );
        }
        ReconConfig {
            num_subsets: chosen,
            ..self.clone()
        }
    }
}

pub fn nearest_divisor(n: usize, target: usize) -> usize {
    (1..=n)
        .filter(|d| n % d == 0)
        .min_by_key(|&d| (d.abs_diff(target), d))
        .unwrap_or(1)
}

/// Separable Gaussian blur with edge replication; `fwhm` in mm.
pub fn gaussian_smooth(img: &Image, fwhm: f64) -> Result<Image> {
    if !(fwhm >= 0.0 && fwhm.is_finite()) {
        return Err(domain(format!("smoothing FWHM must be >= 0, got {fwhm}")));
    }
    if fwhm == 0.0 {
        return Ok(img.clone());
    }
    let kernel = gaussian_kernel(fwhm / FWHM_PER_SIGMA / img.voxel_size());
    Ok(convolve_separable(img, &kernel))
}

/// Sampled, unit-sum Gaussian taps on `[-r, r]` with `r = ceil(4σ)`.
pub fn gaussian_kernel(sigma_vox: f64) -> Vec<f64> {
    let radius = (4.0 * sigma_vox).ceil().max(1.0) as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma_vox * sigma_vox)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

fn convolve_separable(img: &Image, kernel: &[f64]) -> Image {
    let (w, h) = (img.width() as isize, img.height() as isize);
    let r = (kernel.len() / 2) as isize;
    let src = img.data();
    let mut tmp = vec![0.0; src.len()];
    for y in 0..h {
        let row = &src[(y * w) as usize..((y + 1) * w) as usize];
        for x in 0..w {
            let mut acc = 0.0;
            for (t, &kv) in kernel.iter().enumerate() {
                let xx = (x + t as isize - r).clamp(0, w - 1);
                acc += kv * row[xx as usize];
            }
            tmp[(y * w + x) as usize] = acc;
        }
    }
    let mut out = vec![0.0; src.len()];
    for y in 0..h {
        for (t, &kv) in kernel.iter().enumerate() {
            let yy = (y + t as isize - r).clamp(0, h - 1);
            let src_row = &tmp[(yy * w) as usize..((yy + 1) * w) as usize];
            let dst_row = &mut out[(y * w) as usize..((y + 1) * w) as usize];
            for (d, s) in dst_row.iter_mut().zip(src_row) {
                *d += kv * s;
            }
        }
    }
    img.with_data(out)
}

/// Poisson log-likelihood `Σ_l y_l log((Sx)_l) − (Sx)_l`, constant terms dropped.
pub fn poisson_log_likelihood(projector: &Projector, x: &Image, y: &Sinogram) -> Result<f64> {
    let sx = projector.forward(x)?;
    Ok(sx
        .data()
        .iter()
        .zip(y.data())
        .map(|(&m, &c)| if c > 0.0 { c * m.ln() - m } else { -m })
        .sum())
}

/// An OSEM reconstructor bound to one projector and subset partition, with
/// the per-subset sensitivity images computed up front.
pub struct Osem<'p> {
    projector: &'p Projector,
    partition: SubsetPartition,
    cfg: ReconConfig,
    sensitivity: Vec<Image>,
}

impl<'p> Osem<'p> {
    pub fn new(projector: &'p Projector, cfg: &ReconConfig) -> Result<Self> {
        cfg.validate()?;
        let geom = projector.geometry();
        let cfg = cfg.resolved_for(geom.num_angles);
        let partition = SubsetPartition::interleaved(geom.num_angles, cfg.num_subsets)?;
        Self::with_partition(projector, partition, &cfg)
    }

    pub fn with_partition(projector: &'p Projector, partition: SubsetPartition, cfg: &ReconConfig) -> Result<Self> {
        cfg.validate()?;
        let geom = projector.geometry();
        let sensitivity = (0..partition.num_subsets())
            .map(|s| {
                let n = partition.subset(s)?.len();
                let ones = Sinogram::from_vec(n, geom.num_bins, geom.bin_size, vec![1.0; n * geom.num_bins])?;
                let bp = projector.adjoint_subset(&partition, s, &ones)?;
                gaussian_smooth(&bp, cfg.psf_fwhm)
            })
            .collect::<Result<Vec<_>>>()?;
        let cfg = ReconConfig {
            num_subsets: partition.num_subsets(),
            ..cfg.clone()
        };
        Ok(Osem {
            projector,
            partition,
            cfg,
            sensitivity,
        })
    }

    pub fn config(&self) -> &ReconConfig {
        &self.cfg
    }

    pub fn projector(&self) -> &'p Projector {
        self.projector
    }

    pub fn partition(&self) -> &SubsetPartition {
        &self.partition
    }

    pub fn run(&self, sino: &Sinogram) -> Result<Image> {
        self.run_with(sino, |_, _| {})
    }

    /// Runs all iterations, calling `on_iteration(i, x)` after each full pass
    /// (before post-smoothing).
    pub fn run_with(&self, sino: &Sinogram, mut on_iteration: impl FnMut(usize, &Image)) -> Result<Image> {
        let geom = self.projector.geometry();
        if sino.num_angles() != geom.num_angles || sino.num_bins() != geom.num_bins {
            return Err(Error::Geometry(format!(
                "sinogram is {}x{}, geometry expects {}x{}",
                sino.num_angles(),
                sino.num_bins(),
                geom.num_angles,
                geom.num_bins
            )));
        }
        if let Some(v) = sino.data().iter().find(|&&v| v < 0.0) {
            return Err(domain(format!("sinogram has a negative entry {v}")));
        }
        let eps = self.cfg.epsilon_div;
        let subsets: Vec<Sinogram> = (0..self.partition.num_subsets())
            .map(|s| self.projector.restrict(&self.partition, s, sino))
            .collect::<Result<_>>()?;

        let mut x = Image::new(geom.image_width, geom.image_height, geom.voxel_size, self.cfg.init_value)?;
        for it in 0..self.cfg.num_iterations {
            for (s, y_b) in subsets.iter().enumerate() {
                let blurred = gaussian_smooth(&x, self.cfg.psf_fwhm)?;
                let expected = self.projector.forward_subset(&self.partition, s, &blurred)?;
                let ratio = y_b.with_data(
                    y_b.data()
                        .iter()
                        .zip(expected.data())
                        .map(|(&y, &m)| y / (m + eps))
                        .collect(),
                );
                let back = gaussian_smooth(&self.projector.adjoint_subset(&self.partition, s, &ratio)?, self.cfg.psf_fwhm)?;
                let sens = &self.sensitivity[s];
                for ((xv, &b), &sv) in x.data_mut().iter_mut().zip(back.data()).zip(sens.data()) {
                    *xv = (*xv * b / (sv + eps)).max(0.0);
                }
            }
            on_iteration(it, &x);
        }
        gaussian_smooth(&x, self.cfg.post_smooth_fwhm)
    }
}

/// One-shot OSEM with an explicit partition.
pub fn osem(projector: &Projector, partition: &SubsetPartition, sino: &Sinogram, cfg: &ReconConfig) -> Result<Image> {
    Osem::with_partition(projector, partition.clone(), cfg)?.run(sino)
}
