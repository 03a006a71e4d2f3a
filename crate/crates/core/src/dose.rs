//! Low-count PET simulation: scale expected counts, forward-project, draw
//! Poisson counts in the sinogram domain, and reconstruct with OSEM.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::metrics::psnr;
use crate::recon::Osem;
use crate::rng::Rng;
use crate::tensor::{Image, Sinogram};

pub const CALIBRATION_TOLERANCE_DB: f64 = 0.25;
pub const MAX_BISECTION_STEPS: usize = 40;
pub const PSNR_BRACKET_DB: (f64, f64) = (5.0, 60.0);
const SCALE_BRACKET: (f64, f64) = (1e-6, 1e6);

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum DoseLabel {
    #[serde(rename = "LD")]
    Ld,
    #[serde(rename = "vLD")]
    VeryLow,
    #[serde(rename = "uLD")]
    UltraLow,
    #[serde(rename = "custom")]
    Custom,
}

impl DoseLabel {
    /// Mean PSNR against the standard-dose reference that defines the level.
    pub fn target_psnr_db(self) -> Option<f64> {
        match self {
            DoseLabel::Ld => Some(21.0),
            DoseLabel::VeryLow => Some(17.0),
            DoseLabel::UltraLow => Some(13.0),
            DoseLabel::Custom => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DoseLabel::Ld => "LD",
            DoseLabel::VeryLow => "vLD",
            DoseLabel::UltraLow => "uLD",
            DoseLabel::Custom => "custom",
        }
    }
}

impl std::str::FromStr for DoseLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ld" => Ok(DoseLabel::Ld),
            "vld" => Ok(DoseLabel::VeryLow),
            "uld" => Ok(DoseLabel::UltraLow),
            "custom" => Ok(DoseLabel::Custom),
            _ => Err(domain(format!("unknown dose level `{s}` (expected LD, vLD, uLD)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DoseSpec {
    pub label: DoseLabel,
    #[serde(default = "one")]
    pub count_scale: f64,
    #[serde(default)]
    pub target_psnr_db: Option<f64>,
}

fn one() -> f64 {
    1.0
}

impl DoseSpec {
    pub fn with_scale(count_scale: f64) -> Self {
        DoseSpec {
            label: DoseLabel::Custom,
            count_scale,
            target_psnr_db: None,
        }
    }

    /// A named level whose count scale will be found by calibration.
    pub fn level(label: DoseLabel) -> Self {
        DoseSpec {
            label,
            count_scale: 1.0,
            target_psnr_db: label.target_psnr_db(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.count_scale > 0.0 && self.count_scale.is_finite()) {
            return Err(domain(format!("count_scale must be > 0, got {}", self.count_scale)));
        }
        if let Some(t) = self.target_psnr_db {
            if !t.is_finite() {
                return Err(domain("target_psnr_db must be finite"));
            }
        }
        Ok(())
    }
}

/// `Poisson(count_scale · S·reference)`.
pub fn noisy_sinogram(osem: &Osem<'_>, reference: &Image, count_scale: f64, rng: &mut Rng) -> Result<Sinogram> {
    check_inputs(reference, count_scale)?;
    let expected = osem.projector().forward(reference)?;
    let counts = expected
        .data()
        .iter()
        .map(|&m| rng.poisson(count_scale * m.max(0.0)).map(|k| k as f64))
        .collect::<Result<Vec<_>>>()?;
    Ok(expected.with_data(counts))
}

fn check_inputs(reference: &Image, count_scale: f64) -> Result<()> {
    if !(count_scale > 0.0 && count_scale.is_finite()) {
        return Err(domain(format!("count_scale must be > 0, got {count_scale}")));
    }
    if let Some(v) = reference.data().iter().find(|&&v| v < 0.0) {
        return Err(domain(format!("reference activity must be >= 0, found {v}")));
    }
    Ok(())
}

/// OSEM reconstruction of simulated low-count data, divided by
/// `count_scale` so it is in the reference's activity units.
pub fn simulate_low_dose(osem: &Osem<'_>, reference: &Image, count_scale: f64, rng: &mut Rng) -> Result<Image> {
    let counts = noisy_sinogram(osem, reference, count_scale, rng)?;
    let recon = osem.run(&counts)?;
    Ok(recon.map(|v| v / count_scale))
}

/// Mean PSNR of simulated images against their references; member `j`
/// always draws from `rng.fork(j)`.
pub fn mean_psnr_at(osem: &Osem<'_>, references: &[Image], count_scale: f64, rng: &Rng) -> Result<f64> {
    let values = references
        .par_iter()
        .enumerate()
        .map(|(j, r)| {
            let mut member_rng = rng.fork(j as u64);
            psnr(&simulate_low_dose(osem, r, count_scale, &mut member_rng)?, r)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub count_scale: f64,
    pub achieved_psnr_db: f64,
    pub target_psnr_db: f64,
    pub steps: usize,
}

/// Log-domain bisection on the count scale until the mean PSNR over
/// `references` is within ±0.25 dB of `target_psnr_db`.
pub fn calibrate_scale(osem: &Osem<'_>, references: &[Image], target_psnr_db: f64, rng: &Rng) -> Result<Calibration> {
    if references.is_empty() {
        return Err(domain("calibration needs at least one reference image"));
    }
    let (lo_db, hi_db) = PSNR_BRACKET_DB;
    if !(lo_db..=hi_db).contains(&target_psnr_db) {
        return Err(Error::Calibration(format!(
            "target {target_psnr_db} dB is outside the [{lo_db}, {hi_db}] dB bracket"
        )));
    }
    let eval = |scale: f64| mean_psnr_at(osem, references, scale, rng);
    let (mut lo, mut hi) = (SCALE_BRACKET.0.ln(), SCALE_BRACKET.1.ln());
    let psnr_lo = eval(lo.exp())?;
    let psnr_hi = eval(hi.exp())?;
    if !(psnr_lo <= target_psnr_db + CALIBRATION_TOLERANCE_DB && target_psnr_db - CALIBRATION_TOLERANCE_DB <= psnr_hi) {
        return Err(Error::Calibration(format!(
            "target {target_psnr_db} dB not reachable: PSNR spans {psnr_lo:.2}..{psnr_hi:.2} dB over the scale bracket"
        )));
    }
    for step in 1..=MAX_BISECTION_STEPS {
        let mid = 0.5 * (lo + hi);
        let got = eval(mid.exp())?;
        log::debug!("calibration step {step}: scale {:.6e} -> {got:.3} dB", mid.exp());
        if (got - target_psnr_db).abs() <= CALIBRATION_TOLERANCE_DB {
            return Ok(Calibration {
                count_scale: mid.exp(),
                achieved_psnr_db: got,
                target_psnr_db,
                steps: step,
            });
        }
        if got < target_psnr_db {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Err(Error::Calibration(format!(
        "no scale within ±{CALIBRATION_TOLERANCE_DB} dB of {target_psnr_db} dB after {MAX_BISECTION_STEPS} steps"
    )))
}
