//! Central finite differences over every network parameter.

use serde::{Deserialize, Serialize};

use super::net::{BnMode, MicroNet};
use super::train::{batch_loss_and_grad, batch_objective, LossMode, Sample};
use crate::error::Result;
use crate::losses::LossConfig;
use crate::projector::Projector;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheck {
    pub mode: LossMode,
    pub checked: usize,
    pub failures: usize,
    pub max_rel_err: f64,
    pub worst: String,
    /// Coordinates whose stencil crossed a ReLU kink at the nominal step
    /// and were re-probed with a smaller one.
    pub kink_retries: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tolerance: f64,
    /// Lower bound on the relative-error denominator.
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-4,
            tolerance: 1e-4,
            floor: 1e-7,
        }
    }
}

/// Compares the analytic gradient of the batch loss (batch-statistics
/// normalization, fixed dropout factors) with `(f(θ+h) − f(θ−h)) / 2h` for
/// every parameter. Relative error is `|a − n| / max(|a|, |n|, floor)`.
///
/// The difference quotient is meaningless when a ReLU switches state between
/// `θ+h` and `θ−h`; such coordinates are retried with the step divided by
/// 100 (at most twice) until the activation pattern is stable.
pub fn check_gradients(
    net: &MicroNet,
    samples: &[&Sample],
    mode: LossMode,
    loss: &LossConfig,
    projector: Option<&Projector>,
    drop_scale: Option<Vec<Vec<f64>>>,
    cfg: GradCheckConfig,
) -> Result<GradCheck> {
    let (_, analytic, _) =
        batch_loss_and_grad(net, samples, mode, loss, projector, BnMode::Batch, drop_scale.clone())?;
    let eval = |probe: &MicroNet| -> Result<(f64, Vec<bool>)> {
        let (v, _, _, pass) = batch_objective(probe, samples, mode, loss, projector, BnMode::Batch, drop_scale.clone())?;
        Ok((v, pass.activation_pattern()))
    };
    let mut probe = net.clone();
    let mut report = GradCheck {
        mode,
        checked: 0,
        failures: 0,
        max_rel_err: 0.0,
        worst: String::new(),
        kink_retries: 0,
    };
    for p in 0..net.params().len() {
        for i in 0..net.params()[p].data.len() {
            let orig = net.params()[p].data[i];
            let mut h = cfg.step;
            let mut numeric;
            let mut attempt = 0;
            loop {
                probe.params_mut()[p].data[i] = orig + h;
                let (fp, pat_p) = eval(&probe)?;
                probe.params_mut()[p].data[i] = orig - h;
                let (fm, pat_m) = eval(&probe)?;
                numeric = (fp - fm) / (2.0 * h);
                if pat_p == pat_m || attempt == 2 {
                    break;
                }
                if attempt == 0 {
                    report.kink_retries += 1;
                }
                attempt += 1;
                h /= 100.0;
            }
            probe.params_mut()[p].data[i] = orig;
            let a = analytic[p][i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(cfg.floor);
            report.checked += 1;
            if rel > cfg.tolerance {
                report.failures += 1;
            }
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = format!("{}[{i}]: analytic {a:.6e}, numeric {numeric:.6e}", net.params()[p].name);
            }
        }
    }
    Ok(report)
}
