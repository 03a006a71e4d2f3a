//! Scripted experiments: the dose-robustness sweep, the ablation ladder and
//! the heteroscedastic-recovery check.
//!
//! Every random draw comes from a stream derived from the plan seed, so a
//! rerun of the same plan writes byte-identical reports.

mod hetero;
mod sweep;

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use hetero::{run_hetero_recovery, HeteroRecoveryPlan, HeteroRecoveryReport, RegionSigma};
pub use sweep::{
    run_ablation, run_dose_sweep, train_method, CalibrationRow, Cell, Degradation, InputCell, MethodFailure, SliceId,
    SweepComparison, SweepReport, TrainingSummary,
};

use crate::dose::DoseLabel;
use crate::error::{Error, Result};
use crate::micronet::{LossMode, MicroNetConfig, TrainConfig};
use crate::phantom::PhantomSpec;
use crate::recon::ReconConfig;
use crate::uq::UqConfig;

/// A training objective plus the choice of input modalities.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Method {
    pub loss_mode: LossMode,
    /// PET channels only instead of PET + T1 + T2.
    pub unimodal: bool,
}

impl Method {
    pub const fn multimodal(loss_mode: LossMode) -> Self {
        Method {
            loss_mode,
            unimodal: false,
        }
    }

    /// The ablation ladder: full model, three loss ablations and the
    /// unimodal-input variant of MSE.
    pub fn ablation_ladder() -> Vec<Method> {
        vec![
            Method::multimodal(LossMode::Su),
            Method::multimodal(LossMode::MseS),
            Method::multimodal(LossMode::MseE),
            Method::multimodal(LossMode::Mse),
            Method {
                loss_mode: LossMode::Mse,
                unimodal: true,
            },
        ]
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.loss_mode.as_str())?;
        if self.unimodal {
            f.write_str("-unimodal")?;
        }
        Ok(())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.strip_suffix("-unimodal") {
            Some(mode) => Ok(Method {
                loss_mode: mode.parse()?,
                unimodal: true,
            }),
            None => Ok(Method::multimodal(s.parse()?)),
        }
    }
}

impl Serialize for Method {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Method {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSpec {
    pub num_subjects: usize,
    /// Template for every subject; `seed` is replaced per subject and
    /// `num_slices` by `slices_per_subject`.
    pub phantom: PhantomSpec,
    pub slices_per_subject: usize,
    pub num_angles: usize,
    /// Reference slices (central slices of the first subjects) used to
    /// calibrate each dose level.
    pub calibration_refs: usize,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            num_subjects: 30,
            phantom: PhantomSpec::default(),
            slices_per_subject: 16,
            num_angles: 180,
            calibration_refs: 6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentPlan {
    pub dataset: DatasetSpec,
    pub recon: ReconConfig,
    /// Levels to evaluate. Training always uses LD.
    pub doses: Vec<DoseLabel>,
    pub methods: Vec<Method>,
    pub net: MicroNetConfig,
    /// Shared training settings; `loss_mode` is set per method.
    pub train: TrainConfig,
    pub uq: UqConfig,
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    /// Write per-cell PVOL volumes and trained networks under `output_dir`.
    pub save_volumes: bool,
}

impl Default for ExperimentPlan {
    fn default() -> Self {
        ExperimentPlan {
            dataset: DatasetSpec::default(),
            recon: ReconConfig::default(),
            doses: vec![DoseLabel::Ld, DoseLabel::VeryLow, DoseLabel::UltraLow],
            methods: Method::ablation_ladder(),
            net: MicroNetConfig::default(),
            train: TrainConfig::default(),
            uq: UqConfig::default(),
            seed: 0,
            output_dir: None,
            save_volumes: true,
        }
    }
}

impl ExperimentPlan {
    /// A few-minute plan: 64×64 slices at 4 mm, 90 angles, 10 subjects.
    pub fn quick() -> Self {
        ExperimentPlan {
            dataset: DatasetSpec {
                num_subjects: 10,
                phantom: PhantomSpec {
                    size: 64,
                    voxel_size: 4.0,
                    ..Default::default()
                },
                slices_per_subject: 6,
                num_angles: 90,
                calibration_refs: 6,
            },
            train: TrainConfig {
                epochs: 40,
                lr_init: 5e-3,
                ..Default::default()
            },
            uq: UqConfig {
                num_passes: 10,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.doses.is_empty() {
            errs.push("plan.doses must list at least one dose level".to_string());
        }
        if self.doses.contains(&DoseLabel::Custom) {
            errs.push("plan.doses may only contain LD, vLD and uLD".to_string());
        }
        if has_duplicates(&self.doses) {
            errs.push("plan.doses contains duplicates".to_string());
        }
        if self.methods.is_empty() {
            errs.push("plan.methods must list at least one method".to_string());
        }
        if has_duplicates(&self.methods) {
            errs.push("plan.methods contains duplicates".to_string());
        }
        let d = &self.dataset;
        if d.num_subjects < 3 {
            errs.push("dataset.num_subjects must be >= 3".to_string());
        }
        if d.slices_per_subject == 0 {
            errs.push("dataset.slices_per_subject must be >= 1".to_string());
        }
        if d.num_angles == 0 {
            errs.push("dataset.num_angles must be >= 1".to_string());
        }
        if d.calibration_refs == 0 {
            errs.push("dataset.calibration_refs must be >= 1".to_string());
        }
        if d.phantom.size % 4 != 0 || d.phantom.size < 12 {
            errs.push("dataset.phantom.size must be a multiple of 4 and >= 12".to_string());
        }
        for r in [
            d.phantom.validate(),
            self.recon.validate(),
            self.net.validate(),
            self.train.validate(),
            self.uq.validate(),
        ] {
            if let Err(e) = r {
                match e {
                    Error::Config(more) => errs.extend(more),
                    other => errs.push(other.to_string()),
                }
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

fn has_duplicates<T: PartialEq>(v: &[T]) -> bool {
    v.iter().enumerate().any(|(i, a)| v[..i].contains(a))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn method_names_round_trip() {
        for m in Method::ablation_ladder() {
            let s = m.to_string();
            assert_eq!(s.parse::<Method>().unwrap(), m);
            assert_eq!(serde_json::from_str::<Method>(&serde_json::to_string(&m).unwrap()).unwrap(), m);
        }
        assert_eq!(Method::ablation_ladder()[4].to_string(), "MSE-unimodal");
        assert!("XYZ".parse::<Method>().is_err());
    }

    #[test]
    fn empty_modes_fail_validation() {
        let plan = ExperimentPlan {
            methods: vec![],
            doses: vec![],
            ..ExperimentPlan::quick()
        };
        match plan.validate() {
            Err(Error::Config(errs)) => assert_eq!(errs.len(), 2, "{errs:?}"),
            other => panic!("{other:?}"),
        }
        assert!(ExperimentPlan::default().validate().is_ok());
    }

    #[test]
    fn plan_json_defaults_fill_in() {
        let plan: ExperimentPlan = serde_json::from_str(r#"{"methods": ["SU", "MSE-unimodal"], "seed": 4}"#).unwrap();
        assert_eq!(plan.methods.len(), 2);
        assert_eq!(plan.dataset.num_subjects, 30);
        assert_eq!(plan.doses.len(), 3);
    }
}
