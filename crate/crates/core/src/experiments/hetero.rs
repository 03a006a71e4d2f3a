use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::pearson;
use crate::micronet::{assemble_25d, train, Dropout, EpochLog, LossMode, MicroNet, MicroNetConfig, Sample, TrainConfig};
use crate::phantom::{generate_dataset, PhantomSpec, Split, Subject, TissueClass};
use crate::rng::Rng;
use crate::tensor::Image;

const STREAM_NOISE: u64 = 0xD0;
const STREAM_INIT: u64 = 0xD1;
const STREAM_TRAIN: u64 = 0xD2;

/// Clean multimodal inputs, targets corrupted by zero-mean Gaussian noise
/// whose standard deviation depends on the tissue class. A network trained
/// with the U objective should recover the per-class σ through `√Ĉ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeteroRecoveryPlan {
    pub num_subjects: usize,
    pub slices_per_subject: usize,
    pub phantom: PhantomSpec,
    /// Noise σ per class, in units of the per-subject PET maximum.
    pub sigma: BTreeMap<TissueClass, f64>,
    /// Classes with fewer test voxels than this are left out of the
    /// correlation.
    pub min_voxels: usize,
    pub net: MicroNetConfig,
    /// `loss_mode` is forced to U.
    pub train: TrainConfig,
    pub seed: u64,
}

impl Default for HeteroRecoveryPlan {
    fn default() -> Self {
        HeteroRecoveryPlan {
            num_subjects: 10,
            slices_per_subject: 6,
            phantom: PhantomSpec {
                size: 32,
                voxel_size: 8.0,
                ..Default::default()
            },
            sigma: BTreeMap::from([
                (TissueClass::Background, 0.02),
                (TissueClass::White, 0.05),
                (TissueClass::Gray, 0.08),
                (TissueClass::Csf, 0.11),
                (TissueClass::HotLesion, 0.14),
                (TissueClass::ColdLesion, 0.17),
            ]),
            min_voxels: 20,
            net: MicroNetConfig::default(),
            train: TrainConfig {
                epochs: 60,
                lr_init: 1e-2,
                ..Default::default()
            },
            seed: 0,
        }
    }
}

impl HeteroRecoveryPlan {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.num_subjects < 3 {
            errs.push("hetero.num_subjects must be >= 3".to_string());
        }
        if self.slices_per_subject == 0 {
            errs.push("hetero.slices_per_subject must be >= 1".to_string());
        }
        if self.phantom.size % 4 != 0 {
            errs.push("hetero.phantom.size must be a multiple of 4".to_string());
        }
        for c in TissueClass::ALL {
            match self.sigma.get(&c) {
                Some(s) if *s >= 0.0 && s.is_finite() => {}
                Some(s) => errs.push(format!("hetero.sigma.{c:?} must be finite and >= 0, got {s}")),
                None => errs.push(format!("hetero.sigma is missing {c:?}")),
            }
        }
        for r in [self.phantom.validate(), self.net.validate(), self.train.validate()] {
            match r {
                Err(Error::Config(more)) => errs.extend(more),
                Err(other) => errs.push(other.to_string()),
                Ok(()) => {}
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionSigma {
    pub class: TissueClass,
    pub true_sigma: f64,
    /// Mean of `√Ĉ` over the class's test voxels.
    pub predicted_sigma: f64,
    pub voxels: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeteroRecoveryReport {
    pub regions: Vec<RegionSigma>,
    /// Correlation between true and predicted σ across the regions.
    pub pearson: f64,
    pub best_epoch: usize,
    pub log: Vec<EpochLog>,
}

fn build(subjects: &[Subject], split: Split, plan: &HeteroRecoveryPlan) -> Result<(Vec<Sample>, Vec<Image>)> {
    let noise = Rng::with_stream(plan.seed, STREAM_NOISE);
    let mut samples = Vec::new();
    let mut tissue = Vec::new();
    for s in subjects.iter().filter(|s| s.split == split) {
        let peak = s.slices.iter().map(|x| x.pet.max()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
        let pet: Vec<Image> = s.slices.iter().map(|x| x.pet.map(|v| v / peak)).collect();
        let t1: Vec<Image> = s.slices.iter().map(|x| x.t1.clone()).collect();
        let t2: Vec<Image> = s.slices.iter().map(|x| x.t2.clone()).collect();
        for k in 0..s.slices.len() {
            let mut rng = noise.fork((s.index * plan.slices_per_subject + k) as u64);
            let labels = &s.slices[k].tissue;
            let target = pet[k].zip_map(labels, |v, l| {
                let sd = TissueClass::from_label(l).map_or(0.0, |c| plan.sigma[&c]);
                v + sd * rng.normal()
            })?;
            samples.push(Sample {
                input: assemble_25d(&pet, &t1, &t2, k)?,
                target,
            });
            tissue.push(labels.clone());
        }
    }
    Ok((samples, tissue))
}

pub fn run_hetero_recovery(plan: &HeteroRecoveryPlan) -> Result<HeteroRecoveryReport> {
    plan.validate()?;
    let template = PhantomSpec {
        num_slices: plan.slices_per_subject,
        ..plan.phantom.clone()
    };
    let subjects = generate_dataset(plan.num_subjects, &template, plan.seed)?;
    let (train_set, _) = build(&subjects, Split::Train, plan)?;
    let (val_set, _) = build(&subjects, Split::Val, plan)?;
    let (test_set, test_tissue) = build(&subjects, Split::Test, plan)?;

    let net = MicroNet::new(MicroNetConfig {
        in_channels: train_set[0].input.num_channels(),
        init_seed: Rng::with_stream(plan.seed, STREAM_INIT).next_u64(),
        ..plan.net.clone()
    })?;
    let cfg = TrainConfig {
        loss_mode: LossMode::U,
        seed: Rng::with_stream(plan.seed, STREAM_TRAIN).next_u64(),
        ..plan.train.clone()
    };
    let outcome = train(&train_set, &val_set, net, &cfg, None)?;

    let mut sums: BTreeMap<TissueClass, (f64, usize)> = BTreeMap::new();
    for (s, labels) in test_set.iter().zip(&test_tissue) {
        let pred = outcome.net.predict(&s.input, Dropout::Off)?;
        for (c, l) in pred.c_hat.data().iter().zip(labels.data()) {
            if let Some(class) = TissueClass::from_label(*l) {
                let e = sums.entry(class).or_default();
                e.0 += c.sqrt();
                e.1 += 1;
            }
        }
    }
    let regions: Vec<RegionSigma> = sums
        .into_iter()
        .filter(|(_, (_, n))| *n >= plan.min_voxels)
        .map(|(class, (sum, n))| RegionSigma {
            class,
            true_sigma: plan.sigma[&class],
            predicted_sigma: sum / n as f64,
            voxels: n,
        })
        .collect();
    let truth: Vec<f64> = regions.iter().map(|r| r.true_sigma).collect();
    let predicted: Vec<f64> = regions.iter().map(|r| r.predicted_sigma).collect();
    let pearson = pearson(&truth, &predicted)?;
    for r in &regions {
        log::info!(
            "{:?}: true σ {:.3}, predicted {:.3} over {} voxels",
            r.class,
            r.true_sigma,
            r.predicted_sigma,
            r.voxels
        );
    }
    Ok(HeteroRecoveryReport {
        regions,
        pearson,
        best_epoch: outcome.best_epoch,
        log: outcome.log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn missing_class_sigma_is_a_config_error() {
        let mut plan = HeteroRecoveryPlan::default();
        plan.sigma.remove(&TissueClass::Csf);
        plan.sigma.insert(TissueClass::White, -1.0);
        match plan.validate() {
            Err(Error::Config(errs)) => assert_eq!(errs.len(), 2, "{errs:?}"),
            other => panic!("{other:?}"),
        }
    }
}
