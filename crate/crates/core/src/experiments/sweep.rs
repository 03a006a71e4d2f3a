use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{ExperimentPlan, Method};
use crate::dose::{calibrate_scale, simulate_low_dose, DoseLabel};
use crate::error::{Error, Result};
use crate::metrics::{mean_std, paired_ttest, psnr, ssim};
use crate::micronet::{assemble_25d, train, write_net, EpochLog, MicroNet, MicroNetConfig, Sample, TrainConfig, TrainOutcome};
use crate::phantom::{generate_dataset, PhantomSpec, Split, Subject, TissueClass};
use crate::projector::{Projector, ProjectorGeometry};
use crate::recon::Osem;
use crate::rng::Rng;
use crate::tensor::{Image, Modality};
use crate::uq::{masked_mean, mc_infer, q_maps, uncertainty_map};
use crate::volume::{Metadata, Volume};

const STREAM_CALIBRATION: u64 = 0xC0;
const STREAM_SIMULATION: u64 = 0xC1;
const STREAM_INIT: u64 = 0xC2;
const STREAM_TRAIN: u64 = 0xC3;
const STREAM_MC: u64 = 0xC4;

const LEVELS: [DoseLabel; 3] = [DoseLabel::Ld, DoseLabel::VeryLow, DoseLabel::UltraLow];

fn dose_code(d: DoseLabel) -> u64 {
    match d {
        DoseLabel::Ld => 0,
        DoseLabel::VeryLow => 1,
        DoseLabel::UltraLow => 2,
        DoseLabel::Custom => 3,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SliceId {
    pub subject: usize,
    pub slice: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRow {
    pub dose: DoseLabel,
    pub count_scale: f64,
    pub achieved_psnr_db: f64,
    pub target_psnr_db: f64,
    pub steps: usize,
}

/// Test-set scores of one method at one dose, with the per-slice values
/// behind every summary number.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub method: Method,
    pub dose: DoseLabel,
    pub slices: Vec<SliceId>,
    pub psnr: Vec<f64>,
    pub ssim: Vec<f64>,
    /// Mean σ̂ over the brain (non-background tissue) per slice.
    pub sigma_brain: Vec<f64>,
    /// Q1-in-Q2 containment per slice; `None` where Q1 is empty.
    pub containment: Vec<Option<f64>>,
    pub psnr_mean: f64,
    pub psnr_std: f64,
    pub ssim_mean: f64,
    pub ssim_std: f64,
    pub sigma_brain_mean: f64,
    pub containment_mean: Option<f64>,
}

/// Quality of the network input itself (the low-dose reconstruction).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputCell {
    pub dose: DoseLabel,
    pub psnr: Vec<f64>,
    pub ssim: Vec<f64>,
    pub psnr_mean: f64,
    pub ssim_mean: f64,
}

/// `metric(LD) − metric(uLD)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Degradation {
    pub method: Method,
    pub psnr_db: f64,
    pub ssim: f64,
}

/// Paired t-test of `a` against `b` on per-slice values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepComparison {
    pub dose: DoseLabel,
    pub metric: String,
    pub a: Method,
    pub b: Method,
    pub mean_difference: Option<f64>,
    pub t: Option<f64>,
    pub p: Option<f64>,
    pub dof: Option<usize>,
    pub note: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub method: Method,
    pub num_params: usize,
    pub best_epoch: usize,
    pub log: Vec<EpochLog>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodFailure {
    pub method: Method,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub plan: ExperimentPlan,
    pub intensity_units: String,
    pub calibration: Vec<CalibrationRow>,
    pub inputs: Vec<InputCell>,
    pub cells: Vec<Cell>,
    pub degradation: Vec<Degradation>,
    pub comparisons: Vec<SweepComparison>,
    pub training: Vec<TrainingSummary>,
    pub failures: Vec<MethodFailure>,
}

impl SweepReport {
    pub fn cell(&self, method: Method, dose: DoseLabel) -> Option<&Cell> {
        self.cells.iter().find(|c| c.method == method && c.dose == dose)
    }

    pub fn degradation_of(&self, method: Method) -> Option<&Degradation> {
        self.degradation.iter().find(|d| d.method == method)
    }

    pub fn comparison(&self, dose: DoseLabel, metric: &str, a: Method, b: Method) -> Option<&SweepComparison> {
        self.comparisons
            .iter()
            .find(|c| c.dose == dose && c.metric == metric && c.a == a && c.b == b)
    }

    /// One row per (method, dose) in plan order.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "method,dose,status,n,psnr_mean,psnr_std,ssim_mean,ssim_std,sigma_brain_mean,containment_mean,psnr_degradation,ssim_degradation\n",
        );
        let f = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        for &m in &self.plan.methods {
            let deg = self.degradation_of(m);
            for &d in &self.plan.doses {
                let (dp, ds) = (f(deg.map(|x| x.psnr_db)), f(deg.map(|x| x.ssim)));
                match self.cell(m, d) {
                    Some(c) => {
                        let _ = writeln!(
                            out,
                            "{m},{},ok,{},{},{},{},{},{},{},{dp},{ds}",
                            d.as_str(),
                            c.psnr.len(),
                            f(Some(c.psnr_mean)),
                            f(Some(c.psnr_std)),
                            f(Some(c.ssim_mean)),
                            f(Some(c.ssim_std)),
                            f(Some(c.sigma_brain_mean)),
                            f(c.containment_mean),
                        );
                    }
                    None => {
                        let _ = writeln!(out, "{m},{},failed,0,,,,,,,,", d.as_str());
                    }
                }
            }
        }
        out
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        fs::write(dir.join("report.json"), serde_json::to_string_pretty(self)?)?;
        fs::write(dir.join("report.csv"), self.to_csv())?;
        Ok(())
    }
}

/// Subjects with reference-normalized PET and their simulated low-dose
/// reconstructions per level.
struct Prepared {
    subjects: Vec<Subject>,
    low_dose: BTreeMap<DoseLabel, Vec<Vec<Image>>>,
    calibration: Vec<CalibrationRow>,
}

fn prepare(plan: &ExperimentPlan, osem: &Osem<'_>) -> Result<Prepared> {
    let ds = &plan.dataset;
    let template = PhantomSpec {
        num_slices: ds.slices_per_subject,
        ..ds.phantom.clone()
    };
    let mut subjects = generate_dataset(ds.num_subjects, &template, plan.seed)?;
    let mid = ds.slices_per_subject / 2;
    let refs: Vec<Image> = subjects
        .iter()
        .take(ds.calibration_refs.min(subjects.len()))
        .map(|s| s.slices[mid].pet.clone())
        .collect();

    let levels: Vec<DoseLabel> = LEVELS
        .into_iter()
        .filter(|l| *l == DoseLabel::Ld || plan.doses.contains(l))
        .collect();
    let mut calibration = Vec::new();
    let mut low_dose = BTreeMap::new();
    for level in levels {
        let target = level.target_psnr_db().expect("named level");
        let cal_rng = Rng::with_stream(plan.seed, STREAM_CALIBRATION).fork(dose_code(level));
        let cal = calibrate_scale(osem, &refs, target, &cal_rng)?;
        log::info!(
            "{}: count scale {:.4e} gives {:.2} dB (target {target} dB)",
            level.as_str(),
            cal.count_scale,
            cal.achieved_psnr_db
        );
        let sim_rng = Rng::with_stream(plan.seed, STREAM_SIMULATION).fork(dose_code(level));
        let jobs: Vec<(usize, usize)> = (0..subjects.len())
            .flat_map(|i| (0..ds.slices_per_subject).map(move |k| (i, k)))
            .collect();
        let images = jobs
            .par_iter()
            .map(|&(i, k)| {
                let mut rng = sim_rng.fork((i * ds.slices_per_subject + k) as u64);
                simulate_low_dose(osem, &subjects[i].slices[k].pet, cal.count_scale, &mut rng)
            })
            .collect::<Result<Vec<Image>>>()?;
        let mut per_subject = vec![Vec::new(); subjects.len()];
        for ((i, _), img) in jobs.into_iter().zip(images) {
            per_subject[i].push(img);
        }
        low_dose.insert(level, per_subject);
        calibration.push(CalibrationRow {
            dose: level,
            count_scale: cal.count_scale,
            achieved_psnr_db: cal.achieved_psnr_db,
            target_psnr_db: target,
            steps: cal.steps,
        });
    }

    // Per-subject normalization to the reference maximum.
    for (i, subject) in subjects.iter_mut().enumerate() {
        let peak = subject.slices.iter().map(|s| s.pet.max()).fold(0.0, f64::max);
        if peak > 0.0 {
            for s in &mut subject.slices {
                s.pet = s.pet.map(|v| v / peak);
            }
            for per in low_dose.values_mut() {
                for img in &mut per[i] {
                    *img = img.map(|v| v / peak);
                }
            }
        }
    }
    Ok(Prepared {
        subjects,
        low_dose,
        calibration,
    })
}

fn samples(prep: &Prepared, split: Split, dose: DoseLabel, unimodal: bool) -> Result<(Vec<Sample>, Vec<SliceId>)> {
    let mut out = Vec::new();
    let mut ids = Vec::new();
    let ld = &prep.low_dose[&dose];
    for (i, subject) in prep.subjects.iter().enumerate().filter(|(_, s)| s.split == split) {
        let t1: Vec<Image> = subject.slices.iter().map(|s| s.t1.clone()).collect();
        let t2: Vec<Image> = subject.slices.iter().map(|s| s.t2.clone()).collect();
        for k in 0..subject.slices.len() {
            let mut input = assemble_25d(&ld[i], &t1, &t2, k)?;
            if unimodal {
                input = input.select(&[Modality::Pet])?;
            }
            out.push(Sample {
                input,
                target: subject.slices[k].pet.clone(),
            });
            ids.push(SliceId { subject: i, slice: k });
        }
    }
    Ok((out, ids))
}

struct Evaluated {
    cell: Cell,
    volume: Volume,
}

fn evaluate(
    plan: &ExperimentPlan,
    prep: &Prepared,
    net: &MicroNet,
    method: Method,
    dose: DoseLabel,
) -> Result<Evaluated> {
    let (test, ids) = samples(prep, Split::Test, dose, method.unimodal)?;
    let mc_rng = Rng::with_stream(plan.seed, STREAM_MC).fork(dose_code(dose));
    let mut cell = Cell {
        method,
        dose,
        slices: ids.clone(),
        psnr: Vec::new(),
        ssim: Vec::new(),
        sigma_brain: Vec::new(),
        containment: Vec::new(),
        psnr_mean: 0.0,
        psnr_std: 0.0,
        ssim_mean: 0.0,
        ssim_std: 0.0,
        sigma_brain_mean: 0.0,
        containment_mean: None,
    };
    let mut images = Vec::new();
    for (j, (s, id)) in test.iter().zip(&ids).enumerate() {
        let mc = mc_infer(net, &s.input, plan.uq.num_passes, &mc_rng.fork(j as u64), false)?;
        cell.psnr.push(psnr(&mc.y_mean, &s.target)?);
        cell.ssim.push(ssim(&mc.y_mean, &s.target)?);
        let sigma = uncertainty_map(&mc.c_mean)?;
        let brain: Vec<bool> = prep.subjects[id.subject].slices[id.slice]
            .tissue
            .data()
            .iter()
            .map(|&t| t != TissueClass::Background.label())
            .collect();
        cell.sigma_brain.push(masked_mean(&sigma, &brain)?);
        let residual = mc.y_mean.zip_map(&s.target, |a, b| (a - b).abs())?;
        let q = q_maps(&sigma, &residual, &plan.uq)?;
        cell.containment.push(q.containment());
        images.extend([mc.y_mean, sigma, q.q1, q.q2, q.bm1, q.bm2]);
    }
    (cell.psnr_mean, cell.psnr_std) = mean_std(&cell.psnr);
    (cell.ssim_mean, cell.ssim_std) = mean_std(&cell.ssim);
    cell.sigma_brain_mean = mean_std(&cell.sigma_brain).0;
    let contained: Vec<f64> = cell.containment.iter().flatten().copied().collect();
    cell.containment_mean = (!contained.is_empty()).then(|| mean_std(&contained).0);

    let mut meta = Metadata::new();
    meta.insert("kind".into(), "prediction".into());
    meta.insert("channels".into(), "y_mean,sigma,q1,q2,bm1,bm2".into());
    meta.insert("method".into(), method.to_string());
    meta.insert("dose".into(), dose.as_str().into());
    meta.insert("delta_r".into(), plan.uq.delta_r.to_string());
    meta.insert("delta_u".into(), plan.uq.delta_u.to_string());
    meta.insert("num_passes".into(), plan.uq.num_passes.to_string());
    meta.insert("intensity_units".into(), INTENSITY_UNITS.into());
    meta.insert(
        "slices".into(),
        ids.iter().map(|i| format!("{}:{}", i.subject, i.slice)).collect::<Vec<_>>().join(","),
    );
    Ok(Evaluated {
        cell,
        volume: Volume::new(6, images, meta)?,
    })
}

/// Every method starts from the same initialization seed and sees the same
/// batch order.
fn fit(plan: &ExperimentPlan, prep: &Prepared, projector: &Projector, method: Method) -> Result<TrainOutcome> {
    let (train_set, _) = samples(prep, Split::Train, DoseLabel::Ld, method.unimodal)?;
    let (val_set, _) = samples(prep, Split::Val, DoseLabel::Ld, method.unimodal)?;
    let net = MicroNet::new(MicroNetConfig {
        in_channels: train_set[0].input.num_channels(),
        init_seed: Rng::with_stream(plan.seed, STREAM_INIT).next_u64(),
        ..plan.net.clone()
    })?;
    let cfg = TrainConfig {
        loss_mode: method.loss_mode,
        seed: Rng::with_stream(plan.seed, STREAM_TRAIN).next_u64(),
        ..plan.train.clone()
    };
    log::info!("training {method} on {} LD slices", train_set.len());
    train(&train_set, &val_set, net, &cfg, Some(projector))
}

fn setup(plan: &ExperimentPlan) -> Result<Projector> {
    plan.validate()?;
    let ds = &plan.dataset;
    let geom = ProjectorGeometry::standard(ds.phantom.size, ds.phantom.size, ds.phantom.voxel_size, ds.num_angles)?;
    Projector::new(geom)
}

/// Builds the plan's dataset (calibrating LD) and trains `method` on its LD
/// inputs, exactly as the sweep does.
pub fn train_method(plan: &ExperimentPlan, method: Method) -> Result<TrainOutcome> {
    let plan = ExperimentPlan {
        doses: vec![DoseLabel::Ld],
        ..plan.clone()
    };
    let projector = setup(&plan)?;
    let osem = Osem::new(&projector, &plan.recon)?;
    let prep = prepare(&plan, &osem)?;
    fit(&plan, &prep, &projector, method)
}

const INTENSITY_UNITS: &str = "reference PET divided by its per-subject maximum";

/// Trains one model per method on LD inputs and scores it at every dose in
/// the plan. Training divergence of one method is recorded and the sweep
/// moves on.
pub fn run_dose_sweep(plan: &ExperimentPlan) -> Result<SweepReport> {
    let projector = setup(plan)?;
    let osem = Osem::new(&projector, &plan.recon)?;
    let prep = prepare(plan, &osem)?;

    let mut inputs = Vec::new();
    for &dose in &plan.doses {
        let (test, _) = samples(&prep, Split::Test, dose, true)?;
        let mut p = Vec::new();
        let mut s = Vec::new();
        for t in &test {
            let centre = &t.input.channels()[2].image;
            p.push(psnr(centre, &t.target)?);
            s.push(ssim(centre, &t.target)?);
        }
        inputs.push(InputCell {
            dose,
            psnr_mean: mean_std(&p).0,
            ssim_mean: mean_std(&s).0,
            psnr: p,
            ssim: s,
        });
    }

    let mut cells = Vec::new();
    let mut training = Vec::new();
    let mut failures = Vec::new();
    let out_dir = plan.output_dir.as_deref().filter(|_| plan.save_volumes);
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir.join("volumes"))?;
        fs::create_dir_all(dir.join("models"))?;
    }
    for &method in &plan.methods {
        let outcome = match fit(plan, &prep, &projector, method) {
            Ok(o) => o,
            Err(e @ Error::Training { .. }) => {
                log::warn!("{method}: {e}");
                failures.push(MethodFailure {
                    method,
                    error: e.to_string(),
                });
                continue;
            }
            Err(e) => return Err(e),
        };
        training.push(TrainingSummary {
            method,
            num_params: outcome.net.num_params(),
            best_epoch: outcome.best_epoch,
            log: outcome.log.clone(),
        });
        if let Some(dir) = out_dir {
            write_net(dir.join("models").join(format!("{method}.pnet")), &outcome.net)?;
        }
        for &dose in &plan.doses {
            let ev = evaluate(plan, &prep, &outcome.net, method, dose)?;
            log::info!(
                "{method} @ {}: PSNR {:.2} dB, SSIM {:.4}",
                dose.as_str(),
                ev.cell.psnr_mean,
                ev.cell.ssim_mean
            );
            if let Some(dir) = out_dir {
                ev.volume.write(dir.join("volumes").join(format!("{method}_{}.pvol", dose.as_str())))?;
            }
            cells.push(ev.cell);
        }
    }

    let degradation = if plan.doses.contains(&DoseLabel::Ld) && plan.doses.contains(&DoseLabel::UltraLow) {
        plan.methods
            .iter()
            .filter_map(|&m| {
                let (ld, uld) = (
                    cells.iter().find(|c| c.method == m && c.dose == DoseLabel::Ld)?,
                    cells.iter().find(|c| c.method == m && c.dose == DoseLabel::UltraLow)?,
                );
                Some(Degradation {
                    method: m,
                    psnr_db: ld.psnr_mean - uld.psnr_mean,
                    ssim: ld.ssim_mean - uld.ssim_mean,
                })
            })
            .collect()
    } else {
        Vec::new()
    };

    let mut comparisons = Vec::new();
    for &dose in &plan.doses {
        let row: Vec<&Cell> = plan
            .methods
            .iter()
            .filter_map(|&m| cells.iter().find(|c| c.method == m && c.dose == dose))
            .collect();
        for i in 0..row.len() {
            for j in i + 1..row.len() {
                for (metric, a, b) in [
                    ("psnr", &row[i].psnr, &row[j].psnr),
                    ("ssim", &row[i].ssim, &row[j].ssim),
                ] {
                    let r = paired_ttest(a, b);
                    comparisons.push(SweepComparison {
                        dose,
                        metric: metric.into(),
                        a: row[i].method,
                        b: row[j].method,
                        mean_difference: r.as_ref().ok().map(|t| t.mean_difference),
                        t: r.as_ref().ok().map(|t| t.t),
                        p: r.as_ref().ok().map(|t| t.p),
                        dof: r.as_ref().ok().map(|t| t.dof),
                        note: r.err().map(|e| e.to_string()),
                    });
                }
            }
        }
    }

    let report = SweepReport {
        plan: plan.clone(),
        intensity_units: INTENSITY_UNITS.into(),
        calibration: prep.calibration,
        inputs,
        cells,
        degradation,
        comparisons,
        training,
        failures,
    };
    if let Some(dir) = &plan.output_dir {
        report.write(dir)?;
    }
    Ok(report)
}

/// The sweep restricted to the ablation ladder (SU, MSE+S, MSE+E, MSE and
/// unimodal MSE), keeping the plan's order.
pub fn run_ablation(plan: &ExperimentPlan) -> Result<SweepReport> {
    plan.validate()?;
    let ladder = Method::ablation_ladder();
    let methods: Vec<Method> = plan.methods.iter().copied().filter(|m| ladder.contains(m)).collect();
    if methods.is_empty() {
        return Err(Error::Config(vec![
            "plan.methods contains none of SU, MSE+S, MSE+E, MSE, MSE-unimodal".into(),
        ]));
    }
    run_dose_sweep(&ExperimentPlan {
        methods,
        ..plan.clone()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::micronet::LossMode;

    fn tiny_plan() -> ExperimentPlan {
        let mut plan = ExperimentPlan::quick();
        plan.dataset.num_subjects = 4;
        plan.dataset.slices_per_subject = 2;
        plan.dataset.phantom.size = 32;
        plan.dataset.phantom.voxel_size = 8.0;
        plan.dataset.num_angles = 30;
        plan.dataset.calibration_refs = 2;
        plan.train.epochs = 2;
        plan.uq.num_passes = 2;
        plan.net.widths = [2, 4, 4];
        plan.save_volumes = false;
        plan
    }

    #[test]
    fn single_dose_plan_has_no_degradation() {
        let plan = ExperimentPlan {
            doses: vec![DoseLabel::Ld],
            methods: vec![Method::multimodal(LossMode::Mse)],
            ..tiny_plan()
        };
        let r = run_dose_sweep(&plan).unwrap();
        assert_eq!(r.cells.len(), 1);
        assert!(r.degradation.is_empty());
        assert_eq!(r.to_csv().lines().count(), 2);
        let cal = &r.calibration[0];
        assert!((cal.achieved_psnr_db - 21.0).abs() <= 0.25);
    }

    #[test]
    fn ablation_rejects_plans_without_ladder_modes() {
        let plan = ExperimentPlan {
            methods: vec![Method::multimodal(LossMode::U)],
            ..tiny_plan()
        };
        assert!(matches!(run_ablation(&plan), Err(Error::Config(_))));
        let empty = ExperimentPlan {
            methods: vec![],
            ..tiny_plan()
        };
        assert!(matches!(run_ablation(&empty), Err(Error::Config(_))));
    }
}
