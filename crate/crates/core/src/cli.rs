//! Command-line front end. Every subcommand reads PVOL or JSON inputs, calls
//! one library operation, writes its numeric outputs under `--out` together
//! with `config.resolved.json`, and prints a short human summary.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::dose::{calibrate_scale, simulate_low_dose, DoseLabel};
use crate::error::{domain, Error, Result};
use crate::experiments::{run_ablation, run_dose_sweep, train_method, DatasetSpec, ExperimentPlan, Method};
use crate::metrics::MetricReport;
use crate::micronet::{assemble_25d, read_net, write_net, Dropout, MicroNet, MicroNetConfig, TrainConfig};
use crate::phantom::{subject_seed, Phantom, PhantomSpec};
use crate::projector::{Projector, ProjectorGeometry};
use crate::recon::{Osem, ReconConfig};
use crate::rng::Rng;
use crate::tensor::{Image, Modality, MultimodalStack};
use crate::uq::{mc_infer, q_maps, uncertainty_map, UqConfig};
use crate::volume::{sinograms_to_volume, volume_to_sinograms, Metadata, Volume};

const STREAM_CALIBRATION: u64 = 0xE0;
const STREAM_DOSE: u64 = 0xE1;
const STREAM_UQ: u64 = 0xE2;

/// Dose settings for `simulate-dose`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DoseConfig {
    /// Named level to look up in a calibration file.
    pub level: Option<DoseLabel>,
    /// Explicit count scale; wins over `level`.
    pub count_scale: Option<f64>,
}

/// Everything a run can be configured with, read from one JSON file. Missing
/// keys take their defaults; unknown top-level keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    pub dataset: DatasetSpec,
    pub recon: ReconConfig,
    pub dose: DoseConfig,
    pub doses: Vec<DoseLabel>,
    pub methods: Vec<Method>,
    pub net: MicroNetConfig,
    pub train: TrainConfig,
    pub uq: UqConfig,
    pub save_volumes: bool,
}

impl Default for CliConfig {
    fn default() -> Self {
        let plan = ExperimentPlan::default();
        CliConfig {
            dataset: plan.dataset,
            recon: plan.recon,
            dose: DoseConfig::default(),
            doses: plan.doses,
            methods: plan.methods,
            net: plan.net,
            train: plan.train,
            uq: plan.uq,
            save_volumes: plan.save_volumes,
        }
    }
}

impl CliConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => Ok(serde_json::from_str(&fs::read_to_string(p)?)?),
            None => Ok(CliConfig::default()),
        }
    }

    pub fn plan(&self, seed: u64, output_dir: Option<PathBuf>) -> ExperimentPlan {
        ExperimentPlan {
            dataset: self.dataset.clone(),
            recon: self.recon.clone(),
            doses: self.doses.clone(),
            methods: self.methods.clone(),
            net: self.net.clone(),
            train: self.train.clone(),
            uq: self.uq.clone(),
            seed,
            output_dir,
            save_volumes: self.save_volumes,
        }
    }

    /// Every violated key at once.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if let Err(e) = self.plan(0, None).validate() {
            match e {
                Error::Config(more) => errs.extend(more),
                other => errs.push(other.to_string()),
            }
        }
        if let Some(s) = self.dose.count_scale {
            if !(s > 0.0 && s.is_finite()) {
                errs.push(format!("dose.count_scale must be > 0, got {s}"));
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    fn phantom_spec(&self) -> PhantomSpec {
        PhantomSpec {
            num_slices: self.dataset.slices_per_subject,
            ..self.dataset.phantom.clone()
        }
    }

    fn projector(&self) -> Result<Projector> {
        let p = &self.dataset.phantom;
        Projector::new(ProjectorGeometry::standard(p.size, p.size, p.voxel_size, self.dataset.num_angles)?)
    }
}

#[derive(Debug, Parser)]
#[command(name = "petphys", version, about = "Low-dose PET simulation, reconstruction and uncertainty-aware denoising")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// JSON config file; see docs/config.md for the schema.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every random draw. Required by stochastic subcommands.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true, env = "PETPHYS_THREADS")]
    pub threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, default_value = "petphys-out")]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render synthetic brain phantoms.
    ///
    /// Writes phantom_NNN.pvol with channels pet,t1,t2,tissue.
    /// Config keys: dataset.phantom.{size, voxel_size, num_ellipses,
    /// contrast_profile, lesion_probability, texture_amplitude},
    /// dataset.slices_per_subject. Needs --seed.
    Phantom {
        /// Number of phantoms.
        #[arg(long, default_value_t = 1)]
        n: usize,
    },
    /// Forward-project the PET channel of a volume into sinograms.
    ///
    /// Writes sinogram.pvol tagged with its geometry.
    /// Config keys: dataset.num_angles.
    Project {
        #[arg(long)]
        input: PathBuf,
    },
    /// Reconstruct sinograms with OSEM.
    ///
    /// Writes recon.pvol; with --reference also metrics.json and metrics.csv.
    /// Config keys: recon.{num_iterations, num_subsets, psf_fwhm,
    /// post_smooth_fwhm, init_value, epsilon_div}.
    Osem {
        #[arg(long)]
        input: PathBuf,
        /// Volume whose first channel is the ground truth.
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// Simulate a low-dose acquisition and reconstruct it.
    ///
    /// Writes lowdose.pvol. The count scale comes from --count-scale,
    /// dose.count_scale, or the --level entry of a calibrate output.
    /// Config keys: dataset.num_angles, recon.*, dose.{count_scale, level}.
    /// Needs --seed.
    SimulateDose {
        /// Phantom volume (PET in channel 0).
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        count_scale: Option<f64>,
        #[arg(long)]
        level: Option<DoseLabel>,
        /// calibration.json written by `calibrate`.
        #[arg(long)]
        calibration: Option<PathBuf>,
    },
    /// Find the count scale reaching each dose level's PSNR target.
    ///
    /// Writes calibration.json. References are the central slices of
    /// dataset.calibration_refs fresh phantoms.
    /// Config keys: dataset.{phantom, slices_per_subject, num_angles,
    /// calibration_refs}, recon.*. Needs --seed.
    Calibrate {
        /// Levels to calibrate (comma separated).
        #[arg(long, value_delimiter = ',', default_values = ["LD", "vLD", "uLD"])]
        levels: Vec<DoseLabel>,
    },
    /// Train one network on the configured dataset's LD reconstructions.
    ///
    /// Writes model.pnet and training.json.
    /// Config keys: dataset.*, recon.*, net.{widths, dropout_p, bn_momentum,
    /// bn_eps}, train.{epochs, lr_init, weight_decay, batch_size,
    /// cosine_annealing, loss, adam}. Needs --seed.
    Train {
        /// SU, U, MSE, MSE+S, MSE+E, optionally with a -unimodal suffix.
        #[arg(long, default_value = "SU")]
        method: Method,
    },
    /// Single deterministic forward pass (dropout off).
    ///
    /// Writes prediction.pvol with channels y_hat,c_hat in input units.
    /// Config keys: none.
    Infer {
        #[arg(long)]
        model: PathBuf,
        /// Low-dose reconstruction volume.
        #[arg(long)]
        input: PathBuf,
        /// Phantom volume providing T1 and T2 channels.
        #[arg(long)]
        mri: PathBuf,
    },
    /// Monte-Carlo dropout inference with uncertainty maps.
    ///
    /// Writes uq.pvol with channels y_mean,sigma,y_spread,q2,bm2 and, with
    /// --reference, q1,bm1 as well.
    /// Config keys: uq.{num_passes, delta_r, delta_u}. Needs --seed.
    Uq {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        mri: PathBuf,
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// PSNR and SSIM of a prediction against a reference.
    ///
    /// Writes metrics.json and metrics.csv; --compare adds paired t-tests.
    /// Config keys: none.
    Evaluate {
        #[arg(long)]
        prediction: PathBuf,
        #[arg(long)]
        reference: Option<PathBuf>,
        /// Prediction channel to score.
        #[arg(long, default_value_t = 0)]
        channel: usize,
        /// A second prediction scored on the same slices.
        #[arg(long)]
        compare: Option<PathBuf>,
    },
    /// Dose sweep over methods and dose levels.
    ///
    /// Writes report.json, report.csv, and with save_volumes also
    /// volumes/*.pvol and models/*.pnet. --plan takes an experiment plan
    /// JSON instead of the config.
    /// Config keys: dataset.*, recon.*, doses, methods, net.*, train.*,
    /// uq.*, save_volumes. Needs --seed.
    Sweep {
        #[arg(long)]
        plan: Option<PathBuf>,
        /// Keep only the ablation-ladder methods.
        #[arg(long)]
        ablation: bool,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Phantom { .. } => "phantom",
            Command::Project { .. } => "project",
            Command::Osem { .. } => "osem",
            Command::SimulateDose { .. } => "simulate-dose",
            Command::Calibrate { .. } => "calibrate",
            Command::Train { .. } => "train",
            Command::Infer { .. } => "infer",
            Command::Uq { .. } => "uq",
            Command::Evaluate { .. } => "evaluate",
            Command::Sweep { .. } => "sweep",
        }
    }

    fn stochastic(&self) -> bool {
        matches!(
            self,
            Command::Phantom { .. }
                | Command::SimulateDose { .. }
                | Command::Calibrate { .. }
                | Command::Train { .. }
                | Command::Uq { .. }
                | Command::Sweep { .. }
        )
    }
}

/// Parses `args` (program name first), runs, and reports errors as
/// `error[category]: message` on stderr.
pub fn main_from<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error[usage]: {first}");
            return ExitCode::from(2);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let cat = e.category();
            let msg = e.to_string().replace('\n', " ");
            let msg = msg.strip_prefix(&format!("{cat} error: ")).unwrap_or(&msg);
            eprintln!("error[{cat}]: {msg}");
            ExitCode::FAILURE
        }
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    let g = &cli.global;
    if cli.command.stochastic() && g.seed.is_none() {
        return Err(Error::Config(vec![format!("`{}` needs --seed", cli.command.name())]));
    }
    if g.threads == Some(0) {
        return Err(Error::Config(vec!["--threads must be >= 1".into()]));
    }
    let cfg = CliConfig::load(g.config.as_deref())?;
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(g.threads.unwrap_or(0))
        .build()
        .map_err(|e| domain(format!("thread pool: {e}")))?;
    fs::create_dir_all(&g.out)?;
    pool.install(|| dispatch(cli, &cfg))
}

#[derive(Serialize)]
struct Snapshot<'a, T: Serialize> {
    command: &'a str,
    seed: Option<u64>,
    config: &'a T,
}

fn snapshot<T: Serialize>(cli: &Cli, config: &T) -> Result<()> {
    let s = Snapshot {
        command: cli.command.name(),
        seed: cli.global.seed,
        config,
    };
    fs::write(cli.global.out.join("config.resolved.json"), serde_json::to_string_pretty(&s)?)?;
    Ok(())
}

fn dispatch(cli: &Cli, cfg: &CliConfig) -> Result<()> {
    let out = &cli.global.out;
    let seed = cli.global.seed.unwrap_or(0);
    if !matches!(cli.command, Command::Sweep { .. }) {
        snapshot(cli, cfg)?;
    }
    match &cli.command {
        Command::Phantom { n } => {
            if *n == 0 {
                return Err(Error::Config(vec!["--n must be >= 1".into()]));
            }
            for i in 0..*n {
                let spec = PhantomSpec {
                    seed: subject_seed(seed, i),
                    ..cfg.phantom_spec()
                };
                let slices = Phantom::new(&spec)?.render()?;
                let mut meta = Metadata::new();
                meta.insert("kind".into(), "phantom".into());
                meta.insert("channels".into(), "pet,t1,t2,tissue".into());
                meta.insert("seed".into(), spec.seed.to_string());
                let images = slices.into_iter().flat_map(|s| [s.pet, s.t1, s.t2, s.tissue]).collect();
                let path = out.join(format!("phantom_{i:03}.pvol"));
                Volume::new(4, images, meta)?.write(&path)?;
                println!("wrote {}", path.display());
            }
        }
        Command::Project { input } => {
            let vol = read_volume(input)?;
            let first = vol.get(0, 0);
            let geom = ProjectorGeometry::standard(first.width(), first.height(), first.voxel_size(), cfg.dataset.num_angles)?;
            let projector = Projector::new(geom.clone())?;
            let sinos = (0..vol.num_slices())
                .map(|k| projector.forward(vol.get(k, 0)))
                .collect::<Result<Vec<_>>>()?;
            let mut meta = Metadata::new();
            geom.to_metadata(&mut meta);
            let path = out.join("sinogram.pvol");
            sinograms_to_volume(&sinos, meta)?.write(&path)?;
            println!(
                "projected {} slices onto {} angles x {} bins -> {}",
                sinos.len(),
                geom.num_angles,
                geom.num_bins,
                path.display()
            );
        }
        Command::Osem { input, reference } => {
            let vol = read_volume(input)?;
            let projector = Projector::new(ProjectorGeometry::from_metadata(&vol.metadata)?)?;
            let osem = Osem::new(&projector, &cfg.recon)?;
            let recon = volume_to_sinograms(&vol)?
                .iter()
                .map(|s| osem.run(s))
                .collect::<Result<Vec<_>>>()?;
            let mut meta = Metadata::new();
            meta.insert("kind".into(), "image".into());
            let path = out.join("recon.pvol");
            Volume::single_channel(recon.clone(), meta)?.write(&path)?;
            println!("reconstructed {} slices -> {}", recon.len(), path.display());
            if let Some(r) = reference {
                let truth = read_volume(r)?;
                let pairs = pair_slices(&recon, &truth)?;
                write_metrics(out, &MetricReport::evaluate("osem", &pairs)?)?;
            }
        }
        Command::SimulateDose {
            input,
            count_scale,
            level,
            calibration,
        } => {
            let scale = resolve_count_scale(cfg, *count_scale, *level, calibration.as_deref())?;
            let vol = read_volume(input)?;
            let first = vol.get(0, 0);
            let projector = Projector::new(ProjectorGeometry::standard(
                first.width(),
                first.height(),
                first.voxel_size(),
                cfg.dataset.num_angles,
            )?)?;
            let osem = Osem::new(&projector, &cfg.recon)?;
            let rng = Rng::with_stream(seed, STREAM_DOSE);
            let images = (0..vol.num_slices())
                .map(|k| simulate_low_dose(&osem, vol.get(k, 0), scale, &mut rng.fork(k as u64)))
                .collect::<Result<Vec<_>>>()?;
            let peak = (0..vol.num_slices()).map(|k| vol.get(k, 0).max()).fold(0.0, f64::max);
            let mut meta = Metadata::new();
            meta.insert("kind".into(), "lowdose".into());
            meta.insert("count_scale".into(), scale.to_string());
            meta.insert("reference_max".into(), peak.to_string());
            let path = out.join("lowdose.pvol");
            let pairs: Vec<(Image, Image)> =
                images.iter().enumerate().map(|(k, im)| (im.clone(), vol.get(k, 0).clone())).collect();
            Volume::single_channel(images, meta)?.write(&path)?;
            let report = MetricReport::evaluate("lowdose", &pairs)?;
            println!(
                "count scale {scale:.6e}: mean PSNR {:.2} dB over {} slices -> {}",
                report.psnr_mean,
                pairs.len(),
                path.display()
            );
        }
        Command::Calibrate { levels } => {
            let projector = cfg.projector()?;
            let osem = Osem::new(&projector, &cfg.recon)?;
            let spec = cfg.phantom_spec();
            let mid = spec.num_slices / 2;
            let refs = (0..cfg.dataset.calibration_refs)
                .map(|i| {
                    Phantom::new(&PhantomSpec {
                        seed: subject_seed(seed, i),
                        ..spec.clone()
                    })?
                    .render_slice(mid)
                    .map(|s| s.pet)
                })
                .collect::<Result<Vec<_>>>()?;
            let mut rows = Vec::new();
            for &level in levels {
                let target = level
                    .target_psnr_db()
                    .ok_or_else(|| Error::Config(vec!["calibrate --levels accepts LD, vLD, uLD".into()]))?;
                let rng = Rng::with_stream(seed, STREAM_CALIBRATION).fork(level as u64);
                let cal = calibrate_scale(&osem, &refs, target, &rng)?;
                println!(
                    "{}: count scale {:.6e} -> {:.3} dB (target {target} dB)",
                    level.as_str(),
                    cal.count_scale,
                    cal.achieved_psnr_db
                );
                rows.push(CalibrationEntry {
                    dose: level,
                    count_scale: cal.count_scale,
                    achieved_psnr_db: cal.achieved_psnr_db,
                    target_psnr_db: target,
                    steps: cal.steps,
                });
            }
            fs::write(out.join("calibration.json"), serde_json::to_string_pretty(&rows)?)?;
        }
        Command::Train { method } => {
            let plan = cfg.plan(seed, None);
            let outcome = train_method(&plan, *method)?;
            write_net(out.join("model.pnet"), &outcome.net)?;
            fs::write(out.join("training.json"), serde_json::to_string_pretty(&outcome.log)?)?;
            let best = &outcome.log[outcome.best_epoch];
            println!(
                "{method}: best epoch {} (val PSNR {:.2} dB, SSIM {:.4})",
                outcome.best_epoch, best.val_psnr, best.val_ssim
            );
        }
        Command::Infer { model, input, mri } => {
            let net = with_path(model, read_net(model))?;
            let (stacks, scale) = load_inputs(&net, input, mri)?;
            let mut images = Vec::new();
            for s in &stacks {
                let p = net.predict(s, Dropout::Off)?;
                images.push(p.y_hat.map(|v| v * scale));
                images.push(p.c_hat.map(|v| v * scale * scale));
            }
            let mut meta = Metadata::new();
            meta.insert("kind".into(), "prediction".into());
            meta.insert("channels".into(), "y_hat,c_hat".into());
            let path = out.join("prediction.pvol");
            Volume::new(2, images, meta)?.write(&path)?;
            println!("predicted {} slices -> {}", stacks.len(), path.display());
        }
        Command::Uq {
            model,
            input,
            mri,
            reference,
        } => {
            let net = with_path(model, read_net(model))?;
            let (stacks, scale) = load_inputs(&net, input, mri)?;
            let truth = reference.as_deref().map(read_volume).transpose()?;
            let rng = Rng::with_stream(seed, STREAM_UQ);
            let mut images = Vec::new();
            let mut contained = Vec::new();
            let mut sigma_sum = 0.0;
            for (k, s) in stacks.iter().enumerate() {
                let mc = mc_infer(&net, s, cfg.uq.num_passes, &rng.fork(k as u64), false)?;
                let sigma = uncertainty_map(&mc.c_mean)?;
                sigma_sum += sigma.sum() / sigma.len() as f64;
                let residual = match &truth {
                    Some(t) => mc.y_mean.zip_map(t.get(k, 0), |y, r| (y - r / scale).abs())?,
                    None => mc.y_mean.zeros_like(),
                };
                let q = q_maps(&sigma, &residual, &cfg.uq)?;
                let containment = q.containment();
                images.extend([
                    mc.y_mean.map(|v| v * scale),
                    sigma.map(|v| v * scale),
                    mc.y_spread.map(|v| v * scale * scale),
                    q.q2.map(|v| v * scale),
                    q.bm2,
                ]);
                if truth.is_some() {
                    contained.extend(containment);
                    images.extend([q.q1.map(|v| v * scale), q.bm1]);
                }
            }
            let channels = if truth.is_some() {
                "y_mean,sigma,y_spread,q2,bm2,q1,bm1"
            } else {
                "y_mean,sigma,y_spread,q2,bm2"
            };
            let mut meta = Metadata::new();
            meta.insert("kind".into(), "uq".into());
            meta.insert("channels".into(), channels.into());
            meta.insert("num_passes".into(), cfg.uq.num_passes.to_string());
            meta.insert("delta_r".into(), cfg.uq.delta_r.to_string());
            meta.insert("delta_u".into(), cfg.uq.delta_u.to_string());
            let path = out.join("uq.pvol");
            Volume::new(channels.split(',').count(), images, meta)?.write(&path)?;
            println!(
                "M = {}: mean sigma {:.4} (normalized units) over {} slices -> {}",
                cfg.uq.num_passes,
                sigma_sum / stacks.len() as f64,
                stacks.len(),
                path.display()
            );
            if !contained.is_empty() {
                println!(
                    "Q1-in-Q2 containment {:.4}",
                    contained.iter().sum::<f64>() / contained.len() as f64
                );
            }
        }
        Command::Evaluate {
            prediction,
            reference,
            channel,
            compare,
        } => {
            let reference = reference
                .as_ref()
                .ok_or_else(|| Error::Config(vec!["`evaluate` needs --reference".into()]))?;
            let truth = read_volume(reference)?;
            let score = |path: &Path, label: &str| -> Result<MetricReport> {
                let vol = read_volume(path)?;
                if *channel >= vol.num_channels {
                    return Err(domain(format!(
                        "--channel {channel} but {} has {} channels",
                        path.display(),
                        vol.num_channels
                    )));
                }
                let test: Vec<Image> = (0..vol.num_slices()).map(|k| vol.get(k, *channel).clone()).collect();
                MetricReport::evaluate(label, &pair_slices(&test, &truth)?)
            };
            let mut report = score(prediction, &prediction.display().to_string())?;
            if let Some(other) = compare {
                report.compare(&score(other, &other.display().to_string())?);
            }
            write_metrics(out, &report)?;
        }
        Command::Sweep { plan, ablation } => {
            let mut plan = match plan {
                Some(p) => serde_json::from_str::<ExperimentPlan>(&fs::read_to_string(p)?)?,
                None => cfg.plan(seed, None),
            };
            plan.seed = seed;
            plan.output_dir = Some(out.clone());
            snapshot(cli, &plan)?;
            let report = if *ablation { run_ablation(&plan)? } else { run_dose_sweep(&plan)? };
            print!("{}", report.to_csv());
            for f in &report.failures {
                println!("{} failed: {}", f.method, f.error);
            }
        }
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct CalibrationEntry {
    dose: DoseLabel,
    count_scale: f64,
    achieved_psnr_db: f64,
    target_psnr_db: f64,
    steps: usize,
}

fn resolve_count_scale(
    cfg: &CliConfig,
    flag: Option<f64>,
    level: Option<DoseLabel>,
    calibration: Option<&Path>,
) -> Result<f64> {
    let scale = match (flag.or(cfg.dose.count_scale), level.or(cfg.dose.level), calibration) {
        (Some(s), _, _) => s,
        (None, Some(level), Some(path)) => {
            let rows: Vec<CalibrationEntry> = serde_json::from_str(&fs::read_to_string(path)?)?;
            rows.iter()
                .find(|r| r.dose == level)
                .map(|r| r.count_scale)
                .ok_or_else(|| domain(format!("{} has no entry for {}", path.display(), level.as_str())))?
        }
        _ => {
            return Err(Error::Config(vec![
                "simulate-dose needs --count-scale, dose.count_scale, or --level with --calibration".into(),
            ]))
        }
    };
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::Config(vec![format!("count scale must be > 0, got {scale}")]));
    }
    Ok(scale)
}

fn read_volume(path: &Path) -> Result<Volume> {
    with_path(path, Volume::read(path))
}

/// Prefixes I/O errors with the offending path.
fn with_path<T>(path: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Io(io) => Error::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display()))),
        other => other,
    })
}

fn pair_slices(test: &[Image], truth: &Volume) -> Result<Vec<(Image, Image)>> {
    if test.len() != truth.num_slices() {
        return Err(Error::Dimension(format!(
            "{} predicted slices vs {} reference slices",
            test.len(),
            truth.num_slices()
        )));
    }
    Ok(test.iter().enumerate().map(|(k, t)| (t.clone(), truth.get(k, 0).clone())).collect())
}

fn write_metrics(out: &Path, report: &MetricReport) -> Result<()> {
    fs::write(out.join("metrics.json"), serde_json::to_string_pretty(report)?)?;
    fs::write(out.join("metrics.csv"), report.to_csv())?;
    println!(
        "{}: PSNR {:.2} ± {:.2} dB, SSIM {:.4} ± {:.4} over {} slices",
        report.label,
        report.psnr_mean,
        report.psnr_std,
        report.ssim_mean,
        report.ssim_std,
        report.psnr.len()
    );
    for c in &report.comparisons {
        match &c.result {
            Some(t) => println!("  {} vs {} ({}): t = {:.3}, p = {:.3e}", c.a, c.b, c.metric, t.t, t.p),
            None => println!("  {} vs {} ({}): {}", c.a, c.b, c.metric, c.note.as_deref().unwrap_or("")),
        }
    }
    Ok(())
}

/// Normalized 2.5D stacks for every slice, and the factor that maps the
/// network's units back to the input's.
fn load_inputs(net: &MicroNet, input: &Path, mri: &Path) -> Result<(Vec<MultimodalStack>, f64)> {
    let low = read_volume(input)?;
    let anat = read_volume(mri)?;
    if low.num_slices() != anat.num_slices() {
        return Err(Error::Dimension(format!(
            "{} low-dose slices vs {} MRI slices",
            low.num_slices(),
            anat.num_slices()
        )));
    }
    let t1_idx = anat.channel_index("t1").unwrap_or(1);
    let t2_idx = anat.channel_index("t2").unwrap_or(2);
    if anat.num_channels <= t1_idx.max(t2_idx) {
        return Err(Error::Format(format!("{} lacks t1/t2 channels", mri.display())));
    }
    let n = low.num_slices();
    let scale = match low.metadata.get("reference_max").and_then(|v| v.parse::<f64>().ok()) {
        Some(s) if s > 0.0 => s,
        _ => (0..n).map(|k| low.get(k, 0).max()).fold(0.0, f64::max).max(f64::MIN_POSITIVE),
    };
    let pet: Vec<Image> = (0..n).map(|k| low.get(k, 0).map(|v| v / scale)).collect();
    let t1: Vec<Image> = (0..n).map(|k| anat.get(k, t1_idx).clone()).collect();
    let t2: Vec<Image> = (0..n).map(|k| anat.get(k, t2_idx).clone()).collect();
    let unimodal = net.config().in_channels == 5;
    let stacks = (0..n)
        .map(|k| {
            let s = assemble_25d(&pet, &t1, &t2, k)?;
            if unimodal {
                s.select(&[Modality::Pet])
            } else {
                Ok(s)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((stacks, scale))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::micronet::LossMode;

    #[test]
    fn every_subcommand_documents_config_keys() {
        use clap::CommandFactory;
        let cmd = Cli::command();
        for sub in cmd.get_subcommands() {
            let help = sub.get_long_about().map(|s| s.to_string()).unwrap_or_default();
            assert!(help.contains("Config keys:"), "{} help lacks config keys", sub.get_name());
        }
        assert_eq!(cmd.get_subcommands().count(), 10);
    }

    #[test]
    fn config_errors_list_every_key() {
        let cfg: CliConfig =
            serde_json::from_str(r#"{"uq": {"num_passes": 0, "delta_r": -1}, "train": {"epochs": 0}}"#).unwrap();
        match cfg.validate() {
            Err(Error::Config(errs)) => {
                assert!(errs.len() >= 3, "{errs:?}");
                for key in ["uq.num_passes", "uq.delta_r", "train.epochs"] {
                    assert!(errs.iter().any(|e| e.contains(key)), "{key} missing from {errs:?}");
                }
            }
            other => panic!("{other:?}"),
        }
        assert!(serde_json::from_str::<CliConfig>(r#"{"bogus": 1}"#).is_err());
    }

    #[test]
    fn stochastic_commands_need_a_seed() {
        let cli = Cli::try_parse_from(["petphys", "phantom", "--n", "1"]).unwrap();
        assert!(matches!(run(&cli), Err(Error::Config(_))));
    }

    #[test]
    fn method_flag_parses() {
        let cli = Cli::try_parse_from(["petphys", "train", "--method", "MSE-unimodal", "--seed", "1"]).unwrap();
        match cli.command {
            Command::Train { method } => assert_eq!(method, Method { loss_mode: LossMode::Mse, unimodal: true }),
            _ => unreachable!(),
        }
    }
}
