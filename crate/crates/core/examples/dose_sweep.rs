//! The dose-robustness sweep on the quick plan: trains each method at LD,
//! scores it at LD, vLD and uLD, and writes report.json / report.csv.
//! Usage: `dose_sweep [out_dir] [--ablation]`. Takes several minutes.

use petphys::experiments::{run_ablation, run_dose_sweep, ExperimentPlan};

fn main() -> petphys::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args: Vec<String> = std::env::args().skip(1).collect();
    let ablation = args.iter().any(|a| a == "--ablation");
    let out = args.iter().find(|a| !a.starts_with("--")).map(Into::into).unwrap_or_else(|| std::env::temp_dir().join("petphys-sweep"));

    let plan = ExperimentPlan {
        output_dir: Some(out),
        ..ExperimentPlan::quick()
    };
    let report = if ablation { run_ablation(&plan)? } else { run_dose_sweep(&plan)? };

    print!("{}", report.to_csv());
    for d in &report.degradation {
        println!("{:<14} LD→uLD: −{:.2} dB PSNR, −{:.4} SSIM", d.method.to_string(), d.psnr_db, d.ssim);
    }
    for c in report.comparisons.iter().filter(|c| c.metric == "psnr") {
        if let (Some(d), Some(p)) = (c.mean_difference, c.p) {
            println!("{:<4} {} vs {}: Δ {d:+.2} dB, p = {p:.2e}", c.dose.as_str(), c.a, c.b);
        }
    }
    Ok(())
}
