//! Trains the U objective on targets with known per-tissue noise and checks
//! that √Ĉ tracks the true σ region by region.

use petphys::experiments::{run_hetero_recovery, HeteroRecoveryPlan};

fn main() -> petphys::Result<()> {
    let report = run_hetero_recovery(&HeteroRecoveryPlan::default())?;
    println!("{:<12} {:>8} {:>10} {:>8}", "class", "true σ", "predicted", "voxels");
    for r in &report.regions {
        println!("{:<12} {:>8.3} {:>10.3} {:>8}", format!("{:?}", r.class), r.true_sigma, r.predicted_sigma, r.voxels);
    }
    println!("Pearson r = {:.3} (best epoch {})", report.pearson, report.best_epoch);
    Ok(())
}
