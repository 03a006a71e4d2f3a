//! Trains the dual-head network with the SU objective on simulated LD
//! reconstructions of a small phantom set, then saves it.
//! Usage: `train_micronet [epochs] [out.pnet]`.

use petphys::experiments::{train_method, ExperimentPlan, Method};
use petphys::micronet::{write_net, LossMode};

fn main() -> petphys::Result<()> {
    env_logger::init();
    let mut args = std::env::args().skip(1);
    let mut plan = ExperimentPlan::quick();
    plan.dataset.num_subjects = 6;
    plan.dataset.slices_per_subject = 4;
    plan.train.epochs = args.next().map_or(Ok(10), |s| s.parse()).expect("epochs must be an integer");

    let outcome = train_method(&plan, Method::multimodal(LossMode::Su))?;
    println!("{:>5} {:>10} {:>12} {:>10} {:>8}", "epoch", "lr", "train loss", "val PSNR", "val SSIM");
    for e in &outcome.log {
        println!(
            "{:>5} {:>10.2e} {:>12.2} {:>10.2} {:>8.4}",
            e.epoch, e.lr, e.train_loss, e.val_psnr, e.val_ssim
        );
    }
    println!("best epoch {}", outcome.best_epoch);
    let path = args.next().map(Into::into).unwrap_or_else(|| std::env::temp_dir().join("su.pnet"));
    write_net(&path, &outcome.net)?;
    println!("wrote {}", path.display());
    Ok(())
}
