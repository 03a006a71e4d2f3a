//! Monte-Carlo dropout on a freshly trained network: σ̂ maps at LD and uLD
//! inputs, thresholded Q-maps and their containment.

use petphys::dose::{calibrate_scale, simulate_low_dose, DoseLabel};
use petphys::experiments::{train_method, ExperimentPlan, Method};
use petphys::micronet::{assemble_25d, LossMode};
use petphys::phantom::{Phantom, PhantomSpec};
use petphys::recon::Osem;
use petphys::uq::{masked_mean, mc_infer, q_maps, uncertainty_map, UqConfig};
use petphys::{Image, Projector, ProjectorGeometry, Rng};

fn main() -> petphys::Result<()> {
    let mut plan = ExperimentPlan::quick();
    plan.dataset.num_subjects = 6;
    plan.dataset.slices_per_subject = 4;
    plan.train.epochs = 8;
    let net = train_method(&plan, Method::multimodal(LossMode::Su))?.net;

    let spec = PhantomSpec {
        num_slices: 5,
        seed: 99,
        ..plan.dataset.phantom.clone()
    };
    let slices = Phantom::new(&spec)?.render()?;
    let peak = slices.iter().map(|s| s.pet.max()).fold(0.0, f64::max);
    let pet: Vec<Image> = slices.iter().map(|s| s.pet.clone()).collect();
    let t1: Vec<Image> = slices.iter().map(|s| s.t1.clone()).collect();
    let t2: Vec<Image> = slices.iter().map(|s| s.t2.clone()).collect();
    let brain: Vec<bool> = slices[2].tissue.data().iter().map(|&t| t != 0.0).collect();

    let p = Projector::new(ProjectorGeometry::standard(spec.size, spec.size, spec.voxel_size, plan.dataset.num_angles)?)?;
    let osem = Osem::new(&p, &plan.recon)?;
    let uq = UqConfig {
        num_passes: 20,
        ..Default::default()
    };
    let rng = Rng::new(4);
    for (i, level) in [DoseLabel::Ld, DoseLabel::UltraLow].into_iter().enumerate() {
        let cal = calibrate_scale(&osem, &pet[2..3], level.target_psnr_db().unwrap(), &rng.fork(i as u64))?;
        let low = pet
            .iter()
            .enumerate()
            .map(|(k, x)| simulate_low_dose(&osem, x, cal.count_scale, &mut rng.fork(10 + k as u64)).map(|im| im.map(|v| v / peak)))
            .collect::<petphys::Result<Vec<_>>>()?;
        let stack = assemble_25d(&low, &t1, &t2, 2)?;
        let mc = mc_infer(&net, &stack, uq.num_passes, &rng.fork(50 + i as u64), false)?;
        let sigma = uncertainty_map(&mc.c_mean)?;
        let target = pet[2].map(|v| v / peak);
        let residual = mc.y_mean.zip_map(&target, |a, b| (a - b).abs())?;
        let q = q_maps(&sigma, &residual, &uq)?;
        let count = |im: &Image| im.data().iter().filter(|&&v| v != 0.0).count();
        println!(
            "{:<4} mean σ̂ (brain) {:.4}  |BM1| {}  |BM2| {}  containment {}",
            level.as_str(),
            masked_mean(&sigma, &brain)?,
            count(&q.bm1),
            count(&q.bm2),
            q.containment().map_or("n/a".to_string(), |c| format!("{c:.3}"))
        );
    }
    Ok(())
}
