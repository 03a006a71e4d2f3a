//! PSNR, SSIM and a paired t-test between two noisy versions of a phantom.

use petphys::metrics::{paired_ttest, psnr, ssim, MetricReport};
use petphys::phantom::{Phantom, PhantomSpec};
use petphys::{Image, Rng};

fn main() -> petphys::Result<()> {
    let slices = Phantom::new(&PhantomSpec {
        size: 64,
        voxel_size: 4.0,
        num_slices: 8,
        seed: 2,
        ..Default::default()
    })?
    .render()?;
    let mut rng = Rng::new(8);
    let mut noisy = |img: &Image, sd: f64| img.map(|v| (v + sd * rng.normal()).max(0.0));

    let mut mild = Vec::new();
    let mut strong = Vec::new();
    for s in &slices {
        mild.push((noisy(&s.pet, 0.05), s.pet.clone()));
        strong.push((noisy(&s.pet, 0.15), s.pet.clone()));
    }
    println!("first slice: PSNR {:.2} dB, SSIM {:.4}", psnr(&mild[0].0, &mild[0].1)?, ssim(&mild[0].0, &mild[0].1)?);

    let mut a = MetricReport::evaluate("sd 0.05", &mild)?;
    let b = MetricReport::evaluate("sd 0.15", &strong)?;
    a.compare(&b);
    for r in [&a, &b] {
        println!("{:<8} PSNR {:.2} ± {:.2} dB  SSIM {:.4} ± {:.4}", r.label, r.psnr_mean, r.psnr_std, r.ssim_mean, r.ssim_std);
    }
    let t = paired_ttest(&a.psnr, &b.psnr)?;
    println!("paired t = {:.2}, dof {}, p = {:.2e}", t.t, t.dof, t.p);
    print!("{}", a.to_csv());
    Ok(())
}
