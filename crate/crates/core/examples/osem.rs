//! OSEM on a noiseless phantom sinogram: PSNR after each iteration, with and
//! without the resolution model and post-smoothing.

use petphys::metrics::psnr;
use petphys::phantom::{generate, PhantomSpec};
use petphys::recon::{Osem, ReconConfig};
use petphys::{Projector, ProjectorGeometry};

fn main() -> petphys::Result<()> {
    let truth = generate(&PhantomSpec { seed: 3, ..Default::default() })?.pet;
    let p = Projector::new(ProjectorGeometry::standard(128, 128, 2.0, 180)?)?;
    let sino = p.forward(&truth)?;

    for (name, cfg) in [
        ("default", ReconConfig::default()),
        ("unsmoothed", ReconConfig::unsmoothed(10, 21)),
    ] {
        let osem = Osem::new(&p, &cfg)?;
        println!("{name}: {} subsets", osem.partition().num_subsets());
        let x = osem.run_with(&sino, |it, img| {
            println!("  iter {:>2}: {:.2} dB", it + 1, psnr(img, &truth).unwrap_or(f64::NAN));
        })?;
        println!("  final {:.2} dB", psnr(&x, &truth)?);
    }
    Ok(())
}
