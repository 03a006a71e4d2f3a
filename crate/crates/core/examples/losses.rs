//! The objectives on a toy prediction: values, the per-voxel optimum of the
//! heteroscedastic loss, and a finite-difference spot check.

use petphys::losses::{loss_manifold, loss_mse, loss_sinogram_mse, loss_su, loss_u, AvgPoolEncoder, HeteroPrediction, LossConfig};
use petphys::{Image, Projector, ProjectorGeometry, Rng};

fn main() -> petphys::Result<()> {
    let n = 8;
    let mut rng = Rng::new(5);
    let mut img = |lo: f64, hi: f64| Image::from_vec(n, n, 4.0, (0..n * n).map(|_| rng.range(lo, hi)).collect());
    let target = img(0.0, 1.0)?;
    let y = img(0.0, 1.0)?;
    let c = img(0.01, 0.2)?;
    let pred = HeteroPrediction::new(y.clone(), c)?;
    let p = Projector::new(ProjectorGeometry::standard(n, n, 4.0, 12)?)?;
    let cfg = LossConfig::default();

    println!("loss_u            {:>12.4}", loss_u(&pred, &target, cfg.epsilon)?.value);
    println!("loss_su           {:>12.4}", loss_su(&pred, &target, &p, &cfg)?.value);
    println!("loss_mse          {:>12.6}", loss_mse(&y, &target)?.0);
    println!("loss_sinogram_mse {:>12.6}", loss_sinogram_mse(&y, &target, &p)?.0);
    println!("loss_manifold     {:>12.6}", loss_manifold(&y, &target, &AvgPoolEncoder::default())?.0);

    // Single voxel: r²/(c+ε) + ln(c+ε) is minimized at c = r² − ε.
    let r: f64 = 0.3;
    let best = (1..20000)
        .map(|k| k as f64 * 1e-5)
        .min_by(|a, b| {
            let f = |c: f64| r * r / (c + cfg.epsilon) + (c + cfg.epsilon).ln();
            f(*a).total_cmp(&f(*b))
        })
        .unwrap();
    println!("\ngrid optimum c = {best:.5}, r² − ε = {:.5}", r * r - cfg.epsilon);

    let g = loss_u(&pred, &target, cfg.epsilon)?;
    let h = 1e-6;
    let k = 17;
    let shifted = |d: f64| {
        let mut yy = y.clone();
        yy.data_mut()[k] += d;
        loss_u(&HeteroPrediction::new(yy, pred.c_hat.clone()).unwrap(), &target, cfg.epsilon).unwrap().value
    };
    let fd = (shifted(h) - shifted(-h)) / (2.0 * h);
    println!("dL/dy[{k}]: analytic {:.8}, central difference {fd:.8}", g.grad_y.data()[k]);
    Ok(())
}
