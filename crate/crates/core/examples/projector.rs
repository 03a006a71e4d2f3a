//! Siddon projector: the adjoint identity on random pairs and the chord
//! length profile of a uniform disk against 2·sqrt(r² − s²).

use petphys::{Image, Projector, ProjectorGeometry, Rng, Sinogram};

fn main() -> petphys::Result<()> {
    let (n, voxel) = (128, 2.0);
    let p = Projector::new(ProjectorGeometry::standard(n, n, voxel, 180)?)?;
    let g = p.geometry().clone();
    println!("{} angles x {} bins, {} nonzeros", g.num_angles, g.num_bins, p.nnz());

    let mut rng = Rng::new(1);
    for _ in 0..3 {
        let x = Image::from_vec(n, n, voxel, (0..n * n).map(|_| rng.uniform()).collect())?;
        let y = Sinogram::from_vec(g.num_angles, g.num_bins, g.bin_size, (0..g.num_angles * g.num_bins).map(|_| rng.uniform()).collect())?;
        let sx = p.forward(&x)?;
        let lhs = sx.dot(&y);
        let rhs = x.dot(&p.adjoint(&y)?);
        let norm = sx.dot(&sx).sqrt() * y.dot(&y).sqrt();
        println!("<Sx,y> = {lhs:.6e}  <x,S'y> = {rhs:.6e}  rel = {:.2e}", (lhs - rhs).abs() / norm);
    }

    let r = 50.0;
    let c = (n as f64 - 1.0) / 2.0;
    let disk = Image::from_vec(
        n,
        n,
        voxel,
        (0..n * n)
            .map(|i| {
                let (y, x) = ((i / n) as f64 - c, (i % n) as f64 - c);
                if x.hypot(y) * voxel <= r { 1.0 } else { 0.0 }
            })
            .collect(),
    )?;
    let sino = p.forward(&disk)?;
    println!("\n{:>8} {:>10} {:>10}", "s (mm)", "measured", "chord");
    for b in (0..g.num_bins).step_by(12) {
        let s = g.bin_center(b);
        let chord = if s.abs() < r { 2.0 * (r * r - s * s).sqrt() } else { 0.0 };
        println!("{s:>8.1} {:>10.2} {chord:>10.2}", sino.get(0, b).abs());
    }
    Ok(())
}
