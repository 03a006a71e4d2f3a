//! Renders one synthetic brain phantom and prints per-class voxel counts and
//! mean PET uptake. Writes `phantom.pvol` to the directory given as the first
//! argument (default: the system temp dir).

use std::collections::BTreeMap;

use petphys::phantom::{Phantom, PhantomSpec, TissueClass};
use petphys::volume::{Metadata, Volume};

fn main() -> petphys::Result<()> {
    let out = std::env::args().nth(1).map(Into::into).unwrap_or_else(std::env::temp_dir);
    let spec = PhantomSpec {
        num_slices: 5,
        seed: 7,
        ..Default::default()
    };
    let slices = Phantom::new(&spec)?.render()?;

    let mid = &slices[2];
    let mut stats: BTreeMap<TissueClass, (usize, f64)> = BTreeMap::new();
    for (l, p) in mid.tissue.data().iter().zip(mid.pet.data()) {
        if let Some(c) = TissueClass::from_label(*l) {
            let e = stats.entry(c).or_default();
            e.0 += 1;
            e.1 += p;
        }
    }
    println!("{:<12} {:>8} {:>10}", "class", "voxels", "mean PET");
    for (c, (n, sum)) in &stats {
        println!("{:<12} {:>8} {:>10.3}", format!("{c:?}"), n, sum / *n as f64);
    }

    let mut meta = Metadata::new();
    meta.insert("channels".into(), "pet,t1,t2,tissue".into());
    let images = slices.into_iter().flat_map(|s| [s.pet, s.t1, s.t2, s.tissue]).collect();
    let path = std::path::PathBuf::from(out).join("phantom.pvol");
    Volume::new(4, images, meta)?.write(&path)?;
    println!("wrote {}", path.display());
    Ok(())
}
