//! PVOL round trip: sinograms and multi-channel images with metadata.

use petphys::phantom::{generate, PhantomSpec};
use petphys::volume::{read_volume, sinograms_to_volume, volume_to_sinograms, Metadata, Volume};
use petphys::{Projector, ProjectorGeometry};

fn main() -> petphys::Result<()> {
    let dir = std::env::temp_dir();
    let s = generate(&PhantomSpec {
        size: 64,
        voxel_size: 4.0,
        ..Default::default()
    })?;
    let mut meta = Metadata::new();
    meta.insert("channels".into(), "pet,t1,t2,tissue".into());
    let vol = Volume::new(4, vec![s.pet.clone(), s.t1, s.t2, s.tissue], meta)?;
    let path = dir.join("example.pvol");
    vol.write(&path)?;
    let back = read_volume(&path)?;
    println!("{}: {} slice(s) x {} channels, t2 at index {:?}", path.display(), back.num_slices(), back.num_channels, back.channel_index("t2"));
    let err = back.get(0, 0).data().iter().zip(s.pet.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    println!("PET max abs error after f32 storage: {err:.2e}");

    let geom = ProjectorGeometry::standard(64, 64, 4.0, 90)?;
    let sino = Projector::new(geom.clone())?.forward(&s.pet)?;
    let mut meta = Metadata::new();
    geom.to_metadata(&mut meta);
    let path = dir.join("example_sino.pvol");
    sinograms_to_volume(std::slice::from_ref(&sino), meta)?.write(&path)?;
    let restored = volume_to_sinograms(&read_volume(&path)?)?;
    let err = restored[0].data().iter().zip(sino.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    println!("sinogram {}x{} restored, max abs error {err:.2e}", sino.num_angles(), sino.num_bins());
    println!("geometry from metadata: {:?}", ProjectorGeometry::from_metadata(&read_volume(&path)?.metadata)?);
    Ok(())
}
