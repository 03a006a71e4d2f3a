//! Finite-difference validation of every network parameter under each
//! training objective, on a tiny network.

use petphys::losses::LossConfig;
use petphys::micronet::gradcheck::{check_gradients, GradCheckConfig};
use petphys::micronet::{LossMode, MicroNet, MicroNetConfig, Sample};
use petphys::{Channel, Image, Modality, MultimodalStack, Projector, ProjectorGeometry, Rng};

fn sample(rng: &mut Rng) -> petphys::Result<Sample> {
    let mut img = || Image::from_vec(16, 16, 2.0, (0..256).map(|_| rng.uniform()).collect());
    let channels = Modality::ALL
        .iter()
        .map(|&modality| Ok(Channel { modality, offset: 0, image: img()? }))
        .collect::<petphys::Result<Vec<_>>>()?;
    Ok(Sample {
        input: MultimodalStack::new(Modality::ALL.to_vec(), vec![0], channels)?,
        target: img()?,
    })
}

fn main() -> petphys::Result<()> {
    let mut rng = Rng::new(1);
    let (a, b) = (sample(&mut rng)?, sample(&mut rng)?);
    let net = MicroNet::new(MicroNetConfig {
        in_channels: 3,
        widths: [2, 3, 4],
        dropout_p: 0.25,
        ..Default::default()
    })?;
    let projector = Projector::new(ProjectorGeometry::standard(16, 16, 2.0, 12)?)?;
    let scale = vec![net.mask_scale(&[true, true, false, true])?, net.mask_scale(&[false, true, true, true])?];
    println!("{} parameters", net.num_params());
    for mode in LossMode::ALL {
        let r = check_gradients(
            &net,
            &[&a, &b],
            mode,
            &LossConfig::default(),
            Some(&projector),
            Some(scale.clone()),
            GradCheckConfig::default(),
        )?;
        println!(
            "{:<6} checked {:>4}  failures {}  max rel err {:.2e} ({})  kink retries {}",
            mode.as_str(),
            r.checked,
            r.failures,
            r.max_rel_err,
            r.worst,
            r.kink_retries
        );
    }
    Ok(())
}
