use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::layers::{BnStats, Tensor4};
use super::net::{plane_image, stack_to_tensor, BnMode, Dropout, ForwardPass, Grads, MicroNet};
use super::optim::{cosine_lr, Adam, AdamConfig};
use crate::error::{domain, Error, Result};
use crate::losses::{
    loss_manifold, loss_mse, loss_sinogram_mse, loss_su, loss_u, AvgPoolEncoder, HeteroPrediction, LossConfig,
    LossGrad,
};
use crate::metrics::{psnr, ssim};
use crate::projector::Projector;
use crate::rng::Rng;
use crate::tensor::{Image, MultimodalStack};

/// Training objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LossMode {
    /// Image-domain heteroscedastic NLL.
    #[serde(rename = "U")]
    U,
    /// Image plus sinogram heteroscedastic NLL.
    #[serde(rename = "SU")]
    Su,
    #[serde(rename = "MSE")]
    Mse,
    /// MSE plus sinogram-domain MSE.
    #[serde(rename = "MSE+S")]
    MseS,
    /// MSE plus encoding (feature-space) loss.
    #[serde(rename = "MSE+E")]
    MseE,
}

impl LossMode {
    pub const ALL: [LossMode; 5] = [LossMode::U, LossMode::Su, LossMode::Mse, LossMode::MseS, LossMode::MseE];

    pub fn as_str(self) -> &'static str {
        match self {
            LossMode::U => "U",
            LossMode::Su => "SU",
            LossMode::Mse => "MSE",
            LossMode::MseS => "MSE+S",
            LossMode::MseE => "MSE+E",
        }
    }

    pub fn needs_projector(self) -> bool {
        matches!(self, LossMode::Su | LossMode::MseS)
    }
}

impl fmt::Display for LossMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossMode::ALL
            .into_iter()
            .find(|m| m.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(vec![format!("unknown loss mode {s:?} (expected U, SU, MSE, MSE+S, MSE+E)")]))
    }
}

/// Value and output gradients of `mode` for one prediction.
pub fn objective(
    mode: LossMode,
    pred: &HeteroPrediction,
    target: &Image,
    cfg: &LossConfig,
    projector: Option<&Projector>,
) -> Result<LossGrad> {
    let proj = || projector.ok_or_else(|| Error::Config(vec![format!("loss mode {mode} needs a projector")]));
    let mean_only = |value: f64, grad_y: Image| LossGrad {
        value,
        grad_c: grad_y.zeros_like(),
        grad_y,
    };
    match mode {
        LossMode::U => loss_u(pred, target, cfg.epsilon),
        LossMode::Su => loss_su(pred, target, proj()?, cfg),
        LossMode::Mse => {
            let (v, g) = loss_mse(&pred.y_hat, target)?;
            Ok(mean_only(v, g))
        }
        LossMode::MseS => {
            let (v, mut g) = loss_mse(&pred.y_hat, target)?;
            let (vs, gs) = loss_sinogram_mse(&pred.y_hat, target, proj()?)?;
            g.data_mut().iter_mut().zip(gs.data()).for_each(|(a, b)| *a += cfg.lambda_s_mse * b);
            Ok(mean_only(v + cfg.lambda_s_mse * vs, g))
        }
        LossMode::MseE => {
            let (v, mut g) = loss_mse(&pred.y_hat, target)?;
            let (ve, ge) = loss_manifold(&pred.y_hat, target, &AvgPoolEncoder::default())?;
            g.data_mut().iter_mut().zip(ge.data()).for_each(|(a, b)| *a += cfg.lambda_e * b);
            Ok(mean_only(v + cfg.lambda_e * ve, g))
        }
    }
}

/// One training pair: network input and the standard-dose target.
#[derive(Clone, Debug)]
pub struct Sample {
    pub input: MultimodalStack,
    pub target: Image,
}

/// Mean objective over a batch with its output gradients, keeping the
/// forward pass for backpropagation.
pub(crate) fn batch_objective(
    net: &MicroNet,
    samples: &[&Sample],
    mode: LossMode,
    loss: &LossConfig,
    projector: Option<&Projector>,
    bn: BnMode,
    drop_scale: Option<Vec<Vec<f64>>>,
) -> Result<(f64, Tensor4, Tensor4, ForwardPass)> {
    let inputs: Vec<Tensor4> = samples.iter().map(|s| stack_to_tensor(&s.input)).collect();
    let x = Tensor4::stack(&inputs)?;
    let pass = net.forward_batch(&x, bn, drop_scale)?;
    let n = samples.len();
    let vs = samples[0].input.voxel_size();
    let per: Vec<LossGrad> = (0..n)
        .into_par_iter()
        .map(|i| {
            let pred = HeteroPrediction::new(plane_image(&pass.y, i, vs)?, plane_image(&pass.c, i, vs)?)?;
            objective(mode, &pred, &samples[i].target, loss, projector)
        })
        .collect::<Result<_>>()?;
    let inv = 1.0 / n as f64;
    let mut gy = Tensor4::zeros(n, 1, x.h, x.w);
    let mut gc = Tensor4::zeros(n, 1, x.h, x.w);
    let mut value = 0.0;
    for (i, lg) in per.iter().enumerate() {
        value += inv * lg.value;
        gy.plane_mut(i, 0).iter_mut().zip(lg.grad_y.data()).for_each(|(a, b)| *a = inv * b);
        gc.plane_mut(i, 0).iter_mut().zip(lg.grad_c.data()).for_each(|(a, b)| *a = inv * b);
    }
    Ok((value, gy, gc, pass))
}

/// Mean objective over a batch and its parameter gradients.
pub fn batch_loss_and_grad(
    net: &MicroNet,
    samples: &[&Sample],
    mode: LossMode,
    loss: &LossConfig,
    projector: Option<&Projector>,
    bn: BnMode,
    drop_scale: Option<Vec<Vec<f64>>>,
) -> Result<(f64, Grads, Vec<BnStats>)> {
    let (value, gy, gc, pass) = batch_objective(net, samples, mode, loss, projector, bn, drop_scale)?;
    let grads = net.backward(&pass, &gy, &gc)?;
    Ok((value, grads, pass.batch_stats))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr_init: f64,
    /// ℓ2 coefficient on conv weights.
    pub weight_decay: f64,
    pub batch_size: usize,
    pub loss_mode: LossMode,
    pub seed: u64,
    pub cosine_annealing: bool,
    pub loss: LossConfig,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 40,
            lr_init: 2e-3,
            weight_decay: 1e-5,
            batch_size: 4,
            loss_mode: LossMode::Su,
            seed: 0,
            cosine_annealing: true,
            loss: LossConfig::default(),
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    /// The long schedule: 500 epochs from a learning rate of 3e-5.
    pub fn full_protocol() -> Self {
        TrainConfig {
            epochs: 500,
            lr_init: 3e-5,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.epochs == 0 {
            errs.push("train.epochs must be >= 1".to_string());
        }
        if !(self.lr_init > 0.0 && self.lr_init.is_finite()) {
            errs.push(format!("train.lr_init must be > 0, got {}", self.lr_init));
        }
        if !(self.weight_decay >= 0.0) {
            errs.push("train.weight_decay must be >= 0".to_string());
        }
        if self.batch_size == 0 {
            errs.push("train.batch_size must be >= 1".to_string());
        }
        if let Err(Error::Config(more)) = self.loss.validate() {
            errs.extend(more);
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        if self.cosine_annealing {
            cosine_lr(self.lr_init, epoch, self.epochs)
        } else {
            self.lr_init
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_psnr: f64,
    pub val_ssim: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best validation SSIM.
    pub net: MicroNet,
    pub best_epoch: usize,
    pub log: Vec<EpochLog>,
}

/// Deterministic mini-batch training with validation-SSIM model selection.
pub fn train(
    train_set: &[Sample],
    val_set: &[Sample],
    init: MicroNet,
    cfg: &TrainConfig,
    projector: Option<&Projector>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(domain("training needs nonempty train and validation sets"));
    }
    if cfg.loss_mode.needs_projector() && projector.is_none() {
        return Err(Error::Config(vec![format!("loss mode {} needs a projector", cfg.loss_mode)]));
    }
    let mut net = init;
    let mut opt = Adam::new(net.params(), cfg.adam, cfg.weight_decay);
    let root = Rng::new(cfg.seed);
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, MicroNet)> = None;
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let mut rng = root.fork(epoch as u64);
        let order = permutation(train_set.len(), &mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let scale = batch
                .iter()
                .map(|_| {
                    let keep = net.sample_mask(&mut rng);
                    net.mask_scale(&keep)
                })
                .collect::<Result<Vec<_>>>()?;
            let (value, grads, stats) =
                batch_loss_and_grad(&net, &batch, cfg.loss_mode, &cfg.loss, projector, BnMode::Batch, Some(scale))
                    .map_err(|e| diverged(epoch, e))?;
            if !value.is_finite() || grads.iter().flatten().any(|g| !g.is_finite()) {
                return Err(Error::Training {
                    epoch,
                    reason: format!("non-finite loss {value}"),
                });
            }
            total += value * batch.len() as f64;
            net.update_running_stats(&stats);
            opt.update(net.params_mut(), &grads, lr);
        }
        let train_loss = total / train_set.len() as f64;
        let (val_loss, val_psnr, val_ssim) = validate(&net, val_set, cfg, projector).map_err(|e| diverged(epoch, e))?;
        log::debug!(
            "epoch {epoch}: lr {lr:.3e} train {train_loss:.5} val {val_loss:.5} psnr {val_psnr:.2} ssim {val_ssim:.4}"
        );
        log.push(EpochLog {
            epoch,
            lr,
            train_loss,
            val_loss,
            val_psnr,
            val_ssim,
        });
        if best.as_ref().map_or(true, |(s, _, _)| val_ssim > *s) {
            best = Some((val_ssim, epoch, net.clone()));
        }
    }
    let (_, best_epoch, net) = best.expect("at least one epoch");
    Ok(TrainOutcome { net, best_epoch, log })
}

fn diverged(epoch: usize, e: Error) -> Error {
    match e {
        Error::Domain(reason) => Error::Training { epoch, reason },
        other => other,
    }
}

/// Mean validation loss, PSNR and SSIM with running statistics and no
/// dropout.
fn validate(net: &MicroNet, val: &[Sample], cfg: &TrainConfig, projector: Option<&Projector>) -> Result<(f64, f64, f64)> {
    let rows = val
        .par_iter()
        .map(|s| {
            let pred = net.predict(&s.input, Dropout::Off)?;
            let l = objective(cfg.loss_mode, &pred, &s.target, &cfg.loss, projector)?.value;
            Ok((l, psnr(&pred.y_hat, &s.target)?, ssim(&pred.y_hat, &s.target)?))
        })
        .collect::<Result<Vec<(f64, f64, f64)>>>()?;
    let n = rows.len() as f64;
    let (a, b, c) = rows
        .iter()
        .fold((0.0, 0.0, 0.0), |acc, r| (acc.0 + r.0, acc.1 + r.1, acc.2 + r.2));
    let out = (a / n, b / n, c / n);
    if !(out.0.is_finite() && out.1.is_finite() && out.2.is_finite()) {
        return Err(domain("non-finite validation metrics"));
    }
    Ok(out)
}

/// Fisher-Yates shuffle of `0..n`.
fn permutation(n: usize, rng: &mut Rng) -> Vec<usize> {
    let mut v: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        v.swap(i, rng.below(i + 1));
    }
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::micronet::MicroNetConfig;
    use crate::tensor::{Channel, Modality};

    fn sample(n: usize, seed: u64) -> Sample {
        let mut rng = Rng::new(seed);
        let target = Image::from_vec(
            n,
            n,
            2.0,
            (0..n * n)
                .map(|i| {
                    let (r, c) = ((i / n) as f64, (i % n) as f64);
                    0.5 + 0.4 * ((r / 3.0).sin() * (c / 4.0).cos())
                })
                .collect(),
        )
        .unwrap();
        let noisy = target.map(|v| (v + 0.05 * rng.normal()).max(0.0));
        let input = MultimodalStack::new(
            vec![Modality::Pet],
            vec![0],
            vec![Channel {
                modality: Modality::Pet,
                offset: 0,
                image: noisy,
            }],
        )
        .unwrap();
        Sample { input, target }
    }

    fn tiny_net() -> MicroNet {
        MicroNet::new(MicroNetConfig {
            in_channels: 1,
            widths: [4, 4, 8],
            dropout_p: 0.0,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn loss_mode_names_round_trip() {
        for m in LossMode::ALL {
            assert_eq!(m.as_str().parse::<LossMode>().unwrap(), m);
            let j = serde_json::to_string(&m).unwrap();
            assert_eq!(serde_json::from_str::<LossMode>(&j).unwrap(), m);
        }
        assert!("MAE".parse::<LossMode>().is_err());
    }

    #[test]
    fn full_protocol_constants() {
        let p = TrainConfig::full_protocol();
        assert_eq!(p.lr_init, 0.00003);
        assert_eq!(p.epochs, 500);
        assert!(p.lr_at(499) < 1e-3 * p.lr_init);
    }

    #[test]
    fn validation_lists_every_bad_key() {
        let cfg = TrainConfig {
            epochs: 0,
            lr_init: -1.0,
            batch_size: 0,
            ..Default::default()
        };
        match cfg.validate() {
            Err(Error::Config(errs)) => assert_eq!(errs.len(), 3, "{errs:?}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn zero_residual_mse_has_zero_gradients() {
        let net = tiny_net();
        let s = sample(16, 1);
        let pred = net.predict(&s.input, Dropout::Off).unwrap();
        // Relabel the target as the network's own output.
        let fixed = Sample {
            input: s.input.clone(),
            target: pred.y_hat.clone(),
        };
        let (v, grads, _) = batch_loss_and_grad(
            &net,
            &[&fixed],
            LossMode::Mse,
            &LossConfig::default(),
            None,
            BnMode::Running,
            None,
        )
        .unwrap();
        assert_eq!(v, 0.0);
        assert!(grads.iter().flatten().all(|&g| g == 0.0));
    }

    #[test]
    fn overfits_a_single_sample() {
        let s = sample(16, 2);
        let net = MicroNet::new(MicroNetConfig {
            in_channels: 1,
            dropout_p: 0.0,
            ..Default::default()
        })
        .unwrap();
        let cfg = TrainConfig {
            epochs: 300,
            lr_init: 1e-2,
            batch_size: 1,
            loss_mode: LossMode::Mse,
            ..Default::default()
        };
        let out = train(std::slice::from_ref(&s), std::slice::from_ref(&s), net, &cfg, None).unwrap();
        let first = out.log[0].train_loss;
        let last = out.log.last().unwrap().train_loss;
        assert!(last < 1e-3 * first, "{first} -> {last}");
    }

    #[test]
    fn training_is_deterministic() {
        let data: Vec<Sample> = (0..3).map(|i| sample(16, 10 + i)).collect();
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 2,
            loss_mode: LossMode::U,
            seed: 5,
            ..Default::default()
        };
        let a = train(&data[..2], &data[2..], tiny_net(), &cfg, None).unwrap();
        let b = train(&data[..2], &data[2..], tiny_net(), &cfg, None).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.net, b.net);
    }

    #[test]
    fn divergence_names_the_epoch() {
        let s = sample(16, 3);
        let cfg = TrainConfig {
            epochs: 5,
            lr_init: 1e300,
            batch_size: 1,
            loss_mode: LossMode::U,
            cosine_annealing: false,
            ..Default::default()
        };
        match train(std::slice::from_ref(&s), std::slice::from_ref(&s), tiny_net(), &cfg, None) {
            Err(Error::Training { epoch, .. }) => assert!(epoch < 5),
            other => panic!("expected divergence, got {:?}", other.map(|o| o.log)),
        }
    }

    #[test]
    fn sinogram_weight_enters_gradients_linearly() {
        use crate::projector::ProjectorGeometry;
        let s = sample(16, 4);
        let net = tiny_net();
        let p = Projector::new(ProjectorGeometry::standard(16, 16, 2.0, 10).unwrap()).unwrap();
        let grads = |lambda_s: f64| {
            let loss = LossConfig {
                lambda_s,
                ..Default::default()
            };
            batch_loss_and_grad(&net, &[&s], LossMode::Su, &loss, Some(&p), BnMode::Batch, None).unwrap().1
        };
        let (g0, g1, g2) = (grads(0.0), grads(0.003), grads(0.006));
        for ((a, b), c) in g0.iter().flatten().zip(g1.iter().flatten()).zip(g2.iter().flatten()) {
            let (d1, d2) = (b - a, c - a);
            assert!((d2 - 2.0 * d1).abs() <= 1e-9 * (1.0 + d2.abs()), "{d1} {d2}");
        }
    }
}
