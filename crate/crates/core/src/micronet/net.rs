use serde::{Deserialize, Serialize};

use super::layers::*;
use crate::error::{domain, shape, Error, Result};
use crate::losses::HeteroPrediction;
use crate::rng::Rng;
use crate::tensor::{Image, MultimodalStack};

/// Largest magnitude fed to `exp` in the variance head.
pub const LOG_VARIANCE_CLAMP: f64 = 30.0;

const BLOCKS: [&str; 6] = ["enc1", "enc2", "enc3", "dec3", "dec2", "dec1"];
const HEAD_Y_W: usize = 18;
const HEAD_Y_B: usize = 19;
const HEAD_C_W: usize = 20;
const HEAD_C_B: usize = 21;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MicroNetConfig {
    pub in_channels: usize,
    pub widths: [usize; 3],
    /// Channel drop probability after the bottleneck.
    pub dropout_p: f64,
    /// Weight on the old running statistics.
    pub bn_momentum: f64,
    pub bn_eps: f64,
    pub init_seed: u64,
}

impl Default for MicroNetConfig {
    fn default() -> Self {
        MicroNetConfig {
            in_channels: 15,
            widths: [8, 16, 32],
            dropout_p: 1.0 / 32.0,
            bn_momentum: 0.9,
            bn_eps: 1e-5,
            init_seed: 0,
        }
    }
}

impl MicroNetConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.in_channels == 0 {
            errs.push("net.in_channels must be >= 1".to_string());
        }
        if self.widths.contains(&0) {
            errs.push("net.widths must all be >= 1".to_string());
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            errs.push(format!("net.dropout_p must be in [0, 1), got {}", self.dropout_p));
        }
        if !(0.0..1.0).contains(&self.bn_momentum) {
            errs.push("net.bn_momentum must be in [0, 1)".to_string());
        }
        if !(self.bn_eps > 0.0) {
            errs.push("net.bn_eps must be > 0".to_string());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    /// (input, output) channels of each conv block, encoder then decoder.
    fn block_dims(&self) -> [(usize, usize); 6] {
        let [w1, w2, w3] = self.widths;
        [
            (self.in_channels, w1),
            (w1, w2),
            (w2, w3),
            (w3, w2),
            (2 * w2, w1),
            (2 * w1, w1),
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    /// Whether ℓ2 weight decay applies.
    pub decay: bool,
}

/// Per-parameter gradients, aligned with [`MicroNet::params`].
pub type Grads = Vec<Vec<f64>>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with the batch's own statistics (training).
    Batch,
    /// Normalize with the running averages (inference).
    Running,
}

/// Bottleneck dropout for a single forward pass.
pub enum Dropout<'a> {
    Off,
    /// Keep flags, one per bottleneck channel.
    Mask(&'a [bool]),
    Sample(&'a mut Rng),
}

#[derive(Clone, Debug, PartialEq)]
pub struct MicroNet {
    config: MicroNetConfig,
    params: Vec<Param>,
    running: Vec<BnStats>,
}

struct BlockCache {
    input: Tensor4,
    bn: BnCache,
    out: Tensor4,
}

/// Everything the backward pass needs from a forward pass.
pub struct ForwardPass {
    blocks: Vec<BlockCache>,
    /// Per-sample channel factors applied after the bottleneck.
    drop_scale: Option<Vec<Vec<f64>>>,
    z_c: Tensor4,
    pub y: Tensor4,
    pub c: Tensor4,
    pub batch_stats: Vec<BnStats>,
    bn_mode: BnMode,
}

impl ForwardPass {
    /// On/off state of every ReLU and of the variance clamp. Finite
    /// differences are only valid when this is unchanged across the stencil.
    pub fn activation_pattern(&self) -> Vec<bool> {
        let relus = self.blocks.iter().flat_map(|b| b.out.data.iter()).chain(&self.y.data).map(|&v| v > 0.0);
        let clamp = self.z_c.data.iter().map(|z| z.abs() < LOG_VARIANCE_CLAMP);
        relus.chain(clamp).collect()
    }
}

impl MicroNet {
    /// He-uniform conv weights from `config.init_seed`; unit BN scale.
    pub fn new(config: MicroNetConfig) -> Result<Self> {
        config.validate()?;
        let root = Rng::new(config.init_seed);
        let he = |name: String, shape: Vec<usize>, fan_in: usize, id: usize| {
            let mut rng = root.fork(id as u64);
            let bound = (6.0 / fan_in as f64).sqrt();
            let len = shape.iter().product();
            Param {
                name,
                shape,
                data: (0..len).map(|_| rng.range(-bound, bound)).collect(),
                decay: true,
            }
        };
        let fixed = |name: String, len: usize, v: f64| Param {
            name,
            shape: vec![len],
            data: vec![v; len],
            decay: false,
        };
        let mut params = Vec::new();
        for (b, &(ci, co)) in config.block_dims().iter().enumerate() {
            params.push(he(format!("{}.conv", BLOCKS[b]), vec![co, ci, 3, 3], ci * 9, b));
            params.push(fixed(format!("{}.bn_gamma", BLOCKS[b]), co, 1.0));
            params.push(fixed(format!("{}.bn_beta", BLOCKS[b]), co, 0.0));
        }
        let w1 = config.widths[0];
        // The mean head starts constant and positive: a He-scaled start leaves
        // many voxels below the ReLU kink, where they never receive gradient.
        params.push(Param {
            name: "head_y.conv".into(),
            shape: vec![1, w1, 1, 1],
            data: vec![0.0; w1],
            decay: true,
        });
        params.push(fixed("head_y.bias".into(), 1, 0.5));
        params.push(he("head_c.conv".into(), vec![1, w1, 1, 1], w1, 7));
        params.push(fixed("head_c.bias".into(), 1, 0.0));
        let running = config
            .block_dims()
            .iter()
            .map(|&(_, co)| BnStats {
                mean: vec![0.0; co],
                var: vec![1.0; co],
            })
            .collect();
        Ok(MicroNet {
            config,
            params,
            running,
        })
    }

    /// Rebuilds a network from stored tensors, checking every shape.
    pub fn from_parts(config: MicroNetConfig, params: Vec<Param>, running: Vec<BnStats>) -> Result<Self> {
        let template = MicroNet::new(config.clone())?;
        if params.len() != template.params.len() || running.len() != template.running.len() {
            return Err(shape("parameter list does not match the network config"));
        }
        for (p, t) in params.iter().zip(&template.params) {
            if p.name != t.name || p.shape != t.shape || p.data.len() != t.data.len() {
                return Err(shape(format!("parameter {} does not match {} {:?}", p.name, t.name, t.shape)));
            }
        }
        for (r, t) in running.iter().zip(&template.running) {
            if r.mean.len() != t.mean.len() || r.var.len() != t.var.len() {
                return Err(shape("running statistics do not match the network config"));
            }
        }
        Ok(MicroNet {
            config,
            params,
            running,
        })
    }

    pub fn config(&self) -> &MicroNetConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn running_stats(&self) -> &[BnStats] {
        &self.running
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn bottleneck_channels(&self) -> usize {
        self.config.widths[2]
    }

    /// Folds batch statistics into the running averages.
    pub fn update_running_stats(&mut self, batch: &[BnStats]) {
        let m = self.config.bn_momentum;
        for (r, b) in self.running.iter_mut().zip(batch) {
            for (x, y) in r.mean.iter_mut().zip(&b.mean) {
                *x = m * *x + (1.0 - m) * y;
            }
            for (x, y) in r.var.iter_mut().zip(&b.var) {
                *x = m * *x + (1.0 - m) * y;
            }
        }
    }

    /// Draws keep flags for the bottleneck channels.
    pub fn sample_mask(&self, rng: &mut Rng) -> Vec<bool> {
        let p = self.config.dropout_p;
        (0..self.bottleneck_channels()).map(|_| !rng.bernoulli(p)).collect()
    }

    /// Inverted-dropout factors for keep flags: `1/(1−p)` or 0.
    pub fn mask_scale(&self, keep: &[bool]) -> Result<Vec<f64>> {
        if keep.len() != self.bottleneck_channels() {
            return Err(shape(format!(
                "dropout mask has {} entries, bottleneck has {} channels",
                keep.len(),
                self.bottleneck_channels()
            )));
        }
        let s = 1.0 / (1.0 - self.config.dropout_p);
        Ok(keep.iter().map(|&k| if k { s } else { 0.0 }).collect())
    }

    pub fn check_input(&self, x: &Tensor4) -> Result<()> {
        if x.c != self.config.in_channels {
            return Err(shape(format!(
                "input has {} channels, network expects {}",
                x.c, self.config.in_channels
            )));
        }
        if x.h % 4 != 0 || x.w % 4 != 0 || x.h == 0 || x.w == 0 {
            return Err(shape(format!("input size {}x{} must be a positive multiple of 4", x.w, x.h)));
        }
        Ok(())
    }

    fn block_forward(&self, b: usize, input: Tensor4, mode: BnMode) -> (BlockCache, BnStats) {
        let co = self.config.block_dims()[b].1;
        let conv = conv_forward(&input, &self.params[3 * b].data, None, co, 3);
        let stats = match mode {
            BnMode::Batch => None,
            BnMode::Running => Some(&self.running[b]),
        };
        let (normed, bn, batch) = bn_forward(
            &conv,
            &self.params[3 * b + 1].data,
            &self.params[3 * b + 2].data,
            self.config.bn_eps,
            stats,
        );
        (
            BlockCache {
                input,
                bn,
                out: relu(&normed),
            },
            batch,
        )
    }

    /// Batched forward pass. `drop_scale[n][c]` multiplies bottleneck
    /// channel `c` of sample `n`; `None` disables dropout.
    pub fn forward_batch(&self, x: &Tensor4, mode: BnMode, drop_scale: Option<Vec<Vec<f64>>>) -> Result<ForwardPass> {
        self.check_input(x)?;
        if let Some(s) = &drop_scale {
            if s.len() != x.n || s.iter().any(|v| v.len() != self.bottleneck_channels()) {
                return Err(shape("dropout factors must be one per sample and bottleneck channel"));
            }
        }
        let mut blocks = Vec::with_capacity(6);
        let mut stats = Vec::with_capacity(6);
        let mut run = |b: usize, input: Tensor4, blocks: &mut Vec<BlockCache>| {
            let (cache, s) = self.block_forward(b, input, mode);
            stats.push(s);
            blocks.push(cache);
        };
        run(0, x.clone(), &mut blocks);
        run(1, avg_pool2(&blocks[0].out), &mut blocks);
        run(2, avg_pool2(&blocks[1].out), &mut blocks);
        let bottleneck = match &drop_scale {
            Some(s) => scale_channels(&blocks[2].out, s),
            None => blocks[2].out.clone(),
        };
        run(3, bottleneck, &mut blocks);
        run(4, concat(&upsample2(&blocks[3].out), &blocks[1].out), &mut blocks);
        run(5, concat(&upsample2(&blocks[4].out), &blocks[0].out), &mut blocks);

        let feat = &blocks[5].out;
        let z_y = conv_forward(feat, &self.params[HEAD_Y_W].data, Some(&self.params[HEAD_Y_B].data), 1, 1);
        let z_c = conv_forward(feat, &self.params[HEAD_C_W].data, Some(&self.params[HEAD_C_B].data), 1, 1);
        let y = relu(&z_y);
        let c = z_c.map(|v| v.clamp(-LOG_VARIANCE_CLAMP, LOG_VARIANCE_CLAMP).exp());
        Ok(ForwardPass {
            blocks,
            drop_scale,
            z_c,
            y,
            c,
            batch_stats: stats,
            bn_mode: mode,
        })
    }

    fn block_backward(&self, b: usize, pass: &ForwardPass, grad_out: &Tensor4, grads: &mut Grads) -> Tensor4 {
        let cache = &pass.blocks[b];
        let g = relu_backward(grad_out, &cache.out);
        let gamma = &self.params[3 * b + 1].data;
        let (g_conv, gg, gb) = match pass.bn_mode {
            BnMode::Batch => bn_backward(&g, &cache.bn, gamma),
            BnMode::Running => {
                // Fixed statistics: the normalization is affine per channel.
                let mut gi = g.clone();
                let mut gg = vec![0.0; g.c];
                let mut gb = vec![0.0; g.c];
                for s in 0..g.n {
                    for c in 0..g.c {
                        let f = gamma[c] * cache.bn.inv_std[c];
                        for (v, xh) in gi.plane_mut(s, c).iter_mut().zip(cache.bn.xhat.plane(s, c)) {
                            gg[c] += *v * xh;
                            gb[c] += *v;
                            *v *= f;
                        }
                    }
                }
                (gi, gg, gb)
            }
        };
        let conv = conv_backward(&cache.input, &self.params[3 * b].data, &g_conv, false, 3);
        grads[3 * b] = conv.weight;
        grads[3 * b + 1] = gg;
        grads[3 * b + 2] = gb;
        conv.input
    }

    /// Gradients of a loss with respect to every parameter, given its
    /// gradients with respect to the two head outputs.
    pub fn backward(&self, pass: &ForwardPass, grad_y: &Tensor4, grad_c: &Tensor4) -> Result<Grads> {
        if grad_y.data.len() != pass.y.data.len() || grad_c.data.len() != pass.c.data.len() {
            return Err(shape("output gradients do not match the forward pass"));
        }
        let mut grads: Grads = self.params.iter().map(|p| vec![0.0; p.data.len()]).collect();
        let feat = &pass.blocks[5].out;

        let gz_y = relu_backward(grad_y, &pass.y);
        let mut gz_c = grad_c.clone();
        for ((g, &c), &z) in gz_c.data.iter_mut().zip(&pass.c.data).zip(&pass.z_c.data) {
            *g = if z.abs() < LOG_VARIANCE_CLAMP { *g * c } else { 0.0 };
        }
        let hy = conv_backward(feat, &self.params[HEAD_Y_W].data, &gz_y, true, 1);
        let hc = conv_backward(feat, &self.params[HEAD_C_W].data, &gz_c, true, 1);
        grads[HEAD_Y_W] = hy.weight;
        grads[HEAD_Y_B] = hy.bias.unwrap_or_default();
        grads[HEAD_C_W] = hc.weight;
        grads[HEAD_C_B] = hc.bias.unwrap_or_default();
        let mut g = hy.input;
        g.data.iter_mut().zip(&hc.input.data).for_each(|(a, b)| *a += b);

        let [w1, w2, _] = self.config.widths;
        let g5 = self.block_backward(5, pass, &g, &mut grads);
        let (g_up5, g_skip1) = split(&g5, w1);
        let g4 = self.block_backward(4, pass, &upsample2_backward(&g_up5), &mut grads);
        let (g_up4, g_skip2) = split(&g4, w2);
        let mut g3 = self.block_backward(3, pass, &upsample2_backward(&g_up4), &mut grads);
        if let Some(s) = &pass.drop_scale {
            g3 = scale_channels(&g3, s);
        }
        let g2 = self.block_backward(2, pass, &g3, &mut grads);
        let mut ga2 = avg_pool2_backward(&g2);
        ga2.data.iter_mut().zip(&g_skip2.data).for_each(|(a, b)| *a += b);
        let g1 = self.block_backward(1, pass, &ga2, &mut grads);
        let mut ga1 = avg_pool2_backward(&g1);
        ga1.data.iter_mut().zip(&g_skip1.data).for_each(|(a, b)| *a += b);
        self.block_backward(0, pass, &ga1, &mut grads);
        Ok(grads)
    }

    /// Inference on one stack with running BN statistics.
    pub fn predict(&self, input: &MultimodalStack, dropout: Dropout<'_>) -> Result<HeteroPrediction> {
        let x = stack_to_tensor(input);
        let scale = match dropout {
            Dropout::Off => None,
            Dropout::Mask(keep) => Some(vec![self.mask_scale(keep)?]),
            Dropout::Sample(rng) => {
                let keep = self.sample_mask(rng);
                Some(vec![self.mask_scale(&keep)?])
            }
        };
        let pass = self.forward_batch(&x, BnMode::Running, scale)?;
        let (w, h, vs) = (input.width(), input.height(), input.voxel_size());
        HeteroPrediction::new(
            Image::from_vec(w, h, vs, pass.y.data)?,
            Image::from_vec(w, h, vs, pass.c.data)?,
        )
    }

    /// Bottleneck activations (after dropout) for one input, used to check
    /// the dropout expectation.
    pub fn bottleneck(&self, input: &MultimodalStack, keep: Option<&[bool]>) -> Result<Vec<f64>> {
        let x = stack_to_tensor(input);
        let scale = keep.map(|k| self.mask_scale(k).map(|s| vec![s])).transpose()?;
        let pass = self.forward_batch(&x, BnMode::Running, scale.clone())?;
        let out = &pass.blocks[2].out;
        Ok(match scale {
            Some(s) => scale_channels(out, &s).data,
            None => out.data.clone(),
        })
    }
}

pub fn stack_to_tensor(stack: &MultimodalStack) -> Tensor4 {
    let data = stack.channels().iter().flat_map(|c| c.image.data().iter().copied()).collect();
    Tensor4 {
        n: 1,
        c: stack.num_channels(),
        h: stack.height(),
        w: stack.width(),
        data,
    }
}

/// Single-channel plane `n` of a head output as an image.
pub fn plane_image(t: &Tensor4, n: usize, voxel_size: f64) -> Result<Image> {
    if t.c != 1 {
        return Err(domain("expected a single-channel tensor"));
    }
    Image::from_vec(t.w, t.h, voxel_size, t.plane(n, 0).to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Channel, Modality};

    fn stack(n: usize, channels: usize, rng: &mut Rng) -> MultimodalStack {
        let chans = (0..channels)
            .map(|i| Channel {
                modality: Modality::Pet,
                offset: i as i32,
                image: Image::from_vec(n, n, 2.0, (0..n * n).map(|_| rng.uniform()).collect()).unwrap(),
            })
            .collect();
        MultimodalStack::new(vec![Modality::Pet], (0..channels as i32).collect(), chans).unwrap()
    }

    #[test]
    fn output_shapes_and_positivity() {
        let net = MicroNet::new(MicroNetConfig {
            in_channels: 3,
            ..Default::default()
        })
        .unwrap();
        let mut rng = Rng::new(1);
        for _ in 0..3 {
            let x = stack(16, 3, &mut rng);
            let p = net.predict(&x, Dropout::Sample(&mut rng)).unwrap();
            assert_eq!((p.y_hat.width(), p.y_hat.height()), (16, 16));
            assert!(p.c_hat.min() > 0.0);
            assert!(p.y_hat.min() >= 0.0);
        }
    }

    #[test]
    fn channel_mismatch_is_shape_error() {
        let net = MicroNet::new(MicroNetConfig::default()).unwrap();
        let x = stack(16, 3, &mut Rng::new(2));
        assert!(matches!(net.predict(&x, Dropout::Off), Err(Error::Shape(_))));
        let net3 = MicroNet::new(MicroNetConfig {
            in_channels: 3,
            ..Default::default()
        })
        .unwrap();
        assert!(matches!(net3.predict(&x, Dropout::Mask(&[true; 5])), Err(Error::Shape(_))));
    }

    #[test]
    fn all_keep_mask_at_zero_p_is_identity() {
        let net = MicroNet::new(MicroNetConfig {
            in_channels: 3,
            dropout_p: 0.0,
            ..Default::default()
        })
        .unwrap();
        let x = stack(16, 3, &mut Rng::new(3));
        let a = net.predict(&x, Dropout::Off).unwrap();
        let b = net.predict(&x, Dropout::Mask(&[true; 32])).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn parameter_count_is_stable() {
        let cfg = MicroNetConfig::default();
        let a = MicroNet::new(cfg.clone()).unwrap();
        let b = MicroNet::new(cfg).unwrap();
        assert_eq!(a.num_params(), b.num_params());
        let convs = 15 * 8 * 9 + 8 * 16 * 9 + 16 * 32 * 9 + 32 * 16 * 9 + 32 * 8 * 9 + 16 * 8 * 9;
        let bn = 2 * (8 + 16 + 32 + 16 + 8 + 8);
        assert_eq!(a.num_params(), convs + bn + 2 * (8 + 1));
    }

    #[test]
    fn dropped_channel_is_zero_and_survivors_scaled() {
        let net = MicroNet::new(MicroNetConfig {
            in_channels: 3,
            dropout_p: 0.25,
            ..Default::default()
        })
        .unwrap();
        let x = stack(16, 3, &mut Rng::new(4));
        let mut keep = vec![true; 32];
        keep[5] = false;
        let plain = net.bottleneck(&x, None).unwrap();
        let masked = net.bottleneck(&x, Some(&keep)).unwrap();
        let p = 16; // 4x4 bottleneck plane
        for c in 0..32 {
            for i in 0..p {
                let want = if c == 5 { 0.0 } else { plain[c * p + i] / 0.75 };
                assert!((masked[c * p + i] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn inverted_dropout_is_unbiased() {
        let net = MicroNet::new(MicroNetConfig {
            in_channels: 3,
            ..Default::default()
        })
        .unwrap();
        let x = stack(16, 3, &mut Rng::new(6));
        let plain = net.bottleneck(&x, None).unwrap();
        let mut rng = Rng::new(7);
        let mut acc = vec![0.0; plain.len()];
        let passes = 10_000;
        for _ in 0..passes {
            let keep = net.sample_mask(&mut rng);
            for (a, v) in acc.iter_mut().zip(net.bottleneck(&x, Some(&keep)).unwrap()) {
                *a += v;
            }
        }
        let plane = plain.len() / 32;
        for c in 0..32 {
            let want: f64 = plain[c * plane..(c + 1) * plane].iter().sum();
            let got: f64 = acc[c * plane..(c + 1) * plane].iter().sum::<f64>() / passes as f64;
            if want > 1e-9 {
                assert!((got - want).abs() <= 0.02 * want, "channel {c}: {got} vs {want}");
            }
        }
    }
}
