//! Noise-predicting diffusion backbones.
//!
//! [`DiffusionBackbone`] is the seam between the guidance engine and any
//! pre-trained model: noise prediction, decoding, and the schedule it was
//! trained with. [`ToyUnet`] is a small pixel-space denoiser trainable on a
//! CPU; [`OracleBackbone`] predicts noise exactly for a single known clean
//! sample; [`LatentAdapter`] puts a fixed decoder behind a latent-space model.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{timestep_embedding, Adam, AdamConfig, Conv, Dense, Params};
use crate::scalar::Scalar;
use crate::schedule::{ScheduleSpec, VarianceSchedule};
use crate::tape::{Tape, Var};
use crate::tensor::{StoredTensor, Tensor};

/// A pre-trained (or analytically exact) noise predictor plus decoder.
///
/// Tape methods take batched `[n, c, h, w]` variables; the convenience
/// methods take a single `c x h x w` tensor. Implementations must be
/// reentrant: generation runs share one instance read-only.
pub trait DiffusionBackbone<S: Scalar>: Send + Sync {
    fn latent_shape(&self) -> [usize; 3];

    fn image_shape(&self) -> [usize; 3];

    fn schedule(&self) -> &VarianceSchedule<S>;

    /// Noise estimate for a batch at per-sample timesteps `ts`.
    ///
    /// `cond` is an opaque conditioning tensor for text-conditional models;
    /// unconditional backbones reject anything but `None`.
    fn predict_noise_on(&self, tape: &mut Tape<S>, z: Var, ts: &[usize], cond: Option<&Tensor<S>>) -> Result<Var>;

    /// Map a clean latent batch to images in the model's native range.
    fn decode_on(&self, tape: &mut Tape<S>, z: Var) -> Result<Var>;

    fn predict_noise(&self, z: &Tensor<S>, t: usize) -> Result<Tensor<S>> {
        self.schedule().check_t(t)?;
        z.check_shape(&self.latent_shape())?;
        let mut tape = Tape::new();
        let zb = tape.constant(batch_of_one(z));
        let out = self.predict_noise_on(&mut tape, zb, &[t], None)?;
        Ok(tape.value(out).index_first(0))
    }

    fn decode(&self, z: &Tensor<S>) -> Result<Tensor<S>> {
        z.check_shape(&self.latent_shape())?;
        let mut tape = Tape::new();
        let zb = tape.constant(batch_of_one(z));
        let out = self.decode_on(&mut tape, zb)?;
        Ok(tape.value(out).index_first(0))
    }
}

pub(crate) fn batch_of_one<S: Scalar>(z: &Tensor<S>) -> Tensor<S> {
    let mut shape = vec![1];
    shape.extend_from_slice(z.shape());
    z.clone().reshape(&shape).expect("same element count")
}

fn check_batch<S: Scalar>(tape: &Tape<S>, z: Var, ts: &[usize], latent: [usize; 3], sched: &VarianceSchedule<S>) -> Result<()> {
    let shape = tape.value(z).shape();
    if shape.len() != 4 || shape[1..] != latent || shape[0] != ts.len() {
        let mut expected = vec![ts.len()];
        expected.extend_from_slice(&latent);
        return Err(Error::Shape { expected, got: shape.to_vec() });
    }
    ts.iter().try_for_each(|&t| sched.check_t(t))
}

/// Clean-sample estimate `(z_t - sqrt(1 - abar_t) * eps_hat) / sqrt(abar_t)`.
pub fn predict_clean<S: Scalar>(
    z_t: &Tensor<S>,
    t: usize,
    eps_hat: &Tensor<S>,
    sched: &VarianceSchedule<S>,
) -> Result<Tensor<S>> {
    let (inv, noise) = clean_coefficients(t, sched)?;
    z_t.same_shape(eps_hat)?;
    let out = z_t.zip_map(eps_hat, |z, e| (z - noise * e) * inv);
    if !out.is_finite() {
        return Err(Error::NonFinite(format!("clean prediction at t={t}")));
    }
    Ok(out)
}

/// Taped version of [`predict_clean`], differentiable in both inputs.
pub fn predict_clean_on<S: Scalar>(
    tape: &mut Tape<S>,
    z_t: Var,
    t: usize,
    eps_hat: Var,
    sched: &VarianceSchedule<S>,
) -> Result<Var> {
    let (inv, noise) = clean_coefficients(t, sched)?;
    let scaled = tape.affine(eps_hat, noise, S::zero());
    let diff = tape.sub(z_t, scaled)?;
    Ok(tape.affine(diff, inv, S::zero()))
}

fn clean_coefficients<S: Scalar>(t: usize, sched: &VarianceSchedule<S>) -> Result<(S, S)> {
    sched.check_t(t)?;
    let ab = sched.alpha_bar(t);
    let root = ab.sqrt();
    let inv = S::one() / root;
    if !(root > S::zero()) || !inv.is_finite() {
        return Err(Error::NonFinite(format!("sqrt(alpha_bar) underflow at t={t}")));
    }
    Ok((inv, (S::one() - ab).sqrt()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyUnetConfig {
    pub image_channels: usize,
    pub image_size: usize,
    /// Channel width of the full-resolution level; the next levels use twice this.
    pub base_channels: usize,
    pub embed_dim: usize,
}

impl Default for ToyUnetConfig {
    fn default() -> Self {
        Self { image_channels: 3, image_size: 32, base_channels: 16, embed_dim: 32 }
    }
}

#[derive(Debug, Clone)]
struct ResBlock {
    conv1: Conv,
    emb: Dense,
    conv2: Conv,
    skip: Option<Conv>,
}

impl ResBlock {
    fn new<S: Scalar, R: Rng + ?Sized>(p: &mut Params<S>, name: &str, cin: usize, cout: usize, edim: usize, rng: &mut R) -> Self {
        Self {
            conv1: Conv::new(p, &format!("{name}.conv1"), cin, cout, 3, rng),
            emb: Dense::new(p, &format!("{name}.emb"), edim, cout, rng),
            conv2: Conv::new(p, &format!("{name}.conv2"), cout, cout, 3, rng),
            skip: (cin != cout).then(|| Conv::new(p, &format!("{name}.skip"), cin, cout, 1, rng)),
        }
    }

    fn forward<S: Scalar>(&self, tape: &mut Tape<S>, p: &crate::nn::Bound, x: Var, emb: Var) -> Result<Var> {
        let a = tape.silu(x);
        let h = self.conv1.forward(tape, p, a)?;
        let e = self.emb.forward(tape, p, emb)?;
        let h = tape.add_channel(h, e)?;
        let h = tape.silu(h);
        let h = self.conv2.forward(tape, p, h)?;
        let skip = match &self.skip {
            Some(c) => c.forward(tape, p, x)?,
            None => x,
        };
        tape.add(h, skip)
    }
}

/// Two-level U-shaped convolutional noise predictor operating in pixel space.
///
/// Latent and image coincide, so `decode` is the identity.
#[derive(Debug, Clone)]
pub struct ToyUnet<S> {
    cfg: ToyUnetConfig,
    schedule: VarianceSchedule<S>,
    params: Params<S>,
    embed1: Dense,
    embed2: Dense,
    conv_in: Conv,
    down1: ResBlock,
    down2: ResBlock,
    mid: ResBlock,
    up2: ResBlock,
    up1: ResBlock,
    conv_out: Conv,
}

impl<S: Scalar> ToyUnet<S> {
    pub fn new(cfg: ToyUnetConfig, schedule: VarianceSchedule<S>, seed: u64) -> Result<Self> {
        if cfg.image_size % 4 != 0 || cfg.image_size == 0 {
            return Err(Error::InvalidArgument(format!("image size {} must be a multiple of 4", cfg.image_size)));
        }
        if cfg.base_channels == 0 || cfg.image_channels == 0 || cfg.embed_dim < 2 {
            return Err(Error::InvalidArgument("channel counts must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Params::default();
        let (c, e) = (cfg.base_channels, cfg.embed_dim);
        let embed1 = Dense::new(&mut p, "time.fc1", e, e, &mut rng);
        let embed2 = Dense::new(&mut p, "time.fc2", e, e, &mut rng);
        let conv_in = Conv::new(&mut p, "conv_in", cfg.image_channels, c, 3, &mut rng);
        let down1 = ResBlock::new(&mut p, "down1", c, c, e, &mut rng);
        let down2 = ResBlock::new(&mut p, "down2", c, 2 * c, e, &mut rng);
        let mid = ResBlock::new(&mut p, "mid", 2 * c, 2 * c, e, &mut rng);
        let up2 = ResBlock::new(&mut p, "up2", 4 * c, 2 * c, e, &mut rng);
        let up1 = ResBlock::new(&mut p, "up1", 3 * c, c, e, &mut rng);
        let conv_out = Conv::zeroed(&mut p, "conv_out", c, cfg.image_channels, 3);
        Ok(Self { cfg, schedule, params: p, embed1, embed2, conv_in, down1, down2, mid, up2, up1, conv_out })
    }

    pub fn config(&self) -> ToyUnetConfig {
        self.cfg
    }

    pub fn params(&self) -> &Params<S> {
        &self.params
    }

    fn forward(&self, tape: &mut Tape<S>, p: &crate::nn::Bound, x: Var, ts: &[usize]) -> Result<Var> {
        let emb = tape.constant(timestep_embedding(ts, self.cfg.embed_dim));
        let emb = self.embed1.forward(tape, p, emb)?;
        let emb = tape.silu(emb);
        let emb = self.embed2.forward(tape, p, emb)?;
        let emb = tape.silu(emb);

        let h0 = self.conv_in.forward(tape, p, x)?;
        let s1 = self.down1.forward(tape, p, h0, emb)?;
        let d1 = tape.avg_pool(s1, 2)?;
        let s2 = self.down2.forward(tape, p, d1, emb)?;
        let d2 = tape.avg_pool(s2, 2)?;
        let m = self.mid.forward(tape, p, d2, emb)?;
        let u2 = tape.upsample(m, 2)?;
        let u2 = tape.concat(u2, s2)?;
        let u2 = self.up2.forward(tape, p, u2, emb)?;
        let u1 = tape.upsample(u2, 2)?;
        let u1 = tape.concat(u1, s1)?;
        let u1 = self.up1.forward(tape, p, u1, emb)?;
        let out = tape.silu(u1);
        self.conv_out.forward(tape, p, out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let ck = UnetCheckpoint {
            format: UNET_FORMAT.into(),
            scalar: S::NAME.into(),
            config: self.cfg,
            schedule: self.schedule.spec(),
            params: self.params.to_stored(),
        };
        std::fs::write(path, serde_json::to_vec(&ck)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck: UnetCheckpoint = serde_json::from_slice(&std::fs::read(path)?)?;
        if ck.format != UNET_FORMAT {
            return Err(Error::Format(format!("{} is not a toy-unet checkpoint", path.display())));
        }
        let mut net = Self::new(ck.config, ck.schedule.build()?, 0)?;
        net.params.load_stored(&ck.params)?;
        Ok(net)
    }
}

const UNET_FORMAT: &str = "featinv.toy-unet.v1";

#[derive(Serialize, Deserialize)]
struct UnetCheckpoint {
    format: String,
    scalar: String,
    config: ToyUnetConfig,
    schedule: ScheduleSpec,
    params: Vec<(String, StoredTensor)>,
}

impl<S: Scalar> DiffusionBackbone<S> for ToyUnet<S> {
    fn latent_shape(&self) -> [usize; 3] {
        [self.cfg.image_channels, self.cfg.image_size, self.cfg.image_size]
    }

    fn image_shape(&self) -> [usize; 3] {
        self.latent_shape()
    }

    fn schedule(&self) -> &VarianceSchedule<S> {
        &self.schedule
    }

    fn predict_noise_on(&self, tape: &mut Tape<S>, z: Var, ts: &[usize], cond: Option<&Tensor<S>>) -> Result<Var> {
        if cond.is_some() {
            return Err(Error::InvalidArgument("toy backbone is unconditional".into()));
        }
        check_batch(tape, z, ts, self.latent_shape(), &self.schedule)?;
        let bound = self.params.bind(tape, false);
        self.forward(tape, &bound, z, ts)
    }

    fn decode_on(&self, tape: &mut Tape<S>, z: Var) -> Result<Var> {
        let shape = tape.value(z).shape();
        if shape.len() != 4 || shape[1..] != self.latent_shape() {
            return Err(Error::Shape { expected: self.latent_shape().to_vec(), got: shape.to_vec() });
        }
        Ok(z)
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BackboneTrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Final learning rate as a fraction of `lr` (cosine decay).
    pub final_lr_fraction: f64,
    pub seed: u64,
}

impl Default for BackboneTrainConfig {
    fn default() -> Self {
        Self { iterations: 3000, batch_size: 16, lr: 2e-3, final_lr_fraction: 0.05, seed: 0 }
    }
}

/// Loss history of a training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub losses: Vec<f64>,
    /// Mean loss per epoch (one pass worth of samples).
    pub epoch_means: Vec<f64>,
}

impl TrainReport {
    fn from_losses(losses: Vec<f64>, per_epoch: usize) -> Self {
        let epoch_means = losses.chunks(per_epoch.max(1)).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect();
        Self { losses, epoch_means }
    }

    /// Last-epoch mean divided by first-epoch mean.
    pub fn loss_ratio(&self) -> f64 {
        match (self.epoch_means.first(), self.epoch_means.last()) {
            (Some(a), Some(b)) if *a > 0.0 => b / a,
            _ => f64::NAN,
        }
    }
}

/// Fit a [`ToyUnet`] to predict the injected noise on `images` (`c x h x w`, values in `[-1, 1]`).
pub fn train_toy_backbone<S: Scalar>(
    images: &[Tensor<S>],
    schedule: VarianceSchedule<S>,
    net_cfg: ToyUnetConfig,
    cfg: &BackboneTrainConfig,
) -> Result<(ToyUnet<S>, TrainReport)> {
    if images.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if cfg.batch_size == 0 || cfg.iterations == 0 {
        return Err(Error::InvalidArgument("batch size and iteration count must be positive".into()));
    }
    let mut net = ToyUnet::new(net_cfg, schedule, cfg.seed)?;
    for img in images {
        img.check_shape(&net.latent_shape())?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut opt = Adam::new(&net.params, AdamConfig { lr: cfg.lr, ..Default::default() });
    let steps = net.schedule.steps();
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut cursor = order.len();
    let mut losses = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let progress = it as f64 / cfg.iterations as f64;
        let frac = cfg.final_lr_fraction + (1.0 - cfg.final_lr_fraction) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        opt.set_lr(cfg.lr * frac);

        let mut batch = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(&images[order[cursor]]);
            cursor += 1;
        }
        let ts: Vec<usize> = (0..batch.len()).map(|_| rng.random_range(1..=steps)).collect();
        let x0 = Tensor::stack(&batch)?;
        let eps = Tensor::randn(x0.shape(), &mut rng);
        let mut zt = Vec::with_capacity(x0.len());
        let inner = x0.len() / batch.len();
        for (i, &t) in ts.iter().enumerate() {
            let ab = net.schedule.alpha_bar(t);
            let (a, b) = (ab.sqrt(), (S::one() - ab).sqrt());
            let range = i * inner..(i + 1) * inner;
            zt.extend(x0.data()[range.clone()].iter().zip(&eps.data()[range]).map(|(&x, &e)| a * x + b * e));
        }
        let zt = Tensor::new(x0.shape(), zt)?;

        let mut tape = Tape::new();
        let bound = net.params.bind(&mut tape, true);
        let z = tape.constant(zt);
        let target = tape.constant(eps);
        let pred = net.forward(&mut tape, &bound, z, &ts)?;
        let diff = tape.sub(pred, target)?;
        let sq = tape.sum_squares(diff);
        let loss = tape.affine(sq, S::one() / S::of(x0.len() as f64), S::zero());
        let lv = tape.value(loss).data()[0].as_f64();
        if !lv.is_finite() {
            return Err(Error::Diverged(format!("non-finite loss {lv} at iteration {it}")));
        }
        let grads = tape.backward(loss)?;
        let gnorm = opt.step(&mut net.params, &bound, &grads);
        if !gnorm.is_finite() {
            return Err(Error::Diverged(format!("non-finite gradient norm at iteration {it} (loss {lv})")));
        }
        losses.push(lv);
    }
    let per_epoch = images.len().div_ceil(cfg.batch_size);
    Ok((net, TrainReport::from_losses(losses, per_epoch)))
}

/// Backbone that knows the single clean sample it "was trained on" and so
/// predicts the injected noise exactly: `(z_t - sqrt(abar_t) z0) / sqrt(1 - abar_t)`.
#[derive(Debug, Clone)]
pub struct OracleBackbone<S> {
    clean: Tensor<S>,
    schedule: VarianceSchedule<S>,
}

impl<S: Scalar> OracleBackbone<S> {
    pub fn new(clean: Tensor<S>, schedule: VarianceSchedule<S>) -> Result<Self> {
        if clean.shape().len() != 3 {
            return Err(Error::InvalidArgument(format!("clean sample must be c x h x w, got {:?}", clean.shape())));
        }
        Ok(Self { clean, schedule })
    }
}

impl<S: Scalar> DiffusionBackbone<S> for OracleBackbone<S> {
    fn latent_shape(&self) -> [usize; 3] {
        let s = self.clean.shape();
        [s[0], s[1], s[2]]
    }

    fn image_shape(&self) -> [usize; 3] {
        self.latent_shape()
    }

    fn schedule(&self) -> &VarianceSchedule<S> {
        &self.schedule
    }

    fn predict_noise_on(&self, tape: &mut Tape<S>, z: Var, ts: &[usize], cond: Option<&Tensor<S>>) -> Result<Var> {
        if cond.is_some() {
            return Err(Error::InvalidArgument("oracle backbone is unconditional".into()));
        }
        check_batch(tape, z, ts, self.latent_shape(), &self.schedule)?;
        // per-sample affine map, written as elementwise products with constant tensors
        let n = ts.len();
        let inner = self.clean.len();
        let mut scale = Vec::with_capacity(n * inner);
        let mut shift = Vec::with_capacity(n * inner);
        for &t in ts {
            let ab = self.schedule.alpha_bar(t);
            let inv = S::one() / (S::one() - ab).sqrt();
            scale.extend(std::iter::repeat_n(inv, inner));
            shift.extend(self.clean.data().iter().map(|&c| ab.sqrt() * c * inv));
        }
        let shape = tape.value(z).shape().to_vec();
        let scale = tape.constant(Tensor::new(&shape, scale)?);
        let shift = tape.constant(Tensor::new(&shape, shift)?);
        let scaled = tape.mul(z, scale)?;
        tape.sub(scaled, shift)
    }

    fn decode_on(&self, _tape: &mut Tape<S>, z: Var) -> Result<Var> {
        Ok(z)
    }
}

/// Latent-space backbone behind a fixed decoder: nearest-neighbour
/// upsampling by `factor` followed by a 1x1 channel mix `[image_c, latent_c]`.
#[derive(Debug, Clone)]
pub struct LatentAdapter<B, S> {
    inner: B,
    mix: Tensor<S>,
    bias: Tensor<S>,
    factor: usize,
}

impl<S: Scalar, B: DiffusionBackbone<S>> LatentAdapter<B, S> {
    pub fn new(inner: B, mix: Tensor<S>, bias: Tensor<S>, factor: usize) -> Result<Self> {
        let lc = inner.latent_shape()[0];
        if mix.shape().len() != 2 || mix.shape()[1] != lc || factor == 0 {
            return Err(Error::Shape { expected: vec![mix.shape().first().copied().unwrap_or(0), lc], got: mix.shape().to_vec() });
        }
        bias.check_shape(&[mix.shape()[0]])?;
        Ok(Self { inner, mix, bias, factor })
    }
}

impl<S: Scalar, B: DiffusionBackbone<S>> DiffusionBackbone<S> for LatentAdapter<B, S> {
    fn latent_shape(&self) -> [usize; 3] {
        self.inner.latent_shape()
    }

    fn image_shape(&self) -> [usize; 3] {
        let [_, h, w] = self.inner.latent_shape();
        [self.mix.shape()[0], h * self.factor, w * self.factor]
    }

    fn schedule(&self) -> &VarianceSchedule<S> {
        self.inner.schedule()
    }

    fn predict_noise_on(&self, tape: &mut Tape<S>, z: Var, ts: &[usize], cond: Option<&Tensor<S>>) -> Result<Var> {
        self.inner.predict_noise_on(tape, z, ts, cond)
    }

    fn decode_on(&self, tape: &mut Tape<S>, z: Var) -> Result<Var> {
        let [ic, lc] = [self.mix.shape()[0], self.mix.shape()[1]];
        let up = tape.upsample(z, self.factor)?;
        let w = tape.constant(self.mix.clone().reshape(&[ic, lc, 1, 1])?);
        let b = tape.constant(self.bias.clone());
        tape.conv2d(up, w, b, 0)
    }
}
