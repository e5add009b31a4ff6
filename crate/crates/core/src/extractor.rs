//! Target feature extractors.
//!
//! Every extractor consumes 8-bit pixel values (`[0, 255]`, the output of the
//! virtual save) and owns whatever preprocessing it needs internally.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::LabeledImage;
use crate::error::{Error, Result};
use crate::feature::FeatureVector;
use crate::nn::{Adam, AdamConfig, Bound, Conv, Dense, Params};
use crate::quantizer::{virtual_save, QuantizedImage, PIXEL_SCALE};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub trait FeatureExtractor<S: Scalar>: Send + Sync {
    fn id(&self) -> &str;

    /// Expected `c x h x w` of the pixel input.
    fn image_shape(&self) -> [usize; 3];

    fn dim(&self) -> usize;

    /// Features `[n, dim]` of a pixel batch `[n, c, h, w]`; must be deterministic.
    fn extract_on(&self, tape: &mut Tape<S>, pixels: Var) -> Result<Var>;

    fn extract(&self, image: &QuantizedImage<S>) -> Result<FeatureVector<S>> {
        let values = image.values();
        values.check_shape(&self.image_shape())?;
        if values.data().iter().any(|&v| !(v >= S::zero() && v <= S::of(255.0))) {
            return Err(Error::InvalidArgument("pixel values outside [0, 255]".into()));
        }
        let mut tape = Tape::new();
        let x = tape.constant(crate::backbone::batch_of_one(values));
        let f = self.extract_on(&mut tape, x)?;
        Ok(FeatureVector::new(tape.value(f).data().to_vec(), self.id()))
    }
}

fn check_pixels<S: Scalar>(tape: &Tape<S>, x: Var, shape: [usize; 3]) -> Result<usize> {
    let s = tape.value(x).shape();
    if s.len() != 4 || s[1..] != shape {
        return Err(Error::Shape { expected: shape.to_vec(), got: s.to_vec() });
    }
    Ok(s[0])
}

/// Per-channel means over a `grid x grid` partition of the image.
///
/// Output order is channel-major, then grid row, then grid column. Exact and
/// linear, so gradients through it are verifiable by hand.
#[derive(Debug, Clone)]
pub struct PooledMeanExtractor {
    id: String,
    shape: [usize; 3],
    grid: usize,
}

impl PooledMeanExtractor {
    pub fn new(shape: [usize; 3], grid: usize) -> Result<Self> {
        if grid == 0 || shape[1] % grid != 0 || shape[2] % grid != 0 || shape[1] != shape[2] {
            return Err(Error::InvalidArgument(format!("grid {grid} does not tile {shape:?}")));
        }
        Ok(Self { id: format!("pooled-mean-{grid}x{grid}"), shape, grid })
    }
}

impl<S: Scalar> FeatureExtractor<S> for PooledMeanExtractor {
    fn id(&self) -> &str {
        &self.id
    }

    fn image_shape(&self) -> [usize; 3] {
        self.shape
    }

    fn dim(&self) -> usize {
        self.shape[0] * self.grid * self.grid
    }

    fn extract_on(&self, tape: &mut Tape<S>, pixels: Var) -> Result<Var> {
        let n = check_pixels(tape, pixels, self.shape)?;
        let pooled = tape.avg_pool(pixels, self.shape[1] / self.grid)?;
        tape.reshape(pooled, &[n, FeatureExtractor::<S>::dim(self)])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyCnnConfig {
    pub image_channels: usize,
    pub image_size: usize,
    pub width: usize,
    pub feature_dim: usize,
    pub classes: usize,
}

impl Default for ToyCnnConfig {
    fn default() -> Self {
        Self { image_channels: 3, image_size: 32, width: 16, feature_dim: 32, classes: 4 }
    }
}

/// Small convolutional classifier whose penultimate activation is the feature.
#[derive(Debug, Clone)]
pub struct ToyCnnExtractor<S> {
    cfg: ToyCnnConfig,
    id: String,
    params: Params<S>,
    conv1: Conv,
    conv2: Conv,
    conv3: Conv,
    conv4: Conv,
    head: Dense,
}

impl<S: Scalar> ToyCnnExtractor<S> {
    pub fn new(cfg: ToyCnnConfig, seed: u64) -> Result<Self> {
        if cfg.image_size % 4 != 0 || cfg.classes < 2 || cfg.width == 0 || cfg.feature_dim == 0 {
            return Err(Error::InvalidArgument("invalid toy cnn configuration".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Params::default();
        let conv1 = Conv::new(&mut p, "conv1", cfg.image_channels, cfg.width, 3, &mut rng);
        let conv2 = Conv::new(&mut p, "conv2", cfg.width, 2 * cfg.width, 3, &mut rng);
        let conv3 = Conv::new(&mut p, "conv3", 2 * cfg.width, 2 * cfg.width, 3, &mut rng);
        let conv4 = Conv::new(&mut p, "conv4", 2 * cfg.width, cfg.feature_dim, 3, &mut rng);
        let head = Dense::new(&mut p, "head", cfg.feature_dim, cfg.classes, &mut rng);
        Ok(Self { cfg, id: format!("toy-cnn-{}", seed), params: p, conv1, conv2, conv3, conv4, head })
    }

    pub fn config(&self) -> ToyCnnConfig {
        self.cfg
    }

    /// Identity string, stamped into every feature this extractor produces.
    pub fn set_id(&mut self, id: impl Into<String>) {
        self.id = id.into();
    }

    fn features(&self, tape: &mut Tape<S>, p: &Bound, pixels: Var) -> Result<Var> {
        let n = tape.value(pixels).shape()[0];
        // per-image, per-channel centring: colours vary freely, shapes do not
        let size = self.cfg.image_size;
        let x = tape.affine(pixels, S::one() / S::of(PIXEL_SCALE), -S::one());
        let mean = tape.avg_pool(x, size)?;
        let mean = tape.upsample(mean, size)?;
        let x = tape.sub(x, mean)?;
        let h = self.conv1.forward(tape, p, x)?;
        let h = tape.relu(h);
        let h = tape.avg_pool(h, 2)?;
        let h = self.conv2.forward(tape, p, h)?;
        let h = tape.relu(h);
        let h = tape.avg_pool(h, 2)?;
        let h = self.conv3.forward(tape, p, h)?;
        let h = tape.relu(h);
        let h = self.conv4.forward(tape, p, h)?;
        let h = tape.relu(h);
        let h = tape.avg_pool(h, size / 4)?;
        tape.reshape(h, &[n, self.cfg.feature_dim])
    }

    /// Class logits for a pixel batch.
    pub fn classify(&self, image: &QuantizedImage<S>) -> Result<usize> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let x = tape.constant(crate::backbone::batch_of_one(image.values()));
        let f = self.features(&mut tape, &p, x)?;
        let logits = self.head.forward(&mut tape, &p, f)?;
        Ok(argmax(tape.value(logits).data()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let ck = CnnCheckpoint {
            format: CNN_FORMAT.into(),
            id: self.id.clone(),
            config: self.cfg,
            params: self.params.to_stored(),
        };
        std::fs::write(path, serde_json::to_vec(&ck)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck: CnnCheckpoint = serde_json::from_slice(&std::fs::read(path)?)?;
        if ck.format != CNN_FORMAT {
            return Err(Error::Format(format!("{} is not a toy-cnn checkpoint", path.display())));
        }
        let mut net = Self::new(ck.config, 0)?;
        net.params.load_stored(&ck.params)?;
        net.id = ck.id;
        Ok(net)
    }
}

const CNN_FORMAT: &str = "featinv.toy-cnn.v1";

#[derive(Serialize, Deserialize)]
struct CnnCheckpoint {
    format: String,
    id: String,
    config: ToyCnnConfig,
    params: Vec<(String, crate::tensor::StoredTensor)>,
}

fn argmax<S: Scalar>(v: &[S]) -> usize {
    v.iter().enumerate().fold(0, |best, (i, &x)| if x > v[best] { i } else { best })
}

impl<S: Scalar> FeatureExtractor<S> for ToyCnnExtractor<S> {
    fn id(&self) -> &str {
        &self.id
    }

    fn image_shape(&self) -> [usize; 3] {
        [self.cfg.image_channels, self.cfg.image_size, self.cfg.image_size]
    }

    fn dim(&self) -> usize {
        self.cfg.feature_dim
    }

    fn extract_on(&self, tape: &mut Tape<S>, pixels: Var) -> Result<Var> {
        check_pixels(tape, pixels, FeatureExtractor::<S>::image_shape(self))?;
        let p = self.params.bind(tape, false);
        self.features(tape, &p, pixels)
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ExtractorTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Fraction of the dataset held out for the accuracy report.
    pub holdout: f64,
    pub seed: u64,
}

impl Default for ExtractorTrainConfig {
    fn default() -> Self {
        Self { epochs: 12, batch_size: 16, lr: 3e-3, holdout: 0.2, seed: 0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExtractorReport {
    pub epoch_losses: Vec<f64>,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

/// Train a [`ToyCnnExtractor`] as a classifier on labelled shapes.
pub fn train_toy_extractor<S: Scalar>(
    data: &[LabeledImage<S>],
    net_cfg: ToyCnnConfig,
    cfg: &ExtractorTrainConfig,
) -> Result<(ToyCnnExtractor<S>, ExtractorReport)> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut net = ToyCnnExtractor::new(net_cfg, cfg.seed)?;
    let shape = FeatureExtractor::<S>::image_shape(&net);
    let pixels: Vec<QuantizedImage<S>> = data
        .iter()
        .map(|d| {
            d.image.check_shape(&shape)?;
            if d.label >= net_cfg.classes {
                return Err(Error::InvalidArgument(format!("label {} out of range", d.label)));
            }
            virtual_save(&d.image)
        })
        .collect::<Result<_>>()?;
    let n_test = ((data.len() as f64) * cfg.holdout).round() as usize;
    let n_train = data.len() - n_test.min(data.len() - 1);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5851_f42d_4c95_7f2d);
    let mut opt = Adam::new(&net.params, AdamConfig { lr: cfg.lr, ..Default::default() });
    let mut order: Vec<usize> = (0..n_train).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let imgs: Vec<&Tensor<S>> = chunk.iter().map(|&i| pixels[i].values()).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| data[i].label).collect();
            let mut tape = Tape::new();
            let p = net.params.bind(&mut tape, true);
            let x = tape.constant(Tensor::stack(&imgs)?);
            let f = net.features(&mut tape, &p, x)?;
            let logits = net.head.forward(&mut tape, &p, f)?;
            let loss = tape.cross_entropy(logits, &labels)?;
            let lv = tape.value(loss).data()[0].as_f64();
            if !lv.is_finite() {
                return Err(Error::Diverged(format!("non-finite classifier loss in epoch {epoch}")));
            }
            let grads = tape.backward(loss)?;
            opt.step(&mut net.params, &p, &grads);
            total += lv;
            batches += 1;
        }
        epoch_losses.push(total / batches.max(1) as f64);
    }
    let accuracy = |range: std::ops::Range<usize>| -> Result<f64> {
        if range.is_empty() {
            return Ok(f64::NAN);
        }
        let len = range.len();
        let mut hits = 0;
        for i in range {
            hits += (net.classify(&pixels[i])? == data[i].label) as usize;
        }
        Ok(hits as f64 / len as f64)
    };
    let train_accuracy = accuracy(0..n_train)?;
    let test_accuracy = accuracy(n_train..data.len())?;
    Ok((net, ExtractorReport { epoch_losses, train_accuracy, test_accuracy }))
}
