//! Guided reverse diffusion towards a target feature.
//!
//! At every reverse step `t` and self-recurrence iteration `k` the engine
//! predicts the noise, forms the clean-sample estimate, decodes it, saves it
//! virtually to 8-bit pixels, extracts its feature and takes the squared
//! distance to the target. The gradient of that distance with respect to
//! `z_t` (through the whole chain, noise predictor included) is rescaled to
//! the norm of the predicted noise, clipped at `clip_multiplier` standard
//! deviations, weighted and subtracted from the predicted noise before the
//! ancestral sampling step. For `k < K` the sample is pushed back to step `t`
//! with one forward-noising step.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{batch_of_one, predict_clean_on, DiffusionBackbone};
use crate::error::{Error, Result};
use crate::extractor::FeatureExtractor;
use crate::feature::FeatureVector;
use crate::quantizer::{virtual_save, virtual_save_on, QuantizedImage, Rounding};
use crate::scalar::Scalar;
use crate::schedule::VarianceSchedule;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceConfig {
    /// Weight of the fixed gradient subtracted from the predicted noise.
    pub guidance_weight: f64,
    /// Self-recurrence iterations during the emphasised early steps.
    pub early_iterations: usize,
    /// Self-recurrence iterations everywhere else.
    pub late_iterations: usize,
    /// Number of emphasised early steps; 0 disables emphasis.
    pub early_steps: usize,
    /// Clip threshold in standard deviations of the normalised gradient.
    pub clip_multiplier: f64,
    pub seed: u64,
    /// Keep every n-th step record (new bests and flagged steps are always kept).
    pub trace_every: usize,
    /// Store `z_T` and every accepted `z_{t-1}` in the trace.
    pub record_trajectory: bool,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            guidance_weight: 4.0,
            early_iterations: 1000,
            late_iterations: 8,
            early_steps: 5,
            clip_multiplier: 3.0,
            seed: 0,
            trace_every: 1,
            record_trajectory: false,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self, steps: usize) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if !(self.guidance_weight >= 0.0) || !self.guidance_weight.is_finite() {
            return bad("guidance_weight must be finite and non-negative");
        }
        if self.late_iterations == 0 || self.early_iterations < self.late_iterations {
            return bad("need early_iterations >= late_iterations >= 1");
        }
        if self.early_steps > steps {
            return bad("early_steps exceeds the schedule length");
        }
        if !(self.clip_multiplier > 0.0) || !self.clip_multiplier.is_finite() {
            return bad("clip_multiplier must be positive");
        }
        if self.trace_every == 0 {
            return bad("trace_every must be at least 1");
        }
        Ok(())
    }
}

/// Squared Euclidean distance between two features of the same extractor.
pub fn feature_loss<S: Scalar>(f_x: &FeatureVector<S>, f_s: &FeatureVector<S>) -> Result<S> {
    crate::analysis::squared_distance(f_x, f_s)
}

/// Taped squared distance of a `[1, d]` feature variable to a fixed target.
pub fn feature_loss_on<S: Scalar>(tape: &mut Tape<S>, f_x: Var, f_s: &FeatureVector<S>) -> Result<Var> {
    let target = tape.constant(f_s.to_tensor());
    let diff = tape.sub(f_x, target)?;
    Ok(tape.sum_squares(diff))
}

/// Result of one gradient-fixing stage.
#[derive(Debug, Clone, PartialEq)]
pub struct FixedGradient<S> {
    pub grad: Tensor<S>,
    /// The input had zero norm (normalisation) or zero spread (clipping).
    pub degenerate: bool,
}

/// Rescale `grad` to the L2 norm of `eps_hat`; zero gradients come back as zeros, flagged.
pub fn normalize_gradient<S: Scalar>(grad: &Tensor<S>, eps_hat: &Tensor<S>) -> Result<FixedGradient<S>> {
    grad.same_shape(eps_hat)?;
    let gn = grad.norm_f64();
    if gn == 0.0 || !gn.is_finite() {
        return Ok(FixedGradient { grad: Tensor::zeros(grad.shape()), degenerate: true });
    }
    let k = S::of(eps_hat.norm_f64() / gn);
    Ok(FixedGradient { grad: grad.scale(k), degenerate: false })
}

/// Clipped gradient and the threshold that was applied.
#[derive(Debug, Clone, PartialEq)]
pub struct ClippedGradient<S> {
    pub grad: Tensor<S>,
    pub threshold: S,
    /// Population std of the input entries.
    pub std: f64,
    pub degenerate: bool,
}

/// Clamp every entry into `±clip_multiplier * std(grad)`.
pub fn clip_gradient<S: Scalar>(grad: &Tensor<S>, clip_multiplier: f64) -> Result<ClippedGradient<S>> {
    if !grad.is_finite() {
        return Err(Error::NonFinite("gradient passed to clipping".into()));
    }
    let std = grad.std_f64();
    let threshold = S::of(clip_multiplier * std);
    let out = grad.map(|v| v.max(-threshold).min(threshold));
    Ok(ClippedGradient { grad: out, threshold, std, degenerate: std == 0.0 })
}

/// `eps_hat - w_g * grad_fixed`.
pub fn modify_noise<S: Scalar>(eps_hat: &Tensor<S>, grad_fixed: &Tensor<S>, w_g: f64) -> Result<Tensor<S>> {
    eps_hat.same_shape(grad_fixed)?;
    let w = S::of(w_g);
    Ok(eps_hat.zip_map(grad_fixed, |e, g| e - w * g))
}

/// Ancestral step with explicit noise:
/// `(z_t - (1 - alpha_t) / sqrt(1 - abar_t) * eps') / sqrt(alpha_t) + sqrt(beta_t) * delta`.
pub fn sample_prev_with<S: Scalar>(
    z_t: &Tensor<S>,
    t: usize,
    eps_prime: &Tensor<S>,
    sched: &VarianceSchedule<S>,
    delta: &Tensor<S>,
) -> Result<Tensor<S>> {
    sched.check_t(t)?;
    z_t.same_shape(eps_prime)?;
    z_t.same_shape(delta)?;
    let alpha = sched.alpha(t);
    let coef = (S::one() - alpha) / (S::one() - sched.alpha_bar(t)).sqrt();
    let inv = S::one() / alpha.sqrt();
    let sigma = sched.beta(t).sqrt();
    let mut out = z_t.zip_map(eps_prime, |z, e| (z - coef * e) * inv);
    for (o, &d) in out.data_mut().iter_mut().zip(delta.data()) {
        *o += sigma * d;
    }
    if !out.is_finite() {
        return Err(Error::NonFinite(format!("z_(t-1) at t={t}")));
    }
    Ok(out)
}

/// Ancestral step drawing `delta ~ N(0, I)` from `rng`; no noise (and no draw) at `t = 1`.
pub fn sample_prev<S: Scalar>(
    z_t: &Tensor<S>,
    t: usize,
    eps_prime: &Tensor<S>,
    sched: &VarianceSchedule<S>,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor<S>> {
    let delta = if t == 1 { Tensor::zeros(z_t.shape()) } else { Tensor::randn(z_t.shape(), rng) };
    sample_prev_with(z_t, t, eps_prime, sched, &delta)
}

/// Self-recurrence with explicit noise: `sqrt(alpha_t) * z_prev + sqrt(1 - alpha_t) * delta`.
pub fn self_recur_with<S: Scalar>(z_prev: &Tensor<S>, t: usize, sched: &VarianceSchedule<S>, delta: &Tensor<S>) -> Result<Tensor<S>> {
    sched.check_t(t)?;
    z_prev.same_shape(delta)?;
    let alpha = sched.alpha(t);
    let (a, b) = (alpha.sqrt(), (S::one() - alpha).sqrt());
    Ok(z_prev.zip_map(delta, |z, d| a * z + b * d))
}

pub fn self_recur<S: Scalar>(z_prev: &Tensor<S>, t: usize, sched: &VarianceSchedule<S>, rng: &mut ChaCha8Rng) -> Result<Tensor<S>> {
    let delta = Tensor::randn(z_prev.shape(), rng);
    self_recur_with(z_prev, t, sched, &delta)
}

/// Self-recurrence count at step `t`: `early_iterations` for the first
/// `early_steps` reverse steps (`t >= steps - early_steps`), else `late_iterations`.
pub fn recurrence_count(t: usize, cfg: &GuidanceConfig, steps: usize) -> usize {
    if cfg.early_steps > 0 && t + cfg.early_steps >= steps {
        cfg.early_iterations
    } else {
        cfg.late_iterations
    }
}

/// Sampler state: the current latent, its timestep and the RNG stream.
#[derive(Debug, Clone)]
pub struct LatentState<S> {
    pub z: Tensor<S>,
    pub t: usize,
    pub rng: ChaCha8Rng,
}

impl<S: Scalar> LatentState<S> {
    /// `z_T ~ N(0, I)` drawn from a fresh stream seeded with `seed`.
    pub fn initial(shape: [usize; 3], steps: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = Tensor::randn(&shape, &mut rng);
        Self { z, t: steps, rng }
    }
}

/// Plain ancestral sampling with the unmodified noise prediction.
///
/// Returns `z_T, z_{T-1}, ..., z_0`.
pub fn ancestral_sample<S: Scalar, B: DiffusionBackbone<S> + ?Sized>(backbone: &B, seed: u64) -> Result<Vec<Tensor<S>>> {
    let sched = backbone.schedule();
    let mut state = LatentState::<S>::initial(backbone.latent_shape(), sched.steps(), seed);
    let mut out = vec![state.z.clone()];
    for t in (1..=sched.steps()).rev() {
        let eps = backbone.predict_noise(&state.z, t)?;
        state.z = sample_prev(&state.z, t, &eps, sched, &mut state.rng)?;
        state.t = t - 1;
        out.push(state.z.clone());
    }
    Ok(out)
}

/// Per-iteration statistics. The final image is recorded with `t = 0, k = 0`
/// and no gradient fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    pub k: usize,
    pub loss: f64,
    pub grad_std: Option<f64>,
    pub grad_max_abs: Option<f64>,
    pub grad_norm: Option<f64>,
    pub eps_norm: Option<f64>,
    pub normalized_norm: Option<f64>,
    pub normalized_std: Option<f64>,
    pub clip_threshold: Option<f64>,
    pub clipped_max_abs: Option<f64>,
    /// Guidance was skipped because the gradient was degenerate.
    #[serde(default)]
    pub flagged: bool,
}

impl StepRecord {
    fn final_image(loss: f64) -> Self {
        Self {
            t: 0,
            k: 0,
            loss,
            grad_std: None,
            grad_max_abs: None,
            grad_norm: None,
            eps_norm: None,
            normalized_norm: None,
            normalized_std: None,
            clip_threshold: None,
            clipped_max_abs: None,
            flagged: false,
        }
    }

    pub fn is_final(&self) -> bool {
        self.t == 0
    }
}

#[derive(Debug, Clone)]
pub struct GenerationTrace<S> {
    pub records: Vec<StepRecord>,
    pub best_distance: f64,
    pub best_image: QuantizedImage<S>,
    /// `(t, k)` of the best image; `(0, 0)` is the final image.
    pub best_step: (usize, usize),
    pub final_image: QuantizedImage<S>,
    pub final_distance: f64,
    pub flagged_steps: usize,
    /// `z_T, ..., z_0` when requested.
    pub trajectory: Vec<Tensor<S>>,
}

/// A run that stopped early; carries the records gathered so far.
#[derive(Debug, thiserror::Error)]
#[error("generation aborted at t={}, k={}: {source}", step.0, step.1)]
pub struct GenerationError {
    pub step: (usize, usize),
    pub records: Vec<StepRecord>,
    #[source]
    pub source: Error,
}

struct Best<S> {
    distance: f64,
    image: Option<QuantizedImage<S>>,
    step: (usize, usize),
}

/// Run guided generation towards `target`.
pub fn generate<S, B, E>(target: &FeatureVector<S>, backbone: &B, extractor: &E, cfg: &GuidanceConfig) -> std::result::Result<GenerationTrace<S>, GenerationError>
where
    S: Scalar,
    B: DiffusionBackbone<S> + ?Sized,
    E: FeatureExtractor<S> + ?Sized,
{
    let mut records = Vec::new();
    let fail = |step, records, source| GenerationError { step, records, source };
    let sched = backbone.schedule();
    let steps = sched.steps();
    let setup = || -> Result<()> {
        cfg.validate(steps)?;
        if target.extractor_id() != extractor.id() {
            return Err(Error::ExtractorMismatch { left: target.extractor_id().into(), right: extractor.id().into() });
        }
        if target.dim() != extractor.dim() {
            return Err(Error::DimensionMismatch { left: target.dim(), right: extractor.dim() });
        }
        if backbone.image_shape() != extractor.image_shape() {
            return Err(Error::Shape { expected: extractor.image_shape().to_vec(), got: backbone.image_shape().to_vec() });
        }
        Ok(())
    };
    if let Err(e) = setup() {
        return Err(fail((steps, 0), records, e));
    }

    let mut state = LatentState::<S>::initial(backbone.latent_shape(), steps, cfg.seed);
    let mut trajectory = if cfg.record_trajectory { vec![state.z.clone()] } else { Vec::new() };
    let mut best = Best { distance: f64::INFINITY, image: None, step: (0, 0) };
    let mut flagged_steps = 0;
    let mut counter = 0usize;

    for t in (1..=steps).rev() {
        let iterations = recurrence_count(t, cfg, steps);
        for k in 1..=iterations {
            let step = guided_step(&state.z, t, target, backbone, extractor, cfg);
            let (mut record, image, eps_prime) = match step {
                Ok(v) => v,
                Err(e) => return Err(fail((t, k), records, e)),
            };
            record.k = k;
            let new_best = record.loss < best.distance;
            if new_best {
                best = Best { distance: record.loss, image: Some(image), step: (t, k) };
            }
            flagged_steps += record.flagged as usize;
            if new_best || record.flagged || counter % cfg.trace_every == 0 {
                records.push(record);
            }
            counter += 1;

            let z_prev = match sample_prev(&state.z, t, &eps_prime, sched, &mut state.rng) {
                Ok(z) => z,
                Err(e) => return Err(fail((t, k), records, e)),
            };
            if k < iterations {
                state.z = match self_recur(&z_prev, t, sched, &mut state.rng) {
                    Ok(z) => z,
                    Err(e) => return Err(fail((t, k), records, e)),
                };
            } else {
                state.z = z_prev;
                state.t = t - 1;
            }
        }
        if cfg.record_trajectory {
            trajectory.push(state.z.clone());
        }
    }

    let finish = || -> Result<(QuantizedImage<S>, f64)> {
        let x0 = backbone.decode(&state.z)?;
        let q = virtual_save(&x0)?;
        let d = feature_loss(&extractor.extract(&q)?, target)?.as_f64();
        if !d.is_finite() {
            return Err(Error::NonFinite("final image distance".into()));
        }
        Ok((q, d))
    };
    let (final_image, final_distance) = match finish() {
        Ok(v) => v,
        Err(e) => return Err(fail((0, 0), records, e)),
    };
    records.push(StepRecord::final_image(final_distance));
    if final_distance < best.distance || best.image.is_none() {
        best = Best { distance: final_distance, image: Some(final_image.clone()), step: (0, 0) };
    }
    Ok(GenerationTrace {
        records,
        best_distance: best.distance,
        best_image: best.image.expect("set above"),
        best_step: best.step,
        final_image,
        final_distance,
        flagged_steps,
        trajectory,
    })
}

/// One (t, k) iteration up to the modified noise.
fn guided_step<S, B, E>(
    z_t: &Tensor<S>,
    t: usize,
    target: &FeatureVector<S>,
    backbone: &B,
    extractor: &E,
    cfg: &GuidanceConfig,
) -> Result<(StepRecord, QuantizedImage<S>, Tensor<S>)>
where
    S: Scalar,
    B: DiffusionBackbone<S> + ?Sized,
    E: FeatureExtractor<S> + ?Sized,
{
    let sched = backbone.schedule();
    let mut tape = Tape::new();
    let z = tape.leaf(batch_of_one(z_t), true);
    let eps = backbone.predict_noise_on(&mut tape, z, &[t], None)?;
    let clean = predict_clean_on(&mut tape, z, t, eps, sched)?;
    let image = backbone.decode_on(&mut tape, clean)?;
    let pixels = virtual_save_on(&mut tape, image, Rounding::StraightThrough)?;
    let feature = extractor.extract_on(&mut tape, pixels)?;
    let loss = feature_loss_on(&mut tape, feature, target)?;
    let loss_value = tape.value(loss).data()[0].as_f64();
    if !loss_value.is_finite() {
        return Err(Error::NonFinite(format!("loss at t={t}")));
    }
    let grads = tape.backward(loss)?;
    let grad = grads
        .get(z)
        .map(|g| g.index_first(0))
        .unwrap_or_else(|| Tensor::zeros(z_t.shape()));
    if !grad.is_finite() {
        return Err(Error::NonFinite(format!("gradient at t={t}")));
    }
    let eps_hat = tape.value(eps).index_first(0);
    let saved = QuantizedImage::from_pixels(tape.value(pixels).index_first(0))?;

    let normalized = normalize_gradient(&grad, &eps_hat)?;
    let clipped = clip_gradient(&normalized.grad, cfg.clip_multiplier)?;
    let flagged = normalized.degenerate || clipped.degenerate;
    // Subtracting w_g * grad(l) from eps_hat moves z_{t-1} uphill in l, so the
    // fixed gradient of -l is what gets subtracted. Fixing commutes with negation.
    let descent = clipped.grad.map(|v| -v);
    let eps_prime = if flagged { eps_hat.clone() } else { modify_noise(&eps_hat, &descent, cfg.guidance_weight)? };

    let record = StepRecord {
        t,
        k: 0,
        loss: loss_value,
        grad_std: Some(grad.std_f64()),
        grad_max_abs: Some(grad.max_abs().as_f64()),
        grad_norm: Some(grad.norm_f64()),
        eps_norm: Some(eps_hat.norm_f64()),
        normalized_norm: Some(normalized.grad.norm_f64()),
        normalized_std: Some(clipped.std),
        clip_threshold: Some(clipped.threshold.as_f64()),
        clipped_max_abs: Some(clipped.grad.max_abs().as_f64()),
        flagged,
    };
    Ok((record, saved, eps_prime))
}

impl<S> GenerationTrace<S> {
    /// Minimum loss over the stored records.
    pub fn recorded_minimum(&self) -> Option<f64> {
        min_loss(&self.records)
    }
}

pub fn min_loss(records: &[StepRecord]) -> Option<f64> {
    records.iter().map(|r| r.loss).min_by(f64::total_cmp)
}
