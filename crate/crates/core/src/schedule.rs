//! Variance schedules and the closed-form forward process.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Construction parameters of a linear schedule; this is what configs and
/// checkpoints persist.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self { steps: 1000, beta_start: 1e-4, beta_end: 0.02 }
    }
}

impl ScheduleSpec {
    pub fn build<S: Scalar>(&self) -> Result<VarianceSchedule<S>> {
        VarianceSchedule::linear(self.steps, self.beta_start, self.beta_end)
    }
}

/// The beta/alpha/alpha-bar tables of a diffusion process.
///
/// Timesteps are 1-based everywhere in the public API: `t` ranges over
/// `1..=steps()`, and `alpha_bar(0)` is the empty product 1.
#[derive(Debug, Clone, PartialEq)]
pub struct VarianceSchedule<S> {
    spec: ScheduleSpec,
    betas: Vec<S>,
    alphas: Vec<S>,
    alpha_bars: Vec<S>,
}

impl<S: Scalar> VarianceSchedule<S> {
    /// Betas linearly spaced from `beta_start` to `beta_end` inclusive.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Schedule("step count must be at least 1".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Schedule(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}..{beta_end}"
            )));
        }
        let betas: Vec<f64> = if steps == 1 {
            vec![beta_start]
        } else {
            let step = (beta_end - beta_start) / (steps - 1) as f64;
            (0..steps).map(|i| if i == steps - 1 { beta_end } else { beta_start + step * i as f64 }).collect()
        };
        Self::from_betas_with_spec(betas, ScheduleSpec { steps, beta_start, beta_end })
    }

    fn from_betas_with_spec(betas: Vec<f64>, spec: ScheduleSpec) -> Result<Self> {
        let betas: Vec<S> = betas.into_iter().map(S::of).collect();
        let alphas: Vec<S> = betas.iter().map(|&b| S::one() - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut acc = S::one();
        for &a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        if alpha_bars.iter().any(|&a| !(a > S::zero())) {
            return Err(Error::Schedule("cumulative signal scale underflowed to zero".into()));
        }
        Ok(Self { spec, betas, alphas, alpha_bars })
    }

    pub fn spec(&self) -> ScheduleSpec {
        self.spec
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::Timestep { t, max: self.steps() });
        }
        Ok(())
    }

    /// Panics when `t` is outside `1..=steps()`.
    pub fn beta(&self, t: usize) -> S {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> S {
        self.alphas[t - 1]
    }

    /// Cumulative product of alphas up to and including `t`; 1 at `t = 0`.
    pub fn alpha_bar(&self, t: usize) -> S {
        if t == 0 {
            S::one()
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn betas(&self) -> &[S] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[S] {
        &self.alpha_bars
    }

    /// `sqrt(abar_t) * z0 + sqrt(1 - abar_t) * eps`.
    pub fn forward_diffuse(&self, z0: &Tensor<S>, t: usize, eps: &Tensor<S>) -> Result<Tensor<S>> {
        self.check_t(t)?;
        z0.same_shape(eps)?;
        let ab = self.alpha_bar(t);
        let (a, b) = (ab.sqrt(), (S::one() - ab).sqrt());
        Ok(z0.zip_map(eps, |z, e| a * z + b * e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_step() {
        let s = VarianceSchedule::<f64>::linear(1, 0.5, 0.5).unwrap();
        assert_eq!(s.betas(), &[0.5]);
        assert_eq!(s.alpha_bars(), &[0.5]);
    }

    #[test]
    fn two_steps_hand_product() {
        let s = VarianceSchedule::<f64>::linear(2, 0.1, 0.3).unwrap();
        assert!((s.alpha_bar(1) - 0.9).abs() < 1e-15);
        assert!((s.alpha_bar(2) - 0.63).abs() < 1e-15);
        assert_eq!(s.alpha_bar(0), 1.0);
    }

    #[test]
    fn default_thousand_step_product() {
        // value frozen from an independent f64 product loop:
        // prod_{i=0}^{999} (1 - (1e-4 + i * (0.02 - 1e-4) / 999))
        let s = ScheduleSpec::default().build::<f64>().unwrap();
        assert!((s.alpha_bar(1000) - 4.0358297653756754e-5).abs() < 1e-12, "{}", s.alpha_bar(1000));
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(VarianceSchedule::<f64>::linear(0, 0.1, 0.2).is_err());
        assert!(VarianceSchedule::<f64>::linear(10, 0.0, 0.2).is_err());
        assert!(VarianceSchedule::<f64>::linear(10, 0.3, 0.2).is_err());
        assert!(VarianceSchedule::<f64>::linear(10, 0.1, 1.0).is_err());
    }

    #[test]
    fn forward_diffuse_cases() {
        let s = VarianceSchedule::<f64>::linear(2, 0.1, 0.3).unwrap();
        let ones = Tensor::ones(&[2, 2]);
        let zeros = Tensor::zeros(&[2, 2]);
        let out = s.forward_diffuse(&ones, 2, &ones).unwrap();
        let expect = 0.63f64.sqrt() + 0.37f64.sqrt();
        assert!(out.data().iter().all(|v| (v - expect).abs() < 1e-12));
        let z = s.forward_diffuse(&ones, 1, &zeros).unwrap();
        assert!(z.data().iter().all(|v| (v - 0.9f64.sqrt()).abs() < 1e-15));
        let e = s.forward_diffuse(&zeros, 1, &ones).unwrap();
        assert!(e.data().iter().all(|v| (v - 0.1f64.sqrt()).abs() < 1e-15));
        assert!(s.forward_diffuse(&ones, 3, &ones).is_err());
        assert!(s.forward_diffuse(&ones, 1, &Tensor::ones(&[4])).is_err());
    }

    proptest::proptest! {
        #[test]
        fn alpha_bars_strictly_decrease(steps in 1usize..400, a in 1e-5f64..0.2, span in 0.0f64..0.3) {
            let b = (a + span).min(0.5);
            let s = VarianceSchedule::<f64>::linear(steps, a, b).unwrap();
            let mut prev = 1.0;
            for t in 1..=steps {
                let ab = s.alpha_bar(t);
                proptest::prop_assert!(ab < prev && ab > 0.0);
                proptest::prop_assert_eq!(s.alpha(t), 1.0 - s.beta(t));
                proptest::prop_assert!((ab - prev * s.alpha(t)).abs() <= 1e-15);
                prev = ab;
            }
        }
    }
}
