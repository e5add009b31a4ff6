//! Parameter storage, layers and the Adam optimizer used by the toy networks.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::{StoredTensor, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

/// Named, ordered collection of trainable tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<S> {
    names: Vec<String>,
    tensors: Vec<Tensor<S>>,
}

impl<S: Scalar> Default for Params<S> {
    fn default() -> Self {
        Self { names: Vec::new(), tensors: Vec::new() }
    }
}

/// Params placed on a tape for one forward pass.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

impl<S: Scalar> Params<S> {
    pub fn add(&mut self, name: impl Into<String>, t: Tensor<S>) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.tensors[id.0]
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Put every parameter on `tape`; frozen parameters get no gradients.
    pub fn bind(&self, tape: &mut Tape<S>, trainable: bool) -> Bound {
        Bound { vars: self.tensors.iter().map(|t| tape.leaf(t.clone(), trainable)).collect() }
    }

    pub fn to_stored(&self) -> Vec<(String, StoredTensor)> {
        self.names.iter().cloned().zip(self.tensors.iter().map(StoredTensor::from)).collect()
    }

    /// Overwrite values from a stored list; names and shapes must match exactly.
    pub fn load_stored(&mut self, stored: &[(String, StoredTensor)]) -> Result<()> {
        if stored.len() != self.tensors.len() {
            return Err(Error::Format(format!("expected {} tensors, found {}", self.tensors.len(), stored.len())));
        }
        for ((name, t), (sname, st)) in self.names.iter().zip(self.tensors.iter_mut()).zip(stored) {
            if name != sname {
                return Err(Error::Format(format!("parameter {sname} where {name} expected")));
            }
            let loaded = st.to_tensor::<S>()?;
            loaded.check_shape(t.shape())?;
            *t = loaded;
        }
        Ok(())
    }
}

fn uniform<S: Scalar, R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Tensor<S> {
    Tensor::from_fn(shape, |_| S::of(rng.random_range(-bound..bound)))
}

/// Square-kernel, stride-1, same-padding convolution.
#[derive(Debug, Clone)]
pub struct Conv {
    w: ParamId,
    b: ParamId,
    pad: usize,
}

impl Conv {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        params: &mut Params<S>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        rng: &mut R,
    ) -> Self {
        let bound = (6.0 / (cin * k * k) as f64).sqrt();
        let w = params.add(format!("{name}.weight"), uniform(&[cout, cin, k, k], bound, rng));
        let b = params.add(format!("{name}.bias"), Tensor::zeros(&[cout]));
        Self { w, b, pad: k / 2 }
    }

    /// Same as [`Conv::new`] with zero-initialised weights.
    pub fn zeroed<S: Scalar>(params: &mut Params<S>, name: &str, cin: usize, cout: usize, k: usize) -> Self {
        let w = params.add(format!("{name}.weight"), Tensor::zeros(&[cout, cin, k, k]));
        let b = params.add(format!("{name}.bias"), Tensor::zeros(&[cout]));
        Self { w, b, pad: k / 2 }
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, p: &Bound, x: Var) -> Result<Var> {
        tape.conv2d(x, p.var(self.w), p.var(self.b), self.pad)
    }
}

#[derive(Debug, Clone)]
pub struct Dense {
    w: ParamId,
    b: ParamId,
}

impl Dense {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        params: &mut Params<S>,
        name: &str,
        din: usize,
        dout: usize,
        rng: &mut R,
    ) -> Self {
        let bound = (6.0 / din as f64).sqrt() * 0.5;
        let w = params.add(format!("{name}.weight"), uniform(&[dout, din], bound, rng));
        let b = params.add(format!("{name}.bias"), Tensor::zeros(&[dout]));
        Self { w, b }
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, p: &Bound, x: Var) -> Result<Var> {
        tape.linear(x, p.var(self.w), p.var(self.b))
    }
}

/// Sinusoidal embedding of integer timesteps, `[n, dim]`.
pub fn timestep_embedding<S: Scalar>(ts: &[usize], dim: usize) -> Tensor<S> {
    let half = dim / 2;
    Tensor::from_fn(&[ts.len(), dim], |i| {
        let (row, col) = (i / dim, i % dim);
        let j = col % half.max(1);
        let freq = (-(10_000f64.ln()) * j as f64 / half.max(1) as f64).exp();
        let arg = ts[row] as f64 * freq;
        S::of(if col < half { arg.sin() } else { arg.cos() })
    })
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm ceiling; 0 disables.
    pub max_grad_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, max_grad_norm: 1.0 }
    }
}

#[derive(Debug, Clone)]
pub struct Adam<S> {
    cfg: AdamConfig,
    m: Vec<Tensor<S>>,
    v: Vec<Tensor<S>>,
    step: i32,
}

impl<S: Scalar> Adam<S> {
    pub fn new(params: &Params<S>, cfg: AdamConfig) -> Self {
        let zeros = || params.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self { cfg, m: zeros(), v: zeros(), step: 0 }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }

    /// One update; returns the pre-clipping global gradient norm.
    pub fn step(&mut self, params: &mut Params<S>, bound: &Bound, grads: &Gradients<S>) -> f64 {
        self.step += 1;
        let gsq: f64 = bound.vars.iter().filter_map(|&v| grads.get(v)).map(|g| g.dot(g).as_f64()).sum();
        let gnorm = gsq.sqrt();
        let clip = if self.cfg.max_grad_norm > 0.0 && gnorm > self.cfg.max_grad_norm {
            self.cfg.max_grad_norm / gnorm
        } else {
            1.0
        };
        let (b1, b2) = (S::of(self.cfg.beta1), S::of(self.cfg.beta2));
        let c1 = S::of(1.0 - self.cfg.beta1.powi(self.step));
        let c2 = S::of(1.0 - self.cfg.beta2.powi(self.step));
        let (lr, eps, clip) = (S::of(self.cfg.lr), S::of(self.cfg.eps), S::of(clip));
        for (i, &var) in bound.vars.iter().enumerate() {
            let Some(g) = grads.get(var) else { continue };
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (((p, &g), m), v) in params.tensors[i].data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                let g = g * clip;
                *m = b1 * *m + (S::one() - b1) * g;
                *v = b2 * *v + (S::one() - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            }
        }
        gnorm
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn adam_fits_a_line() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut params = Params::<f64>::default();
        let layer = Dense::new(&mut params, "fc", 1, 1, &mut rng);
        let xs = Tensor::new(&[4, 1], vec![-1.0, 0.0, 1.0, 2.0]).unwrap();
        let ys = xs.map(|x| 3.0 * x - 1.0);
        let mut opt = Adam::new(&params, AdamConfig { lr: 0.05, max_grad_norm: 0.0, ..Default::default() });
        for _ in 0..2000 {
            let mut tape = Tape::new();
            let b = params.bind(&mut tape, true);
            let x = tape.constant(xs.clone());
            let y = tape.constant(ys.clone());
            let p = layer.forward(&mut tape, &b, x).unwrap();
            let d = tape.sub(p, y).unwrap();
            let l = tape.sum_squares(d);
            let g = tape.backward(l).unwrap();
            opt.step(&mut params, &b, &g);
        }
        let w = params.get(ParamId(0)).data()[0];
        let bias = params.get(ParamId(1)).data()[0];
        assert!((w - 3.0).abs() < 1e-3 && (bias + 1.0).abs() < 1e-3, "{w} {bias}");
    }

    #[test]
    fn embedding_is_bounded_and_distinct() {
        let e = timestep_embedding::<f64>(&[1, 2, 50], 16);
        assert_eq!(e.shape(), &[3, 16]);
        assert!(e.data().iter().all(|v| v.abs() <= 1.0));
        assert_ne!(e.index_first(0), e.index_first(1));
    }

    #[test]
    fn load_rejects_renamed_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut a = Params::<f32>::default();
        Conv::new(&mut a, "c", 1, 2, 3, &mut rng);
        let mut stored = a.to_stored();
        stored[0].0 = "other.weight".into();
        assert!(a.clone().load_stored(&stored).is_err());
        assert!(a.clone().load_stored(&a.to_stored()).is_ok());
    }
}
