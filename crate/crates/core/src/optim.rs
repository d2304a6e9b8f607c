//! First-order optimizers over a [`ModelParams`] store.

use std::fmt;
use std::str::FromStr;

use crate::encoder::ModelParams;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum OptimizerKind {
    /// Gradient descent with heavy-ball momentum.
    #[default]
    Sgd,
    Adam,
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(Self::Sgd),
            "adam" => Ok(Self::Adam),
            other => Err(Error::config(format!("unknown optimizer `{other}` (expected sgd or adam)"))),
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Sgd => "sgd",
            Self::Adam => "adam",
        })
    }
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut [Matrix<T>], max_norm: T) -> T {
    let norm = grads.iter().map(Matrix::squared_norm).sum::<T>().sqrt();
    if norm > max_norm && norm > T::zero() {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.scale_assign(s);
        }
    }
    norm
}

#[derive(Clone, Debug)]
pub enum Optimizer<T> {
    Sgd { lr: T, momentum: T, velocity: Vec<Matrix<T>> },
    Adam { lr: T, beta1: T, beta2: T, eps: T, step: i32, m: Vec<Matrix<T>>, v: Vec<Matrix<T>> },
}

fn zeros_like<T: Scalar>(params: &ModelParams<T>) -> Vec<Matrix<T>> {
    params.tensors().iter().map(|t| Matrix::zeros(t.rows(), t.cols())).collect()
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(kind: OptimizerKind, lr: f64, momentum: f64, params: &ModelParams<T>) -> Self {
        match kind {
            OptimizerKind::Sgd => Self::sgd(lr, momentum, params),
            OptimizerKind::Adam => Self::adam(lr, params),
        }
    }

    pub fn sgd(lr: f64, momentum: f64, params: &ModelParams<T>) -> Self {
        Self::Sgd { lr: T::lit(lr), momentum: T::lit(momentum), velocity: zeros_like(params) }
    }

    pub fn adam(lr: f64, params: &ModelParams<T>) -> Self {
        Self::Adam {
            lr: T::lit(lr),
            beta1: T::lit(0.9),
            beta2: T::lit(0.999),
            eps: T::lit(1e-8),
            step: 0,
            m: zeros_like(params),
            v: zeros_like(params),
        }
    }

    /// Applies one update. `grads` follows the tensor order of `params`.
    pub fn step(&mut self, params: &mut ModelParams<T>, grads: &[Matrix<T>]) {
        assert_eq!(grads.len(), params.tensors().len(), "one gradient per tensor");
        match self {
            Self::Sgd { lr, momentum, velocity } => {
                for ((p, g), vel) in params.tensors_mut().iter_mut().zip(grads).zip(velocity.iter_mut()) {
                    for ((x, &gi), vi) in p.as_mut_slice().iter_mut().zip(g.as_slice()).zip(vel.as_mut_slice()) {
                        *vi = *momentum * *vi + gi;
                        *x -= *lr * *vi;
                    }
                }
            }
            Self::Adam { lr, beta1, beta2, eps, step, m, v } => {
                *step += 1;
                let c1 = T::one() - beta1.powi(*step);
                let c2 = T::one() - beta2.powi(*step);
                let one = T::one();
                for (((p, g), mi), vi) in params.tensors_mut().iter_mut().zip(grads).zip(m.iter_mut()).zip(v.iter_mut()) {
                    let it = p.as_mut_slice().iter_mut().zip(g.as_slice()).zip(mi.as_mut_slice()).zip(vi.as_mut_slice());
                    for (((x, &gi), m1), m2) in it {
                        *m1 = *beta1 * *m1 + (one - *beta1) * gi;
                        *m2 = *beta2 * *m2 + (one - *beta2) * gi * gi;
                        let mh = *m1 / c1;
                        let vh = *m2 / c2;
                        *x -= *lr * mh / (vh.sqrt() + *eps);
                    }
                }
            }
        }
    }
}
