//! Composite layers built on [`Graph`] ops.

use crate::error::{Result, TensorError};
use crate::graph::{BnStats, Graph, Var};
use crate::scalar::Scalar;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Running statistics of one batch-norm instance.
#[derive(Clone, Debug, PartialEq)]
pub struct BnState<T> {
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: f64,
    pub eps: f64,
}

impl<T: Scalar> BnState<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    /// Normalizes `x` (channels last). Train mode uses batch statistics and
    /// folds them into the running estimates; eval mode uses the estimates.
    pub fn forward<'g>(
        &mut self,
        x: Var<'g, T>,
        gamma: Var<'g, T>,
        beta: Var<'g, T>,
        mode: Mode,
    ) -> Result<Var<'g, T>> {
        let g = x.graph();
        let c = *x.shape().last().unwrap_or(&0);
        if c != self.channels() {
            return Err(TensorError::Invalid(format!(
                "batch_norm: input has {c} channels, state has {}",
                self.channels()
            )));
        }
        let eps = T::of(self.eps);
        match mode {
            Mode::Train => {
                let (y, stats) = g.batch_norm(x, gamma, beta, BnStats::Batch, eps)?;
                let (mean, var) = stats.expect("batch stats are reported in train mode");
                let mom = T::of(self.momentum);
                for (r, m) in self.running_mean.iter_mut().zip(mean) {
                    *r = (T::one() - mom) * *r + mom * m;
                }
                for (r, v) in self.running_var.iter_mut().zip(var) {
                    *r = (T::one() - mom) * *r + mom * v;
                }
                Ok(y)
            }
            Mode::Eval => {
                let (y, _) = g.batch_norm(
                    x,
                    gamma,
                    beta,
                    BnStats::Running {
                        mean: &self.running_mean,
                        var: &self.running_var,
                    },
                    eps,
                )?;
                Ok(y)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolDomain {
    /// Mean over height and width: `[B,H,W,C] -> [B,C]`.
    Spatial,
    /// Mean over channels: `[B,H,W,C] -> [B,H,W]`.
    Channel,
}

pub fn global_pool<'g, T: Scalar>(x: Var<'g, T>, domain: PoolDomain) -> Result<Var<'g, T>> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(TensorError::Invalid(format!(
            "global_pool expects [B,H,W,C], got {s:?}"
        )));
    }
    match domain {
        PoolDomain::Spatial => x.reshape(&[s[0], s[1] * s[2], s[3]])?.mean_axis(1),
        PoolDomain::Channel => x.mean_axis(3),
    }
}

/// Constant tensor whose last two axes hold an additive causal mask
/// (`0` on and below the diagonal, a large negative value above it).
pub fn causal_mask<T: Scalar>(g: &Graph<T>, t: usize) -> Var<'_, T> {
    let neg = T::of(-1e9);
    let data = (0..t * t)
        .map(|i| if i % t > i / t { neg } else { T::zero() })
        .collect();
    g.constant(crate::Tensor::new(&[t, t], data).expect("t*t elements"))
}
