use ndarray::{ArrayD, ArrayViewMutD, Zip};

use crate::error::{Error, Result};
use crate::nn::Scalar;

/// Stochastic gradient descent with classical momentum:
/// `v <- momentum * v - lr * g; p <- p + v`.
#[derive(Debug, Clone)]
pub struct Sgd<T> {
    pub learning_rate: T,
    pub momentum: T,
    velocity: Vec<ArrayD<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(learning_rate: T, momentum: T) -> Self {
        Sgd {
            learning_rate,
            momentum,
            velocity: Vec::new(),
        }
    }

    pub fn velocity(&self) -> &[ArrayD<T>] {
        &self.velocity
    }

    /// Applies one update. Velocity buffers are created on the first call
    /// and must keep matching the parameter shapes afterwards.
    pub fn step(&mut self, params: Vec<ArrayViewMutD<'_, T>>, grads: &[ArrayD<T>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Config(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| ArrayD::zeros(p.raw_dim())).collect();
        }
        if self.velocity.len() != params.len() {
            return Err(Error::Config("optimizer bound to a different parameter set".into()));
        }
        for ((p, g), v) in params.iter().zip(grads).zip(&self.velocity) {
            if p.shape() != g.shape() || p.shape() != v.shape() {
                return Err(Error::Config(format!(
                    "shape mismatch: param {:?}, grad {:?}, velocity {:?}",
                    p.shape(),
                    g.shape(),
                    v.shape()
                )));
            }
        }
        let (lr, mu) = (self.learning_rate, self.momentum);
        for ((mut p, g), v) in params.into_iter().zip(grads).zip(&mut self.velocity) {
            Zip::from(&mut p).and(v).and(g).for_each(|p, v, &g| {
                *v = mu * *v - lr * g;
                *p += *v;
            });
        }
        Ok(())
    }
}
