//! Adam with bias correction.

use super::tensor::Param;
use super::{NnError, Real};

pub const DEFAULT_BETA1: f64 = 0.9;
pub const DEFAULT_BETA2: f64 = 0.999;
pub const DEFAULT_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Number of completed steps.
    pub t: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(sizes: &[usize]) -> Self {
        Self::with_hyper(sizes, DEFAULT_BETA1, DEFAULT_BETA2, DEFAULT_EPS)
    }

    pub fn with_hyper(sizes: &[usize], beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            t: 0,
            m: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            v: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
        }
    }

    /// One update of every parameter from its accumulated gradient.
    pub fn step(&mut self, params: &mut [&mut Param<T>], lr: f64) -> Result<(), NnError> {
        if params.len() != self.m.len() || params.iter().zip(&self.m).any(|(p, m)| p.len() != m.len()) {
            return Err(NnError::ShapeMismatch("optimizer state does not match parameter list".into()));
        }
        self.t += 1;
        let t = self.t as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.value.len() {
                let g = p.grad[i].to_f64().unwrap();
                let mi = b1 * m[i].to_f64().unwrap() + (1.0 - b1) * g;
                let vi = b2 * v[i].to_f64().unwrap() + (1.0 - b2) * g * g;
                m[i] = T::lit(mi);
                v[i] = T::lit(vi);
                let upd = lr * (mi / c1) / ((vi / c2).sqrt() + self.eps);
                p.value[i] = T::lit(p.value[i].to_f64().unwrap() - upd);
            }
        }
        Ok(())
    }
}
