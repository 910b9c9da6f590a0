//! Adam with bias correction.

use crate::config::OptimConfig;
use crate::error::{Error, Result};
use crate::nn::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros = || params.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    /// One update. `grads[i]` belongs to parameter `i`; `None` leaves the
    /// parameter and its moments untouched. Nothing changes if any gradient
    /// is non-finite.
    pub fn update(&mut self, params: &mut ParamStore<T>, grads: &[Option<Tensor<T>>], hyper: &OptimConfig) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::Contract(format!(
                "{} gradients and {} moment slots for {} parameters",
                grads.len(),
                self.m.len(),
                params.len()
            )));
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                let name = params.name(ParamId(i));
                if g.shape() != params.get(ParamId(i)).shape() {
                    return Err(Error::dim("adam", format!("gradient {:?} for {name}", g.shape())));
                }
                if !g.is_finite() {
                    return Err(Error::NonFinite(format!("gradient of {name} is not finite")));
                }
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let f = T::from_f64_lossy;
        let (b1, b2) = (f(hyper.beta1), f(hyper.beta2));
        let c1 = T::one() - b1.powi(t);
        let c2 = T::one() - b2.powi(t);
        let (lr, eps) = (f(hyper.lr), f(hyper.eps));
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let p = params.get_mut(ParamId(i)).data_mut();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for k in 0..p.len() {
                let gk = g.data()[k];
                m[k] = b1 * m[k] + (T::one() - b1) * gk;
                v[k] = b2 * v[k] + (T::one() - b2) * gk * gk;
                let mh = m[k] / c1;
                let vh = v[k] / c2;
                p[k] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}
