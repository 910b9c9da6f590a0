use crate::error::{Error, Result};
use crate::nn::{Ctx, ParamId, ParamStore};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Var;

/// `y = x·W (+ b)` with `W: [in, out]`, applied to the trailing axis.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        let weight = store.glorot(format!("{name}.weight"), &[in_dim, out_dim], in_dim, out_dim, rng)?;
        let bias = if bias {
            Some(store.zeros(format!("{name}.bias"), &[out_dim])?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    /// Accepts `[rows, in]` or `[H, W, in]`; the output keeps the leading axes.
    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let shape = cx.tape.shape(x).to_vec();
        if shape.last() != Some(&self.in_dim) {
            return Err(Error::dim(
                "linear",
                format!("input {shape:?} for a {}→{} layer", self.in_dim, self.out_dim),
            ));
        }
        let flat = if shape.len() == 2 { x } else { cx.tape.flatten(x)? };
        let mut y = cx.tape.matmul(flat, cx.p(self.weight))?;
        if let Some(b) = self.bias {
            y = cx.tape.add_bias(y, cx.p(b))?;
        }
        if shape.len() == 2 {
            Ok(y)
        } else {
            let mut out = shape;
            *out.last_mut().unwrap() = self.out_dim;
            cx.tape.reshape(y, &out)
        }
    }
}
