use crate::error::Result;
use crate::nn::{Ctx, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Var;

pub const LAYERNORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub offset: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gain: store.ones(format!("{name}.gain"), &[dim])?,
            offset: store.zeros(format!("{name}.offset"), &[dim])?,
        })
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        cx.tape
            .layernorm(x, cx.p(self.gain), cx.p(self.offset), LAYERNORM_EPS)
    }
}
