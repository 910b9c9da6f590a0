use crate::error::Result;
use crate::nn::{Ctx, Linear, ParamStore};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Var;

/// `fc2(relu(fc1(x)))`, width-preserving.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        width: usize,
        hidden: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), width, hidden, true, rng)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, width, true, rng)?,
        })
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(cx, x)?;
        let h = cx.tape.relu(h);
        self.fc2.forward(cx, h)
    }
}
