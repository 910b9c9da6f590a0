use crate::error::{Error, Result};
use crate::nn::{Ctx, ParamId, ParamStore};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Var;

/// Square-kernel convolution over `[H, W, C]` images. A 3×3 kernel uses
/// zero padding of 1, so stride 1 preserves the spatial extents.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub kernel: usize,
    pub stride: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("{name}: kernel size must be odd, got {kernel}")));
        }
        let area = kernel * kernel;
        let weight = store.glorot(
            format!("{name}.weight"),
            &[kernel, kernel, in_channels, out_channels],
            area * in_channels,
            area * out_channels,
            rng,
        )?;
        let bias = Some(store.zeros(format!("{name}.bias"), &[out_channels])?);
        Ok(Self {
            weight,
            bias,
            kernel,
            stride,
            in_channels,
            out_channels,
        })
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let bias = self.bias.map(|b| cx.p(b));
        cx.tape
            .conv2d(x, cx.p(self.weight), bias, self.stride, self.kernel / 2)
    }
}
