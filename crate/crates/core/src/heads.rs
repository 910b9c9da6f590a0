//! Mask head, language reconstruction head and the training objective.

use crate::config::{MaskUpsample, ModelConfig};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Ctx, Linear, ParamStore};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

/// 3×3 conv on the decoder grid, brought to image resolution.
#[derive(Clone, Debug)]
pub struct MaskHead {
    pub conv: Conv2d,
    pub upsample: MaskUpsample,
    pub stride: usize,
}

impl MaskHead {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        cfg: &ModelConfig,
        stride: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let out = match cfg.mask_upsample {
            MaskUpsample::PixelShuffle => stride * stride,
            MaskUpsample::Nearest => 1,
        };
        Ok(Self {
            conv: Conv2d::new(store, "mask.conv", cfg.width, out, 3, 1, rng)?,
            upsample: cfg.mask_upsample,
            stride,
        })
    }

    /// `grid: [H_v, W_v, C]` → logits `[H_v·s, W_v·s]`.
    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, grid: Var) -> Result<Var> {
        let y = self.conv.forward(cx, grid)?;
        let up = match self.upsample {
            MaskUpsample::PixelShuffle => cx.tape.depth_to_space(y, self.stride)?,
            MaskUpsample::Nearest => cx.tape.upsample_nearest(y, self.stride)?,
        };
        let s = cx.tape.shape(up).to_vec();
        cx.tape.reshape(up, &s[..2])
    }
}

/// Three linear maps with relu between them.
#[derive(Clone, Debug)]
pub struct Projection {
    pub layers: [Linear; 3],
}

impl Projection {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, width: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            layers: [
                Linear::new(store, &format!("{name}.0"), width, width, true, rng)?,
                Linear::new(store, &format!("{name}.1"), width, width, true, rng)?,
                Linear::new(store, &format!("{name}.2"), width, width, true, rng)?,
            ],
        })
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let h = self.layers[0].forward(cx, x)?;
        let h = cx.tape.relu(h);
        let h = self.layers[1].forward(cx, h)?;
        let h = cx.tape.relu(h);
        self.layers[2].forward(cx, h)
    }
}

fn row_mean<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let m = tape.mean_axis(x, 0)?;
    let c = tape.shape(m)[0];
    tape.reshape(m, &[1, c])
}

#[derive(Clone, Debug)]
pub struct ReconHead {
    pub reconstruct: Projection,
    pub project: Projection,
}

impl ReconHead {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, width: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            reconstruct: Projection::new(store, "recon.re", width, rng)?,
            project: Projection::new(store, "recon.pt", width, rng)?,
        })
    }

    /// `F_re = mean_rows(W_re(F_q^N))`, `[1, C]`.
    pub fn reconstruct<T: Scalar>(&self, cx: &mut Ctx<'_, T>, fq: Var) -> Result<Var> {
        let p = self.reconstruct.forward(cx, fq)?;
        row_mean(cx.tape, p)
    }

    /// `F_pt = mean_rows(relu(W_pt([F_t unpadded rows; F_tg])))`, `[1, C]`.
    pub fn project_text<T: Scalar>(&self, cx: &mut Ctx<'_, T>, ft: Var, ftg: Var, valid: &[bool]) -> Result<Var> {
        let rows: Vec<usize> = (0..valid.len()).filter(|&i| valid[i]).collect();
        let words = cx.tape.select_rows(ft, &rows)?;
        let all = cx.tape.concat(&[words, ftg], 0)?;
        let p = self.project.forward(cx, all)?;
        let p = cx.tape.relu(p);
        row_mean(cx.tape, p)
    }
}

/// Mean over the width of `(a − b)²`.
pub fn recon_loss<T: Scalar>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::dim(
            "recon_loss",
            format!("{:?} vs {:?}", tape.shape(a), tape.shape(b)),
        ));
    }
    let d = tape.sub(a, b)?;
    let sq = tape.mul(d, d)?;
    Ok(tape.mean_all(sq))
}

/// Mean per-pixel binary cross-entropy on logits.
pub fn seg_loss<T: Scalar>(tape: &mut Tape<T>, logits: Var, gt: &Tensor<T>) -> Result<Var> {
    tape.bce_with_logits(logits, gt)
}

pub fn total_loss<T: Scalar>(tape: &mut Tape<T>, l_seg: Var, l_re: Var, w_seg: f64, w_re: f64) -> Result<Var> {
    let a = tape.scale(l_seg, T::from_f64_lossy(w_seg));
    let b = tape.scale(l_re, T::from_f64_lossy(w_re));
    tape.add(a, b)
}
