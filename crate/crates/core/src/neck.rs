//! Fusion neck: merges the three fused stages into one grid at stage-3
//! resolution, with coordinate channels.

use crate::config::ModelConfig;
use crate::encoders::FeaturePyramid;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Ctx, Linear, ParamStore};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{Tensor, Var};

/// `[h, w, 2]`: channel 0 is x and channel 1 is y, each spaced evenly over
/// `[-1, 1]`; a single row or column sits at 0.
pub fn coord_grid<T: Scalar>(h: usize, w: usize) -> Tensor<T> {
    let axis = |i: usize, n: usize| {
        if n <= 1 {
            0.0
        } else {
            -1.0 + 2.0 * i as f64 / (n - 1) as f64
        }
    };
    let mut data = Vec::with_capacity(h * w * 2);
    for y in 0..h {
        for x in 0..w {
            data.push(T::from_f64_lossy(axis(x, w)));
            data.push(T::from_f64_lossy(axis(y, h)));
        }
    }
    Tensor::new(&[h, w, 2], data).expect("coordinate extents")
}

#[derive(Clone, Debug)]
pub struct FusionNeck {
    pub v4: Linear,
    pub m4: Linear,
    pub v3: Linear,
    pub m3: Linear,
    pub v2: Linear,
    /// 1×1 aggregation of `[F_m2, F_m3, F_m4]` (3C channels) to C.
    pub aggregate: Conv2d,
    /// 1×1 fusion of `[F_m, coords]` to C.
    pub fuse: Conv2d,
}

impl FusionNeck {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        let c = cfg.width;
        let half = c / 2;
        let ch = cfg.stage_channels;
        Ok(Self {
            v4: Linear::new(store, "neck.v4", ch[3], c, true, rng)?,
            m4: Linear::new(store, "neck.m4", c, half, true, rng)?,
            v3: Linear::new(store, "neck.v3", ch[2], c - half, true, rng)?,
            m3: Linear::new(store, "neck.m3", c, half, true, rng)?,
            v2: Linear::new(store, "neck.v2", ch[1], c - half, true, rng)?,
            aggregate: Conv2d::new(store, "neck.aggregate", 3 * c, c, 1, 1, rng)?,
            fuse: Conv2d::new(store, "neck.fuse", c + 2, c, 1, 1, rng)?,
        })
    }

    /// Returns `F_v: [H/8, W/8, C]`.
    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, pyr: &FeaturePyramid) -> Result<Var> {
        let s2 = cx.tape.shape(pyr.fv2).to_vec();
        let s3 = cx.tape.shape(pyr.fv3).to_vec();
        let s4 = cx.tape.shape(pyr.fv4).to_vec();
        let consistent = s2.len() == 3
            && s3.len() == 3
            && s4.len() == 3
            && s3[0] == 2 * s4[0]
            && s3[1] == 2 * s4[1]
            && s2[0] == 2 * s3[0]
            && s2[1] == 2 * s3[1];
        if !consistent {
            return Err(Error::dim(
                "fusion_neck",
                format!("pyramid extents {s2:?}, {s3:?}, {s4:?} are not successive halvings"),
            ));
        }
        let (h, w) = (s3[0], s3[1]);
        let t = &mut *cx;
        let a = self.v4.forward(t, pyr.fv4)?;
        let a = t.tape.relu(a);
        let fm4 = t.tape.upsample2x(a)?;

        let a = self.m4.forward(t, fm4)?;
        let a = t.tape.relu(a);
        let b = self.v3.forward(t, pyr.fv3)?;
        let b = t.tape.relu(b);
        let fm3 = t.tape.concat(&[a, b], 2)?;

        let a = self.m3.forward(t, fm3)?;
        let a = t.tape.relu(a);
        let pooled = t.tape.avgpool2x2(pyr.fv2)?;
        let b = self.v2.forward(t, pooled)?;
        let b = t.tape.relu(b);
        let fm2 = t.tape.concat(&[a, b], 2)?;

        let stacked = t.tape.concat(&[fm2, fm3, fm4], 2)?;
        let fm = self.aggregate.forward(t, stacked)?;
        let coords = t.tape.constant(coord_grid(h, w));
        let with_coords = t.tape.concat(&[fm, coords], 2)?;
        self.fuse.forward(t, with_coords)
    }
}
