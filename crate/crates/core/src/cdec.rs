//! Calibration decoder: pre-norm decoder layers over vision tokens whose
//! keys and values come from language queries that are recalibrated from
//! the decoder stream after every layer.

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::posenc::{sine_1d, sine_2d};
use crate::nn::{Attention, Ctx, LayerNorm, Mlp, ParamId, ParamStore};
use crate::qgm::{Qgm, QuerySet};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{Tensor, Var};

#[derive(Clone, Debug)]
pub struct CdecLayer {
    pub norm1: LayerNorm,
    pub self_attn: Attention,
    pub norm2: LayerNorm,
    pub cross_attn: Attention,
    pub norm3: LayerNorm,
    pub mlp: Mlp,
}

pub struct LayerOutput {
    pub fdec: Var,
    pub self_weights: Vec<Var>,
    pub cross_weights: Vec<Var>,
}

impl CdecLayer {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, cfg: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        let c = cfg.width;
        Ok(Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), c)?,
            self_attn: Attention::new(store, &format!("{name}.self"), c, cfg.heads, rng)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), c)?,
            cross_attn: Attention::new(store, &format!("{name}.cross"), c, cfg.heads, rng)?,
            norm3: LayerNorm::new(store, &format!("{name}.norm3"), c)?,
            mlp: Mlp::new(store, &format!("{name}.mlp"), c, cfg.ffn_dim, rng)?,
        })
    }

    /// `fdec: [S, C]` attends to itself, then to `fq: [N_q, C]`, then
    /// passes through the MLP; each step is residual.
    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, fdec: Var, fq: Var) -> Result<LayerOutput> {
        let c = self.self_attn.width();
        for (what, v) in [("stream", fdec), ("queries", fq)] {
            if cx.tape.shape(v).len() != 2 || cx.tape.shape(v)[1] != c {
                return Err(Error::dim(
                    "cdec_layer",
                    format!("{what} {:?} for width {c}", cx.tape.shape(v)),
                ));
            }
        }
        let h = self.norm1.forward(cx, fdec)?;
        let sa = self.self_attn.self_attend(cx, h, None)?;
        let f1 = cx.tape.add(sa.out, fdec)?;
        let h = self.norm2.forward(cx, f1)?;
        let ca = self.cross_attn.cross_attend(cx, h, fq, None)?;
        let f2 = cx.tape.add(ca.out, f1)?;
        let h = self.norm3.forward(cx, f2)?;
        let m = self.mlp.forward(cx, h)?;
        let out = cx.tape.add(m, f2)?;
        Ok(LayerOutput {
            fdec: out,
            self_weights: sa.weights,
            cross_weights: ca.weights,
        })
    }
}

pub struct Calibrated {
    /// `F_q^n`.
    pub fq: Var,
    /// `F_cq^n`.
    pub fcq: Var,
    pub attention: Var,
}

/// `F_q^n = α_n · QGM(F_t, F_dec^n) + F_q^{n−1}`, with `fdec: [S, C]`
/// viewed as the `grid`.
#[allow(clippy::too_many_arguments)]
pub fn calibrate<T: Scalar>(
    cx: &mut Ctx<'_, T>,
    qgm: &Qgm,
    ft: Var,
    valid: &[bool],
    fdec: Var,
    grid: (usize, usize),
    fq_prev: Var,
    alpha: Var,
) -> Result<Calibrated> {
    let source = cx.tape.unflatten(fdec, grid.0, grid.1)?;
    let QuerySet { fq: fcq, attention } = qgm.forward(cx, source, ft, valid)?;
    let scaled = cx.tape.scale_by(fcq, alpha)?;
    let fq = cx.tape.add(scaled, fq_prev)?;
    Ok(Calibrated { fq, fcq, attention })
}

/// What a decoder pass produces.
pub struct CdecOutput {
    /// `F_dec^N: [S, C]`.
    pub fdec: Var,
    /// `F_q^N`, or the last calibrated queries when the final calibration was
    /// skipped.
    pub fq: Var,
    /// `F_q^0`, the queries plus their position code.
    pub fq0: Var,
    /// `F_cq^n` for each calibration that ran.
    pub calibrations: Vec<Var>,
    pub layers: Vec<LayerOutput>,
    pub calibration_attention: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct Cdec {
    pub layers: Vec<CdecLayer>,
    /// One per layer, or a single shared module.
    pub qgms: Vec<Qgm>,
    pub alphas: Vec<ParamId>,
    grid: (usize, usize),
    width: usize,
    num_queries: usize,
}

impl Cdec {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        cfg: &ModelConfig,
        grid: (usize, usize),
        rng: &mut Rng,
    ) -> Result<Self> {
        if cfg.decoder_layers == 0 {
            return Err(Error::Config("the decoder needs at least one layer".into()));
        }
        let n = cfg.decoder_layers;
        let mut layers = Vec::with_capacity(n);
        let mut qgms = Vec::new();
        let mut alphas = Vec::with_capacity(n);
        for i in 0..n {
            layers.push(CdecLayer::new(store, &format!("cdec.layer{i}"), cfg, rng)?);
            if i == 0 || !cfg.share_qgm_params {
                let name = if cfg.share_qgm_params {
                    "cdec.calib".to_string()
                } else {
                    format!("cdec.calib{i}")
                };
                qgms.push(Qgm::new(store, &name, cfg.width, cfg.num_queries, grid, rng)?);
            }
            alphas.push(store.zeros(format!("cdec.alpha{i}"), &[1])?);
        }
        Ok(Self {
            layers,
            qgms,
            alphas,
            grid,
            width: cfg.width,
            num_queries: cfg.num_queries,
        })
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    fn qgm(&self, layer: usize) -> &Qgm {
        &self.qgms[layer.min(self.qgms.len() - 1)]
    }

    /// Parameters that exist only for calibration: the gains and the
    /// calibration query modules.
    pub fn calibration_params(&self) -> Vec<ParamId> {
        let mut ids = self.alphas.clone();
        for q in &self.qgms {
            ids.extend([q.conv.weight, q.wc.weight, q.wt.weight, q.wq.weight]);
            ids.extend(q.conv.bias);
        }
        ids
    }

    fn inputs<T: Scalar>(&self, cx: &mut Ctx<'_, T>, fv: Var, fq: Var) -> Result<(Var, Var)> {
        let shape = cx.tape.shape(fv).to_vec();
        if shape != [self.grid.0, self.grid.1, self.width] {
            return Err(Error::dim(
                "cdec",
                format!("grid {shape:?}, expected [{}, {}, {}]", self.grid.0, self.grid.1, self.width),
            ));
        }
        if cx.tape.shape(fq) != [self.num_queries, self.width] {
            return Err(Error::dim("cdec", format!("queries {:?}", cx.tape.shape(fq))));
        }
        let flat = cx.tape.flatten(fv)?;
        let pe = cx.tape.constant(sine_2d::<T>(self.grid.0, self.grid.1, self.width)?);
        let fdec0 = cx.tape.add(flat, pe)?;
        let qpe = cx.tape.constant(sine_1d::<T>(self.num_queries, self.width)?);
        let fq0 = cx.tape.add(fq, qpe)?;
        Ok((fdec0, fq0))
    }

    /// Runs every layer followed by its calibration. With
    /// `calibrate_last == false` the final calibration, which only feeds
    /// the reconstruction branch, is skipped.
    pub fn forward<T: Scalar>(
        &self,
        cx: &mut Ctx<'_, T>,
        fv: Var,
        fq: Var,
        ft: Var,
        valid: &[bool],
        calibrate_last: bool,
    ) -> Result<CdecOutput> {
        let (mut fdec, fq0) = self.inputs(cx, fv, fq)?;
        let mut fq = fq0;
        let mut out = CdecOutput {
            fdec,
            fq,
            fq0,
            calibrations: Vec::new(),
            layers: Vec::with_capacity(self.depth()),
            calibration_attention: Vec::new(),
        };
        for (n, layer) in self.layers.iter().enumerate() {
            let lo = layer.forward(cx, fdec, fq)?;
            fdec = lo.fdec;
            out.layers.push(lo);
            if n + 1 == self.depth() && !calibrate_last {
                break;
            }
            let alpha = cx.p(self.alphas[n]);
            let cal = calibrate(cx, self.qgm(n), ft, valid, fdec, self.grid, fq, alpha)?;
            fq = cal.fq;
            out.calibrations.push(cal.fcq);
            out.calibration_attention.push(cal.attention);
        }
        out.fdec = fdec;
        out.fq = fq;
        Ok(out)
    }

    /// The same layers with `F_q^0` as keys and values at every depth and no
    /// calibration: a standard transformer decoder.
    pub fn forward_fixed<T: Scalar>(&self, cx: &mut Ctx<'_, T>, fv: Var, fq: Var) -> Result<Var> {
        let (mut fdec, fq0) = self.inputs(cx, fv, fq)?;
        for layer in &self.layers {
            fdec = layer.forward(cx, fdec, fq0)?.fdec;
        }
        Ok(fdec)
    }
}

/// Reads the gains back out of a parameter store.
pub fn alpha_values<T: Scalar>(store: &ParamStore<T>, cdec: &Cdec) -> Vec<f64> {
    cdec.alphas
        .iter()
        .map(|&a| store.get(a).data()[0].to_f64_lossy())
        .collect()
}

/// Sets every gain to `value`.
pub fn set_alphas<T: Scalar>(store: &mut ParamStore<T>, cdec: &Cdec, value: f64) -> Result<()> {
    for &a in &cdec.alphas {
        store.set(a, Tensor::scalar(T::from_f64_lossy(value)))?;
    }
    Ok(())
}
