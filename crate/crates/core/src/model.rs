//! The assembled network and its two forward modes.

use std::collections::BTreeSet;

use crate::cdec::{Cdec, CdecOutput};
use crate::config::{Config, LossConfig};
use crate::data::{SampleRecord, TokenSeq};
use crate::encoders::{ImageEncoder, ImageEncoding, TextEncoder, TextFeatures};
use crate::error::{Error, Result};
use crate::heads::{recon_loss, seg_loss, total_loss, MaskHead, ReconHead};
use crate::neck::FusionNeck;
use crate::nn::{Ctx, ParamId, ParamStore};
use crate::qgm::{Qgm, QuerySet};
use crate::rng::{self, Rng};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

/// Tape scope holding every op of the reconstruction branch.
pub const RECON_SCOPE: &str = "reconstruction";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Everything, including the reconstruction branch.
    Train,
    /// Mask logits only.
    Inference,
}

#[derive(Clone, Debug)]
pub struct Architecture {
    pub text: TextEncoder,
    pub image: ImageEncoder,
    pub neck: FusionNeck,
    pub qgm: Qgm,
    pub cdec: Cdec,
    pub mask: MaskHead,
    pub recon: ReconHead,
    pub grid: (usize, usize),
}

pub struct Recon {
    pub fre: Var,
    pub fpt: Var,
}

pub struct Forward {
    pub text: TextFeatures,
    pub encoding: ImageEncoding,
    pub fv: Var,
    pub queries: QuerySet,
    pub decoder: CdecOutput,
    /// `[H, W]`.
    pub logits: Var,
    pub recon: Option<Recon>,
}

pub struct Losses {
    pub seg: Var,
    pub re: Var,
    pub total: Var,
}

impl Architecture {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, config: &Config, rng: &mut Rng) -> Result<Self> {
        let cfg = &config.model;
        let grid = config.decoder_grid();
        Ok(Self {
            text: TextEncoder::new(store, cfg, rng)?,
            image: ImageEncoder::new(store, cfg, rng)?,
            neck: FusionNeck::new(store, cfg, rng)?,
            qgm: Qgm::new(store, "qgm", cfg.width, cfg.num_queries, grid, rng)?,
            cdec: Cdec::new(store, cfg, grid, rng)?,
            mask: MaskHead::new(store, cfg, config.decoder_stride(), rng)?,
            recon: ReconHead::new(store, cfg.width, rng)?,
            grid,
        })
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, image: Var, tokens: &TokenSeq, mode: Mode) -> Result<Forward> {
        let text = self.text.forward(cx, tokens)?;
        let encoding = self.image.forward(cx, image, &text)?;
        let fv = self.neck.forward(cx, &encoding.pyramid)?;
        let queries = self.qgm.forward(cx, fv, text.ft, &text.valid)?;
        let train = mode == Mode::Train;
        let decoder = self.cdec.forward(cx, fv, queries.fq, text.ft, &text.valid, train)?;
        let grid = cx.tape.unflatten(decoder.fdec, self.grid.0, self.grid.1)?;
        let logits = self.mask.forward(cx, grid)?;
        let recon = if train {
            let previous = cx.tape.enter_scope(RECON_SCOPE);
            let r = self.reconstruct(cx, &text, decoder.fq);
            cx.tape.exit_scope(previous);
            Some(r?)
        } else {
            None
        };
        Ok(Forward {
            text,
            encoding,
            fv,
            queries,
            decoder,
            logits,
            recon,
        })
    }

    fn reconstruct<T: Scalar>(&self, cx: &mut Ctx<'_, T>, text: &TextFeatures, fq: Var) -> Result<Recon> {
        let fre = self.recon.reconstruct(cx, fq)?;
        let fpt = self.recon.project_text(cx, text.ft, text.ftg, &text.valid)?;
        Ok(Recon { fre, fpt })
    }

    pub fn losses<T: Scalar>(&self, tape: &mut Tape<T>, fwd: &Forward, gt: &Tensor<T>, weights: &LossConfig) -> Result<Losses> {
        let r = fwd
            .recon
            .as_ref()
            .ok_or_else(|| Error::Contract("losses need a training-mode forward".into()))?;
        let seg = seg_loss(tape, fwd.logits, gt)?;
        let previous = tape.enter_scope(RECON_SCOPE);
        let re = recon_loss(tape, r.fre, r.fpt);
        tape.exit_scope(previous);
        let re = re?;
        let total = total_loss(tape, seg, re, weights.seg_weight, weights.recon_weight)?;
        Ok(Losses { seg, re, total })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValues {
    pub seg: f64,
    pub re: f64,
    pub total: f64,
}

/// Architecture, parameter values and the configuration that built them.
#[derive(Clone, Debug)]
pub struct Model<T> {
    pub config: Config,
    pub arch: Architecture,
    pub params: ParamStore<T>,
}

impl<T: Scalar> Model<T> {
    /// Fresh parameters drawn from the init stream of `config.train.init_seed`.
    pub fn new(config: &Config) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut r = rng::stream(config.train.init_seed, rng::INIT_STREAM);
        let arch = Architecture::new(&mut params, config, &mut r)?;
        Ok(Self {
            config: config.clone(),
            arch,
            params,
        })
    }

    /// Parameters excluded from optimization: the calibration gains and
    /// calibration query modules when calibration is disabled.
    pub fn frozen(&self) -> BTreeSet<ParamId> {
        if self.config.model.cdec_enabled {
            BTreeSet::new()
        } else {
            self.arch.cdec.calibration_params().into_iter().collect()
        }
    }

    /// Mask logits `[H, W]` from an inference-mode forward.
    pub fn predict(&self, image: &Tensor<f32>, tokens: &TokenSeq) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape, |_| true);
        let mut cx = Ctx::new(&mut tape, &vars);
        let img = cx.tape.constant(image.cast());
        let fwd = self.arch.forward(&mut cx, img, tokens, Mode::Inference)?;
        Ok(tape.value(fwd.logits).clone())
    }

    /// Loss values and per-parameter gradients for one sample; frozen
    /// parameters get `None`.
    pub fn loss_and_grads(&self, sample: &SampleRecord) -> Result<(LossValues, Vec<Option<Tensor<T>>>)> {
        let frozen = self.frozen();
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape, |id| frozen.contains(&id));
        let mut cx = Ctx::new(&mut tape, &vars);
        let img = cx.tape.constant(sample.image.cast());
        let fwd = self.arch.forward(&mut cx, img, &sample.tokens, Mode::Train)?;
        let losses = self.arch.losses(&mut tape, &fwd, &sample.gt_mask.cast(), &self.config.loss)?;
        let value = |v: Var| tape.value(v).data()[0].to_f64_lossy();
        let values = LossValues {
            seg: value(losses.seg),
            re: value(losses.re),
            total: value(losses.total),
        };
        if !values.total.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss is not finite (seg {}, recon {})",
                values.seg, values.re
            )));
        }
        let mut grads = tape.backward(losses.total)?;
        let out = vars
            .iter()
            .enumerate()
            .map(|(i, &v)| if frozen.contains(&ParamId(i)) { None } else { grads.take(v) })
            .collect();
        Ok((values, out))
    }
}
