//! Toy text and image encoders, with vision-language fusion between the
//! image stages.

use crate::config::ModelConfig;
use crate::data::TokenSeq;
use crate::error::{Error, Result};
use crate::nn::posenc::sine_1d;
use crate::nn::{Attention, Conv2d, Ctx, LayerNorm, Linear, Mlp, ParamStore};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Var;

/// Encoded expression.
pub struct TextFeatures {
    /// `[L_max, C]`; rows at pad positions carry values but are masked out
    /// of every later softmax and average.
    pub ft: Var,
    /// `[1, C]`, a linear map of the global-slot row.
    pub ftg: Var,
    /// `true` at unpadded positions.
    pub valid: Vec<bool>,
}

#[derive(Clone, Debug)]
struct TextBlock {
    norm1: LayerNorm,
    attn: Attention,
    norm2: LayerNorm,
    mlp: Mlp,
}

/// Token embedding, fixed sinusoidal positions and pre-norm self-attention
/// blocks.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub embedding: crate::nn::ParamId,
    blocks: Vec<TextBlock>,
    final_norm: LayerNorm,
    pub global: Linear,
    width: usize,
    max_len: usize,
}

impl TextEncoder {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        let c = cfg.width;
        let embedding = store.glorot("text.embedding", &[cfg.vocab_size, c], cfg.vocab_size, c, rng)?;
        let blocks = (0..cfg.text_layers)
            .map(|i| {
                let n = format!("text.block{i}");
                Ok(TextBlock {
                    norm1: LayerNorm::new(store, &format!("{n}.norm1"), c)?,
                    attn: Attention::new(store, &format!("{n}.attn"), c, cfg.heads, rng)?,
                    norm2: LayerNorm::new(store, &format!("{n}.norm2"), c)?,
                    mlp: Mlp::new(store, &format!("{n}.mlp"), c, cfg.ffn_dim, rng)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            embedding,
            blocks,
            final_norm: LayerNorm::new(store, "text.norm", c)?,
            global: Linear::new(store, "text.global", c, c, true, rng)?,
            width: c,
            max_len: cfg.max_len,
        })
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, tokens: &TokenSeq) -> Result<TextFeatures> {
        if tokens.max_len() != self.max_len {
            return Err(Error::dim(
                "encode_text",
                format!("sequence of length {} for an encoder of length {}", tokens.max_len(), self.max_len),
            ));
        }
        let valid = tokens.valid_mask();
        if !valid.iter().any(|&v| v) {
            return Err(Error::Contract("expression has no unpadded token".into()));
        }
        let emb = cx.tape.select_rows(cx.p(self.embedding), tokens.ids())?;
        let pe = cx.tape.constant(sine_1d(self.max_len, self.width)?);
        let mut x = cx.tape.add(emb, pe)?;
        for b in &self.blocks {
            let h = b.norm1.forward(cx, x)?;
            let a = b.attn.self_attend(cx, h, Some(&valid))?;
            x = cx.tape.add(x, a.out)?;
            let h = b.norm2.forward(cx, x)?;
            let m = b.mlp.forward(cx, h)?;
            x = cx.tape.add(x, m)?;
        }
        let ft = self.final_norm.forward(cx, x)?;
        let head = cx.tape.select_rows(ft, &[0])?;
        let ftg = self.global.forward(cx, head)?;
        Ok(TextFeatures { ft, ftg, valid })
    }
}

/// Single-head cross-attention from image positions (queries) to words
/// (keys and values), scaled by `1/√C_i`.
#[derive(Clone, Debug)]
pub struct Vlf {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    channels: usize,
}

pub struct VlfOutput {
    /// `[H_i, W_i, C_i]`.
    pub fused: Var,
    /// `[H_i·W_i, L_max]`.
    pub attention: Var,
}

impl Vlf {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        text_width: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        Ok(Self {
            query: Linear::new(store, &format!("{name}.q"), channels, channels, true, rng)?,
            key: Linear::new(store, &format!("{name}.k"), text_width, channels, true, rng)?,
            value: Linear::new(store, &format!("{name}.v"), text_width, channels, true, rng)?,
            output: Linear::new(store, &format!("{name}.o"), channels, channels, true, rng)?,
            channels,
        })
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, v: Var, ft: Var, valid: &[bool]) -> Result<VlfOutput> {
        let &[h, w, c] = cx.tape.shape(v) else {
            return Err(Error::dim("vlf", format!("expected [H, W, C], got {:?}", cx.tape.shape(v))));
        };
        if c != self.channels {
            return Err(Error::dim("vlf", format!("{c} channels for a {}-channel fusion", self.channels)));
        }
        let flat = cx.tape.flatten(v)?;
        let q = self.query.forward(cx, flat)?;
        let k = self.key.forward(cx, ft)?;
        let val = self.value.forward(cx, ft)?;
        let kt = cx.tape.transpose(k)?;
        let scores = cx.tape.matmul(q, kt)?;
        let scores = cx.tape.scale(scores, T::one() / T::from_count(c).sqrt());
        let attention = cx.tape.softmax_lastdim(scores, Some(valid))?;
        let mixed = cx.tape.matmul(attention, val)?;
        let grid = cx.tape.unflatten(mixed, h, w)?;
        let fused = self.output.forward(cx, grid)?;
        Ok(VlfOutput { fused, attention })
    }
}

/// Stride-2 3×3 conv with relu, then `h + conv3x3(h)`.
#[derive(Clone, Debug)]
pub struct VisionStage {
    pub down: Conv2d,
    pub residual: Conv2d,
}

impl VisionStage {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            down: Conv2d::new(store, &format!("{name}.down"), cin, cout, 3, 2, rng)?,
            residual: Conv2d::new(store, &format!("{name}.res"), cout, cout, 3, 1, rng)?,
        })
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let h = self.down.forward(cx, x)?;
        let h = cx.tape.relu(h);
        let r = self.residual.forward(cx, h)?;
        cx.tape.add(h, r)
    }
}

/// Fused stages 2–4 at `H/4`, `H/8`, `H/16`.
pub struct FeaturePyramid {
    pub fv2: Var,
    pub fv3: Var,
    pub fv4: Var,
}

pub struct ImageEncoding {
    pub pyramid: FeaturePyramid,
    /// Stage outputs `V_1..V_4` before fusion.
    pub stages: [Var; 4],
    /// Raw fusion outputs `δ_i(V_i, F_t)` for stages 2–4.
    pub vlf: [Var; 3],
    /// Word attention of each fusion, `[H_i·W_i, L_max]`.
    pub attention: [Var; 3],
}

#[derive(Clone, Debug)]
pub struct ImageEncoder {
    pub stages: Vec<VisionStage>,
    pub fusions: Vec<Vlf>,
}

impl ImageEncoder {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        let ch = cfg.stage_channels;
        let mut stages = Vec::with_capacity(4);
        let mut cin = 3;
        for (i, &c) in ch.iter().enumerate() {
            stages.push(VisionStage::new(store, &format!("image.stage{}", i + 1), cin, c, rng)?);
            cin = c;
        }
        let fusions = (1..4)
            .map(|i| Vlf::new(store, &format!("image.vlf{}", i + 1), ch[i], cfg.width, rng))
            .collect::<Result<_>>()?;
        Ok(Self { stages, fusions })
    }

    /// Stage `i+1` consumes `V_i + relu(δ_i(V_i, F_t))` from stage 2 on; the
    /// pyramid holds those fused streams for stages 2, 3 and 4.
    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, image: Var, text: &TextFeatures) -> Result<ImageEncoding> {
        let &[h, w, 3] = cx.tape.shape(image) else {
            return Err(Error::dim("encode_image", format!("expected [H, W, 3], got {:?}", cx.tape.shape(image))));
        };
        if h % 16 != 0 || w % 16 != 0 || h == 0 || w == 0 {
            return Err(Error::dim("encode_image", format!("{h}×{w} is not divisible by 16")));
        }
        let v1 = self.stages[0].forward(cx, image)?;
        let mut x = v1;
        let mut stages = [v1; 4];
        let mut fused = [v1; 3];
        let mut vlf = [v1; 3];
        let mut attention = [v1; 3];
        for i in 1..4 {
            let v = self.stages[i].forward(cx, x)?;
            stages[i] = v;
            let f = self.fusions[i - 1].forward(cx, v, text.ft, &text.valid)?;
            let r = cx.tape.relu(f.fused);
            x = cx.tape.add(v, r)?;
            fused[i - 1] = x;
            vlf[i - 1] = f.fused;
            attention[i - 1] = f.attention;
        }
        Ok(ImageEncoding {
            pyramid: FeaturePyramid {
                fv2: fused[0],
                fv3: fused[1],
                fv4: fused[2],
            },
            stages,
            vlf,
            attention,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Config;
    use crate::rng;
    use crate::tensor::{Tape, Tensor};

    fn setup() -> (ParamStore<f64>, TextEncoder, ImageEncoder, ModelConfig) {
        let cfg = Config::gradcheck().model;
        let mut store = ParamStore::new();
        let mut r = rng::stream(5, rng::INIT_STREAM);
        let text = TextEncoder::new(&mut store, &cfg, &mut r).unwrap();
        let image = ImageEncoder::new(&mut store, &cfg, &mut r).unwrap();
        (store, text, image, cfg)
    }

    fn picture(side: usize) -> Tensor<f64> {
        Tensor::from_fn(&[side, side, 3], |i| ((i as f64) * 0.37).sin() * 0.5 + 0.5)
    }

    #[test]
    fn single_token_text_is_finite() {
        let (store, text, _, cfg) = setup();
        let mut tape = Tape::new();
        let vars = store.bind(&mut tape, |_| false);
        let mut cx = Ctx::new(&mut tape, &vars);
        let t = TokenSeq::from_ids(vec![0], cfg.max_len).unwrap();
        let f = text.forward(&mut cx, &t).unwrap();
        assert!(cx.value(f.ft).row(0).iter().all(|v| v.is_finite()));
        assert!(cx.value(f.ftg).is_finite());
        assert_eq!(f.valid, [true, false, false, false, false, false]);
    }

    #[test]
    fn padding_does_not_change_unpadded_rows() {
        let (store, _, _, mut cfg) = setup();
        let t = TokenSeq::parse("red circle", 6).unwrap();
        let encode = |max_len: usize, cfg: &ModelConfig| {
            let mut cfg = cfg.clone();
            cfg.max_len = max_len;
            let mut s = ParamStore::<f64>::new();
            let enc = TextEncoder::new(&mut s, &cfg, &mut rng::stream(5, rng::INIT_STREAM)).unwrap();
            let mut tape = Tape::new();
            let vars = s.bind(&mut tape, |_| false);
            let mut cx = Ctx::new(&mut tape, &vars);
            let f = enc.forward(&mut cx, &t.repad(max_len).unwrap()).unwrap();
            (cx.value(f.ft).clone(), cx.value(f.ftg).clone())
        };
        drop(store);
        cfg.max_len = 6;
        let (long, g_long) = encode(6, &cfg);
        let (short, g_short) = encode(3, &cfg);
        for r in 0..3 {
            for (a, b) in long.row(r).iter().zip(short.row(r)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        assert!(g_long.max_abs_diff(&g_short).unwrap() < 1e-12);
    }

    #[test]
    fn wrong_sequence_length_is_rejected() {
        let (store, text, _, _) = setup();
        let mut tape = Tape::new();
        let vars = store.bind(&mut tape, |_| false);
        let mut cx = Ctx::new(&mut tape, &vars);
        let t = TokenSeq::parse("red circle", 9).unwrap();
        assert!(text.forward(&mut cx, &t).is_err());
    }

    #[test]
    fn vlf_single_word_copies_projected_value() {
        let (store, text, image, cfg) = setup();
        let mut tape = Tape::new();
        let vars = store.bind(&mut tape, |_| false);
        let mut cx = Ctx::new(&mut tape, &vars);
        let t = TokenSeq::from_ids(vec![0], cfg.max_len).unwrap();
        let f = text.forward(&mut cx, &t).unwrap();
        let vlf = &image.fusions[0];
        let v = cx.tape.constant(Tensor::from_fn(&[2, 2, cfg.stage_channels[1]], |i| (i as f64).cos()));
        let out = vlf.forward(&mut cx, v, f.ft, &f.valid).unwrap();
        let att = cx.value(out.attention).clone();
        for r in 0..4 {
            assert_eq!(att.row(r), &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        }
        let word = cx.tape.select_rows(f.ft, &[0]).unwrap();
        let val = vlf.value.forward(&mut cx, word).unwrap();
        let expect = vlf.output.forward(&mut cx, val).unwrap();
        let fused = cx.value(out.fused).clone();
        let expect = cx.value(expect).clone();
        for p in 0..4 {
            for (a, b) in fused.data()[p * 8..(p + 1) * 8].iter().zip(expect.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn vlf_zero_query_gives_uniform_attention() {
        let (mut store, text, image, cfg) = setup();
        let vlf = image.fusions[1].clone();
        let shape = store.get(vlf.query.weight).shape().to_vec();
        store.set(vlf.query.weight, Tensor::zeros(&shape)).unwrap();
        let mut tape = Tape::new();
        let vars = store.bind(&mut tape, |_| false);
        let mut cx = Ctx::new(&mut tape, &vars);
        let t = TokenSeq::parse("blue square", cfg.max_len).unwrap();
        let f = text.forward(&mut cx, &t).unwrap();
        let v = cx.tape.constant(Tensor::from_fn(&[2, 2, cfg.stage_channels[2]], |i| (i as f64).sin()));
        let out = vlf.forward(&mut cx, v, f.ft, &f.valid).unwrap();
        let att = cx.value(out.attention);
        for r in 0..4 {
            for (j, &a) in att.row(r).iter().enumerate() {
                let expect = if j < 3 { 1.0 / 3.0 } else { 0.0 };
                assert!((a - expect).abs() < 1e-15);
            }
        }
        let fused = cx.value(out.fused);
        for p in 1..4 {
            assert_eq!(&fused.data()[p * 8..(p + 1) * 8], &fused.data()[..8]);
        }
    }

    #[test]
    fn stage_extents_halve() {
        let (store, text, image, cfg) = setup();
        let mut tape = Tape::new();
        let vars = store.bind(&mut tape, |_| false);
        let mut cx = Ctx::new(&mut tape, &vars);
        let t = TokenSeq::parse("red circle", cfg.max_len).unwrap();
        let f = text.forward(&mut cx, &t).unwrap();
        let img = cx.tape.constant(picture(64));
        let e = image.forward(&mut cx, img, &f).unwrap();
        let ch = cfg.stage_channels;
        assert_eq!(cx.tape.shape(e.pyramid.fv2), &[16, 16, ch[1]]);
        assert_eq!(cx.tape.shape(e.pyramid.fv3), &[8, 8, ch[2]]);
        assert_eq!(cx.tape.shape(e.pyramid.fv4), &[4, 4, ch[3]]);
        let bad = cx.tape.constant(picture(24));
        assert!(matches!(image.forward(&mut cx, bad, &f), Err(Error::Dimension { .. })));
    }

    #[test]
    fn zeroed_fusion_outputs_leave_a_pure_vision_pipeline() {
        let (mut store, text, image, cfg) = setup();
        for v in &image.fusions {
            let shape = store.get(v.output.weight).shape().to_vec();
            store.set(v.output.weight, Tensor::zeros(&shape)).unwrap();
        }
        let mut tape = Tape::new();
        let vars = store.bind(&mut tape, |_| false);
        let mut cx = Ctx::new(&mut tape, &vars);
        let t = TokenSeq::parse("red circle", cfg.max_len).unwrap();
        let f = text.forward(&mut cx, &t).unwrap();
        let img = cx.tape.constant(picture(32));
        let e = image.forward(&mut cx, img, &f).unwrap();
        let mut x = img;
        let mut pure = Vec::new();
        for s in &image.stages {
            x = s.forward(&mut cx, x).unwrap();
            pure.push(x);
        }
        assert_eq!(cx.value(e.pyramid.fv2), cx.value(pure[1]));
        assert_eq!(cx.value(e.pyramid.fv3), cx.value(pure[2]));
        assert_eq!(cx.value(e.pyramid.fv4), cx.value(pure[3]));
    }
}
