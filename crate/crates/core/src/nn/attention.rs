use crate::error::{Error, Result};
use crate::nn::{Ctx, Linear, ParamStore};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Var;

/// Multi-head scaled dot-product attention with separate query, key, value
/// and output projections. Residual connections are left to the caller.
#[derive(Clone, Debug)]
pub struct Attention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub head_dim: usize,
}

pub struct AttentionOutput {
    pub out: Var,
    /// Per-head attention matrices, `[queries, keys]` each.
    pub weights: Vec<Var>,
}

impl Attention {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        width: usize,
        heads: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if heads == 0 || !width.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "{name}: width {width} is not divisible into {heads} heads"
            )));
        }
        Ok(Self {
            query: Linear::new(store, &format!("{name}.q"), width, width, true, rng)?,
            key: Linear::new(store, &format!("{name}.k"), width, width, true, rng)?,
            value: Linear::new(store, &format!("{name}.v"), width, width, true, rng)?,
            output: Linear::new(store, &format!("{name}.o"), width, width, true, rng)?,
            heads,
            head_dim: width / heads,
        })
    }

    pub fn width(&self) -> usize {
        self.heads * self.head_dim
    }

    /// Self-attention over the rows of `x: [S, C]`.
    pub fn self_attend<T: Scalar>(
        &self,
        cx: &mut Ctx<'_, T>,
        x: Var,
        key_valid: Option<&[bool]>,
    ) -> Result<AttentionOutput> {
        self.cross_attend(cx, x, x, key_valid)
    }

    /// Rows of `queries: [S, C]` attend over rows of `memory: [M, C]`.
    /// `key_valid` (length M) excludes memory rows from every softmax.
    pub fn cross_attend<T: Scalar>(
        &self,
        cx: &mut Ctx<'_, T>,
        queries: Var,
        memory: Var,
        key_valid: Option<&[bool]>,
    ) -> Result<AttentionOutput> {
        let q = self.query.forward(cx, queries)?;
        let k = self.key.forward(cx, memory)?;
        let v = self.value.forward(cx, memory)?;
        let scale = T::one() / T::from_count(self.head_dim).sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (lo, hi) = (h * self.head_dim, (h + 1) * self.head_dim);
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    cx.tape.slice_cols(q, lo, hi)?,
                    cx.tape.slice_cols(k, lo, hi)?,
                    cx.tape.slice_cols(v, lo, hi)?,
                )
            };
            let kt = cx.tape.transpose(kh)?;
            let scores = cx.tape.matmul(qh, kt)?;
            let scores = cx.tape.scale(scores, scale);
            let attn = cx.tape.softmax_lastdim(scores, key_valid)?;
            heads.push(cx.tape.matmul(attn, vh)?);
            weights.push(attn);
        }
        let joined = if heads.len() == 1 {
            heads[0]
        } else {
            cx.tape.concat(&heads, 1)?
        };
        let out = self.output.forward(cx, joined)?;
        Ok(AttentionOutput { out, weights })
    }
}
