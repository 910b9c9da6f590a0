//! Query generation: image-conditioned mixtures of projected word features.

use crate::error::{Error, Result};
use crate::nn::{Conv2d, Ctx, Linear, ParamStore};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Var;

pub struct QuerySet {
    /// `[N_q, C]`.
    pub fq: Var,
    /// `[N_q, L_max]`, zero at pad columns.
    pub attention: Var,
}

#[derive(Clone, Debug)]
pub struct Qgm {
    /// 3×3, C → N_q channels.
    pub conv: Conv2d,
    /// `[H_g·W_g, C]`, applied to each flattened conv channel.
    pub wc: Linear,
    pub wt: Linear,
    pub wq: Linear,
    grid: (usize, usize),
}

impl Qgm {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        width: usize,
        num_queries: usize,
        grid: (usize, usize),
        rng: &mut Rng,
    ) -> Result<Self> {
        let cells = grid.0 * grid.1;
        Ok(Self {
            conv: Conv2d::new(store, &format!("{name}.conv"), width, num_queries, 3, 1, rng)?,
            wc: Linear::new(store, &format!("{name}.wc"), cells, width, false, rng)?,
            wt: Linear::new(store, &format!("{name}.wt"), width, width, false, rng)?,
            wq: Linear::new(store, &format!("{name}.wq"), width, width, false, rng)?,
            grid,
        })
    }

    /// `source: [H_g, W_g, C]`, `ft: [L_max, C]`.
    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, source: Var, ft: Var, valid: &[bool]) -> Result<QuerySet> {
        let shape = cx.tape.shape(source);
        if shape.len() != 3 || (shape[0], shape[1]) != self.grid {
            return Err(Error::dim(
                "qgm",
                format!("source {shape:?} for a {}×{} query grid", self.grid.0, self.grid.1),
            ));
        }
        let fc = self.conv.forward(cx, source)?;
        let fc = cx.tape.flatten(fc)?;
        let per_query = cx.tape.transpose(fc)?;
        let qc = self.wc.forward(cx, per_query)?;
        let qc = cx.tape.relu(qc);
        let tw = self.wt.forward(cx, ft)?;
        let tw = cx.tape.relu(tw);
        let twt = cx.tape.transpose(tw)?;
        let scores = cx.tape.matmul(qc, twt)?;
        let attention = cx.tape.softmax_lastdim(scores, Some(valid))?;
        let values = self.wq.forward(cx, ft)?;
        let values = cx.tape.relu(values);
        let fq = cx.tape.matmul(attention, values)?;
        Ok(QuerySet { fq, attention })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::tensor::{Tape, Tensor};

    const C: usize = 8;

    fn run(words: &Tensor<f64>, valid: &[bool], nq: usize) -> (Tensor<f64>, Tensor<f64>, Tensor<f64>) {
        let mut store = ParamStore::<f64>::new();
        let q = Qgm::new(&mut store, "q", C, nq, (2, 2), &mut rng::stream(4, 1)).unwrap();
        let mut tape = Tape::new();
        let vars = store.bind(&mut tape, |_| false);
        let mut cx = Ctx::new(&mut tape, &vars);
        let src = cx.tape.constant(Tensor::from_fn(&[2, 2, C], |i| ((i as f64) * 0.7).sin()));
        let ft = cx.tape.constant(words.clone());
        let out = q.forward(&mut cx, src, ft, valid).unwrap();
        let v = q.wq.forward(&mut cx, ft).unwrap();
        let v = cx.tape.relu(v);
        (cx.value(out.fq).clone(), cx.value(out.attention).clone(), cx.value(v).clone())
    }

    fn words(rows: usize) -> Tensor<f64> {
        Tensor::from_fn(&[rows, C], |i| ((i as f64 + 2.0) * 0.31).cos())
    }

    #[test]
    fn single_word_yields_its_projection() {
        let w = words(3);
        let (fq, a, v) = run(&w, &[true, false, false], 3);
        for n in 0..3 {
            assert_eq!(a.row(n), &[1.0, 0.0, 0.0]);
            assert_eq!(fq.row(n), v.row(0));
        }
    }

    #[test]
    fn duplicated_word_matches_single_word() {
        let one = words(1);
        let mut two = one.data().to_vec();
        two.extend_from_slice(one.data());
        let two = Tensor::new(&[2, C], two).unwrap();
        let (a, _, _) = run(&one, &[true], 2);
        let (b, att, _) = run(&two, &[true, true], 2);
        assert!(a.max_abs_diff(&b).unwrap() < 1e-12);
        assert!(att.data().iter().all(|&x| (x - 0.5).abs() < 1e-15));
    }

    #[test]
    fn attention_rows_are_stochastic_with_zero_pads() {
        let (_, a, _) = run(&words(5), &[true, true, true, false, false], 4);
        for n in 0..4 {
            let r = a.row(n);
            assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert_eq!(&r[3..], &[0.0, 0.0]);
        }
    }

    #[test]
    fn all_pad_text_is_degenerate() {
        let mut store = ParamStore::<f64>::new();
        let q = Qgm::new(&mut store, "q", C, 2, (2, 2), &mut rng::stream(4, 1)).unwrap();
        let mut tape = Tape::new();
        let vars = store.bind(&mut tape, |_| false);
        let mut cx = Ctx::new(&mut tape, &vars);
        let src = cx.tape.constant(Tensor::zeros(&[2, 2, C]));
        let ft = cx.tape.constant(words(2));
        assert!(matches!(
            q.forward(&mut cx, src, ft, &[false, false]),
            Err(Error::DegenerateRow { .. })
        ));
        let wrong = cx.tape.constant(Tensor::zeros(&[3, 3, C]));
        assert!(matches!(q.forward(&mut cx, wrong, ft, &[true, true]), Err(Error::Dimension { .. })));
    }
}
