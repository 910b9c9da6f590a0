//! Encoders, neck, query generation, decoder and heads: gradient checks and
//! structural properties against independent oracles.

mod common;

use common::{random_image, random_tokens, toy_config, Draw};
use crformer::cdec::set_alphas;
use crformer::encoders::FeaturePyramid;
use crformer::heads::{recon_loss, seg_loss, total_loss};
use crformer::nn::Ctx;
use crformer::rng::{self, Rng};
use crformer::{Model, Result, Tape, Tensor, Var};
use proptest::prelude::*;
use rand::Rng as _;

fn randn(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn weigh(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    let mut rng = rng::stream(seed, 1000);
    let w = randn(&mut rng, tape.shape(out));
    let w = tape.constant(w);
    let prod = tape.mul(out, w)?;
    Ok(tape.sum(prod))
}

const STEP: f64 = 1e-5;

/// Per-parameter outcome of [`check_part`].
struct PartReport {
    /// Name, largest analytic magnitude, worst excess over the tolerance.
    params: Vec<(String, f64, f64)>,
}

impl PartReport {
    fn assert_pass(&self, name: &str) {
        for (p, _, excess) in &self.params {
            assert!(*excess <= 0.0, "{name}: {p} misses the tolerance by {excess:.3e}");
        }
    }

    fn max_analytic(&self, param: &str) -> f64 {
        self.params.iter().find(|p| p.0 == param).map(|p| p.1).unwrap()
    }
}

/// Central differences against the tape gradient of `f` with respect to the
/// selected model parameters and the extra inputs; other parameters stay
/// constant.
///
/// A coordinate passes when `|a − n| ≤ rtol·max(|a|, |n|) + atol`, where
/// `atol` bounds the rounding noise of the difference quotient: a few ulps
/// of the loss divided by the step. Relative error alone is meaningless for
/// gradients below that resolution.
fn check_part(
    model: &Model<f64>,
    select: impl Fn(&str) -> bool,
    extras: Vec<Tensor<f64>>,
    rtol: f64,
    f: impl Fn(&mut Ctx<'_, f64>, &[Var]) -> Result<Var>,
) -> PartReport {
    let all: Vec<(String, Tensor<f64>)> = model.params.named_tensors();
    let chosen: Vec<usize> = (0..all.len()).filter(|&i| select(&all[i].0)).collect();
    assert!(!chosen.is_empty());
    let mut checked: Vec<(String, Tensor<f64>)> = chosen.iter().map(|&i| all[i].clone()).collect();
    let n = checked.len();
    checked.extend(extras.into_iter().enumerate().map(|(i, t)| (format!("input{i}"), t)));

    let eval = |values: &[(String, Tensor<f64>)], track: bool| -> (Tape<f64>, Var, Vec<Var>) {
        let mut tape = Tape::new();
        let leaves: Vec<Var> = values.iter().map(|(_, t)| tape.leaf(t.clone(), track)).collect();
        let mut next = 0;
        let full: Vec<Var> = all
            .iter()
            .enumerate()
            .map(|(i, (_, t))| {
                if chosen.get(next) == Some(&i) {
                    next += 1;
                    leaves[next - 1]
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        let loss = {
            let mut cx = Ctx::new(&mut tape, &full);
            let out = f(&mut cx, &leaves[n..]).unwrap();
            weigh(cx.tape, out, 3).unwrap()
        };
        (tape, loss, leaves)
    };

    let (tape, loss, leaves) = eval(&checked, true);
    let l0 = tape.value(loss).data()[0];
    let atol = 16.0 * f64::EPSILON * l0.abs().max(1.0) / STEP;
    let mut grads = tape.backward(loss).unwrap();
    let analytic: Vec<Tensor<f64>> = leaves.iter().map(|&v| grads.take(v).unwrap()).collect();
    drop(tape);

    let mut work = checked.clone();
    let mut params = Vec::new();
    for (p, a) in analytic.iter().enumerate() {
        let mut worst = f64::NEG_INFINITY;
        let mut biggest = 0.0f64;
        for i in 0..a.numel() {
            let x = work[p].1.data()[i];
            work[p].1.data_mut()[i] = x + STEP;
            let (t, l, _) = eval(&work, false);
            let plus = t.value(l).data()[0];
            work[p].1.data_mut()[i] = x - STEP;
            let (t, l, _) = eval(&work, false);
            let minus = t.value(l).data()[0];
            work[p].1.data_mut()[i] = x;
            let numeric = (plus - minus) / (2.0 * STEP);
            let an = a.data()[i];
            let excess = (an - numeric).abs() - (rtol * an.abs().max(numeric.abs()) + atol);
            worst = worst.max(excess);
            biggest = biggest.max(an.abs());
        }
        params.push((checked[p].0.clone(), biggest, worst));
    }
    PartReport { params }
}

/// All elements as a single row.
fn row(tape: &mut Tape<f64>, v: Var) -> Result<Var> {
    let n: usize = tape.shape(v).iter().product();
    tape.reshape(v, &[1, n])
}

#[test]
fn language_reaches_the_deepest_vision_stage() {
    let config = toy_config();
    let model = Model::<f64>::new(&config).unwrap();
    let mut r = rng::stream(5, 0);
    let tokens = random_tokens(&mut r, config.model.max_len);
    let image = random_image(&mut r, config.data.image_size);
    let arch = &model.arch;
    let report = check_part(&model, |n| n.starts_with("text.") || n.starts_with("image."), vec![image], 1e-4, |cx, x| {
        let text = arch.text.forward(cx, &tokens)?;
        Ok(arch.image.forward(cx, x[0], &text)?.pyramid.fv4)
    });
    report.assert_pass("encoders");
    assert!(report.max_analytic("text.embedding") > 1e-6, "no gradient reaches the text embedding");
}

#[test]
fn neck_matches_finite_differences() {
    let config = toy_config();
    let model = Model::<f64>::new(&config).unwrap();
    let ch = config.model.stage_channels;
    let s = config.data.image_size;
    let mut r = rng::stream(6, 0);
    let inputs = vec![
        randn(&mut r, &[s / 4, s / 4, ch[1]]),
        randn(&mut r, &[s / 8, s / 8, ch[2]]),
        randn(&mut r, &[s / 16, s / 16, ch[3]]),
    ];
    let neck = &model.arch.neck;
    let report = check_part(&model, |n| n.starts_with("neck."), inputs, 1e-4, |cx, x| {
        neck.forward(cx, &FeaturePyramid { fv2: x[0], fv3: x[1], fv4: x[2] })
    });
    report.assert_pass("neck");
}

#[test]
fn query_generation_matches_finite_differences() {
    let config = toy_config();
    let model = Model::<f64>::new(&config).unwrap();
    let (gh, gw) = config.decoder_grid();
    let c = config.model.width;
    let l = config.model.max_len;
    let mut r = rng::stream(7, 0);
    let valid: Vec<bool> = (0..l).map(|i| i < 5).collect();
    let inputs = vec![randn(&mut r, &[gh, gw, c]), randn(&mut r, &[l, c])];
    let qgm = &model.arch.qgm;
    let report = check_part(&model, |n| n.starts_with("qgm."), inputs, 1e-4, |cx, x| {
        let q = qgm.forward(cx, x[0], x[1], &valid)?;
        // Both outputs, so the attention path is checked on its own too.
        let a = row(cx.tape, q.attention)?;
        let f = row(cx.tape, q.fq)?;
        cx.tape.concat(&[a, f], 1)
    });
    report.assert_pass("qgm");
}

#[test]
fn decoder_matches_finite_differences_including_gains() {
    let config = toy_config();
    let mut model = Model::<f64>::new(&config).unwrap();
    set_alphas(&mut model.params, &model.arch.cdec, 0.7).unwrap();
    let (gh, gw) = config.decoder_grid();
    let c = config.model.width;
    let l = config.model.max_len;
    let nq = config.model.num_queries;
    let mut r = rng::stream(8, 0);
    let valid: Vec<bool> = (0..l).map(|i| i < 4).collect();
    let inputs = vec![randn(&mut r, &[gh, gw, c]), randn(&mut r, &[nq, c]), randn(&mut r, &[l, c])];
    let cdec = &model.arch.cdec;
    let report = check_part(&model, |n| n.starts_with("cdec."), inputs, 1e-3, |cx, x| {
        let out = cdec.forward(cx, x[0], x[1], x[2], &valid, true)?;
        let d = row(cx.tape, out.fdec)?;
        let q = row(cx.tape, out.fq)?;
        cx.tape.concat(&[d, q], 1)
    });
    report.assert_pass("cdec");
    let gains: Vec<f64> = report.params.iter().filter(|p| p.0.contains("alpha")).map(|p| p.1).collect();
    assert!(!gains.is_empty() && gains.iter().all(|&g| g > 0.0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn model_attention_and_query_hulls(seed in any::<u64>()) {
        let d = Draw::new(seed);
        d.check_softmax_rows().map_err(TestCaseError::fail)?;
        d.check_query_hulls().map_err(TestCaseError::fail)?;
    }

    #[test]
    fn scaling_the_query_source_keeps_rows_stochastic(seed in any::<u64>(), scale in 0.01f64..100.0) {
        let config = toy_config();
        let model = Model::<f64>::new(&config).unwrap();
        let (gh, gw) = config.decoder_grid();
        let mut r = rng::stream(seed, 0);
        let tokens = random_tokens(&mut r, config.model.max_len);
        let source = randn(&mut r, &[gh, gw, config.model.width]);
        let ft = randn(&mut r, &[config.model.max_len, config.model.width]);
        let valid = tokens.valid_mask();
        let mut tape = Tape::new();
        let vars = model.params.bind(&mut tape, |_| false);
        let s = tape.constant(source);
        let s_scaled = tape.scale(s, scale);
        let f = tape.constant(ft);
        let mut cx = Ctx::new(&mut tape, &vars);
        let a = model.arch.qgm.forward(&mut cx, s, f, &valid).unwrap().attention;
        let b = model.arch.qgm.forward(&mut cx, s_scaled, f, &valid).unwrap().attention;
        common::check_stochastic_rows("qgm", tape.value(a), Some(&valid)).map_err(TestCaseError::fail)?;
        common::check_stochastic_rows("qgm scaled", tape.value(b), Some(&valid)).map_err(TestCaseError::fail)?;
    }

    #[test]
    fn seg_loss_matches_direct_evaluation(
        logits in prop::collection::vec(-10.0f64..10.0, 1..64),
        bits in prop::collection::vec(any::<bool>(), 64),
    ) {
        let n = logits.len();
        let gt: Vec<f64> = bits[..n].iter().map(|&b| b as u8 as f64).collect();
        let naive = logits
            .iter()
            .zip(&gt)
            .map(|(&x, &y)| {
                let p = 1.0 / (1.0 + (-x).exp());
                -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / n as f64;
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(&[1, n], logits).unwrap());
        let l = seg_loss(&mut tape, x, &Tensor::new(&[1, n], gt).unwrap()).unwrap();
        let got = tape.value(l).data()[0];
        prop_assert!((got - naive).abs() < 1e-8, "{got} vs {naive}");
    }

    #[test]
    fn recon_loss_is_nonnegative_and_zero_only_on_equal_arguments(
        a in prop::collection::vec(-5.0f64..5.0, 1..16),
        delta in prop::collection::vec(-1.0f64..1.0, 16),
        identical in any::<bool>(),
    ) {
        let n = a.len();
        let b: Vec<f64> = if identical { a.clone() } else { a.iter().zip(&delta).map(|(x, d)| x + d).collect() };
        let mut tape = Tape::<f64>::new();
        let av = tape.constant(Tensor::new(&[1, n], a.clone()).unwrap());
        let bv = tape.constant(Tensor::new(&[1, n], b.clone()).unwrap());
        let l = recon_loss(&mut tape, av, bv).unwrap();
        let l = tape.value(l).data()[0];
        prop_assert!(l >= 0.0);
        prop_assert_eq!(l == 0.0, a == b);
    }

    #[test]
    fn total_loss_gradient_is_the_weighted_sum(seed in any::<u64>(), w_seg in 0.0f64..2.0, w_re in 0.0f64..2.0) {
        let mut r = rng::stream(seed, 0);
        let theta = randn(&mut r, &[3, 4]);
        let target = Tensor::from_fn(&[3, 4], |_| r.random_bool(0.5) as u8 as f64);
        let other = randn(&mut r, &[3, 4]);
        let grad = |ws: f64, wr: f64| {
            let mut tape = Tape::<f64>::new();
            let t = tape.param(theta.clone());
            let o = tape.constant(other.clone());
            let seg = seg_loss(&mut tape, t, &target).unwrap();
            let re = recon_loss(&mut tape, t, o).unwrap();
            let total = total_loss(&mut tape, seg, re, ws, wr).unwrap();
            tape.backward(total).unwrap().take(t).unwrap()
        };
        let g = grad(w_seg, w_re);
        let gs = grad(1.0, 0.0);
        let gr = grad(0.0, 1.0);
        for i in 0..g.numel() {
            let expect = w_seg * gs.data()[i] + w_re * gr.data()[i];
            prop_assert!((g.data()[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn text_projection_ignores_word_order(seed in any::<u64>()) {
        let config = toy_config();
        let model = Model::<f64>::new(&config).unwrap();
        let mut r = rng::stream(seed, 0);
        let l = config.model.max_len;
        let c = config.model.width;
        let len = r.random_range(1..=l);
        let valid: Vec<bool> = (0..l).map(|i| i < len).collect();
        let ft = randn(&mut r, &[l, c]);
        let ftg = randn(&mut r, &[1, c]);
        // Reverse the unpadded rows and scramble the pads.
        let mut order: Vec<usize> = (0..len).rev().collect();
        order.extend((len..l).rev());
        let mut tape = Tape::new();
        let vars = model.params.bind(&mut tape, |_| false);
        let f = tape.constant(ft);
        let g = tape.constant(ftg);
        let fp = tape.select_rows(f, &order).unwrap();
        let mut cx = Ctx::new(&mut tape, &vars);
        let a = model.arch.recon.project_text(&mut cx, f, g, &valid).unwrap();
        let b = model.arch.recon.project_text(&mut cx, fp, g, &valid).unwrap();
        let diff = tape.value(a).max_abs_diff(tape.value(b)).unwrap();
        prop_assert!(diff < 1e-12, "{diff}");
    }
}
