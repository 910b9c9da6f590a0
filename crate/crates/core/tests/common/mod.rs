//! Independent oracles shared by the integration suites.
#![allow(dead_code)]

use crformer::cdec::set_alphas;
use crformer::data::{TokenSeq, GLOBAL_TOKEN, VOCAB_SIZE};
use crformer::model::{Forward, Mode};
use crformer::nn::Ctx;
use crformer::rng::{self, Rng};
use crformer::{Config, Model, Tape, Tensor, Var};
use nalgebra::{DMatrix, DVector};
use rand::Rng as _;

/// Small 64-bit model whose texts hold up to eight unpadded positions.
pub fn toy_config() -> Config {
    let mut c = Config::gradcheck();
    c.model.max_len = 8;
    c.data.max_len = 8;
    c
}

/// Random expression of `1..=max_len` unpadded positions (global slot
/// included); word ids are arbitrary, not necessarily grammatical.
pub fn random_tokens(rng: &mut Rng, max_len: usize) -> TokenSeq {
    let len = rng.random_range(1..=max_len);
    let mut ids = vec![GLOBAL_TOKEN];
    ids.extend((1..len).map(|_| rng.random_range(2..VOCAB_SIZE)));
    TokenSeq::from_ids(ids, max_len).unwrap()
}

pub fn random_image(rng: &mut Rng, size: usize) -> Tensor<f64> {
    Tensor::from_fn(&[size, size, 3], |_| rng.random_range(0.0..1.0))
}

/// Rows of `a` are probability vectors over `valid` columns, with exact zeros
/// elsewhere.
pub fn check_stochastic_rows(name: &str, a: &Tensor<f64>, valid: Option<&[bool]>) -> Result<(), String> {
    let cols = *a.shape().last().unwrap();
    for r in 0..a.numel() / cols {
        let row = &a.data()[r * cols..(r + 1) * cols];
        let mut sum = 0.0;
        for (j, &v) in row.iter().enumerate() {
            let on = valid.is_none_or(|m| m[j]);
            if !on && v != 0.0 {
                return Err(format!("{name}: row {r} has {v} at pad column {j}"));
            }
            if !(0.0..=1.0).contains(&v) {
                return Err(format!("{name}: row {r} entry {j} = {v} outside [0, 1]"));
            }
            sum += v;
        }
        if (sum - 1.0).abs() > 1e-6 {
            return Err(format!("{name}: row {r} sums to {sum}"));
        }
    }
    Ok(())
}

/// Whether `q` is a convex combination of `points`, decided by enumerating
/// every subset: by Carathéodory some affinely independent subset carries
/// nonnegative barycentric weights iff `q` lies in the hull.
pub fn in_convex_hull(points: &[Vec<f64>], q: &[f64], tol: f64) -> bool {
    let k = points.len();
    let d = q.len();
    assert!(k <= 12, "enumeration is exponential in the point count");
    let scale = 1.0 + points.iter().flatten().chain(q).fold(0.0f64, |m, v| m.max(v.abs()));
    for subset in 1u32..(1 << k) {
        let idx: Vec<usize> = (0..k).filter(|i| subset >> i & 1 == 1).collect();
        let m = DMatrix::from_fn(d + 1, idx.len(), |r, c| if r < d { points[idx[c]][r] } else { 1.0 });
        let b = DVector::from_fn(d + 1, |r, _| if r < d { q[r] } else { 1.0 });
        let svd = m.clone().svd(true, true);
        if svd.rank(1e-10 * scale) < idx.len() {
            continue;
        }
        let Ok(w) = svd.solve(&b, 1e-12) else { continue };
        let residual = (&m * &w - &b).amax();
        if residual <= tol * scale && w.iter().all(|&x| x >= -tol) {
            return true;
        }
    }
    false
}

/// `relu(x·W)` computed directly from the stored weight.
pub fn relu_project(x: &Tensor<f64>, w: &Tensor<f64>) -> Vec<Vec<f64>> {
    let (rows, inner) = (x.shape()[0], x.shape()[1]);
    let out = w.shape()[1];
    (0..rows)
        .map(|r| {
            (0..out)
                .map(|o| (0..inner).map(|i| x.get(&[r, i]) * w.get(&[i, o])).sum::<f64>().max(0.0))
                .collect()
        })
        .collect()
}

/// One random model, image and expression, run forward in training mode
/// with random calibration gains so every calibration branch is live.
pub struct Draw {
    pub config: Config,
    pub model: Model<f64>,
    pub tokens: TokenSeq,
    pub tape: Tape<f64>,
    pub fwd: Forward,
}

impl Draw {
    pub fn new(seed: u64) -> Self {
        let mut rng = rng::stream(seed, 99);
        let mut config = toy_config();
        config.train.init_seed = seed;
        config.model.num_queries = rng.random_range(1..=4);
        let mut model = Model::<f64>::new(&config).unwrap();
        let alpha = rng.random_range(-1.0..1.0);
        set_alphas(&mut model.params, &model.arch.cdec, alpha).unwrap();
        let tokens = random_tokens(&mut rng, config.model.max_len);
        let image = random_image(&mut rng, config.data.image_size);
        let mut tape = Tape::new();
        let vars = model.params.bind(&mut tape, |_| false);
        let img = tape.constant(image);
        let fwd = {
            let mut cx = Ctx::new(&mut tape, &vars);
            model.arch.forward(&mut cx, img, &tokens, Mode::Train).unwrap()
        };
        Draw { config, model, tokens, tape, fwd }
    }

    pub fn value(&self, v: Var) -> &Tensor<f64> {
        self.tape.value(v)
    }

    /// Every softmax the model exposes, with its column mask.
    pub fn check_softmax_rows(&self) -> Result<(), String> {
        let valid = &self.fwd.text.valid;
        for (i, &a) in self.fwd.encoding.attention.iter().enumerate() {
            check_stochastic_rows(&format!("vlf{}", i + 2), self.value(a), Some(valid))?;
        }
        for (n, layer) in self.fwd.decoder.layers.iter().enumerate() {
            for (h, &a) in layer.self_weights.iter().enumerate() {
                check_stochastic_rows(&format!("layer{n}.self.head{h}"), self.value(a), None)?;
            }
            for (h, &a) in layer.cross_weights.iter().enumerate() {
                check_stochastic_rows(&format!("layer{n}.cross.head{h}"), self.value(a), None)?;
            }
        }
        check_stochastic_rows("qgm", self.value(self.fwd.queries.attention), Some(valid))?;
        for (n, &a) in self.fwd.decoder.calibration_attention.iter().enumerate() {
            check_stochastic_rows(&format!("calibration{n}"), self.value(a), Some(valid))?;
        }
        Ok(())
    }

    /// Every generated query (initial and calibrated) lies in the hull of
    /// its module's relu-projected unpadded word rows.
    pub fn check_query_hulls(&self) -> Result<(), String> {
        let ft = self.value(self.fwd.text.ft);
        let valid_rows = |t: &Tensor<f64>| -> Tensor<f64> {
            let c = t.shape()[1];
            let rows: Vec<usize> = (0..t.shape()[0]).filter(|&i| self.fwd.text.valid[i]).collect();
            let data = rows.iter().flat_map(|&r| t.row(r).to_vec()).collect();
            Tensor::new(&[rows.len(), c], data).unwrap()
        };
        let words = valid_rows(ft);
        let cdec = &self.model.arch.cdec;
        let mut checks = vec![("qgm".to_string(), &self.model.arch.qgm, self.fwd.queries.fq)];
        for (n, &fcq) in self.fwd.decoder.calibrations.iter().enumerate() {
            let qgm = &cdec.qgms[n.min(cdec.qgms.len() - 1)];
            checks.push((format!("calibration{n}"), qgm, fcq));
        }
        for (name, qgm, fq) in checks {
            let points = relu_project(&words, self.model.params.get(qgm.wq.weight));
            let fq = self.value(fq);
            for n in 0..fq.shape()[0] {
                if !in_convex_hull(&points, fq.row(n), 1e-9) {
                    return Err(format!("{name}: query {n} lies outside the word hull"));
                }
            }
        }
        Ok(())
    }
}

/// Pixel-loop IoU with the both-empty convention.
pub fn brute_iou(pred: &[bool], gt: &[bool]) -> f64 {
    let mut inter = 0u32;
    let mut union = 0u32;
    for (&p, &g) in pred.iter().zip(gt) {
        if p && g {
            inter += 1;
        }
        if p || g {
            union += 1;
        }
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

pub fn mask_tensor(bits: &[bool], side: usize) -> Tensor<f32> {
    Tensor::new(&[side, side], bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()).unwrap()
}
