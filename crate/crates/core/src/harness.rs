//! Whole-model gradient verification and the ablation runner.

use std::fmt;
use std::str::FromStr;

use crate::cdec::set_alphas;
use crate::config::Config;
use crate::data::{gen_sample, sample_seed};
use crate::error::{Error, Result};
use crate::gradcheck::{finite_diff_check, GradReport};
use crate::metrics::{MetricReport, PR_THRESHOLDS};
use crate::model::{Mode, Model};
use crate::nn::Ctx;
use crate::train::{evaluate, train_model, Splits};

pub const GRADCHECK_STEP: f64 = 1e-5;
pub const GRADCHECK_TOLERANCE: f64 = 1e-3;
/// Calibration gains used during the check; at zero the calibration
/// modules would have identically zero gradients.
pub const GRADCHECK_ALPHA: f64 = 0.5;

/// Central-difference check of the full training loss with respect to every
/// parameter, in 64-bit, on the first sample of the training split.
pub fn gradcheck(config: &Config) -> Result<GradReport> {
    let mut model = Model::<f64>::new(config)?;
    set_alphas(&mut model.params, &model.arch.cdec, GRADCHECK_ALPHA)?;
    let sample = gen_sample(sample_seed(config.train.data_seed, 0), &config.data)?;
    let image = sample.image.cast::<f64>();
    let gt = sample.gt_mask.cast::<f64>();
    let arch = &model.arch;
    let params = model.params.named_tensors();
    finite_diff_check(
        &params,
        |tape, vars| {
            let img = tape.constant(image.clone());
            let mut cx = Ctx::new(tape, vars);
            let fwd = arch.forward(&mut cx, img, &sample.tokens, Mode::Train)?;
            Ok(arch.losses(tape, &fwd, &gt, &config.loss)?.total)
        },
        GRADCHECK_STEP,
        GRADCHECK_TOLERANCE,
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    /// Number of language queries.
    Nq,
    /// Decoder depth, with calibration on and off.
    Layers,
    /// Reconstruction loss weight.
    OmegaRe,
    /// Calibration × reconstruction loss.
    Components,
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nq" => Ok(Axis::Nq),
            "layers" => Ok(Axis::Layers),
            "omega_re" => Ok(Axis::OmegaRe),
            "components" => Ok(Axis::Components),
            other => Err(Error::Usage(format!(
                "unknown ablation axis {other:?} (expected nq, layers, omega_re or components)"
            ))),
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Axis::Nq => "nq",
            Axis::Layers => "layers",
            Axis::OmegaRe => "omega_re",
            Axis::Components => "components",
        })
    }
}

pub const NQ_VALUES: [usize; 7] = [1, 2, 4, 8, 16, 24, 32];
pub const LAYER_VALUES: [usize; 4] = [1, 2, 3, 4];
pub const OMEGA_RE_VALUES: [f64; 5] = [0.0, 0.05, 0.10, 0.15, 0.20];

/// One configuration of an ablation table.
#[derive(Clone, Debug)]
pub struct Cell {
    pub labels: Vec<String>,
    pub config: Config,
}

fn on_off(b: bool) -> String {
    if b { "on" } else { "off" }.to_string()
}

/// Label columns of an axis.
pub fn label_columns(axis: Axis) -> &'static [&'static str] {
    match axis {
        Axis::Nq => &["num_queries"],
        Axis::Layers => &["decoder_layers", "cdec"],
        Axis::OmegaRe => &["omega_re"],
        Axis::Components => &["cdec", "recon_loss"],
    }
}

/// The table rows of `axis`, each a variant of `base`.
pub fn cells(base: &Config, axis: Axis) -> Vec<Cell> {
    let with = |labels: Vec<String>, f: &dyn Fn(&mut Config)| {
        let mut config = base.clone();
        f(&mut config);
        Cell { labels, config }
    };
    match axis {
        Axis::Nq => NQ_VALUES
            .iter()
            .map(|&n| with(vec![n.to_string()], &|c| c.model.num_queries = n))
            .collect(),
        Axis::Layers => LAYER_VALUES
            .iter()
            .flat_map(|&n| [true, false].map(|on| (n, on)))
            .map(|(n, on)| {
                with(vec![n.to_string(), on_off(on)], &|c| {
                    c.model.decoder_layers = n;
                    c.model.cdec_enabled = on;
                })
            })
            .collect(),
        Axis::OmegaRe => OMEGA_RE_VALUES
            .iter()
            .map(|&w| with(vec![format!("{w:.2}")], &|c| c.loss.recon_weight = w))
            .collect(),
        Axis::Components => {
            let w = base.loss.recon_weight;
            [(true, true), (true, false), (false, true), (false, false)]
                .into_iter()
                .map(|(cdec, re)| {
                    with(vec![on_off(cdec), on_off(re)], &|c| {
                        c.model.cdec_enabled = cdec;
                        c.loss.recon_weight = if re { w } else { 0.0 };
                    })
                })
                .collect()
        }
    }
}

#[derive(Clone, Debug)]
pub struct Row {
    pub labels: Vec<String>,
    pub seed: u64,
    pub report: MetricReport,
}

#[derive(Clone, Debug)]
pub struct Table {
    pub axis: Axis,
    pub rows: Vec<Row>,
}

impl Table {
    pub fn header(&self) -> Vec<String> {
        let mut h: Vec<String> = label_columns(self.axis).iter().map(|s| s.to_string()).collect();
        h.push("seed".into());
        h.push("miou".into());
        h.extend(PR_THRESHOLDS.iter().map(|x| format!("pr@{x:.1}")));
        h
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.header().join(",");
        out.push('\n');
        for r in &self.rows {
            let mut fields = r.labels.clone();
            fields.push(r.seed.to_string());
            fields.push(format!("{:.6}", r.report.miou));
            for &x in &PR_THRESHOLDS {
                fields.push(format!("{:.6}", r.report.pr_at(x).unwrap_or(f64::NAN)));
            }
            out.push_str(&fields.join(","));
            out.push('\n');
        }
        out
    }
}

/// Trains one run per cell and seed. Every cell shares the data splits of
/// `base`; the seed replaces the init seed. Rows are scored on the
/// validation split when it is non-empty, else on the training split.
pub fn ablate(base: &Config, axis: Axis, seeds: &[u64], mut progress: impl FnMut(&Row)) -> Result<Table> {
    base.validate()?;
    let splits = Splits::generate(base)?;
    let mut rows = Vec::new();
    for cell in cells(base, axis) {
        for &seed in seeds {
            let mut config = cell.config.clone();
            config.train.init_seed = seed;
            let model = Model::<f32>::new(&config)?;
            let out = train_model(model, &splits, |_| {})?;
            if let Some(e) = out.failure {
                return Err(e);
            }
            let split = if splits.val.is_empty() { &splits.train } else { &splits.val };
            let row = Row {
                labels: cell.labels.clone(),
                seed,
                report: evaluate(&out.model, split)?,
            };
            progress(&row);
            rows.push(row);
        }
    }
    Ok(Table { axis, rows })
}
