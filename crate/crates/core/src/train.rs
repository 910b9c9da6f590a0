//! Training loop, evaluation and the run log.

use std::io::Write;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::data::{gen_dataset, SampleRecord};
use crate::error::{Error, Result};
use crate::metrics::{binarize, iou, MetricReport};
use crate::model::{LossValues, Model};
use crate::optim::Adam;
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LogRecord {
    Step {
        step: u64,
        epoch: usize,
        l_seg: f64,
        l_re: f64,
        l_total: f64,
    },
    Eval {
        step: u64,
        epoch: usize,
        train: MetricReport,
        val: Option<MetricReport>,
    },
}

/// Append-only record of a run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunLog {
    pub records: Vec<LogRecord>,
}

impl RunLog {
    pub fn push(&mut self, r: LogRecord) {
        self.records.push(r);
    }

    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&serde_json::to_string(r).expect("log record serializes"));
            s.push('\n');
        }
        s
    }

    pub fn write(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(self.to_jsonl().as_bytes())?;
        Ok(())
    }

    pub fn steps(&self) -> impl Iterator<Item = (u64, f64, f64, f64)> + '_ {
        self.records.iter().filter_map(|r| match *r {
            LogRecord::Step { step, l_seg, l_re, l_total, .. } => Some((step, l_seg, l_re, l_total)),
            _ => None,
        })
    }

    pub fn last_eval(&self) -> Option<(&MetricReport, Option<&MetricReport>)> {
        self.records.iter().rev().find_map(|r| match r {
            LogRecord::Eval { train, val, .. } => Some((train, val.as_ref())),
            _ => None,
        })
    }
}

/// The training and validation splits named by a config.
pub struct Splits {
    pub train: Vec<SampleRecord>,
    pub val: Vec<SampleRecord>,
}

impl Splits {
    pub fn generate(config: &Config) -> Result<Self> {
        let t = &config.train;
        Ok(Self {
            train: gen_dataset(t.data_seed, t.train_size, &config.data)?,
            val: gen_dataset(t.data_seed.wrapping_add(1), t.val_size, &config.data)?,
        })
    }
}

pub struct TrainOutcome<T> {
    /// The last parameters that produced a finite loss and gradient.
    pub model: Model<T>,
    pub optimizer: Adam<T>,
    pub log: RunLog,
    /// Set when the run stopped early on a numeric failure.
    pub failure: Option<Error>,
}

/// Inference-mode mask predictions scored against each sample's mask.
pub fn evaluate<T: Scalar>(model: &Model<T>, samples: &[SampleRecord]) -> Result<MetricReport> {
    if samples.is_empty() {
        return Err(Error::Contract("cannot evaluate an empty split".into()));
    }
    let ious = samples
        .iter()
        .map(|s| {
            let logits = model.predict(&s.image, &s.tokens)?;
            iou(&binarize(&logits), &s.gt_mask)
        })
        .collect::<Result<Vec<_>>>()?;
    MetricReport::from_ious(ious)
}

/// Mean loss values and gradient over a batch.
fn batch_step<T: Scalar>(model: &Model<T>, batch: &[&SampleRecord]) -> Result<(LossValues, Vec<Option<Tensor<T>>>)> {
    let mut sum: Option<Vec<Option<Tensor<T>>>> = None;
    let mut loss = LossValues { seg: 0.0, re: 0.0, total: 0.0 };
    for s in batch {
        let (l, g) = model.loss_and_grads(s)?;
        loss.seg += l.seg;
        loss.re += l.re;
        loss.total += l.total;
        match &mut sum {
            None => sum = Some(g),
            Some(acc) => {
                for (a, g) in acc.iter_mut().zip(g) {
                    if let (Some(a), Some(g)) = (a.as_mut(), g) {
                        for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                            *x += *y;
                        }
                    }
                }
            }
        }
    }
    let n = batch.len() as f64;
    let inv = T::from_f64_lossy(1.0 / n);
    let grads = sum
        .unwrap_or_default()
        .into_iter()
        .map(|g| g.map(|t| t.map(|v| v * inv)))
        .collect();
    Ok((
        LossValues {
            seg: loss.seg / n,
            re: loss.re / n,
            total: loss.total / n,
        },
        grads,
    ))
}

/// Trains `model` on `splits` for `config.train.epochs` epochs.
///
/// Minibatch order comes from the shuffle stream of the init seed.
/// `on_record` sees each log record as it is appended.
pub fn train_model<T: Scalar>(
    mut model: Model<T>,
    splits: &Splits,
    mut on_record: impl FnMut(&LogRecord),
) -> Result<TrainOutcome<T>> {
    let cfg = model.config.clone();
    let t = &cfg.train;
    if splits.train.is_empty() {
        return Err(Error::Contract("training split is empty".into()));
    }
    let mut optimizer = Adam::new(&model.params);
    let mut log = RunLog::default();
    let mut shuffle = rng::stream(t.init_seed, rng::SHUFFLE_STREAM);
    let mut order: Vec<usize> = (0..splits.train.len()).collect();
    let mut record = |log: &mut RunLog, r: LogRecord| {
        on_record(&r);
        log.push(r);
    };
    for epoch in 1..=t.epochs {
        order.shuffle(&mut shuffle);
        for chunk in order.chunks(t.batch_size) {
            let batch: Vec<&SampleRecord> = chunk.iter().map(|&i| &splits.train[i]).collect();
            let step = batch_step(&model, &batch)
                .and_then(|(loss, grads)| optimizer.update(&mut model.params, &grads, &cfg.optim).map(|_| loss));
            match step {
                Ok(loss) => record(
                    &mut log,
                    LogRecord::Step {
                        step: optimizer.step,
                        epoch,
                        l_seg: loss.seg,
                        l_re: loss.re,
                        l_total: loss.total,
                    },
                ),
                Err(e) if e.is_numeric() => {
                    return Ok(TrainOutcome {
                        model,
                        optimizer,
                        log,
                        failure: Some(e),
                    })
                }
                Err(e) => return Err(e),
            }
        }
        if epoch % t.eval_every == 0 || epoch == t.epochs {
            let reports = evaluate(&model, &splits.train).and_then(|train| {
                let val = if splits.val.is_empty() {
                    None
                } else {
                    Some(evaluate(&model, &splits.val)?)
                };
                Ok((train, val))
            });
            let (train, val) = match reports {
                Ok(r) => r,
                Err(e) if e.is_numeric() => {
                    return Ok(TrainOutcome {
                        model,
                        optimizer,
                        log,
                        failure: Some(e),
                    })
                }
                Err(e) => return Err(e),
            };
            record(
                &mut log,
                LogRecord::Eval {
                    step: optimizer.step,
                    epoch,
                    train,
                    val,
                },
            );
        }
    }
    Ok(TrainOutcome {
        model,
        optimizer,
        log,
        failure: None,
    })
}

/// Builds the model and splits from `config` and trains.
pub fn train<T: Scalar>(config: &Config, on_record: impl FnMut(&LogRecord)) -> Result<TrainOutcome<T>> {
    let model = Model::<T>::new(config)?;
    let splits = Splits::generate(config)?;
    train_model(model, &splits, on_record)
}
