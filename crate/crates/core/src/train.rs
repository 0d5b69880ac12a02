//! Quantization-aware training loop and evaluation.

use std::f64::consts::PI;
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::Graph;
use crate::data::{epoch_permutation, Dataset, RunConfig};
use crate::error::{Error, Result};
use crate::nn::{Mode, Model};
use crate::optim::{adam_step, AdamConfig, OptimizerState};
use crate::quant::{SteParams, SteSchedule};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    pub cosine_lr: bool,
    pub ste: SteSchedule,
}

impl TrainOptions {
    pub fn from_config(c: &RunConfig) -> Self {
        Self {
            epochs: c.epochs,
            batch_size: c.batch_size,
            eval_batch_size: c.eval_batch_size,
            seed: c.seed,
            adam: c.optimizer,
            cosine_lr: c.cosine_lr,
            ste: c.ste,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(Error::Config(format!(
                "epochs and batch sizes must be positive, got {self:?}"
            )));
        }
        self.adam.validate()?;
        self.ste.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_loss: f64,
    pub test_acc: f64,
}

pub const METRICS_CSV_HEADER: &str = "epoch,train_loss,train_acc,test_loss,test_acc";

pub fn metrics_to_csv(rows: &[EpochMetrics]) -> String {
    let mut s = String::from(METRICS_CSV_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            r.epoch, r.train_loss, r.train_acc, r.test_loss, r.test_acc
        );
    }
    s
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub metrics: Vec<EpochMetrics>,
    /// STE parameters in force at the last step.
    pub final_ste: SteParams,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
}

/// Mean cross-entropy and the number of correct predictions.
fn score(logits: &Tensor, labels: &[usize]) -> (f64, usize) {
    let k = logits.shape()[1];
    let mut loss = 0.0;
    let mut correct = 0;
    for (row, &y) in logits.data().chunks(k).zip(labels) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        loss += lse - row[y];
        let best = row
            .iter()
            .enumerate()
            .fold(0, |b, (i, &v)| if v > row[b] { i } else { b });
        correct += (best == y) as usize;
    }
    (loss, correct)
}

/// Digital inference over `data` in batches.
pub fn evaluate(model: &Model, data: &Dataset, batch_size: usize) -> Result<Evaluation> {
    if data.is_empty() || batch_size == 0 {
        return Err(Error::InvalidArgument("evaluation needs samples and a positive batch size".into()));
    }
    let mut loss = 0.0;
    let mut correct = 0;
    for start in (0..data.len()).step_by(batch_size) {
        let end = (start + batch_size).min(data.len());
        let logits = model.predict(&data.images.slice_outer(start, end)?)?;
        let (l, c) = score(&logits, &data.labels[start..end]);
        loss += l;
        correct += c;
    }
    let n = data.len() as f64;
    Ok(Evaluation {
        loss: loss / n,
        accuracy: correct as f64 / n,
    })
}

fn lr_at(opts: &TrainOptions, step: usize, total: usize) -> f64 {
    if opts.cosine_lr {
        0.5 * opts.adam.lr * (1.0 + (PI * step as f64 / total as f64).cos())
    } else {
        opts.adam.lr
    }
}

/// The RNG used for model initialization.
pub fn init_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Train `model` in place, calling `on_epoch` after each epoch's evaluation.
pub fn train(
    model: &mut Model,
    train_set: &Dataset,
    test_set: &Dataset,
    opts: &TrainOptions,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    opts.validate()?;
    if train_set.is_empty() || test_set.is_empty() {
        return Err(Error::InvalidArgument("training and test sets must be non-empty".into()));
    }
    let mut state = OptimizerState::new(opts.adam, model.params().iter().map(|(_, t)| t));
    let per_epoch = train_set.len().div_ceil(opts.batch_size);
    let total = per_epoch * opts.epochs;
    let mut step = 0;
    let mut ste = opts.ste.at(0.0);
    let mut metrics = Vec::with_capacity(opts.epochs);
    for epoch in 0..opts.epochs {
        let order = epoch_permutation(train_set.len(), opts.seed, epoch as u64);
        let mut loss_sum = 0.0;
        let mut correct = 0;
        for idx in order.chunks(opts.batch_size) {
            ste = opts.ste.at(step as f64 / total.max(1) as f64);
            state.config.lr = lr_at(opts, step, total);
            let (x, y) = train_set.batch(idx)?;
            let mut g = Graph::new();
            let fp = model.forward(&mut g, x, Mode::Train, ste)?;
            let loss = g.softmax_cross_entropy(fp.logits, &y)?;
            let lv = g.value(loss).data()[0];
            if !lv.is_finite() {
                return Err(Error::Numeric(format!("loss became {lv} at epoch {epoch}, step {step}")));
            }
            let (_, c) = score(g.value(fp.logits), &y);
            loss_sum += lv * idx.len() as f64;
            correct += c;
            g.backward(loss)?;
            let grads: Vec<Tensor> = fp
                .params
                .iter()
                .map(|&p| g.grad(p).cloned().unwrap_or_else(|| Tensor::zeros_like(g.value(p))))
                .collect();
            if let Some(i) = grads.iter().position(|t| !t.all_finite()) {
                return Err(Error::Numeric(format!(
                    "gradient of {} became non-finite at epoch {epoch}, step {step}",
                    model.params()[i].0
                )));
            }
            let grad_refs: Vec<&Tensor> = grads.iter().collect();
            let mut ps: Vec<&mut Tensor> = model.params_mut().collect();
            adam_step(&mut ps, &grad_refs, &mut state)?;
            model.post_update();
            step += 1;
        }
        let ev = evaluate(model, test_set, opts.eval_batch_size)?;
        if !ev.loss.is_finite() {
            return Err(Error::Numeric(format!("test loss became {} after epoch {epoch}", ev.loss)));
        }
        let m = EpochMetrics {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            train_acc: correct as f64 / train_set.len() as f64,
            test_loss: ev.loss,
            test_acc: ev.accuracy,
        };
        log::info!(
            "epoch {epoch}: train loss {:.4} acc {:.4}, test loss {:.4} acc {:.4}",
            m.train_loss,
            m.train_acc,
            m.test_loss,
            m.test_acc
        );
        on_epoch(&m);
        metrics.push(m);
    }
    Ok(TrainOutcome {
        metrics,
        final_ste: ste,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Split;
    use crate::nn::{Architecture, QuantConfig};

    fn synthetic(n: usize, seed: u64) -> Dataset {
        // Class k has a bright 7×7 block at row band k % 4, column band k / 4.
        let mut rng = init_rng(seed);
        let mut x = Tensor::rand_uniform(&[n, 1, 28, 28], 0.0, 0.2, &mut rng);
        let labels: Vec<usize> = (0..n).map(|i| i % 8).collect();
        for (i, &y) in labels.iter().enumerate() {
            let (r0, c0) = ((y % 4) * 7, (y / 4) * 14);
            for r in r0..r0 + 7 {
                for c in c0..c0 + 7 {
                    x.data_mut()[i * 784 + r * 28 + c] = 1.0;
                }
            }
        }
        Dataset::new(x, labels, 10, Split::Train).unwrap()
    }

    fn opts(epochs: usize) -> TrainOptions {
        TrainOptions {
            epochs,
            batch_size: 16,
            eval_batch_size: 64,
            seed: 3,
            adam: AdamConfig {
                lr: 3e-3,
                ..Default::default()
            },
            cosine_lr: true,
            ste: SteSchedule::default(),
        }
    }

    fn run(seed: u64) -> (Model, TrainOutcome) {
        let arch = Architecture::builtin("mnist-tiny").unwrap();
        let mut m = Model::new(arch, QuantConfig::bwma(4), &mut init_rng(seed)).unwrap();
        let (tr, te) = (synthetic(96, 1), synthetic(32, 2));
        let out = train(&mut m, &tr, &te, &opts(2), |_| {}).unwrap();
        (m, out)
    }

    #[test]
    fn two_epochs_are_deterministic_and_learn() {
        let (a, oa) = run(5);
        let (b, ob) = run(5);
        assert_eq!(oa.metrics, ob.metrics);
        for ((_, x), (_, y)) in a.params().iter().zip(b.params()) {
            assert!(x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
        assert_eq!(oa.metrics.len(), 2);
        assert!(oa.metrics[1].train_loss < oa.metrics[0].train_loss);
        assert!((oa.final_ste.t - 10.0).abs() < 1.0);
        let csv = metrics_to_csv(&oa.metrics);
        assert!(csv.starts_with(METRICS_CSV_HEADER));
        assert_eq!(csv.lines().count(), 3);
    }

    #[test]
    fn cosine_schedule_ends_near_zero() {
        let o = opts(1);
        assert_eq!(lr_at(&o, 0, 100), 3e-3);
        assert!(lr_at(&o, 99, 100) < 1e-5);
    }

    #[test]
    fn divergence_is_reported() {
        let arch = Architecture::builtin("mnist-tiny").unwrap();
        let mut m = Model::new(arch, QuantConfig::float(), &mut init_rng(0)).unwrap();
        let mut tr = synthetic(16, 1);
        tr.images.data_mut()[0] = 1e300;
        let o = TrainOptions {
            adam: AdamConfig {
                lr: 1e300,
                ..Default::default()
            },
            ..opts(1)
        };
        assert!(matches!(train(&mut m, &tr, &synthetic(8, 2), &o, |_| {}), Err(Error::Numeric(_))));
    }
}
