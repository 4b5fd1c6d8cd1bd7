//! Training loop, evaluation, checkpoints, gradient checking and ablations.

pub mod ablate;
pub mod checkpoint;
pub mod gradcheck;
pub mod metrics;
pub mod optim;

use std::time::Instant;

use log::{debug, info};

use crate::capsules::argmax;
use crate::config::{LossConfig, RunConfig};
use crate::data::{Dataset, Splits};
use crate::error::{Error, Result};
use crate::model::SacnModel;
use crate::rng::Rng;
use crate::tensor::{Real, Tensor};

pub use checkpoint::Checkpoint;
pub use metrics::{CsvWriter, MetricsRecord};
pub use optim::Optimizer;

/// Everything needed to continue a run.
#[derive(Debug, Clone)]
pub struct TrainState<T> {
    pub config: RunConfig,
    pub model: SacnModel<T>,
    pub optimizer: Optimizer<T>,
    /// Drives the per-epoch sample order.
    pub rng: Rng,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed updates.
    pub step: usize,
    /// Lowest validation loss seen, for early stopping.
    pub best_val: f64,
    /// Epochs since `best_val` last improved.
    pub bad_epochs: usize,
}

/// Statistics of one update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    /// Batch mean of the total loss, as optimized.
    pub objective: f64,
    pub l_m_sum: f64,
    pub l_r_sum: f64,
    pub l_t_sum: f64,
    pub correct: usize,
    pub n: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    /// Per-sample means.
    pub l_m: f64,
    pub l_r: f64,
    pub l_t: f64,
    pub accuracy: f64,
    pub n: usize,
}

#[derive(Debug, Clone, Default)]
pub struct EpochReport {
    /// Objective of every update in the epoch.
    pub losses: Vec<f64>,
    pub train_accuracy: f64,
    pub val: Option<Evaluation>,
    /// Early stopping or the step cap ended training.
    pub stop: bool,
}

#[derive(Debug, Clone, Default)]
pub struct RunReport {
    pub losses: Vec<f64>,
    pub records: Vec<MetricsRecord>,
    pub epochs: usize,
}

fn accumulate(acc: &mut StepStats, s: &StepStats) {
    acc.l_m_sum += s.l_m_sum;
    acc.l_r_sum += s.l_r_sum;
    acc.l_t_sum += s.l_t_sum;
    acc.correct += s.correct;
    acc.n += s.n;
}

const EMPTY: StepStats = StepStats {
    objective: 0.0,
    l_m_sum: 0.0,
    l_r_sum: 0.0,
    l_t_sum: 0.0,
    correct: 0,
    n: 0,
};

fn record(step: usize, epoch: usize, split: &str, s: &StepStats, seconds: f64) -> MetricsRecord {
    let n = s.n.max(1) as f64;
    MetricsRecord {
        step,
        epoch,
        split: split.to_string(),
        l_m: s.l_m_sum / n,
        l_r: s.l_r_sum / n,
        l_t: s.l_t_sum / n,
        accuracy: s.correct as f64 / n,
        seconds,
    }
}

/// Losses and accuracy of `model` on `data`, in batches of `batch_size`.
/// Reconstructions use the true class, as in training.
pub fn evaluate<T: Real>(model: &SacnModel<T>, data: &Dataset, loss: &LossConfig, batch_size: usize) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty split".into()));
    }
    let mut acc = EMPTY;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let s = batch_stats(model, data, chunk, loss)?.0;
        accumulate(&mut acc, &s);
    }
    let n = acc.n as f64;
    Ok(Evaluation {
        l_m: acc.l_m_sum / n,
        l_r: acc.l_r_sum / n,
        l_t: acc.l_t_sum / n,
        accuracy: acc.correct as f64 / n,
        n: acc.n,
    })
}

/// Predicted classes for every sample of `data`.
pub fn predict<T: Real>(model: &SacnModel<T>, data: &Dataset, loss: &LossConfig, batch_size: usize) -> Result<Vec<usize>> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut out = Vec::with_capacity(data.len());
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, _) = data.batch::<T>(chunk)?;
        out.extend(model.forward(&x, loss)?.predictions);
    }
    Ok(out)
}

fn batch_stats<T: Real>(
    model: &SacnModel<T>,
    data: &Dataset,
    indices: &[usize],
    loss: &LossConfig,
) -> Result<(StepStats, crate::model::ForwardGraph<T>)> {
    let (x, labels) = data.batch::<T>(indices)?;
    let fg = model.build(&x, Some(&labels), loss)?;
    let ln = fg.losses.expect("labels supplied");
    let g = &fg.graph;
    let sum = |v| g.value(v).data().iter().map(|e: &T| e.as_f64()).sum::<f64>();
    let lengths = g.value(fg.lengths);
    let k = lengths.shape()[1];
    let correct = lengths
        .data()
        .chunks(k)
        .zip(&labels)
        .filter(|(row, &l)| argmax(row) == l)
        .count();
    let stats = StepStats {
        objective: g.value(ln.objective).data()[0].as_f64(),
        l_m_sum: sum(ln.margin),
        l_r_sum: sum(ln.reconstruction),
        l_t_sum: sum(ln.total),
        correct,
        n: indices.len(),
    };
    Ok((stats, fg))
}

fn param_norms<T: Real>(model: &SacnModel<T>) -> String {
    model
        .params()
        .iter()
        .map(|(n, p)| format!("{n}={:.6e}", p.norm().as_f64()))
        .collect::<Vec<_>>()
        .join(", ")
}

impl<T: Real> TrainState<T> {
    pub fn new(config: &RunConfig) -> Result<Self> {
        let model = SacnModel::new(config)?;
        let optimizer = Optimizer::new(&config.train, &model.params())?;
        Ok(TrainState {
            config: config.clone(),
            model,
            optimizer,
            rng: Rng::derived(config.seed, "train.order"),
            epoch: 0,
            step: 0,
            best_val: f64::INFINITY,
            bad_epochs: 0,
        })
    }

    /// One update on the samples `indices` of `data`: refresh the spectral
    /// estimates, forward, total loss, backward, optimizer step.
    pub fn train_step(&mut self, data: &Dataset, indices: &[usize]) -> Result<StepStats> {
        self.model.refresh_spectral()?;
        let (stats, mut fg) = batch_stats(&self.model, data, indices, &self.config.loss)?;
        if !stats.objective.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss {} at epoch {} step {} (batch starting with sample {}); parameter norms: {}",
                stats.objective,
                self.epoch + 1,
                self.step + 1,
                indices.first().copied().unwrap_or(0),
                param_norms(&self.model)
            )));
        }
        let objective = fg.losses.expect("labels supplied").objective;
        fg.graph.backward(objective)?;
        let grads: Vec<Tensor<T>> = fg
            .params
            .iter()
            .map(|&v| fg.graph.grad(v).cloned().expect("parameter gradient"))
            .collect();
        self.optimizer.update(&mut self.model.params_mut(), &grads)?;
        self.step += 1;
        Ok(stats)
    }

    fn step_cap_reached(&self) -> bool {
        self.config.train.max_steps > 0 && self.step >= self.config.train.max_steps
    }

    /// Whether the configured budget (epochs, step cap, early stopping) is used up.
    pub fn finished(&self) -> bool {
        let t = &self.config.train;
        self.epoch >= t.epochs
            || self.step_cap_reached()
            || (t.early_stop_patience > 0 && self.bad_epochs >= t.early_stop_patience)
    }

    /// One pass over `splits.train` in a freshly shuffled order, then a
    /// validation pass. Records go to `sink` as they are produced.
    pub fn run_epoch(
        &mut self,
        splits: &Splits,
        start: Instant,
        sink: &mut dyn FnMut(&MetricsRecord) -> Result<()>,
    ) -> Result<EpochReport> {
        let train = &splits.train;
        if train.is_empty() {
            return Err(Error::Data("training split is empty".into()));
        }
        let mut order: Vec<usize> = (0..train.len()).collect();
        self.rng.shuffle(&mut order);
        let epoch = self.epoch + 1;
        let every = self.config.train.metrics_every.max(1);
        let mut report = EpochReport::default();
        let mut window = EMPTY;
        let mut whole = EMPTY;
        for batch in order.chunks(self.config.train.batch_size) {
            let s = self.train_step(train, batch)?;
            report.losses.push(s.objective);
            accumulate(&mut window, &s);
            accumulate(&mut whole, &s);
            if self.step % every == 0 {
                let r = record(self.step, epoch, "train", &window, start.elapsed().as_secs_f64());
                debug!("step {} loss {:.5} acc {:.4}", r.step, r.l_t, r.accuracy);
                sink(&r)?;
                window = EMPTY;
            }
            if self.step_cap_reached() {
                report.stop = true;
                break;
            }
        }
        self.epoch = epoch;
        report.train_accuracy = whole.correct as f64 / whole.n.max(1) as f64;
        if !splits.val.is_empty() {
            let e = evaluate(&self.model, &splits.val, &self.config.loss, self.config.train.batch_size)?;
            let stats = StepStats {
                objective: e.l_t,
                l_m_sum: e.l_m * e.n as f64,
                l_r_sum: e.l_r * e.n as f64,
                l_t_sum: e.l_t * e.n as f64,
                correct: (e.accuracy * e.n as f64).round() as usize,
                n: e.n,
            };
            sink(&record(self.step, epoch, "val", &stats, start.elapsed().as_secs_f64()))?;
            info!(
                "epoch {epoch}: train acc {:.4}, val loss {:.5}, val acc {:.4}",
                report.train_accuracy, e.l_t, e.accuracy
            );
            if e.l_t < self.best_val {
                self.best_val = e.l_t;
                self.bad_epochs = 0;
            } else {
                self.bad_epochs += 1;
            }
            report.val = Some(e);
        }
        report.stop |= self.finished();
        Ok(report)
    }

    /// Train until the budget is used up.
    pub fn run(&mut self, splits: &Splits, sink: &mut dyn FnMut(&MetricsRecord) -> Result<()>) -> Result<RunReport> {
        let start = Instant::now();
        let mut out = RunReport::default();
        while !self.finished() {
            let mut collect = |r: &MetricsRecord| {
                out.records.push(r.clone());
                sink(r)
            };
            let e = self.run_epoch(splits, start, &mut collect)?;
            out.losses.extend(e.losses);
            out.epochs += 1;
            if e.stop {
                break;
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use crate::data::load_splits;

    fn mini() -> (RunConfig, Splits) {
        let mut c = RunConfig::preset("mini").unwrap();
        c.data.n = 40;
        let s = load_splits(&c.data, &c.model, c.seed).unwrap();
        (c, s)
    }

    #[test]
    fn empty_split_rejected() {
        let (c, s) = mini();
        let m = SacnModel::<f64>::new(&c).unwrap();
        let empty = s.train.subset(&[]);
        assert!(matches!(evaluate(&m, &empty, &c.loss, 4), Err(Error::Data(_))));
    }

    #[test]
    fn zero_lr_leaves_parameters_unchanged() {
        let (mut c, s) = mini();
        c.train.lr = 0.0;
        let mut st = TrainState::<f64>::new(&c).unwrap();
        let before = st.model.params().iter().map(|(_, p)| (*p).clone()).collect::<Vec<_>>();
        for _ in 0..3 {
            st.run_epoch(&s, Instant::now(), &mut |_| Ok(())).unwrap();
        }
        let after = st.model.params().iter().map(|(_, p)| (*p).clone()).collect::<Vec<_>>();
        assert_eq!(before, after);
    }

    #[test]
    fn non_finite_loss_aborts_with_diagnostics() {
        let (c, s) = mini();
        let mut st = TrainState::<f64>::new(&c).unwrap();
        st.model.decoder.layers[2].1.data_mut()[0] = f64::NAN;
        let err = st.train_step(&s.train, &[0, 1]).unwrap_err();
        assert_eq!(err.exit_code(), 3);
        let msg = err.to_string();
        assert!(msg.contains("step 1") && msg.contains("decoder.fc3.bias="), "{msg}");
    }
}
