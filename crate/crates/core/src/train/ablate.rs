//! Paired SACN / baseline runs over several seeds.

use crate::config::{Mode, RunConfig};
use crate::data::load_splits;
use crate::error::Result;
use crate::tensor::Real;

use super::{evaluate, TrainState};

#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    /// Test accuracy per seed.
    pub sacn: Vec<f64>,
    pub baseline: Vec<f64>,
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl AblationReport {
    pub fn gap(&self) -> f64 {
        mean_std(&self.sacn).0 - mean_std(&self.baseline).0
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("seed\tsacn\tbaseline\n");
        for (k, s) in self.seeds.iter().enumerate() {
            out.push_str(&format!("{s}\t{:.4}\t{:.4}\n", self.sacn[k], self.baseline[k]));
        }
        let (ms, ss) = mean_std(&self.sacn);
        let (mb, sb) = mean_std(&self.baseline);
        out.push_str(&format!("mean±std\t{ms:.4}±{ss:.4}\t{mb:.4}±{sb:.4}\n"));
        out
    }
}

/// Test accuracy of one full training run.
pub fn train_and_test<T: Real>(cfg: &RunConfig) -> Result<f64> {
    let splits = load_splits(&cfg.data, &cfg.model, cfg.seed)?;
    let mut st = TrainState::<T>::new(cfg)?;
    st.run(&splits, &mut |_| Ok(()))?;
    Ok(evaluate(&st.model, &splits.test, &cfg.loss, cfg.train.batch_size)?.accuracy)
}

/// Train both modes for seeds `cfg.seed .. cfg.seed + k`. Within a seed the
/// two modes share data, sample order and every non-attention weight.
pub fn ablate<T: Real>(cfg: &RunConfig, k: usize) -> Result<AblationReport> {
    let mut report = AblationReport {
        seeds: Vec::new(),
        sacn: Vec::new(),
        baseline: Vec::new(),
    };
    for i in 0..k as u64 {
        let seed = cfg.seed + i;
        report.seeds.push(seed);
        for mode in [Mode::Sacn, Mode::Baseline] {
            let mut c = cfg.clone();
            c.seed = seed;
            c.model.mode = mode;
            let acc = train_and_test::<T>(&c)?;
            log::info!("seed {seed} {mode}: test accuracy {acc:.4}");
            match mode {
                Mode::Sacn => report.sacn.push(acc),
                Mode::Baseline => report.baseline.push(acc),
            }
        }
    }
    Ok(report)
}
