//! Central-difference gradient check of the full model, per parameter group.

use crate::config::{Precision, RunConfig};
use crate::error::{Error, Result};
use crate::graph::{GradFault, Graph};
use crate::model::SacnModel;
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GradcheckOptions {
    pub routing_iters: Vec<usize>,
    pub eps: f64,
    pub threshold: f64,
    pub batch: usize,
    /// Gate value used during the check; at the initial `α = 0` the
    /// attention projections receive no gradient at all.
    pub alpha: f64,
    #[doc(hidden)]
    pub fault: Option<GradFault>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            routing_iters: vec![1, 3],
            eps: 1e-5,
            threshold: 1e-5,
            batch: 2,
            alpha: 0.5,
            fault: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupResult {
    pub routing_iters: usize,
    pub group: String,
    /// `max |analytic − numeric| / max(max |analytic|, max |numeric|)` over
    /// the group.
    pub rel_error: f64,
    pub grad_scale: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub groups: Vec<GroupResult>,
    pub threshold: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.passed)
    }

    pub fn failing(&self) -> Vec<&GroupResult> {
        self.groups.iter().filter(|g| !g.passed).collect()
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{:<8} {:<22} {:>12} {:>12}  result\n", "routing", "group", "rel_error", "grad_scale");
        for g in &self.groups {
            out.push_str(&format!(
                "{:<8} {:<22} {:>12.3e} {:>12.3e}  {}\n",
                g.routing_iters,
                g.group,
                g.rel_error,
                g.grad_scale,
                if g.passed { "pass" } else { "FAIL" }
            ));
        }
        out
    }
}

fn objective(model: &SacnModel<f64>, x: &Tensor<f64>, labels: &[usize], cfg: &RunConfig) -> Result<f64> {
    let fg = model.build(x, Some(labels), &cfg.loss)?;
    Ok(fg.graph.value(fg.losses.expect("labels").objective).data()[0])
}

/// Check analytic gradients of the training objective against central
/// differences for every parameter group, once per routing setting.
pub fn gradcheck(cfg: &RunConfig, opts: &GradcheckOptions) -> Result<GradcheckReport> {
    if cfg.train.precision != Precision::F64 {
        return Err(Error::Config("gradcheck requires train.precision = f64".into()));
    }
    let mut rng = Rng::derived(cfg.seed, "gradcheck.batch");
    let m = &cfg.model;
    let n_img = opts.batch * m.in_channels * m.height * m.width;
    let x = Tensor::new(
        &[opts.batch, m.in_channels, m.height, m.width],
        (0..n_img).map(|_| rng.uniform()).collect(),
    )?;
    let labels: Vec<usize> = (0..opts.batch).map(|_| rng.below(m.num_classes)).collect();

    let mut groups = Vec::new();
    for &iters in &opts.routing_iters {
        let mut c = cfg.clone();
        c.model.routing_iters = iters;
        let mut model = SacnModel::<f64>::new(&c)?;
        if let Some(a) = &mut model.attention {
            a.alpha.data_mut()[0] = opts.alpha;
        }

        let mut g = Graph::new();
        if let Some(f) = opts.fault {
            g = g.with_fault(f);
        }
        let mut fg = model.build_on(g, &x, Some(&labels), &c.loss)?;
        let root = fg.losses.expect("labels").objective;
        fg.graph.backward(root)?;
        let analytic: Vec<Tensor<f64>> = fg
            .params
            .iter()
            .map(|&v| fg.graph.grad(v).cloned().expect("parameter gradient"))
            .collect();
        let names: Vec<&'static str> = model.params().iter().map(|(n, _)| *n).collect();

        for (k, name) in names.iter().enumerate() {
            let len = analytic[k].len();
            let mut numeric = vec![0.0; len];
            for (i, slot) in numeric.iter_mut().enumerate() {
                let orig = model.params()[k].1.data()[i];
                model.params_mut()[k].1.data_mut()[i] = orig + opts.eps;
                let up = objective(&model, &x, &labels, &c)?;
                model.params_mut()[k].1.data_mut()[i] = orig - opts.eps;
                let down = objective(&model, &x, &labels, &c)?;
                model.params_mut()[k].1.data_mut()[i] = orig;
                *slot = (up - down) / (2.0 * opts.eps);
            }
            let a = analytic[k].data();
            let scale = a
                .iter()
                .chain(&numeric)
                .fold(0.0f64, |s, v| s.max(v.abs()));
            let diff = a.iter().zip(&numeric).fold(0.0f64, |s, (p, q)| s.max((p - q).abs()));
            let rel_error = if scale > f64::MIN_POSITIVE { diff / scale } else { 0.0 };
            groups.push(GroupResult {
                routing_iters: iters,
                group: name.to_string(),
                rel_error,
                grad_scale: scale,
                passed: rel_error < opts.threshold,
            });
        }
    }
    Ok(GradcheckReport {
        groups,
        threshold: opts.threshold,
    })
}
