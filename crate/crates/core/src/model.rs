//! Full network: feature convolution → (attention) → primary capsules →
//! class capsules → decoder.

use crate::attention::{self, AttentionBlockParams, AttentionIntermediates, AttentionNodes};
use crate::capsules::{self, argmax, CapsuleTransform};
use crate::config::{AttentionConfig, LossConfig, Mode, ModelConfig, RunConfig};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::kernels::conv_out_extent;
use crate::losses::{self, select_capsules, DecoderParams};
use crate::nn::{init_params, Conv2dParams, InitSpec};
use crate::rng::{derive_seed, Rng};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct SacnModel<T> {
    pub config: ModelConfig,
    pub attention_config: AttentionConfig,
    pub feature: Conv2dParams<T>,
    pub attention: Option<AttentionBlockParams<T>>,
    pub primary: Conv2dParams<T>,
    pub transform: CapsuleTransform<T>,
    pub decoder: DecoderParams<T>,
}

/// Spatial sizes through the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Geometry {
    pub feature_h: usize,
    pub feature_w: usize,
    pub primary_h: usize,
    pub primary_w: usize,
    pub num_primary_caps: usize,
}

impl Geometry {
    pub fn of(m: &ModelConfig) -> Result<Self> {
        let layer = |name: &str, r: Result<usize>| {
            r.map_err(|e| Error::Config(format!("{name}: {e}")))
        };
        let feature_h = layer("feature conv", conv_out_extent(m.height, m.feature_kernel, 1, 0))?;
        let feature_w = layer("feature conv", conv_out_extent(m.width, m.feature_kernel, 1, 0))?;
        let p = &m.primary;
        let primary_h = layer("primary caps", conv_out_extent(feature_h, p.kernel, p.stride, 0))?;
        let primary_w = layer("primary caps", conv_out_extent(feature_w, p.kernel, p.stride, 0))?;
        Ok(Geometry {
            feature_h,
            feature_w,
            primary_h,
            primary_w,
            num_primary_caps: p.n_types * primary_h * primary_w,
        })
    }
}

/// One row of [`SacnModel::parameter_census`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CensusRow {
    pub name: &'static str,
    pub shape: Vec<usize>,
    pub count: usize,
}

/// Handles into a built forward graph.
#[derive(Debug)]
pub struct ForwardGraph<T> {
    pub graph: Graph<T>,
    /// Parameter leaves in [`SacnModel::params`] order.
    pub params: Vec<Var>,
    /// Capsule lengths `[B, J]`.
    pub lengths: Var,
    /// Class capsules `[B, J, D]`.
    pub capsules: Var,
    /// Final couplings `[B, I, J]`.
    pub couplings: Var,
    /// Decoder output `[B, C·H·W]`.
    pub reconstruction: Var,
    pub attention: Option<AttentionNodes>,
    pub losses: Option<LossNodes>,
}

#[derive(Debug, Clone, Copy)]
pub struct LossNodes {
    /// Per-sample margin loss `[B]`.
    pub margin: Var,
    /// Per-sample reconstruction loss `[B]`.
    pub reconstruction: Var,
    /// Per-sample total loss `[B]`.
    pub total: Var,
    /// Batch mean of the total loss `[1]`; the training objective.
    pub objective: Var,
}

/// Result of [`SacnModel::forward`].
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput<T> {
    /// Capsule lengths `[B, J]`.
    pub probabilities: Tensor<T>,
    pub predictions: Vec<usize>,
    /// `[B, C·H·W]`
    pub reconstructions: Tensor<T>,
    pub attention: Option<AttentionIntermediates<T>>,
}

impl<T: Real> SacnModel<T> {
    /// Fresh model. Every layer draws from its own stream derived from `seed`,
    /// so the baseline and attention variants share all common weights.
    pub fn new(run: &RunConfig) -> Result<Self> {
        run.validate()?;
        let m = run.model.clone();
        let geo = Geometry::of(&m)?;
        let init = InitSpec::new(m.init_variance)?;
        let stream = |name: &str| Rng::new(derive_seed(run.seed, name));

        let c = m.feature_channels;
        let feature = Conv2dParams {
            weight: init_params(init, &mut stream("init.feature"), &[c, m.in_channels, m.feature_kernel, m.feature_kernel])?,
            bias: Some(Tensor::zeros(&[c])?),
            stride: 1,
            padding: 0,
        };
        let attention = match m.mode {
            Mode::Sacn => Some(AttentionBlockParams::new(
                c,
                init,
                &mut stream("init.attention"),
                run.attention.spectral_norm,
                run.attention.power_iters,
                run.attention.softmax_axis,
            )?),
            Mode::Baseline => None,
        };
        let p = m.primary;
        let primary = Conv2dParams {
            weight: init_params(init, &mut stream("init.primary"), &[p.conv_channels(), c, p.kernel, p.kernel])?,
            bias: Some(Tensor::zeros(&[p.conv_channels()])?),
            stride: p.stride,
            padding: 0,
        };
        let transform = CapsuleTransform {
            weight: init_params(
                init,
                &mut stream("init.transform"),
                &[geo.num_primary_caps, m.num_classes, m.class_dim, p.capsule_dim],
            )?,
        };
        let decoder = DecoderParams::new(
            m.num_classes * m.class_dim,
            m.decoder_hidden,
            run.input_size(),
            init,
            &mut stream("init.decoder"),
        )?;
        Ok(SacnModel {
            config: m,
            attention_config: run.attention.clone(),
            feature,
            attention,
            primary,
            transform,
            decoder,
        })
    }

    pub fn geometry(&self) -> Geometry {
        Geometry::of(&self.config).expect("validated at construction")
    }

    pub fn mode(&self) -> Mode {
        if self.attention.is_some() {
            Mode::Sacn
        } else {
            Mode::Baseline
        }
    }

    pub fn input_size(&self) -> usize {
        self.config.in_channels * self.config.height * self.config.width
    }

    /// Named parameter tensors in a fixed order.
    pub fn params(&self) -> Vec<(&'static str, &Tensor<T>)> {
        let mut out: Vec<(&'static str, &Tensor<T>)> = vec![
            ("feature.weight", &self.feature.weight),
            ("feature.bias", self.feature.bias.as_ref().expect("feature bias")),
        ];
        if let Some(a) = &self.attention {
            out.push(("attention.w_f", &a.w_f));
            out.push(("attention.w_g", &a.w_g));
            out.push(("attention.w_h", &a.w_h));
            out.push(("attention.alpha", &a.alpha));
        }
        out.push(("primary.weight", &self.primary.weight));
        out.push(("primary.bias", self.primary.bias.as_ref().expect("primary bias")));
        out.push(("capsule.transform", &self.transform.weight));
        let [l1, l2, l3] = &self.decoder.layers;
        out.extend([
            ("decoder.fc1.weight", &l1.0),
            ("decoder.fc1.bias", &l1.1),
            ("decoder.fc2.weight", &l2.0),
            ("decoder.fc2.bias", &l2.1),
            ("decoder.fc3.weight", &l3.0),
            ("decoder.fc3.bias", &l3.1),
        ]);
        out
    }

    /// Mutable view in the same order as [`SacnModel::params`].
    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        let mut out: Vec<(&'static str, &mut Tensor<T>)> = vec![
            ("feature.weight", &mut self.feature.weight),
            ("feature.bias", self.feature.bias.as_mut().expect("feature bias")),
        ];
        if let Some(a) = &mut self.attention {
            out.push(("attention.w_f", &mut a.w_f));
            out.push(("attention.w_g", &mut a.w_g));
            out.push(("attention.w_h", &mut a.w_h));
            out.push(("attention.alpha", &mut a.alpha));
        }
        out.push(("primary.weight", &mut self.primary.weight));
        out.push(("primary.bias", self.primary.bias.as_mut().expect("primary bias")));
        out.push(("capsule.transform", &mut self.transform.weight));
        let [l1, l2, l3] = &mut self.decoder.layers;
        out.extend([
            ("decoder.fc1.weight", &mut l1.0),
            ("decoder.fc1.bias", &mut l1.1),
            ("decoder.fc2.weight", &mut l2.0),
            ("decoder.fc2.bias", &mut l2.1),
            ("decoder.fc3.weight", &mut l3.0),
            ("decoder.fc3.bias", &mut l3.1),
        ]);
        out
    }

    pub fn parameter_census(&self) -> (Vec<CensusRow>, usize) {
        let rows: Vec<CensusRow> = self
            .params()
            .into_iter()
            .map(|(name, t)| CensusRow {
                name,
                shape: t.shape().to_vec(),
                count: t.len(),
            })
            .collect();
        let total = rows.iter().map(|r| r.count).sum();
        (rows, total)
    }

    /// Power-iteration refresh of the attention projections' spectral norms.
    pub fn refresh_spectral(&mut self) -> Result<()> {
        if let Some(a) = &mut self.attention {
            a.refresh_spectral()?;
        }
        Ok(())
    }

    fn check_batch(&self, images: &Tensor<T>) -> Result<usize> {
        let m = &self.config;
        let want = [m.in_channels, m.height, m.width];
        if images.rank() != 4 || images.shape()[1..] != want {
            return Err(Error::Shape(format!(
                "input layer: batch {:?} does not match [B, {}, {}, {}]",
                images.shape(),
                want[0],
                want[1],
                want[2]
            )));
        }
        Ok(images.shape()[0])
    }

    /// Record the forward pass for `images: [B, C, H, W]` on a fresh graph.
    /// With `labels`, the decoder reconstructs from the true class and the
    /// loss nodes are built; without, `loss.recon_selection` picks the class.
    pub fn build(
        &self,
        images: &Tensor<T>,
        labels: Option<&[usize]>,
        loss: &LossConfig,
    ) -> Result<ForwardGraph<T>> {
        self.build_on(Graph::new(), images, labels, loss)
    }

    /// [`SacnModel::build`] on a caller-supplied (empty) graph.
    pub fn build_on(
        &self,
        mut g: Graph<T>,
        images: &Tensor<T>,
        labels: Option<&[usize]>,
        loss: &LossConfig,
    ) -> Result<ForwardGraph<T>> {
        let batch = self.check_batch(images)?;
        if let Some(l) = labels {
            if l.len() != batch {
                return Err(Error::Shape(format!(
                    "loss layer: {} labels for a batch of {batch}",
                    l.len()
                )));
            }
        }
        let x = g.constant(images.clone());
        let mut params = Vec::new();

        let fw = g.param(self.feature.weight.clone());
        let fb = g.param(self.feature.bias.clone().expect("feature bias"));
        params.extend([fw, fb]);
        let features = g.conv2d(x, fw, Some(fb), 1, 0)?;
        let mut features = g.relu(features);

        let mut attention_nodes = None;
        if let Some(a) = &self.attention {
            let (vars, raw) = attention::register(&mut g, a);
            params.extend(raw);
            let nodes = attention::attend(&mut g, features, &vars, a.softmax_axis)?;
            features = nodes.y;
            attention_nodes = Some(nodes);
        }

        let pw = g.param(self.primary.weight.clone());
        let pb = g.param(self.primary.bias.clone().expect("primary bias"));
        params.extend([pw, pb]);
        let pc = g.conv2d(features, pw, Some(pb), self.primary.stride, 0)?;
        let poses = capsules::primary_poses(&mut g, pc, &self.config.primary)?;

        let tw = g.param(self.transform.weight.clone());
        params.push(tw);
        let uhat = g.caps_predict(poses, tw)?;
        let routing = capsules::route_graph(&mut g, uhat, self.config.routing_iters)?;
        let lengths = g.l2norm(routing.v, 2)?;

        let selected: Vec<usize> = match labels {
            Some(l) => l.to_vec(),
            None => select_capsules(loss.recon_selection, g.value(lengths), g.value(routing.c)),
        };
        let masked = losses::mask_graph(&mut g, routing.v, &selected)?;
        let mut layers = Vec::with_capacity(3);
        for (w, b) in &self.decoder.layers {
            let wv = g.param(w.clone());
            let bv = g.param(b.clone());
            params.extend([wv, bv]);
            layers.push((wv, bv));
        }
        let layers: [(Var, Var); 3] = [layers[0], layers[1], layers[2]];
        let reconstruction = losses::decoder_graph(&mut g, masked, &layers)?;

        let loss_nodes = match labels {
            Some(l) => {
                let margin = losses::margin_graph(&mut g, lengths, l, &loss.margin)?;
                let target = g.constant(images.reshape(&[batch, self.input_size()])?);
                let recon = losses::reconstruction_graph(&mut g, reconstruction, target)?;
                let weighted = g.scale(recon, T::of(loss.xi * self.input_size() as f64));
                let total = g.add(margin, weighted)?;
                let sum = g.sum(total);
                let objective = g.scale(sum, T::one() / T::of(batch as f64));
                Some(LossNodes {
                    margin,
                    reconstruction: recon,
                    total,
                    objective,
                })
            }
            None => None,
        };

        Ok(ForwardGraph {
            graph: g,
            params,
            lengths,
            capsules: routing.v,
            couplings: routing.c,
            reconstruction,
            attention: attention_nodes,
            losses: loss_nodes,
        })
    }

    /// Inference forward pass.
    pub fn forward(&self, images: &Tensor<T>, loss: &LossConfig) -> Result<ForwardOutput<T>> {
        let fg = self.build(images, None, loss)?;
        Ok(fg.output())
    }
}

impl<T: Real> ForwardGraph<T> {
    pub fn output(&self) -> ForwardOutput<T> {
        let probabilities = self.graph.value(self.lengths).clone();
        let classes = probabilities.shape()[1];
        let predictions = probabilities.data().chunks(classes).map(argmax).collect();
        ForwardOutput {
            probabilities,
            predictions,
            reconstructions: self.graph.value(self.reconstruction).clone(),
            attention: self
                .attention
                .as_ref()
                .map(|n| AttentionIntermediates::collect(&self.graph, n)),
        }
    }
}
