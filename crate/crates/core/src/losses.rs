//! Margin loss, reconstruction decoder and the combined objective.
//!
//! Per sample:
//!
//! ```text
//! L_M = Σ_k T_k max(0, m⁺ − ‖v_k‖)² + λ (1 − T_k) max(0, ‖v_k‖ − m⁻)²
//! L_R = Σ (I − Î)²
//! L_T = L_M + ξ · I_size · L_R
//! ```

use std::fmt;
use std::str::FromStr;

use crate::capsules::argmax;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{init_params, InitSpec};
use crate::rng::Rng;
use crate::tensor::{Real, Tensor};

/// Default reconstruction weight per input value.
pub const DEFAULT_XI: f64 = 0.0005;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarginConfig {
    pub m_plus: f64,
    pub m_minus: f64,
    pub lambda: f64,
}

impl Default for MarginConfig {
    fn default() -> Self {
        MarginConfig {
            m_plus: 0.9,
            m_minus: 0.1,
            lambda: 0.5,
        }
    }
}

impl MarginConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.m_minus && self.m_minus < self.m_plus && self.m_plus < 1.0) {
            return Err(Error::Config(format!(
                "margins must satisfy 0 < m_minus < m_plus < 1, got {} / {}",
                self.m_minus, self.m_plus
            )));
        }
        if !(self.lambda > 0.0) {
            return Err(Error::Config(format!("lambda must be positive, got {}", self.lambda)));
        }
        Ok(())
    }
}

/// Margin loss of one sample with single label `label`.
pub fn margin_loss<T: Real>(lengths: &[T], label: usize, cfg: &MarginConfig) -> Result<T> {
    if label >= lengths.len() {
        return Err(Error::InvalidArgument(format!(
            "label {label} out of range for {} classes",
            lengths.len()
        )));
    }
    let (mp, mm, lam) = (T::of(cfg.m_plus), T::of(cfg.m_minus), T::of(cfg.lambda));
    let zero = T::zero();
    let mut total = zero;
    for (k, &len) in lengths.iter().enumerate() {
        if !(len >= zero && len <= T::one()) {
            return Err(Error::InvalidArgument(format!(
                "capsule length {len} of class {k} outside [0, 1]"
            )));
        }
        total = total
            + if k == label {
                let h = (mp - len).max(zero);
                h * h
            } else {
                let h = (len - mm).max(zero);
                lam * h * h
            };
    }
    Ok(total)
}

/// Per-sample margin loss `[B]` for lengths `[B, J]`.
pub fn margin_graph<T: Real>(
    g: &mut Graph<T>,
    lengths: Var,
    labels: &[usize],
    cfg: &MarginConfig,
) -> Result<Var> {
    let s = g.shape(lengths).to_vec();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(Error::Shape(format!(
            "margin loss: lengths {s:?} vs {} labels",
            labels.len()
        )));
    }
    let (batch, classes) = (s[0], s[1]);
    let mut present = vec![T::zero(); batch * classes];
    let mut absent = vec![T::of(cfg.lambda); batch * classes];
    for (b, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::InvalidArgument(format!(
                "label {l} out of range for {classes} classes"
            )));
        }
        present[b * classes + l] = T::one();
        absent[b * classes + l] = T::zero();
    }
    let present = g.constant(Tensor::new(&s, present)?);
    let absent = g.constant(Tensor::new(&s, absent)?);

    let neg = g.scale(lengths, -T::one());
    let short = g.add_const(neg, T::of(cfg.m_plus));
    let short = g.relu(short);
    let short = g.square(short);
    let short = g.mul(short, present)?;

    let long = g.add_const(lengths, T::of(-cfg.m_minus));
    let long = g.relu(long);
    let long = g.square(long);
    let long = g.mul(long, absent)?;

    let both = g.add(short, long)?;
    g.sum_axis(both, 1)
}

/// How the decoder input capsule is chosen when no label is available.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ReconSelection {
    /// The longest class capsule (the predicted class).
    #[default]
    Longest,
    /// The class receiving the largest total coupling `Σ_i c_ij`. With a
    /// single routing iteration every coupling is equal and this always
    /// selects class 0.
    HighestCoupling,
}

impl fmt::Display for ReconSelection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ReconSelection::Longest => "longest",
            ReconSelection::HighestCoupling => "highest-coupling",
        })
    }
}

impl FromStr for ReconSelection {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "longest" => Ok(ReconSelection::Longest),
            "highest-coupling" => Ok(ReconSelection::HighestCoupling),
            other => Err(Error::Config(format!(
                "loss.recon_selection must be `longest` or `highest-coupling`, got `{other}`"
            ))),
        }
    }
}

/// Classes to feed the decoder, one per sample. `lengths: [B, J]`,
/// `couplings: [B, I, J]`.
pub fn select_capsules<T: Real>(
    rule: ReconSelection,
    lengths: &Tensor<T>,
    couplings: &Tensor<T>,
) -> Vec<usize> {
    let (batch, classes) = (lengths.shape()[0], lengths.shape()[1]);
    match rule {
        ReconSelection::Longest => lengths.data().chunks(classes).map(argmax).collect(),
        ReconSelection::HighestCoupling => {
            let ni = couplings.shape()[1];
            (0..batch)
                .map(|b| {
                    let mut tot = vec![T::zero(); classes];
                    for i in 0..ni {
                        for (j, t) in tot.iter_mut().enumerate() {
                            *t = *t + couplings.data()[(b * ni + i) * classes + j];
                        }
                    }
                    argmax(&tot)
                })
                .collect()
        }
    }
}

/// Two ReLU hidden layers and a sigmoid output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams<T> {
    /// `(weight [in, out], bias [out])` for each of the three layers.
    pub layers: [(Tensor<T>, Tensor<T>); 3],
}

impl<T: Real> DecoderParams<T> {
    pub fn new(
        input: usize,
        hidden: [usize; 2],
        output: usize,
        init: InitSpec,
        rng: &mut Rng,
    ) -> Result<Self> {
        let dims = [input, hidden[0], hidden[1], output];
        let layer = |i: usize, rng: &mut Rng| -> Result<(Tensor<T>, Tensor<T>)> {
            Ok((init_params(init, rng, &[dims[i], dims[i + 1]])?, Tensor::zeros(&[dims[i + 1]])?))
        };
        Ok(DecoderParams {
            layers: [layer(0, rng)?, layer(1, rng)?, layer(2, rng)?],
        })
    }

    pub fn input_size(&self) -> usize {
        self.layers[0].0.shape()[0]
    }

    pub fn output_size(&self) -> usize {
        self.layers[2].0.shape()[1]
    }
}

/// Zero every class capsule except `selected[b]`, flatten to `[B, J·D]`.
pub fn mask_graph<T: Real>(g: &mut Graph<T>, v: Var, selected: &[usize]) -> Result<Var> {
    let s = g.shape(v).to_vec();
    if s.len() != 3 || s[0] != selected.len() {
        return Err(Error::Shape(format!(
            "mask: capsules {s:?} vs {} selections",
            selected.len()
        )));
    }
    let (batch, classes, dim) = (s[0], s[1], s[2]);
    let mut mask = vec![T::zero(); batch * classes * dim];
    for (b, &k) in selected.iter().enumerate() {
        if k >= classes {
            return Err(Error::InvalidArgument(format!("selected class {k} out of range")));
        }
        mask[(b * classes + k) * dim..(b * classes + k + 1) * dim].fill(T::one());
    }
    let mask = g.constant(Tensor::new(&s, mask)?);
    let masked = g.mul(v, mask)?;
    g.reshape(masked, &[batch, classes * dim])
}

/// Decoder on `g` for a masked input `[B, J·D]`; `layers` holds the
/// `(weight, bias)` handles.
pub fn decoder_graph<T: Real>(g: &mut Graph<T>, input: Var, layers: &[(Var, Var); 3]) -> Result<Var> {
    let h = g.linear(input, layers[0].0, Some(layers[0].1))?;
    let h = g.relu(h);
    let h = g.linear(h, layers[1].0, Some(layers[1].1))?;
    let h = g.relu(h);
    let out = g.linear(h, layers[2].0, Some(layers[2].1))?;
    Ok(g.sigmoid(out))
}

/// Decode class capsules `[B, J, D]` using `selected[b]` for each sample.
pub fn reconstruct<T: Real>(v: &Tensor<T>, selected: &[usize], d: &DecoderParams<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let vv = g.constant(v.clone());
    let masked = mask_graph(&mut g, vv, selected)?;
    let layers = d.layers.clone().map(|(w, b)| (g.constant(w), g.constant(b)));
    let out = decoder_graph(&mut g, masked, &layers)?;
    Ok(g.value(out).clone())
}

/// Summed squared error between an image and its reconstruction.
pub fn reconstruction_loss<T: Real>(image: &Tensor<T>, recon: &Tensor<T>) -> Result<T> {
    if image.len() != recon.len() {
        return Err(Error::Shape(format!(
            "reconstruction loss: {:?} vs {:?}",
            image.shape(),
            recon.shape()
        )));
    }
    Ok(image
        .data()
        .iter()
        .zip(recon.data())
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum())
}

/// Per-sample summed squared error `[B]` for `recon, target: [B, P]`.
pub fn reconstruction_graph<T: Real>(g: &mut Graph<T>, recon: Var, target: Var) -> Result<Var> {
    let diff = g.sub(recon, target)?;
    let sq = g.square(diff);
    g.sum_axis(sq, 1)
}

/// `L_M + ξ · I_size · L_R`.
pub fn total_loss<T: Real>(l_m: T, l_r: T, i_size: usize, xi: f64) -> T {
    l_m + T::of(xi * i_size as f64) * l_r
}

/// Losses of one evaluation, averaged per sample.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub l_m: f64,
    pub l_r: f64,
    pub l_t: f64,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn margin_hand_cases() {
        let cfg = MarginConfig::default();
        assert_eq!(margin_loss(&[0.9f64, 0.1], 0, &cfg).unwrap(), 0.0);
        let l = margin_loss(&[0.0f64, 0.0], 0, &cfg).unwrap();
        assert!((l - 0.81).abs() < 1e-12);
        let l = margin_loss(&[0.9f64, 0.6], 0, &cfg).unwrap();
        assert!((l - 0.125).abs() < 1e-12);
    }

    #[test]
    fn margin_rejects_invalid_lengths() {
        let cfg = MarginConfig::default();
        assert!(margin_loss(&[1.2f64, 0.0], 0, &cfg).is_err());
        assert!(margin_loss(&[-0.1f64, 0.0], 0, &cfg).is_err());
        assert!(margin_loss(&[0.5f64, 0.0], 2, &cfg).is_err());
    }

    #[test]
    fn margin_config_validation() {
        assert!(MarginConfig::default().validate().is_ok());
        let bad = MarginConfig { m_plus: 0.1, m_minus: 0.9, lambda: 0.5 };
        assert!(bad.validate().is_err());
        let bad = MarginConfig { lambda: 0.0, ..Default::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn margin_graph_matches_direct_formula() {
        let cfg = MarginConfig::default();
        let lengths = [0.3, 0.95, 0.05, 0.7, 0.2, 0.5];
        let labels = [1usize, 2];
        let mut g = Graph::<f64>::new();
        let lv = g.constant(Tensor::from_f64(&[2, 3], &lengths).unwrap());
        let out = margin_graph(&mut g, lv, &labels, &cfg).unwrap();
        for b in 0..2 {
            let want = margin_loss(&lengths[b * 3..b * 3 + 3], labels[b], &cfg).unwrap();
            assert!((g.value(out).data()[b] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn reconstruction_cases() {
        let a = Tensor::<f64>::full(&[4], 0.25).unwrap();
        assert_eq!(reconstruction_loss(&a, &a).unwrap(), 0.0);
        let z = Tensor::<f64>::zeros(&[4]).unwrap();
        let o = Tensor::<f64>::ones(&[4]).unwrap();
        assert_eq!(reconstruction_loss(&z, &o).unwrap(), 4.0);
        assert!(reconstruction_loss(&z, &Tensor::zeros(&[5]).unwrap()).is_err());
    }

    #[test]
    fn total_loss_cases() {
        let lt: f64 = total_loss(1.0, 2.0, 16 * 16, DEFAULT_XI);
        assert!((lt - 1.256).abs() < 1e-12);
        assert_eq!(total_loss(0.7f64, 0.0, 784, DEFAULT_XI), 0.7);
        let lt: f64 = total_loss(0.5, 10.0, 28 * 28, DEFAULT_XI);
        assert!((lt - 4.42).abs() < 1e-12);
    }

    #[test]
    fn zero_capsules_decode_to_half() {
        let mut d = DecoderParams::<f64>::new(6, [5, 4], 9, InitSpec::new(0.15).unwrap(), &mut Rng::new(1)).unwrap();
        for (_, b) in d.layers.iter_mut() {
            *b = b.zeros_like();
        }
        let v = Tensor::zeros(&[2, 3, 2]).unwrap();
        let out = reconstruct(&v, &[0, 2], &d).unwrap();
        assert_eq!(out.shape(), &[2, 9]);
        assert!(out.data().iter().all(|&x| x == 0.5));
    }

    #[test]
    fn unselected_capsules_do_not_matter() {
        let d = DecoderParams::<f64>::new(6, [5, 4], 9, InitSpec::new(0.15).unwrap(), &mut Rng::new(2)).unwrap();
        let a = Tensor::from_f64(&[1, 3, 2], &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        let b = Tensor::from_f64(&[1, 3, 2], &[9.0, -9.0, 0.3, 0.4, 7.0, 1.0]).unwrap();
        assert_eq!(reconstruct(&a, &[1], &d).unwrap(), reconstruct(&b, &[1], &d).unwrap());
    }

    #[test]
    fn decoder_matches_straight_line_forward() {
        let d = DecoderParams::<f64>::new(4, [3, 3], 2, InitSpec::new(0.5).unwrap(), &mut Rng::new(3)).unwrap();
        let v = Tensor::from_f64(&[1, 2, 2], &[0.3, -0.2, 0.5, 0.1]).unwrap();
        let out = reconstruct(&v, &[1], &d).unwrap();
        let mut x = vec![0.0, 0.0, 0.5, 0.1];
        for (l, (w, b)) in d.layers.iter().enumerate() {
            let (din, dout) = (w.shape()[0], w.shape()[1]);
            let mut y: Vec<f64> = b.data().to_vec();
            for o in 0..dout {
                for i in 0..din {
                    y[o] += x[i] * w.get(&[i, o]);
                }
                y[o] = if l < 2 { y[o].max(0.0) } else { 1.0 / (1.0 + (-y[o]).exp()) };
            }
            x = y;
        }
        for (a, e) in out.data().iter().zip(&x) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn selection_rules() {
        let lengths = Tensor::<f64>::from_f64(&[2, 3], &[0.1, 0.8, 0.3, 0.5, 0.5, 0.2]).unwrap();
        let c = Tensor::<f64>::full(&[2, 4, 3], 1.0 / 3.0).unwrap();
        assert_eq!(select_capsules(ReconSelection::Longest, &lengths, &c), vec![1, 0]);
        assert_eq!(select_capsules(ReconSelection::HighestCoupling, &lengths, &c), vec![0, 0]);
        let mut c2 = c.clone();
        c2.set(&[1, 0, 2], 0.9);
        assert_eq!(select_capsules(ReconSelection::HighestCoupling, &lengths, &c2), vec![0, 2]);
    }
}
