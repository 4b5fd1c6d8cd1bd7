//! Non-local self-attention block inserted between the convolutional features
//! and the primary capsules.
//!
//! For a feature map `x` with `C` channels and `N = H·W` locations, three 1×1
//! projections give `f = W_f x`, `g = W_g x` (both `C/8` channels) and
//! `h = W_h x` (`C` channels). Then
//!
//! ```text
//! η[i,j] = f(x_i)ᵀ g(x_j)
//! β[i,j] = exp(η[i,j]) / Σ_i exp(η[i,j])      (columns sum to 1)
//! o_j    = Σ_i β[i,j] h(x_i)
//! y_i    = α o_i + x_i
//! ```
//!
//! `α` is a learned scalar initialized to exactly zero, so a freshly built
//! block is the identity on its input. Each projection is spectrally
//! normalized with a cached power-iteration estimate.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{init_params, InitSpec, SpectralNormState};
use crate::rng::Rng;
use crate::tensor::{Real, Tensor};

/// Which index of `β[i,j]` the softmax normalizes over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SoftmaxAxis {
    /// Normalize over the source location `i` (the summed index): every column
    /// of `β` sums to one.
    #[default]
    I,
    /// Normalize over the target location `j`: every row of `β` sums to one.
    J,
}

impl SoftmaxAxis {
    /// Axis of the batched `[B, N, N]` score tensor.
    fn tensor_axis(self) -> usize {
        match self {
            SoftmaxAxis::I => 1,
            SoftmaxAxis::J => 2,
        }
    }
}

impl fmt::Display for SoftmaxAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SoftmaxAxis::I => "i",
            SoftmaxAxis::J => "j",
        })
    }
}

impl FromStr for SoftmaxAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "i" => Ok(SoftmaxAxis::I),
            "j" => Ok(SoftmaxAxis::J),
            other => Err(Error::Config(format!(
                "attention.softmax_axis must be `i` or `j`, got `{other}`"
            ))),
        }
    }
}

/// Width of the query/key projections: `C/8`, or 1 when `C < 8`.
pub fn reduced_channels(channels: usize) -> usize {
    (channels / 8).max(1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionBlockParams<T> {
    /// `[C/8, C, 1, 1]`
    pub w_f: Tensor<T>,
    /// `[C/8, C, 1, 1]`
    pub w_g: Tensor<T>,
    /// `[C, C, 1, 1]`
    pub w_h: Tensor<T>,
    /// `[1]`
    pub alpha: Tensor<T>,
    /// Power-iteration state for `w_f`, `w_g`, `w_h`, or `None` when spectral
    /// normalization is disabled.
    pub spectral: Option<[SpectralNormState; 3]>,
    pub softmax_axis: SoftmaxAxis,
}

impl<T: Real> AttentionBlockParams<T> {
    pub fn new(
        channels: usize,
        init: InitSpec,
        rng: &mut Rng,
        spectral_norm: bool,
        power_iters: usize,
        softmax_axis: SoftmaxAxis,
    ) -> Result<Self> {
        if channels == 0 {
            return Err(Error::InvalidArgument("attention needs at least one channel".into()));
        }
        let r = reduced_channels(channels);
        let w_f = init_params(init, rng, &[r, channels, 1, 1])?;
        let w_g = init_params(init, rng, &[r, channels, 1, 1])?;
        let w_h = init_params(init, rng, &[channels, channels, 1, 1])?;
        let spectral = if spectral_norm {
            let mut s = [
                SpectralNormState::new(r, power_iters, rng)?,
                SpectralNormState::new(r, power_iters, rng)?,
                SpectralNormState::new(channels, power_iters, rng)?,
            ];
            s[0].refresh(&w_f)?;
            s[1].refresh(&w_g)?;
            s[2].refresh(&w_h)?;
            Some(s)
        } else {
            None
        };
        Ok(AttentionBlockParams {
            w_f,
            w_g,
            w_h,
            alpha: Tensor::zeros(&[1])?,
            spectral,
            softmax_axis,
        })
    }

    pub fn channels(&self) -> usize {
        self.w_h.shape()[0]
    }

    /// One round of power iterations on every projection.
    pub fn refresh_spectral(&mut self) -> Result<()> {
        if let Some(s) = &mut self.spectral {
            s[0].refresh(&self.w_f)?;
            s[1].refresh(&self.w_g)?;
            s[2].refresh(&self.w_h)?;
        }
        Ok(())
    }

    /// Multipliers `1/σ̂` applied to `w_f`, `w_g`, `w_h`.
    pub fn weight_scales(&self) -> [T; 3] {
        match &self.spectral {
            Some(s) => [
                T::of(s[0].inverse_sigma()),
                T::of(s[1].inverse_sigma()),
                T::of(s[2].inverse_sigma()),
            ],
            None => [T::one(); 3],
        }
    }

    /// Projection weights as used in the forward pass.
    pub fn effective_weights(&self) -> [Tensor<T>; 3] {
        let [a, b, c] = self.weight_scales();
        [
            self.w_f.map(|e| e * a),
            self.w_g.map(|e| e * b),
            self.w_h.map(|e| e * c),
        ]
    }
}

/// Graph handles for the block's parameters.
#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    pub w_f: Var,
    pub w_g: Var,
    pub w_h: Var,
    pub alpha: Var,
}

/// Graph handles for the block's intermediates.
#[derive(Debug, Clone, Copy)]
pub struct AttentionNodes {
    /// `[B, N, N]`
    pub eta: Var,
    /// `[B, N, N]`
    pub beta: Var,
    /// `[B, C, N]`
    pub o: Var,
    /// `[B, C, H, W]`
    pub y: Var,
}

/// Values of the block's intermediates for inspection.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionIntermediates<T> {
    pub eta: Tensor<T>,
    pub beta: Tensor<T>,
    pub o: Tensor<T>,
    pub y: Tensor<T>,
}

impl<T: Real> AttentionIntermediates<T> {
    pub fn collect(g: &Graph<T>, nodes: &AttentionNodes) -> Self {
        AttentionIntermediates {
            eta: g.value(nodes.eta).clone(),
            beta: g.value(nodes.beta).clone(),
            o: g.value(nodes.o).clone(),
            y: g.value(nodes.y).clone(),
        }
    }
}

/// Register the block's parameters on `g`, applying the spectral scales so
/// that gradients flow to the raw weights with `σ̂` held constant.
pub fn register<T: Real>(g: &mut Graph<T>, p: &AttentionBlockParams<T>) -> (AttentionVars, [Var; 4]) {
    let raw = [
        g.param(p.w_f.clone()),
        g.param(p.w_g.clone()),
        g.param(p.w_h.clone()),
        g.param(p.alpha.clone()),
    ];
    let [sf, sg, sh] = p.weight_scales();
    let vars = AttentionVars {
        w_f: g.scale(raw[0], sf),
        w_g: g.scale(raw[1], sg),
        w_h: g.scale(raw[2], sh),
        alpha: raw[3],
    };
    (vars, raw)
}

fn flatten_locations<T: Real>(g: &mut Graph<T>, v: Var) -> Result<Var> {
    let s = g.shape(v).to_vec();
    g.reshape(v, &[s[0], s[1], s[2] * s[3]])
}

/// Build the block on `g` for `x: [B, C, H, W]`.
pub fn attend<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    vars: &AttentionVars,
    axis: SoftmaxAxis,
) -> Result<AttentionNodes> {
    let sx = g.shape(x).to_vec();
    let c = g.shape(vars.w_h)[1];
    if sx.len() != 4 || sx[1] != c {
        return Err(Error::Shape(format!(
            "attention: input {sx:?} does not have {c} channels"
        )));
    }
    let f = g.conv2d(x, vars.w_f, None, 1, 0)?;
    let f = flatten_locations(g, f)?;
    let gk = g.conv2d(x, vars.w_g, None, 1, 0)?;
    let gk = flatten_locations(g, gk)?;
    let h = g.conv2d(x, vars.w_h, None, 1, 0)?;
    let h = flatten_locations(g, h)?;
    let eta = g.batch_matmul(f, gk, true, false)?;
    let beta = g.softmax(eta, axis.tensor_axis())?;
    let o = g.batch_matmul(h, beta, false, false)?;
    let o4 = g.reshape(o, &sx)?;
    let gated = g.gate_mul(vars.alpha, o4)?;
    let y = g.add(gated, x)?;
    Ok(AttentionNodes { eta, beta, o, y })
}

fn check_input<T: Real>(x: &Tensor<T>, p: &AttentionBlockParams<T>) -> Result<()> {
    if x.rank() != 4 || x.shape()[1] != p.channels() {
        return Err(Error::Shape(format!(
            "attention: input {:?} does not have {} channels",
            x.shape(),
            p.channels()
        )));
    }
    Ok(())
}

/// Pairwise scores `η[b, i, j] = f(x_i)ᵀ g(x_j)`, shape `[B, N, N]`.
pub fn attention_scores<T: Real>(x: &Tensor<T>, p: &AttentionBlockParams<T>) -> Result<Tensor<T>> {
    Ok(attention_forward(x, p)?.1.eta)
}

/// Softmax of the scores along the configured axis.
pub fn attention_map<T: Real>(eta: &Tensor<T>, axis: SoftmaxAxis) -> Result<Tensor<T>> {
    let eta = match eta.rank() {
        2 => eta.reshape(&[1, eta.shape()[0], eta.shape()[1]])?,
        3 => eta.clone(),
        _ => {
            return Err(Error::Shape(format!(
                "attention map needs [N, N] or [B, N, N], got {:?}",
                eta.shape()
            )))
        }
    };
    if !eta.all_finite() {
        return Err(Error::NonFinite("attention scores".into()));
    }
    Ok(crate::graph::softmax_forward(&eta, axis.tensor_axis()))
}

/// `o[b, :, j] = Σ_i β[b, i, j] h(x_i)`, shape `[B, C, N]`.
pub fn attention_output<T: Real>(
    beta: &Tensor<T>,
    x: &Tensor<T>,
    p: &AttentionBlockParams<T>,
) -> Result<Tensor<T>> {
    check_input(x, p)?;
    let [_, _, wh] = p.effective_weights();
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let whv = g.constant(wh);
    let h = g.conv2d(xv, whv, None, 1, 0)?;
    let h = flatten_locations(&mut g, h)?;
    let bv = g.constant(beta.clone());
    let o = g.batch_matmul(h, bv, false, false)?;
    Ok(g.value(o).clone())
}

/// Full block: returns `y` and all intermediates.
pub fn attention_forward<T: Real>(
    x: &Tensor<T>,
    p: &AttentionBlockParams<T>,
) -> Result<(Tensor<T>, AttentionIntermediates<T>)> {
    check_input(x, p)?;
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let (vars, _) = register(&mut g, p);
    let nodes = attend(&mut g, xv, &vars, p.softmax_axis)?;
    let inter = AttentionIntermediates::collect(&g, &nodes);
    Ok((inter.y.clone(), inter))
}

/// Column `query` of one attention map `β: [N, N]` as an `height × width`
/// grayscale image, min-max scaled to `[0, 1]`. A constant column maps to
/// all zeros.
pub fn export_attention<T: Real>(
    beta: &Tensor<T>,
    query: usize,
    height: usize,
    width: usize,
) -> Result<Vec<f64>> {
    let n = height * width;
    if beta.shape() != [n, n] {
        return Err(Error::Shape(format!(
            "attention map {:?} does not match a {height}x{width} grid",
            beta.shape()
        )));
    }
    if query >= n {
        return Err(Error::InvalidArgument(format!(
            "query location {query} out of range (N = {n})"
        )));
    }
    let col: Vec<f64> = (0..n).map(|i| beta.data()[i * n + query].as_f64()).collect();
    let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    Ok(col
        .into_iter()
        .map(|v| if range > 0.0 { (v - lo) / range } else { 0.0 })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(c: usize, seed: u64) -> AttentionBlockParams<f64> {
        AttentionBlockParams::new(
            c,
            InitSpec::new(0.15).unwrap(),
            &mut Rng::new(seed),
            true,
            1,
            SoftmaxAxis::I,
        )
        .unwrap()
    }

    fn random_input(shape: &[usize], seed: u64) -> Tensor<f64> {
        init_params(InitSpec::new(1.0).unwrap(), &mut Rng::new(seed), shape).unwrap()
    }

    #[test]
    fn reduced_width() {
        assert_eq!(reduced_channels(64), 8);
        assert_eq!(reduced_channels(512), 64);
        assert_eq!(reduced_channels(12), 1);
        assert_eq!(reduced_channels(3), 1);
    }

    #[test]
    fn alpha_starts_at_zero_and_block_is_identity() {
        let p = params(8, 1);
        assert_eq!(p.alpha.data(), &[0.0]);
        let x = random_input(&[2, 8, 3, 3], 2);
        let (y, _) = attention_forward(&x, &p).unwrap();
        let same = y.data().iter().zip(x.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        assert!(same);
    }

    #[test]
    fn zero_value_projection_with_unit_gate_is_identity() {
        let mut p = params(8, 3);
        p.alpha = Tensor::scalar(1.0);
        p.w_h = Tensor::zeros(&[8, 8, 1, 1]).unwrap();
        p.refresh_spectral().unwrap();
        let x = random_input(&[1, 8, 2, 2], 4);
        let (y, _) = attention_forward(&x, &p).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn half_gate_adds_half_of_output() {
        let mut p = params(8, 5);
        p.alpha = Tensor::scalar(0.5);
        let x = random_input(&[1, 8, 2, 3], 6);
        let (y, inter) = attention_forward(&x, &p).unwrap();
        for c in 0..8 {
            for n in 0..6 {
                let want = 0.5 * inter.o.get(&[0, c, n]) + x.data()[c * 6 + n];
                assert!((y.data()[c * 6 + n] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_query_projection_gives_zero_scores() {
        let mut p = params(8, 7);
        p.w_f = Tensor::zeros(&[1, 8, 1, 1]).unwrap();
        p.spectral = None;
        let x = random_input(&[1, 8, 2, 2], 8);
        let eta = attention_scores(&x, &p).unwrap();
        assert!(eta.data().iter().all(|&e| e == 0.0));
        let beta = attention_map(&eta, SoftmaxAxis::I).unwrap();
        assert!(beta.data().iter().all(|&b| (b - 0.25).abs() < 1e-15));
    }

    #[test]
    fn single_location_map_is_one() {
        let p = params(8, 9);
        let x = random_input(&[1, 8, 1, 1], 10);
        let (_, inter) = attention_forward(&x, &p).unwrap();
        assert_eq!(inter.eta.shape(), &[1, 1, 1]);
        assert_eq!(inter.beta.data(), &[1.0]);
    }

    #[test]
    fn scores_match_nested_loops() {
        let p = params(8, 11);
        let x = random_input(&[1, 8, 2, 2], 12);
        let eta = attention_scores(&x, &p).unwrap();
        let [wf, wg, _] = p.effective_weights();
        for i in 0..4 {
            for j in 0..4 {
                let mut fi = 0.0;
                let mut gj = 0.0;
                for c in 0..8 {
                    fi += wf.data()[c] * x.data()[c * 4 + i];
                    gj += wg.data()[c] * x.data()[c * 4 + j];
                }
                assert!((eta.get(&[0, i, j]) - fi * gj).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn map_normalizes_columns() {
        let eta = Tensor::<f64>::from_f64(&[2, 2], &[0.0, 1.0, 3f64.ln(), -2.0]).unwrap();
        let beta = attention_map(&eta, SoftmaxAxis::I).unwrap();
        assert!((beta.get(&[0, 0, 0]) - 0.25).abs() < 1e-15);
        assert!((beta.get(&[0, 1, 0]) - 0.75).abs() < 1e-15);
        for j in 0..2 {
            let s = beta.get(&[0, 0, j]) + beta.get(&[0, 1, j]);
            assert!((s - 1.0).abs() < 1e-12);
        }
        let rows = attention_map(&eta, SoftmaxAxis::J).unwrap();
        for i in 0..2 {
            let s = rows.get(&[0, i, 0]) + rows.get(&[0, i, 1]);
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn output_with_uniform_and_selection_maps() {
        let p = params(8, 13);
        let x = random_input(&[1, 8, 2, 2], 14);
        let [_, _, wh] = p.effective_weights();
        let mut h = vec![0.0; 32];
        for co in 0..8 {
            for ci in 0..8 {
                for n in 0..4 {
                    h[co * 4 + n] += wh.data()[co * 8 + ci] * x.data()[ci * 4 + n];
                }
            }
        }
        let uniform = Tensor::full(&[1, 4, 4], 0.25).unwrap();
        let o = attention_output(&uniform, &x, &p).unwrap();
        for c in 0..8 {
            let mean = (0..4).map(|n| h[c * 4 + n]).sum::<f64>() / 4.0;
            for j in 0..4 {
                assert!((o.get(&[0, c, j]) - mean).abs() < 1e-12);
            }
        }
        let eye = Tensor::eye(4).unwrap().reshape(&[1, 4, 4]).unwrap();
        let o = attention_output(&eye, &x, &p).unwrap();
        for c in 0..8 {
            for j in 0..4 {
                assert!((o.get(&[0, c, j]) - h[c * 4 + j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn export_cases() {
        let uniform = Tensor::<f64>::full(&[4, 4], 0.25).unwrap();
        assert_eq!(export_attention(&uniform, 1, 2, 2).unwrap(), vec![0.0; 4]);
        let eye = Tensor::<f64>::eye(4).unwrap();
        assert_eq!(export_attention(&eye, 2, 2, 2).unwrap(), vec![0.0, 0.0, 1.0, 0.0]);
        assert!(export_attention(&eye, 4, 2, 2).is_err());
        assert!(export_attention(&eye, 0, 3, 2).is_err());
    }

    #[test]
    fn permuting_locations_permutes_output() {
        let mut p = params(8, 15);
        p.alpha = Tensor::scalar(0.7);
        let x = random_input(&[1, 8, 1, 4], 16);
        let perm = [2usize, 0, 3, 1];
        let mut xp = x.clone();
        for c in 0..8 {
            for (dst, &src) in perm.iter().enumerate() {
                xp.data_mut()[c * 4 + dst] = x.data()[c * 4 + src];
            }
        }
        let (y, _) = attention_forward(&x, &p).unwrap();
        let (yp, _) = attention_forward(&xp, &p).unwrap();
        for c in 0..8 {
            for (dst, &src) in perm.iter().enumerate() {
                assert!((yp.data()[c * 4 + dst] - y.data()[c * 4 + src]).abs() < 1e-12);
            }
        }
    }
}
