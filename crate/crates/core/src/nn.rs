//! Non-capsule layers: convolution, fully connected, weight initialization and
//! spectral normalization.

use log::warn;

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::rng::Rng;
use crate::tensor::{Real, Tensor};

/// Zero-mean normal initializer with the given variance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitSpec {
    pub variance: f64,
}

impl InitSpec {
    pub fn new(variance: f64) -> Result<Self> {
        if !(variance > 0.0 && variance.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "init variance must be positive, got {variance}"
            )));
        }
        Ok(InitSpec { variance })
    }

    pub fn std(&self) -> f64 {
        self.variance.sqrt()
    }
}

/// I.i.d. `N(0, variance)` tensor.
pub fn init_params<T: Real>(spec: InitSpec, rng: &mut Rng, shape: &[usize]) -> Result<Tensor<T>> {
    let std = spec.std();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::of(rng.normal() * std)).collect();
    Tensor::new(shape, data)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2dParams<T> {
    /// `[out_channels, in_channels, kh, kw]`
    pub weight: Tensor<T>,
    /// `[out_channels]`
    pub bias: Option<Tensor<T>>,
    pub stride: usize,
    pub padding: usize,
}

/// Cross-correlation of `x: [B, C, H, W]` with `p`, outside of any training graph.
pub fn conv2d<T: Real>(x: &Tensor<T>, p: &Conv2dParams<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let wv = g.constant(p.weight.clone());
    let bv = p.bias.clone().map(|b| g.constant(b));
    let y = g.conv2d(xv, wv, bv, p.stride, p.padding)?;
    Ok(g.value(y).clone())
}

/// `x · weight + bias` for `x: [B, D]`, `weight: [D, D']`, `bias: [D']`.
pub fn fully_connected<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let wv = g.constant(weight.clone());
    let bv = bias.map(|b| g.constant(b.clone()));
    let y = g.linear(xv, wv, bv)?;
    Ok(g.value(y).clone())
}

/// Power-iteration estimate of the largest singular value of a weight viewed
/// as a `rows × (rest)` matrix. The estimate is held as a constant during
/// backpropagation; only [`SpectralNormState::refresh`] changes it.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralNormState {
    /// Left singular-vector estimate, unit norm.
    pub u: Vec<f64>,
    pub sigma: f64,
    pub n_power_iters: usize,
    /// Set when the matrix was zero (or numerically so) at the last refresh;
    /// the weight is then passed through unscaled.
    pub degenerate: bool,
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        for x in v.iter_mut() {
            *x /= n;
        }
    }
    n
}

fn matrix_dims<T: Real>(w: &Tensor<T>) -> (usize, usize) {
    let rows = w.shape()[0];
    (rows, w.len() / rows)
}

impl SpectralNormState {
    pub fn new(rows: usize, n_power_iters: usize, rng: &mut Rng) -> Result<Self> {
        if rows == 0 || n_power_iters == 0 {
            return Err(Error::InvalidArgument(
                "spectral norm needs rows >= 1 and at least one power iteration".into(),
            ));
        }
        let mut u: Vec<f64> = (0..rows).map(|_| rng.normal()).collect();
        if normalize(&mut u) == 0.0 {
            u[0] = 1.0;
        }
        Ok(SpectralNormState {
            u,
            sigma: 1.0,
            n_power_iters,
            degenerate: false,
        })
    }

    /// Right singular-vector estimate `v = Wᵀu / ‖Wᵀu‖` for the current `u`.
    fn right_vector<T: Real>(&self, w: &Tensor<T>) -> (Vec<f64>, f64) {
        let (rows, cols) = matrix_dims(w);
        let wd = w.data();
        let mut v = vec![0.0; cols];
        for r in 0..rows {
            let ur = self.u[r];
            for (c, vc) in v.iter_mut().enumerate() {
                *vc += wd[r * cols + c].as_f64() * ur;
            }
        }
        let n = normalize(&mut v);
        (v, n)
    }

    /// Run the configured number of power iterations against `w`, updating
    /// `u` and the cached `sigma`.
    pub fn refresh<T: Real>(&mut self, w: &Tensor<T>) -> Result<()> {
        self.iterate(w, self.n_power_iters)
    }

    pub fn iterate<T: Real>(&mut self, w: &Tensor<T>, iters: usize) -> Result<()> {
        let (rows, cols) = matrix_dims(w);
        if rows != self.u.len() {
            return Err(Error::Shape(format!(
                "spectral norm state has {} rows, weight has {rows}",
                self.u.len()
            )));
        }
        let wd = w.data();
        for _ in 0..iters {
            let (v, vn) = self.right_vector(w);
            if vn <= f64::MIN_POSITIVE {
                warn!("spectral normalization on a zero matrix; weight left unscaled");
                self.degenerate = true;
                self.sigma = 1.0;
                return Ok(());
            }
            let mut u = vec![0.0; rows];
            for (r, ur) in u.iter_mut().enumerate() {
                *ur = (0..cols).map(|c| wd[r * cols + c].as_f64() * v[c]).sum();
            }
            if normalize(&mut u) <= f64::MIN_POSITIVE {
                self.degenerate = true;
                self.sigma = 1.0;
                return Ok(());
            }
            self.u = u;
        }
        let (v, _) = self.right_vector(w);
        let sigma: f64 = (0..rows)
            .map(|r| {
                self.u[r] * (0..cols).map(|c| wd[r * cols + c].as_f64() * v[c]).sum::<f64>()
            })
            .sum();
        self.degenerate = !(sigma > 0.0 && sigma.is_finite());
        self.sigma = if self.degenerate { 1.0 } else { sigma };
        Ok(())
    }

    /// Multiplier applied to the raw weight.
    pub fn inverse_sigma(&self) -> f64 {
        if self.degenerate {
            1.0
        } else {
            1.0 / self.sigma
        }
    }
}

/// One refresh of `state` against `w`, returning `w / σ̂`.
pub fn spectral_normalize<T: Real>(w: &Tensor<T>, state: &mut SpectralNormState) -> Result<Tensor<T>> {
    state.refresh(w)?;
    let k = T::of(state.inverse_sigma());
    Ok(w.map(|e| e * k))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_identity_and_constant_cases() {
        let x = Tensor::<f64>::from_f64(&[1, 1, 2, 3], &[1., 2., 3., 4., 5., 6.]).unwrap();
        let id = Conv2dParams {
            weight: Tensor::from_f64(&[1, 1, 1, 1], &[1.0]).unwrap(),
            bias: Some(Tensor::zeros(&[1]).unwrap()),
            stride: 1,
            padding: 0,
        };
        assert_eq!(conv2d(&x, &id).unwrap(), x);

        let zero = Conv2dParams {
            weight: Tensor::zeros(&[2, 1, 2, 2]).unwrap(),
            bias: Some(Tensor::from_f64(&[2], &[0.25, -1.0]).unwrap()),
            stride: 1,
            padding: 0,
        };
        let y = conv2d(&x, &zero).unwrap();
        assert_eq!(y.shape(), &[1, 2, 1, 2]);
        assert_eq!(y.data(), &[0.25, 0.25, -1.0, -1.0]);
    }

    #[test]
    fn conv_ones_3x3_with_2x2_kernel_gives_fours() {
        let x = Tensor::<f64>::ones(&[1, 1, 3, 3]).unwrap();
        let p = Conv2dParams {
            weight: Tensor::ones(&[1, 1, 2, 2]).unwrap(),
            bias: None,
            stride: 1,
            padding: 0,
        };
        let y = conv2d(&x, &p).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.data(), &[4.0; 4]);
    }

    #[test]
    fn conv_rejects_non_integral_extent_and_channel_mismatch() {
        let x = Tensor::<f64>::ones(&[1, 1, 12, 12]).unwrap();
        let p = Conv2dParams {
            weight: Tensor::ones(&[1, 1, 5, 5]).unwrap(),
            bias: None,
            stride: 2,
            padding: 0,
        };
        assert!(matches!(conv2d(&x, &p), Err(Error::Shape(_))));
        let p = Conv2dParams {
            weight: Tensor::ones(&[1, 2, 1, 1]).unwrap(),
            bias: None,
            stride: 1,
            padding: 0,
        };
        assert!(conv2d(&x, &p).is_err());
    }

    #[test]
    fn fully_connected_identity_and_bias() {
        let x = Tensor::<f64>::from_f64(&[2, 2], &[1., -2., 3., 4.]).unwrap();
        let eye = Tensor::eye(2).unwrap();
        assert_eq!(fully_connected(&x, &eye, None).unwrap(), x);
        let zero = Tensor::zeros(&[2, 3]).unwrap();
        let b = Tensor::from_f64(&[3], &[1., 2., 3.]).unwrap();
        let y = fully_connected(&x, &zero, Some(&b)).unwrap();
        assert_eq!(y.data(), &[1., 2., 3., 1., 2., 3.]);
    }

    #[test]
    fn fully_connected_random_case_matches_expansion() {
        // [[1,2,3],[4,5,6]] · [[1,-1],[0,2],[0.5,0]] + [0.1, 0.2]
        let x = Tensor::<f64>::from_f64(&[2, 3], &[1., 2., 3., 4., 5., 6.]).unwrap();
        let w = Tensor::from_f64(&[3, 2], &[1., -1., 0., 2., 0.5, 0.]).unwrap();
        let b = Tensor::from_f64(&[2], &[0.1, 0.2]).unwrap();
        let y = fully_connected(&x, &w, Some(&b)).unwrap();
        let want = [1. + 1.5 + 0.1, -1. + 4. + 0.2, 4. + 3. + 0.1, -4. + 10. + 0.2];
        for (a, e) in y.data().iter().zip(want) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn init_rejects_nonpositive_variance() {
        assert!(InitSpec::new(0.0).is_err());
        assert!(InitSpec::new(-1.0).is_err());
        assert!(InitSpec::new(f64::NAN).is_err());
    }

    #[test]
    fn init_is_deterministic() {
        let spec = InitSpec::new(0.15).unwrap();
        let a: Tensor<f32> = init_params(spec, &mut Rng::new(5), &[4, 4]).unwrap();
        let b: Tensor<f32> = init_params(spec, &mut Rng::new(5), &[4, 4]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sampled_variance_matches_medical_and_natural_presets() {
        let mut rng = Rng::new(11);
        let t: Tensor<f64> = init_params(InitSpec::new(0.15).unwrap(), &mut rng, &[100_000]).unwrap();
        let mean = t.sum() / t.len() as f64;
        let var = t.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / t.len() as f64;
        assert!((0.135..=0.165).contains(&var), "var {var}");

        let t: Tensor<f64> = init_params(InitSpec::new(0.01).unwrap(), &mut rng, &[100_000]).unwrap();
        let mean = t.sum() / t.len() as f64;
        let std = (t.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / t.len() as f64).sqrt();
        assert!((std - 0.1).abs() < 0.01, "std {std}");
    }

    #[test]
    fn spectral_norm_of_scaled_identity() {
        let w = Tensor::<f64>::from_f64(&[2, 2], &[2., 0., 0., 2.]).unwrap();
        let mut s = SpectralNormState::new(2, 5, &mut Rng::new(1)).unwrap();
        let out = spectral_normalize(&w, &mut s).unwrap();
        assert!((s.sigma - 2.0).abs() < 1e-12);
        for (a, e) in out.data().iter().zip([1., 0., 0., 1.]) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn spectral_norm_zero_matrix_is_flagged() {
        let w = Tensor::<f64>::zeros(&[3, 2]).unwrap();
        let mut s = SpectralNormState::new(3, 1, &mut Rng::new(1)).unwrap();
        let out = spectral_normalize(&w, &mut s).unwrap();
        assert!(s.degenerate);
        assert_eq!(out, w);
    }

    #[test]
    fn spectral_norm_fixed_point() {
        let w = Tensor::<f64>::from_f64(&[2, 2], &[1., 0., 0., 0.5]).unwrap();
        let mut s = SpectralNormState::new(2, 30, &mut Rng::new(4)).unwrap();
        let out = spectral_normalize(&w, &mut s).unwrap();
        for (a, e) in out.data().iter().zip(w.data()) {
            assert!((a - e).abs() < 1e-3);
        }
    }
}
