//! Primary capsules, squashing and routing-by-agreement.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PrimaryCapsConfig {
    pub n_types: usize,
    pub capsule_dim: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl PrimaryCapsConfig {
    pub fn conv_channels(&self) -> usize {
        self.n_types * self.capsule_dim
    }
}

/// Reshape the primary convolution output `[B, types·dim, H, W]` into
/// squashed poses `[B, types·H·W, dim]`. Capsule `i` enumerates
/// `(type, row, col)` in row-major order.
pub fn primary_poses<T: Real>(g: &mut Graph<T>, conv_out: Var, cfg: &PrimaryCapsConfig) -> Result<Var> {
    let s = g.shape(conv_out).to_vec();
    if s.len() != 4 || s[1] != cfg.conv_channels() {
        return Err(Error::Shape(format!(
            "primary capsules: conv output {s:?} does not have {} channels",
            cfg.conv_channels()
        )));
    }
    let (batch, loc) = (s[0], s[2] * s[3]);
    let grouped = g.reshape(conv_out, &[batch * cfg.n_types, cfg.capsule_dim, loc])?;
    let poses = g.swap_last2(grouped)?;
    let poses = g.reshape(poses, &[batch, cfg.n_types * loc, cfg.capsule_dim])?;
    Ok(g.squash(poses))
}

/// Squash one vector: `(‖s‖²/(1+‖s‖²)) · s/‖s‖`, zero at the origin.
pub fn squash<T: Real>(s: &[T]) -> Vec<T> {
    let n2: T = s.iter().map(|&e| e * e).sum();
    let n = n2.sqrt();
    if n <= T::zero() {
        return vec![T::zero(); s.len()];
    }
    let f = n / (T::one() + n2);
    s.iter().map(|&e| e * f).collect()
}

/// Prediction transform `W[i, j]: out_dim × in_dim` for every input capsule
/// `i` and class `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct CapsuleTransform<T> {
    /// `[num_in, num_classes, out_dim, in_dim]`
    pub weight: Tensor<T>,
}

impl<T: Real> CapsuleTransform<T> {
    pub fn num_in(&self) -> usize {
        self.weight.shape()[0]
    }
    pub fn num_classes(&self) -> usize {
        self.weight.shape()[1]
    }
    pub fn out_dim(&self) -> usize {
        self.weight.shape()[2]
    }
    pub fn in_dim(&self) -> usize {
        self.weight.shape()[3]
    }
}

fn batched<T: Real>(t: &Tensor<T>, rank: usize) -> Result<Tensor<T>> {
    if t.rank() == rank {
        Ok(t.clone())
    } else if t.rank() + 1 == rank {
        let mut s = vec![1];
        s.extend_from_slice(t.shape());
        t.reshape(&s)
    } else {
        Err(Error::Shape(format!(
            "expected rank {} or {rank}, got {:?}",
            rank - 1,
            t.shape()
        )))
    }
}

/// `û[b, i, j] = W[i, j] · y[b, i]` for poses `[B, I, Din]` (or `[I, Din]`),
/// giving `[B, I, J, Dout]`.
pub fn predictions<T: Real>(poses: &Tensor<T>, w: &CapsuleTransform<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let u = g.constant(batched(poses, 3)?);
    let wv = g.constant(w.weight.clone());
    let uhat = g.caps_predict(u, wv)?;
    Ok(g.value(uhat).clone())
}

/// Graph handles of the final routing iteration.
#[derive(Debug, Clone, Copy)]
pub struct RoutingNodes {
    /// Logits used in the final iteration, `[B, I, J]`.
    pub b: Var,
    /// Couplings of the final iteration, `[B, I, J]`.
    pub c: Var,
    /// Pre-squash sums, `[B, J, D]`.
    pub s: Var,
    /// Class capsules, `[B, J, D]`.
    pub v: Var,
}

/// Unrolled routing on `g`. Logits start at zero; each iteration computes
/// `c = softmax_j(b)`, `s_j = Σ_i c_ij û_{j|i}`, `v_j = squash(s_j)`, and, if
/// another iteration follows, `b_ij += û_{j|i} · v_j`. Gradients flow through
/// the couplings.
pub fn route_graph<T: Real>(g: &mut Graph<T>, uhat: Var, n_iters: usize) -> Result<RoutingNodes> {
    if n_iters < 1 {
        return Err(Error::InvalidArgument("routing needs at least one iteration".into()));
    }
    let su = g.shape(uhat).to_vec();
    if su.len() != 4 {
        return Err(Error::Shape(format!("routing: predictions must be rank 4, got {su:?}")));
    }
    let mut b = g.constant(Tensor::zeros(&su[..3])?);
    let mut it = 0;
    loop {
        let c = g.softmax(b, 2)?;
        let s = g.caps_weighted_sum(c, uhat)?;
        let v = g.squash(s);
        it += 1;
        if it == n_iters {
            return Ok(RoutingNodes { b, c, s, v });
        }
        let agreement = g.caps_agreement(uhat, v)?;
        b = g.add(b, agreement)?;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoutingState<T> {
    pub b: Tensor<T>,
    pub c: Tensor<T>,
    pub s: Tensor<T>,
    pub v: Tensor<T>,
}

/// Route predictions `[B, I, J, D]` (or `[I, J, D]`) and return the class
/// capsules `[B, J, D]` with the final routing state.
pub fn route<T: Real>(uhat: &Tensor<T>, n_iters: usize) -> Result<(Tensor<T>, RoutingState<T>)> {
    let mut g = Graph::new();
    let u = g.constant(batched(uhat, 4)?);
    let nodes = route_graph(&mut g, u, n_iters)?;
    let state = RoutingState {
        b: g.value(nodes.b).clone(),
        c: g.value(nodes.c).clone(),
        s: g.value(nodes.s).clone(),
        v: g.value(nodes.v).clone(),
    };
    Ok((state.v.clone(), state))
}

/// Predicted class and per-class probabilities (capsule lengths) for class
/// capsules `[J, D]`. Ties go to the lowest class index.
pub fn classify<T: Real>(v: &Tensor<T>) -> Result<(usize, Vec<T>)> {
    if v.rank() != 2 {
        return Err(Error::Shape(format!("classify expects [J, D], got {:?}", v.shape())));
    }
    let d = v.shape()[1];
    let lengths: Vec<T> = v
        .data()
        .chunks(d)
        .map(|c| c.iter().map(|&e| e * e).sum::<T>().sqrt())
        .collect();
    Ok((argmax(&lengths), lengths))
}

/// Index of the largest value; the first one wins ties.
pub fn argmax<T: Real>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}
