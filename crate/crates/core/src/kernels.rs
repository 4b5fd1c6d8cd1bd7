//! Raw numeric kernels on flat row-major slices. All `*_acc` kernels add into
//! `out` rather than overwrite it.

use crate::error::{Error, Result};
use crate::tensor::Real;

/// `out[m×p] += a[m×k] · b[k×p]`
pub fn matmul_acc<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, p: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * p);
    debug_assert_eq!(out.len(), m * p);
    for i in 0..m {
        let row = &mut out[i * p..(i + 1) * p];
        for (kk, &aik) in a[i * k..(i + 1) * k].iter().enumerate() {
            if aik == T::zero() {
                continue;
            }
            let brow = &b[kk * p..(kk + 1) * p];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + aik * bv;
            }
        }
    }
}

/// `out[m×p] += a[k×m]ᵀ · b[k×p]`
pub fn matmul_tn_acc<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, p: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * p);
    debug_assert_eq!(out.len(), m * p);
    for kk in 0..k {
        let brow = &b[kk * p..(kk + 1) * p];
        for i in 0..m {
            let aki = a[kk * m + i];
            if aki == T::zero() {
                continue;
            }
            let row = &mut out[i * p..(i + 1) * p];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + aki * bv;
            }
        }
    }
}

/// `out[m×p] += a[m×k] · b[p×k]ᵀ`
pub fn matmul_nt_acc<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, p: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), p * k);
    debug_assert_eq!(out.len(), m * p);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..p {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc = acc + x * y;
            }
            out[i * p + j] = out[i * p + j] + acc;
        }
    }
}

/// Transpose a row-major `rows × cols` matrix.
pub fn transpose<T: Real>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Output extent of a convolution along one axis. Rejects geometries where the
/// kernel does not tile the padded input exactly.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 || kernel == 0 {
        return Err(Error::InvalidArgument(
            "kernel and stride must be positive".into(),
        ));
    }
    let padded = input + 2 * pad;
    if padded < kernel {
        return Err(Error::Shape(format!(
            "kernel {kernel} larger than padded input {padded}"
        )));
    }
    if (padded - kernel) % stride != 0 {
        return Err(Error::Shape(format!(
            "non-integral output extent: ({input} + 2*{pad} - {kernel}) / {stride} + 1"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(
        in_channels: usize,
        height: usize,
        width: usize,
        kernel_h: usize,
        kernel_w: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let out_h = conv_out_extent(height, kernel_h, stride, pad)?;
        let out_w = conv_out_extent(width, kernel_w, stride, pad)?;
        Ok(ConvGeometry {
            in_channels,
            height,
            width,
            kernel_h,
            kernel_w,
            stride,
            pad,
            out_h,
            out_w,
        })
    }

    pub fn col_rows(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    #[inline]
    fn source(&self, out: usize, k: usize) -> Option<usize> {
        let pos = (out * self.stride + k) as isize - self.pad as isize;
        if pos < 0 {
            None
        } else {
            Some(pos as usize)
        }
    }
}

/// Unfold one image `[C×H×W]` into columns `[C·kh·kw × Ho·Wo]`.
pub fn im2col<T: Real>(x: &[T], g: &ConvGeometry, cols: &mut [T]) {
    let ncols = g.col_cols();
    debug_assert_eq!(cols.len(), g.col_rows() * ncols);
    for c in 0..g.in_channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let row = (c * g.kernel_h + ky) * g.kernel_w + kx;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.out_h {
                    let iy = g.source(oy, ky).filter(|&v| v < g.height);
                    for ox in 0..g.out_w {
                        let ix = g.source(ox, kx).filter(|&v| v < g.width);
                        dst[oy * g.out_w + ox] = match (iy, ix) {
                            (Some(iy), Some(ix)) => plane[iy * g.width + ix],
                            _ => T::zero(),
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into an image gradient.
pub fn col2im_acc<T: Real>(cols: &[T], g: &ConvGeometry, dx: &mut [T]) {
    let ncols = g.col_cols();
    for c in 0..g.in_channels {
        let plane = &mut dx[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let row = (c * g.kernel_h + ky) * g.kernel_w + kx;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.out_h {
                    let Some(iy) = g.source(oy, ky).filter(|&v| v < g.height) else {
                        continue;
                    };
                    for ox in 0..g.out_w {
                        if let Some(ix) = g.source(ox, kx).filter(|&v| v < g.width) {
                            let d = &mut plane[iy * g.width + ix];
                            *d = *d + src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, p: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * p];
        for i in 0..m {
            for j in 0..p {
                for t in 0..k {
                    c[i * p + j] += a[i * k + t] * b[t * p + j];
                }
            }
        }
        c
    }

    #[test]
    fn transposed_variants_agree_with_naive() {
        let a: Vec<f64> = (0..6).map(|v| v as f64 * 0.5 - 1.0).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| (v as f64).sin()).collect(); // 3x4
        let want = naive(&a, &b, 2, 3, 4);

        let mut c = vec![0.0; 8];
        matmul_acc(&a, &b, &mut c, 2, 3, 4);
        assert_eq!(c, want);

        let at = transpose(&a, 2, 3);
        let mut c = vec![0.0; 8];
        matmul_tn_acc(&at, &b, &mut c, 2, 3, 4);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }

        let bt = transpose(&b, 3, 4);
        let mut c = vec![0.0; 8];
        matmul_nt_acc(&a, &bt, &mut c, 2, 3, 4);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn extent_rules() {
        assert_eq!(conv_out_extent(28, 5, 1, 0).unwrap(), 24);
        assert_eq!(conv_out_extent(24, 6, 2, 0).unwrap(), 10);
        assert!(conv_out_extent(12, 5, 2, 0).is_err());
        assert!(conv_out_extent(3, 5, 1, 0).is_err());
        assert_eq!(conv_out_extent(3, 5, 1, 1).unwrap(), 1);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeometry::new(2, 5, 4, 3, 2, 1, 1).unwrap();
        let x: Vec<f64> = (0..40).map(|v| (v as f64 * 0.37).cos()).collect();
        let y: Vec<f64> = (0..g.col_rows() * g.col_cols())
            .map(|v| (v as f64 * 0.11).sin())
            .collect();
        let mut cols = vec![0.0; y.len()];
        im2col(&x, &g, &mut cols);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut dx = vec![0.0; 40];
        col2im_acc(&y, &g, &mut dx);
        let rhs: f64 = dx.iter().zip(&x).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
