//! Matrix products and direct (im2col) 2-d convolution.
//!
//! The kernels are generic over [`Real`] so the deterministic inference path
//! can run in `f32` while training stays in `f64`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub trait Real: num_traits::Float + Default + core::iter::Sum + core::fmt::Debug + 'static {
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;

    /// `c = alpha * a @ b + beta * c` on strided matrices.
    ///
    /// # Safety
    /// Every strided access `(i, j)` inside the given dimensions must be in
    /// bounds of the corresponding pointer.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Real for f64 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Real for f32 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// A strided matrix view: `(rows, cols, row_stride, col_stride)`.
#[derive(Clone, Copy, Debug)]
pub struct MatView {
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl MatView {
    pub fn row_major(rows: usize, cols: usize) -> Self {
        Self { rows, cols, rs: cols, cs: 1 }
    }

    /// The transpose of a row-major `rows x cols` matrix.
    pub fn transposed(rows: usize, cols: usize) -> Self {
        Self { rows: cols, cols: rows, rs: 1, cs: cols }
    }

    fn max_index(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            0
        } else {
            (self.rows - 1) * self.rs + (self.cols - 1) * self.cs
        }
    }
}

/// `c = alpha * a @ b + beta * c` with bounds-checked views.
pub fn gemm<T: Real>(alpha: T, a: &[T], av: MatView, b: &[T], bv: MatView, beta: T, c: &mut [T], cv: MatView) {
    assert_eq!(av.cols, bv.rows, "gemm inner dimension");
    assert_eq!(av.rows, cv.rows, "gemm output rows");
    assert_eq!(bv.cols, cv.cols, "gemm output cols");
    if cv.rows == 0 || cv.cols == 0 {
        return;
    }
    if av.cols == 0 {
        for i in 0..cv.rows {
            for j in 0..cv.cols {
                let idx = i * cv.rs + j * cv.cs;
                c[idx] = if beta == T::zero() { T::zero() } else { beta * c[idx] };
            }
        }
        return;
    }
    assert!(av.max_index() < a.len() && bv.max_index() < b.len() && cv.max_index() < c.len());
    // SAFETY: all strided accesses were bounds-checked above.
    unsafe {
        T::gemm_raw(
            av.rows,
            av.cols,
            bv.cols,
            alpha,
            a.as_ptr(),
            av.rs as isize,
            av.cs as isize,
            b.as_ptr(),
            bv.rs as isize,
            bv.cs as isize,
            beta,
            c.as_mut_ptr(),
            cv.rs as isize,
            cv.cs as isize,
        )
    }
}

fn expect_rank(t: &Tensor, rank: usize, op: &'static str) -> Result<()> {
    if t.rank() != rank {
        return Err(Error::InvalidShape {
            op,
            detail: format!("expected rank {}, got shape {:?}", rank, t.shape()),
        });
    }
    Ok(())
}

/// `[m, k] @ [k, n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    expect_rank(a, 2, "matmul")?;
    expect_rank(b, 2, "matmul")?;
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (k2, n) = (b.shape()[0], b.shape()[1]);
    if k != k2 {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mut out = vec![0.0; m * n];
    gemm(
        1.0,
        a.data(),
        MatView::row_major(m, k),
        b.data(),
        MatView::row_major(k, n),
        0.0,
        &mut out,
        MatView::row_major(m, n),
    );
    Tensor::new(vec![m, n], out)
}

/// `[m, k] @ [n, k]^T`, the dense-layer product `x W^T`.
pub fn matmul_t(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    expect_rank(a, 2, "matmul_t")?;
    expect_rank(b, 2, "matmul_t")?;
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (n, k2) = (b.shape()[0], b.shape()[1]);
    if k != k2 {
        return Err(Error::ShapeMismatch {
            op: "matmul_t",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mut out = vec![0.0; m * n];
    gemm(
        1.0,
        a.data(),
        MatView::row_major(m, k),
        b.data(),
        MatView::transposed(n, k),
        0.0,
        &mut out,
        MatView::row_major(m, n),
    );
    Tensor::new(vec![m, n], out)
}

/// Stride and symmetric zero padding of a 2-d convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
}

impl Default for ConvGeometry {
    fn default() -> Self {
        Self { stride: 1, padding: 0 }
    }
}

/// Resolved shapes of one convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvShape {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kh: usize,
    pub kw: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub geom: ConvGeometry,
}

impl ConvShape {
    pub fn resolve(x: &[usize], w: &[usize], geom: ConvGeometry) -> Result<Self> {
        if x.len() != 4 || w.len() != 4 {
            return Err(Error::InvalidShape {
                op: "conv2d",
                detail: format!("expected NCHW input and OIHW kernel, got {:?} and {:?}", x, w),
            });
        }
        if x[1] != w[1] {
            return Err(Error::ShapeMismatch {
                op: "conv2d channels",
                lhs: x.to_vec(),
                rhs: w.to_vec(),
            });
        }
        if geom.stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be positive".into()));
        }
        let (h, wd) = (x[2] + 2 * geom.padding, x[3] + 2 * geom.padding);
        if w[2] > h || w[3] > wd {
            return Err(Error::InvalidShape {
                op: "conv2d",
                detail: format!("kernel {:?} larger than padded input {}x{}", &w[2..], h, wd),
            });
        }
        Ok(Self {
            batch: x[0],
            in_channels: x[1],
            height: x[2],
            width: x[3],
            out_channels: w[0],
            kh: w[2],
            kw: w[3],
            out_h: (h - w[2]) / geom.stride + 1,
            out_w: (wd - w[3]) / geom.stride + 1,
            geom,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kh * self.kw
    }

    pub fn out_pixels(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn in_image_len(&self) -> usize {
        self.in_channels * self.height * self.width
    }

    pub fn out_image_len(&self) -> usize {
        self.out_channels * self.out_pixels()
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.batch, self.out_channels, self.out_h, self.out_w]
    }

    /// Input coordinate of output pixel `(oy, ox)` at kernel tap `(ky, kx)`,
    /// or `None` when it falls into the zero padding.
    #[inline]
    pub fn input_coord(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let y = (oy * self.geom.stride + ky) as isize - self.geom.padding as isize;
        let x = (ox * self.geom.stride + kx) as isize - self.geom.padding as isize;
        if y < 0 || x < 0 || y as usize >= self.height || x as usize >= self.width {
            None
        } else {
            Some((y as usize, x as usize))
        }
    }
}

/// Unrolls one `[C, H, W]` image into a `[C*kh*kw, OH*OW]` patch matrix.
pub fn im2col<T: Real>(image: &[T], s: &ConvShape, cols: &mut [T]) {
    let p = s.out_pixels();
    for c in 0..s.in_channels {
        for ky in 0..s.kh {
            for kx in 0..s.kw {
                let row = (c * s.kh + ky) * s.kw + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..s.out_h {
                    for ox in 0..s.out_w {
                        dst[oy * s.out_w + ox] = match s.input_coord(oy, ox, ky, kx) {
                            Some((y, x)) => image[(c * s.height + y) * s.width + x],
                            None => T::zero(),
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates a patch matrix back into an image.
pub fn col2im<T: Real>(cols: &[T], s: &ConvShape, image: &mut [T]) {
    let p = s.out_pixels();
    for c in 0..s.in_channels {
        for ky in 0..s.kh {
            for kx in 0..s.kw {
                let row = (c * s.kh + ky) * s.kw + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..s.out_h {
                    for ox in 0..s.out_w {
                        if let Some((y, x)) = s.input_coord(oy, ox, ky, kx) {
                            let idx = (c * s.height + y) * s.width + x;
                            image[idx] = image[idx] + src[oy * s.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Convolution on raw buffers; output is `[N, O, OH, OW]`.
pub fn conv2d_raw<T: Real>(x: &[T], w: &[T], s: &ConvShape) -> Vec<T> {
    let (p, k) = (s.out_pixels(), s.patch_len());
    let mut out = vec![T::zero(); s.batch * s.out_image_len()];
    let mut cols = vec![T::zero(); k * p];
    for n in 0..s.batch {
        im2col(&x[n * s.in_image_len()..(n + 1) * s.in_image_len()], s, &mut cols);
        gemm(
            T::one(),
            w,
            MatView::row_major(s.out_channels, k),
            &cols,
            MatView::row_major(k, p),
            T::zero(),
            &mut out[n * s.out_image_len()..(n + 1) * s.out_image_len()],
            MatView::row_major(s.out_channels, p),
        );
    }
    out
}

/// Gradients of a convolution with respect to its input and kernel.
pub fn conv2d_backward_raw<T: Real>(
    x: &[T],
    w: &[T],
    dy: &[T],
    s: &ConvShape,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let (p, k) = (s.out_pixels(), s.patch_len());
    let mut dx = need_dx.then(|| vec![T::zero(); s.batch * s.in_image_len()]);
    let mut dw = need_dw.then(|| vec![T::zero(); s.out_channels * k]);
    let mut cols = vec![T::zero(); k * p];
    for n in 0..s.batch {
        let dy_n = &dy[n * s.out_image_len()..(n + 1) * s.out_image_len()];
        if let Some(dw) = dw.as_mut() {
            im2col(&x[n * s.in_image_len()..(n + 1) * s.in_image_len()], s, &mut cols);
            // dW += dY_n [O, P] @ cols^T [P, K]
            gemm(
                T::one(),
                dy_n,
                MatView::row_major(s.out_channels, p),
                &cols,
                MatView::transposed(k, p),
                T::one(),
                dw,
                MatView::row_major(s.out_channels, k),
            );
        }
        if let Some(dx) = dx.as_mut() {
            // dcols = W^T [K, O] @ dY_n [O, P]
            gemm(
                T::one(),
                w,
                MatView::transposed(s.out_channels, k),
                dy_n,
                MatView::row_major(s.out_channels, p),
                T::zero(),
                &mut cols,
                MatView::row_major(k, p),
            );
            col2im(&cols, s, &mut dx[n * s.in_image_len()..(n + 1) * s.in_image_len()]);
        }
    }
    (dx, dw)
}

/// NCHW input, OIHW kernel.
pub fn conv2d(x: &Tensor, w: &Tensor, geom: ConvGeometry) -> Result<Tensor> {
    let s = ConvShape::resolve(x.shape(), w.shape(), geom)?;
    let out = conv2d_raw(x.data(), w.data(), &s);
    Tensor::new(s.out_shape().to_vec(), out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for l in 0..k {
                    c[i * n + j] += a[i * k + l] * b[l * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn identity_matmul() {
        let eye = Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
        let v = Tensor::new(vec![3, 1], vec![1.5, -2.0, 7.25]).unwrap();
        assert_eq!(matmul(&eye, &v).unwrap(), v);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        // small integers keep every partial sum exact
        let a: Vec<f64> = (0..12).map(|i| ((i * 7) % 5) as f64 - 2.0).collect();
        let b: Vec<f64> = (0..8).map(|i| ((i * 3) % 7) as f64 - 3.0).collect();
        let got = matmul(
            &Tensor::new(vec![3, 4], a.clone()).unwrap(),
            &Tensor::new(vec![4, 2], b.clone()).unwrap(),
        )
        .unwrap();
        assert_eq!(got.data(), naive_matmul(&a, &b, 3, 4, 2).as_slice());
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        assert!(matches!(matmul(&a, &b), Err(Error::ShapeMismatch { .. })));
        assert!(matmul_t(&a, &b).is_ok());
    }

    #[test]
    fn unit_kernel_is_identity() {
        let x = Tensor::from_fn(&[2, 1, 4, 5], |i| i as f64 * 0.5 - 3.0);
        let w = Tensor::full(&[1, 1, 1, 1], 1.0);
        assert_eq!(conv2d(&x, &w, ConvGeometry::default()).unwrap(), x);
    }

    #[test]
    fn padded_conv_shape() {
        let s = ConvShape::resolve(&[1, 3, 28, 28], &[8, 3, 3, 3], ConvGeometry { stride: 1, padding: 1 }).unwrap();
        assert_eq!(s.out_shape(), [1, 8, 28, 28]);
        let s = ConvShape::resolve(&[1, 3, 28, 28], &[8, 3, 3, 3], ConvGeometry { stride: 2, padding: 0 }).unwrap();
        assert_eq!(s.out_shape(), [1, 8, 13, 13]);
        assert!(ConvShape::resolve(&[1, 2, 5, 5], &[1, 3, 3, 3], ConvGeometry::default()).is_err());
    }
}
