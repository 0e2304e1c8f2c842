//! 2D convolution as a custom op backed by im2col and `sgemm`.
//!
//! Candle's CPU convolution backward pass is dominated by the weight-gradient
//! kernel. This op computes forward, input-gradient and weight-gradient with
//! three GEMMs per batch element, which is several times faster on small
//! feature maps. Only `f32` NCHW tensors are supported.

use candle_core::{CpuStorage, CustomOp2, Layout, Shape, Tensor};

#[derive(Clone, Copy, Debug)]
struct Geometry {
    batch: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
}

impl Geometry {
    fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.k) / self.stride + 1
    }

    fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.k) / self.stride + 1
    }

    fn in_plane(&self) -> usize {
        self.c_in * self.h * self.w
    }

    fn out_pixels(&self) -> usize {
        self.out_h() * self.out_w()
    }

    fn patch_len(&self) -> usize {
        self.c_in * self.k * self.k
    }
}

fn contiguous_f32<'a>(s: &'a CpuStorage, l: &Layout) -> candle_core::Result<&'a [f32]> {
    let data = s.as_slice::<f32>()?;
    match l.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("conv2d: expected contiguous input"),
    }
}

/// Unfolds one image (C, H, W) into a (C·k·k, Ho·Wo) matrix.
fn im2col(x: &[f32], g: &Geometry, cols: &mut [f32]) {
    let (ho, wo) = (g.out_h(), g.out_w());
    let n = ho * wo;
    for c in 0..g.c_in {
        let src = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let drow = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= g.h as isize {
                        drow.fill(0.0);
                        continue;
                    }
                    let srow = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            srow[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds a column matrix back into an image.
fn col2im(cols: &[f32], g: &Geometry, x: &mut [f32]) {
    let (ho, wo) = (g.out_h(), g.out_w());
    let n = ho * wo;
    for c in 0..g.c_in {
        let dst = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * n..(row + 1) * n];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let drow = &mut dst[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            drow[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `c = a·b + beta·c` with row/column strides; `c` is row-major with row stride `rsc`.
#[allow(clippy::too_many_arguments)]
fn sgemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (isize, isize),
    b: &[f32],
    (rsb, csb): (isize, isize),
    beta: f32,
    c: &mut [f32],
    rsc: isize,
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: callers pass slices covering the full strided extents of every
    // operand; `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            rsc,
            1,
        );
    }
}

struct Conv2dGemm {
    stride: usize,
    pad: usize,
}

impl CustomOp2 for Conv2dGemm {
    fn name(&self) -> &'static str {
        "conv2d-gemm"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (batch, c_in, h, w) = l1.shape().dims4()?;
        let (c_out, c_in_w, k, k2) = l2.shape().dims4()?;
        if c_in != c_in_w || k != k2 {
            candle_core::bail!("conv2d: weight {:?} incompatible with input {:?}", l2.shape(), l1.shape());
        }
        let g = Geometry {
            batch,
            c_in,
            h,
            w,
            c_out,
            k,
            stride: self.stride,
            pad: self.pad,
        };
        let x = contiguous_f32(s1, l1)?;
        let weight = contiguous_f32(s2, l2)?;
        let (n, kk) = (g.out_pixels(), g.patch_len());
        let mut out = vec![0f32; batch * c_out * n];
        let mut cols = vec![0f32; kk * n];
        for b in 0..batch {
            im2col(&x[b * g.in_plane()..(b + 1) * g.in_plane()], &g, &mut cols);
            sgemm(
                c_out,
                kk,
                n,
                weight,
                (kk as isize, 1),
                &cols,
                (n as isize, 1),
                0.0,
                &mut out[b * c_out * n..(b + 1) * c_out * n],
                n as isize,
            );
        }
        Ok((CpuStorage::F32(out), Shape::from((batch, c_out, g.out_h(), g.out_w()))))
    }

    fn bwd(
        &self,
        x: &Tensor,
        weight: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let (batch, c_in, h, w) = x.dims4()?;
        let (c_out, _, k, _) = weight.dims4()?;
        let g = Geometry {
            batch,
            c_in,
            h,
            w,
            c_out,
            k,
            stride: self.stride,
            pad: self.pad,
        };
        let grad = grad.contiguous()?;
        let grad_x = grad.apply_op2_no_bwd(weight, &InputGrad(g))?;
        let grad_w = x.apply_op2_no_bwd(&grad, &WeightGrad(g))?;
        Ok((Some(grad_x), Some(grad_w)))
    }
}

struct InputGrad(Geometry);

impl CustomOp2 for InputGrad {
    fn name(&self) -> &'static str {
        "conv2d-gemm-input-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.0;
        let grad_out = contiguous_f32(s1, l1)?;
        let weight = contiguous_f32(s2, l2)?;
        let (n, kk) = (g.out_pixels(), g.patch_len());
        let mut grad_x = vec![0f32; g.batch * g.in_plane()];
        let mut cols = vec![0f32; kk * n];
        for b in 0..g.batch {
            sgemm(
                kk,
                g.c_out,
                n,
                weight,
                (1, kk as isize),
                &grad_out[b * g.c_out * n..(b + 1) * g.c_out * n],
                (n as isize, 1),
                0.0,
                &mut cols,
                n as isize,
            );
            col2im(&cols, &g, &mut grad_x[b * g.in_plane()..(b + 1) * g.in_plane()]);
        }
        Ok((CpuStorage::F32(grad_x), Shape::from((g.batch, g.c_in, g.h, g.w))))
    }
}

struct WeightGrad(Geometry);

impl CustomOp2 for WeightGrad {
    fn name(&self) -> &'static str {
        "conv2d-gemm-weight-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.0;
        let x = contiguous_f32(s1, l1)?;
        let grad_out = contiguous_f32(s2, l2)?;
        let (n, kk) = (g.out_pixels(), g.patch_len());
        let mut grad_w = vec![0f32; g.c_out * kk];
        let mut cols = vec![0f32; kk * n];
        for b in 0..g.batch {
            im2col(&x[b * g.in_plane()..(b + 1) * g.in_plane()], &g, &mut cols);
            sgemm(
                g.c_out,
                n,
                kk,
                &grad_out[b * g.c_out * n..(b + 1) * g.c_out * n],
                (n as isize, 1),
                &cols,
                (1, n as isize),
                1.0,
                &mut grad_w,
                kk as isize,
            );
        }
        Ok((CpuStorage::F32(grad_w), Shape::from((g.c_out, g.c_in, g.k, g.k))))
    }
}

/// Square-kernel 2D convolution of `x` (N, C, H, W) with `weight` (O, C, k, k).
pub fn conv2d(x: &Tensor, weight: &Tensor, stride: usize, pad: usize) -> candle_core::Result<Tensor> {
    let x = x.contiguous()?;
    let weight = weight.contiguous()?;
    x.apply_op2(&weight, Conv2dGemm { stride, pad })
}
