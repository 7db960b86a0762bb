//! Direct cross-correlation kernels (no kernel flip, zero padding).

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug)]
struct Geometry {
    n: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl Geometry {
    fn new(input: &[usize], weight: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let (&[n, c_in, h, w], &[c_out, wc, kh, kw]) = (input, weight) else {
            return Err(Error::Dimension(format!(
                "conv2d expects input [N,C,H,W] and weight [O,C,kH,kW], got {input:?} and {weight:?}"
            )));
        };
        if wc != c_in {
            return Err(Error::Dimension(format!(
                "conv2d: input has {c_in} channels but weight expects {wc}"
            )));
        }
        if stride == 0 {
            return Err(Error::Config("conv2d stride must be positive".into()));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::Config(format!(
                "conv2d kernel {kh}x{kw} must have odd extents"
            )));
        }
        let extent = |size: usize, k: usize| -> Result<usize> {
            let span = (size + 2 * pad)
                .checked_sub(k)
                .ok_or_else(|| Error::Config(format!("kernel {k} larger than padded extent {}", size + 2 * pad)))?;
            if span % stride != 0 {
                return Err(Error::Config(format!(
                    "conv2d output extent ({size} + 2*{pad} - {k})/{stride} + 1 is not integral"
                )));
            }
            Ok(span / stride + 1)
        };
        Ok(Self {
            n,
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            stride,
            pad,
            out_h: extent(h, kh)?,
            out_w: extent(w, kw)?,
        })
    }

    /// Output columns `ox` whose input column `ox*stride + k - pad` is in range.
    fn valid_range(&self, k: usize, size: usize, out: usize) -> (usize, usize) {
        let s = self.stride;
        // smallest o with o*s + k >= pad
        let lo = if k >= self.pad { 0 } else { (self.pad - k).div_ceil(s) };
        // largest o with o*s + k - pad <= size - 1
        let hi = if size + self.pad > k {
            ((size + self.pad - 1 - k) / s + 1).min(out)
        } else {
            0
        };
        (lo, hi.max(lo))
    }

    fn forward<T: Scalar>(&self, x: &[T], wt: &[T], bias: Option<&[T]>) -> Vec<T> {
        let g = *self;
        let (oplane, iplane) = (g.out_h * g.out_w, g.h * g.w);
        let mut out = vec![T::zero(); g.n * g.c_out * oplane];
        for b in 0..g.n {
            for co in 0..g.c_out {
                let dst = &mut out[(b * g.c_out + co) * oplane..][..oplane];
                if let Some(bias) = bias {
                    dst.fill(bias[co]);
                }
                for ci in 0..g.c_in {
                    let src = &x[(b * g.c_in + ci) * iplane..][..iplane];
                    for ky in 0..g.kh {
                        let (oy0, oy1) = g.valid_range(ky, g.h, g.out_h);
                        for kx in 0..g.kw {
                            let wv = wt[((co * g.c_in + ci) * g.kh + ky) * g.kw + kx];
                            let (ox0, ox1) = g.valid_range(kx, g.w, g.out_w);
                            for oy in oy0..oy1 {
                                let iy = oy * g.stride + ky - g.pad;
                                let row = &src[iy * g.w..][..g.w];
                                let orow = &mut dst[oy * g.out_w..][..g.out_w];
                                for ox in ox0..ox1 {
                                    orow[ox] += wv * row[ox * g.stride + kx - g.pad];
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    fn backward<T: Scalar>(&self, gout: &[T], x: &[T], wt: &[T]) -> (Vec<T>, Vec<T>, Vec<T>) {
        let g = *self;
        let (oplane, iplane) = (g.out_h * g.out_w, g.h * g.w);
        let mut gx = vec![T::zero(); x.len()];
        let mut gw = vec![T::zero(); wt.len()];
        let mut gb = vec![T::zero(); g.c_out];
        for b in 0..g.n {
            for co in 0..g.c_out {
                let go = &gout[(b * g.c_out + co) * oplane..][..oplane];
                gb[co] += go.iter().copied().sum::<T>();
                for ci in 0..g.c_in {
                    let base = (b * g.c_in + ci) * iplane;
                    for ky in 0..g.kh {
                        let (oy0, oy1) = g.valid_range(ky, g.h, g.out_h);
                        for kx in 0..g.kw {
                            let widx = ((co * g.c_in + ci) * g.kh + ky) * g.kw + kx;
                            let wv = wt[widx];
                            let (ox0, ox1) = g.valid_range(kx, g.w, g.out_w);
                            let mut acc = T::zero();
                            for oy in oy0..oy1 {
                                let iy = oy * g.stride + ky - g.pad;
                                let grow = &go[oy * g.out_w..][..g.out_w];
                                let xrow = &x[base + iy * g.w..][..g.w];
                                let gxrow = &mut gx[base + iy * g.w..][..g.w];
                                for ox in ox0..ox1 {
                                    let ix = ox * g.stride + kx - g.pad;
                                    acc += grow[ox] * xrow[ix];
                                    gxrow[ix] += grow[ox] * wv;
                                }
                            }
                            gw[widx] += acc;
                        }
                    }
                }
            }
        }
        (gx, gw, gb)
    }
}

impl<T: Scalar> Tape<T> {
    /// 2D cross-correlation of `input` [N,C,H,W] with `weight` [O,C,kH,kW].
    pub fn conv2d(
        &self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let x = self.value(input).contiguous();
        let wt = self.value(weight).contiguous();
        let geo = Geometry::new(x.shape(), wt.shape(), stride, padding)?;
        let bias_vals = match bias {
            Some(b) => {
                let bv = self.value(b).to_vec();
                if bv.len() != geo.c_out {
                    return Err(Error::Dimension(format!(
                        "conv2d bias has {} entries for {} output channels",
                        bv.len(),
                        geo.c_out
                    )));
                }
                Some(bv)
            }
            None => None,
        };
        let data = geo.forward(
            x.as_slice().expect("contiguous"),
            wt.as_slice().expect("contiguous"),
            bias_vals.as_deref(),
        );
        let out = Tensor::from_vec(&[geo.n, geo.c_out, geo.out_h, geo.out_w], data)?;
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        let has_bias = bias.is_some();
        Ok(self.record(out, &inputs, move |g, vals| {
            let (gx, gw, gb) = geo.backward(g, &vals[0].to_vec(), &vals[1].to_vec());
            let mut grads = vec![Some(gx), Some(gw)];
            if has_bias {
                grads.push(Some(gb));
            }
            grads
        }))
    }

    /// Length-preserving 1D cross-correlation of `input` [N,1,L] with
    /// `weight` [1,1,k]; `padding` must equal (k-1)/2.
    pub fn conv1d(&self, input: Var, weight: Var, padding: usize) -> Result<Var> {
        let x_shape = self.shape(input);
        let w_shape = self.shape(weight);
        let (&[n, 1, len], &[1, 1, k]) = (x_shape.as_slice(), w_shape.as_slice()) else {
            return Err(Error::Dimension(format!(
                "conv1d expects input [N,1,L] and weight [1,1,k], got {x_shape:?} and {w_shape:?}"
            )));
        };
        if k % 2 == 0 {
            return Err(Error::Config(format!("conv1d kernel size {k} must be odd")));
        }
        if padding != (k - 1) / 2 {
            return Err(Error::Config(format!(
                "conv1d padding {padding} does not preserve length for k = {k}"
            )));
        }
        let x4 = self.reshape(input, &[n, 1, 1, len])?;
        let w4 = self.reshape(weight, &[1, 1, 1, k])?;
        let tmp = self.conv1d_as_2d(x4, w4, padding)?;
        self.reshape(tmp, &[n, 1, len])
    }

    fn conv1d_as_2d(&self, x: Var, w: Var, padding: usize) -> Result<Var> {
        // Pad only along the length axis: a [1,k] kernel over a height-1 image
        // with zero vertical padding.
        let xv = self.value(x).contiguous();
        let wv = self.value(w).contiguous();
        let (n, len) = (xv.shape()[0], xv.shape()[3]);
        let k = wv.shape()[3];
        let xs = xv.to_vec();
        let ws = wv.to_vec();
        let mut out = vec![T::zero(); n * len];
        for b in 0..n {
            for i in 0..len {
                let mut acc = T::zero();
                for j in 0..k {
                    let src = i + j;
                    if src >= padding && src - padding < len {
                        acc += ws[j] * xs[b * len + src - padding];
                    }
                }
                out[b * len + i] = acc;
            }
        }
        let value = Tensor::from_vec(&[n, 1, 1, len], out)?;
        Ok(self.record(value, &[x, w], move |g, vals| {
            let xs = vals[0].to_vec();
            let ws = vals[1].to_vec();
            let mut gx = vec![T::zero(); xs.len()];
            let mut gw = vec![T::zero(); ws.len()];
            for b in 0..n {
                for i in 0..len {
                    let gv = g[b * len + i];
                    for j in 0..k {
                        let src = i + j;
                        if src >= padding && src - padding < len {
                            let xi = b * len + src - padding;
                            gx[xi] += gv * ws[j];
                            gw[j] += gv * xs[xi];
                        }
                    }
                }
            }
            vec![Some(gx), Some(gw)]
        }))
    }
}
