use super::{inverse_permutation, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Batch normalization mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    /// Normalize by batch statistics and update running statistics.
    Train,
    /// Normalize by running statistics.
    Eval,
}

/// Per-channel running mean/variance of a batchnorm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> BatchNormStats<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }
}

fn same_shape(op: &str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::Dimension(format!("{op}: shapes {a:?} and {b:?} differ")));
    }
    Ok(())
}

fn nchw(op: &str, shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(Error::Dimension(format!(
            "{op} expects an [N, C, H, W] tensor, got {shape:?}"
        ))),
    }
}

/// Gradient buffer of `g` pushed back through a permutation `axes`.
fn unpermute_grad<T: Scalar>(g: &[T], out_shape: &[usize], axes: &[usize]) -> Vec<T> {
    let grad = Tensor::from_vec(out_shape, g.to_vec()).expect("grad matches output");
    grad.permute(&inverse_permutation(axes))
        .expect("valid inverse")
        .to_vec()
}

impl<T: Scalar> Tape<T> {
    fn unary(&self, x: Var, f: impl Fn(T) -> T, df: impl Fn(T, T) -> T + 'static) -> Var {
        let input = self.value(x);
        let out = input.map(&f);
        let out_vals = out.to_vec();
        self.record(out, &[x], move |g, inputs| {
            let xs = inputs[0].to_vec();
            let gx = g
                .iter()
                .zip(xs.iter().zip(&out_vals))
                .map(|(&g, (&x, &y))| g * df(x, y))
                .collect();
            vec![Some(gx)]
        })
    }

    /// Elementwise max(x, 0); subgradient at 0 is 0.
    pub fn relu(&self, x: Var) -> Var {
        self.unary(
            x,
            |v| if v > T::zero() { v } else { T::zero() },
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        self.unary(
            x,
            |v| T::one() / (T::one() + (-v).exp()),
            |_, y| y * (T::one() - y),
        )
    }

    /// Elementwise |x|; subgradient at 0 is 0.
    pub fn abs(&self, x: Var) -> Var {
        self.unary(
            x,
            |v| v.abs(),
            |x, _| {
                if x > T::zero() {
                    T::one()
                } else if x < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                }
            },
        )
    }

    pub fn log10(&self, x: Var) -> Var {
        let ln10 = T::of(std::f64::consts::LN_10);
        self.unary(x, |v| v.log10(), move |x, _| T::one() / (x * ln10))
    }

    pub fn scale(&self, x: Var, s: f64) -> Var {
        let s = T::of(s);
        self.unary(x, move |v| v * s, move |_, _| s)
    }

    pub fn add_scalar(&self, x: Var, s: f64) -> Var {
        let s = T::of(s);
        self.unary(x, move |v| v + s, |_, _| T::one())
    }

    fn binary(
        &self,
        op: &str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        grads: impl Fn(T, T, T) -> (T, T) + 'static,
    ) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape(op, va.shape(), vb.shape())?;
        let data = va
            .to_vec()
            .into_iter()
            .zip(vb.to_vec())
            .map(|(x, y)| f(x, y))
            .collect();
        let out = Tensor::from_vec(va.shape(), data)?;
        Ok(self.record(out, &[a, b], move |g, inputs| {
            let (xa, xb) = (inputs[0].to_vec(), inputs[1].to_vec());
            let mut ga = Vec::with_capacity(g.len());
            let mut gb = Vec::with_capacity(g.len());
            for ((&g, &x), &y) in g.iter().zip(&xa).zip(&xb) {
                let (da, db) = grads(g, x, y);
                ga.push(da);
                gb.push(db);
            }
            vec![Some(ga), Some(gb)]
        }))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, |g, _, _| (g, g))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, |g, _, _| (g, -g))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, |g, x, y| (g * y, g * x))
    }

    /// Sum of all elements as a 0-dimensional tensor.
    pub fn sum(&self, x: Var) -> Var {
        let input = self.value(x);
        let n = input.numel();
        let total = input.to_vec().into_iter().sum();
        self.record(Tensor::scalar(total), &[x], move |g, _| vec![Some(vec![g[0]; n])])
    }

    pub fn permute(&self, x: Var, axes: &[usize]) -> Result<Var> {
        let input = self.value(x);
        let out = input.permute(axes)?;
        let out_shape = out.shape().to_vec();
        let axes = axes.to_vec();
        Ok(self.record(out, &[x], move |g, _| {
            vec![Some(unpermute_grad(g, &out_shape, &axes))]
        }))
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        Ok(self.record(out, &[x], |g, _| vec![Some(g.to_vec())]))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&self, xs: &[Var], axis: usize) -> Result<Var> {
        let values: Vec<Tensor<T>> = xs.iter().map(|&v| self.value(v)).collect();
        let first = values
            .first()
            .ok_or_else(|| Error::Dimension("concat of zero tensors".into()))?;
        let rank = first.rank();
        if axis >= rank {
            return Err(Error::Dimension(format!(
                "concat axis {axis} out of range for rank {rank}"
            )));
        }
        for v in &values[1..] {
            let agrees = v.rank() == rank
                && (0..rank).all(|d| d == axis || v.shape()[d] == first.shape()[d]);
            if !agrees {
                return Err(Error::Dimension(format!(
                    "concat along axis {axis}: {:?} incompatible with {:?}",
                    v.shape(),
                    first.shape()
                )));
            }
        }
        let outer: usize = first.shape()[..axis].iter().product();
        let inner: usize = first.shape()[axis + 1..].iter().product();
        let widths: Vec<usize> = values.iter().map(|v| v.shape()[axis] * inner).collect();
        let total: usize = widths.iter().sum();
        let parts: Vec<Vec<T>> = values.iter().map(Tensor::to_vec).collect();

        let mut data = Vec::with_capacity(outer * total);
        for o in 0..outer {
            for (part, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&part[o * w..(o + 1) * w]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = values.iter().map(|v| v.shape()[axis]).sum();
        let out = Tensor::from_vec(&shape, data)?;

        Ok(self.record(out, xs, move |g, _| {
            let mut grads: Vec<Vec<T>> = widths
                .iter()
                .map(|&w| Vec::with_capacity(outer * w))
                .collect();
            for o in 0..outer {
                let mut start = o * total;
                for (grad, &w) in grads.iter_mut().zip(&widths) {
                    grad.extend_from_slice(&g[start..start + w]);
                    start += w;
                }
            }
            grads.into_iter().map(Some).collect()
        }))
    }

    /// `len` entries along `axis` starting at `start`.
    pub fn slice(&self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let input = self.value(x);
        let out = input.narrow(axis, start, len)?.contiguous();
        let shape = input.shape().to_vec();
        Ok(self.record(out, &[x], move |g, _| {
            let outer: usize = shape[..axis].iter().product();
            let inner: usize = shape[axis + 1..].iter().product();
            let mut gx = vec![T::zero(); shape.iter().product()];
            for o in 0..outer {
                let dst = (o * shape[axis] + start) * inner;
                let src = o * len * inner;
                gx[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
            }
            vec![Some(gx)]
        }))
    }

    /// Per-channel spatial mean: [N, C, H, W] → [N, C, 1, 1].
    pub fn global_avg_pool(&self, x: Var) -> Result<Var> {
        let input = self.value(x).contiguous();
        let (n, c, h, w) = nchw("global_avg_pool", input.shape())?;
        let plane = h * w;
        let denom = T::of(plane as f64);
        let data: Vec<T> = input
            .as_slice()
            .expect("contiguous")
            .chunks_exact(plane)
            .map(|p| p.iter().copied().sum::<T>() / denom)
            .collect();
        let out = Tensor::from_vec(&[n, c, 1, 1], data)?;
        Ok(self.record(out, &[x], move |g, _| {
            let gx = g
                .iter()
                .flat_map(|&gv| std::iter::repeat_n(gv / denom, plane))
                .collect();
            vec![Some(gx)]
        }))
    }

    /// Keeps every `factor`-th row and column of `x` [N, C, H, W], starting
    /// at 0. `H` and `W` must be multiples of `factor`.
    pub fn subsample2d(&self, x: Var, factor: usize) -> Result<Var> {
        let input = self.value(x).contiguous();
        let (n, c, h, w) = nchw("subsample2d", input.shape())?;
        if factor == 0 || h % factor != 0 || w % factor != 0 {
            return Err(Error::Config(format!(
                "subsample2d: {h}x{w} is not divisible by {factor}"
            )));
        }
        let (oh, ow) = (h / factor, w / factor);
        let src = input.as_slice().expect("contiguous");
        let mut data = Vec::with_capacity(n * c * oh * ow);
        for plane in src.chunks_exact(h * w) {
            for y in 0..oh {
                for xx in 0..ow {
                    data.push(plane[y * factor * w + xx * factor]);
                }
            }
        }
        let out = Tensor::from_vec(&[n, c, oh, ow], data)?;
        Ok(self.record(out, &[x], move |g, _| {
            let mut gx = vec![T::zero(); n * c * h * w];
            for (p, gp) in g.chunks_exact(oh * ow).enumerate() {
                for y in 0..oh {
                    for xx in 0..ow {
                        gx[p * h * w + y * factor * w + xx * factor] = gp[y * ow + xx];
                    }
                }
            }
            vec![Some(gx)]
        }))
    }

    /// Multiplies each channel plane of `x` [N, C, H, W] by `gate` [N, C, 1, 1].
    pub fn channel_scale(&self, x: Var, gate: Var) -> Result<Var> {
        let input = self.value(x).contiguous();
        let gv = self.value(gate).contiguous();
        let (n, c, h, w) = nchw("channel_scale", input.shape())?;
        if gv.shape() != [n, c, 1, 1] {
            return Err(Error::Dimension(format!(
                "channel_scale gate {:?} does not match [{n}, {c}, 1, 1]",
                gv.shape()
            )));
        }
        let plane = h * w;
        let gates = gv.to_vec();
        let data: Vec<T> = input
            .as_slice()
            .expect("contiguous")
            .chunks_exact(plane)
            .zip(&gates)
            .flat_map(|(p, &s)| p.iter().map(move |&v| v * s))
            .collect();
        let out = Tensor::from_vec(input.shape(), data)?;
        Ok(self.record(out, &[x, gate], move |g, inputs| {
            let xs = inputs[0].to_vec();
            let gates = inputs[1].to_vec();
            let mut gx = Vec::with_capacity(g.len());
            let mut gg = Vec::with_capacity(gates.len());
            for ((gp, xp), &s) in g.chunks_exact(plane).zip(xs.chunks_exact(plane)).zip(&gates) {
                gx.extend(gp.iter().map(|&v| v * s));
                gg.push(gp.iter().zip(xp).map(|(&a, &b)| a * b).sum());
            }
            vec![Some(gx), Some(gg)]
        }))
    }

    /// Bilinear interpolation with corner-aligned sampling: output corners
    /// sample input corners exactly.
    pub fn bilinear_resize(&self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        if out_h == 0 || out_w == 0 {
            return Err(Error::Config(format!(
                "resize target {out_h}x{out_w} must have positive extents"
            )));
        }
        let input = self.value(x).contiguous();
        let (n, c, h, w) = nchw("bilinear_resize", input.shape())?;
        if (out_h, out_w) == (h, w) {
            return Ok(self.record(input, &[x], |g, _| vec![Some(g.to_vec())]));
        }
        let rows = resize_taps::<T>(h, out_h);
        let cols = resize_taps::<T>(w, out_w);
        let src = input.as_slice().expect("contiguous");
        let mut data = Vec::with_capacity(n * c * out_h * out_w);
        for plane in src.chunks_exact(h * w) {
            for &(y0, y1, wy) in &rows {
                for &(x0, x1, wx) in &cols {
                    let top = plane[y0 * w + x0] * (T::one() - wx) + plane[y0 * w + x1] * wx;
                    let bot = plane[y1 * w + x0] * (T::one() - wx) + plane[y1 * w + x1] * wx;
                    data.push(top * (T::one() - wy) + bot * wy);
                }
            }
        }
        let out = Tensor::from_vec(&[n, c, out_h, out_w], data)?;
        Ok(self.record(out, &[x], move |g, _| {
            let mut gx = vec![T::zero(); n * c * h * w];
            for (gp, dst) in g.chunks_exact(out_h * out_w).zip(gx.chunks_exact_mut(h * w)) {
                for (oy, &(y0, y1, wy)) in rows.iter().enumerate() {
                    for (ox, &(x0, x1, wx)) in cols.iter().enumerate() {
                        let v = gp[oy * out_w + ox];
                        let (top, bot) = (v * (T::one() - wy), v * wy);
                        dst[y0 * w + x0] += top * (T::one() - wx);
                        dst[y0 * w + x1] += top * wx;
                        dst[y1 * w + x0] += bot * (T::one() - wx);
                        dst[y1 * w + x1] += bot * wx;
                    }
                }
            }
            vec![Some(gx)]
        }))
    }

    /// 2D batch normalization over an [N, C, H, W] tensor.
    ///
    /// In train mode `stats` is updated by an exponential moving average
    /// (`momentum` weights the new batch; the variance stored is unbiased).
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm2d(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut BatchNormStats<T>,
        mode: NormMode,
        momentum: f64,
        epsilon: f64,
    ) -> Result<Var> {
        if !(epsilon > 0.0) {
            return Err(Error::Config(format!("batchnorm epsilon must be > 0, got {epsilon}")));
        }
        let input = self.value(x).contiguous();
        let (n, c, h, w) = nchw("batchnorm2d", input.shape())?;
        let (gv, bv) = (self.value(gamma).to_vec(), self.value(beta).to_vec());
        if gv.len() != c || bv.len() != c || stats.mean.len() != c || stats.var.len() != c {
            return Err(Error::Dimension(format!(
                "batchnorm2d: input has {c} channels but gamma/beta/stats have {}/{}/{}",
                gv.len(),
                bv.len(),
                stats.mean.len()
            )));
        }
        let src = input.as_slice().expect("contiguous");
        let plane = h * w;
        let count = n * plane;
        let eps = T::of(epsilon);

        let (mean, var) = match mode {
            NormMode::Train => {
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ch in 0..c {
                    let channel = || (0..n).flat_map(move |b| &src[(b * c + ch) * plane..][..plane]);
                    let m = channel().copied().sum::<T>() / T::of(count as f64);
                    let v = channel().map(|&v| (v - m) * (v - m)).sum::<T>() / T::of(count as f64);
                    mean[ch] = m;
                    var[ch] = v;
                }
                let mom = T::of(momentum);
                let bessel = if count > 1 {
                    T::of(count as f64 / (count - 1) as f64)
                } else {
                    T::one()
                };
                for ch in 0..c {
                    stats.mean[ch] = (T::one() - mom) * stats.mean[ch] + mom * mean[ch];
                    stats.var[ch] = (T::one() - mom) * stats.var[ch] + mom * var[ch] * bessel;
                }
                (mean, var)
            }
            NormMode::Eval => (stats.mean.clone(), stats.var.clone()),
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();

        let mut xhat = Vec::with_capacity(src.len());
        let mut data = Vec::with_capacity(src.len());
        for (i, p) in src.chunks_exact(plane).enumerate() {
            let ch = i % c;
            for &v in p {
                let xh = (v - mean[ch]) * inv_std[ch];
                xhat.push(xh);
                data.push(gv[ch] * xh + bv[ch]);
            }
        }
        let out = Tensor::from_vec(input.shape(), data)?;

        Ok(self.record(out, &[x, gamma, beta], move |g, inputs| {
            let gamma = inputs[1].to_vec();
            let mut dgamma = vec![T::zero(); c];
            let mut dbeta = vec![T::zero(); c];
            for (i, (gp, xp)) in g.chunks_exact(plane).zip(xhat.chunks_exact(plane)).enumerate() {
                let ch = i % c;
                for (&gv, &xh) in gp.iter().zip(xp) {
                    dgamma[ch] += gv * xh;
                    dbeta[ch] += gv;
                }
            }
            let mut dx = vec![T::zero(); g.len()];
            let m = T::of(count as f64);
            for (i, ((gp, xp), dp)) in g
                .chunks_exact(plane)
                .zip(xhat.chunks_exact(plane))
                .zip(dx.chunks_exact_mut(plane))
                .enumerate()
            {
                let ch = i % c;
                for ((&gv, &xh), d) in gp.iter().zip(xp).zip(dp.iter_mut()) {
                    *d = match mode {
                        NormMode::Train => {
                            gamma[ch] * inv_std[ch] * (gv - dbeta[ch] / m - xh * dgamma[ch] / m)
                        }
                        NormMode::Eval => gamma[ch] * inv_std[ch] * gv,
                    };
                }
            }
            vec![Some(dx), Some(dgamma), Some(dbeta)]
        }))
    }
}

/// For each output coordinate: (lower tap, upper tap, upper weight).
fn resize_taps<T: Scalar>(input: usize, output: usize) -> Vec<(usize, usize, T)> {
    (0..output)
        .map(|o| {
            let pos = if output > 1 {
                (o * (input - 1)) as f64 / (output - 1) as f64
            } else {
                0.0
            };
            let lo = (pos.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            (lo, hi, T::of(pos - lo as f64))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn elementwise_examples() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(t(&[3], &[-1.0, 0.0, 2.0]));
        assert_eq!(tape.value(tape.relu(x)).to_vec(), vec![0.0, 0.0, 2.0]);
        let z = tape.constant(Tensor::scalar(0.0));
        assert_eq!(tape.value(tape.sigmoid(z)).item(), 0.5);
        let zeros = tape.constant(Tensor::zeros(&[3]));
        assert!(tape.value(tape.add(x, zeros).unwrap()).values_eq(&tape.value(x)));
        let other = tape.constant(Tensor::zeros(&[4]));
        assert!(matches!(tape.add(x, other), Err(Error::Dimension(_))));
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let tape = Tape::<f64>::new();
        let x = tape.param(t(&[3], &[-1.0, 0.0, 2.0]));
        let loss = tape.sum(tape.relu(x));
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().to_vec(), vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn concat_examples() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(t(&[2], &[1.0, 2.0]));
        let b = tape.constant(t(&[1], &[3.0]));
        assert_eq!(tape.value(tape.concat(&[a], 0).unwrap()).to_vec(), vec![1.0, 2.0]);
        assert_eq!(
            tape.value(tape.concat(&[a, b], 0).unwrap()).to_vec(),
            vec![1.0, 2.0, 3.0]
        );
        let m = tape.constant(Tensor::zeros(&[2, 2]));
        assert!(matches!(tape.concat(&[a, m], 0), Err(Error::Dimension(_))));
    }

    #[test]
    fn global_avg_pool_examples() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        assert_eq!(tape.value(tape.global_avg_pool(x).unwrap()).to_vec(), vec![2.5]);
        let c = tape.constant(Tensor::full(&[2, 3, 4, 5], 0.7));
        let pooled = tape.value(tape.global_avg_pool(c).unwrap());
        assert_eq!(pooled.shape(), &[2, 3, 1, 1]);
        assert!(pooled.to_vec().iter().all(|&v| (v - 0.7).abs() < 1e-15));
    }

    #[test]
    fn resize_examples() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(t(&[1, 1, 2, 2], &[0.0, 1.0, 2.0, 3.0]));
        let up = tape.value(tape.bilinear_resize(x, 3, 3).unwrap());
        assert_eq!(up.at(&[0, 0, 1, 1]), 1.5);
        assert_eq!(up.at(&[0, 0, 2, 2]), 3.0);
        let same = tape.value(tape.bilinear_resize(x, 2, 2).unwrap());
        assert!(same.values_eq(&tape.value(x)));
        assert!(tape.bilinear_resize(x, 0, 2).is_err());
    }

    #[test]
    fn batchnorm_constant_input_gives_zeros() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full(&[2, 3, 4, 4], 5.0));
        let g = tape.param(Tensor::ones(&[3]));
        let b = tape.param(Tensor::zeros(&[3]));
        let mut stats = BatchNormStats::new(3);
        let y = tape
            .batchnorm2d(x, g, b, &mut stats, NormMode::Train, 0.1, 1e-5)
            .unwrap();
        assert!(tape.value(y).to_vec().iter().all(|&v| v == 0.0));
        assert!((stats.mean[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn batchnorm_channel_mismatch() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[1, 3, 2, 2]));
        let g = tape.param(Tensor::ones(&[2]));
        let b = tape.param(Tensor::zeros(&[2]));
        let mut stats = BatchNormStats::new(3);
        let r = tape.batchnorm2d(x, g, b, &mut stats, NormMode::Train, 0.1, 1e-5);
        assert!(matches!(r, Err(Error::Dimension(_))));
    }

    #[test]
    fn channel_scale_by_half() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(t(&[1, 2, 1, 2], &[2.0, 4.0, 6.0, 8.0]));
        let g = tape.constant(t(&[1, 2, 1, 1], &[0.5, 0.25]));
        let y = tape.value(tape.channel_scale(x, g).unwrap());
        assert_eq!(y.to_vec(), vec![1.0, 2.0, 1.5, 2.0]);
    }
}
