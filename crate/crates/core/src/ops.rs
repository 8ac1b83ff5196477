//! Neural network building blocks with forward and backward rules.
//!
//! Convolutions use the cross-correlation convention (no kernel flip) with
//! zero padding. Spatial reductions accumulate in double precision in a fixed
//! order, which keeps results bitwise reproducible across runs.

use crate::error::{Error, Result};
use crate::tensor::{Backward, Element, Graph, Shape, Tensor, Var};

// ── Convolution ─────────────────────────────────────────────────────────────

fn conv_out_dim(in_dim: usize, k: usize, stride: usize, padding: usize) -> Result<usize> {
    let padded = in_dim + 2 * padding;
    if padded < k {
        return Err(Error::Dimension(format!(
            "kernel {k} larger than padded input extent {padded}"
        )));
    }
    if (padded - k) % stride != 0 {
        return Err(Error::Dimension(format!(
            "non-integer output size: ({in_dim} + 2*{padding} - {k}) not divisible by stride {stride}"
        )));
    }
    Ok((padded - k) / stride + 1)
}

/// Valid output-x range `[lo, hi)` such that `ox*stride + kx - padding`
/// stays inside `[0, in_w)`.
#[inline]
fn ox_range(out_w: usize, in_w: usize, kx: usize, stride: usize, padding: usize) -> (usize, usize) {
    let lo = if kx >= padding {
        0
    } else {
        (padding - kx).div_ceil(stride)
    };
    let hi = if in_w + padding > kx {
        ((in_w - 1 + padding - kx) / stride + 1).min(out_w)
    } else {
        0
    };
    (lo, hi.max(lo))
}

fn check_conv_args<T: Element>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    groups: usize,
) -> Result<()> {
    let (xs, ws) = (x.shape(), weight.shape());
    if stride == 0 {
        return Err(Error::Dimension("stride must be positive".into()));
    }
    if ws.h != ws.w || ws.h % 2 == 0 {
        return Err(Error::Dimension(format!(
            "kernel must be square with odd extent, got {}x{}",
            ws.h, ws.w
        )));
    }
    if xs.c % groups != 0 || ws.n % groups != 0 {
        return Err(Error::Dimension(format!(
            "groups {groups} must divide input channels {} and output channels {}",
            xs.c, ws.n
        )));
    }
    if ws.c != xs.c / groups {
        return Err(Error::Dimension(format!(
            "channel mismatch: weight expects {} input channels per group, input has {} ({} groups)",
            ws.c,
            xs.c / groups,
            groups
        )));
    }
    if let Some(b) = bias {
        let bs = b.shape();
        if !(bs.n == 1 && bs.c == ws.n && bs.h == 1 && bs.w == 1) {
            return Err(Error::Dimension(format!(
                "bias must be (1, {}, 1, 1), got {bs}",
                ws.n
            )));
        }
    }
    Ok(())
}

fn conv_forward<T: Element>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
    groups: usize,
) -> Result<Tensor<T>> {
    check_conv_args(x, weight, bias, stride, groups)?;
    let (xs, ws) = (x.shape(), weight.shape());
    let k = ws.h;
    let out_h = conv_out_dim(xs.h, k, stride, padding)?;
    let out_w = conv_out_dim(xs.w, k, stride, padding)?;
    let (co, ci_g) = (ws.n, ws.c);
    let co_g = co / groups;
    let out_shape = Shape::new(xs.n, co, out_h, out_w);

    let mut out = vec![T::zero(); out_shape.len()];
    let xd = x.data();
    let wd = weight.data();

    for n in 0..xs.n {
        for oc in 0..co {
            let plane = &mut out[(n * co + oc) * out_h * out_w..][..out_h * out_w];
            if let Some(b) = bias {
                let bv = b.data()[oc];
                plane.iter_mut().for_each(|v| *v = bv);
            }
            let group = oc / co_g;
            for cg in 0..ci_g {
                let ic = group * ci_g + cg;
                let x_plane = &xd[(n * xs.c + ic) * xs.h * xs.w..][..xs.h * xs.w];
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = wd[((oc * ci_g + cg) * k + ky) * k + kx];
                        let (lo, hi) = ox_range(out_w, xs.w, kx, stride, padding);
                        for oy in 0..out_h {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            if iy < 0 || iy >= xs.h as isize {
                                continue;
                            }
                            let x_row = &x_plane[iy as usize * xs.w..][..xs.w];
                            let out_row = &mut plane[oy * out_w..][..out_w];
                            if stride == 1 {
                                let off = kx as isize - padding as isize;
                                let src = &x_row[(lo as isize + off) as usize..];
                                for (o, v) in out_row[lo..hi].iter_mut().zip(src) {
                                    *o += wv * *v;
                                }
                            } else {
                                for ox in lo..hi {
                                    let ix = ox * stride + kx - padding;
                                    out_row[ox] += wv * x_row[ix];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(out_shape, out)
}

struct ConvBackward {
    stride: usize,
    padding: usize,
    groups: usize,
}

impl ConvBackward {
    fn input_grad<T: Element>(&self, gout: &[T], os: Shape, x: &Tensor<T>, w: &Tensor<T>) -> Vec<T> {
        let (xs, ws) = (x.shape(), w.shape());
        let k = ws.h;
        let (co, ci_g) = (ws.n, ws.c);
        let co_g = co / self.groups;
        let wd = w.data();
        let mut dx = vec![T::zero(); xs.len()];
        for n in 0..xs.n {
            for oc in 0..co {
                let g_plane = &gout[(n * co + oc) * os.h * os.w..][..os.h * os.w];
                let group = oc / co_g;
                for cg in 0..ci_g {
                    let ic = group * ci_g + cg;
                    let dx_plane = &mut dx[(n * xs.c + ic) * xs.h * xs.w..][..xs.h * xs.w];
                    for ky in 0..k {
                        for kx in 0..k {
                            let wv = wd[((oc * ci_g + cg) * k + ky) * k + kx];
                            let (lo, hi) = ox_range(os.w, xs.w, kx, self.stride, self.padding);
                            for oy in 0..os.h {
                                let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                                if iy < 0 || iy >= xs.h as isize {
                                    continue;
                                }
                                let dx_row = &mut dx_plane[iy as usize * xs.w..][..xs.w];
                                let g_row = &g_plane[oy * os.w..][..os.w];
                                if self.stride == 1 {
                                    let off = kx as isize - self.padding as isize;
                                    let dst = &mut dx_row[(lo as isize + off) as usize..];
                                    for (d, g) in dst.iter_mut().zip(&g_row[lo..hi]) {
                                        *d += wv * *g;
                                    }
                                } else {
                                    for ox in lo..hi {
                                        let ix = ox * self.stride + kx - self.padding;
                                        dx_row[ix] += wv * g_row[ox];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    fn weight_grad<T: Element>(&self, gout: &[T], os: Shape, x: &Tensor<T>, w: &Tensor<T>) -> Vec<T> {
        let (xs, ws) = (x.shape(), w.shape());
        let k = ws.h;
        let (co, ci_g) = (ws.n, ws.c);
        let co_g = co / self.groups;
        let xd = x.data();
        let mut dw = vec![T::zero(); ws.len()];
        for n in 0..xs.n {
            for oc in 0..co {
                let g_plane = &gout[(n * co + oc) * os.h * os.w..][..os.h * os.w];
                let group = oc / co_g;
                for cg in 0..ci_g {
                    let ic = group * ci_g + cg;
                    let x_plane = &xd[(n * xs.c + ic) * xs.h * xs.w..][..xs.h * xs.w];
                    for ky in 0..k {
                        for kx in 0..k {
                            let (lo, hi) = ox_range(os.w, xs.w, kx, self.stride, self.padding);
                            let mut acc = T::zero();
                            for oy in 0..os.h {
                                let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                                if iy < 0 || iy >= xs.h as isize {
                                    continue;
                                }
                                let x_row = &x_plane[iy as usize * xs.w..][..xs.w];
                                let g_row = &g_plane[oy * os.w..][..os.w];
                                if self.stride == 1 {
                                    let off = kx as isize - self.padding as isize;
                                    let src = &x_row[(lo as isize + off) as usize..];
                                    for (g, v) in g_row[lo..hi].iter().zip(src) {
                                        acc += *g * *v;
                                    }
                                } else {
                                    for ox in lo..hi {
                                        let ix = ox * self.stride + kx - self.padding;
                                        acc += g_row[ox] * x_row[ix];
                                    }
                                }
                            }
                            dw[((oc * ci_g + cg) * k + ky) * k + kx] += acc;
                        }
                    }
                }
            }
        }
        dw
    }
}

impl<T: Element> Backward<T> for ConvBackward {
    fn apply(
        &self,
        out_grad: &[T],
        out: &Tensor<T>,
        parents: &[&Tensor<T>],
        needs: &[bool],
    ) -> Vec<Option<Vec<T>>> {
        let os = out.shape();
        let (x, w) = (parents[0], parents[1]);
        let mut grads = vec![
            needs[0].then(|| self.input_grad(out_grad, os, x, w)),
            needs[1].then(|| self.weight_grad(out_grad, os, x, w)),
        ];
        if parents.len() == 3 {
            grads.push(needs[2].then(|| {
                let mut db = vec![T::zero(); os.c];
                for n in 0..os.n {
                    for oc in 0..os.c {
                        let plane = &out_grad[(n * os.c + oc) * os.h * os.w..][..os.h * os.w];
                        let mut acc = T::zero();
                        for g in plane {
                            acc += *g;
                        }
                        db[oc] += acc;
                    }
                }
                db
            }));
        }
        grads
    }
}

fn record_conv<T: Element>(
    g: &mut Graph<T>,
    x: Var,
    weight: Var,
    bias: Option<Var>,
    stride: usize,
    padding: usize,
    groups: usize,
) -> Result<Var> {
    let mut parents = vec![x, weight];
    if let Some(b) = bias {
        parents.push(b);
    }
    g.check_parents(&parents)?;
    let out = {
        let xv = g.value(x);
        let wv = g.value(weight);
        let bv = bias.map(|b| g.value(b));
        conv_forward(xv, wv, bv, stride, padding, groups)?
    };
    Ok(g.record(
        "conv2d",
        out,
        parents,
        Box::new(ConvBackward {
            stride,
            padding,
            groups,
        }),
    ))
}

/// 2D cross-correlation of (n,ci,h,w) with (co,ci,k,k) weights.
pub fn conv2d<T: Element>(
    g: &mut Graph<T>,
    x: Var,
    weight: Var,
    bias: Option<Var>,
    stride: usize,
    padding: usize,
) -> Result<Var> {
    record_conv(g, x, weight, bias, stride, padding, 1)
}

/// Depthwise convolution: channel g of the output depends only on channel g
/// of the input. Weights are (c,1,k,k).
pub fn depthwise_conv2d<T: Element>(
    g: &mut Graph<T>,
    x: Var,
    weight: Var,
    bias: Option<Var>,
    stride: usize,
    padding: usize,
) -> Result<Var> {
    g.check_parents(&[x, weight])?;
    let groups = {
        let (xs, ws) = (g.value(x).shape(), g.value(weight).shape());
        if ws.n != xs.c || ws.c != 1 {
            return Err(Error::Dimension(format!(
                "depthwise weight must be ({}, 1, k, k), got {ws}",
                xs.c
            )));
        }
        xs.c
    };
    record_conv(g, x, weight, bias, stride, padding, groups)
}

// ── Activations ─────────────────────────────────────────────────────────────

struct LeakyReluBackward {
    slope: f64,
}

impl<T: Element> Backward<T> for LeakyReluBackward {
    fn apply(
        &self,
        out_grad: &[T],
        _out: &Tensor<T>,
        parents: &[&Tensor<T>],
        needs: &[bool],
    ) -> Vec<Option<Vec<T>>> {
        if !needs[0] {
            return vec![None];
        }
        let slope = T::from_f64(self.slope);
        let grad = out_grad
            .iter()
            .zip(parents[0].data())
            .map(|(g, x)| if *x >= T::zero() { *g } else { *g * slope })
            .collect();
        vec![Some(grad)]
    }
}

/// y = x for x >= 0, slope*x otherwise. The subgradient at 0 is 1.
pub fn leaky_relu<T: Element>(g: &mut Graph<T>, x: Var, slope: f64) -> Result<Var> {
    if !(slope > 0.0 && slope < 1.0) {
        return Err(Error::Contract(format!(
            "leaky_relu slope must be in (0,1), got {slope}"
        )));
    }
    g.check_parents(&[x])?;
    let s = T::from_f64(slope);
    let xv = g.value(x);
    let out = Tensor::from_fn(xv.shape(), |i| {
        let v = xv.data()[i];
        if v >= T::zero() {
            v
        } else {
            v * s
        }
    });
    Ok(g.record(
        "leaky_relu",
        out,
        vec![x],
        Box::new(LeakyReluBackward { slope }),
    ))
}

struct SigmoidBackward;

impl<T: Element> Backward<T> for SigmoidBackward {
    fn apply(
        &self,
        out_grad: &[T],
        out: &Tensor<T>,
        _parents: &[&Tensor<T>],
        needs: &[bool],
    ) -> Vec<Option<Vec<T>>> {
        if !needs[0] {
            return vec![None];
        }
        let grad = out_grad
            .iter()
            .zip(out.data())
            .map(|(g, y)| *g * *y * (T::one() - *y))
            .collect();
        vec![Some(grad)]
    }
}

#[inline]
fn stable_sigmoid<T: Element>(x: T) -> T {
    // Piecewise exp keeps the argument non-positive, so it never overflows.
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Element>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    g.check_parents(&[x])?;
    let xv = g.value(x);
    let out = Tensor::from_fn(xv.shape(), |i| stable_sigmoid(xv.data()[i]));
    Ok(g.record("sigmoid", out, vec![x], Box::new(SigmoidBackward)))
}

// ── Pooling ─────────────────────────────────────────────────────────────────

struct GlobalAvgPoolBackward;

impl<T: Element> Backward<T> for GlobalAvgPoolBackward {
    fn apply(
        &self,
        out_grad: &[T],
        _out: &Tensor<T>,
        parents: &[&Tensor<T>],
        needs: &[bool],
    ) -> Vec<Option<Vec<T>>> {
        if !needs[0] {
            return vec![None];
        }
        let xs = parents[0].shape();
        let plane = xs.h * xs.w;
        let inv = T::from_f64(1.0 / plane as f64);
        let mut grad = vec![T::zero(); xs.len()];
        for nc in 0..xs.n * xs.c {
            let share = out_grad[nc] * inv;
            grad[nc * plane..(nc + 1) * plane]
                .iter_mut()
                .for_each(|v| *v = share);
        }
        vec![Some(grad)]
    }
}

/// Per-(n,c) spatial mean, shape (n,c,1,1).
pub fn global_avg_pool<T: Element>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    g.check_parents(&[x])?;
    let xv = g.value(x);
    let xs = xv.shape();
    let plane = xs.h * xs.w;
    let mut out = vec![T::zero(); xs.n * xs.c];
    for (nc, slot) in out.iter_mut().enumerate() {
        let mut acc = 0.0f64;
        for v in &xv.data()[nc * plane..(nc + 1) * plane] {
            acc += v.as_f64();
        }
        *slot = T::from_f64(acc / plane as f64);
    }
    let out = Tensor::new(Shape::new(xs.n, xs.c, 1, 1), out)?;
    Ok(g.record(
        "global_avg_pool",
        out,
        vec![x],
        Box::new(GlobalAvgPoolBackward),
    ))
}

// ── Squeeze-and-excite ──────────────────────────────────────────────────────

/// Channel attention: global pool -> 1x1 reduce -> LeakyReLU -> 1x1 expand ->
/// sigmoid gate, multiplied back onto the input. Fully differentiable.
pub fn se_block<T: Element>(
    g: &mut Graph<T>,
    x: Var,
    w_reduce: Var,
    b_reduce: Var,
    w_expand: Var,
    b_expand: Var,
    slope: f64,
) -> Result<Var> {
    g.check_parents(&[x, w_reduce, b_reduce, w_expand, b_expand])?;
    let (c, cr) = {
        let xs = g.value(x).shape();
        let rs = g.value(w_reduce).shape();
        let es = g.value(w_expand).shape();
        if rs.c != xs.c {
            return Err(Error::Dimension(format!(
                "se_block reduce weight expects {} input channels, got {}",
                xs.c, rs.c
            )));
        }
        if es.n != xs.c || es.c != rs.n {
            return Err(Error::Dimension(format!(
                "se_block expand weight must be ({}, {}, 1, 1), got {es}",
                xs.c, rs.n
            )));
        }
        (xs.c, rs.n)
    };
    if cr < 1 || c < 1 {
        return Err(Error::Dimension("se_block needs at least one channel".into()));
    }
    let pooled = global_avg_pool(g, x)?;
    let reduced = conv2d(g, pooled, w_reduce, Some(b_reduce), 1, 0)?;
    let reduced = leaky_relu(g, reduced, slope)?;
    let expanded = conv2d(g, reduced, w_expand, Some(b_expand), 1, 0)?;
    let gate = sigmoid(g, expanded)?;
    g.mul(x, gate)
}

// ── Pixel shuffle ───────────────────────────────────────────────────────────

fn shuffle_kernel<T: Element>(x: &Tensor<T>, r: usize) -> Tensor<T> {
    let xs = x.shape();
    let out_shape = Shape::new(xs.n, xs.c / (r * r), xs.h * r, xs.w * r);
    let mut out = vec![T::zero(); out_shape.len()];
    let xd = x.data();
    for n in 0..xs.n {
        for ic in 0..xs.c {
            let oc = ic / (r * r);
            let a = (ic % (r * r)) / r;
            let b = ic % r;
            for iy in 0..xs.h {
                let oy = iy * r + a;
                let src = &xd[((n * xs.c + ic) * xs.h + iy) * xs.w..][..xs.w];
                for (ix, v) in src.iter().enumerate() {
                    let ox = ix * r + b;
                    out[out_shape.at(n, oc, oy, ox)] = *v;
                }
            }
        }
    }
    Tensor::new(out_shape, out).expect("valid shuffle shape")
}

fn unshuffle_kernel<T: Element>(x: &Tensor<T>, r: usize) -> Tensor<T> {
    let xs = x.shape();
    let out_shape = Shape::new(xs.n, xs.c * r * r, xs.h / r, xs.w / r);
    let mut out = vec![T::zero(); out_shape.len()];
    let xd = x.data();
    for n in 0..xs.n {
        for c in 0..xs.c {
            for iy in 0..xs.h {
                let a = iy % r;
                let src = &xd[((n * xs.c + c) * xs.h + iy) * xs.w..][..xs.w];
                for (ix, v) in src.iter().enumerate() {
                    let oc = c * r * r + a * r + ix % r;
                    out[out_shape.at(n, oc, iy / r, ix / r)] = *v;
                }
            }
        }
    }
    Tensor::new(out_shape, out).expect("valid unshuffle shape")
}

struct ShuffleBackward {
    r: usize,
}

impl<T: Element> Backward<T> for ShuffleBackward {
    fn apply(
        &self,
        out_grad: &[T],
        out: &Tensor<T>,
        _parents: &[&Tensor<T>],
        needs: &[bool],
    ) -> Vec<Option<Vec<T>>> {
        if !needs[0] {
            return vec![None];
        }
        let gt = Tensor::new(out.shape(), out_grad.to_vec()).expect("grad shape");
        vec![Some(unshuffle_kernel(&gt, self.r).data().to_vec())]
    }
}

struct UnshuffleBackward {
    r: usize,
}

impl<T: Element> Backward<T> for UnshuffleBackward {
    fn apply(
        &self,
        out_grad: &[T],
        out: &Tensor<T>,
        _parents: &[&Tensor<T>],
        needs: &[bool],
    ) -> Vec<Option<Vec<T>>> {
        if !needs[0] {
            return vec![None];
        }
        let gt = Tensor::new(out.shape(), out_grad.to_vec()).expect("grad shape");
        vec![Some(shuffle_kernel(&gt, self.r).data().to_vec())]
    }
}

/// Rearranges (n, c*r^2, h, w) into (n, c, h*r, w*r):
/// `out(n, c, r*i+a, r*j+b) = in(n, c*r^2 + a*r + b, i, j)`.
pub fn pixel_shuffle<T: Element>(g: &mut Graph<T>, x: Var, r: usize) -> Result<Var> {
    g.check_parents(&[x])?;
    if r == 0 {
        return Err(Error::Dimension("pixel_shuffle factor must be positive".into()));
    }
    let xs = g.value(x).shape();
    if xs.c % (r * r) != 0 {
        return Err(Error::Dimension(format!(
            "pixel_shuffle: {} channels not divisible by r^2 = {}",
            xs.c,
            r * r
        )));
    }
    let out = shuffle_kernel(g.value(x), r);
    Ok(g.record(
        "pixel_shuffle",
        out,
        vec![x],
        Box::new(ShuffleBackward { r }),
    ))
}

/// Exact inverse permutation of [`pixel_shuffle`].
pub fn pixel_unshuffle<T: Element>(g: &mut Graph<T>, x: Var, r: usize) -> Result<Var> {
    g.check_parents(&[x])?;
    if r == 0 {
        return Err(Error::Dimension("pixel_unshuffle factor must be positive".into()));
    }
    let xs = g.value(x).shape();
    if xs.h % r != 0 || xs.w % r != 0 {
        return Err(Error::Dimension(format!(
            "pixel_unshuffle: spatial dims {}x{} not divisible by r = {r}",
            xs.h, xs.w
        )));
    }
    let out = unshuffle_kernel(g.value(x), r);
    Ok(g.record(
        "pixel_unshuffle",
        out,
        vec![x],
        Box::new(UnshuffleBackward { r }),
    ))
}

// ── Loss ────────────────────────────────────────────────────────────────────

struct MseBackward;

impl<T: Element> Backward<T> for MseBackward {
    fn apply(
        &self,
        out_grad: &[T],
        _out: &Tensor<T>,
        parents: &[&Tensor<T>],
        needs: &[bool],
    ) -> Vec<Option<Vec<T>>> {
        let (pred, target) = (parents[0], parents[1]);
        let grad = needs[0].then(|| {
            let scale = out_grad[0] * T::from_f64(2.0 / pred.len() as f64);
            pred.data()
                .iter()
                .zip(target.data())
                .map(|(p, t)| scale * (*p - *t))
                .collect()
        });
        vec![grad, None]
    }
}

/// Mean over all elements of (pred - target)^2. The target must not require
/// a gradient.
pub fn mse_loss<T: Element>(g: &mut Graph<T>, pred: Var, target: Var) -> Result<Var> {
    g.check_parents(&[pred, target])?;
    let (ps, ts) = (g.value(pred).shape(), g.value(target).shape());
    if ps != ts {
        return Err(Error::Dimension(format!(
            "mse_loss: prediction {ps} and target {ts} shapes differ"
        )));
    }
    if g.grad(target).is_some() || g.var_needs_grad(target) {
        return Err(Error::Contract(
            "mse_loss: target must not carry a gradient".into(),
        ));
    }
    let mut acc = 0.0f64;
    for (p, t) in g.value(pred).data().iter().zip(g.value(target).data()) {
        let d = p.as_f64() - t.as_f64();
        acc += d * d;
    }
    let loss = T::from_f64(acc / ps.len() as f64);
    Ok(g.record(
        "mse_loss",
        Tensor::scalar(loss),
        vec![pred, target],
        Box::new(MseBackward),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (i, (x, y)) in a.iter().zip(b).enumerate() {
            assert!(
                (x - y).abs() <= tol * (1.0 + x.abs().max(y.abs())),
                "element {i}: {x} vs {y}"
            );
        }
    }

    // ── conv2d ──────────────────────────────────────────────────────────

    #[test]
    fn conv_1x1_identity() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(Shape::new(1, 1, 3, 3), (1..=9).map(f64::from).collect()).unwrap());
        let w = g.constant(Tensor::scalar(1.0));
        let y = conv2d(&mut g, x, w, None, 1, 0).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());
    }

    #[test]
    fn conv_3x3_ones_padded_counts_window() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::<f64>::full(Shape::new(1, 1, 3, 3), 1.0));
        let w = g.constant(Tensor::<f64>::full(Shape::new(1, 1, 3, 3), 1.0));
        let y = conv2d(&mut g, x, w, None, 1, 1).unwrap();
        // Zero-padded window sums: corners see 4 ones, edges 6, center 9.
        assert_eq!(
            g.value(y).data(),
            &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]
        );
    }

    #[test]
    fn conv_stride1_pad1_preserves_25x25() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::new();
        let x = g.constant(random_tensor(Shape::new(1, 1, 25, 25), &mut rng));
        let w = g.constant(random_tensor(Shape::new(4, 1, 3, 3), &mut rng));
        let y = conv2d(&mut g, x, w, None, 1, 1).unwrap();
        assert_eq!(g.value(y).shape(), Shape::new(1, 4, 25, 25));
    }

    #[test]
    fn conv_same_padding_preserves_dims_for_odd_kernels() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for k in [1usize, 3, 5, 7] {
            let mut g = Graph::new();
            let x = g.constant(random_tensor(Shape::new(1, 2, 9, 11), &mut rng));
            let w = g.constant(random_tensor(Shape::new(3, 2, k, k), &mut rng));
            let y = conv2d(&mut g, x, w, None, 1, (k - 1) / 2).unwrap();
            assert_eq!(g.value(y).shape(), Shape::new(1, 3, 9, 11), "k = {k}");
        }
    }

    #[test]
    fn conv_channel_mismatch_rejected() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::<f64>::zeros(Shape::new(1, 2, 4, 4)));
        let w = g.constant(Tensor::<f64>::zeros(Shape::new(1, 3, 3, 3)));
        assert!(matches!(
            conv2d(&mut g, x, w, None, 1, 1),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn conv_non_integer_output_rejected() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::<f64>::zeros(Shape::new(1, 1, 6, 6)));
        let w = g.constant(Tensor::<f64>::zeros(Shape::new(1, 1, 3, 3)));
        // (6 - 3) % 2 != 0
        assert!(matches!(
            conv2d(&mut g, x, w, None, 2, 0),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x0 = random_tensor(Shape::new(2, 2, 5, 5), &mut rng);
        let w0 = random_tensor(Shape::new(3, 2, 3, 3), &mut rng);
        let b0 = random_tensor(Shape::new(1, 3, 1, 1), &mut rng);

        // d/dx
        let err = grad_check(
            |g, v| {
                let w = g.constant(w0.clone());
                let b = g.constant(b0.clone());
                let y = conv2d(g, v, w, Some(b), 1, 1)?;
                g.reduce_mean(y)
            },
            &x0,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-7, "conv d/dx error {err}");

        // d/dw
        let err = grad_check(
            |g, v| {
                let x = g.constant(x0.clone());
                let b = g.constant(b0.clone());
                let y = conv2d(g, x, v, Some(b), 1, 1)?;
                g.reduce_mean(y)
            },
            &w0,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-7, "conv d/dw error {err}");

        // d/db with stride 2
        let err = grad_check(
            |g, v| {
                let x = g.constant(x0.clone());
                let w = g.constant(w0.clone());
                let y = conv2d(g, x, w, Some(v), 2, 1)?;
                g.reduce_mean(y)
            },
            &b0,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "conv d/db error {err}");
    }

    // ── depthwise ───────────────────────────────────────────────────────

    #[test]
    fn depthwise_1x1_scales_per_channel() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::<f64>::full(Shape::new(1, 2, 2, 2), 1.0));
        let w = g.constant(Tensor::new(Shape::new(2, 1, 1, 1), vec![2.0, 3.0]).unwrap());
        let y = depthwise_conv2d(&mut g, x, w, None, 1, 0).unwrap();
        assert_eq!(g.value(y).data(), &[2.0, 2.0, 2.0, 2.0, 3.0, 3.0, 3.0, 3.0]);
    }

    #[test]
    fn depthwise_equals_block_diagonal_dense_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c = 3;
        let x0 = random_tensor(Shape::new(2, c, 6, 6), &mut rng);
        let wd = random_tensor(Shape::new(c, 1, 3, 3), &mut rng);

        // Group-expanded dense weight: channel g reads only channel g.
        let mut dense = Tensor::<f64>::zeros(Shape::new(c, c, 3, 3));
        {
            let data = dense.data_mut();
            for ch in 0..c {
                for ky in 0..3 {
                    for kx in 0..3 {
                        data[((ch * c + ch) * 3 + ky) * 3 + kx] = wd.at(ch, 0, ky, kx);
                    }
                }
            }
        }

        let mut g = Graph::new();
        let x = g.constant(x0.clone());
        let w = g.constant(wd);
        let y_dw = depthwise_conv2d(&mut g, x, w, None, 1, 1).unwrap();

        let xd = g.constant(x0);
        let wdense = g.constant(dense);
        let y_dense = conv2d(&mut g, xd, wdense, None, 1, 1).unwrap();

        assert_close(g.value(y_dw).data(), g.value(y_dense).data(), 1e-6);
    }

    #[test]
    fn depthwise_preserves_25x25() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut g = Graph::new();
        let x = g.constant(random_tensor(Shape::new(1, 3, 25, 25), &mut rng));
        let w = g.constant(random_tensor(Shape::new(3, 1, 3, 3), &mut rng));
        let y = depthwise_conv2d(&mut g, x, w, None, 1, 1).unwrap();
        assert_eq!(g.value(y).shape(), Shape::new(1, 3, 25, 25));
    }

    #[test]
    fn depthwise_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x0 = random_tensor(Shape::new(1, 3, 5, 5), &mut rng);
        let w0 = random_tensor(Shape::new(3, 1, 3, 3), &mut rng);
        let err = grad_check(
            |g, v| {
                let x = g.constant(x0.clone());
                let y = depthwise_conv2d(g, x, v, None, 1, 1)?;
                g.reduce_mean(y)
            },
            &w0,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-7, "depthwise d/dw error {err}");
    }

    // ── activations ─────────────────────────────────────────────────────

    #[test]
    fn leaky_relu_positive_passthrough_and_definition() {
        let mut g = Graph::new();
        let pos = g.constant(Tensor::new(Shape::new(1, 1, 1, 3), vec![0.0, 1.5, 7.0]).unwrap());
        let y = leaky_relu(&mut g, pos, 0.2).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 1.5, 7.0]);

        let neg = g.constant(Tensor::<f64>::scalar(-2.0));
        let y = leaky_relu(&mut g, neg, 0.2).unwrap();
        assert!((g.value(y).data()[0] + 0.4).abs() < 1e-12);
    }

    #[test]
    fn leaky_relu_slope_out_of_range_rejected() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::<f64>::scalar(1.0));
        assert!(leaky_relu(&mut g, x, 0.0).is_err());
        assert!(leaky_relu(&mut g, x, 1.0).is_err());
    }

    #[test]
    fn leaky_relu_gradient_at_negative_input() {
        let x = Tensor::scalar(-1.0);
        let err = grad_check(
            |g, v| {
                let y = leaky_relu(g, v, 0.2)?;
                g.reduce_mean(y)
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-8, "leaky_relu grad error {err}");
        // And the gradient value itself is the slope.
        let mut g = Graph::new();
        let v = g.leaf(&x);
        let y = leaky_relu(&mut g, v, 0.2).unwrap();
        let m = g.reduce_mean(y).unwrap();
        g.backward(m).unwrap();
        assert!((g.grad(v).unwrap()[0] - 0.2).abs() < 1e-12);
    }

    #[test]
    fn sigmoid_midpoint_and_saturation() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::<f64>::new(Shape::new(1, 1, 1, 3), vec![0.0, 40.0, -40.0]).unwrap());
        let y = sigmoid(&mut g, x).unwrap();
        let d = g.value(y).data();
        assert_eq!(d[0], 0.5);
        assert!((d[1] - 1.0).abs() < 1e-12);
        assert!(d[2].abs() < 1e-12);
        assert!(g.value(y).all_finite());
    }

    #[test]
    fn sigmoid_gradient_matches_finite_differences() {
        let x = Tensor::scalar(1.0);
        let err = grad_check(
            |g, v| {
                let y = sigmoid(g, v)?;
                g.reduce_mean(y)
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-8, "sigmoid grad error {err}");
    }

    // ── global_avg_pool ─────────────────────────────────────────────────

    #[test]
    fn gap_constant_and_small_case() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::<f64>::full(Shape::new(2, 3, 4, 4), 5.5));
        let y = global_avg_pool(&mut g, c).unwrap();
        assert!(g.value(y).data().iter().all(|&v| (v - 5.5).abs() < 1e-12));

        let x = g.constant(Tensor::new(Shape::new(1, 1, 2, 2), vec![1.0, 3.0, 5.0, 7.0]).unwrap());
        let y = global_avg_pool(&mut g, x).unwrap();
        assert_eq!(g.value(y).data(), &[4.0]);
    }

    #[test]
    fn gap_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let t = random_tensor(Shape::new(2, 3, 5, 4), &mut rng);
        let s = t.shape();
        let mut expect = vec![0.0f64; s.n * s.c];
        for n in 0..s.n {
            for c in 0..s.c {
                let mut acc = 0.0;
                for y in 0..s.h {
                    for x in 0..s.w {
                        acc += t.at(n, c, y, x);
                    }
                }
                expect[n * s.c + c] = acc / (s.h * s.w) as f64;
            }
        }
        let mut g = Graph::new();
        let x = g.constant(t);
        let y = global_avg_pool(&mut g, x).unwrap();
        assert_close(g.value(y).data(), &expect, 1e-6);
    }

    #[test]
    fn gap_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x0 = random_tensor(Shape::new(1, 2, 3, 3), &mut rng);
        let err = grad_check(
            |g, v| {
                let y = global_avg_pool(g, v)?;
                g.reduce_mean(y)
            },
            &x0,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-9, "gap grad error {err}");
    }

    // ── se_block ────────────────────────────────────────────────────────

    fn se_weights(c: usize, cr: usize) -> (Tensor<f64>, Tensor<f64>, Tensor<f64>, Tensor<f64>) {
        (
            Tensor::zeros(Shape::new(cr, c, 1, 1)),
            Tensor::zeros(Shape::new(1, cr, 1, 1)),
            Tensor::zeros(Shape::new(c, cr, 1, 1)),
            Tensor::zeros(Shape::new(1, c, 1, 1)),
        )
    }

    #[test]
    fn se_zero_weights_halve_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x0 = random_tensor(Shape::new(1, 4, 3, 3), &mut rng);
        let (wr, br, we, be) = se_weights(4, 2);
        let mut g = Graph::new();
        let x = g.constant(x0.clone());
        let args: Vec<Var> = [wr, br, we, be].into_iter().map(|t| g.constant(t)).collect();
        let y = se_block(&mut g, x, args[0], args[1], args[2], args[3], 0.2).unwrap();
        let expect: Vec<f64> = x0.data().iter().map(|v| v * 0.5).collect();
        assert_close(g.value(y).data(), &expect, 1e-12);
    }

    #[test]
    fn se_saturated_gate_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x0 = random_tensor(Shape::new(1, 4, 3, 3), &mut rng);
        let (wr, br, we, mut be) = se_weights(4, 2);
        be.data_mut().iter_mut().for_each(|v| *v = 40.0);
        let mut g = Graph::new();
        let x = g.constant(x0.clone());
        let args: Vec<Var> = [wr, br, we, be].into_iter().map(|t| g.constant(t)).collect();
        let y = se_block(&mut g, x, args[0], args[1], args[2], args[3], 0.2).unwrap();
        assert_close(g.value(y).data(), x0.data(), 1e-6);
    }

    #[test]
    fn se_matches_composed_loop_oracle() {
        // Independent oracle: plain loops, no graph machinery.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (n, c, cr, h, w) = (2usize, 4usize, 2usize, 3usize, 3usize);
        let x0 = random_tensor(Shape::new(n, c, h, w), &mut rng);
        let wr = random_tensor(Shape::new(cr, c, 1, 1), &mut rng);
        let br = random_tensor(Shape::new(1, cr, 1, 1), &mut rng);
        let we = random_tensor(Shape::new(c, cr, 1, 1), &mut rng);
        let be = random_tensor(Shape::new(1, c, 1, 1), &mut rng);
        let slope = 0.2;

        let mut expect = vec![0.0f64; x0.len()];
        for ni in 0..n {
            let mut pooled = vec![0.0f64; c];
            for ci in 0..c {
                let mut acc = 0.0;
                for y in 0..h {
                    for x in 0..w {
                        acc += x0.at(ni, ci, y, x);
                    }
                }
                pooled[ci] = acc / (h * w) as f64;
            }
            let mut red = vec![0.0f64; cr];
            for o in 0..cr {
                let mut acc = br.data()[o];
                for ci in 0..c {
                    acc += wr.at(o, ci, 0, 0) * pooled[ci];
                }
                red[o] = if acc >= 0.0 { acc } else { slope * acc };
            }
            let mut gate = vec![0.0f64; c];
            for o in 0..c {
                let mut acc = be.data()[o];
                for ri in 0..cr {
                    acc += we.at(o, ri, 0, 0) * red[ri];
                }
                gate[o] = 1.0 / (1.0 + (-acc).exp());
            }
            for ci in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        expect[x0.shape().at(ni, ci, y, x)] = x0.at(ni, ci, y, x) * gate[ci];
                    }
                }
            }
        }

        let mut g = Graph::new();
        let x = g.constant(x0);
        let args: Vec<Var> = [wr, br, we, be].into_iter().map(|t| g.constant(t)).collect();
        let y = se_block(&mut g, x, args[0], args[1], args[2], args[3], slope).unwrap();
        assert_close(g.value(y).data(), &expect, 1e-6);
    }

    #[test]
    fn se_output_bounded_by_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..10 {
            let x0 = random_tensor(Shape::new(1, 4, 4, 4), &mut rng);
            let wr = random_tensor(Shape::new(2, 4, 1, 1), &mut rng);
            let br = random_tensor(Shape::new(1, 2, 1, 1), &mut rng);
            let we = random_tensor(Shape::new(4, 2, 1, 1), &mut rng);
            let be = random_tensor(Shape::new(1, 4, 1, 1), &mut rng);
            let mut g = Graph::new();
            let x = g.constant(x0.clone());
            let args: Vec<Var> = [wr, br, we, be].into_iter().map(|t| g.constant(t)).collect();
            let y = se_block(&mut g, x, args[0], args[1], args[2], args[3], 0.2).unwrap();
            for (o, i) in g.value(y).data().iter().zip(x0.data()) {
                assert!(o.abs() <= i.abs() + 1e-12, "|{o}| > |{i}|");
            }
        }
    }

    #[test]
    fn se_gradients_flow_to_all_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x0 = random_tensor(Shape::new(1, 4, 3, 3), &mut rng);
        let wr0 = random_tensor(Shape::new(2, 4, 1, 1), &mut rng);
        let err = grad_check(
            |g, v| {
                let x = g.constant(x0.clone());
                let br = g.constant(Tensor::zeros(Shape::new(1, 2, 1, 1)));
                let we = g.constant(random_tensor(Shape::new(4, 2, 1, 1), &mut ChaCha8Rng::seed_from_u64(14)));
                let be = g.constant(Tensor::zeros(Shape::new(1, 4, 1, 1)));
                let y = se_block(g, x, v, br, we, be, 0.2)?;
                g.reduce_mean(y)
            },
            &wr0,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "se d/dw_reduce error {err}");
    }

    // ── pixel shuffle ───────────────────────────────────────────────────

    #[test]
    fn shuffle_r1_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let t = random_tensor(Shape::new(1, 3, 4, 4), &mut rng);
        let mut g = Graph::new();
        let x = g.constant(t.clone());
        let y = pixel_shuffle(&mut g, x, 1).unwrap();
        assert_eq!(g.value(y).data(), t.data());
        let z = pixel_unshuffle(&mut g, x, 1).unwrap();
        assert_eq!(g.value(z).data(), t.data());
    }

    #[test]
    fn shuffle_tiny_case_by_hand() {
        // (1,4,1,1) [a,b,c,d] with r=2 -> (1,1,2,2) [[a,b],[c,d]].
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(Shape::new(1, 4, 1, 1), vec![10.0, 20.0, 30.0, 40.0]).unwrap());
        let y = pixel_shuffle(&mut g, x, 2).unwrap();
        assert_eq!(g.value(y).shape(), Shape::new(1, 1, 2, 2));
        assert_eq!(g.value(y).data(), &[10.0, 20.0, 30.0, 40.0]);
    }

    #[test]
    fn shuffle_matches_index_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let r = 2usize;
        let t = random_tensor(Shape::new(2, 8, 3, 5), &mut rng);
        let mut g = Graph::new();
        let x = g.constant(t.clone());
        let y = pixel_shuffle(&mut g, x, r).unwrap();
        let out = g.value(y);
        let os = out.shape();
        for n in 0..os.n {
            for oc in 0..os.c {
                for oy in 0..os.h {
                    for ox in 0..os.w {
                        let expect = t.at(n, oc * r * r + (oy % r) * r + (ox % r), oy / r, ox / r);
                        assert_eq!(out.at(n, oc, oy, ox), expect);
                    }
                }
            }
        }
    }

    #[test]
    fn unshuffle_matches_index_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let r = 2usize;
        let t = random_tensor(Shape::new(1, 2, 6, 4), &mut rng);
        let mut g = Graph::new();
        let x = g.constant(t.clone());
        let y = pixel_unshuffle(&mut g, x, r).unwrap();
        let out = g.value(y);
        let os = out.shape();
        // Inverse of the shuffle formula.
        for n in 0..os.n {
            for oc in 0..os.c {
                for oy in 0..os.h {
                    for ox in 0..os.w {
                        let c = oc / (r * r);
                        let a = (oc % (r * r)) / r;
                        let b = oc % r;
                        assert_eq!(out.at(n, oc, oy, ox), t.at(n, c, oy * r + a, ox * r + b));
                    }
                }
            }
        }
    }

    #[test]
    fn shuffle_unshuffle_round_trips_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let t = random_tensor(Shape::new(1, 32, 5, 5), &mut rng);
        let mut g = Graph::new();
        let x = g.constant(t.clone());
        let s = pixel_shuffle(&mut g, x, 4).unwrap();
        let back = pixel_unshuffle(&mut g, s, 4).unwrap();
        assert_eq!(g.value(back).data(), t.data());

        let t2 = random_tensor(Shape::new(1, 2, 8, 8), &mut rng);
        let x2 = g.constant(t2.clone());
        let u = pixel_unshuffle(&mut g, x2, 2).unwrap();
        let fwd = pixel_shuffle(&mut g, u, 2).unwrap();
        assert_eq!(g.value(fwd).data(), t2.data());
    }

    #[test]
    fn shuffle_rejects_bad_channel_count() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::<f64>::zeros(Shape::new(1, 6, 2, 2)));
        assert!(matches!(pixel_shuffle(&mut g, x, 2), Err(Error::Dimension(_))));
        let y = g.constant(Tensor::<f64>::zeros(Shape::new(1, 1, 3, 4)));
        assert!(matches!(pixel_unshuffle(&mut g, y, 2), Err(Error::Dimension(_))));
    }

    #[test]
    fn shuffle_gradient_is_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let x0 = random_tensor(Shape::new(1, 4, 2, 2), &mut rng);
        let err = grad_check(
            |g, v| {
                let y = pixel_shuffle(g, v, 2)?;
                let sq = g.mul(y, y)?;
                g.reduce_mean(sq)
            },
            &x0,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-8, "pixel_shuffle grad error {err}");
    }

    proptest! {
        #[test]
        fn shuffle_bijection_property(
            n in 1usize..3,
            c in 1usize..3,
            h in 1usize..5,
            w in 1usize..5,
            r in 2usize..4,
            seed in 0u64..1000,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = random_tensor(Shape::new(n, c * r * r, h, w), &mut rng);
            let mut g = Graph::new();
            let x = g.constant(t.clone());
            let s = pixel_shuffle(&mut g, x, r).unwrap();
            let back = pixel_unshuffle(&mut g, s, r).unwrap();
            prop_assert_eq!(g.value(back).data(), t.data());
        }
    }

    // ── mse ─────────────────────────────────────────────────────────────

    #[test]
    fn mse_zero_when_equal() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let t = random_tensor(Shape::new(1, 1, 4, 4), &mut rng);
        let mut g = Graph::new();
        let p = g.constant(t.clone());
        let q = g.constant(t);
        let l = mse_loss(&mut g, p, q).unwrap();
        assert_eq!(g.value(l).data()[0], 0.0);
    }

    #[test]
    fn mse_small_arithmetic() {
        let mut g = Graph::new();
        let p = g.constant(Tensor::new(Shape::new(1, 1, 1, 2), vec![0.0, 0.0]).unwrap());
        let t = g.constant(Tensor::new(Shape::new(1, 1, 1, 2), vec![1.0, 3.0]).unwrap());
        let l = mse_loss(&mut g, p, t).unwrap();
        assert_eq!(g.value(l).data()[0], 5.0);
    }

    #[test]
    fn mse_shape_mismatch_rejected() {
        let mut g = Graph::new();
        let p = g.constant(Tensor::<f64>::zeros(Shape::new(1, 1, 2, 2)));
        let t = g.constant(Tensor::<f64>::zeros(Shape::new(1, 1, 2, 3)));
        assert!(matches!(mse_loss(&mut g, p, t), Err(Error::Dimension(_))));
    }

    #[test]
    fn mse_target_with_gradient_rejected() {
        let mut g = Graph::new();
        let p = g.constant(Tensor::<f64>::zeros(Shape::new(1, 1, 2, 2)));
        let t = g.leaf(&Tensor::<f64>::zeros(Shape::new(1, 1, 2, 2)));
        assert!(matches!(mse_loss(&mut g, p, t), Err(Error::Contract(_))));
    }

    #[test]
    fn mse_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let p0 = random_tensor(Shape::new(1, 2, 3, 3), &mut rng);
        let t0 = random_tensor(Shape::new(1, 2, 3, 3), &mut rng);
        let err = grad_check(
            |g, v| {
                let t = g.constant(t0.clone());
                mse_loss(g, v, t)
            },
            &p0,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6, "mse grad error {err}");
    }
}
