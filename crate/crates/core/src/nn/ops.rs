//! Primitive op kernels: forward evaluation and gradient rules.
//!
//! All convolutions are cross-correlations. 2D tensors are lifted to 3D with
//! a unit leading spatial axis so one kernel implementation serves both.
//! Reductions accumulate in f64; results are stored as f32. Spatial loops
//! parallelize over independent output slabs only, so results are bitwise
//! identical for any thread count.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::nn::tensor::Tensor;

/// Soft-Dice smoothing added to numerator and denominator.
pub const DICE_EPS: f64 = 1e-5;
/// Probability clamp inside cross-entropy.
pub const CE_CLAMP: f64 = 1e-7;

/// Primitive operation kinds. Spatial hyperparameters are isotropic over the
/// spatial axes of the input.
#[derive(Debug, Clone, PartialEq)]
pub enum OpKind {
    /// Placeholder fed at forward time by name.
    Input(String),
    /// Params: weight (cout, cin, k...), bias (cout).
    Conv { stride: usize, padding: usize },
    /// Params: weight (cin, cout, k...), bias (cout). Output cropped by
    /// `padding` per side: out = (n-1)*s + k - 2p.
    ConvTranspose { stride: usize, padding: usize },
    MaxPool { k: usize, s: usize },
    AvgPool { k: usize, s: usize },
    /// Params: gamma (c), beta (c). Normalizes per (batch, channel).
    InstanceNorm { eps: f32 },
    /// Params: gamma (c), beta (c). Normalizes per channel over the batch.
    BatchNorm { eps: f32 },
    Relu,
    LeakyRelu { slope: f32 },
    SoftmaxChannels,
    ConcatChannels,
    /// Params: weight (out, in), bias (out). Input (batch, in).
    Dense,
    GlobalAvgPool,
    /// Reduce to a scalar; the f64 value is kept on the tape.
    Sum,
    Mul,
    Scale { c: f32 },
    /// Inputs: probabilities (b, 2, spatial...), target (b, spatial...).
    DiceCeLoss { dice_weight: f32, ce_weight: f32 },
}

/// Geometry of one (transposed) convolution or pooling, lifted to 3 spatial
/// axes (leading axes of size 1 for 2D inputs).
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub ins: [usize; 3],
    pub outs: [usize; 3],
    pub k: [usize; 3],
    pub s: [usize; 3],
    pub p: [usize; 3],
}

impl ConvGeom {
    fn in_sp(&self) -> usize {
        self.ins[0] * self.ins[1] * self.ins[2]
    }
    fn out_sp(&self) -> usize {
        self.outs[0] * self.outs[1] * self.outs[2]
    }
    fn ksp(&self) -> usize {
        self.k[0] * self.k[1] * self.k[2]
    }
}

/// Split a feature-map shape into (batch, channels, spatial lifted to 3).
fn lift(shape: &[usize]) -> Result<(usize, usize, [usize; 3])> {
    match shape.len() {
        4 => Ok((shape[0], shape[1], [1, shape[2], shape[3]])),
        5 => Ok((shape[0], shape[1], [shape[2], shape[3], shape[4]])),
        _ => Err(Error::Shape(format!(
            "expected 4D or 5D feature map, got shape {shape:?}"
        ))),
    }
}

fn conv_out_size(n: usize, k: usize, p: usize, s: usize) -> Result<usize> {
    if n + 2 * p < k {
        return Err(Error::Shape(format!(
            "spatial size {n} with padding {p} smaller than kernel {k}"
        )));
    }
    Ok((n + 2 * p - k) / s + 1)
}

/// Output positions `o` in `[lo, hi)` for which `o*s + k_off - p` lands
/// inside `[0, n_in)`.
#[inline]
fn out_range(n_in: usize, n_out: usize, k_off: usize, p: usize, s: usize) -> (usize, usize) {
    let lo = if p > k_off { (p - k_off).div_ceil(s) } else { 0 };
    if n_in + p <= k_off {
        return (0, 0);
    }
    let hi = ((n_in - 1 + p - k_off) / s + 1).min(n_out);
    (lo, hi.max(lo))
}

/// out[b, a, :] += sum_c w[a, c, :] * x[b, c, :] (cross-correlation).
pub(crate) fn raw_conv_fwd(
    x: &[f32],
    w: &[f32],
    bias: Option<&[f32]>,
    g: &ConvGeom,
    out: &mut [f32],
) {
    let in_sp = g.in_sp();
    let out_sp = g.out_sp();
    let ksp = g.ksp();
    out.par_chunks_mut(out_sp).enumerate().for_each(|(bc, slab)| {
        let b = bc / g.cout;
        let co = bc % g.cout;
        let init = bias.map_or(0.0, |bb| bb[co] as f64);
        let mut acc = vec![init; out_sp];
        for ci in 0..g.cin {
            let xbase = (b * g.cin + ci) * in_sp;
            let wbase = (co * g.cin + ci) * ksp;
            for kz in 0..g.k[0] {
                let (zlo, zhi) = out_range(g.ins[0], g.outs[0], kz, g.p[0], g.s[0]);
                for ky in 0..g.k[1] {
                    let (ylo, yhi) = out_range(g.ins[1], g.outs[1], ky, g.p[1], g.s[1]);
                    for kx in 0..g.k[2] {
                        let (xlo, xhi) = out_range(g.ins[2], g.outs[2], kx, g.p[2], g.s[2]);
                        if xlo >= xhi || ylo >= yhi || zlo >= zhi {
                            continue;
                        }
                        let wv = w[wbase + (kz * g.k[1] + ky) * g.k[2] + kx] as f64;
                        for zo in zlo..zhi {
                            let zi = zo * g.s[0] + kz - g.p[0];
                            for yo in ylo..yhi {
                                let yi = yo * g.s[1] + ky - g.p[1];
                                let xrow = xbase + (zi * g.ins[1] + yi) * g.ins[2];
                                let orow = (zo * g.outs[1] + yo) * g.outs[2];
                                if g.s[2] == 1 {
                                    let xi0 = xrow + (xlo + kx) - g.p[2];
                                    let n = xhi - xlo;
                                    for (a, &xv) in acc[orow + xlo..orow + xlo + n]
                                        .iter_mut()
                                        .zip(&x[xi0..xi0 + n])
                                    {
                                        *a += wv * xv as f64;
                                    }
                                } else {
                                    for xo in xlo..xhi {
                                        let xi = xo * g.s[2] + kx - g.p[2];
                                        acc[orow + xo] += wv * x[xrow + xi] as f64;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        for (o, a) in slab.iter_mut().zip(acc.iter()) {
            *o = *a as f32;
        }
    });
}

/// Adjoint of [`raw_conv_fwd`] with respect to x: maps a tensor on the
/// output grid back to the input grid through the same weights. Also the
/// forward pass of the transposed convolution (with weight axes swapped).
pub(crate) fn raw_conv_input_grad(dy: &[f32], w: &[f32], g: &ConvGeom, dx: &mut [f32]) {
    let in_sp = g.in_sp();
    let out_sp = g.out_sp();
    let ksp = g.ksp();
    dx.par_chunks_mut(in_sp).enumerate().for_each(|(bc, slab)| {
        let b = bc / g.cin;
        let ci = bc % g.cin;
        let mut acc = vec![0f64; in_sp];
        for co in 0..g.cout {
            let dybase = (b * g.cout + co) * out_sp;
            let wbase = (co * g.cin + ci) * ksp;
            for kz in 0..g.k[0] {
                let (zlo, zhi) = out_range(g.ins[0], g.outs[0], kz, g.p[0], g.s[0]);
                for ky in 0..g.k[1] {
                    let (ylo, yhi) = out_range(g.ins[1], g.outs[1], ky, g.p[1], g.s[1]);
                    for kx in 0..g.k[2] {
                        let (xlo, xhi) = out_range(g.ins[2], g.outs[2], kx, g.p[2], g.s[2]);
                        if xlo >= xhi || ylo >= yhi || zlo >= zhi {
                            continue;
                        }
                        let wv = w[wbase + (kz * g.k[1] + ky) * g.k[2] + kx] as f64;
                        for zo in zlo..zhi {
                            let zi = zo * g.s[0] + kz - g.p[0];
                            for yo in ylo..yhi {
                                let yi = yo * g.s[1] + ky - g.p[1];
                                let xrow = (zi * g.ins[1] + yi) * g.ins[2];
                                let dyrow = dybase + (zo * g.outs[1] + yo) * g.outs[2];
                                if g.s[2] == 1 {
                                    let xi0 = xrow + (xlo + kx) - g.p[2];
                                    let n = xhi - xlo;
                                    for (a, &dv) in acc[xi0..xi0 + n]
                                        .iter_mut()
                                        .zip(&dy[dyrow + xlo..dyrow + xlo + n])
                                    {
                                        *a += wv * dv as f64;
                                    }
                                } else {
                                    for xo in xlo..xhi {
                                        let xi = xo * g.s[2] + kx - g.p[2];
                                        acc[xrow + xi] += wv * dy[dyrow + xo] as f64;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        for (o, a) in slab.iter_mut().zip(acc.iter()) {
            *o = *a as f32;
        }
    });
}

/// dw[a, c, :] = sum over batch and output positions of dy[b, a, o] * x[b, c, i(o)].
pub(crate) fn raw_conv_weight_grad(x: &[f32], dy: &[f32], g: &ConvGeom, dw: &mut [f32]) {
    let in_sp = g.in_sp();
    let out_sp = g.out_sp();
    let ksp = g.ksp();
    dw.par_chunks_mut(ksp).enumerate().for_each(|(cc, chunk)| {
        let co = cc / g.cin;
        let ci = cc % g.cin;
        for kz in 0..g.k[0] {
            let (zlo, zhi) = out_range(g.ins[0], g.outs[0], kz, g.p[0], g.s[0]);
            for ky in 0..g.k[1] {
                let (ylo, yhi) = out_range(g.ins[1], g.outs[1], ky, g.p[1], g.s[1]);
                for kx in 0..g.k[2] {
                    let (xlo, xhi) = out_range(g.ins[2], g.outs[2], kx, g.p[2], g.s[2]);
                    let mut acc = 0f64;
                    if xlo < xhi && ylo < yhi && zlo < zhi {
                        for b in 0..g.batch {
                            let xbase = (b * g.cin + ci) * in_sp;
                            let dybase = (b * g.cout + co) * out_sp;
                            for zo in zlo..zhi {
                                let zi = zo * g.s[0] + kz - g.p[0];
                                for yo in ylo..yhi {
                                    let yi = yo * g.s[1] + ky - g.p[1];
                                    let xrow = xbase + (zi * g.ins[1] + yi) * g.ins[2];
                                    let dyrow = dybase + (zo * g.outs[1] + yo) * g.outs[2];
                                    if g.s[2] == 1 {
                                        let xi0 = xrow + (xlo + kx) - g.p[2];
                                        let n = xhi - xlo;
                                        for (&dv, &xv) in dy[dyrow + xlo..dyrow + xlo + n]
                                            .iter()
                                            .zip(&x[xi0..xi0 + n])
                                        {
                                            acc += dv as f64 * xv as f64;
                                        }
                                    } else {
                                        for xo in xlo..xhi {
                                            let xi = xo * g.s[2] + kx - g.p[2];
                                            acc += dy[dyrow + xo] as f64 * x[xrow + xi] as f64;
                                        }
                                    }
                                }
                            }
                        }
                    }
                    chunk[(kz * g.k[1] + ky) * g.k[2] + kx] = acc as f32;
                }
            }
        }
    });
}

fn raw_conv_bias_grad(dy: &[f32], batch: usize, cout: usize, out_sp: usize, db: &mut [f32]) {
    for (co, d) in db.iter_mut().enumerate() {
        let mut acc = 0f64;
        for b in 0..batch {
            let base = (b * cout + co) * out_sp;
            for &v in &dy[base..base + out_sp] {
                acc += v as f64;
            }
        }
        *d = acc as f32;
    }
}

fn conv_geom(
    x_shape: &[usize],
    w_shape: &[usize],
    stride: usize,
    padding: usize,
    transpose: bool,
) -> Result<ConvGeom> {
    let (batch, channels, ins) = lift(x_shape)?;
    let spatial_rank = x_shape.len() - 2;
    if w_shape.len() != spatial_rank + 2 {
        return Err(Error::Shape(format!(
            "kernel rank {} does not match input rank {}",
            w_shape.len(),
            x_shape.len()
        )));
    }
    let (w_a, w_b) = (w_shape[0], w_shape[1]);
    let mut k = [1usize; 3];
    for (i, &kk) in w_shape[2..].iter().enumerate() {
        k[3 - spatial_rank + i] = kk;
    }
    if stride == 0 {
        return Err(Error::Argument("stride must be >= 1".into()));
    }
    let mut s = [1usize; 3];
    let mut p = [0usize; 3];
    for a in (3 - spatial_rank)..3 {
        s[a] = stride;
        p[a] = padding;
    }
    if transpose {
        // Weight layout (cin, cout, k...); x channels must equal cin.
        if w_a != channels {
            return Err(Error::Shape(format!(
                "transposed conv input has {channels} channels, kernel expects {w_a}"
            )));
        }
        let mut outs = [1usize; 3];
        for a in 0..3 {
            let grown = (ins[a] - 1) * s[a] + k[a];
            if grown < 2 * p[a] + 1 {
                return Err(Error::Shape(format!(
                    "transposed conv output collapses on axis {a}"
                )));
            }
            outs[a] = grown - 2 * p[a];
        }
        // Geometry is phrased from the convolution's point of view: the
        // transposed output plays the role of conv input.
        Ok(ConvGeom {
            batch,
            cin: w_b,
            cout: w_a,
            ins: outs,
            outs: ins,
            k,
            s,
            p,
        })
    } else {
        if w_b != channels {
            return Err(Error::Shape(format!(
                "conv input has {channels} channels, kernel expects {w_b}"
            )));
        }
        let mut outs = [1usize; 3];
        for a in 0..3 {
            outs[a] = if a < 3 - spatial_rank {
                1
            } else {
                conv_out_size(ins[a], k[a], p[a], s[a])?
            };
        }
        Ok(ConvGeom {
            batch,
            cin: channels,
            cout: w_a,
            ins,
            outs,
            k,
            s,
            p,
        })
    }
}

fn feature_shape(batch: usize, channels: usize, sp: &[usize; 3], rank: usize) -> Vec<usize> {
    if rank == 4 {
        vec![batch, channels, sp[1], sp[2]]
    } else {
        vec![batch, channels, sp[0], sp[1], sp[2]]
    }
}

fn pool_geom(x_shape: &[usize], k: usize, s: usize) -> Result<ConvGeom> {
    let (batch, channels, ins) = lift(x_shape)?;
    let spatial_rank = x_shape.len() - 2;
    if k == 0 || s == 0 {
        return Err(Error::Argument("pool kernel and stride must be >= 1".into()));
    }
    let mut kk = [1usize; 3];
    let mut ss = [1usize; 3];
    let mut outs = [1usize; 3];
    for a in 0..3 {
        if a >= 3 - spatial_rank {
            kk[a] = k;
            ss[a] = s;
            if ins[a] < k {
                return Err(Error::Shape(format!(
                    "spatial size {} smaller than pool kernel {k}",
                    ins[a]
                )));
            }
            outs[a] = (ins[a] - k) / s + 1;
        } else {
            outs[a] = 1;
        }
    }
    Ok(ConvGeom {
        batch,
        cin: channels,
        cout: channels,
        ins,
        outs,
        k: kk,
        s: ss,
        p: [0; 3],
    })
}

fn check_param_count(op: &OpKind, params: &[&Tensor], expect: usize) -> Result<()> {
    if params.len() != expect {
        return Err(Error::Graph(format!(
            "{op:?} expects {expect} parameters, got {}",
            params.len()
        )));
    }
    Ok(())
}

/// Evaluate one op. Returns the output tensor and, for scalar-producing
/// reductions, the exact f64 value of the scalar.
pub(crate) fn forward_op(
    op: &OpKind,
    inputs: &[&Tensor],
    params: &[&Tensor],
) -> Result<(Tensor, Option<f64>)> {
    match op {
        OpKind::Input(name) => Err(Error::Graph(format!(
            "input node '{name}' must be fed, not evaluated"
        ))),
        OpKind::Conv { stride, padding } => {
            check_param_count(op, params, 2)?;
            let x = inputs[0];
            let w = params[0];
            let b = params[1];
            if w.shape().len() >= 2 && w.shape()[2..].iter().any(|&kk| kk % 2 == 0) {
                return Err(Error::Argument(format!(
                    "conv kernel sizes must be odd, got {:?}",
                    &w.shape()[2..]
                )));
            }
            let g = conv_geom(x.shape(), w.shape(), *stride, *padding, false)?;
            if b.shape() != [g.cout] {
                return Err(Error::Shape(format!(
                    "conv bias shape {:?}, expected [{}]",
                    b.shape(),
                    g.cout
                )));
            }
            let mut out = Tensor::zeros(feature_shape(g.batch, g.cout, &g.outs, x.rank()));
            raw_conv_fwd(x.data(), w.data(), Some(b.data()), &g, out.data_mut());
            Ok((out, None))
        }
        OpKind::ConvTranspose { stride, padding } => {
            check_param_count(op, params, 2)?;
            let x = inputs[0];
            let w = params[0];
            let b = params[1];
            let g = conv_geom(x.shape(), w.shape(), *stride, *padding, true)?;
            if b.shape() != [g.cin] {
                return Err(Error::Shape(format!(
                    "transposed conv bias shape {:?}, expected [{}]",
                    b.shape(),
                    g.cin
                )));
            }
            // g.cin is the transposed output channel count; apply the
            // adjoint kernel then add the bias.
            let mut out = Tensor::zeros(feature_shape(g.batch, g.cin, &g.ins, x.rank()));
            raw_conv_input_grad(x.data(), w.data(), &g, out.data_mut());
            let sp = g.in_sp();
            for bi in 0..g.batch {
                for c in 0..g.cin {
                    let base = (bi * g.cin + c) * sp;
                    let bv = b.data()[c];
                    for v in &mut out.data_mut()[base..base + sp] {
                        *v += bv;
                    }
                }
            }
            Ok((out, None))
        }
        OpKind::MaxPool { k, s } => {
            let x = inputs[0];
            let g = pool_geom(x.shape(), *k, *s)?;
            let mut out = Tensor::zeros(feature_shape(g.batch, g.cout, &g.outs, x.rank()));
            pool_forward(x.data(), &g, out.data_mut(), true);
            Ok((out, None))
        }
        OpKind::AvgPool { k, s } => {
            let x = inputs[0];
            let g = pool_geom(x.shape(), *k, *s)?;
            let mut out = Tensor::zeros(feature_shape(g.batch, g.cout, &g.outs, x.rank()));
            pool_forward(x.data(), &g, out.data_mut(), false);
            Ok((out, None))
        }
        OpKind::InstanceNorm { eps } => {
            check_param_count(op, params, 2)?;
            norm_forward(inputs[0], params[0], params[1], *eps, true)
        }
        OpKind::BatchNorm { eps } => {
            check_param_count(op, params, 2)?;
            norm_forward(inputs[0], params[0], params[1], *eps, false)
        }
        OpKind::Relu => {
            let mut out = inputs[0].clone();
            out.grad = None;
            for v in out.data_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
            Ok((out, None))
        }
        OpKind::LeakyRelu { slope } => {
            let mut out = inputs[0].clone();
            out.grad = None;
            for v in out.data_mut() {
                if *v < 0.0 {
                    *v *= slope;
                }
            }
            Ok((out, None))
        }
        OpKind::SoftmaxChannels => {
            let x = inputs[0];
            if x.rank() < 2 {
                return Err(Error::Shape("softmax needs (batch, channels, ...)".into()));
            }
            let b = x.shape()[0];
            let c = x.shape()[1];
            let sp = x.spatial_len();
            let mut out = x.clone();
            out.grad = None;
            let data = out.data_mut();
            for bi in 0..b {
                for pos in 0..sp {
                    let base = bi * c * sp + pos;
                    let mut mx = f32::MIN;
                    for ci in 0..c {
                        mx = mx.max(data[base + ci * sp]);
                    }
                    let mut sum = 0f64;
                    for ci in 0..c {
                        let e = ((data[base + ci * sp] - mx) as f64).exp();
                        data[base + ci * sp] = e as f32;
                        sum += e;
                    }
                    for ci in 0..c {
                        data[base + ci * sp] = (data[base + ci * sp] as f64 / sum) as f32;
                    }
                }
            }
            Ok((out, None))
        }
        OpKind::ConcatChannels => {
            if inputs.is_empty() {
                return Err(Error::Graph("concat of zero inputs".into()));
            }
            let first = inputs[0];
            let b = first.shape()[0];
            let sp = first.spatial_len();
            let mut channels = 0;
            for t in inputs {
                if t.rank() != first.rank()
                    || t.shape()[0] != b
                    || t.shape()[2..] != first.shape()[2..]
                {
                    return Err(Error::Shape(format!(
                        "concat inputs disagree: {:?} vs {:?}",
                        t.shape(),
                        first.shape()
                    )));
                }
                channels += t.shape()[1];
            }
            let mut shape = first.shape().to_vec();
            shape[1] = channels;
            let mut out = Tensor::zeros(shape);
            let od = out.data_mut();
            for bi in 0..b {
                let mut co = 0;
                for t in inputs {
                    let c = t.shape()[1];
                    let src = &t.data()[bi * c * sp..(bi + 1) * c * sp];
                    let dst_base = (bi * channels + co) * sp;
                    od[dst_base..dst_base + c * sp].copy_from_slice(src);
                    co += c;
                }
            }
            Ok((out, None))
        }
        OpKind::Dense => {
            check_param_count(op, params, 2)?;
            let x = inputs[0];
            let w = params[0];
            let bias = params[1];
            if x.rank() != 2 || w.rank() != 2 || x.shape()[1] != w.shape()[1] {
                return Err(Error::Shape(format!(
                    "dense expects x (b, f) and w (o, f); got {:?} and {:?}",
                    x.shape(),
                    w.shape()
                )));
            }
            let (b, f) = (x.shape()[0], x.shape()[1]);
            let o = w.shape()[0];
            if bias.shape() != [o] {
                return Err(Error::Shape("dense bias shape mismatch".into()));
            }
            let mut out = Tensor::zeros(vec![b, o]);
            let od = out.data_mut();
            for bi in 0..b {
                for oi in 0..o {
                    let mut acc = bias.data()[oi] as f64;
                    let xrow = &x.data()[bi * f..(bi + 1) * f];
                    let wrow = &w.data()[oi * f..(oi + 1) * f];
                    for (xv, wv) in xrow.iter().zip(wrow.iter()) {
                        acc += *xv as f64 * *wv as f64;
                    }
                    od[bi * o + oi] = acc as f32;
                }
            }
            Ok((out, None))
        }
        OpKind::GlobalAvgPool => {
            let x = inputs[0];
            if x.rank() < 3 {
                return Err(Error::Shape("global_avg_pool needs spatial dims".into()));
            }
            let b = x.shape()[0];
            let c = x.shape()[1];
            let sp = x.spatial_len();
            let mut out = Tensor::zeros(vec![b, c]);
            let od = out.data_mut();
            for bc in 0..b * c {
                let mut acc = 0f64;
                for &v in &x.data()[bc * sp..(bc + 1) * sp] {
                    acc += v as f64;
                }
                od[bc] = (acc / sp as f64) as f32;
            }
            Ok((out, None))
        }
        OpKind::Sum => {
            let mut acc = 0f64;
            for &v in inputs[0].data() {
                acc += v as f64;
            }
            Ok((Tensor::scalar(acc as f32), Some(acc)))
        }
        OpKind::Mul => {
            let (a, b) = (inputs[0], inputs[1]);
            if a.shape() != b.shape() {
                return Err(Error::Shape(format!(
                    "elementwise mul of {:?} and {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
            let mut out = a.clone();
            out.grad = None;
            for (o, &bv) in out.data_mut().iter_mut().zip(b.data()) {
                *o *= bv;
            }
            Ok((out, None))
        }
        OpKind::Scale { c } => {
            let mut out = inputs[0].clone();
            out.grad = None;
            for v in out.data_mut() {
                *v *= c;
            }
            Ok((out, None))
        }
        OpKind::DiceCeLoss {
            dice_weight,
            ce_weight,
        } => {
            let (loss, _, _) = dice_ce_forward(inputs[0], inputs[1], *dice_weight, *ce_weight)?;
            Ok((Tensor::scalar(loss as f32), Some(loss)))
        }
    }
}

fn pool_forward(x: &[f32], g: &ConvGeom, out: &mut [f32], is_max: bool) {
    let in_sp = g.in_sp();
    let out_sp = g.out_sp();
    let wsize = (g.k[0] * g.k[1] * g.k[2]) as f64;
    out.par_chunks_mut(out_sp).enumerate().for_each(|(bc, slab)| {
        let base = bc * in_sp;
        let mut idx = 0;
        for zo in 0..g.outs[0] {
            for yo in 0..g.outs[1] {
                for xo in 0..g.outs[2] {
                    let z0 = zo * g.s[0];
                    let y0 = yo * g.s[1];
                    let x0 = xo * g.s[2];
                    if is_max {
                        let mut best = f32::MIN;
                        for kz in 0..g.k[0] {
                            for ky in 0..g.k[1] {
                                let row = base + ((z0 + kz) * g.ins[1] + y0 + ky) * g.ins[2] + x0;
                                for kx in 0..g.k[2] {
                                    let v = x[row + kx];
                                    if v > best {
                                        best = v;
                                    }
                                }
                            }
                        }
                        slab[idx] = best;
                    } else {
                        let mut acc = 0f64;
                        for kz in 0..g.k[0] {
                            for ky in 0..g.k[1] {
                                let row = base + ((z0 + kz) * g.ins[1] + y0 + ky) * g.ins[2] + x0;
                                for kx in 0..g.k[2] {
                                    acc += x[row + kx] as f64;
                                }
                            }
                        }
                        slab[idx] = (acc / wsize) as f32;
                    }
                    idx += 1;
                }
            }
        }
    });
}

fn norm_forward(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f32,
    per_instance: bool,
) -> Result<(Tensor, Option<f64>)> {
    if x.rank() < 3 {
        return Err(Error::Shape("normalization needs spatial dims".into()));
    }
    let b = x.shape()[0];
    let c = x.shape()[1];
    let sp = x.spatial_len();
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::Shape(format!(
            "norm affine params must have shape [{c}]"
        )));
    }
    let mut out = x.clone();
    out.grad = None;
    let stats = norm_stats(x, eps, per_instance);
    let data = out.data_mut();
    for bi in 0..b {
        for ci in 0..c {
            let (mean, inv) = stats[if per_instance { bi * c + ci } else { ci }];
            let g = gamma.data()[ci] as f64;
            let bt = beta.data()[ci] as f64;
            let base = (bi * c + ci) * sp;
            for v in &mut data[base..base + sp] {
                *v = (((*v as f64 - mean) * inv) * g + bt) as f32;
            }
        }
    }
    Ok((out, None))
}

/// (mean, 1/sqrt(var+eps)) per (batch, channel) or per channel.
fn norm_stats(x: &Tensor, eps: f32, per_instance: bool) -> Vec<(f64, f64)> {
    let b = x.shape()[0];
    let c = x.shape()[1];
    let sp = x.spatial_len();
    if per_instance {
        (0..b * c)
            .map(|bc| {
                let slab = &x.data()[bc * sp..(bc + 1) * sp];
                moments(slab.iter().copied(), sp, eps)
            })
            .collect()
    } else {
        (0..c)
            .map(|ci| {
                let it = (0..b).flat_map(|bi| {
                    let base = (bi * c + ci) * sp;
                    x.data()[base..base + sp].iter().copied()
                });
                moments(it, b * sp, eps)
            })
            .collect()
    }
}

fn moments(vals: impl Iterator<Item = f32> + Clone, n: usize, eps: f32) -> (f64, f64) {
    let mut mean = 0f64;
    for v in vals.clone() {
        mean += v as f64;
    }
    mean /= n as f64;
    let mut var = 0f64;
    for v in vals {
        let d = v as f64 - mean;
        var += d * d;
    }
    var /= n as f64;
    (mean, 1.0 / (var + eps as f64).sqrt())
}

/// Dice+CE loss over 2-channel softmax probabilities.
/// Returns (loss, per-batch intersections, per-batch union sums).
pub(crate) fn dice_ce_forward(
    probs: &Tensor,
    target: &Tensor,
    dice_weight: f32,
    ce_weight: f32,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    if probs.rank() < 2 || probs.shape()[1] != 2 {
        return Err(Error::Shape(format!(
            "loss expects 2-channel probabilities, got shape {:?}",
            probs.shape()
        )));
    }
    let b = probs.shape()[0];
    let sp = probs.spatial_len();
    if target.numel() != b * sp || target.shape()[0] != b {
        return Err(Error::Shape(format!(
            "target shape {:?} does not match probabilities {:?}",
            target.shape(),
            probs.shape()
        )));
    }
    let n = b * sp;
    let mut inter = vec![0f64; b];
    let mut union = vec![0f64; b];
    let mut ce = 0f64;
    for bi in 0..b {
        let p0 = &probs.data()[(bi * 2) * sp..(bi * 2 + 1) * sp];
        let p1 = &probs.data()[(bi * 2 + 1) * sp..(bi * 2 + 2) * sp];
        let t = &target.data()[bi * sp..(bi + 1) * sp];
        let mut i_acc = 0f64;
        let mut u_acc = 0f64;
        for j in 0..sp {
            let tv = t[j] as f64;
            let pv = p1[j] as f64;
            i_acc += pv * tv;
            u_acc += pv + tv;
            let p_true = if tv > 0.5 { pv } else { p0[j] as f64 };
            ce -= p_true.max(CE_CLAMP).ln();
        }
        inter[bi] = i_acc;
        union[bi] = u_acc;
    }
    ce /= n as f64;
    let mut dice_mean = 0f64;
    for bi in 0..b {
        dice_mean += (2.0 * inter[bi] + DICE_EPS) / (union[bi] + DICE_EPS);
    }
    dice_mean /= b as f64;
    let loss = dice_weight as f64 * (1.0 - dice_mean) + ce_weight as f64 * ce;
    Ok((loss, inter, union))
}

/// Shape-carrying f64 buffer for the shadow evaluator.
#[derive(Debug, Clone)]
pub(crate) struct ValF64 {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl ValF64 {
    pub fn from_tensor(t: &Tensor) -> ValF64 {
        ValF64 {
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|&v| v as f64).collect(),
        }
    }

    fn rank(&self) -> usize {
        self.shape.len()
    }

    fn spatial_len(&self) -> usize {
        self.shape[2..].iter().product()
    }

    fn zeros(shape: Vec<usize>) -> ValF64 {
        let n = shape.iter().product();
        ValF64 {
            shape,
            data: vec![0.0; n],
        }
    }

    fn scalar(v: f64) -> ValF64 {
        ValF64 {
            shape: vec![1],
            data: vec![v],
        }
    }
}

fn naive_conv_f64(x: &[f64], w: &[f64], bias: Option<&[f64]>, g: &ConvGeom, out: &mut [f64]) {
    let in_sp = g.in_sp();
    let out_sp = g.out_sp();
    let ksp = g.ksp();
    for b in 0..g.batch {
        for co in 0..g.cout {
            let obase = (b * g.cout + co) * out_sp;
            for zo in 0..g.outs[0] {
                for yo in 0..g.outs[1] {
                    for xo in 0..g.outs[2] {
                        let mut acc = bias.map_or(0.0, |bb| bb[co]);
                        for ci in 0..g.cin {
                            let xbase = (b * g.cin + ci) * in_sp;
                            let wbase = (co * g.cin + ci) * ksp;
                            for kz in 0..g.k[0] {
                                let zi = (zo * g.s[0] + kz) as isize - g.p[0] as isize;
                                if zi < 0 || zi >= g.ins[0] as isize {
                                    continue;
                                }
                                for ky in 0..g.k[1] {
                                    let yi = (yo * g.s[1] + ky) as isize - g.p[1] as isize;
                                    if yi < 0 || yi >= g.ins[1] as isize {
                                        continue;
                                    }
                                    for kx in 0..g.k[2] {
                                        let xi =
                                            (xo * g.s[2] + kx) as isize - g.p[2] as isize;
                                        if xi < 0 || xi >= g.ins[2] as isize {
                                            continue;
                                        }
                                        acc += w[wbase + (kz * g.k[1] + ky) * g.k[2] + kx]
                                            * x[xbase
                                                + (zi as usize * g.ins[1] + yi as usize)
                                                    * g.ins[2]
                                                + xi as usize];
                                    }
                                }
                            }
                        }
                        out[obase + (zo * g.outs[1] + yo) * g.outs[2] + xo] = acc;
                    }
                }
            }
        }
    }
}

/// Scatter form of the transposed convolution; `g` is phrased from the
/// convolution's point of view (outs = input grid, ins = output grid).
fn naive_tconv_f64(x: &[f64], w: &[f64], bias: &[f64], g: &ConvGeom, out: &mut [f64]) {
    let in_sp = g.in_sp();
    let out_sp = g.out_sp();
    let ksp = g.ksp();
    for b in 0..g.batch {
        for ci in 0..g.cin {
            let base = (b * g.cin + ci) * in_sp;
            for v in &mut out[base..base + in_sp] {
                *v = bias[ci];
            }
        }
    }
    for b in 0..g.batch {
        for co in 0..g.cout {
            let xbase = (b * g.cout + co) * out_sp;
            for ci in 0..g.cin {
                let wbase = (co * g.cin + ci) * ksp;
                let obase = (b * g.cin + ci) * in_sp;
                for zo in 0..g.outs[0] {
                    for yo in 0..g.outs[1] {
                        for xo in 0..g.outs[2] {
                            let xv = x[xbase + (zo * g.outs[1] + yo) * g.outs[2] + xo];
                            for kz in 0..g.k[0] {
                                let zi = (zo * g.s[0] + kz) as isize - g.p[0] as isize;
                                if zi < 0 || zi >= g.ins[0] as isize {
                                    continue;
                                }
                                for ky in 0..g.k[1] {
                                    let yi = (yo * g.s[1] + ky) as isize - g.p[1] as isize;
                                    if yi < 0 || yi >= g.ins[1] as isize {
                                        continue;
                                    }
                                    for kx in 0..g.k[2] {
                                        let xi =
                                            (xo * g.s[2] + kx) as isize - g.p[2] as isize;
                                        if xi < 0 || xi >= g.ins[2] as isize {
                                            continue;
                                        }
                                        out[obase
                                            + (zi as usize * g.ins[1] + yi as usize) * g.ins[2]
                                            + xi as usize] += w
                                            [wbase + (kz * g.k[1] + ky) * g.k[2] + kx]
                                            * xv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn norm_stats_f64(x: &ValF64, eps: f64, per_instance: bool) -> Vec<(f64, f64)> {
    let b = x.shape[0];
    let c = x.shape[1];
    let sp = x.spatial_len();
    let groups: Vec<Vec<usize>> = if per_instance {
        (0..b * c).map(|bc| vec![bc]).collect()
    } else {
        (0..c)
            .map(|ci| (0..b).map(|bi| bi * c + ci).collect())
            .collect()
    };
    groups
        .iter()
        .map(|slabs| {
            let n = (slabs.len() * sp) as f64;
            let mut mean = 0f64;
            for &bc in slabs {
                for &v in &x.data[bc * sp..(bc + 1) * sp] {
                    mean += v;
                }
            }
            mean /= n;
            let mut var = 0f64;
            for &bc in slabs {
                for &v in &x.data[bc * sp..(bc + 1) * sp] {
                    var += (v - mean) * (v - mean);
                }
            }
            var /= n;
            (mean, 1.0 / (var + eps).sqrt())
        })
        .collect()
}

fn norm_forward_f64(
    x: &ValF64,
    gamma: &ValF64,
    beta: &ValF64,
    eps: f64,
    per_instance: bool,
) -> ValF64 {
    let b = x.shape[0];
    let c = x.shape[1];
    let sp = x.spatial_len();
    let stats = norm_stats_f64(x, eps, per_instance);
    let mut out = x.clone();
    for bi in 0..b {
        for ci in 0..c {
            let (mean, inv) = stats[if per_instance { bi * c + ci } else { ci }];
            let base = (bi * c + ci) * sp;
            for v in &mut out.data[base..base + sp] {
                *v = (*v - mean) * inv * gamma.data[ci] + beta.data[ci];
            }
        }
    }
    out
}

/// Evaluate one op in float64 end to end. Semantically identical to
/// [`forward_op`] but free of float32 intermediate rounding; serves as the
/// finite-difference oracle in gradient checks and as an independent
/// reference for the optimized kernels.
pub(crate) fn forward_op_f64(
    op: &OpKind,
    inputs: &[&ValF64],
    params: &[&ValF64],
) -> Result<ValF64> {
    match op {
        OpKind::Input(name) => Err(Error::Graph(format!(
            "input node '{name}' must be fed, not evaluated"
        ))),
        OpKind::Conv { stride, padding } => {
            let (x, w, b) = (inputs[0], params[0], params[1]);
            let g = conv_geom(&x.shape, &w.shape, *stride, *padding, false)?;
            let mut out = ValF64::zeros(feature_shape(g.batch, g.cout, &g.outs, x.rank()));
            naive_conv_f64(&x.data, &w.data, Some(&b.data), &g, &mut out.data);
            Ok(out)
        }
        OpKind::ConvTranspose { stride, padding } => {
            let (x, w, b) = (inputs[0], params[0], params[1]);
            let g = conv_geom(&x.shape, &w.shape, *stride, *padding, true)?;
            let mut out = ValF64::zeros(feature_shape(g.batch, g.cin, &g.ins, x.rank()));
            naive_tconv_f64(&x.data, &w.data, &b.data, &g, &mut out.data);
            Ok(out)
        }
        OpKind::MaxPool { k, s } | OpKind::AvgPool { k, s } => {
            let x = inputs[0];
            let g = pool_geom(&x.shape, *k, *s)?;
            let is_max = matches!(op, OpKind::MaxPool { .. });
            let mut out = ValF64::zeros(feature_shape(g.batch, g.cout, &g.outs, x.rank()));
            let in_sp = g.in_sp();
            let out_sp = g.out_sp();
            let wsize = (g.k[0] * g.k[1] * g.k[2]) as f64;
            for bc in 0..g.batch * g.cout {
                let base = bc * in_sp;
                let mut idx = bc * out_sp;
                for zo in 0..g.outs[0] {
                    for yo in 0..g.outs[1] {
                        for xo in 0..g.outs[2] {
                            let mut best = f64::MIN;
                            let mut acc = 0f64;
                            for kz in 0..g.k[0] {
                                for ky in 0..g.k[1] {
                                    let row = base
                                        + ((zo * g.s[0] + kz) * g.ins[1] + yo * g.s[1] + ky)
                                            * g.ins[2]
                                        + xo * g.s[2];
                                    for kx in 0..g.k[2] {
                                        let v = x.data[row + kx];
                                        best = best.max(v);
                                        acc += v;
                                    }
                                }
                            }
                            out.data[idx] = if is_max { best } else { acc / wsize };
                            idx += 1;
                        }
                    }
                }
            }
            Ok(out)
        }
        OpKind::InstanceNorm { eps } => Ok(norm_forward_f64(
            inputs[0],
            params[0],
            params[1],
            *eps as f64,
            true,
        )),
        OpKind::BatchNorm { eps } => Ok(norm_forward_f64(
            inputs[0],
            params[0],
            params[1],
            *eps as f64,
            false,
        )),
        OpKind::Relu => {
            let mut out = inputs[0].clone();
            for v in &mut out.data {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
            Ok(out)
        }
        OpKind::LeakyRelu { slope } => {
            let mut out = inputs[0].clone();
            for v in &mut out.data {
                if *v < 0.0 {
                    *v *= *slope as f64;
                }
            }
            Ok(out)
        }
        OpKind::SoftmaxChannels => {
            let x = inputs[0];
            let b = x.shape[0];
            let c = x.shape[1];
            let sp = x.spatial_len();
            let mut out = x.clone();
            for bi in 0..b {
                for pos in 0..sp {
                    let base = bi * c * sp + pos;
                    let mut mx = f64::MIN;
                    for ci in 0..c {
                        mx = mx.max(out.data[base + ci * sp]);
                    }
                    let mut sum = 0f64;
                    for ci in 0..c {
                        let e = (out.data[base + ci * sp] - mx).exp();
                        out.data[base + ci * sp] = e;
                        sum += e;
                    }
                    for ci in 0..c {
                        out.data[base + ci * sp] /= sum;
                    }
                }
            }
            Ok(out)
        }
        OpKind::ConcatChannels => {
            let first = inputs[0];
            let b = first.shape[0];
            let sp = first.spatial_len();
            let channels: usize = inputs.iter().map(|t| t.shape[1]).sum();
            let mut shape = first.shape.clone();
            shape[1] = channels;
            let mut out = ValF64::zeros(shape);
            for bi in 0..b {
                let mut co = 0;
                for t in inputs {
                    let c = t.shape[1];
                    let dst = (bi * channels + co) * sp;
                    out.data[dst..dst + c * sp]
                        .copy_from_slice(&t.data[bi * c * sp..(bi + 1) * c * sp]);
                    co += c;
                }
            }
            Ok(out)
        }
        OpKind::Dense => {
            let (x, w, bias) = (inputs[0], params[0], params[1]);
            let (b, f) = (x.shape[0], x.shape[1]);
            let o = w.shape[0];
            let mut out = ValF64::zeros(vec![b, o]);
            for bi in 0..b {
                for oi in 0..o {
                    let mut acc = bias.data[oi];
                    for fi in 0..f {
                        acc += x.data[bi * f + fi] * w.data[oi * f + fi];
                    }
                    out.data[bi * o + oi] = acc;
                }
            }
            Ok(out)
        }
        OpKind::GlobalAvgPool => {
            let x = inputs[0];
            let sp = x.spatial_len();
            let bc = x.shape[0] * x.shape[1];
            let mut out = ValF64::zeros(vec![x.shape[0], x.shape[1]]);
            for i in 0..bc {
                out.data[i] = x.data[i * sp..(i + 1) * sp].iter().sum::<f64>() / sp as f64;
            }
            Ok(out)
        }
        OpKind::Sum => Ok(ValF64::scalar(inputs[0].data.iter().sum())),
        OpKind::Mul => {
            let mut out = inputs[0].clone();
            for (o, &bv) in out.data.iter_mut().zip(&inputs[1].data) {
                *o *= bv;
            }
            Ok(out)
        }
        OpKind::Scale { c } => {
            let mut out = inputs[0].clone();
            for v in &mut out.data {
                *v *= *c as f64;
            }
            Ok(out)
        }
        OpKind::DiceCeLoss {
            dice_weight,
            ce_weight,
        } => {
            let (probs, target) = (inputs[0], inputs[1]);
            let b = probs.shape[0];
            let sp = probs.spatial_len();
            let n = (b * sp) as f64;
            let mut ce = 0f64;
            let mut dice_mean = 0f64;
            for bi in 0..b {
                let p0 = &probs.data[(bi * 2) * sp..(bi * 2 + 1) * sp];
                let p1 = &probs.data[(bi * 2 + 1) * sp..(bi * 2 + 2) * sp];
                let t = &target.data[bi * sp..(bi + 1) * sp];
                let mut inter = 0f64;
                let mut union = 0f64;
                for j in 0..sp {
                    inter += p1[j] * t[j];
                    union += p1[j] + t[j];
                    let p_true = if t[j] > 0.5 { p1[j] } else { p0[j] };
                    ce -= p_true.max(CE_CLAMP).ln();
                }
                dice_mean += (2.0 * inter + DICE_EPS) / (union + DICE_EPS);
            }
            ce /= n;
            dice_mean /= b as f64;
            Ok(ValF64::scalar(
                *dice_weight as f64 * (1.0 - dice_mean) + *ce_weight as f64 * ce,
            ))
        }
    }
}

/// Gradients of one op. Returns per-input and per-parameter gradient buffers
/// (None where no gradient flows, e.g. loss targets).
#[allow(clippy::type_complexity)]
pub(crate) fn backward_op(
    op: &OpKind,
    inputs: &[&Tensor],
    params: &[&Tensor],
    output: &Tensor,
    dy: &[f32],
) -> Result<(Vec<Option<Vec<f32>>>, Vec<Option<Vec<f32>>>)> {
    match op {
        OpKind::Input(_) => Ok((vec![], vec![])),
        OpKind::Conv { stride, padding } => {
            let x = inputs[0];
            let w = params[0];
            let g = conv_geom(x.shape(), w.shape(), *stride, *padding, false)?;
            let mut dx = vec![0f32; x.numel()];
            raw_conv_input_grad(dy, w.data(), &g, &mut dx);
            let mut dw = vec![0f32; w.numel()];
            raw_conv_weight_grad(x.data(), dy, &g, &mut dw);
            let mut db = vec![0f32; g.cout];
            raw_conv_bias_grad(dy, g.batch, g.cout, g.out_sp(), &mut db);
            Ok((vec![Some(dx)], vec![Some(dw), Some(db)]))
        }
        OpKind::ConvTranspose { stride, padding } => {
            let x = inputs[0];
            let w = params[0];
            let g = conv_geom(x.shape(), w.shape(), *stride, *padding, true)?;
            // Forward was the adjoint; the input gradient is the plain conv.
            let mut dx = vec![0f32; x.numel()];
            raw_conv_fwd(dy, w.data(), None, &g, &mut dx);
            // dw: swap the roles of x and dy in the weight-gradient kernel.
            let mut dw = vec![0f32; w.numel()];
            raw_conv_weight_grad(dy, x.data(), &g, &mut dw);
            let mut db = vec![0f32; g.cin];
            raw_conv_bias_grad(dy, g.batch, g.cin, g.in_sp(), &mut db);
            Ok((vec![Some(dx)], vec![Some(dw), Some(db)]))
        }
        OpKind::MaxPool { k, s } => {
            let x = inputs[0];
            let g = pool_geom(x.shape(), *k, *s)?;
            let mut dx = vec![0f32; x.numel()];
            maxpool_backward(x.data(), dy, &g, &mut dx);
            Ok((vec![Some(dx)], vec![]))
        }
        OpKind::AvgPool { k, s } => {
            let x = inputs[0];
            let g = pool_geom(x.shape(), *k, *s)?;
            let mut dx = vec![0f32; x.numel()];
            avgpool_backward(dy, &g, &mut dx);
            Ok((vec![Some(dx)], vec![]))
        }
        OpKind::InstanceNorm { eps } => norm_backward(inputs[0], params[0], dy, *eps, true),
        OpKind::BatchNorm { eps } => norm_backward(inputs[0], params[0], dy, *eps, false),
        OpKind::Relu => {
            let x = inputs[0];
            let dx = x
                .data()
                .iter()
                .zip(dy.iter())
                .map(|(&xv, &d)| if xv > 0.0 { d } else { 0.0 })
                .collect();
            Ok((vec![Some(dx)], vec![]))
        }
        OpKind::LeakyRelu { slope } => {
            let x = inputs[0];
            let dx = x
                .data()
                .iter()
                .zip(dy.iter())
                .map(|(&xv, &d)| if xv > 0.0 { d } else { d * slope })
                .collect();
            Ok((vec![Some(dx)], vec![]))
        }
        OpKind::SoftmaxChannels => {
            let y = output;
            let b = y.shape()[0];
            let c = y.shape()[1];
            let sp = y.spatial_len();
            let mut dx = vec![0f32; y.numel()];
            for bi in 0..b {
                for pos in 0..sp {
                    let base = bi * c * sp + pos;
                    let mut dot = 0f64;
                    for ci in 0..c {
                        let i = base + ci * sp;
                        dot += dy[i] as f64 * y.data()[i] as f64;
                    }
                    for ci in 0..c {
                        let i = base + ci * sp;
                        dx[i] = (y.data()[i] as f64 * (dy[i] as f64 - dot)) as f32;
                    }
                }
            }
            Ok((vec![Some(dx)], vec![]))
        }
        OpKind::ConcatChannels => {
            let b = inputs[0].shape()[0];
            let sp = inputs[0].spatial_len();
            let channels: usize = inputs.iter().map(|t| t.shape()[1]).sum();
            let mut grads: Vec<Option<Vec<f32>>> = inputs
                .iter()
                .map(|t| Some(vec![0f32; t.numel()]))
                .collect();
            for bi in 0..b {
                let mut co = 0;
                for (t, g) in inputs.iter().zip(grads.iter_mut()) {
                    let c = t.shape()[1];
                    let src = &dy[(bi * channels + co) * sp..(bi * channels + co + c) * sp];
                    let dst = &mut g.as_mut().unwrap()[bi * c * sp..(bi + 1) * c * sp];
                    dst.copy_from_slice(src);
                    co += c;
                }
            }
            Ok((grads, vec![]))
        }
        OpKind::Dense => {
            let x = inputs[0];
            let w = params[0];
            let (b, f) = (x.shape()[0], x.shape()[1]);
            let o = w.shape()[0];
            let mut dx = vec![0f32; b * f];
            let mut dw = vec![0f32; o * f];
            let mut db = vec![0f32; o];
            for bi in 0..b {
                for oi in 0..o {
                    let d = dy[bi * o + oi] as f64;
                    db[oi] = (db[oi] as f64 + d) as f32;
                    for fi in 0..f {
                        dx[bi * f + fi] =
                            (dx[bi * f + fi] as f64 + d * w.data()[oi * f + fi] as f64) as f32;
                        dw[oi * f + fi] =
                            (dw[oi * f + fi] as f64 + d * x.data()[bi * f + fi] as f64) as f32;
                    }
                }
            }
            Ok((vec![Some(dx)], vec![Some(dw), Some(db)]))
        }
        OpKind::GlobalAvgPool => {
            let x = inputs[0];
            let sp = x.spatial_len();
            let bc = x.shape()[0] * x.shape()[1];
            let mut dx = vec![0f32; x.numel()];
            for i in 0..bc {
                let d = dy[i] / sp as f32;
                for v in &mut dx[i * sp..(i + 1) * sp] {
                    *v = d;
                }
            }
            Ok((vec![Some(dx)], vec![]))
        }
        OpKind::Sum => {
            let d = dy[0];
            Ok((vec![Some(vec![d; inputs[0].numel()])], vec![]))
        }
        OpKind::Mul => {
            let (a, b) = (inputs[0], inputs[1]);
            let da = b.data().iter().zip(dy.iter()).map(|(&bv, &d)| bv * d).collect();
            let db = a.data().iter().zip(dy.iter()).map(|(&av, &d)| av * d).collect();
            Ok((vec![Some(da), Some(db)], vec![]))
        }
        OpKind::Scale { c } => {
            let dx = dy.iter().map(|&d| d * c).collect();
            Ok((vec![Some(dx)], vec![]))
        }
        OpKind::DiceCeLoss {
            dice_weight,
            ce_weight,
        } => {
            let probs = inputs[0];
            let target = inputs[1];
            let (_, inter, union) =
                dice_ce_forward(probs, target, *dice_weight, *ce_weight)?;
            let b = probs.shape()[0];
            let sp = probs.spatial_len();
            let n = (b * sp) as f64;
            let d0 = dy[0] as f64;
            let dw = *dice_weight as f64;
            let cw = *ce_weight as f64;
            let mut dp = vec![0f32; probs.numel()];
            for bi in 0..b {
                let u_eps = union[bi] + DICE_EPS;
                let two_i_eps = 2.0 * inter[bi] + DICE_EPS;
                let p0 = &probs.data()[(bi * 2) * sp..(bi * 2 + 1) * sp];
                let p1 = &probs.data()[(bi * 2 + 1) * sp..(bi * 2 + 2) * sp];
                let t = &target.data()[bi * sp..(bi + 1) * sp];
                for j in 0..sp {
                    let tv = t[j] as f64;
                    // d(dice_b)/d p1 = (2 t (U+eps) - (2I+eps)) / (U+eps)^2
                    let ddice = (2.0 * tv * u_eps - two_i_eps) / (u_eps * u_eps);
                    let mut g1 = -d0 * dw / b as f64 * ddice;
                    let mut g0 = 0f64;
                    if tv > 0.5 {
                        g1 -= d0 * cw / (n * (p1[j] as f64).max(CE_CLAMP));
                    } else {
                        g0 -= d0 * cw / (n * (p0[j] as f64).max(CE_CLAMP));
                    }
                    dp[(bi * 2) * sp + j] = g0 as f32;
                    dp[(bi * 2 + 1) * sp + j] = g1 as f32;
                }
            }
            Ok((vec![Some(dp), None], vec![]))
        }
    }
}

fn maxpool_backward(x: &[f32], dy: &[f32], g: &ConvGeom, dx: &mut [f32]) {
    let in_sp = g.in_sp();
    let out_sp = g.out_sp();
    dx.par_chunks_mut(in_sp).enumerate().for_each(|(bc, slab)| {
        let base = bc * in_sp;
        let dybase = bc * out_sp;
        let mut idx = 0;
        for zo in 0..g.outs[0] {
            for yo in 0..g.outs[1] {
                for xo in 0..g.outs[2] {
                    let z0 = zo * g.s[0];
                    let y0 = yo * g.s[1];
                    let x0 = xo * g.s[2];
                    let mut best = f32::MIN;
                    let mut arg = 0usize;
                    for kz in 0..g.k[0] {
                        for ky in 0..g.k[1] {
                            let row = ((z0 + kz) * g.ins[1] + y0 + ky) * g.ins[2] + x0;
                            for kx in 0..g.k[2] {
                                let v = x[base + row + kx];
                                if v > best {
                                    best = v;
                                    arg = row + kx;
                                }
                            }
                        }
                    }
                    slab[arg] += dy[dybase + idx];
                    idx += 1;
                }
            }
        }
    });
}

fn avgpool_backward(dy: &[f32], g: &ConvGeom, dx: &mut [f32]) {
    let in_sp = g.in_sp();
    let out_sp = g.out_sp();
    let wsize = (g.k[0] * g.k[1] * g.k[2]) as f32;
    dx.par_chunks_mut(in_sp).enumerate().for_each(|(bc, slab)| {
        let dybase = bc * out_sp;
        let mut idx = 0;
        for zo in 0..g.outs[0] {
            for yo in 0..g.outs[1] {
                for xo in 0..g.outs[2] {
                    let d = dy[dybase + idx] / wsize;
                    let z0 = zo * g.s[0];
                    let y0 = yo * g.s[1];
                    let x0 = xo * g.s[2];
                    for kz in 0..g.k[0] {
                        for ky in 0..g.k[1] {
                            let row = ((z0 + kz) * g.ins[1] + y0 + ky) * g.ins[2] + x0;
                            for kx in 0..g.k[2] {
                                slab[row + kx] += d;
                            }
                        }
                    }
                    idx += 1;
                }
            }
        }
    });
}

#[allow(clippy::type_complexity)]
fn norm_backward(
    x: &Tensor,
    gamma: &Tensor,
    dy: &[f32],
    eps: f32,
    per_instance: bool,
) -> Result<(Vec<Option<Vec<f32>>>, Vec<Option<Vec<f32>>>)> {
    let b = x.shape()[0];
    let c = x.shape()[1];
    let sp = x.spatial_len();
    let stats = norm_stats(x, eps, per_instance);
    let mut dx = vec![0f32; x.numel()];
    let mut dgamma = vec![0f32; c];
    let mut dbeta = vec![0f32; c];

    // Group = one (b, c) slab for instance norm, one channel across the
    // batch for batch norm.
    let groups: Vec<(usize, Vec<usize>)> = if per_instance {
        (0..b * c).map(|bc| (bc, vec![bc])).collect()
    } else {
        (0..c)
            .map(|ci| (ci, (0..b).map(|bi| bi * c + ci).collect()))
            .collect()
    };

    for (stat_idx, slabs) in groups {
        let (mean, inv) = stats[stat_idx];
        let ci = if per_instance { stat_idx % c } else { stat_idx };
        let n = (slabs.len() * sp) as f64;
        let g = gamma.data()[ci] as f64;
        let mut sum_dy = 0f64;
        let mut sum_dy_xh = 0f64;
        for &bc in &slabs {
            let xs = &x.data()[bc * sp..(bc + 1) * sp];
            let ds = &dy[bc * sp..(bc + 1) * sp];
            for j in 0..sp {
                let xh = (xs[j] as f64 - mean) * inv;
                let d = ds[j] as f64;
                sum_dy += d;
                sum_dy_xh += d * xh;
            }
        }
        dgamma[ci] = (dgamma[ci] as f64 + sum_dy_xh) as f32;
        dbeta[ci] = (dbeta[ci] as f64 + sum_dy) as f32;
        let mean_dy = sum_dy / n;
        let mean_dy_xh = sum_dy_xh / n;
        for &bc in &slabs {
            let xs = &x.data()[bc * sp..(bc + 1) * sp];
            let ds = &dy[bc * sp..(bc + 1) * sp];
            let dxs = &mut dx[bc * sp..(bc + 1) * sp];
            for j in 0..sp {
                let xh = (xs[j] as f64 - mean) * inv;
                dxs[j] = (g * inv * (ds[j] as f64 - mean_dy - xh * mean_dy_xh)) as f32;
            }
        }
    }
    Ok((vec![Some(dx)], vec![Some(dgamma), Some(dbeta)]))
}
