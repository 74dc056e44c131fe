//! Dense f64 tensors, the forward kernels the network is built from, and a
//! reverse-mode tape over them.
//!
//! Maps are stored channels-first (`[C, H, W]`), row-major. Every kernel here
//! is a pure function of its arguments.

mod check;
mod io;
mod tape;

pub use check::finite_diff;
pub use io::{read_tnsr, read_tnsr_from, write_tnsr, write_tnsr_to};
pub use tape::{Gradients, Tape, Var};

use rand::Rng;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if dims.is_empty() || dims.len() > 4 {
            return Err(Error::shape("tensor", format!("rank {} not in 1..=4", dims.len())));
        }
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("dims {:?} hold {} values, got {}", dims, n, data.len()),
            ));
        }
        Ok(Tensor { dims, data })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self::full(dims, 0.0)
    }

    pub fn full(dims: &[usize], value: f64) -> Self {
        assert!(!dims.is_empty() && dims.len() <= 4, "rank must be 1..=4");
        let n = dims.iter().product();
        Tensor {
            dims: dims.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            dims: vec![1],
            data: vec![value],
        }
    }

    /// Uniform samples in `[-scale, scale)`.
    pub fn uniform<R: Rng + ?Sized>(dims: &[usize], scale: f64, rng: &mut R) -> Self {
        let mut t = Self::zeros(dims);
        for v in t.data.iter_mut() {
            *v = rng.gen_range(-scale..scale);
        }
        t
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(self, dims: Vec<usize>) -> Result<Tensor> {
        Tensor::new(dims, self.data)
    }

    /// `self += scale * other`, dims must agree.
    pub fn add_scaled(&mut self, other: &Tensor, scale: f64) {
        assert_eq!(self.dims, other.dims, "add_scaled dims");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }

    /// Interprets the tensor as a `[C, H, W]` map.
    pub fn chw(&self) -> Result<(usize, usize, usize)> {
        match self.dims[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(Error::shape("map", format!("expected [C,H,W], got {:?}", self.dims))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Tanh,
    Relu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Mul,
    /// `a` is a one-channel `[1,H,W]` map multiplied into every channel of `b`.
    ChanwiseMul,
    ConcatChannels,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn activation(kind: Activation, x: &Tensor) -> Tensor {
    match kind {
        Activation::Sigmoid => x.map(sigmoid),
        Activation::Tanh => x.map(f64::tanh),
        Activation::Relu => x.map(|v| if v > 0.0 { v } else { 0.0 }),
    }
}

/// Derivative of the activation expressed through its output `y`.
pub(crate) fn activation_grad(kind: Activation, y: &Tensor, grad_out: &Tensor) -> Tensor {
    let data = y
        .data
        .iter()
        .zip(&grad_out.data)
        .map(|(&y, &g)| match kind {
            Activation::Sigmoid => g * y * (1.0 - y),
            Activation::Tanh => g * (1.0 - y * y),
            Activation::Relu => {
                if y > 0.0 {
                    g
                } else {
                    0.0
                }
            }
        })
        .collect();
    Tensor {
        dims: y.dims.clone(),
        data,
    }
}

fn conv_out_size(n: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = n + 2 * pad;
    if stride == 0 || padded < k || (padded - k) % stride != 0 {
        None
    } else {
        Some((padded - k) / stride + 1)
    }
}

struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    oh: usize,
    ow: usize,
}

fn conv_geom(input: &Tensor, kernel: &Tensor, stride: usize, pad: usize) -> Result<ConvGeom> {
    let (cin, h, w) = input.chw()?;
    let (cout, kc, k) = match kernel.dims[..] {
        [co, ci, kh, kw] if kh == kw => (co, ci, kh),
        _ => {
            return Err(Error::shape(
                "conv2d",
                format!("kernel must be [C_out,C_in,k,k], got {:?}", kernel.dims),
            ))
        }
    };
    if kc != cin {
        return Err(Error::shape(
            "conv2d",
            format!("input has {} channels, kernel expects {}", cin, kc),
        ));
    }
    if k % 2 == 0 {
        return Err(Error::shape("conv2d", format!("kernel size {} is even", k)));
    }
    let (oh, ow) = match (conv_out_size(h, k, stride, pad), conv_out_size(w, k, stride, pad)) {
        (Some(a), Some(b)) => (a, b),
        _ => {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "input {}x{} with k={} stride={} pad={} gives a non-integral output",
                    h, w, k, stride, pad
                ),
            ))
        }
    };
    Ok(ConvGeom {
        cin,
        h,
        w,
        cout,
        k,
        oh,
        ow,
    })
}

/// Valid output column range `[lo, hi)` for kernel offset `off` (= kx - pad).
#[inline]
fn valid_range(off: isize, stride: usize, n_in: usize, n_out: usize) -> (usize, usize) {
    // need 0 <= o*stride + off < n_in
    let s = stride as isize;
    let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
    let hi_excl = (n_in as isize - off + s - 1) / s;
    let hi = hi_excl.clamp(0, n_out as isize);
    let lo = lo.min(hi);
    (lo as usize, hi as usize)
}

/// Cross-correlation of a `[C_in,H,W]` map with a `[C_out,C_in,k,k]` kernel.
///
/// Each output element accumulates `bias` then the products in `(c_in, ky, kx)`
/// order, skipping padded taps, so the result is bitwise equal to the naive
/// six-loop evaluation.
pub fn conv2d(
    input: &Tensor,
    kernel: &Tensor,
    bias: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let g = conv_geom(input, kernel, stride, pad)?;
    if bias.dims != [g.cout] {
        return Err(Error::shape(
            "conv2d",
            format!("bias must be [{}], got {:?}", g.cout, bias.dims),
        ));
    }
    let plane = g.oh * g.ow;
    let mut out = vec![0.0; g.cout * plane];
    let x = &input.data;
    let wt = &kernel.data;
    for co in 0..g.cout {
        let o = &mut out[co * plane..(co + 1) * plane];
        o.iter_mut().for_each(|v| *v = bias.data[co]);
        for ci in 0..g.cin {
            let xin = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            for ky in 0..g.k {
                let (y_lo, y_hi) = valid_range(ky as isize - pad as isize, stride, g.h, g.oh);
                for kx in 0..g.k {
                    let wv = wt[((co * g.cin + ci) * g.k + ky) * g.k + kx];
                    let offx = kx as isize - pad as isize;
                    let (x_lo, x_hi) = valid_range(offx, stride, g.w, g.ow);
                    if x_lo >= x_hi {
                        continue;
                    }
                    for oy in y_lo..y_hi {
                        let iy = oy * stride + ky - pad;
                        let row = &xin[iy * g.w..(iy + 1) * g.w];
                        let orow = &mut o[oy * g.ow..(oy + 1) * g.ow];
                        if stride == 1 {
                            let start = (x_lo as isize + offx) as usize;
                            let src = &row[start..start + (x_hi - x_lo)];
                            for (ov, &iv) in orow[x_lo..x_hi].iter_mut().zip(src) {
                                *ov += iv * wv;
                            }
                        } else {
                            for ox in x_lo..x_hi {
                                let ix = (ox * stride) as isize + offx;
                                orow[ox] += row[ix as usize] * wv;
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![g.cout, g.oh, g.ow], out)
}

/// Gradients of `conv2d` with respect to input, kernel and bias. The input
/// gradient is skipped (returned as `None`) when `want_input` is false.
pub(crate) fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    stride: usize,
    pad: usize,
    grad_out: &Tensor,
    want_input: bool,
    want_params: bool,
) -> Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
    let g = conv_geom(input, kernel, stride, pad)?;
    let plane = g.oh * g.ow;
    let go = &grad_out.data;
    let x = &input.data;
    let wt = &kernel.data;

    let mut gin = want_input.then(|| vec![0.0; input.data.len()]);
    let mut gk = want_params.then(|| vec![0.0; kernel.data.len()]);
    let gb = want_params.then(|| {
        (0..g.cout)
            .map(|co| go[co * plane..(co + 1) * plane].iter().sum())
            .collect::<Vec<f64>>()
    });

    for co in 0..g.cout {
        let gplane = &go[co * plane..(co + 1) * plane];
        for ci in 0..g.cin {
            let base = ci * g.h * g.w;
            for ky in 0..g.k {
                let (y_lo, y_hi) = valid_range(ky as isize - pad as isize, stride, g.h, g.oh);
                for kx in 0..g.k {
                    let widx = ((co * g.cin + ci) * g.k + ky) * g.k + kx;
                    let offx = kx as isize - pad as isize;
                    let (x_lo, x_hi) = valid_range(offx, stride, g.w, g.ow);
                    if x_lo >= x_hi {
                        continue;
                    }
                    let wv = wt[widx];
                    let mut acc = 0.0;
                    for oy in y_lo..y_hi {
                        let iy = oy * stride + ky - pad;
                        let grow = &gplane[oy * g.ow..(oy + 1) * g.ow];
                        let rbase = base + iy * g.w;
                        if stride == 1 {
                            let start = rbase + (x_lo as isize + offx) as usize;
                            let n = x_hi - x_lo;
                            let gslice = &grow[x_lo..x_hi];
                            if gk.is_some() {
                                let xs = &x[start..start + n];
                                acc += gslice.iter().zip(xs).map(|(a, b)| a * b).sum::<f64>();
                            }
                            if let Some(gi) = gin.as_mut() {
                                for (dst, &gv) in gi[start..start + n].iter_mut().zip(gslice) {
                                    *dst += gv * wv;
                                }
                            }
                        } else {
                            for ox in x_lo..x_hi {
                                let ix = rbase + ((ox * stride) as isize + offx) as usize;
                                let gv = grow[ox];
                                if gk.is_some() {
                                    acc += gv * x[ix];
                                }
                                if let Some(gi) = gin.as_mut() {
                                    gi[ix] += gv * wv;
                                }
                            }
                        }
                    }
                    if let Some(k) = gk.as_mut() {
                        k[widx] += acc;
                    }
                }
            }
        }
    }
    Ok((
        gin.map(|d| Tensor {
            dims: input.dims.clone(),
            data: d,
        }),
        gk.map(|d| Tensor {
            dims: kernel.dims.clone(),
            data: d,
        }),
        gb.map(|d| Tensor {
            dims: vec![g.cout],
            data: d,
        }),
    ))
}

/// Source taps along one axis: `(i0, i1, frac)` per output index, using
/// align-corners-false centers `(i+0.5)*scale-0.5` clamped to the edge.
pub(crate) fn bilinear_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|i| {
            let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            let frac = if i0 == n_in - 1 { 0.0 } else { src - i0 as f64 };
            (i0, i1, frac)
        })
        .collect()
}

pub fn bilinear_resize(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (c, h, w) = x.chw()?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::shape("bilinear_resize", "target size must be >= 1"));
    }
    if out_h == h && out_w == w {
        return Ok(x.clone());
    }
    let ty = bilinear_taps(h, out_h);
    let tx = bilinear_taps(w, out_w);
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let m = &x.data[ch * h * w..(ch + 1) * h * w];
        for &(y0, y1, fy) in &ty {
            for &(x0, x1, fx) in &tx {
                let top = m[y0 * w + x0] * (1.0 - fx) + m[y0 * w + x1] * fx;
                let bot = m[y1 * w + x0] * (1.0 - fx) + m[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    Tensor::new(vec![c, out_h, out_w], out)
}

/// Adjoint of `bilinear_resize`: scatters `grad_out` back onto an `[C,h,w]` map.
pub(crate) fn bilinear_resize_backward(grad_out: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (c, oh, ow) = grad_out.chw()?;
    if oh == h && ow == w {
        return Ok(grad_out.clone());
    }
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        let m = &mut out[ch * h * w..(ch + 1) * h * w];
        let g = &grad_out.data[ch * oh * ow..(ch + 1) * oh * ow];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let v = g[oy * ow + ox];
                m[y0 * w + x0] += v * (1.0 - fy) * (1.0 - fx);
                m[y0 * w + x1] += v * (1.0 - fy) * fx;
                m[y1 * w + x0] += v * fy * (1.0 - fx);
                m[y1 * w + x1] += v * fy * fx;
            }
        }
    }
    Tensor::new(vec![c, h, w], out)
}

pub fn elementwise(kind: Elementwise, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    match kind {
        Elementwise::Add | Elementwise::Mul => {
            if a.dims != b.dims {
                return Err(Error::shape(
                    "elementwise",
                    format!("{:?} vs {:?}", a.dims, b.dims),
                ));
            }
            let data = a
                .data
                .iter()
                .zip(&b.data)
                .map(|(x, y)| if kind == Elementwise::Add { x + y } else { x * y })
                .collect();
            Ok(Tensor {
                dims: a.dims.clone(),
                data,
            })
        }
        Elementwise::ChanwiseMul => {
            let (ac, ah, aw) = a.chw()?;
            let (bc, bh, bw) = b.chw()?;
            if ac != 1 || ah != bh || aw != bw {
                return Err(Error::shape(
                    "chanwise_mul",
                    format!("map {:?} cannot scale {:?}", a.dims, b.dims),
                ));
            }
            let plane = bh * bw;
            let mut data = Vec::with_capacity(b.data.len());
            for c in 0..bc {
                data.extend(
                    b.data[c * plane..(c + 1) * plane]
                        .iter()
                        .zip(&a.data)
                        .map(|(x, m)| m * x),
                );
            }
            Ok(Tensor {
                dims: b.dims.clone(),
                data,
            })
        }
        Elementwise::ConcatChannels => {
            let (ac, ah, aw) = a.chw()?;
            let (bc, bh, bw) = b.chw()?;
            if ah != bh || aw != bw {
                return Err(Error::shape(
                    "concat_channels",
                    format!("spatial dims differ: {:?} vs {:?}", a.dims, b.dims),
                ));
            }
            let mut data = Vec::with_capacity(a.data.len() + b.data.len());
            data.extend_from_slice(&a.data);
            data.extend_from_slice(&b.data);
            Ok(Tensor {
                dims: vec![ac + bc, ah, aw],
                data,
            })
        }
    }
}
