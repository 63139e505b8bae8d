//! Forward and backward passes of the building blocks.

use super::tensor::{axpy, dot, Real, Tensor4};
use crate::error::{Error, Result};

/// Weights of a 3x3 convolution, laid out `[out][in][ky][kx]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams<T> {
    pub in_ch: usize,
    pub out_ch: usize,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> ConvParams<T> {
    pub fn zeros(in_ch: usize, out_ch: usize) -> Self {
        Self {
            in_ch,
            out_ch,
            weight: vec![T::zero(); out_ch * in_ch * 9],
            bias: vec![T::zero(); out_ch],
        }
    }

    #[inline]
    fn tap(&self, o: usize, i: usize, ky: usize, kx: usize) -> T {
        self.weight[((o * self.in_ch + i) * 3 + ky) * 3 + kx]
    }

    pub fn cast<U: Real>(&self) -> ConvParams<U> {
        ConvParams {
            in_ch: self.in_ch,
            out_ch: self.out_ch,
            weight: self.weight.iter().map(|&x| U::of(x.f64())).collect(),
            bias: self.bias.iter().map(|&x| U::of(x.f64())).collect(),
        }
    }
}

/// The plane shifted by `dx` columns, zero where the source column is outside:
/// `out[y][x] = inp[y][x + dx]`.
fn column_shift<T: Real>(inp: &[T], w: usize, dx: isize) -> Vec<T> {
    let mut out = vec![T::zero(); inp.len()];
    for (o, s) in out.chunks_exact_mut(w).zip(inp.chunks_exact(w)) {
        match dx {
            -1 => o[1..].copy_from_slice(&s[..w - 1]),
            1 => o[..w - 1].copy_from_slice(&s[1..]),
            _ => o.copy_from_slice(s),
        }
    }
    out
}

/// Output rows `[y0, y1)` whose source row `y + ky - 1` is inside the plane.
#[inline]
fn row_range(h: usize, ky: usize) -> (usize, usize) {
    (1usize.saturating_sub(ky), (h + 1).saturating_sub(ky).min(h))
}

/// Cross-correlation with a 3x3 kernel, zero padding 1, stride 1.
pub fn conv3x3_forward<T: Real>(x: &Tensor4<T>, p: &ConvParams<T>) -> Result<Tensor4<T>> {
    if x.channels() != p.in_ch {
        return Err(Error::Shape(format!("conv expects {} input channels, got {}", p.in_ch, x.channels())));
    }
    let [n, _, h, w] = x.shape;
    let mut y = Tensor4::zeros([n, p.out_ch, h, w]);
    if h == 0 || w == 0 {
        return Ok(y);
    }
    for b in 0..n {
        for o in 0..p.out_ch {
            y.plane_mut(b, o).fill(p.bias[o]);
        }
        for i in 0..p.in_ch {
            let shifted: [Vec<T>; 3] = std::array::from_fn(|kx| column_shift(x.plane(b, i), w, kx as isize - 1));
            for o in 0..p.out_ch {
                let out = y.plane_mut(b, o);
                for ky in 0..3 {
                    let (y0, y1) = row_range(h, ky);
                    let (s0, s1) = ((y0 + ky - 1) * w, (y1 + ky - 1) * w);
                    for (kx, src) in shifted.iter().enumerate() {
                        axpy(&mut out[y0 * w..y1 * w], p.tap(o, i, ky, kx), &src[s0..s1]);
                    }
                }
            }
        }
    }
    Ok(y)
}

pub struct ConvGrads<T> {
    pub input: Tensor4<T>,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

pub fn conv3x3_backward<T: Real>(x: &Tensor4<T>, p: &ConvParams<T>, grad_out: &Tensor4<T>, need_input: bool) -> Result<ConvGrads<T>> {
    let [n, _, h, w] = x.shape;
    if grad_out.shape != [n, p.out_ch, h, w] {
        return Err(Error::Shape(format!("conv gradient shape {:?} does not match output", grad_out.shape)));
    }
    let mut gx = Tensor4::zeros(if need_input { x.shape } else { [0, 0, 0, 0] });
    let mut gw = vec![T::zero(); p.weight.len()];
    let mut gb = vec![T::zero(); p.out_ch];
    if h == 0 || w == 0 {
        return Ok(ConvGrads { input: gx, weight: gw, bias: gb });
    }
    for b in 0..n {
        for (o, g) in gb.iter_mut().enumerate() {
            *g += grad_out.plane(b, o).iter().copied().sum::<T>();
        }
        for i in 0..p.in_ch {
            let shifted: [Vec<T>; 3] = std::array::from_fn(|kx| column_shift(x.plane(b, i), w, kx as isize - 1));
            // row-shifted input gradient per column offset, shifted back below
            let mut acc: [Vec<T>; 3] = std::array::from_fn(|_| if need_input { vec![T::zero(); h * w] } else { Vec::new() });
            for o in 0..p.out_ch {
                let go = grad_out.plane(b, o);
                for ky in 0..3 {
                    let (y0, y1) = row_range(h, ky);
                    let (s0, s1) = ((y0 + ky - 1) * w, (y1 + ky - 1) * w);
                    for kx in 0..3 {
                        gw[((o * p.in_ch + i) * 3 + ky) * 3 + kx] += dot(&go[y0 * w..y1 * w], &shifted[kx][s0..s1]);
                        if need_input {
                            axpy(&mut acc[kx][s0..s1], p.tap(o, i, ky, kx), &go[y0 * w..y1 * w]);
                        }
                    }
                }
            }
            if need_input {
                let gin = gx.plane_mut(b, i);
                for (kx, a) in acc.iter().enumerate() {
                    // a[y][x] feeds input column x + kx - 1
                    let back = column_shift(a, w, 1 - kx as isize);
                    axpy(gin, T::one(), &back);
                }
            }
        }
    }
    Ok(ConvGrads {
        input: gx,
        weight: gw,
        bias: gb,
    })
}

pub fn relu_forward<T: Real>(x: &Tensor4<T>) -> Tensor4<T> {
    Tensor4 {
        shape: x.shape,
        data: x.data.iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect(),
    }
}

/// Gradient through ReLU given its input.
pub fn relu_backward<T: Real>(x: &Tensor4<T>, grad_out: &Tensor4<T>) -> Tensor4<T> {
    Tensor4 {
        shape: x.shape,
        data: x
            .data
            .iter()
            .zip(&grad_out.data)
            .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
            .collect(),
    }
}

/// 2x2 max pooling, stride 2. Also returns, per output, the flat input index
/// of the maximum (first occurrence in row-major window order on ties).
pub fn maxpool2x2_forward<T: Real>(x: &Tensor4<T>) -> Result<(Tensor4<T>, Vec<u32>)> {
    let [n, c, h, w] = x.shape;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!("max pooling needs even spatial dims, got {h}x{w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut y = Tensor4::zeros([n, c, oh, ow]);
    let mut arg = vec![0u32; n * c * oh * ow];
    for plane in 0..n * c {
        let base = plane * h * w;
        for yy in 0..oh {
            for xx in 0..ow {
                let mut best = base + 2 * yy * w + 2 * xx;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let k = base + (2 * yy + dy) * w + 2 * xx + dx;
                    if x.data[k] > x.data[best] {
                        best = k;
                    }
                }
                let o = plane * oh * ow + yy * ow + xx;
                y.data[o] = x.data[best];
                arg[o] = best as u32;
            }
        }
    }
    Ok((y, arg))
}

pub fn maxpool2x2_backward<T: Real>(input_shape: [usize; 4], argmax: &[u32], grad_out: &Tensor4<T>) -> Tensor4<T> {
    let mut gx = Tensor4::zeros(input_shape);
    for (&k, &g) in argmax.iter().zip(&grad_out.data) {
        gx.data[k as usize] += g;
    }
    gx
}

pub fn upsample2x_forward<T: Real>(x: &Tensor4<T>) -> Tensor4<T> {
    let [n, c, h, w] = x.shape;
    let mut y = Tensor4::zeros([n, c, 2 * h, 2 * w]);
    for plane in 0..n * c {
        let src = &x.data[plane * h * w..(plane + 1) * h * w];
        let dst = &mut y.data[plane * 4 * h * w..(plane + 1) * 4 * h * w];
        for yy in 0..2 * h {
            for xx in 0..2 * w {
                dst[yy * 2 * w + xx] = src[(yy / 2) * w + xx / 2];
            }
        }
    }
    y
}

pub fn upsample2x_backward<T: Real>(grad_out: &Tensor4<T>) -> Tensor4<T> {
    let [n, c, h2, w2] = grad_out.shape;
    let (h, w) = (h2 / 2, w2 / 2);
    let mut gx = Tensor4::zeros([n, c, h, w]);
    for plane in 0..n * c {
        let src = &grad_out.data[plane * h2 * w2..(plane + 1) * h2 * w2];
        let dst = &mut gx.data[plane * h * w..(plane + 1) * h * w];
        for yy in 0..h2 {
            for xx in 0..w2 {
                dst[(yy / 2) * w + xx / 2] += src[yy * w2 + xx];
            }
        }
    }
    gx
}

/// Stacks `a` then `b` along the channel axis.
pub fn concat_channels<T: Real>(a: &Tensor4<T>, b: &Tensor4<T>) -> Result<Tensor4<T>> {
    let [n, ca, h, w] = a.shape;
    if b.shape[0] != n || b.shape[2] != h || b.shape[3] != w {
        return Err(Error::Shape(format!("cannot concatenate {:?} and {:?}", a.shape, b.shape)));
    }
    let cb = b.shape[1];
    let mut y = Tensor4::zeros([n, ca + cb, h, w]);
    let p = h * w;
    for s in 0..n {
        y.data[s * (ca + cb) * p..(s * (ca + cb) + ca) * p].copy_from_slice(&a.data[s * ca * p..(s + 1) * ca * p]);
        y.data[(s * (ca + cb) + ca) * p..(s + 1) * (ca + cb) * p].copy_from_slice(&b.data[s * cb * p..(s + 1) * cb * p]);
    }
    Ok(y)
}

/// Splits a channel-concatenated gradient back into its two parts.
pub fn concat_backward<T: Real>(grad: &Tensor4<T>, ca: usize) -> (Tensor4<T>, Tensor4<T>) {
    let [n, c, h, w] = grad.shape;
    let cb = c - ca;
    let p = h * w;
    let mut ga = Tensor4::zeros([n, ca, h, w]);
    let mut gb = Tensor4::zeros([n, cb, h, w]);
    for s in 0..n {
        ga.data[s * ca * p..(s + 1) * ca * p].copy_from_slice(&grad.data[s * c * p..(s * c + ca) * p]);
        gb.data[s * cb * p..(s + 1) * cb * p].copy_from_slice(&grad.data[(s * c + ca) * p..(s + 1) * c * p]);
    }
    (ga, gb)
}

/// Softmax over channels at every pixel.
pub fn softmax_channels<T: Real>(x: &Tensor4<T>) -> Tensor4<T> {
    let [n, c, h, w] = x.shape;
    let p = h * w;
    let mut y = x.clone();
    for s in 0..n {
        let base = s * c * p;
        for px in 0..p {
            let mut m = T::neg_infinity();
            for k in 0..c {
                m = m.max(x.data[base + k * p + px]);
            }
            let mut z = T::zero();
            for k in 0..c {
                let e = (x.data[base + k * p + px] - m).exp();
                y.data[base + k * p + px] = e;
                z += e;
            }
            for k in 0..c {
                y.data[base + k * p + px] = y.data[base + k * p + px] / z;
            }
        }
    }
    y
}

/// Gradient with respect to the logits given softmax outputs `y` and the
/// gradient with respect to `y`.
pub fn softmax_backward<T: Real>(y: &Tensor4<T>, grad_y: &Tensor4<T>) -> Tensor4<T> {
    let [n, c, h, w] = y.shape;
    let p = h * w;
    let mut gx = Tensor4::zeros(y.shape);
    for s in 0..n {
        let base = s * c * p;
        for px in 0..p {
            let mut inner = T::zero();
            for k in 0..c {
                inner += y.data[base + k * p + px] * grad_y.data[base + k * p + px];
            }
            for k in 0..c {
                let i = base + k * p + px;
                gx.data[i] = y.data[i] * (grad_y.data[i] - inner);
            }
        }
    }
    gx
}
