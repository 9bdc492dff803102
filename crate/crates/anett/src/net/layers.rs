//! The fixed layer vocabulary of the network stack: same-padded 2-D
//! convolution, SiLU activation, 2x mean pooling and 2x nearest-neighbor
//! upsampling. Each layer has a hand-derived reverse-mode counterpart; the
//! forward loops are written as row operations so they autovectorize.

use rand::Rng;

use super::tensor::Tensor;

/// Convolution with odd kernel size and zero same-padding.
/// Weight layout: `[out_c][in_c][k][k]`.
///
/// A convolution can be bias-free (`bias` empty): the encoder uses bias-free
/// convolutions throughout so that empty image regions map to exactly zero
/// latent coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub weight: Vec<f64>,
    /// One bias per output channel, or empty for a bias-free convolution.
    pub bias: Vec<f64>,
}

impl Conv2d {
    pub fn zeros(in_c: usize, out_c: usize, k: usize) -> Self {
        assert!(k % 2 == 1);
        Conv2d {
            in_c,
            out_c,
            k,
            weight: vec![0.0; out_c * in_c * k * k],
            bias: vec![0.0; out_c],
        }
    }

    pub fn zeros_bias_free(in_c: usize, out_c: usize, k: usize) -> Self {
        let mut conv = Self::zeros(in_c, out_c, k);
        conv.bias.clear();
        conv
    }

    /// Fan-in-scaled uniform initialization, zero biases.
    pub fn init(in_c: usize, out_c: usize, k: usize, rng: &mut impl Rng) -> Self {
        let mut conv = Self::zeros(in_c, out_c, k);
        let bound = 1.0 / ((in_c * k * k) as f64).sqrt();
        for w in conv.weight.iter_mut() {
            *w = rng.gen_range(-bound..bound);
        }
        conv
    }

    /// He-scaled uniform initialization (gain sqrt(2), the standard choice in
    /// front of ReLU-family activations) without bias parameters.
    pub fn init_he_bias_free(in_c: usize, out_c: usize, k: usize, rng: &mut impl Rng) -> Self {
        let mut conv = Self::zeros_bias_free(in_c, out_c, k);
        let bound = (6.0 / (in_c * k * k) as f64).sqrt();
        for w in conv.weight.iter_mut() {
            *w = rng.gen_range(-bound..bound);
        }
        conv
    }

    #[inline]
    fn w(&self, o: usize, ci: usize, ky: usize, kx: usize) -> f64 {
        self.weight[((o * self.in_c + ci) * self.k + ky) * self.k + kx]
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        debug_assert_eq!(x.c, self.in_c);
        let (h, w) = (x.h, x.w);
        let pad = (self.k / 2) as isize;
        let mut out = Tensor::zeros(self.out_c, h, w);
        for o in 0..self.out_c {
            let bias = self.bias.get(o).copied().unwrap_or(0.0);
            let out_ch = out.channel_mut(o);
            out_ch.fill(bias);
            for ci in 0..self.in_c {
                let in_ch = x.channel(ci);
                for ky in 0..self.k {
                    let dy = ky as isize - pad;
                    for kx in 0..self.k {
                        let dx = kx as isize - pad;
                        let wv = self.w(o, ci, ky, kx);
                        if wv == 0.0 {
                            continue;
                        }
                        // output rows y with 0 <= y+dy < h, cols x with 0 <= x+dx < w
                        let y0 = (-dy).max(0) as usize;
                        let y1 = ((h as isize - dy).min(h as isize)) as usize;
                        let x0 = (-dx).max(0) as usize;
                        let x1 = ((w as isize - dx).min(w as isize)) as usize;
                        for y in y0..y1 {
                            let iy = (y as isize + dy) as usize;
                            let orow = &mut out_ch[y * w + x0..y * w + x1];
                            let irow = &in_ch[(iy as isize * w as isize + x0 as isize + dx)
                                as usize
                                ..(iy as isize * w as isize + x1 as isize + dx) as usize];
                            for (ov, iv) in orow.iter_mut().zip(irow) {
                                *ov += wv * iv;
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Reverse mode: returns (gradient w.r.t. input, gradient w.r.t. params).
    pub fn backward(&self, x: &Tensor, gy: &Tensor) -> (Tensor, Conv2d) {
        debug_assert_eq!(gy.c, self.out_c);
        debug_assert_eq!((gy.h, gy.w), (x.h, x.w));
        let (h, w) = (x.h, x.w);
        let pad = (self.k / 2) as isize;
        let mut gx = Tensor::zeros(self.in_c, h, w);
        let mut grad = if self.bias.is_empty() {
            Conv2d::zeros_bias_free(self.in_c, self.out_c, self.k)
        } else {
            Conv2d::zeros(self.in_c, self.out_c, self.k)
        };
        for o in 0..self.out_c {
            let gy_ch = gy.channel(o);
            if !grad.bias.is_empty() {
                grad.bias[o] = gy_ch.iter().sum();
            }
            for ci in 0..self.in_c {
                let in_ch = x.channel(ci);
                let gx_ch = gx.channel_mut(ci);
                for ky in 0..self.k {
                    let dy = ky as isize - pad;
                    for kx in 0..self.k {
                        let dx = kx as isize - pad;
                        let wv = self.w(o, ci, ky, kx);
                        let y0 = (-dy).max(0) as usize;
                        let y1 = ((h as isize - dy).min(h as isize)) as usize;
                        let x0 = (-dx).max(0) as usize;
                        let x1 = ((w as isize - dx).min(w as isize)) as usize;
                        let mut gw = 0.0;
                        for y in y0..y1 {
                            let iy = (y as isize + dy) as usize;
                            let grow = &gy_ch[y * w + x0..y * w + x1];
                            let ibase = (iy as isize * w as isize) as usize;
                            let irange = (ibase as isize + x0 as isize + dx) as usize
                                ..(ibase as isize + x1 as isize + dx) as usize;
                            let irow = &in_ch[irange.clone()];
                            for (gv, iv) in grow.iter().zip(irow) {
                                gw += gv * iv;
                            }
                            if wv != 0.0 {
                                let gxrow = &mut gx_ch[irange];
                                for (xv, gv) in gxrow.iter_mut().zip(grow) {
                                    *xv += wv * gv;
                                }
                            }
                        }
                        grad.weight[((o * self.in_c + ci) * self.k + ky) * self.k + kx] = gw;
                    }
                }
            }
        }
        (gx, grad)
    }

    /// Input gradient only; cheaper than [`Conv2d::backward`] when parameter
    /// gradients are not needed (the solver's inner loop).
    pub fn backward_input(&self, gy: &Tensor) -> Tensor {
        debug_assert_eq!(gy.c, self.out_c);
        let (h, w) = (gy.h, gy.w);
        let pad = (self.k / 2) as isize;
        let mut gx = Tensor::zeros(self.in_c, h, w);
        for o in 0..self.out_c {
            let gy_ch = gy.channel(o);
            for ci in 0..self.in_c {
                let gx_ch = gx.channel_mut(ci);
                for ky in 0..self.k {
                    let dy = ky as isize - pad;
                    for kx in 0..self.k {
                        let dx = kx as isize - pad;
                        let wv = self.w(o, ci, ky, kx);
                        if wv == 0.0 {
                            continue;
                        }
                        let y0 = (-dy).max(0) as usize;
                        let y1 = ((h as isize - dy).min(h as isize)) as usize;
                        let x0 = (-dx).max(0) as usize;
                        let x1 = ((w as isize - dx).min(w as isize)) as usize;
                        for y in y0..y1 {
                            let iy = (y as isize + dy) as usize;
                            let grow = &gy_ch[y * w + x0..y * w + x1];
                            let gxrow = &mut gx_ch[(iy as isize * w as isize + x0 as isize + dx)
                                as usize
                                ..(iy as isize * w as isize + x1 as isize + dx) as usize];
                            for (xv, gv) in gxrow.iter_mut().zip(grow) {
                                *xv += wv * gv;
                            }
                        }
                    }
                }
            }
        }
        gx
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Sigmoid-weighted linear unit; smooth everywhere with silu(0) = 0.
pub fn silu(x: &Tensor) -> Tensor {
    let data = x.data.iter().map(|&v| v * sigmoid(v)).collect();
    Tensor {
        c: x.c,
        h: x.h,
        w: x.w,
        data,
    }
}

pub fn silu_backward(x: &Tensor, gy: &Tensor) -> Tensor {
    debug_assert_eq!(x.shape(), gy.shape());
    let data = x
        .data
        .iter()
        .zip(&gy.data)
        .map(|(&v, &g)| {
            let s = sigmoid(v);
            g * (s + v * s * (1.0 - s))
        })
        .collect();
    Tensor {
        c: x.c,
        h: x.h,
        w: x.w,
        data,
    }
}

/// 2x2 mean pooling; halves both spatial dimensions.
pub fn pool2(x: &Tensor) -> Tensor {
    assert!(x.h % 2 == 0 && x.w % 2 == 0, "pool2 needs even sides");
    let (oh, ow) = (x.h / 2, x.w / 2);
    let mut out = Tensor::zeros(x.c, oh, ow);
    for c in 0..x.c {
        let in_ch = x.channel(c);
        let out_ch = out.channel_mut(c);
        for y in 0..oh {
            let r0 = &in_ch[2 * y * x.w..(2 * y + 1) * x.w];
            let r1 = &in_ch[(2 * y + 1) * x.w..(2 * y + 2) * x.w];
            for xx in 0..ow {
                out_ch[y * ow + xx] =
                    0.25 * (r0[2 * xx] + r0[2 * xx + 1] + r1[2 * xx] + r1[2 * xx + 1]);
            }
        }
    }
    out
}

pub fn pool2_backward(gy: &Tensor) -> Tensor {
    let (h, w) = (gy.h * 2, gy.w * 2);
    let mut gx = Tensor::zeros(gy.c, h, w);
    for c in 0..gy.c {
        let g_ch = gy.channel(c);
        let gx_ch = gx.channel_mut(c);
        for y in 0..gy.h {
            for xx in 0..gy.w {
                let v = 0.25 * g_ch[y * gy.w + xx];
                gx_ch[2 * y * w + 2 * xx] = v;
                gx_ch[2 * y * w + 2 * xx + 1] = v;
                gx_ch[(2 * y + 1) * w + 2 * xx] = v;
                gx_ch[(2 * y + 1) * w + 2 * xx + 1] = v;
            }
        }
    }
    gx
}

/// 2x nearest-neighbor upsampling.
pub fn upsample2(x: &Tensor) -> Tensor {
    let (h, w) = (x.h * 2, x.w * 2);
    let mut out = Tensor::zeros(x.c, h, w);
    for c in 0..x.c {
        let in_ch = x.channel(c);
        let out_ch = out.channel_mut(c);
        for y in 0..x.h {
            for xx in 0..x.w {
                let v = in_ch[y * x.w + xx];
                out_ch[2 * y * w + 2 * xx] = v;
                out_ch[2 * y * w + 2 * xx + 1] = v;
                out_ch[(2 * y + 1) * w + 2 * xx] = v;
                out_ch[(2 * y + 1) * w + 2 * xx + 1] = v;
            }
        }
    }
    out
}

pub fn upsample2_backward(gy: &Tensor) -> Tensor {
    assert!(gy.h % 2 == 0 && gy.w % 2 == 0);
    let (oh, ow) = (gy.h / 2, gy.w / 2);
    let mut gx = Tensor::zeros(gy.c, oh, ow);
    for c in 0..gy.c {
        let g_ch = gy.channel(c);
        let gx_ch = gx.channel_mut(c);
        for y in 0..oh {
            for xx in 0..ow {
                gx_ch[y * ow + xx] = g_ch[2 * y * gy.w + 2 * xx]
                    + g_ch[2 * y * gy.w + 2 * xx + 1]
                    + g_ch[(2 * y + 1) * gy.w + 2 * xx]
                    + g_ch[(2 * y + 1) * gy.w + 2 * xx + 1];
            }
        }
    }
    gx
}
