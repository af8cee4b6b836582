//! Minimal layer kernels with hand-written backward passes.
//!
//! Layers do not own parameters; they hold offsets into a flat `f64` vector
//! so that a whole network is one contiguous buffer for the optimizer and the
//! checkpoint writer.

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2d {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub offset: usize,
}

impl Conv2d {
    pub fn new(in_ch: usize, out_ch: usize, kernel: usize, stride: usize, offset: usize) -> Self {
        Self {
            in_ch,
            out_ch,
            kernel,
            stride,
            pad: kernel / 2,
            offset,
        }
    }

    pub fn weight_len(&self) -> usize {
        self.out_ch * self.in_ch * self.kernel * self.kernel
    }

    pub fn param_count(&self) -> usize {
        self.weight_len() + self.out_ch
    }

    pub fn fan_in(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    pub fn out_size(&self, n: usize) -> usize {
        (n + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn weights<'a>(&self, params: &'a [f64]) -> &'a [f64] {
        &params[self.offset..self.offset + self.weight_len()]
    }

    pub fn bias<'a>(&self, params: &'a [f64]) -> &'a [f64] {
        let b = self.offset + self.weight_len();
        &params[b..b + self.out_ch]
    }

    fn im2col(&self, x: &Tensor, ho: usize, wo: usize) -> Vec<f64> {
        let [c, h, w] = x.shape();
        let k = self.kernel;
        let np = ho * wo;
        let mut cols = vec![0.0; c * k * k * np];
        let xd = x.data();
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst = &mut cols[row * np..(row + 1) * np];
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = &xd[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                        for ox in 0..wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[oy * wo + ox] = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64], shape: [usize; 3], ho: usize, wo: usize) -> Tensor {
        let [c, h, w] = shape;
        let k = self.kernel;
        let np = ho * wo;
        let mut dx = Tensor::zeros(c, h, w);
        let dd = dx.data_mut();
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src = &cols[row * np..(row + 1) * np];
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let base = (ci * h + iy as usize) * w;
                        for ox in 0..wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                dd[base + ix as usize] += src[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    /// Returns the output and the unfolded input needed by [`Conv2d::backward`].
    pub fn forward(&self, params: &[f64], x: &Tensor) -> (Tensor, Vec<f64>) {
        debug_assert_eq!(x.channels(), self.in_ch);
        let ho = self.out_size(x.height());
        let wo = self.out_size(x.width());
        let cols = self.im2col(x, ho, wo);
        let np = ho * wo;
        let kk = self.fan_in();
        let mut out = Tensor::zeros(self.out_ch, ho, wo);
        {
            let od = out.data_mut();
            for (o, b) in self.bias(params).iter().enumerate() {
                od[o * np..(o + 1) * np].fill(*b);
            }
            // SAFETY: all strides describe in-bounds row-major matrices of the
            // stated dimensions.
            unsafe {
                matrixmultiply::dgemm(
                    self.out_ch,
                    kk,
                    np,
                    1.0,
                    self.weights(params).as_ptr(),
                    kk as isize,
                    1,
                    cols.as_ptr(),
                    np as isize,
                    1,
                    1.0,
                    od.as_mut_ptr(),
                    np as isize,
                    1,
                );
            }
        }
        (out, cols)
    }

    pub fn forward_only(&self, params: &[f64], x: &Tensor) -> Tensor {
        self.forward(params, x).0
    }

    /// Accumulates weight and bias gradients into `grad` and, if requested,
    /// returns the gradient with respect to the input.
    pub fn backward(
        &self,
        params: &[f64],
        cols: &[f64],
        input_shape: [usize; 3],
        dout: &Tensor,
        grad: &mut [f64],
        want_input_grad: bool,
    ) -> Option<Tensor> {
        let [_, ho, wo] = dout.shape();
        let np = ho * wo;
        let kk = self.fan_in();
        let wl = self.weight_len();
        let dd = dout.data();
        {
            let gw = &mut grad[self.offset..self.offset + wl];
            // SAFETY: as in `forward`; `cols` is read transposed.
            unsafe {
                matrixmultiply::dgemm(
                    self.out_ch,
                    np,
                    kk,
                    1.0,
                    dd.as_ptr(),
                    np as isize,
                    1,
                    cols.as_ptr(),
                    1,
                    np as isize,
                    1.0,
                    gw.as_mut_ptr(),
                    kk as isize,
                    1,
                );
            }
        }
        let gb = &mut grad[self.offset + wl..self.offset + wl + self.out_ch];
        for (o, g) in gb.iter_mut().enumerate() {
            *g += dd[o * np..(o + 1) * np].iter().sum::<f64>();
        }
        if !want_input_grad {
            return None;
        }
        let mut dcols = vec![0.0; kk * np];
        // SAFETY: weights read transposed; output is a fresh `kk × np` buffer.
        unsafe {
            matrixmultiply::dgemm(
                kk,
                self.out_ch,
                np,
                1.0,
                self.weights(params).as_ptr(),
                1,
                kk as isize,
                dd.as_ptr(),
                np as isize,
                1,
                0.0,
                dcols.as_mut_ptr(),
                np as isize,
                1,
            );
        }
        Some(self.col2im(&dcols, input_shape, ho, wo))
    }
}

/// Dense layer `y = W·x (+ b)` with `W` stored row-major as `out × in`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    pub bias: bool,
    pub offset: usize,
}

impl Linear {
    pub fn param_count(&self) -> usize {
        self.in_dim * self.out_dim + if self.bias { self.out_dim } else { 0 }
    }

    pub fn forward(&self, params: &[f64], x: &[f64]) -> Vec<f64> {
        let w = &params[self.offset..self.offset + self.in_dim * self.out_dim];
        let b0 = self.offset + self.in_dim * self.out_dim;
        (0..self.out_dim)
            .map(|o| {
                let row = &w[o * self.in_dim..(o + 1) * self.in_dim];
                let dot: f64 = row.iter().zip(x).map(|(a, b)| a * b).sum();
                dot + if self.bias { params[b0 + o] } else { 0.0 }
            })
            .collect()
    }

    pub fn backward(&self, params: &[f64], x: &[f64], dy: &[f64], grad: &mut [f64]) -> Vec<f64> {
        let n = self.in_dim;
        let b0 = self.offset + n * self.out_dim;
        let mut dx = vec![0.0; n];
        for (o, &g) in dy.iter().enumerate() {
            let row = self.offset + o * n;
            for i in 0..n {
                grad[row + i] += g * x[i];
                dx[i] += g * params[row + i];
            }
            if self.bias {
                grad[b0 + o] += g;
            }
        }
        dx
    }
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

#[inline]
pub fn silu(z: f64) -> f64 {
    z * sigmoid(z)
}

#[inline]
pub fn silu_grad(z: f64) -> f64 {
    let s = sigmoid(z);
    s * (1.0 + z * (1.0 - s))
}

pub fn silu_tensor(z: &Tensor) -> Tensor {
    z.map(silu)
}

/// `dz = dy ⊙ silu'(z)`.
pub fn silu_backward(z: &Tensor, dy: &Tensor) -> Tensor {
    let data = z
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&zz, &g)| g * silu_grad(zz))
        .collect();
    Tensor::from_vec(z.channels(), z.height(), z.width(), data).expect("shape preserved")
}

pub fn relu_tensor(z: &Tensor) -> Tensor {
    z.map(|v| v.max(0.0))
}

/// Adds `bias[c]` to every element of channel `c`.
pub fn add_channel_bias(x: &mut Tensor, bias: &[f64]) {
    let n = x.height() * x.width();
    for (c, b) in bias.iter().enumerate() {
        for v in &mut x.data_mut()[c * n..(c + 1) * n] {
            *v += b;
        }
    }
}

/// Per-channel sums, the adjoint of [`add_channel_bias`].
pub fn channel_sums(x: &Tensor) -> Vec<f64> {
    (0..x.channels()).map(|c| x.channel(c).iter().sum()).collect()
}

/// Nearest-neighbour upsampling by an integer factor.
pub fn upsample_nearest(x: &Tensor, factor: usize) -> Tensor {
    let [c, h, w] = x.shape();
    let mut out = Tensor::zeros(c, h * factor, w * factor);
    for ch in 0..c {
        for y in 0..h * factor {
            for xx in 0..w * factor {
                *out.at_mut(ch, y, xx) = x.at(ch, y / factor, xx / factor);
            }
        }
    }
    out
}

pub fn upsample_nearest_backward(dy: &Tensor, factor: usize) -> Tensor {
    let [c, h, w] = dy.shape();
    let mut dx = Tensor::zeros(c, h / factor, w / factor);
    for ch in 0..c {
        for y in 0..h {
            for xx in 0..w {
                *dx.at_mut(ch, y / factor, xx / factor) += dy.at(ch, y, xx);
            }
        }
    }
    dx
}

/// Channel-wise concatenation; spatial sizes must agree.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.height(), b.height());
    assert_eq!(a.width(), b.width());
    let mut data = Vec::with_capacity(a.len() + b.len());
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Tensor::from_vec(a.channels() + b.channels(), a.height(), a.width(), data)
        .expect("concat shape")
}

/// Splits channels `[0, first)` and `[first, C)`.
pub fn split_channels(x: &Tensor, first: usize) -> (Tensor, Tensor) {
    let [c, h, w] = x.shape();
    let n = first * h * w;
    let a = Tensor::from_vec(first, h, w, x.data()[..n].to_vec()).expect("split shape");
    let b = Tensor::from_vec(c - first, h, w, x.data()[n..].to_vec()).expect("split shape");
    (a, b)
}

/// Sinusoidal features of `ln σ` at geometrically spaced frequencies.
pub fn sigma_embedding(sigma: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let c = sigma.ln();
    let (f_lo, f_hi): (f64, f64) = (0.05, 4.0);
    let mut out = Vec::with_capacity(dim);
    let freqs: Vec<f64> = (0..half)
        .map(|k| {
            if half == 1 {
                1.0
            } else {
                (f_lo.ln() + (f_hi.ln() - f_lo.ln()) * k as f64 / (half - 1) as f64).exp()
            }
        })
        .collect();
    out.extend(freqs.iter().map(|f| (c * f).sin()));
    out.extend(freqs.iter().map(|f| (c * f).cos()));
    out.resize(dim, 0.0);
    out
}
