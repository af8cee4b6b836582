//! Small U-shaped convolutional network with σ conditioning.
//!
//! Level `l` runs at `1/2^l` resolution with `base_width·2^l` channels. The
//! encoder applies one 3×3 conv per level (preceded by a stride-2 conv when
//! descending); the decoder upsamples, concatenates the encoder skip and
//! applies one 3×3 conv. A sinusoidal embedding of `ln σ` goes through a
//! dense layer and is added as a per-channel bias after the input conv, each
//! downsampling conv and each decoder conv. The output conv is zero at
//! initialisation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, Conv2d, Linear};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UNetArch {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub base_width: usize,
    pub levels: usize,
    pub embed_dim: usize,
    #[serde(default)]
    pub preconditioning: Preconditioning,
}

/// How the network body `F` is wrapped into `D(y; σ) = c_skip·y + c_out·F(c_in·y)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Preconditioning {
    /// `c_skip = 1`, `c_out = −σ`, `c_in = 1/sqrt(1+σ²)`: `F` predicts the
    /// noise from the variance-preserving state `x_t`.
    Epsilon,
    /// Variance-normalising wrapper for data of standard deviation
    /// `sigma_data`; keeps both the body input and its target at unit scale
    /// for every σ.
    Edm { sigma_data: f64 },
}

impl Default for Preconditioning {
    fn default() -> Self {
        Preconditioning::Edm { sigma_data: 0.5 }
    }
}

impl Preconditioning {
    /// `(c_skip, c_out, c_in)` at noise level `sigma`.
    pub fn coefficients(&self, sigma: f64) -> (f64, f64, f64) {
        match *self {
            Preconditioning::Epsilon => (1.0, -sigma, 1.0 / (1.0 + sigma * sigma).sqrt()),
            Preconditioning::Edm { sigma_data: sd } => {
                let s2 = sigma * sigma + sd * sd;
                (sd * sd / s2, sigma * sd / s2.sqrt(), 1.0 / s2.sqrt())
            }
        }
    }
}

impl UNetArch {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.base_width == 0 || self.levels == 0 || self.embed_dim < 2 {
            return Err(Error::invalid(format!("degenerate architecture {self:?}")));
        }
        if let Preconditioning::Edm { sigma_data } = self.preconditioning {
            if !(sigma_data > 0.0 && sigma_data.is_finite()) {
                return Err(Error::invalid(format!("sigma_data must be positive, got {sigma_data}")));
            }
        }
        let div = 1 << (self.levels - 1);
        if self.height == 0 || self.width == 0 || !self.height.is_multiple_of(div) || !self.width.is_multiple_of(div) {
            return Err(Error::invalid(format!(
                "input {}x{} not divisible by 2^(levels-1) = {div}",
                self.height, self.width
            )));
        }
        Ok(())
    }

    pub fn width_at(&self, level: usize) -> usize {
        self.base_width << level
    }

    pub fn param_count(&self) -> usize {
        Layout::new(self).total
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [self.in_channels, self.height, self.width]
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Layout {
    cond: Linear,
    conv_in: Conv2d,
    cond_in: Linear,
    enc: Vec<Conv2d>,
    down: Vec<Conv2d>,
    cond_down: Vec<Linear>,
    dec: Vec<Conv2d>,
    cond_dec: Vec<Linear>,
    conv_out: Conv2d,
    pub(crate) total: usize,
}

struct Cursor(usize);

impl Cursor {
    fn conv(&mut self, i: usize, o: usize, stride: usize) -> Conv2d {
        let c = Conv2d::new(i, o, 3, stride, self.0);
        self.0 += c.param_count();
        c
    }

    fn linear(&mut self, i: usize, o: usize, bias: bool) -> Linear {
        let l = Linear {
            in_dim: i,
            out_dim: o,
            bias,
            offset: self.0,
        };
        self.0 += l.param_count();
        l
    }
}

impl Layout {
    pub(crate) fn new(arch: &UNetArch) -> Self {
        let e = arch.embed_dim;
        let levels = arch.levels;
        let mut cur = Cursor(0);
        let cond = cur.linear(e, e, true);
        let conv_in = cur.conv(arch.in_channels, arch.width_at(0), 1);
        let cond_in = cur.linear(e, arch.width_at(0), false);
        let mut enc = Vec::new();
        let mut down = Vec::new();
        let mut cond_down = Vec::new();
        for l in 0..levels {
            if l > 0 {
                down.push(cur.conv(arch.width_at(l - 1), arch.width_at(l), 2));
                cond_down.push(cur.linear(e, arch.width_at(l), false));
            }
            enc.push(cur.conv(arch.width_at(l), arch.width_at(l), 1));
        }
        let mut dec = Vec::new();
        let mut cond_dec = Vec::new();
        for l in 0..levels.saturating_sub(1) {
            dec.push(cur.conv(arch.width_at(l + 1) + arch.width_at(l), arch.width_at(l), 1));
            cond_dec.push(cur.linear(e, arch.width_at(l), false));
        }
        let conv_out = cur.conv(arch.width_at(0), arch.in_channels, 1);
        Self {
            cond,
            conv_in,
            cond_in,
            enc,
            down,
            cond_down,
            dec,
            cond_dec,
            conv_out,
            total: cur.0,
        }
    }

    /// Fan-in-scaled uniform init; the output conv starts at zero.
    pub(crate) fn init<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        let mut p = vec![0.0; self.total];
        let mut fill = |off: usize, len: usize, fan_in: usize, rng: &mut R| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            for v in &mut p[off..off + len] {
                *v = rng.random_range(-bound..bound);
            }
        };
        let mut linears = vec![self.cond, self.cond_in];
        linears.extend(&self.cond_down);
        linears.extend(&self.cond_dec);
        for l in linears {
            fill(l.offset, l.param_count(), l.in_dim, rng);
        }
        let mut convs = vec![self.conv_in];
        convs.extend(&self.enc);
        convs.extend(&self.down);
        convs.extend(&self.dec);
        for c in convs {
            fill(c.offset, c.param_count(), c.fan_in(), rng);
        }
        p
    }

    pub(crate) fn conv_out(&self) -> &Conv2d {
        &self.conv_out
    }
}

struct ConvRecord {
    input_shape: [usize; 3],
    cols: Vec<f64>,
    pre: Tensor,
}

pub(crate) struct Cache {
    emb: Vec<f64>,
    g_pre: Vec<f64>,
    g: Vec<f64>,
    conv_in: ConvRecord,
    down: Vec<ConvRecord>,
    enc: Vec<ConvRecord>,
    dec: Vec<ConvRecord>,
    out: ConvRecord,
}

fn conv_act(
    conv: &Conv2d,
    params: &[f64],
    x: &Tensor,
    cond: Option<(&Linear, &[f64])>,
) -> (Tensor, ConvRecord) {
    let (mut z, cols) = conv.forward(params, x);
    if let Some((lin, g)) = cond {
        nn::add_channel_bias(&mut z, &lin.forward(params, g));
    }
    let a = nn::silu_tensor(&z);
    (
        a,
        ConvRecord {
            input_shape: x.shape(),
            cols,
            pre: z,
        },
    )
}

impl Layout {
    /// Network body `F(x, σ)`. Returns the output and, when `keep` is set,
    /// the activations needed for [`Layout::backward`].
    pub(crate) fn forward(
        &self,
        params: &[f64],
        x: &Tensor,
        sigma: f64,
        embed_dim: usize,
        keep: bool,
    ) -> (Tensor, Option<Cache>) {
        let emb = nn::sigma_embedding(sigma, embed_dim);
        let g_pre = self.cond.forward(params, &emb);
        let g: Vec<f64> = g_pre.iter().map(|&v| nn::silu(v)).collect();

        let (mut h, rec_in) = conv_act(&self.conv_in, params, x, Some((&self.cond_in, &g)));
        let levels = self.enc.len();
        let mut skips = Vec::with_capacity(levels);
        let mut down = Vec::new();
        let mut enc = Vec::new();
        for l in 0..levels {
            if l > 0 {
                let (a, r) = conv_act(
                    &self.down[l - 1],
                    params,
                    &h,
                    Some((&self.cond_down[l - 1], &g)),
                );
                h = a;
                down.push(r);
            }
            let (a, r) = conv_act(&self.enc[l], params, &h, None);
            h = a;
            enc.push(r);
            if l + 1 < levels {
                skips.push(h.clone());
            }
        }
        let mut dec: Vec<Option<ConvRecord>> = (0..self.dec.len()).map(|_| None).collect();
        for l in (0..self.dec.len()).rev() {
            let cat = nn::concat_channels(&nn::upsample_nearest(&h, 2), &skips[l]);
            let (a, r) = conv_act(&self.dec[l], params, &cat, Some((&self.cond_dec[l], &g)));
            h = a;
            dec[l] = Some(r);
        }
        let (out, cols) = self.conv_out.forward(params, &h);
        let cache = keep.then(|| Cache {
            emb,
            g_pre,
            g,
            conv_in: rec_in,
            down,
            enc,
            dec: dec.into_iter().map(|r| r.expect("decoder record")).collect(),
            out: ConvRecord {
                input_shape: h.shape(),
                cols,
                pre: Tensor::zeros(0, 0, 0),
            },
        });
        (out, cache)
    }

    /// Accumulates `∂L/∂θ` into `grad` given `∂L/∂F`.
    pub(crate) fn backward(&self, params: &[f64], cache: &Cache, dout: &Tensor, grad: &mut [f64]) {
        let mut dg = vec![0.0; cache.g.len()];
        let mut dh = self
            .conv_out
            .backward(params, &cache.out.cols, cache.out.input_shape, dout, grad, true)
            .expect("input grad");

        let levels = self.enc.len();
        let mut dskip: Vec<Option<Tensor>> = (0..levels).map(|_| None).collect();
        for l in 0..self.dec.len() {
            let rec = &cache.dec[l];
            let dz = nn::silu_backward(&rec.pre, &dh);
            let dbias = nn::channel_sums(&dz);
            let dgl = self.cond_dec[l].backward(params, &cache.g, &dbias, grad);
            add_into(&mut dg, &dgl);
            let dcat = self.dec[l]
                .backward(params, &rec.cols, rec.input_shape, &dz, grad, true)
                .expect("input grad");
            let up_ch = self.dec[l].in_ch - self.enc[l].out_ch;
            let (du, ds) = nn::split_channels(&dcat, up_ch);
            dskip[l] = Some(ds);
            dh = nn::upsample_nearest_backward(&du, 2);
        }

        for l in (0..levels).rev() {
            if let Some(ds) = dskip[l].take() {
                dh = dh.axpby(1.0, &ds, 1.0);
            }
            let rec = &cache.enc[l];
            let dz = nn::silu_backward(&rec.pre, &dh);
            dh = self.enc[l]
                .backward(params, &rec.cols, rec.input_shape, &dz, grad, true)
                .expect("input grad");
            if l > 0 {
                let rec = &cache.down[l - 1];
                let dz = nn::silu_backward(&rec.pre, &dh);
                let dgl =
                    self.cond_down[l - 1].backward(params, &cache.g, &nn::channel_sums(&dz), grad);
                add_into(&mut dg, &dgl);
                dh = self.down[l - 1]
                    .backward(params, &rec.cols, rec.input_shape, &dz, grad, true)
                    .expect("input grad");
            }
        }

        let rec = &cache.conv_in;
        let dz = nn::silu_backward(&rec.pre, &dh);
        let dgl = self.cond_in.backward(params, &cache.g, &nn::channel_sums(&dz), grad);
        add_into(&mut dg, &dgl);
        self.conv_in
            .backward(params, &rec.cols, rec.input_shape, &dz, grad, false);

        let dg_pre: Vec<f64> = dg
            .iter()
            .zip(&cache.g_pre)
            .map(|(&d, &z)| d * nn::silu_grad(z))
            .collect();
        self.cond.backward(params, &cache.emb, &dg_pre, grad);
    }
}

fn add_into(acc: &mut [f64], v: &[f64]) {
    for (a, b) in acc.iter_mut().zip(v) {
        *a += b;
    }
}
