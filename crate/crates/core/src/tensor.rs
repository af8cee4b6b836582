use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense `C×H×W` array of `f64`, row-major with channel outermost.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: [usize; 3],
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self {
            shape: [c, h, w],
            data: vec![0.0; c * h * w],
        }
    }

    pub fn filled(c: usize, h: usize, w: usize, value: f64) -> Self {
        Self {
            shape: [c, h, w],
            data: vec![value; c * h * w],
        }
    }

    pub fn from_vec(c: usize, h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != c * h * w {
            return Err(Error::invalid(format!(
                "buffer of {} elements does not fit shape {c}x{h}x{w}",
                data.len()
            )));
        }
        Ok(Self {
            shape: [c, h, w],
            data,
        })
    }

    /// A `1×1×1` tensor, handy for scalar diffusion arithmetic.
    pub fn scalar(v: f64) -> Self {
        Self {
            shape: [1, 1, 1],
            data: vec![v],
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn channels(&self) -> usize {
        self.shape[0]
    }

    pub fn height(&self) -> usize {
        self.shape[1]
    }

    pub fn width(&self) -> usize {
        self.shape[2]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.shape[1] + y) * self.shape[2] + x]
    }

    #[inline]
    pub fn at_mut(&mut self, c: usize, y: usize, x: usize) -> &mut f64 {
        let idx = (c * self.shape[1] + y) * self.shape[2] + x;
        &mut self.data[idx]
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.shape[1] * self.shape[2];
        &self.data[c * n..(c + 1) * n]
    }

    pub fn ensure_same_shape(&self, other: &Tensor, what: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::invalid(format!(
                "{what}: shape {:?} does not match {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    /// `a·self + b·other`, elementwise. Shapes must agree.
    pub fn axpby(&self, a: f64, other: &Tensor, b: f64) -> Tensor {
        debug_assert_eq!(self.shape, other.shape);
        Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&x, &y)| a * x + b * y)
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn first_non_finite(&self) -> Option<usize> {
        self.data.iter().position(|v| !v.is_finite())
    }

    pub fn mean_sq_diff(&self, other: &Tensor) -> f64 {
        let sum: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        sum / self.data.len() as f64
    }

    /// Copy of the `h×w` window whose top-left corner is `(y0, x0)`.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Tensor {
        let [c, _, _] = self.shape;
        let mut out = Tensor::zeros(c, h, w);
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    *out.at_mut(ch, y, x) = self.at(ch, y0 + y, x0 + x);
                }
            }
        }
        out
    }

    /// Writes `src` into this tensor with its top-left corner at `(y0, x0)`.
    pub fn paste(&mut self, src: &Tensor, y0: usize, x0: usize) {
        let [c, h, w] = src.shape;
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    *self.at_mut(ch, y0 + y, x0 + x) = src.at(ch, y, x);
                }
            }
        }
    }
}
