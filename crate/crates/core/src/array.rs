use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense row-major n-dimensional array.
///
/// Invariant: `product(shape) == data.len()`. Constructors enforce it; the
/// fields stay private so it cannot be broken afterwards.
#[derive(Debug, Clone, PartialEq)]
pub struct NdArray<S: Scalar = f32> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> NdArray<S> {
    pub fn from_vec(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Dimension(format!(
                "shape {:?} holds {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(NdArray { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        NdArray { shape, data: vec![S::ZERO; n] }
    }

    pub fn full(shape: Vec<usize>, v: S) -> Self {
        let n: usize = shape.iter().product();
        NdArray { shape, data: vec![v; n] }
    }

    pub fn scalar(v: S) -> Self {
        NdArray { shape: vec![1], data: vec![v] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    /// Single element of a one-element array.
    pub fn item(&self) -> S {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        NdArray {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Converts element type, e.g. `f32` checkpoints into `f64` verification mode.
    pub fn cast<T: Scalar>(&self) -> NdArray<T> {
        NdArray {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| T::from_f64(v.to_f64())).collect(),
        }
    }

    /// In-place `self += other * k`.
    pub fn add_scaled(&mut self, other: &NdArray<S>, k: S) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(other.data.iter()) {
            *a = *a + b * k;
        }
    }
}

impl NdArray<f32> {
    /// Mirrors the trailing (width) axis; used for flip-averaged evaluation.
    /// Works on [H, W] and [C, H, W] layouts.
    pub fn flip_horizontal(&self) -> Self {
        let w = *self.shape.last().expect("flip needs at least 1 axis");
        let rows = self.data.len() / w;
        let mut out = self.data.clone();
        for r in 0..rows {
            out[r * w..(r + 1) * w].reverse();
        }
        NdArray { shape: self.shape.clone(), data: out }
    }
}

/// Bilinear resampling on a row-major [C, H, W] buffer, half-pixel convention.
/// Used outside the tape for evaluation-time resampling; the differentiable
/// path has its own tape op with the identical index arithmetic.
pub fn resample_bilinear<S: Scalar>(
    data: &[S],
    channels: usize,
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<S> {
    let mut out = vec![S::ZERO; channels * out_h * out_w];
    for (oy, ox, y0, y1, wy, x0, x1, wx) in bilinear_taps(in_h, in_w, out_h, out_w) {
        for c in 0..channels {
            let base = c * in_h * in_w;
            let top = data[base + y0 * in_w + x0].to_f64() * (1.0 - wx)
                + data[base + y0 * in_w + x1].to_f64() * wx;
            let bot = data[base + y1 * in_w + x0].to_f64() * (1.0 - wx)
                + data[base + y1 * in_w + x1].to_f64() * wx;
            out[c * out_h * out_w + oy * out_w + ox] =
                S::from_f64(top * (1.0 - wy) + bot * wy);
        }
    }
    out
}

/// Source taps and weights for every output pixel of a bilinear resample.
pub(crate) fn bilinear_taps(
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<(usize, usize, usize, usize, f64, usize, usize, f64)> {
    let sy = in_h as f64 / out_h as f64;
    let sx = in_w as f64 / out_w as f64;
    let mut taps = Vec::with_capacity(out_h * out_w);
    for oy in 0..out_h {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (in_h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(in_h - 1);
        let wy = fy - y0 as f64;
        for ox in 0..out_w {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (in_w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(in_w - 1);
            let wx = fx - x0 as f64;
            taps.push((oy, ox, y0, y1, wy, x0, x1, wx));
        }
    }
    taps
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_mismatched_length() {
        assert!(NdArray::<f32>::from_vec(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(NdArray::<f32>::from_vec(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn flip_horizontal_is_involution() {
        let a = NdArray::<f32>::from_vec(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let f = a.flip_horizontal();
        assert_eq!(f.data(), &[3., 2., 1., 6., 5., 4.]);
        assert_eq!(f.flip_horizontal(), a);
    }

    #[test]
    fn bilinear_preserves_constants() {
        let data = vec![3.5f64; 4 * 4];
        let up = resample_bilinear(&data, 1, 4, 4, 9, 9);
        assert!(up.iter().all(|&v| (v - 3.5).abs() < 1e-12));
        let down = resample_bilinear(&data, 1, 4, 4, 2, 2);
        assert!(down.iter().all(|&v| (v - 3.5).abs() < 1e-12));
    }
}
