use crate::error::{Error, Result};
use rand::Rng;
use rand_distr::StandardNormal;

/// Dense row-major f32 tensor. Images use `[channels, height, width]`,
/// vectors `[n]`, scalars `[1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f32>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if shape.is_empty() || numel == 0 {
            return Err(Error::invalid("tensor shape must be non-empty with no zero dims"));
        }
        if data.len() != numel {
            return Err(Error::ShapeMismatch {
                context: "Tensor::new",
                expected: shape,
                got: vec![data.len()],
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Tensor { shape, data: vec![0.0; numel] }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f32) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Tensor { shape, data: vec![value; numel] }
    }

    pub fn scalar(value: f32) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
    }

    /// Standard normal samples drawn in row-major order.
    pub fn randn<R: Rng + ?Sized>(shape: impl Into<Vec<usize>>, rng: &mut R) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
        Tensor { shape, data }
    }

    /// Uniform samples in `[lo, hi)`.
    pub fn rand_uniform<R: Rng + ?Sized>(
        shape: impl Into<Vec<usize>>,
        lo: f32,
        hi: f32,
        rng: &mut R,
    ) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| rng.gen_range(lo..hi)).collect();
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> f32 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    /// `[C, H, W]` dims; errors if the tensor is not rank 3.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(Error::ShapeMismatch {
                context: "dims3",
                expected: vec![3],
                got: self.shape.clone(),
            }),
        }
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.shape == other.shape
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip(&self, other: &Tensor, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        if !self.same_shape(other) {
            return Err(Error::ShapeMismatch {
                context: "Tensor::zip",
                expected: self.shape.clone(),
                got: other.shape.clone(),
            });
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// `self * mul + add` with f64 coefficients, one rounding per element.
    pub fn affine(&self, mul: f64, add: f64) -> Tensor {
        self.map(|x| (x as f64 * mul + add) as f32)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, |a, b| a * b)
    }

    pub fn clamp(&self, lo: f32, hi: f32) -> Tensor {
        self.map(|x| x.clamp(lo, hi))
    }

    /// Sum with an f64 accumulator.
    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&x| x as f64).sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    /// Population variance with f64 accumulation.
    pub fn variance(&self) -> f64 {
        let m = self.mean();
        let n = self.data.len() as f64;
        self.data.iter().map(|&x| (x as f64 - m).powi(2)).sum::<f64>() / n
    }

    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|&x| (x as f64) * (x as f64)).sum()
    }

    pub fn norm(&self) -> f64 {
        self.sum_squares().sqrt()
    }

    pub fn mse(&self, other: &Tensor) -> Result<f64> {
        if !self.same_shape(other) {
            return Err(Error::ShapeMismatch {
                context: "Tensor::mse",
                expected: self.shape.clone(),
                got: other.shape.clone(),
            });
        }
        let n = self.data.len() as f64;
        let s: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| {
                let d = a as f64 - b as f64;
                d * d
            })
            .sum();
        Ok(s / n)
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        debug_assert!(self.same_shape(other));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a as f64 - b as f64).abs())
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Row-major offset of `[c, h, w]`.
    #[inline]
    pub fn idx3(&self, c: usize, h: usize, w: usize) -> usize {
        let (_, hh, ww) = (self.shape[0], self.shape[1], self.shape[2]);
        (c * hh + h) * ww + w
    }

    #[inline]
    pub fn at3(&self, c: usize, h: usize, w: usize) -> f32 {
        self.data[self.idx3(c, h, w)]
    }

    /// One image row as a slice: channel `c`, row `h`.
    #[inline]
    pub fn row(&self, c: usize, h: usize) -> &[f32] {
        let w = self.shape[2];
        let start = (c * self.shape[1] + h) * w;
        &self.data[start..start + w]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn new_rejects_wrong_length() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn new_rejects_zero_dims() {
        assert!(Tensor::new(vec![0, 3], vec![]).is_err());
        assert!(Tensor::new(Vec::<usize>::new(), vec![]).is_err());
    }

    #[test]
    fn affine_and_stats() {
        let t = Tensor::new(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let a = t.affine(2.0, -1.0);
        assert_eq!(a.data(), &[1.0, 3.0, 5.0, 7.0]);
        assert!((t.mean() - 2.5).abs() < 1e-12);
        assert!((t.variance() - 1.25).abs() < 1e-12);
    }

    #[test]
    fn row_indexing_matches_at3() {
        let mut r = rng::stream(7, rng::salt::TEST, 0);
        let t = Tensor::randn(vec![3, 4, 5], &mut r);
        for c in 0..3 {
            for h in 0..4 {
                let row = t.row(c, h);
                for w in 0..5 {
                    assert_eq!(row[w], t.at3(c, h, w));
                }
            }
        }
    }

    #[test]
    fn randn_is_stream_deterministic() {
        let a = Tensor::randn(vec![16], &mut rng::stream(42, rng::salt::TEST, 3));
        let b = Tensor::randn(vec![16], &mut rng::stream(42, rng::salt::TEST, 3));
        let c = Tensor::randn(vec![16], &mut rng::stream(42, rng::salt::TEST, 4));
        assert_eq!(a.data(), b.data());
        assert_ne!(a.data(), c.data());
    }
}
