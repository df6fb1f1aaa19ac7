use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{NumError, Result};

/// Initialization scheme for [`Tensor::init`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Constant(f32),
    Normal { mean: f32, std: f32 },
    Uniform { low: f32, high: f32 },
}

/// Row-major f32 buffer with a shape. `product(shape) == data.len()` always.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(NumError::Contract(format!(
                "shape {shape:?} holds {numel} values but buffer has {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f32) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Deterministic initialization: the same `(shape, scheme, seed)` always
    /// yields the same buffer.
    pub fn init(shape: &[usize], scheme: Init, seed: u64) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(NumError::Config(format!(
                "tensor dimensions must all be >= 1, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = match scheme {
            Init::Zeros => vec![0.0; numel],
            Init::Constant(v) => vec![v; numel],
            Init::Normal { mean, std } => {
                if !(std >= 0.0) || !std.is_finite() || !mean.is_finite() {
                    return Err(NumError::Config(format!(
                        "normal init needs finite mean and std >= 0, got ({mean}, {std})"
                    )));
                }
                if std == 0.0 {
                    vec![mean; numel]
                } else {
                    let dist = Normal::new(mean, std)
                        .map_err(|e| NumError::Config(format!("normal init: {e}")))?;
                    (0..numel).map(|_| dist.sample(&mut rng)).collect()
                }
            }
            Init::Uniform { low, high } => {
                if !(low <= high) || !low.is_finite() || !high.is_finite() {
                    return Err(NumError::Config(format!(
                        "uniform init needs finite low <= high, got ({low}, {high})"
                    )));
                }
                if low == high {
                    vec![low; numel]
                } else {
                    (0..numel).map(|_| rng.random_range(low..high)).collect()
                }
            }
        };
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Size of the last dimension.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("tensor shape is never empty")
    }

    /// Number of rows when viewed as `[numel / last_dim, last_dim]`.
    pub fn rows(&self) -> usize {
        self.numel() / self.last_dim().max(1)
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(NumError::Contract(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Little-endian byte image of the data, used for checksums and files.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    /// Bitwise equality, distinguishing `-0.0` from `0.0`.
    pub fn bitwise_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zeros_scheme_is_all_zero() {
        let t = Tensor::init(&[2, 2], Init::Zeros, 99).unwrap();
        assert_eq!(t.data(), &[0.0; 4]);
        assert_eq!(t.shape(), &[2, 2]);
    }

    #[test]
    fn same_seed_same_buffer() {
        let a = Tensor::init(&[3], Init::Normal { mean: 0.0, std: 1.0 }, 7).unwrap();
        let b = Tensor::init(&[3], Init::Normal { mean: 0.0, std: 1.0 }, 7).unwrap();
        assert!(a.bitwise_eq(&b));
        let c = Tensor::init(&[3], Init::Normal { mean: 0.0, std: 1.0 }, 8).unwrap();
        assert!(!a.bitwise_eq(&c));
    }

    #[test]
    fn normal_statistics() {
        let t = Tensor::init(&[1000], Init::Normal { mean: 0.0, std: 0.02 }, 1).unwrap();
        let n = t.numel() as f64;
        let mean = t.data().iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = t.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() < 0.002, "mean {mean}");
        assert!((var.sqrt() - 0.02).abs() < 0.005, "std {}", var.sqrt());
    }

    #[test]
    fn uniform_stays_in_range() {
        let t = Tensor::init(&[500], Init::Uniform { low: -0.5, high: 0.25 }, 3).unwrap();
        assert!(t.data().iter().all(|&v| (-0.5..0.25).contains(&v)));
    }

    #[test]
    fn zero_dimension_is_config_error() {
        assert!(matches!(
            Tensor::init(&[2, 0], Init::Zeros, 0),
            Err(NumError::Config(_))
        ));
        assert!(matches!(Tensor::init(&[], Init::Zeros, 0), Err(NumError::Config(_))));
    }

    #[test]
    fn negative_std_is_config_error() {
        let r = Tensor::init(&[2], Init::Normal { mean: 0.0, std: -1.0 }, 0);
        assert!(matches!(r, Err(NumError::Config(_))));
    }

    #[test]
    fn new_checks_length() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }
}
