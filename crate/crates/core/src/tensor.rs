//! Small helpers over candle tensors. Everything in this crate runs on the
//! CPU in `f64`, which keeps finite-difference checks meaningful.

use candle_core::{DType, Device, Tensor};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::Result;

pub const DTYPE: DType = DType::F64;

pub fn device() -> Device {
    Device::Cpu
}

pub fn to_vec(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.flatten_all()?.to_dtype(DTYPE)?.to_vec1::<f64>()?)
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.flatten_all()?.to_dtype(DTYPE)?.sum_all()?.to_scalar::<f64>()?)
}

pub fn from_vec(values: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
    Ok(Tensor::from_vec(values, shape, &device())?)
}

/// Seeded standard-normal tensor. candle's own `randn` draws from a thread
/// RNG, so every random tensor in the crate goes through here instead.
pub fn randn<R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Result<Tensor> {
    let n = shape.iter().product();
    let values = (0..n)
        .map(|_| rng.sample::<f64, _>(StandardNormal) * std)
        .collect();
    from_vec(values, shape)
}

pub fn l2_norm(t: &Tensor) -> Result<f64> {
    Ok(t.sqr()?.sum_all()?.to_scalar::<f64>()?.sqrt())
}

/// `||a - b|| / ||b||`.
pub fn relative_l2(a: &Tensor, b: &Tensor) -> Result<f64> {
    Ok(l2_norm(&(a - b)?)? / l2_norm(b)?)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}
