use crate::error::{Error, Result};

/// Flat, ordered parameter vector.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn from_vec(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    fn check_len(&self, other: &ParamVector, context: &'static str) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::shape(context, self.len(), other.len()));
        }
        Ok(())
    }

    pub fn add(&self, other: &ParamVector) -> Result<ParamVector> {
        self.check_len(other, "ParamVector::add")?;
        Ok(Self(self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect()))
    }

    pub fn sub(&self, other: &ParamVector) -> Result<ParamVector> {
        self.check_len(other, "ParamVector::sub")?;
        Ok(Self(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect()))
    }

    pub fn scale(&self, a: f64) -> ParamVector {
        Self(self.0.iter().map(|x| a * x).collect())
    }

    /// `self += a * x`
    pub fn axpy(&mut self, a: f64, x: &ParamVector) -> Result<()> {
        self.check_len(x, "ParamVector::axpy")?;
        for (s, v) in self.0.iter_mut().zip(&x.0) {
            *s += a * v;
        }
        Ok(())
    }

    pub fn dot(&self, other: &ParamVector) -> Result<f64> {
        self.check_len(other, "ParamVector::dot")?;
        Ok(self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum())
    }

    pub fn norm_sq(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn sq_distance(&self, other: &ParamVector) -> Result<f64> {
        self.check_len(other, "ParamVector::sq_distance")?;
        Ok(self
            .0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum())
    }

    pub fn max_abs(&self) -> f64 {
        self.0.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// Bitwise equality, distinguishing `0.0` from `-0.0` and comparing NaN payloads.
    pub fn bitwise_eq(&self, other: &ParamVector) -> bool {
        self.len() == other.len()
            && self
                .0
                .iter()
                .zip(&other.0)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

/// `params - lr * grads`
pub fn sgd_step(params: &ParamVector, grads: &ParamVector, lr: f64) -> Result<ParamVector> {
    if lr < 0.0 {
        return Err(Error::invalid(format!("learning rate must be >= 0, got {lr}")));
    }
    let mut out = params.clone();
    out.axpy(-lr, grads)?;
    Ok(out)
}
