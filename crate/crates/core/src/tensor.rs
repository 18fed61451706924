//! Dense row-major f64 tensor.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], v: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "Tensor::from_vec",
                format!("{n} elements for {shape:?}"),
                format!("{}", data.len()),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    #[inline]
    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Reinterprets the data with a new shape of equal element count.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::from_vec(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise a + b. Shapes must match exactly.
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a + b, "Tensor::add")
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a - b, "Tensor::sub")
    }

    fn zip_with(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64, ctx: &'static str) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape(ctx, format!("{:?}", self.shape), format!("{:?}", other.shape)));
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

    /// Mean squared difference over all elements.
    pub fn mse(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::shape("Tensor::mse", format!("{:?}", self.shape), format!("{:?}", other.shape)));
        }
        let n = self.numel().max(1) as f64;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum::<f64>()
            / n)
    }

    /// Stacks per-sample tensors of identical shape into one batch tensor
    /// with a leading batch axis.
    pub fn stack(samples: &[&Tensor]) -> Result<Tensor> {
        let first = samples
            .first()
            .ok_or_else(|| Error::InvalidArgument("Tensor::stack on empty slice".into()))?;
        let mut shape = vec![samples.len()];
        shape.extend_from_slice(&first.shape);
        let mut data = Vec::with_capacity(first.numel() * samples.len());
        for s in samples {
            if s.shape != first.shape {
                return Err(Error::shape("Tensor::stack", format!("{:?}", first.shape), format!("{:?}", s.shape)));
            }
            data.extend_from_slice(&s.data);
        }
        Ok(Tensor { shape, data })
    }

    /// Splits a batch tensor back into per-sample tensors.
    pub fn unstack(&self) -> Result<Vec<Tensor>> {
        if self.shape.is_empty() {
            return Err(Error::shape("Tensor::unstack", "rank >= 1", "rank 0"));
        }
        let b = self.shape[0];
        let inner: Vec<usize> = self.shape[1..].to_vec();
        let n: usize = inner.iter().product();
        Ok((0..b)
            .map(|i| Tensor {
                shape: inner.clone(),
                data: self.data[i * n..(i + 1) * n].to_vec(),
            })
            .collect())
    }
}
