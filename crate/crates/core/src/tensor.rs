//! Dense row-major tensor. The one value type the whole pipeline moves
//! around: images, feature volumes, flow fields, gradients.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S: Scalar> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![S::zero(); n],
        }
    }

    pub fn full(shape: &[usize], value: S) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<S>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                format!("{:?} ({} elements)", shape, n),
                format!("{} elements", data.len()),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(&[usize]) -> S) -> Self {
        let mut t = Tensor::zeros(shape);
        let mut idx = vec![0usize; shape.len()];
        for i in 0..t.data.len() {
            t.data[i] = f(&idx);
            // row-major odometer
            for ax in (0..shape.len()).rev() {
                idx[ax] += 1;
                if idx[ax] < shape[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        t
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[S] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    /// Reinterpret the buffer under a new shape with the same element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<S>> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape(
                format!("{:?} ({} elements)", shape, n),
                format!("{:?} ({} elements)", self.shape, self.data.len()),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn fill(&mut self, value: S) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Tensor<S> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, a: S) -> Tensor<S> {
        self.map(|v| v * a)
    }

    pub fn add(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        self.check_same_shape(other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a + b)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn sub(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        self.check_same_shape(other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a - b)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn add_assign(&mut self, other: &Tensor<S>) -> Result<()> {
        self.check_same_shape(other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// `self += a * other`
    pub fn add_scaled(&mut self, a: S, other: &Tensor<S>) -> Result<()> {
        self.check_same_shape(other)?;
        for (dst, &src) in self.data.iter_mut().zip(&other.data) {
            *dst += a * src;
        }
        Ok(())
    }

    /// Mean of |a - b| over all elements.
    pub fn mean_abs_diff(&self, other: &Tensor<S>) -> Result<S> {
        self.check_same_shape(other)?;
        let n = S::from_f64_c(self.data.len() as f64);
        let sum: S = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .sum();
        Ok(sum / n)
    }

    pub fn max_abs(&self) -> S {
        self.data
            .iter()
            .fold(S::zero(), |m, &v| if v.abs() > m { v.abs() } else { m })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Convert element type (used to lift f32 tensors to f64 for checking).
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| T::from_f64_c(v.as_f64())).collect(),
        }
    }

    fn check_same_shape(&self, other: &Tensor<S>) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(
                format!("{:?}", self.shape),
                format!("{:?}", other.shape),
            ));
        }
        Ok(())
    }
}

/// Concatenate along axis 0 (the channel axis for images and volumes).
pub fn concat_channels<S: Scalar>(parts: &[&Tensor<S>]) -> Result<Tensor<S>> {
    if parts.is_empty() {
        return Err(Error::invalid("concat of zero tensors"));
    }
    let tail = &parts[0].shape()[1..];
    for p in parts {
        if &p.shape()[1..] != tail {
            return Err(Error::shape(
                format!("[_, {:?}]", tail),
                format!("{:?}", p.shape()),
            ));
        }
    }
    let c_total: usize = parts.iter().map(|p| p.shape()[0]).sum();
    let mut shape = vec![c_total];
    shape.extend_from_slice(tail);
    let mut data = Vec::with_capacity(shape.iter().product());
    for p in parts {
        data.extend_from_slice(p.data());
    }
    Tensor::from_vec(&shape, data)
}

/// Split the leading axis back into the given channel counts (inverse of
/// `concat_channels`), used when routing gradients.
pub fn split_channels<S: Scalar>(t: &Tensor<S>, counts: &[usize]) -> Result<Vec<Tensor<S>>> {
    let total: usize = counts.iter().sum();
    if t.shape()[0] != total {
        return Err(Error::shape(
            format!("[{}, ..]", total),
            format!("{:?}", t.shape()),
        ));
    }
    let tail: usize = t.shape()[1..].iter().product();
    let mut out = Vec::with_capacity(counts.len());
    let mut offset = 0;
    for &c in counts {
        let mut shape = vec![c];
        shape.extend_from_slice(&t.shape()[1..]);
        let data = t.data()[offset * tail..(offset + c) * tail].to_vec();
        out.push(Tensor::from_vec(&shape, data)?);
        offset += c;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_bad_length() {
        let err = Tensor::<f32>::from_vec(&[2, 3], vec![0.0; 5]).unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("6"), "message should name both shapes: {msg}");
        assert!(msg.contains("5"));
    }

    #[test]
    fn from_fn_is_row_major() {
        let t = Tensor::<f32>::from_fn(&[2, 3], |idx| (idx[0] * 3 + idx[1]) as f32);
        assert_eq!(t.data(), &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn concat_and_split_roundtrip() {
        let a = Tensor::<f32>::from_fn(&[2, 2, 2], |i| i[0] as f32);
        let b = Tensor::<f32>::from_fn(&[3, 2, 2], |i| 10.0 + i[0] as f32);
        let c = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(c.shape(), &[5, 2, 2]);
        let parts = split_channels(&c, &[2, 3]).unwrap();
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
    }
}
