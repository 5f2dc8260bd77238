use crate::error::NnError;
use crate::scalar::Scalar;

/// Dense row-major tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self, NnError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(NnError::Shape(format!(
                "shape {shape:?} needs {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self, NnError> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(NnError::Shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise `self += other`. Shapes must match.
    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: T) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Size of the leading (batch) dimension.
    pub fn batch(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Item `i` along the leading dimension, keeping rank (leading dim 1).
    pub fn item(&self, i: usize) -> Self {
        let n = self.batch();
        assert!(i < n, "item {i} out of range for batch {n}");
        let stride = self.data.len() / n.max(1);
        let mut shape = self.shape.clone();
        shape[0] = 1;
        Self {
            shape,
            data: self.data[i * stride..(i + 1) * stride].to_vec(),
        }
    }

    /// Concatenates along the leading dimension.
    pub fn concat0(items: &[Tensor<T>]) -> Result<Self, NnError> {
        let first = items
            .first()
            .ok_or_else(|| NnError::Shape("concat of zero tensors".into()))?;
        let tail = &first.shape[1..];
        let mut lead = 0;
        let mut data = Vec::with_capacity(items.iter().map(|t| t.numel()).sum());
        for t in items {
            if t.shape.is_empty() || &t.shape[1..] != tail {
                return Err(NnError::Shape(format!(
                    "concat0: {:?} vs {:?}",
                    first.shape, t.shape
                )));
            }
            lead += t.shape[0];
            data.extend_from_slice(&t.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = lead;
        Ok(Self { shape, data })
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }
}

/// Splits a rank-4 `[n, c, h, w]` or rank-5 `[n, c, d, h, w]` shape into
/// `(n, c, [d, h, w])`.
pub(crate) fn dims5(shape: &[usize]) -> (usize, usize, [usize; 3]) {
    match *shape {
        [n, c, h, w] => (n, c, [1, h, w]),
        [n, c, d, h, w] => (n, c, [d, h, w]),
        _ => panic!("expected rank-4 or rank-5 tensor, got shape {shape:?}"),
    }
}

/// Rebuilds a shape with the rank of `like` from 5-d components.
pub(crate) fn shape_like(like: &[usize], n: usize, c: usize, s: [usize; 3]) -> Vec<usize> {
    if like.len() == 4 {
        debug_assert_eq!(s[0], 1);
        vec![n, c, s[1], s[2]]
    } else {
        vec![n, c, s[0], s[1], s[2]]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor::<f32>::from_vec(&[2, 3], vec![0.0; 5]).is_err());
        let t = Tensor::<f32>::from_vec(&[2, 3], vec![1.0; 6]).unwrap();
        assert_eq!(t.sum(), 6.0);
    }

    #[test]
    fn item_and_concat_are_inverse() {
        let t = Tensor::<f64>::from_vec(&[3, 2], (0..6).map(f64::from).collect()).unwrap();
        let parts: Vec<_> = (0..3).map(|i| t.item(i)).collect();
        assert_eq!(parts[1].data(), &[2.0, 3.0]);
        assert_eq!(Tensor::concat0(&parts).unwrap(), t);
    }
}
