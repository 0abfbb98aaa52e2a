use std::fmt;

use crate::error::{Error, Result};

/// Dense row-major array of `f64`.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}{:?}", self.shape, self.data)
    }
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::dim(format!("shape {shape:?} must be non-empty with positive dims")));
    }
    Ok(shape.iter().product())
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n = check_shape(shape)?;
        if n != data.len() {
            return Err(Error::dim(format!(
                "shape {shape:?} holds {n} values but {} were given",
                data.len()
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    /// Panics on an invalid shape; meant for internally computed shapes.
    pub fn zeros(shape: &[usize]) -> Self {
        let n = check_shape(shape).expect("zeros: invalid shape");
        Tensor { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let mut t = Self::zeros(shape);
        t.data.iter_mut().for_each(|v| *v = value);
        t
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Self::new(&[n], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::dim("ragged rows"));
        }
        Self::new(&[r, c], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::dim(format!("expected a matrix, got shape {:?}", self.shape))),
        }
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.shape[1] + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.shape[1..].iter().product::<usize>();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let n = check_shape(shape)?;
        if n != self.data.len() {
            return Err(Error::dim(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), data: self.data.clone() })
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Tensor { shape: vec![c, r], data: out })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_shape(other)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub(crate) fn same_shape(&self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::dim(format!(
                "shape mismatch: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        self.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a += b);
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.data)
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2()?;
        let (k2, n) = other.dims2()?;
        if k != k2 {
            return Err(Error::dim(format!(
                "matmul inner dimensions differ: {:?} x {:?}",
                self.shape, other.shape
            )));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let brow = &other.data[p * n..(p + 1) * n];
                for (o, b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Ok(Tensor { shape: vec![m, n], data: out })
    }
}

/// Index of the first maximal entry.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.matmul(b)
}

/// Numerically stable softmax over all entries, keeping the input shape.
pub fn softmax(z: &Tensor) -> Result<Tensor> {
    Ok(Tensor { shape: z.shape.clone(), data: softmax_slice(&z.data)? })
}

pub(crate) fn softmax_slice(z: &[f64]) -> Result<Vec<f64>> {
    if z.is_empty() {
        return Err(Error::dim("softmax of an empty vector"));
    }
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|&v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

pub fn sigmoid(z: &Tensor) -> Tensor {
    z.map(sigmoid_scalar)
}

pub(crate) fn sigmoid_scalar(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn relu(z: &Tensor) -> Tensor {
    z.map(|v| v.max(0.0))
}

pub fn hadamard(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.zip_map(b, |x, y| x * y)
}

/// Column sums of an `M×N` matrix as a `1×N` row.
pub fn sum_rows(a: &Tensor) -> Result<Tensor> {
    let (m, n) = a.dims2()?;
    let mut out = vec![0.0; n];
    for i in 0..m {
        for (o, v) in out.iter_mut().zip(a.row(i)) {
            *o += v;
        }
    }
    Tensor::new(&[1, n], out)
}

/// Normalizes each row of a matrix (or a whole vector) to unit L2 norm.
pub fn l2_normalize(a: &Tensor) -> Result<Tensor> {
    let (m, n) = match a.rank() {
        2 => a.dims2()?,
        _ => (1, a.len()),
    };
    let mut out = a.data.clone();
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::numeric(format!("cannot normalize zero row {i}")));
        }
        row.iter_mut().for_each(|v| *v /= norm);
    }
    Tensor::new(&a.shape, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_examples() {
        let id = Tensor::identity(2);
        let b = Tensor::from_rows(&[vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        assert_eq!(id.matmul(&b).unwrap(), b);

        let r = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let c = Tensor::from_rows(&[vec![3.0], vec![4.0]]).unwrap();
        assert_eq!(r.matmul(&c).unwrap().data(), &[11.0]);

        let z = Tensor::zeros(&[2, 3]);
        let any = Tensor::new(&[3, 2], vec![1.0, -2.0, 3.5, 4.0, 0.1, 9.0]).unwrap();
        assert_eq!(z.matmul(&any).unwrap(), Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn matmul_mismatch_names_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let msg = a.matmul(&b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_examples() {
        let u = softmax(&Tensor::zeros(&[3])).unwrap();
        for p in u.data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        let two = softmax(&Tensor::vector(vec![2f64.ln(), 0.0]).unwrap()).unwrap();
        assert!((two.data()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((two.data()[1] - 1.0 / 3.0).abs() < 1e-15);
        let big = softmax(&Tensor::vector(vec![1000.0, 0.0]).unwrap()).unwrap();
        assert!(big.is_finite());
        assert!((big.data()[0] - 1.0).abs() < 1e-300_f64.max(1e-15));
        assert!(big.data()[1] < 1e-300);
    }

    #[test]
    fn softmax_empty_is_dimension_error() {
        assert!(matches!(softmax_slice(&[]), Err(Error::Dimension(_))));
    }

    #[test]
    fn invalid_shapes_rejected() {
        assert!(Tensor::new(&[2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(&[0, 2], vec![]).is_err());
    }

    #[test]
    fn row_normalization() {
        let a = Tensor::from_rows(&[vec![3.0, 4.0], vec![0.0, 2.0]]).unwrap();
        let n = l2_normalize(&a).unwrap();
        assert_eq!(n.data(), &[0.6, 0.8, 0.0, 1.0]);
        assert!(l2_normalize(&Tensor::zeros(&[1, 2])).is_err());
    }
}
