//! Dense row-major `f32` tensors and the handful of kernels the networks need.
//!
//! Tensors are plain values: every operation returns a fresh tensor and never
//! mutates its operands. Reductions inside [`matmul`] and [`mse_loss`] accumulate
//! in `f64` so each output element is rounded to `f32` exactly once.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::domain(format!("tensor dimensions must be positive, got {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Dimension {
                op: "tensor",
                left: shape,
                right: vec![data.len()],
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f32) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Builds an `m×n` matrix from a flat row-major buffer.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Size of the last axis.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    /// Number of rows when viewed as a matrix over the last axis.
    pub fn rows(&self) -> usize {
        self.data.len() / self.last_dim()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let n = self.last_dim();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn item(&self) -> Result<f32> {
        if self.data.len() != 1 {
            return Err(Error::contract(format!("expected a single-element tensor, got shape {:?}", self.shape)));
        }
        Ok(self.data[0])
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::Dimension {
                op: "reshape",
                left: self.shape,
                right: shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = self.as_matrix("transpose")?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Tensor {
            shape: vec![n, m],
            data: out,
        })
    }

    pub(crate) fn as_matrix(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [m, n] => Ok((*m, *n)),
            [n] => Ok((1, *n)),
            _ => Err(Error::Dimension {
                op,
                left: self.shape.clone(),
                right: vec![],
            }),
        }
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, k: f32) -> Tensor {
        self.map(|v| v * k)
    }
}

/// Matrix product of `a` (m×k) and `b` (k×n).
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.as_matrix("matmul")?;
    let (k2, n) = b.as_matrix("matmul")?;
    if k != k2 {
        return Err(Error::Dimension {
            op: "matmul",
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    let mut out = vec![0.0f32; m * n];
    let mut acc = vec![0.0f64; n];
    for i in 0..m {
        acc.iter_mut().for_each(|v| *v = 0.0);
        let a_row = &a.data[i * k..(i + 1) * k];
        for (p, &a_ip) in a_row.iter().enumerate() {
            if a_ip == 0.0 {
                continue;
            }
            let a_ip = a_ip as f64;
            let b_row = &b.data[p * n..(p + 1) * n];
            for (dst, &b_pj) in acc.iter_mut().zip(b_row) {
                *dst += a_ip * b_pj as f64;
            }
        }
        for (dst, &v) in out[i * n..(i + 1) * n].iter_mut().zip(&acc) {
            *dst = v as f32;
        }
    }
    Ok(Tensor {
        shape: vec![m, n],
        data: out,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Mul,
    Sub,
    Silu,
    Tanh,
}

impl ElementwiseOp {
    pub fn is_binary(self) -> bool {
        matches!(self, ElementwiseOp::Add | ElementwiseOp::Mul | ElementwiseOp::Sub)
    }
}

pub fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn silu(x: f32) -> f32 {
    x * sigmoid(x)
}

/// True when `b` can be added to `a` as a bias broadcast over the last axis.
pub(crate) fn is_trailing_bias(a: &[usize], b: &[usize]) -> bool {
    let last = *a.last().unwrap_or(&0);
    a.len() >= 2 && (b == [last] || b == [1, last])
}

/// Elementwise kernel. Binary ops need equal shapes, except that `b` may be a
/// bias vector over `a`'s last axis.
pub fn elementwise(op: ElementwiseOp, a: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    if !op.is_binary() {
        if b.is_some() {
            return Err(Error::contract(format!("{op:?} is unary")));
        }
        return Ok(match op {
            ElementwiseOp::Silu => a.map(silu),
            ElementwiseOp::Tanh => a.map(f32::tanh),
            _ => unreachable!(),
        });
    }
    let b = b.ok_or_else(|| Error::contract(format!("{op:?} needs two operands")))?;
    let f = match op {
        ElementwiseOp::Add => |x: f32, y: f32| x + y,
        ElementwiseOp::Mul => |x: f32, y: f32| x * y,
        ElementwiseOp::Sub => |x: f32, y: f32| x - y,
        _ => unreachable!(),
    };
    if a.shape == b.shape {
        let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
        return Ok(Tensor {
            shape: a.shape.clone(),
            data,
        });
    }
    if is_trailing_bias(&a.shape, &b.shape) {
        let n = b.data.len();
        let data = a
            .data
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, b.data[i % n]))
            .collect();
        return Ok(Tensor {
            shape: a.shape.clone(),
            data,
        });
    }
    Err(Error::Dimension {
        op: "elementwise",
        left: a.shape.clone(),
        right: b.shape.clone(),
    })
}

/// Mean squared difference over all elements.
pub fn mse_loss(pred: &Tensor, target: &Tensor) -> Result<f32> {
    if pred.shape != target.shape {
        return Err(Error::Dimension {
            op: "mse_loss",
            left: pred.shape.clone(),
            right: target.shape.clone(),
        });
    }
    let sum: f64 = pred
        .data
        .iter()
        .zip(&target.data)
        .map(|(&p, &t)| {
            let d = p as f64 - t as f64;
            d * d
        })
        .sum();
    Ok((sum / pred.data.len() as f64) as f32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive_matmul(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a[i * k + p] as f64 * b[p * n + j] as f64;
                }
            }
        }
        out
    }

    #[test]
    fn matmul_identity_and_dot() {
        let eye = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = Tensor::matrix(2, 2, vec![3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(matmul(&eye, &b).unwrap().data(), &[3.0, 4.0, 5.0, 6.0]);

        let row = Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap();
        let col = Tensor::matrix(2, 1, vec![3.0, 4.0]).unwrap();
        let out = matmul(&row, &col).unwrap();
        assert_eq!(out.shape(), &[1, 1]);
        assert_eq!(out.data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for &(m, k, n) in &[(4, 3, 5), (1, 1, 1), (32, 32, 32), (7, 19, 2)] {
            let a: Vec<f32> = (0..m * k).map(|_| rng.random_range(-2.0..2.0)).collect();
            let b: Vec<f32> = (0..k * n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let got = matmul(
                &Tensor::matrix(m, k, a.clone()).unwrap(),
                &Tensor::matrix(k, n, b.clone()).unwrap(),
            )
            .unwrap();
            for (g, e) in got.data().iter().zip(naive_matmul(&a, &b, m, k, n)) {
                assert!((*g as f64 - e).abs() < 1e-6, "{g} vs {e}");
            }
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let err = matmul(&a, &b).unwrap_err().to_string();
        assert!(err.contains("[2, 3] vs [2, 3]"), "{err}");
    }

    #[test]
    fn elementwise_examples() {
        let a = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::new(vec![2], vec![3.0, 4.0]).unwrap();
        let sum = elementwise(ElementwiseOp::Add, &a, Some(&b)).unwrap();
        assert_eq!(sum.data(), &[4.0, 6.0]);

        let x = Tensor::new(vec![2], vec![0.0, 1.0]).unwrap();
        let s = elementwise(ElementwiseOp::Silu, &x, None).unwrap();
        assert_eq!(s.data()[0], 0.0);
        let oracle = 1.0f64 / (1.0 + (-1.0f64).exp());
        assert!((s.data()[1] as f64 - oracle).abs() < 1e-6);
        assert!((oracle - 0.731059).abs() < 1e-6);
    }

    #[test]
    fn elementwise_bias_broadcast_and_mismatch() {
        let a = Tensor::matrix(2, 3, vec![0.0; 6]).unwrap();
        let bias = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let out = elementwise(ElementwiseOp::Add, &a, Some(&bias)).unwrap();
        assert_eq!(out.data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);

        let wrong = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        assert!(matches!(
            elementwise(ElementwiseOp::Mul, &a, Some(&wrong)),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn mse_examples() {
        let p = Tensor::new(vec![2], vec![0.0, 0.0]).unwrap();
        let t = Tensor::new(vec![2], vec![1.0, 1.0]).unwrap();
        assert_eq!(mse_loss(&p, &p).unwrap(), 0.0);
        assert_eq!(mse_loss(&p, &t).unwrap(), 1.0);
        assert!(mse_loss(&p, &Tensor::zeros(&[3])).is_err());
    }

    #[test]
    fn no_nan_for_bounded_inputs() {
        let x = Tensor::new(vec![5], vec![-10.0, -3.0, 0.0, 3.0, 10.0]).unwrap();
        for op in [ElementwiseOp::Silu, ElementwiseOp::Tanh] {
            assert!(elementwise(op, &x, None).unwrap().is_finite());
        }
        let big = Tensor::full(&[32, 32], 10.0);
        assert!(matmul(&big, &big).unwrap().is_finite());
    }

    #[test]
    fn rejects_zero_dims() {
        assert!(Tensor::new(vec![0, 2], vec![]).is_err());
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
    }
}
