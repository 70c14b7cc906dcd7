use serde::{Deserialize, Serialize};

use super::AdError;

/// Dense row-major tensor of rank 0, 1 or 2.
///
/// A rank-0 tensor has `shape == []` and holds exactly one value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, AdError> {
        if shape.len() > 2 || shape.iter().any(|&d| d == 0) {
            return Err(AdError::InvalidShape { shape });
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(AdError::DataLength { shape, len: data.len() });
        }
        Ok(Self { shape, data })
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        assert!(!data.is_empty(), "empty vector tensor");
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, AdError> {
        Self::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Value of a single-element tensor, whatever its rank.
    pub fn item(&self) -> Option<f64> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    /// `(rows, cols)` view: rank 0 is `(1, 1)`, rank 1 is a single row.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [] => (1, 1),
            [n] => (1, *n),
            [r, c] => (*r, *c),
            _ => unreachable!("rank checked on construction"),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let (_, c) = self.dims2();
        &self.data[i * c..(i + 1) * c]
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub(crate) fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub(crate) fn zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Self {
        debug_assert_eq!(self.shape, other.shape);
        Self::from_parts(
            self.shape.clone(),
            self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        )
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `out = A·B` with `A` `[m,k]` and `B` `[k,n]` given by element strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    if m == 0 || k == 0 || n == 0 {
        return out;
    }
    assert!(a.len() >= (m - 1) * rsa + (k - 1) * csa + 1);
    assert!(b.len() >= (k - 1) * rsb + (n - 1) * csb + 1);
    // SAFETY: the asserts above keep every strided read in bounds and `out`
    // holds exactly `m·n` contiguous elements.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            0.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    out
}

/// `[m,k] x [k,n]`.
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    gemm(m, k, n, a, (k, 1), b, (n, 1))
}

/// `g [m,n] x b^T` where `b` is `[k,n]`; result `[m,k]`.
pub(crate) fn matmul_nt(g: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    gemm(m, n, k, g, (n, 1), b, (1, n))
}

/// `a^T x g` where `a` is `[m,k]`, `g` is `[m,n]`; result `[k,n]`.
pub(crate) fn matmul_tn(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    gemm(k, m, n, a, (1, k), g, (n, 1))
}

/// Expand `src` (shape `from`) to `to` following right-aligned broadcasting
/// over at most two dimensions.
pub(crate) fn broadcast_data(src: &[f64], from: &[usize], to: &[usize]) -> Option<Vec<f64>> {
    let (fr, fc) = align2(from);
    let (tr, tc) = align2(to);
    let rank_ok = from.len() <= to.len() || fr * fc == 1;
    if !rank_ok || !(fr == tr || fr == 1) || !(fc == tc || fc == 1) {
        return None;
    }
    let mut out = Vec::with_capacity(tr * tc);
    for i in 0..tr {
        let si = if fr == 1 { 0 } else { i };
        for j in 0..tc {
            let sj = if fc == 1 { 0 } else { j };
            out.push(src[si * fc + sj]);
        }
    }
    Some(out)
}

/// Inverse of [`broadcast_data`]: sum `src` (shape `from`) down to `to`.
pub(crate) fn sum_to_data(src: &[f64], from: &[usize], to: &[usize]) -> Option<Vec<f64>> {
    let (fr, fc) = align2(from);
    let (tr, tc) = align2(to);
    if !(tr == fr || tr == 1) || !(tc == fc || tc == 1) {
        return None;
    }
    let mut out = vec![0.0; tr * tc];
    for i in 0..fr {
        let ti = if tr == 1 { 0 } else { i };
        for j in 0..fc {
            let tj = if tc == 1 { 0 } else { j };
            out[ti * tc + tj] += src[i * fc + j];
        }
    }
    Some(out)
}

fn align2(shape: &[usize]) -> (usize, usize) {
    match shape {
        [] => (1, 1),
        [n] => (1, *n),
        [r, c] => (*r, *c),
        _ => unreachable!(),
    }
}
