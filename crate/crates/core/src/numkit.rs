//! Dense f64 kernels with hand-written backward passes.
//!
//! Every differentiable operation here comes in a forward/backward pair and
//! the pairs are checked against central differences by [`check_gradient`].
//! Parameters carry their own gradient buffer; backward passes accumulate
//! (`+=`) into it and callers reset with [`Parameterized::zero_grads`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Clamp margin for sigmoid outputs, keeps `ln p` and `ln (1 - p)` finite.
pub const SIGMOID_EPS: f64 = 1e-7;

/// Negative-side slope used by every LeakyReLU in the model.
pub const LEAKY_SLOPE: f64 = 0.2;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equal-length rows. An empty slice gives a 0x0 matrix.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::Dimension(format!(
                    "row {i} has {} columns, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn row_vector(values: Vec<f64>) -> Self {
        Self {
            rows: 1,
            cols: values.len(),
            data: values,
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
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

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn add_at(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] += v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    /// `self += other`, shapes must agree.
    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        self.check_same_shape(other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    fn check_same_shape(&self, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Dimension(format!(
                "{}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(())
    }
}

/// Standard matrix product `a · b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::Dimension(format!(
            "cannot multiply {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for k in 0..a.cols {
            let aik = a.data[i * a.cols + k];
            if aik == 0.0 {
                continue;
            }
            let b_row = &b.data[k * b.cols..(k + 1) * b.cols];
            for (o, &bkj) in out_row.iter_mut().zip(b_row) {
                *o += aik * bkj;
            }
        }
    }
    Ok(out)
}

/// `a · bᵀ`, avoids materializing the transpose.
pub fn matmul_bt(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(Error::Dimension(format!(
            "cannot multiply {}x{} by transpose of {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let ar = a.row(i);
        for j in 0..b.rows {
            out.data[i * b.rows + j] = dot(ar, b.row(j));
        }
    }
    Ok(out)
}

/// `aᵀ · b`.
pub fn matmul_at(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows != b.rows {
        return Err(Error::Dimension(format!(
            "cannot multiply transpose of {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.cols, b.cols);
    for k in 0..a.rows {
        let ar = a.row(k);
        let br = b.row(k);
        for (i, &aki) in ar.iter().enumerate() {
            if aki == 0.0 {
                continue;
            }
            let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for (o, &bkj) in out_row.iter_mut().zip(br) {
                *o += aki * bkj;
            }
        }
    }
    Ok(out)
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for r in 0..out.rows {
        softmax_in_place(out.row_mut(r));
    }
    out
}

pub fn softmax_in_place(xs: &mut [f64]) {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in xs.iter_mut() {
        *x /= sum;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    LeakyRelu { slope: f64 },
    Sigmoid,
}

impl Activation {
    pub fn leaky() -> Self {
        Activation::LeakyRelu { slope: LEAKY_SLOPE }
    }

    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::LeakyRelu { slope } => leaky_relu(x, slope),
            Activation::Sigmoid => sigmoid(x),
        }
    }

    /// Derivative at pre-activation `x`, given the forward output `y`.
    #[inline]
    pub fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::LeakyRelu { slope } => {
                if x > 0.0 {
                    1.0
                } else {
                    slope
                }
            }
            Activation::Sigmoid => sigmoid_derivative(y),
        }
    }
}

#[inline]
pub fn leaky_relu(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        slope * x
    }
}

/// Logistic function clamped into `(SIGMOID_EPS, 1 - SIGMOID_EPS)`.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    let y = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    y.clamp(SIGMOID_EPS, 1.0 - SIGMOID_EPS)
}

/// Derivative of the clamped sigmoid from its output; zero on the clamp.
#[inline]
pub fn sigmoid_derivative(y: f64) -> f64 {
    if y <= SIGMOID_EPS || y >= 1.0 - SIGMOID_EPS {
        0.0
    } else {
        y * (1.0 - y)
    }
}

pub fn activation(m: &Matrix, kind: Activation) -> Matrix {
    m.map(|x| kind.apply(x))
}

/// Backward of [`activation`]: `upstream ⊙ f'(input)`.
pub fn activation_backward(
    input: &Matrix,
    output: &Matrix,
    upstream: &Matrix,
    kind: Activation,
) -> Result<Matrix> {
    input.check_same_shape(upstream)?;
    input.check_same_shape(output)?;
    let data = input
        .data
        .iter()
        .zip(&output.data)
        .zip(&upstream.data)
        .map(|((&x, &y), &g)| g * kind.derivative(x, y))
        .collect();
    Ok(Matrix {
        rows: input.rows,
        cols: input.cols,
        data,
    })
}

/// 1D convolution weights: `c_out × c_in × k`, stored flat with index
/// `(o * c_in + c) * k + j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvKernel {
    pub c_out: usize,
    pub c_in: usize,
    pub k: usize,
}

impl ConvKernel {
    pub fn new(c_out: usize, c_in: usize, k: usize) -> Result<Self> {
        if k.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "convolution kernel size must be odd, got {k}"
            )));
        }
        Ok(Self { c_out, c_in, k })
    }

    pub fn len(&self) -> usize {
        self.c_out * self.c_in * self.k
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, o: usize, c: usize, j: usize) -> usize {
        (o * self.c_in + c) * self.k + j
    }

    fn check(&self, input: &Matrix, weights: &[f64], bias: &[f64]) -> Result<()> {
        if self.k.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "convolution kernel size must be odd, got {}",
                self.k
            )));
        }
        if input.cols != self.c_in {
            return Err(Error::Dimension(format!(
                "conv1d input has {} channels, kernel expects {}",
                input.cols, self.c_in
            )));
        }
        if weights.len() != self.len() || bias.len() != self.c_out {
            return Err(Error::Dimension(format!(
                "conv1d weights {} / bias {} do not match kernel {}x{}x{}",
                weights.len(),
                bias.len(),
                self.c_out,
                self.c_in,
                self.k
            )));
        }
        Ok(())
    }
}

/// "Same"-length 1D convolution over time with zero padding.
///
/// `input` is `N × c_in` (time along rows); output is `N × c_out`.
pub fn conv1d(input: &Matrix, shape: &ConvKernel, weights: &[f64], bias: &[f64]) -> Result<Matrix> {
    shape.check(input, weights, bias)?;
    let n = input.rows;
    let half = shape.k / 2;
    let mut out = Matrix::zeros(n, shape.c_out);
    for t in 0..n {
        for (o, &b) in bias.iter().enumerate() {
            let mut acc = b;
            for j in 0..shape.k {
                let Some(src) = (t + j).checked_sub(half).filter(|&s| s < n) else {
                    continue;
                };
                let x = input.row(src);
                let w = &weights[shape.index(o, 0, j)..];
                for c in 0..shape.c_in {
                    acc += w[c * shape.k] * x[c];
                }
            }
            out.data[t * shape.c_out + o] = acc;
        }
    }
    Ok(out)
}

/// Gradients of [`conv1d`] for an upstream `N × c_out` gradient.
pub struct ConvGrads {
    pub input: Matrix,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

pub fn conv1d_backward(
    input: &Matrix,
    shape: &ConvKernel,
    weights: &[f64],
    upstream: &Matrix,
) -> Result<ConvGrads> {
    if upstream.rows != input.rows || upstream.cols != shape.c_out {
        return Err(Error::Dimension(format!(
            "conv1d upstream {}x{} vs expected {}x{}",
            upstream.rows, upstream.cols, input.rows, shape.c_out
        )));
    }
    let n = input.rows;
    let half = shape.k / 2;
    let mut d_input = Matrix::zeros(n, shape.c_in);
    let mut d_w = vec![0.0; shape.len()];
    let mut d_b = vec![0.0; shape.c_out];
    for t in 0..n {
        let g_row = upstream.row(t);
        for (o, &g) in g_row.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            d_b[o] += g;
            for j in 0..shape.k {
                let Some(src) = (t + j).checked_sub(half).filter(|&s| s < n) else {
                    continue;
                };
                for c in 0..shape.c_in {
                    let idx = shape.index(o, c, j);
                    d_w[idx] += g * input.data[src * shape.c_in + c];
                    d_input.data[src * shape.c_in + c] += g * weights[idx];
                }
            }
        }
    }
    Ok(ConvGrads {
        input: d_input,
        weights: d_w,
        bias: d_b,
    })
}

/// A trainable tensor with its gradient accumulator. Only the value is
/// serialized; a deserialized param starts with a zero gradient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "Matrix", into = "Matrix")]
pub struct Param {
    pub value: Matrix,
    pub grad: Matrix,
}

impl From<Matrix> for Param {
    fn from(value: Matrix) -> Self {
        Param::new(value)
    }
}

impl From<Param> for Matrix {
    fn from(p: Param) -> Self {
        p.value
    }
}

impl Param {
    pub fn new(value: Matrix) -> Self {
        let grad = Matrix::zeros(value.rows, value.cols);
        Self { value, grad }
    }

    pub fn zero_grad(&mut self) {
        if self.grad.shape() != self.value.shape() {
            self.grad = Matrix::zeros(self.value.rows, self.value.cols);
        } else {
            self.grad.fill(0.0);
        }
    }

    pub fn accumulate(&mut self, g: &Matrix) -> Result<()> {
        if self.grad.shape() != self.value.shape() {
            self.zero_grad();
        }
        self.grad.add_assign(g)
    }

    pub fn accumulate_slice(&mut self, g: &[f64]) -> Result<()> {
        if g.len() != self.value.data.len() {
            return Err(Error::Dimension(format!(
                "gradient of length {} for parameter {}x{}",
                g.len(),
                self.value.rows,
                self.value.cols
            )));
        }
        if self.grad.shape() != self.value.shape() {
            self.zero_grad();
        }
        for (a, b) in self.grad.data.iter_mut().zip(g) {
            *a += b;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.value.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.data.is_empty()
    }
}

/// Anything that owns an ordered list of [`Param`]s.
pub trait Parameterized {
    fn params(&self) -> Vec<&Param>;
    fn params_mut(&mut self) -> Vec<&mut Param>;

    fn zero_grads(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    fn num_parameters(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }
}

impl Parameterized for Vec<Param> {
    fn params(&self) -> Vec<&Param> {
        self.iter().collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.iter_mut().collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (parameter index, flat coordinate) where the maximum was attained.
    pub worst: Option<(usize, usize)>,
    pub coordinates: usize,
}

/// Compares the analytic gradients already stored in `model`'s params
/// against central differences of `f`.
///
/// Error per coordinate is `|analytic - numeric| / max(1, |numeric|)`.
/// Values are restored bit-exactly after each probe.
pub fn check_gradient<M, F>(model: &mut M, h: f64, mut f: F) -> Result<GradCheckReport>
where
    M: Parameterized + ?Sized,
    F: FnMut(&M) -> f64,
{
    let sizes: Vec<usize> = model.params().iter().map(|p| p.len()).collect();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coordinates: 0,
    };
    for (pi, &size) in sizes.iter().enumerate() {
        for ci in 0..size {
            let original = model.params_mut()[pi].value.data[ci];
            model.params_mut()[pi].value.data[ci] = original + h;
            let plus = f(model);
            model.params_mut()[pi].value.data[ci] = original - h;
            let minus = f(model);
            model.params_mut()[pi].value.data[ci] = original;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::Numeric(format!(
                    "objective not finite while probing parameter {pi} coordinate {ci}"
                )));
            }
            let numeric = (plus - minus) / (2.0 * h);
            let analytic = model.params()[pi].grad.data[ci];
            let err = (analytic - numeric).abs() / numeric.abs().max(1.0);
            report.coordinates += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((pi, ci));
            }
        }
    }
    Ok(report)
}

/// Glorot/Xavier uniform bound `sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out).max(1) as f64).sqrt()
}

pub fn xavier_uniform<R: rand::Rng + ?Sized>(
    rows: usize,
    cols: usize,
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Matrix {
    let bound = xavier_bound(fan_in, fan_out);
    let data = (0..rows * cols)
        .map(|_| rng.gen_range(-bound..=bound))
        .collect();
    Matrix { rows, cols, data }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for k in 0..a.cols() {
                    s += a.get(i, k) * b.get(k, j);
                }
                out.set(i, j, s);
            }
        }
        out
    }

    fn naive_conv(input: &Matrix, shape: &ConvKernel, w: &[f64], b: &[f64]) -> Matrix {
        let n = input.rows() as isize;
        let half = (shape.k / 2) as isize;
        let mut out = Matrix::zeros(input.rows(), shape.c_out);
        for t in 0..n {
            for o in 0..shape.c_out {
                let mut acc = b[o];
                for c in 0..shape.c_in {
                    for j in 0..shape.k as isize {
                        let src = t + j - half;
                        if src >= 0 && src < n {
                            acc += w[shape.index(o, c, j as usize)] * input.get(src as usize, c);
                        }
                    }
                }
                out.set(t as usize, o, acc);
            }
        }
        out
    }

    #[test]
    fn matmul_identity_and_scalar() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = random(3, 5, &mut rng);
        assert_eq!(matmul(&Matrix::identity(3), &m).unwrap(), m);
        let a = Matrix::from_vec(1, 1, vec![2.0]).unwrap();
        let b = Matrix::from_vec(1, 1, vec![3.0]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[6.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random(4, 5, &mut rng);
        let b = random(5, 3, &mut rng);
        let got = matmul(&a, &b).unwrap();
        assert!(got.max_abs_diff(&naive_matmul(&a, &b)) < 1e-12);
        let bt = b.transpose();
        assert!(matmul_bt(&a, &bt).unwrap().max_abs_diff(&got) < 1e-12);
        let at = a.transpose();
        assert!(matmul_at(&at, &b).unwrap().max_abs_diff(&got) < 1e-12);
    }

    #[test]
    fn matmul_shape_error_names_shapes() {
        let err = matmul(&Matrix::zeros(2, 3), &Matrix::zeros(4, 1)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2x3") && msg.contains("4x1"), "{msg}");
    }

    #[test]
    fn softmax_closed_forms() {
        let m = Matrix::from_rows(&[vec![5.0, 5.0, 5.0]]).unwrap();
        for &v in softmax_rows(&m).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let single = Matrix::from_rows(&[vec![-42.0]]).unwrap();
        assert_eq!(softmax_rows(&single).data(), &[1.0]);
        let two = Matrix::from_rows(&[vec![0.0, 2f64.ln()]]).unwrap();
        let s = softmax_rows(&two);
        assert!((s.get(0, 0) - 1.0 / 3.0).abs() < 1e-15);
        assert!((s.get(0, 1) - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn activations_by_definition() {
        let m = Matrix::from_rows(&[vec![-1.0, 0.0, 2.0]]).unwrap();
        let out = activation(&m, Activation::leaky());
        assert_eq!(out.data(), &[-0.2, 0.0, 2.0]);
        assert_eq!(sigmoid(0.0), 0.5);
        assert_eq!(sigmoid(1e3), 1.0 - SIGMOID_EPS);
        assert_eq!(sigmoid(-1e3), SIGMOID_EPS);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r = random(5, 7, &mut rng);
        let got = activation(&r, Activation::Sigmoid);
        for (g, &x) in got.data().iter().zip(r.data()) {
            assert!((g - 1.0 / (1.0 + (-x).exp())).abs() < 1e-12);
        }
    }

    #[test]
    fn conv1d_hand_cases() {
        let shape = ConvKernel::new(1, 1, 3).unwrap();
        let input = Matrix::from_vec(3, 1, vec![1.0, 2.0, 3.0]).unwrap();
        let out = conv1d(&input, &shape, &[1.0, 1.0, 1.0], &[0.0]).unwrap();
        assert_eq!(out.data(), &[3.0, 6.0, 5.0]);
    }

    #[test]
    fn conv1d_delta_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let input = random(9, 4, &mut rng);
        let shape = ConvKernel::new(4, 4, 5).unwrap();
        let mut w = vec![0.0; shape.len()];
        for c in 0..4 {
            w[shape.index(c, c, 2)] = 1.0;
        }
        let out = conv1d(&input, &shape, &w, &[0.0; 4]).unwrap();
        assert_eq!(out, input);
    }

    #[test]
    fn conv1d_matches_nested_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let input = random(11, 3, &mut rng);
        let shape = ConvKernel::new(4, 3, 3).unwrap();
        let w: Vec<f64> = (0..shape.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let got = conv1d(&input, &shape, &w, &b).unwrap();
        assert!(got.max_abs_diff(&naive_conv(&input, &shape, &w, &b)) < 1e-12);
    }

    #[test]
    fn conv1d_rejects_even_kernel() {
        assert!(matches!(ConvKernel::new(1, 1, 2), Err(Error::Config(_))));
        let bad = ConvKernel {
            c_out: 1,
            c_in: 1,
            k: 4,
        };
        let input = Matrix::zeros(3, 1);
        assert!(matches!(
            conv1d(&input, &bad, &[0.0; 4], &[0.0]),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn gradcheck_quadratic_and_constant() {
        let mut params = vec![Param::new(Matrix::from_vec(1, 1, vec![3.0]).unwrap())];
        params[0].grad.set(0, 0, 6.0);
        let rep = check_gradient(&mut params, 1e-5, |p| p[0].value.get(0, 0).powi(2)).unwrap();
        assert!(rep.max_rel_error < 1e-9, "{rep:?}");
        assert_eq!(params[0].value.get(0, 0), 3.0);

        params.zero_grads();
        let rep = check_gradient(&mut params, 1e-5, |_| 4.0).unwrap();
        assert_eq!(rep.max_rel_error, 0.0);
    }

    #[test]
    fn gradcheck_flags_nonfinite_objective() {
        let mut params = vec![Param::new(Matrix::zeros(1, 2))];
        let err = check_gradient(&mut params, 1e-5, |_| f64::NAN).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
    }

    #[test]
    fn conv_and_activation_backward_pass_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let input = random(6, 3, &mut rng);
        let shape = ConvKernel::new(2, 3, 3).unwrap();
        let probe = random(6, 2, &mut rng);
        let mut params = vec![
            Param::new(Matrix::row_vector(
                (0..shape.len()).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            )),
            Param::new(Matrix::row_vector(vec![0.1, -0.2])),
        ];
        let objective = |p: &Vec<Param>| {
            let pre = conv1d(&input, &shape, p[0].value.data(), p[1].value.data()).unwrap();
            let act = activation(&pre, Activation::Sigmoid);
            act.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let pre = conv1d(&input, &shape, params[0].value.data(), params[1].value.data()).unwrap();
        let act = activation(&pre, Activation::Sigmoid);
        let d_pre = activation_backward(&pre, &act, &probe, Activation::Sigmoid).unwrap();
        let g = conv1d_backward(&input, &shape, params[0].value.data(), &d_pre).unwrap();
        params[0].accumulate_slice(&g.weights).unwrap();
        params[1].accumulate_slice(&g.bias).unwrap();
        let rep = check_gradient(&mut params, 1e-5, objective).unwrap();
        assert!(rep.max_rel_error < 1e-4, "{rep:?}");
    }

    #[test]
    fn matmul_backward_and_leaky_pass_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random(5, 4, &mut rng);
        let probe = random(5, 3, &mut rng);
        let mut params = vec![Param::new(random(4, 3, &mut rng))];
        let kind = Activation::leaky();
        let objective = |p: &Vec<Param>| {
            let y = activation(&matmul(&x, &p[0].value).unwrap(), kind);
            dot(y.data(), probe.data())
        };
        let pre = matmul(&x, &params[0].value).unwrap();
        let y = activation(&pre, kind);
        let d_pre = activation_backward(&pre, &y, &probe, kind).unwrap();
        let dw = matmul_at(&x, &d_pre).unwrap();
        params[0].accumulate(&dw).unwrap();
        let rep = check_gradient(&mut params, 1e-5, objective).unwrap();
        assert!(rep.max_rel_error < 1e-4, "{rep:?}");
    }

    proptest! {
        #[test]
        fn matmul_is_associative(seed in any::<u64>(), n in 1usize..6, m in 1usize..6, p in 1usize..6, q in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random(n, m, &mut rng);
            let b = random(m, p, &mut rng);
            let c = random(p, q, &mut rng);
            let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
            let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
            prop_assert!(left.max_abs_diff(&right) < 1e-9);
        }

        #[test]
        fn softmax_rows_normalized_and_shift_invariant(seed in any::<u64>(), rows in 1usize..8, cols in 1usize..8, shift in -50.0f64..50.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = random(rows, cols, &mut rng).map(|x| x * 10.0);
            let s = softmax_rows(&m);
            for r in 0..rows {
                prop_assert!((s.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
            let shifted = softmax_rows(&m.map(|x| x + shift));
            prop_assert!(s.max_abs_diff(&shifted) < 1e-9);
        }

        #[test]
        fn param_zero_grad_is_exact(rows in 1usize..5, cols in 1usize..5, v in -3.0f64..3.0) {
            let mut p = Param::new(Matrix::zeros(rows, cols));
            p.accumulate(&Matrix::zeros(rows, cols).map(|_| v)).unwrap();
            p.zero_grad();
            prop_assert!(p.grad.data().iter().all(|&g| g == 0.0));
            prop_assert_eq!(p.grad.shape(), p.value.shape());
        }
    }
}
