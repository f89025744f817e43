//! Dense f64 matrix helpers for the toy model.
//!
//! All reductions run in a fixed ascending-index order so that repeated runs
//! produce bit-identical results.

#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len());
        Mat { rows, cols, data }
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    /// self @ b, (M,K) x (K,N) -> (M,N). Accumulates in ascending k.
    pub fn matmul(&self, b: &Mat) -> Mat {
        assert_eq!(self.cols, b.rows);
        let mut c = Mat::zeros(self.rows, b.cols);
        for i in 0..self.rows {
            let a_row = self.row(i);
            let c_row = c.row_mut(i);
            for (k, &a_ik) in a_row.iter().enumerate() {
                if a_ik == 0.0 {
                    continue;
                }
                let b_row = b.row(k);
                for (c_v, &b_v) in c_row.iter_mut().zip(b_row) {
                    *c_v += a_ik * b_v;
                }
            }
        }
        c
    }

    /// self^T @ b, (M,K)^T x (M,N) -> (K,N). Used for weight gradients.
    pub fn matmul_tn(&self, b: &Mat) -> Mat {
        assert_eq!(self.rows, b.rows);
        let mut c = Mat::zeros(self.cols, b.cols);
        for m in 0..self.rows {
            let a_row = self.row(m);
            let b_row = b.row(m);
            for (k, &a_mk) in a_row.iter().enumerate() {
                if a_mk == 0.0 {
                    continue;
                }
                let c_row = c.row_mut(k);
                for (c_v, &b_v) in c_row.iter_mut().zip(b_row) {
                    *c_v += a_mk * b_v;
                }
            }
        }
        c
    }

    /// self @ b^T, (M,K) x (N,K)^T -> (M,N).
    pub fn matmul_nt(&self, b: &Mat) -> Mat {
        assert_eq!(self.cols, b.cols);
        let mut c = Mat::zeros(self.rows, b.rows);
        for i in 0..self.rows {
            let a_row = self.row(i);
            let c_row = c.row_mut(i);
            for (j, c_v) in c_row.iter_mut().enumerate() {
                *c_v = dot(a_row, b.row(j));
            }
        }
        c
    }

    pub fn add_row_bias(&mut self, bias: &[f64]) {
        assert_eq!(self.cols, bias.len());
        for i in 0..self.rows {
            for (x, &b) in self.row_mut(i).iter_mut().zip(bias) {
                *x += b;
            }
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

/// Row-vector times matrix: out[j] = sum_k x[k] * w[k*cols + j].
/// Same accumulation order as [`Mat::matmul`] on a one-row matrix.
pub fn vec_mat(x: &[f64], w: &Mat) -> Vec<f64> {
    assert_eq!(x.len(), w.rows);
    let mut out = vec![0.0; w.cols];
    for (k, &xk) in x.iter().enumerate() {
        if xk == 0.0 {
            continue;
        }
        for (o, &wv) in out.iter_mut().zip(w.row(k)) {
            *o += xk * wv;
        }
    }
    out
}

/// In-place numerically stable softmax.
pub fn softmax_inplace(xs: &mut [f64]) {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in xs.iter_mut() {
        *x /= sum;
    }
}

/// log(sum(exp(xs))) with max subtraction.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for &x in xs {
        sum += (x - max).exp();
    }
    max + sum.ln()
}

pub const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        let a = Mat::from_vec(2, 3, vec![1., 2., 3., 4., 5., 6.]);
        let b = Mat::from_vec(3, 2, vec![7., 8., 9., 10., 11., 12.]);
        let c = a.matmul(&b);
        assert_eq!(c.data, vec![58., 64., 139., 154.]);
    }

    #[test]
    fn matmul_variants_agree() {
        let a = Mat::from_vec(2, 3, vec![1., -2., 3., 0.5, 5., -6.]);
        let b = Mat::from_vec(2, 3, vec![1., 1., 2., -1., 0., 3.]);
        // a @ b^T via matmul_nt vs manual transpose
        let mut bt = Mat::zeros(3, 2);
        for i in 0..2 {
            for j in 0..3 {
                bt.data[j * 2 + i] = b.at(i, j);
            }
        }
        let c1 = a.matmul_nt(&b);
        let c2 = a.matmul(&bt);
        for (x, y) in c1.data.iter().zip(&c2.data) {
            assert!((x - y).abs() < 1e-14);
        }
        // a^T @ b via matmul_tn
        let mut at = Mat::zeros(3, 2);
        for i in 0..2 {
            for j in 0..3 {
                at.data[j * 2 + i] = a.at(i, j);
            }
        }
        let c3 = a.matmul_tn(&b);
        let c4 = at.matmul(&b);
        for (x, y) in c3.data.iter().zip(&c4.data) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn vec_mat_matches_matmul() {
        let w = Mat::from_vec(3, 2, vec![1., 2., 3., 4., 5., 6.]);
        let x = vec![1., -1., 2.];
        let got = vec_mat(&x, &w);
        let a = Mat::from_vec(1, 3, x);
        let want = a.matmul(&w);
        assert_eq!(got, want.data);
    }

    #[test]
    fn softmax_sums_to_one() {
        let mut xs = vec![1.0, 2.0, 3.0, -100.0];
        softmax_inplace(&mut xs);
        assert!((xs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(xs[2] > xs[1] && xs[1] > xs[0]);
    }

    #[test]
    fn gelu_grad_matches_finite_difference() {
        for &x in &[-3.0, -1.0, -0.1, 0.0, 0.5, 2.0] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((gelu_grad(x) - fd).abs() < 1e-8, "x={x}");
        }
    }
}
