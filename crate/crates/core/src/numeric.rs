//! Scalar abstraction and strided matrix products.
//!
//! Training and inference run in `f32`; the gradient check runs the same code
//! in `f64`. All matrices are dense row-major slices; transposed operands are
//! expressed through strides rather than copies.

use num_traits::Float;

pub trait Scalar:
    Float + Default + Send + Sync + std::fmt::Debug + std::fmt::Display + std::iter::Sum + 'static
{
    /// `c = alpha * a @ b + beta * c` over raw strided views.
    ///
    /// # Safety
    /// Callers must guarantee every addressed element is in bounds; [`gemm`]
    /// checks this before calling.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }

    fn from_f64(x: f64) -> f32 {
        x as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }

    fn from_f64(x: f64) -> f64 {
        x
    }

    fn as_f64(self) -> f64 {
        self
    }
}

/// A read-only strided matrix view into a slice.
#[derive(Clone, Copy)]
pub struct View<'a, S> {
    data: &'a [S],
    offset: usize,
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl<'a, S: Scalar> View<'a, S> {
    /// Dense row-major `rows x cols` matrix starting at the beginning of `data`.
    pub fn dense(data: &'a [S], rows: usize, cols: usize) -> Self {
        Self::strided(data, 0, rows, cols, cols, 1)
    }

    pub fn strided(data: &'a [S], offset: usize, rows: usize, cols: usize, rs: usize, cs: usize) -> Self {
        let view = View {
            data,
            offset,
            rows,
            cols,
            rs,
            cs,
        };
        assert!(view.in_bounds(data.len()), "matrix view out of bounds");
        view
    }

    pub fn t(self) -> Self {
        View {
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
            ..self
        }
    }

    fn in_bounds(&self, len: usize) -> bool {
        if self.rows == 0 || self.cols == 0 {
            return self.offset <= len;
        }
        self.offset + (self.rows - 1) * self.rs + (self.cols - 1) * self.cs < len
    }
}

/// A mutable strided matrix view.
pub struct ViewMut<'a, S> {
    data: &'a mut [S],
    offset: usize,
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl<'a, S: Scalar> ViewMut<'a, S> {
    pub fn dense(data: &'a mut [S], rows: usize, cols: usize) -> Self {
        Self::strided(data, 0, rows, cols, cols, 1)
    }

    pub fn strided(data: &'a mut [S], offset: usize, rows: usize, cols: usize, rs: usize, cs: usize) -> Self {
        let len = data.len();
        let view = ViewMut {
            data,
            offset,
            rows,
            cols,
            rs,
            cs,
        };
        let probe = View {
            data: &[] as &[S],
            offset,
            rows,
            cols,
            rs,
            cs,
        };
        assert!(probe.in_bounds(len), "mutable matrix view out of bounds");
        view
    }
}

/// `c = alpha * a @ b + beta * c`.
pub fn gemm<S: Scalar>(alpha: S, a: View<'_, S>, b: View<'_, S>, beta: S, c: ViewMut<'_, S>) {
    assert_eq!(a.cols, b.rows, "inner dimensions differ");
    assert_eq!(a.rows, c.rows, "output rows differ");
    assert_eq!(b.cols, c.cols, "output cols differ");
    if c.rows == 0 || c.cols == 0 {
        return;
    }
    // SAFETY: all three views were bounds-checked at construction, and `c`
    // is a unique borrow so it cannot alias `a` or `b`.
    unsafe {
        S::gemm_raw(
            a.rows,
            a.cols,
            b.cols,
            alpha,
            a.data.as_ptr().add(a.offset),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr().add(b.offset),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.data.as_mut_ptr().add(c.offset),
            c.rs as isize,
            c.cs as isize,
        );
    }
}

/// `out (m x n) = a (m x k) @ b (k x n)`, overwriting or accumulating.
pub fn matmul<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize, acc: bool) {
    let beta = if acc { S::one() } else { S::zero() };
    gemm(
        S::one(),
        View::dense(a, m, k),
        View::dense(b, k, n),
        beta,
        ViewMut::dense(out, m, n),
    );
}

/// `out (k x n) += a^T @ b` with `a: m x k`, `b: m x n`. Used for weight gradients.
pub fn matmul_tn_acc<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    gemm(
        S::one(),
        View::dense(a, m, k).t(),
        View::dense(b, m, n),
        S::one(),
        ViewMut::dense(out, k, n),
    );
}

/// `out (m x k) = a @ b^T` with `a: m x n`, `b: k x n`. Used for input gradients.
pub fn matmul_nt<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, n: usize, k: usize, acc: bool) {
    let beta = if acc { S::one() } else { S::zero() };
    gemm(
        S::one(),
        View::dense(a, m, n),
        View::dense(b, k, n).t(),
        beta,
        ViewMut::dense(out, m, k),
    );
}

pub fn add_bias<S: Scalar>(x: &mut [S], bias: &[S]) {
    for row in x.chunks_exact_mut(bias.len()) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v = *v + *b;
        }
    }
}

/// Adds the column sums of `x` into `out`.
pub fn col_sum_acc<S: Scalar>(x: &[S], out: &mut [S]) {
    for row in x.chunks_exact(out.len()) {
        for (o, v) in out.iter_mut().zip(row) {
            *o = *o + *v;
        }
    }
}

pub fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    a.iter().zip(b).map(|(x, y)| *x * *y).sum()
}

pub fn softmax_in_place<S: Scalar>(row: &mut [S]) {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    let mut sum = S::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

/// Index of the largest value among `candidates`; the first wins on ties.
pub fn argmax_among(values: &[f32], candidates: &[u32]) -> Option<u32> {
    let mut best: Option<(u32, f32)> = None;
    for &c in candidates {
        let v = values[c as usize];
        match best {
            Some((_, bv)) if v <= bv => {}
            _ => best = Some((c, v)),
        }
    }
    best.map(|(c, _)| c)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_matches_naive() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut c = vec![0.0; m * n];
        matmul(&a, &b, &mut c, m, k, n, false);
        for i in 0..m {
            for j in 0..n {
                let want: f64 = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
                assert!((c[i * n + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn transposed_products_match_naive() {
        let (m, k, n) = (4, 3, 2);
        let a: Vec<f64> = (0..m * k).map(|i| i as f64 - 3.0).collect();
        let b: Vec<f64> = (0..m * n).map(|i| (i as f64).sqrt()).collect();
        let mut out = vec![1.0; k * n];
        matmul_tn_acc(&a, &b, &mut out, m, k, n);
        for i in 0..k {
            for j in 0..n {
                let want: f64 = 1.0 + (0..m).map(|p| a[p * k + i] * b[p * n + j]).sum::<f64>();
                assert!((out[i * n + j] - want).abs() < 1e-12);
            }
        }
        let w: Vec<f64> = (0..k * n).map(|i| 0.5 * i as f64).collect();
        let mut g = vec![0.0; m * k];
        matmul_nt(&b, &w, &mut g, m, n, k, false);
        for i in 0..m {
            for j in 0..k {
                let want: f64 = (0..n).map(|p| b[i * n + p] * w[j * n + p]).sum();
                assert!((g[i * k + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    #[should_panic(expected = "out of bounds")]
    fn view_bounds_are_checked() {
        let data = [0.0f32; 5];
        let _ = View::dense(&data, 2, 3);
    }

    #[test]
    fn argmax_prefers_first_on_ties() {
        let v = [0.1, 0.5, 0.5, 0.2];
        assert_eq!(argmax_among(&v, &[0, 1, 2, 3]), Some(1));
        assert_eq!(argmax_among(&v, &[3, 0]), Some(3));
        assert_eq!(argmax_among(&v, &[]), None);
    }
}
