//! Dense kernels shared by the forward and backward passes. Matrices are
//! row-major and contiguous.

use num_traits::Float;

pub trait Scalar: Float + Default + std::fmt::Debug + Send + Sync + 'static {
    /// `C = alpha·op(A)·op(B) + beta·C` with explicit strides.
    ///
    /// # Safety
    /// The pointers and strides must describe valid, non-overlapping
    /// `m×k`, `k×n` and `m×n` matrices.
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

    fn from_f64(x: f64) -> Self {
        <Self as num_traits::NumCast>::from(x).expect("finite")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite")
    }
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
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
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
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// `C (m×n) = op(A)·op(B) (+ C when accumulating)`, where `op(A)` is m×k and
/// `op(B)` is k×n. A transposed operand is stored in its untransposed shape.
#[allow(clippy::too_many_arguments)]
pub fn matmul<S: Scalar>(
    c: &mut [S],
    a: &[S],
    b: &[S],
    m: usize,
    k: usize,
    n: usize,
    trans_a: bool,
    trans_b: bool,
    accumulate: bool,
) {
    assert!(c.len() >= m * n && a.len() >= m * k && b.len() >= k * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { S::one() } else { S::zero() };
    // SAFETY: the asserts above bound every index the strides can reach.
    unsafe {
        S::gemm_raw(
            m,
            k,
            n,
            S::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        )
    }
}

pub const LN_EPS: f64 = 1e-5;

/// Row-wise layer norm; keeps the normalized input and inverse std for the
/// backward pass.
pub fn layernorm<S: Scalar>(x: &[S], g: &[S], b: &[S], d: usize, out: &mut [S], xhat: &mut [S], rstd: &mut [S]) {
    let eps = S::from_f64(LN_EPS);
    let inv_d = S::from_f64(1.0 / d as f64);
    for (r, row) in x.chunks_exact(d).enumerate() {
        let mean = row.iter().fold(S::zero(), |s, &v| s + v) * inv_d;
        let var = row.iter().fold(S::zero(), |s, &v| s + (v - mean) * (v - mean)) * inv_d;
        let rs = S::one() / (var + eps).sqrt();
        rstd[r] = rs;
        let xh = &mut xhat[r * d..(r + 1) * d];
        let o = &mut out[r * d..(r + 1) * d];
        for j in 0..d {
            xh[j] = (row[j] - mean) * rs;
            o[j] = xh[j] * g[j] + b[j];
        }
    }
}

/// Accumulates into `dx`, `dg` and `db`.
#[allow(clippy::too_many_arguments)]
pub fn layernorm_backward<S: Scalar>(
    dy: &[S],
    xhat: &[S],
    rstd: &[S],
    g: &[S],
    d: usize,
    dx: &mut [S],
    dg: &mut [S],
    db: &mut [S],
) {
    let inv_d = S::from_f64(1.0 / d as f64);
    let mut dxhat = vec![S::zero(); d];
    for r in 0..rstd.len() {
        let dyr = &dy[r * d..(r + 1) * d];
        let xh = &xhat[r * d..(r + 1) * d];
        let mut m1 = S::zero();
        let mut m2 = S::zero();
        for j in 0..d {
            dg[j] = dg[j] + dyr[j] * xh[j];
            db[j] = db[j] + dyr[j];
            dxhat[j] = dyr[j] * g[j];
            m1 = m1 + dxhat[j];
            m2 = m2 + dxhat[j] * xh[j];
        }
        m1 = m1 * inv_d;
        m2 = m2 * inv_d;
        let dxr = &mut dx[r * d..(r + 1) * d];
        for j in 0..d {
            dxr[j] = dxr[j] + rstd[r] * (dxhat[j] - m1 - xh[j] * m2);
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/π)

/// Tanh-approximated GELU.
pub fn gelu<S: Scalar>(x: S) -> S {
    let c = S::from_f64(GELU_C);
    let k = S::from_f64(0.044715);
    let half = S::from_f64(0.5);
    half * x * (S::one() + (c * (x + k * x * x * x)).tanh())
}

pub fn gelu_grad<S: Scalar>(x: S) -> S {
    let c = S::from_f64(GELU_C);
    let k = S::from_f64(0.044715);
    let half = S::from_f64(0.5);
    let three = S::from_f64(3.0);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    half * (S::one() + t) + half * x * (S::one() - t * t) * c * (S::one() + three * k * x * x)
}

pub fn add_row_bias<S: Scalar>(x: &mut [S], bias: &[S]) {
    for row in x.chunks_exact_mut(bias.len()) {
        for (v, &b) in row.iter_mut().zip(bias) {
            *v = *v + b;
        }
    }
}

pub fn accumulate_col_sums<S: Scalar>(dx: &[S], dbias: &mut [S]) {
    for row in dx.chunks_exact(dbias.len()) {
        for (g, &v) in dbias.iter_mut().zip(row) {
            *g = *g + v;
        }
    }
}

/// In-place softmax; returns the log normalizer.
pub fn softmax_in_place<S: Scalar>(row: &mut [S]) -> S {
    let max = row.iter().fold(S::neg_infinity(), |m, &v| m.max(v));
    let mut sum = S::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    let inv = S::one() / sum;
    for v in row.iter_mut() {
        *v = *v * inv;
    }
    max + sum.ln()
}
