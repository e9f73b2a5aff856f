//! Dense complex linear algebra glue around `faer`.

use faer::linalg::solvers::{PartialPivLu, Solve};
use faer::Mat;
use num_complex::Complex64 as C64;

use crate::error::{Error, Result};

pub type CMat = Mat<C64>;

/// Condition numbers above this are treated as singular.
pub const SINGULAR_CONDITION: f64 = 1e14;

/// Backward error accepted after a direct solve.
pub const RESIDUAL_TOLERANCE: f64 = 1e-10;

/// Partial-pivot LU of a square complex matrix with a 1-norm condition
/// estimate.
pub struct DenseLu {
    lu: PartialPivLu<C64>,
    dim: usize,
    norm1: f64,
}

impl DenseLu {
    pub fn new(a: &CMat) -> Self {
        assert_eq!(a.nrows(), a.ncols(), "LU needs a square matrix");
        Self {
            lu: a.partial_piv_lu(),
            dim: a.nrows(),
            norm1: norm1(a),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn solve(&self, b: &[C64]) -> Vec<C64> {
        let mut x = Mat::from_fn(self.dim, 1, |i, _| b[i]);
        self.lu.solve_in_place(&mut x);
        x.col_as_slice(0).to_vec()
    }

    pub fn solve_adjoint(&self, b: &[C64]) -> Vec<C64> {
        let mut x = Mat::from_fn(self.dim, 1, |i, _| b[i]);
        self.lu.solve_adjoint_in_place(&mut x);
        x.col_as_slice(0).to_vec()
    }

    /// Solves for several right-hand sides stored as columns.
    pub fn solve_mat(&self, b: &CMat) -> CMat {
        let mut x = b.clone();
        self.lu.solve_in_place(&mut x);
        x
    }

    /// Hager/Higham estimate of `||A||_1 ||A^-1||_1`.
    pub fn condition_estimate(&self) -> f64 {
        let n = self.dim;
        if n == 0 {
            return 1.0;
        }
        let mut x = vec![C64::new(1.0 / n as f64, 0.0); n];
        let mut estimate = 0.0;
        let mut last_j = usize::MAX;
        for _ in 0..5 {
            let y = self.solve(&x);
            if y.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
                return f64::INFINITY;
            }
            estimate = y.iter().map(|v| v.norm()).sum::<f64>();
            let xi: Vec<C64> = y
                .iter()
                .map(|v| {
                    let r = v.norm();
                    if r > 0.0 {
                        v / r
                    } else {
                        C64::new(1.0, 0.0)
                    }
                })
                .collect();
            let z = self.solve_adjoint(&xi);
            let (j, zmax) = z
                .iter()
                .enumerate()
                .map(|(i, v)| (i, v.norm()))
                .fold((0, -1.0), |acc, v| if v.1 > acc.1 { v } else { acc });
            let ztx: f64 = z.iter().zip(&x).map(|(zi, xi)| (zi.conj() * xi).re).sum();
            if zmax <= ztx || j == last_j {
                break;
            }
            last_j = j;
            x = vec![C64::new(0.0, 0.0); n];
            x[j] = C64::new(1.0, 0.0);
        }
        estimate * self.norm1
    }
}

/// Maximum absolute column sum.
pub fn norm1(a: &CMat) -> f64 {
    (0..a.ncols())
        .map(|j| (0..a.nrows()).map(|i| a[(i, j)].norm()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Maximum absolute row sum.
pub fn norm_inf(a: &CMat) -> f64 {
    (0..a.nrows())
        .map(|i| (0..a.ncols()).map(|j| a[(i, j)].norm()).sum::<f64>())
        .fold(0.0, f64::max)
}

pub fn matvec(a: &CMat, x: &[C64]) -> Vec<C64> {
    let mut y = vec![C64::new(0.0, 0.0); a.nrows()];
    for j in 0..a.ncols() {
        let xj = x[j];
        if xj == C64::new(0.0, 0.0) {
            continue;
        }
        for (i, yi) in y.iter_mut().enumerate() {
            *yi += a[(i, j)] * xj;
        }
    }
    y
}

/// Normwise backward error `||Ax - b|| / (||A|| ||x|| + ||b||)` in the max norm.
pub fn backward_error(a: &CMat, x: &[C64], b: &[C64]) -> f64 {
    let ax = matvec(a, x);
    let r = ax.iter().zip(b).map(|(u, v)| (u - v).norm()).fold(0.0, f64::max);
    let xn = x.iter().map(|v| v.norm()).fold(0.0, f64::max);
    let bn = b.iter().map(|v| v.norm()).fold(0.0, f64::max);
    let denom = norm_inf(a) * xn + bn;
    if denom == 0.0 {
        0.0
    } else {
        r / denom
    }
}

/// Direct solve with singularity and residual checks plus one step of
/// iterative refinement when the first residual is not acceptable.
pub fn solve_checked(a: &CMat, b: &[C64], context: &'static str) -> Result<(Vec<C64>, f64)> {
    let lu = DenseLu::new(a);
    let condition = lu.condition_estimate();
    if !condition.is_finite() || condition > SINGULAR_CONDITION {
        return Err(Error::Singular { context, condition });
    }
    let mut x = lu.solve(b);
    if x.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
        return Err(Error::Singular { context, condition: f64::INFINITY });
    }
    let mut err = backward_error(a, &x, b);
    if err > RESIDUAL_TOLERANCE {
        let ax = matvec(a, &x);
        let r: Vec<C64> = b.iter().zip(&ax).map(|(u, v)| u - v).collect();
        let dx = lu.solve(&r);
        for (xi, di) in x.iter_mut().zip(&dx) {
            *xi += di;
        }
        err = backward_error(a, &x, b);
    }
    if err > RESIDUAL_TOLERANCE {
        return Err(Error::Residual {
            context,
            residual: err,
            tolerance: RESIDUAL_TOLERANCE,
        });
    }
    Ok((x, condition))
}

/// Pole expansion `ℓ·(sI - M)⁻¹·r = Σ_k c_k / (s - λ_k)` from one
/// eigendecomposition of a general complex matrix `M`.
#[derive(Debug, Clone)]
pub struct PoleExpansion {
    poles: Vec<C64>,
    residues: Vec<C64>,
    condition: f64,
}

impl PoleExpansion {
    pub fn new(m: &CMat, left: &[C64], rhs: &[C64]) -> Result<Self> {
        let n = m.nrows();
        let evd = m.eigen().map_err(|e| Error::Eigen(format!("{e:?}")))?;
        let vecs: CMat = evd.U().to_owned();
        let poles: Vec<C64> = (0..n).map(|k| evd.S()[k]).collect();
        let lu = DenseLu::new(&vecs);
        let condition = lu.condition_estimate();
        let weights = lu.solve(rhs);
        let residues: Vec<C64> = (0..n)
            .map(|k| {
                let proj: C64 = (0..n).map(|i| left[i] * vecs[(i, k)]).sum();
                proj * weights[k]
            })
            .collect();
        if residues.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
            return Err(Error::Eigen("non-finite eigenvector projection".into()));
        }
        Ok(Self {
            poles,
            residues,
            condition,
        })
    }

    pub fn poles(&self) -> &[C64] {
        &self.poles
    }

    /// Condition estimate of the eigenvector matrix.
    pub fn condition(&self) -> f64 {
        self.condition
    }

    pub fn eval(&self, s: C64) -> C64 {
        self.poles.iter().zip(&self.residues).map(|(l, c)| c / (s - l)).sum()
    }
}

/// `ℓ·(sI - M)⁻¹·r` through one unitary reduction `M = Q H Q†` to upper
/// Hessenberg form, then an O(n²) pivoted solve of `(sI - H) y = Q† r` per
/// shift. Stable regardless of the conditioning of the eigenvectors.
#[derive(Debug, Clone)]
pub struct HessenbergResolvent {
    n: usize,
    /// Row-major `H`.
    h: Vec<C64>,
    left_q: Vec<C64>,
    rhs_q: Vec<C64>,
}

impl HessenbergResolvent {
    pub fn new(m: &CMat, left: &[C64], rhs: &[C64]) -> Self {
        let n = m.nrows();
        let mut a: Vec<C64> = (0..n * n).map(|p| m[(p / n, p % n)]).collect();
        let mut l = left.to_vec();
        let mut r = rhs.to_vec();
        let zero = C64::new(0.0, 0.0);
        for k in 0..n.saturating_sub(2) {
            let mut v: Vec<C64> = (k + 1..n).map(|i| a[i * n + k]).collect();
            let norm = v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
            if norm == 0.0 {
                continue;
            }
            let phase = if v[0].norm() > 0.0 { v[0] / v[0].norm() } else { C64::new(1.0, 0.0) };
            v[0] += phase * norm;
            let vn = v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
            v.iter_mut().for_each(|z| *z /= vn);
            // A <- (I - 2vv†) A on rows k+1..
            for j in k..n {
                let dot: C64 = v.iter().enumerate().map(|(t, vi)| vi.conj() * a[(k + 1 + t) * n + j]).sum();
                for (t, vi) in v.iter().enumerate() {
                    a[(k + 1 + t) * n + j] -= 2.0 * vi * dot;
                }
            }
            // A <- A (I - 2vv†) on columns k+1..
            for i in 0..n {
                let row = &mut a[i * n + k + 1..i * n + n];
                let dot: C64 = row.iter().zip(&v).map(|(x, vi)| x * vi).sum();
                for (x, vi) in row.iter_mut().zip(&v) {
                    *x -= 2.0 * dot * vi.conj();
                }
            }
            for i in k + 2..n {
                a[i * n + k] = zero;
            }
            let dot: C64 = v.iter().enumerate().map(|(t, vi)| vi.conj() * r[k + 1 + t]).sum();
            for (t, vi) in v.iter().enumerate() {
                r[k + 1 + t] -= 2.0 * vi * dot;
            }
            let dot: C64 = v.iter().enumerate().map(|(t, vi)| l[k + 1 + t] * vi).sum();
            for (t, vi) in v.iter().enumerate() {
                l[k + 1 + t] -= 2.0 * dot * vi.conj();
            }
        }
        Self {
            n,
            h: a,
            left_q: l,
            rhs_q: r,
        }
    }

    /// Non-finite when `s` is an eigenvalue to working precision.
    pub fn eval(&self, s: C64) -> C64 {
        let n = self.n;
        let mut m: Vec<C64> = self.h.iter().map(|x| -x).collect();
        for i in 0..n {
            m[i * n + i] += s;
        }
        let mut b = self.rhs_q.clone();
        for k in 0..n.saturating_sub(1) {
            let (p, q) = (k * n, (k + 1) * n);
            if m[q + k].norm() > m[p + k].norm() {
                for j in k..n {
                    m.swap(p + j, q + j);
                }
                b.swap(k, k + 1);
            }
            let f = m[q + k] / m[p + k];
            for j in k + 1..n {
                let upper = m[p + j];
                m[q + j] -= f * upper;
            }
            b[k + 1] = b[k + 1] - f * b[k];
        }
        for k in (0..n).rev() {
            let mut acc = b[k];
            for j in k + 1..n {
                acc -= m[k * n + j] * b[j];
            }
            b[k] = acc / m[k * n + k];
        }
        self.left_q.iter().zip(&b).map(|(l, y)| l * y).sum()
    }
}

/// Conjugate transpose.
pub fn adjoint(a: &CMat) -> CMat {
    Mat::from_fn(a.ncols(), a.nrows(), |i, j| a[(j, i)].conj())
}

pub fn matmul(a: &CMat, b: &CMat) -> CMat {
    a * b
}
