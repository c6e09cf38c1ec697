use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const JACOBI_TOL: f64 = 1e-10;
const JACOBI_MAX_SWEEPS: usize = 100;

/// Dense symmetric matrix. Symmetry is exact: the constructor copies the
/// averaged upper triangle into the lower one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymMatrix {
    data: Array2<f64>,
}

impl SymMatrix {
    pub fn new(a: Array2<f64>) -> Result<Self> {
        let (r, c) = a.dim();
        if r != c {
            return Err(Error::InvalidInput(format!("matrix is {r}x{c}, not square")));
        }
        let mut data = a;
        for i in 0..r {
            for j in (i + 1)..r {
                let v = 0.5 * (data[[i, j]] + data[[j, i]]);
                data[[i, j]] = v;
                data[[j, i]] = v;
            }
        }
        Ok(Self { data })
    }

    pub fn zeros(d: usize) -> Self {
        Self {
            data: Array2::zeros((d, d)),
        }
    }

    pub fn identity(d: usize) -> Self {
        Self {
            data: Array2::eye(d),
        }
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let mut data = Array2::zeros((diag.len(), diag.len()));
        for (i, &v) in diag.iter().enumerate() {
            data[[i, i]] = v;
        }
        Self { data }
    }

    pub fn dim(&self) -> usize {
        self.data.nrows()
    }

    pub fn as_array(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn into_array(self) -> Array2<f64> {
        self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[[i, j]]
    }

    pub fn trace(&self) -> f64 {
        self.data.diag().sum()
    }

    pub fn frobenius(&self) -> f64 {
        frobenius(&self.data.view())
    }

    /// `a*self + b*other`, still exactly symmetric.
    pub fn lincomb(&self, a: f64, other: &SymMatrix, b: f64) -> SymMatrix {
        let data = &self.data * a + &other.data * b;
        SymMatrix { data }
    }

    pub fn add_ridge(&self, lambda: f64) -> SymMatrix {
        let mut data = self.data.clone();
        for i in 0..data.nrows() {
            data[[i, i]] += lambda;
        }
        SymMatrix { data }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Eigen-decomposition of a symmetric matrix; `vectors.column(j)` pairs
/// with `values[j]`, values descending.
#[derive(Debug, Clone)]
pub struct EigenDecomp {
    pub values: Array1<f64>,
    pub vectors: Array2<f64>,
}

impl EigenDecomp {
    /// First `q` eigenvectors as a d×q matrix.
    pub fn top(&self, q: usize) -> Array2<f64> {
        self.vectors.slice(s![.., ..q]).to_owned()
    }

    /// Trailing eigenvectors after the first `q`.
    pub fn bottom(&self, q: usize) -> Array2<f64> {
        self.vectors.slice(s![.., q..]).to_owned()
    }

    /// Rebuild `V f(Λ) Vᵀ` for a scalar function of the eigenvalues.
    pub fn apply(&self, f: impl Fn(f64) -> f64) -> SymMatrix {
        let scaled = &self.vectors * &self.values.mapv(f).view().insert_axis(Axis(0));
        SymMatrix {
            data: sym_product(&scaled.dot(&self.vectors.t())),
        }
    }
}

pub fn frobenius(a: &ArrayView2<f64>) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn sym_product(a: &Array2<f64>) -> Array2<f64> {
    let n = a.nrows();
    let mut out = a.clone();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (a[[i, j]] + a[[j, i]]);
            out[[i, j]] = v;
            out[[j, i]] = v;
        }
    }
    out
}

/// Column means with a sequential f64 accumulation.
pub fn column_means(x: &ArrayView2<f64>) -> Array1<f64> {
    let (n, d) = x.dim();
    let mut mu = Array1::<f64>::zeros(d);
    for row in x.rows() {
        mu += &row;
    }
    if n > 0 {
        mu /= n as f64;
    }
    mu
}

/// Column means that do not depend on row order: each column is sorted
/// before summation, so any permutation of the rows yields identical bits.
pub fn column_means_sorted(x: &ArrayView2<f64>) -> Array1<f64> {
    let (n, d) = x.dim();
    let mut mu = Array1::<f64>::zeros(d);
    let mut col = vec![0.0f64; n];
    for j in 0..d {
        for (i, v) in col.iter_mut().enumerate() {
            *v = x[[i, j]];
        }
        col.sort_by(f64::total_cmp);
        mu[j] = col.iter().sum::<f64>() / n as f64;
    }
    mu
}

/// Population second-moment matrix `(1/n) Σ (zᵢ−μ)(zᵢ−μ)ᵀ`, or uncentered
/// when `center` is false.
pub fn covariance(x: &ArrayView2<f64>, center: bool) -> Result<SymMatrix> {
    let n = x.nrows();
    if n < 2 {
        return Err(Error::insufficient(2, n));
    }
    let gram = if center {
        let mu = column_means(x);
        let xc = x - &mu.view().insert_axis(Axis(0));
        xc.t().dot(&xc)
    } else {
        x.t().dot(x)
    };
    SymMatrix::new(gram / n as f64)
}

/// Centered cross-covariance `(1/n) Σ x̄ᵢ ȳᵢᵀ` of index-aligned rows.
pub fn cross_covariance(x: &ArrayView2<f64>, y: &ArrayView2<f64>) -> Result<Array2<f64>> {
    if x.dim() != y.dim() {
        return Err(Error::PairMismatch(format!(
            "x is {:?}, y is {:?}",
            x.dim(),
            y.dim()
        )));
    }
    let n = x.nrows();
    if n < 2 {
        return Err(Error::insufficient(2, n));
    }
    let xc = x - &column_means(x).insert_axis(Axis(0));
    let yc = y - &column_means(y).insert_axis(Axis(0));
    Ok(xc.t().dot(&yc) / n as f64)
}

/// Full symmetric eigen-decomposition by cyclic Jacobi rotations.
///
/// Stops once the off-diagonal Frobenius norm drops below
/// `1e-10·‖M‖_F` or after 100 sweeps. Eigenvalues come back descending;
/// ties keep their Jacobi order. Each eigenvector is signed so that its
/// largest-magnitude entry is positive.
pub fn sym_eig(m: &SymMatrix) -> Result<EigenDecomp> {
    if !m.is_finite() {
        return Err(Error::InvalidInput("non-finite matrix entry".into()));
    }
    let n = m.dim();
    let mut a: Vec<f64> = m.as_array().iter().copied().collect();
    // vt holds eigenvectors as rows so rotations touch contiguous memory
    let mut vt = vec![0.0f64; n * n];
    for i in 0..n {
        vt[i * n + i] = 1.0;
    }
    let norm = m.frobenius();
    if norm > 0.0 {
        for _ in 0..JACOBI_MAX_SWEEPS {
            let mut off = 0.0;
            for i in 0..n {
                for j in 0..n {
                    if i != j {
                        off += a[i * n + j] * a[i * n + j];
                    }
                }
            }
            if off.sqrt() <= JACOBI_TOL * norm {
                break;
            }
            for p in 0..n {
                for q in (p + 1)..n {
                    rotate(&mut a, &mut vt, n, p, q);
                }
            }
        }
    }

    let diag: Vec<f64> = (0..n).map(|i| a[i * n + i]).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| diag[j].total_cmp(&diag[i]));

    let mut values = Array1::zeros(n);
    let mut vectors = Array2::zeros((n, n));
    for (col, &src) in order.iter().enumerate() {
        values[col] = diag[src];
        let row = &vt[src * n..(src + 1) * n];
        let mut pivot = 0;
        for k in 1..n {
            if row[k].abs() > row[pivot].abs() {
                pivot = k;
            }
        }
        let sign = if row[pivot] < 0.0 { -1.0 } else { 1.0 };
        for k in 0..n {
            vectors[[k, col]] = sign * row[k];
        }
    }
    Ok(EigenDecomp { values, vectors })
}

fn rotate(a: &mut [f64], vt: &mut [f64], n: usize, p: usize, q: usize) {
    let apq = a[p * n + q];
    if apq == 0.0 {
        return;
    }
    let app = a[p * n + p];
    let aqq = a[q * n + q];
    let theta = (aqq - app) / (2.0 * apq);
    let t = if theta.is_infinite() {
        0.0
    } else {
        theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
    };
    if t == 0.0 {
        return;
    }
    let c = 1.0 / (t * t + 1.0).sqrt();
    let s = t * c;

    for k in 0..n {
        if k == p || k == q {
            continue;
        }
        let akp = a[k * n + p];
        let akq = a[k * n + q];
        let np = c * akp - s * akq;
        let nq = s * akp + c * akq;
        a[k * n + p] = np;
        a[p * n + k] = np;
        a[k * n + q] = nq;
        a[q * n + k] = nq;
    }
    a[p * n + p] = app - t * apq;
    a[q * n + q] = aqq + t * apq;
    a[p * n + q] = 0.0;
    a[q * n + p] = 0.0;

    let (lo, hi) = vt.split_at_mut(q * n);
    let rp = &mut lo[p * n..(p + 1) * n];
    let rq = &mut hi[..n];
    for k in 0..n {
        let vp = rp[k];
        let vq = rq[k];
        rp[k] = c * vp - s * vq;
        rq[k] = s * vp + c * vq;
    }
}

/// Largest absolute deviation of `QᵀQ` from the identity.
pub fn gram_deviation(q: &ArrayView2<f64>) -> f64 {
    let g = q.t().dot(q);
    let mut worst = 0.0f64;
    for ((i, j), v) in g.indexed_iter() {
        let target = if i == j { 1.0 } else { 0.0 };
        worst = worst.max((v - target).abs());
    }
    worst
}

/// Orthonormalize columns in place by modified Gram–Schmidt.
pub fn modified_gram_schmidt(a: &mut Array2<f64>) -> Result<()> {
    let q = a.ncols();
    for j in 0..q {
        for i in 0..j {
            let (done, mut rest) = a.view_mut().split_at(Axis(1), j);
            let qi = done.column(i);
            let mut vj = rest.column_mut(0);
            let proj = qi.dot(&vj);
            vj.scaled_add(-proj, &qi);
        }
        let mut col = a.column_mut(j);
        let norm = col.dot(&col).sqrt();
        if !(norm > 1e-300) {
            return Err(Error::InvalidInput(format!("column {j} is linearly dependent")));
        }
        col /= norm;
    }
    Ok(())
}

/// Solve `A X = B` by Gaussian elimination with partial pivoting.
pub fn solve(a: &Array2<f64>, b: &Array2<f64>) -> Result<Array2<f64>> {
    let n = a.nrows();
    if a.ncols() != n || b.nrows() != n {
        return Err(Error::InvalidInput("solve: shape mismatch".into()));
    }
    let mut m = a.clone();
    let mut x = b.clone();
    for k in 0..n {
        let mut piv = k;
        for i in (k + 1)..n {
            if m[[i, k]].abs() > m[[piv, k]].abs() {
                piv = i;
            }
        }
        if m[[piv, k]] == 0.0 {
            return Err(Error::InvalidInput("solve: singular matrix".into()));
        }
        if piv != k {
            for j in 0..n {
                m.swap([k, j], [piv, j]);
            }
            for j in 0..x.ncols() {
                x.swap([k, j], [piv, j]);
            }
        }
        let d = m[[k, k]];
        for i in (k + 1)..n {
            let f = m[[i, k]] / d;
            if f == 0.0 {
                continue;
            }
            for j in k..n {
                m[[i, j]] -= f * m[[k, j]];
            }
            for j in 0..x.ncols() {
                x[[i, j]] -= f * x[[k, j]];
            }
        }
    }
    for k in (0..n).rev() {
        for j in 0..x.ncols() {
            let mut acc = x[[k, j]];
            for i in (k + 1)..n {
                acc -= m[[k, i]] * x[[i, j]];
            }
            x[[k, j]] = acc / m[[k, k]];
        }
    }
    Ok(x)
}
