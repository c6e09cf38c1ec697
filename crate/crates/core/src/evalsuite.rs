//! Representation-level metrics for a substitute corpus `Z = T(Y)` against
//! held-out targets `X`.

use std::fmt::Write as _;

use ndarray::{s, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{residual_covariance, ResidualSpectrum};
use crate::error::{Error, Result};
use crate::numerics::{column_means_sorted, pearson};
use crate::rng::stream;
use crate::store::{normalize_rows, EmbeddingSet, PairedSet};

const QUERY_CHUNK: usize = 256;
const ALL_PAIRS_MAX_N: usize = 450;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    pub k: usize,
    pub pair_count: usize,
    pub permutations: usize,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            k: 20,
            pair_count: 100_000,
            permutations: 20,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub method: String,
    pub n: usize,
    pub phi: f64,
    pub psi: f64,
    pub omega_k: f64,
    pub m_z: f64,
    pub m_x: f64,
    pub a_r_t: f64,
    pub degenerate_residual: bool,
    pub residual_spectrum_t: Vec<f64>,
    /// `‖μ̂_Z − μ̂_X‖`
    pub delta_mu: f64,
    pub k: usize,
    pub pair_sample_size: usize,
}

fn check_same(a: &ArrayView2<f64>, b: &ArrayView2<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::PairMismatch(format!("{:?} vs {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

pub fn instance_consistency(y: &ArrayView2<f64>, z: &ArrayView2<f64>) -> Result<f64> {
    check_same(y, z)?;
    if y.nrows() == 0 {
        return Err(Error::insufficient(1, 0));
    }
    let total: f64 = y.outer_iter().zip(z.outer_iter()).map(|(a, b)| a.dot(&b)).sum();
    Ok(total / y.nrows() as f64)
}

/// Seeded index pairs `i ≠ j`; every unordered pair when `n` is small.
pub fn sample_pairs(n: usize, pair_count: usize, seed: u64) -> Vec<(usize, usize)> {
    if n <= ALL_PAIRS_MAX_N {
        return (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
    }
    let mut rng = stream(seed, 0);
    (0..pair_count)
        .map(|_| {
            let i = rng.random_range(0..n);
            let mut j = rng.random_range(0..n - 1);
            if j >= i {
                j += 1;
            }
            (i, j)
        })
        .collect()
}

pub fn relative_geometry(y: &ArrayView2<f64>, z: &ArrayView2<f64>, pair_count: usize, seed: u64) -> Result<f64> {
    check_same(y, z)?;
    let n = y.nrows();
    if n < 2 {
        return Err(Error::insufficient(2, n));
    }
    if pair_count < 2 {
        return Err(Error::InvalidInput(format!("pair_count {pair_count} < 2")));
    }
    let pairs = sample_pairs(n, pair_count, seed);
    let (a, b): (Vec<f64>, Vec<f64>) = pairs
        .iter()
        .map(|&(i, j)| (y.row(i).dot(&y.row(j)), z.row(i).dot(&z.row(j))))
        .unzip();
    pearson(&a, &b).ok_or_else(|| Error::DegenerateSpectrum("zero variance in pair similarities".into()))
}

/// Exact k nearest neighbours under cosine similarity, excluding self.
/// Rows must be unit norm. Ties go to the lower index.
pub fn knn(data: &ArrayView2<f64>, k: usize) -> Result<Vec<Vec<usize>>> {
    let n = data.nrows();
    if n <= k {
        return Err(Error::InvalidInput(format!("n={n} must exceed k={k}")));
    }
    let chunks: Vec<Vec<Vec<usize>>> = (0..n.div_ceil(QUERY_CHUNK))
        .into_par_iter()
        .map(|c| {
            let lo = c * QUERY_CHUNK;
            let hi = (lo + QUERY_CHUNK).min(n);
            let sims = data.slice(s![lo..hi, ..]).dot(&data.t());
            sims.outer_iter()
                .enumerate()
                .map(|(qi, row)| {
                    let me = lo + qi;
                    let mut idx: Vec<usize> = (0..n).filter(|&j| j != me).collect();
                    let cmp = |a: &usize, b: &usize| row[*b].total_cmp(&row[*a]).then(a.cmp(b));
                    idx.select_nth_unstable_by(k - 1, cmp);
                    idx.truncate(k);
                    idx.sort_unstable_by(cmp);
                    idx
                })
                .collect()
        })
        .collect();
    Ok(chunks.into_iter().flatten().collect())
}

pub fn neighborhood_consistency(y: &ArrayView2<f64>, z: &ArrayView2<f64>, k: usize) -> Result<f64> {
    check_same(y, z)?;
    if k == 0 {
        return Err(Error::InvalidInput("k must be positive".into()));
    }
    let (ny, nz) = rayon::join(|| knn(y, k), || knn(z, k));
    let (ny, nz) = (ny?, nz?);
    let total: usize = ny
        .iter()
        .zip(&nz)
        .map(|(a, b)| a.iter().filter(|i| b.contains(i)).count())
        .sum();
    Ok(total as f64 / (k * y.nrows()) as f64)
}

fn binary_entropy(p: f64) -> f64 {
    if p <= 0.0 || p >= 1.0 {
        0.0
    } else {
        -(p * p.log2() + (1.0 - p) * (1.0 - p).log2())
    }
}

/// Mean neighbourhood entropy per side for one labelling (`true` = X).
fn side_entropies(neigh: &[Vec<usize>], is_x: &[bool], k: usize) -> (f64, f64) {
    let (mut hz, mut hx, mut nz, mut nx) = (0.0, 0.0, 0usize, 0usize);
    for (u, nb) in neigh.iter().enumerate() {
        let p = nb.iter().filter(|&&j| is_x[j]).count() as f64 / k as f64;
        let h = binary_entropy(p);
        if is_x[u] {
            hx += h;
            nx += 1;
        } else {
            hz += h;
            nz += 1;
        }
    }
    (hz / nz as f64, hx / nx as f64)
}

/// Directional mixing scores `(M^Z, M^X)`: mean binary entropy of the
/// X-fraction among each point's k neighbours in the pooled set, per side,
/// divided by the same quantity under random origin relabelling.
pub fn mixing_scores(
    z: &ArrayView2<f64>,
    x: &ArrayView2<f64>,
    k: usize,
    permutations: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let (nz, nx) = (z.nrows(), x.nrows());
    if nz == 0 || nx == 0 {
        return Err(Error::InvalidInput("mixing needs both sets nonempty".into()));
    }
    if z.ncols() != x.ncols() {
        return Err(Error::PairMismatch(format!("d={} vs d={}", z.ncols(), x.ncols())));
    }
    if k == 0 || k >= nz + nx - 1 {
        return Err(Error::InvalidInput(format!("k={k} outside 1..{}", nz + nx - 1)));
    }
    if permutations == 0 {
        return Err(Error::InvalidInput("at least one permutation is needed".into()));
    }
    let pool = ndarray::concatenate(Axis(0), &[x.view(), z.view()]).expect("equal widths");
    let neigh = knn(&pool.view(), k)?;
    let labels: Vec<bool> = (0..nx + nz).map(|i| i < nx).collect();
    let (hz, hx) = side_entropies(&neigh, &labels, k);
    let mut rng = stream(seed, 0);
    let (mut bz, mut bx) = (0.0, 0.0);
    let mut perm = labels.clone();
    for _ in 0..permutations {
        perm.shuffle(&mut rng);
        let (a, b) = side_entropies(&neigh, &perm, k);
        bz += a;
        bx += b;
    }
    let (bz, bx) = (bz / permutations as f64, bx / permutations as f64);
    let ratio = |h: f64, b: f64| if b > 0.0 { h / b } else { 0.0 };
    Ok((ratio(hz, bz), ratio(hx, bx)))
}

/// Residual anisotropy of `rᵢ = xᵢ − zᵢ`. A zero residual is reported as
/// `A_r = 1` with a zero spectrum and the degenerate flag set.
pub fn method_residual(x: &ArrayView2<f64>, z: &ArrayView2<f64>) -> Result<(f64, Vec<f64>, bool)> {
    check_same(x, z)?;
    let pairs = PairedSet::new(
        EmbeddingSet::new(x.to_owned(), "image")?,
        EmbeddingSet::new(z.to_owned(), "substitute")?,
    )?;
    let sr = residual_covariance(&pairs)?;
    match ResidualSpectrum::from_matrix(&sr) {
        Ok(spec) => Ok((spec.anisotropy(), spec.normalized(), false)),
        Err(Error::DegenerateResidual(_)) => Ok((1.0, vec![0.0; x.ncols()], true)),
        Err(e) => Err(e),
    }
}

pub fn delta_mu(z: &ArrayView2<f64>, x: &ArrayView2<f64>) -> f64 {
    let diff = column_means_sorted(z) - column_means_sorted(x);
    diff.dot(&diff).sqrt()
}

/// Every metric for one method on held-out pairs `(x, y)` and substitutes
/// `z` (normalized here before scoring).
pub fn evaluate(
    method: &str,
    x: &ArrayView2<f64>,
    y: &ArrayView2<f64>,
    z: &ArrayView2<f64>,
    opts: &EvalOptions,
) -> Result<MetricReport> {
    check_same(x, y)?;
    check_same(y, z)?;
    let z = normalize_rows(&z.to_owned())?;
    let zv = z.view();
    let phi = instance_consistency(y, &zv)?;
    let psi = relative_geometry(y, &zv, opts.pair_count, opts.seed)?;
    let omega_k = neighborhood_consistency(y, &zv, opts.k)?;
    let (m_z, m_x) = mixing_scores(&zv, x, opts.k, opts.permutations, opts.seed)?;
    let (a_r_t, residual_spectrum_t, degenerate_residual) = method_residual(x, &zv)?;
    let n = x.nrows();
    Ok(MetricReport {
        method: method.to_string(),
        n,
        phi,
        psi,
        omega_k,
        m_z,
        m_x,
        a_r_t,
        degenerate_residual,
        residual_spectrum_t,
        delta_mu: delta_mu(&zv, x),
        k: opts.k,
        pair_sample_size: sample_pairs(n, opts.pair_count, opts.seed).len(),
    })
}

pub const CSV_HEADER: &str = "method,n,phi,psi,omega_k,m_z,m_x,a_r_t,delta_mu,k,pair_sample_size";

pub fn csv_row(r: &MetricReport) -> String {
    format!(
        "{},{},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9},{},{}",
        r.method, r.n, r.phi, r.psi, r.omega_k, r.m_z, r.m_x, r.a_r_t, r.delta_mu, r.k, r.pair_sample_size
    )
}

pub fn reports_csv(reports: &[MetricReport]) -> String {
    let mut s = format!("{CSV_HEADER}\n");
    for r in reports {
        let _ = writeln!(s, "{}", csv_row(r));
    }
    s
}

pub fn spectrum_csv(r: &MetricReport) -> String {
    let mut s = String::from("index,lambda\n");
    for (j, v) in r.residual_spectrum_t.iter().enumerate() {
        let _ = writeln!(s, "{},{v:.12e}", j + 1);
    }
    s
}
