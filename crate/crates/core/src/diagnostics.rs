//! Geometric diagnostics of a modality pair: spectra, subspace overlap,
//! mean/residual decomposition and residual anisotropy.

use std::fmt::Write as _;

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{
    column_means, covariance, cross_covariance, frobenius, gram_deviation, pearson, sym_eig,
    SymMatrix,
};
use crate::store::PairedSet;

const SPECTRUM_FLOOR: f64 = 1e-12;
const G_SIGMA_EPS: f64 = 1e-12;
const FRAME_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub k: usize,
    pub value: f64,
    pub baseline: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub n: usize,
    pub d: usize,
    pub c_lambda: Option<f64>,
    pub overlap_curve: Vec<CurvePoint>,
    pub g_mu: f64,
    pub g_sigma: f64,
    pub d_mean: f64,
    pub d_tilde: f64,
    pub residual_ratio_dist: f64,
    pub residual_ratio_energy: f64,
    pub zero_gap: bool,
    pub a_r: f64,
    pub energy_curve: Vec<CurvePoint>,
    pub d_eff_frac: f64,
    pub degenerate_residual: bool,
    pub eta_u: Option<f64>,
    pub residual_spectrum: Vec<f64>,
    pub spectrum_x: Vec<f64>,
    pub spectrum_y: Vec<f64>,
    pub identity_rel_error: f64,
    pub four_term_rel_error: f64,
}

/// Mean and residual split of a paired set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanResidual {
    pub g_mu: f64,
    pub g_sigma: f64,
    pub d_mean: f64,
    pub d_tilde: f64,
    pub residual_ratio_dist: f64,
    pub residual_ratio_energy: f64,
    pub mean_sq_distance: f64,
    pub mean_sq_residual: f64,
    /// `|mean‖x−y‖² − ‖μx−μy‖² − mean‖r‖²| / mean‖x−y‖²`
    pub identity_rel_error: f64,
    /// Set when x = y so both ratios are 0/0; they are reported as 0.
    pub zero_gap: bool,
}

fn centered(x: &ArrayView2<f64>) -> Array2<f64> {
    x - &column_means(x).insert_axis(Axis(0))
}

/// Centered pair residuals `rᵢ = (xᵢ − μx) − (yᵢ − μy)`.
pub fn residuals(pairs: &PairedSet) -> Array2<f64> {
    centered(&pairs.x.view()) - centered(&pairs.y.view())
}

pub fn mean_residual_decomposition(pairs: &PairedSet) -> Result<MeanResidual> {
    let n = pairs.n();
    if n < 2 {
        return Err(Error::insufficient(2, n));
    }
    let x = pairs.x.view();
    let y = pairs.y.view();
    let mu_x = column_means(&x);
    let mu_y = column_means(&y);
    let gap = &mu_x - &mu_y;
    let gap_sq = gap.dot(&gap);

    let diff = &x - &y;
    let r = &diff - &gap.view().insert_axis(Axis(0));
    let (mut sq, mut dist, mut rsq, mut rdist) = (0.0, 0.0, 0.0, 0.0);
    for (drow, rrow) in diff.rows().into_iter().zip(r.rows()) {
        let a = drow.dot(&drow);
        let b = rrow.dot(&rrow);
        sq += a;
        dist += a.sqrt();
        rsq += b;
        rdist += b.sqrt();
    }
    let nf = n as f64;
    let (sq, dist, rsq, rdist) = (sq / nf, dist / nf, rsq / nf, rdist / nf);

    let sx = covariance(&x, true)?;
    let sy = covariance(&y, true)?;
    let g_sigma = frobenius(&(sx.as_array() - sy.as_array()).view()) / (sx.frobenius() + G_SIGMA_EPS);

    let zero_gap = sq == 0.0;
    let identity_rel_error = if zero_gap {
        (gap_sq + rsq).abs()
    } else {
        (sq - gap_sq - rsq).abs() / sq
    };
    Ok(MeanResidual {
        g_mu: gap_sq.sqrt(),
        g_sigma,
        d_mean: dist,
        d_tilde: rdist,
        residual_ratio_dist: if zero_gap { 0.0 } else { rdist / dist },
        residual_ratio_energy: if zero_gap { 0.0 } else { rsq / (gap_sq + rsq) },
        mean_sq_distance: sq,
        mean_sq_residual: rsq,
        identity_rel_error,
        zero_gap,
    })
}

/// `Σ_r = (1/n) Σ rᵢrᵢᵀ` computed directly from the residuals.
pub fn residual_covariance(pairs: &PairedSet) -> Result<SymMatrix> {
    if pairs.n() < 2 {
        return Err(Error::insufficient(2, pairs.n()));
    }
    covariance(&residuals(pairs).view(), false)
}

/// `Σ_x + Σ_y − Σ_xy − Σ_yx`.
pub fn residual_covariance_four_term(pairs: &PairedSet) -> Result<SymMatrix> {
    let sx = covariance(&pairs.x.view(), true)?;
    let sy = covariance(&pairs.y.view(), true)?;
    let sxy = cross_covariance(&pairs.x.view(), &pairs.y.view())?;
    let sum = sx.as_array() + sy.as_array() - &sxy - &sxy.t();
    SymMatrix::new(sum)
}

/// Relative Frobenius gap between the direct and four-term residual covariances.
pub fn four_term_error(pairs: &PairedSet) -> Result<f64> {
    let direct = residual_covariance(pairs)?;
    let four = residual_covariance_four_term(pairs)?;
    let diff = frobenius(&(direct.as_array() - four.as_array()).view());
    let scale = direct.frobenius();
    Ok(if scale > 0.0 { diff / scale } else { diff })
}

/// Pearson correlation of log-eigenvalues after flooring at
/// `1e-12·trace/d`; indices where either side hit the floor are dropped.
pub fn spectral_correlation(sx: &SymMatrix, sy: &SymMatrix) -> Result<f64> {
    if sx.dim() != sy.dim() {
        return Err(Error::InvalidInput("spectra of different dimension".into()));
    }
    let ex = sym_eig(sx)?.values.to_vec();
    let ey = sym_eig(sy)?.values.to_vec();
    spectral_correlation_from_values(&ex, &ey)
}

pub fn spectral_correlation_from_values(ex: &[f64], ey: &[f64]) -> Result<f64> {
    let floor = |v: &[f64]| SPECTRUM_FLOOR * v.iter().sum::<f64>() / v.len() as f64;
    let (fx, fy) = (floor(ex), floor(ey));
    let mut lx = Vec::new();
    let mut ly = Vec::new();
    for (&a, &b) in ex.iter().zip(ey) {
        if a > fx && b > fy {
            lx.push(a.ln());
            ly.push(b.ln());
        }
    }
    if lx.len() < 2 {
        return Err(Error::DegenerateSpectrum(format!(
            "{} usable eigenvalues",
            lx.len()
        )));
    }
    pearson(&lx, &ly).ok_or_else(|| Error::DegenerateSpectrum("zero variance of log-spectrum".into()))
}

/// `(1/q)‖UᵀV‖_F²` for two d×q orthonormal bases.
pub fn overlap_of_bases(u: &ArrayView2<f64>, v: &ArrayView2<f64>) -> f64 {
    let q = u.ncols().min(v.ncols());
    let m = u.t().dot(v);
    m.iter().map(|a| a * a).sum::<f64>() / q as f64
}

pub fn subspace_overlap(sx: &SymMatrix, sy: &SymMatrix, q: usize) -> Result<f64> {
    let d = sx.dim();
    if q == 0 || q > d || sy.dim() != d {
        return Err(Error::InvalidInput(format!("q={q} outside 1..={d}")));
    }
    let ux = sym_eig(sx)?.top(q);
    let uy = sym_eig(sy)?.top(q);
    Ok(overlap_of_bases(&ux.view(), &uy.view()))
}

/// Default grid of subspace sizes: powers of two up to d, plus d itself.
pub fn default_q_grid(d: usize) -> Vec<usize> {
    let mut qs = Vec::new();
    let mut q = 1;
    while q < d {
        qs.push(q);
        q *= 2;
    }
    qs.push(d);
    qs
}

/// Spectrum summary of a residual covariance, eigenvalues floored at zero.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualSpectrum {
    pub values: Vec<f64>,
    pub trace: f64,
}

impl ResidualSpectrum {
    pub fn from_matrix(sr: &SymMatrix) -> Result<Self> {
        let values = sym_eig(sr)?.values.to_vec();
        Self::from_values(values)
    }

    pub fn from_values(mut values: Vec<f64>) -> Result<Self> {
        for v in values.iter_mut() {
            *v = v.max(0.0);
        }
        let trace: f64 = values.iter().sum();
        if !(trace > 0.0) {
            return Err(Error::DegenerateResidual("zero trace".into()));
        }
        Ok(Self { values, trace })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn anisotropy(&self) -> f64 {
        self.values[0] / (self.trace / self.dim() as f64)
    }

    /// `E(K)` for K = 1..=d.
    pub fn energy_curve(&self) -> Vec<CurvePoint> {
        let d = self.dim();
        let mut acc = 0.0;
        self.values
            .iter()
            .enumerate()
            .map(|(j, v)| {
                acc += v;
                CurvePoint {
                    k: j + 1,
                    value: if j + 1 == d { 1.0 } else { (acc / self.trace).min(1.0) },
                    baseline: (j + 1) as f64 / d as f64,
                }
            })
            .collect()
    }

    pub fn effective_dimension(&self) -> f64 {
        let sq: f64 = self.values.iter().map(|v| v * v).sum();
        self.trace * self.trace / sq
    }

    pub fn normalized(&self) -> Vec<f64> {
        self.values.iter().map(|v| v / self.trace).collect()
    }
}

pub fn anisotropy_ratio(sr: &SymMatrix) -> Result<f64> {
    Ok(ResidualSpectrum::from_matrix(sr)?.anisotropy())
}

pub fn cumulative_energy(sr: &SymMatrix) -> Result<Vec<CurvePoint>> {
    Ok(ResidualSpectrum::from_matrix(sr)?.energy_curve())
}

pub fn effective_dimension(sr: &SymMatrix) -> Result<f64> {
    Ok(ResidualSpectrum::from_matrix(sr)?.effective_dimension())
}

/// Fraction of residual energy inside span(Q_U): `tr(P_U Σ_r)/tr(Σ_r)`.
pub fn coverage_ratio(q_u: &ArrayView2<f64>, sr: &SymMatrix) -> Result<f64> {
    if q_u.nrows() != sr.dim() {
        return Err(Error::InvalidFrame(format!(
            "basis has {} rows, residual is {}-dimensional",
            q_u.nrows(),
            sr.dim()
        )));
    }
    let dev = gram_deviation(q_u);
    if dev > FRAME_TOL {
        return Err(Error::InvalidFrame(format!("Gram deviation {dev:.3e}")));
    }
    let tr = sr.trace();
    if !(tr > 0.0) {
        return Err(Error::DegenerateResidual("zero trace".into()));
    }
    let proj = sr.as_array().dot(q_u);
    let inside: f64 = q_u.iter().zip(proj.iter()).map(|(a, b)| a * b).sum();
    Ok((inside / tr).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Default)]
pub struct DiagnoseOptions {
    pub q_grid: Option<Vec<usize>>,
    pub q_u: Option<Array2<f64>>,
}

/// Assemble every diagnostic for one modality pair.
pub fn diagnose(pairs: &PairedSet, opts: &DiagnoseOptions) -> Result<GapReport> {
    let d = pairs.d();
    let mr = mean_residual_decomposition(pairs)?;
    let sx = covariance(&pairs.x.view(), true)?;
    let sy = covariance(&pairs.y.view(), true)?;
    let sr = residual_covariance(pairs)?;
    let four_term_rel_error = four_term_error(pairs)?;

    let ((ex, ey), er) = rayon::join(
        || rayon::join(|| sym_eig(&sx), || sym_eig(&sy)),
        || sym_eig(&sr),
    );
    let (ex, ey, er) = (ex?, ey?, er?);

    let c_lambda = spectral_correlation_from_values(
        ex.values.as_slice().unwrap(),
        ey.values.as_slice().unwrap(),
    )
    .ok();
    let qs = opts.q_grid.clone().unwrap_or_else(|| default_q_grid(d));
    let mut overlap_curve = Vec::with_capacity(qs.len());
    for q in qs {
        if q == 0 || q > d {
            return Err(Error::InvalidInput(format!("q={q} outside 1..={d}")));
        }
        let o = overlap_of_bases(&ex.top(q).view(), &ey.top(q).view());
        overlap_curve.push(CurvePoint {
            k: q,
            value: o.min(1.0),
            baseline: q as f64 / d as f64,
        });
    }

    let (a_r, energy_curve, d_eff_frac, residual_spectrum, degenerate_residual) =
        match ResidualSpectrum::from_values(er.values.to_vec()) {
            Ok(spec) => (
                spec.anisotropy(),
                spec.energy_curve(),
                spec.effective_dimension() / d as f64,
                spec.normalized(),
                false,
            ),
            Err(Error::DegenerateResidual(_)) => {
                // zero residual is reported as the isotropic null by convention
                let curve = (1..=d)
                    .map(|k| CurvePoint {
                        k,
                        value: k as f64 / d as f64,
                        baseline: k as f64 / d as f64,
                    })
                    .collect();
                (1.0, curve, 1.0, vec![0.0; d], true)
            }
            Err(e) => return Err(e),
        };

    let eta_u = match &opts.q_u {
        Some(q) if !degenerate_residual => Some(coverage_ratio(&q.view(), &sr)?),
        _ => None,
    };

    let norm = |v: &ndarray::Array1<f64>| {
        let t: f64 = v.iter().map(|x| x.max(0.0)).sum();
        v.iter()
            .map(|x| if t > 0.0 { x.max(0.0) / t } else { 0.0 })
            .collect::<Vec<_>>()
    };

    Ok(GapReport {
        n: pairs.n(),
        d,
        c_lambda,
        overlap_curve,
        g_mu: mr.g_mu,
        g_sigma: mr.g_sigma,
        d_mean: mr.d_mean,
        d_tilde: mr.d_tilde,
        residual_ratio_dist: mr.residual_ratio_dist,
        residual_ratio_energy: mr.residual_ratio_energy,
        zero_gap: mr.zero_gap,
        a_r,
        energy_curve,
        d_eff_frac,
        degenerate_residual,
        eta_u,
        residual_spectrum,
        spectrum_x: norm(&ex.values),
        spectrum_y: norm(&ey.values),
        identity_rel_error: mr.identity_rel_error,
        four_term_rel_error,
    })
}

pub fn curve_csv(curve: &[CurvePoint], kname: &str, vname: &str) -> String {
    let mut s = format!("{kname},{vname},baseline\n");
    for p in curve {
        let _ = writeln!(s, "{},{:.12e},{:.12e}", p.k, p.value, p.baseline);
    }
    s
}

pub fn spectra_csv(report: &GapReport) -> String {
    let mut s = String::from("index,lambda_x,lambda_y,lambda_r\n");
    for j in 0..report.d {
        let _ = writeln!(
            s,
            "{},{:.12e},{:.12e},{:.12e}",
            j + 1,
            report.spectrum_x[j],
            report.spectrum_y[j],
            report.residual_spectrum[j]
        );
    }
    s
}
