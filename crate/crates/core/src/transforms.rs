//! Closed-form substitute-representation transforms: identity, centroid and
//! moment correction, random target replacement, oracle rank-K correction,
//! and the C³ and ReAlign baselines.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{residual_covariance, residuals};
use crate::error::{Error, Result};
use crate::numerics::{column_means, column_means_sorted, covariance, sym_eig, SymMatrix};
use crate::rng;
use crate::store::{normalize_rows, EmbeddingSet, PairedSet};

const SQRT_FLOOR: f64 = 1e-10;

/// First and second moments of one modality.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentStats {
    pub mean: Array1<f64>,
    pub cov: SymMatrix,
}

impl MomentStats {
    pub fn estimate(set: &ArrayView2<f64>) -> Result<Self> {
        Ok(Self {
            mean: column_means(set),
            cov: covariance(set, true)?,
        })
    }

    pub fn trace(&self) -> f64 {
        self.cov.trace()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TransformSpec {
    Identity {},
    Centroid {},
    Moment {},
    Perm {
        #[serde(default)]
        seed: u64,
    },
    Alpha {
        alpha: f64,
        k: usize,
    },
    C3 {
        #[serde(default = "default_c3_sigma")]
        noise_sigma: f64,
        #[serde(default)]
        seed: u64,
    },
    Realign {},
}

fn default_c3_sigma() -> f64 {
    0.04
}

impl TransformSpec {
    pub fn name(&self) -> &'static str {
        match self {
            TransformSpec::Identity {} => "id",
            TransformSpec::Centroid {} => "mu",
            TransformSpec::Moment {} => "sigma",
            TransformSpec::Perm { .. } => "perm",
            TransformSpec::Alpha { .. } => "alpha",
            TransformSpec::C3 { .. } => "c3",
            TransformSpec::Realign {} => "realign",
        }
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        match *self {
            TransformSpec::Alpha { alpha, k } => {
                if !(0.0..=1.0).contains(&alpha) {
                    return Err(Error::InvalidConfig(format!("alpha {alpha} outside [0,1]")));
                }
                if k == 0 || k > d {
                    return Err(Error::InvalidConfig(format!("K={k} outside 1..={d}")));
                }
            }
            TransformSpec::C3 { noise_sigma, .. } if !(noise_sigma >= 0.0) => {
                return Err(Error::InvalidConfig(format!("noise_sigma {noise_sigma} < 0")));
            }
            _ => {}
        }
        Ok(())
    }

    /// The default set of report rows besides the learned method.
    pub fn defaults(seed: u64, d: usize) -> Vec<TransformSpec> {
        vec![
            TransformSpec::Identity {},
            TransformSpec::Centroid {},
            TransformSpec::Moment {},
            TransformSpec::Perm { seed },
            TransformSpec::Alpha {
                alpha: 0.5,
                k: (d / 16).max(1),
            },
            TransformSpec::C3 {
                noise_sigma: default_c3_sigma(),
                seed,
            },
            TransformSpec::Realign {},
        ]
    }
}

fn check_dim(y: &ArrayView2<f64>, v: &ArrayView1<f64>, what: &str) -> Result<()> {
    if y.ncols() != v.len() {
        return Err(Error::InvalidInput(format!(
            "{what} has dimension {}, data has {}",
            v.len(),
            y.ncols()
        )));
    }
    Ok(())
}

pub fn t_id(y: &ArrayView2<f64>) -> Array2<f64> {
    y.to_owned()
}

/// `zᵢ = yᵢ − μy + μx`.
pub fn t_mu(y: &ArrayView2<f64>, mu_y: &ArrayView1<f64>, mu_x: &ArrayView1<f64>) -> Result<Array2<f64>> {
    check_dim(y, mu_y, "mu_y")?;
    check_dim(y, mu_x, "mu_x")?;
    let shift = mu_x - mu_y;
    Ok(y + &shift.insert_axis(Axis(0)))
}

/// Linear map `Σx^{1/2} Σy^{-1/2}` built from symmetric square roots.
pub fn moment_map(stats_x: &MomentStats, stats_y: &MomentStats) -> Result<Array2<f64>> {
    let d = stats_y.cov.dim();
    let tr = stats_y.trace();
    if !(tr > 0.0) {
        return Err(Error::DegenerateCovariance("source covariance has zero trace".into()));
    }
    let floor = SQRT_FLOOR * tr / d as f64;
    let ey = sym_eig(&stats_y.cov)?;
    let below = ey.values.iter().filter(|&&v| v < floor).count();
    if below > 0 {
        return Err(Error::DegenerateCovariance(format!(
            "{below} source eigenvalues below floor {floor:.3e}"
        )));
    }
    let inv_sqrt_y = ey.apply(|l| 1.0 / l.max(floor).sqrt());
    let sqrt_x = sym_eig(&stats_x.cov)?.apply(|l| l.max(0.0).sqrt());
    Ok(sqrt_x.as_array().dot(inv_sqrt_y.as_array()))
}

/// Whitening–coloring: `zᵢ = μx + Σx^{1/2} Σy^{-1/2} (yᵢ − μy)`.
pub fn t_sigma(y: &ArrayView2<f64>, stats_x: &MomentStats, stats_y: &MomentStats) -> Result<Array2<f64>> {
    check_dim(y, &stats_y.mean.view(), "mu_y")?;
    check_dim(y, &stats_x.mean.view(), "mu_x")?;
    let a = moment_map(stats_x, stats_y)?;
    let yc = y - &stats_y.mean.view().insert_axis(Axis(0));
    Ok(yc.dot(&a.t()) + &stats_x.mean.view().insert_axis(Axis(0)))
}

/// Replace each source row by a seeded random draw (without replacement)
/// from the target pool.
pub fn t_perm(y: &ArrayView2<f64>, x_pool: &ArrayView2<f64>, seed: u64) -> Result<Array2<f64>> {
    if x_pool.nrows() < y.nrows() {
        return Err(Error::insufficient(y.nrows(), x_pool.nrows()));
    }
    if x_pool.ncols() != y.ncols() {
        return Err(Error::InvalidInput("pool dimension differs from source".into()));
    }
    let mut idx: Vec<usize> = (0..x_pool.nrows()).collect();
    idx.shuffle(&mut rng::stream(seed, 0));
    idx.truncate(y.nrows());
    Ok(x_pool.select(Axis(0), &idx))
}

/// Top-K eigenvectors of the paired residual covariance.
pub fn residual_directions(pairs: &PairedSet, k: usize) -> Result<Array2<f64>> {
    if k == 0 || k > pairs.d() {
        return Err(Error::InvalidInput(format!("K={k} outside 1..={}", pairs.d())));
    }
    Ok(sym_eig(&residual_covariance(pairs)?)?.top(k))
}

/// `zᵢ = yᵢ^x + α P (xᵢ − yᵢ^x)` with `yᵢ^x = yᵢ − μy + μx` and `P = BBᵀ`.
pub fn t_alpha_with(
    pairs: &PairedSet,
    mu_y: &ArrayView1<f64>,
    mu_x: &ArrayView1<f64>,
    basis: &ArrayView2<f64>,
    alpha: f64,
) -> Result<Array2<f64>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidInput(format!("alpha {alpha} outside [0,1]")));
    }
    let yx = t_mu(&pairs.y.view(), mu_y, mu_x)?;
    let r = &pairs.x.view() - &yx;
    let proj = r.dot(basis).dot(&basis.t());
    Ok(yx + &(proj * alpha))
}

/// Oracle rank-K correction using the pair set's own means and residual
/// covariance.
pub fn t_alpha(pairs: Option<&PairedSet>, alpha: f64, k: usize) -> Result<Array2<f64>> {
    let pairs = pairs.ok_or(Error::RequiresPairs)?;
    let mu_x = column_means(&pairs.x.view());
    let mu_y = column_means(&pairs.y.view());
    let basis = residual_directions(pairs, k)?;
    t_alpha_with(pairs, &mu_y.view(), &mu_x.view(), &basis.view(), alpha)
}

/// C³: `zᵢ = Norm(yᵢ − μy + μx + σεᵢ)` with one noise stream per row.
pub fn c3_align(
    y: &ArrayView2<f64>,
    mu_y: &ArrayView1<f64>,
    mu_x: &ArrayView1<f64>,
    noise_sigma: f64,
    seed: u64,
) -> Result<Array2<f64>> {
    if !(noise_sigma >= 0.0) {
        return Err(Error::InvalidInput(format!("noise_sigma {noise_sigma} < 0")));
    }
    let mut z = t_mu(y, mu_y, mu_x)?;
    if noise_sigma > 0.0 {
        z.axis_iter_mut(Axis(0))
            .into_par_iter()
            .enumerate()
            .for_each(|(i, mut row)| {
                let mut r = rng::stream(seed, i as u64);
                for v in row.iter_mut() {
                    *v += noise_sigma * r.sample::<f64, _>(StandardNormal);
                }
            });
    }
    normalize_rows(&z)
}

/// ReAlign: anchor, trace-scale by `√(tr_x/tr_y)`, re-anchor at μx and
/// project to the sphere, then remove the resulting centroid drift.
pub fn realign(
    y: &ArrayView2<f64>,
    mu_y: &ArrayView1<f64>,
    mu_x: &ArrayView1<f64>,
    trace_x: f64,
    trace_y: f64,
) -> Result<Array2<f64>> {
    if !(trace_y > 0.0) {
        return Err(Error::DegenerateCovariance(format!("trace_y = {trace_y}")));
    }
    check_dim(y, mu_y, "mu_y")?;
    check_dim(y, mu_x, "mu_x")?;
    let s = (trace_x / trace_y).sqrt();
    let anchored = (y - &mu_y.insert_axis(Axis(0))) * s + &mu_x.insert_axis(Axis(0));
    let u = normalize_rows(&anchored)?;
    let drift = column_means_sorted(&u.view());
    let shifted = &u - &(drift - mu_x).insert_axis(Axis(0));
    normalize_rows(&shifted)
}

/// Everything a closed-form transform may need, estimated without pairs
/// except for the oracle rank-K transform.
#[derive(Debug, Clone)]
pub struct TransformContext {
    pub stats_x: MomentStats,
    pub stats_y: MomentStats,
    pub x_pool: Array2<f64>,
    /// Paired estimation data; only the oracle rank-K transform reads it.
    pub est_pairs: Option<PairedSet>,
}

impl TransformContext {
    pub fn from_estimation(x_est: &EmbeddingSet, y_est: &EmbeddingSet) -> Result<Self> {
        Ok(Self {
            stats_x: MomentStats::estimate(&x_est.view())?,
            stats_y: MomentStats::estimate(&y_est.view())?,
            x_pool: x_est.data().clone(),
            est_pairs: None,
        })
    }
}

/// Apply a transform to held-out source rows. `heldout` supplies the paired
/// targets the oracle rank-K transform needs.
pub fn apply(
    spec: &TransformSpec,
    ctx: &TransformContext,
    y: &ArrayView2<f64>,
    heldout: Option<&PairedSet>,
) -> Result<Array2<f64>> {
    spec.validate(y.ncols())?;
    let (mx, my) = (ctx.stats_x.mean.view(), ctx.stats_y.mean.view());
    match *spec {
        TransformSpec::Identity {} => Ok(t_id(y)),
        TransformSpec::Centroid {} => t_mu(y, &my, &mx),
        TransformSpec::Moment {} => t_sigma(y, &ctx.stats_x, &ctx.stats_y),
        TransformSpec::Perm { seed } => t_perm(y, &ctx.x_pool.view(), seed),
        TransformSpec::Alpha { alpha, k } => {
            let target = heldout.ok_or(Error::RequiresPairs)?;
            let est = ctx.est_pairs.as_ref().ok_or(Error::RequiresPairs)?;
            let basis = residual_directions(est, k)?;
            t_alpha_with(target, &my, &mx, &basis.view(), alpha)
        }
        TransformSpec::C3 { noise_sigma, seed } => c3_align(y, &my, &mx, noise_sigma, seed),
        TransformSpec::Realign {} => realign(y, &my, &mx, ctx.stats_x.trace(), ctx.stats_y.trace()),
    }
}

/// Mean squared residual left after a rank-K oracle correction with basis B.
pub fn remaining_energy(pairs: &PairedSet, basis: &ArrayView2<f64>) -> f64 {
    let r = residuals(pairs);
    let left = &r - &r.dot(basis).dot(&basis.t());
    left.iter().map(|v| v * v).sum::<f64>() / pairs.n() as f64
}
