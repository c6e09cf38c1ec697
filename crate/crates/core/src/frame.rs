//! Fixed dominant/complement decomposition of the joint marginal structure,
//! orthogonal mixing of the dominant basis, and blockwise polar coordinates.

use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::artifact::{Dtype, SectionFile};
use crate::error::{Error, Result};
use crate::numerics::{column_means, covariance, expm, expm_frechet, gram_deviation, sym_eig};
use crate::store::write_bytes;

pub use crate::numerics::wrap;

pub const DEFAULT_EPS_POLAR: f64 = 1e-12;
pub const DEFAULT_LAMBDA_REG: f64 = 1e-6;

/// Per-coordinate statistics of both modalities in the complement basis.
#[derive(Debug, Clone, PartialEq)]
pub struct VStats {
    pub mean_t: Array1<f64>,
    pub mean_i: Array1<f64>,
    pub sd_t: Array1<f64>,
    pub sd_i: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub d: usize,
    pub r: usize,
    /// d×r orthonormal dominant basis (after any mixing).
    pub q_u: Array2<f64>,
    /// d×(d−r) orthonormal complement basis.
    pub q_v: Array2<f64>,
    pub mu_t: Array1<f64>,
    pub mu_i: Array1<f64>,
    pub lambda_reg: f64,
    pub eps_polar: f64,
    pub v_stats: VStats,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FrameConfig {
    /// Dominant dimension; `None` picks d/4 rounded down to even.
    #[serde(default)]
    pub r: Option<usize>,
    #[serde(default = "default_lambda")]
    pub lambda_reg: f64,
    #[serde(default = "default_eps")]
    pub eps_polar: f64,
}

fn default_lambda() -> f64 {
    DEFAULT_LAMBDA_REG
}

fn default_eps() -> f64 {
    DEFAULT_EPS_POLAR
}

impl Default for FrameConfig {
    fn default() -> Self {
        Self {
            r: None,
            lambda_reg: DEFAULT_LAMBDA_REG,
            eps_polar: DEFAULT_EPS_POLAR,
        }
    }
}

impl FrameConfig {
    pub fn resolve_r(&self, d: usize) -> usize {
        self.r.unwrap_or(((d / 4) & !1).max(2))
    }
}

/// Rows sorted lexicographically, so statistics computed afterwards do not
/// depend on the order the rows arrived in.
pub fn canonical_rows(x: &ArrayView2<f64>) -> Array2<f64> {
    let mut idx: Vec<usize> = (0..x.nrows()).collect();
    idx.sort_by(|&a, &b| {
        let (ra, rb) = (x.row(a), x.row(b));
        for (u, v) in ra.iter().zip(rb.iter()) {
            let o = u.total_cmp(v);
            if o != std::cmp::Ordering::Equal {
                return o;
            }
        }
        std::cmp::Ordering::Equal
    });
    x.select(Axis(0), &idx)
}

/// Fit the frame from unpaired estimation sets: `x_est` is the target
/// (image) modality, `y_est` the source (text) modality.
pub fn fit_frame(
    x_est: &ArrayView2<f64>,
    y_est: &ArrayView2<f64>,
    r: usize,
    lambda_reg: f64,
    eps_polar: f64,
) -> Result<Frame> {
    let d = x_est.ncols();
    if y_est.ncols() != d {
        return Err(Error::InvalidInput(format!(
            "target has d={d}, source has d={}",
            y_est.ncols()
        )));
    }
    if r < 2 || r > d || r % 2 != 0 {
        return Err(Error::InvalidInput(format!("r={r} must be even and in 2..={d}")));
    }
    if !(eps_polar > 0.0) || !(lambda_reg >= 0.0) {
        return Err(Error::InvalidInput("eps_polar must be > 0 and lambda_reg >= 0".into()));
    }
    let xc = canonical_rows(x_est);
    let yc = canonical_rows(y_est);
    let mu_i = column_means(&xc.view());
    let mu_t = column_means(&yc.view());
    let si = covariance(&xc.view(), true)?;
    let st = covariance(&yc.view(), true)?;
    let joint = st.lincomb(1.0, &si, 1.0).add_ridge(lambda_reg);
    let eig = sym_eig(&joint)?;
    let q_u = eig.top(r);
    let q_v = eig.bottom(r);

    let var_diag = |cov: &Array2<f64>| -> Array1<f64> {
        let proj = cov.dot(&q_v);
        let mut out = Array1::zeros(d - r);
        for j in 0..d - r {
            out[j] = q_v.column(j).dot(&proj.column(j)).max(0.0).sqrt();
        }
        out
    };
    let v_stats = VStats {
        mean_t: q_v.t().dot(&mu_t),
        mean_i: q_v.t().dot(&mu_i),
        sd_t: var_diag(st.as_array()),
        sd_i: var_diag(si.as_array()),
    };
    Ok(Frame {
        d,
        r,
        q_u,
        q_v,
        mu_t,
        mu_i,
        lambda_reg,
        eps_polar,
        v_stats,
    })
}

/// Rotation `R = exp(S)` of the dominant basis, S skew-symmetric with
/// free parameters taken row-major from its strict upper triangle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixingRotation {
    pub r: usize,
    pub skew_params: Vec<f64>,
}

impl MixingRotation {
    pub fn identity(r: usize) -> Self {
        Self {
            r,
            skew_params: vec![0.0; r * (r.saturating_sub(1)) / 2],
        }
    }

    pub fn skew(&self) -> Array2<f64> {
        let mut s = Array2::zeros((self.r, self.r));
        let mut k = 0;
        for i in 0..self.r {
            for j in (i + 1)..self.r {
                s[[i, j]] = self.skew_params[k];
                s[[j, i]] = -self.skew_params[k];
                k += 1;
            }
        }
        s
    }

    pub fn matrix(&self) -> Result<Array2<f64>> {
        if self.skew_params.iter().all(|&p| p == 0.0) {
            return Ok(Array2::eye(self.r));
        }
        expm(&self.skew())
    }

    /// Gradient with respect to the skew parameters given `G = ∂L/∂R`,
    /// using the adjoint of the exponential's Fréchet derivative.
    pub fn param_grad(&self, g: &Array2<f64>) -> Result<Vec<f64>> {
        let gs = expm_frechet(&self.skew().t().to_owned(), g)?;
        let mut out = Vec::with_capacity(self.skew_params.len());
        for i in 0..self.r {
            for j in (i + 1)..self.r {
                out.push(gs[[i, j]] - gs[[j, i]]);
            }
        }
        Ok(out)
    }
}

impl Frame {
    pub fn m(&self) -> usize {
        self.r / 2
    }

    /// Replace `q_u` by `q_u R`; the spanned subspace is unchanged.
    pub fn mix(&self, rotation: &MixingRotation) -> Result<Frame> {
        if rotation.r != self.r {
            return Err(Error::InvalidInput(format!(
                "rotation is {}-dimensional, frame has r={}",
                rotation.r, self.r
            )));
        }
        let mut out = self.clone();
        out.q_u = self.q_u.dot(&rotation.matrix()?);
        Ok(out)
    }

    pub fn projector_u(&self) -> Array2<f64> {
        self.q_u.dot(&self.q_u.t())
    }

    pub fn check(&self) -> Result<()> {
        let dev = gram_deviation(&self.q_u.view());
        if dev > 1e-8 {
            return Err(Error::InvalidFrame(format!("q_u Gram deviation {dev:.3e}")));
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut f = SectionFile::new();
        f.push_matrix("q_u", Dtype::F64, &self.q_u);
        f.push_matrix("q_v", Dtype::F64, &self.q_v);
        f.push_vector("mu_t", Dtype::F64, self.mu_t.as_slice().unwrap());
        f.push_vector("mu_i", Dtype::F64, self.mu_i.as_slice().unwrap());
        f.push_vector("v_mean_t", Dtype::F64, self.v_stats.mean_t.as_slice().unwrap());
        f.push_vector("v_mean_i", Dtype::F64, self.v_stats.mean_i.as_slice().unwrap());
        f.push_vector("v_sd_t", Dtype::F64, self.v_stats.sd_t.as_slice().unwrap());
        f.push_vector("v_sd_i", Dtype::F64, self.v_stats.sd_i.as_slice().unwrap());
        f.save(&dir.join("frame.bin"))?;
        let meta = FrameMeta {
            d: self.d,
            r: self.r,
            m: self.m(),
            lambda_reg: self.lambda_reg,
            eps_polar: self.eps_polar,
        };
        write_bytes(
            &dir.join("frame.json"),
            serde_json::to_string_pretty(&meta)?.as_bytes(),
        )
    }

    pub fn load(dir: &Path) -> Result<Frame> {
        let meta_path = dir.join("frame.json");
        let text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: FrameMeta = serde_json::from_str(&text)?;
        let f = SectionFile::load(&dir.join("frame.bin"))?;
        let frame = Frame {
            d: meta.d,
            r: meta.r,
            q_u: f.matrix("q_u")?,
            q_v: f.matrix("q_v")?,
            mu_t: f.vector("mu_t")?,
            mu_i: f.vector("mu_i")?,
            lambda_reg: meta.lambda_reg,
            eps_polar: meta.eps_polar,
            v_stats: VStats {
                mean_t: f.vector("v_mean_t")?,
                mean_i: f.vector("v_mean_i")?,
                sd_t: f.vector("v_sd_t")?,
                sd_i: f.vector("v_sd_i")?,
            },
        };
        if frame.q_u.dim() != (meta.d, meta.r) || frame.q_v.dim() != (meta.d, meta.d - meta.r) {
            return Err(Error::format(dir.display().to_string(), "frame shape mismatch"));
        }
        frame.check()?;
        Ok(frame)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FrameMeta {
    d: usize,
    r: usize,
    m: usize,
    lambda_reg: f64,
    eps_polar: f64,
}

/// Polar state of one embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct PolarCoords {
    pub rho: Array1<f64>,
    pub theta: Array1<f64>,
    pub v: Array1<f64>,
}

/// Polar states of many embeddings, one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct PolarBatch {
    pub rho: Array2<f64>,
    pub theta: Array2<f64>,
    pub v: Array2<f64>,
}

impl PolarBatch {
    pub fn n(&self) -> usize {
        self.rho.nrows()
    }

    pub fn row(&self, i: usize) -> PolarCoords {
        PolarCoords {
            rho: self.rho.row(i).to_owned(),
            theta: self.theta.row(i).to_owned(),
            v: self.v.row(i).to_owned(),
        }
    }
}

fn block_polar(a: f64, b: f64, eps: f64) -> (f64, f64) {
    ((a * a + b * b + eps).sqrt(), wrap(b.atan2(a)))
}

pub fn to_polar(frame: &Frame, z: &ArrayView1<f64>) -> PolarCoords {
    let row = z.view().insert_axis(Axis(0));
    to_polar_batch(frame, &row).row(0)
}

/// Dominant-subspace coordinates `c` with `c_k = (ρ_k cos θ_k, ρ_k sin θ_k)`.
pub fn block_coords(rho: &ArrayView1<f64>, theta: &ArrayView1<f64>) -> Array1<f64> {
    let m = rho.len();
    let mut c = Array1::zeros(2 * m);
    for k in 0..m {
        c[2 * k] = rho[k] * theta[k].cos();
        c[2 * k + 1] = rho[k] * theta[k].sin();
    }
    c
}

pub fn from_polar(frame: &Frame, p: &PolarCoords) -> Array1<f64> {
    let batch = PolarBatch {
        rho: p.rho.view().insert_axis(Axis(0)).to_owned(),
        theta: p.theta.view().insert_axis(Axis(0)).to_owned(),
        v: p.v.view().insert_axis(Axis(0)).to_owned(),
    };
    from_polar_batch(frame, &batch).row(0).to_owned()
}

pub fn to_polar_batch(frame: &Frame, z: &ArrayView2<f64>) -> PolarBatch {
    let c = z.dot(&frame.q_u);
    let v = z - &c.dot(&frame.q_u.t());
    let (n, m) = (z.nrows(), frame.m());
    let mut rho = Array2::zeros((n, m));
    let mut theta = Array2::zeros((n, m));
    for i in 0..n {
        for k in 0..m {
            let (r, t) = block_polar(c[[i, 2 * k]], c[[i, 2 * k + 1]], frame.eps_polar);
            rho[[i, k]] = r;
            theta[[i, k]] = t;
        }
    }
    PolarBatch { rho, theta, v }
}

pub fn block_coords_batch(rho: &ArrayView2<f64>, theta: &ArrayView2<f64>) -> Array2<f64> {
    let (n, m) = rho.dim();
    let mut c = Array2::zeros((n, 2 * m));
    for i in 0..n {
        for k in 0..m {
            c[[i, 2 * k]] = rho[[i, k]] * theta[[i, k]].cos();
            c[[i, 2 * k + 1]] = rho[[i, k]] * theta[[i, k]].sin();
        }
    }
    c
}

pub fn from_polar_batch(frame: &Frame, p: &PolarBatch) -> Array2<f64> {
    block_coords_batch(&p.rho.view(), &p.theta.view()).dot(&frame.q_u.t()) + &p.v
}

/// Coordinates of the rows in the dominant basis, split as (a_k, b_k) pairs.
pub fn dominant_coords(frame: &Frame, z: &ArrayView2<f64>) -> Array2<f64> {
    z.dot(&frame.q_u)
}

/// Complement-basis coordinates of the rows.
pub fn complement_coords(frame: &Frame, z: &ArrayView2<f64>) -> Array2<f64> {
    z.dot(&frame.q_v)
}

pub fn complement_basis(frame: &Frame) -> ArrayView2<'_, f64> {
    frame.q_v.slice(s![.., ..])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diagnostics::overlap_of_bases;
    use crate::numerics::{frobenius, haar_frame};
    use crate::rng::stream;
    use rand::Rng;
    use rand_distr::StandardNormal;
    use std::f64::consts::PI;

    fn gaussian(n: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut r = stream(seed, 0);
        Array2::from_shape_fn((n, d), |_| r.sample::<f64, _>(StandardNormal))
    }

    fn planted(n: usize, seed: u64) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
        // 4-dim shared subspace carrying ~95% of joint variance in d=16
        let d = 16;
        let basis = haar_frame(d, d, &mut stream(seed, 1));
        let u = basis.slice(s![.., ..4]).to_owned();
        let scale_in = 1.0;
        let scale_out = (0.05 * 4.0 / (0.95 * 12.0f64)).sqrt();
        let mk = |s: u64| {
            gaussian(n, 4, s).dot(&u.t()) * scale_in
                + gaussian(n, 12, s + 100).dot(&basis.slice(s![.., 4..]).t()) * scale_out
        };
        (mk(seed + 2), mk(seed + 3), u)
    }

    #[test]
    fn wrap_examples() {
        assert_eq!(wrap(PI), -PI);
        assert_eq!(wrap(3.0 * PI), -PI);
        assert_eq!(wrap(0.1), 0.1);
    }

    #[test]
    fn fit_recovers_planted_subspace() {
        let (x, y, u) = planted(4000, 0);
        let f = fit_frame(&x.view(), &y.view(), 4, 1e-6, 1e-12).unwrap();
        assert!(overlap_of_bases(&f.q_u.view(), &u.view()) >= 0.98);
        assert!(gram_deviation(&f.q_u.view()) < 1e-8);
        let cross = f.q_u.t().dot(&f.q_v);
        assert!(cross.iter().all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn fit_rejects_bad_rank() {
        let x = gaussian(20, 6, 1);
        assert!(fit_frame(&x.view(), &x.view(), 3, 0.0, 1e-12).is_err());
        assert!(fit_frame(&x.view(), &x.view(), 8, 0.0, 1e-12).is_err());
    }

    #[test]
    fn fit_with_huge_ridge_is_still_orthonormal() {
        let x = gaussian(50, 6, 2);
        let f = fit_frame(&x.view(), &x.view(), 2, 1e9, 1e-12).unwrap();
        assert!(gram_deviation(&f.q_u.view()) < 1e-8);
        let iso = Array2::<f64>::eye(6);
        let g = fit_frame(&iso.view(), &iso.view(), 4, 0.0, 1e-12).unwrap();
        assert!(gram_deviation(&g.q_u.view()) < 1e-8);
    }

    #[test]
    fn fit_is_row_order_invariant() {
        let (x, y, _) = planted(500, 3);
        let a = fit_frame(&x.view(), &y.view(), 4, 1e-6, 1e-12).unwrap();
        let mut rev = y.clone();
        rev.invert_axis(Axis(0));
        let b = fit_frame(&x.view(), &rev.view(), 4, 1e-6, 1e-12).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mixing_preserves_span() {
        let (x, y, _) = planted(500, 4);
        let f = fit_frame(&x.view(), &y.view(), 4, 1e-6, 1e-12).unwrap();
        let same = f.mix(&MixingRotation::identity(4)).unwrap();
        assert_eq!(same.q_u, f.q_u);
        let mut rng = stream(5, 0);
        let rot = MixingRotation {
            r: 4,
            skew_params: (0..6).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect(),
        };
        let g = f.mix(&rot).unwrap();
        assert!(frobenius(&(g.projector_u() - f.projector_u()).view()) < 1e-8);
        assert!(gram_deviation(&g.q_u.view()) < 1e-8);
    }

    #[test]
    fn skew_gradient_matches_finite_difference() {
        let mut rng = stream(6, 0);
        let rot = MixingRotation {
            r: 4,
            skew_params: (0..6).map(|_| rng.random::<f64>() - 0.5).collect(),
        };
        let w = Array2::from_shape_fn((4, 4), |_| rng.random::<f64>() - 0.5);
        let loss = |r: &MixingRotation| (r.matrix().unwrap() * &w).sum();
        let g = rot.param_grad(&w).unwrap();
        for k in 0..6 {
            let mut p = rot.clone();
            let mut q = rot.clone();
            p.skew_params[k] += 1e-6;
            q.skew_params[k] -= 1e-6;
            let fd = (loss(&p) - loss(&q)) / 2e-6;
            assert!((fd - g[k]).abs() < 1e-8, "{k}: {fd} vs {}", g[k]);
        }
    }

    #[test]
    fn polar_round_trip_and_cases() {
        let (x, y, _) = planted(300, 7);
        let f = fit_frame(&x.view(), &y.view(), 4, 1e-6, 1e-12).unwrap();
        let zs = gaussian(100, 16, 8);
        let bound = (f.m() as f64 * f.eps_polar).sqrt() + 1e-9;
        for z in zs.rows() {
            let p = to_polar(&f, &z);
            assert!(p.theta.iter().all(|t| (-PI..PI).contains(t)));
            assert!(p.rho.iter().all(|&r| r >= f.eps_polar.sqrt()));
            assert!(f.q_u.t().dot(&p.v).iter().all(|v| v.abs() < 1e-8));
            let back = from_polar(&f, &p);
            let err = (&back - &z).dot(&(&back - &z)).sqrt();
            assert!(err <= bound, "{err}");
        }
        let batch = to_polar_batch(&f, &zs.view());
        assert_eq!(batch.row(3).theta, to_polar(&f, &zs.row(3)).theta);
        let back = from_polar_batch(&f, &batch);
        assert!(frobenius(&(&back - &zs).view()) < 1e-5);

        // a vector lying entirely in V
        let v = f.q_v.column(0).to_owned() * 0.7;
        let p = to_polar(&f, &v.view());
        for &r in p.rho.iter() {
            assert!((r - f.eps_polar.sqrt()).abs() < 1e-9);
        }
        assert!((&p.v - &v).iter().all(|e| e.abs() < 1e-12));
    }

    #[test]
    fn unit_block_with_zero_eps() {
        assert_eq!(block_polar(1.0, 0.0, 0.0), (1.0, 0.0));
    }

    #[test]
    fn save_load_round_trip() {
        let (x, y, _) = planted(300, 9);
        let f = fit_frame(&x.view(), &y.view(), 4, 1e-6, 1e-12).unwrap();
        let dir = tempfile::tempdir().unwrap();
        f.save(dir.path()).unwrap();
        assert_eq!(Frame::load(dir.path()).unwrap(), f);
    }
}
