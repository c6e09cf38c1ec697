//! Paired two-modality corpora with planted gap structure, and planted
//! phase corpora sampled from a known periodic potential.

use std::f64::consts::PI;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{coverage_ratio, residual_covariance, ResidualSpectrum};
use crate::error::{Error, Result};
use crate::numerics::{haar_frame, wrap, SymMatrix};
use crate::phase_prior::{DependencyGraph, Edge};
use crate::rng::{derive, stream};
use crate::store::{normalize_rows, EmbeddingSet, PairedSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlantSpec {
    pub n: usize,
    pub d: usize,
    /// Dimension of the shared latent subspace.
    pub r_true: usize,
    /// Total latent variance.
    pub latent_energy: f64,
    /// Ratio of the last to the first latent eigenvalue (geometric profile).
    pub spectrum_decay: f64,
    /// Norm of the shared mean direction.
    pub mean_norm: f64,
    /// Norm δ of the text-side centroid offset.
    pub centroid_offset: f64,
    /// Relative energies of the planted residual directions, descending.
    pub residual_weights: Vec<f64>,
    /// Total planted residual energy; `None` calibrates it to `target_a_r`.
    pub residual_energy: Option<f64>,
    pub target_a_r: f64,
    /// Total variance of each modality's private noise.
    pub noise_x: f64,
    pub noise_y: f64,
    /// Ratio of the largest to the smallest noise eigenvalue; 1 is isotropic.
    pub noise_spread: f64,
    pub normalize: bool,
    /// Extra pairs used to estimate on-sphere targets; 0 skips the pass.
    pub mc_samples: usize,
    pub seed: u64,
}

impl Default for PlantSpec {
    fn default() -> Self {
        Self {
            n: 20_000,
            d: 256,
            r_true: 64,
            latent_energy: 0.5,
            spectrum_decay: 0.5,
            mean_norm: 0.7,
            centroid_offset: 0.4,
            residual_weights: vec![1.0, 0.7, 0.5, 0.35],
            residual_energy: None,
            target_a_r: 25.0,
            noise_x: 0.04,
            noise_y: 0.04,
            noise_spread: 200.0,
            normalize: true,
            mc_samples: 40_000,
            seed: 0,
        }
    }
}

/// Targets measured on the unit sphere by a Monte-Carlo pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SphereTruth {
    pub samples: usize,
    pub a_r: f64,
    pub d_eff_frac: f64,
    pub eta_u: f64,
    pub energy_k: f64,
    pub mean_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub mu_x: Vec<f64>,
    pub mu_y: Vec<f64>,
    pub residual_energies: Vec<f64>,
    /// A_r of the sphere-approximated residual covariance used for calibration.
    pub a_r_model: f64,
    pub a_r: f64,
    pub d_eff_frac: f64,
    pub eta_u: f64,
    /// E(K) at K = number of planted directions.
    pub energy_k: f64,
    pub residual_spectrum: Vec<f64>,
    pub sphere: Option<SphereTruth>,
    #[serde(skip)]
    pub sigma_x: Option<SymMatrix>,
    #[serde(skip)]
    pub sigma_y: Option<SymMatrix>,
    #[serde(skip)]
    pub sigma_r: Option<SymMatrix>,
    #[serde(skip)]
    pub residual_dirs: Option<Array2<f64>>,
}

struct Plant {
    mu0: Array1<f64>,
    offset: Array1<f64>,
    w: Array2<f64>,
    u: Array2<f64>,
    latent: Vec<f64>,
    energies: Vec<f64>,
    bx: Array2<f64>,
    by: Array2<f64>,
    lx: Vec<f64>,
    ly: Vec<f64>,
    a_r_model: f64,
}

fn geometric(len: usize, first: f64, last: f64, total: f64) -> Vec<f64> {
    if len == 0 {
        return Vec::new();
    }
    let v: Vec<f64> = (0..len)
        .map(|i| {
            let f = if len == 1 { 0.0 } else { i as f64 / (len - 1) as f64 };
            first * (last / first).powf(f)
        })
        .collect();
    let sum: f64 = v.iter().sum();
    v.iter().map(|x| x * total / sum).collect()
}

/// `B diag(l) Bᵀ`.
fn spectral(b: &Array2<f64>, l: &[f64]) -> Array2<f64> {
    let scaled = b * &Array1::from(l.to_vec()).insert_axis(Axis(0));
    scaled.dot(&b.t())
}

fn power_max(s: &Array2<f64>) -> f64 {
    let d = s.nrows();
    let mut v = Array1::from_shape_fn(d, |i| 1.0 + 0.01 * i as f64);
    v /= v.dot(&v).sqrt();
    let mut lambda = 0.0;
    for _ in 0..5000 {
        let w = s.dot(&v);
        let next = v.dot(&w);
        let norm = w.dot(&w).sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        v = w / norm;
        if (next - lambda).abs() <= 1e-13 * next.abs() {
            return next;
        }
        lambda = next;
    }
    lambda
}

impl PlantSpec {
    pub fn validate(&self) -> Result<()> {
        let k = self.residual_weights.len();
        if self.n == 0 || self.d == 0 {
            return Err(Error::InvalidInput("n and d must be positive".into()));
        }
        if 2 + self.r_true + k > self.d {
            return Err(Error::InvalidInput(format!(
                "r_true + K + 2 = {} exceeds d = {}",
                2 + self.r_true + k,
                self.d
            )));
        }
        if self.residual_weights.iter().any(|w| !(*w > 0.0))
            || self.residual_weights.windows(2).any(|p| p[1] > p[0])
        {
            return Err(Error::InvalidInput("residual weights must be positive and descending".into()));
        }
        let nonneg = [
            self.latent_energy,
            self.mean_norm,
            self.centroid_offset,
            self.noise_x,
            self.noise_y,
        ];
        if nonneg.iter().any(|v| !(*v >= 0.0 && v.is_finite()))
            || !(self.spectrum_decay > 0.0)
            || !(self.noise_spread >= 1.0)
            || self.residual_energy.is_some_and(|e| !(e >= 0.0))
        {
            return Err(Error::InvalidInput("plant spec has an invalid magnitude".into()));
        }
        if self.residual_energy.is_none() && !(self.target_a_r >= 1.0 && self.target_a_r <= self.d as f64) {
            return Err(Error::InvalidInput("target A_r must lie in [1, d]".into()));
        }
        Ok(())
    }

    fn plant(&self) -> Result<Plant> {
        self.validate()?;
        let d = self.d;
        let k = self.residual_weights.len();
        let mut rng = stream(derive(self.seed, "bases"), 0);
        let q = haar_frame(d, 2 + self.r_true + k, &mut rng);
        let bx = haar_frame(d, d, &mut rng);
        let by = haar_frame(d, d, &mut rng);
        let mu0 = q.column(0).to_owned() * self.mean_norm;
        let offset = q.column(1).to_owned() * self.centroid_offset;
        let w = q.slice(s![.., 2..2 + self.r_true]).to_owned();
        let u = q.slice(s![.., 2 + self.r_true..]).to_owned();
        let latent = geometric(self.r_true, 1.0, self.spectrum_decay, self.latent_energy);
        let lx = geometric(d, self.noise_spread, 1.0, self.noise_x);
        let ly = geometric(d, self.noise_spread, 1.0, self.noise_y);
        let wsum: f64 = self.residual_weights.iter().sum();
        let wn: Vec<f64> = self.residual_weights.iter().map(|v| v / wsum).collect();

        let sl = spectral(&w, &latent);
        let nx = spectral(&bx, &lx);
        let ny = spectral(&by, &ly);
        let pw = spectral(&u, &wn);
        let model = |e: f64| -> f64 {
            let (a2, b2) = if self.normalize {
                let m2 = self.mean_norm.powi(2) + self.latent_energy;
                (m2 + self.noise_x, m2 + self.centroid_offset.powi(2) + e + self.noise_y)
            } else {
                (1.0, 1.0)
            };
            let leak = (1.0 / a2.sqrt() - 1.0 / b2.sqrt()).powi(2);
            let sm = &sl * leak + &nx / a2 + &ny / b2 + &pw * (e / b2);
            let tr = sm.diag().sum();
            power_max(&sm) / (tr / d as f64)
        };
        let total = match self.residual_energy {
            Some(e) => e,
            None => {
                let (mut lo, mut hi) = (0.0, 1.0);
                while model(hi) < self.target_a_r {
                    hi *= 2.0;
                    if hi > 1e6 {
                        return Err(Error::InvalidInput("target A_r unreachable".into()));
                    }
                }
                if model(lo) > self.target_a_r {
                    return Err(Error::InvalidInput("noise alone exceeds target A_r".into()));
                }
                for _ in 0..60 {
                    let mid = 0.5 * (lo + hi);
                    if model(mid) < self.target_a_r {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                0.5 * (lo + hi)
            }
        };
        let energies = wn.iter().map(|v| v * total).collect();
        Ok(Plant {
            mu0,
            offset,
            w,
            u,
            latent,
            energies,
            bx,
            by,
            lx,
            ly,
            a_r_model: model(total),
        })
    }

    fn draw(&self, plant: &Plant, n: usize, label: &str) -> Result<PairedSet> {
        let d = self.d;
        let (rt, k) = (self.r_true, plant.energies.len());
        let base = derive(self.seed, label);
        let width = rt + k + 2 * d;
        let rows: Vec<Vec<f64>> = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut rng = stream(base, i as u64);
                (0..width).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
            })
            .collect();
        let mut z = Array2::zeros((n, width));
        for (i, row) in rows.into_iter().enumerate() {
            z.row_mut(i).assign(&Array1::from(row));
        }
        let scale = |v: &[f64]| Array1::from(v.iter().map(|x| x.sqrt()).collect::<Vec<_>>()).insert_axis(Axis(0));
        let lat = &z.slice(s![.., ..rt]) * &scale(&plant.latent);
        let res = &z.slice(s![.., rt..rt + k]) * &scale(&plant.energies);
        let ex = &z.slice(s![.., rt + k..rt + k + d]) * &scale(&plant.lx);
        let ey = &z.slice(s![.., rt + k + d..]) * &scale(&plant.ly);
        let shared = lat.dot(&plant.w.t()) + &plant.mu0.view().insert_axis(Axis(0));
        let x = &shared + &ex.dot(&plant.bx.t());
        let y = &shared + &res.dot(&plant.u.t()) + &ey.dot(&plant.by.t()) + &plant.offset.view().insert_axis(Axis(0));
        let (x, y) = if self.normalize {
            (normalize_rows(&x)?, normalize_rows(&y)?)
        } else {
            (x, y)
        };
        PairedSet::new(EmbeddingSet::new(x, "image")?, EmbeddingSet::new(y, "text")?)
    }
}

struct Summary {
    a_r: f64,
    d_eff_frac: f64,
    energy_k: f64,
    eta_u: f64,
    spectrum: Vec<f64>,
}

/// Residual targets; a zero residual reports A_r = 1 and zero fractions.
fn summarize(sr: &SymMatrix, u: &ArrayView2<f64>) -> Result<Summary> {
    let d = sr.dim();
    if sr.trace() <= 0.0 {
        return Ok(Summary {
            a_r: 1.0,
            d_eff_frac: 0.0,
            energy_k: 0.0,
            eta_u: 0.0,
            spectrum: vec![0.0; d],
        });
    }
    let spec = ResidualSpectrum::from_matrix(sr)?;
    let k = u.ncols();
    Ok(Summary {
        a_r: spec.anisotropy(),
        d_eff_frac: spec.effective_dimension() / d as f64,
        energy_k: if k == 0 { 0.0 } else { spec.energy_curve()[k - 1].value },
        eta_u: if k == 0 { 0.0 } else { coverage_ratio(u, sr)? },
        spectrum: spec.normalized(),
    })
}

/// Draws `spec.n` pairs and the closed-form targets of the plant.
pub fn generate(spec: &PlantSpec) -> Result<(PairedSet, GroundTruth)> {
    let plant = spec.plant()?;
    let pairs = spec.draw(&plant, spec.n, "pairs")?;

    let sl = spectral(&plant.w, &plant.latent);
    let nx = spectral(&plant.bx, &plant.lx);
    let ny = spectral(&plant.by, &plant.ly);
    let pe = spectral(&plant.u, &plant.energies);
    let sigma_x = SymMatrix::new(&sl + &nx)?;
    let sigma_y = SymMatrix::new(&sl + &ny + &pe)?;
    let sigma_r = SymMatrix::new(&nx + &ny + &pe)?;
    let raw = summarize(&sigma_r, &plant.u.view())?;

    let sphere = if spec.mc_samples > 0 {
        let mc = spec.draw(&plant, spec.mc_samples, "monte-carlo")?;
        let sr = residual_covariance(&mc)?;
        let sm = summarize(&sr, &plant.u.view())?;
        let mx = mc.x.data().mean_axis(Axis(0)).unwrap();
        let my = mc.y.data().mean_axis(Axis(0)).unwrap();
        Some(SphereTruth {
            samples: spec.mc_samples,
            a_r: sm.a_r,
            d_eff_frac: sm.d_eff_frac,
            eta_u: sm.eta_u,
            energy_k: sm.energy_k,
            mean_gap: (&mx - &my).mapv(|v| v * v).sum().sqrt(),
        })
    } else {
        None
    };

    let truth = GroundTruth {
        mu_x: plant.mu0.to_vec(),
        mu_y: (&plant.mu0 + &plant.offset).to_vec(),
        residual_energies: plant.energies.clone(),
        a_r_model: plant.a_r_model,
        a_r: raw.a_r,
        d_eff_frac: raw.d_eff_frac,
        eta_u: raw.eta_u,
        energy_k: raw.energy_k,
        residual_spectrum: raw.spectrum,
        sphere,
        sigma_x: Some(sigma_x),
        sigma_y: Some(sigma_y),
        sigma_r: Some(sigma_r),
        residual_dirs: Some(plant.u.clone()),
    };
    Ok((pairs, truth))
}

/// Planted periodic potential
/// `U(φ) = Σ κ_k(1 − cos(φ_k − ψ_k)) + Σ_E c_kl(1 − cos(φ_k − φ_l − η_kl))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhaseSpec {
    pub n: usize,
    pub anchors: Vec<f64>,
    pub kappa: Vec<f64>,
    pub couplings: Vec<Edge>,
    /// Radii are log-normal: `exp(log_rho_mean + log_rho_sd·N(0,1))`.
    pub log_rho_mean: f64,
    pub log_rho_sd: f64,
    pub step: f64,
    pub burn_in: usize,
    pub thin: usize,
    /// Samples kept from each independent chain.
    pub samples_per_chain: usize,
    pub seed: u64,
}

impl Default for PhaseSpec {
    fn default() -> Self {
        Self {
            n: 10_000,
            anchors: Vec::new(),
            kappa: Vec::new(),
            couplings: Vec::new(),
            log_rho_mean: -1.2,
            log_rho_sd: 0.2,
            step: 0.01,
            burn_in: 5000,
            thin: 10,
            samples_per_chain: 1,
            seed: 0,
        }
    }
}

impl PhaseSpec {
    /// `m` blocks with seeded uniform anchors of equal strength and no edges.
    pub fn anchored(m: usize, kappa: f64, n: usize, seed: u64) -> Self {
        let mut rng = stream(derive(seed, "anchors"), 0);
        Self {
            n,
            anchors: (0..m).map(|_| rng.random_range(-PI..PI)).collect(),
            kappa: vec![kappa; m],
            seed,
            ..Self::default()
        }
    }

    pub fn m(&self) -> usize {
        self.anchors.len()
    }

    pub fn graph(&self) -> DependencyGraph {
        let mut edges = self.couplings.clone();
        edges.sort_by_key(|e| (e.k, e.l));
        DependencyGraph { edges }
    }

    fn validate(&self) -> Result<()> {
        let m = self.m();
        if m == 0 || self.kappa.len() != m {
            return Err(Error::InvalidInput("anchors and kappa must have equal nonzero length".into()));
        }
        if self.kappa.iter().any(|k| !(*k >= 0.0)) {
            return Err(Error::InvalidInput("kappa must be nonnegative".into()));
        }
        for e in &self.couplings {
            if e.k >= e.l || e.l >= m || !(e.coupling >= 0.0) {
                return Err(Error::InvalidInput(format!("bad coupling ({}, {})", e.k, e.l)));
            }
        }
        if !(self.step > 0.0) || self.thin == 0 || self.samples_per_chain == 0 || self.n == 0 {
            return Err(Error::InvalidInput("step, thin, samples_per_chain and n must be positive".into()));
        }
        Ok(())
    }

    pub fn potential(&self, phi: &[f64]) -> f64 {
        let mut u = 0.0;
        for k in 0..self.m() {
            u += self.kappa[k] * (1.0 - (phi[k] - self.anchors[k]).cos());
        }
        for e in &self.couplings {
            u += e.coupling * (1.0 - (phi[e.k] - phi[e.l] - e.offset).cos());
        }
        u
    }

    pub fn gradient(&self, phi: &[f64]) -> Vec<f64> {
        let mut g: Vec<f64> = (0..self.m())
            .map(|k| self.kappa[k] * (phi[k] - self.anchors[k]).sin())
            .collect();
        for e in &self.couplings {
            let v = e.coupling * (phi[e.k] - phi[e.l] - e.offset).sin();
            g[e.k] += v;
            g[e.l] -= v;
        }
        g
    }
}

/// Phases and radii sampled from a planted potential.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseCorpus {
    pub theta: Array2<f64>,
    pub rho: Array2<f64>,
}

/// Langevin sampling of `exp(−U)`: independent seeded chains, each run
/// through the burn-in and then thinned.
pub fn planted_phase_corpus(spec: &PhaseSpec) -> Result<PhaseCorpus> {
    spec.validate()?;
    let m = spec.m();
    let chains = spec.n.div_ceil(spec.samples_per_chain);
    let base = derive(spec.seed, "langevin");
    let noise = (2.0 * spec.step).sqrt();
    let per_chain: Vec<Vec<f64>> = (0..chains)
        .into_par_iter()
        .map(|c| {
            let mut rng = stream(base, c as u64);
            let mut phi: Vec<f64> = (0..m).map(|_| rng.random_range(-PI..PI)).collect();
            let mut out = Vec::with_capacity(spec.samples_per_chain * m);
            let advance = |phi: &mut Vec<f64>, steps: usize, rng: &mut crate::rng::StreamRng| {
                for _ in 0..steps {
                    let g = spec.gradient(phi);
                    for k in 0..m {
                        let xi: f64 = rng.sample(StandardNormal);
                        phi[k] = wrap(phi[k] - spec.step * g[k] + noise * xi);
                    }
                }
            };
            advance(&mut phi, spec.burn_in, &mut rng);
            for s in 0..spec.samples_per_chain {
                if s > 0 {
                    advance(&mut phi, spec.thin, &mut rng);
                }
                out.extend_from_slice(&phi);
            }
            out
        })
        .collect();
    let mut theta = Array2::zeros((spec.n, m));
    let mut row = 0;
    'fill: for chain in per_chain {
        for sample in chain.chunks(m) {
            if row == spec.n {
                break 'fill;
            }
            theta.row_mut(row).assign(&Array1::from(sample.to_vec()));
            row += 1;
        }
    }
    let mut rng = stream(derive(spec.seed, "radii"), 0);
    let rho = Array2::from_shape_fn((spec.n, m), |_| {
        (spec.log_rho_mean + spec.log_rho_sd * rng.sample::<f64, _>(StandardNormal)).exp()
    });
    Ok(PhaseCorpus { theta, rho })
}
