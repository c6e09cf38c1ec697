//! Text-to-image substitution: global initialization, bounded
//! prior-guided refinement, reconstruction and centroid calibration.

use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::artifact::{Dtype, SectionFile};
use crate::error::{Error, Result};
use crate::frame::{block_coords_batch, canonical_rows, complement_coords, to_polar_batch, Frame};
use crate::nn::{Adam, Mlp, MlpShape};
use crate::numerics::{column_means_sorted, wrap, Ecdf};
use crate::phase_prior::{DependencyGraph, PhasePrior, ScoreBatch};
use crate::rng::stream;
use crate::store::write_bytes;

const SD_EPS: f64 = 1e-8;
const CERT_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Bounds {
    pub alpha_theta: f64,
    pub alpha_rho: f64,
    pub alpha_v: f64,
}

impl Default for Bounds {
    fn default() -> Self {
        Self {
            alpha_theta: 0.3,
            alpha_rho: 0.2,
            alpha_v: 0.05,
        }
    }
}

/// Radius of the per-block move `ρ⁰κ` allowed by the phase and radial bounds.
pub fn kappa(alpha_theta: f64, alpha_rho: f64) -> f64 {
    let s = alpha_rho.exp();
    ((s - 1.0).powi(2) + 4.0 * s * (alpha_theta / 2.0).sin().powi(2)).sqrt()
}

impl Bounds {
    pub fn validate(&self) -> Result<()> {
        let ok = self.alpha_theta > 0.0
            && self.alpha_theta < std::f64::consts::PI
            && self.alpha_rho > 0.0
            && self.alpha_v > 0.0
            && self.alpha_rho.is_finite()
            && self.alpha_v.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid bounds {self:?}")))
        }
    }

    pub fn kappa(&self) -> f64 {
        kappa(self.alpha_theta, self.alpha_rho)
    }

    /// A-priori displacement bound `κ + α_v√d` for unit-scale blocks.
    pub fn eps_eff(&self, d: usize) -> f64 {
        self.kappa() + self.alpha_v * (d as f64).sqrt()
    }
}

/// Per-block radial ECDFs: text radii of the recentered estimation text,
/// image radii of the estimation images.
#[derive(Debug, Clone, PartialEq)]
pub struct RadialEcdfs {
    pub text: Vec<Ecdf>,
    pub image: Vec<Ecdf>,
}

fn recenter(y: &ArrayView2<f64>, frame: &Frame) -> Array2<f64> {
    let shift = &frame.mu_i - &frame.mu_t;
    y + &shift.view().insert_axis(Axis(0))
}

impl RadialEcdfs {
    pub fn fit(frame: &Frame, x_est: &ArrayView2<f64>, y_est: &ArrayView2<f64>) -> Result<Self> {
        let px = to_polar_batch(frame, x_est);
        let py = to_polar_batch(frame, &recenter(y_est, frame).view());
        let fit = |rho: &Array2<f64>| -> Result<Vec<Ecdf>> {
            rho.axis_iter(Axis(1)).map(|c| Ecdf::fit(&c.to_vec())).collect()
        };
        Ok(Self {
            text: fit(&py.rho)?,
            image: fit(&px.rho)?,
        })
    }

    pub fn m(&self) -> usize {
        self.image.len()
    }

    fn write_sections(&self, f: &mut SectionFile) {
        for (k, (t, i)) in self.text.iter().zip(&self.image).enumerate() {
            f.push_vector(&format!("ecdf.text.{k}"), Dtype::F64, t.sorted());
            f.push_vector(&format!("ecdf.image.{k}"), Dtype::F64, i.sorted());
        }
    }

    fn read_sections(m: usize, f: &SectionFile) -> Result<Self> {
        let mut text = Vec::with_capacity(m);
        let mut image = Vec::with_capacity(m);
        for k in 0..m {
            text.push(Ecdf::fit(&f.vector(&format!("ecdf.text.{k}"))?.to_vec())?);
            image.push(Ecdf::fit(&f.vector(&format!("ecdf.image.{k}"))?.to_vec())?);
        }
        Ok(Self { text, image })
    }
}

/// Initial states, one row per sample; `v0` is ambient and lies in V.
#[derive(Debug, Clone, PartialEq)]
pub struct InitState {
    pub theta0: Array2<f64>,
    pub rho0: Array2<f64>,
    pub v0: Array2<f64>,
}

impl InitState {
    pub fn n(&self) -> usize {
        self.theta0.nrows()
    }

    pub fn select(&self, idx: &[usize]) -> InitState {
        InitState {
            theta0: self.theta0.select(Axis(0), idx),
            rho0: self.rho0.select(Axis(0), idx),
            v0: self.v0.select(Axis(0), idx),
        }
    }
}

pub fn global_init(y: &ArrayView2<f64>, frame: &Frame, ecdfs: &RadialEcdfs) -> Result<InitState> {
    let m = frame.m();
    if ecdfs.m() != m || ecdfs.text.len() != m {
        return Err(Error::InvalidConfig(format!(
            "{} radial ECDFs for {m} blocks",
            ecdfs.m()
        )));
    }
    let p = to_polar_batch(frame, &recenter(y, frame).view());
    let mut rho0 = p.rho.clone();
    for k in 0..m {
        for v in rho0.column_mut(k) {
            *v = ecdfs.text[k].transfer(&ecdfs.image[k], *v);
        }
    }
    let vs = &frame.v_stats;
    let gain = Array1::from_shape_fn(vs.sd_i.len(), |j| vs.sd_i[j] / (vs.sd_t[j] + SD_EPS));
    let yv = complement_coords(frame, y);
    let coords = (&yv - &vs.mean_t.view().insert_axis(Axis(0))) * &gain.view().insert_axis(Axis(0))
        + &vs.mean_i.view().insert_axis(Axis(0));
    Ok(InitState {
        theta0: p.theta,
        rho0,
        v0: coords.dot(&frame.q_v.t()),
    })
}

/// Residual corrector `g_η`: `[sin θ⁰, cos θ⁰, log ρ⁰, v⁰] → (Δθ, Δρ, Δv)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RefineNet {
    pub m: usize,
    pub d: usize,
    pub mlp: Mlp,
}

impl RefineNet {
    pub fn new<R: Rng>(m: usize, d: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            m,
            d,
            mlp: Mlp::new(&[3 * m + d, hidden, hidden, 2 * m + d], rng, true),
        }
    }

    pub fn default_hidden(m: usize, d: usize) -> usize {
        2 * (3 * m + d)
    }

    /// Network whose every weight is zero.
    pub fn zero(m: usize, d: usize) -> Self {
        let mut net = Self::new(m, d, 1, &mut stream(0, 0));
        for l in &mut net.mlp.layers {
            l.w.fill(0.0);
            l.b.fill(0.0);
        }
        net
    }

    fn features(&self, init: &InitState) -> Array2<f64> {
        let (n, m) = init.theta0.dim();
        let mut f = Array2::zeros((n, 3 * m + self.d));
        f.slice_mut(s![.., ..m]).assign(&init.theta0.mapv(f64::sin));
        f.slice_mut(s![.., m..2 * m]).assign(&init.theta0.mapv(f64::cos));
        f.slice_mut(s![.., 2 * m..3 * m]).assign(&init.rho0.mapv(f64::ln));
        f.slice_mut(s![.., 3 * m..]).assign(&init.v0);
        f
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Refined {
    pub theta: Array2<f64>,
    pub rho: Array2<f64>,
    pub v: Array2<f64>,
}

struct RawDeltas {
    tanh_theta: Array2<f64>,
    tanh_rho: Array2<f64>,
}

fn apply_deltas(init: &InitState, out: &Array2<f64>, frame: &Frame, bounds: &Bounds) -> (Refined, RawDeltas) {
    let m = init.theta0.ncols();
    let tanh_theta = out.slice(s![.., ..m]).mapv(f64::tanh);
    let tanh_rho = out.slice(s![.., m..2 * m]).mapv(f64::tanh);
    let theta = (&init.theta0 + &(&tanh_theta * bounds.alpha_theta)).mapv(wrap);
    let rho = &init.rho0 * &tanh_rho.mapv(|t| (bounds.alpha_rho * t).exp());
    // Δv projected onto V, squashed in V's own coordinates.
    let dv = out.slice(s![.., 2 * m..]);
    let step = dv.dot(&frame.q_v).mapv(|t| bounds.alpha_v * t.tanh());
    let v = &init.v0 + &step.dot(&frame.q_v.t());
    (Refined { theta, rho, v }, RawDeltas { tanh_theta, tanh_rho })
}

pub fn refine(init: &InitState, net: &RefineNet, frame: &Frame, bounds: &Bounds) -> Refined {
    let out = net.mlp.predict(&net.features(init));
    apply_deltas(init, &out, frame, bounds).0
}

/// `L^II` for explicit noise draws (`t` per row, `eps` standard normal),
/// with its gradients with respect to `θ̂` and `log ρ̂`.
pub fn prior_matching_loss_grads(
    theta_hat: &ArrayView2<f64>,
    rho_hat: &ArrayView2<f64>,
    prior: &PhasePrior,
    t: &ArrayView1<f64>,
    eps: &ArrayView2<f64>,
) -> (f64, Array2<f64>, Array2<f64>) {
    let log_rho = rho_hat.mapv(f64::ln);
    let sched = prior.schedule();
    let batch = ScoreBatch::with_noise(theta_hat, &log_rho.view(), &prior.field, sched, t.to_owned(), eps);
    let (loss, _, ig) = prior.net.loss_grads(&batch);
    let mut d_theta = ig.theta_tilde;
    for (i, mut row) in d_theta.axis_iter_mut(Axis(0)).enumerate() {
        let g = row.to_vec();
        let hg = prior.field.hess_vec(&theta_hat.row(i).to_vec(), &g);
        for k in 0..g.len() {
            row[k] = g[k] - sched.tau * hg[k];
        }
    }
    (loss, d_theta, ig.log_rho)
}

pub fn prior_matching_loss(
    theta_hat: &ArrayView2<f64>,
    rho_hat: &ArrayView2<f64>,
    prior: &PhasePrior,
    t: &ArrayView1<f64>,
    eps: &ArrayView2<f64>,
) -> f64 {
    let log_rho = rho_hat.mapv(f64::ln);
    let batch = ScoreBatch::with_noise(theta_hat, &log_rho.view(), &prior.field, prior.schedule(), t.to_owned(), eps);
    prior.net.loss(&batch)
}

/// Noise draws for a batch of `n` rows of `m` phases.
pub fn draw_noise<R: Rng>(n: usize, m: usize, prior: &PhasePrior, rng: &mut R) -> (Array1<f64>, Array2<f64>) {
    let t = Array1::from_shape_fn(n, |_| prior.schedule().sample_t(rng));
    let eps = Array2::from_shape_fn((n, m), |_| rng.sample::<f64, _>(StandardNormal));
    (t, eps)
}

/// `L^Φ` averaged over rows, with its gradient with respect to `θ̂`.
pub fn phase_deformation_loss_grads(
    theta_hat: &ArrayView2<f64>,
    theta0: &ArrayView2<f64>,
    rho0: &ArrayView2<f64>,
    graph: &DependencyGraph,
    eps: f64,
) -> Result<(f64, Array2<f64>)> {
    if graph.is_empty() {
        return Err(Error::InvalidConfig("phase deformation needs a nonempty graph".into()));
    }
    let n = theta_hat.nrows();
    let ne = graph.len() as f64;
    let mut grad = Array2::zeros(theta_hat.dim());
    let mut total = 0.0;
    for i in 0..n {
        let norm: f64 = graph.edges.iter().map(|e| rho0[[i, e.k]] * rho0[[i, e.l]]).sum::<f64>() + eps;
        for e in &graph.edges {
            let w = rho0[[i, e.k]] * rho0[[i, e.l]] / norm;
            let delta = (theta_hat[[i, e.k]] - theta_hat[[i, e.l]]) - (theta0[[i, e.k]] - theta0[[i, e.l]]);
            total += w * (1.0 - delta.cos()) / ne;
            let g = w * delta.sin() / (ne * n as f64);
            grad[[i, e.k]] += g;
            grad[[i, e.l]] -= g;
        }
    }
    Ok((total / n as f64, grad))
}

pub fn phase_deformation_loss(
    theta_hat: &ArrayView2<f64>,
    theta0: &ArrayView2<f64>,
    rho0: &ArrayView2<f64>,
    graph: &DependencyGraph,
    eps: f64,
) -> Result<f64> {
    Ok(phase_deformation_loss_grads(theta_hat, theta0, rho0, graph, eps)?.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlignConfig {
    pub bounds: Bounds,
    pub beta: f64,
    /// Hidden width; `None` means 2(3m + d).
    pub hidden: Option<usize>,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub validation_size: usize,
    pub seed: u64,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            bounds: Bounds::default(),
            beta: 0.5,
            hidden: None,
            steps: 2000,
            batch: 256,
            lr: 1e-3,
            validation_size: 1024,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinerReport {
    pub initial_val_prior_loss: f64,
    pub final_val_prior_loss: f64,
    pub final_val_deformation: f64,
    pub steps: usize,
    /// Mean total loss over each block of 100 steps.
    pub loss_trace: Vec<f64>,
}

struct Validation {
    init: InitState,
    t: Array1<f64>,
    eps: Array2<f64>,
}

fn validation_losses(v: &Validation, net: &RefineNet, frame: &Frame, prior: &PhasePrior, bounds: &Bounds) -> Result<(f64, f64)> {
    let r = refine(&v.init, net, frame, bounds);
    let l2 = prior_matching_loss(&r.theta.view(), &r.rho.view(), prior, &v.t.view(), &v.eps.view());
    let lphi = phase_deformation_loss(&r.theta.view(), &v.init.theta0.view(), &v.init.rho0.view(), &prior.field.graph, frame.eps_polar)?;
    Ok((l2, lphi))
}

/// Trains `g_η` on unpaired estimation text against the frozen prior.
pub fn train_refiner(
    y_est: &ArrayView2<f64>,
    frame: &Frame,
    ecdfs: &RadialEcdfs,
    prior: &PhasePrior,
    cfg: &AlignConfig,
) -> Result<(RefineNet, RefinerReport)> {
    cfg.bounds.validate()?;
    if !(cfg.beta >= 0.0) || cfg.batch == 0 || cfg.steps == 0 || !(cfg.lr > 0.0) {
        return Err(Error::InvalidConfig("refiner needs beta >= 0 and positive batch, steps, lr".into()));
    }
    if prior.m() != frame.m() {
        return Err(Error::InvalidConfig(format!("prior has m={}, frame has m={}", prior.m(), frame.m())));
    }
    let n = y_est.nrows();
    if n == 0 {
        return Err(Error::insufficient(1, 0));
    }
    let (m, d) = (frame.m(), frame.d);
    let y = canonical_rows(y_est);
    let init = global_init(&y.view(), frame, ecdfs)?;
    let hidden = cfg.hidden.unwrap_or_else(|| RefineNet::default_hidden(m, d));
    let mut net = RefineNet::new(m, d, hidden, &mut stream(cfg.seed, 0));
    let mut opt = Adam::new(&net.mlp, cfg.lr);
    let mut rng = stream(cfg.seed, 1);

    let val = {
        let mut vr = stream(cfg.seed, 2);
        let size = cfg.validation_size.clamp(1, n);
        let idx = rand::seq::index::sample(&mut vr, n, size).into_vec();
        let vinit = init.select(&idx);
        let (t, eps) = draw_noise(size, m, prior, &mut vr);
        Validation { init: vinit, t, eps }
    };
    let (initial_val_prior_loss, _) = validation_losses(&val, &net, frame, prior, &cfg.bounds)?;

    let b = &cfg.bounds;
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n;
    let mut trace = Vec::new();
    let (mut block, mut block_len) = (0.0, 0);
    for step in 0..cfg.steps {
        if cursor + cfg.batch > n {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let idx = &order[cursor..(cursor + cfg.batch).min(n)];
        cursor += cfg.batch;
        let bi = init.select(idx);
        let feats = net.features(&bi);
        let (out, cache) = net.mlp.forward(&feats);
        let (r, raw) = apply_deltas(&bi, &out, frame, b);
        let (t, eps) = draw_noise(idx.len(), m, prior, &mut rng);
        let (l2, mut d_theta, d_logr) = prior_matching_loss_grads(&r.theta.view(), &r.rho.view(), prior, &t.view(), &eps.view());
        let (lphi, g_phi) = phase_deformation_loss_grads(&r.theta.view(), &bi.theta0.view(), &bi.rho0.view(), &prior.field.graph, frame.eps_polar)?;
        d_theta.scaled_add(cfg.beta, &g_phi);
        let loss = l2 + cfg.beta * lphi;
        if !loss.is_finite() {
            return Err(Error::TrainingDiverged { step, loss });
        }
        let mut dout = Array2::zeros(out.dim());
        for i in 0..idx.len() {
            for k in 0..m {
                let tt = raw.tanh_theta[[i, k]];
                dout[[i, k]] = d_theta[[i, k]] * b.alpha_theta * (1.0 - tt * tt);
                let tr = raw.tanh_rho[[i, k]];
                dout[[i, m + k]] = d_logr[[i, k]] * b.alpha_rho * (1.0 - tr * tr);
            }
        }
        let (grads, _) = net.mlp.backward(&cache, &dout);
        opt.step(&mut net.mlp, &grads);
        block += loss;
        block_len += 1;
        if block_len == 100 {
            trace.push(block / 100.0);
            block = 0.0;
            block_len = 0;
        }
    }
    if block_len > 0 {
        trace.push(block / block_len as f64);
    }
    if !net.mlp.is_finite() {
        return Err(Error::TrainingDiverged {
            step: cfg.steps,
            loss: f64::NAN,
        });
    }
    net.mlp.freeze();
    let (final_val_prior_loss, final_val_deformation) = validation_losses(&val, &net, frame, prior, &cfg.bounds)?;
    Ok((
        net,
        RefinerReport {
            initial_val_prior_loss,
            final_val_prior_loss,
            final_val_deformation,
            steps: cfg.steps,
            loss_trace: trace,
        },
    ))
}

/// Unit-norm `Q_U c(ρ̂, θ̂) + v̂`.
pub fn reconstruct(refined: &Refined, frame: &Frame) -> Result<Array2<f64>> {
    let c = block_coords_batch(&refined.rho.view(), &refined.theta.view());
    let mut e = c.dot(&frame.q_u.t()) + &refined.v;
    for (i, mut row) in e.axis_iter_mut(Axis(0)).enumerate() {
        let norm = row.dot(&row).sqrt();
        if !(norm >= 1e-12) {
            return Err(Error::DegenerateRow(i));
        }
        row /= norm;
    }
    Ok(e)
}

/// `Norm(e' − μ̂ + μ_i)` with `μ̂` the corpus mean of `e'`.
pub fn centroid_calibrate(e_prime: &ArrayView2<f64>, mu_i: &ArrayView1<f64>) -> Result<Array2<f64>> {
    if e_prime.nrows() == 0 {
        return Err(Error::insufficient(1, 0));
    }
    let shift = mu_i - &column_means_sorted(e_prime);
    let mut e = e_prime + &shift.view().insert_axis(Axis(0));
    for (i, mut row) in e.axis_iter_mut(Axis(0)).enumerate() {
        let norm = row.dot(&row).sqrt();
        if !(norm >= 1e-12) {
            return Err(Error::DegenerateRow(i));
        }
        row /= norm;
    }
    Ok(e)
}

/// Everything Stage II needs at inference time.
#[derive(Debug, Clone, PartialEq)]
pub struct Aligner {
    pub frame: Frame,
    pub ecdfs: RadialEcdfs,
    pub net: RefineNet,
    pub config: AlignConfig,
    pub report: RefinerReport,
}

#[derive(Serialize, Deserialize)]
struct AlignerHeader {
    m: usize,
    d: usize,
    config: AlignConfig,
    net: MlpShape,
    report: RefinerReport,
}

const CHUNK: usize = 1024;

impl Aligner {
    pub fn fit(
        x_est: &ArrayView2<f64>,
        y_est: &ArrayView2<f64>,
        frame: &Frame,
        prior: &PhasePrior,
        cfg: &AlignConfig,
    ) -> Result<Self> {
        let ecdfs = RadialEcdfs::fit(frame, x_est, y_est)?;
        let (net, report) = train_refiner(y_est, frame, &ecdfs, prior, cfg)?;
        Ok(Self {
            frame: frame.clone(),
            ecdfs,
            net,
            config: cfg.clone(),
            report,
        })
    }

    /// Per-row pipeline up to (not including) corpus calibration.
    pub fn transform_rows(&self, y: &ArrayView2<f64>) -> Result<Array2<f64>> {
        let n = y.nrows();
        let chunks: Vec<Result<Array2<f64>>> = (0..n.div_ceil(CHUNK))
            .into_par_iter()
            .map(|c| {
                let rows = y.slice(s![c * CHUNK..((c + 1) * CHUNK).min(n), ..]);
                let init = global_init(&rows, &self.frame, &self.ecdfs)?;
                let r = refine(&init, &self.net, &self.frame, &self.config.bounds);
                reconstruct(&r, &self.frame)
            })
            .collect();
        let mut out = Array2::zeros((n, self.frame.d));
        for (c, part) in chunks.into_iter().enumerate() {
            let part = part?;
            out.slice_mut(s![c * CHUNK..c * CHUNK + part.nrows(), ..]).assign(&part);
        }
        Ok(out)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let header = AlignerHeader {
            m: self.frame.m(),
            d: self.frame.d,
            config: self.config.clone(),
            net: self.net.mlp.shape(),
            report: self.report.clone(),
        };
        write_bytes(&dir.join("refiner.json"), &serde_json::to_vec_pretty(&header)?)?;
        let mut f = SectionFile::new();
        self.net.mlp.write_sections("refine", &mut f);
        self.ecdfs.write_sections(&mut f);
        f.save(&dir.join("refiner.bin"))?;
        Ok(())
    }

    pub fn load(dir: &Path, frame: &Frame) -> Result<Self> {
        let path = dir.join("refiner.json");
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let h: AlignerHeader = serde_json::from_slice(&bytes)
            .map_err(|e| Error::format(path.display().to_string(), e.to_string()))?;
        if h.m != frame.m() || h.d != frame.d {
            return Err(Error::format(path.display().to_string(), "refiner does not match frame"));
        }
        let f = SectionFile::load(&dir.join("refiner.bin"))?;
        let mlp = Mlp::read_sections("refine", &h.net, &f)?;
        Ok(Self {
            frame: frame.clone(),
            ecdfs: RadialEcdfs::read_sections(h.m, &f)?,
            net: RefineNet { m: h.m, d: h.d, mlp },
            config: h.config,
            report: h.report,
        })
    }
}

/// Full substitution of a text corpus: per-row pipeline then centroid
/// calibration over the whole corpus.
pub fn align_corpus(y: &ArrayView2<f64>, aligner: &Aligner) -> Result<Array2<f64>> {
    if y.nrows() == 0 {
        return Err(Error::insufficient(1, 0));
    }
    let e_prime = aligner.transform_rows(y)?;
    centroid_calibrate(&e_prime.view(), &aligner.frame.mu_i.view())
}

/// Per-sample hard-bound checks on one refinement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub samples: usize,
    pub theta_ok: usize,
    pub rho_ok: usize,
    pub v_ok: usize,
    pub block_ok: usize,
    pub max_theta_step: f64,
    pub max_log_rho_step: f64,
    pub max_v_step: f64,
    /// Largest `‖ĉ_k − c_k⁰‖ / (ρ_k⁰ κ)` over all blocks.
    pub max_block_ratio: f64,
}

impl BoundReport {
    pub fn all_ok(&self) -> bool {
        [self.theta_ok, self.rho_ok, self.v_ok, self.block_ok]
            .iter()
            .all(|&c| c == self.samples)
    }
}

pub fn certify_bounds(init: &InitState, refined: &Refined, frame: &Frame, bounds: &Bounds) -> BoundReport {
    let (n, m) = init.theta0.dim();
    let kap = bounds.kappa();
    let dv = (&refined.v - &init.v0).dot(&frame.q_v);
    let mut rep = BoundReport {
        samples: n,
        theta_ok: 0,
        rho_ok: 0,
        v_ok: 0,
        block_ok: 0,
        max_theta_step: 0.0,
        max_log_rho_step: 0.0,
        max_v_step: 0.0,
        max_block_ratio: 0.0,
    };
    for i in 0..n {
        let (mut th, mut lr, mut bl) = (true, true, true);
        for k in 0..m {
            let step = wrap(refined.theta[[i, k]] - init.theta0[[i, k]]).abs();
            rep.max_theta_step = rep.max_theta_step.max(step);
            th &= step <= bounds.alpha_theta + CERT_SLACK;
            let ls = (refined.rho[[i, k]] / init.rho0[[i, k]]).ln().abs();
            rep.max_log_rho_step = rep.max_log_rho_step.max(ls);
            lr &= ls <= bounds.alpha_rho + CERT_SLACK;
            let (r0, t0) = (init.rho0[[i, k]], init.theta0[[i, k]]);
            let (r1, t1) = (refined.rho[[i, k]], refined.theta[[i, k]]);
            let move_ = (r1 * t1.cos() - r0 * t0.cos()).hypot(r1 * t1.sin() - r0 * t0.sin());
            let ratio = move_ / (r0 * kap);
            rep.max_block_ratio = rep.max_block_ratio.max(ratio);
            bl &= ratio <= 1.0 + CERT_SLACK;
        }
        let vmax = dv.row(i).iter().fold(0.0f64, |a, v| a.max(v.abs()));
        rep.max_v_step = rep.max_v_step.max(vmax);
        rep.theta_ok += th as usize;
        rep.rho_ok += lr as usize;
        rep.v_ok += (vmax <= bounds.alpha_v + CERT_SLACK) as usize;
        rep.block_ok += bl as usize;
    }
    rep
}

/// Inner-product drift between unnormalized init reconstructions `z0`
/// and refined reconstructions `z` on the given pairs. With
/// `s = max‖z0_i‖` and `ε = max‖z_i − z0_i‖/s`, every pair must satisfy
/// `|⟨z_i,z_j⟩ − ⟨z0_i,z0_j⟩| / s² ≤ 2ε + ε²`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    pub pairs: usize,
    pub eps_eff: f64,
    pub bound: f64,
    pub max_drift: f64,
    pub violations: usize,
}

pub fn similarity_check(z0: &ArrayView2<f64>, z: &ArrayView2<f64>, pairs: &[(usize, usize)]) -> SimilarityReport {
    let scale = z0
        .axis_iter(Axis(0))
        .map(|r| r.dot(&r).sqrt())
        .fold(0.0f64, f64::max)
        .max(f64::MIN_POSITIVE);
    let diff = z - z0;
    let eps = diff
        .axis_iter(Axis(0))
        .map(|r| r.dot(&r).sqrt())
        .fold(0.0f64, f64::max)
        / scale;
    let bound = 2.0 * eps + eps * eps;
    let mut max_drift: f64 = 0.0;
    let mut violations = 0;
    for &(i, j) in pairs {
        let drift = (z.row(i).dot(&z.row(j)) - z0.row(i).dot(&z0.row(j))).abs() / (scale * scale);
        max_drift = max_drift.max(drift);
        if drift > bound * (1.0 + 1e-12) + 1e-15 {
            violations += 1;
        }
    }
    SimilarityReport {
        pairs: pairs.len(),
        eps_eff: eps,
        bound,
        max_drift,
        violations,
    }
}

/// Unnormalized `Q_U c(ρ, θ) + v`.
pub fn assemble(rho: &ArrayView2<f64>, theta: &ArrayView2<f64>, v: &ArrayView2<f64>, frame: &Frame) -> Array2<f64> {
    block_coords_batch(rho, theta).dot(&frame.q_u.t()) + v
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frame::fit_frame;
    use crate::phase_prior::{train_on_phases, Edge, MixingMode, PriorConfig};
    use crate::store::normalize_rows;
    use approx::assert_relative_eq;

    fn corpus(n: usize, d: usize, seed: u64, scale: f64) -> Array2<f64> {
        let mut rng = stream(seed, 0);
        let x = Array2::from_shape_fn((n, d), |(_, j)| {
            let s = if j < 6 { 1.0 } else { 0.3 };
            scale * s * rng.sample::<f64, _>(StandardNormal) + if j == 0 { 1.0 } else { 0.0 }
        });
        normalize_rows(&x).unwrap()
    }

    fn small_frame(x: &Array2<f64>, y: &Array2<f64>) -> Frame {
        fit_frame(&x.view(), &y.view(), 4, 1e-6, 1e-12).unwrap()
    }

    fn small_prior(frame: &Frame, x: &Array2<f64>) -> PhasePrior {
        let p = to_polar_batch(frame, &x.view());
        let cfg = PriorConfig {
            steps: 300,
            batch: 64,
            top_p: 1,
            mixing: MixingMode::FixedIdentity,
            ..PriorConfig::default()
        };
        train_on_phases(&p.theta.view(), &p.rho.view(), &cfg).unwrap()
    }

    #[test]
    fn kappa_matches_grid_maximum() {
        for (at, ar) in [(0.3, 0.2), (0.1, 0.5), (1.0, 0.05)] {
            let mut best: f64 = 0.0;
            for i in 0..=200 {
                for j in 0..=200 {
                    let dt = -at + 2.0 * at * i as f64 / 200.0;
                    let dr = -ar + 2.0 * ar * j as f64 / 200.0;
                    let s = dr.exp();
                    best = best.max((s * dt.cos() - 1.0).hypot(s * dt.sin()));
                }
            }
            assert_relative_eq!(best, kappa(at, ar), epsilon = 1e-12);
        }
        assert!((kappa(0.3, 0.2) - 0.3985).abs() < 1e-3, "{}", kappa(0.3, 0.2));
    }

    #[test]
    fn self_alignment_with_zero_net_reproduces_input() {
        let x = corpus(400, 10, 1, 0.5);
        let frame = small_frame(&x, &x);
        let ecdfs = RadialEcdfs::fit(&frame, &x.view(), &x.view()).unwrap();
        let init = global_init(&x.view(), &frame, &ecdfs).unwrap();
        let p = to_polar_batch(&frame, &x.view());
        for (a, b) in init.rho0.iter().zip(p.rho.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
        let proj_u = init.v0.dot(&frame.q_u);
        assert!(proj_u.iter().all(|v| v.abs() < 1e-8));
        let net = RefineNet::zero(frame.m(), frame.d);
        let r = refine(&init, &net, &frame, &Bounds::default());
        assert_eq!(r.theta, init.theta0);
        assert_eq!(r.rho, init.rho0);
        assert_eq!(r.v, init.v0);
        let e = reconstruct(&r, &frame).unwrap();
        for (a, b) in e.iter().zip(x.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
        for row in e.axis_iter(Axis(0)) {
            assert!((row.dot(&row).sqrt() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn radial_scale_transfers() {
        let mut rng = stream(3, 0);
        let base = Array2::from_shape_fn((1000, 8), |_| rng.sample::<f64, _>(StandardNormal));
        let frame = small_frame(&normalize_rows(&base).unwrap(), &normalize_rows(&base).unwrap());
        let y = base.clone();
        let x = &base * 2.0;
        let mut f = frame.clone();
        f.mu_i.fill(0.0);
        f.mu_t.fill(0.0);
        let ecdfs = RadialEcdfs::fit(&f, &x.view(), &y.view()).unwrap();
        let init = global_init(&y.view(), &f, &ecdfs).unwrap();
        let p = to_polar_batch(&f, &y.view());
        for (a, b) in init.rho0.iter().zip(p.rho.iter()) {
            assert!((a - 2.0 * b).abs() < 1e-6 * (1.0 + b));
        }
        let bad = RadialEcdfs {
            text: ecdfs.text[..1].to_vec(),
            image: ecdfs.image[..1].to_vec(),
        };
        assert!(matches!(global_init(&y.view(), &f, &bad), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn bounds_hold_for_arbitrary_net() {
        let x = corpus(300, 10, 4, 0.5);
        let y = corpus(300, 10, 5, 0.6);
        let frame = small_frame(&x, &y);
        let ecdfs = RadialEcdfs::fit(&frame, &x.view(), &y.view()).unwrap();
        let init = global_init(&y.view(), &frame, &ecdfs).unwrap();
        let mut net = RefineNet::new(frame.m(), frame.d, 16, &mut stream(6, 0));
        for l in &mut net.mlp.layers {
            l.w.mapv_inplace(|_| 3.0);
            l.b.fill(1.0);
        }
        let mut rng = stream(7, 0);
        for l in &mut net.mlp.layers {
            l.w.mapv_inplace(|_| 4.0 * (rng.random::<f64>() - 0.5));
        }
        let b = Bounds::default();
        let r = refine(&init, &net, &frame, &b);
        let rep = certify_bounds(&init, &r, &frame, &b);
        assert!(rep.all_ok(), "{rep:?}");
        assert!(rep.max_theta_step > 0.1);
        assert!(r.v.dot(&frame.q_u).iter().all(|v| v.abs() < 1e-8));
        let z0 = assemble(&init.rho0.view(), &init.theta0.view(), &init.v0.view(), &frame);
        let z = assemble(&r.rho.view(), &r.theta.view(), &r.v.view(), &frame);
        let pairs: Vec<(usize, usize)> = (0..299).map(|i| (i, i + 1)).collect();
        let sim = similarity_check(&z0.view(), &z.view(), &pairs);
        assert_eq!(sim.violations, 0);
    }

    #[test]
    fn deformation_loss_closed_forms() {
        let graph = DependencyGraph {
            edges: vec![Edge {
                k: 0,
                l: 1,
                coupling: 1.0,
                offset: 0.0,
            }],
        };
        let theta0 = ndarray::array![[0.3, -1.0]];
        let rho0 = ndarray::array![[0.5, 0.8]];
        let l = phase_deformation_loss(&theta0.view(), &theta0.view(), &rho0.view(), &graph, 1e-12).unwrap();
        assert_eq!(l, 0.0);
        let rot = theta0.mapv(|t| wrap(t + 1.1));
        let l = phase_deformation_loss(&rot.view(), &theta0.view(), &rho0.view(), &graph, 1e-12).unwrap();
        assert!(l.abs() < 1e-12);
        let def = ndarray::array![[0.3 + 0.4, -1.0]];
        let l = phase_deformation_loss(&def.view(), &theta0.view(), &rho0.view(), &graph, 1e-12).unwrap();
        let w = 0.4 / (0.4 + 1e-12);
        assert_relative_eq!(l, w * (1.0 - 0.4f64.cos()), epsilon = 1e-12);
        let empty = DependencyGraph::default();
        assert!(matches!(
            phase_deformation_loss(&def.view(), &theta0.view(), &rho0.view(), &empty, 1e-12),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let x = corpus(400, 10, 8, 0.5);
        let frame = small_frame(&x, &x);
        let prior = small_prior(&frame, &x);
        let p = to_polar_batch(&frame, &x.slice(s![..5, ..]));
        let mut rng = stream(9, 0);
        let (t, eps) = draw_noise(5, frame.m(), &prior, &mut rng);
        let theta = p.theta.mapv(|v| wrap(v + 0.2));
        let (_, dth, dlr) = prior_matching_loss_grads(&theta.view(), &p.rho.view(), &prior, &t.view(), &eps.view());
        let h = 1e-6;
        for (i, k) in [(0, 0), (3, 1)] {
            let mut tp = theta.clone();
            tp[[i, k]] += h;
            let mut tm = theta.clone();
            tm[[i, k]] -= h;
            let fd = (prior_matching_loss(&tp.view(), &p.rho.view(), &prior, &t.view(), &eps.view())
                - prior_matching_loss(&tm.view(), &p.rho.view(), &prior, &t.view(), &eps.view()))
                / (2.0 * h);
            assert_relative_eq!(dth[[i, k]], fd, epsilon = 1e-6, max_relative = 1e-4);
            let mut rp = p.rho.clone();
            rp[[i, k]] *= h.exp();
            let mut rm = p.rho.clone();
            rm[[i, k]] *= (-h).exp();
            let fd = (prior_matching_loss(&theta.view(), &rp.view(), &prior, &t.view(), &eps.view())
                - prior_matching_loss(&theta.view(), &rm.view(), &prior, &t.view(), &eps.view()))
                / (2.0 * h);
            assert_relative_eq!(dlr[[i, k]], fd, epsilon = 1e-6, max_relative = 1e-4);
        }
        let (_, g) = phase_deformation_loss_grads(&theta.view(), &p.theta.view(), &p.rho.view(), &prior.field.graph, 1e-12).unwrap();
        let mut tp = theta.clone();
        tp[[2, 0]] += h;
        let mut tm = theta.clone();
        tm[[2, 0]] -= h;
        let f = |t: &Array2<f64>| phase_deformation_loss(&t.view(), &p.theta.view(), &p.rho.view(), &prior.field.graph, 1e-12).unwrap();
        assert_relative_eq!(g[[2, 0]], (f(&tp) - f(&tm)) / (2.0 * h), epsilon = 1e-8);
    }

    #[test]
    fn calibration_restores_target_mean() {
        let e = corpus(200, 6, 10, 0.4);
        let mu = column_means_sorted(&e.view());
        let same = centroid_calibrate(&e.view(), &mu.view()).unwrap();
        for (a, b) in same.iter().zip(e.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        let target = Array1::from(vec![0.1, 0.2, 0.0, 0.0, -0.1, 0.0]);
        let shifted = &e - &mu.view().insert_axis(Axis(0)) + &target.view().insert_axis(Axis(0));
        let pre_mean = column_means_sorted(&shifted.view());
        for (a, b) in pre_mean.iter().zip(target.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(centroid_calibrate(&e.slice(s![..0, ..]), &mu.view()).is_err());
    }

    #[test]
    fn training_reduces_prior_loss_and_is_order_free() {
        let x = corpus(600, 10, 11, 0.5);
        let y = corpus(600, 10, 12, 0.7);
        let frame = small_frame(&x, &y);
        let prior = small_prior(&frame, &x);
        let cfg = AlignConfig {
            steps: 150,
            batch: 64,
            hidden: Some(32),
            lr: 3e-3,
            ..AlignConfig::default()
        };
        let a = Aligner::fit(&x.view(), &y.view(), &frame, &prior, &cfg).unwrap();
        assert!(a.report.final_val_prior_loss < a.report.initial_val_prior_loss, "{:?}", a.report);
        let mut idx: Vec<usize> = (0..600).collect();
        idx.reverse();
        let y_perm = y.select(Axis(0), &idx);
        let b = Aligner::fit(&x.view(), &y_perm.view(), &frame, &prior, &cfg).unwrap();
        assert_eq!(a, b);

        let z = align_corpus(&y.view(), &a).unwrap();
        let zp = align_corpus(&y_perm.view(), &a).unwrap();
        assert_eq!(zp, z.select(Axis(0), &idx));
        assert!(align_corpus(&y.slice(s![..0, ..]), &a).is_err());

        let dir = tempfile::tempdir().unwrap();
        a.save(dir.path()).unwrap();
        let back = Aligner::load(dir.path(), &frame).unwrap();
        assert_eq!(back, a);
    }

    #[test]
    fn large_beta_freezes_relative_phases() {
        let x = corpus(600, 10, 13, 0.5);
        let y = corpus(600, 10, 14, 0.7);
        let frame = small_frame(&x, &y);
        let prior = small_prior(&frame, &x);
        let cfg = AlignConfig {
            steps: 150,
            batch: 64,
            hidden: Some(32),
            beta: 1e4,
            ..AlignConfig::default()
        };
        let a = Aligner::fit(&x.view(), &y.view(), &frame, &prior, &cfg).unwrap();
        let init = global_init(&y.view(), &frame, &a.ecdfs).unwrap();
        let r = refine(&init, &a.net, &frame, &cfg.bounds);
        let mut total = 0.0;
        let mut count = 0.0;
        for i in 0..600 {
            for e in &prior.field.graph.edges {
                let d = (r.theta[[i, e.k]] - r.theta[[i, e.l]]) - (init.theta0[[i, e.k]] - init.theta0[[i, e.l]]);
                total += wrap(d).abs();
                count += 1.0;
            }
        }
        assert!(total / count < 0.01);
    }
}
