//! Target-modality phase prior: circular statistics, the sparse dependency
//! graph, the periodic drift field and a denoising score network trained
//! against wrapped-Gaussian targets.

use std::f64::consts::{PI, TAU};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::artifact::SectionFile;
use crate::error::{Error, Result};
use crate::frame::{canonical_rows, dominant_coords, Frame, MixingRotation};
use crate::nn::{Adam, AdamVec, Dense, Mlp, MlpShape};
use crate::numerics::wrap;
use crate::rng::stream;
use crate::store::write_bytes;

const ALPHA_EPS: f64 = 1e-12;
const T_FREQS: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CircularStats {
    pub psi_bar: Vec<f64>,
    pub anchor_mag: Vec<f64>,
    pub alpha_w: Vec<f64>,
    pub m_re: Array2<f64>,
    pub m_im: Array2<f64>,
}

impl CircularStats {
    pub fn m(&self) -> usize {
        self.psi_bar.len()
    }

    pub fn coupling(&self, k: usize, l: usize) -> f64 {
        self.m_re[[k, l]].hypot(self.m_im[[k, l]])
    }

    pub fn offset(&self, k: usize, l: usize) -> f64 {
        self.m_im[[k, l]].atan2(self.m_re[[k, l]])
    }
}

/// Anchors, block weights and pairwise circular correlations of a phase
/// corpus (rows are samples, columns blocks).
pub fn circular_stats(theta: &ArrayView2<f64>, rho: &ArrayView2<f64>) -> Result<CircularStats> {
    let (n, m) = theta.dim();
    if n < 2 {
        return Err(Error::insufficient(2, n));
    }
    if rho.dim() != (n, m) {
        return Err(Error::InvalidInput("theta and rho shapes differ".into()));
    }
    let cos = theta.mapv(f64::cos);
    let sin = theta.mapv(f64::sin);
    let nf = n as f64;
    let mut psi_bar = Vec::with_capacity(m);
    let mut anchor_mag = Vec::with_capacity(m);
    for k in 0..m {
        let c = cos.column(k).sum() / nf;
        let s = sin.column(k).sum() / nf;
        psi_bar.push(wrap(s.atan2(c)));
        anchor_mag.push(c.hypot(s));
    }
    let energy: Vec<f64> = (0..m).map(|k| rho.column(k).mapv(|r| r * r).sum() / nf).collect();
    let total: f64 = energy.iter().sum::<f64>() + ALPHA_EPS;
    let alpha_w = energy.iter().map(|e| e / total).collect();

    let cc = cos.t().dot(&cos);
    let ss = sin.t().dot(&sin);
    let sc = sin.t().dot(&cos);
    let mut m_re = Array2::zeros((m, m));
    let mut m_im = Array2::zeros((m, m));
    for k in 0..m {
        for l in 0..m {
            let re = 0.5 * (cc[[k, l]] + ss[[k, l]] + cc[[l, k]] + ss[[l, k]]) / nf;
            let im = (sc[[k, l]] - sc[[l, k]]) / nf;
            m_re[[k, l]] = re;
            m_im[[k, l]] = im;
        }
        m_re[[k, k]] = 1.0;
        m_im[[k, k]] = 0.0;
    }
    Ok(CircularStats {
        psi_bar,
        anchor_mag,
        alpha_w,
        m_re,
        m_im,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub k: usize,
    pub l: usize,
    pub coupling: f64,
    pub offset: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DependencyGraph {
    /// Sorted by (k, l) with k < l.
    pub edges: Vec<Edge>,
}

impl DependencyGraph {
    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    pub fn contains(&self, k: usize, l: usize) -> bool {
        let (a, b) = (k.min(l), k.max(l));
        self.edges.iter().any(|e| e.k == a && e.l == b)
    }
}

/// Union of every block's top-`p` partners by `|M_kl|` (ties to the
/// smaller index). `p = 0` keeps only the anchor terms.
pub fn build_graph(stats: &CircularStats, p: usize) -> Result<DependencyGraph> {
    let m = stats.m();
    if p > m.saturating_sub(1) {
        return Err(Error::InvalidInput(format!("top-p {p} exceeds m-1 = {}", m.saturating_sub(1))));
    }
    let mut pairs = std::collections::BTreeSet::new();
    for k in 0..m {
        let mut others: Vec<usize> = (0..m).filter(|&l| l != k).collect();
        others.sort_by(|&a, &b| {
            stats
                .coupling(k, b)
                .total_cmp(&stats.coupling(k, a))
                .then(a.cmp(&b))
        });
        for &l in others.iter().take(p) {
            pairs.insert((k.min(l), k.max(l)));
        }
    }
    let edges = pairs
        .into_iter()
        .map(|(k, l)| Edge {
            k,
            l,
            coupling: stats.coupling(k, l),
            offset: stats.offset(k, l),
        })
        .collect();
    Ok(DependencyGraph { edges })
}

/// Periodic potential built from anchors and graph couplings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseField {
    pub alpha: Vec<f64>,
    pub psi_bar: Vec<f64>,
    pub graph: DependencyGraph,
}

impl PhaseField {
    pub fn new(stats: &CircularStats, graph: DependencyGraph) -> Self {
        Self {
            alpha: stats.alpha_w.clone(),
            psi_bar: stats.psi_bar.clone(),
            graph,
        }
    }

    pub fn m(&self) -> usize {
        self.alpha.len()
    }

    pub fn potential(&self, phi: &[f64]) -> f64 {
        let mut u = 0.0;
        for k in 0..self.m() {
            u += self.alpha[k] * (1.0 - (phi[k] - self.psi_bar[k]).cos());
        }
        for e in &self.graph.edges {
            u += e.coupling * (1.0 - (phi[e.k] - phi[e.l] - e.offset).cos());
        }
        u
    }

    pub fn drift(&self, phi: &[f64]) -> Vec<f64> {
        let mut g: Vec<f64> = (0..self.m())
            .map(|k| self.alpha[k] * (phi[k] - self.psi_bar[k]).sin())
            .collect();
        for e in &self.graph.edges {
            let v = e.coupling * (phi[e.k] - phi[e.l] - e.offset).sin();
            g[e.k] += v;
            g[e.l] -= v;
        }
        g
    }

    /// Hessian of the potential applied to `v`.
    pub fn hess_vec(&self, phi: &[f64], v: &[f64]) -> Vec<f64> {
        let mut out: Vec<f64> = (0..self.m())
            .map(|k| self.alpha[k] * (phi[k] - self.psi_bar[k]).cos() * v[k])
            .collect();
        for e in &self.graph.edges {
            let c = e.coupling * (phi[e.k] - phi[e.l] - e.offset).cos();
            let dv = c * (v[e.k] - v[e.l]);
            out[e.k] += dv;
            out[e.l] -= dv;
        }
        out
    }

    /// Drifted center `wrap(φ − τ∇Ψ(φ))`.
    pub fn center(&self, phi: &[f64], tau: f64) -> Vec<f64> {
        let g = self.drift(phi);
        phi.iter().zip(&g).map(|(p, g)| wrap(p - tau * g)).collect()
    }
}

pub fn drift(phi: &[f64], stats: &CircularStats, graph: &DependencyGraph) -> Vec<f64> {
    PhaseField::new(stats, graph.clone()).drift(phi)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSchedule {
    pub sigma_min: f64,
    pub sigma_max: f64,
    /// `None` draws t continuously; `Some(L)` snaps it to L levels.
    #[serde(default)]
    pub num_levels: Option<usize>,
    pub tau: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self {
            sigma_min: 0.05,
            sigma_max: 1.5,
            num_levels: None,
            tau: 0.1,
        }
    }
}

impl NoiseSchedule {
    pub fn validate(&self) -> Result<()> {
        let ok = self.sigma_min > 0.0
            && self.sigma_min <= self.sigma_max
            && self.tau > 0.0
            && self.sigma_max.is_finite()
            && self.num_levels.is_none_or(|l| l >= 2);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid noise schedule {self:?}")))
        }
    }

    pub fn sigma(&self, t: f64) -> f64 {
        self.sigma_min * (self.sigma_max / self.sigma_min).powf(t)
    }

    pub fn mid_sigma(&self) -> f64 {
        self.sigma(0.5)
    }

    pub fn sample_t<R: Rng>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.random();
        match self.num_levels {
            None => u,
            Some(l) => ((u * l as f64).floor().min((l - 1) as f64)) / (l - 1) as f64,
        }
    }
}

/// Number of images per side so the dropped tail of the wrapped sum is
/// below 1e-12 of the retained mass.
pub fn truncation_terms(sigma: f64) -> usize {
    let need = (8.0 * 2f64.sqrt() * sigma + PI) / TAU;
    (need.ceil() as usize).max(3)
}

fn wrapped_score_1d(x: f64, sigma: f64, j: usize) -> f64 {
    let x = wrap(x);
    let s2 = 2.0 * sigma * sigma;
    let l0 = -x * x / (2.0 * s2);
    let (mut num, mut den) = (0.0, 0.0);
    let j = j as i64;
    for i in -j..=j {
        let y = x + TAU * i as f64;
        let w = (-y * y / (2.0 * s2) - l0).exp();
        num -= w * y / s2;
        den += w;
    }
    num / den
}

/// Log-density of the wrapped normal with variance `2σ²` at offset `x`.
pub fn wrapped_gaussian_log_density(x: f64, sigma: f64, j: usize) -> f64 {
    let x = wrap(x);
    let s2 = 2.0 * sigma * sigma;
    let l0 = -x * x / (2.0 * s2);
    let j = j as i64;
    let sum: f64 = (-j..=j)
        .map(|i| {
            let y = x + TAU * i as f64;
            (-y * y / (2.0 * s2) - l0).exp()
        })
        .sum();
    l0 + sum.ln() - 0.5 * (TAU * s2).ln()
}

/// `∂/∂φ̃ log q(φ̃ | μ, σ)` per coordinate. `j = None` picks the
/// truncation automatically.
pub fn wrapped_gaussian_score(
    phi_tilde: &[f64],
    mu: &[f64],
    sigma: f64,
    j: Option<usize>,
) -> Result<Vec<f64>> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidInput(format!("sigma must be positive, got {sigma}")));
    }
    if phi_tilde.len() != mu.len() {
        return Err(Error::InvalidInput("phase vectors differ in length".into()));
    }
    let j = j.unwrap_or_else(|| truncation_terms(sigma));
    if j == 0 {
        return Err(Error::InvalidInput("truncation must be at least 1".into()));
    }
    Ok(phi_tilde
        .iter()
        .zip(mu)
        .map(|(p, m)| wrapped_score_1d(p - m, sigma, j))
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub phi_tilde: Vec<f64>,
    pub mu: Vec<f64>,
    pub sigma: f64,
    pub t: f64,
}

pub fn make_training_pair<R: Rng>(
    phi: &[f64],
    field: &PhaseField,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> TrainingPair {
    let t = schedule.sample_t(rng);
    let sigma = schedule.sigma(t);
    let mu = field.center(phi, schedule.tau);
    let phi_tilde = mu
        .iter()
        .map(|m| {
            let e: f64 = rng.sample(StandardNormal);
            wrap(m + 2f64.sqrt() * sigma * e)
        })
        .collect();
    TrainingPair { phi_tilde, mu, sigma, t }
}

/// One minibatch of denoising targets. Row `i` holds sample `i`.
#[derive(Debug, Clone)]
pub struct ScoreBatch {
    pub theta: Array2<f64>,
    pub theta_tilde: Array2<f64>,
    pub log_rho: Array2<f64>,
    pub t: Array1<f64>,
    pub sigma: Array1<f64>,
    pub target: Array2<f64>,
}

impl ScoreBatch {
    /// Batch for given clean phases, times and standard-normal draws.
    pub fn with_noise(
        theta: &ArrayView2<f64>,
        log_rho: &ArrayView2<f64>,
        field: &PhaseField,
        schedule: &NoiseSchedule,
        t: Array1<f64>,
        eps: &ArrayView2<f64>,
    ) -> Self {
        let (n, m) = theta.dim();
        let sigma = t.mapv(|t| schedule.sigma(t));
        let mut theta_tilde = Array2::zeros((n, m));
        let mut target = Array2::zeros((n, m));
        for i in 0..n {
            let phi = theta.row(i).to_vec();
            let mu = field.center(&phi, schedule.tau);
            let j = truncation_terms(sigma[i]);
            for k in 0..m {
                let pt = wrap(mu[k] + 2f64.sqrt() * sigma[i] * eps[[i, k]]);
                theta_tilde[[i, k]] = pt;
                target[[i, k]] = wrapped_score_1d(pt - mu[k], sigma[i], j);
            }
        }
        Self {
            theta: theta.to_owned(),
            theta_tilde,
            log_rho: log_rho.to_owned(),
            t,
            sigma,
            target,
        }
    }

    pub fn sample<R: Rng>(
        theta: &ArrayView2<f64>,
        log_rho: &ArrayView2<f64>,
        field: &PhaseField,
        schedule: &NoiseSchedule,
        rng: &mut R,
    ) -> Self {
        let (n, m) = theta.dim();
        let t = Array1::from_shape_fn(n, |_| schedule.sample_t(rng));
        let eps = Array2::from_shape_fn((n, m), |_| rng.sample::<f64, _>(StandardNormal));
        Self::with_noise(theta, log_rho, field, schedule, t, &eps.view())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MixingMode {
    FixedIdentity,
    Learned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorConfig {
    pub top_p: usize,
    pub schedule: NoiseSchedule,
    /// Hidden width; `None` means 4m.
    pub hidden: Option<usize>,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub mixing: MixingMode,
    pub validation_size: usize,
    pub seed: u64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            top_p: 3,
            schedule: NoiseSchedule::default(),
            hidden: None,
            steps: 20_000,
            batch: 256,
            lr: 1e-3,
            mixing: MixingMode::Learned,
            validation_size: 1024,
            seed: 0,
        }
    }
}

/// Score network `s_φ(φ̃, t, log ρ)`. The MLP output is the score scaled
/// by `√2σ_t`, so the `2σ_t²`-weighted loss is a plain squared error.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreNet {
    pub m: usize,
    pub schedule: NoiseSchedule,
    pub mlp: Mlp,
}

pub fn time_embedding(t: f64) -> [f64; 2 * T_FREQS] {
    let mut out = [0.0; 2 * T_FREQS];
    for j in 0..T_FREQS {
        let w = 0.5 * PI * 2f64.powf(j as f64 / 2.0);
        out[2 * j] = (w * t).sin();
        out[2 * j + 1] = (w * t).cos();
    }
    out
}

/// Gradients of the score-matching loss with respect to the inputs.
pub struct InputGrads {
    pub theta_tilde: Array2<f64>,
    pub log_rho: Array2<f64>,
}

impl ScoreNet {
    pub fn new<R: Rng>(m: usize, hidden: usize, schedule: NoiseSchedule, rng: &mut R) -> Self {
        let input = 3 * m + 2 * T_FREQS;
        Self {
            m,
            schedule,
            mlp: Mlp::new(&[input, hidden, hidden, m], rng, false),
        }
    }

    pub fn input_width(m: usize) -> usize {
        3 * m + 2 * T_FREQS
    }

    fn features(&self, theta_tilde: &ArrayView2<f64>, t: &ArrayView1<f64>, log_rho: &ArrayView2<f64>) -> Array2<f64> {
        let (n, m) = theta_tilde.dim();
        let mut f = Array2::zeros((n, Self::input_width(m)));
        for i in 0..n {
            let mut row = f.row_mut(i);
            for k in 0..m {
                row[k] = theta_tilde[[i, k]].sin();
                row[m + k] = theta_tilde[[i, k]].cos();
                row[2 * m + 2 * T_FREQS + k] = log_rho[[i, k]];
            }
            let e = time_embedding(t[i]);
            for (j, v) in e.iter().enumerate() {
                row[2 * m + j] = *v;
            }
        }
        f
    }

    pub fn score(&self, theta_tilde: &ArrayView2<f64>, t: &ArrayView1<f64>, log_rho: &ArrayView2<f64>) -> Array2<f64> {
        let mut out = self.mlp.predict(&self.features(theta_tilde, t, log_rho));
        for (i, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
            let scale = 1.0 / (2f64.sqrt() * self.schedule.sigma(t[i]));
            row.mapv_inplace(|v| v * scale);
        }
        out
    }

    fn residual(&self, out: &Array2<f64>, batch: &ScoreBatch) -> Array2<f64> {
        let mut res = out.clone();
        for i in 0..res.nrows() {
            let c = 2f64.sqrt() * batch.sigma[i];
            for k in 0..self.m {
                res[[i, k]] -= c * batch.target[[i, k]];
            }
        }
        res
    }

    /// Mean over the batch of `2σ_t² ‖s_φ − target‖²`.
    pub fn loss(&self, batch: &ScoreBatch) -> f64 {
        let f = self.features(&batch.theta_tilde.view(), &batch.t.view(), &batch.log_rho.view());
        let res = self.residual(&self.mlp.predict(&f), batch);
        res.mapv(|v| v * v).sum() / batch.t.len() as f64
    }

    /// Loss with parameter and input gradients.
    pub fn loss_grads(&self, batch: &ScoreBatch) -> (f64, Vec<Dense>, InputGrads) {
        let f = self.features(&batch.theta_tilde.view(), &batch.t.view(), &batch.log_rho.view());
        let (out, cache) = self.mlp.forward(&f);
        let res = self.residual(&out, batch);
        let n = batch.t.len() as f64;
        let loss = res.mapv(|v| v * v).sum() / n;
        let dout = res.mapv(|v| 2.0 * v / n);
        let (grads, df) = self.mlp.backward(&cache, &dout);
        let m = self.m;
        let rows = batch.t.len();
        let mut d_theta = Array2::zeros((rows, m));
        let mut d_log_rho = Array2::zeros((rows, m));
        for i in 0..rows {
            for k in 0..m {
                let th = batch.theta_tilde[[i, k]];
                d_theta[[i, k]] = df[[i, k]] * th.cos() - df[[i, m + k]] * th.sin();
                d_log_rho[[i, k]] = df[[i, 2 * m + 2 * T_FREQS + k]];
            }
        }
        (
            loss,
            grads,
            InputGrads {
                theta_tilde: d_theta,
                log_rho: d_log_rho,
            },
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub initial_val_loss: f64,
    pub final_val_loss: f64,
    pub steps: usize,
    pub epochs: usize,
    /// Mean training loss over each block of 1000 steps.
    pub loss_trace: Vec<f64>,
}

/// Frozen Stage-I artifact.
#[derive(Debug, Clone, PartialEq)]
pub struct PhasePrior {
    pub stats: CircularStats,
    pub field: PhaseField,
    pub net: ScoreNet,
    pub rotation: MixingRotation,
    pub config: PriorConfig,
    pub report: TrainReport,
}

#[derive(Serialize, Deserialize)]
struct PriorHeader {
    m: usize,
    config: PriorConfig,
    schedule: NoiseSchedule,
    stats: CircularStats,
    field: PhaseField,
    rotation: MixingRotation,
    net: MlpShape,
    report: TrainReport,
}

impl PhasePrior {
    pub fn m(&self) -> usize {
        self.net.m
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.net.schedule
    }

    /// Writes `prior.json` (architecture, schedule, statistics, graph) and
    /// `prior.bin` (f32 weights).
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let header = PriorHeader {
            m: self.m(),
            config: self.config.clone(),
            schedule: self.net.schedule,
            stats: self.stats.clone(),
            field: self.field.clone(),
            rotation: self.rotation.clone(),
            net: self.net.mlp.shape(),
            report: self.report.clone(),
        };
        let json = serde_json::to_vec_pretty(&header)?;
        write_bytes(&dir.join("prior.json"), &json)?;
        let mut f = SectionFile::new();
        self.net.mlp.write_sections("score", &mut f);
        f.save(&dir.join("prior.bin"))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("prior.json");
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let h: PriorHeader = serde_json::from_slice(&bytes)
            .map_err(|e| Error::format(path.display().to_string(), e.to_string()))?;
        let f = SectionFile::load(&dir.join("prior.bin"))?;
        let mlp = Mlp::read_sections("score", &h.net, &f)?;
        if mlp.input_dim() != ScoreNet::input_width(h.m) || mlp.output_dim() != h.m {
            return Err(Error::format(path.display().to_string(), "score net shape does not match m"));
        }
        Ok(Self {
            stats: h.stats,
            field: h.field,
            net: ScoreNet {
                m: h.m,
                schedule: h.schedule,
                mlp,
            },
            rotation: h.rotation,
            config: h.config,
            report: h.report,
        })
    }
}

fn polar_from_coords(c: &Array2<f64>, eps: f64) -> (Array2<f64>, Array2<f64>) {
    let (n, r) = c.dim();
    let m = r / 2;
    let mut theta = Array2::zeros((n, m));
    let mut rho = Array2::zeros((n, m));
    for i in 0..n {
        for k in 0..m {
            let (a, b) = (c[[i, 2 * k]], c[[i, 2 * k + 1]]);
            rho[[i, k]] = (a * a + b * b + eps).sqrt();
            theta[[i, k]] = wrap(b.atan2(a));
        }
    }
    (theta, rho)
}

/// Trains the score prior on the image embeddings `x` under `frame`.
/// Returns the prior and the (possibly re-mixed) frame.
pub fn train_prior(x: &ArrayView2<f64>, frame: &Frame, cfg: &PriorConfig) -> Result<(PhasePrior, Frame)> {
    let u = dominant_coords(frame, &canonical_rows(x).view());
    match cfg.mixing {
        MixingMode::FixedIdentity => {
            let (theta, rho) = polar_from_coords(&u, frame.eps_polar);
            let prior = train_on_phases(&theta.view(), &rho.view(), cfg)?;
            Ok((prior, frame.clone()))
        }
        MixingMode::Learned => {
            let prior = train_learned(&u, frame.eps_polar, cfg)?;
            let mixed = frame.mix(&prior.rotation)?;
            Ok((prior, mixed))
        }
    }
}

fn check_corpus(n: usize, m: usize, cfg: &PriorConfig) -> Result<usize> {
    cfg.schedule.validate()?;
    if n < 2 {
        return Err(Error::insufficient(2, n));
    }
    if m == 0 || cfg.batch == 0 || cfg.steps == 0 || !(cfg.lr > 0.0) {
        return Err(Error::InvalidConfig("prior training needs m, batch, steps and lr positive".into()));
    }
    Ok(cfg.hidden.unwrap_or(4 * m))
}

struct Trainer {
    net: ScoreNet,
    opt: Adam,
    rng: crate::rng::StreamRng,
    trace: Vec<f64>,
    block_sum: f64,
    block_len: usize,
}

impl Trainer {
    fn new(m: usize, hidden: usize, cfg: &PriorConfig) -> Self {
        let net = ScoreNet::new(m, hidden, cfg.schedule, &mut stream(cfg.seed, 0));
        let opt = Adam::new(&net.mlp, cfg.lr);
        Self {
            net,
            opt,
            rng: stream(cfg.seed, 1),
            trace: Vec::new(),
            block_sum: 0.0,
            block_len: 0,
        }
    }

    fn record(&mut self, step: usize, loss: f64) -> Result<()> {
        if !loss.is_finite() {
            return Err(Error::TrainingDiverged { step, loss });
        }
        self.block_sum += loss;
        self.block_len += 1;
        if self.block_len == 1000 {
            self.trace.push(self.block_sum / 1000.0);
            self.block_sum = 0.0;
            self.block_len = 0;
        }
        Ok(())
    }

    fn finish(&mut self) {
        if self.block_len > 0 {
            self.trace.push(self.block_sum / self.block_len as f64);
        }
    }
}

/// Fixed validation batch drawn from its own stream.
fn validation_batch(theta: &ArrayView2<f64>, rho: &ArrayView2<f64>, field: &PhaseField, cfg: &PriorConfig) -> ScoreBatch {
    let n = theta.nrows();
    let mut rng = stream(cfg.seed, 2);
    let size = cfg.validation_size.clamp(1, n);
    let idx: Vec<usize> = rand::seq::index::sample(&mut rng, n, size).into_vec();
    let th = theta.select(Axis(0), &idx);
    let lr = rho.select(Axis(0), &idx).mapv(f64::ln);
    ScoreBatch::sample(&th.view(), &lr.view(), field, &cfg.schedule, &mut rng)
}

/// Trains on fixed phases (no mixing). Rows are samples.
pub fn train_on_phases(theta: &ArrayView2<f64>, rho: &ArrayView2<f64>, cfg: &PriorConfig) -> Result<PhasePrior> {
    let (n, m) = theta.dim();
    let hidden = check_corpus(n, m, cfg)?;
    let stats = circular_stats(theta, rho)?;
    let graph = build_graph(&stats, cfg.top_p)?;
    let field = PhaseField::new(&stats, graph);
    let log_rho = rho.mapv(f64::ln);
    let val = validation_batch(theta, rho, &field, cfg);

    let mut tr = Trainer::new(m, hidden, cfg);
    let initial_val_loss = tr.net.loss(&val);
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n;
    let mut epochs = 0;
    for step in 0..cfg.steps {
        if cursor + cfg.batch > n {
            order.shuffle(&mut tr.rng);
            cursor = 0;
            epochs += 1;
        }
        let idx = &order[cursor..(cursor + cfg.batch).min(n)];
        cursor += cfg.batch;
        let th = theta.select(Axis(0), idx);
        let lr = log_rho.select(Axis(0), idx);
        let batch = ScoreBatch::sample(&th.view(), &lr.view(), &field, &cfg.schedule, &mut tr.rng);
        let (loss, grads, _) = tr.net.loss_grads(&batch);
        tr.record(step, loss)?;
        tr.opt.step(&mut tr.net.mlp, &grads);
    }
    tr.finish();
    tr.net.mlp.freeze();
    let final_val_loss = tr.net.loss(&val);
    Ok(PhasePrior {
        stats,
        field,
        rotation: MixingRotation::identity(2 * m),
        config: cfg.clone(),
        report: TrainReport {
            initial_val_loss,
            final_val_loss,
            steps: cfg.steps,
            epochs,
            loss_trace: tr.trace.clone(),
        },
        net: tr.net,
    })
}

/// Joint training of the score net and the mixing rotation. Statistics
/// and graph are recomputed at each epoch start under the current
/// rotation; the rotation moves at a tenth of the network step size.
fn train_learned(u: &Array2<f64>, eps: f64, cfg: &PriorConfig) -> Result<PhasePrior> {
    let (n, r) = u.dim();
    let m = r / 2;
    let hidden = check_corpus(n, m, cfg)?;
    let mut rotation = MixingRotation::identity(r);
    let mut rot_opt = AdamVec::new(rotation.skew_params.len(), cfg.lr / 10.0);
    let mut tr = Trainer::new(m, hidden, cfg);

    let refresh = |rot: &MixingRotation| -> Result<(CircularStats, PhaseField, Array2<f64>, Array2<f64>)> {
        let (theta, rho) = polar_from_coords(&u.dot(&rot.matrix()?), eps);
        let stats = circular_stats(&theta.view(), &rho.view())?;
        let graph = build_graph(&stats, cfg.top_p)?;
        let field = PhaseField::new(&stats, graph);
        Ok((stats, field, theta, rho))
    };

    let initial_val_loss = {
        let (_, field, theta, rho) = refresh(&rotation)?;
        tr.net.loss(&validation_batch(&theta.view(), &rho.view(), &field, cfg))
    };

    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n;
    let mut epochs = 0;
    let mut field = PhaseField {
        alpha: Vec::new(),
        psi_bar: Vec::new(),
        graph: DependencyGraph::default(),
    };
    for step in 0..cfg.steps {
        if cursor + cfg.batch > n {
            order.shuffle(&mut tr.rng);
            cursor = 0;
            epochs += 1;
            field = refresh(&rotation)?.1;
        }
        let idx = &order[cursor..(cursor + cfg.batch).min(n)];
        cursor += cfg.batch;
        let ub = u.select(Axis(0), idx);
        let cb = ub.dot(&rotation.matrix()?);
        let (th, rho) = polar_from_coords(&cb, eps);
        let lr = rho.mapv(f64::ln);
        let batch = ScoreBatch::sample(&th.view(), &lr.view(), &field, &cfg.schedule, &mut tr.rng);
        let (loss, grads, ig) = tr.net.loss_grads(&batch);
        tr.record(step, loss)?;
        tr.opt.step(&mut tr.net.mlp, &grads);

        // Chain input gradients back to the block coordinates.
        let b = idx.len();
        let mut dc = Array2::zeros((b, r));
        for i in 0..b {
            let phi = th.row(i).to_vec();
            let g = ig.theta_tilde.row(i).to_vec();
            let hg = field.hess_vec(&phi, &g);
            for k in 0..m {
                let d_theta = g[k] - cfg.schedule.tau * hg[k];
                let d_logr = ig.log_rho[[i, k]];
                let (a, bb) = (cb[[i, 2 * k]], cb[[i, 2 * k + 1]]);
                let r2 = rho[[i, k]] * rho[[i, k]];
                dc[[i, 2 * k]] = (-bb * d_theta + a * d_logr) / r2;
                dc[[i, 2 * k + 1]] = (a * d_theta + bb * d_logr) / r2;
            }
        }
        let g_r = ub.t().dot(&dc);
        let pg = rotation.param_grad(&g_r)?;
        rot_opt.step(&mut rotation.skew_params, &pg);
        if rotation.skew_params.iter().any(|p| !p.is_finite()) {
            return Err(Error::TrainingDiverged { step, loss: f64::NAN });
        }
    }
    tr.finish();
    tr.net.mlp.freeze();
    let (stats, field, theta, rho) = refresh(&rotation)?;
    let val = validation_batch(&theta.view(), &rho.view(), &field, cfg);
    let final_val_loss = tr.net.loss(&val);
    Ok(PhasePrior {
        stats,
        field,
        rotation,
        config: cfg.clone(),
        report: TrainReport {
            initial_val_loss,
            final_val_loss,
            steps: cfg.steps,
            epochs,
            loss_trace: tr.trace.clone(),
        },
        net: tr.net,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::s;
    use proptest::{prop_assert, proptest};

    fn dense_log_q(x: f64, sigma: f64) -> f64 {
        let s2 = 2.0 * sigma * sigma;
        let sum: f64 = (-60i64..=60)
            .map(|j| {
                let y = x + TAU * j as f64;
                (-y * y / (2.0 * s2)).exp()
            })
            .sum();
        sum.ln()
    }

    #[test]
    fn score_matches_numeric_derivative() {
        let mut rng = stream(11, 0);
        for sigma in [0.05, 0.3, 1.0, 2.0] {
            let mut worst: f64 = 0.0;
            for _ in 0..100 {
                let mu = rng.random_range(-PI..PI);
                let off = 2f64.sqrt() * sigma * rng.sample::<f64, _>(StandardNormal);
                let pt = wrap(mu + off);
                let s = wrapped_gaussian_score(&[pt], &[mu], sigma, None).unwrap()[0];
                let h = 1e-6;
                let x = wrap(pt - mu);
                let fd = (dense_log_q(x + h, sigma) - dense_log_q(x - h, sigma)) / (2.0 * h);
                worst = worst.max((s - fd).abs());
            }
            assert!(worst < 1e-6, "sigma {sigma}: {worst}");
        }
    }

    #[test]
    fn gaussian_limit_near_mode() {
        let sigma = 0.05;
        for x in [-0.05, -0.01, 0.003, 0.02, 0.07] {
            let s = wrapped_gaussian_score(&[0.4 + x], &[0.4], sigma, None).unwrap()[0];
            let g = -x / (2.0 * sigma * sigma);
            assert!(((s - g) / g).abs() < 1e-6);
        }
    }

    #[test]
    fn wide_noise_flattens_score() {
        for x in [-3.0, -1.0, 0.5, 2.5] {
            let s = wrapped_gaussian_score(&[x], &[0.0], 20.0, None).unwrap()[0];
            assert!(s.abs() < 1e-10);
        }
        assert!(wrapped_gaussian_score(&[0.0], &[0.0], 0.0, None).is_err());
        assert!(wrapped_gaussian_score(&[0.0], &[0.0], 0.3, Some(0)).is_err());
    }

    #[test]
    fn truncation_tail_is_negligible() {
        for sigma in [0.05, 0.5, 2.0, 5.0, 20.0] {
            let j = truncation_terms(sigma);
            for x in [-PI, -1.0, 0.0, 2.0, 3.1] {
                let a = wrapped_gaussian_log_density(x, sigma, j);
                let b = wrapped_gaussian_log_density(x, sigma, j + 40);
                assert!((a - b).abs() < 1e-12, "sigma {sigma} x {x}");
            }
        }
    }

    #[test]
    fn score_has_zero_mean_under_its_density() {
        let mut rng = stream(12, 0);
        for sigma in [0.1, 0.8, 2.0] {
            let n = 20_000;
            let vals: Vec<f64> = (0..n)
                .map(|_| {
                    let pt = wrap(2f64.sqrt() * sigma * rng.sample::<f64, _>(StandardNormal));
                    wrapped_gaussian_score(&[pt], &[0.0], sigma, None).unwrap()[0]
                })
                .collect();
            let mean = vals.iter().sum::<f64>() / n as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            assert!(mean.abs() < 3.0 * (var / n as f64).sqrt());
        }
    }

    fn random_field(m: usize, seed: u64, p: usize) -> PhaseField {
        let mut rng = stream(seed, 0);
        let theta = Array2::from_shape_fn((200, m), |(_, k)| wrap(0.4 * k as f64 + rng.random::<f64>()));
        let rho = Array2::from_shape_fn((200, m), |_| 0.2 + rng.random::<f64>());
        let stats = circular_stats(&theta.view(), &rho.view()).unwrap();
        PhaseField::new(&stats, build_graph(&stats, p).unwrap())
    }

    #[test]
    fn drift_is_gradient_of_potential() {
        let field = random_field(6, 3, 2);
        let mut rng = stream(13, 0);
        let h = 1e-6;
        for _ in 0..50 {
            let phi: Vec<f64> = (0..6).map(|_| rng.random_range(-PI..PI)).collect();
            let g = field.drift(&phi);
            let fd: Vec<f64> = (0..6)
                .map(|k| {
                    let mut p = phi.clone();
                    p[k] += h;
                    let up = field.potential(&p);
                    p[k] -= 2.0 * h;
                    (up - field.potential(&p)) / (2.0 * h)
                })
                .collect();
            let err: f64 = g.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let norm: f64 = g.iter().map(|a| a * a).sum::<f64>().sqrt();
            assert!(err / norm < 1e-5);
        }
    }

    #[test]
    fn hessian_vector_matches_drift_differences() {
        let field = random_field(5, 4, 2);
        let phi = vec![0.3, -1.2, 2.0, 0.1, -2.9];
        let v = vec![0.5, -0.2, 0.1, 1.0, -0.7];
        let h = 1e-6;
        let plus: Vec<f64> = phi.iter().zip(&v).map(|(p, v)| p + h * v).collect();
        let minus: Vec<f64> = phi.iter().zip(&v).map(|(p, v)| p - h * v).collect();
        let (gp, gm) = (field.drift(&plus), field.drift(&minus));
        let hv = field.hess_vec(&phi, &v);
        for k in 0..5 {
            assert_relative_eq!(hv[k], (gp[k] - gm[k]) / (2.0 * h), epsilon = 1e-7);
        }
    }

    #[test]
    fn drift_vanishes_at_consistent_minimum() {
        let psi = [0.2, -1.0, 2.5];
        let field = PhaseField {
            alpha: vec![0.5, 0.3, 0.2],
            psi_bar: psi.to_vec(),
            graph: DependencyGraph {
                edges: vec![Edge {
                    k: 0,
                    l: 1,
                    coupling: 0.8,
                    offset: psi[0] - psi[1],
                }],
            },
        };
        assert!(field.drift(&psi).iter().all(|g| g.abs() < 1e-12));
        let single = PhaseField {
            alpha: vec![1.0, 0.0],
            psi_bar: vec![0.5, 0.0],
            graph: DependencyGraph::default(),
        };
        let g = single.drift(&[1.5, 2.0]);
        assert_relative_eq!(g[0], 1f64.sin());
        assert_eq!(g[1], 0.0);
    }

    #[test]
    fn locked_phases_have_unit_coupling() {
        let mut rng = stream(14, 0);
        let theta = Array2::from_shape_fn((500, 3), |(_, _)| 0.0)
            + &Array1::from_shape_fn(500, |_| rng.random_range(-PI..PI)).insert_axis(Axis(1));
        let theta = theta.mapv(wrap);
        let rho = Array2::from_elem((500, 3), 0.5);
        let st = circular_stats(&theta.view(), &rho.view()).unwrap();
        assert_relative_eq!(st.coupling(0, 2), 1.0, epsilon = 1e-12);
        assert!(st.offset(0, 2).abs() < 1e-9);
        for a in &st.alpha_w {
            assert_relative_eq!(*a, 1.0 / 3.0, epsilon = 1e-9);
        }
        assert!(circular_stats(&theta.slice(s![..1, ..]), &rho.slice(s![..1, ..])).is_err());
    }

    #[test]
    fn independent_uniform_phases_decorrelate() {
        let mut rng = stream(15, 0);
        let theta = Array2::from_shape_fn((10_000, 4), |_| rng.random_range(-PI..PI));
        let rho = Array2::from_elem((10_000, 4), 1.0);
        let st = circular_stats(&theta.view(), &rho.view()).unwrap();
        for k in 0..4 {
            assert_eq!(st.m_re[[k, k]], 1.0);
            for l in 0..4 {
                if k != l {
                    assert!(st.coupling(k, l) < 0.05);
                    assert_relative_eq!(st.m_re[[k, l]], st.m_re[[l, k]]);
                    assert_relative_eq!(st.m_im[[k, l]], -st.m_im[[l, k]]);
                }
            }
        }
    }

    #[test]
    fn graph_top_p_rules() {
        let field = random_field(3, 5, 2);
        assert_eq!(field.graph.len(), 3);
        let mut rng = stream(16, 0);
        let theta = Array2::from_shape_fn((100, 5), |_| rng.random_range(-PI..PI));
        let rho = Array2::from_elem((100, 5), 1.0);
        let st = circular_stats(&theta.view(), &rho.view()).unwrap();
        assert_eq!(build_graph(&st, 4).unwrap().len(), 10);
        assert!(build_graph(&st, 5).is_err());
        assert!(build_graph(&st, 0).unwrap().is_empty());
    }

    #[test]
    fn chain_coupling_recovers_chain() {
        let mut rng = stream(17, 0);
        let m = 6;
        let n = 5000;
        let mut theta = Array2::zeros((n, m));
        for i in 0..n {
            let mut phi: f64 = rng.random_range(-PI..PI);
            for k in 0..m {
                theta[[i, k]] = wrap(phi);
                phi += 0.3 + 0.35 * rng.sample::<f64, _>(StandardNormal);
            }
        }
        let rho = Array2::from_elem((n, m), 1.0);
        let st = circular_stats(&theta.view(), &rho.view()).unwrap();
        let g = build_graph(&st, 1).unwrap();
        let expected: Vec<(usize, usize)> = (0..m - 1).map(|k| (k, k + 1)).collect();
        let got: Vec<(usize, usize)> = g.edges.iter().map(|e| (e.k, e.l)).collect();
        assert_eq!(got, expected);
        for (k, l) in expected {
            assert!(st.m_re[[k, l]].hypot(st.m_im[[k, l]]) > 0.6);
        }
    }

    #[test]
    fn training_pair_limits_and_moments() {
        let field = random_field(4, 6, 1);
        let sched = NoiseSchedule {
            sigma_min: 1e-9,
            sigma_max: 1e-9,
            num_levels: None,
            tau: 1e-300,
        };
        let phi = vec![0.1, -2.0, 3.0, -3.1];
        let p = make_training_pair(&phi, &field, &sched, &mut stream(1, 0));
        for (a, b) in p.phi_tilde.iter().zip(&phi) {
            assert!((a - b).abs() < 1e-7);
        }
        let sched = NoiseSchedule {
            sigma_min: 0.05,
            sigma_max: 0.05,
            ..NoiseSchedule::default()
        };
        let mut rng = stream(2, 0);
        let (mut s1, mut s2, mut cnt) = (0.0, 0.0, 0.0);
        for _ in 0..5000 {
            let p = make_training_pair(&phi, &field, &sched, &mut rng);
            assert!(p.phi_tilde.iter().all(|v| (-PI..PI).contains(v)));
            for k in 0..4 {
                let d = wrap(p.phi_tilde[k] - p.mu[k]);
                s1 += d;
                s2 += d * d;
                cnt += 1.0;
            }
        }
        let var = s2 / cnt - (s1 / cnt).powi(2);
        assert!((s1 / cnt).abs() < 0.003);
        assert!((var / (2.0 * 0.05f64.powi(2)) - 1.0).abs() < 0.05);
    }

    #[test]
    fn score_net_input_gradients_match_finite_differences() {
        let field = random_field(3, 7, 1);
        let sched = NoiseSchedule::default();
        let net = ScoreNet::new(3, 8, sched, &mut stream(8, 0));
        let mut rng = stream(9, 0);
        let theta = Array2::from_shape_fn((4, 3), |_| rng.random_range(-PI..PI));
        let log_rho = Array2::from_shape_fn((4, 3), |_| rng.random::<f64>() - 1.0);
        let b = ScoreBatch::sample(&theta.view(), &log_rho.view(), &field, &sched, &mut rng);
        let (_, _, ig) = net.loss_grads(&b);
        let h = 1e-6;
        for (i, k) in [(0, 0), (2, 1), (3, 2)] {
            let mut bp = b.clone();
            bp.theta_tilde[[i, k]] += h;
            let mut bm = b.clone();
            bm.theta_tilde[[i, k]] -= h;
            let fd = (net.loss(&bp) - net.loss(&bm)) / (2.0 * h);
            assert_relative_eq!(ig.theta_tilde[[i, k]], fd, epsilon = 1e-6);
            let mut bp = b.clone();
            bp.log_rho[[i, k]] += h;
            let mut bm = b.clone();
            bm.log_rho[[i, k]] -= h;
            let fd = (net.loss(&bp) - net.loss(&bm)) / (2.0 * h);
            assert_relative_eq!(ig.log_rho[[i, k]], fd, epsilon = 1e-6);
        }
    }

    #[test]
    fn short_training_reduces_loss_and_round_trips() {
        let mut rng = stream(10, 0);
        let n = 2000;
        let theta = Array2::from_shape_fn((n, 2), |(_, k)| {
            wrap(if k == 0 { 1.0 } else { -2.0 } + 0.3 * rng.sample::<f64, _>(StandardNormal))
        });
        let rho = Array2::from_elem((n, 2), 0.5);
        let cfg = PriorConfig {
            steps: 1500,
            batch: 128,
            lr: 3e-3,
            top_p: 1,
            mixing: MixingMode::FixedIdentity,
            ..PriorConfig::default()
        };
        let prior = train_on_phases(&theta.view(), &rho.view(), &cfg).unwrap();
        assert!(prior.report.final_val_loss < prior.report.initial_val_loss);
        let again = train_on_phases(&theta.view(), &rho.view(), &cfg).unwrap();
        assert_eq!(prior, again);
        let dir = tempfile::tempdir().unwrap();
        prior.save(dir.path()).unwrap();
        let back = PhasePrior::load(dir.path()).unwrap();
        assert_eq!(back, prior);
    }

    #[test]
    fn learned_mixing_keeps_rotation_orthogonal() {
        let mut rng = stream(18, 0);
        let x = Array2::from_shape_fn((600, 8), |_| rng.sample::<f64, _>(StandardNormal));
        let x = crate::store::normalize_rows(&x).unwrap();
        let frame = crate::frame::fit_frame(&x.view(), &x.view(), 4, 1e-6, 1e-12).unwrap();
        let cfg = PriorConfig {
            steps: 40,
            batch: 64,
            top_p: 1,
            mixing: MixingMode::Learned,
            ..PriorConfig::default()
        };
        let (prior, mixed) = train_prior(&x.view(), &frame, &cfg).unwrap();
        assert!(prior.rotation.skew_params.iter().any(|p| *p != 0.0));
        mixed.check().unwrap();
        let diff = &mixed.projector_u() - &frame.projector_u();
        assert!(diff.iter().all(|v| v.abs() < 1e-8));
    }

    proptest! {
        #[test]
        fn prop_score_is_periodic(x in -10.0f64..10.0, sigma in 0.05f64..3.0) {
            let a = wrapped_gaussian_score(&[x], &[0.0], sigma, None).unwrap()[0];
            let b = wrapped_gaussian_score(&[x + TAU], &[0.0], sigma, None).unwrap()[0];
            prop_assert!((a - b).abs() < 1e-9 * (1.0 + a.abs()));
        }
    }
}
