//! File-level commands. Every command reads from and writes into one run
//! directory and leaves a `manifest.json` recording the resolved config and
//! the sha256 of every input and output.
//!
//! Layout of a run directory:
//!
//! ```text
//! x.embd y.embd truth.json manifest.json      gen
//! diagnose/   report.json spectra.csv overlap.csv energy.csv
//! transform/  <name>.embd for each closed-form transform
//! prior/      frame/ prior.json prior.bin
//! align/      refiner.json refiner.bin anisoalign.embd certificates.json
//! eval/       <name>.json spectrum_<name>.csv metrics.csv
//! report/     report.csv
//! ```

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::Axis;
use serde::{Deserialize, Serialize};

use crate::aligner::{
    align_corpus, assemble, certify_bounds, global_init, refine, similarity_check, AlignConfig, Aligner,
    BoundReport, SimilarityReport,
};
use crate::diagnostics::{curve_csv, diagnose, spectra_csv, DiagnoseOptions};
use crate::error::{Error, Result};
use crate::evalsuite::{evaluate, reports_csv, sample_pairs, spectrum_csv, EvalOptions, MetricReport};
use crate::frame::{fit_frame, Frame, FrameConfig};
use crate::phase_prior::{train_prior, PhasePrior, PriorConfig};
use crate::rng::derive;
use crate::store::{self, l2_normalize, sha256_hex, split, write_bytes, EmbeddingSet, PairedSet, Split, SplitSpec};
use crate::synthetic::{generate, PlantSpec};
use crate::transforms::{apply, TransformContext, TransformSpec};

pub const MANIFEST: &str = "manifest.json";
pub const ANISO_NAME: &str = "anisoalign";
/// Row order of the final report.
pub const REPORT_ROWS: [&str; 8] = ["id", "mu", "sigma", "perm", "alpha", "c3", "realign", ANISO_NAME];
const CERT_PAIRS: usize = 10_000;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataPaths {
    /// Target (image) embeddings; defaults to `<out>/x.embd`.
    pub x: Option<PathBuf>,
    /// Source (text) embeddings; defaults to `<out>/y.embd`.
    pub y: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnoseConfig {
    pub q_grid: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataPaths,
    pub gen: PlantSpec,
    pub split: SplitSpec,
    pub diagnose: DiagnoseConfig,
    /// Closed-form transforms to run; `None` runs the default set.
    pub transforms: Option<Vec<TransformSpec>>,
    /// Seed of the default transform set.
    pub transform_seed: u64,
    pub frame: FrameConfig,
    pub prior: PriorConfig,
    pub align: AlignConfig,
    pub eval: EvalOptions,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::InvalidConfig(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::InvalidConfig(m) => Error::InvalidConfig(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Replace every per-stage seed by one derived from `seed`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.gen.seed = derive(seed, "gen");
        self.split.seed = derive(seed, "split");
        self.transform_seed = derive(seed, "transform");
        self.prior.seed = derive(seed, "prior");
        self.align.seed = derive(seed, "align");
        self.eval.seed = derive(seed, "eval");
        self
    }

    pub fn transform_specs(&self, d: usize) -> Vec<TransformSpec> {
        self.transforms
            .clone()
            .unwrap_or_else(|| TransformSpec::defaults(self.transform_seed, d))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileHash {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub config: RunConfig,
    pub inputs: Vec<FileHash>,
    pub outputs: Vec<FileHash>,
}

/// Collects output files of one command, relative to the run directory.
struct Run<'a> {
    out: &'a Path,
    inputs: Vec<FileHash>,
    outputs: Vec<FileHash>,
}

impl<'a> Run<'a> {
    fn new(out: &'a Path) -> Self {
        Self {
            out,
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    fn rel(&self, p: &Path) -> String {
        p.strip_prefix(self.out).unwrap_or(p).display().to_string()
    }

    fn input(&mut self, p: &Path) -> Result<()> {
        let sha = store::sha256_file(p)?;
        self.inputs.push(FileHash {
            path: self.rel(p),
            sha256: sha,
        });
        Ok(())
    }

    fn write(&mut self, p: &Path, bytes: &[u8]) -> Result<()> {
        write_bytes(p, bytes)?;
        self.outputs.push(FileHash {
            path: self.rel(p),
            sha256: sha256_hex(bytes),
        });
        Ok(())
    }

    fn json<T: Serialize>(&mut self, p: &Path, value: &T) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.write(p, &bytes)
    }

    fn embd(&mut self, p: &Path, set: &EmbeddingSet) -> Result<()> {
        self.write(p, &store::encode_embd(set))
    }

    /// Record files some other writer produced.
    fn record(&mut self, files: &[PathBuf]) -> Result<()> {
        for p in files {
            let sha = store::sha256_file(p)?;
            self.outputs.push(FileHash {
                path: self.rel(p),
                sha256: sha,
            });
        }
        Ok(())
    }

    fn finish(mut self, command: &str, cfg: &RunConfig, dir: &Path) -> Result<Manifest> {
        let manifest = Manifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config: cfg.clone(),
            inputs: std::mem::take(&mut self.inputs),
            outputs: std::mem::take(&mut self.outputs),
        };
        let mut bytes = serde_json::to_vec_pretty(&manifest)?;
        bytes.push(b'\n');
        write_bytes(&dir.join(MANIFEST), &bytes)?;
        Ok(manifest)
    }
}

fn make_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn require(path: &Path, stage: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::DependencyMissing(stage.to_string()))
    }
}

fn load_embedding(path: &Path, modality: &str) -> Result<EmbeddingSet> {
    if !path.is_file() {
        return Err(Error::format(path.display().to_string(), "file not found"));
    }
    let set = store::load(path)?.with_modality(modality);
    l2_normalize(&set)
}

fn input_paths(cfg: &RunConfig, out: &Path) -> (PathBuf, PathBuf) {
    (
        cfg.data.x.clone().unwrap_or_else(|| out.join("x.embd")),
        cfg.data.y.clone().unwrap_or_else(|| out.join("y.embd")),
    )
}

fn load_pairs(cfg: &RunConfig, run: &mut Run) -> Result<PairedSet> {
    let (xp, yp) = input_paths(cfg, run.out);
    let x = load_embedding(&xp, "image")?;
    let y = load_embedding(&yp, "text")?;
    run.input(&xp)?;
    run.input(&yp)?;
    PairedSet::new(x, y)
}

/// Paired data split plus the unpaired estimation sets every learned stage
/// trains on.
struct Prepared {
    split: Split,
    x_est: EmbeddingSet,
    y_est: EmbeddingSet,
}

fn prepare(cfg: &RunConfig, run: &mut Run) -> Result<Prepared> {
    let pairs = load_pairs(cfg, run)?;
    let split = split(&pairs, &cfg.split)?;
    let (x_est, y_est) = split.unpaired();
    Ok(Prepared { split, x_est, y_est })
}

pub fn cmd_gen(cfg: &RunConfig, out: &Path) -> Result<Manifest> {
    make_dir(out)?;
    let mut run = Run::new(out);
    let (pairs, truth) = generate(&cfg.gen)?;
    run.embd(&out.join("x.embd"), &pairs.x)?;
    run.embd(&out.join("y.embd"), &pairs.y)?;
    run.json(&out.join("truth.json"), &truth)?;
    run.finish("gen", cfg, out)
}

pub fn cmd_diagnose(cfg: &RunConfig, out: &Path) -> Result<Manifest> {
    let dir = out.join("diagnose");
    let mut run = Run::new(out);
    let pairs = load_pairs(cfg, &mut run)?;
    let opts = DiagnoseOptions {
        q_grid: cfg.diagnose.q_grid.clone(),
        q_u: None,
    };
    let report = diagnose(&pairs, &opts)?;
    make_dir(&dir)?;
    run.json(&dir.join("report.json"), &report)?;
    run.write(&dir.join("spectra.csv"), spectra_csv(&report).as_bytes())?;
    run.write(&dir.join("overlap.csv"), curve_csv(&report.overlap_curve, "q", "overlap").as_bytes())?;
    run.write(&dir.join("energy.csv"), curve_csv(&report.energy_curve, "k", "energy").as_bytes())?;
    run.finish("diagnose", cfg, &dir)
}

pub fn cmd_transform(cfg: &RunConfig, out: &Path) -> Result<Manifest> {
    let dir = out.join("transform");
    let mut run = Run::new(out);
    let p = prepare(cfg, &mut run)?;
    let specs = cfg.transform_specs(p.split.heldout.d());
    for s in &specs {
        s.validate(p.split.heldout.d()).map_err(|e| match e {
            Error::InvalidInput(m) => Error::InvalidConfig(m),
            other => other,
        })?;
    }
    let mut ctx = TransformContext::from_estimation(&p.x_est, &p.y_est)?;
    ctx.est_pairs = Some(p.split.estimation.clone());
    make_dir(&dir)?;
    let held = &p.split.heldout;
    for s in &specs {
        let z = apply(s, &ctx, &held.y.view(), Some(held))?;
        let set = EmbeddingSet::new(z, s.name())?;
        run.embd(&dir.join(format!("{}.embd", s.name())), &set)?;
    }
    run.finish("transform", cfg, &dir)
}

fn prior_dir(out: &Path) -> PathBuf {
    out.join("prior")
}

pub fn cmd_train_prior(cfg: &RunConfig, out: &Path) -> Result<Manifest> {
    let dir = prior_dir(out);
    let mut run = Run::new(out);
    let p = prepare(cfg, &mut run)?;
    let d = p.x_est.d();
    let frame = fit_frame(
        &p.x_est.view(),
        &p.y_est.view(),
        cfg.frame.resolve_r(d),
        cfg.frame.lambda_reg,
        cfg.frame.eps_polar,
    )?;
    let (prior, mixed) = train_prior(&p.x_est.view(), &frame, &cfg.prior)?;
    log::info!(
        "prior validation loss {:.4} -> {:.4}",
        prior.report.initial_val_loss,
        prior.report.final_val_loss
    );
    make_dir(&dir.join("frame"))?;
    mixed.save(&dir.join("frame"))?;
    prior.save(&dir)?;
    run.record(&stage_one_files(&dir))?;
    run.finish("train-prior", cfg, &dir)
}

fn stage_one_files(dir: &Path) -> Vec<PathBuf> {
    vec![
        dir.join("frame").join("frame.json"),
        dir.join("frame").join("frame.bin"),
        dir.join("prior.json"),
        dir.join("prior.bin"),
    ]
}

fn load_stage_one(out: &Path, run: &mut Run) -> Result<(Frame, PhasePrior)> {
    let dir = prior_dir(out);
    require(&dir.join("prior.json"), "train-prior")?;
    require(&dir.join("frame").join("frame.json"), "train-prior")?;
    let frame = Frame::load(&dir.join("frame"))?;
    let prior = PhasePrior::load(&dir)?;
    for p in stage_one_files(&dir) {
        run.input(&p)?;
    }
    Ok((frame, prior))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Certificates {
    pub kappa: f64,
    pub eps_eff_a_priori: f64,
    pub bounds: BoundReport,
    pub similarity: SimilarityReport,
}

/// Hard-bound and similarity certificates of one refinement of `y`.
pub fn certificates(aligner: &Aligner, y: &ndarray::ArrayView2<f64>, pair_count: usize, seed: u64) -> Result<Certificates> {
    let frame = &aligner.frame;
    let b = &aligner.config.bounds;
    let init = global_init(y, frame, &aligner.ecdfs)?;
    let r = refine(&init, &aligner.net, frame, b);
    let z0 = assemble(&init.rho0.view(), &init.theta0.view(), &init.v0.view(), frame);
    let z = assemble(&r.rho.view(), &r.theta.view(), &r.v.view(), frame);
    let pairs = sample_pairs(y.len_of(Axis(0)), pair_count, seed);
    Ok(Certificates {
        kappa: b.kappa(),
        eps_eff_a_priori: b.eps_eff(frame.d),
        bounds: certify_bounds(&init, &r, frame, b),
        similarity: similarity_check(&z0.view(), &z.view(), &pairs),
    })
}

pub fn cmd_align(cfg: &RunConfig, out: &Path) -> Result<Manifest> {
    let dir = out.join("align");
    let mut run = Run::new(out);
    let (frame, prior) = load_stage_one(out, &mut run)?;
    let p = prepare(cfg, &mut run)?;
    let aligner = Aligner::fit(&p.x_est.view(), &p.y_est.view(), &frame, &prior, &cfg.align)?;
    log::info!(
        "refiner validation prior loss {:.4} -> {:.4}",
        aligner.report.initial_val_prior_loss,
        aligner.report.final_val_prior_loss
    );
    let held_y = p.split.heldout.y.view();
    let z = align_corpus(&held_y, &aligner)?;
    let certs = certificates(&aligner, &held_y, CERT_PAIRS, cfg.eval.seed)?;
    make_dir(&dir)?;
    aligner.save(&dir)?;
    run.record(&[dir.join("refiner.json"), dir.join("refiner.bin")])?;
    run.embd(&dir.join(format!("{ANISO_NAME}.embd")), &EmbeddingSet::new(z, ANISO_NAME)?)?;
    run.json(&dir.join("certificates.json"), &certs)?;
    run.finish("align", cfg, &dir)
}

/// Substitute corpora present in the run directory, in report order.
fn substitutes(out: &Path) -> Vec<(String, PathBuf)> {
    REPORT_ROWS
        .iter()
        .map(|name| {
            let p = if *name == ANISO_NAME {
                out.join("align").join(format!("{name}.embd"))
            } else {
                out.join("transform").join(format!("{name}.embd"))
            };
            (name.to_string(), p)
        })
        .filter(|(_, p)| p.is_file())
        .collect()
}

pub fn cmd_eval(cfg: &RunConfig, out: &Path) -> Result<Manifest> {
    let dir = out.join("eval");
    let subs = substitutes(out);
    if subs.is_empty() {
        return Err(Error::DependencyMissing("transform".into()));
    }
    let mut run = Run::new(out);
    let p = prepare(cfg, &mut run)?;
    let held = &p.split.heldout;
    let mut reports = Vec::with_capacity(subs.len());
    for (name, path) in &subs {
        let z = store::load(path)?;
        run.input(path)?;
        reports.push(evaluate(name, &held.x.view(), &held.y.view(), &z.view(), &cfg.eval)?);
    }
    make_dir(&dir)?;
    for r in &reports {
        run.json(&dir.join(format!("{}.json", r.method)), r)?;
        run.write(&dir.join(format!("spectrum_{}.csv", r.method)), spectrum_csv(r).as_bytes())?;
    }
    run.write(&dir.join("metrics.csv"), reports_csv(&reports).as_bytes())?;
    run.finish("eval", cfg, &dir)
}

pub fn read_metric_reports(out: &Path) -> Result<Vec<MetricReport>> {
    let dir = out.join("eval");
    require(&dir.join(MANIFEST), "eval")?;
    let mut reports = Vec::new();
    for name in REPORT_ROWS {
        let p = dir.join(format!("{name}.json"));
        if p.is_file() {
            let bytes = std::fs::read(&p).map_err(|e| Error::io(&p, e))?;
            reports.push(
                serde_json::from_slice(&bytes).map_err(|e| Error::format(p.display().to_string(), e.to_string()))?,
            );
        }
    }
    Ok(reports)
}

pub fn cmd_report(cfg: &RunConfig, out: &Path) -> Result<Manifest> {
    let dir = out.join("report");
    let reports = read_metric_reports(out)?;
    let mut run = Run::new(out);
    for r in &reports {
        run.input(&out.join("eval").join(format!("{}.json", r.method)))?;
    }
    let mut table = String::from("method,phi,psi,omega_k,m_z,m_x,a_r_t,delta_mu\n");
    for r in &reports {
        let _ = writeln!(
            table,
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            r.method, r.phi, r.psi, r.omega_k, r.m_z, r.m_x, r.a_r_t, r.delta_mu
        );
    }
    make_dir(&dir)?;
    run.write(&dir.join("report.csv"), table.as_bytes())?;
    run.finish("report", cfg, &dir)
}
