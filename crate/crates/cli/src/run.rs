//! Experiments, artifacts and the run manifest.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use rshe::classical::deterministic_benchmark;
use rshe::cost::{CostModel, ControlPath};
use rshe::diagnostics::{bump_perturbation, energy_profile, exp_moment, stability_gronwall};
use rshe::feedback::{atom_statistics, representation_residual};
use rshe::io::{dump_bundle, save_equilibrium, save_nodes, write_csv, write_json};
use rshe::mfg::{contraction_admissible, gateaux_check, pontryagin_residual, solve_equilibrium_with, Equilibrium, RegressionSpec};
use rshe::quantile::{node, w2_distance};
use rshe::rshe::{simulate_with, PathBundle, SimulationSpec};
use rshe::stats::McEstimate;

use crate::config::{Experiment, Invalid, RunConfig};

pub const OUTPUT_ENV: &str = "RSHE_OUTPUT_DIR";

/// Outcome of a run, mapped onto the process exit status.
#[derive(Debug)]
pub enum Failure {
    Invalid(String),
    Numerical(String),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Invalid(_) => 2,
            Self::Numerical(_) => 3,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            Self::Invalid(m) | Self::Numerical(m) => m,
        }
    }
}

impl From<Invalid> for Failure {
    fn from(e: Invalid) -> Self {
        Self::Invalid(e.0)
    }
}

impl From<rshe::Error> for Failure {
    fn from(e: rshe::Error) -> Self {
        Self::Numerical(e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Self::Numerical(e.to_string())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub file: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub experiment: String,
    /// Hash of the configuration text as a git blob, with SHA-256.
    pub input_hash: String,
    pub seed: u64,
    pub config: RunConfig,
    pub config_text: String,
    pub status: String,
    pub exit_code: i32,
    pub error: Option<String>,
    pub artifacts: Vec<Artifact>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// SHA-256 over `blob <len>\0<content>`, the object header git uses.
pub fn blob_hash(text: &str) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", text.len()).as_bytes());
    h.update(text.as_bytes());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// `RSHE_OUTPUT_DIR`, then the configured directory, then `rshe-output/<experiment>`.
pub fn output_dir(cfg: &RunConfig) -> PathBuf {
    if let Some(dir) = std::env::var_os(OUTPUT_ENV).filter(|d| !d.is_empty()) {
        return PathBuf::from(dir);
    }
    cfg.output_dir.clone().unwrap_or_else(|| Path::new("rshe-output").join(cfg.experiment.name()))
}

/// Every regular file under `dir` except the manifest, sorted, with hashes.
pub fn collect_artifacts(dir: &Path) -> std::io::Result<Vec<Artifact>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d)? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap_or(&path).to_string_lossy().replace('\\', "/");
                if rel != "manifest.json" {
                    out.push(Artifact { sha256: sha256_hex(&fs::read(&path)?), file: rel });
                }
            }
        }
    }
    out.sort_by(|a, b| a.file.cmp(&b.file));
    Ok(out)
}

/// Removes the artifacts listed by an earlier manifest in `dir`, so that a
/// re-run does not pick up stale files. Nothing else is touched.
fn clear_previous(dir: &Path) -> std::io::Result<()> {
    let path = dir.join("manifest.json");
    let Ok(old) = rshe::io::read_json::<Manifest>(&path) else {
        return Ok(());
    };
    for a in &old.artifacts {
        let f = dir.join(&a.file);
        if f.is_file() {
            fs::remove_file(&f)?;
        }
    }
    fs::remove_file(path)
}

/// Runs the experiment into `dir` and writes `manifest.json` whatever the outcome.
pub fn execute(cfg: &RunConfig, text: &str, dir: &Path) -> Result<Manifest, (Failure, Option<Box<Manifest>>)> {
    if let Err(e) = cfg.validate() {
        return Err((e.into(), None));
    }
    if let Some(n) = cfg.threads {
        // a second build in the same process fails; the first pool stays
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    if let Err(e) = fs::create_dir_all(dir).and_then(|_| clear_previous(dir)) {
        return Err((e.into(), None));
    }
    let result = match cfg.experiment {
        Experiment::SimulateRshe => simulate_rshe(cfg, dir),
        Experiment::SolveMfg => solve_mfg(cfg, dir).map(|_| ()),
        Experiment::PontryaginCheck => pontryagin_check(cfg, dir),
        Experiment::FeedbackCheck => feedback_check(cfg, dir),
        Experiment::Diagnostics => diagnostics(cfg, dir),
        Experiment::DeterministicBenchmark => deterministic(cfg, dir),
    };
    let (status, exit_code, error) = match &result {
        Ok(()) => ("ok", 0, None),
        Err(f) => ("failed", f.exit_code(), Some(f.message().to_string())),
    };
    let manifest = collect_artifacts(dir).map(|artifacts| Manifest {
        tool: "rshe".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        experiment: cfg.experiment.name().into(),
        input_hash: format!("sha256:{}", blob_hash(text)),
        seed: cfg.seed(),
        config: cfg.clone(),
        config_text: text.to_string(),
        status: status.into(),
        exit_code,
        error,
        artifacts,
    });
    let manifest = match manifest {
        Ok(m) => m,
        Err(e) => return Err((e.into(), None)),
    };
    if let Err(e) = write_json(&dir.join("manifest.json"), &manifest) {
        return Err((e.into(), Some(Box::new(manifest))));
    }
    match result {
        Ok(()) => Ok(manifest),
        Err(f) => Err((f, Some(Box::new(manifest)))),
    }
}

#[derive(Serialize)]
struct StatRow {
    time: f64,
    mean: f64,
    stderr: f64,
}

fn stat_rows(bundle: &PathBundle, f: impl Fn(&rshe::QuantileField) -> f64) -> Vec<StatRow> {
    (0..bundle.times.len())
        .map(|n| {
            let xs: Vec<f64> = bundle.paths.iter().map(|p| f(&p[n])).collect();
            let e = McEstimate::from_samples(&xs);
            StatRow { time: bundle.times[n], mean: e.mean, stderr: e.stderr }
        })
        .collect()
}

fn simulate(cfg: &RunConfig, paths: usize, record_drift: bool) -> Result<PathBundle, Failure> {
    let mut spec = SimulationSpec::new(cfg.grid.horizon, cfg.grid.h, paths, cfg.forcing()?)?;
    spec.stream_tag = cfg.seed();
    spec.record_drift = record_drift;
    let drift = cfg.drift()?;
    Ok(simulate_with(&cfg.initial()?, drift.as_ref(), &spec)?)
}

fn simulate_rshe(cfg: &RunConfig, dir: &Path) -> Result<(), Failure> {
    let bundle = simulate(cfg, cfg.sampling.paths, false)?;
    write_csv(&dir.join("mean.csv"), &stat_rows(&bundle, |q| q.mean()))?;
    write_csv(&dir.join("second_moment.csv"), &stat_rows(&bundle, |q| q.second_moment()))?;
    write_csv(&dir.join("energy.csv"), &stat_rows(&bundle, rshe::quantile::grad_norm_sq))?;
    if cfg.sampling.dump_states {
        dump_bundle(dir, "states", &bundle)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct BlockRow {
    start: f64,
    end: f64,
    iterations: usize,
    last_distance: f64,
    max_late_ratio: f64,
    max_stderr: f64,
}

/// Solves the equilibrium, saving the solved blocks as they complete so
/// that a failure leaves `field_partial/` behind.
fn solve_mfg(cfg: &RunConfig, dir: &Path) -> Result<Equilibrium, Failure> {
    let model = cfg.cost()?;
    let solver = cfg.solver()?;
    let initial = cfg.initial()?;
    let partial = dir.join("field_partial");
    let m = solver.grid;
    let neighbors = solver.neighbors;
    let bound = model.bound_const() * (1.0 + solver.horizon);
    let lip = contraction_admissible(solver.horizon, model.lip_const()).c_c;
    let eq = solve_equilibrium_with(model.as_ref(), &initial, &solver, &mut |nodes, _| {
        save_nodes(&partial, m, neighbors, nodes, bound, lip)
    })?;
    if partial.exists() {
        fs::remove_dir_all(&partial)?;
    }
    save_equilibrium(&dir.join("field"), &eq)?;
    let rows: Vec<BlockRow> = eq
        .blocks
        .iter()
        .map(|b| BlockRow {
            start: b.start,
            end: b.end,
            iterations: b.iterations,
            last_distance: b.distances.last().copied().unwrap_or(0.0),
            max_late_ratio: b.ratios.iter().skip(1).copied().fold(0.0, f64::max),
            max_stderr: b.max_stderr,
        })
        .collect();
    write_csv(&dir.join("blocks.csv"), &rows)?;
    write_json(
        &dir.join("solve.json"),
        &json!({
            "constants": eq.constants,
            "block_length": eq.block_length,
            "pass_distances": eq.pass_distances,
            "warnings": eq.warnings,
        }),
    )?;
    Ok(eq)
}

fn equilibrium_bundle(cfg: &RunConfig, eq: &Equilibrium, record_drift: bool) -> Result<PathBundle, Failure> {
    let mut spec = SimulationSpec::new(cfg.grid.horizon, cfg.grid.h, cfg.sampling.paths, eq.config.forcing.clone())?;
    // keep the check paths off the library streams
    spec.stream_tag = cfg.seed().wrapping_add(1);
    spec.record_drift = record_drift;
    Ok(simulate_with(&cfg.initial()?, &eq.field, &spec)?)
}

#[derive(Serialize)]
struct GateauxRow {
    index: usize,
    value: f64,
    stderr: f64,
    bound: f64,
}

fn pontryagin_check(cfg: &RunConfig, dir: &Path) -> Result<(), Failure> {
    let eq = solve_mfg(cfg, dir)?;
    let model = cfg.cost()?;
    let bundle = equilibrium_bundle(cfg, &eq, true)?;
    let residual = pontryagin_residual(&eq.field, &bundle, model.as_ref(), &RegressionSpec::new(cfg.probe_times()))?;
    write_csv(&dir.join("residual.csv"), &residual)?;
    let rows = gateaux_rows(cfg, &eq, &bundle, model.as_ref())?;
    let worst = rows.iter().map(|r| r.value.abs() / r.bound).fold(0.0, f64::max);
    write_csv(&dir.join("gateaux.csv"), &rows)?;
    write_json(&dir.join("summary.json"), &json!({ "max_gateaux_ratio": worst, "stationary": worst <= 1.0 }))?;
    Ok(())
}

/// First variations along smooth random perturbations
/// `c0 + c1 t / T + c2 cos(2 pi x) + c3 (4x - 1)`.
fn gateaux_rows(cfg: &RunConfig, eq: &Equilibrium, bundle: &PathBundle, model: &dyn CostModel) -> Result<Vec<GateauxRow>, Failure> {
    let m = bundle.grid_size;
    let n = bundle.num_steps();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed());
    (0..cfg.sampling.perturbations)
        .map(|index| {
            let c: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let gamma = ControlPath::from_fn(bundle.num_paths(), n, m, |_, k, i| {
                let x = node(i, m);
                c[0] + c[1] * k as f64 / n as f64
                    + c[2] * (2.0 * std::f64::consts::PI * x).cos()
                    + c[3] * (4.0 * x - 1.0)
            })?;
            let v = gateaux_check(&eq.field, &gamma, bundle, model)?;
            Ok(GateauxRow { index, value: v.mean, stderr: v.stderr, bound: 3.0 * v.stderr + 5.0 * eq.config.tolerance })
        })
        .collect()
}

#[derive(Serialize)]
struct AtomRow {
    time: f64,
    mean_atoms: f64,
}

fn feedback_check(cfg: &RunConfig, dir: &Path) -> Result<(), Failure> {
    let eq = solve_mfg(cfg, dir)?;
    let bundle = equilibrium_bundle(cfg, &eq, false)?;
    let rep = representation_residual(&eq.field, &bundle, &cfg.probe_times())?;
    write_csv(&dir.join("representation.csv"), &rep)?;
    let atoms = atom_statistics(&bundle);
    let rows: Vec<AtomRow> = atoms.profile.iter().map(|&(time, mean_atoms)| AtomRow { time, mean_atoms }).collect();
    write_csv(&dir.join("atoms.csv"), &rows)?;
    write_json(
        &dir.join("summary.json"),
        &json!({ "mean_atom_excess": atoms.mean_excess, "max_atom_excess": atoms.max_excess }),
    )?;
    Ok(())
}

#[derive(Serialize)]
struct GronwallRow {
    time: f64,
    ratio: f64,
    bound: f64,
}

fn diagnostics(cfg: &RunConfig, dir: &Path) -> Result<(), Failure> {
    let bundle = simulate(cfg, cfg.sampling.paths, false)?;
    let energy = energy_profile(&bundle, cfg.window())?;
    write_csv(&dir.join("energy.csv"), &energy.rows)?;
    let moment = exp_moment(&bundle, cfg.sampling.exp_eps)?;
    let x0 = cfg.initial()?;
    let twin = bump_perturbation(&x0, 0.25, 0.1, 1.0)?;
    let drift = cfg.drift()?;
    let g = &cfg.grid;
    let profile = stability_gronwall(
        &x0,
        &twin,
        drift.as_ref(),
        g.horizon,
        g.h,
        &cfg.forcing()?,
        cfg.sampling.paths,
        cfg.seed(),
    )?;
    let rows: Vec<GronwallRow> = profile
        .times
        .iter()
        .zip(&profile.ratio)
        .zip(&profile.bound)
        .map(|((&time, &ratio), &bound)| GronwallRow { time, ratio, bound })
        .collect();
    write_csv(&dir.join("gronwall.csv"), &rows)?;
    write_json(
        &dir.join("summary.json"),
        &json!({
            "energy_window": energy.window,
            "energy_fit": energy.fit,
            "exp_moment": moment,
            "gronwall_final_ratio": profile.final_ratio(),
            "gronwall_final_bound": profile.bound.last(),
        }),
    )?;
    Ok(())
}

#[derive(Serialize)]
struct GapRow {
    time: f64,
    w2_gap: f64,
}

fn deterministic(cfg: &RunConfig, dir: &Path) -> Result<(), Failure> {
    let model = cfg.cost()?;
    let solver = cfg.solver()?;
    let initial = cfg.initial()?;
    let (report, eq, oracle) = deterministic_benchmark(model.as_ref(), &initial, &solver)?;
    let flow = rshe::classical::pipeline_flow(&eq, &initial)?;
    let rows = flow
        .iter()
        .zip(&oracle.flow)
        .zip(&oracle.times)
        .map(|((a, b), &time)| Ok(GapRow { time, w2_gap: w2_distance(a, b)? }))
        .collect::<Result<Vec<_>, rshe::Error>>()?;
    write_csv(&dir.join("gap.csv"), &rows)?;
    write_json(&dir.join("report.json"), &report)?;
    save_equilibrium(&dir.join("field"), &eq)?;
    Ok(())
}
