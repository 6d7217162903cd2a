//! Run configuration: one TOML file per run.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use rshe::cost::{make_clipped_linear_family, make_constant_family, make_tanh_family, CostModel};
use rshe::field::{AnalyticField, DriftField, ZeroField};
use rshe::mfg::{PicardInit, SolverConfig};
use rshe::rshe::{mesh_steps, Forcing, SimulationSpec, Stepper};
use rshe::spectral::NoiseModel;
use rshe::QuantileField;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    SimulateRshe,
    SolveMfg,
    PontryaginCheck,
    FeedbackCheck,
    Diagnostics,
    DeterministicBenchmark,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Self::SimulateRshe => "simulate-rshe",
            Self::SolveMfg => "solve-mfg",
            Self::PontryaginCheck => "pontryagin-check",
            Self::FeedbackCheck => "feedback-check",
            Self::Diagnostics => "diagnostics",
            Self::DeterministicBenchmark => "deterministic-benchmark",
        }
    }

    fn needs_cost(self) -> bool {
        matches!(
            self,
            Self::SolveMfg | Self::PontryaginCheck | Self::FeedbackCheck | Self::DeterministicBenchmark
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub experiment: Experiment,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    /// Size of the worker pool; all cores when absent.
    #[serde(default)]
    pub threads: Option<usize>,
    pub grid: GridConfig,
    #[serde(default)]
    pub noise: Option<NoiseConfig>,
    #[serde(default)]
    pub initial: InitialLaw,
    #[serde(default)]
    pub drift: DriftChoice,
    #[serde(default)]
    pub cost: Option<CostConfig>,
    #[serde(default)]
    pub solver: SolverOptions,
    #[serde(default)]
    pub sampling: Sampling,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub m: usize,
    /// Cosine modes; `m / 4` when absent.
    #[serde(default)]
    pub modes: Option<usize>,
    pub h: f64,
    pub horizon: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    pub lambda: f64,
    pub seed: u64,
    #[serde(default = "one")]
    pub amplitude: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum InitialLaw {
    /// `4x - 1`, the uniform law on `[-1, 1]`.
    #[default]
    Linear,
    /// Half the mass at 0, half at 1.
    TwoStep,
    Constant { value: f64 },
    /// Node values, sorted on load.
    Values { values: Vec<f64> },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DriftChoice {
    #[default]
    Zero,
    /// `scale (tanh X - tanh(mean X)) / 2`, Lipschitz constant `scale`.
    Tanh { scale: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case", deny_unknown_fields)]
pub enum CostConfig {
    Tanh { a: f64, b: f64, c_g: f64, b_g: f64 },
    ClippedLinear { a: f64, b: f64, clip: f64 },
    Constant { kappa_f: f64, kappa_g: f64 },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverOptions {
    pub block_length: Option<f64>,
    pub safety: Option<f64>,
    pub tolerance: Option<f64>,
    pub max_iterations: Option<usize>,
    pub outer_scenarios: Option<usize>,
    pub inner_paths: Option<usize>,
    pub node_stride: Option<usize>,
    pub neighbors: Option<usize>,
    pub outer_passes: Option<usize>,
    pub init: Option<PicardInit>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sampling {
    #[serde(default = "default_paths")]
    pub paths: usize,
    /// Probe times of the checks; `T/4, T/2, 3T/4` when absent.
    #[serde(default)]
    pub probe_times: Option<Vec<f64>>,
    #[serde(default = "default_perturbations")]
    pub perturbations: usize,
    /// Fit window of the energy profile; `[5h, 50h]` when absent.
    #[serde(default)]
    pub window: Option<[f64; 2]>,
    #[serde(default = "default_eps")]
    pub exp_eps: f64,
    #[serde(default)]
    pub dump_states: bool,
}

fn default_paths() -> usize {
    200
}

fn default_perturbations() -> usize {
    20
}

fn default_eps() -> f64 {
    0.1
}

impl Default for Sampling {
    fn default() -> Self {
        Self {
            paths: default_paths(),
            probe_times: None,
            perturbations: default_perturbations(),
            window: None,
            exp_eps: default_eps(),
            dump_states: false,
        }
    }
}

/// A configuration that failed validation.
#[derive(Debug)]
pub struct Invalid(pub String);

impl std::fmt::Display for Invalid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<rshe::Error> for Invalid {
    fn from(e: rshe::Error) -> Self {
        Invalid(e.to_string())
    }
}

pub fn parse(text: &str) -> Result<RunConfig, Invalid> {
    toml::from_str(text).map_err(|e| Invalid(e.to_string()))
}

impl RunConfig {
    pub fn modes(&self) -> usize {
        self.grid.modes.unwrap_or((self.grid.m / 4).max(1))
    }

    pub fn seed(&self) -> u64 {
        self.noise.as_ref().map_or(0, |n| n.seed)
    }

    pub fn forcing(&self) -> Result<Forcing, Invalid> {
        if self.experiment == Experiment::DeterministicBenchmark {
            if let Some(n) = &self.noise {
                if n.amplitude != 0.0 {
                    return Err(Invalid("the deterministic benchmark runs without noise: set amplitude = 0".into()));
                }
            }
            return Ok(Forcing::Transport);
        }
        let n = self.noise.as_ref().ok_or_else(|| Invalid("missing [noise] section".into()))?;
        let model = NoiseModel { lambda: n.lambda, num_modes: self.modes(), seed: n.seed, amplitude: n.amplitude };
        model.validate()?;
        Ok(Forcing::Rshe(model))
    }

    pub fn initial(&self) -> Result<QuantileField, Invalid> {
        let m = self.grid.m;
        Ok(match &self.initial {
            InitialLaw::Linear => QuantileField::from_fn(m, |x| 4.0 * x - 1.0)?,
            InitialLaw::TwoStep => QuantileField::from_fn(m, |x| if x < 0.25 { 0.0 } else { 1.0 })?,
            InitialLaw::Constant { value } => QuantileField::constant(m, *value)?,
            InitialLaw::Values { values } => {
                if values.len() != m {
                    return Err(Invalid(format!("initial values: expected {m} entries, got {}", values.len())));
                }
                QuantileField::from_unsorted(values.clone())?
            }
        })
    }

    pub fn drift(&self) -> Result<Box<dyn DriftField>, Invalid> {
        Ok(match self.drift {
            DriftChoice::Zero => Box::new(ZeroField),
            DriftChoice::Tanh { scale } => {
                if !(scale >= 0.0) || !scale.is_finite() {
                    return Err(Invalid(format!("drift scale must be finite and >= 0, got {scale}")));
                }
                Box::new(AnalyticField::new(scale, scale, move |_, q, out| {
                    let shift = 0.5 * scale * q.mean().tanh();
                    for (o, x) in out.iter_mut().zip(q.values()) {
                        *o = 0.5 * scale * x.tanh() - shift;
                    }
                }))
            }
        })
    }

    pub fn cost(&self) -> Result<Box<dyn CostModel>, Invalid> {
        let c = self.cost.as_ref().ok_or_else(|| Invalid("missing [cost] section".into()))?;
        Ok(match *c {
            CostConfig::Tanh { a, b, c_g, b_g } => Box::new(make_tanh_family(a, b, c_g, b_g)?),
            CostConfig::ClippedLinear { a, b, clip } => Box::new(make_clipped_linear_family(a, b, clip)?),
            CostConfig::Constant { kappa_f, kappa_g } => Box::new(make_constant_family(kappa_f, kappa_g)?),
        })
    }

    pub fn solver(&self) -> Result<SolverConfig, Invalid> {
        let base = if self.experiment == Experiment::DeterministicBenchmark {
            SolverConfig::deterministic(self.grid.horizon, self.grid.h, self.grid.m)
        } else {
            SolverConfig::new(self.grid.horizon, self.grid.h, self.grid.m, self.forcing()?)
        };
        let o = &self.solver;
        let cfg = SolverConfig {
            block_length: o.block_length.or(base.block_length),
            safety: o.safety.unwrap_or(base.safety),
            tolerance: o.tolerance.unwrap_or(base.tolerance),
            max_iterations: o.max_iterations.unwrap_or(base.max_iterations),
            outer_scenarios: o.outer_scenarios.unwrap_or(base.outer_scenarios),
            inner_paths: o.inner_paths.unwrap_or(base.inner_paths),
            node_stride: o.node_stride.unwrap_or(base.node_stride),
            neighbors: o.neighbors.unwrap_or(base.neighbors),
            outer_passes: o.outer_passes.unwrap_or(base.outer_passes),
            init: o.init.unwrap_or(base.init),
            stream_tag: self.seed(),
            ..base
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn probe_times(&self) -> Vec<f64> {
        let t = self.grid.horizon;
        self.sampling.probe_times.clone().unwrap_or_else(|| vec![t / 4.0, t / 2.0, 3.0 * t / 4.0])
    }

    pub fn window(&self) -> (f64, f64) {
        self.sampling.window.map_or((5.0 * self.grid.h, 50.0 * self.grid.h), |[a, b]| (a, b))
    }

    /// Checks every precondition the run will rely on, without computing.
    pub fn validate(&self) -> Result<(), Invalid> {
        let g = &self.grid;
        if g.m < 2 {
            return Err(Invalid(format!("grid size must be at least 2, got {}", g.m)));
        }
        if self.modes() >= g.m {
            return Err(Invalid(format!("{} cosine modes cannot be resolved on {} grid nodes", self.modes(), g.m)));
        }
        let forcing = self.forcing()?;
        let spec = SimulationSpec::new(g.horizon, g.h, self.sampling.paths.max(1), forcing.clone())?;
        Stepper::new(g.m, &forcing, spec.h)?;
        if self.threads == Some(0) {
            return Err(Invalid("threads must be at least 1".into()));
        }
        if self.sampling.paths < 2 {
            return Err(Invalid(format!("sampling.paths must be at least 2, got {}", self.sampling.paths)));
        }
        self.initial()?;
        self.drift()?;
        for &t in &self.probe_times() {
            if !(0.0..=g.horizon).contains(&t) {
                return Err(Invalid(format!("probe time {t} lies outside [0, {}]", g.horizon)));
            }
        }
        let (lo, hi) = self.window();
        if !(lo > 0.0 && lo < hi) {
            return Err(Invalid(format!("energy window [{lo}, {hi}] must satisfy 0 < lo < hi")));
        }
        if !(self.sampling.exp_eps > 0.0) {
            return Err(Invalid(format!("exp_eps must be positive, got {}", self.sampling.exp_eps)));
        }
        mesh_steps(g.horizon, g.h)?;
        if self.experiment.needs_cost() {
            self.cost()?;
            self.solver()?;
        }
        Ok(())
    }
}
