//! Deterministic mean field game without common noise, solved player by
//! player, and its comparison with the equilibrium pipeline.

use serde::{Deserialize, Serialize};

use crate::cost::{displacement_check, CostModel, DisplacementReport};
use crate::error::{Error, Result};
use crate::field::DriftField;
use crate::mfg::{solve_equilibrium, Equilibrium, SolverConfig};
use crate::quantile::{rearrange, w2_distance, GridFunction, QuantileField};
use crate::rshe::{mesh_steps, simulate_with, Forcing, SimulationSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassicalSolution {
    pub times: Vec<f64>,
    /// `positions[n][i]`: state of player `i` at step `n`.
    pub positions: Vec<Vec<f64>>,
    /// Laws `nu_n` as quantile fields.
    pub flow: Vec<QuantileField>,
    pub iterations: usize,
    /// Last sup-norm change of the trajectories.
    pub change: f64,
}

/// Damped Picard iteration on the trajectories of `M` players labelled by
/// the grid: given trajectories `Z`, the costates are
/// `p_n(i) = dxg(Z_N(i), nu_N) + sum_{s=n}^{N-1} dxf(Z_s(i), nu_s) h`
/// with `nu_s` the law of `Z_s`, the new trajectories follow
/// `Z_{n+1} = Z_n - h p_n`, and `Z <- (1 - theta) Z + theta Z_new`.
pub fn classical_mfg(
    model: &dyn CostModel,
    initial: &QuantileField,
    horizon: f64,
    h: f64,
    damping: f64,
    tolerance: f64,
    max_iterations: usize,
) -> Result<ClassicalSolution> {
    if !(damping > 0.0 && damping <= 1.0) {
        return Err(Error::InvalidParameter(format!("damping must lie in (0, 1], got {damping}")));
    }
    let steps = mesh_steps(horizon, h)?;
    let m = initial.grid_size();
    let start = initial.values().to_vec();
    let mut z = vec![start.clone(); steps + 1];
    let mut change = f64::INFINITY;
    let mut iterations = 0;
    let laws = |z: &[Vec<f64>]| -> Result<Vec<QuantileField>> {
        z.iter().map(|row| Ok(rearrange(&GridFunction::new(row.clone())?))).collect()
    };
    while iterations < max_iterations {
        iterations += 1;
        let nu = laws(&z)?;
        let mut costate = vec![0.0; m];
        for (i, c) in costate.iter_mut().enumerate() {
            *c = model.dxg(z[steps][i], &nu[steps]);
        }
        let mut p = vec![vec![0.0; m]; steps];
        for n in (0..steps).rev() {
            for i in 0..m {
                costate[i] += model.dxf(z[n][i], &nu[n]) * h;
            }
            p[n].copy_from_slice(&costate);
        }
        let mut fresh = vec![start.clone(); steps + 1];
        for n in 0..steps {
            for i in 0..m {
                fresh[n + 1][i] = fresh[n][i] - h * p[n][i];
            }
        }
        change = 0.0;
        for (row, new) in z.iter_mut().zip(&fresh) {
            for (a, b) in row.iter_mut().zip(new) {
                let next = (1.0 - damping) * *a + damping * b;
                change = f64::max(change, (next - *a).abs());
                *a = next;
            }
        }
        if change < tolerance {
            break;
        }
    }
    if !(change < tolerance) {
        return Err(Error::Numerical(format!(
            "classical Picard iteration stalled at change {change} after {iterations} iterations"
        )));
    }
    Ok(ClassicalSolution {
        times: (0..=steps).map(|n| n as f64 * h).collect(),
        flow: laws(&z)?,
        positions: z,
        iterations,
        change,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeterministicReport {
    /// `sup_n W_2(mu_n, nu_n)` between the two equilibrium flows.
    pub gap: f64,
    pub gap_time: f64,
    pub monotonicity: DisplacementReport,
    /// False when the sampled displacement check fails; the gap is still
    /// reported but uniqueness of the classical equilibrium is not certified.
    pub certified: bool,
    pub oracle_iterations: usize,
    pub pipeline_passes: usize,
}

/// Equilibrium flow of the pipeline: the solved field driving the
/// deterministic transport-and-sort scheme from `initial`.
pub fn pipeline_flow(eq: &Equilibrium, initial: &QuantileField) -> Result<Vec<QuantileField>> {
    let cfg = &eq.config;
    let spec = SimulationSpec::new(cfg.horizon, cfg.h, 1, cfg.forcing.clone())?;
    let field: &dyn DriftField = &eq.field;
    Ok(simulate_with(initial, field, &spec)?.paths.remove(0))
}

/// Runs the zero-noise pipeline and the classical oracle on the same
/// mesh and compares the flows.
pub fn deterministic_benchmark(
    model: &dyn CostModel,
    initial: &QuantileField,
    config: &SolverConfig,
) -> Result<(DeterministicReport, Equilibrium, ClassicalSolution)> {
    if config.forcing != Forcing::Transport {
        return Err(Error::InvalidParameter("the deterministic benchmark needs transport forcing".into()));
    }
    let reach = initial.values().iter().fold(0.0f64, |a, v| a.max(v.abs()))
        + model.bound_const() * config.horizon * (1.0 + config.horizon);
    let monotonicity = displacement_check(model, 1000, initial.grid_size().min(64), reach.max(1e-6), 7);
    let eq = solve_equilibrium(model, initial, config)?;
    let flow = pipeline_flow(&eq, initial)?;
    let oracle = classical_mfg(model, initial, config.horizon, config.h, 0.5, 1e-13, 10_000)?;
    let mut gap = 0.0;
    let mut gap_time = 0.0;
    for (n, (a, b)) in flow.iter().zip(&oracle.flow).enumerate() {
        let d = w2_distance(a, b)?;
        if d > gap {
            gap = d;
            gap_time = oracle.times[n];
        }
    }
    let report = DeterministicReport {
        gap,
        gap_time,
        certified: monotonicity.monotone,
        monotonicity,
        oracle_iterations: oracle.iterations,
        pipeline_passes: eq.pass_distances.len() + 1,
    };
    Ok((report, eq, oracle))
}
