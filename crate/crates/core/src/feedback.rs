//! The feedback as a function of a player's state and the population law,
//! and the atom statistics that make it well defined.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::DriftField;
use crate::quantile::{cdf_eval, GridFunction, QuantileField};
use crate::rshe::PathBundle;

/// Grid cell of the half-torus label `F_mu(y) / 2`: the largest node index
/// `i` with `X(x_i) <= y`, clamped to `[0, M - 1]`.
pub fn label_index(mu: &QuantileField, y: f64) -> usize {
    let m = mu.grid_size();
    let count = (cdf_eval(mu, y) * m as f64).round() as usize;
    count.saturating_sub(1).min(m - 1)
}

/// `U(t, x, mu)` at the label of state `y` given a precomputed section.
pub fn tilde_u_from_section(section: &GridFunction, mu: &QuantileField, y: f64) -> Result<f64> {
    if section.grid_size() != mu.grid_size() {
        return Err(Error::Dimension { expected: mu.grid_size(), got: section.grid_size() });
    }
    Ok(section.values()[label_index(mu, y)])
}

/// `tilde U(t, y, mu) = U(t, F_mu(y) / 2, mu)`; states below the support map
/// to the first node, states above it to the last.
pub fn tilde_u_eval(u: &dyn DriftField, t: f64, y: f64, mu: &QuantileField) -> Result<f64> {
    tilde_u_from_section(&u.eval(t, mu)?, mu, y)
}

/// `(1/M^2) #{(i, j) : X_i = X_j}` for a sorted field.
pub fn atom_diagnostic(q: &QuantileField) -> f64 {
    let v = q.values();
    let m = v.len() as f64;
    let mut pairs = 0usize;
    let mut run = 1usize;
    for w in v.windows(2) {
        if w[1] == w[0] {
            run += 1;
        } else {
            pairs += run * run;
            run = 1;
        }
    }
    pairs += run * run;
    pairs as f64 / (m * m)
}

/// Longest run of equal values.
pub fn longest_tie(q: &QuantileField) -> usize {
    let mut best = 1;
    let mut run = 1;
    for w in q.values().windows(2) {
        run = if w[1] == w[0] { run + 1 } else { 1 };
        best = best.max(run);
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepresentationPoint {
    pub time: f64,
    /// Mean over paths of `max_x |U(t, x, mu_t) - tilde U(t, X_t(x), mu_t)|`.
    pub mean: f64,
    pub max: f64,
    pub stderr: f64,
    /// Mean over paths of the largest jump between neighbouring section
    /// values, the resolution of a nearest-node evaluation.
    pub oscillation: f64,
    pub mean_atoms: f64,
    pub max_atoms: f64,
}

/// Residual of the distributed representation along the bundle at the
/// given times.
pub fn representation_residual(u: &dyn DriftField, bundle: &PathBundle, times: &[f64]) -> Result<Vec<RepresentationPoint>> {
    times
        .iter()
        .map(|&t| {
            let n = bundle.time_index(t);
            let time = bundle.times[n];
            let rows: Vec<(f64, f64, f64)> = bundle
                .paths
                .par_iter()
                .map(|path| {
                    let x = &path[n];
                    let section = u.eval(time, x)?;
                    let mut worst = 0.0f64;
                    for (i, y) in x.values().iter().enumerate() {
                        let rep = tilde_u_from_section(&section, x, *y)?;
                        worst = worst.max((section.values()[i] - rep).abs());
                    }
                    let osc = section.values().windows(2).map(|w| (w[1] - w[0]).abs()).fold(0.0, f64::max);
                    Ok((worst, osc, atom_diagnostic(x)))
                })
                .collect::<Result<_>>()?;
            let k = rows.len() as f64;
            let residuals: Vec<f64> = rows.iter().map(|r| r.0).collect();
            let est = crate::stats::McEstimate::from_samples(&residuals);
            Ok(RepresentationPoint {
                time,
                mean: est.mean,
                max: residuals.iter().cloned().fold(0.0, f64::max),
                stderr: est.stderr,
                oscillation: rows.iter().map(|r| r.1).sum::<f64>() / k,
                mean_atoms: rows.iter().map(|r| r.2).sum::<f64>() / k,
                max_atoms: rows.iter().map(|r| r.2).fold(0.0, f64::max),
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AtomStatistics {
    /// Average of `atom_diagnostic - 1/M` over paths and times `t > 0`.
    pub mean_excess: f64,
    pub max_excess: f64,
    /// Per-time averages of `atom_diagnostic`.
    pub profile: Vec<(f64, f64)>,
}

pub fn atom_statistics(bundle: &PathBundle) -> AtomStatistics {
    let m = bundle.grid_size as f64;
    let mut profile = Vec::with_capacity(bundle.num_steps());
    let mut total = 0.0;
    let mut worst = 0.0f64;
    for n in 1..=bundle.num_steps() {
        let vals: Vec<f64> = bundle.paths.iter().map(|p| atom_diagnostic(&p[n])).collect();
        let avg = vals.iter().sum::<f64>() / vals.len() as f64;
        worst = vals.iter().fold(worst, |a, v| a.max(v - 1.0 / m));
        total += avg - 1.0 / m;
        profile.push((bundle.times[n], avg));
    }
    AtomStatistics { mean_excess: total / bundle.num_steps().max(1) as f64, max_excess: worst, profile }
}
