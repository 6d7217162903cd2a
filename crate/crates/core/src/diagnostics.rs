//! Energy decay, exponential moments, `L^2` stability and semigroup
//! smoothing measured on simulated ensembles.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::DriftField;
use crate::quantile::{grad_norm_sq, node, rearrange, w2_distance, GridFunction, QuantileField};
use crate::rng::stream_id;
use crate::rshe::{mesh_steps, simulate_with, Forcing, PathBundle, SimulationSpec, Stepper};
use crate::spectral::NoiseModel;
use crate::stats::{fit_line, log_log_slope, LineFit, McEstimate};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileRow {
    pub time: f64,
    pub mean: f64,
    pub stderr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyProfile {
    pub rows: Vec<ProfileRow>,
    pub window: (f64, f64),
    pub fit: Option<LineFit>,
}

/// Ensemble mean of `||grad X_t||^2` at every stored time, with the
/// log-log slope over `t` in `window`.
pub fn energy_profile(bundle: &PathBundle, window: (f64, f64)) -> Result<EnergyProfile> {
    if bundle.num_paths() == 0 || bundle.paths[0].is_empty() {
        return Err(Error::InvalidParameter("empty bundle".into()));
    }
    let rows: Vec<ProfileRow> = (0..=bundle.num_steps())
        .into_par_iter()
        .map(|n| {
            let e: Vec<f64> = bundle.paths.iter().map(|p| grad_norm_sq(&p[n])).collect();
            let est = McEstimate::from_samples(&e);
            ProfileRow { time: bundle.times[n], mean: est.mean, stderr: est.stderr }
        })
        .collect();
    let eps = 1e-9 * window.1.abs().max(1.0);
    let (ts, es): (Vec<f64>, Vec<f64>) = rows
        .iter()
        .filter(|r| r.time > 0.0 && r.time >= window.0 - eps && r.time <= window.1 + eps)
        .map(|r| (r.time, r.mean))
        .unzip();
    Ok(EnergyProfile { fit: log_log_slope(&ts, &es), rows, window })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpMoment {
    pub eps: f64,
    /// `None` when `exp(eps sup_t ||X_t||^2)` overflows on some path.
    pub estimate: Option<McEstimate>,
    /// Same estimate on the first half of the paths.
    pub half_estimate: Option<McEstimate>,
    pub max_sup_norm_sq: f64,
    pub note: Option<String>,
}

/// `E exp(eps sup_t ||X_t||^2)` with a tail report.
pub fn exp_moment(bundle: &PathBundle, eps: f64) -> Result<ExpMoment> {
    if !(eps > 0.0) {
        return Err(Error::Domain(format!("eps must be positive, got {eps}")));
    }
    if bundle.num_paths() == 0 {
        return Err(Error::InvalidParameter("empty bundle".into()));
    }
    let sups: Vec<f64> = bundle
        .paths
        .iter()
        .map(|p| p.iter().map(|x| x.second_moment()).fold(0.0, f64::max))
        .collect();
    let max_sup = sups.iter().cloned().fold(0.0, f64::max);
    let values: Vec<f64> = sups.iter().map(|s| (eps * s).exp()).collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Ok(ExpMoment {
            eps,
            estimate: None,
            half_estimate: None,
            max_sup_norm_sq: max_sup,
            note: Some(format!("eps above empirical radius: eps * max sup ||X||^2 = {}", eps * max_sup)),
        });
    }
    let half = (values.len() / 2).max(1);
    Ok(ExpMoment {
        eps,
        estimate: Some(McEstimate::from_samples(&values)),
        half_estimate: Some(McEstimate::from_samples(&values[..half])),
        max_sup_norm_sq: max_sup,
        note: None,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GronwallProfile {
    pub times: Vec<f64>,
    /// Largest ratio `||X_t - X'_t|| / ||X_0 - X'_0||` over paths.
    pub ratio: Vec<f64>,
    /// `exp(C_V t)`.
    pub bound: Vec<f64>,
}

impl GronwallProfile {
    pub fn final_ratio(&self) -> f64 {
        *self.ratio.last().unwrap_or(&f64::NAN)
    }

    pub fn is_non_increasing(&self, slack: f64) -> bool {
        self.ratio.windows(2).all(|w| w[1] <= w[0] * (1.0 + slack))
    }
}

/// Twin runs from `x0a` and `x0b` driven by the same noise.
#[allow(clippy::too_many_arguments)]
pub fn stability_gronwall(
    x0a: &QuantileField,
    x0b: &QuantileField,
    v: &dyn DriftField,
    horizon: f64,
    h: f64,
    forcing: &Forcing,
    num_paths: usize,
    stream_tag: u64,
) -> Result<GronwallProfile> {
    let d0 = w2_distance(x0a, x0b)?;
    let mut spec = SimulationSpec::new(horizon, h, num_paths, forcing.clone())?;
    spec.stream_tag = stream_tag;
    let a = simulate_with(x0a, v, &spec)?;
    let b = simulate_with(x0b, v, &spec)?;
    let ratio = (0..=spec.steps)
        .map(|n| {
            if d0 == 0.0 {
                return Ok(0.0);
            }
            let mut worst = 0.0f64;
            for (pa, pb) in a.paths.iter().zip(&b.paths) {
                worst = worst.max(w2_distance(&pa[n], &pb[n])? / d0);
            }
            Ok(worst)
        })
        .collect::<Result<Vec<f64>>>()?;
    let c_v = v.lipschitz();
    Ok(GronwallProfile {
        bound: a.times.iter().map(|t| (c_v * t).exp()).collect(),
        times: a.times,
        ratio,
    })
}

/// Probe of `Lip(P^0_t phi)` with bump perturbations of width
/// `width_factor * sqrt(t)` centred at `center`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmoothingConfig {
    pub base: QuantileField,
    pub times: Vec<f64>,
    pub h: f64,
    pub noise: NoiseModel,
    /// Common-random-number path pairs per perturbation.
    pub paths: usize,
    pub center: f64,
    pub width_factor: f64,
    /// Bump heights in units of the width; one perturbed law per entry.
    pub amplitudes: Vec<f64>,
    pub stream_tag: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmoothingRow {
    pub time: f64,
    pub lip_hat: f64,
    pub stderr: f64,
    /// `W_2` separation of the maximising pair.
    pub separation: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmoothingReport {
    pub rows: Vec<SmoothingRow>,
    pub fit: Option<LineFit>,
}

/// `base + a w exp(-(x - c)^2 / (2 w^2))` on the grid, rearranged.
pub fn bump_perturbation(base: &QuantileField, center: f64, width: f64, amplitude: f64) -> Result<QuantileField> {
    let m = base.grid_size();
    let v: Vec<f64> = (0..m)
        .map(|i| {
            let z = (node(i, m) - center) / width;
            base.values()[i] + amplitude * width * (-0.5 * z * z).exp()
        })
        .collect();
    Ok(rearrange(&GridFunction::new(v)?))
}

/// `phi(X^0_t)` on each path started from `x0`, paths addressed by
/// `stream_id([tag, p])`.
fn terminal_values(
    phi: &(dyn Fn(&QuantileField) -> f64 + Sync),
    x0: &QuantileField,
    steps: usize,
    stepper: &Stepper,
    paths: usize,
    tag: u64,
) -> Result<Vec<f64>> {
    let zero = GridFunction::zeros(x0.grid_size());
    (0..paths)
        .into_par_iter()
        .map(|p| {
            let mut stream = stepper.stream(stream_id(&[tag, p as u64]));
            let mut x = x0.clone();
            for n in 0..steps {
                x = stepper.step(&x, &zero, stream.as_mut(), n as u64)?.1;
            }
            Ok(phi(&x))
        })
        .collect()
}

/// `max` over perturbations of `|P_t phi(mu) - P_t phi(nu)| / W_2(mu, nu)`
/// with common random numbers, and the fitted exponent of `t`.
pub fn smoothing_probe(phi: &(dyn Fn(&QuantileField) -> f64 + Sync), cfg: &SmoothingConfig) -> Result<SmoothingReport> {
    if cfg.amplitudes.is_empty() || cfg.paths < 2 {
        return Err(Error::InvalidParameter("need perturbations and at least two paths".into()));
    }
    let stepper = Stepper::new(cfg.base.grid_size(), &Forcing::Rshe(cfg.noise.clone()), cfg.h)?;
    let mut rows = Vec::with_capacity(cfg.times.len());
    for (j, &t) in cfg.times.iter().enumerate() {
        if !(t > 0.0) {
            return Err(Error::Domain(format!("probe times must be positive, got {t}")));
        }
        let steps = mesh_steps(t, cfg.h)?;
        let tag = stream_id(&[cfg.stream_tag, j as u64]);
        let base = terminal_values(phi, &cfg.base, steps, &stepper, cfg.paths, tag)?;
        let width = cfg.width_factor * t.sqrt();
        let mut best = SmoothingRow { time: t, lip_hat: 0.0, stderr: 0.0, separation: 0.0 };
        for &a in &cfg.amplitudes {
            let nu = bump_perturbation(&cfg.base, cfg.center, width, a)?;
            let sep = w2_distance(&cfg.base, &nu)?;
            if sep == 0.0 {
                continue;
            }
            let pert = terminal_values(phi, &nu, steps, &stepper, cfg.paths, tag)?;
            let diff: Vec<f64> = pert.iter().zip(&base).map(|(x, y)| x - y).collect();
            let est = McEstimate::from_samples(&diff);
            let lip = est.mean.abs() / sep;
            if lip > best.lip_hat || best.separation == 0.0 {
                best = SmoothingRow { time: t, lip_hat: lip, stderr: est.stderr / sep, separation: sep };
            }
        }
        rows.push(best);
    }
    let (ts, ls): (Vec<f64>, Vec<f64>) = rows.iter().filter(|r| r.lip_hat > 0.0).map(|r| (r.time.ln(), r.lip_hat.ln())).unzip();
    Ok(SmoothingReport { fit: fit_line(&ts, &ls), rows })
}

/// `1{median >= mean}`, bounded by 1 and discontinuous in `W_2`.
pub fn median_above_mean(q: &QuantileField) -> f64 {
    if q.median() >= q.mean() {
        1.0
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{AnalyticField, ZeroField};
    use crate::rshe::simulate_driftless;

    fn quiet(k: usize) -> NoiseModel {
        NoiseModel::new(0.75, k, 2).unwrap().with_amplitude(0.0).unwrap()
    }

    #[test]
    fn heat_flow_energy_decreases() {
        let x0 = QuantileField::from_fn(64, |x| (4.0 * x - 1.0).powi(3)).unwrap();
        let b = simulate_driftless(&x0, 0.05, 1e-3, 1, &quiet(16)).unwrap();
        let p = energy_profile(&b, (0.005, 0.05)).unwrap();
        // the first step projects onto the modes and may shift the energy
        assert!(p.rows[1..].windows(2).all(|w| w[1].mean <= w[0].mean + 1e-12));
    }

    #[test]
    fn exp_moment_examples() {
        let x0 = QuantileField::from_fn(32, |x| 4.0 * x - 1.0).unwrap();
        let b = simulate_driftless(&x0, 0.02, 1e-3, 3, &quiet(8)).unwrap();
        let e = exp_moment(&b, 0.1).unwrap();
        let exact = (0.1 * x0.second_moment()).exp();
        let est = e.estimate.unwrap();
        assert!((est.mean - exact).abs() < 1e-12 * exact, "{} vs {exact}", est.mean);
        let tiny = exp_moment(&b, 1e-12).unwrap().estimate.unwrap();
        assert!((tiny.mean - 1.0).abs() < 1e-10);
        let huge = exp_moment(&b, 1e6).unwrap();
        assert!(huge.estimate.is_none() && huge.note.unwrap().contains("radius"));
        assert!(exp_moment(&b, 0.0).is_err());
    }

    fn lipschitz_drift() -> AnalyticField {
        AnalyticField::new(1.0, 1.0, |_, q, out| {
            let m = q.mean().tanh();
            for (o, x) in out.iter_mut().zip(q.values()) {
                *o = 0.5 * x.tanh() - 0.5 * m;
            }
        })
    }

    #[test]
    fn gronwall_examples() {
        let noise = NoiseModel::new(0.75, 16, 5).unwrap();
        let forcing = Forcing::Rshe(noise);
        let a = QuantileField::from_fn(64, |x| 4.0 * x - 1.0).unwrap();
        let b = QuantileField::from_fn(64, |x| (4.0 * x - 1.0).powi(3) + 0.2).unwrap();
        let same = stability_gronwall(&a, &a, &lipschitz_drift(), 0.1, 0.01, &forcing, 2, 1).unwrap();
        assert!(same.ratio.iter().all(|&r| r == 0.0));
        let free = stability_gronwall(&a, &b, &ZeroField, 0.1, 0.01, &forcing, 3, 1).unwrap();
        assert!(free.is_non_increasing(1e-12), "{:?}", free.ratio);
        let driven = stability_gronwall(&a, &b, &lipschitz_drift(), 0.2, 0.01, &forcing, 3, 1).unwrap();
        for (r, bound) in driven.ratio.iter().zip(&driven.bound) {
            assert!(*r <= bound * (1.0 + 1e-12));
        }
    }

    #[test]
    fn constant_functional_is_flat() {
        let cfg = SmoothingConfig {
            base: QuantileField::from_fn(32, |x| 4.0 * x - 1.0).unwrap(),
            times: vec![0.01, 0.02],
            h: 1e-3,
            noise: NoiseModel::new(0.75, 16, 5).unwrap(),
            paths: 10,
            center: 0.25,
            width_factor: 1.0,
            amplitudes: vec![1.0],
            stream_tag: 0,
        };
        let r = smoothing_probe(&|_| 1.0, &cfg).unwrap();
        assert!(r.rows.iter().all(|row| row.lip_hat == 0.0 && row.separation > 0.0));
    }

    #[test]
    fn bump_keeps_monotone_base() {
        let base = QuantileField::from_fn(64, |x| 4.0 * x - 1.0).unwrap();
        let nu = bump_perturbation(&base, 0.25, 0.05, 2.0).unwrap();
        let shifted: Vec<f64> = (0..64)
            .map(|i| base.values()[i] + 0.1 * (-0.5 * ((node(i, 64) - 0.25) / 0.05).powi(2)).exp())
            .collect();
        assert_eq!(nu.values(), &shifted[..]);
    }
}
