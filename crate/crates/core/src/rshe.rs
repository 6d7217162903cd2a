//! Split-step scheme for the rearranged stochastic heat equation.
//!
//! One step from `X_n` with frozen drift section `V_n`: project `X_n` and
//! `-V_n` on the resolved cosine modes, propagate every mode exactly over
//! `h` (heat, drift and noise), synthesise, and sort. Modes above `K` are
//! dropped. Without forcing the step is the Brenier scheme
//! `X_{n+1} = sort(X_n - h V_n)`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{DriftField, ZeroField};
use crate::quantile::{quantile_from_measure, rearrange_in_place, DiscreteMeasure, GridFunction, QuantileField};
use crate::rng::{stream_id, NoiseStream};
use crate::spectral::{NoiseModel, OuPropagator, SpectralBasis};
use crate::stats::McEstimate;

/// Linear part of the dynamics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Forcing {
    /// Heat flow plus cosine noise (noise amplitude may be zero).
    Rshe(NoiseModel),
    /// No Laplacian and no noise: transport by the drift, then sort.
    Transport,
}

impl Forcing {
    pub fn noise(&self) -> Option<&NoiseModel> {
        match self {
            Forcing::Rshe(n) => Some(n),
            Forcing::Transport => None,
        }
    }

    pub fn seed(&self) -> u64 {
        self.noise().map_or(0, |n| n.seed)
    }

    /// Whether two paths from the same start can differ.
    pub fn is_random(&self) -> bool {
        self.noise().is_some_and(|n| n.amplitude > 0.0)
    }
}

/// Pre-/post-rearrangement states of one step; the reflection increment is
/// `post - pre` node by node.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RsheStepRecord {
    pub pre_rearrange: GridFunction,
    pub post_rearrange: QuantileField,
    pub reflection_increment: Vec<f64>,
    pub time: f64,
}

impl RsheStepRecord {
    fn from_pre(pre: Vec<f64>, post: &QuantileField, time: f64) -> Self {
        let reflection_increment = post.values().iter().zip(&pre).map(|(a, b)| a - b).collect();
        Self {
            pre_rearrange: GridFunction::from_vec_unchecked(pre),
            post_rearrange: post.clone(),
            reflection_increment,
            time,
        }
    }
}

enum Linear {
    Spectral { basis: SpectralBasis, prop: OuPropagator, noisy: bool, seed: u64 },
    Transport,
}

/// Reusable one-step propagator for a fixed grid, forcing and mesh.
pub struct Stepper {
    grid: usize,
    h: f64,
    linear: Linear,
}

impl Stepper {
    pub fn new(grid: usize, forcing: &Forcing, h: f64) -> Result<Self> {
        if !(h > 0.0) || !h.is_finite() {
            return Err(Error::Domain(format!("time step {h} must be > 0")));
        }
        let linear = match forcing {
            Forcing::Rshe(noise) => {
                let basis = SpectralBasis::new(grid, noise.num_modes)?;
                let prop = OuPropagator::new(noise, h)?;
                Linear::Spectral { basis, noisy: !prop.is_noiseless(), prop, seed: noise.seed }
            }
            Forcing::Transport => Linear::Transport,
        };
        Ok(Self { grid, h, linear })
    }

    pub fn grid_size(&self) -> usize {
        self.grid
    }

    pub fn step_size(&self) -> f64 {
        self.h
    }

    /// Gaussian stream for a path, or `None` when the step is deterministic.
    pub fn stream(&self, id: u64) -> Option<NoiseStream> {
        match &self.linear {
            Linear::Spectral { noisy: true, seed, basis, .. } => {
                Some(NoiseStream::new(*seed, id, basis.num_modes() + 1))
            }
            _ => None,
        }
    }

    /// Pre-rearrangement state after one step. `step` is the global step
    /// index used to address the noise stream.
    pub fn linear_step(
        &self,
        x: &[f64],
        drift: &[f64],
        stream: Option<&mut NoiseStream>,
        step: u64,
    ) -> Vec<f64> {
        match &self.linear {
            Linear::Spectral { basis, prop, .. } => {
                let k = basis.num_modes() + 1;
                let mut coeffs = vec![0.0; k];
                let mut vel = vec![0.0; k];
                basis.analyze_into(x, &mut coeffs);
                basis.analyze_into(drift, &mut vel);
                vel.iter_mut().for_each(|v| *v = -*v);
                let mut stream = stream;
                if let Some(s) = stream.as_mut() {
                    s.seek(step);
                }
                prop.advance(&mut coeffs, &vel, stream);
                let mut out = vec![0.0; self.grid];
                basis.synthesize_into(&coeffs, &mut out);
                out
            }
            Linear::Transport => x.iter().zip(drift).map(|(a, v)| a - self.h * v).collect(),
        }
    }

    /// Full step, returning the pre-rearrangement values and the new state.
    pub fn step(
        &self,
        x: &QuantileField,
        drift: &GridFunction,
        stream: Option<&mut NoiseStream>,
        step: u64,
    ) -> Result<(Vec<f64>, QuantileField)> {
        if x.grid_size() != self.grid {
            return Err(Error::Dimension { expected: self.grid, got: x.grid_size() });
        }
        if drift.grid_size() != self.grid {
            return Err(Error::Dimension { expected: self.grid, got: drift.grid_size() });
        }
        let pre = self.linear_step(x.values(), drift.values(), stream, step);
        if pre.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("non-finite state after step {step}")));
        }
        let mut post = pre.clone();
        rearrange_in_place(&mut post);
        Ok((pre, QuantileField::from_sorted_unchecked(post)))
    }
}

/// One step of the scheme with a stand-alone propagator.
pub fn rshe_step(
    x: &QuantileField,
    drift_section: &GridFunction,
    h: f64,
    noise: &NoiseModel,
    stream: &mut NoiseStream,
    step: u64,
) -> Result<RsheStepRecord> {
    let stepper = Stepper::new(x.grid_size(), &Forcing::Rshe(noise.clone()), h)?;
    let (pre, post) = stepper.step(x, drift_section, Some(stream), step)?;
    Ok(RsheStepRecord::from_pre(pre, &post, (step + 1) as f64 * h))
}

/// Brenier step `sort(x - h V)`.
pub fn deterministic_step(x: &QuantileField, drift_section: &GridFunction, h: f64) -> Result<QuantileField> {
    Stepper::new(x.grid_size(), &Forcing::Transport, h)?
        .step(x, drift_section, None, 0)
        .map(|(_, post)| post)
}

/// Number of mesh steps covering `duration`.
pub fn mesh_steps(duration: f64, h: f64) -> Result<usize> {
    if !(h > 0.0) || !(duration >= 0.0) {
        return Err(Error::Domain(format!("need h > 0 and duration >= 0, got h = {h}, T = {duration}")));
    }
    let ratio = duration / h;
    let n = ratio.round();
    if (ratio - n).abs() > 1e-9 * ratio.max(1.0) {
        return Err(Error::InvalidParameter(format!(
            "time step {h} does not divide the horizon {duration}"
        )));
    }
    Ok(n as usize)
}

/// How to run an ensemble.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulationSpec {
    pub start_time: f64,
    /// Global index of the first step (addresses the noise counters).
    pub first_step: u64,
    pub steps: usize,
    pub h: f64,
    pub num_paths: usize,
    pub forcing: Forcing,
    /// Path `p` uses stream `stream_id([stream_tag, p])`.
    pub stream_tag: u64,
    pub record_steps: bool,
    pub record_drift: bool,
}

impl SimulationSpec {
    pub fn new(horizon: f64, h: f64, num_paths: usize, forcing: Forcing) -> Result<Self> {
        Ok(Self {
            start_time: 0.0,
            first_step: 0,
            steps: mesh_steps(horizon, h)?,
            h,
            num_paths,
            forcing,
            stream_tag: 0,
            record_steps: false,
            record_drift: false,
        })
    }

    pub fn time(&self, n: usize) -> f64 {
        self.start_time + n as f64 * self.h
    }

    pub fn path_stream(&self, p: usize) -> u64 {
        stream_id(&[self.stream_tag, p as u64])
    }
}

/// Ensemble of trajectories sharing mesh, grid and drift.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathBundle {
    pub times: Vec<f64>,
    pub h: f64,
    pub first_step: u64,
    pub grid_size: usize,
    pub num_modes: usize,
    pub lambda: Option<f64>,
    pub seed: u64,
    pub stream_ids: Vec<u64>,
    /// `paths[p][n]` is the state at `times[n]`.
    pub paths: Vec<Vec<QuantileField>>,
    /// `records[p][n]` describes the step from `times[n]` to `times[n+1]`.
    pub records: Option<Vec<Vec<RsheStepRecord>>>,
    /// `drift[p][n]` is the section used on the step from `times[n]`.
    pub drift: Option<Vec<Vec<GridFunction>>>,
}

impl PathBundle {
    pub fn num_paths(&self) -> usize {
        self.paths.len()
    }

    pub fn num_steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn horizon(&self) -> f64 {
        self.times[self.times.len() - 1]
    }

    /// Index of the mesh point nearest to `t`.
    pub fn time_index(&self, t: f64) -> usize {
        let n = ((t - self.times[0]) / self.h).round();
        (n.max(0.0) as usize).min(self.num_steps())
    }
}

struct PathOutput {
    states: Vec<QuantileField>,
    records: Option<Vec<RsheStepRecord>>,
    drift: Option<Vec<GridFunction>>,
}

fn run_one(
    x0: &QuantileField,
    drift: &dyn DriftField,
    stepper: &Stepper,
    spec: &SimulationSpec,
    p: usize,
) -> Result<PathOutput> {
    let mut stream = stepper.stream(spec.path_stream(p));
    let mut states = Vec::with_capacity(spec.steps + 1);
    let mut records = spec.record_steps.then(|| Vec::with_capacity(spec.steps));
    let mut sections = spec.record_drift.then(|| Vec::with_capacity(spec.steps));
    states.push(x0.clone());
    for n in 0..spec.steps {
        let t = spec.time(n);
        let x = &states[n];
        let v = drift.eval(t, x).map_err(|e| Error::Drift { path: p, time: t, source: Box::new(e) })?;
        let (pre, post) = stepper.step(x, &v, stream.as_mut(), spec.first_step + n as u64)?;
        if let Some(r) = records.as_mut() {
            r.push(RsheStepRecord::from_pre(pre, &post, spec.time(n + 1)));
        }
        if let Some(s) = sections.as_mut() {
            s.push(v);
        }
        states.push(post);
    }
    Ok(PathOutput { states, records, drift: sections })
}

/// Runs `spec.num_paths` trajectories from `x0` in parallel.
pub fn simulate_with(x0: &QuantileField, drift: &dyn DriftField, spec: &SimulationSpec) -> Result<PathBundle> {
    if spec.num_paths == 0 {
        return Err(Error::InvalidParameter("need at least one path".into()));
    }
    let stepper = Stepper::new(x0.grid_size(), &spec.forcing, spec.h)?;
    let outputs: Vec<PathOutput> = (0..spec.num_paths)
        .into_par_iter()
        .map(|p| run_one(x0, drift, &stepper, spec, p))
        .collect::<Result<_>>()?;
    let mut paths = Vec::with_capacity(outputs.len());
    let mut records = spec.record_steps.then(Vec::new);
    let mut sections = spec.record_drift.then(Vec::new);
    for out in outputs {
        paths.push(out.states);
        if let (Some(all), Some(r)) = (records.as_mut(), out.records) {
            all.push(r);
        }
        if let (Some(all), Some(s)) = (sections.as_mut(), out.drift) {
            all.push(s);
        }
    }
    let noise = spec.forcing.noise();
    Ok(PathBundle {
        times: (0..=spec.steps).map(|n| spec.time(n)).collect(),
        h: spec.h,
        first_step: spec.first_step,
        grid_size: x0.grid_size(),
        num_modes: noise.map_or(0, |n| n.num_modes),
        lambda: noise.map(|n| n.lambda),
        seed: spec.forcing.seed(),
        stream_ids: (0..spec.num_paths).map(|p| spec.path_stream(p)).collect(),
        paths,
        records,
        drift: sections,
    })
}

/// `N` trajectories of the RSHE with drift `V` on `[0, T]`.
pub fn simulate(
    x0: &QuantileField,
    drift: &dyn DriftField,
    horizon: f64,
    h: f64,
    num_paths: usize,
    noise: &NoiseModel,
) -> Result<PathBundle> {
    let spec = SimulationSpec::new(horizon, h, num_paths, Forcing::Rshe(noise.clone()))?;
    simulate_with(x0, drift, &spec)
}

/// `N` trajectories of the driftless process `X^0`.
pub fn simulate_driftless(
    x0: &QuantileField,
    horizon: f64,
    h: f64,
    num_paths: usize,
    noise: &NoiseModel,
) -> Result<PathBundle> {
    simulate(x0, &ZeroField, horizon, h, num_paths, noise)
}

/// Monte Carlo estimate of `P^0_t phi (mu) = E[phi(X^0_t)]` with `X^0_0` the
/// quantile field of `mu` on `m` nodes. Path `p` uses stream
/// `stream_id([stream_tag, p])`, so two calls with the same tag share noise.
#[allow(clippy::too_many_arguments)]
pub fn semigroup_apply(
    phi: &(dyn Fn(&QuantileField) -> f64 + Sync),
    t: f64,
    mu: &DiscreteMeasure,
    m: usize,
    num_paths: usize,
    h: f64,
    noise: &NoiseModel,
    stream_tag: u64,
) -> Result<McEstimate> {
    let x0 = quantile_from_measure(mu, m)?;
    semigroup_apply_field(phi, t, &x0, num_paths, h, noise, stream_tag)
}

/// As [`semigroup_apply`], starting from a quantile field.
pub fn semigroup_apply_field(
    phi: &(dyn Fn(&QuantileField) -> f64 + Sync),
    t: f64,
    x0: &QuantileField,
    num_paths: usize,
    h: f64,
    noise: &NoiseModel,
    stream_tag: u64,
) -> Result<McEstimate> {
    let steps = mesh_steps(t, h)?;
    if steps == 0 {
        return Ok(McEstimate::exact(phi(x0)));
    }
    let stepper = Stepper::new(x0.grid_size(), &Forcing::Rshe(noise.clone()), h)?;
    let zero = GridFunction::zeros(x0.grid_size());
    let values: Vec<f64> = (0..num_paths)
        .into_par_iter()
        .map(|p| {
            let mut stream = stepper.stream(stream_id(&[stream_tag, p as u64]));
            let mut x = x0.clone();
            for n in 0..steps {
                x = stepper.step(&x, &zero, stream.as_mut(), n as u64)?.1;
            }
            Ok(phi(&x))
        })
        .collect::<Result<_>>()?;
    Ok(McEstimate::from_samples(&values))
}

/// Ensemble average over paths of `sum_n <post_n, post_n - pre_n>`.
pub fn reflection_orthogonality(records: &[Vec<RsheStepRecord>]) -> Result<f64> {
    if records.is_empty() || records.iter().all(|r| r.is_empty()) {
        return Err(Error::InvalidParameter("no step records".into()));
    }
    let per_path: Vec<f64> = records
        .iter()
        .map(|path| {
            path.iter()
                .map(|r| {
                    let m = r.reflection_increment.len() as f64;
                    r.post_rearrange
                        .values()
                        .iter()
                        .zip(&r.reflection_increment)
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
                        / m
                })
                .sum::<f64>()
        })
        .collect();
    Ok(per_path.iter().sum::<f64>() / per_path.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::TimeField;
    use crate::quantile::{node, rearrange};
    use crate::spectral::{basis_eval, from_spectral, heat_propagate, to_spectral};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noiseless(k: usize) -> NoiseModel {
        NoiseModel::new(0.75, k, 1).unwrap().with_amplitude(0.0).unwrap()
    }

    fn smooth_monotone(rng: &mut ChaCha8Rng, m: usize, k: usize) -> QuantileField {
        // -c_1 e_1 is increasing on [0, 1/2]; since |sin(j t)| <= j sin(t) there,
        // higher modes with sum j^2 |c_j| < c_1 keep the derivative positive
        let c1 = rng.gen_range(0.5..2.0);
        let mut coeffs = vec![rng.gen_range(-1.0..1.0), -c1];
        for j in 2..=k {
            coeffs.push(rng.gen_range(-1.0..1.0) * c1 / (2.0 * (j * j * k) as f64));
        }
        let v = (0..m)
            .map(|i| {
                let x = node(i, m);
                coeffs.iter().enumerate().map(|(j, c)| c * basis_eval(j, x)).sum::<f64>()
            })
            .collect();
        QuantileField::new(v).unwrap()
    }

    #[test]
    fn constant_state_is_fixed() {
        let x = QuantileField::constant(16, 0.7).unwrap();
        let mut s = NoiseStream::new(0, 0, 5);
        let r = rshe_step(&x, &GridFunction::zeros(16), 1e-3, &noiseless(4), &mut s, 0).unwrap();
        for v in r.post_rearrange.values() {
            assert!((v - 0.7).abs() < 1e-14);
        }
    }

    #[test]
    fn heat_flow_needs_no_sort() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (m, k) = (64, 12);
        for _ in 0..100 {
            let x = smooth_monotone(&mut rng, m, k);
            let mut s = NoiseStream::new(0, 0, k + 1);
            let r = rshe_step(&x, &GridFunction::zeros(m), 2e-3, &noiseless(k), &mut s, 0).unwrap();
            assert_eq!(r.pre_rearrange.values(), r.post_rearrange.values());
            let heat = from_spectral(&heat_propagate(&to_spectral(&x.to_grid(), k).unwrap(), 2e-3).unwrap(), m).unwrap();
            for (a, b) in heat.values().iter().zip(r.post_rearrange.values()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn noisy_step_sorts_and_keeps_norm() {
        let noise = NoiseModel::new(0.75, 16, 3).unwrap();
        let x = QuantileField::from_fn(64, |x| if x < 0.25 { -1.0 } else { 1.0 }).unwrap();
        let mut s = NoiseStream::new(3, 9, 17);
        let mut state = x;
        for step in 0..20 {
            let r = rshe_step(&state, &GridFunction::zeros(64), 1e-3, &noise, &mut s, step).unwrap();
            let mut oracle = r.pre_rearrange.values().to_vec();
            oracle.sort_by(|a, b| a.partial_cmp(b).unwrap());
            assert_eq!(r.post_rearrange.values(), oracle.as_slice());
            let sq = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>();
            assert_eq!(sq(r.pre_rearrange.values()).to_bits(), {
                let mut pre_sorted: Vec<f64> = r.pre_rearrange.values().iter().map(|a| a * a).collect();
                pre_sorted.sort_by(f64::total_cmp);
                let mut post_sorted: Vec<f64> = r.post_rearrange.values().iter().map(|a| a * a).collect();
                post_sorted.sort_by(f64::total_cmp);
                assert_eq!(pre_sorted, post_sorted);
                sq(r.pre_rearrange.values()).to_bits()
            });
            state = r.post_rearrange;
        }
    }

    #[test]
    fn brenier_step_examples() {
        let x = QuantileField::new(vec![0.0, 1.0, 2.0]).unwrap();
        assert_eq!(deterministic_step(&x, &GridFunction::zeros(3), 0.1).unwrap(), x);
        let c = GridFunction::constant(3, 2.0).unwrap();
        let out = deterministic_step(&x, &c, 0.1).unwrap();
        for (a, b) in out.values().iter().zip(x.values()) {
            assert!((a - (b - 0.2)).abs() < 1e-15);
        }
        let crossing = GridFunction::new(vec![-30.0, 0.0, 30.0]).unwrap();
        let out = deterministic_step(&x, &crossing, 0.1).unwrap();
        let euler = GridFunction::new(vec![3.0, 1.0, -1.0]).unwrap();
        assert_eq!(out, rearrange(&euler));
    }

    #[test]
    fn two_point_reflection() {
        let rec = RsheStepRecord::from_pre(vec![1.0, 0.0], &QuantileField::new(vec![0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(rec.reflection_increment, vec![-1.0, 1.0]);
        // <post, dEta> = (1/2)(0 * -1 + 1 * 1)
        assert_eq!(reflection_orthogonality(&[vec![rec]]).unwrap(), 0.5);
    }

    #[test]
    fn no_reflection_without_crossings() {
        let x0 = QuantileField::from_fn(32, |x| x).unwrap();
        let mut spec = SimulationSpec::new(0.02, 1e-3, 2, Forcing::Rshe(noiseless(8))).unwrap();
        spec.record_steps = true;
        let b = simulate_with(&x0, &TimeField::constant(0.3), &spec).unwrap();
        let r = reflection_orthogonality(b.records.as_ref().unwrap()).unwrap();
        assert!(r.abs() < 1e-13, "{r}");
    }

    #[test]
    fn pure_heat_trajectory_and_constant_drift() {
        let x0 = QuantileField::from_fn(32, |x| (x - 0.25) * 4.0).unwrap();
        let b = simulate_driftless(&x0, 0.01, 1e-3, 1, &noiseless(8)).unwrap();
        let direct = from_spectral(&heat_propagate(&to_spectral(&x0.to_grid(), 8).unwrap(), 0.01).unwrap(), 32).unwrap();
        for (a, c) in b.paths[0][10].values().iter().zip(direct.values()) {
            assert!((a - c).abs() < 1e-12);
        }
        // mode 0 performs dA = -c dt + dB^0
        let noise = NoiseModel::new(0.75, 8, 11).unwrap();
        let b = simulate(&x0, &TimeField::constant(1.5), 0.2, 1e-2, 4000, &noise).unwrap();
        let means: Vec<f64> = b.paths.iter().map(|p| p[20].mean() - p[0].mean()).collect();
        let est = McEstimate::from_samples(&means);
        assert!((est.mean + 0.3).abs() < 4.0 * est.stderr, "{est:?}");
        assert!((est.stderr * (4000f64).sqrt() - 0.2f64.sqrt()).abs() < 0.05);
    }

    #[test]
    fn bundles_reproduce_across_pools() {
        let x0 = QuantileField::from_fn(32, |x| if x < 0.25 { -1.0 } else { 1.0 }).unwrap();
        let noise = NoiseModel::new(0.75, 8, 99).unwrap();
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| simulate_driftless(&x0, 0.01, 1e-3, 7, &noise).unwrap())
        };
        assert_eq!(run(1), run(3));
    }

    #[test]
    fn semigroup_examples() {
        let mu = DiscreteMeasure::new(vec![(-1.0, 0.5), (1.0, 0.5)]).unwrap();
        let noise = NoiseModel::new(0.75, 8, 4).unwrap();
        let clipped_mean = |q: &QuantileField| q.mean().clamp(-1.0, 1.0);
        let at0 = semigroup_apply(&clipped_mean, 0.0, &mu, 32, 100, 1e-3, &noise, 0).unwrap();
        assert_eq!(at0, McEstimate::exact(0.0));
        let one = semigroup_apply(&|_| 1.0, 0.01, &mu, 32, 50, 1e-3, &noise, 0).unwrap();
        assert_eq!((one.mean, one.stderr), (1.0, 0.0));
        let shifted = DiscreteMeasure::new(vec![(-0.5, 0.5), (1.5, 0.5)]).unwrap();
        let gaps: Vec<f64> = [0.016, 0.004, 0.001]
            .iter()
            .map(|&t| {
                let e = semigroup_apply(&clipped_mean, t, &shifted, 32, 400, 1e-3, &noise, 1).unwrap();
                (e.mean - 0.5).abs()
            })
            .collect();
        assert!(gaps[0] > gaps[2], "{gaps:?}");
    }

    #[test]
    fn drift_errors_carry_context() {
        struct Failing;
        impl DriftField for Failing {
            fn eval(&self, t: f64, _: &QuantileField) -> Result<GridFunction> {
                if t > 0.0025 {
                    Err(Error::Numerical("boom".into()))
                } else {
                    Ok(GridFunction::zeros(8))
                }
            }
            fn sup_bound(&self) -> f64 {
                0.0
            }
            fn lipschitz(&self) -> f64 {
                0.0
            }
        }
        let x0 = QuantileField::constant(8, 0.0).unwrap();
        let err = simulate(&x0, &Failing, 0.01, 1e-3, 2, &noiseless(2)).unwrap_err();
        match err {
            Error::Drift { time, .. } => assert!((time - 0.003).abs() < 1e-12),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn mesh_divisibility() {
        assert_eq!(mesh_steps(0.5, 1e-3).unwrap(), 500);
        assert!(mesh_steps(0.5, 0.3).is_err());
    }
}
