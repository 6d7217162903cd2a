//! Running and terminal costs, controlled dynamics and the cost functional.
//!
//! Costs depend on the measure through its quantile field. The built-in
//! families only use the mean, so section evaluations compute it once.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quantile::{rearrange, w2_distance, GridFunction, QuantileField};
use crate::rshe::PathBundle;
use crate::stats::McEstimate;

pub trait CostModel: Send + Sync {
    fn name(&self) -> &str;
    fn f(&self, x: f64, mu: &QuantileField) -> f64;
    fn g(&self, x: f64, mu: &QuantileField) -> f64;
    fn dxf(&self, x: f64, mu: &QuantileField) -> f64;
    fn dxg(&self, x: f64, mu: &QuantileField) -> f64;
    /// Declared joint Lipschitz constant of the derivatives in
    /// `(x, mu)` for the distance `|x - x'| + W_2(mu, mu')`.
    fn lip_const(&self) -> f64;
    /// Declared bound on `|dxf|` and `|dxg|`.
    fn bound_const(&self) -> f64;

    /// `out[i] = dxf(xs[i], mu)`.
    fn dxf_section(&self, xs: &[f64], mu: &QuantileField, out: &mut [f64]) {
        for (o, &x) in out.iter_mut().zip(xs) {
            *o = self.dxf(x, mu);
        }
    }

    /// `out[i] = dxg(xs[i], mu)`.
    fn dxg_section(&self, xs: &[f64], mu: &QuantileField, out: &mut [f64]) {
        for (o, &x) in out.iter_mut().zip(xs) {
            *o = self.dxg(x, mu);
        }
    }

    /// `sum_i f(xs[i], mu)`.
    fn f_sum(&self, xs: &[f64], mu: &QuantileField) -> f64 {
        xs.iter().map(|&x| self.f(x, mu)).sum()
    }

    /// `sum_i g(xs[i], mu)`.
    fn g_sum(&self, xs: &[f64], mu: &QuantileField) -> f64 {
        xs.iter().map(|&x| self.g(x, mu)).sum()
    }
}

/// Families whose measure dependence is through the mean only.
trait MeanCoupled: Send + Sync {
    fn label(&self) -> &str;
    fn f_m(&self, x: f64, m: f64) -> f64;
    fn g_m(&self, x: f64, m: f64) -> f64;
    fn dxf_m(&self, x: f64, m: f64) -> f64;
    fn dxg_m(&self, x: f64, m: f64) -> f64;
    fn lip(&self) -> f64;
    fn bound(&self) -> f64;
}

impl<T: MeanCoupled> CostModel for T {
    fn name(&self) -> &str {
        self.label()
    }
    fn f(&self, x: f64, mu: &QuantileField) -> f64 {
        self.f_m(x, mu.mean())
    }
    fn g(&self, x: f64, mu: &QuantileField) -> f64 {
        self.g_m(x, mu.mean())
    }
    fn dxf(&self, x: f64, mu: &QuantileField) -> f64 {
        self.dxf_m(x, mu.mean())
    }
    fn dxg(&self, x: f64, mu: &QuantileField) -> f64 {
        self.dxg_m(x, mu.mean())
    }
    fn lip_const(&self) -> f64 {
        self.lip()
    }
    fn bound_const(&self) -> f64 {
        self.bound()
    }
    fn dxf_section(&self, xs: &[f64], mu: &QuantileField, out: &mut [f64]) {
        let m = mu.mean();
        for (o, &x) in out.iter_mut().zip(xs) {
            *o = self.dxf_m(x, m);
        }
    }
    fn dxg_section(&self, xs: &[f64], mu: &QuantileField, out: &mut [f64]) {
        let m = mu.mean();
        for (o, &x) in out.iter_mut().zip(xs) {
            *o = self.dxg_m(x, m);
        }
    }
    fn f_sum(&self, xs: &[f64], mu: &QuantileField) -> f64 {
        let m = mu.mean();
        xs.iter().map(|&x| self.f_m(x, m)).sum()
    }
    fn g_sum(&self, xs: &[f64], mu: &QuantileField) -> f64 {
        let m = mu.mean();
        xs.iter().map(|&x| self.g_m(x, m)).sum()
    }
}

/// `ln cosh z` without overflow.
fn ln_cosh(z: f64) -> f64 {
    let a = z.abs();
    a + (-2.0 * a).exp().ln_1p() - std::f64::consts::LN_2
}

/// `dxf = tanh(a x + b m_1)`, `dxg = tanh(c_g x + b_g m_1)`, antiderivatives
/// vanishing at `x = 0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TanhFamily {
    pub a: f64,
    pub b: f64,
    pub c_g: f64,
    pub b_g: f64,
}

pub fn make_tanh_family(a: f64, b: f64, c_g: f64, b_g: f64) -> Result<TanhFamily> {
    if !(a > 0.0) || !(c_g > 0.0) {
        return Err(Error::InvalidParameter(format!("tanh family needs a > 0 and c_g > 0, got a = {a}, c_g = {c_g}")));
    }
    if !b.is_finite() || !b_g.is_finite() || !a.is_finite() || !c_g.is_finite() {
        return Err(Error::InvalidParameter("tanh family parameters must be finite".into()));
    }
    Ok(TanhFamily { a, b, c_g, b_g })
}

impl MeanCoupled for TanhFamily {
    fn label(&self) -> &str {
        "tanh"
    }
    fn f_m(&self, x: f64, m: f64) -> f64 {
        (ln_cosh(self.a * x + self.b * m) - ln_cosh(self.b * m)) / self.a
    }
    fn g_m(&self, x: f64, m: f64) -> f64 {
        (ln_cosh(self.c_g * x + self.b_g * m) - ln_cosh(self.b_g * m)) / self.c_g
    }
    fn dxf_m(&self, x: f64, m: f64) -> f64 {
        (self.a * x + self.b * m).tanh()
    }
    fn dxg_m(&self, x: f64, m: f64) -> f64 {
        (self.c_g * x + self.b_g * m).tanh()
    }
    fn lip(&self) -> f64 {
        self.a.max(self.b.abs()).max(self.c_g).max(self.b_g.abs())
    }
    fn bound(&self) -> f64 {
        1.0
    }
}

/// `dxf = dxg = clamp(a x + b m_1, -clip, clip)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClippedLinearFamily {
    pub a: f64,
    pub b: f64,
    pub clip: f64,
}

pub fn make_clipped_linear_family(a: f64, b: f64, clip: f64) -> Result<ClippedLinearFamily> {
    if !(a > 0.0) || !(clip > 0.0) || !b.is_finite() || !a.is_finite() || !clip.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "clipped-linear family needs a > 0 and clip > 0, got a = {a}, clip = {clip}"
        )));
    }
    Ok(ClippedLinearFamily { a, b, clip })
}

impl ClippedLinearFamily {
    /// Antiderivative of `clamp(z, -c, c)` vanishing at 0.
    fn psi(&self, z: f64) -> f64 {
        let c = self.clip;
        if z.abs() <= c {
            0.5 * z * z
        } else {
            c * z.abs() - 0.5 * c * c
        }
    }
}

impl MeanCoupled for ClippedLinearFamily {
    fn label(&self) -> &str {
        "clipped-linear"
    }
    fn f_m(&self, x: f64, m: f64) -> f64 {
        (self.psi(self.a * x + self.b * m) - self.psi(self.b * m)) / self.a
    }
    fn g_m(&self, x: f64, m: f64) -> f64 {
        self.f_m(x, m)
    }
    fn dxf_m(&self, x: f64, m: f64) -> f64 {
        (self.a * x + self.b * m).clamp(-self.clip, self.clip)
    }
    fn dxg_m(&self, x: f64, m: f64) -> f64 {
        self.dxf_m(x, m)
    }
    fn lip(&self) -> f64 {
        self.a.max(self.b.abs())
    }
    fn bound(&self) -> f64 {
        self.clip
    }
}

/// `dxf = kappa_f`, `dxg = kappa_g`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConstantFamily {
    pub kappa_f: f64,
    pub kappa_g: f64,
}

pub fn make_constant_family(kappa_f: f64, kappa_g: f64) -> Result<ConstantFamily> {
    if !kappa_f.is_finite() || !kappa_g.is_finite() {
        return Err(Error::InvalidParameter("constant family parameters must be finite".into()));
    }
    Ok(ConstantFamily { kappa_f, kappa_g })
}

impl MeanCoupled for ConstantFamily {
    fn label(&self) -> &str {
        "constant"
    }
    fn f_m(&self, x: f64, _m: f64) -> f64 {
        self.kappa_f * x
    }
    fn g_m(&self, x: f64, _m: f64) -> f64 {
        self.kappa_g * x
    }
    fn dxf_m(&self, _x: f64, _m: f64) -> f64 {
        self.kappa_f
    }
    fn dxg_m(&self, _x: f64, _m: f64) -> f64 {
        self.kappa_g
    }
    fn lip(&self) -> f64 {
        0.0
    }
    fn bound(&self) -> f64 {
        self.kappa_f.abs().max(self.kappa_g.abs())
    }
}

/// Result of the sampled structural checks on a cost model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostCheckReport {
    pub max_abs_derivative: f64,
    pub monotonicity_violations: usize,
    pub max_lipschitz_ratio: f64,
    /// `max |f| / (1 + x^2 + m_2)^{1/2}` and the same for `g`.
    pub max_growth_ratio: f64,
    pub samples: usize,
}

fn random_field(rng: &mut ChaCha8Rng, m: usize, scale: f64) -> QuantileField {
    let shift = rng.gen_range(-scale..scale);
    let spread = rng.gen_range(0.0..scale);
    let v: Vec<f64> = (0..m).map(|_| shift + spread * rng.gen_range(-1.0..1.0)).collect();
    QuantileField::from_unsorted(v).expect("finite samples")
}

/// Samples bounds, x-monotonicity, the Lipschitz ratio and the growth of
/// `f` and `g` on `samples` random points with measures on `m` nodes.
pub fn check_cost_model(model: &dyn CostModel, samples: usize, m: usize, seed: u64) -> CostCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = CostCheckReport {
        max_abs_derivative: 0.0,
        monotonicity_violations: 0,
        max_lipschitz_ratio: 0.0,
        max_growth_ratio: 0.0,
        samples,
    };
    for _ in 0..samples {
        let mu = random_field(&mut rng, m, 3.0);
        let nu = random_field(&mut rng, m, 3.0);
        let x = rng.gen_range(-10.0..10.0);
        let y = x + rng.gen_range(0.0..2.0);
        for d in [model.dxf(x, &mu), model.dxg(x, &mu)] {
            report.max_abs_derivative = report.max_abs_derivative.max(d.abs());
        }
        if model.dxf(y, &mu) < model.dxf(x, &mu) || model.dxg(y, &mu) < model.dxg(x, &mu) {
            report.monotonicity_violations += 1;
        }
        let dist = (y - x).abs() + w2_distance(&mu, &nu).expect("same grid");
        if dist > 0.0 {
            let rf = (model.dxf(x, &mu) - model.dxf(y, &nu)).abs() / dist;
            let rg = (model.dxg(x, &mu) - model.dxg(y, &nu)).abs() / dist;
            report.max_lipschitz_ratio = report.max_lipschitz_ratio.max(rf).max(rg);
        }
        let scale = (1.0 + x * x + mu.second_moment()).sqrt();
        let growth = model.f(x, &mu).abs().max(model.g(x, &mu).abs()) / scale;
        report.max_growth_ratio = report.max_growth_ratio.max(growth);
    }
    report
}

/// Controls `gamma[p][n][i]` on a path ensemble, stored flat.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlPath {
    num_paths: usize,
    num_steps: usize,
    grid: usize,
    values: Vec<f64>,
}

impl ControlPath {
    pub fn new(num_paths: usize, num_steps: usize, grid: usize, values: Vec<f64>) -> Result<Self> {
        let expected = num_paths * num_steps * grid;
        if values.len() != expected {
            return Err(Error::Dimension { expected, got: values.len() });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("control values must be finite".into()));
        }
        Ok(Self { num_paths, num_steps, grid, values })
    }

    pub fn zeros(num_paths: usize, num_steps: usize, grid: usize) -> Self {
        Self { num_paths, num_steps, grid, values: vec![0.0; num_paths * num_steps * grid] }
    }

    pub fn from_fn(
        num_paths: usize,
        num_steps: usize,
        grid: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut values = Vec::with_capacity(num_paths * num_steps * grid);
        for p in 0..num_paths {
            for n in 0..num_steps {
                for i in 0..grid {
                    values.push(f(p, n, i));
                }
            }
        }
        Self::new(num_paths, num_steps, grid, values)
    }

    pub fn num_paths(&self) -> usize {
        self.num_paths
    }

    pub fn num_steps(&self) -> usize {
        self.num_steps
    }

    pub fn grid_size(&self) -> usize {
        self.grid
    }

    /// Control section of path `p` on step `n`.
    pub fn section(&self, p: usize, n: usize) -> &[f64] {
        let start = (p * self.num_steps + n) * self.grid;
        &self.values[start..start + self.grid]
    }

    /// `a * self + b * other`.
    pub fn combine(&self, a: f64, other: &ControlPath, b: f64) -> Result<ControlPath> {
        if self.values.len() != other.values.len() {
            return Err(Error::Dimension { expected: self.values.len(), got: other.values.len() });
        }
        let values = self.values.iter().zip(&other.values).map(|(x, y)| a * x + b * y).collect();
        Self::new(self.num_paths, self.num_steps, self.grid, values)
    }

    /// `Gamma_n = sum_{k < n} gamma_k h`, for `n = 0..=num_steps`.
    pub fn integrated(&self, p: usize, h: f64) -> Vec<Vec<f64>> {
        let mut out = Vec::with_capacity(self.num_steps + 1);
        let mut acc = vec![0.0; self.grid];
        out.push(acc.clone());
        for n in 0..self.num_steps {
            for (a, g) in acc.iter_mut().zip(self.section(p, n)) {
                *a += g * h;
            }
            out.push(acc.clone());
        }
        out
    }

    /// The control `-V` recorded in a bundle.
    pub fn from_bundle_drift(env: &PathBundle) -> Result<Self> {
        let drift = env
            .drift
            .as_ref()
            .ok_or_else(|| Error::InvalidParameter("bundle has no recorded drift".into()))?;
        Self::from_fn(env.num_paths(), env.num_steps(), env.grid_size, |p, n, i| -drift[p][n].values()[i])
    }
}

pub(crate) fn check_shapes(gamma: &ControlPath, env: &PathBundle) -> Result<()> {
    if gamma.num_paths != env.num_paths() {
        return Err(Error::Dimension { expected: env.num_paths(), got: gamma.num_paths });
    }
    if gamma.num_steps != env.num_steps() {
        return Err(Error::Dimension { expected: env.num_steps(), got: gamma.num_steps });
    }
    if gamma.grid != env.grid_size {
        return Err(Error::Dimension { expected: env.grid_size, got: gamma.grid });
    }
    Ok(())
}

/// Monte Carlo estimate of
/// `J = E (1/M) sum_i [ g(Gamma_N, mu_N) + sum_n (f(Gamma_n, mu_n) + gamma_n^2 / 2) h ]`
/// with `Gamma_n = X_n + sum_{k<n} (gamma_k + V_k) h` along the bundle.
pub fn cost_j(gamma: &ControlPath, env: &PathBundle, model: &dyn CostModel) -> Result<McEstimate> {
    Ok(McEstimate::from_samples(&cost_per_path(gamma, env, model)?))
}

/// `J(gamma_1) - J(gamma_2)` on the same paths, with the paired standard error.
pub fn cost_j_difference(
    gamma_1: &ControlPath,
    gamma_2: &ControlPath,
    env: &PathBundle,
    model: &dyn CostModel,
) -> Result<McEstimate> {
    let a = cost_per_path(gamma_1, env, model)?;
    let b = cost_per_path(gamma_2, env, model)?;
    let diff: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
    Ok(McEstimate::from_samples(&diff))
}

fn cost_per_path(gamma: &ControlPath, env: &PathBundle, model: &dyn CostModel) -> Result<Vec<f64>> {
    check_shapes(gamma, env)?;
    let drift = env
        .drift
        .as_ref()
        .ok_or_else(|| Error::InvalidParameter("bundle has no recorded drift; simulate with record_drift".into()))?;
    let h = env.h;
    let m = env.grid_size as f64;
    let per_path: Vec<f64> = (0..env.num_paths())
        .map(|p| {
            let path = &env.paths[p];
            let mut offset = vec![0.0; env.grid_size];
            let mut running = 0.0;
            let mut position = vec![0.0; env.grid_size];
            for n in 0..env.num_steps() {
                for ((z, x), o) in position.iter_mut().zip(path[n].values()).zip(&offset) {
                    *z = x + o;
                }
                let ctrl = gamma.section(p, n);
                let kinetic: f64 = ctrl.iter().map(|c| 0.5 * c * c).sum();
                running += (model.f_sum(&position, &path[n]) + kinetic) * h;
                for ((o, c), v) in offset.iter_mut().zip(ctrl).zip(drift[p][n].values()) {
                    *o += (c + v) * h;
                }
            }
            let last = env.num_steps();
            for ((z, x), o) in position.iter_mut().zip(path[last].values()).zip(&offset) {
                *z = x + o;
            }
            (model.g_sum(&position, &path[last]) + running) / m
        })
        .collect();
    Ok(per_path)
}

/// Sampled displacement-monotonicity statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DisplacementReport {
    pub min_f: f64,
    pub mean_f: f64,
    pub min_g: f64,
    pub mean_g: f64,
    pub pairs: usize,
    pub monotone: bool,
}

/// Evaluates `E[(X - X')(dxf(X, L(X)) - dxf(X', L(X')))]` and the same for
/// `g` on coupled pairs of grid random variables. Half of the pairs are
/// independent draws, half are near-translations (the worst case for a
/// mean coupling). Values stay in `[-range, range]`.
pub fn displacement_check(model: &dyn CostModel, n_pairs: usize, m: usize, range: f64, seed: u64) -> DisplacementReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fs = Vec::with_capacity(n_pairs);
    let mut gs = Vec::with_capacity(n_pairs);
    for k in 0..n_pairs {
        let x: Vec<f64> = (0..m).map(|_| rng.gen_range(-range..range)).collect();
        let y: Vec<f64> = if k % 2 == 0 {
            (0..m).map(|_| rng.gen_range(-range..range)).collect()
        } else {
            let shift = rng.gen_range(-range..range) * 0.5;
            let jitter = rng.gen_range(0.0..0.1) * range;
            x.iter()
                .map(|v| (v + shift + jitter * rng.gen_range(-1.0..1.0)).clamp(-range, range))
                .collect()
        };
        let law_x = rearrange(&GridFunction::new(x.clone()).expect("finite"));
        let law_y = rearrange(&GridFunction::new(y.clone()).expect("finite"));
        let mut fsum = 0.0;
        let mut gsum = 0.0;
        for (a, b) in x.iter().zip(&y) {
            fsum += (a - b) * (model.dxf(*a, &law_x) - model.dxf(*b, &law_y));
            gsum += (a - b) * (model.dxg(*a, &law_x) - model.dxg(*b, &law_y));
        }
        fs.push(fsum / m as f64);
        gs.push(gsum / m as f64);
    }
    let min = |v: &[f64]| v.iter().cloned().fold(f64::INFINITY, f64::min);
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    let (min_f, min_g) = (min(&fs), min(&gs));
    DisplacementReport {
        min_f,
        mean_f: mean(&fs),
        min_g,
        mean_g: mean(&gs),
        pairs: n_pairs,
        monotone: min_f >= -1e-9 && min_g >= -1e-9,
    }
}
