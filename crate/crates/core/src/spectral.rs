//! Cosine eigenbasis of the Laplacian on the torus, the trace-class noise and
//! the exact per-mode Ornstein-Uhlenbeck update.
//!
//! `e_0 = 1` and `e_k(x) = sqrt(2) cos(2 pi k x)`. On the half-torus grid the
//! sampled basis is orthonormal for the torus average as long as `k < M`, so
//! analysis is a plain projection. The noise loads mode `k` with
//! `(1 v k)^{-lambda}`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quantile::{node, GridFunction};
use crate::rng::NoiseStream;

const SQRT2: f64 = std::f64::consts::SQRT_2;

/// `e_k(x)`.
pub fn basis_eval(k: usize, x: f64) -> f64 {
    if k == 0 {
        1.0
    } else {
        SQRT2 * (std::f64::consts::TAU * k as f64 * x).cos()
    }
}

/// Eigenvalue `(2 pi k)^2` of `-Delta` on mode `k`.
#[inline]
pub fn eigenvalue(k: usize) -> f64 {
    let w = std::f64::consts::TAU * k as f64;
    w * w
}

/// Coefficients `a_0..a_K` in the cosine basis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralState {
    pub coeffs: Vec<f64>,
}

impl SpectralState {
    pub fn new(coeffs: Vec<f64>) -> Result<Self> {
        if coeffs.is_empty() {
            return Err(Error::Domain("spectral state needs mode 0".into()));
        }
        if coeffs.iter().any(|c| !c.is_finite()) {
            return Err(Error::Domain("non-finite spectral coefficient".into()));
        }
        Ok(Self { coeffs })
    }

    pub fn zeros(num_modes: usize) -> Self {
        Self { coeffs: vec![0.0; num_modes + 1] }
    }

    /// Highest mode index `K`.
    pub fn num_modes(&self) -> usize {
        self.coeffs.len() - 1
    }

    pub fn l2_norm(&self) -> f64 {
        self.coeffs.iter().map(|c| c * c).sum::<f64>().sqrt()
    }
}

/// Precomputed `(K+1) x M` table of sampled basis functions.
#[derive(Clone, Debug)]
pub struct SpectralBasis {
    grid: usize,
    modes: usize,
    table: Vec<f64>,
}

impl SpectralBasis {
    pub fn new(grid: usize, modes: usize) -> Result<Self> {
        if grid == 0 {
            return Err(Error::InvalidParameter("grid size must be at least 1".into()));
        }
        if modes >= grid {
            return Err(Error::Aliasing { modes, grid });
        }
        let mut table = Vec::with_capacity((modes + 1) * grid);
        for k in 0..=modes {
            for i in 0..grid {
                table.push(basis_eval(k, node(i, grid)));
            }
        }
        Ok(Self { grid, modes, table })
    }

    pub fn grid_size(&self) -> usize {
        self.grid
    }

    pub fn num_modes(&self) -> usize {
        self.modes
    }

    #[inline]
    fn row(&self, k: usize) -> &[f64] {
        &self.table[k * self.grid..(k + 1) * self.grid]
    }

    /// `out[k] = (1/M) sum_i values[i] e_k(x_i)`.
    pub fn analyze_into(&self, values: &[f64], out: &mut [f64]) {
        debug_assert_eq!(values.len(), self.grid);
        debug_assert_eq!(out.len(), self.modes + 1);
        let inv = 1.0 / self.grid as f64;
        for (k, o) in out.iter_mut().enumerate() {
            let row = self.row(k);
            let mut s = 0.0;
            for (a, b) in row.iter().zip(values) {
                s += a * b;
            }
            *o = s * inv;
        }
    }

    /// `out[i] = sum_k coeffs[k] e_k(x_i)`.
    pub fn synthesize_into(&self, coeffs: &[f64], out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.grid);
        out.iter_mut().for_each(|o| *o = 0.0);
        for (k, &c) in coeffs.iter().enumerate().take(self.modes + 1) {
            if c == 0.0 {
                continue;
            }
            for (o, b) in out.iter_mut().zip(self.row(k)) {
                *o += c * b;
            }
        }
    }

    pub fn analyze(&self, g: &GridFunction) -> Result<SpectralState> {
        if g.grid_size() != self.grid {
            return Err(Error::Dimension { expected: self.grid, got: g.grid_size() });
        }
        let mut coeffs = vec![0.0; self.modes + 1];
        self.analyze_into(g.values(), &mut coeffs);
        Ok(SpectralState { coeffs })
    }

    pub fn synthesize(&self, s: &SpectralState) -> Result<GridFunction> {
        if s.num_modes() > self.modes {
            return Err(Error::Dimension { expected: self.modes + 1, got: s.coeffs.len() });
        }
        let mut out = vec![0.0; self.grid];
        self.synthesize_into(&s.coeffs, &mut out);
        GridFunction::new(out)
    }
}

/// Cosine analysis of `g` onto modes `0..=num_modes`.
pub fn to_spectral(g: &GridFunction, num_modes: usize) -> Result<SpectralState> {
    SpectralBasis::new(g.grid_size(), num_modes)?.analyze(g)
}

/// Synthesis of `s` on an `m`-node grid.
pub fn from_spectral(s: &SpectralState, m: usize) -> Result<GridFunction> {
    SpectralBasis::new(m, s.num_modes())?.synthesize(s)
}

/// Heat semigroup `e^{t Delta}` applied mode by mode.
pub fn heat_propagate(s: &SpectralState, t: f64) -> Result<SpectralState> {
    if !(t >= 0.0) || !t.is_finite() {
        return Err(Error::Domain(format!("heat propagation time {t} must be >= 0")));
    }
    let coeffs = s
        .coeffs
        .iter()
        .enumerate()
        .map(|(k, c)| c * (-eigenvalue(k) * t).exp())
        .collect();
    Ok(SpectralState { coeffs })
}

/// Parameters of the cosine noise `W = sum_k (1 v k)^{-lambda} e_k B^k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub lambda: f64,
    pub num_modes: usize,
    pub seed: u64,
    /// Multiplier on every mode; `0` gives pure heat flow. Defaults to `1`.
    #[serde(default = "unit")]
    pub amplitude: f64,
}

fn unit() -> f64 {
    1.0
}

impl NoiseModel {
    pub fn new(lambda: f64, num_modes: usize, seed: u64) -> Result<Self> {
        let model = Self { lambda, num_modes, seed, amplitude: 1.0 };
        model.validate()?;
        Ok(model)
    }

    pub fn with_amplitude(mut self, amplitude: f64) -> Result<Self> {
        self.amplitude = amplitude;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.5 && self.lambda < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "lambda = {} is outside the admissible range (1/2, 1)",
                self.lambda
            )));
        }
        if self.num_modes < 1 {
            return Err(Error::InvalidParameter("num_modes must be at least 1".into()));
        }
        if !(self.amplitude >= 0.0) || !self.amplitude.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "noise amplitude {} must be finite and >= 0",
                self.amplitude
            )));
        }
        Ok(())
    }

    /// Loading `(1 v k)^{-lambda}` of mode `k`, times the amplitude.
    pub fn loading(&self, k: usize) -> f64 {
        self.amplitude * (k.max(1) as f64).powf(-self.lambda)
    }
}

/// Per-mode constants of the exact OU step over one mesh interval.
#[derive(Clone, Debug)]
pub struct OuPropagator {
    h: f64,
    decay: Vec<f64>,
    drift_gain: Vec<f64>,
    noise_sd: Vec<f64>,
}

impl OuPropagator {
    pub fn new(noise: &NoiseModel, h: f64) -> Result<Self> {
        noise.validate()?;
        if !(h > 0.0) || !h.is_finite() {
            return Err(Error::Domain(format!("time step {h} must be > 0")));
        }
        let k_max = noise.num_modes;
        let mut decay = Vec::with_capacity(k_max + 1);
        let mut drift_gain = Vec::with_capacity(k_max + 1);
        let mut noise_sd = Vec::with_capacity(k_max + 1);
        for k in 0..=k_max {
            let q = noise.loading(k);
            if k == 0 {
                decay.push(1.0);
                drift_gain.push(h);
                noise_sd.push(q * h.sqrt());
            } else {
                let w = eigenvalue(k);
                decay.push((-w * h).exp());
                drift_gain.push(-(-w * h).exp_m1() / w);
                noise_sd.push(q * (-(-2.0 * w * h).exp_m1() / (2.0 * w)).sqrt());
            }
        }
        Ok(Self { h, decay, drift_gain, noise_sd })
    }

    pub fn step_size(&self) -> f64 {
        self.h
    }

    pub fn num_modes(&self) -> usize {
        self.decay.len() - 1
    }

    pub fn is_noiseless(&self) -> bool {
        self.noise_sd.iter().all(|&s| s == 0.0)
    }

    /// In-place update; `velocity` holds the coefficients of `-V`. The stream
    /// must be positioned at the current step; it is read only when the noise
    /// is non-degenerate.
    pub fn advance(&self, coeffs: &mut [f64], velocity: &[f64], stream: Option<&mut NoiseStream>) {
        for k in 0..coeffs.len() {
            coeffs[k] = self.decay[k] * coeffs[k] + self.drift_gain[k] * velocity[k];
        }
        if let Some(stream) = stream {
            for (c, sd) in coeffs.iter_mut().zip(&self.noise_sd) {
                let z = stream.normal();
                *c += sd * z;
            }
        }
    }
}

/// One exact OU step of every resolved mode.
pub fn ou_step(
    s: &SpectralState,
    drift_coeffs: &SpectralState,
    h: f64,
    noise: &NoiseModel,
    stream: &mut NoiseStream,
) -> Result<SpectralState> {
    let prop = OuPropagator::new(noise, h)?;
    if s.coeffs.len() != prop.num_modes() + 1 {
        return Err(Error::Dimension { expected: prop.num_modes() + 1, got: s.coeffs.len() });
    }
    if drift_coeffs.coeffs.len() != s.coeffs.len() {
        return Err(Error::Dimension { expected: s.coeffs.len(), got: drift_coeffs.coeffs.len() });
    }
    let mut coeffs = s.coeffs.clone();
    let noisy = !prop.is_noiseless();
    prop.advance(&mut coeffs, &drift_coeffs.coeffs, if noisy { Some(stream) } else { None });
    Ok(SpectralState { coeffs })
}

/// Increment of the coefficients of `W` over a time interval `t`: mode `k`
/// is centred Gaussian with variance `(1 v k)^{-2 lambda} t`.
pub fn wiener_increment(noise: &NoiseModel, t: f64, stream: &mut NoiseStream) -> Result<SpectralState> {
    if !(t >= 0.0) {
        return Err(Error::Domain(format!("interval {t} must be >= 0")));
    }
    let coeffs = (0..=noise.num_modes)
        .map(|k| noise.loading(k) * t.sqrt() * stream.normal())
        .collect();
    Ok(SpectralState { coeffs })
}
