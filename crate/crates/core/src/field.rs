//! Drift fields `V(t, x, mu)`.
//!
//! A field returns, for a time and a measure (given by its quantile field),
//! the section `x -> V(t, x, mu)` on the half-torus grid. Sections are
//! non-decreasing in `x`.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quantile::{rearrange, w2_distance, GridFunction, QuantileField};

pub trait DriftField: Send + Sync {
    /// Section `x -> V(t, x, mu)` on the grid of `mu`.
    fn eval(&self, t: f64, mu: &QuantileField) -> Result<GridFunction>;

    /// Declared bound on `|V|`.
    fn sup_bound(&self) -> f64;

    /// Declared `L^2`-Lipschitz constant in the measure argument.
    fn lipschitz(&self) -> f64;
}

/// `V = 0`.
#[derive(Clone, Copy, Debug, Default)]
pub struct ZeroField;

impl DriftField for ZeroField {
    fn eval(&self, _t: f64, mu: &QuantileField) -> Result<GridFunction> {
        Ok(GridFunction::zeros(mu.grid_size()))
    }
    fn sup_bound(&self) -> f64 {
        0.0
    }
    fn lipschitz(&self) -> f64 {
        0.0
    }
}

/// Section depending only on time: `V(t, x, mu) = c(t)`.
#[derive(Clone)]
pub struct TimeField {
    value: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    bound: f64,
}

impl TimeField {
    pub fn new(bound: f64, value: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        Self { value: Arc::new(value), bound }
    }

    pub fn constant(c: f64) -> Self {
        Self::new(c.abs(), move |_| c)
    }
}

impl DriftField for TimeField {
    fn eval(&self, t: f64, mu: &QuantileField) -> Result<GridFunction> {
        GridFunction::constant(mu.grid_size(), (self.value)(t))
    }
    fn sup_bound(&self) -> f64 {
        self.bound
    }
    fn lipschitz(&self) -> f64 {
        0.0
    }
}

type SectionFn = dyn Fn(f64, &QuantileField, &mut [f64]) + Send + Sync;

/// Closed-form field. The closure writes the section into a buffer of length
/// `M`; the result is rearranged only if it comes out unsorted.
#[derive(Clone)]
pub struct AnalyticField {
    section: Arc<SectionFn>,
    bound: f64,
    lip: f64,
}

impl AnalyticField {
    pub fn new(
        bound: f64,
        lip: f64,
        section: impl Fn(f64, &QuantileField, &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        Self { section: Arc::new(section), bound, lip }
    }
}

impl DriftField for AnalyticField {
    fn eval(&self, t: f64, mu: &QuantileField) -> Result<GridFunction> {
        let mut out = vec![0.0; mu.grid_size()];
        (self.section)(t, mu, &mut out);
        let g = GridFunction::new(out)?;
        Ok(if g.is_monotone() { g } else { rearrange(&g).into_grid() })
    }
    fn sup_bound(&self) -> f64 {
        self.bound
    }
    fn lipschitz(&self) -> f64 {
        self.lip
    }
}

/// One scenario of a tabulated field: a measure and the section there.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableEntry {
    pub measure: QuantileField,
    pub section: GridFunction,
}

/// Scenario library at one time node.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableNode {
    pub time: f64,
    pub entries: Vec<TableEntry>,
}

/// Field stored as scenario libraries on a time mesh. Evaluation uses the
/// latest node not after `t` and inverse-distance weighting over the `k`
/// nearest scenarios in the `W_2` metric; an exact hit returns the stored
/// section.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TabulatedField {
    grid: usize,
    neighbors: usize,
    nodes: Vec<TableNode>,
    #[serde(with = "crate::io::extended_float")]
    bound: f64,
    #[serde(with = "crate::io::extended_float")]
    lip: f64,
}

impl TabulatedField {
    pub fn new(grid: usize, neighbors: usize, nodes: Vec<TableNode>, bound: f64, lip: f64) -> Result<Self> {
        if neighbors == 0 {
            return Err(Error::InvalidParameter("neighbor count must be at least 1".into()));
        }
        if nodes.is_empty() {
            return Err(Error::InvalidParameter("tabulated field needs a time node".into()));
        }
        for w in nodes.windows(2) {
            if !(w[0].time < w[1].time) {
                return Err(Error::InvalidParameter("time nodes must be strictly increasing".into()));
            }
        }
        for n in &nodes {
            if n.entries.is_empty() {
                return Err(Error::InvalidParameter(format!("node at t = {} has no scenarios", n.time)));
            }
            for e in &n.entries {
                if e.measure.grid_size() != grid {
                    return Err(Error::Dimension { expected: grid, got: e.measure.grid_size() });
                }
                if e.section.grid_size() != grid {
                    return Err(Error::Dimension { expected: grid, got: e.section.grid_size() });
                }
            }
        }
        Ok(Self { grid, neighbors, nodes, bound, lip })
    }

    pub fn grid_size(&self) -> usize {
        self.grid
    }

    pub fn neighbors(&self) -> usize {
        self.neighbors
    }

    pub fn nodes(&self) -> &[TableNode] {
        &self.nodes
    }

    pub fn times(&self) -> Vec<f64> {
        self.nodes.iter().map(|n| n.time).collect()
    }

    /// Index of the latest node with `time <= t` (first node if `t` precedes
    /// the mesh).
    pub fn node_index(&self, t: f64) -> usize {
        let tol = 1e-9 * t.abs().max(1.0);
        let count = self.nodes.partition_point(|n| n.time <= t + tol);
        count.saturating_sub(1)
    }

    /// Interpolated section at a given node.
    pub fn eval_node(&self, index: usize, mu: &QuantileField) -> Result<GridFunction> {
        if mu.grid_size() != self.grid {
            return Err(Error::Dimension { expected: self.grid, got: mu.grid_size() });
        }
        let node = &self.nodes[index];
        let k = self.neighbors.min(node.entries.len());
        let mut dists: Vec<(f64, usize)> = node
            .entries
            .iter()
            .enumerate()
            .map(|(j, e)| w2_distance(&e.measure, mu).map(|d| (d, j)))
            .collect::<Result<_>>()?;
        dists.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        if dists[0].0 == 0.0 {
            return Ok(node.entries[dists[0].1].section.clone());
        }
        let mut out = vec![0.0; self.grid];
        let mut wsum = 0.0;
        for &(d, j) in &dists[..k] {
            let w = 1.0 / d;
            wsum += w;
            for (o, v) in out.iter_mut().zip(node.entries[j].section.values()) {
                *o += w * v;
            }
        }
        out.iter_mut().for_each(|o| *o /= wsum);
        let g = GridFunction::new(out)?;
        Ok(if g.is_monotone() { g } else { rearrange(&g).into_grid() })
    }

    pub fn set_bounds(&mut self, bound: f64, lip: f64) {
        self.bound = bound;
        self.lip = lip;
    }
}

impl DriftField for TabulatedField {
    fn eval(&self, t: f64, mu: &QuantileField) -> Result<GridFunction> {
        self.eval_node(self.node_index(t), mu)
    }
    fn sup_bound(&self) -> f64 {
        self.bound
    }
    fn lipschitz(&self) -> f64 {
        self.lip
    }
}

/// Field defined by `late` on `[switch, inf)` and by `early` before.
pub struct SplitField<'a> {
    pub switch: f64,
    pub early: &'a dyn DriftField,
    pub late: &'a dyn DriftField,
}

impl DriftField for SplitField<'_> {
    fn eval(&self, t: f64, mu: &QuantileField) -> Result<GridFunction> {
        if t + 1e-9 * t.abs().max(1.0) >= self.switch {
            self.late.eval(t, mu)
        } else {
            self.early.eval(t, mu)
        }
    }
    fn sup_bound(&self) -> f64 {
        self.early.sup_bound().max(self.late.sup_bound())
    }
    fn lipschitz(&self) -> f64 {
        self.early.lipschitz().max(self.late.lipschitz())
    }
}
