//! Discrete periodic quantile functions.
//!
//! Elements of the state space are symmetric about 0 on the torus and
//! non-decreasing on `[0, 1/2]`, so only the half-torus is stored, sampled at
//! the mid-point nodes `x_i = (i + 1/2) / (2M)`. A probability measure with a
//! finite second moment is represented by its quantile function
//! `x -> F^{-1}(2x)`, and the discrete `L^2` distance between two such fields
//! is the 2-Wasserstein distance between the measures they represent.
//!
//! All inner products and norms are torus averages: `<a, b> = (1/M) sum a_i b_i`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mid-point node `x_i` of a half-torus grid with `m` nodes.
#[inline]
pub fn node(i: usize, m: usize) -> f64 {
    (i as f64 + 0.5) / (2.0 * m as f64)
}

fn check_finite(values: &[f64]) -> Result<()> {
    if values.is_empty() {
        return Err(Error::Domain("grid must contain at least one node".into()));
    }
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::Domain(format!(
            "non-finite value {} at node {i}",
            values[i]
        )));
    }
    Ok(())
}

fn inner(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / a.len() as f64
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

/// Symmetric grid function on the half-torus, not necessarily monotone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridFunction {
    values: Vec<f64>,
}

impl GridFunction {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        check_finite(&values)?;
        Ok(Self { values })
    }

    pub fn zeros(m: usize) -> Self {
        Self { values: vec![0.0; m.max(1)] }
    }

    pub fn constant(m: usize, value: f64) -> Result<Self> {
        Self::new(vec![value; m])
    }

    /// Samples `f` at the grid nodes.
    pub fn from_fn(m: usize, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new((0..m).map(|i| f(node(i, m))).collect())
    }

    /// Caller guarantees finiteness; used on hot paths where values are
    /// produced by finite arithmetic on finite inputs.
    pub(crate) fn from_vec_unchecked(values: Vec<f64>) -> Self {
        debug_assert!(values.iter().all(|v| v.is_finite()));
        Self { values }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn grid_size(&self) -> usize {
        self.values.len()
    }

    pub fn l2_norm(&self) -> f64 {
        inner(&self.values, &self.values).sqrt()
    }

    pub fn inner(&self, other: &GridFunction) -> Result<f64> {
        same_grid(self.grid_size(), other.grid_size())?;
        Ok(inner(&self.values, &other.values))
    }

    pub fn l2_distance(&self, other: &GridFunction) -> Result<f64> {
        same_grid(self.grid_size(), other.grid_size())?;
        Ok(sq_dist(&self.values, &other.values).sqrt())
    }

    pub fn scaled(&self, factor: f64) -> Result<GridFunction> {
        GridFunction::new(self.values.iter().map(|v| v * factor).collect())
    }

    pub fn is_monotone(&self) -> bool {
        self.values.windows(2).all(|w| w[0] <= w[1])
    }
}

/// Discrete element of the cone of periodic quantile functions: finite and
/// non-decreasing on the half-torus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct QuantileField {
    values: Vec<f64>,
}

impl TryFrom<Vec<f64>> for QuantileField {
    type Error = Error;
    fn try_from(values: Vec<f64>) -> Result<Self> {
        QuantileField::new(values)
    }
}

impl From<QuantileField> for Vec<f64> {
    fn from(q: QuantileField) -> Self {
        q.values
    }
}

impl QuantileField {
    /// Validates finiteness and monotonicity.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        check_finite(&values)?;
        if let Some(i) = values.windows(2).position(|w| w[0] > w[1]) {
            return Err(Error::Domain(format!(
                "quantile field decreases between nodes {i} and {}: {} > {}",
                i + 1,
                values[i],
                values[i + 1]
            )));
        }
        Ok(Self { values })
    }

    /// Sorts arbitrary finite samples into a quantile field.
    pub fn from_unsorted(values: Vec<f64>) -> Result<Self> {
        Ok(rearrange(&GridFunction::new(values)?))
    }

    pub fn constant(m: usize, value: f64) -> Result<Self> {
        Self::new(vec![value; m])
    }

    /// Samples a non-decreasing `f` at the grid nodes.
    pub fn from_fn(m: usize, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new((0..m).map(|i| f(node(i, m))).collect())
    }

    pub(crate) fn from_sorted_unchecked(values: Vec<f64>) -> Self {
        debug_assert!(values.windows(2).all(|w| w[0] <= w[1]));
        debug_assert!(values.iter().all(|v| v.is_finite()));
        Self { values }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn grid_size(&self) -> usize {
        self.values.len()
    }

    pub fn to_grid(&self) -> GridFunction {
        GridFunction { values: self.values.clone() }
    }

    pub fn into_grid(self) -> GridFunction {
        GridFunction { values: self.values }
    }

    /// Mean of the represented measure (torus average of the field).
    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    pub fn second_moment(&self) -> f64 {
        inner(&self.values, &self.values)
    }

    pub fn l2_norm(&self) -> f64 {
        self.second_moment().sqrt()
    }

    /// Median of the represented measure; average of the two middle nodes
    /// when `M` is even.
    pub fn median(&self) -> f64 {
        let m = self.values.len();
        if m % 2 == 1 {
            self.values[m / 2]
        } else {
            0.5 * (self.values[m / 2 - 1] + self.values[m / 2])
        }
    }
}

fn same_grid(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Dimension { expected: a, got: b });
    }
    Ok(())
}

/// Monotone rearrangement: the ascending sort of the grid values.
pub fn rearrange(g: &GridFunction) -> QuantileField {
    let mut values = g.values.clone();
    values.sort_unstable_by(f64::total_cmp);
    QuantileField { values }
}

/// In-place variant used by the time steppers.
pub(crate) fn rearrange_in_place(values: &mut [f64]) {
    values.sort_unstable_by(f64::total_cmp);
}

/// Finitely supported probability measure.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscreteMeasure {
    atoms: Vec<(f64, f64)>,
}

impl DiscreteMeasure {
    /// Atoms are sorted by location; weights must be positive and sum to one
    /// within `1e-12`.
    pub fn new(mut atoms: Vec<(f64, f64)>) -> Result<Self> {
        if atoms.is_empty() {
            return Err(Error::Domain("measure needs at least one atom".into()));
        }
        for &(x, w) in &atoms {
            if !x.is_finite() || !w.is_finite() {
                return Err(Error::Domain(format!("non-finite atom ({x}, {w})")));
            }
            if !(w > 0.0 && w <= 1.0 + 1e-12) {
                return Err(Error::Domain(format!("atom weight {w} outside (0, 1]")));
            }
        }
        let total: f64 = atoms.iter().map(|a| a.1).sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Domain(format!("weights sum to {total}, not 1")));
        }
        atoms.sort_by(|a, b| a.0.total_cmp(&b.0));
        Ok(Self { atoms })
    }

    pub fn dirac(x: f64) -> Result<Self> {
        Self::new(vec![(x, 1.0)])
    }

    pub fn atoms(&self) -> &[(f64, f64)] {
        &self.atoms
    }

    pub fn mean(&self) -> f64 {
        self.atoms.iter().map(|(x, w)| x * w).sum()
    }

    /// Generalized inverse `inf { t : F(t) >= p }`.
    pub fn quantile(&self, p: f64) -> f64 {
        let mut cum = 0.0;
        for &(x, w) in &self.atoms {
            cum += w;
            if cum >= p {
                return x;
            }
        }
        self.atoms[self.atoms.len() - 1].0
    }
}

/// Quantile representative of `mu` on `m` nodes: `values[i] = F^{-1}((i + 1/2) / M)`.
pub fn quantile_from_measure(mu: &DiscreteMeasure, m: usize) -> Result<QuantileField> {
    if m == 0 {
        return Err(Error::InvalidParameter("grid size must be at least 1".into()));
    }
    let mut values = Vec::with_capacity(m);
    let mut atom = 0;
    let mut cum = mu.atoms[0].1;
    for i in 0..m {
        let p = (i as f64 + 0.5) / m as f64;
        while cum < p && atom + 1 < mu.atoms.len() {
            atom += 1;
            cum += mu.atoms[atom].1;
        }
        values.push(mu.atoms[atom].0);
    }
    QuantileField::new(values)
}

/// Push-forward of the uniform measure on the grid, equal values merged.
pub fn measure_from_quantile(q: &QuantileField) -> DiscreteMeasure {
    let m = q.grid_size();
    let w = 1.0 / m as f64;
    let mut atoms: Vec<(f64, f64)> = Vec::new();
    let mut run = 0usize;
    for (i, &v) in q.values.iter().enumerate() {
        run += 1;
        let last = i + 1 == m || q.values[i + 1] != v;
        if last {
            atoms.push((v, run as f64 * w));
            run = 0;
        }
    }
    DiscreteMeasure { atoms }
}

/// 2-Wasserstein distance through the quantile isometry.
pub fn w2_distance(q1: &QuantileField, q2: &QuantileField) -> Result<f64> {
    same_grid(q1.grid_size(), q2.grid_size())?;
    Ok(sq_dist(&q1.values, &q2.values).sqrt())
}

/// Right-continuous distribution function `(1/M) #{i : values[i] <= y}`.
pub fn cdf_eval(q: &QuantileField, y: f64) -> f64 {
    let count = q.values.partition_point(|&v| v <= y);
    count as f64 / q.grid_size() as f64
}

/// Forward-difference Dirichlet energy on the half-torus,
/// `sum_i (v[i+1] - v[i])^2 * 2M`, the half-torus integral of the squared
/// difference quotient with step `1/(2M)`. Zero when `M = 1`.
pub fn grad_norm_sq(q: &QuantileField) -> f64 {
    grad_norm_sq_values(&q.values)
}

pub(crate) fn grad_norm_sq_values(values: &[f64]) -> f64 {
    let m = values.len();
    if m < 2 {
        return 0.0;
    }
    let s: f64 = values.windows(2).map(|w| (w[1] - w[0]) * (w[1] - w[0])).sum();
    s * 2.0 * m as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn insertion_sort(v: &[f64]) -> Vec<f64> {
        let mut out: Vec<f64> = Vec::with_capacity(v.len());
        for &x in v {
            let pos = out.iter().position(|&y| y > x).unwrap_or(out.len());
            out.insert(pos, x);
        }
        out
    }

    #[test]
    fn rearrange_small() {
        let g = GridFunction::new(vec![0.3, 0.1, 0.2]).unwrap();
        assert_eq!(rearrange(&g).values(), &[0.1, 0.2, 0.3]);
        let sorted = GridFunction::new(vec![-1.0, 0.0, 0.0, 2.0]).unwrap();
        assert_eq!(rearrange(&sorted).values(), sorted.values());
    }

    #[test]
    fn rearrange_matches_insertion_sort() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let v: Vec<f64> = (0..64).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let g = GridFunction::new(v.clone()).unwrap();
        assert_eq!(rearrange(&g).values(), insertion_sort(&v).as_slice());
    }

    #[test]
    fn non_finite_rejected() {
        assert!(matches!(
            GridFunction::new(vec![0.0, f64::NAN]),
            Err(Error::Domain(_))
        ));
        assert!(QuantileField::from_unsorted(vec![f64::INFINITY]).is_err());
        assert!(QuantileField::new(vec![1.0, 0.0]).is_err());
    }

    #[test]
    fn quantile_of_dirac_and_two_atoms() {
        let d = DiscreteMeasure::dirac(2.5).unwrap();
        assert_eq!(quantile_from_measure(&d, 5).unwrap().values(), &[2.5; 5]);
        let two = DiscreteMeasure::new(vec![(1.0, 0.5), (0.0, 0.5)]).unwrap();
        assert_eq!(
            quantile_from_measure(&two, 4).unwrap().values(),
            &[0.0, 0.0, 1.0, 1.0]
        );
    }

    #[test]
    fn quantile_matches_inf_definition() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let raw: Vec<f64> = (0..100).map(|_| rng.gen_range(0.1..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let atoms: Vec<(f64, f64)> = raw
            .iter()
            .map(|w| (rng.gen_range(-5.0..5.0), w / total))
            .collect();
        // renormalise exactly against the rounding of the division above
        let s: f64 = atoms.iter().map(|a| a.1).sum();
        let atoms: Vec<(f64, f64)> = atoms.into_iter().map(|(x, w)| (x, w / s)).collect();
        let mu = DiscreteMeasure::new(atoms.clone()).unwrap();
        let m = 256;
        let q = quantile_from_measure(&mu, m).unwrap();
        for i in 0..m {
            let p = (i as f64 + 0.5) / m as f64;
            // brute force: smallest atom location t with F(t) >= p
            let mut best = f64::INFINITY;
            for &(t, _) in &atoms {
                let f: f64 = atoms.iter().filter(|a| a.0 <= t).map(|a| a.1).sum();
                if f >= p && t < best {
                    best = t;
                }
            }
            assert_eq!(q.values()[i], best, "node {i}");
        }
    }

    #[test]
    fn measure_round_trip_and_merging() {
        let c = QuantileField::constant(6, 1.5).unwrap();
        assert_eq!(measure_from_quantile(&c).atoms(), &[(1.5, 1.0)]);
        let q = QuantileField::new(vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        assert_eq!(measure_from_quantile(&q).atoms(), &[(0.0, 0.5), (1.0, 0.5)]);
    }

    #[test]
    fn w2_examples() {
        let a = QuantileField::constant(8, 1.0).unwrap();
        let b = QuantileField::constant(8, -2.5).unwrap();
        assert_eq!(w2_distance(&a, &a).unwrap(), 0.0);
        assert!((w2_distance(&a, &b).unwrap() - 3.5).abs() < 1e-15);
        let c = QuantileField::constant(4, 0.0).unwrap();
        assert!(matches!(w2_distance(&a, &c), Err(Error::Dimension { .. })));
    }

    #[test]
    fn w2_uniform_scaling() {
        // Uniform[0,1] vs Uniform[0,2]: W2^2 = int_0^1 p^2 dp = 1/3
        let m = 1024;
        let u1 = QuantileField::from_fn(m, |x| 2.0 * x).unwrap();
        let u2 = QuantileField::from_fn(m, |x| 4.0 * x).unwrap();
        let d = w2_distance(&u1, &u2).unwrap();
        assert!((d - (1.0f64 / 3.0).sqrt()).abs() < 2e-3, "{d}");
    }

    #[test]
    fn cdf_examples() {
        let c = QuantileField::constant(4, 2.0).unwrap();
        assert_eq!(cdf_eval(&c, 1.999), 0.0);
        assert_eq!(cdf_eval(&c, 2.0), 1.0);
        let q = QuantileField::new(vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        assert_eq!(cdf_eval(&q, 0.5), 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r = QuantileField::from_unsorted((0..50).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap();
        for k in 0..200 {
            let y = -1.2 + 2.4 * k as f64 / 199.0;
            let count = r.values().iter().filter(|&&v| v <= y).count();
            assert_eq!(cdf_eval(&r, y), count as f64 / 50.0);
        }
    }

    #[test]
    fn gradient_energy() {
        assert_eq!(grad_norm_sq(&QuantileField::constant(10, 3.0).unwrap()), 0.0);
        assert_eq!(grad_norm_sq(&QuantileField::constant(1, 3.0).unwrap()), 0.0);
        let affine = QuantileField::from_fn(1024, |x| x).unwrap();
        // half-torus integral of slope^2 = 1/2
        assert!((grad_norm_sq(&affine) - 0.5).abs() < 1e-2);
        // a unit jump contributes 2M
        for m in [16usize, 64, 256] {
            let step = QuantileField::from_fn(m, |x| if x < 0.25 { 0.0 } else { 1.0 }).unwrap();
            assert_eq!(grad_norm_sq(&step), 2.0 * m as f64);
        }
    }

    proptest! {
        #[test]
        fn rearrange_is_idempotent_norm_preserving_and_contractive(
            a in proptest::collection::vec(-100.0f64..100.0, 1..128),
            seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let b: Vec<f64> = a.iter().map(|x| x + rng.gen_range(-5.0..5.0)).collect();
            let ga = GridFunction::new(a).unwrap();
            let gb = GridFunction::new(b).unwrap();
            let ra = rearrange(&ga);
            let rb = rearrange(&gb);
            let again = rearrange(&ra.to_grid());
            prop_assert_eq!(again.values(), ra.values());
            // same multiset, so the sum of squares is identical term by term
            let mut sq_a: Vec<f64> = ga.values().iter().map(|v| v * v).collect();
            let mut sq_r: Vec<f64> = ra.values().iter().map(|v| v * v).collect();
            sq_a.sort_by(f64::total_cmp);
            sq_r.sort_by(f64::total_cmp);
            prop_assert_eq!(sq_a, sq_r);
            let before = ga.l2_distance(&gb).unwrap();
            let after = w2_distance(&ra, &rb).unwrap();
            prop_assert!(after <= before * (1.0 + 1e-12) + 1e-300);
        }

        #[test]
        fn quantile_round_trip(v in proptest::collection::vec(-10.0f64..10.0, 1..64)) {
            let q = QuantileField::from_unsorted(v).unwrap();
            let mu = measure_from_quantile(&q);
            let back = quantile_from_measure(&mu, q.grid_size()).unwrap();
            prop_assert_eq!(back.values(), q.values());
        }

        #[test]
        fn w2_triangle(
            a in proptest::collection::vec(-10.0f64..10.0, 16),
            b in proptest::collection::vec(-10.0f64..10.0, 16),
            c in proptest::collection::vec(-10.0f64..10.0, 16),
        ) {
            let (a, b, c) = (
                QuantileField::from_unsorted(a).unwrap(),
                QuantileField::from_unsorted(b).unwrap(),
                QuantileField::from_unsorted(c).unwrap(),
            );
            let ab = w2_distance(&a, &b).unwrap();
            prop_assert_eq!(ab, w2_distance(&b, &a).unwrap());
            prop_assert!(w2_distance(&a, &c).unwrap() <= ab + w2_distance(&b, &c).unwrap() + 1e-12);
        }

        #[test]
        fn cdf_is_right_continuous(v in proptest::collection::vec(-3.0f64..3.0, 1..40), i in 0usize..40) {
            let q = QuantileField::from_unsorted(v).unwrap();
            let y = q.values()[i % q.grid_size()];
            let right = y + y.abs().max(1.0) * 1e-12;
            prop_assert_eq!(cdf_eval(&q, y), cdf_eval(&q, right));
            prop_assert!(cdf_eval(&q, y) >= cdf_eval(&q, y - 1e-9));
        }
    }
}
