//! Finite metric spaces, probability vectors, transition kernels and chain
//! specifications.
//!
//! States are addressed by 0-based index everywhere in the API; labels are only
//! used for display and for resolving names on the command line.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on `|sum - 1|` for a vector to count as a probability vector.
pub const PROB_TOL: f64 = 1e-12;

/// A mass at or below this threshold is treated as zero when computing supports.
pub const ZERO_MASS: f64 = 1e-14;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSpace {
    labels: Vec<String>,
    dist: Vec<Vec<f64>>,
}

impl MetricSpace {
    /// Builds a metric space and checks every metric axiom.
    pub fn new(labels: Vec<String>, dist: Vec<Vec<f64>>) -> Result<Self> {
        let space = Self::from_raw(labels, dist);
        let violations = space.violations();
        if violations.is_empty() {
            Ok(space)
        } else {
            Err(Error::InvalidChain(violations))
        }
    }

    /// Builds a metric space without validation. Use [`MetricSpace::violations`]
    /// to inspect it.
    pub fn from_raw(labels: Vec<String>, dist: Vec<Vec<f64>>) -> Self {
        Self { labels, dist }
    }

    /// The 0/1 metric on `n` states labelled `1..=n`.
    pub fn discrete(n: usize) -> Self {
        Self::discrete_labeled((1..=n).map(|i| i.to_string()).collect())
    }

    pub fn discrete_labeled(labels: Vec<String>) -> Self {
        let n = labels.len();
        let dist = (0..n)
            .map(|i| (0..n).map(|j| if i == j { 0.0 } else { 1.0 }).collect())
            .collect();
        Self { labels, dist }
    }

    pub fn n(&self) -> usize {
        self.labels.len()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    #[inline]
    pub fn d(&self, i: usize, j: usize) -> f64 {
        self.dist[i][j]
    }

    pub fn matrix(&self) -> &[Vec<f64>] {
        &self.dist
    }

    pub fn diameter(&self) -> f64 {
        self.dist
            .iter()
            .flat_map(|row| row.iter().copied())
            .fold(0.0, f64::max)
    }

    /// Resolves a state label to its index.
    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    /// All metric-axiom violations, in row-major order. The triangle check is
    /// O(n³).
    pub fn violations(&self) -> Vec<Violation> {
        let n = self.labels.len();
        let mut out = Vec::new();
        if self.dist.len() != n {
            out.push(Violation::Dimension {
                what: "metric",
                expected: n,
                found: self.dist.len(),
            });
            return out;
        }
        if let Some(row) = self.dist.iter().find(|row| row.len() != n) {
            out.push(Violation::Dimension {
                what: "metric row",
                expected: n,
                found: row.len(),
            });
            return out;
        }
        for i in 0..n {
            for j in 0..n {
                let v = self.dist[i][j];
                if !v.is_finite() || v < 0.0 {
                    out.push(Violation::InvalidDistance { i, j, value: v });
                } else if i == j && v != 0.0 {
                    out.push(Violation::NonzeroDiagonal { i, value: v });
                } else if i != j && v == 0.0 {
                    out.push(Violation::ZeroDistance { i, j });
                }
                if i < j && v != self.dist[j][i] {
                    out.push(Violation::Asymmetric {
                        i,
                        j,
                        diff: v - self.dist[j][i],
                    });
                }
            }
        }
        if !out.is_empty() {
            return out;
        }
        for i in 0..n {
            for k in (i + 1)..n {
                for j in 0..n {
                    if j == i || j == k {
                        continue;
                    }
                    let excess = self.dist[i][k] - (self.dist[i][j] + self.dist[j][k]);
                    if excess > 1e-12 * self.dist[i][k].max(1.0) {
                        out.push(Violation::Triangle { i, j, k, excess });
                    }
                }
            }
        }
        out
    }
}

/// A probability vector on the states.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Dist(Vec<f64>);

impl Dist {
    /// Validates `p` and renormalises it once so that it sums to 1.
    pub fn new(p: Vec<f64>) -> Result<Self> {
        if let Some(msg) = dist_problem(&p) {
            return Err(Error::InvalidDist(msg));
        }
        Ok(Self::normalized(p))
    }

    /// Wraps `p` without any checks.
    pub fn from_raw(p: Vec<f64>) -> Self {
        Self(p)
    }

    fn normalized(mut p: Vec<f64>) -> Self {
        for v in p.iter_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        let s: f64 = p.iter().sum();
        if s != 1.0 {
            p.iter_mut().for_each(|v| *v /= s);
        }
        Self(p)
    }

    pub fn dirac(n: usize, i: usize) -> Self {
        let mut p = vec![0.0; n];
        p[i] = 1.0;
        Self(p)
    }

    pub fn uniform(n: usize) -> Self {
        Self(vec![1.0 / n as f64; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    /// Whether state `i` carries non-negligible mass.
    pub fn charges(&self, i: usize) -> bool {
        self.0[i] > ZERO_MASS
    }

    /// `lambda * self + (1 - lambda) * other`.
    pub fn mix(&self, lambda: f64, other: &Dist) -> Dist {
        Dist(
            self.0
                .iter()
                .zip(&other.0)
                .map(|(a, b)| lambda * a + (1.0 - lambda) * b)
                .collect(),
        )
    }

    pub fn l1_distance(&self, other: &Dist) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| (a - b).abs()).sum()
    }

    /// Support inclusion `supp(self) ⊆ supp(other)` at the [`ZERO_MASS`] threshold.
    pub fn dominated_by(&self, other: &Dist) -> bool {
        (0..self.len()).all(|i| !self.charges(i) || other.charges(i))
    }
}

impl std::ops::Index<usize> for Dist {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

fn dist_problem(p: &[f64]) -> Option<String> {
    if p.is_empty() {
        return Some("empty vector".into());
    }
    if let Some((i, v)) = p.iter().enumerate().find(|(_, v)| !v.is_finite() || **v < 0.0) {
        return Some(format!("entry {i} is {v}"));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > PROB_TOL {
        return Some(format!("entries sum to {s}"));
    }
    None
}

/// A row-stochastic matrix; row `x` is the law of the next state from `x`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Kernel {
    rows: Vec<Dist>,
}

impl Kernel {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = rows.len();
        let mut out = Vec::with_capacity(n);
        for (x, row) in rows.into_iter().enumerate() {
            if row.len() != n {
                return Err(Error::DimensionMismatch {
                    what: "kernel row",
                    expected: n,
                    found: row.len(),
                });
            }
            let d = Dist::new(row).map_err(|e| Error::InvalidDist(format!("kernel row {x}: {e}")))?;
            out.push(d);
        }
        Ok(Self { rows: out })
    }

    pub fn from_raw(rows: Vec<Vec<f64>>) -> Self {
        Self {
            rows: rows.into_iter().map(Dist::from_raw).collect(),
        }
    }

    pub fn from_rows(rows: Vec<Dist>) -> Self {
        Self { rows }
    }

    pub fn identity(n: usize) -> Self {
        Self {
            rows: (0..n).map(|i| Dist::dirac(n, i)).collect(),
        }
    }

    pub fn n(&self) -> usize {
        self.rows.len()
    }

    pub fn row(&self, x: usize) -> &Dist {
        &self.rows[x]
    }

    pub fn rows(&self) -> &[Dist] {
        &self.rows
    }

    #[inline]
    pub fn p(&self, x: usize, y: usize) -> f64 {
        self.rows[x].0[y]
    }

    pub fn to_matrix(&self) -> Vec<Vec<f64>> {
        self.rows.iter().map(|r| r.0.clone()).collect()
    }

    /// `self` followed by `other`.
    pub fn compose(&self, other: &Kernel) -> Kernel {
        let n = self.n();
        let rows = (0..n)
            .map(|x| {
                let mut row = vec![0.0; n];
                for (z, &pz) in self.rows[x].0.iter().enumerate() {
                    if pz == 0.0 {
                        continue;
                    }
                    for (y, v) in row.iter_mut().enumerate() {
                        *v += pz * other.p(z, y);
                    }
                }
                Dist(row)
            })
            .collect();
        Kernel { rows }
    }

    /// Row vector times kernel: the law one step after `mu`.
    pub fn push_forward(&self, mu: &[f64]) -> Vec<f64> {
        let n = self.n();
        let mut out = vec![0.0; n];
        for (x, &m) in mu.iter().enumerate() {
            if m == 0.0 {
                continue;
            }
            for (y, v) in out.iter_mut().enumerate() {
                *v += m * self.p(x, y);
            }
        }
        out
    }

    /// The `k`-fold composition of the kernel with itself.
    pub fn k_step(&self, k: usize) -> Result<Kernel> {
        if k == 0 {
            return Err(Error::InvalidArgument("k must be at least 1".into()));
        }
        let mut acc = self.clone();
        for _ in 1..k {
            acc = acc.compose(self);
        }
        Ok(acc)
    }
}

/// Closed Wasserstein-1 ball `{ν : d_W(ν, center) ≤ kappa}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BallSet {
    pub center: Dist,
    pub kappa: f64,
}

impl BallSet {
    pub fn new(center: Dist, kappa: f64) -> Result<Self> {
        if !(kappa.is_finite() && kappa >= 0.0) {
            return Err(Error::InvalidArgument(format!("ball radius {kappa} must be >= 0")));
        }
        Ok(Self { center, kappa })
    }
}

/// A robust chain: metric space, initial law, nominal kernel and radius `r`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainSpec {
    pub space: MetricSpace,
    pub pi0: Dist,
    pub kernel: Kernel,
    pub radius: f64,
}

impl ChainSpec {
    /// Validates all invariants, then renormalises `pi0` and the kernel rows.
    pub fn new(space: MetricSpace, pi0: Dist, kernel: Kernel, radius: f64) -> Result<Self> {
        let raw = Self {
            space,
            pi0,
            kernel,
            radius,
        };
        let violations = validate_chain(&raw);
        if !violations.is_empty() {
            return Err(Error::InvalidChain(violations));
        }
        let Self {
            space,
            pi0,
            kernel,
            radius,
        } = raw;
        Ok(Self {
            space,
            pi0: Dist::normalized(pi0.0),
            kernel: Kernel {
                rows: kernel.rows.into_iter().map(|r| Dist::normalized(r.0)).collect(),
            },
            radius,
        })
    }

    pub fn n(&self) -> usize {
        self.space.n()
    }

    /// The same chain with a different radius.
    pub fn with_radius(&self, radius: f64) -> Self {
        Self {
            radius,
            ..self.clone()
        }
    }
}

/// Which probability vector of a chain a violation refers to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DistRole {
    Pi0,
    KernelRow(usize),
}

impl fmt::Display for DistRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DistRole::Pi0 => write!(f, "initial distribution"),
            DistRole::KernelRow(x) => write!(f, "kernel row {}", x + 1),
        }
    }
}

/// A single broken invariant. Indices are 0-based; `Display` prints them 1-based.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub enum Violation {
    Dimension {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    InvalidDistance { i: usize, j: usize, value: f64 },
    NonzeroDiagonal { i: usize, value: f64 },
    ZeroDistance { i: usize, j: usize },
    Asymmetric { i: usize, j: usize, diff: f64 },
    /// `d(i, k) > d(i, j) + d(j, k)`.
    Triangle { i: usize, j: usize, k: usize, excess: f64 },
    NegativeMass { role: DistRole, index: usize, value: f64 },
    MassSum { role: DistRole, sum: f64 },
    InvalidRadius { value: f64 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Dimension {
                what,
                expected,
                found,
            } => write!(f, "{what}: expected length {expected}, found {found}"),
            Violation::InvalidDistance { i, j, value } => {
                write!(f, "distance ({}, {}) is {value}", i + 1, j + 1)
            }
            Violation::NonzeroDiagonal { i, value } => {
                write!(f, "distance ({0}, {0}) is {value}, expected 0", i + 1)
            }
            Violation::ZeroDistance { i, j } => {
                write!(f, "distinct states ({}, {}) at distance 0", i + 1, j + 1)
            }
            Violation::Asymmetric { i, j, diff } => {
                write!(f, "distance not symmetric at ({}, {}), difference {diff}", i + 1, j + 1)
            }
            Violation::Triangle { i, j, k, excess } => write!(
                f,
                "triangle inequality fails on ({}, {}, {}) by {excess}",
                i + 1,
                j + 1,
                k + 1
            ),
            Violation::NegativeMass { role, index, value } => {
                write!(f, "{role}: entry {} is {value}", index + 1)
            }
            Violation::MassSum { role, sum } => write!(f, "{role} sums to {sum}"),
            Violation::InvalidRadius { value } => write!(f, "radius {value} must be >= 0"),
        }
    }
}

fn dist_violations(p: &Dist, n: usize, role: DistRole, out: &mut Vec<Violation>) {
    if p.len() != n {
        out.push(Violation::Dimension {
            what: match role {
                DistRole::Pi0 => "pi0",
                DistRole::KernelRow(_) => "kernel row",
            },
            expected: n,
            found: p.len(),
        });
        return;
    }
    let mut bad = false;
    for (index, &value) in p.0.iter().enumerate() {
        if !value.is_finite() || value < 0.0 {
            out.push(Violation::NegativeMass { role, index, value });
            bad = true;
        }
    }
    if !bad {
        let sum: f64 = p.0.iter().sum();
        if (sum - 1.0).abs() > PROB_TOL {
            out.push(Violation::MassSum { role, sum });
        }
    }
}

/// Every invariant violation of `spec`; empty iff the chain is valid.
pub fn validate_chain(spec: &ChainSpec) -> Vec<Violation> {
    let n = spec.space.n();
    let mut out = spec.space.violations();
    dist_violations(&spec.pi0, n, DistRole::Pi0, &mut out);
    if spec.kernel.n() != n {
        out.push(Violation::Dimension {
            what: "kernel",
            expected: n,
            found: spec.kernel.n(),
        });
    } else {
        for (x, row) in spec.kernel.rows.iter().enumerate() {
            dist_violations(row, n, DistRole::KernelRow(x), &mut out);
        }
    }
    if !(spec.radius.is_finite() && spec.radius >= 0.0) {
        out.push(Violation::InvalidRadius { value: spec.radius });
    }
    out
}

/// The `k`-step transition kernel.
pub fn k_step_kernel(kernel: &Kernel, k: usize) -> Result<Kernel> {
    kernel.k_step(k)
}

/// Fraction of time the path spends in each of `n` states.
pub fn empirical_measure(path: &[usize], n: usize) -> Result<Dist> {
    if path.is_empty() {
        return Err(Error::EmptyPath);
    }
    let mut counts = vec![0usize; n];
    for &s in path {
        if s >= n {
            return Err(Error::StateOutOfRange { index: s, n });
        }
        counts[s] += 1;
    }
    Ok(Dist::from_counts(&counts))
}

impl Dist {
    /// `counts[i] / Σ counts`, each entry a single rounded division.
    pub fn from_counts(counts: &[usize]) -> Dist {
        let total: usize = counts.iter().sum();
        Dist(counts.iter().map(|&c| c as f64 / total as f64).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    use crate::test_support::example_spec;

    #[test]
    fn example_chain_is_valid() {
        assert!(validate_chain(&example_spec(0.05)).is_empty());
    }

    #[test]
    fn short_kernel_row_is_reported() {
        let mut spec = example_spec(0.05);
        spec.kernel = Kernel::from_raw(vec![
            vec![0.6, 0.2, 0.1],
            vec![0.3, 0.4, 0.3],
            vec![0.0, 0.3, 0.7],
        ]);
        let v = validate_chain(&spec);
        assert_eq!(v.len(), 1);
        match &v[0] {
            Violation::MassSum { role, sum } => {
                assert_eq!(*role, DistRole::KernelRow(0));
                assert!((sum - 0.9).abs() < 1e-12);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(v[0].to_string().contains("kernel row 1"));
    }

    #[test]
    fn triangle_violation_names_the_path() {
        let space = MetricSpace::from_raw(
            vec!["1".into(), "2".into(), "3".into()],
            vec![vec![0.0, 5.0, 1.0], vec![5.0, 0.0, 1.0], vec![1.0, 1.0, 0.0]],
        );
        let v = space.violations();
        assert_eq!(v.len(), 1);
        match v[0] {
            Violation::Triangle { i, j, k, excess } => {
                assert_eq!((i, j, k), (0, 2, 1));
                assert!((excess - 3.0).abs() < 1e-12);
            }
            ref other => panic!("unexpected {other:?}"),
        }
        assert!(v[0].to_string().contains("(1, 3, 2)"));
    }

    #[test]
    fn metric_axioms() {
        let bad = MetricSpace::from_raw(
            vec!["a".into(), "b".into()],
            vec![vec![0.5, 1.0], vec![2.0, 0.0]],
        );
        let v = bad.violations();
        assert!(v.iter().any(|v| matches!(v, Violation::NonzeroDiagonal { i: 0, .. })));
        assert!(v.iter().any(|v| matches!(v, Violation::Asymmetric { i: 0, j: 1, .. })));
        assert!(MetricSpace::new(vec!["a".into(), "b".into()], vec![vec![0.0, 0.0], vec![0.0, 0.0]]).is_err());
    }

    #[test]
    fn dist_renormalises_within_tolerance() {
        let d = Dist::new(vec![0.1, 0.2, 0.7 + 5e-13]).unwrap();
        assert!((d.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(Dist::new(vec![0.1, 0.2, 0.6]).is_err());
        assert!(Dist::new(vec![-0.1, 1.1]).is_err());
    }

    #[test]
    fn k_step_examples() {
        let spec = example_spec(0.0);
        assert_eq!(k_step_kernel(&spec.kernel, 1).unwrap(), spec.kernel);
        let k2 = k_step_kernel(&spec.kernel, 2).unwrap();
        assert!((k2.p(2, 0) - 0.09).abs() < 1e-15);
        assert!(k_step_kernel(&spec.kernel, 0).is_err());

        let absorbing = Kernel::new(vec![vec![0.5, 0.5], vec![0.0, 1.0]]).unwrap();
        for k in 1..20 {
            assert_eq!(absorbing.k_step(k).unwrap().row(1).as_slice(), &[0.0, 1.0]);
        }
    }

    #[test]
    fn empirical_measure_examples() {
        assert_eq!(empirical_measure(&[2, 2, 2], 3).unwrap().as_slice(), &[0.0, 0.0, 1.0]);
        assert_eq!(empirical_measure(&[0, 1, 0, 1], 3).unwrap().as_slice(), &[0.5, 0.5, 0.0]);
        assert_eq!(empirical_measure(&[0, 1, 2, 2], 3).unwrap().as_slice(), &[0.25, 0.25, 0.5]);
        assert!(matches!(empirical_measure(&[], 3), Err(Error::EmptyPath)));
        assert!(empirical_measure(&[3], 3).is_err());
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        fn kernel_strategy(n: usize) -> impl Strategy<Value = Kernel> {
            prop::collection::vec(prop::collection::vec(0.0f64..1.0, n), n).prop_map(|rows| {
                Kernel::from_rows(
                    rows.into_iter()
                        .map(|mut r| {
                            r[0] += 1e-3;
                            let s: f64 = r.iter().sum();
                            Dist::from_raw(r.into_iter().map(|v| v / s).collect())
                        })
                        .collect(),
                )
            })
        }

        proptest! {
            #[test]
            fn chapman_kolmogorov(k in kernel_strategy(4), j in 1usize..5, m in 1usize..5) {
                let lhs = k.k_step(j + m).unwrap();
                let rhs = k.k_step(j).unwrap().compose(&k.k_step(m).unwrap());
                for x in 0..4 {
                    for y in 0..4 {
                        prop_assert!((lhs.p(x, y) - rhs.p(x, y)).abs() <= 1e-12);
                    }
                }
            }

            #[test]
            fn empirical_measure_is_a_dist(path in prop::collection::vec(0usize..5, 1..200)) {
                let d = empirical_measure(&path, 5).unwrap();
                prop_assert!(Dist::new(d.as_slice().to_vec()).is_ok());
            }
        }
    }
}
