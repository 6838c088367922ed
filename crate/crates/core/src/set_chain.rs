//! Invariant-measure envelopes of the robust chain, Cesàro averages,
//! stationary distributions and the support conditions on `π`.

use std::collections::HashMap;

use minilp::{ComparisonOp, LinearExpr, OptimizationDirection, Problem, Variable};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::chain::{ChainSpec, Dist, Kernel, ZERO_MASS};
use crate::divergence::ModelKind;
use crate::error::{Error, Result};
use crate::linalg;

/// Singular values below this count towards the dimension of the invariant set.
pub const RANK_TOL: f64 = 1e-10;

/// Coordinate-wise range of the invariant measures of the robust chain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub m1_holds: bool,
    pub l0: Option<usize>,
    pub n0: Option<usize>,
    pub m2_holds: bool,
    pub invariant: Option<Dist>,
    pub unique_invariant: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

/// An invariant distribution of `kernel` and whether it is the only one.
///
/// The returned law is supported on the closed communicating class holding
/// the lowest-numbered state among all closed classes.
pub fn stationary(kernel: &Kernel) -> (Dist, bool) {
    let n = kernel.n();
    let p = kernel.to_matrix();

    let mut reach = vec![vec![false; n]; n];
    for (x, row) in reach.iter_mut().enumerate() {
        row[x] = true;
        for y in 0..n {
            if p[x][y] > ZERO_MASS {
                row[y] = true;
            }
        }
    }
    for k in 0..n {
        for i in 0..n {
            if reach[i][k] {
                for j in 0..n {
                    if reach[k][j] {
                        reach[i][j] = true;
                    }
                }
            }
        }
    }
    // x lies in a closed class iff everything reachable from x reaches back
    let closed = (0..n)
        .find(|&x| (0..n).all(|y| !reach[x][y] || reach[y][x]))
        .expect("a finite chain has a closed class");
    let class: Vec<usize> = (0..n).filter(|&y| reach[closed][y]).collect();

    let k = class.len();
    let mut a = DMatrix::<f64>::zeros(k, k);
    for (r, &y) in class.iter().enumerate() {
        for (c, &x) in class.iter().enumerate() {
            a[(r, c)] = p[x][y] - if x == y { 1.0 } else { 0.0 };
        }
    }
    for c in 0..k {
        a[(k - 1, c)] = 1.0;
    }
    let mut rhs = DVector::<f64>::zeros(k);
    rhs[k - 1] = 1.0;
    let sol = linalg::solve(a, &rhs).expect("irreducible class has a unique invariant law");
    let mut nu = vec![0.0; n];
    for (c, &x) in class.iter().enumerate() {
        nu[x] = sol[c].max(0.0);
    }

    let mut ip = DMatrix::<f64>::identity(n, n);
    for x in 0..n {
        for y in 0..n {
            ip[(x, y)] -= p[x][y];
        }
    }
    let nullity = linalg::singular_values(&ip)
        .iter()
        .filter(|&&s| s <= RANK_TOL)
        .count();
    (Dist::from_raw(nu), nullity == 1)
}

type Support = Vec<Vec<bool>>;

fn bool_mul(a: &Support, b: &Support) -> Support {
    let n = a.len();
    (0..n)
        .map(|i| (0..n).map(|j| (0..n).any(|k| a[i][k] && b[k][j])).collect())
        .collect()
}

fn union_rows(acc: &mut Support, b: &Support) {
    for (ra, rb) in acc.iter_mut().zip(b) {
        for (x, &y) in ra.iter_mut().zip(rb) {
            *x |= y;
        }
    }
}

/// Checks the support conditions on the `k`-step kernels.
///
/// The supports of `π^k` are computed by boolean matrix powers until the
/// sequence repeats. From the entry index `j` of the periodic regime on, the
/// tail union `S_{≥l}(x)` no longer depends on `l`, so `l0 = j` is the
/// natural choice; `n0` is `j` when the inclusion already holds there, and
/// otherwise the largest smaller index for which it does.
pub fn check_conditions(spec: &ChainSpec, max_exponent: usize) -> Result<ConditionReport> {
    if max_exponent == 0 {
        return Err(Error::InvalidArgument("max_exponent must be at least 1".into()));
    }
    let n = spec.n();
    let (invariant, unique) = stationary(&spec.kernel);
    let base: Support = (0..n)
        .map(|x| (0..n).map(|y| spec.kernel.p(x, y) > ZERO_MASS).collect())
        .collect();

    let mut powers: Vec<Support> = vec![base.clone()];
    let mut seen: HashMap<Support, usize> = HashMap::new();
    seen.insert(base.clone(), 1);
    let mut cycle = None;
    while powers.len() < max_exponent {
        let next = bool_mul(powers.last().unwrap(), &base);
        let k = powers.len() + 1;
        if let Some(&j) = seen.get(&next) {
            cycle = Some(j);
            break;
        }
        seen.insert(next.clone(), k);
        powers.push(next);
    }

    let mut report = ConditionReport {
        m1_holds: false,
        l0: None,
        n0: None,
        m2_holds: true,
        invariant: Some(invariant),
        unique_invariant: unique,
        note: None,
    };
    let Some(j) = cycle else {
        report.note = Some(format!(
            "support sequence did not repeat within {max_exponent} steps; the condition may still hold beyond the bound"
        ));
        return Ok(report);
    };

    // tail[l-1] = S_{≥l} for l = 1..=j
    let mut tail: Vec<Support> = vec![vec![vec![false; n]; n]; j];
    let mut acc = vec![vec![false; n]; n];
    for s in &powers[j - 1..] {
        union_rows(&mut acc, s);
    }
    tail[j - 1] = acc.clone();
    for l in (1..j).rev() {
        union_rows(&mut acc, &powers[l - 1]);
        tail[l - 1] = acc.clone();
    }

    let holds = |l: usize, m: usize| {
        let left = &tail[l - 1];
        let right = &tail[m - 1];
        (0..n).all(|x| (0..n).all(|y| (0..n).all(|z| !left[x][z] || right[y][z])))
    };
    if let Some(n0) = (1..=j).rev().find(|&m| holds(j, m)) {
        report.m1_holds = true;
        report.l0 = Some(j);
        report.n0 = Some(n0);
    } else {
        report.note = Some("tail supports are not mutually dominated".into());
    }
    Ok(report)
}

fn require_indicator(kind: ModelKind) -> Result<bool> {
    match kind {
        ModelKind::BallIndicator => Ok(false),
        ModelKind::BallIndicatorAC => Ok(true),
        other => Err(Error::InvalidArgument(format!(
            "envelopes use an indicator model, got {other:?}"
        ))),
    }
}

/// Linear program over `(ν, τ, γ^x)`: `τ` has both marginals `ν`, `γ^x`
/// moves `ν_x π(x, ·)` onto `τ_{x,·}` at cost at most `r ν_x`.
/// Returns `None` if infeasible.
fn invariant_lp(
    spec: &ChainSpec,
    ac: bool,
    weights: &[f64],
    fixed: Option<&Dist>,
) -> Result<Option<(f64, Vec<f64>)>> {
    let n = spec.n();
    let r = spec.radius;
    let mut lp = Problem::new(OptimizationDirection::Maximize);
    let nu: Vec<Variable> = (0..n)
        .map(|x| {
            let bounds = match fixed {
                Some(d) => (d[x], d[x]),
                None => (0.0, 1.0),
            };
            lp.add_var(weights[x], bounds)
        })
        .collect();
    let tau: Vec<Vec<Variable>> = (0..n)
        .map(|x| {
            (0..n)
                .map(|y| {
                    let cap = if ac && spec.kernel.p(x, y) <= ZERO_MASS { 0.0 } else { 1.0 };
                    lp.add_var(0.0, (0.0, cap))
                })
                .collect()
        })
        .collect();

    if fixed.is_none() {
        let mut total = LinearExpr::empty();
        for &v in &nu {
            total.add(v, 1.0);
        }
        lp.add_constraint(total, ComparisonOp::Eq, 1.0);
    }
    for x in 0..n {
        let mut row = LinearExpr::empty();
        let mut col = LinearExpr::empty();
        for y in 0..n {
            row.add(tau[x][y], 1.0);
            col.add(tau[y][x], 1.0);
        }
        row.add(nu[x], -1.0);
        col.add(nu[x], -1.0);
        lp.add_constraint(row, ComparisonOp::Eq, 0.0);
        lp.add_constraint(col, ComparisonOp::Eq, 0.0);
    }

    for x in 0..n {
        // γ^x[z][y], only rows with π(x, z) > 0
        let rows: Vec<usize> = (0..n).filter(|&z| spec.kernel.p(x, z) > ZERO_MASS).collect();
        let gamma: Vec<Vec<Variable>> = rows
            .iter()
            .map(|_| (0..n).map(|_| lp.add_var(0.0, (0.0, 1.0))).collect())
            .collect();
        let mut cost = LinearExpr::empty();
        for (gi, &z) in rows.iter().enumerate() {
            let mut out = LinearExpr::empty();
            for y in 0..n {
                out.add(gamma[gi][y], 1.0);
                let d = spec.space.d(z, y);
                if d > 0.0 {
                    cost.add(gamma[gi][y], d);
                }
            }
            out.add(nu[x], -spec.kernel.p(x, z));
            lp.add_constraint(out, ComparisonOp::Eq, 0.0);
        }
        cost.add(nu[x], -r);
        lp.add_constraint(cost, ComparisonOp::Le, 0.0);
        for y in 0..n {
            let mut inflow = LinearExpr::empty();
            for g in &gamma {
                inflow.add(g[y], 1.0);
            }
            inflow.add(tau[x][y], -1.0);
            lp.add_constraint(inflow, ComparisonOp::Eq, 0.0);
        }
    }

    match lp.solve() {
        Ok(sol) => {
            let point = nu.iter().map(|&v| sol[v].clamp(0.0, 1.0)).collect();
            Ok(Some((sol.objective(), point)))
        }
        Err(minilp::Error::Infeasible) => Ok(None),
        Err(e) => Err(e.into()),
    }
}

/// Maximises `Σ weights[x] ν_x` over the invariant measures of the robust chain.
pub fn robust_functional_bound(spec: &ChainSpec, kind: ModelKind, weights: &[f64]) -> Result<(f64, Dist)> {
    let ac = require_indicator(kind)?;
    if weights.len() != spec.n() {
        return Err(Error::DimensionMismatch {
            what: "weights",
            expected: spec.n(),
            found: weights.len(),
        });
    }
    let (value, nu) = invariant_lp(spec, ac, weights, None)?
        .ok_or_else(|| Error::NotConverged("invariant-measure LP reported infeasible".into()))?;
    Ok((value, Dist::from_raw(nu)))
}

/// Whether `nu` is invariant for some kernel in the robust model.
pub fn invariant_feasible(spec: &ChainSpec, kind: ModelKind, nu: &Dist) -> Result<bool> {
    let ac = require_indicator(kind)?;
    if nu.len() != spec.n() {
        return Err(Error::DimensionMismatch {
            what: "distribution",
            expected: spec.n(),
            found: nu.len(),
        });
    }
    Ok(invariant_lp(spec, ac, &vec![0.0; spec.n()], Some(nu))?.is_some())
}

/// `lo[x] = min ν_x`, `hi[x] = max ν_x` over the robust invariant measures.
/// The `2n` linear programs run in parallel.
pub fn envelope(spec: &ChainSpec, kind: ModelKind) -> Result<Envelope> {
    require_indicator(kind)?;
    let n = spec.n();
    let values = (0..2 * n)
        .into_par_iter()
        .map(|k| {
            let x = k % n;
            let sign = if k < n { 1.0 } else { -1.0 };
            let mut w = vec![0.0; n];
            w[x] = sign;
            robust_functional_bound(spec, kind, &w).map(|(v, _)| (sign * v).clamp(0.0, 1.0))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(Envelope {
        hi: values[..n].to_vec(),
        lo: values[n..].to_vec(),
    })
}

/// `(1/n) Σ_{i=1}^{n} π0 π^{i-1}`.
pub fn cesaro(spec: &ChainSpec, n: usize) -> Result<Dist> {
    if n == 0 {
        return Err(Error::InvalidArgument("Cesàro length must be at least 1".into()));
    }
    let mut current = spec.pi0.as_slice().to_vec();
    let mut acc = vec![0.0; current.len()];
    for i in 0..n {
        for (a, c) in acc.iter_mut().zip(&current) {
            *a += c;
        }
        if i + 1 < n {
            current = spec.kernel.push_forward(&current);
        }
    }
    Ok(Dist::from_raw(acc.into_iter().map(|a| a / n as f64).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::MetricSpace;
    use crate::test_support::example_spec;

    const MU_STAR: [f64; 3] = [3.0 / 13.0, 4.0 / 13.0, 6.0 / 13.0];

    fn two_state(rows: Vec<Vec<f64>>) -> ChainSpec {
        ChainSpec::new(
            MetricSpace::discrete(rows.len()),
            Dist::dirac(rows.len(), 0),
            Kernel::new(rows).unwrap(),
            0.0,
        )
        .unwrap()
    }

    #[test]
    fn stationary_examples() {
        let (mu, unique) = stationary(&example_spec(0.0).kernel);
        assert!(unique);
        for (a, b) in mu.as_slice().iter().zip(MU_STAR) {
            assert!((a - b).abs() < 1e-12);
        }
        let (mu, unique) = stationary(&Kernel::identity(3));
        assert!(!unique);
        assert_eq!(mu.as_slice(), &[1.0, 0.0, 0.0]);
        let flip = Kernel::new(vec![vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let (mu, unique) = stationary(&flip);
        assert!(unique);
        assert!((mu[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn stationary_with_transient_states() {
        let k = Kernel::new(vec![vec![0.5, 0.5, 0.0], vec![0.0, 0.2, 0.8], vec![0.0, 0.6, 0.4]]).unwrap();
        let (mu, unique) = stationary(&k);
        assert!(unique);
        assert_eq!(mu[0], 0.0);
        let pushed = k.push_forward(mu.as_slice());
        assert!(mu.l1_distance(&Dist::from_raw(pushed)) < 1e-10);
    }

    #[test]
    fn conditions_examples() {
        let rep = check_conditions(&example_spec(0.05), 12).unwrap();
        assert!(rep.m1_holds && rep.m2_holds && rep.unique_invariant);
        assert_eq!((rep.l0, rep.n0), (Some(2), Some(2)));

        let identity = two_state(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert!(!check_conditions(&identity, 6).unwrap().m1_holds);

        let flip = two_state(vec![vec![0.0, 1.0], vec![1.0, 0.0]]);
        let rep = check_conditions(&flip, 6).unwrap();
        assert!(rep.m1_holds);
        assert_eq!((rep.l0, rep.n0), (Some(1), Some(1)));
    }

    #[test]
    fn conditions_bound_exhausted() {
        let rep = check_conditions(&example_spec(0.0), 1).unwrap();
        assert!(!rep.m1_holds);
        assert!(rep.note.is_some());
    }

    #[test]
    fn envelope_at_zero_radius_is_stationary() {
        let env = envelope(&example_spec(0.0), ModelKind::BallIndicator).unwrap();
        for x in 0..3 {
            assert!((env.lo[x] - MU_STAR[x]).abs() < 1e-8, "{env:?}");
            assert!((env.hi[x] - MU_STAR[x]).abs() < 1e-8, "{env:?}");
        }
    }

    #[test]
    fn envelope_large_radius_is_trivial() {
        let env = envelope(&example_spec(1.0), ModelKind::BallIndicator).unwrap();
        for x in 0..3 {
            assert!(env.lo[x].abs() < 1e-9 && (env.hi[x] - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn envelope_strictly_brackets_stationary() {
        let spec = example_spec(0.05);
        let env = envelope(&spec, ModelKind::BallIndicator).unwrap();
        let ac = envelope(&spec, ModelKind::BallIndicatorAC).unwrap();
        for x in 0..3 {
            assert!(env.lo[x] < MU_STAR[x] && MU_STAR[x] < env.hi[x]);
            assert!(ac.lo[x] >= env.lo[x] - 1e-9 && ac.hi[x] <= env.hi[x] + 1e-9);
        }
        // hi[3] against a grid of candidate ν with a feasibility test each
        let mut best: f64 = 0.0;
        for a in 0..=100 {
            for b in 0..=(100 - a) {
                let nu = Dist::from_raw(vec![a as f64 / 100.0, b as f64 / 100.0, (100 - a - b) as f64 / 100.0]);
                if nu[2] > best && invariant_feasible(&spec, ModelKind::BallIndicator, &nu).unwrap() {
                    best = nu[2];
                }
            }
        }
        assert!(best <= env.hi[2] + 1e-9 && env.hi[2] - best <= 0.011, "{best} {}", env.hi[2]);
    }

    #[test]
    fn functional_bounds() {
        let spec = example_spec(0.0);
        let (v, _) = robust_functional_bound(&spec, ModelKind::BallIndicator, &[0.0, 0.0, 1.0]).unwrap();
        assert!((v - 6.0 / 13.0).abs() < 1e-9);
        let spec = example_spec(0.05);
        let (v, _) = robust_functional_bound(&spec, ModelKind::BallIndicator, &[2.5; 3]).unwrap();
        assert!((v - 2.5).abs() < 1e-9);
        let w = [0.3, -1.0, 2.0];
        let (v, arg) = robust_functional_bound(&spec, ModelKind::BallIndicator, &w).unwrap();
        assert!(invariant_feasible(&spec, ModelKind::BallIndicator, &arg).unwrap());
        let at: f64 = w.iter().zip(arg.as_slice()).map(|(a, b)| a * b).sum();
        assert!((at - v).abs() < 1e-9);
        assert!(robust_functional_bound(&spec, ModelKind::RobustEntropy, &w).is_err());
    }

    #[test]
    fn cesaro_examples() {
        let spec = example_spec(0.0);
        assert_eq!(cesaro(&spec, 1).unwrap(), spec.pi0);
        let avg = cesaro(&spec, 2000).unwrap();
        for (a, b) in avg.as_slice().iter().zip(MU_STAR) {
            assert!((a - b).abs() < 1e-3);
        }
        let id = two_state(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert_eq!(cesaro(&id, 50).unwrap(), id.pi0);
    }
}
