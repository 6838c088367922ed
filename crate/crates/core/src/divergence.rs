//! Relative entropy and its Wasserstein-robust relatives.
//!
//! `β(ν, μ) = inf { R(ν, μ̂) : W1(μ̂, μ) ≤ r }` is computed over couplings `γ`
//! with row sums `μ`: `μ̂` is eliminated as the column sums of `γ`, which makes
//! every constraint linear and leaves the smooth objective
//! `Σ_j ν_j ln(ν_j / colsum_j γ)`.

use serde::{Deserialize, Serialize};

use crate::chain::{Dist, Kernel, MetricSpace, ZERO_MASS};
use crate::error::{Error, Result};
use crate::program::{LinExpr, Program, SolverOptions, Status};
use crate::transport::{w1, TransportPlan, BALL_SLACK};

/// Which divergence `β` is plugged into the rate function.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    /// Classical relative entropy; the radius is ignored.
    Entropy,
    /// Relative entropy minimised over the W1 ball.
    RobustEntropy,
    /// As `RobustEntropy`, restricted to `μ̂ ≪ μ`.
    #[serde(rename = "robust-entropy-ac")]
    RobustEntropyAC,
    /// 0 inside the W1 ball, `+∞` outside.
    BallIndicator,
    /// As `BallIndicator`, additionally requiring `ν ≪ μ`.
    #[serde(rename = "ball-indicator-ac")]
    BallIndicatorAC,
}

impl ModelKind {
    pub fn is_indicator(self) -> bool {
        matches!(self, ModelKind::BallIndicator | ModelKind::BallIndicatorAC)
    }

    pub fn is_absolutely_continuous(self) -> bool {
        matches!(self, ModelKind::RobustEntropyAC | ModelKind::BallIndicatorAC)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DivergenceModel {
    pub kind: ModelKind,
    pub radius: f64,
}

impl DivergenceModel {
    pub fn new(kind: ModelKind, radius: f64) -> Self {
        Self { kind, radius }
    }

    /// Radius actually used: `Entropy` always behaves as radius 0.
    pub fn effective_radius(&self) -> f64 {
        match self.kind {
            ModelKind::Entropy => 0.0,
            _ => self.radius,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DivergenceResult {
    /// In `[0, +∞]`.
    pub value: f64,
    pub witness_mu_hat: Option<Dist>,
    /// Coupling with rows `μ` and columns `μ̂`.
    pub witness_plan: Option<TransportPlan>,
    pub kkt_residual: f64,
    pub converged: bool,
}

impl DivergenceResult {
    fn infinite() -> Self {
        Self {
            value: f64::INFINITY,
            witness_mu_hat: None,
            witness_plan: None,
            kkt_residual: 0.0,
            converged: true,
        }
    }

    fn exact(value: f64, mu_hat: Dist, plan: TransportPlan) -> Self {
        Self {
            value,
            witness_mu_hat: Some(mu_hat),
            witness_plan: Some(plan),
            kkt_residual: 0.0,
            converged: true,
        }
    }
}

/// `R(ν‖μ) = Σ ν_i ln(ν_i / μ_i)` with `0 ln 0 = 0`; `+∞` unless `ν ≪ μ`.
pub fn rel_entropy(nu: &[f64], mu: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (&p, &q) in nu.iter().zip(mu) {
        if p <= 0.0 {
            continue;
        }
        if q <= 0.0 {
            return f64::INFINITY;
        }
        acc += p * (p / q).ln();
    }
    acc.max(0.0)
}

fn check_dims(space: &MetricSpace, dists: &[&Dist]) -> Result<()> {
    let n = space.n();
    for d in dists {
        if d.len() != n {
            return Err(Error::DimensionMismatch {
                what: "distribution",
                expected: n,
                found: d.len(),
            });
        }
    }
    Ok(())
}

fn diagonal_plan(mu: &Dist) -> TransportPlan {
    let n = mu.len();
    TransportPlan {
        gamma: (0..n)
            .map(|i| (0..n).map(|j| if i == j { mu[i] } else { 0.0 }).collect())
            .collect(),
        cost: 0.0,
    }
}

fn transpose(plan: TransportPlan) -> TransportPlan {
    let n = plan.gamma.len();
    let m = plan.gamma.first().map_or(0, Vec::len);
    TransportPlan {
        gamma: (0..m).map(|j| (0..n).map(|i| plan.gamma[i][j]).collect()).collect(),
        cost: plan.cost,
    }
}

/// The divergence `β(ν, μ)` of `model`.
pub fn beta(space: &MetricSpace, nu: &Dist, mu: &Dist, model: DivergenceModel) -> Result<DivergenceResult> {
    check_dims(space, &[nu, mu])?;
    let r = model.effective_radius();
    let ac = model.kind.is_absolutely_continuous();
    if ac && !nu.dominated_by(mu) {
        return Ok(DivergenceResult::infinite());
    }

    if r == 0.0 && !model.kind.is_indicator() {
        let value = rel_entropy(nu.as_slice(), mu.as_slice());
        if value.is_infinite() {
            return Ok(DivergenceResult::infinite());
        }
        return Ok(DivergenceResult::exact(value, mu.clone(), diagonal_plan(mu)));
    }

    let dist = w1(space, nu, mu)?;
    if dist.value <= r + BALL_SLACK {
        // ν itself is in the ball
        return Ok(DivergenceResult::exact(0.0, nu.clone(), transpose(dist.plan)));
    }
    if model.kind.is_indicator() {
        return Ok(DivergenceResult::infinite());
    }

    robust_entropy(space, nu, mu, r, ac)
}

fn robust_entropy(space: &MetricSpace, nu: &Dist, mu: &Dist, r: f64, ac: bool) -> Result<DivergenceResult> {
    let n = space.n();
    let mut prog = Program::new();
    let base = prog.add_vars(n * n);
    let var = |i: usize, j: usize| base + i * n + j;
    for i in 0..n {
        for j in 0..n {
            if !mu.charges(i) || (ac && !mu.charges(j)) {
                prog.fix_zero(var(i, j));
            }
        }
        prog.add_eq((0..n).map(|j| (var(i, j), 1.0)).collect(), mu[i]);
    }
    let cost = (0..n)
        .flat_map(|i| (0..n).map(move |j| (i, j)))
        .filter(|&(i, j)| space.d(i, j) > 0.0)
        .map(|(i, j)| (var(i, j), space.d(i, j)))
        .collect();
    prog.add_le(cost, r);
    for j in 0..n {
        if nu[j] > 0.0 {
            prog.add_term(LinExpr::constant(nu[j]), LinExpr::sum((0..n).map(|i| var(i, j))));
        }
    }

    let sol = prog.solve(&SolverOptions::default());
    if sol.status == Status::Infeasible {
        return Ok(DivergenceResult::infinite());
    }
    let gamma: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| sol.x[var(i, j)]).collect())
        .collect();
    let cost = (0..n)
        .flat_map(|i| (0..n).map(move |j| (i, j)))
        .map(|(i, j)| space.d(i, j) * gamma[i][j])
        .sum();
    let plan = TransportPlan { gamma, cost };
    let mu_hat = Dist::from_raw(plan.col_sums());
    Ok(DivergenceResult {
        value: rel_entropy(nu.as_slice(), mu_hat.as_slice()),
        witness_mu_hat: Some(mu_hat),
        witness_plan: Some(plan),
        kkt_residual: sol.kkt_residual,
        converged: sol.status == Status::Optimal,
    })
}

/// A law on `E^m` in decomposed form: the first marginal and, for each step
/// `i = 1..m-1`, the conditional law of `X_{i+1}` given the history `(X_1..X_i)`.
///
/// Histories are flattened in base `n`, first coordinate most significant.
#[derive(Clone, Debug, PartialEq)]
pub struct JointLaw {
    n: usize,
    initial: Dist,
    conditionals: Vec<Vec<Dist>>,
}

impl JointLaw {
    pub fn new(initial: Dist, conditionals: Vec<Vec<Dist>>) -> Result<Self> {
        let n = initial.len();
        for (i, step) in conditionals.iter().enumerate() {
            let expected = n.pow(i as u32 + 1);
            if step.len() != expected {
                return Err(Error::DimensionMismatch {
                    what: "conditional kernel",
                    expected,
                    found: step.len(),
                });
            }
            if let Some(bad) = step.iter().find(|d| d.len() != n) {
                return Err(Error::DimensionMismatch {
                    what: "conditional law",
                    expected: n,
                    found: bad.len(),
                });
            }
        }
        Ok(Self {
            n,
            initial,
            conditionals,
        })
    }

    /// `θ ⊗ π ⊗ … ⊗ π` on `E^m`.
    pub fn markov(theta: &Dist, kernel: &Kernel, m: usize) -> Self {
        let n = theta.len();
        let conditionals = (1..m)
            .map(|i| (0..n.pow(i as u32)).map(|h| kernel.row(h % n).clone()).collect())
            .collect();
        Self {
            n,
            initial: theta.clone(),
            conditionals,
        }
    }

    /// Decomposes a flat probability vector on `E^m`. Conditionals after
    /// null histories are set to uniform; they never enter any value.
    pub fn from_probabilities(n: usize, m: usize, p: &[f64]) -> Result<Self> {
        if m == 0 || p.len() != n.pow(m as u32) {
            return Err(Error::DimensionMismatch {
                what: "joint law",
                expected: n.pow(m.max(1) as u32),
                found: p.len(),
            });
        }
        // marginal[i][h] = P(history h of length i+1)
        let mut marginals = vec![p.to_vec()];
        for _ in 1..m {
            let last = marginals.last().unwrap();
            let shorter = (0..last.len() / n)
                .map(|h| (0..n).map(|y| last[h * n + y]).sum())
                .collect();
            marginals.push(shorter);
        }
        marginals.reverse();
        let initial = Dist::from_raw(marginals[0].clone());
        let conditionals = (1..m)
            .map(|i| {
                let prefix = &marginals[i - 1];
                let full = &marginals[i];
                (0..prefix.len())
                    .map(|h| {
                        if prefix[h] > 0.0 {
                            Dist::from_raw((0..n).map(|y| full[h * n + y] / prefix[h]).collect())
                        } else {
                            Dist::uniform(n)
                        }
                    })
                    .collect()
            })
            .collect();
        Ok(Self {
            n,
            initial,
            conditionals,
        })
    }

    /// Number of time steps `m`.
    pub fn steps(&self) -> usize {
        self.conditionals.len() + 1
    }

    pub fn initial(&self) -> &Dist {
        &self.initial
    }

    /// Conditional law of `X_{i+1}` given the flattened history `h` of length `i`.
    pub fn conditional(&self, i: usize, h: usize) -> &Dist {
        &self.conditionals[i - 1][h]
    }

    /// Flat probability vector on `E^m`.
    pub fn to_probabilities(&self) -> Vec<f64> {
        let mut p = self.initial.as_slice().to_vec();
        for step in &self.conditionals {
            p = p
                .iter()
                .enumerate()
                .flat_map(|(h, &ph)| step[h].as_slice().iter().map(move |q| ph * q))
                .collect();
        }
        p
    }
}

/// `β_m^θ(ν) = β(ν_{0,1}, θ) + Σ_i E_ν[β(ν_{i,i+1}(X_1..X_i), π(X_i))]`.
pub fn beta_chain(
    space: &MetricSpace,
    joint: &JointLaw,
    theta: &Dist,
    kernel: &Kernel,
    model: DivergenceModel,
) -> Result<f64> {
    let n = space.n();
    if joint.n != n || kernel.n() != n {
        return Err(Error::DimensionMismatch {
            what: "joint law",
            expected: n,
            found: if joint.n != n { joint.n } else { kernel.n() },
        });
    }
    let mut total = beta(space, &joint.initial, theta, model)?.value;
    if total.is_infinite() {
        return Ok(total);
    }
    let mut prob = joint.initial.as_slice().to_vec();
    for (i, step) in joint.conditionals.iter().enumerate() {
        for (h, &ph) in prob.iter().enumerate() {
            if ph <= 0.0 {
                continue;
            }
            let b = beta(space, &step[h], kernel.row(h % n), model)?.value;
            if b.is_infinite() {
                return Ok(f64::INFINITY);
            }
            total += ph * b;
        }
        if i + 1 < joint.conditionals.len() {
            prob = prob
                .iter()
                .enumerate()
                .flat_map(|(h, &ph)| step[h].as_slice().iter().map(move |q| ph * q))
                .collect();
        }
    }
    Ok(total)
}

/// `inf { R(ν, μ̂) : μ̂ ∈ M_2(θ) }` for a two-step law `ν` (an `n × n` matrix),
/// solved as one joint convex program over the initial coupling and all
/// row couplings. The AC variants restrict `μ̂ ≪ θ ⊗ π`.
pub fn beta2_joint_program(
    space: &MetricSpace,
    joint: &[Vec<f64>],
    theta: &Dist,
    kernel: &Kernel,
    model: DivergenceModel,
) -> Result<DivergenceResult> {
    if model.kind.is_indicator() {
        return Err(Error::InvalidArgument(
            "the joint program is defined for entropy models only".into(),
        ));
    }
    let n = space.n();
    check_dims(space, &[theta])?;
    if joint.len() != n || joint.iter().any(|r| r.len() != n) {
        return Err(Error::DimensionMismatch {
            what: "joint law",
            expected: n,
            found: joint.len(),
        });
    }
    let r = model.effective_radius();
    let ac = model.kind.is_absolutely_continuous();

    let mut prog = Program::new();
    let g0 = prog.add_vars(n * n);
    let v0 = |i: usize, x: usize| g0 + i * n + x;
    let gx = prog.add_vars(n * n * n);
    let vx = |x: usize, z: usize, y: usize| gx + (x * n + z) * n + y;

    // initial coupling θ → a
    for i in 0..n {
        for x in 0..n {
            if !theta.charges(i) || (ac && !theta.charges(x)) {
                prog.fix_zero(v0(i, x));
            }
        }
        prog.add_eq((0..n).map(|x| (v0(i, x), 1.0)).collect(), theta[i]);
    }
    prog.add_le(
        (0..n)
            .flat_map(|i| (0..n).map(move |x| (i, x)))
            .map(|(i, x)| (v0(i, x), space.d(i, x)))
            .collect(),
        r,
    );
    // row couplings a_x π(x) → σ_x
    for x in 0..n {
        let a_x: Vec<(usize, f64)> = (0..n).map(|i| (v0(i, x), 1.0)).collect();
        for z in 0..n {
            for y in 0..n {
                if kernel.p(x, z) <= ZERO_MASS || (ac && kernel.p(x, y) <= ZERO_MASS) {
                    prog.fix_zero(vx(x, z, y));
                }
            }
            let mut row: Vec<(usize, f64)> = (0..n).map(|y| (vx(x, z, y), 1.0)).collect();
            row.extend(a_x.iter().map(|&(v, _)| (v, -kernel.p(x, z))));
            prog.add_eq(row, 0.0);
        }
        let mut cost: Vec<(usize, f64)> = (0..n)
            .flat_map(|z| (0..n).map(move |y| (z, y)))
            .map(|(z, y)| (vx(x, z, y), space.d(z, y)))
            .collect();
        cost.extend(a_x.iter().map(|&(v, _)| (v, -r)));
        prog.add_le(cost, 0.0);
        for y in 0..n {
            if joint[x][y] > 0.0 {
                prog.add_term(
                    LinExpr::constant(joint[x][y]),
                    LinExpr::sum((0..n).map(|z| vx(x, z, y))),
                );
            }
        }
    }

    let sol = prog.solve(&SolverOptions::default());
    if sol.status == Status::Infeasible {
        return Ok(DivergenceResult::infinite());
    }
    Ok(DivergenceResult {
        value: sol.value,
        witness_mu_hat: None,
        witness_plan: None,
        kkt_residual: sol.kkt_residual,
        converged: sol.status == Status::Optimal,
    })
}
