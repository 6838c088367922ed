//! The rate function `I(ν)` of the robust chain and its minimum over a W1 ball.
//!
//! Both are one convex program. With `ν` the shared marginal, `τ` is the
//! pair law `ν ⊗ q`, and for every state `x` a coupling `γ^x` moves
//! `ν_x π(x, ·)` to `σ_x = ν_x π̂(x, ·)` at cost at most `r ν_x`. The objective
//! `Σ τ_xy ln(τ_xy / σ_xy)` is jointly convex, so no inner minimisation is
//! needed. For a ball target `ν` becomes a variable, tied to the center by
//! one more coupling.

use serde::{Deserialize, Serialize};

use crate::chain::{BallSet, ChainSpec, Dist, Kernel, ZERO_MASS};
use crate::divergence::{rel_entropy, DivergenceModel, ModelKind};
use crate::error::{Error, Result};
use crate::program::{LinExpr, Program, SolverOptions, Status};
use crate::report::extended_real;
use crate::set_chain::stationary;
use crate::transport::ball_membership;

/// States with less `ν*` mass than this get `q*_x = π̂_x = π_x`.
pub const NULL_ROW: f64 = 1e-10;
/// Entries of `π̂` above this count as charged in the sharpness test.
pub const SUPPORT_TOL: f64 = 1e-6;
/// Rates above this are reported as non-vacuous.
pub const NONVACUOUS_TOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateReport {
    #[serde(with = "extended_real")]
    pub value: f64,
    /// Optimal `ν`; the input law (or ball center) when the value is infinite.
    pub nu_star: Dist,
    /// Tilted kernel with `ν* q* = ν*`.
    pub q_star: Kernel,
    /// Worst-case model kernel, row-wise within `r` of `π`.
    pub pi_hat: Kernel,
    pub kkt_residual: f64,
    pub marginal_residual: f64,
    pub invariance_residual: f64,
    pub converged: bool,
}

impl RateReport {
    fn trivial(nu: Dist, kernel: &Kernel, value: f64) -> Self {
        Self {
            value,
            nu_star: nu,
            q_star: kernel.clone(),
            pi_hat: kernel.clone(),
            kkt_residual: 0.0,
            marginal_residual: 0.0,
            invariance_residual: 0.0,
            converged: true,
        }
    }

    /// `Σ_x ν*_x R(q*_x ‖ π̂_x)`, recomputed from the reported optimisers.
    pub fn certificate_value(&self) -> f64 {
        self.nu_star
            .as_slice()
            .iter()
            .enumerate()
            .filter(|(_, &m)| m > 0.0)
            .map(|(x, &m)| m * rel_entropy(self.q_star.row(x).as_slice(), self.pi_hat.row(x).as_slice()))
            .sum()
    }
}

enum Target<'a> {
    Fixed(&'a Dist),
    Ball(&'a BallSet),
}

fn check_model(kind: ModelKind) -> Result<()> {
    if kind.is_indicator() {
        return Err(Error::InvalidArgument(
            "indicator models have no finite rate; use the envelope routines".into(),
        ));
    }
    Ok(())
}

fn check_len(spec: &ChainSpec, d: &Dist) -> Result<()> {
    if d.len() != spec.n() {
        return Err(Error::DimensionMismatch {
            what: "distribution",
            expected: spec.n(),
            found: d.len(),
        });
    }
    Ok(())
}

fn normalized_row(v: &[f64], mass: f64) -> Dist {
    Dist::from_raw(v.iter().map(|x| (x / mass).max(0.0)).collect())
}

fn solve_joint(spec: &ChainSpec, kind: ModelKind, target: Target) -> Result<RateReport> {
    let n = spec.n();
    let pi = &spec.kernel;
    let r = DivergenceModel::new(kind, spec.radius).effective_radius();
    let ac = kind.is_absolutely_continuous();
    let mut prog = Program::new();

    // ν_x as (variable, constant)
    let nu_vars = match target {
        Target::Fixed(_) => None,
        Target::Ball(_) => Some(prog.add_vars(n)),
    };
    let nu_term = |x: usize| -> (Option<usize>, f64) {
        match (&target, nu_vars) {
            (Target::Fixed(d), _) => (None, d[x]),
            (_, Some(base)) => (Some(base + x), 0.0),
            _ => unreachable!(),
        }
    };
    // Adds `coefs - factor·ν_x (= or ≤) rhs`.
    let with_nu = |mut coefs: Vec<(usize, f64)>, x: usize, factor: f64, rhs: f64| {
        let (v, c) = nu_term(x);
        match v {
            Some(v) => {
                coefs.push((v, -factor));
                (coefs, rhs)
            }
            None => (coefs, rhs + factor * c),
        }
    };

    let tau0 = prog.add_vars(n * n);
    let tau = |x: usize, y: usize| tau0 + x * n + y;
    for x in 0..n {
        let (c, b) = with_nu((0..n).map(|y| (tau(x, y), 1.0)).collect(), x, 1.0, 0.0);
        prog.add_eq(c, b);
        let (c, b) = with_nu((0..n).map(|y| (tau(y, x), 1.0)).collect(), x, 1.0, 0.0);
        prog.add_eq(c, b);
    }

    let g0 = prog.add_vars(n * n * n);
    let gamma = |x: usize, z: usize, y: usize| g0 + (x * n + z) * n + y;
    for x in 0..n {
        let mut cost = Vec::new();
        for z in 0..n {
            let pz = pi.p(x, z);
            for y in 0..n {
                if pz <= ZERO_MASS || (ac && pi.p(x, y) <= ZERO_MASS) {
                    prog.fix_zero(gamma(x, z, y));
                } else if spec.space.d(z, y) > 0.0 {
                    cost.push((gamma(x, z, y), spec.space.d(z, y)));
                }
            }
            if pz > ZERO_MASS {
                let (c, b) = with_nu((0..n).map(|y| (gamma(x, z, y), 1.0)).collect(), x, pz, 0.0);
                prog.add_eq(c, b);
            }
        }
        let (c, b) = with_nu(cost, x, r, 0.0);
        prog.add_le(c, b);
        for y in 0..n {
            prog.add_term(LinExpr::var(tau(x, y)), LinExpr::sum((0..n).map(|z| gamma(x, z, y))));
        }
    }

    if let Target::Ball(ball) = target {
        let b0 = prog.add_vars(n * n);
        let link = |i: usize, j: usize| b0 + i * n + j;
        let mut cost = Vec::new();
        for i in 0..n {
            let (c, b) = with_nu((0..n).map(|j| (link(i, j), 1.0)).collect(), i, 1.0, 0.0);
            prog.add_eq(c, b);
            prog.add_eq((0..n).map(|j| (link(j, i), 1.0)).collect(), ball.center[i]);
            for j in 0..n {
                if spec.space.d(i, j) > 0.0 {
                    cost.push((link(i, j), spec.space.d(i, j)));
                }
            }
        }
        prog.add_le(cost, ball.kappa);
    }

    let sol = prog.solve(&SolverOptions::default());
    let fallback = match target {
        Target::Fixed(d) => d.clone(),
        Target::Ball(b) => b.center.clone(),
    };
    if sol.status == Status::Infeasible {
        return Ok(RateReport::trivial(fallback, pi, f64::INFINITY));
    }

    let nu: Vec<f64> = (0..n)
        .map(|x| match nu_term(x) {
            (Some(v), _) => sol.x[v].max(0.0),
            (None, c) => c,
        })
        .collect();
    let mut q_rows = Vec::with_capacity(n);
    let mut hat_rows = Vec::with_capacity(n);
    for x in 0..n {
        if nu[x] <= NULL_ROW {
            q_rows.push(pi.row(x).clone());
            hat_rows.push(pi.row(x).clone());
            continue;
        }
        let t: Vec<f64> = (0..n).map(|y| sol.x[tau(x, y)]).collect();
        let s: Vec<f64> = (0..n)
            .map(|y| (0..n).map(|z| sol.x[gamma(x, z, y)]).sum())
            .collect();
        q_rows.push(normalized_row(&t, nu[x]));
        // radius 0 pins σ_x = ν_x π_x
        hat_rows.push(if r == 0.0 { pi.row(x).clone() } else { normalized_row(&s, nu[x]) });
    }
    let q_star = Kernel::from_rows(q_rows);
    let nu_star = Dist::from_raw(nu);
    let invariance_residual = nu_star.l1_distance(&Dist::from_raw(q_star.push_forward(nu_star.as_slice())));

    Ok(RateReport {
        value: sol.value.max(0.0),
        nu_star,
        q_star,
        pi_hat: Kernel::from_rows(hat_rows),
        kkt_residual: sol.kkt_residual,
        marginal_residual: sol.primal_residual,
        invariance_residual,
        converged: sol.status == Status::Optimal,
    })
}

/// `I(ν)` under `kind`, with radius taken from `spec`.
pub fn rate_at(spec: &ChainSpec, nu: &Dist, kind: ModelKind) -> Result<RateReport> {
    check_model(kind)?;
    check_len(spec, nu)?;
    let pushed = Dist::from_raw(spec.kernel.push_forward(nu.as_slice()));
    if nu.l1_distance(&pushed) <= 1e-12 {
        // q = π is invariant for ν
        return Ok(RateReport::trivial(nu.clone(), &spec.kernel, 0.0));
    }
    solve_joint(spec, kind, Target::Fixed(nu))
}

/// `inf { I(ν) : W1(ν, center) ≤ κ }`.
pub fn tail_rate(spec: &ChainSpec, ball: &BallSet, kind: ModelKind) -> Result<RateReport> {
    check_model(kind)?;
    check_len(spec, &ball.center)?;
    let (mu, _) = stationary(&spec.kernel);
    if ball_membership(&spec.space, &mu, ball)? {
        return Ok(RateReport::trivial(mu, &spec.kernel, 0.0));
    }
    if ball.kappa == 0.0 {
        return rate_at(spec, &ball.center, kind);
    }
    solve_joint(spec, kind, Target::Ball(ball))
}

/// The kernel `π̂` under which the tail event is least unlikely.
pub fn worst_case_kernel(spec: &ChainSpec, ball: &BallSet, kind: ModelKind) -> Result<Kernel> {
    let report = tail_rate(spec, ball, kind)?;
    if !report.converged {
        return Err(Error::NotConverged(format!(
            "tail rate solve stopped with KKT residual {:.3e}",
            report.kkt_residual
        )));
    }
    if report.value.is_infinite() {
        return Err(Error::InvalidArgument("the tail rate is infinite; no worst-case kernel exists".into()));
    }
    Ok(report.pi_hat)
}

/// Whether the tail bound over `ball` decays exponentially.
pub fn nonvacuous(spec: &ChainSpec, ball: &BallSet, kind: ModelKind) -> Result<bool> {
    let report = tail_rate(spec, ball, kind)?;
    if !report.converged {
        return Err(Error::NotConverged("tail rate solve did not converge".into()));
    }
    Ok(report.value > NONVACUOUS_TOL)
}

/// True iff `π̂_x ≪ π_x` on every state charged by `ν*`, in which case the
/// optimiser is also feasible for the absolutely continuous model.
pub fn sharpness_check(spec: &ChainSpec, report: &RateReport) -> bool {
    let n = spec.n();
    (0..n).filter(|&x| report.nu_star[x] > NULL_ROW).all(|x| {
        (0..n).all(|y| spec.kernel.p(x, y) > ZERO_MASS || report.pi_hat.p(x, y) <= SUPPORT_TOL)
    })
}
