//! Small dense convex programs with relative-entropy objectives.
//!
//! A [`Program`] is
//!
//! ```text
//! minimise   Σ_k  t_k ln(t_k / s_k)      t_k = a_k·x + a_k0,  s_k = b_k·x + b_k0
//! subject to A x = b,  x ≥ 0
//! ```
//!
//! with `a_k, b_k ≥ 0`. Every summand is the perspective of `−ln`, hence jointly
//! convex in `(t_k, s_k)`; a term with `t_k = 0` contributes 0 and a term with
//! `t_k > 0 = s_k` is `+∞`.
//!
//! Solving happens in two stages.
//!
//! 1. **Presolve.** A sequence of linear programs finds every variable that can be
//!    positive on the feasible set. Variables that are zero on the whole feasible
//!    set are removed, as are numerators whose denominator is forced to zero (the
//!    objective would be `+∞` otherwise). The average of the LP solutions is a
//!    strictly positive feasible point of what remains. Redundant equality rows
//!    are dropped.
//! 2. **Barrier.** Newton's method on `τ f(x) − Σ ln x_i` with equality
//!    constraints, for a geometrically increasing `τ`. Steps are computed in the
//!    affine-scaled variables `x = X u`, which keeps the KKT systems well scaled
//!    as coordinates approach zero.

use minilp::{ComparisonOp, OptimizationDirection, Problem};
use nalgebra::{DMatrix, DVector};

use crate::linalg;

/// Squared Newton decrement at which a barrier subproblem counts as centred.
const CENTERING_TOL: f64 = 1e-9;

/// Sparse affine expression `Σ coef·x[var] + constant`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LinExpr {
    pub terms: Vec<(usize, f64)>,
    pub constant: f64,
}

impl LinExpr {
    pub fn var(i: usize) -> Self {
        Self {
            terms: vec![(i, 1.0)],
            constant: 0.0,
        }
    }

    pub fn constant(c: f64) -> Self {
        Self {
            terms: Vec::new(),
            constant: c,
        }
    }

    pub fn sum<I: IntoIterator<Item = usize>>(vars: I) -> Self {
        Self {
            terms: vars.into_iter().map(|i| (i, 1.0)).collect(),
            constant: 0.0,
        }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.constant + self.terms.iter().map(|&(i, c)| c * x[i]).sum::<f64>()
    }
}

/// One summand `num · ln(num / den)`.
#[derive(Clone, Debug, PartialEq)]
pub struct EntropyTerm {
    pub num: LinExpr,
    pub den: LinExpr,
}

impl EntropyTerm {
    fn value(&self, x: &[f64]) -> f64 {
        let t = self.num.eval(x);
        if t <= 0.0 {
            return 0.0;
        }
        let s = self.den.eval(x);
        if s <= 0.0 {
            return f64::INFINITY;
        }
        t * (t / s).ln()
    }
}

#[derive(Clone, Debug)]
pub struct SolverOptions {
    /// Stop once the KKT residual is at or below this value.
    pub kkt_tol: f64,
    /// Total Newton iteration budget.
    pub max_iterations: usize,
    /// Barrier parameter growth factor.
    pub mu: f64,
    /// LP values above this count as positive in the presolve.
    pub positive_tol: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            kkt_tol: 1e-8,
            max_iterations: 10_000,
            mu: 10.0,
            positive_tol: 1e-9,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Status {
    Optimal,
    /// No feasible point with finite objective.
    Infeasible,
    NotConverged,
}

#[derive(Clone, Debug)]
pub struct Solution {
    pub status: Status,
    /// Full-length primal point (removed variables are 0).
    pub x: Vec<f64>,
    /// Objective at `x`; `+∞` when infeasible.
    pub value: f64,
    /// max(primal residual, scaled stationarity, complementarity).
    pub kkt_residual: f64,
    /// `‖A x − b‖∞` over all original rows.
    pub primal_residual: f64,
    /// Upper bound on `value − optimum` from the barrier parameter.
    pub gap_bound: f64,
    pub iterations: usize,
}

impl Solution {
    fn infeasible(n: usize) -> Self {
        Self {
            status: Status::Infeasible,
            x: vec![0.0; n],
            value: f64::INFINITY,
            kkt_residual: 0.0,
            primal_residual: f64::INFINITY,
            gap_bound: 0.0,
            iterations: 0,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct Program {
    n_vars: usize,
    rows: Vec<(Vec<(usize, f64)>, f64)>,
    terms: Vec<EntropyTerm>,
    fixed_zero: Vec<usize>,
}

impl Program {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn n_vars(&self) -> usize {
        self.n_vars
    }

    pub fn add_var(&mut self) -> usize {
        self.n_vars += 1;
        self.n_vars - 1
    }

    /// Adds `k` consecutive variables and returns the first index.
    pub fn add_vars(&mut self, k: usize) -> usize {
        self.n_vars += k;
        self.n_vars - k
    }

    pub fn add_eq(&mut self, coefs: Vec<(usize, f64)>, rhs: f64) {
        self.rows.push((coefs, rhs));
    }

    /// `coefs·x ≤ rhs`, via a fresh slack variable. Returns the slack index.
    pub fn add_le(&mut self, mut coefs: Vec<(usize, f64)>, rhs: f64) -> usize {
        let s = self.add_var();
        coefs.push((s, 1.0));
        self.rows.push((coefs, rhs));
        s
    }

    pub fn fix_zero(&mut self, var: usize) {
        self.fixed_zero.push(var);
    }

    pub fn add_term(&mut self, num: LinExpr, den: LinExpr) {
        self.terms.push(EntropyTerm { num, den });
    }

    pub fn objective(&self, x: &[f64]) -> f64 {
        self.terms.iter().map(|t| t.value(x)).sum()
    }

    pub fn primal_residual(&self, x: &[f64]) -> f64 {
        self.rows
            .iter()
            .map(|(c, b)| (c.iter().map(|&(i, a)| a * x[i]).sum::<f64>() - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn solve(&self, opts: &SolverOptions) -> Solution {
        let Some(pre) = self.presolve(opts) else {
            return Solution::infeasible(self.n_vars);
        };
        let mut sol = self.barrier(&pre, opts);
        sol.primal_residual = self.primal_residual(&sol.x);
        sol
    }

    fn presolve(&self, opts: &SolverOptions) -> Option<Presolved> {
        let n = self.n_vars;
        let mut zero = vec![false; n];
        for &v in &self.fixed_zero {
            zero[v] = true;
        }
        loop {
            let (positive, interior) = self.positive_support(&zero, opts)?;
            for (i, z) in zero.iter_mut().enumerate() {
                *z = !positive[i];
            }

            let mut changed = false;
            for term in &self.terms {
                let den_dead = term.den.constant <= 0.0
                    && term.den.terms.iter().all(|&(i, c)| c == 0.0 || zero[i]);
                if !den_dead {
                    continue;
                }
                if term.num.constant > 0.0 {
                    return None;
                }
                for &(i, c) in &term.num.terms {
                    if c != 0.0 && !zero[i] {
                        zero[i] = true;
                        changed = true;
                    }
                }
            }
            if changed {
                continue;
            }

            let kept: Vec<usize> = (0..n).filter(|&i| !zero[i]).collect();
            let mut pos = vec![usize::MAX; n];
            for (k, &i) in kept.iter().enumerate() {
                pos[i] = k;
            }
            let mut a = DMatrix::<f64>::zeros(self.rows.len(), kept.len());
            let mut b = DVector::<f64>::zeros(self.rows.len());
            for (r, (coefs, rhs)) in self.rows.iter().enumerate() {
                for &(i, c) in coefs {
                    if pos[i] != usize::MAX {
                        a[(r, pos[i])] += c;
                    }
                }
                b[r] = *rhs;
            }
            let scale = a.iter().fold(1.0f64, |m, v| m.max(v.abs()));
            let rows = linalg::independent_rows(&a, 1e-11 * scale);
            let a = a.select_rows(&rows);
            let b = b.select_rows(&rows);

            let terms = self
                .terms
                .iter()
                .filter_map(|t| {
                    let map = |e: &LinExpr| LinExpr {
                        terms: e
                            .terms
                            .iter()
                            .filter(|&&(i, c)| c != 0.0 && pos[i] != usize::MAX)
                            .map(|&(i, c)| (pos[i], c))
                            .collect(),
                        constant: e.constant,
                    };
                    let num = map(&t.num);
                    (!num.terms.is_empty() || num.constant > 0.0).then(|| EntropyTerm {
                        num,
                        den: map(&t.den),
                    })
                })
                .collect();
            let x0 = kept.iter().map(|&i| interior[i]).collect();
            return Some(Presolved {
                kept,
                a,
                b,
                terms,
                x0,
            });
        }
    }

    /// Which variables can be positive on the feasible set (with `zero` forced
    /// to 0), and a feasible point positive on all of them. `None` if infeasible.
    fn positive_support(&self, zero: &[bool], opts: &SolverOptions) -> Option<(Vec<bool>, Vec<f64>)> {
        let n = self.n_vars;
        let mut positive = vec![false; n];
        let mut undecided: Vec<usize> = (0..n).filter(|&i| !zero[i]).collect();
        let mut acc = vec![0.0; n];
        let mut solves = 0usize;
        loop {
            let mut lp = Problem::new(OptimizationDirection::Maximize);
            let xs: Vec<_> = (0..n)
                .map(|i| lp.add_var(0.0, (0.0, if zero[i] { 0.0 } else { f64::INFINITY })))
                .collect();
            for (coefs, rhs) in &self.rows {
                let expr: Vec<_> = coefs.iter().map(|&(i, c)| (xs[i], c)).collect();
                lp.add_constraint(expr, ComparisonOp::Eq, *rhs);
            }
            for &i in &undecided {
                let s = lp.add_var(1.0, (0.0, 1.0));
                lp.add_constraint([(s, 1.0), (xs[i], -1.0)], ComparisonOp::Le, 0.0);
            }
            let sol = lp.solve().ok()?;
            solves += 1;
            for i in 0..n {
                acc[i] += sol[xs[i]].max(0.0);
            }
            let before = undecided.len();
            undecided.retain(|&i| {
                if sol[xs[i]] > opts.positive_tol {
                    positive[i] = true;
                    false
                } else {
                    true
                }
            });
            if undecided.is_empty() || undecided.len() == before {
                break;
            }
        }
        let interior = acc.into_iter().map(|v| v / solves as f64).collect();
        Some((positive, interior))
    }

    fn barrier(&self, pre: &Presolved, opts: &SolverOptions) -> Solution {
        let nk = pre.kept.len();
        let mut full = vec![0.0; self.n_vars];
        let scatter = |x: &DVector<f64>, full: &mut Vec<f64>| {
            for (k, &i) in pre.kept.iter().enumerate() {
                full[i] = x[k];
            }
        };

        if nk == 0 {
            return Solution {
                status: Status::Optimal,
                value: self.objective(&full),
                x: full,
                kkt_residual: 0.0,
                primal_residual: 0.0,
                gap_bound: 0.0,
                iterations: 0,
            };
        }

        let mut x = pre.project(DVector::from_vec(pre.x0.clone()));
        // running estimate of the equality multipliers in scaled form
        let mut y = DVector::<f64>::zeros(pre.a.nrows());
        let mut t = 1.0;
        let mut iterations = 0usize;
        let mut status = Status::NotConverged;
        let mut kkt = f64::INFINITY;
        let mut best: Option<(f64, DVector<f64>, f64)> = None;

        while iterations < opts.max_iterations {
            // centring at barrier parameter t
            let mut stalled = false;
            for _ in 0..200 {
                iterations += 1;
                let Some(step) = pre.newton_step(&x, t, &y) else {
                    stalled = true;
                    break;
                };
                // the stationarity residual scales like sqrt(decrement) / t
                if step.decrement_sq <= CENTERING_TOL && step.primal_res <= 1e-12 {
                    break;
                }
                let Some(s) = pre.line_search(&x, &step.dx, t, &step.grad) else {
                    stalled = true;
                    break;
                };
                x += s * &step.dx;
                y = step.y;
                if iterations >= opts.max_iterations {
                    break;
                }
            }

            let res = pre.kkt_residual(&x, t);
            if let Some(res) = res {
                kkt = res;
                if best.as_ref().map_or(true, |b| res < b.0) {
                    best = Some((res, x.clone(), t));
                }
                if res <= opts.kkt_tol {
                    status = Status::Optimal;
                    break;
                }
            }
            if stalled {
                break;
            }
            t *= opts.mu;
            y *= opts.mu;
        }

        let (kkt, x, t) = match (status, best) {
            (Status::Optimal, _) => (kkt, x, t),
            (_, Some(b)) => b,
            (_, None) => (kkt, x, t),
        };
        scatter(&x, &mut full);
        Solution {
            status,
            value: self.objective(&full),
            x: full,
            kkt_residual: kkt,
            primal_residual: 0.0,
            gap_bound: nk as f64 / t,
            iterations,
        }
    }
}

struct Presolved {
    kept: Vec<usize>,
    a: DMatrix<f64>,
    b: DVector<f64>,
    terms: Vec<EntropyTerm>,
    x0: Vec<f64>,
}

struct NewtonStep {
    dx: DVector<f64>,
    /// gradient of the barrier function
    grad: DVector<f64>,
    /// updated multiplier estimate
    y: DVector<f64>,
    decrement_sq: f64,
    primal_res: f64,
}

impl Presolved {
    fn objective(&self, x: &[f64]) -> f64 {
        self.terms.iter().map(|t| t.value(x)).sum()
    }

    /// Moves a positive point onto `{A x = b}` along the least-norm scaled
    /// correction, so later Newton steps need no infeasibility term.
    fn project(&self, mut x: DVector<f64>) -> DVector<f64> {
        if self.a.nrows() == 0 {
            return x;
        }
        for _ in 0..3 {
            let rp = &self.a * &x - &self.b;
            if rp.amax() == 0.0 {
                break;
            }
            let ax = DMatrix::from_fn(self.a.nrows(), x.len(), |r, j| self.a[(r, j)] * x[j]);
            let Some(w) = linalg::solve(&ax * ax.transpose(), &rp) else {
                break;
            };
            let du = ax.transpose() * w;
            let cand = DVector::from_fn(x.len(), |i, _| x[i] * (1.0 - du[i]));
            if cand.iter().any(|&v| v <= 0.0) {
                break;
            }
            x = cand;
        }
        x
    }

    fn barrier_value(&self, x: &DVector<f64>, t: f64) -> f64 {
        if x.iter().any(|&v| v <= 0.0) {
            return f64::INFINITY;
        }
        let f = self.objective(x.as_slice());
        t * f - x.iter().map(|v| v.ln()).sum::<f64>()
    }

    /// Gradient and Hessian of the objective.
    fn derivatives(&self, x: &[f64]) -> (DVector<f64>, DMatrix<f64>) {
        let n = x.len();
        let mut g = DVector::zeros(n);
        let mut h = DMatrix::zeros(n, n);
        let mut v: Vec<(usize, f64)> = Vec::new();
        for term in &self.terms {
            let t = term.num.eval(x);
            let s = term.den.eval(x);
            let ratio = t / s;
            let lr = ratio.ln() + 1.0;
            for &(i, a) in &term.num.terms {
                g[i] += a * lr;
            }
            for &(i, b) in &term.den.terms {
                g[i] -= b * ratio;
            }
            // Hessian = v vᵀ / t with v = a − (t/s) b
            v.clear();
            v.extend(term.num.terms.iter().copied());
            v.extend(term.den.terms.iter().map(|&(i, b)| (i, -ratio * b)));
            for &(i, vi) in &v {
                for &(j, vj) in &v {
                    h[(i, j)] += vi * vj / t;
                }
            }
        }
        (g, h)
    }

    /// Newton step for the barrier problem in scaled variables. The system is
    /// solved for the multiplier correction, so its right-hand side is the
    /// stationarity residual at `y` rather than the raw gradient.
    fn newton_step(&self, x: &DVector<f64>, t: f64, y: &DVector<f64>) -> Option<NewtonStep> {
        let n = x.len();
        let m = self.a.nrows();
        let (gf, hf) = self.derivatives(x.as_slice());
        let grad = t * &gf - x.map(|v| 1.0 / v);
        let mut k = DMatrix::zeros(n + m, n + m);
        for i in 0..n {
            for j in 0..n {
                k[(i, j)] = t * x[i] * hf[(i, j)] * x[j];
            }
            k[(i, i)] += 1.0;
        }
        for r in 0..m {
            for j in 0..n {
                let v = self.a[(r, j)] * x[j];
                k[(n + r, j)] = v;
                k[(j, n + r)] = v;
            }
        }
        let rp = &self.a * x - &self.b;
        let mut rhs = DVector::zeros(n + m);
        for i in 0..n {
            let coupling: f64 = (0..m).map(|r| k[(n + r, i)] * y[r]).sum();
            rhs[i] = -x[i] * grad[i] - coupling;
        }
        for r in 0..m {
            rhs[n + r] = -rp[r];
        }
        let sol = linalg::solve_refined(&k, &rhs)?;
        if sol.iter().any(|v| !v.is_finite()) {
            return None;
        }
        let du = sol.rows(0, n).into_owned();
        let decrement_sq = du.dot(&(k.view((0, 0), (n, n)) * &du));
        Some(NewtonStep {
            dx: du.component_mul(x),
            grad,
            y: y + sol.rows(n, m),
            decrement_sq,
            primal_res: rp.amax(),
        })
    }

    fn line_search(&self, x: &DVector<f64>, dx: &DVector<f64>, t: f64, grad: &DVector<f64>) -> Option<f64> {
        let mut s = 1.0f64;
        // stay strictly inside the positive orthant
        for (xi, di) in x.iter().zip(dx.iter()) {
            if *di < 0.0 {
                s = s.min(-0.99 * xi / di);
            }
        }
        let f0 = self.barrier_value(x, t);
        let slope = grad.dot(dx);
        while s > 1e-14 {
            let cand = x + s * dx;
            let f1 = self.barrier_value(&cand, t);
            if f1.is_finite() && f1 <= f0 + 0.01 * s * slope.min(0.0) {
                return Some(s);
            }
            // rounding floor: accept tiny non-increasing steps
            if f1.is_finite() && (f1 - f0).abs() <= 1e-14 * f0.abs().max(1.0) {
                return Some(s);
            }
            s *= 0.5;
        }
        None
    }

    /// KKT residual of the barrier-centred point, using the multipliers of one
    /// more Newton system at `x`.
    fn kkt_residual(&self, x: &DVector<f64>, t: f64) -> Option<f64> {
        let n = x.len();
        let m = self.a.nrows();
        let (gf, _) = self.derivatives(x.as_slice());
        // least-squares multipliers for X(∇f − z + Aᵀy) = 0 with z = 1/(t x)
        let ax = DMatrix::from_fn(m, n, |r, j| self.a[(r, j)] * x[j]);
        let target = DVector::from_fn(n, |i, _| -(x[i] * gf[i] - 1.0 / t));
        let y = if m > 0 {
            let normal = &ax * ax.transpose();
            linalg::solve(normal, &(&ax * &target))?
        } else {
            DVector::zeros(0)
        };
        let station = DVector::from_fn(n, |i, _| {
            x[i] * gf[i] - 1.0 / t + (ax.column(i).dot(&y))
        });
        let primal = (&self.a * x - &self.b).amax();
        let comp = 1.0 / t;
        Some(station.amax().max(primal).max(comp))
    }
}
