//! Exact Wasserstein-1 distance on a finite metric space.
//!
//! The transportation problem is solved by the classical transportation simplex:
//! a north-west corner start, potentials read off the basis tree, Bland's
//! smallest-index rule for both the entering and the leaving cell. The dual
//! certificate is the c-transform of the column potentials, which is
//! 1-Lipschitz for a metric cost.

use serde::{Deserialize, Serialize};

use crate::chain::{BallSet, Dist, MetricSpace};
use crate::error::{Error, Result};

/// Absolute slack used by [`ball_membership`] for the closed ball boundary.
pub const BALL_SLACK: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransportPlan {
    pub gamma: Vec<Vec<f64>>,
    pub cost: f64,
}

impl TransportPlan {
    pub fn row_sums(&self) -> Vec<f64> {
        self.gamma.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let n = self.gamma.first().map_or(0, Vec::len);
        (0..n).map(|j| self.gamma.iter().map(|r| r[j]).sum()).collect()
    }
}

/// Kantorovich potential: `W1(μ, ν) = Σ f(i) (μ(i) − ν(i))`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DualPotential {
    pub f: Vec<f64>,
}

impl DualPotential {
    /// Largest violation of `|f(i) − f(j)| ≤ d(i, j)`.
    pub fn lipschitz_excess(&self, space: &MetricSpace) -> f64 {
        let n = self.f.len();
        let mut worst = f64::NEG_INFINITY;
        for i in 0..n {
            for j in 0..n {
                worst = worst.max((self.f[i] - self.f[j]).abs() - space.d(i, j));
            }
        }
        worst
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct W1 {
    pub value: f64,
    pub plan: TransportPlan,
    pub potential: DualPotential,
    /// `|primal − dual|`.
    pub gap: f64,
}

/// Wasserstein-1 distance between `mu` and `nu` with an optimal plan and potential.
pub fn w1(space: &MetricSpace, mu: &Dist, nu: &Dist) -> Result<W1> {
    let n = space.n();
    for d in [mu, nu] {
        if d.len() != n {
            return Err(Error::DimensionMismatch {
                what: "distribution",
                expected: n,
                found: d.len(),
            });
        }
    }
    let cost = space.matrix();
    let sol = transport_simplex(cost, mu.as_slice(), nu.as_slice());

    // c-transform of the column potentials
    let f: Vec<f64> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| cost[i][j] - sol.v[j])
                .fold(f64::INFINITY, f64::min)
        })
        .collect();

    let primal: f64 = sol
        .gamma
        .iter()
        .zip(cost)
        .flat_map(|(g, c)| g.iter().zip(c).map(|(a, b)| a * b))
        .sum();
    let dual: f64 = f
        .iter()
        .zip(mu.as_slice().iter().zip(nu.as_slice()))
        .map(|(fi, (m, v))| fi * (m - v))
        .sum();
    Ok(W1 {
        value: primal.max(0.0),
        plan: TransportPlan {
            gamma: sol.gamma,
            cost: primal,
        },
        potential: DualPotential { f },
        gap: (primal - dual).abs(),
    })
}

/// Whether `nu` lies in the closed ball, with [`BALL_SLACK`] absolute slack.
pub fn ball_membership(space: &MetricSpace, nu: &Dist, ball: &BallSet) -> Result<bool> {
    Ok(w1(space, nu, &ball.center)?.value <= ball.kappa + BALL_SLACK)
}

pub(crate) struct SimplexSolution {
    pub gamma: Vec<Vec<f64>>,
    #[allow(dead_code)]
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

/// Balanced transportation problem `min ⟨cost, γ⟩` over couplings of
/// `supply` and `demand`. Both marginals must carry the same total mass.
pub(crate) fn transport_simplex(cost: &[Vec<f64>], supply: &[f64], demand: &[f64]) -> SimplexSolution {
    let m = supply.len();
    let n = demand.len();
    let idx = |i: usize, j: usize| i * n + j;
    let cmax = cost
        .iter()
        .flat_map(|r| r.iter().copied())
        .fold(0.0f64, |a, b| a.max(b.abs()));
    let tol = 1e-12 * (1.0 + cmax);

    let mut flow = vec![0.0; m * n];
    let mut basic = vec![false; m * n];

    // North-west corner: walks from (0,0) to (m-1,n-1), visiting m+n-1 cells.
    let mut a = supply.to_vec();
    let mut b = demand.to_vec();
    let (mut i, mut j) = (0, 0);
    loop {
        let k = idx(i, j);
        basic[k] = true;
        if i == m - 1 && j == n - 1 {
            flow[k] = a[i].max(0.0);
            break;
        }
        let q = a[i].min(b[j]).max(0.0);
        flow[k] = q;
        a[i] -= q;
        b[j] -= q;
        if i == m - 1 {
            j += 1;
        } else if j == n - 1 || a[i] <= b[j] {
            i += 1;
        } else {
            j += 1;
        }
    }

    let mut u = vec![0.0; m];
    let mut v = vec![0.0; n];
    // Bland's rule terminates; the cap only guards against NaN input.
    let max_iter = 50 * (m + n) * (m + n) + 1000;
    for _ in 0..max_iter {
        potentials(cost, &basic, m, n, &mut u, &mut v);
        let entering = (0..m * n).find(|&k| {
            let (i, j) = (k / n, k % n);
            !basic[k] && cost[i][j] - u[i] - v[j] < -tol
        });
        let Some(enter) = entering else { break };
        let (ei, ej) = (enter / n, enter % n);

        // Tree path from column node ej to row node ei; its edges alternate −,+,…,−.
        let path = tree_path(&basic, m, n, m + ej, ei);
        let minus: Vec<usize> = path.iter().step_by(2).copied().collect();
        let theta = minus.iter().map(|&k| flow[k]).fold(f64::INFINITY, f64::min);
        let leave = *minus
            .iter()
            .filter(|&&k| flow[k] <= theta)
            .min()
            .expect("cycle has a minus cell");

        flow[enter] += theta;
        for (pos, &k) in path.iter().enumerate() {
            if pos % 2 == 0 {
                flow[k] -= theta;
            } else {
                flow[k] += theta;
            }
        }
        flow[leave] = 0.0;
        basic[leave] = false;
        basic[enter] = true;
    }
    potentials(cost, &basic, m, n, &mut u, &mut v);

    let gamma = (0..m)
        .map(|i| (0..n).map(|j| flow[idx(i, j)].max(0.0)).collect())
        .collect();
    SimplexSolution { gamma, u, v }
}

/// Solves `u[i] + v[j] = cost[i][j]` on the basis tree with `u[0] = 0`.
fn potentials(cost: &[Vec<f64>], basic: &[bool], m: usize, n: usize, u: &mut [f64], v: &mut [f64]) {
    let mut seen = vec![false; m + n];
    let mut stack = vec![0usize];
    seen[0] = true;
    u[0] = 0.0;
    while let Some(node) = stack.pop() {
        if node < m {
            let i = node;
            for j in 0..n {
                if basic[i * n + j] && !seen[m + j] {
                    v[j] = cost[i][j] - u[i];
                    seen[m + j] = true;
                    stack.push(m + j);
                }
            }
        } else {
            let j = node - m;
            for i in 0..m {
                if basic[i * n + j] && !seen[i] {
                    u[i] = cost[i][j] - v[j];
                    seen[i] = true;
                    stack.push(i);
                }
            }
        }
    }
}

/// Cells on the basis-tree path from node `from` to node `to`, in walking order.
/// Nodes `0..m` are rows, `m..m+n` are columns.
fn tree_path(basic: &[bool], m: usize, n: usize, from: usize, to: usize) -> Vec<usize> {
    let mut parent: Vec<Option<(usize, usize)>> = vec![None; m + n];
    let mut seen = vec![false; m + n];
    let mut queue = std::collections::VecDeque::from([from]);
    seen[from] = true;
    while let Some(node) = queue.pop_front() {
        if node == to {
            break;
        }
        let neighbours: Vec<(usize, usize)> = if node < m {
            (0..n)
                .filter(|&j| basic[node * n + j])
                .map(|j| (m + j, node * n + j))
                .collect()
        } else {
            let j = node - m;
            (0..m)
                .filter(|&i| basic[i * n + j])
                .map(|i| (i, i * n + j))
                .collect()
        };
        for (next, cell) in neighbours {
            if !seen[next] {
                seen[next] = true;
                parent[next] = Some((node, cell));
                queue.push_back(next);
            }
        }
    }
    let mut cells = Vec::new();
    let mut node = to;
    while node != from {
        let (prev, cell) = parent[node].expect("basis is a spanning tree");
        cells.push(cell);
        node = prev;
    }
    cells.reverse();
    cells
}
