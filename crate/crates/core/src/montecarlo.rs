//! Path simulation and empirical decay rates of `P(L_n ∈ A)`.

use std::collections::HashMap;
use std::fmt::Write as _;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::chain::{BallSet, ChainSpec, Dist, Kernel};
use crate::error::{Error, Result};
use crate::report::extended_real;
use crate::transport::ball_membership;

/// Lengths with fewer hits than this are left out of the fit.
pub const MIN_HITS: u64 = 10;
/// Paths per parallel work unit.
const CHUNK: usize = 4096;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimPlan {
    pub spec: ChainSpec,
    /// Kernel actually simulated, e.g. `π` or a worst-case `π̂`.
    pub play_kernel: Kernel,
    pub ball: BallSet,
    pub lengths: Vec<usize>,
    pub paths_per_length: usize,
    pub seed: u64,
}

impl SimPlan {
    pub const DEFAULT_PATHS: usize = 200_000;
    pub const DEFAULT_SEED: u64 = 42;

    pub fn default_lengths() -> Vec<usize> {
        (40..=160).step_by(20).collect()
    }

    /// Lengths 40..=160 step 20, 200 000 paths each, seed 42.
    pub fn with_defaults(spec: ChainSpec, play_kernel: Kernel, ball: BallSet) -> Self {
        Self {
            spec,
            play_kernel,
            ball,
            lengths: Self::default_lengths(),
            paths_per_length: Self::DEFAULT_PATHS,
            seed: Self::DEFAULT_SEED,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lengths.is_empty() {
            return Err(Error::InvalidArgument("no path lengths given".into()));
        }
        if self.lengths[0] == 0 || self.lengths.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument(
                "path lengths must be positive and strictly increasing".into(),
            ));
        }
        if self.paths_per_length == 0 {
            return Err(Error::InvalidArgument("paths per length must be at least 1".into()));
        }
        let n = self.spec.n();
        for (what, found) in [("play kernel", self.play_kernel.n()), ("ball center", self.ball.center.len())] {
            if found != n {
                return Err(Error::DimensionMismatch {
                    what,
                    expected: n,
                    found,
                });
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateEstimate {
    pub lengths: Vec<usize>,
    pub hits: Vec<u64>,
    pub paths_per_length: usize,
    pub p_hat: Vec<f64>,
    /// Fitted exponential rate (minus the slope of `ln p̂_n` in `n`).
    #[serde(with = "extended_real")]
    pub slope: f64,
    #[serde(with = "extended_real")]
    pub intercept: f64,
    #[serde(with = "extended_real")]
    pub stderr: f64,
    /// Lengths entering the fit.
    pub usable_lengths: Vec<usize>,
    pub usable: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerdictStatus {
    Pass,
    Fail,
    InsufficientData,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub status: VerdictStatus,
    pub analytic: f64,
    #[serde(with = "extended_real")]
    pub slope: f64,
    #[serde(with = "extended_real")]
    pub stderr: f64,
    pub rel_tol: f64,
    /// Allowed absolute deviation.
    #[serde(with = "extended_real")]
    pub margin: f64,
    #[serde(with = "extended_real")]
    pub deviation: f64,
}

impl Verdict {
    pub fn passed(&self) -> bool {
        self.status == VerdictStatus::Pass
    }
}

struct Sampler {
    initial: WeightedIndex<f64>,
    rows: Vec<WeightedIndex<f64>>,
}

impl Sampler {
    fn new(pi0: &Dist, kernel: &Kernel) -> Result<Self> {
        let table = |d: &Dist| {
            WeightedIndex::new(d.as_slice().iter().copied())
                .map_err(|e| Error::InvalidDist(format!("cannot sample from {:?}: {e}", d.as_slice())))
        };
        Ok(Self {
            initial: table(pi0)?,
            rows: kernel.rows().iter().map(table).collect::<Result<_>>()?,
        })
    }

    /// Visit counts of one path of `len` states.
    fn path_counts(&self, rng: &mut ChaCha8Rng, len: usize, counts: &mut [u32]) {
        counts.fill(0);
        let mut x = self.initial.sample(rng);
        counts[x] += 1;
        for _ in 1..len {
            x = self.rows[x].sample(rng);
            counts[x] += 1;
        }
    }
}

/// Generator of path `path` at length index `length_idx`. Independent of
/// scheduling, so any worker count gives identical results.
fn path_rng(seed: u64, length_idx: usize, path: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((length_idx as u64) << 40) | path as u64);
    rng
}

fn count_hits(plan: &SimPlan, sampler: &Sampler, length_idx: usize) -> Result<u64> {
    let len = plan.lengths[length_idx];
    let n = plan.spec.n();
    let total = plan.paths_per_length;
    let chunks = total.div_ceil(CHUNK);
    let per_chunk = (0..chunks)
        .into_par_iter()
        .map_init(
            || (HashMap::<Vec<u32>, bool>::new(), vec![0u32; n]),
            |(cache, counts), c| -> Result<u64> {
                let mut hits = 0;
                for path in c * CHUNK..((c + 1) * CHUNK).min(total) {
                    let mut rng = path_rng(plan.seed, length_idx, path);
                    sampler.path_counts(&mut rng, len, counts);
                    let inside = match cache.get(counts.as_slice()) {
                        Some(&b) => b,
                        None => {
                            let l = Dist::from_raw(counts.iter().map(|&k| k as f64 / len as f64).collect());
                            let b = ball_membership(&plan.spec.space, &l, &plan.ball)?;
                            cache.insert(counts.clone(), b);
                            b
                        }
                    };
                    hits += inside as u64;
                }
                Ok(hits)
            },
        )
        .collect::<Result<Vec<u64>>>()?;
    Ok(per_chunk.into_iter().sum())
}

/// Simulates the plan on the current rayon pool and fits the decay rate.
pub fn simulate_paths(plan: &SimPlan) -> Result<RateEstimate> {
    plan.validate()?;
    let sampler = Sampler::new(&plan.spec.pi0, &plan.play_kernel)?;
    let hits = (0..plan.lengths.len())
        .map(|i| count_hits(plan, &sampler, i))
        .collect::<Result<Vec<u64>>>()?;
    Ok(fit(&plan.lengths, hits, plan.paths_per_length))
}

/// Least-squares fit of `ln p̂_n = a − slope · n` over lengths with at least
/// [`MIN_HITS`] hits. The standard error propagates the binomial variance
/// `(1 − p) / (N p)` of each `ln p̂_n` through the regression weights.
pub fn fit(lengths: &[usize], hits: Vec<u64>, paths: usize) -> RateEstimate {
    let big_n = paths as f64;
    let p_hat: Vec<f64> = hits.iter().map(|&h| h as f64 / big_n).collect();
    let idx: Vec<usize> = (0..lengths.len()).filter(|&i| hits[i] >= MIN_HITS).collect();
    let usable_lengths: Vec<usize> = idx.iter().map(|&i| lengths[i]).collect();
    let mut est = RateEstimate {
        lengths: lengths.to_vec(),
        hits,
        paths_per_length: paths,
        p_hat,
        slope: f64::NAN,
        intercept: f64::NAN,
        stderr: f64::NAN,
        usable_lengths,
        usable: false,
        note: None,
    };
    if idx.len() < 2 {
        est.note = Some(if est.hits.iter().all(|&h| h == 0) {
            "no path hit the set at any length".into()
        } else {
            format!("fewer than two lengths with at least {MIN_HITS} hits")
        });
        return est;
    }
    let xs: Vec<f64> = idx.iter().map(|&i| lengths[i] as f64).collect();
    let ys: Vec<f64> = idx.iter().map(|&i| est.p_hat[i].ln()).collect();
    let k = xs.len() as f64;
    let x_bar = xs.iter().sum::<f64>() / k;
    let y_bar = ys.iter().sum::<f64>() / k;
    let sxx: f64 = xs.iter().map(|x| (x - x_bar).powi(2)).sum();
    let b: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - x_bar) * (y - y_bar)).sum::<f64>() / sxx;
    let var: f64 = idx
        .iter()
        .zip(&xs)
        .map(|(&i, x)| {
            let p = est.p_hat[i];
            let w = (x - x_bar) / sxx;
            w * w * (1.0 - p) / (big_n * p)
        })
        .sum();
    est.slope = -b;
    // keep an exact zero for constant series
    if est.slope == 0.0 {
        est.slope = 0.0;
    }
    est.intercept = y_bar - b * x_bar;
    est.stderr = var.sqrt();
    est.usable = true;
    est
}

/// Pass iff `|slope − analytic| ≤ rel_tol · analytic + 2 · stderr`; for a zero
/// analytic rate the allowance is `2 · stderr + 1e-3`.
pub fn compare_rates(analytic: f64, estimate: &RateEstimate, rel_tol: f64) -> Verdict {
    let mut v = Verdict {
        status: VerdictStatus::InsufficientData,
        analytic,
        slope: estimate.slope,
        stderr: estimate.stderr,
        rel_tol,
        margin: f64::NAN,
        deviation: f64::NAN,
    };
    if !estimate.usable {
        return v;
    }
    v.margin = if analytic == 0.0 {
        2.0 * estimate.stderr + 1e-3
    } else {
        rel_tol * analytic.abs() + 2.0 * estimate.stderr
    };
    v.deviation = (estimate.slope - analytic).abs();
    v.status = if v.deviation <= v.margin {
        VerdictStatus::Pass
    } else {
        VerdictStatus::Fail
    };
    v
}

/// Plot series with header `n,hits,p_hat,ln_p_hat`.
pub fn plot_csv(estimate: &RateEstimate) -> String {
    let mut out = String::from("n,hits,p_hat,ln_p_hat\n");
    for ((n, h), p) in estimate.lengths.iter().zip(&estimate.hits).zip(&estimate.p_hat) {
        let ln = if *p > 0.0 { p.ln().to_string() } else { "-inf".to_string() };
        writeln!(out, "{n},{h},{p},{ln}").expect("writing to a String");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::MetricSpace;
    use crate::test_support::example_spec;

    fn estimate(slope: f64, stderr: f64) -> RateEstimate {
        let mut e = fit(&[1, 2], vec![10, 10], 100);
        e.slope = slope;
        e.stderr = stderr;
        e
    }

    #[test]
    fn verdict_rule() {
        assert!(compare_rates(0.0910, &estimate(0.0850, 0.004), 0.2).passed());
        assert_eq!(compare_rates(0.05, &estimate(0.20, 0.001), 0.2).status, VerdictStatus::Fail);
        assert!(compare_rates(0.0, &estimate(0.001, 0.002), 0.2).passed());
        let unusable = fit(&[1, 2], vec![0, 0], 100);
        assert!(!unusable.usable);
        assert_eq!(compare_rates(0.1, &unusable, 0.2).status, VerdictStatus::InsufficientData);
    }

    #[test]
    fn fit_recovers_exact_exponential() {
        let lengths = [10, 20, 30, 40];
        let paths = 1_000_000_000usize;
        let hits = lengths
            .iter()
            .map(|&n| ((-0.05 * n as f64).exp() * paths as f64).round() as u64)
            .collect();
        let e = fit(&lengths, hits, paths);
        assert!((e.slope - 0.05).abs() < 1e-6);
        assert!(e.stderr < 1e-5);
    }

    #[test]
    fn absorbing_center_never_leaves_the_ball() {
        let spec = ChainSpec::new(MetricSpace::discrete(3), Dist::dirac(3, 2), Kernel::identity(3), 0.0).unwrap();
        let plan = SimPlan {
            play_kernel: spec.kernel.clone(),
            ball: BallSet::new(Dist::dirac(3, 2), 0.0).unwrap(),
            lengths: vec![5, 10, 15],
            paths_per_length: 500,
            seed: 7,
            spec,
        };
        let e = simulate_paths(&plan).unwrap();
        assert_eq!(e.p_hat, vec![1.0; 3]);
        assert_eq!(e.slope, 0.0);
        assert!(compare_rates(0.0, &e, 0.2).passed());
    }

    #[test]
    fn seeded_runs_are_reproducible_and_monotone_in_kappa() {
        let spec = example_spec(0.0);
        let mut plan = SimPlan::with_defaults(spec.clone(), spec.kernel.clone(), BallSet::new(Dist::dirac(3, 2), 0.2).unwrap());
        plan.lengths = vec![10, 20, 30];
        plan.paths_per_length = 5000;
        let a = simulate_paths(&plan).unwrap();
        let b = simulate_paths(&plan).unwrap();
        assert_eq!(a.hits, b.hits);
        plan.ball.kappa = 0.3;
        let wider = simulate_paths(&plan).unwrap();
        assert!(wider.hits.iter().zip(&a.hits).all(|(w, h)| w >= h));
        plan.seed += 1;
        assert_ne!(simulate_paths(&plan).unwrap().hits, wider.hits);
    }

    #[test]
    fn csv_format() {
        let e = fit(&[40, 60], vec![4, 0], 8);
        let csv = plot_csv(&e);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "n,hits,p_hat,ln_p_hat");
        assert_eq!(lines[2], "60,0,0,-inf");
        assert!(lines[1].starts_with("40,4,0.5,-0.69"));
    }

    #[test]
    fn invalid_plans() {
        let spec = example_spec(0.0);
        let mut plan = SimPlan::with_defaults(spec.clone(), spec.kernel.clone(), BallSet::new(Dist::dirac(3, 2), 0.2).unwrap());
        plan.lengths = vec![20, 10];
        assert!(simulate_paths(&plan).is_err());
        plan.lengths = vec![];
        assert!(simulate_paths(&plan).is_err());
        plan.lengths = vec![10];
        plan.paths_per_length = 0;
        assert!(simulate_paths(&plan).is_err());
    }
}
