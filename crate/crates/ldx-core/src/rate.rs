//! Large-deviations verification machinery: rate functions, Monte Carlo
//! estimation of the probability of false selection, and decay-slope fits.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::env::sample_step;
use crate::error::{LdxError, Result};
use crate::estimator::EmpiricalModel;
use crate::lazygradient::{run_baseline, run_lazygradient, BaselineAlgo, RunConfig};
use crate::mdp::{value_iteration, TabularMdp, DEFAULT_VI_TOL};
use crate::solver::Allocation;

/// z-score of the two-sided 90% normal interval.
pub const Z_90: f64 = 1.645;

/// Relative entropy between two distributions on the same support.
///
/// Uses the convention `0 log 0 = 0`; a point where `x > 0` but `p = 0`
/// signals an infinite rate.
pub fn kl_rate(x: &[f64], p: &[f64]) -> Result<f64> {
    if x.len() != p.len() {
        return Err(LdxError::Validation(format!(
            "length mismatch: {} vs {}",
            x.len(),
            p.len()
        )));
    }
    for (name, v) in [("x", x), ("p", p)] {
        let sum: f64 = v.iter().sum();
        if v.iter().any(|&e| e < 0.0) || (sum - 1.0).abs() > 1e-9 {
            return Err(LdxError::Validation(format!(
                "{name} is not a probability vector (sum {sum})"
            )));
        }
    }
    let mut total = 0.0;
    for (&xi, &pi) in x.iter().zip(p.iter()) {
        if xi == 0.0 {
            continue;
        }
        if pi == 0.0 {
            return Err(LdxError::InfiniteRate(
                "x puts mass where the reference law has none".into(),
            ));
        }
        total += xi * (xi / pi).ln();
    }
    Ok(total.max(0.0))
}

/// Cramer rate of a Bernoulli mean estimate: binary relative entropy of `y`
/// against `m`, both strictly inside (0, 1).
pub fn bernoulli_reward_rate(y: f64, m: f64) -> Result<f64> {
    if !(0.0 < y && y < 1.0 && 0.0 < m && m < 1.0) {
        return Err(LdxError::InfiniteRate(format!(
            "boundary input: y={y}, m={m}"
        )));
    }
    Ok(y * (y / m).ln() + (1.0 - y) * ((1.0 - y) / (1.0 - m)).ln())
}

/// Rate of the hard instance's critical deviation: the loop probability
/// moves from `p` up to `p + alpha + eps`.
///
/// Returns the exact binary relative entropy together with its quadratic
/// leading-order expansion `(alpha+eps)^2/(2p) + (alpha+eps)^2/(2(1-p))`.
pub fn hard_instance_rate(p: f64, alpha: f64, eps: f64) -> Result<(f64, f64)> {
    let shift = alpha + eps;
    if !(0.0 < p && shift > 0.0 && p + shift < 1.0) {
        return Err(LdxError::Validation(format!(
            "need 0 < p < p + alpha + eps < 1, got p={p}, alpha={alpha}, eps={eps}"
        )));
    }
    let exact = bernoulli_reward_rate(p + shift, p)?;
    let leading = shift * shift / (2.0 * p) + shift * shift / (2.0 * (1.0 - p));
    Ok((exact, leading))
}

/// Monte Carlo estimate of the probability of false selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PfsEstimate {
    pub budget: usize,
    pub replications: usize,
    pub failures: usize,
    pub pfs: f64,
    /// Half-width of the 90% normal-approximation interval.
    pub ci_half: f64,
}

impl PfsEstimate {
    pub fn from_counts(budget: usize, replications: usize, failures: usize) -> Self {
        let pfs = failures as f64 / replications as f64;
        let ci_half = Z_90 * (pfs * (1.0 - pfs) / replications as f64).sqrt();
        PfsEstimate {
            budget,
            replications,
            failures,
            pfs,
            ci_half,
        }
    }

    pub fn pcs(&self) -> f64 {
        1.0 - self.pfs
    }
}

/// Agent configurations the estimator can replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "agent", rename_all = "snake_case")]
pub enum AgentSpec {
    /// The adaptive agent; per-replication budget and seed are filled in.
    LazyGradient { config: RunConfig },
    /// One of the trajectory baselines.
    Baseline { algo: BaselineAlgo },
    /// Generative sampling with a fixed pair allocation; counts are the
    /// largest-remainder rounding of `weights * budget`.
    FixedAllocation { weights: Vec<f64> },
    /// Always outputs the true optimal policy (plumbing check).
    Oracle,
}

/// Deterministic largest-remainder apportionment of `budget` samples.
fn apportion(weights: &[f64], budget: usize) -> Vec<usize> {
    let total: f64 = weights.iter().sum();
    let mut counts: Vec<usize> = Vec::with_capacity(weights.len());
    let mut remainders: Vec<(f64, usize)> = Vec::with_capacity(weights.len());
    let mut assigned = 0usize;
    for (i, &w) in weights.iter().enumerate() {
        let share = w / total * budget as f64;
        let floor = share.floor() as usize;
        counts.push(floor);
        assigned += floor;
        remainders.push((share - floor as f64, i));
    }
    remainders.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    for k in 0..(budget - assigned) {
        counts[remainders[k % remainders.len()].1] += 1;
    }
    counts
}

fn run_fixed_allocation(
    env: &TabularMdp,
    weights: &[f64],
    budget: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    let (s_n, a_n) = (env.num_states(), env.num_actions());
    if weights.len() != s_n * a_n {
        return Err(LdxError::Validation(format!(
            "allocation has {} weights for {} pairs",
            weights.len(),
            s_n * a_n
        )));
    }
    if weights.iter().any(|&w| w < 0.0) || weights.iter().sum::<f64>() <= 0.0 {
        return Err(LdxError::Validation(
            "allocation weights must be non-negative with positive mass".into(),
        ));
    }
    let counts = apportion(weights, budget);
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut model = EmpiricalModel::new(s_n, a_n);
    for (idx, &n) in counts.iter().enumerate() {
        let (s, a) = (idx / a_n, idx % a_n);
        for _ in 0..n {
            let rec = sample_step(env, s, a, &mut rng);
            model.record_transition(&rec);
        }
    }
    let empirical = model.empirical_mdp(env.gamma())?;
    Ok(value_iteration(&empirical.mdp, DEFAULT_VI_TOL)?
        .pi_star_actions()
        .to_vec())
}

/// Run seeded replications of an agent and count how often the returned
/// policy differs from the true optimum at any state.
pub fn estimate_pfs(
    env: &TabularMdp,
    agent: &AgentSpec,
    budget: usize,
    reps: usize,
    base_seed: u64,
) -> Result<PfsEstimate> {
    if reps < 1 {
        return Err(LdxError::Validation("reps must be at least 1".into()));
    }
    let truth = value_iteration(env, DEFAULT_VI_TOL)?;
    let pi_star = truth.pi_star_actions().to_vec();
    let mut failures = 0usize;
    for rep in 0..reps {
        let seed = base_seed.wrapping_add(rep as u64);
        let pi_hat: Vec<usize> = match agent {
            AgentSpec::LazyGradient { config } => {
                let mut cfg = config.clone();
                cfg.budget = budget;
                cfg.seed = seed;
                run_lazygradient(env, &cfg)?.pi_hat_actions().to_vec()
            }
            AgentSpec::Baseline { algo } => {
                run_baseline(env, *algo, budget, seed)?.pi_hat_actions().to_vec()
            }
            AgentSpec::FixedAllocation { weights } => {
                run_fixed_allocation(env, weights, budget, seed)?
            }
            AgentSpec::Oracle => pi_star.clone(),
        };
        if pi_hat != pi_star {
            failures += 1;
        }
    }
    Ok(PfsEstimate::from_counts(budget, reps, failures))
}

/// Result of fitting `-log pfs` against the budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub points_used: usize,
    pub points_dropped: usize,
}

/// Least-squares fit of the decay rate from (budget, pfs) points. Points
/// with `pfs` outside (0, 1) carry no slope information at this replication
/// count and are dropped.
pub fn fit_decay_rate(points: &[(usize, f64)]) -> Result<RateFit> {
    let usable: Vec<(f64, f64)> = points
        .iter()
        .filter(|(_, pfs)| 0.0 < *pfs && *pfs < 1.0)
        .map(|&(t, pfs)| (t as f64, -(pfs.ln())))
        .collect();
    let dropped = points.len() - usable.len();
    if usable.len() < 3 {
        return Err(LdxError::Validation(format!(
            "need at least 3 points with pfs in (0,1), have {}",
            usable.len()
        )));
    }
    let n = usable.len() as f64;
    let mean_t = usable.iter().map(|(t, _)| t).sum::<f64>() / n;
    let mean_y = usable.iter().map(|(_, y)| y).sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    let mut syy = 0.0;
    for &(t, y) in &usable {
        sxx += (t - mean_t) * (t - mean_t);
        sxy += (t - mean_t) * (y - mean_y);
        syy += (y - mean_y) * (y - mean_y);
    }
    if sxx == 0.0 {
        return Err(LdxError::Validation(
            "all points share the same budget".into(),
        ));
    }
    let slope = sxy / sxx;
    let intercept = mean_y - slope * mean_t;
    let ss_res: f64 = usable
        .iter()
        .map(|&(t, y)| {
            let fitted = intercept + slope * t;
            (y - fitted) * (y - fitted)
        })
        .sum();
    let r_squared = if syy == 0.0 { 1.0 } else { 1.0 - ss_res / syy };
    Ok(RateFit {
        slope,
        intercept,
        r_squared,
        points_used: usable.len(),
        points_dropped: dropped,
    })
}

/// Convenience: allocation wrapper for fixed-allocation agents.
pub fn fixed_allocation_agent(allocation: &Allocation) -> AgentSpec {
    AgentSpec::FixedAllocation {
        weights: allocation.raw().to_vec(),
    }
}
