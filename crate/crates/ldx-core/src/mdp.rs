//! Tabular MDP model, exact planning, and the gap/variance statistics that
//! feed the allocation surrogate.

use ndarray::{Array1, Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{LdxError, Result};
use crate::linalg;

/// Default sup-norm tolerance for value iteration.
pub const DEFAULT_VI_TOL: f64 = 1e-10;
/// Iteration cap for value iteration.
pub const VI_ITER_CAP: usize = 1_000_000;
/// Two actions whose Q-values sit closer than this are treated as tied.
pub const TIE_TOL: f64 = 1e-9;
/// Transition rows must sum to one within this tolerance.
pub const ROW_SUM_TOL: f64 = 1e-12;

/// Reward noise attached to one state-action pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum RewardNoise {
    /// Mean plus zero-mean Gaussian noise of the given variance.
    Gaussian { var: f64 },
    /// Realized reward is Bernoulli with the stored mean.
    Bernoulli,
}

impl RewardNoise {
    /// Variance of the realized reward given its mean.
    pub fn variance(&self, mean: f64) -> f64 {
        match self {
            RewardNoise::Gaussian { var } => *var,
            RewardNoise::Bernoulli => mean * (1.0 - mean),
        }
    }
}

/// An infinite-horizon discounted tabular MDP.
///
/// Transition rows are stochastic, with one deliberate exception: models
/// produced from empirical counts keep all-zero rows for unvisited pairs
/// (callers receive a visited mask alongside them). Planning routines treat a
/// zero row as "no successor mass", which is exactly the empirical-estimate
/// convention; the allocation solver refuses such models unless they are
/// regularized first.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularMdp {
    num_states: usize,
    num_actions: usize,
    transitions: Array3<f64>,
    reward_means: Array2<f64>,
    noise: Array2<RewardNoise>,
    gamma: f64,
}

impl TabularMdp {
    /// Build and validate a fully stochastic model.
    pub fn new(
        transitions: Array3<f64>,
        reward_means: Array2<f64>,
        noise: Array2<RewardNoise>,
        gamma: f64,
    ) -> Result<Self> {
        let mdp = Self::assemble(transitions, reward_means, noise, gamma)?;
        mdp.validate(false)?;
        Ok(mdp)
    }

    /// Build a model that may carry all-zero rows for unvisited pairs.
    pub fn new_allowing_unvisited(
        transitions: Array3<f64>,
        reward_means: Array2<f64>,
        noise: Array2<RewardNoise>,
        gamma: f64,
    ) -> Result<Self> {
        let mdp = Self::assemble(transitions, reward_means, noise, gamma)?;
        mdp.validate(true)?;
        Ok(mdp)
    }

    fn assemble(
        transitions: Array3<f64>,
        reward_means: Array2<f64>,
        noise: Array2<RewardNoise>,
        gamma: f64,
    ) -> Result<Self> {
        let (s, a, s2) = transitions.dim();
        if s == 0 || a == 0 {
            return Err(LdxError::Validation(
                "state and action spaces must be non-empty".into(),
            ));
        }
        if s2 != s {
            return Err(LdxError::Validation(format!(
                "transition tensor is {s}x{a}x{s2}, expected {s}x{a}x{s}"
            )));
        }
        if reward_means.dim() != (s, a) || noise.dim() != (s, a) {
            return Err(LdxError::Validation(
                "reward mean / noise shapes do not match the transition tensor".into(),
            ));
        }
        Ok(TabularMdp {
            num_states: s,
            num_actions: a,
            transitions,
            reward_means,
            noise,
            gamma,
        })
    }

    fn validate(&self, allow_zero_rows: bool) -> Result<()> {
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(LdxError::Validation(format!(
                "discount factor must lie in [0,1), got {}",
                self.gamma
            )));
        }
        for s in 0..self.num_states {
            for a in 0..self.num_actions {
                let row = self.transitions.slice(ndarray::s![s, a, ..]);
                let mut sum = 0.0;
                for &p in row.iter() {
                    if p < 0.0 {
                        return Err(LdxError::Validation(format!(
                            "negative transition probability {p} at ({s},{a})"
                        )));
                    }
                    sum += p;
                }
                let stochastic = (sum - 1.0).abs() <= ROW_SUM_TOL;
                let zero = sum == 0.0;
                if !stochastic && !(allow_zero_rows && zero) {
                    return Err(LdxError::Validation(format!(
                        "transition row ({s},{a}) sums to {sum}, expected 1"
                    )));
                }
                let mean = self.reward_means[[s, a]];
                match self.noise[[s, a]] {
                    RewardNoise::Gaussian { var } => {
                        if var < 0.0 {
                            return Err(LdxError::Validation(format!(
                                "negative reward variance {var} at ({s},{a})"
                            )));
                        }
                    }
                    RewardNoise::Bernoulli => {
                        if !(0.0..=1.0).contains(&mean) {
                            return Err(LdxError::Validation(format!(
                                "Bernoulli reward mean {mean} at ({s},{a}) outside [0,1]"
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn num_pairs(&self) -> usize {
        self.num_states * self.num_actions
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn transitions(&self) -> &Array3<f64> {
        &self.transitions
    }

    pub fn reward_means(&self) -> &Array2<f64> {
        &self.reward_means
    }

    pub fn noise(&self) -> &Array2<RewardNoise> {
        &self.noise
    }

    pub fn transition_row(&self, s: usize, a: usize) -> ndarray::ArrayView1<'_, f64> {
        self.transitions.slice(ndarray::s![s, a, ..])
    }

    pub fn reward_mean(&self, s: usize, a: usize) -> f64 {
        self.reward_means[[s, a]]
    }

    /// Variance of the realized reward at one pair.
    pub fn reward_variance(&self, s: usize, a: usize) -> f64 {
        self.noise[[s, a]].variance(self.reward_means[[s, a]])
    }

    /// Flat index of a pair, row-major in (state, action).
    pub fn pair_index(&self, s: usize, a: usize) -> usize {
        s * self.num_actions + a
    }

    /// Inverse of [`pair_index`](Self::pair_index).
    pub fn pair_of_index(&self, idx: usize) -> (usize, usize) {
        (idx / self.num_actions, idx % self.num_actions)
    }

    /// Conservative ergodicity check: the directed graph with an edge
    /// `s -> s'` whenever *every* action places positive mass on `s'` must be
    /// strongly connected. Any deterministic policy's chain then contains all
    /// those edges, so it is irreducible. Environments built with per-row
    /// uniform mixing always pass; the absorbing hard instance fails.
    pub fn is_ergodic(&self) -> bool {
        let n = self.num_states;
        let mut fwd = vec![Vec::new(); n];
        let mut bwd = vec![Vec::new(); n];
        for (s, s2) in (0..n).flat_map(|s| (0..n).map(move |s2| (s, s2))) {
            let mut min_p = f64::INFINITY;
            for a in 0..self.num_actions {
                min_p = min_p.min(self.transitions[[s, a, s2]]);
            }
            if min_p > 1e-12 {
                fwd[s].push(s2);
                bwd[s2].push(s);
            }
        }
        reaches_all(&fwd, n) && reaches_all(&bwd, n)
    }

    /// FNV-1a hash over the model contents; used to tie a flow polytope to
    /// the model it was built from.
    pub fn content_hash(&self) -> u64 {
        let mut h = Fnv::new();
        h.write_u64(self.num_states as u64);
        h.write_u64(self.num_actions as u64);
        h.write_u64(self.gamma.to_bits());
        for &p in self.transitions.iter() {
            h.write_u64(p.to_bits());
        }
        for &r in self.reward_means.iter() {
            h.write_u64(r.to_bits());
        }
        for n in self.noise.iter() {
            match n {
                RewardNoise::Gaussian { var } => {
                    h.write_u64(1);
                    h.write_u64(var.to_bits());
                }
                RewardNoise::Bernoulli => h.write_u64(2),
            }
        }
        h.finish()
    }
}

fn reaches_all(adj: &[Vec<usize>], n: usize) -> bool {
    let mut seen = vec![false; n];
    let mut stack = vec![0usize];
    seen[0] = true;
    let mut count = 1;
    while let Some(s) = stack.pop() {
        for &s2 in &adj[s] {
            if !seen[s2] {
                seen[s2] = true;
                count += 1;
                stack.push(s2);
            }
        }
    }
    count == n
}

/// FNV-1a, fixed so hashes are stable across platforms and runs.
struct Fnv(u64);

impl Fnv {
    fn new() -> Self {
        Fnv(0xcbf29ce484222325)
    }
    fn write_u64(&mut self, v: u64) {
        for byte in v.to_le_bytes() {
            self.0 ^= byte as u64;
            self.0 = self.0.wrapping_mul(0x100000001b3);
        }
    }
    fn finish(&self) -> u64 {
        self.0
    }
}

/// Stable 64-bit mix of several values, for deriving per-cell seeds.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h = Fnv::new();
    for &p in parts {
        h.write_u64(p);
    }
    // splitmix64 finalizer to spread FNV output
    let mut z = h.finish().wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// A control policy, either deterministic or row-stochastic.
#[derive(Debug, Clone, PartialEq)]
pub enum Policy {
    Deterministic(Vec<usize>),
    Stochastic(Array2<f64>),
}

impl Policy {
    pub fn validate(&self, mdp: &TabularMdp) -> Result<()> {
        match self {
            Policy::Deterministic(actions) => {
                if actions.len() != mdp.num_states() {
                    return Err(LdxError::Validation(format!(
                        "policy has {} entries for {} states",
                        actions.len(),
                        mdp.num_states()
                    )));
                }
                for (s, &a) in actions.iter().enumerate() {
                    if a >= mdp.num_actions() {
                        return Err(LdxError::Validation(format!(
                            "action index {a} at state {s} out of range"
                        )));
                    }
                }
            }
            Policy::Stochastic(rows) => {
                if rows.dim() != (mdp.num_states(), mdp.num_actions()) {
                    return Err(LdxError::Validation(format!(
                        "policy matrix is {:?}, expected ({}, {})",
                        rows.dim(),
                        mdp.num_states(),
                        mdp.num_actions()
                    )));
                }
                for (s, row) in rows.outer_iter().enumerate() {
                    let sum: f64 = row.sum();
                    if (sum - 1.0).abs() > ROW_SUM_TOL {
                        return Err(LdxError::Validation(format!(
                            "policy row {s} sums to {sum}"
                        )));
                    }
                    if row.iter().any(|&p| p < 0.0) {
                        return Err(LdxError::Validation(format!(
                            "negative probability in policy row {s}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Probability of playing `a` at `s`.
    pub fn prob(&self, s: usize, a: usize) -> f64 {
        match self {
            Policy::Deterministic(actions) => {
                if actions[s] == a {
                    1.0
                } else {
                    0.0
                }
            }
            Policy::Stochastic(rows) => rows[[s, a]],
        }
    }
}

/// Output of [`value_iteration`].
#[derive(Debug, Clone)]
pub struct ValueReport {
    pub v: Array1<f64>,
    pub q: Array2<f64>,
    pub pi_star: Policy,
    pub iterations: usize,
    pub residual: f64,
}

impl ValueReport {
    pub fn pi_star_actions(&self) -> &[usize] {
        match &self.pi_star {
            Policy::Deterministic(actions) => actions,
            Policy::Stochastic(_) => unreachable!("value iteration emits deterministic policies"),
        }
    }
}

/// Gap and variance statistics of a model with a unique optimal policy.
#[derive(Debug, Clone)]
pub struct GapStats {
    /// `V(s) - Q(s,a)`, zero exactly on the optimal action.
    pub gaps: Array2<f64>,
    /// Variance of the realized reward at each pair.
    pub reward_var: Array2<f64>,
    /// Variance of `V*(s')` under the successor law of each pair.
    pub value_var: Array2<f64>,
    /// Max reward variance along the optimal action row.
    pub max_reward_var: f64,
    /// Max value variance along the optimal action row.
    pub max_value_var: f64,
    /// Smallest gap over suboptimal pairs (infinite when there are none).
    pub delta_min: f64,
    /// Optimal action per state.
    pub optimal_actions: Vec<usize>,
    /// Optimal value function used to compute the statistics.
    pub v_star: Array1<f64>,
}

impl GapStats {
    pub fn is_optimal_pair(&self, s: usize, a: usize) -> bool {
        self.optimal_actions[s] == a
    }
}

/// Greedy action per state, lowest index winning ties.
fn greedy(q: &Array2<f64>) -> Vec<usize> {
    q.outer_iter()
        .map(|row| {
            let mut best = 0usize;
            for (a, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = a;
                }
            }
            best
        })
        .collect()
}

fn bellman_backup(mdp: &TabularMdp, v: &Array1<f64>) -> Array2<f64> {
    let (s_n, a_n) = (mdp.num_states(), mdp.num_actions());
    let mut q = Array2::zeros((s_n, a_n));
    for s in 0..s_n {
        for a in 0..a_n {
            let mut ev = 0.0;
            for s2 in 0..s_n {
                ev += mdp.transitions[[s, a, s2]] * v[s2];
            }
            q[[s, a]] = mdp.reward_means[[s, a]] + mdp.gamma * ev;
        }
    }
    q
}

/// Solve the Bellman optimality equation by synchronous value iteration.
///
/// Stops once the sup-norm change drops to `tol`; the returned `q` is one
/// exact backup of the returned `v`, and `pi_star` is greedy with
/// lowest-index tie-breaking.
pub fn value_iteration(mdp: &TabularMdp, tol: f64) -> Result<ValueReport> {
    if tol <= 0.0 {
        return Err(LdxError::Validation(format!(
            "tolerance must be positive, got {tol}"
        )));
    }
    mdp.validate(true)?;
    let mut v = Array1::zeros(mdp.num_states());
    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    while residual > tol {
        if iterations >= VI_ITER_CAP {
            return Err(LdxError::Convergence(format!(
                "value iteration did not reach tol {tol:e} in {VI_ITER_CAP} iterations \
                 (residual {residual:e})"
            )));
        }
        let q = bellman_backup(mdp, &v);
        let mut next = Array1::zeros(mdp.num_states());
        for s in 0..mdp.num_states() {
            let mut best = f64::NEG_INFINITY;
            for a in 0..mdp.num_actions() {
                best = best.max(q[[s, a]]);
            }
            next[s] = best;
        }
        residual = v
            .iter()
            .zip(next.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        v = next;
        iterations += 1;
    }
    let q = bellman_backup(mdp, &v);
    let pi = greedy(&q);
    // Polish: V(s) = max_a Q(s,a) keeps the report internally consistent.
    for s in 0..mdp.num_states() {
        v[s] = q[[s, pi[s]]];
    }
    Ok(ValueReport {
        v,
        q,
        pi_star: Policy::Deterministic(pi),
        iterations,
        residual,
    })
}

/// Evaluate a fixed policy exactly: `V` solves the linear policy-evaluation
/// system, and `Q(s,a) = r(s,a) + gamma * P(s,a)' V`.
pub fn policy_values(mdp: &TabularMdp, pi: &Policy) -> Result<(Array1<f64>, Array2<f64>)> {
    mdp.validate(true)?;
    pi.validate(mdp)?;
    let n = mdp.num_states();
    // dense solve below this size, iterative backups above
    const DENSE_LIMIT: usize = 2000;
    let mut p_pi = Array2::zeros((n, n));
    let mut r_pi = Array1::zeros(n);
    for s in 0..n {
        for a in 0..mdp.num_actions() {
            let w = pi.prob(s, a);
            if w == 0.0 {
                continue;
            }
            r_pi[s] += w * mdp.reward_means[[s, a]];
            for s2 in 0..n {
                p_pi[[s, s2]] += w * mdp.transitions[[s, a, s2]];
            }
        }
    }
    let v = if n <= DENSE_LIMIT {
        let mut system = Array2::eye(n);
        system.scaled_add(-mdp.gamma, &p_pi);
        linalg::solve(&system, &r_pi)?
    } else {
        let mut v = Array1::zeros(n);
        for _ in 0..10_000_000usize {
            let mut next = r_pi.clone();
            for s in 0..n {
                let mut ev = 0.0;
                for s2 in 0..n {
                    ev += p_pi[[s, s2]] * v[s2];
                }
                next[s] += mdp.gamma * ev;
            }
            let change = v
                .iter()
                .zip(next.iter())
                .map(|(a, b): (&f64, &f64)| (a - b).abs())
                .fold(0.0, f64::max);
            v = next;
            if change <= 1e-13 {
                break;
            }
        }
        v
    };
    // residual check on the linear system
    let mut worst = 0.0f64;
    for s in 0..n {
        let mut lhs = v[s];
        for s2 in 0..n {
            lhs -= mdp.gamma * p_pi[[s, s2]] * v[s2];
        }
        worst = worst.max((lhs - r_pi[s]).abs());
    }
    if worst > 1e-10 {
        return Err(LdxError::Numerical(format!(
            "policy evaluation residual {worst:e} exceeds 1e-10"
        )));
    }
    let q = bellman_backup(mdp, &v);
    Ok((v, q))
}

/// Mean of the policy's value function over states.
pub fn state_averaged_value(mdp: &TabularMdp, pi: &Policy) -> Result<f64> {
    let (v, _) = policy_values(mdp, pi)?;
    Ok(v.sum() / v.len() as f64)
}

/// How [`gap_stats_with_ties`] treats a tied optimum.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TiePolicy {
    /// Reject the model (the planning theory assumes a unique optimum).
    Reject,
    /// Keep the lowest-index action and report that a tie occurred.
    LowestIndex,
}

/// Gap statistics with explicit tie handling; `bool` flags whether any state
/// had a within-tolerance tie.
pub fn gap_stats_with_ties(mdp: &TabularMdp, policy: TiePolicy) -> Result<(GapStats, bool)> {
    let report = value_iteration(mdp, DEFAULT_VI_TOL)?;
    let pi_star = report.pi_star_actions().to_vec();
    // Exact evaluation of the greedy policy sharpens V and Q beyond VI's tol.
    let (v, q) = policy_values(mdp, &Policy::Deterministic(pi_star.clone()))?;
    let mut tied = false;
    for s in 0..mdp.num_states() {
        let best = pi_star[s];
        for a in 0..mdp.num_actions() {
            if a != best && (q[[s, best]] - q[[s, a]]).abs() <= TIE_TOL {
                tied = true;
                if policy == TiePolicy::Reject {
                    return Err(LdxError::NonUniqueOptimum {
                        state: s,
                        a: best,
                        b: a,
                        tol: TIE_TOL,
                    });
                }
            }
        }
    }
    let (s_n, a_n) = (mdp.num_states(), mdp.num_actions());
    let mut gaps = Array2::zeros((s_n, a_n));
    let mut reward_var = Array2::zeros((s_n, a_n));
    let mut value_var = Array2::zeros((s_n, a_n));
    for s in 0..s_n {
        for a in 0..a_n {
            gaps[[s, a]] = if a == pi_star[s] {
                0.0
            } else {
                (v[s] - q[[s, a]]).max(0.0)
            };
            reward_var[[s, a]] = mdp.reward_variance(s, a);
            let mut mean = 0.0;
            let mut mean_sq = 0.0;
            for s2 in 0..s_n {
                let p = mdp.transitions[[s, a, s2]];
                mean += p * v[s2];
                mean_sq += p * v[s2] * v[s2];
            }
            value_var[[s, a]] = (mean_sq - mean * mean).max(0.0);
        }
    }
    let mut max_reward_var = 0.0f64;
    let mut max_value_var = 0.0f64;
    for s in 0..s_n {
        max_reward_var = max_reward_var.max(reward_var[[s, pi_star[s]]]);
        max_value_var = max_value_var.max(value_var[[s, pi_star[s]]]);
    }
    let mut delta_min = f64::INFINITY;
    for s in 0..s_n {
        for a in 0..a_n {
            if a != pi_star[s] {
                delta_min = delta_min.min(gaps[[s, a]]);
            }
        }
    }
    Ok((
        GapStats {
            gaps,
            reward_var,
            value_var,
            max_reward_var,
            max_value_var,
            delta_min,
            optimal_actions: pi_star,
            v_star: v,
        },
        tied,
    ))
}

/// Gap statistics of a model with a strictly unique optimal policy.
pub fn gap_stats(mdp: &TabularMdp) -> Result<GapStats> {
    gap_stats_with_ties(mdp, TiePolicy::Reject).map(|(stats, _)| stats)
}

// ---------------------------------------------------------------------------
// Spec-file round trip
// ---------------------------------------------------------------------------

/// Reward-noise field of the MDP spec file: one descriptor broadcast to every
/// pair, or a full S x A grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum NoiseField {
    Broadcast(RewardNoise),
    PerPair(Vec<Vec<RewardNoise>>),
}

/// On-disk MDP description. All probabilities round-trip bit-exactly through
/// JSON.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MdpSpecFile {
    pub gamma: f64,
    pub num_states: usize,
    pub num_actions: usize,
    pub transitions: Vec<Vec<Vec<f64>>>,
    pub reward_means: Vec<Vec<f64>>,
    pub reward_noise: NoiseField,
}

impl MdpSpecFile {
    pub fn from_mdp(mdp: &TabularMdp) -> Self {
        let (s_n, a_n) = (mdp.num_states(), mdp.num_actions());
        let transitions = (0..s_n)
            .map(|s| {
                (0..a_n)
                    .map(|a| mdp.transition_row(s, a).to_vec())
                    .collect()
            })
            .collect();
        let reward_means = (0..s_n)
            .map(|s| (0..a_n).map(|a| mdp.reward_mean(s, a)).collect())
            .collect();
        let first = mdp.noise[[0, 0]];
        let uniform = mdp.noise.iter().all(|n| *n == first);
        let reward_noise = if uniform {
            NoiseField::Broadcast(first)
        } else {
            NoiseField::PerPair(
                (0..s_n)
                    .map(|s| (0..a_n).map(|a| mdp.noise[[s, a]]).collect())
                    .collect(),
            )
        };
        MdpSpecFile {
            gamma: mdp.gamma(),
            num_states: s_n,
            num_actions: a_n,
            transitions,
            reward_means,
            reward_noise,
        }
    }

    pub fn into_mdp(self) -> Result<TabularMdp> {
        let (s_n, a_n) = (self.num_states, self.num_actions);
        if self.transitions.len() != s_n {
            return Err(LdxError::Validation(format!(
                "transitions has {} states, header says {s_n}",
                self.transitions.len()
            )));
        }
        let mut transitions = Array3::zeros((s_n, a_n, s_n));
        for (s, per_action) in self.transitions.iter().enumerate() {
            if per_action.len() != a_n {
                return Err(LdxError::Validation(format!(
                    "state {s} has {} action rows, header says {a_n}",
                    per_action.len()
                )));
            }
            for (a, row) in per_action.iter().enumerate() {
                if row.len() != s_n {
                    return Err(LdxError::Validation(format!(
                        "row ({s},{a}) has length {}, expected {s_n}",
                        row.len()
                    )));
                }
                for (s2, &p) in row.iter().enumerate() {
                    transitions[[s, a, s2]] = p;
                }
            }
        }
        let mut reward_means = Array2::zeros((s_n, a_n));
        for (s, row) in self.reward_means.iter().enumerate() {
            for (a, &r) in row.iter().enumerate() {
                reward_means[[s, a]] = r;
            }
        }
        let noise = match self.reward_noise {
            NoiseField::Broadcast(n) => Array2::from_elem((s_n, a_n), n),
            NoiseField::PerPair(rows) => {
                let mut grid = Array2::from_elem((s_n, a_n), RewardNoise::Bernoulli);
                if rows.len() != s_n {
                    return Err(LdxError::Validation(
                        "reward_noise grid does not match num_states".into(),
                    ));
                }
                for (s, row) in rows.iter().enumerate() {
                    if row.len() != a_n {
                        return Err(LdxError::Validation(
                            "reward_noise grid does not match num_actions".into(),
                        ));
                    }
                    for (a, &n) in row.iter().enumerate() {
                        grid[[s, a]] = n;
                    }
                }
                grid
            }
        };
        TabularMdp::new(transitions, reward_means, noise, self.gamma)
    }
}

/// Write a model to the JSON spec format.
pub fn write_mdp_file(mdp: &TabularMdp, path: &std::path::Path) -> Result<()> {
    let spec = MdpSpecFile::from_mdp(mdp);
    let text = serde_json::to_string_pretty(&spec).map_err(|e| LdxError::Parse(e.to_string()))?;
    std::fs::write(path, text).map_err(|e| LdxError::io(path.display().to_string(), e))
}

/// Read a model from the JSON spec format.
pub fn read_mdp_file(path: &std::path::Path) -> Result<TabularMdp> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| LdxError::io(path.display().to_string(), e))?;
    let spec: MdpSpecFile =
        serde_json::from_str(&text).map_err(|e| LdxError::Parse(e.to_string()))?;
    spec.into_mdp()
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{arr2, Array2, Array3};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    pub(crate) fn single_state_mdp(reward: f64, gamma: f64) -> TabularMdp {
        let transitions = Array3::from_elem((1, 1, 1), 1.0);
        let rewards = Array2::from_elem((1, 1), reward);
        let noise = Array2::from_elem((1, 1), RewardNoise::Gaussian { var: 0.0 });
        TabularMdp::new(transitions, rewards, noise, gamma).unwrap()
    }

    /// Two states, one action, deterministic swap; rewards (1, 0).
    fn swap_chain(gamma: f64) -> TabularMdp {
        let mut transitions = Array3::zeros((2, 1, 2));
        transitions[[0, 0, 1]] = 1.0;
        transitions[[1, 0, 0]] = 1.0;
        let rewards = arr2(&[[1.0], [0.0]]);
        let noise = Array2::from_elem((2, 1), RewardNoise::Gaussian { var: 0.0 });
        TabularMdp::new(transitions, rewards, noise, gamma).unwrap()
    }

    pub(crate) fn random_mdp(states: usize, actions: usize, seed: u64) -> TabularMdp {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut transitions = Array3::zeros((states, actions, states));
        for s in 0..states {
            for a in 0..actions {
                let mut total = 0.0;
                let mut row = vec![0.0; states];
                for item in row.iter_mut() {
                    *item = rng.gen::<f64>() + 0.05;
                    total += *item;
                }
                for (s2, item) in row.iter().enumerate() {
                    transitions[[s, a, s2]] = item / total;
                }
                // renormalize exactly
                let sum: f64 = (0..states).map(|s2| transitions[[s, a, s2]]).sum();
                transitions[[s, a, states - 1]] += 1.0 - sum;
            }
        }
        let mut rewards = Array2::zeros((states, actions));
        for r in rewards.iter_mut() {
            *r = rng.gen::<f64>();
        }
        let noise = Array2::from_elem((states, actions), RewardNoise::Gaussian { var: 0.01 });
        TabularMdp::new(transitions, rewards, noise, 0.9).unwrap()
    }

    /// Independent policy-iteration oracle: exact evaluation + greedy
    /// improvement until the policy is stable.
    fn policy_iteration_oracle(mdp: &TabularMdp) -> Vec<usize> {
        let mut pi = vec![0usize; mdp.num_states()];
        for _ in 0..1000 {
            let (_, q) = policy_values(mdp, &Policy::Deterministic(pi.clone())).unwrap();
            let improved = greedy(&q);
            if improved == pi {
                return pi;
            }
            pi = improved;
        }
        panic!("policy iteration failed to stabilize");
    }

    #[test]
    fn geometric_series_value() {
        let mdp = single_state_mdp(0.5, 0.9);
        let report = value_iteration(&mdp, 1e-12).unwrap();
        assert_abs_diff_eq!(report.v[0], 5.0, epsilon = 1e-9);
        assert!(report.residual <= 1e-12);
    }

    #[test]
    fn value_iteration_matches_policy_iteration_on_random_instances() {
        for seed in 0..20 {
            let mdp = random_mdp(4, 3, seed);
            let report = value_iteration(&mdp, 1e-10).unwrap();
            let oracle = policy_iteration_oracle(&mdp);
            assert_eq!(report.pi_star_actions(), oracle.as_slice(), "seed {seed}");
        }
    }

    #[test]
    fn residuals_contract_by_gamma() {
        // rerun VI manually and track successive sup-norm changes
        let mdp = random_mdp(5, 2, 7);
        let mut v = Array1::zeros(5);
        let mut residuals = Vec::new();
        for _ in 0..60 {
            let q = bellman_backup(&mdp, &v);
            let mut next = Array1::zeros(5);
            for s in 0..5 {
                let mut best = f64::NEG_INFINITY;
                for a in 0..2 {
                    best = best.max(q[[s, a]]);
                }
                next[s] = best;
            }
            let res = v
                .iter()
                .zip(next.iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            residuals.push(res);
            v = next;
        }
        for w in residuals.windows(2).skip(1) {
            assert!(
                w[1] <= mdp.gamma() * w[0] + 1e-13,
                "residuals {} -> {} violate contraction",
                w[0],
                w[1]
            );
        }
    }

    #[test]
    fn self_loop_policy_value() {
        let mdp = single_state_mdp(1.0, 0.99);
        let (v, _) = policy_values(&mdp, &Policy::Deterministic(vec![0])).unwrap();
        assert_abs_diff_eq!(v[0], 100.0, epsilon = 1e-8);
    }

    #[test]
    fn swap_chain_values_by_hand() {
        let mdp = swap_chain(0.5);
        let (v, q) = policy_values(&mdp, &Policy::Deterministic(vec![0, 0])).unwrap();
        assert_abs_diff_eq!(v[0], 4.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(v[1], 2.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(q[[0, 0]], 4.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn optimal_policy_evaluation_is_consistent_with_vi() {
        for seed in 20..25 {
            let mdp = random_mdp(4, 3, seed);
            let report = value_iteration(&mdp, 1e-10).unwrap();
            let (v, _) = policy_values(&mdp, &report.pi_star).unwrap();
            for s in 0..4 {
                assert_abs_diff_eq!(v[s], report.v[s], epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn gap_stats_on_deterministic_transitions_has_zero_value_variance() {
        let mdp = swap_chain(0.5);
        // one action: no suboptimal pairs, but variances still computed
        let stats = gap_stats(&mdp).unwrap();
        assert!(stats.value_var.iter().all(|&v| v.abs() < 1e-12));
        assert!(stats.delta_min.is_infinite());
    }

    #[test]
    fn bernoulli_reward_variance() {
        let transitions = Array3::from_elem((1, 1, 1), 1.0);
        let rewards = Array2::from_elem((1, 1), 0.5);
        let noise = Array2::from_elem((1, 1), RewardNoise::Bernoulli);
        let mdp = TabularMdp::new(transitions, rewards, noise, 0.5).unwrap();
        let stats = gap_stats(&mdp).unwrap();
        assert_abs_diff_eq!(stats.reward_var[[0, 0]], 0.25, epsilon = 1e-15);
    }

    #[test]
    fn gap_identity_and_scale_invariance() {
        let mdp = random_mdp(4, 3, 3);
        let stats = gap_stats(&mdp).unwrap();
        let report = value_iteration(&mdp, 1e-10).unwrap();
        let (v, q) = policy_values(&mdp, &report.pi_star).unwrap();
        for s in 0..4 {
            for a in 0..3 {
                let direct = (v[s] - q[[s, a]]).max(0.0);
                assert_abs_diff_eq!(stats.gaps[[s, a]], direct, epsilon = 1e-8);
                assert!(stats.gaps[[s, a]] >= 0.0);
                if a == stats.optimal_actions[s] {
                    assert_eq!(stats.gaps[[s, a]], 0.0);
                }
            }
        }
        // scaling rewards by c scales V, Q, gaps by c and keeps pi_star
        let c = 3.5;
        let scaled = TabularMdp::new(
            mdp.transitions().clone(),
            mdp.reward_means() * c,
            mdp.noise().clone(),
            mdp.gamma(),
        )
        .unwrap();
        let scaled_stats = gap_stats(&scaled).unwrap();
        assert_eq!(scaled_stats.optimal_actions, stats.optimal_actions);
        for (g_scaled, g) in scaled_stats.gaps.iter().zip(stats.gaps.iter()) {
            assert_abs_diff_eq!(*g_scaled, c * g, epsilon = 1e-6);
        }
    }

    #[test]
    fn tie_detection_rejects_duplicate_actions() {
        // two identical actions everywhere
        let mut transitions = Array3::zeros((2, 2, 2));
        for a in 0..2 {
            transitions[[0, a, 1]] = 1.0;
            transitions[[1, a, 0]] = 1.0;
        }
        let rewards = arr2(&[[1.0, 1.0], [0.0, 0.0]]);
        let noise = Array2::from_elem((2, 2), RewardNoise::Gaussian { var: 0.0 });
        let mdp = TabularMdp::new(transitions, rewards, noise, 0.5).unwrap();
        match gap_stats(&mdp) {
            Err(LdxError::NonUniqueOptimum { .. }) => {}
            other => panic!("expected tie rejection, got {other:?}"),
        }
        let (_, tied) = gap_stats_with_ties(&mdp, TiePolicy::LowestIndex).unwrap();
        assert!(tied);
    }

    #[test]
    fn state_averaged_value_examples() {
        let mdp = swap_chain(0.5);
        let avg = state_averaged_value(&mdp, &Policy::Deterministic(vec![0, 0])).unwrap();
        assert_abs_diff_eq!(avg, 1.0, epsilon = 1e-12); // mean of 4/3 and 2/3
        let single = single_state_mdp(0.5, 0.9);
        let avg1 = state_averaged_value(&single, &Policy::Deterministic(vec![0])).unwrap();
        assert_abs_diff_eq!(avg1, 5.0, epsilon = 1e-9);
    }

    #[test]
    fn invalid_rows_are_rejected() {
        let mut transitions = Array3::zeros((1, 1, 1));
        transitions[[0, 0, 0]] = 0.5;
        let rewards = Array2::zeros((1, 1));
        let noise = Array2::from_elem((1, 1), RewardNoise::Bernoulli);
        assert!(TabularMdp::new(transitions.clone(), rewards.clone(), noise.clone(), 0.9).is_err());
        // but an all-zero row is legal in empirical mode
        transitions[[0, 0, 0]] = 0.0;
        assert!(
            TabularMdp::new_allowing_unvisited(transitions, rewards, noise, 0.9).is_ok()
        );
    }

    #[test]
    fn spec_file_round_trip_is_bit_exact() {
        let mdp = random_mdp(3, 2, 11);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mdp.json");
        write_mdp_file(&mdp, &path).unwrap();
        let back = read_mdp_file(&path).unwrap();
        assert_eq!(mdp.num_states(), back.num_states());
        for (x, y) in mdp.transitions().iter().zip(back.transitions().iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        for (x, y) in mdp.reward_means().iter().zip(back.reward_means().iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        assert_eq!(mdp.gamma().to_bits(), back.gamma().to_bits());
        assert_eq!(mdp.content_hash(), back.content_hash());
    }

    #[test]
    fn ergodicity_check() {
        let mdp = swap_chain(0.5);
        assert!(mdp.is_ergodic());
        // absorbing second state
        let mut transitions = Array3::zeros((2, 1, 2));
        transitions[[0, 0, 1]] = 1.0;
        transitions[[1, 0, 1]] = 1.0;
        let rewards = Array2::zeros((2, 1));
        let noise = Array2::from_elem((2, 1), RewardNoise::Bernoulli);
        let absorbing = TabularMdp::new(transitions, rewards, noise, 0.5).unwrap();
        assert!(!absorbing.is_ergodic());
    }
}
