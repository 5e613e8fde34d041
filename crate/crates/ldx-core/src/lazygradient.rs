//! The adaptive estimation-optimization agent and its baselines.
//!
//! The main agent interleaves sampling with one lazy projected subgradient
//! step at scheduled times whose gaps grow linearly. Between updates the
//! behavior policy is frozen; at update time `t` it mixes the normalized
//! allocation with a uniform policy at rate `t^(-alpha)` to keep every pair
//! visited. Baselines: pure uniform sampling, tabular Q-learning, and PSRL.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::env::{sample_step, StepRecord};
use crate::error::{LdxError, Result};
use crate::estimator::EmpiricalModel;
use crate::mdp::{value_iteration, Policy, TabularMdp, DEFAULT_VI_TOL};
use crate::solver::{
    default_epsilon, flow_polytope, lazy_step, project_flow_polytope, simplex_polytope,
    Allocation, SolverState,
};

/// Update-time schedule: first update at `t1`, then gaps `ceil(c_tilde * n)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    /// First update time (a sample index, 1-based).
    pub t1: usize,
    /// Linear growth constant for the gaps.
    pub c_tilde: f64,
    /// Exploration decay exponent, in (0, 1/2).
    pub alpha: f64,
    /// Initialization budget.
    pub n0: usize,
}

impl Schedule {
    /// Defaults: `n0 = max(30 * ceil(SA/10), 200)`, first update right after
    /// initialization, unit growth, `alpha = 1/4`.
    pub fn default_for(num_states: usize, num_actions: usize) -> Self {
        let pairs = num_states * num_actions;
        let n0 = (30 * pairs.div_ceil(10)).max(200);
        Schedule {
            t1: n0 + 1,
            c_tilde: 1.0,
            alpha: 0.25,
            n0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.c_tilde <= 0.0 {
            return Err(LdxError::Validation(format!(
                "c_tilde must be positive, got {}",
                self.c_tilde
            )));
        }
        if !(0.0 < self.alpha && self.alpha < 0.5) {
            return Err(LdxError::Validation(format!(
                "alpha must lie in (0, 1/2), got {}",
                self.alpha
            )));
        }
        if self.t1 <= self.n0 {
            return Err(LdxError::Validation(format!(
                "first update time {} must follow the initialization budget {}",
                self.t1, self.n0
            )));
        }
        Ok(())
    }

    /// Gap after the n-th update (n is 1-based).
    pub fn gap(&self, n: usize) -> usize {
        (self.c_tilde * n as f64).ceil() as usize
    }

    /// Update times in `[t1, budget)`.
    pub fn update_times(&self, budget: usize) -> Vec<usize> {
        let mut times = Vec::new();
        let mut t = self.t1;
        let mut n = 1;
        while t < budget {
            times.push(t);
            t += self.gap(n);
            n += 1;
        }
        times
    }

    /// Total update count `N(T) = max { n : sum_{k<=n} gap(k) <= T }`.
    pub fn num_updates(&self, budget: usize) -> usize {
        let mut total = 0usize;
        let mut n = 0usize;
        loop {
            let next = total + self.gap(n + 1);
            if next > budget {
                return n;
            }
            total = next;
            n += 1;
        }
    }

    /// Exploration rate `t^(-alpha)` for `t >= 1`.
    pub fn exploration_rate(&self, t: usize) -> f64 {
        (t as f64).powf(-self.alpha)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitPolicy {
    Uniform,
    MaxCoverage,
}

/// How samples are acquired: along a single trajectory, or by querying any
/// state-action pair (required for non-communicating instances).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleMode {
    Trajectory,
    Generative,
}

/// Full configuration of one agent run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub budget: usize,
    pub schedule: Schedule,
    /// Floor for the restricted flow polytope; `None` selects
    /// `min(1e-3, 1/(2SA))`.
    pub epsilon: Option<f64>,
    pub init_policy: InitPolicy,
    pub seed: u64,
    pub mode: SampleMode,
}

impl RunConfig {
    pub fn default_for(mdp: &TabularMdp, budget: usize, seed: u64) -> Self {
        RunConfig {
            budget,
            schedule: Schedule::default_for(mdp.num_states(), mdp.num_actions()),
            epsilon: None,
            init_policy: InitPolicy::MaxCoverage,
            seed,
            mode: SampleMode::Trajectory,
        }
    }

    fn resolve_epsilon(&self, mdp: &TabularMdp) -> f64 {
        self.epsilon
            .unwrap_or_else(|| default_epsilon(mdp.num_states(), mdp.num_actions()))
    }
}

/// Everything a run produces.
#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    /// Optimal policy of the final empirical model.
    pub pi_hat: Policy,
    pub visit_counts: Array2<u64>,
    /// Polyak-averaged allocation at each update time.
    pub allocation_trace: Vec<(usize, Allocation)>,
    /// Surrogate objective of the averaged allocation at each update.
    pub objective_trace: Vec<f64>,
    /// Behavior policy snapshot at each update time.
    pub behavior_snapshots: Vec<(usize, Array2<f64>)>,
    /// Sample indices at which the behavior policy changed.
    pub policy_change_times: Vec<usize>,
}

impl RunResult {
    pub fn pi_hat_actions(&self) -> &[usize] {
        match &self.pi_hat {
            Policy::Deterministic(actions) => actions,
            Policy::Stochastic(_) => unreachable!("decision rules emit deterministic policies"),
        }
    }

    pub fn total_samples(&self) -> u64 {
        self.visit_counts.iter().sum()
    }
}

/// Normalize an allocation row-wise into a stochastic exploration policy.
pub fn allocation_to_policy(omega: &Allocation) -> Result<Policy> {
    let (s_n, a_n) = (omega.num_states(), omega.num_actions());
    let mut rows = Array2::zeros((s_n, a_n));
    for s in 0..s_n {
        let mass = omega.state_mass(s);
        if mass <= 0.0 {
            return Err(LdxError::DegenerateAllocation(format!(
                "state {s} has zero allocation mass"
            )));
        }
        for a in 0..a_n {
            rows[[s, a]] = omega.get(s, a) / mass;
        }
    }
    Ok(Policy::Stochastic(rows))
}

/// Mix the exploration policy with the uniform policy at rate `t^(-alpha)`.
pub fn behavior_policy(
    explore: &Policy,
    t: usize,
    alpha: f64,
    num_actions: usize,
) -> Result<Policy> {
    if t == 0 {
        return Err(LdxError::Validation("behavior policy needs t >= 1".into()));
    }
    let rows = match explore {
        Policy::Stochastic(rows) => rows,
        Policy::Deterministic(_) => {
            return Err(LdxError::Validation(
                "exploration policy must be stochastic".into(),
            ))
        }
    };
    let eps = (t as f64).powf(-alpha);
    let uniform = 1.0 / num_actions as f64;
    Ok(Policy::Stochastic(
        rows.mapv(|p| eps * uniform + (1.0 - eps) * p),
    ))
}

/// Coverage weights for the initialization heuristic.
const COVERAGE_WEIGHTS: (f64, f64, f64) = (1.0, 0.5, 0.25);

/// Initialization heuristic: prefer under-visited pairs, then actions likely
/// to reach under-visited states, then actions reaching globally rare states.
/// Ties are broken uniformly at random.
pub fn max_coverage_action(model: &EmpiricalModel, s: usize, rng: &mut ChaCha12Rng) -> usize {
    let a_n = model.num_actions();
    let (w1, w2, w3) = COVERAGE_WEIGHTS;
    let state_counts: Vec<u64> = (0..model.num_states())
        .map(|s2| model.state_count(s2))
        .collect();
    let mut scores = Vec::with_capacity(a_n);
    for a in 0..a_n {
        let row = model.regularized_row(s, a);
        let mut reach = 0.0;
        let mut rare: f64 = 0.0;
        for (s2, &p) in row.iter().enumerate() {
            if p > 0.0 {
                reach += p / (1.0 + state_counts[s2] as f64);
                rare = rare.max(1.0 / (1.0 + state_counts[s2] as f64));
            }
        }
        let score = w1 / (1.0 + model.count(s, a) as f64) + w2 * reach + w3 * rare;
        scores.push(score);
    }
    let best = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let candidates: Vec<usize> = (0..a_n).filter(|&a| scores[a] >= best - 1e-12).collect();
    candidates[rng.gen_range(0..candidates.len())]
}

fn sample_action(rows: &Array2<f64>, s: usize, rng: &mut ChaCha12Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for a in 0..rows.ncols() {
        acc += rows[[s, a]];
        if u < acc {
            return a;
        }
    }
    rows.ncols() - 1
}

fn sample_pair(weights: &Array1<f64>, num_actions: usize, rng: &mut ChaCha12Rng) -> (usize, usize) {
    let total: f64 = weights.sum();
    let u: f64 = rng.gen::<f64>() * total;
    let mut acc = 0.0;
    for (idx, &w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return (idx / num_actions, idx % num_actions);
        }
    }
    let idx = weights.len() - 1;
    (idx / num_actions, idx % num_actions)
}

/// Run the lazy one-step projected subgradient agent for exactly
/// `cfg.budget` samples and return the empirical optimum.
pub fn run_lazygradient(env: &TabularMdp, cfg: &RunConfig) -> Result<RunResult> {
    cfg.schedule.validate()?;
    if cfg.budget <= cfg.schedule.n0 {
        return Err(LdxError::Validation(format!(
            "budget {} must exceed the initialization budget {}",
            cfg.budget, cfg.schedule.n0
        )));
    }
    if cfg.mode == SampleMode::Trajectory && !env.is_ergodic() {
        return Err(LdxError::Mode(
            "environment is not ergodic; request generative sampling instead".into(),
        ));
    }
    let (s_n, a_n) = (env.num_states(), env.num_actions());
    let epsilon = cfg.resolve_epsilon(env);
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let mut model = EmpiricalModel::new(s_n, a_n);
    let mut state = 0usize;

    // initialization phase
    for _ in 0..cfg.schedule.n0 {
        if cfg.mode == SampleMode::Generative {
            state = rng.gen_range(0..s_n);
        }
        let action = match cfg.init_policy {
            InitPolicy::Uniform => rng.gen_range(0..a_n),
            InitPolicy::MaxCoverage => max_coverage_action(&model, state, &mut rng),
        };
        let rec = sample_step(env, state, action, &mut rng);
        model.record_transition(&rec);
        state = rec.next_state;
    }

    let total_updates = cfg.schedule.num_updates(cfg.budget).max(1);
    let eta = 1.0 / (total_updates as f64).sqrt();
    let update_times = cfg.schedule.update_times(cfg.budget);
    let mut next_update = 0usize;

    let mut behavior_rows = Array2::from_elem((s_n, a_n), 1.0 / a_n as f64);
    let mut generative_weights = Array1::from_elem(s_n * a_n, 1.0 / (s_n * a_n) as f64);
    let mut solver_state: Option<SolverState> = None;

    let mut allocation_trace = Vec::new();
    let mut objective_trace = Vec::new();
    let mut behavior_snapshots = Vec::new();
    let mut policy_change_times = Vec::new();

    for t in cfg.schedule.n0..cfg.budget {
        if next_update < update_times.len() && update_times[next_update] == t {
            next_update += 1;
            let (solver_model, stats, _) = model.solver_mdp(env.gamma())?;
            // Generative sampling is free to target any pair distribution,
            // so only the simplex (with floor) constrains the allocation;
            // trajectory sampling must respect the flow balance of the
            // current model estimate.
            let poly = match cfg.mode {
                SampleMode::Trajectory => flow_polytope(&solver_model, epsilon)?,
                SampleMode::Generative => simplex_polytope(s_n, a_n, epsilon)?,
            };
            let current = match solver_state.take() {
                Some(s) => s,
                None => {
                    let uniform = Array1::from_elem(s_n * a_n, 1.0 / (s_n * a_n) as f64);
                    let start = project_flow_polytope(&uniform, &poly)?;
                    let (f_start, _) =
                        crate::solver::surrogate_objective(&start, &stats, env.gamma())?;
                    SolverState::new(start, eta).with_objective_scale(f_start)
                }
            };
            let stepped = lazy_step(current, &stats, env.gamma(), &poly)?;
            let omega = stepped.average();
            objective_trace.push(*stepped.objective_trace().last().expect("step appends"));
            let explore = allocation_to_policy(&omega)?;
            let mixed = behavior_policy(&explore, t, cfg.schedule.alpha, a_n)?;
            behavior_rows = match mixed {
                Policy::Stochastic(rows) => rows,
                Policy::Deterministic(_) => unreachable!(),
            };
            let eps_t = cfg.schedule.exploration_rate(t);
            for (idx, w) in generative_weights.iter_mut().enumerate() {
                *w = eps_t / (s_n * a_n) as f64 + (1.0 - eps_t) * omega.raw()[idx];
            }
            allocation_trace.push((t, omega));
            behavior_snapshots.push((t, behavior_rows.clone()));
            policy_change_times.push(t);
            solver_state = Some(stepped);
        }
        let (s, a) = match cfg.mode {
            SampleMode::Trajectory => (state, sample_action(&behavior_rows, state, &mut rng)),
            SampleMode::Generative => sample_pair(&generative_weights, a_n, &mut rng),
        };
        let rec = sample_step(env, s, a, &mut rng);
        model.record_transition(&rec);
        state = rec.next_state;
    }

    finish_run(
        env,
        model,
        allocation_trace,
        objective_trace,
        behavior_snapshots,
        policy_change_times,
    )
}

fn finish_run(
    env: &TabularMdp,
    model: EmpiricalModel,
    allocation_trace: Vec<(usize, Allocation)>,
    objective_trace: Vec<f64>,
    behavior_snapshots: Vec<(usize, Array2<f64>)>,
    policy_change_times: Vec<usize>,
) -> Result<RunResult> {
    let empirical = model.empirical_mdp(env.gamma())?;
    let report = value_iteration(&empirical.mdp, DEFAULT_VI_TOL)?;
    Ok(RunResult {
        pi_hat: report.pi_star,
        visit_counts: model.pair_counts().clone(),
        allocation_trace,
        objective_trace,
        behavior_snapshots,
        policy_change_times,
    })
}

/// Baseline algorithms sharing the run interface.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineAlgo {
    Uniform,
    QLearning,
    Psrl,
}

/// Run a baseline for exactly `budget` samples along a trajectory.
pub fn run_baseline(
    env: &TabularMdp,
    algo: BaselineAlgo,
    budget: usize,
    seed: u64,
) -> Result<RunResult> {
    if !env.is_ergodic() {
        return Err(LdxError::Mode(
            "environment is not ergodic; baselines sample along a trajectory".into(),
        ));
    }
    match algo {
        BaselineAlgo::Uniform => run_uniform(env, budget, seed),
        BaselineAlgo::QLearning => run_qlearning(env, budget, seed),
        BaselineAlgo::Psrl => run_psrl(env, budget, seed),
    }
}

fn run_uniform(env: &TabularMdp, budget: usize, seed: u64) -> Result<RunResult> {
    let (s_n, a_n) = (env.num_states(), env.num_actions());
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut model = EmpiricalModel::new(s_n, a_n);
    let mut state = 0usize;
    for _ in 0..budget {
        let action = rng.gen_range(0..a_n);
        let rec = sample_step(env, state, action, &mut rng);
        model.record_transition(&rec);
        state = rec.next_state;
    }
    finish_run(env, model, Vec::new(), Vec::new(), Vec::new(), Vec::new())
}

fn run_qlearning(env: &TabularMdp, budget: usize, seed: u64) -> Result<RunResult> {
    const EPS_GREEDY: f64 = 0.1;
    const LR_EXPONENT: f64 = 0.7;
    let (s_n, a_n) = (env.num_states(), env.num_actions());
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut model = EmpiricalModel::new(s_n, a_n);
    let mut q: Array2<f64> = Array2::zeros((s_n, a_n));
    let mut state = 0usize;
    for _ in 0..budget {
        let action = if rng.gen::<f64>() < EPS_GREEDY {
            rng.gen_range(0..a_n)
        } else {
            argmax_row(&q, state)
        };
        let visits_before = model.count(state, action);
        let rec = sample_step(env, state, action, &mut rng);
        model.record_transition(&rec);
        let lr = 1.0 / (1.0 + visits_before as f64).powf(LR_EXPONENT);
        let mut best_next = f64::NEG_INFINITY;
        for a2 in 0..a_n {
            best_next = best_next.max(q[[rec.next_state, a2]]);
        }
        let target = rec.reward + env.gamma() * best_next;
        q[[state, action]] += lr * (target - q[[state, action]]);
        state = rec.next_state;
    }
    let pi_hat: Vec<usize> = (0..s_n).map(|s| argmax_row(&q, s)).collect();
    Ok(RunResult {
        pi_hat: Policy::Deterministic(pi_hat),
        visit_counts: model.pair_counts().clone(),
        allocation_trace: Vec::new(),
        objective_trace: Vec::new(),
        behavior_snapshots: Vec::new(),
        policy_change_times: Vec::new(),
    })
}

fn argmax_row(q: &Array2<f64>, s: usize) -> usize {
    let mut best = 0usize;
    for a in 1..q.ncols() {
        if q[[s, a]] > q[[s, best]] {
            best = a;
        }
    }
    best
}

/// Normal-Gamma reward posterior per pair, Dirichlet(1) transition prior.
struct PsrlPosterior {
    transition_counts: Array2<f64>, // (SA) x S, prior 1 included
    n: Array2<f64>,
    sum: Array2<f64>,
    sq_sum: Array2<f64>,
}

const NG_MU0: f64 = 0.0;
const NG_KAPPA0: f64 = 1.0;
const NG_ALPHA0: f64 = 1.0;
const NG_BETA0: f64 = 1.0;

impl PsrlPosterior {
    fn new(s_n: usize, a_n: usize) -> Self {
        PsrlPosterior {
            transition_counts: Array2::from_elem((s_n * a_n, s_n), 1.0),
            n: Array2::zeros((s_n, a_n)),
            sum: Array2::zeros((s_n, a_n)),
            sq_sum: Array2::zeros((s_n, a_n)),
        }
    }

    fn observe(&mut self, rec: &StepRecord, a_n: usize) {
        self.transition_counts[[rec.state * a_n + rec.action, rec.next_state]] += 1.0;
        self.n[[rec.state, rec.action]] += 1.0;
        self.sum[[rec.state, rec.action]] += rec.reward;
        self.sq_sum[[rec.state, rec.action]] += rec.reward * rec.reward;
    }

    fn reward_posterior(&self, s: usize, a: usize) -> (f64, f64, f64, f64) {
        let n = self.n[[s, a]];
        let mean = if n > 0.0 { self.sum[[s, a]] / n } else { 0.0 };
        let kappa = NG_KAPPA0 + n;
        let mu = (NG_KAPPA0 * NG_MU0 + n * mean) / kappa;
        let alpha = NG_ALPHA0 + n / 2.0;
        let ss = (self.sq_sum[[s, a]] - n * mean * mean).max(0.0);
        let beta = NG_BETA0
            + 0.5 * ss
            + NG_KAPPA0 * n * (mean - NG_MU0) * (mean - NG_MU0) / (2.0 * kappa);
        (mu, kappa, alpha, beta)
    }

    fn sample_mdp(&self, gamma: f64, rng: &mut ChaCha12Rng) -> Result<TabularMdp> {
        use rand_distr::{Distribution, Gamma, StandardNormal};
        let (s_n, a_n) = self.n.dim();
        let mut transitions = ndarray::Array3::zeros((s_n, a_n, s_n));
        let mut rewards = Array2::zeros((s_n, a_n));
        for s in 0..s_n {
            for a in 0..a_n {
                let mut row = vec![0.0; s_n];
                let mut total = 0.0;
                for (s2, item) in row.iter_mut().enumerate() {
                    let shape = self.transition_counts[[s * a_n + a, s2]];
                    let g = Gamma::new(shape, 1.0)
                        .map_err(|e| LdxError::Numerical(format!("gamma sampler: {e}")))?;
                    *item = g.sample(rng).max(1e-300);
                    total += *item;
                }
                for (s2, item) in row.iter().enumerate() {
                    transitions[[s, a, s2]] = item / total;
                }
                exact_normalize(&mut transitions, s, a);
                let (mu, kappa, alpha, beta) = self.reward_posterior(s, a);
                let tau = Gamma::new(alpha, 1.0 / beta)
                    .map_err(|e| LdxError::Numerical(format!("gamma sampler: {e}")))?
                    .sample(rng)
                    .max(1e-12);
                let z: f64 = StandardNormal.sample(rng);
                rewards[[s, a]] = mu + z / (kappa * tau).sqrt();
            }
        }
        let noise = Array2::from_elem((s_n, a_n), crate::mdp::RewardNoise::Gaussian { var: 0.0 });
        TabularMdp::new(transitions, rewards, noise, gamma)
    }

    fn mean_mdp(&self, gamma: f64) -> Result<TabularMdp> {
        let (s_n, a_n) = self.n.dim();
        let mut transitions = ndarray::Array3::zeros((s_n, a_n, s_n));
        let mut rewards = Array2::zeros((s_n, a_n));
        for s in 0..s_n {
            for a in 0..a_n {
                let mut total = 0.0;
                for s2 in 0..s_n {
                    total += self.transition_counts[[s * a_n + a, s2]];
                }
                for s2 in 0..s_n {
                    transitions[[s, a, s2]] = self.transition_counts[[s * a_n + a, s2]] / total;
                }
                exact_normalize(&mut transitions, s, a);
                rewards[[s, a]] = self.reward_posterior(s, a).0;
            }
        }
        let noise = Array2::from_elem((s_n, a_n), crate::mdp::RewardNoise::Gaussian { var: 0.0 });
        TabularMdp::new(transitions, rewards, noise, gamma)
    }
}

fn exact_normalize(transitions: &mut ndarray::Array3<f64>, s: usize, a: usize) {
    let s_n = transitions.dim().2;
    let sum: f64 = (0..s_n).map(|s2| transitions[[s, a, s2]]).sum();
    let mut largest = 0;
    for s2 in 0..s_n {
        transitions[[s, a, s2]] /= sum;
        if transitions[[s, a, s2]] > transitions[[s, a, largest]] {
            largest = s2;
        }
    }
    let sum: f64 = (0..s_n).map(|s2| transitions[[s, a, s2]]).sum();
    transitions[[s, a, largest]] += 1.0 - sum;
}

fn run_psrl(env: &TabularMdp, budget: usize, seed: u64) -> Result<RunResult> {
    let (s_n, a_n) = (env.num_states(), env.num_actions());
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut model = EmpiricalModel::new(s_n, a_n);
    let mut posterior = PsrlPosterior::new(s_n, a_n);
    let resample_period = ((1.0 / (1.0 - env.gamma())).ceil() as usize).clamp(1, 200);
    let mut policy: Vec<usize> = vec![0; s_n];
    let mut state = 0usize;
    for t in 0..budget {
        if t % resample_period == 0 {
            let sampled = posterior.sample_mdp(env.gamma(), &mut rng)?;
            policy = value_iteration(&sampled, DEFAULT_VI_TOL)?
                .pi_star_actions()
                .to_vec();
        }
        let action = policy[state];
        let rec = sample_step(env, state, action, &mut rng);
        model.record_transition(&rec);
        posterior.observe(&rec, a_n);
        state = rec.next_state;
    }
    let mean = posterior.mean_mdp(env.gamma())?;
    let report = value_iteration(&mean, DEFAULT_VI_TOL)?;
    Ok(RunResult {
        pi_hat: report.pi_star,
        visit_counts: model.pair_counts().clone(),
        allocation_trace: Vec::new(),
        objective_trace: Vec::new(),
        behavior_snapshots: Vec::new(),
        policy_change_times: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::RewardNoise;
    use approx::assert_abs_diff_eq;
    use ndarray::{arr1, Array3};

    fn bandit(mean_a: f64, mean_b: f64, var: f64) -> TabularMdp {
        let transitions = Array3::from_elem((1, 2, 1), 1.0);
        let mut rewards = Array2::zeros((1, 2));
        rewards[[0, 0]] = mean_a;
        rewards[[0, 1]] = mean_b;
        let noise = Array2::from_elem((1, 2), RewardNoise::Gaussian { var });
        TabularMdp::new(transitions, rewards, noise, 0.0).unwrap()
    }

    #[test]
    fn schedule_arithmetic() {
        let schedule = Schedule {
            t1: 5,
            c_tilde: 1.0,
            alpha: 0.25,
            n0: 4,
        };
        assert_eq!(schedule.update_times(16), vec![5, 6, 8, 11, 15]);
        assert_eq!(schedule.num_updates(10), 4); // 1+2+3+4 = 10
        assert_abs_diff_eq!(schedule.exploration_rate(16), 0.5, epsilon = 1e-15);
    }

    #[test]
    fn allocation_normalization() {
        let omega = Allocation::new(arr1(&[0.1, 0.3, 0.24, 0.36]), 2, 2).unwrap();
        let policy = allocation_to_policy(&omega).unwrap();
        match &policy {
            Policy::Stochastic(rows) => {
                assert_abs_diff_eq!(rows[[0, 0]], 0.25, epsilon = 1e-12);
                assert_abs_diff_eq!(rows[[0, 1]], 0.75, epsilon = 1e-12);
                assert_abs_diff_eq!(rows[[1, 0]], 0.4, epsilon = 1e-12);
            }
            _ => panic!("expected stochastic policy"),
        }
        let uniform = Allocation::uniform(2, 2);
        match allocation_to_policy(&uniform).unwrap() {
            Policy::Stochastic(rows) => {
                assert!(rows.iter().all(|&p| (p - 0.5).abs() < 1e-12))
            }
            _ => panic!(),
        }
    }

    #[test]
    fn behavior_policy_mixture() {
        let explore = Policy::Stochastic(ndarray::arr2(&[[1.0, 0.0]]));
        let mixed = behavior_policy(&explore, 16, 0.25, 2).unwrap();
        match mixed {
            Policy::Stochastic(rows) => {
                assert_abs_diff_eq!(rows[[0, 0]], 0.75, epsilon = 1e-12);
                assert_abs_diff_eq!(rows[[0, 1]], 0.25, epsilon = 1e-12);
            }
            _ => panic!(),
        }
        // t = 1: fully uniform
        let mixed = behavior_policy(&explore, 1, 0.25, 2).unwrap();
        match mixed {
            Policy::Stochastic(rows) => {
                assert_abs_diff_eq!(rows[[0, 0]], 0.5, epsilon = 1e-12);
                assert_abs_diff_eq!(rows[[0, 1]], 0.5, epsilon = 1e-12);
            }
            _ => panic!(),
        }
    }

    #[test]
    fn max_coverage_prefers_unvisited() {
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let mut model = EmpiricalModel::new(2, 3);
        // all zero: full tie, uniform choice over all actions
        let mut seen = [false; 3];
        for _ in 0..100 {
            seen[max_coverage_action(&model, 0, &mut rng)] = true;
        }
        assert!(seen.iter().all(|&s| s));
        // one action heavily visited: never chosen again
        for _ in 0..100 {
            model.record_transition(&StepRecord {
                state: 0,
                action: 1,
                reward: 0.0,
                next_state: 0,
            });
        }
        for _ in 0..50 {
            assert_ne!(max_coverage_action(&model, 0, &mut rng), 1);
        }
        // determinism given rng state
        let mut rng_a = ChaCha12Rng::seed_from_u64(9);
        let mut rng_b = ChaCha12Rng::seed_from_u64(9);
        for _ in 0..20 {
            assert_eq!(
                max_coverage_action(&model, 0, &mut rng_a),
                max_coverage_action(&model, 0, &mut rng_b)
            );
        }
    }

    #[test]
    fn lazygradient_identifies_separated_bandit() {
        // means 0.8 vs 0.2, sd 0.1: well separated
        let env = bandit(0.8, 0.2, 0.01);
        let mut cfg = RunConfig::default_for(&env, 2000, 0);
        cfg.schedule.n0 = 50;
        cfg.schedule.t1 = 51;
        let mut failures = 0;
        for rep in 0..100 {
            cfg.seed = rep;
            let result = run_lazygradient(&env, &cfg).unwrap();
            assert_eq!(result.total_samples(), 2000);
            if result.pi_hat_actions() != [0] {
                failures += 1;
            }
        }
        assert!(failures <= 5, "{failures} failures of 100");
    }

    #[test]
    fn budget_exactness_and_determinism_for_all_algos() {
        let env = crate::mdp::tests::random_mdp(4, 2, 55);
        let cfg = {
            let mut c = RunConfig::default_for(&env, 600, 3);
            c.schedule.n0 = 100;
            c.schedule.t1 = 101;
            c
        };
        let a = run_lazygradient(&env, &cfg).unwrap();
        let b = run_lazygradient(&env, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.total_samples(), 600);
        for algo in [
            BaselineAlgo::Uniform,
            BaselineAlgo::QLearning,
            BaselineAlgo::Psrl,
        ] {
            let r1 = run_baseline(&env, algo, 500, 7).unwrap();
            let r2 = run_baseline(&env, algo, 500, 7).unwrap();
            assert_eq!(r1, r2, "{algo:?} not deterministic");
            assert_eq!(r1.total_samples(), 500, "{algo:?} budget mismatch");
        }
    }

    #[test]
    fn laziness_and_persistent_exploration() {
        let env = crate::mdp::tests::random_mdp(4, 2, 99);
        let mut cfg = RunConfig::default_for(&env, 800, 11);
        cfg.schedule.n0 = 60;
        cfg.schedule.t1 = 61;
        let result = run_lazygradient(&env, &cfg).unwrap();
        let expected = cfg.schedule.update_times(800);
        assert_eq!(result.policy_change_times, expected);
        assert_eq!(result.behavior_snapshots.len(), expected.len());
        for (t, rows) in &result.behavior_snapshots {
            let floor = cfg.schedule.exploration_rate(*t) / 2.0;
            for &p in rows.iter() {
                assert!(p >= floor - 1e-12, "behavior prob {p} below floor {floor}");
            }
        }
    }

    #[test]
    fn every_pair_visited_on_ergodic_mdp() {
        let env = crate::mdp::tests::random_mdp(4, 3, 13);
        let mut cfg = RunConfig::default_for(&env, 50_000, 21);
        cfg.schedule.n0 = 200;
        cfg.schedule.t1 = 201;
        cfg.init_policy = InitPolicy::Uniform;
        let result = run_lazygradient(&env, &cfg).unwrap();
        assert!(result.visit_counts.iter().all(|&c| c >= 1));
    }

    #[test]
    fn trajectory_mode_refuses_non_ergodic_env() {
        let env = crate::env::build_hard_instance(1, 2, None, 0.02, 0.9).unwrap();
        let cfg = RunConfig::default_for(&env, 1000, 0);
        match run_lazygradient(&env, &cfg) {
            Err(LdxError::Mode(_)) => {}
            other => panic!("expected mode error, got {other:?}"),
        }
        let mut generative = RunConfig::default_for(&env, 1000, 0);
        generative.mode = SampleMode::Generative;
        generative.init_policy = InitPolicy::Uniform;
        assert!(run_lazygradient(&env, &generative).is_ok());
    }

    #[test]
    fn uniform_baseline_identifies_easy_bandit() {
        let env = bandit(0.8, 0.2, 0.01);
        let mut failures = 0;
        for rep in 0..100 {
            let result = run_baseline(&env, BaselineAlgo::Uniform, 2000, rep).unwrap();
            if result.pi_hat_actions() != [0] {
                failures += 1;
            }
        }
        assert!(failures <= 10, "{failures} failures of 100");
    }
}
