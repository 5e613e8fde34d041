//! The convex sampling-allocation surrogate and its lazy projected
//! subgradient solver.
//!
//! For a model with unique optimum, each suboptimal pair `(s,a)` carries the
//! cost
//!
//! ```text
//! L_sa(w) = (2 / gap_sa^2) * [ (1+g)^2 (VR* + g^2 VV*) / (w_o (1-g)^2)
//!                              + (VR_sa + g^2 VV_sa) / w_sa ]
//! ```
//!
//! with `w_o` the smallest allocation among optimal-action coordinates and
//! `VR`/`VV` reward and next-state value variances. Minimizing
//! `F = max L_sa` over the flow polytope yields the target sampling ratio;
//! `F` is convex, nonsmooth, and handled by projected subgradient steps with
//! Polyak averaging.

use ndarray::{Array1, Array2};
use std::collections::BTreeSet;

use crate::error::{LdxError, Result};
use crate::linalg::LuFactor;
use crate::mdp::{gap_stats, GapStats, TabularMdp};

/// Tolerance for allocation simplex mass.
pub const ALLOCATION_SUM_TOL: f64 = 1e-10;
/// Constraint residual allowed on projected points.
pub const PROJECTION_TOL: f64 = 1e-8;

/// A sampling ratio over state-action pairs, stored row-major by state.
#[derive(Debug, Clone, PartialEq)]
pub struct Allocation {
    omega: Array1<f64>,
    num_states: usize,
    num_actions: usize,
}

impl Allocation {
    pub fn new(omega: Array1<f64>, num_states: usize, num_actions: usize) -> Result<Self> {
        if omega.len() != num_states * num_actions {
            return Err(LdxError::Validation(format!(
                "allocation length {} does not match {num_states}x{num_actions}",
                omega.len()
            )));
        }
        if omega.iter().any(|&w| w < 0.0) {
            return Err(LdxError::Validation(
                "allocation entries must be non-negative".into(),
            ));
        }
        let sum = omega.sum();
        if (sum - 1.0).abs() > ALLOCATION_SUM_TOL {
            return Err(LdxError::Validation(format!(
                "allocation mass {sum} is not 1 within {ALLOCATION_SUM_TOL:e}"
            )));
        }
        Ok(Allocation {
            omega,
            num_states,
            num_actions,
        })
    }

    pub fn uniform(num_states: usize, num_actions: usize) -> Self {
        let n = num_states * num_actions;
        Allocation {
            omega: Array1::from_elem(n, 1.0 / n as f64),
            num_states,
            num_actions,
        }
    }

    pub fn get(&self, s: usize, a: usize) -> f64 {
        self.omega[s * self.num_actions + a]
    }

    pub fn raw(&self) -> &Array1<f64> {
        &self.omega
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    /// Total mass on a state's row.
    pub fn state_mass(&self, s: usize) -> f64 {
        (0..self.num_actions).map(|a| self.get(s, a)).sum()
    }
}

/// The Bellman-flow polytope of a model, with a per-coordinate floor.
///
/// Membership means: simplex mass one, `A(M) w = 0` for the flow matrix
/// `A(M) = Phi - P^T`, and `w >= epsilon` coordinatewise. Construction
/// certifies non-emptiness by projecting a candidate interior point; the
/// floor is halved up to ten times if needed.
#[derive(Debug, Clone)]
pub struct FlowPolytope {
    flow_matrix: Array2<f64>,
    epsilon: f64,
    mdp_hash: u64,
    num_states: usize,
    num_actions: usize,
    // reduced equality system: S-1 independent flow rows plus the simplex row
    eq_rows: Array2<f64>,
    eq_rhs: Array1<f64>,
    interior: Array1<f64>,
}

impl FlowPolytope {
    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn flow_matrix(&self) -> &Array2<f64> {
        &self.flow_matrix
    }

    pub fn mdp_hash(&self) -> u64 {
        self.mdp_hash
    }

    /// A certified point with all coordinates at least `epsilon`.
    pub fn interior_point(&self) -> &Array1<f64> {
        &self.interior
    }

    pub fn num_pairs(&self) -> usize {
        self.num_states * self.num_actions
    }

    /// Worst violation of simplex, flow, and floor constraints.
    pub fn constraint_residual(&self, w: &Array1<f64>) -> f64 {
        let mut worst = (w.sum() - 1.0).abs();
        for row in self.flow_matrix.outer_iter() {
            worst = worst.max(row.dot(w).abs());
        }
        for &v in w.iter() {
            worst = worst.max(self.epsilon - v);
        }
        worst
    }
}

/// Default floor for the restricted polytope.
pub fn default_epsilon(num_states: usize, num_actions: usize) -> f64 {
    (1e-3_f64).min(1.0 / (2.0 * (num_states * num_actions) as f64))
}

/// Build the flow matrix `A(M)` with entry `1{s = s'} - P(s | s', a')` at row
/// `s`, column `(s', a')`.
pub fn flow_matrix(mdp: &TabularMdp) -> Array2<f64> {
    let (s_n, a_n) = (mdp.num_states(), mdp.num_actions());
    let mut mat = Array2::zeros((s_n, s_n * a_n));
    for s in 0..s_n {
        for s2 in 0..s_n {
            for a in 0..a_n {
                let col = s2 * a_n + a;
                let indicator = if s == s2 { 1.0 } else { 0.0 };
                mat[[s, col]] = indicator - mdp.transitions()[[s2, a, s]];
            }
        }
    }
    mat
}

/// Build and certify the epsilon-restricted flow polytope.
pub fn flow_polytope(mdp: &TabularMdp, epsilon: f64) -> Result<FlowPolytope> {
    if epsilon <= 0.0 {
        return Err(LdxError::Validation(format!(
            "epsilon must be positive, got {epsilon}"
        )));
    }
    let (s_n, a_n) = (mdp.num_states(), mdp.num_actions());
    let n = s_n * a_n;
    let mat = flow_matrix(mdp);
    // rows of A(M) sum to zero, so one flow row is redundant; keep S-1 of
    // them plus the simplex row
    let mut eq_rows = Array2::zeros((s_n, n));
    for s in 0..s_n.saturating_sub(1) {
        for c in 0..n {
            eq_rows[[s, c]] = mat[[s, c]];
        }
    }
    for c in 0..n {
        eq_rows[[s_n - 1, c]] = 1.0;
    }
    let mut eq_rhs = Array1::zeros(s_n);
    eq_rhs[s_n - 1] = 1.0;

    let candidate =
        uniform_policy_occupancy(mdp).unwrap_or_else(|| Array1::from_elem(n, 1.0 / n as f64));
    let poly = FlowPolytope {
        flow_matrix: mat,
        epsilon,
        mdp_hash: mdp.content_hash(),
        num_states: s_n,
        num_actions: a_n,
        eq_rows,
        eq_rhs,
        interior: candidate.clone(),
    };
    certify(poly, &candidate)
}

/// The restricted simplex over pairs, used when samples may be drawn from
/// any state-action pair and the flow-balance constraints do not bind.
pub fn simplex_polytope(
    num_states: usize,
    num_actions: usize,
    epsilon: f64,
) -> Result<FlowPolytope> {
    if epsilon <= 0.0 {
        return Err(LdxError::Validation(format!(
            "epsilon must be positive, got {epsilon}"
        )));
    }
    let n = num_states * num_actions;
    let mut eq_rows = Array2::zeros((1, n));
    for c in 0..n {
        eq_rows[[0, c]] = 1.0;
    }
    let mut eq_rhs = Array1::zeros(1);
    eq_rhs[0] = 1.0;
    let candidate = Array1::from_elem(n, 1.0 / n as f64);
    let poly = FlowPolytope {
        flow_matrix: Array2::zeros((num_states, n)),
        epsilon,
        mdp_hash: 0,
        num_states,
        num_actions,
        eq_rows,
        eq_rhs,
        interior: candidate.clone(),
    };
    certify(poly, &candidate)
}

/// Certify non-emptiness by projecting a candidate point, halving the floor
/// up to ten times.
fn certify(mut poly: FlowPolytope, candidate: &Array1<f64>) -> Result<FlowPolytope> {
    for _ in 0..=10 {
        if let Ok(point) = project_raw(candidate, &poly) {
            if poly.constraint_residual(&point) <= PROJECTION_TOL {
                poly.interior = point;
                return Ok(poly);
            }
        }
        poly.epsilon *= 0.5;
    }
    Err(LdxError::Infeasible(format!(
        "no interior point found down to epsilon {:e}; the model may be \
         degenerate or non-ergodic",
        poly.epsilon
    )))
}

/// Stationary state-action occupancy of the uniform policy, if the chain
/// admits one; used as the certification candidate.
fn uniform_policy_occupancy(mdp: &TabularMdp) -> Option<Array1<f64>> {
    let (s_n, a_n) = (mdp.num_states(), mdp.num_actions());
    // chain kernel under the uniform policy
    let mut kernel: Array2<f64> = Array2::zeros((s_n, s_n));
    for s in 0..s_n {
        for a in 0..a_n {
            for s2 in 0..s_n {
                kernel[[s, s2]] += mdp.transitions()[[s, a, s2]] / a_n as f64;
            }
        }
    }
    // solve rho' K = rho', sum rho = 1: replace the last balance row
    let mut system = Array2::zeros((s_n, s_n));
    for s in 0..s_n {
        for s2 in 0..s_n {
            system[[s, s2]] = kernel[[s2, s]] - if s == s2 { 1.0 } else { 0.0 };
        }
    }
    for s2 in 0..s_n {
        system[[s_n - 1, s2]] = 1.0;
    }
    let mut rhs = Array1::zeros(s_n);
    rhs[s_n - 1] = 1.0;
    let rho = crate::linalg::solve(&system, &rhs).ok()?;
    if rho.iter().any(|&x| !x.is_finite() || x < -1e-9) {
        return None;
    }
    let mut occ = Array1::zeros(s_n * a_n);
    for s in 0..s_n {
        for a in 0..a_n {
            occ[s * a_n + a] = rho[s].max(0.0) / a_n as f64;
        }
    }
    let total = occ.sum();
    if total <= 0.0 {
        return None;
    }
    occ.mapv_inplace(|x| x / total);
    Some(occ)
}

/// Euclidean projection onto the restricted flow polytope.
pub fn project_flow_polytope(x: &Array1<f64>, poly: &FlowPolytope) -> Result<Allocation> {
    let z = project_raw(x, poly)?;
    let residual = poly.constraint_residual(&z);
    if residual > PROJECTION_TOL {
        return Err(LdxError::Numerical(format!(
            "projection residual {residual:e} exceeds {PROJECTION_TOL:e}"
        )));
    }
    // clamp floor-level roundoff so downstream positivity checks hold
    let cleaned = z.mapv(|v| v.max(poly.epsilon * (1.0 - 1e-12)));
    Allocation::new(
        normalize_mass(cleaned),
        poly.num_states,
        poly.num_actions,
    )
}

fn normalize_mass(mut w: Array1<f64>) -> Array1<f64> {
    let sum = w.sum();
    if (sum - 1.0).abs() > 1e-15 && sum > 0.0 {
        w.mapv_inplace(|v| v / sum);
    }
    w
}

/// Primal active-set solver for `min ||z - x||^2` subject to the equality
/// rows and the coordinate floors. Floors enter the working set one at a
/// time; a floor whose multiplier has the wrong sign leaves it again, so the
/// method terminates at the exact projection.
fn project_raw(x: &Array1<f64>, poly: &FlowPolytope) -> Result<Array1<f64>> {
    let n = x.len();
    let mut active: BTreeSet<usize> = BTreeSet::new();
    let cap = 4 * n + 16;
    let mut last_residual = f64::INFINITY;
    for _ in 0..cap {
        let (z, lambda) = solve_equality_qp(x, poly, &active)?;
        // most violated floor among inactive coordinates
        let mut worst_i = None;
        let mut worst_v = poly.epsilon - 1e-10;
        for i in 0..n {
            if !active.contains(&i) && z[i] < worst_v {
                worst_v = z[i];
                worst_i = Some(i);
            }
        }
        if let Some(i) = worst_i {
            active.insert(i);
            last_residual = poly.epsilon - worst_v;
            continue;
        }
        // KKT: active-floor rows need multiplier <= 0 in this sign convention
        let m_eq = poly.eq_rows.nrows();
        let mut drop_i = None;
        let mut drop_v = 1e-10;
        for (offset, &i) in active.iter().enumerate() {
            let lam = lambda[m_eq + offset];
            if lam > drop_v {
                drop_v = lam;
                drop_i = Some(i);
            }
        }
        match drop_i {
            Some(i) => {
                active.remove(&i);
                last_residual = drop_v;
            }
            None => return Ok(z),
        }
    }
    Err(LdxError::Numerical(format!(
        "projection active-set loop hit its cap of {cap} iterations \
         (last residual {last_residual:e})"
    )))
}

/// Solve the equality-constrained projection via the Schur complement on the
/// constraint rows. Returns the point and the row multipliers.
fn solve_equality_qp(
    x: &Array1<f64>,
    poly: &FlowPolytope,
    active: &BTreeSet<usize>,
) -> Result<(Array1<f64>, Array1<f64>)> {
    let n = x.len();
    let m_eq = poly.eq_rows.nrows();
    let m = m_eq + active.len();
    let mut rows = Array2::zeros((m, n));
    let mut rhs = Array1::zeros(m);
    for r in 0..m_eq {
        for c in 0..n {
            rows[[r, c]] = poly.eq_rows[[r, c]];
        }
        rhs[r] = poly.eq_rhs[r];
    }
    for (offset, &i) in active.iter().enumerate() {
        rows[[m_eq + offset, i]] = 1.0;
        rhs[m_eq + offset] = poly.epsilon;
    }
    // (C C^T + ridge) lambda = C x - d ; z = x - C^T lambda
    let mut gram = Array2::zeros((m, m));
    for r1 in 0..m {
        for r2 in r1..m {
            let mut dot = 0.0;
            for c in 0..n {
                dot += rows[[r1, c]] * rows[[r2, c]];
            }
            gram[[r1, r2]] = dot;
            gram[[r2, r1]] = dot;
        }
    }
    // tiny ridge absorbs redundancy among flow rows of reducible kernels
    for r in 0..m {
        gram[[r, r]] += 1e-12;
    }
    let mut target = Array1::zeros(m);
    for r in 0..m {
        let mut dot = 0.0;
        for c in 0..n {
            dot += rows[[r, c]] * x[c];
        }
        target[r] = dot - rhs[r];
    }
    let lambda = LuFactor::new(&gram)?.solve(&target)?;
    let mut z = x.clone();
    for r in 0..m {
        if lambda[r] == 0.0 {
            continue;
        }
        for c in 0..n {
            z[c] -= lambda[r] * rows[[r, c]];
        }
    }
    Ok((z, lambda))
}

// ---------------------------------------------------------------------------
// Surrogate objective
// ---------------------------------------------------------------------------

/// Per-pair cost of the allocation surrogate; see the module docs.
fn pair_cost(
    omega: &Allocation,
    stats: &GapStats,
    gamma: f64,
    omega_o: f64,
    s: usize,
    a: usize,
) -> Result<f64> {
    let gap = stats.gaps[[s, a]];
    if gap <= 0.0 {
        return Err(LdxError::Positivity(format!(
            "non-positive gap {gap} at suboptimal pair ({s},{a})"
        )));
    }
    let w = omega.get(s, a);
    if w <= 0.0 || omega_o <= 0.0 {
        return Err(LdxError::Positivity(format!(
            "allocation must be positive on denominator coordinates; \
             w({s},{a})={w}, w_o={omega_o}"
        )));
    }
    let shared = (1.0 + gamma).powi(2)
        * (stats.max_reward_var + gamma * gamma * stats.max_value_var)
        / (omega_o * (1.0 - gamma).powi(2));
    let local =
        (stats.reward_var[[s, a]] + gamma * gamma * stats.value_var[[s, a]]) / w;
    Ok(2.0 / (gap * gap) * (shared + local))
}

/// Coordinate of `w_o`: the optimal-action pair with the least allocation,
/// lowest state index on ties.
fn omega_o_coordinate(omega: &Allocation, stats: &GapStats) -> (usize, f64) {
    let mut best_s = 0;
    let mut best = f64::INFINITY;
    for s in 0..omega.num_states() {
        let w = omega.get(s, stats.optimal_actions[s]);
        if w < best {
            best = w;
            best_s = s;
        }
    }
    (best_s, best)
}

/// Evaluate `F(w) = max L_sa(w)` and the lexicographically-first pair
/// attaining the max.
pub fn surrogate_objective(
    omega: &Allocation,
    stats: &GapStats,
    gamma: f64,
) -> Result<(f64, (usize, usize))> {
    let (_, omega_o) = omega_o_coordinate(omega, stats);
    let mut best: Option<(f64, (usize, usize))> = None;
    for s in 0..omega.num_states() {
        for a in 0..omega.num_actions() {
            if stats.is_optimal_pair(s, a) {
                continue;
            }
            let cost = pair_cost(omega, stats, gamma, omega_o, s, a)?;
            if best.is_none_or(|(b, _)| cost > b) {
                best = Some((cost, (s, a)));
            }
        }
    }
    best.ok_or_else(|| {
        LdxError::Validation("surrogate objective needs at least one suboptimal pair".into())
    })
}

/// A subgradient of `F` at `omega`: two (possibly coincident) nonzero
/// coordinates, from the active pair's local term and the shared `w_o` term.
pub fn surrogate_subgradient(
    omega: &Allocation,
    stats: &GapStats,
    gamma: f64,
) -> Result<Array1<f64>> {
    let (f_s, f_a) = surrogate_objective(omega, stats, gamma)?.1;
    let (o_s, omega_o) = omega_o_coordinate(omega, stats);
    let gap = stats.gaps[[f_s, f_a]];
    let w = omega.get(f_s, f_a);
    let mut g = Array1::zeros(omega.raw().len());
    let scale = 2.0 / (gap * gap);
    let local = stats.reward_var[[f_s, f_a]] + gamma * gamma * stats.value_var[[f_s, f_a]];
    g[f_s * omega.num_actions() + f_a] -= scale * local / (w * w);
    let shared = (1.0 + gamma).powi(2)
        * (stats.max_reward_var + gamma * gamma * stats.max_value_var)
        / (1.0 - gamma).powi(2);
    let o_col = o_s * omega.num_actions() + stats.optimal_actions[o_s];
    g[o_col] -= scale * shared / (omega_o * omega_o);
    Ok(g)
}

// ---------------------------------------------------------------------------
// Lazy one-step solver
// ---------------------------------------------------------------------------

/// State of the projected subgradient recursion with Polyak averaging.
#[derive(Debug, Clone)]
pub struct SolverState {
    iterate: Array1<f64>,
    average: Array1<f64>,
    step_index: usize,
    step_size: f64,
    /// Fixed normalization applied to subgradients: the step rule
    /// `1/sqrt(N)` presumes a unit-scale objective, while `F` carries the
    /// `(1+g)^2/(1-g)^2` factor and arbitrary variance units. Dividing the
    /// subgradient by the objective's value at the starting point restores
    /// the intended step geometry without adapting anything mid-run.
    objective_scale: f64,
    objective_trace: Vec<f64>,
    num_states: usize,
    num_actions: usize,
}

impl SolverState {
    /// Start from a feasible point with a fixed step size.
    pub fn new(start: Allocation, step_size: f64) -> Self {
        SolverState {
            iterate: start.raw().clone(),
            average: start.raw().clone(),
            num_states: start.num_states(),
            num_actions: start.num_actions(),
            step_index: 0,
            step_size,
            objective_scale: 1.0,
            objective_trace: Vec::new(),
        }
    }

    /// Fix the objective normalization (once, before stepping).
    pub fn with_objective_scale(mut self, scale: f64) -> Self {
        if scale.is_finite() && scale > 0.0 {
            self.objective_scale = scale;
        }
        self
    }

    pub fn iterate(&self) -> Allocation {
        Allocation {
            omega: self.iterate.clone(),
            num_states: self.num_states,
            num_actions: self.num_actions,
        }
    }

    pub fn average(&self) -> Allocation {
        Allocation {
            omega: self.average.clone(),
            num_states: self.num_states,
            num_actions: self.num_actions,
        }
    }

    pub fn step_index(&self) -> usize {
        self.step_index
    }

    pub fn step_size(&self) -> f64 {
        self.step_size
    }

    pub fn objective_trace(&self) -> &[f64] {
        &self.objective_trace
    }
}

/// Largest subgradient displacement fed to the projection. Floored gaps on
/// degenerate empirical models can blow `||g||` past what a float projection
/// can absorb; a unit trust region (the polytope has diameter below sqrt(2))
/// leaves any non-degenerate step untouched.
pub const MAX_STEP_NORM: f64 = 1.0;

/// One projected subgradient step followed by the exact `1/n` average
/// update; the trace records the averaged iterate's objective.
pub fn lazy_step(
    mut state: SolverState,
    stats: &GapStats,
    gamma: f64,
    poly: &FlowPolytope,
) -> Result<SolverState> {
    let current = state.iterate();
    let g = surrogate_subgradient(&current, stats, gamma)?.mapv(|v| v / state.objective_scale);
    let g_norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    let step = if state.step_size * g_norm > MAX_STEP_NORM {
        MAX_STEP_NORM / g_norm
    } else {
        state.step_size
    };
    let mut target = state.iterate.clone();
    target.scaled_add(-step, &g);
    let projected = project_flow_polytope(&target, poly)?;
    state.step_index += 1;
    let n = state.step_index as f64;
    state.iterate = projected.raw().clone();
    if state.step_index == 1 {
        state.average = state.iterate.clone();
    } else {
        for (avg, &x) in state.average.iter_mut().zip(state.iterate.iter()) {
            *avg = (n - 1.0) / n * *avg + x / n;
        }
    }
    let avg = state.average();
    let (f, _) = surrogate_objective(&avg, stats, gamma)?;
    state.objective_trace.push(f);
    Ok(state)
}

/// Result of solving the allocation problem on a fixed model.
#[derive(Debug, Clone)]
pub struct AllocationSolution {
    pub allocation: Allocation,
    pub objective: f64,
    /// Effective floor after any certification halving.
    pub epsilon: f64,
    pub objective_trace: Vec<f64>,
}

/// Solve `min_w F(w)` over the restricted flow polytope of a known model by
/// running `iters` lazy steps with step size `1/sqrt(iters)`.
pub fn solve_allocation(mdp: &TabularMdp, epsilon: f64, iters: usize) -> Result<AllocationSolution> {
    if iters == 0 {
        return Err(LdxError::Validation("iters must be at least 1".into()));
    }
    let stats = gap_stats(mdp)?;
    let poly = flow_polytope(mdp, epsilon)?;
    let uniform = Array1::from_elem(poly.num_pairs(), 1.0 / poly.num_pairs() as f64);
    let start = project_flow_polytope(&uniform, &poly)?;
    let (f_start, _) = surrogate_objective(&start, &stats, mdp.gamma())?;
    let mut state =
        SolverState::new(start, 1.0 / (iters as f64).sqrt()).with_objective_scale(f_start);
    for _ in 0..iters {
        state = lazy_step(state, &stats, mdp.gamma(), &poly)?;
    }
    let allocation = state.average();
    let (objective, _) = surrogate_objective(&allocation, &stats, mdp.gamma())?;
    Ok(AllocationSolution {
        allocation,
        objective,
        epsilon: poly.epsilon(),
        objective_trace: state.objective_trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::RewardNoise;
    use approx::assert_abs_diff_eq;
    use ndarray::{arr1, Array2, Array3};

    /// Stats for a 1-state bandit with chosen gaps and variances.
    pub(crate) fn bandit_stats(
        gaps: &[f64],
        reward_var: &[f64],
        value_var: &[f64],
        max_reward_var: f64,
        max_value_var: f64,
    ) -> GapStats {
        let a_n = gaps.len();
        GapStats {
            gaps: Array2::from_shape_vec((1, a_n), gaps.to_vec()).unwrap(),
            reward_var: Array2::from_shape_vec((1, a_n), reward_var.to_vec()).unwrap(),
            value_var: Array2::from_shape_vec((1, a_n), value_var.to_vec()).unwrap(),
            max_reward_var,
            max_value_var,
            delta_min: gaps
                .iter()
                .copied()
                .filter(|&g| g > 0.0)
                .fold(f64::INFINITY, f64::min),
            optimal_actions: vec![0],
            v_star: arr1(&[0.0]),
        }
    }

    fn bandit_polytope(num_actions: usize, epsilon: f64) -> FlowPolytope {
        let transitions = Array3::from_elem((1, num_actions, 1), 1.0);
        let mut rewards = Array2::zeros((1, num_actions));
        for a in 0..num_actions {
            rewards[[0, a]] = -(a as f64); // action 0 optimal
        }
        let noise = Array2::from_elem((1, num_actions), RewardNoise::Gaussian { var: 0.1 });
        let mdp = TabularMdp::new(transitions, rewards, noise, 0.0).unwrap();
        flow_polytope(&mdp, epsilon).unwrap()
    }

    #[test]
    fn flow_matrix_for_swap_chain() {
        let mut transitions = Array3::zeros((2, 1, 2));
        transitions[[0, 0, 1]] = 1.0;
        transitions[[1, 0, 0]] = 1.0;
        let rewards = Array2::zeros((2, 1));
        let noise = Array2::from_elem((2, 1), RewardNoise::Bernoulli);
        let mdp = TabularMdp::new(transitions, rewards, noise, 0.5).unwrap();
        let mat = flow_matrix(&mdp);
        assert_eq!(mat, ndarray::arr2(&[[1.0, -1.0], [-1.0, 1.0]]));
        let poly = flow_polytope(&mdp, 0.01).unwrap();
        let w = arr1(&[0.5, 0.5]);
        assert!(poly.constraint_residual(&w) <= 1e-12);
    }

    #[test]
    fn single_state_polytope_is_the_simplex() {
        let poly = bandit_polytope(2, 0.1);
        assert_eq!(poly.flow_matrix().nrows(), 1);
        assert!(poly.flow_matrix().iter().all(|&v| v == 0.0));
        let projected = project_flow_polytope(&arr1(&[1.2, 0.3]), &poly).unwrap();
        assert_abs_diff_eq!(projected.raw()[0], 0.9, epsilon = 1e-9);
        assert_abs_diff_eq!(projected.raw()[1], 0.1, epsilon = 1e-9);
    }

    #[test]
    fn uniform_kernel_admits_uniform_allocation() {
        let s_n = 3;
        let a_n = 2;
        let transitions = Array3::from_elem((s_n, a_n, s_n), 1.0 / s_n as f64);
        let rewards = Array2::zeros((s_n, a_n));
        let noise = Array2::from_elem((s_n, a_n), RewardNoise::Bernoulli);
        let mdp = TabularMdp::new(transitions, rewards, noise, 0.9).unwrap();
        let poly = flow_polytope(&mdp, 1e-3).unwrap();
        let uniform = Array1::from_elem(s_n * a_n, 1.0 / (s_n * a_n) as f64);
        assert!(poly.constraint_residual(&uniform) <= 1e-12);
    }

    #[test]
    fn projection_is_idempotent_and_nonexpansive() {
        let mdp = crate::mdp::tests::random_mdp(3, 2, 17);
        let poly = flow_polytope(&mdp, 1e-3).unwrap();
        let inside = poly.interior_point().clone();
        let again = project_flow_polytope(&inside, &poly).unwrap();
        for (a, b) in inside.iter().zip(again.raw().iter()) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-9);
        }
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(3);
        for _ in 0..50 {
            let x: Array1<f64> = Array1::from_iter((0..6).map(|_| rng.gen_range(-1.0..2.0)));
            let y: Array1<f64> = Array1::from_iter((0..6).map(|_| rng.gen_range(-1.0..2.0)));
            let px = project_flow_polytope(&x, &poly).unwrap();
            let py = project_flow_polytope(&y, &poly).unwrap();
            let d_in = (&x - &y).mapv(|v| v * v).sum().sqrt();
            let d_out = (px.raw() - py.raw()).mapv(|v| v * v).sum().sqrt();
            assert!(d_out <= d_in + 1e-9, "projection expanded {d_in} -> {d_out}");
        }
    }

    #[test]
    fn surrogate_objective_hand_values() {
        // gamma = 0: L = 2 * (0.25/0.5 + 0.25/0.5) = 2
        let stats = bandit_stats(&[0.0, 1.0], &[0.25, 0.25], &[0.0, 0.0], 0.25, 0.0);
        let omega = Allocation::new(arr1(&[0.5, 0.5]), 1, 2).unwrap();
        let (f, arg) = surrogate_objective(&omega, &stats, 0.0).unwrap();
        assert_abs_diff_eq!(f, 2.0, epsilon = 1e-12);
        assert_eq!(arg, (0, 1));

        // gamma = 0.5 worked example: 2 * (9 * 0.29 / 0.5 + 0.29 / 0.5) = 11.6
        let stats = bandit_stats(&[0.0, 1.0], &[0.25, 0.25], &[0.16, 0.16], 0.25, 0.16);
        let (f, _) = surrogate_objective(&omega, &stats, 0.5).unwrap();
        assert_abs_diff_eq!(f, 11.6, epsilon = 1e-12);
    }

    #[test]
    fn surrogate_scaling_in_gaps() {
        let stats = bandit_stats(&[0.0, 0.7, 1.3], &[0.2, 0.3, 0.1], &[0.0, 0.1, 0.2], 0.2, 0.0);
        let omega = Allocation::new(arr1(&[0.4, 0.3, 0.3]), 1, 3).unwrap();
        let (f1, arg1) = surrogate_objective(&omega, &stats, 0.6).unwrap();
        let c = 2.5;
        let scaled = bandit_stats(
            &[0.0, 0.7 * c, 1.3 * c],
            &[0.2, 0.3, 0.1],
            &[0.0, 0.1, 0.2],
            0.2,
            0.0,
        );
        let (f2, arg2) = surrogate_objective(&omega, &scaled, 0.6).unwrap();
        assert_abs_diff_eq!(f2, f1 / (c * c), epsilon = 1e-12);
        assert_eq!(arg1, arg2);
    }

    #[test]
    fn subgradient_hand_value() {
        let stats = bandit_stats(&[0.0, 1.0], &[0.25, 0.25], &[0.0, 0.0], 0.25, 0.0);
        let omega = Allocation::new(arr1(&[0.5, 0.5]), 1, 2).unwrap();
        let g = surrogate_subgradient(&omega, &stats, 0.0).unwrap();
        assert_abs_diff_eq!(g[0], -2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(g[1], -2.0, epsilon = 1e-12);
    }

    #[test]
    fn positivity_errors() {
        let stats = bandit_stats(&[0.0, 1.0], &[0.25, 0.25], &[0.0, 0.0], 0.25, 0.0);
        let omega = Allocation {
            omega: arr1(&[1.0, 0.0]),
            num_states: 1,
            num_actions: 2,
        };
        assert!(matches!(
            surrogate_objective(&omega, &stats, 0.0),
            Err(LdxError::Positivity(_))
        ));
    }

    #[test]
    fn zero_subgradient_keeps_iterate_fixed() {
        let stats = bandit_stats(&[0.0, 1.0], &[0.0, 0.0], &[0.0, 0.0], 0.0, 0.0);
        let poly = bandit_polytope(2, 0.05);
        let start = project_flow_polytope(&arr1(&[0.6, 0.4]), &poly).unwrap();
        let state = SolverState::new(start.clone(), 0.5);
        let stepped = lazy_step(state, &stats, 0.0, &poly).unwrap();
        for (a, b) in stepped.iterate().raw().iter().zip(start.raw().iter()) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-10);
        }
        // averaging base case: after the first step the average is x1
        assert_eq!(stepped.step_index(), 1);
        for (a, b) in stepped.average().raw().iter().zip(stepped.iterate().raw().iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn symmetric_bandit_solves_to_uniform() {
        let transitions = Array3::from_elem((1, 2, 1), 1.0);
        let mut rewards = Array2::zeros((1, 2));
        rewards[[0, 0]] = 1.0;
        rewards[[0, 1]] = 0.0;
        let noise = Array2::from_elem((1, 2), RewardNoise::Gaussian { var: 0.25 });
        let mdp = TabularMdp::new(transitions, rewards, noise, 0.0).unwrap();
        let solution = solve_allocation(&mdp, 0.01, 4000).unwrap();
        assert_abs_diff_eq!(solution.allocation.raw()[0], 0.5, epsilon = 1e-2);
        assert_abs_diff_eq!(solution.allocation.raw()[1], 0.5, epsilon = 1e-2);
        assert!(solution
            .allocation
            .raw()
            .iter()
            .all(|&w| w >= solution.epsilon - 1e-9));
    }
}
