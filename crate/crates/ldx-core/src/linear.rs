//! Linear function approximation for the allocation problem.
//!
//! A linear MDP factors transitions and rewards through a shared feature
//! map: `P(s'|s,a) = phi(s,a)' mu(s')` and `r(s,a) = phi(s,a)' theta`. The
//! identification objectives replace per-pair visitation by directional
//! coverage of the design matrix `Lambda(w) = sum_sa w_sa phi phi'`: a pair
//! is easy to separate when the feature direction that distinguishes it from
//! the optimal action is well covered.

use ndarray::{Array1, Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{LdxError, Result};
use crate::linalg::LuFactor;
use crate::mdp::{gap_stats, GapStats, RewardNoise, TabularMdp};
use crate::solver::{flow_polytope, project_flow_polytope, Allocation, MAX_STEP_NORM};

/// Ridge added to the design matrix before inversion.
pub const DESIGN_RIDGE: f64 = 1e-8;

/// A linear MDP: features (one row per pair, row-major by state), measure
/// matrix, reward vector, and discount.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearMdp {
    num_states: usize,
    num_actions: usize,
    /// (S*A) x d feature matrix.
    phi: Array2<f64>,
    /// d x S measure matrix.
    mu: Array2<f64>,
    /// d reward parameter.
    theta: Array1<f64>,
    gamma: f64,
}

impl LinearMdp {
    pub fn new(
        num_states: usize,
        num_actions: usize,
        phi: Array2<f64>,
        mu: Array2<f64>,
        theta: Array1<f64>,
        gamma: f64,
    ) -> Result<Self> {
        let d = phi.ncols();
        if phi.nrows() != num_states * num_actions {
            return Err(LdxError::Validation(format!(
                "phi has {} rows, expected {}",
                phi.nrows(),
                num_states * num_actions
            )));
        }
        if mu.dim() != (d, num_states) {
            return Err(LdxError::Validation(format!(
                "mu is {:?}, expected ({d}, {num_states})",
                mu.dim()
            )));
        }
        if theta.len() != d {
            return Err(LdxError::Validation(format!(
                "theta has length {}, expected {d}",
                theta.len()
            )));
        }
        Ok(LinearMdp {
            num_states,
            num_actions,
            phi,
            mu,
            theta,
            gamma,
        })
    }

    pub fn dim(&self) -> usize {
        self.phi.ncols()
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn feature(&self, s: usize, a: usize) -> ndarray::ArrayView1<'_, f64> {
        self.phi.row(s * self.num_actions + a)
    }

    /// One-hot embedding of a tabular model: `d = S*A`, basis features,
    /// `mu` the transition tensor reshaped, `theta` the rewards.
    pub fn one_hot(mdp: &TabularMdp) -> Self {
        let (s_n, a_n) = (mdp.num_states(), mdp.num_actions());
        let n = s_n * a_n;
        let phi = Array2::eye(n);
        let mut mu = Array2::zeros((n, s_n));
        let mut theta = Array1::zeros(n);
        for s in 0..s_n {
            for a in 0..a_n {
                let row = s * a_n + a;
                for s2 in 0..s_n {
                    mu[[row, s2]] = mdp.transitions()[[s, a, s2]];
                }
                theta[row] = mdp.reward_mean(s, a);
            }
        }
        LinearMdp {
            num_states: s_n,
            num_actions: a_n,
            phi,
            mu,
            theta,
            gamma: mdp.gamma(),
        }
    }
}

/// Materialize and fully check the induced tabular model.
///
/// Checks: `||phi(s,a)|| <= 1`, rows `phi' mu` stochastic within 1e-9,
/// rewards `phi' theta` in `[0,1]` within 1e-9. The returned model has rows
/// renormalized exactly.
pub fn validate_linear(lin: &LinearMdp) -> Result<TabularMdp> {
    let (s_n, a_n) = (lin.num_states, lin.num_actions);
    const TOL: f64 = 1e-9;
    let mut transitions = Array3::zeros((s_n, a_n, s_n));
    let mut rewards = Array2::zeros((s_n, a_n));
    for s in 0..s_n {
        for a in 0..a_n {
            let phi = lin.feature(s, a);
            let norm = phi.dot(&phi).sqrt();
            if norm > 1.0 + TOL {
                return Err(LdxError::Representation(format!(
                    "||phi({s},{a})|| = {norm} exceeds 1"
                )));
            }
            let mut sum = 0.0;
            for s2 in 0..s_n {
                let p = phi.dot(&lin.mu.column(s2));
                if p < -TOL {
                    return Err(LdxError::Representation(format!(
                        "induced probability {p} at ({s},{a}) -> {s2} is negative"
                    )));
                }
                transitions[[s, a, s2]] = p.max(0.0);
                sum += p;
            }
            if (sum - 1.0).abs() > TOL {
                return Err(LdxError::Representation(format!(
                    "induced row ({s},{a}) sums to {sum}"
                )));
            }
            let r = phi.dot(&lin.theta);
            if !(-TOL..=1.0 + TOL).contains(&r) {
                return Err(LdxError::Representation(format!(
                    "induced reward {r} at ({s},{a}) outside [0,1]"
                )));
            }
            rewards[[s, a]] = r.clamp(0.0, 1.0);
            // exact renormalization for the strict tabular invariant
            let total: f64 = (0..s_n).map(|s2| transitions[[s, a, s2]]).sum();
            if total > 0.0 {
                let mut largest = 0;
                for s2 in 0..s_n {
                    transitions[[s, a, s2]] /= total;
                    if transitions[[s, a, s2]] > transitions[[s, a, largest]] {
                        largest = s2;
                    }
                }
                let total: f64 = (0..s_n).map(|s2| transitions[[s, a, s2]]).sum();
                transitions[[s, a, largest]] += 1.0 - total;
            }
        }
    }
    let noise = Array2::from_elem((s_n, a_n), RewardNoise::Bernoulli);
    TabularMdp::new(transitions, rewards, noise, lin.gamma)
}

/// Feature second-moment matrix under an allocation, with its ridge.
#[derive(Debug, Clone)]
pub struct DesignMatrix {
    pub lambda: Array2<f64>,
    pub ridge: f64,
}

/// Exact weighted sum of feature outer products.
pub fn design_matrix(lin: &LinearMdp, omega: &Allocation) -> Result<DesignMatrix> {
    if omega.num_states() != lin.num_states || omega.num_actions() != lin.num_actions {
        return Err(LdxError::Validation(
            "allocation shape does not match the linear model".into(),
        ));
    }
    let d = lin.dim();
    let mut lambda = Array2::zeros((d, d));
    for s in 0..lin.num_states {
        for a in 0..lin.num_actions {
            let w = omega.get(s, a);
            if w == 0.0 {
                continue;
            }
            let phi = lin.feature(s, a);
            for i in 0..d {
                for j in 0..d {
                    lambda[[i, j]] += w * phi[i] * phi[j];
                }
            }
        }
    }
    Ok(DesignMatrix {
        lambda,
        ridge: DESIGN_RIDGE,
    })
}

impl DesignMatrix {
    /// LU factorization of the ridged matrix.
    fn factor(&self) -> Result<LuFactor> {
        let d = self.lambda.nrows();
        let mut ridged = self.lambda.clone();
        for i in 0..d {
            ridged[[i, i]] += self.ridge;
        }
        LuFactor::new(&ridged).map_err(|e| {
            LdxError::Conditioning(format!("design matrix is singular beyond the ridge: {e}"))
        })
    }
}

/// Which identification objective to evaluate or maximize.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LinearVariant {
    /// Full bound with the propagated-error term.
    Theorem5,
    /// Difference-direction coverage only.
    Surrogate1,
    /// Worst-gap over raw feature coverage.
    Surrogate2,
}

struct Norms {
    /// `||phi(s,a) - phi(s, pi*(s))||^2` through the ridged inverse, per pair.
    diff_sq: Array2<f64>,
    /// `||phi(s,a)||^2` through the ridged inverse, per pair.
    feat_sq: Array2<f64>,
    /// max over pairs of `feat_sq`.
    max_feat_sq: f64,
}

fn inverse_norms(lin: &LinearMdp, omega: &Allocation, stats: &GapStats) -> Result<Norms> {
    let factor = design_matrix(lin, omega)?.factor()?;
    let (s_n, a_n) = (lin.num_states, lin.num_actions);
    let mut diff_sq = Array2::zeros((s_n, a_n));
    let mut feat_sq = Array2::zeros((s_n, a_n));
    let mut max_feat_sq = 0.0f64;
    for s in 0..s_n {
        for a in 0..a_n {
            let phi = lin.feature(s, a).to_owned();
            let solved = factor.solve(&phi)?;
            let q = phi.dot(&solved);
            feat_sq[[s, a]] = q.max(0.0);
            max_feat_sq = max_feat_sq.max(feat_sq[[s, a]]);
            if a != stats.optimal_actions[s] {
                let diff = &phi - &lin.feature(s, stats.optimal_actions[s]).to_owned();
                let solved = factor.solve(&diff)?;
                diff_sq[[s, a]] = diff.dot(&solved).max(0.0);
            }
        }
    }
    Ok(Norms {
        diff_sq,
        feat_sq,
        max_feat_sq,
    })
}

fn variant_value(
    variant: LinearVariant,
    norms: &Norms,
    stats: &GapStats,
    gamma: f64,
    s: usize,
    a: usize,
) -> f64 {
    let gap = stats.gaps[[s, a]];
    match variant {
        LinearVariant::Theorem5 => {
            let denom = norms.diff_sq[[s, a]].sqrt()
                + 2.0 * gamma / (1.0 - gamma) * norms.max_feat_sq.sqrt();
            (1.0 - gamma).powi(2) / 6.0 * (gap / denom).powi(2)
        }
        LinearVariant::Surrogate1 => gap * gap / norms.diff_sq[[s, a]],
        LinearVariant::Surrogate2 => stats.delta_min * stats.delta_min / norms.feat_sq[[s, a]],
    }
}

/// Evaluate the chosen objective at an allocation (larger is better).
pub fn linear_surrogate_objective(
    lin: &LinearMdp,
    omega: &Allocation,
    variant: LinearVariant,
) -> Result<f64> {
    let induced = validate_linear(lin)?;
    let stats = gap_stats(&induced)?;
    linear_objective_with_stats(lin, omega, variant, &stats)
}

fn linear_objective_with_stats(
    lin: &LinearMdp,
    omega: &Allocation,
    variant: LinearVariant,
    stats: &GapStats,
) -> Result<f64> {
    let norms = inverse_norms(lin, omega, stats)?;
    let mut best = f64::INFINITY;
    for s in 0..lin.num_states {
        for a in 0..lin.num_actions {
            if a == stats.optimal_actions[s] {
                continue;
            }
            best = best.min(variant_value(variant, &norms, stats, lin.gamma, s, a));
        }
    }
    if best.is_infinite() {
        return Err(LdxError::Validation(
            "linear objective needs at least one suboptimal pair".into(),
        ));
    }
    Ok(best)
}

/// Supergradient of the chosen objective at `omega` (for ascent). The
/// derivative of a squared inverse norm `v' L(w)^{-1} v` in `w_sa` is
/// `-(phi_sa' L^{-1} v)^2`; the chain rule through the active min pair does
/// the rest.
pub fn linear_supergradient(
    lin: &LinearMdp,
    omega: &Allocation,
    variant: LinearVariant,
    stats: &GapStats,
) -> Result<Array1<f64>> {
    let factor = design_matrix(lin, omega)?.factor()?;
    let (s_n, a_n) = (lin.num_states, lin.num_actions);
    let n = s_n * a_n;
    let gamma = lin.gamma;
    let norms = inverse_norms(lin, omega, stats)?;

    // locate the active (argmin) pair, lexicographically first
    let mut active: Option<(f64, usize, usize)> = None;
    for s in 0..s_n {
        for a in 0..a_n {
            if a == stats.optimal_actions[s] {
                continue;
            }
            let value = variant_value(variant, &norms, stats, gamma, s, a);
            if active.is_none_or(|(b, _, _)| value < b) {
                active = Some((value, s, a));
            }
        }
    }
    let (_, act_s, act_a) =
        active.ok_or_else(|| LdxError::Validation("no suboptimal pair".into()))?;
    let gap = stats.gaps[[act_s, act_a]];

    // gradient of v' L^{-1} v over all coordinates
    let grad_quad = |v: &Array1<f64>| -> Result<Array1<f64>> {
        let solved = factor.solve(v)?;
        let mut g = Array1::zeros(n);
        for s in 0..s_n {
            for a in 0..a_n {
                let dot = lin.feature(s, a).dot(&solved);
                g[s * a_n + a] = -(dot * dot);
            }
        }
        Ok(g)
    };

    match variant {
        LinearVariant::Surrogate1 => {
            let diff = lin.feature(act_s, act_a).to_owned()
                - lin.feature(act_s, stats.optimal_actions[act_s]).to_owned();
            let q = norms.diff_sq[[act_s, act_a]];
            let gq = grad_quad(&diff)?;
            Ok(gq.mapv(|dq| -gap * gap / (q * q) * dq))
        }
        LinearVariant::Surrogate2 => {
            let phi = lin.feature(act_s, act_a).to_owned();
            let q = norms.feat_sq[[act_s, act_a]];
            let gq = grad_quad(&phi)?;
            Ok(gq.mapv(|dq| -stats.delta_min * stats.delta_min / (q * q) * dq))
        }
        LinearVariant::Theorem5 => {
            let diff = lin.feature(act_s, act_a).to_owned()
                - lin.feature(act_s, stats.optimal_actions[act_s]).to_owned();
            let q_diff = norms.diff_sq[[act_s, act_a]];
            // lexicographically-first pair attaining the max feature norm
            let mut max_pair = (0, 0);
            'outer: for s in 0..s_n {
                for a in 0..a_n {
                    if norms.feat_sq[[s, a]] >= norms.max_feat_sq - 1e-15 {
                        max_pair = (s, a);
                        break 'outer;
                    }
                }
            }
            let phi_max = lin.feature(max_pair.0, max_pair.1).to_owned();
            let q_max = norms.max_feat_sq;
            let kappa = 2.0 * gamma / (1.0 - gamma);
            let denom = q_diff.sqrt() + kappa * q_max.sqrt();
            let scale = (1.0 - gamma).powi(2) / 6.0 * gap * gap;
            let g_diff = grad_quad(&diff)?;
            let g_max = grad_quad(&phi_max)?;
            let mut g = Array1::zeros(n);
            for c in 0..n {
                let d_denom =
                    g_diff[c] / (2.0 * q_diff.sqrt()) + kappa * g_max[c] / (2.0 * q_max.sqrt());
                g[c] = -2.0 * scale / denom.powi(3) * d_denom;
            }
            Ok(g)
        }
    }
}

/// Maximize the chosen objective over the restricted flow polytope of the
/// induced model by projected supergradient ascent with Polyak averaging.
pub fn solve_linear_allocation(
    lin: &LinearMdp,
    variant: LinearVariant,
    epsilon: f64,
    iters: usize,
) -> Result<Allocation> {
    if iters == 0 {
        return Err(LdxError::Validation("iters must be at least 1".into()));
    }
    let induced = validate_linear(lin)?;
    let stats = gap_stats(&induced)?;
    let poly = flow_polytope(&induced, epsilon)?;
    let n = poly.num_pairs();
    let uniform = Array1::from_elem(n, 1.0 / n as f64);
    let mut x = project_flow_polytope(&uniform, &poly)?;
    let mut average = x.raw().clone();
    let eta = 1.0 / (iters as f64).sqrt();
    // normalize steps by the starting objective so the step rule sees a
    // unit-scale problem (same convention as the tabular solver)
    let scale = linear_objective_with_stats(lin, &x, variant, &stats)?
        .abs()
        .max(f64::MIN_POSITIVE);
    for k in 1..=iters {
        let g = linear_supergradient(lin, &x, variant, &stats)?.mapv(|v| v / scale);
        let g_norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        let step = if eta * g_norm > MAX_STEP_NORM {
            MAX_STEP_NORM / g_norm
        } else {
            eta
        };
        let mut target = x.raw().clone();
        target.scaled_add(step, &g); // ascent
        x = project_flow_polytope(&target, &poly)?;
        let kf = k as f64;
        for (avg, &v) in average.iter_mut().zip(x.raw().iter()) {
            *avg = (kf - 1.0) / kf * *avg + v / kf;
        }
    }
    Allocation::new(average, lin.num_states, lin.num_actions)
}

// ---------------------------------------------------------------------------
// Spec-file round trip
// ---------------------------------------------------------------------------

/// On-disk linear-MDP description.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinearMdpSpecFile {
    pub d: usize,
    pub phi: Vec<Vec<f64>>,
    pub mu: Vec<Vec<f64>>,
    pub theta: Vec<f64>,
    pub gamma: f64,
}

impl LinearMdpSpecFile {
    pub fn from_linear(lin: &LinearMdp) -> Self {
        LinearMdpSpecFile {
            d: lin.dim(),
            phi: lin.phi.outer_iter().map(|r| r.to_vec()).collect(),
            mu: lin.mu.outer_iter().map(|r| r.to_vec()).collect(),
            theta: lin.theta.to_vec(),
            gamma: lin.gamma,
        }
    }

    /// Shape is recovered from the matrices: `S` from `mu` columns, `A` from
    /// the feature row count.
    pub fn into_linear(self) -> Result<LinearMdp> {
        let num_states = self
            .mu
            .first()
            .map(|row| row.len())
            .ok_or_else(|| LdxError::Validation("mu must be non-empty".into()))?;
        let pairs = self.phi.len();
        if num_states == 0 || pairs == 0 || pairs % num_states != 0 {
            return Err(LdxError::Validation(format!(
                "cannot infer shape from {pairs} feature rows and {num_states} states"
            )));
        }
        let num_actions = pairs / num_states;
        let phi = to_array2(&self.phi, pairs, self.d, "phi")?;
        let mu = to_array2(&self.mu, self.d, num_states, "mu")?;
        let theta = Array1::from_vec(self.theta);
        LinearMdp::new(num_states, num_actions, phi, mu, theta, self.gamma)
    }
}

fn to_array2(rows: &[Vec<f64>], nrows: usize, ncols: usize, name: &str) -> Result<Array2<f64>> {
    if rows.len() != nrows || rows.iter().any(|r| r.len() != ncols) {
        return Err(LdxError::Validation(format!(
            "{name} must be {nrows}x{ncols}"
        )));
    }
    let mut out = Array2::zeros((nrows, ncols));
    for (i, row) in rows.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            out[[i, j]] = v;
        }
    }
    Ok(out)
}

pub fn write_linear_file(lin: &LinearMdp, path: &std::path::Path) -> Result<()> {
    let spec = LinearMdpSpecFile::from_linear(lin);
    let text = serde_json::to_string_pretty(&spec).map_err(|e| LdxError::Parse(e.to_string()))?;
    std::fs::write(path, text).map_err(|e| LdxError::io(path.display().to_string(), e))
}

pub fn read_linear_file(path: &std::path::Path) -> Result<LinearMdp> {
    let text =
        std::fs::read_to_string(path).map_err(|e| LdxError::io(path.display().to_string(), e))?;
    let spec: LinearMdpSpecFile =
        serde_json::from_str(&text).map_err(|e| LdxError::Parse(e.to_string()))?;
    spec.into_linear()
}
