//! Benchmark environments and interaction sampling.
//!
//! Three generators: a 16-state stochastic gridworld, a product-launch
//! simulator over coarse market contexts, and the decoupled hard instance
//! used by the large-deviations verification tests. All builders are pure
//! functions of their parameters and seed.

use ndarray::{Array2, Array3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LdxError, Result};
use crate::mdp::{read_mdp_file, RewardNoise, TabularMdp};

/// Declarative environment reference used by the CLI and the bench harness.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EnvSpec {
    Gridworld {
        seed: u64,
    },
    Launch {
        #[serde(default = "default_launch_states")]
        num_states: usize,
        seed: u64,
    },
    HardInstance {
        k: usize,
        l: usize,
        #[serde(default)]
        p: Option<f64>,
        alpha: f64,
        gamma: f64,
    },
    File {
        path: String,
    },
}

fn default_launch_states() -> usize {
    50
}

impl EnvSpec {
    pub fn build(&self) -> Result<TabularMdp> {
        match self {
            EnvSpec::Gridworld { seed } => Ok(build_gridworld(*seed)),
            EnvSpec::Launch { num_states, seed } => build_launch_env(*num_states, *seed),
            EnvSpec::HardInstance {
                k,
                l,
                p,
                alpha,
                gamma,
            } => build_hard_instance(*k, *l, *p, *alpha, *gamma),
            EnvSpec::File { path } => read_mdp_file(std::path::Path::new(path)),
        }
    }

    /// Short identifier used in result rows.
    pub fn id(&self) -> String {
        match self {
            EnvSpec::Gridworld { seed } => format!("gridworld[seed={seed}]"),
            EnvSpec::Launch { num_states, seed } => {
                format!("launch[s={num_states},seed={seed}]")
            }
            EnvSpec::HardInstance {
                k, l, alpha, gamma, ..
            } => format!("hard[k={k},l={l},alpha={alpha},gamma={gamma}]"),
            EnvSpec::File { path } => format!("file[{path}]"),
        }
    }
}

/// One sampled interaction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub state: usize,
    pub action: usize,
    pub reward: f64,
    pub next_state: usize,
}

/// Draw one transition and reward from the model.
///
/// Panics if called on an all-zero (unvisited-pair) row; only fully
/// stochastic models may be simulated.
pub fn sample_step(
    mdp: &TabularMdp,
    state: usize,
    action: usize,
    rng: &mut ChaCha12Rng,
) -> StepRecord {
    let row = mdp.transition_row(state, action);
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut next_state = usize::MAX;
    for (s2, &p) in row.iter().enumerate() {
        acc += p;
        if u < acc {
            next_state = s2;
            break;
        }
    }
    if next_state == usize::MAX {
        // row sums to 1 within 1e-12, so this is only roundoff; take the last
        // state with positive mass
        next_state = row
            .iter()
            .enumerate()
            .rev()
            .find(|(_, &p)| p > 0.0)
            .map(|(s2, _)| s2)
            .expect("sample_step called on an all-zero transition row");
    }
    let mean = mdp.reward_mean(state, action);
    let reward = match mdp.noise()[[state, action]] {
        RewardNoise::Gaussian { var } => {
            if var > 0.0 {
                mean + rng.sample::<f64, _>(rand_distr::StandardNormal) * var.sqrt()
            } else {
                mean
            }
        }
        RewardNoise::Bernoulli => {
            if rng.gen::<f64>() < mean {
                1.0
            } else {
                0.0
            }
        }
    };
    StepRecord {
        state,
        action,
        reward,
        next_state,
    }
}

// ---------------------------------------------------------------------------
// Gridworld
// ---------------------------------------------------------------------------

pub const GRID_SIDE: usize = 4;
pub const GRID_STATES: usize = GRID_SIDE * GRID_SIDE;
pub const GRID_ACTIONS: usize = 4; // up, down, left, right
pub const GRID_GOAL: usize = GRID_STATES - 1;
pub const GRID_START: usize = 0;

fn grid_pos(s: usize) -> (usize, usize) {
    (s / GRID_SIDE, s % GRID_SIDE)
}

fn grid_state(row: usize, col: usize) -> usize {
    row * GRID_SIDE + col
}

/// Cell reached from `s` by action `a`, staying in place at walls.
fn grid_target(s: usize, a: usize) -> usize {
    let (row, col) = grid_pos(s);
    let (nr, nc) = match a {
        0 => (row.saturating_sub(1), col),                    // up
        1 => ((row + 1).min(GRID_SIDE - 1), col),             // down
        2 => (row, col.saturating_sub(1)),                    // left
        _ => (row, (col + 1).min(GRID_SIDE - 1)),             // right
    };
    grid_state(nr, nc)
}

fn grid_distance_to_goal(s: usize) -> usize {
    let (row, col) = grid_pos(s);
    let (gr, gc) = grid_pos(GRID_GOAL);
    gr.abs_diff(row) + gc.abs_diff(col)
}

/// The goal-directed action each state prefers: move right until the last
/// column, then move down. At the goal the first action is preferred.
pub fn gridworld_preferred_actions() -> Vec<usize> {
    (0..GRID_STATES)
        .map(|s| {
            if s == GRID_GOAL {
                0
            } else {
                let (_, col) = grid_pos(s);
                if col < GRID_SIDE - 1 {
                    3 // right
                } else {
                    1 // down
                }
            }
        })
        .collect()
}

/// 16-state stochastic gridworld, gamma 0.99.
///
/// Each non-goal state has one preferred action with high success
/// probability; other actions mostly stay in place or drift away. Every row
/// carries a small uniform mixing mass so the chain is communicating. The
/// goal is nearly absorbing, pays mean reward 1.0 on its preferred action,
/// and occasionally returns to the start. The seed only drives the
/// reward-noise variances.
pub fn build_gridworld(seed: u64) -> TabularMdp {
    const MIX: f64 = 0.02;
    const GOAL_LOOP: f64 = 0.95;
    let preferred = gridworld_preferred_actions();
    let mut transitions = Array3::zeros((GRID_STATES, GRID_ACTIONS, GRID_STATES));
    let mut rewards = Array2::zeros((GRID_STATES, GRID_ACTIONS));
    let max_dist = grid_distance_to_goal(GRID_START);
    for s in 0..GRID_STATES {
        for a in 0..GRID_ACTIONS {
            let mut structured = [0.0; GRID_STATES];
            if s == GRID_GOAL {
                // nearly absorbing; non-preferred actions leak a bit more
                let stay = if a == preferred[s] {
                    GOAL_LOOP
                } else {
                    GOAL_LOOP - 0.05
                };
                structured[GRID_GOAL] += stay;
                structured[GRID_START] += 1.0 - stay;
            } else if a == preferred[s] {
                structured[grid_target(s, a)] += 0.80;
                structured[s] += 0.12;
                let spread = 0.08 / 3.0;
                for other in 0..GRID_ACTIONS {
                    if other != a {
                        structured[grid_target(s, other)] += spread;
                    }
                }
            } else {
                structured[s] += 0.55;
                structured[grid_target(s, a)] += 0.30;
                let spread = 0.15 / 3.0;
                for other in 0..GRID_ACTIONS {
                    if other != a {
                        structured[grid_target(s, other)] += spread;
                    }
                }
            }
            for s2 in 0..GRID_STATES {
                transitions[[s, a, s2]] =
                    (1.0 - MIX) * structured[s2] + MIX / GRID_STATES as f64;
            }
            normalize_row(&mut transitions, s, a);
            rewards[[s, a]] = if s == GRID_GOAL {
                if a == preferred[s] {
                    1.0
                } else {
                    0.95
                }
            } else {
                let progress = (max_dist - grid_distance_to_goal(s)) as f64;
                let bonus = if a == preferred[s] { 0.03 } else { 0.0 };
                (-0.04 + 0.012 * progress + bonus).clamp(-0.08, 0.20)
            };
        }
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut noise = Array2::from_elem((GRID_STATES, GRID_ACTIONS), RewardNoise::Bernoulli);
    for n in noise.iter_mut() {
        *n = RewardNoise::Gaussian {
            var: rng.gen_range(0.006..=0.02),
        };
    }
    TabularMdp::new(transitions, rewards, noise, 0.99).expect("gridworld construction is valid")
}

// ---------------------------------------------------------------------------
// Product-launch environment
// ---------------------------------------------------------------------------

pub const LAUNCH_ACTIONS: usize = 30; // 6 discount levels x 5 exposure levels

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Product-launch simulator: `num_states` market contexts on a latent axis,
/// 30 actions forming a discount x exposure grid, gamma 0.99.
///
/// A context-discount match score drives purchase likelihood; mean reward is
/// margin times purchase score minus exposure and inventory costs, clipped to
/// `[0.06, 0.40]`. Transitions drift the context according to exposure and
/// demand, with a 0.01 uniform mixing mass per row.
pub fn build_launch_env(num_states: usize, seed: u64) -> Result<TabularMdp> {
    if num_states < 2 {
        return Err(LdxError::Validation(format!(
            "launch environment needs at least 2 states, got {num_states}"
        )));
    }
    const MIX: f64 = 0.01;
    const DISC_LEVELS: usize = 6;
    const EXPO_LEVELS: usize = 5;
    let s_n = num_states;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let inventory: Vec<f64> = (0..s_n).map(|_| rng.gen::<f64>()).collect();
    let mut jitter = Array2::zeros((s_n, LAUNCH_ACTIONS));
    for j in jitter.iter_mut() {
        *j = rng.gen_range(-0.2..=0.2);
    }
    let mut transitions = Array3::zeros((s_n, LAUNCH_ACTIONS, s_n));
    let mut rewards = Array2::zeros((s_n, LAUNCH_ACTIONS));
    let context = |s: usize| s as f64 / (s_n - 1) as f64;
    for s in 0..s_n {
        let c = context(s);
        for a in 0..LAUNCH_ACTIONS {
            let disc = (a / EXPO_LEVELS) as f64 / (DISC_LEVELS - 1) as f64;
            let expo = (a % EXPO_LEVELS) as f64 / (EXPO_LEVELS - 1) as f64;
            let matching = 1.0 - (c - disc).abs();
            let score = sigmoid(4.0 * (matching - 0.5) + expo - 0.4 + jitter[[s, a]]);
            let margin = 0.55 - 0.25 * disc;
            let raw = margin * score + 0.1 * matching * expo
                - 0.10 * expo
                - 0.06 * inventory[s] * disc;
            rewards[[s, a]] = raw.clamp(0.06, 0.40);
            // context drift: exposure lifts engagement, discounts bleed
            // inventory pressure, demand follows the purchase score
            let target = (c + 0.15 * (expo - 0.4) - 0.10 * (disc - 0.5) * inventory[s]
                + 0.05 * (score - 0.5))
                .clamp(0.0, 1.0);
            let sigma = 0.12;
            let mut weights = vec![0.0; s_n];
            let mut total = 0.0;
            for (s2, w) in weights.iter_mut().enumerate() {
                let d = context(s2) - target;
                *w = (-d * d / (2.0 * sigma * sigma)).exp();
                total += *w;
            }
            for s2 in 0..s_n {
                transitions[[s, a, s2]] = (1.0 - MIX) * weights[s2] / total + MIX / s_n as f64;
            }
            normalize_row(&mut transitions, s, a);
        }
    }
    let mut noise = Array2::from_elem((s_n, LAUNCH_ACTIONS), RewardNoise::Bernoulli);
    for n in noise.iter_mut() {
        *n = RewardNoise::Gaussian {
            var: rng.gen_range(0.005..=0.02),
        };
    }
    TabularMdp::new(transitions, rewards, noise, 0.99)
}

// ---------------------------------------------------------------------------
// Hard instance
// ---------------------------------------------------------------------------

/// Layout of the decoupled hard instance: `K` branch roots, each with `L`
/// arms; every arm has its own loop state and absorbing sink.
#[derive(Debug, Clone, Copy)]
pub struct HardInstanceLayout {
    pub k: usize,
    pub l: usize,
}

impl HardInstanceLayout {
    pub fn num_states(&self) -> usize {
        self.k + 2 * self.k * self.l
    }
    pub fn root(&self, i: usize) -> usize {
        i
    }
    /// Loop state reached from root `i` by arm `j`.
    pub fn loop_state(&self, i: usize, j: usize) -> usize {
        self.k + i * self.l + j
    }
    /// Absorbing sink below loop state `(i, j)`.
    pub fn sink_state(&self, i: usize, j: usize) -> usize {
        self.k + self.k * self.l + i * self.l + j
    }
}

/// Decoupled hard instance for worst-case analysis.
///
/// Roots pay 0 and move deterministically to the chosen arm's loop state;
/// loop states pay 1 and self-loop with probability `p` (`p + alpha` on arm
/// 0) before falling into an absorbing zero-reward sink. With `p` unset it
/// defaults to `(4*gamma - 1) / (3*gamma)`. The sink states make the chain
/// non-communicating, so this instance is for generative sampling only.
pub fn build_hard_instance(
    k: usize,
    l: usize,
    p: Option<f64>,
    alpha: f64,
    gamma: f64,
) -> Result<TabularMdp> {
    if k < 1 || l < 1 {
        return Err(LdxError::Validation(format!(
            "hard instance needs k, l >= 1, got k={k}, l={l}"
        )));
    }
    let p = match p {
        Some(p) => p,
        None => {
            if !(0.25 < gamma && gamma < 1.0) {
                return Err(LdxError::Validation(format!(
                    "default p requires gamma in (1/4, 1), got {gamma}"
                )));
            }
            (4.0 * gamma - 1.0) / (3.0 * gamma)
        }
    };
    if !(0.0 < p && alpha > 0.0 && p + alpha < 1.0) {
        return Err(LdxError::Validation(format!(
            "hard instance needs 0 < p < p + alpha < 1, got p={p}, alpha={alpha}"
        )));
    }
    let layout = HardInstanceLayout { k, l };
    let s_n = layout.num_states();
    let mut transitions = Array3::zeros((s_n, l, s_n));
    let mut rewards = Array2::zeros((s_n, l));
    for i in 0..k {
        let root = layout.root(i);
        for j in 0..l {
            transitions[[root, j, layout.loop_state(i, j)]] = 1.0;
            rewards[[root, j]] = 0.0;
        }
        for j in 0..l {
            let loop_s = layout.loop_state(i, j);
            let sink = layout.sink_state(i, j);
            let stay = if j == 0 { p + alpha } else { p };
            // the loop and sink states admit a single real action; every
            // action index behaves identically there
            for a in 0..l {
                transitions[[loop_s, a, loop_s]] = stay;
                transitions[[loop_s, a, sink]] = 1.0 - stay;
                rewards[[loop_s, a]] = 1.0;
                transitions[[sink, a, sink]] = 1.0;
                rewards[[sink, a]] = 0.0;
            }
        }
    }
    let noise = Array2::from_elem((s_n, l), RewardNoise::Gaussian { var: 0.0 });
    TabularMdp::new(transitions, rewards, noise, gamma)
}

fn normalize_row(transitions: &mut Array3<f64>, s: usize, a: usize) {
    let s_n = transitions.dim().2;
    let sum: f64 = (0..s_n).map(|s2| transitions[[s, a, s2]]).sum();
    for s2 in 0..s_n {
        transitions[[s, a, s2]] /= sum;
    }
    // push residual roundoff into the largest entry
    let sum: f64 = (0..s_n).map(|s2| transitions[[s, a, s2]]).sum();
    let mut largest = 0;
    for s2 in 0..s_n {
        if transitions[[s, a, s2]] > transitions[[s, a, largest]] {
            largest = s2;
        }
    }
    transitions[[s, a, largest]] += 1.0 - sum;
}
