//! Online visit counts and empirical model estimates.

use ndarray::{Array2, Array3};

use crate::env::StepRecord;
use crate::error::Result;
use crate::mdp::{gap_stats_with_ties, GapStats, RewardNoise, TabularMdp, TiePolicy};

/// Variance floor applied by [`EmpiricalModel::solver_mdp`] so the surrogate
/// denominators stay positive.
pub const REWARD_VAR_FLOOR: f64 = 1e-6;
/// Gap floor applied to tied or near-tied empirical optima; keeps `L_sa`
/// finite while still marking the pair as maximally urgent to sample.
pub const GAP_FLOOR: f64 = 1e-6;

/// Sufficient statistics of the sampled trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalModel {
    pair_counts: Array2<u64>,
    transition_counts: Array3<u64>,
    reward_sum: Array2<f64>,
    reward_sq_sum: Array2<f64>,
    total_steps: u64,
}

/// Raw empirical estimate plus the pairs it actually observed.
#[derive(Debug, Clone)]
pub struct EmpiricalMdp {
    pub mdp: TabularMdp,
    pub visited: Array2<bool>,
}

impl EmpiricalModel {
    pub fn new(num_states: usize, num_actions: usize) -> Self {
        EmpiricalModel {
            pair_counts: Array2::zeros((num_states, num_actions)),
            transition_counts: Array3::zeros((num_states, num_actions, num_states)),
            reward_sum: Array2::zeros((num_states, num_actions)),
            reward_sq_sum: Array2::zeros((num_states, num_actions)),
            total_steps: 0,
        }
    }

    pub fn num_states(&self) -> usize {
        self.pair_counts.nrows()
    }

    pub fn num_actions(&self) -> usize {
        self.pair_counts.ncols()
    }

    pub fn total_steps(&self) -> u64 {
        self.total_steps
    }

    pub fn pair_counts(&self) -> &Array2<u64> {
        &self.pair_counts
    }

    pub fn count(&self, s: usize, a: usize) -> u64 {
        self.pair_counts[[s, a]]
    }

    /// Visits to state `s` summed over actions.
    pub fn state_count(&self, s: usize) -> u64 {
        (0..self.num_actions()).map(|a| self.pair_counts[[s, a]]).sum()
    }

    /// Record one interaction.
    pub fn record_transition(&mut self, rec: &StepRecord) {
        self.pair_counts[[rec.state, rec.action]] += 1;
        self.transition_counts[[rec.state, rec.action, rec.next_state]] += 1;
        self.reward_sum[[rec.state, rec.action]] += rec.reward;
        self.reward_sq_sum[[rec.state, rec.action]] += rec.reward * rec.reward;
        self.total_steps += 1;
    }

    /// Empirical transition probability row for a visited pair.
    fn empirical_row(&self, s: usize, a: usize) -> Vec<f64> {
        let n = self.pair_counts[[s, a]];
        (0..self.num_states())
            .map(|s2| self.transition_counts[[s, a, s2]] as f64 / n as f64)
            .collect()
    }

    /// Transition row of the regularized (solver) model: empirical
    /// frequencies when visited, uniform otherwise.
    pub fn regularized_row(&self, s: usize, a: usize) -> Vec<f64> {
        if self.pair_counts[[s, a]] == 0 {
            vec![1.0 / self.num_states() as f64; self.num_states()]
        } else {
            self.empirical_row(s, a)
        }
    }

    /// Unbiased sample variance of rewards at a pair; zero below two visits.
    pub fn reward_sample_variance(&self, s: usize, a: usize) -> f64 {
        let n = self.pair_counts[[s, a]];
        if n < 2 {
            return 0.0;
        }
        let n_f = n as f64;
        let mean = self.reward_sum[[s, a]] / n_f;
        let ss = self.reward_sq_sum[[s, a]] - n_f * mean * mean;
        (ss / (n_f - 1.0)).max(0.0)
    }

    /// The plug-in empirical MDP: visited pairs carry count frequencies and
    /// mean rewards; unvisited pairs carry an all-zero transition row and
    /// reward zero. The mask marks which pairs were observed.
    pub fn empirical_mdp(&self, gamma: f64) -> Result<EmpiricalMdp> {
        let (s_n, a_n) = (self.num_states(), self.num_actions());
        let mut transitions = Array3::zeros((s_n, a_n, s_n));
        let mut rewards = Array2::zeros((s_n, a_n));
        let mut noise = Array2::from_elem((s_n, a_n), RewardNoise::Gaussian { var: 0.0 });
        let mut visited = Array2::from_elem((s_n, a_n), false);
        for s in 0..s_n {
            for a in 0..a_n {
                let n = self.pair_counts[[s, a]];
                if n == 0 {
                    continue;
                }
                visited[[s, a]] = true;
                for (s2, p) in self.empirical_row(s, a).into_iter().enumerate() {
                    transitions[[s, a, s2]] = p;
                }
                rewards[[s, a]] = self.reward_sum[[s, a]] / n as f64;
                noise[[s, a]] = RewardNoise::Gaussian {
                    var: self.reward_sample_variance(s, a),
                };
            }
        }
        let mdp = TabularMdp::new_allowing_unvisited(transitions, rewards, noise, gamma)?;
        Ok(EmpiricalMdp { mdp, visited })
    }

    /// Regularized model for the allocation solver: unvisited pairs fall back
    /// to a uniform row with reward 0.5, reward variances are floored, and
    /// gap statistics are computed from the regularized model's own greedy
    /// optimum with lowest-index tie-breaking. The flag reports whether any
    /// tie (or floored gap) was encountered.
    pub fn solver_mdp(&self, gamma: f64) -> Result<(TabularMdp, GapStats, bool)> {
        let (s_n, a_n) = (self.num_states(), self.num_actions());
        let mut transitions = Array3::zeros((s_n, a_n, s_n));
        let mut rewards = Array2::zeros((s_n, a_n));
        let mut noise = Array2::from_elem((s_n, a_n), RewardNoise::Gaussian { var: 0.0 });
        for s in 0..s_n {
            for a in 0..a_n {
                let n = self.pair_counts[[s, a]];
                if n == 0 {
                    for s2 in 0..s_n {
                        transitions[[s, a, s2]] = 1.0 / s_n as f64;
                    }
                    rewards[[s, a]] = 0.5;
                } else {
                    for (s2, p) in self.empirical_row(s, a).into_iter().enumerate() {
                        transitions[[s, a, s2]] = p;
                    }
                    rewards[[s, a]] = self.reward_sum[[s, a]] / n as f64;
                }
                noise[[s, a]] = RewardNoise::Gaussian {
                    var: self.reward_sample_variance(s, a).max(REWARD_VAR_FLOOR),
                };
            }
        }
        let mdp = TabularMdp::new(transitions, rewards, noise, gamma)?;
        let (mut stats, mut flagged) = gap_stats_with_ties(&mdp, TiePolicy::LowestIndex)?;
        // floor tiny gaps so L_sa stays finite
        for s in 0..s_n {
            for a in 0..a_n {
                if a != stats.optimal_actions[s] && stats.gaps[[s, a]] < GAP_FLOOR {
                    stats.gaps[[s, a]] = GAP_FLOOR;
                    flagged = true;
                }
            }
        }
        stats.delta_min = stats.delta_min.max(GAP_FLOOR);
        Ok((mdp, stats, flagged))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::sample_step;
    
    use approx::assert_abs_diff_eq;
    
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn rec(state: usize, action: usize, reward: f64, next_state: usize) -> StepRecord {
        StepRecord {
            state,
            action,
            reward,
            next_state,
        }
    }

    #[test]
    fn single_record() {
        let mut model = EmpiricalModel::new(2, 2);
        model.record_transition(&rec(0, 1, 0.3, 1));
        assert_eq!(model.total_steps(), 1);
        assert_eq!(model.count(0, 1), 1);
        assert_eq!(model.count(0, 0), 0);
    }

    #[test]
    fn counting_and_frequencies() {
        let mut model = EmpiricalModel::new(2, 1);
        model.record_transition(&rec(0, 0, 0.2, 0));
        model.record_transition(&rec(0, 0, 0.4, 0));
        model.record_transition(&rec(0, 0, 0.0, 1));
        let emp = model.empirical_mdp(0.9).unwrap();
        assert_abs_diff_eq!(emp.mdp.transitions()[[0, 0, 0]], 2.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(emp.mdp.transitions()[[0, 0, 1]], 1.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(emp.mdp.reward_mean(0, 0), 0.2, epsilon = 1e-15);
        assert!(emp.visited[[0, 0]]);
        // unvisited pair: zero row, reward 0
        assert!(!emp.visited[[1, 0]]);
        assert_eq!(emp.mdp.transition_row(1, 0).sum(), 0.0);
        assert_eq!(emp.mdp.reward_mean(1, 0), 0.0);
    }

    #[test]
    fn reward_mean_of_two_samples() {
        let mut model = EmpiricalModel::new(1, 1);
        model.record_transition(&rec(0, 0, 0.2, 0));
        model.record_transition(&rec(0, 0, 0.4, 0));
        let emp = model.empirical_mdp(0.5).unwrap();
        assert_abs_diff_eq!(emp.mdp.reward_mean(0, 0), 0.3, epsilon = 1e-15);
    }

    #[test]
    fn invariants_hold_after_random_records() {
        let mut model = EmpiricalModel::new(3, 2);
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let mut oracle_counts = [0u64; 3 * 2];
        let mut oracle_trans = [0u64; 3 * 2 * 3];
        for _ in 0..10_000 {
            let s = rng.gen_range(0..3);
            let a = rng.gen_range(0..2);
            let s2 = rng.gen_range(0..3);
            let r = rng.gen::<f64>();
            model.record_transition(&rec(s, a, r, s2));
            oracle_counts[s * 2 + a] += 1;
            oracle_trans[(s * 2 + a) * 3 + s2] += 1;
        }
        assert_eq!(model.total_steps(), 10_000);
        let mut total = 0u64;
        for s in 0..3 {
            for a in 0..2 {
                let n = model.count(s, a);
                assert_eq!(n, oracle_counts[s * 2 + a]);
                let row_sum: u64 = (0..3)
                    .map(|s2| model.transition_counts[[s, a, s2]])
                    .sum();
                assert_eq!(row_sum, n, "transition counts must sum to pair count");
                for s2 in 0..3 {
                    assert_eq!(
                        model.transition_counts[[s, a, s2]],
                        oracle_trans[(s * 2 + a) * 3 + s2]
                    );
                }
                total += n;
            }
        }
        assert_eq!(total, model.total_steps());
    }

    #[test]
    fn solver_mdp_uniform_fallback() {
        let model = EmpiricalModel::new(2, 1);
        let (mdp, stats, _) = model.solver_mdp(0.9).unwrap();
        for s in 0..2 {
            assert_abs_diff_eq!(mdp.transitions()[[s, 0, 0]], 0.5, epsilon = 1e-15);
            assert_abs_diff_eq!(mdp.transitions()[[s, 0, 1]], 0.5, epsilon = 1e-15);
            assert_abs_diff_eq!(mdp.reward_mean(s, 0), 0.5, epsilon = 1e-15);
            assert!(stats.reward_var[[s, 0]] >= REWARD_VAR_FLOOR);
        }
    }

    #[test]
    fn solver_mdp_matches_empirical_when_fully_visited() {
        let mut model = EmpiricalModel::new(2, 2);
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        for s in 0..2 {
            for a in 0..2 {
                for _ in 0..5 {
                    let s2 = rng.gen_range(0..2);
                    model.record_transition(&rec(s, a, rng.gen(), s2));
                }
            }
        }
        let emp = model.empirical_mdp(0.9).unwrap();
        let (solver, _, _) = model.solver_mdp(0.9).unwrap();
        assert_eq!(emp.mdp.transitions(), solver.transitions());
    }

    #[test]
    fn empirical_model_concentrates() {
        let truth = crate::mdp::tests::random_mdp(3, 2, 77);
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let mut model = EmpiricalModel::new(3, 2);
        let per_pair = 100_000 / 6;
        for s in 0..3 {
            for a in 0..2 {
                for _ in 0..per_pair {
                    let step = sample_step(&truth, s, a, &mut rng);
                    model.record_transition(&step);
                }
            }
        }
        let emp = model.empirical_mdp(truth.gamma()).unwrap();
        let mut sup = 0.0f64;
        for (p_hat, p) in emp
            .mdp
            .transitions()
            .iter()
            .zip(truth.transitions().iter())
        {
            sup = sup.max((p_hat - p).abs());
        }
        for s in 0..3 {
            for a in 0..2 {
                sup = sup.max((emp.mdp.reward_mean(s, a) - truth.reward_mean(s, a)).abs());
            }
        }
        assert!(sup <= 0.02, "sup-norm model error {sup} exceeds 0.02");
        // the regularized model is accepted by strict gap machinery
        let (_, stats, _) = model.solver_mdp(truth.gamma()).unwrap();
        assert!(stats.gaps.iter().all(|g| g.is_finite()));
    }

    #[test]
    fn solver_mdp_always_valid_for_gap_stats() {
        // sparse, partially-visited model
        let mut model = EmpiricalModel::new(4, 3);
        model.record_transition(&rec(0, 0, 1.0, 1));
        model.record_transition(&rec(1, 2, -0.5, 3));
        let (mdp, stats, flagged) = model.solver_mdp(0.95).unwrap();
        assert!(flagged); // unvisited duplicates tie
        for s in 0..4 {
            for a in 0..3 {
                if a != stats.optimal_actions[s] {
                    assert!(stats.gaps[[s, a]] >= GAP_FLOOR);
                }
                assert!(stats.reward_var[[s, a]] >= REWARD_VAR_FLOOR);
            }
            let sum: f64 = mdp.transition_row(s, 0).sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }
}
