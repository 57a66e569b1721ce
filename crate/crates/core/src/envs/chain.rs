use rand::seq::index::sample;
use rand::Rng;

use crate::common::RandomSource;
use crate::error::{Error, Result};

const ROW_TOLERANCE: f64 = 1e-12;

/// Finite MDP with transition tensor `P[u][s][s']` and an unsafe-state set.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteChainMDP {
    transitions: Vec<Vec<Vec<f64>>>,
    unsafe_states: Vec<bool>,
}

fn check_row(row: &[f64], n: usize) -> Result<()> {
    if row.len() != n {
        return Err(Error::invalid(format!("row has {} entries, expected {n}", row.len())));
    }
    if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(Error::invalid(
            "transition probabilities must be finite and non-negative",
        ));
    }
    let total: f64 = row.iter().sum();
    if (total - 1.0).abs() > ROW_TOLERANCE {
        return Err(Error::invalid(format!("transition row sums to {total}")));
    }
    Ok(())
}

impl DiscreteChainMDP {
    pub fn new(transitions: Vec<Vec<Vec<f64>>>, unsafe_states: Vec<bool>) -> Result<Self> {
        let n = unsafe_states.len();
        if n == 0 || transitions.is_empty() {
            return Err(Error::invalid("chain needs at least one state and one action"));
        }
        for per_action in &transitions {
            if per_action.len() != n {
                return Err(Error::invalid("transition tensor has wrong state count"));
            }
            for row in per_action {
                check_row(row, n)?;
            }
        }
        Ok(Self {
            transitions,
            unsafe_states,
        })
    }

    /// Random sparse chain: each row spreads mass over `support` states.
    pub fn random(
        n_states: usize,
        n_actions: usize,
        support: usize,
        unsafe_states: Vec<bool>,
        rng: &mut RandomSource,
    ) -> Result<Self> {
        let support = support.clamp(1, n_states);
        let mut transitions = vec![vec![vec![0.0; n_states]; n_states]; n_actions];
        for per_action in transitions.iter_mut() {
            for row in per_action.iter_mut() {
                *row = random_row(n_states, support, rng);
            }
        }
        Self::new(transitions, unsafe_states)
    }

    pub fn n_states(&self) -> usize {
        self.unsafe_states.len()
    }

    pub fn n_actions(&self) -> usize {
        self.transitions.len()
    }

    pub fn row(&self, u: usize, s: usize) -> &[f64] {
        &self.transitions[u][s]
    }

    pub fn set_row(&mut self, u: usize, s: usize, row: Vec<f64>) -> Result<()> {
        check_row(&row, self.n_states())?;
        self.transitions[u][s] = row;
        Ok(())
    }

    pub fn is_safe(&self, s: usize) -> bool {
        !self.unsafe_states[s]
    }

    pub fn unsafe_states(&self) -> &[bool] {
        &self.unsafe_states
    }

    pub fn initial_state(&self) -> usize {
        0
    }

    pub fn step(&self, s: usize, u: usize, rng: &mut RandomSource) -> usize {
        sample_categorical(&self.transitions[u][s], rng)
    }

    /// Markov matrix `P[s][s']` under a deterministic stationary policy.
    pub fn policy_matrix(&self, policy: &[usize]) -> Vec<Vec<f64>> {
        (0..self.n_states())
            .map(|s| self.transitions[policy[s]][s].clone())
            .collect()
    }
}

pub(crate) fn random_row(n: usize, support: usize, rng: &mut RandomSource) -> Vec<f64> {
    let mut row = vec![0.0; n];
    let idx = sample(rng, n, support);
    let weights: Vec<f64> = (0..support).map(|_| -rng.gen::<f64>().max(1e-12).ln()).collect();
    let total: f64 = weights.iter().sum();
    for (i, w) in idx.iter().zip(&weights) {
        row[i] = w / total;
    }
    // push the rounding residue onto the largest entry
    let s: f64 = row.iter().sum();
    let imax = (0..n).max_by(|a, b| row[*a].total_cmp(&row[*b])).unwrap();
    row[imax] += 1.0 - s;
    row
}

pub(crate) fn sample_categorical(p: &[f64], rng: &mut RandomSource) -> usize {
    let r: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, pi) in p.iter().enumerate() {
        acc += pi;
        if r < acc {
            return i;
        }
    }
    // numerical tail: return the last state with positive mass
    p.iter().rposition(|v| *v > 0.0).unwrap_or(p.len() - 1)
}

/// Chain whose transitions are only known up to a box of perturbations:
/// `P(u, s, eta) = nominal + sum_k eta_k d_k` with `eta in [-1, 1]^m` and
/// zero-sum directions `d_k`.
#[derive(Debug, Clone)]
pub struct IntervalChainMdp {
    nominal: DiscreteChainMDP,
    directions: Vec<Vec<Vec<Vec<f64>>>>,
}

impl IntervalChainMdp {
    pub fn new(nominal: DiscreteChainMDP, directions: Vec<Vec<Vec<Vec<f64>>>>) -> Result<Self> {
        let n = nominal.n_states();
        if directions.len() != nominal.n_actions() {
            return Err(Error::invalid("direction tensor has wrong action count"));
        }
        for (u, per_action) in directions.iter().enumerate() {
            if per_action.len() != n {
                return Err(Error::invalid("direction tensor has wrong state count"));
            }
            for (s, dirs) in per_action.iter().enumerate() {
                let mut spread = vec![0.0; n];
                for d in dirs {
                    if d.len() != n {
                        return Err(Error::invalid("direction has wrong length"));
                    }
                    let total: f64 = d.iter().sum();
                    if total.abs() > ROW_TOLERANCE {
                        return Err(Error::invalid("perturbation directions must sum to zero"));
                    }
                    for (a, v) in spread.iter_mut().zip(d) {
                        *a += v.abs();
                    }
                }
                let row = nominal.row(u, s);
                if row.iter().zip(&spread).any(|(p, w)| *w > *p + 1e-15) {
                    return Err(Error::invalid(format!(
                        "perturbations at (u={u}, s={s}) can make probabilities negative"
                    )));
                }
            }
        }
        Ok(Self { nominal, directions })
    }

    /// Random interval chain with `n_dirs` pairwise mass-shift directions per row.
    pub fn random(
        n_states: usize,
        n_actions: usize,
        support: usize,
        n_dirs: usize,
        unsafe_states: Vec<bool>,
        rng: &mut RandomSource,
    ) -> Result<Self> {
        let nominal = DiscreteChainMDP::random(n_states, n_actions, support, unsafe_states, rng)?;
        let mut directions = Vec::with_capacity(n_actions);
        for u in 0..n_actions {
            let mut per_action = Vec::with_capacity(n_states);
            for s in 0..n_states {
                let row = nominal.row(u, s);
                let mut budget = row.to_vec();
                let mut dirs = Vec::with_capacity(n_dirs);
                for _ in 0..n_dirs {
                    let a = rng.gen_range(0..n_states);
                    let b = rng.gen_range(0..n_states);
                    let mut d = vec![0.0; n_states];
                    if a != b {
                        let cap = budget[a].min(budget[b]);
                        let r = cap * rng.gen_range(0.1..0.5);
                        d[a] = r;
                        d[b] = -r;
                        budget[a] -= r;
                        budget[b] -= r;
                    }
                    dirs.push(d);
                }
                per_action.push(dirs);
            }
            directions.push(per_action);
        }
        Self::new(nominal, directions)
    }

    pub fn nominal(&self) -> &DiscreteChainMDP {
        &self.nominal
    }

    pub fn n_states(&self) -> usize {
        self.nominal.n_states()
    }

    pub fn n_actions(&self) -> usize {
        self.nominal.n_actions()
    }

    /// Number of hallucination coordinates at `(u, s)`.
    pub fn n_directions(&self, u: usize, s: usize) -> usize {
        self.directions[u][s].len()
    }

    pub fn directions(&self, u: usize, s: usize) -> &[Vec<f64>] {
        &self.directions[u][s]
    }

    pub fn distribution(&self, u: usize, s: usize, eta: &[f64]) -> Result<Vec<f64>> {
        let dirs = &self.directions[u][s];
        if eta.len() != dirs.len() || eta.iter().any(|e| e.abs() > 1.0) {
            return Err(Error::invalid("hallucination vector outside the unit box"));
        }
        let mut p = self.nominal.row(u, s).to_vec();
        for (e, d) in eta.iter().zip(dirs) {
            for (pi, di) in p.iter_mut().zip(d) {
                *pi += e * di;
            }
        }
        for pi in p.iter_mut() {
            *pi = pi.max(0.0);
        }
        Ok(p)
    }
}
