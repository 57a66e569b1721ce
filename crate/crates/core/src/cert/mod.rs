//! K-step escape certificates from a verified drift condition: one-step
//! level transition bounds, the threshold ladder, and the escape
//! probability of the dominating level chain.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::common::{Policy, RandomSource};
use crate::error::{Error, Result};
use crate::value::{CertInput, GridValueFunction};

/// Two-sided 95% normal quantile.
pub const Z95: f64 = 1.959964;

pub const DEFAULT_VARTHETAS: [f64; 5] = [0.5, 0.2, 0.1, 0.05, 0.02];

/// Bounds on `P(V(x') < theta2)` for a random value with support in
/// `[v_min, v_max]`.
///
/// `lower` holds whenever `E[V(x')] <= theta1` (Markov). `upper` holds
/// whenever `E[V(x')] >= theta1` (reverse Markov); since `theta1 < theta2`
/// it clamps to 1.
pub fn level_transition_bounds(v_min: f64, v_max: f64, theta1: f64, theta2: f64) -> Result<(f64, f64)> {
    if !(v_min <= theta1 && theta1 < theta2 && theta2 < v_max) {
        return Err(Error::invalid(format!(
            "level bounds need v_min <= theta1 < theta2 < v_max, got {v_min}, {theta1}, {theta2}, {v_max}"
        )));
    }
    let lower = ((theta2 - theta1) / (theta2 - v_min)).clamp(0.0, 1.0);
    let upper = ((v_max - theta1) / (v_max - theta2)).clamp(0.0, 1.0);
    Ok((lower, upper))
}

/// `(theta2 - theta1) / (v_max - theta2)`, clamped. Not a valid upper bound
/// under the mean condition; kept for comparison only.
pub fn naive_upper_bound(v_max: f64, theta1: f64, theta2: f64) -> f64 {
    ((theta2 - theta1) / (v_max - theta2)).clamp(0.0, 1.0)
}

/// Which shift the linear margin is applied to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MarginShift {
    /// `lambda (theta - v_min)`, matching the drift condition.
    Minus,
    /// `lambda (theta + v_min)`.
    Plus,
}

impl MarginShift {
    fn apply(self, lambda: f64, theta: f64, v_min: f64) -> f64 {
        match self {
            MarginShift::Minus => lambda * (theta - v_min),
            MarginShift::Plus => lambda * (theta + v_min),
        }
    }
}

/// How the level transition matrix is filled.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TransitionBoundRule {
    /// Markov tail bounds to every level from every level, with the entry
    /// distribution implied by `E[V(x_1)] <= xi`.
    #[default]
    Rederived,
    /// Nearest-level formula with the `+ v_min` shift, entry on the
    /// innermost level.
    NearestPlus,
    /// As `NearestPlus` with the `- v_min` shift.
    NearestMinus,
}

impl TransitionBoundRule {
    pub fn shift(self) -> MarginShift {
        match self {
            TransitionBoundRule::NearestPlus => MarginShift::Plus,
            _ => MarginShift::Minus,
        }
    }
}

/// Thresholds `theta^1 > ... > theta^{M+1}` between `xi` and `xi_bar`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelLadder {
    pub thresholds: Vec<f64>,
    pub vartheta: f64,
    pub lambda: f64,
    pub xi: f64,
    pub xi_bar: f64,
    pub v_min: f64,
    pub shift: MarginShift,
}

impl LevelLadder {
    /// `M`, the number of recursion steps above the innermost threshold.
    pub fn m(&self) -> usize {
        self.thresholds.len() - 1
    }
}

pub const DEFAULT_MAX_LEVELS: usize = 2000;

/// Innermost threshold by bisection of
/// `theta - (1 - vartheta) alpha(theta) = xi`, then the recursion
/// `theta^{i-1} = theta^i + vartheta alpha(theta^i)` while `theta^1 <= xi_bar`.
pub fn build_level_ladder(
    lambda: f64,
    xi: f64,
    xi_bar: f64,
    v_min: f64,
    vartheta: f64,
    shift: MarginShift,
    max_levels: usize,
) -> Result<LevelLadder> {
    if !(lambda > 0.0 && lambda <= 1.0) {
        return Err(Error::invalid(format!("drift rate {lambda} outside (0, 1]")));
    }
    if !(vartheta > 0.0 && vartheta < 1.0) {
        return Err(Error::invalid(format!("vartheta {vartheta} outside (0, 1)")));
    }
    if !(xi < xi_bar) {
        return Err(Error::invalid("xi must be strictly below xi_bar"));
    }
    let g = |t: f64| t - (1.0 - vartheta) * shift.apply(lambda, t, v_min) - xi;
    // g is increasing with slope 1 - (1 - vartheta) lambda > 0
    let slope = 1.0 - (1.0 - vartheta) * lambda;
    let (mut lo, mut hi) = (xi - 1.0 - xi.abs(), xi + 1.0 + xi.abs());
    while g(lo) > 0.0 {
        lo -= 2.0 * (hi - lo);
    }
    while g(hi) < 0.0 {
        hi += 2.0 * (hi - lo) / slope;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if g(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-12 * (1.0 + mid.abs()) {
            break;
        }
    }
    let inner = 0.5 * (lo + hi);
    let mut up = vec![inner];
    loop {
        let t = *up.last().unwrap();
        let inc = vartheta * shift.apply(lambda, t, v_min);
        if !(inc > 0.0) {
            return Err(Error::invalid(
                "ladder increment is not positive; the margin vanishes at this level",
            ));
        }
        let next = t + inc;
        if next > xi_bar {
            break;
        }
        if up.len() > max_levels {
            return Err(Error::invalid(format!(
                "ladder needs more than {max_levels} levels; use a larger vartheta"
            )));
        }
        up.push(next);
    }
    if up.len() < 2 {
        return Err(Error::invalid(
            "no level fits between xi and xi_bar (M = 0); decrease vartheta or xi",
        ));
    }
    up.reverse();
    Ok(LevelLadder {
        thresholds: up,
        vartheta,
        lambda,
        xi,
        xi_bar,
        v_min,
        shift,
    })
}

/// Column-stochastic bound chain over in-levels plus an absorbing escape
/// state. Column `j` is the distribution out of in-level `j`; level 0 is
/// the outermost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionBoundMatrix {
    /// `p[i][j]`: bound on moving from in-level `j` to in-level `i`.
    pub p: Vec<Vec<f64>>,
    /// Mass sent to the escape state from each in-level.
    pub escape: Vec<f64>,
    /// Largest change made to a raw entry by clamping.
    pub max_clamp: f64,
}

impl TransitionBoundMatrix {
    /// From explicit columns; any missing mass goes to escape.
    pub fn from_columns(p: Vec<Vec<f64>>) -> Result<Self> {
        let n = p.len();
        if n == 0 || p.iter().any(|r| r.len() != n) {
            return Err(Error::invalid("transition bound matrix must be square and non-empty"));
        }
        let mut escape = vec![0.0; n];
        for j in 0..n {
            let s: f64 = (0..n).map(|i| p[i][j]).sum();
            if (0..n).any(|i| !(0.0..=1.0).contains(&p[i][j])) || s > 1.0 + 1e-12 {
                return Err(Error::invalid("columns must hold probabilities summing to at most 1"));
            }
            escape[j] = (1.0 - s).max(0.0);
        }
        Ok(Self {
            p,
            escape,
            max_clamp: 0.0,
        })
    }

    pub fn levels(&self) -> usize {
        self.p.len()
    }

    /// `(n+1) x (n+1)` left-stochastic matrix, escape first.
    pub fn augmented(&self) -> Vec<Vec<f64>> {
        let n = self.levels();
        let mut a = vec![vec![0.0; n + 1]; n + 1];
        a[0][0] = 1.0;
        for j in 0..n {
            a[0][j + 1] = self.escape[j];
            for i in 0..n {
                a[i + 1][j + 1] = self.p[i][j];
            }
        }
        a
    }

    /// One transition of a distribution `[escape, level 0, ...]`.
    pub fn step(&self, dist: &[f64]) -> Vec<f64> {
        let n = self.levels();
        let mut out = vec![0.0; n + 1];
        out[0] = dist[0];
        for j in 0..n {
            let m = dist[j + 1];
            if m == 0.0 {
                continue;
            }
            out[0] += m * self.escape[j];
            for i in 0..n {
                out[i + 1] += m * self.p[i][j];
            }
        }
        out
    }

    /// Escape mass after `steps` transitions from `dist`.
    pub fn escape_after(&self, dist: &[f64], steps: usize) -> f64 {
        let mut d = dist.to_vec();
        for _ in 0..steps {
            d = self.step(&d);
        }
        d[0].clamp(0.0, 1.0)
    }
}

/// `P(V < theta)` lower bound when `E[V] <= mean_bound` and `V >= v_min`.
fn tail_lower(theta: f64, mean_bound: f64, v_min: f64) -> f64 {
    if theta <= mean_bound {
        0.0
    } else {
        ((theta - mean_bound) / (theta - v_min)).clamp(0.0, 1.0)
    }
}

/// Distribution over `[escape, in-levels...]` from cumulative lower bounds
/// `q[i] <= P(level >= i)`.
fn from_cumulative(q: &[f64]) -> (Vec<f64>, f64) {
    let n = q.len();
    let col = (0..n).map(|i| if i + 1 < n { q[i] - q[i + 1] } else { q[i] }).collect();
    (col, 1.0 - q[0])
}

pub fn transition_bounds(ladder: &LevelLadder, v_max: f64, rule: TransitionBoundRule) -> TransitionBoundMatrix {
    let th = &ladder.thresholds;
    let (lam, vmin) = (ladder.lambda, ladder.v_min);
    match rule {
        TransitionBoundRule::Rederived => {
            let n = th.len();
            let mut p = vec![vec![0.0; n]; n];
            let mut escape = vec![0.0; n];
            for j in 0..n {
                let m = (1.0 - lam) * th[j] + lam * vmin;
                let q: Vec<f64> = th.iter().map(|t| tail_lower(*t, m, vmin)).collect();
                let (col, esc) = from_cumulative(&q);
                for i in 0..n {
                    p[i][j] = col[i];
                }
                escape[j] = esc;
            }
            TransitionBoundMatrix {
                p,
                escape,
                max_clamp: 0.0,
            }
        }
        TransitionBoundRule::NearestPlus | TransitionBoundRule::NearestMinus => {
            let shift = rule.shift();
            let n = th.len() - 1;
            let mut p = vec![vec![0.0; n]; n];
            let mut escape = vec![0.0; n];
            let mut max_clamp: f64 = 0.0;
            for j in 0..n {
                let a = shift.apply(lam, th[j + 1], vmin);
                for i in 0..n {
                    let raw = if i <= j {
                        (th[i] - th[j] + a) / (th[i] - vmin) - (th[i + 1] - th[j] + a) / (v_max - th[j] + a)
                    } else if i == j + 1 {
                        (1.0 - ladder.vartheta) * a / (th[j] - a - vmin)
                    } else {
                        0.0
                    };
                    let raw = if raw.is_finite() { raw } else { 0.0 };
                    let c = raw.clamp(0.0, 1.0);
                    max_clamp = max_clamp.max((raw - c).abs());
                    p[i][j] = c;
                }
                let s: f64 = (0..n).map(|i| p[i][j]).sum();
                if s > 1.0 {
                    for row in p.iter_mut() {
                        row[j] /= s;
                    }
                }
                escape[j] = (1.0 - (0..n).map(|i| p[i][j]).sum::<f64>()).max(0.0);
            }
            TransitionBoundMatrix { p, escape, max_clamp }
        }
    }
}

/// Distribution of the first level `[escape, in-levels...]`.
pub fn entry_distribution(ladder: &LevelLadder, rule: TransitionBoundRule) -> Vec<f64> {
    match rule {
        TransitionBoundRule::Rederived => {
            let q: Vec<f64> = ladder
                .thresholds
                .iter()
                .map(|t| tail_lower(*t, ladder.xi, ladder.v_min))
                .collect();
            let (col, esc) = from_cumulative(&q);
            let mut d = vec![esc];
            d.extend(col);
            d
        }
        _ => {
            let n = ladder.thresholds.len() - 1;
            let mut d = vec![0.0; n + 1];
            d[n] = 1.0;
            d
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McCrossCheck {
    pub violation_rate: f64,
    pub interval: (f64, f64),
    pub rollouts: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificateReport {
    pub delta_fl: f64,
    /// Model-calibration failure probability supplied by the caller.
    pub delta_f: f64,
    /// `delta_fl + delta_f - delta_fl * delta_f`.
    pub delta: f64,
    pub k: usize,
    pub rule: TransitionBoundRule,
    pub ladder: LevelLadder,
    pub matrix: Vec<Vec<f64>>,
    pub warnings: Vec<String>,
    /// `delta_fl` for every vartheta tried; `None` where no ladder fits.
    pub per_vartheta: Vec<(f64, Option<f64>)>,
    pub mc_crosscheck: Option<McCrossCheck>,
}

pub fn compose_delta(delta_fl: f64, delta_f: f64) -> f64 {
    delta_fl + delta_f - delta_fl * delta_f
}

/// Probability bound of leaving the outermost level within `k` steps.
pub fn delta_fl(ladder: &LevelLadder, v_max: f64, k: usize, rule: TransitionBoundRule) -> Result<CertificateReport> {
    let matrix = transition_bounds(ladder, v_max, rule);
    let entry = entry_distribution(ladder, rule);
    let delta = match rule {
        _ if k == 0 => 0.0,
        TransitionBoundRule::Rederived => matrix.escape_after(&entry, k - 1),
        _ => matrix.escape_after(&entry, k),
    };
    let mut warnings = Vec::new();
    if matrix.max_clamp > 0.5 {
        warnings.push(format!(
            "clamping changed a transition bound by {:.3}; the certificate is likely vacuous",
            matrix.max_clamp
        ));
    }
    Ok(CertificateReport {
        delta_fl: delta,
        delta_f: 0.0,
        delta,
        k,
        rule,
        ladder: ladder.clone(),
        matrix: matrix.augmented(),
        warnings,
        per_vartheta: vec![(ladder.vartheta, Some(delta))],
        mc_crosscheck: None,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CertOptions {
    pub rule: TransitionBoundRule,
    pub varthetas: Vec<f64>,
    pub delta_f: f64,
    pub max_levels: usize,
}

impl Default for CertOptions {
    fn default() -> Self {
        Self {
            rule: TransitionBoundRule::Rederived,
            varthetas: DEFAULT_VARTHETAS.to_vec(),
            delta_f: 0.0,
            max_levels: DEFAULT_MAX_LEVELS,
        }
    }
}

/// Smallest `delta_fl` over the vartheta grid.
pub fn certify(input: &CertInput, k: usize, options: &CertOptions) -> Result<CertificateReport> {
    if !(0.0..=1.0).contains(&options.delta_f) {
        return Err(Error::invalid("delta_f must lie in [0, 1]"));
    }
    let shift = options.rule.shift();
    let mut best: Option<CertificateReport> = None;
    let mut per = Vec::new();
    let mut last_err = None;
    for &vt in &options.varthetas {
        match build_level_ladder(
            input.lambda,
            input.xi,
            input.xi_bar,
            input.v_min,
            vt,
            shift,
            options.max_levels,
        ) {
            Ok(ladder) => {
                let r = delta_fl(&ladder, input.v_max, k, options.rule)?;
                per.push((vt, Some(r.delta_fl)));
                if best.as_ref().is_none_or(|b| r.delta_fl < b.delta_fl) {
                    best = Some(r);
                }
            }
            Err(e) => {
                per.push((vt, None));
                last_err = Some(e);
            }
        }
    }
    let mut report = best.ok_or_else(|| last_err.unwrap_or_else(|| Error::invalid("empty vartheta grid")))?;
    report.per_vartheta = per;
    report.delta_f = options.delta_f;
    report.delta = compose_delta(report.delta_fl, options.delta_f);
    Ok(report)
}

/// Wilson score interval for `successes` out of `n`.
pub fn wilson_interval(successes: usize, n: usize, z: f64) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let nf = n as f64;
    let p = successes as f64 / nf;
    let z2 = z * z;
    let denom = 1.0 + z2 / nf;
    let centre = (p + z2 / (2.0 * nf)) / denom;
    let half = z * (p * (1.0 - p) / nf + z2 / (4.0 * nf * nf)).sqrt() / denom;
    ((centre - half).max(0.0), (centre + half).min(1.0))
}

/// Fraction of `n` roll-outs with some `V(x_k) > xi_bar`, `k = 1..=K`.
/// Roll-out `i` starts from `x0_set[i % len]`.
#[allow(clippy::too_many_arguments)]
pub fn mc_delta_estimate<S>(
    step: S,
    policy: &dyn Policy,
    value: &GridValueFunction,
    xi_bar: f64,
    x0_set: &[Vec<f64>],
    k: usize,
    n: usize,
    rng: &RandomSource,
) -> Result<McCrossCheck>
where
    S: Fn(&[f64], &[f64], &mut RandomSource) -> Result<Vec<f64>> + Sync,
{
    if n < 1000 {
        return Err(Error::invalid(
            "the Monte-Carlo cross-check needs at least 1000 roll-outs",
        ));
    }
    if x0_set.is_empty() {
        return Err(Error::invalid("initial state set is empty"));
    }
    let hits = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut r = rng.fork(i as u64);
            let mut x = x0_set[i % x0_set.len()].clone();
            let mut scratch = Vec::new();
            for _ in 0..k {
                let u = policy.act(&x, &mut r);
                x = step(&x, &u, &mut r)?;
                if value.eval_with(&x, &mut scratch) > xi_bar {
                    return Ok(1usize);
                }
            }
            Ok(0)
        })
        .collect::<Result<Vec<usize>>>()?
        .into_iter()
        .sum::<usize>();
    Ok(McCrossCheck {
        violation_rate: hits as f64 / n as f64,
        interval: wilson_interval(hits, n, Z95),
        rollouts: n,
    })
}

#[cfg(test)]
mod tests;

/// Largest linear drift rate of `v` under the Markov matrix `p` over states
/// with `v < level`. States at `v_min` must not increase in expectation.
pub fn chain_drift_rate(p: &[Vec<f64>], v: &[f64], level: f64) -> Option<f64> {
    let v_min = v.iter().copied().fold(f64::INFINITY, f64::min);
    let mut rate = f64::INFINITY;
    for (s, row) in p.iter().enumerate() {
        if v[s] >= level {
            continue;
        }
        let next: f64 = row.iter().zip(v).map(|(a, b)| a * b).sum();
        let denom = v[s] - v_min;
        if denom <= 0.0 {
            if next > v_min + 1e-12 {
                return None;
            }
            continue;
        }
        rate = rate.min((v[s] - next) / denom);
    }
    if rate.is_finite() && rate > 0.0 {
        Some(rate.min(1.0))
    } else {
        None
    }
}

/// Certificate for a finite Markov chain with Lyapunov candidate `v`,
/// started in `start`, with `xi = E[v(x_1)]`.
pub fn certify_chain(
    p: &[Vec<f64>],
    v: &[f64],
    start: usize,
    xi_bar: f64,
    k: usize,
    options: &CertOptions,
) -> Result<CertificateReport> {
    let lambda = chain_drift_rate(p, v, xi_bar).ok_or_else(|| Error::invalid("chain violates the drift condition"))?;
    let v_min = v.iter().copied().fold(f64::INFINITY, f64::min);
    let v_max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max).max(xi_bar + 1.0);
    let xi: f64 = p[start].iter().zip(v).map(|(a, b)| a * b).sum();
    let input = CertInput::new(lambda, xi, xi_bar, v_min, v_max, v_min)?;
    certify(&input, k, options)
}
