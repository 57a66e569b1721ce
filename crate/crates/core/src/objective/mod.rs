//! Immediate costs whose sub-level sets certify safety, the threshold `xi_bar`
//! below which the cost-value implies a safe state, and Monte-Carlo
//! estimates of cumulative cost.

use std::fmt;
use std::sync::Arc;

use rayon::prelude::*;

use crate::common::linalg::{self, Matrix};
use crate::common::{truncation_horizon, RandomSource};
use crate::error::{Error, Result};

pub type StateFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
pub type SafeFn = Arc<dyn Fn(&[f64]) -> bool + Send + Sync>;

/// `c(x)` with bounds `c_lower <= c <= c_upper` and `c >= c_hat` on unsafe
/// states.
#[derive(Clone)]
pub struct ImmediateCost {
    name: String,
    f: StateFn,
    c_lower: f64,
    c_upper: f64,
    c_hat: f64,
}

impl fmt::Debug for ImmediateCost {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ImmediateCost")
            .field("name", &self.name)
            .field("c_lower", &self.c_lower)
            .field("c_upper", &self.c_upper)
            .field("c_hat", &self.c_hat)
            .finish()
    }
}

impl ImmediateCost {
    pub fn new(name: &str, f: StateFn, c_lower: f64, c_upper: f64, c_hat: f64) -> Result<Self> {
        if !(c_lower.is_finite() && c_upper.is_finite() && c_hat.is_finite()) {
            return Err(Error::invalid("cost bounds must be finite"));
        }
        if !(c_lower <= c_hat && c_hat <= c_upper) {
            return Err(Error::invalid(format!(
                "cost bounds must satisfy c_lower <= c_hat <= c_upper, got {c_lower}, {c_hat}, {c_upper}"
            )));
        }
        Ok(Self {
            name: name.to_string(),
            f,
            c_lower,
            c_upper,
            c_hat,
        })
    }

    /// Constant cost; `c_hat` equals the constant.
    pub fn constant(value: f64) -> Result<Self> {
        Self::new("constant", Arc::new(move |_| value), value, value, value)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        (self.f)(x)
    }

    pub fn c_lower(&self) -> f64 {
        self.c_lower
    }

    pub fn c_upper(&self) -> f64 {
        self.c_upper
    }

    pub fn c_hat(&self) -> f64 {
        self.c_hat
    }

    /// Largest |c|, used for truncation.
    pub fn magnitude(&self) -> f64 {
        self.c_lower.abs().max(self.c_upper.abs())
    }

    /// Checks the bound conditions at every given state. Returns the first
    /// offending state.
    pub fn verify<'a, I>(&self, states: I, is_safe: &dyn Fn(&[f64]) -> bool) -> std::result::Result<(), Vec<f64>>
    where
        I: IntoIterator<Item = &'a [f64]>,
    {
        for x in states {
            let c = self.eval(x);
            let in_bounds = c >= self.c_lower && c <= self.c_upper;
            if !in_bounds || (!is_safe(x) && c < self.c_hat) {
                return Err(x.to_vec());
            }
        }
        Ok(())
    }
}

/// 1 on unsafe states, 0 on safe ones.
pub fn indicator_cost(is_safe: SafeFn) -> ImmediateCost {
    ImmediateCost {
        name: "indicator".into(),
        f: Arc::new(move |x| if is_safe(x) { 0.0 } else { 1.0 }),
        c_lower: 0.0,
        c_upper: 1.0,
        c_hat: 1.0,
    }
}

/// Logistic of `slope * d(x)` where `d` is a signed distance, positive on
/// unsafe states. Equals 0.5 on the boundary.
pub fn margin_cost(signed_distance: StateFn, slope: f64) -> Result<ImmediateCost> {
    if !(slope > 0.0 && slope.is_finite()) {
        return Err(Error::invalid(format!("margin slope must be positive, got {slope}")));
    }
    Ok(ImmediateCost {
        name: "margin".into(),
        f: Arc::new(move |x| {
            let z = slope * signed_distance(x);
            // stable both ways
            if z >= 0.0 {
                1.0 / (1.0 + (-z).exp())
            } else {
                let e = z.exp();
                e / (1.0 + e)
            }
        }),
        c_lower: 0.0,
        c_upper: 1.0,
        c_hat: 0.5,
    })
}

/// Ellipsoidal dead-zone cost for a half-space constraint `a . x <= b`.
///
/// `c(x) = clamp((|x - center|_P - r0) / width, 0, 1)` with
/// `|v|_P = sqrt(v' P v)`. The cost vanishes on the ellipsoid of radius
/// `r0`, and `c_hat` is its value at the nearest unsafe point.
pub fn ellipsoidal_cost(
    center: Vec<f64>,
    shape: Matrix,
    r0: f64,
    width: f64,
    normal: Vec<f64>,
    offset: f64,
) -> Result<ImmediateCost> {
    let d = center.len();
    if shape.len() != d || shape.iter().any(|r| r.len() != d) || normal.len() != d {
        return Err(Error::invalid("ellipsoid shape, center and normal dimensions differ"));
    }
    if !(r0 >= 0.0 && width > 0.0) {
        return Err(Error::invalid("dead-zone radius must be >= 0 and width > 0"));
    }
    let inv = linalg::invert(&shape).ok_or_else(|| Error::invalid("ellipsoid shape is singular"))?;
    let scale = linalg::dot(&normal, &linalg::mat_vec(&inv, &normal));
    if !(scale > 0.0) {
        return Err(Error::invalid("ellipsoid shape must be positive definite"));
    }
    let margin = offset - linalg::dot(&normal, &center);
    if margin <= 0.0 {
        return Err(Error::invalid(
            "ellipsoid center must lie strictly inside the safe half-space",
        ));
    }
    let nearest = margin / scale.sqrt();
    let c_hat = ((nearest - r0) / width).clamp(0.0, 1.0);
    let f = move |x: &[f64]| {
        let v: Vec<f64> = x.iter().zip(&center).map(|(a, b)| a - b).collect();
        let r = linalg::dot(&v, &linalg::mat_vec(&shape, &v)).max(0.0).sqrt();
        ((r - r0) / width).clamp(0.0, 1.0)
    };
    Ok(ImmediateCost {
        name: "ellipsoidal".into(),
        f: Arc::new(f),
        c_lower: 0.0,
        c_upper: 1.0,
        c_hat,
    })
}

/// `xi_bar = gamma * c_min_bound + c_hat`.
pub fn safe_threshold(gamma: f64, c_min_bound: f64, c_hat: f64) -> f64 {
    gamma * c_min_bound + c_hat
}

#[derive(Debug, Clone)]
pub struct SafetyObjective {
    cost: ImmediateCost,
    gamma: f64,
    c_min_bound: f64,
    xi_bar: f64,
    xi: f64,
}

impl SafetyObjective {
    /// Uses the analytic floor `c_lower / (1 - gamma)` for the minimum
    /// cost-value. `xi` defaults to `xi_bar / 2` when `xi_bar > 0`.
    pub fn new(cost: ImmediateCost, gamma: f64, xi: Option<f64>) -> Result<Self> {
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(Error::invalid(format!("discount {gamma} outside (0, 1)")));
        }
        let c_min_bound = cost.c_lower / (1.0 - gamma);
        Self::with_bound(cost, gamma, c_min_bound, xi)
    }

    /// Like `new` but with an externally computed lower bound on the
    /// minimum cost-value, which must not be below the analytic floor.
    pub fn with_bound(cost: ImmediateCost, gamma: f64, c_min_bound: f64, xi: Option<f64>) -> Result<Self> {
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(Error::invalid(format!("discount {gamma} outside (0, 1)")));
        }
        let floor = cost.c_lower / (1.0 - gamma);
        if !(c_min_bound.is_finite() && c_min_bound >= floor - 1e-12) {
            return Err(Error::invalid(format!(
                "c_min_bound {c_min_bound} is below the valid floor {floor}"
            )));
        }
        let xi_bar = safe_threshold(gamma, c_min_bound, cost.c_hat);
        let xi = match xi {
            Some(v) => v,
            None if xi_bar > 0.0 => 0.5 * xi_bar,
            None => return Err(Error::invalid("xi must be given explicitly when xi_bar <= 0")),
        };
        if !(xi < xi_bar) {
            return Err(Error::invalid(format!(
                "xi = {xi} must be strictly below xi_bar = {xi_bar}"
            )));
        }
        Ok(Self {
            cost,
            gamma,
            c_min_bound,
            xi_bar,
            xi,
        })
    }

    pub fn cost(&self) -> &ImmediateCost {
        &self.cost
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn c_min_bound(&self) -> f64 {
        self.c_min_bound
    }

    pub fn xi_bar(&self) -> f64 {
        self.xi_bar
    }

    pub fn xi(&self) -> f64 {
        self.xi
    }

    pub fn with_xi(&self, xi: f64) -> Result<Self> {
        Self::with_bound(self.cost.clone(), self.gamma, self.c_min_bound, Some(xi))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub samples: usize,
}

impl McEstimate {
    pub fn from_samples(values: &[f64]) -> Self {
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let std_error = if n > 1 {
            let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        } else {
            0.0
        };
        Self {
            mean,
            std_error,
            samples: n,
        }
    }
}

/// Tolerance on the neglected geometric tail of each truncated roll-out.
pub const TRUNCATION_TOL: f64 = 1e-6;

/// Mean truncated discounted cost of `n` independent roll-outs from `x0`.
#[allow(clippy::too_many_arguments)]
pub fn cumulative_cost_mc<S, P>(
    step: S,
    policy: P,
    cost: &ImmediateCost,
    gamma: f64,
    x0: &[f64],
    n: usize,
    rng: &RandomSource,
) -> Result<McEstimate>
where
    S: Fn(&[f64], &[f64], &mut RandomSource) -> Result<Vec<f64>> + Sync,
    P: Fn(&[f64], &mut RandomSource) -> Result<Vec<f64>> + Sync,
{
    if n == 0 {
        return Err(Error::invalid("at least one roll-out is required"));
    }
    let horizon = truncation_horizon(gamma, cost.magnitude(), TRUNCATION_TOL)?;
    let values = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut r = rng.fork(i as u64);
            let mut x = x0.to_vec();
            let mut total = cost.eval(&x);
            let mut w = 1.0;
            for k in 0..horizon {
                let u = policy(&x, &mut r)?;
                x = step(&x, &u, &mut r)?;
                if x.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite {
                        step: k,
                        context: "cost roll-out".into(),
                    });
                }
                w *= gamma;
                total += w * cost.eval(&x);
            }
            Ok(total)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(McEstimate::from_samples(&values))
}

#[cfg(test)]
mod tests;
