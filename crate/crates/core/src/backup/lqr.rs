use super::ParametricPolicy;
use crate::common::linalg::{self, Matrix};
use crate::common::Bounds;
use crate::error::{Error, Result};
use crate::model::CalibratedModel;

/// Central-difference Jacobians `(A, B)` of the model mean at `(x, u)`.
pub fn linearize(model: &dyn CalibratedModel, x: &[f64], u: &[f64], eps: f64) -> (Matrix, Matrix) {
    let dx = x.len();
    let du = u.len();
    let mut a = vec![vec![0.0; dx]; dx];
    let mut b = vec![vec![0.0; du]; dx];
    let mut probe = |column: usize, is_state: bool| {
        let (mut xp, mut xm) = (x.to_vec(), x.to_vec());
        let (mut up, mut um) = (u.to_vec(), u.to_vec());
        if is_state {
            xp[column] += eps;
            xm[column] -= eps;
        } else {
            up[column] += eps;
            um[column] -= eps;
        }
        let fp = model.predict(&xp, &up).mean;
        let fm = model.predict(&xm, &um).mean;
        for i in 0..dx {
            let d = (fp[i] - fm[i]) / (2.0 * eps);
            if is_state {
                a[i][column] = d;
            } else {
                b[i][column] = d;
            }
        }
    };
    for j in 0..dx {
        probe(j, true);
    }
    for j in 0..du {
        probe(j, false);
    }
    (a, b)
}

/// Infinite-horizon discrete LQR by Riccati iteration. Returns the gain `K`
/// of `u = -K x` and the cost matrix `P`.
pub fn dlqr(a: &[Vec<f64>], b: &[Vec<f64>], q: &[Vec<f64>], r: &[Vec<f64>]) -> Result<(Matrix, Matrix)> {
    const MAX_ITER: usize = 1_000_000;
    let n = a.len();
    let m = r.len();
    if b.len() != n || b.iter().any(|row| row.len() != m) || q.len() != n {
        return Err(Error::invalid("LQR matrices have inconsistent shapes"));
    }
    let at = linalg::transpose(a);
    let bt = linalg::transpose(b);
    let mut p = q.to_vec();
    for _ in 0..MAX_ITER {
        let pb = linalg::mat_mul(&p, b);
        let pa = linalg::mat_mul(&p, a);
        let mut s = linalg::mat_mul(&bt, &pb);
        for i in 0..m {
            for j in 0..m {
                s[i][j] += r[i][j];
            }
        }
        let s_inv = linalg::invert(&s).ok_or_else(|| Error::invalid("LQR input weight is singular"))?;
        let k = linalg::mat_mul(&s_inv, &linalg::mat_mul(&bt, &pa));
        // P = Q + A' P (A - B K)
        let abk: Matrix = (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| a[i][j] - (0..m).map(|l| b[i][l] * k[l][j]).sum::<f64>())
                    .collect()
            })
            .collect();
        let mut next = linalg::mat_mul(&at, &linalg::mat_mul(&p, &abk));
        let mut diff: f64 = 0.0;
        let mut scale: f64 = 0.0;
        for i in 0..n {
            for j in 0..n {
                next[i][j] += q[i][j];
                // keep the iterate symmetric
                diff = diff.max((next[i][j] - p[i][j]).abs());
                scale = scale.max(next[i][j].abs());
            }
        }
        for i in 0..n {
            for j in 0..i {
                let s = 0.5 * (next[i][j] + next[j][i]);
                next[i][j] = s;
                next[j][i] = s;
            }
        }
        if !scale.is_finite() {
            return Err(Error::invalid(
                "Riccati iteration diverged; system may not be stabilizable",
            ));
        }
        p = next;
        if diff <= 1e-12 * scale.max(1.0) {
            return Ok((k, p));
        }
    }
    Err(Error::NotConverged {
        iterations: MAX_ITER,
        residual: f64::NAN,
    })
}

/// Saturated LQR about an equilibrium of the model mean.
#[derive(Debug, Clone, PartialEq)]
pub struct LqrDesign {
    pub policy: ParametricPolicy,
    /// Equilibrium state; the policy and any quadratic cost are centred here.
    pub center: Vec<f64>,
    pub u_eq: Vec<f64>,
    pub gain: Matrix,
    /// Riccati cost matrix.
    pub p: Matrix,
}

/// Linearizes at `(reference, mid(U))`, solves for the equilibrium that
/// keeps every state outside `free` at its reference value, and designs
/// `u = u_eq - K (x - center)` saturated on `bounds`. `free` plus the
/// action dimension must equal the state dimension.
pub fn lqr_about_equilibrium(
    model: &dyn CalibratedModel,
    reference: &[f64],
    free: &[usize],
    q_diag: &[f64],
    r_diag: &[f64],
    bounds: &Bounds,
) -> Result<LqrDesign> {
    let dx = model.state_dim();
    let du = model.action_dim();
    if reference.len() != dx || q_diag.len() != dx || r_diag.len() != du || bounds.dim() != du {
        return Err(Error::invalid(
            "LQR reference, weights and bounds have the wrong dimensions",
        ));
    }
    if free.len() + du != dx || free.iter().any(|i| *i >= dx) {
        return Err(Error::invalid(
            "equilibrium needs state_dim - action_dim free state coordinates",
        ));
    }
    let u0 = bounds.center();
    let (a, b) = linearize(model, reference, &u0, 1e-6);
    let f0 = model.predict(reference, &u0).mean;
    // (A - I) dx_free + B du = -(f0 - reference)
    let m: Matrix = (0..dx)
        .map(|i| {
            free.iter()
                .map(|j| a[i][*j] - if i == *j { 1.0 } else { 0.0 })
                .chain(b[i].iter().copied())
                .collect()
        })
        .collect();
    let rhs: Vec<f64> = (0..dx).map(|i| reference[i] - f0[i]).collect();
    let inv = linalg::invert(&m).ok_or_else(|| Error::invalid("equilibrium equations are singular"))?;
    let sol = linalg::mat_vec(&inv, &rhs);
    let mut center = reference.to_vec();
    for (k, j) in free.iter().enumerate() {
        center[*j] += sol[k];
    }
    let u_eq: Vec<f64> = (0..du).map(|i| u0[i] + sol[free.len() + i]).collect();
    let diag = |d: &[f64]| -> Matrix {
        (0..d.len())
            .map(|i| (0..d.len()).map(|j| if i == j { d[i] } else { 0.0 }).collect())
            .collect()
    };
    let (gain, p) = dlqr(&a, &b, &diag(q_diag), &diag(r_diag))?;
    let linear = ParametricPolicy::linear(center.clone(), &gain, bounds.clone())?;
    let mut params = linear.params().to_vec();
    for (i, u) in u_eq.iter().enumerate() {
        let mid = 0.5 * (bounds.lower()[i] + bounds.upper()[i]);
        let half = 0.5 * (bounds.upper()[i] - bounds.lower()[i]);
        if (u - mid).abs() >= half {
            return Err(Error::invalid("equilibrium action lies outside the action box"));
        }
        // Invert the output squashing so the policy returns u_eq at the center.
        params[i * (dx + 1) + dx] = half * ((u - mid) / half).atanh();
    }
    Ok(LqrDesign {
        policy: linear.with_params(params)?,
        center,
        u_eq,
        gain,
        p,
    })
}
