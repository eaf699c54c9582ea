//! Budget-smoothing fixed point: find filtering probabilities satisfying
//! `pi_i = min{1, B_i / eCPM_i(pi)}` for every bidder, with `pi_i = 1`
//! whenever `eCPM_i = 0`.
//!
//! Two methods are exposed. The default damped fixed-point iteration starts
//! from pi = 1 and averages each update with the previous iterate; the
//! Gauss-Newton method minimizes the sum of squared residuals with a
//! finite-difference Jacobian and backtracking line search, falling back to
//! damped fixed-point steps when a step fails to reduce the objective.

use crate::engine::{outcomes_dp, FilterVector, OutcomeTable};
use crate::error::{invalid, Result};
use crate::market::ActiveMarket;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    FixedPoint,
    GaussNewton,
}

impl std::str::FromStr for Method {
    type Err = crate::error::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed-point" => Ok(Method::FixedPoint),
            "gauss-newton" => Ok(Method::GaussNewton),
            other => Err(invalid(format!(
                "unknown method {other:?}, expected fixed-point or gauss-newton"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SolveOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub method: Method,
    /// Damping for the fixed-point update: pi_new = (1-lambda) pi + lambda F(pi).
    pub damping: f64,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 500,
            method: Method::FixedPoint,
            damping: 0.5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PacingSolution {
    pub pi: FilterVector,
    pub residual_inf_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Outcomes at the returned pi, for callers that need them anyway.
    pub outcomes: OutcomeTable,
}

/// Balanced-budget targets `min{1, B_i/eCPM_i}` at the given outcomes.
/// Entries pinned by `fixed` take that value instead.
fn targets(market: &ActiveMarket, out: &OutcomeTable, fixed: &[Option<f64>]) -> Vec<f64> {
    market
        .bidders()
        .iter()
        .enumerate()
        .map(|(i, b)| match fixed[i] {
            Some(v) => v,
            None => {
                if out.ecpm[i] <= 0.0 {
                    1.0
                } else {
                    (b.budget_per_mille / out.ecpm[i]).min(1.0)
                }
            }
        })
        .collect()
}

fn residual_inf(pi: &[f64], target: &[f64], fixed: &[Option<f64>]) -> f64 {
    pi.iter()
        .zip(target)
        .zip(fixed)
        .filter(|(_, f)| f.is_none())
        .map(|((p, t), _)| (p - t).abs())
        .fold(0.0, f64::max)
}

pub fn solve_pacing(market: &ActiveMarket, opts: &SolveOptions) -> Result<PacingSolution> {
    solve_pacing_with_fixed(market, &vec![None; market.len()], opts)
}

/// Solve with some bidders' probabilities pinned (used by the recommender,
/// which holds the querying bidder unfiltered). Pinned entries are excluded
/// from the residual.
pub fn solve_pacing_with_fixed(
    market: &ActiveMarket,
    fixed: &[Option<f64>],
    opts: &SolveOptions,
) -> Result<PacingSolution> {
    if !(opts.tol > 0.0 && opts.tol.is_finite()) {
        return Err(invalid("tol must be positive"));
    }
    if opts.max_iter == 0 {
        return Err(invalid("max_iter must be positive"));
    }
    if !(opts.damping > 0.0 && opts.damping <= 1.0) {
        return Err(invalid("damping must lie in (0, 1]"));
    }
    if fixed.len() != market.len() {
        return Err(invalid("fixed vector not aligned with market"));
    }
    if fixed
        .iter()
        .flatten()
        .any(|v| !(0.0..=1.0).contains(v) || !v.is_finite())
    {
        return Err(invalid("pinned probabilities must lie in [0, 1]"));
    }

    let mut pi: Vec<f64> = (0..market.len()).map(|i| fixed[i].unwrap_or(1.0)).collect();

    match opts.method {
        Method::FixedPoint => fixed_point(market, fixed, pi, opts),
        Method::GaussNewton => gauss_newton(market, fixed, &mut pi, opts),
    }
}

fn fixed_point(
    market: &ActiveMarket,
    fixed: &[Option<f64>],
    mut pi: Vec<f64>,
    opts: &SolveOptions,
) -> Result<PacingSolution> {
    let mut iterations = 0;
    loop {
        let fv = FilterVector::new(pi.clone(), market)?;
        let out = outcomes_dp(market, &fv)?;
        let target = targets(market, &out, fixed);
        let residual = residual_inf(&pi, &target, fixed);
        if residual <= opts.tol || iterations >= opts.max_iter {
            return Ok(PacingSolution {
                pi: fv,
                residual_inf_norm: residual,
                iterations,
                converged: residual <= opts.tol,
                outcomes: out,
            });
        }
        for i in 0..pi.len() {
            if fixed[i].is_none() {
                pi[i] = (1.0 - opts.damping) * pi[i] + opts.damping * target[i];
            }
        }
        iterations += 1;
    }
}

/// Residual vector for the least-squares formulation, free entries only.
fn residual_vec(
    market: &ActiveMarket,
    fixed: &[Option<f64>],
    pi: &[f64],
) -> Result<(Vec<f64>, Vec<f64>, OutcomeTable)> {
    let fv = FilterVector::new(pi.to_vec(), market)?;
    let out = outcomes_dp(market, &fv)?;
    let target = targets(market, &out, fixed);
    let r: Vec<f64> = pi
        .iter()
        .zip(&target)
        .zip(fixed)
        .filter(|(_, f)| f.is_none())
        .map(|((p, t), _)| p - t)
        .collect();
    Ok((r, target, out))
}

fn gauss_newton(
    market: &ActiveMarket,
    fixed: &[Option<f64>],
    pi: &mut Vec<f64>,
    opts: &SolveOptions,
) -> Result<PacingSolution> {
    let free: Vec<usize> = (0..market.len()).filter(|&i| fixed[i].is_none()).collect();
    let m = free.len();
    let mut iterations = 0;

    loop {
        let (r, target, out) = residual_vec(market, fixed, pi)?;
        let residual = r.iter().fold(0.0_f64, |a, x| a.max(x.abs()));
        if residual <= opts.tol || iterations >= opts.max_iter || m == 0 {
            return Ok(PacingSolution {
                pi: FilterVector::new(pi.clone(), market)?,
                residual_inf_norm: residual,
                iterations,
                converged: residual <= opts.tol,
                outcomes: out,
            });
        }
        let g0: f64 = r.iter().map(|x| x * x).sum();

        // forward-difference Jacobian of the residual in the free variables,
        // differencing backwards at the pi = 1 boundary
        let h = 1e-7;
        let mut jac = vec![vec![0.0; m]; m];
        for (col, &j) in free.iter().enumerate() {
            let step = if pi[j] + h <= 1.0 { h } else { -h };
            let mut pert = pi.clone();
            pert[j] += step;
            let (rp, _, _) = residual_vec(market, fixed, &pert)?;
            for row in 0..m {
                jac[row][col] = (rp[row] - r[row]) / step;
            }
        }

        // normal equations (J^T J + mu I) d = -J^T r
        let mut a = vec![vec![0.0; m]; m];
        let mut b = vec![0.0; m];
        for i in 0..m {
            for j in 0..m {
                a[i][j] = (0..m).map(|k| jac[k][i] * jac[k][j]).sum();
            }
            a[i][i] += 1e-12;
            b[i] = -(0..m).map(|k| jac[k][i] * r[k]).sum::<f64>();
        }
        let delta = solve_linear(a, b);

        let mut accepted = false;
        if let Some(delta) = delta {
            let mut alpha = 1.0;
            for _ in 0..20 {
                let mut cand = pi.clone();
                for (col, &j) in free.iter().enumerate() {
                    cand[j] = (pi[j] + alpha * delta[col]).clamp(0.0, 1.0);
                }
                let (rc, _, _) = residual_vec(market, fixed, &cand)?;
                let gc: f64 = rc.iter().map(|x| x * x).sum();
                if gc < g0 {
                    *pi = cand;
                    accepted = true;
                    break;
                }
                alpha *= 0.5;
            }
        }
        if !accepted {
            // damped fixed-point fallback
            for &j in &free {
                pi[j] = (1.0 - opts.damping) * pi[j] + opts.damping * target[j];
            }
        }
        iterations += 1;
    }
}

/// Gaussian elimination with partial pivoting; None on a singular system.
fn solve_linear(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| {
            a[i][col]
                .abs()
                .partial_cmp(&a[j][col].abs())
                .expect("finite")
        })?;
        if a[pivot][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for col in (0..n).rev() {
        let mut s = b[col];
        for k in col + 1..n {
            s -= a[col][k] * x[k];
        }
        x[col] = s / a[col][col];
    }
    Some(x)
}
