//! Wasserstein-2 machinery on point clouds.
//!
//! * [`sinkhorn_divergence`]: log-domain entropic OT with squared Euclidean
//!   cost and regularisation `eps = blur^2`, optionally debiased
//!   (`S(a,b) = OT(a,b) - OT(a,a)/2 - OT(b,b)/2`).
//! * [`gradient_wrt_points`]: `dS/dx_i` for every point of `a`, read off the
//!   converged dual potentials.
//! * [`exact_w2`]: the exact assignment value for equal-size uniform clouds.
//!
//! Costs are on the squared scale (`cost ~ W2^2`); `value = sqrt(cost)`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{pairwise_sq_dists, GeometryError, PointCloud};
use crate::linalg::Matrix;

#[derive(Debug, Error)]
pub enum OtError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("invalid sinkhorn config: {0}")]
    Config(String),
    #[error("non-finite value in {0}")]
    Numeric(&'static str),
    #[error("unsupported instance: {0}")]
    Unsupported(String),
    #[error("sinkhorn did not converge ({iterations} iterations, marginal violation {violation:.3e}); gradient would be stale")]
    StaleGradient { iterations: usize, violation: f64 },
}

pub type Result<T> = std::result::Result<T, OtError>;

/// Entropic OT settings. `eps = blur^2` on squared costs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SinkhornConfig {
    pub blur: f64,
    /// Iteration cap for the fixed-`eps` phase.
    pub max_iters: usize,
    /// Relative L-infinity marginal violation at which iterations stop.
    pub tol: f64,
    pub debiased: bool,
    /// Warm start by annealing `eps` from the squared cloud diameter down to
    /// `blur^2`, multiplying the blur by this factor per level. `None` starts
    /// cold at the target `eps`.
    #[serde(default)]
    pub scaling: Option<f64>,
    /// Over-relax the fixed-`eps` updates with a factor estimated from the
    /// observed contraction rate. Plain alternating updates when off.
    #[serde(default = "default_true")]
    pub overrelax: bool,
    /// Averaged updates per annealing level.
    #[serde(default = "default_one")]
    pub anneal_iters: usize,
}

fn default_one() -> usize {
    1
}

fn default_true() -> bool {
    true
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self { blur: 0.05, max_iters: 500, tol: 1e-6, debiased: true, scaling: Some(0.5), overrelax: true, anneal_iters: 1 }
    }
}

impl SinkhornConfig {
    pub fn with_blur(blur: f64) -> Self {
        Self { blur, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.blur > 0.0 && self.blur.is_finite()) {
            return Err(OtError::Config(format!("blur must be > 0, got {}", self.blur)));
        }
        if self.max_iters == 0 || self.anneal_iters == 0 {
            return Err(OtError::Config("max_iters and anneal_iters must be >= 1".into()));
        }
        if !(self.tol > 0.0) {
            return Err(OtError::Config(format!("tol must be > 0, got {}", self.tol)));
        }
        if let Some(s) = self.scaling {
            if !(s > 0.0 && s < 1.0) {
                return Err(OtError::Config(format!("scaling must be in (0,1), got {s}")));
            }
        }
        Ok(())
    }

    #[inline]
    pub fn eps(&self) -> f64 {
        self.blur * self.blur
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransportResult {
    /// Squared-W2 scale (the debiased divergence when `debiased`).
    pub cost: f64,
    /// `sqrt(max(cost, 0))`.
    pub value: f64,
    /// Raw regularised cost `OT_eps(a, b)` (equal to `cost` when not debiased).
    pub raw_cost: f64,
    pub iterations_used: usize,
    pub converged: bool,
}

impl TransportResult {
    fn from_cost(cost: f64, raw_cost: f64, iterations_used: usize, converged: bool) -> Self {
        Self { cost, value: cost.max(0.0).sqrt(), raw_cost, iterations_used, converged }
    }
}

fn log_weights(w: &[f64]) -> Vec<f64> {
    w.iter().map(|x| x.ln()).collect()
}

/// Soft-min over rows: `out_i = -eps * log sum_j exp(h_j - C_ij / eps)` where
/// `h_j = log w_j + pot_j / eps`. `transpose` applies it to the columns.
fn softmin(cost: &Matrix, transpose: bool, log_w: &[f64], pot: &[f64], eps: f64, out: &mut [f64]) {
    let inv = 1.0 / eps;
    let h: Vec<f64> = log_w.iter().zip(pot).map(|(lw, p)| lw + p * inv).collect();
    let (n, m) = (cost.rows(), cost.cols());
    let c = cost.as_slice();
    if !transpose {
        out.par_iter_mut().enumerate().for_each_init(
            || vec![0.0; m],
            |buf, (i, o)| {
                let row = &c[i * m..(i + 1) * m];
                let mut mx = f64::NEG_INFINITY;
                for ((b, hj), cij) in buf.iter_mut().zip(&h).zip(row) {
                    *b = hj - cij * inv;
                    mx = mx.max(*b);
                }
                *o = -eps * (mx + sum_exp_above(buf, mx).ln());
            },
        );
    } else {
        out.par_iter_mut().enumerate().for_each_init(
            || vec![0.0; n],
            |buf, (j, o)| {
                let mut mx = f64::NEG_INFINITY;
                for (i, (b, hi)) in buf.iter_mut().zip(&h).enumerate() {
                    *b = hi - c[i * m + j] * inv;
                    mx = mx.max(*b);
                }
                *o = -eps * (mx + sum_exp_above(buf, mx).ln());
            },
        );
    }
}

/// Terms more than this far below the row maximum contribute less than
/// `e^-50` each and are skipped.
const LOG_TRUNCATION: f64 = 50.0;

#[inline]
fn sum_exp_above(buf: &[f64], mx: f64) -> f64 {
    let floor = mx - LOG_TRUNCATION;
    buf.iter().filter(|v| **v > floor).map(|v| (v - mx).exp()).sum()
}

fn max_violation(old: &[f64], new: &[f64], eps: f64) -> f64 {
    old.iter()
        .zip(new)
        .map(|(o, n)| ((o - n) / eps).exp_m1().abs())
        .fold(0.0, f64::max)
}

fn eps_schedule(cost: &Matrix, cfg: &SinkhornConfig) -> Vec<f64> {
    let target = cfg.eps();
    let mut out = Vec::new();
    if let Some(s) = cfg.scaling {
        let diam2 = cost.as_slice().iter().fold(0.0_f64, |m, v| m.max(*v));
        let mut eps = diam2.max(target);
        while eps > target {
            out.push(eps);
            eps *= s * s;
        }
    }
    out.push(target);
    out
}

const RATE_WINDOW: usize = 10;
const MAX_RELAXATION: f64 = 1.9;

/// Optimal SOR factor for a linear iteration contracting at the rate seen
/// over the last window; falls back to 1 when the violation did not shrink.
fn relaxation_factor(earlier: f64, now: f64) -> f64 {
    let theta = (now / earlier).powf(1.0 / RATE_WINDOW as f64);
    if !(theta < 1.0) {
        return 1.0;
    }
    (2.0 / (1.0 + (1.0 - theta).sqrt())).min(MAX_RELAXATION)
}

#[inline]
fn relax(x: &mut [f64], target: &[f64], omega: f64) {
    for (v, t) in x.iter_mut().zip(target) {
        *v += omega * (t - *v);
    }
}

/// Dual potentials of one entropic OT problem.
#[derive(Debug, Clone)]
pub struct DualSolution {
    pub f: Vec<f64>,
    pub g: Vec<f64>,
    pub eps: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Relative marginal violation measured at each fixed-`eps` iteration.
    pub violations: Vec<f64>,
}

impl DualSolution {
    pub fn value(&self, a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(&self.f).map(|(w, f)| w * f).sum::<f64>()
            + b.iter().zip(&self.g).map(|(w, g)| w * g).sum::<f64>()
    }
}

/// Log-domain Sinkhorn for `OT_eps(a, b)` on a given cost matrix.
pub fn solve_dual(cost: &Matrix, a: &[f64], b: &[f64], cfg: &SinkhornConfig) -> Result<DualSolution> {
    let (n, m) = (cost.rows(), cost.cols());
    let (la, lb) = (log_weights(a), log_weights(b));
    let schedule = eps_schedule(cost, cfg);
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; m];
    let mut f_new = vec![0.0; n];
    let mut g_new = vec![0.0; m];
    let mut iterations = 0;
    // annealing: averaged simultaneous updates, one per level
    let eps0 = schedule[0];
    softmin(cost, false, &lb, &g, eps0, &mut f);
    softmin(cost, true, &la, &f, eps0, &mut g);
    for &eps in schedule[..schedule.len() - 1].iter().flat_map(|e| std::iter::repeat(e).take(cfg.anneal_iters)) {
        softmin(cost, false, &lb, &g, eps, &mut f_new);
        softmin(cost, true, &la, &f, eps, &mut g_new);
        for (x, y) in f.iter_mut().zip(&f_new) {
            *x = 0.5 * (*x + y);
        }
        for (x, y) in g.iter_mut().zip(&g_new) {
            *x = 0.5 * (*x + y);
        }
        iterations += 1;
    }
    let eps = cfg.eps();
    let mut violations = Vec::new();
    let mut converged = false;
    let mut omega = 1.0;
    for it in 0..cfg.max_iters {
        softmin(cost, false, &lb, &g, eps, &mut f_new);
        let viol = max_violation(&f, &f_new, eps);
        relax(&mut f, &f_new, omega);
        softmin(cost, true, &la, &f, eps, &mut g_new);
        relax(&mut g, &g_new, omega);
        iterations += 1;
        if !viol.is_finite() {
            return Err(OtError::Numeric("sinkhorn potentials"));
        }
        violations.push(viol);
        if viol <= cfg.tol {
            converged = true;
            break;
        }
        if cfg.overrelax && it >= RATE_WINDOW && it % RATE_WINDOW == 0 {
            omega = relaxation_factor(violations[it - RATE_WINDOW], viol);
        }
    }
    // extrapolation: rows of the plan sum exactly to `a`
    softmin(cost, false, &lb, &g, eps, &mut f_new);
    std::mem::swap(&mut f, &mut f_new);
    Ok(DualSolution { f, g, eps, iterations, converged, violations })
}

/// Symmetric problem `OT_eps(a, a)`: a single potential with averaged updates.
fn solve_symmetric(cost: &Matrix, a: &[f64], cfg: &SinkhornConfig) -> Result<DualSolution> {
    let n = cost.rows();
    let la = log_weights(a);
    let schedule = eps_schedule(cost, cfg);
    let mut p = vec![0.0; n];
    let mut t = vec![0.0; n];
    let mut iterations = 0;
    softmin(cost, false, &la, &p.clone(), schedule[0], &mut p);
    for &eps in schedule[..schedule.len() - 1].iter().flat_map(|e| std::iter::repeat(e).take(cfg.anneal_iters)) {
        softmin(cost, false, &la, &p, eps, &mut t);
        for (x, y) in p.iter_mut().zip(&t) {
            *x = 0.5 * (*x + y);
        }
        iterations += 1;
    }
    let eps = cfg.eps();
    let mut violations = Vec::new();
    let mut converged = false;
    for _ in 0..cfg.max_iters {
        softmin(cost, false, &la, &p, eps, &mut t);
        let viol = max_violation(&p, &t, eps);
        iterations += 1;
        if !viol.is_finite() {
            return Err(OtError::Numeric("symmetric sinkhorn potential"));
        }
        violations.push(viol);
        if viol <= cfg.tol {
            converged = true;
            p.copy_from_slice(&t);
            break;
        }
        for (x, y) in p.iter_mut().zip(&t) {
            *x = 0.5 * (*x + y);
        }
    }
    Ok(DualSolution { g: p.clone(), f: p, eps, iterations, converged, violations })
}

fn checked_cost(a: &PointCloud, b: &PointCloud) -> Result<Matrix> {
    let c = pairwise_sq_dists(a, b)?;
    if c.as_slice().iter().any(|v| !v.is_finite()) {
        return Err(OtError::Numeric("cost matrix"));
    }
    Ok(c)
}

/// Everything needed to report a divergence and differentiate it.
#[derive(Debug, Clone)]
pub struct SinkhornState {
    pub result: TransportResult,
    pub ab: DualSolution,
    /// `OT(a, a)` potential, present when debiased.
    pub aa: Option<DualSolution>,
    cost_ab: Matrix,
    cost_aa: Option<Matrix>,
}

/// Solve all the OT problems behind `S_eps(a, b)` and keep their potentials.
pub fn sinkhorn_state(a: &PointCloud, b: &PointCloud, cfg: &SinkhornConfig) -> Result<SinkhornState> {
    cfg.validate()?;
    if a.dim() != b.dim() {
        return Err(GeometryError::DimMismatch(a.dim(), b.dim()).into());
    }
    let cost_ab = checked_cost(a, b)?;
    // alternating updates oscillate on a self-transport problem
    let same = a.coords() == b.coords() && a.weights() == b.weights();
    let ab = if same {
        solve_symmetric(&cost_ab, a.weights(), cfg)?
    } else {
        solve_dual(&cost_ab, a.weights(), b.weights(), cfg)?
    };
    let raw = ab.value(a.weights(), b.weights());
    if !cfg.debiased {
        let result = TransportResult::from_cost(raw, raw, ab.iterations, ab.converged);
        return Ok(SinkhornState { result, ab, aa: None, cost_ab, cost_aa: None });
    }
    let cost_aa = checked_cost(a, a)?;
    let cost_bb = checked_cost(b, b)?;
    let aa = solve_symmetric(&cost_aa, a.weights(), cfg)?;
    let bb = solve_symmetric(&cost_bb, b.weights(), cfg)?;
    let self_a: f64 = a.weights().iter().zip(&aa.f).map(|(w, p)| w * p).sum();
    let self_b: f64 = b.weights().iter().zip(&bb.f).map(|(w, p)| w * p).sum();
    let cost = raw - self_a - self_b;
    if !cost.is_finite() {
        return Err(OtError::Numeric("sinkhorn divergence"));
    }
    let result = TransportResult::from_cost(
        cost,
        raw,
        ab.iterations.max(aa.iterations).max(bb.iterations),
        ab.converged && aa.converged && bb.converged,
    );
    Ok(SinkhornState { result, ab, aa: Some(aa), cost_ab, cost_aa: Some(cost_aa) })
}

impl SinkhornState {
    /// `dS/dx_i` for the points of `a`, flat `n x d`. Uses whatever
    /// potentials were reached, converged or not.
    pub fn gradient(&self, a: &PointCloud, b: &PointCloud) -> Vec<f64> {
        let d = a.dim();
        let mut grad = vec![0.0; a.len() * d];
        plan_gradient(&self.cost_ab, &self.ab, a, b, 2.0, &mut grad);
        if let (Some(aa), Some(c)) = (&self.aa, &self.cost_aa) {
            plan_gradient(c, aa, a, a, -2.0, &mut grad);
        }
        grad
    }
}

/// `grad_i += scale * sum_j pi_ij (x_i - y_j)` with
/// `pi_ij = a_i b_j exp((f_i + g_j - C_ij) / eps)`.
fn plan_gradient(cost: &Matrix, sol: &DualSolution, a: &PointCloud, b: &PointCloud, scale: f64, grad: &mut [f64]) {
    let d = a.dim();
    let inv = 1.0 / sol.eps;
    let m = b.len();
    let lb = log_weights(b.weights());
    let c = cost.as_slice();
    grad.par_chunks_mut(d).enumerate().for_each(|(i, gi)| {
        let x = a.point(i);
        let ai = a.weights()[i];
        let row = &c[i * m..(i + 1) * m];
        let mut acc = vec![0.0; d];
        for j in 0..m {
            let p = (lb[j] + (sol.f[i] + sol.g[j] - row[j]) * inv).exp();
            if p == 0.0 {
                continue;
            }
            let y = b.point(j);
            for k in 0..d {
                acc[k] += p * (x[k] - y[k]);
            }
        }
        for k in 0..d {
            gi[k] += scale * ai * acc[k];
        }
    });
}

/// Entropic (by default debiased) Sinkhorn divergence between two clouds.
/// Non-convergence is reported through `converged`, not as an error.
pub fn sinkhorn_divergence(a: &PointCloud, b: &PointCloud, cfg: &SinkhornConfig) -> Result<TransportResult> {
    Ok(sinkhorn_state(a, b, cfg)?.result)
}

/// `dS/dx_i` for every point of `a` (flat, row-major). Refuses to return a
/// gradient from a non-converged solve.
pub fn gradient_wrt_points(a: &PointCloud, b: &PointCloud, cfg: &SinkhornConfig) -> Result<Vec<f64>> {
    let state = sinkhorn_state(a, b, cfg)?;
    if !state.result.converged {
        let violation = state.ab.violations.last().copied().unwrap_or(f64::INFINITY);
        return Err(OtError::StaleGradient { iterations: state.result.iterations_used, violation });
    }
    Ok(state.gradient(a, b))
}

/// Exact squared-W2 between equal-size uniform clouds via the O(n^3)
/// Hungarian algorithm on squared distances.
pub fn exact_w2(a: &PointCloud, b: &PointCloud) -> Result<TransportResult> {
    if a.len() != b.len() {
        return Err(OtError::Unsupported(format!("unequal sizes {} and {}", a.len(), b.len())));
    }
    if !a.is_uniform() || !b.is_uniform() {
        return Err(OtError::Unsupported("non-uniform weights".into()));
    }
    if a.len() > 1024 {
        return Err(OtError::Unsupported(format!("{} points exceeds the 1024 limit", a.len())));
    }
    let c = checked_cost(a, b)?;
    let assignment = hungarian(&c);
    let total: f64 = assignment.iter().enumerate().map(|(i, &j)| c[(i, j)]).sum();
    let cost = total / a.len() as f64;
    Ok(TransportResult::from_cost(cost, cost, 1, true))
}

/// Minimum-cost perfect matching on a square cost matrix; returns the column
/// assigned to each row.
pub fn hungarian(cost: &Matrix) -> Vec<usize> {
    let n = cost.rows();
    assert_eq!(n, cost.cols(), "hungarian needs a square matrix");
    // 1-based potentials over rows (u) and columns (v); p[j] = row matched to column j.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1, j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        assignment[p[j] - 1] = j - 1;
    }
    assignment
}
