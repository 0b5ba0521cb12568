//! Smooth constrained nonlinear programming to local optimality.
//!
//! ```txt
//!   min f(z)   s.t.  c(z) = 0,  h(z) <= 0,  lo <= z <= hi
//! ```
//!
//! Augmented Lagrangian outer iterations (Powell–Hestenes–Rockafellar form
//! for the inequalities, bounds folded in as inequalities) around a damped
//! Newton inner minimizer. The inner Hessian is the forward-difference
//! Jacobian of the Lagrangian gradient plus the exact Gauss–Newton penalty
//! term `μ JᵀJ` over equalities and active inequalities, so callers supply
//! first derivatives only.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{dot, norm_inf, Matrix};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NlpError {
    #[error("evaluation failure: {0}")]
    EvaluationFailure(String),
    #[error("no optimal point within {iterations} iterations (KKT residual {kkt_residual:.3e})")]
    MaxIterations { iterations: usize, kkt_residual: f64 },
}

/// A smooth NLP. Only `dimension`, `initial_point` and `objective` are required.
pub trait NlpProblem: Sync {
    fn dimension(&self) -> usize;

    fn initial_point(&self) -> Vec<f64>;

    /// Objective value and gradient.
    fn objective(&self, z: &[f64]) -> (f64, Vec<f64>);

    /// Objective value alone; override when the gradient is expensive.
    fn objective_value(&self, z: &[f64]) -> f64 {
        self.objective(z).0
    }

    fn n_equalities(&self) -> usize {
        0
    }

    /// Equality values and Jacobian (`n_equalities × dimension`).
    fn equalities(&self, z: &[f64]) -> (Vec<f64>, Matrix<f64>) {
        (Vec::new(), Matrix::zeros(0, z.len()))
    }

    fn n_inequalities(&self) -> usize {
        0
    }

    /// Inequality values (feasible when `<= 0`) and Jacobian.
    fn inequalities(&self, z: &[f64]) -> (Vec<f64>, Matrix<f64>) {
        (Vec::new(), Matrix::zeros(0, z.len()))
    }

    /// Variable bounds; infinite entries mean unbounded.
    fn bounds(&self) -> Option<(Vec<f64>, Vec<f64>)> {
        None
    }

    /// Objective Hessian, or an approximation such as Gauss–Newton that is
    /// accurate near the solution. Used by the local KKT refinement in place of
    /// finite differences of the objective gradient.
    fn objective_hessian(&self, _z: &[f64]) -> Option<Matrix<f64>> {
        None
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NlpOptions {
    /// Tolerance on stationarity, primal feasibility and complementarity.
    pub tol: f64,
    /// Cap on the total number of inner Newton iterations.
    pub max_iter: usize,
    /// Compare the objective gradient against central differences at `z₀`.
    pub check_gradients: bool,
}

impl Default for NlpOptions {
    fn default() -> Self {
        Self { tol: 1e-6, max_iter: 600, check_gradients: cfg!(debug_assertions) }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NlpStatus {
    Optimal,
    MaxIter,
    Failure,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NlpSolution {
    pub z: Vec<f64>,
    pub objective_value: f64,
    /// Largest of the scaled stationarity, feasibility and complementarity errors.
    pub kkt_residual: f64,
    /// Primal infeasibility `max(‖c‖_∞, max(h⁺), bound violation)`.
    pub constraint_violation: f64,
    pub status: NlpStatus,
    pub equality_multipliers: Vec<f64>,
    pub inequality_multipliers: Vec<f64>,
    pub iterations: usize,
}

impl NlpSolution {
    pub fn is_optimal(&self) -> bool {
        self.status == NlpStatus::Optimal
    }

    /// Turns a non-optimal status into an error.
    pub fn into_optimal(self) -> Result<Self, NlpError> {
        match self.status {
            NlpStatus::Optimal => Ok(self),
            _ => Err(NlpError::MaxIterations { iterations: self.iterations, kkt_residual: self.kkt_residual }),
        }
    }
}

const GRADIENT_SCALE_TARGET: f64 = 100.0;
const INITIAL_PENALTY: f64 = 10.0;
const MAX_PENALTY: f64 = 1e12;
const MAX_OUTER: usize = 40;
/// Inner iterations per outer step before the multipliers are refreshed anyway.
const MAX_INNER: usize = 100;
const ARMIJO: f64 = 1e-4;
const INITIAL_INNER_TOLERANCE: f64 = 1e-3;
const POLISH_THRESHOLD: f64 = 1e-3;
const POLISH_STEPS: usize = 8;

/// Problem with bounds folded into the inequalities and the objective scaled.
struct Folded<'a, P: ?Sized> {
    inner: &'a P,
    n: usize,
    obj_scale: f64,
    /// (variable, sign, bound): `sign·(z_var − bound) <= 0`.
    bound_rows: Vec<(usize, f64, f64)>,
    n_user_ineq: usize,
}

struct Eval {
    c: Vec<f64>,
    h: Vec<f64>,
}

impl<'a, P: NlpProblem + ?Sized> Folded<'a, P> {
    fn new(inner: &'a P) -> Self {
        let n = inner.dimension();
        let mut bound_rows = Vec::new();
        if let Some((lo, hi)) = inner.bounds() {
            assert_eq!(lo.len(), n);
            assert_eq!(hi.len(), n);
            for i in 0..n {
                if lo[i].is_finite() {
                    bound_rows.push((i, -1.0, lo[i]));
                }
                if hi[i].is_finite() {
                    bound_rows.push((i, 1.0, hi[i]));
                }
            }
        }
        Self { inner, n, obj_scale: 1.0, bound_rows, n_user_ineq: inner.n_inequalities() }
    }

    fn n_ineq(&self) -> usize {
        self.n_user_ineq + self.bound_rows.len()
    }

    fn objective_value(&self, z: &[f64]) -> f64 {
        self.obj_scale * self.inner.objective_value(z)
    }

    fn objective(&self, z: &[f64]) -> (f64, Vec<f64>) {
        let (f, mut g) = self.inner.objective(z);
        g.iter_mut().for_each(|v| *v *= self.obj_scale);
        (self.obj_scale * f, g)
    }

    fn constraint_values(&self, z: &[f64]) -> Eval {
        let (c, _) = self.inner.equalities(z);
        let (mut h, _) = self.inner.inequalities(z);
        h.extend(self.bound_rows.iter().map(|&(i, s, b)| s * (z[i] - b)));
        Eval { c, h }
    }

    fn constraints(&self, z: &[f64]) -> (Vec<f64>, Matrix<f64>, Vec<f64>, Matrix<f64>) {
        let (c, jc) = self.inner.equalities(z);
        let (hu, jhu) = self.inner.inequalities(z);
        let mut h = hu;
        let mut jh = Matrix::zeros(self.n_ineq(), self.n);
        jh.set_block(0, 0, &jhu);
        for (r, &(i, s, b)) in self.bound_rows.iter().enumerate() {
            h.push(s * (z[i] - b));
            jh[(self.n_user_ineq + r, i)] = s;
        }
        (c, jc, h, jh)
    }
}

struct Multipliers {
    lambda: Vec<f64>,
    nu: Vec<f64>,
    mu: f64,
}

impl Multipliers {
    fn merit(&self, f: f64, e: &Eval) -> f64 {
        let mut v = f;
        for (l, c) in self.lambda.iter().zip(&e.c) {
            v += l * c + 0.5 * self.mu * c * c;
        }
        for (n, h) in self.nu.iter().zip(&e.h) {
            let t = (n + self.mu * h).max(0.0);
            v += (t * t - n * n) / (2.0 * self.mu);
        }
        v
    }
}

fn all_finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// Gradient of the Lagrangian with frozen weights: `∇f + Jcᵀw + Jhᵀq`.
fn lagrangian_gradient<P: NlpProblem + ?Sized>(fp: &Folded<P>, z: &[f64], w: &[f64], q: &[f64]) -> Vec<f64> {
    let (_, mut g) = fp.objective(z);
    let (_, jc, _, jh) = fp.constraints(z);
    for (gi, v) in g.iter_mut().zip(jc.tr_matvec(w)) {
        *gi += v;
    }
    for (gi, v) in g.iter_mut().zip(jh.tr_matvec(q)) {
        *gi += v;
    }
    g
}

/// `Jcᵀw + Jhᵀq`.
fn constraint_gradient<P: NlpProblem + ?Sized>(fp: &Folded<P>, z: &[f64], w: &[f64], q: &[f64]) -> Vec<f64> {
    let (_, jc, _, jh) = fp.constraints(z);
    jc.tr_matvec(w).iter().zip(jh.tr_matvec(q)).map(|(a, b)| a + b).collect()
}

/// Hessian of the Lagrangian with frozen weights. Forward differences of the
/// gradient, or of the constraint part alone when `supplied` and the
/// objective provides its own.
fn lagrangian_hessian<P: NlpProblem + ?Sized>(
    fp: &Folded<P>,
    z: &[f64],
    w: &[f64],
    q: &[f64],
    supplied: bool,
) -> Matrix<f64> {
    let n = fp.n;
    let exact = if supplied { fp.inner.objective_hessian(z) } else { None };
    let eval = |x: &[f64]| match exact {
        Some(_) => constraint_gradient(fp, x, w, q),
        None => lagrangian_gradient(fp, x, w, q),
    };
    let base = eval(z);
    let mut hess = Matrix::zeros(n, n);
    for j in 0..n {
        let step = 1e-7 * z[j].abs().max(1.0);
        let mut zp = z.to_vec();
        zp[j] += step;
        let gp = eval(&zp);
        for i in 0..n {
            hess[(i, j)] = (gp[i] - base[i]) / step;
        }
    }
    if let Some(h) = exact {
        assert_eq!(h.shape(), (n, n), "objective Hessian has the wrong shape");
        hess = hess.add(&h.scale(fp.obj_scale));
    }
    hess.symmetrize();
    hess
}

struct InnerState {
    z: Vec<f64>,
    grad: Vec<f64>,
    iterations: usize,
}

fn minimize_inner<P: NlpProblem + ?Sized>(
    fp: &Folded<P>,
    mult: &Multipliers,
    z0: Vec<f64>,
    omega: f64,
    budget: usize,
) -> Result<InnerState, NlpError> {
    let mut z = z0;
    let mut iterations = 0;
    loop {
        let (f, gf) = fp.objective(&z);
        let (c, jc, h, jh) = fp.constraints(&z);
        if !f.is_finite() || !all_finite(&gf) || !all_finite(&c) || !all_finite(&h) {
            return Err(NlpError::EvaluationFailure(format!("non-finite evaluation at iterate {iterations}")));
        }
        let w: Vec<f64> = mult.lambda.iter().zip(&c).map(|(l, ci)| l + mult.mu * ci).collect();
        let q: Vec<f64> = mult.nu.iter().zip(&h).map(|(nu, hi)| (nu + mult.mu * hi).max(0.0)).collect();
        let mut grad = gf.clone();
        for (gi, v) in grad.iter_mut().zip(jc.tr_matvec(&w)) {
            *gi += v;
        }
        for (gi, v) in grad.iter_mut().zip(jh.tr_matvec(&q)) {
            *gi += v;
        }
        if norm_inf(&grad) <= omega || iterations >= budget {
            return Ok(InnerState { z, grad, iterations });
        }

        let mut hess = lagrangian_hessian(fp, &z, &w, &q, false);
        // Penalty curvature of equalities and active inequalities.
        if !c.is_empty() {
            hess = hess.add(&jc.weighted_gram(&vec![mult.mu; c.len()]));
        }
        let weights_h: Vec<f64> = q.iter().map(|&qi| if qi > 0.0 { mult.mu } else { 0.0 }).collect();
        if weights_h.iter().any(|&v| v > 0.0) {
            hess = hess.add(&jh.weighted_gram(&weights_h));
        }

        let dir = newton_direction(&hess, &grad);
        let slope = dot(&grad, &dir);
        let phi0 = mult.merit(f, &Eval { c, h });
        let mut alpha = 1.0;
        let mut moved = false;
        for _ in 0..60 {
            let trial: Vec<f64> = z.iter().zip(&dir).map(|(zi, di)| zi + alpha * di).collect();
            let ft = fp.objective_value(&trial);
            if ft.is_finite() {
                let et = fp.constraint_values(&trial);
                if all_finite(&et.c) && all_finite(&et.h) {
                    let phit = mult.merit(ft, &et);
                    // Allow for rounding in the merit once the predicted decrease is tiny.
                    let slack = 1e-13 * phi0.abs().max(1.0);
                    if phit <= phi0 + ARMIJO * alpha * slope + slack {
                        z = trial;
                        moved = true;
                        break;
                    }
                }
            }
            alpha *= 0.5;
        }
        iterations += 1;
        if !moved {
            // No decrease possible at machine precision: the iterate is as good as it gets.
            return Ok(InnerState { z, grad, iterations });
        }
    }
}

/// Solves `H d = −g` with `H` shifted until positive definite.
fn newton_direction(hess: &Matrix<f64>, grad: &[f64]) -> Vec<f64> {
    let n = grad.len();
    let diag_max = (0..n).fold(0.0_f64, |m, i| m.max(hess[(i, i)].abs()));
    let mut shift = 0.0;
    let base_shift = (diag_max * 1e-10).max(1e-12);
    for _ in 0..40 {
        let mut h = hess.clone();
        for i in 0..n {
            h[(i, i)] += shift;
        }
        if let Some(ch) = h.cholesky() {
            let neg: Vec<f64> = grad.iter().map(|g| -g).collect();
            let d = ch.solve(&neg);
            if all_finite(&d) && dot(&d, grad) < 0.0 {
                return d;
            }
        }
        shift = if shift == 0.0 { base_shift } else { shift * 10.0 };
    }
    grad.iter().map(|g| -g).collect()
}

struct Candidate {
    z: Vec<f64>,
    lambda: Vec<f64>,
    nu: Vec<f64>,
    kkt: f64,
    violation: f64,
}

struct Polished {
    z: Vec<f64>,
    lambda: Vec<f64>,
    nu: Vec<f64>,
    kkt: f64,
    violation: f64,
    iterations: usize,
}

/// Stationarity, violation and complementarity of `(z, λ, ν)`.
fn kkt_measures<P: NlpProblem + ?Sized>(fp: &Folded<P>, z: &[f64], lambda: &[f64], nu: &[f64]) -> Option<(f64, f64, f64)> {
    let g = lagrangian_gradient(fp, z, lambda, nu);
    let e = fp.constraint_values(z);
    if !all_finite(&g) || !all_finite(&e.c) || !all_finite(&e.h) {
        return None;
    }
    let violation = norm_inf(&e.c).max(e.h.iter().fold(0.0_f64, |m, &v| m.max(v)));
    let complementarity = nu.iter().zip(&e.h).fold(0.0_f64, |m, (n, h)| m.max(n.min(-h).abs()));
    Some((norm_inf(&g), violation, complementarity))
}

/// Local Newton iterations on the KKT system of the equalities and the
/// inequalities the multipliers flag as active. Returns the best point seen
/// when it improves on the starting KKT residual.
fn polish<P: NlpProblem + ?Sized>(fp: &Folded<P>, z0: &[f64], mult: &Multipliers, tol: f64) -> Option<Polished> {
    let n = fp.n;
    let active: Vec<usize> = (0..mult.nu.len()).filter(|&i| mult.nu[i] > 0.0).collect();
    let m_eq = mult.lambda.len();
    let m = m_eq + active.len();
    if m > n {
        return None;
    }
    let (s0, v0, c0) = kkt_measures(fp, z0, &mult.lambda, &mult.nu)?;
    let mut best = Polished {
        z: z0.to_vec(),
        lambda: mult.lambda.clone(),
        nu: mult.nu.clone(),
        kkt: s0.max(v0).max(c0),
        violation: v0,
        iterations: 0,
    };
    let start_kkt = best.kkt;
    let mut prev = start_kkt;
    let (mut z, mut lambda, mut nu) = (best.z.clone(), best.lambda.clone(), best.nu.clone());
    for it in 1..=POLISH_STEPS {
        let grad = lagrangian_gradient(fp, &z, &lambda, &nu);
        let (c, jc, h, jh) = fp.constraints(&z);
        let hess = lagrangian_hessian(fp, &z, &lambda, &nu, true);
        let mut kkt = Matrix::zeros(n + m, n + m);
        kkt.set_block(0, 0, &hess);
        let mut rhs: Vec<f64> = grad.iter().map(|g| -g).collect();
        for r in 0..m_eq {
            for j in 0..n {
                kkt[(n + r, j)] = jc[(r, j)];
                kkt[(j, n + r)] = jc[(r, j)];
            }
            rhs.push(-c[r]);
        }
        for (k, &a) in active.iter().enumerate() {
            for j in 0..n {
                kkt[(n + m_eq + k, j)] = jh[(a, j)];
                kkt[(j, n + m_eq + k)] = jh[(a, j)];
            }
            rhs.push(-h[a]);
        }
        let step = kkt.lu()?.solve(&rhs);
        if !all_finite(&step) {
            break;
        }
        z.iter_mut().zip(&step[..n]).for_each(|(zi, d)| *zi += d);
        lambda.iter_mut().zip(&step[n..n + m_eq]).for_each(|(l, d)| *l += d);
        for (k, &a) in active.iter().enumerate() {
            nu[a] += step[n + m_eq + k];
        }
        let Some((s, v, cm)) = kkt_measures(fp, &z, &lambda, &nu) else { break };
        let r = s.max(v).max(cm);
        if r >= best.kkt {
            break;
        }
        best = Polished { z: z.clone(), lambda: lambda.clone(), nu: nu.clone(), kkt: r, violation: v, iterations: it };
        // Keep going past `tol` while the residual still contracts quickly.
        if r <= tol && r > 0.1 * prev {
            break;
        }
        prev = r;
    }
    (best.kkt < start_kkt).then_some(best)
}

fn check_gradient<P: NlpProblem + ?Sized>(problem: &P, z: &[f64]) -> Result<(), NlpError> {
    let (_, g) = problem.objective(z);
    for j in 0..z.len() {
        let h = 1e-6 * z[j].abs().max(1.0);
        let mut zp = z.to_vec();
        let mut zm = z.to_vec();
        zp[j] += h;
        zm[j] -= h;
        let fd = (problem.objective_value(&zp) - problem.objective_value(&zm)) / (2.0 * h);
        let scale = g[j].abs().max(fd.abs()).max(1.0);
        if !fd.is_finite() || (fd - g[j]).abs() > 1e-4 * scale {
            return Err(NlpError::EvaluationFailure(format!(
                "objective gradient component {j} is {} but finite differences give {fd}",
                g[j]
            )));
        }
    }
    Ok(())
}

/// Solves `problem` from its initial point to a local KKT point.
pub fn solve<P: NlpProblem + ?Sized>(problem: &P, options: &NlpOptions) -> Result<NlpSolution, NlpError> {
    let n = problem.dimension();
    let z0 = problem.initial_point();
    if z0.len() != n {
        return Err(NlpError::EvaluationFailure(format!("initial point has {} entries, expected {n}", z0.len())));
    }
    if !all_finite(&z0) {
        return Err(NlpError::EvaluationFailure("initial point is not finite".into()));
    }
    let (f0, g0) = problem.objective(&z0);
    if !f0.is_finite() || !all_finite(&g0) || g0.len() != n {
        return Err(NlpError::EvaluationFailure("objective is not finite at the initial point".into()));
    }
    let (c0, jc0) = problem.equalities(&z0);
    let (h0, jh0) = problem.inequalities(&z0);
    if c0.len() != problem.n_equalities()
        || jc0.shape() != (c0.len(), n)
        || h0.len() != problem.n_inequalities()
        || jh0.shape() != (h0.len(), n)
    {
        return Err(NlpError::EvaluationFailure("constraint callables returned inconsistent dimensions".into()));
    }
    if options.check_gradients {
        check_gradient(problem, &z0)?;
    }

    let mut fp = Folded::new(problem);
    fp.obj_scale = (GRADIENT_SCALE_TARGET / norm_inf(&g0).max(f64::MIN_POSITIVE)).min(1.0);
    let mut mult = Multipliers { lambda: vec![0.0; c0.len()], nu: vec![0.0; fp.n_ineq()], mu: INITIAL_PENALTY };
    let omega_final = 0.1 * options.tol;
    let mut omega = omega_final.max(INITIAL_INNER_TOLERANCE);

    let mut z = z0;
    let mut total_iter = 0;
    let mut prev_violation = f64::INFINITY;
    let mut best: Option<Candidate> = None;
    for _ in 0..MAX_OUTER {
        let budget = options.max_iter.saturating_sub(total_iter).min(MAX_INNER);
        let inner = minimize_inner(&fp, &mult, z, omega, budget)?;
        total_iter += inner.iterations;
        z = inner.z;
        let e = fp.constraint_values(&z);
        let violation = norm_inf(&e.c).max(e.h.iter().fold(0.0_f64, |m, &v| m.max(v)));
        // First-order multiplier update.
        for (l, c) in mult.lambda.iter_mut().zip(&e.c) {
            *l += mult.mu * c;
        }
        for (nu, h) in mult.nu.iter_mut().zip(&e.h) {
            *nu = (*nu + mult.mu * h).max(0.0);
        }
        let stationarity = norm_inf(&inner.grad);
        let complementarity = mult.nu.iter().zip(&e.h).fold(0.0_f64, |m, (nu, h)| m.max(nu.min(-h).abs()));
        let kkt = stationarity.max(violation).max(complementarity);
        log::trace!(
            "outer: inner iters {} (total {total_iter}), mu {:.1e}, viol {violation:.2e}, stat {stationarity:.2e}, compl {complementarity:.2e}",
            inner.iterations,
            mult.mu
        );
        if best.as_ref().map_or(true, |b| kkt < b.kkt) {
            best = Some(Candidate { z: z.clone(), lambda: mult.lambda.clone(), nu: mult.nu.clone(), kkt, violation });
        }
        if violation <= options.tol && stationarity <= options.tol && complementarity <= options.tol {
            if let Some(p) = polish(&fp, &z, &mult, options.tol) {
                total_iter += p.iterations;
                return Ok(finish(problem, &fp, &p.lambda, &p.nu, p.z, p.kkt, p.violation, NlpStatus::Optimal, total_iter));
            }
            return Ok(finish(problem, &fp, &mult.lambda, &mult.nu, z, kkt, violation, NlpStatus::Optimal, total_iter));
        }
        if kkt <= POLISH_THRESHOLD {
            if let Some(p) = polish(&fp, &z, &mult, options.tol) {
                total_iter += p.iterations;
                if p.kkt <= options.tol {
                    log::trace!("polish converged in {} steps (KKT {:.2e})", p.iterations, p.kkt);
                    return Ok(finish(problem, &fp, &p.lambda, &p.nu, p.z, p.kkt, p.violation, NlpStatus::Optimal, total_iter));
                }
            }
        }
        if total_iter >= options.max_iter {
            break;
        }
        if violation > options.tol && (violation > 0.25 * prev_violation || stationarity <= omega) {
            mult.mu = (mult.mu * 10.0).min(MAX_PENALTY);
        }
        prev_violation = violation;
        omega = (omega * 0.1).max(omega_final);
    }
    let b = best.expect("at least one outer iteration ran");
    Ok(finish(problem, &fp, &b.lambda, &b.nu, b.z, b.kkt, b.violation, NlpStatus::MaxIter, total_iter))
}

#[allow(clippy::too_many_arguments)]
fn finish<P: NlpProblem + ?Sized>(
    problem: &P,
    fp: &Folded<P>,
    lambda: &[f64],
    nu: &[f64],
    z: Vec<f64>,
    kkt: f64,
    violation: f64,
    status: NlpStatus,
    iterations: usize,
) -> NlpSolution {
    let scale = fp.obj_scale;
    NlpSolution {
        objective_value: problem.objective_value(&z),
        z,
        kkt_residual: kkt,
        constraint_violation: violation,
        status,
        equality_multipliers: lambda.iter().map(|l| l / scale).collect(),
        inequality_multipliers: nu[..fp.n_user_ineq].iter().map(|v| v / scale).collect(),
        iterations,
    }
}
