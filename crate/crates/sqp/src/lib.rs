//! Dense SQP solver for smooth nonlinear programs.
//!
//! Problems have the form
//!
//! ```text
//!   min  f(z)
//!   s.t. c_e(z)  = 0
//!        c_i(z) >= 0
//!        l <= z <= u
//! ```
//!
//! The algorithm is sequential quadratic programming with a damped BFGS
//! Hessian and an l1 merit line search. Each QP subproblem eliminates the
//! equality constraints through a null-space basis and handles inequality
//! and box rows with a slack-based interior-point iteration (see [`qp`]).
//! All linear algebra is dense; the solver is deterministic: identical
//! inputs and options produce an identical iterate sequence.

use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

mod qp;
mod qr;

pub use qp::QpError;

/// Problem callbacks. All evaluators must be deterministic and return
/// outputs of the declared dimensions.
pub trait Nlp {
    /// Number of decision variables.
    fn dim(&self) -> usize;
    /// Number of equality constraints `c_e(z) = 0`.
    fn num_eq(&self) -> usize {
        0
    }
    /// Number of inequality constraints `c_i(z) >= 0`.
    fn num_ineq(&self) -> usize {
        0
    }
    fn objective(&self, z: &DVector<f64>) -> f64;
    fn gradient(&self, z: &DVector<f64>) -> DVector<f64>;
    fn eq_residual(&self, _z: &DVector<f64>) -> DVector<f64> {
        DVector::zeros(0)
    }
    fn eq_jacobian(&self, _z: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::zeros(0, self.dim())
    }
    fn ineq_residual(&self, _z: &DVector<f64>) -> DVector<f64> {
        DVector::zeros(0)
    }
    fn ineq_jacobian(&self, _z: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::zeros(0, self.dim())
    }
    /// Box bounds; entries may be infinite. The default is unbounded.
    fn bounds(&self) -> (DVector<f64>, DVector<f64>) {
        let n = self.dim();
        (
            DVector::from_element(n, f64::NEG_INFINITY),
            DVector::from_element(n, f64::INFINITY),
        )
    }
}

#[derive(Debug, Clone)]
pub struct Options {
    pub max_iterations: usize,
    /// Tolerance on stationarity and complementarity residuals.
    pub kkt_tolerance: f64,
    /// Tolerance on primal (equality, inequality, box) violation.
    pub constraint_tolerance: f64,
    /// Optional diagonal seed for the quasi-Newton Hessian; defaults to 1.
    pub init_hessian_diag: Option<Vec<f64>>,
    /// Apply damped BFGS updates to the Hessian model. When disabled the
    /// model stays at the (seeded) diagonal, which is the right choice
    /// when the caller seeds the exact Hessian of a quadratic objective.
    pub hessian_updates: bool,
    /// Record per-iteration merit values in the report.
    pub log_iterations: bool,
}

impl Default for Options {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            kkt_tolerance: 1e-6,
            constraint_tolerance: 1e-8,
            init_hessian_diag: None,
            hessian_updates: true,
            log_iterations: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    /// KKT residuals below tolerance.
    Optimal,
    /// Iteration limit reached at a feasible (within 10x tolerance) point.
    MaxIterations,
    /// Could not restore feasibility; the returned point is best-effort.
    Infeasible,
}

/// KKT residual norms recomputed at the returned point.
#[derive(Debug, Clone, Copy)]
pub struct KktResiduals {
    pub stationarity: f64,
    pub eq_feasibility: f64,
    pub ineq_feasibility: f64,
    pub complementarity: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct IterationRecord {
    pub merit_before: f64,
    pub merit_after: f64,
    pub penalty: f64,
    pub step_length: f64,
}

#[derive(Debug, Clone)]
pub struct Report {
    pub status: Status,
    pub iterations: usize,
    pub kkt: KktResiduals,
    pub wall_time: Duration,
    /// Present when `Options::log_iterations` is set.
    pub iteration_log: Vec<IterationRecord>,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("evaluator returned a non-finite value in {0}")]
    NonFinite(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("degenerate equality constraints in the QP subproblem")]
    DegenerateConstraints,
}

struct Evaluation {
    objective: f64,
    gradient: DVector<f64>,
    eq: DVector<f64>,
    eq_jac: DMatrix<f64>,
    ineq: DVector<f64>,
    ineq_jac: DMatrix<f64>,
}

fn check_finite_vec(v: &DVector<f64>, what: &str) -> Result<(), Error> {
    for (i, x) in v.iter().enumerate() {
        if !x.is_finite() {
            return Err(Error::NonFinite(format!("{what} (entry {i})")));
        }
    }
    Ok(())
}

fn check_finite_mat(m: &DMatrix<f64>, what: &str) -> Result<(), Error> {
    for (i, x) in m.iter().enumerate() {
        if !x.is_finite() {
            return Err(Error::NonFinite(format!(
                "{what} (entry {}, {})",
                i % m.nrows(),
                i / m.nrows()
            )));
        }
    }
    Ok(())
}

fn evaluate(nlp: &dyn Nlp, z: &DVector<f64>) -> Result<Evaluation, Error> {
    let objective = nlp.objective(z);
    if !objective.is_finite() {
        return Err(Error::NonFinite("objective".into()));
    }
    let gradient = nlp.gradient(z);
    if gradient.len() != nlp.dim() {
        return Err(Error::Dimension(format!(
            "gradient has length {}, expected {}",
            gradient.len(),
            nlp.dim()
        )));
    }
    check_finite_vec(&gradient, "objective gradient")?;
    let eq = nlp.eq_residual(z);
    if eq.len() != nlp.num_eq() {
        return Err(Error::Dimension(format!(
            "equality residual has length {}, expected {}",
            eq.len(),
            nlp.num_eq()
        )));
    }
    check_finite_vec(&eq, "equality residual")?;
    let eq_jac = nlp.eq_jacobian(z);
    if eq_jac.shape() != (nlp.num_eq(), nlp.dim()) {
        return Err(Error::Dimension("equality Jacobian shape".into()));
    }
    check_finite_mat(&eq_jac, "equality Jacobian")?;
    let ineq = nlp.ineq_residual(z);
    if ineq.len() != nlp.num_ineq() {
        return Err(Error::Dimension(format!(
            "inequality residual has length {}, expected {}",
            ineq.len(),
            nlp.num_ineq()
        )));
    }
    check_finite_vec(&ineq, "inequality residual")?;
    let ineq_jac = nlp.ineq_jacobian(z);
    if ineq_jac.shape() != (nlp.num_ineq(), nlp.dim()) {
        return Err(Error::Dimension("inequality Jacobian shape".into()));
    }
    check_finite_mat(&ineq_jac, "inequality Jacobian")?;
    Ok(Evaluation {
        objective,
        gradient,
        eq,
        eq_jac,
        ineq,
        ineq_jac,
    })
}

/// Indices of finite lower/upper bounds.
struct BoundRows {
    lower: Vec<usize>,
    upper: Vec<usize>,
}

impl BoundRows {
    fn new(lower: &DVector<f64>, upper: &DVector<f64>) -> Self {
        Self {
            lower: (0..lower.len()).filter(|&i| lower[i].is_finite()).collect(),
            upper: (0..upper.len()).filter(|&i| upper[i].is_finite()).collect(),
        }
    }
}

/// Stationarity and complementarity with multipliers fit by least squares
/// on the (near-)active constraint set. QP multipliers describe the local
/// quadratic model, not the point itself, so near convergence the
/// point-wise fit gives the sharper certificate. The normal equations are
/// Tikhonov-regularized: redundant active sets (e.g. all four wheel rows
/// of a saturated base) keep the fit well-posed.
fn refined_kkt(
    eval: &Evaluation,
    z: &DVector<f64>,
    lower: &DVector<f64>,
    upper: &DVector<f64>,
    bound_rows: &BoundRows,
) -> (f64, f64) {
    let n = z.len();
    let m_e = eval.eq.len();
    let m_i = eval.ineq.len();

    let act_tol = 1e-7;
    let active_gen: Vec<usize> = (0..m_i).filter(|&r| eval.ineq[r] <= act_tol).collect();
    let active_lo: Vec<usize> = bound_rows
        .lower
        .iter()
        .copied()
        .filter(|&i| z[i] - lower[i] <= act_tol * (1.0 + lower[i].abs()))
        .collect();
    let active_hi: Vec<usize> = bound_rows
        .upper
        .iter()
        .copied()
        .filter(|&i| upper[i] - z[i] <= act_tol * (1.0 + upper[i].abs()))
        .collect();

    let k = m_e + active_gen.len() + active_lo.len() + active_hi.len();
    if k == 0 {
        return (eval.gradient.amax(), 0.0);
    }

    // Columns: equality rows, active general rows, active lower (+e_i),
    // active upper (-e_i).
    let mut m = DMatrix::zeros(n, k);
    for r in 0..m_e {
        for c in 0..n {
            m[(c, r)] = eval.eq_jac[(r, c)];
        }
    }
    for (j, &r) in active_gen.iter().enumerate() {
        for c in 0..n {
            m[(c, m_e + j)] = eval.ineq_jac[(r, c)];
        }
    }
    for (j, &i) in active_lo.iter().enumerate() {
        m[(i, m_e + active_gen.len() + j)] = 1.0;
    }
    for (j, &i) in active_hi.iter().enumerate() {
        m[(i, m_e + active_gen.len() + active_lo.len() + j)] = -1.0;
    }

    let mut normal = m.transpose() * &m;
    let reg = 1e-12 * normal.diagonal().amax().max(1.0);
    for i in 0..k {
        normal[(i, i)] += reg;
    }
    let rhs = m.transpose() * &eval.gradient;
    let mut x = match normal.cholesky() {
        Some(chol) => chol.solve(&rhs),
        None => return (eval.gradient.amax(), 0.0),
    };
    // Inequality multipliers must be nonnegative.
    for j in m_e..k {
        if x[j] < 0.0 {
            x[j] = 0.0;
        }
    }
    let residual = &eval.gradient - &m * &x;
    let mut compl = 0.0_f64;
    for (j, &r) in active_gen.iter().enumerate() {
        compl = compl.max((x[m_e + j] * eval.ineq[r]).abs());
    }
    for (j, &i) in active_lo.iter().enumerate() {
        compl = compl.max((x[m_e + active_gen.len() + j] * (z[i] - lower[i])).abs());
    }
    for (j, &i) in active_hi.iter().enumerate() {
        compl = compl.max((x[m_e + active_gen.len() + active_lo.len() + j] * (upper[i] - z[i])).abs());
    }
    (residual.amax(), compl)
}

/// Merit value: f + penalty * (|c_e|_1 + |min(c_i, 0)|_1).
fn merit(objective: f64, eq: &DVector<f64>, ineq: &DVector<f64>, penalty: f64) -> f64 {
    let eq_l1: f64 = eq.iter().map(|v| v.abs()).sum();
    let ineq_l1: f64 = ineq.iter().map(|v| (-v).max(0.0)).sum();
    objective + penalty * (eq_l1 + ineq_l1)
}

fn constraint_violation_l1(eq: &DVector<f64>, ineq: &DVector<f64>) -> f64 {
    eq.iter().map(|v| v.abs()).sum::<f64>() + ineq.iter().map(|v| (-v).max(0.0)).sum::<f64>()
}

pub fn solve(nlp: &dyn Nlp, z0: &DVector<f64>, opts: &Options) -> Result<(DVector<f64>, Report), Error> {
    let start = Instant::now();
    let n = nlp.dim();
    if z0.len() != n {
        return Err(Error::Dimension(format!(
            "initial point has length {}, expected {n}",
            z0.len()
        )));
    }
    let (lower, upper) = nlp.bounds();
    if lower.len() != n || upper.len() != n {
        return Err(Error::Dimension("bounds length".into()));
    }
    let bound_rows = BoundRows::new(&lower, &upper);

    // Keep all iterates inside the box; QP steps then stay inside by
    // convexity of the box for any step fraction.
    let mut z = z0.clone();
    for i in 0..n {
        z[i] = z[i].clamp(lower[i], upper[i]);
    }

    let mut seed = DMatrix::identity(n, n);
    if let Some(diag) = &opts.init_hessian_diag {
        if diag.len() != n {
            return Err(Error::Dimension("init_hessian_diag length".into()));
        }
        for i in 0..n {
            seed[(i, i)] = diag[i].max(1e-8);
        }
    }
    let mut hessian = seed.clone();

    let mut eval = evaluate(nlp, &z)?;
    let mut penalty = 1.0_f64;
    let mut damping = 0.0_f64;
    let mut iteration_log = Vec::new();
    let mut iterations = 0;
    let mut last_multipliers: Option<(DVector<f64>, DVector<f64>)> = None;
    let mut stalls = 0;

    while iterations < opts.max_iterations {
        // Assemble inequality rows for the QP: general rows then finite
        // bound rows (lower, then upper).
        let m_i = eval.ineq.len();
        let m_rows = m_i + bound_rows.lower.len() + bound_rows.upper.len();
        let mut g_rows = DMatrix::zeros(m_rows, n);
        let mut g_rhs = DVector::zeros(m_rows);
        let mut row_values = DVector::zeros(m_rows);
        g_rows.view_mut((0, 0), (m_i, n)).copy_from(&eval.ineq_jac);
        for r in 0..m_i {
            g_rhs[r] = -eval.ineq[r];
            row_values[r] = eval.ineq[r];
        }
        for (k, &i) in bound_rows.lower.iter().enumerate() {
            let r = m_i + k;
            g_rows[(r, i)] = 1.0;
            g_rhs[r] = lower[i] - z[i];
            row_values[r] = z[i] - lower[i];
        }
        for (k, &i) in bound_rows.upper.iter().enumerate() {
            let r = m_i + bound_rows.lower.len() + k;
            g_rows[(r, i)] = -1.0;
            g_rhs[r] = z[i] - upper[i];
            row_values[r] = upper[i] - z[i];
        }

        // QP subproblem (with Levenberg escalation on failure).
        let qp_t0 = Instant::now();
        let mut qp_solution = None;
        for attempt in 0..4 {
            let mut h_work = hessian.clone();
            if damping > 0.0 {
                for i in 0..n {
                    h_work[(i, i)] += damping;
                }
            }
            let eq_rhs = -&eval.eq;
            let data = qp::QpData {
                hessian: &h_work,
                gradient: &eval.gradient,
                eq_matrix: if eval.eq.len() > 0 { Some(&eval.eq_jac) } else { None },
                eq_rhs: if eval.eq.len() > 0 { Some(&eq_rhs) } else { None },
                ineq_matrix: &g_rows,
                ineq_rhs: &g_rhs,
            };
            match qp::solve_qp(&data) {
                Ok(sol) => {
                    qp_solution = Some(sol);
                    break;
                }
                Err(qp::QpError::DegenerateEqualities) => return Err(Error::DegenerateConstraints),
                Err(qp::QpError::Stalled { .. }) => {
                    let scale = hessian.diagonal().amax().max(1.0);
                    damping = if damping == 0.0 { 1e-6 * scale } else { damping * 100.0 };
                    if attempt == 3 {
                        // Give up on this subproblem; report best effort.
                        let report = finish(
                            nlp,
                            &z,
                            last_multipliers.as_ref(),
                            &lower,
                            &upper,
                            &bound_rows,
                            iterations,
                            opts,
                            start,
                            iteration_log.clone(),
                        )?;
                        return Ok((z, report));
                    }
                }
            }
        }
        let qp_solution = qp_solution.expect("qp solution or early return");
        if std::env::var("SQP_PHASE").is_ok() {
            eprintln!("    qp took {:.2} ms", qp_t0.elapsed().as_secs_f64() * 1e3);
        }
        let step = qp_solution.step;
        let lambda = qp_solution.eq_multipliers;
        let mu_rows = qp_solution.ineq_multipliers;

        // Cheap stationarity proxy with QP multipliers (exactly ||B d|| at
        // the QP optimum); the refined check runs only near convergence.
        let mut stationarity_vec = eval.gradient.clone();
        if eval.eq.len() > 0 {
            stationarity_vec -= eval.eq_jac.transpose() * &lambda;
        }
        if m_rows > 0 {
            stationarity_vec -= g_rows.transpose() * &mu_rows;
        }
        let stationarity_proxy = stationarity_vec.amax();
        let eq_feas = if eval.eq.len() > 0 { eval.eq.amax() } else { 0.0 };
        let ineq_feas = (0..m_rows)
            .map(|r| (-row_values[r]).max(0.0))
            .fold(0.0, f64::max);

        if std::env::var("SQP_TRACE").is_ok() {
            eprintln!(
                "it {iterations}: f {:.6e} stat_proxy {:.3e} |d| {:.3e} eq {:.2e} ineq {:.2e} pen {penalty:.1e} damp {damping:.1e}",
                eval.objective, stationarity_proxy, step.amax(), eq_feas, ineq_feas
            );
        }
        last_multipliers = Some((lambda.clone(), mu_rows.clone()));

        if eq_feas <= opts.constraint_tolerance && ineq_feas <= opts.constraint_tolerance
            && stationarity_proxy <= 100.0 * opts.kkt_tolerance
        {
            // The QP multipliers themselves are a valid certificate when
            // the model step is tiny; otherwise fit multipliers at the
            // point itself.
            let compl_proxy = (0..m_rows)
                .map(|r| (mu_rows[r] * row_values[r]).abs())
                .fold(0.0, f64::max);
            let (stationarity, complementarity) =
                if stationarity_proxy <= opts.kkt_tolerance && compl_proxy <= opts.kkt_tolerance {
                    (stationarity_proxy, compl_proxy)
                } else {
                    refined_kkt(&eval, &z, &lower, &upper, &bound_rows)
                };
            if stationarity <= opts.kkt_tolerance && complementarity <= opts.kkt_tolerance {
                let report = finish(
                    nlp,
                    &z,
                    last_multipliers.as_ref(),
                    &lower,
                    &upper,
                    &bound_rows,
                    iterations,
                    opts,
                    start,
                    iteration_log,
                )?;
                return Ok((z, report));
            }
        }

        iterations += 1;

        // Penalty parameter large enough to make d a descent direction.
        let mult_norm = lambda.amax().max(mu_rows.amax());
        penalty = penalty.max(1.1 * mult_norm + 1e-4);

        let merit_before = merit(eval.objective, &eval.eq, &eval.ineq, penalty);
        let violation = constraint_violation_l1(&eval.eq, &eval.ineq);
        let directional = eval.gradient.dot(&step) - penalty * violation;

        // Armijo backtracking on the l1 merit function.
        let mut alpha = 1.0;
        let mut accepted = None;
        let mut log_step = false;
        if directional < 0.0 {
            for _ in 0..30 {
                let trial = &z + alpha * &step;
                let t_obj = nlp.objective(&trial);
                let t_eq = nlp.eq_residual(&trial);
                let t_ineq = nlp.ineq_residual(&trial);
                if t_obj.is_finite() {
                    let m_trial = merit(t_obj, &t_eq, &t_ineq, penalty);
                    if m_trial <= merit_before + 1e-4 * alpha * directional {
                        accepted = Some((trial, m_trial));
                        log_step = true;
                        break;
                    }
                }
                alpha *= 0.5;
            }
        }
        if accepted.is_none() && step.amax() <= 1e-6 * (1.0 + z.amax()) {
            // Quadratic tail: near the solution the merit differences sit
            // at rounding level and Armijo stops making progress. Accept
            // the full polished step as long as the merit is
            // quasi-monotone.
            alpha = 1.0;
            let trial = &z + &step;
            let t_obj = nlp.objective(&trial);
            let t_eq = nlp.eq_residual(&trial);
            let t_ineq = nlp.ineq_residual(&trial);
            if t_obj.is_finite() {
                let m_trial = merit(t_obj, &t_eq, &t_ineq, penalty);
                if m_trial <= merit_before + 1e-9 * (1.0 + merit_before.abs()) {
                    accepted = Some((trial, m_trial));
                }
            }
        }

        match accepted {
            Some((z_next, merit_after)) => {
                stalls = 0;
                // Levenberg-style damping adaptation: relax on full steps,
                // tighten when the line search has to back off hard. A
                // damped model turns the QP into a trust-region-like step
                // and keeps the quasi-Newton loop honest.
                let scale = seed.diagonal().amax().max(1.0);
                if alpha >= 0.999 {
                    damping = if damping > 1e-8 * scale { 0.25 * damping } else { 0.0 };
                } else if alpha < 0.25 {
                    damping = (4.0 * damping).max(1e-4 * scale);
                }
                if opts.log_iterations && log_step {
                    iteration_log.push(IterationRecord {
                        merit_before,
                        merit_after,
                        penalty,
                        step_length: alpha,
                    });
                }
                let eval_next = evaluate(nlp, &z_next)?;
                // Damped BFGS update on the Lagrangian gradient; only
                // healthy steps contribute curvature information.
                let s = &z_next - &z;
                if opts.hessian_updates && alpha >= 0.25 && s.amax() > 1e-8 * (1.0 + z.amax()) {
                    let mut grad_l_new = eval_next.gradient.clone();
                    let mut grad_l_old = eval.gradient.clone();
                    if eval.eq.len() > 0 {
                        grad_l_new -= eval_next.eq_jac.transpose() * &lambda;
                        grad_l_old -= eval.eq_jac.transpose() * &lambda;
                    }
                    if m_i > 0 {
                        let mu_gen = mu_rows.rows(0, m_i).into_owned();
                        grad_l_new -= eval_next.ineq_jac.transpose() * &mu_gen;
                        grad_l_old -= eval.ineq_jac.transpose() * &mu_gen;
                    }
                    let mut y = grad_l_new - grad_l_old;
                    let bs = &hessian * &s;
                    let sbs = s.dot(&bs);
                    let sy = s.dot(&y);
                    if sbs > 0.0 {
                        if sy < 0.2 * sbs {
                            let theta = 0.8 * sbs / (sbs - sy);
                            y = theta * &y + (1.0 - theta) * &bs;
                        }
                        let sy = s.dot(&y);
                        if sy > 1e-7 * s.norm() * y.norm() {
                            // B <- B - (B s s^T B)/(s^T B s) + (y y^T)/(s^T y)
                            let bs_outer = &bs * bs.transpose() / sbs;
                            let y_outer = &y * y.transpose() / sy;
                            hessian -= bs_outer;
                            hessian += y_outer;
                        }
                    }
                }
                z = z_next;
                eval = eval_next;
            }
            None => {
                // No merit decrease at any step length: tighten the model.
                stalls += 1;
                let scale = seed.diagonal().amax().max(1.0);
                damping = (10.0 * damping).max(1e-2 * scale);
                if damping > 1e2 * scale {
                    // The quasi-Newton model itself has degraded beyond
                    // what damping can repair; restart from the seed.
                    hessian = seed.clone();
                    damping = 1e-2 * scale;
                }
                if stalls >= 5 {
                    break;
                }
            }
        }
    }

    let report = finish(
        nlp,
        &z,
        last_multipliers.as_ref(),
        &lower,
        &upper,
        &bound_rows,
        iterations,
        opts,
        start,
        iteration_log,
    )?;
    Ok((z, report))
}

/// Recompute KKT residuals at the returned point and classify the status.
#[allow(clippy::too_many_arguments)]
fn finish(
    nlp: &dyn Nlp,
    z: &DVector<f64>,
    multipliers: Option<&(DVector<f64>, DVector<f64>)>,
    lower: &DVector<f64>,
    upper: &DVector<f64>,
    bound_rows: &BoundRows,
    iterations: usize,
    opts: &Options,
    start: Instant,
    iteration_log: Vec<IterationRecord>,
) -> Result<Report, Error> {
    let eval = evaluate(nlp, z)?;

    let (mut stationarity, mut complementarity) =
        refined_kkt(&eval, z, lower, upper, bound_rows);
    // The stored multipliers can only improve the certificate.
    if let Some((lambda, mu_rows)) = multipliers {
        let m_i = eval.ineq.len();
        let mut v = eval.gradient.clone();
        if eval.eq.len() > 0 {
            v -= eval.eq_jac.transpose() * lambda;
        }
        let mut compl = 0.0_f64;
        for r in 0..m_i.min(mu_rows.len()) {
            for c in 0..nlp.dim() {
                v[c] -= eval.ineq_jac[(r, c)] * mu_rows[r];
            }
            compl = compl.max((mu_rows[r] * eval.ineq[r]).abs());
        }
        for (k, &i) in bound_rows.lower.iter().enumerate() {
            let mu = mu_rows[m_i + k];
            v[i] -= mu;
            compl = compl.max((mu * (z[i] - lower[i])).abs());
        }
        for (k, &i) in bound_rows.upper.iter().enumerate() {
            let mu = mu_rows[m_i + bound_rows.lower.len() + k];
            v[i] += mu;
            compl = compl.max((mu * (upper[i] - z[i])).abs());
        }
        if v.amax().max(compl) < stationarity.max(complementarity) {
            stationarity = v.amax();
            complementarity = compl;
        }
    }
    let eq_feasibility = if eval.eq.len() > 0 { eval.eq.amax() } else { 0.0 };
    let mut ineq_feasibility = eval
        .ineq
        .iter()
        .map(|v| (-v).max(0.0))
        .fold(0.0, f64::max);
    for i in 0..nlp.dim() {
        if lower[i].is_finite() {
            ineq_feasibility = ineq_feasibility.max(lower[i] - z[i]);
        }
        if upper[i].is_finite() {
            ineq_feasibility = ineq_feasibility.max(z[i] - upper[i]);
        }
    }

    let kkt = KktResiduals {
        stationarity,
        eq_feasibility,
        ineq_feasibility,
        complementarity,
    };
    let feasible_enough = eq_feasibility <= 10.0 * opts.kkt_tolerance
        && ineq_feasibility <= 10.0 * opts.kkt_tolerance;
    let optimal = stationarity <= opts.kkt_tolerance
        && complementarity <= opts.kkt_tolerance
        && eq_feasibility <= opts.constraint_tolerance
        && ineq_feasibility <= opts.constraint_tolerance;
    let status = if optimal {
        Status::Optimal
    } else if feasible_enough {
        Status::MaxIterations
    } else {
        Status::Infeasible
    };

    Ok(Report {
        status,
        iterations,
        kkt,
        wall_time: start.elapsed(),
        iteration_log,
    })
}

/// Result of [`numeric_derivative_check`].
#[derive(Debug, Clone)]
pub struct DerivativeCheck {
    pub max_rel_error: f64,
    /// Human-readable location of the worst entry.
    pub worst: String,
}

/// Compare supplied gradients and Jacobians against central finite
/// differences at `z`; returns the worst relative error.
pub fn numeric_derivative_check(nlp: &dyn Nlp, z: &DVector<f64>) -> DerivativeCheck {
    let n = nlp.dim();
    let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1.0);

    let mut worst = 0.0_f64;
    let mut worst_at = String::from("none");

    let grad = nlp.gradient(z);
    let eq_jac = nlp.eq_jacobian(z);
    let ineq_jac = nlp.ineq_jacobian(z);

    for j in 0..n {
        let h = 1e-6 * (1.0 + z[j].abs());
        let mut zp = z.clone();
        let mut zm = z.clone();
        zp[j] += h;
        zm[j] -= h;

        let fd_grad = (nlp.objective(&zp) - nlp.objective(&zm)) / (2.0 * h);
        let e = rel(grad[j], fd_grad);
        if e > worst {
            worst = e;
            worst_at = format!("objective gradient entry {j}");
        }

        if nlp.num_eq() > 0 {
            let ep = nlp.eq_residual(&zp);
            let em = nlp.eq_residual(&zm);
            for r in 0..nlp.num_eq() {
                let fd = (ep[r] - em[r]) / (2.0 * h);
                let e = rel(eq_jac[(r, j)], fd);
                if e > worst {
                    worst = e;
                    worst_at = format!("equality Jacobian ({r}, {j})");
                }
            }
        }
        if nlp.num_ineq() > 0 {
            let ip = nlp.ineq_residual(&zp);
            let im = nlp.ineq_residual(&zm);
            for r in 0..nlp.num_ineq() {
                let fd = (ip[r] - im[r]) / (2.0 * h);
                let e = rel(ineq_jac[(r, j)], fd);
                if e > worst {
                    worst = e;
                    worst_at = format!("inequality Jacobian ({r}, {j})");
                }
            }
        }
    }

    DerivativeCheck {
        max_rel_error: worst,
        worst: worst_at,
    }
}
