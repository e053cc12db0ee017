//! Dense convex QP subproblem solver.
//!
//! Solves
//!
//! ```text
//!   min  1/2 d^T B d + g^T d
//!   s.t. A d = b          (equalities)
//!        G d >= h         (inequalities, box rows included by the caller)
//! ```
//!
//! Equalities are eliminated through a null-space basis of A (Householder
//! QR of A^T), then the reduced inequality-constrained QP is solved with a
//! Mehrotra-style predictor-corrector interior-point iteration on the
//! slack/multiplier pair. Everything is dense and deterministic.

use nalgebra::{DMatrix, DVector};

use crate::qr::HouseholderQr;

pub struct QpData<'a> {
    pub hessian: &'a DMatrix<f64>,
    pub gradient: &'a DVector<f64>,
    /// Equality rows `A d = b`; `None` when there are no equalities.
    pub eq_matrix: Option<&'a DMatrix<f64>>,
    pub eq_rhs: Option<&'a DVector<f64>>,
    /// Inequality rows `G d >= h`; may be empty.
    pub ineq_matrix: &'a DMatrix<f64>,
    pub ineq_rhs: &'a DVector<f64>,
}

pub struct QpSolution {
    pub step: DVector<f64>,
    pub eq_multipliers: DVector<f64>,
    /// Nonnegative multipliers for the `G d >= h` rows.
    pub ineq_multipliers: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum QpError {
    /// Equality rows are linearly dependent.
    DegenerateEqualities,
    /// The interior-point iteration failed to reach the requested accuracy.
    Stalled { residual: f64 },
}

const IP_MAX_ITER: usize = 60;
const IP_RESIDUAL_TOL: f64 = 5e-9;
const IP_GAP_TOL: f64 = 1e-10;

/// Cholesky solve with Levenberg-style damping escalation. Returns the
/// factor so several right-hand sides can be reused.
fn damped_cholesky(m: &DMatrix<f64>) -> nalgebra::Cholesky<f64, nalgebra::Dyn> {
    if let Some(chol) = m.clone().cholesky() {
        return chol;
    }
    let scale = m.diagonal().amax().max(1.0);
    let mut damping = 1e-12 * scale;
    loop {
        let mut damped = m.clone();
        for i in 0..m.nrows() {
            damped[(i, i)] += damping;
        }
        if let Some(chol) = damped.cholesky() {
            return chol;
        }
        damping *= 100.0;
        assert!(damping.is_finite(), "Cholesky damping diverged");
    }
}

pub fn solve_qp(data: &QpData<'_>) -> Result<QpSolution, QpError> {
    let trace = std::env::var("SQP_PHASE").is_ok();
    let t0 = std::time::Instant::now();
    let n = data.gradient.len();
    let m_ineq = data.ineq_rhs.len();

    // Null-space elimination of the equalities.
    let (qr, particular, basis) = match (data.eq_matrix, data.eq_rhs) {
        (Some(a), Some(b)) if a.nrows() > 0 => {
            let qr = HouseholderQr::new(a.transpose());
            let particular = qr
                .least_norm_solve_transposed(b)
                .map_err(|_| QpError::DegenerateEqualities)?;
            let basis = qr.null_space_basis();
            (Some(qr), particular, basis)
        }
        _ => (None, DVector::zeros(n), DMatrix::identity(n, n)),
    };

    if trace { eprintln!("      qr+basis {:.2} ms", t0.elapsed().as_secs_f64()*1e3); }
    let t1 = std::time::Instant::now();
    let h_red = basis.transpose() * data.hessian * &basis;
    let g_red = basis.transpose() * (data.gradient + data.hessian * &particular);

    if trace { eprintln!("      reduce {:.2} ms", t1.elapsed().as_secs_f64()*1e3); }
    let t2 = std::time::Instant::now();
    let (v, y) = if m_ineq == 0 {
        let chol = damped_cholesky(&h_red);
        let v = chol.solve(&(-&g_red));
        (v, DVector::zeros(0))
    } else {
        let g_full = data.ineq_matrix;
        let g_r = g_full * &basis;
        let h_r = data.ineq_rhs - g_full * &particular;

        // Rows that cannot become active within a conservative step radius
        // are dropped before the interior-point stage; the result is
        // verified against the full row set and re-solved with any
        // violated rows added back (rare).
        let chol_free = damped_cholesky(&h_red);
        let v_free = chol_free.solve(&(-&g_red));
        let radius = 2.0 * v_free.norm() + 1e-3;
        let mut kept: Vec<usize> = (0..m_ineq)
            .filter(|&r| {
                let row_norm = g_r.row(r).norm();
                h_r[r] >= -(row_norm * radius + 1e-9)
            })
            .collect();

        let mut solution = None;
        for _ in 0..4 {
            let k = kept.len();
            let (v_k, y_k) = if k == 0 {
                (v_free.clone(), DVector::zeros(0))
            } else {
                let mut g_k = DMatrix::zeros(k, g_r.ncols());
                let mut h_k = DVector::zeros(k);
                for (j, &r) in kept.iter().enumerate() {
                    g_k.row_mut(j).copy_from(&g_r.row(r));
                    h_k[j] = h_r[r];
                }
                let (v_ip, s_ip, y_ip) = interior_point(&h_red, &g_red, &g_k, &h_k)?;
                // Interior-point accuracy floors out around its residual
                // tolerance; re-solve exactly on the identified active set.
                match polish_active_set(&h_red, &g_red, &g_k, &h_k, &s_ip, &y_ip) {
                    Some((v_pol, y_pol)) => (v_pol, y_pol),
                    None => (v_ip, y_ip),
                }
            };
            // Verify against every row; add violated ones and repeat.
            let residual = &g_r * &v_k - &h_r;
            let scale = 1.0 + h_r.amax();
            let mut violated: Vec<usize> = (0..m_ineq)
                .filter(|&r| !kept.contains(&r) && residual[r] < -1e-9 * scale)
                .collect();
            if violated.is_empty() {
                let mut y_full = DVector::zeros(m_ineq);
                for (j, &r) in kept.iter().enumerate() {
                    y_full[r] = y_k[j];
                }
                solution = Some((v_k, y_full));
                break;
            }
            kept.append(&mut violated);
            kept.sort_unstable();
        }
        match solution {
            Some(pair) => pair,
            None => {
                // Pruning kept oscillating; solve with every row.
                let (v_ip, s_ip, y_ip) = interior_point(&h_red, &g_red, &g_r, &h_r)?;
                match polish_active_set(&h_red, &g_red, &g_r, &h_r, &s_ip, &y_ip) {
                    Some((v_pol, y_pol)) => (v_pol, y_pol),
                    None => (v_ip, y_ip),
                }
            }
        }
    };

    if trace { eprintln!("      ip+polish {:.2} ms", t2.elapsed().as_secs_f64()*1e3); }
    let step = &particular + &basis * &v;

    // Equality multipliers from stationarity:
    //   B d + g = A^T lambda + G^T y.
    let eq_multipliers = if let Some(qr) = qr {
        let mut rhs = data.hessian * &step + data.gradient;
        if m_ineq > 0 {
            rhs -= data.ineq_matrix.transpose() * &y;
        }
        qr.least_squares_solve(&rhs)
            .map_err(|_| QpError::DegenerateEqualities)?
    } else {
        DVector::zeros(0)
    };

    Ok(QpSolution {
        step,
        eq_multipliers,
        ineq_multipliers: y,
    })
}

/// Exact re-solve on the active set suggested by the interior-point
/// solution, refined by a few primal active-set add/drop rounds. Returns
/// the polished primal point and the full multiplier vector (zeros on
/// inactive rows), or `None` when the refinement does not settle.
fn polish_active_set(
    h: &DMatrix<f64>,
    q: &DVector<f64>,
    g: &DMatrix<f64>,
    rhs: &DVector<f64>,
    slacks: &DVector<f64>,
    duals: &DVector<f64>,
) -> Option<(DVector<f64>, DVector<f64>)> {
    let n = q.len();
    let m = rhs.len();
    let scale = 1.0 + q.amax().max(rhs.amax());
    let tol = 1e-9 * scale;

    let mut active: Vec<usize> = (0..m).filter(|&i| duals[i] > slacks[i]).collect();

    for _round in 0..10 {
        if active.len() > n {
            return None;
        }
        // Equality-constrained solve on the current working set.
        let k = active.len();
        let (v, y_act) = if k == 0 {
            let chol = h.clone().cholesky()?;
            (chol.solve(&(-q)), DVector::zeros(0))
        } else {
            let mut a_act = DMatrix::zeros(k, n);
            let mut b_act = DVector::zeros(k);
            for (j, &r) in active.iter().enumerate() {
                for c in 0..n {
                    a_act[(j, c)] = g[(r, c)];
                }
                b_act[j] = rhs[r];
            }
            let qr = HouseholderQr::new(a_act.transpose());
            let particular = qr.least_norm_solve_transposed(&b_act).ok()?;
            let basis = qr.null_space_basis();
            let h_z = basis.transpose() * h * &basis;
            let g_z = basis.transpose() * (q + h * &particular);
            let chol = h_z.cholesky()?;
            let w = chol.solve(&(-&g_z));
            let v = &particular + &basis * w;
            let y_act = qr.least_squares_solve(&(h * &v + q)).ok()?;
            (v, y_act)
        };

        // Most negative working-set multiplier and most violated row.
        let mut drop: Option<(usize, f64)> = None;
        for j in 0..k {
            if y_act[j] < -tol && drop.map_or(true, |(_, worst)| y_act[j] < worst) {
                drop = Some((j, y_act[j]));
            }
        }
        let residual = g * &v - rhs;
        let mut add: Option<(usize, f64)> = None;
        for r in 0..m {
            if active.contains(&r) {
                continue;
            }
            if residual[r] < -tol && add.map_or(true, |(_, worst)| residual[r] < worst) {
                add = Some((r, residual[r]));
            }
        }

        match (drop, add) {
            (None, None) => {
                let mut y = DVector::zeros(m);
                for (j, &r) in active.iter().enumerate() {
                    y[r] = y_act[j].max(0.0);
                }
                return Some((v, y));
            }
            (Some((j, _)), _) => {
                active.remove(j);
            }
            (None, Some((r, _))) => {
                // Keep the working set sorted for determinism.
                let pos = active.partition_point(|&a| a < r);
                active.insert(pos, r);
            }
        }
    }
    None
}

/// Predictor-corrector interior point on
///   min 1/2 v^T H v + q^T v  s.t.  G v >= h.
fn interior_point(
    h: &DMatrix<f64>,
    q: &DVector<f64>,
    g: &DMatrix<f64>,
    rhs: &DVector<f64>,
) -> Result<(DVector<f64>, DVector<f64>, DVector<f64>), QpError> {
    let n = q.len();
    let m = rhs.len();

    let mut v = DVector::zeros(n);
    let mut s = DVector::from_fn(m, |i, _| (-rhs[i]).max(1.0));
    let mut y = DVector::from_element(m, 1.0);

    let scale = 1.0 + q.amax().max(rhs.amax());
    let mut best: Option<(f64, DVector<f64>, DVector<f64>)> = None;

    for _ in 0..IP_MAX_ITER {
        // Residuals of the perturbed KKT system.
        let r_dual = h * &v + q - g.transpose() * &y;
        let r_prim = g * &v - &s - rhs;
        let mu = s.dot(&y) / m as f64;

        let r_norm = r_dual.amax().max(r_prim.amax());
        if r_norm <= IP_RESIDUAL_TOL * scale && mu <= IP_GAP_TOL * scale {
            return Ok((v, s, y));
        }
        match &best {
            Some((b, _, _)) if *b <= r_norm + mu => {}
            _ => best = Some((r_norm + mu, v.clone(), y.clone())),
        }

        // Normal-equations matrix H + G^T diag(y/s) G.
        let mut m_mat = h.clone();
        for r in 0..m {
            let w = y[r] / s[r];
            for i in 0..n {
                let gri = g[(r, i)];
                if gri == 0.0 {
                    continue;
                }
                let wg = w * gri;
                for j in 0..n {
                    m_mat[(i, j)] += wg * g[(r, j)];
                }
            }
        }
        let chol = damped_cholesky(&m_mat);

        // Affine predictor (sigma = 0).
        let rc_aff = DVector::from_fn(m, |i, _| s[i] * y[i]);
        let (_dv_aff, ds_aff, dy_aff) = kkt_step(&chol, g, &r_dual, &r_prim, &rc_aff, &s, &y);
        let alpha_aff = step_length(&s, &ds_aff).min(step_length(&y, &dy_aff));
        let mu_aff = (0..m)
            .map(|i| (s[i] + alpha_aff * ds_aff[i]) * (y[i] + alpha_aff * dy_aff[i]))
            .sum::<f64>()
            / m as f64;
        let sigma = if mu > 0.0 { (mu_aff / mu).powi(3).clamp(0.0, 1.0) } else { 0.0 };

        // Corrector with centering.
        let rc = DVector::from_fn(m, |i, _| s[i] * y[i] + ds_aff[i] * dy_aff[i] - sigma * mu);
        let (dv, ds, dy) = kkt_step(&chol, g, &r_dual, &r_prim, &rc, &s, &y);

        let alpha_p = 0.995 * step_length(&s, &ds);
        let alpha_d = 0.995 * step_length(&y, &dy);
        let alpha_p = alpha_p.min(1.0);
        let alpha_d = alpha_d.min(1.0);
        if alpha_p < 1e-13 && alpha_d < 1e-13 {
            break;
        }

        v += alpha_p * &dv;
        s += alpha_p * &ds;
        y += alpha_d * &dy;
    }

    // Accept a slightly looser point rather than failing outright; the SQP
    // loop only needs the step direction to good accuracy.
    let r_dual = h * &v + q - g.transpose() * &y;
    let r_prim = g * &v - &s - rhs;
    let mu = s.dot(&y) / m as f64;
    let r_norm = r_dual.amax().max(r_prim.amax()).max(mu);
    if r_norm <= 1e-6 * scale {
        return Ok((v, s, y));
    }
    Err(QpError::Stalled { residual: r_norm })
}

/// Solve one Newton KKT system given the factored normal matrix.
fn kkt_step(
    chol: &nalgebra::Cholesky<f64, nalgebra::Dyn>,
    g: &DMatrix<f64>,
    r_dual: &DVector<f64>,
    r_prim: &DVector<f64>,
    r_cent: &DVector<f64>,
    s: &DVector<f64>,
    y: &DVector<f64>,
) -> (DVector<f64>, DVector<f64>, DVector<f64>) {
    let m = s.len();
    // rhs = -r_dual + G^T [ (-r_cent - y .* r_prim) / s ]
    let packed = DVector::from_fn(m, |i, _| (-r_cent[i] - y[i] * r_prim[i]) / s[i]);
    let rhs = -r_dual + g.transpose() * &packed;
    let dv = chol.solve(&rhs);
    let gdv = g * &dv;
    let dy = DVector::from_fn(m, |i, _| (-r_cent[i] - y[i] * (gdv[i] + r_prim[i])) / s[i]);
    let ds = DVector::from_fn(m, |i, _| (-r_cent[i] - s[i] * dy[i]) / y[i]);
    (dv, ds, dy)
}

/// Largest alpha in (0, 1] with x + alpha dx >= 0.
fn step_length(x: &DVector<f64>, dx: &DVector<f64>) -> f64 {
    let mut alpha: f64 = 1.0;
    for i in 0..x.len() {
        if dx[i] < 0.0 {
            alpha = alpha.min(-x[i] / dx[i]);
        }
    }
    alpha.max(0.0)
}
