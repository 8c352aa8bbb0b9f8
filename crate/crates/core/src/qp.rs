//! Slack-relaxed QP for one control step:
//!
//! ```text
//!   min  ½ uᵀ H u + K_ε ε² + K_η η²
//!   s.t. safety rows     a·u + b ≤ ε
//!        stability rows  a·u + b ≤ η
//!        u_min ≤ u ≤ u_max
//! ```
//!
//! Solved with a primal active-set method. The inputs are Jacobi-scaled
//! (`w = √H_jj u_j`) and each slack is replaced by `s = √K · slack`, so the
//! working Hessian is `diag(D H D, 2, 2, 2)` regardless of how large the
//! penalties are. Rows with [`SlackChannel::None`] are hard; internally they
//! share a third slack whose penalty dominates both others, which keeps the
//! starting point trivially feasible.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::constraints::{ConstraintRow, SlackChannel};

pub const DEFAULT_MAX_ITER: usize = 100;
/// Declared bound on [`QpSolution::kkt_residual`] at an optimal point.
pub const KKT_TOLERANCE: f64 = 1e-8;

const HARD_PENALTY_FACTOR: f64 = 1e6;
const STEP_TOL: f64 = 1e-12;
const BLOCK_TOL: f64 = 1e-12;
const DUAL_TOL: f64 = 1e-12;
const ACTIVE_TOL: f64 = 1e-9;
const RANK_TOL: f64 = 1e-11;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QpError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("cost matrix is not symmetric positive definite")]
    NotPositiveDefinite,
    #[error("slack penalties must satisfy K_eps >= K_eta > 0 (got {k_eps}, {k_eta})")]
    Penalty { k_eps: f64, k_eta: f64 },
    #[error("input box is empty on input {0}")]
    EmptyBox(usize),
    #[error("non-finite problem data")]
    NonFinite,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QProblem {
    /// H, m × m.
    pub cost: DMatrix<f64>,
    pub k_eps: f64,
    pub k_eta: f64,
    pub rows: Vec<ConstraintRow>,
    pub u_min: Vec<f64>,
    pub u_max: Vec<f64>,
}

impl QProblem {
    pub fn input_dim(&self) -> usize {
        self.cost.nrows()
    }

    pub fn validate(&self) -> Result<(), QpError> {
        let m = self.cost.nrows();
        if self.cost.ncols() != m || m == 0 {
            return Err(QpError::Dimension(format!(
                "cost is {}x{}",
                self.cost.nrows(),
                self.cost.ncols()
            )));
        }
        if self.u_min.len() != m || self.u_max.len() != m {
            return Err(QpError::Dimension("box length differs from input dim".into()));
        }
        if let Some(r) = self.rows.iter().find(|r| r.coeff_u.len() != m) {
            return Err(QpError::Dimension(format!(
                "row has {} coefficients, expected {m}",
                r.coeff_u.len()
            )));
        }
        let finite = self.cost.iter().all(|v| v.is_finite())
            && self.rows.iter().all(ConstraintRow::is_finite)
            && self.u_min.iter().chain(&self.u_max).all(|v| v.is_finite());
        if !finite {
            return Err(QpError::NonFinite);
        }
        if !(self.k_eta > 0.0 && self.k_eps >= self.k_eta && self.k_eps.is_finite()) {
            return Err(QpError::Penalty {
                k_eps: self.k_eps,
                k_eta: self.k_eta,
            });
        }
        if let Some(j) = (0..m).find(|&j| self.u_min[j] > self.u_max[j]) {
            return Err(QpError::EmptyBox(j));
        }
        let asym = (&self.cost - self.cost.transpose()).amax();
        if asym > 1e-12 * self.cost.amax() || self.cost.clone().cholesky().is_none() {
            return Err(QpError::NotPositiveDefinite);
        }
        Ok(())
    }

    /// `½ uᵀ H u + K_ε ε² + K_η η²`
    pub fn objective(&self, u: &[f64], eps: f64, eta: f64) -> f64 {
        let u = DVector::from_column_slice(u);
        0.5 * u.dot(&(&self.cost * &u)) + self.k_eps * eps * eps + self.k_eta * eta * eta
    }

    /// Smallest slack on `channel` that makes every row of it hold at `u`.
    pub fn required_slack(&self, u: &[f64], channel: SlackChannel) -> f64 {
        self.rows
            .iter()
            .filter(|r| r.slack_channel == channel)
            .map(|r| r.violation(u))
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    /// Iteration cap hit; the last iterate is returned.
    MaxIter,
    /// Hard rows could not be met inside the box.
    HardInfeasible,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub u_star: Vec<f64>,
    pub eps: f64,
    pub eta: f64,
    pub status: QpStatus,
    pub kkt_residual: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverSettings {
    pub max_iter: usize,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            max_iter: DEFAULT_MAX_ITER,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum FaceKind {
    Row(usize),
    Upper(usize),
    Lower(usize),
}

#[derive(Debug, Clone)]
struct Face {
    normal: DVector<f64>,
    bound: f64,
    kind: FaceKind,
}

/// The problem in scaled coordinates `z = (w, s_safety, s_stability, s_hard)`.
struct Scaled {
    m: usize,
    unscale: Vec<f64>,
    sqrt_k: [f64; 3],
    hessian: DMatrix<f64>,
    faces: Vec<Face>,
}

fn channel_slot(ch: SlackChannel) -> usize {
    match ch {
        SlackChannel::Safety => 0,
        SlackChannel::Stability => 1,
        SlackChannel::None => 2,
    }
}

impl Scaled {
    fn new(p: &QProblem) -> Self {
        let m = p.input_dim();
        let n = m + 3;
        let unscale: Vec<f64> = (0..m).map(|j| 1.0 / p.cost[(j, j)].sqrt()).collect();
        let k_hard = HARD_PENALTY_FACTOR * p.k_eps.max(1.0);
        let sqrt_k = [p.k_eps.sqrt(), p.k_eta.sqrt(), k_hard.sqrt()];

        let mut hessian = DMatrix::zeros(n, n);
        for i in 0..m {
            for j in 0..m {
                hessian[(i, j)] = p.cost[(i, j)] * unscale[i] * unscale[j];
            }
        }
        for k in 0..3 {
            hessian[(m + k, m + k)] = 2.0;
        }

        let mut faces = Vec::with_capacity(p.rows.len() + 2 * m);
        for (i, row) in p.rows.iter().enumerate() {
            let mut normal = DVector::zeros(n);
            for j in 0..m {
                normal[j] = row.coeff_u[j] * unscale[j];
            }
            let slot = channel_slot(row.slack_channel);
            normal[m + slot] = -1.0 / sqrt_k[slot];
            faces.push(Face {
                normal,
                bound: -row.rhs_const,
                kind: FaceKind::Row(i),
            });
        }
        for j in 0..m {
            let mut up = DVector::zeros(n);
            up[j] = 1.0;
            faces.push(Face {
                normal: up,
                bound: p.u_max[j] / unscale[j],
                kind: FaceKind::Upper(j),
            });
            let mut lo = DVector::zeros(n);
            lo[j] = -1.0;
            faces.push(Face {
                normal: lo,
                bound: -p.u_min[j] / unscale[j],
                kind: FaceKind::Lower(j),
            });
        }
        Self {
            m,
            unscale,
            sqrt_k,
            hessian,
            faces,
        }
    }

    fn lift(&self, u: &[f64], slacks: [f64; 3]) -> DVector<f64> {
        let mut z = DVector::zeros(self.m + 3);
        for j in 0..self.m {
            z[j] = u[j] / self.unscale[j];
        }
        for k in 0..3 {
            z[self.m + k] = self.sqrt_k[k] * slacks[k];
        }
        z
    }

    fn inputs(&self, z: &DVector<f64>) -> Vec<f64> {
        (0..self.m).map(|j| z[j] * self.unscale[j]).collect()
    }
}

/// Solves with default settings.
pub fn solve(problem: &QProblem) -> Result<QpSolution, QpError> {
    solve_with(problem, &SolverSettings::default())
}

pub fn solve_with(problem: &QProblem, settings: &SolverSettings) -> Result<QpSolution, QpError> {
    problem.validate()?;
    let sc = Scaled::new(problem);

    // box-projected origin with slacks that cover every row
    let u0: Vec<f64> = (0..sc.m)
        .map(|j| 0.0f64.clamp(problem.u_min[j], problem.u_max[j]))
        .collect();
    let slacks0 = [
        problem.required_slack(&u0, SlackChannel::Safety),
        problem.required_slack(&u0, SlackChannel::Stability),
        problem.required_slack(&u0, SlackChannel::None),
    ];
    let mut z = sc.lift(&u0, slacks0);

    let mut working: Vec<usize> = Vec::new();
    let mut status = QpStatus::MaxIter;
    let mut iterations = 0;

    while iterations < settings.max_iter {
        iterations += 1;
        let Some((target, lambda)) = solve_eqp(&sc, &working) else {
            // dependent working set; drop the newest face and retry
            working.pop();
            continue;
        };
        let step = &target - &z;

        let small = step
            .iter()
            .zip(z.iter())
            .all(|(p, zi)| p.abs() <= STEP_TOL * (1.0 + zi.abs()));
        if small {
            let scale = 1.0 + lambda.iter().fold(0.0f64, |a, l| a.max(l.abs()));
            let most_negative = lambda
                .iter()
                .enumerate()
                .filter(|(_, l)| **l < -DUAL_TOL * scale)
                .min_by(|a, b| a.1.total_cmp(b.1));
            match most_negative {
                None => {
                    status = QpStatus::Optimal;
                    break;
                }
                Some((pos, _)) => {
                    working.remove(pos);
                    continue;
                }
            }
        }

        // ratio test; ties go to the face violated most by the full step
        let mut alpha = 1.0;
        let mut blocking: Option<(usize, f64)> = None;
        for (i, face) in sc.faces.iter().enumerate() {
            if working.contains(&i) {
                continue;
            }
            let ap = face.normal.dot(&step);
            let a_norm = face.normal.norm();
            let ap_abs: f64 = face.normal.iter().zip(step.iter()).map(|(a, p)| (a * p).abs()).sum();
            if ap <= BLOCK_TOL * ap_abs {
                continue;
            }
            let gap = (face.bound - face.normal.dot(&z)).max(0.0);
            let ratio = gap / ap;
            let overshoot = (face.normal.dot(&(&z + &step)) - face.bound) / a_norm;
            let better = match blocking {
                None => ratio < alpha,
                Some((_, best_overshoot)) => {
                    let tie = (ratio - alpha).abs() <= 1e-14 * (1.0 + alpha);
                    ratio < alpha && !tie || tie && overshoot > best_overshoot
                }
            };
            if better {
                alpha = ratio.min(alpha);
                blocking = Some((i, overshoot));
            }
        }
        z += &step * alpha;
        if let Some((i, _)) = blocking {
            working.push(i);
        }
    }

    let mut u = sc.inputs(&z);
    for j in 0..sc.m {
        u[j] = u[j].clamp(problem.u_min[j], problem.u_max[j]);
    }
    let eps = problem.required_slack(&u, SlackChannel::Safety);
    let eta = problem.required_slack(&u, SlackChannel::Stability);
    let hard = problem.required_slack(&u, SlackChannel::None);
    let hard_scale = 1.0
        + problem
            .rows
            .iter()
            .filter(|r| r.slack_channel == SlackChannel::None)
            .fold(0.0f64, |a, r| a.max(r.rhs_const.abs()));
    if hard > ACTIVE_TOL * hard_scale {
        status = QpStatus::HardInfeasible;
    }
    let mut solution = QpSolution {
        u_star: u,
        eps,
        eta,
        status,
        kkt_residual: 0.0,
        iterations,
    };
    solution.kkt_residual = kkt_verify(problem, &solution).max();
    Ok(solution)
}

/// Minimizer of the objective on the faces of the working set, with the
/// multipliers that hold it there.
///
/// The target point is solved for directly rather than as a step from the
/// current iterate, so re-solving the same working set reproduces the same
/// point bit for bit. Box faces fix their variable. The active rows are
/// rotated so that combinations whose input part vanishes become exact
/// slack-only equations; those are solved on their own, and the remaining
/// rows have a full-rank input part. This keeps the 1/√K slack coefficients
/// from ever being summed against O(1) input coefficients that cancel.
fn solve_eqp(sc: &Scaled, working: &[usize]) -> Option<(DVector<f64>, Vec<f64>)> {
    let m = sc.m;
    let n = m + 3;
    let mut target = DVector::zeros(n);
    let mut fixed = vec![false; n];
    let mut rows = Vec::new();
    for (pos, &fi) in working.iter().enumerate() {
        let face = &sc.faces[fi];
        match face.kind {
            FaceKind::Row(_) => rows.push(pos),
            FaceKind::Upper(j) => {
                fixed[j] = true;
                target[j] = face.bound;
            }
            FaceKind::Lower(j) => {
                fixed[j] = true;
                target[j] = -face.bound;
            }
        }
    }
    let free: Vec<usize> = (0..m).filter(|&j| !fixed[j]).collect();
    let f = free.len();
    let k = rows.len();

    let c = DMatrix::from_fn(k, f, |i, j| sc.faces[working[rows[i]]].normal[free[j]]);
    let s_coef = DMatrix::from_fn(k, 3, |i, j| sc.faces[working[rows[i]]].normal[m + j]);
    let b = DVector::from_fn(k, |i, _| {
        let face = &sc.faces[working[rows[i]]];
        face.bound - face.normal.dot(&target)
    });
    let pinned = &sc.hessian * &target;
    let g_ff = DMatrix::from_fn(f, f, |i, j| sc.hessian[(free[i], free[j])]);
    let q = DVector::from_fn(f, |i, _| pinned[free[i]]);

    // rotate rows: U1 spans the input part's range, U2 its left null space
    let mut u1: Vec<DVector<f64>> = Vec::new();
    if f > 0 && k > 0 {
        let qr = c.clone().col_piv_qr();
        let (q_thin, r_fac) = (qr.q(), qr.r());
        let rmax = r_fac[(0, 0)].abs();
        for idx in 0..r_fac.nrows().min(r_fac.ncols()) {
            if r_fac[(idx, idx)].abs() > RANK_TOL * rmax {
                u1.push(q_thin.column(idx).into_owned());
            }
        }
    }
    let u2 = complete_basis(&u1, k);
    let r = u1.len();
    let d2 = u2.len();
    if d2 > 3 {
        return None;
    }
    let u1m = columns(&u1, k);
    let u2m = columns(&u2, k);
    let w1 = u1m.transpose() * &c;
    let s1 = u1m.transpose() * &s_coef;
    let b1 = u1m.transpose() * &b;
    let mut s2 = u2m.transpose() * &s_coef;
    let mut b2 = u2m.transpose() * &b;
    let mut row_scale = vec![1.0; d2];
    for i in 0..d2 {
        let sc_i = s2.row(i).amax();
        if sc_i == 0.0 {
            return None;
        }
        row_scale[i] = sc_i;
        s2.row_mut(i).scale_mut(1.0 / sc_i);
        b2[i] /= sc_i;
    }

    // slack-only equations: s = s_p + N t, from a QR of S2ᵀ
    let slack_qr = (d2 > 0).then(|| s2.transpose().qr());
    let (s_p, null) = match &slack_qr {
        None => (DVector::zeros(3), DMatrix::identity(3, 3)),
        Some(qr) => {
            let (q_thin, r_fac) = (qr.q(), qr.r());
            let rmax = r_fac.diagonal().amax();
            if r_fac.diagonal().iter().any(|d| d.abs() <= RANK_TOL * rmax) {
                return None;
            }
            let y = r_fac.transpose().solve_lower_triangular(&b2)?;
            let range: Vec<DVector<f64>> = (0..d2).map(|i| q_thin.column(i).into_owned()).collect();
            (&q_thin * y, columns(&complete_basis(&range, 3), 3))
        }
    };
    let dn = null.ncols();

    // reduced KKT in (w_free, t) with r rows whose input part has full rank
    let s1n = &s1 * &null;
    let rhs1 = &b1 - &s1 * &s_p;
    let dim = f + dn + r;
    let mut kkt = DMatrix::zeros(dim, dim);
    let mut rhs = DVector::zeros(dim);
    kkt.view_mut((0, 0), (f, f)).copy_from(&g_ff);
    for i in 0..dn {
        kkt[(f + i, f + i)] = 2.0;
    }
    for i in 0..f {
        rhs[i] = -q[i];
    }
    for row_i in 0..r {
        for j in 0..f {
            kkt[(f + dn + row_i, j)] = w1[(row_i, j)];
            kkt[(j, f + dn + row_i)] = w1[(row_i, j)];
        }
        for j in 0..dn {
            kkt[(f + dn + row_i, f + j)] = s1n[(row_i, j)];
            kkt[(f + j, f + dn + row_i)] = s1n[(row_i, j)];
        }
        rhs[f + dn + row_i] = rhs1[row_i];
    }
    let sol = if dim > 0 {
        kkt.full_piv_lu().solve(&rhs)?
    } else {
        DVector::zeros(0)
    };
    if sol.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let t = sol.rows(f, dn).into_owned();
    let nu1 = sol.rows(f + dn, r).into_owned();
    let slacks = &s_p + &null * &t;
    for (a, &i) in free.iter().enumerate() {
        target[i] = sol[a];
    }
    for ch in 0..3 {
        target[m + ch] = slacks[ch];
    }

    // slack stationarity gives the multipliers of the slack-only equations
    let mut row_lambda = &u1m * &nu1;
    if d2 > 0 {
        let resid = -(&slacks * 2.0 + s1.transpose() * &nu1);
        let qr = slack_qr.as_ref()?;
        let nu2 = qr.r().solve_upper_triangular(&(qr.q().transpose() * resid))?;
        let nu2 = DVector::from_fn(d2, |i, _| nu2[i] / row_scale[i]);
        row_lambda += &u2m * nu2;
    }
    let mut lambda = vec![0.0; working.len()];
    for (i, &pos) in rows.iter().enumerate() {
        lambda[pos] = row_lambda[i];
    }

    let mut residual = &sc.hessian * &target;
    for &pos in &rows {
        residual += &sc.faces[working[pos]].normal * lambda[pos];
    }
    let mut assigned = vec![false; n];
    for (pos, &fi) in working.iter().enumerate() {
        let (j, sign) = match sc.faces[fi].kind {
            FaceKind::Row(_) => continue,
            FaceKind::Upper(j) => (j, 1.0),
            FaceKind::Lower(j) => (j, -1.0),
        };
        let mu = -residual[j] * sign;
        // both faces of a collapsed box: give the multiplier to one of them
        if assigned[j] {
            if mu > 0.0 {
                lambda[pos] = mu;
                if let Some(other) = working[..pos].iter().position(|&o| {
                    matches!(sc.faces[o].kind, FaceKind::Upper(x) | FaceKind::Lower(x) if x == j)
                }) {
                    lambda[other] = 0.0;
                }
            }
            continue;
        }
        assigned[j] = true;
        lambda[pos] = mu;
    }
    Some((target, lambda))
}

/// Extends an orthonormal set to a basis of R^dim, greedily taking the
/// coordinate axis with the largest component outside the current span.
fn complete_basis(basis: &[DVector<f64>], dim: usize) -> Vec<DVector<f64>> {
    let mut all: Vec<DVector<f64>> = basis.to_vec();
    let mut extra = Vec::new();
    while all.len() < dim {
        let mut best: Option<DVector<f64>> = None;
        for axis in 0..dim {
            let mut v = DVector::zeros(dim);
            v[axis] = 1.0;
            for _ in 0..2 {
                for b in &all {
                    let proj = b.dot(&v);
                    v -= b * proj;
                }
            }
            if best.as_ref().is_none_or(|bv| v.norm() > bv.norm()) {
                best = Some(v);
            }
        }
        let v = best.expect("dim > 0");
        let v = &v / v.norm();
        all.push(v.clone());
        extra.push(v);
    }
    extra
}

fn columns(cols: &[DVector<f64>], rows: usize) -> DMatrix<f64> {
    if cols.is_empty() {
        DMatrix::zeros(rows, 0)
    } else {
        DMatrix::from_columns(cols)
    }
}

/// Scaled KKT residuals of a candidate solution. Each entry is relative to
/// the magnitude of the terms it balances, so penalties as large as 1e30 do
/// not swamp the measure.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktReport {
    pub stationarity: f64,
    pub primal_infeasibility: f64,
    pub complementarity: f64,
    pub active_faces: usize,
}

impl KktReport {
    pub fn max(&self) -> f64 {
        self.stationarity
            .max(self.primal_infeasibility)
            .max(self.complementarity)
    }
}

/// Recomputes non-negative multipliers for the faces active at `solution`
/// and reports how far the point is from satisfying the KKT conditions.
///
/// Works in the original `(u, ε, η)` units, where every constraint
/// coefficient is O(1) and the penalties only show up as the channel forces
/// `2Kε` on the right-hand side. A slack inside the rounding band of its
/// rows carries no usable force information (under K = 1e30 even 1e-16 is
/// a force of 1e14), so such a channel only has its force bounded by what
/// the band allows.
pub fn kkt_verify(problem: &QProblem, solution: &QpSolution) -> KktReport {
    let m = problem.input_dim();
    let u = &solution.u_star;
    let channels = [
        (SlackChannel::Safety, solution.eps, problem.k_eps),
        (SlackChannel::Stability, solution.eta, problem.k_eta),
    ];
    let row_scale = |r: &ConstraintRow| {
        r.rhs_const.abs() + r.coeff_u.iter().zip(u).map(|(a, x)| (a * x).abs()).sum::<f64>()
    };
    let band = |ch: SlackChannel| {
        problem
            .rows
            .iter()
            .filter(|r| r.slack_channel == ch)
            .map(row_scale)
            .fold(0.0, f64::max)
            * 8.0
            * f64::EPSILON
    };
    let slack_of = |ch: SlackChannel| match ch {
        SlackChannel::Safety => solution.eps,
        SlackChannel::Stability => solution.eta,
        SlackChannel::None => 0.0,
    };

    // active faces as (u-part, channel) columns
    let mut primal = 0.0f64;
    let mut cols: Vec<(DVector<f64>, Option<usize>)> = Vec::new();
    let mut residuals = Vec::new();
    for r in &problem.rows {
        let slack = slack_of(r.slack_channel);
        let nr = (r.violation(u) - slack) / (1.0 + row_scale(r) + slack);
        primal = primal.max(nr);
        if nr >= -ACTIVE_TOL {
            let ch = channels.iter().position(|c| c.0 == r.slack_channel);
            cols.push((DVector::from_column_slice(&r.coeff_u), ch));
            residuals.push(nr.abs());
        }
    }
    for j in 0..m {
        for (sign, bound) in [(1.0, problem.u_max[j]), (-1.0, problem.u_min[j])] {
            let nr = sign * (u[j] - bound) / (1.0 + bound.abs());
            primal = primal.max(nr);
            if nr >= -ACTIVE_TOL {
                let mut e = DVector::zeros(m);
                e[j] = sign;
                cols.push((e, None));
                residuals.push(nr.abs());
            }
        }
    }

    // Unknowns: face multipliers, then per channel an offset φ and its
    // complement ψ inside the force interval 2K·[ε - band, ε + band].
    // Rows: input balances, force balances Σλ - φ = F_lo, widths φ + ψ = w.
    let hu = &problem.cost * DVector::from_column_slice(u);
    let k = cols.len();
    let nch = channels.len();
    let n_eq = m + 2 * nch;
    let mut b = DMatrix::zeros(n_eq, k + 2 * nch);
    let mut rhs = DVector::zeros(n_eq);
    for (c, (a, ch)) in cols.iter().enumerate() {
        for i in 0..m {
            b[(i, c)] = a[i];
        }
        if let Some(idx) = ch {
            b[(m + idx, c)] = 1.0;
        }
    }
    for i in 0..m {
        rhs[i] = -hu[i];
    }
    let mut f_hi = 0.0f64;
    for (idx, (ch, slack, kc)) in channels.iter().enumerate() {
        let bd = band(*ch);
        let lo = 2.0 * kc * (slack - bd).max(0.0);
        let hi = 2.0 * kc * (slack + bd);
        f_hi = f_hi.max(hi);
        b[(m + idx, k + idx)] = -1.0;
        rhs[m + idx] = lo;
        b[(m + nch + idx, k + idx)] = 1.0;
        b[(m + nch + idx, k + nch + idx)] = 1.0;
        rhs[m + nch + idx] = hi - lo;
    }
    let x = nnls(&b, &rhs);
    let lambda = x.rows(0, k).into_owned();

    let force = lambda
        .iter()
        .zip(&cols)
        .map(|(l, (a, _))| l * a.amax().max(1.0))
        .fold(0.0, f64::max);
    let denom = 1.0 + hu.amax() + f_hi + force;
    let balance = (&b * &x - &rhs).amax();
    let complementarity = lambda
        .iter()
        .zip(&residuals)
        .map(|(l, r)| l / denom * r)
        .fold(0.0, f64::max);
    KktReport {
        stationarity: balance / denom,
        primal_infeasibility: primal.max(0.0),
        complementarity,
        active_faces: cols.len(),
    }
}

/// Lawson–Hanson non-negative least squares, `min ‖B x - c‖, x ≥ 0`.
fn nnls(b: &DMatrix<f64>, c: &DVector<f64>) -> DVector<f64> {
    let k = b.ncols();
    let norms: Vec<f64> = (0..k).map(|j| b.column(j).norm().max(f64::MIN_POSITIVE)).collect();
    let mut bn = b.clone();
    for j in 0..k {
        bn.column_mut(j).scale_mut(1.0 / norms[j]);
    }
    let tol = 1e-13 * (1.0 + c.norm());
    let mut x = DVector::zeros(k);
    let mut passive = vec![false; k];

    let lstsq = |passive: &[bool]| -> DVector<f64> {
        let idx: Vec<usize> = (0..k).filter(|&j| passive[j]).collect();
        let mut out = DVector::zeros(k);
        if idx.is_empty() {
            return out;
        }
        let sub = DMatrix::from_columns(&idx.iter().map(|&j| bn.column(j)).collect::<Vec<_>>());
        let sol = sub
            .svd(true, true)
            .solve(c, 1e-14)
            .unwrap_or_else(|_| DVector::zeros(idx.len()));
        for (pos, &j) in idx.iter().enumerate() {
            out[j] = sol[pos];
        }
        out
    };

    for _ in 0..3 * k + 3 {
        let w = bn.transpose() * (c - &bn * &x);
        let candidate = (0..k)
            .filter(|&j| !passive[j] && w[j] > tol)
            .max_by(|&a, &b| w[a].total_cmp(&w[b]));
        let Some(j) = candidate else { break };
        passive[j] = true;
        for _ in 0..3 * k + 3 {
            let zc = lstsq(&passive);
            if (0..k).filter(|&i| passive[i]).all(|i| zc[i] > 0.0) {
                x = zc;
                break;
            }
            let mut alpha = f64::INFINITY;
            let mut hit = 0;
            for i in (0..k).filter(|&i| passive[i] && zc[i] <= 0.0) {
                let a = x[i] / (x[i] - zc[i]);
                if a < alpha {
                    alpha = a;
                    hit = i;
                }
            }
            x += (&zc - &x) * alpha;
            x[hit] = 0.0;
            for i in 0..k {
                if passive[i] && x[i] <= 0.0 {
                    passive[i] = false;
                    x[i] = 0.0;
                }
            }
        }
    }
    for j in 0..k {
        x[j] /= norms[j];
    }
    x
}
