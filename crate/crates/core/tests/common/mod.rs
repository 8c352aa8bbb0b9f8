#![allow(dead_code)]
//! Oracles and samplers shared by the integration tests.

use lbsc::constraints::{ConstraintRow, SlackChannel};
use lbsc::gp::{KernelHyper, ObservationWindow};
use lbsc::plant::FleetState;
use lbsc::qp::QProblem;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn row(coeff: Vec<f64>, b: f64, ch: SlackChannel) -> ConstraintRow {
    ConstraintRow {
        coeff_u: coeff,
        rhs_const: b,
        slack_channel: ch,
    }
}

pub fn random_problem(rng: &mut ChaCha8Rng) -> QProblem {
    let m = rng.random_range(1..=3);
    let l = DMatrix::from_fn(m, m, |_, _| rng.random_range(-1.0..1.0));
    let cost = &l * l.transpose() + DMatrix::identity(m, m) * 0.5;
    let k_eta = 10f64.powf(rng.random_range(-1.0..1.0));
    let k_eps = k_eta * 10f64.powf(rng.random_range(0.0..2.0));
    let n_rows = rng.random_range(0..=6);
    let rows = (0..n_rows)
        .map(|_| {
            let coeff = (0..m).map(|_| rng.random_range(-2.0..2.0)).collect();
            let ch = if rng.random_bool(0.5) {
                SlackChannel::Safety
            } else {
                SlackChannel::Stability
            };
            row(coeff, rng.random_range(-2.0..2.0), ch)
        })
        .collect();
    let (mut u_min, mut u_max) = (Vec::new(), Vec::new());
    for _ in 0..m {
        let c: f64 = rng.random_range(-1.0..1.0);
        let w: f64 = rng.random_range(0.2..2.0);
        u_min.push(c - w);
        u_max.push(c + w);
    }
    QProblem {
        cost,
        k_eps,
        k_eta,
        rows,
        u_min,
        u_max,
    }
}

/// Accelerated projected gradient on the dual of the (u, ε, η) problem.
/// Returns the primal objective at the recovered point after clipping to
/// the box and re-covering the rows with the smallest slacks.
pub fn projected_gradient_oracle(p: &QProblem) -> (f64, Vec<f64>) {
    let m = p.input_dim();
    let n = m + 2;
    let mut pinv = DVector::zeros(n);
    let hinv = p.cost.clone().try_inverse().unwrap();
    let mut a_rows: Vec<DVector<f64>> = Vec::new();
    let mut beta = Vec::new();
    for r in &p.rows {
        let mut a = DVector::zeros(n);
        for j in 0..m {
            a[j] = r.coeff_u[j];
        }
        a[if r.slack_channel == SlackChannel::Safety { m } else { m + 1 }] = -1.0;
        a_rows.push(a);
        beta.push(-r.rhs_const);
    }
    for j in 0..m {
        let mut up = DVector::zeros(n);
        up[j] = 1.0;
        a_rows.push(up);
        beta.push(p.u_max[j]);
        let mut lo = DVector::zeros(n);
        lo[j] = -1.0;
        a_rows.push(lo);
        beta.push(-p.u_min[j]);
    }
    pinv[m] = 1.0 / (2.0 * p.k_eps);
    pinv[m + 1] = 1.0 / (2.0 * p.k_eta);
    let k = a_rows.len();
    let a = DMatrix::from_fn(k, n, |i, j| a_rows[i][j]);
    let mut pinv_mat = DMatrix::zeros(n, n);
    pinv_mat.view_mut((0, 0), (m, m)).copy_from(&hinv);
    pinv_mat[(m, m)] = pinv[m];
    pinv_mat[(m + 1, m + 1)] = pinv[m + 1];
    let q = &a * &pinv_mat * a.transpose();
    let beta = DVector::from_vec(beta);
    let lip = q.symmetric_eigenvalues().max().max(1e-12);
    let step = 1.0 / lip;

    let mut lam = DVector::<f64>::zeros(k);
    let mut y = lam.clone();
    let mut t = 1.0f64;
    for _ in 0..2_000_000 {
        let grad = &q * &y + &beta;
        let next = (&y - &grad * step).map(|v| v.max(0.0));
        let t_next = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
        let momentum = (t - 1.0) / t_next;
        let mut y_next = &next + (&next - &lam) * momentum;
        // adaptive restart keeps the iteration monotone on degenerate duals
        if (&next - &lam).dot(&(&y - &next)) > 0.0 {
            t = 1.0;
            y_next = next.clone();
        } else {
            t = t_next;
        }
        lam = next;
        y = y_next;
        let g = &q * &lam + &beta;
        let stat = (&lam - (&lam - &g).map(|v| v.max(0.0))).amax();
        if stat <= 1e-10 {
            break;
        }
    }
    let x = -(&pinv_mat * a.transpose() * &lam);
    let u: Vec<f64> = (0..m).map(|j| x[j].clamp(p.u_min[j], p.u_max[j])).collect();
    let eps = p.required_slack(&u, SlackChannel::Safety);
    let eta = p.required_slack(&u, SlackChannel::Stability);
    (p.objective(&u, eps, eta), u)
}


/// Random GP window of 1..=30 points in 1..=3 dimensions with matching
/// hyperparameters.
pub fn random_window(rng: &mut ChaCha8Rng) -> (ObservationWindow, KernelHyper) {
    let dim = rng.random_range(1..=3);
    let n = rng.random_range(1..=30);
    let noise = 10f64.powf(rng.random_range(-3.0..-1.0));
    let mut w = ObservationWindow::new(30, noise).unwrap();
    for _ in 0..n {
        let x: Vec<f64> = (0..dim).map(|_| rng.random_range(-3.0..3.0)).collect();
        let y = x.iter().map(|v| v.sin()).sum::<f64>() + rng.random_range(-0.1..0.1);
        w.push(&x, y).unwrap();
    }
    let hyper = KernelHyper::new(
        10f64.powf(rng.random_range(-1.0..1.0)),
        (0..dim).map(|_| rng.random_range(0.3..3.0)).collect(),
    )
    .unwrap();
    (w, hyper)
}

/// Posterior mean and variance from the explicit inverse of
/// `K + σ_n² I`, with the squared-exponential kernel written out again.
pub fn dense_posterior(w: &ObservationWindow, hyper: &KernelHyper, q: &[f64]) -> (f64, f64) {
    let sf2 = hyper.signal_variance();
    let ls = hyper.length_scales();
    let k = |a: &[f64], b: &[f64]| {
        let mut r2 = 0.0;
        for j in 0..a.len() {
            r2 += ((a[j] - b[j]) / ls[j]).powi(2);
        }
        sf2 * (-0.5 * r2).exp()
    };
    let xs: Vec<&[f64]> = w.entries().map(|o| o.input.as_slice()).collect();
    let ys: Vec<f64> = w.entries().map(|o| o.target).collect();
    let n = xs.len();
    let mut gram = DMatrix::from_fn(n, n, |i, j| k(xs[i], xs[j]));
    for i in 0..n {
        gram[(i, i)] += w.noise_variance();
    }
    let inv = gram.try_inverse().expect("SPD gram");
    let ks = DVector::from_fn(n, |i, _| k(xs[i], q));
    let y = DVector::from_vec(ys);
    let mean = ks.dot(&(&inv * y));
    let var = k(q, q) - ks.dot(&(&inv * &ks));
    (mean, var)
}

/// Fleet with car 4 at p = 0 and car 3 `b34` ahead; car 2 `b23` ahead of
/// car 3. Cars 1 and 5 are placed but do not enter the controller.
pub fn ccc_state(b23: f64, v2: f64, v3: f64, b34: f64, v4: f64) -> FleetState {
    FleetState::new(
        [b34 + b23 + 60.0, b34 + b23, b34, 0.0, -60.0],
        [v2, v2, v3, v4, v4],
    )
}

/// Random state inside the headway band, away from the range-policy
/// corners of car 3.
pub fn random_ccc_state(rng: &mut ChaCha8Rng) -> FleetState {
    ccc_state(
        rng.random_range(30.0..95.0),
        rng.random_range(5.0..30.0),
        rng.random_range(5.0..30.0),
        rng.random_range(26.0..99.0),
        rng.random_range(5.0..30.0),
    )
}

/// |a - b| relative to the larger magnitude, exact zeros allowed.
pub fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// Worst relative deviation of `GpModel::predict` from the dense oracle
/// over `cases` random windows, five queries each: (mean, variance).
/// Variance error is taken relative to the prior k(q, q): near the data the
/// posterior variance is a difference of two numbers of that size, and the
/// explicit inverse cannot resolve it any better.
pub fn gp_oracle_worst(cases: usize, seed: u64) -> (f64, f64) {
    use lbsc::gp::GpModel;
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut wm, mut wv) = (0.0f64, 0.0f64);
    for _ in 0..cases {
        let (w, hyper) = random_window(&mut rng);
        let model = GpModel::fit(&w, &hyper).unwrap();
        assert_eq!(model.jitter(), 0.0);
        for _ in 0..5 {
            let q: Vec<f64> = (0..hyper.dim()).map(|_| rng.random_range(-4.0..4.0)).collect();
            let ours = model.predict(&q).unwrap();
            let (m, v) = dense_posterior(&w, &hyper, &q);
            wm = wm.max(rel_err(ours.mean, m));
            let prior = hyper.kernel(&q, &q);
            wv = wv.max((ours.variance - v).abs() / prior.max(v.abs()));
        }
    }
    (wm, wv)
}

fn fd_gradient<F: lbsc::dynamics::ScalarField + ?Sized>(f: &F, x: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(x.len(), |k, _| {
        let step = 1e-5 * (1.0 + x[k].abs());
        let (mut xp, mut xm) = (x.clone(), x.clone());
        xp[k] += step;
        xm[k] -= step;
        (f.value(&xp) - f.value(&xm)) / (2.0 * step)
    })
}

fn fd_along<F: lbsc::dynamics::ScalarField + ?Sized>(
    f: &F,
    x: &DVector<f64>,
    dir: &DVector<f64>,
) -> f64 {
    let tau = 1e-5 * (1.0 + x.amax()) / dir.amax().max(1e-12);
    (f.value(&(x + dir * tau)) - f.value(&(x - dir * tau))) / (2.0 * tau)
}

/// ‖a − b‖∞ over the larger of the two norms.
pub fn rel_vec_err(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    let scale = a.amax().max(b.amax());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).amax() / scale
    }
}

/// Worst relative error of analytic gradients and Lie derivatives of h1,
/// h2, their extensions and V against central differences.
pub fn gradient_suite(states: usize, seed: u64) -> f64 {
    use lbsc::controllers::{headway_barriers, tracking_clf, CccModel, ControllerConfig, Variant};
    use lbsc::dynamics::{lie_derivatives, AffineModel, ScalarField};
    use rand::SeedableRng;

    let cfg = ControllerConfig::for_variant(Variant::Lbsc);
    let barriers = headway_barriers(&cfg);
    let clf = tracking_clf(&cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..states {
        let s = random_ccc_state(&mut rng);
        let model = CccModel::new(&s, &cfg);
        let x = CccModel::state_of(&s);
        let ext = [barriers[0].extended(&model), barriers[1].extended(&model)];
        let fields: [&dyn ScalarField; 5] =
            [&barriers[0].field, &barriers[1].field, &ext[0], &ext[1], &clf.field];
        let f = model.drift(&x);
        let g = model.input_map(&x).column(0).into_owned();
        let zero = DVector::zeros(4);
        for field in fields {
            worst = worst.max(rel_vec_err(&field.gradient(&x), &fd_gradient(field, &x)));
            let lie = lie_derivatives(&model, field, &x, &zero, &zero).unwrap();
            worst = worst.max(rel_err(lie.lf, fd_along(field, &x, &f)));
            worst = worst.max(rel_err(lie.lg[0], fd_along(field, &x, &g)));
        }
    }
    worst
}

/// Result of the robust-row property suite.
#[derive(Debug, Clone, Copy)]
pub struct LemmaReport {
    pub checked: usize,
    pub attempts: usize,
    /// Smallest ZCBF margin, dh̃/dt + α(h̃), over all states and samples.
    pub min_barrier_margin: f64,
    /// Smallest -(dV/dt + cV).
    pub min_clf_margin: f64,
}

/// Solves the CCC QP at random states and moments; wherever both slacks
/// come out zero, checks the barrier and Lyapunov conditions for model
/// errors at both ends and the middle of each confidence interval.
pub fn lemma_suite(target: usize, seed: u64) -> LemmaReport {
    use lbsc::constraints::{satisfies_es_clf, satisfies_zcbf};
    use lbsc::controllers::{
        control_with_moments, headway_barriers, tracking_clf, CccModel, ControllerConfig, Variant,
        CHANNEL_STATE_INDEX,
    };
    use lbsc::gp::PosteriorMoment;
    use rand::SeedableRng;

    let cfg = ControllerConfig::for_variant(Variant::Lbsc);
    let barriers = headway_barriers(&cfg);
    let clf = tracking_clf(&cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = LemmaReport {
        checked: 0,
        attempts: 0,
        min_barrier_margin: f64::INFINITY,
        min_clf_margin: f64::INFINITY,
    };
    while r.checked < target && r.attempts < 50 * target {
        r.attempts += 1;
        let s = random_ccc_state(&mut rng);
        let mut moments = [PosteriorMoment::ZERO; 2];
        for m in &mut moments {
            let sd: f64 = rng.random_range(0.0..0.5);
            *m = PosteriorMoment {
                mean: rng.random_range(-1.0..1.0),
                variance: sd * sd,
            };
        }
        let out = control_with_moments(&s, moments, &cfg).unwrap();
        if out.diagnostics.eps > 1e-12 || out.diagnostics.eta > 1e-12 {
            continue;
        }
        r.checked += 1;
        let model = CccModel::new(&s, &cfg);
        let x = CccModel::state_of(&s);
        let offsets = [-cfg.c_delta, 0.0, cfg.c_delta];
        for o3 in offsets {
            for o4 in offsets {
                let mut d = DVector::zeros(4);
                d[CHANNEL_STATE_INDEX[0]] = moments[0].mean + o3 * moments[0].std_dev();
                d[CHANNEL_STATE_INDEX[1]] = moments[1].mean + o4 * moments[1].std_dev();
                for b in &barriers {
                    let c = satisfies_zcbf(b, &model, &x, &[out.u], &d);
                    r.min_barrier_margin = r.min_barrier_margin.min(c.margin);
                }
                let c = satisfies_es_clf(&clf, &model, &x, &[out.u], &d);
                r.min_clf_margin = r.min_clf_margin.min(c.margin);
            }
        }
    }
    r
}
