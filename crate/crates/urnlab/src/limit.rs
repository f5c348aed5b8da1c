//! Deterministic limit objects: grid transport operators, the hydrodynamic
//! density, the fluctuation variance, and limiting hitting times.
//!
//! On a grid of M sites with tables a = sum_k lambda_k and
//! c = sum_k k lambda_k, the three operators are
//!
//! ```text
//! (T f)(a) = (1/M) sum_b [c(a,b) f(b) - a(a,b) f(a)] + b1(a) f(a)
//! (T* g)(a) = b1(a) g(a) + (1/M) sum_b c(b,a) g(b) - g(a) (1/M) sum_b a(a,b)
//! (Q f)(a) = (1/M) sum_b sum_k lambda_k(a,b) (k f(b) - f(a))^2 + b2(a) f(a)^2
//! ```
//!
//! T and T* are exact transposes under the rectangle pairing; the density
//! solves d rho / dt = T* rho from rho_0 = phi, and the variance of the
//! limiting fluctuation field is assembled from T-propagation of the test
//! function plus a time integral of the carre-du-champ Q along the density.

use crate::error::{Error, Result};
use crate::grid::{dot_mean, pairing, GridFunction};
use crate::model::DiscretizedKernel;
use crate::ode::{rk4_fixed, rk4_mesh, trapezoid, Mesh};

fn check_grid(f: &GridFunction, kern: &DiscretizedKernel) -> Result<()> {
    if f.grid_size() == kern.grid_size {
        Ok(())
    } else {
        Err(Error::GridMismatch {
            expected: kern.grid_size,
            got: f.grid_size(),
        })
    }
}

/// (1/M) sum_b a(a, b) for every row a.
fn outflow_row(kern: &DiscretizedKernel) -> Vec<f64> {
    let m = kern.grid_size;
    (0..m)
        .map(|a| kern.a_sum[a * m..(a + 1) * m].iter().sum::<f64>() / m as f64)
        .collect()
}

fn apply_transport(values: &[f64], kern: &DiscretizedKernel, outflow: &[f64]) -> Vec<f64> {
    let m = kern.grid_size;
    (0..m)
        .map(|a| {
            let row = &kern.c_sum[a * m..(a + 1) * m];
            let gain = dot_mean(row, values);
            gain - outflow[a] * values[a] + kern.b1[a] * values[a]
        })
        .collect()
}

fn apply_transport_adjoint(values: &[f64], kern: &DiscretizedKernel, outflow: &[f64]) -> Vec<f64> {
    let m = kern.grid_size;
    (0..m)
        .map(|a| {
            let mut gain = 0.0;
            for b in 0..m {
                gain += kern.c_sum[b * m + a] * values[b];
            }
            kern.b1[a] * values[a] + gain / m as f64 - outflow[a] * values[a]
        })
        .collect()
}

fn apply_carre_du_champ(values: &[f64], kern: &DiscretizedKernel) -> Vec<f64> {
    let m = kern.grid_size;
    let mut out = vec![0.0; m];
    for (k, table) in kern.lambda.iter().enumerate() {
        let kf = k as f64;
        for a in 0..m {
            let row = &table[a * m..(a + 1) * m];
            let fa = values[a];
            let mut acc = 0.0;
            for b in 0..m {
                let jump = kf * values[b] - fa;
                acc += row[b] * jump * jump;
            }
            out[a] += acc / m as f64;
        }
    }
    for a in 0..m {
        out[a] += kern.b2[a] * values[a] * values[a];
    }
    out
}

/// Generator of the test-function semigroup (observable transport).
pub fn apply_p1(f: &GridFunction, kern: &DiscretizedKernel) -> Result<GridFunction> {
    check_grid(f, kern)?;
    let outflow = outflow_row(kern);
    Ok(GridFunction::from_values(apply_transport(
        f.values(),
        kern,
        &outflow,
    )))
}

/// Adjoint generator; drives the density evolution.
pub fn apply_p2(g: &GridFunction, kern: &DiscretizedKernel) -> Result<GridFunction> {
    check_grid(g, kern)?;
    let outflow = outflow_row(kern);
    Ok(GridFunction::from_values(apply_transport_adjoint(
        g.values(),
        kern,
        &outflow,
    )))
}

/// Carre du champ: pointwise quadratic variation rate of the noise.
/// Nonnegative by construction (a weighted sum of squares).
pub fn apply_p3(f: &GridFunction, kern: &DiscretizedKernel) -> Result<GridFunction> {
    check_grid(f, kern)?;
    Ok(GridFunction::from_values(apply_carre_du_champ(
        f.values(),
        kern,
    )))
}

/// A time-indexed family of grid functions on a uniform mesh.
#[derive(Debug, Clone)]
pub struct LimitSolution {
    pub step: f64,
    pub times: Vec<f64>,
    pub states: Vec<GridFunction>,
}

impl LimitSolution {
    fn from_mesh(mesh: Mesh) -> Self {
        LimitSolution {
            step: mesh.step,
            times: mesh.times,
            states: mesh.states.into_iter().map(GridFunction::from_values).collect(),
        }
    }

    pub fn final_state(&self) -> &GridFunction {
        self.states.last().expect("mesh always holds the initial state")
    }
}

/// Solve the density equation d rho / dt = T* rho from rho_0 = phi.
pub fn solve_rho(kern: &DiscretizedKernel, t_end: f64, step: f64) -> Result<LimitSolution> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::Config("step must be positive".into()));
    }
    let outflow = outflow_row(kern);
    let mesh = rk4_mesh(
        |y| apply_transport_adjoint(y, kern, &outflow),
        &kern.phi,
        t_end,
        step,
    )?;
    Ok(LimitSolution::from_mesh(mesh))
}

/// Propagate a test function by the observable semigroup: h_tau at the
/// mesh times, h_0 = f.
pub fn propagate_p1(
    f: &GridFunction,
    kern: &DiscretizedKernel,
    t_end: f64,
    step: f64,
) -> Result<LimitSolution> {
    check_grid(f, kern)?;
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::Config("step must be positive".into()));
    }
    let outflow = outflow_row(kern);
    let mesh = rk4_mesh(
        |y| apply_transport(y, kern, &outflow),
        f.values(),
        t_end,
        step,
    )?;
    Ok(LimitSolution::from_mesh(mesh))
}

/// Variance of the limiting fluctuation field tested against f, split into
/// the propagated initial randomness and the accumulated event noise.
/// `total` is exactly `initial + noise`.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct FluctuationVariance {
    pub total: f64,
    pub initial: f64,
    pub noise: f64,
}

/// theta_t^2(f): integral of phi * h_t^2 plus the time integral of the
/// carre du champ of h_{t-s} along the density. Uses a uniform internal
/// mesh of width t / ceil(t / step) so that s and t - s land on the same
/// nodes, one forward propagation serving both roles.
pub fn theta_squared(
    f: &GridFunction,
    kern: &DiscretizedKernel,
    t: f64,
    step: f64,
) -> Result<FluctuationVariance> {
    check_grid(f, kern)?;
    if !(t >= 0.0 && t.is_finite()) {
        return Err(Error::Config("time must be nonnegative and finite".into()));
    }
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::Config("step must be positive".into()));
    }
    let phi = GridFunction::from_values(kern.phi.clone());
    if t == 0.0 {
        let sq = GridFunction::from_values(f.values().iter().map(|x| x * x).collect());
        let initial = pairing(&phi, &sq);
        return Ok(FluctuationVariance {
            total: initial,
            initial,
            noise: 0.0,
        });
    }
    let n = ((t / step - 1e-12).ceil() as usize).max(1);
    let h = t / n as f64;
    let outflow = outflow_row(kern);
    let fwd = rk4_fixed(|y| apply_transport(y, kern, &outflow), f.values(), h, n)?;
    let dens = rk4_fixed(|y| apply_transport_adjoint(y, kern, &outflow), &kern.phi, h, n)?;
    let h_t = &fwd.states[n];
    let initial = dot_mean(&kern.phi, &h_t.iter().map(|x| x * x).collect::<Vec<_>>());
    // Node l is time s = l h; the integrand pairs rho_s with Q h_{t-s}.
    let integrand: Vec<f64> = (0..=n)
        .map(|l| dot_mean(&dens.states[l], &apply_carre_du_champ(&fwd.states[n - l], kern)))
        .collect();
    let noise = trapezoid(&integrand, h);
    Ok(FluctuationVariance {
        total: initial + noise,
        initial,
        noise,
    })
}

/// mu_t(f) and theta_t^2(f) at every node of a uniform mesh over [0, t_end].
#[derive(Debug, Clone)]
pub struct ObservableCurve {
    pub times: Vec<f64>,
    pub mu: Vec<f64>,
    pub theta: Vec<FluctuationVariance>,
}

/// The observable curve along a uniform mesh of width t_end / ceil(t_end / step).
/// One density solve and one propagation of f serve every node, so the whole
/// curve costs little more than the endpoint alone.
pub fn observable_curve(
    f: &GridFunction,
    kern: &DiscretizedKernel,
    t_end: f64,
    step: f64,
) -> Result<ObservableCurve> {
    check_grid(f, kern)?;
    if !(t_end >= 0.0 && t_end.is_finite()) {
        return Err(Error::Config("time must be nonnegative and finite".into()));
    }
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::Config("step must be positive".into()));
    }
    let n = if t_end > 0.0 {
        ((t_end / step - 1e-12).ceil() as usize).max(1)
    } else {
        0
    };
    let outflow = outflow_row(kern);
    let (fwd, dens) = if n == 0 {
        let still = |y: &[f64]| Mesh {
            step: 0.0,
            times: vec![0.0],
            states: vec![y.to_vec()],
        };
        (still(f.values()), still(&kern.phi))
    } else {
        let h = t_end / n as f64;
        (
            rk4_fixed(|y| apply_transport(y, kern, &outflow), f.values(), h, n)?,
            rk4_fixed(|y| apply_transport_adjoint(y, kern, &outflow), &kern.phi, h, n)?,
        )
    };
    let h = fwd.step;
    let q: Vec<Vec<f64>> = fwd
        .states
        .iter()
        .map(|g| apply_carre_du_champ(g, kern))
        .collect();
    let mut times = Vec::with_capacity(n + 1);
    let mut mu = Vec::with_capacity(n + 1);
    let mut theta = Vec::with_capacity(n + 1);
    for k in 0..=n {
        times.push(k as f64 * h);
        mu.push(dot_mean(&dens.states[k], f.values()));
        let sq: Vec<f64> = fwd.states[k].iter().map(|x| x * x).collect();
        let initial = dot_mean(&kern.phi, &sq);
        let noise = if k == 0 {
            0.0
        } else {
            let integrand: Vec<f64> = (0..=k)
                .map(|l| dot_mean(&dens.states[l], &q[k - l]))
                .collect();
            trapezoid(&integrand, h)
        };
        theta.push(FluctuationVariance {
            total: initial + noise,
            initial,
            noise,
        });
    }
    Ok(ObservableCurve { times, mu, theta })
}

/// Quadratic variation rate mu(Q g) computed directly.
pub fn noise_rate(g: &GridFunction, rho: &GridFunction, kern: &DiscretizedKernel) -> Result<f64> {
    check_grid(g, kern)?;
    check_grid(rho, kern)?;
    Ok(dot_mean(rho.values(), &apply_carre_du_champ(g.values(), kern)))
}

/// The same rate assembled from the squared norms of the constituent noise
/// operators: the in-place multiplier contributes (1/M) sum_a b2 rho g^2 and
/// each offspring count k a double sum of lambda_k rho (k g(b) - g(a))^2.
/// Cross-check for `noise_rate`; equal up to summation order.
pub fn noise_rate_by_parts(
    g: &GridFunction,
    rho: &GridFunction,
    kern: &DiscretizedKernel,
) -> Result<f64> {
    check_grid(g, kern)?;
    check_grid(rho, kern)?;
    let m = kern.grid_size;
    let gv = g.values();
    let rv = rho.values();
    let mut inplace_norm = 0.0;
    for a in 0..m {
        inplace_norm += kern.b2[a] * rv[a] * gv[a] * gv[a];
    }
    inplace_norm /= m as f64;
    let mut cross_norm = 0.0;
    for (k, table) in kern.lambda.iter().enumerate() {
        let kf = k as f64;
        let mut norm_k = 0.0;
        for a in 0..m {
            let row = &table[a * m..(a + 1) * m];
            let mut acc = 0.0;
            for b in 0..m {
                let jump = kf * gv[b] - gv[a];
                acc += row[b] * rv[a] * jump * jump;
            }
            norm_k += acc;
        }
        cross_norm += norm_k / (m * m) as f64;
    }
    Ok(inplace_norm + cross_norm)
}

/// First time the limit pairing mu_t(f) reaches `level`, with the local
/// slope mu_tau(T f) and whether the hitting CLT applies (slope > 0).
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct HittingLimit {
    pub tau: f64,
    pub slope: f64,
    pub applicable: bool,
}

/// Locate the first crossing of `level` by mu_t(f) via mesh scan plus
/// bisection inside the bracketing step (tolerance 1e-10 in t). Ties at
/// mesh points resolve to the earliest node at or above the level.
pub fn hitting_time_limit(
    f: &GridFunction,
    level: f64,
    kern: &DiscretizedKernel,
    step: f64,
    max_horizon: f64,
) -> Result<HittingLimit> {
    check_grid(f, kern)?;
    let sol = solve_rho(kern, max_horizon, step)?;
    let outflow = outflow_row(kern);
    let slope_at = |rho: &GridFunction| -> f64 {
        let tf = apply_transport(f.values(), kern, &outflow);
        dot_mean(rho.values(), &tf)
    };
    let mut supremum = f64::NEG_INFINITY;
    let mut bracket: Option<usize> = None;
    for (l, state) in sol.states.iter().enumerate() {
        let mu = pairing(state, f);
        supremum = supremum.max(mu);
        if mu >= level {
            bracket = Some(l);
            break;
        }
    }
    let Some(l) = bracket else {
        return Err(Error::NotHit {
            level,
            horizon: max_horizon,
            supremum,
        });
    };
    if l == 0 {
        let slope = slope_at(&sol.states[0]);
        return Ok(HittingLimit {
            tau: 0.0,
            slope,
            applicable: slope > 0.0,
        });
    }
    // Bisect inside [times[l-1], times[l]]; the state at interior times is
    // one short RK4 step from the left node.
    let t_lo = sol.times[l - 1];
    let t_hi = sol.times[l];
    let base = sol.states[l - 1].values().to_vec();
    let state_at = |dt: f64| -> Vec<f64> {
        if dt == 0.0 {
            return base.clone();
        }
        rk4_fixed(|y| apply_transport_adjoint(y, kern, &outflow), &base, dt, 1)
            .expect("single interior step of a step that already succeeded")
            .states
            .pop()
            .unwrap()
    };
    let (mut lo, mut hi) = (0.0, t_hi - t_lo);
    while hi - lo > 1e-10 {
        let mid = 0.5 * (lo + hi);
        let mu = dot_mean(&state_at(mid), f.values());
        if mu >= level {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let tau = t_lo + hi;
    let rho_tau = GridFunction::from_values(state_at(hi));
    let slope = slope_at(&rho_tau);
    Ok(HittingLimit {
        tau,
        slope,
        applicable: slope > 0.0,
    })
}

/// Closed forms for spatially constant offspring intensities q_k with no
/// cross events: mass n_t = n0 exp(A t) with A = sum (k-1) q_k, and the
/// fluctuation variance n0 exp(2At) + B n0 (exp(2At) - exp(At)) / A with
/// B = sum (k-1)^2 q_k, reducing to n0 (1 + B t) when A = 0.
#[derive(Debug, Clone, Copy)]
pub struct DensityForms {
    pub mass: f64,
    pub variance: f64,
}

pub fn density_dependent_forms(q: &[f64], mass0: f64, t: f64) -> DensityForms {
    let mut a = 0.0;
    let mut b = 0.0;
    for (k, &qk) in q.iter().enumerate() {
        let w = k as f64 - 1.0;
        a += w * qk;
        b += w * w * qk;
    }
    let mass = mass0 * (a * t).exp();
    let variance = if a == 0.0 {
        mass0 * (1.0 + b * t)
    } else {
        mass0 * (2.0 * a * t).exp() + b * mass0 * ((2.0 * a * t).exp() - (a * t).exp()) / a
    };
    DensityForms { mass, variance }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{discretize, ModelSpec};
    use crate::rng::SeedKey;
    use rand::Rng;

    const E: f64 = std::f64::consts::E;

    fn model(json: &str) -> ModelSpec {
        ModelSpec::from_json_str(json).unwrap().0
    }

    fn model_a() -> ModelSpec {
        model(
            r#"{"n_urns": 100, "k_max": 2, "lambda": ["0", "1"], "psi": ["0", "0", "1"],
                "phi": "1", "horizon": 1.0, "epsilon0": 1.0}"#,
        )
    }

    fn model_b() -> ModelSpec {
        model(
            r#"{"n_urns": 100, "k_max": 0, "lambda": [], "psi": ["1"],
                "phi": "1", "horizon": 1.0, "epsilon0": 1.0}"#,
        )
    }

    fn model_c() -> ModelSpec {
        model(
            r#"{"n_urns": 100, "k_max": 1, "lambda": ["0", "1+0.5*cos(2*pi*(u-v))"],
                "psi": [], "phi": "1", "horizon": 1.0, "epsilon0": 1.0}"#,
        )
    }

    fn random_grid_function(m: usize, rng: &mut impl Rng) -> GridFunction {
        GridFunction::from_values((0..m).map(|_| rng.gen_range(-2.0..2.0)).collect())
    }

    #[test]
    fn operators_on_constant_one() {
        // Birth-migration model: T 1 = T* 1 = Q 1 = b-sums = 1.
        let kern = discretize(&model_a(), 32);
        let one = GridFunction::constant(1.0, 32);
        for op in [apply_p1(&one, &kern), apply_p2(&one, &kern), apply_p3(&one, &kern)] {
            let vals = op.unwrap();
            for &x in vals.values() {
                assert!((x - 1.0).abs() < 1e-12);
            }
        }
        // Pure death: T 1 = -1, Q 1 = +1.
        let kern_b = discretize(&model_b(), 32);
        assert!((apply_p1(&one, &kern_b).unwrap().values()[0] + 1.0).abs() < 1e-15);
        assert!((apply_p3(&one, &kern_b).unwrap().values()[0] - 1.0).abs() < 1e-15);
        // Conservative exchange: T 1 = 0.
        let kern_c = discretize(&model_c(), 32);
        for &x in apply_p1(&one, &kern_c).unwrap().values() {
            assert!(x.abs() < 1e-13);
        }
    }

    #[test]
    fn transport_and_adjoint_are_exact_adjoints() {
        let mixed = model(
            r#"{"n_urns": 100, "k_max": 3,
                "lambda": ["0.25", "1+0.5*cos(2*pi*(u-v))", "0", "0.5+0.5*sin(2*pi*u)*sin(2*pi*v)"],
                "psi": ["0.5", "0", "1+0.5*sin(2*pi*u)"],
                "phi": "1", "horizon": 1.0, "epsilon0": 1.0}"#,
        );
        for m in [16, 64] {
            let kern = discretize(&mixed, m);
            let mut rng = SeedKey::new(11).stream(m as u64);
            for _ in 0..100 {
                let f = random_grid_function(m, &mut rng);
                let g = random_grid_function(m, &mut rng);
                let lhs = pairing(&apply_p2(&g, &kern).unwrap(), &f);
                let rhs = pairing(&g, &apply_p1(&f, &kern).unwrap());
                let scale = lhs.abs().max(rhs.abs()).max(1e-300);
                assert!(
                    ((lhs - rhs) / scale).abs() <= 1e-12,
                    "adjointness violated at M = {m}: {lhs} vs {rhs}"
                );
            }
        }
    }

    #[test]
    fn carre_du_champ_is_nonnegative() {
        let mixed = model(
            r#"{"n_urns": 100, "k_max": 2, "lambda": ["0.25", "1", "0.5"],
                "psi": ["1", "0", "0.5"], "phi": "1", "horizon": 1.0, "epsilon0": 1.0}"#,
        );
        let kern = discretize(&mixed, 24);
        let mut rng = SeedKey::new(3).stream(0);
        for _ in 0..50 {
            let f = random_grid_function(24, &mut rng);
            for &x in apply_p3(&f, &kern).unwrap().values() {
                assert!(x >= 0.0);
            }
        }
    }

    #[test]
    fn density_solution_matches_closed_forms() {
        // Growth: rho_t = e^t.
        let sol = solve_rho(&discretize(&model_a(), 16), 1.0, 1e-3).unwrap();
        for &x in sol.final_state().values() {
            assert!((x - E).abs() < 1e-10);
        }
        // Decay: rho_t = e^{-t}.
        let sol = solve_rho(&discretize(&model_b(), 16), 1.0, 1e-3).unwrap();
        for &x in sol.final_state().values() {
            assert!((x - (-1.0f64).exp()).abs() < 1e-12);
        }
        // Conservative exchange from uniform start stays uniform.
        let sol = solve_rho(&discretize(&model_c(), 16), 1.0, 1e-3).unwrap();
        for &x in sol.final_state().values() {
            assert!((x - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn density_mass_follows_the_scalar_growth_law() {
        // Nonuniform initial density, uniform branching: total mass still
        // grows like e^t while the profile flattens toward uniform.
        let spec = model(
            r#"{"n_urns": 100, "k_max": 2, "lambda": ["0", "1"], "psi": ["0", "0", "1"],
                "phi": "1+0.5*sin(2*pi*u)", "horizon": 1.0, "epsilon0": 1.0}"#,
        );
        let sol = solve_rho(&discretize(&spec, 64), 1.0, 1e-3).unwrap();
        assert!((sol.final_state().integral() - E).abs() < 1e-10);
    }

    #[test]
    fn propagation_preserves_grid_and_grows_like_the_semigroup() {
        let kern = discretize(&model_a(), 16);
        let f = GridFunction::constant(1.0, 16);
        let hs = propagate_p1(&f, &kern, 1.0, 1e-3).unwrap();
        // T 1 = 1 for this model, so h_t = e^t.
        assert!((hs.final_state().values()[7] - E).abs() < 1e-10);
    }

    #[test]
    fn solver_rejects_grid_mismatch_and_bad_step() {
        let kern = discretize(&model_a(), 16);
        let wrong = GridFunction::constant(1.0, 8);
        assert!(matches!(
            apply_p1(&wrong, &kern),
            Err(Error::GridMismatch { expected: 16, got: 8 })
        ));
        assert!(solve_rho(&kern, 1.0, 0.0).is_err());
    }

    #[test]
    fn fluctuation_variance_matches_branching_closed_form() {
        // theta_1^2(1) = 2 e^2 - e for unit birth, and the decomposition is
        // e^2 (initial) plus e^2 - e (noise).
        let kern = discretize(&model_a(), 64);
        let f = GridFunction::constant(1.0, 64);
        let th = theta_squared(&f, &kern, 1.0, 1e-3).unwrap();
        assert!((th.total - (2.0 * E * E - E)).abs() < 1e-6, "total = {}", th.total);
        assert!((th.initial - E * E).abs() < 1e-6);
        assert!((th.noise - (E * E - E)).abs() < 1e-6);
        assert_eq!(th.total.to_bits(), (th.initial + th.noise).to_bits());
        // Same numbers from the scalar density-dependent chain q_2 = 1.
        let forms = density_dependent_forms(&[0.0, 0.0, 1.0], 1.0, 1.0);
        assert!((forms.mass - E).abs() < 1e-15);
        assert!((th.total - forms.variance).abs() < 1e-6);
    }

    #[test]
    fn fluctuation_variance_of_pure_death() {
        // q_0 = 1: mass e^{-t}, variance e^{-t}.
        let kern = discretize(&model_b(), 32);
        let f = GridFunction::constant(1.0, 32);
        let th = theta_squared(&f, &kern, 1.0, 1e-3).unwrap();
        let forms = density_dependent_forms(&[1.0], 1.0, 1.0);
        assert!((forms.mass - (-1.0f64).exp()).abs() < 1e-15);
        assert!((th.total - forms.variance).abs() < 1e-7, "{} vs {}", th.total, forms.variance);
    }

    #[test]
    fn fluctuation_noise_is_monotone_in_time_and_zero_at_zero() {
        let kern = discretize(&model_a(), 32);
        let f = GridFunction::from_expr(
            &crate::expr::KernelExpr::parse("1+0.5*cos(2*pi*u)", crate::expr::Arity::Univariate)
                .unwrap(),
            32,
        )
        .unwrap();
        let at_zero = theta_squared(&f, &kern, 0.0, 1e-3).unwrap();
        assert_eq!(at_zero.noise, 0.0);
        // Initial part at t = 0 is the plain second moment of f under phi.
        let sq = GridFunction::from_values(f.values().iter().map(|x| x * x).collect());
        assert!((at_zero.initial - sq.integral()).abs() < 1e-15);
        let mut last = 0.0;
        for t in [0.25, 0.5, 0.75, 1.0] {
            let th = theta_squared(&f, &kern, t, 1e-2).unwrap();
            assert!(th.noise >= last, "noise not monotone at t = {t}");
            last = th.noise;
        }
    }

    #[test]
    fn observable_curve_endpoint_matches_the_single_shot_solvers() {
        let mixed = model(
            r#"{"n_urns": 100, "k_max": 2,
                "lambda": ["0.25", "1+0.5*cos(2*pi*(u-v))", "0.125"],
                "psi": ["0.5", "0", "1"],
                "phi": "1+0.5*sin(2*pi*u)", "horizon": 1.0, "epsilon0": 1.0}"#,
        );
        let kern = discretize(&mixed, 32);
        let f = GridFunction::from_expr(
            &crate::expr::KernelExpr::parse("1+0.5*cos(2*pi*u)", crate::expr::Arity::Univariate)
                .unwrap(),
            32,
        )
        .unwrap();
        let curve = observable_curve(&f, &kern, 0.7, 1e-2).unwrap();
        assert_eq!(curve.times.len(), 71);
        assert_eq!(curve.theta[0].noise, 0.0);
        let phi = GridFunction::from_values(kern.phi.clone());
        assert!((curve.mu[0] - pairing(&phi, &f)).abs() < 1e-15);
        // Both paths run the same mesh through the same arithmetic.
        let single = theta_squared(&f, &kern, 0.7, 1e-2).unwrap();
        let last = curve.theta.last().unwrap();
        assert_eq!(last.total, single.total);
        assert_eq!(last.initial, single.initial);
        assert_eq!(last.noise, single.noise);
        let rho = solve_rho(&kern, 0.7, 1e-2).unwrap();
        assert!((curve.mu.last().unwrap() - pairing(rho.final_state(), &f)).abs() < 1e-13);
        // A zero-length horizon still yields the t = 0 row.
        let flat = observable_curve(&f, &kern, 0.0, 1e-2).unwrap();
        assert_eq!(flat.times, vec![0.0]);
        assert_eq!(flat.theta[0].total, flat.theta[0].initial);
    }

    #[test]
    fn noise_rate_agrees_with_operator_norm_decomposition() {
        let mixed = model(
            r#"{"n_urns": 100, "k_max": 2,
                "lambda": ["0.25", "1+0.5*cos(2*pi*(u-v))", "0.125"],
                "psi": ["0.5", "0", "1"],
                "phi": "1+0.5*sin(2*pi*u)", "horizon": 1.0, "epsilon0": 1.0}"#,
        );
        let kern = discretize(&mixed, 48);
        let mut rng = SeedKey::new(9).stream(0);
        let rho = GridFunction::from_values((0..48).map(|_| rng.gen_range(0.0..3.0)).collect());
        for _ in 0..20 {
            let g = random_grid_function(48, &mut rng);
            let direct = noise_rate(&g, &rho, &kern).unwrap();
            let by_parts = noise_rate_by_parts(&g, &rho, &kern).unwrap();
            let scale = direct.abs().max(1.0);
            assert!(
                ((direct - by_parts) / scale).abs() < 1e-12,
                "{direct} vs {by_parts}"
            );
        }
    }

    #[test]
    fn refining_the_grid_changes_the_density_only_at_quadrature_order() {
        // Smooth periodic data with full Fourier content: the rectangle
        // rule error is visible at M = 8 and collapses fast under
        // refinement. (Data discontinuous at the wrap point would knock
        // this down to first order.)
        let spec = model(
            r#"{"n_urns": 100, "k_max": 1, "lambda": ["0", "exp(cos(2*pi*(u-v)))"],
                "psi": ["exp(sin(2*pi*u))"], "phi": "exp(0-cos(2*pi*u))", "horizon": 1.0, "epsilon0": 1.0}"#,
        );
        let step = 1e-3;
        let err_of = |m: usize| -> f64 {
            let coarse = solve_rho(&discretize(&spec, m), 1.0, step).unwrap();
            let fine = solve_rho(&discretize(&spec, 2 * m), 1.0, step).unwrap();
            let cv = coarse.final_state().values();
            let fv = fine.final_state().values();
            (0..m)
                .map(|a| (cv[a] - fv[2 * a + 1]).abs())
                .fold(0.0f64, f64::max)
        };
        let e8 = err_of(8);
        let e16 = err_of(16);
        assert!(e8 > 1e-12, "expected a visible coarse-grid error, got {e8}");
        assert!(e16 <= e8 / 4.0 + 1e-12, "refinement did not contract: {e8} -> {e16}");
    }

    #[test]
    fn hitting_time_of_the_growth_model() {
        let kern = discretize(&model_a(), 32);
        let f = GridFunction::constant(1.0, 32);
        let hit = hitting_time_limit(&f, E, &kern, 1e-3, 3.0).unwrap();
        assert!((hit.tau - 1.0).abs() < 1e-8, "tau = {}", hit.tau);
        assert!((hit.slope - E).abs() < 1e-6);
        assert!(hit.applicable);
        // Residual consistency at the reported time.
        let sol = solve_rho(&kern, hit.tau, 1e-3).unwrap();
        let mu = pairing(sol.final_state(), &f);
        assert!((mu - E).abs() <= 1e-8 * E);
    }

    #[test]
    fn hitting_reports_level_already_reached_and_never_reached() {
        let kern = discretize(&model_a(), 16);
        let f = GridFunction::constant(1.0, 16);
        let at_zero = hitting_time_limit(&f, 0.5, &kern, 1e-3, 1.0).unwrap();
        assert_eq!(at_zero.tau, 0.0);
        assert!(at_zero.applicable);
        // Pure death never climbs to 2.
        let kern_b = discretize(&model_b(), 16);
        match hitting_time_limit(&f, 2.0, &kern_b, 1e-3, 4.0) {
            Err(Error::NotHit { supremum, .. }) => assert!((supremum - 1.0).abs() < 1e-12),
            other => panic!("expected NotHit, got {other:?}"),
        }
    }

    #[test]
    fn hitting_slope_flag_goes_false_for_conservative_dynamics() {
        // Exchange dynamics hold mu_t(1) = 1; hitting level 1 at tau = 0
        // with zero slope must be flagged inapplicable.
        let kern = discretize(&model_c(), 16);
        let f = GridFunction::constant(1.0, 16);
        let hit = hitting_time_limit(&f, 1.0, &kern, 1e-3, 1.0).unwrap();
        assert_eq!(hit.tau, 0.0);
        assert!(hit.slope.abs() < 1e-12);
        assert!(!hit.applicable);
    }

    #[test]
    fn density_forms_handle_critical_balance() {
        // q_0 = q_2 = 1: A = 0, B = 2; mass constant, variance n0 (1 + 2t).
        let forms = density_dependent_forms(&[1.0, 0.0, 1.0], 3.0, 0.5);
        assert!((forms.mass - 3.0).abs() < 1e-15);
        assert!((forms.variance - 3.0 * 2.0).abs() < 1e-12);
    }
}
