//! Exact first and second moments of the finite-N process.
//!
//! Because every jump rate is linear in the occupation numbers, the means
//! E[X(i)] and mixed second moments E[X(i)X(j)] close into a finite linear
//! ODE system. Integrating it gives exact finite-N references that the
//! simulator must reproduce and that converge to the deterministic limit
//! as N grows, with no sampling error anywhere.
//!
//! With K(i,j) = sum_k k lambda_k, K2(i,j) = sum_k k^2 lambda_k,
//! Lambda(i,j) = sum_k lambda_k (cross events exist only for j != i; the
//! tabulated diagonal entries are subtracted wherever a full matrix
//! product would otherwise include them), and row(i) = sum_{j != i}
//! Lambda(i,j):
//!
//!   dm(i) = (1/N) [ (K^T m)(i) - K(i,i) m(i) - row(i) m(i) ] + b1(i) m(i)
//!
//! and with A = K^T S, dS(i,j) for i != j is G(i,j) + G(j,i) where
//!
//!   G(i,j) = (1/N) [ A(i,j) - K(i,i) S(i,j) - row(i) S(i,j)
//!                    - m(i) K(i,j) ] + b1(i) S(i,j),
//!
//! while the pure second moment evolves as
//!
//!   dS(i,i) = (1/N) [ row(i) (m(i) - 2 S(i,i))
//!                     + 2 (A(i,i) - K(i,i) S(i,i))
//!                     + (K2^T m)(i) - K2(i,i) m(i) ]
//!             + 2 b1(i) S(i,i) + b2(i) m(i).
//!
//! The single matrix product A per evaluation keeps the right-hand side
//! at one O(N^3) pass, which is why second moments are capped at N = 512.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::grid::GridFunction;
use crate::limit::solve_rho;
use crate::model::{discretize, DiscretizedKernel, ModelSpec};
use crate::ode::rk4_final;

/// Second-moment integration is O(N^3) per step; refuse beyond this.
pub const SECOND_MOMENT_CAP: usize = 512;

/// Kernel tables rearranged for the moment right-hand sides.
#[derive(Debug)]
pub struct MomentTables {
    n: usize,
    has_cross: bool,
    /// row(i): total cross rate density out of i, diagonal excluded.
    lam_row: Array1<f64>,
    k_mat: Array2<f64>,
    k_t: Array2<f64>,
    k2_t: Array2<f64>,
    k_diag: Array1<f64>,
    k2_diag: Array1<f64>,
    b1: Array1<f64>,
    b2: Array1<f64>,
    /// k_diag + lam_row as a column, for row-wise broadcasting.
    out_col: Array2<f64>,
    b1_col: Array2<f64>,
}

impl MomentTables {
    pub fn build(kern: &DiscretizedKernel) -> Self {
        let n = kern.grid_size;
        let k_mat = Array2::from_shape_fn((n, n), |(i, j)| kern.at(&kern.c_sum, i, j));
        let k2_mat = Array2::from_shape_fn((n, n), |(i, j)| {
            kern.lambda
                .iter()
                .enumerate()
                .map(|(k, tab)| (k * k) as f64 * kern.at(tab, i, j))
                .sum()
        });
        let lam_row = Array1::from_shape_fn(n, |i| {
            (0..n)
                .filter(|&j| j != i)
                .map(|j| kern.at(&kern.a_sum, i, j))
                .sum()
        });
        let k_diag = Array1::from_shape_fn(n, |i| k_mat[[i, i]]);
        let k2_diag = Array1::from_shape_fn(n, |i| k2_mat[[i, i]]);
        let b1 = Array1::from_vec(kern.b1.clone());
        let b2 = Array1::from_vec(kern.b2.clone());
        let has_cross = kern.a_sum.iter().any(|&x| x > 0.0);
        let out_col = (&k_diag + &lam_row).insert_axis(Axis(1));
        let b1_col = b1.clone().insert_axis(Axis(1));
        MomentTables {
            n,
            has_cross,
            lam_row,
            k_t: k_mat.t().to_owned(),
            k2_t: k2_mat.t().to_owned(),
            k_mat,
            k_diag,
            k2_diag,
            b1,
            b2,
            out_col,
            b1_col,
        }
    }

    pub fn mean_rhs(&self, m: ArrayView1<f64>) -> Array1<f64> {
        let local = &self.b1 * &m;
        if !self.has_cross {
            return local;
        }
        let inv_n = 1.0 / self.n as f64;
        let km = self.k_t.dot(&m);
        (&km - &(&self.k_diag * &m) - &(&self.lam_row * &m)) * inv_n + local
    }

    pub fn second_rhs(&self, m: ArrayView1<f64>, s: ArrayView2<f64>) -> Array2<f64> {
        let n = self.n;
        if !self.has_cross {
            let g = &s * &self.b1_col;
            let mut ds = &g + &g.t();
            for i in 0..n {
                ds[[i, i]] = 2.0 * self.b1[i] * s[[i, i]] + self.b2[i] * m[i];
            }
            return ds;
        }
        let inv_n = 1.0 / n as f64;
        let a = self.k_t.dot(&s);
        let k2tm = self.k2_t.dot(&m);
        let diag: Vec<f64> = (0..n)
            .map(|i| {
                (self.lam_row[i] * (m[i] - 2.0 * s[[i, i]])
                    + 2.0 * (a[[i, i]] - self.k_diag[i] * s[[i, i]])
                    + k2tm[i]
                    - self.k2_diag[i] * m[i])
                    * inv_n
                    + 2.0 * self.b1[i] * s[[i, i]]
                    + self.b2[i] * m[i]
            })
            .collect();
        let m_col = m.insert_axis(Axis(1));
        let mut g = a;
        g -= &(&s * &self.out_col);
        g -= &(&self.k_mat * &m_col);
        g *= inv_n;
        g += &(&s * &self.b1_col);
        let mut ds = &g + &g.t();
        for (i, d) in diag.into_iter().enumerate() {
            ds[[i, i]] = d;
        }
        ds
    }
}

/// Moments at one time: mean vector and raw second-moment matrix.
#[derive(Debug, Clone)]
pub struct MomentState {
    pub time: f64,
    pub mean: Array1<f64>,
    pub second: Array2<f64>,
}

impl MomentState {
    /// Covariance C = S - m m^T.
    pub fn covariance(&self) -> Array2<f64> {
        let n = self.mean.len();
        Array2::from_shape_fn((n, n), |(i, j)| {
            self.second[[i, j]] - self.mean[i] * self.mean[j]
        })
    }

    /// E of the empirical pairing (1/N) sum_i X(i) f(i/N).
    pub fn mean_pairing(&self, f: &GridFunction) -> f64 {
        crate::grid::dot_mean(self.mean.as_slice().unwrap(), f.values())
    }

    /// Exact variance of the centered fluctuation sqrt(N)(mu^N(f) - E mu^N(f)),
    /// which is (f^T C f) / N.
    pub fn fluctuation_variance(&self, f: &GridFunction) -> Result<f64> {
        let n = self.mean.len();
        if f.grid_size() != n {
            return Err(Error::GridMismatch {
                expected: n,
                got: f.grid_size(),
            });
        }
        let fv = ArrayView1::from(f.values());
        let quad = fv.dot(&self.second.dot(&fv));
        let lin = fv.dot(&self.mean);
        Ok((quad - lin * lin) / n as f64)
    }
}

/// Moments at time zero for independent Poisson(phi(i/N)) occupations.
pub fn initial_moments(kern: &DiscretizedKernel) -> MomentState {
    let mean = Array1::from_vec(kern.phi.clone());
    let n = mean.len();
    let mut second = Array2::from_shape_fn((n, n), |(i, j)| mean[i] * mean[j]);
    for i in 0..n {
        second[[i, i]] += mean[i];
    }
    MomentState {
        time: 0.0,
        mean,
        second,
    }
}

fn check_records(record_times: &[f64], step: f64) -> Result<()> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::Config("step must be positive".into()));
    }
    let sorted = record_times.windows(2).all(|w| w[0] <= w[1]);
    if !sorted || record_times.first().is_some_and(|&t| t < 0.0) {
        return Err(Error::Config(
            "record times must be nonnegative and nondecreasing".into(),
        ));
    }
    Ok(())
}

/// March y through the record times, taking ceil(dt / step) RK4 steps per
/// segment so every record lands on a node exactly.
fn integrate_segments<F>(
    mut y: Vec<f64>,
    record_times: &[f64],
    step: f64,
    mut rhs: F,
) -> Result<Vec<(f64, Vec<f64>)>>
where
    F: FnMut(&[f64]) -> Vec<f64>,
{
    let mut out = Vec::with_capacity(record_times.len());
    let mut t_cur = 0.0;
    for &t in record_times {
        let dt = t - t_cur;
        if dt > 1e-12 * t.max(1.0) {
            let n_steps = ((dt / step) - 1e-9).ceil().max(1.0);
            let h = dt / n_steps;
            y = rk4_final(&mut rhs, &y, h, n_steps as usize).map_err(|e| match e {
                Error::NumericalBlowUp { time } => Error::NumericalBlowUp {
                    time: t_cur + time,
                },
                other => other,
            })?;
            t_cur = t;
        }
        out.push((t, y.clone()));
    }
    Ok(out)
}

/// Integrate the mean system alone (O(N^2) per step, no size cap).
pub fn integrate_mean(
    kern: &DiscretizedKernel,
    record_times: &[f64],
    step: f64,
) -> Result<Vec<(f64, Array1<f64>)>> {
    check_records(record_times, step)?;
    let tables = MomentTables::build(kern);
    let y0 = kern.phi.clone();
    let segs = integrate_segments(
        y0,
        record_times,
        step,
        |y| tables.mean_rhs(ArrayView1::from(y)).into_raw_vec(),
    )?;
    Ok(segs
        .into_iter()
        .map(|(t, y)| (t, Array1::from_vec(y)))
        .collect())
}

fn unpack(y: &[f64], n: usize) -> (ArrayView1<'_, f64>, ArrayView2<'_, f64>) {
    (
        ArrayView1::from(&y[..n]),
        ArrayView2::from_shape((n, n), &y[n..]).expect("packed state has n + n^2 entries"),
    )
}

/// Integrate mean and second moments jointly, reporting the exact state at
/// each record time.
pub fn integrate_moments(
    kern: &DiscretizedKernel,
    record_times: &[f64],
    step: f64,
) -> Result<Vec<MomentState>> {
    check_records(record_times, step)?;
    let n = kern.grid_size;
    if n > SECOND_MOMENT_CAP {
        return Err(Error::Config(format!(
            "second-moment integration is O(N^3) per step; N = {n} exceeds the cap of {SECOND_MOMENT_CAP}"
        )));
    }
    let tables = MomentTables::build(kern);
    let init = initial_moments(kern);
    let mut y0 = Vec::with_capacity(n + n * n);
    y0.extend(init.mean.iter());
    y0.extend(init.second.iter());
    let segs = integrate_segments(y0, record_times, step, |y| {
        let (m, s) = unpack(y, n);
        let dm = tables.mean_rhs(m);
        let ds = tables.second_rhs(m, s);
        let mut out = Vec::with_capacity(n + n * n);
        out.extend(dm.iter());
        out.extend(ds.iter());
        out
    })?;
    Ok(segs
        .into_iter()
        .map(|(time, y)| {
            let (m, s) = unpack(&y, n);
            MomentState {
                time,
                mean: m.to_owned(),
                second: s.to_owned(),
            }
        })
        .collect())
}

/// Sup-norm gap over the urn grid between the exact finite-N mean density
/// E[X(i)] and the deterministic limit density at the same points. The
/// limit is solved on the same N-point grid, so the gap isolates the
/// finite-N correction rather than discretization error.
pub fn mean_vs_limit_gap(spec: &ModelSpec, t: f64, step: f64) -> Result<f64> {
    let kern = discretize(spec, spec.n_urns);
    let mean = integrate_mean(&kern, &[t], step)?;
    let rho = solve_rho(&kern, t, step)?;
    let m = &mean.last().expect("one record requested").1;
    let r = rho.final_state();
    Ok(m.iter()
        .zip(r.values())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max))
}
