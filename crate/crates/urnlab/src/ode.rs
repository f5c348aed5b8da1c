//! Fixed-step classical Runge-Kutta integration for vector states.
//!
//! Two entry points: `rk4_mesh` integrates to an arbitrary horizon
//! (shortening the final step to land exactly on it) and records every
//! accepted state; `rk4_fixed` takes exactly `n` steps of size `h`, which
//! keeps meshes closed under the reversal s -> t - s that the fluctuation
//! quadrature relies on. Both fail with `NumericalBlowUp` as soon as a
//! state stops being finite.

use crate::error::{Error, Result};

/// Time mesh with the state recorded at every node.
#[derive(Debug, Clone)]
pub struct Mesh {
    pub step: f64,
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
}

fn step_once<F>(rhs: &mut F, y: &[f64], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> Vec<f64>,
{
    let n = y.len();
    let k1 = rhs(y);
    let mut tmp: Vec<f64> = (0..n).map(|i| y[i] + 0.5 * h * k1[i]).collect();
    let k2 = rhs(&tmp);
    for i in 0..n {
        tmp[i] = y[i] + 0.5 * h * k2[i];
    }
    let k3 = rhs(&tmp);
    for i in 0..n {
        tmp[i] = y[i] + h * k3[i];
    }
    let k4 = rhs(&tmp);
    (0..n)
        .map(|i| y[i] + (h / 6.0) * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect()
}

fn check_finite(y: &[f64], time: f64) -> Result<()> {
    if y.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NumericalBlowUp { time })
    }
}

/// Exactly `n` steps of size `h`; node times are i * h.
pub fn rk4_fixed<F>(mut rhs: F, y0: &[f64], h: f64, n: usize) -> Result<Mesh>
where
    F: FnMut(&[f64]) -> Vec<f64>,
{
    assert!(h > 0.0 && h.is_finite(), "step must be positive");
    let mut times = Vec::with_capacity(n + 1);
    let mut states = Vec::with_capacity(n + 1);
    times.push(0.0);
    states.push(y0.to_vec());
    for i in 1..=n {
        let t = i as f64 * h;
        let next = step_once(&mut rhs, states.last().unwrap(), h);
        check_finite(&next, t)?;
        times.push(t);
        states.push(next);
    }
    Ok(Mesh { step: h, times, states })
}

/// Exactly `n` steps of size `h`, keeping only the final state. Suits
/// large systems where storing the whole mesh would dominate memory.
pub fn rk4_final<F>(mut rhs: F, y0: &[f64], h: f64, n: usize) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Vec<f64>,
{
    assert!(h > 0.0 && h.is_finite(), "step must be positive");
    let mut y = y0.to_vec();
    for i in 1..=n {
        y = step_once(&mut rhs, &y, h);
        check_finite(&y, i as f64 * h)?;
    }
    Ok(y)
}

/// Integrate to `t_end` with step `step`; a final partial step lands the
/// mesh exactly on the horizon.
pub fn rk4_mesh<F>(mut rhs: F, y0: &[f64], t_end: f64, step: f64) -> Result<Mesh>
where
    F: FnMut(&[f64]) -> Vec<f64>,
{
    assert!(t_end >= 0.0 && t_end.is_finite(), "horizon must be finite");
    assert!(step > 0.0 && step.is_finite(), "step must be positive");
    let full = (t_end / step + 1e-9).floor() as usize;
    let mut mesh = rk4_fixed(&mut rhs, y0, step, full)?;
    let last_t = full as f64 * step;
    if t_end - last_t > 1e-12 * t_end.max(1.0) {
        let h = t_end - last_t;
        let next = step_once(&mut rhs, mesh.states.last().unwrap(), h);
        check_finite(&next, t_end)?;
        mesh.times.push(t_end);
        mesh.states.push(next);
    }
    Ok(mesh)
}

/// Composite trapezoid rule on a uniform mesh of spacing `h`.
pub fn trapezoid(values: &[f64], h: f64) -> f64 {
    match values.len() {
        0 | 1 => 0.0,
        n => {
            let interior: f64 = values[1..n - 1].iter().sum();
            h * (0.5 * values[0] + interior + 0.5 * values[n - 1])
        }
    }
}
