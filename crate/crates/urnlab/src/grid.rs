//! Functions on the uniform torus grid.
//!
//! A `GridFunction` holds values at the M sites (a+1)/M. Integrals are the
//! rectangle rule (1/M) sum, which is the pairing under which the grid
//! operators in `limit` are exact adjoints of one another.

use crate::error::{Error, Result};
use crate::expr::{Arity, KernelExpr};
use crate::model::grid_point;

#[derive(Debug, Clone, PartialEq)]
pub struct GridFunction {
    values: Vec<f64>,
}

impl GridFunction {
    pub fn from_values(values: Vec<f64>) -> Self {
        assert!(!values.is_empty(), "grid must have at least one site");
        GridFunction { values }
    }

    pub fn constant(c: f64, m: usize) -> Self {
        Self::from_values(vec![c; m])
    }

    /// Tabulate a univariate expression on the grid.
    pub fn from_expr(expr: &KernelExpr, m: usize) -> Result<Self> {
        if expr.arity() != Arity::Univariate {
            return Err(Error::Config(format!(
                "test function '{}' must be a function of u only",
                expr.source()
            )));
        }
        Ok(Self::from_values(
            (0..m).map(|a| expr.eval1(grid_point(a, m))).collect(),
        ))
    }

    pub fn grid_size(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Rectangle-rule integral over the torus: (1/M) sum of values.
    pub fn integral(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }
}

/// Pairing <f, g> = (1/M) sum f(a) g(a); mu(f) when the first argument is
/// a density.
pub fn pairing(f: &GridFunction, g: &GridFunction) -> f64 {
    assert_eq!(f.grid_size(), g.grid_size(), "grid sizes must match");
    dot_mean(f.values(), g.values())
}

pub(crate) fn dot_mean(f: &[f64], g: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (a, b) in f.iter().zip(g) {
        acc += a * b;
    }
    acc / f.len() as f64
}
