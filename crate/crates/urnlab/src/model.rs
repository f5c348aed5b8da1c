//! Model definition, validation, and grid discretization.
//!
//! A model file is JSON:
//!
//! ```json
//! {
//!   "n_urns": 200,
//!   "k_max": 2,
//!   "lambda": ["0", "1"],
//!   "psi": ["0", "0", "1"],
//!   "phi": "1",
//!   "horizon": 1.0,
//!   "epsilon0": 1.0
//! }
//! ```
//!
//! `lambda[k]` is the rate kernel for a cross event with k offspring
//! (a function of (u, v)), `psi[k]` the in-place intensity (a function of
//! u). Arrays shorter than `k_max + 1` are padded with the zero kernel.
//! `phi` is the initial mean density. Grid index a (0-based, size M)
//! corresponds to the torus point (a + 1) / M throughout the crate.

use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};
use crate::expr::{Arity, KernelExpr};

/// Torus point for 0-based grid index `idx` on a grid of `m` sites.
pub fn grid_point(idx: usize, m: usize) -> f64 {
    (idx + 1) as f64 / m as f64
}

/// Raw model file contents, kept for echoing into reports.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelFile {
    pub n_urns: usize,
    pub k_max: usize,
    #[serde(default)]
    pub lambda: Vec<String>,
    #[serde(default)]
    pub psi: Vec<String>,
    pub phi: String,
    pub horizon: f64,
    pub epsilon0: f64,
}

/// A parsed model: kernel families, initial density, and run parameters.
#[derive(Debug, Clone)]
pub struct ModelSpec {
    pub n_urns: usize,
    pub k_max: usize,
    /// Cross-event kernels, index k = 0..=k_max, functions of (u, v).
    pub lambda: Vec<KernelExpr>,
    /// In-place intensities, index k = 0..=k_max, functions of u.
    pub psi: Vec<KernelExpr>,
    /// Initial mean density.
    pub phi: KernelExpr,
    pub horizon: f64,
    pub epsilon0: f64,
}

impl ModelSpec {
    pub fn from_file(file: &ModelFile) -> Result<Self> {
        if file.n_urns == 0 {
            return Err(Error::Config("n_urns must be at least 1".into()));
        }
        if !(file.horizon.is_finite() && file.horizon > 0.0) {
            return Err(Error::Config("horizon must be positive and finite".into()));
        }
        if !(file.epsilon0.is_finite() && file.epsilon0 > 0.0) {
            return Err(Error::Config("epsilon0 must be positive and finite".into()));
        }
        let width = file.k_max + 1;
        if file.lambda.len() > width || file.psi.len() > width {
            return Err(Error::Config(format!(
                "kernel arrays may have at most k_max + 1 = {width} entries"
            )));
        }
        let parse_family = |texts: &[String], arity: Arity, tag: &str| -> Result<Vec<KernelExpr>> {
            let mut out = Vec::with_capacity(width);
            for (k, text) in texts.iter().enumerate() {
                out.push(KernelExpr::parse(text, arity).map_err(|e| match e {
                    Error::Parse { position, message } => Error::Parse {
                        position,
                        message: format!("{tag}[{k}]: {message}"),
                    },
                    other => other,
                })?);
            }
            while out.len() < width {
                out.push(KernelExpr::zero(arity));
            }
            Ok(out)
        };
        Ok(ModelSpec {
            n_urns: file.n_urns,
            k_max: file.k_max,
            lambda: parse_family(&file.lambda, Arity::Bivariate, "lambda")?,
            psi: parse_family(&file.psi, Arity::Univariate, "psi")?,
            phi: KernelExpr::parse(&file.phi, Arity::Univariate).map_err(|e| match e {
                Error::Parse { position, message } => Error::Parse {
                    position,
                    message: format!("phi: {message}"),
                },
                other => other,
            })?,
            horizon: file.horizon,
            epsilon0: file.epsilon0,
        })
    }

    pub fn from_json_str(text: &str) -> Result<(Self, ModelFile)> {
        let file: ModelFile = serde_json::from_str(text)?;
        Ok((Self::from_file(&file)?, file))
    }

    pub fn load(path: &Path) -> Result<(Self, ModelFile)> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json_str(&text)
    }
}

/// One nonnegativity or finiteness violation found by validation.
#[derive(Debug, Clone, Serialize)]
pub struct Violation {
    pub kernel: String,
    pub u: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub v: Option<f64>,
    pub value: f64,
}

/// Result of sampling every kernel over a lattice.
#[derive(Debug, Clone, Serialize)]
pub struct ValidationReport {
    pub samples: usize,
    pub pass: bool,
    pub violation_count: usize,
    /// First violations found, capped to keep reports small.
    pub violations: Vec<Violation>,
    /// sup over sampled (u, v) of sum_k k^(2 + epsilon0) lambda_k(u, v).
    pub lambda_moment_sup: f64,
    /// sup over sampled u of sum_k k^(2 + epsilon0) psi_k(u).
    pub psi_moment_sup: f64,
}

const MAX_LISTED_VIOLATIONS: usize = 16;

/// Sample every kernel at lattice points a/samples and check that all
/// values are finite and nonnegative; also report the moment-sum suprema
/// that the limit theory requires to be finite.
pub fn validate_model(spec: &ModelSpec, samples: usize) -> ValidationReport {
    let mut report = ValidationReport {
        samples,
        pass: true,
        violation_count: 0,
        violations: Vec::new(),
        lambda_moment_sup: 0.0,
        psi_moment_sup: 0.0,
    };
    let record = |report: &mut ValidationReport, kernel: String, u: f64, v: Option<f64>, value: f64| {
        report.pass = false;
        report.violation_count += 1;
        if report.violations.len() < MAX_LISTED_VIOLATIONS {
            report.violations.push(Violation { kernel, u, v, value });
        }
    };
    let points: Vec<f64> = (1..=samples).map(|a| a as f64 / samples as f64).collect();
    for &u in &points {
        let mut psi_sum = 0.0;
        for (k, psi) in spec.psi.iter().enumerate() {
            let value = psi.eval1(u);
            if !value.is_finite() || value < 0.0 {
                record(&mut report, format!("psi[{k}]"), u, None, value);
            } else {
                psi_sum += (k as f64).powf(2.0 + spec.epsilon0) * value;
            }
        }
        report.psi_moment_sup = report.psi_moment_sup.max(psi_sum);
        let phi = spec.phi.eval1(u);
        if !phi.is_finite() || phi < 0.0 {
            record(&mut report, "phi".into(), u, None, phi);
        }
        for &v in &points {
            let mut lam_sum = 0.0;
            for (k, lam) in spec.lambda.iter().enumerate() {
                let value = lam.eval2(u, v);
                if !value.is_finite() || value < 0.0 {
                    record(&mut report, format!("lambda[{k}]"), u, Some(v), value);
                } else {
                    lam_sum += (k as f64).powf(2.0 + spec.epsilon0) * value;
                }
            }
            report.lambda_moment_sup = report.lambda_moment_sup.max(lam_sum);
        }
    }
    report
}

/// Kernel families tabulated on the uniform grid, with the derived moment
/// sums the operators and simulators consume.
#[derive(Debug, Clone)]
pub struct DiscretizedKernel {
    pub grid_size: usize,
    pub k_max: usize,
    /// lambda[k][a * M + b] = lambda_k((a+1)/M, (b+1)/M).
    pub lambda: Vec<Vec<f64>>,
    /// psi[k][a] = psi_k((a+1)/M).
    pub psi: Vec<Vec<f64>>,
    pub phi: Vec<f64>,
    /// b1[a] = sum_k (k - 1) psi_k.
    pub b1: Vec<f64>,
    /// b2[a] = sum_k (k - 1)^2 psi_k.
    pub b2: Vec<f64>,
    /// a_sum[a * M + b] = sum_k lambda_k (summed in k order).
    pub a_sum: Vec<f64>,
    /// c_sum[a * M + b] = sum_k k lambda_k.
    pub c_sum: Vec<f64>,
}

impl DiscretizedKernel {
    pub fn at(&self, table: &[f64], a: usize, b: usize) -> f64 {
        table[a * self.grid_size + b]
    }
}

/// Tabulate all kernels of `spec` on a grid of `m` sites.
pub fn discretize(spec: &ModelSpec, m: usize) -> DiscretizedKernel {
    assert!(m >= 1, "grid must have at least one site");
    let width = spec.k_max + 1;
    let points: Vec<f64> = (0..m).map(|a| grid_point(a, m)).collect();
    let mut lambda = vec![vec![0.0; m * m]; width];
    let mut psi = vec![vec![0.0; m]; width];
    for k in 0..width {
        for (a, &u) in points.iter().enumerate() {
            psi[k][a] = spec.psi[k].eval1(u);
            for (b, &v) in points.iter().enumerate() {
                lambda[k][a * m + b] = spec.lambda[k].eval2(u, v);
            }
        }
    }
    let phi: Vec<f64> = points.iter().map(|&u| spec.phi.eval1(u)).collect();
    let mut b1 = vec![0.0; m];
    let mut b2 = vec![0.0; m];
    for k in 0..width {
        let w1 = k as f64 - 1.0;
        for a in 0..m {
            b1[a] += w1 * psi[k][a];
            b2[a] += w1 * w1 * psi[k][a];
        }
    }
    // Left-to-right over k, so re-summing the tables reproduces these bitwise.
    let mut a_sum = vec![0.0; m * m];
    let mut c_sum = vec![0.0; m * m];
    for k in 0..width {
        for i in 0..m * m {
            a_sum[i] += lambda[k][i];
            c_sum[i] += k as f64 * lambda[k][i];
        }
    }
    DiscretizedKernel {
        grid_size: m,
        k_max: spec.k_max,
        lambda,
        psi,
        phi,
        b1,
        b2,
        a_sum,
        c_sum,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const MODEL_A: &str = r#"{
        "n_urns": 100, "k_max": 2,
        "lambda": ["0", "1"],
        "psi": ["0", "0", "1"],
        "phi": "1",
        "horizon": 1.0, "epsilon0": 1.0
    }"#;

    fn model_a() -> ModelSpec {
        ModelSpec::from_json_str(MODEL_A).unwrap().0
    }

    #[test]
    fn loads_model_and_pads_missing_kernels() {
        let spec = model_a();
        assert_eq!(spec.lambda.len(), 3);
        assert_eq!(spec.psi.len(), 3);
        assert_eq!(spec.lambda[2].source(), "0");
        assert_eq!(spec.lambda[1].eval2(0.3, 0.9), 1.0);
        assert_eq!(spec.psi[2].eval1(0.5), 1.0);
    }

    #[test]
    fn rejects_structural_mistakes() {
        let bad = r#"{"n_urns": 10, "k_max": 0, "lambda": ["1", "1"], "psi": [],
                      "phi": "1", "horizon": 1.0, "epsilon0": 1.0}"#;
        assert!(matches!(
            ModelSpec::from_json_str(bad),
            Err(Error::Config(_))
        ));
        let bad_expr = r#"{"n_urns": 10, "k_max": 0, "lambda": [], "psi": ["w"],
                           "phi": "1", "horizon": 1.0, "epsilon0": 1.0}"#;
        match ModelSpec::from_json_str(bad_expr) {
            Err(Error::Parse { message, .. }) => assert!(message.starts_with("psi[0]")),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn validation_passes_nonnegative_models_and_reports_suprema() {
        let spec = model_a();
        let report = validate_model(&spec, 16);
        assert!(report.pass);
        assert_eq!(report.violation_count, 0);
        // lambda: k = 1 contributes 1^3 * 1; psi: k = 2 contributes 2^3 * 1.
        assert!((report.lambda_moment_sup - 1.0).abs() < 1e-12);
        assert!((report.psi_moment_sup - 8.0).abs() < 1e-12);
    }

    #[test]
    fn validation_flags_negative_kernels() {
        let bad = r#"{"n_urns": 10, "k_max": 1, "lambda": ["0", "cos(2*pi*(u-v))"],
                      "psi": [], "phi": "1", "horizon": 1.0, "epsilon0": 1.0}"#;
        let (spec, _) = ModelSpec::from_json_str(bad).unwrap();
        let report = validate_model(&spec, 8);
        assert!(!report.pass);
        assert!(report.violation_count > 0);
        assert!(report.violations.iter().all(|v| v.kernel == "lambda[1]"));
        assert!(report.violations.iter().all(|v| v.value < 0.0));
    }

    #[test]
    fn discretize_tabulates_at_grid_points() {
        let nu = r#"{"n_urns": 10, "k_max": 1, "lambda": ["0", "1+0.5*cos(2*pi*(u-v))"],
                     "psi": [], "phi": "2*u", "horizon": 1.0, "epsilon0": 1.0}"#;
        let (spec, _) = ModelSpec::from_json_str(nu).unwrap();
        let kern = discretize(&spec, 4);
        // Diagonal of the kernel: 1 + 0.5 cos(0) = 1.5.
        for a in 0..4 {
            assert!((kern.at(&kern.lambda[1], a, a) - 1.5).abs() < 1e-15);
        }
        // Antipodal pair: u - v = 0.5 gives 0.5.
        assert!((kern.at(&kern.lambda[1], 1, 3) - 0.5).abs() < 1e-15);
        assert_eq!(kern.phi[3], 2.0);
        // Only k = 1 cross events: a_sum == c_sum.
        assert_eq!(kern.a_sum, kern.c_sum);
    }

    #[test]
    fn moment_sums_match_direct_resummation_bitwise() {
        let spec = model_a();
        let kern = discretize(&spec, 16);
        for i in 0..16 * 16 {
            let mut a = 0.0;
            let mut c = 0.0;
            for k in 0..=spec.k_max {
                a += kern.lambda[k][i];
                c += k as f64 * kern.lambda[k][i];
            }
            assert_eq!(a.to_bits(), kern.a_sum[i].to_bits());
            assert_eq!(c.to_bits(), kern.c_sum[i].to_bits());
        }
        // b1 = (2 - 1) psi_2 = 1, b2 = 1 for this model.
        assert!(kern.b1.iter().all(|&x| x == 1.0));
        assert!(kern.b2.iter().all(|&x| x == 1.0));
    }

    #[test]
    fn refined_grids_agree_at_shared_points_bitwise() {
        let nu = r#"{"n_urns": 10, "k_max": 1, "lambda": ["0", "1+0.5*cos(2*pi*(u-v))"],
                     "psi": ["exp(0-u)"], "phi": "1+0.5*sin(2*pi*u)",
                     "horizon": 1.0, "epsilon0": 1.0}"#;
        let (spec, _) = ModelSpec::from_json_str(nu).unwrap();
        let coarse = discretize(&spec, 8);
        let fine = discretize(&spec, 16);
        for a in 0..8 {
            let fa = 2 * a + 1; // point (a+1)/8 == (fa+1)/16
            assert_eq!(coarse.phi[a].to_bits(), fine.phi[fa].to_bits());
            assert_eq!(coarse.psi[0][a].to_bits(), fine.psi[0][fa].to_bits());
            for b in 0..8 {
                let fb = 2 * b + 1;
                assert_eq!(
                    coarse.at(&coarse.lambda[1], a, b).to_bits(),
                    fine.at(&fine.lambda[1], fa, fb).to_bits()
                );
            }
        }
    }

    #[test]
    fn cross_moment_tables_obey_pointwise_bounds() {
        let mixed = r#"{"n_urns": 10, "k_max": 3,
                        "lambda": ["0.5", "1", "0", "1+0.5*sin(2*pi*u)*cos(2*pi*v)"],
                        "psi": [], "phi": "1", "horizon": 1.0, "epsilon0": 1.0}"#;
        let (spec, _) = ModelSpec::from_json_str(mixed).unwrap();
        let kern = discretize(&spec, 12);
        for i in 0..12 * 12 {
            assert!(kern.a_sum[i] >= 0.0);
            assert!(kern.c_sum[i] >= 0.0);
            assert!(kern.c_sum[i] <= spec.k_max as f64 * kern.a_sum[i] + 1e-15);
        }
    }
}
