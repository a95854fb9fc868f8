//! Problem definition: coefficient functions, boundary specification, age
//! interval and the mortality-sign regime.

use crate::error::{Error, Result};
use crate::expr::Expr;

/// A coefficient of the model: an expression over `z` (total local
/// population) and `a` (age), with an optional analytic z-derivative.
///
/// When no derivative expression is supplied, `eval_dz` falls back to a
/// central finite difference with step `sqrt(eps) * max(1, |z|)`.
#[derive(Debug, Clone)]
pub struct CoefficientFn {
    expr: Expr,
    source: String,
    deriv: Option<Expr>,
}

impl CoefficientFn {
    pub fn parse(text: &str) -> Result<CoefficientFn> {
        Ok(CoefficientFn {
            expr: Expr::parse(text)?,
            source: text.to_string(),
            deriv: None,
        })
    }

    pub fn parse_with_derivative(text: &str, deriv_text: &str) -> Result<CoefficientFn> {
        Ok(CoefficientFn {
            expr: Expr::parse(text)?,
            source: text.to_string(),
            deriv: Some(Expr::parse(deriv_text)?),
        })
    }

    pub fn constant(value: f64) -> CoefficientFn {
        CoefficientFn {
            expr: Expr::Num(value),
            source: format!("{value}"),
            deriv: Some(Expr::Num(0.0)),
        }
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    /// True when the z-derivative is a finite-difference fallback.
    pub fn uses_fd_derivative(&self) -> bool {
        self.deriv.is_none()
    }

    pub fn is_z_free(&self) -> bool {
        self.expr.is_z_free()
    }

    pub fn eval(&self, z: f64, age: f64) -> Result<f64> {
        self.expr.eval(z, age).map_err(|kind| Error::Eval {
            source_text: self.source.clone(),
            z,
            age,
            kind,
        })
    }

    pub fn eval_dz(&self, z: f64, age: f64) -> Result<f64> {
        if let Some(d) = &self.deriv {
            return d.eval(z, age).map_err(|kind| Error::Eval {
                source_text: format!("d/dz of {}", self.source),
                z,
                age,
                kind,
            });
        }
        let h = f64::EPSILON.sqrt() * z.abs().max(1.0);
        if z - h >= 0.0 {
            let fp = self.eval(z + h, age)?;
            let fm = self.eval(z - h, age)?;
            Ok((fp - fm) / (2.0 * h))
        } else {
            // stay inside z >= 0 where the coefficient is defined
            let f0 = self.eval(z, age)?;
            let fp = self.eval(z + h, age)?;
            Ok((fp - f0) / h)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundaryKind {
    Dirichlet,
    Neumann,
    Robin,
}

impl std::fmt::Display for BoundaryKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BoundaryKind::Dirichlet => write!(f, "dirichlet"),
            BoundaryKind::Neumann => write!(f, "neumann"),
            BoundaryKind::Robin => write!(f, "robin"),
        }
    }
}

/// Boundary condition for the two interval endpoints. The Robin weight is
/// one nonnegative scalar per endpoint.
#[derive(Debug, Clone, Copy)]
pub struct BoundarySpec {
    pub kind: BoundaryKind,
    pub robin_weight: [f64; 2],
}

impl BoundarySpec {
    pub fn dirichlet() -> Self {
        BoundarySpec {
            kind: BoundaryKind::Dirichlet,
            robin_weight: [0.0; 2],
        }
    }

    pub fn neumann() -> Self {
        BoundarySpec {
            kind: BoundaryKind::Neumann,
            robin_weight: [0.0; 2],
        }
    }

    pub fn robin(left: f64, right: f64) -> Result<Self> {
        if left < 0.0 || right < 0.0 {
            return Err(Error::InvalidInput(format!(
                "Robin weights must be nonnegative, got ({left}, {right})"
            )));
        }
        Ok(BoundarySpec {
            kind: BoundaryKind::Robin,
            robin_weight: [left, right],
        })
    }
}

/// Which way the intensity parameter couples to the balance law.
///
/// `Standard` scales the mortality term by `lambda` and requires net
/// reproduction above one at zero mortality. `HollingTanner` adds the
/// saturating reaction `sign * u/(1+u)`, moves the unscaled mortality into
/// the elliptic part and couples `lambda` with inverted sign, so the
/// spectral radius grows with `lambda` and the precondition flips.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ModelMode {
    Standard,
    HollingTanner { reaction_sign: f64 },
}

impl ModelMode {
    pub fn mortality_sign(&self) -> f64 {
        match self {
            ModelMode::Standard => 1.0,
            ModelMode::HollingTanner { .. } => -1.0,
        }
    }
}

/// Full problem definition on a 1-D interval of length `domain_length` with
/// ages in `[0, max_age]`.
#[derive(Debug, Clone)]
pub struct ModelSpec {
    pub diffusion: CoefficientFn,
    pub drift: Option<CoefficientFn>,
    pub mortality: CoefficientFn,
    pub birth: CoefficientFn,
    pub boundary: BoundarySpec,
    pub domain_length: f64,
    pub max_age: f64,
    pub mode: ModelMode,
}

impl ModelSpec {
    pub fn mortality_sign(&self) -> f64 {
        self.mode.mortality_sign()
    }

    pub fn reaction_sign(&self) -> Option<f64> {
        match self.mode {
            ModelMode::Standard => None,
            ModelMode::HollingTanner { reaction_sign } => Some(reaction_sign),
        }
    }

    /// Sample every model invariant over the given density values and the age
    /// nodes. Violations are data, not failures.
    pub fn validate(&self, z_samples: &[f64], age_nodes: &[f64]) -> ValidationReport {
        let mut report = ValidationReport::default();
        let floor = 1e-10;

        for &a in age_nodes {
            for &z in z_samples {
                match self.diffusion.eval(z, a) {
                    Ok(d) => {
                        if d <= floor {
                            report.push(ViolationKind::DiffusionNotPositive, z, a, d);
                        }
                    }
                    Err(e) => report.push_eval(ViolationKind::DiffusionNotPositive, z, a, &e),
                }
                match self.mortality.eval(z, a) {
                    Ok(m) => {
                        if m < 0.0 {
                            report.push(ViolationKind::MortalityNegative, z, a, m);
                        }
                    }
                    Err(e) => report.push_eval(ViolationKind::MortalityNegative, z, a, &e),
                }
                match self.birth.eval(z, a) {
                    Ok(b) => {
                        if b < 0.0 {
                            report.push(ViolationKind::BirthNegative, z, a, b);
                        }
                    }
                    Err(e) => report.push_eval(ViolationKind::BirthNegative, z, a, &e),
                }
            }
            if let Some(d) = &self.drift {
                match d.eval(0.0, a) {
                    Ok(v) => {
                        if v.abs() > 1e-12 {
                            report.push(ViolationKind::DriftNonzeroAtZeroDensity, 0.0, a, v);
                        }
                    }
                    Err(e) => report.push_eval(ViolationKind::DriftNonzeroAtZeroDensity, 0.0, a, &e),
                }
            }
        }

        // b(0,.) must not vanish identically
        let b0_max = age_nodes
            .iter()
            .filter_map(|&a| self.birth.eval(0.0, a).ok())
            .fold(0.0_f64, |m, v| m.max(v.abs()));
        if b0_max == 0.0 {
            report.push(ViolationKind::BirthKernelIdenticallyZero, 0.0, 0.0, 0.0);
        }

        // In the standard regime the reference mortality must be strictly
        // positive on an initial age interval.
        if matches!(self.mode, ModelMode::Standard) {
            let prefix = self.max_age / 10.0;
            let bad = age_nodes
                .iter()
                .filter(|&&a| a <= prefix)
                .any(|&a| self.mortality.eval(0.0, a).map(|m| m <= 0.0).unwrap_or(true));
            if bad {
                report.push(ViolationKind::MortalityNotPositiveNearZeroAge, 0.0, 0.0, 0.0);
            }
        }

        report
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViolationKind {
    DiffusionNotPositive,
    MortalityNegative,
    BirthNegative,
    BirthKernelIdenticallyZero,
    MortalityNotPositiveNearZeroAge,
    DriftNonzeroAtZeroDensity,
}

impl std::fmt::Display for ViolationKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ViolationKind::DiffusionNotPositive => "diffusion not bounded below by a positive constant",
            ViolationKind::MortalityNegative => "mortality negative",
            ViolationKind::BirthNegative => "birth rate negative",
            ViolationKind::BirthKernelIdenticallyZero => "b(0,.) identically zero on the sample set",
            ViolationKind::MortalityNotPositiveNearZeroAge => {
                "mortality at zero density not strictly positive near age 0"
            }
            ViolationKind::DriftNonzeroAtZeroDensity => "drift does not vanish at zero density",
        };
        write!(f, "{s}")
    }
}

#[derive(Debug, Clone)]
pub struct Violation {
    pub kind: ViolationKind,
    pub z: f64,
    pub age: f64,
    pub value: f64,
    pub note: Option<String>,
}

#[derive(Debug, Clone, Default)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, kind: ViolationKind, z: f64, age: f64, value: f64) {
        self.violations.push(Violation {
            kind,
            z,
            age,
            value,
            note: None,
        });
    }

    fn push_eval(&mut self, kind: ViolationKind, z: f64, age: f64, err: &Error) {
        self.violations.push(Violation {
            kind,
            z,
            age,
            value: f64::NAN,
            note: Some(err.to_string()),
        });
    }
}

/// Evenly spaced sample values for validation, covering z in [0, z_max].
pub fn default_z_samples(z_max: f64, count: usize) -> Vec<f64> {
    assert!(count >= 2);
    (0..count)
        .map(|i| z_max * i as f64 / (count - 1) as f64)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant_model(d: f64, mu: f64, b: f64) -> ModelSpec {
        ModelSpec {
            diffusion: CoefficientFn::constant(d),
            drift: None,
            mortality: CoefficientFn::constant(mu),
            birth: CoefficientFn::constant(b),
            boundary: BoundarySpec::neumann(),
            domain_length: 1.0,
            max_age: 1.0,
            mode: ModelMode::Standard,
        }
    }

    fn ages() -> Vec<f64> {
        (0..=20).map(|k| k as f64 / 20.0).collect()
    }

    #[test]
    fn constant_model_passes_validation() {
        let m = constant_model(1.0, 1.0, 2.0);
        let report = m.validate(&default_z_samples(4.0, 9), &ages());
        assert!(report.passed(), "{:?}", report.violations);
    }

    #[test]
    fn degenerate_diffusion_is_reported() {
        let m = constant_model(0.0, 1.0, 2.0);
        let report = m.validate(&default_z_samples(4.0, 9), &ages());
        assert!(report
            .violations
            .iter()
            .any(|v| v.kind == ViolationKind::DiffusionNotPositive));
    }

    #[test]
    fn zero_birth_kernel_is_reported() {
        let m = constant_model(1.0, 1.0, 0.0);
        let report = m.validate(&default_z_samples(4.0, 9), &ages());
        assert!(report
            .violations
            .iter()
            .any(|v| v.kind == ViolationKind::BirthKernelIdenticallyZero));
    }

    #[test]
    fn drift_must_vanish_at_zero_density() {
        let mut m = constant_model(1.0, 1.0, 2.0);
        m.drift = Some(CoefficientFn::parse("0.1 + z").unwrap());
        let report = m.validate(&default_z_samples(4.0, 9), &ages());
        assert!(report
            .violations
            .iter()
            .any(|v| v.kind == ViolationKind::DriftNonzeroAtZeroDensity));

        m.drift = Some(CoefficientFn::parse("0.1*z").unwrap());
        let report = m.validate(&default_z_samples(4.0, 9), &ages());
        assert!(report.passed(), "{:?}", report.violations);
    }

    #[test]
    fn mortality_positive_near_zero_age_required_in_standard_mode() {
        let mut m = constant_model(1.0, 0.0, 2.0);
        let report = m.validate(&default_z_samples(4.0, 9), &ages());
        assert!(report
            .violations
            .iter()
            .any(|v| v.kind == ViolationKind::MortalityNotPositiveNearZeroAge));

        m.mode = ModelMode::HollingTanner { reaction_sign: -1.0 };
        let report = m.validate(&default_z_samples(4.0, 9), &ages());
        assert!(report.passed());
    }

    // Adding sample points never turns a failing report into a passing one.
    #[test]
    fn validation_is_monotone_in_the_sample_set() {
        let m = ModelSpec {
            diffusion: CoefficientFn::parse("2 - z").unwrap(),
            ..constant_model(1.0, 1.0, 2.0)
        };
        let small = m.validate(&[0.0, 1.0], &ages());
        let large = m.validate(&default_z_samples(4.0, 17), &ages());
        assert!(small.passed());
        assert!(!large.passed());
        // failing stays failing under refinement
        let larger = m.validate(&default_z_samples(4.0, 33), &ages());
        assert!(larger.violations.len() >= large.violations.len());
    }

    #[test]
    fn fd_derivative_matches_analytic() {
        let c = CoefficientFn::parse("2/(1+z)").unwrap();
        assert!(c.uses_fd_derivative());
        for &z in &[0.0, 0.5, 1.0, 3.0] {
            let fd = c.eval_dz(z, 0.2).unwrap();
            let exact = -2.0 / (1.0 + z).powi(2);
            assert!(
                (fd - exact).abs() <= 1e-6 * exact.abs().max(1.0),
                "z={z}: {fd} vs {exact}"
            );
        }
        let with = CoefficientFn::parse_with_derivative("2/(1+z)", "-2/(1+z)^2").unwrap();
        assert!(!with.uses_fd_derivative());
        assert!((with.eval_dz(1.0, 0.0).unwrap() + 0.5).abs() < 1e-15);
    }

    #[test]
    fn model_types_are_shareable_across_threads() {
        fn assert_send_sync<T: Send + Sync>() {}
        assert_send_sync::<ModelSpec>();
        assert_send_sync::<CoefficientFn>();
    }
}
