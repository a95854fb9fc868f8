//! Run configuration: a TOML file with sections `[model]`,
//! `[discretization]`, `[continuation]`, `[output]`. Coefficients are
//! expression strings over `z` and `a`; a `preset` key fills a named model
//! family and explicit keys override its entries.

use crate::ageprop::Scheme;
use crate::error::{Error, Result};
use crate::model::{BoundarySpec, CoefficientFn, ModelMode, ModelSpec};
use crate::spatial::SpatialGrid;
use serde::Deserialize;

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub discretization: DiscretizationSection,
    #[serde(default)]
    pub continuation: ContinuationSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub preset: Option<String>,
    pub diffusion: Option<String>,
    pub diffusion_dz: Option<String>,
    pub drift: Option<String>,
    pub drift_dz: Option<String>,
    pub mortality: Option<String>,
    pub mortality_dz: Option<String>,
    pub birth: Option<String>,
    pub birth_dz: Option<String>,
    pub boundary: Option<String>,
    pub robin_weight: Option<ScalarOrPair>,
    pub length: Option<f64>,
    pub max_age: Option<f64>,
    pub mode: Option<String>,
    pub reaction_sign: Option<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum ScalarOrPair {
    Scalar(f64),
    Pair([f64; 2]),
}

impl ScalarOrPair {
    fn pair(&self) -> [f64; 2] {
        match self {
            ScalarOrPair::Scalar(v) => [*v, *v],
            ScalarOrPair::Pair(p) => *p,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscretizationSection {
    #[serde(default = "default_n")]
    pub n: usize,
    #[serde(default = "default_age_steps")]
    pub age_steps: usize,
    #[serde(default)]
    pub scheme: Option<String>,
}

fn default_n() -> usize {
    64
}

fn default_age_steps() -> usize {
    200
}

impl Default for DiscretizationSection {
    fn default() -> Self {
        DiscretizationSection {
            n: default_n(),
            age_steps: default_age_steps(),
            scheme: None,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContinuationSection {
    #[serde(default = "default_eps_max")]
    pub eps_max: f64,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_newton_tol")]
    pub newton_tol: f64,
}

fn default_eps_max() -> f64 {
    0.3
}

fn default_steps() -> usize {
    16
}

fn default_newton_tol() -> f64 {
    1e-9
}

impl Default for ContinuationSection {
    fn default() -> Self {
        ContinuationSection {
            eps_max: default_eps_max(),
            steps: default_steps(),
            newton_tol: default_newton_tol(),
        }
    }
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: Option<String>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn from_file(path: &std::path::Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    fn check(&self) -> Result<()> {
        if self.discretization.n < 8 {
            return Err(Error::Config("discretization.n must be at least 8".into()));
        }
        if self.discretization.age_steps < 8 {
            return Err(Error::Config(
                "discretization.age_steps must be at least 8".into(),
            ));
        }
        if !(self.continuation.newton_tol > 0.0) {
            return Err(Error::Config(
                "continuation.newton_tol must be positive".into(),
            ));
        }
        if self.continuation.eps_max < 0.0 {
            return Err(Error::Config(
                "continuation.eps_max must be nonnegative".into(),
            ));
        }
        Ok(())
    }

    pub fn scheme(&self) -> Result<Scheme> {
        match self.discretization.scheme.as_deref() {
            None | Some("implicit-euler") => Ok(Scheme::ImplicitEuler),
            Some("crank-nicolson") => Ok(Scheme::CrankNicolson),
            Some(other) => Err(Error::Config(format!(
                "unknown scheme `{other}` (expected implicit-euler or crank-nicolson)"
            ))),
        }
    }

    pub fn build_model(&self) -> Result<ModelSpec> {
        let mut section = self.model.clone();
        if let Some(name) = &section.preset.clone() {
            apply_preset(&mut section, name)?;
        }

        let coeff =
            |text: &Option<String>, dz: &Option<String>, what: &str| -> Result<CoefficientFn> {
                let Some(t) = text else {
                    return Err(Error::Config(format!("model.{what} is required")));
                };
                match dz {
                    Some(d) => CoefficientFn::parse_with_derivative(t, d),
                    None => CoefficientFn::parse(t),
                }
            };

        let diffusion = coeff(&section.diffusion, &section.diffusion_dz, "diffusion")?;
        let mortality = coeff(&section.mortality, &section.mortality_dz, "mortality")?;
        let birth = coeff(&section.birth, &section.birth_dz, "birth")?;
        let drift = match &section.drift {
            Some(t) => Some(match &section.drift_dz {
                Some(d) => CoefficientFn::parse_with_derivative(t, d)?,
                None => CoefficientFn::parse(t)?,
            }),
            None => None,
        };

        let boundary = match section.boundary.as_deref().unwrap_or("neumann") {
            "neumann" => BoundarySpec::neumann(),
            "dirichlet" => BoundarySpec::dirichlet(),
            "robin" => {
                let w = section
                    .robin_weight
                    .as_ref()
                    .map(|s| s.pair())
                    .unwrap_or([1.0, 1.0]);
                BoundarySpec::robin(w[0], w[1])?
            }
            other => {
                return Err(Error::Config(format!(
                    "unknown boundary `{other}` (expected dirichlet, neumann or robin)"
                )))
            }
        };

        let mode = match section.mode.as_deref().unwrap_or("standard") {
            "standard" => ModelMode::Standard,
            "holling-tanner" => {
                let sign = match section.reaction_sign.as_deref().unwrap_or("-") {
                    "+" | "plus" => 1.0,
                    "-" | "minus" => -1.0,
                    other => {
                        return Err(Error::Config(format!(
                            "unknown reaction_sign `{other}` (expected + or -)"
                        )))
                    }
                };
                ModelMode::HollingTanner {
                    reaction_sign: sign,
                }
            }
            other => {
                return Err(Error::Config(format!(
                    "unknown mode `{other}` (expected standard or holling-tanner)"
                )))
            }
        };

        let length = section.length.unwrap_or(1.0);
        let max_age = section.max_age.unwrap_or(1.0);
        if !(length > 0.0) {
            return Err(Error::Config("model.length must be positive".into()));
        }
        if !(max_age > 0.0) || !max_age.is_finite() {
            return Err(Error::Config(
                "model.max_age must be positive and finite".into(),
            ));
        }

        Ok(ModelSpec {
            diffusion,
            drift,
            mortality,
            birth,
            boundary,
            domain_length: length,
            max_age,
            mode,
        })
    }

    pub fn build_grid(&self, model: &ModelSpec) -> Result<SpatialGrid> {
        SpatialGrid::new(model.domain_length, self.discretization.n, model.boundary)
    }

    /// Canonical single-line description used for hashing and the summary.
    pub fn model_descriptor(&self, model: &ModelSpec) -> String {
        let drift = model
            .drift
            .as_ref()
            .map(|d| d.source().to_string())
            .unwrap_or_else(|| "none".to_string());
        let mode = match model.mode {
            ModelMode::Standard => "standard".to_string(),
            ModelMode::HollingTanner { reaction_sign } => {
                format!("holling-tanner({:+})", reaction_sign)
            }
        };
        format!(
            "D={};d={};mu={};b={};boundary={};nu=[{},{}];L={};a_m={};mode={}",
            model.diffusion.source(),
            drift,
            model.mortality.source(),
            model.birth.source(),
            model.boundary.kind,
            model.boundary.robin_weight[0],
            model.boundary.robin_weight[1],
            model.domain_length,
            model.max_age,
            mode
        )
    }
}

fn apply_preset(section: &mut ModelSection, name: &str) -> Result<()> {
    let fill = |slot: &mut Option<String>, value: &str| {
        if slot.is_none() {
            *slot = Some(value.to_string());
        }
    };
    match name {
        // constant-coefficient family with net reproduction 2 at zero mortality
        "neumann-constant" => {
            fill(&mut section.diffusion, "1");
            fill(&mut section.mortality, "1");
            fill(&mut section.birth, "2");
            fill(&mut section.boundary, "neumann");
        }
        // crowding raises mortality and lowers fertility; subcritical branch
        "neumann-logistic" => {
            fill(&mut section.diffusion, "1");
            fill(&mut section.mortality, "1 + z");
            section.mortality_dz.get_or_insert_with(|| "1".into());
            fill(&mut section.birth, "2/(1+z)");
            section.birth_dz.get_or_insert_with(|| "-2/(1+z)^2".into());
            fill(&mut section.boundary, "neumann");
        }
        // strong birth against an absorbing boundary
        "dirichlet-strong-birth" => {
            fill(&mut section.diffusion, "1");
            fill(&mut section.mortality, "1");
            fill(&mut section.birth, "20");
            fill(&mut section.boundary, "dirichlet");
        }
        // density-enhanced diffusion, monotone rates, absorbing boundary
        "dirichlet-saturating" => {
            fill(&mut section.diffusion, "1 + z/(1+z)");
            section
                .diffusion_dz
                .get_or_insert_with(|| "1/(1+z)^2".into());
            fill(&mut section.mortality, "1 + z");
            section.mortality_dz.get_or_insert_with(|| "1".into());
            fill(&mut section.birth, "20/(1+z)");
            section.birth_dz.get_or_insert_with(|| "-20/(1+z)^2".into());
            fill(&mut section.boundary, "dirichlet");
        }
        // saturating reaction with inverted intensity coupling
        "holling-tanner" => {
            fill(&mut section.diffusion, "1");
            fill(&mut section.mortality, "0");
            fill(&mut section.birth, "0.5");
            fill(&mut section.boundary, "neumann");
            fill(&mut section.mode, "holling-tanner");
            fill(&mut section.reaction_sign, "-");
        }
        other => {
            return Err(Error::Config(format!("unknown model preset `{other}`")));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_full_config() {
        let text = r#"
            [model]
            diffusion = "1"
            mortality = "1 + z"
            birth = "2/(1+z)"
            boundary = "neumann"
            length = 1.0
            max_age = 1.0

            [discretization]
            n = 32
            age_steps = 50

            [continuation]
            eps_max = 0.2
            steps = 10
            newton_tol = 1e-9

            [output]
            dir = "out"
        "#;
        let cfg = RunConfig::parse(text).unwrap();
        let model = cfg.build_model().unwrap();
        assert_eq!(cfg.discretization.n, 32);
        assert_eq!(model.birth.eval(1.0, 0.0).unwrap(), 1.0);
        assert!(cfg.scheme().is_ok());
    }

    #[test]
    fn preset_fills_missing_fields_and_overrides_stick() {
        let text = r#"
            [model]
            preset = "neumann-constant"
            birth = "3"
        "#;
        let cfg = RunConfig::parse(text).unwrap();
        let model = cfg.build_model().unwrap();
        assert_eq!(model.birth.eval(0.0, 0.0).unwrap(), 3.0);
        assert_eq!(model.mortality.eval(0.0, 0.0).unwrap(), 1.0);
    }

    #[test]
    fn holling_tanner_preset_sets_mode() {
        let cfg = RunConfig::parse("[model]\npreset = \"holling-tanner\"\n").unwrap();
        let model = cfg.build_model().unwrap();
        assert_eq!(model.mortality_sign(), -1.0);
        assert_eq!(model.reaction_sign(), Some(-1.0));
    }

    #[test]
    fn grid_floor_is_enforced() {
        assert!(RunConfig::parse("[discretization]\nn = 4\n").is_err());
        assert!(RunConfig::parse("[discretization]\nage_steps = 2\n").is_err());
        assert!(RunConfig::parse("[continuation]\nnewton_tol = 0.0\n").is_err());
    }

    #[test]
    fn robin_weights_accept_scalar_or_pair() {
        let text = r#"
            [model]
            preset = "neumann-constant"
            boundary = "robin"
            robin_weight = [1.0, 2.0]
        "#;
        let model = RunConfig::parse(text).unwrap().build_model().unwrap();
        assert_eq!(model.boundary.robin_weight, [1.0, 2.0]);

        let text = r#"
            [model]
            preset = "neumann-constant"
            boundary = "robin"
            robin_weight = 0.5
        "#;
        let model = RunConfig::parse(text).unwrap().build_model().unwrap();
        assert_eq!(model.boundary.robin_weight, [0.5, 0.5]);
    }

    #[test]
    fn malformed_coefficient_reports_parse_position() {
        let text = r#"
            [model]
            preset = "neumann-constant"
            birth = "2 + * z"
        "#;
        let cfg = RunConfig::parse(text).unwrap();
        match cfg.build_model() {
            Err(Error::Parse { position, .. }) => assert_eq!(position, 4),
            other => panic!("expected parse error, got {other:?}"),
        }
    }
}
