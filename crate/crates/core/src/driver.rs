//! Command orchestration shared by the CLI binary and the test suites:
//! `critical` locates the critical intensity and writes the radius curve,
//! `branch` follows the equilibrium branch and attaches the analysis
//! verdicts, `validate` runs the cross-checking invariant suite. Every run
//! writes a summary file, also on early exit.

use crate::ageprop::{
    closed_form_reproduction, find_critical_intensity, spectral_radius, AgeMesh, Propagator,
    Scheme,
};
use crate::analysis;
use crate::config::RunConfig;
use crate::equilibrium::{
    continue_branch, tangent_at_critical, ContinuationSettings, DensityField,
};
use crate::error::{Error, Result};
use crate::model::{default_z_samples, ModelMode, ModelSpec};
use crate::report::{self, Summary};
use crate::spatial::{laplace_principal, SpatialGrid};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Critical,
    Branch,
    Validate,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Critical => "critical",
            Command::Branch => "branch",
            Command::Validate => "validate",
        }
    }
}

/// Exit code contract: 0 success, 1 numerical or input failure, 2 model
/// violates a structural hypothesis of the method.
pub fn exit_code_for(err: &Error) -> i32 {
    if err.is_hypothesis_violation() {
        2
    } else {
        1
    }
}

struct Prepared {
    model: ModelSpec,
    grid: SpatialGrid,
    mesh: AgeMesh,
    prop: Propagator,
    sigma1: f64,
    scheme: Scheme,
}

fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    // honor the external thread cap even though the solver is sequential
    if let Ok(v) = std::env::var("AGEBIF_THREADS") {
        let parsed: usize = v
            .parse()
            .map_err(|_| Error::Config(format!("AGEBIF_THREADS must be a positive integer, got `{v}`")))?;
        if parsed == 0 {
            return Err(Error::Config("AGEBIF_THREADS must be at least 1".into()));
        }
    }
    let model = cfg.build_model()?;
    let grid = cfg.build_grid(&model)?;
    let mesh = AgeMesh::new(&model, cfg.discretization.age_steps)?;
    let scheme = cfg.scheme()?;

    let report = model.validate(&default_z_samples(4.0, 17), &mesh.nodes);
    if !report.passed() {
        let first = &report.violations[0];
        return Err(Error::HypothesisViolated {
            r0: f64::NAN,
            expected: match first.kind {
                crate::model::ViolationKind::MortalityNotPositiveNearZeroAge => {
                    "positive reference mortality near age zero; r(Q_0) comparison needs"
                }
                _ => "a well-posed model; reproduction comparison with",
            },
        });
    }

    let prop = Propagator::new(&model, &grid, &mesh, scheme)?;
    let sigma1 = laplace_principal(&grid)?.sigma;
    Ok(Prepared {
        model,
        grid,
        mesh,
        prop,
        sigma1,
        scheme,
    })
}

fn base_summary(cmd: Command, cfg: &RunConfig, prep: Option<&Prepared>) -> Summary {
    let mut s = Summary::new(cmd.name());
    s.n = cfg.discretization.n;
    s.age_steps = cfg.discretization.age_steps;
    s.eps_max = cfg.continuation.eps_max;
    s.newton_tol = cfg.continuation.newton_tol;
    s.scheme = cfg
        .discretization
        .scheme
        .clone()
        .unwrap_or_else(|| "implicit-euler".to_string());
    if let Some(p) = prep {
        s.sigma1 = p.sigma1;
        s.h_x = p.grid.h();
        s.h_a = p.mesh.h();
        s.boundary = p.model.boundary.kind.to_string();
        s.mode = match p.model.mode {
            ModelMode::Standard => "standard".to_string(),
            ModelMode::HollingTanner { reaction_sign } => {
                format!("holling-tanner({:+})", reaction_sign)
            }
        };
        s.model_hash = report::model_hash(&cfg.model_descriptor(&p.model));
    }
    s
}

/// Runs one command, writing all output files under `out_dir`. Returns the
/// process exit code.
pub fn run(cmd: Command, cfg: &RunConfig, out_dir: &Path, quiet: bool) -> i32 {
    if let Err(e) = std::fs::create_dir_all(out_dir) {
        eprintln!("cannot create output directory {}: {e}", out_dir.display());
        return 1;
    }
    let say = |msg: &str| {
        if !quiet {
            println!("{msg}");
        }
    };

    let prep = match prepare(cfg) {
        Ok(p) => p,
        Err(e) => {
            eprintln!("{e}");
            let mut s = base_summary(cmd, cfg, None);
            s.notes.push(e.to_string());
            let _ = s.write(&out_dir.join("summary.txt"));
            return exit_code_for(&e);
        }
    };
    let mut summary = base_summary(cmd, cfg, Some(&prep));

    let outcome = match cmd {
        Command::Critical => run_critical(&prep, out_dir, &mut summary, &say),
        Command::Branch => run_branch(cfg, &prep, out_dir, &mut summary, &say),
        Command::Validate => run_validate(&prep, &mut summary, &say),
    };

    match outcome {
        Ok(code) => {
            if summary.write(&out_dir.join("summary.txt")).is_err() {
                return 1;
            }
            code
        }
        Err(e) => {
            eprintln!("{e}");
            summary.notes.push(e.to_string());
            summary.verdict = if e.is_hypothesis_violation() {
                "hypothesis-violated".to_string()
            } else {
                "error".to_string()
            };
            let _ = summary.write(&out_dir.join("summary.txt"));
            exit_code_for(&e)
        }
    }
}

fn critical_stage(
    prep: &Prepared,
    out_dir: &Path,
    summary: &mut Summary,
    say: &dyn Fn(&str),
) -> Result<(f64, Vec<f64>)> {
    let r0 = spectral_radius(&prep.prop, 0.0)?.radius;
    summary.r0 = r0;
    let (lambda0, spec) = find_critical_intensity(&prep.prop)?;
    summary.lambda0 = lambda0;
    say(&format!(
        "critical intensity lambda0 = {lambda0:.6} (r(Q_0) = {r0:.6}, sigma1 = {:.6})",
        prep.sigma1
    ));

    // radius curve over [0, 2 lambda0]
    let samples = 21;
    let mut rows = Vec::with_capacity(samples);
    for i in 0..samples {
        let lambda = 2.0 * lambda0 * i as f64 / (samples - 1) as f64;
        let res = spectral_radius(&prep.prop, lambda)?;
        rows.push((lambda, res.radius, res.iterations));
    }
    report::write_r_curve(&out_dir.join("r_curve.csv"), &rows)?;

    let xs: Vec<f64> = (0..prep.grid.active_count())
        .map(|p| prep.grid.active_x(p))
        .collect();
    report::write_eigenvector(&out_dir.join("b_lambda0.csv"), &xs, &spec.eigenvector)?;
    Ok((lambda0, spec.eigenvector))
}

fn run_critical(
    prep: &Prepared,
    out_dir: &Path,
    summary: &mut Summary,
    say: &dyn Fn(&str),
) -> Result<i32> {
    critical_stage(prep, out_dir, summary, say)?;
    summary.verdict = "ok".to_string();
    Ok(0)
}

fn run_branch(
    cfg: &RunConfig,
    prep: &Prepared,
    out_dir: &Path,
    summary: &mut Summary,
    say: &dyn Fn(&str),
) -> Result<i32> {
    let (lambda0, eigenvector) = critical_stage(prep, out_dir, summary, say)?;
    let tangent = tangent_at_critical(&prep.prop, lambda0, &eigenvector)?;
    let settings = ContinuationSettings {
        eps_max: cfg.continuation.eps_max,
        max_points_per_side: cfg.continuation.steps,
        newton_tol: cfg.continuation.newton_tol,
    };
    let mut diagram = continue_branch(
        &prep.model,
        &prep.grid,
        &prep.mesh,
        lambda0,
        &tangent,
        &settings,
    )?;

    let sub = analysis::subcriticality_report(&prep.model, &prep.grid, &prep.mesh, &diagram)?;
    diagram.subcritical = match sub.verdict {
        analysis::SubcritVerdict::Subcritical => Some(true),
        analysis::SubcritVerdict::Violated => Some(false),
        analysis::SubcritVerdict::NotApplicable => None,
    };
    summary.subcritical = sub.verdict.to_string();
    summary.branch_points = diagram.points.len();
    summary.notes.extend(diagram.notes.iter().cloned());
    if let Some(note) = &sub.hypothesis_note {
        summary.notes.push(note.clone());
    }

    report::write_branch(&out_dir.join("branch.csv"), &diagram, &prep.mesh, &prep.grid)?;
    say(&format!(
        "branch: {} points, subcriticality: {}",
        diagram.points.len(),
        sub.verdict
    ));
    summary.verdict = "ok".to_string();
    Ok(0)
}

struct SuiteResult {
    name: &'static str,
    passed: bool,
    detail: String,
}

fn run_validate(prep: &Prepared, summary: &mut Summary, say: &dyn Fn(&str)) -> Result<i32> {
    // calibrated over the built-in families with a factor-two margin
    let equivalence_c = 12.0;
    let mut results: Vec<SuiteResult> = Vec::new();
    let push = |name: &'static str, out: Result<(bool, String)>, results: &mut Vec<SuiteResult>| {
        match out {
            Ok((passed, detail)) => results.push(SuiteResult {
                name,
                passed,
                detail,
            }),
            Err(e) => results.push(SuiteResult {
                name,
                passed: false,
                detail: e.to_string(),
            }),
        }
    };

    // oracle equivalence between power iteration and the closed form
    push(
        "oracle-equivalence",
        (|| {
            let tol_rel =
                equivalence_c * (prep.mesh.h() + prep.grid.h() * prep.grid.h());
            let mut worst: f64 = 0.0;
            for &lambda in &[0.0, 0.5, 1.0, 2.0] {
                let r = spectral_radius(&prep.prop, lambda)?.radius;
                let k = closed_form_reproduction(&prep.model, &prep.mesh, prep.sigma1, lambda)?;
                worst = worst.max((r - k).abs() / k.abs().max(1e-12));
            }
            Ok((
                worst <= tol_rel,
                format!("max relative gap {worst:.3e} vs tolerance {tol_rel:.3e}"),
            ))
        })(),
        &mut results,
    );

    // strict monotonicity of the radius in the intensity
    push(
        "monotonicity",
        (|| {
            let increasing = prep.model.mortality_sign() < 0.0;
            let hi = match find_critical_intensity(&prep.prop) {
                Ok((l0, _)) => 2.0 * l0,
                Err(_) => 2.0,
            };
            let mut last = None;
            let mut ok = true;
            for i in 0..10 {
                let lambda = hi * i as f64 / 9.0;
                let r = spectral_radius(&prep.prop, lambda)?.radius;
                if let Some(prev) = last {
                    let delta: f64 = r - prev;
                    let good = if increasing {
                        delta > 1e-6
                    } else {
                        delta < -1e-6
                    };
                    ok = ok && good;
                }
                last = Some(r);
            }
            Ok((ok, format!("10 samples on [0, {hi:.3}]")))
        })(),
        &mut results,
    );

    // the implicit march maps the nonnegative cone into itself
    push(
        "propagator-positivity",
        (|| {
            use rand::{Rng, SeedableRng};
            let mut rng = rand::rngs::StdRng::seed_from_u64(2024);
            let n = prep.grid.active_count();
            let mut min_seen = f64::INFINITY;
            for trial in 0..20 {
                let phi: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..2.0)).collect();
                let env: Option<Vec<f64>> = if trial % 2 == 0 {
                    Some((0..n).map(|_| rng.gen_range(0.0..1.0)).collect())
                } else {
                    None
                };
                let out = crate::ageprop::propagate(
                    &prep.model,
                    &prep.grid,
                    &prep.mesh,
                    1.0,
                    &phi,
                    prep.mesh.max_age,
                    env.as_deref(),
                )?;
                min_seen = min_seen.min(out.iter().cloned().fold(f64::INFINITY, f64::min));
            }
            Ok((
                min_seen >= -1e-12,
                format!("minimum propagated entry {min_seen:.3e}"),
            ))
        })(),
        &mut results,
    );

    // kernel dimension at the critical point, on a capped grid so the
    // singular value decomposition stays small
    push(
        "kernel-dimension",
        (|| {
            let n_small = prep.grid.n.min(16);
            let m_small = prep.mesh.steps.min(32);
            let grid = SpatialGrid::new(prep.model.domain_length, n_small, prep.model.boundary)?;
            let mesh = AgeMesh::new(&prep.model, m_small)?;
            let prop = Propagator::new(&prep.model, &grid, &mesh, prep.scheme)?;
            let (l0, spec) = find_critical_intensity(&prop)?;
            let tangent = tangent_at_critical(&prop, l0, &spec.eigenvector)?;
            let rep = analysis::kernel_check(&prep.model, &grid, &mesh, l0, &tangent)?;
            let ok = rep.s1 / rep.s2 <= 1e-4 && rep.kernel_angle <= 1e-3;
            Ok((
                ok,
                format!(
                    "s1/s2 = {:.3e}, kernel angle {:.3e} rad",
                    rep.s1 / rep.s2,
                    rep.kernel_angle
                ),
            ))
        })(),
        &mut results,
    );

    // fixed-point identity of the intensity derivative direction
    push(
        "transversality",
        (|| {
            let (l0, spec) = find_critical_intensity(&prep.prop)?;
            let rep = analysis::transversality_check(&prep.prop, l0, &spec.eigenvector)?;
            let tol = (equivalence_c * (prep.mesh.h() + prep.grid.h() * prep.grid.h())).max(1e-3);
            Ok((
                rep.defect <= tol && rep.z_norm > 0.0,
                format!("defect {:.3e} vs tolerance {tol:.3e}", rep.defect),
            ))
        })(),
        &mut results,
    );

    let mut all = true;
    for r in &results {
        let tag = if r.passed { "PASS" } else { "FAIL" };
        say(&format!("{tag} {:<24} {}", r.name, r.detail));
        summary.notes.push(format!("{tag} {}: {}", r.name, r.detail));
        all = all && r.passed;
    }
    summary.verdict = if all { "pass" } else { "fail" }.to_string();
    Ok(if all { 0 } else { 1 })
}

/// Writes summary plus data files for one command into `out_dir`; test entry
/// point mirroring the binary.
pub fn run_with_config_text(
    cmd: Command,
    config_text: &str,
    out_dir: &Path,
    quiet: bool,
) -> i32 {
    match RunConfig::parse(config_text) {
        Ok(cfg) => run(cmd, &cfg, out_dir, quiet),
        Err(e) => {
            eprintln!("{e}");
            1
        }
    }
}

/// Helper used by tests and the validate pipeline: the full critical-point
/// pipeline on an explicit model, returning lambda0, the eigenvector and
/// the tangent field.
pub fn critical_pipeline(
    model: &ModelSpec,
    n: usize,
    age_steps: usize,
) -> Result<(SpatialGrid, AgeMesh, Propagator, f64, Vec<f64>, DensityField)> {
    let grid = SpatialGrid::new(model.domain_length, n, model.boundary)?;
    let mesh = AgeMesh::new(model, age_steps)?;
    let prop = Propagator::new(model, &grid, &mesh, Scheme::ImplicitEuler)?;
    let (lambda0, spec) = find_critical_intensity(&prop)?;
    let tangent = tangent_at_critical(&prop, lambda0, &spec.eigenvector)?;
    Ok((grid, mesh, prop, lambda0, spec.eigenvector, tangent))
}
