//! Age marching: the linear evolution operator from age 0, the
//! net-reproduction operator built on top of it, its spectral radius, the
//! closed-form reproduction number for commuting models, and the critical
//! intensity solver.
//!
//! The default march is implicit Euler with the intensity-scaled mortality
//! inside the step matrix, matching the discretization of the nonlinear
//! equilibrium residual; the kernel of the equilibrium linearization is then
//! singular exactly where the discrete spectral radius crosses one. The
//! exponentially factored variant (mortality pulled out of the march in
//! closed form) is available as an alternative route; the two agree to first
//! order in the age step.

use crate::error::{Error, Result};
use crate::linalg::{dot, norm_inf, Tridiagonal};
use crate::model::{ModelMode, ModelSpec};
use crate::roots::brent;
use crate::spatial::{assemble, SpatialGrid};

/// Uniform age mesh with trapezoid quadrature weights and the cumulative
/// integrals of the frozen (zero-density) mortality and diffusion.
#[derive(Debug, Clone)]
pub struct AgeMesh {
    pub max_age: f64,
    pub steps: usize,
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
    /// cumulative trapezoid of mu(0, .)
    pub mu0_cum: Vec<f64>,
    /// cumulative trapezoid of D(0, .)
    pub diff0_cum: Vec<f64>,
    pub mu0: Vec<f64>,
}

impl AgeMesh {
    pub fn new(model: &ModelSpec, steps: usize) -> Result<AgeMesh> {
        if steps < 1 {
            return Err(Error::InvalidInput("need at least one age step".into()));
        }
        if !(model.max_age > 0.0) || !model.max_age.is_finite() {
            return Err(Error::InvalidInput("max_age must be positive and finite".into()));
        }
        let m = steps;
        let h = model.max_age / m as f64;
        let nodes: Vec<f64> = (0..=m).map(|k| k as f64 * h).collect();
        let mut weights = vec![h; m + 1];
        weights[0] = 0.5 * h;
        weights[m] = 0.5 * h;

        let mut mu0 = Vec::with_capacity(m + 1);
        let mut d0 = Vec::with_capacity(m + 1);
        for &a in &nodes {
            mu0.push(model.mortality.eval(0.0, a)?);
            d0.push(model.diffusion.eval(0.0, a)?);
        }
        let mut mu0_cum = vec![0.0; m + 1];
        let mut diff0_cum = vec![0.0; m + 1];
        for k in 1..=m {
            mu0_cum[k] = mu0_cum[k - 1] + 0.5 * h * (mu0[k - 1] + mu0[k]);
            diff0_cum[k] = diff0_cum[k - 1] + 0.5 * h * (d0[k - 1] + d0[k]);
        }
        Ok(AgeMesh {
            max_age: model.max_age,
            steps: m,
            nodes,
            weights,
            mu0_cum,
            diff0_cum,
            mu0,
        })
    }

    pub fn h(&self) -> f64 {
        self.max_age / self.steps as f64
    }

    /// Integral of the intensity-coupled mortality up to node k: the
    /// reference mortality in the standard regime, plain age in the
    /// inverted-sign regime.
    pub fn intensity_integral(&self, mode: &ModelMode, k: usize) -> f64 {
        match mode {
            ModelMode::Standard => self.mu0_cum[k],
            ModelMode::HollingTanner { .. } => self.nodes[k],
        }
    }

    /// Index of the mesh node equal to `age`, if any.
    pub fn node_index(&self, age: f64) -> Option<usize> {
        let h = self.h();
        let k = (age / h).round() as isize;
        if k < 0 || k as usize > self.steps {
            return None;
        }
        let k = k as usize;
        if (self.nodes[k] - age).abs() <= 1e-10 * self.max_age.max(1.0) {
            Some(k)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    ImplicitEuler,
    CrankNicolson,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QForm {
    /// Mortality inside the implicit step (matches the equilibrium residual).
    Direct,
    /// Exact exponential mortality factor times the diffusion-only march.
    Factored,
}

/// Frozen-coefficient spatial operators on every age node, ready for
/// repeated marches at varying intensity.
pub struct Propagator {
    pub grid: SpatialGrid,
    pub mesh: AgeMesh,
    pub scheme: Scheme,
    ops: Vec<Tridiagonal>,
    /// zeroth-order part independent of lambda (zero in the standard regime)
    zeroth: Vec<f64>,
    /// coefficient of lambda in the step (mu0 in the standard regime, one otherwise)
    lambda_coeff: Vec<f64>,
    sigma_h: f64,
    b0: Vec<f64>,
    mode: ModelMode,
}

impl Propagator {
    pub fn new(model: &ModelSpec, grid: &SpatialGrid, mesh: &AgeMesh, scheme: Scheme) -> Result<Propagator> {
        let zero = vec![0.0; grid.active_count()];
        let mut ops = Vec::with_capacity(mesh.steps + 1);
        let mut b0 = Vec::with_capacity(mesh.steps + 1);
        let mut zeroth = Vec::with_capacity(mesh.steps + 1);
        let mut lambda_coeff = Vec::with_capacity(mesh.steps + 1);
        for k in 0..=mesh.steps {
            let a = mesh.nodes[k];
            ops.push(assemble(model, grid, &zero, a)?.matrix);
            b0.push(model.birth.eval(0.0, a)?);
            match model.mode {
                ModelMode::Standard => {
                    zeroth.push(0.0);
                    lambda_coeff.push(mesh.mu0[k]);
                }
                ModelMode::HollingTanner { reaction_sign } => {
                    zeroth.push(mesh.mu0[k] - reaction_sign);
                    lambda_coeff.push(1.0);
                }
            }
        }
        Ok(Propagator {
            grid: grid.clone(),
            mesh: mesh.clone(),
            scheme,
            ops,
            zeroth,
            lambda_coeff,
            sigma_h: model.mortality_sign(),
            b0,
            mode: model.mode,
        })
    }

    pub fn has_birth(&self) -> bool {
        self.b0.iter().any(|&b| b != 0.0)
    }

    pub fn mode(&self) -> ModelMode {
        self.mode
    }

    /// Frozen birth kernel b(0, a_k) on the age nodes.
    pub fn birth_kernel(&self) -> &[f64] {
        &self.b0
    }

    fn shift_at(&self, k: usize, lambda: f64, include_lambda: bool) -> f64 {
        self.zeroth[k]
            + if include_lambda {
                self.sigma_h * lambda * self.lambda_coeff[k]
            } else {
                0.0
            }
    }

    fn step_tridiag(&self, k: usize, lambda: f64, include_lambda: bool) -> Tridiagonal {
        let h = self.mesh.h();
        let op = &self.ops[k];
        let shift = self.shift_at(k, lambda, include_lambda);
        let n = op.len();
        let mut t = Tridiagonal::zeros(n);
        for j in 0..n {
            t.diag[j] = 1.0 + h * (op.diag[j] + shift);
        }
        for j in 0..n - 1 {
            t.sub[j] = h * op.sub[j];
            t.sup[j] = h * op.sup[j];
        }
        t
    }

    fn advance(&self, v: &mut Vec<f64>, k: usize, lambda: f64, include_lambda: bool) -> Result<()> {
        let h = self.mesh.h();
        match self.scheme {
            Scheme::ImplicitEuler => {
                let step = self.step_tridiag(k, lambda, include_lambda);
                let min_diag = step.diag.iter().cloned().fold(f64::INFINITY, f64::min);
                if min_diag <= 0.0 {
                    return Err(Error::StepMatrixNotM {
                        age: self.mesh.nodes[k],
                        diag: min_diag,
                    });
                }
                let f = step.factor()?;
                f.solve_in_place(v);
            }
            Scheme::CrankNicolson => {
                // (I + h/2 B_k) v_k = (I - h/2 B_{k-1}) v_{k-1}
                let n = v.len();
                let prev_op = &self.ops[k - 1];
                let prev_shift = self.shift_at(k - 1, lambda, include_lambda);
                let mut rhs = vec![0.0; n];
                prev_op.matvec(v, &mut rhs);
                for j in 0..n {
                    rhs[j] = v[j] - 0.5 * h * (rhs[j] + prev_shift * v[j]);
                }
                let op = &self.ops[k];
                let shift = self.shift_at(k, lambda, include_lambda);
                let mut lhs = Tridiagonal::zeros(n);
                for j in 0..n {
                    lhs.diag[j] = 1.0 + 0.5 * h * (op.diag[j] + shift);
                }
                for j in 0..n - 1 {
                    lhs.sub[j] = 0.5 * h * op.sub[j];
                    lhs.sup[j] = 0.5 * h * op.sup[j];
                }
                let f = lhs.factor()?;
                *v = f.solve(&rhs);
            }
        }
        Ok(())
    }

    /// Full trajectory of the direct march from age node `from` to `to`.
    pub fn march_between(
        &self,
        lambda: f64,
        phi: &[f64],
        from: usize,
        to: usize,
    ) -> Result<Vec<Vec<f64>>> {
        assert!(from <= to && to <= self.mesh.steps);
        let mut v = phi.to_vec();
        let mut out = Vec::with_capacity(to - from + 1);
        out.push(v.clone());
        for k in from + 1..=to {
            self.advance(&mut v, k, lambda, true)?;
            out.push(v.clone());
        }
        Ok(out)
    }

    /// Direct march from age 0 over the whole mesh.
    pub fn march_direct(&self, lambda: f64, phi: &[f64]) -> Result<Vec<Vec<f64>>> {
        self.march_between(lambda, phi, 0, self.mesh.steps)
    }

    /// Factored march: diffusion-only step matrices times the exact
    /// exponential of the cumulative intensity-coupled mortality.
    pub fn march_factored(&self, lambda: f64, phi: &[f64]) -> Result<Vec<Vec<f64>>> {
        let mut v = phi.to_vec();
        let mut out = Vec::with_capacity(self.mesh.steps + 1);
        out.push(v.clone());
        for k in 1..=self.mesh.steps {
            self.advance(&mut v, k, lambda, false)?;
            let damp = (-self.sigma_h * lambda * self.mesh.intensity_integral(&self.mode, k)).exp();
            let mut scaled = v.clone();
            for x in scaled.iter_mut() {
                *x *= damp;
            }
            out.push(scaled);
        }
        Ok(out)
    }

    /// Applies the net-reproduction operator: quadrature of the birth kernel
    /// against the march, one march reused across all quadrature nodes.
    pub fn apply_reproduction(&self, lambda: f64, phi: &[f64], form: QForm) -> Result<Vec<f64>> {
        let m = self.mesh.steps;
        let mut v = phi.to_vec();
        let mut acc: Vec<f64> = v
            .iter()
            .map(|&x| self.mesh.weights[0] * self.b0[0] * x)
            .collect();
        for k in 1..=m {
            match form {
                QForm::Direct => self.advance(&mut v, k, lambda, true)?,
                QForm::Factored => {
                    self.advance(&mut v, k, lambda, false)?;
                }
            }
            let scale = match form {
                QForm::Direct => 1.0,
                QForm::Factored => {
                    (-self.sigma_h * lambda * self.mesh.intensity_integral(&self.mode, k)).exp()
                }
            };
            let wbk = self.mesh.weights[k] * self.b0[k] * scale;
            for (a, &x) in acc.iter_mut().zip(v.iter()) {
                *a += wbk * x;
            }
        }
        Ok(acc)
    }
}

/// Linear march with a frozen environmental density; `env` of `None` means
/// zero density. Returns the field at `a_target`, which must be a mesh node.
pub fn propagate(
    model: &ModelSpec,
    grid: &SpatialGrid,
    mesh: &AgeMesh,
    lambda: f64,
    phi: &[f64],
    a_target: f64,
    env: Option<&[f64]>,
) -> Result<Vec<f64>> {
    let k_target = mesh
        .node_index(a_target)
        .ok_or_else(|| Error::InvalidInput(format!("a_target {a_target} is not an age mesh node")))?;
    let n = grid.active_count();
    let zero = vec![0.0; n];
    let env_u = env.unwrap_or(&zero);
    if env_u.len() != n {
        return Err(Error::InvalidInput("environment density has wrong length".into()));
    }
    let h = mesh.h();
    let mut v = phi.to_vec();
    for k in 1..=k_target {
        let a = mesh.nodes[k];
        let op = assemble(model, grid, env_u, a)?.matrix;
        let mut step = Tridiagonal::zeros(n);
        for j in 0..n {
            let u_here = env_u[j];
            let shift = match model.mode {
                ModelMode::Standard => lambda * model.mortality.eval(u_here, a)?,
                ModelMode::HollingTanner { reaction_sign } => {
                    model.mortality.eval(u_here, a)? - reaction_sign - lambda
                }
            };
            step.diag[j] = 1.0 + h * (op.diag[j] + shift);
        }
        for j in 0..n - 1 {
            step.sub[j] = h * op.sub[j];
            step.sup[j] = h * op.sup[j];
        }
        let min_diag = step.diag.iter().cloned().fold(f64::INFINITY, f64::min);
        if min_diag <= 0.0 {
            return Err(Error::StepMatrixNotM { age: a, diag: min_diag });
        }
        step.factor()?.solve_in_place(&mut v);
    }
    Ok(v)
}

/// Spectral radius of the net-reproduction operator with a positive
/// eigenvector, by power iteration.
#[derive(Debug, Clone)]
pub struct SpectralResult {
    pub radius: f64,
    pub eigenvector: Vec<f64>,
    pub iterations: usize,
    pub residual: f64,
}

pub fn spectral_radius(prop: &Propagator, lambda: f64) -> Result<SpectralResult> {
    let start = vec![1.0; prop.grid.active_count()];
    spectral_radius_from(prop, lambda, QForm::Direct, &start)
}

pub fn spectral_radius_with(prop: &Propagator, lambda: f64, form: QForm) -> Result<SpectralResult> {
    let start = vec![1.0; prop.grid.active_count()];
    spectral_radius_from(prop, lambda, form, &start)
}

pub fn spectral_radius_from(
    prop: &Propagator,
    lambda: f64,
    form: QForm,
    start: &[f64],
) -> Result<SpectralResult> {
    if !prop.has_birth() {
        return Err(Error::ZeroBirthKernel);
    }
    let n = prop.grid.active_count();
    let mut v: Vec<f64> = start.to_vec();
    let vmax = norm_inf(&v);
    if vmax == 0.0 {
        v = vec![1.0; n];
    } else {
        for x in v.iter_mut() {
            *x /= vmax;
        }
    }

    let mut radius;
    let mut total_iters = 0;
    let max_iters_per_round = 3000;

    for restart in 0..3 {
        let mut prev_radius = f64::NAN;
        for _ in 0..max_iters_per_round {
            total_iters += 1;
            let w = prop.apply_reproduction(lambda, &v, form)?;
            let vv = dot(&v, &v);
            radius = dot(&w, &v) / vv;
            let wmax = norm_inf(&w);
            if wmax == 0.0 || !wmax.is_finite() {
                return Err(Error::PowerIterationStagnation {
                    iterations: total_iters,
                });
            }
            let mut next = w;
            for x in next.iter_mut() {
                *x /= wmax;
            }
            let converged_ratio =
                (radius - prev_radius).abs() < 1e-10 * radius.abs().max(1.0);
            v = next;
            prev_radius = radius;
            if converged_ratio {
                // enforce the eigen-residual before accepting
                let qv = prop.apply_reproduction(lambda, &v, form)?;
                let res = (0..n)
                    .map(|j| (qv[j] - radius * v[j]).abs())
                    .fold(0.0_f64, f64::max);
                if res <= 1e-9 * radius.abs().max(1.0) {
                    let min_entry = v.iter().cloned().fold(f64::INFINITY, f64::min);
                    if min_entry < -1e-12 {
                        return Err(Error::EigenNotPositive { value: min_entry });
                    }
                    return Ok(SpectralResult {
                        radius,
                        eigenvector: v,
                        iterations: total_iters,
                        residual: res,
                    });
                }
            }
        }
        // stagnation: deterministic perturbed restart
        let _ = restart;
        for (j, x) in v.iter_mut().enumerate() {
            *x = (*x + 1e-3 * (1.0 + (j as f64).cos().abs())).abs().max(1e-6);
        }
    }
    Err(Error::PowerIterationStagnation {
        iterations: total_iters,
    })
}

/// Closed-form reproduction number for commuting models: quadrature of the
/// birth kernel against exact exponentials of the cumulative mortality and
/// diffusion, with `sigma1` the first eigenvalue of the pure Laplacian under
/// the model's boundary condition.
pub fn closed_form_reproduction(
    model: &ModelSpec,
    mesh: &AgeMesh,
    sigma1: f64,
    lambda: f64,
) -> Result<f64> {
    let mut acc = 0.0;
    for k in 0..=mesh.steps {
        let a = mesh.nodes[k];
        let b0 = model.birth.eval(0.0, a)?;
        let decay = match model.mode {
            ModelMode::Standard => (-lambda * mesh.mu0_cum[k]).exp(),
            ModelMode::HollingTanner { reaction_sign } => {
                ((lambda + reaction_sign) * a).exp() * (-mesh.mu0_cum[k]).exp()
            }
        };
        acc += mesh.weights[k] * b0 * decay * (-sigma1 * mesh.diff0_cum[k]).exp();
    }
    Ok(acc)
}

/// Critical intensity: the unique lambda with discrete spectral radius one.
///
/// The standard regime needs net reproduction above one at zero mortality;
/// the inverted regime needs it below one. Brackets by doubling, then Brent
/// to |r - 1| <= 1e-8, warm-starting the power iteration along the way.
pub fn find_critical_intensity(prop: &Propagator) -> Result<(f64, SpectralResult)> {
    let n = prop.grid.active_count();
    let mut warm: Vec<f64> = vec![1.0; n];

    let eval = |lambda: f64, warm: &mut Vec<f64>| -> Result<f64> {
        let res = spectral_radius_from(prop, lambda, QForm::Direct, warm)?;
        *warm = res.eigenvector.clone();
        Ok(res.radius)
    };

    let r0 = eval(0.0, &mut warm)?;
    let increasing = prop.sigma_h < 0.0;
    if increasing {
        if r0 >= 1.0 {
            return Err(Error::HypothesisViolated {
                r0,
                expected: "below",
            });
        }
    } else if r0 <= 1.0 {
        return Err(Error::HypothesisViolated {
            r0,
            expected: "above",
        });
    }

    // double the upper endpoint until r crosses one
    let mut lo = 0.0;
    let mut f_lo = r0 - 1.0;
    let mut hi = 1.0;
    let cap = (2.0_f64).powi(40);
    let mut f_hi;
    loop {
        f_hi = eval(hi, &mut warm)? - 1.0;
        if f_lo * f_hi <= 0.0 {
            break;
        }
        lo = hi;
        f_lo = f_hi;
        hi *= 2.0;
        if hi > cap {
            return Err(Error::BracketNotFound { lambda_max: cap });
        }
    }

    let mut warm_brent = warm.clone();
    let f = |lambda: f64| -> Result<f64> {
        let res = spectral_radius_from(prop, lambda, QForm::Direct, &warm_brent)?;
        warm_brent = res.eigenvector;
        Ok(res.radius - 1.0)
    };
    let (lambda0, _) = brent(f, lo, hi, f_lo, f_hi, 1e-8, 1e-13, 200)?;
    let result = spectral_radius_from(prop, lambda0, QForm::Direct, &warm)?;
    Ok((lambda0, result))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BoundarySpec, CoefficientFn, ModelSpec};
    use crate::roots::bisect;
    use crate::spatial::laplace_principal;

    fn neumann_constant(b: f64, mu: f64) -> ModelSpec {
        ModelSpec {
            diffusion: CoefficientFn::constant(1.0),
            drift: None,
            mortality: CoefficientFn::constant(mu),
            birth: CoefficientFn::constant(b),
            boundary: BoundarySpec::neumann(),
            domain_length: 1.0,
            max_age: 1.0,
            mode: ModelMode::Standard,
        }
    }

    fn setup(model: &ModelSpec, n: usize, m: usize) -> (SpatialGrid, AgeMesh, Propagator) {
        let grid = SpatialGrid::new(model.domain_length, n, model.boundary).unwrap();
        let mesh = AgeMesh::new(model, m).unwrap();
        let prop = Propagator::new(model, &grid, &mesh, Scheme::ImplicitEuler).unwrap();
        (grid, mesh, prop)
    }

    #[test]
    fn age_mesh_weights_and_cumulatives() {
        let model = neumann_constant(2.0, 1.0);
        let mesh = AgeMesh::new(&model, 10).unwrap();
        let total: f64 = mesh.weights.iter().sum();
        assert!((total - 1.0).abs() < 1e-14);
        for k in 1..=10 {
            assert!(mesh.mu0_cum[k] >= mesh.mu0_cum[k - 1]);
            assert!(mesh.diff0_cum[k] >= mesh.diff0_cum[k - 1]);
            assert!((mesh.mu0_cum[k] - mesh.nodes[k]).abs() < 1e-14);
        }
    }

    #[test]
    fn propagate_at_zero_age_is_identity() {
        let model = neumann_constant(2.0, 1.0);
        let (grid, mesh, _) = setup(&model, 8, 20);
        let phi: Vec<f64> = (0..grid.active_count()).map(|j| 1.0 + j as f64).collect();
        let out = propagate(&model, &grid, &mesh, 0.7, &phi, 0.0, None).unwrap();
        assert_eq!(out, phi);
    }

    // scalar ODE oracle: implicit Euler on v' = -v gives (1+h)^(-M)
    #[test]
    fn constant_model_march_matches_scalar_oracle() {
        let model = neumann_constant(2.0, 1.0);
        let (grid, mesh, _) = setup(&model, 8, 200);
        let phi = vec![1.0; grid.active_count()];
        let out = propagate(&model, &grid, &mesh, 1.0, &phi, 1.0, None).unwrap();
        let h = mesh.h();
        let oracle = (1.0 + h).powi(-200);
        for &v in &out {
            assert!((v - oracle).abs() < 1e-12);
        }
        let exact = (-1.0_f64).exp();
        assert!((out[0] - exact).abs() <= h * exact * 1.5);
    }

    // scalar decay oracle with the discrete principal eigenvalue
    #[test]
    fn dirichlet_eigenmode_decays_at_discrete_rate() {
        let model = ModelSpec {
            boundary: BoundarySpec::dirichlet(),
            ..neumann_constant(2.0, 1.0)
        };
        // lambda = 0 leaves the pure diffusion march
        let (grid, mesh, _) = setup(&model, 32, 100);
        let sigma = laplace_principal(&grid).unwrap().sigma;
        let phi: Vec<f64> = (0..grid.active_count())
            .map(|p| (std::f64::consts::PI * grid.active_x(p)).sin())
            .collect();
        let out = propagate(&model, &grid, &mesh, 0.0, &phi, 0.1, None).unwrap();
        let k = mesh.node_index(0.1).unwrap();
        let h = mesh.h();
        let factor = (1.0 + h * sigma).powi(-(k as i32));
        for (o, p) in out.iter().zip(&phi) {
            assert!((o - factor * p).abs() < 1e-10, "{o} vs {}", factor * p);
        }
        // close to the continuum rate as well
        assert!(((out[15] / phi[15]) - (-sigma * 0.1).exp()).abs() < 2e-2);
    }

    #[test]
    fn semigroup_property_is_exact_for_node_aligned_splits() {
        let model = ModelSpec {
            diffusion: CoefficientFn::parse("1 + 0.5*a").unwrap(),
            ..neumann_constant(2.0, 1.0)
        };
        let (grid, mesh, prop) = setup(&model, 12, 40);
        let _ = mesh;
        let phi: Vec<f64> = (0..grid.active_count())
            .map(|j| 0.3 + (j as f64 * 0.4).cos().abs())
            .collect();
        let full = prop.march_direct(0.8, &phi).unwrap();
        let mid = 17;
        let second = prop
            .march_between(0.8, &full[mid], mid, prop.mesh.steps)
            .unwrap();
        let end_two_stage = second.last().unwrap();
        let end_direct = full.last().unwrap();
        for (a, b) in end_two_stage.iter().zip(end_direct) {
            assert!((a - b).abs() < 1e-13);
        }
    }

    #[test]
    fn zero_birth_kernel_gives_zero_field_and_spectral_error() {
        let model = neumann_constant(0.0, 1.0);
        let (grid, _, prop) = setup(&model, 8, 50);
        let phi = vec![1.0; grid.active_count()];
        let q = prop.apply_reproduction(0.5, &phi, QForm::Direct).unwrap();
        assert!(q.iter().all(|&v| v == 0.0));
        assert!(matches!(
            spectral_radius(&prop, 0.5),
            Err(Error::ZeroBirthKernel)
        ));
    }

    #[test]
    fn reproduction_at_zero_intensity_is_exact_for_constants() {
        let model = neumann_constant(2.0, 1.0);
        let (grid, _, prop) = setup(&model, 8, 100);
        let phi = vec![1.0; grid.active_count()];
        let q = prop.apply_reproduction(0.0, &phi, QForm::Direct).unwrap();
        for &v in &q {
            assert!((v - 2.0).abs() < 1e-12);
        }
    }

    // closed-form oracle k(1) = 2(1 - exp(-1)) for b=2, mu=1
    #[test]
    fn reproduction_matches_closed_form_within_stepping_error() {
        let model = neumann_constant(2.0, 1.0);
        let (grid, _, prop) = setup(&model, 8, 200);
        let phi = vec![1.0; grid.active_count()];
        let q = prop.apply_reproduction(1.0, &phi, QForm::Direct).unwrap();
        let exact = 2.0 * (1.0 - (-1.0_f64).exp());
        for &v in &q {
            assert!((v - exact).abs() < 3e-3, "{v} vs {exact}");
        }
        // and exactly the scalar quadrature of the discrete march
        let h = prop.mesh.h();
        let scalar: f64 = (0..=200)
            .map(|k| prop.mesh.weights[k] * 2.0 * (1.0 + h).powi(-(k as i32)))
            .sum();
        for &v in &q {
            assert!((v - scalar).abs() < 1e-12);
        }
    }

    // the direct and factored routes agree to first order in the age step
    #[test]
    fn direct_and_factored_forms_converge_at_first_order()  {
        let model = neumann_constant(2.0, 1.0);
        let errs: Vec<f64> = [100usize, 200, 400]
            .iter()
            .map(|&m| {
                let (grid, _, prop) = setup(&model, 8, m);
                let phi = vec![1.0; grid.active_count()];
                let qd = prop.apply_reproduction(1.3, &phi, QForm::Direct).unwrap();
                let qf = prop.apply_reproduction(1.3, &phi, QForm::Factored).unwrap();
                (0..qd.len())
                    .map(|j| (qd[j] - qf[j]).abs())
                    .fold(0.0_f64, f64::max)
            })
            .collect();
        let r1 = errs[0] / errs[1];
        let r2 = errs[1] / errs[2];
        assert!((1.7..2.3).contains(&r1), "ratio {r1}");
        assert!((1.7..2.3).contains(&r2), "ratio {r2}");
    }

    #[test]
    fn propagator_maps_nonnegative_cone_into_itself() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand::rngs::StdRng::seed_from_u64(7);
        let mut model = neumann_constant(2.0, 1.0);
        model.diffusion = CoefficientFn::parse("1 + z/(1+z)").unwrap();
        model.drift = Some(CoefficientFn::parse("0.5*z").unwrap());
        let (grid, mesh, _) = setup(&model, 16, 50);
        let env: Vec<f64> = (0..grid.active_count()).map(|_| rng.gen_range(0.0..1.5)).collect();
        for _ in 0..20 {
            let phi: Vec<f64> = (0..grid.active_count()).map(|_| rng.gen_range(0.0..2.0)).collect();
            let out = propagate(&model, &grid, &mesh, 1.0, &phi, 1.0, Some(&env)).unwrap();
            assert!(out.iter().all(|&v| v >= 0.0));
        }
    }

    // commuting model with age-dependent diffusion: power iteration vs closed form
    #[test]
    fn spectral_radius_matches_closed_form_for_commuting_model() {
        let model = ModelSpec {
            diffusion: CoefficientFn::parse("1 + a").unwrap(),
            ..neumann_constant(2.0, 1.0)
        };
        let (grid, mesh, prop) = setup(&model, 64, 200);
        let sigma = laplace_principal(&grid).unwrap().sigma;
        for &lambda in &[0.0, 0.5, 1.0] {
            let r = spectral_radius(&prop, lambda).unwrap().radius;
            let k = closed_form_reproduction(&model, &mesh, sigma, lambda).unwrap();
            assert!(
                (r - k).abs() / k <= 1e-3,
                "lambda={lambda}: r={r}, k={k}, rel={}",
                (r - k).abs() / k
            );
        }
    }

    #[test]
    fn spectral_radius_is_strictly_monotone() {
        let model = neumann_constant(2.0, 1.0);
        let (_, _, prop) = setup(&model, 16, 100);
        let lambdas = [0.0, 0.4, 0.8, 1.2, 1.6, 2.0];
        let rs: Vec<f64> = lambdas
            .iter()
            .map(|&l| spectral_radius(&prop, l).unwrap().radius)
            .collect();
        for pair in rs.windows(2) {
            assert!(pair[0] - pair[1] > 1e-6, "{pair:?}");
        }

        let ht = ModelSpec {
            birth: CoefficientFn::constant(0.5),
            mortality: CoefficientFn::constant(0.0),
            mode: ModelMode::HollingTanner { reaction_sign: -1.0 },
            ..neumann_constant(0.5, 0.0)
        };
        let (_, _, prop) = setup(&ht, 16, 100);
        let rs: Vec<f64> = lambdas
            .iter()
            .map(|&l| spectral_radius(&prop, l).unwrap().radius)
            .collect();
        for pair in rs.windows(2) {
            assert!(pair[1] - pair[0] > 1e-6, "{pair:?}");
        }
    }

    #[test]
    fn spectral_radius_vanishes_for_large_intensity() {
        let model = neumann_constant(2.0, 1.0);
        let (_, mesh, prop) = setup(&model, 8, 400);
        // scale chosen from the cumulative reference mortality
        let lambda_big = 600.0 / mesh.mu0_cum[mesh.steps];
        let r = spectral_radius(&prop, lambda_big).unwrap().radius;
        assert!(r < 1e-2, "r = {r}");
    }

    #[test]
    fn critical_intensity_matches_scalar_bisection_oracle() {
        let model = neumann_constant(2.0, 1.0);
        let (_, _, prop) = setup(&model, 8, 2000);
        let (lambda0, spec) = find_critical_intensity(&prop).unwrap();
        // oracle: root of 2(1 - exp(-lambda))/lambda = 1
        let oracle = bisect(
            |l: f64| Ok(2.0 * (1.0 - (-l).exp()) / l - 1.0),
            1.0,
            3.0,
            1e-12,
            200,
        )
        .unwrap();
        assert!(
            (lambda0 - oracle).abs() <= 1e-3,
            "{lambda0} vs oracle {oracle}"
        );
        assert!((spec.radius - 1.0).abs() <= 1e-8);
        assert!(spec.eigenvector.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn holling_tanner_critical_intensity() {
        let ht = ModelSpec {
            birth: CoefficientFn::constant(0.5),
            mortality: CoefficientFn::constant(0.0),
            mode: ModelMode::HollingTanner { reaction_sign: -1.0 },
            ..neumann_constant(0.5, 0.0)
        };
        let (_, _, prop) = setup(&ht, 8, 800);
        let (lambda0, _) = find_critical_intensity(&prop).unwrap();
        // oracle: root of 0.5 (exp(lambda-1) - 1)/(lambda-1) = 1
        let oracle = bisect(
            |l: f64| Ok(0.5 * ((l - 1.0).exp() - 1.0) / (l - 1.0) - 1.0),
            1.5,
            3.0,
            1e-12,
            200,
        )
        .unwrap();
        assert!(
            (lambda0 - oracle).abs() <= 5e-3,
            "{lambda0} vs oracle {oracle}"
        );
    }

    #[test]
    fn precondition_failures_are_hypothesis_errors() {
        let small_birth = neumann_constant(0.5, 1.0);
        let (_, _, prop) = setup(&small_birth, 8, 100);
        match find_critical_intensity(&prop) {
            Err(Error::HypothesisViolated { r0, expected }) => {
                assert!((r0 - 0.5).abs() < 5e-2);
                assert_eq!(expected, "above");
            }
            other => panic!("expected hypothesis violation, got {other:?}"),
        }

        let big_ht = ModelSpec {
            birth: CoefficientFn::constant(5.0),
            mortality: CoefficientFn::constant(0.0),
            mode: ModelMode::HollingTanner { reaction_sign: -1.0 },
            ..neumann_constant(5.0, 0.0)
        };
        let (_, _, prop) = setup(&big_ht, 8, 100);
        assert!(matches!(
            find_critical_intensity(&prop),
            Err(Error::HypothesisViolated { .. })
        ));
    }
}
