//! Spatial discretization on a 1-D interval: finite-difference assembly of
//! the elliptic operator with the boundary condition folded in, and the
//! principal eigenpair of the pure diffusion operator.
//!
//! Boundary rows for Neumann/Robin are ghost-eliminated and then scaled by
//! one half, which makes the assembled matrix symmetric in the plain inner
//! product whenever the drift vanishes. The matching quadrature on active
//! nodes is the uniform weight `h_x`; with it the discrete divergence
//! identity `sum_j w_j (A u)_j = boundary fluxes` holds exactly, which the
//! subcriticality functionals rely on.

use crate::error::{Error, Result};
use crate::linalg::Tridiagonal;
use crate::model::{BoundaryKind, BoundarySpec, ModelSpec};

/// Uniform grid with `n + 1` nodes on `[0, L]`. Dirichlet removes the two
/// endpoint unknowns from the active set.
#[derive(Debug, Clone)]
pub struct SpatialGrid {
    pub length: f64,
    pub n: usize,
    pub boundary: BoundarySpec,
}

impl SpatialGrid {
    pub fn new(length: f64, n: usize, boundary: BoundarySpec) -> Result<Self> {
        if length <= 0.0 {
            return Err(Error::InvalidInput("domain length must be positive".into()));
        }
        if n < 2 {
            return Err(Error::InvalidInput("need at least 2 spatial cells".into()));
        }
        Ok(SpatialGrid { length, n, boundary })
    }

    pub fn h(&self) -> f64 {
        self.length / self.n as f64
    }

    pub fn active_count(&self) -> usize {
        match self.boundary.kind {
            BoundaryKind::Dirichlet => self.n - 1,
            _ => self.n + 1,
        }
    }

    /// Global node index of active unknown `p`.
    pub fn global_node(&self, p: usize) -> usize {
        match self.boundary.kind {
            BoundaryKind::Dirichlet => p + 1,
            _ => p,
        }
    }

    pub fn active_x(&self, p: usize) -> f64 {
        self.global_node(p) as f64 * self.h()
    }

    /// Quadrature weights over active nodes (uniform `h_x`).
    pub fn quadrature_weights(&self) -> Vec<f64> {
        vec![self.h(); self.active_count()]
    }

    /// Extends an active-node field to all `n + 1` nodes, inserting the
    /// Dirichlet zeros when needed.
    pub fn extend_to_full(&self, active: &[f64]) -> Vec<f64> {
        debug_assert_eq!(active.len(), self.active_count());
        match self.boundary.kind {
            BoundaryKind::Dirichlet => {
                let mut full = Vec::with_capacity(self.n + 1);
                full.push(0.0);
                full.extend_from_slice(active);
                full.push(0.0);
                full
            }
            _ => active.to_vec(),
        }
    }
}

/// Assembled elliptic operator at one age with the density frozen.
#[derive(Debug, Clone)]
pub struct DiscreteOperator {
    pub matrix: Tridiagonal,
    pub age: f64,
    pub frozen_density: Vec<f64>,
}

/// Builds the stencil for `-(D(U,a) u')' + d(U,a) u'` over active nodes.
/// `density` lives on active nodes and may be any values; physical use has
/// it nonnegative.
pub fn assemble(model: &ModelSpec, grid: &SpatialGrid, density: &[f64], age: f64) -> Result<DiscreteOperator> {
    if density.len() != grid.active_count() {
        return Err(Error::InvalidInput(format!(
            "density has {} entries, expected {}",
            density.len(),
            grid.active_count()
        )));
    }
    let full_u = grid.extend_to_full(density);
    let matrix = assemble_inner(
        grid,
        age,
        |mid_z| model.diffusion.eval(mid_z, age),
        model.drift.as_ref().map(|d| move |z: f64| d.eval(z, age)),
        &full_u,
    )?;
    Ok(DiscreteOperator {
        matrix,
        age,
        frozen_density: density.to_vec(),
    })
}

/// The pure negative Laplacian with the grid's boundary condition
/// (unit diffusion, no drift); its first eigenvalue is the `sigma_1`
/// entering every closed-form reproduction number.
pub fn assemble_laplace(grid: &SpatialGrid) -> Result<DiscreteOperator> {
    let full_u = vec![0.0; grid.n + 1];
    let matrix = assemble_inner(
        grid,
        0.0,
        |_| Ok(1.0),
        None::<fn(f64) -> Result<f64>>,
        &full_u,
    )?;
    Ok(DiscreteOperator {
        matrix,
        age: 0.0,
        frozen_density: vec![0.0; grid.active_count()],
    })
}

fn assemble_inner<FD, FDrift>(
    grid: &SpatialGrid,
    age: f64,
    diffusion_at: FD,
    drift_at: Option<FDrift>,
    full_u: &[f64],
) -> Result<Tridiagonal>
where
    FD: Fn(f64) -> Result<f64>,
    FDrift: Fn(f64) -> Result<f64>,
{
    let n_act = grid.active_count();
    let h = grid.h();
    let inv_h2 = 1.0 / (h * h);
    let mut t = Tridiagonal::zeros(n_act);

    let diff = |z: f64, node: usize| -> Result<f64> {
        diffusion_at(z).map_err(|e| Error::Coefficient {
            name: "D",
            node,
            age,
            source: Box::new(e),
        })
    };
    let drift = |z: f64, node: usize| -> Result<f64> {
        match &drift_at {
            Some(d) => d(z).map_err(|e| Error::Coefficient {
                name: "d",
                node,
                age,
                source: Box::new(e),
            }),
            None => Ok(0.0),
        }
    };

    for p in 0..n_act {
        let j = grid.global_node(p);
        let uj = full_u[j];
        let dval = drift(uj, j)?;

        if j > 0 && j < grid.n {
            // interior stencil with midpoint diffusion
            let dm = diff(0.5 * (full_u[j - 1] + uj), j)?;
            let dp = diff(0.5 * (uj + full_u[j + 1]), j)?;
            peclet_check(dval, h, dm.min(dp), j, age)?;
            let adv = dval / (2.0 * h);
            if p > 0 {
                t.sub[p - 1] = -dm * inv_h2 - adv;
            }
            t.diag[p] = (dm + dp) * inv_h2;
            if p + 1 < n_act {
                t.sup[p] = -dp * inv_h2 + adv;
            }
        } else if j == 0 {
            // left boundary (Neumann or Robin), ghost-eliminated then halved
            let dp = diff(0.5 * (uj + full_u[1]), j)?;
            peclet_check(dval, h, dp, j, age)?;
            let nu = grid.boundary.robin_weight[0];
            t.diag[p] = dp * inv_h2 + nu * dp / h + 0.5 * dval * nu;
            t.sup[p] = -dp * inv_h2;
        } else {
            // right boundary
            let dm = diff(0.5 * (full_u[grid.n - 1] + uj), j)?;
            peclet_check(dval, h, dm, j, age)?;
            let nu = grid.boundary.robin_weight[1];
            t.diag[p] = dm * inv_h2 + nu * dm / h - 0.5 * dval * nu;
            t.sub[p - 1] = -dm * inv_h2;
        }
    }
    Ok(t)
}

/// Positivity of the implicit-step propagator requires nonpositive
/// off-diagonals; a violated mesh-Peclet bound is a hard error, never a
/// silent scheme switch.
fn peclet_check(dval: f64, h: f64, dmin: f64, node: usize, age: f64) -> Result<()> {
    if dval == 0.0 {
        return Ok(());
    }
    let peclet = dval.abs() * h / (2.0 * dmin);
    if !(peclet < 1.0) {
        return Err(Error::PecletViolation {
            node,
            age,
            value: peclet,
        });
    }
    Ok(())
}

/// Principal eigenpair of an assembled operator.
#[derive(Debug, Clone)]
pub struct EigenPair {
    pub sigma: f64,
    pub phi: Vec<f64>,
    pub iterations: usize,
    pub residual: f64,
}

/// Smallest eigenvalue and entrywise-positive eigenvector by shifted inverse
/// iteration. Residual target is `1e-10 * ||op||`.
pub fn principal_eigenpair(op: &DiscreteOperator) -> Result<EigenPair> {
    let a = &op.matrix;
    let n = a.len();
    let scale = a.norm_inf().max(1e-300);
    let tol = 1e-10 * scale;
    // small negative shift keeps the matrix invertible when sigma_1 = 0
    let shift = -1e-8 * scale;
    let factor = a.shifted(-shift).factor()?;

    let mut v = vec![1.0; n];
    let mut av = vec![0.0; n];
    let mut sigma = 0.0;
    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    let max_iter = 2000;

    while iterations < max_iter {
        iterations += 1;
        factor.solve_in_place(&mut v);
        let norm = crate::linalg::norm_inf(&v);
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::EigenNonConvergence {
                iterations,
                residual,
            });
        }
        for x in v.iter_mut() {
            *x /= norm;
        }
        a.matvec(&v, &mut av);
        let vv = crate::linalg::dot(&v, &v);
        sigma = crate::linalg::dot(&av, &v) / vv;
        residual = (0..n)
            .map(|j| (av[j] - sigma * v[j]).abs())
            .fold(0.0_f64, f64::max);
        if residual <= tol {
            break;
        }
    }
    if residual > tol {
        return Err(Error::EigenNonConvergence {
            iterations,
            residual,
        });
    }

    // positive orientation, max-norm one
    let (mut max_abs, mut max_val) = (0.0_f64, 0.0_f64);
    for &x in &v {
        if x.abs() > max_abs {
            max_abs = x.abs();
            max_val = x;
        }
    }
    let sign = if max_val < 0.0 { -1.0 } else { 1.0 };
    for x in v.iter_mut() {
        *x *= sign / max_abs;
    }
    let min_entry = v.iter().cloned().fold(f64::INFINITY, f64::min);
    if min_entry < -1e-12 {
        return Err(Error::EigenNotPositive { value: min_entry });
    }
    Ok(EigenPair {
        sigma,
        phi: v,
        iterations,
        residual,
    })
}

/// First eigenvalue of the pure Laplacian under the grid's boundary
/// condition, plus its positive eigenfunction.
pub fn laplace_principal(grid: &SpatialGrid) -> Result<EigenPair> {
    principal_eigenpair(&assemble_laplace(grid)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{CoefficientFn, ModelMode};

    fn model_with(d: &str, boundary: BoundarySpec) -> ModelSpec {
        ModelSpec {
            diffusion: CoefficientFn::parse(d).unwrap(),
            drift: None,
            mortality: CoefficientFn::constant(1.0),
            birth: CoefficientFn::constant(2.0),
            boundary,
            domain_length: 1.0,
            max_age: 1.0,
            mode: ModelMode::Standard,
        }
    }

    fn to_dense(t: &Tridiagonal) -> nalgebra::DMatrix<f64> {
        let n = t.len();
        nalgebra::DMatrix::from_fn(n, n, |r, c| t.entry(r, c))
    }

    #[test]
    fn dirichlet_unit_diffusion_standard_stencil() {
        let grid = SpatialGrid::new(1.0, 4, BoundarySpec::dirichlet()).unwrap();
        let m = model_with("1", BoundarySpec::dirichlet());
        let op = assemble(&m, &grid, &[0.0; 3], 0.0).unwrap();
        let s = 16.0; // 1/h^2
        assert_eq!(op.matrix.diag, vec![2.0 * s, 2.0 * s, 2.0 * s]);
        assert_eq!(op.matrix.sub, vec![-s, -s]);
        assert_eq!(op.matrix.sup, vec![-s, -s]);
    }

    #[test]
    fn neumann_annihilates_constants_exactly() {
        let grid = SpatialGrid::new(2.0, 8, BoundarySpec::neumann()).unwrap();
        let m = model_with("1 + 0.3*z", BoundarySpec::neumann());
        let u: Vec<f64> = (0..9).map(|j| 0.5 + 0.1 * j as f64).collect();
        let op = assemble(&m, &grid, &u, 0.4).unwrap();
        let ones = vec![1.0; 9];
        let mut out = vec![0.0; 9];
        op.matrix.matvec(&ones, &mut out);
        for v in out {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn density_dependent_diffusion_scales_stencil() {
        let grid = SpatialGrid::new(1.0, 8, BoundarySpec::dirichlet()).unwrap();
        let base = model_with("1", BoundarySpec::dirichlet());
        let scaled = model_with("1 + z", BoundarySpec::dirichlet());
        let u = vec![1.0; 7];
        let op1 = assemble(&base, &grid, &vec![0.0; 7], 0.0).unwrap();
        let op2 = assemble(&scaled, &grid, &u, 0.0).unwrap();
        for (a, b) in op1.matrix.diag.iter().zip(&op2.matrix.diag) {
            assert!((2.0 * a - b).abs() < 1e-9 * b.abs());
        }
    }

    #[test]
    fn assembly_is_exactly_symmetric_without_drift() {
        for boundary in [
            BoundarySpec::dirichlet(),
            BoundarySpec::neumann(),
            BoundarySpec::robin(1.0, 2.5).unwrap(),
        ] {
            let grid = SpatialGrid::new(1.5, 12, boundary).unwrap();
            let m = model_with("1 + z/(1+z)", boundary);
            let u: Vec<f64> = (0..grid.active_count())
                .map(|p| (p as f64 * 0.37).sin().abs())
                .collect();
            let op = assemble(&m, &grid, &u, 0.2).unwrap();
            for p in 0..grid.active_count() - 1 {
                assert_eq!(op.matrix.sub[p], op.matrix.sup[p]);
            }
        }
    }

    #[test]
    fn peclet_guard_is_a_hard_error() {
        let grid = SpatialGrid::new(1.0, 8, BoundarySpec::neumann()).unwrap();
        let mut m = model_with("0.01", BoundarySpec::neumann());
        m.drift = Some(CoefficientFn::parse("5*z").unwrap());
        let u = vec![1.0; 9];
        match assemble(&m, &grid, &u, 0.0) {
            Err(Error::PecletViolation { value, .. }) => assert!(value >= 1.0),
            other => panic!("expected Peclet violation, got {other:?}"),
        }
    }

    #[test]
    fn offdiagonals_nonpositive_under_peclet_guard() {
        let grid = SpatialGrid::new(1.0, 32, BoundarySpec::neumann()).unwrap();
        let mut m = model_with("1", BoundarySpec::neumann());
        m.drift = Some(CoefficientFn::parse("3*z").unwrap());
        let u: Vec<f64> = (0..33).map(|j| 0.2 + 0.01 * j as f64).collect();
        let op = assemble(&m, &grid, &u, 0.0).unwrap();
        assert!(op.matrix.max_offdiag() <= 0.0);
    }

    #[test]
    fn neumann_principal_pair_is_exact() {
        let grid = SpatialGrid::new(1.0, 16, BoundarySpec::neumann()).unwrap();
        let pair = laplace_principal(&grid).unwrap();
        assert!(pair.sigma.abs() < 1e-10);
        for &v in &pair.phi {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn dirichlet_sigma_matches_discrete_closed_form_and_continuum() {
        let grid = SpatialGrid::new(1.0, 128, BoundarySpec::dirichlet()).unwrap();
        let pair = laplace_principal(&grid).unwrap();
        let h = grid.h();
        let exact_discrete = 2.0 / (h * h) * (1.0 - (std::f64::consts::PI * h).cos());
        assert!(
            (pair.sigma - exact_discrete).abs() <= 1e-10 * exact_discrete,
            "{} vs {}",
            pair.sigma,
            exact_discrete
        );
        let pi2 = std::f64::consts::PI.powi(2);
        assert!((pair.sigma - pi2).abs() / pi2 < 1e-3);
    }

    #[test]
    fn dirichlet_sigma_converges_at_second_order() {
        let pi2 = std::f64::consts::PI.powi(2);
        let err = |n: usize| {
            let grid = SpatialGrid::new(1.0, n, BoundarySpec::dirichlet()).unwrap();
            (laplace_principal(&grid).unwrap().sigma - pi2).abs()
        };
        let (e32, e64, e128) = (err(32), err(64), err(128));
        let r1 = e32 / e64;
        let r2 = e64 / e128;
        assert!((3.7..4.3).contains(&r1), "ratio {r1}");
        assert!((3.7..4.3).contains(&r2), "ratio {r2}");
    }

    // dense symmetric eigensolver oracle on the assembled matrix
    #[test]
    fn robin_sigma_matches_dense_eigensolver() {
        let grid = SpatialGrid::new(1.0, 64, BoundarySpec::robin(1.0, 1.0).unwrap()).unwrap();
        let op = assemble_laplace(&grid).unwrap();
        let pair = principal_eigenpair(&op).unwrap();
        let dense = to_dense(&op.matrix);
        let eig = nalgebra::SymmetricEigen::new(dense);
        let smallest = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(
            (pair.sigma - smallest).abs() <= 1e-8 * smallest.abs().max(1.0),
            "{} vs {}",
            pair.sigma,
            smallest
        );
        let pi2 = std::f64::consts::PI.powi(2);
        assert!(pair.sigma > 0.0 && pair.sigma < pi2);
        assert!(pair.phi.iter().all(|&v| v > 0.0));
    }
}
