//! Nonlinear equilibrium system on the stacked age-space grid: residual,
//! exact Jacobian including the nonlocal coupling through the total
//! population, structured linear solves, the branch tangent at the critical
//! point and pseudo-arclength continuation.
//!
//! The Jacobian splits as `B + G W`: `B` is block lower bidiagonal in age
//! with tridiagonal blocks plus a birth row of diagonal blocks, `W` maps a
//! stacked field to its age-quadrature (an n-vector) and `G` is a stacked
//! column of tridiagonal blocks collecting every derivative through the
//! total population. Solves factor `B` by one marched block elimination and
//! handle the rank-n correction with an n-by-n capacitance matrix; bordered
//! systems for continuation add one extra column and row.

use crate::ageprop::{AgeMesh, Propagator};
use crate::error::{Error, Result};
use crate::linalg::{dot, norm_inf, Csr, CsrBuilder, TriFactor, Tridiagonal};
use crate::model::{ModelMode, ModelSpec};
use crate::spatial::{assemble, SpatialGrid};
use nalgebra::DMatrix;

/// Values `u[k][j]` on age node k and active spatial node j, age-major.
/// The aggregated total population is always recomputed from `values`.
#[derive(Debug, Clone)]
pub struct DensityField {
    pub age_steps: usize,
    pub n_space: usize,
    pub values: Vec<f64>,
}

impl DensityField {
    pub fn zeros(age_steps: usize, n_space: usize) -> Self {
        DensityField {
            age_steps,
            n_space,
            values: vec![0.0; (age_steps + 1) * n_space],
        }
    }

    pub fn from_slices(slices: &[Vec<f64>]) -> Self {
        let age_steps = slices.len() - 1;
        let n_space = slices[0].len();
        let mut values = Vec::with_capacity((age_steps + 1) * n_space);
        for s in slices {
            values.extend_from_slice(s);
        }
        DensityField {
            age_steps,
            n_space,
            values,
        }
    }

    pub fn slice(&self, k: usize) -> &[f64] {
        &self.values[k * self.n_space..(k + 1) * self.n_space]
    }

    /// U(x_j) by age-trapezoid quadrature; never cached.
    pub fn total_population(&self, mesh: &AgeMesh) -> Vec<f64> {
        debug_assert_eq!(mesh.steps, self.age_steps);
        let n = self.n_space;
        let mut total = vec![0.0; n];
        for k in 0..=self.age_steps {
            let w = mesh.weights[k];
            let s = self.slice(k);
            for j in 0..n {
                total[j] += w * s[j];
            }
        }
        total
    }

    pub fn min_entry(&self) -> f64 {
        self.values.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn norm_inf(&self) -> f64 {
        norm_inf(&self.values)
    }

    pub fn weighted_l2(&self, mesh: &AgeMesh, grid: &SpatialGrid) -> f64 {
        let wx = grid.h();
        let mut acc = 0.0;
        for k in 0..=self.age_steps {
            let w = mesh.weights[k];
            for &v in self.slice(k) {
                acc += w * wx * v * v;
            }
        }
        acc.sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for v in self.values.iter_mut() {
            *v *= factor;
        }
    }
}

fn reaction_value(sign: f64, u: f64) -> f64 {
    sign * u / (1.0 + u)
}

fn reaction_derivative(sign: f64, u: f64) -> f64 {
    sign / ((1.0 + u) * (1.0 + u))
}

/// Stacked equilibrium residual.
///
/// Block 0 holds the birth condition `u[0] - sum_k w_k b(U, a_k) u[k]`; block
/// k >= 1 holds the implicit-Euler age recurrence evaluated at the right node
/// with the boundary condition folded into the assembled operator.
pub fn residual(
    model: &ModelSpec,
    grid: &SpatialGrid,
    mesh: &AgeMesh,
    lambda: f64,
    u: &DensityField,
) -> Result<Vec<f64>> {
    let n = grid.active_count();
    let m = mesh.steps;
    debug_assert_eq!(u.n_space, n);
    debug_assert_eq!(u.age_steps, m);
    let total = u.total_population(mesh);
    let h = mesh.h();
    let mut out = vec![0.0; (m + 1) * n];

    // birth rows
    {
        let u0 = u.slice(0);
        for j in 0..n {
            out[j] = u0[j];
        }
        for k in 0..=m {
            let a = mesh.nodes[k];
            let w = mesh.weights[k];
            let s = u.slice(k);
            for j in 0..n {
                let b = model.birth.eval(total[j], a)?;
                out[j] -= w * b * s[j];
            }
        }
    }

    let mut au = vec![0.0; n];
    for k in 1..=m {
        let a = mesh.nodes[k];
        let op = assemble(model, grid, &total, a)?;
        let uk = u.slice(k);
        let ukm = u.slice(k - 1);
        op.matrix.matvec(uk, &mut au);
        for j in 0..n {
            let zero_order = match model.mode {
                ModelMode::Standard => lambda * model.mortality.eval(total[j], a)? * uk[j],
                ModelMode::HollingTanner { reaction_sign } => {
                    model.mortality.eval(total[j], a)? * uk[j]
                        - lambda * uk[j]
                        - reaction_value(reaction_sign, uk[j])
                }
            };
            out[k * n + j] = uk[j] - ukm[j] + h * (au[j] + zero_order);
        }
    }
    Ok(out)
}

/// Derivative of the residual with respect to the intensity parameter.
pub fn residual_dlambda(
    model: &ModelSpec,
    grid: &SpatialGrid,
    mesh: &AgeMesh,
    u: &DensityField,
) -> Result<Vec<f64>> {
    let n = grid.active_count();
    let m = mesh.steps;
    let total = u.total_population(mesh);
    let h = mesh.h();
    let mut out = vec![0.0; (m + 1) * n];
    for k in 1..=m {
        let a = mesh.nodes[k];
        let uk = u.slice(k);
        for j in 0..n {
            out[k * n + j] = match model.mode {
                ModelMode::Standard => h * model.mortality.eval(total[j], a)? * uk[j],
                ModelMode::HollingTanner { .. } => -h * uk[j],
            };
        }
    }
    Ok(out)
}

/// Jacobian blocks: `t[k-1]` is the diagonal block of age row k, `g[k]` the
/// stacked nonlocal column block (already scaled by the age step), and
/// `birth_b[l]` the diagonal of the direct birth coupling to age l.
pub struct JacobianBlocks {
    pub n: usize,
    pub m: usize,
    pub t: Vec<Tridiagonal>,
    pub g: Vec<Tridiagonal>,
    pub birth_b: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
}

pub fn assemble_blocks(
    model: &ModelSpec,
    grid: &SpatialGrid,
    mesh: &AgeMesh,
    lambda: f64,
    u: &DensityField,
) -> Result<JacobianBlocks> {
    let n = grid.active_count();
    let m = mesh.steps;
    let h = mesh.h();
    let hx = grid.h();
    let inv_h2 = 1.0 / (hx * hx);
    let total = u.total_population(mesh);
    let full_total = grid.extend_to_full(&total);

    // direct birth coupling and the accumulated birth z-derivative
    let mut birth_b = Vec::with_capacity(m + 1);
    let mut bz_sum = vec![0.0; n];
    for k in 0..=m {
        let a = mesh.nodes[k];
        let w = mesh.weights[k];
        let s = u.slice(k);
        let mut row = vec![0.0; n];
        for j in 0..n {
            row[j] = model.birth.eval(total[j], a)?;
            bz_sum[j] += w * model.birth.eval_dz(total[j], a)? * s[j];
        }
        birth_b.push(row);
    }

    let mut g = Vec::with_capacity(m + 1);
    let mut g0 = Tridiagonal::zeros(n);
    for j in 0..n {
        g0.diag[j] = -bz_sum[j];
    }
    g.push(g0);

    let mut t_blocks = Vec::with_capacity(m);
    for k in 1..=m {
        let a = mesh.nodes[k];
        let op = assemble(model, grid, &total, a)?;
        let uk = u.slice(k);
        let full_uk = grid.extend_to_full(uk);

        // diagonal block: I + h (A + zeroth order)
        let mut t = Tridiagonal::zeros(n);
        for j in 0..n {
            let zero_order = match model.mode {
                ModelMode::Standard => lambda * model.mortality.eval(total[j], a)?,
                ModelMode::HollingTanner { reaction_sign } => {
                    model.mortality.eval(total[j], a)?
                        - lambda
                        - reaction_derivative(reaction_sign, uk[j])
                }
            };
            t.diag[j] = 1.0 + h * (op.matrix.diag[j] + zero_order);
        }
        for j in 0..n - 1 {
            t.sub[j] = h * op.matrix.sub[j];
            t.sup[j] = h * op.matrix.sup[j];
        }
        t_blocks.push(t);

        // nonlocal block through the total population
        let mut gk = Tridiagonal::zeros(n);
        for p in 0..n {
            let jg = grid.global_node(p);
            let uj = full_total[jg];
            let drift_z = match &model.drift {
                Some(d) => d.eval_dz(uj, a)?,
                None => 0.0,
            };
            if jg > 0 && jg < grid.n {
                let flux_m = full_uk[jg] - full_uk[jg - 1];
                let flux_p = full_uk[jg] - full_uk[jg + 1];
                let dz_m = model
                    .diffusion
                    .eval_dz(0.5 * (full_total[jg - 1] + uj), a)?;
                let dz_p = model
                    .diffusion
                    .eval_dz(0.5 * (uj + full_total[jg + 1]), a)?;
                if p > 0 {
                    gk.sub[p - 1] += inv_h2 * flux_m * 0.5 * dz_m;
                }
                gk.diag[p] += inv_h2 * (flux_m * 0.5 * dz_m + flux_p * 0.5 * dz_p);
                if p + 1 < n {
                    gk.sup[p] += inv_h2 * flux_p * 0.5 * dz_p;
                }
                gk.diag[p] += drift_z * (full_uk[jg + 1] - full_uk[jg - 1]) / (2.0 * hx);
            } else if jg == 0 {
                let nu = grid.boundary.robin_weight[0];
                let dz_p = model.diffusion.eval_dz(0.5 * (uj + full_total[1]), a)?;
                let coeff = (inv_h2 * (full_uk[0] - full_uk[1]) + nu / hx * full_uk[0]) * 0.5 * dz_p;
                gk.diag[p] += coeff;
                if p + 1 < n {
                    gk.sup[p] += coeff;
                }
                gk.diag[p] += 0.5 * drift_z * nu * full_uk[0];
            } else {
                let nu = grid.boundary.robin_weight[1];
                let dz_m = model
                    .diffusion
                    .eval_dz(0.5 * (full_total[grid.n - 1] + uj), a)?;
                let coeff = (inv_h2 * (full_uk[grid.n] - full_uk[grid.n - 1])
                    + nu / hx * full_uk[grid.n])
                    * 0.5
                    * dz_m;
                gk.diag[p] += coeff;
                if p > 0 {
                    gk.sub[p - 1] += coeff;
                }
                gk.diag[p] -= 0.5 * drift_z * nu * full_uk[grid.n];
            }
            // zeroth-order derivative through U
            let mort_z = model.mortality.eval_dz(uj, a)?;
            let factor = match model.mode {
                ModelMode::Standard => lambda,
                ModelMode::HollingTanner { .. } => 1.0,
            };
            gk.diag[p] += factor * mort_z * full_uk[jg];
        }
        // scale by the age step
        for v in gk.diag.iter_mut() {
            *v *= h;
        }
        for v in gk.sub.iter_mut() {
            *v *= h;
        }
        for v in gk.sup.iter_mut() {
            *v *= h;
        }
        g.push(gk);
    }

    Ok(JacobianBlocks {
        n,
        m,
        t: t_blocks,
        g,
        birth_b,
        weights: mesh.weights.clone(),
    })
}

impl JacobianBlocks {
    fn age_quadrature(&self, v: &[f64]) -> Vec<f64> {
        let mut wv = vec![0.0; self.n];
        for l in 0..=self.m {
            let w = self.weights[l];
            for j in 0..self.n {
                wv[j] += w * v[l * self.n + j];
            }
        }
        wv
    }

    /// Jacobian-vector product straight from the blocks.
    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        let n = self.n;
        let m = self.m;
        let wv = self.age_quadrature(v);
        let mut out = vec![0.0; (m + 1) * n];
        let mut tmp = vec![0.0; n];

        self.g[0].matvec(&wv, &mut tmp);
        for j in 0..n {
            out[j] = v[j] + tmp[j];
            for l in 0..=m {
                out[j] -= self.weights[l] * self.birth_b[l][j] * v[l * n + j];
            }
        }
        let mut tv = vec![0.0; n];
        for k in 1..=m {
            self.t[k - 1].matvec(&v[k * n..(k + 1) * n], &mut tv);
            self.g[k].matvec(&wv, &mut tmp);
            for j in 0..n {
                out[k * n + j] = tv[j] - v[(k - 1) * n + j] + tmp[j];
            }
        }
        out
    }

    /// Export as CSR with the full structural pattern.
    pub fn to_csr(&self) -> Csr {
        let n = self.n;
        let m = self.m;
        let mut b = CsrBuilder::new((m + 1) * n);
        // birth rows: one diagonal entry per age block; the nonlocal part of
        // the birth row is diagonal as well (g[0] carries -bz_sum)
        for j in 0..n {
            for l in 0..=m {
                let mut val =
                    -self.weights[l] * self.birth_b[l][j] + self.weights[l] * self.g[0].diag[j];
                if l == 0 {
                    val += 1.0;
                }
                b.push_entry(l * n + j, val);
            }
            b.finish_row();
        }
        for k in 1..=m {
            for j in 0..n {
                let lo = j.saturating_sub(1);
                let hi = (j + 1).min(n - 1);
                for l in 0..=m {
                    for i in lo..=hi {
                        let mut val = self.weights[l] * self.g[k].entry(j, i);
                        if l == k {
                            val += self.t[k - 1].entry(j, i);
                        }
                        if l + 1 == k && i == j {
                            val -= 1.0;
                        }
                        b.push_entry(l * n + i, val);
                    }
                }
                b.finish_row();
            }
        }
        b.build()
    }
}

/// Structured factorization of the Jacobian: tridiagonal factors of the age
/// blocks, a dense factor of the eliminated birth block, and the capacitance
/// factor for the rank-n nonlocal correction.
pub struct Factorized<'a> {
    blocks: &'a JacobianBlocks,
    tf: Vec<TriFactor>,
    birth_lu: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    cap_lu: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
}

pub fn factorize(blocks: &JacobianBlocks) -> Result<Factorized<'_>> {
    let n = blocks.n;
    let m = blocks.m;
    let tf: Vec<TriFactor> = blocks
        .t
        .iter()
        .map(|t| t.factor())
        .collect::<Result<_>>()?;

    // eliminate the recurrence into the birth row: C = I - sum_l w_l diag(b_l) P_l
    let mut p = DMatrix::<f64>::identity(n, n);
    let mut c = DMatrix::<f64>::identity(n, n);
    for j in 0..n {
        c[(j, j)] -= blocks.weights[0] * blocks.birth_b[0][j];
    }
    let mut col = vec![0.0; n];
    for k in 1..=m {
        for i in 0..n {
            for j in 0..n {
                col[j] = p[(j, i)];
            }
            tf[k - 1].solve_in_place(&mut col);
            for j in 0..n {
                p[(j, i)] = col[j];
            }
        }
        let w = blocks.weights[k];
        for i in 0..n {
            for j in 0..n {
                c[(j, i)] -= w * blocks.birth_b[k][j] * p[(j, i)];
            }
        }
    }
    let birth_lu = c.lu();
    if !birth_lu.is_invertible() {
        return Err(Error::LinearSolve(
            "birth block is singular; the linearization is degenerate here \
             (possible secondary critical point)"
                .into(),
        ));
    }

    let mut fact = Factorized {
        blocks,
        tf,
        birth_lu,
        cap_lu: DMatrix::<f64>::identity(1, 1).lu(),
    };

    // capacitance I + W Btilde^{-1} G, one base solve per spatial column
    let mut cap = DMatrix::<f64>::identity(n, n);
    let mut gcol = vec![0.0; (m + 1) * n];
    for i in 0..n {
        for v in gcol.iter_mut() {
            *v = 0.0;
        }
        for (k, gk) in blocks.g.iter().enumerate() {
            if i > 0 {
                gcol[k * n + i - 1] = gk.sup[i - 1];
            }
            gcol[k * n + i] = gk.diag[i];
            if i + 1 < n {
                gcol[k * n + i + 1] = gk.sub[i];
            }
        }
        let s = fact.solve_bidiagonal(&gcol)?;
        let ws = blocks.age_quadrature(&s);
        for j in 0..n {
            cap[(j, i)] += ws[j];
        }
    }
    let cap_lu = cap.lu();
    if !cap_lu.is_invertible() {
        return Err(Error::LinearSolve(
            "capacitance block is singular; the linearization is degenerate here".into(),
        ));
    }
    fact.cap_lu = cap_lu;
    Ok(fact)
}

impl<'a> Factorized<'a> {
    /// Solve with the bidiagonal-plus-birth part only (no nonlocal coupling).
    fn solve_bidiagonal(&self, r: &[f64]) -> Result<Vec<f64>> {
        let n = self.blocks.n;
        let m = self.blocks.m;
        // forward march of the particular solution, accumulating the birth sum
        let mut q = vec![0.0; n];
        let mut acc = vec![0.0; n];
        for k in 1..=m {
            for j in 0..n {
                q[j] += r[k * n + j];
            }
            self.tf[k - 1].solve_in_place(&mut q);
            let w = self.blocks.weights[k];
            for j in 0..n {
                acc[j] += w * self.blocks.birth_b[k][j] * q[j];
            }
        }
        let mut rhs0 = nalgebra::DVector::<f64>::zeros(n);
        for j in 0..n {
            rhs0[j] = r[j] + acc[j];
        }
        let x0 = self
            .birth_lu
            .solve(&rhs0)
            .ok_or_else(|| Error::LinearSolve("birth block solve failed".into()))?;

        let mut out = vec![0.0; (m + 1) * n];
        let mut v: Vec<f64> = x0.iter().cloned().collect();
        out[..n].copy_from_slice(&v);
        for k in 1..=m {
            for j in 0..n {
                v[j] += r[k * n + j];
            }
            self.tf[k - 1].solve_in_place(&mut v);
            out[k * n..(k + 1) * n].copy_from_slice(&v);
        }
        Ok(out)
    }

    /// Full Jacobian solve via the rank-n update formula.
    pub fn solve(&self, r: &[f64]) -> Result<Vec<f64>> {
        let n = self.blocks.n;
        let m = self.blocks.m;
        let t = self.solve_bidiagonal(r)?;
        let wt = self.blocks.age_quadrature(&t);
        let mut wt_v = nalgebra::DVector::<f64>::zeros(n);
        for j in 0..n {
            wt_v[j] = wt[j];
        }
        let y = self
            .cap_lu
            .solve(&wt_v)
            .ok_or_else(|| Error::LinearSolve("capacitance solve failed".into()))?;
        let yv: Vec<f64> = y.iter().cloned().collect();
        let mut gz = vec![0.0; (m + 1) * n];
        let mut tmp = vec![0.0; n];
        for (k, gk) in self.blocks.g.iter().enumerate() {
            gk.matvec(&yv, &mut tmp);
            gz[k * n..(k + 1) * n].copy_from_slice(&tmp);
        }
        let corr = self.solve_bidiagonal(&gz)?;
        let mut x = t;
        for (xi, ci) in x.iter_mut().zip(&corr) {
            *xi -= ci;
        }
        Ok(x)
    }

    /// Bordered solve for the extended system
    /// `[J, f_lambda; phase^T, 0] (du, dlambda) = (rhs_f, rhs_g)`,
    /// with two rounds of iterative refinement to absorb the
    /// near-singularity of J close to the critical point.
    pub fn solve_bordered(
        &self,
        f_lambda: &[f64],
        phase: &[f64],
        rhs_f: &[f64],
        rhs_g: f64,
    ) -> Result<(Vec<f64>, f64)> {
        let b = self.solve(f_lambda)?;
        let denom = dot(phase, &b);
        if denom.abs() < 1e-300 || !denom.is_finite() {
            return Err(Error::LinearSolve(
                "bordered system is singular (phase direction lies in the Jacobian range)".into(),
            ));
        }
        let a = self.solve(rhs_f)?;
        let mut dlambda = (dot(phase, &a) - rhs_g) / denom;
        let mut du = a;
        for (d, bi) in du.iter_mut().zip(&b) {
            *d -= dlambda * bi;
        }

        for _ in 0..2 {
            let jv = self.blocks.matvec(&du);
            let mut res_f = vec![0.0; rhs_f.len()];
            for i in 0..rhs_f.len() {
                res_f[i] = rhs_f[i] - jv[i] - dlambda * f_lambda[i];
            }
            let res_g = rhs_g - dot(phase, &du);
            let da = self.solve(&res_f)?;
            let dd = (dot(phase, &da) - res_g) / denom;
            for i in 0..du.len() {
                du[i] += da[i] - dd * b[i];
            }
            dlambda += dd;
        }
        Ok((du, dlambda))
    }
}

/// Branch tangent at the critical point: the direct march of the critical
/// eigenvector, normalized to weighted L2 norm one. Entrywise positive.
pub fn tangent_at_critical(
    prop: &Propagator,
    lambda0: f64,
    critical_eigenvector: &[f64],
) -> Result<DensityField> {
    let traj = prop.march_direct(lambda0, critical_eigenvector)?;
    let mut field = DensityField::from_slices(&traj);
    let min = field.min_entry();
    if min < -1e-12 * field.norm_inf() {
        return Err(Error::EigenNotPositive { value: min });
    }
    let norm = field.weighted_l2(&prop.mesh, &prop.grid);
    if norm == 0.0 {
        return Err(Error::InvalidInput("tangent vanished".into()));
    }
    field.scale(1.0 / norm);
    Ok(field)
}

/// One point of the equilibrium branch.
#[derive(Debug, Clone)]
pub struct BranchPoint {
    pub eps: f64,
    pub lambda: f64,
    pub u: DensityField,
    pub residual_norm: f64,
    pub min_entry: f64,
    pub newton_iters: usize,
}

/// Branch of equilibria through the critical point, ordered by the branch
/// parameter.
#[derive(Debug, Clone)]
pub struct BifurcationDiagram {
    pub lambda0: f64,
    pub tangent: DensityField,
    pub points: Vec<BranchPoint>,
    pub subcritical: Option<bool>,
    pub n_space: usize,
    pub age_steps: usize,
    pub newton_tol: f64,
    pub notes: Vec<String>,
}

pub struct ContinuationSettings {
    pub eps_max: f64,
    pub max_points_per_side: usize,
    pub newton_tol: f64,
}

impl Default for ContinuationSettings {
    fn default() -> Self {
        ContinuationSettings {
            eps_max: 0.3,
            max_points_per_side: 20,
            newton_tol: 1e-9,
        }
    }
}

struct CorrectorOutcome {
    u: DensityField,
    lambda: f64,
    residual_norm: f64,
    iters: usize,
}

fn newton_correct(
    model: &ModelSpec,
    grid: &SpatialGrid,
    mesh: &AgeMesh,
    phase: &[f64],
    eps: f64,
    mut u: DensityField,
    mut lambda: f64,
    tol: f64,
) -> Result<CorrectorOutcome> {
    let max_iter = 25;
    for it in 0..max_iter {
        let f = residual(model, grid, mesh, lambda, &u)?;
        let g = dot(phase, &u.values) - eps;
        let err = norm_inf(&f).max(g.abs());
        if err <= tol {
            return Ok(CorrectorOutcome {
                u,
                lambda,
                residual_norm: norm_inf(&f),
                iters: it,
            });
        }
        if !err.is_finite() {
            return Err(Error::NewtonDiverged {
                iterations: it,
                residual: err,
            });
        }
        let blocks = assemble_blocks(model, grid, mesh, lambda, &u)?;
        let fact = factorize(&blocks)?;
        let f_lambda = residual_dlambda(model, grid, mesh, &u)?;
        let rhs_f: Vec<f64> = f.iter().map(|v| -v).collect();
        let (du, dlambda) = fact.solve_bordered(&f_lambda, phase, &rhs_f, -g)?;
        for (ui, di) in u.values.iter_mut().zip(&du) {
            *ui += di;
        }
        lambda += dlambda;
    }
    let f = residual(model, grid, mesh, lambda, &u)?;
    Err(Error::NewtonDiverged {
        iterations: max_iter,
        residual: norm_inf(&f),
    })
}

/// Predictor-corrector continuation with the phase condition `<T, u> = eps`,
/// both signs of the branch parameter, adaptive steps (halve on corrector
/// failure, double after two easy successes).
pub fn continue_branch(
    model: &ModelSpec,
    grid: &SpatialGrid,
    mesh: &AgeMesh,
    lambda0: f64,
    tangent: &DensityField,
    settings: &ContinuationSettings,
) -> Result<BifurcationDiagram> {
    let n = grid.active_count();
    let m = mesh.steps;
    let wx = grid.h();
    let mut phase = vec![0.0; (m + 1) * n];
    for k in 0..=m {
        for j in 0..n {
            phase[k * n + j] = mesh.weights[k] * wx * tangent.values[k * n + j];
        }
    }

    let center = BranchPoint {
        eps: 0.0,
        lambda: lambda0,
        u: DensityField::zeros(m, n),
        residual_norm: 0.0,
        min_entry: 0.0,
        newton_iters: 0,
    };

    let mut notes = Vec::new();
    let run_side = |sign: f64, notes: &mut Vec<String>| -> Result<Vec<BranchPoint>> {
        let mut points: Vec<BranchPoint> = Vec::new();
        if settings.eps_max <= 0.0 || settings.max_points_per_side == 0 {
            return Ok(points);
        }
        let eps0 = 1e-2 * mesh.max_age;
        let step_cap = (settings.eps_max / 4.0).max(eps0);
        let min_step = eps0 * 2f64.powi(-20);
        let mut step = eps0.min(settings.eps_max);
        let mut eps = 0.0_f64;
        let mut lambda = lambda0;
        let mut u = DensityField::zeros(m, n);
        let mut prev: Option<(f64, DensityField, f64)> = None; // (eps, u, lambda)
        let mut easy = 0usize;

        while points.len() < settings.max_points_per_side && eps.abs() < settings.eps_max {
            let mut eps_next = eps + sign * step;
            if eps_next.abs() > settings.eps_max {
                eps_next = sign * settings.eps_max;
            }
            // secant predictor after the first accepted point
            let (u_pred, lambda_pred) = match &prev {
                Some((eps_prev, u_prev, lambda_prev)) if (eps - eps_prev).abs() > 0.0 => {
                    let ratio = (eps_next - eps) / (eps - eps_prev);
                    let mut up = u.clone();
                    for (i, v) in up.values.iter_mut().enumerate() {
                        *v += ratio * (u.values[i] - u_prev.values[i]);
                    }
                    (up, lambda + ratio * (lambda - lambda_prev))
                }
                _ => {
                    let mut up = u.clone();
                    for (i, v) in up.values.iter_mut().enumerate() {
                        *v += (eps_next - eps) * tangent.values[i];
                    }
                    (up, lambda)
                }
            };

            match newton_correct(
                model,
                grid,
                mesh,
                &phase,
                eps_next,
                u_pred,
                lambda_pred,
                settings.newton_tol,
            ) {
                Ok(out) => {
                    let min_entry = out.u.min_entry();
                    prev = Some((eps, u.clone(), lambda));
                    eps = eps_next;
                    u = out.u.clone();
                    lambda = out.lambda;
                    points.push(BranchPoint {
                        eps,
                        lambda,
                        u: out.u,
                        residual_norm: out.residual_norm,
                        min_entry,
                        newton_iters: out.iters,
                    });
                    if out.iters <= 3 {
                        easy += 1;
                        if easy >= 2 {
                            step = (step * 2.0).min(step_cap);
                            easy = 0;
                        }
                    } else {
                        easy = 0;
                    }
                }
                Err(e) => {
                    step *= 0.5;
                    easy = 0;
                    if step < min_step {
                        notes.push(format!(
                            "continuation terminated on the eps {} side at eps = {eps}: {e}",
                            if sign > 0.0 { "positive" } else { "negative" }
                        ));
                        break;
                    }
                }
            }
        }
        Ok(points)
    };

    let pos = run_side(1.0, &mut notes)?;
    let neg = run_side(-1.0, &mut notes)?;

    let mut points: Vec<BranchPoint> = neg.into_iter().rev().collect();
    points.push(center);
    points.extend(pos);

    Ok(BifurcationDiagram {
        lambda0,
        tangent: tangent.clone(),
        points,
        subcritical: None,
        n_space: n,
        age_steps: m,
        newton_tol: settings.newton_tol,
        notes,
    })
}

/// Structural nonzero count of the stacked Jacobian for an active grid of
/// width `n` and `m` age steps: birth rows couple diagonally to every age
/// block, recurrence rows carry the spatial stencil replicated across every
/// age block with the subdiagonal identity absorbed into it.
pub fn expected_jacobian_nnz(n: usize, m: usize) -> usize {
    (m + 1) * (n + m * (3 * n - 2))
}

pub fn stacked_len(grid: &SpatialGrid, mesh: &AgeMesh) -> usize {
    grid.active_count() * (mesh.steps + 1)
}
