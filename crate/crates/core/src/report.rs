//! Machine-readable outputs: RFC-4180-style CSV files (CRLF line endings,
//! fixed numeric formatting) and a key-value summary document with stable
//! key order. All writers are deterministic so identical runs byte-reproduce
//! their files.

use crate::equilibrium::BifurcationDiagram;
use crate::error::Result;
use std::fmt::Write as _;
use std::path::Path;

/// FNV-1a over the canonical model descriptor; stable across runs and
/// platforms.
pub fn model_hash(descriptor: &str) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for b in descriptor.as_bytes() {
        hash ^= *b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

fn fmt_num(v: f64) -> String {
    if v.is_nan() {
        "nan".to_string()
    } else {
        format!("{v:.12e}")
    }
}

/// `lambda, r, iterations` trace of the reproduction-radius curve.
pub fn write_r_curve(path: &Path, rows: &[(f64, f64, usize)]) -> Result<()> {
    let mut out = String::new();
    out.push_str("lambda,r,iterations\r\n");
    for (lambda, r, iters) in rows {
        let _ = write!(out, "{},{},{}\r\n", fmt_num(*lambda), fmt_num(*r), iters);
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Spatial profile of the critical eigenvector.
pub fn write_eigenvector(path: &Path, xs: &[f64], values: &[f64]) -> Result<()> {
    let mut out = String::new();
    out.push_str("x,b_lambda0\r\n");
    for (x, v) in xs.iter().zip(values) {
        let _ = write!(out, "{},{}\r\n", fmt_num(*x), fmt_num(*v));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// One row per branch point, ordered by the branch parameter.
pub fn write_branch(
    path: &Path,
    diagram: &BifurcationDiagram,
    mesh: &crate::ageprop::AgeMesh,
    grid: &crate::spatial::SpatialGrid,
) -> Result<()> {
    let mut out = String::new();
    out.push_str("eps,lambda,l2_norm_u,sup_norm_u,min_u,residual,newton_iters\r\n");
    for p in &diagram.points {
        let _ = write!(
            out,
            "{},{},{},{},{},{},{}\r\n",
            fmt_num(p.eps),
            fmt_num(p.lambda),
            fmt_num(p.u.weighted_l2(mesh, grid)),
            fmt_num(p.u.norm_inf()),
            fmt_num(p.min_entry),
            fmt_num(p.residual_norm),
            p.newton_iters
        );
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Key-value summary with a fixed key order; every run writes one of these,
/// with `verdict = n/a` when a stage did not complete.
#[derive(Debug, Clone)]
pub struct Summary {
    pub command: String,
    pub verdict: String,
    pub lambda0: f64,
    pub sigma1: f64,
    pub r0: f64,
    pub subcritical: String,
    pub n: usize,
    pub age_steps: usize,
    pub h_x: f64,
    pub h_a: f64,
    pub boundary: String,
    pub mode: String,
    pub scheme: String,
    pub eps_max: f64,
    pub newton_tol: f64,
    pub branch_points: usize,
    pub model_hash: u64,
    pub notes: Vec<String>,
}

impl Summary {
    pub fn new(command: &str) -> Summary {
        Summary {
            command: command.to_string(),
            verdict: "n/a".to_string(),
            lambda0: f64::NAN,
            sigma1: f64::NAN,
            r0: f64::NAN,
            subcritical: "n/a".to_string(),
            n: 0,
            age_steps: 0,
            h_x: f64::NAN,
            h_a: f64::NAN,
            boundary: String::new(),
            mode: String::new(),
            scheme: String::new(),
            eps_max: f64::NAN,
            newton_tol: f64::NAN,
            branch_points: 0,
            model_hash: 0,
            notes: Vec::new(),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        let _ = writeln!(out, "command = {}", self.command);
        let _ = writeln!(out, "verdict = {}", self.verdict);
        let _ = writeln!(out, "lambda0 = {}", fmt_num(self.lambda0));
        let _ = writeln!(out, "sigma1 = {}", fmt_num(self.sigma1));
        let _ = writeln!(out, "r_q0 = {}", fmt_num(self.r0));
        let _ = writeln!(out, "subcritical = {}", self.subcritical);
        let _ = writeln!(out, "n = {}", self.n);
        let _ = writeln!(out, "age_steps = {}", self.age_steps);
        let _ = writeln!(out, "h_x = {}", fmt_num(self.h_x));
        let _ = writeln!(out, "h_a = {}", fmt_num(self.h_a));
        let _ = writeln!(out, "boundary = {}", self.boundary);
        let _ = writeln!(out, "mode = {}", self.mode);
        let _ = writeln!(out, "scheme = {}", self.scheme);
        let _ = writeln!(out, "eps_max = {}", fmt_num(self.eps_max));
        let _ = writeln!(out, "newton_tol = {}", fmt_num(self.newton_tol));
        let _ = writeln!(out, "branch_points = {}", self.branch_points);
        let _ = writeln!(out, "model_hash = {:016x}", self.model_hash);
        for (i, note) in self.notes.iter().enumerate() {
            let _ = writeln!(out, "note_{i} = {note}");
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}
