//! Thin wrapper around the interior-point backend: sparse assembly of a
//! convex QP with linear equalities/inequalities, primal-dual extraction,
//! and an LP-format debug dump.
//!
//! Dual convention: the Lagrangian is f(x) + lambda' (A_eq x - b_eq)
//! + mu' (A_in x - b_in) with mu >= 0, matching the backend's multipliers.

use std::io::Write;

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettings, DefaultSolver, IPSolver, SolverStatus, SupportedConeT::NonnegativeConeT,
    SupportedConeT::ZeroConeT,
};

use crate::error::{Error, Result};

/// One sparse row a'x (= or <=) rhs.
#[derive(Debug, Clone, Default)]
pub struct SparseRow {
    pub coeffs: Vec<(usize, f64)>,
    pub rhs: f64,
}

impl SparseRow {
    pub fn evaluate(&self, x: &[f64]) -> f64 {
        self.coeffs.iter().map(|&(i, c)| c * x[i]).sum::<f64>()
    }

    /// Signed violation a'x - rhs (positive means violated for a <= row).
    pub fn residual(&self, x: &[f64]) -> f64 {
        self.evaluate(x) - self.rhs
    }
}

#[derive(Debug, Clone)]
pub struct QpProblem {
    pub n: usize,
    /// Upper-triangular entries (i <= j) of the quadratic form P with
    /// objective 0.5 x'Px + q'x + constant.
    pub p_triplets: Vec<(usize, usize, f64)>,
    pub q: Vec<f64>,
    pub constant: f64,
    pub eq: Vec<SparseRow>,
    pub ineq: Vec<SparseRow>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    Infeasible,
    Unbounded,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub status: QpStatus,
    pub objective: f64,
    pub x: Vec<f64>,
    pub eq_duals: Vec<f64>,
    pub ineq_duals: Vec<f64>,
}

fn csc_from_triplets(nrows: usize, ncols: usize, triplets: &[(usize, usize, f64)]) -> CscMatrix {
    let mut by_col: Vec<Vec<(usize, f64)>> = vec![Vec::new(); ncols];
    for &(r, c, v) in triplets {
        debug_assert!(r < nrows && c < ncols);
        if v != 0.0 {
            by_col[c].push((r, v));
        }
    }
    let mut colptr = Vec::with_capacity(ncols + 1);
    let mut rowval = Vec::new();
    let mut nzval = Vec::new();
    colptr.push(0);
    for col in by_col.iter_mut() {
        col.sort_by_key(|e| e.0);
        // merge duplicates
        let mut merged: Vec<(usize, f64)> = Vec::with_capacity(col.len());
        for &(r, v) in col.iter() {
            match merged.last_mut() {
                Some(last) if last.0 == r => last.1 += v,
                _ => merged.push((r, v)),
            }
        }
        for (r, v) in merged {
            rowval.push(r);
            nzval.push(v);
        }
        colptr.push(rowval.len());
    }
    CscMatrix::new(nrows, ncols, colptr, rowval, nzval)
}

impl QpProblem {
    pub fn new(n: usize) -> QpProblem {
        QpProblem {
            n,
            p_triplets: Vec::new(),
            q: vec![0.0; n],
            constant: 0.0,
            eq: Vec::new(),
            ineq: Vec::new(),
        }
    }

    pub fn solve(&self) -> Result<QpSolution> {
        self.solve_with(1e-10, false)
            .or_else(|_| self.solve_with(1e-8, false))
            .or_else(|first| {
                // boundary-of-feasibility problems can stall the IPM; accept
                // the final iterate if its residuals check out
                self.solve_with(1e-8, true).map_err(|_| first)
            })
    }

    /// Largest primal residual of x over all rows (equalities by magnitude,
    /// inequalities by positive part).
    fn max_residual(&self, x: &[f64]) -> f64 {
        let eq = self
            .eq
            .iter()
            .map(|r| r.residual(x).abs())
            .fold(0.0f64, f64::max);
        let ineq = self
            .ineq
            .iter()
            .map(|r| r.residual(x).max(0.0))
            .fold(0.0f64, f64::max);
        eq.max(ineq)
    }

    fn solve_with(&self, tol: f64, accept_stall: bool) -> Result<QpSolution> {
        let neq = self.eq.len();
        let nin = self.ineq.len();
        let p = csc_from_triplets(self.n, self.n, &self.p_triplets)
            .to_triu(); // ensure strict upper storage
        let mut a_triplets = Vec::new();
        let mut b = Vec::with_capacity(neq + nin);
        for (r, row) in self.eq.iter().chain(self.ineq.iter()).enumerate() {
            for &(c, v) in &row.coeffs {
                a_triplets.push((r, c, v));
            }
            b.push(row.rhs);
        }
        let a = csc_from_triplets(neq + nin, self.n, &a_triplets);
        let cones = [ZeroConeT(neq), NonnegativeConeT(nin)];
        let mut settings = DefaultSettings::default();
        settings.verbose = false;
        settings.tol_gap_abs = tol;
        settings.tol_gap_rel = tol;
        settings.tol_feas = tol;
        settings.max_iter = 200;
        let mut solver = DefaultSolver::new(&p, &self.q, &a, &b, &cones, settings);
        solver.solve();
        let sol = &solver.solution;
        let status = match sol.status {
            SolverStatus::Solved | SolverStatus::AlmostSolved => QpStatus::Optimal,
            SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => {
                QpStatus::Infeasible
            }
            SolverStatus::DualInfeasible | SolverStatus::AlmostDualInfeasible => QpStatus::Unbounded,
            other => {
                if accept_stall && self.max_residual(&sol.x) <= 1e-6 {
                    QpStatus::Optimal
                } else {
                    return Err(Error::Solver(format!("solver stalled: {other:?}")));
                }
            }
        };
        Ok(QpSolution {
            status,
            objective: sol.obj_val + self.constant,
            x: sol.x.clone(),
            eq_duals: sol.z[..neq].to_vec(),
            ineq_duals: sol.z[neq..].to_vec(),
        })
    }

    /// Write the program in CPLEX LP text format for external cross-checks.
    pub fn write_lp<W: Write>(&self, w: &mut W, name: &str) -> std::io::Result<()> {
        writeln!(w, "\\ {name}")?;
        writeln!(w, "Minimize")?;
        write!(w, " obj:")?;
        let mut first = true;
        for (i, &qi) in self.q.iter().enumerate() {
            if qi != 0.0 {
                write!(w, " {} {} x{}", if qi >= 0.0 && !first { "+" } else { "" }, qi, i)?;
                first = false;
            }
        }
        if self.p_triplets.iter().any(|&(_, _, v)| v != 0.0) {
            write!(w, " + [")?;
            let mut firstq = true;
            for &(i, j, v) in &self.p_triplets {
                if v == 0.0 {
                    continue;
                }
                // P holds 0.5 x'Px; the LP [..]/2 block holds the doubled form
                let coeff = if i == j { v } else { 2.0 * v };
                if !firstq && coeff >= 0.0 {
                    write!(w, " +")?;
                }
                if i == j {
                    write!(w, " {coeff} x{i} ^ 2")?;
                } else {
                    write!(w, " {coeff} x{i} * x{j}")?;
                }
                firstq = false;
            }
            write!(w, " ] / 2")?;
        }
        writeln!(w)?;
        writeln!(w, "Subject To")?;
        for (idx, row) in self.eq.iter().enumerate() {
            write!(w, " e{idx}:")?;
            for &(i, c) in &row.coeffs {
                write!(w, " {}{} x{}", if c >= 0.0 { "+" } else { "" }, c, i)?;
            }
            writeln!(w, " = {}", row.rhs)?;
        }
        for (idx, row) in self.ineq.iter().enumerate() {
            write!(w, " i{idx}:")?;
            for &(i, c) in &row.coeffs {
                write!(w, " {}{} x{}", if c >= 0.0 { "+" } else { "" }, c, i)?;
            }
            writeln!(w, " <= {}", row.rhs)?;
        }
        writeln!(w, "Bounds")?;
        for i in 0..self.n {
            writeln!(w, " x{i} free")?;
        }
        writeln!(w, "End")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn one_variable_kkt() {
        // min x^2 s.t. (5 - x = 0): shadow price 10
        let mut qp = QpProblem::new(1);
        qp.p_triplets.push((0, 0, 2.0));
        qp.eq.push(SparseRow { coeffs: vec![(0, -1.0)], rhs: -5.0 });
        let sol = qp.solve().unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);
        assert_relative_eq!(sol.x[0], 5.0, max_relative = 1e-8);
        assert_relative_eq!(sol.objective, 25.0, max_relative = 1e-8);
        assert_relative_eq!(sol.eq_duals[0], 10.0, max_relative = 1e-6);
    }

    #[test]
    fn detects_infeasible() {
        let mut qp = QpProblem::new(1);
        qp.p_triplets.push((0, 0, 2.0));
        qp.ineq.push(SparseRow { coeffs: vec![(0, 1.0)], rhs: -1.0 });
        qp.ineq.push(SparseRow { coeffs: vec![(0, -1.0)], rhs: -1.0 });
        let sol = qp.solve().unwrap();
        assert_eq!(sol.status, QpStatus::Infeasible);
    }

    #[test]
    fn inequality_dual_sign() {
        // min (x-3)^2 s.t. x <= 1: active with mu = 4
        let mut qp = QpProblem::new(1);
        qp.p_triplets.push((0, 0, 2.0));
        qp.q[0] = -6.0;
        qp.constant = 9.0;
        qp.ineq.push(SparseRow { coeffs: vec![(0, 1.0)], rhs: 1.0 });
        let sol = qp.solve().unwrap();
        assert_relative_eq!(sol.x[0], 1.0, max_relative = 1e-7);
        assert_relative_eq!(sol.objective, 4.0, max_relative = 1e-6);
        assert_relative_eq!(sol.ineq_duals[0], 4.0, max_relative = 1e-6);
    }

    #[test]
    fn lp_dump_roundtrips_text() {
        let mut qp = QpProblem::new(2);
        qp.p_triplets.push((0, 0, 2.0));
        qp.q[1] = 1.0;
        qp.eq.push(SparseRow { coeffs: vec![(0, 1.0), (1, 1.0)], rhs: 1.0 });
        let mut buf = Vec::new();
        qp.write_lp(&mut buf, "test").unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.contains("Minimize"));
        assert!(text.contains("= 1"));
    }
}
