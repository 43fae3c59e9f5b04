//! Gradient-based master search over the mass-flow schedule.
//!
//! At a feasible flow the sub-problem supplies the optimal cost and its
//! envelope gradient; the master takes a projected gradient step inside the
//! flow-side feasible set. An infeasible flow yields an outer-approximation
//! cut from the relaxed sub-problem, and the flow is revised onto the cut.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::{DispatchInstance, FlowSchedule, NetworkIndex};
use crate::qp::{QpProblem, QpStatus, SparseRow};
use crate::subproblem::{
    build_subproblem, Cut, DispatchProgram, SubOutcome, SubproblemSolution,
};
use crate::thermal::{blended_flows, midpoint_flows, CoefficientForm};

/// Initial flow schedule policy for the master search.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitialFlows {
    /// Midpoint of the flow bounds per pipe per period.
    Midpoint,
    /// Maximum flow bound (coolest admissible operation).
    Max,
    /// Minimum flow bound.
    Min,
}

#[derive(Debug, Clone)]
pub struct MasterOptions {
    /// Step-size factor gamma in (0, 1).
    pub gamma: f64,
    /// Relative objective-change convergence threshold delta.
    pub delta: f64,
    pub max_iter: usize,
    /// Stop after this many consecutive infeasible iterations.
    pub infeasible_stop: usize,
    /// Starting point of the flow search.
    pub initial: InitialFlows,
    /// Reproduce the printed step-size sign (ascent direction).
    pub paper_literal_stepsize: bool,
    pub form: CoefficientForm,
}

impl Default for MasterOptions {
    fn default() -> Self {
        MasterOptions {
            gamma: 0.3,
            delta: 1e-4,
            max_iter: 60,
            infeasible_stop: 3,
            initial: InitialFlows::Midpoint,
            paper_literal_stepsize: false,
            form: CoefficientForm::Consistent,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IterStatus {
    Optimal,
    Infeasible,
}

#[derive(Debug, Clone)]
pub struct IterationLog {
    pub k: usize,
    pub status: IterStatus,
    pub objective: Option<f64>,
    pub sigma: Option<f64>,
    pub step: Option<f64>,
    pub n_cuts: usize,
    pub grad_norm: Option<f64>,
    pub wallclock_ms: f64,
}

#[derive(Debug)]
pub struct DispatchResult {
    pub flows: FlowSchedule,
    pub solution: SubproblemSolution,
    pub objective: f64,
    pub iterations: Vec<IterationLog>,
    pub converged: bool,
    pub cuts: Vec<Cut>,
}

/// Relative objective change between consecutive feasible iterates,
/// normalized by the first feasible objective.
pub fn sigma(j_prev: f64, j_cur: f64, j_first: f64) -> f64 {
    ((j_cur - j_prev) / j_first.abs().max(1e-12)).abs()
}

/// Orthogonal projector onto the null space of the active-constraint
/// normals: P = I - H (H'H)^+ H'.
pub fn projection_matrix(normals: &[Vec<f64>], dim: usize) -> DMatrix<f64> {
    let mut p = DMatrix::identity(dim, dim);
    let mut basis: Vec<DVector<f64>> = Vec::new();
    for nvec in normals {
        let raw = DVector::from_column_slice(nvec);
        let scale = raw.norm();
        if scale <= 1e-14 {
            continue;
        }
        let mut v = raw;
        // modified Gram-Schmidt with one reorthogonalization pass
        for _ in 0..2 {
            for b in &basis {
                let c = v.dot(b);
                v -= b * c;
            }
        }
        let norm = v.norm();
        if norm > 1e-10 * scale {
            basis.push(v / norm);
        }
    }
    for b in &basis {
        p -= b * b.transpose();
    }
    p
}

/// Step size gamma J / ((Pg)'g); with `paper_literal` the printed sign is
/// kept, which walks uphill.
pub fn step_size(gamma: f64, objective: f64, pg_dot_g: f64, paper_literal: bool) -> f64 {
    let alpha = gamma * objective / pg_dot_g;
    if paper_literal {
        -alpha
    } else {
        alpha
    }
}

/// The flow-side feasible region over master coordinates (supply pipe flows,
/// layout `pipe * periods + t`): box bounds, return-pipe bounds through the
/// return-flow map, and nonnegative exchanger flows.
#[derive(Debug, Clone)]
pub struct FeasibleSet {
    pub dim: usize,
    pub periods: usize,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub rows: Vec<SparseRow>,
}

impl FeasibleSet {
    pub fn build(inst: &DispatchInstance, idx: &NetworkIndex) -> FeasibleSet {
        let n = inst.horizon.periods;
        let n_sp = idx.n_supply_pipes();
        let dim = n_sp * n;
        let mut lower = vec![0.0; dim];
        let mut upper = vec![0.0; dim];
        for (j, pipe) in inst.heat_network.supply_pipes.iter().enumerate() {
            for t in 0..n {
                lower[j * n + t] = pipe.flow_min.at(t);
                upper[j * n + t] = pipe.flow_max.at(t);
            }
        }
        let mut rows = Vec::new();
        for (jr, pipe) in inst.heat_network.return_pipes.iter().enumerate() {
            for t in 0..n {
                let coeffs: Vec<(usize, f64)> = (0..n_sp)
                    .filter_map(|js| {
                        let g = idx.return_flow_map[(jr, js)];
                        (g != 0.0).then_some((js * n + t, g))
                    })
                    .collect();
                let neg: Vec<(usize, f64)> = coeffs.iter().map(|&(i, c)| (i, -c)).collect();
                rows.push(SparseRow { coeffs, rhs: pipe.flow_max.at(t) });
                rows.push(SparseRow { coeffs: neg, rhs: -pipe.flow_min.at(t) });
            }
        }
        for k in 0..idx.n_nodes() {
            if idx.exchanger_flow[k].is_empty() {
                continue;
            }
            for t in 0..n {
                let coeffs: Vec<(usize, f64)> = idx.exchanger_flow[k]
                    .iter()
                    .map(|&(j, c)| (j * n + t, -c))
                    .collect();
                rows.push(SparseRow { coeffs, rhs: 0.0 });
            }
        }
        FeasibleSet { dim, periods: n, lower, upper, rows }
    }

    /// Euclidean projection of `target` onto the set intersected with cuts.
    pub fn project(&self, target: &[f64], cuts: &[Cut]) -> Result<Vec<f64>> {
        let mut qp = QpProblem::new(self.dim);
        for i in 0..self.dim {
            qp.p_triplets.push((i, i, 1.0));
            qp.q[i] = -target[i];
            qp.ineq.push(SparseRow { coeffs: vec![(i, 1.0)], rhs: self.upper[i] });
            qp.ineq.push(SparseRow { coeffs: vec![(i, -1.0)], rhs: -self.lower[i] });
        }
        for row in &self.rows {
            qp.ineq.push(row.clone());
        }
        for cut in cuts {
            let coeffs: Vec<(usize, f64)> = cut
                .normal
                .iter()
                .enumerate()
                .filter_map(|(i, &c)| (c.abs() > 1e-14).then_some((i, c)))
                .collect();
            qp.ineq.push(SparseRow { coeffs, rhs: cut.rhs });
        }
        let sol = qp.solve()?;
        match sol.status {
            QpStatus::Optimal => Ok(sol.x),
            _ => Err(Error::Infeasible),
        }
    }

    /// Dense normals of the constraints active at m (within a relative
    /// tolerance), including the supplied cuts.
    pub fn active_normals(&self, m: &[f64], cuts: &[Cut]) -> Vec<Vec<f64>> {
        let tol = |b: f64| 1e-8 * (1.0 + b.abs());
        let mut out = Vec::new();
        for i in 0..self.dim {
            if (m[i] - self.upper[i]).abs() <= tol(self.upper[i]) {
                let mut e = vec![0.0; self.dim];
                e[i] = 1.0;
                out.push(e);
            } else if (m[i] - self.lower[i]).abs() <= tol(self.lower[i]) {
                let mut e = vec![0.0; self.dim];
                e[i] = -1.0;
                out.push(e);
            }
        }
        for row in &self.rows {
            if row.residual(m).abs() <= tol(row.rhs) {
                let mut e = vec![0.0; self.dim];
                for &(i, c) in &row.coeffs {
                    e[i] += c;
                }
                out.push(e);
            }
        }
        for cut in cuts {
            if cut.value(m).abs() <= tol(cut.rhs) {
                out.push(cut.normal.clone());
            }
        }
        out
    }

    pub fn contains(&self, m: &[f64], cuts: &[Cut]) -> bool {
        let tol = |b: f64| 1e-7 * (1.0 + b.abs());
        (0..self.dim).all(|i| {
            m[i] >= self.lower[i] - tol(self.lower[i]) && m[i] <= self.upper[i] + tol(self.upper[i])
        }) && self.rows.iter().all(|r| r.residual(m) <= tol(r.rhs))
            && cuts.iter().all(|c| c.value(m) <= tol(c.rhs))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Full decomposition loop: returns the best feasible iterate found.
pub fn optimal_dispatch(
    inst: &DispatchInstance,
    idx: &NetworkIndex,
    opts: &MasterOptions,
) -> Result<DispatchResult> {
    let prog = build_subproblem(inst, idx, opts.form)?;
    optimal_dispatch_with(inst, idx, &prog, opts)
}

pub fn optimal_dispatch_with(
    inst: &DispatchInstance,
    idx: &NetworkIndex,
    prog: &DispatchProgram,
    opts: &MasterOptions,
) -> Result<DispatchResult> {
    let n = inst.horizon.periods;
    let feas = FeasibleSet::build(inst, idx);
    let mut cuts: Vec<Cut> = Vec::new();
    let mut logs: Vec<IterationLog> = Vec::new();

    if feas.dim == 0 {
        // no heating network: a single sub-problem solve settles it
        let t0 = Instant::now();
        let flows = FlowSchedule::from_master(idx, n, &[]);
        let SubOutcome::Optimal(sol) = prog.solve(inst, idx, &flows)? else {
            return Err(Error::Infeasible);
        };
        logs.push(IterationLog {
            k: 1,
            status: IterStatus::Optimal,
            objective: Some(sol.objective),
            sigma: None,
            step: None,
            n_cuts: 0,
            grad_norm: Some(0.0),
            wallclock_ms: t0.elapsed().as_secs_f64() * 1e3,
        });
        let objective = sol.objective;
        return Ok(DispatchResult {
            flows,
            solution: sol,
            objective,
            iterations: logs,
            converged: true,
            cuts,
        });
    }

    let start = match opts.initial {
        InitialFlows::Midpoint => midpoint_flows(inst, idx),
        InitialFlows::Max => blended_flows(inst, idx, 1.0),
        InitialFlows::Min => blended_flows(inst, idx, 0.0),
    };
    let mut m = feas.project(&start, &cuts)?;
    let mut best: Option<(Vec<f64>, SubproblemSolution)> = None;
    let mut j_first: Option<f64> = None;
    let mut j_prev: Option<f64> = None;
    let mut consec_infeasible = 0usize;
    let mut converged = false;
    // outcome for the current m carried over from backtracking, if any
    let mut pending: Option<SubOutcome> = None;

    for k in 1..=opts.max_iter {
        let t0 = Instant::now();
        let flows = FlowSchedule::from_master(idx, n, &m);
        let outcome = match pending.take() {
            Some(o) => o,
            // a stalled solve means the iterate sits on the feasibility
            // boundary; handle it through the relaxed path
            None => match prog.solve(inst, idx, &flows) {
                Ok(o) => o,
                Err(Error::Solver(_)) => SubOutcome::Infeasible,
                Err(e) => return Err(e),
            },
        };
        match outcome {
            SubOutcome::Infeasible => {
                consec_infeasible += 1;
                let relaxed = prog.solve_relaxed(&flows)?;
                let cut = match prog.generate_cut(idx, &relaxed, &flows) {
                    Ok(cut) => cut,
                    Err(Error::NothingToCut) => {
                        // a hair's width from feasible; keep the best iterate
                        // found, or give up if there is none
                        if best.is_some() {
                            converged = true;
                            break;
                        }
                        return Err(Error::Solver(
                            "sub-problem reported infeasible but its relaxation shows no \
                             violation; the instance is numerically marginal"
                                .into(),
                        ));
                    }
                    Err(e) => return Err(e),
                };
                // revise onto the cut plane, then back into the feasible set
                let nn2 = dot(&cut.normal, &cut.normal);
                let mut target = m.clone();
                if nn2 > 1e-14 {
                    let beta = cut.value(&m) / nn2;
                    for (ti, ni) in target.iter_mut().zip(&cut.normal) {
                        *ti -= beta * ni;
                    }
                }
                cuts.push(cut);
                logs.push(IterationLog {
                    k,
                    status: IterStatus::Infeasible,
                    objective: None,
                    sigma: None,
                    step: None,
                    n_cuts: cuts.len(),
                    grad_norm: None,
                    wallclock_ms: t0.elapsed().as_secs_f64() * 1e3,
                });
                if consec_infeasible >= opts.infeasible_stop {
                    break;
                }
                m = match feas.project(&target, &cuts) {
                    Ok(v) => v,
                    Err(Error::Infeasible) => break,
                    Err(e) => return Err(e),
                };
                j_prev = None;
            }
            SubOutcome::Optimal(sol) => {
                consec_infeasible = 0;
                let j = sol.objective;
                let g = sol.gradient.clone();
                let jf = *j_first.get_or_insert(j);
                let s = j_prev.map(|jp| sigma(jp, j, jf));
                j_prev = Some(j);
                if best.as_ref().map_or(true, |(_, b)| j < b.objective) {
                    best = Some((m.clone(), sol));
                }

                let normals = feas.active_normals(&m, &cuts);
                let p = projection_matrix(&normals, feas.dim);
                let gv = DVector::from_column_slice(&g);
                let d: Vec<f64> = (&p * &gv).iter().copied().collect();
                let dnorm = norm(&d);
                let gnorm = norm(&g);

                logs.push(IterationLog {
                    k,
                    status: IterStatus::Optimal,
                    objective: Some(j),
                    sigma: s,
                    step: None,
                    n_cuts: cuts.len(),
                    grad_norm: Some(gnorm),
                    wallclock_ms: t0.elapsed().as_secs_f64() * 1e3,
                });

                if let Some(sv) = s {
                    if sv <= opts.delta {
                        converged = true;
                        break;
                    }
                }
                if dnorm <= 1e-6 * (1.0 + gnorm) {
                    // stationary on the active face
                    converged = true;
                    break;
                }

                let mut alpha = step_size(opts.gamma, j, dot(&d, &g), opts.paper_literal_stepsize);
                let mut accepted = false;
                for _ in 0..=5 {
                    let target: Vec<f64> =
                        m.iter().zip(&d).map(|(mi, di)| mi - alpha * di).collect();
                    let cand = feas.project(&target, &cuts)?;
                    let cand_flows = FlowSchedule::from_master(idx, n, &cand);
                    // a candidate that stalls the solver is simply rejected
                    let cand_out = match prog.solve(inst, idx, &cand_flows) {
                        Ok(o) => o,
                        Err(Error::Solver(_)) => {
                            alpha *= 0.5;
                            continue;
                        }
                        Err(e) => return Err(e),
                    };
                    if let SubOutcome::Optimal(ref s2) = cand_out {
                        if s2.objective <= j + 1e-9 * (1.0 + j.abs()) {
                            if let Some(last) = logs.last_mut() {
                                last.step = Some(alpha);
                            }
                            m = cand;
                            pending = Some(cand_out);
                            accepted = true;
                            break;
                        }
                    }
                    alpha *= 0.5;
                }
                if !accepted {
                    // no descent along the projected direction at any trial
                    // step: treat the iterate as stationary
                    converged = true;
                    break;
                }
            }
        }
    }

    let Some((mb, sol)) = best else {
        return Err(Error::Infeasible);
    };
    let objective = sol.objective;
    Ok(DispatchResult {
        flows: FlowSchedule::from_master(idx, n, &mb),
        solution: sol,
        objective,
        iterations: logs,
        converged,
        cuts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::NodeKind;
    use crate::testutil::*;
    use approx::assert_relative_eq;

    /// Deterministic xorshift for reproducible random configurations.
    struct Rng(u64);

    impl Rng {
        fn next_f64(&mut self) -> f64 {
            self.0 ^= self.0 << 13;
            self.0 ^= self.0 >> 7;
            self.0 ^= self.0 << 17;
            (self.0 >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
        }
    }

    #[test]
    fn projector_idempotent_symmetric_annihilating() {
        let mut rng = Rng(0x9e3779b97f4a7c15);
        for case in 0..100 {
            let dim = 3 + case % 8;
            let k = 1 + case % dim;
            let normals: Vec<Vec<f64>> = (0..k)
                .map(|_| (0..dim).map(|_| rng.next_f64() * 5.0).collect())
                .collect();
            let p = projection_matrix(&normals, dim);
            let pp = &p * &p;
            assert!((&pp - &p).amax() < 1e-10, "case {case}: not idempotent");
            assert!((&p - &p.transpose()).amax() < 1e-10, "case {case}: not symmetric");
            for nvec in &normals {
                let h = DVector::from_column_slice(nvec);
                assert!((&p * h).amax() < 1e-10 * (1.0 + norm(nvec)), "case {case}");
            }
        }
    }

    #[test]
    fn projector_with_duplicate_normals() {
        let n1 = vec![1.0, 0.0, 0.0];
        let p = projection_matrix(&[n1.clone(), n1.clone(), n1], 3);
        // rank-1 removal only
        assert_relative_eq!(p.trace(), 2.0, epsilon = 1e-12);
    }

    #[test]
    fn step_size_signs() {
        assert_relative_eq!(step_size(0.3, 100.0, 50.0, false), 0.6);
        assert_relative_eq!(step_size(0.3, 100.0, 50.0, true), -0.6);
    }

    #[test]
    fn sigma_bookkeeping() {
        assert_relative_eq!(sigma(100.0, 99.0, 100.0), 0.01);
        assert_relative_eq!(sigma(99.0, 99.0, 100.0), 0.0);
        // normalization uses the first feasible objective
        assert_relative_eq!(sigma(10.0, 9.0, 1000.0), 1e-3);
    }

    #[test]
    fn feasible_set_projection_respects_bounds() {
        let n = 3;
        let (inst, idx) = two_node_thermal(n);
        let feas = FeasibleSet::build(&inst, &idx);
        let target = vec![1e5; feas.dim];
        let m = feas.project(&target, &[]).unwrap();
        for i in 0..feas.dim {
            assert!(m[i] <= feas.upper[i] + 1e-6);
            assert!(m[i] >= feas.lower[i] - 1e-6);
        }
        assert!(feas.contains(&m, &[]));
    }

    #[test]
    fn active_normals_on_box_face() {
        let n = 2;
        let (inst, idx) = two_node_thermal(n);
        let feas = FeasibleSet::build(&inst, &idx);
        let m = feas.upper.clone();
        let normals = feas.active_normals(&m, &[]);
        // every coordinate at its upper bound; return-pipe rows also bind on
        // the mirrored network
        assert!(normals.len() >= feas.dim);
    }

    #[test]
    fn converges_on_two_node_instance() {
        let n = 3;
        let (inst, idx) = two_node_thermal(n);
        let res = optimal_dispatch(&inst, &idx, &MasterOptions::default()).unwrap();
        assert!(res.converged);
        assert!(res.objective.is_finite());
        // every logged feasible objective is at least the returned optimum
        for log in &res.iterations {
            if let Some(j) = log.objective {
                assert!(j >= res.objective - 1e-6 * (1.0 + res.objective.abs()));
            }
        }
    }

    #[test]
    fn improves_on_midpoint_flow() {
        let n = 4;
        let (inst, idx) = three_node_instance(n);
        let prog = crate::subproblem::build_subproblem(
            &inst,
            &idx,
            crate::thermal::CoefficientForm::Consistent,
        )
        .unwrap();
        let mid = FlowSchedule::from_master(&idx, n, &crate::thermal::midpoint_flows(&inst, &idx));
        let SubOutcome::Optimal(at_mid) = prog.solve(&inst, &idx, &mid).unwrap() else {
            panic!("midpoint should be feasible");
        };
        let res = optimal_dispatch(&inst, &idx, &MasterOptions::default()).unwrap();
        assert!(res.objective <= at_mid.objective + 1e-7 * (1.0 + at_mid.objective.abs()));
    }

    #[test]
    fn recovers_from_infeasible_midpoint_via_cuts() {
        // demand needs more flow than the midpoint provides; the cut pushes
        // the schedule toward higher flow
        let n = 2;
        let (mut inst, idx) = two_node_thermal(n);
        for node in &mut inst.heat_network.nodes {
            if node.kind == NodeKind::Load {
                node.demand = 12.0.into();
            }
        }
        // several cut rounds are needed before a feasible flow appears
        let opts = MasterOptions { infeasible_stop: 10, ..MasterOptions::default() };
        let res = optimal_dispatch(&inst, &idx, &opts).unwrap();
        assert!(res
            .iterations
            .iter()
            .any(|l| l.status == IterStatus::Infeasible));
        assert!(res
            .iterations
            .iter()
            .any(|l| l.status == IterStatus::Optimal));
        assert!(!res.cuts.is_empty());
        // the final schedule satisfies every retained cut
        assert!(feasible_under_cuts(&res));
    }

    fn feasible_under_cuts(res: &DispatchResult) -> bool {
        res.cuts
            .iter()
            .all(|c| c.value(&res.flows.supply) <= 1e-6 * (1.0 + c.rhs.abs()))
    }

    #[test]
    fn stops_after_consecutive_infeasible() {
        // demand no flow schedule can serve: every iteration is infeasible
        let n = 2;
        let (mut inst, idx) = two_node_thermal(n);
        for node in &mut inst.heat_network.nodes {
            if node.kind == NodeKind::Load {
                node.demand = 24.0.into();
            }
        }
        let err = optimal_dispatch(&inst, &idx, &MasterOptions::default());
        assert!(err.is_err());
    }

    #[test]
    fn electric_only_short_circuit() {
        let n = 2;
        let (mut inst, _) = two_node_thermal(n);
        inst.heat_network.nodes.clear();
        inst.heat_network.supply_pipes.clear();
        inst.heat_network.return_pipes.clear();
        inst.sources[0].heat_node = None;
        let idx = inst.index().unwrap();
        let res = optimal_dispatch(&inst, &idx, &MasterOptions::default()).unwrap();
        assert!(res.converged);
        assert_eq!(res.iterations.len(), 1);
    }
}

