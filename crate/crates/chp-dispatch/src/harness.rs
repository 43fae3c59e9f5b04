//! Baseline dispatch modes (fixed-flow, separate heat-then-electric), the
//! three-way comparison, curtailment accounting, and the independent
//! verification of returned solutions.

use std::time::Instant;

use crate::error::{Error, Result};
use crate::master::{
    optimal_dispatch_with, FeasibleSet, IterationLog, IterStatus, MasterOptions,
};
use crate::model::{DispatchInstance, EnergySource, FlowSchedule, NetworkIndex, NodeKind, Side};
use crate::qp::{QpProblem, QpStatus, SparseRow};
use crate::subproblem::{
    build_subproblem, check_flows, DispatchProgram, SubOutcome, SubproblemSolution,
};
use crate::thermal::{midpoint_flows, simulate_network, BoundaryTemps};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Variable,
    Fixed,
    Separate,
}

impl Mode {
    pub fn label(&self) -> &'static str {
        match self {
            Mode::Variable => "variable",
            Mode::Fixed => "fixed",
            Mode::Separate => "separate",
        }
    }
}

/// Result of one dispatch mode. The network solution is absent for the
/// separate baseline, which ignores the heating network by construction.
#[derive(Debug)]
pub struct ModeReport {
    pub mode: Mode,
    /// Total cost, $.
    pub objective: f64,
    pub flows: Option<FlowSchedule>,
    pub solution: Option<SubproblemSolution>,
    /// Generation schedules, layout `source * periods + t`, MW.
    pub p: Vec<f64>,
    pub h: Vec<f64>,
    /// Curtailed renewable energy over the horizon, MWh, and as a
    /// percentage of available renewable energy.
    pub curtailed_mwh: f64,
    pub curtailed_pct: f64,
    pub wallclock_s: f64,
    pub iterations: Vec<IterationLog>,
    pub converged: bool,
}

/// Maximum electric output of a source at fixed heat output: the largest p
/// with (p, h) inside the polytope.
pub fn availability(src: &EnergySource, t: usize, h: f64) -> f64 {
    let mut bound = f64::INFINITY;
    for row in &src.polytope {
        if row.b > 1e-12 {
            bound = bound.min((row.v.at(t) - row.k * h) / row.b);
        }
    }
    bound.max(0.0)
}

fn curtailment(inst: &DispatchInstance, p: &[f64], h: &[f64]) -> (f64, f64) {
    let n = inst.horizon.periods;
    let hours = inst.horizon.dt / 3600.0;
    let mut curtailed = 0.0;
    let mut available = 0.0;
    for (i, src) in inst.sources.iter().enumerate() {
        if !src.renewable {
            continue;
        }
        for t in 0..n {
            let avail = availability(src, t, h[i * n + t]);
            if !avail.is_finite() {
                continue;
            }
            available += avail * hours;
            curtailed += (avail - p[i * n + t]).max(0.0) * hours;
        }
    }
    let pct = if available > 0.0 {
        100.0 * curtailed / available
    } else {
        0.0
    };
    (curtailed, pct)
}

fn schedules(inst: &DispatchInstance, sol: &SubproblemSolution) -> (Vec<f64>, Vec<f64>) {
    let n = inst.horizon.periods;
    let ns = inst.sources.len();
    let mut p = vec![0.0; ns * n];
    let mut h = vec![0.0; ns * n];
    for i in 0..ns {
        for t in 0..n {
            p[i * n + t] = sol.state.p(i, t);
            h[i * n + t] = sol.state.h(i, t);
        }
    }
    (p, h)
}

pub fn variable_dispatch(
    inst: &DispatchInstance,
    idx: &NetworkIndex,
    prog: &DispatchProgram,
    opts: &MasterOptions,
) -> Result<ModeReport> {
    let t0 = Instant::now();
    let res = optimal_dispatch_with(inst, idx, prog, opts)?;
    let (p, h) = schedules(inst, &res.solution);
    let (curtailed_mwh, curtailed_pct) = curtailment(inst, &p, &h);
    Ok(ModeReport {
        mode: Mode::Variable,
        objective: res.objective,
        flows: Some(res.flows),
        solution: Some(res.solution),
        p,
        h,
        curtailed_mwh,
        curtailed_pct,
        wallclock_s: t0.elapsed().as_secs_f64(),
        iterations: res.iterations,
        converged: res.converged,
    })
}

/// One sub-problem solve at a fixed flow schedule; the default policy is the
/// midpoint of the flow bounds, projected into the flow-side feasible set.
pub fn fixed_flow_dispatch(
    inst: &DispatchInstance,
    idx: &NetworkIndex,
    prog: &DispatchProgram,
    master_flows: Option<&[f64]>,
) -> Result<ModeReport> {
    let t0 = Instant::now();
    let n = inst.horizon.periods;
    let m = match master_flows {
        Some(m) => m.to_vec(),
        None => {
            let feas = FeasibleSet::build(inst, idx);
            feas.project(&midpoint_flows(inst, idx), &[])?
        }
    };
    let flows = FlowSchedule::from_master(idx, n, &m);
    let sol = match prog.solve(inst, idx, &flows)? {
        SubOutcome::Optimal(sol) => sol,
        SubOutcome::Infeasible => {
            // diagnose with the relaxed copy before reporting
            let relaxed = prog.solve_relaxed(&flows)?;
            return Err(Error::Instance(format!(
                "fixed flow schedule infeasible; total constraint violation {:.6e}",
                relaxed.objective
            )));
        }
    };
    let (p, h) = schedules(inst, &sol);
    let (curtailed_mwh, curtailed_pct) = curtailment(inst, &p, &h);
    let log = IterationLog {
        k: 1,
        status: IterStatus::Optimal,
        objective: Some(sol.objective),
        sigma: None,
        step: None,
        n_cuts: 0,
        grad_norm: Some(0.0),
        wallclock_ms: t0.elapsed().as_secs_f64() * 1e3,
    };
    Ok(ModeReport {
        mode: Mode::Fixed,
        objective: sol.objective,
        flows: Some(flows),
        solution: Some(sol),
        p,
        h,
        curtailed_mwh,
        curtailed_pct,
        wallclock_s: t0.elapsed().as_secs_f64(),
        iterations: vec![log],
        converged: true,
    })
}

/// Heat-led two-stage baseline: stage 1 dispatches heat against the load
/// curve per period ignoring the network; stage 2 dispatches electricity
/// with the stage-1 heat outputs held fixed.
pub fn separate_dispatch(inst: &DispatchInstance, idx: &NetworkIndex) -> Result<ModeReport> {
    let t0 = Instant::now();
    let n = inst.horizon.periods;
    let ns = inst.sources.len();
    let pv = |i: usize, t: usize| i * n + t; // p block
    let hv = |i: usize, t: usize| ns * n + i * n + t; // h block

    // stage 1: heat cost only, per-period aggregate balance
    let mut h_fixed = vec![0.0; ns * n];
    let total_heat: f64 = inst
        .heat_network
        .nodes
        .iter()
        .map(|nd| (0..n).map(|t| nd.demand.at(t)).sum::<f64>())
        .sum();
    if total_heat > 0.0 || inst.sources.iter().any(|s| s.heat_node.is_some()) {
        let mut qp = QpProblem::new(2 * ns * n);
        for t in 0..n {
            let mut coeffs = Vec::new();
            for (i, src) in inst.sources.iter().enumerate() {
                if src.heat_node.is_some() {
                    coeffs.push((hv(i, t), 1.0));
                }
            }
            let demand: f64 = inst
                .heat_network
                .nodes
                .iter()
                .map(|nd| nd.demand.at(t))
                .sum();
            qp.eq.push(SparseRow { coeffs, rhs: demand });
        }
        for t in 0..n {
            for (i, src) in inst.sources.iter().enumerate() {
                for row in &src.polytope {
                    let mut coeffs = Vec::new();
                    if row.b != 0.0 {
                        coeffs.push((pv(i, t), row.b));
                    }
                    if row.k != 0.0 {
                        coeffs.push((hv(i, t), row.k));
                    }
                    qp.ineq.push(SparseRow { coeffs, rhs: row.v.at(t) });
                }
                if src.heat_node.is_none() {
                    qp.eq.push(SparseRow { coeffs: vec![(hv(i, t), 1.0)], rhs: 0.0 });
                }
                if src.bus.is_none() {
                    qp.eq.push(SparseRow { coeffs: vec![(pv(i, t), 1.0)], rhs: 0.0 });
                }
            }
        }
        for t in 1..n {
            for (i, src) in inst.sources.iter().enumerate() {
                let Some(r) = src.ramp_heat else { continue };
                qp.ineq.push(SparseRow {
                    coeffs: vec![(hv(i, t), 1.0), (hv(i, t - 1), -1.0)],
                    rhs: r.up * inst.horizon.dt,
                });
                qp.ineq.push(SparseRow {
                    coeffs: vec![(hv(i, t), -1.0), (hv(i, t - 1), 1.0)],
                    rhs: -r.down * inst.horizon.dt,
                });
            }
        }
        for t in 0..n {
            for (i, src) in inst.sources.iter().enumerate() {
                let e = src.cost.at(t);
                qp.q[hv(i, t)] += e[3];
                if e[4] != 0.0 {
                    qp.p_triplets.push((hv(i, t), hv(i, t), 2.0 * e[4]));
                }
            }
        }
        let sol = qp.solve()?;
        if sol.status != QpStatus::Optimal {
            return Err(Error::Instance(
                "separate dispatch stage 1 (heat balance) infeasible".into(),
            ));
        }
        for i in 0..ns {
            for t in 0..n {
                h_fixed[i * n + t] = sol.x[hv(i, t)];
            }
        }
    }

    // stage 2: electric dispatch at fixed heat outputs
    let nl = inst.electric_network.lines.len();
    let lv = |l: usize, t: usize| ns * n + l * n + t;
    let mut qp = QpProblem::new(ns * n + nl * n);
    for t in 0..n {
        let mut coeffs = Vec::new();
        let mut total = 0.0;
        for (i, src) in inst.sources.iter().enumerate() {
            if src.bus.is_some() {
                coeffs.push((pv(i, t), -1.0));
            }
        }
        for bus in &inst.electric_network.buses {
            total += bus.demand.at(t);
        }
        qp.eq.push(SparseRow { coeffs, rhs: -total });
        for l in 0..nl {
            let mut coeffs = vec![(lv(l, t), 1.0)];
            let mut rhs = 0.0;
            for (b, bus) in inst.electric_network.buses.iter().enumerate() {
                let sf = idx.shift_factors[(l, b)];
                if sf == 0.0 {
                    continue;
                }
                for &i in &idx.sources_at_bus[b] {
                    coeffs.push((pv(i, t), -sf));
                }
                rhs -= sf * bus.demand.at(t);
            }
            qp.eq.push(SparseRow { coeffs, rhs });
            let lim = inst.electric_network.lines[l].limit.at(t);
            for sgn in [1.0, -1.0] {
                qp.ineq.push(SparseRow { coeffs: vec![(lv(l, t), sgn)], rhs: lim });
            }
        }
        for (i, src) in inst.sources.iter().enumerate() {
            let hval = h_fixed[i * n + t];
            for row in &src.polytope {
                if row.b == 0.0 {
                    continue;
                }
                qp.ineq.push(SparseRow {
                    coeffs: vec![(pv(i, t), row.b)],
                    rhs: row.v.at(t) - row.k * hval,
                });
            }
            if src.bus.is_none() {
                qp.eq.push(SparseRow { coeffs: vec![(pv(i, t), 1.0)], rhs: 0.0 });
            }
        }
    }
    for t in 1..n {
        for (i, src) in inst.sources.iter().enumerate() {
            let Some(r) = src.ramp_electric else { continue };
            qp.ineq.push(SparseRow {
                coeffs: vec![(pv(i, t), 1.0), (pv(i, t - 1), -1.0)],
                rhs: r.up * inst.horizon.dt,
            });
            qp.ineq.push(SparseRow {
                coeffs: vec![(pv(i, t), -1.0), (pv(i, t - 1), 1.0)],
                rhs: -r.down * inst.horizon.dt,
            });
        }
    }
    for t in 0..n {
        for (i, src) in inst.sources.iter().enumerate() {
            let e = src.cost.at(t);
            let hval = h_fixed[i * n + t];
            qp.constant += e[0] + e[3] * hval + e[4] * hval * hval;
            qp.q[pv(i, t)] += e[1] + e[5] * hval;
            if e[2] != 0.0 {
                qp.p_triplets.push((pv(i, t), pv(i, t), 2.0 * e[2]));
            }
        }
    }
    let sol = qp.solve()?;
    if sol.status != QpStatus::Optimal {
        return Err(Error::Instance(
            "separate dispatch stage 2 (electric balance) infeasible".into(),
        ));
    }
    let mut p = vec![0.0; ns * n];
    for i in 0..ns {
        for t in 0..n {
            p[i * n + t] = sol.x[pv(i, t)];
        }
    }
    let (curtailed_mwh, curtailed_pct) = curtailment(inst, &p, &h_fixed);
    Ok(ModeReport {
        mode: Mode::Separate,
        objective: sol.objective,
        flows: None,
        solution: None,
        p,
        h: h_fixed,
        curtailed_mwh,
        curtailed_pct,
        wallclock_s: t0.elapsed().as_secs_f64(),
        iterations: Vec::new(),
        converged: true,
    })
}

#[derive(Debug)]
pub struct ComparisonReport {
    pub variable: ModeReport,
    pub fixed: ModeReport,
    pub separate: ModeReport,
    /// Cost increase of the fixed-flow baseline over variable flow, percent.
    pub fixed_gap_pct: f64,
    /// Cost increase of the separate baseline over fixed flow, percent.
    pub separate_gap_pct: f64,
    /// variable <= fixed <= separate within 1e-6 relative.
    pub ordering_ok: bool,
}

pub fn compare_modes(
    inst: &DispatchInstance,
    idx: &NetworkIndex,
    opts: &MasterOptions,
) -> Result<ComparisonReport> {
    let prog = build_subproblem(inst, idx, opts.form)?;
    let variable = variable_dispatch(inst, idx, &prog, opts)?;
    let fixed = fixed_flow_dispatch(inst, idx, &prog, None)?;
    let separate = separate_dispatch(inst, idx)?;
    let rel = |a: f64, b: f64| (b - a) / a.abs().max(1e-12);
    let tol = 1e-6;
    let ordering_ok = rel(variable.objective, fixed.objective) >= -tol
        && rel(fixed.objective, separate.objective) >= -tol;
    Ok(ComparisonReport {
        fixed_gap_pct: 100.0 * rel(variable.objective, fixed.objective),
        separate_gap_pct: 100.0 * rel(fixed.objective, separate.objective),
        ordering_ok,
        variable,
        fixed,
        separate,
    })
}

/// Independent re-check of a network solution: every constraint family
/// re-evaluated by direct arithmetic, plus a forward-simulation cross-check
/// of the temperature block.
#[derive(Debug)]
pub struct VerificationReport {
    /// Max |residual| per equality family, natural units.
    pub equalities: Vec<(&'static str, f64)>,
    /// Max positive residual per inequality family.
    pub inequalities: Vec<(&'static str, f64)>,
    /// Max temperature gap against the forward simulator, degC.
    pub simulator_gap: f64,
    /// Heat generation minus heat load per period, MW (pipeline storage
    /// proxy).
    pub storage_proxy: Vec<f64>,
    pub max_violation: f64,
}

pub fn verify_solution(
    inst: &DispatchInstance,
    idx: &NetworkIndex,
    prog: &DispatchProgram,
    flows: &FlowSchedule,
    sol: &SubproblemSolution,
) -> Result<VerificationReport> {
    let n = inst.horizon.periods;
    let x = &sol.state.x;

    let mut equalities: Vec<(&'static str, f64)> = Vec::new();
    for row in prog.h1.iter().chain(prog.h2.iter()) {
        let v = row.residual(x, flows).abs();
        match equalities.iter_mut().find(|(l, _)| *l == row.family.label()) {
            Some(e) => e.1 = e.1.max(v),
            None => equalities.push((row.family.label(), v)),
        }
    }
    let mut inequalities: Vec<(&'static str, f64)> = Vec::new();
    for row in &prog.g1 {
        let v = row.row.residual(x).max(0.0);
        match inequalities
            .iter_mut()
            .find(|(l, _)| *l == row.family.label())
        {
            Some(e) => e.1 = e.1.max(v),
            None => inequalities.push((row.family.label(), v)),
        }
    }
    // flow-side admissibility as one more inequality entry
    let flow_violation = match check_flows(inst, idx, flows) {
        Ok(()) => 0.0,
        Err(_) => f64::INFINITY,
    };
    inequalities.push(("flow bounds", flow_violation));

    // simulator cross-check driven by the solution's boundary temperatures
    let nn = idx.n_nodes();
    let mut boundary = BoundaryTemps {
        source_supply: vec![None; nn],
        return_injection: vec![None; nn],
    };
    for (k, node) in inst.heat_network.nodes.iter().enumerate() {
        let series: Vec<f64> = (0..n)
            .map(|t| match node.kind {
                NodeKind::Source => sol.state.exch_supply(k, t),
                NodeKind::Load => sol.state.exch_return(k, t),
            })
            .collect();
        match node.kind {
            NodeKind::Source => boundary.source_supply[k] = Some(series),
            NodeKind::Load => boundary.return_injection[k] = Some(series),
        }
    }
    let mut simulator_gap = 0.0f64;
    if nn > 0 {
        let sim = simulate_network(inst, idx, flows, &boundary, prog.form)?;
        for k in 0..nn {
            for t in 0..n {
                simulator_gap = simulator_gap
                    .max((sim.node_supply_at(k, t) - sol.state.node_supply(k, t)).abs())
                    .max((sim.node_return_at(k, t) - sol.state.node_return(k, t)).abs());
            }
        }
        for (side, fields) in [(Side::Supply, &sim.supply_fields), (Side::Return, &sim.return_fields)]
        {
            for (j, field) in fields.iter().enumerate() {
                for i in 0..=field.segments {
                    for t in 0..n {
                        simulator_gap = simulator_gap
                            .max((field.get(i, t) - sol.state.tau(side, j, i, t)).abs());
                    }
                }
            }
        }
    }

    let mut storage_proxy = vec![0.0; n];
    for t in 0..n {
        let gen: f64 = (0..inst.sources.len()).map(|i| sol.state.h(i, t)).sum();
        let load: f64 = inst
            .heat_network
            .nodes
            .iter()
            .map(|nd| nd.demand.at(t))
            .sum();
        storage_proxy[t] = gen - load;
    }

    let max_violation = equalities
        .iter()
        .chain(inequalities.iter())
        .map(|&(_, v)| v)
        .fold(simulator_gap, f64::max);

    Ok(VerificationReport {
        equalities,
        inequalities,
        simulator_gap,
        storage_proxy,
        max_violation,
    })
}
