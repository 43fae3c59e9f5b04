//! The dispatch program at fixed mass flow: a convex QP over generation,
//! line flows, and temperatures.
//!
//! Every constraint row is stored once with its flow-dependent coefficients
//! kept symbolic (one bilinear term per pipe flow entering the row), so the
//! same structure serves materialization at any flow schedule, the envelope
//! gradient, and cut generation from the relaxed copy.

use crate::error::{Error, Result};
use crate::model::{
    DispatchInstance, FlowSchedule, NetworkIndex, NodeKind, Side,
};
use crate::qp::{QpProblem, QpStatus, SparseRow};
use crate::thermal::{initial_profiles, pipe_coefficients, CoefficientForm};

/// Variable layout of the sub-problem. Within each block the index is
/// `element * periods + t`.
#[derive(Debug, Clone)]
pub struct VarMap {
    pub periods: usize,
    pub n_sources: usize,
    pub n_lines: usize,
    pub n_nodes: usize,
    off_p: usize,
    off_h: usize,
    off_l: usize,
    off_exs: usize,
    off_exr: usize,
    off_ns: usize,
    off_nr: usize,
    tau_s_off: Vec<usize>,
    tau_r_off: Vec<usize>,
    pub seg_s: Vec<usize>,
    pub seg_r: Vec<usize>,
    pub n_vars: usize,
}

impl VarMap {
    pub fn new(idx: &NetworkIndex, n_sources: usize, n_lines: usize, periods: usize) -> VarMap {
        let n = periods;
        let nn = idx.n_nodes();
        let mut cursor = 0;
        let mut take = |size: usize| {
            let o = cursor;
            cursor += size;
            o
        };
        let off_p = take(n_sources * n);
        let off_h = take(n_sources * n);
        let off_l = take(n_lines * n);
        let off_exs = take(nn * n);
        let off_exr = take(nn * n);
        let off_ns = take(nn * n);
        let off_nr = take(nn * n);
        let mut tau_s_off = Vec::with_capacity(idx.supply.segments.len());
        for &s in &idx.supply.segments {
            tau_s_off.push(take((s + 1) * n));
        }
        let mut tau_r_off = Vec::with_capacity(idx.return_.segments.len());
        for &s in &idx.return_.segments {
            tau_r_off.push(take((s + 1) * n));
        }
        VarMap {
            periods,
            n_sources,
            n_lines,
            n_nodes: nn,
            off_p,
            off_h,
            off_l,
            off_exs,
            off_exr,
            off_ns,
            off_nr,
            tau_s_off,
            tau_r_off,
            seg_s: idx.supply.segments.clone(),
            seg_r: idx.return_.segments.clone(),
            n_vars: cursor,
        }
    }

    pub fn p(&self, i: usize, t: usize) -> usize {
        self.off_p + i * self.periods + t
    }

    pub fn h(&self, i: usize, t: usize) -> usize {
        self.off_h + i * self.periods + t
    }

    pub fn line(&self, l: usize, t: usize) -> usize {
        self.off_l + l * self.periods + t
    }

    /// Exchanger supply temperature (injection at sources, node-tied at loads).
    pub fn exch_s(&self, k: usize, t: usize) -> usize {
        self.off_exs + k * self.periods + t
    }

    pub fn exch_r(&self, k: usize, t: usize) -> usize {
        self.off_exr + k * self.periods + t
    }

    pub fn node_s(&self, k: usize, t: usize) -> usize {
        self.off_ns + k * self.periods + t
    }

    pub fn node_r(&self, k: usize, t: usize) -> usize {
        self.off_nr + k * self.periods + t
    }

    /// Pipe segment temperature; i = 0 is the inlet.
    pub fn tau(&self, side: Side, pipe: usize, i: usize, t: usize) -> usize {
        let (off, seg) = match side {
            Side::Supply => (self.tau_s_off[pipe], self.seg_s[pipe]),
            Side::Return => (self.tau_r_off[pipe], self.seg_r[pipe]),
        };
        debug_assert!(i <= seg);
        off + i * self.periods + t
    }
}

/// Equality families in row order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EqFamily {
    MixSupply,
    MixReturn,
    HeatPower,
    PipeSupply,
    PipeReturn,
    InletSupply,
    InletReturn,
    ExchTie,
    Balance,
    LineFlow,
    Pin,
}

impl EqFamily {
    pub fn label(&self) -> &'static str {
        match self {
            EqFamily::MixSupply => "supply mixing",
            EqFamily::MixReturn => "return mixing",
            EqFamily::HeatPower => "exchanger heat power",
            EqFamily::PipeSupply => "supply pipe dynamics",
            EqFamily::PipeReturn => "return pipe dynamics",
            EqFamily::InletSupply => "supply inlet coupling",
            EqFamily::InletReturn => "return inlet coupling",
            EqFamily::ExchTie => "exchanger temperature tie",
            EqFamily::Balance => "electric balance",
            EqFamily::LineFlow => "line flow definition",
            EqFamily::Pin => "attachment pin",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum IneqFamily {
    LineLimit,
    HeatAdequacy,
    Polytope,
    RampElectric,
    RampHeat,
    TempBound,
}

impl IneqFamily {
    pub fn label(&self) -> &'static str {
        match self {
            IneqFamily::LineLimit => "line limit",
            IneqFamily::HeatAdequacy => "heat adequacy",
            IneqFamily::Polytope => "source polytope",
            IneqFamily::RampElectric => "electric ramp",
            IneqFamily::RampHeat => "heat ramp",
            IneqFamily::TempBound => "temperature bound",
        }
    }
}

/// One flow-proportional contribution to a row: the pipe flow m(side, pipe, t)
/// multiplies (coeffs' x - rhs).
#[derive(Debug, Clone)]
pub struct BilinTerm {
    pub side: Side,
    pub pipe: usize,
    pub period: usize,
    pub coeffs: Vec<(usize, f64)>,
    pub rhs: f64,
}

impl BilinTerm {
    pub fn inner(&self, x: &[f64]) -> f64 {
        self.coeffs.iter().map(|&(i, c)| c * x[i]).sum::<f64>() - self.rhs
    }
}

/// An equality row lin + sum_m m * bilin = 0, stored as a'x = b.
#[derive(Debug, Clone)]
pub struct EqRow {
    pub family: EqFamily,
    pub lin: SparseRow,
    pub bilin: Vec<BilinTerm>,
}

impl EqRow {
    pub fn materialize(&self, flows: &FlowSchedule) -> SparseRow {
        let mut coeffs = self.lin.coeffs.clone();
        let mut rhs = self.lin.rhs;
        for term in &self.bilin {
            let m = flows.at(term.side, term.pipe, term.period);
            for &(i, c) in &term.coeffs {
                coeffs.push((i, m * c));
            }
            rhs += m * term.rhs;
        }
        coeffs.sort_by_key(|e| e.0);
        coeffs.dedup_by(|b, a| {
            if a.0 == b.0 {
                a.1 += b.1;
                true
            } else {
                false
            }
        });
        coeffs.retain(|e| e.1 != 0.0);
        SparseRow { coeffs, rhs }
    }

    pub fn residual(&self, x: &[f64], flows: &FlowSchedule) -> f64 {
        self.materialize(flows).residual(x)
    }
}

#[derive(Debug, Clone)]
pub struct IneqRow {
    pub family: IneqFamily,
    pub row: SparseRow,
}

/// The sub-problem structure at symbolic mass flow.
#[derive(Debug, Clone)]
pub struct DispatchProgram {
    pub vars: VarMap,
    pub form: CoefficientForm,
    /// Flow-coupled equalities (their duals drive the envelope gradient).
    pub h1: Vec<EqRow>,
    /// Flow-independent equalities.
    pub h2: Vec<EqRow>,
    /// Convex inequalities on the subsystem variables.
    pub g1: Vec<IneqRow>,
    pub p_triplets: Vec<(usize, usize, f64)>,
    pub q: Vec<f64>,
    pub constant: f64,
}

/// Tolerance for flow-schedule admissibility checks.
const FLOW_TOL: f64 = 1e-7;

/// Reject schedules outside the flow-side feasible region: pipe bounds on
/// both sides and nonnegative exchanger flows.
pub fn check_flows(
    inst: &DispatchInstance,
    idx: &NetworkIndex,
    flows: &FlowSchedule,
) -> Result<()> {
    let n = inst.horizon.periods;
    for (pipes, side, label) in [
        (&inst.heat_network.supply_pipes, Side::Supply, "supply"),
        (&inst.heat_network.return_pipes, Side::Return, "return"),
    ] {
        for (j, pipe) in pipes.iter().enumerate() {
            for t in 0..n {
                let m = flows.at(side, j, t);
                let (lo, hi) = (pipe.flow_min.at(t), pipe.flow_max.at(t));
                let tol = FLOW_TOL * (1.0 + lo.abs().max(hi.abs()));
                if m < lo - tol || m > hi + tol {
                    return Err(Error::Instance(format!(
                        "{label} pipe {} flow {m} outside [{lo}, {hi}] at period {t}",
                        pipe.id
                    )));
                }
            }
        }
    }
    for (k, node) in inst.heat_network.nodes.iter().enumerate() {
        for t in 0..n {
            let w = flows.exchanger_flow(idx, k, t);
            if w < -FLOW_TOL * (1.0 + w.abs()) {
                return Err(Error::Instance(format!(
                    "node {} draws negative exchanger flow {w} at period {t}",
                    node.id
                )));
            }
        }
    }
    Ok(())
}

/// From-node of a pipe (the node it leaves).
fn from_node(idx_side: &crate::model::SideIndex, pipe: usize) -> usize {
    for k in 0..idx_side.incidence.nrows() {
        if idx_side.incidence[(k, pipe)] == -1.0 {
            return k;
        }
    }
    unreachable!("pipe {pipe} has no from-node");
}

pub fn build_subproblem(
    inst: &DispatchInstance,
    idx: &NetworkIndex,
    form: CoefficientForm,
) -> Result<DispatchProgram> {
    let n = inst.horizon.periods;
    let nn = idx.n_nodes();
    let cp_w = inst.physics.cp_power();
    let vars = VarMap::new(idx, inst.sources.len(), inst.electric_network.lines.len(), n);
    let (init_s, init_r) = initial_profiles(inst, idx)?;

    let mut h1: Vec<EqRow> = Vec::new();
    let mut h2: Vec<EqRow> = Vec::new();
    let mut g1: Vec<IneqRow> = Vec::new();

    // supply mixing: sum_in m_j (T^S_k - tau_out_j) + [source] w (T^S_k - Texch_S) = 0
    for t in 0..n {
        for k in 0..nn {
            let node = &inst.heat_network.nodes[k];
            let mut bilin = Vec::new();
            for &j in &idx.supply.incoming[k] {
                bilin.push(BilinTerm {
                    side: Side::Supply,
                    pipe: j,
                    period: t,
                    coeffs: vec![
                        (vars.node_s(k, t), 1.0),
                        (vars.tau(Side::Supply, j, vars.seg_s[j], t), -1.0),
                    ],
                    rhs: 0.0,
                });
            }
            if node.kind == NodeKind::Source {
                for &(j, c) in &idx.exchanger_flow[k] {
                    bilin.push(BilinTerm {
                        side: Side::Supply,
                        pipe: j,
                        period: t,
                        coeffs: vec![(vars.node_s(k, t), c), (vars.exch_s(k, t), -c)],
                        rhs: 0.0,
                    });
                }
            }
            h1.push(EqRow {
                family: EqFamily::MixSupply,
                lin: SparseRow::default(),
                bilin,
            });
        }
    }

    // return mixing: injection happens at load nodes
    for t in 0..n {
        for k in 0..nn {
            let node = &inst.heat_network.nodes[k];
            let mut bilin = Vec::new();
            for &j in &idx.return_.incoming[k] {
                bilin.push(BilinTerm {
                    side: Side::Return,
                    pipe: j,
                    period: t,
                    coeffs: vec![
                        (vars.node_r(k, t), 1.0),
                        (vars.tau(Side::Return, j, vars.seg_r[j], t), -1.0),
                    ],
                    rhs: 0.0,
                });
            }
            if node.kind == NodeKind::Load {
                for &(j, c) in &idx.exchanger_flow[k] {
                    bilin.push(BilinTerm {
                        side: Side::Supply,
                        pipe: j,
                        period: t,
                        coeffs: vec![(vars.node_r(k, t), c), (vars.exch_r(k, t), -c)],
                        rhs: 0.0,
                    });
                }
            }
            h1.push(EqRow {
                family: EqFamily::MixReturn,
                lin: SparseRow::default(),
                bilin,
            });
        }
    }

    // exchanger heat power: cp w (Texch_S - Texch_R) - sum_i h_i = demand
    for t in 0..n {
        for k in 0..nn {
            let node = &inst.heat_network.nodes[k];
            let demand = node.demand.at(t);
            if demand > 0.0 && idx.exchanger_flow[k].is_empty() {
                return Err(Error::Instance(format!(
                    "load node {} has demand but no adjacent supply pipe",
                    node.id
                )));
            }
            let mut bilin = Vec::new();
            for &(j, c) in &idx.exchanger_flow[k] {
                bilin.push(BilinTerm {
                    side: Side::Supply,
                    pipe: j,
                    period: t,
                    coeffs: vec![
                        (vars.exch_s(k, t), cp_w * c),
                        (vars.exch_r(k, t), -cp_w * c),
                    ],
                    rhs: 0.0,
                });
            }
            let coeffs = idx.sources_at_node[k]
                .iter()
                .map(|&i| (vars.h(i, t), -1.0))
                .collect();
            h1.push(EqRow {
                family: EqFamily::HeatPower,
                lin: SparseRow { coeffs, rhs: demand },
                bilin,
            });
        }
    }

    // pipe dynamics, both sides
    for (side, pipes, side_idx, family, init) in [
        (
            Side::Supply,
            &inst.heat_network.supply_pipes,
            &idx.supply,
            EqFamily::PipeSupply,
            &init_s,
        ),
        (
            Side::Return,
            &inst.heat_network.return_pipes,
            &idx.return_,
            EqFamily::PipeReturn,
            &init_r,
        ),
    ] {
        for t in 0..n {
            for (j, pipe) in pipes.iter().enumerate() {
                let co = pipe_coefficients(pipe, &inst.physics, inst.horizon.dt, side_idx.dx[j], n)?;
                for i in 1..=side_idx.segments[j] {
                    let cur = vars.tau(side, j, i, t);
                    let up = vars.tau(side, j, i - 1, t);
                    let mut lin = Vec::new();
                    let mut rhs = co.d[t];
                    if t > 0 {
                        lin.push((vars.tau(side, j, i, t - 1), -co.c));
                    } else {
                        rhs += co.c * init[j][i];
                    }
                    let bilin_coeffs = match form {
                        CoefficientForm::Consistent => {
                            lin.push((cur, co.a));
                            vec![(cur, co.b), (up, -co.b)]
                        }
                        CoefficientForm::PaperLiteral => {
                            lin.push((cur, co.b));
                            vec![(cur, co.a), (up, -co.b)]
                        }
                    };
                    h1.push(EqRow {
                        family,
                        lin: SparseRow { coeffs: lin, rhs },
                        bilin: vec![BilinTerm {
                            side,
                            pipe: j,
                            period: t,
                            coeffs: bilin_coeffs,
                            rhs: 0.0,
                        }],
                    });
                }
            }
        }
    }

    // inlet coupling: tau(0, t) equals the from-node temperature
    for (side, side_idx, family) in [
        (Side::Supply, &idx.supply, EqFamily::InletSupply),
        (Side::Return, &idx.return_, EqFamily::InletReturn),
    ] {
        for t in 0..n {
            for j in 0..side_idx.segments.len() {
                let k = from_node(side_idx, j);
                let node_var = match side {
                    Side::Supply => vars.node_s(k, t),
                    Side::Return => vars.node_r(k, t),
                };
                h2.push(EqRow {
                    family,
                    lin: SparseRow {
                        coeffs: vec![(vars.tau(side, j, 0, t), 1.0), (node_var, -1.0)],
                        rhs: 0.0,
                    },
                    bilin: Vec::new(),
                });
            }
        }
    }

    // the extraction-side exchanger temperature equals the node temperature
    for t in 0..n {
        for (k, node) in inst.heat_network.nodes.iter().enumerate() {
            let (ex, nd) = match node.kind {
                NodeKind::Load => (vars.exch_s(k, t), vars.node_s(k, t)),
                NodeKind::Source => (vars.exch_r(k, t), vars.node_r(k, t)),
            };
            h2.push(EqRow {
                family: EqFamily::ExchTie,
                lin: SparseRow {
                    coeffs: vec![(ex, 1.0), (nd, -1.0)],
                    rhs: 0.0,
                },
                bilin: Vec::new(),
            });
        }
    }

    // electric balance, written demand - generation = 0 so the dual is the
    // positive marginal price
    for t in 0..n {
        let mut coeffs = Vec::new();
        let mut total = 0.0;
        for (i, src) in inst.sources.iter().enumerate() {
            if src.bus.is_some() {
                coeffs.push((vars.p(i, t), -1.0));
            }
        }
        for bus in &inst.electric_network.buses {
            total += bus.demand.at(t);
        }
        h2.push(EqRow {
            family: EqFamily::Balance,
            lin: SparseRow { coeffs, rhs: -total },
            bilin: Vec::new(),
        });
    }

    // line flow definition from shift factors over net bus injections
    for t in 0..n {
        for l in 0..inst.electric_network.lines.len() {
            let mut coeffs = vec![(vars.line(l, t), 1.0)];
            let mut rhs = 0.0;
            for (b, bus) in inst.electric_network.buses.iter().enumerate() {
                let sf = idx.shift_factors[(l, b)];
                if sf == 0.0 {
                    continue;
                }
                for &i in &idx.sources_at_bus[b] {
                    coeffs.push((vars.p(i, t), -sf));
                }
                rhs -= sf * bus.demand.at(t);
            }
            h2.push(EqRow {
                family: EqFamily::LineFlow,
                lin: SparseRow { coeffs, rhs },
                bilin: Vec::new(),
            });
        }
    }

    // pin unattached quantities to zero
    for t in 0..n {
        for (i, src) in inst.sources.iter().enumerate() {
            if src.bus.is_none() {
                h2.push(EqRow {
                    family: EqFamily::Pin,
                    lin: SparseRow { coeffs: vec![(vars.p(i, t), 1.0)], rhs: 0.0 },
                    bilin: Vec::new(),
                });
            }
            if src.heat_node.is_none() {
                h2.push(EqRow {
                    family: EqFamily::Pin,
                    lin: SparseRow { coeffs: vec![(vars.h(i, t), 1.0)], rhs: 0.0 },
                    bilin: Vec::new(),
                });
            }
        }
    }

    // line limits, both directions
    for t in 0..n {
        for (l, line) in inst.electric_network.lines.iter().enumerate() {
            let lim = line.limit.at(t);
            for sgn in [1.0, -1.0] {
                g1.push(IneqRow {
                    family: IneqFamily::LineLimit,
                    row: SparseRow { coeffs: vec![(vars.line(l, t), sgn)], rhs: lim },
                });
            }
        }
    }

    // aggregate heat adequacy: total production covers total demand
    {
        let mut coeffs = Vec::new();
        for (i, src) in inst.sources.iter().enumerate() {
            if src.heat_node.is_some() {
                for t in 0..n {
                    coeffs.push((vars.h(i, t), -1.0));
                }
            }
        }
        let total: f64 = inst
            .heat_network
            .nodes
            .iter()
            .map(|nd| (0..n).map(|t| nd.demand.at(t)).sum::<f64>())
            .sum();
        if !coeffs.is_empty() || total > 0.0 {
            g1.push(IneqRow {
                family: IneqFamily::HeatAdequacy,
                row: SparseRow { coeffs, rhs: -total },
            });
        }
    }

    // source feasible regions
    for t in 0..n {
        for (i, src) in inst.sources.iter().enumerate() {
            for row in &src.polytope {
                let mut coeffs = Vec::new();
                if row.b != 0.0 {
                    coeffs.push((vars.p(i, t), row.b));
                }
                if row.k != 0.0 {
                    coeffs.push((vars.h(i, t), row.k));
                }
                g1.push(IneqRow {
                    family: IneqFamily::Polytope,
                    row: SparseRow { coeffs, rhs: row.v.at(t) },
                });
            }
        }
    }

    // ramping between consecutive periods
    for (family, pick) in [
        (IneqFamily::RampElectric, 0usize),
        (IneqFamily::RampHeat, 1usize),
    ] {
        for t in 1..n {
            for (i, src) in inst.sources.iter().enumerate() {
                let ramp = if pick == 0 { src.ramp_electric } else { src.ramp_heat };
                let Some(r) = ramp else { continue };
                let var = |tt| if pick == 0 { vars.p(i, tt) } else { vars.h(i, tt) };
                g1.push(IneqRow {
                    family,
                    row: SparseRow {
                        coeffs: vec![(var(t), 1.0), (var(t - 1), -1.0)],
                        rhs: r.up * inst.horizon.dt,
                    },
                });
                g1.push(IneqRow {
                    family,
                    row: SparseRow {
                        coeffs: vec![(var(t), -1.0), (var(t - 1), 1.0)],
                        rhs: -r.down * inst.horizon.dt,
                    },
                });
            }
        }
    }

    // temperature boxes on node and exchanger temperatures
    for t in 0..n {
        for (k, node) in inst.heat_network.nodes.iter().enumerate() {
            let pairs = [
                (node.supply_temp_min, node.supply_temp_max, vars.node_s(k, t)),
                (node.supply_temp_min, node.supply_temp_max, vars.exch_s(k, t)),
                (node.return_temp_min, node.return_temp_max, vars.node_r(k, t)),
                (node.return_temp_min, node.return_temp_max, vars.exch_r(k, t)),
            ];
            for (lo, hi, v) in pairs {
                if let Some(hi) = hi {
                    g1.push(IneqRow {
                        family: IneqFamily::TempBound,
                        row: SparseRow { coeffs: vec![(v, 1.0)], rhs: hi },
                    });
                }
                if let Some(lo) = lo {
                    g1.push(IneqRow {
                        family: IneqFamily::TempBound,
                        row: SparseRow { coeffs: vec![(v, -1.0)], rhs: -lo },
                    });
                }
            }
        }
    }

    // quadratic generation cost
    let mut p_triplets = Vec::new();
    let mut q = vec![0.0; vars.n_vars];
    let mut constant = 0.0;
    for t in 0..n {
        for (i, src) in inst.sources.iter().enumerate() {
            let e = src.cost.at(t);
            let (vp, vh) = (vars.p(i, t), vars.h(i, t));
            constant += e[0];
            q[vp] += e[1];
            q[vh] += e[3];
            if e[2] != 0.0 {
                p_triplets.push((vp, vp, 2.0 * e[2]));
            }
            if e[4] != 0.0 {
                p_triplets.push((vh, vh, 2.0 * e[4]));
            }
            if e[5] != 0.0 {
                debug_assert!(vp < vh);
                p_triplets.push((vp, vh, e[5]));
            }
        }
    }

    Ok(DispatchProgram {
        vars,
        form,
        h1,
        h2,
        g1,
        p_triplets,
        q,
        constant,
    })
}

/// Primal solution with accessors over the variable layout.
#[derive(Debug, Clone)]
pub struct SystemState {
    pub vars: VarMap,
    pub x: Vec<f64>,
}

impl SystemState {
    pub fn p(&self, i: usize, t: usize) -> f64 {
        self.x[self.vars.p(i, t)]
    }

    pub fn h(&self, i: usize, t: usize) -> f64 {
        self.x[self.vars.h(i, t)]
    }

    pub fn line(&self, l: usize, t: usize) -> f64 {
        self.x[self.vars.line(l, t)]
    }

    pub fn node_supply(&self, k: usize, t: usize) -> f64 {
        self.x[self.vars.node_s(k, t)]
    }

    pub fn node_return(&self, k: usize, t: usize) -> f64 {
        self.x[self.vars.node_r(k, t)]
    }

    pub fn exch_supply(&self, k: usize, t: usize) -> f64 {
        self.x[self.vars.exch_s(k, t)]
    }

    pub fn exch_return(&self, k: usize, t: usize) -> f64 {
        self.x[self.vars.exch_r(k, t)]
    }

    pub fn tau(&self, side: Side, pipe: usize, i: usize, t: usize) -> f64 {
        self.x[self.vars.tau(side, pipe, i, t)]
    }
}

#[derive(Debug, Clone)]
pub struct SubproblemSolution {
    pub objective: f64,
    pub state: SystemState,
    pub h1_duals: Vec<f64>,
    pub h2_duals: Vec<f64>,
    pub g1_duals: Vec<f64>,
    /// Envelope gradient dJ*/dm in master coordinates (supply flows).
    pub gradient: Vec<f64>,
}

#[derive(Debug)]
pub enum SubOutcome {
    Optimal(SubproblemSolution),
    Infeasible,
}

#[derive(Debug, Clone)]
pub struct RelaxedSolution {
    /// Total constraint violation (sum of slacks); zero means feasible.
    pub objective: f64,
    pub x: Vec<f64>,
    pub slacks: Vec<f64>,
    pub h1_duals: Vec<f64>,
    pub g1_duals: Vec<f64>,
}

/// An outer-approximation cut normal' m <= rhs over master coordinates.
#[derive(Debug, Clone)]
pub struct Cut {
    pub normal: Vec<f64>,
    pub rhs: f64,
}

impl Cut {
    /// Positive when the cut is violated at m.
    pub fn value(&self, m: &[f64]) -> f64 {
        self.normal.iter().zip(m).map(|(a, b)| a * b).sum::<f64>() - self.rhs
    }
}

impl DispatchProgram {
    pub fn materialize(&self, flows: &FlowSchedule) -> QpProblem {
        let mut qp = QpProblem::new(self.vars.n_vars);
        qp.p_triplets = self.p_triplets.clone();
        qp.q = self.q.clone();
        qp.constant = self.constant;
        for row in self.h1.iter().chain(self.h2.iter()) {
            qp.eq.push(row.materialize(flows));
        }
        for row in &self.g1 {
            qp.ineq.push(row.row.clone());
        }
        qp
    }

    /// Solve at a fixed, admissible flow schedule.
    pub fn solve(
        &self,
        inst: &DispatchInstance,
        idx: &NetworkIndex,
        flows: &FlowSchedule,
    ) -> Result<SubOutcome> {
        check_flows(inst, idx, flows)?;
        let qp = self.materialize(flows);
        let sol = qp.solve()?;
        match sol.status {
            QpStatus::Infeasible => Ok(SubOutcome::Infeasible),
            QpStatus::Unbounded => Err(Error::Solver(
                "sub-problem unbounded; add generation or temperature bounds".into(),
            )),
            QpStatus::Optimal => {
                let h1_duals = sol.eq_duals[..self.h1.len()].to_vec();
                let h2_duals = sol.eq_duals[self.h1.len()..].to_vec();
                let gradient = self.envelope_gradient(idx, &sol.x, &h1_duals, flows);
                Ok(SubOutcome::Optimal(SubproblemSolution {
                    objective: sol.objective,
                    state: SystemState {
                        vars: self.vars.clone(),
                        x: sol.x,
                    },
                    h1_duals,
                    h2_duals,
                    g1_duals: sol.ineq_duals,
                    gradient,
                }))
            }
        }
    }

    /// Accumulate lambda' dh1/dm over the bilinear terms and fold return-side
    /// sensitivities through the return-flow map into master coordinates.
    pub fn envelope_gradient(
        &self,
        idx: &NetworkIndex,
        x: &[f64],
        h1_duals: &[f64],
        _flows: &FlowSchedule,
    ) -> Vec<f64> {
        let n = self.vars.periods;
        let n_sp = idx.n_supply_pipes();
        let n_rp = idx.n_return_pipes();
        let mut grad_s = vec![0.0; n_sp * n];
        let mut grad_r = vec![0.0; n_rp * n];
        for (row, &lam) in self.h1.iter().zip(h1_duals) {
            if lam == 0.0 {
                continue;
            }
            for term in &row.bilin {
                let v = lam * term.inner(x);
                match term.side {
                    Side::Supply => grad_s[term.pipe * n + term.period] += v,
                    Side::Return => grad_r[term.pipe * n + term.period] += v,
                }
            }
        }
        let mut out = grad_s;
        for js in 0..n_sp {
            for jr in 0..n_rp {
                let g = idx.return_flow_map[(jr, js)];
                if g == 0.0 {
                    continue;
                }
                for t in 0..n {
                    out[js * n + t] += g * grad_r[jr * n + t];
                }
            }
        }
        out
    }

    /// Feasibility-relaxed copy: slacks on every g1 row, minimize their sum.
    pub fn solve_relaxed(&self, flows: &FlowSchedule) -> Result<RelaxedSolution> {
        let n = self.vars.n_vars;
        let ng = self.g1.len();
        let mut qp = QpProblem::new(n + ng);
        for row in self.h1.iter().chain(self.h2.iter()) {
            qp.eq.push(row.materialize(flows));
        }
        for (i, row) in self.g1.iter().enumerate() {
            let mut r = row.row.clone();
            r.coeffs.push((n + i, -1.0));
            qp.ineq.push(r);
        }
        for i in 0..ng {
            qp.ineq.push(SparseRow {
                coeffs: vec![(n + i, -1.0)],
                rhs: 0.0,
            });
        }
        for i in 0..ng {
            qp.q[n + i] = 1.0;
        }
        let sol = qp.solve()?;
        if sol.status != QpStatus::Optimal {
            return Err(Error::Solver(format!(
                "relaxed sub-problem did not solve: {:?}",
                sol.status
            )));
        }
        Ok(RelaxedSolution {
            objective: sol.objective,
            x: sol.x[..n].to_vec(),
            slacks: sol.x[n..].to_vec(),
            h1_duals: sol.eq_duals[..self.h1.len()].to_vec(),
            g1_duals: sol.ineq_duals[..ng].to_vec(),
        })
    }

    /// Outer-approximation cut from a relaxed solution with positive
    /// violation. Its value at the generating flows equals the relaxed
    /// optimum.
    pub fn generate_cut(
        &self,
        idx: &NetworkIndex,
        relaxed: &RelaxedSolution,
        flows: &FlowSchedule,
    ) -> Result<Cut> {
        if relaxed.objective <= 1e-9 {
            return Err(Error::NothingToCut);
        }
        let normal = self.envelope_gradient(idx, &relaxed.x, &relaxed.h1_duals, flows);
        let viol: f64 = self
            .g1
            .iter()
            .zip(&relaxed.g1_duals)
            .map(|(row, &mu)| mu * row.row.residual(&relaxed.x))
            .sum();
        let n = self.vars.periods;
        let m_master = &flows.supply;
        let at_mk: f64 = normal
            .iter()
            .zip(m_master)
            .map(|(a, b)| a * b)
            .sum::<f64>();
        debug_assert_eq!(normal.len(), idx.n_supply_pipes() * n);
        Ok(Cut {
            normal,
            rhs: at_mk - viol,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::*;
    use crate::testutil::*;
    use crate::thermal::{midpoint_flows, CoefficientForm};
    use approx::assert_relative_eq;

    fn electric_only_instance(costs: &[(f64, f64)], demand: f64) -> DispatchInstance {
        // costs: (marginal price, capacity)
        DispatchInstance {
            horizon: Horizon { periods: 1, dt: 3600.0, dx: 100.0 },
            physics: Physics { rho: 1000.0, cp: 4182.0 },
            heat_network: HeatNetwork {
                nodes: vec![],
                supply_pipes: vec![],
                return_pipes: vec![],
            },
            electric_network: ElectricNetwork {
                buses: vec![Bus { id: "b1".into(), demand: demand.into() }],
                lines: vec![],
                slack_bus: None,
            },
            sources: costs
                .iter()
                .enumerate()
                .map(|(i, &(price, cap))| EnergySource {
                    id: format!("g{i}"),
                    bus: Some("b1".into()),
                    heat_node: None,
                    polytope: electric_only_polytope(0.0, cap),
                    ramp_electric: None,
                    ramp_heat: None,
                    cost: quadratic_cost([0.0, price, 0.0, 0.0, 0.0, 0.0]),
                    renewable: false,
                })
                .collect(),
            initial_temperatures: InitialTemperatures::Uniform(70.0),
        }
    }

    fn solve_at_midpoint(
        inst: &DispatchInstance,
        idx: &NetworkIndex,
    ) -> (DispatchProgram, FlowSchedule, SubproblemSolution) {
        let prog = build_subproblem(inst, idx, CoefficientForm::Consistent).unwrap();
        let flows =
            FlowSchedule::from_master(idx, inst.horizon.periods, &midpoint_flows(inst, idx));
        match prog.solve(inst, idx, &flows).unwrap() {
            SubOutcome::Optimal(sol) => (prog, flows, sol),
            SubOutcome::Infeasible => panic!("expected a feasible sub-problem"),
        }
    }

    #[test]
    fn single_generator_price_dual() {
        let inst = electric_only_instance(&[(10.0, 20.0)], 5.0);
        let idx = inst.index().unwrap();
        let prog = build_subproblem(&inst, &idx, CoefficientForm::Consistent).unwrap();
        let flows = FlowSchedule::from_master(&idx, 1, &[]);
        let SubOutcome::Optimal(sol) = prog.solve(&inst, &idx, &flows).unwrap() else {
            panic!("feasible instance reported infeasible");
        };
        assert_relative_eq!(sol.state.p(0, 0), 5.0, max_relative = 1e-7);
        assert_relative_eq!(sol.objective, 50.0, max_relative = 1e-7);
        // balance dual is the marginal price
        let bal = prog
            .h2
            .iter()
            .position(|r| r.family == EqFamily::Balance)
            .unwrap();
        assert_relative_eq!(sol.h2_duals[bal], 10.0, max_relative = 1e-6);
    }

    #[test]
    fn merit_order_dispatch() {
        let inst = electric_only_instance(&[(10.0, 3.0), (50.0, 10.0)], 5.0);
        let idx = inst.index().unwrap();
        let prog = build_subproblem(&inst, &idx, CoefficientForm::Consistent).unwrap();
        let flows = FlowSchedule::from_master(&idx, 1, &[]);
        let SubOutcome::Optimal(sol) = prog.solve(&inst, &idx, &flows).unwrap() else {
            panic!("feasible instance reported infeasible");
        };
        assert_relative_eq!(sol.state.p(0, 0), 3.0, max_relative = 1e-6);
        assert_relative_eq!(sol.state.p(1, 0), 2.0, max_relative = 1e-6);
        assert_relative_eq!(sol.objective, 130.0, max_relative = 1e-7);
    }

    #[test]
    fn row_counts_match_structure() {
        let periods = 3;
        let (inst, idx) = two_node_thermal(periods);
        let prog = build_subproblem(&inst, &idx, CoefficientForm::Consistent).unwrap();
        let nn = idx.n_nodes();
        let segs: usize = idx.supply.segments.iter().sum::<usize>()
            + idx.return_.segments.iter().sum::<usize>();
        assert_eq!(prog.h1.len(), periods * (3 * nn + segs));
        let pipes = idx.n_supply_pipes() + idx.n_return_pipes();
        // inlets + exchanger ties + balance + pins (no lines, one bus source)
        assert_eq!(prog.h2.len(), periods * (pipes + nn + 1));
    }

    #[test]
    fn unattached_quantities_are_pinned() {
        let n = 2;
        let (inst, idx) = y_instance(n, false);
        let (_, _, sol) = solve_at_midpoint(&inst, &idx);
        // boiler has no bus: p == 0
        let boiler = inst.sources.iter().position(|s| s.bus.is_none()).unwrap();
        for t in 0..n {
            assert!(sol.state.p(boiler, t).abs() < 1e-7);
        }
    }

    #[test]
    fn thermal_rows_match_simulator() {
        let n = 4;
        let (inst, idx) = two_node_thermal(n);
        let (_, flows, sol) = solve_at_midpoint(&inst, &idx);
        // feed the optimizer's boundary temperatures to the simulator and
        // compare network temperatures
        let nn = idx.n_nodes();
        let mut boundary = crate::thermal::BoundaryTemps {
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
        let sim = crate::thermal::simulate_network(
            &inst,
            &idx,
            &flows,
            &boundary,
            CoefficientForm::Consistent,
        )
        .unwrap();
        for k in 0..nn {
            for t in 0..n {
                assert_relative_eq!(
                    sim.node_supply_at(k, t),
                    sol.state.node_supply(k, t),
                    epsilon = 1e-6
                );
                assert_relative_eq!(
                    sim.node_return_at(k, t),
                    sol.state.node_return(k, t),
                    epsilon = 1e-6
                );
            }
        }
    }

    #[test]
    fn heat_power_closes_demand() {
        let n = 3;
        let (inst, idx) = two_node_thermal(n);
        let (_, flows, sol) = solve_at_midpoint(&inst, &idx);
        let load = inst
            .heat_network
            .nodes
            .iter()
            .position(|nd| nd.kind == NodeKind::Load)
            .unwrap();
        let cp_w = inst.physics.cp_power();
        for t in 0..n {
            let w = flows.exchanger_flow(&idx, load, t);
            let q = cp_w * w * (sol.state.exch_supply(load, t) - sol.state.exch_return(load, t));
            assert_relative_eq!(q, inst.heat_network.nodes[load].demand.at(t), epsilon = 1e-7);
        }
    }

    #[test]
    fn envelope_gradient_matches_finite_differences() {
        let n = 2;
        let (inst, idx) = three_node_instance(n);
        let prog = build_subproblem(&inst, &idx, CoefficientForm::Consistent).unwrap();
        let m0 = midpoint_flows(&inst, &idx);
        let flows = FlowSchedule::from_master(&idx, n, &m0);
        let SubOutcome::Optimal(sol) = prog.solve(&inst, &idx, &flows).unwrap() else {
            panic!("midpoint flows should be feasible");
        };
        let objective_at = |m: &[f64]| -> f64 {
            let f = FlowSchedule::from_master(&idx, n, m);
            match prog.solve(&inst, &idx, &f).unwrap() {
                SubOutcome::Optimal(s) => s.objective,
                SubOutcome::Infeasible => panic!("perturbed point infeasible"),
            }
        };
        let mut fd = vec![0.0; m0.len()];
        for i in 0..m0.len() {
            let step = 1e-4 * (1.0 + m0[i].abs());
            let mut hi = m0.clone();
            hi[i] += step;
            let mut lo = m0.clone();
            lo[i] -= step;
            fd[i] = (objective_at(&hi) - objective_at(&lo)) / (2.0 * step);
        }
        let norm: f64 = fd.iter().map(|v| v * v).sum::<f64>().sqrt();
        let diff: f64 = fd
            .iter()
            .zip(&sol.gradient)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        assert!(
            diff <= 1e-3 * (1.0 + norm),
            "gradient {:?} vs finite differences {:?}",
            sol.gradient,
            fd
        );
    }

    #[test]
    fn cut_value_equals_relaxed_optimum() {
        let n = 2;
        let (mut inst, idx) = two_node_thermal(n);
        // demand far beyond the source capacity makes the heat side infeasible
        for node in &mut inst.heat_network.nodes {
            if node.kind == NodeKind::Load {
                node.demand = 60.0.into();
            }
        }
        let prog = build_subproblem(&inst, &idx, CoefficientForm::Consistent).unwrap();
        let m0 = midpoint_flows(&inst, &idx);
        let flows = FlowSchedule::from_master(&idx, n, &m0);
        match prog.solve(&inst, &idx, &flows).unwrap() {
            SubOutcome::Infeasible => {}
            SubOutcome::Optimal(_) => panic!("overloaded instance should be infeasible"),
        }
        let relaxed = prog.solve_relaxed(&flows).unwrap();
        assert!(relaxed.objective > 1e-6);
        let cut = prog.generate_cut(&idx, &relaxed, &flows).unwrap();
        assert_relative_eq!(cut.value(&m0), relaxed.objective, epsilon = 1e-6);
    }

    #[test]
    fn relaxed_matches_feasible_optimum_sign() {
        // on a feasible instance the relaxed optimum is (numerically) zero
        let n = 2;
        let (inst, idx) = two_node_thermal(n);
        let prog = build_subproblem(&inst, &idx, CoefficientForm::Consistent).unwrap();
        let flows = FlowSchedule::from_master(&idx, n, &midpoint_flows(&inst, &idx));
        let relaxed = prog.solve_relaxed(&flows).unwrap();
        assert!(relaxed.objective.abs() < 1e-6, "{}", relaxed.objective);
        assert!(matches!(
            prog.generate_cut(&idx, &relaxed, &flows),
            Err(Error::NothingToCut)
        ));
    }

    #[test]
    fn rejects_out_of_bounds_flows() {
        let n = 2;
        let (inst, idx) = two_node_thermal(n);
        let prog = build_subproblem(&inst, &idx, CoefficientForm::Consistent).unwrap();
        let mut m = midpoint_flows(&inst, &idx);
        m[0] = 1e6;
        let flows = FlowSchedule::from_master(&idx, n, &m);
        assert!(prog.solve(&inst, &idx, &flows).is_err());
    }
}
