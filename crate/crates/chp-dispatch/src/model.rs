//! Static problem description: heating and electric network topology, energy
//! sources, loads, with validation and derived matrices.
//!
//! Internal unit conventions: power in MW, temperature in degrees C, mass flow
//! in kg/s, lengths in m, time in s. Instance files use watts; the conversion
//! happens in [`crate::io`].

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Conversion factor from watts (instance files) to the internal MW unit.
pub const POWER_SCALE: f64 = 1e-6;

/// A per-period quantity that may be given as a constant or a full series.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Profile {
    Constant(f64),
    Series(Vec<f64>),
}

impl Profile {
    pub fn at(&self, t: usize) -> f64 {
        match self {
            Profile::Constant(v) => *v,
            Profile::Series(s) => s[t],
        }
    }

    pub fn check_len(&self, n: usize) -> bool {
        match self {
            Profile::Constant(_) => true,
            Profile::Series(s) => s.len() == n,
        }
    }

    pub fn scaled(&self, factor: f64) -> Profile {
        match self {
            Profile::Constant(v) => Profile::Constant(v * factor),
            Profile::Series(s) => Profile::Series(s.iter().map(|v| v * factor).collect()),
        }
    }
}

impl From<f64> for Profile {
    fn from(v: f64) -> Self {
        Profile::Constant(v)
    }
}

#[derive(Debug, Clone)]
pub struct Horizon {
    /// Number of dispatch periods N.
    pub periods: usize,
    /// Period length Delta-t in seconds; also the thermal time step.
    pub dt: f64,
    /// Default pipe segment length Delta-x in meters.
    pub dx: f64,
}

#[derive(Debug, Clone)]
pub struct Physics {
    /// Water density rho, kg/m^3.
    pub rho: f64,
    /// Heat capacity of water c_p, J/(kg K).
    pub cp: f64,
}

impl Physics {
    /// c_p expressed in MW s/(kg K), for heat-power rows in internal units.
    pub fn cp_power(&self) -> f64 {
        self.cp * POWER_SCALE
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    Source,
    Load,
}

#[derive(Debug, Clone)]
pub struct HeatNode {
    pub id: String,
    pub kind: NodeKind,
    /// Heat demand per period, MW. Zero for source nodes.
    pub demand: Profile,
    /// Optional box bounds on the node supply temperature, degrees C.
    pub supply_temp_min: Option<f64>,
    pub supply_temp_max: Option<f64>,
    /// Optional box bounds on the node return temperature, degrees C.
    pub return_temp_min: Option<f64>,
    pub return_temp_max: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct HeatPipe {
    pub id: String,
    pub from: String,
    pub to: String,
    /// Length x_j, m.
    pub length: f64,
    /// Cross-sectional area A_j, m^2.
    pub area: f64,
    /// Thermal conductive coefficient R_j, m K/W.
    pub thermal_resistance: f64,
    /// Mass flow bounds per period, kg/s.
    pub flow_min: Profile,
    pub flow_max: Profile,
    /// Ambient temperature per period, degrees C.
    pub ambient: Profile,
    /// Per-pipe segment length override; falls back to the horizon default.
    pub dx: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct HeatNetwork {
    pub nodes: Vec<HeatNode>,
    pub supply_pipes: Vec<HeatPipe>,
    pub return_pipes: Vec<HeatPipe>,
}

#[derive(Debug, Clone)]
pub struct Bus {
    pub id: String,
    /// Electric demand per period, MW.
    pub demand: Profile,
}

#[derive(Debug, Clone)]
pub struct Line {
    pub id: String,
    pub from: String,
    pub to: String,
    /// Series reactance, p.u.; used to derive shift factors when no explicit
    /// row is given.
    pub reactance: Option<f64>,
    /// Flow limit per period, MW.
    pub limit: Profile,
    /// Explicit shift-factor row (one entry per bus, in bus order).
    pub shift_factors: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct ElectricNetwork {
    pub buses: Vec<Bus>,
    pub lines: Vec<Line>,
    /// Slack bus for shift-factor derivation; defaults to the first bus.
    pub slack_bus: Option<String>,
}

/// One boundary of a source feasible region: b*p + k*h <= v.
#[derive(Debug, Clone)]
pub struct PolytopeRow {
    pub b: f64,
    pub k: f64,
    /// Right-hand side per period, MW-scaled.
    pub v: Profile,
}

/// Ramping capacities in MW/s; `down <= up`, `down` is normally negative.
#[derive(Debug, Clone, Copy)]
pub struct Ramp {
    pub down: f64,
    pub up: f64,
}

/// Cost coefficients eta_0..eta_5 of Eq-style quadratic cost
/// C = eta0 + eta1 p + eta2 p^2 + eta3 h + eta4 h^2 + eta5 p h, in $/MW terms.
#[derive(Debug, Clone)]
pub struct CostCurve {
    pub eta: [Profile; 6],
}

impl CostCurve {
    pub fn at(&self, t: usize) -> [f64; 6] {
        [
            self.eta[0].at(t),
            self.eta[1].at(t),
            self.eta[2].at(t),
            self.eta[3].at(t),
            self.eta[4].at(t),
            self.eta[5].at(t),
        ]
    }

    pub fn evaluate(&self, t: usize, p: f64, h: f64) -> f64 {
        let e = self.at(t);
        e[0] + e[1] * p + e[2] * p * p + e[3] * h + e[4] * h * h + e[5] * p * h
    }
}

#[derive(Debug, Clone)]
pub struct EnergySource {
    pub id: String,
    /// Electric bus attachment; `None` for heat-only sources (p pinned to 0).
    pub bus: Option<String>,
    /// Heat node attachment; `None` for electric-only sources (h pinned to 0).
    pub heat_node: Option<String>,
    pub polytope: Vec<PolytopeRow>,
    pub ramp_electric: Option<Ramp>,
    pub ramp_heat: Option<Ramp>,
    pub cost: CostCurve,
    /// Marks renewable sources for curtailment accounting.
    pub renewable: bool,
}

/// Initial pipe temperature profiles tau_j(i, 0).
#[derive(Debug, Clone)]
pub enum InitialTemperatures {
    /// Every segment of every pipe starts at the given temperature.
    Uniform(f64),
    /// Fill the steady-state profile for the given first-period boundary
    /// temperatures at the midpoint-flow policy.
    SteadyState {
        /// Supply injection temperature at source nodes, degrees C.
        source_supply: BTreeMap<String, f64>,
        /// Return injection temperature at load nodes, degrees C.
        return_injection: BTreeMap<String, f64>,
    },
    /// Explicit per-pipe profiles, S_j + 1 entries each.
    PerPipe {
        supply: BTreeMap<String, Vec<f64>>,
        return_: BTreeMap<String, Vec<f64>>,
    },
}

#[derive(Debug, Clone)]
pub struct DispatchInstance {
    pub horizon: Horizon,
    pub physics: Physics,
    pub heat_network: HeatNetwork,
    pub electric_network: ElectricNetwork,
    pub sources: Vec<EnergySource>,
    pub initial_temperatures: InitialTemperatures,
}

/// Which heating-network side a pipe belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Supply,
    Return,
}

/// Number of segments for a pipe: ceil(x_j / dx), at least one.
pub fn segment_count(length: f64, dx: f64) -> usize {
    ((length / dx).ceil() as usize).max(1)
}

/// Node mass flow A*m_t for one period (hydraulic Kirchhoff law).
pub fn node_mass_flow(incidence: &DMatrix<f64>, pipe_flows: &[f64]) -> Result<Vec<f64>> {
    if incidence.ncols() != pipe_flows.len() {
        return Err(Error::Dimension(format!(
            "incidence has {} pipes, flow vector has {}",
            incidence.ncols(),
            pipe_flows.len()
        )));
    }
    let m = DVector::from_column_slice(pipe_flows);
    Ok((incidence * m).iter().copied().collect())
}

/// Topology and derived matrices for one network side.
#[derive(Debug, Clone)]
pub struct SideIndex {
    /// Incidence A: +1 if the pipe enters the node, -1 if it leaves.
    pub incidence: DMatrix<f64>,
    /// Pipe indices entering each node (set I(k)).
    pub incoming: Vec<Vec<usize>>,
    /// Pipe indices leaving each node (set L(k)).
    pub outgoing: Vec<Vec<usize>>,
    /// Node visit order for forward sweeps (upstream before downstream).
    pub node_order: Vec<usize>,
    /// Segment count per pipe.
    pub segments: Vec<usize>,
    /// Segment length actually used per pipe.
    pub dx: Vec<f64>,
}

impl SideIndex {
    fn build(
        nodes: &[HeatNode],
        pipes: &[HeatPipe],
        node_pos: &BTreeMap<String, usize>,
        default_dx: f64,
        label: &str,
        errors: &mut Vec<String>,
    ) -> SideIndex {
        let n = nodes.len();
        let np = pipes.len();
        let mut incidence = DMatrix::zeros(n, np);
        let mut incoming = vec![Vec::new(); n];
        let mut outgoing = vec![Vec::new(); n];
        for (j, pipe) in pipes.iter().enumerate() {
            match (node_pos.get(&pipe.from), node_pos.get(&pipe.to)) {
                (Some(&f), Some(&t)) => {
                    if f == t {
                        errors.push(format!("{label} pipe {} is a self-loop", pipe.id));
                        continue;
                    }
                    incidence[(f, j)] = -1.0;
                    incidence[(t, j)] = 1.0;
                    outgoing[f].push(j);
                    incoming[t].push(j);
                }
                _ => errors.push(format!(
                    "{label} pipe {} references unknown node ({} -> {})",
                    pipe.id, pipe.from, pipe.to
                )),
            }
        }

        // Kahn order over directed pipes; a radial network with consistent
        // directions sorts completely.
        let mut indeg: Vec<usize> = incoming.iter().map(Vec::len).collect();
        let mut ready: Vec<usize> = (0..n).filter(|&k| indeg[k] == 0).collect();
        let mut node_order = Vec::with_capacity(n);
        while let Some(k) = ready.iter().copied().min() {
            ready.retain(|&x| x != k);
            node_order.push(k);
            for &j in &outgoing[k] {
                if let Some(&t) = node_pos.get(&pipes[j].to) {
                    indeg[t] -= 1;
                    if indeg[t] == 0 {
                        ready.push(t);
                    }
                }
            }
        }
        if node_order.len() != n {
            errors.push(format!("{label} network contains a directed cycle"));
        }

        // Radiality on the undirected graph: per connected component,
        // pipe count must equal node count minus one.
        let mut comp = vec![usize::MAX; n];
        let mut ncomp = 0;
        for start in 0..n {
            if comp[start] != usize::MAX {
                continue;
            }
            let mut stack = vec![start];
            comp[start] = ncomp;
            while let Some(k) = stack.pop() {
                for (j, pipe) in pipes.iter().enumerate() {
                    let _ = j;
                    let (Some(&f), Some(&t)) = (node_pos.get(&pipe.from), node_pos.get(&pipe.to))
                    else {
                        continue;
                    };
                    for (a, b) in [(f, t), (t, f)] {
                        if a == k && comp[b] == usize::MAX {
                            comp[b] = ncomp;
                            stack.push(b);
                        }
                    }
                }
            }
            ncomp += 1;
        }
        if np + ncomp != n {
            errors.push(format!(
                "{label} graph not radial: {np} pipes, {n} nodes, {ncomp} components"
            ));
        }

        let mut segments = Vec::with_capacity(np);
        let mut dx = Vec::with_capacity(np);
        for pipe in pipes {
            let d = pipe.dx.unwrap_or(default_dx);
            segments.push(segment_count(pipe.length, d));
            dx.push(d);
        }

        SideIndex {
            incidence,
            incoming,
            outgoing,
            node_order,
            segments,
            dx,
        }
    }
}

/// Derived per-instance indices: incidence matrices, the return-flow map,
/// shift factors, and source attachment lookups.
#[derive(Debug, Clone)]
pub struct NetworkIndex {
    pub node_pos: BTreeMap<String, usize>,
    pub bus_pos: BTreeMap<String, usize>,
    pub supply: SideIndex,
    pub return_: SideIndex,
    /// G with m_return = G * m_supply per period, from hydraulic consistency
    /// of exchanger flows on the two radial sides.
    pub return_flow_map: DMatrix<f64>,
    /// Exchanger mass flow per node as a linear form over supply pipe flows:
    /// w_k = sum_j coeff * m_supply_j. Positive for physical operation.
    pub exchanger_flow: Vec<Vec<(usize, f64)>>,
    /// Shift factor matrix, lines x buses; slack column is zero.
    pub shift_factors: DMatrix<f64>,
    /// Source indices attached to each heat node / electric bus.
    pub sources_at_node: Vec<Vec<usize>>,
    pub sources_at_bus: Vec<Vec<usize>>,
}

impl NetworkIndex {
    pub fn n_nodes(&self) -> usize {
        self.node_pos.len()
    }

    pub fn n_supply_pipes(&self) -> usize {
        self.supply.segments.len()
    }

    pub fn n_return_pipes(&self) -> usize {
        self.return_.segments.len()
    }
}

/// Derive the DC shift-factor matrix from line reactances.
///
/// Lines carrying an explicit `shift_factors` row keep it; all other lines
/// need endpoints and a positive reactance. The slack column is zero.
pub fn shift_factors(network: &ElectricNetwork) -> Result<DMatrix<f64>> {
    let nb = network.buses.len();
    let nl = network.lines.len();
    let bus_pos: BTreeMap<&str, usize> = network
        .buses
        .iter()
        .enumerate()
        .map(|(i, b)| (b.id.as_str(), i))
        .collect();
    let slack = match &network.slack_bus {
        Some(id) => *bus_pos
            .get(id.as_str())
            .ok_or_else(|| Error::Instance(format!("unknown slack bus {id}")))?,
        None => 0,
    };

    let mut sf = DMatrix::zeros(nl, nb);
    let need_derivation = network.lines.iter().any(|l| l.shift_factors.is_none());
    if need_derivation {
        // Reduced susceptance matrix over non-slack buses.
        let mut b_red = DMatrix::zeros(nb - 1, nb - 1);
        let red = |i: usize| if i < slack { Some(i) } else if i > slack { Some(i - 1) } else { None };
        let mut endpoints = Vec::with_capacity(nl);
        for line in &network.lines {
            let (Some(&f), Some(&t)) = (
                bus_pos.get(line.from.as_str()),
                bus_pos.get(line.to.as_str()),
            ) else {
                return Err(Error::Instance(format!(
                    "line {} references unknown bus",
                    line.id
                )));
            };
            let x = line
                .reactance
                .ok_or_else(|| Error::Instance(format!("line {} has no reactance", line.id)))?;
            if x <= 0.0 {
                return Err(Error::Instance(format!(
                    "line {} has nonpositive reactance",
                    line.id
                )));
            }
            let b = 1.0 / x;
            endpoints.push((f, t, b));
            if let Some(fr) = red(f) {
                b_red[(fr, fr)] += b;
            }
            if let Some(tr) = red(t) {
                b_red[(tr, tr)] += b;
            }
            if let (Some(fr), Some(tr)) = (red(f), red(t)) {
                b_red[(fr, tr)] -= b;
                b_red[(tr, fr)] -= b;
            }
        }
        let lu = b_red.lu();
        // Column i of the inverse gives angles for a unit injection at bus i
        // (withdrawal at slack).
        let mut theta = DMatrix::zeros(nb - 1, nb);
        for i in 0..nb {
            let Some(ir) = red(i) else { continue };
            let mut rhs = DVector::zeros(nb - 1);
            rhs[ir] = 1.0;
            let col = lu
                .solve(&rhs)
                .ok_or_else(|| Error::Instance("electric graph is disconnected".into()))?;
            theta.set_column(i, &col);
        }
        for (l, &(f, t, b)) in endpoints.iter().enumerate() {
            for i in 0..nb {
                let th_f = red(f).map_or(0.0, |fr| theta[(fr, i)]);
                let th_t = red(t).map_or(0.0, |tr| theta[(tr, i)]);
                sf[(l, i)] = b * (th_f - th_t);
            }
        }
    }
    for (l, line) in network.lines.iter().enumerate() {
        if let Some(row) = &line.shift_factors {
            if row.len() != nb {
                return Err(Error::Dimension(format!(
                    "line {} shift-factor row has {} entries for {} buses",
                    line.id,
                    row.len(),
                    nb
                )));
            }
            for (i, v) in row.iter().enumerate() {
                sf[(l, i)] = *v;
            }
        }
    }
    Ok(sf)
}

#[derive(Debug, Clone, Default)]
pub struct ValidationReport {
    pub violations: Vec<String>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }
}

impl DispatchInstance {
    /// Check every instance invariant; the report is empty iff well-formed.
    pub fn validate(&self) -> ValidationReport {
        let mut v = Vec::new();
        self.check(&mut v);
        let _ = self.build_index(&mut v);
        ValidationReport { violations: v }
    }

    /// Build the derived index, failing on any structural violation.
    pub fn index(&self) -> Result<NetworkIndex> {
        let mut v = Vec::new();
        self.check(&mut v);
        let idx = self.build_index(&mut v);
        if v.is_empty() {
            Ok(idx.expect("index builds when no violations are reported"))
        } else {
            Err(Error::Validation(v))
        }
    }

    fn check(&self, errors: &mut Vec<String>) {
        let n = self.horizon.periods;
        if n < 1 {
            errors.push("horizon must have at least one period".into());
        }
        if self.horizon.dt <= 0.0 {
            errors.push("dt must be positive".into());
        }
        if self.horizon.dx <= 0.0 {
            errors.push("dx must be positive".into());
        }
        if self.physics.rho <= 0.0 || self.physics.cp <= 0.0 {
            errors.push("rho and cp must be positive".into());
        }

        for node in &self.heat_network.nodes {
            if !node.demand.check_len(n) {
                errors.push(format!("node {}: demand series length != N", node.id));
            }
            for t in 0..n {
                if node.demand.at(t) < 0.0 {
                    errors.push(format!("node {}: negative heat demand at period {t}", node.id));
                    break;
                }
            }
            if node.kind == NodeKind::Source {
                if let Profile::Series(_) = node.demand {
                    // constant zero expected; only flag nonzero values
                }
                for t in 0..n {
                    if node.demand.at(t) != 0.0 {
                        errors.push(format!("source node {} carries heat demand", node.id));
                        break;
                    }
                }
            }
            for (lo, hi, what) in [
                (node.supply_temp_min, node.supply_temp_max, "supply"),
                (node.return_temp_min, node.return_temp_max, "return"),
            ] {
                if let (Some(a), Some(b)) = (lo, hi) {
                    if a > b {
                        errors.push(format!("node {}: {what} temperature bounds inverted", node.id));
                    }
                }
            }
        }

        for (pipes, label) in [
            (&self.heat_network.supply_pipes, "supply"),
            (&self.heat_network.return_pipes, "return"),
        ] {
            for pipe in pipes.iter() {
                if pipe.length <= 0.0 {
                    errors.push(format!("{label} pipe {}: nonpositive length", pipe.id));
                }
                if pipe.area <= 0.0 {
                    errors.push(format!("{label} pipe {}: nonpositive area", pipe.id));
                }
                if pipe.thermal_resistance <= 0.0 {
                    errors.push(format!(
                        "{label} pipe {}: nonpositive thermal coefficient",
                        pipe.id
                    ));
                }
                if let Some(d) = pipe.dx {
                    if d <= 0.0 {
                        errors.push(format!("{label} pipe {}: nonpositive dx override", pipe.id));
                    }
                }
                if !pipe.flow_min.check_len(n)
                    || !pipe.flow_max.check_len(n)
                    || !pipe.ambient.check_len(n)
                {
                    errors.push(format!("{label} pipe {}: series length != N", pipe.id));
                    continue;
                }
                for t in 0..n {
                    let (lo, hi) = (pipe.flow_min.at(t), pipe.flow_max.at(t));
                    if lo < 0.0 {
                        errors.push(format!(
                            "{label} pipe {}: negative flow lower bound at period {t}",
                            pipe.id
                        ));
                        break;
                    }
                    if lo > hi {
                        errors.push(format!(
                            "{label} pipe {}: flow bounds inverted at period {t}",
                            pipe.id
                        ));
                        break;
                    }
                }
            }
        }

        for bus in &self.electric_network.buses {
            if !bus.demand.check_len(n) {
                errors.push(format!("bus {}: demand series length != N", bus.id));
            }
        }
        for line in &self.electric_network.lines {
            if !line.limit.check_len(n) {
                errors.push(format!("line {}: limit series length != N", line.id));
            }
            for t in 0..n {
                if line.limit.at(t) <= 0.0 {
                    errors.push(format!("line {}: nonpositive limit at period {t}", line.id));
                    break;
                }
            }
        }

        let node_ids: BTreeMap<&str, &HeatNode> = self
            .heat_network
            .nodes
            .iter()
            .map(|nd| (nd.id.as_str(), nd))
            .collect();
        let bus_ids: Vec<&str> = self
            .electric_network
            .buses
            .iter()
            .map(|b| b.id.as_str())
            .collect();
        for src in &self.sources {
            if src.bus.is_none() && src.heat_node.is_none() {
                errors.push(format!("source {}: no attachment", src.id));
            }
            if let Some(bus) = &src.bus {
                if !bus_ids.contains(&bus.as_str()) {
                    errors.push(format!("source {}: unknown bus {bus}", src.id));
                }
            }
            if let Some(hn) = &src.heat_node {
                match node_ids.get(hn.as_str()) {
                    None => errors.push(format!("source {}: unknown heat node {hn}", src.id)),
                    Some(node) if node.kind != NodeKind::Source => errors.push(format!(
                        "source {}: heat node {hn} is not a source node",
                        src.id
                    )),
                    _ => {}
                }
            }
            if src.polytope.is_empty() {
                errors.push(format!("source {}: empty polytope", src.id));
            }
            for eta in &src.cost.eta {
                if !eta.check_len(n) {
                    errors.push(format!("source {}: cost series length != N", src.id));
                }
            }
            for row in &src.polytope {
                if !row.v.check_len(n) {
                    errors.push(format!("source {}: polytope rhs series length != N", src.id));
                }
            }
            for t in 0..n {
                let e = src.cost.at(t);
                // PSD of [[eta2, eta5/2], [eta5/2, eta4]]
                if e[2] < 0.0 || e[4] < 0.0 || 4.0 * e[2] * e[4] < e[5] * e[5] - 1e-12 {
                    errors.push(format!("source {}: cost not convex at period {t}", src.id));
                    break;
                }
            }
            for (ramp, what) in [(src.ramp_electric, "electric"), (src.ramp_heat, "heat")] {
                if let Some(r) = ramp {
                    if r.down > r.up {
                        errors.push(format!("source {}: {what} ramp bounds inverted", src.id));
                    }
                }
            }
            if let Some(bound) = self.polytope_bounded(src, 0) {
                if !bound {
                    errors.push(format!("source {}: polytope unbounded or empty", src.id));
                }
            }
        }

        match &self.initial_temperatures {
            InitialTemperatures::PerPipe { supply, return_ } => {
                for (pipes, map, label) in [
                    (&self.heat_network.supply_pipes, supply, "supply"),
                    (&self.heat_network.return_pipes, return_, "return"),
                ] {
                    for pipe in pipes.iter() {
                        let d = pipe.dx.unwrap_or(self.horizon.dx);
                        let want = segment_count(pipe.length, d) + 1;
                        match map.get(&pipe.id) {
                            None => errors.push(format!(
                                "initial temperatures missing for {label} pipe {}",
                                pipe.id
                            )),
                            Some(prof) if prof.len() != want => errors.push(format!(
                                "{label} pipe {}: initial profile has {} entries, expected {want}",
                                pipe.id,
                                prof.len()
                            )),
                            _ => {}
                        }
                    }
                }
            }
            InitialTemperatures::SteadyState {
                source_supply,
                return_injection,
            } => {
                for node in &self.heat_network.nodes {
                    match node.kind {
                        NodeKind::Source if !source_supply.contains_key(&node.id) => errors.push(
                            format!("steady-state init missing supply temperature for {}", node.id),
                        ),
                        NodeKind::Load if !return_injection.contains_key(&node.id) => errors.push(
                            format!("steady-state init missing return temperature for {}", node.id),
                        ),
                        _ => {}
                    }
                }
            }
            InitialTemperatures::Uniform(_) => {}
        }
    }

    /// Crude boundedness probe of a source polytope: each attached axis must
    /// be bounded above and below by the row normals (unattached axes are
    /// pinned to zero elsewhere and need no rows).
    fn polytope_bounded(&self, src: &EnergySource, t: usize) -> Option<bool> {
        let rows: Vec<(f64, f64, f64)> = src
            .polytope
            .iter()
            .map(|r| (r.b, r.k, r.v.at(t)))
            .collect();
        if rows.is_empty() {
            return None;
        }
        // Directions to check: +-p, +-h. Bounded if some positive combination
        // of row normals equals the direction; for a 2-D polytope a
        // sufficient practical check is that each axis direction is covered
        // by rows whose normals span it.
        let covered = |dx: f64, dy: f64| {
            rows.iter().any(|&(b, k, _)| b * dx + k * dy > 1e-12)
                || rows
                    .iter()
                    .any(|&(b1, k1, _)| {
                        rows.iter().any(|&(b2, k2, _)| {
                            // cone of two normals contains the direction
                            let det = b1 * k2 - b2 * k1;
                            if det.abs() < 1e-12 {
                                return false;
                            }
                            let a = (dx * k2 - dy * b2) / det;
                            let c = (dy * b1 - dx * k1) / det;
                            a > -1e-12 && c > -1e-12 && (a > 1e-12 || c > 1e-12)
                        })
                    })
        };
        let mut ok = true;
        if src.bus.is_some() {
            ok = ok && covered(1.0, 0.0) && covered(-1.0, 0.0);
        }
        if src.heat_node.is_some() {
            ok = ok && covered(0.0, 1.0) && covered(0.0, -1.0);
        }
        Some(ok)
    }

    fn build_index(&self, errors: &mut Vec<String>) -> Option<NetworkIndex> {
        let before = errors.len();
        let node_pos: BTreeMap<String, usize> = self
            .heat_network
            .nodes
            .iter()
            .enumerate()
            .map(|(i, nd)| (nd.id.clone(), i))
            .collect();
        if node_pos.len() != self.heat_network.nodes.len() {
            errors.push("duplicate heat node ids".into());
        }
        let bus_pos: BTreeMap<String, usize> = self
            .electric_network
            .buses
            .iter()
            .enumerate()
            .map(|(i, b)| (b.id.clone(), i))
            .collect();
        if bus_pos.len() != self.electric_network.buses.len() {
            errors.push("duplicate bus ids".into());
        }

        let supply = SideIndex::build(
            &self.heat_network.nodes,
            &self.heat_network.supply_pipes,
            &node_pos,
            self.horizon.dx,
            "supply",
            errors,
        );
        let return_ = SideIndex::build(
            &self.heat_network.nodes,
            &self.heat_network.return_pipes,
            &node_pos,
            self.horizon.dx,
            "return",
            errors,
        );

        let sf = match shift_factors(&self.electric_network) {
            Ok(sf) => sf,
            Err(e) => {
                errors.push(e.to_string());
                DMatrix::zeros(self.electric_network.lines.len(), bus_pos.len())
            }
        };

        if errors.len() > before {
            return None;
        }

        // Return pipe flows from supply pipe flows: solve A_R m_R = -A_S m_S
        // with one node row dropped per connected component.
        let n = self.heat_network.nodes.len();
        let n_rp = self.heat_network.return_pipes.len();
        let n_sp = self.heat_network.supply_pipes.len();
        let return_flow_map = if n_rp > 0 {
            let keep = independent_rows(&return_.incidence);
            if keep.len() != n_rp {
                errors.push(format!(
                    "return incidence rank {} != {} return pipes",
                    keep.len(),
                    n_rp
                ));
                return None;
            }
            let a_r = return_.incidence.select_rows(keep.iter());
            let a_s = supply.incidence.select_rows(keep.iter());
            match a_r.lu().solve(&(-a_s)) {
                Some(g) => g,
                None => {
                    errors.push("return network flow map is singular".into());
                    return None;
                }
            }
        } else {
            DMatrix::zeros(0, n_sp)
        };

        // Consistency of the dropped rows requires matching components; check
        // that A_S m and -A_R G m agree for a probe flow.
        if n_rp > 0 {
            let probe = DVector::from_fn(n_sp, |i, _| 1.0 + i as f64);
            let lhs = &supply.incidence * &probe;
            let rhs = -(&return_.incidence * (&return_flow_map * &probe));
            if (lhs - rhs).amax() > 1e-8 {
                errors.push(
                    "supply and return networks are hydraulically inconsistent \
                     (node flows cannot balance)"
                        .into(),
                );
                return None;
            }
        }

        // Exchanger flow w_k as a linear form over supply pipe flows:
        // loads extract +(A_S m)_k, sources inject -(A_S m)_k.
        let mut exchanger_flow = vec![Vec::new(); n];
        for (k, node) in self.heat_network.nodes.iter().enumerate() {
            let sign = match node.kind {
                NodeKind::Load => 1.0,
                NodeKind::Source => -1.0,
            };
            for j in 0..n_sp {
                let a = supply.incidence[(k, j)];
                if a != 0.0 {
                    exchanger_flow[k].push((j, sign * a));
                }
            }
        }

        let mut sources_at_node = vec![Vec::new(); n];
        let mut sources_at_bus = vec![Vec::new(); bus_pos.len()];
        for (i, src) in self.sources.iter().enumerate() {
            if let Some(hn) = &src.heat_node {
                if let Some(&k) = node_pos.get(hn) {
                    sources_at_node[k].push(i);
                }
            }
            if let Some(bus) = &src.bus {
                if let Some(&b) = bus_pos.get(bus) {
                    sources_at_bus[b].push(i);
                }
            }
        }

        Some(NetworkIndex {
            node_pos,
            bus_pos,
            supply,
            return_,
            return_flow_map,
            exchanger_flow,
            shift_factors: sf,
            sources_at_node,
            sources_at_bus,
        })
    }
}

/// Indices of a maximal linearly independent row subset (used to reduce the
/// incidence matrix of a forest to an invertible square block).
fn independent_rows(a: &DMatrix<f64>) -> Vec<usize> {
    let mut rows: Vec<usize> = Vec::new();
    let mut basis: Vec<DVector<f64>> = Vec::new();
    for i in 0..a.nrows() {
        let mut v: DVector<f64> = a.row(i).transpose();
        for b in &basis {
            let proj = v.dot(b);
            v -= b * proj;
        }
        let norm = v.norm();
        if norm > 1e-9 {
            basis.push(v / norm);
            rows.push(i);
            if rows.len() == a.ncols() {
                break;
            }
        }
    }
    rows
}

/// The coupling variable: mass flow per pipe per period, both network sides.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowSchedule {
    pub periods: usize,
    /// Supply pipe flows, indexed `pipe * periods + t`, kg/s.
    pub supply: Vec<f64>,
    /// Return pipe flows, same layout.
    pub return_: Vec<f64>,
}

impl FlowSchedule {
    pub fn supply_at(&self, pipe: usize, t: usize) -> f64 {
        self.supply[pipe * self.periods + t]
    }

    pub fn return_at(&self, pipe: usize, t: usize) -> f64 {
        self.return_[pipe * self.periods + t]
    }

    pub fn at(&self, side: Side, pipe: usize, t: usize) -> f64 {
        match side {
            Side::Supply => self.supply_at(pipe, t),
            Side::Return => self.return_at(pipe, t),
        }
    }

    /// Materialize the full schedule from the master's supply-flow vector
    /// (layout `pipe * periods + t`), deriving return flows through G.
    pub fn from_master(idx: &NetworkIndex, periods: usize, master: &[f64]) -> FlowSchedule {
        let n_sp = idx.n_supply_pipes();
        let n_rp = idx.n_return_pipes();
        assert_eq!(master.len(), n_sp * periods);
        let mut return_ = vec![0.0; n_rp * periods];
        for t in 0..periods {
            for jr in 0..n_rp {
                let mut v = 0.0;
                for js in 0..n_sp {
                    v += idx.return_flow_map[(jr, js)] * master[js * periods + t];
                }
                return_[jr * periods + t] = v;
            }
        }
        FlowSchedule {
            periods,
            supply: master.to_vec(),
            return_: return_,
        }
    }

    /// Exchanger mass flow at a node for one period.
    pub fn exchanger_flow(&self, idx: &NetworkIndex, node: usize, t: usize) -> f64 {
        idx.exchanger_flow[node]
            .iter()
            .map(|&(j, c)| c * self.supply_at(j, t))
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{line_instance, three_bus_triangle};

    #[test]
    fn segment_count_examples() {
        assert_eq!(segment_count(300.0, 100.0), 3);
        assert_eq!(segment_count(250.0, 100.0), 3);
        assert_eq!(segment_count(1.0, 100.0), 1);
    }

    #[test]
    fn node_mass_flow_single_pipe() {
        let mut a = DMatrix::zeros(2, 1);
        a[(0, 0)] = -1.0;
        a[(1, 0)] = 1.0;
        let mn = node_mass_flow(&a, &[5.0]).unwrap();
        assert_eq!(mn, vec![-5.0, 5.0]);
        let zero = node_mass_flow(&a, &[0.0]).unwrap();
        assert_eq!(zero, vec![0.0, 0.0]);
    }

    #[test]
    fn node_mass_flow_conservation() {
        // in 3, out 3 at the middle node
        let mut a = DMatrix::zeros(3, 2);
        a[(0, 0)] = -1.0;
        a[(1, 0)] = 1.0;
        a[(1, 1)] = -1.0;
        a[(2, 1)] = 1.0;
        let mn = node_mass_flow(&a, &[3.0, 3.0]).unwrap();
        assert_eq!(mn[1], 0.0);
    }

    #[test]
    fn node_mass_flow_dimension_mismatch() {
        let a = DMatrix::zeros(2, 1);
        assert!(node_mass_flow(&a, &[1.0, 2.0]).is_err());
    }

    #[test]
    fn incidence_columns_sum_to_zero() {
        let inst = line_instance(3, 4);
        let idx = inst.index().unwrap();
        for j in 0..idx.n_supply_pipes() {
            let s: f64 = idx.supply.incidence.column(j).iter().sum();
            assert_eq!(s, 0.0);
        }
    }

    #[test]
    fn validate_clean_line_instance() {
        let inst = line_instance(3, 4);
        let report = inst.validate();
        assert!(report.is_empty(), "unexpected: {:?}", report.violations);
    }

    #[test]
    fn validate_rejects_cycle() {
        let mut inst = line_instance(3, 4);
        // close the supply graph into a cycle
        let mut extra = inst.heat_network.supply_pipes[0].clone();
        extra.id = "s_back".into();
        extra.from = inst.heat_network.nodes.last().unwrap().id.clone();
        extra.to = inst.heat_network.nodes[0].id.clone();
        inst.heat_network.supply_pipes.push(extra);
        let report = inst.validate();
        assert!(report.violations.iter().any(|v| v.contains("not radial") || v.contains("cycle")));
    }

    #[test]
    fn validate_rejects_nonconvex_cost() {
        let mut inst = line_instance(3, 4);
        inst.sources[0].cost.eta[2] = Profile::Constant(-1.0);
        let report = inst.validate();
        assert!(report.violations.iter().any(|v| v.contains("not convex")));
    }

    #[test]
    fn validate_rejects_inverted_flow_bounds() {
        let mut inst = line_instance(3, 4);
        inst.heat_network.supply_pipes[0].flow_min = Profile::Constant(50.0);
        inst.heat_network.supply_pipes[0].flow_max = Profile::Constant(10.0);
        let report = inst.validate();
        assert!(report.violations.iter().any(|v| v.contains("bounds inverted")));
    }

    #[test]
    fn radiality_pipe_count() {
        let inst = line_instance(4, 2);
        let idx = inst.index().unwrap();
        // one component: pipes = nodes - 1
        assert_eq!(idx.n_supply_pipes(), inst.heat_network.nodes.len() - 1);
    }

    #[test]
    fn shift_factor_two_bus() {
        let net = ElectricNetwork {
            buses: vec![
                Bus { id: "b1".into(), demand: 0.0.into() },
                Bus { id: "b2".into(), demand: 0.0.into() },
            ],
            lines: vec![Line {
                id: "l1".into(),
                from: "b1".into(),
                to: "b2".into(),
                reactance: Some(0.1),
                limit: 10.0.into(),
                shift_factors: None,
            }],
            slack_bus: Some("b1".into()),
        };
        let sf = shift_factors(&net).unwrap();
        assert!((sf[(0, 0)] - 0.0).abs() < 1e-12);
        assert!((sf[(0, 1)] - (-1.0)).abs() < 1e-12);
    }

    #[test]
    fn shift_factor_triangle_split() {
        // 3-bus triangle, equal reactances, injection at bus 2 (slack bus 1):
        // direct line carries 2/3, the two-hop path 1/3.
        let sf = shift_factors(&three_bus_triangle()).unwrap();
        // line order: l12 (b1-b2), l13 (b1-b3), l23 (b2-b3)
        let inj = [0.0, 1.0, 0.0];
        let flow_l12: f64 = (0..3).map(|i| sf[(0, i)] * inj[i]).sum();
        let flow_l13: f64 = (0..3).map(|i| sf[(1, i)] * inj[i]).sum();
        let flow_l23: f64 = (0..3).map(|i| sf[(2, i)] * inj[i]).sum();
        assert!((flow_l12 - (-2.0 / 3.0)).abs() < 1e-9, "{flow_l12}");
        assert!((flow_l13 - (-1.0 / 3.0)).abs() < 1e-9);
        assert!((flow_l23 - (1.0 / 3.0)).abs() < 1e-9);
    }

    #[test]
    fn shift_factor_balance_on_small_networks() {
        // Flows from SF reproduce nodal balance against a brute-force DC solve
        // on the triangle network.
        let net = three_bus_triangle();
        let sf = shift_factors(&net).unwrap();
        let inj = [0.4, -1.1, 0.7];
        // net flow into each bus = injection
        let lines = [(0usize, 1usize), (0, 2), (1, 2)];
        for bus in 0..3 {
            let mut balance = inj[bus];
            for (l, &(f, t)) in lines.iter().enumerate() {
                let flow: f64 = (0..3).map(|i| sf[(l, i)] * inj[i]).sum();
                if f == bus {
                    balance -= flow;
                }
                if t == bus {
                    balance += flow;
                }
            }
            assert!(balance.abs() < 1e-9, "bus {bus}: {balance}");
        }
    }

    #[test]
    fn return_flow_map_mirrors_line_network() {
        let inst = line_instance(3, 4);
        let idx = inst.index().unwrap();
        // mirrored return network: G maps each supply pipe to its mirror
        let g = &idx.return_flow_map;
        let probe = [7.0, 3.0];
        let m = FlowSchedule::from_master(
            &idx,
            1,
            &probe[..idx.n_supply_pipes()].to_vec(),
        );
        // node flow consistency: A_S m_S + A_R m_R = 0
        let ms = DVector::from_column_slice(&m.supply);
        let mr = DVector::from_column_slice(&m.return_);
        let resid = (&idx.supply.incidence * ms) + (&idx.return_.incidence * mr);
        assert!(resid.amax() < 1e-9, "{resid}");
        assert_eq!(g.nrows(), idx.n_return_pipes());
    }
}
