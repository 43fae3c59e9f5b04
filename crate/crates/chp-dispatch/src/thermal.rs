//! Pipeline heat-transport scheme and node mixing, exposed both as the
//! constraint-row physics for the optimizer and as an independent forward
//! simulator used as a correctness oracle.

use crate::error::{Error, Result};
use crate::model::{
    DispatchInstance, FlowSchedule, HeatPipe, InitialTemperatures, NetworkIndex, NodeKind, Physics,
    Side,
};

/// Which algebraic form of the implicit update to use.
///
/// `Consistent` places the flow factor as (a + b m), the dimensionally
/// consistent implicit upwind form whose updates are convex combinations.
/// `PaperLiteral` reproduces the printed (a m + b) grouping for comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CoefficientForm {
    #[default]
    Consistent,
    PaperLiteral,
}

/// Per-pipe discretization coefficients.
#[derive(Debug, Clone)]
pub struct PipeCoefficients {
    /// 1/dt + 1/(rho cp A R), 1/s.
    pub a: f64,
    /// 1/(dx rho A), 1/(kg/m... flow-normalizing factor).
    pub b: f64,
    /// 1/dt, 1/s.
    pub c: f64,
    /// Ambient forcing per period: T_a/(rho cp A R), degC/s.
    pub d: Vec<f64>,
    /// Ambient temperature per period, degC.
    pub ambient: Vec<f64>,
}

impl PipeCoefficients {
    /// Loss rate a - c = 1/(rho cp A R), 1/s.
    pub fn loss_rate(&self) -> f64 {
        self.a - self.c
    }
}

pub fn pipe_coefficients(
    pipe: &HeatPipe,
    physics: &Physics,
    dt: f64,
    dx: f64,
    periods: usize,
) -> Result<PipeCoefficients> {
    if dt <= 0.0 || dx <= 0.0 || pipe.area <= 0.0 || pipe.thermal_resistance <= 0.0 {
        return Err(Error::Instance(format!(
            "pipe {}: nonpositive dt, dx, area, or thermal coefficient",
            pipe.id
        )));
    }
    let loss = 1.0 / (physics.rho * physics.cp * pipe.area * pipe.thermal_resistance);
    Ok(PipeCoefficients {
        a: 1.0 / dt + loss,
        b: 1.0 / (dx * physics.rho * pipe.area),
        c: 1.0 / dt,
        d: (0..periods).map(|t| pipe.ambient.at(t) * loss).collect(),
        ambient: (0..periods).map(|t| pipe.ambient.at(t)).collect(),
    })
}

/// One implicit segment update: the new segment temperature given the value
/// one period ago and the upstream segment in the same period.
pub fn step_segment(
    coeffs: &PipeCoefficients,
    form: CoefficientForm,
    t: usize,
    m: f64,
    tau_prev_time: f64,
    tau_upstream: f64,
) -> f64 {
    match form {
        // Deviation-from-ambient form; the ambient forcing cancels exactly so a
        // field at ambient stays at ambient to the last bit.
        CoefficientForm::Consistent => {
            let ta = coeffs.ambient[t];
            let num = coeffs.c * (tau_prev_time - ta) + coeffs.b * m * (tau_upstream - ta);
            ta + num / (coeffs.a + coeffs.b * m)
        }
        CoefficientForm::PaperLiteral => {
            let num = coeffs.c * tau_prev_time + coeffs.b * m * tau_upstream + coeffs.d[t];
            num / (coeffs.a * m + coeffs.b)
        }
    }
}

/// Segment temperatures of one pipe over the horizon, inlet at index 0.
#[derive(Debug, Clone)]
pub struct TemperatureField {
    pub segments: usize,
    pub periods: usize,
    /// Initial profile tau(i, 0), segments + 1 entries.
    pub initial: Vec<f64>,
    vals: Vec<f64>,
}

impl TemperatureField {
    pub fn new(segments: usize, periods: usize, initial: Vec<f64>) -> TemperatureField {
        assert_eq!(initial.len(), segments + 1);
        TemperatureField {
            segments,
            periods,
            initial,
            vals: vec![0.0; (segments + 1) * periods],
        }
    }

    pub fn get(&self, i: usize, t: usize) -> f64 {
        self.vals[i * self.periods + t]
    }

    pub fn set(&mut self, i: usize, t: usize, v: f64) {
        self.vals[i * self.periods + t] = v;
    }

    /// Value one period before t (the initial profile for t = 0).
    pub fn prev(&self, i: usize, t: usize) -> f64 {
        if t == 0 {
            self.initial[i]
        } else {
            self.get(i, t - 1)
        }
    }

    pub fn inlet(&self, t: usize) -> f64 {
        self.get(0, t)
    }

    pub fn outlet(&self, t: usize) -> f64 {
        self.get(self.segments, t)
    }
}

/// Forward sweep of a single pipe for a given inlet history.
pub fn simulate_pipe(
    coeffs: &PipeCoefficients,
    form: CoefficientForm,
    segments: usize,
    flows: &[f64],
    inlet: &[f64],
    initial: &[f64],
) -> Result<TemperatureField> {
    let periods = flows.len();
    if inlet.len() != periods {
        return Err(Error::Dimension("inlet series length != periods".into()));
    }
    if initial.len() != segments + 1 {
        return Err(Error::Dimension(format!(
            "initial profile has {} entries, expected {}",
            initial.len(),
            segments + 1
        )));
    }
    let mut field = TemperatureField::new(segments, periods, initial.to_vec());
    for t in 0..periods {
        field.set(0, t, inlet[t]);
        for i in 1..=segments {
            let v = step_segment(coeffs, form, t, flows[t], field.prev(i, t), field.get(i - 1, t));
            field.set(i, t, v);
        }
    }
    Ok(field)
}

/// Boundary temperatures driving a network simulation: what the exchangers
/// inject. Entries are only consulted for the relevant node kind.
#[derive(Debug, Clone)]
pub struct BoundaryTemps {
    /// Supply injection temperature series at source nodes, degC.
    pub source_supply: Vec<Option<Vec<f64>>>,
    /// Return injection temperature series at load nodes, degC.
    pub return_injection: Vec<Option<Vec<f64>>>,
}

/// Thermal part of the system state produced by the simulator.
#[derive(Debug, Clone)]
pub struct ThermalState {
    pub periods: usize,
    /// Node temperatures T^S, T^R, layout node * periods + t.
    pub node_supply: Vec<f64>,
    pub node_return: Vec<f64>,
    /// Exchanger temperatures (equal to node temperature on one side each).
    pub exch_supply: Vec<f64>,
    pub exch_return: Vec<f64>,
    pub supply_fields: Vec<TemperatureField>,
    pub return_fields: Vec<TemperatureField>,
    /// Node heat power per Eq-style exchanger balance, MW; positive for both
    /// delivery at loads and production at sources.
    pub heat_power: Vec<f64>,
}

impl ThermalState {
    pub fn node_supply_at(&self, k: usize, t: usize) -> f64 {
        self.node_supply[k * self.periods + t]
    }

    pub fn node_return_at(&self, k: usize, t: usize) -> f64 {
        self.node_return[k * self.periods + t]
    }

    pub fn heat_power_at(&self, k: usize, t: usize) -> f64 {
        self.heat_power[k * self.periods + t]
    }
}

/// Flow-weighted node mixing. `entries` are (flow, temperature) pairs.
/// Zero total flow is reported so the caller can apply its fallback.
pub fn mix_node(entries: &[(f64, f64)]) -> Option<f64> {
    let total: f64 = entries.iter().map(|e| e.0).sum();
    if total <= 1e-12 {
        return None;
    }
    Some(entries.iter().map(|(m, tau)| m * tau).sum::<f64>() / total)
}

/// Resolve the instance's initial-temperature declaration into per-pipe
/// profiles (supply, return), each S_j + 1 entries.
pub fn initial_profiles(
    inst: &DispatchInstance,
    idx: &NetworkIndex,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    match &inst.initial_temperatures {
        InitialTemperatures::Uniform(v) => {
            let s = idx
                .supply
                .segments
                .iter()
                .map(|&sj| vec![*v; sj + 1])
                .collect();
            let r = idx
                .return_
                .segments
                .iter()
                .map(|&sj| vec![*v; sj + 1])
                .collect();
            Ok((s, r))
        }
        InitialTemperatures::PerPipe { supply, return_ } => {
            let mut s = Vec::new();
            for pipe in &inst.heat_network.supply_pipes {
                s.push(
                    supply
                        .get(&pipe.id)
                        .ok_or_else(|| {
                            Error::Instance(format!("missing initial profile for pipe {}", pipe.id))
                        })?
                        .clone(),
                );
            }
            let mut r = Vec::new();
            for pipe in &inst.heat_network.return_pipes {
                r.push(
                    return_
                        .get(&pipe.id)
                        .ok_or_else(|| {
                            Error::Instance(format!("missing initial profile for pipe {}", pipe.id))
                        })?
                        .clone(),
                );
            }
            Ok((s, r))
        }
        InitialTemperatures::SteadyState {
            source_supply,
            return_injection,
        } => {
            let n = idx.n_nodes();
            let mut src = vec![None; n];
            let mut ret = vec![None; n];
            for (id, &k) in &idx.node_pos {
                if let Some(v) = source_supply.get(id) {
                    src[k] = Some(*v);
                }
                if let Some(v) = return_injection.get(id) {
                    ret[k] = Some(*v);
                }
            }
            let master = midpoint_flows(inst, idx);
            let flows = FlowSchedule::from_master(idx, inst.horizon.periods, &master);
            steady_profiles(inst, idx, &flows, &src, &ret)
        }
    }
}

/// Componentwise midpoint of the supply-pipe flow bounds at every period.
pub fn midpoint_flows(inst: &DispatchInstance, idx: &NetworkIndex) -> Vec<f64> {
    let n = inst.horizon.periods;
    let mut m = vec![0.0; idx.n_supply_pipes() * n];
    for (j, pipe) in inst.heat_network.supply_pipes.iter().enumerate() {
        for t in 0..n {
            m[j * n + t] = 0.5 * (pipe.flow_min.at(t) + pipe.flow_max.at(t));
        }
    }
    m
}

/// Componentwise convex combination of the supply-pipe flow bounds,
/// `lambda` = 0 at the minimum, 1 at the maximum.
pub fn blended_flows(inst: &DispatchInstance, idx: &NetworkIndex, lambda: f64) -> Vec<f64> {
    let n = inst.horizon.periods;
    let mut m = vec![0.0; idx.n_supply_pipes() * n];
    for (j, pipe) in inst.heat_network.supply_pipes.iter().enumerate() {
        for t in 0..n {
            m[j * n + t] = pipe.flow_min.at(t) + lambda * (pipe.flow_max.at(t) - pipe.flow_min.at(t));
        }
    }
    m
}

/// Steady-state temperature profiles for first-period flows and boundary
/// temperatures: the fixed point of the implicit update.
fn steady_profiles(
    inst: &DispatchInstance,
    idx: &NetworkIndex,
    flows: &FlowSchedule,
    source_supply: &[Option<f64>],
    return_injection: &[Option<f64>],
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let t = 0;
    let mut out = Vec::new();
    for (side, pipes, side_idx, boundary) in [
        (
            Side::Supply,
            &inst.heat_network.supply_pipes,
            &idx.supply,
            source_supply,
        ),
        (
            Side::Return,
            &inst.heat_network.return_pipes,
            &idx.return_,
            return_injection,
        ),
    ] {
        let mut profiles: Vec<Vec<f64>> = vec![Vec::new(); pipes.len()];
        let mut node_temp = vec![f64::NAN; idx.n_nodes()];
        for &k in &side_idx.node_order {
            let node = &inst.heat_network.nodes[k];
            let w = flows.exchanger_flow(idx, k, t);
            let injects = match (side, node.kind) {
                (Side::Supply, NodeKind::Source) | (Side::Return, NodeKind::Load) => true,
                _ => false,
            };
            let mut entries: Vec<(f64, f64)> = Vec::new();
            for &j in &side_idx.incoming[k] {
                entries.push((flows.at(side, j, t), *profiles[j].last().unwrap()));
            }
            if injects {
                let temp = boundary[k].ok_or_else(|| {
                    Error::Instance(format!("missing boundary temperature for node {}", node.id))
                })?;
                entries.push((w, temp));
            }
            node_temp[k] = match mix_node(&entries) {
                Some(v) => v,
                None => entries
                    .first()
                    .map(|e| e.1)
                    .or(boundary[k])
                    .unwrap_or_else(|| pipes.first().map_or(0.0, |p| p.ambient.at(t))),
            };
            for &j in &side_idx.outgoing[k] {
                let pipe = &pipes[j];
                let coeffs = pipe_coefficients(
                    pipe,
                    &inst.physics,
                    inst.horizon.dt,
                    side_idx.dx[j],
                    inst.horizon.periods,
                )?;
                let m = flows.at(side, j, t);
                let loss = coeffs.loss_rate();
                let mut prof = vec![node_temp[k]];
                for _ in 0..side_idx.segments[j] {
                    let up = *prof.last().unwrap();
                    // fixed point of the consistent update, in deviation form
                    let ta = coeffs.ambient[t];
                    let v = ta + coeffs.b * m * (up - ta) / (loss + coeffs.b * m);
                    prof.push(v);
                }
                profiles[j] = prof;
            }
        }
        out.push(profiles);
    }
    let r = out.pop().unwrap();
    let s = out.pop().unwrap();
    Ok((s, r))
}

/// Full-network forward simulation: supply sweep from sources to loads, then
/// return sweep from loads back, per period, with node heat power from the
/// exchanger balance.
pub fn simulate_network(
    inst: &DispatchInstance,
    idx: &NetworkIndex,
    flows: &FlowSchedule,
    boundary: &BoundaryTemps,
    form: CoefficientForm,
) -> Result<ThermalState> {
    let n = inst.horizon.periods;
    let nn = idx.n_nodes();
    let (init_s, init_r) = initial_profiles(inst, idx)?;

    let mut state = ThermalState {
        periods: n,
        node_supply: vec![0.0; nn * n],
        node_return: vec![0.0; nn * n],
        exch_supply: vec![0.0; nn * n],
        exch_return: vec![0.0; nn * n],
        supply_fields: idx
            .supply
            .segments
            .iter()
            .zip(&init_s)
            .map(|(&sj, init)| TemperatureField::new(sj, n, init.clone()))
            .collect(),
        return_fields: idx
            .return_
            .segments
            .iter()
            .zip(&init_r)
            .map(|(&sj, init)| TemperatureField::new(sj, n, init.clone()))
            .collect(),
        heat_power: vec![0.0; nn * n],
    };

    let coeffs_s: Vec<PipeCoefficients> = inst
        .heat_network
        .supply_pipes
        .iter()
        .enumerate()
        .map(|(j, p)| pipe_coefficients(p, &inst.physics, inst.horizon.dt, idx.supply.dx[j], n))
        .collect::<Result<_>>()?;
    let coeffs_r: Vec<PipeCoefficients> = inst
        .heat_network
        .return_pipes
        .iter()
        .enumerate()
        .map(|(j, p)| pipe_coefficients(p, &inst.physics, inst.horizon.dt, idx.return_.dx[j], n))
        .collect::<Result<_>>()?;

    for t in 0..n {
        for (side, side_idx, coeffs, node_temps) in [
            (Side::Supply, &idx.supply, &coeffs_s, 0usize),
            (Side::Return, &idx.return_, &coeffs_r, 1usize),
        ] {
            for &k in &side_idx.node_order {
                let node = &inst.heat_network.nodes[k];
                let w = flows.exchanger_flow(idx, k, t);
                let injects = matches!(
                    (side, node.kind),
                    (Side::Supply, NodeKind::Source) | (Side::Return, NodeKind::Load)
                );
                let mut entries: Vec<(f64, f64)> = Vec::new();
                for &j in &side_idx.incoming[k] {
                    let outlet = match side {
                        Side::Supply => state.supply_fields[j].outlet(t),
                        Side::Return => state.return_fields[j].outlet(t),
                    };
                    entries.push((flows.at(side, j, t), outlet));
                }
                if injects {
                    let series = match side {
                        Side::Supply => &boundary.source_supply[k],
                        Side::Return => &boundary.return_injection[k],
                    };
                    let temp = series.as_ref().ok_or_else(|| {
                        Error::Instance(format!(
                            "missing boundary temperature series for node {}",
                            node.id
                        ))
                    })?[t];
                    entries.push((w, temp));
                }
                let temp = match mix_node(&entries) {
                    Some(v) => v,
                    None => {
                        // stagnant node keeps its previous temperature
                        if t > 0 {
                            let arr = if node_temps == 0 {
                                &state.node_supply
                            } else {
                                &state.node_return
                            };
                            arr[k * n + t - 1]
                        } else {
                            // first period: fall back to an entering pipe's
                            // initial outlet, else the boundary input
                            side_idx.incoming[k]
                                .first()
                                .map(|&j| match side {
                                    Side::Supply => *state.supply_fields[j].initial.last().unwrap(),
                                    Side::Return => *state.return_fields[j].initial.last().unwrap(),
                                })
                                .or_else(|| {
                                    entries.first().map(|e| e.1)
                                })
                                .unwrap_or(0.0)
                        }
                    }
                };
                if node_temps == 0 {
                    state.node_supply[k * n + t] = temp;
                } else {
                    state.node_return[k * n + t] = temp;
                }
                for &j in &side_idx.outgoing[k] {
                    let m = flows.at(side, j, t);
                    let field = match side {
                        Side::Supply => &mut state.supply_fields[j],
                        Side::Return => &mut state.return_fields[j],
                    };
                    field.set(0, t, temp);
                    for i in 1..=field.segments {
                        let v = step_segment(&coeffs[j], form, t, m, field.prev(i, t), field.get(i - 1, t));
                        field.set(i, t, v);
                    }
                }
            }
        }

        // exchanger temperatures and node heat power (Eq. (3) style)
        for k in 0..nn {
            let node = &inst.heat_network.nodes[k];
            let w = flows.exchanger_flow(idx, k, t);
            let (ts, tr) = (state.node_supply[k * n + t], state.node_return[k * n + t]);
            let (ex_s, ex_r) = match node.kind {
                NodeKind::Source => {
                    let ex_s = boundary.source_supply[k]
                        .as_ref()
                        .map(|s| s[t])
                        .unwrap_or(ts);
                    (ex_s, tr)
                }
                NodeKind::Load => {
                    let ex_r = boundary.return_injection[k]
                        .as_ref()
                        .map(|s| s[t])
                        .unwrap_or(tr);
                    (ts, ex_r)
                }
            };
            state.exch_supply[k * n + t] = ex_s;
            state.exch_return[k * n + t] = ex_r;
            state.heat_power[k * n + t] = inst.physics.cp_power() * w * (ex_s - ex_r);
        }
    }
    Ok(state)
}
