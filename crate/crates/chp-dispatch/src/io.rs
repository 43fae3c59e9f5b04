//! Instance files and result artifacts.
//!
//! Instance JSON uses SI units with watts for power; the schema is strict
//! (unknown fields are rejected) to prevent silent unit mistakes. Cost
//! coefficients are the exception: they are given in MW terms ($, $/MW,
//! $/MW^2) to keep the numbers readable. Internally everything runs in MW.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::{ComparisonReport, ModeReport};
use crate::master::{IterStatus, IterationLog};
use crate::model::*;
use crate::subproblem::SubproblemSolution;
use crate::thermal::{BoundaryTemps, ThermalState};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HorizonFile {
    periods: usize,
    dt_s: f64,
    dx_m: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PhysicsFile {
    rho_kg_per_m3: f64,
    cp_j_per_kg_k: f64,
}

impl Default for PhysicsFile {
    fn default() -> Self {
        PhysicsFile { rho_kg_per_m3: 1000.0, cp_j_per_kg_k: 4182.0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NodeFile {
    id: String,
    kind: NodeKind,
    #[serde(default)]
    demand_w: Option<Profile>,
    #[serde(default)]
    supply_temp_min_c: Option<f64>,
    #[serde(default)]
    supply_temp_max_c: Option<f64>,
    #[serde(default)]
    return_temp_min_c: Option<f64>,
    #[serde(default)]
    return_temp_max_c: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PipeFile {
    id: String,
    from: String,
    to: String,
    length_m: f64,
    area_m2: f64,
    thermal_resistance_m_k_per_w: f64,
    flow_min_kg_per_s: Profile,
    flow_max_kg_per_s: Profile,
    ambient_c: Profile,
    #[serde(default)]
    dx_m: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeatNetworkFile {
    nodes: Vec<NodeFile>,
    supply_pipes: Vec<PipeFile>,
    return_pipes: Vec<PipeFile>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BusFile {
    id: String,
    #[serde(default)]
    demand_w: Option<Profile>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LineFile {
    id: String,
    from: String,
    to: String,
    #[serde(default)]
    reactance_pu: Option<f64>,
    limit_w: Profile,
    #[serde(default)]
    shift_factors: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ElectricNetworkFile {
    buses: Vec<BusFile>,
    #[serde(default)]
    lines: Vec<LineFile>,
    #[serde(default)]
    slack_bus: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PolytopeRowFile {
    b: f64,
    k: f64,
    v_w: Profile,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RampFile {
    down_w_per_s: f64,
    up_w_per_s: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SourceFile {
    id: String,
    #[serde(default)]
    bus: Option<String>,
    #[serde(default)]
    heat_node: Option<String>,
    polytope: Vec<PolytopeRowFile>,
    #[serde(default)]
    ramp_electric: Option<RampFile>,
    #[serde(default)]
    ramp_heat: Option<RampFile>,
    /// eta0..eta5 of C = eta0 + eta1 p + eta2 p^2 + eta3 h + eta4 h^2
    /// + eta5 p h, with p and h in MW.
    cost_eta_mw: [Profile; 6],
    #[serde(default)]
    renewable: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case")]
enum InitialTemperaturesFile {
    UniformC(f64),
    SteadyState {
        source_supply_c: BTreeMap<String, f64>,
        return_injection_c: BTreeMap<String, f64>,
    },
    PerPipe {
        supply_c: BTreeMap<String, Vec<f64>>,
        return_c: BTreeMap<String, Vec<f64>>,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct InstanceFile {
    horizon: HorizonFile,
    #[serde(default)]
    physics: Option<PhysicsFile>,
    heat_network: HeatNetworkFile,
    electric_network: ElectricNetworkFile,
    sources: Vec<SourceFile>,
    initial_temperatures: InitialTemperaturesFile,
}

fn scale_power(p: Option<Profile>) -> Profile {
    p.map(|v| v.scaled(POWER_SCALE))
        .unwrap_or(Profile::Constant(0.0))
}

fn convert_pipe(p: PipeFile) -> HeatPipe {
    HeatPipe {
        id: p.id,
        from: p.from,
        to: p.to,
        length: p.length_m,
        area: p.area_m2,
        thermal_resistance: p.thermal_resistance_m_k_per_w,
        flow_min: p.flow_min_kg_per_s,
        flow_max: p.flow_max_kg_per_s,
        ambient: p.ambient_c,
        dx: p.dx_m,
    }
}

fn convert(file: InstanceFile) -> DispatchInstance {
    let physics = file.physics.unwrap_or_default();
    DispatchInstance {
        horizon: Horizon {
            periods: file.horizon.periods,
            dt: file.horizon.dt_s,
            dx: file.horizon.dx_m,
        },
        physics: Physics {
            rho: physics.rho_kg_per_m3,
            cp: physics.cp_j_per_kg_k,
        },
        heat_network: HeatNetwork {
            nodes: file
                .heat_network
                .nodes
                .into_iter()
                .map(|n| HeatNode {
                    id: n.id,
                    kind: n.kind,
                    demand: scale_power(n.demand_w),
                    supply_temp_min: n.supply_temp_min_c,
                    supply_temp_max: n.supply_temp_max_c,
                    return_temp_min: n.return_temp_min_c,
                    return_temp_max: n.return_temp_max_c,
                })
                .collect(),
            supply_pipes: file
                .heat_network
                .supply_pipes
                .into_iter()
                .map(convert_pipe)
                .collect(),
            return_pipes: file
                .heat_network
                .return_pipes
                .into_iter()
                .map(convert_pipe)
                .collect(),
        },
        electric_network: ElectricNetwork {
            buses: file
                .electric_network
                .buses
                .into_iter()
                .map(|b| Bus { id: b.id, demand: scale_power(b.demand_w) })
                .collect(),
            lines: file
                .electric_network
                .lines
                .into_iter()
                .map(|l| Line {
                    id: l.id,
                    from: l.from,
                    to: l.to,
                    reactance: l.reactance_pu,
                    limit: l.limit_w.scaled(POWER_SCALE),
                    shift_factors: l.shift_factors,
                })
                .collect(),
            slack_bus: file.electric_network.slack_bus,
        },
        sources: file
            .sources
            .into_iter()
            .map(|s| EnergySource {
                id: s.id,
                bus: s.bus,
                heat_node: s.heat_node,
                polytope: s
                    .polytope
                    .into_iter()
                    .map(|r| PolytopeRow { b: r.b, k: r.k, v: r.v_w.scaled(POWER_SCALE) })
                    .collect(),
                ramp_electric: s.ramp_electric.map(|r| Ramp {
                    down: r.down_w_per_s * POWER_SCALE,
                    up: r.up_w_per_s * POWER_SCALE,
                }),
                ramp_heat: s.ramp_heat.map(|r| Ramp {
                    down: r.down_w_per_s * POWER_SCALE,
                    up: r.up_w_per_s * POWER_SCALE,
                }),
                cost: CostCurve { eta: s.cost_eta_mw },
                renewable: s.renewable,
            })
            .collect(),
        initial_temperatures: match file.initial_temperatures {
            InitialTemperaturesFile::UniformC(v) => InitialTemperatures::Uniform(v),
            InitialTemperaturesFile::SteadyState {
                source_supply_c,
                return_injection_c,
            } => InitialTemperatures::SteadyState {
                source_supply: source_supply_c,
                return_injection: return_injection_c,
            },
            InitialTemperaturesFile::PerPipe { supply_c, return_c } => {
                InitialTemperatures::PerPipe { supply: supply_c, return_: return_c }
            }
        },
    }
}

/// Load, unit-convert, and validate an instance file.
pub fn load_instance(path: &Path) -> Result<DispatchInstance> {
    let text = fs::read_to_string(path).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        msg: e.to_string(),
    })?;
    let file: InstanceFile = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        msg: e.to_string(),
    })?;
    let inst = convert(file);
    let report = inst.validate();
    if !report.is_empty() {
        return Err(Error::Validation(report.violations));
    }
    Ok(inst)
}

fn create(path: &Path) -> Result<fs::File> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    Ok(fs::File::create(path)?)
}

pub fn write_flows_csv(
    path: &Path,
    inst: &DispatchInstance,
    flows: &FlowSchedule,
) -> Result<()> {
    let mut f = create(path)?;
    writeln!(f, "pipe,period,kg_per_s")?;
    for (j, pipe) in inst.heat_network.supply_pipes.iter().enumerate() {
        for t in 0..flows.periods {
            writeln!(f, "{},{t},{}", pipe.id, flows.supply_at(j, t))?;
        }
    }
    for (j, pipe) in inst.heat_network.return_pipes.iter().enumerate() {
        for t in 0..flows.periods {
            writeln!(f, "{},{t},{}", pipe.id, flows.return_at(j, t))?;
        }
    }
    Ok(())
}

/// Read a flows.csv back into a schedule (pipe ids resolve the side).
pub fn read_flows_csv(
    path: &Path,
    inst: &DispatchInstance,
    periods: usize,
) -> Result<FlowSchedule> {
    let text = fs::read_to_string(path)?;
    let supply_pos: BTreeMap<&str, usize> = inst
        .heat_network
        .supply_pipes
        .iter()
        .enumerate()
        .map(|(j, p)| (p.id.as_str(), j))
        .collect();
    let return_pos: BTreeMap<&str, usize> = inst
        .heat_network
        .return_pipes
        .iter()
        .enumerate()
        .map(|(j, p)| (p.id.as_str(), j))
        .collect();
    let mut supply = vec![f64::NAN; supply_pos.len() * periods];
    let mut return_ = vec![f64::NAN; return_pos.len() * periods];
    for (lineno, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        let bad = |msg: &str| Error::Parse {
            path: path.display().to_string(),
            msg: format!("line {}: {msg}", lineno + 1),
        };
        if parts.len() != 3 {
            return Err(bad("expected pipe,period,kg_per_s"));
        }
        let t: usize = parts[1].trim().parse().map_err(|_| bad("bad period"))?;
        let v: f64 = parts[2].trim().parse().map_err(|_| bad("bad flow value"))?;
        if t >= periods {
            return Err(bad("period out of range"));
        }
        if let Some(&j) = supply_pos.get(parts[0].trim()) {
            supply[j * periods + t] = v;
        } else if let Some(&j) = return_pos.get(parts[0].trim()) {
            return_[j * periods + t] = v;
        } else {
            return Err(bad("unknown pipe id"));
        }
    }
    if supply.iter().chain(return_.iter()).any(|v| v.is_nan()) {
        return Err(Error::Parse {
            path: path.display().to_string(),
            msg: "missing flow entries for some pipe/period".into(),
        });
    }
    Ok(FlowSchedule { periods, supply, return_ })
}

pub fn write_temperatures_csv(
    path: &Path,
    inst: &DispatchInstance,
    idx: &NetworkIndex,
    sol: &SubproblemSolution,
) -> Result<()> {
    let n = inst.horizon.periods;
    let mut f = create(path)?;
    writeln!(f, "pipe,segment,period,temp_c")?;
    for (side, pipes, segs) in [
        (Side::Supply, &inst.heat_network.supply_pipes, &idx.supply.segments),
        (Side::Return, &inst.heat_network.return_pipes, &idx.return_.segments),
    ] {
        for (j, pipe) in pipes.iter().enumerate() {
            for i in 0..=segs[j] {
                for t in 0..n {
                    writeln!(f, "{},{i},{t},{}", pipe.id, sol.state.tau(side, j, i, t))?;
                }
            }
        }
    }
    Ok(())
}

pub fn write_sim_temperatures_csv(
    path: &Path,
    inst: &DispatchInstance,
    sim: &ThermalState,
) -> Result<()> {
    let n = sim.periods;
    let mut f = create(path)?;
    writeln!(f, "pipe,segment,period,temp_c")?;
    for (pipes, fields) in [
        (&inst.heat_network.supply_pipes, &sim.supply_fields),
        (&inst.heat_network.return_pipes, &sim.return_fields),
    ] {
        for (pipe, field) in pipes.iter().zip(fields.iter()) {
            for i in 0..=field.segments {
                for t in 0..n {
                    writeln!(f, "{},{i},{t},{}", pipe.id, field.get(i, t))?;
                }
            }
        }
    }
    Ok(())
}

pub fn write_sim_delivered_heat_csv(
    path: &Path,
    inst: &DispatchInstance,
    sim: &ThermalState,
) -> Result<()> {
    let mut f = create(path)?;
    writeln!(f, "node,period,heat_w")?;
    for (k, node) in inst.heat_network.nodes.iter().enumerate() {
        for t in 0..sim.periods {
            writeln!(f, "{},{t},{}", node.id, sim.heat_power_at(k, t) / POWER_SCALE)?;
        }
    }
    Ok(())
}

pub fn write_delivered_heat_csv(
    path: &Path,
    inst: &DispatchInstance,
    idx: &NetworkIndex,
    flows: &FlowSchedule,
    sol: &SubproblemSolution,
) -> Result<()> {
    let n = inst.horizon.periods;
    let cp_w = inst.physics.cp_power();
    let mut f = create(path)?;
    writeln!(f, "node,period,heat_w")?;
    for (k, node) in inst.heat_network.nodes.iter().enumerate() {
        for t in 0..n {
            let w = flows.exchanger_flow(idx, k, t);
            let q = cp_w * w * (sol.state.exch_supply(k, t) - sol.state.exch_return(k, t));
            writeln!(f, "{},{t},{}", node.id, q / POWER_SCALE)?;
        }
    }
    Ok(())
}

pub fn write_schedules_csv(path: &Path, inst: &DispatchInstance, report: &ModeReport) -> Result<()> {
    let n = inst.horizon.periods;
    let mut f = create(path)?;
    writeln!(f, "source,period,p_w,h_w")?;
    for (i, src) in inst.sources.iter().enumerate() {
        for t in 0..n {
            writeln!(
                f,
                "{},{t},{},{}",
                src.id,
                report.p[i * n + t] / POWER_SCALE,
                report.h[i * n + t] / POWER_SCALE
            )?;
        }
    }
    Ok(())
}

pub fn write_storage_proxy_csv(
    path: &Path,
    inst: &DispatchInstance,
    report: &ModeReport,
) -> Result<()> {
    let n = inst.horizon.periods;
    let mut f = create(path)?;
    writeln!(f, "period,generation_minus_load_w")?;
    for t in 0..n {
        let gen: f64 = (0..inst.sources.len()).map(|i| report.h[i * n + t]).sum();
        let load: f64 = inst
            .heat_network
            .nodes
            .iter()
            .map(|nd| nd.demand.at(t))
            .sum();
        writeln!(f, "{t},{}", (gen - load) / POWER_SCALE)?;
    }
    Ok(())
}

pub fn write_iterations_csv(path: &Path, logs: &[IterationLog]) -> Result<()> {
    let mut f = create(path)?;
    writeln!(f, "k,status,J,sigma,step_alpha,n_cuts,grad_norm,wallclock_ms")?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for log in logs {
        let status = match log.status {
            IterStatus::Optimal => "optimal",
            IterStatus::Infeasible => "infeasible",
        };
        writeln!(
            f,
            "{},{status},{},{},{},{},{},{}",
            log.k,
            opt(log.objective),
            opt(log.sigma),
            opt(log.step),
            log.n_cuts,
            opt(log.grad_norm),
            log.wallclock_ms
        )?;
    }
    Ok(())
}

pub fn write_comparison_csv(path: &Path, report: &ComparisonReport) -> Result<()> {
    let mut f = create(path)?;
    writeln!(
        f,
        "mode,total_cost,curtailed_wh,curtailed_pct,wallclock_s,iterations,gap_vs_prev_pct"
    )?;
    let rows = [
        (&report.variable, f64::NAN),
        (&report.fixed, report.fixed_gap_pct),
        (&report.separate, report.separate_gap_pct),
    ];
    for (mode, gap) in rows {
        writeln!(
            f,
            "{},{},{},{},{},{},{}",
            mode.mode.label(),
            mode.objective,
            mode.curtailed_mwh * 1e6,
            mode.curtailed_pct,
            mode.wallclock_s,
            mode.iterations.len(),
            if gap.is_nan() { String::new() } else { gap.to_string() }
        )?;
    }
    Ok(())
}

pub fn write_source_temps_csv(
    path: &Path,
    inst: &DispatchInstance,
    sol: &SubproblemSolution,
) -> Result<()> {
    let n = inst.horizon.periods;
    let mut f = create(path)?;
    writeln!(f, "node,period,temp_c")?;
    for (k, node) in inst.heat_network.nodes.iter().enumerate() {
        for t in 0..n {
            let v = match node.kind {
                NodeKind::Source => sol.state.exch_supply(k, t),
                NodeKind::Load => sol.state.exch_return(k, t),
            };
            writeln!(f, "{},{t},{v}", node.id)?;
        }
    }
    Ok(())
}

/// Boundary temperatures per node: the supply injection at sources, the
/// return injection at loads.
pub fn read_source_temps_csv(
    path: &Path,
    inst: &DispatchInstance,
    idx: &NetworkIndex,
    periods: usize,
) -> Result<BoundaryTemps> {
    let text = fs::read_to_string(path)?;
    let nn = idx.n_nodes();
    let mut series: Vec<Vec<f64>> = vec![vec![f64::NAN; periods]; nn];
    for (lineno, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |msg: &str| Error::Parse {
            path: path.display().to_string(),
            msg: format!("line {}: {msg}", lineno + 1),
        };
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 3 {
            return Err(bad("expected node,period,temp_c"));
        }
        let &k = idx
            .node_pos
            .get(parts[0].trim())
            .ok_or_else(|| bad("unknown node id"))?;
        let t: usize = parts[1].trim().parse().map_err(|_| bad("bad period"))?;
        let v: f64 = parts[2].trim().parse().map_err(|_| bad("bad temperature"))?;
        if t >= periods {
            return Err(bad("period out of range"));
        }
        series[k][t] = v;
    }
    let mut boundary = BoundaryTemps {
        source_supply: vec![None; nn],
        return_injection: vec![None; nn],
    };
    for (k, node) in inst.heat_network.nodes.iter().enumerate() {
        if series[k].iter().any(|v| v.is_nan()) {
            return Err(Error::Parse {
                path: path.display().to_string(),
                msg: format!("missing temperature entries for node {}", node.id),
            });
        }
        match node.kind {
            NodeKind::Source => boundary.source_supply[k] = Some(series[k].clone()),
            NodeKind::Load => boundary.return_injection[k] = Some(series[k].clone()),
        }
    }
    Ok(boundary)
}

#[derive(Debug, Serialize)]
pub struct ResultJson {
    pub mode: String,
    pub cost: f64,
    pub converged: bool,
    pub iterations: usize,
    pub curtailed_wh: f64,
    pub curtailed_pct: f64,
    pub wallclock_s: f64,
}

pub fn write_result_json(path: &Path, report: &ModeReport) -> Result<()> {
    let out = ResultJson {
        mode: report.mode.label().into(),
        cost: report.objective,
        converged: report.converged,
        iterations: report.iterations.len(),
        curtailed_wh: report.curtailed_mwh * 1e6,
        curtailed_pct: report.curtailed_pct,
        wallclock_s: report.wallclock_s,
    };
    let mut f = create(path)?;
    writeln!(f, "{}", serde_json::to_string_pretty(&out).expect("serializable"))?;
    Ok(())
}

pub fn write_error_json(path: &Path, err: &Error) -> Result<()> {
    #[derive(Serialize)]
    struct ErrorJson {
        error: String,
    }
    let mut f = create(path)?;
    writeln!(
        f,
        "{}",
        serde_json::to_string_pretty(&ErrorJson { error: err.to_string() }).expect("serializable")
    )?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::two_node_thermal;
    use crate::thermal::midpoint_flows;
    use approx::assert_relative_eq;

    fn sample_json() -> String {
        r#"{
  "horizon": {"periods": 2, "dt_s": 3600.0, "dx_m": 100.0},
  "heat_network": {
    "nodes": [
      {"id": "n1", "kind": "source",
       "supply_temp_min_c": 55.0, "supply_temp_max_c": 120.0,
       "return_temp_min_c": 25.0, "return_temp_max_c": 80.0},
      {"id": "n2", "kind": "load", "demand_w": 3.0e6,
       "supply_temp_min_c": 55.0, "supply_temp_max_c": 120.0,
       "return_temp_min_c": 25.0, "return_temp_max_c": 80.0}
    ],
    "supply_pipes": [
      {"id": "s1", "from": "n1", "to": "n2", "length_m": 400.0,
       "area_m2": 0.02, "thermal_resistance_m_k_per_w": 10.0,
       "flow_min_kg_per_s": 5.0, "flow_max_kg_per_s": 40.0, "ambient_c": 10.0}
    ],
    "return_pipes": [
      {"id": "r1", "from": "n2", "to": "n1", "length_m": 400.0,
       "area_m2": 0.02, "thermal_resistance_m_k_per_w": 10.0,
       "flow_min_kg_per_s": 5.0, "flow_max_kg_per_s": 40.0, "ambient_c": 10.0}
    ]
  },
  "electric_network": {
    "buses": [{"id": "b1", "demand_w": 4.0e6}]
  },
  "sources": [
    {"id": "chp", "bus": "b1", "heat_node": "n1",
     "polytope": [
       {"b": 1.0, "k": 0.0, "v_w": 2.0e7},
       {"b": -1.0, "k": 0.0, "v_w": 0.0},
       {"b": 0.0, "k": 1.0, "v_w": 2.5e7},
       {"b": 0.0, "k": -1.0, "v_w": 0.0}
     ],
     "cost_eta_mw": [0.0, 18.0, 0.04, 7.0, 0.02, 0.0]}
  ],
  "initial_temperatures": {"uniform_c": 70.0}
}"#
        .to_string()
    }

    #[test]
    fn loads_and_converts_watts() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("inst.json");
        fs::write(&path, sample_json()).unwrap();
        let inst = load_instance(&path).unwrap();
        assert_eq!(inst.horizon.periods, 2);
        // demand converted W -> MW
        assert_relative_eq!(inst.heat_network.nodes[1].demand.at(0), 3.0);
        assert_relative_eq!(inst.electric_network.buses[0].demand.at(1), 4.0);
        assert_relative_eq!(inst.sources[0].polytope[0].v.at(0), 20.0);
        assert!(inst.index().is_ok());
    }

    #[test]
    fn rejects_unknown_fields() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("inst.json");
        let bad = sample_json().replace("\"dt_s\"", "\"dt_seconds\"");
        fs::write(&path, bad).unwrap();
        assert!(matches!(load_instance(&path), Err(Error::Parse { .. })));
    }

    #[test]
    fn rejects_inverted_bounds_with_pipe_name() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("inst.json");
        let bad = sample_json().replace(
            "\"flow_min_kg_per_s\": 5.0, \"flow_max_kg_per_s\": 40.0, \"ambient_c\": 10.0}\n    ]\n  },",
            "\"flow_min_kg_per_s\": 50.0, \"flow_max_kg_per_s\": 40.0, \"ambient_c\": 10.0}\n    ]\n  },",
        );
        fs::write(&path, bad).unwrap();
        match load_instance(&path) {
            Err(Error::Validation(v)) => {
                assert!(v.iter().any(|m| m.contains("r1") && m.contains("inverted")))
            }
            other => panic!("expected validation failure, got {other:?}"),
        }
    }

    #[test]
    fn flows_csv_roundtrip() {
        let (inst, idx) = two_node_thermal(3);
        let flows = FlowSchedule::from_master(&idx, 3, &midpoint_flows(&inst, &idx));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("flows.csv");
        write_flows_csv(&path, &inst, &flows).unwrap();
        let back = read_flows_csv(&path, &inst, 3).unwrap();
        assert_eq!(back, flows);
    }
}
