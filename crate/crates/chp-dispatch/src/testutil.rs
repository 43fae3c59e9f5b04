//! Programmatic instance builders shared by unit, integration, and
//! acceptance tests. Quantities use the internal units (MW, degC, kg/s).

use crate::model::*;

pub fn single_pipe(id: &str, from: &str, to: &str, length: f64, area: f64) -> HeatPipe {
    HeatPipe {
        id: id.into(),
        from: from.into(),
        to: to.into(),
        length,
        area,
        thermal_resistance: 10.0,
        flow_min: 5.0.into(),
        flow_max: 40.0.into(),
        ambient: 10.0.into(),
        dx: None,
    }
}

fn mirror(pipe: &HeatPipe, id: &str) -> HeatPipe {
    let mut p = pipe.clone();
    p.id = id.into();
    std::mem::swap(&mut p.from, &mut p.to);
    p
}

pub fn chp_polytope(p_max: f64, h_max: f64) -> Vec<PolytopeRow> {
    vec![
        PolytopeRow { b: 1.0, k: 0.0, v: p_max.into() },
        PolytopeRow { b: -1.0, k: 0.0, v: 0.0.into() },
        PolytopeRow { b: 0.0, k: 1.0, v: h_max.into() },
        PolytopeRow { b: 0.0, k: -1.0, v: 0.0.into() },
    ]
}

pub fn electric_only_polytope(p_min: f64, p_max: f64) -> Vec<PolytopeRow> {
    vec![
        PolytopeRow { b: 1.0, k: 0.0, v: p_max.into() },
        PolytopeRow { b: -1.0, k: 0.0, v: (-p_min).into() },
    ]
}

pub fn heat_only_polytope(h_max: f64) -> Vec<PolytopeRow> {
    vec![
        PolytopeRow { b: 0.0, k: 1.0, v: h_max.into() },
        PolytopeRow { b: 0.0, k: -1.0, v: 0.0.into() },
    ]
}

pub fn quadratic_cost(eta: [f64; 6]) -> CostCurve {
    CostCurve {
        eta: eta.map(Profile::Constant),
    }
}

pub fn three_bus_triangle() -> ElectricNetwork {
    let line = |id: &str, from: &str, to: &str| Line {
        id: id.into(),
        from: from.into(),
        to: to.into(),
        reactance: Some(0.1),
        limit: 100.0.into(),
        shift_factors: None,
    };
    ElectricNetwork {
        buses: vec![
            Bus { id: "b1".into(), demand: 0.0.into() },
            Bus { id: "b2".into(), demand: 0.0.into() },
            Bus { id: "b3".into(), demand: 0.0.into() },
        ],
        lines: vec![line("l12", "b1", "b2"), line("l13", "b1", "b3"), line("l23", "b2", "b3")],
        slack_bus: Some("b1".into()),
    }
}

fn load_node(id: &str, demand: Profile) -> HeatNode {
    HeatNode {
        id: id.into(),
        kind: NodeKind::Load,
        demand,
        supply_temp_min: Some(55.0),
        supply_temp_max: Some(120.0),
        return_temp_min: Some(25.0),
        return_temp_max: Some(80.0),
    }
}

fn source_node(id: &str) -> HeatNode {
    HeatNode {
        id: id.into(),
        kind: NodeKind::Source,
        demand: 0.0.into(),
        supply_temp_min: Some(55.0),
        supply_temp_max: Some(120.0),
        return_temp_min: Some(25.0),
        return_temp_max: Some(80.0),
    }
}

/// A chain heat network: source at the head, loads downstream, a two-bus
/// electric side with one CHP and one grid tie.
pub fn line_instance(n_nodes: usize, periods: usize) -> DispatchInstance {
    assert!(n_nodes >= 2);
    let mut nodes = vec![source_node("n1")];
    for i in 2..=n_nodes {
        nodes.push(load_node(&format!("n{i}"), 3.0.into()));
    }
    let mut supply = Vec::new();
    let mut return_ = Vec::new();
    for i in 1..n_nodes {
        let s = single_pipe(
            &format!("s{i}"),
            &format!("n{i}"),
            &format!("n{}", i + 1),
            400.0,
            0.02,
        );
        return_.push(mirror(&s, &format!("r{i}")));
        supply.push(s);
    }
    // downstream pipes carry less flow
    for (i, p) in supply.iter_mut().enumerate() {
        let scale = 1.0 / (1.0 + i as f64 * 0.5);
        p.flow_min = (8.0 * scale).into();
        p.flow_max = (60.0 * scale).into();
    }
    for (i, p) in return_.iter_mut().enumerate() {
        let scale = 1.0 / (1.0 + i as f64 * 0.5);
        p.flow_min = (8.0 * scale).into();
        p.flow_max = (60.0 * scale).into();
    }

    let electric = ElectricNetwork {
        buses: vec![
            Bus { id: "b1".into(), demand: 0.0.into() },
            Bus { id: "b2".into(), demand: 12.0.into() },
        ],
        lines: vec![Line {
            id: "l1".into(),
            from: "b1".into(),
            to: "b2".into(),
            reactance: Some(0.1),
            limit: 60.0.into(),
            shift_factors: None,
        }],
        slack_bus: Some("b2".into()),
    };

    let sources = vec![
        EnergySource {
            id: "chp".into(),
            bus: Some("b1".into()),
            heat_node: Some("n1".into()),
            polytope: chp_polytope(30.0, 45.0),
            ramp_electric: Some(Ramp { down: -30.0 / 3600.0, up: 30.0 / 3600.0 }),
            ramp_heat: Some(Ramp { down: -45.0 / 3600.0, up: 45.0 / 3600.0 }),
            cost: quadratic_cost([0.0, 20.0, 0.05, 8.0, 0.02, 0.01]),
            renewable: false,
        },
        EnergySource {
            id: "grid".into(),
            bus: Some("b2".into()),
            heat_node: None,
            polytope: electric_only_polytope(0.0, 60.0),
            ramp_electric: None,
            ramp_heat: None,
            cost: quadratic_cost([0.0, 50.0, 0.0, 0.0, 0.0, 0.0]),
            renewable: false,
        },
    ];

    DispatchInstance {
        horizon: Horizon { periods, dt: 3600.0, dx: 100.0 },
        physics: Physics { rho: 1000.0, cp: 4182.0 },
        heat_network: HeatNetwork { nodes, supply_pipes: supply, return_pipes: return_ },
        electric_network: electric,
        sources,
        initial_temperatures: InitialTemperatures::Uniform(70.0),
    }
}

/// Two sources feeding one load through a Y junction; optionally lossless.
pub fn y_instance(periods: usize, lossless: bool) -> (DispatchInstance, NetworkIndex) {
    let nodes = vec![source_node("a"), source_node("b"), load_node("c", 4.0.into())];
    let mut s1 = single_pipe("sa", "a", "c", 300.0, 0.02);
    let mut s2 = single_pipe("sb", "b", "c", 300.0, 0.02);
    s2.flow_min = 3.0.into();
    s2.flow_max = 21.0.into();
    if lossless {
        s1.thermal_resistance = 1e12;
        s2.thermal_resistance = 1e12;
    }
    let r1 = mirror(&s1, "ra");
    let r2 = mirror(&s2, "rb");

    let inst = DispatchInstance {
        horizon: Horizon { periods, dt: 3600.0, dx: 100.0 },
        physics: Physics { rho: 1000.0, cp: 4182.0 },
        heat_network: HeatNetwork {
            nodes,
            supply_pipes: vec![s1, s2],
            return_pipes: vec![r1, r2],
        },
        electric_network: ElectricNetwork {
            buses: vec![Bus { id: "b1".into(), demand: 5.0.into() }],
            lines: vec![],
            slack_bus: None,
        },
        sources: vec![
            EnergySource {
                id: "chp_a".into(),
                bus: Some("b1".into()),
                heat_node: Some("a".into()),
                polytope: chp_polytope(20.0, 30.0),
                ramp_electric: None,
                ramp_heat: None,
                cost: quadratic_cost([0.0, 15.0, 0.05, 6.0, 0.02, 0.0]),
                renewable: false,
            },
            EnergySource {
                id: "boiler_b".into(),
                bus: None,
                heat_node: Some("b".into()),
                polytope: heat_only_polytope(30.0),
                ramp_electric: None,
                ramp_heat: None,
                cost: quadratic_cost([0.0, 0.0, 0.0, 9.0, 0.01, 0.0]),
                renewable: false,
            },
        ],
        initial_temperatures: InitialTemperatures::Uniform(70.0),
    };
    let idx = inst.index().expect("y_instance is well-formed");
    (inst, idx)
}

/// Single source, single load, one pipe per side.
pub fn two_node_thermal(periods: usize) -> (DispatchInstance, NetworkIndex) {
    let nodes = vec![source_node("n1"), load_node("n2", 3.0.into())];
    let s = single_pipe("s1", "n1", "n2", 400.0, 0.02);
    let r = mirror(&s, "r1");
    let inst = DispatchInstance {
        horizon: Horizon { periods, dt: 3600.0, dx: 100.0 },
        physics: Physics { rho: 1000.0, cp: 4182.0 },
        heat_network: HeatNetwork {
            nodes,
            supply_pipes: vec![s],
            return_pipes: vec![r],
        },
        electric_network: ElectricNetwork {
            buses: vec![Bus { id: "b1".into(), demand: 4.0.into() }],
            lines: vec![],
            slack_bus: None,
        },
        sources: vec![EnergySource {
            id: "chp".into(),
            bus: Some("b1".into()),
            heat_node: Some("n1".into()),
            polytope: chp_polytope(20.0, 25.0),
            ramp_electric: None,
            ramp_heat: None,
            cost: quadratic_cost([0.0, 18.0, 0.04, 7.0, 0.02, 0.0]),
            renewable: false,
        }],
        initial_temperatures: InitialTemperatures::Uniform(70.0),
    };
    let idx = inst.index().expect("two_node_thermal is well-formed");
    (inst, idx)
}

/// Three heat nodes (one source, two loads in a chain), four periods by
/// default; used for envelope-gradient checks at an interior flow point.
pub fn three_node_instance(periods: usize) -> (DispatchInstance, NetworkIndex) {
    let mut inst = line_instance(3, periods);
    // generous temperature windows keep the optimum strictly interior
    for node in &mut inst.heat_network.nodes {
        node.supply_temp_min = Some(50.0);
        node.supply_temp_max = Some(130.0);
        node.return_temp_min = Some(20.0);
        node.return_temp_max = Some(90.0);
    }
    let idx = inst.index().expect("three_node_instance is well-formed");
    (inst, idx)
}
