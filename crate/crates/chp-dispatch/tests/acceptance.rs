//! End-to-end acceptance checks over the bundled instances. Each test
//! prints one pass/fail line.

use std::path::PathBuf;
use std::time::Instant;

use chp_dispatch::harness::{compare_modes, verify_solution};
use chp_dispatch::io::load_instance;
use chp_dispatch::master::{
    optimal_dispatch, projection_matrix, InitialFlows, MasterOptions,
};
use chp_dispatch::model::{
    DispatchInstance, FlowSchedule, HeatPipe, Physics, Profile,
};
use chp_dispatch::subproblem::{build_subproblem, SubOutcome};
use chp_dispatch::testutil::two_node_thermal;
use chp_dispatch::thermal::{
    midpoint_flows, pipe_coefficients, simulate_pipe, CoefficientForm,
};

fn instance_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../instances").join(name)
}

fn report(n: usize, name: &str, ok: bool) {
    println!("[{n}] {name}: {}", if ok { "pass" } else { "FAIL" });
    assert!(ok, "acceptance check {n} ({name}) failed");
}

fn test_pipe(resistance: f64) -> (HeatPipe, Physics) {
    let pipe = HeatPipe {
        id: "p".into(),
        from: "a".into(),
        to: "b".into(),
        length: 1000.0,
        area: 0.02,
        thermal_resistance: resistance,
        flow_min: Profile::Constant(1.0),
        flow_max: Profile::Constant(50.0),
        ambient: Profile::Constant(0.0),
        dx: None,
    };
    (pipe, Physics { rho: 1000.0, cp: 4182.0 })
}

/// Simulate with constant boundary conditions until the profile settles.
fn steady_profile(pipe: &HeatPipe, physics: &Physics, segments: usize, m: f64, inlet: f64) -> Vec<f64> {
    let periods = 400;
    let dx = pipe.length / segments as f64;
    let coeffs = pipe_coefficients(pipe, physics, 3600.0, dx, periods).unwrap();
    let field = simulate_pipe(
        &coeffs,
        CoefficientForm::Consistent,
        segments,
        &vec![m; periods],
        &vec![inlet; periods],
        &vec![inlet; segments + 1],
    )
    .unwrap();
    let settled = (0..=segments)
        .all(|i| (field.get(i, periods - 1) - field.get(i, periods - 2)).abs() < 1e-12);
    assert!(settled, "profile did not reach steady state");
    (0..=segments).map(|i| field.get(i, periods - 1)).collect()
}

#[test]
fn thermal_steady_state_vs_analytic() {
    let t0 = Instant::now();
    let (pipe, physics) = test_pipe(2.0);
    let m = 5.0;
    let inlet = 100.0;
    let decay = m * physics.cp * pipe.thermal_resistance;

    let max_rel_err = |segments: usize| -> f64 {
        let profile = steady_profile(&pipe, &physics, segments, m, inlet);
        let dx = pipe.length / segments as f64;
        profile
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let exact = inlet * (-(i as f64) * dx / decay).exp();
                ((v - exact) / exact).abs()
            })
            .fold(0.0f64, f64::max)
    };

    let e50 = max_rel_err(50);
    let e100 = max_rel_err(100);
    let e200 = max_rel_err(200);
    let ok = e50 <= 0.01 && e100 < e50 && e200 < e100 && t0.elapsed().as_secs_f64() < 1.0;
    report(1, "thermal scheme vs analytic steady state", ok);
}

#[test]
fn lossless_identity_and_ambient_fixed_point() {
    let t0 = Instant::now();
    let (mut pipe, physics) = test_pipe(1e30);
    let profile = steady_profile(&pipe, &physics, 50, 5.0, 100.0);
    let lossless_ok = profile.iter().all(|&v| (v - 100.0).abs() <= 1e-9);

    // every boundary at ambient: temperatures never leave ambient
    pipe.thermal_resistance = 2.0;
    let ambient = 10.0;
    pipe.ambient = Profile::Constant(ambient);
    let coeffs = pipe_coefficients(&pipe, &physics, 3600.0, 20.0, 30).unwrap();
    let field = simulate_pipe(
        &coeffs,
        CoefficientForm::Consistent,
        50,
        &vec![5.0; 30],
        &vec![ambient; 30],
        &vec![ambient; 51],
    )
    .unwrap();
    let ambient_ok = (0..=50).all(|i| (0..30).all(|t| field.get(i, t) == ambient));
    let ok = lossless_ok && ambient_ok && t0.elapsed().as_secs_f64() < 1.0;
    report(2, "lossless identity and ambient fixed point", ok);
}

#[test]
fn envelope_gradient_matches_finite_differences() {
    let t0 = Instant::now();
    let inst = load_instance(&instance_path("three_node.json")).unwrap();
    let idx = inst.index().unwrap();
    assert_eq!(inst.horizon.periods, 4);
    let prog = build_subproblem(&inst, &idx, CoefficientForm::Consistent).unwrap();
    let n = inst.horizon.periods;
    let m0 = midpoint_flows(&inst, &idx);

    let solve_at = |m: &[f64]| -> f64 {
        let flows = FlowSchedule::from_master(&idx, n, m);
        match prog.solve(&inst, &idx, &flows).unwrap() {
            SubOutcome::Optimal(sol) => sol.objective,
            SubOutcome::Infeasible => panic!("perturbed flow infeasible"),
        }
    };

    let flows = FlowSchedule::from_master(&idx, n, &m0);
    let SubOutcome::Optimal(sol) = prog.solve(&inst, &idx, &flows).unwrap() else {
        panic!("midpoint infeasible");
    };

    let mut worst = 0.0f64;
    for i in 0..m0.len() {
        let h = 1e-4 * m0[i].abs().max(1.0);
        let mut up = m0.clone();
        up[i] += h;
        let mut dn = m0.clone();
        dn[i] -= h;
        let fd = (solve_at(&up) - solve_at(&dn)) / (2.0 * h);
        // absolute floor: where the sensitivity vanishes both sides are solver
        // noise and a relative comparison is undefined
        let denom = fd.abs().max(1e-4);
        worst = worst.max((sol.gradient[i] - fd).abs() / denom);
    }
    let ok = worst <= 1e-3 && t0.elapsed().as_secs_f64() < 30.0;
    report(3, "envelope gradient vs central finite differences", ok);
}

#[test]
fn cut_value_equals_relaxed_optimum() {
    let t0 = Instant::now();
    // demand far above what the flow bounds can deliver makes the midpoint
    // schedule infeasible
    let (mut inst, _) = two_node_thermal(3);
    inst.heat_network.nodes[1].demand = Profile::Constant(60.0);
    let idx = inst.index().unwrap();
    let prog = build_subproblem(&inst, &idx, CoefficientForm::Consistent).unwrap();
    let m = midpoint_flows(&inst, &idx);
    let flows = FlowSchedule::from_master(&idx, inst.horizon.periods, &m);
    let outcome = prog.solve(&inst, &idx, &flows).unwrap();
    assert!(matches!(outcome, SubOutcome::Infeasible));
    let relaxed = prog.solve_relaxed(&flows).unwrap();
    let cut = prog.generate_cut(&idx, &relaxed, &flows).unwrap();
    let value = cut.value(&m);
    let ok = value > 0.0
        && (value - relaxed.objective).abs() <= 1e-6 * relaxed.objective.abs()
        && t0.elapsed().as_secs_f64() < 10.0;
    report(4, "cut separation at the generating flow", ok);
}

#[test]
fn projection_algebra() {
    let t0 = Instant::now();
    let mut state = 0x9e3779b97f4a7c15u64;
    let mut next = move || {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        (state >> 11) as f64 / (1u64 << 53) as f64
    };
    let mut ok = true;
    for _ in 0..100 {
        let dim = 3 + (next() * 18.0) as usize % 18; // <= 20
        let k = 1 + (next() * dim as f64) as usize % dim;
        let normals: Vec<Vec<f64>> = (0..k)
            .map(|_| (0..dim).map(|_| next() * 2.0 - 1.0).collect())
            .collect();
        let p = projection_matrix(&normals, dim);
        let idem = (&p * &p - &p).abs().max();
        let sym = (&p - p.transpose()).abs().max();
        let annihilate = normals
            .iter()
            .map(|a| {
                let v = nalgebra::DVector::from_column_slice(a);
                (&p * v).abs().max()
            })
            .fold(0.0f64, f64::max);
        ok &= idem <= 1e-10 && sym <= 1e-10 && annihilate <= 1e-10;
    }
    ok &= t0.elapsed().as_secs_f64() < 1.0;
    report(5, "projection algebra on random active sets", ok);
}

#[test]
fn convergence_bookkeeping_on_shipped_instances() {
    let mut ok = true;
    for name in ["three_node.json", "six_node.json", "six_node_96.json"] {
        let t0 = Instant::now();
        let inst = load_instance(&instance_path(name)).unwrap();
        let idx = inst.index().unwrap();
        let opts = MasterOptions::default();
        let res = optimal_dispatch(&inst, &idx, &opts).unwrap();
        // halts through one of the documented rules
        let trailing_infeasible = res
            .iterations
            .iter()
            .rev()
            .take_while(|l| l.objective.is_none())
            .count();
        ok &= res.converged
            || res.iterations.len() >= opts.max_iter
            || trailing_infeasible >= opts.infeasible_stop;
        // accepted costs nonincreasing
        let costs: Vec<f64> = res.iterations.iter().filter_map(|l| l.objective).collect();
        ok &= costs
            .windows(2)
            .all(|w| w[1] <= w[0] + 1e-9 * (1.0 + w[0].abs()));
        ok &= t0.elapsed().as_secs_f64() < 60.0;
    }
    report(6, "convergence bookkeeping on every shipped instance", ok);
}

fn comparison_options() -> MasterOptions {
    MasterOptions {
        gamma: 0.02,
        initial: InitialFlows::Max,
        ..MasterOptions::default()
    }
}

#[test]
fn cost_ordering_with_strict_gaps() {
    let t0 = Instant::now();
    let inst = load_instance(&instance_path("six_node.json")).unwrap();
    let idx = inst.index().unwrap();
    let report_ = compare_modes(&inst, &idx, &comparison_options()).unwrap();
    let mut ok = report_.ordering_ok
        && report_.fixed_gap_pct > 0.5
        && report_.separate_gap_pct > 0.5;

    // zero-width flow bounds collapse variable to fixed
    let mut degen = inst.clone();
    for p in degen
        .heat_network
        .supply_pipes
        .iter_mut()
        .chain(degen.heat_network.return_pipes.iter_mut())
    {
        let mid = 0.5 * (p.flow_min.at(0) + p.flow_max.at(0));
        p.flow_min = Profile::Constant(mid);
        p.flow_max = Profile::Constant(mid);
    }
    let didx = degen.index().unwrap();
    let dreport = compare_modes(&degen, &didx, &comparison_options()).unwrap();
    let rel = (dreport.variable.objective - dreport.fixed.objective).abs()
        / dreport.fixed.objective.abs().max(1e-12);
    ok &= rel <= 1e-6;
    ok &= t0.elapsed().as_secs_f64() < 120.0;
    report(7, "cost ordering with strict gaps and degenerate collapse", ok);
}

#[test]
fn verification_closure_on_all_modes() {
    let mut ok = true;
    for name in ["three_node.json", "six_node.json"] {
        let inst = load_instance(&instance_path(name)).unwrap();
        let idx = inst.index().unwrap();
        let cmp = compare_modes(&inst, &idx, &comparison_options()).unwrap();
        let prog = build_subproblem(&inst, &idx, CoefficientForm::Consistent).unwrap();
        for mode in [&cmp.variable, &cmp.fixed] {
            let flows = mode.flows.as_ref().unwrap();
            let sol = mode.solution.as_ref().unwrap();
            let rep = verify_solution(&inst, &idx, &prog, flows, sol).unwrap();
            ok &= rep.max_violation <= 1e-6;
        }
        ok &= separate_checks(&inst, &cmp.separate.p, &cmp.separate.h) <= 1e-6;
    }
    report(8, "verification closure for every feasible mode result", ok);
}

/// The separate baseline has no network solution; re-check its own program:
/// per-period heat balance, polytopes, ramps, electric balance, line limits.
fn separate_checks(inst: &DispatchInstance, p: &[f64], h: &[f64]) -> f64 {
    let idx = inst.index().unwrap();
    let n = inst.horizon.periods;
    let ns = inst.sources.len();
    let mut worst = 0.0f64;
    for t in 0..n {
        let heat_demand: f64 = inst
            .heat_network
            .nodes
            .iter()
            .map(|nd| nd.demand.at(t))
            .sum();
        let heat_gen: f64 = (0..ns).map(|i| h[i * n + t]).sum();
        worst = worst.max((heat_gen - heat_demand).abs());
        let elec_demand: f64 = inst
            .electric_network
            .buses
            .iter()
            .map(|b| b.demand.at(t))
            .sum();
        let elec_gen: f64 = (0..ns).map(|i| p[i * n + t]).sum();
        worst = worst.max((elec_gen - elec_demand).abs());
        for (i, src) in inst.sources.iter().enumerate() {
            for row in &src.polytope {
                let v = row.b * p[i * n + t] + row.k * h[i * n + t] - row.v.at(t);
                worst = worst.max(v);
            }
            if t > 0 {
                if let Some(r) = src.ramp_heat {
                    let d = h[i * n + t] - h[i * n + t - 1];
                    worst = worst.max(d - r.up * inst.horizon.dt);
                    worst = worst.max(r.down * inst.horizon.dt - d);
                }
                if let Some(r) = src.ramp_electric {
                    let d = p[i * n + t] - p[i * n + t - 1];
                    worst = worst.max(d - r.up * inst.horizon.dt);
                    worst = worst.max(r.down * inst.horizon.dt - d);
                }
            }
        }
        for (l, line) in inst.electric_network.lines.iter().enumerate() {
            let mut flow = 0.0;
            for (b, bus) in inst.electric_network.buses.iter().enumerate() {
                let mut inj = -bus.demand.at(t);
                for &i in &idx.sources_at_bus[b] {
                    inj += p[i * n + t];
                }
                flow += idx.shift_factors[(l, b)] * inj;
            }
            worst = worst.max(flow.abs() - line.limit.at(t));
        }
    }
    worst
}

#[test]
fn desk_scale_performance() {
    let inst = load_instance(&instance_path("six_node_96.json")).unwrap();
    let idx = inst.index().unwrap();
    assert_eq!(inst.horizon.periods, 96);
    let t0 = Instant::now();
    let res = optimal_dispatch(&inst, &idx, &comparison_options()).unwrap();
    let elapsed = t0.elapsed().as_secs_f64();
    let ok = elapsed < 60.0 && res.objective.is_finite();
    report(9, "96-period variable-flow solve under 60 s", ok);
}
