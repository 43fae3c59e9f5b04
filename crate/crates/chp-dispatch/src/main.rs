//! Command-line front end: dispatch runs, forward simulation, and the
//! three-way mode comparison. All artifacts land in the output directory;
//! exit code 0 means a feasible dispatch, 2 a proven-infeasible one, 1 any
//! other failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use chp_dispatch::harness::{
    compare_modes, fixed_flow_dispatch, separate_dispatch, variable_dispatch, ModeReport,
};
use chp_dispatch::io as artifacts;
use chp_dispatch::master::{InitialFlows, MasterOptions};
use chp_dispatch::model::{DispatchInstance, FlowSchedule, NetworkIndex, POWER_SCALE};
use chp_dispatch::subproblem::build_subproblem;
use chp_dispatch::thermal::{simulate_network, CoefficientForm};
use chp_dispatch::{Error, Result};

#[derive(Parser)]
#[command(name = "chp-dispatch", version, about = "Optimal dispatch for combined heat and power systems with variable mass flow")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve one dispatch mode and write its artifacts.
    Run(RunArgs),
    /// Forward-simulate the network at given flows and boundary temperatures.
    Simulate(SimulateArgs),
    /// Solve all three modes and write the comparison.
    Compare(CompareArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Variable,
    Fixed,
    Separate,
    Compare,
}

#[derive(Args)]
struct CommonArgs {
    /// Instance file (JSON, powers in watts).
    #[arg(long)]
    instance: PathBuf,
    /// Output directory for all artifacts.
    #[arg(long, env = "CHP_DISPATCH_OUT", default_value = "out")]
    out: PathBuf,
    /// Override the default pipe segment length, meters.
    #[arg(long)]
    dx: Option<f64>,
}

#[derive(Args)]
struct SolverArgs {
    /// Master step-size factor gamma.
    #[arg(long)]
    gamma: Option<f64>,
    /// Relative objective-change convergence threshold delta.
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    max_iter: Option<usize>,
    /// Stop after this many consecutive infeasible master iterations.
    #[arg(long)]
    infeasible_stop: Option<usize>,
    /// Starting point of the flow search.
    #[arg(long, value_enum, default_value = "midpoint")]
    initial_flows: InitialArg,
    /// Use the printed pipe coefficient placement instead of the consistent
    /// one.
    #[arg(long)]
    paper_literal_coefficients: bool,
    /// Use the printed step-size sign (ascent direction).
    #[arg(long)]
    paper_literal_stepsize: bool,
    /// Dump the final sub-problem in LP format.
    #[arg(long)]
    dump_lp: bool,
    /// Write extra per-period CSVs for plotting.
    #[arg(long)]
    emit_plots: bool,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long, value_enum, default_value = "variable")]
    mode: ModeArg,
    /// Flow schedule CSV for the fixed mode (default: projected midpoint).
    #[arg(long)]
    flows: Option<PathBuf>,
    #[command(flatten)]
    solver: SolverArgs,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Flow schedule CSV (pipe,period,kg_per_s).
    #[arg(long)]
    flows: PathBuf,
    /// Boundary temperature CSV (node,period,temp_c): supply injection at
    /// sources, return injection at loads.
    #[arg(long)]
    source_temps: PathBuf,
    #[arg(long)]
    paper_literal_coefficients: bool,
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    solver: SolverArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum InitialArg {
    Midpoint,
    Max,
    Min,
}

fn master_options(args: &SolverArgs) -> MasterOptions {
    let mut opts = MasterOptions::default();
    opts.initial = match args.initial_flows {
        InitialArg::Midpoint => InitialFlows::Midpoint,
        InitialArg::Max => InitialFlows::Max,
        InitialArg::Min => InitialFlows::Min,
    };
    if let Some(v) = args.gamma {
        opts.gamma = v;
    }
    if let Some(v) = args.delta {
        opts.delta = v;
    }
    if let Some(v) = args.max_iter {
        opts.max_iter = v;
    }
    if let Some(v) = args.infeasible_stop {
        opts.infeasible_stop = v;
    }
    if args.paper_literal_coefficients {
        opts.form = CoefficientForm::PaperLiteral;
    }
    opts.paper_literal_stepsize = args.paper_literal_stepsize;
    opts
}

fn load(common: &CommonArgs) -> Result<(DispatchInstance, NetworkIndex)> {
    let mut inst = artifacts::load_instance(&common.instance)?;
    if let Some(dx) = common.dx {
        if dx <= 0.0 {
            return Err(Error::Instance("dx override must be positive".into()));
        }
        inst.horizon.dx = dx;
    }
    let idx = inst.index()?;
    Ok((inst, idx))
}

/// All per-mode artifacts: result.json, iterations.csv, schedules.csv,
/// storage_proxy.csv, and the network files when a network solution exists.
fn write_mode_artifacts(
    dir: &Path,
    inst: &DispatchInstance,
    idx: &NetworkIndex,
    report: &ModeReport,
    emit_plots: bool,
) -> Result<()> {
    artifacts::write_result_json(&dir.join("result.json"), report)?;
    artifacts::write_iterations_csv(&dir.join("iterations.csv"), &report.iterations)?;
    artifacts::write_schedules_csv(&dir.join("schedules.csv"), inst, report)?;
    artifacts::write_storage_proxy_csv(&dir.join("storage_proxy.csv"), inst, report)?;
    if let (Some(flows), Some(sol)) = (&report.flows, &report.solution) {
        artifacts::write_flows_csv(&dir.join("flows.csv"), inst, flows)?;
        artifacts::write_temperatures_csv(&dir.join("temperatures.csv"), inst, idx, sol)?;
        artifacts::write_delivered_heat_csv(
            &dir.join("delivered_heat.csv"),
            inst,
            idx,
            flows,
            sol,
        )?;
        artifacts::write_source_temps_csv(&dir.join("source_temps.csv"), inst, sol)?;
    }
    if emit_plots {
        write_plots(&dir.join("plots"), inst, report)?;
    }
    Ok(())
}

fn write_plots(dir: &Path, inst: &DispatchInstance, report: &ModeReport) -> Result<()> {
    use std::io::Write;
    std::fs::create_dir_all(dir)?;
    let n = inst.horizon.periods;
    let ns = inst.sources.len();

    let mut f = std::fs::File::create(dir.join("generation_vs_load.csv"))?;
    writeln!(
        f,
        "period,heat_generation_w,heat_load_w,electric_generation_w,electric_load_w"
    )?;
    for t in 0..n {
        let hg: f64 = (0..ns).map(|i| report.h[i * n + t]).sum();
        let hl: f64 = inst
            .heat_network
            .nodes
            .iter()
            .map(|nd| nd.demand.at(t))
            .sum();
        let pg: f64 = (0..ns).map(|i| report.p[i * n + t]).sum();
        let pl: f64 = inst
            .electric_network
            .buses
            .iter()
            .map(|b| b.demand.at(t))
            .sum();
        writeln!(
            f,
            "{t},{},{},{},{}",
            hg / POWER_SCALE,
            hl / POWER_SCALE,
            pg / POWER_SCALE,
            pl / POWER_SCALE
        )?;
    }

    // electric-only sources stand in for grid purchases
    let mut f = std::fs::File::create(dir.join("grid_purchase.csv"))?;
    writeln!(f, "period,source,p_w")?;
    for (i, src) in inst.sources.iter().enumerate() {
        if src.heat_node.is_some() || src.renewable {
            continue;
        }
        for t in 0..n {
            writeln!(f, "{t},{},{}", src.id, report.p[i * n + t] / POWER_SCALE)?;
        }
    }
    Ok(())
}

fn run(args: &RunArgs) -> Result<()> {
    let (inst, idx) = load(&args.common)?;
    let opts = master_options(&args.solver);
    let out = &args.common.out;

    if args.mode == ModeArg::Compare {
        return compare(&inst, &idx, &opts, out, &args.solver);
    }

    let prog = build_subproblem(&inst, &idx, opts.form)?;
    let report = match args.mode {
        ModeArg::Variable => variable_dispatch(&inst, &idx, &prog, &opts)?,
        ModeArg::Fixed => {
            let master_flows = match &args.flows {
                Some(path) => {
                    let schedule =
                        artifacts::read_flows_csv(path, &inst, inst.horizon.periods)?;
                    Some(schedule.supply)
                }
                None => None,
            };
            fixed_flow_dispatch(&inst, &idx, &prog, master_flows.as_deref())?
        }
        ModeArg::Separate => separate_dispatch(&inst, &idx)?,
        ModeArg::Compare => unreachable!(),
    };
    write_mode_artifacts(out, &inst, &idx, &report, args.solver.emit_plots)?;
    if args.solver.dump_lp {
        if let Some(flows) = &report.flows {
            let qp = prog.materialize(flows);
            let mut f = std::fs::File::create(out.join("model.lp"))?;
            qp.write_lp(&mut f, "dispatch sub-problem at final flows")?;
        }
    }
    println!(
        "{}: cost {:.4} $, {} iterations, converged = {}",
        report.mode.label(),
        report.objective,
        report.iterations.len(),
        report.converged
    );
    Ok(())
}

fn compare(
    inst: &DispatchInstance,
    idx: &NetworkIndex,
    opts: &MasterOptions,
    out: &Path,
    solver: &SolverArgs,
) -> Result<()> {
    let report = compare_modes(inst, idx, opts)?;
    artifacts::write_comparison_csv(&out.join("comparison.csv"), &report)?;
    for mode in [&report.variable, &report.fixed, &report.separate] {
        write_mode_artifacts(
            &out.join(mode.mode.label()),
            inst,
            idx,
            mode,
            solver.emit_plots,
        )?;
    }
    artifacts::write_result_json(&out.join("result.json"), &report.variable)?;
    println!(
        "variable {:.4} $ | fixed {:.4} $ (+{:.2}%) | separate {:.4} $ (+{:.2}%)",
        report.variable.objective,
        report.fixed.objective,
        report.fixed_gap_pct,
        report.separate.objective,
        report.separate_gap_pct
    );
    Ok(())
}

fn simulate(args: &SimulateArgs) -> Result<()> {
    let (inst, idx) = load(&args.common)?;
    let n = inst.horizon.periods;
    let master = artifacts::read_flows_csv(&args.flows, &inst, n)?;
    let flows = FlowSchedule {
        periods: n,
        supply: master.supply,
        return_: master.return_,
    };
    let boundary = artifacts::read_source_temps_csv(&args.source_temps, &inst, &idx, n)?;
    let form = if args.paper_literal_coefficients {
        CoefficientForm::PaperLiteral
    } else {
        CoefficientForm::Consistent
    };
    let sim = simulate_network(&inst, &idx, &flows, &boundary, form)?;
    let out = &args.common.out;
    artifacts::write_sim_temperatures_csv(&out.join("temperatures.csv"), &inst, &sim)?;
    artifacts::write_sim_delivered_heat_csv(&out.join("delivered_heat.csv"), &inst, &sim)?;
    println!("simulated {n} periods over {} nodes", idx.n_nodes());
    Ok(())
}

fn out_dir(cli: &Cli) -> PathBuf {
    match &cli.command {
        Command::Run(a) => a.common.out.clone(),
        Command::Simulate(a) => a.common.out.clone(),
        Command::Compare(a) => a.common.out.clone(),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(args) => run(args),
        Command::Simulate(args) => simulate(args),
        Command::Compare(args) => {
            let inner = RunArgs {
                common: CommonArgs {
                    instance: args.common.instance.clone(),
                    out: args.common.out.clone(),
                    dx: args.common.dx,
                },
                mode: ModeArg::Compare,
                flows: None,
                solver: SolverArgs {
                    gamma: args.solver.gamma,
                    delta: args.solver.delta,
                    max_iter: args.solver.max_iter,
                    infeasible_stop: args.solver.infeasible_stop,
                    initial_flows: args.solver.initial_flows,
                    paper_literal_coefficients: args.solver.paper_literal_coefficients,
                    paper_literal_stepsize: args.solver.paper_literal_stepsize,
                    dump_lp: args.solver.dump_lp,
                    emit_plots: args.solver.emit_plots,
                },
            };
            run(&inner)
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let _ = artifacts::write_error_json(&out_dir(&cli).join("error.json"), &err);
            eprintln!("error: {err}");
            let proven_infeasible = matches!(&err, Error::Infeasible)
                || matches!(&err, Error::Instance(msg) if msg.contains("infeasible"));
            if proven_infeasible {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
