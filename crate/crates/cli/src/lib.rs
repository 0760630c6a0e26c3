//! Batch front-end for the `emfg` binary.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod problem;

use std::ffi::OsString;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde_json::json;

use emfg_core::analytic::{lq_coefficients, lq_solve, quartic_solve};
use emfg_core::diagnostics::{
    check_l_monotone, check_psi_monotone, check_v_monotone, second_derivative_min, MonotonicityReport,
};
use emfg_core::ensemble::fmt_f64;
use emfg_core::family::Family;
use emfg_core::flow::{gronwall_report, separation_diagnostic, TrajectoryEnsemble};
use emfg_core::hjb::ValueGrid;
use emfg_core::mfg::{
    master_probes, master_values, solve_mfg, uniqueness_probe, write_residuals, Discretization, MfgSolution,
    ProbeStatus,
};
use emfg_core::{MfgError, PairedEnsemble, Result};

use problem::{parse_problem, Built, Problem};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Fixed-point solve; writes the solution bundle.
    Solve,
    /// Closed-form reference for lq and quartic problems on the solver grid.
    Oracle,
    /// Monte Carlo monotonicity checks of V, ψ and L.
    Check,
    /// Solve, then compare `u` with restarted solves at random probes.
    Master,
    /// Solve from several random initial slices and compare the fixed points.
    ProbeUniqueness,
}

#[derive(Debug, Clone, Parser)]
#[command(name = "emfg", version, about = "Extended deterministic mean-field game solver")]
pub struct RunConfig {
    #[command(subcommand)]
    pub command: Command,
    /// Problem file (JSON).
    #[arg(long, global = true, default_value = "problem.json")]
    pub config: PathBuf,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// `key.path=value`, applied to the problem document before parsing.
    #[arg(long = "override", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Success,
    NotConverged,
}

impl Outcome {
    pub fn exit_code(self) -> i32 {
        match self {
            Outcome::Success => 0,
            Outcome::NotConverged => 2,
        }
    }
}

/// Parses arguments, runs, prints any error as one `ERROR <code>: <message>`
/// line on stderr and returns the exit code.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cfg = match RunConfig::try_parse_from(args) {
        Ok(cfg) => cfg,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return 0;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("ERROR usage: {first}");
            return 1;
        }
    };
    match run(&cfg) {
        Ok(outcome) => outcome.exit_code(),
        Err(e) => {
            eprintln!("ERROR {}: {}", e.code(), one_line(&e.to_string()));
            1
        }
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

pub fn run(cfg: &RunConfig) -> Result<Outcome> {
    let problem = parse_problem(&cfg.config, &cfg.overrides)?;
    let base = cfg.config.parent().unwrap_or(Path::new("."));
    let built = problem.build(base)?;
    fs::create_dir_all(&cfg.out)?;
    log::info!("{:?} on {} with {} samples", cfg.command, cfg.config.display(), built.initial.len());
    match cfg.command {
        Command::Solve => run_solve(&problem, &built, &cfg.out),
        Command::Oracle => run_oracle(&problem, &built, &cfg.out),
        Command::Check => run_check(&problem, &built, &cfg.out, cfg.seed),
        Command::Master => run_master(&problem, &built, &cfg.out, cfg.seed),
        Command::ProbeUniqueness => run_probe(&problem, &built, &cfg.out, cfg.seed),
    }
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    Ok(BufWriter::new(fs::File::create(path)?))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn write_two_columns(path: &Path, header: [&str; 2], rows: impl IntoIterator<Item = (f64, f64)>) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(header)?;
    for (a, b) in rows {
        w.write_record([fmt_f64(a), fmt_f64(b)])?;
    }
    w.flush()?;
    Ok(())
}

fn problem_echo(problem: &Problem) -> serde_json::Value {
    serde_json::to_value(problem).expect("problem serializes")
}

/// `plot/`: two-column CSVs of `u(·, 0)`, the mean path and the residual history.
fn write_plots(out: &Path, value: &ValueGrid, traj: &TrajectoryEnsemble, residuals: &[(usize, f64)]) -> Result<()> {
    let dir = out.join("plot");
    fs::create_dir_all(&dir)?;
    write_two_columns(
        &dir.join("u_vs_x_at_t0.csv"),
        ["x", "u"],
        value.space.nodes_iter().zip(value.values[0].iter().copied()),
    )?;
    write_two_columns(
        &dir.join("mean_trajectory.csv"),
        ["t", "mean_x"],
        traj.time.times().zip(traj.mean_path().into_iter().map(|m| m[0])),
    )?;
    let mut w = csv::Writer::from_writer(create(&dir.join("residuals.csv"))?);
    w.write_record(["iter", "phi_residual"])?;
    for (i, r) in residuals {
        w.write_record([i.to_string(), fmt_f64(*r)])?;
    }
    w.flush()?;
    Ok(())
}

fn write_solution(problem: &Problem, sol: &MfgSolution, out: &Path, wall: f64) -> Result<()> {
    sol.write_bundle(out, &problem_echo(problem), wall)?;
    let residuals: Vec<(usize, f64)> = sol.residual_history.iter().map(|r| (r.iter, r.phi_residual)).collect();
    write_plots(out, &sol.value, &sol.traj, &residuals)?;
    let t1 = 0.9 * sol.traj.time.end;
    let separation = separation_diagnostic(&sol.traj, Some(t1))?;
    let gronwall = gronwall_report(&sol.traj)?;
    write_json(
        &out.join("diagnostics.json"),
        &json!({
            "regularity": sol.regularity_history,
            "separation": {
                "t1": t1,
                "min_ratio": separation.min_ratio,
                "pair": separation.pair,
                "time_index": separation.time_index,
                "excluded_pairs": separation.excluded_pairs,
            },
            "gronwall": {
                "constant": gronwall.constant,
                "half_horizon_constant": gronwall.half_horizon_constant,
                "excess": gronwall.excess,
            },
            "saturation": sol.value.saturation,
        }),
    )
}

fn converged(sol: &MfgSolution) -> Outcome {
    if sol.converged {
        Outcome::Success
    } else {
        let r = sol.final_residual();
        log::warn!(
            "fixed point not reached after {} iterations (phi residual {:.3e}, trajectory residual {:.3e})",
            sol.residual_history.len(),
            r.phi_residual,
            r.traj_residual
        );
        Outcome::NotConverged
    }
}

fn run_solve(problem: &Problem, built: &Built, out: &Path) -> Result<Outcome> {
    let start = Instant::now();
    let sol = solve_mfg(&built.family, &built.initial, &built.config)?;
    write_solution(problem, &sol, out, start.elapsed().as_secs_f64())?;
    Ok(converged(&sol))
}

/// The closed-form reference sampled on the grid the solver would use.
pub fn oracle_grid(built: &Built) -> Result<(ValueGrid, TrajectoryEnsemble, Vec<u8>)> {
    let (fam, x0, cfg) = (&built.family, &built.initial, &built.config);
    let disc = Discretization::resolve(fam, x0, cfg)?;
    let space = disc.space;
    let mut coefficients = Vec::new();
    let (values, gradient, traj): (Vec<Vec<f64>>, Vec<Vec<f64>>, TrajectoryEnsemble) = match &fam.family {
        Family::Quartic(coeffs) => {
            let (state, traj) = quartic_solve(coeffs, x0, cfg.horizon, cfg.steps)?;
            state.write_coefficients_csv(&mut coefficients)?;
            let values = (0..=cfg.steps).map(|m| space.nodes_iter().map(|x| state.value(x, m)).collect()).collect();
            let gradient = state.p.iter().map(|p| space.nodes_iter().map(|x| 4.0 * p * x.powi(3)).collect()).collect();
            (values, gradient, traj)
        }
        _ => {
            let coeffs = match &fam.family {
                Family::Lq(c) => c.clone(),
                _ => lq_coefficients(fam, 1).ok_or_else(|| {
                    MfgError::InvalidConfig(
                        "no closed-form reference for this problem; use family lq or quartic".into(),
                    )
                })?,
            };
            let (state, traj) = lq_solve(&coeffs, fam.beta, x0, cfg.horizon, cfg.steps)?;
            state.write_coefficients_csv(&mut coefficients)?;
            let values = (0..=cfg.steps).map(|m| space.nodes_iter().map(|x| state.value(&[x], m)).collect()).collect();
            let gradient =
                (0..=cfg.steps).map(|m| space.nodes_iter().map(|x| state.gradient(&[x], m)[0]).collect()).collect();
            (values, gradient, traj)
        }
    };
    let grid = ValueGrid { space, time: disc.time, values, gradient, v_max: disc.v_max, saturation: 0.0 };
    Ok((grid, traj, coefficients))
}

fn run_oracle(problem: &Problem, built: &Built, out: &Path) -> Result<Outcome> {
    let start = Instant::now();
    let (grid, traj, coefficients) = oracle_grid(built)?;
    grid.write_csv(create(&out.join("value.csv"))?)?;
    traj.write_csv(create(&out.join("trajectory.csv"))?)?;
    fs::write(out.join("coefficients.csv"), coefficients)?;
    write_residuals(&[], create(&out.join("residuals.csv"))?)?;
    write_plots(out, &grid, &traj, &[])?;
    write_json(
        &out.join("meta.json"),
        &json!({
            "config": problem_echo(problem),
            "oracle": true,
            "converged": true,
            "domain": [grid.space.lo, grid.space.hi],
            "wall_time_seconds": start.elapsed().as_secs_f64(),
        }),
    )?;
    Ok(Outcome::Success)
}

fn run_check(problem: &Problem, built: &Built, out: &Path, seed: u64) -> Result<Outcome> {
    let section = problem.check.clone().unwrap_or_default();
    let fam = &built.family;
    let reports: Vec<(&str, MonotonicityReport)> = vec![
        ("potential", check_v_monotone(&fam.potential, 1, section.trials, seed)?),
        ("terminal", check_psi_monotone(&fam.terminal, 1, section.trials, seed)?),
        ("lagrangian", check_l_monotone(fam, 1, section.trials, seed)?),
    ];
    let mut summary = serde_json::Map::new();
    for (name, report) in &reports {
        report.write(&out.join(name))?;
        summary.insert(
            name.to_string(),
            json!({ "verdict": report.verdict, "min_value": report.min_value, "note": report.note }),
        );
    }
    if section.directions > 0 {
        let probe = PairedEnsemble::new(built.initial.clone(), built.initial.zeros_like())?;
        let min = second_derivative_min(fam, &probe, section.directions, seed)?;
        summary.insert("second_derivative_min".into(), json!(min));
    }
    summary.insert("trials".into(), json!(section.trials));
    summary.insert("seed".into(), json!(seed));
    write_json(&out.join("summary.json"), &serde_json::Value::Object(summary))?;
    for (name, report) in &reports {
        println!("{name}: {:?} (min {:.6e})", report.verdict, report.min_value);
    }
    Ok(Outcome::Success)
}

fn run_master(problem: &Problem, built: &Built, out: &Path, seed: u64) -> Result<Outcome> {
    let (fam, cfg) = (&built.family, &built.config);
    let start = Instant::now();
    let sol = solve_mfg(fam, &built.initial, cfg)?;
    write_solution(problem, &sol, out, start.elapsed().as_secs_f64())?;
    let count = problem.master.clone().unwrap_or_default().probes;
    let probes = master_probes(&sol, count, seed);
    let disc =
        Discretization { time: sol.value.time, space: sol.value.space, v_max: sol.value.v_max, controls: cfg.controls };
    let mut times: Vec<usize> = probes.iter().map(|p| p.time_index).collect();
    times.sort_unstable();
    times.dedup();
    let mut master = vec![f64::NAN; probes.len()];
    for m in times {
        let idx: Vec<usize> = (0..probes.len()).filter(|&k| probes[k].time_index == m).collect();
        let xs: Vec<f64> = idx.iter().map(|&k| probes[k].x).collect();
        for (k, v) in idx.into_iter().zip(master_values(fam, &xs, &sol.traj.states[m], m, cfg, &disc)?) {
            master[k] = v;
        }
    }
    let mut w = csv::Writer::from_writer(create(&out.join("master.csv"))?);
    w.write_record(["t", "x", "u", "master", "gap"])?;
    let mut worst = 0.0f64;
    for (p, &v) in probes.iter().zip(&master) {
        let u = sol.value_at(p.x, p.time_index);
        worst = worst.max((u - v).abs());
        w.write_record([sol.value.time.time(p.time_index), p.x, u, v, (u - v).abs()].map(fmt_f64))?;
    }
    w.flush()?;
    write_json(&out.join("master.json"), &json!({ "probes": probes.len(), "seed": seed, "max_gap": worst }))?;
    println!("master consistency residual {worst:.6e} over {} probes", probes.len());
    Ok(converged(&sol))
}

fn run_probe(problem: &Problem, built: &Built, out: &Path, seed: u64) -> Result<Outcome> {
    let runs = problem.probe.clone().unwrap_or_default().runs;
    let report = uniqueness_probe(&built.family, &built.initial, &built.config, runs, seed)?;
    write_json(
        &out.join("uniqueness.json"),
        &json!({
            "status": report.status,
            "max_distance": report.max_distance,
            "tol_fix": built.config.tol_fix,
            "converged": report.converged,
            "iterations": report.iterations,
            "seed": seed,
        }),
    )?;
    println!("uniqueness probe: {:?}, max distance {:.6e}", report.status, report.max_distance);
    Ok(match report.status {
        ProbeStatus::Conclusive => Outcome::Success,
        ProbeStatus::Inconclusive => Outcome::NotConverged,
    })
}
