//! The four subcommands. Each writes its files into `output.dir` and a
//! `manifest.json` recording the resolved configuration.

use std::cell::RefCell;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde_json::json;
use slabfv_core::io::{step_records, write_csv, write_vtk};
use slabfv_core::scheme::advance;
use slabfv_core::study::{self, StudyResult};
use slabfv_core::verify::{self, VerifyConfig};
use slabfv_core::Grid;

use crate::config::RunConfig;
use crate::CliError;

/// Files written and lines to print; `failure` is set when outputs were
/// kept but the command did not succeed.
#[derive(Debug)]
pub struct Outcome {
    pub files: Vec<PathBuf>,
    pub lines: Vec<String>,
    pub failure: Option<CliError>,
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let dir = cfg.output.dir.clone();
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn write_manifest(
    dir: &Path,
    command: &str,
    cfg: &RunConfig,
    extra: serde_json::Value,
    files: &[PathBuf],
    status: &str,
    started: Instant,
) -> Result<PathBuf, CliError> {
    let manifest = json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "status": status,
        "seed": cfg.seed,
        "threads": rayon::current_num_threads(),
        "config": cfg,
        "details": extra,
        "files": files.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
        "elapsed_seconds": started.elapsed().as_secs_f64(),
    });
    let path = dir.join("manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(path)
}

/// Advances the configured scenario, writing snapshots, the step table and
/// the manifest.
pub fn run(cfg: &RunConfig) -> Result<Outcome, CliError> {
    let started = Instant::now();
    cfg.validate()?;
    let dir = out_dir(cfg)?;
    let grid = Grid::new(cfg.grid_spec())?;
    let phys = cfg.phys();
    let num = cfg.numerics;
    let steps = cfg.n_steps()?;
    let dt = cfg.dt();
    let s0 = cfg.initial.state(&grid, &phys)?;

    let snapshot = |level: usize| dir.join(format!("{}_{level:06}.vtk", cfg.output.prefix));
    let files = RefCell::new(Vec::new());
    let io_error: RefCell<Option<CliError>> = RefCell::new(None);
    let dump = |state: &slabfv_core::State| {
        let p = snapshot(state.level);
        match write_vtk(&p, &grid, state, state.level as f64 * dt) {
            Ok(()) => files.borrow_mut().push(p),
            Err(e) => {
                io_error.borrow_mut().get_or_insert(e.into());
            }
        }
    };
    dump(&s0);
    let every = cfg.output.dump_every;
    let traj = advance(&grid, s0, steps, &phys, &num, |s, _| {
        if every > 0 && s.level % every == 0 {
            dump(s);
        }
    });
    let last = traj.final_state();
    if last.level > 0 && !(every > 0 && last.level % every == 0) {
        dump(last);
    }
    if let Some(e) = io_error.into_inner() {
        return Err(e);
    }
    let mut files = files.into_inner();

    let records = step_records(&grid, &traj, &phys, &num)?;
    let table = dir.join("diagnostics.csv");
    write_csv(&table, &records)?;
    files.push(table);

    let failure = traj
        .failure
        .as_ref()
        .map(|e| CliError::Solver(e.to_string()));
    let status = if failure.is_some() {
        "solver-failure"
    } else {
        "ok"
    };
    let extra = json!({
        "dt": dt,
        "steps_requested": steps,
        "steps_completed": traj.states.len() - 1,
        "newton_tol": num.newton_tol,
        "linear_tol": num.linear_tol,
        "failure": traj.failure.as_ref().map(|e| e.to_string()),
    });
    let manifest = write_manifest(&dir, "run", cfg, extra, &files, status, started)?;
    files.push(manifest);

    let first = &records[0];
    let final_row = records.last().expect("initial row");
    let lines = vec![
        format!(
            "steps {} of {}, dt = {dt}, status {status}",
            traj.states.len() - 1,
            steps
        ),
        format!(
            "mass {:.15e} -> {:.15e}, rho log rho defect {:.3e}",
            first.mass, final_row.mass, final_row.rho_log_rho_defect
        ),
        format!(
            "rho in [{:.6}, {:.6}], theta in [{:.6}, {:.6}], |u| <= {:.6}",
            final_row.rho_min,
            final_row.rho_max,
            final_row.theta_min,
            final_row.theta_max,
            final_row.u_max
        ),
    ];
    Ok(Outcome {
        files,
        lines,
        failure,
    })
}

/// Runs the operator identity suite.
pub fn verify_operators(cfg: &RunConfig, inject_wrong_ghost: bool) -> Result<Outcome, CliError> {
    let started = Instant::now();
    let dir = out_dir(cfg)?;
    let vc = VerifyConfig {
        seed: cfg.seed,
        trials: cfg.verify.trials,
        sizes: cfg.verify.sizes.iter().map(|s| (s[0], s[1])).collect(),
        tolerance: cfg.verify.tolerance,
        inject_wrong_ghost,
    };
    let report = verify::verify_operators(&vc)?;
    let rows = report.rows();
    let table = dir.join("verify.csv");
    write_csv(&table, &rows)?;
    let mut files = vec![table];
    let passed = report.passed();
    let extra = json!({ "inject_wrong_ghost": inject_wrong_ghost, "passed": passed });
    let status = if passed { "ok" } else { "verification-failure" };
    files.push(write_manifest(
        &dir,
        "verify-operators",
        cfg,
        extra,
        &files,
        status,
        started,
    )?);
    let lines = report
        .checks
        .iter()
        .map(|c| {
            let verdict = match (c.passed(), c.gating) {
                (true, _) => "PASS",
                (false, true) => "FAIL",
                (false, false) => "FAIL (informational)",
            };
            format!(
                "{:<34} d={} cells={:<6} max residual {:.3e}  {verdict}",
                c.name, c.dim, c.cells, c.max_residual
            )
        })
        .collect();
    let failure = (!passed).then(|| {
        let failed: Vec<&str> = report
            .checks
            .iter()
            .filter(|c| c.gating && !c.passed())
            .map(|c| c.name)
            .collect();
        CliError::Verification(failed.join(", "))
    });
    Ok(Outcome {
        files,
        lines,
        failure,
    })
}

fn level_failure(result: &StudyResult) -> Option<CliError> {
    let failed: Vec<String> = result
        .levels
        .iter()
        .filter_map(|l| l.failure.as_ref().map(|f| format!("n={}: {f}", l.n)))
        .collect();
    (!failed.is_empty()).then(|| CliError::Solver(failed.join("; ")))
}

/// Runs the refinement levels and tabulates every functional with its fitted order.
pub fn consistency_study(cfg: &RunConfig) -> Result<(Outcome, StudyResult), CliError> {
    let started = Instant::now();
    cfg.validate()?;
    cfg.validate_study()?;
    let dir = out_dir(cfg)?;
    let params = cfg.study_params();
    let result = study::consistency_study(&params)?;
    let rates = dir.join("rates.csv");
    write_csv(&rates, &result.rate_rows())?;
    let levels = dir.join("levels.csv");
    write_csv(&levels, &result.level_rows(cfg.numerics.alpha))?;
    let mut files = vec![rates, levels];
    let failure = level_failure(&result);
    let orders: serde_json::Map<String, serde_json::Value> = study::FUNCTIONALS
        .iter()
        .map(|f| (f.to_string(), json!(result.rate(f).ok().map(|r| r.order))))
        .collect();
    let extra = json!({ "orders": orders, "lions_differences": result.lions_differences() });
    let status = if failure.is_some() {
        "solver-failure"
    } else {
        "ok"
    };
    files.push(write_manifest(
        &dir,
        "consistency-study",
        cfg,
        extra,
        &files,
        status,
        started,
    )?);
    let mut lines: Vec<String> = study::FUNCTIONALS
        .iter()
        .map(|f| {
            let values: Vec<String> = result
                .levels
                .iter()
                .map(|l| format!("{:.3e}", l.value(f).unwrap_or(f64::NAN)))
                .collect();
            let order = result
                .rate(f)
                .map(|r| format!("{:.3}", r.order))
                .unwrap_or_else(|e| e.to_string());
            format!("{f:<24} order {order:<8} values {}", values.join(" "))
        })
        .collect();
    lines.push(format!(
        "lions |L_h - L_h/2|: {:?}",
        result.lions_differences()
    ));
    Ok((
        Outcome {
            files,
            lines,
            failure,
        },
        result,
    ))
}

/// Runs the refinement levels and tabulates the Cauchy differences of the final states.
pub fn refine_study(cfg: &RunConfig) -> Result<Outcome, CliError> {
    let started = Instant::now();
    cfg.validate()?;
    cfg.validate_study()?;
    let dir = out_dir(cfg)?;
    let params = cfg.study_params();
    let result = study::solve_levels(&params)?;
    let rows = study::refine_study(&params, &result)?;
    let table = dir.join("cauchy.csv");
    write_csv(&table, &rows)?;
    let mut files = vec![table];
    let failure = level_failure(&result);
    let status = if failure.is_some() {
        "solver-failure"
    } else {
        "ok"
    };
    files.push(write_manifest(
        &dir,
        "refine-study",
        cfg,
        json!({ "pairs": rows.len() }),
        &files,
        status,
        started,
    )?);
    let lines = rows
        .iter()
        .map(|r| {
            format!(
                "n={:<4} |rho_h - rho_h/2| {:.4e}  |u_h - u_h/2| {:.4e}  |theta_h - theta_h/2| {:.4e}",
                r.n_coarse, r.rho, r.u, r.theta
            )
        })
        .collect();
    Ok(Outcome {
        files,
        lines,
        failure,
    })
}
