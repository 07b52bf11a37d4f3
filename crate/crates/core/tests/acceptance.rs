//! Acceptance suite. Runs every criterion at its stated tolerance and prints
//! one PASS/FAIL line per criterion, followed by indented details.
//!
//! Built with `harness = false`; the process exits non-zero if any criterion
//! fails.

use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use slabfv_core::diagnostics::{
    cell_integrals, lions_pair, renormalized_terms, rho_log_rho_defect, Diagnostics,
    Renormalization, Run, StabilityReport,
};
use slabfv_core::fields::Vec3;
use slabfv_core::io::{step_records, write_csv};
use slabfv_core::scheme::{
    advance, assemble_jacobian, assemble_with_flags, constant_state, upwind_flags, CsrMatrix,
};
use slabfv_core::study::{self, StudyParams, StudyResult};
use slabfv_core::verify::{self, VerifyConfig};
use slabfv_core::{BoundaryTemperature, Grid, GridSpec, InitialData, NumParams, PhysParams, State};

struct Verdict {
    passed: bool,
    summary: String,
    details: Vec<String>,
}

impl Verdict {
    fn new(passed: bool, summary: impl Into<String>, details: Vec<String>) -> Self {
        Self {
            passed,
            summary: summary.into(),
            details,
        }
    }
}

fn phys(dim: usize, g: f64, theta_b: BoundaryTemperature) -> PhysParams {
    let mut gravity = [0.0; 3];
    gravity[dim - 1] = g;
    PhysParams {
        mu: 0.1,
        eta: 0.0,
        kappa: 0.1,
        c_v: 1.5,
        gravity,
        theta_b,
    }
}

fn operator_identities() -> Verdict {
    let started = Instant::now();
    let cfg = VerifyConfig::default();
    let report = verify::verify_operators(&cfg).expect("identity suite runs");
    let elapsed = started.elapsed().as_secs_f64();
    let mut details = Vec::new();
    let mut failed = Vec::new();
    for c in &report.checks {
        let ok = c.passed();
        if !ok && !c.expect_failure {
            failed.push(format!("{} ({}d, {} cells)", c.name, c.dim, c.cells));
        }
        let note = if c.expect_failure {
            "  (must exceed tolerance)"
        } else {
            ""
        };
        details.push(format!(
            "{:<34} d={} cells={:<6} trials={} max residual {:.3e}  {}{note}",
            c.name,
            c.dim,
            c.cells,
            c.trials,
            c.max_residual,
            if ok { "ok" } else { "FAILED" }
        ));
    }
    details.push(format!("runtime {elapsed:.1} s (limit 60 s)"));
    let in_time = elapsed <= 60.0;
    let passed = failed.is_empty() && in_time;
    let summary = if passed {
        format!(
            "operator identities at {:.0e}, {:.1} s",
            cfg.tolerance, elapsed
        )
    } else if !in_time {
        format!(
            "runtime {elapsed:.1} s exceeds 60 s; failing: {}",
            failed.join(", ")
        )
    } else {
        format!(
            "identities above {:.0e}: {}",
            cfg.tolerance,
            failed.join(", ")
        )
    };
    Verdict::new(passed, summary, details)
}

fn fixed_point() -> Verdict {
    let mut details = Vec::new();
    let mut passed = true;
    for (dim, n) in [(2, 16), (3, 8)] {
        let grid = Grid::new(GridSpec::unit(dim, n)).unwrap();
        let p = phys(dim, 0.0, BoundaryTemperature::constant(0.9));
        let num = NumParams::default();
        let s0 = constant_state(&grid, 1.3, 0.9);
        let traj = advance(&grid, s0.clone(), 10, &p, &num, |_, _| {});
        assert!(traj.is_complete(), "{:?}", traj.failure);
        let mut drift = 0.0f64;
        for s in &traj.states {
            for c in 0..grid.cell_count() {
                drift = drift.max((s.rho[c] - s0.rho[c]).abs());
                drift = drift.max((s.theta[c] - s0.theta[c]).abs());
                for j in 0..dim {
                    drift = drift.max((s.u[c][j] - s0.u[c][j]).abs());
                }
            }
        }
        let final_time = 10.0 * traj.dt;
        let mut values = study::evaluate_level(&grid, &traj, &p, &num, final_time).unwrap();
        // L_h itself is rho^2 theta times the integral of psi phi here; its
        // commutation defect is what vanishes
        let (psi, phi) = lions_pair(&grid, final_time);
        let mut pairing = 0.0;
        for k in 1..=10 {
            let tm = traj.dt * (k as f64 - 0.5);
            pairing += traj.dt
                * cell_integrals(&grid, &|x: &Vec3| psi(tm, x) * phi(tm, x))
                    .iter()
                    .sum::<f64>();
        }
        let raw_lions = values
            .iter()
            .find(|(n, _)| *n == study::LIONS)
            .map(|(_, v)| *v)
            .unwrap();
        for (n, v) in values.iter_mut() {
            if *n == study::LIONS {
                *v -= 1.3 * 1.3 * 0.9 * pairing;
            }
        }
        let diag = Diagnostics::new(Run {
            grid: &grid,
            traj: &traj,
            phys: &p,
            num: &num,
        })
        .unwrap();
        let st = diag.stability();
        values.extend([
            ("grad_theta", st.grad_theta),
            ("grad_u", st.grad_u),
            ("time_increments", st.time_increments),
            ("jump_dissipation", st.jump_dissipation),
            ("boundary_mismatch", st.boundary_mismatch),
            ("edge_grad_u", st.edge_grad_u),
        ]);
        let rll = rho_log_rho_defect(&grid, &traj).unwrap();
        values.push((
            "rho_log_rho",
            rll.iter().fold(0.0f64, |m, v| m.max(v.abs())),
        ));
        let worst = values.iter().fold(
            ("", 0.0f64),
            |w, (n, v)| if v.abs() > w.1 { (n, v.abs()) } else { w },
        );
        let ok = drift <= 1e-12 && worst.1 <= 1e-10;
        passed &= ok;
        details.push(format!(
            "d={dim} n={n}: state change {drift:.2e} (limit 1e-12), largest functional {} = {:.2e} (limit 1e-10) over {} functionals",
            if worst.0.is_empty() { "-" } else { worst.0 },
            worst.1,
            values.len()
        ));
        details.push(format!(
            "d={dim} n={n}: L_h = {raw_lions:.6e}, rho^2 theta times the psi phi pairing = {:.6e}",
            1.3 * 1.3 * 0.9 * pairing
        ));
    }
    Verdict::new(
        passed,
        "constant data is a fixed point with vanishing functionals",
        details,
    )
}

fn conservation() -> Verdict {
    let grid = Grid::new(GridSpec::unit(2, 16)).unwrap();
    let p = phys(2, -1.0, BoundaryTemperature::constant(1.0));
    let num = NumParams {
        newton_tol: 1e-11,
        ..NumParams::default()
    };
    let s0 = InitialData::PerturbedConstant { amplitude: 0.1 }
        .state(&grid, &p)
        .unwrap();
    let traj = advance(&grid, s0, 100, &p, &num, |_, _| {});
    if let Some(e) = &traj.failure {
        return Verdict::new(false, format!("solver stopped: {e}"), vec![]);
    }
    let m0 = traj.states[0].mass(&grid);
    let drift = traj
        .states
        .iter()
        .map(|s| ((s.mass(&grid) - m0) / m0).abs())
        .fold(0.0, f64::max);

    let ones = vec![1.0; grid.cell_count()];
    let smooth: Vec<f64> = (0..grid.cell_count())
        .map(|c| {
            let x = grid.cell_center(c);
            1.0 + 0.5
                * (2.0 * std::f64::consts::PI * x[0]).cos()
                * (std::f64::consts::PI * x[1]).sin()
        })
        .collect();
    let mut renorm = 0.0f64;
    for w in traj.states.windows(2) {
        for phi in [&ones, &smooth] {
            let t = renormalized_terms(
                &grid,
                &w[0],
                &w[1],
                traj.dt,
                num.alpha,
                Renormalization::Square,
                phi,
            )
            .unwrap();
            renorm = renorm.max(t.residual().abs());
        }
    }
    let rll = rho_log_rho_defect(&grid, &traj).unwrap();
    let rll_max = rll.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let passed = drift <= 1e-9 && renorm <= 1e-8 && rll_max <= 1e-10;
    Verdict::new(
        passed,
        "mass, renormalized continuity and rho log rho over 100 steps",
        vec![
            format!("relative mass drift {drift:.2e} (limit 1e-9)"),
            format!("renormalized residual, B(z) = z^2, worst step {renorm:.2e} (limit 1e-8)"),
            format!("rho log rho defect, largest level {rll_max:.2e} (limit 1e-10)"),
        ],
    )
}

fn random_state(grid: &Grid, rng: &mut ChaCha8Rng, amp: f64) -> State {
    let d = grid.dim();
    let mut s = constant_state(grid, 1.0, 1.0);
    for c in 0..grid.cell_count() {
        s.rho[c] = 1.0 + amp * rng.random_range(-1.0..1.0);
        s.theta[c] = 1.0 + amp * rng.random_range(-1.0..1.0);
        for j in 0..d {
            s.u[c][j] = amp * rng.random_range(-1.0..1.0);
        }
    }
    for e in 0..grid.exterior_count() {
        s.theta_b.0[e] = 1.0 + amp * rng.random_range(-1.0..1.0);
    }
    s
}

fn nudge(s: &State, unknown: usize, step: f64, dim: usize) -> State {
    let nv = dim + 2;
    let (c, v) = (unknown / nv, unknown % nv);
    let mut y = s.clone();
    match v {
        0 => y.rho[c] += step,
        v if v == dim + 1 => y.theta[c] += step,
        v => y.u[c][v - 1] += step,
    }
    y
}

fn dense_column(jac: &CsrMatrix, col: usize) -> Vec<f64> {
    let mut e = vec![0.0; jac.n];
    e[col] = 1.0;
    jac.matvec(&e)
}

fn jacobian() -> Verdict {
    let dim = 2;
    let grid = Grid::new(GridSpec::unit(dim, 8)).unwrap();
    let p = phys(dim, -1.0, BoundaryTemperature::two_plate(1.2, 1.0, dim));
    let num = NumParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let eps = 1e-6;
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let prev = random_state(&grid, &mut rng, 0.3);
        let guess = random_state(&grid, &mut rng, 0.3);
        let flags = upwind_flags(&grid, &guess.u);
        let jac = assemble_jacobian(&grid, &prev, &guess, &p, &num, &flags).unwrap();
        let scale = jac.vals.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let mut err = 0.0f64;
        for col in 0..jac.n {
            let rp = assemble_with_flags(
                &grid,
                &prev,
                &nudge(&guess, col, eps, dim),
                &p,
                &num,
                &flags,
            )
            .unwrap();
            let rm = assemble_with_flags(
                &grid,
                &prev,
                &nudge(&guess, col, -eps, dim),
                &p,
                &num,
                &flags,
            )
            .unwrap();
            let exact = dense_column(&jac, col);
            for (row, j) in exact.iter().enumerate() {
                let fd = (rp.values[row] - rm.values[row]) / (2.0 * eps);
                err = err.max((fd - j).abs());
            }
        }
        worst = worst.max(err / scale);
    }
    Verdict::new(
        worst <= 1e-6,
        "Newton Jacobian against central differences",
        vec![format!(
            "20 random states on 8^2, every entry, frozen upwind flags: worst relative error {worst:.2e} (limit 1e-6)"
        )],
    )
}

struct Study {
    params: StudyParams,
    result: StudyResult,
    seconds: f64,
}

fn run_study() -> Study {
    let params = StudyParams::two_plate_default(2, vec![8, 16, 32, 64]);
    let started = Instant::now();
    let result = study::consistency_study(&params).expect("study parameters are valid");
    Study {
        params,
        result,
        seconds: started.elapsed().as_secs_f64(),
    }
}

fn level_status(s: &Study) -> Vec<String> {
    s.result
        .levels
        .iter()
        .filter_map(|l| {
            l.failure
                .as_ref()
                .map(|f| format!("level n={} stopped: {f}", l.n))
        })
        .collect()
}

fn order_check(s: &Study, checks: &[(&str, f64)]) -> (bool, Vec<String>) {
    let mut passed = true;
    let mut details = level_status(s);
    passed &= details.is_empty();
    for &(name, min) in checks {
        let values: Vec<String> = s
            .result
            .levels
            .iter()
            .map(|l| format!("{:.3e}", l.value(name).unwrap_or(f64::NAN)))
            .collect();
        match s.result.rate(name) {
            Ok(fit) => {
                let ok = fit.order >= min;
                passed &= ok;
                details.push(format!(
                    "{name:<24} order {:.3} (min {min}) values {}{}",
                    fit.order,
                    values.join(" "),
                    if ok { "" } else { "  FAILED" }
                ));
            }
            Err(e) => {
                passed = false;
                details.push(format!("{name:<24} no fit: {e}"));
            }
        }
    }
    (passed, details)
}

fn consistency_rates(s: &Study) -> Verdict {
    let (ok, mut details) = order_check(
        s,
        &[
            (study::CONTINUITY, 0.15),
            (study::MOMENTUM, 0.15),
            (study::ENTROPY, 0.15),
        ],
    );
    for name in [study::INTERNAL_ENERGY, study::BALLISTIC] {
        if let Ok(fit) = s.result.rate(name) {
            details.push(format!("{name:<24} order {:.3} (reported only)", fit.order));
        }
    }
    details.push(format!("study runtime {:.1} s (limit 900 s)", s.seconds));
    let passed = ok && s.seconds <= 900.0;
    Verdict::new(
        passed,
        "consistency orders at alpha = 0.5 on N = 8..64",
        details,
    )
}

fn compatibility_rates(s: &Study) -> Verdict {
    let (passed, details) = order_check(
        s,
        &[
            (study::CF_TEMPERATURE, 0.9),
            (study::CF_TEMPERATURE_SQ, 0.9),
            (study::CF_VELOCITY, 0.15),
            (study::CF_KINETIC, 0.15),
        ],
    );
    Verdict::new(passed, "compatibility orders", details)
}

fn ballistic(s: &Study) -> Verdict {
    let alpha = s.params.num.alpha;
    let normalized: Vec<(usize, f64, f64)> = s
        .result
        .levels
        .iter()
        .map(|l| {
            let v = l.value(study::BALLISTIC).unwrap_or(f64::NAN);
            let neg = (-v).max(0.0);
            let scale = l.h.powf((1.0 - alpha) / 2.0) + l.h.powf((1.0 + alpha) / 2.0);
            (l.n, v, neg / scale)
        })
        .collect();
    let first = normalized[0].2;
    let mut passed = level_status(s).is_empty();
    let mut details = level_status(s);
    for &(n, v, q) in &normalized {
        let ok = q.is_finite() && q <= 4.0 * first;
        passed &= ok;
        details.push(format!(
            "n={n:<3} functional {v:+.3e} normalized negative part {q:.3e} (bound {:.3e}){}",
            4.0 * first,
            if ok { "" } else { "  FAILED" }
        ));
    }
    Verdict::new(
        passed,
        "negative part of the ballistic functional stays bounded",
        details,
    )
}

fn lions_cauchy(s: &Study) -> Verdict {
    let diffs = s.result.lions_differences();
    let rows = study::refine_study(&s.params, &s.result).unwrap();
    let rho: Vec<f64> = rows.iter().map(|r| r.rho).collect();
    let strictly = |v: &[f64]| v.windows(2).all(|w| w[1] < w[0]);
    let lions_ok = diffs.len() == 3 && strictly(&diffs);
    let rho_ok = rho.len() == 3 && strictly(&rho);
    let fmt = |v: &[f64]| {
        v.iter()
            .map(|x| format!("{x:.3e}"))
            .collect::<Vec<_>>()
            .join(" ")
    };
    Verdict::new(
        lions_ok && rho_ok,
        "Lions differences and density Cauchy differences decrease",
        vec![
            format!(
                "|L_h - L_h/2|         {}{}",
                fmt(&diffs),
                if lions_ok { "" } else { "  FAILED" }
            ),
            format!(
                "|rho_h - rho_h/2|_L2  {}{}",
                fmt(&rho),
                if rho_ok { "" } else { "  FAILED" }
            ),
        ],
    )
}

fn stability(s: &Study) -> Verdict {
    let alpha = s.params.num.alpha;
    let mut details = level_status(s);
    let mut passed = details.is_empty();
    let reports: Vec<_> = s
        .result
        .levels
        .iter()
        .filter_map(|l| l.stability.map(|r| (l.n, r)))
        .collect();
    if reports.len() != s.result.levels.len() {
        return Verdict::new(false, "stability quantities missing on some level", details);
    }
    let first = reports[0].1.normalized(alpha);
    for (q, name) in StabilityReport::NAMES.iter().enumerate() {
        let values: Vec<f64> = reports
            .iter()
            .map(|(_, r)| r.normalized(alpha)[q])
            .collect();
        let ok = values.iter().all(|v| v.is_finite() && *v <= 4.0 * first[q]);
        passed &= ok;
        details.push(format!(
            "{name:<18} {}  (bound {:.3e}){}",
            values
                .iter()
                .map(|v| format!("{v:.3e}"))
                .collect::<Vec<_>>()
                .join(" "),
            4.0 * first[q],
            if ok { "" } else { "  FAILED" }
        ));
    }
    for (n, r) in &reports {
        let e = r.extremes;
        details.push(format!(
            "n={n:<3} rho in [{:.4}, {:.4}]  theta in [{:.4}, {:.4}]  |u| <= {:.4}",
            e.rho_min, e.rho_max, e.theta_min, e.theta_max, e.u_max
        ));
    }
    Verdict::new(
        passed,
        "normalized stability quantities stay bounded",
        details,
    )
}

fn in_pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .expect("thread pool")
        .install(f)
}

const TABLES: [&str; 4] = ["diagnostics.csv", "verify.csv", "rates.csv", "levels.csv"];

/// Writes the four tables of a fixed scenario, identity run and small study.
fn produce(dir: &Path, threads: usize) {
    std::fs::create_dir_all(dir).unwrap();
    in_pool(threads, || {
        let params = StudyParams::two_plate_default(2, vec![4, 8, 16]);
        let grid = params.grid(16).unwrap();
        let s0 = params.initial.state(&grid, &params.phys).unwrap();
        let traj = advance(&grid, s0, 12, &params.phys, &params.num, |_, _| {});
        let records = step_records(&grid, &traj, &params.phys, &params.num).unwrap();
        write_csv(&dir.join("diagnostics.csv"), &records).unwrap();

        let vc = VerifyConfig {
            seed: 7,
            trials: 8,
            sizes: vec![(2, 16), (3, 6)],
            ..VerifyConfig::default()
        };
        let report = verify::verify_operators(&vc).unwrap();
        write_csv(&dir.join("verify.csv"), &report.rows()).unwrap();

        let result = study::consistency_study(&params).unwrap();
        write_csv(&dir.join("rates.csv"), &result.rate_rows()).unwrap();
        write_csv(
            &dir.join("levels.csv"),
            &result.level_rows(params.num.alpha),
        )
        .unwrap();
    });
}

fn numbers(path: &Path) -> Vec<Vec<String>> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

/// Largest relative difference between numeric cells; text cells must match.
fn table_difference(a: &Path, b: &Path) -> Result<f64, String> {
    let (ta, tb) = (numbers(a), numbers(b));
    if ta.len() != tb.len() {
        return Err("row counts differ".into());
    }
    let mut worst = 0.0f64;
    for (ra, rb) in ta.iter().zip(&tb) {
        if ra.len() != rb.len() {
            return Err("column counts differ".into());
        }
        for (x, y) in ra.iter().zip(rb) {
            match (x.parse::<f64>(), y.parse::<f64>()) {
                (Ok(x), Ok(y)) if x.is_nan() && y.is_nan() => {}
                (Ok(x), Ok(y)) => {
                    let m = x.abs().max(y.abs());
                    if m > 0.0 {
                        worst = worst.max((x - y).abs() / m);
                    }
                }
                _ if x == y => {}
                _ => return Err(format!("`{x}` differs from `{y}`")),
            }
        }
    }
    Ok(worst)
}

fn determinism() -> Verdict {
    let root = tempfile::tempdir().unwrap();
    let dirs: Vec<PathBuf> = ["a4", "b4", "c1"]
        .iter()
        .map(|d| root.path().join(d))
        .collect();
    produce(&dirs[0], 4);
    produce(&dirs[1], 4);
    produce(&dirs[2], 1);
    let mut passed = true;
    let mut details = Vec::new();
    for t in TABLES {
        let same =
            std::fs::read(dirs[0].join(t)).unwrap() == std::fs::read(dirs[1].join(t)).unwrap();
        passed &= same;
        let across = table_difference(&dirs[0].join(t), &dirs[2].join(t));
        let across_ok = matches!(across, Ok(d) if d <= 1e-12);
        passed &= across_ok;
        details.push(format!(
            "{t:<16} repeat at 4 threads: {}; 1 vs 4 threads: {}",
            if same { "byte-identical" } else { "DIFFERENT" },
            match across {
                Ok(d) => format!(
                    "max relative difference {d:.1e}{}",
                    if across_ok { "" } else { "  FAILED" }
                ),
                Err(e) => format!("FAILED ({e})"),
            }
        ));
    }
    Verdict::new(
        passed,
        "repeatable tables across runs and thread counts",
        details,
    )
}

fn guarded(f: impl FnOnce() -> Verdict) -> Verdict {
    match panic::catch_unwind(AssertUnwindSafe(f)) {
        Ok(v) => v,
        Err(e) => {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Verdict::new(false, format!("aborted: {msg}"), vec![])
        }
    }
}

fn report(id: usize, title: &str, v: &Verdict) {
    println!(
        "{} criterion {id:>2} {title}: {}",
        if v.passed { "PASS" } else { "FAIL" },
        v.summary
    );
    for d in &v.details {
        println!("        {d}");
    }
}

fn main() {
    // `cargo test` forwards harness flags such as `--nocapture`; listing must not run anything
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let started = Instant::now();
    let mut verdicts: Vec<(usize, &str, Verdict)> = Vec::new();
    let mut record = |id, title, v: Verdict| {
        report(id, title, &v);
        verdicts.push((id, title, v));
    };
    record(1, "operator identity suite", guarded(operator_identities));
    record(2, "scheme fixed point", guarded(fixed_point));
    record(3, "conservation and renormalization", guarded(conservation));
    record(4, "Jacobian correctness", guarded(jacobian));

    let study = panic::catch_unwind(run_study);
    match &study {
        Ok(s) => {
            record(5, "consistency rates", guarded(|| consistency_rates(s)));
            record(6, "compatibility rates", guarded(|| compatibility_rates(s)));
            record(7, "ballistic one-sidedness", guarded(|| ballistic(s)));
            record(8, "Lions Cauchy check", guarded(|| lions_cauchy(s)));
            record(9, "stability boundedness", guarded(|| stability(s)));
        }
        Err(_) => {
            for (id, title) in [
                (5, "consistency rates"),
                (6, "compatibility rates"),
                (7, "ballistic one-sidedness"),
                (8, "Lions Cauchy check"),
                (9, "stability boundedness"),
            ] {
                record(
                    id,
                    title,
                    Verdict::new(false, "refinement study aborted", vec![]),
                );
            }
        }
    }
    record(10, "determinism", guarded(determinism));

    let failed: Vec<usize> = verdicts
        .iter()
        .filter(|(_, _, v)| !v.passed)
        .map(|(id, _, _)| *id)
        .collect();
    println!(
        "acceptance: {} of {} criteria passed in {:.1} s",
        verdicts.len() - failed.len(),
        verdicts.len(),
        started.elapsed().as_secs_f64()
    );
    if !failed.is_empty() {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}
