//! Grain sweeps and the sequential oracle command.

use std::fmt::Write as _;
use std::path::Path;

use skelflow::Payload;

use crate::config::ExperimentConfig;
use crate::ops::standard_registry;
use crate::report::{OutputEntry, RunReport};
use crate::run::{load_program, run_experiment, RunError};

/// Program used for grain sweeps.
pub const GRAIN_PROGRAM: &str = "farm(seq:work)";

/// Slack allowed when checking that efficiency does not grow with the
/// worker count.
pub const MONOTONE_SLACK: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct GrainPoint {
    /// Grain as a multiple of the communication delay.
    pub grain: f64,
    pub workers: usize,
    pub efficiency: f64,
}

/// Configuration of one sweep point: `tasks` tasks of `grain · comm_ms`
/// each on `workers` local workers.
pub fn grain_config(grain: f64, workers: usize, tasks: usize, comm_ms: f64) -> ExperimentConfig {
    ExperimentConfig {
        program: Some(GRAIN_PROGRAM.into()),
        tasks,
        grain_ms: grain * comm_ms,
        comm_ms,
        workers: format!("local:{workers}"),
        ..ExperimentConfig::default()
    }
}

pub fn grain_point(grain: f64, workers: usize, tasks: usize, comm_ms: f64) -> Result<GrainPoint, RunError> {
    let out = run_experiment(&grain_config(grain, workers, tasks, comm_ms), Path::new("."), None)?;
    Ok(GrainPoint { grain, workers, efficiency: out.report.efficiency })
}

/// Runs the cross product, grains outermost.
pub fn bench_grain(grains: &[f64], workers: &[usize], tasks: usize, comm_ms: f64) -> Result<Vec<GrainPoint>, RunError> {
    let mut rows = Vec::new();
    for &g in grains {
        for &w in workers {
            let p = grain_point(g, w, tasks, comm_ms)?;
            log::info!("grain {g} workers {w}: efficiency {:.3}", p.efficiency);
            rows.push(p);
        }
    }
    Ok(rows)
}

/// For each grain, whether efficiency never rises by more than
/// [`MONOTONE_SLACK`] as workers are added.
pub fn monotone_by_grain(rows: &[GrainPoint]) -> Vec<(f64, bool)> {
    let mut grains: Vec<f64> = Vec::new();
    for r in rows {
        if !grains.contains(&r.grain) {
            grains.push(r.grain);
        }
    }
    grains
        .into_iter()
        .map(|g| {
            let mut pts: Vec<&GrainPoint> = rows.iter().filter(|r| r.grain == g).collect();
            pts.sort_by_key(|r| r.workers);
            (g, pts.windows(2).all(|w| w[1].efficiency <= w[0].efficiency + MONOTONE_SLACK))
        })
        .collect()
}

/// CSV with a `grain,workers,efficiency` header, followed by one
/// `# monotone grain=G: PASS|FAIL` line per grain.
pub fn grain_csv(rows: &[GrainPoint]) -> String {
    let mut s = String::from("grain,workers,efficiency\n");
    for r in rows {
        writeln!(s, "{},{},{:.4}", r.grain, r.workers, r.efficiency).unwrap();
    }
    for (g, ok) in monotone_by_grain(rows) {
        writeln!(s, "# monotone grain={g}: {}", if ok { "PASS" } else { "FAIL" }).unwrap();
    }
    s
}

/// Runs a timed adaptation scenario.
pub fn bench_adapt(cfg: &ExperimentConfig, base: &Path) -> Result<RunReport, RunError> {
    Ok(run_experiment(cfg, base, None)?.report)
}

/// Evaluates the program on each input with no pool or workers.
pub fn oracle(cfg: &ExperimentConfig, base: &Path, inputs: Vec<Payload>) -> Result<Vec<OutputEntry>, RunError> {
    let reg = standard_registry(cfg.grain());
    let program = load_program(cfg, base, &reg)?;
    Ok(inputs.into_iter().enumerate().map(|(i, x)| OutputEntry::new(i as u64, &program.evaluate(&reg, x))).collect())
}
