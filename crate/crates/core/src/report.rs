//! Run orchestration and CSV output.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::gaussian::sub_seed;
use crate::montecarlo::{monte_carlo_violations, ViolationStats};
use crate::protocol::{run_decentralized_mode, MessageRecord};
use crate::scenario::{Scenario, Settings, Sources};
use crate::solver::{IterationRecord, Mode};

/// Seed streams derived from the master seed.
const MC_STREAM: u64 = 0x4d43;
const SINGLE_STREAM: u64 = 0x5352;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModeSelection {
    ChanceConstrained,
    Deterministic,
    Both,
}

impl ModeSelection {
    pub fn modes(self) -> Vec<Mode> {
        match self {
            Self::ChanceConstrained => vec![Mode::ChanceConstrained],
            Self::Deterministic => vec![Mode::Deterministic],
            Self::Both => vec![Mode::ChanceConstrained, Mode::Deterministic],
        }
    }
}

#[derive(Debug, Clone)]
pub struct ModeResult {
    pub mode: Mode,
    pub u: Vec<Vec<f64>>,
    pub history: Vec<IterationRecord>,
    pub log: Vec<MessageRecord>,
    /// Monte Carlo evaluation with `mc_samples` draws.
    pub mc: ViolationStats,
    /// One baseline realization.
    pub single: ViolationStats,
    pub solve_s: f64,
}

impl ModeResult {
    pub fn total_load_w(&self) -> &[f64] {
        &self.history.last().expect("at least one iteration").total_load_w
    }
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub settings: Settings,
    pub sources: Sources,
    pub node_names: Vec<String>,
    pub slot_times: Vec<String>,
    pub baseline_total_w: Vec<f64>,
    pub results: Vec<ModeResult>,
    /// Control-effort weight actually used (W^2).
    pub rho: f64,
    pub elapsed_s: f64,
}

impl RunReport {
    pub fn result(&self, mode: Mode) -> Option<&ModeResult> {
        self.results.iter().find(|r| r.mode == mode)
    }
}

fn mode_name(m: Mode) -> &'static str {
    match m {
        Mode::ChanceConstrained => "ccspds",
        Mode::Deterministic => "spds",
    }
}

/// Solves the scenario in the selected modes through the message-level
/// protocol and evaluates the resulting profiles.
pub fn execute(scenario: &Scenario, selection: ModeSelection) -> Result<RunReport> {
    let start = Instant::now();
    let p = &scenario.problem;
    let s = &scenario.settings;
    let mut results = Vec::new();
    for mode in selection.modes() {
        let t0 = Instant::now();
        let run = run_decentralized_mode(p, &s.solver, mode)?;
        let solve_s = t0.elapsed().as_secs_f64();
        let mc = monte_carlo_violations(p, &run.u, s.mc_samples, sub_seed(s.seed, MC_STREAM))?;
        let single = monte_carlo_violations(p, &run.u, 1, sub_seed(s.seed, SINGLE_STREAM))?;
        results.push(ModeResult {
            mode,
            u: run.u,
            history: run.history,
            log: run.log,
            mc,
            single,
            solve_s,
        });
    }
    Ok(RunReport {
        settings: s.clone(),
        sources: scenario.sources.clone(),
        node_names: p.feeder.names()[1..].to_vec(),
        slot_times: slot_times(s, p.horizon()),
        baseline_total_w: p.mean_total_w.clone(),
        results,
        rho: s.solver.rho_for(p),
        elapsed_s: start.elapsed().as_secs_f64(),
    })
}

fn slot_times(s: &Settings, k: usize) -> Vec<String> {
    let start = s
        .window_start
        .split_once(':')
        .and_then(|(h, m)| Some(h.parse::<f64>().ok()? * 60.0 + m.parse::<f64>().ok()?))
        .unwrap_or(0.0);
    (0..k)
        .map(|t| {
            let minutes = (start + t as f64 * s.dt_minutes).rem_euclid(24.0 * 60.0);
            format!("{:02}:{:02}", (minutes / 60.0).floor() as u32, (minutes % 60.0).round() as u32)
        })
        .collect()
}

#[derive(Serialize)]
struct Manifest<'a> {
    package: &'static str,
    version: &'static str,
    settings: &'a Settings,
    sources: &'a Sources,
    nodes: usize,
    evs: usize,
    slots: usize,
    rho: f64,
    mc_seed: u64,
    single_seed: u64,
    modes: Vec<&'static str>,
    iterations: Vec<usize>,
}

#[derive(Serialize)]
struct Timing {
    total_s: f64,
    solve_s: Vec<(&'static str, f64)>,
}

fn writer(dir: &Path, name: &str) -> Result<(csv::Writer<fs::File>, PathBuf)> {
    let path = dir.join(name);
    let w = csv::Writer::from_path(&path).map_err(|e| csv_err(&path, e))?;
    Ok((w, path))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::io(path, std::io::Error::other(format!("{other:?}"))),
    }
}

fn num(x: f64) -> String {
    format!("{x}")
}

/// Writes the CSV files, the manifest and a timing file into `out`.
pub fn emit_report(report: &RunReport, out: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut written = Vec::new();
    let cc = report.result(Mode::ChanceConstrained);
    let sp = report.result(Mode::Deterministic);

    let (mut w, path) = writer(out, "total_load.csv")?;
    let put = |w: &mut csv::Writer<fs::File>, rec: Vec<String>| w.write_record(&rec).map_err(|e| csv_err(&path, e));
    put(&mut w, ["slot", "time", "baseline_mean_w", "ccspds_total_w", "spds_total_w"].map(String::from).to_vec())?;
    for (k, base) in report.baseline_total_w.iter().enumerate() {
        let col = |r: Option<&ModeResult>| r.map(|r| num(r.total_load_w()[k])).unwrap_or_default();
        put(&mut w, vec![k.to_string(), report.slot_times[k].clone(), num(*base), col(cc), col(sp)])?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    written.push(path.clone());

    let (mut w, path) = writer(out, "voltages.csv")?;
    let put = |w: &mut csv::Writer<fs::File>, rec: Vec<String>| w.write_record(&rec).map_err(|e| csv_err(&path, e));
    put(&mut w, ["mode", "slot", "node", "min", "p25", "median", "p75", "max"].map(String::from).to_vec())?;
    for r in &report.results {
        for (k, slot) in r.mc.voltage_box.iter().enumerate() {
            for (i, b) in slot.iter().enumerate() {
                put(
                    &mut w,
                    vec![
                        mode_name(r.mode).into(),
                        k.to_string(),
                        report.node_names[i].clone(),
                        num(b.min),
                        num(b.p25),
                        num(b.median),
                        num(b.p75),
                        num(b.max),
                    ],
                )?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    written.push(path.clone());

    let (mut w, path) = writer(out, "violations_hist.csv")?;
    let put = |w: &mut csv::Writer<fs::File>, rec: Vec<String>| w.write_record(&rec).map_err(|e| csv_err(&path, e));
    put(&mut w, ["mode", "evaluation", "violating_nodes", "slot_observations"].map(String::from).to_vec())?;
    for r in &report.results {
        for (what, st) in [("monte_carlo", &r.mc), ("single", &r.single)] {
            for (j, &c) in st.histogram.iter().enumerate() {
                if c > 0 {
                    put(&mut w, vec![mode_name(r.mode).into(), what.into(), j.to_string(), c.to_string()])?;
                }
            }
        }
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    written.push(path.clone());

    let (mut w, path) = writer(out, "iterations.csv")?;
    let put = |w: &mut csv::Writer<fs::File>, rec: Vec<String>| w.write_record(&rec).map_err(|e| csv_err(&path, e));
    put(
        &mut w,
        [
            "mode",
            "iter",
            "objective",
            "objective_with_rho",
            "max_constraint",
            "primal_step_norm",
            "dual_step_norm",
            "lambda_max",
            "active_slots",
        ]
        .map(String::from)
        .to_vec(),
    )?;
    for r in &report.results {
        for h in &r.history {
            let lmax = h.lambda.iter().cloned().fold(0.0, f64::max);
            let active = h.lambda.iter().filter(|&&l| l > 0.0).count();
            put(
                &mut w,
                vec![
                    mode_name(r.mode).into(),
                    h.iter.to_string(),
                    num(h.objective),
                    num(h.objective_with_rho),
                    num(h.max_constraint),
                    num(h.primal_step_norm),
                    num(h.dual_step_norm),
                    num(lmax),
                    active.to_string(),
                ],
            )?;
        }
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    written.push(path.clone());

    let (mut w, path) = writer(out, "messages.csv")?;
    let put = |w: &mut csv::Writer<fs::File>, rec: Vec<String>| w.write_record(&rec).map_err(|e| csv_err(&path, e));
    put(&mut w, ["mode", "iter", "direction", "messages", "payload_elements", "bytes"].map(String::from).to_vec())?;
    for r in &report.results {
        for m in &r.log {
            let dir = match m.direction {
                crate::protocol::Direction::Downlink => "downlink",
                crate::protocol::Direction::Uplink => "uplink",
            };
            put(
                &mut w,
                vec![
                    mode_name(r.mode).into(),
                    m.iter.to_string(),
                    dir.into(),
                    m.messages.to_string(),
                    m.payload_elements.to_string(),
                    m.bytes.to_string(),
                ],
            )?;
        }
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    written.push(path.clone());

    let manifest = Manifest {
        package: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        settings: &report.settings,
        sources: &report.sources,
        nodes: report.node_names.len(),
        evs: report.results.first().map_or(0, |r| r.u.len()),
        slots: report.baseline_total_w.len(),
        rho: report.rho,
        mc_seed: sub_seed(report.settings.seed, MC_STREAM),
        single_seed: sub_seed(report.settings.seed, SINGLE_STREAM),
        modes: report.results.iter().map(|r| mode_name(r.mode)).collect(),
        iterations: report.results.iter().map(|r| r.history.len()).collect(),
    };
    let path = out.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::io(&path, e.into()))?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    written.push(path);

    let timing = Timing {
        total_s: report.elapsed_s,
        solve_s: report.results.iter().map(|r| (mode_name(r.mode), r.solve_s)).collect(),
    };
    let path = out.join("timing.json");
    let text = serde_json::to_string_pretty(&timing).map_err(|e| Error::io(&path, e.into()))?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    written.push(path);
    Ok(written)
}
