//! `mimu compare`: several filters on one simulated log.

use std::io::Write;
use std::path::Path;

use anyhow::{bail, Context};
use mimu_core::metrics::{align, evaluate, MetricsReport, Trajectory, TrajectoryPoint};
use mimu_core::run::{run_frames, FilterKind, InitPolicy, RunConfig, Tick};
use mimu_core::sim::{generate_gait, synthesize_sensors};
use serde::Serialize;

use crate::{create_output, load_gait, load_noise, BadInput};

#[derive(Serialize)]
struct Row {
    label: String,
    filter: FilterKind,
    #[serde(flatten)]
    metrics: MetricsReport,
}

#[derive(Serialize)]
struct Table {
    seed: u64,
    duration: f64,
    rows: Vec<Row>,
}

pub fn run(
    configs: &[std::path::PathBuf],
    filters: &[FilterKind],
    gait: Option<&Path>,
    seed: Option<u64>,
    noise: Option<&Path>,
    out: Option<&Path>,
) -> anyhow::Result<()> {
    let mut runs: Vec<(String, RunConfig)> = Vec::new();
    for p in configs {
        let c = RunConfig::load(p).with_context(|| format!("run config {}", p.display()))?;
        let label = p.file_stem().map_or_else(|| c.filter.to_string(), |s| s.to_string_lossy().into_owned());
        runs.push((label, c));
    }
    for &f in filters {
        runs.push((f.to_string(), RunConfig::new(f)));
    }
    if runs.is_empty() {
        runs = FilterKind::ALL.iter().map(|&f| (f.to_string(), RunConfig::new(f))).collect();
    }
    if runs.iter().any(|(_, c)| c.robot != runs[0].1.robot) {
        bail!(BadInput("all configs must use the same robot".into()));
    }
    let mut seen = std::collections::HashMap::<String, usize>::new();
    for (label, _) in &mut runs {
        let n = seen.entry(label.clone()).or_default();
        *n += 1;
        if *n > 1 {
            *label = format!("{label}-{n}");
        }
    }
    // Ordered as 1-IMU, 1-IMU-EKM, 5-IMU-EKM.
    runs.sort_by_key(|(_, c)| FilterKind::ALL.iter().position(|&k| k == c.filter));

    let spec = load_gait(gait)?;
    let seed = seed.or(runs[0].1.seed).unwrap_or(spec.seed);
    let chain = runs[0].1.chain()?;
    let truth = generate_gait(&spec, &chain)?;
    let frames = synthesize_sensors(&truth, &load_noise(noise)?, seed)?;
    let base = chain.base_imu().context("the robot has no base IMU")?;
    let truth_traj = Trajectory(
        truth
            .trajectory(base)
            .into_iter()
            .map(|(t, p)| TrajectoryPoint { t, position: p.translation, orientation: p.rotation })
            .collect(),
    );

    let results: Vec<anyhow::Result<Vec<Tick>>> = std::thread::scope(|s| {
        let handles: Vec<_> = runs
            .iter()
            .map(|(_, c)| {
                let init = (c.init == InitPolicy::Truth).then(|| truth.initial_links());
                let (chain, frames) = (&chain, &frames);
                s.spawn(move || Ok(run_frames(c, chain, init, frames)?))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("filter thread panicked")).collect()
    });

    let mut rows = Vec::new();
    let mut trajectories = Vec::new();
    for ((label, c), ticks) in runs.iter().zip(results) {
        let ticks = ticks.with_context(|| format!("filter {label}"))?;
        let est = Trajectory(
            ticks
                .iter()
                .filter_map(|t| {
                    let e = t.estimates.iter().find(|e| e.imu == base)?;
                    Some(TrajectoryPoint { t: t.t, position: e.state.position, orientation: e.state.rotation })
                })
                .collect(),
        );
        rows.push(Row { label: label.clone(), filter: c.filter, metrics: evaluate(&est, &truth_traj, truth.steps)? });
        trajectories.push(est);
    }

    let table = Table { seed, duration: spec.duration, rows };
    let text = render(&table);
    print!("{text}");
    if let Some(dir) = out {
        let mut w = create_output(&dir.join("table.txt"))?;
        w.write_all(text.as_bytes())?;
        w.flush()?;
        let mut w = create_output(&dir.join("table.json"))?;
        writeln!(w, "{}", serde_json::to_string_pretty(&table)?)?;
        w.flush()?;
        write_errors(create_output(&dir.join("errors.csv"))?, &table, &trajectories, &truth_traj)?;
    }
    Ok(())
}

fn render(table: &Table) -> String {
    let width = table.rows.iter().map(|r| r.label.len()).max().unwrap_or(0).max(6);
    let mut s = format!("seed {}, {} s\n", table.seed, table.duration);
    s += &format!("{:width$}  {:>9}  {:>9}  {:>10}  {:>9}\n", "filter", "RPE (cm)", "ATE (cm)", "AVDS (mm)", "yaw (deg)");
    for r in &table.rows {
        let m = &r.metrics;
        s += &format!(
            "{:width$}  {:>9.3}  {:>9.3}  {:>10.4}  {:>9.3}\n",
            r.label, m.rpe_cm, m.ate_cm, m.avds_mm, m.yaw_drift_deg
        );
    }
    s
}

/// Per-tick horizontal error norm and signed vertical error of each filter.
fn write_errors<W: Write>(out: W, table: &Table, est: &[Trajectory], truth: &Trajectory) -> anyhow::Result<()> {
    let mut csv = csv::Writer::from_writer(out);
    let mut header = vec!["t".to_string()];
    for r in &table.rows {
        header.push(format!("{}_xy", r.label));
        header.push(format!("{}_z", r.label));
    }
    csv.write_record(&header)?;
    let aligned = est.iter().map(|e| align(e, truth)).collect::<Result<Vec<_>, _>>()?;
    let n = aligned.iter().map(|a| a.t.len()).min().unwrap_or(0);
    for k in 0..n {
        let mut row = vec![aligned[0].t[k].to_string()];
        for a in &aligned {
            let d = a.est[k].position - a.truth[k].position;
            row.push(d.xy().norm().to_string());
            row.push(d.z.to_string());
        }
        csv.write_record(&row)?;
    }
    csv.into_inner().map_err(|e| e.into_error())?.flush()?;
    Ok(())
}
