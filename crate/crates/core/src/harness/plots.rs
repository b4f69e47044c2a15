//! CSV exports of a run directory for plotting.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::baselines::Method;
use crate::error::{Error, Result};
use crate::ledger::{Kind, RunLedger};
use crate::metrics::RegretTracker;
use crate::slicesim::{Engine, SimulationParams};

use super::pipeline::{read_json, OnlineSummary, ParetoPoint, RunDir, Stage1Summary};

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// `iter,best_kl,best_weighted`: after each round, the lowest weighted
/// discrepancy so far and the KL of the point that reached it.
pub fn convergence_csv(ledger: &RunLedger, summary: &Stage1Summary) -> Result<String> {
    let bounds = Engine::default().bounds;
    let anchor = bounds.normalize(&summary.x_hat);
    let mut out = String::from("iter,best_kl,best_weighted\n");
    // (kl, weighted) of the best point so far.
    let mut best = (f64::INFINITY, f64::INFINITY);
    let mut rows: Vec<(u64, f64, f64)> = Vec::new();
    for r in ledger.rows.iter().filter(|r| r.stage == 1) {
        let (Some(kl), Ok(x)) = (r.kl, <[f64; 7]>::try_from(r.x_or_a.as_slice())) else {
            continue;
        };
        let u = bounds.normalize(&SimulationParams::from_array(x));
        let dist = u
            .iter()
            .zip(anchor.iter())
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        let weighted = kl + summary.alpha * dist;
        if weighted < best.1 {
            best = (kl, weighted);
        }
        match rows.last_mut() {
            Some(last) if last.0 == r.iter => (last.1, last.2) = best,
            _ => rows.push((r.iter, best.0, best.1)),
        }
    }
    if rows.is_empty() {
        return Err(Error::Empty("stage-1 ledger"));
    }
    for (i, kl, w) in rows {
        writeln!(out, "{i},{kl},{w}").unwrap();
    }
    Ok(out)
}

/// `method,iter,usage,qoe` for every real-network query.
pub fn footprint_rows(method: &str, ledger: &RunLedger, out: &mut String) -> usize {
    let mut n = 0;
    for r in ledger.online_rows() {
        if let (Some(u), Some(q)) = (r.usage, r.qoe) {
            writeln!(out, "{method},{},{u},{q}", r.iter).unwrap();
            n += 1;
        }
    }
    n
}

/// Regret series recomputed from the online rows of `ledger`.
pub fn regret_from_ledger(ledger: &RunLedger, summary: &OnlineSummary) -> Result<RegretTracker> {
    let mut t = RegretTracker::new(summary.reference);
    for r in ledger.rows.iter().filter(|r| r.kind == Kind::Online) {
        let (Some(u), Some(q)) = (r.usage, r.qoe) else {
            return Err(Error::InvalidArgument(format!(
                "online row {} lacks usage or qoe",
                r.iter
            )));
        };
        t.update(u, q)?;
    }
    if t.iterations() == 0 {
        return Err(Error::Empty("online ledger"));
    }
    Ok(t)
}

/// `iter,avg_usage_regret,avg_qoe_regret`, one row per online iteration.
pub fn regret_csv(t: &RegretTracker) -> String {
    let mut out = String::from("iter,avg_usage_regret,avg_qoe_regret\n");
    for (i, u, q) in t.averages() {
        writeln!(out, "{i},{u},{q}").unwrap();
    }
    out
}

pub fn pareto_csv(points: &[ParetoPoint]) -> String {
    let mut out = String::from("alpha,distance,kl\n");
    for p in points {
        writeln!(out, "{},{},{}", p.alpha, p.distance, p.kl).unwrap();
    }
    out
}

/// Write every CSV the run directory has data for and return the paths.
/// The stage-3 ledger is required; stage 1, baselines and the sweep are
/// exported when present.
pub fn emit_plot_data(run: &RunDir) -> Result<Vec<PathBuf>> {
    let plots = run.plots();
    std::fs::create_dir_all(&plots).map_err(|e| Error::io(&plots, e))?;
    let mut written = Vec::new();
    let mut emit = |name: String, text: String| -> Result<()> {
        let p = plots.join(name);
        write(&p, &text)?;
        written.push(p);
        Ok(())
    };

    let s1 = run.stage1();
    if s1.join("ledger.jsonl").exists() {
        let ledger = RunLedger::load(&s1.join("ledger.jsonl"))?;
        let summary: Stage1Summary = read_json(&s1.join("summary.json"))?;
        emit(
            "convergence.csv".into(),
            convergence_csv(&ledger, &summary)?,
        )?;
    }

    let mut footprint = String::from("method,iter,usage,qoe\n");
    let s3 = run.stage3();
    let ledger = RunLedger::load(&s3.join("ledger.jsonl"))?;
    let summary: OnlineSummary = read_json(&s3.join("summary.json"))?;
    emit(
        "regret.csv".into(),
        regret_csv(&regret_from_ledger(&ledger, &summary)?),
    )?;
    footprint_rows(&summary.method, &ledger, &mut footprint);
    for m in [Method::GpEi, Method::GpUcb, Method::OfflineFilter] {
        let dir = run.baseline(m);
        if !dir.join("ledger.jsonl").exists() {
            continue;
        }
        let ledger = RunLedger::load(&dir.join("ledger.jsonl"))?;
        let summary: OnlineSummary = read_json(&dir.join("summary.json"))?;
        emit(
            format!("regret_{}.csv", m.name()),
            regret_csv(&regret_from_ledger(&ledger, &summary)?),
        )?;
        footprint_rows(m.name(), &ledger, &mut footprint);
    }
    emit("footprint.csv".into(), footprint)?;

    let pareto = run.pareto().join("summary.json");
    if pareto.exists() {
        let points: Vec<ParetoPoint> = read_json(&pareto)?;
        emit("pareto.csv".into(), pareto_csv(&points))?;
    }
    Ok(written)
}
