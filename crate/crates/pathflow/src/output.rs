//! Report and solution files.

use std::fmt::Write as _;
use std::path::Path;

use pathflow_core::equilibrium::{CostSnapshot, UeSolution};
use pathflow_core::metrics::EvalReport;
use pathflow_core::network::{Network, OdMatrix, PathFlows};
use pathflow_core::paths::PathSets;
use serde::Serialize;

use crate::netio::write_file;
use crate::Result;

pub fn to_json(v: &impl Serialize) -> Result<String> {
    Ok(serde_json::to_string_pretty(v)? + "\n")
}

/// `report.json` without wall times, `timings.json` with them (when
/// present), and the CSV side files: `links.csv`, `path_error_histogram.csv`,
/// `link_quartiles.csv`.
pub fn write_report(dir: &Path, network: &Network, report: &EvalReport) -> Result<()> {
    let mut stable = report.clone();
    stable.timings = None;
    write_file(&dir.join("report.json"), to_json(&stable)?)?;
    if let Some(t) = &report.timings {
        write_file(&dir.join("timings.json"), to_json(t)?)?;
    }
    let l = &report.links;
    let mut s = String::from("link,tail,head,predicted,label,absolute_error,percentage_error\n");
    for (e, link) in network.links().iter().enumerate() {
        let _ = writeln!(
            s,
            "{e},{},{},{},{},{},{}",
            link.tail + 1,
            link.head + 1,
            l.predicted[e],
            l.label[e],
            l.absolute[e],
            l.percentage[e]
        );
    }
    write_file(&dir.join("links.csv"), s)?;
    let h = &report.path_error_histogram;
    let mut s = String::from("bin_low,bin_high,count\n");
    let last = h.counts.len().saturating_sub(1);
    for (i, c) in h.counts.iter().enumerate() {
        let hi = if i == last { f64::INFINITY } else { (i + 1) as f64 * h.width };
        let _ = writeln!(s, "{},{},{c}", i as f64 * h.width, hi);
    }
    write_file(&dir.join("path_error_histogram.csv"), s)?;
    write_file(&dir.join("link_quartiles.csv"), quartile_csv(&[report]))
}

/// One row of link absolute-error quartiles per report.
pub fn quartile_csv(reports: &[&EvalReport]) -> String {
    let mut s = String::from("scenario,min,q1,median,q3,max,p95\n");
    for r in reports {
        let q = &r.links.quartiles;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.scenario, q.min, q.q1, q.median, q.q3, q.max, r.links.p95_absolute
        );
    }
    s
}

/// Path flows as CSV, one row per real path slot with positive demand.
pub fn path_flows_csv(network: &Network, path_sets: &PathSets, demand: &OdMatrix, flows: &PathFlows) -> Result<String> {
    let costs = CostSnapshot::at_path_flows(network, path_sets, flows)?;
    let mut s = String::from("origin,dest,class,slot,flow,cost,links\n");
    for (r, set) in path_sets.iter().enumerate() {
        for z in 0..flows.classes {
            if demand.get(r, z) <= 0.0 {
                continue;
            }
            for (p, path) in set.paths.iter().enumerate() {
                if set.pad_mask[p] {
                    continue;
                }
                let links: Vec<String> = path.links.iter().map(usize::to_string).collect();
                let _ = writeln!(
                    s,
                    "{},{},{z},{p},{},{},{}",
                    set.origin + 1,
                    set.dest + 1,
                    flows.get(r, z, p),
                    costs.path_cost(r, z, p),
                    links.join(" ")
                );
            }
        }
    }
    Ok(s)
}

pub fn link_flows_csv(network: &Network, sol: &UeSolution) -> String {
    let classes = network.class_count();
    let mut s = String::from("link,tail,head");
    for z in 0..classes {
        let _ = write!(s, ",flow_class{z}");
    }
    s.push_str(",total,cost\n");
    let costs = network.base_link_costs(&sol.link_flows.totals());
    for (e, link) in network.links().iter().enumerate() {
        let _ = write!(s, "{e},{},{}", link.tail + 1, link.head + 1);
        for z in 0..classes {
            let _ = write!(s, ",{}", sol.link_flows.get(e, z));
        }
        let _ = writeln!(s, ",{},{}", sol.link_flows.total(e), costs[e]);
    }
    s
}

#[derive(Debug, Clone, Serialize)]
pub struct SolveReport {
    pub schema_version: u32,
    pub network: String,
    pub rel_gap: f64,
    pub kkt_residual: f64,
    pub iterations: usize,
    pub converged: bool,
    pub total_demand: f64,
    pub potential_trace: Vec<f64>,
}

/// `path_flows.csv`, `link_flows.csv` and `solve.json`.
pub fn write_solution(dir: &Path, name: &str, network: &Network, path_sets: &PathSets, demand: &OdMatrix, sol: &UeSolution) -> Result<()> {
    write_file(&dir.join("path_flows.csv"), path_flows_csv(network, path_sets, demand, &sol.path_flows)?)?;
    write_file(&dir.join("link_flows.csv"), link_flows_csv(network, sol))?;
    let report = SolveReport {
        schema_version: 1,
        network: name.into(),
        rel_gap: sol.rel_gap,
        kkt_residual: sol.kkt_residual,
        iterations: sol.iterations,
        converged: sol.converged,
        total_demand: demand.as_slice().iter().sum(),
        potential_trace: sol.potential_trace.clone(),
    };
    write_file(&dir.join("solve.json"), to_json(&report)?)
}

/// One JSON object per path slot.
pub fn path_sets_jsonl(path_sets: &PathSets) -> Result<String> {
    let mut s = String::new();
    for r in path_sets.records() {
        s.push_str(&serde_json::to_string(&r)?);
        s.push('\n');
    }
    Ok(s)
}
