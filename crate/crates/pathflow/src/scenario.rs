//! Scenario batches: generate, solve, predict and evaluate several variants
//! of one network and collect them into a single table.

use std::fmt::Write as _;
use std::path::Path;

use pathflow_core::datagen::{ScenarioSpec, LINK_SCENARIO_RETRIES};
use pathflow_core::metrics::EvalReport;
use pathflow_core::model::ModelConfig;
use pathflow_core::network::{Network, OdMatrix};
use pathflow_core::paths::{build_path_sets, rebuild_after_removal};
use pathflow_core::rng;
use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::engine::{evaluate_samples, Surrogate};
use crate::netio::LoadedNetwork;
use crate::output::{quartile_csv, write_report};
use crate::store::{self, Dataset, GenOptions, Split};
use crate::train::train;
use crate::{Error, Result};

const REMOVAL_TAG: u64 = 0x2e_3071;

/// Draws `count` distinct links whose removal keeps every pair the intact
/// network connects connected. Redraws up to the usual retry budget.
pub fn draw_removed_links(network: &Network, count: usize, k: usize, seed: u64) -> Result<Vec<usize>> {
    if count == 0 {
        return Ok(Vec::new());
    }
    if count > network.link_count() {
        return Err(Error::Format(format!("cannot remove {count} of {} links", network.link_count())));
    }
    let base = build_path_sets(network, k);
    let n = network.node_count();
    let mut wanted = OdMatrix::zeros(n, 1);
    for s in base.iter() {
        if s.reachable && s.origin != s.dest {
            wanted.set(s.origin, s.dest, 0, 1.0)?;
        }
    }
    let mut r = rng::seeded(rng::derive(seed, REMOVAL_TAG + count as u64));
    let mut last = Vec::new();
    for _ in 0..LINK_SCENARIO_RETRIES {
        let mut links = index::sample(&mut r, network.link_count(), count).into_vec();
        links.sort_unstable();
        match rebuild_after_removal(network, &links, k, &wanted) {
            Ok(_) => return Ok(links),
            Err(pathflow_core::Error::Infeasible(p)) => last = p,
            Err(e) => return Err(e.into()),
        }
    }
    Err(pathflow_core::Error::Infeasible(last).into())
}

/// One column of a scenario table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Column {
    pub name: String,
    pub spec: ScenarioSpec,
    /// Train a fresh model on this column's dataset and score its test
    /// split. Otherwise the shared model scores every sample.
    pub train_here: bool,
}

#[derive(Debug, Clone)]
pub struct ColumnResult {
    pub column: Column,
    pub report: EvalReport,
}

/// Settings shared by all columns.
pub struct Batch<'a> {
    pub base: &'a LoadedNetwork,
    pub gen: GenOptions,
    pub model: ModelConfig,
    pub floor: f64,
    pub renormalize: bool,
    /// How many samples per column to re-solve for timing (0: no timings).
    pub solve_samples: usize,
}

/// Runs every column. `shared` scores the columns that do not train; when
/// absent it is trained on `shared_spec` first. Reports go to
/// `out/<column>/` when `out` is set.
pub fn run(
    batch: &Batch<'_>,
    columns: &[Column],
    shared: Option<Checkpoint>,
    shared_spec: Option<&ScenarioSpec>,
    out: Option<&Path>,
    mut log: impl FnMut(&str),
) -> Result<Vec<ColumnResult>> {
    let needs_shared = columns.iter().any(|c| !c.train_here);
    let shared = match (shared, needs_shared, shared_spec) {
        (Some(c), _, _) => Some(Surrogate::new(c)),
        (None, false, _) => None,
        (None, true, Some(spec)) => {
            log("training the shared model");
            let ds = store::generate(batch.base, spec, &batch.gen).map_err(|e| e.in_stage("generate"))?;
            let dir = out.map(|o| o.join("shared-model"));
            let t = train(&ds, batch.model.clone(), dir.as_deref(), |r| {
                log(&format!("shared epoch {} train {:.4e}", r.epoch, r.train.total))
            })
            .map_err(|e| e.in_stage("train"))?;
            Some(Surrogate::new(t.best))
        }
        (None, true, None) => return Err(Error::Format("a shared model or its training spec is required".into())),
    };
    let mut results = Vec::new();
    for col in columns {
        log(&format!("column {}: generating {} samples", col.name, col.spec.n_samples));
        let ds: Dataset = store::generate(batch.base, &col.spec, &batch.gen).map_err(|e| e.in_stage("generate"))?;
        let dir = out.map(|o| o.join(&col.name));
        let (sur, idx): (Surrogate, Vec<usize>) = if col.train_here {
            let t = train(&ds, batch.model.clone(), dir.as_deref(), |r| {
                log(&format!("{} epoch {} train {:.4e}", col.name, r.epoch, r.train.total))
            })
            .map_err(|e| e.in_stage("train"))?;
            (Surrogate::new(t.best), ds.split_indices(Split::Test).to_vec())
        } else {
            (shared.clone().expect("shared model exists"), (0..ds.samples.len()).collect())
        };
        let (report, _) = evaluate_samples(&sur, &ds, &idx, batch.renormalize, batch.floor, &col.name, batch.solve_samples)
            .map_err(|e| e.in_stage("evaluate"))?;
        if let Some(d) = &dir {
            write_report(d, ds.network(), &report)?;
        }
        results.push(ColumnResult {
            column: col.clone(),
            report,
        });
    }
    if let Some(o) = out {
        crate::netio::write_file(&o.join("table.csv"), table_csv(&results))?;
        let reports: Vec<&EvalReport> = results.iter().map(|r| &r.report).collect();
        crate::netio::write_file(&o.join("link_quartiles.csv"), quartile_csv(&reports))?;
    }
    Ok(results)
}

/// Metrics as rows, columns as columns.
pub fn table_csv(results: &[ColumnResult]) -> String {
    let mut s = String::from("metric");
    for r in results {
        let _ = write!(s, ",{}", r.column.name);
    }
    s.push('\n');
    let classes = results.first().map_or(0, |r| r.report.classes.len());
    let mut row = |name: String, f: &dyn Fn(&EvalReport) -> f64| {
        s.push_str(&name);
        for r in results {
            let _ = write!(s, ",{}", f(&r.report));
        }
        s.push('\n');
    };
    for z in 0..classes {
        row(format!("class{z}_path_flow_mae"), &|r| r.classes[z].mae);
        row(format!("class{z}_path_flow_mape"), &|r| r.classes[z].mape);
        row(format!("class{z}_ad_difference"), &|r| r.classes[z].ad_difference);
        row(format!("class{z}_mean_path_cost"), &|r| r.classes[z].mean_path_cost);
        row(format!("class{z}_delay_percentage"), &|r| r.classes[z].delay_percentage);
    }
    row("link_flow_mape".into(), &|r| r.links.mape);
    row("link_abs_error_p95".into(), &|r| r.links.p95_absolute);
    row("eps_od".into(), &|r| r.eps_od);
    row("eps_link".into(), &|r| r.eps_link);
    row("phi_kkt".into(), &|r| r.phi_kkt);
    row("samples".into(), &|r| r.samples as f64);
    s
}
