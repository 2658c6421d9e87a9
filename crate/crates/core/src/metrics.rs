//! Prediction-quality metrics and the evaluation report.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::equilibrium::{
    average_delay, kkt_residual, link_aggregation_residual, mean_path_cost, od_conservation_residual,
};
use crate::network::{aggregate_link_flows, Network, OdMatrix, PathFlows};
use crate::paths::PathSets;
use crate::{Error, Result};

pub const DEFAULT_MAPE_FLOOR: f64 = 1.0;
pub const REPORT_SCHEMA_VERSION: u32 = 1;

fn check(pred: &PathFlows, label: &PathFlows, path_sets: &PathSets) -> Result<()> {
    if pred.flow.len() != label.flow.len()
        || pred.k != label.k
        || pred.classes != label.classes
        || pred.pairs != path_sets.len()
        || pred.k != path_sets.k()
    {
        return Err(Error::Shape {
            op: "metric",
            left: vec![pred.pairs, pred.classes, pred.k],
            right: vec![label.pairs, label.classes, label.k],
        });
    }
    Ok(())
}

fn real_slots(path_sets: &PathSets) -> impl Iterator<Item = (usize, usize)> + '_ {
    path_sets.iter().enumerate().flat_map(|(r, s)| {
        s.pad_mask
            .iter()
            .enumerate()
            .filter(|(_, pad)| !**pad)
            .map(move |(p, _)| (r, p))
    })
}

/// Mean absolute path-flow error per class over non-padded slots.
pub fn mae(pred: &PathFlows, label: &PathFlows, path_sets: &PathSets) -> Result<Vec<f64>> {
    check(pred, label, path_sets)?;
    let mut out = Vec::with_capacity(pred.classes);
    for z in 0..pred.classes {
        let mut sum = 0.0;
        let mut y = 0usize;
        for (r, p) in real_slots(path_sets) {
            sum += (pred.get(r, z, p) - label.get(r, z, p)).abs();
            y += 1;
        }
        if y == 0 {
            return Err(Error::UndefinedMetric("MAE over zero path slots"));
        }
        out.push(sum / y as f64);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mape {
    /// Percent, per class.
    pub value: Vec<f64>,
    pub included: Vec<usize>,
    pub excluded: Vec<usize>,
    pub floor: f64,
}

/// Mean absolute percentage path-flow error per class over non-padded slots
/// whose label is at least `floor` vehicles.
pub fn mape(pred: &PathFlows, label: &PathFlows, path_sets: &PathSets, floor: f64) -> Result<Mape> {
    check(pred, label, path_sets)?;
    if !(floor > 0.0) {
        return Err(Error::Config("MAPE floor must be > 0".into()));
    }
    let mut out = Mape {
        value: Vec::new(),
        included: Vec::new(),
        excluded: Vec::new(),
        floor,
    };
    for z in 0..pred.classes {
        let mut sum = 0.0;
        let (mut inc, mut exc) = (0usize, 0usize);
        for (r, p) in real_slots(path_sets) {
            let l = label.get(r, z, p);
            if l >= floor {
                sum += ((l - pred.get(r, z, p)) / l).abs();
                inc += 1;
            } else {
                exc += 1;
            }
        }
        if inc == 0 {
            return Err(Error::UndefinedMetric("MAPE with every slot below the floor"));
        }
        out.value.push(100.0 * sum / inc as f64);
        out.included.push(inc);
        out.excluded.push(exc);
    }
    Ok(out)
}

/// |AD(pred) − AD(label)|, each at its own congested costs.
pub fn ad_difference(
    network: &Network,
    demand: &OdMatrix,
    path_sets: &PathSets,
    pred: &PathFlows,
    label: &PathFlows,
    class: usize,
) -> Result<f64> {
    let a = average_delay(network, demand, path_sets, pred, class)?;
    let b = average_delay(network, demand, path_sets, label, class)?;
    Ok((a - b).abs())
}

/// Linear-interpolated quantile of already sorted values.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = libm::floor(pos) as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Quartiles {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

impl Quartiles {
    pub fn of(values: &[f64]) -> Self {
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        Quartiles {
            min: quantile(&v, 0.0),
            q1: quantile(&v, 0.25),
            median: quantile(&v, 0.5),
            q3: quantile(&v, 0.75),
            max: quantile(&v, 1.0),
        }
    }
}

/// Fixed-width histogram; bin `i` covers `[i·width, (i+1)·width)`, the last
/// bin also takes everything above.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub width: f64,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn of(values: &[f64], width: f64, bins: usize) -> Self {
        let mut counts = vec![0; bins.max(1)];
        let last = counts.len() - 1;
        for &v in values {
            let b = if width > 0.0 { libm::floor(v / width).max(0.0) as usize } else { 0 };
            counts[b.min(last)] += 1;
        }
        Histogram { width, counts }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: usize,
    pub mae: f64,
    pub mape: f64,
    pub mape_included: usize,
    pub mape_excluded: usize,
    pub ad_pred: f64,
    pub ad_label: f64,
    pub ad_difference: f64,
    pub mean_path_cost: f64,
    /// AD / mean used-path cost × 100.
    pub delay_percentage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkErrors {
    pub predicted: Vec<f64>,
    pub label: Vec<f64>,
    pub absolute: Vec<f64>,
    /// Percent; 0 where the label link flow is below the MAPE floor.
    pub percentage: Vec<f64>,
    pub mape: f64,
    pub p95_absolute: f64,
    pub quartiles: Quartiles,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub inference_seconds: f64,
    pub solve_seconds: f64,
    pub speedup: f64,
}

impl Timings {
    pub fn new(inference_seconds: f64, solve_seconds: f64) -> Self {
        Timings {
            inference_seconds,
            solve_seconds,
            speedup: if inference_seconds > 0.0 { solve_seconds / inference_seconds } else { 0.0 },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub scenario: String,
    pub samples: usize,
    pub mape_floor: f64,
    pub classes: Vec<ClassMetrics>,
    pub eps_od: f64,
    pub eps_link: f64,
    pub phi_kkt: f64,
    pub links: LinkErrors,
    pub path_error_histogram: Histogram,
    /// Wall-clock times. Left out of files that must be reproducible.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timings: Option<Timings>,
}

/// One evaluated instance: a demand, the path sets it was solved on, and the
/// two flow assignments.
pub struct Evaluated<'a> {
    pub network: &'a Network,
    pub path_sets: &'a PathSets,
    pub demand: &'a OdMatrix,
    pub pred: &'a PathFlows,
    pub label: &'a PathFlows,
}

pub const HISTOGRAM_BINS: usize = 20;

/// Pools per-slot errors across all instances; per-instance metrics (AD,
/// residuals, link errors) are averaged.
pub fn report(scenario: &str, items: &[Evaluated<'_>], floor: f64, timings: Option<Timings>) -> Result<EvalReport> {
    let first = items.first().ok_or(Error::UndefinedMetric("report over zero samples"))?;
    let classes = first.pred.classes;
    let m = items.len() as f64;
    let mut abs_sum = vec![0.0; classes];
    let mut slots = vec![0usize; classes];
    let mut pct_sum = vec![0.0; classes];
    let mut inc = vec![0usize; classes];
    let mut exc = vec![0usize; classes];
    let mut ad_pred = vec![0.0; classes];
    let mut ad_label = vec![0.0; classes];
    let mut ad_diff = vec![0.0; classes];
    let mut cost = vec![0.0; classes];
    let (mut eps_od, mut eps_link, mut phi) = (0.0, 0.0, 0.0);
    let links = first.network.link_count();
    let mut link_pred = vec![0.0; links];
    let mut link_label = vec![0.0; links];
    let mut link_abs_all = Vec::new();
    let mut link_pct_sum = 0.0;
    let mut link_pct_n = 0usize;
    let mut path_abs = Vec::new();
    for it in items {
        check(it.pred, it.label, it.path_sets)?;
        if it.pred.classes != classes || it.network.link_count() != links {
            return Err(Error::Contract("report items must share one signature".into()));
        }
        for z in 0..classes {
            for (r, p) in real_slots(it.path_sets) {
                let (f, l) = (it.pred.get(r, z, p), it.label.get(r, z, p));
                let e = (f - l).abs();
                abs_sum[z] += e;
                slots[z] += 1;
                path_abs.push(e);
                if l >= floor {
                    pct_sum[z] += e / l;
                    inc[z] += 1;
                } else {
                    exc[z] += 1;
                }
            }
            let has_demand = it.demand.class_total(z) > 0.0;
            if has_demand {
                let a = average_delay(it.network, it.demand, it.path_sets, it.pred, z)?;
                let b = average_delay(it.network, it.demand, it.path_sets, it.label, z)?;
                ad_pred[z] += a / m;
                ad_label[z] += b / m;
                ad_diff[z] += (a - b).abs() / m;
                cost[z] += mean_path_cost(it.network, it.path_sets, it.pred, z)? / m;
            }
        }
        eps_od += od_conservation_residual(it.demand, it.pred)? / m;
        let lp = aggregate_link_flows(it.network, it.path_sets, it.pred)?;
        let ll = aggregate_link_flows(it.network, it.path_sets, it.label)?;
        eps_link += link_aggregation_residual(it.network, it.path_sets, it.pred, &lp)? / m;
        phi += kkt_residual(it.network, it.demand, it.path_sets, it.pred)? / m;
        for e in 0..links {
            let (a, b) = (lp.total(e), ll.total(e));
            link_pred[e] += a / m;
            link_label[e] += b / m;
            link_abs_all.push((a - b).abs());
            if b >= floor {
                link_pct_sum += (a - b).abs() / b;
                link_pct_n += 1;
            }
        }
    }
    let mut class_metrics = Vec::with_capacity(classes);
    for z in 0..classes {
        if slots[z] == 0 {
            return Err(Error::UndefinedMetric("MAE over zero path slots"));
        }
        if inc[z] == 0 {
            return Err(Error::UndefinedMetric("MAPE with every slot below the floor"));
        }
        class_metrics.push(ClassMetrics {
            class: z,
            mae: abs_sum[z] / slots[z] as f64,
            mape: 100.0 * pct_sum[z] / inc[z] as f64,
            mape_included: inc[z],
            mape_excluded: exc[z],
            ad_pred: ad_pred[z],
            ad_label: ad_label[z],
            ad_difference: ad_diff[z],
            mean_path_cost: cost[z],
            delay_percentage: if cost[z] > 0.0 { 100.0 * ad_pred[z] / cost[z] } else { 0.0 },
        });
    }
    let absolute: Vec<f64> = link_pred.iter().zip(&link_label).map(|(a, b)| (a - b).abs()).collect();
    let percentage = link_pred
        .iter()
        .zip(&link_label)
        .map(|(a, b)| if *b >= floor { 100.0 * (a - b).abs() / b } else { 0.0 })
        .collect();
    let mut sorted = link_abs_all.clone();
    sorted.sort_by(f64::total_cmp);
    let max_path_err = path_abs.iter().copied().fold(0.0, f64::max);
    let width = if max_path_err > 0.0 { max_path_err / HISTOGRAM_BINS as f64 } else { 1.0 };
    Ok(EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        scenario: scenario.into(),
        samples: items.len(),
        mape_floor: floor,
        classes: class_metrics,
        eps_od,
        eps_link,
        phi_kkt: phi,
        links: LinkErrors {
            predicted: link_pred,
            label: link_label,
            absolute,
            percentage,
            mape: if link_pct_n > 0 { 100.0 * link_pct_sum / link_pct_n as f64 } else { 0.0 },
            p95_absolute: quantile(&sorted, 0.95),
            quartiles: Quartiles::of(&link_abs_all),
        },
        path_error_histogram: Histogram::of(&path_abs, width, HISTOGRAM_BINS),
        timings,
    })
}
