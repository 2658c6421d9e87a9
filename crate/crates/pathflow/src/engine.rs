//! Surrogate inference and dataset evaluation.

use std::time::Instant;

use pathflow_core::datagen::{build_input_tensor, denormalize_prediction, round_f32, DatasetManifest};
use pathflow_core::equilibrium::solve_ue;
use pathflow_core::metrics::{self, EvalReport, Evaluated, Timings};
use pathflow_core::model::FlowTransformer;
use pathflow_core::network::{Network, OdMatrix, PathFlows};
use pathflow_core::paths::PathSets;

use crate::checkpoint::Checkpoint;
use crate::store::{Dataset, Split};
use crate::{Error, Result};

/// (nodes, input width, k, classes) that a checkpoint is bound to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub struct Signature {
    pub nodes: usize,
    pub a: usize,
    pub k: usize,
    pub classes: usize,
}

impl Signature {
    pub fn of_manifest(m: &DatasetManifest) -> Self {
        Signature {
            nodes: m.nodes,
            a: m.a,
            k: m.k,
            classes: m.n,
        }
    }

    pub fn of_instance(network: &Network, path_sets: &PathSets) -> Self {
        let classes = network.class_count();
        Signature {
            nodes: network.node_count(),
            a: pathflow_core::datagen::input_width(classes, path_sets.k()),
            k: path_sets.k(),
            classes,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub flows: PathFlows,
    pub seconds: f64,
}

/// A loaded checkpoint ready for inference. Immutable, so one instance can
/// serve concurrent requests.
#[derive(Debug, Clone)]
pub struct Surrogate {
    pub checkpoint: Checkpoint,
}

impl Surrogate {
    pub fn new(checkpoint: Checkpoint) -> Self {
        Surrogate { checkpoint }
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.checkpoint.manifest
    }

    pub fn model(&self) -> &FlowTransformer {
        &self.checkpoint.model
    }

    pub fn signature(&self) -> Signature {
        Signature::of_manifest(self.manifest())
    }

    /// Rejects instances the checkpoint was not trained for: a different
    /// signature, other class multipliers, or a demand of the wrong shape.
    pub fn check(&self, network: &Network, demand: &OdMatrix, path_sets: &PathSets) -> Result<()> {
        let want = self.signature();
        let got = Signature::of_instance(network, path_sets);
        if want != got {
            return Err(Error::Signature(format!("checkpoint expects {want:?}, instance is {got:?}")));
        }
        let mults: Vec<f64> = network.classes().iter().map(|c| c.freeflow_multiplier).collect();
        if mults != self.manifest().class_multipliers {
            return Err(Error::Signature(format!(
                "checkpoint class multipliers {:?}, instance {mults:?}",
                self.manifest().class_multipliers
            )));
        }
        if demand.nodes() != got.nodes || demand.classes() != got.classes {
            return Err(Error::Signature(format!(
                "demand is {} nodes × {} classes, checkpoint expects {} × {}",
                demand.nodes(),
                demand.classes(),
                got.nodes,
                got.classes
            )));
        }
        Ok(())
    }

    /// Normalized input → eval forward → path flows. The returned time
    /// covers all three steps.
    pub fn predict(&self, network: &Network, demand: &OdMatrix, path_sets: &PathSets, renormalize: bool) -> Result<Prediction> {
        self.check(network, demand, path_sets)?;
        let unserved = path_sets.unserved_pairs(demand);
        if !unserved.is_empty() {
            return Err(pathflow_core::Error::Infeasible(unserved).into());
        }
        let start = Instant::now();
        let m = self.manifest();
        let mut input = build_input_tensor(network, demand, path_sets, Some(&m.feature_stats))?;
        round_f32(&mut input);
        let out = self.model().predict(&input)?;
        let flows = denormalize_prediction(&out, demand, path_sets, &m.target, renormalize)?;
        Ok(Prediction {
            flows,
            seconds: start.elapsed().as_secs_f64(),
        })
    }
}

/// Predictions for the given dataset samples, in order.
pub fn predict_samples(s: &Surrogate, ds: &Dataset, idx: &[usize], renormalize: bool) -> Result<Vec<Prediction>> {
    idx.iter()
        .map(|&i| s.predict(ds.network(), &ds.samples[i].demand, &ds.path_sets, renormalize))
        .collect()
}

/// Surrogate predictions on dataset samples scored against the stored
/// labels. With `solve_samples > 0` the report also carries the mean
/// inference time and the mean time of re-solving that many of the samples;
/// 0 leaves timings out, keeping the report reproducible.
pub fn evaluate_samples(
    s: &Surrogate,
    ds: &Dataset,
    idx: &[usize],
    renormalize: bool,
    floor: f64,
    scenario: &str,
    solve_samples: usize,
) -> Result<(EvalReport, Vec<Prediction>)> {
    let preds = predict_samples(s, ds, idx, renormalize)?;
    let items: Vec<Evaluated<'_>> = idx
        .iter()
        .zip(&preds)
        .map(|(&i, p)| Evaluated {
            network: ds.network(),
            path_sets: &ds.path_sets,
            demand: &ds.samples[i].demand,
            pred: &p.flows,
            label: &ds.samples[i].label,
        })
        .collect();
    let timings = if solve_samples > 0 && !preds.is_empty() {
        let inference = preds.iter().map(|p| p.seconds).sum::<f64>() / preds.len() as f64;
        let n = solve_samples.min(idx.len());
        let mut solve = 0.0;
        for &i in &idx[..n] {
            let t = Instant::now();
            solve_ue(ds.network(), &ds.samples[i].demand, &ds.path_sets, &ds.manifest.solver)?;
            solve += t.elapsed().as_secs_f64();
        }
        Some(Timings::new(inference, solve / n as f64))
    } else {
        None
    };
    let report = metrics::report(scenario, &items, floor, timings)?;
    Ok((report, preds))
}

pub fn evaluate_split(
    s: &Surrogate,
    ds: &Dataset,
    split: Split,
    renormalize: bool,
    floor: f64,
    scenario: &str,
    solve_samples: usize,
) -> Result<(EvalReport, Vec<Prediction>)> {
    evaluate_samples(s, ds, ds.split_indices(split), renormalize, floor, scenario, solve_samples)
}
