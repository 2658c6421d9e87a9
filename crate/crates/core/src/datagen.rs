//! Scenario sampling, labelled samples, and the normalized input and target
//! tensors the flow transformer consumes.
//!
//! Row `r = i·N + j` of every tensor belongs to the ordered pair (i, j). Input
//! columns are `[length, capacity, fft_0..fft_n, demand_0..demand_n,
//! path_0..path_k]` (a = 2 + 2n + k); target columns are `z·k + p`.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::index;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::equilibrium::{solve_ue, SolverConfig, UeSolution};
use crate::network::{Network, OdMatrix, PathFlows, Units, VehicleClass};
use crate::paths::{build_path_sets, rebuild_after_removal, PathSets};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Direct-link attributes per row: length and capacity.
pub const LINK_FEATURES: usize = 2;
/// Fresh demand draws allowed per sample before giving up.
pub const SAMPLE_RETRIES: usize = 10;
/// Random link choices tried before a link scenario is declared infeasible.
pub const LINK_SCENARIO_RETRIES: usize = 100;
pub const TRUCK_DEMAND_SHARE: f64 = 0.5;

pub fn input_width(classes: usize, k: usize) -> usize {
    LINK_FEATURES + 2 * classes + k
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub od_missing_ratio: f64,
    pub link_missing_ratio: f64,
    pub removed_links: Vec<usize>,
    pub classes: usize,
    pub demand_range: (f64, f64),
    pub n_samples: usize,
    pub seed: u64,
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.od_missing_ratio) {
            return Err(Error::Config("od_missing_ratio must be in [0, 1)".into()));
        }
        if !(0.0..1.0).contains(&self.link_missing_ratio) {
            return Err(Error::Config("link_missing_ratio must be in [0, 1)".into()));
        }
        if self.link_missing_ratio > 0.0 && !self.removed_links.is_empty() {
            return Err(Error::Config(
                "set either link_missing_ratio or removed_links, not both".into(),
            ));
        }
        let (lo, hi) = self.demand_range;
        if !(lo > 0.0 && hi >= lo) {
            return Err(Error::Config("demand range must be positive with min <= max".into()));
        }
        if !(1..=2).contains(&self.classes) {
            return Err(Error::Config("classes must be 1 or 2".into()));
        }
        Ok(())
    }
}

/// Uniform demand on every off-diagonal pair, then `⌊ratio·(N²−N)⌋` pairs
/// chosen uniformly are zeroed. Values are rounded to f32 so that on-disk
/// samples reproduce the in-memory ones exactly.
pub fn sample_od_matrix(network: &Network, demand_range: (f64, f64), od_missing_ratio: f64, rng: &mut Rng) -> Result<OdMatrix> {
    if !(0.0..1.0).contains(&od_missing_ratio) {
        return Err(Error::Config("od_missing_ratio must be in [0, 1)".into()));
    }
    let n = network.node_count();
    let (lo, hi) = demand_range;
    let mut od = OdMatrix::zeros(n, 1);
    let mut pairs = Vec::with_capacity(n * n - n);
    for o in 0..n {
        for d in 0..n {
            if o != d {
                let v = rng.random_range(lo..=hi) as f32 as f64;
                od.set(o, d, 0, v)?;
                pairs.push((o, d));
            }
        }
    }
    let masked = libm::floor(od_missing_ratio * pairs.len() as f64) as usize;
    for i in index::sample(rng, pairs.len(), masked) {
        let (o, d) = pairs[i];
        od.set(o, d, 0, 0.0)?;
    }
    Ok(od)
}

/// Adds a truck class carrying half of the car demand on every pair.
pub fn make_multiclass(demand: &OdMatrix) -> Result<OdMatrix> {
    if demand.classes() != 1 {
        return Err(Error::Config(format!(
            "make_multiclass expects single-class demand, got {} classes",
            demand.classes()
        )));
    }
    let n = demand.nodes();
    let mut out = demand.with_class_count(2);
    for o in 0..n {
        for d in 0..n {
            if o != d {
                let car = demand.get(o * n + d, 0);
                out.set(o, d, 1, car * TRUCK_DEMAND_SHARE)?;
            }
        }
    }
    Ok(out)
}

/// The car and truck classes for a two-class network.
pub fn car_truck() -> Vec<VehicleClass> {
    vec![VehicleClass::car(), VehicleClass::truck()]
}

/// Demand of 1 on every pair the network connects; used to ask whether a
/// link removal strands a pair that could carry demand.
fn reachable_demand(path_sets: &PathSets) -> OdMatrix {
    let n = path_sets.nodes();
    let mut od = OdMatrix::zeros(n, 1);
    for s in path_sets.iter() {
        if s.origin != s.dest && s.reachable {
            od.set(s.origin, s.dest, 0, 1.0).expect("indices in range");
        }
    }
    od
}

/// Disables links for a scenario and rebuilds path sets with `k` slots.
///
/// `removed_links` are disabled as given. Otherwise `⌊ratio·L⌋` links are
/// drawn uniformly, redrawing (up to [`LINK_SCENARIO_RETRIES`] times) while
/// the choice disconnects a pair the intact network connects.
pub fn apply_link_scenario(network: &Network, spec: &ScenarioSpec, k: usize, rng: &mut Rng) -> Result<(Network, PathSets)> {
    spec.validate()?;
    let base_sets = build_path_sets(network, k);
    let wanted = reachable_demand(&base_sets);
    if !spec.removed_links.is_empty() {
        return rebuild_after_removal(network, &spec.removed_links, k, &wanted);
    }
    let count = libm::floor(spec.link_missing_ratio * network.link_count() as f64) as usize;
    if count == 0 {
        return Ok((network.clone(), base_sets));
    }
    let mut last = Vec::new();
    for _ in 0..LINK_SCENARIO_RETRIES {
        let mut removed: Vec<usize> = index::sample(rng, network.link_count(), count).into_vec();
        removed.sort_unstable();
        match rebuild_after_removal(network, &removed, k, &wanted) {
            Ok(out) => return Ok(out),
            Err(Error::Infeasible(pairs)) => last = pairs,
            Err(e) => return Err(e),
        }
    }
    Err(Error::Infeasible(last))
}

/// Per-column min/max of the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl FeatureStats {
    pub fn fit<'a>(tensors: impl IntoIterator<Item = &'a Tensor>) -> Result<Self> {
        let mut stats: Option<FeatureStats> = None;
        for t in tensors {
            let c = t.cols();
            let s = stats.get_or_insert_with(|| FeatureStats {
                min: vec![f64::INFINITY; c],
                max: vec![f64::NEG_INFINITY; c],
            });
            if s.min.len() != c {
                return Err(Error::Shape {
                    op: "feature_stats",
                    left: vec![s.min.len()],
                    right: t.shape().to_vec(),
                });
            }
            for row in t.data().chunks(c) {
                for j in 0..c {
                    s.min[j] = s.min[j].min(row[j]);
                    s.max[j] = s.max[j].max(row[j]);
                }
            }
        }
        stats.ok_or_else(|| Error::Contract("feature stats need at least one tensor".into()))
    }

    /// Min-max scaling clamped to [0, 1]; constant columns map to 0.
    pub fn apply(&self, t: &mut Tensor) -> Result<()> {
        let c = t.cols();
        if c != self.min.len() {
            return Err(Error::Shape {
                op: "normalize_input",
                left: t.shape().to_vec(),
                right: vec![self.min.len()],
            });
        }
        for row in t.data_mut().chunks_mut(c) {
            for j in 0..c {
                let span = self.max[j] - self.min[j];
                row[j] = if span > 0.0 {
                    ((row[j] - self.min[j]) / span).clamp(0.0, 1.0)
                } else {
                    0.0
                };
            }
        }
        Ok(())
    }
}

/// Unnormalized input features, shape (N², a).
pub fn raw_input_tensor(network: &Network, demand: &OdMatrix, path_sets: &PathSets) -> Result<Tensor> {
    let n = network.node_count();
    let classes = network.class_count();
    let k = path_sets.k();
    if demand.nodes() != n || path_sets.nodes() != n || demand.classes() != classes {
        return Err(Error::Contract(format!(
            "input features need matching sizes: network N={n} n={classes}, demand N={} n={}, paths N={}",
            demand.nodes(),
            demand.classes(),
            path_sets.nodes()
        )));
    }
    let a = input_width(classes, k);
    let mut data = vec![0.0; n * n * a];
    for i in 0..n {
        for j in 0..n {
            let r = i * n + j;
            let row = &mut data[r * a..(r + 1) * a];
            if let Some(e) = network.link_between(i, j) {
                let l = network.link(e);
                row[0] = l.length;
                row[1] = l.capacity;
                for z in 0..classes {
                    row[LINK_FEATURES + z] = network.freeflow_time(e, z);
                }
            }
            for z in 0..classes {
                row[LINK_FEATURES + classes + z] = demand.get(r, z);
            }
            let set = path_sets.pair(r);
            for (p, (path, pad)) in set.paths.iter().zip(&set.pad_mask).enumerate() {
                if !pad {
                    row[LINK_FEATURES + 2 * classes + p] = path.freeflow_cost;
                }
            }
        }
    }
    Tensor::new(vec![n * n, a], data)
}

/// Normalized input tensor. Stats come from the dataset manifest.
pub fn build_input_tensor(network: &Network, demand: &OdMatrix, path_sets: &PathSets, stats: Option<&FeatureStats>) -> Result<Tensor> {
    let stats = stats.ok_or_else(|| Error::Contract("input normalization needs the dataset manifest".into()))?;
    let mut t = raw_input_tensor(network, demand, path_sets)?;
    stats.apply(&mut t)?;
    Ok(t)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum TargetMode {
    /// Path flow divided by its OD/class demand.
    #[default]
    PerOdShare,
    /// Path flow divided by the largest training-split path flow.
    GlobalMax,
}

impl core::str::FromStr for TargetMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per-od-share" => Ok(TargetMode::PerOdShare),
            "global-max" => Ok(TargetMode::GlobalMax),
            other => Err(Error::Config(format!("unknown target mode `{other}`"))),
        }
    }
}

/// Target normalization: the mode plus the scale used by `global-max`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetScale {
    pub mode: TargetMode,
    pub global_max: f64,
}

impl TargetScale {
    pub fn per_od_share() -> Self {
        TargetScale {
            mode: TargetMode::PerOdShare,
            global_max: 1.0,
        }
    }
}

/// Normalized targets, shape (N², k·n).
pub fn normalize_target(flows: &PathFlows, demand: &OdMatrix, scale: &TargetScale) -> Result<Tensor> {
    let (pairs, classes, k) = (flows.pairs, flows.classes, flows.k);
    if demand.classes() != classes || demand.nodes() * demand.nodes() != pairs {
        return Err(Error::Contract("target flows and demand disagree in shape".into()));
    }
    let w = k * classes;
    let mut data = vec![0.0; pairs * w];
    for r in 0..pairs {
        for z in 0..classes {
            let x = demand.get(r, z);
            for p in 0..k {
                let f = flows.get(r, z, p);
                data[r * w + z * k + p] = match scale.mode {
                    TargetMode::PerOdShare if x > 0.0 => f / x,
                    TargetMode::PerOdShare => 0.0,
                    TargetMode::GlobalMax if scale.global_max > 0.0 => f / scale.global_max,
                    TargetMode::GlobalMax => 0.0,
                };
            }
        }
    }
    Tensor::new(vec![pairs, w], data)
}

/// Turns model output back into path flows. Padded slots and zero-demand
/// pairs get 0. With `renormalize`, shares are rescaled to sum to one over
/// the real slots so every OD/class total matches its demand.
pub fn denormalize_prediction(
    pred: &Tensor,
    demand: &OdMatrix,
    path_sets: &PathSets,
    scale: &TargetScale,
    renormalize: bool,
) -> Result<PathFlows> {
    let n = demand.nodes();
    let (classes, k) = (demand.classes(), path_sets.k());
    let w = k * classes;
    if pred.shape() != [n * n, w] || path_sets.nodes() != n {
        return Err(Error::Shape {
            op: "denormalize_prediction",
            left: pred.shape().to_vec(),
            right: vec![n * n, w],
        });
    }
    let mut out = PathFlows::zeros(n * n, classes, k);
    for r in 0..n * n {
        let pad = &path_sets.pair(r).pad_mask;
        for z in 0..classes {
            let x = demand.get(r, z);
            if x <= 0.0 {
                continue;
            }
            let row = &pred.data()[r * w + z * k..r * w + (z + 1) * k];
            let mut shares: Vec<f64> = (0..k)
                .map(|p| {
                    if pad[p] {
                        0.0
                    } else {
                        match scale.mode {
                            TargetMode::PerOdShare => row[p],
                            TargetMode::GlobalMax => row[p] * scale.global_max / x,
                        }
                    }
                })
                .collect();
            if renormalize {
                let total: f64 = shares.iter().sum();
                if total > 0.0 {
                    shares.iter_mut().for_each(|s| *s /= total);
                } else {
                    let real = pad.iter().filter(|p| !**p).count().max(1) as f64;
                    for p in 0..k {
                        shares[p] = if pad[p] { 0.0 } else { 1.0 / real };
                    }
                }
            }
            for p in 0..k {
                out.set(r, z, p, (shares[p] * x).max(0.0));
            }
        }
    }
    Ok(out)
}

/// Sample indices of each split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    /// 70/20/10 after a seeded shuffle: validation and test sizes are
    /// `⌊0.2·n⌋` and `⌊0.1·n⌋`, the rest is training.
    pub fn new(n_samples: usize, seed: u64) -> Self {
        use rand::seq::SliceRandom;
        let mut order: Vec<usize> = (0..n_samples).collect();
        order.shuffle(&mut rng::seeded(rng::derive(seed, 0x5911)));
        let val = n_samples * 2 / 10;
        let test = n_samples / 10;
        let train = n_samples - val - test;
        Split {
            train: order[..train].to_vec(),
            val: order[train..train + val].to_vec(),
            test: order[train + val..].to_vec(),
        }
    }

    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.train.len(), self.val.len(), self.test.len())
    }
}

/// Residual summary of one label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelQuality {
    pub rel_gap: f64,
    pub kkt_residual: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Fresh demand draws needed before the solve succeeded.
    pub retries: usize,
}

/// A demand matrix and its solver label.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub demand: OdMatrix,
    pub solution: UeSolution,
    pub retries: usize,
}

impl LabeledSample {
    pub fn quality(&self) -> LabelQuality {
        LabelQuality {
            rel_gap: self.solution.rel_gap,
            kkt_residual: self.solution.kkt_residual,
            iterations: self.solution.iterations,
            converged: self.solution.converged,
            retries: self.retries,
        }
    }
}

/// Demand for sample `index`, drawn from its own stream of `spec.seed`.
pub fn sample_demand(network: &Network, spec: &ScenarioSpec, rng: &mut Rng) -> Result<OdMatrix> {
    let od = sample_od_matrix(network, spec.demand_range, spec.od_missing_ratio, rng)?;
    if spec.classes == 2 {
        make_multiclass(&od)
    } else {
        Ok(od)
    }
}

/// Draws and solves sample `index`. A failed solve is retried with fresh
/// demand up to [`SAMPLE_RETRIES`] times.
pub fn generate_sample(
    network: &Network,
    path_sets: &PathSets,
    spec: &ScenarioSpec,
    solver: &SolverConfig,
    index: u64,
) -> Result<LabeledSample> {
    let mut rng = rng::stream(spec.seed, index);
    let mut last = None;
    for retries in 0..=SAMPLE_RETRIES {
        let demand = sample_demand(network, spec, &mut rng)?;
        match solve_ue(network, &demand, path_sets, solver) {
            Ok(solution) => {
                return Ok(LabeledSample {
                    demand,
                    solution,
                    retries,
                })
            }
            Err(e) => last = Some(e),
        }
    }
    Err(last.unwrap_or_else(|| Error::Contract("no sample attempt ran".into())))
}

/// Rounds every value through f32, the on-disk precision.
pub fn round_f32(t: &mut Tensor) {
    t.data_mut().iter_mut().for_each(|x| *x = *x as f32 as f64);
}

/// Normalized tensors of one sample plus what is needed to undo them.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleTensors {
    pub input: Tensor,
    pub target: Tensor,
    pub demand: OdMatrix,
    pub label: PathFlows,
}

pub fn sample_tensors(
    network: &Network,
    path_sets: &PathSets,
    sample: &LabeledSample,
    stats: &FeatureStats,
    scale: &TargetScale,
) -> Result<SampleTensors> {
    let mut input = build_input_tensor(network, &sample.demand, path_sets, Some(stats))?;
    round_f32(&mut input);
    let mut target = normalize_target(&sample.solution.path_flows, &sample.demand, scale)?;
    round_f32(&mut target);
    let mut label = sample.solution.path_flows.clone();
    label.flow.iter_mut().for_each(|x| *x = *x as f32 as f64);
    Ok(SampleTensors {
        input,
        target,
        demand: sample.demand.clone(),
        label,
    })
}

/// Everything needed to rebuild, normalize, and interpret a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub network: String,
    pub nodes: usize,
    pub links: usize,
    pub disabled_links: Vec<usize>,
    pub class_multipliers: Vec<f64>,
    pub units: Units,
    pub m: usize,
    pub n: usize,
    pub k: usize,
    pub a: usize,
    pub path_feature: String,
    pub path_ranking: String,
    pub feature_stats: FeatureStats,
    pub target: TargetScale,
    pub spec: ScenarioSpec,
    pub solver: SolverConfig,
    pub split: Split,
    pub labels: Vec<LabelQuality>,
}

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

/// Fits normalization on the training split and assembles the manifest.
pub fn build_manifest(
    name: &str,
    network: &Network,
    path_sets: &PathSets,
    spec: &ScenarioSpec,
    solver: &SolverConfig,
    samples: &[LabeledSample],
    mode: TargetMode,
    units: Units,
) -> Result<DatasetManifest> {
    if samples.len() != spec.n_samples {
        return Err(Error::Contract(format!(
            "manifest expects {} samples, got {}",
            spec.n_samples,
            samples.len()
        )));
    }
    let split = Split::new(spec.n_samples, spec.seed);
    if split.train.is_empty() {
        return Err(Error::Config("the training split is empty".into()));
    }
    let raw: Vec<Tensor> = split
        .train
        .iter()
        .map(|&i| raw_input_tensor(network, &samples[i].demand, path_sets))
        .collect::<Result<_>>()?;
    let feature_stats = FeatureStats::fit(&raw)?;
    let global_max = split
        .train
        .iter()
        .flat_map(|&i| samples[i].solution.path_flows.flow.iter().copied())
        .fold(0.0, f64::max);
    let classes = network.class_count();
    Ok(DatasetManifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        network: name.to_string(),
        nodes: network.node_count(),
        links: network.link_count(),
        disabled_links: network.disabled_links(),
        class_multipliers: network.classes().iter().map(|c| c.freeflow_multiplier).collect(),
        units,
        m: LINK_FEATURES,
        n: classes,
        k: path_sets.k(),
        a: input_width(classes, path_sets.k()),
        path_feature: "per-slot free-flow path cost".into(),
        path_ranking: "loopless k-shortest by free-flow time; ties by hop count then link ids".into(),
        feature_stats,
        target: TargetScale { mode, global_max },
        spec: spec.clone(),
        solver: solver.clone(),
        split,
        labels: samples.iter().map(LabeledSample::quality).collect(),
    })
}
