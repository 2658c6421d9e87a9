#![allow(dead_code)]

use pathflow::checkpoint::Checkpoint;
use pathflow::netio::{self, LoadedNetwork, NetSource};
use pathflow::store::{self, Dataset, GenOptions};
use pathflow::train;
use pathflow_core::datagen::{ScenarioSpec, TargetMode};
use pathflow_core::equilibrium::SolverConfig;
use pathflow_core::model::ModelConfig;

pub fn grid(rows: usize, cols: usize, classes: usize, seed: u64) -> LoadedNetwork {
    let mults = [1.0, 1.5];
    netio::load(&NetSource::Grid { rows, cols }, &mults[..classes], seed).unwrap()
}

pub fn spec(n_samples: usize, classes: usize, seed: u64) -> ScenarioSpec {
    ScenarioSpec {
        od_missing_ratio: 0.3,
        link_missing_ratio: 0.0,
        removed_links: vec![],
        classes,
        demand_range: (50.0, 500.0),
        n_samples,
        seed,
    }
}

pub fn gen_options(k: usize) -> GenOptions {
    GenOptions {
        k,
        target: TargetMode::PerOdShare,
        solver: SolverConfig::default(),
    }
}

pub fn tiny_model(ds: &Dataset, epochs: usize) -> ModelConfig {
    let m = &ds.manifest;
    ModelConfig {
        epochs,
        ..train::desk_config(m.nodes, m.a, m.k, m.n)
    }
}

/// A 3×3 grid dataset and a model trained on it for a couple of epochs.
pub fn trained(classes: usize) -> (LoadedNetwork, Dataset, Checkpoint) {
    let net = grid(3, 3, classes, 4);
    let ds = store::generate(&net, &spec(12, classes, 21), &gen_options(3)).unwrap();
    let t = train::train(&ds, tiny_model(&ds, 2), None, |_| {}).unwrap();
    (net, ds, t.best)
}
