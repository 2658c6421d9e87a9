//! Training orchestration over a stored dataset.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use pathflow_core::model::{Example, FlowTransformer, KktStructure, LossParts, ModelConfig, PenaltyContext};
use pathflow_core::rng;
use pathflow_core::tensor::Adam;

use crate::checkpoint::Checkpoint;
use crate::netio::write_file;
use crate::store::{Dataset, Split};
use crate::{Error, Result};

pub const HISTORY_FILE: &str = "history.csv";
pub const BEST_FILE: &str = "best.ckpt";
pub const LAST_FILE: &str = "last.ckpt";
pub const DIVERGED_FILE: &str = "diverged.ckpt";
const SHUFFLE_TAG: u64 = 0x5_4ff1e;

/// Small enough to train on one CPU core: 1 head of width 8, one encoder
/// and one decoder layer, FFN width 32, batch 8, lr 2e-3, no dropout.
pub fn desk_config(nodes: usize, input_width: usize, k: usize, classes: usize) -> ModelConfig {
    ModelConfig {
        heads: 1,
        head_dim: 8,
        encoder_layers: 1,
        decoder_layers: 1,
        dropout: 0.0,
        batch: 8,
        lr: 2e-3,
        ffn_hidden: 32,
        ..ModelConfig::full_scale(nodes, input_width, k, classes)
    }
}

/// A config with the dataset's signature filled in.
pub fn config_for(ds: &Dataset, mut cfg: ModelConfig) -> ModelConfig {
    let m = &ds.manifest;
    cfg.nodes = m.nodes;
    cfg.input_width = m.a;
    cfg.k = m.k;
    cfg.classes = m.n;
    cfg
}

/// Penalty contexts for every sample, sharing one network structure.
pub fn penalty_contexts(ds: &Dataset, with_kkt: bool) -> Result<Vec<PenaltyContext>> {
    let kkt = with_kkt.then(|| Arc::new(KktStructure::new(ds.network(), &ds.path_sets)));
    ds.samples
        .iter()
        .map(|s| Ok(PenaltyContext::new(&s.demand, &ds.path_sets, &ds.manifest.target, kkt.clone())?))
        .collect()
}

pub fn examples<'a>(ds: &'a Dataset, pens: &'a [PenaltyContext], split: Split) -> Vec<Example<'a>> {
    ds.split_indices(split)
        .iter()
        .map(|&i| Example {
            input: &ds.samples[i].input,
            target: &ds.samples[i].target,
            penalty: &pens[i],
        })
        .collect()
}

/// Mean evaluation-mode loss terms over `examples`.
pub fn evaluate(model: &FlowTransformer, examples: &[Example<'_>]) -> Result<LossParts> {
    let mut parts = LossParts::default();
    for ex in examples {
        parts += model.evaluate(*ex)?;
    }
    Ok(parts.scaled(1.0 / examples.len().max(1) as f64))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train: LossParts,
    pub val: Option<LossParts>,
    pub seconds: f64,
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,train_loss,train_mse,val_loss,val_mse,eps_od,phi_kkt,wall_seconds\n");
    for r in history {
        let (vl, vm, od, kkt) = match r.val {
            Some(v) => (v.total, v.mse, v.od, v.kkt),
            None => (f64::NAN, f64::NAN, r.train.od, r.train.kkt),
        };
        let _ = writeln!(
            s,
            "{},{:e},{:e},{:e},{:e},{:e},{:e},{:.3}",
            r.epoch, r.train.total, r.train.mse, vl, vm, od, kkt, r.seconds
        );
    }
    s
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub history: Vec<EpochRecord>,
}

/// Trains on the train split and keeps the parameters with the lowest
/// validation loss (training loss when the validation split is empty).
/// With `out`, writes `history.csv`, `best.ckpt` and `last.ckpt` there.
/// `progress` sees every epoch as it finishes.
pub fn train(
    ds: &Dataset,
    cfg: ModelConfig,
    out: Option<&Path>,
    mut progress: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    let cfg = config_for(ds, cfg);
    let hash = ds.hash()?;
    let pens = penalty_contexts(ds, cfg.lambda_kkt > 0.0)?;
    let train_ex = examples(ds, &pens, Split::Train);
    let val_ex = examples(ds, &pens, Split::Val);
    let mut model = FlowTransformer::new(cfg.clone())?;
    let mut adam = Adam::new(model.params(), cfg.lr);
    let mut shuffle = rng::seeded(rng::derive(cfg.seed, SHUFFLE_TAG));
    let checkpoint = |model: &FlowTransformer, epoch: usize, val: Option<f64>| Checkpoint {
        manifest_hash: hash.clone(),
        manifest: ds.manifest.clone(),
        epoch,
        val_loss: val,
        model: model.clone(),
    };
    let start = Instant::now();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, Checkpoint)> = None;
    for epoch in 1..=cfg.epochs {
        let train = match model.train_epoch(&mut adam, &train_ex, epoch, &mut shuffle) {
            Ok(p) => p,
            Err(e @ pathflow_core::Error::Diverged { .. }) => {
                if let Some(dir) = out {
                    checkpoint(&model, epoch, None).save(&dir.join(DIVERGED_FILE))?;
                    write_file(&dir.join(HISTORY_FILE), history_csv(&history))?;
                }
                return Err(e.into());
            }
            Err(e) => return Err(e.into()),
        };
        let val = if val_ex.is_empty() {
            None
        } else {
            Some(evaluate(&model, &val_ex)?)
        };
        let rec = EpochRecord {
            epoch,
            train,
            val,
            seconds: start.elapsed().as_secs_f64(),
        };
        progress(&rec);
        history.push(rec);
        let score = val.map_or(train.total, |v| v.total);
        if !score.is_finite() {
            return Err(pathflow_core::Error::Diverged { epoch }.into());
        }
        if best.as_ref().is_none_or(|(b, _)| score < *b) {
            best = Some((score, checkpoint(&model, epoch, val.map(|v| v.total))));
        }
    }
    let last_val = history.last().and_then(|r| r.val.map(|v| v.total));
    let last = checkpoint(&model, cfg.epochs, last_val);
    let best = best.ok_or_else(|| Error::Format("training ran no epochs".into()))?.1;
    if let Some(dir) = out {
        write_file(&dir.join(HISTORY_FILE), history_csv(&history))?;
        best.save(&dir.join(BEST_FILE))?;
        last.save(&dir.join(LAST_FILE))?;
    }
    Ok(TrainOutcome { best, last, history })
}
