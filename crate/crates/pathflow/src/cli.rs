//! The `pathflow` command line.
//!
//! Exit codes: 0 success, 1 domain error, 2 usage error. Every command that
//! writes an output directory also writes `run.json` there: the arguments,
//! seeds, a config hash, versions and the SHA-256 of each output file.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use pathflow_core::datagen::{sample_demand, ScenarioSpec, TargetMode};
use pathflow_core::equilibrium::{solve_ue, SolverConfig};
use pathflow_core::metrics::DEFAULT_MAPE_FLOOR;
use pathflow_core::model::{DecoderInput, ModelConfig};
use pathflow_core::network::OdMatrix;
use pathflow_core::paths::{build_path_sets, DEFAULT_K};
use pathflow_core::rng;
use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::engine::Surrogate;
use crate::netio::{self, LoadedNetwork, NetSource};
use crate::output::{path_flows_csv, path_sets_jsonl, to_json, write_report, write_solution};
use crate::scenario::{self, Batch, Column};
use crate::service::{self, AppState, ADDR_ENV, DEFAULT_ADDR, SERVICE_SOLVER_ITERS};
use crate::store::{self, GenOptions, Split};
use crate::train::{self, BEST_FILE};
use crate::{Error, Result};

pub const RUN_FILE: &str = "run.json";
pub const TRUCK_MULTIPLIER: f64 = 1.5;
/// Files whose content includes wall-clock times.
const TIMED_FILES: [&str; 3] = ["timings.json", "history.csv", RUN_FILE];

#[derive(Parser, Debug)]
#[command(name = "pathflow", version, about = "Traffic assignment with a transformer surrogate")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a network bundle (TNTP net file plus JSON sidecar).
    GenNet(GenNetArgs),
    /// Generate a solved dataset.
    GenData(GenDataArgs),
    /// Solve one user-equilibrium instance.
    Solve(SolveArgs),
    /// Train the surrogate on a dataset.
    Train(TrainArgs),
    /// Predict path flows for one demand with a checkpoint.
    Predict(PredictArgs),
    /// Score a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Run a scenario template end to end.
    Scenario(ScenarioArgs),
    /// Serve the HTTP scenario API.
    Serve(ServeArgs),
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct NetArgs {
    /// `siouxfalls`, `grid:RxC`, or a bundle directory / .tntp file.
    #[arg(long, default_value = "siouxfalls")]
    pub net: String,
    /// Shorthand for `--net grid:RxC`.
    #[arg(long, value_name = "RxC")]
    pub grid: Option<String>,
    /// Vehicle classes: 1 (car) or 2 (car and truck).
    #[arg(long)]
    pub classes: Option<usize>,
    /// Seed for generated grids.
    #[arg(long = "net-seed", default_value_t = 0)]
    pub net_seed: u64,
}

impl NetArgs {
    fn source(&self) -> Result<NetSource> {
        match &self.grid {
            Some(g) => format!("grid:{g}").parse(),
            None => self.net.parse(),
        }
    }

    fn multipliers(&self) -> Result<Vec<f64>> {
        match self.classes {
            None => Ok(vec![]),
            Some(1) => Ok(vec![1.0]),
            Some(2) => Ok(vec![1.0, TRUCK_MULTIPLIER]),
            Some(c) => Err(Error::Format(format!("--classes must be 1 or 2, got {c}"))),
        }
    }

    fn load(&self) -> Result<LoadedNetwork> {
        netio::load(&self.source()?, &self.multipliers()?, self.net_seed)
    }
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct SolverArgs {
    /// Relative-gap tolerance.
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
    #[arg(long = "max-iters", default_value_t = 5000)]
    pub max_iters: usize,
}

impl SolverArgs {
    fn config(&self) -> SolverConfig {
        SolverConfig {
            rel_gap_tol: self.tol,
            max_iters: self.max_iters,
            ..SolverConfig::default()
        }
    }
}

#[derive(Args, Debug, Serialize)]
pub struct GenNetArgs {
    #[command(flatten)]
    pub net: NetArgs,
    /// Same as `--net-seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub net: NetArgs,
    #[arg(long = "od-missing", default_value_t = 0.3)]
    pub od_missing: f64,
    #[arg(long = "link-missing", default_value_t = 0.0)]
    pub link_missing: f64,
    /// Link ids to disable for every sample.
    #[arg(long = "remove-links", value_delimiter = ',')]
    pub remove_links: Vec<usize>,
    /// Demand range; defaults to 100–4000 on Sioux Falls, 50–500 otherwise.
    #[arg(long = "demand-min")]
    pub demand_min: Option<f64>,
    #[arg(long = "demand-max")]
    pub demand_max: Option<f64>,
    #[arg(long, default_value_t = 4000)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = DEFAULT_K)]
    pub k: usize,
    #[arg(long, value_enum, default_value_t = TargetArg::PerOdShare)]
    pub target: TargetArg,
    #[command(flatten)]
    pub solver: SolverArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(ValueEnum, Debug, Clone, Copy, Serialize)]
pub enum TargetArg {
    PerOdShare,
    GlobalMax,
}

impl From<TargetArg> for TargetMode {
    fn from(t: TargetArg) -> Self {
        match t {
            TargetArg::PerOdShare => TargetMode::PerOdShare,
            TargetArg::GlobalMax => TargetMode::GlobalMax,
        }
    }
}

fn default_demand_range(net: &LoadedNetwork) -> (f64, f64) {
    if net.name == "siouxfalls" {
        (100.0, 4000.0)
    } else {
        (50.0, 500.0)
    }
}

#[derive(Args, Debug, Serialize)]
pub struct DemandArgs {
    /// `base` (bundled Sioux Falls trips), a TNTP trips file, or `sample:SEED`
    /// to draw a demand the way a checkpoint's dataset did (`solve`: 30% of
    /// pairs empty, default demand range).
    #[arg(long)]
    pub trips: Option<String>,
    /// Second-class demand as a share of the first when reading trips.
    #[arg(long = "truck-share", default_value_t = pathflow_core::datagen::TRUCK_DEMAND_SHARE)]
    pub truck_share: f64,
    /// Multiplies the whole demand.
    #[arg(long = "demand-scale", default_value_t = 1.0)]
    pub demand_scale: f64,
}

impl DemandArgs {
    fn demand(&self, net: &LoadedNetwork, spec: Option<&ScenarioSpec>) -> Result<OdMatrix> {
        let trips = match (&self.trips, spec) {
            (Some(t), _) => t.clone(),
            (None, _) if net.name == "siouxfalls" => "base".into(),
            (None, Some(_)) => "sample:0".into(),
            (None, None) => return Err(Error::Format("--trips is required for this network".into())),
        };
        let od = if let Some(seed) = trips.strip_prefix("sample:") {
            let seed: u64 = seed
                .parse()
                .map_err(|_| Error::Format(format!("bad sample seed in `{trips}`")))?;
            let spec = spec.ok_or_else(|| Error::Format("`sample:` demand needs a checkpoint".into()))?;
            sample_demand(&net.network, spec, &mut rng::seeded(seed))?
        } else {
            netio::load_trips(&trips, &net.network, self.truck_share)?
        };
        if !(self.demand_scale.is_finite() && self.demand_scale > 0.0) {
            return Err(Error::Format("--demand-scale must be > 0".into()));
        }
        Ok(od.scaled(self.demand_scale))
    }
}

#[derive(Args, Debug, Serialize)]
pub struct SolveArgs {
    #[command(flatten)]
    pub net: NetArgs,
    #[command(flatten)]
    pub demand: DemandArgs,
    #[arg(long, default_value_t = DEFAULT_K)]
    pub k: usize,
    /// Link ids to disable.
    #[arg(long = "disable-links", value_delimiter = ',')]
    pub disable_links: Vec<usize>,
    #[command(flatten)]
    pub solver: SolverArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Preset {
    /// 8 heads of width 128, 8 encoder layers, batch 64, 100 epochs.
    Full,
    /// 1 head of width 8, 1 encoder layer, batch 8: trains on one CPU core.
    Desk,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct ModelArgs {
    #[arg(long, value_enum, default_value_t = Preset::Full)]
    pub preset: Preset,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long = "head-dim")]
    pub head_dim: Option<usize>,
    #[arg(long = "encoder-layers")]
    pub encoder_layers: Option<usize>,
    #[arg(long = "decoder-layers")]
    pub decoder_layers: Option<usize>,
    #[arg(long = "ffn-hidden")]
    pub ffn_hidden: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long = "lambda-od")]
    pub lambda_od: Option<f64>,
    #[arg(long = "lambda-kkt")]
    pub lambda_kkt: Option<f64>,
    /// `encoder-projection`, `teacher` or `zeros`.
    #[arg(long = "decoder-input")]
    pub decoder_input: Option<String>,
    #[arg(long = "train-seed", default_value_t = 0)]
    pub train_seed: u64,
}

impl ModelArgs {
    pub fn config(&self) -> Result<ModelConfig> {
        let mut c = match self.preset {
            Preset::Full => ModelConfig::full_scale(1, 1, 1, 1),
            Preset::Desk => train::desk_config(1, 1, 1, 1),
        };
        macro_rules! set {
            ($($f:ident),*) => { $(if let Some(v) = self.$f { c.$f = v; })* };
        }
        set!(heads, head_dim, encoder_layers, decoder_layers, ffn_hidden, dropout, batch, epochs, lr, lambda_od, lambda_kkt);
        if let Some(d) = &self.decoder_input {
            c.decoder_input = d.parse::<DecoderInput>()?;
        }
        c.seed = self.train_seed;
        Ok(c)
    }
}

#[derive(Args, Debug, Serialize)]
pub struct TrainArgs {
    /// Dataset directory written by `gen-data`.
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub net: NetArgs,
    #[command(flatten)]
    pub demand: DemandArgs,
    #[arg(long = "disable-links", value_delimiter = ',')]
    pub disable_links: Vec<usize>,
    /// Rescale shares so every OD total equals its demand.
    #[arg(long, default_value_t = false)]
    pub renormalize: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    #[arg(long, default_value_t = DEFAULT_MAPE_FLOOR)]
    pub floor: f64,
    #[arg(long, default_value_t = false)]
    pub renormalize: bool,
    /// Samples to re-solve for the speedup figure (0 skips timing).
    #[arg(long = "solve-samples", default_value_t = 5)]
    pub solve_samples: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(ValueEnum, Debug, Clone, Copy, Serialize)]
pub enum SplitArg {
    Train,
    Val,
    Test,
    All,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Template {
    /// Random link removal at several ratios; one model trained per ratio.
    LinkMissing,
    /// Fixed numbers of removed links, scored without retraining.
    RemovedLinks,
    /// Car and truck classes.
    Multiclass,
    /// A larger network at a high OD missing ratio.
    Scale,
}

#[derive(Args, Debug, Serialize)]
pub struct ScenarioArgs {
    #[arg(long, value_enum)]
    pub template: Template,
    #[command(flatten)]
    pub net: NetArgs,
    /// Model to score; when absent one is trained with `--preset` etc.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long = "od-missing")]
    pub od_missing: Option<f64>,
    /// Link missing ratios (link-missing template).
    #[arg(long, value_delimiter = ',', default_value = "0,0.05,0.1")]
    pub ratios: Vec<f64>,
    /// Removed-link counts (removed-links template).
    #[arg(long, value_delimiter = ',', default_value = "0,2,3")]
    pub counts: Vec<usize>,
    #[arg(long, default_value_t = 500)]
    pub samples: usize,
    /// Samples per column for scoring a shared model.
    #[arg(long = "eval-samples", default_value_t = 100)]
    pub eval_samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = DEFAULT_K)]
    pub k: usize,
    #[command(flatten)]
    pub solver: SolverArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = DEFAULT_MAPE_FLOOR)]
    pub floor: f64,
    #[arg(long, default_value_t = false)]
    pub renormalize: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct ServeArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[command(flatten)]
    pub net: NetArgs,
    #[command(flatten)]
    pub demand: DemandArgs,
    /// Bind address; falls back to $PATHFLOW_ADDR, then 127.0.0.1:8080.
    #[arg(long)]
    pub addr: Option<String>,
    /// Iteration budget of solver requests.
    #[arg(long = "solver-iters", default_value_t = SERVICE_SOLVER_ITERS)]
    pub solver_iters: usize,
    #[arg(long = "solver-tol", default_value_t = 1e-6)]
    pub solver_tol: f64,
    #[arg(long, default_value_t = DEFAULT_K)]
    pub k: usize,
}

/// Reproducibility record written as `run.json`.
#[derive(Debug, Serialize)]
pub struct RunStanza {
    pub command: String,
    pub argv: Vec<String>,
    pub seeds: BTreeMap<String, u64>,
    pub config: serde_json::Value,
    pub config_hash: String,
    pub version: String,
    pub target: String,
    /// SHA-256 per output file, relative path → hex. Files that carry wall
    /// times are listed with `"timed"` instead.
    pub outputs: BTreeMap<String, String>,
}

fn hash_outputs(dir: &Path) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).map_err(|e| Error::io(&d, e))? {
            let p = entry.map_err(|e| Error::io(&d, e))?.path();
            if p.is_dir() {
                stack.push(p);
                continue;
            }
            let rel = p.strip_prefix(dir).unwrap_or(&p).to_string_lossy().replace('\\', "/");
            let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
            let value = if TIMED_FILES.contains(&name) {
                "timed".to_string()
            } else {
                store::sha256_hex(&fs::read(&p).map_err(|e| Error::io(&p, e))?)
            };
            out.insert(rel, value);
        }
    }
    out.remove(RUN_FILE);
    Ok(out)
}

fn write_stanza(dir: &Path, command: &str, argv: &[String], seeds: &[(&str, u64)], config: &impl Serialize) -> Result<()> {
    let config = serde_json::to_value(config)?;
    let config_hash = store::sha256_hex(serde_json::to_string(&config)?.as_bytes());
    let stanza = RunStanza {
        command: command.into(),
        argv: argv.to_vec(),
        seeds: seeds.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        config,
        config_hash,
        version: env!("CARGO_PKG_VERSION").into(),
        target: format!("{}-{}", std::env::consts::ARCH, std::env::consts::OS),
        outputs: hash_outputs(dir)?,
    };
    netio::write_file(&dir.join(RUN_FILE), to_json(&stanza)?)
}

/// Parses `argv` and runs the command; returns the process exit code.
pub fn main_with(argv: Vec<String>) -> i32 {
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli, &argv) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

pub fn run(cli: Cli, argv: &[String]) -> Result<()> {
    match cli.command {
        Command::GenNet(a) => gen_net(a, argv),
        Command::GenData(a) => gen_data(a, argv),
        Command::Solve(a) => solve(a, argv),
        Command::Train(a) => train_cmd(a, argv),
        Command::Predict(a) => predict(a, argv),
        Command::Eval(a) => eval(a, argv),
        Command::Scenario(a) => scenario_cmd(a, argv),
        Command::Serve(a) => serve(a),
    }
}

fn gen_net(mut a: GenNetArgs, argv: &[String]) -> Result<()> {
    if let Some(s) = a.seed {
        a.net.net_seed = s;
    }
    let net = a.net.load()?;
    netio::save(&a.out, &net)?;
    eprintln!(
        "{}: {} nodes, {} links -> {}",
        net.name,
        net.network.node_count(),
        net.network.link_count(),
        a.out.display()
    );
    write_stanza(&a.out, "gen-net", argv, &[("net_seed", a.net.net_seed)], &a)
}

fn gen_data(a: GenDataArgs, argv: &[String]) -> Result<()> {
    let base = a.net.load()?;
    let (lo, hi) = default_demand_range(&base);
    let spec = ScenarioSpec {
        od_missing_ratio: a.od_missing,
        link_missing_ratio: a.link_missing,
        removed_links: a.remove_links.clone(),
        classes: base.network.class_count(),
        demand_range: (a.demand_min.unwrap_or(lo), a.demand_max.unwrap_or(hi)),
        n_samples: a.samples,
        seed: a.seed,
    };
    let opts = GenOptions {
        k: a.k,
        target: a.target.into(),
        solver: a.solver.config(),
    };
    let t = Instant::now();
    let ds = store::generate(&base, &spec, &opts)?;
    store::save(&a.out, &ds)?;
    let (tr, va, te) = ds.manifest.split.sizes();
    let unconverged = ds.manifest.labels.iter().filter(|l| !l.converged).count();
    eprintln!(
        "{} samples ({tr}/{va}/{te}) in {:.1}s, {unconverged} unconverged, manifest {}",
        spec.n_samples,
        t.elapsed().as_secs_f64(),
        ds.hash()?
    );
    write_stanza(&a.out, "gen-data", argv, &[("seed", a.seed), ("net_seed", a.net.net_seed)], &a)
}

fn solve(a: SolveArgs, argv: &[String]) -> Result<()> {
    let mut net = a.net.load()?;
    if !a.disable_links.is_empty() {
        let mut off = net.network.disabled_links();
        off.extend(&a.disable_links);
        off.sort_unstable();
        off.dedup();
        net.network = net.network.with_disabled(&off)?;
    }
    let spec = ScenarioSpec {
        od_missing_ratio: 0.3,
        link_missing_ratio: 0.0,
        removed_links: vec![],
        classes: net.network.class_count(),
        demand_range: default_demand_range(&net),
        n_samples: 1,
        seed: 0,
    };
    let demand = a.demand.demand(&net, Some(&spec))?;
    let sets = build_path_sets(&net.network, a.k);
    let cfg = a.solver.config();
    let t = Instant::now();
    let sol = solve_ue(&net.network, &demand, &sets, &cfg)?;
    let secs = t.elapsed().as_secs_f64();
    write_solution(&a.out, &net.name, &net.network, &sets, &demand, &sol)?;
    netio::write_file(&a.out.join("paths.jsonl"), path_sets_jsonl(&sets)?)?;
    netio::write_file(&a.out.join("timings.json"), to_json(&serde_json::json!({ "solve_seconds": secs }))?)?;
    eprintln!(
        "rel_gap {:.3e} after {} iterations ({}), {:.3}s",
        sol.rel_gap,
        sol.iterations,
        if sol.converged { "converged" } else { "not converged" },
        secs
    );
    write_stanza(&a.out, "solve", argv, &[("net_seed", a.net.net_seed)], &a)
}

fn train_cmd(a: TrainArgs, argv: &[String]) -> Result<()> {
    let ds = store::load(&a.data)?;
    let cfg = a.model.config()?;
    let out = train::train(&ds, cfg.clone(), Some(&a.out), |r| {
        let val = r.val.map_or(String::from("-"), |v| format!("{:.4e}", v.total));
        eprintln!(
            "epoch {:>3}  train {:.4e}  val {val}  od {:.3e}  {:.1}s",
            r.epoch, r.train.total, r.train.od, r.seconds
        );
    })?;
    eprintln!("best epoch {} -> {}", out.best.epoch, a.out.join(BEST_FILE).display());
    write_stanza(&a.out, "train", argv, &[("train_seed", cfg.seed), ("data_seed", ds.manifest.spec.seed)], &a)
}

fn load_surrogate(path: &Path) -> Result<Surrogate> {
    Ok(Surrogate::new(Checkpoint::load(path).map_err(|e| e.in_stage("checkpoint"))?))
}

fn predict(a: PredictArgs, argv: &[String]) -> Result<()> {
    let sur = load_surrogate(&a.checkpoint)?;
    let mut net = a.net.load()?;
    if a.net.classes.is_none() && net.network.class_count() != sur.manifest().n {
        net = netio::load(&a.net.source()?, &sur.manifest().class_multipliers, a.net.net_seed)?;
    }
    let mut off = net.network.disabled_links();
    off.extend(&sur.manifest().disabled_links);
    off.extend(&a.disable_links);
    off.sort_unstable();
    off.dedup();
    net.network = net.network.with_disabled(&off)?;
    let demand = a.demand.demand(&net, Some(&sur.manifest().spec))?;
    let sets = build_path_sets(&net.network, sur.manifest().k);
    let p = sur.predict(&net.network, &demand, &sets, a.renormalize)?;
    netio::write_file(&a.out.join("path_flows.csv"), path_flows_csv(&net.network, &sets, &demand, &p.flows)?)?;
    netio::write_file(&a.out.join("timings.json"), to_json(&serde_json::json!({ "inference_seconds": p.seconds }))?)?;
    eprintln!("predicted in {:.2} ms", p.seconds * 1e3);
    write_stanza(&a.out, "predict", argv, &[("net_seed", a.net.net_seed)], &a)
}

fn eval(a: EvalArgs, argv: &[String]) -> Result<()> {
    let sur = load_surrogate(&a.checkpoint)?;
    let ds = store::load(&a.data)?;
    let idx: Vec<usize> = match a.split {
        SplitArg::Train => ds.split_indices(Split::Train).to_vec(),
        SplitArg::Val => ds.split_indices(Split::Val).to_vec(),
        SplitArg::Test => ds.split_indices(Split::Test).to_vec(),
        SplitArg::All => (0..ds.samples.len()).collect(),
    };
    let name = format!("{}:{:?}", ds.manifest.network, a.split).to_lowercase();
    let (report, _) = crate::engine::evaluate_samples(&sur, &ds, &idx, a.renormalize, a.floor, &name, a.solve_samples)?;
    write_report(&a.out, ds.network(), &report)?;
    for c in &report.classes {
        eprintln!("class {}: MAE {:.3}  MAPE {:.2}%  AD diff {:.4}", c.class, c.mae, c.mape, c.ad_difference);
    }
    write_stanza(&a.out, "eval", argv, &[("data_seed", ds.manifest.spec.seed)], &a)
}

fn scenario_cmd(a: ScenarioArgs, argv: &[String]) -> Result<()> {
    let mut net_args = a.net.clone();
    if a.template == Template::Multiclass {
        net_args.classes = Some(2);
    }
    let base = net_args.load()?;
    let (lo, hi) = default_demand_range(&base);
    let od_missing = a.od_missing.unwrap_or(if a.template == Template::Scale { 0.5 } else { 0.3 });
    let spec = |link_missing: f64, removed: Vec<usize>, n: usize, seed: u64| ScenarioSpec {
        od_missing_ratio: od_missing,
        link_missing_ratio: link_missing,
        removed_links: removed,
        classes: base.network.class_count(),
        demand_range: (lo, hi),
        n_samples: n,
        seed,
    };
    let shared_spec = spec(0.0, vec![], a.samples, a.seed);
    let columns: Vec<Column> = match a.template {
        Template::LinkMissing => a
            .ratios
            .iter()
            .map(|&r| Column {
                name: format!("link-missing-{r}"),
                spec: spec(r, vec![], a.samples, a.seed),
                train_here: a.checkpoint.is_none(),
            })
            .collect(),
        Template::RemovedLinks => a
            .counts
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let links = scenario::draw_removed_links(&base.network, c, a.k, a.seed)?;
                Ok(Column {
                    name: format!("removed-{c}"),
                    spec: spec(0.0, links, a.eval_samples, a.seed + 1 + i as u64),
                    train_here: false,
                })
            })
            .collect::<Result<_>>()?,
        Template::Multiclass | Template::Scale => vec![Column {
            name: format!("{:?}", a.template).to_lowercase(),
            spec: spec(0.0, vec![], a.samples, a.seed),
            train_here: a.checkpoint.is_none(),
        }],
    };
    let shared = a.checkpoint.as_deref().map(Checkpoint::load).transpose()?;
    let batch = Batch {
        base: &base,
        gen: GenOptions {
            k: a.k,
            target: TargetMode::PerOdShare,
            solver: a.solver.config(),
        },
        model: a.model.config()?,
        floor: a.floor,
        renormalize: a.renormalize,
        solve_samples: 0,
    };
    let results = scenario::run(&batch, &columns, shared, Some(&shared_spec), Some(&a.out), |m| eprintln!("{m}"))?;
    for r in &results {
        let mapes: Vec<String> = r.report.classes.iter().map(|c| format!("{:.2}%", c.mape)).collect();
        eprintln!("{}: path-flow MAPE {}", r.column.name, mapes.join(" / "));
    }
    netio::write_file(&a.out.join("columns.json"), to_json(&columns)?)?;
    write_stanza(&a.out, "scenario", argv, &[("seed", a.seed), ("train_seed", a.model.train_seed)], &a)
}

fn serve(a: ServeArgs) -> Result<()> {
    let sur = a.checkpoint.as_deref().map(load_surrogate).transpose()?;
    let mut net = a.net.load()?;
    if let Some(s) = &sur {
        if a.net.classes.is_none() {
            net = netio::load(&a.net.source()?, &s.manifest().class_multipliers, a.net.net_seed)?;
        }
        if !s.manifest().disabled_links.is_empty() {
            net.network = net.network.with_disabled(&s.manifest().disabled_links)?;
        }
    }
    let demand = a.demand.demand(&net, sur.as_ref().map(|s| &s.manifest().spec))?;
    let solver = SolverConfig {
        max_iters: a.solver_iters,
        rel_gap_tol: a.solver_tol,
        ..SolverConfig::default()
    };
    let state = Arc::new(AppState::new(net, demand, sur, a.k, solver)?);
    let addr = a
        .addr
        .or_else(|| std::env::var(ADDR_ENV).ok())
        .unwrap_or_else(|| DEFAULT_ADDR.to_string());
    let rt = tokio::runtime::Runtime::new().map_err(|e| Error::io("tokio runtime", e))?;
    rt.block_on(service::serve(state, &addr))
}
