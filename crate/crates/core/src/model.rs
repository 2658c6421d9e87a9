//! The flow transformer: an encoder over OD-pair rows, a single-pass decoder
//! that reads the encoder output through cross-attention, and a sigmoid head
//! giving per-slot path-flow shares.
//!
//! Residual streams keep the feature width: `a` in the encoder, `k·n` in the
//! decoder. Each attention head projects to `head_dim` and the concatenated
//! heads are mapped back to the stream width by `W_o`. Layer structure:
//!
//! ```text
//! E' = LN(LN(X + Drop(MHA(X, X))))          E = LN(LN(E' + Drop(FFN(E'))))
//! D' = LN(F + Drop(MHA(F, F)))
//! D'' = LN(LN(D' + Drop(MHA(D', E))))       D = LN(LN(D'' + Drop(FFN(D''))))
//! out = sigmoid(D)
//! ```

use alloc::format;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::datagen::{TargetMode, TargetScale};
use crate::network::{Network, OdMatrix};
use crate::paths::PathSets;
use crate::rng::{self, Rng};
use crate::tensor::{Adam, ParamStore, SparseRows, Tape, Tensor, Var};
use crate::{Error, Result};

/// What the decoder receives as its input sequence `F`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum DecoderInput {
    /// `F = E·W_in` with a learned `a × k·n` map, identical in training and
    /// inference.
    #[default]
    EncoderProjection,
    /// Normalized ground truth while training, zeros at inference.
    Teacher,
    /// Zeros in both modes.
    Zeros,
}

impl core::str::FromStr for DecoderInput {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "encoder-projection" => Ok(DecoderInput::EncoderProjection),
            "teacher" => Ok(DecoderInput::Teacher),
            "zeros" => Ok(DecoderInput::Zeros),
            other => Err(Error::Config(format!("unknown decoder input `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub heads: usize,
    pub head_dim: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub dropout: f64,
    pub batch: usize,
    pub epochs: usize,
    pub lr: f64,
    pub ffn_hidden: usize,
    pub lambda_od: f64,
    pub lambda_kkt: f64,
    pub decoder_input: DecoderInput,
    /// Seeds initialization, shuffling and dropout.
    pub seed: u64,
    pub nodes: usize,
    pub input_width: usize,
    pub k: usize,
    pub classes: usize,
}

impl ModelConfig {
    /// Full-size hyperparameters for a given signature.
    pub fn full_scale(nodes: usize, input_width: usize, k: usize, classes: usize) -> Self {
        ModelConfig {
            heads: 8,
            head_dim: 128,
            encoder_layers: 8,
            decoder_layers: 1,
            dropout: 0.1,
            batch: 64,
            epochs: 100,
            lr: 1e-3,
            ffn_hidden: 512,
            lambda_od: 0.1,
            lambda_kkt: 0.0,
            decoder_input: DecoderInput::EncoderProjection,
            seed: 0,
            nodes,
            input_width,
            k,
            classes,
        }
    }

    pub fn output_width(&self) -> usize {
        self.k * self.classes
    }

    pub fn rows(&self) -> usize {
        self.nodes * self.nodes
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("heads", self.heads),
            ("head_dim", self.head_dim),
            ("encoder_layers", self.encoder_layers),
            ("decoder_layers", self.decoder_layers),
            ("batch", self.batch),
            ("epochs", self.epochs),
            ("ffn_hidden", self.ffn_hidden),
            ("nodes", self.nodes),
            ("input_width", self.input_width),
            ("k", self.k),
            ("classes", self.classes),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must be in [0, 1)".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("lr must be > 0".into()));
        }
        if !(self.lambda_od >= 0.0 && self.lambda_kkt >= 0.0) {
            return Err(Error::Config("penalty weights must be >= 0".into()));
        }
        Ok(())
    }
}

/// Attention weights: one (W_Q, W_K, W_V) triple per head and W_o.
#[derive(Debug, Clone, PartialEq)]
pub struct Attention<T> {
    pub q: Vec<T>,
    pub k: Vec<T>,
    pub v: Vec<T>,
    pub o: T,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Norm<T> {
    pub gain: T,
    pub bias: T,
}

/// `w2` maps the stream into the hidden width, `w1` back out.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder<T> {
    pub attn: Attention<T>,
    pub w2: T,
    pub w1: T,
    pub ln: [Norm<T>; 4],
}

/// `w4` maps the stream into the hidden width, `w3` back out.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoder<T> {
    pub self_attn: Attention<T>,
    pub cross: Attention<T>,
    pub w4: T,
    pub w3: T,
    pub ln: [Norm<T>; 5],
}

impl Attention<usize> {
    fn bind(&self, p: &[Var]) -> Attention<Var> {
        Attention {
            q: self.q.iter().map(|&i| p[i]).collect(),
            k: self.k.iter().map(|&i| p[i]).collect(),
            v: self.v.iter().map(|&i| p[i]).collect(),
            o: p[self.o],
        }
    }
}

impl Norm<usize> {
    fn bind(&self, p: &[Var]) -> Norm<Var> {
        Norm {
            gain: p[self.gain],
            bias: p[self.bias],
        }
    }
}

impl Encoder<usize> {
    fn bind(&self, p: &[Var]) -> Encoder<Var> {
        Encoder {
            attn: self.attn.bind(p),
            w2: p[self.w2],
            w1: p[self.w1],
            ln: self.ln.map(|n| n.bind(p)),
        }
    }
}

impl Decoder<usize> {
    fn bind(&self, p: &[Var]) -> Decoder<Var> {
        Decoder {
            self_attn: self.self_attn.bind(p),
            cross: self.cross.bind(p),
            w4: p[self.w4],
            w3: p[self.w3],
            ln: self.ln.map(|n| n.bind(p)),
        }
    }
}

type Attn = Attention<usize>;
type Ln = Norm<usize>;
type EncLayer = Encoder<usize>;
type DecLayer = Decoder<usize>;

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    enc: Vec<EncLayer>,
    dec: Vec<DecLayer>,
    dec_in: Option<usize>,
}

/// Declares every parameter in a fixed order; `init` supplies the values.
fn declare(cfg: &ModelConfig, mut init: impl FnMut(String, &[usize], Init) -> usize) -> Layout {
    let (a, w, d, h, f) = (cfg.input_width, cfg.output_width(), cfg.head_dim, cfg.heads, cfg.ffn_hidden);
    let mut attn = |prefix: &str, q_in: usize, kv_in: usize, out: usize| Attn {
        q: (0..h).map(|i| init(format!("{prefix}.h{i}.wq"), &[q_in, d], Init::Xavier)).collect(),
        k: (0..h).map(|i| init(format!("{prefix}.h{i}.wk"), &[kv_in, d], Init::Xavier)).collect(),
        v: (0..h).map(|i| init(format!("{prefix}.h{i}.wv"), &[kv_in, d], Init::Xavier)).collect(),
        o: init(format!("{prefix}.wo"), &[d * h, out], Init::Xavier),
    };
    let mut enc_attn = Vec::new();
    for l in 0..cfg.encoder_layers {
        enc_attn.push(attn(&format!("enc{l}.attn"), a, a, a));
    }
    let mut dec_attn = Vec::new();
    for l in 0..cfg.decoder_layers {
        let s = attn(&format!("dec{l}.self"), w, w, w);
        let c = attn(&format!("dec{l}.cross"), w, a, w);
        dec_attn.push((s, c));
    }
    drop(attn);
    let mut ln = |name: String, width: usize| Ln {
        gain: init(format!("{name}.gain"), &[width], Init::Ones),
        bias: init(format!("{name}.bias"), &[width], Init::Zeros),
    };
    let mut enc = Vec::new();
    for (l, attn) in enc_attn.into_iter().enumerate() {
        let lns = [0, 1, 2, 3].map(|i| ln(format!("enc{l}.ln{i}"), a));
        enc.push((attn, lns));
    }
    let mut dec = Vec::new();
    for (l, (s, c)) in dec_attn.into_iter().enumerate() {
        let lns = [0, 1, 2, 3, 4].map(|i| ln(format!("dec{l}.ln{i}"), w));
        dec.push((s, c, lns));
    }
    drop(ln);
    let enc = enc
        .into_iter()
        .enumerate()
        .map(|(l, (attn, ln))| EncLayer {
            attn,
            w2: init(format!("enc{l}.ffn.w2"), &[a, f], Init::Xavier),
            w1: init(format!("enc{l}.ffn.w1"), &[f, a], Init::Xavier),
            ln,
        })
        .collect();
    let dec = dec
        .into_iter()
        .enumerate()
        .map(|(l, (self_attn, cross, ln))| DecLayer {
            self_attn,
            cross,
            w4: init(format!("dec{l}.ffn.w4"), &[w, f], Init::Xavier),
            w3: init(format!("dec{l}.ffn.w3"), &[f, w], Init::Xavier),
            ln,
        })
        .collect();
    let dec_in = (cfg.decoder_input == DecoderInput::EncoderProjection)
        .then(|| init("dec.in.w".into(), &[a, w], Init::Xavier));
    Layout { enc, dec, dec_in }
}

#[derive(Clone, Copy)]
enum Init {
    Xavier,
    Ones,
    Zeros,
}

/// Per-sample data for the conservation and complementarity penalties.
#[derive(Debug, Clone)]
pub struct PenaltyContext {
    /// Maps a prediction entry to vehicles: demand (or the global scale) on
    /// real slots, 0 on padded ones. Shape (N², k·n).
    pub flow_scale: Tensor,
    /// Demand per (pair, class), shape (N²·n, 1).
    pub demand: Tensor,
    /// |R|·n with |R| the pairs carrying demand.
    pub demanded: usize,
    /// Mean demand over demanded (pair, class) entries.
    pub mean_demand: f64,
    pub kkt: Option<Arc<KktStructure>>,
}

/// Network structure needed to recompute congested costs from predicted
/// path flows inside the graph.
#[derive(Debug, Clone)]
pub struct KktStructure {
    /// Prediction entries (flattened) → total link flow.
    pub link_load: Arc<SparseRows>,
    /// Link times → class path cost per prediction entry.
    pub path_cost: Arc<SparseRows>,
    /// Link time → its value again, per prediction entry's class minimum.
    pub t0: Arc<Vec<f64>>,
    pub capacity: Arc<Vec<f64>>,
    /// Real (non-padded) prediction entries.
    pub valid: Vec<bool>,
    /// Broadcast of the per-(pair, class) minimum back to its k slots.
    pub spread: Arc<SparseRows>,
    /// Mean rank-1 free-flow path cost, used to make φ dimensionless.
    pub mean_cost: f64,
}

impl KktStructure {
    pub fn new(network: &Network, path_sets: &PathSets) -> Self {
        let (n, k) = (network.class_count(), path_sets.k());
        let rows = path_sets.len();
        let w = n * k;
        let width = rows * w;
        let mut link_rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); network.link_count()];
        let mut cost_rows = Vec::with_capacity(width);
        let mut valid = Vec::with_capacity(width);
        let mut costs = 0.0;
        let mut count = 0usize;
        for r in 0..rows {
            let set = path_sets.pair(r);
            if set.reachable && set.origin != set.dest {
                costs += set.paths[0].freeflow_cost;
                count += 1;
            }
            for z in 0..n {
                let mu = network.classes()[z].freeflow_multiplier;
                for p in 0..k {
                    let idx = r * w + z * k + p;
                    let real = !set.pad_mask[p];
                    valid.push(real);
                    if real {
                        for &e in &set.paths[p].links {
                            link_rows[e].push((idx, 1.0));
                        }
                        cost_rows.push(set.paths[p].links.iter().map(|&e| (e, mu)).collect());
                    } else {
                        cost_rows.push(Vec::new());
                    }
                }
            }
        }
        let spread = SparseRows {
            width: rows * n,
            rows: (0..width).map(|i| vec![(i / k, 1.0)]).collect(),
        };
        KktStructure {
            link_load: Arc::new(SparseRows {
                width,
                rows: link_rows,
            }),
            path_cost: Arc::new(SparseRows {
                width: network.link_count(),
                rows: cost_rows,
            }),
            t0: Arc::new(network.links().iter().map(|l| l.freeflow_time).collect()),
            capacity: Arc::new(network.links().iter().map(|l| l.capacity).collect()),
            valid,
            spread: Arc::new(spread),
            mean_cost: if count > 0 { costs / count as f64 } else { 1.0 },
        }
    }
}

impl PenaltyContext {
    pub fn new(demand: &OdMatrix, path_sets: &PathSets, scale: &TargetScale, kkt: Option<Arc<KktStructure>>) -> Result<Self> {
        let (n, k) = (demand.classes(), path_sets.k());
        let rows = path_sets.len();
        if demand.nodes() * demand.nodes() != rows {
            return Err(Error::Contract("penalty context: demand and path sets disagree".into()));
        }
        let w = n * k;
        let mut flow_scale = vec![0.0; rows * w];
        let mut dem = vec![0.0; rows * n];
        let mut demanded_pairs = 0;
        let mut total = 0.0;
        let mut entries = 0usize;
        for r in 0..rows {
            let pad = &path_sets.pair(r).pad_mask;
            if demand.pair_total(r) > 0.0 {
                demanded_pairs += 1;
            }
            for z in 0..n {
                let x = demand.get(r, z);
                dem[r * n + z] = x;
                if x > 0.0 {
                    total += x;
                    entries += 1;
                }
                for p in 0..k {
                    if !pad[p] && x > 0.0 {
                        flow_scale[r * w + z * k + p] = match scale.mode {
                            TargetMode::PerOdShare => x,
                            TargetMode::GlobalMax => scale.global_max,
                        };
                    }
                }
            }
        }
        Ok(PenaltyContext {
            flow_scale: Tensor::new(vec![rows, w], flow_scale)?,
            demand: Tensor::new(vec![rows * n, 1], dem)?,
            demanded: demanded_pairs * n,
            mean_demand: if entries > 0 { total / entries as f64 } else { 1.0 },
            kkt,
        })
    }
}

/// One training example as the model sees it.
#[derive(Debug, Clone, Copy)]
pub struct Example<'a> {
    pub input: &'a Tensor,
    pub target: &'a Tensor,
    pub penalty: &'a PenaltyContext,
}

/// Loss terms of one forward pass.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub mse: f64,
    /// ε_OD divided by the mean OD demand.
    pub od: f64,
    /// φ_KKT divided by mean demand times mean free-flow path cost.
    pub kkt: f64,
}

impl core::ops::AddAssign for LossParts {
    fn add_assign(&mut self, o: Self) {
        self.total += o.total;
        self.mse += o.mse;
        self.od += o.od;
        self.kkt += o.kkt;
    }
}

impl LossParts {
    pub fn scaled(self, c: f64) -> Self {
        LossParts {
            total: self.total * c,
            mse: self.mse * c,
            od: self.od * c,
            kkt: self.kkt * c,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowTransformer {
    config: ModelConfig,
    params: ParamStore,
    layout: Layout,
}

/// Dropout settings threaded through the layers.
pub struct Dropout<'a> {
    pub rate: f64,
    pub training: bool,
    pub rng: &'a mut Rng,
}

impl Dropout<'_> {
    fn apply(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        tape.dropout(x, self.rate, self.training, self.rng)
    }
}

/// `softmax(Q·Kᵀ/√d)·V` with Q = xq·W_Q, K = xkv·W_K, V = xkv·W_V.
pub fn single_head_attention(tape: &mut Tape, xq: Var, xkv: Var, wq: Var, wk: Var, wv: Var) -> Result<Var> {
    let d = tape.value(wq).cols();
    let q = tape.matmul(xq, wq)?;
    let k = tape.matmul(xkv, wk)?;
    let v = tape.matmul(xkv, wv)?;
    if tape.value(k).cols() != d || tape.value(v).rows() != tape.value(k).rows() {
        return Err(Error::Shape {
            op: "attention",
            left: tape.value(q).shape().to_vec(),
            right: tape.value(k).shape().to_vec(),
        });
    }
    let s = tape.matmul_nt(q, k)?;
    let s = tape.scale(s, 1.0 / libm::sqrt(d as f64));
    let a = tape.softmax_lastdim(s);
    tape.matmul(a, v)
}

/// Heads concatenated along the last dimension, then mapped by W_o.
pub fn multi_head(tape: &mut Tape, xq: Var, xkv: Var, w: &Attention<Var>) -> Result<Var> {
    let mut heads = Vec::with_capacity(w.q.len());
    for h in 0..w.q.len() {
        heads.push(single_head_attention(tape, xq, xkv, w.q[h], w.k[h], w.v[h])?);
    }
    let cat = if heads.len() == 1 {
        heads[0]
    } else {
        tape.concat_last_dim(&heads)?
    };
    tape.matmul(cat, w.o)
}

fn ln(tape: &mut Tape, x: Var, n: &Norm<Var>) -> Result<Var> {
    tape.layernorm(x, n.gain, n.bias)
}

fn ffn(tape: &mut Tape, x: Var, inner: Var, outer: Var) -> Result<Var> {
    let h = tape.matmul(x, inner)?;
    let h = tape.relu(h);
    tape.matmul(h, outer)
}

/// `E' = LN(LN(X + Drop(MHA(X, X))))`, `E = LN(LN(E' + Drop(FFN(E'))))`.
pub fn encoder_layer(tape: &mut Tape, x: Var, w: &Encoder<Var>, drop: &mut Dropout<'_>) -> Result<Var> {
    let g = multi_head(tape, x, x, &w.attn)?;
    let g = drop.apply(tape, g)?;
    let s = tape.add(x, g)?;
    let s = ln(tape, s, &w.ln[0])?;
    let e1 = ln(tape, s, &w.ln[1])?;
    let f = ffn(tape, e1, w.w2, w.w1)?;
    let f = drop.apply(tape, f)?;
    let s = tape.add(e1, f)?;
    let s = ln(tape, s, &w.ln[2])?;
    ln(tape, s, &w.ln[3])
}

/// `D' = LN(F + Drop(MHA(F, F)))`, `D'' = LN(LN(D' + Drop(MHA(D', E))))`,
/// `D = LN(LN(D'' + Drop(FFN(D''))))`.
pub fn decoder_layer(tape: &mut Tape, f_in: Var, e: Var, w: &Decoder<Var>, drop: &mut Dropout<'_>) -> Result<Var> {
    if tape.value(f_in).rows() != tape.value(e).rows() {
        return Err(Error::Shape {
            op: "decoder_layer",
            left: tape.value(f_in).shape().to_vec(),
            right: tape.value(e).shape().to_vec(),
        });
    }
    let g1 = multi_head(tape, f_in, f_in, &w.self_attn)?;
    let g1 = drop.apply(tape, g1)?;
    let s = tape.add(f_in, g1)?;
    let d1 = ln(tape, s, &w.ln[0])?;
    let g2 = multi_head(tape, d1, e, &w.cross)?;
    let g2 = drop.apply(tape, g2)?;
    let s = tape.add(d1, g2)?;
    let s = ln(tape, s, &w.ln[1])?;
    let d2 = ln(tape, s, &w.ln[2])?;
    let f = ffn(tape, d2, w.w4, w.w3)?;
    let f = drop.apply(tape, f)?;
    let s = tape.add(d2, f)?;
    let s = ln(tape, s, &w.ln[3])?;
    ln(tape, s, &w.ln[4])
}

impl FlowTransformer {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::seeded(rng::derive(config.seed, 0x1417));
        let mut params = ParamStore::new();
        let layout = declare(&config, |name, shape, init| {
            let t = match init {
                Init::Xavier => {
                    let limit = libm::sqrt(6.0 / (shape[0] + shape[1]) as f64);
                    Tensor::uniform(shape, limit, &mut rng)
                }
                Init::Ones => Tensor::full(shape, 1.0),
                Init::Zeros => Tensor::zeros(shape),
            };
            params.push(name, t)
        });
        Ok(FlowTransformer { config, params, layout })
    }

    /// Rebuilds a model from named tensors, checking names and shapes.
    pub fn from_params(config: ModelConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        let mut model = FlowTransformer::new(config)?;
        if named.len() != model.params.len() {
            return Err(Error::Contract(format!(
                "checkpoint has {} tensors, config expects {}",
                named.len(),
                model.params.len()
            )));
        }
        for (i, (name, t)) in named.into_iter().enumerate() {
            let expected = &model.params.names()[i];
            let shape = model.params.get(i).shape();
            if &name != expected || t.shape() != shape {
                return Err(Error::Contract(format!(
                    "checkpoint tensor {i}: got `{name}` {:?}, expected `{expected}` {shape:?}",
                    t.shape()
                )));
            }
            model.params.tensors_mut()[i] = t;
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Records the forward pass and returns the sigmoid output (N² × k·n).
    /// `teacher` is the decoder input in training mode when the decoder
    /// input is [`DecoderInput::Teacher`].
    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &[Var],
        input: &Tensor,
        teacher: Option<&Tensor>,
        training: bool,
        rng: &mut Rng,
    ) -> Result<Var> {
        let cfg = &self.config;
        if input.shape() != [cfg.rows(), cfg.input_width] {
            return Err(Error::Shape {
                op: "forward",
                left: input.shape().to_vec(),
                right: vec![cfg.rows(), cfg.input_width],
            });
        }
        let x = tape.constant(input.clone());
        let mut drop = Dropout {
            rate: cfg.dropout,
            training,
            rng,
        };
        let mut e = x;
        for l in &self.layout.enc {
            e = encoder_layer(tape, e, &l.bind(params), &mut drop)?;
        }
        let out_shape = [cfg.rows(), cfg.output_width()];
        let mut d = match (cfg.decoder_input, training) {
            (DecoderInput::EncoderProjection, _) => tape.matmul(e, params[self.layout.dec_in.unwrap()])?,
            (DecoderInput::Teacher, true) => {
                let t = teacher.ok_or_else(|| Error::Contract("training with teacher input needs targets".into()))?;
                if t.shape() != out_shape {
                    return Err(Error::Shape {
                        op: "forward",
                        left: t.shape().to_vec(),
                        right: out_shape.to_vec(),
                    });
                }
                tape.constant(t.clone())
            }
            _ => tape.constant(Tensor::zeros(&out_shape)),
        };
        for l in &self.layout.dec {
            d = decoder_layer(tape, d, e, &l.bind(params), &mut drop)?;
        }
        Ok(tape.sigmoid(d))
    }

    /// MSE plus the weighted penalties on one prediction.
    pub fn loss(&self, tape: &mut Tape, pred: Var, target: &Tensor, pen: &PenaltyContext) -> Result<(Var, LossParts)> {
        let t = tape.constant(target.clone());
        let mse = tape.mse_loss(pred, t)?;
        let mut parts = LossParts {
            mse: tape.value(mse).data()[0],
            ..LossParts::default()
        };
        let mut total = mse;
        let (lod, lkkt) = (self.config.lambda_od, self.config.lambda_kkt);
        if (lod > 0.0 || lkkt > 0.0) && pen.demanded > 0 {
            let scale = tape.constant(pen.flow_scale.clone());
            let flows = tape.mul(pred, scale)?;
            if lod > 0.0 {
                let od = od_penalty(tape, flows, pen, self.config.k)?;
                parts.od = tape.value(od).data()[0];
                let w = tape.scale(od, lod);
                total = tape.add(total, w)?;
            }
            if lkkt > 0.0 {
                let kkt = pen
                    .kkt
                    .as_ref()
                    .ok_or_else(|| Error::Contract("λ_KKT > 0 needs the network structure".into()))?;
                let phi = kkt_penalty(tape, flows, pen, kkt)?;
                parts.kkt = tape.value(phi).data()[0];
                let w = tape.scale(phi, lkkt);
                total = tape.add(total, w)?;
            }
        }
        parts.total = tape.value(total).data()[0];
        Ok((total, parts))
    }

    /// Forward, loss and backward for one example. Returns the parameter
    /// gradients in parameter order.
    pub fn gradients(&self, ex: Example<'_>, training: bool, rng: &mut Rng) -> Result<(Vec<Option<Vec<f64>>>, LossParts)> {
        let mut tape = Tape::new();
        let vars = self.params.load(&mut tape);
        let pred = self.forward(&mut tape, &vars, ex.input, Some(ex.target), training, rng)?;
        let (loss, parts) = self.loss(&mut tape, pred, ex.target, ex.penalty)?;
        let mut grads = tape.backward(loss)?;
        let g = vars
            .iter()
            .map(|v| Some(grads.take(*v).unwrap_or_else(|| vec![0.0; 0])))
            .zip(self.params.tensors())
            .map(|(g, t)| g.map(|g| if g.is_empty() { vec![0.0; t.len()] } else { g }))
            .collect();
        Ok((g, parts))
    }

    /// Loss of one example in evaluation mode, without gradients.
    pub fn evaluate(&self, ex: Example<'_>) -> Result<LossParts> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = self.params.tensors().iter().map(|t| tape.constant(t.clone())).collect();
        let mut rng = rng::seeded(0);
        let pred = self.forward(&mut tape, &vars, ex.input, None, false, &mut rng)?;
        Ok(self.loss(&mut tape, pred, ex.target, ex.penalty)?.1)
    }

    #[cfg(not(feature = "parallel"))]
    fn batch_gradients(&self, batch: &[Example<'_>], seeds: &[u64]) -> Result<Vec<(Vec<Option<Vec<f64>>>, LossParts)>> {
        batch
            .iter()
            .zip(seeds)
            .map(|(ex, &s)| self.gradients(*ex, true, &mut rng::seeded(s)))
            .collect()
    }

    /// Samples are independent given their seeds; results come back in batch
    /// order so the reduction is deterministic.
    #[cfg(feature = "parallel")]
    fn batch_gradients(&self, batch: &[Example<'_>], seeds: &[u64]) -> Result<Vec<(Vec<Option<Vec<f64>>>, LossParts)>> {
        use rayon::prelude::*;
        batch
            .par_iter()
            .zip(seeds)
            .map(|(ex, &s)| self.gradients(*ex, true, &mut rng::seeded(s)))
            .collect()
    }

    /// Averages the batch gradients and applies one Adam update.
    pub fn train_step(&mut self, adam: &mut Adam, batch: &[Example<'_>], rng: &mut Rng) -> Result<LossParts> {
        if batch.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        let mut sum: Vec<Vec<f64>> = self.params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        let mut parts = LossParts::default();
        let seeds: Vec<u64> = batch.iter().map(|_| rng.random()).collect();
        for (g, p) in self.batch_gradients(batch, &seeds)? {
            for (acc, g) in sum.iter_mut().zip(g) {
                for (a, b) in acc.iter_mut().zip(g.unwrap()) {
                    *a += b;
                }
            }
            parts += p;
        }
        let inv = 1.0 / batch.len() as f64;
        let grads: Vec<Option<Vec<f64>>> = sum
            .into_iter()
            .map(|mut g| {
                g.iter_mut().for_each(|x| *x *= inv);
                Some(g)
            })
            .collect();
        adam.step(&mut self.params, &grads)?;
        Ok(parts.scaled(inv))
    }

    /// One pass over `examples` in a seeded random order. Returns the mean
    /// training loss terms, or [`Error::Diverged`] on a non-finite loss.
    pub fn train_epoch(&mut self, adam: &mut Adam, examples: &[Example<'_>], epoch: usize, rng: &mut Rng) -> Result<LossParts> {
        let mut order: Vec<usize> = (0..examples.len()).collect();
        order.shuffle(rng);
        let mut parts = LossParts::default();
        for chunk in order.chunks(self.config.batch) {
            let batch: Vec<Example<'_>> = chunk.iter().map(|&i| examples[i]).collect();
            let p = self.train_step(adam, &batch, rng)?;
            if !p.total.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            parts += p.scaled(batch.len() as f64);
        }
        Ok(parts.scaled(1.0 / examples.len().max(1) as f64))
    }

    /// Evaluation-mode prediction, values in (0, 1).
    pub fn predict(&self, input: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = self.params.tensors().iter().map(|t| tape.constant(t.clone())).collect();
        let mut rng = rng::seeded(0);
        let out = self.forward(&mut tape, &vars, input, None, false, &mut rng)?;
        Ok(tape.value(out).clone())
    }
}

/// ε_OD on the predicted flows, divided by the mean OD demand.
fn od_penalty(tape: &mut Tape, flows: Var, pen: &PenaltyContext, k: usize) -> Result<Var> {
    let rows = tape.value(flows).len() / k;
    let per_slot = tape.reshape(flows, &[rows, k])?;
    let totals = tape.sum_lastdim(per_slot);
    let x = tape.constant(pen.demand.clone());
    let diff = tape.sub(totals, x)?;
    let abs = tape.abs(diff);
    let s = tape.sum(abs);
    Ok(tape.scale(s, 1.0 / (pen.demanded as f64 * pen.mean_demand)))
}

/// φ_KKT with congested costs recomputed from the predicted flows, divided
/// by mean demand times mean free-flow path cost.
fn kkt_penalty(tape: &mut Tape, flows: Var, pen: &PenaltyContext, kkt: &KktStructure) -> Result<Var> {
    let width = tape.value(flows).len();
    let flat = tape.reshape(flows, &[width])?;
    let load = tape.sparse_map(flat, kkt.link_load.clone())?;
    let times = tape.bpr(load, kkt.t0.clone(), kkt.capacity.clone())?;
    let cost = tape.sparse_map(times, kkt.path_cost.clone())?;
    let k = width / kkt.spread.width;
    let grouped = tape.reshape(cost, &[kkt.spread.width, k])?;
    let min = tape.group_min(grouped, &kkt.valid)?;
    let min_flat = tape.reshape(min, &[kkt.spread.width])?;
    let spread = tape.sparse_map(min_flat, kkt.spread.clone())?;
    let excess = tape.sub(cost, spread)?;
    let excess = tape.relu(excess);
    let weighted = tape.mul(excess, flat)?;
    let s = tape.sum(weighted);
    Ok(tape.scale(s, 1.0 / (pen.demanded as f64 * pen.mean_demand * kkt.mean_cost)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(decoder_input: DecoderInput) -> ModelConfig {
        ModelConfig {
            heads: 2,
            head_dim: 4,
            encoder_layers: 1,
            decoder_layers: 1,
            dropout: 0.0,
            batch: 2,
            epochs: 1,
            lr: 1e-3,
            ffn_hidden: 8,
            lambda_od: 0.0,
            lambda_kkt: 0.0,
            decoder_input,
            seed: 3,
            nodes: 3,
            input_width: 7,
            k: 3,
            classes: 1,
        }
    }

    #[test]
    fn output_in_unit_interval_and_deterministic() {
        let m = FlowTransformer::new(tiny(DecoderInput::EncoderProjection)).unwrap();
        let input = Tensor::from_fn(&[9, 7], |i| (i % 5) as f64 / 4.0);
        let a = m.predict(&input).unwrap();
        let b = m.predict(&input).unwrap();
        assert_eq!(a.shape(), &[9, 3]);
        assert!(a.data().iter().all(|v| *v > 0.0 && *v < 1.0));
        assert_eq!(a, b);
    }

    #[test]
    fn parameter_names_and_counts() {
        let m = FlowTransformer::new(tiny(DecoderInput::Teacher)).unwrap();
        // enc: 2·3 head projections + wo + 2 ffn + 4·2 ln; dec: 2·(2·3 + 1) + 2 ffn + 5·2 ln
        assert_eq!(m.params().len(), 6 + 1 + 2 + 8 + 14 + 2 + 10);
        assert!(m.params().by_name("dec0.cross.h1.wk").is_some());
        assert_eq!(m.params().by_name("dec0.cross.h1.wk").unwrap().shape(), &[7, 4]);
        assert_eq!(m.params().by_name("dec0.cross.h1.wq").unwrap().shape(), &[3, 4]);
        assert!(m.params().by_name("dec.in.w").is_none());
    }

    #[test]
    fn teacher_needs_targets_in_training() {
        let m = FlowTransformer::new(tiny(DecoderInput::Teacher)).unwrap();
        let mut tape = Tape::new();
        let vars = m.params().load(&mut tape);
        let input = Tensor::zeros(&[9, 7]);
        let r = m.forward(&mut tape, &vars, &input, None, true, &mut rng::seeded(0));
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn round_trip_params() {
        let m = FlowTransformer::new(tiny(DecoderInput::EncoderProjection)).unwrap();
        let named = m
            .params()
            .names()
            .iter()
            .cloned()
            .zip(m.params().tensors().iter().cloned())
            .collect();
        let back = FlowTransformer::from_params(m.config().clone(), named).unwrap();
        assert_eq!(back, m);
    }
}
