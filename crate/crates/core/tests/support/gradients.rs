//! Central finite-difference checks of every tape op, each layer and the
//! full model. Each check panics on failure.

use std::sync::Arc;

use pathflow_core::datagen::TargetScale;
use pathflow_core::model::*;
use pathflow_core::network::{Link, Network, OdMatrix};
use pathflow_core::paths::build_path_sets;
use pathflow_core::rng::{self, Rng};
use pathflow_core::tensor::{SparseRows, Tape, Tensor, Var};
use pathflow_core::Result;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;
/// Below this magnitude the error is effectively absolute: the loss carries
/// about 1e-14 of summation noise, which central differences turn into ~1e-9
/// of gradient noise.
const FLOOR: f64 = 1e-4;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FLOOR)
}

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
    Tensor::uniform(shape, 1.0, &mut rng::seeded(seed))
}

/// Values bounded away from 0 so kinks (relu, abs) are never crossed.
fn off_zero(shape: &[usize], seed: u64) -> Tensor {
    let mut t = rand_tensor(shape, seed);
    t.data_mut().iter_mut().for_each(|x| *x = x.signum() * (0.2 + x.abs()));
    t
}

/// `f` maps parameter vars to an output; the checked scalar is `Σ out ⊙ W`
/// with a fixed random `W`.
fn check<F>(name: &str, inputs: &[Tensor], f: F)
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let scalar = |tape: &mut Tape, vars: &[Var]| -> Var {
        let out = f(tape, vars).unwrap();
        let shape = tape.value(out).shape().to_vec();
        let w = tape.constant(rand_tensor(&shape, 99));
        let y = tape.mul(out, w).unwrap();
        tape.sum(y)
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = scalar(&mut tape, &vars);
    let grads = tape.backward(loss).unwrap();
    let eval = |ins: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ins.iter().map(|t| tape.param(t.clone())).collect();
        let l = scalar(&mut tape, &vars);
        tape.value(l).data()[0]
    };
    let mut worst = 0.0f64;
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[i].len()]);
        for j in 0..inputs[i].len() {
            let mut ins = inputs.to_vec();
            ins[i].data_mut()[j] += H;
            let up = eval(&ins);
            ins[i].data_mut()[j] -= 2.0 * H;
            let down = eval(&ins);
            let numeric = (up - down) / (2.0 * H);
            worst = worst.max(rel_err(analytic[j], numeric));
        }
    }
    assert!(worst < TOL, "{name}: max relative error {worst:e}");
}

pub fn matmul_variants() {
    check("matmul", &[rand_tensor(&[3, 4], 1), rand_tensor(&[4, 5], 2)], |t, v| t.matmul(v[0], v[1]));
    check("matmul_nt", &[rand_tensor(&[3, 4], 3), rand_tensor(&[5, 4], 4)], |t, v| t.matmul_nt(v[0], v[1]));
    check("matmul 3d", &[rand_tensor(&[2, 3, 4], 5), rand_tensor(&[4, 2], 6)], |t, v| t.matmul(v[0], v[1]));
}

pub fn elementwise_and_broadcast() {
    let a = rand_tensor(&[3, 4], 10);
    let b = rand_tensor(&[3, 4], 11);
    let row = rand_tensor(&[4], 12);
    check("add", &[a.clone(), b.clone()], |t, v| t.add(v[0], v[1]));
    check("add row", &[a.clone(), row.clone()], |t, v| t.add(v[0], v[1]));
    check("sub", &[a.clone(), b.clone()], |t, v| t.sub(v[0], v[1]));
    check("sub row", &[a.clone(), row.clone()], |t, v| t.sub(v[0], v[1]));
    check("mul", &[a.clone(), b.clone()], |t, v| t.mul(v[0], v[1]));
    check("mul row", &[a.clone(), row], |t, v| t.mul(v[0], v[1]));
    check("scale", &[a.clone()], |t, v| Ok(t.scale(v[0], -2.5)));
    check("add_scalar", &[a.clone()], |t, v| Ok(t.add_scalar(v[0], 0.7)));
    check("concat", &[a, rand_tensor(&[3, 2], 13)], |t, v| t.concat_last_dim(&[v[0], v[1]]));
    check("reshape", &[rand_tensor(&[2, 6], 14)], |t, v| t.reshape(v[0], &[3, 4]));
}

pub fn nonlinearities() {
    check("softmax", &[rand_tensor(&[4, 5], 20)], |t, v| Ok(t.softmax_lastdim(v[0])));
    let mut big = rand_tensor(&[3, 6], 21);
    big.data_mut().iter_mut().for_each(|x| *x *= 4.0);
    check("layernorm", &[big, rand_tensor(&[6], 22), rand_tensor(&[6], 23)], |t, v| {
        t.layernorm(v[0], v[1], v[2])
    });
    check("relu", &[off_zero(&[4, 4], 24)], |t, v| Ok(t.relu(v[0])));
    check("abs", &[off_zero(&[4, 4], 25)], |t, v| Ok(t.abs(v[0])));
    let mut wide = rand_tensor(&[4, 4], 26);
    wide.data_mut().iter_mut().for_each(|x| *x *= 8.0);
    check("sigmoid", &[wide], |t, v| Ok(t.sigmoid(v[0])));
}

pub fn dropout_with_fixed_mask() {
    check("dropout", &[rand_tensor(&[5, 6], 30)], |t, v| {
        let mut rng: Rng = rng::seeded(31);
        t.dropout(v[0], 0.3, true, &mut rng)
    });
}

pub fn reductions_and_loss() {
    check("sum_lastdim", &[rand_tensor(&[3, 5], 40)], |t, v| Ok(t.sum_lastdim(v[0])));
    check("sum", &[rand_tensor(&[3, 5], 41)], |t, v| Ok(t.sum(v[0])));
    check("mean", &[rand_tensor(&[3, 5], 42)], |t, v| Ok(t.mean(v[0])));
    check("mse", &[rand_tensor(&[3, 5], 43), rand_tensor(&[3, 5], 44)], |t, v| t.mse_loss(v[0], v[1]));
}

pub fn penalty_ops() {
    let map = Arc::new(SparseRows {
        width: 6,
        rows: vec![vec![(0, 1.0), (3, 2.0)], vec![], vec![(5, -1.5), (1, 1.0), (2, 0.5)]],
    });
    check("sparse_map", &[rand_tensor(&[2, 3], 50)], move |t, v| t.sparse_map(v[0], map.clone()));
    let t0 = Arc::new(vec![1.0, 2.0, 0.5]);
    let cap = Arc::new(vec![1.0, 1.5, 0.8]);
    let mut flows = rand_tensor(&[3], 51);
    flows.data_mut().iter_mut().for_each(|x| *x = 1.0 + *x);
    check("bpr", &[flows], move |t, v| t.bpr(v[0], t0.clone(), cap.clone()));
    let valid = vec![true, true, false, true, false, true, false, false, false];
    let x = Tensor::new(vec![3, 3], vec![0.4, -0.2, -0.9, 0.3, 5.0, 0.8, 1.0, 2.0, 3.0]).unwrap();
    check("group_min", &[x], move |t, v| t.group_min(v[0], &valid));
}

fn attention_weights(base: u64, heads: usize, din_q: usize, din_kv: usize, d: usize, out: usize) -> Vec<Tensor> {
    let mut w = Vec::new();
    for h in 0..heads as u64 {
        w.push(rand_tensor(&[din_q, d], base + 3 * h));
        w.push(rand_tensor(&[din_kv, d], base + 3 * h + 1));
        w.push(rand_tensor(&[din_kv, d], base + 3 * h + 2));
    }
    w.push(rand_tensor(&[heads * d, out], base + 100));
    w
}

fn bind_attention(v: &[Var], heads: usize) -> Attention<Var> {
    Attention {
        q: (0..heads).map(|h| v[3 * h]).collect(),
        k: (0..heads).map(|h| v[3 * h + 1]).collect(),
        v: (0..heads).map(|h| v[3 * h + 2]).collect(),
        o: v[3 * heads],
    }
}

fn norms(width: usize, count: usize, seed: u64) -> Vec<Tensor> {
    (0..count as u64)
        .flat_map(|i| {
            let mut g = rand_tensor(&[width], seed + 2 * i);
            g.data_mut().iter_mut().for_each(|x| *x += 1.0);
            [g, rand_tensor(&[width], seed + 2 * i + 1)]
        })
        .collect()
}

fn bind_norm(v: &[Var], i: usize) -> Norm<Var> {
    Norm {
        gain: v[2 * i],
        bias: v[2 * i + 1],
    }
}

pub fn attention_layers() {
    let mut ins = vec![rand_tensor(&[6, 5], 60)];
    ins.extend(attention_weights(61, 1, 5, 5, 4, 5)[..3].iter().cloned());
    check("single head", &ins, |t, v| single_head_attention(t, v[0], v[0], v[1], v[2], v[3]));

    // cross attention: queries and keys/values of different widths
    let mut ins = vec![rand_tensor(&[6, 3], 62), rand_tensor(&[6, 5], 63)];
    ins.extend(attention_weights(64, 2, 3, 5, 4, 3));
    check("multi head", &ins, |t, v| multi_head(t, v[0], v[1], &bind_attention(&v[2..], 2)));
}

pub fn encoder_layer_gradients() {
    let (rows, a, d, heads, hidden) = (6, 5, 4, 2, 7);
    let mut ins = vec![rand_tensor(&[rows, a], 70)];
    ins.extend(attention_weights(71, heads, a, a, d, a));
    ins.push(rand_tensor(&[a, hidden], 80));
    ins.push(rand_tensor(&[hidden, a], 81));
    ins.extend(norms(a, 4, 82));
    let n_attn = 3 * heads + 1;
    for training in [false, true] {
        check("encoder", &ins, |t, v| {
            let w = Encoder {
                attn: bind_attention(&v[1..], heads),
                w2: v[1 + n_attn],
                w1: v[2 + n_attn],
                ln: core::array::from_fn(|i| bind_norm(&v[3 + n_attn..], i)),
            };
            let mut rng = rng::seeded(5);
            let mut drop = Dropout {
                rate: 0.2,
                training,
                rng: &mut rng,
            };
            encoder_layer(t, v[0], &w, &mut drop)
        });
    }
}

pub fn decoder_layer_gradients() {
    let (rows, a, kn, d, heads, hidden) = (6, 5, 3, 4, 2, 6);
    let mut ins = vec![rand_tensor(&[rows, kn], 90), rand_tensor(&[rows, a], 91)];
    ins.extend(attention_weights(92, heads, kn, kn, d, kn));
    ins.extend(attention_weights(120, heads, kn, a, d, kn));
    ins.push(rand_tensor(&[kn, hidden], 140));
    ins.push(rand_tensor(&[hidden, kn], 141));
    ins.extend(norms(kn, 5, 142));
    let n_attn = 3 * heads + 1;
    for training in [false, true] {
        check("decoder", &ins, |t, v| {
            let rest = &v[2 + 2 * n_attn..];
            let w = Decoder {
                self_attn: bind_attention(&v[2..], heads),
                cross: bind_attention(&v[2 + n_attn..], heads),
                w4: rest[0],
                w3: rest[1],
                ln: core::array::from_fn(|i| bind_norm(&rest[2..], i)),
            };
            let mut rng = rng::seeded(6);
            let mut drop = Dropout {
                rate: 0.2,
                training,
                rng: &mut rng,
            };
            decoder_layer(t, v[0], v[1], &w, &mut drop)
        });
    }
}

fn four_node() -> Network {
    let l = |id, tail, head, t0: f64| Link {
        id,
        tail,
        head,
        length: 1.0,
        capacity: 40.0,
        freeflow_time: t0,
    };
    let links = vec![
        l(0, 0, 1, 1.0),
        l(1, 1, 0, 1.0),
        l(2, 1, 2, 1.2),
        l(3, 2, 1, 1.2),
        l(4, 2, 3, 0.8),
        l(5, 3, 2, 0.8),
        l(6, 3, 0, 1.5),
        l(7, 0, 3, 1.5),
        l(8, 0, 2, 2.0),
        l(9, 1, 3, 2.1),
    ];
    Network::new(4, links, pathflow_core::datagen::car_truck()).unwrap()
}

pub fn full_model_with_penalties() {
    let net = four_node();
    let k = 3;
    let sets = build_path_sets(&net, k);
    let classes = net.class_count();
    let a = pathflow_core::datagen::input_width(classes, k);
    let mut od = OdMatrix::zeros(4, classes);
    let mut r = rng::seeded(8);
    for o in 0..4 {
        for d in 0..4 {
            if o != d {
                for z in 0..classes {
                    od.set(o, d, z, 5.0 + 30.0 * rand::Rng::random::<f64>(&mut r)).unwrap();
                }
            }
        }
    }
    let input = rand_tensor(&[16, a], 150);
    let mut target = rand_tensor(&[16, k * classes], 151);
    target.data_mut().iter_mut().for_each(|x| *x = 0.5 + 0.5 * *x);
    let kkt = Arc::new(KktStructure::new(&net, &sets));
    let pen = PenaltyContext::new(&od, &sets, &TargetScale::per_od_share(), Some(kkt)).unwrap();

    for decoder_input in [DecoderInput::EncoderProjection, DecoderInput::Zeros] {
        let mut cfg = ModelConfig::full_scale(4, a, k, classes);
        cfg.heads = 2;
        cfg.head_dim = 8;
        cfg.encoder_layers = 1;
        cfg.decoder_layers = 1;
        cfg.ffn_hidden = 16;
        cfg.lambda_od = 0.5;
        cfg.lambda_kkt = 0.5;
        cfg.seed = 3;
        cfg.decoder_input = decoder_input;
        let mut model = FlowTransformer::new(cfg).unwrap();
        let ex = Example {
            input: &input,
            target: &target,
            penalty: &pen,
        };
        let (grads, parts) = model.gradients(ex, false, &mut rng::seeded(0)).unwrap();
        assert!(parts.od > 0.0 && parts.kkt > 0.0);
        let mut worst = 0.0f64;
        for i in 0..model.params().len() {
            let g = grads[i].as_ref().unwrap();
            for j in 0..model.params().get(i).len() {
                let orig = model.params().get(i).data()[j];
                model.params_mut().tensors_mut()[i].data_mut()[j] = orig + H;
                let up = model.evaluate(ex).unwrap().total;
                model.params_mut().tensors_mut()[i].data_mut()[j] = orig - H;
                let down = model.evaluate(ex).unwrap().total;
                model.params_mut().tensors_mut()[i].data_mut()[j] = orig;
                worst = worst.max(rel_err(g[j], (up - down) / (2.0 * H)));
            }
        }
        assert!(worst < TOL, "full model ({decoder_input:?}): max relative error {worst:e}");
    }
}

/// Every check, by name.
pub const ALL: [(&str, fn()); 10] = [
    ("matmul_variants", matmul_variants),
    ("elementwise_and_broadcast", elementwise_and_broadcast),
    ("nonlinearities", nonlinearities),
    ("dropout_with_fixed_mask", dropout_with_fixed_mask),
    ("reductions_and_loss", reductions_and_loss),
    ("penalty_ops", penalty_ops),
    ("attention_layers", attention_layers),
    ("encoder_layer_gradients", encoder_layer_gradients),
    ("decoder_layer_gradients", decoder_layer_gradients),
    ("full_model_with_penalties", full_model_with_penalties),
];
