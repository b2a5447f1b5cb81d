use cast_core::autodiff::{
    check_coordinates, check_gradients, check_second_order, conv2d, conv2d_input_grad, conv2d_weight_grad,
};
use cast_core::cast_loss::{prepare_sample, sample_loss, AlphaMode, LossConfig, StepConfig, SupervisionMode};
use cast_core::contrast::NegativeQueue;
use cast_core::crop::ViewConfig;
use cast_core::data::{gen_scene, SceneSpec};
use cast_core::encoder::{init_params, EncoderConfig, ParamSet};
use cast_core::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::verdict::Verdict;

const INSTANCES: usize = 20;
const OP_TOL: f64 = 1e-3;
const CAST_TOL: f64 = 1e-2;

type Op = fn(&[Tensor]) -> Result<Tensor>;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Values bounded away from zero with random sign, so `h`-steps never
/// cross a kink.
fn signed_away(rng: &mut ChaCha8Rng, shape: &[usize], margin: f32) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v = rng.gen_range(margin..2.0);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

fn dims(rng: &mut ChaCha8Rng, rank: usize) -> Vec<usize> {
    (0..rank).map(|_| rng.gen_range(1..5)).collect()
}

struct Case {
    name: &'static str,
    op: Op,
    second_order: bool,
    gen: fn(&mut ChaCha8Rng) -> Vec<Tensor>,
}

fn case(name: &'static str, op: Op, second_order: bool, gen: fn(&mut ChaCha8Rng) -> Vec<Tensor>) -> Case {
    Case {
        name,
        op,
        second_order,
        gen,
    }
}

fn two_same(rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    let s = dims(rng, 2);
    vec![uniform(rng, &s, -2.0, 2.0), uniform(rng, &s, -2.0, 2.0)]
}

fn one(rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    let s = dims(rng, 3);
    vec![uniform(rng, &s, -2.0, 2.0)]
}

fn positive(rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    let s = dims(rng, 2);
    vec![uniform(rng, &s, 0.5, 3.0)]
}

fn map4(rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    let s = [rng.gen_range(1..3), rng.gen_range(1..4), 2 * rng.gen_range(1..3), 2 * rng.gen_range(1..3)];
    vec![uniform(rng, &s, -2.0, 2.0)]
}

fn conv_shapes(rng: &mut ChaCha8Rng) -> ([usize; 4], [usize; 4], usize, usize) {
    let c = rng.gen_range(1..3);
    let f = rng.gen_range(1..4);
    let h = rng.gen_range(3..7);
    let w = rng.gen_range(3..7);
    let k = rng.gen_range(1..4).min(h).min(w);
    let stride = rng.gen_range(1..3);
    let padding = rng.gen_range(0..2);
    ([rng.gen_range(1..3), c, h, w], [f, c, k, k], stride, padding)
}

/// Stride and padding ride along as the two entries of a constant tensor.
fn conv_case(rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    let (xs, ws, stride, padding) = conv_shapes(rng);
    vec![
        uniform(rng, &xs, -1.0, 1.0),
        uniform(rng, &ws, -1.0, 1.0),
        Tensor::from_slice(&[2], &[stride as f32, padding as f32]).unwrap(),
    ]
}

fn conv_cfg(t: &Tensor) -> (usize, usize) {
    (t.data()[0] as usize, t.data()[1] as usize)
}

fn conv_out_shape(x: &[usize], w: &[usize], stride: usize, padding: usize) -> Vec<usize> {
    vec![
        x[0],
        w[0],
        (x[2] + 2 * padding - w[2]) / stride + 1,
        (x[3] + 2 * padding - w[3]) / stride + 1,
    ]
}

fn catalogue() -> Vec<Case> {
    vec![
        case("add", |v| v[0].add(&v[1]), false, two_same),
        case("sub", |v| v[0].sub(&v[1]), false, two_same),
        case("mul", |v| v[0].mul(&v[1]), true, two_same),
        case("div", |v| v[0].div(&v[1]), true, |r| {
            let s = dims(r, 2);
            vec![uniform(r, &s, -2.0, 2.0), signed_away(r, &s, 0.5)]
        }),
        case("scale", |v| Ok(v[0].scale(-1.7)), false, one),
        case("neg", |v| Ok(v[0].neg()), false, one),
        case("add_scalar", |v| Ok(v[0].add_scalar(0.3)), false, one),
        case("exp", |v| Ok(v[0].exp()), true, one),
        case("ln", |v| Ok(v[0].ln()), true, positive),
        case("sqrt", |v| Ok(v[0].sqrt()), true, positive),
        case("relu", |v| Ok(v[0].relu()), false, |r| {
            let s = dims(r, 3);
            vec![signed_away(r, &s, 0.05)]
        }),
        case("relu_gated_product", |v| v[0].relu().mul(&v[1]), true, |r| {
            let s = dims(r, 2);
            vec![signed_away(r, &s, 0.05), uniform(r, &s, -2.0, 2.0)]
        }),
        case("clamp_min", |v| Ok(v[0].clamp_min(0.1)), false, |r| {
            let s = dims(r, 2);
            let t = signed_away(r, &s, 0.05);
            vec![Tensor::new(&s, t.data().iter().map(|x| x + 0.1).collect()).unwrap()]
        }),
        case("sum", |v| Ok(v[0].sum()), false, one),
        case("expand", |v| v[0].expand(&[2, 3]), false, |r| vec![uniform(r, &[1], -2.0, 2.0)]),
        case("reshape", |v| v[0].reshape(&[v[0].numel()]), false, one),
        case("transpose", |v| v[0].t(), false, |r| {
            let s = dims(r, 2);
            vec![uniform(r, &s, -2.0, 2.0)]
        }),
        case("matmul", |v| v[0].matmul(&v[1]), true, |r| {
            let (m, k, n) = (r.gen_range(1..5), r.gen_range(1..5), r.gen_range(1..5));
            vec![uniform(r, &[m, k], -1.0, 1.0), uniform(r, &[k, n], -1.0, 1.0)]
        }),
        case("dot", |v| v[0].dot(&v[1]), true, two_same),
        case("l2_normalize", |v| v[0].l2_normalize(1e-12), true, |r| {
            let n = r.gen_range(2..9);
            vec![signed_away(r, &[n], 0.3)]
        }),
        case("spatial_sum", |v| v[0].spatial_sum(), false, map4),
        case("spatial_broadcast", |v| v[0].spatial_broadcast(2, 3), false, |r| {
            let s = dims(r, 2);
            vec![uniform(r, &s, -2.0, 2.0)]
        }),
        case("channel_sum", |v| v[0].channel_sum(), false, map4),
        case("channel_broadcast", |v| v[0].channel_broadcast(2, 2, 3), false, |r| {
            let c = r.gen_range(1..5);
            vec![uniform(r, &[c], -2.0, 2.0)]
        }),
        case("window_sum", |v| v[0].window_sum(2), false, map4),
        case("upsample_repeat", |v| v[0].upsample_repeat(2), false, map4),
        case("global_avg_pool", |v| v[0].global_avg_pool(), false, map4),
        case("avg_pool2d", |v| v[0].avg_pool2d(2), false, map4),
        case(
            "conv2d",
            |v| {
                let (s, p) = conv_cfg(&v[2]);
                conv2d(&v[0], &v[1], s, p)
            },
            true,
            conv_case,
        ),
        case(
            "conv2d_input_grad",
            |v| {
                let (s, p) = conv_cfg(&v[3]);
                conv2d_input_grad(&v[0], &v[1], s, p, v[2].shape())
            },
            true,
            |r| {
                let (xs, ws, s, p) = conv_shapes(r);
                let os = conv_out_shape(&xs, &ws, s, p);
                vec![
                    uniform(r, &os, -1.0, 1.0),
                    uniform(r, &ws, -1.0, 1.0),
                    Tensor::zeros(&xs),
                    Tensor::from_slice(&[2], &[s as f32, p as f32]).unwrap(),
                ]
            },
        ),
        case(
            "conv2d_weight_grad",
            |v| {
                let (s, p) = conv_cfg(&v[3]);
                conv2d_weight_grad(&v[0], &v[1], s, p, v[2].shape())
            },
            true,
            |r| {
                let (xs, ws, s, p) = conv_shapes(r);
                let os = conv_out_shape(&xs, &ws, s, p);
                vec![
                    uniform(r, &xs, -1.0, 1.0),
                    uniform(r, &os, -1.0, 1.0),
                    Tensor::zeros(&ws),
                    Tensor::from_slice(&[2], &[s as f32, p as f32]).unwrap(),
                ]
            },
        ),
    ]
}

/// Inputs that only carry configuration (conv geometry, target shapes).
fn differentiable_prefix(name: &str, n: usize) -> usize {
    match name {
        "conv2d" => 2,
        "conv2d_input_grad" | "conv2d_weight_grad" => 2,
        _ => n,
    }
}

/// Largest relative error over all instances of every op, first and
/// (where the op is nonlinear in some input) second order.
fn op_checks() -> (f64, usize, Vec<String>) {
    let mut worst = 0.0f64;
    let mut checks = 0;
    let mut failures = Vec::new();
    for (ci, c) in catalogue().into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + ci as u64);
        for inst in 0..INSTANCES {
            let inputs = (c.gen)(&mut rng);
            let k = differentiable_prefix(c.name, inputs.len());
            let (diff, fixed) = inputs.split_at(k);
            let fixed = fixed.to_vec();
            let out_shape = {
                let all: Vec<Tensor> = inputs.iter().map(Tensor::detach).collect();
                (c.op)(&all).unwrap().shape().to_vec()
            };
            let proj = uniform(&mut rng, &out_shape, -1.0, 1.0);
            let op = c.op;
            let scalar = |xs: &[Tensor]| -> Result<Tensor> {
                let mut all = xs.to_vec();
                all.extend(fixed.iter().cloned());
                Ok(op(&all)?.mul(&proj)?.sum())
            };
            let first = check_gradients(scalar, diff, 1e-2).unwrap();
            checks += 1;
            worst = worst.max(first.rel_err);
            if !first.passes(OP_TOL) {
                failures.push(format!("{}#{inst} first-order {:.2e}", c.name, first.rel_err));
            }
            if c.second_order {
                let second = check_second_order(scalar, diff, 1e-2, inst as u64).unwrap();
                checks += 1;
                worst = worst.max(second.rel_err);
                if !second.passes(OP_TOL) {
                    failures.push(format!("{}#{inst} second-order {:.2e}", c.name, second.rel_err));
                }
            }
        }
    }
    (worst, checks, failures)
}

fn toy_config() -> StepConfig {
    StepConfig {
        encoder: EncoderConfig {
            input_size: 16,
            channels: vec![4, 8],
            embedding_dim: 8,
        },
        views: ViewConfig {
            out_size: 16,
            ..ViewConfig::default()
        },
        loss: LossConfig::default(),
        sgd: cast_core::autodiff::SgdConfig {
            lr: 0.03,
            momentum: 0.9,
            weight_decay: 1e-4,
        },
        momentum: 0.99,
    }
}

fn as_params(template: &ParamSet, values: &[Tensor]) -> ParamSet {
    ParamSet::new(template.names().iter().cloned().zip(values.iter().cloned()).collect())
}

/// Full attention-supervised loss on a two-stage encoder: the gradient
/// passes through the Grad-CAM importances, which are themselves gradients.
fn cast_loss_checks() -> (f64, Vec<String>) {
    let mut worst = 0.0f64;
    let mut failures = Vec::new();
    for (i, supervision) in [SupervisionMode::FullQuery, SupervisionMode::Intersection, SupervisionMode::FullQuery]
        .into_iter()
        .enumerate()
    {
        let mut cfg = toy_config();
        cfg.loss.supervision = supervision;
        cfg.loss.alpha_mode = AlphaMode::SecondOrder;
        let scene = gen_scene(&SceneSpec::sample(40 + i as u64, 64, 0.5).unwrap()).unwrap();
        let query = init_params(&cfg.encoder, 10 + i as u64).unwrap();
        let key = init_params(&cfg.encoder, 20 + i as u64).unwrap();
        let sample = prepare_sample(&scene.image, &scene.mask, 7 + i as u64, &key, &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(i as u64);
        let mut queue = NegativeQueue::new(16, 8).unwrap();
        let negs: Vec<Tensor> = (0..16)
            .map(|_| uniform(&mut rng, &[8], -1.0, 1.0).l2_normalize(1e-12).unwrap().detach())
            .collect();
        queue.enqueue(&negs).unwrap();

        let template = query.clone();
        let loss = |xs: &[Tensor]| -> Result<Tensor> {
            Ok(sample_loss(&as_params(&template, xs), &sample, &queue, &cfg)?.total)
        };
        let values = query.tensors().to_vec();
        let all = check_gradients(loss, &values, 1e-3).unwrap();
        worst = worst.max(all.rel_err);
        if !all.passes(CAST_TOL) {
            failures.push(format!("CAST instance {i} all-parameter {:.2e}", all.rel_err));
        }
        // ten individually sampled weights
        let coords: Vec<(usize, usize)> = (0..10)
            .map(|_| {
                let t = rng.gen_range(0..values.len());
                (t, rng.gen_range(0..values[t].numel()))
            })
            .collect();
        let sampled = check_coordinates(loss, &values, &coords, 1e-3).unwrap();
        worst = worst.max(sampled.rel_err);
        if !sampled.passes(CAST_TOL) {
            failures.push(format!("CAST instance {i} sampled {:.2e}", sampled.rel_err));
        }
    }
    (worst, failures)
}

pub fn criterion_gradients() -> Verdict {
    let (op_worst, checks, mut failures) = op_checks();
    let (cast_worst, cast_failures) = cast_loss_checks();
    failures.extend(cast_failures);
    let detail = format!(
        "{} ops x {INSTANCES} instances ({checks} checks), worst op rel err {op_worst:.2e} (tol {OP_TOL:.0e}); \
         CAST loss worst rel err {cast_worst:.2e} (tol {CAST_TOL:.0e})",
        catalogue().len()
    );
    if failures.is_empty() {
        Verdict::new(true, detail)
    } else {
        Verdict::fail(format!("{detail}; failures: {}", failures.join(", ")))
    }
}
