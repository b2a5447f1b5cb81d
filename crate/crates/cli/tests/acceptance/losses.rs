use std::collections::VecDeque;

use cast_core::autodiff::{grad, SgdConfig};
use cast_core::cast_loss::{attention_loss, cast_step, AttentionTarget, CastState, GradCamMap, LossConfig, StepConfig};
use cast_core::contrast::{info_nce, momentum_update, NegativeQueue};
use cast_core::crop::{make_view_pair, CropConstraint, ViewConfig};
use cast_core::data::gen_dataset;
use cast_core::encoder::{forward, init_params, EncoderConfig, ParamSet};
use cast_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::verdict::Verdict;

fn unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f32> {
    let v: Vec<f32> = (0..dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn vec_tensor(v: &[f32]) -> Tensor {
    Tensor::from_slice(&[v.len()], v).unwrap()
}

// ---- baseline reduction ---------------------------------------------------

fn baseline_config() -> StepConfig {
    StepConfig {
        encoder: EncoderConfig {
            input_size: 32,
            channels: vec![8, 16, 32],
            embedding_dim: 16,
        },
        views: ViewConfig {
            constraint: CropConstraint::with_phi(0.0),
            out_size: 32,
            ..ViewConfig::default()
        },
        loss: LossConfig {
            lambda: 0.0,
            ..LossConfig::default()
        },
        sgd: SgdConfig {
            lr: 0.03,
            momentum: 0.9,
            weight_decay: 1e-4,
        },
        momentum: 0.99,
    }
}

/// Plain MoCo, written out sequentially: two views, momentum-encoder key,
/// InfoNCE against the queue, batch-mean gradient, SGD with momentum,
/// momentum update of the key network, enqueue.
struct Reference {
    query: Vec<Vec<f32>>,
    key: Vec<Vec<f32>>,
    bufs: Vec<Vec<f32>>,
    queue: NegativeQueue,
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
}

impl Reference {
    fn params(&self, values: &[Vec<f32>]) -> ParamSet {
        ParamSet::new(
            self.names
                .iter()
                .zip(&self.shapes)
                .zip(values)
                .map(|((n, s), v)| (n.clone(), Tensor::from_slice(s, v).unwrap()))
                .collect(),
        )
    }

    fn step(&mut self, batch: &[(&cast_core::image::Image, &cast_core::crop::SaliencyMask)], seeds: &[u64], cfg: &StepConfig) {
        let key_net = self.params(&self.key);
        let mut sum: Option<Vec<Vec<f32>>> = None;
        let mut keys = Vec::new();
        for (&(image, mask), &seed) in batch.iter().zip(seeds) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let views = make_view_pair(image, mask, &cfg.views, &mut rng).unwrap();
            let k = forward(&cfg.encoder, &key_net, &views.key.to_tensor()).unwrap().embedding.detach();
            let query_net = self.params(&self.query).as_leaves();
            let q = forward(&cfg.encoder, &query_net, &views.query.to_tensor()).unwrap().embedding;
            let grads: Vec<Vec<f32>> = if self.queue.is_empty() {
                self.shapes.iter().map(|s| vec![0.0; s.iter().product()]).collect()
            } else {
                let loss = info_nce(&q, &k, &self.queue, cfg.loss.tau).unwrap();
                let refs: Vec<&Tensor> = query_net.tensors().iter().collect();
                grad(&loss, &refs, false).unwrap().iter().map(Tensor::to_vec).collect()
            };
            match sum.as_mut() {
                None => sum = Some(grads),
                Some(s) => {
                    for (a, g) in s.iter_mut().zip(&grads) {
                        for (x, y) in a.iter_mut().zip(g) {
                            *x += y;
                        }
                    }
                }
            }
            keys.push(k);
        }
        let inv = 1.0 / batch.len() as f32;
        let (lr, mu, wd) = (cfg.sgd.lr, cfg.sgd.momentum, cfg.sgd.weight_decay);
        for ((p, g), b) in self.query.iter_mut().zip(sum.unwrap()).zip(self.bufs.iter_mut()) {
            for ((w, gi), bi) in p.iter_mut().zip(g).zip(b.iter_mut()) {
                *bi = mu * *bi + gi * inv;
                *w = *w - lr * *bi - lr * wd * *w;
            }
        }
        let m = cfg.momentum;
        for (k, q) in self.key.iter_mut().zip(&self.query) {
            for (kv, &qv) in k.iter_mut().zip(q) {
                *kv = m * *kv + (1.0 - m) * qv;
            }
        }
        self.queue.enqueue(&keys).unwrap();
    }
}

fn bits(values: &[Tensor]) -> Vec<u32> {
    values.iter().flat_map(|t| t.data().iter().map(|v| v.to_bits())).collect()
}

fn flat_bits(values: &[Vec<f32>]) -> Vec<u32> {
    values.iter().flat_map(|v| v.iter().map(|x| x.to_bits())).collect()
}

pub fn criterion_baseline_reduction() -> Verdict {
    const STEPS: usize = 6;
    const BATCH: usize = 4;
    let cfg = baseline_config();
    let scenes = gen_dataset(BATCH * STEPS, 31, 64, 0.8).unwrap();
    let query = init_params(&cfg.encoder, 5).unwrap();
    // queue capacity below the number of enqueued keys so wrap-around is exercised
    let mut state = CastState::new(query.clone(), 12, cfg.encoder.embedding_dim).unwrap();
    let mut reference = Reference {
        query: query.tensors().iter().map(Tensor::to_vec).collect(),
        key: query.tensors().iter().map(Tensor::to_vec).collect(),
        bufs: query.tensors().iter().map(|t| vec![0.0; t.numel()]).collect(),
        queue: NegativeQueue::new(12, cfg.encoder.embedding_dim).unwrap(),
        names: query.names().to_vec(),
        shapes: query.tensors().iter().map(|t| t.shape().to_vec()).collect(),
    };
    let mut first_diff = None;
    for step in 0..STEPS {
        let batch: Vec<_> = scenes[step * BATCH..(step + 1) * BATCH].iter().map(|s| (&s.image, &s.mask)).collect();
        let seeds: Vec<u64> = (0..BATCH as u64).map(|i| 1000 * step as u64 + i).collect();
        cast_step(&batch, &seeds, &mut state, &cfg).unwrap();
        reference.step(&batch, &seeds, &cfg);
        let same = bits(state.query.tensors()) == flat_bits(&reference.query)
            && bits(state.key.tensors()) == flat_bits(&reference.key)
            && state.queue == reference.queue;
        if !same && first_diff.is_none() {
            first_diff = Some(step);
        }
    }
    let moved = bits(state.query.tensors()) != bits(query.tensors());
    match first_diff {
        None if moved => Verdict::new(
            true,
            format!("{STEPS} steps of batch {BATCH}: query, key and queue bit-identical to plain MoCo (warm-up and wrap-around included)"),
        ),
        None => Verdict::fail("parameters never changed, comparison is vacuous"),
        Some(s) => Verdict::fail(format!("state diverged from the plain MoCo reference at step {s}")),
    }
}

// ---- closed forms ---------------------------------------------------------

pub fn criterion_closed_forms() -> Verdict {
    let mut worst_nce = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for &k in &[1usize, 2, 7, 64, 512, 4096] {
        for &dim in &[4usize, 64, 256] {
            for tau in [0.07f32, 0.2, 1.0] {
                // all logits equal: identical keys, or q orthogonal to every key.
                // Entries ±1/√dim with dim a power of 4 make every dot product
                // exactly 1 in f32, so the logits are equal bit for bit.
                let r = 1.0 / (dim as f32).sqrt();
                let q: Vec<f32> = (0..dim).map(|_| if rng.gen_bool(0.5) { r } else { -r }).collect();
                let mut queue = NegativeQueue::new(k, dim).unwrap();
                queue.enqueue(&vec![vec_tensor(&q); k]).unwrap();
                let l = info_nce(&vec_tensor(&q), &vec_tensor(&q), &queue, tau).unwrap().item().unwrap();
                worst_nce = worst_nce.max((l as f64 - ((k + 1) as f64).ln()).abs());

                let mut e0 = vec![0.0; dim];
                e0[0] = 1.0;
                let mut e1 = vec![0.0; dim];
                e1[1] = 1.0;
                let mut queue = NegativeQueue::new(k, dim).unwrap();
                queue.enqueue(&vec![vec_tensor(&e1); k]).unwrap();
                let l = info_nce(&vec_tensor(&e0), &vec_tensor(&e1), &queue, tau).unwrap().item().unwrap();
                worst_nce = worst_nce.max((l as f64 - ((k + 1) as f64).ln()).abs());
            }
        }
    }

    let mut worst_aligned = 0.0f64;
    let mut worst_disjoint = 0.0f64;
    for _ in 0..200 {
        let grid = rng.gen_range(2..9);
        let n = grid * grid;
        let values: Vec<f32> = (0..n).map(|_| if rng.gen_bool(0.5) { rng.gen_range(0.0..1.0) } else { 0.0 }).collect();
        if values.iter().all(|&v| v == 0.0) {
            continue;
        }
        let target = AttentionTarget { grid, values: values.clone() };
        let c = rng.gen_range(0.01f32..100.0);
        let aligned = GradCamMap {
            grid,
            map: vec_tensor(&values.iter().map(|v| v * c).collect::<Vec<_>>()),
            alpha: Tensor::zeros(&[1, 1]),
        };
        let l = attention_loss(&aligned, &target, 1e-8).unwrap().item().unwrap();
        worst_aligned = worst_aligned.max((l as f64).abs());
        let disjoint: Vec<f32> =
            values.iter().map(|&v| if v == 0.0 { rng.gen_range(0.0..5.0) } else { 0.0 }).collect();
        if disjoint.iter().all(|&v| v == 0.0) {
            continue;
        }
        let cam = GradCamMap {
            grid,
            map: vec_tensor(&disjoint),
            alpha: Tensor::zeros(&[1, 1]),
        };
        let l = attention_loss(&cam, &target, 1e-8).unwrap().item().unwrap();
        worst_disjoint = worst_disjoint.max((l as f64 - 1.0).abs());
    }
    let pass = worst_nce <= 1e-6 && worst_aligned <= 1e-6 && worst_disjoint <= 1e-6;
    Verdict::new(
        pass,
        format!(
            "InfoNCE |L - ln(K+1)| max {worst_nce:.2e}; attention loss aligned max {worst_aligned:.2e}, \
             disjoint |L - 1| max {worst_disjoint:.2e} (tol 1e-6)"
        ),
    )
}

// ---- queue and momentum state machine -------------------------------------

pub fn criterion_state_machine() -> Verdict {
    const OPS: usize = 1000;
    const CAPACITY: usize = 37;
    const DIM: usize = 5;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut queue = NegativeQueue::new(CAPACITY, DIM).unwrap();
    let mut shadow: VecDeque<Vec<f32>> = VecDeque::new();

    let shapes: [&[usize]; 2] = [&[3, 4], &[6]];
    let random_set = |rng: &mut ChaCha8Rng| {
        ParamSet::new(
            shapes
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    let n = s.iter().product();
                    (format!("p{i}"), Tensor::new(s, (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap())
                })
                .collect(),
        )
    };
    let mut query = random_set(&mut rng);
    let mut key = random_set(&mut rng);
    let mut shadow_key: Vec<Vec<f32>> = key.tensors().iter().map(Tensor::to_vec).collect();
    // closed form for a constant query: k_n = q + m^n (k_0 − q), tracked in f64
    let mut run_start: Vec<Vec<f64>> = shadow_key.iter().map(|v| v.iter().map(|&x| x as f64).collect()).collect();
    let mut run_len = 0i32;
    let mut run_m = 0.99f64;

    let (mut queue_errors, mut momentum_errors) = (0usize, 0usize);
    let mut closed_form_ratio = 0.0f64;
    let (mut enqueues, mut updates, mut swaps) = (0, 0, 0);
    for _ in 0..OPS {
        match rng.gen_range(0..10) {
            0..=4 => {
                enqueues += 1;
                let n = rng.gen_range(0..=CAPACITY + 5);
                let keys: Vec<Vec<f32>> = (0..n).map(|_| unit(&mut rng, DIM)).collect();
                queue.enqueue(&keys.iter().map(|k| vec_tensor(k)).collect::<Vec<_>>()).unwrap();
                for k in keys {
                    if shadow.len() == CAPACITY {
                        shadow.pop_front();
                    }
                    shadow.push_back(k);
                }
                let got: Vec<Vec<f32>> = queue.contents().iter().map(|s| s.to_vec()).collect();
                let want: Vec<Vec<f32>> = shadow.iter().cloned().collect();
                if got != want || queue.len() != shadow.len() {
                    queue_errors += 1;
                }
            }
            5..=8 => {
                updates += 1;
                let m = run_m as f32;
                momentum_update(&mut key, &query, m).unwrap();
                for (k, q) in shadow_key.iter_mut().zip(query.tensors()) {
                    for (kv, &qv) in k.iter_mut().zip(q.data()) {
                        *kv = m * *kv + (1.0 - m) * qv;
                    }
                }
                run_len += 1;
                let got: Vec<Vec<f32>> = key.tensors().iter().map(Tensor::to_vec).collect();
                if got != shadow_key {
                    momentum_errors += 1;
                }
                let mf = m as f64;
                // worst-case f32 rounding: a few ulps of |values| ≤ 2 per update
                let bound = run_len as f64 * 4.0 * 2.0 * f32::EPSILON as f64;
                for ((start, k), q) in run_start.iter().zip(&shadow_key).zip(query.tensors()) {
                    for ((&s, &kv), &qv) in start.iter().zip(k).zip(q.data()) {
                        let closed = qv as f64 + mf.powi(run_len) * (s - qv as f64);
                        closed_form_ratio = closed_form_ratio.max((closed - kv as f64).abs() / bound);
                    }
                }
            }
            _ => {
                // the query moves (an optimizer step) and the momentum may change
                swaps += 1;
                query = random_set(&mut rng);
                run_m = [0.0, 0.5, 0.9, 0.99, 0.999, 1.0][rng.gen_range(0..6)];
                run_start = shadow_key.iter().map(|v| v.iter().map(|&x| x as f64).collect()).collect();
                run_len = 0;
            }
        }
    }
    let pass = queue_errors == 0 && momentum_errors == 0 && closed_form_ratio <= 1.0;
    Verdict::new(
        pass,
        format!(
            "{OPS} ops ({enqueues} enqueues, {updates} momentum updates, {swaps} query changes): \
             {queue_errors} FIFO mismatches, {momentum_errors} recurrence mismatches, \
             closed-form error at most {closed_form_ratio:.3} of the f32 rounding bound"
        ),
    )
}
