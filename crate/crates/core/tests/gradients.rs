//! Finite-difference checks of every differentiable operation and of the
//! full model loss.

use std::rc::Rc;

use compolab::autograd::Graph;
use compolab::composer::{CollectMode, CompositionMode, LayerRange};
use compolab::gradcheck::grad_check;
use compolab::params::{ParamId, ParamStore};
use compolab::tensor::{AttentionLayout, Segments, Tensor};
use compolab::transformer::{Model, ModelConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Weighted sum of an output with fixed random coefficients, so every
/// output element contributes a distinct gradient.
fn project(g: &mut Graph, rng: &mut ChaCha8Rng, y: compolab::autograd::Var) -> compolab::autograd::Var {
    let shape = g.value(y).shape().to_vec();
    let w = g.constant(random(rng, &shape));
    let p = g.mul(y, w).unwrap();
    g.sum(p)
}

const SEEDS: u64 = 10;
const OP_TOL: f64 = 1e-6;

#[test]
fn matmul_gradients() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let a = store.register("a", random(&mut rng, &[3, 4]));
        let b = store.register("b", random(&mut rng, &[4, 2]));
        let coef = random(&mut rng, &[3, 2]);
        let r = grad_check(&mut store, &[a, b], None, |g| {
            let (av, bv) = (g.param(a), g.param(b));
            let y = g.matmul(av, bv)?;
            let c = g.constant(coef.clone());
            let p = g.mul(y, c)?;
            Ok(g.sum(p))
        })
        .unwrap();
        assert!(r.max_rel_error < OP_TOL, "seed {seed}: {r:?}");
    }
}

fn check_unary(shape: &[usize], op: impl Fn(&mut Graph, compolab::autograd::Var) -> compolab::autograd::Var) {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let mut store = ParamStore::new();
        let x = store.register("x", random(&mut rng, shape));
        let coef_seed = rng.random::<u64>();
        let r = grad_check(&mut store, &[x], None, |g| {
            let mut crng = ChaCha8Rng::seed_from_u64(coef_seed);
            let xv = g.param(x);
            let y = op(g, xv);
            Ok(project(g, &mut crng, y))
        })
        .unwrap();
        assert!(r.max_rel_error < OP_TOL, "seed {seed}: {r:?}");
    }
}

#[test]
fn softmax_gradients() {
    check_unary(&[5], |g, x| g.softmax(x, 0).unwrap());
    check_unary(&[3, 4], |g, x| g.softmax(x, 1).unwrap());
    check_unary(&[3, 4], |g, x| g.softmax(x, 0).unwrap());
}

#[test]
fn relu_scale_sum_gradients() {
    check_unary(&[4, 3], |g, x| g.relu(x));
    check_unary(&[4, 3], |g, x| g.scale(x, -2.5));
}

#[test]
fn layer_norm_gradients() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let mut store = ParamStore::new();
        let x = store.register("x", random(&mut rng, &[3, 5]));
        let gain = store.register("gain", random(&mut rng, &[5]));
        let bias = store.register("bias", random(&mut rng, &[5]));
        let coef = random(&mut rng, &[3, 5]);
        let r = grad_check(&mut store, &[x, gain, bias], None, |g| {
            let (xv, gv, bv) = (g.param(x), g.param(gain), g.param(bias));
            let y = g.layer_norm(xv, gv, bv, 1e-5)?;
            let c = g.constant(coef.clone());
            let p = g.mul(y, c)?;
            Ok(g.sum(p))
        })
        .unwrap();
        assert!(r.max_rel_error < OP_TOL, "seed {seed}: {r:?}");
    }
}

#[test]
fn add_row_and_embedding_gradients() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let mut store = ParamStore::new();
        let table = store.register("table", random(&mut rng, &[6, 3]));
        let bias = store.register("bias", random(&mut rng, &[3]));
        let coef = random(&mut rng, &[4, 3]);
        let r = grad_check(&mut store, &[table, bias], None, |g| {
            let (t, b) = (g.param(table), g.param(bias));
            let e = g.embedding(t, &[1, 4, 1, 5])?;
            let y = g.add_row(e, b)?;
            let c = g.constant(coef.clone());
            let p = g.mul(y, c)?;
            Ok(g.sum(p))
        })
        .unwrap();
        assert!(r.max_rel_error < OP_TOL, "seed {seed}: {r:?}");
    }
}

#[test]
fn cross_entropy_gradients() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(400 + seed);
        let mut store = ParamStore::new();
        let logits = store.register("logits", random(&mut rng, &[3, 5]));
        let smoothing = if seed % 2 == 0 { 0.0 } else { 0.1 };
        let r = grad_check(&mut store, &[logits], None, |g| {
            let l = g.param(logits);
            g.cross_entropy(l, &[4, 0, 2], Some(0), smoothing)
        })
        .unwrap();
        assert!(r.max_rel_error < OP_TOL, "seed {seed}: {r:?}");
    }
}

#[test]
fn cross_entropy_matches_direct_log_softmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let logits = random(&mut rng, &[3, 5]);
    let targets = [1usize, 4, 0];
    let mut expect = 0.0;
    for (r, &y) in targets.iter().enumerate() {
        let row = logits.row(r);
        let z: f64 = row.iter().map(|x| x.exp()).sum();
        expect += -(row[y].exp() / z).ln();
    }
    expect /= 3.0;
    let mut g = Graph::new();
    let l = g.constant(logits);
    let loss = g.cross_entropy(l, &targets, None, 0.0).unwrap();
    assert!((g.value(loss).item() - expect).abs() < 1e-14);
}

#[test]
fn attention_gradients() {
    for (seed, causal) in (0..SEEDS).zip([false, true].into_iter().cycle()) {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
        let mut store = ParamStore::new();
        let q = store.register("q", random(&mut rng, &[5, 4]));
        let k = store.register("k", random(&mut rng, &[if causal { 5 } else { 6 }, 4]));
        let v = store.register("v", random(&mut rng, &[if causal { 5 } else { 6 }, 4]));
        let (qs, ks) = if causal { (vec![2, 3], vec![2, 3]) } else { (vec![2, 3], vec![4, 2]) };
        let mut key_valid = vec![true; ks.iter().sum()];
        if !causal {
            key_valid[3] = false;
        }
        let layout = Rc::new(AttentionLayout {
            queries: Segments::from_lens(qs),
            keys: Segments::from_lens(ks),
            key_valid,
            causal,
            heads: 2,
        });
        let coef = random(&mut rng, &[5, 4]);
        let r = grad_check(&mut store, &[q, k, v], None, |g| {
            let (qv, kv, vv) = (g.param(q), g.param(k), g.param(v));
            let y = g.attention(qv, kv, vv, layout.clone())?;
            let c = g.constant(coef.clone());
            let p = g.mul(y, c)?;
            Ok(g.sum(p))
        })
        .unwrap();
        assert!(r.max_rel_error < OP_TOL, "seed {seed}: {r:?}");
    }
}

#[test]
fn mix_gradients() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(600 + seed);
        let mut store = ParamStore::new();
        let reps: Vec<ParamId> =
            (0..4).map(|i| store.register(format!("h{i}"), random(&mut rng, &[2, 3]))).collect();
        let w = store.register("w", random(&mut rng, &[2, 4]));
        let coef = random(&mut rng, &[2, 3]);
        let mut all = reps.clone();
        all.push(w);
        let r = grad_check(&mut store, &all, None, |g| {
            let hs: Vec<_> = reps.iter().map(|&id| g.param(id)).collect();
            let wv = g.param(w);
            let y = g.mix(&hs, wv, 1)?;
            let c = g.constant(coef.clone());
            let p = g.mul(y, c)?;
            Ok(g.sum(p))
        })
        .unwrap();
        assert!(r.max_rel_error < OP_TOL, "seed {seed}: {r:?}");
    }
}

pub fn tiny_batch(rng: &mut ChaCha8Rng, vocab: usize) -> Vec<(Vec<usize>, Vec<usize>)> {
    (0..2)
        .map(|_| {
            let src = (0..5).map(|_| rng.random_range(3..vocab)).collect();
            let tgt = (0..4).map(|_| rng.random_range(3..vocab)).collect();
            (src, tgt)
        })
        .collect()
}

fn model_check(config: ModelConfig, seed: u64) -> (f64, f64) {
    let mut model = Model::new(config.clone(), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batch = tiny_batch(&mut rng, config.src_vocab);
    let pairs: Vec<(&[usize], &[usize])> = batch.iter().map(|(s, t)| (s.as_slice(), t.as_slice())).collect();
    let compose: Vec<ParamId> = model.composition_param_ids().map(|(k, v)| vec![k, v]).unwrap_or_default();
    let all: Vec<ParamId> = model.params().ids().collect();
    let layout = model.clone();
    let mut run = |ids: &[ParamId]| {
        grad_check(model.params_mut(), ids, None, |g| layout.loss_graph(g, &pairs, 0.0, &mut None))
            .unwrap()
            .max_rel_error
    };
    let full = run(&all);
    let comp = if compose.is_empty() { 0.0 } else { run(&compose) };
    (full, comp)
}

#[test]
fn full_model_gradients_all_modes() {
    for composition in [CompositionMode::Baseline, CompositionMode::Shared, CompositionMode::PerLayer] {
        let mut config = ModelConfig::tiny(20);
        config.composition = composition;
        let (full, comp) = model_check(config, 11);
        println!("{composition}: full {full:.3e}, composition {comp:.3e}");
        assert!(full < 1e-4, "{composition}: {full}");
        assert!(comp < 1e-6, "{composition}: {comp}");
    }
}

#[test]
fn restricted_collection_gradients() {
    for (collect, range) in [
        (CollectMode::SaOnly, None),
        (CollectMode::FfOnly, None),
        (CollectMode::SaAndFf, Some(LayerRange { first: 2, last: 2 })),
    ] {
        let mut config = ModelConfig::tiny(20);
        config.collect = collect;
        config.layer_range = range;
        let (full, comp) = model_check(config, 5);
        assert!(full < 1e-4 && comp < 1e-6, "{collect:?}: {full} {comp}");
    }
}
