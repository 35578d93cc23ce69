//! Memory attention on a 1x1 grid checked against a scalar re-derivation.
//! At a single position the rotary tables are the identity, so one block
//! reduces to layer norms, plain dot-product attention and a ReLU MLP.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vidseg_autograd::nn::{uniform, LayerNorm, Linear};
use vidseg_autograd::{Array, Graph, ParamStore};
use vidseg_core::model::memory::{MemoryAttention, MemoryEntry};
use vidseg_core::model::ModelConfig;
use vidseg_core::Mask;

fn cfg() -> ModelConfig {
    ModelConfig {
        channels: [4, 6, 8, 8],
        c_mem: 4,
        heads: 1,
        memory_blocks: 1,
        ..ModelConfig::desk()
    }
}

fn linear(store: &ParamStore, l: &Linear, x: &[f64]) -> Vec<f64> {
    let w = store.get(l.weight);
    let (n_in, n_out) = (w.dim(0), w.dim(1));
    assert_eq!(x.len(), n_in);
    let bias = |o: usize| l.bias.map_or(0.0, |b| store.get(b).data()[o]);
    (0..n_out)
        .map(|o| bias(o) + (0..n_in).map(|i| x[i] * w.data()[i * n_out + o]).sum::<f64>())
        .collect()
}

fn layer_norm(store: &ParamStore, ln: &LayerNorm, x: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let (g, b) = (store.get(ln.gamma).data(), store.get(ln.beta).data());
    x.iter()
        .enumerate()
        .map(|(i, v)| (v - mean) / (var + ln.eps).sqrt() * g[i] + b[i])
        .collect()
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[test]
fn single_block_matches_scalar_derivation() {
    let cfg = cfg();
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut store = ParamStore::new();
    let att = MemoryAttention::new(&mut store, &cfg, &mut rng);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let shape = store.get(id).shape().to_vec();
        store.set(id, uniform(&shape, 0.8, &mut rng));
    }
    let (c, m) = (cfg.c_last(), cfg.c_mem);
    let i_t: Vec<f64> = uniform(&[c], 1.5, &mut rng).into_vec();
    let mems: [Vec<f64>; 2] = [uniform(&[m], 1.5, &mut rng).into_vec(), uniform(&[m], 1.5, &mut rng).into_vec()];
    let slots = [0usize, 3];

    let g = Graph::inference(&store);
    let entries: Vec<MemoryEntry<_>> = mems
        .iter()
        .enumerate()
        .map(|(k, f)| MemoryEntry {
            features: g.constant(Array::from_vec(&[m, 1, 1], f.clone())),
            mask_lowres: Mask::full(1, 1),
            frame_index: k,
            is_prompt_frame: k == 0,
        })
        .collect();
    let selected: Vec<_> = entries.iter().zip(slots).collect();
    let got = att.forward(g.constant(Array::from_vec(&[c, 1, 1], i_t.clone())), &selected);

    let b = &att.blocks[0];
    let table = store.get(att.temporal);
    let mut x = i_t;
    // A single query attends only to itself.
    let n1 = layer_norm(&store, &b.norm1, &x);
    x = add(&x, &linear(&store, &b.self_attn.out, &linear(&store, &b.self_attn.v, &n1)));
    let n2 = layer_norm(&store, &b.norm2, &x);
    let q = linear(&store, &b.cross_attn.q, &n2);
    let rows: Vec<Vec<f64>> = mems
        .iter()
        .zip(slots)
        .map(|(f, s)| add(f, &table.data()[s * m..(s + 1) * m]))
        .collect();
    let scores: Vec<f64> = rows.iter().map(|r| dot(&q, &linear(&store, &b.cross_attn.k, r)) / (c as f64).sqrt()).collect();
    let z: f64 = scores.iter().map(|s| s.exp()).sum();
    let mut mixed = vec![0.0; c];
    for (r, s) in rows.iter().zip(&scores) {
        let v = linear(&store, &b.cross_attn.v, r);
        for (acc, vi) in mixed.iter_mut().zip(v) {
            *acc += s.exp() / z * vi;
        }
    }
    x = add(&x, &linear(&store, &b.cross_attn.out, &mixed));
    let n3 = layer_norm(&store, &b.norm3, &x);
    let hidden: Vec<f64> = linear(&store, &b.mlp.layers[0], &n3).into_iter().map(|v| v.max(0.0)).collect();
    x = add(&x, &linear(&store, &b.mlp.layers[1], &hidden));
    let expected = layer_norm(&store, &att.norm, &x);

    assert_eq!(got.shape(), vec![c, 1, 1]);
    let diff = got.value().data().iter().zip(&expected).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(diff < 1e-10, "max difference {diff:e}");
}

#[test]
fn memory_order_does_not_matter_at_one_position() {
    let cfg = cfg();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut store = ParamStore::new();
    let att = MemoryAttention::new(&mut store, &cfg, &mut rng);
    let (c, m) = (cfg.c_last(), cfg.c_mem);
    let g = Graph::inference(&store);
    let entry = |seed: u64| MemoryEntry {
        features: g.constant(uniform(&[m, 1, 1], 1.0, &mut ChaCha8Rng::seed_from_u64(seed))),
        mask_lowres: Mask::full(1, 1),
        frame_index: seed as usize,
        is_prompt_frame: false,
    };
    let (a, b) = (entry(1), entry(2));
    let x = g.constant(uniform(&[c, 1, 1], 1.0, &mut rng));
    let ab = att.forward(x, &[(&a, 1), (&b, 2)]);
    let ba = att.forward(x, &[(&b, 2), (&a, 1)]);
    assert!(ab.value().max_abs_diff(&ba.value()) < 1e-12);
}
