#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vidseg_autograd::gradcheck::check_param;
use vidseg_autograd::nn::uniform;
use vidseg_autograd::{Array, Graph, ParamId, ParamStore, Var};
use vidseg_core::model::memory::MemoryEntry;
use vidseg_core::model::mpg::MemoryContext;
use vidseg_core::model::{Model, ModelConfig};
use vidseg_core::{Mask, Prompt};

/// Straightforward re-implementation: boundary pixels by explicit
/// neighbourhood test, matching by comparing every pair of boundary pixels.
pub fn brute_force_jf(pred: &Mask, gt: &Mask, tol: f64) -> (f64, f64) {
    let (h, w) = pred.dims();
    let mut inter = 0usize;
    let mut union = 0usize;
    for y in 0..h {
        for x in 0..w {
            inter += usize::from(pred.get(x, y) && gt.get(x, y));
            union += usize::from(pred.get(x, y) || gt.get(x, y));
        }
    }
    let j = if union == 0 { 1.0 } else { inter as f64 / union as f64 };

    let edge = |m: &Mask| -> Vec<(i64, i64)> {
        let mut out = Vec::new();
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                if !m.get(x as usize, y as usize) {
                    continue;
                }
                let bg = [(1, 0), (-1, 0), (0, 1), (0, -1)].iter().any(|(dx, dy)| {
                    let (nx, ny) = (x + dx, y + dy);
                    nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 || !m.get(nx as usize, ny as usize)
                });
                if bg {
                    out.push((x, y));
                }
            }
        }
        out
    };
    let (bp, bg) = (edge(pred), edge(gt));
    let f = if bp.is_empty() && bg.is_empty() {
        1.0
    } else if bp.is_empty() || bg.is_empty() {
        0.0
    } else {
        let r = ((tol * ((h * h + w * w) as f64).sqrt()).ceil() as i64).max(1);
        let hits = |a: &[(i64, i64)], b: &[(i64, i64)]| {
            a.iter()
                .filter(|(x, y)| b.iter().any(|(u, v)| (x - u).pow(2) + (y - v).pow(2) <= r * r))
                .count() as f64
        };
        let p = hits(&bp, &bg) / bp.len() as f64;
        let rc = hits(&bg, &bp) / bg.len() as f64;
        if p + rc == 0.0 {
            0.0
        } else {
            2.0 * p * rc / (p + rc)
        }
    };
    (j, f)
}


/// Random 16x16 mask: empty, noise or an axis-aligned rectangle.
pub fn random_mask(rng: &mut ChaCha8Rng) -> Mask {
    match rng.random_range(0..3) {
        0 => Mask::new(16, 16),
        1 => {
            let density = rng.random_range(0.1..0.9);
            Mask::from_fn(16, 16, |_, _| rng.random_bool(density))
        }
        _ => {
            let (x0, y0) = (rng.random_range(0..14), rng.random_range(0..14));
            let (x1, y1) = (rng.random_range(x0..16), rng.random_range(y0..16));
            Mask::from_fn(16, 16, |x, y| (x0..=x1).contains(&x) && (y0..=y1).contains(&y))
        }
    }
}

pub fn small_config() -> ModelConfig {
    ModelConfig {
        channels: [4, 8, 12, 16],
        c_mem: 8,
        d: 16,
        heads: 2,
        memory_blocks: 1,
        decoder_blocks: 1,
        memory_tokens: 2,
        ..ModelConfig::desk()
    }
}

fn random(shape: &[usize], seed: u64) -> Array {
    uniform(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Weighted sum with fixed random weights, so no coordinate cancels out.
fn probe<'g>(v: Var<'g>, seed: u64) -> Var<'g> {
    let w = v.graph().constant(random(&v.shape(), seed));
    (v * w).sum()
}

/// Worst relative error of central differences against autodiff over
/// four sampled coordinates of parameter `id`, with the offending name.
fn gradcheck(store: &ParamStore, id: ParamId, loss: impl for<'g> Fn(&'g Graph<'g>) -> Var<'g>) -> (f64, String) {
    let n = store.get(id).len();
    let mut rng = ChaCha8Rng::seed_from_u64(id.index() as u64);
    let indices: Vec<usize> = (0..4).map(|_| rng.random_range(0..n)).collect();
    let mut worst = (0.0, String::new());
    for c in check_param(store, id, &indices, 1e-5, loss) {
        let err = c.relative_error(1e-8);
        if err >= worst.0 {
            worst = (err, format!("{}[{}]: analytic {:.6e} numeric {:.6e}", store.name(id), c.index, c.analytic, c.numeric));
        }
    }
    worst
}

/// Pins a closure to the signature the gradient checker expects.
fn graph_fn<F: for<'g> Fn(&'g Graph<'g>) -> Var<'g>>(f: F) -> F {
    f
}

fn worst_of(results: impl IntoIterator<Item = (f64, String)>) -> (f64, String) {
    results.into_iter().fold((0.0, String::new()), |a, b| if b.0 >= a.0 { b } else { a })
}

pub fn temporal_block() -> (f64, String) {
    let model = Model::new(small_config()).unwrap();
    let block = &model.net.tfi.stages[1].block;
    let x = random(&[8, 3, 4, 4], 1);
    worst_of(block.convs.iter().map(|conv| gradcheck(&model.store, conv.weight, |g| probe(block.forward(g.constant(x.clone())), 2))))
}

fn entry<'g>(g: &'g Graph<'g>, frame: usize, seed: u64, fg: &[bool]) -> MemoryEntry<Var<'g>> {
    MemoryEntry {
        features: g.constant(random(&[8, 2, 2], seed)),
        mask_lowres: Mask::from_bits(2, 2, fg.to_vec()).unwrap(),
        frame_index: frame,
        is_prompt_frame: frame == 0,
    }
}

pub fn memory_attention() -> (f64, String) {
    let model = Model::new(small_config()).unwrap();
    let att = &model.net.memory_attention;
    let loss = graph_fn(|g| {
        let a = entry(g, 0, 3, &[true, false, false, true]);
        let b = entry(g, 2, 4, &[false; 4]);
        let i_t = g.constant(random(&[16, 2, 2], 5));
        probe(att.forward(i_t, &[(&a, 0), (&b, 1)]), 6)
    });
    let block = &att.blocks[0];
    worst_of([block.cross_attn.q.weight, block.cross_attn.k.weight, block.self_attn.v.weight, att.temporal].map(|id| gradcheck(&model.store, id, |g| loss(g))))
}

pub fn memory_prompt_generator() -> (f64, String) {
    let model = Model::new(small_config()).unwrap();
    let mpg = model.net.mpg.as_ref().unwrap();
    let loss = graph_fn(|g| {
        let ctx = MemoryContext {
            features: g.constant(random(&[6, 8], 7)),
            foreground: vec![true, false, true, true, false, false],
        };
        probe(mpg.forward(g, Some(&ctx)).unwrap(), 8)
    });
    worst_of([mpg.tokens, mpg.psi_q.weight, mpg.psi_k.weight, mpg.psi_v.weight, mpg.mlp.layers[0].weight].map(|id| gradcheck(&model.store, id, |g| loss(g))))
}

pub fn mask_decoder() -> (f64, String) {
    let model = Model::new(small_config()).unwrap();
    let (pe, dec) = (&model.net.prompt_encoder, &model.net.decoder);
    let prompts = [Prompt::positive(5, 9), Prompt::negative(20, 3)];
    let loss = graph_fn(|g| {
        let enc = pe.forward(g, &prompts, (32, 32), (1, 1)).unwrap();
        let features = g.constant(random(&[16, 1, 1], 9));
        let memory = g.constant(random(&[2, 16], 10));
        let high_res = [g.constant(random(&[4, 8, 8], 11)), g.constant(random(&[8, 4, 4], 12)), g.constant(random(&[12, 2, 2], 13))];
        let out = dec.forward(g, features, &enc, Some(memory), &high_res, (32, 32));
        probe(out.mask_logits, 14) + probe(out.iou_pred, 15) + probe(out.object_logit, 16)
    });
    let high_res = dec.high_res.as_ref().unwrap();
    worst_of(
        [
            dec.output_tokens,
            dec.blocks[0].token_to_image.k.weight,
            dec.upscale[0].weight,
            high_res[2].weight,
            dec.hypernets[1].layers[1].weight,
            pe.type_embeddings,
        ]
        .map(|id| gradcheck(&model.store, id, |g| loss(g))),
    )
}
