//! Memory entries, the pinned-plus-rolling bank, relevance-based frame
//! selection and memory-conditioned attention over current-frame features.

use std::collections::VecDeque;

use rand::Rng;
use vidseg_autograd::nn::{Attention, Conv2d, LayerNorm, Mlp, RopeTables};
use vidseg_autograd::{Array, ParamId, ParamStore, Var};

use super::config::{ModelConfig, SelectionConfig, SelectionMode};
use super::encoder::ResidualBlock;
use crate::{Error, Mask, Result};

/// One encoded past frame. `features` is `[c_mem, h_L, w_L]`.
#[derive(Clone, Debug)]
pub struct MemoryEntry<F = Array> {
    pub features: F,
    pub mask_lowres: Mask,
    pub frame_index: usize,
    pub is_prompt_frame: bool,
}

/// Read access to the numeric values of entry features, whether stored as
/// plain arrays or as graph variables.
pub trait FeatureValues {
    fn with_values<R>(&self, f: impl FnOnce(&[f64]) -> R) -> R;
}

impl FeatureValues for Array {
    fn with_values<R>(&self, f: impl FnOnce(&[f64]) -> R) -> R {
        f(self.data())
    }
}

impl FeatureValues for Var<'_> {
    fn with_values<R>(&self, f: impl FnOnce(&[f64]) -> R) -> R {
        f(self.value().data())
    }
}

/// Pinned prompt entry plus at most `p_cap` other entries ordered by frame.
#[derive(Clone, Debug)]
pub struct MemoryBank<F = Array> {
    prompt_entry: Option<MemoryEntry<F>>,
    ring: VecDeque<MemoryEntry<F>>,
    p_cap: usize,
}

impl<F> MemoryBank<F> {
    pub fn new(p_cap: usize) -> Self {
        Self {
            prompt_entry: None,
            ring: VecDeque::new(),
            p_cap,
        }
    }

    pub fn capacity(&self) -> usize {
        self.p_cap
    }

    pub fn prompt_entry(&self) -> Option<&MemoryEntry<F>> {
        self.prompt_entry.as_ref()
    }

    pub fn ring(&self) -> &VecDeque<MemoryEntry<F>> {
        &self.ring
    }

    pub fn is_empty(&self) -> bool {
        self.prompt_entry.is_none() && self.ring.is_empty()
    }

    /// The first prompted entry becomes the pinned one. Everything else goes
    /// into the ring, replacing an entry of the same frame, and the oldest
    /// frame is evicted once the ring exceeds capacity.
    pub fn insert(&mut self, entry: MemoryEntry<F>) {
        if let Some(p) = &self.prompt_entry {
            if p.frame_index == entry.frame_index {
                self.prompt_entry = Some(entry);
                return;
            }
        } else if entry.is_prompt_frame {
            self.ring.retain(|e| e.frame_index != entry.frame_index);
            self.prompt_entry = Some(entry);
            return;
        }
        let pos = self.ring.partition_point(|e| e.frame_index < entry.frame_index);
        if self.ring.get(pos).is_some_and(|e| e.frame_index == entry.frame_index) {
            self.ring[pos] = entry;
        } else {
            self.ring.insert(pos, entry);
        }
        while self.ring.len() > self.p_cap {
            self.ring.pop_front();
        }
    }

    /// Bank as seen from frame `t`: every entry strictly before `t`, inserted
    /// in frame order.
    pub fn before<'a>(entries: impl IntoIterator<Item = &'a MemoryEntry<F>>, t: usize, p_cap: usize) -> Self
    where
        F: Clone + 'a,
    {
        let mut sorted: Vec<&MemoryEntry<F>> = entries.into_iter().filter(|e| e.frame_index < t).collect();
        sorted.sort_by_key(|e| e.frame_index);
        let mut bank = Self::new(p_cap);
        for e in sorted {
            bank.insert(e.clone());
        }
        bank
    }

    /// Pinned entry (if any) followed by the chosen ring entries.
    pub fn gather(&self, sel: &SimilarityResult) -> Vec<&MemoryEntry<F>> {
        let mut out: Vec<&MemoryEntry<F>> = self.prompt_entry.iter().collect();
        out.extend(sel.chosen.iter().map(|&i| &self.ring[i]));
        out
    }
}

/// Outcome of one selection. Indices refer to positions in the bank ring.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityResult {
    pub local: Vec<usize>,
    pub global: Vec<usize>,
    pub scores_local: Vec<f64>,
    pub scores_global: Vec<f64>,
    pub dist_local: Vec<f64>,
    pub dist_global: Vec<f64>,
    /// Chosen ring positions in ascending order.
    pub chosen: Vec<usize>,
    pub includes_prompt: bool,
}

pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Flattened `I_t` reduced to `c_mem` channels by averaging contiguous
/// channel groups, so it can be dotted with memory entry features.
pub fn similarity_target(i_t: &Array, c_mem: usize) -> Vec<f64> {
    let c = i_t.dim(0);
    let plane = i_t.len() / c;
    let group = c / c_mem;
    assert_eq!(group * c_mem, c, "c_mem must divide the feature width");
    let mut out = vec![0.0; c_mem * plane];
    for (ch, row) in i_t.data().chunks(plane).enumerate() {
        let dst = &mut out[(ch / group) * plane..(ch / group + 1) * plane];
        for (o, v) in dst.iter_mut().zip(row) {
            *o += v / group as f64;
        }
    }
    out
}

/// Picks `count` positions from `probs`, highest probability first with the
/// later (more recent) candidate winning ties.
fn top_k(probs: &[f64], count: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(b.cmp(&a)));
    order.truncate(count);
    order
}

/// Sequential draws without replacement, renormalising over what is left.
pub fn sample_without_replacement(probs: &[f64], count: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut left: Vec<usize> = (0..probs.len()).collect();
    let mut out = Vec::with_capacity(count.min(probs.len()));
    while out.len() < count && !left.is_empty() {
        let total: f64 = left.iter().map(|&i| probs[i]).sum();
        let mut r = rng.random::<f64>() * total;
        let mut pick = left.len() - 1;
        for (k, &i) in left.iter().enumerate() {
            if r < probs[i] {
                pick = k;
                break;
            }
            r -= probs[i];
        }
        out.push(left.remove(pick));
    }
    out
}

/// Chooses which ring entries condition the current frame. `target` is the
/// output of [`similarity_target`] and must have the entry feature length.
pub fn select_memories<F: FeatureValues>(
    bank: &MemoryBank<F>,
    target: &[f64],
    cfg: &SelectionConfig,
    rng: &mut impl Rng,
) -> SimilarityResult {
    let n = bank.ring.len();
    let split = n.saturating_sub(cfg.local_window);
    let global: Vec<usize> = (0..split).collect();
    let local: Vec<usize> = (split..n).collect();
    let score = |i: usize| {
        bank.ring[i].features.with_values(|f| {
            assert_eq!(f.len(), target.len(), "similarity operands differ in length");
            f.iter().zip(target).map(|(a, b)| a * b).sum::<f64>()
        })
    };
    let scores_local: Vec<f64> = local.iter().map(|&i| score(i)).collect();
    let scores_global: Vec<f64> = global.iter().map(|&i| score(i)).collect();
    let dist_local = softmax(&scores_local);
    let dist_global = softmax(&scores_global);
    let pick = |dist: &[f64], count: usize, rng: &mut _| match cfg.mode {
        SelectionMode::TopK => top_k(dist, count),
        SelectionMode::Stochastic => sample_without_replacement(dist, count, rng),
    };
    let mut chosen: Vec<usize> = pick(&dist_local, cfg.y, rng).into_iter().map(|k| local[k]).collect();
    chosen.extend(pick(&dist_global, cfg.x, rng).into_iter().map(|k| global[k]));
    chosen.sort_unstable();
    SimilarityResult {
        local,
        global,
        scores_local,
        scores_global,
        dist_local,
        dist_global,
        chosen,
        includes_prompt: bank.prompt_entry.is_some(),
    }
}

/// Row of the learned temporal-offset table used for an entry seen from
/// frame `t`: 0 for the pinned prompt entry, otherwise the clamped distance.
pub fn temporal_slot<F>(entry: &MemoryEntry<F>, pinned: bool, t: usize, p_cap: usize) -> usize {
    if pinned {
        0
    } else {
        t.saturating_sub(entry.frame_index).clamp(1, p_cap)
    }
}

/// Fuses final-stage features with the predicted mask into a memory entry.
#[derive(Clone, Debug)]
pub struct MemoryEncoder {
    feat_proj: Conv2d,
    mask_proj: Conv2d,
    blocks: [ResidualBlock; 2],
    out: Conv2d,
}

impl MemoryEncoder {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let (c, m) = (cfg.c_last(), cfg.c_mem);
        Self {
            feat_proj: Conv2d::new(store, "memory_encoder.feat_proj", c, m, 1, 1, 0, rng),
            mask_proj: Conv2d::new(store, "memory_encoder.mask_proj", 1, m, 1, 1, 0, rng),
            blocks: [
                ResidualBlock::new(store, "memory_encoder.block1", m, rng),
                ResidualBlock::new(store, "memory_encoder.block2", m, rng),
            ],
            out: Conv2d::new(store, "memory_encoder.out", m, m, 1, 1, 0, rng),
        }
    }

    pub fn forward<'g>(
        &self,
        i_t: Var<'g>,
        mask: &Mask,
        frame_index: usize,
        is_prompt_frame: bool,
    ) -> Result<MemoryEntry<Var<'g>>> {
        let s = i_t.shape();
        let (hl, wl) = (s[1], s[2]);
        let (h, w) = mask.dims();
        if h % hl != 0 || w % wl != 0 || h / hl != w / wl {
            return Err(Error::Shape(format!(
                "mask {h}x{w} is not an integer multiple of feature grid {hl}x{wl}"
            )));
        }
        let frac = mask.area_pool(hl, wl)?;
        let mask_lowres = Mask::from_fn(hl, wl, |x, y| frac[y * wl + x] >= 0.5);
        let g = i_t.graph();
        let m = g.constant(Array::from_vec(&[1, hl, wl], frac));
        let mut x = self.feat_proj.forward(i_t) + self.mask_proj.forward(m);
        for b in &self.blocks {
            x = b.forward(x);
        }
        Ok(MemoryEntry {
            features: self.out.forward(x),
            mask_lowres,
            frame_index,
            is_prompt_frame,
        })
    }
}

/// `(x, y)` coordinates of an `h x w` grid in row-major order.
pub fn grid_coords(h: usize, w: usize) -> Vec<(f64, f64)> {
    (0..h).flat_map(|y| (0..w).map(move |x| (x as f64, y as f64))).collect()
}

#[derive(Clone, Debug)]
pub struct MemoryBlock {
    pub norm1: LayerNorm,
    pub self_attn: Attention,
    pub norm2: LayerNorm,
    pub cross_attn: Attention,
    pub norm3: LayerNorm,
    pub mlp: Mlp,
}

/// Stack of pre-norm transformer blocks: self-attention over the current
/// frame, cross-attention into the selected memories, feed-forward.
#[derive(Clone, Debug)]
pub struct MemoryAttention {
    pub blocks: Vec<MemoryBlock>,
    pub norm: LayerNorm,
    /// `[p_cap + 1, c_mem]` temporal-offset embeddings.
    pub temporal: ParamId,
    rope_theta: f64,
}

impl MemoryAttention {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let (c, m, heads) = (cfg.c_last(), cfg.c_mem, cfg.heads);
        let blocks = (0..cfg.memory_blocks)
            .map(|b| {
                let p = format!("memory_attention.blocks.{b}");
                MemoryBlock {
                    norm1: LayerNorm::new(store, &format!("{p}.norm1"), c),
                    self_attn: Attention::new(store, &format!("{p}.self_attn"), c, c, c, c, heads, rng),
                    norm2: LayerNorm::new(store, &format!("{p}.norm2"), c),
                    cross_attn: Attention::new(store, &format!("{p}.cross_attn"), c, m, c, c, heads, rng),
                    norm3: LayerNorm::new(store, &format!("{p}.norm3"), c),
                    mlp: Mlp::new(store, &format!("{p}.mlp"), &[c, 2 * c, c], rng),
                }
            })
            .collect();
        let temporal = store.add(
            "memory_attention.temporal_embedding",
            vidseg_autograd::nn::uniform(&[cfg.p_cap + 1, m], 0.02, rng),
        );
        Self {
            blocks,
            norm: LayerNorm::new(store, "memory_attention.norm", c),
            temporal,
            rope_theta: cfg.rope_theta,
        }
    }

    /// `i_t` is `[c, h_L, w_L]`; each selected entry comes with its
    /// temporal-offset slot. Returns the conditioned `[c, h_L, w_L]` map.
    pub fn forward<'g>(&self, i_t: Var<'g>, selected: &[(&MemoryEntry<Var<'g>>, usize)]) -> Var<'g> {
        let s = i_t.shape();
        let (c, h, w) = (s[0], s[1], s[2]);
        let g = i_t.graph();
        let mut x = i_t.reshape(&[c, h * w]).transpose();
        let coords = grid_coords(h, w);
        let head_dim = self.blocks.first().map_or(4, |b| b.self_attn.head_dim());
        let rope_q = RopeTables::axial_2d(&coords, head_dim, self.rope_theta);

        let memory = (!selected.is_empty()).then(|| {
            let table = g.param(self.temporal);
            let m = table.shape()[1];
            let rows: Vec<Var<'g>> = selected
                .iter()
                .map(|(e, slot)| {
                    let emb = table.narrow(0, *slot, 1).reshape(&[m]);
                    e.features.reshape(&[m, h * w]).transpose().add_last(emb)
                })
                .collect();
            let mem = if rows.len() == 1 { rows[0] } else { Var::concat(&rows, 0) };
            let mem_coords: Vec<(f64, f64)> = (0..selected.len()).flat_map(|_| coords.iter().copied()).collect();
            (mem, RopeTables::axial_2d(&mem_coords, head_dim, self.rope_theta))
        });

        for b in &self.blocks {
            let n = b.norm1.forward(x);
            x = x + b.self_attn.forward(n, n, n, Some((&rope_q, &rope_q)));
            if let Some((mem, rope_k)) = &memory {
                let n = b.norm2.forward(x);
                x = x + b.cross_attn.forward(n, *mem, *mem, Some((&rope_q, rope_k)));
            }
            x = x + b.mlp.forward(b.norm3.forward(x));
        }
        self.norm.forward(x).transpose().reshape(&[c, h, w])
    }
}
