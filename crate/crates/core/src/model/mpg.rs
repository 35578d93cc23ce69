//! Memory prompt generator: learnable tokens that read foreground memory
//! features through masked cross-attention and are handed to the mask
//! decoder as extra prompt tokens.

use std::sync::Arc;

use rand::Rng;
use vidseg_autograd::nn::{uniform, Attention, Linear, Mlp};
use vidseg_autograd::{ParamId, ParamStore, Var};

use super::config::ModelConfig;
use super::memory::MemoryEntry;
use crate::{Error, Result};

/// Flattened memory rows `[rows, c_mem]` with a per-row foreground flag.
#[derive(Clone, Debug)]
pub struct MemoryContext<'g> {
    pub features: Var<'g>,
    pub foreground: Vec<bool>,
}

impl<'g> MemoryContext<'g> {
    /// Rows of all entries in order, positions row-major within each entry.
    pub fn from_entries(entries: &[&MemoryEntry<Var<'g>>]) -> Option<Self> {
        let first = entries.first()?;
        let s = first.features.shape();
        let (m, hw) = (s[0], s[1] * s[2]);
        let rows: Vec<Var<'g>> = entries
            .iter()
            .map(|e| e.features.reshape(&[m, hw]).transpose())
            .collect();
        let features = if rows.len() == 1 { rows[0] } else { Var::concat(&rows, 0) };
        let foreground = entries.iter().flat_map(|e| e.mask_lowres.bits().iter().copied()).collect();
        Some(Self { features, foreground })
    }
}

#[derive(Clone, Debug)]
pub struct MemoryPromptGenerator {
    /// Learnable `[g, d]` tokens.
    pub tokens: ParamId,
    pub psi_q: Linear,
    pub psi_k: Linear,
    pub psi_v: Linear,
    pub self_attn: Attention,
    pub mlp: Mlp,
    pub masked: bool,
}

/// Every refinement stage of the tokens.
#[derive(Clone, Copy, Debug)]
pub struct PromptStages<'g> {
    pub g: Var<'g>,
    pub g1: Var<'g>,
    pub g2: Var<'g>,
    pub g3: Var<'g>,
}

impl MemoryPromptGenerator {
    /// `None` when the configuration asks for zero tokens.
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) -> Option<Self> {
        let (g, d, m) = (cfg.memory_tokens, cfg.d, cfg.c_mem);
        if g == 0 {
            return None;
        }
        Some(Self {
            tokens: store.add("mpg.tokens", uniform(&[g, d], 1.0, rng)),
            psi_q: Linear::new(store, "mpg.psi_q", d, d, rng),
            psi_k: Linear::new(store, "mpg.psi_k", m, d, rng),
            psi_v: Linear::new(store, "mpg.psi_v", m, d, rng),
            self_attn: Attention::new(store, "mpg.self_attn", d, d, d, d, 1, rng),
            mlp: Mlp::new(store, "mpg.mlp", &[d, d, d], rng),
            masked: cfg.masked_cross_attention,
        })
    }

    /// Runs the three refinements. With no context, or a masked context that
    /// has no foreground row, the cross-attention is skipped (`G' = G`).
    pub fn stages<'g>(&self, g: &'g vidseg_autograd::Graph<'g>, ctx: Option<&MemoryContext<'g>>) -> Result<PromptStages<'g>> {
        let tokens = g.param(self.tokens);
        let g1 = match ctx {
            None => tokens,
            Some(ctx) => {
                let rows = ctx.features.shape()[0];
                if ctx.foreground.len() != rows {
                    return Err(Error::Shape(format!(
                        "memory context has {rows} feature rows but {} mask rows",
                        ctx.foreground.len()
                    )));
                }
                if self.masked && !ctx.foreground.iter().any(|&b| b) {
                    tokens
                } else {
                    let bias = self.masked.then(|| {
                        Arc::new(
                            ctx.foreground
                                .iter()
                                .map(|&fg| if fg { 0.0 } else { f64::NEG_INFINITY })
                                .collect::<Vec<f64>>(),
                        )
                    });
                    let q = self.psi_q.forward(tokens);
                    let k = self.psi_k.forward(ctx.features);
                    let v = self.psi_v.forward(ctx.features);
                    q.matmul_nt(k).softmax_rows(bias).matmul(v) + tokens
                }
            }
        };
        let g2 = self.self_attn.forward(g1, g1, g1, None);
        let g3 = self.mlp.forward(g2);
        Ok(PromptStages {
            g: tokens,
            g1,
            g2,
            g3,
        })
    }

    /// Final `[g, d]` memory prompt tokens.
    pub fn forward<'g>(&self, g: &'g vidseg_autograd::Graph<'g>, ctx: Option<&MemoryContext<'g>>) -> Result<Var<'g>> {
        Ok(self.stages(g, ctx)?.g3)
    }
}
