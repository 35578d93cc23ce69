//! Two-way transformer mask decoder with multimask output, IoU prediction
//! and an object-visibility head.

use rand::Rng;
use vidseg_autograd::nn::{uniform, Attention, Conv2d, ConvTranspose2d, LayerNorm, Mlp};
use vidseg_autograd::{Array, Graph, ParamId, ParamStore, Var};

use super::config::ModelConfig;
use super::prompt_encoder::{grid_encoding, EncodedPrompts};
use crate::Mask;

pub const NUM_MASKS: usize = 3;
/// IoU token, three mask tokens, object token.
const OUTPUT_TOKENS: usize = NUM_MASKS + 2;

#[derive(Clone, Debug)]
pub struct TwoWayBlock {
    pub self_attn: Attention,
    pub norm1: LayerNorm,
    pub token_to_image: Attention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
    pub norm3: LayerNorm,
    pub image_to_token: Attention,
    pub norm4: LayerNorm,
}

impl TwoWayBlock {
    fn new(store: &mut ParamStore, p: &str, d: usize, heads: usize, rng: &mut impl Rng) -> Self {
        Self {
            self_attn: Attention::new(store, &format!("{p}.self_attn"), d, d, d, d, heads, rng),
            norm1: LayerNorm::new(store, &format!("{p}.norm1"), d),
            token_to_image: Attention::new(store, &format!("{p}.token_to_image"), d, d, d / 2, d, heads, rng),
            norm2: LayerNorm::new(store, &format!("{p}.norm2"), d),
            mlp: Mlp::new(store, &format!("{p}.mlp"), &[d, 2 * d, d], rng),
            norm3: LayerNorm::new(store, &format!("{p}.norm3"), d),
            image_to_token: Attention::new(store, &format!("{p}.image_to_token"), d, d, d / 2, d, heads, rng),
            norm4: LayerNorm::new(store, &format!("{p}.norm4"), d),
        }
    }

    /// `queries [k, d]` with positional part `query_pe`, `keys [hw, d]` with
    /// `key_pe`. Returns the updated pair.
    fn forward<'g>(&self, queries: Var<'g>, keys: Var<'g>, query_pe: Var<'g>, key_pe: Var<'g>) -> (Var<'g>, Var<'g>) {
        let q = queries + query_pe;
        let queries = self.norm1.forward(queries + self.self_attn.forward(q, q, queries, None));
        let q = queries + query_pe;
        let k = keys + key_pe;
        let queries = self.norm2.forward(queries + self.token_to_image.forward(q, k, keys, None));
        let queries = self.norm3.forward(queries + self.mlp.forward(queries));
        let q = queries + query_pe;
        let keys = self.norm4.forward(keys + self.image_to_token.forward(k, q, queries, None));
        (queries, keys)
    }
}

#[derive(Clone, Debug)]
pub struct MaskDecoder {
    pub src_proj: Conv2d,
    pub output_tokens: ParamId,
    pub blocks: Vec<TwoWayBlock>,
    pub final_attn: Attention,
    pub final_norm: LayerNorm,
    pub upscale: [ConvTranspose2d; 3],
    /// 1x1 projections of stages 3, 2, 1 matched to the upscaling outputs.
    pub high_res: Option<[Conv2d; 3]>,
    pub hypernets: Vec<Mlp>,
    pub iou_head: Mlp,
    pub object_head: Mlp,
    d: usize,
}

/// Raw decoder outputs kept on the graph.
#[derive(Clone, Copy, Debug)]
pub struct DecoderOutput<'g> {
    /// `[3, h, w]`.
    pub mask_logits: Var<'g>,
    /// `[3]`, already squashed to `[0, 1]`.
    pub iou_pred: Var<'g>,
    /// `[1]` visibility logit.
    pub object_logit: Var<'g>,
}

impl DecoderOutput<'_> {
    pub fn to_output(&self) -> SegmentationOutput {
        SegmentationOutput::new(
            (*self.mask_logits.value()).clone(),
            self.iou_pred.value().data().to_vec(),
            crate::model::sigmoid(self.object_logit.value().data()[0]),
        )
    }
}

/// Detached decoder outputs for one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationOutput {
    pub mask_logits: Array,
    pub iou_pred: Vec<f64>,
    pub object_score: f64,
    pub selected_index: usize,
}

impl SegmentationOutput {
    pub fn new(mask_logits: Array, iou_pred: Vec<f64>, object_score: f64) -> Self {
        let selected_index = argmax(&iou_pred);
        Self {
            mask_logits,
            iou_pred,
            object_score,
            selected_index,
        }
    }

    /// Binary mask: empty when the object is predicted hidden, otherwise
    /// `sigmoid(logit) > threshold` on the selected output.
    pub fn finalize(&self, threshold: f64) -> Mask {
        let (h, w) = (self.mask_logits.dim(1), self.mask_logits.dim(2));
        if self.object_score < 0.5 {
            return Mask::new(h, w);
        }
        let plane = &self.mask_logits.data()[self.selected_index * h * w..(self.selected_index + 1) * h * w];
        Mask::from_bits(h, w, plane.iter().map(|&l| crate::model::sigmoid(l) > threshold).collect())
            .expect("plane size matches")
    }
}

/// First index of the largest value.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

impl MaskDecoder {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let (d, heads) = (cfg.d, cfg.heads);
        Self {
            src_proj: Conv2d::new(store, "decoder.src_proj", cfg.c_last(), d, 1, 1, 0, rng),
            output_tokens: store.add("decoder.output_tokens", uniform(&[OUTPUT_TOKENS, d], 1.0, rng)),
            blocks: (0..cfg.decoder_blocks)
                .map(|b| TwoWayBlock::new(store, &format!("decoder.blocks.{b}"), d, heads, rng))
                .collect(),
            final_attn: Attention::new(store, "decoder.final_attn", d, d, d / 2, d, heads, rng),
            final_norm: LayerNorm::new(store, "decoder.final_norm", d),
            upscale: [
                ConvTranspose2d::new(store, "decoder.upscale1", d, d / 2, 2, rng),
                ConvTranspose2d::new(store, "decoder.upscale2", d / 2, d / 4, 2, rng),
                ConvTranspose2d::new(store, "decoder.upscale3", d / 4, d / 4, 2, rng),
            ],
            high_res: cfg.high_res_features.then(|| {
                let c = cfg.channels;
                [
                    Conv2d::new(store, "decoder.high_res.stage3", c[2], d / 2, 1, 1, 0, rng),
                    Conv2d::new(store, "decoder.high_res.stage2", c[1], d / 4, 1, 1, 0, rng),
                    Conv2d::new(store, "decoder.high_res.stage1", c[0], d / 4, 1, 1, 0, rng),
                ]
            }),
            hypernets: (0..NUM_MASKS)
                .map(|i| Mlp::new(store, &format!("decoder.hypernets.{i}"), &[d, d, d / 4], rng))
                .collect(),
            iou_head: Mlp::new(store, "decoder.iou_head", &[d, d, NUM_MASKS], rng),
            object_head: Mlp::new(store, "decoder.object_head", &[d, d, 1], rng),
            d,
        }
    }

    /// `features` is the memory-conditioned `[c, h_L, w_L]` map; masks come
    /// out at the frame size `(h, w)`. `high_res` holds the stage 1..L-1
    /// features and is used only when the high-resolution path is built.
    pub fn forward<'g>(
        &self,
        g: &'g Graph<'g>,
        features: Var<'g>,
        prompts: &EncodedPrompts<'g>,
        memory_prompts: Option<Var<'g>>,
        high_res: &[Var<'g>],
        (h, w): (usize, usize),
    ) -> DecoderOutput<'g> {
        let d = self.d;
        let s = features.shape();
        let (hl, wl) = (s[1], s[2]);
        let src = self.src_proj.forward(features) + prompts.dense;
        let keys = src.reshape(&[d, hl * wl]).transpose();
        let key_pe = g.constant(grid_encoding(hl, wl, d));

        let mut tokens = vec![g.param(self.output_tokens)];
        tokens.extend(prompts.sparse);
        tokens.extend(memory_prompts);
        let query_pe = if tokens.len() == 1 { tokens[0] } else { Var::concat(&tokens, 0) };

        let (mut queries, mut keys) = (query_pe, keys);
        for b in &self.blocks {
            (queries, keys) = b.forward(queries, keys, query_pe, key_pe);
        }
        let q = queries + query_pe;
        let k = keys + key_pe;
        queries = self.final_norm.forward(queries + self.final_attn.forward(q, k, keys, None));

        let mut up = keys.transpose().reshape(&[d, hl, wl]);
        for (i, conv) in self.upscale.iter().enumerate() {
            up = conv.forward(up);
            if let Some(skips) = &self.high_res {
                up = up + skips[i].forward(high_res[high_res.len() - 1 - i]);
            }
            up = up.gelu();
        }
        let (uh, uw) = (8 * hl, 8 * wl);
        let up = up.reshape(&[d / 4, uh * uw]);
        let planes: Vec<Var<'g>> = self
            .hypernets
            .iter()
            .enumerate()
            .map(|(i, mlp)| mlp.forward(queries.narrow(0, 1 + i, 1)).matmul(up))
            .collect();
        let mask_logits = Var::concat(&planes, 0).reshape(&[NUM_MASKS, uh, uw]).resize_bilinear(h, w);
        let iou_pred = self
            .iou_head
            .forward(queries.narrow(0, 0, 1))
            .sigmoid()
            .reshape(&[NUM_MASKS]);
        let object_logit = self
            .object_head
            .forward(queries.narrow(0, NUM_MASKS + 1, 1))
            .reshape(&[1]);
        DecoderOutput {
            mask_logits,
            iou_pred,
            object_logit,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finalize_gating_and_threshold() {
        let logits = Array::from_vec(&[3, 2, 2], [2., -2., -2., 2.].repeat(3));
        let out = SegmentationOutput::new(logits.clone(), vec![0.2, 0.9, 0.1], 0.9);
        assert_eq!(out.selected_index, 1);
        assert_eq!(out.finalize(0.5).bits(), &[true, false, false, true]);
        let hidden = SegmentationOutput::new(logits, vec![0.2, 0.9, 0.1], 0.1);
        assert!(hidden.finalize(0.5).is_blank());
        let big = SegmentationOutput::new(Array::full(&[3, 2, 2], 50.0), vec![0.5; 3], 0.9);
        assert_eq!(big.finalize(0.5).count(), 4);
        assert_eq!(big.selected_index, 0);
    }
}
