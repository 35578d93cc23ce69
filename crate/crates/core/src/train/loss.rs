//! Mask, IoU and visibility losses.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use vidseg_autograd::{Array, Var};

use crate::model::DecoderOutput;
use crate::{Error, Mask, Result};

pub const MASK_WEIGHT: f64 = 20.0;
pub const IOU_WEIGHT: f64 = 1.0;
pub const OBJECT_WEIGHT: f64 = 1.0;

const POOL: usize = 31;
const EDGE_GAIN: f64 = 5.0;

/// `1 + 5 |avgpool31(gt) - gt|` with zero padding counted in the divisor.
pub fn weight_map(gt: &Array) -> Array {
    let (h, w) = (gt.dim(0), gt.dim(1));
    let mut integral = vec![0.0; (h + 1) * (w + 1)];
    for y in 0..h {
        for x in 0..w {
            integral[(y + 1) * (w + 1) + x + 1] =
                gt.data()[y * w + x] + integral[y * (w + 1) + x + 1] + integral[(y + 1) * (w + 1) + x] - integral[y * (w + 1) + x];
        }
    }
    let r = POOL / 2;
    let area = (POOL * POOL) as f64;
    Array::from_fn(&[h, w], |i| {
        let (y, x) = (i / w, i % w);
        let (y0, y1) = (y.saturating_sub(r), (y + r + 1).min(h));
        let (x0, x1) = (x.saturating_sub(r), (x + r + 1).min(w));
        let s = integral[y1 * (w + 1) + x1] - integral[y0 * (w + 1) + x1] - integral[y1 * (w + 1) + x0] + integral[y0 * (w + 1) + x0];
        1.0 + EDGE_GAIN * (s / area - gt.data()[i]).abs()
    })
}

/// Weighted BCE plus weighted soft IoU of `[h, w]` logits against a binary
/// target.
pub fn weighted_mask_loss<'g>(logits: Var<'g>, gt: &Array) -> Result<Var<'g>> {
    if logits.shape() != gt.shape() || gt.ndim() != 2 {
        return Err(Error::Shape(format!(
            "logits {:?} and target {:?} must be equal 2-D shapes",
            logits.shape(),
            gt.shape()
        )));
    }
    if let Some(v) = gt.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(Error::Validation(format!("mask target must be binary, found {v}")));
    }
    let g = logits.graph();
    let weights = weight_map(gt);
    let wsum = weights.sum();
    let w = g.constant(weights);
    let target = g.constant(gt.clone());
    let wbce = (w * logits.bce_with_logits(Arc::new(gt.clone()))).sum().scale(1.0 / wsum);
    let p = logits.sigmoid();
    let inter = (w * p * target).sum();
    let union = (w * (p + target - p * target)).sum();
    let wiou = -(inter.add_scalar(1.0).div(union.add_scalar(1.0))).add_scalar(-1.0);
    Ok(wbce + wiou)
}

/// Loss components of one frame (or their mean over frames).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub mask: f64,
    pub iou: f64,
    pub object: f64,
    pub total: f64,
}

impl LossBundle {
    pub fn new(mask: f64, iou: f64, object: f64) -> Self {
        Self {
            mask,
            iou,
            object,
            total: MASK_WEIGHT * mask + IOU_WEIGHT * iou + OBJECT_WEIGHT * object,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.mask, self.iou, self.object, self.total].iter().all(|v| v.is_finite())
    }
}

pub fn total_loss<'g>(mask: Var<'g>, iou: Var<'g>, object: Var<'g>) -> Var<'g> {
    mask.scale(MASK_WEIGHT) + iou.scale(IOU_WEIGHT) + object.scale(OBJECT_WEIGHT)
}

/// Loss of one decoded frame. Only the output with the lowest mask loss is
/// trained to segment; the IoU head regresses the true IoU of every output
/// (logits thresholded at zero) and the MAE is averaged over outputs.
pub fn frame_loss<'g>(out: &DecoderOutput<'g>, gt: &Mask) -> Result<(Var<'g>, LossBundle)> {
    let (h, w) = gt.dims();
    let target = gt.to_array();
    let k = out.mask_logits.shape()[0];
    let mut best: Option<Var<'g>> = None;
    let mut iou_terms = Vec::with_capacity(k);
    for i in 0..k {
        let plane = out.mask_logits.narrow(0, i, 1).reshape(&[h, w]);
        let l = weighted_mask_loss(plane, &target)?;
        if best.is_none_or(|b| l.item() < b.item()) {
            best = Some(l);
        }
        let pred = Mask::from_bits(h, w, plane.value().data().iter().map(|&v| v > 0.0).collect())?;
        iou_terms.push(out.iou_pred.narrow(0, i, 1).add_scalar(-pred.iou(gt)).abs());
    }
    let l_mask = best.ok_or_else(|| Error::Shape("decoder produced no masks".into()))?;
    let l_iou = Var::concat(&iou_terms, 0).mean();
    let visible = if gt.is_blank() { 0.0 } else { 1.0 };
    let l_obj = out.object_logit.bce_with_logits(Arc::new(Array::from_vec(&[1], vec![visible]))).sum();
    let total = total_loss(l_mask, l_iou, l_obj);
    Ok((total, LossBundle::new(l_mask.item(), l_iou.item(), l_obj.item())))
}
