use std::f64::consts::TAU;

use rand::Rng;
use vidseg_autograd::nn::{uniform, Conv2d};
use vidseg_autograd::{Array, Graph, ParamId, ParamStore, Var};

use super::config::ModelConfig;
use crate::{Prompt, Result};

const POSITIVE: usize = 0;
const NEGATIVE: usize = 1;
const BOX_TOP_LEFT: usize = 2;
const BOX_BOTTOM_RIGHT: usize = 3;

/// Sinusoidal encoding of normalised coordinates `(u, v)` in `[0, 1]`:
/// `d / 4` geometric frequencies, each contributing sin/cos for both axes.
pub fn position_encoding(u: f64, v: f64, d: usize) -> Vec<f64> {
    let n = d / 4;
    let mut out = Vec::with_capacity(d);
    for k in 0..n {
        let f = if n > 1 { 16f64.powf(k as f64 / (n - 1) as f64) } else { 1.0 };
        out.extend([(TAU * f * u).sin(), (TAU * f * u).cos(), (TAU * f * v).sin(), (TAU * f * v).cos()]);
    }
    out
}

/// `[h * w, d]` encoding of the cell centres of an `h x w` grid.
pub fn grid_encoding(h: usize, w: usize, d: usize) -> Array {
    let mut data = Vec::with_capacity(h * w * d);
    for y in 0..h {
        for x in 0..w {
            data.extend(position_encoding((x as f64 + 0.5) / w as f64, (y as f64 + 0.5) / h as f64, d));
        }
    }
    Array::from_vec(&[h * w, d], data)
}

/// Sparse tokens for clicks and box corners, dense embedding for masks.
#[derive(Clone, Debug)]
pub struct PromptEncoder {
    /// `[4, d]`: positive click, negative click, box top-left, box bottom-right.
    pub type_embeddings: ParamId,
    pub no_mask: ParamId,
    pub mask_convs: [Conv2d; 3],
    d: usize,
}

/// Encoded prompts of one frame.
#[derive(Clone, Copy, Debug)]
pub struct EncodedPrompts<'g> {
    /// `[k, d]`, absent when there are no clicks or boxes.
    pub sparse: Option<Var<'g>>,
    /// `[d, h_L, w_L]`.
    pub dense: Var<'g>,
}

impl PromptEncoder {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.d;
        Self {
            type_embeddings: store.add("prompt_encoder.type_embeddings", uniform(&[4, d], 1.0, rng)),
            no_mask: store.add("prompt_encoder.no_mask", uniform(&[d], 1.0, rng)),
            mask_convs: [
                Conv2d::new(store, "prompt_encoder.mask.conv1", 1, d / 8, 2, 2, 0, rng),
                Conv2d::new(store, "prompt_encoder.mask.conv2", d / 8, d / 4, 2, 2, 0, rng),
                Conv2d::new(store, "prompt_encoder.mask.conv3", d / 4, d, 2, 2, 0, rng),
            ],
            d,
        }
    }

    /// Encodes the prompts of an `h x w` frame whose final feature grid is
    /// `hl x wl`. A later mask prompt replaces an earlier one.
    pub fn forward<'g>(&self, g: &'g Graph<'g>, prompts: &[Prompt], (h, w): (usize, usize), (hl, wl): (usize, usize)) -> Result<EncodedPrompts<'g>> {
        let d = self.d;
        let mut points: Vec<(usize, f64, f64)> = Vec::new();
        let mut mask = None;
        let norm = |x: usize, y: usize| ((x as f64 + 0.5) / w as f64, (y as f64 + 0.5) / h as f64);
        for p in prompts {
            p.validate(h, w)?;
            match p {
                Prompt::Click { x, y, positive } => {
                    let (u, v) = norm(*x, *y);
                    points.push((if *positive { POSITIVE } else { NEGATIVE }, u, v));
                }
                Prompt::Box(b) => {
                    let (u0, v0) = norm(b.x0, b.y0);
                    let (u1, v1) = norm(b.x1, b.y1);
                    points.push((BOX_TOP_LEFT, u0, v0));
                    points.push((BOX_BOTTOM_RIGHT, u1, v1));
                }
                Prompt::Mask { mask: m } => mask = Some(m),
            }
        }
        let sparse = (!points.is_empty()).then(|| {
            let table = g.param(self.type_embeddings);
            let kinds: Vec<Var<'g>> = points.iter().map(|(k, _, _)| table.narrow(0, *k, 1)).collect();
            let kinds = if kinds.len() == 1 { kinds[0] } else { Var::concat(&kinds, 0) };
            let pe: Vec<f64> = points.iter().flat_map(|(_, u, v)| position_encoding(*u, *v, d)).collect();
            kinds + g.constant(Array::from_vec(&[points.len(), d], pe))
        });
        let dense = match mask {
            Some(m) => {
                let pooled = m.area_pool(8 * hl, 8 * wl)?;
                let x = g.constant(Array::from_vec(&[1, 8 * hl, 8 * wl], pooled));
                let x = self.mask_convs[0].forward(x).gelu();
                let x = self.mask_convs[1].forward(x).gelu();
                self.mask_convs[2].forward(x)
            }
            None => {
                let e = g.param(self.no_mask).reshape(&[d, 1]);
                let ones = g.constant(Array::full(&[1, hl * wl], 1.0));
                e.matmul(ones).reshape(&[d, hl, wl])
            }
        };
        Ok(EncodedPrompts { sparse, dense })
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::{BoxXyxy, Error, Mask};

    fn build() -> (ParamStore, PromptEncoder) {
        let mut store = ParamStore::new();
        let pe = PromptEncoder::new(&mut store, &ModelConfig::desk(), &mut ChaCha8Rng::seed_from_u64(0));
        (store, pe)
    }

    #[test]
    fn token_cardinality() {
        let (store, pe) = build();
        let g = Graph::inference(&store);
        let none = pe.forward(&g, &[], (64, 64), (2, 2)).unwrap();
        assert!(none.sparse.is_none());
        let no_mask = store.get(pe.no_mask).data().to_vec();
        for (k, v) in none.dense.value().data().iter().enumerate() {
            assert_eq!(*v, no_mask[k / 4]);
        }
        let one = pe.forward(&g, &[Prompt::positive(3, 4)], (64, 64), (2, 2)).unwrap();
        assert_eq!(one.sparse.unwrap().shape(), vec![1, 32]);
        let b = Prompt::Box(BoxXyxy { x0: 1, y0: 2, x1: 9, y1: 10 });
        let two = pe.forward(&g, &[b], (64, 64), (2, 2)).unwrap();
        let t = two.sparse.unwrap().value();
        assert_eq!(t.shape(), &[2, 32]);
        assert!(t.narrow(0, 0, 1).max_abs_diff(&t.narrow(0, 1, 1)) > 0.0);
        let m = pe
            .forward(&g, &[Prompt::Mask { mask: Mask::full(64, 64) }], (64, 64), (2, 2))
            .unwrap();
        assert!(m.sparse.is_none());
        assert_eq!(m.dense.shape(), vec![32, 2, 2]);
    }

    #[test]
    fn out_of_bounds_click_is_rejected() {
        let (store, pe) = build();
        let g = Graph::inference(&store);
        let err = pe.forward(&g, &[Prompt::positive(64, 0)], (64, 64), (2, 2)).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }
}
