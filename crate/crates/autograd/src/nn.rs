//! Parameterised layers built on [`Var`] operations.

use std::sync::Arc;

use rand::Rng;

use crate::{Array, ParamId, ParamStore, Var};

/// Tensor with entries drawn uniformly from `[-bound, bound]`.
pub fn uniform(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Array {
    Array::from_fn(shape, |_| rng.random_range(-bound..=bound))
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// `y = x W + b` on row vectors; `W` is `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, prefix: &str, in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = store.add(join(prefix, "weight"), uniform(&[in_dim, out_dim], bound, rng));
        let bias = Some(store.add(join(prefix, "bias"), uniform(&[out_dim], bound, rng)));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn no_bias(store: &mut ParamStore, prefix: &str, in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = store.add(join(prefix, "weight"), uniform(&[in_dim, out_dim], bound, rng));
        Self {
            weight,
            bias: None,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<'g>(&self, x: Var<'g>) -> Var<'g> {
        let g = x.graph();
        let y = x.matmul(g.param(self.weight));
        match self.bias {
            Some(b) => y.add_last(g.param(b)),
            None => y,
        }
    }
}

/// 2-D convolution with bias over `[c, h, w]` maps.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = c_in * kernel * kernel;
        let bound = (6.0 / fan_in as f64).sqrt() / 2.0;
        let weight = store.add(join(prefix, "weight"), uniform(&[c_out, c_in, kernel, kernel], bound, rng));
        let bias = store.add(join(prefix, "bias"), Array::zeros(&[c_out]));
        Self {
            weight,
            bias,
            stride,
            pad,
        }
    }

    pub fn forward<'g>(&self, x: Var<'g>) -> Var<'g> {
        let g = x.graph();
        x.conv2d(g.param(self.weight), self.stride, self.pad)
            .add_channel(g.param(self.bias))
    }
}

/// 3-D convolution with bias over `[c, t, h, w]` maps, replicate padding in
/// time.
#[derive(Clone, Debug)]
pub struct Conv3d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
    pub tpad: usize,
}

impl Conv3d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        c_in: usize,
        c_out: usize,
        kernel: [usize; 3],
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = c_in * kernel.iter().product::<usize>();
        let bound = (6.0 / fan_in as f64).sqrt() / 2.0;
        let weight = store.add(
            join(prefix, "weight"),
            uniform(&[c_out, c_in, kernel[0], kernel[1], kernel[2]], bound, rng),
        );
        let bias = store.add(join(prefix, "bias"), Array::zeros(&[c_out]));
        Self {
            weight,
            bias,
            stride,
            pad,
            tpad: kernel[0] / 2,
        }
    }

    pub fn forward<'g>(&self, x: Var<'g>) -> Var<'g> {
        let g = x.graph();
        let y = x.conv3d(g.param(self.weight), self.stride, self.pad, self.tpad);
        let s = y.shape();
        let c = s[0];
        y.reshape(&[c, s[1] * s[2] * s[3]])
            .add_channel(g.param(self.bias))
            .reshape(&s)
    }
}

/// Non-overlapping transposed convolution (kernel == stride) with bias.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl ConvTranspose2d {
    pub fn new(store: &mut ParamStore, prefix: &str, c_in: usize, c_out: usize, stride: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (c_in as f64).sqrt();
        let weight = store.add(join(prefix, "weight"), uniform(&[c_in, c_out, stride, stride], bound, rng));
        let bias = store.add(join(prefix, "bias"), Array::zeros(&[c_out]));
        Self { weight, bias }
    }

    pub fn forward<'g>(&self, x: Var<'g>) -> Var<'g> {
        let g = x.graph();
        x.conv_transpose2d(g.param(self.weight)).add_channel(g.param(self.bias))
    }
}

/// Layer normalisation over the last axis.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(join(prefix, "weight"), Array::full(&[dim], 1.0)),
            beta: store.add(join(prefix, "bias"), Array::zeros(&[dim])),
            eps: 1e-6,
        }
    }

    pub fn forward<'g>(&self, x: Var<'g>) -> Var<'g> {
        let g = x.graph();
        x.layer_norm(g.param(self.gamma), g.param(self.beta), self.eps)
    }
}

/// Stack of linear layers with ReLU between them.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `dims` lists every width from input to output, e.g. `[in, hidden, out]`.
    pub fn new(store: &mut ParamStore, prefix: &str, dims: &[usize], rng: &mut impl Rng) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least input and output widths");
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &join(prefix, &format!("layers.{i}")), w[0], w[1], rng))
            .collect();
        Self { layers }
    }

    pub fn forward<'g>(&self, x: Var<'g>) -> Var<'g> {
        let last = self.layers.len() - 1;
        self.layers.iter().enumerate().fold(x, |h, (i, l)| {
            let y = l.forward(h);
            if i < last {
                y.relu()
            } else {
                y
            }
        })
    }
}

/// Cosine/sine tables for rotary embedding, `[n, head_dim / 2]` each.
#[derive(Clone, Debug)]
pub struct RopeTables {
    pub cos: Arc<Array>,
    pub sin: Arc<Array>,
}

impl RopeTables {
    /// Axial 2-D tables: the first half of each head's rotation pairs turns
    /// with the x coordinate, the second half with the y coordinate.
    pub fn axial_2d(coords: &[(f64, f64)], head_dim: usize, theta: f64) -> Self {
        assert!(head_dim.is_multiple_of(4), "2-D rotary embedding needs head_dim divisible by 4");
        let half = head_dim / 2;
        let quarter = head_dim / 4;
        let freqs: Vec<f64> = (0..quarter)
            .map(|i| 1.0 / theta.powf(i as f64 / quarter as f64))
            .collect();
        let mut cos = Vec::with_capacity(coords.len() * half);
        let mut sin = Vec::with_capacity(coords.len() * half);
        for &(x, y) in coords {
            for p in 0..half {
                let angle = if p < quarter { x * freqs[p] } else { y * freqs[p - quarter] };
                cos.push(angle.cos());
                sin.push(angle.sin());
            }
        }
        Self {
            cos: Arc::new(Array::from_vec(&[coords.len(), half], cos)),
            sin: Arc::new(Array::from_vec(&[coords.len(), half], sin)),
        }
    }

    pub fn len(&self) -> usize {
        self.cos.dim(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Multi-head scaled dot-product attention with separate query/key/value
/// input widths and an internal width split evenly across heads.
#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
    pub inner: usize,
}

impl Attention {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        q_dim: usize,
        kv_dim: usize,
        inner: usize,
        out_dim: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(inner.is_multiple_of(heads), "attention width {inner} not divisible by {heads} heads");
        Self {
            q: Linear::new(store, &join(prefix, "q_proj"), q_dim, inner, rng),
            k: Linear::new(store, &join(prefix, "k_proj"), kv_dim, inner, rng),
            v: Linear::new(store, &join(prefix, "v_proj"), kv_dim, inner, rng),
            out: Linear::new(store, &join(prefix, "out_proj"), inner, out_dim, rng),
            heads,
            inner,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.inner / self.heads
    }

    /// `queries [nq, q_dim]`, `keys [nk, kv_dim]`, `values [nk, kv_dim]`.
    /// Rotary tables, when given, must match `nq` / `nk` rows and the head
    /// width.
    pub fn forward<'g>(
        &self,
        queries: Var<'g>,
        keys: Var<'g>,
        values: Var<'g>,
        rope: Option<(&RopeTables, &RopeTables)>,
    ) -> Var<'g> {
        let q = self.q.forward(queries);
        let k = self.k.forward(keys);
        let v = self.v.forward(values);
        let dh = self.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let heads: Vec<Var<'g>> = (0..self.heads)
            .map(|h| {
                let mut qh = q.narrow(1, h * dh, dh);
                let mut kh = k.narrow(1, h * dh, dh);
                if let Some((rq, rk)) = rope {
                    qh = qh.rope(Arc::clone(&rq.cos), Arc::clone(&rq.sin));
                    kh = kh.rope(Arc::clone(&rk.cos), Arc::clone(&rk.sin));
                }
                let p = qh.matmul_nt(kh).scale(scale).softmax_rows(None);
                p.matmul(v.narrow(1, h * dh, dh))
            })
            .collect();
        let merged = if heads.len() == 1 { heads[0] } else { Var::concat(&heads, 1) };
        self.out.forward(merged)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::gradcheck::check_param;
    use crate::Graph;

    #[test]
    fn attention_param_grads_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let attn = Attention::new(&mut store, "attn", 8, 6, 8, 8, 2, &mut rng);
        let xq = uniform(&[3, 8], 1.0, &mut rng);
        let xk = uniform(&[5, 6], 1.0, &mut rng);
        let coords_q: Vec<(f64, f64)> = (0..3).map(|i| (i as f64, 0.5)).collect();
        let coords_k: Vec<(f64, f64)> = (0..5).map(|i| (0.3, i as f64)).collect();
        let rq = RopeTables::axial_2d(&coords_q, 4, 10.0);
        let rk = RopeTables::axial_2d(&coords_k, 4, 10.0);
        for id in [attn.q.weight, attn.k.weight, attn.v.weight, attn.out.weight] {
            let checks = check_param(&store, id, &[0, 5, 11], 1e-6, |g: &Graph<'_>| {
                let q = g.constant(xq.clone());
                let k = g.constant(xk.clone());
                attn.forward(q, k, k, Some((&rq, &rk))).square().sum()
            });
            for c in checks {
                assert!(c.relative_error(1e-8) < 1e-5, "{}: {c:?}", store.name(id));
            }
        }
    }

    #[test]
    fn mlp_and_conv_layers_produce_expected_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "mlp", &[4, 7, 2], &mut rng);
        let conv = Conv2d::new(&mut store, "conv", 3, 5, 3, 2, 1, &mut rng);
        let c3 = Conv3d::new(&mut store, "c3", 3, 4, [3, 3, 3], 2, 1, &mut rng);
        let up = ConvTranspose2d::new(&mut store, "up", 5, 2, 2, &mut rng);
        let g = Graph::inference(&store);
        assert_eq!(mlp.forward(g.constant(Array::zeros(&[6, 4]))).shape(), vec![6, 2]);
        let y = conv.forward(g.constant(Array::zeros(&[3, 8, 8])));
        assert_eq!(y.shape(), vec![5, 4, 4]);
        assert_eq!(up.forward(y).shape(), vec![2, 8, 8]);
        assert_eq!(c3.forward(g.constant(Array::zeros(&[3, 4, 8, 8]))).shape(), vec![4, 4, 4, 4]);
    }
}
