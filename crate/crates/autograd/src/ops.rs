use std::ops::{Add, Mul, Neg, Sub};
use std::sync::Arc;

use crate::linalg::gemm;
use crate::{Array, Var};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

fn same_shape(a: &Array, b: &Array, op: &str) {
    assert_eq!(a.shape(), b.shape(), "{op}: shape mismatch");
}

impl<'g> Var<'g> {
    fn unary(self, f: impl Fn(f64) -> f64, df: impl Fn(f64, f64) -> f64 + 'static) -> Var<'g> {
        let x = self.value();
        let y = x.map(&f);
        let yv = Arc::new(y.clone());
        let id = self.id;
        self.graph.push(y, &[id], move |g, sink| {
            sink.add_with(id, || {
                let data = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .zip(yv.data())
                    .map(|((&g, &x), &y)| g * df(x, y))
                    .collect();
                Array::from_vec(g.shape(), data)
            });
        })
    }

    pub fn relu(self) -> Var<'g> {
        self.unary(|x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    /// Tanh approximation of GELU.
    pub fn gelu(self) -> Var<'g> {
        self.unary(
            |x| 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()),
            |x, _| {
                let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
            },
        )
    }

    pub fn sigmoid(self) -> Var<'g> {
        self.unary(sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn tanh(self) -> Var<'g> {
        self.unary(f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn exp(self) -> Var<'g> {
        self.unary(f64::exp, |_, y| y)
    }

    pub fn ln(self) -> Var<'g> {
        self.unary(f64::ln, |x, _| 1.0 / x)
    }

    pub fn abs(self) -> Var<'g> {
        self.unary(f64::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn square(self) -> Var<'g> {
        self.unary(|x| x * x, |x, _| 2.0 * x)
    }

    pub fn scale(self, k: f64) -> Var<'g> {
        self.unary(move |x| k * x, move |_, _| k)
    }

    pub fn add_scalar(self, k: f64) -> Var<'g> {
        self.unary(move |x| x + k, |_, _| 1.0)
    }

    fn binary(
        self,
        rhs: Var<'g>,
        op: &str,
        f: impl Fn(f64, f64) -> f64,
        da: impl Fn(f64, f64) -> f64 + 'static,
        db: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Var<'g> {
        let a = self.value();
        let b = rhs.value();
        same_shape(&a, &b, op);
        let y = a.zip_map(&b, f);
        let (ia, ib) = (self.id, rhs.id);
        self.graph.push(y, &[ia, ib], move |g, sink| {
            let grad = |d: &dyn Fn(f64, f64) -> f64| {
                let data = g
                    .data()
                    .iter()
                    .zip(a.data().iter().zip(b.data()))
                    .map(|(&g, (&x, &y))| g * d(x, y))
                    .collect();
                Array::from_vec(g.shape(), data)
            };
            sink.add_with(ia, || grad(&da));
            sink.add_with(ib, || grad(&db));
        })
    }

    pub fn div(self, rhs: Var<'g>) -> Var<'g> {
        self.binary(rhs, "div", |a, b| a / b, |_, b| 1.0 / b, |a, b| -a / (b * b))
    }

    /// `x[.., j] + b[j]` for a 1-D `b` matching the last extent.
    pub fn add_last(self, b: Var<'g>) -> Var<'g> {
        let x = self.value();
        let bv = b.value();
        let n = *x.shape().last().expect("add_last on scalar");
        assert_eq!(bv.shape(), &[n], "add_last: bias shape");
        let mut y = (*x).clone();
        for row in y.data_mut().chunks_mut(n) {
            for (v, b) in row.iter_mut().zip(bv.data()) {
                *v += b;
            }
        }
        let (ix, ib) = (self.id, b.id);
        self.graph.push(y, &[ix, ib], move |g, sink| {
            sink.add_with(ix, || g.clone());
            sink.add_with(ib, || {
                let mut acc = vec![0.0; n];
                for row in g.data().chunks(n) {
                    for (a, v) in acc.iter_mut().zip(row) {
                        *a += v;
                    }
                }
                Array::from_vec(&[n], acc)
            });
        })
    }

    /// `x[.., j] * s[j]` for a 1-D `s` matching the last extent.
    pub fn mul_last(self, s: Var<'g>) -> Var<'g> {
        let x = self.value();
        let sv = s.value();
        let n = *x.shape().last().expect("mul_last on scalar");
        assert_eq!(sv.shape(), &[n], "mul_last: scale shape");
        let mut y = (*x).clone();
        for row in y.data_mut().chunks_mut(n) {
            for (v, s) in row.iter_mut().zip(sv.data()) {
                *v *= s;
            }
        }
        let (ix, is) = (self.id, s.id);
        self.graph.push(y, &[ix, is], move |g, sink| {
            sink.add_with(ix, || {
                let mut out = g.clone();
                for row in out.data_mut().chunks_mut(n) {
                    for (v, s) in row.iter_mut().zip(sv.data()) {
                        *v *= s;
                    }
                }
                out
            });
            sink.add_with(is, || {
                let mut acc = vec![0.0; n];
                for (grow, xrow) in g.data().chunks(n).zip(x.data().chunks(n)) {
                    for j in 0..n {
                        acc[j] += grow[j] * xrow[j];
                    }
                }
                Array::from_vec(&[n], acc)
            });
        })
    }

    /// `x[c, ..] + b[c]` for a 1-D `b` matching the leading extent.
    pub fn add_channel(self, b: Var<'g>) -> Var<'g> {
        let x = self.value();
        let bv = b.value();
        let c = x.shape()[0];
        assert_eq!(bv.shape(), &[c], "add_channel: bias shape");
        let inner = x.len() / c.max(1);
        let mut y = (*x).clone();
        for (ch, row) in y.data_mut().chunks_mut(inner.max(1)).enumerate() {
            let b = bv.data()[ch];
            for v in row {
                *v += b;
            }
        }
        let (ix, ib) = (self.id, b.id);
        self.graph.push(y, &[ix, ib], move |g, sink| {
            sink.add_with(ix, || g.clone());
            sink.add_with(ib, || {
                let acc = g.data().chunks(inner.max(1)).map(|r| r.iter().sum()).collect();
                Array::from_vec(&[c], acc)
            });
        })
    }

    pub fn sum(self) -> Var<'g> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let id = self.id;
        self.graph.push(Array::scalar(x.sum()), &[id], move |g, sink| {
            let gv = g.item();
            sink.add_with(id, || Array::full(&shape, gv));
        })
    }

    pub fn mean(self) -> Var<'g> {
        let n = self.value().len().max(1) as f64;
        self.sum().scale(1.0 / n)
    }

    /// Matrix product of `[m, k]` and `[k, n]`.
    pub fn matmul(self, rhs: Var<'g>) -> Var<'g> {
        self.matmul_impl(rhs, false)
    }

    /// `self · rhsᵀ` for `[m, k]` and `[n, k]`.
    pub fn matmul_nt(self, rhs: Var<'g>) -> Var<'g> {
        self.matmul_impl(rhs, true)
    }

    fn matmul_impl(self, rhs: Var<'g>, trans_b: bool) -> Var<'g> {
        let a = self.value();
        let b = rhs.value();
        assert!(a.ndim() == 2 && b.ndim() == 2, "matmul expects matrices, got {:?} and {:?}", a.shape(), b.shape());
        let (m, k) = (a.dim(0), a.dim(1));
        let n = if trans_b { b.dim(0) } else { b.dim(1) };
        let kb = if trans_b { b.dim(1) } else { b.dim(0) };
        assert_eq!(k, kb, "matmul inner extent mismatch: {:?} x {:?} (trans_b={trans_b})", a.shape(), b.shape());
        let mut c = vec![0.0; m * n];
        gemm(m, k, n, 1.0, a.data(), false, b.data(), trans_b, 0.0, &mut c);
        let (ia, ib) = (self.id, rhs.id);
        self.graph.push(Array::from_vec(&[m, n], c), &[ia, ib], move |g, sink| {
            // dA = dC · op(B)ᵀ
            sink.add_with(ia, || {
                let mut da = vec![0.0; m * k];
                gemm(m, n, k, 1.0, g.data(), false, b.data(), !trans_b, 0.0, &mut da);
                Array::from_vec(&[m, k], da)
            });
            // dB = Aᵀ · dC, or (dC)ᵀ · A when B entered transposed
            sink.add_with(ib, || {
                if trans_b {
                    let mut db = vec![0.0; n * k];
                    gemm(n, m, k, 1.0, g.data(), true, a.data(), false, 0.0, &mut db);
                    Array::from_vec(&[n, k], db)
                } else {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, 1.0, a.data(), true, g.data(), false, 0.0, &mut db);
                    Array::from_vec(&[k, n], db)
                }
            });
        })
    }

    pub fn transpose(self) -> Var<'g> {
        let y = self.value().transpose();
        let id = self.id;
        self.graph.push(y, &[id], move |g, sink| {
            sink.add_with(id, || g.transpose());
        })
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'g> {
        let x = self.value();
        let old = x.shape().to_vec();
        let y = (*x).clone().reshape(shape);
        let id = self.id;
        self.graph.push(y, &[id], move |g, sink| {
            sink.add_with(id, || g.clone().reshape(&old));
        })
    }

    /// `[start, start + len)` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Var<'g> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let y = x.narrow(axis, start, len);
        let id = self.id;
        self.graph.push(y, &[id], move |g, sink| {
            sink.add_with(id, || {
                let (outer, size, inner) = Array::split_at_axis(&shape, axis);
                let mut out = Array::zeros(&shape);
                let buf = out.data_mut();
                for o in 0..outer {
                    let dst = (o * size + start) * inner;
                    let src = o * len * inner;
                    buf[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
                }
                out
            });
        })
    }

    /// Concatenation along `axis`.
    pub fn concat(parts: &[Var<'g>], axis: usize) -> Var<'g> {
        assert!(!parts.is_empty(), "concat of zero variables");
        let graph = parts[0].graph;
        let values: Vec<Arc<Array>> = parts.iter().map(|p| p.value()).collect();
        let refs: Vec<&Array> = values.iter().map(|v| v.as_ref()).collect();
        let y = Array::concat(&refs, axis);
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let extents: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
        let ids_cl = ids.clone();
        graph.push(y, &ids, move |g, sink| {
            let mut start = 0;
            for (&id, &len) in ids_cl.iter().zip(&extents) {
                sink.add_with(id, || g.narrow(axis, start, len));
                start += len;
            }
        })
    }

    /// Row-wise softmax over the last axis of a matrix. `col_bias`, when
    /// given, is added to every row before normalisation (entries may be
    /// `-inf`).
    pub fn softmax_rows(self, col_bias: Option<Arc<Vec<f64>>>) -> Var<'g> {
        let x = self.value();
        assert_eq!(x.ndim(), 2, "softmax_rows expects a matrix");
        let n = x.dim(1);
        if let Some(b) = &col_bias {
            assert_eq!(b.len(), n, "softmax_rows: column bias length");
        }
        let mut y = (*x).clone();
        for row in y.data_mut().chunks_mut(n.max(1)) {
            if let Some(b) = &col_bias {
                for (v, b) in row.iter_mut().zip(b.iter()) {
                    *v += b;
                }
            }
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let yv = Arc::new(y.clone());
        let id = self.id;
        self.graph.push(y, &[id], move |g, sink| {
            sink.add_with(id, || {
                let mut out = Array::zeros(g.shape());
                for ((orow, grow), yrow) in out
                    .data_mut()
                    .chunks_mut(n.max(1))
                    .zip(g.data().chunks(n.max(1)))
                    .zip(yv.data().chunks(n.max(1)))
                {
                    let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        orow[j] = yrow[j] * (grow[j] - dot);
                    }
                }
                out
            });
        })
    }

    /// Layer normalisation over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(self, gamma: Var<'g>, beta: Var<'g>, eps: f64) -> Var<'g> {
        let x = self.value();
        let n = *x.shape().last().expect("layer_norm on scalar");
        let gv = gamma.value();
        let bv = beta.value();
        assert_eq!(gv.shape(), &[n], "layer_norm gamma shape");
        assert_eq!(bv.shape(), &[n], "layer_norm beta shape");
        let rows = x.len() / n;
        let mut xhat = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; rows];
        let mut y = vec![0.0; x.len()];
        for r in 0..rows {
            let row = &x.data()[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[r * n + j] = h;
                y[r * n + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let shape = x.shape().to_vec();
        let (ix, ig, ib) = (self.id, gamma.id, beta.id);
        self.graph.push(Array::from_vec(&shape, y), &[ix, ig, ib], move |g, sink| {
            if sink.wants(ix) {
                let mut dx = vec![0.0; g.len()];
                for r in 0..rows {
                    let gr = &g.data()[r * n..(r + 1) * n];
                    let hr = &xhat[r * n..(r + 1) * n];
                    let dh: Vec<f64> = gr.iter().zip(gv.data()).map(|(a, b)| a * b).collect();
                    let m1 = dh.iter().sum::<f64>() / n as f64;
                    let m2 = dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                    for j in 0..n {
                        dx[r * n + j] = inv_std[r] * (dh[j] - m1 - hr[j] * m2);
                    }
                }
                sink.add_with(ix, || Array::from_vec(&shape, dx));
            }
            sink.add_with(ig, || {
                let mut acc = vec![0.0; n];
                for (gr, hr) in g.data().chunks(n).zip(xhat.chunks(n)) {
                    for j in 0..n {
                        acc[j] += gr[j] * hr[j];
                    }
                }
                Array::from_vec(&[n], acc)
            });
            sink.add_with(ib, || {
                let mut acc = vec![0.0; n];
                for gr in g.data().chunks(n) {
                    for j in 0..n {
                        acc[j] += gr[j];
                    }
                }
                Array::from_vec(&[n], acc)
            });
        })
    }

    /// Elementwise numerically stable binary cross-entropy of `sigmoid(self)`
    /// against a constant target in `[0, 1]`.
    pub fn bce_with_logits(self, target: Arc<Array>) -> Var<'g> {
        let x = self.value();
        same_shape(&x, &target, "bce_with_logits");
        let y = x.zip_map(&target, |z, t| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p());
        let id = self.id;
        self.graph.push(y, &[id], move |g, sink| {
            sink.add_with(id, || {
                let data = g
                    .data()
                    .iter()
                    .zip(x.data().iter().zip(target.data()))
                    .map(|(&g, (&z, &t))| g * (sigmoid(z) - t))
                    .collect();
                Array::from_vec(g.shape(), data)
            });
        })
    }

    /// Rotary embedding on adjacent pairs of a `[n, d]` matrix:
    /// `(a, b) -> (a cos - b sin, a sin + b cos)` with per-row angles given by
    /// `cos`/`sin` tables of shape `[n, d / 2]`.
    pub fn rope(self, cos: Arc<Array>, sin: Arc<Array>) -> Var<'g> {
        let x = self.value();
        assert_eq!(x.ndim(), 2, "rope expects a matrix");
        let (n, d) = (x.dim(0), x.dim(1));
        assert!(d % 2 == 0, "rope width must be even");
        assert_eq!(cos.shape(), &[n, d / 2], "rope cos table shape");
        assert_eq!(sin.shape(), &[n, d / 2], "rope sin table shape");
        let rotate = move |src: &[f64], c: &[f64], s: &[f64], inverse: bool| -> Vec<f64> {
            let mut out = vec![0.0; src.len()];
            for r in 0..n {
                for p in 0..d / 2 {
                    let (cv, mut sv) = (c[r * d / 2 + p], s[r * d / 2 + p]);
                    if inverse {
                        sv = -sv;
                    }
                    let a = src[r * d + 2 * p];
                    let b = src[r * d + 2 * p + 1];
                    out[r * d + 2 * p] = a * cv - b * sv;
                    out[r * d + 2 * p + 1] = a * sv + b * cv;
                }
            }
            out
        };
        let y = rotate(x.data(), cos.data(), sin.data(), false);
        let id = self.id;
        self.graph.push(Array::from_vec(&[n, d], y), &[id], move |g, sink| {
            sink.add_with(id, || Array::from_vec(&[n, d], rotate(g.data(), cos.data(), sin.data(), true)));
        })
    }

    /// Bilinear resize of a `[c, h, w]` tensor to `[c, out_h, out_w]` using
    /// half-pixel centres (no corner alignment).
    pub fn resize_bilinear(self, out_h: usize, out_w: usize) -> Var<'g> {
        let x = self.value();
        assert_eq!(x.ndim(), 3, "resize_bilinear expects [c, h, w]");
        let (c, h, w) = (x.dim(0), x.dim(1), x.dim(2));
        let ry = Arc::new(interp_matrix(h, out_h));
        let rx = Arc::new(interp_matrix(w, out_w));
        let apply = {
            let (ry, rx) = (Arc::clone(&ry), Arc::clone(&rx));
            move |src: &[f64]| -> Vec<f64> {
                let mut out = vec![0.0; c * out_h * out_w];
                let mut tmp = vec![0.0; out_h * w];
                for ch in 0..c {
                    let plane = &src[ch * h * w..(ch + 1) * h * w];
                    gemm(out_h, h, w, 1.0, &ry, false, plane, false, 0.0, &mut tmp);
                    gemm(out_h, w, out_w, 1.0, &tmp, false, &rx, true, 0.0, &mut out[ch * out_h * out_w..(ch + 1) * out_h * out_w]);
                }
                out
            }
        };
        let y = apply(x.data());
        let id = self.id;
        self.graph.push(Array::from_vec(&[c, out_h, out_w], y), &[id], move |g, sink| {
            sink.add_with(id, || {
                let mut out = vec![0.0; c * h * w];
                let mut tmp = vec![0.0; h * out_w];
                for ch in 0..c {
                    let plane = &g.data()[ch * out_h * out_w..(ch + 1) * out_h * out_w];
                    gemm(h, out_h, out_w, 1.0, &ry, true, plane, false, 0.0, &mut tmp);
                    gemm(h, out_w, w, 1.0, &tmp, false, &rx, false, 0.0, &mut out[ch * h * w..(ch + 1) * h * w]);
                }
                Array::from_vec(&[c, h, w], out)
            });
        })
    }
}

/// `[out, inp]` interpolation weights for 1-D linear resampling with
/// half-pixel centres and edge clamping.
fn interp_matrix(inp: usize, out: usize) -> Vec<f64> {
    let mut m = vec![0.0; out * inp];
    let scale = inp as f64 / out as f64;
    for o in 0..out {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(inp - 1);
        let i1 = (i0 + 1).min(inp - 1);
        let frac = src - i0 as f64;
        m[o * inp + i0] += 1.0 - frac;
        m[o * inp + i1] += frac;
    }
    m
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl<'g> Add for Var<'g> {
    type Output = Var<'g>;
    fn add(self, rhs: Var<'g>) -> Var<'g> {
        self.binary(rhs, "add", |a, b| a + b, |_, _| 1.0, |_, _| 1.0)
    }
}

impl<'g> Sub for Var<'g> {
    type Output = Var<'g>;
    fn sub(self, rhs: Var<'g>) -> Var<'g> {
        self.binary(rhs, "sub", |a, b| a - b, |_, _| 1.0, |_, _| -1.0)
    }
}

impl<'g> Mul for Var<'g> {
    type Output = Var<'g>;
    fn mul(self, rhs: Var<'g>) -> Var<'g> {
        self.binary(rhs, "mul", |a, b| a * b, |_, b| b, |a, _| a)
    }
}

impl<'g> Neg for Var<'g> {
    type Output = Var<'g>;
    fn neg(self) -> Var<'g> {
        self.scale(-1.0)
    }
}

#[cfg(test)]
mod tests {
    use crate::gradcheck::check_input_grad;
    use crate::{Array, Graph, ParamStore};

    fn arr(shape: &[usize], seed: u64) -> Array {
        let mut s = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
        Array::from_fn(shape, |_| {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            (s % 10_000) as f64 / 5_000.0 - 1.0
        })
    }

    #[test]
    fn elementwise_and_reduction_grads() {
        let x = arr(&[3, 4], 1);
        let y = arr(&[3, 4], 2).map(|v| v.abs() + 0.5);
        check_input_grad(&x, 1e-6, 1e-6, |v| {
            let g = v.graph();
            let other = g.constant(y.clone());
            ((v * other).gelu() + v.sigmoid().div(other) - v.tanh().square()).exp().sum()
        });
    }

    #[test]
    fn matmul_grads_both_orientations() {
        let a = arr(&[3, 5], 3);
        let b = arr(&[5, 2], 4);
        let bt = arr(&[2, 5], 5);
        check_input_grad(&a, 1e-6, 1e-6, |v| {
            let g = v.graph();
            (v.matmul(g.constant(b.clone())).square().sum()) + v.matmul_nt(g.constant(bt.clone())).sum()
        });
        check_input_grad(&b, 1e-6, 1e-6, |v| {
            let g = v.graph();
            g.constant(a.clone()).matmul(v).square().sum()
        });
        check_input_grad(&bt, 1e-6, 1e-6, |v| {
            let g = v.graph();
            g.constant(a.clone()).matmul_nt(v).square().sum()
        });
    }

    #[test]
    fn softmax_rows_sum_to_one_and_grad() {
        let store = ParamStore::new();
        let g = Graph::new(&store);
        let x = g.input(arr(&[4, 6], 6));
        let y = x.softmax_rows(None).value();
        for row in y.data().chunks(6) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let w = arr(&[4, 6], 7);
        check_input_grad(&arr(&[4, 6], 6), 1e-6, 1e-6, |v| {
            (v.softmax_rows(None) * v.graph().constant(w.clone())).sum()
        });
    }

    #[test]
    fn masked_softmax_puts_zero_on_neg_inf_columns() {
        let store = ParamStore::new();
        let g = Graph::new(&store);
        let x = g.input(arr(&[2, 3], 8));
        let mask = std::sync::Arc::new(vec![0.0, f64::NEG_INFINITY, 0.0]);
        let y = x.softmax_rows(Some(mask)).value();
        assert_eq!(y.data()[1], 0.0);
        assert_eq!(y.data()[4], 0.0);
    }

    #[test]
    fn layer_norm_grad() {
        let gamma = arr(&[5], 9);
        let beta = arr(&[5], 10);
        let w = arr(&[3, 5], 11);
        check_input_grad(&arr(&[3, 5], 12), 1e-6, 1e-6, |v| {
            let g = v.graph();
            (v.layer_norm(g.constant(gamma.clone()), g.constant(beta.clone()), 1e-5) * g.constant(w.clone())).sum()
        });
        check_input_grad(&gamma, 1e-6, 1e-6, |v| {
            let g = v.graph();
            (g.constant(arr(&[3, 5], 12)).layer_norm(v, g.constant(beta.clone()), 1e-5) * g.constant(w.clone())).sum()
        });
    }

    #[test]
    fn narrow_concat_reshape_grads() {
        let w = arr(&[2, 7], 13);
        check_input_grad(&arr(&[2, 4], 14), 1e-6, 1e-6, |v| {
            let g = v.graph();
            let a = v.narrow(1, 1, 3);
            let b = v.reshape(&[4, 2]).transpose().narrow(0, 0, 1).reshape(&[2, 2]);
            (crate::Var::concat(&[a, b, v.narrow(1, 0, 2)], 1) * g.constant(w.clone())).sum()
        });
    }

    #[test]
    fn broadcast_grads() {
        let b = arr(&[3], 15);
        let c = arr(&[2], 16);
        let w = arr(&[2, 3], 17);
        check_input_grad(&arr(&[2, 3], 18), 1e-6, 1e-6, |v| {
            let g = v.graph();
            (v.add_last(g.constant(b.clone())).mul_last(g.constant(b.clone())).add_channel(g.constant(c.clone()))
                * g.constant(w.clone()))
            .sum()
        });
        check_input_grad(&b, 1e-6, 1e-6, |v| {
            let g = v.graph();
            (g.constant(w.clone()).add_last(v).mul_last(v).square()).sum()
        });
        check_input_grad(&c, 1e-6, 1e-6, |v| {
            let g = v.graph();
            g.constant(w.clone()).add_channel(v).square().sum()
        });
    }

    #[test]
    fn bce_matches_direct_formula_and_grad() {
        let store = ParamStore::new();
        let g = Graph::new(&store);
        let logits = arr(&[6], 19).map(|v| v * 5.0);
        let target = std::sync::Arc::new(Array::from_vec(&[6], vec![0.0, 1.0, 1.0, 0.0, 0.5, 1.0]));
        let y = g.input(logits.clone()).bce_with_logits(target.clone()).value();
        for i in 0..6 {
            let p = 1.0 / (1.0 + (-logits.data()[i]).exp());
            let t = target.data()[i];
            let want = -(t * p.ln() + (1.0 - t) * (1.0 - p).ln());
            assert!((y.data()[i] - want).abs() < 1e-12);
        }
        check_input_grad(&logits, 1e-6, 1e-6, |v| v.bce_with_logits(target.clone()).sum());
    }

    #[test]
    fn rope_is_norm_preserving_and_grad() {
        let cos = std::sync::Arc::new(arr(&[3, 2], 20).map(|v| (v * 3.0).cos()));
        let sin = std::sync::Arc::new(arr(&[3, 2], 20).map(|v| (v * 3.0).sin()));
        let x = arr(&[3, 4], 21);
        let store = ParamStore::new();
        let g = Graph::new(&store);
        let y = g.input(x.clone()).rope(cos.clone(), sin.clone()).value();
        for r in 0..3 {
            let nx: f64 = x.data()[r * 4..r * 4 + 4].iter().map(|v| v * v).sum();
            let ny: f64 = y.data()[r * 4..r * 4 + 4].iter().map(|v| v * v).sum();
            assert!((nx - ny).abs() < 1e-12);
        }
        let w = arr(&[3, 4], 22);
        check_input_grad(&x, 1e-6, 1e-6, |v| (v.rope(cos.clone(), sin.clone()) * v.graph().constant(w.clone())).sum());
    }

    #[test]
    fn bilinear_resize_constant_and_grad() {
        let store = ParamStore::new();
        let g = Graph::new(&store);
        let y = g.input(Array::full(&[2, 3, 3], 1.5)).resize_bilinear(7, 5).value();
        assert!(y.data().iter().all(|v| (v - 1.5).abs() < 1e-12));
        let w = arr(&[2, 8, 6], 23);
        check_input_grad(&arr(&[2, 2, 3], 24), 1e-6, 1e-6, |v| {
            (v.resize_bilinear(8, 6) * v.graph().constant(w.clone())).sum()
        });
    }
}
