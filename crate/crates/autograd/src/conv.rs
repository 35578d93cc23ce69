//! Convolutions via im2col + GEMM.
//!
//! Layouts: 2-D feature maps are `[c, h, w]`, spatiotemporal maps are
//! `[c, t, h, w]`. Weights are `[c_out, c_in, (kt,) kh, kw]`. Biases are added
//! by the caller through [`Var::add_channel`].

use crate::linalg::gemm;
use crate::{Array, Var};

#[derive(Clone, Copy, Debug)]
struct Geometry {
    ci: usize,
    t: usize,
    h: usize,
    w: usize,
    kt: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    tpad: usize,
    to: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn new(x: &[usize], k: &[usize], stride: usize, pad: usize, tpad: usize) -> Self {
        let (ci, t, h, w) = (x[0], x[1], x[2], x[3]);
        let (kt, kh, kw) = (k[0], k[1], k[2]);
        assert!(stride >= 1, "conv stride must be positive");
        assert!(t + 2 * tpad >= kt, "temporal extent {t} too short for kernel {kt}");
        assert!(h + 2 * pad >= kh && w + 2 * pad >= kw, "spatial extent too small for kernel");
        Self {
            ci,
            t,
            h,
            w,
            kt,
            kh,
            kw,
            stride,
            pad,
            tpad,
            to: t + 2 * tpad - kt + 1,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (w + 2 * pad - kw) / stride + 1,
        }
    }

    fn rows(&self) -> usize {
        self.ci * self.kt * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.to * self.ho * self.wo
    }

    /// Visits every (column-matrix index, source index) pair with an
    /// in-bounds source. Temporal padding replicates edge frames; spatial
    /// padding is zero.
    fn for_each(&self, mut f: impl FnMut(usize, usize)) {
        let g = *self;
        let ncols = g.cols();
        for c in 0..g.ci {
            for dt in 0..g.kt {
                for ki in 0..g.kh {
                    for kj in 0..g.kw {
                        let row = ((c * g.kt + dt) * g.kh + ki) * g.kw + kj;
                        for ot in 0..g.to {
                            let st = (ot + dt).saturating_sub(g.tpad).min(g.t - 1);
                            let src_plane = (c * g.t + st) * g.h * g.w;
                            for oy in 0..g.ho {
                                let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                                if iy < 0 || iy >= g.h as isize {
                                    continue;
                                }
                                let src_row = src_plane + iy as usize * g.w;
                                let dst_row = row * ncols + (ot * g.ho + oy) * g.wo;
                                for ox in 0..g.wo {
                                    let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                                    if ix < 0 || ix >= g.w as isize {
                                        continue;
                                    }
                                    f(dst_row + ox, src_row + ix as usize);
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let mut cols = vec![0.0; self.rows() * self.cols()];
        self.for_each(|d, s| cols[d] = x[s]);
        cols
    }

    fn col2im(&self, cols: &[f64]) -> Vec<f64> {
        let mut x = vec![0.0; self.ci * self.t * self.h * self.w];
        self.for_each(|d, s| x[s] += cols[d]);
        x
    }
}

fn conv_core<'g>(x: Var<'g>, w: Var<'g>, k: [usize; 3], stride: usize, pad: usize, tpad: usize, out_rank4: bool) -> Var<'g> {
    let xv = x.value();
    let wv = w.value();
    let xs = xv.shape();
    let shape4 = if xs.len() == 3 { vec![xs[0], 1, xs[1], xs[2]] } else { xs.to_vec() };
    let geo = Geometry::new(&shape4, &k, stride, pad, tpad);
    let co = wv.shape()[0];
    assert_eq!(
        wv.len(),
        co * geo.rows(),
        "conv weight {:?} does not match input channels {}",
        wv.shape(),
        geo.ci
    );
    let cols = geo.im2col(xv.data());
    let mut y = vec![0.0; co * geo.cols()];
    gemm(co, geo.rows(), geo.cols(), 1.0, wv.data(), false, &cols, false, 0.0, &mut y);
    let out_shape = if out_rank4 {
        vec![co, geo.to, geo.ho, geo.wo]
    } else {
        vec![co, geo.ho, geo.wo]
    };
    let (ix, iw) = (x.id, w.id);
    let x_shape = xs.to_vec();
    let w_shape = wv.shape().to_vec();
    x.graph.push(Array::from_vec(&out_shape, y), &[ix, iw], move |g, sink| {
        let (m, kk, n) = (co, geo.rows(), geo.cols());
        sink.add_with(iw, || {
            let mut dw = vec![0.0; m * kk];
            gemm(m, n, kk, 1.0, g.data(), false, &cols, true, 0.0, &mut dw);
            Array::from_vec(&w_shape, dw)
        });
        sink.add_with(ix, || {
            let mut dcols = vec![0.0; kk * n];
            gemm(kk, m, n, 1.0, wv.data(), true, g.data(), false, 0.0, &mut dcols);
            Array::from_vec(&x_shape, geo.col2im(&dcols))
        });
    })
}

impl<'g> Var<'g> {
    /// 2-D convolution of `[c_in, h, w]` with `[c_out, c_in, kh, kw]`, zero
    /// padding.
    pub fn conv2d(self, weight: Var<'g>, stride: usize, pad: usize) -> Var<'g> {
        let xs = self.shape();
        let ws = weight.shape();
        assert_eq!(xs.len(), 3, "conv2d expects [c, h, w], got {xs:?}");
        assert_eq!(ws.len(), 4, "conv2d weight must be rank 4, got {ws:?}");
        assert_eq!(ws[1], xs[0], "conv2d channel mismatch: weight {ws:?}, input {xs:?}");
        conv_core(self, weight, [1, ws[2], ws[3]], stride, pad, 0, false)
    }

    /// 3-D convolution of `[c_in, t, h, w]` with `[c_out, c_in, kt, kh, kw]`.
    /// Temporal stride is 1; `tpad` edge frames are replicated on both ends
    /// of the time axis, spatial padding is zero.
    pub fn conv3d(self, weight: Var<'g>, stride: usize, pad: usize, tpad: usize) -> Var<'g> {
        let xs = self.shape();
        let ws = weight.shape();
        assert_eq!(xs.len(), 4, "conv3d expects [c, t, h, w], got {xs:?}");
        assert_eq!(ws.len(), 5, "conv3d weight must be rank 5, got {ws:?}");
        assert_eq!(ws[1], xs[0], "conv3d channel mismatch: weight {ws:?}, input {xs:?}");
        conv_core(self, weight, [ws[2], ws[3], ws[4]], stride, pad, tpad, true)
    }

    /// Transposed convolution whose kernel equals its stride (non-overlapping
    /// upsampling) of `[c_in, h, w]` with `[c_in, c_out, s, s]`.
    pub fn conv_transpose2d(self, weight: Var<'g>) -> Var<'g> {
        let xv = self.value();
        let wv = weight.value();
        assert_eq!(xv.ndim(), 3, "conv_transpose2d expects [c, h, w]");
        let (ci, h, w) = (xv.dim(0), xv.dim(1), xv.dim(2));
        let ws = wv.shape().to_vec();
        assert!(ws.len() == 4 && ws[0] == ci && ws[2] == ws[3], "conv_transpose2d weight {ws:?}");
        let (co, s) = (ws[1], ws[2]);
        let rows = co * s * s;
        // z[(co, a, b), (i, j)] = sum_ci w[ci, (co, a, b)] x[ci, (i, j)]
        let mut z = vec![0.0; rows * h * w];
        gemm(rows, ci, h * w, 1.0, wv.data(), true, xv.data(), false, 0.0, &mut z);
        let (oh, ow) = (h * s, w * s);
        let scatter_index = move |r: usize, p: usize| -> usize {
            let (c, a, b) = (r / (s * s), (r / s) % s, r % s);
            let (i, j) = (p / w, p % w);
            (c * oh + i * s + a) * ow + j * s + b
        };
        let mut y = vec![0.0; co * oh * ow];
        for r in 0..rows {
            for p in 0..h * w {
                y[scatter_index(r, p)] = z[r * h * w + p];
            }
        }
        let (ix, iw) = (self.id, weight.id);
        self.graph.push(Array::from_vec(&[co, oh, ow], y), &[ix, iw], move |g, sink| {
            let mut dz = vec![0.0; rows * h * w];
            for r in 0..rows {
                for p in 0..h * w {
                    dz[r * h * w + p] = g.data()[scatter_index(r, p)];
                }
            }
            sink.add_with(iw, || {
                let mut dw = vec![0.0; ci * rows];
                gemm(ci, h * w, rows, 1.0, xv.data(), false, &dz, true, 0.0, &mut dw);
                Array::from_vec(&ws, dw)
            });
            sink.add_with(ix, || {
                let mut dx = vec![0.0; ci * h * w];
                gemm(ci, rows, h * w, 1.0, wv.data(), false, &dz, false, 0.0, &mut dx);
                Array::from_vec(&[ci, h, w], dx)
            });
        })
    }
}

#[cfg(test)]
mod tests {
    use crate::gradcheck::check_input_grad;
    use crate::{Array, Graph, ParamStore};

    fn arr(shape: &[usize], seed: u64) -> Array {
        let mut s = seed.wrapping_mul(0x2545_F491_4F6C_DD1D) | 1;
        Array::from_fn(shape, |_| {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            (s % 10_000) as f64 / 5_000.0 - 1.0
        })
    }

    /// Direct nested-loop 2-D convolution.
    fn conv2d_naive(x: &Array, w: &Array, stride: usize, pad: usize) -> Array {
        let (ci, h, wd) = (x.dim(0), x.dim(1), x.dim(2));
        let (co, kh, kw) = (w.dim(0), w.dim(2), w.dim(3));
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        Array::from_fn(&[co, ho, wo], |idx| {
            let (o, oy, ox) = (idx / (ho * wo), (idx / wo) % ho, idx % wo);
            let mut acc = 0.0;
            for c in 0..ci {
                for i in 0..kh {
                    for j in 0..kw {
                        let y = (oy * stride + i) as isize - pad as isize;
                        let xx = (ox * stride + j) as isize - pad as isize;
                        if y >= 0 && xx >= 0 && (y as usize) < h && (xx as usize) < wd {
                            acc += w.data()[((o * ci + c) * kh + i) * kw + j] * x.data()[(c * h + y as usize) * wd + xx as usize];
                        }
                    }
                }
            }
            acc
        })
    }

    /// Direct 3-D convolution with replicate temporal padding.
    fn conv3d_naive(x: &Array, w: &Array, stride: usize, pad: usize, tpad: usize) -> Array {
        let (ci, t, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let (co, kt, kh, kw) = (w.dim(0), w.dim(2), w.dim(3), w.dim(4));
        let to = t + 2 * tpad - kt + 1;
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        Array::from_fn(&[co, to, ho, wo], |idx| {
            let o = idx / (to * ho * wo);
            let ot = (idx / (ho * wo)) % to;
            let (oy, ox) = ((idx / wo) % ho, idx % wo);
            let mut acc = 0.0;
            for c in 0..ci {
                for dt in 0..kt {
                    let st = (ot as isize + dt as isize - tpad as isize).clamp(0, t as isize - 1) as usize;
                    for i in 0..kh {
                        for j in 0..kw {
                            let y = (oy * stride + i) as isize - pad as isize;
                            let xx = (ox * stride + j) as isize - pad as isize;
                            if y >= 0 && xx >= 0 && (y as usize) < h && (xx as usize) < wd {
                                let wi = (((o * ci + c) * kt + dt) * kh + i) * kw + j;
                                let xi = ((c * t + st) * h + y as usize) * wd + xx as usize;
                                acc += w.data()[wi] * x.data()[xi];
                            }
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn conv2d_matches_naive() {
        let store = ParamStore::new();
        for (stride, pad, k) in [(1, 1, 3), (2, 1, 3), (4, 0, 4), (1, 0, 1)] {
            let g = Graph::new(&store);
            let x = arr(&[3, 9, 8], 1);
            let w = arr(&[5, 3, k, k], 2);
            let y = g.constant(x.clone()).conv2d(g.constant(w.clone()), stride, pad).value();
            let want = conv2d_naive(&x, &w, stride, pad);
            assert_eq!(y.shape(), want.shape());
            assert!(y.max_abs_diff(&want) < 1e-12);
        }
    }

    #[test]
    fn conv3d_matches_naive_with_replicate_time_padding() {
        let store = ParamStore::new();
        for (stride, pad, t) in [(1, 1, 4), (2, 1, 3), (1, 1, 1)] {
            let g = Graph::new(&store);
            let x = arr(&[2, t, 6, 6], 3);
            let w = arr(&[3, 2, 3, 3, 3], 4);
            let y = g.constant(x.clone()).conv3d(g.constant(w.clone()), stride, pad, 1).value();
            let want = conv3d_naive(&x, &w, stride, pad, 1);
            assert_eq!(y.shape(), want.shape());
            assert!(y.max_abs_diff(&want) < 1e-12);
        }
    }

    #[test]
    fn conv_grads() {
        let w2 = arr(&[4, 2, 3, 3], 5);
        check_input_grad(&arr(&[2, 6, 5], 6), 1e-6, 1e-6, |v| {
            v.conv2d(v.graph().constant(w2.clone()), 2, 1).square().sum()
        });
        let x2 = arr(&[2, 6, 5], 6);
        check_input_grad(&w2, 1e-6, 1e-6, |v| v.graph().constant(x2.clone()).conv2d(v, 1, 1).square().sum());

        let w3 = arr(&[2, 2, 3, 3, 3], 7);
        check_input_grad(&arr(&[2, 3, 4, 4], 8), 1e-6, 1e-6, |v| {
            v.conv3d(v.graph().constant(w3.clone()), 1, 1, 1).square().sum()
        });
        let x3 = arr(&[2, 3, 4, 4], 8);
        check_input_grad(&w3, 1e-6, 1e-6, |v| v.graph().constant(x3.clone()).conv3d(v, 2, 1, 1).square().sum());
    }

    #[test]
    fn transposed_conv_places_kernel_blocks_and_grads() {
        let store = ParamStore::new();
        let g = Graph::new(&store);
        // single input pixel, one channel: output is the kernel itself
        let w = Array::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let y = g
            .constant(Array::from_vec(&[1, 1, 1], vec![2.0]))
            .conv_transpose2d(g.constant(w))
            .value();
        assert_eq!(y.data(), &[2.0, 4.0, 6.0, 8.0]);

        let wt = arr(&[3, 2, 2, 2], 9);
        let wgt = arr(&[2, 4, 6], 10);
        check_input_grad(&arr(&[3, 2, 3], 11), 1e-6, 1e-6, |v| {
            (v.conv_transpose2d(v.graph().constant(wt.clone())) * v.graph().constant(wgt.clone())).sum()
        });
        let xt = arr(&[3, 2, 3], 11);
        check_input_grad(&wt, 1e-6, 1e-6, |v| {
            (v.graph().constant(xt.clone()).conv_transpose2d(v) * v.graph().constant(wgt.clone())).sum()
        });
    }
}
