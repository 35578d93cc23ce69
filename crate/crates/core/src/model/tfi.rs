//! Temporal feature integrator: a 3D-conv temporal branch over the recent
//! frame window and an integration branch that merges it into the spatial
//! pyramid of the current frame.
//!
//! Temporal tensors are laid out `[c, t, h, w]`; the last time slice is the
//! current frame.

use rand::Rng;
use vidseg_autograd::nn::{Conv2d, Conv3d};
use vidseg_autograd::{ParamStore, Var};

use super::config::{ModelConfig, STAGES};
use crate::{Error, Result};

/// Three residual 3D convolutions `T <- T + C3d(T)`.
#[derive(Clone, Debug)]
pub struct TemporalBlock {
    pub convs: [Conv3d; 3],
}

impl TemporalBlock {
    fn new(store: &mut ParamStore, prefix: &str, c: usize, rng: &mut impl Rng) -> Self {
        let conv = |store: &mut ParamStore, i: usize, rng: &mut _| {
            Conv3d::new(store, &format!("{prefix}.conv{i}"), c, c, [3, 3, 3], 1, 1, rng)
        };
        Self {
            convs: [conv(store, 1, rng), conv(store, 2, rng), conv(store, 3, rng)],
        }
    }

    /// All iterates `T^(0)..T^(3)`; the last is the block output.
    pub fn iterates<'g>(&self, t: Var<'g>) -> Vec<Var<'g>> {
        let mut out = vec![t];
        for c in &self.convs {
            let prev = *out.last().unwrap();
            out.push(prev + c.forward(prev));
        }
        out
    }

    pub fn forward<'g>(&self, t: Var<'g>) -> Var<'g> {
        *self.iterates(t).last().unwrap()
    }
}

fn last_slice<'g>(t: Var<'g>) -> Var<'g> {
    let s = t.shape();
    t.narrow(1, s[1] - 1, 1).reshape(&[s[0], s[2], s[3]])
}

fn check_pair(i: &[usize], t: &[usize]) -> Result<()> {
    if i.len() != 3 || t.len() != 4 || i[0] != t[0] || i[1] != t[2] || i[2] != t[3] {
        return Err(Error::Shape(format!(
            "spatial features {i:?} do not match temporal slices of {t:?}"
        )));
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct TfiStage {
    /// 3D stem (stage 1) or stride-2 3D downsampling (later stages).
    pub entry: Conv3d,
    pub block: TemporalBlock,
    /// Stride-2 transition applied to `I_{l-1}`; absent for stage 1.
    pub trans: Option<Conv2d>,
    pub ts: Conv2d,
    pub c2d: Conv2d,
    pub st: Conv2d,
}

impl TfiStage {
    /// `[last(T') ; I']` mixed by a 1x1 conv into the last slice of `T'`.
    pub fn spatial_to_temporal<'g>(&self, i_prime: Var<'g>, t_prime: Var<'g>) -> Result<Var<'g>> {
        let ts = t_prime.shape();
        check_pair(&i_prime.shape(), &ts)?;
        let (c, n, h, w) = (ts[0], ts[1], ts[2], ts[3]);
        let fused = self
            .st
            .forward(Var::concat(&[last_slice(t_prime), i_prime], 0))
            .reshape(&[c, 1, h, w]);
        if n == 1 {
            return Ok(fused);
        }
        Ok(Var::concat(&[t_prime.narrow(1, 0, n - 1), fused], 1))
    }

    /// `[I' ; last(T')]` mixed by a 1x1 conv back to stage width.
    pub fn temporal_to_spatial<'g>(&self, i_prime: Var<'g>, t_prime: Var<'g>) -> Result<Var<'g>> {
        check_pair(&i_prime.shape(), &t_prime.shape())?;
        Ok(self.ts.forward(Var::concat(&[i_prime, last_slice(t_prime)], 0)))
    }
}

#[derive(Clone, Debug)]
pub struct Tfi {
    pub stages: Vec<TfiStage>,
    window: usize,
}

/// Per-stage integrated features `I_l` with their intermediates `I'_l`.
#[derive(Clone, Debug)]
pub struct Integrated<'g> {
    pub i: Vec<Var<'g>>,
    pub i_prime: Vec<Var<'g>>,
}

impl<'g> Integrated<'g> {
    /// Final-stage output `I_t`.
    pub fn last(&self) -> Var<'g> {
        *self.i.last().unwrap()
    }
}

impl Tfi {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, in_channels: usize, rng: &mut impl Rng) -> Self {
        let ch = cfg.channels;
        let stages = (0..STAGES)
            .map(|l| {
                let p = format!("tfi.stage{}", l + 1);
                let c = ch[l];
                let entry = if l == 0 {
                    Conv3d::new(store, &format!("{p}.stem"), in_channels, c, [3, 4, 4], 4, 0, rng)
                } else {
                    Conv3d::new(store, &format!("{p}.down"), ch[l - 1], c, [3, 3, 3], 2, 1, rng)
                };
                TfiStage {
                    entry,
                    block: TemporalBlock::new(store, &format!("{p}.block"), c, rng),
                    trans: (l > 0).then(|| Conv2d::new(store, &format!("{p}.trans"), ch[l - 1], c, 3, 2, 1, rng)),
                    ts: Conv2d::new(store, &format!("{p}.ts"), 2 * c, c, 1, 1, 0, rng),
                    c2d: Conv2d::new(store, &format!("{p}.c2d"), c, c, 3, 1, 1, rng),
                    st: Conv2d::new(store, &format!("{p}.st"), 2 * c, c, 1, 1, 0, rng),
                }
            })
            .collect();
        Self {
            stages,
            window: cfg.window,
        }
    }

    /// `window` is `[c, w_t, h, w]` ending at the current frame; `pyramid`
    /// holds that frame's spatial stages.
    pub fn forward<'g>(&self, window: Var<'g>, pyramid: &[Var<'g>]) -> Result<Integrated<'g>> {
        let ws = window.shape();
        if ws.len() != 4 || ws[1] == 0 || ws[1] > self.window {
            return Err(Error::Shape(format!(
                "frame window {ws:?} must be [c, t, h, w] with 1 <= t <= {}",
                self.window
            )));
        }
        if pyramid.len() != STAGES {
            return Err(Error::Shape(format!("expected {STAGES} pyramid stages, got {}", pyramid.len())));
        }
        let mut t = window;
        let mut prev_i: Option<Var<'g>> = None;
        let mut out = Integrated {
            i: Vec::with_capacity(STAGES),
            i_prime: Vec::with_capacity(STAGES),
        };
        for (stage, &s) in self.stages.iter().zip(pyramid) {
            let t_prime = stage.block.forward(stage.entry.forward(t).relu());
            let i_prime = match (&stage.trans, prev_i) {
                (Some(trans), Some(prev)) => trans.forward(prev) + s,
                _ => s,
            };
            let i = stage.c2d.forward(stage.temporal_to_spatial(i_prime, t_prime)?);
            t = stage.spatial_to_temporal(i_prime, t_prime)?;
            out.i.push(i);
            out.i_prime.push(i_prime);
            prev_i = Some(i);
        }
        Ok(out)
    }
}
