//! Hierarchical convolutional image encoder.

use rand::Rng;
use vidseg_autograd::nn::Conv2d;
use vidseg_autograd::{ParamStore, Var};

use super::config::{ModelConfig, STAGES, STRIDES};
use crate::{Error, Result};

/// `relu(x + conv(relu(conv(x))))` at constant width.
#[derive(Clone, Debug)]
pub(crate) struct ResidualBlock {
    conv1: Conv2d,
    conv2: Conv2d,
}

impl ResidualBlock {
    pub(crate) fn new(store: &mut ParamStore, prefix: &str, c: usize, rng: &mut impl Rng) -> Self {
        Self {
            conv1: Conv2d::new(store, &format!("{prefix}.conv1"), c, c, 3, 1, 1, rng),
            conv2: Conv2d::new(store, &format!("{prefix}.conv2"), c, c, 3, 1, 1, rng),
        }
    }

    pub(crate) fn forward<'g>(&self, x: Var<'g>) -> Var<'g> {
        (x + self.conv2.forward(self.conv1.forward(x).relu())).relu()
    }
}

#[derive(Clone, Debug)]
struct Stage {
    down: Option<Conv2d>,
    blocks: [ResidualBlock; 2],
}

/// Stride-4 stem followed by four stages of two residual blocks; stages
/// two to four open with a stride-2 convolution.
#[derive(Clone, Debug)]
pub struct Encoder {
    stem: Conv2d,
    stages: Vec<Stage>,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, in_channels: usize, rng: &mut impl Rng) -> Self {
        let ch = cfg.channels;
        let stem = Conv2d::new(store, "encoder.stage1.stem", in_channels, ch[0], 4, 4, 0, rng);
        let stages = (0..STAGES)
            .map(|l| {
                let p = format!("encoder.stage{}", l + 1);
                let down = (l > 0).then(|| Conv2d::new(store, &format!("{p}.down"), ch[l - 1], ch[l], 3, 2, 1, rng));
                let blocks = [
                    ResidualBlock::new(store, &format!("{p}.block1"), ch[l], rng),
                    ResidualBlock::new(store, &format!("{p}.block2"), ch[l], rng),
                ];
                Stage { down, blocks }
            })
            .collect();
        Self { stem, stages }
    }

    /// Pyramid `S_1..S_4` for one `[c, h, w]` frame.
    pub fn forward<'g>(&self, frame: Var<'g>) -> Result<Vec<Var<'g>>> {
        let shape = frame.shape();
        check_frame_shape(&shape)?;
        let mut x = self.stem.forward(frame).relu();
        let mut out = Vec::with_capacity(STAGES);
        for stage in &self.stages {
            if let Some(down) = &stage.down {
                x = down.forward(x).relu();
            }
            for b in &stage.blocks {
                x = b.forward(x);
            }
            out.push(x);
        }
        Ok(out)
    }
}

pub(crate) fn check_frame_shape(shape: &[usize]) -> Result<()> {
    let stride = STRIDES[STAGES - 1];
    if shape.len() != 3 || shape[1] == 0 || !shape[1].is_multiple_of(stride) || !shape[2].is_multiple_of(stride) {
        return Err(Error::Shape(format!(
            "frame of shape {shape:?} is not [c, h, w] with h and w divisible by {stride}"
        )));
    }
    Ok(())
}
