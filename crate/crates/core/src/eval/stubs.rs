//! Model stand-ins with known behaviour, for exercising the protocols.

use super::Segmenter;
use crate::{Mask, Prompt, Result};

/// Always returns the ground truth.
#[derive(Clone, Debug)]
pub struct PerfectSegmenter {
    pub gt: Vec<Mask>,
}

impl Segmenter for PerfectSegmenter {
    fn reset(&mut self) {}

    fn segment_frame(&mut self, t: usize, _: &[Prompt]) -> Result<Mask> {
        Ok(self.gt[t].clone())
    }
}

/// Always returns an empty mask.
#[derive(Clone, Debug)]
pub struct EmptySegmenter {
    pub height: usize,
    pub width: usize,
}

impl Segmenter for EmptySegmenter {
    fn reset(&mut self) {}

    fn segment_frame(&mut self, _: usize, _: &[Prompt]) -> Result<Mask> {
        Ok(Mask::new(self.height, self.width))
    }
}

/// Returns the ground truth on any frame that carries prompts and a fixed
/// scripted mask elsewhere. Records every call.
#[derive(Clone, Debug)]
pub struct ScriptedSegmenter {
    pub gt: Vec<Mask>,
    pub unprompted: Vec<Mask>,
    pub calls: Vec<(usize, usize)>,
    pub resets: usize,
}

impl ScriptedSegmenter {
    pub fn new(gt: Vec<Mask>, unprompted: Vec<Mask>) -> Self {
        Self {
            gt,
            unprompted,
            calls: Vec::new(),
            resets: 0,
        }
    }
}

impl Segmenter for ScriptedSegmenter {
    fn reset(&mut self) {
        self.resets += 1;
    }

    fn segment_frame(&mut self, t: usize, prompts: &[Prompt]) -> Result<Mask> {
        self.calls.push((t, prompts.len()));
        Ok(if prompts.is_empty() { self.unprompted[t].clone() } else { self.gt[t].clone() })
    }
}
