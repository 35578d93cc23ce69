use std::collections::BTreeMap;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vidseg_autograd::{Array, Graph, Var};

use super::{FrameFeatures, MemoryBank, MemoryEntry, Model, SegmentationOutput, SelectionMode};
use crate::data::VideoClip;
use crate::{Mask, Prompt, Result};

/// Inference-time state for one object in one clip: cached frame features
/// and the memory entry committed for every segmented frame. Selection is
/// always deterministic (top-k).
#[derive(Clone, Debug)]
pub struct Tracker {
    model: Arc<Model>,
    clip: VideoClip,
    features: Vec<Option<FrameFeatures<Array>>>,
    entries: BTreeMap<usize, MemoryEntry>,
}

impl Tracker {
    pub fn new(model: Arc<Model>, clip: VideoClip) -> Self {
        let n = clip.num_frames();
        Self {
            model,
            clip,
            features: vec![None; n],
            entries: BTreeMap::new(),
        }
    }

    pub fn clip(&self) -> &VideoClip {
        &self.clip
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    /// Forgets all memory; cached frame features are kept.
    pub fn reset(&mut self) {
        self.entries.clear();
    }

    pub fn entries(&self) -> &BTreeMap<usize, MemoryEntry> {
        &self.entries
    }

    fn features(&mut self, t: usize) -> Result<FrameFeatures<Array>> {
        if let Some(Some(f)) = self.features.get(t) {
            return Ok(f.clone());
        }
        let g = Graph::inference(&self.model.store);
        let f = self.model.frame_features(&g, &self.clip, t)?.map(|v| (*v.value()).clone());
        self.features[t] = Some(f.clone());
        Ok(f)
    }

    /// Segments frame `t` from the memory of frames before it and the given
    /// prompts for `t`, then stores frame `t`'s memory entry.
    pub fn segment_frame(&mut self, t: usize, prompts: &[Prompt]) -> Result<SegmentationOutput> {
        let (h, w) = (self.clip.height(), self.clip.width());
        for p in prompts {
            p.validate(h, w)?;
        }
        let feats = self.features(t)?;
        let model = Arc::clone(&self.model);
        let g = Graph::inference(&model.store);
        let frame = feats.map(|a| g.constant(a.clone()));
        let mut bank: MemoryBank<Var> = MemoryBank::new(model.config.p_cap);
        for e in self.entries.range(..t).map(|(_, e)| e) {
            bank.insert(e.map(|a| g.constant(a.clone())));
        }
        let mut selection = model.config.selection;
        selection.mode = SelectionMode::TopK;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cond = model.condition(&g, &frame, &bank, t, &selection, &mut rng)?;
        let out = model.decode(&g, &cond, prompts, (h, w))?.to_output();
        let mask = out.finalize(model.config.mask_threshold);
        let entry = model.encode_memory(frame.last, &mask, t, !prompts.is_empty())?;
        self.entries.insert(t, entry.map(|v| (*v.value()).clone()));
        Ok(out)
    }

    /// Like [`Tracker::segment_frame`] but returns the thresholded mask.
    pub fn segment_mask(&mut self, t: usize, prompts: &[Prompt]) -> Result<Mask> {
        let threshold = self.model.config.mask_threshold;
        Ok(self.segment_frame(t, prompts)?.finalize(threshold))
    }

    /// Segments frames `from..n` in order, each with its prompts from
    /// `history`.
    pub fn propagate(&mut self, from: usize, history: &BTreeMap<usize, Vec<Prompt>>) -> Result<Vec<Mask>> {
        (from..self.clip.num_frames())
            .map(|t| {
                let prompts = history.get(&t).map(Vec::as_slice).unwrap_or(&[]);
                self.segment_mask(t, prompts)
            })
            .collect()
    }
}
