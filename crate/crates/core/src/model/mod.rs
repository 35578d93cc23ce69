//! Network components and the assembled segmentation model.

pub mod config;
pub mod decoder;
pub mod encoder;
pub mod memory;
pub mod mpg;
pub mod prompt_encoder;
pub mod tfi;
mod tracker;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vidseg_autograd::{Graph, ParamStore, Var};

pub use config::{ModelConfig, SelectionConfig, SelectionMode, STAGES, STRIDES};
pub use decoder::{DecoderOutput, SegmentationOutput, NUM_MASKS};
pub use memory::{MemoryBank, MemoryEntry, SimilarityResult};
pub use tracker::Tracker;

use self::decoder::MaskDecoder;
use self::encoder::Encoder;
use self::memory::{select_memories, similarity_target, temporal_slot, MemoryAttention, MemoryEncoder};
use self::mpg::{MemoryContext, MemoryPromptGenerator};
use self::prompt_encoder::PromptEncoder;
use self::tfi::Tfi;
use crate::data::VideoClip;
use crate::{Error, Mask, Prompt, Result};

pub const IMAGE_CHANNELS: usize = 3;

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// All sub-networks; parameters live in the owning [`Model`]'s store.
#[derive(Clone, Debug)]
pub struct Network {
    pub encoder: Encoder,
    pub tfi: Tfi,
    pub memory_encoder: MemoryEncoder,
    pub memory_attention: MemoryAttention,
    pub mpg: Option<MemoryPromptGenerator>,
    pub prompt_encoder: PromptEncoder,
    pub decoder: MaskDecoder,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub net: Network,
}

/// Integrated features of one frame: the final stage plus the earlier
/// stages when the decoder uses them.
#[derive(Clone, Debug)]
pub struct FrameFeatures<F> {
    pub last: F,
    pub high_res: Vec<F>,
}

impl<F> FrameFeatures<F> {
    pub fn map<G>(&self, f: impl Fn(&F) -> G) -> FrameFeatures<G> {
        FrameFeatures {
            last: f(&self.last),
            high_res: self.high_res.iter().map(f).collect(),
        }
    }
}

/// Current-frame features after memory conditioning, plus the memory
/// prompt tokens, ready for decoding with any prompt set.
#[derive(Clone, Debug)]
pub struct Conditioned<'g> {
    pub features: Var<'g>,
    pub memory_prompts: Option<Var<'g>>,
    pub high_res: Vec<Var<'g>>,
    pub selection: SimilarityResult,
}

impl<F: Clone> MemoryEntry<F> {
    pub fn map<G>(&self, f: impl FnOnce(&F) -> G) -> MemoryEntry<G> {
        MemoryEntry {
            features: f(&self.features),
            mask_lowres: self.mask_lowres.clone(),
            frame_index: self.frame_index,
            is_prompt_frame: self.is_prompt_frame,
        }
    }
}

impl Model {
    /// Freshly initialised model; initialisation is a pure function of the
    /// configuration (including `init_seed`).
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut store = ParamStore::new();
        let net = Network {
            encoder: Encoder::new(&mut store, &config, IMAGE_CHANNELS, &mut rng),
            tfi: Tfi::new(&mut store, &config, IMAGE_CHANNELS, &mut rng),
            memory_encoder: MemoryEncoder::new(&mut store, &config, &mut rng),
            memory_attention: MemoryAttention::new(&mut store, &config, &mut rng),
            mpg: MemoryPromptGenerator::new(&mut store, &config, &mut rng),
            prompt_encoder: PromptEncoder::new(&mut store, &config, &mut rng),
            decoder: MaskDecoder::new(&mut store, &config, &mut rng),
        };
        Ok(Self { config, store, net })
    }

    /// Integrated features of frame `t`; `last` is `I_t`.
    pub fn frame_features<'g>(&self, g: &'g Graph<'g>, clip: &VideoClip, t: usize) -> Result<FrameFeatures<Var<'g>>> {
        if t >= clip.num_frames() {
            return Err(Error::Validation(format!("frame {t} outside a {}-frame clip", clip.num_frames())));
        }
        if clip.channels() != IMAGE_CHANNELS {
            return Err(Error::Shape(format!("clip has {} channels, expected {IMAGE_CHANNELS}", clip.channels())));
        }
        let frame = g.constant(clip.frame(t));
        let window = g.constant(clip.window(t, self.config.window));
        let pyramid = self.net.encoder.forward(frame)?;
        let integrated = self.net.tfi.forward(window, &pyramid)?;
        let high_res = if self.config.high_res_features {
            integrated.i[..STAGES - 1].to_vec()
        } else {
            Vec::new()
        };
        Ok(FrameFeatures {
            last: integrated.last(),
            high_res,
        })
    }

    /// Selects memories from `bank`, attends to them and produces memory
    /// prompt tokens for frame `t`.
    pub fn condition<'g>(
        &self,
        g: &'g Graph<'g>,
        frame: &FrameFeatures<Var<'g>>,
        bank: &MemoryBank<Var<'g>>,
        t: usize,
        selection: &SelectionConfig,
        rng: &mut impl Rng,
    ) -> Result<Conditioned<'g>> {
        let i_t = frame.last;
        let target = similarity_target(&i_t.value(), self.config.c_mem);
        let sel = select_memories(bank, &target, selection, rng);
        let gathered = bank.gather(&sel);
        let slotted: Vec<(&MemoryEntry<Var<'g>>, usize)> = gathered
            .iter()
            .enumerate()
            .map(|(k, e)| (*e, temporal_slot(e, k == 0 && sel.includes_prompt, t, self.config.p_cap)))
            .collect();
        let features = self.net.memory_attention.forward(i_t, &slotted);
        let memory_prompts = match &self.net.mpg {
            Some(mpg) => {
                let ctx = MemoryContext::from_entries(&gathered);
                Some(mpg.forward(g, ctx.as_ref())?)
            }
            None => None,
        };
        Ok(Conditioned {
            features,
            memory_prompts,
            high_res: frame.high_res.clone(),
            selection: sel,
        })
    }

    pub fn decode<'g>(&self, g: &'g Graph<'g>, cond: &Conditioned<'g>, prompts: &[Prompt], frame_size: (usize, usize)) -> Result<DecoderOutput<'g>> {
        let s = cond.features.shape();
        let encoded = self.net.prompt_encoder.forward(g, prompts, frame_size, (s[1], s[2]))?;
        Ok(self
            .net
            .decoder
            .forward(g, cond.features, &encoded, cond.memory_prompts, &cond.high_res, frame_size))
    }

    pub fn encode_memory<'g>(&self, i_t: Var<'g>, mask: &Mask, t: usize, is_prompt_frame: bool) -> Result<MemoryEntry<Var<'g>>> {
        self.net.memory_encoder.forward(i_t, mask, t, is_prompt_frame)
    }

    /// Copies parameter values from another store with identical layout.
    pub fn load_params(&mut self, other: &ParamStore) -> Result<()> {
        if other.len() != self.store.len() {
            return Err(Error::Checkpoint(format!(
                "parameter count {} does not match the model's {}",
                other.len(),
                self.store.len()
            )));
        }
        for (_, name, value) in other.iter() {
            let mine = self
                .store
                .find(name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
            if self.store.get(mine).shape() != value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    value.shape(),
                    self.store.get(mine).shape()
                )));
            }
            self.store.set(mine, value.clone());
        }
        Ok(())
    }

    /// Flattened parameter values in store order; handy for equality checks.
    pub fn flat_params(&self) -> Vec<f64> {
        self.store.iter().flat_map(|(_, _, a)| a.data().to_vec()).collect()
    }
}
