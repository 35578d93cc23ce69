//! Interactive training simulation.

pub mod loss;

use std::collections::HashMap;
use std::f64::consts::PI;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use vidseg_autograd::optim::{sgd_step, AdamW};
use vidseg_autograd::{Array, Graph, ParamId, ParamStore, Var};

use self::loss::{frame_loss, LossBundle};
use crate::checkpoint;
use crate::clicks::{sample_corrective_click, sample_initial_prompt, PromptProbs};
use crate::data::{Sample, VideoClip};
use crate::model::{MemoryBank, Model, ModelConfig, SelectionMode, STAGES};
use crate::{Error, Mask, Prompt, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adamw,
    /// Plain gradient descent without weight decay, for debugging.
    Sgd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    /// Episodes whose gradients are summed (and averaged) per update.
    pub batch_size: usize,
    pub seq_len: usize,
    /// Probability that an episode is a single frame.
    pub image_prob: f64,
    /// Either 0 or 1.
    pub corrective_frames: usize,
    pub prompt_probs: PromptProbs,
    pub lr_encoder: f64,
    pub lr_other: f64,
    /// Encoder stage `l` trains at `lr_encoder * stage_decay^(STAGES - l)`.
    pub stage_decay: f64,
    pub weight_decay: f64,
    pub betas: [f64; 2],
    pub optimizer: OptimizerKind,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::desk(),
            epochs: 1,
            steps_per_epoch: 50,
            batch_size: 1,
            seq_len: 8,
            image_prob: 0.2,
            corrective_frames: 1,
            prompt_probs: PromptProbs::default(),
            lr_encoder: 3e-4,
            lr_other: 6e-5,
            stage_decay: 0.9,
            weight_decay: 0.01,
            betas: [0.9, 0.999],
            optimizer: OptimizerKind::Adamw,
            seed: 0,
        }
    }
}

fn check_probs(name: &str, probs: &[f64]) -> Result<()> {
    let sum: f64 = probs.iter().sum();
    if probs.iter().any(|p| !(0.0..=1.0).contains(p)) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("{name} probabilities {probs:?} must lie in [0, 1] and sum to 1")));
    }
    Ok(())
}

impl TrainConfig {
    pub fn total_steps(&self) -> usize {
        self.epochs * self.steps_per_epoch
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        check_probs("initial prompt", &self.prompt_probs.initial)?;
        check_probs("corrective click source", &self.prompt_probs.corrective)?;
        if self.epochs == 0 || self.steps_per_epoch == 0 || self.batch_size == 0 || self.seq_len == 0 {
            return Err(Error::Config("epochs, steps_per_epoch, batch_size and seq_len must be positive".into()));
        }
        if self.corrective_frames > 1 {
            return Err(Error::Config(format!("corrective_frames={} exceeds 1", self.corrective_frames)));
        }
        if !(0.0..=1.0).contains(&self.image_prob) {
            return Err(Error::Config(format!("image_prob={} outside [0, 1]", self.image_prob)));
        }
        Ok(())
    }

    /// `(encoder, other)` learning rates at `step` under cosine decay to 0
    /// at the final step.
    pub fn learning_rates(&self, step: usize) -> (f64, f64) {
        let total = self.total_steps();
        let f = if total <= 1 {
            1.0
        } else {
            0.5 * (1.0 + (PI * step as f64 / (total - 1) as f64).cos())
        };
        (self.lr_encoder * f, self.lr_other * f)
    }

    /// Learning-rate multiplier table indexed by parameter.
    fn lr_table(&self, store: &ParamStore, step: usize) -> Vec<f64> {
        let (enc, other) = self.learning_rates(step);
        store
            .iter()
            .map(|(_, name, _)| match encoder_stage(name) {
                Some(l) => enc * self.stage_decay.powi((STAGES - l) as i32),
                None => other,
            })
            .collect()
    }
}

/// Stage `l` (1-based) of an encoder parameter name.
pub fn encoder_stage(name: &str) -> Option<usize> {
    let rest = name.strip_prefix("encoder.stage")?;
    let digits: String = rest.chars().take_while(char::is_ascii_digit).collect();
    digits.parse().ok()
}

/// One sampled training sequence for one object.
#[derive(Clone, Debug)]
pub struct Episode {
    pub clip: VideoClip,
    pub masks: Vec<Mask>,
    pub initial_prompt: Prompt,
    pub corrective_frame: Option<usize>,
}

/// Draws a clip, an object visible on the first frame of the window and
/// its first-frame prompt.
pub fn sample_episode(dataset: &[Sample], cfg: &TrainConfig, rng: &mut impl Rng) -> Result<Episode> {
    if dataset.is_empty() {
        return Err(Error::Config("training dataset is empty".into()));
    }
    const ATTEMPTS: usize = 100;
    for _ in 0..ATTEMPTS {
        let sample = &dataset[rng.random_range(0..dataset.len())];
        let n = sample.clip.num_frames();
        let len = if rng.random::<f64>() < cfg.image_prob { 1 } else { cfg.seq_len.min(n) };
        let start = rng.random_range(0..=n - len);
        let visible: Vec<usize> = (0..sample.annotation.num_objects())
            .filter(|&o| !sample.annotation.object(o)[start].is_blank())
            .collect();
        if visible.is_empty() {
            continue;
        }
        let o = visible[rng.random_range(0..visible.len())];
        let masks = sample.annotation.object(o)[start..start + len].to_vec();
        let Some(initial_prompt) = sample_initial_prompt(&masks[0], &cfg.prompt_probs, rng) else {
            continue;
        };
        let corrective_frame = (cfg.corrective_frames == 1 && len > 1).then(|| rng.random_range(1..len));
        return Ok(Episode {
            clip: sample.clip.slice(start, len),
            masks,
            initial_prompt,
            corrective_frame,
        });
    }
    Err(Error::Config(format!("no visible object found in {ATTEMPTS} draws")))
}

/// Runs one episode through the model and returns the gradients of its
/// mean per-frame total loss, plus the mean loss components.
pub fn episode_gradients(model: &Model, episode: &Episode, cfg: &TrainConfig, rng: &mut impl Rng) -> Result<(HashMap<ParamId, Array>, LossBundle)> {
    let g = Graph::new(&model.store);
    let (h, w) = (episode.clip.height(), episode.clip.width());
    let mut selection = model.config.selection;
    selection.mode = SelectionMode::Stochastic;
    let mut bank: MemoryBank<Var> = MemoryBank::new(model.config.p_cap);
    let mut loss: Option<Var> = None;
    let mut sum = LossBundle::default();
    let threshold = model.config.mask_threshold;
    for (t, gt) in episode.masks.iter().enumerate() {
        let frame = model.frame_features(&g, &episode.clip, t)?;
        let cond = model.condition(&g, &frame, &bank, t, &selection, rng)?;
        let mut prompts = if t == 0 { vec![episode.initial_prompt.clone()] } else { Vec::new() };
        let mut out = model.decode(&g, &cond, &prompts, (h, w))?;
        if episode.corrective_frame == Some(t) {
            let pred = out.to_output().finalize(threshold);
            if let Some(click) = sample_corrective_click(&pred, gt, &cfg.prompt_probs, rng, false) {
                prompts.push(click.prompt);
                out = model.decode(&g, &cond, &prompts, (h, w))?;
            }
        }
        let (total, bundle) = frame_loss(&out, gt)?;
        loss = Some(match loss {
            Some(acc) => acc + total,
            None => total,
        });
        sum = LossBundle::new(sum.mask + bundle.mask, sum.iou + bundle.iou, sum.object + bundle.object);
        let mask = out.to_output().finalize(threshold);
        bank.insert(model.encode_memory(frame.last, &mask, t, !prompts.is_empty())?);
    }
    let n = episode.masks.len() as f64;
    let loss = loss.ok_or_else(|| Error::Config("episode has no frames".into()))?.scale(1.0 / n);
    let mean = LossBundle::new(sum.mask / n, sum.iou / n, sum.object / n);
    Ok((g.backward(loss).into_param_grads(), mean))
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub epoch: usize,
    pub total: f64,
    pub mask: f64,
    pub iou: f64,
    pub object: f64,
    pub lr_encoder: f64,
    pub lr_other: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub metrics: Vec<StepMetrics>,
    /// Checkpoints written, one per epoch, when an output directory was given.
    pub checkpoints: Vec<PathBuf>,
}

/// Stateful trainer; [`train`] drives it to completion.
pub struct Trainer<'d> {
    pub config: TrainConfig,
    pub model: Model,
    dataset: &'d [Sample],
    rng: ChaCha8Rng,
    adam: AdamW,
    step: usize,
}

impl<'d> Trainer<'d> {
    pub fn new(config: TrainConfig, dataset: &'d [Sample]) -> Result<Self> {
        config.validate()?;
        if dataset.is_empty() {
            return Err(Error::Config("training dataset is empty".into()));
        }
        let model = Model::new(config.model.clone())?;
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            adam: AdamW::new(config.betas[0], config.betas[1], config.weight_decay),
            model,
            dataset,
            config,
            step: 0,
        })
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    /// Samples a batch, accumulates gradients and applies one update.
    pub fn step(&mut self) -> Result<StepMetrics> {
        let mut grads: HashMap<ParamId, Array> = HashMap::new();
        let mut sum = LossBundle::default();
        let b = self.config.batch_size as f64;
        for _ in 0..self.config.batch_size {
            let episode = sample_episode(self.dataset, &self.config, &mut self.rng)?;
            let (g, bundle) = episode_gradients(&self.model, &episode, &self.config, &mut self.rng)?;
            if !bundle.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step: self.step,
                    detail: format!(
                        "mask={} iou={} object={} on a {}-frame episode",
                        bundle.mask,
                        bundle.iou,
                        bundle.object,
                        episode.masks.len()
                    ),
                });
            }
            sum = LossBundle::new(sum.mask + bundle.mask / b, sum.iou + bundle.iou / b, sum.object + bundle.object / b);
            for (id, mut gv) in g {
                gv.data_mut().iter_mut().for_each(|v| *v /= b);
                match grads.get_mut(&id) {
                    Some(acc) => acc.add_assign(&gv),
                    None => {
                        grads.insert(id, gv);
                    }
                }
            }
        }
        if let Some((id, _)) = grads.iter().find(|(_, g)| !g.all_finite()) {
            return Err(Error::NonFiniteLoss {
                step: self.step,
                detail: format!("gradient of {} is not finite", self.model.store.name(*id)),
            });
        }
        let table = self.config.lr_table(&self.model.store, self.step);
        let lr_of = |id: ParamId| table[id.index()];
        match self.config.optimizer {
            OptimizerKind::Adamw => self.adam.step(&mut self.model.store, &grads, lr_of),
            OptimizerKind::Sgd => sgd_step(&mut self.model.store, &grads, lr_of),
        }
        let (lr_encoder, lr_other) = self.config.learning_rates(self.step);
        let metrics = StepMetrics {
            step: self.step,
            epoch: self.step / self.config.steps_per_epoch,
            total: sum.total,
            mask: sum.mask,
            iou: sum.iou,
            object: sum.object,
            lr_encoder,
            lr_other,
        };
        self.step += 1;
        Ok(metrics)
    }
}

/// Trains from scratch. With `out_dir`, writes `epoch_{e}.ckpt` after each
/// epoch, `final.ckpt` and a `metrics.ndjson` loss log.
pub fn train(config: &TrainConfig, dataset: &[Sample], out_dir: Option<&Path>) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(config.clone(), dataset)?;
    let mut metrics = Vec::with_capacity(config.total_steps());
    let mut checkpoints = Vec::new();
    let mut log = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join("metrics.ndjson");
            Some((std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?, path))
        }
        None => None,
    };
    for epoch in 0..config.epochs {
        for _ in 0..config.steps_per_epoch {
            let m = trainer.step()?;
            tracing::debug!(step = m.step, total = m.total, "training step");
            if let Some((file, path)) = log.as_mut() {
                writeln!(file, "{}", serde_json::to_string(&m)?).map_err(|e| Error::io(path.as_path(), e))?;
            }
            metrics.push(m);
        }
        if let Some(dir) = out_dir {
            let path = dir.join(format!("epoch_{epoch}.ckpt"));
            checkpoint::save(&trainer.model, &path)?;
            checkpoints.push(path);
        }
    }
    if let Some(dir) = out_dir {
        let path = dir.join("final.ckpt");
        checkpoint::save(&trainer.model, &path)?;
        checkpoints.push(path);
    }
    Ok(TrainOutcome {
        model: trainer.model,
        metrics,
        checkpoints,
    })
}
