//! J&F metric and the interactive and semi-supervised evaluation protocols,
//! driven by a deterministic robot user.

pub mod metric;
pub mod stubs;

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use self::metric::{jf_metric, FrameScore, JfScore};
use crate::clicks::{initial_click, robot_corrective_click};
use crate::data::Sample;
use crate::model::{Model, Tracker};
use crate::{Error, Mask, Prompt, Result};

/// Anything that segments one object frame by frame with memory of the
/// frames it segmented before.
pub trait Segmenter {
    /// Forgets all memory.
    fn reset(&mut self);
    /// Segments frame `t` given every prompt placed on it so far.
    fn segment_frame(&mut self, t: usize, prompts: &[Prompt]) -> Result<Mask>;
}

impl Segmenter for Tracker {
    fn reset(&mut self) {
        Tracker::reset(self);
    }

    fn segment_frame(&mut self, t: usize, prompts: &[Prompt]) -> Result<Mask> {
        self.segment_mask(t, prompts)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub n_click: usize,
    pub n_frame: usize,
    pub n_pass: usize,
    pub iou_pause_threshold: f64,
    pub boundary_tolerance: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_click: 3,
            n_frame: 3,
            n_pass: 3,
            iou_pause_threshold: 0.75,
            boundary_tolerance: 0.008,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_click == 0 {
            return Err(Error::Config("n_click must be at least 1".into()));
        }
        if self.n_pass == 0 {
            return Err(Error::Config("n_pass must be at least 1".into()));
        }
        for (name, v) in [("iou_pause_threshold", self.iou_pause_threshold), ("boundary_tolerance", self.boundary_tolerance)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Config(format!("{name}={v} must lie in (0, 1)")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    Online,
    Offline,
    Semivos(SemivosPrompt),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SemivosPrompt {
    ThreeClick,
    Box,
    GtMask,
}

/// One robot-user intervention.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interaction {
    pub pass: usize,
    pub frame: usize,
    /// IoU of the frame's mask before the clicks.
    pub iou_before: f64,
    pub iou_after: f64,
    pub prompts: Vec<Prompt>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipReport {
    pub clip: String,
    pub object: usize,
    pub protocol: Protocol,
    pub j: f64,
    pub f: f64,
    pub jf: f64,
    /// Frames the score is computed over.
    pub scored_frames: Vec<usize>,
    pub frames: Vec<FrameScore>,
    pub interactions: Vec<Interaction>,
    /// Online refinements (pauses) taken after the first frame.
    pub pauses: usize,
    pub clicks: usize,
    /// J&F after every offline pass; a single entry otherwise.
    pub pass_jf: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum ClipOutcome {
    Scored(ClipReport),
    Skipped { clip: String, object: usize, reason: String },
}

/// Per-clip records plus dataset means over the scored ones.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: Protocol,
    pub config: EvalConfig,
    pub clips: Vec<ClipOutcome>,
    pub scored: usize,
    pub mean_j: f64,
    pub mean_f: f64,
    pub mean_jf: f64,
}

impl EvalReport {
    pub fn new(protocol: Protocol, config: EvalConfig, clips: Vec<ClipOutcome>) -> Self {
        let scored: Vec<&ClipReport> = clips
            .iter()
            .filter_map(|c| match c {
                ClipOutcome::Scored(r) => Some(r),
                ClipOutcome::Skipped { .. } => None,
            })
            .collect();
        let n = scored.len();
        let mean = |f: fn(&ClipReport) -> f64| if n == 0 { 0.0 } else { scored.iter().map(|r| f(r)).sum::<f64>() / n as f64 };
        Self {
            protocol,
            config,
            scored: n,
            mean_j: mean(|r| r.j),
            mean_f: mean(|r| r.f),
            mean_jf: mean(|r| r.jf),
            clips,
        }
    }
}

type History = BTreeMap<usize, Vec<Prompt>>;

fn frame_prompts(history: &History, t: usize) -> &[Prompt] {
    history.get(&t).map(Vec::as_slice).unwrap_or(&[])
}

/// Issues up to `n` robot clicks on frame `t`, re-segmenting after each.
/// The first click of an unprompted frame is the interior-most object
/// pixel when `initial` is set; every other click corrects the current
/// mask. Returns the final mask.
fn click_frame(
    seg: &mut dyn Segmenter,
    history: &mut History,
    t: usize,
    gt: &Mask,
    mut current: Mask,
    n: usize,
    initial: bool,
    pass: usize,
    log: &mut Vec<Interaction>,
) -> Result<Mask> {
    let iou_before = current.iou(gt);
    let start = frame_prompts(history, t).len();
    for k in 0..n {
        let click = if initial && k == 0 { initial_click(gt) } else { robot_corrective_click(&current, gt) };
        let Some(click) = click else { break };
        history.entry(t).or_default().push(click);
        current = seg.segment_frame(t, frame_prompts(history, t))?;
    }
    log.push(Interaction {
        pass,
        frame: t,
        iou_before,
        iou_after: current.iou(gt),
        prompts: frame_prompts(history, t)[start..].to_vec(),
    });
    Ok(current)
}

fn skip_reason(gt: &[Mask]) -> Option<String> {
    if gt.is_empty() {
        Some("clip has no frames".into())
    } else if gt[0].is_blank() {
        Some("object is absent on frame 0, so no first-frame prompt can be placed".into())
    } else {
        None
    }
}

#[allow(clippy::too_many_arguments)]
fn report(
    clip: &str,
    object: usize,
    protocol: Protocol,
    cfg: &EvalConfig,
    masks: &[Mask],
    gt: &[Mask],
    scored_frames: Vec<usize>,
    interactions: Vec<Interaction>,
    pauses: usize,
    pass_jf: Vec<f64>,
) -> Result<ClipReport> {
    let pred: Vec<Mask> = scored_frames.iter().map(|&t| masks[t].clone()).collect();
    let target: Vec<Mask> = scored_frames.iter().map(|&t| gt[t].clone()).collect();
    let score = jf_metric(&pred, &target, cfg.boundary_tolerance)?;
    Ok(ClipReport {
        clip: clip.to_string(),
        object,
        protocol,
        j: score.j,
        f: score.f,
        jf: score.jf,
        scored_frames,
        frames: score.frames,
        clicks: interactions.iter().map(|i| i.prompts.len()).sum(),
        interactions,
        pauses,
        pass_jf,
    })
}

fn skipped(clip: &str, object: usize, reason: String) -> ClipOutcome {
    tracing::info!(clip, object, %reason, "skipping object");
    ClipOutcome::Skipped {
        clip: clip.to_string(),
        object,
        reason,
    }
}

fn initialize(seg: &mut dyn Segmenter, history: &mut History, gt: &[Mask], cfg: &EvalConfig, pass: usize, log: &mut Vec<Interaction>) -> Result<Mask> {
    let blank = Mask::new(gt[0].height(), gt[0].width());
    click_frame(seg, history, 0, &gt[0], blank, cfg.n_click, true, pass, log)
}

/// Online interactive protocol: clicks on frame 0, then forward
/// propagation that pauses on the first frames whose IoU drops below the
/// threshold, at most `n_frame` times.
pub fn run_online(seg: &mut dyn Segmenter, gt: &[Mask], cfg: &EvalConfig, clip: &str, object: usize) -> Result<ClipOutcome> {
    cfg.validate()?;
    if let Some(reason) = skip_reason(gt) {
        return Ok(skipped(clip, object, reason));
    }
    seg.reset();
    let mut history = History::new();
    let mut log = Vec::new();
    let mut masks = vec![initialize(seg, &mut history, gt, cfg, 1, &mut log)?];
    let mut pauses = 0;
    for t in 1..gt.len() {
        let mut mask = seg.segment_frame(t, frame_prompts(&history, t))?;
        if mask.iou(&gt[t]) < cfg.iou_pause_threshold && pauses < cfg.n_frame {
            pauses += 1;
            mask = click_frame(seg, &mut history, t, &gt[t], mask, cfg.n_click, false, 1, &mut log)?;
        }
        masks.push(mask);
    }
    let frames = (0..gt.len()).collect();
    let r = report(clip, object, Protocol::Online, cfg, &masks, gt, frames, log, pauses, Vec::new())?;
    let jf = r.jf;
    Ok(ClipOutcome::Scored(ClipReport { pass_jf: vec![jf], ..r }))
}

fn propagate(seg: &mut dyn Segmenter, history: &History, n: usize) -> Result<Vec<Mask>> {
    (0..n).map(|t| seg.segment_frame(t, frame_prompts(history, t))).collect()
}

/// First index of the smallest IoU.
fn worst_frame(masks: &[Mask], gt: &[Mask]) -> usize {
    let mut best = 0;
    let mut low = f64::INFINITY;
    for (t, (m, g)) in masks.iter().zip(gt).enumerate() {
        let iou = m.iou(g);
        if iou < low {
            low = iou;
            best = t;
        }
    }
    best
}

/// Offline interactive protocol: each pass after the first clicks on the
/// worst frame and re-propagates the whole clip with all prompts.
pub fn run_offline(seg: &mut dyn Segmenter, gt: &[Mask], cfg: &EvalConfig, clip: &str, object: usize) -> Result<ClipOutcome> {
    cfg.validate()?;
    if let Some(reason) = skip_reason(gt) {
        return Ok(skipped(clip, object, reason));
    }
    seg.reset();
    let mut history = History::new();
    let mut log = Vec::new();
    let mut masks = vec![initialize(seg, &mut history, gt, cfg, 1, &mut log)?];
    for t in 1..gt.len() {
        masks.push(seg.segment_frame(t, frame_prompts(&history, t))?);
    }
    let mut pass_jf = vec![jf_metric(&masks, gt, cfg.boundary_tolerance)?.jf];
    for pass in 2..=cfg.n_pass {
        let k = worst_frame(&masks, gt);
        click_frame(seg, &mut history, k, &gt[k], masks[k].clone(), cfg.n_click, false, pass, &mut log)?;
        seg.reset();
        masks = propagate(seg, &history, gt.len())?;
        pass_jf.push(jf_metric(&masks, gt, cfg.boundary_tolerance)?.jf);
    }
    let frames = (0..gt.len()).collect();
    Ok(ClipOutcome::Scored(report(clip, object, Protocol::Offline, cfg, &masks, gt, frames, log, 0, pass_jf)?))
}

/// Semi-supervised protocol: one first-frame prompt, one propagation.
/// Frame 0 is left out of the score when it was given the ground truth.
pub fn run_semivos(seg: &mut dyn Segmenter, gt: &[Mask], kind: SemivosPrompt, cfg: &EvalConfig, clip: &str, object: usize) -> Result<ClipOutcome> {
    cfg.validate()?;
    if let Some(reason) = skip_reason(gt) {
        return Ok(skipped(clip, object, reason));
    }
    if kind == SemivosPrompt::GtMask && gt.len() < 2 {
        return Ok(skipped(clip, object, "a single-frame clip has nothing to score after the mask prompt".into()));
    }
    seg.reset();
    let mut history = History::new();
    let mut log = Vec::new();
    let first = match kind {
        SemivosPrompt::ThreeClick => {
            let three = EvalConfig { n_click: 3, ..*cfg };
            initialize(seg, &mut history, gt, &three, 1, &mut log)?
        }
        SemivosPrompt::Box | SemivosPrompt::GtMask => {
            let prompt = match kind {
                SemivosPrompt::Box => Prompt::Box(gt[0].bbox().expect("object present on frame 0")),
                _ => Prompt::Mask { mask: gt[0].clone() },
            };
            history.insert(0, vec![prompt.clone()]);
            let m = seg.segment_frame(0, std::slice::from_ref(&prompt))?;
            log.push(Interaction {
                pass: 1,
                frame: 0,
                iou_before: 0.0,
                iou_after: m.iou(&gt[0]),
                prompts: vec![prompt],
            });
            m
        }
    };
    let mut masks = vec![first];
    for t in 1..gt.len() {
        masks.push(seg.segment_frame(t, &[])?);
    }
    let start = usize::from(kind == SemivosPrompt::GtMask);
    let frames = (start..gt.len()).collect();
    let r = report(clip, object, Protocol::Semivos(kind), cfg, &masks, gt, frames, log, 0, Vec::new())?;
    let jf = r.jf;
    Ok(ClipOutcome::Scored(ClipReport { pass_jf: vec![jf], ..r }))
}

pub fn run_protocol(seg: &mut dyn Segmenter, gt: &[Mask], protocol: Protocol, cfg: &EvalConfig, clip: &str, object: usize) -> Result<ClipOutcome> {
    match protocol {
        Protocol::Online => run_online(seg, gt, cfg, clip, object),
        Protocol::Offline => run_offline(seg, gt, cfg, clip, object),
        Protocol::Semivos(kind) => run_semivos(seg, gt, kind, cfg, clip, object),
    }
}

/// Evaluates every object of every clip with a model-backed tracker.
pub fn evaluate_dataset(model: Arc<Model>, samples: &[(String, Sample)], protocol: Protocol, cfg: &EvalConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let mut outcomes = Vec::new();
    for (id, sample) in samples {
        let mut tracker = Tracker::new(Arc::clone(&model), sample.clip.clone());
        for o in 0..sample.annotation.num_objects() {
            outcomes.push(run_protocol(&mut tracker, sample.annotation.object(o), protocol, cfg, id, o)?);
        }
    }
    Ok(EvalReport::new(protocol, *cfg, outcomes))
}
