//! Synthetic moving-shape videos and the on-disk dataset layout.
//!
//! ```text
//! root/manifest.json
//! root/clip_<k>/frames/<t:06d>.png          8-bit RGB
//! root/clip_<k>/masks/obj_<o>/<t:06d>.png   8-bit gray, 0 or 255
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use vidseg_autograd::Array;

use crate::{Error, Mask, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShapeKind {
    Disk,
    Rectangle,
    LShape,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Background {
    Flat,
    Noise,
}

/// Interval `[start_frame, end_frame]` during which an object is hidden.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Occlusion {
    pub object: usize,
    pub start_frame: usize,
    pub end_frame: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub shape: ShapeKind,
    /// Radius for disks, half-extent for the other shapes, in pixels.
    pub size: f64,
    /// Pixels per frame as `[vx, vy]`.
    pub velocity: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_frames: usize,
    pub height: usize,
    pub width: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    pub objects: Vec<ObjectSpec>,
    #[serde(default)]
    pub occlusion_schedule: Vec<Occlusion>,
    pub background: Background,
}

fn default_channels() -> usize {
    3
}

impl SynthConfig {
    pub fn num_objects(&self) -> usize {
        self.objects.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_frames == 0 {
            return bad("num_frames must be at least 1".into());
        }
        if self.height == 0 || self.width == 0 {
            return bad(format!("frame size {}x{} is empty", self.height, self.width));
        }
        if self.channels != 3 {
            return bad(format!("channels must be 3, got {}", self.channels));
        }
        let min_side = self.height.min(self.width) as f64;
        for (i, o) in self.objects.iter().enumerate() {
            if !(o.size >= 1.0) || 2.0 * o.size + 1.0 >= min_side {
                return bad(format!("object {i} size {} does not fit a {}x{} frame", o.size, self.height, self.width));
            }
            if !o.velocity.iter().all(|v| v.is_finite()) {
                return bad(format!("object {i} velocity is not finite"));
            }
        }
        for occ in &self.occlusion_schedule {
            if occ.object >= self.objects.len() {
                return bad(format!("occlusion refers to missing object {}", occ.object));
            }
            if occ.start_frame > occ.end_frame || occ.end_frame >= self.num_frames {
                return bad(format!(
                    "occlusion [{}, {}] is not inside 0..{}",
                    occ.start_frame, occ.end_frame, self.num_frames
                ));
            }
        }
        Ok(())
    }

    fn occluded(&self, object: usize, t: usize) -> bool {
        self.occlusion_schedule
            .iter()
            .any(|o| o.object == object && o.start_frame <= t && t <= o.end_frame)
    }
}

/// Video as a `[n, c, h, w]` tensor with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    frames: Array,
}

impl VideoClip {
    pub fn new(frames: Array) -> Result<Self> {
        if frames.ndim() != 4 {
            return Err(Error::Shape(format!("clip tensor must be [n, c, h, w], got {:?}", frames.shape())));
        }
        if !frames.all_finite() {
            return Err(Error::Validation("clip contains non-finite values".into()));
        }
        Ok(Self { frames })
    }

    pub fn frames(&self) -> &Array {
        &self.frames
    }

    pub fn num_frames(&self) -> usize {
        self.frames.dim(0)
    }

    pub fn channels(&self) -> usize {
        self.frames.dim(1)
    }

    pub fn height(&self) -> usize {
        self.frames.dim(2)
    }

    pub fn width(&self) -> usize {
        self.frames.dim(3)
    }

    /// Frame `t` as `[c, h, w]`.
    pub fn frame(&self, t: usize) -> Array {
        let (c, h, w) = (self.channels(), self.height(), self.width());
        self.frames.narrow(0, t, 1).reshape(&[c, h, w])
    }

    /// The `len` frames ending at `t` as `[c, len, h, w]`, repeating frame 0
    /// for positions before the start of the video.
    pub fn window(&self, t: usize, len: usize) -> Array {
        let (c, h, w) = (self.channels(), self.height(), self.width());
        let plane = h * w;
        let mut out = vec![0.0; c * len * plane];
        for k in 0..len {
            let src_t = (t + k + 1).saturating_sub(len);
            for ch in 0..c {
                let src = ((src_t * c) + ch) * plane;
                let dst = (ch * len + k) * plane;
                out[dst..dst + plane].copy_from_slice(&self.frames.data()[src..src + plane]);
            }
        }
        Array::from_vec(&[c, len, h, w], out)
    }

    /// Sub-clip of frames `start..start + len`.
    pub fn slice(&self, start: usize, len: usize) -> VideoClip {
        VideoClip {
            frames: self.frames.narrow(0, start, len),
        }
    }
}

/// Per-object, per-frame binary masks.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskAnnotation {
    masks: Vec<Vec<Mask>>,
}

impl MaskAnnotation {
    pub fn new(masks: Vec<Vec<Mask>>) -> Result<Self> {
        let n = masks.first().map_or(0, |m| m.len());
        let dims = masks.first().and_then(|m| m.first()).map(|m| m.dims());
        for track in &masks {
            if track.len() != n || track.iter().any(|m| Some(m.dims()) != dims) {
                return Err(Error::Shape("annotation tracks differ in length or frame size".into()));
            }
        }
        Ok(Self { masks })
    }

    pub fn num_objects(&self) -> usize {
        self.masks.len()
    }

    pub fn num_frames(&self) -> usize {
        self.masks.first().map_or(0, |m| m.len())
    }

    pub fn object(&self, o: usize) -> &[Mask] {
        &self.masks[o]
    }

    /// `visibility[o][t]` is true iff the mask is nonempty.
    pub fn visibility(&self) -> Vec<Vec<bool>> {
        self.masks
            .iter()
            .map(|track| track.iter().map(|m| !m.is_blank()).collect())
            .collect()
    }

    pub fn slice(&self, start: usize, len: usize) -> MaskAnnotation {
        MaskAnnotation {
            masks: self.masks.iter().map(|t| t[start..start + len].to_vec()).collect(),
        }
    }
}

/// A clip together with its annotation.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub clip: VideoClip,
    pub annotation: MaskAnnotation,
}

const PALETTE: [[u8; 3]; 8] = [
    [230, 40, 40],
    [40, 200, 60],
    [50, 90, 235],
    [240, 210, 30],
    [220, 60, 220],
    [40, 210, 220],
    [250, 140, 20],
    [245, 245, 245],
];

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Object centre trajectory with reflection at the frame borders. The object
/// keeps moving while hidden.
fn trajectory(start: [f64; 2], spec: &ObjectSpec, n: usize, h: usize, w: usize) -> Vec<[f64; 2]> {
    let lo = spec.size;
    let hi = [w as f64 - 1.0 - spec.size, h as f64 - 1.0 - spec.size];
    let mut p = start;
    let mut v = spec.velocity;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        out.push(p);
        for a in 0..2 {
            p[a] += v[a];
            // several bounces per frame only happen for extreme speeds
            for _ in 0..8 {
                if p[a] < lo {
                    p[a] = 2.0 * lo - p[a];
                    v[a] = -v[a];
                } else if p[a] > hi[a] {
                    p[a] = 2.0 * hi[a] - p[a];
                    v[a] = -v[a];
                } else {
                    break;
                }
            }
            p[a] = p[a].clamp(lo, hi[a]);
        }
    }
    out
}

/// Pixel offsets `(dx, dy)` from the rounded centre covered by a shape.
pub fn shape_contains(shape: ShapeKind, size: f64, dx: i64, dy: i64) -> bool {
    let r = size.floor() as i64;
    match shape {
        ShapeKind::Disk => (dx * dx + dy * dy) as f64 <= size * size,
        ShapeKind::Rectangle => dx.abs() <= r && dy.abs() <= (size * 0.6).floor() as i64,
        ShapeKind::LShape => {
            let third = (size / 3.0).floor() as i64;
            dx.abs() <= r && dy.abs() <= r && (dx <= -third || dy >= third)
        }
    }
}

/// Renders a clip and its modal masks. Pure in `(config, seed)`.
pub fn generate_clip(config: &SynthConfig, seed: u64) -> Result<Sample> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, h, w, c) = (config.num_frames, config.height, config.width, config.channels);

    let mut colors = PALETTE.to_vec();
    colors.shuffle(&mut rng);
    let bg_level = rng.random_range(20u8..90u8);
    let starts: Vec<[f64; 2]> = config
        .objects
        .iter()
        .map(|o| {
            [
                rng.random_range(o.size..=(w as f64 - 1.0 - o.size)),
                rng.random_range(o.size..=(h as f64 - 1.0 - o.size)),
            ]
        })
        .collect();
    let paths: Vec<Vec<[f64; 2]>> = config
        .objects
        .iter()
        .zip(&starts)
        .map(|(o, &s)| trajectory(s, o, n, h, w))
        .collect();

    let mut frames = vec![0.0; n * c * h * w];
    let mut masks = vec![Vec::with_capacity(n); config.num_objects()];
    for t in 0..n {
        // top-most object index per pixel, later objects drawn on top
        let mut label: Vec<Option<usize>> = vec![None; h * w];
        for (o, spec) in config.objects.iter().enumerate() {
            if config.occluded(o, t) {
                continue;
            }
            let [cx, cy] = paths[o][t];
            let (cx, cy) = (cx.round() as i64, cy.round() as i64);
            let reach = spec.size.ceil() as i64;
            for dy in -reach..=reach {
                for dx in -reach..=reach {
                    let (x, y) = (cx + dx, cy + dy);
                    if x < 0 || y < 0 || x >= w as i64 || y >= h as i64 {
                        continue;
                    }
                    if shape_contains(spec.shape, spec.size, dx, dy) {
                        label[y as usize * w + x as usize] = Some(o);
                    }
                }
            }
        }
        for (o, track) in masks.iter_mut().enumerate() {
            track.push(Mask::from_fn(h, w, |x, y| label[y * w + x] == Some(o)));
        }
        for (p, l) in label.iter().enumerate() {
            for ch in 0..c {
                let v = match l {
                    Some(o) => colors[*o % colors.len()][ch] as f64 / 255.0,
                    None => match config.background {
                        Background::Flat => bg_level as f64 / 255.0,
                        Background::Noise => {
                            let jitter: f64 = rng.random_range(-0.08..0.08);
                            quantize(bg_level as f64 / 255.0 + jitter)
                        }
                    },
                };
                frames[((t * c + ch) * h * w) + p] = v;
            }
        }
    }
    Ok(Sample {
        clip: VideoClip::new(Array::from_vec(&[n, c, h, w], frames))?,
        annotation: MaskAnnotation::new(masks)?,
    })
}

/// Randomised recipe for a whole dataset of clips.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecipe {
    pub num_clips: usize,
    pub num_frames: usize,
    pub height: usize,
    pub width: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_size: f64,
    pub max_size: f64,
    pub max_speed: f64,
    /// Probability that an object gets one occlusion interval.
    pub occlusion_prob: f64,
    pub min_occlusion_len: usize,
    pub max_occlusion_len: usize,
    pub shapes: Vec<ShapeKind>,
    pub backgrounds: Vec<Background>,
}

impl Default for DatasetRecipe {
    fn default() -> Self {
        Self {
            num_clips: 10,
            num_frames: 8,
            height: 64,
            width: 64,
            min_objects: 1,
            max_objects: 2,
            min_size: 8.0,
            max_size: 14.0,
            max_speed: 3.0,
            occlusion_prob: 0.5,
            min_occlusion_len: 1,
            max_occlusion_len: 3,
            shapes: vec![ShapeKind::Disk, ShapeKind::Rectangle, ShapeKind::LShape],
            backgrounds: vec![Background::Flat, Background::Noise],
        }
    }
}

impl DatasetRecipe {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.num_frames == 0 || self.height == 0 || self.width == 0 {
            return bad("clip dimensions must be positive");
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return bad("need 1 <= min_objects <= max_objects");
        }
        if !(self.min_size >= 1.0 && self.min_size <= self.max_size) {
            return bad("need 1 <= min_size <= max_size");
        }
        if self.shapes.is_empty() || self.backgrounds.is_empty() {
            return bad("shapes and backgrounds must be nonempty");
        }
        if !(0.0..=1.0).contains(&self.occlusion_prob) {
            return bad("occlusion_prob must lie in [0, 1]");
        }
        if self.min_occlusion_len == 0 || self.min_occlusion_len > self.max_occlusion_len {
            return bad("need 1 <= min_occlusion_len <= max_occlusion_len");
        }
        Ok(())
    }

    /// Draws one clip configuration. Occlusions never cover frame 0 so every
    /// object is visible on the prompt frame.
    pub fn sample_config(&self, rng: &mut impl Rng) -> SynthConfig {
        let count = rng.random_range(self.min_objects..=self.max_objects);
        let objects = (0..count)
            .map(|_| {
                let angle = rng.random_range(0.0..std::f64::consts::TAU);
                let speed = rng.random_range(0.0..=self.max_speed);
                ObjectSpec {
                    shape: self.shapes[rng.random_range(0..self.shapes.len())],
                    size: rng.random_range(self.min_size..=self.max_size),
                    velocity: [speed * angle.cos(), speed * angle.sin()],
                }
            })
            .collect();
        let mut occlusion_schedule = Vec::new();
        if self.num_frames >= 3 {
            for object in 0..count {
                if rng.random_bool(self.occlusion_prob) {
                    let len = rng.random_range(self.min_occlusion_len..=self.max_occlusion_len);
                    let len = len.min(self.num_frames - 2);
                    let start = rng.random_range(1..=self.num_frames - 1 - len);
                    occlusion_schedule.push(Occlusion {
                        object,
                        start_frame: start,
                        end_frame: start + len - 1,
                    });
                }
            }
        }
        SynthConfig {
            num_frames: self.num_frames,
            height: self.height,
            width: self.width,
            channels: 3,
            objects,
            occlusion_schedule,
            background: self.backgrounds[rng.random_range(0..self.backgrounds.len())],
        }
    }
}

/// Generates `recipe.num_clips` clips deterministically from `seed`.
pub fn generate_dataset(recipe: &DatasetRecipe, seed: u64) -> Result<Vec<Sample>> {
    recipe.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..recipe.num_clips)
        .map(|_| {
            let cfg = recipe.sample_config(&mut rng);
            let clip_seed = rng.random::<u64>();
            generate_clip(&cfg, clip_seed)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub num_objects: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub clips: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

fn frame_path(root: &Path, clip: &str, t: usize) -> PathBuf {
    root.join(clip).join("frames").join(format!("{t:06}.png"))
}

fn mask_path(root: &Path, clip: &str, o: usize, t: usize) -> PathBuf {
    root.join(clip).join("masks").join(format!("obj_{o}")).join(format!("{t:06}.png"))
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

/// Writes samples in the dataset layout; returns the manifest path.
pub fn write_dataset(samples: &[Sample], root: &Path) -> Result<PathBuf> {
    create_dir(root)?;
    let mut entries = Vec::with_capacity(samples.len());
    for (k, s) in samples.iter().enumerate() {
        let id = format!("clip_{k}");
        let (n, h, w) = (s.clip.num_frames(), s.clip.height(), s.clip.width());
        if s.clip.channels() != 3 {
            return Err(Error::Shape(format!("{id}: only 3-channel clips can be written")));
        }
        create_dir(&root.join(&id).join("frames"))?;
        for t in 0..n {
            let frame = s.clip.frame(t);
            let img = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
                let px = |ch: usize| (frame.data()[(ch * h + y as usize) * w + x as usize] * 255.0).round() as u8;
                image::Rgb([px(0), px(1), px(2)])
            });
            let p = frame_path(root, &id, t);
            img.save(&p).map_err(|source| Error::Image { path: p, source })?;
        }
        for o in 0..s.annotation.num_objects() {
            create_dir(&root.join(&id).join("masks").join(format!("obj_{o}")))?;
            for (t, m) in s.annotation.object(o).iter().enumerate() {
                let img = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
                    image::Luma([if m.get(x as usize, y as usize) { 255 } else { 0 }])
                });
                let p = mask_path(root, &id, o, t);
                img.save(&p).map_err(|source| Error::Image { path: p, source })?;
            }
        }
        entries.push(ManifestEntry {
            id,
            n,
            h,
            w,
            num_objects: s.annotation.num_objects(),
        });
    }
    let manifest = Manifest {
        version: 1,
        clips: entries,
    };
    let path = root.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

pub fn read_manifest(root: &Path) -> Result<Manifest> {
    let path = root.join(MANIFEST_FILE);
    if !path.exists() {
        return Err(Error::EmptyDataset { root: root.to_path_buf() });
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.clips.is_empty() {
        return Err(Error::EmptyDataset { root: root.to_path_buf() });
    }
    Ok(manifest)
}

fn open_image(p: &Path) -> Result<image::DynamicImage> {
    if !p.is_file() {
        return Err(Error::DatasetIntegrity { path: p.to_path_buf() });
    }
    image::open(p).map_err(|_| Error::DatasetIntegrity { path: p.to_path_buf() })
}

/// Reads one clip listed in the manifest.
pub fn read_clip(root: &Path, entry: &ManifestEntry) -> Result<Sample> {
    let (n, h, w) = (entry.n, entry.h, entry.w);
    let mut frames = vec![0.0; n * 3 * h * w];
    for t in 0..n {
        let p = frame_path(root, &entry.id, t);
        let img = open_image(&p)?.to_rgb8();
        if img.dimensions() != (w as u32, h as u32) {
            return Err(Error::DatasetIntegrity { path: p });
        }
        for (x, y, px) in img.enumerate_pixels() {
            for ch in 0..3 {
                frames[((t * 3 + ch) * h + y as usize) * w + x as usize] = px[ch] as f64 / 255.0;
            }
        }
    }
    let mut masks = Vec::with_capacity(entry.num_objects);
    for o in 0..entry.num_objects {
        let mut track = Vec::with_capacity(n);
        for t in 0..n {
            let p = mask_path(root, &entry.id, o, t);
            let img = open_image(&p)?.to_luma8();
            if img.dimensions() != (w as u32, h as u32) {
                return Err(Error::DatasetIntegrity { path: p });
            }
            track.push(Mask::from_fn(h, w, |x, y| img.get_pixel(x as u32, y as u32)[0] >= 128));
        }
        masks.push(track);
    }
    Ok(Sample {
        clip: VideoClip::new(Array::from_vec(&[n, 3, h, w], frames))?,
        annotation: MaskAnnotation::new(masks)?,
    })
}

/// Reads every clip listed in `root/manifest.json`.
pub fn read_dataset(root: &Path) -> Result<Vec<Sample>> {
    let manifest = read_manifest(root)?;
    manifest.clips.iter().map(|e| read_clip(root, e)).collect()
}
