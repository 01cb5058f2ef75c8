//! Deterministic synthetic traffic scenes.
//!
//! A static camera looks at a textured background. Objects are textured
//! rectangles moving at constant velocity (some parked), occluders are static
//! bars drawn over their targets, motion blur averages several sub-frame
//! renders, and distractors are static class-like patches that are never
//! annotated. Output is quantized to 8-bit levels so the PNG round trip is
//! exact.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flow::sinusoid_texture;
use crate::geometry::{BBox, LabeledBox};
use crate::image::Planar;
use crate::inputs::Frame;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid scene spec: {0}")]
    InvalidSpec(String),
    #[error("object of size {size} does not fit a {width}x{height} image")]
    ObjectTooLarge { size: f64, width: usize, height: usize },
    #[error("malformed dataset at {path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("unsupported dataset format version {found} (expected {FORMAT_VERSION})")]
    VersionMismatch { found: u32 },
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SynthError + '_ {
    move |source| SynthError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn format_err(path: &Path, msg: impl ToString) -> SynthError {
    SynthError::Format {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub name: String,
    /// Range of the longer side, pixels.
    pub size_range: [f64; 2],
    /// Height over width.
    pub aspect: f64,
    /// Range of speeds for moving objects, pixels per frame.
    pub speed_range: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackgroundSpec {
    pub base_color: [f64; 3],
    /// Weight of the smooth texture mixed into the base color.
    pub texture_amplitude: f64,
    /// Per-frame uniform pixel noise amplitude.
    pub noise_amplitude: f64,
}

impl Default for BackgroundSpec {
    fn default() -> Self {
        Self {
            base_color: [0.42, 0.42, 0.45],
            texture_amplitude: 0.25,
            noise_amplitude: 0.02,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub num_frames: usize,
    pub classes: Vec<ClassSpec>,
    pub object_count_range: [usize; 2],
    pub occluder_count: usize,
    /// Sub-frame renders averaged per frame; 1 disables blur.
    pub blur_strength: usize,
    pub distractor_count: usize,
    pub stationary_fraction: f64,
    pub background: BackgroundSpec,
    /// Objects whose longer side is at most this are tagged small.
    pub small_size: f64,
    /// Moving objects are never slower than this (pixels per frame).
    pub min_moving_speed: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            width: 128,
            height: 128,
            num_frames: 20,
            classes: default_classes(),
            object_count_range: [3, 6],
            occluder_count: 1,
            blur_strength: 3,
            distractor_count: 1,
            stationary_fraction: 0.25,
            background: BackgroundSpec::default(),
            small_size: 10.0,
            min_moving_speed: 0.5,
            seed: 0,
        }
    }
}

pub fn default_classes() -> Vec<ClassSpec> {
    vec![
        ClassSpec {
            name: "car".into(),
            size_range: [16.0, 28.0],
            aspect: 0.6,
            speed_range: [0.0, 4.0],
        },
        ClassSpec {
            name: "pedestrian".into(),
            size_range: [4.0, 8.0],
            aspect: 2.0,
            speed_range: [0.0, 4.0],
        },
        ClassSpec {
            name: "bus".into(),
            size_range: [28.0, 40.0],
            aspect: 0.5,
            speed_range: [0.0, 4.0],
        },
    ]
}

impl SceneSpec {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidSpec(m));
        if self.width == 0 || self.height == 0 || self.num_frames == 0 {
            return bad("image size and frame count must be positive".into());
        }
        if self.classes.is_empty() {
            return bad("at least one class is required".into());
        }
        let [lo, hi] = self.object_count_range;
        if lo > hi {
            return bad(format!("empty object count range [{lo}, {hi}]"));
        }
        if !(0.0..=1.0).contains(&self.stationary_fraction) {
            return bad(format!("stationary fraction {} outside [0, 1]", self.stationary_fraction));
        }
        if self.blur_strength == 0 {
            return bad("blur strength counts sub-frames and must be at least 1".into());
        }
        for c in &self.classes {
            let [s0, s1] = c.size_range;
            let [v0, v1] = c.speed_range;
            if !(s0 > 0.0 && s0 <= s1) || !(v0 >= 0.0 && v0 <= v1) || !(c.aspect > 0.0) {
                return bad(format!("class '{}' has an empty or invalid range", c.name));
            }
            let (w, h) = object_dims(s1, c.aspect);
            if w >= self.width as f64 || h >= self.height as f64 {
                return Err(SynthError::ObjectTooLarge {
                    size: s1,
                    width: self.width,
                    height: self.height,
                });
            }
        }
        Ok(())
    }
}

fn object_dims(size: f64, aspect: f64) -> (f64, f64) {
    if aspect >= 1.0 {
        (size / aspect, size)
    } else {
        (size, size * aspect)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScenarioTag {
    Small,
    Occluded,
    Blurred,
    Stationary,
    Distractor,
}

impl ScenarioTag {
    pub const ALL: [ScenarioTag; 5] = [
        ScenarioTag::Small,
        ScenarioTag::Occluded,
        ScenarioTag::Blurred,
        ScenarioTag::Stationary,
        ScenarioTag::Distractor,
    ];

    /// Tags that ground truths can carry; distractors are never annotated.
    pub const STRATA: [ScenarioTag; 4] = [
        ScenarioTag::Small,
        ScenarioTag::Occluded,
        ScenarioTag::Blurred,
        ScenarioTag::Stationary,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScenarioTag::Small => "small",
            ScenarioTag::Occluded => "occluded",
            ScenarioTag::Blurred => "blurred",
            ScenarioTag::Stationary => "stationary",
            ScenarioTag::Distractor => "distractor",
        }
    }
}

/// One annotated object in one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub object_id: usize,
    pub bbox: BBox,
    pub class_id: usize,
    pub tags: Vec<ScenarioTag>,
}

impl GroundTruth {
    pub fn labeled(&self) -> LabeledBox {
        LabeledBox {
            bbox: self.bbox,
            class_id: self.class_id,
        }
    }
    pub fn has_tag(&self, tag: ScenarioTag) -> bool {
        self.tags.contains(&tag)
    }
}

/// Everything placed in the scene, annotated or not.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectRecord {
    pub id: usize,
    pub class_id: usize,
    pub width: f64,
    pub height: f64,
    /// Top-left corner at frame 0.
    pub origin: [f64; 2],
    pub velocity: [f64; 2],
    pub annotated: bool,
    pub tags: Vec<ScenarioTag>,
}

impl ObjectRecord {
    pub fn box_at(&self, t: f64) -> [f64; 4] {
        let x = self.origin[0] + self.velocity[0] * t;
        let y = self.origin[1] + self.velocity[1] * t;
        [x, y, x + self.width, y + self.height]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedSequence {
    pub spec: SceneSpec,
    pub frames: Vec<Frame>,
    pub annotations: Vec<Vec<GroundTruth>>,
    pub objects: Vec<ObjectRecord>,
}

impl AnnotatedSequence {
    pub fn channel_means(&self) -> [f64; 3] {
        let mut acc = [0.0; 3];
        for f in &self.frames {
            for (a, m) in acc.iter_mut().zip(f.pixels().channel_means()) {
                *a += m;
            }
        }
        acc.map(|a| a / self.frames.len().max(1) as f64)
    }

    pub fn tag_count(&self, tag: ScenarioTag) -> usize {
        self.objects.iter().filter(|o| o.tags.contains(&tag)).count()
    }
}

#[derive(Debug, Clone, Copy)]
enum Look {
    Car,
    Pedestrian,
    Bus,
}

#[derive(Debug, Clone)]
struct Appearance {
    look: Look,
    body: [f64; 3],
    accent: [f64; 3],
}

impl Appearance {
    fn random(rng: &mut ChaCha8Rng, class_id: usize, class_name: &str) -> Self {
        let look = match class_name {
            "pedestrian" | "person" | "cyclist" => Look::Pedestrian,
            "bus" | "truck" | "tram" => Look::Bus,
            "car" | "van" => Look::Car,
            _ => [Look::Car, Look::Pedestrian, Look::Bus][class_id % 3],
        };
        let mut color = || [rng.random_range(0.05..0.95), rng.random_range(0.05..0.95), rng.random_range(0.05..0.95)];
        Self {
            look,
            body: color(),
            accent: color(),
        }
    }

    /// Color at local coordinates in `[0, 1]²`.
    fn color(&self, lx: f64, ly: f64) -> [f64; 3] {
        const GLASS: [f64; 3] = [0.12, 0.16, 0.22];
        const TIRE: [f64; 3] = [0.05, 0.05, 0.05];
        match self.look {
            Look::Car => {
                if (0.2..0.45).contains(&ly) && (0.15..0.85).contains(&lx) {
                    GLASS
                } else if ly > 0.8 && ((0.1..0.3).contains(&lx) || (0.7..0.9).contains(&lx)) {
                    TIRE
                } else {
                    self.body
                }
            }
            Look::Pedestrian => {
                if ly < 0.25 {
                    [0.85, 0.68, 0.55]
                } else if ly < 0.65 {
                    self.body
                } else {
                    self.accent
                }
            }
            Look::Bus => {
                let window = (lx * 6.0).fract();
                if (0.15..0.45).contains(&ly) && (0.15..0.85).contains(&window) {
                    GLASS
                } else if ly > 0.85 {
                    self.accent
                } else {
                    self.body
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
struct Occluder {
    rect: [f64; 4],
    color: [f64; 3],
}

/// Accumulates `alpha · color` of a rectangle rendered with exact pixel
/// coverage.
fn splat(layer: &mut [[f64; 4]], w: usize, h: usize, rect: [f64; 4], weight: f64, look: &dyn Fn(f64, f64) -> [f64; 3]) {
    let [x1, y1, x2, y2] = rect;
    let (rw, rh) = (x2 - x1, y2 - y1);
    let px0 = x1.floor().max(0.0) as usize;
    let py0 = y1.floor().max(0.0) as usize;
    let px1 = (x2.ceil().max(0.0) as usize).min(w);
    let py1 = (y2.ceil().max(0.0) as usize).min(h);
    for py in py0..py1 {
        let cy = (y2.min(py as f64 + 1.0) - y1.max(py as f64)).max(0.0);
        if cy == 0.0 {
            continue;
        }
        let ly = ((py as f64 + 0.5 - y1) / rh).clamp(0.0, 0.999);
        for px in px0..px1 {
            let cx = (x2.min(px as f64 + 1.0) - x1.max(px as f64)).max(0.0);
            let a = cx * cy * weight;
            if a == 0.0 {
                continue;
            }
            let lx = ((px as f64 + 0.5 - x1) / rw).clamp(0.0, 0.999);
            let c = look(lx, ly);
            let cell = &mut layer[py * w + px];
            cell[0] += a * c[0];
            cell[1] += a * c[1];
            cell[2] += a * c[2];
            cell[3] += a;
        }
    }
}

fn composite(canvas: &mut [[f64; 3]], layer: &[[f64; 4]]) {
    for (px, l) in canvas.iter_mut().zip(layer) {
        let a = l[3].min(1.0);
        if a == 0.0 {
            continue;
        }
        let norm = if l[3] > 1.0 { 1.0 / l[3] } else { 1.0 };
        for c in 0..3 {
            px[c] = px[c] * (1.0 - a) + l[c] * norm;
        }
    }
}

/// Feasible start coordinate so that `start + v·t` stays within
/// `[0, extent - size]` for `t ∈ [0, frames - 1]`; shrinks `v` if needed.
fn place_axis(rng: &mut ChaCha8Rng, extent: f64, size: f64, v: &mut f64, frames: usize) -> f64 {
    let room = extent - size;
    let span = (frames.saturating_sub(1)) as f64;
    if v.abs() * span > room {
        *v = v.signum() * room / span.max(1.0) * 0.999;
    }
    let travel = *v * span;
    let lo = (-travel).max(0.0);
    let hi = (room - travel).min(room);
    if hi <= lo {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

/// Renders one annotated sequence. Pure function of `spec`.
pub fn generate_scene(spec: &SceneSpec) -> Result<AnnotatedSequence, SynthError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (w, h) = (spec.width, spec.height);
    let (wf, hf) = (w as f64, h as f64);

    let texture = sinusoid_texture(rng.random(), w, h, 0.0, 0.0);
    let bg = &spec.background;
    let mut background = vec![[0.0; 3]; w * h];
    for (i, px) in background.iter_mut().enumerate() {
        for c in 0..3 {
            let t = texture.plane(c)[i] as f64;
            px[c] = bg.base_color[c] * (1.0 - bg.texture_amplitude) + t * bg.texture_amplitude;
        }
    }

    let [lo, hi] = spec.object_count_range;
    let n_objects = rng.random_range(lo..=hi);
    let n_stationary = (spec.stationary_fraction * n_objects as f64).round() as usize;

    let mut objects = Vec::new();
    let mut looks = Vec::new();
    for id in 0..n_objects {
        let class_id = rng.random_range(0..spec.classes.len());
        let class = &spec.classes[class_id];
        let size = rng.random_range(class.size_range[0]..=class.size_range[1]);
        let (ow, oh) = object_dims(size, class.aspect);
        let stationary = id < n_stationary;
        let (mut vx, mut vy) = if stationary {
            (0.0, 0.0)
        } else {
            let smin = class.speed_range[0].max(spec.min_moving_speed);
            let smax = class.speed_range[1].max(smin);
            let speed = rng.random_range(smin..=smax);
            let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            (speed * angle.cos(), speed * angle.sin())
        };
        let x0 = place_axis(&mut rng, wf, ow, &mut vx, spec.num_frames);
        let y0 = place_axis(&mut rng, hf, oh, &mut vy, spec.num_frames);
        let mut tags = Vec::new();
        if size <= spec.small_size {
            tags.push(ScenarioTag::Small);
        }
        if stationary {
            tags.push(ScenarioTag::Stationary);
        } else if spec.blur_strength > 1 {
            tags.push(ScenarioTag::Blurred);
        }
        looks.push(Appearance::random(&mut rng, class_id, &class.name));
        objects.push(ObjectRecord {
            id,
            class_id,
            width: ow,
            height: oh,
            origin: [x0, y0],
            velocity: [vx, vy],
            annotated: true,
            tags,
        });
    }

    let mut occluders = Vec::new();
    let mut targets: Vec<usize> = (0..n_objects).collect();
    targets.shuffle(&mut rng);
    for &k in targets.iter().take(spec.occluder_count) {
        let obj = &mut objects[k];
        let [x1, y1, x2, y2] = obj.box_at((spec.num_frames / 2) as f64);
        let vertical = rng.random_bool(0.5);
        let frac = rng.random_range(0.25..=0.5);
        let rect = if vertical {
            let bw = (x2 - x1) * frac;
            let bx = rng.random_range(x1..=x2 - bw);
            [bx, (y1 - 4.0).max(0.0), bx + bw, (y2 + 4.0).min(hf)]
        } else {
            let bh = (y2 - y1) * frac;
            let by = rng.random_range(y1..=y2 - bh);
            [(x1 - 4.0).max(0.0), by, (x2 + 4.0).min(wf), by + bh]
        };
        let g = rng.random_range(0.55..0.8);
        occluders.push(Occluder { rect, color: [g, g, g * 0.95] });
        obj.tags.push(ScenarioTag::Occluded);
    }

    let mut distractors = Vec::new();
    for d in 0..spec.distractor_count {
        let class_id = rng.random_range(0..spec.classes.len());
        let class = &spec.classes[class_id];
        let size = rng.random_range(class.size_range[0]..=class.size_range[1]);
        let (ow, oh) = object_dims(size, class.aspect);
        let x0 = rng.random_range(0.0..=wf - ow);
        let y0 = rng.random_range(0.0..=hf - oh);
        distractors.push((Appearance::random(&mut rng, class_id, &class.name), [x0, y0, x0 + ow, y0 + oh]));
        objects.push(ObjectRecord {
            id: n_objects + d,
            class_id,
            width: ow,
            height: oh,
            origin: [x0, y0],
            velocity: [0.0, 0.0],
            annotated: false,
            tags: vec![ScenarioTag::Distractor],
        });
    }

    // static part: background + distractors
    let mut static_canvas = background;
    for (look, rect) in &distractors {
        let mut layer = vec![[0.0; 4]; w * h];
        splat(&mut layer, w, h, *rect, 1.0, &|lx, ly| look.color(lx, ly));
        composite(&mut static_canvas, &layer);
    }

    let mut frames = Vec::with_capacity(spec.num_frames);
    let mut annotations = Vec::with_capacity(spec.num_frames);
    let b = spec.blur_strength;
    for t in 0..spec.num_frames {
        let mut canvas = static_canvas.clone();
        for (obj, look) in objects.iter().zip(&looks) {
            let mut layer = vec![[0.0; 4]; w * h];
            let samples = if obj.velocity == [0.0, 0.0] { 1 } else { b };
            for s in 0..samples {
                let tau = t as f64 + (s as f64 + 0.5) / samples as f64 - 0.5;
                splat(&mut layer, w, h, obj.box_at(tau), 1.0 / samples as f64, &|lx, ly| look.color(lx, ly));
            }
            composite(&mut canvas, &layer);
        }
        for occ in &occluders {
            let mut layer = vec![[0.0; 4]; w * h];
            splat(&mut layer, w, h, occ.rect, 1.0, &|_, _| occ.color);
            composite(&mut canvas, &layer);
        }

        let mut pixels = Planar::zeros(w, h, 3);
        for (i, px) in canvas.iter().enumerate() {
            for c in 0..3 {
                let noise = if bg.noise_amplitude > 0.0 {
                    rng.random_range(-bg.noise_amplitude..=bg.noise_amplitude)
                } else {
                    0.0
                };
                pixels.plane_mut(c)[i] = quantize(px[c] + noise);
            }
        }
        frames.push(Frame::new(pixels, t as i64).expect("rendered frame is valid"));

        let gts = objects
            .iter()
            .filter(|o| o.annotated)
            .filter_map(|o| {
                let [x1, y1, x2, y2] = o.box_at(t as f64);
                let bbox = BBox::new(x1, y1, x2, y2).ok()?.clip(wf, hf)?;
                Some(GroundTruth {
                    object_id: o.id,
                    bbox,
                    class_id: o.class_id,
                    tags: o.tags.clone(),
                })
            })
            .collect();
        annotations.push(gts);
    }

    Ok(AnnotatedSequence {
        spec: spec.clone(),
        frames,
        annotations,
        objects,
    })
}

fn quantize(v: f64) -> f32 {
    let level = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    level as f32 / 255.0
}

#[derive(Debug, Serialize, Deserialize)]
struct SequenceMeta {
    format_version: u32,
    width: usize,
    height: usize,
    num_frames: usize,
    channel_means: [f64; 3],
    objects: Vec<ObjectRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct AnnotationRecord {
    frame: usize,
    boxes: Vec<GroundTruth>,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), SynthError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| format_err(path, e))?;
    fs::write(path, text).map_err(io_err(path))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, SynthError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| format_err(path, e))
}

/// Writes `frames/NNNNNN.png`, `annotations.jsonl`, `spec.json` and
/// `meta.json` under `dir`.
pub fn save_dataset(seq: &AnnotatedSequence, dir: &Path) -> Result<(), SynthError> {
    let frames_dir = dir.join("frames");
    fs::create_dir_all(&frames_dir).map_err(io_err(&frames_dir))?;
    for (t, frame) in seq.frames.iter().enumerate() {
        let path = frames_dir.join(format!("{t:06}.png"));
        let p = frame.pixels();
        let (w, h) = (p.width(), p.height());
        let mut buf = Vec::with_capacity(w * h * 3);
        for i in 0..w * h {
            for c in 0..3 {
                buf.push((p.plane(c)[i] * 255.0).round() as u8);
            }
        }
        image::save_buffer(&path, &buf, w as u32, h as u32, image::ColorType::Rgb8)
            .map_err(|e| format_err(&path, e))?;
    }

    let ann_path = dir.join("annotations.jsonl");
    let mut out = Vec::new();
    for (t, boxes) in seq.annotations.iter().enumerate() {
        let rec = AnnotationRecord {
            frame: t,
            boxes: boxes.clone(),
        };
        serde_json::to_writer(&mut out, &rec).map_err(|e| format_err(&ann_path, e))?;
        out.push(b'\n');
    }
    fs::File::create(&ann_path)
        .and_then(|mut f| f.write_all(&out))
        .map_err(io_err(&ann_path))?;

    write_json(&dir.join("spec.json"), &seq.spec)?;
    write_json(
        &dir.join("meta.json"),
        &SequenceMeta {
            format_version: FORMAT_VERSION,
            width: seq.spec.width,
            height: seq.spec.height,
            num_frames: seq.frames.len(),
            channel_means: seq.channel_means(),
            objects: seq.objects.clone(),
        },
    )
}

/// Channel means recorded in a saved sequence's metadata.
pub fn load_channel_means(dir: &Path) -> Result<[f64; 3], SynthError> {
    let meta: SequenceMeta = read_json(&dir.join("meta.json"))?;
    check_version(meta.format_version)?;
    Ok(meta.channel_means)
}

fn check_version(v: u32) -> Result<(), SynthError> {
    if v != FORMAT_VERSION {
        return Err(SynthError::VersionMismatch { found: v });
    }
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<AnnotatedSequence, SynthError> {
    let meta: SequenceMeta = read_json(&dir.join("meta.json"))?;
    check_version(meta.format_version)?;
    let spec: SceneSpec = read_json(&dir.join("spec.json"))?;

    let mut frames = Vec::with_capacity(meta.num_frames);
    for t in 0..meta.num_frames {
        let path = dir.join("frames").join(format!("{t:06}.png"));
        let img = image::open(&path).map_err(|e| format_err(&path, e))?.into_rgb8();
        if (img.width() as usize, img.height() as usize) != (meta.width, meta.height) {
            return Err(format_err(&path, "frame size differs from metadata"));
        }
        let (w, h) = (meta.width, meta.height);
        let mut p = Planar::zeros(w, h, 3);
        for (i, px) in img.pixels().enumerate() {
            for c in 0..3 {
                p.plane_mut(c)[i] = px.0[c] as f32 / 255.0;
            }
        }
        frames.push(Frame::new(p, t as i64).map_err(|e| format_err(&path, e))?);
    }

    let ann_path = dir.join("annotations.jsonl");
    let file = fs::File::open(&ann_path).map_err(io_err(&ann_path))?;
    let mut annotations = Vec::with_capacity(meta.num_frames);
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(&ann_path))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: AnnotationRecord =
            serde_json::from_str(&line).map_err(|e| format_err(&ann_path, format!("line {}: {e}", i + 1)))?;
        if rec.frame != annotations.len() {
            return Err(format_err(&ann_path, format!("line {}: frame {} out of order", i + 1, rec.frame)));
        }
        annotations.push(rec.boxes);
    }
    if annotations.len() != meta.num_frames {
        return Err(format_err(
            &ann_path,
            format!("{} annotation records for {} frames", annotations.len(), meta.num_frames),
        ));
    }
    Ok(AnnotatedSequence {
        spec,
        frames,
        annotations,
        objects: meta.objects,
    })
}

/// Train and test scenes drawn from one scene template.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSpec {
    pub scene: SceneSpec,
    pub train_scenes: usize,
    pub test_scenes: usize,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            scene: SceneSpec::default(),
            train_scenes: 40,
            test_scenes: 10,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub spec: CorpusSpec,
    pub train: Vec<AnnotatedSequence>,
    pub test: Vec<AnnotatedSequence>,
}

impl Corpus {
    pub fn num_classes(&self) -> usize {
        self.spec.scene.num_classes()
    }

    pub fn class_names(&self) -> Vec<String> {
        self.spec.scene.classes.iter().map(|c| c.name.clone()).collect()
    }

    /// Mean RGB over every training frame.
    pub fn channel_means(&self) -> [f64; 3] {
        let mut acc = [0.0; 3];
        for s in &self.train {
            for (a, m) in acc.iter_mut().zip(s.channel_means()) {
                *a += m;
            }
        }
        acc.map(|a| a / self.train.len().max(1) as f64)
    }

    /// Annotated instances per class over the training split.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for s in &self.train {
            for gts in &s.annotations {
                for g in gts {
                    counts[g.class_id] += 1;
                }
            }
        }
        counts
    }
}

fn scene_seed(corpus_seed: u64, split: u64, index: usize) -> u64 {
    // splitmix64 over (seed, split, index)
    let mut z = corpus_seed ^ (split << 56) ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn generate_corpus(spec: &CorpusSpec) -> Result<Corpus, SynthError> {
    let make = |split: u64, n: usize| -> Result<Vec<AnnotatedSequence>, SynthError> {
        (0..n)
            .map(|i| {
                generate_scene(&SceneSpec {
                    seed: scene_seed(spec.seed, split, i),
                    ..spec.scene.clone()
                })
            })
            .collect()
    };
    Ok(Corpus {
        spec: spec.clone(),
        train: make(1, spec.train_scenes)?,
        test: make(2, spec.test_scenes)?,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct CorpusMeta {
    format_version: u32,
    spec: CorpusSpec,
    channel_means: [f64; 3],
    class_names: Vec<String>,
}

pub fn save_corpus(corpus: &Corpus, root: &Path) -> Result<(), SynthError> {
    fs::create_dir_all(root).map_err(io_err(root))?;
    for (split, scenes) in [("train", &corpus.train), ("test", &corpus.test)] {
        for (i, s) in scenes.iter().enumerate() {
            save_dataset(s, &root.join(split).join(format!("scene_{i:04}")))?;
        }
    }
    write_json(
        &root.join("corpus.json"),
        &CorpusMeta {
            format_version: FORMAT_VERSION,
            spec: corpus.spec.clone(),
            channel_means: corpus.channel_means(),
            class_names: corpus.class_names(),
        },
    )
}

pub fn load_corpus(root: &Path) -> Result<Corpus, SynthError> {
    let meta: CorpusMeta = read_json(&root.join("corpus.json"))?;
    check_version(meta.format_version)?;
    let load_split = |split: &str, n: usize| -> Result<Vec<AnnotatedSequence>, SynthError> {
        (0..n)
            .map(|i| load_dataset(&root.join(split).join(format!("scene_{i:04}"))))
            .collect()
    };
    Ok(Corpus {
        train: load_split("train", meta.spec.train_scenes)?,
        test: load_split("test", meta.spec.test_scenes)?,
        spec: meta.spec,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec(seed: u64) -> SceneSpec {
        SceneSpec {
            width: 64,
            height: 48,
            num_frames: 6,
            classes: vec![
                ClassSpec {
                    name: "car".into(),
                    size_range: [10.0, 16.0],
                    aspect: 0.6,
                    speed_range: [0.0, 3.0],
                },
                ClassSpec {
                    name: "pedestrian".into(),
                    size_range: [4.0, 8.0],
                    aspect: 2.0,
                    speed_range: [0.0, 2.0],
                },
            ],
            object_count_range: [4, 4],
            occluder_count: 2,
            distractor_count: 2,
            seed,
            ..SceneSpec::default()
        }
    }

    #[test]
    fn empty_scene_is_pure_background() {
        let spec = SceneSpec {
            object_count_range: [0, 0],
            occluder_count: 1,
            distractor_count: 0,
            background: BackgroundSpec {
                noise_amplitude: 0.0,
                ..BackgroundSpec::default()
            },
            ..small_spec(1)
        };
        let seq = generate_scene(&spec).unwrap();
        assert!(seq.annotations.iter().all(|a| a.is_empty()));
        assert!(seq.frames.windows(2).all(|f| f[0].pixels() == f[1].pixels()));
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_scene(&small_spec(3)).unwrap();
        let b = generate_scene(&small_spec(3)).unwrap();
        assert_eq!(a, b);
        let c = generate_scene(&small_spec(4)).unwrap();
        assert_ne!(a.frames, c.frames);
    }

    #[test]
    fn boxes_follow_constant_velocity() {
        let spec = SceneSpec {
            classes: vec![ClassSpec {
                name: "car".into(),
                size_range: [12.0, 12.0],
                aspect: 0.5,
                speed_range: [2.0, 2.0],
            }],
            object_count_range: [1, 1],
            occluder_count: 0,
            distractor_count: 0,
            stationary_fraction: 0.0,
            ..small_spec(5)
        };
        let seq = generate_scene(&spec).unwrap();
        let v = seq.objects[0].velocity;
        assert!(((v[0] * v[0] + v[1] * v[1]).sqrt() - 2.0).abs() < 1e-9);
        for t in 1..seq.frames.len() {
            let a = seq.annotations[t - 1][0].bbox;
            let b = seq.annotations[t][0].bbox;
            assert!((b.x1() - a.x1() - v[0]).abs() < 1e-9);
            assert!((b.y1() - a.y1() - v[1]).abs() < 1e-9);
        }
    }

    #[test]
    fn horizontal_mover_advances_two_pixels_per_frame() {
        let obj = ObjectRecord {
            id: 0,
            class_id: 0,
            width: 8.0,
            height: 4.0,
            origin: [3.0, 5.0],
            velocity: [2.0, 0.0],
            annotated: true,
            tags: vec![],
        };
        for t in 0..5 {
            assert_eq!(obj.box_at(t as f64)[0], 3.0 + 2.0 * t as f64);
        }
    }

    #[test]
    fn boxes_are_valid_and_tags_match_parameters() {
        for seed in 0..10 {
            let spec = small_spec(seed);
            let seq = generate_scene(&spec).unwrap();
            for gts in &seq.annotations {
                for g in gts {
                    assert!(g.bbox.area() > 0.0);
                    assert!(g.bbox.x1() >= 0.0 && g.bbox.y1() >= 0.0);
                    assert!(g.bbox.x2() <= 64.0 && g.bbox.y2() <= 48.0);
                }
            }
            assert_eq!(seq.tag_count(ScenarioTag::Stationary), 1); // round(0.25 * 4)
            assert_eq!(seq.tag_count(ScenarioTag::Occluded), 2);
            assert_eq!(seq.tag_count(ScenarioTag::Distractor), 2);
            assert_eq!(seq.tag_count(ScenarioTag::Blurred), 3);
            for o in &seq.objects {
                let small = o.width.max(o.height) <= spec.small_size;
                assert_eq!(o.tags.contains(&ScenarioTag::Small), small && o.annotated);
            }
            assert!(seq.frames.iter().all(|f| f.pixels().data().iter().all(|v| (0.0..=1.0).contains(v))));
        }
    }

    #[test]
    fn invalid_specs() {
        let mut s = small_spec(0);
        s.stationary_fraction = 1.5;
        assert!(matches!(generate_scene(&s), Err(SynthError::InvalidSpec(_))));
        let mut s = small_spec(0);
        s.classes[0].size_range = [10.0, 80.0];
        assert!(matches!(generate_scene(&s), Err(SynthError::ObjectTooLarge { .. })));
        let mut s = small_spec(0);
        s.object_count_range = [5, 2];
        assert!(generate_scene(&s).is_err());
    }

    #[test]
    fn dataset_roundtrip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let seq = generate_scene(&small_spec(8)).unwrap();
        save_dataset(&seq, dir.path()).unwrap();
        assert!(dir.path().join("frames/000000.png").exists());
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded, seq);
        assert_eq!(load_channel_means(dir.path()).unwrap(), seq.channel_means());

        // truncated annotations
        let ann = dir.path().join("annotations.jsonl");
        let text = fs::read_to_string(&ann).unwrap();
        fs::write(&ann, &text[..text.len() / 2]).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(SynthError::Format { .. })));
        fs::write(&ann, &text).unwrap();

        // truncated frame
        let png = dir.path().join("frames/000002.png");
        let bytes = fs::read(&png).unwrap();
        fs::write(&png, &bytes[..bytes.len() / 3]).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(SynthError::Format { .. })));
        fs::write(&png, &bytes).unwrap();

        // unknown version
        let meta = dir.path().join("meta.json");
        let text = fs::read_to_string(&meta).unwrap();
        fs::write(&meta, text.replace("\"format_version\": 1", "\"format_version\": 9")).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(SynthError::VersionMismatch { found: 9 })));
    }

    #[test]
    fn corpus_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = CorpusSpec {
            scene: SceneSpec { num_frames: 3, ..small_spec(0) },
            train_scenes: 2,
            test_scenes: 1,
            seed: 9,
        };
        let corpus = generate_corpus(&spec).unwrap();
        assert_ne!(corpus.train[0].frames, corpus.train[1].frames);
        save_corpus(&corpus, dir.path()).unwrap();
        assert_eq!(load_corpus(dir.path()).unwrap(), corpus);
        assert_eq!(corpus.class_counts().len(), 2);
    }
}
