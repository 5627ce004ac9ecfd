//! Procedural animation clips with known ground truth.
//!
//! A clip is a handful of flat-colored shapes moving over a uniform
//! background, optionally under a camera pan, optionally with a shape that
//! enters mid-clip. Frames are rendered with 4×4 supersampled coverage;
//! sketches are the XDoG line maps of the frames' luma.

pub mod caption;
pub mod shard;
pub mod xdog;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;
pub use xdog::XdogParams;

pub const COLOR_NAMES: [&str; 8] = [
    "red", "green", "blue", "yellow", "magenta", "cyan", "orange", "purple",
];

pub const PALETTE: [[u8; 3]; 8] = [
    [220, 40, 40],
    [40, 180, 60],
    [40, 70, 220],
    [240, 220, 40],
    [220, 50, 200],
    [40, 210, 220],
    [245, 140, 30],
    [130, 50, 180],
];

pub const BACKGROUND_NAMES: [&str; 2] = ["white", "gray"];

pub const BACKGROUNDS: [[u8; 3]; 2] = [[255, 255, 255], [200, 200, 200]];

const SUPERSAMPLE: usize = 4;
const CENTER_MARGIN: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn tag(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Format(format!("unknown split tag `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

impl ShapeKind {
    const ALL: [ShapeKind; 3] = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle];

    fn contains(self, dx: f64, dy: f64, r: f64) -> bool {
        match self {
            ShapeKind::Circle => dx * dx + dy * dy <= r * r,
            ShapeKind::Square => dx.abs() <= 0.8 * r && dy.abs() <= 0.8 * r,
            ShapeKind::Triangle => {
                // apex up, circumradius r
                let s3 = 3f64.sqrt();
                dy <= 0.5 * r && s3 * dx - dy <= r && -s3 * dx - dy <= r
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    Left,
    Right,
    Up,
    Down,
}

impl Direction {
    const ALL: [Direction; 4] = [Direction::Left, Direction::Right, Direction::Up, Direction::Down];

    fn unit(self) -> (f64, f64) {
        match self {
            Direction::Left => (-1.0, 0.0),
            Direction::Right => (1.0, 0.0),
            Direction::Up => (0.0, -1.0),
            Direction::Down => (0.0, 1.0),
        }
    }
}

/// `(color, kind, direction)` combinations reserved for the test split.
pub fn is_held_out(color: u8, kind: ShapeKind, dir: Direction) -> bool {
    let k = ShapeKind::ALL.iter().position(|&x| x == kind).unwrap();
    let d = Direction::ALL.iter().position(|&x| x == dir).unwrap();
    (color as usize + 3 * k + d) % 8 == 0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Shape {
    pub kind: ShapeKind,
    /// Index into [`PALETTE`].
    pub color: u8,
    /// Center at frame 0, in pixels.
    pub start: (f64, f64),
    /// Scene-space velocity in pixels/frame; on screen the camera pan is subtracted.
    pub velocity: (f64, f64),
    pub radius: f64,
    /// First frame where the shape is present.
    pub spawn_frame: usize,
    pub direction: Direction,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub shapes: Vec<Shape>,
    /// Index into [`BACKGROUNDS`].
    pub background: u8,
    pub camera_pan: (f64, f64),
}

impl SceneSpec {
    /// On-screen center of shape `i` at frame `t`.
    pub fn center(&self, i: usize, t: usize) -> (f64, f64) {
        let s = &self.shapes[i];
        let t = t as f64;
        (
            s.start.0 + (s.velocity.0 - self.camera_pan.0) * t,
            s.start.1 + (s.velocity.1 - self.camera_pan.1) * t,
        )
    }

    pub fn visible(&self, i: usize, t: usize) -> bool {
        t >= self.shapes[i].spawn_frame
    }

    /// Largest on-screen speed of any shape, in pixels/frame.
    pub fn max_screen_speed(&self) -> f64 {
        self.shapes
            .iter()
            .map(|s| {
                let vx = s.velocity.0 - self.camera_pan.0;
                let vy = s.velocity.1 - self.camera_pan.1;
                (vx * vx + vy * vy).sqrt()
            })
            .fold(0.0, f64::max)
    }

    pub fn is_static_camera(&self) -> bool {
        self.camera_pan == (0.0, 0.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    /// Shape radius range as a fraction of the shorter frame side.
    pub radius_min: f64,
    pub radius_max: f64,
    pub speed_min: f64,
    pub speed_max: f64,
    pub pan_prob: f64,
    pub pan_max: f64,
    pub spawn_prob: f64,
    pub split: Split,
    pub xdog: XdogParams,
    /// Exact shape count, overriding the range (0 allowed).
    pub force_shapes: Option<usize>,
    /// Spawn frame for the last shape.
    pub force_spawn: Option<usize>,
    pub force_static_camera: bool,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            frames: 8,
            height: 32,
            width: 32,
            min_shapes: 1,
            max_shapes: 3,
            radius_min: 0.12,
            radius_max: 0.22,
            speed_min: 0.5,
            speed_max: 2.5,
            pan_prob: 0.3,
            pan_max: 1.0,
            spawn_prob: 0.25,
            split: Split::Train,
            xdog: XdogParams::default(),
            force_shapes: None,
            force_spawn: None,
            force_static_camera: false,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frames < 2 {
            return Err(Error::Config(format!("need at least 2 frames, got {}", self.frames)));
        }
        if self.height < 16 || self.width < 16 {
            return Err(Error::Config(format!(
                "frames of {}x{} are below the 16x16 minimum",
                self.height, self.width
            )));
        }
        if self.min_shapes > self.max_shapes || self.max_shapes > 3 || self.min_shapes < 1 {
            return Err(Error::Config(format!(
                "shape count range [{}, {}] must lie in [1, 3]",
                self.min_shapes, self.max_shapes
            )));
        }
        if let Some(n) = self.force_shapes {
            if n > 3 {
                return Err(Error::Config(format!("at most 3 shapes, got {n}")));
            }
        }
        if let Some(s) = self.force_spawn {
            if s >= self.frames {
                return Err(Error::Config(format!(
                    "spawn frame {s} outside clip of {} frames",
                    self.frames
                )));
            }
        }
        if !(0.0 < self.radius_min && self.radius_min <= self.radius_max && self.radius_max < 0.5) {
            return Err(Error::Config("radius fractions must satisfy 0 < min <= max < 0.5".into()));
        }
        if !(0.0 <= self.speed_min && self.speed_min <= self.speed_max) {
            return Err(Error::Config("speed range must satisfy 0 <= min <= max".into()));
        }
        self.xdog.validate()
    }

    pub fn with_split(&self, split: Split) -> Self {
        GenConfig {
            split,
            ..self.clone()
        }
    }
}

/// Draws the scene description for `seed`.
pub fn scene_spec(seed: u64, cfg: &GenConfig) -> Result<SceneSpec> {
    cfg.validate()?;
    let mut rng = RngStream::new(seed, "scene");
    let n = match cfg.force_shapes {
        Some(n) => n,
        None => cfg.min_shapes + rng.below(cfg.max_shapes - cfg.min_shapes + 1),
    };
    let background = rng.below(BACKGROUNDS.len()) as u8;
    let pan = if !cfg.force_static_camera && rng.uniform() < cfg.pan_prob {
        (
            rng.range(-cfg.pan_max, cfg.pan_max),
            rng.range(-cfg.pan_max, cfg.pan_max),
        )
    } else {
        (0.0, 0.0)
    };
    let side = cfg.height.min(cfg.width) as f64;
    let radii: Vec<f64> = (0..n)
        .map(|_| side * rng.range(cfg.radius_min, cfg.radius_max))
        .collect();
    let mut scene = SceneSpec {
        seed,
        shapes: Vec::with_capacity(n),
        background,
        camera_pan: pan,
    };
    // the caption describes the largest shape; it carries the split's combo rule
    let lead = radii
        .iter()
        .enumerate()
        .fold(None::<usize>, |b, (i, &r)| match b {
            Some(j) if radii[j] >= r => Some(j),
            _ => Some(i),
        });
    let span = (cfg.frames - 1) as f64;
    for (i, &radius) in radii.iter().enumerate() {
        let (color, kind, direction) = loop {
            let color = rng.below(PALETTE.len()) as u8;
            let kind = ShapeKind::ALL[rng.below(3)];
            let dir = Direction::ALL[rng.below(4)];
            let held = is_held_out(color, kind, dir);
            let ok = match cfg.split {
                Split::Train => !held,
                Split::Test => Some(i) != lead || held,
            };
            if ok {
                break (color, kind, dir);
            }
        };
        let speed = rng.range(cfg.speed_min, cfg.speed_max);
        let jitter = rng.range(-0.2, 0.2) * speed;
        let (ux, uy) = direction.unit();
        let mut v = (speed * ux - jitter * uy, speed * uy + jitter * ux);
        let mut start = (0.0, 0.0);
        for (axis, extent) in [cfg.width as f64, cfg.height as f64].into_iter().enumerate() {
            let avail = extent - 2.0 * CENTER_MARGIN;
            let comp = if axis == 0 { &mut v.0 } else { &mut v.1 };
            if comp.abs() * span > avail {
                *comp = comp.signum() * avail / span;
            }
            let disp = *comp * span;
            let lo = CENTER_MARGIN + (-disp).max(0.0);
            let hi = extent - CENTER_MARGIN - disp.max(0.0);
            let pos = rng.range(lo, hi);
            if axis == 0 {
                start.0 = pos;
            } else {
                start.1 = pos;
            }
        }
        let spawn_frame = match cfg.force_spawn {
            Some(f) if i + 1 == n => f,
            _ if n >= 2 && i + 1 == n && rng.uniform() < cfg.spawn_prob => {
                1 + rng.below(cfg.frames - 1)
            }
            _ => 0,
        };
        scene.shapes.push(Shape {
            kind,
            color,
            start,
            velocity: (v.0 + pan.0, v.1 + pan.1),
            radius,
            spawn_frame,
            direction,
        });
    }
    Ok(scene)
}

/// Fractional coverage of shape `i` over every pixel of frame `t`.
pub fn coverage(scene: &SceneSpec, cfg: &GenConfig, i: usize, t: usize) -> Vec<f64> {
    let (h, w) = (cfg.height, cfg.width);
    let mut cov = vec![0.0; h * w];
    if !scene.visible(i, t) {
        return cov;
    }
    let s = &scene.shapes[i];
    let (cx, cy) = scene.center(i, t);
    let inv = 1.0 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
    for y in 0..h {
        if (y as f64 + 1.0) < cy - s.radius - 1.0 || (y as f64) > cy + s.radius + 1.0 {
            continue;
        }
        for x in 0..w {
            let mut hits = 0;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let px = x as f64 + (sx as f64 + 0.5) / SUPERSAMPLE as f64;
                    let py = y as f64 + (sy as f64 + 0.5) / SUPERSAMPLE as f64;
                    if s.kind.contains(px - cx, py - cy, s.radius) {
                        hits += 1;
                    }
                }
            }
            cov[y * w + x] = hits as f64 * inv;
        }
    }
    cov
}

/// Per-pixel mask of where shape `i` is fully visible in frame `t`
/// (full coverage, not overlapped by any later-drawn shape).
pub fn visible_mask(scene: &SceneSpec, cfg: &GenConfig, i: usize, t: usize) -> Vec<bool> {
    let own = coverage(scene, cfg, i, t);
    let mut mask: Vec<bool> = own.iter().map(|&c| c >= 1.0).collect();
    for j in i + 1..scene.shapes.len() {
        for (m, c) in mask.iter_mut().zip(coverage(scene, cfg, j, t)) {
            if c > 0.0 {
                *m = false;
            }
        }
    }
    mask
}

/// Per-pixel mask of pixels no shape touches in frame `t`.
pub fn background_mask(scene: &SceneSpec, cfg: &GenConfig, t: usize) -> Vec<bool> {
    let mut mask = vec![true; cfg.height * cfg.width];
    for i in 0..scene.shapes.len() {
        for (m, c) in mask.iter_mut().zip(coverage(scene, cfg, i, t)) {
            if c > 0.0 {
                *m = false;
            }
        }
    }
    mask
}

/// Renders frame `t` as packed RGB bytes.
pub fn render_frame(scene: &SceneSpec, cfg: &GenConfig, t: usize) -> Vec<u8> {
    let bg = BACKGROUNDS[scene.background as usize];
    let mut px: Vec<[f64; 3]> = vec![[bg[0] as f64, bg[1] as f64, bg[2] as f64]; cfg.height * cfg.width];
    for i in 0..scene.shapes.len() {
        let col = PALETTE[scene.shapes[i].color as usize];
        for (p, a) in px.iter_mut().zip(coverage(scene, cfg, i, t)) {
            if a > 0.0 {
                for c in 0..3 {
                    p[c] = p[c] * (1.0 - a) + col[c] as f64 * a;
                }
            }
        }
    }
    px.iter()
        .flat_map(|p| p.iter().map(|&v| (v + 0.5).floor().clamp(0.0, 255.0) as u8))
        .collect()
}

/// One synthetic animation with sketches and caption.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VideoClip {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// `frames × height × width × 3` RGB bytes.
    pub rgb: Vec<u8>,
    /// `frames × height × width` sketch bytes, 0 = line, 255 = blank.
    pub sketch: Vec<u8>,
    pub caption: Vec<u16>,
    pub reference_index: usize,
}

impl VideoClip {
    pub fn frame_len(&self) -> usize {
        self.height * self.width
    }

    pub fn frame(&self, t: usize) -> &[u8] {
        let n = self.frame_len() * 3;
        &self.rgb[t * n..(t + 1) * n]
    }

    pub fn sketch_frame(&self, t: usize) -> &[u8] {
        let n = self.frame_len();
        &self.sketch[t * n..(t + 1) * n]
    }

    pub fn reference(&self) -> &[u8] {
        self.frame(self.reference_index)
    }

    /// Sketches of arbitrary RGB frames with the same layout as this clip.
    pub fn extract_sketches(
        rgb: &[u8],
        frames: usize,
        height: usize,
        width: usize,
        params: &XdogParams,
    ) -> Result<Vec<u8>> {
        let n = height * width * 3;
        if rgb.len() != frames * n {
            return Err(Error::Input(format!(
                "{} bytes do not hold {frames} frames of {height}x{width}",
                rgb.len()
            )));
        }
        let mut out = Vec::with_capacity(frames * height * width);
        for t in 0..frames {
            out.extend(xdog::sketch_frame(&rgb[t * n..(t + 1) * n], height, width, params)?);
        }
        Ok(out)
    }
}

#[derive(Clone, Debug)]
pub struct GeneratedClip {
    pub clip: VideoClip,
    pub scene: SceneSpec,
}

/// Renders the clip for `(seed, cfg)`; identical arguments give identical bytes.
pub fn gen_clip(seed: u64, cfg: &GenConfig) -> Result<GeneratedClip> {
    let scene = scene_spec(seed, cfg)?;
    let mut rgb = Vec::with_capacity(cfg.frames * cfg.height * cfg.width * 3);
    for t in 0..cfg.frames {
        rgb.extend(render_frame(&scene, cfg, t));
    }
    let sketch = VideoClip::extract_sketches(&rgb, cfg.frames, cfg.height, cfg.width, &cfg.xdog)?;
    let reference_index = match cfg.split {
        Split::Train => RngStream::new(seed, "reference").below(cfg.frames),
        Split::Test => 0,
    };
    Ok(GeneratedClip {
        clip: VideoClip {
            frames: cfg.frames,
            height: cfg.height,
            width: cfg.width,
            rgb,
            sketch,
            caption: caption::caption_of(&scene),
            reference_index,
        },
        scene,
    })
}

/// A clip plus the seed that produced it.
#[derive(Clone, Debug)]
pub struct DataItem {
    pub seed: u64,
    pub split: Split,
    pub clip: VideoClip,
}

/// Seeds of the `count` clips of a split under a master seed.
pub fn split_seeds(master_seed: u64, split: Split, count: usize) -> Vec<u64> {
    let mut rng = RngStream::new(master_seed, &format!("seeds/{}", split.tag()));
    (0..count).map(|_| rng.next_u64()).collect()
}

pub fn generate_split(
    cfg: &GenConfig,
    master_seed: u64,
    split: Split,
    count: usize,
) -> Result<Vec<DataItem>> {
    let cfg = cfg.with_split(split);
    split_seeds(master_seed, split, count)
        .into_iter()
        .map(|seed| {
            Ok(DataItem {
                seed,
                split,
                clip: gen_clip(seed, &cfg)?.clip,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn same_seed_gives_identical_bytes() {
        let cfg = GenConfig::default();
        let a = gen_clip(7, &cfg).unwrap().clip;
        let b = gen_clip(7, &cfg).unwrap().clip;
        assert_eq!(a, b);
        assert_eq!(a.rgb.len(), 8 * 32 * 32 * 3);
        assert_ne!(a, gen_clip(8, &cfg).unwrap().clip);
    }

    #[test]
    fn empty_scene_has_blank_sketches() {
        let cfg = GenConfig {
            force_shapes: Some(0),
            ..Default::default()
        };
        let g = gen_clip(3, &cfg).unwrap();
        let bg = BACKGROUNDS[g.scene.background as usize];
        assert!(g.clip.rgb.chunks(3).all(|p| p == bg));
        assert!(g.clip.sketch.iter().all(|&s| s == 255));
        assert_eq!(
            caption::words(&g.clip.caption),
            ["empty", BACKGROUND_NAMES[g.scene.background as usize], "background", "scene"]
        );
    }

    #[test]
    fn spawning_shape_is_absent_before_its_frame() {
        let cfg = GenConfig {
            force_shapes: Some(1),
            force_spawn: Some(4),
            split: Split::Test,
            ..Default::default()
        };
        let g = gen_clip(11, &cfg).unwrap();
        let bg = BACKGROUNDS[g.scene.background as usize];
        for t in 0..8 {
            let plain = g.clip.frame(t).chunks(3).all(|p| p == bg);
            assert_eq!(plain, t < 4, "frame {t}");
        }
        assert_eq!(g.clip.reference_index, 0);
        assert!(g.clip.reference().chunks(3).all(|p| p == bg));
    }

    #[test]
    fn config_limits_are_enforced() {
        for cfg in [
            GenConfig {
                frames: 1,
                ..Default::default()
            },
            GenConfig {
                height: 8,
                ..Default::default()
            },
            GenConfig {
                force_spawn: Some(8),
                ..Default::default()
            },
        ] {
            assert!(gen_clip(1, &cfg).is_err());
        }
    }

    #[test]
    fn test_split_leads_with_held_out_combo() {
        let train = GenConfig::default();
        let test = train.with_split(Split::Test);
        for seed in 0..40 {
            let s = scene_spec(seed, &train).unwrap();
            assert!(s.shapes.iter().all(|x| !is_held_out(x.color, x.kind, x.direction)));
            let s = scene_spec(seed, &test).unwrap();
            let lead = &s.shapes[caption::lead_shape(&s).unwrap()];
            assert!(is_held_out(lead.color, lead.kind, lead.direction));
        }
    }

    #[test]
    fn caption_follows_template() {
        let scene = SceneSpec {
            seed: 0,
            shapes: vec![
                Shape {
                    kind: ShapeKind::Triangle,
                    color: 2,
                    start: (5.0, 5.0),
                    velocity: (0.0, 1.0),
                    radius: 3.0,
                    spawn_frame: 0,
                    direction: Direction::Down,
                },
                Shape {
                    kind: ShapeKind::Circle,
                    color: 0,
                    start: (10.0, 10.0),
                    velocity: (1.0, 0.0),
                    radius: 5.0,
                    spawn_frame: 0,
                    direction: Direction::Right,
                },
            ],
            background: 0,
            camera_pan: (0.0, 0.0),
        };
        let ids = caption::caption_of(&scene);
        assert_eq!(ids.len(), caption::CAPTION_LEN);
        assert_eq!(
            caption::words(&ids).join(" "),
            "red circle moving right on white background"
        );
        assert_eq!(ids[0], caption::BOS);
        assert!(ids[8..].iter().all(|&i| i == caption::PAD));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn centroids_stay_in_frame(seed in any::<u64>(), test in any::<bool>()) {
            let cfg = GenConfig::default().with_split(if test { Split::Test } else { Split::Train });
            let s = scene_spec(seed, &cfg).unwrap();
            prop_assert!((1..=3).contains(&s.shapes.len()));
            for i in 0..s.shapes.len() {
                prop_assert!(s.shapes[i].spawn_frame < cfg.frames);
                for t in 0..cfg.frames {
                    let (x, y) = s.center(i, t);
                    prop_assert!(x >= 0.0 && x <= cfg.width as f64, "x={}", x);
                    prop_assert!(y >= 0.0 && y <= cfg.height as f64, "y={}", y);
                }
            }
        }

        #[test]
        fn stored_sketches_are_reproducible(seed in any::<u64>()) {
            let cfg = GenConfig::default();
            let c = gen_clip(seed, &cfg).unwrap().clip;
            let again = VideoClip::extract_sketches(&c.rgb, c.frames, c.height, c.width, &cfg.xdog).unwrap();
            prop_assert_eq!(again, c.sketch);
        }
    }
}
