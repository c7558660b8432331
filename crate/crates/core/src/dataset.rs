//! The stochastic-movement shapes benchmark.
//!
//! Each video shows one hard-edged shape, centered in frame 0, sliding a
//! fixed integer number of pixels per frame in one of eight directions over a
//! flat gray background.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sv2p_autodiff::{par, Exec};

use crate::error::{invalid, io_err, Error, Result};
use crate::rng::{self, Domain};

pub const BACKGROUND: f32 = 0.5;
/// Minimum max-channel distance between a shape color and the background.
pub const MIN_COLOR_CONTRAST: f32 = 0.2;
pub const MAGIC: &[u8; 4] = b"SVDS";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 4 + 2 * 4 + 1 + 8 + 2;
pub const ACTION_DIM: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Direction {
    N,
    NE,
    E,
    SE,
    S,
    SW,
    W,
    NW,
}

impl Direction {
    pub const ALL: [Direction; 8] = [
        Direction::N,
        Direction::NE,
        Direction::E,
        Direction::SE,
        Direction::S,
        Direction::SW,
        Direction::W,
        Direction::NW,
    ];

    /// Unit step as `(rows, cols)`; rows grow downward.
    pub fn step(self) -> (i32, i32) {
        match self {
            Direction::N => (-1, 0),
            Direction::NE => (-1, 1),
            Direction::E => (0, 1),
            Direction::SE => (1, 1),
            Direction::S => (1, 0),
            Direction::SW => (1, -1),
            Direction::W => (0, -1),
            Direction::NW => (-1, -1),
        }
    }

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&d| d == self).unwrap()
    }

    pub fn name(self) -> &'static str {
        match self {
            Direction::N => "N",
            Direction::NE => "NE",
            Direction::E => "E",
            Direction::SE => "SE",
            Direction::S => "S",
            Direction::SW => "SW",
            Direction::W => "W",
            Direction::NW => "NW",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Triangle,
    Rectangle,
    Circle,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShapeSpec {
    pub kind: ShapeKind,
    /// Radius or half-extent in pixels.
    pub size: u32,
    /// Rectangle height relative to its width; unused by other kinds.
    pub aspect: f32,
    pub color: [f32; 3],
    pub direction: Direction,
    /// Pixels per frame along each nonzero axis of the direction.
    pub speed: u32,
}

impl ShapeSpec {
    fn contains(&self, ry: f32, rx: f32) -> bool {
        let s = self.size as f32;
        match self.kind {
            ShapeKind::Circle => ry * ry + rx * rx <= s * s,
            ShapeKind::Rectangle => rx.abs() <= s && ry.abs() <= s * self.aspect,
            ShapeKind::Triangle => ry.abs() <= s && rx.abs() <= (ry + s) * 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShapesConfig {
    pub resolution: usize,
    pub frames: usize,
    pub displacement: u32,
    pub size_min: u32,
    pub size_max: u32,
    pub actions: bool,
}

impl Default for ShapesConfig {
    fn default() -> Self {
        Self::for_resolution(64)
    }
}

impl ShapesConfig {
    /// Sizes and speed scaled from the 64×64 defaults (half-extent 6..=12, 4 px/frame).
    pub fn for_resolution(resolution: usize) -> Self {
        let r = resolution as u32;
        Self {
            resolution,
            frames: 4,
            displacement: (r / 16).max(1),
            size_min: (6 * r / 64).max(1),
            size_max: (12 * r / 64).max(1),
            actions: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution < 16 {
            return invalid(format!("resolution {} is below the minimum of 16", self.resolution));
        }
        if self.frames < 2 {
            return invalid(format!("videos need at least 2 frames, got {}", self.frames));
        }
        if self.size_min == 0 || self.size_min > self.size_max {
            return invalid(format!("bad size range [{}, {}]", self.size_min, self.size_max));
        }
        self.check_fits(self.size_max, self.displacement)
    }

    fn check_fits(&self, size: u32, speed: u32) -> Result<()> {
        let reach = size as usize + speed as usize * (self.frames - 1);
        let room = self.resolution / 2 - 1;
        if reach > room {
            return invalid(format!(
                "a shape of half-extent {size} moving {speed} px/frame for {} frames reaches {reach} px from \
                 the center, but a {res}x{res} frame allows {room}",
                self.frames - 1,
                res = self.resolution
            ));
        }
        Ok(())
    }
}

/// `T` frames of `H×W×C` pixels in `[0, 1]`, frame-major, plus optional actions.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoSequence {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub pixels: Vec<f32>,
    /// `frames × ACTION_DIM` values when present.
    pub actions: Option<Vec<f32>>,
}

impl VideoSequence {
    pub fn frame_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        let n = self.frame_len();
        &self.pixels[t * n..(t + 1) * n]
    }

    pub fn action(&self, t: usize) -> Option<&[f32]> {
        self.actions.as_ref().map(|a| &a[t * ACTION_DIM..(t + 1) * ACTION_DIM])
    }

    /// The first `frames` frames (and actions).
    pub fn truncated(&self, frames: usize) -> Result<VideoSequence> {
        if frames > self.frames {
            return invalid(format!("video has {} frames, {frames} requested", self.frames));
        }
        Ok(VideoSequence {
            frames,
            pixels: self.pixels[..frames * self.frame_len()].to_vec(),
            actions: self.actions.as_ref().map(|a| a[..frames * ACTION_DIM].to_vec()),
            ..*self
        })
    }
}

fn draw_color(rng: &mut ChaCha8Rng) -> [f32; 3] {
    loop {
        let c: [f32; 3] = [rng.random(), rng.random(), rng.random()];
        let dist = c.iter().map(|v| (v - BACKGROUND).abs()).fold(0.0, f32::max);
        if dist >= MIN_COLOR_CONTRAST {
            return c;
        }
    }
}

pub fn sample_spec(rng: &mut ChaCha8Rng, config: &ShapesConfig) -> ShapeSpec {
    let kind = [ShapeKind::Triangle, ShapeKind::Rectangle, ShapeKind::Circle][rng.random_range(0..3)];
    let size = rng.random_range(config.size_min..=config.size_max);
    let aspect = rng.random_range(0.5f32..=1.0);
    let color = draw_color(rng);
    let direction = Direction::ALL[rng.random_range(0..8)];
    ShapeSpec {
        kind,
        size,
        aspect,
        color,
        direction,
        speed: config.displacement,
    }
}

/// Coarse action for a direction: the horizontal component when there is
/// one, else the vertical one. NE, E and SE all map to `(1, 0)`.
pub fn action_for(direction: Direction) -> [f32; 2] {
    let (dy, dx) = direction.step();
    if dx != 0 {
        [dx as f32, 0.0]
    } else {
        [0.0, dy as f32]
    }
}

pub fn annotate_actions(spec: &ShapeSpec, frames: usize) -> Vec<f32> {
    action_for(spec.direction).repeat(frames)
}

/// Draws the video described by `spec`.
pub fn render_video(spec: &ShapeSpec, config: &ShapesConfig) -> Result<VideoSequence> {
    if config.resolution < 16 || config.frames < 1 {
        return invalid(format!(
            "cannot render {} frames at resolution {}",
            config.frames, config.resolution
        ));
    }
    config.check_fits(spec.size, spec.speed)?;
    let (h, w, c) = (config.resolution, config.resolution, 3);
    let (dy, dx) = spec.direction.step();
    let mut pixels = vec![BACKGROUND; config.frames * h * w * c];
    for t in 0..config.frames {
        let shift = (t as u32 * spec.speed) as f32;
        let cy = (h / 2) as f32 + dy as f32 * shift;
        let cx = (w / 2) as f32 + dx as f32 * shift;
        let frame = &mut pixels[t * h * w * c..][..h * w * c];
        for y in 0..h {
            for x in 0..w {
                if spec.contains(y as f32 + 0.5 - cy, x as f32 + 0.5 - cx) {
                    frame[(y * w + x) * c..][..c].copy_from_slice(&spec.color);
                }
            }
        }
    }
    Ok(VideoSequence {
        frames: config.frames,
        height: h,
        width: w,
        channels: c,
        pixels,
        actions: config.actions.then(|| annotate_actions(spec, config.frames)),
    })
}

pub fn generate_video(rng: &mut ChaCha8Rng, config: &ShapesConfig) -> Result<(VideoSequence, ShapeSpec)> {
    config.validate()?;
    let spec = sample_spec(rng, config);
    Ok((render_video(&spec, config)?, spec))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetHeader {
    pub version: u32,
    pub count: u32,
    pub frames: u16,
    pub height: u16,
    pub width: u16,
    pub channels: u16,
    pub actions: bool,
    /// Video `i` was drawn from seed `first_seed + i`.
    pub first_seed: u64,
    pub displacement: u16,
}

impl DatasetHeader {
    pub fn seed_range(&self) -> std::ops::Range<u64> {
        self.first_seed..self.first_seed + self.count as u64
    }

    fn frame_bytes(&self) -> usize {
        self.height as usize * self.width as usize * self.channels as usize
    }

    fn payload_len(&self) -> usize {
        let n = self.count as usize;
        let pixels = n * self.frames as usize * self.frame_bytes();
        let actions = if self.actions { n * self.frames as usize * ACTION_DIM * 4 } else { 0 };
        pixels + actions
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub videos: Vec<VideoSequence>,
    /// Ground-truth specs; only known for freshly generated data.
    pub specs: Vec<ShapeSpec>,
}

/// Generates `n` videos; video `i` uses its own stream keyed by `seed + i`.
pub fn generate_dataset(n: usize, seed: u64, config: &ShapesConfig, exec: Exec) -> Result<Dataset> {
    config.validate()?;
    let count = u32::try_from(n).map_err(|_| Error::Invalid(format!("{n} videos exceed the format limit")))?;
    let results = par::map_indexed(exec, n, |i| {
        let mut rng = rng::stream(seed.wrapping_add(i as u64), Domain::Video, 0);
        generate_video(&mut rng, config)
    });
    let mut videos = Vec::with_capacity(n);
    let mut specs = Vec::with_capacity(n);
    for r in results {
        let (v, s) = r?;
        videos.push(v);
        specs.push(s);
    }
    Ok(Dataset {
        header: DatasetHeader {
            version: FORMAT_VERSION,
            count,
            frames: config.frames as u16,
            height: config.resolution as u16,
            width: config.resolution as u16,
            channels: 3,
            actions: config.actions,
            first_seed: seed,
            displacement: config.displacement as u16,
        },
        videos,
        specs,
    })
}

pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

impl Dataset {
    pub fn to_bytes(&self) -> Vec<u8> {
        let h = &self.header;
        let mut out = Vec::with_capacity(HEADER_LEN + h.payload_len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&h.version.to_le_bytes());
        out.extend_from_slice(&h.count.to_le_bytes());
        for d in [h.frames, h.height, h.width, h.channels] {
            out.extend_from_slice(&d.to_le_bytes());
        }
        out.push(h.actions as u8);
        out.extend_from_slice(&h.first_seed.to_le_bytes());
        out.extend_from_slice(&h.displacement.to_le_bytes());
        for v in &self.videos {
            out.extend(v.pixels.iter().map(|&p| quantize(p)));
        }
        if h.actions {
            for v in &self.videos {
                for a in v.actions.as_deref().unwrap_or(&[]) {
                    out.extend_from_slice(&a.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: String| Error::Format(format!("dataset: {msg}"));
        if bytes.len() < HEADER_LEN {
            return Err(bad(format!("{} bytes is shorter than the {HEADER_LEN}-byte header", bytes.len())));
        }
        if &bytes[..4] != MAGIC {
            return Err(bad(format!("bad magic {:?}", &bytes[..4])));
        }
        let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let header = DatasetHeader {
            version: u32_at(4),
            count: u32_at(8),
            frames: u16_at(12),
            height: u16_at(14),
            width: u16_at(16),
            channels: u16_at(18),
            actions: match bytes[20] {
                0 => false,
                1 => true,
                f => return Err(bad(format!("action flag must be 0 or 1, got {f}"))),
            },
            first_seed: u64::from_le_bytes(bytes[21..29].try_into().unwrap()),
            displacement: u16_at(29),
        };
        if header.version != FORMAT_VERSION {
            return Err(bad(format!("unsupported version {}", header.version)));
        }
        let expected = HEADER_LEN + header.payload_len();
        if bytes.len() != expected {
            return Err(bad(format!(
                "header describes {expected} bytes but the file has {}",
                bytes.len()
            )));
        }
        let (t, fb) = (header.frames as usize, header.frame_bytes());
        let video_bytes = t * fb;
        let mut offset = HEADER_LEN;
        let mut videos = Vec::with_capacity(header.count as usize);
        for _ in 0..header.count {
            let pixels = bytes[offset..offset + video_bytes].iter().map(|&b| b as f32 / 255.0).collect();
            offset += video_bytes;
            videos.push(VideoSequence {
                frames: t,
                height: header.height as usize,
                width: header.width as usize,
                channels: header.channels as usize,
                pixels,
                actions: None,
            });
        }
        if header.actions {
            for v in &mut videos {
                let n = t * ACTION_DIM;
                let a = bytes[offset..offset + 4 * n]
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                offset += 4 * n;
                v.actions = Some(a);
            }
        }
        Ok(Dataset {
            header,
            videos,
            specs: Vec::new(),
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(io_err(path))?;
        f.write_all(&self.to_bytes()).map_err(io_err(path))?;
        f.sync_all().map_err(io_err(path))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(io_err(path))?;
        Self::from_bytes(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }

    pub fn len(&self) -> usize {
        self.videos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.videos.is_empty()
    }
}

/// Outcome of matching a frame pair against the eight canonical motions.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionVerdict {
    /// `None` when the motion is ambiguous, blurry or absent.
    pub direction: Option<Direction>,
    /// Best-matching direction regardless of the verdict.
    pub best: Direction,
    /// `(second-best error − best error) / static error`, 0 when static.
    pub confidence: f32,
    pub best_error: f32,
    /// Mean absolute difference between the two frames as given.
    pub static_error: f32,
    /// Mean absolute difference per direction, in [`Direction::ALL`] order.
    pub errors: [f32; 8],
}

/// Largest `best_error / static_error` still accepted as a clean motion.
pub const DEFAULT_AMBIGUITY_RATIO: f32 = 0.5;

fn shifted_mad(a: &[f32], b: &[f32], h: usize, w: usize, c: usize, dy: i32, dx: i32) -> f32 {
    let mut sum = 0.0f64;
    for y in 0..h {
        let sy = (y as i32 - dy).clamp(0, h as i32 - 1) as usize;
        for x in 0..w {
            let sx = (x as i32 - dx).clamp(0, w as i32 - 1) as usize;
            let pa = &a[(sy * w + sx) * c..][..c];
            let pb = &b[(y * w + x) * c..][..c];
            for (u, v) in pa.iter().zip(pb) {
                sum += (u - v).abs() as f64;
            }
        }
    }
    (sum / (h * w * c) as f64) as f32
}

/// Finds the direction whose `displacement`-pixel shift of `first` best
/// explains `second`.
///
/// The verdict is ambiguous when no motion is needed to explain the pair or
/// when the best shift leaves more than `max_ratio` of the static error.
pub fn classify_pair(
    first: &[f32],
    second: &[f32],
    height: usize,
    width: usize,
    channels: usize,
    displacement: u32,
    max_ratio: f32,
) -> MotionVerdict {
    let d = displacement as i32;
    let static_error = shifted_mad(first, second, height, width, channels, 0, 0);
    let mut errors = [0.0f32; 8];
    for (e, dir) in errors.iter_mut().zip(Direction::ALL) {
        let (dy, dx) = dir.step();
        *e = shifted_mad(first, second, height, width, channels, dy * d, dx * d);
    }
    let mut order: Vec<usize> = (0..8).collect();
    order.sort_by(|&i, &j| errors[i].total_cmp(&errors[j]).then(i.cmp(&j)));
    let (best, second_best) = (errors[order[0]], errors[order[1]]);
    let moving = static_error > 0.0 && best < static_error;
    let confidence = if static_error > 0.0 { (second_best - best) / static_error } else { 0.0 };
    let clean = moving && best <= max_ratio * static_error && second_best > best;
    MotionVerdict {
        direction: clean.then_some(Direction::ALL[order[0]]),
        best: Direction::ALL[order[0]],
        confidence,
        best_error: best,
        static_error,
        errors,
    }
}

/// Classifies the motion between frames 0 and 1 of `video`.
pub fn classify_motion(video: &VideoSequence, displacement: u32) -> Result<MotionVerdict> {
    if video.frames < 2 {
        return invalid("motion classification needs at least 2 frames");
    }
    Ok(classify_pair(
        video.frame(0),
        video.frame(1),
        video.height,
        video.width,
        video.channels,
        displacement,
        DEFAULT_AMBIGUITY_RATIO,
    ))
}
