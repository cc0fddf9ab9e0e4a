//! Synthetic multi-modal clips with known latent classes.
//!
//! Each clip shows a Gaussian blob drifting across a small frame. Its heading
//! and speed are set by the class; start offset, amplitude, tint and noise are
//! per-clip jitter. Grey and flow are derived from RGB exactly, and the audio
//! track is a class-keyed sinusoid whose phase follows the blob.

use std::f64::consts::PI;
use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::{self, stream, Rng};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct DatasetSpec {
    pub n_clips: usize,
    pub classes: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub audio_len: usize,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            n_clips: 2000,
            classes: 8,
            frames: 8,
            height: 8,
            width: 8,
            audio_len: 64,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.frames < 4 {
            problems.push(format!("frames = {} (need >= 4)", self.frames));
        }
        if self.classes < 2 {
            problems.push(format!("classes = {} (need >= 2)", self.classes));
        }
        for (name, v) in [
            ("n_clips", self.n_clips),
            ("height", self.height),
            ("width", self.width),
            ("audio_len", self.audio_len),
        ] {
            if v == 0 {
                problems.push(format!("{name} must be >= 1"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidSpec(problems.join(", ")))
        }
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn rgb_dim(&self) -> usize {
        self.frames * 3 * self.pixels()
    }

    pub fn grey_dim(&self) -> usize {
        self.frames * self.pixels()
    }

    pub fn flow_dim(&self) -> usize {
        (self.frames - 1) * 2 * self.pixels()
    }

    /// Same geometry, different size and seed.
    pub fn with(&self, n_clips: usize, seed: u64) -> Self {
        Self {
            n_clips,
            seed,
            ..*self
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiModalClip {
    /// `T×3×H×W`, values in `[0, 1]`.
    pub rgb: Tensor,
    /// `T×1×H×W`.
    pub grey: Tensor,
    /// `(T−1)×2×H×W`, values in `[−1, 1]`.
    pub flow: Tensor,
    /// `A`, values in `[−1, 1]`.
    pub audio: Tensor,
    pub class_id: usize,
    pub clip_id: usize,
}

/// Whether per-clip nuisance variation is applied when rendering.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Jitter {
    On,
    /// Debug rendering: fixed start, amplitude and tint, no noise.
    Off,
}

const BACKGROUND: f64 = 0.1;
const PIXEL_NOISE: f64 = 0.1;
const AUDIO_NOISE: f64 = 0.05;
const START_JITTER: f64 = 1.5;
const PHASE_PER_PIXEL: f64 = 0.5;
/// The blob brightens from `1 − AMP_RAMP` to `1 + AMP_RAMP` of its amplitude
/// over the clip, so a clip played backwards differs from any forward clip.
const AMP_RAMP: f64 = 0.3;

/// Amplitude multiplier at frame `t`.
pub fn amplitude_ramp(t: usize, frames: usize) -> f64 {
    if frames < 2 {
        return 1.0;
    }
    1.0 + AMP_RAMP * (2.0 * t as f64 / (frames - 1) as f64 - 1.0)
}

/// Velocity in pixels per frame, as `(dx, dy)`.
pub fn class_velocity(class_id: usize, classes: usize) -> (f64, f64) {
    let theta = 2.0 * PI * class_id as f64 / classes as f64;
    let speed = if class_id.is_multiple_of(2) { 1.0 } else { 0.6 };
    (speed * theta.cos(), speed * theta.sin())
}

/// Audio cycles per clip for a class.
pub fn class_frequency(class_id: usize, audio_len: usize) -> f64 {
    let span = (audio_len / 2).saturating_sub(2).max(1);
    (2 + class_id % span) as f64
}

fn blob_sigma(spec: &DatasetSpec) -> f64 {
    0.125 * spec.height.max(spec.width) as f64
}

/// Blob center at (continuous) frame time `t` for a given start point.
fn blob_center(start: (f64, f64), vel: (f64, f64), t: f64) -> (f64, f64) {
    (start.0 + vel.0 * t, start.1 + vel.1 * t)
}

/// Start point placing the trajectory midpoint at the frame center.
pub fn nominal_start(class_id: usize, spec: &DatasetSpec) -> (f64, f64) {
    let vel = class_velocity(class_id, spec.classes);
    let half = (spec.frames - 1) as f64 / 2.0;
    let cx = (spec.width - 1) as f64 / 2.0;
    let cy = (spec.height - 1) as f64 / 2.0;
    (cx - vel.0 * half, cy - vel.1 * half)
}

pub fn gen_clip(class_id: usize, clip_seed: u64, spec: &DatasetSpec) -> MultiModalClip {
    gen_clip_with(class_id, clip_seed, spec, Jitter::On)
}

pub fn gen_clip_with(class_id: usize, clip_seed: u64, spec: &DatasetSpec, jitter: Jitter) -> MultiModalClip {
    assert!(class_id < spec.classes, "class_id {class_id} >= {}", spec.classes);
    let mut r = rng::rng(spec.seed, &[stream::CLIP, clip_seed]);
    let (t_n, h, w, a_n) = (spec.frames, spec.height, spec.width, spec.audio_len);
    let vel = class_velocity(class_id, spec.classes);
    let mut start = nominal_start(class_id, spec);
    let (amp, tint, audio_amp) = match jitter {
        Jitter::Off => (0.7, [1.0; 3], 0.8),
        Jitter::On => {
            start.0 += r.random_range(-START_JITTER..=START_JITTER);
            start.1 += r.random_range(-START_JITTER..=START_JITTER);
            let tint = [
                r.random_range(0.4..=1.0),
                r.random_range(0.4..=1.0),
                r.random_range(0.4..=1.0),
            ];
            (r.random_range(0.5..=0.9), tint, r.random_range(0.6..=0.9))
        }
    };
    let sigma2 = 2.0 * blob_sigma(spec).powi(2);

    let mut rgb = vec![0.0; spec.rgb_dim()];
    let plane = h * w;
    for t in 0..t_n {
        let (px, py) = blob_center(start, vel, t as f64);
        let ramp = amplitude_ramp(t, t_n);
        for y in 0..h {
            for x in 0..w {
                let d2 = (x as f64 - px).powi(2) + (y as f64 - py).powi(2);
                let blob = amp * ramp * (-d2 / sigma2).exp();
                for (c, tc) in tint.iter().enumerate() {
                    let noise = match jitter {
                        Jitter::On => r.random_range(-PIXEL_NOISE..=PIXEL_NOISE),
                        Jitter::Off => 0.0,
                    };
                    let v = BACKGROUND + blob * tc + noise;
                    rgb[(t * 3 + c) * plane + y * w + x] = v.clamp(0.0, 1.0);
                }
            }
        }
    }
    let rgb = Tensor::new(vec![t_n, 3, h, w], rgb).expect("rgb extents");

    let freq = class_frequency(class_id, a_n);
    let nominal = nominal_start(class_id, spec);
    let mut audio = Vec::with_capacity(a_n);
    for s in 0..a_n {
        let ts = if a_n > 1 {
            s as f64 * (t_n - 1) as f64 / (a_n - 1) as f64
        } else {
            0.0
        };
        let (px, py) = blob_center(start, vel, ts);
        let (nx, ny) = blob_center(nominal, vel, ts);
        // phase tracks the blob's offset from its nominal path plus its progress
        let locked = PHASE_PER_PIXEL * ((px - nx) + (py - ny)) + PHASE_PER_PIXEL * ts;
        let carrier = 2.0 * PI * freq * s as f64 / a_n as f64;
        let noise = match jitter {
            Jitter::On => r.random_range(-AUDIO_NOISE..=AUDIO_NOISE),
            Jitter::Off => 0.0,
        };
        audio.push((audio_amp * (carrier + locked).sin() + noise).clamp(-1.0, 1.0));
    }

    let grey = derive_grey(&rgb);
    let flow = derive_flow_from_grey(&grey);
    MultiModalClip {
        rgb,
        grey,
        flow,
        audio: Tensor::vector(audio),
        class_id,
        clip_id: clip_seed as usize,
    }
}

/// Channel mean of a `T×3×H×W` tensor.
pub fn derive_grey(rgb: &Tensor) -> Tensor {
    let s = rgb.shape();
    let (t_n, h, w) = (s[0], s[2], s[3]);
    let plane = h * w;
    let d = rgb.data();
    let mut grey = Vec::with_capacity(t_n * plane);
    for t in 0..t_n {
        let base = t * 3 * plane;
        for p in 0..plane {
            grey.push((d[base + p] + d[base + plane + p] + d[base + 2 * plane + p]) / 3.0);
        }
    }
    Tensor::new(vec![t_n, 1, h, w], grey).expect("grey extents")
}

pub fn derive_flow(rgb: &Tensor) -> Tensor {
    derive_flow_from_grey(&derive_grey(rgb))
}

/// Channel 0: `grey[t+1] − grey[t]`. Channel 1: `grey[t+1]` sampled one pixel
/// to the right (zero past the border) minus `grey[t]`. Clamped to `[−1, 1]`.
pub fn derive_flow_from_grey(grey: &Tensor) -> Tensor {
    let s = grey.shape();
    let (t_n, h, w) = (s[0], s[2], s[3]);
    assert!(t_n >= 2, "flow needs at least two frames");
    let plane = h * w;
    let g = grey.data();
    let mut flow = vec![0.0; (t_n - 1) * 2 * plane];
    for t in 0..t_n - 1 {
        let cur = &g[t * plane..(t + 1) * plane];
        let next = &g[(t + 1) * plane..(t + 2) * plane];
        let out = &mut flow[t * 2 * plane..(t + 1) * 2 * plane];
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                out[p] = (next[p] - cur[p]).clamp(-1.0, 1.0);
                let shifted = if x + 1 < w { next[p + 1] } else { 0.0 };
                out[plane + p] = (shifted - cur[p]).clamp(-1.0, 1.0);
            }
        }
    }
    Tensor::new(vec![t_n - 1, 2, h, w], flow).expect("flow extents")
}

/// Which kind of negative audio to produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Misalignment {
    OtherClip,
    /// Cyclic shift of the clip's own audio by the given number of samples.
    Shift(usize),
}

/// Draws a negative audio track for `clip`: either another pool clip's audio
/// or the clip's own audio cyclically shifted by at least a quarter length.
/// The aligned track itself is never returned.
pub fn sample_misaligned_audio(clip: &MultiModalClip, pool: &[MultiModalClip], seed: u64) -> Result<Tensor> {
    let mut r = rng::rng(seed, &[clip.clip_id as u64]);
    misaligned_audio(clip, pool, &mut r)
}

pub(crate) fn misaligned_audio(clip: &MultiModalClip, pool: &[MultiModalClip], r: &mut Rng) -> Result<Tensor> {
    if pool.len() < 2 {
        return Err(Error::PoolTooSmall(pool.len()));
    }
    let a_n = clip.audio.len();
    let kind = if r.random_bool(0.5) {
        Misalignment::OtherClip
    } else {
        let lo = (a_n / 4).max(1);
        let hi = a_n - lo;
        Misalignment::Shift(if hi > lo { r.random_range(lo..=hi) } else { lo })
    };
    let out = misaligned_audio_with(clip, pool, kind, r)?;
    if out.data() != clip.audio.data() {
        return Ok(out);
    }
    // the chosen branch reproduced the aligned track, try the other one
    let fallback = match kind {
        Misalignment::OtherClip => Misalignment::Shift((a_n / 2).max(1)),
        Misalignment::Shift(_) => Misalignment::OtherClip,
    };
    let out = misaligned_audio_with(clip, pool, fallback, r)?;
    if out.data() == clip.audio.data() {
        // every candidate equals the aligned track; perturb deterministically
        return Ok(out.map(|v| -v));
    }
    Ok(out)
}

/// Negative audio for a fixed branch.
pub fn misaligned_audio_with(
    clip: &MultiModalClip,
    pool: &[MultiModalClip],
    kind: Misalignment,
    r: &mut Rng,
) -> Result<Tensor> {
    if pool.len() < 2 {
        return Err(Error::PoolTooSmall(pool.len()));
    }
    match kind {
        Misalignment::OtherClip => {
            let others: Vec<&MultiModalClip> = pool.iter().filter(|c| c.clip_id != clip.clip_id).collect();
            let candidates = if others.is_empty() { pool.iter().collect() } else { others };
            let pick = candidates[r.random_range(0..candidates.len())];
            Ok(pick.audio.clone())
        }
        Misalignment::Shift(k) => {
            let d = clip.audio.data();
            let n = d.len();
            Ok(Tensor::vector((0..n).map(|i| d[(i + n - k % n) % n]).collect()))
        }
    }
}

/// `n_clips` clips, classes assigned round-robin and then shuffled.
pub fn gen_dataset(spec: &DatasetSpec) -> Result<Vec<MultiModalClip>> {
    spec.validate()?;
    let mut classes: Vec<usize> = (0..spec.n_clips).map(|i| i % spec.classes).collect();
    classes.shuffle(&mut rng::rng(spec.seed, &[stream::DATASET_SHUFFLE]));
    Ok(classes
        .into_iter()
        .enumerate()
        .map(|(i, c)| gen_clip(c, i as u64, spec))
        .collect())
}

const MAGIC: &[u8; 4] = b"EVML";
const FORMAT_VERSION: u16 = 1;

/// Writes the binary dataset format: magic, version, the spec as
/// little-endian `u32`s (seed split into low and high words), then every clip
/// as little-endian `f32`s in the order rgb, grey, flow, audio, followed by
/// its class id as `u32`.
pub fn write_dataset<W: Write>(mut out: W, spec: &DatasetSpec, clips: &[MultiModalClip]) -> std::io::Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&FORMAT_VERSION.to_le_bytes())?;
    let header = [
        clips.len() as u32,
        spec.classes as u32,
        spec.frames as u32,
        spec.height as u32,
        spec.width as u32,
        spec.audio_len as u32,
        spec.seed as u32,
        (spec.seed >> 32) as u32,
    ];
    for v in header {
        out.write_all(&v.to_le_bytes())?;
    }
    let mut buf = Vec::new();
    for clip in clips {
        buf.clear();
        for t in [&clip.rgb, &clip.grey, &clip.flow, &clip.audio] {
            for &v in t.data() {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        buf.extend_from_slice(&(clip.class_id as u32).to_le_bytes());
        out.write_all(&buf)?;
    }
    Ok(())
}

pub fn read_dataset<R: Read>(mut input: R) -> Result<(DatasetSpec, Vec<MultiModalClip>)> {
    let io = |e: std::io::Error| Error::format("dataset file", e.to_string());
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(Error::format("dataset file", "bad magic"));
    }
    let mut v2 = [0u8; 2];
    input.read_exact(&mut v2).map_err(io)?;
    let version = u16::from_le_bytes(v2);
    if version != FORMAT_VERSION {
        return Err(Error::format("dataset file", format!("unsupported version {version}")));
    }
    let mut words = [0u32; 8];
    for w in words.iter_mut() {
        let mut b = [0u8; 4];
        input.read_exact(&mut b).map_err(io)?;
        *w = u32::from_le_bytes(b);
    }
    let spec = DatasetSpec {
        n_clips: words[0] as usize,
        classes: words[1] as usize,
        frames: words[2] as usize,
        height: words[3] as usize,
        width: words[4] as usize,
        audio_len: words[5] as usize,
        seed: words[6] as u64 | ((words[7] as u64) << 32),
    };
    spec.validate()?;
    let (t_n, h, w, a_n) = (spec.frames, spec.height, spec.width, spec.audio_len);
    let sizes = [spec.rgb_dim(), spec.grey_dim(), spec.flow_dim(), a_n];
    let clip_bytes = 4 * (sizes.iter().sum::<usize>() + 1);
    let mut buf = vec![0u8; clip_bytes];
    let mut clips = Vec::with_capacity(spec.n_clips);
    for clip_id in 0..spec.n_clips {
        input.read_exact(&mut buf).map_err(io)?;
        let mut vals = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64);
        let mut take = |n: usize| -> Vec<f64> { vals.by_ref().take(n).collect() };
        let rgb = Tensor::new(vec![t_n, 3, h, w], take(sizes[0]))?;
        let grey = Tensor::new(vec![t_n, 1, h, w], take(sizes[1]))?;
        let flow = Tensor::new(vec![t_n - 1, 2, h, w], take(sizes[2]))?;
        let audio = Tensor::vector(take(sizes[3]));
        let tail = &buf[clip_bytes - 4..];
        let class_id = u32::from_le_bytes([tail[0], tail[1], tail[2], tail[3]]) as usize;
        if class_id >= spec.classes {
            return Err(Error::format("dataset file", format!("class id {class_id} out of range")));
        }
        clips.push(MultiModalClip {
            rgb,
            grey,
            flow,
            audio,
            class_id,
            clip_id,
        });
    }
    let mut extra = [0u8; 1];
    if input.read(&mut extra).map_err(io)? != 0 {
        return Err(Error::format("dataset file", "trailing bytes"));
    }
    Ok((spec, clips))
}
