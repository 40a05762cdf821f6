//! Synthetic moving-square clips and their `AKVD` file format.
//!
//! Each clip shows one square of random colour translating at constant
//! speed over a static textured background; the class is the motion
//! direction.
//!
//! `AKVD` layout (little-endian): magic `AKVD`, version `u32 = 1`,
//! `u32` T, C, H, W, `u32` label, `u8` has_mask, `f32` frames in
//! `t, c, y, x` order, then `T·H·W` mask bytes (0/1) when present.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"AKVD";
pub const VERSION: u32 = 1;

/// Unit motion per class: left, right, up, down, then the diagonals.
pub const DIRECTIONS: [(i32, i32); 8] = [
    (0, -1),
    (0, 1),
    (-1, 0),
    (1, 0),
    (-1, -1),
    (-1, 1),
    (1, -1),
    (1, 1),
];

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub classes: usize,
    pub clip_len: usize,
    pub height: usize,
    pub width: usize,
    pub train_count: usize,
    pub val_count: usize,
    /// Side of the square in pixels.
    pub object_size: usize,
    /// Pixels moved per frame along each active axis.
    pub speed: usize,
    /// Standard deviation of per-frame pixel noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            classes: 4,
            clip_len: 8,
            height: 32,
            width: 32,
            train_count: 2000,
            val_count: 500,
            object_size: 8,
            speed: 2,
            noise: 0.05,
            seed: 0,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes != 4 && self.classes != 8 {
            return Err(Error::Config(format!("classes must be 4 or 8, got {}", self.classes)));
        }
        if self.clip_len == 0 || self.object_size == 0 {
            return Err(Error::Config("clip_len and object_size must be positive".into()));
        }
        let travel = self.speed * (self.clip_len - 1) + self.object_size;
        if travel > self.height || travel > self.width {
            return Err(Error::Config(format!(
                "a {}px square moving {}px/frame for {} frames does not fit in {}×{}",
                self.object_size, self.speed, self.clip_len, self.height, self.width
            )));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config(format!("noise must be non-negative, got {}", self.noise)));
        }
        Ok(())
    }
}

/// One video clip stored channel-major (`C×T×H×W`), ready to feed the
/// network.
#[derive(Clone, Debug, PartialEq)]
pub struct Clip {
    pub frames: Tensor<f32>,
    pub label: usize,
    /// Object mask, `T×H×W`.
    pub mask: Option<Vec<bool>>,
}

impl Clip {
    /// `(C, T, H, W)`.
    pub fn shape(&self) -> (usize, usize, usize, usize) {
        let d = self.frames.dims();
        (d[0], d[1], d[2], d[3])
    }

    /// Fraction of positions covered by the object, after nearest-neighbour
    /// resampling of the mask to `h×w`.
    pub fn mask_fraction(&self, h: usize, w: usize) -> Option<f64> {
        let m = self.downsampled_mask(h, w)?;
        Some(m.iter().filter(|&&b| b).count() as f64 / m.len() as f64)
    }

    /// Mask resampled to `T×h×w` by nearest neighbour: cell `(y, x)` reads
    /// source pixel `(⌊(y+½)·H/h⌋, ⌊(x+½)·W/w⌋)`.
    pub fn downsampled_mask(&self, h: usize, w: usize) -> Option<Vec<bool>> {
        let mask = self.mask.as_ref()?;
        let (_, t, sh, sw) = self.shape();
        let mut out = Vec::with_capacity(t * h * w);
        for f in 0..t {
            for y in 0..h {
                let sy = ((2 * y + 1) * sh / (2 * h)).min(sh - 1);
                for x in 0..w {
                    let sx = ((2 * x + 1) * sw / (2 * w)).min(sw - 1);
                    out.push(mask[(f * sh + sy) * sw + sx]);
                }
            }
        }
        Some(out)
    }
}

fn clip_rng(seed: u64, split: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(split << 32 | index as u64);
    rng
}

/// Generates clip `index` of stream `split` (0 = train, 1 = validation).
/// Labels cycle through the classes so every split is balanced.
pub fn gen_clip(cfg: &DataConfig, split: u64, index: usize) -> Clip {
    let mut rng = clip_rng(cfg.seed, split, index);
    let label = index % cfg.classes;
    let (t, h, w, s) = (cfg.clip_len, cfg.height, cfg.width, cfg.object_size);
    let (dy, dx) = DIRECTIONS[label];
    let travel = (cfg.speed * (t - 1)) as i32;

    // Start so the whole trajectory stays inside the frame.
    let start = |rng: &mut ChaCha8Rng, d: i32, extent: usize| -> i32 {
        let lo = if d < 0 { travel } else { 0 };
        let hi = extent as i32 - s as i32 - if d > 0 { travel } else { 0 };
        rng.random_range(lo..=hi)
    };
    let y0 = start(&mut rng, dy, h);
    let x0 = start(&mut rng, dx, w);

    // Background: two random gratings per channel plus static speckle.
    let mut background = vec![0f32; 3 * h * w];
    for c in 0..3 {
        let mut waves = Vec::new();
        for _ in 0..2 {
            let fy: f32 = rng.random_range(0.1..0.6);
            let fx: f32 = rng.random_range(0.1..0.6);
            let phase: f32 = rng.random_range(0.0..std::f32::consts::TAU);
            waves.push((fy, fx, phase));
        }
        let base: f32 = rng.random_range(0.15..0.35);
        for y in 0..h {
            for x in 0..w {
                let g: f32 = waves
                    .iter()
                    .map(|&(fy, fx, p)| (fy * y as f32 + fx * x as f32 + p).sin())
                    .sum::<f32>();
                let speckle: f32 = rng.random_range(-0.1..0.1);
                background[(c * h + y) * w + x] = base + 0.08 * g + speckle;
            }
        }
    }
    let colour: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.55..1.0));
    let noise = Normal::new(0.0, cfg.noise).expect("validated noise");

    let mut frames = vec![0f32; 3 * t * h * w];
    let mut mask = vec![false; t * h * w];
    for f in 0..t {
        let oy = (y0 + dy * cfg.speed as i32 * f as i32) as usize;
        let ox = (x0 + dx * cfg.speed as i32 * f as i32) as usize;
        for y in 0..h {
            for x in 0..w {
                let inside = (oy..oy + s).contains(&y) && (ox..ox + s).contains(&x);
                mask[(f * h + y) * w + x] = inside;
                for c in 0..3 {
                    let v = if inside {
                        colour[c]
                    } else {
                        background[(c * h + y) * w + x]
                    };
                    let v = v + noise.sample(&mut rng) as f32;
                    frames[((c * t + f) * h + y) * w + x] = v.clamp(0.0, 1.0);
                }
            }
        }
    }
    Clip {
        frames: Tensor::new([3, t, h, w], frames).expect("valid clip dims"),
        label,
        mask: Some(mask),
    }
}

/// `count` clips of stream `split`, generated in parallel; the result does
/// not depend on the thread count.
pub fn gen_split(cfg: &DataConfig, split: u64, count: usize) -> Vec<Clip> {
    (0..count).into_par_iter().map(|i| gen_clip(cfg, split, i)).collect()
}

pub fn encode_clip(clip: &Clip) -> Vec<u8> {
    let (c, t, h, w) = clip.shape();
    let mut out = Vec::with_capacity(29 + 4 * clip.frames.len() + t * h * w);
    out.extend_from_slice(MAGIC);
    for v in [VERSION, t as u32, c as u32, h as u32, w as u32, clip.label as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.push(clip.mask.is_some() as u8);
    let d = clip.frames.data();
    for f in 0..t {
        for ch in 0..c {
            let plane = &d[(ch * t + f) * h * w..(ch * t + f + 1) * h * w];
            for v in plane {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    if let Some(mask) = &clip.mask {
        out.extend(mask.iter().map(|&b| b as u8));
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        let s = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| Error::Format(format!("truncated file at byte {}", self.pos)))?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode_clip(bytes: &[u8]) -> Result<Clip> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4)? != MAGIC {
        return Err(Error::Format("not an AKVD clip (bad magic)".into()));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported AKVD version {version}")));
    }
    let (t, c, h, w) = (cur.u32()? as usize, cur.u32()? as usize, cur.u32()? as usize, cur.u32()? as usize);
    let label = cur.u32()? as usize;
    let has_mask = cur.take(1)?[0];
    if t == 0 || c == 0 || h == 0 || w == 0 {
        return Err(Error::Format(format!("empty clip shape {t}×{c}×{h}×{w}")));
    }
    let raw = cur.take(4 * t * c * h * w)?;
    let mut frames = vec![0f32; t * c * h * w];
    for (i, chunk) in raw.chunks_exact(4).enumerate() {
        let (f, rest) = (i / (c * h * w), i % (c * h * w));
        let (ch, p) = (rest / (h * w), rest % (h * w));
        frames[(ch * t + f) * h * w + p] = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
    }
    let mask = match has_mask {
        0 => None,
        1 => Some(cur.take(t * h * w)?.iter().map(|&b| b != 0).collect()),
        other => return Err(Error::Format(format!("invalid has_mask flag {other}"))),
    };
    if cur.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len() - cur.pos)));
    }
    Ok(Clip {
        frames: Tensor::new([c, t, h, w], frames)?,
        label,
        mask,
    })
}

pub fn write_clip(path: &Path, clip: &Clip) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_clip(clip))?;
    Ok(())
}

pub fn read_clip(path: &Path) -> Result<Clip> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_clip(&bytes)
}

/// Writes `clips` as `clip_00000.akvd`, `clip_00001.akvd`, … into `dir`.
pub fn write_dir(dir: &Path, clips: &[Clip]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (i, clip) in clips.iter().enumerate() {
        write_clip(&dir.join(format!("clip_{i:05}.akvd")), clip)?;
    }
    Ok(())
}

/// Sorted `.akvd` paths in `dir`.
pub fn list_dir(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    paths.retain(|p| p.extension().is_some_and(|e| e == "akvd"));
    paths.sort();
    Ok(paths)
}

/// Reads every clip in `dir` in file-name order.
pub fn read_dir(dir: &Path) -> Result<Vec<Clip>> {
    list_dir(dir)?.par_iter().map(|p| read_clip(p)).collect()
}

/// Generates the train and validation splits into `out/train` and
/// `out/val`.
pub fn gen_dataset(cfg: &DataConfig, out: &Path) -> Result<()> {
    cfg.validate()?;
    write_dir(&out.join("train"), &gen_split(cfg, 0, cfg.train_count))?;
    write_dir(&out.join("val"), &gen_split(cfg, 1, cfg.val_count))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DataConfig {
        DataConfig {
            clip_len: 4,
            height: 16,
            width: 16,
            object_size: 4,
            ..DataConfig::default()
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let cfg = small();
        assert_eq!(gen_clip(&cfg, 0, 3), gen_clip(&cfg, 0, 3));
        assert_ne!(gen_clip(&cfg, 0, 3).frames, gen_clip(&cfg, 1, 3).frames);
    }

    #[test]
    fn mask_area_is_square() {
        let cfg = small();
        let clip = gen_clip(&cfg, 0, 5);
        for frame in clip.mask.as_ref().unwrap().chunks(16 * 16) {
            assert_eq!(frame.iter().filter(|&&b| b).count(), 16);
        }
        assert!(clip.frames.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn round_trip_through_bytes() {
        let clip = gen_clip(&small(), 0, 1);
        assert_eq!(decode_clip(&encode_clip(&clip)).unwrap(), clip);
        let mut bad = encode_clip(&clip);
        bad[0] = b'X';
        assert!(matches!(decode_clip(&bad), Err(Error::Format(_))));
        let short = &encode_clip(&clip)[..40];
        assert!(matches!(decode_clip(short), Err(Error::Format(_))));
    }

    #[test]
    fn downsampled_mask_picks_centres() {
        let cfg = small();
        let clip = gen_clip(&cfg, 0, 0);
        let full = clip.downsampled_mask(16, 16).unwrap();
        assert_eq!(&full, clip.mask.as_ref().unwrap());
        assert_eq!(clip.downsampled_mask(4, 4).unwrap().len(), 4 * 16);
    }

    #[test]
    fn oversized_motion_is_rejected() {
        let cfg = DataConfig {
            speed: 5,
            ..small()
        };
        assert!(cfg.validate().is_err());
    }
}
