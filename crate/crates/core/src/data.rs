//! Synthetic labeled video clips with controllable class structure.
//!
//! Three generators:
//! - `spatial_only`: the class is a glyph stamped at a random location and
//!   held constant over time; frame order carries nothing.
//! - `temporal_only`: every clip carries the same glyph; the class is the
//!   order in which a fixed set of global intensity levels is visited.
//! - `mixed`: the product of one spatial and one temporal factor.
//!
//! Glyphs are stamped zero-mean, so the per-frame mean intensity of a
//! noise-free clip is exactly its temporal level.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{contract_err, Error, Result};
use crate::tensor::Tensor;

pub const GLYPH_SIZE: usize = 5;
const GLYPH_AMPLITUDE: f64 = 0.5;
const SPATIAL_LEVEL: f64 = 0.5;

/// 5x5 bitmaps, one row per `u8` (low 5 bits, MSB = leftmost column).
const GLYPHS: [[u8; 5]; 8] = [
    [0b00100, 0b00100, 0b11111, 0b00100, 0b00100], // plus
    [0b10001, 0b01010, 0b00100, 0b01010, 0b10001], // cross
    [0b11111, 0b10001, 0b10001, 0b10001, 0b11111], // box
    [0b00100, 0b01010, 0b10001, 0b01010, 0b00100], // diamond
    [0b11111, 0b00000, 0b11111, 0b00000, 0b11111], // bars
    [0b10101, 0b10101, 0b10101, 0b10101, 0b10101], // columns
    [0b11100, 0b11100, 0b11100, 0b00000, 0b00000], // corner block
    [0b00001, 0b00011, 0b00111, 0b01111, 0b11111], // wedge
];

/// Glyph shared by every temporal_only clip.
const NEUTRAL_GLYPH: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthMode {
    SpatialOnly,
    TemporalOnly,
    Mixed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub mode: SynthMode,
    pub classes: usize,
    pub clips_per_class: usize,
    /// `[C, T, H, W]`
    pub clip_shape: [usize; 4],
    pub noise_sigma: f64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let [c, t, h, w] = self.clip_shape;
        let bad = |m: String| Err(Error::Config(m));
        if self.classes < 2 {
            return bad(format!("classes must be >= 2, got {}", self.classes));
        }
        if self.clips_per_class == 0 {
            return bad("clips_per_class must be >= 1".into());
        }
        if c == 0 || t == 0 {
            return bad(format!("clip_shape extents must be positive, got {:?}", self.clip_shape));
        }
        if h < GLYPH_SIZE || w < GLYPH_SIZE {
            return bad(format!("clip_shape H and W must be >= {GLYPH_SIZE} to hold a glyph, got {h}x{w}"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma must be finite and >= 0, got {}", self.noise_sigma));
        }
        if matches!(self.mode, SynthMode::TemporalOnly | SynthMode::Mixed) && t < 4 {
            return bad(format!("temporal modes need T >= 4, got {t}"));
        }
        let (ks, kt) = self.factors()?;
        if ks > GLYPHS.len() {
            return bad(format!("at most {} spatial classes are available, got {ks}", GLYPHS.len()));
        }
        if kt > 2 * t {
            return bad(format!("at most {} temporal classes fit T = {t}, got {kt}", 2 * t));
        }
        Ok(())
    }

    /// Number of spatial and temporal classes `(k_s, k_t)`.
    pub fn factors(&self) -> Result<(usize, usize)> {
        match self.mode {
            SynthMode::SpatialOnly => Ok((self.classes, 1)),
            SynthMode::TemporalOnly => Ok((1, self.classes)),
            SynthMode::Mixed => (2..self.classes)
                .find(|&d| self.classes.is_multiple_of(d) && self.classes / d >= 2)
                .map(|d| (d, self.classes / d))
                .ok_or_else(|| {
                    Error::Config(format!("mixed mode needs classes = k_s * k_t with both >= 2, got {}", self.classes))
                }),
        }
    }

    /// Mean frame intensity over time for temporal class `k`.
    pub fn temporal_profile(&self, k: usize) -> Vec<f64> {
        let t = self.clip_shape[1];
        temporal_profile(t, k)
    }
}

/// Intensity levels evenly spaced in `[0.2, 0.8]`, visited in a
/// class-specific order: even classes rotate the ascending ramp, odd
/// classes rotate the descending one.
pub fn temporal_profile(t: usize, k: usize) -> Vec<f64> {
    let level = |i: usize| 0.2 + 0.6 * i as f64 / (t - 1) as f64;
    let shift = k / 2;
    (0..t)
        .map(|s| {
            let i = (s + shift) % t;
            if k.is_multiple_of(2) {
                level(i)
            } else {
                level(t - 1 - i)
            }
        })
        .collect()
}

pub fn glyph_mask(index: usize) -> [[bool; GLYPH_SIZE]; GLYPH_SIZE] {
    let mut m = [[false; GLYPH_SIZE]; GLYPH_SIZE];
    for (r, row) in GLYPHS[index].iter().enumerate() {
        for (c, cell) in m[r].iter_mut().enumerate() {
            *cell = row >> (GLYPH_SIZE - 1 - c) & 1 == 1;
        }
    }
    m
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: SynthSpec,
    pub seed: u64,
    pub split: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClipDataset {
    clips: Tensor,
    labels: Vec<usize>,
    manifest: Manifest,
}

impl ClipDataset {
    pub fn new(clips: Tensor, labels: Vec<usize>, manifest: Manifest) -> Result<Self> {
        clips.expect_rank(5, "clips")?;
        if clips.shape()[0] != labels.len() {
            return Err(contract_err(format!("{} clips but {} labels", clips.shape()[0], labels.len())));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= manifest.spec.classes) {
            return Err(contract_err(format!("label {y} outside {} classes", manifest.spec.classes)));
        }
        Ok(Self { clips, labels, manifest })
    }

    pub fn clips(&self) -> &Tensor {
        &self.clips
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.manifest.spec.classes
    }

    /// `[C, T, H, W]` of a single clip.
    pub fn clip_shape(&self) -> [usize; 4] {
        let s = self.clips.shape();
        [s[1], s[2], s[3], s[4]]
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes()];
        for &y in &self.labels {
            h[y] += 1;
        }
        h
    }

    /// Gathers clips by index into a new `[n, C, T, H, W]` tensor.
    pub fn gather(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let per: usize = self.clip_shape().iter().product();
        let src = self.clips.data();
        let mut data = Vec::with_capacity(per * indices.len());
        for &i in indices {
            data.extend_from_slice(&src[i * per..(i + 1) * per]);
        }
        let mut shape = self.clips.shape().to_vec();
        shape[0] = indices.len();
        let clips = Tensor::new(shape, data).expect("gather keeps shape consistent");
        (clips, indices.iter().map(|&i| self.labels[i]).collect())
    }

    fn subset(&self, indices: &[usize], split: &str) -> Self {
        let (clips, labels) = self.gather(indices);
        let manifest = Manifest { split: split.to_string(), ..self.manifest.clone() };
        Self { clips, labels, manifest }
    }

    /// Whole dataset as one batch.
    pub fn as_batch(&self) -> (Tensor, Vec<usize>) {
        (self.clips.clone(), self.labels.clone())
    }
}

pub fn generate_synthetic(spec: &SynthSpec, seed: u64) -> Result<ClipDataset> {
    spec.validate()?;
    let (_, kt) = spec.factors()?;
    let [c, t, h, w] = spec.clip_shape;
    let n = spec.classes * spec.clips_per_class;
    let per = c * t * h * w;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, spec.noise_sigma.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::Config(format!("noise_sigma: {e}")))?;
    let mut data = Vec::with_capacity(n * per);
    let mut labels = Vec::with_capacity(n);

    for class in 0..spec.classes {
        let (s_idx, t_idx) = (class / kt, class % kt);
        let glyph = match spec.mode {
            SynthMode::TemporalOnly => glyph_mask(NEUTRAL_GLYPH),
            _ => glyph_mask(s_idx),
        };
        let levels = match spec.mode {
            SynthMode::SpatialOnly => vec![SPATIAL_LEVEL; t],
            _ => temporal_profile(t, t_idx),
        };
        let on = glyph.iter().flatten().filter(|&&b| b).count() as f64;
        let mean_on = on / (h * w) as f64;
        for _ in 0..spec.clips_per_class {
            let oy = rng.random_range(0..=h - GLYPH_SIZE);
            let ox = rng.random_range(0..=w - GLYPH_SIZE);
            for _ch in 0..c {
                for &level in &levels {
                    for y in 0..h {
                        for x in 0..w {
                            let inside = y >= oy && y < oy + GLYPH_SIZE && x >= ox && x < ox + GLYPH_SIZE;
                            let mask = if inside && glyph[y - oy][x - ox] { 1.0 } else { 0.0 };
                            let mut v = level + GLYPH_AMPLITUDE * (mask - mean_on);
                            if spec.noise_sigma > 0.0 {
                                v += noise.sample(&mut rng);
                            }
                            // values are stored as f32 on disk
                            data.push(v as f32 as f64);
                        }
                    }
                }
            }
            labels.push(class);
        }
    }
    let clips = Tensor::new(vec![n, c, t, h, w], data)?;
    ClipDataset::new(clips, labels, Manifest { spec: spec.clone(), seed, split: "full".into() })
}

/// Stratified split: every class contributes `round(train_frac * n_c)`
/// clips (at least one, at most `n_c - 1`) to the training side.
pub fn split(data: &ClipDataset, train_frac: f64, seed: u64) -> Result<(ClipDataset, ClipDataset)> {
    if !(train_frac > 0.0 && train_frac < 1.0) {
        return Err(contract_err(format!("train_frac must lie in (0, 1), got {train_frac}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut val = Vec::new();
    for class in 0..data.num_classes() {
        let mut idx: Vec<usize> = (0..data.len()).filter(|&i| data.labels[i] == class).collect();
        if idx.len() < 2 {
            return Err(contract_err(format!("class {class} has {} clips; splitting needs at least 2", idx.len())));
        }
        idx.shuffle(&mut rng);
        let k = ((train_frac * idx.len() as f64).round() as usize).clamp(1, idx.len() - 1);
        train.extend_from_slice(&idx[..k]);
        val.extend_from_slice(&idx[k..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    Ok((data.subset(&train, "train"), data.subset(&val, "val")))
}

/// Shuffled mini-batches for one epoch; the order depends only on
/// `(seed, epoch)`. The final batch may be short.
pub fn batches(data: &ClipDataset, batch_size: usize, seed: u64, epoch: u64) -> Batches<'_> {
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    order.shuffle(&mut rng);
    Batches { data, order, batch_size: batch_size.max(1), pos: 0 }
}

pub struct Batches<'a> {
    data: &'a ClipDataset,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl Batches<'_> {
    pub fn order(&self) -> &[usize] {
        &self.order
    }
}

impl Iterator for Batches<'_> {
    type Item = (Tensor, Vec<usize>);

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let batch = self.data.gather(&self.order[self.pos..end]);
        self.pos = end;
        Some(batch)
    }
}

const MAGIC: &[u8; 4] = b"STFD";
const VERSION: u32 = 1;
/// Magic, version and the five extents.
pub const HEADER_BYTES: usize = 4 + 4 + 5 * 4;

pub fn encode(data: &ClipDataset) -> Result<Vec<u8>> {
    let manifest = serde_json::to_vec(&data.manifest)?;
    let s = data.clips.shape();
    let mut out = Vec::with_capacity(HEADER_BYTES + 4 * data.clips.len() + 4 * data.len() + 4 + manifest.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for &d in s {
        out.extend_from_slice(&as_u32(d, "extent")?.to_le_bytes());
    }
    for &v in data.clips.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    for &y in &data.labels {
        out.extend_from_slice(&as_u32(y, "label")?.to_le_bytes());
    }
    out.extend_from_slice(&as_u32(manifest.len(), "manifest length")?.to_le_bytes());
    out.extend_from_slice(&manifest);
    Ok(out)
}

fn as_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Format(format!("{what} {v} does not fit in u32")))
}

pub fn decode(bytes: &[u8]) -> Result<ClipDataset> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("bad magic; not a clip dataset file".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}, expected {VERSION}")));
    }
    let mut shape = [0usize; 5];
    for d in &mut shape {
        *d = r.u32()? as usize;
    }
    let n_values = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
    let n_values = n_values.ok_or_else(|| Error::Format("extents overflow".into()))?;
    let raw = r.take(n_values.checked_mul(4).ok_or_else(|| Error::Format("extents overflow".into()))?)?;
    let clips: Vec<f64> = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
    let mut labels = Vec::with_capacity(shape[0]);
    for _ in 0..shape[0] {
        labels.push(r.u32()? as usize);
    }
    let mlen = r.u32()? as usize;
    let manifest: Manifest =
        serde_json::from_slice(r.take(mlen)?).map_err(|e| Error::Format(format!("manifest: {e}")))?;
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let clips = Tensor::new(shape.to_vec(), clips).map_err(|e| Error::Format(e.to_string()))?;
    ClipDataset::new(clips, labels, manifest).map_err(|e| Error::Format(e.to_string()))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("truncated file: needed {n} bytes at offset {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn save(data: &ClipDataset, path: &Path) -> Result<()> {
    let bytes = encode(data)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ClipDataset> {
    decode(&fs::read(path)?)
}
