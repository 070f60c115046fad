//! Deterministic synthetic scenes and analytically rendered feature
//! pyramids.
//!
//! Dataset file layout, all integers little-endian:
//!
//! ```text
//! magic    b"DQDS"
//! version  u32 (= 1)
//! spec     u64 num_scenes, u32 height, u32 width, u32 max_objects,
//!          u32 num_classes, f64 noise_std, u64 seed
//! count    u64 number of scene records
//! scene    u64 seed, u32 height, u32 width, u32 objects,
//!          then per object u32 class, f64 x1, f64 y1, f64 x2, f64 y2
//! ```

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::decoder::FeaturePyramid;
use crate::geometry::BBox;
use crate::losses::Targets;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"DQDS";
const VERSION: u32 = 1;
pub const MIN_SIDE: f64 = 4.0;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a dataset file (bad magic)")]
    BadMagic,
    #[error("unsupported dataset version {0}")]
    Version(u32),
    #[error("dataset file truncated")]
    Truncated,
    #[error("invalid dataset: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub num_scenes: usize,
    /// `(height, width)` in pixels.
    pub image_size: (usize, usize),
    pub max_objects: usize,
    pub num_classes: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self { num_scenes: 2000, image_size: (32, 32), max_objects: 3, num_classes: 4, noise_std: 0.1, seed: 0 }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let (h, w) = self.image_size;
        if self.num_scenes == 0 || self.num_classes == 0 {
            return Err(SynthError::Invalid("num_scenes and num_classes must be positive".into()));
        }
        if (h.min(w) as f64) < 2.0 * MIN_SIDE {
            return Err(SynthError::Invalid(format!("image {h}x{w} too small for {MIN_SIDE}px boxes")));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(SynthError::Invalid("noise_std must be finite and non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Object {
    pub class: usize,
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image_size: (usize, usize),
    pub objects: Vec<Object>,
    pub seed: u64,
}

impl Scene {
    pub fn targets(&self) -> Targets {
        Targets {
            classes: self.objects.iter().map(|o| o.class).collect(),
            boxes: self.objects.iter().map(|o| o.bbox).collect(),
            image_size: self.image_size,
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of scene `index` under `master`.
pub fn scene_seed(master: u64, index: u64) -> u64 {
    splitmix64(splitmix64(master) ^ index)
}

/// Sorted pair of uniform coordinates in `[0, extent]` whose gap lies in
/// `[MIN_SIDE, max_side]`, by rejection.
fn sample_interval(rng: &mut impl Rng, extent: f64, max_side: f64) -> (f64, f64) {
    loop {
        let a = rng.random_range(0.0..=extent);
        let b = rng.random_range(0.0..=extent);
        let (lo, hi) = (a.min(b), a.max(b));
        if hi - lo >= MIN_SIDE && hi - lo <= max_side {
            return (lo, hi);
        }
    }
}

pub fn generate_scene(spec: &DatasetSpec, index: usize) -> Scene {
    let seed = scene_seed(spec.seed, index as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (spec.image_size.0 as f64, spec.image_size.1 as f64);
    let max_side = 0.5 * h.min(w);
    let count = rng.random_range(0..=spec.max_objects);
    let objects = (0..count)
        .map(|_| {
            let class = rng.random_range(0..spec.num_classes);
            let (x1, x2) = sample_interval(&mut rng, w, max_side);
            let (y1, y2) = sample_interval(&mut rng, h, max_side);
            Object { class, bbox: BBox::new(x1, y1, x2, y2) }
        })
        .collect();
    Scene { image_size: spec.image_size, objects, seed }
}

/// Feature rendering parameters shared by every scene of a dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Renderer {
    pub d_model: usize,
    pub levels: usize,
    pub num_classes: usize,
    pub noise_std: f64,
}

impl Renderer {
    /// Channels `[c * B, (c + 1) * B)` carry class `c`, `B = D / K`.
    pub fn channels_per_class(&self) -> usize {
        self.d_model / self.num_classes
    }

    /// Per-object Gaussian blobs with stds `(w / 4, h / 4)` written into
    /// the object's class block at every level, plus Gaussian clutter drawn
    /// from a stream keyed by the scene seed.
    pub fn render(&self, scene: &Scene) -> FeaturePyramid {
        let d = self.d_model;
        let block = self.channels_per_class();
        let mut clutter = ChaCha8Rng::seed_from_u64(scene.seed);
        clutter.set_stream(1);
        let mut pyramid = FeaturePyramid::zeros(scene.image_size, self.levels, d);
        for (l, level) in pyramid.levels.iter_mut().enumerate() {
            let (lh, lw) = FeaturePyramid::level_size(scene.image_size, l);
            let stride = (1u64 << l) as f64;
            let mut data = vec![0.0f64; lh * lw * d];
            for obj in &scene.objects {
                let c = obj.bbox.to_center();
                let (sx, sy) = (c.w / 4.0, c.h / 4.0);
                let gx: Vec<f64> = (0..lw).map(|j| (-0.5 * (((j as f64 + 0.5) * stride - c.cx) / sx).powi(2)).exp()).collect();
                let gy: Vec<f64> = (0..lh).map(|i| (-0.5 * (((i as f64 + 0.5) * stride - c.cy) / sy).powi(2)).exp()).collect();
                let channels = obj.class * block..(obj.class + 1) * block;
                for (i, &vy) in gy.iter().enumerate() {
                    for (j, &vx) in gx.iter().enumerate() {
                        let v = vy * vx;
                        let cell = &mut data[(i * lw + j) * d..(i * lw + j + 1) * d];
                        for ch in &mut cell[channels.clone()] {
                            *ch = ch.max(v);
                        }
                    }
                }
            }
            if self.noise_std > 0.0 {
                for v in &mut data {
                    *v += self.noise_std * Distribution::<f64>::sample(&StandardNormal, &mut clutter);
                }
            }
            *level = Tensor::new(vec![lh, lw, d], data).expect("shape");
        }
        pyramid
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub scenes: Vec<Scene>,
}

pub fn generate_dataset(spec: &DatasetSpec) -> Result<Dataset, SynthError> {
    spec.validate()?;
    Ok(Dataset { spec: spec.clone(), scenes: (0..spec.num_scenes).map(|i| generate_scene(spec, i)).collect() })
}

fn eof(e: std::io::Error) -> SynthError {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        SynthError::Truncated
    } else {
        SynthError::Io(e)
    }
}

struct Reader<R>(R);

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N], SynthError> {
        let mut b = [0; N];
        self.0.read_exact(&mut b).map_err(eof)?;
        Ok(b)
    }
    fn u32(&mut self) -> Result<u32, SynthError> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }
    fn u64(&mut self) -> Result<u64, SynthError> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }
    fn f64(&mut self) -> Result<f64, SynthError> {
        Ok(f64::from_le_bytes(self.bytes()?))
    }
}

impl Dataset {
    pub fn write_to(&self, w: &mut impl Write) -> Result<(), SynthError> {
        let s = &self.spec;
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(s.num_scenes as u64).to_le_bytes())?;
        w.write_all(&(s.image_size.0 as u32).to_le_bytes())?;
        w.write_all(&(s.image_size.1 as u32).to_le_bytes())?;
        w.write_all(&(s.max_objects as u32).to_le_bytes())?;
        w.write_all(&(s.num_classes as u32).to_le_bytes())?;
        w.write_all(&s.noise_std.to_le_bytes())?;
        w.write_all(&s.seed.to_le_bytes())?;
        w.write_all(&(self.scenes.len() as u64).to_le_bytes())?;
        for scene in &self.scenes {
            w.write_all(&scene.seed.to_le_bytes())?;
            w.write_all(&(scene.image_size.0 as u32).to_le_bytes())?;
            w.write_all(&(scene.image_size.1 as u32).to_le_bytes())?;
            w.write_all(&(scene.objects.len() as u32).to_le_bytes())?;
            for o in &scene.objects {
                w.write_all(&(o.class as u32).to_le_bytes())?;
                for v in o.bbox.to_array() {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    pub fn read_from(r: impl Read) -> Result<Self, SynthError> {
        let mut r = Reader(r);
        if &r.bytes::<4>()? != MAGIC {
            return Err(SynthError::BadMagic);
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(SynthError::Version(version));
        }
        let spec = DatasetSpec {
            num_scenes: r.u64()? as usize,
            image_size: (r.u32()? as usize, r.u32()? as usize),
            max_objects: r.u32()? as usize,
            num_classes: r.u32()? as usize,
            noise_std: r.f64()?,
            seed: r.u64()?,
        };
        let count = r.u64()?;
        if count != spec.num_scenes as u64 {
            return Err(SynthError::Invalid(format!("{count} scene records for {} scenes", spec.num_scenes)));
        }
        let mut scenes = Vec::new();
        for _ in 0..count {
            let seed = r.u64()?;
            let image_size = (r.u32()? as usize, r.u32()? as usize);
            let n = r.u32()?;
            let mut objects = Vec::new();
            for _ in 0..n {
                let class = r.u32()? as usize;
                if class >= spec.num_classes {
                    return Err(SynthError::Invalid(format!("class {class} out of range")));
                }
                let bbox = BBox::new(r.f64()?, r.f64()?, r.f64()?, r.f64()?);
                objects.push(Object { class, bbox });
            }
            scenes.push(Scene { image_size, objects, seed });
        }
        Ok(Self { spec, scenes })
    }
}

pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<(), SynthError> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    dataset.write_to(&mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset, SynthError> {
    Dataset::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenes_are_deterministic() {
        let spec = DatasetSpec::default();
        assert_eq!(generate_scene(&spec, 17), generate_scene(&spec, 17));
        assert_ne!(generate_scene(&spec, 17).seed, generate_scene(&spec, 18).seed);
    }

    #[test]
    fn zero_max_objects_gives_empty_scenes() {
        let spec = DatasetSpec { max_objects: 0, ..DatasetSpec::default() };
        assert!((0..50).all(|i| generate_scene(&spec, i).objects.is_empty()));
    }

    #[test]
    fn empty_noiseless_scene_renders_zeros() {
        let scene = Scene { image_size: (16, 12), objects: vec![], seed: 3 };
        let r = Renderer { d_model: 8, levels: 2, num_classes: 4, noise_std: 0.0 };
        let x = r.render(&scene);
        assert_eq!(x.levels[1].shape(), &[8, 6, 8]);
        assert!(x.levels.iter().all(|l| l.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn rendering_is_deterministic() {
        let spec = DatasetSpec::default();
        let r = Renderer { d_model: 16, levels: 2, num_classes: 4, noise_std: 0.3 };
        let scene = generate_scene(&spec, 5);
        assert_eq!(r.render(&scene), r.render(&scene));
    }

    #[test]
    fn bad_header_is_rejected() {
        assert!(matches!(Dataset::read_from(&b"NOPE\x01\0\0\0"[..]), Err(SynthError::BadMagic)));
        assert!(matches!(Dataset::read_from(&b"DQDS\x07\0\0\0"[..]), Err(SynthError::Version(7))));
        assert!(matches!(Dataset::read_from(&b"DQ"[..]), Err(SynthError::Truncated)));
    }
}
