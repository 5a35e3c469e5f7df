//! Synthetic pose-skewed dataset.
//!
//! Each identity owns a fixed smooth latent template. A sample is the
//! template pushed through a yaw-conditioned corruption — a fade toward a
//! shared profile pattern, a horizontal shear toward the profile side, a
//! one-sided occlusion band, and pixel noise — whose severity grows
//! monotonically with |yaw|. The fade collapses identities toward a common
//! appearance at high yaw, so a correction conditioned on the yaw itself is
//! learnable from the data while a yaw-blind model must absorb the full
//! intra-class spread.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const GENERATOR_VERSION: u32 = 1;

const FADE_MAX: f64 = 0.85;
const SHEAR_MAX: f64 = 0.3;
const OCCLUSION_MAX: f64 = 0.2;
const NOISE_AMPLITUDE: f64 = 0.04;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum YawLaw {
    /// ~80% of samples with |yaw| below 30 degrees.
    FrontalSkewed,
    Uniform,
}

impl std::str::FromStr for YawLaw {
    type Err = Error;
    fn from_str(s: &str) -> Result<YawLaw> {
        match s {
            "frontal_skewed" => Ok(YawLaw::FrontalSkewed),
            "uniform" => Ok(YawLaw::Uniform),
            other => Err(Error::Config(format!("unknown yaw law '{other}'"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthSample {
    /// Single-channel image, row-major, `size * size` values.
    pub image: Vec<f64>,
    pub identity: usize,
    pub yaw_deg: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub seed: u64,
    pub n_identities: usize,
    pub n_per_identity: usize,
    pub yaw_law: YawLaw,
    pub image_size: usize,
    pub generator_version: u32,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub samples: Vec<SynthSample>,
}

/// Corruption severity as a function of yaw: 0 at frontal, 1 at full profile.
pub fn severity(yaw_deg: f64) -> f64 {
    (yaw_deg.abs() / 90.0).clamp(0.0, 1.0)
}

fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut h = seed ^ 0x9E37_79B9_7F4A_7C15;
    for v in [a, b] {
        h ^= v.wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h = h.rotate_left(27).wrapping_mul(0x94D0_49BB_1331_11EB);
    }
    h
}

/// Smooth per-identity template: bilinear upsample of a coarse random grid.
fn identity_template(seed: u64, identity: usize, size: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, identity as u64, 0));
    let coarse = 4usize;
    let grid: Vec<f64> = (0..(coarse + 1) * (coarse + 1)).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut img = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            let fy = y as f64 / size as f64 * coarse as f64;
            let fx = x as f64 / size as f64 * coarse as f64;
            let (y0, x0) = (fy as usize, fx as usize);
            let (dy, dx) = (fy - y0 as f64, fx - x0 as f64);
            let g = |yy: usize, xx: usize| grid[yy * (coarse + 1) + xx];
            img[y * size + x] = g(y0, x0) * (1.0 - dy) * (1.0 - dx)
                + g(y0, x0 + 1) * (1.0 - dy) * dx
                + g(y0 + 1, x0) * dy * (1.0 - dx)
                + g(y0 + 1, x0 + 1) * dy * dx;
        }
    }
    img
}

fn bilinear(img: &[f64], size: usize, y: f64, x: f64) -> f64 {
    if y < 0.0 || x < 0.0 || y > (size - 1) as f64 || x > (size - 1) as f64 {
        return 0.0;
    }
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let y1 = (y0 + 1).min(size - 1);
    let x1 = (x0 + 1).min(size - 1);
    let (dy, dx) = (y - y0 as f64, x - x0 as f64);
    img[y0 * size + x0] * (1.0 - dy) * (1.0 - dx)
        + img[y0 * size + x1] * (1.0 - dy) * dx
        + img[y1 * size + x0] * dy * (1.0 - dx)
        + img[y1 * size + x1] * dy * dx
}

/// Smooth fixed pattern every identity fades toward at high |yaw|.
fn profile_pattern(size: usize) -> Vec<f64> {
    let mut out = vec![0.0; size * size];
    let tau = std::f64::consts::TAU;
    for y in 0..size {
        for x in 0..size {
            let fy = y as f64 / size as f64;
            let fx = x as f64 / size as f64;
            out[y * size + x] = 0.9 * (tau * fx).sin() * (tau * fy).cos();
        }
    }
    out
}

/// Applies the yaw-conditioned corruption to a template. Noise excepted,
/// yaw = 0 leaves the template untouched.
pub fn corrupt(template: &[f64], size: usize, yaw_deg: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let v = severity(yaw_deg);
    let dir = if yaw_deg >= 0.0 { 1.0 } else { -1.0 };
    let center = (size as f64 - 1.0) / 2.0;
    let mut out = vec![0.0; size * size];
    // horizontal shear toward the profile side
    for y in 0..size {
        let shift = dir * v * SHEAR_MAX * (y as f64 - center);
        for x in 0..size {
            out[y * size + x] = bilinear(template, size, y as f64, x as f64 - shift);
        }
    }
    // fade toward the shared profile appearance
    let f = v * FADE_MAX;
    let common = profile_pattern(size);
    for (p, c) in out.iter_mut().zip(&common) {
        *p = (1.0 - f) * *p + f * c;
    }
    // one-sided occlusion band
    let occl = (v * OCCLUSION_MAX * size as f64) as usize;
    for y in 0..size {
        for k in 0..occl {
            let x = if dir > 0.0 { k } else { size - 1 - k };
            out[y * size + x] = 0.0;
        }
    }
    // pixel noise, yaw-independent
    for p in out.iter_mut() {
        *p += rng.gen_range(-NOISE_AMPLITUDE..NOISE_AMPLITUDE);
    }
    out
}

fn draw_yaw(rng: &mut ChaCha8Rng, law: YawLaw) -> f64 {
    let magnitude = match law {
        YawLaw::FrontalSkewed => {
            if rng.gen_bool(0.8) {
                rng.gen_range(0.0..30.0)
            } else {
                rng.gen_range(30.0..90.0)
            }
        }
        YawLaw::Uniform => rng.gen_range(0.0..90.0),
    };
    let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    sign * magnitude
}

pub fn generate_dataset(
    seed: u64,
    n_identities: usize,
    n_per_identity: usize,
    yaw_law: YawLaw,
    image_size: usize,
) -> Dataset {
    let mut samples = Vec::with_capacity(n_identities * n_per_identity);
    for id in 0..n_identities {
        let template = identity_template(seed, id, image_size);
        for j in 0..n_per_identity {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, id as u64, 1 + j as u64));
            let yaw = draw_yaw(&mut rng, yaw_law);
            let image = corrupt(&template, image_size, yaw, &mut rng);
            samples.push(SynthSample { image, identity: id, yaw_deg: yaw });
        }
    }
    Dataset {
        meta: DatasetMeta {
            seed,
            n_identities,
            n_per_identity,
            yaw_law,
            image_size,
            generator_version: GENERATOR_VERSION,
        },
        samples,
    }
}

/// Writes the samples as a flat little-endian binary plus a text manifest.
pub fn export_dataset(ds: &Dataset, bin_path: &Path, manifest_path: &Path) -> Result<()> {
    let size = ds.meta.image_size;
    let mut bin = Vec::with_capacity(ds.samples.len() * (4 + 8 + size * size * 8));
    for s in &ds.samples {
        if s.image.len() != size * size {
            return Err(Error::Invalid("sample image size disagrees with manifest".into()));
        }
        bin.extend_from_slice(&(s.identity as u32).to_le_bytes());
        bin.extend_from_slice(&s.yaw_deg.to_le_bytes());
        for &p in &s.image {
            bin.extend_from_slice(&p.to_le_bytes());
        }
    }
    std::fs::File::create(bin_path)?.write_all(&bin)?;
    let yaw_law = match ds.meta.yaw_law {
        YawLaw::FrontalSkewed => "frontal_skewed",
        YawLaw::Uniform => "uniform",
    };
    let manifest = format!(
        "generator_version={}\nseed={}\nn_identities={}\nn_per_identity={}\nn_samples={}\nyaw_law={}\nimage_size={}\n",
        ds.meta.generator_version,
        ds.meta.seed,
        ds.meta.n_identities,
        ds.meta.n_per_identity,
        ds.samples.len(),
        yaw_law,
        size,
    );
    std::fs::write(manifest_path, manifest)?;
    Ok(())
}

pub fn import_dataset(bin_path: &Path, manifest_path: &Path) -> Result<Dataset> {
    let manifest = std::fs::read_to_string(manifest_path)?;
    let mut fields = std::collections::HashMap::new();
    for line in manifest.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("manifest line '{line}' is not key=value")))?;
        fields.insert(k.to_string(), v.to_string());
    }
    let get = |k: &str| {
        fields.get(k).cloned().ok_or_else(|| Error::Config(format!("manifest missing key {k}")))
    };
    let parse_usize = |k: &str| -> Result<usize> {
        get(k)?.parse().map_err(|_| Error::Config(format!("manifest key {k} is not an integer")))
    };
    let version: u32 = get("generator_version")?
        .parse()
        .map_err(|_| Error::Config("bad generator_version".into()))?;
    if version != GENERATOR_VERSION {
        return Err(Error::Config(format!(
            "dataset generator version {version}, expected {GENERATOR_VERSION}"
        )));
    }
    let meta = DatasetMeta {
        seed: get("seed")?.parse().map_err(|_| Error::Config("bad seed".into()))?,
        n_identities: parse_usize("n_identities")?,
        n_per_identity: parse_usize("n_per_identity")?,
        yaw_law: get("yaw_law")?.parse()?,
        image_size: parse_usize("image_size")?,
        generator_version: version,
    };
    let n_samples = parse_usize("n_samples")?;
    let size = meta.image_size;
    let record = 4 + 8 + size * size * 8;
    let mut bin = Vec::new();
    std::fs::File::open(bin_path)?.read_to_end(&mut bin)?;
    if bin.len() != n_samples * record {
        return Err(Error::Config(format!(
            "dataset binary is {} bytes, manifest implies {}",
            bin.len(),
            n_samples * record
        )));
    }
    let mut samples = Vec::with_capacity(n_samples);
    for i in 0..n_samples {
        let chunk = &bin[i * record..(i + 1) * record];
        let identity = u32::from_le_bytes(chunk[0..4].try_into().unwrap()) as usize;
        let yaw_deg = f64::from_le_bytes(chunk[4..12].try_into().unwrap());
        let image = chunk[12..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        samples.push(SynthSample { image, identity, yaw_deg });
    }
    Ok(Dataset { meta, samples })
}
