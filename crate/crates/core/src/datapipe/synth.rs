//! Synthetic paired coarse/fine climate-like fields.
//!
//! Every day shares one smooth latent field `Z` built from drifting
//! low-wavenumber sinusoids plus correlated noise. Six variables are derived
//! from it with distinct spatial signatures, and a static land mask imprints
//! a fixed coastline pattern on the first two.

use std::f64::consts::TAU;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::fieldfile::write_field;
use super::manifest::{FileEntry, GridSpec, GridKind, Manifest, GeneratorInfo};
use crate::error::{Error, Result};
use crate::models::PAPER_VARIABLES;
use crate::numerics::{Pads, Tensor};

/// Variables carrying the static land-mask imprint.
pub const FINGERPRINT_VARIABLES: [&str; 2] = ["tas", "sfcWind"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub seed: u64,
    pub years: Vec<u32>,
    pub days_per_year: usize,
    pub hi_h: usize,
    pub hi_w: usize,
    /// Coarse cells are `scale x scale` blocks of fine cells.
    pub scale: usize,
    /// Latent sinusoid count.
    pub modes: usize,
    /// Highest latent wavenumber, in cycles per domain.
    pub max_wavenumber: f64,
    /// Amplitude of the correlated latent noise.
    pub noise: f64,
    /// Precipitation threshold on the standardized latent field.
    pub precip_threshold: f64,
}

impl SynthParams {
    /// The desk-scale dataset: 64x64 fine grid, 8x8 coarse grid, 20 years of 36 days.
    pub fn toy(seed: u64) -> Self {
        SynthParams {
            seed,
            years: (1..=20).collect(),
            days_per_year: 36,
            hi_h: 64,
            hi_w: 64,
            scale: 8,
            modes: 8,
            max_wavenumber: 3.0,
            noise: 0.25,
            precip_threshold: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w, s) = (self.hi_h, self.hi_w, self.scale);
        if s == 0 || h == 0 || w == 0 {
            return Err(Error::Config("grid extents and scale must be positive".into()));
        }
        if h % 8 != 0 || w % 8 != 0 {
            return Err(Error::Config(format!("fine grid {h}x{w} not divisible by 8")));
        }
        if h % s != 0 || w % s != 0 {
            return Err(Error::Config(format!("fine grid {h}x{w} not divisible by scale {s}")));
        }
        if self.years.is_empty() || self.days_per_year == 0 {
            return Err(Error::Config("need at least one year and one day".into()));
        }
        if self.modes == 0 {
            return Err(Error::Config("need at least one latent mode".into()));
        }
        Ok(())
    }

    fn frac(&self, f: f64) -> f64 {
        (f * self.hi_h.min(self.hi_w) as f64).max(0.5)
    }
}

/// Static state shared by all days of one generator seed.
pub struct Generator {
    params: SynthParams,
    modes: Vec<Mode>,
    land: Vec<f64>,
}

struct Mode {
    kx: f64,
    ky: f64,
    amp: f64,
    phase: f64,
    drift: f64,
}

impl Generator {
    pub fn new(params: SynthParams) -> Result<Self> {
        params.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        let kmax = params.max_wavenumber;
        let modes = (0..params.modes)
            .map(|_| Mode {
                kx: rng.random_range(-kmax..=kmax),
                ky: rng.random_range(-kmax..=kmax),
                amp: rng.random_range(0.5..1.0) * (2.0 / params.modes as f64).sqrt(),
                phase: rng.random_range(0.0..TAU),
                drift: rng.random_range(-0.25..0.25),
            })
            .collect();
        let (h, w) = (params.hi_h, params.hi_w);
        let relief = standardize(blur(&white(&mut rng, h * w), h, w, params.frac(0.08)));
        let land = relief.iter().map(|&r| sigmoid(6.0 * (r - 0.2))).collect();
        Ok(Generator { params, modes, land })
    }

    pub fn params(&self) -> &SynthParams {
        &self.params
    }

    /// Static land fraction in `[0, 1]`, shape `[H, W]`.
    pub fn land_mask(&self) -> Tensor<f64> {
        Tensor::new(&[self.params.hi_h, self.params.hi_w], self.land.clone()).expect("shape")
    }

    /// Latent field for one day, shape `[H, W]`.
    pub fn latent(&self, year: u32, day: usize) -> Tensor<f64> {
        let (z, _) = self.latent_and_rng(year, day);
        Tensor::new(&[self.params.hi_h, self.params.hi_w], z).expect("shape")
    }

    fn day_rng(&self, year: u32, day: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.params.seed);
        rng.set_stream(1 + year as u64 * 4096 + day as u64);
        rng
    }

    fn time_index(&self, year: u32, day: usize) -> f64 {
        let first = self.params.years.iter().copied().min().unwrap_or(year);
        (year as f64 - first as f64) * self.params.days_per_year as f64 + day as f64
    }

    fn latent_and_rng(&self, year: u32, day: usize) -> (Vec<f64>, ChaCha8Rng) {
        let p = &self.params;
        let (h, w) = (p.hi_h, p.hi_w);
        let t = self.time_index(year, day);
        let season = (TAU * (day as f64 + 0.5) / p.days_per_year as f64).sin();
        let mut rng = self.day_rng(year, day);
        let noise = standardize(blur(&white(&mut rng, h * w), h, w, p.frac(0.04)));
        let mut z = vec![0.0; h * w];
        for y in 0..h {
            let fy = (y as f64 + 0.5) / h as f64;
            for x in 0..w {
                let fx = (x as f64 + 0.5) / w as f64;
                let mut v = 0.6 * season * (fy - 0.5);
                for m in &self.modes {
                    v += m.amp * (TAU * (m.kx * fx + m.ky * fy) + m.phase + m.drift * t).sin();
                }
                z[y * w + x] = v + p.noise * noise[y * w + x];
            }
        }
        (z, rng)
    }

    /// Fine-grid fields for one day, shape `[6, H, W]`, in variable order.
    pub fn day(&self, year: u32, day: usize) -> Tensor<f64> {
        let p = &self.params;
        let (h, w) = (p.hi_h, p.hi_w);
        let n = h * w;
        let (z, mut rng) = self.latent_and_rng(year, day);
        let season = (TAU * (day as f64 + 0.5) / p.days_per_year as f64).sin();
        let trend = 0.05 * self.time_index(year, day) / p.days_per_year as f64;

        let zs = blur(&z, h, w, p.frac(0.08));
        let zn = standardize(z.clone());
        let zsn = standardize(zs.clone());
        let grad = gradient_magnitude(&blur(&z, h, w, p.frac(0.03)), h, w);
        let texture = standardize(blur(&white(&mut rng, n), h, w, p.frac(0.012)));
        let wet = standardize(blur(&white(&mut rng, n), h, w, p.frac(0.03)));
        let cloud_src = standardize(blur(&white(&mut rng, n), h, w, p.frac(0.06)));

        let mut out = vec![0.0; 6 * n];
        for i in 0..n {
            let land = self.land[i];
            let cloud = sigmoid(3.0 * (cloud_src[i] + 0.6 * zsn[i]));
            out[i] = 283.0 + 10.0 * (0.8 * z[i]).tanh() + 3.0 * season + trend - 2.0 * land;
            out[n + i] = (1.5 + 2.5 * grad[i] + 0.4 * texture[i].abs()) * (1.6 - 0.8 * land);
            out[2 * n + i] = 5500.0 + 60.0 * zs[i] + 15.0 * season;
            let excess = (zn[i] + 0.3 * wet[i] - p.precip_threshold).max(0.0);
            out[3 * n + i] = 4.0 * excess.powf(1.5);
            out[4 * n + i] = 160.0 + 50.0 * season - 70.0 * cloud + 8.0 * zs[i];
            out[5 * n + i] = 300.0 + 12.0 * zs[i] + 35.0 * cloud + 4.0 * season;
        }
        Tensor::new(&[6, h, w], out).expect("shape")
    }
}

/// Block mean over `scale x scale` cells, accumulated in `f64`.
pub fn block_mean(field: &Tensor<f32>, scale: usize) -> Result<Tensor<f32>> {
    let nd = field.ndim();
    if nd < 2 {
        return Err(Error::dim("block_mean", format!("{:?}", field.shape())));
    }
    let (h, w) = (field.shape()[nd - 2], field.shape()[nd - 1]);
    if scale == 0 || h % scale != 0 || w % scale != 0 {
        return Err(Error::Config(format!("{h}x{w} not divisible by scale {scale}")));
    }
    let (oh, ow) = (h / scale, w / scale);
    let lead: usize = field.shape()[..nd - 2].iter().product();
    let src = field.data();
    let norm = (scale * scale) as f64;
    let mut data = Vec::with_capacity(lead * oh * ow);
    for l in 0..lead {
        for by in 0..oh {
            for bx in 0..ow {
                let mut s = 0.0f64;
                for y in by * scale..(by + 1) * scale {
                    for x in bx * scale..(bx + 1) * scale {
                        s += src[l * h * w + y * w + x] as f64;
                    }
                }
                data.push((s / norm) as f32);
            }
        }
    }
    let mut shape = field.shape()[..nd - 2].to_vec();
    shape.extend_from_slice(&[oh, ow]);
    Tensor::new(&shape, data)
}

/// Writes the paired dataset under `out` and returns its manifest
/// (also saved as `out/manifest.json`).
pub fn synth_generate(params: &SynthParams, out: &Path) -> Result<Manifest> {
    let gen = Generator::new(params.clone())?;
    let (lo_h, lo_w) = (params.hi_h / params.scale, params.hi_w / params.scale);
    let mut files = Vec::new();
    for &year in &params.years {
        for day in 0..params.days_per_year {
            let hr: Tensor<f32> = gen.day(year, day).cast();
            let lr = block_mean(&hr, params.scale)?;
            for (v, var) in PAPER_VARIABLES.iter().enumerate() {
                for (kind, field) in [(GridKind::Highres, &hr), (GridKind::Lowres, &lr)] {
                    let rel = Manifest::field_path(kind, var, year, day);
                    write_field(&out.join(&rel), &field.channel(v))?;
                    files.push(FileEntry {
                        var: var.to_string(),
                        year,
                        day,
                        grid: kind,
                        path: rel,
                    });
                }
            }
        }
    }
    let pads = Pads::to_multiple(params.hi_h, params.hi_w, 8);
    let manifest = Manifest {
        variables: PAPER_VARIABLES.iter().map(|s| s.to_string()).collect(),
        grid: GridSpec {
            hi_h: params.hi_h,
            hi_w: params.hi_w,
            lo_h,
            lo_w,
            pad_top: pads.top,
            pad_bottom: pads.bottom,
            pad_left: pads.left,
            pad_right: pads.right,
        },
        years: params.years.clone(),
        days_per_year: params.days_per_year,
        files,
        generator: Some(GeneratorInfo {
            seed: params.seed,
            params: serde_json::to_value(params)?,
        }),
    };
    manifest.save(&out.join("manifest.json"))?;
    Ok(manifest)
}

fn white(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn standardize(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let inv = if var > 0.0 { 1.0 / var.sqrt() } else { 0.0 };
    v.iter_mut().for_each(|x| *x = (*x - mean) * inv);
    v
}

/// Separable Gaussian blur with clamped edges.
pub fn blur(src: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, &kv)| kv * src[y * w + clamp(x as isize + k as isize - radius, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, &kv)| kv * tmp[clamp(y as isize + k as isize - radius, h) * w + x])
                .sum();
        }
    }
    out
}

/// Central-difference gradient magnitude, in units per domain width.
fn gradient_magnitude(z: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    let scale = w.min(h) as f64 / TAU;
    for y in 0..h {
        let (y0, y1) = (y.saturating_sub(1), (y + 1).min(h - 1));
        for x in 0..w {
            let (x0, x1) = (x.saturating_sub(1), (x + 1).min(w - 1));
            let gx = (z[y * w + x1] - z[y * w + x0]) / (x1 - x0) as f64;
            let gy = (z[y1 * w + x] - z[y0 * w + x]) / (y1 - y0) as f64;
            out[y * w + x] = (gx * gx + gy * gy).sqrt() * scale;
        }
    }
    out
}
