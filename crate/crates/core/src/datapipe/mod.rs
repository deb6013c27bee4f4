//! Field files, manifests, normalization, the decade split, sampling and the
//! synthetic paired-field generator.

pub mod fieldfile;
pub mod manifest;
pub mod synth;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use fieldfile::{decode_field, encode_field, read_field, write_field};
pub use manifest::{Date, FileEntry, GridKind, GridSpec, Manifest};
pub use synth::{synth_generate, Generator, SynthParams};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Bilinear regridding of a coarse stack `[N, h, w]` onto the fine grid.
pub fn regrid_lowres(lr: &Tensor<f32>, hi_h: usize, hi_w: usize) -> Result<Tensor<f32>> {
    lr.resize_bilinear(hi_h, hi_w)
}

/// `(train_years, test_years)`: years divisible by ten are held out.
pub fn split_by_decade(years: &[u32]) -> Result<(Vec<u32>, Vec<u32>)> {
    let (test, train): (Vec<u32>, Vec<u32>) = years.iter().partition(|&&y| y % 10 == 0);
    if test.is_empty() {
        return Err(Error::Config("no year divisible by 10; test split is empty".into()));
    }
    if train.is_empty() {
        return Err(Error::Config("every year is divisible by 10; train split is empty".into()));
    }
    Ok((train, test))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub min: f64,
    pub max: f64,
}

/// Per-variable min-max statistics from the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NormStats(pub BTreeMap<String, Range>);

impl NormStats {
    /// Fits on `[N, ...]` stacks whose channels follow `variables`.
    pub fn fit<'a>(variables: &[String], samples: impl IntoIterator<Item = &'a Tensor<f32>>) -> Result<Self> {
        let mut ranges = vec![(f64::INFINITY, f64::NEG_INFINITY); variables.len()];
        for s in samples {
            if s.shape().first() != Some(&variables.len()) {
                return Err(Error::dim(
                    "fit_norm",
                    format!("sample {:?} vs {} variables", s.shape(), variables.len()),
                ));
            }
            let plane = s.len() / variables.len();
            for (v, r) in ranges.iter_mut().enumerate() {
                for &x in &s.data()[v * plane..(v + 1) * plane] {
                    r.0 = r.0.min(x as f64);
                    r.1 = r.1.max(x as f64);
                }
            }
        }
        let mut map = BTreeMap::new();
        for (var, (min, max)) in variables.iter().zip(ranges) {
            if !(max > min) {
                return Err(Error::Data(format!(
                    "variable '{var}' is constant (or absent) in the training split; cannot min-max normalize"
                )));
            }
            map.insert(var.clone(), Range { min, max });
        }
        Ok(NormStats(map))
    }

    pub fn range(&self, var: &str) -> Result<Range> {
        self.0
            .get(var)
            .copied()
            .ok_or_else(|| Error::Data(format!("no normalization statistics for '{var}'")))
    }

    pub fn apply_value(&self, var: &str, x: f64) -> Result<f64> {
        let r = self.range(var)?;
        Ok((x - r.min) / (r.max - r.min))
    }

    pub fn invert_value(&self, var: &str, x: f64) -> Result<f64> {
        let r = self.range(var)?;
        Ok(x * (r.max - r.min) + r.min)
    }

    /// Normalizes a stack `[N, ...]` in place (no clipping).
    pub fn apply(&self, variables: &[String], x: &mut Tensor<f32>) -> Result<()> {
        self.map_stack(variables, x, |r, v| (v - r.min) / (r.max - r.min))
    }

    pub fn invert(&self, variables: &[String], x: &mut Tensor<f32>) -> Result<()> {
        self.map_stack(variables, x, |r, v| v * (r.max - r.min) + r.min)
    }

    fn map_stack(&self, variables: &[String], x: &mut Tensor<f32>, f: impl Fn(Range, f64) -> f64) -> Result<()> {
        if x.shape().first() != Some(&variables.len()) {
            return Err(Error::dim(
                "normalize",
                format!("stack {:?} vs {} variables", x.shape(), variables.len()),
            ));
        }
        let plane = x.len() / variables.len();
        for (v, var) in variables.iter().enumerate() {
            let r = self.range(var)?;
            for val in &mut x.data_mut()[v * plane..(v + 1) * plane] {
                *val = f(r, *val as f64) as f32;
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)? + "\n";
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// One aligned day, normalized. `input` and `target` are padded to the
/// model grid; `coarse` stays on the coarse grid.
#[derive(Debug, Clone)]
pub struct Sample {
    pub date: Date,
    pub coarse: Tensor<f32>,
    pub input: Tensor<f32>,
    pub target: Tensor<f32>,
}

/// Which split a sampler or evaluation draws from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// In-memory prepared dataset.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
    pub stats: NormStats,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Dataset {
    /// Loads `manifest.json` (or the given manifest file) and its fields.
    pub fn load(path: &Path) -> Result<Self> {
        let (root, file) = if path.is_dir() {
            (path.to_path_buf(), path.join("manifest.json"))
        } else {
            let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
            (root, path.to_path_buf())
        };
        let manifest = Manifest::load(&file)?;
        Self::from_manifest(root, manifest)
    }

    pub fn from_manifest(root: PathBuf, manifest: Manifest) -> Result<Self> {
        manifest.verify(None)?;
        let (train_years, _) = split_by_decade(&manifest.years)?;
        let index = manifest.index();
        let vars = &manifest.variables;
        let stack = |date: Date, grid: GridKind| -> Result<Tensor<f32>> {
            let planes = vars
                .iter()
                .map(|v| read_field::<f32>(&root.join(&index[&(v.clone(), date, grid)])))
                .collect::<Result<Vec<_>>>()?;
            Tensor::stack(&planes)
        };
        let mut raw = Vec::new();
        for date in manifest.dates() {
            raw.push((date, stack(date, GridKind::Lowres)?, stack(date, GridKind::Highres)?));
        }
        let stats = NormStats::fit(
            vars,
            raw.iter()
                .filter(|(d, _, _)| train_years.contains(&d.0))
                .map(|(_, _, hr)| hr),
        )?;
        let g = manifest.grid;
        let mut train = Vec::new();
        let mut test = Vec::new();
        for (date, mut lr, mut hr) in raw {
            if lr.shape()[1..] != [g.lo_h, g.lo_w] || hr.shape()[1..] != [g.hi_h, g.hi_w] {
                return Err(Error::Data(format!(
                    "fields for year {} day {} disagree with the manifest grid",
                    date.0, date.1
                )));
            }
            stats.apply(vars, &mut lr)?;
            stats.apply(vars, &mut hr)?;
            let input = regrid_lowres(&lr, g.hi_h, g.hi_w)?.pad_replicate(g.pads())?;
            let target = hr.pad_replicate(g.pads())?;
            let sample = Sample {
                date,
                coarse: lr,
                input,
                target,
            };
            if train_years.contains(&date.0) {
                train.push(sample);
            } else {
                test.push(sample);
            }
        }
        Ok(Dataset {
            root,
            manifest,
            stats,
            train,
            test,
        })
    }

    pub fn split(&self, split: Split) -> &[Sample] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }

    pub fn variables(&self) -> &[String] {
        &self.manifest.variables
    }

    pub fn variable_index(&self, var: &str) -> Result<usize> {
        self.manifest
            .variables
            .iter()
            .position(|v| v == var)
            .ok_or_else(|| Error::Data(format!("dataset has no variable '{var}'")))
    }

    pub fn grid(&self) -> GridSpec {
        self.manifest.grid
    }
}

/// Seeded per-epoch shuffler over `len` items.
#[derive(Debug, Clone)]
pub struct Sampler {
    len: usize,
    rng: ChaCha8Rng,
}

impl Sampler {
    pub fn new(len: usize, seed: u64) -> Result<Self> {
        if len == 0 {
            return Err(Error::Config("cannot sample from an empty split".into()));
        }
        Ok(Sampler {
            len,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    /// Indices for the next epoch: fresh permutations, concatenated and
    /// truncated to `steps`.
    pub fn epoch(&mut self, steps: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(steps);
        while out.len() < steps {
            let mut perm: Vec<usize> = (0..self.len).collect();
            perm.shuffle(&mut self.rng);
            let take = (steps - out.len()).min(self.len);
            out.extend_from_slice(&perm[..take]);
        }
        out
    }
}
