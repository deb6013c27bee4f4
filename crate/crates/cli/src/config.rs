use std::path::{Path, PathBuf};

use downscale_core::{Arch, Error, ModelConfig, Result, Schedule, SsimOptions};
use serde::{Deserialize, Serialize};

/// Everything a training or evaluation run needs, as read from a JSON file
/// and then overridden by flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub schedule: Schedule,
    /// Dataset directory (containing `manifest.json`).
    pub data: PathBuf,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    #[serde(default)]
    pub ssim: SsimOptions,
}

impl RunConfig {
    /// Desk-scale defaults for `arch` on a 64x64 grid.
    pub fn toy(arch: Arch) -> Self {
        let mut model = ModelConfig::toy(arch);
        model.variables = downscale_core::models::PAPER_VARIABLES
            .iter()
            .map(|s| s.to_string())
            .collect();
        RunConfig {
            model,
            schedule: Schedule::toy(),
            data: PathBuf::from("data"),
            seeds: vec![0],
            out: PathBuf::from("runs").join(arch.key()),
            ssim: SsimOptions::default(),
        }
    }

    /// Full-size defaults (432x504, 400 epochs of 500 steps).
    pub fn paper(arch: Arch) -> Self {
        let mut cfg = Self::toy(arch);
        cfg.model = ModelConfig::paper(arch);
        cfg.model.variables = downscale_core::models::PAPER_VARIABLES
            .iter()
            .map(|s| s.to_string())
            .collect();
        cfg.schedule = Schedule::paper();
        cfg
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let text = serde_json::to_string_pretty(self)? + "\n";
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Switches architecture, keeping every other field.
    pub fn with_arch(mut self, arch: Arch) -> Self {
        self.model.arch = arch;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        for (_, member) in downscale_core::training::members(&self.model) {
            member.validate()?;
        }
        self.schedule.validate()
    }
}

/// Parses `HxW`.
pub fn parse_extent(s: &str) -> std::result::Result<(usize, usize), String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected HxW, got '{s}'"))?;
    let h = h.trim().parse().map_err(|_| format!("bad height in '{s}'"))?;
    let w = w.trim().parse().map_err(|_| format!("bad width in '{s}'"))?;
    Ok((h, w))
}

/// Parses `N` (years 1..=N), `A-B` (inclusive) or `A,B,C`.
pub fn parse_years(s: &str) -> std::result::Result<Vec<u32>, String> {
    let bad = || format!("cannot read years from '{s}'");
    if let Some((a, b)) = s.split_once('-') {
        let a: u32 = a.trim().parse().map_err(|_| bad())?;
        let b: u32 = b.trim().parse().map_err(|_| bad())?;
        if a > b {
            return Err(bad());
        }
        return Ok((a..=b).collect());
    }
    if s.contains(',') {
        return s.split(',').map(|y| y.trim().parse().map_err(|_| bad())).collect();
    }
    let n: u32 = s.trim().parse().map_err(|_| bad())?;
    if n == 0 {
        return Err(bad());
    }
    Ok((1..=n).collect())
}

/// Year list as given on the command line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Years(pub Vec<u32>);

pub fn parse_years_arg(s: &str) -> std::result::Result<Years, String> {
    parse_years(s).map(Years)
}
