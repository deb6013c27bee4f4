use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::fieldfile::read_field;
use crate::error::{Error, Result};
use crate::numerics::Pads;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GridKind {
    Lowres,
    Highres,
}

impl GridKind {
    pub fn key(self) -> &'static str {
        match self {
            GridKind::Lowres => "lowres",
            GridKind::Highres => "highres",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct GridSpec {
    pub hi_h: usize,
    pub hi_w: usize,
    pub lo_h: usize,
    pub lo_w: usize,
    pub pad_top: usize,
    pub pad_bottom: usize,
    pub pad_left: usize,
    pub pad_right: usize,
}

impl GridSpec {
    pub fn pads(&self) -> Pads {
        Pads {
            top: self.pad_top,
            bottom: self.pad_bottom,
            left: self.pad_left,
            right: self.pad_right,
        }
    }

    /// Extents seen by the models.
    pub fn padded(&self) -> (usize, usize) {
        (
            self.hi_h + self.pad_top + self.pad_bottom,
            self.hi_w + self.pad_left + self.pad_right,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    pub var: String,
    pub year: u32,
    pub day: usize,
    pub grid: GridKind,
    /// Relative to the manifest's directory.
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorInfo {
    pub seed: u64,
    pub params: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub variables: Vec<String>,
    pub grid: GridSpec,
    pub years: Vec<u32>,
    pub days_per_year: usize,
    pub files: Vec<FileEntry>,
    #[serde(default)]
    pub generator: Option<GeneratorInfo>,
}

/// `(year, day)`.
pub type Date = (u32, usize);

impl Manifest {
    pub fn field_path(grid: GridKind, var: &str, year: u32, day: usize) -> PathBuf {
        PathBuf::from(format!("fields/{}/{var}/{year:04}_{day:03}.cdf", grid.key()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Data(format!("{}: malformed manifest: {e}", path.display())))
    }

    /// Every date in year-major order.
    pub fn dates(&self) -> Vec<Date> {
        self.years
            .iter()
            .flat_map(|&y| (0..self.days_per_year).map(move |d| (y, d)))
            .collect()
    }

    /// `(var, date, grid) -> path` lookup.
    pub fn index(&self) -> BTreeMap<(String, Date, GridKind), PathBuf> {
        self.files
            .iter()
            .map(|f| ((f.var.clone(), (f.year, f.day), f.grid), f.path.clone()))
            .collect()
    }

    /// Checks pairing completeness, and with `root` that every file parses
    /// with the declared extents.
    pub fn verify(&self, root: Option<&Path>) -> Result<()> {
        let index = self.index();
        let vars: BTreeSet<_> = self.variables.iter().collect();
        if vars.len() != self.variables.len() {
            return Err(Error::Data("manifest lists a variable twice".into()));
        }
        for var in &self.variables {
            for date in self.dates() {
                for grid in [GridKind::Lowres, GridKind::Highres] {
                    let Some(rel) = index.get(&(var.clone(), date, grid)) else {
                        return Err(Error::Data(format!(
                            "no {} file for {var} on year {} day {}",
                            grid.key(),
                            date.0,
                            date.1
                        )));
                    };
                    if let Some(root) = root {
                        let t = read_field::<f32>(&root.join(rel))?;
                        let want = match grid {
                            GridKind::Lowres => [self.grid.lo_h, self.grid.lo_w],
                            GridKind::Highres => [self.grid.hi_h, self.grid.hi_w],
                        };
                        if t.shape() != want {
                            return Err(Error::Data(format!(
                                "{}: shape {:?}, manifest says {want:?}",
                                rel.display(),
                                t.shape()
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }
}
