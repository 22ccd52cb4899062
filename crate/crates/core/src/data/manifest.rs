//! Dataset manifests: a CSV of `path,age[,x,y,w,h]` records.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::codec::BinGrid;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FaceBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl FaceBox {
    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub path: PathBuf,
    pub age: f64,
    pub face_box: Option<FaceBox>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ManifestSource {
    Csv,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub records: Vec<Record>,
    pub source: ManifestSource,
}

/// Disjoint train/validation index sets covering every record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

fn data_err(path: &Path, msg: impl std::fmt::Display) -> Error {
    Error::Data(format!("{}: {msg}", path.display()))
}

impl DatasetManifest {
    /// Reads a manifest; relative image paths resolve against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new(""));
        Self::parse(&text, base).map_err(|e| match e {
            Error::Data(m) => data_err(path, m),
            other => other,
        })
    }

    pub fn parse(text: &[u8], base: &Path) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .flexible(true)
            .trim(csv::Trim::All)
            .from_reader(text);
        let headers = reader.headers().map_err(|e| Error::Data(e.to_string()))?.clone();
        let names: Vec<&str> = headers.iter().collect();
        if names != ["path", "age"] && names != ["path", "age", "x", "y", "w", "h"] {
            return Err(Error::Data(format!(
                "header must be path,age[,x,y,w,h], got {}",
                names.join(",")
            )));
        }
        let mut records = Vec::new();
        for (i, row) in reader.records().enumerate() {
            let line = i + 2;
            let row = row.map_err(|e| Error::Data(format!("line {line}: {e}")))?;
            let num = |j: usize| -> Result<f64> {
                row[j]
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::Data(format!("line {line}: bad number {:?}", &row[j])))
            };
            let face_box = match row.len() {
                2 => None,
                6 => Some(FaceBox {
                    x: num(2)?,
                    y: num(3)?,
                    w: num(4)?,
                    h: num(5)?,
                }),
                n => {
                    return Err(Error::Data(format!(
                        "line {line}: expected 2 or 6 fields, got {n}"
                    )))
                }
            };
            if row[0].is_empty() {
                return Err(Error::Data(format!("line {line}: empty path")));
            }
            records.push(Record {
                path: base.join(&row[0]),
                age: num(1)?,
                face_box,
            });
        }
        let manifest = DatasetManifest {
            records,
            source: ManifestSource::Csv,
        };
        manifest.check_unique()?;
        Ok(manifest)
    }

    fn check_unique(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for r in &self.records {
            if !seen.insert(&r.path) {
                return Err(Error::Data(format!("duplicate path {}", r.path.display())));
            }
        }
        if self.records.is_empty() {
            return Err(Error::Data("manifest has no records".into()));
        }
        Ok(())
    }

    /// Checks every age lies on the grid's range.
    pub fn check_ages(&self, grid: &BinGrid) -> Result<()> {
        match self.records.iter().find(|r| !grid.contains(r.age)) {
            Some(r) => Err(Error::Data(format!(
                "{}: age {} outside [{}, {}]",
                r.path.display(),
                r.age,
                grid.first(),
                grid.last()
            ))),
            None => Ok(()),
        }
    }

    /// Writes the manifest with paths relative to `dir` where possible.
    pub fn to_csv(&self, dir: &Path) -> Result<String> {
        let with_box = self.records.iter().any(|r| r.face_box.is_some());
        let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
        let header: &[&str] = if with_box {
            &["path", "age", "x", "y", "w", "h"]
        } else {
            &["path", "age"]
        };
        w.write_record(header).map_err(|e| Error::Data(e.to_string()))?;
        for r in &self.records {
            let rel = r.path.strip_prefix(dir).unwrap_or(&r.path);
            let mut row = vec![rel.to_string_lossy().into_owned(), r.age.to_string()];
            if with_box {
                let b = r
                    .face_box
                    .ok_or_else(|| Error::Data("face boxes must be given for all records or none".into()))?;
                row.extend([b.x, b.y, b.w, b.h].map(|v| v.to_string()));
            }
            w.write_record(&row).map_err(|e| Error::Data(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("utf-8 fields"))
    }

    /// Seeded shuffle, then the last `round(n · val_fraction)` records
    /// validate. At least one record always trains.
    pub fn split(&self, val_fraction: f64, seed: u64) -> Result<Split> {
        if !(0.0..1.0).contains(&val_fraction) {
            return Err(Error::invalid(format!(
                "val_fraction must be in [0, 1), got {val_fraction}"
            )));
        }
        let n = self.records.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_val = ((n as f64 * val_fraction).round() as usize).min(n.saturating_sub(1));
        let val = order.split_off(n - n_val);
        Ok(Split { train: order, val })
    }
}
