use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{pnm, resize_bilinear, Sample};
use crate::error::{Error, Result};

/// Class names in index order; index 1 is the positive class.
pub const CLASS_NAMES: [&str; 2] = ["NORMAL", "PNEUMONIA"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(format!("split must be `train` or `test`, got `{other}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRow {
    /// Path as written in the manifest, relative to its directory.
    pub path: String,
    pub label: usize,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    /// Directory the row paths are relative to.
    pub root: PathBuf,
    pub rows: Vec<ManifestRow>,
}

pub fn class_index(name: &str) -> Option<usize> {
    CLASS_NAMES.iter().position(|c| *c == name)
}

impl DatasetManifest {
    pub fn parse(text: &str, root: impl Into<PathBuf>, source: &Path) -> Result<Self> {
        let err = |line: usize, detail: String| Error::Manifest {
            path: source.to_path_buf(),
            line,
            detail,
        };
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let header = reader.headers().map_err(|e| err(1, e.to_string()))?.clone();
        if header.iter().collect::<Vec<_>>() != ["path", "label", "split"] {
            return Err(err(
                1,
                format!(
                    "header must be `path,label,split`, got `{}`",
                    header.iter().collect::<Vec<_>>().join(",")
                ),
            ));
        }
        let mut rows = Vec::new();
        let mut seen = HashSet::new();
        for record in reader.records() {
            let record = record.map_err(|e| {
                let line = e.position().map_or(0, |p| p.line() as usize);
                err(line, e.to_string())
            })?;
            let line = record.position().map_or(0, |p| p.line() as usize);
            if record.len() != 3 {
                return Err(err(line, format!("expected 3 fields, got {}", record.len())));
            }
            let path = record[0].to_string();
            if path.is_empty() {
                return Err(err(line, "empty path".into()));
            }
            let label = class_index(&record[1]).ok_or_else(|| {
                err(
                    line,
                    format!("unknown label `{}` (expected NORMAL or PNEUMONIA)", &record[1]),
                )
            })?;
            let split: Split = record[2].parse().map_err(|e| err(line, e))?;
            if !seen.insert(path.clone()) {
                return Err(err(line, format!("duplicate path `{path}`")));
            }
            rows.push(ManifestRow { path, label, split });
        }
        Ok(Self {
            root: root.into(),
            rows,
        })
    }

    pub fn rows_in(&self, split: Split) -> impl Iterator<Item = &ManifestRow> {
        self.rows.iter().filter(move |r| r.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.rows_in(split).count()
    }

    /// Decodes and resizes every image of `split` to `size`×`size`.
    pub fn load_split(&self, split: Split, size: usize) -> Result<Vec<Sample>> {
        self.rows_in(split)
            .map(|row| {
                let image = pnm::decode_image(&self.root.join(&row.path))?;
                Ok(Sample {
                    image: resize_bilinear(&image, size)?,
                    label: row.label,
                    id: row.path.clone(),
                })
            })
            .collect()
    }
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    DatasetManifest::parse(&text, root, path)
}

/// Manifest text for the published split: per class and split, `counts`
/// gives `(class, split, n)`; paths follow `{split}/{CLASS}/img_{i:05}.pgm`.
pub fn layout_manifest(counts: &[(usize, Split, usize)]) -> String {
    let mut out = String::from("path,label,split\n");
    for &(class, split, n) in counts {
        let s = match split {
            Split::Train => "train",
            Split::Test => "test",
        };
        for i in 0..n {
            out.push_str(&format!("{s}/{0}/img_{i:05}.pgm,{0},{s}\n", CLASS_NAMES[class]));
        }
    }
    out
}
