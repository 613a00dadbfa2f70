//! Dataset manifest: a tab-separated file with a `#`-prefixed header block.
//!
//! ```text
//! #sos-manifest	1
//! #classes	Neg	AMA	SMA-V	SMA-T
//! #fullres	256
//! #factor	8
//! #lowres	32
//! #grid	8
//! #seed	42
//! #config	train_counts=60,26,27,7	...
//! split	slide_id	label	lowres	patch_dir
//! train	train_0000	0	train/train_0000/lowres.pgm	train/train_0000
//! ```
//!
//! Patch `(row, col)` of a slide lives at `<patch_dir>/patch_<row>_<col>.pgm`.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use super::pgm::read_pgm_header;
use super::preprocess::Geometry;
use super::{DataError, Split};

pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const MANIFEST_VERSION: u32 = 1;
const MAGIC: &str = "#sos-manifest";
const COLUMNS: [&str; 5] = ["split", "slide_id", "label", "lowres", "patch_dir"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub split: Split,
    pub slide_id: String,
    pub label: usize,
    pub lowres_path: String,
    pub patch_dir: String,
}

impl ManifestEntry {
    pub fn patch_path(&self, row: usize, col: usize) -> String {
        format!("{}/patch_{row}_{col}.pgm", self.patch_dir)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub version: u32,
    pub class_names: Vec<String>,
    pub geometry: Geometry,
    pub seed: u64,
    pub config: Vec<(String, String)>,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn class_count(&self) -> usize {
        self.class_names.len()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn class_counts(&self, split: Split) -> Vec<usize> {
        let mut counts = vec![0; self.class_count()];
        for e in self.split(split) {
            counts[e.label] += 1;
        }
        counts
    }

    pub fn to_tsv(&self) -> String {
        let g = &self.geometry;
        let mut out = String::new();
        out.push_str(&format!("{MAGIC}\t{}\n", self.version));
        out.push_str(&format!("#classes\t{}\n", self.class_names.join("\t")));
        out.push_str(&format!("#fullres\t{}\n", g.full_side));
        out.push_str(&format!("#factor\t{}\n", g.factor));
        out.push_str(&format!("#lowres\t{}\n", g.lowres_side));
        out.push_str(&format!("#grid\t{}\n", g.grid_side));
        out.push_str(&format!("#seed\t{}\n", self.seed));
        let echo: Vec<String> = self.config.iter().map(|(k, v)| format!("{k}={v}")).collect();
        out.push_str(&format!("#config\t{}\n", echo.join("\t")));
        out.push_str(&COLUMNS.join("\t"));
        out.push('\n');
        for e in &self.entries {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                e.split.name(),
                e.slide_id,
                e.label,
                e.lowres_path,
                e.patch_dir
            ));
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<(), DataError> {
        fs::write(path, self.to_tsv()).map_err(|e| DataError::io(path, e))
    }

    /// Parses without touching referenced files.
    pub fn parse(text: &str, path: &Path) -> Result<Self, DataError> {
        let mut lines = text.lines().enumerate();
        let (_, first) = lines.next().ok_or_else(|| DataError::parse(path, "empty manifest"))?;
        let mut fields = first.split('\t');
        if fields.next() != Some(MAGIC) {
            return Err(DataError::parse(path, "missing manifest magic line"));
        }
        let version = fields.next().unwrap_or("").to_string();
        if version != MANIFEST_VERSION.to_string() {
            return Err(DataError::UnknownVersion(version));
        }

        let mut class_names = Vec::new();
        let (mut full, mut factor, mut lowres, mut grid, mut seed) = (None, None, None, None, None);
        let mut config = Vec::new();
        let mut entries = Vec::new();
        let mut seen_columns = false;
        for (i, line) in lines {
            let lineno = i + 1;
            if line.is_empty() {
                continue;
            }
            let mut cols = line.split('\t');
            let key = cols.next().unwrap_or("");
            let num = |v: Option<&str>| -> Result<usize, DataError> {
                v.and_then(|s| s.parse().ok())
                    .ok_or_else(|| DataError::parse(path, format!("line {lineno}: bad number")))
            };
            if let Some(name) = key.strip_prefix('#') {
                match name {
                    "classes" => class_names = cols.map(str::to_string).collect(),
                    "fullres" => full = Some(num(cols.next())?),
                    "factor" => factor = Some(num(cols.next())?),
                    "lowres" => lowres = Some(num(cols.next())?),
                    "grid" => grid = Some(num(cols.next())?),
                    "seed" => {
                        seed = Some(cols.next().and_then(|s| s.parse::<u64>().ok()).ok_or_else(|| {
                            DataError::parse(path, format!("line {lineno}: bad seed"))
                        })?)
                    }
                    "config" => {
                        for kv in cols.filter(|s| !s.is_empty()) {
                            let (k, v) = kv.split_once('=').ok_or_else(|| {
                                DataError::parse(path, format!("line {lineno}: config item without '='"))
                            })?;
                            config.push((k.to_string(), v.to_string()));
                        }
                    }
                    _ => {}
                }
                continue;
            }
            if !seen_columns {
                if line.split('\t').ne(COLUMNS.iter().copied()) {
                    return Err(DataError::parse(path, format!("line {lineno}: unexpected column header")));
                }
                seen_columns = true;
                continue;
            }
            let row: Vec<&str> = line.split('\t').collect();
            if row.len() != COLUMNS.len() {
                return Err(DataError::parse(path, format!("line {lineno}: expected 5 fields")));
            }
            let split = Split::from_name(row[0])
                .ok_or_else(|| DataError::parse(path, format!("line {lineno}: unknown split {}", row[0])))?;
            entries.push(ManifestEntry {
                split,
                slide_id: row[1].to_string(),
                label: num(Some(row[2]))?,
                lowres_path: row[3].to_string(),
                patch_dir: row[4].to_string(),
            });
        }

        let missing = |what: &str| DataError::parse(path, format!("header lacks #{what}"));
        let full = full.ok_or_else(|| missing("fullres"))?;
        let factor = factor.ok_or_else(|| missing("factor"))?;
        let lowres = lowres.ok_or_else(|| missing("lowres"))?;
        let grid = grid.ok_or_else(|| missing("grid"))?;
        let geometry = Geometry::new(full, factor).map_err(|_| DataError::DimensionMismatch {
            path: path.to_path_buf(),
            detail: format!("full resolution {full} not divisible by factor {factor}"),
        })?;
        if geometry.lowres_side != lowres || geometry.grid_side != grid {
            return Err(DataError::DimensionMismatch {
                path: path.to_path_buf(),
                detail: format!(
                    "declared lowres {lowres} / grid {grid} disagree with {full}/{factor}"
                ),
            });
        }
        if class_names.is_empty() {
            return Err(missing("classes"));
        }
        Ok(Self {
            version: MANIFEST_VERSION,
            class_names,
            geometry,
            seed: seed.ok_or_else(|| missing("seed"))?,
            config,
            entries,
        })
    }

    /// Structural checks plus existence and dimensions of every referenced file.
    pub fn validate(&self, root: &Path) -> Result<(), DataError> {
        let manifest_path = root.join(MANIFEST_FILE);
        let mut ids = HashSet::new();
        for e in &self.entries {
            if e.label >= self.class_count() {
                return Err(DataError::parse(
                    &manifest_path,
                    format!("slide {} has label {} outside {} classes", e.slide_id, e.label, self.class_count()),
                ));
            }
            if !ids.insert(e.slide_id.as_str()) {
                return Err(DataError::parse(
                    &manifest_path,
                    format!("slide id {} listed more than once", e.slide_id),
                ));
            }
        }
        let g = &self.geometry;
        for e in &self.entries {
            check_dims(&root.join(&e.lowres_path), g.lowres_side)?;
            for r in 0..g.grid_side {
                for c in 0..g.grid_side {
                    check_dims(&root.join(e.patch_path(r, c)), g.patch_side)?;
                }
            }
        }
        Ok(())
    }
}

fn check_dims(path: &Path, side: usize) -> Result<(), DataError> {
    if !path.is_file() {
        return Err(DataError::MissingFile(path.to_path_buf()));
    }
    let h = read_pgm_header(path)?;
    if h.width != side || h.height != side {
        return Err(DataError::DimensionMismatch {
            path: path.to_path_buf(),
            detail: format!("expected {side}x{side}, file is {}x{}", h.width, h.height),
        });
    }
    Ok(())
}

pub fn write_manifest(manifest: &DatasetManifest, path: &Path) -> Result<(), DataError> {
    manifest.write(path)
}

/// Reads `<root>/manifest.tsv` (or `path` itself when it names a file) and validates it.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest, DataError> {
    let (file, root): (PathBuf, PathBuf) = if path.is_dir() {
        (path.join(MANIFEST_FILE), path.to_path_buf())
    } else {
        (
            path.to_path_buf(),
            path.parent().map(Path::to_path_buf).unwrap_or_default(),
        )
    };
    let text = fs::read_to_string(&file).map_err(|e| DataError::open(&file, e))?;
    let manifest = DatasetManifest::parse(&text, &file)?;
    manifest.validate(&root)?;
    Ok(manifest)
}
