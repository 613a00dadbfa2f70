//! Slides: synthetic generation, preprocessing, and on-disk layout.
//!
//! ```text
//! <root>/manifest.tsv
//! <root>/<split>/<slide_id>/lowres.pgm
//! <root>/<split>/<slide_id>/patch_<row>_<col>.pgm
//! ```

mod image;
mod manifest;
pub mod pgm;
mod preprocess;
mod synth;

use std::borrow::Cow;
use std::io;
use std::path::{Path, PathBuf};

pub use image::GrayImage;
pub use manifest::{load_manifest, write_manifest, DatasetManifest, ManifestEntry, MANIFEST_FILE, MANIFEST_VERSION};
pub use preprocess::{preprocess_slide, Geometry, PreparedSlide, SlideRecord, SlideView};
pub use synth::{
    generate_synthetic_dataset, render_slide, scale_counts, SynthConfig, SyntheticSlides, CLASS_NAMES,
    REFERENCE_TEST_COUNTS, REFERENCE_TRAIN_COUNTS,
};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("missing file: {0}")]
    MissingFile(PathBuf),
    #[error("{path}: dimension mismatch: {detail}")]
    DimensionMismatch { path: PathBuf, detail: String },
    #[error("unknown manifest version {0:?}")]
    UnknownVersion(String),
    #[error("{path}: {detail}")]
    Parse { path: PathBuf, detail: String },
    #[error("{0}")]
    Usage(String),
}

impl DataError {
    pub(crate) fn io(path: &Path, source: io::Error) -> Self {
        DataError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// Like [`DataError::io`] but maps "not found" to [`DataError::MissingFile`].
    pub(crate) fn open(path: &Path, source: io::Error) -> Self {
        if source.kind() == io::ErrorKind::NotFound {
            DataError::MissingFile(path.to_path_buf())
        } else {
            Self::io(path, source)
        }
    }

    pub(crate) fn parse(path: &Path, detail: impl Into<String>) -> Self {
        DataError::Parse {
            path: path.to_path_buf(),
            detail: detail.into(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "train" => Some(Split::Train),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

/// A slide whose low-resolution image is in memory and whose patches are
/// read from disk only when requested.
#[derive(Clone, Debug)]
pub struct LazySlide {
    root: PathBuf,
    entry: ManifestEntry,
    grid_side: usize,
    lowres: GrayImage,
}

impl LazySlide {
    pub fn entry(&self) -> &ManifestEntry {
        &self.entry
    }
}

impl SlideView for LazySlide {
    fn slide_id(&self) -> &str {
        &self.entry.slide_id
    }

    fn label(&self) -> usize {
        self.entry.label
    }

    fn lowres(&self) -> &GrayImage {
        &self.lowres
    }

    fn patch_count(&self) -> usize {
        self.grid_side * self.grid_side
    }

    fn patch(&self, index: usize) -> Result<Cow<'_, GrayImage>, DataError> {
        if index >= self.patch_count() {
            return Err(DataError::Usage(format!("patch {index} out of range")));
        }
        let path = self
            .root
            .join(self.entry.patch_path(index / self.grid_side, index % self.grid_side));
        pgm::read_pgm(&path).map(Cow::Owned)
    }
}

/// Low-resolution images eagerly, patches on demand.
pub fn load_split_lazy(root: &Path, manifest: &DatasetManifest, split: Split) -> Result<Vec<LazySlide>, DataError> {
    manifest
        .split(split)
        .map(|e| {
            Ok(LazySlide {
                root: root.to_path_buf(),
                entry: e.clone(),
                grid_side: manifest.geometry.grid_side,
                lowres: pgm::read_pgm(&root.join(&e.lowres_path))?,
            })
        })
        .collect()
}

/// Everything in memory.
pub fn load_split(root: &Path, manifest: &DatasetManifest, split: Split) -> Result<Vec<PreparedSlide>, DataError> {
    let g = manifest.geometry.grid_side;
    manifest
        .split(split)
        .map(|e| {
            let lowres = pgm::read_pgm(&root.join(&e.lowres_path))?;
            let patches = (0..g * g)
                .map(|i| pgm::read_pgm(&root.join(e.patch_path(i / g, i % g))))
                .collect::<Result<Vec<_>, _>>()?;
            Ok(PreparedSlide {
                slide_id: e.slide_id.clone(),
                lowres,
                patches,
                label: e.label,
                grid_side: g,
            })
        })
        .collect()
}
