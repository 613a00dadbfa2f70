use std::borrow::Cow;

use super::{DataError, GrayImage};

/// Sizes implied by a square full-resolution slide and a downscale factor.
///
/// The low-resolution image and every patch share one side length, so the
/// patch grid is `factor`×`factor`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Geometry {
    pub full_side: usize,
    pub factor: usize,
    pub lowres_side: usize,
    pub patch_side: usize,
    pub grid_side: usize,
    pub patch_count: usize,
}

impl Geometry {
    pub fn new(full_side: usize, factor: usize) -> Result<Self, DataError> {
        if factor < 2 || full_side == 0 || full_side % factor != 0 {
            return Err(DataError::Usage(format!(
                "full resolution {full_side} is not divisible by factor {factor} (factor must be >= 2)"
            )));
        }
        let lowres_side = full_side / factor;
        Ok(Self {
            full_side,
            factor,
            lowres_side,
            patch_side: lowres_side,
            grid_side: factor,
            patch_count: factor * factor,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SlideRecord {
    pub slide_id: String,
    pub full_image: GrayImage,
    pub label: usize,
}

/// A slide after downscaling and tiling.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedSlide {
    pub slide_id: String,
    pub lowres: GrayImage,
    /// Row-major grid order.
    pub patches: Vec<GrayImage>,
    pub label: usize,
    pub grid_side: usize,
}

impl PreparedSlide {
    pub fn stitch(&self) -> Result<GrayImage, DataError> {
        GrayImage::stitch(&self.patches, self.grid_side)
    }
}

/// Read access to a prepared slide. Patches may be fetched lazily.
pub trait SlideView {
    fn slide_id(&self) -> &str;
    fn label(&self) -> usize;
    fn lowres(&self) -> &GrayImage;
    fn patch_count(&self) -> usize;
    fn patch(&self, index: usize) -> Result<Cow<'_, GrayImage>, DataError>;
}

impl SlideView for PreparedSlide {
    fn slide_id(&self) -> &str {
        &self.slide_id
    }

    fn label(&self) -> usize {
        self.label
    }

    fn lowres(&self) -> &GrayImage {
        &self.lowres
    }

    fn patch_count(&self) -> usize {
        self.patches.len()
    }

    fn patch(&self, index: usize) -> Result<Cow<'_, GrayImage>, DataError> {
        self.patches
            .get(index)
            .map(Cow::Borrowed)
            .ok_or_else(|| DataError::Usage(format!("patch {index} out of range")))
    }
}

/// Block-mean downscale plus non-overlapping tiling into `factor²` patches.
pub fn preprocess_slide(record: &SlideRecord, factor: usize) -> Result<PreparedSlide, DataError> {
    let img = &record.full_image;
    if img.height() != img.width() {
        return Err(DataError::Usage(format!(
            "slide {} is {}x{}, expected square",
            record.slide_id,
            img.height(),
            img.width()
        )));
    }
    let geo = Geometry::new(img.height(), factor)?;
    let lowres = img.block_mean(factor)?;
    let side = geo.patch_side;
    let patches = (0..geo.patch_count)
        .map(|i| img.crop((i / geo.grid_side) * side, (i % geo.grid_side) * side, side, side))
        .collect();
    Ok(PreparedSlide {
        slide_id: record.slide_id.clone(),
        lowres,
        patches,
        label: record.label,
        grid_side: geo.grid_side,
    })
}
