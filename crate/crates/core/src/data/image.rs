use crate::numerics::Tensor;

use super::DataError;

/// Single-channel image with values nominally in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl GrayImage {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self, DataError> {
        if height == 0 || width == 0 || height * width != data.len() {
            return Err(DataError::Usage(format!(
                "{height}x{width} image cannot hold {} values",
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        assert!(height > 0 && width > 0);
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, value: f64) {
        self.data[y * self.width + x] = value;
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// `[H, W, 1]` tensor view of the pixels.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.height, self.width, 1], self.data.clone()).expect("dimensions checked at construction")
    }

    /// Mean over non-overlapping `factor`×`factor` blocks.
    pub fn block_mean(&self, factor: usize) -> Result<Self, DataError> {
        if factor == 0 || self.height % factor != 0 || self.width % factor != 0 {
            return Err(DataError::Usage(format!(
                "{}x{} image is not divisible by factor {factor}",
                self.height, self.width
            )));
        }
        let (h, w) = (self.height / factor, self.width / factor);
        let mut out = vec![0.0; h * w];
        for y in 0..self.height {
            let row = &self.data[y * self.width..(y + 1) * self.width];
            let dst = &mut out[(y / factor) * w..(y / factor + 1) * w];
            for (bx, chunk) in row.chunks(factor).enumerate() {
                dst[bx] += chunk.iter().sum::<f64>();
            }
        }
        let area = (factor * factor) as f64;
        for v in &mut out {
            *v /= area;
        }
        Self::new(h, w, out)
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Self {
        assert!(top + height <= self.height && left + width <= self.width);
        let mut data = Vec::with_capacity(height * width);
        for y in top..top + height {
            data.extend_from_slice(&self.data[y * self.width + left..y * self.width + left + width]);
        }
        Self { height, width, data }
    }

    /// Reassembles a `grid`×`grid` row-major set of equally sized tiles.
    pub fn stitch(tiles: &[GrayImage], grid: usize) -> Result<Self, DataError> {
        if tiles.len() != grid * grid || tiles.is_empty() {
            return Err(DataError::Usage(format!(
                "{} tiles do not form a {grid}x{grid} grid",
                tiles.len()
            )));
        }
        let (th, tw) = (tiles[0].height, tiles[0].width);
        if tiles.iter().any(|t| t.height != th || t.width != tw) {
            return Err(DataError::Usage("tiles differ in size".into()));
        }
        let (h, w) = (th * grid, tw * grid);
        let mut data = vec![0.0; h * w];
        for (i, tile) in tiles.iter().enumerate() {
            let (r, c) = (i / grid, i % grid);
            for y in 0..th {
                let dst = (r * th + y) * w + c * tw;
                data[dst..dst + tw].copy_from_slice(&tile.data[y * tw..(y + 1) * tw]);
            }
        }
        Self::new(h, w, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn block_mean_of_ramp() {
        let img = GrayImage::new(2, 4, vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]).unwrap();
        let s = img.block_mean(2).unwrap();
        assert_eq!(s.data(), &[2.5, 4.5]);
        assert!(img.block_mean(3).is_err());
    }

    #[test]
    fn crop_and_stitch_invert() {
        let data: Vec<f64> = (0..36).map(|v| v as f64 / 36.0).collect();
        let img = GrayImage::new(6, 6, data).unwrap();
        let tiles: Vec<_> = (0..9).map(|i| img.crop((i / 3) * 2, (i % 3) * 2, 2, 2)).collect();
        assert_eq!(GrayImage::stitch(&tiles, 3).unwrap(), img);
        assert!(GrayImage::stitch(&tiles[..8], 3).is_err());
    }
}
