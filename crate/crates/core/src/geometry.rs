use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Output-grid geometry: `stride` image pixels per cell.
///
/// Cell `(x, y)` is centred on image point `((x + 0.5) * stride, (y + 0.5) * stride)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridGeometry {
    pub stride: usize,
    pub width: usize,
    pub height: usize,
}

impl GridGeometry {
    pub fn for_image(image_width: usize, image_height: usize, stride: usize) -> Result<Self> {
        if stride == 0 || image_width == 0 || image_height == 0 {
            return Err(Error::invalid("stride and image size must be positive"));
        }
        Ok(GridGeometry {
            stride,
            width: image_width.div_ceil(stride),
            height: image_height.div_ceil(stride),
        })
    }

    pub fn cells(&self) -> usize {
        self.width * self.height
    }

    /// Image-space centre of a cell.
    pub fn cell_center(&self, x: usize, y: usize) -> [f64; 2] {
        let s = self.stride as f64;
        [(x as f64 + 0.5) * s, (y as f64 + 0.5) * s]
    }

    /// Image pixel coordinates to continuous grid coordinates (inverse of `cell_center`).
    pub fn to_grid(&self, p: [f64; 2]) -> [f64; 2] {
        let s = self.stride as f64;
        [p[0] / s - 0.5, p[1] / s - 0.5]
    }

    pub fn to_image(&self, g: [f64; 2]) -> [f64; 2] {
        let s = self.stride as f64;
        [(g[0] + 0.5) * s, (g[1] + 0.5) * s]
    }

    /// Pixel length to grid-cell length.
    pub fn to_cells(&self, len: f64) -> f64 {
        len / self.stride as f64
    }

    pub fn to_pixels(&self, len: f64) -> f64 {
        len * self.stride as f64
    }

    #[inline]
    pub fn cell_index(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }
}
