use super::SourceImage;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Square patch extraction geometry.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TilingSpec {
    pub patch_size: usize,
    pub stride: usize,
}

impl TilingSpec {
    pub fn new(patch_size: usize, stride: usize) -> Result<Self> {
        if patch_size == 0 || stride == 0 {
            return Err(Error::Geometry(format!(
                "patch size and stride must be positive, got {patch_size} and {stride}"
            )));
        }
        Ok(TilingSpec { patch_size, stride })
    }

    /// Non-overlapping tiles of `patch_size`.
    pub fn non_overlapping(patch_size: usize) -> Result<Self> {
        Self::new(patch_size, patch_size)
    }

    /// `(rows, cols)` of the patch grid; partial trailing patches are dropped.
    pub fn grid(&self, width: usize, height: usize) -> Result<(usize, usize)> {
        if width < self.patch_size || height < self.patch_size {
            return Err(Error::Geometry(format!(
                "{width}×{height} image is smaller than one {0}×{0} patch",
                self.patch_size
            )));
        }
        Ok((
            (height - self.patch_size) / self.stride + 1,
            (width - self.patch_size) / self.stride + 1,
        ))
    }
}

impl Default for TilingSpec {
    fn default() -> Self {
        TilingSpec {
            patch_size: 28,
            stride: 28,
        }
    }
}

/// All patches tiled from one image, in row-major grid order.
#[derive(Clone, Debug, PartialEq)]
pub struct Bag {
    /// `3×s×s` tensors with values in `[0, 1]`.
    pub patches: Vec<Tensor<f32>>,
    pub rows: usize,
    pub cols: usize,
    /// Top-left `(x, y)` pixel of each patch.
    pub origins: Vec<(usize, usize)>,
    pub spec: TilingSpec,
    pub label: bool,
    pub source: String,
}

impl Bag {
    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }
}

pub fn tile(image: &SourceImage, spec: TilingSpec) -> Result<Bag> {
    let (rows, cols) = spec.grid(image.width, image.height)?;
    let s = spec.patch_size;
    let mut patches = Vec::with_capacity(rows * cols);
    let mut origins = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let (x0, y0) = (c * spec.stride, r * spec.stride);
            let mut data = vec![0f32; 3 * s * s];
            for dy in 0..s {
                let row = &image.data[((y0 + dy) * image.width + x0) * 3..][..s * 3];
                for (dx, px) in row.chunks_exact(3).enumerate() {
                    for ch in 0..3 {
                        data[(ch * s + dy) * s + dx] = px[ch] as f32 / 255.0;
                    }
                }
            }
            patches.push(Tensor::new([3, s, s], data)?);
            origins.push((x0, y0));
        }
    }
    Ok(Bag {
        patches,
        rows,
        cols,
        origins,
        spec,
        label: image.label,
        source: image.id.clone(),
    })
}
