//! Patch grids over an image: geometry, extraction, erasure and selection masks.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, Mask, Rect};

/// How image sizes that are not a multiple of the patch size are handled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Fit {
    /// Reject non-divisible sizes.
    #[default]
    Strict,
    /// Zero-pad right/bottom up to the next multiple; padded pixels are
    /// cropped away from every output mask.
    Pad,
}

/// A regular grid of `rows x cols` square-or-rectangular patches, shifted by
/// `(offset_x, offset_y)`. Partial border patches are dropped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub patch_w: usize,
    pub patch_h: usize,
    pub rows: usize,
    pub cols: usize,
    pub offset_x: usize,
    pub offset_y: usize,
    /// Size of the image the grid was built for.
    pub image_w: usize,
    pub image_h: usize,
    /// Size of the working canvas (equal to the image unless padded).
    pub canvas_w: usize,
    pub canvas_h: usize,
}

impl PatchGrid {
    pub fn new(
        width: usize,
        height: usize,
        patch_size: usize,
        offset: (usize, usize),
        fit: Fit,
    ) -> Result<Self> {
        if patch_size == 0 {
            return Err(Error::InvalidGrid("patch size must be positive".into()));
        }
        if offset.0 >= patch_size || offset.1 >= patch_size {
            return Err(Error::InvalidGrid(format!(
                "offset {offset:?} must be smaller than patch size {patch_size}"
            )));
        }
        if patch_size > width || patch_size > height {
            return Err(Error::PatchTooLarge {
                patch: patch_size,
                width,
                height,
            });
        }
        let divisible = width.is_multiple_of(patch_size) && height.is_multiple_of(patch_size);
        let (canvas_w, canvas_h) = match fit {
            Fit::Strict if !divisible => {
                return Err(Error::NotDivisible {
                    patch: patch_size,
                    width,
                    height,
                })
            }
            Fit::Strict => (width, height),
            Fit::Pad => (
                width.div_ceil(patch_size) * patch_size,
                height.div_ceil(patch_size) * patch_size,
            ),
        };
        let cols = (canvas_w - offset.0) / patch_size;
        let rows = (canvas_h - offset.1) / patch_size;
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidGrid(format!(
                "offset {offset:?} leaves no full patch"
            )));
        }
        Ok(Self {
            patch_w: patch_size,
            patch_h: patch_size,
            rows,
            cols,
            offset_x: offset.0,
            offset_y: offset.1,
            image_w: width,
            image_h: height,
            canvas_w,
            canvas_h,
        })
    }

    /// Number of patches `P`.
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_padded(&self) -> bool {
        (self.canvas_w, self.canvas_h) != (self.image_w, self.image_h)
    }

    pub fn rect(&self, p: usize) -> Result<Rect> {
        if p >= self.len() {
            return Err(Error::PatchOutOfRange {
                index: p,
                count: self.len(),
            });
        }
        let (row, col) = (p / self.cols, p % self.cols);
        Ok(Rect::new(
            self.offset_x + col * self.patch_w,
            self.offset_y + row * self.patch_h,
            self.patch_w,
            self.patch_h,
        ))
    }

    pub fn rects(&self) -> impl Iterator<Item = Rect> + '_ {
        (0..self.len()).map(|p| self.rect(p).expect("index in range"))
    }

    /// Brings `image` onto the grid's canvas (zero padding in [`Fit::Pad`] mode).
    pub fn canvas(&self, image: &Image) -> Result<Image> {
        if image.dims() != (self.image_w, self.image_h) {
            return Err(Error::DimensionMismatch {
                expected: (self.image_w, self.image_h),
                actual: image.dims(),
            });
        }
        if self.is_padded() {
            Ok(image.pad_to(self.canvas_w, self.canvas_h))
        } else {
            Ok(image.clone())
        }
    }

    fn check_canvas(&self, image: &Image) -> Result<()> {
        if image.dims() != (self.canvas_w, self.canvas_h) {
            return Err(Error::DimensionMismatch {
                expected: (self.canvas_w, self.canvas_h),
                actual: image.dims(),
            });
        }
        Ok(())
    }
}

/// Builds the grid for `image`.
pub fn make_grid(
    image: &Image,
    patch_size: usize,
    offset: (usize, usize),
    fit: Fit,
) -> Result<PatchGrid> {
    PatchGrid::new(image.width(), image.height(), patch_size, offset, fit)
}

/// Copies patch `p` out of `image` (which must be on the grid's canvas).
pub fn extract_patch(image: &Image, grid: &PatchGrid, p: usize) -> Result<Image> {
    grid.check_canvas(image)?;
    image.crop(grid.rect(p)?)
}

/// Returns a copy of `image` with patch `p` set to zero in every channel.
pub fn erase_patch(image: &Image, grid: &PatchGrid, p: usize) -> Result<Image> {
    let mut out = image.clone();
    erase_patch_in_place(&mut out, grid, p)?;
    Ok(out)
}

pub fn erase_patch_in_place(image: &mut Image, grid: &PatchGrid, p: usize) -> Result<()> {
    grid.check_canvas(image)?;
    image.zero_rect(grid.rect(p)?)
}

/// Foreground exactly on the pixels covered by the selected patches,
/// cropped back to the original image size.
pub fn mask_from_selection(grid: &PatchGrid, selected: &[usize]) -> Result<Mask> {
    let mut mask = Mask::empty(grid.canvas_w, grid.canvas_h);
    for &p in selected {
        mask.fill_rect(grid.rect(p)?, true);
    }
    Ok(if grid.is_padded() {
        mask.crop_to(grid.image_w, grid.image_h)
    } else {
        mask
    })
}

/// Per-pixel coverage flags of a grid on the original image (true where some
/// patch covers the pixel).
pub fn coverage(grid: &PatchGrid) -> Mask {
    let all: Vec<usize> = (0..grid.len()).collect();
    mask_from_selection(grid, &all).expect("indices in range")
}
