//! 2×2 view-grid codec and anchor/neighbor index bookkeeping.
//!
//! Quadrant order is row-major: position 0 top-left, 1 top-right,
//! 2 bottom-left, 3 bottom-right. Training-pair construction and inference
//! both go through this module so the layout cannot drift.

use std::collections::BTreeMap;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_SUB_SIZE: u32 = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct ViewGrid {
    pub image: RgbImage,
    pub sub_size: u32,
    pub view_indices: [usize; 4],
}

impl ViewGrid {
    /// Wraps a raster produced elsewhere (e.g. by a generation backend).
    pub fn from_raster(image: RgbImage, view_indices: [usize; 4]) -> Result<Self> {
        let (w, h) = image.dimensions();
        if w != h {
            return Err(Error::invalid(format!("grid must be square, got {w}x{h}")));
        }
        if w % 2 != 0 {
            return Err(Error::invalid(format!("grid side {w} is odd")));
        }
        check_distinct(&view_indices)?;
        Ok(ViewGrid {
            image,
            sub_size: w / 2,
            view_indices,
        })
    }
}

fn check_distinct(indices: &[usize]) -> Result<()> {
    for (i, a) in indices.iter().enumerate() {
        if indices[i + 1..].contains(a) {
            return Err(Error::invalid(format!("duplicate view index {a}")));
        }
    }
    Ok(())
}

/// Packs `cols × cols` equal square views into one square raster, row-major.
pub fn tile_square(views: &[RgbImage], cols: u32) -> Result<RgbImage> {
    if cols == 0 || views.len() != (cols * cols) as usize {
        return Err(Error::invalid(format!(
            "expected {} views for a {cols}x{cols} grid, got {}",
            cols * cols,
            views.len()
        )));
    }
    let (s, sh) = views[0].dimensions();
    if s != sh || s == 0 {
        return Err(Error::invalid(format!("views must be square, got {s}x{sh}")));
    }
    if let Some(v) = views.iter().find(|v| v.dimensions() != (s, s)) {
        return Err(Error::invalid(format!(
            "view size mismatch: {:?} vs {s}x{s}",
            v.dimensions()
        )));
    }
    let row = s as usize * 3;
    let stride = row * cols as usize;
    let mut out = vec![0u8; stride * s as usize * cols as usize];
    for (k, v) in views.iter().enumerate() {
        let (r, c) = (k / cols as usize, k % cols as usize);
        for (y, src) in v.as_raw().chunks_exact(row).enumerate() {
            let at = (r * s as usize + y) * stride + c * row;
            out[at..at + row].copy_from_slice(src);
        }
    }
    Ok(RgbImage::from_raw(s * cols, s * cols, out).expect("buffer sized for grid"))
}

/// Inverse of [`tile_square`].
pub fn split_square(img: &RgbImage, cols: u32) -> Result<Vec<RgbImage>> {
    let (w, h) = img.dimensions();
    if cols == 0 || w != h || w % cols != 0 {
        return Err(Error::invalid(format!(
            "{w}x{h} raster cannot be split into a {cols}x{cols} grid"
        )));
    }
    let s = w / cols;
    let row = s as usize * 3;
    let stride = w as usize * 3;
    let raw = img.as_raw();
    Ok((0..cols as usize * cols as usize)
        .map(|k| {
            let (r, c) = (k / cols as usize, k % cols as usize);
            let mut buf = Vec::with_capacity(row * s as usize);
            for y in 0..s as usize {
                let at = (r * s as usize + y) * stride + c * row;
                buf.extend_from_slice(&raw[at..at + row]);
            }
            RgbImage::from_raw(s, s, buf).expect("buffer sized for view")
        })
        .collect())
}

pub fn tile(views: &[RgbImage; 4], indices: [usize; 4]) -> Result<ViewGrid> {
    check_distinct(&indices)?;
    let image = tile_square(views, 2)?;
    let sub_size = views[0].width();
    Ok(ViewGrid {
        image,
        sub_size,
        view_indices: indices,
    })
}

pub fn split(grid: &ViewGrid) -> Result<[RgbImage; 4]> {
    let (w, h) = grid.image.dimensions();
    if w % 2 != 0 || h % 2 != 0 {
        return Err(Error::invalid(format!("grid side {w}x{h} is odd")));
    }
    let parts = split_square(&grid.image, 2)?;
    Ok(parts.try_into().expect("2x2 split yields four views"))
}

/// Which views each neighbor expert is responsible for.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpertAssignment {
    pub n_views: usize,
    pub stride: usize,
    pub anchor_indices: Vec<usize>,
    /// anchor index → the views its expert emits, anchor first, then the
    /// following views in azimuth order.
    pub neighbor_map: BTreeMap<usize, Vec<usize>>,
}

impl ExpertAssignment {
    /// Ordinal of the expert and quadrant that produce `view`.
    pub fn locate(&self, view: usize) -> Option<(usize, usize)> {
        self.anchor_indices.iter().enumerate().find_map(|(k, a)| {
            self.neighbor_map[a]
                .iter()
                .position(|&v| v == view)
                .map(|q| (k, q))
        })
    }

    pub fn block(&self, expert: usize) -> &[usize] {
        &self.neighbor_map[&self.anchor_indices[expert]]
    }
}

pub fn expert_assignment(n_views: usize, stride: usize) -> Result<ExpertAssignment> {
    if n_views == 0 || stride == 0 {
        return Err(Error::invalid("n_views and stride must be positive"));
    }
    if n_views % stride != 0 {
        return Err(Error::invalid(format!(
            "stride {stride} does not divide n_views {n_views}"
        )));
    }
    let anchor_indices: Vec<usize> = (0..n_views).step_by(stride).collect();
    let neighbor_map = anchor_indices
        .iter()
        .map(|&a| (a, (0..stride).map(|j| (a + j) % n_views).collect()))
        .collect();
    Ok(ExpertAssignment {
        n_views,
        stride,
        anchor_indices,
        neighbor_map,
    })
}
