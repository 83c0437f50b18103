//! Grid partitions, central crops and tile encoding.

use std::io::Cursor;
use std::path::Path;

use image::{DynamicImage, GenericImageView};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// A rectangular region of a source image, in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TileSpec {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
    pub row: u32,
    pub col: u32,
}

impl TileSpec {
    pub fn full(width: u32, height: u32) -> Self {
        Self {
            x: 0,
            y: 0,
            w: width,
            h: height,
            row: 0,
            col: 0,
        }
    }

    pub fn area(&self) -> u64 {
        self.w as u64 * self.h as u64
    }

    pub fn fits_in(&self, width: u32, height: u32) -> bool {
        self.w > 0
            && self.h > 0
            && self.x as u64 + self.w as u64 <= width as u64
            && self.y as u64 + self.h as u64 <= height as u64
    }

    /// Whether `other` lies inside this tile.
    pub fn contains_tile(&self, other: &TileSpec) -> bool {
        other.x >= self.x
            && other.y >= self.y
            && other.x as u64 + other.w as u64 <= self.x as u64 + self.w as u64
            && other.y as u64 + other.h as u64 <= self.y as u64 + self.h as u64
    }
}

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("ImageTooSmall: {width}x{height} cannot be split into a {l}x{l} grid")]
    ImageTooSmall { width: u32, height: u32, l: u32 },
    #[error("DegenerateCrop: fraction {fraction} of {width}x{height} leaves less than one pixel")]
    DegenerateCrop { width: u32, height: u32, fraction: f64 },
    #[error("crop fraction {0} must lie in (0, 1]")]
    InvalidFraction(f64),
    #[error("TileOutOfBounds: tile {tile:?} exceeds {width}x{height}")]
    TileOutOfBounds { tile: TileSpec, width: u32, height: u32 },
    #[error("DecodeError: {0}")]
    Decode(String),
    #[error("encode failed: {0}")]
    Encode(String),
}

/// Splits `len` into `parts` lengths differing by at most one, larger ones first.
fn split_axis(len: u32, parts: u32) -> Vec<(u32, u32)> {
    let base = len / parts;
    let rem = len % parts;
    let mut offset = 0;
    (0..parts)
        .map(|i| {
            let size = base + u32::from(i < rem);
            let seg = (offset, size);
            offset += size;
            seg
        })
        .collect()
}

/// Row-major `l × l` non-overlapping partition covering the whole image.
/// Remainder pixels go to the leftmost columns and topmost rows.
pub fn grid_partition(width: u32, height: u32, l: u32) -> Result<Vec<TileSpec>, ImageError> {
    if l == 0 || width < l || height < l {
        return Err(ImageError::ImageTooSmall { width, height, l });
    }
    let cols = split_axis(width, l);
    let rows = split_axis(height, l);
    let mut tiles = Vec::with_capacity((l * l) as usize);
    for (row, &(y, h)) in rows.iter().enumerate() {
        for (col, &(x, w)) in cols.iter().enumerate() {
            tiles.push(TileSpec {
                x,
                y,
                w,
                h,
                row: row as u32,
                col: col as u32,
            });
        }
    }
    Ok(tiles)
}

/// Centered crop keeping `fraction` of each dimension (round half up); odd
/// leftover pixels put the crop one pixel toward the top-left.
pub fn central_crop(width: u32, height: u32, fraction: f64) -> Result<TileSpec, ImageError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(ImageError::InvalidFraction(fraction));
    }
    let size = |dim: u32| ((fraction * dim as f64) + 0.5).floor().min(dim as f64) as u32;
    let (w, h) = (size(width), size(height));
    if w < 1 || h < 1 {
        return Err(ImageError::DegenerateCrop { width, height, fraction });
    }
    Ok(TileSpec {
        x: (width - w) / 2,
        y: (height - h) / 2,
        w,
        h,
        row: 0,
        col: 0,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TileFormat {
    #[default]
    Png,
    Jpeg,
}

impl TileFormat {
    pub fn media_type(&self) -> &'static str {
        match self {
            TileFormat::Png => "image/png",
            TileFormat::Jpeg => "image/jpeg",
        }
    }
}

/// Encoded image bytes plus their media type.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedImage {
    pub bytes: Vec<u8>,
    pub media_type: String,
}

pub fn decode_file(path: &Path) -> Result<DynamicImage, ImageError> {
    image::open(path).map_err(|e| ImageError::Decode(format!("{}: {e}", path.display())))
}

/// Reads width and height from the file header without decoding pixels.
pub fn image_dimensions(path: &Path) -> Result<(u32, u32), ImageError> {
    image::image_dimensions(path).map_err(|e| ImageError::Decode(format!("{}: {e}", path.display())))
}

pub fn encode_tile(img: &DynamicImage, tile: &TileSpec, format: TileFormat) -> Result<EncodedImage, ImageError> {
    let (width, height) = img.dimensions();
    if !tile.fits_in(width, height) {
        return Err(ImageError::TileOutOfBounds { tile: *tile, width, height });
    }
    let sub = img.crop_imm(tile.x, tile.y, tile.w, tile.h);
    let mut bytes = Vec::new();
    let fmt = match format {
        TileFormat::Png => image::ImageFormat::Png,
        TileFormat::Jpeg => image::ImageFormat::Jpeg,
    };
    let sub = match format {
        // JPEG has no alpha channel
        TileFormat::Jpeg => DynamicImage::ImageRgb8(sub.to_rgb8()),
        TileFormat::Png => sub,
    };
    sub.write_to(&mut Cursor::new(&mut bytes), fmt)
        .map_err(|e| ImageError::Encode(e.to_string()))?;
    Ok(EncodedImage {
        bytes,
        media_type: format.media_type().to_string(),
    })
}

pub fn extract_and_encode(image_path: &Path, tile: &TileSpec, format: TileFormat) -> Result<EncodedImage, ImageError> {
    encode_tile(&decode_file(image_path)?, tile, format)
}
