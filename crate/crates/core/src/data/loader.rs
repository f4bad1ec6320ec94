//! On-disk corpora laid out as `root/{images,masks[,depth]}/<stem>.<ext>` plus a
//! CSV manifest with one row per sample. The manifest is the split definition.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::{DynamicImage, ImageBuffer, Luma, Rgb};
use ndarray::Array3;
use serde::{Deserialize, Serialize};

use super::record::{SampleMeta, SampleRecord};
use crate::error::{DbdError, Result};

pub const IMAGE_DIR: &str = "images";
pub const MASK_DIR: &str = "masks";
pub const DEPTH_DIR: &str = "depth";
const IMAGE_EXTENSIONS: [&str; 5] = ["png", "jpg", "jpeg", "bmp", "PNG"];

/// Which mask intensity marks defocused pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskPolarity {
    /// White (255) = defocus.
    #[default]
    DefocusWhite,
    /// White (255) = in focus.
    FocusWhite,
}

impl FromStr for MaskPolarity {
    type Err = DbdError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "defocus_white" => Ok(Self::DefocusWhite),
            "focus_white" => Ok(Self::FocusWhite),
            other => Err(DbdError::Config(format!(
                "unknown mask polarity {other:?} (expected defocus_white or focus_white)"
            ))),
        }
    }
}

/// One manifest line. Only `stem` is required.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub stem: String,
    #[serde(default)]
    pub regime: Option<String>,
    #[serde(default)]
    pub focal_length_mm: Option<f64>,
    #[serde(default)]
    pub f_number: Option<f64>,
    #[serde(default)]
    pub focus_distance_m: Option<f64>,
    #[serde(default)]
    pub homogeneous: Option<bool>,
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| DbdError::load(path, e))?;
    reader
        .deserialize()
        .map(|row| row.map_err(|e| DbdError::load(path, e)))
        .collect()
}

pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| DbdError::load(path, e))?;
    for row in rows {
        writer.serialize(row).map_err(|e| DbdError::load(path, e))?;
    }
    writer.flush()?;
    Ok(())
}

fn find_file(dir: &Path, stem: &str) -> Option<PathBuf> {
    IMAGE_EXTENSIONS
        .iter()
        .map(|ext| dir.join(format!("{stem}.{ext}")))
        .find(|p| p.is_file())
}

fn open_image(path: &Path) -> Result<DynamicImage> {
    image::open(path).map_err(|e| DbdError::load(path, e))
}

/// RGB in `[0, 1]`, channel-first.
pub fn read_rgb(path: &Path) -> Result<Array3<f32>> {
    let rgb = open_image(path)?.to_rgb32f();
    let (w, h) = rgb.dimensions();
    Ok(Array3::from_shape_fn(
        (3, h as usize, w as usize),
        |(c, y, x)| rgb.get_pixel(x as u32, y as u32)[c],
    ))
}

/// Binary `[1, H, W]` defocus map: pixels above half of full range are positive.
pub fn read_mask(path: &Path, polarity: MaskPolarity) -> Result<Array3<f32>> {
    let luma = open_image(path)?.to_luma32f();
    let (w, h) = luma.dimensions();
    Ok(Array3::from_shape_fn(
        (1, h as usize, w as usize),
        |(_, y, x)| {
            let white = luma.get_pixel(x as u32, y as u32)[0] > 0.5;
            let defocus = match polarity {
                MaskPolarity::DefocusWhite => white,
                MaskPolarity::FocusWhite => !white,
            };
            if defocus {
                1.0
            } else {
                0.0
            }
        },
    ))
}

/// 16-bit depth in millimetres, returned in metres.
pub fn read_depth(path: &Path) -> Result<Array3<f32>> {
    let luma = open_image(path)?.to_luma16();
    let (w, h) = luma.dimensions();
    Ok(Array3::from_shape_fn(
        (1, h as usize, w as usize),
        |(_, y, x)| luma.get_pixel(x as u32, y as u32)[0] as f32 / 1000.0,
    ))
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn write_rgb(path: &Path, image: &Array3<f32>) -> Result<()> {
    let (_, h, w) = image.dim();
    let buf = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        Rgb([
            to_u8(image[[0, y, x]]),
            to_u8(image[[1, y, x]]),
            to_u8(image[[2, y, x]]),
        ])
    });
    buf.save(path).map_err(|e| DbdError::load(path, e))
}

/// Writes a `[1, H, W]` map in `[0, 1]` as 8-bit grayscale.
pub fn write_gray(path: &Path, map: &Array3<f32>) -> Result<()> {
    let (_, h, w) = map.dim();
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        Luma([to_u8(map[[0, y as usize, x as usize]])])
    });
    buf.save(path).map_err(|e| DbdError::load(path, e))
}

pub fn write_depth(path: &Path, depth: &Array3<f32>) -> Result<()> {
    let (_, h, w) = depth.dim();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let mm = (depth[[0, y as usize, x as usize]] * 1000.0).round();
        Luma([mm.clamp(0.0, u16::MAX as f32) as u16])
    });
    buf.save(path).map_err(|e| DbdError::load(path, e))
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LoadOptions {
    pub polarity: MaskPolarity,
}

/// Reads every manifest row from `root`, in manifest order.
pub fn load_dataset(
    root: &Path,
    manifest: &Path,
    options: LoadOptions,
) -> Result<Vec<SampleRecord>> {
    let rows = read_manifest(manifest)?;
    let images = root.join(IMAGE_DIR);
    let masks = root.join(MASK_DIR);
    let depths = root.join(DEPTH_DIR);
    let mut out = Vec::with_capacity(rows.len());
    for row in rows {
        let image_path = find_file(&images, &row.stem)
            .ok_or_else(|| DbdError::load(&images, format!("no image for stem {:?}", row.stem)))?;
        let mask_path = find_file(&masks, &row.stem).ok_or_else(|| {
            DbdError::load(&masks, format!("missing mask for stem {:?}", row.stem))
        })?;
        let depth = match find_file(&depths, &row.stem) {
            Some(p) => Some(read_depth(&p)?),
            None => None,
        };
        let record = SampleRecord {
            image: read_rgb(&image_path)?,
            blur_label: read_mask(&mask_path, options.polarity)?,
            depth,
            meta: SampleMeta {
                aperture_f_number: row.f_number,
                focus_distance: row.focus_distance_m,
                source_id: row.stem.clone(),
                regime: row.regime.clone(),
                homogeneous: row.homogeneous.unwrap_or(false),
            },
        };
        record.validate()?;
        out.push(record);
    }
    Ok(out)
}

/// Image paths in `dir`, sorted by file name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| DbdError::load(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    paths.sort();
    Ok(paths)
}
