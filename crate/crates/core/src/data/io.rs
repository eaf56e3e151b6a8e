//! PNG and NIfTI readers/writers for grayscale images and masks.

use std::path::Path;

use image::{ImageBuffer, Luma};
use ndarray::{Array2, Array3};

use crate::error::{Error, Result};
use crate::geometry::GroundTruthMask;

fn codec_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        reason: e.to_string(),
    }
}

/// Reads an 8- or 16-bit PNG as grayscale values in the file's native range.
/// Color images are converted to luma.
pub fn read_gray(path: &Path) -> Result<Array2<f32>> {
    let img = image::open(path).map_err(|e| codec_err(path, e))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let values: Vec<f32> = match img {
        image::DynamicImage::ImageLuma8(b) => b.into_raw().into_iter().map(f32::from).collect(),
        image::DynamicImage::ImageLuma16(b) => b.into_raw().into_iter().map(f32::from).collect(),
        other if other.color().bytes_per_pixel() > other.color().channel_count() => {
            other.into_luma16().into_raw().into_iter().map(f32::from).collect()
        }
        other => other.into_luma8().into_raw().into_iter().map(f32::from).collect(),
    };
    Array2::from_shape_vec((h, w), values).map_err(|e| codec_err(path, e))
}

/// Writes values rounded and clamped to `0..=255`.
pub fn write_gray8(path: &Path, img: &Array2<f32>) -> Result<()> {
    let (h, w) = img.dim();
    let raw: Vec<u8> = img.iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect();
    let buf: ImageBuffer<Luma<u8>, _> =
        ImageBuffer::from_raw(w as u32, h as u32, raw).expect("buffer sized from array");
    buf.save(path).map_err(|e| codec_err(path, e))
}

/// Writes `[0, 1]` values scaled to the full 16-bit range.
pub fn write_unit16(path: &Path, img: &Array2<f64>) -> Result<()> {
    let (h, w) = img.dim();
    let raw: Vec<u16> = img
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16)
        .collect();
    let buf: ImageBuffer<Luma<u16>, _> =
        ImageBuffer::from_raw(w as u32, h as u32, raw).expect("buffer sized from array");
    buf.save(path).map_err(|e| codec_err(path, e))
}

pub fn read_mask(path: &Path) -> Result<GroundTruthMask> {
    let g = read_gray(path)?;
    Ok(GroundTruthMask::new(g.mapv(|v| u8::from(v != 0.0))))
}

/// Foreground stored as 255.
pub fn write_mask(path: &Path, mask: &GroundTruthMask) -> Result<()> {
    write_gray8(path, &mask.grid.mapv(|v| if v != 0 { 255.0 } else { 0.0 }))
}

pub fn is_nifti(path: &Path) -> bool {
    let name = path.to_string_lossy();
    name.ends_with(".nii") || name.ends_with(".nii.gz")
}

/// A volume as `(slice, row, col)` with in-plane spacing `(row, col)` in mm.
#[derive(Debug, Clone)]
pub struct Volume {
    pub data: Array3<f32>,
    pub spacing: [f64; 2],
}

/// Reads a 2-D or 3-D NIfTI file. Rows follow the second voxel axis, columns
/// the first, slices the third.
pub fn read_nifti(path: &Path) -> Result<Volume> {
    use nifti::{IntoNdArray, NiftiObject, ReaderOptions};
    let obj = ReaderOptions::new().read_file(path).map_err(|e| codec_err(path, e))?;
    let pixdim = obj.header().pixdim;
    let arr = obj
        .into_volume()
        .into_ndarray::<f32>()
        .map_err(|e| codec_err(path, e))?;
    let shape = arr.shape().to_vec();
    let (nx, ny, nz) = match shape.as_slice() {
        [x, y] => (*x, *y, 1),
        [x, y, z] | [x, y, z, 1] => (*x, *y, *z),
        _ => return Err(codec_err(path, format!("unsupported NIfTI shape {shape:?}"))),
    };
    let rank = shape.len();
    let data = Array3::from_shape_fn((nz, ny, nx), |(z, y, x)| {
        let idx = [x, y, z, 0];
        arr[ndarray::IxDyn(&idx[..rank])]
    });
    let spacing = |v: f32| if v > 0.0 { f64::from(v) } else { 1.0 };
    Ok(Volume {
        data,
        spacing: [spacing(pixdim[2]), spacing(pixdim[1])],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gray8_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        let img = Array2::from_shape_fn((5, 7), |(r, c)| (r * 40 + c) as f32);
        write_gray8(&p, &img).unwrap();
        assert_eq!(read_gray(&p).unwrap(), img);
    }

    #[test]
    fn sixteen_bit_keeps_range() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        let img = Array2::from_shape_fn((3, 3), |(r, c)| (r * 3 + c) as f64 / 8.0);
        write_unit16(&p, &img).unwrap();
        let back = read_gray(&p).unwrap();
        assert_eq!(back[[2, 2]], 65535.0);
        assert_eq!(back[[0, 0]], 0.0);
    }

    #[test]
    fn mask_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.png");
        let m = GroundTruthMask::new(Array2::from_shape_fn((6, 4), |(r, c)| u8::from(r > c)));
        write_mask(&p, &m).unwrap();
        assert_eq!(read_mask(&p).unwrap(), m);
    }

    #[test]
    fn nifti_volume_axes() {
        use nifti::writer::WriterOptions;
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.nii");
        // voxel axes (x=4, y=3, z=2)
        let vol = ndarray::Array3::from_shape_fn((4, 3, 2), |(x, y, z)| (x + 10 * y + 100 * z) as f32);
        WriterOptions::new(&p).write_nifti(&vol).unwrap();
        let v = read_nifti(&p).unwrap();
        assert_eq!(v.data.dim(), (2, 3, 4));
        assert_eq!(v.data[[1, 2, 3]], 123.0);
    }
}
