//! IDX (MNIST format) reader and writer.

use std::path::Path;

use crate::data::DatasetBundle;
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::labels::LabelMatrix;
use crate::tensor::Tensor;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_be_bytes(b.try_into().expect("4 bytes")))
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Truncated {
                path: self.path.to_path_buf(),
                message: format!(
                    "{what}: need {n} bytes at offset {}, file has {}",
                    self.pos,
                    self.bytes.len()
                ),
            });
        };
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn magic(&mut self, expected: u32) -> Result<()> {
        let found = self.u32("magic")?;
        if found != expected {
            return Err(Error::BadMagic {
                path: self.path.to_path_buf(),
                expected,
                found,
            });
        }
        Ok(())
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Loads an IDX image/label pair. Pixels are scaled to `[0, 1]` and the
/// images get shape `[N, 1, H, W]`. The class count is `max label + 1`,
/// at least 2.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<DatasetBundle> {
    let img_bytes = read(images_path)?;
    let mut r = Reader {
        path: images_path,
        bytes: &img_bytes,
        pos: 0,
    };
    r.magic(IMAGE_MAGIC)?;
    let n = r.u32("image count")? as usize;
    let h = r.u32("rows")? as usize;
    let w = r.u32("cols")? as usize;
    let pixels = r.take(n * h * w, "pixel data")?;
    let data: Vec<f64> = pixels.iter().map(|&p| f64::from(p) / 255.0).collect();

    let lbl_bytes = read(labels_path)?;
    let mut r = Reader {
        path: labels_path,
        bytes: &lbl_bytes,
        pos: 0,
    };
    r.magic(LABEL_MAGIC)?;
    let m = r.u32("label count")? as usize;
    if m != n {
        return Err(Error::CountMismatch { images: n, labels: m });
    }
    let labels: Vec<usize> = r.take(m, "label data")?.iter().map(|&b| b as usize).collect();
    let classes = labels.iter().copied().max().map_or(2, |c| (c + 1).max(2));

    let images = Tensor::new(vec![n, 1, h, w], data)?;
    let hard = LabelMatrix::from_classes(&labels, classes)?;
    let stem = images_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "idx".into());
    DatasetBundle::new(images, hard, stem)
}

/// Writes an IDX pair from raw bytes, e.g. for fixtures.
pub fn write_idx(
    images_path: &Path,
    labels_path: &Path,
    height: usize,
    width: usize,
    pixels: &[u8],
    labels: &[u8],
) -> Result<()> {
    let n = labels.len();
    if pixels.len() != n * height * width {
        return Err(Error::CountMismatch {
            images: pixels.len() / (height * width).max(1),
            labels: n,
        });
    }
    let mut img = Vec::with_capacity(16 + pixels.len());
    for v in [IMAGE_MAGIC, n as u32, height as u32, width as u32] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    img.extend_from_slice(pixels);
    let mut lbl = Vec::with_capacity(8 + n);
    for v in [LABEL_MAGIC, n as u32] {
        lbl.extend_from_slice(&v.to_be_bytes());
    }
    lbl.extend_from_slice(labels);
    write_atomic(images_path, &img)?;
    write_atomic(labels_path, &lbl)
}

/// Standardizes each channel of `[N, C, H, W]` images to zero mean and unit
/// variance, returning the per-channel `(mean, std)` used.
pub fn standardize_channels(images: &mut Tensor) -> Result<Vec<(f64, f64)>> {
    if images.ndim() != 4 {
        return Err(Error::invalid(format!(
            "expected [N, C, H, W] images, got {:?}",
            images.shape()
        )));
    }
    let [n, c, h, w] = [images.shape()[0], images.shape()[1], images.shape()[2], images.shape()[3]];
    let plane = h * w;
    let data = images.data_mut();
    let mut stats = Vec::with_capacity(c);
    for ch in 0..c {
        let idx = || (0..n).flat_map(move |s| (0..plane).map(move |p| (s * c + ch) * plane + p));
        let count = (n * plane) as f64;
        let mean = idx().map(|i| data[i]).sum::<f64>() / count;
        let var = idx().map(|i| (data[i] - mean).powi(2)).sum::<f64>() / count;
        let std = var.sqrt().max(1e-12);
        for i in idx() {
            data[i] = (data[i] - mean) / std;
        }
        stats.push((mean, std));
    }
    Ok(stats)
}
