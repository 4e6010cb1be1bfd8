//! On-disk bundle cache: raw little-endian f64 images, label files in the
//! binary label format, and a JSON sidecar.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::DatasetBundle;
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::labels::LabelMatrix;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Sidecar {
    name: String,
    shape: Vec<usize>,
    classes: usize,
    soft: bool,
    teacher_logits: bool,
}

fn paths(dir: &Path, stem: &str) -> [PathBuf; 5] {
    [
        dir.join(format!("{stem}.json")),
        dir.join(format!("{stem}.images.f64")),
        dir.join(format!("{stem}.hard.glbl")),
        dir.join(format!("{stem}.soft.glbl")),
        dir.join(format!("{stem}.logits.f64")),
    ]
}

fn f64_bytes(t: &Tensor) -> Vec<u8> {
    t.data().iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn read_f64(path: &Path, shape: Vec<usize>) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let expected = shape.iter().product::<usize>() * 8;
    if bytes.len() != expected {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            message: format!("expected {expected} bytes, found {}", bytes.len()),
        });
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Tensor::new(shape, data)
}

/// Writes `bundle` under `dir` with file stem `stem`. The sidecar is written
/// last, so a readable sidecar implies complete payload files.
pub fn save_bundle(bundle: &DatasetBundle, dir: &Path, stem: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let [meta, images, hard, soft, logits] = paths(dir, stem);
    write_atomic(&images, &f64_bytes(&bundle.images))?;
    bundle.hard.write_binary(&hard)?;
    if let Some(s) = &bundle.soft {
        s.write_binary(&soft)?;
    }
    if let Some(t) = &bundle.teacher_logits {
        write_atomic(&logits, &f64_bytes(t))?;
    }
    let sidecar = Sidecar {
        name: bundle.name.clone(),
        shape: bundle.images.shape().to_vec(),
        classes: bundle.classes,
        soft: bundle.soft.is_some(),
        teacher_logits: bundle.teacher_logits.is_some(),
    };
    write_atomic(&meta, serde_json::to_string_pretty(&sidecar)?.as_bytes())?;
    Ok(meta)
}

pub fn load_bundle(dir: &Path, stem: &str) -> Result<DatasetBundle> {
    let [meta, images, hard, soft, logits] = paths(dir, stem);
    let text = std::fs::read_to_string(&meta).map_err(|e| Error::io(&meta, e))?;
    let side: Sidecar = serde_json::from_str(&text)?;
    let n = side.shape.first().copied().unwrap_or(0);
    let mut bundle = DatasetBundle::new(
        read_f64(&images, side.shape.clone())?,
        LabelMatrix::read_binary(&hard)?,
        side.name,
    )?;
    if side.soft {
        bundle = bundle.with_soft(LabelMatrix::read_binary(&soft)?)?;
    }
    if side.teacher_logits {
        bundle = bundle.with_teacher_logits(read_f64(&logits, vec![n, side.classes])?)?;
    }
    Ok(bundle)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SyntheticSpec;
    use crate::labels::softmax_rows;

    #[test]
    fn round_trip() {
        let d = SyntheticSpec::blobs(3, 4, 5, 0.2, 0).generate().unwrap();
        let logits = Tensor::new(vec![12, 3], (0..36).map(|i| i as f64 * 0.1).collect()).unwrap();
        let soft = LabelMatrix::new(softmax_rows(&logits), crate::labels::LabelRole::Soft, "t").unwrap();
        let d = d.with_soft(soft).unwrap().with_teacher_logits(logits).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_bundle(&d, dir.path(), "pool").unwrap();
        let back = load_bundle(dir.path(), "pool").unwrap();
        assert_eq!(back.images, d.images);
        assert_eq!(back.hard.values(), d.hard.values());
        assert_eq!(back.soft.unwrap().values(), d.soft.unwrap().values());
        assert_eq!(back.teacher_logits, d.teacher_logits);
        assert_eq!(back.name, d.name);
    }

    #[test]
    fn missing_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_bundle(dir.path(), "none"), Err(Error::Io { .. })));
    }
}
