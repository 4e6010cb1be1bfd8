//! Deterministic synthetic classification corpora.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::data::DatasetBundle;
use crate::error::{Error, Result};
use crate::labels::LabelMatrix;
use crate::rng::{self, derive_seed};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticKind {
    /// Isotropic Gaussians around well-separated class centers.
    Blobs,
    /// Interleaved 2-D spiral arms, one per class.
    Spirals,
}

impl FromStr for SyntheticKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "blobs" => Ok(SyntheticKind::Blobs),
            "spirals" => Ok(SyntheticKind::Spirals),
            other => Err(Error::Config(format!("unknown synthetic kind `{other}`"))),
        }
    }
}

impl fmt::Display for SyntheticKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SyntheticKind::Blobs => "blobs",
            SyntheticKind::Spirals => "spirals",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub kind: SyntheticKind,
    pub classes: usize,
    pub per_class: usize,
    /// Per-sample shape; blobs are generated flat and reshaped.
    pub shape: Vec<usize>,
    pub noise: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn blobs(classes: usize, per_class: usize, dim: usize, noise: f64, seed: u64) -> Self {
        Self {
            kind: SyntheticKind::Blobs,
            classes,
            per_class,
            shape: vec![dim],
            noise,
            seed,
        }
    }

    pub fn spirals(classes: usize, per_class: usize, noise: f64, seed: u64) -> Self {
        Self {
            kind: SyntheticKind::Spirals,
            classes,
            per_class,
            shape: vec![2],
            noise,
            seed,
        }
    }

    pub fn with_shape(self, shape: Vec<usize>) -> Self {
        Self { shape, ..self }
    }

    fn dim(&self) -> usize {
        self.shape.iter().product()
    }

    fn validate(&self) -> Result<()> {
        if self.per_class < 1 {
            return Err(Error::invalid("per_class must be at least 1"));
        }
        if self.classes < 2 {
            return Err(Error::invalid("need at least 2 classes"));
        }
        if self.dim() == 0 {
            return Err(Error::invalid(format!("bad sample shape {:?}", self.shape)));
        }
        if self.noise < 0.0 || !self.noise.is_finite() {
            return Err(Error::invalid(format!("bad noise {}", self.noise)));
        }
        if self.kind == SyntheticKind::Spirals && self.shape != [2] {
            return Err(Error::invalid("spirals are 2-D; shape must be [2]"));
        }
        Ok(())
    }

    /// Unit-norm class centers: scaled basis vectors when `dim >= C`,
    /// normalized Gaussian directions otherwise.
    pub fn centers(&self) -> Result<Tensor> {
        self.validate()?;
        let (c, d) = (self.classes, self.dim());
        let mut centers = Tensor::zeros(&[c, d]);
        if d >= c {
            for k in 0..c {
                centers.row_mut(k)[k] = 1.0;
            }
        } else {
            let mut r = rng::rng(derive_seed(self.seed, "centers", &[]));
            let normal = Normal::new(0.0, 1.0).expect("unit normal");
            for k in 0..c {
                let row = centers.row_mut(k);
                row.iter_mut().for_each(|v| *v = normal.sample(&mut r));
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                row.iter_mut().for_each(|v| *v /= norm);
            }
        }
        Ok(centers)
    }

    fn sample(&self, per_class: usize, split: u64, name: String) -> Result<DatasetBundle> {
        self.validate()?;
        let (c, d) = (self.classes, self.dim());
        let n = c * per_class;
        let mut r = rng::rng(derive_seed(self.seed, "samples", &[split]));
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let mut data = Vec::with_capacity(n * d);
        let mut labels = Vec::with_capacity(n);
        match self.kind {
            SyntheticKind::Blobs => {
                let centers = self.centers()?;
                for k in 0..c {
                    for _ in 0..per_class {
                        data.extend(centers.row(k).iter().map(|&m| m + self.noise * normal.sample(&mut r)));
                        labels.push(k);
                    }
                }
            }
            SyntheticKind::Spirals => {
                let t_dist = Uniform::new_inclusive(0.0, 1.0);
                for k in 0..c {
                    for _ in 0..per_class {
                        let t: f64 = t_dist.sample(&mut r);
                        let angle = 3.0 * PI * t + 2.0 * PI * k as f64 / c as f64;
                        let radius = 0.1 + 0.9 * t;
                        data.push(radius * angle.cos() + self.noise * normal.sample(&mut r));
                        data.push(radius * angle.sin() + self.noise * normal.sample(&mut r));
                        labels.push(k);
                    }
                }
            }
        }
        let mut shape = vec![n];
        shape.extend(&self.shape);
        let images = Tensor::new(shape, data)?;
        DatasetBundle::new(images, LabelMatrix::from_classes(&labels, c)?, name)
    }

    pub fn name(&self) -> String {
        format!("{}-c{}-s{}", self.kind, self.classes, self.seed)
    }

    pub fn generate(&self) -> Result<DatasetBundle> {
        self.sample(self.per_class, 0, self.name())
    }

    /// Training split of `per_class` rows per class and an independent test
    /// split of `test_per_class`, sharing the class geometry.
    pub fn generate_split(&self, test_per_class: usize) -> Result<(DatasetBundle, DatasetBundle)> {
        let train = self.generate()?;
        let test = self.sample(test_per_class, 1, format!("{}-test", self.name()))?;
        Ok((train, test))
    }
}

pub fn make_synthetic(
    kind: SyntheticKind,
    classes: usize,
    per_class: usize,
    dim: usize,
    noise: f64,
    seed: u64,
) -> Result<DatasetBundle> {
    let spec = match kind {
        SyntheticKind::Blobs => SyntheticSpec::blobs(classes, per_class, dim, noise, seed),
        SyntheticKind::Spirals => SyntheticSpec::spirals(classes, per_class, noise, seed),
    };
    spec.generate()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blob_counts() {
        let d = make_synthetic(SyntheticKind::Blobs, 3, 100, 5, 0.5, 0).unwrap();
        assert_eq!(d.len(), 300);
        assert!(d.class_indices().iter().all(|g| g.len() == 100));
    }

    #[test]
    fn zero_noise_hits_centers() {
        for dim in [2, 8] {
            let spec = SyntheticSpec::blobs(4, 3, dim, 0.0, 5);
            let centers = spec.centers().unwrap();
            let d = spec.generate().unwrap();
            for i in 0..d.len() {
                let c = d.hard.classes()[i];
                assert_eq!(d.images.row(i), centers.row(c));
            }
        }
    }

    #[test]
    fn deterministic_and_seeded() {
        let a = make_synthetic(SyntheticKind::Spirals, 3, 20, 2, 0.05, 1).unwrap();
        let b = make_synthetic(SyntheticKind::Spirals, 3, 20, 2, 0.05, 1).unwrap();
        let c = make_synthetic(SyntheticKind::Spirals, 3, 20, 2, 0.05, 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.images, c.images);
    }

    #[test]
    fn rejects_empty_classes() {
        assert!(make_synthetic(SyntheticKind::Blobs, 3, 0, 4, 0.1, 0).is_err());
        assert!(SyntheticSpec::spirals(3, 5, 0.1, 0).with_shape(vec![3]).generate().is_err());
    }

    #[test]
    fn split_shares_geometry() {
        let spec = SyntheticSpec::blobs(3, 10, 6, 0.0, 2).with_shape(vec![1, 2, 3]);
        let (train, test) = spec.generate_split(4).unwrap();
        assert_eq!(train.images.shape(), &[30, 1, 2, 3]);
        assert_eq!(test.len(), 12);
        assert_eq!(train.images.row(0), test.images.row(0));
    }
}
