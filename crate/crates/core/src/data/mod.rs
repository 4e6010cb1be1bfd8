//! Datasets: the bundle type, IDX ingestion, synthetic generators, the
//! per-class random subset used as a distilled-set proxy, augmentation and
//! an on-disk cache.

pub mod augment;
pub mod cache;
pub mod idx;
pub mod synthetic;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::labels::{LabelMatrix, LabelRole};
use crate::rng;
use crate::tensor::Tensor;

pub use augment::{augment_batch, AugmentConfig, AugmentOp};
pub use cache::{load_bundle, save_bundle};
pub use idx::{load_idx, write_idx};
pub use synthetic::{make_synthetic, SyntheticKind, SyntheticSpec};

/// Images with their hard labels and, once a teacher has been run, soft
/// labels and teacher logits. All members share the row order.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    pub images: Tensor,
    pub hard: LabelMatrix,
    pub soft: Option<LabelMatrix>,
    pub teacher_logits: Option<Tensor>,
    pub classes: usize,
    pub name: String,
}

impl DatasetBundle {
    pub fn new(images: Tensor, hard: LabelMatrix, name: impl Into<String>) -> Result<Self> {
        let bundle = Self {
            classes: hard.num_classes(),
            images,
            hard,
            soft: None,
            teacher_logits: None,
            name: name.into(),
        };
        bundle.validate()?;
        Ok(bundle)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.images.rows();
        if self.images.ndim() < 2 {
            return Err(Error::invalid(format!(
                "images must be [N, ...], got {:?}",
                self.images.shape()
            )));
        }
        if self.hard.role() != LabelRole::Hard {
            return Err(Error::LabelRole {
                expected: "hard".into(),
                found: self.hard.role().to_string(),
            });
        }
        if self.hard.len() != n {
            return Err(Error::CountMismatch {
                images: n,
                labels: self.hard.len(),
            });
        }
        if self.hard.num_classes() != self.classes {
            return Err(Error::invalid("hard label width differs from class count"));
        }
        if let Some(soft) = &self.soft {
            if soft.len() != n || soft.num_classes() != self.classes {
                return Err(Error::invalid(format!(
                    "soft labels are {}x{}, expected {n}x{}",
                    soft.len(),
                    soft.num_classes(),
                    self.classes
                )));
            }
        }
        if let Some(t) = &self.teacher_logits {
            if t.shape() != [n, self.classes] {
                return Err(Error::invalid(format!(
                    "teacher logits {:?}, expected [{n}, {}]",
                    t.shape(),
                    self.classes
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.images.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Per-sample shape, without the batch axis.
    pub fn sample_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    pub fn with_soft(mut self, soft: LabelMatrix) -> Result<Self> {
        self.soft = Some(soft);
        self.validate()?;
        Ok(self)
    }

    pub fn with_teacher_logits(mut self, logits: Tensor) -> Result<Self> {
        self.teacher_logits = Some(logits);
        self.validate()?;
        Ok(self)
    }

    /// Rows `indices`, in that order, of every member.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            images: self.images.select_rows(indices),
            hard: self.hard.select_rows(indices),
            soft: self.soft.as_ref().map(|s| s.select_rows(indices)),
            teacher_logits: self.teacher_logits.as_ref().map(|t| t.select_rows(indices)),
            classes: self.classes,
            name: self.name.clone(),
        }
    }

    /// Row indices grouped by class, in dataset order.
    pub fn class_indices(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.classes];
        for (i, c) in self.hard.classes().into_iter().enumerate() {
            out[c].push(i);
        }
        out
    }

    /// Rows whose class satisfies `keep`.
    pub fn filter_classes(&self, keep: impl Fn(usize) -> bool) -> Self {
        let idx: Vec<usize> = self
            .hard
            .classes()
            .into_iter()
            .enumerate()
            .filter(|&(_, c)| keep(c))
            .map(|(i, _)| i)
            .collect();
        self.select(&idx)
    }
}

/// Exactly `ipc` rows per class drawn uniformly without replacement. Each
/// class has its own stream derived from `seed`, so the subset of any class
/// does not depend on which other classes are present. Output is grouped by
/// class in ascending order.
pub fn select_ipc_subset(data: &DatasetBundle, ipc: usize, seed: u64) -> Result<DatasetBundle> {
    if ipc == 0 {
        return Err(Error::invalid("ipc must be positive"));
    }
    let groups = data.class_indices();
    if let Some((class, g)) = groups.iter().enumerate().find(|(_, g)| g.len() < ipc) {
        return Err(Error::InsufficientSamples {
            class,
            available: g.len(),
            requested: ipc,
        });
    }
    let mut chosen = Vec::with_capacity(ipc * data.classes);
    for (class, mut group) in groups.into_iter().enumerate() {
        let mut r = rng::rng(rng::derive_seed(seed, "ipc-subset", &[class as u64]));
        let (picked, _) = group.partial_shuffle(&mut r, ipc);
        chosen.extend_from_slice(picked);
    }
    let mut out = data.select(&chosen);
    out.name = format!("{}-ipc{ipc}", data.name);
    Ok(out)
}
