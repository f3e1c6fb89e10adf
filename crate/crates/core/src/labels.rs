//! The 14-class multi-label vocabulary and its canonical ordering.

use crate::error::{Error, Result};

pub const NUM_CLASSES: usize = 14;

/// Canonical class order; every label vector, report row, and manifest
/// column follows this ordering.
pub const CLASS_NAMES: [&str; NUM_CLASSES] = [
    "atelectasis",
    "cardiomegaly",
    "effusion",
    "infiltration",
    "mass",
    "nodule",
    "pneumonia",
    "pneumothorax",
    "consolidation",
    "edema",
    "emphysema",
    "fibrosis",
    "pleural_thickening",
    "hernia",
];

/// Index of the small-lesion class used by the resolution experiments.
pub const SMALL_LESION_CLASS: usize = 5; // nodule
/// Index of the class whose signal lives outside the lung region.
pub const OUT_OF_LUNG_CLASS: usize = 10; // emphysema

/// 14-slot binary or probability vector in canonical class order.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LabelVector(pub [f64; NUM_CLASSES]);

impl LabelVector {
    pub fn zeros() -> Self {
        LabelVector([0.0; NUM_CLASSES])
    }

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        if v.len() != NUM_CLASSES {
            return Err(Error::WrongArity(format!(
                "label vector must have {NUM_CLASSES} entries, got {}",
                v.len()
            )));
        }
        let mut a = [0.0; NUM_CLASSES];
        a.copy_from_slice(v);
        Ok(LabelVector(a))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn is_binary(&self) -> bool {
        self.0.iter().all(|&v| v == 0.0 || v == 1.0)
    }
}

impl std::ops::Index<usize> for LabelVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl std::ops::IndexMut<usize> for LabelVector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.0[i]
    }
}
