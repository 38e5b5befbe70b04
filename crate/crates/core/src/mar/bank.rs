//! The key-value memory: per-class hard features as keys, class prototypes as values.
//!
//! File layout (little-endian): magic `MARB`, u32 version, u32 C, u32 K_L,
//! u32 d; then `C·K_L` key records `{u32 class label, d × f32}`; then `C`
//! prototype records `{d × f32}`. Keys are ordered by class, then by
//! ascending confidence.

use std::fs;
use std::path::Path;

use crate::format::{put_f32s, put_u32, FormatError, Reader};
use crate::numerics::Tensor;
use crate::{Error, Result};

pub const BANK_MAGIC: [u8; 4] = *b"MARB";
pub const BANK_VERSION: u32 = 1;
pub const BANK_HEADER_BYTES: usize = 20;

/// Default number of hard features kept per class.
pub const DEFAULT_K_LOW: usize = 10;
/// Default number of confident features averaged into each prototype.
pub const DEFAULT_K_HIGH: usize = 10;

#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBank {
    classes: usize,
    keys_per_class: usize,
    /// `[C·K_L, d]`, one hard feature per row.
    keys: Tensor,
    /// Class label of each key row.
    labels: Vec<usize>,
    /// `[C, d]`, one prototype per row.
    prototypes: Tensor,
}

impl MemoryBank {
    pub fn new(keys: Tensor, labels: Vec<usize>, prototypes: Tensor) -> Result<Self> {
        let classes = prototypes.shape()[0];
        let d = prototypes.last_dim();
        if keys.rank() != 2 || prototypes.rank() != 2 || keys.last_dim() != d {
            return Err(Error::Shape {
                what: "memory keys vs prototypes",
                expected: vec![keys.rows(), d],
                found: keys.shape().to_vec(),
            });
        }
        if labels.len() != keys.rows() || !keys.rows().is_multiple_of(classes) {
            return Err(Error::Contract(format!(
                "{} keys with {} labels cannot be split evenly over {classes} classes",
                keys.rows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(FormatError::LabelOutOfRange {
                label: bad as u32,
                classes: classes as u32,
            }
            .into());
        }
        Ok(Self {
            classes,
            keys_per_class: keys.rows() / classes,
            keys,
            labels,
            prototypes,
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn keys_per_class(&self) -> usize {
        self.keys_per_class
    }

    pub fn dim(&self) -> usize {
        self.prototypes.last_dim()
    }

    pub fn keys(&self) -> &Tensor {
        &self.keys
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn prototypes(&self) -> &Tensor {
        &self.prototypes
    }

    /// `[C·K_L, d]` matrix whose row `i` is the prototype of key `i`'s class.
    pub fn values_by_key(&self) -> Tensor {
        let data = self
            .labels
            .iter()
            .flat_map(|&c| self.prototypes.row(c).iter().copied())
            .collect();
        Tensor::new(vec![self.labels.len(), self.dim()], data).expect("one prototype row per key")
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(
            BANK_HEADER_BYTES
                + self.keys.rows() * (4 + 4 * self.dim())
                + self.prototypes.numel() * 4,
        );
        out.extend_from_slice(&BANK_MAGIC);
        put_u32(&mut out, BANK_VERSION);
        put_u32(&mut out, self.classes as u32);
        put_u32(&mut out, self.keys_per_class as u32);
        put_u32(&mut out, self.dim() as u32);
        for (i, &label) in self.labels.iter().enumerate() {
            put_u32(&mut out, label as u32);
            put_f32s(&mut out, self.keys.row(i));
        }
        put_f32s(&mut out, self.prototypes.data());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FormatError> {
        let mut r = Reader::new(bytes);
        r.magic(BANK_MAGIC)?;
        r.version(BANK_VERSION)?;
        let classes = r.u32()?;
        let per_class = r.u32()? as usize;
        let d = r.u32()? as usize;
        if classes == 0 || per_class == 0 || d == 0 {
            return Err(FormatError::InvalidShape(vec![
                classes as usize,
                per_class,
                d,
            ]));
        }
        let n = classes as usize * per_class;
        let mut keys = Vec::with_capacity(n * d);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let label = r.u32()?;
            if label >= classes {
                return Err(FormatError::LabelOutOfRange { label, classes });
            }
            labels.push(label as usize);
            keys.extend(r.f32s(d)?.into_iter().map(f64::from));
        }
        let protos: Vec<f64> = r
            .f32s(classes as usize * d)?
            .into_iter()
            .map(f64::from)
            .collect();
        r.finish()?;
        let keys =
            Tensor::new(vec![n, d], keys).map_err(|_| FormatError::InvalidShape(vec![n, d]))?;
        let prototypes = Tensor::new(vec![classes as usize, d], protos)
            .map_err(|_| FormatError::InvalidShape(vec![classes as usize, d]))?;
        Ok(Self {
            classes: classes as usize,
            keys_per_class: per_class,
            keys,
            labels,
            prototypes,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), FormatError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, FormatError> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Rounds keys and prototypes through `f32`, the precision of the file format.
    pub fn quantized(&self) -> Self {
        let q = |t: &Tensor| t.map(|v| v as f32 as f64);
        Self {
            keys: q(&self.keys),
            prototypes: q(&self.prototypes),
            ..self.clone()
        }
    }
}

/// Index of the first maximum.
pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Builds the memory from per-pixel training features `[n, d]`, ground-truth
/// labels and classifier logits `[n, C]`.
///
/// Misclassified features are dropped. The confidence of a surviving feature
/// is the softmax probability of its ground-truth class. Per class, the
/// `k_low` least confident survivors become keys and the mean of the `k_high`
/// most confident survivors becomes the prototype; ties keep first-seen order.
pub fn build_memory(
    features: &Tensor,
    labels: &[usize],
    logits: &Tensor,
    k_low: usize,
    k_high: usize,
) -> Result<MemoryBank> {
    if k_low == 0 || k_high == 0 {
        return Err(Error::Config("K_L and K_H must be at least 1".into()));
    }
    let n = features.rows();
    if labels.len() != n || logits.rows() != n || features.rank() != 2 || logits.rank() != 2 {
        return Err(Error::Shape {
            what: "features, labels and logits",
            expected: vec![n, n, n],
            found: vec![features.rows(), labels.len(), logits.rows()],
        });
    }
    let classes = logits.last_dim();
    let d = features.last_dim();
    let mut per_class: Vec<Vec<(f64, usize)>> = vec![Vec::new(); classes];
    let mut probs = vec![0.0; classes];
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::Contract(format!(
                "label {y} out of range for {classes} classes"
            )));
        }
        let row = logits.row(i);
        if argmax(row) != y {
            continue;
        }
        probs.copy_from_slice(row);
        crate::numerics::softmax_in_place(&mut probs);
        per_class[y].push((probs[y], i));
    }

    let mut keys = Vec::with_capacity(classes * k_low * d);
    let mut key_labels = Vec::with_capacity(classes * k_low);
    let mut prototypes = Vec::with_capacity(classes * d);
    for (c, mut found) in per_class.into_iter().enumerate() {
        let required = k_low.max(k_high);
        if found.len() < required {
            return Err(Error::InsufficientClassSamples {
                class: c,
                available: found.len(),
                required,
            });
        }
        // Stable sorts keep first-seen order among equal confidences.
        found.sort_by(|a, b| a.0.total_cmp(&b.0));
        for &(_, i) in &found[..k_low] {
            keys.extend_from_slice(features.row(i));
            key_labels.push(c);
        }
        found.sort_by(|a, b| b.0.total_cmp(&a.0));
        let mut mean = vec![0.0; d];
        for &(_, i) in &found[..k_high] {
            for (m, v) in mean.iter_mut().zip(features.row(i)) {
                *m += v;
            }
        }
        prototypes.extend(mean.into_iter().map(|m| m / k_high as f64));
    }
    MemoryBank::new(
        Tensor::new(vec![classes * k_low, d], keys)?,
        key_labels,
        Tensor::new(vec![classes, d], prototypes)?,
    )
}
