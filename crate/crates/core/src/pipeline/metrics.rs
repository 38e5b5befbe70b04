use super::data::SegMap;
use crate::{Error, Result};

/// Pixel confusion counts, `counts[gt * C + pred]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Confusion {
    classes: usize,
    counts: Vec<u64>,
}

impl Confusion {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn add(&mut self, pred: &SegMap, gt: &SegMap) -> Result<()> {
        if (pred.height, pred.width) != (gt.height, gt.width) {
            return Err(Error::Shape {
                what: "prediction vs ground truth",
                expected: vec![gt.height, gt.width],
                found: vec![pred.height, pred.width],
            });
        }
        let c = self.classes;
        if let Some(&bad) = pred.labels.iter().chain(&gt.labels).find(|&&l| l >= c) {
            return Err(Error::Contract(format!(
                "label {bad} out of range for {c} classes"
            )));
        }
        for (&p, &g) in pred.labels.iter().zip(&gt.labels) {
            self.counts[g * c + p] += 1;
        }
        Ok(())
    }

    /// IoU of class `c`, or `None` if it appears in neither map.
    pub fn iou(&self, class: usize) -> Option<f64> {
        let c = self.classes;
        let inter = self.counts[class * c + class];
        let gt: u64 = self.counts[class * c..(class + 1) * c].iter().sum();
        let pred: u64 = (0..c).map(|g| self.counts[g * c + class]).sum();
        let union = gt + pred - inter;
        (union > 0).then(|| inter as f64 / union as f64)
    }

    pub fn per_class(&self) -> Vec<Option<f64>> {
        (0..self.classes).map(|c| self.iou(c)).collect()
    }

    /// Mean IoU over classes present in prediction or ground truth.
    pub fn miou(&self) -> Option<f64> {
        let present: Vec<f64> = self.per_class().into_iter().flatten().collect();
        (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MiouReport {
    pub miou: f64,
    pub per_class: Vec<Option<f64>>,
}

pub fn miou(pred: &SegMap, gt: &SegMap, classes: usize) -> Result<MiouReport> {
    let mut conf = Confusion::new(classes);
    conf.add(pred, gt)?;
    let miou = conf
        .miou()
        .ok_or_else(|| Error::Contract("mIoU of empty maps is undefined".into()))?;
    Ok(MiouReport {
        miou,
        per_class: conf.per_class(),
    })
}

/// Dataset-level mIoU from pooled confusion counts.
pub fn miou_many<'a>(
    pairs: impl IntoIterator<Item = (&'a SegMap, &'a SegMap)>,
    classes: usize,
) -> Result<f64> {
    let mut conf = Confusion::new(classes);
    for (p, g) in pairs {
        conf.add(p, g)?;
    }
    conf.miou()
        .ok_or_else(|| Error::Contract("mIoU of empty maps is undefined".into()))
}
