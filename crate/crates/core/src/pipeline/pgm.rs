use std::fs;
use std::path::Path;

use super::data::SegMap;
use crate::format::FormatError;

/// Binary PGM bytes with class labels spread evenly over 0..=255.
pub fn encode_pgm(map: &SegMap, classes: usize) -> Vec<u8> {
    let step = if classes > 1 { 255 / (classes - 1) } else { 0 };
    let mut out = format!("P5\n{} {}\n255\n", map.width, map.height).into_bytes();
    out.extend(map.labels.iter().map(|&l| (l * step).min(255) as u8));
    out
}

pub fn write_pgm(map: &SegMap, classes: usize, path: &Path) -> Result<(), FormatError> {
    fs::write(path, encode_pgm(map, classes))?;
    Ok(())
}
