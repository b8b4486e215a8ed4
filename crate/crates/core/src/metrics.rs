//! Pixel-level evaluation: confusion counts, overall accuracy, IoU, error
//! maps, and the training cost figure.

use std::path::Path;

use serde::Serialize;

use crate::error::{param_err, shape_err, Result};
use crate::fsutil::write_atomic;

/// Guard added to the IoU denominator.
pub const IOU_EPSILON: f64 = 1e-15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn new(tp: u64, fp: u64, fn_: u64, tn: u64) -> Self {
        Self { tp, fp, fn_, tn }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

impl std::ops::AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
        self.tn += o.tn;
    }
}

fn binary<V: Into<f64> + Copy>(v: V, what: &str, i: usize) -> Result<bool> {
    match v.into() {
        x if x == 0.0 => Ok(false),
        x if x == 1.0 => Ok(true),
        x => Err(param_err!("{what} pixel {i} is {x}, masks must be 0 or 1")),
    }
}

/// Pixelwise tally of a predicted mask against the truth.
pub fn confusion<V: Into<f64> + Copy>(pred: &[V], truth: &[V]) -> Result<ConfusionCounts> {
    if pred.len() != truth.len() {
        return Err(shape_err!("prediction has {} pixels, truth has {}", pred.len(), truth.len()));
    }
    let mut c = ConfusionCounts::default();
    for (i, (&p, &t)) in pred.iter().zip(truth).enumerate() {
        match (binary(p, "prediction", i)?, binary(t, "truth", i)?) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

/// `(TP + TN) / total`.
pub fn overall_accuracy(c: &ConfusionCounts) -> Result<f64> {
    if c.total() == 0 {
        return Err(param_err!("overall accuracy of zero pixels"));
    }
    Ok((c.tp + c.tn) as f64 / c.total() as f64)
}

/// `TP / (TP + FN + FP + 1e-15)`; 0 when there is nothing to intersect.
pub fn iou(c: &ConfusionCounts) -> f64 {
    c.tp as f64 / (c.tp as f64 + c.fn_ as f64 + c.fp as f64 + IOU_EPSILON)
}

pub const WHITE: [u8; 3] = [255, 255, 255];
pub const RED: [u8; 3] = [255, 0, 0];
pub const BLUE: [u8; 3] = [0, 0, 255];
pub const BLACK: [u8; 3] = [0, 0, 0];

/// RGB image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[u8; 3]>,
}

impl RgbImage {
    /// Binary PPM (`P6`, maxval 255).
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.pixels.iter().flatten());
        out
    }

    pub fn count(&self, color: [u8; 3]) -> usize {
        self.pixels.iter().filter(|&&p| p == color).count()
    }
}

/// True positives white, false positives red, false negatives blue, true
/// negatives black.
pub fn error_map<V: Into<f64> + Copy>(pred: &[V], truth: &[V], width: usize, height: usize) -> Result<RgbImage> {
    if pred.len() != width * height || truth.len() != width * height {
        return Err(shape_err!("masks do not match a {width}x{height} image"));
    }
    let pixels = pred
        .iter()
        .zip(truth)
        .enumerate()
        .map(|(i, (&p, &t))| {
            Ok(match (binary(p, "prediction", i)?, binary(t, "truth", i)?) {
                (true, true) => WHITE,
                (true, false) => RED,
                (false, true) => BLUE,
                (false, false) => BLACK,
            })
        })
        .collect::<Result<_>>()?;
    Ok(RgbImage {
        width,
        height,
        pixels,
    })
}

pub fn write_ppm(image: &RgbImage, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &image.to_ppm())
}

/// Training cost: `CC = NE * TT / 60` minutes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CostReport {
    /// Number of epochs.
    pub ne: u64,
    /// Mean training time per epoch, seconds.
    pub tt_seconds: f64,
    pub cc_minutes: f64,
}

pub fn computational_cost(ne: u64, tt_seconds: f64) -> Result<CostReport> {
    if !(tt_seconds >= 0.0 && tt_seconds.is_finite()) {
        return Err(param_err!("time per epoch must be finite and non-negative, got {tt_seconds}"));
    }
    Ok(CostReport {
        ne,
        tt_seconds,
        cc_minutes: ne as f64 * tt_seconds / 60.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn worked_example() {
        let c = ConfusionCounts::new(3, 2, 1, 4);
        assert_eq!(overall_accuracy(&c).unwrap(), 0.7);
        // The guard shifts 3/6 by one ulp.
        assert!((iou(&c) - 0.5).abs() <= 1e-15);
        assert_eq!(iou(&c), 3.0 / (6.0 + 1e-15));
    }

    #[test]
    fn degenerate_counts() {
        let empty = ConfusionCounts::new(0, 0, 0, 10);
        assert_eq!(iou(&empty), 0.0);
        assert_eq!(overall_accuracy(&empty).unwrap(), 1.0);
        assert!(overall_accuracy(&ConfusionCounts::default()).is_err());
        assert!((iou(&ConfusionCounts::new(5, 0, 0, 3)) - 1.0).abs() <= 1e-15);
    }

    #[test]
    fn identical_and_inverted_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let truth: Vec<u8> = (0..100).map(|_| rng.gen_range(0..2)).collect();
        let c = confusion(&truth, &truth).unwrap();
        assert_eq!((c.fp, c.fn_), (0, 0));
        let inv: Vec<u8> = truth.iter().map(|&t| 1 - t).collect();
        let c = confusion(&inv, &truth).unwrap();
        assert_eq!((c.tp, c.tn), (0, 0));
    }

    #[test]
    fn non_binary_is_rejected() {
        assert!(confusion(&[0.5f32], &[1.0]).is_err());
        assert!(error_map(&[2u8], &[1], 1, 1).is_err());
    }

    #[test]
    fn error_map_colors() {
        let img = error_map(&[1u8, 1, 0, 0], &[1, 0, 1, 0], 2, 2).unwrap();
        assert_eq!(img.pixels, vec![WHITE, RED, BLUE, BLACK]);
        let ppm = img.to_ppm();
        assert!(ppm.starts_with(b"P6\n2 2\n255\n"));
        assert_eq!(ppm.len(), 11 + 12);
    }

    #[test]
    fn cost_formula() {
        assert_eq!(computational_cost(60, 1.0).unwrap().cc_minutes, 1.0);
        assert_eq!(computational_cost(5, 0.0).unwrap().cc_minutes, 0.0);
        assert!((computational_cost(250, 110.64).unwrap().cc_minutes - 461.0).abs() < 0.5);
        assert!(computational_cost(1, -1.0).is_err());
    }
}
