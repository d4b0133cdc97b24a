use serde::{Deserialize, Serialize};

use crate::real::Real;
use crate::volume::{centroid, LabelMask};

/// Threshold applied to warped masks before the binary overlap score.
pub const DSC_THRESHOLD: f64 = 0.5;

/// Euclidean distance between label centroids, mm. `None` if either is empty.
pub fn centroid_distance<T: Real>(a: &LabelMask<T>, b: &LabelMask<T>) -> Option<f64> {
    let ca = centroid(a).ok()?;
    let cb = centroid(b).ok()?;
    Some(((ca[0] - cb[0]).powi(2) + (ca[1] - cb[1]).powi(2) + (ca[2] - cb[2]).powi(2)).sqrt())
}

/// Per-pair centroid distances and their RMS over the evaluable pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tre {
    /// `None` for pairs with an empty label.
    pub distances: Vec<Option<f64>>,
    pub rms: Option<f64>,
}

/// Root-mean-square landmark centroid distance of one case. Pairs with an
/// empty mask are skipped with a warning.
pub fn tre<T: Real>(pairs: &[(&LabelMask<T>, &LabelMask<T>)]) -> Tre {
    let distances: Vec<Option<f64>> = pairs
        .iter()
        .enumerate()
        .map(|(i, (w, f))| {
            let d = centroid_distance(w, f);
            if d.is_none() {
                log::warn!("landmark pair {i} has an empty label; excluded from TRE");
            }
            d
        })
        .collect();
    let valid: Vec<f64> = distances.iter().flatten().copied().collect();
    let rms = (!valid.is_empty()).then(|| (valid.iter().map(|d| d * d).sum::<f64>() / valid.len() as f64).sqrt());
    Tre { distances, rms }
}

/// Binary Dice of the two masks thresholded at [`DSC_THRESHOLD`]. `None`
/// when both are empty.
pub fn dsc<T: Real>(warped: &LabelMask<T>, fixed: &LabelMask<T>) -> Option<f64> {
    let (mut inter, mut a, mut b) = (0usize, 0usize, 0usize);
    for (&x, &y) in warped.data().iter().zip(fixed.data()) {
        let x = x.as_f64() >= DSC_THRESHOLD;
        let y = y.as_f64() >= DSC_THRESHOLD;
        inter += (x && y) as usize;
        a += x as usize;
        b += y as usize;
    }
    if a + b == 0 {
        log::warn!("both glands empty; excluded from DSC");
        return None;
    }
    Some(2.0 * inter as f64 / (a + b) as f64)
}

/// Median and the 10th/25th/75th/90th percentiles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Percentiles {
    pub median: f64,
    pub p10: f64,
    pub p25: f64,
    pub p75: f64,
    pub p90: f64,
}

/// Percentile `q ∈ [0, 100]` of sorted data, interpolating linearly between
/// order statistics.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// `None` for an empty sample.
pub fn summarize(values: &[f64]) -> Option<Percentiles> {
    if values.is_empty() {
        return None;
    }
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    Some(Percentiles {
        median: percentile(&s, 50.0),
        p10: percentile(&s, 10.0),
        p25: percentile(&s, 25.0),
        p75: percentile(&s, 75.0),
        p90: percentile(&s, 90.0),
    })
}
