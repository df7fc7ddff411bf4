//! Average precision and hit rate.

use super::SimError;
use crate::ids::ImageId;

/// `AP = (sum of P_i) / R`, with `P_i` the precision at the position of the
/// i-th relevant result in `relevant` (ranked order). Relevant items never
/// retrieved contribute zero.
pub fn average_precision(relevant: &[bool], r: usize) -> Result<f64, SimError> {
    let found = relevant.iter().filter(|&&x| x).count();
    if r == 0 {
        return Err(SimError::Argument("total relevant count must be at least 1".into()));
    }
    if found > r {
        return Err(SimError::Relevance { r, found });
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (pos, _) in relevant.iter().enumerate().filter(|(_, &x)| x) {
        hits += 1;
        sum += hits as f64 / (pos + 1) as f64;
    }
    Ok(sum / r as f64)
}

/// 1 if `target` appears anywhere in `ranked`, else 0.
pub fn hit_rate(ranked: &[ImageId], target: ImageId) -> f64 {
    if ranked.contains(&target) {
        1.0
    } else {
        0.0
    }
}

/// Arithmetic mean; `None` for an empty slice.
pub fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}
