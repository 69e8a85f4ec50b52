use crate::error::{Error, Result};
use crate::volume::MaskVolume;

/// Dice similarity in percent. Two empty masks agree perfectly (100).
pub fn dsc(pred: &MaskVolume, gt: &MaskVolume) -> Result<f64> {
    if !pred.same_shape(gt) {
        return Err(Error::shape("dsc", format!("{:?} vs {:?}", pred.dims(), gt.dims())));
    }
    let (mut p, mut g, mut both) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.data().iter().zip(gt.data()) {
        let (a, b) = (a != 0, b != 0);
        p += a as usize;
        g += b as usize;
        both += (a && b) as usize;
    }
    if p + g == 0 {
        return Ok(100.0);
    }
    Ok(100.0 * 2.0 * both as f64 / (p + g) as f64)
}

/// 4-connected component labels of a 2D mask (`0` = background, components
/// numbered from 1 in raster order of their first pixel) and the count.
pub fn label_components_2d(mask: &[u8], h: usize, w: usize) -> (Vec<u32>, usize) {
    let mut labels = vec![0u32; mask.len()];
    let mut count = 0;
    let mut stack = Vec::new();
    for start in 0..mask.len() {
        if mask[start] == 0 || labels[start] != 0 {
            continue;
        }
        count += 1;
        labels[start] = count as u32;
        stack.push(start);
        while let Some(p) = stack.pop() {
            let (x, y) = (p % w, p / w);
            let neighbours = [
                (x > 0).then(|| p - 1),
                (x + 1 < w).then(|| p + 1),
                (y > 0).then(|| p - w),
                (y + 1 < h).then(|| p + w),
            ];
            for q in neighbours.into_iter().flatten() {
                if mask[q] != 0 && labels[q] == 0 {
                    labels[q] = count as u32;
                    stack.push(q);
                }
            }
        }
    }
    (labels, count)
}
