//! Boundary extraction and surface distances.

use crate::error::{Error, Result};
use crate::volume::{Dims, MaskVolume};

pub const DEFAULT_SURFACE_TOLERANCE_MM: f64 = 1.0;

/// Volumes with fewer voxels than this use exhaustive pair distances.
pub const BRUTE_FORCE_LIMIT: usize = 32 * 32 * 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum DistanceMethod {
    /// Brute force below [`BRUTE_FORCE_LIMIT`] voxels, distance transform above.
    #[default]
    Auto,
    BruteForce,
    Transform,
}

/// Foreground voxels with at least one 6-connected background neighbour.
/// Positions outside the grid count as background, except along axes of
/// length one, which contribute no neighbours (so a single slice has an
/// in-plane boundary). Returns linear indices in ascending order.
pub fn boundary(mask: &MaskVolume) -> Vec<usize> {
    let d = mask.dims();
    let m = mask.data();
    let mut out = Vec::new();
    let axes = [(d.width, 1usize), (d.height, d.width), (d.depth, d.plane())];
    for (i, &v) in m.iter().enumerate() {
        if v == 0 {
            continue;
        }
        let (x, y, z) = d.coords(i);
        let pos = [x, y, z];
        let on_edge = axes.iter().zip(pos).any(|(&(n, stride), p)| {
            if n == 1 {
                return false;
            }
            p == 0 || p + 1 == n || m[i - stride] == 0 || m[i + stride] == 0
        });
        if on_edge {
            out.push(i);
        }
    }
    out
}

fn physical(d: &Dims, spacing: [f32; 3], i: usize) -> [f64; 3] {
    let (x, y, z) = d.coords(i);
    [x as f64 * spacing[1] as f64, y as f64 * spacing[0] as f64, z as f64 * spacing[2] as f64]
}

/// Exact 1D squared distance transform along a line of samples spaced `s`
/// apart (lower envelope of parabolas).
fn edt_1d(f: &[f64], s: f64, out: &mut [f64], v: &mut [usize], zb: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    let first = match f.iter().position(|x| x.is_finite()) {
        Some(p) => p,
        None => {
            out.iter_mut().for_each(|o| *o = f64::INFINITY);
            return;
        }
    };
    v[0] = first;
    zb[0] = f64::NEG_INFINITY;
    zb[1] = f64::INFINITY;
    for q in first + 1..n {
        if !f[q].is_finite() {
            continue;
        }
        let (qs, fq) = (q as f64 * s, f[q]);
        loop {
            let p = v[k];
            let ps = p as f64 * s;
            let sep = ((fq + qs * qs) - (f[p] + ps * ps)) / (2.0 * (qs - ps));
            if sep <= zb[k] && k > 0 {
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                zb[k] = sep;
                zb[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    let mut j = 0;
    for (q, o) in out.iter_mut().enumerate() {
        let qs = q as f64 * s;
        while zb[j + 1] < qs {
            j += 1;
        }
        let ps = v[j] as f64 * s;
        *o = (qs - ps) * (qs - ps) + f[v[j]];
    }
}

/// Squared Euclidean distance (mm²) from every voxel to the nearest site.
fn squared_edt(d: &Dims, spacing: [f32; 3], sites: &[usize]) -> Vec<f64> {
    let mut g = vec![f64::INFINITY; d.len()];
    for &s in sites {
        g[s] = 0.0;
    }
    let axes = [(d.width, 1usize, spacing[1]), (d.height, d.width, spacing[0]), (d.depth, d.plane(), spacing[2])];
    let longest = d.width.max(d.height).max(d.depth);
    let (mut line, mut out) = (vec![0f64; longest], vec![0f64; longest]);
    let (mut v, mut zb) = (vec![0usize; longest], vec![0f64; longest + 1]);
    for (n, stride, s) in axes {
        for start in 0..d.len() {
            // Visit each line once, from its first element.
            if (start / stride) % n != 0 {
                continue;
            }
            for t in 0..n {
                line[t] = g[start + t * stride];
            }
            edt_1d(&line[..n], s as f64, &mut out[..n], &mut v, &mut zb);
            for t in 0..n {
                g[start + t * stride] = out[t];
            }
        }
    }
    g
}

/// Distance (mm) from each voxel in `from` to the nearest voxel in `to`.
pub fn directed_distances(
    from: &[usize],
    to: &[usize],
    dims: &Dims,
    spacing: [f32; 3],
    method: DistanceMethod,
) -> Vec<f64> {
    if to.is_empty() {
        return vec![f64::INFINITY; from.len()];
    }
    let brute = match method {
        DistanceMethod::Auto => dims.len() < BRUTE_FORCE_LIMIT,
        DistanceMethod::BruteForce => true,
        DistanceMethod::Transform => false,
    };
    if brute {
        let targets: Vec<[f64; 3]> = to.iter().map(|&i| physical(dims, spacing, i)).collect();
        from.iter()
            .map(|&i| {
                let a = physical(dims, spacing, i);
                targets
                    .iter()
                    .map(|b| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt())
                    .fold(f64::INFINITY, f64::min)
            })
            .collect()
    } else {
        let g = squared_edt(dims, spacing, to);
        from.iter().map(|&i| g[i].sqrt()).collect()
    }
}

fn check_shapes(op: &'static str, a: &MaskVolume, b: &MaskVolume) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// Percentage of boundary voxels of both masks lying within `tolerance_mm`
/// of the other mask's boundary, pooled over the two surfaces.
pub fn surface_dice(pred: &MaskVolume, gt: &MaskVolume, tolerance_mm: f64, method: DistanceMethod) -> Result<f64> {
    check_shapes("surface_dice", pred, gt)?;
    if !(tolerance_mm > 0.0) {
        return Err(Error::InvalidArgument(format!("surface tolerance {tolerance_mm} must be positive")));
    }
    let (bp, bg) = (boundary(pred), boundary(gt));
    match (bp.is_empty(), bg.is_empty()) {
        (true, true) => return Ok(100.0),
        (true, false) | (false, true) => return Ok(0.0),
        _ => {}
    }
    let (dims, sp) = (pred.dims(), pred.spacing());
    let within = |from: &[usize], to: &[usize]| {
        directed_distances(from, to, &dims, sp, method).iter().filter(|&&d| d <= tolerance_mm).count()
    };
    let hits = within(&bp, &bg) + within(&bg, &bp);
    Ok(100.0 * hits as f64 / (bp.len() + bg.len()) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AhdResult {
    /// Mean of the two directed distances.
    pub ahd: f64,
    pub pred_to_gt: f64,
    /// Directed ground-truth-to-prediction average surface distance.
    pub gt_to_pred: f64,
}

/// Average Hausdorff distance in mm between the boundaries of two nonempty masks.
pub fn average_hausdorff(pred: &MaskVolume, gt: &MaskVolume, method: DistanceMethod) -> Result<AhdResult> {
    check_shapes("average_hausdorff", pred, gt)?;
    let (bp, bg) = (boundary(pred), boundary(gt));
    if bp.is_empty() {
        return Err(Error::EmptyMask("prediction"));
    }
    if bg.is_empty() {
        return Err(Error::EmptyMask("ground truth"));
    }
    let (dims, sp) = (pred.dims(), pred.spacing());
    let mean = |v: Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
    let pred_to_gt = mean(directed_distances(&bp, &bg, &dims, sp, method));
    let gt_to_pred = mean(directed_distances(&bg, &bp, &dims, sp, method));
    Ok(AhdResult { ahd: 0.5 * (pred_to_gt + gt_to_pred), pred_to_gt, gt_to_pred })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Grid3;

    fn cube(dims: Dims, lo: [usize; 3], hi: [usize; 3]) -> MaskVolume {
        let mut m = Grid3::filled(dims, [1.0; 3], 0u8);
        for z in lo[2]..hi[2] {
            for y in lo[1]..hi[1] {
                for x in lo[0]..hi[0] {
                    m.set(x, y, z, 1);
                }
            }
        }
        m
    }

    #[test]
    fn solid_cube_boundary_is_its_shell() {
        let m = cube(Dims::new(7, 7, 7), [1, 1, 1], [6, 6, 6]);
        assert_eq!(boundary(&m).len(), 125 - 27);
    }

    #[test]
    fn single_slice_uses_in_plane_boundary() {
        let m = cube(Dims::new(5, 5, 1), [1, 1, 0], [4, 4, 1]);
        assert_eq!(boundary(&m).len(), 8);
    }

    #[test]
    fn point_pair_distance() {
        let d = Dims::new(1, 8, 1);
        let a = cube(d, [1, 0, 0], [2, 1, 1]);
        let b = cube(d, [4, 0, 0], [5, 1, 1]);
        let r = average_hausdorff(&a, &b, DistanceMethod::Auto).unwrap();
        assert_eq!(r.ahd, 3.0);
        assert!(average_hausdorff(&a, &Grid3::filled(d, [1.0; 3], 0), DistanceMethod::Auto).is_err());
    }

    #[test]
    fn shifted_cube_within_tolerance() {
        let d = Dims::new(8, 8, 8);
        let a = cube(d, [1, 1, 1], [5, 5, 5]);
        let b = cube(d, [2, 1, 1], [6, 5, 5]);
        assert_eq!(surface_dice(&a, &b, 2.0, DistanceMethod::Auto).unwrap(), 100.0);
        assert!(surface_dice(&a, &b, 0.5, DistanceMethod::Auto).unwrap() < 100.0);
    }

    #[test]
    fn transform_matches_brute_force_with_anisotropic_spacing() {
        let d = Dims::new(9, 11, 6);
        let mut a = Grid3::filled(d, [0.7, 1.3, 2.1], 0u8);
        let mut b = a.clone();
        for i in 0..d.len() {
            a.data_mut()[i] = u8::from((i * 7919) % 13 < 4);
            b.data_mut()[i] = u8::from((i * 104729) % 11 < 3);
        }
        let (ba, bb) = (boundary(&a), boundary(&b));
        let x = directed_distances(&ba, &bb, &d, a.spacing(), DistanceMethod::BruteForce);
        let y = directed_distances(&ba, &bb, &d, a.spacing(), DistanceMethod::Transform);
        for (p, q) in x.iter().zip(&y) {
            assert!((p - q).abs() < 1e-9, "{p} vs {q}");
        }
    }
}
