//! Exhaustive oracles for the overlap and surface metrics on small grids.
#![allow(dead_code)]

use rand::Rng;
use spuq_core::metrics::{average_hausdorff, dsc, surface_dice, DistanceMethod};
use spuq_core::rng::Stream;
use spuq_core::volume::{Dims, Grid3, MaskVolume};

pub struct RandomPair {
    pub pred: MaskVolume,
    pub gt: MaskVolume,
}

pub fn random_pair(rng: &mut Stream) -> RandomPair {
    let dims = Dims::new(rng.random_range(1..=8), rng.random_range(1..=8), rng.random_range(1..=8));
    let spacing = [rng.random_range(0.5..2.0), rng.random_range(0.5..2.0), rng.random_range(0.5..3.0)];
    let (pa, pb) = (rng.random_range(0.05..0.8), rng.random_range(0.05..0.8));
    let mut draw = |p: f64| -> Vec<u8> { (0..dims.len()).map(|_| u8::from(rng.random_bool(p))).collect() };
    let (a, b) = (draw(pa), draw(pb));
    RandomPair { pred: Grid3::new(dims, spacing, a).unwrap(), gt: Grid3::new(dims, spacing, b).unwrap() }
}

fn fg(m: &MaskVolume) -> Vec<(usize, usize, usize)> {
    let d = m.dims();
    let mut out = Vec::new();
    for z in 0..d.depth {
        for y in 0..d.height {
            for x in 0..d.width {
                if m.get(x, y, z) != 0 {
                    out.push((x, y, z));
                }
            }
        }
    }
    out
}

pub fn oracle_dsc(a: &MaskVolume, b: &MaskVolume) -> f64 {
    let sa: std::collections::HashSet<_> = fg(a).into_iter().collect();
    let sb: std::collections::HashSet<_> = fg(b).into_iter().collect();
    if sa.is_empty() && sb.is_empty() {
        return 100.0;
    }
    100.0 * 2.0 * sa.intersection(&sb).count() as f64 / (sa.len() + sb.len()) as f64
}

/// Foreground voxels with a background 6-neighbour; off-grid positions are
/// background unless the axis has length one.
pub fn oracle_boundary(m: &MaskVolume) -> Vec<(usize, usize, usize)> {
    let d = m.dims();
    let size = [d.width as isize, d.height as isize, d.depth as isize];
    fg(m)
        .into_iter()
        .filter(|&(x, y, z)| {
            let p = [x as isize, y as isize, z as isize];
            (0..3).any(|axis| {
                if size[axis] == 1 {
                    return false;
                }
                [-1isize, 1].iter().any(|&step| {
                    let mut q = p;
                    q[axis] += step;
                    if q[axis] < 0 || q[axis] >= size[axis] {
                        return true;
                    }
                    m.get(q[0] as usize, q[1] as usize, q[2] as usize) == 0
                })
            })
        })
        .collect()
}

fn dist(a: (usize, usize, usize), b: (usize, usize, usize), s: [f32; 3]) -> f64 {
    let dx = (a.0 as f64 - b.0 as f64) * s[1] as f64;
    let dy = (a.1 as f64 - b.1 as f64) * s[0] as f64;
    let dz = (a.2 as f64 - b.2 as f64) * s[2] as f64;
    (dx * dx + dy * dy + dz * dz).sqrt()
}

fn nearest(from: &[(usize, usize, usize)], to: &[(usize, usize, usize)], s: [f32; 3]) -> Vec<f64> {
    from.iter().map(|&a| to.iter().map(|&b| dist(a, b, s)).fold(f64::INFINITY, f64::min)).collect()
}

pub fn oracle_surface_dice(a: &MaskVolume, b: &MaskVolume, tol: f64) -> f64 {
    let (ba, bb) = (oracle_boundary(a), oracle_boundary(b));
    if ba.is_empty() && bb.is_empty() {
        return 100.0;
    }
    if ba.is_empty() || bb.is_empty() {
        return 0.0;
    }
    let s = a.spacing();
    let hits = nearest(&ba, &bb, s).iter().chain(&nearest(&bb, &ba, s)).filter(|&&d| d <= tol).count();
    100.0 * hits as f64 / (ba.len() + bb.len()) as f64
}

pub fn oracle_ahd(a: &MaskVolume, b: &MaskVolume) -> Option<f64> {
    let (ba, bb) = (oracle_boundary(a), oracle_boundary(b));
    if ba.is_empty() || bb.is_empty() {
        return None;
    }
    let s = a.spacing();
    let mean = |v: Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
    Some(0.5 * (mean(nearest(&ba, &bb, s)) + mean(nearest(&bb, &ba, s))))
}

/// Compares the library metrics with the oracles on `n` random pairs and
/// returns the number of disagreements (zero tolerance) with a description
/// of the first one.
pub fn run_oracle_suite(seed: u64, n: usize) -> (usize, Option<String>) {
    let mut rng = Stream::new(seed, "metric-oracle");
    let mut failures = 0;
    let mut first = None;
    for i in 0..n {
        let RandomPair { pred, gt } = random_pair(&mut rng);
        let tol = rng.random_range(0.5..3.0);
        let mut check = |name: &str, got: Option<f64>, want: Option<f64>| {
            if got != want {
                failures += 1;
                first.get_or_insert_with(|| format!("pair {i} {name}: got {got:?}, oracle {want:?}"));
            }
        };
        check("dsc", dsc(&pred, &gt).ok(), Some(oracle_dsc(&pred, &gt)));
        for method in [DistanceMethod::BruteForce, DistanceMethod::Transform] {
            check("surface_dice", surface_dice(&pred, &gt, tol, method).ok(), Some(oracle_surface_dice(&pred, &gt, tol)));
            let ahd = average_hausdorff(&pred, &gt, method).ok().map(|r| r.ahd);
            match (ahd, oracle_ahd(&pred, &gt)) {
                // The transform sums squared axis terms in a different order; allow rounding only there.
                (Some(g), Some(w)) if method == DistanceMethod::Transform => {
                    check("ahd(transform)", Some(g), Some(if (g - w).abs() <= 1e-12 * w.max(1.0) { g } else { w }))
                }
                (g, w) => check("ahd", g, w),
            }
        }
    }
    (failures, first)
}
