//! Directional Sobel edge responses.

use crate::error::{Error, Result};

/// Horizontal and vertical Sobel derivatives with replicated borders.
pub(crate) fn sobel(img: &[f32], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let at = |y: isize, x: isize| img[y.clamp(0, h as isize - 1) as usize * w + x.clamp(0, w as isize - 1) as usize] as f64;
    let mut gx = vec![0f64; h * w];
    let mut gy = vec![0f64; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let i = y as usize * w + x as usize;
            gx[i] = (at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y, x - 1) + at(y + 1, x - 1));
            gy[i] = (at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y - 1, x) + at(y - 1, x + 1));
        }
    }
    (gx, gy)
}

fn normalize_max(v: &mut [f64]) {
    let m = v.iter().fold(0f64, |a, &b| a.max(b));
    if m > 1e-12 {
        v.iter_mut().for_each(|x| *x /= m);
    } else {
        v.iter_mut().for_each(|x| *x = 0.0);
    }
}

/// `n_channels` oriented edge maps, channel `k` responding to intensity
/// change along direction `k * pi / n_channels` (channel 0: horizontal
/// gradient). Each channel is scaled to a maximum of 1; flat input gives
/// zeros. Output layout is `[n_channels, h, w]`.
pub fn edge_profile(slice: &[f32], h: usize, w: usize, n_channels: usize) -> Result<Vec<f32>> {
    if n_channels < 2 {
        return Err(Error::InvalidArgument(format!("edge profile needs at least 2 channels, got {n_channels}")));
    }
    if slice.len() != h * w || h == 0 || w == 0 {
        return Err(Error::shape("edge_profile", format!("{} values for {h}x{w}", slice.len())));
    }
    let (gx, gy) = sobel(slice, h, w);
    let snap = |v: f64| if v.abs() < 1e-12 { 0.0 } else { v };
    let mut out = Vec::with_capacity(n_channels * h * w);
    for k in 0..n_channels {
        let theta = k as f64 * std::f64::consts::PI / n_channels as f64;
        let (c, s) = (snap(theta.cos()), snap(theta.sin()));
        let mut ch: Vec<f64> = gx.iter().zip(&gy).map(|(&a, &b)| (c * a + s * b).abs()).collect();
        normalize_max(&mut ch);
        out.extend(ch.iter().map(|&v| v as f32));
    }
    Ok(out)
}

/// Sobel gradient magnitude scaled to a maximum of 1 (zeros for flat input).
pub fn edge_weight_map(slice: &[f32], h: usize, w: usize) -> Vec<f32> {
    let (gx, gy) = sobel(slice, h, w);
    let mut m: Vec<f64> = gx.iter().zip(&gy).map(|(a, b)| a.hypot(*b)).collect();
    normalize_max(&mut m);
    m.iter().map(|&v| v as f32).collect()
}
