//! Straightforward f64 forwards of the tape primitives, written without any
//! of the library's kernels. Used as finite-difference oracles.
#![allow(dead_code, clippy::too_many_arguments)]

pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[i * n + j] = (0..k).map(|t| a[i * k + t] * b[t * n + j]).sum();
        }
    }
    out
}

/// Zero-padded, stride-1, size-preserving 3D convolution (cross-correlation).
pub fn conv3d(
    x: &[f64],
    wt: &[f64],
    bias: Option<&[f64]>,
    [cin, cout]: [usize; 2],
    [d, h, w]: [usize; 3],
    [kd, kh, kw]: [usize; 3],
) -> Vec<f64> {
    let mut out = vec![0.0; cout * d * h * w];
    let (pd, ph, pw) = ((kd / 2) as isize, (kh / 2) as isize, (kw / 2) as isize);
    for o in 0..cout {
        for z in 0..d {
            for y in 0..h {
                for xx in 0..w {
                    let mut s = bias.map_or(0.0, |b| b[o]);
                    for i in 0..cin {
                        for a in 0..kd {
                            for b in 0..kh {
                                for c in 0..kw {
                                    let zz = z as isize + a as isize - pd;
                                    let yy = y as isize + b as isize - ph;
                                    let xs = xx as isize + c as isize - pw;
                                    if zz < 0 || yy < 0 || xs < 0 || zz >= d as isize || yy >= h as isize || xs >= w as isize {
                                        continue;
                                    }
                                    let xv = x[((i * d + zz as usize) * h + yy as usize) * w + xs as usize];
                                    s += xv * wt[(((o * cin + i) * kd + a) * kh + b) * kw + c];
                                }
                            }
                        }
                    }
                    out[((o * d + z) * h + y) * w + xx] = s;
                }
            }
        }
    }
    out
}

pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

pub fn softmax_rows(x: &[f64], cols: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(cols) {
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        out.extend(row.iter().map(|v| v.exp() / z));
    }
    out
}

pub fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64
}

pub fn weighted_l1(a: &[f64], b: &[f64], w: &[f64]) -> f64 {
    a.iter().zip(b).zip(w).map(|((x, y), c)| c * (x - y).abs()).sum::<f64>() / a.len() as f64
}

/// Mean SSIM over every valid `win x win` box with population statistics.
pub fn ssim(x: &[f64], y: &[f64], h: usize, w: usize, win: usize, c1: f64, c2: f64) -> f64 {
    let n = (win * win) as f64;
    let mut total = 0.0;
    let mut count = 0;
    for top in 0..=h - win {
        for left in 0..=w - win {
            let idx: Vec<usize> = (0..win).flat_map(|r| (0..win).map(move |c| (top + r) * w + left + c)).collect();
            let mx = idx.iter().map(|&i| x[i]).sum::<f64>() / n;
            let my = idx.iter().map(|&i| y[i]).sum::<f64>() / n;
            let vx = idx.iter().map(|&i| (x[i] - mx).powi(2)).sum::<f64>() / n;
            let vy = idx.iter().map(|&i| (y[i] - my).powi(2)).sum::<f64>() / n;
            let cxy = idx.iter().map(|&i| (x[i] - mx) * (y[i] - my)).sum::<f64>() / n;
            total += (2.0 * mx * my + c1) * (2.0 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    total / count as f64
}

/// Bilinear sample at `p + field(p)`, coordinates clamped to the image.
pub fn grid_sample(img: &[f64], field: &[f64], h: usize, w: usize) -> Vec<f64> {
    let at = |y: usize, x: usize| img[y * w + x];
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let sx = (x as f64 + field[p]).clamp(0.0, (w - 1) as f64);
            let sy = (y as f64 + field[h * w + p]).clamp(0.0, (h - 1) as f64);
            let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (tx, ty) = (sx - x0 as f64, sy - y0 as f64);
            out[p] = (1.0 - ty) * ((1.0 - tx) * at(y0, x0) + tx * at(y0, x1))
                + ty * ((1.0 - tx) * at(y1, x0) + tx * at(y1, x1));
        }
    }
    out
}

/// Per-channel relaxed keep gate scaled by `1 / (1 - p)`.
pub fn concrete_gate(x: &[f64], logit: f64, noise: &[f64], t: f64) -> Vec<f64> {
    let p = sigmoid(logit);
    let per = x.len() / noise.len();
    x.iter()
        .enumerate()
        .map(|(i, v)| {
            let u = noise[i / per];
            let drop = sigmoid((p.ln() - (1.0 - p).ln() + u.ln() - (1.0 - u).ln()) / t);
            v * (1.0 - drop) / (1.0 - p)
        })
        .collect()
}

/// Window offsets in row-major order over `dy`, then `dx`.
fn offsets(r: usize) -> Vec<(isize, isize)> {
    let r = r as isize;
    (-r..=r).flat_map(|dy| (-r..=r).map(move |dx| (dy, dx))).collect()
}

/// `None` where the window position falls outside the image.
pub fn window_logits(tgt: &[f64], src: &[f64], c: usize, h: usize, w: usize, r: usize, scale: f64) -> Vec<Option<f64>> {
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            for (dy, dx) in offsets(r) {
                let (ys, xs) = (y as isize + dy, x as isize + dx);
                if ys < 0 || xs < 0 || ys >= h as isize || xs >= w as isize {
                    out.push(None);
                    continue;
                }
                let q = ys as usize * w + xs as usize;
                let dot: f64 = (0..c).map(|ch| tgt[ch * h * w + y * w + x] * src[ch * h * w + q]).sum();
                out.push(Some(scale * dot));
            }
        }
    }
    out
}

pub fn window_warp(weights: &[f64], src: &[f64], h: usize, w: usize, r: usize) -> Vec<f64> {
    let offs = offsets(r);
    let k = offs.len();
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            for (j, (dy, dx)) in offs.iter().enumerate() {
                let (ys, xs) = (y as isize + dy, x as isize + dx);
                if ys < 0 || xs < 0 || ys >= h as isize || xs >= w as isize {
                    continue;
                }
                out[y * w + x] += weights[(y * w + x) * k + j] * src[ys as usize * w + xs as usize];
            }
        }
    }
    out
}

pub fn avg_pool2(x: &[f64], [c, d, h, w]: [usize; 4]) -> Vec<f64> {
    let (od, oh, ow) = (d.div_ceil(2), h.div_ceil(2), w.div_ceil(2));
    let mut out = Vec::new();
    for ch in 0..c {
        for z in 0..od {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut vals = Vec::new();
                    for a in 2 * z..(2 * z + 2).min(d) {
                        for b in 2 * y..(2 * y + 2).min(h) {
                            for e in 2 * xx..(2 * xx + 2).min(w) {
                                vals.push(x[((ch * d + a) * h + b) * w + e]);
                            }
                        }
                    }
                    out.push(vals.iter().sum::<f64>() / vals.len() as f64);
                }
            }
        }
    }
    out
}

pub fn upsample2(x: &[f64], c: usize, [d, h, w]: [usize; 3]) -> Vec<f64> {
    let (sd, sh, sw) = (d.div_ceil(2), h.div_ceil(2), w.div_ceil(2));
    let mut out = Vec::new();
    for ch in 0..c {
        for z in 0..d {
            for y in 0..h {
                for xx in 0..w {
                    out.push(x[((ch * sd + z / 2) * sh + y / 2) * sw + xx / 2]);
                }
            }
        }
    }
    out
}
