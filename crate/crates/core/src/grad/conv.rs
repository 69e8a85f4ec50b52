//! Stride-1, size-preserving convolution over `[C, D, H, W]` grids.
//!
//! 2D convolution is the `D = 1, KD = 1` case. Sums accumulate in `f64`.

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub d: usize,
    pub h: usize,
    pub w: usize,
    pub kd: usize,
    pub kh: usize,
    pub kw: usize,
}

/// Output positions `p` with `0 <= p + delta < n`.
fn valid(n: usize, delta: isize) -> (usize, usize) {
    let lo = (-delta).max(0) as usize;
    let hi = (n as isize - delta).clamp(0, n as isize) as usize;
    (lo.min(hi), hi)
}

impl ConvGeom {
    fn vol(&self) -> usize {
        self.d * self.h * self.w
    }

    fn taps(&self) -> impl Iterator<Item = (usize, isize, isize, isize)> + '_ {
        let (kd, kh, kw) = (self.kd, self.kh, self.kw);
        (0..kd * kh * kw).map(move |t| {
            let a = t / (kh * kw);
            let b = (t / kw) % kh;
            let c = t % kw;
            (t, a as isize - (kd / 2) as isize, b as isize - (kh / 2) as isize, c as isize - (kw / 2) as isize)
        })
    }

    /// Calls `f(out_offset, in_offset, len)` for every contiguous row segment
    /// touched by the tap `(dz, dy, dx)`.
    fn rows(&self, dz: isize, dy: isize, dx: isize, mut f: impl FnMut(usize, usize, usize)) {
        let (z0, z1) = valid(self.d, dz);
        let (y0, y1) = valid(self.h, dy);
        let (x0, x1) = valid(self.w, dx);
        if x1 <= x0 {
            return;
        }
        for z in z0..z1 {
            let zs = (z as isize + dz) as usize;
            for y in y0..y1 {
                let ys = (y as isize + dy) as usize;
                let o = (z * self.h + y) * self.w + x0;
                let i = (zs * self.h + ys) * self.w + (x0 as isize + dx) as usize;
                f(o, i, x1 - x0);
            }
        }
    }
}

pub(crate) fn forward(g: &ConvGeom, input: &[f32], weight: &[f32], bias: Option<&[f32]>) -> Vec<f32> {
    let vol = g.vol();
    let ntap = g.kd * g.kh * g.kw;
    let mut out = vec![0f32; g.cout * vol];
    let mut acc = vec![0f64; vol];
    for oc in 0..g.cout {
        acc.fill(bias.map_or(0.0, |b| b[oc] as f64));
        for ic in 0..g.cin {
            let inp = &input[ic * vol..(ic + 1) * vol];
            let wbase = (oc * g.cin + ic) * ntap;
            for (t, dz, dy, dx) in g.taps() {
                let wv = weight[wbase + t] as f64;
                if wv == 0.0 {
                    continue;
                }
                g.rows(dz, dy, dx, |o, i, n| {
                    for (a, &v) in acc[o..o + n].iter_mut().zip(&inp[i..i + n]) {
                        *a += wv * v as f64;
                    }
                });
            }
        }
        for (o, &a) in out[oc * vol..(oc + 1) * vol].iter_mut().zip(&acc) {
            *o = a as f32;
        }
    }
    out
}

/// Returns `(grad_input, grad_weight, grad_bias)` for upstream gradient `gout`.
pub(crate) fn backward(
    g: &ConvGeom,
    input: &[f32],
    weight: &[f32],
    gout: &[f32],
    need_input: bool,
    need_weight: bool,
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let vol = g.vol();
    let ntap = g.kd * g.kh * g.kw;
    let mut gin = if need_input { vec![0f64; g.cin * vol] } else { Vec::new() };
    let mut gw = vec![0f64; if need_weight { g.cout * g.cin * ntap } else { 0 }];
    let mut gb = vec![0f32; g.cout];
    for oc in 0..g.cout {
        let go = &gout[oc * vol..(oc + 1) * vol];
        gb[oc] = go.iter().map(|&v| v as f64).sum::<f64>() as f32;
        for ic in 0..g.cin {
            let inp = &input[ic * vol..(ic + 1) * vol];
            let wbase = (oc * g.cin + ic) * ntap;
            for (t, dz, dy, dx) in g.taps() {
                let wv = weight[wbase + t] as f64;
                let mut dot = 0f64;
                g.rows(dz, dy, dx, |o, i, n| {
                    if need_input && wv != 0.0 {
                        let gi = &mut gin[ic * vol + i..ic * vol + i + n];
                        for (a, &v) in gi.iter_mut().zip(&go[o..o + n]) {
                            *a += wv * v as f64;
                        }
                    }
                    if need_weight {
                        dot += go[o..o + n].iter().zip(&inp[i..i + n]).map(|(&a, &b)| a as f64 * b as f64).sum::<f64>();
                    }
                });
                if need_weight {
                    gw[wbase + t] = dot;
                }
            }
        }
    }
    (
        gin.iter().map(|&v| v as f32).collect(),
        gw.iter().map(|&v| v as f32).collect(),
        gb,
    )
}
