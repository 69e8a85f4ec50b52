//! Windowed correspondence kernels: per-pixel similarity logits over a
//! `(2R+1)^2` source window, and the weighted gather that applies them.

/// Logit assigned to window positions that fall outside the image. Its
/// softmax weight underflows to exactly zero.
pub const MASKED_LOGIT: f32 = -1.0e30;

#[derive(Clone, Copy, Debug)]
pub(crate) struct WindowGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub radius: usize,
}

impl WindowGeom {
    pub fn k(&self) -> usize {
        (2 * self.radius + 1) * (2 * self.radius + 1)
    }

    /// Calls `f(k, p, q)` for every in-bounds pair of target pixel `p` and
    /// source pixel `q = p + offset(k)`, grouped by offset and row.
    fn for_each_row(&self, mut f: impl FnMut(usize, usize, usize, usize)) {
        let r = self.radius as isize;
        let side = 2 * self.radius + 1;
        for dy in -r..=r {
            for dx in -r..=r {
                let k = (dy + r) as usize * side + (dx + r) as usize;
                let x0 = (-dx).max(0) as usize;
                let x1 = (self.w as isize - dx).clamp(0, self.w as isize) as usize;
                if x1 <= x0 {
                    continue;
                }
                for y in 0..self.h {
                    let ys = y as isize + dy;
                    if ys < 0 || ys >= self.h as isize {
                        continue;
                    }
                    let p = y * self.w + x0;
                    let q = ys as usize * self.w + (x0 as isize + dx) as usize;
                    f(k, p, q, x1 - x0);
                }
            }
        }
    }
}

/// `out[p, k] = scale * <tgt(p), src(p + offset(k))>`, masked outside the image.
pub(crate) fn logits_forward(tgt: &[f32], src: &[f32], g: &WindowGeom, scale: f64) -> Vec<f32> {
    let plane = g.h * g.w;
    let k = g.k();
    let mut acc = vec![f64::NAN; k * plane];
    g.for_each_row(|kk, p, q, n| {
        let row = &mut acc[kk * plane + p..kk * plane + p + n];
        row.fill(0.0);
        for c in 0..g.c {
            let t = &tgt[c * plane + p..c * plane + p + n];
            let s = &src[c * plane + q..c * plane + q + n];
            for ((a, &tv), &sv) in row.iter_mut().zip(t).zip(s) {
                *a += tv as f64 * sv as f64;
            }
        }
    });
    let mut out = vec![MASKED_LOGIT; plane * k];
    for kk in 0..k {
        for p in 0..plane {
            let v = acc[kk * plane + p];
            if !v.is_nan() {
                out[p * k + kk] = (v * scale) as f32;
            }
        }
    }
    out
}

/// Returns `(grad_tgt, grad_src)`.
pub(crate) fn logits_backward(tgt: &[f32], src: &[f32], g: &WindowGeom, scale: f64, gout: &[f32]) -> (Vec<f32>, Vec<f32>) {
    let plane = g.h * g.w;
    let k = g.k();
    let mut gt = vec![0f64; g.c * plane];
    let mut gs = vec![0f64; g.c * plane];
    let mut grow = Vec::new();
    g.for_each_row(|kk, p, q, n| {
        grow.clear();
        grow.extend((0..n).map(|i| gout[(p + i) * k + kk] as f64 * scale));
        for c in 0..g.c {
            let base_t = c * plane + p;
            let base_s = c * plane + q;
            for i in 0..n {
                gt[base_t + i] += grow[i] * src[base_s + i] as f64;
                gs[base_s + i] += grow[i] * tgt[base_t + i] as f64;
            }
        }
    });
    (gt.iter().map(|&v| v as f32).collect(), gs.iter().map(|&v| v as f32).collect())
}

/// `out[p] = sum_k weights[p, k] * source(p + offset(k))` over in-bounds offsets.
pub(crate) fn warp_forward(weights: &[f32], source: &[f32], g: &WindowGeom) -> Vec<f32> {
    let plane = g.h * g.w;
    let k = g.k();
    let mut acc = vec![0f64; plane];
    g.for_each_row(|kk, p, q, n| {
        for i in 0..n {
            acc[p + i] += weights[(p + i) * k + kk] as f64 * source[q + i] as f64;
        }
    });
    acc.iter().map(|&v| v as f32).collect()
}

/// Returns `(grad_weights, grad_source)`.
pub(crate) fn warp_backward(weights: &[f32], source: &[f32], g: &WindowGeom, gout: &[f32]) -> (Vec<f32>, Vec<f32>) {
    let plane = g.h * g.w;
    let k = g.k();
    let mut gw = vec![0f32; plane * k];
    let mut gs = vec![0f64; plane];
    g.for_each_row(|kk, p, q, n| {
        for i in 0..n {
            let go = gout[p + i] as f64;
            gw[(p + i) * k + kk] = (go * source[q + i] as f64) as f32;
            gs[q + i] += go * weights[(p + i) * k + kk] as f64;
        }
    });
    (gw, gs.iter().map(|&v| v as f32).collect())
}
