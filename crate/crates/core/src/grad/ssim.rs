//! Mean structural similarity over all valid square windows (box window,
//! population moments).

pub(crate) struct SsimGeom {
    pub h: usize,
    pub w: usize,
    pub win: usize,
    pub c1: f64,
    pub c2: f64,
}

impl SsimGeom {
    fn nh(&self) -> usize {
        self.h + 1 - self.win
    }

    fn nw(&self) -> usize {
        self.w + 1 - self.win
    }
}

/// Window sums of `img` (`h x w`) for every valid top-left corner.
fn box_sums(img: &[f64], h: usize, w: usize, win: usize) -> Vec<f64> {
    let mut integral = vec![0f64; (h + 1) * (w + 1)];
    for y in 0..h {
        let mut row = 0f64;
        for x in 0..w {
            row += img[y * w + x];
            integral[(y + 1) * (w + 1) + x + 1] = integral[y * (w + 1) + x + 1] + row;
        }
    }
    let (nh, nw) = (h + 1 - win, w + 1 - win);
    let mut out = vec![0f64; nh * nw];
    for y in 0..nh {
        for x in 0..nw {
            let at = |yy: usize, xx: usize| integral[yy * (w + 1) + xx];
            out[y * nw + x] = at(y + win, x + win) - at(y, x + win) - at(y + win, x) + at(y, x);
        }
    }
    out
}

/// For every pixel, the sum of `coef` over all windows containing it.
fn scatter_windows(coef: &[f64], g: &SsimGeom) -> Vec<f64> {
    let (nh, nw, win) = (g.nh(), g.nw(), g.win);
    let mut integral = vec![0f64; (nh + 1) * (nw + 1)];
    for y in 0..nh {
        let mut row = 0f64;
        for x in 0..nw {
            row += coef[y * nw + x];
            integral[(y + 1) * (nw + 1) + x + 1] = integral[y * (nw + 1) + x + 1] + row;
        }
    }
    let at = |yy: usize, xx: usize| integral[yy * (nw + 1) + xx];
    let mut out = vec![0f64; g.h * g.w];
    for y in 0..g.h {
        let y0 = (y + 1).saturating_sub(win);
        let y1 = (y + 1).min(nh);
        for x in 0..g.w {
            let x0 = (x + 1).saturating_sub(win);
            let x1 = (x + 1).min(nw);
            if y1 > y0 && x1 > x0 {
                out[y * g.w + x] = at(y1, x1) - at(y0, x1) - at(y1, x0) + at(y0, x0);
            }
        }
    }
    out
}

struct Moments {
    mx: Vec<f64>,
    my: Vec<f64>,
    vx: Vec<f64>,
    vy: Vec<f64>,
    cxy: Vec<f64>,
}

fn moments(x: &[f32], y: &[f32], g: &SsimGeom) -> Moments {
    let n = (g.win * g.win) as f64;
    let xd: Vec<f64> = x.iter().map(|&v| v as f64).collect();
    let yd: Vec<f64> = y.iter().map(|&v| v as f64).collect();
    let xx: Vec<f64> = xd.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = yd.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = xd.iter().zip(&yd).map(|(a, b)| a * b).collect();
    let sums = |v: &[f64]| -> Vec<f64> { box_sums(v, g.h, g.w, g.win).into_iter().map(|s| s / n).collect() };
    let mx = sums(&xd);
    let my = sums(&yd);
    let exx = sums(&xx);
    let eyy = sums(&yy);
    let exy = sums(&xy);
    let vx = exx.iter().zip(&mx).map(|(e, m)| e - m * m).collect();
    let vy = eyy.iter().zip(&my).map(|(e, m)| e - m * m).collect();
    let cxy = exy.iter().zip(mx.iter().zip(&my)).map(|(e, (a, b))| e - a * b).collect();
    Moments { mx, my, vx, vy, cxy }
}

pub(crate) fn forward(x: &[f32], y: &[f32], g: &SsimGeom) -> f64 {
    let m = moments(x, y, g);
    let total: f64 = (0..m.mx.len())
        .map(|i| {
            let a1 = 2.0 * m.mx[i] * m.my[i] + g.c1;
            let a2 = 2.0 * m.cxy[i] + g.c2;
            let b1 = m.mx[i] * m.mx[i] + m.my[i] * m.my[i] + g.c1;
            let b2 = m.vx[i] + m.vy[i] + g.c2;
            (a1 * a2) / (b1 * b2)
        })
        .sum();
    total / m.mx.len() as f64
}

/// Gradients of the mean SSIM with respect to `x` and `y`, scaled by `upstream`.
pub(crate) fn backward(x: &[f32], y: &[f32], g: &SsimGeom, upstream: f64) -> (Vec<f32>, Vec<f32>) {
    let m = moments(x, y, g);
    let nwin = m.mx.len();
    let n = (g.win * g.win) as f64;
    let scale = upstream / nwin as f64;
    // Per-window coefficients: dS/dp = (a + b * p + c * q) / n for a pixel
    // value p of one image and the co-located value q of the other.
    let mut ax = vec![0f64; nwin];
    let mut bx = vec![0f64; nwin];
    let mut cx = vec![0f64; nwin];
    let mut ay = vec![0f64; nwin];
    let mut by = vec![0f64; nwin];
    let mut cy = vec![0f64; nwin];
    for i in 0..nwin {
        let (mx, my) = (m.mx[i], m.my[i]);
        let a1 = 2.0 * mx * my + g.c1;
        let a2 = 2.0 * m.cxy[i] + g.c2;
        let b1 = mx * mx + my * my + g.c1;
        let b2 = m.vx[i] + m.vy[i] + g.c2;
        let den = b1 * b2;
        let s_mx = 2.0 * my * a2 / den - a1 * a2 * 2.0 * mx / (b1 * den);
        let s_my = 2.0 * mx * a2 / den - a1 * a2 * 2.0 * my / (b1 * den);
        let s_v = -a1 * a2 / (den * b2);
        let s_c = 2.0 * a1 / den;
        ax[i] = scale * (s_mx - 2.0 * mx * s_v - my * s_c) / n;
        bx[i] = scale * 2.0 * s_v / n;
        cx[i] = scale * s_c / n;
        ay[i] = scale * (s_my - 2.0 * my * s_v - mx * s_c) / n;
        by[i] = bx[i];
        cy[i] = cx[i];
    }
    let (sax, sbx, scx) = (scatter_windows(&ax, g), scatter_windows(&bx, g), scatter_windows(&cx, g));
    let (say, sby, scy) = (scatter_windows(&ay, g), scatter_windows(&by, g), scatter_windows(&cy, g));
    let gx = (0..x.len()).map(|p| (sax[p] + sbx[p] * x[p] as f64 + scx[p] * y[p] as f64) as f32).collect();
    let gy = (0..y.len()).map(|p| (say[p] + sby[p] * y[p] as f64 + scy[p] * x[p] as f64) as f32).collect();
    (gx, gy)
}
