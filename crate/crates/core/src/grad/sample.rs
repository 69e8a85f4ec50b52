//! Bilinear sampling of a 2D map at displaced coordinates, clamped to the
//! image border.

/// Displacement fields are stored channel-first: `[2, H, W]` with the column
/// (x) displacement in channel 0 and the row (y) displacement in channel 1.
struct Tap {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    tx: f64,
    ty: f64,
    /// Derivative of the clamped coordinate w.r.t. the displacement.
    dx_live: bool,
    dy_live: bool,
}

fn tap(h: usize, w: usize, x: usize, y: usize, fx: f32, fy: f32) -> Tap {
    let (sx, dx_live) = clamp(x as f64 + fx as f64, (w - 1) as f64);
    let (sy, dy_live) = clamp(y as f64 + fy as f64, (h - 1) as f64);
    let x0 = (sx.floor() as usize).min(w - 1);
    let y0 = (sy.floor() as usize).min(h - 1);
    Tap {
        x0,
        x1: (x0 + 1).min(w - 1),
        y0,
        y1: (y0 + 1).min(h - 1),
        tx: sx - x0 as f64,
        ty: sy - y0 as f64,
        dx_live,
        dy_live,
    }
}

fn clamp(v: f64, hi: f64) -> (f64, bool) {
    if v <= 0.0 {
        (0.0, false)
    } else if v >= hi {
        (hi, false)
    } else {
        (v, true)
    }
}

pub(crate) fn forward(img: &[f32], field: &[f32], h: usize, w: usize) -> Vec<f32> {
    let plane = h * w;
    let mut out = vec![0f32; plane];
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let t = tap(h, w, x, y, field[p], field[plane + p]);
            let v00 = img[t.y0 * w + t.x0] as f64;
            let v01 = img[t.y0 * w + t.x1] as f64;
            let v10 = img[t.y1 * w + t.x0] as f64;
            let v11 = img[t.y1 * w + t.x1] as f64;
            let top = v00 + t.tx * (v01 - v00);
            let bot = v10 + t.tx * (v11 - v10);
            out[p] = (top + t.ty * (bot - top)) as f32;
        }
    }
    out
}

/// Returns `(grad_image, grad_field)`.
pub(crate) fn backward(img: &[f32], field: &[f32], h: usize, w: usize, gout: &[f32]) -> (Vec<f32>, Vec<f32>) {
    let plane = h * w;
    let mut gimg = vec![0f64; plane];
    let mut gfield = vec![0f32; 2 * plane];
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let g = gout[p] as f64;
            let t = tap(h, w, x, y, field[p], field[plane + p]);
            let (i00, i01, i10, i11) = (t.y0 * w + t.x0, t.y0 * w + t.x1, t.y1 * w + t.x0, t.y1 * w + t.x1);
            gimg[i00] += g * (1.0 - t.tx) * (1.0 - t.ty);
            gimg[i01] += g * t.tx * (1.0 - t.ty);
            gimg[i10] += g * (1.0 - t.tx) * t.ty;
            gimg[i11] += g * t.tx * t.ty;
            let (v00, v01, v10, v11) = (img[i00] as f64, img[i01] as f64, img[i10] as f64, img[i11] as f64);
            if t.dx_live {
                gfield[p] = (g * ((1.0 - t.ty) * (v01 - v00) + t.ty * (v11 - v10))) as f32;
            }
            if t.dy_live {
                gfield[plane + p] = (g * ((1.0 - t.tx) * (v10 - v00) + t.tx * (v11 - v01))) as f32;
            }
        }
    }
    (gimg.iter().map(|&v| v as f32).collect(), gfield)
}
