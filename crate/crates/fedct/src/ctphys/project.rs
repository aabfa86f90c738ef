//! Ray-driven fan-beam forward projection with exact per-pixel intersection
//! lengths (Siddon-style traversal).

use super::{CtError, FanBeamGeometry, ImageGrid, Sinogram};
use rayon::prelude::*;

/// Line integral of the image along the segment from `src` to `dst`,
/// accumulating exact intersection lengths with each crossed pixel.
fn line_integral(img: &ImageGrid, src: (f64, f64), dst: (f64, f64)) -> f64 {
    let n = img.size();
    let pl = img.pixel_len();
    let half = n as f64 * pl / 2.0;
    let (sx, sy) = src;
    let (dx, dy) = (dst.0 - src.0, dst.1 - src.1);
    let ray_len = (dx * dx + dy * dy).sqrt();
    if ray_len == 0.0 {
        return 0.0;
    }

    // Clip the parametric interval to the grid bounding box.
    let mut t0 = 0.0f64;
    let mut t1 = 1.0f64;
    for (s, d) in [(sx, dx), (sy, dy)] {
        if d == 0.0 {
            if s <= -half || s >= half {
                return 0.0;
            }
        } else {
            let ta = (-half - s) / d;
            let tb = (half - s) / d;
            t0 = t0.max(ta.min(tb));
            t1 = t1.min(ta.max(tb));
        }
    }
    if t0 >= t1 {
        return 0.0;
    }

    let eps = 1e-12;
    let at = |t: f64| (sx + t * dx, sy + t * dy);
    let (ex, ey) = at(t0 + eps);
    let clamp_idx = |v: f64| -> isize { (v.floor() as isize).clamp(0, n as isize - 1) };
    let mut ix = clamp_idx((ex + half) / pl);
    let mut iy = clamp_idx((ey + half) / pl);

    // Parametric step to the next x/y pixel boundary.
    let (step_x, dtx, mut tx) = if dx > 0.0 {
        let bound = -half + (ix + 1) as f64 * pl;
        (1isize, pl / dx, (bound - sx) / dx)
    } else if dx < 0.0 {
        let bound = -half + ix as f64 * pl;
        (-1isize, -pl / dx, (bound - sx) / dx)
    } else {
        (0isize, f64::INFINITY, f64::INFINITY)
    };
    let (step_y, dty, mut ty) = if dy > 0.0 {
        let bound = -half + (iy + 1) as f64 * pl;
        (1isize, pl / dy, (bound - sy) / dy)
    } else if dy < 0.0 {
        let bound = -half + iy as f64 * pl;
        (-1isize, -pl / dy, (bound - sy) / dy)
    } else {
        (0isize, f64::INFINITY, f64::INFINITY)
    };

    let mut acc = 0.0;
    let mut t = t0;
    while t < t1 - eps {
        let t_next = tx.min(ty).min(t1);
        let seg = (t_next - t) * ray_len;
        if seg > 0.0 {
            acc += seg * img.get(iy as usize, ix as usize);
        }
        if t_next >= t1 - eps {
            break;
        }
        if tx <= ty {
            ix += step_x;
            tx += dtx;
            if ix < 0 || ix >= n as isize {
                break;
            }
        } else {
            iy += step_y;
            ty += dty;
            if iy < 0 || iy >= n as isize {
                break;
            }
        }
        t = t_next;
    }
    acc
}

/// Forward-project an image into a sinogram: entry (v, b) is the line
/// integral from the view-v source position through detector bin b.
pub fn forward_project(img: &ImageGrid, geo: &FanBeamGeometry) -> Result<Sinogram, CtError> {
    geo.matches_image(img)?;
    let ndb = geo.n_bins();
    let data: Vec<f64> = geo
        .view_angles
        .par_iter()
        .flat_map_iter(|&theta| {
            let (cos_t, sin_t) = (theta.cos(), theta.sin());
            let src = (geo.dsr * cos_t, geo.dsr * sin_t);
            let det_center = (-geo.ddr * cos_t, -geo.ddr * sin_t);
            let tangent = (-sin_t, cos_t);
            (0..ndb).map(move |b| {
                let s = geo.detector_offsets[b];
                let dst = (det_center.0 + s * tangent.0, det_center.1 + s * tangent.1);
                line_integral(img, src, dst)
            })
        })
        .collect();
    Ok(Sinogram::new(geo.clone(), data))
}
