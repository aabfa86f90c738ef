//! Shared phantoms for physics tests.

use super::ImageGrid;

/// Disk of radius `r` mm and attenuation `mu` centered at (cx, cy).
pub(crate) fn disk_image(size: usize, pl: f64, cx: f64, cy: f64, r: f64, mu: f64) -> ImageGrid {
    let mut img = ImageGrid::zeros(size, pl);
    let half = size as f64 * pl / 2.0;
    for i in 0..size {
        for j in 0..size {
            let x = -half + (j as f64 + 0.5) * pl;
            let y = -half + (i as f64 + 0.5) * pl;
            if (x - cx).powi(2) + (y - cy).powi(2) <= r * r {
                img.set(i, j, mu);
            }
        }
    }
    img
}

/// Nested-ellipse head-style test phantom (additive ellipse values).
pub(crate) fn test_phantom(size: usize, pl: f64) -> ImageGrid {
    let mut img = ImageGrid::zeros(size, pl);
    let half = size as f64 * pl / 2.0;
    // (cx, cy, a, b, angle_deg, value) in fractions of the half-extent.
    let ellipses: [(f64, f64, f64, f64, f64, f64); 6] = [
        (0.0, 0.0, 0.86, 0.92, 0.0, 0.019),
        (0.0, -0.02, 0.78, 0.84, 0.0, -0.004),
        (0.25, 0.0, 0.21, 0.41, -18.0, -0.006),
        (-0.25, 0.0, 0.31, 0.46, 18.0, -0.006),
        (0.0, 0.35, 0.25, 0.21, 0.0, 0.005),
        (0.0, -0.48, 0.06, 0.06, 0.0, 0.029),
    ];
    for i in 0..size {
        for j in 0..size {
            let x = (-half + (j as f64 + 0.5) * pl) / half;
            let y = (-half + (i as f64 + 0.5) * pl) / half;
            let mut v = 0.0;
            for (cx, cy, a, b, ang, val) in ellipses {
                let t = ang.to_radians();
                let xr = (x - cx) * t.cos() + (y - cy) * t.sin();
                let yr = -(x - cx) * t.sin() + (y - cy) * t.cos();
                if (xr / a).powi(2) + (yr / b).powi(2) <= 1.0 {
                    v += val;
                }
            }
            img.set(i, j, v.max(0.0));
        }
    }
    img
}
