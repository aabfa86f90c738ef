//! Training losses and image-quality metrics, plus the metrics CSV stream.

use crate::ctphys::ImageGrid;
use serde::{Deserialize, Serialize};
use std::io::Write;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("image side {0} is smaller than the 11-pixel ssim window")]
    ImageTooSmall(usize),
    #[error("code index {index} out of range for {count} codes")]
    IndexOutOfRange { index: usize, count: usize },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Loss weighting configuration.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossConfig {
    /// Temperature weight of the code-orthogonality term.
    pub tau: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { tau: 0.01 }
    }
}

fn check_same_shape(pred: &ImageGrid, reference: &ImageGrid) -> Result<(), ObjectiveError> {
    if pred.size() != reference.size() {
        return Err(ObjectiveError::ShapeMismatch(format!(
            "{} vs {}",
            pred.size(),
            reference.size()
        )));
    }
    Ok(())
}

/// Mean squared error between two images.
pub fn mse_loss(pred: &ImageGrid, reference: &ImageGrid) -> Result<f64, ObjectiveError> {
    check_same_shape(pred, reference)?;
    let n = pred.data().len() as f64;
    Ok(pred
        .data()
        .iter()
        .zip(reference.data())
        .map(|(p, r)| (p - r) * (p - r))
        .sum::<f64>()
        / n)
}

/// Squared-dot-product orthogonality penalty for code `i` against all other
/// codes: sum over j != i of |c_i . c_j|^2. A single code yields 0.
pub fn orth_loss(codes: &[Vec<f64>], i: usize) -> Result<f64, ObjectiveError> {
    if i >= codes.len() {
        return Err(ObjectiveError::IndexOutOfRange {
            index: i,
            count: codes.len(),
        });
    }
    let ci = &codes[i];
    let mut acc = 0.0;
    for (j, cj) in codes.iter().enumerate() {
        if j == i {
            continue;
        }
        let dot: f64 = ci.iter().zip(cj).map(|(a, b)| a * b).sum();
        acc += dot * dot;
    }
    Ok(acc)
}

/// Imaging loss plus weighted orthogonality term.
pub fn total_loss(
    pred: &ImageGrid,
    reference: &ImageGrid,
    codes: &[Vec<f64>],
    i: usize,
    cfg: &LossConfig,
) -> Result<f64, ObjectiveError> {
    Ok(mse_loss(pred, reference)? + cfg.tau * orth_loss(codes, i)?)
}

/// Peak signal-to-noise ratio in dB; identical images yield +infinity.
pub fn psnr(pred: &ImageGrid, reference: &ImageGrid, data_range: f64) -> Result<f64, ObjectiveError> {
    let mse = mse_loss(pred, reference)?;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (data_range * data_range / mse).log10())
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn ssim_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        *v = (-(i as f64 - c).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in k.iter_mut() {
        *v /= sum;
    }
    k
}

/// Mean structural similarity with an 11x11 Gaussian window (sigma 1.5),
/// averaged over window positions fully inside the image.
pub fn ssim(pred: &ImageGrid, reference: &ImageGrid, data_range: f64) -> Result<f64, ObjectiveError> {
    check_same_shape(pred, reference)?;
    let n = pred.size();
    if n < SSIM_WINDOW {
        return Err(ObjectiveError::ImageTooSmall(n));
    }
    let kernel = ssim_kernel();
    let pad = SSIM_WINDOW / 2;
    let c1 = (SSIM_K1 * data_range).powi(2);
    let c2 = (SSIM_K2 * data_range).powi(2);
    let (x, y) = (pred.data(), reference.data());

    let mut acc = 0.0;
    let mut count = 0usize;
    for ci in pad..n - pad {
        for cj in pad..n - pad {
            let (mut mx, mut my, mut mxx, mut myy, mut mxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for (wi, kw_i) in kernel.iter().enumerate() {
                let row = (ci + wi - pad) * n;
                for (wj, kw_j) in kernel.iter().enumerate() {
                    let w = kw_i * kw_j;
                    let xv = x[row + cj + wj - pad];
                    let yv = y[row + cj + wj - pad];
                    mx += w * xv;
                    my += w * yv;
                    mxx += w * xv * xv;
                    myy += w * yv * yv;
                    mxy += w * xv * yv;
                }
            }
            let vx = mxx - mx * mx;
            let vy = myy - my * my;
            let cxy = mxy - mx * my;
            let s = ((2.0 * mx * my + c1) * (2.0 * cxy + c2))
                / ((mx * mx + my * my + c1) * (vx + vy + c2));
            acc += s;
            count += 1;
        }
    }
    Ok(acc / count as f64)
}

/// One evaluation record: per-client metric means for one round and split.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRecord {
    pub client_id: u32,
    pub round: usize,
    pub split: String,
    pub psnr_mean: f64,
    pub ssim_mean: f64,
    pub n_samples: usize,
}

pub const METRICS_CSV_HEADER: &str = "client_id,round,split,psnr_mean,ssim_mean,n_samples";

impl MetricRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.client_id, self.round, self.split, self.psnr_mean, self.ssim_mean, self.n_samples
        )
    }
}

/// Append-only CSV stream of metric records.
pub struct MetricsWriter<W: Write> {
    out: W,
}

impl<W: Write> MetricsWriter<W> {
    pub fn new(mut out: W) -> Result<Self, ObjectiveError> {
        writeln!(out, "{METRICS_CSV_HEADER}")?;
        Ok(MetricsWriter { out })
    }

    pub fn append(&mut self, rec: &MetricRecord) -> Result<(), ObjectiveError> {
        writeln!(self.out, "{}", rec.csv_row())?;
        self.out.flush()?;
        Ok(())
    }
}
