//! Fan-beam CT physics: scan geometry, ray-driven forward projection,
//! low-dose noise injection on the projection data, and filtered
//! backprojection.
//!
//! Conventions: flat (equidistant) detector, full 2-pi scan with equally
//! spaced views, image centered on the rotation axis, attenuation in 1/mm,
//! distances in mm. The source for view angle theta sits at `dsr * u(theta)`
//! with `u = (cos, sin)`; the detector line lies at distance `ddr` on the
//! opposite side, along `t = (-sin, cos)`.

mod fbp;
mod io;
mod project;
#[cfg(test)]
mod testutil;

pub use fbp::fbp_reconstruct;
pub use io::{pfs_matrix_bytes, read_pfs_matrix, write_pfs_matrix, write_pgm, PgmWindow, PFS_MAGIC};
pub use project::forward_project;

use crate::protocol::Protocol;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use thiserror::Error;

/// Electronic noise variance used throughout the noise simulation.
pub const ELECTRONIC_NOISE_VARIANCE: f64 = 10.0;

/// Native acquisition grid the protocol pixel length refers to. A
/// reconstruction at `image_size` pixels samples the same field of view, so
/// its pixel length is `pl * REFERENCE_GRID / image_size`. Keeping the
/// physical field of view fixed preserves the protocols' dose regimes:
/// shrinking the scene with the grid instead would make the imaged object so
/// small that photon noise all but vanishes.
pub const REFERENCE_GRID: usize = 256;

/// Pixel length (mm) of an `image_size` reconstruction under protocol `p`.
pub fn effective_pixel_len(p: &Protocol, image_size: usize) -> f64 {
    p.pl * REFERENCE_GRID as f64 / image_size as f64
}

#[derive(Debug, Error)]
pub enum CtError {
    #[error(
        "detector does not cover the reconstruction circle: fan half-angle {fan_deg:.3} deg < required {required_deg:.3} deg"
    )]
    InsufficientCoverage { fan_deg: f64, required_deg: f64 },
    #[error("geometry mismatch: {0}")]
    GeometryMismatch(String),
    #[error("image size must be at least 8, got {0}")]
    ImageTooSmall(usize),
    #[error("source distance {dsr} mm must exceed image circle radius {radius} mm")]
    SourceInsideImage { dsr: f64, radius: f64 },
    #[error("invalid noise config: {0}")]
    InvalidNoiseConfig(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad file format: {0}")]
    Format(String),
}

/// Square image of linear attenuation coefficients (1/mm).
#[derive(Debug, Clone, PartialEq)]
pub struct ImageGrid {
    size: usize,
    pixel_len: f64,
    data: Vec<f64>,
}

impl ImageGrid {
    pub fn new(size: usize, pixel_len: f64, data: Vec<f64>) -> ImageGrid {
        assert_eq!(data.len(), size * size);
        assert!(pixel_len > 0.0);
        ImageGrid {
            size,
            pixel_len,
            data,
        }
    }

    pub fn zeros(size: usize, pixel_len: f64) -> ImageGrid {
        ImageGrid::new(size, pixel_len, vec![0.0; size * size])
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn pixel_len(&self) -> f64 {
        self.pixel_len
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.size + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: f64) {
        self.data[row * self.size + col] = v;
    }

    /// Rescale all values by `1 / ceiling`, e.g. to map attenuation into
    /// [0, 1] for network consumption.
    pub fn normalized(&self, ceiling: f64) -> ImageGrid {
        ImageGrid::new(
            self.size,
            self.pixel_len,
            self.data.iter().map(|v| v / ceiling).collect(),
        )
    }
}

/// Fan-beam scan geometry materialized from a protocol.
#[derive(Debug, Clone, PartialEq)]
pub struct FanBeamGeometry {
    /// View angles in radians, equally spaced over [0, 2*pi).
    pub view_angles: Vec<f64>,
    /// Detector bin-center offsets (mm) on the physical detector line,
    /// symmetric about the central ray.
    pub detector_offsets: Vec<f64>,
    /// Source-to-rotation-center distance (mm).
    pub dsr: f64,
    /// Detector-to-rotation-center distance (mm).
    pub ddr: f64,
    /// Detector bin length (mm).
    pub bin_len: f64,
    /// Reconstruction grid side length in pixels.
    pub image_size: usize,
    /// Pixel side length (mm).
    pub pixel_len: f64,
}

impl FanBeamGeometry {
    pub fn n_views(&self) -> usize {
        self.view_angles.len()
    }

    pub fn n_bins(&self) -> usize {
        self.detector_offsets.len()
    }

    /// Radius of the reconstruction circle inscribed in the image square.
    pub fn image_radius(&self) -> f64 {
        self.image_size as f64 * self.pixel_len / 2.0
    }

    fn matches_image(&self, img: &ImageGrid) -> Result<(), CtError> {
        if img.size() != self.image_size || img.pixel_len() != self.pixel_len {
            return Err(CtError::GeometryMismatch(format!(
                "image {}px @ {} mm vs geometry {}px @ {} mm",
                img.size(),
                img.pixel_len(),
                self.image_size,
                self.pixel_len
            )));
        }
        Ok(())
    }
}

/// Build the scan geometry for a protocol and reconstruction grid size.
///
/// Fails when the fan subtended by the detector does not cover the image
/// circle from every view.
pub fn derive_geometry(p: &Protocol, image_size: usize) -> Result<FanBeamGeometry, CtError> {
    if image_size < 8 {
        return Err(CtError::ImageTooSmall(image_size));
    }
    let nv = p.nv as usize;
    let ndb = p.ndb as usize;
    let view_angles: Vec<f64> = (0..nv)
        .map(|v| 2.0 * std::f64::consts::PI * v as f64 / nv as f64)
        .collect();
    let detector_offsets: Vec<f64> = (0..ndb)
        .map(|b| (b as f64 - (ndb as f64 - 1.0) / 2.0) * p.dbl)
        .collect();
    let geo = FanBeamGeometry {
        view_angles,
        detector_offsets,
        dsr: p.dsr,
        ddr: p.ddr,
        bin_len: p.dbl,
        image_size,
        pixel_len: effective_pixel_len(p, image_size),
    };
    let radius = geo.image_radius();
    if radius >= p.dsr {
        return Err(CtError::SourceInsideImage {
            dsr: p.dsr,
            radius,
        });
    }
    let half_span = ndb as f64 * p.dbl / 2.0;
    let fan = (half_span / (p.dsr + p.ddr)).atan();
    let required = (radius / p.dsr).asin();
    if fan < required {
        return Err(CtError::InsufficientCoverage {
            fan_deg: fan.to_degrees(),
            required_deg: required.to_degrees(),
        });
    }
    Ok(geo)
}

/// Projection-domain data: one row of line integrals per view.
#[derive(Debug, Clone, PartialEq)]
pub struct Sinogram {
    geometry: FanBeamGeometry,
    data: Vec<f64>,
}

impl Sinogram {
    pub fn new(geometry: FanBeamGeometry, data: Vec<f64>) -> Sinogram {
        assert_eq!(data.len(), geometry.n_views() * geometry.n_bins());
        Sinogram { geometry, data }
    }

    pub fn zeros(geometry: FanBeamGeometry) -> Sinogram {
        let n = geometry.n_views() * geometry.n_bins();
        Sinogram {
            geometry,
            data: vec![0.0; n],
        }
    }

    pub fn geometry(&self) -> &FanBeamGeometry {
        &self.geometry
    }

    pub fn n_views(&self) -> usize {
        self.geometry.n_views()
    }

    pub fn n_bins(&self) -> usize {
        self.geometry.n_bins()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, view: usize, bin: usize) -> f64 {
        self.data[view * self.geometry.n_bins() + bin]
    }

    pub fn view(&self, view: usize) -> &[f64] {
        let ndb = self.geometry.n_bins();
        &self.data[view * ndb..(view + 1) * ndb]
    }
}

/// Configuration of the low-dose measurement noise model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseConfig {
    /// Incident photon count per ray.
    pub photon_count: f64,
    /// Electronic noise variance (counts squared).
    pub electronic_variance: f64,
    /// Minimum post-noise count before the log transform.
    pub count_floor: f64,
}

impl NoiseConfig {
    pub fn new(
        photon_count: f64,
        electronic_variance: f64,
        count_floor: f64,
    ) -> Result<NoiseConfig, CtError> {
        if !(photon_count > 0.0) {
            return Err(CtError::InvalidNoiseConfig(format!(
                "photon count must be positive, got {photon_count}"
            )));
        }
        if !(electronic_variance >= 0.0) {
            return Err(CtError::InvalidNoiseConfig(format!(
                "electronic variance must be non-negative, got {electronic_variance}"
            )));
        }
        if !(count_floor > 0.0) {
            return Err(CtError::InvalidNoiseConfig(format!(
                "count floor must be positive, got {count_floor}"
            )));
        }
        Ok(NoiseConfig {
            photon_count,
            electronic_variance,
            count_floor,
        })
    }

    /// Standard configuration for a protocol: its photon count, the fixed
    /// electronic variance, and a one-count floor against photon starvation.
    pub fn from_protocol(p: &Protocol) -> NoiseConfig {
        NoiseConfig {
            photon_count: p.pn,
            electronic_variance: ELECTRONIC_NOISE_VARIANCE,
            count_floor: 1.0,
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Counter-based seed splitting: a stable per-entry seed derived from the
/// run seed and up to three indices, independent of evaluation order.
pub fn split_seed(seed: u64, a: u64, b: u64, c: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(splitmix64(seed) ^ a) ^ b) ^ c)
}

/// Noisy photon count for one clean line integral: Poisson counts at the
/// attenuated flux plus Gaussian electronic noise, clamped at the floor.
fn noisy_count(clean: f64, cfg: &NoiseConfig, rng: &mut ChaCha8Rng) -> f64 {
    let lambda = cfg.photon_count * (-clean).exp();
    let k = if lambda > 0.0 {
        Poisson::new(lambda).expect("valid lambda").sample(rng)
    } else {
        0.0
    };
    let e = if cfg.electronic_variance > 0.0 {
        Normal::new(0.0, cfg.electronic_variance.sqrt())
            .expect("valid sigma")
            .sample(rng)
    } else {
        0.0
    };
    (k + e).max(cfg.count_floor)
}

/// Inject Poisson photon noise and Gaussian electronic noise into a clean
/// sinogram, returning the re-logged noisy line integrals.
///
/// Every entry draws from its own counter-derived RNG, so the result is
/// deterministic for a given seed regardless of traversal order or thread
/// count.
pub fn simulate_low_dose(clean: &Sinogram, cfg: &NoiseConfig, rng_seed: u64) -> Sinogram {
    use rayon::prelude::*;
    let ndb = clean.n_bins();
    let i0 = cfg.photon_count;
    let data: Vec<f64> = clean
        .data()
        .par_iter()
        .enumerate()
        .map(|(idx, &y)| {
            let (v, b) = (idx / ndb, idx % ndb);
            let mut rng = ChaCha8Rng::seed_from_u64(split_seed(rng_seed, v as u64, b as u64, 0));
            let count = noisy_count(y, cfg, &mut rng);
            (i0 / count).ln()
        })
        .collect();
    Sinogram::new(clean.geometry().clone(), data)
}
