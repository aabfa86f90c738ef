//! Synthetic per-patient anatomy phantoms and per-client dataset assembly.
//!
//! Patients are deterministic families of ellipse phantoms keyed by a seed;
//! a slice depends only on (seed, body part, slice index), so any slice can
//! be regenerated in isolation. Datasets pair a rasterized reference image
//! with its low-dose reconstruction produced by the full physics pipeline.

use crate::ctphys::{
    derive_geometry, fbp_reconstruct, forward_project, read_pfs_matrix, simulate_low_dose,
    split_seed, write_pfs_matrix, CtError, ImageGrid, NoiseConfig,
};
use crate::protocol::{Protocol, ProtocolError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use thiserror::Error;

/// Global attenuation ceiling (1/mm) mapping images onto [0, 1] for
/// network consumption; chosen above the densest tissue class.
pub const ATTENUATION_CEILING: f64 = 0.06;

/// Radius (mm) of the canonical field-of-view circle every phantom fits in.
/// Sized so the anatomy fits the narrowest built-in protocol's field of view
/// at the reference acquisition scale.
pub const FOV_RADIUS: f64 = 60.0;

#[derive(Debug, Error)]
pub enum PhantomError {
    #[error("patient seed {seed} already claimed for training by client {existing}, re-claimed by client {claimant}")]
    SeedCollision {
        seed: u64,
        existing: u32,
        claimant: u32,
    },
    #[error(transparent)]
    Ct(#[from] CtError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed dataset: {0}")]
    Malformed(String),
}

/// Tissue classes with fixed linear attenuation coefficients (1/mm).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TissueClass {
    Air,
    Fat,
    Soft,
    Blood,
    Bone,
}

impl TissueClass {
    pub fn attenuation(self) -> f64 {
        match self {
            TissueClass::Air => 0.000,
            TissueClass::Fat => 0.017,
            TissueClass::Soft => 0.019,
            TissueClass::Blood => 0.021,
            TissueClass::Bone => 0.048,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BodyPart {
    Chest,
    Abdomen,
    Pelvis,
}

impl BodyPart {
    pub fn name(self) -> &'static str {
        match self {
            BodyPart::Chest => "chest",
            BodyPart::Abdomen => "abdomen",
            BodyPart::Pelvis => "pelvis",
        }
    }

    pub fn from_name(s: &str) -> Option<BodyPart> {
        match s {
            "chest" => Some(BodyPart::Chest),
            "abdomen" => Some(BodyPart::Abdomen),
            "pelvis" => Some(BodyPart::Pelvis),
            _ => None,
        }
    }

    /// Round-robin assignment for the k-th patient of a client.
    pub fn round_robin(k: usize) -> BodyPart {
        match k % 3 {
            0 => BodyPart::Chest,
            1 => BodyPart::Abdomen,
            _ => BodyPart::Pelvis,
        }
    }
}

/// One phantom ellipse: center/semi-axes in mm, rotation in radians.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub a: f64,
    pub b: f64,
    pub rot: f64,
    pub tissue: TissueClass,
    pub lesion: bool,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (sin, cos) = self.rot.sin_cos();
        let dx = x - self.cx;
        let dy = y - self.cy;
        let xr = dx * cos + dy * sin;
        let yr = -dx * sin + dy * cos;
        (xr / self.a).powi(2) + (yr / self.b).powi(2) <= 1.0
    }

    fn max_extent(&self) -> f64 {
        (self.cx * self.cx + self.cy * self.cy).sqrt() + self.a.max(self.b)
    }
}

/// One slice of synthetic anatomy: ordered ellipses where later entries
/// overwrite earlier ones.
#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    pub ellipses: Vec<Ellipse>,
    pub patient_seed: u64,
    pub body_part: BodyPart,
}

impl Phantom {
    pub fn lesion_count(&self) -> usize {
        self.ellipses.iter().filter(|e| e.lesion).count()
    }
}

/// Summary anatomy descriptors attached to each sample.
#[derive(Debug, Clone, PartialEq)]
pub struct AnatomyMetadata {
    pub body_part: BodyPart,
    /// Area fractions for fat, soft tissue, blood, and bone; the remainder
    /// up to 1 is air.
    pub tissue_fractions: BTreeMap<TissueClass, f64>,
    pub lesion_count: usize,
}

impl AnatomyMetadata {
    pub fn fraction(&self, t: TissueClass) -> f64 {
        self.tissue_fractions.get(&t).copied().unwrap_or(0.0)
    }

    /// Fixed-order descriptor: body-part one-hot, four tissue fractions,
    /// lesion count.
    pub fn descriptor(&self) -> [f64; 8] {
        let mut d = [0.0; 8];
        d[match self.body_part {
            BodyPart::Chest => 0,
            BodyPart::Abdomen => 1,
            BodyPart::Pelvis => 2,
        }] = 1.0;
        d[3] = self.fraction(TissueClass::Fat);
        d[4] = self.fraction(TissueClass::Soft);
        d[5] = self.fraction(TissueClass::Blood);
        d[6] = self.fraction(TissueClass::Bone);
        d[7] = self.lesion_count as f64;
        d
    }
}

fn slice_rng(patient_seed: u64, body_part: BodyPart, purpose: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(split_seed(patient_seed, body_part as u64, purpose, 0))
}

/// Smooth per-slice modulation in [1 - amp, 1 + amp].
fn slice_wobble(s: usize, phase: f64, amp: f64) -> f64 {
    1.0 + amp * (2.0 * std::f64::consts::PI * s as f64 / 16.0 + phase).sin()
}

/// Generate the slice-`s` phantom of a patient. Depends only on
/// (patient_seed, body_part, s), never on how many slices are requested.
pub fn generate_slice(patient_seed: u64, body_part: BodyPart, s: usize) -> Phantom {
    let mut rng = slice_rng(patient_seed, body_part, 1);
    let mut ellipses = Vec::new();

    // Body outline in soft tissue. Margins keep every ellipse inside the
    // field-of-view circle under the strongest slice wobble.
    let body_a = 42.0 + 9.2 * rng.random::<f64>();
    let body_b = 34.0 + 8.0 * rng.random::<f64>();
    let body_cx = 3.2 * (rng.random::<f64>() - 0.5);
    let body_cy = 3.2 * (rng.random::<f64>() - 0.5);
    let body_rot = 0.2 * (rng.random::<f64>() - 0.5);
    let body_phase = rng.random::<f64>() * std::f64::consts::TAU;
    let wob = slice_wobble(s, body_phase, 0.05);
    ellipses.push(Ellipse {
        cx: body_cx,
        cy: body_cy,
        a: body_a * wob,
        b: body_b * wob,
        rot: body_rot,
        tissue: TissueClass::Soft,
        lesion: false,
    });

    let inner = body_a.min(body_b) * 0.9;
    let interior = |rng: &mut ChaCha8Rng, max_r: f64, tissue, lesion, s: usize| {
        let phase = rng.random::<f64>() * std::f64::consts::TAU;
        let dist = rng.random::<f64>() * (inner - max_r).max(0.0) * 0.75;
        let dir = rng.random::<f64>() * std::f64::consts::TAU;
        let a = max_r * (0.45 + 0.55 * rng.random::<f64>());
        let b = max_r * (0.45 + 0.55 * rng.random::<f64>());
        let rot = rng.random::<f64>() * std::f64::consts::PI;
        let w = slice_wobble(s, phase, 0.06);
        let drift = 1.6 * (2.0 * std::f64::consts::PI * s as f64 / 16.0 + phase).cos();
        Ellipse {
            cx: body_cx + dist * dir.cos() + drift,
            cy: body_cy + dist * dir.sin() + drift * 0.5,
            a: a * w,
            b: b * w,
            rot,
            tissue,
            lesion,
        }
    };

    let organ_tissues: &[TissueClass] = match body_part {
        BodyPart::Chest => &[
            TissueClass::Air,
            TissueClass::Air,
            TissueClass::Blood,
            TissueClass::Fat,
        ],
        BodyPart::Abdomen => &[
            TissueClass::Fat,
            TissueClass::Blood,
            TissueClass::Fat,
            TissueClass::Blood,
        ],
        BodyPart::Pelvis => &[
            TissueClass::Blood,
            TissueClass::Fat,
            TissueClass::Fat,
            TissueClass::Blood,
        ],
    };
    let n_organs = rng.random_range(2..=4usize);
    for k in 0..n_organs {
        let e = interior(&mut rng, inner * 0.38, organ_tissues[k % 4], false, s);
        ellipses.push(e);
    }

    let n_bones = match body_part {
        BodyPart::Chest => rng.random_range(1..=2usize),
        BodyPart::Abdomen => rng.random_range(0..=2usize),
        BodyPart::Pelvis => rng.random_range(1..=3usize),
    };
    for _ in 0..n_bones {
        let e = interior(&mut rng, 12.8, TissueClass::Bone, false, s);
        ellipses.push(e);
    }

    let n_lesions = rng.random_range(0..=2usize);
    for _ in 0..n_lesions {
        let e = interior(&mut rng, 6.4, TissueClass::Blood, true, s);
        ellipses.push(e);
    }

    let phantom = Phantom {
        ellipses,
        patient_seed,
        body_part,
    };
    debug_assert!(
        phantom.ellipses.iter().all(|e| e.max_extent() <= FOV_RADIUS),
        "ellipse escaped the field-of-view circle"
    );
    phantom
}

/// Deterministic family of `n_slices` phantoms for one patient.
pub fn generate_patient(patient_seed: u64, body_part: BodyPart, n_slices: usize) -> Vec<Phantom> {
    assert!(n_slices >= 1);
    (0..n_slices)
        .map(|s| generate_slice(patient_seed, body_part, s))
        .collect()
}

/// Rasterize a phantom: each pixel takes the tissue class of the topmost
/// covering ellipse; metadata fractions come from the resulting label map.
pub fn rasterize(ph: &Phantom, size: usize, pixel_len: f64) -> (ImageGrid, AnatomyMetadata) {
    assert!(size >= 8);
    assert!(pixel_len > 0.0);
    let half = size as f64 * pixel_len / 2.0;
    let mut labels = vec![TissueClass::Air; size * size];
    for i in 0..size {
        let y = -half + (i as f64 + 0.5) * pixel_len;
        for j in 0..size {
            let x = -half + (j as f64 + 0.5) * pixel_len;
            for e in ph.ellipses.iter().rev() {
                if e.contains(x, y) {
                    labels[i * size + j] = e.tissue;
                    break;
                }
            }
        }
    }
    let data: Vec<f64> = labels.iter().map(|t| t.attenuation()).collect();
    let mut fractions = BTreeMap::new();
    let total = (size * size) as f64;
    for t in [
        TissueClass::Fat,
        TissueClass::Soft,
        TissueClass::Blood,
        TissueClass::Bone,
    ] {
        let count = labels.iter().filter(|&&l| l == t).count();
        fractions.insert(t, count as f64 / total);
    }
    (
        ImageGrid::new(size, pixel_len, data),
        AnatomyMetadata {
            body_part: ph.body_part,
            tissue_fractions: fractions,
            lesion_count: ph.lesion_count(),
        },
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// One paired sample: the low-dose reconstruction, its reference, and the
/// anatomy summary, all under the owning client's protocol.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub patient_seed: u64,
    pub slice_index: usize,
    pub body_part: BodyPart,
    pub low_dose: ImageGrid,
    pub reference: ImageGrid,
    pub metadata: AnatomyMetadata,
}

impl Sample {
    pub fn low_dose_normalized(&self) -> ImageGrid {
        self.low_dose.normalized(ATTENUATION_CEILING)
    }

    pub fn reference_normalized(&self) -> ImageGrid {
        self.reference.normalized(ATTENUATION_CEILING)
    }
}

/// All samples of one split for one client.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientDataset {
    pub client_id: u32,
    pub protocol: Protocol,
    pub split: Split,
    pub samples: Vec<Sample>,
}

/// Train and test splits for one client.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientData {
    pub train: ClientDataset,
    pub test: ClientDataset,
}

/// Tracks which patient seeds are used for training by which client, so no
/// patient contributes training data to two clients.
#[derive(Debug, Default)]
pub struct SeedRegistry {
    train_seeds: BTreeMap<u64, u32>,
}

impl SeedRegistry {
    pub fn new() -> SeedRegistry {
        SeedRegistry::default()
    }

    pub fn claim_train(&mut self, client_id: u32, seeds: &[u64]) -> Result<(), PhantomError> {
        for &seed in seeds {
            if let Some(&existing) = self.train_seeds.get(&seed) {
                return Err(PhantomError::SeedCollision {
                    seed,
                    existing,
                    claimant: client_id,
                });
            }
        }
        for &seed in seeds {
            self.train_seeds.insert(seed, client_id);
        }
        Ok(())
    }
}

/// Build one split of a client dataset by running the physics pipeline:
/// rasterize each slice, forward-project, inject protocol-dose noise, and
/// reconstruct the low-dose input. Body parts rotate over the patient list.
pub fn build_client_dataset(
    client_id: u32,
    protocol: Protocol,
    patient_seeds: &[u64],
    slices_per_patient: usize,
    image_size: usize,
    noise_seed: u64,
    split: Split,
) -> Result<ClientDataset, PhantomError> {
    let geo = derive_geometry(&protocol, image_size)?;
    let cfg = NoiseConfig::from_protocol(&protocol);
    let jobs: Vec<(u64, BodyPart, usize)> = patient_seeds
        .iter()
        .enumerate()
        .flat_map(|(k, &seed)| {
            (0..slices_per_patient).map(move |s| (seed, BodyPart::round_robin(k), s))
        })
        .collect();
    let samples: Result<Vec<Sample>, PhantomError> = jobs
        .par_iter()
        .map(|&(seed, body_part, s)| {
            let ph = generate_slice(seed, body_part, s);
            let (reference, metadata) = rasterize(&ph, image_size, geo.pixel_len);
            let clean = forward_project(&reference, &geo)?;
            let noisy = simulate_low_dose(
                &clean,
                &cfg,
                split_seed(noise_seed, client_id as u64, seed, s as u64),
            );
            let low_dose = fbp_reconstruct(&noisy, &geo)?;
            Ok(Sample {
                patient_seed: seed,
                slice_index: s,
                body_part,
                low_dose,
                reference,
                metadata,
            })
        })
        .collect();
    Ok(ClientDataset {
        client_id,
        protocol,
        split,
        samples: samples?,
    })
}

const MANIFEST_HEADER: &str = "sample_id,patient_seed,slice_index,split,body_part";

/// Persist a client's train and test splits under `dir`: a manifest CSV, the
/// protocol table, and paired raw-binary images per sample.
pub fn write_client_dataset(dir: &Path, data: &ClientData) -> Result<(), PhantomError> {
    fs::create_dir_all(dir)?;
    let mut protocol_file = Vec::new();
    Protocol::write_csv(&mut protocol_file, &[data.train.protocol])?;
    fs::write(dir.join("protocol.csv"), protocol_file)?;

    let mut manifest = String::new();
    manifest.push_str(MANIFEST_HEADER);
    manifest.push('\n');
    let mut sample_id = 0usize;
    for ds in [&data.train, &data.test] {
        for s in &ds.samples {
            manifest.push_str(&format!(
                "{},{},{},{},{}\n",
                sample_id,
                s.patient_seed,
                s.slice_index,
                ds.split.name(),
                s.body_part.name()
            ));
            let size = s.reference.size();
            write_pfs_matrix(
                &dir.join(format!("s{sample_id:04}_low.pfs")),
                size,
                size,
                s.low_dose.data(),
            )?;
            write_pfs_matrix(
                &dir.join(format!("s{sample_id:04}_ref.pfs")),
                size,
                size,
                s.reference.data(),
            )?;
            sample_id += 1;
        }
    }
    fs::write(dir.join("manifest.csv"), manifest)?;
    Ok(())
}

/// Load a client dataset directory written by [`write_client_dataset`].
/// Anatomy metadata is regenerated from the manifest keys; it is a pure
/// function of (patient_seed, body_part, slice_index).
pub fn read_client_dataset(dir: &Path, client_id: u32) -> Result<ClientData, PhantomError> {
    let protocols = Protocol::read_csv(fs::File::open(dir.join("protocol.csv"))?)?;
    let protocol = *protocols
        .first()
        .ok_or_else(|| PhantomError::Malformed("empty protocol.csv".into()))?;

    let manifest = fs::read_to_string(dir.join("manifest.csv"))?;
    let mut lines = manifest.lines();
    let header = lines
        .next()
        .ok_or_else(|| PhantomError::Malformed("empty manifest".into()))?;
    if header != MANIFEST_HEADER {
        return Err(PhantomError::Malformed(format!(
            "unexpected manifest header: {header}"
        )));
    }

    let mut train = Vec::new();
    let mut test = Vec::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(PhantomError::Malformed(format!("bad manifest row: {line}")));
        }
        let sample_id: usize = fields[0]
            .parse()
            .map_err(|_| PhantomError::Malformed(format!("bad sample id: {line}")))?;
        let patient_seed: u64 = fields[1]
            .parse()
            .map_err(|_| PhantomError::Malformed(format!("bad patient seed: {line}")))?;
        let slice_index: usize = fields[2]
            .parse()
            .map_err(|_| PhantomError::Malformed(format!("bad slice index: {line}")))?;
        let split = match fields[3] {
            "train" => Split::Train,
            "test" => Split::Test,
            other => {
                return Err(PhantomError::Malformed(format!("bad split: {other}")));
            }
        };
        let body_part = BodyPart::from_name(fields[4])
            .ok_or_else(|| PhantomError::Malformed(format!("bad body part: {line}")))?;

        let (rows, cols, low) = read_pfs_matrix(&dir.join(format!("s{sample_id:04}_low.pfs")))?;
        if rows != cols {
            return Err(PhantomError::Malformed("non-square image".into()));
        }
        let (_, _, reference) = read_pfs_matrix(&dir.join(format!("s{sample_id:04}_ref.pfs")))?;
        let pixel_len = crate::ctphys::effective_pixel_len(&protocol, rows);
        let ph = generate_slice(patient_seed, body_part, slice_index);
        let (_, metadata) = rasterize(&ph, rows, pixel_len);
        let sample = Sample {
            patient_seed,
            slice_index,
            body_part,
            low_dose: ImageGrid::new(rows, pixel_len, low),
            reference: ImageGrid::new(rows, pixel_len, reference),
            metadata,
        };
        match split {
            Split::Train => train.push(sample),
            Split::Test => test.push(sample),
        }
    }
    Ok(ClientData {
        train: ClientDataset {
            client_id,
            protocol,
            split: Split::Train,
            samples: train,
        },
        test: ClientDataset {
            client_id,
            protocol,
            split: Split::Test,
            samples: test,
        },
    })
}
