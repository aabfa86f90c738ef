//! Scanning protocols: the 7-parameter scanner configuration, min-max
//! normalization statistics, and the built-in known/unseen protocol tables.

use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use thiserror::Error;

/// Number of parameters in a scanning protocol vector.
pub const PROTOCOL_DIM: usize = 7;

/// Column names in vector order, matching the CSV header.
pub const FIELD_NAMES: [&str; PROTOCOL_DIM] = ["nv", "ndb", "pl", "dbl", "dsr", "ddr", "pn"];

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("protocol field {field} must be positive, got {value}")]
    NonPositiveField { field: &'static str, value: f64 },
    #[error("protocol list is empty")]
    EmptyList,
    #[error("degenerate protocol column {0} ({name}): max equals min", name = FIELD_NAMES[*.0])]
    DegenerateColumn(usize),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// A scanning protocol: acquisition geometry plus incident photon count.
///
/// Lengths are in millimeters; `nv`/`ndb` are counts and `pn` is the
/// incident photon count per detector ray.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Protocol {
    /// Number of projection views over a full rotation.
    pub nv: u32,
    /// Number of detector bins.
    pub ndb: u32,
    /// Pixel side length (mm).
    pub pl: f64,
    /// Detector bin length (mm).
    pub dbl: f64,
    /// Source-to-rotation-center distance (mm).
    pub dsr: f64,
    /// Detector-to-rotation-center distance (mm).
    pub ddr: f64,
    /// Incident photon count per ray.
    pub pn: f64,
}

impl Protocol {
    pub fn new(
        nv: u32,
        ndb: u32,
        pl: f64,
        dbl: f64,
        dsr: f64,
        ddr: f64,
        pn: f64,
    ) -> Result<Self, ProtocolError> {
        let p = Protocol {
            nv,
            ndb,
            pl,
            dbl,
            dsr,
            ddr,
            pn,
        };
        p.validate()?;
        Ok(p)
    }

    fn validate(&self) -> Result<(), ProtocolError> {
        let checks: [(&'static str, f64); PROTOCOL_DIM] = [
            ("nv", self.nv as f64),
            ("ndb", self.ndb as f64),
            ("pl", self.pl),
            ("dbl", self.dbl),
            ("dsr", self.dsr),
            ("ddr", self.ddr),
            ("pn", self.pn),
        ];
        for (field, value) in checks {
            if !(value > 0.0) || !value.is_finite() {
                return Err(ProtocolError::NonPositiveField { field, value });
            }
        }
        Ok(())
    }

    /// The protocol as a real vector in column order nv, ndb, pl, dbl, dsr, ddr, pn.
    pub fn to_vector(&self) -> [f64; PROTOCOL_DIM] {
        [
            self.nv as f64,
            self.ndb as f64,
            self.pl,
            self.dbl,
            self.dsr,
            self.ddr,
            self.pn,
        ]
    }

    /// Read protocols from CSV with header `nv,ndb,pl,dbl,dsr,ddr,pn`.
    pub fn read_csv<R: Read>(reader: R) -> Result<Vec<Protocol>, ProtocolError> {
        let mut rdr = csv::Reader::from_reader(reader);
        let mut out = Vec::new();
        for row in rdr.deserialize::<Protocol>() {
            let p = row?;
            p.validate()?;
            out.push(p);
        }
        Ok(out)
    }

    /// Write protocols as CSV with header `nv,ndb,pl,dbl,dsr,ddr,pn`.
    pub fn write_csv<W: Write>(writer: W, protocols: &[Protocol]) -> Result<(), ProtocolError> {
        let mut wtr = csv::Writer::from_writer(writer);
        for p in protocols {
            wtr.serialize(p)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Per-column minima and maxima over a reference protocol set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinMaxStats {
    pub mins: [f64; PROTOCOL_DIM],
    pub maxs: [f64; PROTOCOL_DIM],
}

impl MinMaxStats {
    /// Column-wise min/max over a non-empty protocol list. Rejects columns
    /// where max equals min, since those cannot be normalized.
    pub fn from_protocols(protocols: &[Protocol]) -> Result<Self, ProtocolError> {
        if protocols.is_empty() {
            return Err(ProtocolError::EmptyList);
        }
        let mut mins = protocols[0].to_vector();
        let mut maxs = mins;
        for p in &protocols[1..] {
            let v = p.to_vector();
            for j in 0..PROTOCOL_DIM {
                mins[j] = mins[j].min(v[j]);
                maxs[j] = maxs[j].max(v[j]);
            }
        }
        for j in 0..PROTOCOL_DIM {
            if !(maxs[j] > mins[j]) {
                return Err(ProtocolError::DegenerateColumn(j));
            }
        }
        Ok(MinMaxStats { mins, maxs })
    }

    /// Map a normalized vector back to raw protocol coordinates.
    pub fn denormalize(&self, values: &[f64; PROTOCOL_DIM]) -> [f64; PROTOCOL_DIM] {
        let mut out = [0.0; PROTOCOL_DIM];
        for j in 0..PROTOCOL_DIM {
            out[j] = self.mins[j] + values[j] * (self.maxs[j] - self.mins[j]);
        }
        out
    }
}

/// A min-max normalized protocol vector.
///
/// Entries are in [0, 1] for protocols drawn from the reference set; values
/// outside that range are passed through unclipped so that protocols beyond
/// the training extremes keep their ordering.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizedProtocol {
    pub values: [f64; PROTOCOL_DIM],
}

/// Per-column min-max normalization: entry j is (g_j - min_j) / (max_j - min_j).
pub fn normalize_protocol(g: &Protocol, stats: &MinMaxStats) -> NormalizedProtocol {
    let v = g.to_vector();
    let mut values = [0.0; PROTOCOL_DIM];
    for j in 0..PROTOCOL_DIM {
        values[j] = (v[j] - stats.mins[j]) / (stats.maxs[j] - stats.mins[j]);
    }
    NormalizedProtocol { values }
}

/// Column-wise statistics of a protocol list; see [`MinMaxStats::from_protocols`].
pub fn protocol_stats(protocols: &[Protocol]) -> Result<MinMaxStats, ProtocolError> {
    MinMaxStats::from_protocols(protocols)
}

macro_rules! protocol {
    ($nv:expr, $ndb:expr, $pl:expr, $dbl:expr, $dsr:expr, $ddr:expr, $pn:expr) => {
        Protocol {
            nv: $nv,
            ndb: $ndb,
            pl: $pl,
            dbl: $dbl,
            dsr: $dsr,
            ddr: $ddr,
            pn: $pn,
        }
    };
}

/// The eight built-in known-client protocols, in client order #1..#8.
pub fn builtin_known_protocols() -> Vec<Protocol> {
    vec![
        protocol!(1024, 512, 0.66, 0.72, 250.0, 250.0, 1.0e5),
        protocol!(128, 768, 0.78, 0.58, 350.0, 300.0, 1.0e6),
        protocol!(512, 768, 1.00, 1.20, 500.0, 400.0, 5.0e4),
        protocol!(384, 600, 1.40, 1.50, 350.0, 300.0, 1.25e5),
        protocol!(712, 720, 0.60, 0.82, 300.0, 350.0, 1.3e5),
        protocol!(200, 730, 0.88, 0.78, 350.0, 280.0, 0.9e6),
        protocol!(560, 755, 1.20, 1.30, 300.0, 400.0, 4.5e4),
        protocol!(368, 500, 1.00, 1.30, 350.0, 350.0, 1.45e5),
    ]
}

/// The four built-in unseen-client protocols, in order #1..#4.
pub fn builtin_unseen_protocols() -> Vec<Protocol> {
    vec![
        protocol!(768, 550, 0.57, 0.83, 200.0, 300.0, 1.3e5),
        protocol!(428, 590, 1.10, 1.10, 350.0, 300.0, 1.4e5),
        protocol!(100, 768, 0.50, 0.60, 200.0, 250.0, 1.1e6),
        protocol!(896, 730, 0.70, 0.93, 250.0, 400.0, 0.9e5),
    ]
}
