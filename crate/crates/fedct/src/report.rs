//! Pluggable providers of the per-sample anatomy report feature.
//!
//! The training loop only sees the [`ReportFeatureProvider`] trait. The stub
//! provider derives a deterministic feature from anatomy metadata and image
//! statistics; the remote provider fetches features from an external service
//! over a small binary-over-HTTP contract, with a bundled mock server as the
//! test double. There is deliberately no fallback between providers.

use crate::ctphys::{pfs_matrix_bytes, ImageGrid};
use crate::phantom::AnatomyMetadata;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;
use thiserror::Error;

/// Prompt sent to the report-generation service.
pub const DEFAULT_PROMPT: &str = "Please provide a radiology report of the CT slice.";

pub const WIRE_MAGIC: [u8; 4] = *b"PFR1";

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("request {request_id} to {endpoint} timed out")]
    Timeout { endpoint: String, request_id: u64 },
    #[error("request {request_id} to {endpoint} failed: {detail}")]
    Transport {
        endpoint: String,
        request_id: u64,
        detail: String,
    },
    #[error("request {request_id} to {endpoint}: expected {expected} values, got {got}")]
    DimensionMismatch {
        endpoint: String,
        request_id: u64,
        expected: usize,
        got: usize,
    },
    #[error("request {request_id} to {endpoint}: malformed response: {detail}")]
    MalformedResponse {
        endpoint: String,
        request_id: u64,
        detail: String,
    },
    #[error("port {0} already in use")]
    PortInUse(u16),
    #[error("invalid provider config: {0}")]
    InvalidConfig(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// A unit-norm feature vector standing in for a report-text embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportFeature {
    pub values: Vec<f64>,
    pub provider_tag: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    Stub,
    Remote,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct ProviderConfig {
    pub kind: ProviderKind,
    /// Feature dimension d; must be divisible by 4 and at least 8.
    pub d: usize,
    pub stub_seed: u64,
    pub endpoint: Option<String>,
    pub timeout_ms: u64,
    pub prompt: String,
    /// Cap on concurrent remote requests.
    pub max_in_flight: usize,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        ProviderConfig {
            kind: ProviderKind::Stub,
            d: 64,
            stub_seed: 40,
            endpoint: None,
            timeout_ms: 2000,
            prompt: DEFAULT_PROMPT.to_string(),
            max_in_flight: 4,
        }
    }
}

impl ProviderConfig {
    pub fn validate(&self) -> Result<(), ReportError> {
        if self.d < 8 || self.d % 4 != 0 {
            return Err(ReportError::InvalidConfig(format!(
                "feature dimension must be >= 8 and divisible by 4, got {}",
                self.d
            )));
        }
        if self.kind == ProviderKind::Remote {
            if self.endpoint.is_none() {
                return Err(ReportError::InvalidConfig(
                    "remote provider requires an endpoint".into(),
                ));
            }
            if self.timeout_ms == 0 {
                return Err(ReportError::InvalidConfig("timeout must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn build(&self) -> Result<Box<dyn ReportFeatureProvider>, ReportError> {
        self.validate()?;
        Ok(match self.kind {
            ProviderKind::Stub => Box::new(StubProvider::new(self.d, self.stub_seed)),
            ProviderKind::Remote => Box::new(RemoteProvider::new(self.clone())?),
        })
    }
}

pub trait ReportFeatureProvider: Send + Sync {
    fn feature(
        &self,
        image: &ImageGrid,
        meta: &AnatomyMetadata,
    ) -> Result<ReportFeature, ReportError>;

    fn tag(&self) -> &str;
}

/// Scale to unit norm. Idempotent: vectors already unit-norm up to
/// accumulated rounding pass through bit-unchanged, so re-normalizing a
/// provider's output never perturbs it.
fn unit_normalize(mut v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 && (norm - 1.0).abs() > 1e-12 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let idx = ((sorted.len() - 1) as f64 * q).round() as usize;
    sorted[idx]
}

/// Deterministic surrogate: a seeded random projection of the anatomy
/// descriptor concatenated with four image statistics, unit-normalized.
pub struct StubProvider {
    d: usize,
    /// (d - 4) x 8 projection of the metadata descriptor.
    projection: Vec<f64>,
}

impl StubProvider {
    pub fn new(d: usize, seed: u64) -> StubProvider {
        assert!(d >= 8 && d % 4 == 0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let projection = (0..(d - 4) * 8)
            .map(|_| rng.random::<f64>() * 2.0 - 1.0)
            .collect();
        StubProvider { d, projection }
    }
}

impl ReportFeatureProvider for StubProvider {
    fn feature(
        &self,
        image: &ImageGrid,
        meta: &AnatomyMetadata,
    ) -> Result<ReportFeature, ReportError> {
        let desc = meta.descriptor();
        let rows = self.d - 4;
        let mut values = Vec::with_capacity(self.d);
        for r in 0..rows {
            let row = &self.projection[r * 8..(r + 1) * 8];
            values.push(row.iter().zip(&desc).map(|(w, x)| w * x).sum());
        }
        let data = image.data();
        let n = data.len() as f64;
        let mean = data.iter().sum::<f64>() / n;
        let std = (data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
        let mut sorted = data.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        values.push(mean);
        values.push(std);
        values.push(percentile(&sorted, 0.10));
        values.push(percentile(&sorted, 0.90));
        Ok(ReportFeature {
            values: unit_normalize(values),
            provider_tag: "stub".into(),
        })
    }

    fn tag(&self) -> &str {
        "stub"
    }
}

/// Encode one feature request: magic, dimension, length-prefixed prompt,
/// image in raw-binary matrix format.
pub fn encode_request(d: usize, prompt: &str, image: &ImageGrid) -> Vec<u8> {
    let img_bytes = pfs_matrix_bytes(image.size(), image.size(), image.data());
    let mut body = Vec::with_capacity(16 + prompt.len() + img_bytes.len());
    body.extend_from_slice(&WIRE_MAGIC);
    body.extend_from_slice(&(d as u32).to_le_bytes());
    body.extend_from_slice(&(prompt.len() as u32).to_le_bytes());
    body.extend_from_slice(prompt.as_bytes());
    body.extend_from_slice(&img_bytes);
    body
}

/// HTTP client for an external report-feature service.
pub struct RemoteProvider {
    cfg: ProviderConfig,
    endpoint: String,
    agent: ureq::Agent,
    request_counter: AtomicU64,
    in_flight: Arc<(Mutex<usize>, Condvar)>,
}

impl RemoteProvider {
    pub fn new(cfg: ProviderConfig) -> Result<RemoteProvider, ReportError> {
        cfg.validate()?;
        let endpoint = cfg.endpoint.clone().expect("validated");
        let agent_cfg = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(cfg.timeout_ms)))
            .build();
        Ok(RemoteProvider {
            endpoint,
            agent: agent_cfg.into(),
            request_counter: AtomicU64::new(0),
            in_flight: Arc::new((Mutex::new(0), Condvar::new())),
            cfg,
        })
    }

    fn acquire_slot(&self) -> SlotGuard<'_> {
        let (lock, cvar) = &*self.in_flight;
        let mut count = lock.lock().unwrap();
        while *count >= self.cfg.max_in_flight {
            count = cvar.wait(count).unwrap();
        }
        *count += 1;
        SlotGuard { sem: &self.in_flight }
    }
}

struct SlotGuard<'a> {
    sem: &'a (Mutex<usize>, Condvar),
}

impl Drop for SlotGuard<'_> {
    fn drop(&mut self) {
        let (lock, cvar) = self.sem;
        *lock.lock().unwrap() -= 1;
        cvar.notify_one();
    }
}

impl ReportFeatureProvider for RemoteProvider {
    fn feature(
        &self,
        image: &ImageGrid,
        _meta: &AnatomyMetadata,
    ) -> Result<ReportFeature, ReportError> {
        let request_id = self.request_counter.fetch_add(1, Ordering::Relaxed);
        let _slot = self.acquire_slot();
        let url = format!("{}/feature", self.endpoint.trim_end_matches('/'));
        let body = encode_request(self.cfg.d, &self.cfg.prompt, image);

        let ep = || self.endpoint.clone();
        let mut response = self
            .agent
            .post(&url)
            .content_type("application/octet-stream")
            .send(&body[..])
            .map_err(|e| match e {
                ureq::Error::Timeout(_) => ReportError::Timeout {
                    endpoint: ep(),
                    request_id,
                },
                ureq::Error::StatusCode(code) => ReportError::Transport {
                    endpoint: ep(),
                    request_id,
                    detail: format!("http status {code}"),
                },
                other => ReportError::Transport {
                    endpoint: ep(),
                    request_id,
                    detail: other.to_string(),
                },
            })?;
        let bytes = response.body_mut().read_to_vec().map_err(|e| match e {
            ureq::Error::Timeout(_) => ReportError::Timeout {
                endpoint: ep(),
                request_id,
            },
            other => ReportError::Transport {
                endpoint: ep(),
                request_id,
                detail: other.to_string(),
            },
        })?;

        if bytes.len() < 4 {
            return Err(ReportError::MalformedResponse {
                endpoint: ep(),
                request_id,
                detail: format!("response too short: {} bytes", bytes.len()),
            });
        }
        let got_d = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
        if bytes.len() != 4 + got_d * 8 {
            return Err(ReportError::MalformedResponse {
                endpoint: ep(),
                request_id,
                detail: format!(
                    "declared {got_d} values but carried {} payload bytes",
                    bytes.len() - 4
                ),
            });
        }
        if got_d != self.cfg.d {
            return Err(ReportError::DimensionMismatch {
                endpoint: ep(),
                request_id,
                expected: self.cfg.d,
                got: got_d,
            });
        }
        let values: Vec<f64> = bytes[4..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(ReportError::MalformedResponse {
                endpoint: ep(),
                request_id,
                detail: "non-finite feature values".into(),
            });
        }
        Ok(ReportFeature {
            values: unit_normalize(values),
            provider_tag: "remote".into(),
        })
    }

    fn tag(&self) -> &str {
        "remote"
    }
}

/// Canned behaviors for the bundled test server.
#[derive(Clone)]
pub enum MockBehavior {
    /// Reply with a fixed vector.
    Echo(Vec<f64>),
    /// Sleep, then reply with a fixed vector.
    Delay { ms: u64, reply: Vec<f64> },
    /// Declare one fewer value than requested.
    Malform,
    /// Reply per image payload (keyed by the raw image bytes); unknown
    /// images get a 404.
    Lookup(Arc<HashMap<Vec<u8>, Vec<f64>>>),
}

/// Minimal single-purpose HTTP server implementing the feature wire
/// contract; accepts concurrent connections, shuts down when dropped.
#[derive(Debug)]
pub struct MockServer {
    port: u16,
    shutdown: Arc<AtomicBool>,
    accept_thread: Option<std::thread::JoinHandle<()>>,
}

impl MockServer {
    /// Bind 127.0.0.1:port (0 picks an ephemeral port) and serve `behavior`.
    pub fn start(port: u16, behavior: MockBehavior) -> Result<MockServer, ReportError> {
        let listener = TcpListener::bind(("127.0.0.1", port)).map_err(|e| {
            if e.kind() == std::io::ErrorKind::AddrInUse {
                ReportError::PortInUse(port)
            } else {
                ReportError::Io(e)
            }
        })?;
        let actual_port = listener.local_addr()?.port();
        let shutdown = Arc::new(AtomicBool::new(false));
        let shutdown2 = shutdown.clone();
        let accept_thread = std::thread::spawn(move || {
            let mut workers = Vec::new();
            for stream in listener.incoming() {
                if shutdown2.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(stream) = stream else { continue };
                let behavior = behavior.clone();
                workers.push(std::thread::spawn(move || {
                    let _ = handle_connection(stream, behavior);
                }));
            }
            for w in workers {
                let _ = w.join();
            }
        });
        Ok(MockServer {
            port: actual_port,
            shutdown,
            accept_thread: Some(accept_thread),
        })
    }

    pub fn port(&self) -> u16 {
        self.port
    }

    pub fn url(&self) -> String {
        format!("http://127.0.0.1:{}", self.port)
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        self.shutdown.store(true, Ordering::SeqCst);
        // Unblock the accept loop.
        let _ = TcpStream::connect(("127.0.0.1", self.port));
        if let Some(t) = self.accept_thread.take() {
            let _ = t.join();
        }
    }
}

struct ParsedRequest {
    path: String,
    #[allow(dead_code)]
    declared_d: usize,
    image_payload: Vec<u8>,
}

fn parse_http_request(stream: &mut TcpStream) -> std::io::Result<ParsedRequest> {
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut request_line = String::new();
    reader.read_line(&mut request_line)?;
    let path = request_line
        .split_whitespace()
        .nth(1)
        .unwrap_or("/")
        .to_string();
    let mut content_length = 0usize;
    loop {
        let mut line = String::new();
        reader.read_line(&mut line)?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            break;
        }
        if let Some(v) = trimmed.to_ascii_lowercase().strip_prefix("content-length:") {
            content_length = v.trim().parse().unwrap_or(0);
        }
    }
    let mut body = vec![0u8; content_length];
    reader.read_exact(&mut body)?;

    let (declared_d, image_payload) = if body.len() >= 12 && body[0..4] == WIRE_MAGIC {
        let d = u32::from_le_bytes(body[4..8].try_into().unwrap()) as usize;
        let prompt_len = u32::from_le_bytes(body[8..12].try_into().unwrap()) as usize;
        let image_start = 12 + prompt_len;
        let image = body.get(image_start..).unwrap_or(&[]).to_vec();
        (d, image)
    } else {
        (0, Vec::new())
    };
    Ok(ParsedRequest {
        path,
        declared_d,
        image_payload,
    })
}

fn reply(stream: &mut TcpStream, status: &str, payload: &[u8]) -> std::io::Result<()> {
    write!(
        stream,
        "HTTP/1.1 {status}\r\ncontent-length: {}\r\nconnection: close\r\n\r\n",
        payload.len()
    )?;
    stream.write_all(payload)?;
    stream.flush()
}

fn encode_reply(values: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + values.len() * 8);
    out.extend_from_slice(&(values.len() as u32).to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn handle_connection(mut stream: TcpStream, behavior: MockBehavior) -> std::io::Result<()> {
    let req = parse_http_request(&mut stream)?;
    if req.path != "/feature" {
        return reply(&mut stream, "404 Not Found", b"unknown path");
    }
    match behavior {
        MockBehavior::Echo(values) => reply(&mut stream, "200 OK", &encode_reply(&values)),
        MockBehavior::Delay { ms, reply: values } => {
            std::thread::sleep(Duration::from_millis(ms));
            reply(&mut stream, "200 OK", &encode_reply(&values))
        }
        MockBehavior::Malform => {
            // Declares one more value than it carries.
            let payload = encode_reply(&[0.5; 7]);
            let mut corrupted = Vec::from(&(8u32).to_le_bytes()[..]);
            corrupted.extend_from_slice(&payload[4..]);
            reply(&mut stream, "200 OK", &corrupted)
        }
        MockBehavior::Lookup(map) => match map.get(&req.image_payload) {
            Some(values) => reply(&mut stream, "200 OK", &encode_reply(values)),
            None => reply(&mut stream, "404 Not Found", b"unknown image"),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_slice, rasterize, BodyPart, TissueClass};
    use std::time::Instant;

    fn sample() -> (ImageGrid, AnatomyMetadata) {
        let ph = generate_slice(42, BodyPart::Abdomen, 0);
        let (img, meta) = rasterize(&ph, 32, 1.0);
        (img.normalized(crate::phantom::ATTENUATION_CEILING), meta)
    }

    #[test]
    fn stub_is_deterministic_and_unit_norm() {
        let (img, meta) = sample();
        let p = StubProvider::new(64, 7);
        let a = p.feature(&img, &meta).unwrap();
        let b = p.feature(&img, &meta).unwrap();
        assert_eq!(a, b);
        let norm: f64 = a.values.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
        assert_eq!(a.values.len(), 64);
    }

    #[test]
    fn stub_sensitivity_to_metadata() {
        let (img, meta) = sample();
        let p = StubProvider::new(64, 7);
        let base = p.feature(&img, &meta).unwrap();

        let mut other = meta.clone();
        other.body_part = BodyPart::Pelvis;
        let f2 = p.feature(&img, &other).unwrap();
        let cos: f64 = base.values.iter().zip(&f2.values).map(|(a, b)| a * b).sum();
        assert!(cos < 1.0 - 1e-9, "body-part change must move the feature");

        let mut shifted = meta.clone();
        let soft = shifted.fraction(TissueClass::Soft);
        shifted
            .tissue_fractions
            .insert(TissueClass::Soft, soft + 0.1);
        let f3 = p.feature(&img, &shifted).unwrap();
        let cos3: f64 = base.values.iter().zip(&f3.values).map(|(a, b)| a * b).sum();
        assert!(cos3 < 1.0 - 1e-6);

        // Zero perturbation changes nothing.
        let same = p.feature(&img, &meta.clone()).unwrap();
        assert_eq!(base, same);
    }

    fn remote_cfg(url: &str, timeout_ms: u64, d: usize) -> ProviderConfig {
        ProviderConfig {
            kind: ProviderKind::Remote,
            d,
            endpoint: Some(url.to_string()),
            timeout_ms,
            ..Default::default()
        }
    }

    #[test]
    fn remote_echo_round_trip() {
        let fixed: Vec<f64> = (0..8).map(|i| i as f64 + 1.0).collect();
        let server = MockServer::start(0, MockBehavior::Echo(fixed.clone())).unwrap();
        let provider = RemoteProvider::new(remote_cfg(&server.url(), 2000, 8)).unwrap();
        let (img, meta) = sample();
        let start = Instant::now();
        let f = provider.feature(&img, &meta).unwrap();
        assert!(start.elapsed() < Duration::from_secs(1));
        assert_eq!(f.values, unit_normalize(fixed));
    }

    #[test]
    fn remote_dimension_mismatch_detected() {
        // Echo 12 values against a provider expecting 8.
        let server = MockServer::start(0, MockBehavior::Echo(vec![0.25; 12])).unwrap();
        let provider = RemoteProvider::new(remote_cfg(&server.url(), 2000, 8)).unwrap();
        let (img, meta) = sample();
        let err = provider.feature(&img, &meta).unwrap_err();
        assert!(matches!(
            err,
            ReportError::DimensionMismatch {
                expected: 8,
                got: 12,
                ..
            }
        ));
    }

    #[test]
    fn remote_malformed_response_detected() {
        let server = MockServer::start(0, MockBehavior::Malform).unwrap();
        let provider = RemoteProvider::new(remote_cfg(&server.url(), 2000, 8)).unwrap();
        let (img, meta) = sample();
        let err = provider.feature(&img, &meta).unwrap_err();
        assert!(matches!(err, ReportError::MalformedResponse { .. }), "{err}");
    }

    #[test]
    fn remote_timeout_honored() {
        let server = MockServer::start(
            0,
            MockBehavior::Delay {
                ms: 1500,
                reply: vec![0.5; 8],
            },
        )
        .unwrap();
        let provider = RemoteProvider::new(remote_cfg(&server.url(), 300, 8)).unwrap();
        let (img, meta) = sample();
        let start = Instant::now();
        let err = provider.feature(&img, &meta).unwrap_err();
        let elapsed = start.elapsed();
        assert!(matches!(err, ReportError::Timeout { .. }), "{err}");
        assert!(
            elapsed < Duration::from_millis(300 + 100),
            "timeout fired after {elapsed:?}"
        );
    }

    #[test]
    fn mock_serves_concurrent_requests() {
        let server = MockServer::start(0, MockBehavior::Echo(vec![1.0; 8])).unwrap();
        let url = server.url();
        let mut handles = Vec::new();
        for _ in 0..4 {
            let url = url.clone();
            handles.push(std::thread::spawn(move || {
                let provider = RemoteProvider::new(remote_cfg(&url, 3000, 8)).unwrap();
                let (img, meta) = sample();
                provider.feature(&img, &meta).unwrap()
            }));
        }
        for h in handles {
            let f = h.join().unwrap();
            assert_eq!(f.values.len(), 8);
        }
    }

    #[test]
    fn mock_port_freed_after_drop() {
        let server = MockServer::start(0, MockBehavior::Echo(vec![1.0; 8])).unwrap();
        let port = server.port();
        drop(server);
        // Rebinding the same port must succeed once the handle is gone.
        let again = MockServer::start(port, MockBehavior::Echo(vec![2.0; 8])).unwrap();
        assert_eq!(again.port(), port);
    }

    #[test]
    fn port_in_use_reported() {
        let server = MockServer::start(0, MockBehavior::Echo(vec![1.0; 8])).unwrap();
        let err = MockServer::start(server.port(), MockBehavior::Malform).unwrap_err();
        assert!(matches!(err, ReportError::PortInUse(_)));
    }

    #[test]
    fn lookup_behavior_keys_on_image_bytes() {
        let (img, meta) = sample();
        let key = pfs_matrix_bytes(img.size(), img.size(), img.data());
        let mut map = HashMap::new();
        map.insert(key, vec![3.0; 8]);
        let server = MockServer::start(0, MockBehavior::Lookup(Arc::new(map))).unwrap();
        let provider = RemoteProvider::new(remote_cfg(&server.url(), 2000, 8)).unwrap();
        let f = provider.feature(&img, &meta).unwrap();
        assert_eq!(f.values, unit_normalize(vec![3.0; 8]));

        // A different image is not in the table.
        let ph = generate_slice(43, BodyPart::Chest, 1);
        let (other, ometa) = rasterize(&ph, 32, 1.0);
        let err = provider.feature(&other, &ometa).unwrap_err();
        assert!(matches!(err, ReportError::Transport { .. }));
    }
}
