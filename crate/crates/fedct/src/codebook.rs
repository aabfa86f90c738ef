//! Protocol codebook: stored per-client scanning personalizations and
//! cosine-distance vector quantization for unseen protocols.
//!
//! An unseen protocol is never allowed to drive the modulation heads
//! directly. Only its code is computed; the code is quantized onto the
//! nearest stored client code, and that client's stored modulation vectors
//! and decoder carry the reconstruction.

use crate::ctphys::ImageGrid;
use crate::model::{
    forward_eval_with_modulation, scanning_code_only, scanning_outputs, AblationFlags,
    ModelError, ModelParameters,
};
use crate::protocol::{normalize_protocol, MinMaxStats, Protocol};
use std::io::{BufRead, Write};
use thiserror::Error;

/// Norm guard below which a code counts as degenerate.
const NORM_GUARD: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum CodebookError {
    #[error("client {0} produced a zero-norm protocol code; the scanning hypernetwork is degenerate")]
    ZeroNormCode(u32),
    #[error("query code has zero norm")]
    ZeroNormQuery,
    #[error("codebook is empty")]
    Empty,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("malformed codebook dump: {0}")]
    Malformed(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// One trained client's stored personalization.
#[derive(Debug, Clone, PartialEq)]
pub struct CodebookEntry {
    pub client_id: u32,
    pub code: Vec<f64>,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

/// Codebook over the trained known clients plus the normalization statistics
/// in effect at training time.
#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolCodebook {
    pub entries: Vec<CodebookEntry>,
    pub stats: MinMaxStats,
}

/// Evaluate the final scanning hypernetwork on every known client protocol
/// and store (code, alpha, beta) per client. Entries are sorted by client id.
pub fn build_codebook(
    params: &ModelParameters,
    known: &[(u32, Protocol)],
    stats: &MinMaxStats,
) -> Result<ProtocolCodebook, CodebookError> {
    if known.is_empty() {
        return Err(CodebookError::Empty);
    }
    let mut entries = Vec::with_capacity(known.len());
    for &(client_id, protocol) in known {
        let g = normalize_protocol(&protocol, stats);
        let (alpha, beta, code) = scanning_outputs(params, &g)?;
        let norm_sq: f64 = code.iter().map(|v| v * v).sum();
        if norm_sq.sqrt() < NORM_GUARD {
            return Err(CodebookError::ZeroNormCode(client_id));
        }
        entries.push(CodebookEntry {
            client_id,
            code,
            alpha,
            beta,
        });
    }
    entries.sort_by_key(|e| e.client_id);
    Ok(ProtocolCodebook {
        entries,
        stats: stats.clone(),
    })
}

/// Cosine of two vectors with a single square root over the norm product, so
/// self-similarity is exactly 1.
fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|v| v * v).sum();
    let nb: f64 = b.iter().map(|v| v * v).sum();
    dot / (na * nb).sqrt()
}

/// Nearest codebook entry by cosine distance 1 - cos(c_un, c_i).
/// Returns (entry index, distance); ties break toward the lowest client id.
pub fn quantize(book: &ProtocolCodebook, c_un: &[f64]) -> Result<(usize, f64), CodebookError> {
    if book.entries.is_empty() {
        return Err(CodebookError::Empty);
    }
    let norm_sq: f64 = c_un.iter().map(|v| v * v).sum();
    if norm_sq.sqrt() < NORM_GUARD {
        return Err(CodebookError::ZeroNormQuery);
    }
    let mut best = (0usize, f64::INFINITY);
    for (i, entry) in book.entries.iter().enumerate() {
        let dist = 1.0 - cosine(c_un, &entry.code);
        // Strict improvement keeps the earliest (lowest client id) on ties.
        if dist < best.1 {
            best = (i, dist);
        }
    }
    Ok(best)
}

/// Result of routing one unseen-protocol sample.
pub struct UnseenInference {
    pub prediction: ImageGrid,
    pub matched_index: usize,
    pub matched_client: u32,
    pub distance: f64,
    pub query_code: Vec<f64>,
}

/// Reconstruct an unseen-protocol image: normalize the protocol with the
/// training statistics (unclipped), take only the code head of the scanning
/// hypernetwork, quantize it onto the codebook, and run the matched client's
/// stored modulation and decoder. The anatomy path runs normally.
pub fn infer_unseen(
    params: &ModelParameters,
    book: &ProtocolCodebook,
    x: &ImageGrid,
    g_un: &Protocol,
    ft: &[f64],
    flags: AblationFlags,
) -> Result<UnseenInference, CodebookError> {
    let g_norm = normalize_protocol(g_un, &book.stats);
    let query_code = scanning_code_only(params, &g_norm)?;
    let (matched_index, distance) = quantize(book, &query_code)?;
    let entry = &book.entries[matched_index];
    let prediction = forward_eval_with_modulation(
        params,
        x,
        ft,
        &entry.alpha,
        &entry.beta,
        entry.client_id,
        flags,
    )?;
    Ok(UnseenInference {
        prediction,
        matched_index,
        matched_client: entry.client_id,
        distance,
        query_code,
    })
}

/// Human-readable dump: one line per entry (client id then code components
/// at 17 significant digits), then the pairwise cosine matrix as comments.
pub fn write_codebook_dump<W: Write>(mut w: W, book: &ProtocolCodebook) -> Result<(), CodebookError> {
    writeln!(w, "# protocol codebook: client_id code[0..{}]",
        book.entries.first().map(|e| e.code.len()).unwrap_or(0))?;
    for e in &book.entries {
        write!(w, "{}", e.client_id)?;
        for v in &e.code {
            write!(w, " {v:.16e}")?;
        }
        writeln!(w)?;
    }
    writeln!(w, "# pairwise cosine similarity")?;
    for a in &book.entries {
        write!(w, "# {}", a.client_id)?;
        for b in &book.entries {
            write!(w, " {:+.6}", cosine(&a.code, &b.code))?;
        }
        writeln!(w)?;
    }
    Ok(())
}

/// Parse the entry lines of a codebook dump (comments are skipped).
pub fn read_codebook_dump<R: BufRead>(r: R) -> Result<Vec<(u32, Vec<f64>)>, CodebookError> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let mut parts = trimmed.split_whitespace();
        let id: u32 = parts
            .next()
            .unwrap()
            .parse()
            .map_err(|_| CodebookError::Malformed(format!("bad client id in: {line}")))?;
        let code: Result<Vec<f64>, _> = parts.map(|p| p.parse::<f64>()).collect();
        let code = code.map_err(|_| CodebookError::Malformed(format!("bad code in: {line}")))?;
        out.push((id, code));
    }
    Ok(out)
}

/// Largest pairwise |cos| among stored codes.
pub fn max_pairwise_cosine(book: &ProtocolCodebook) -> f64 {
    let mut max_cos = 0.0f64;
    for i in 0..book.entries.len() {
        for j in i + 1..book.entries.len() {
            max_cos = max_cos.max(cosine(&book.entries[i].code, &book.entries[j].code).abs());
        }
    }
    max_cos
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward_eval, modulation_head_eval_count, ModelConfig};
    use crate::protocol::{builtin_known_protocols, builtin_unseen_protocols, protocol_stats};

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            channels: 4,
            report_dim: 16,
            hidden_dim: 8,
            code_dim: 4,
            n_heads: 2,
            token_count: 4,
            image_size: 16,
        }
    }

    fn known_subset() -> Vec<(u32, Protocol)> {
        let all = builtin_known_protocols();
        [1u32, 3, 5, 6]
            .iter()
            .map(|&id| (id, all[(id - 1) as usize]))
            .collect()
    }

    fn test_book() -> (ModelParameters, ProtocolCodebook) {
        let known = known_subset();
        let protocols: Vec<Protocol> = known.iter().map(|&(_, p)| p).collect();
        let stats = protocol_stats(&protocols).unwrap();
        let params =
            ModelParameters::init_unstructured(&tiny_cfg(), 77, &known.iter().map(|&(id, _)| id).collect::<Vec<_>>())
                .unwrap();
        let book = build_codebook(&params, &known, &stats).unwrap();
        (params, book)
    }

    #[test]
    fn build_stores_exact_hypernet_outputs() {
        let (params, book) = test_book();
        assert_eq!(book.entries.len(), 4);
        for entry in &book.entries {
            let known = known_subset();
            let p = known
                .iter()
                .find(|(id, _)| *id == entry.client_id)
                .unwrap()
                .1;
            let g = normalize_protocol(&p, &book.stats);
            let code = scanning_code_only(&params, &g).unwrap();
            assert_eq!(entry.code, code, "stored code must match the hypernetwork");
        }
    }

    #[test]
    fn self_quantization_is_exact() {
        let (_params, book) = test_book();
        for (i, entry) in book.entries.iter().enumerate() {
            let (idx, dist) = quantize(&book, &entry.code).unwrap();
            assert_eq!(idx, i);
            assert_eq!(dist, 0.0, "self-distance must be exactly zero");
        }
    }

    #[test]
    fn hand_computed_quantization() {
        let stats = protocol_stats(&builtin_known_protocols()).unwrap();
        let book = ProtocolCodebook {
            entries: vec![
                CodebookEntry {
                    client_id: 1,
                    code: vec![1.0, 0.0],
                    alpha: vec![],
                    beta: vec![],
                },
                CodebookEntry {
                    client_id: 2,
                    code: vec![0.0, 1.0],
                    alpha: vec![],
                    beta: vec![],
                },
            ],
            stats,
        };
        let (idx, dist) = quantize(&book, &[0.9, 0.1]).unwrap();
        assert_eq!(book.entries[idx].client_id, 1);
        let expect = 1.0 - 0.9 / (0.81f64 + 0.01).sqrt();
        assert!((dist - expect).abs() < 1e-15);

        // Scale invariance with an exact norm.
        let (idx2, dist2) = quantize(&book, &[0.0, 5.0]).unwrap();
        assert_eq!(book.entries[idx2].client_id, 2);
        assert_eq!(dist2, 0.0);
    }

    #[test]
    fn quantization_scale_invariant_argmin() {
        let (_params, book) = test_book();
        let query = vec![0.4, -0.2, 0.7, 0.1];
        let (base_idx, _) = quantize(&book, &query).unwrap();
        for lambda in [1e-6, 0.01, 0.5, 3.0, 1e4, 1e8] {
            let scaled: Vec<f64> = query.iter().map(|v| lambda * v).collect();
            let (idx, _) = quantize(&book, &scaled).unwrap();
            assert_eq!(idx, base_idx, "lambda = {lambda}");
        }
    }

    #[test]
    fn zero_norm_query_rejected() {
        let (_params, book) = test_book();
        assert!(matches!(
            quantize(&book, &[0.0, 0.0, 0.0, 0.0]),
            Err(CodebookError::ZeroNormQuery)
        ));
    }

    #[test]
    fn tie_breaks_to_lowest_client_id() {
        let stats = protocol_stats(&builtin_known_protocols()).unwrap();
        let book = ProtocolCodebook {
            entries: vec![
                CodebookEntry {
                    client_id: 2,
                    code: vec![1.0, 0.0],
                    alpha: vec![],
                    beta: vec![],
                },
                CodebookEntry {
                    client_id: 5,
                    code: vec![1.0, 0.0],
                    alpha: vec![],
                    beta: vec![],
                },
            ],
            stats,
        };
        let (idx, _) = quantize(&book, &[2.0, 0.0]).unwrap();
        assert_eq!(book.entries[idx].client_id, 2);
    }

    #[test]
    fn unseen_equal_to_known_reproduces_inference_bit_exactly() {
        let (params, book) = test_book();
        let known = known_subset();
        let (id3, p3) = known[1]; // client #3
        assert_eq!(id3, 3);

        let x = ImageGrid::new(
            16,
            p3.pl,
            (0..256).map(|i| (i % 13) as f64 / 13.0).collect(),
        );
        let mut ft: Vec<f64> = (0..16).map(|i| ((i * 7 + 3) % 11) as f64 / 11.0 - 0.4).collect();
        let n = ft.iter().map(|v| v * v).sum::<f64>().sqrt();
        ft.iter_mut().for_each(|v| *v /= n);

        let before = modulation_head_eval_count();
        let out = infer_unseen(&params, &book, &x, &p3, &ft, AblationFlags::default()).unwrap();
        let after = modulation_head_eval_count();
        assert_eq!(
            before, after,
            "the modulation heads must not run for an unseen protocol"
        );
        assert_eq!(out.matched_client, 3);
        assert_eq!(out.distance, 0.0);

        let g3 = normalize_protocol(&p3, &book.stats);
        let own = forward_eval(&params, &x, &g3, &ft, 3, AblationFlags::default()).unwrap();
        assert_eq!(out.prediction.data(), own.data(), "bit-identical inference");
    }

    #[test]
    fn all_builtin_unseen_protocols_route() {
        let (params, book) = test_book();
        let x = ImageGrid::new(16, 0.5, vec![0.3; 256]);
        let ft = {
            let mut v = vec![0.25; 16];
            let n = v.iter().map(|x: &f64| x * x).sum::<f64>().sqrt();
            v.iter_mut().for_each(|x| *x /= n);
            v
        };
        for p in builtin_unseen_protocols() {
            let out = infer_unseen(&params, &book, &x, &p, &ft, AblationFlags::default()).unwrap();
            assert!(out.distance >= 0.0 && out.distance <= 2.0);
            assert!([1, 3, 5, 6].contains(&out.matched_client));
        }
    }

    #[test]
    fn dump_round_trips_codes_exactly() {
        let (_params, book) = test_book();
        let mut buf = Vec::new();
        write_codebook_dump(&mut buf, &book).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.contains("# pairwise cosine similarity"));
        let parsed = read_codebook_dump(&buf[..]).unwrap();
        assert_eq!(parsed.len(), book.entries.len());
        for ((id, code), entry) in parsed.iter().zip(&book.entries) {
            assert_eq!(*id, entry.client_id);
            assert_eq!(code, &entry.code, "17-significant-digit round trip");
        }
    }

    #[test]
    fn zero_norm_code_detected_at_build() {
        let known = known_subset();
        let protocols: Vec<Protocol> = known.iter().map(|&(_, p)| p).collect();
        let stats = protocol_stats(&protocols).unwrap();
        let ids: Vec<u32> = known.iter().map(|&(id, _)| id).collect();
        let mut params = ModelParameters::init_unstructured(&tiny_cfg(), 77, &ids).unwrap();
        // Zero the code head: every code collapses to the zero vector.
        params.hs.code.w = crate::autodiff::Tensor::zeros(vec![8, 4]);
        params.hs.code.b = crate::autodiff::Tensor::zeros(vec![4]);
        let err = build_codebook(&params, &known, &stats).unwrap_err();
        assert!(matches!(err, CodebookError::ZeroNormCode(1)));
    }
}
