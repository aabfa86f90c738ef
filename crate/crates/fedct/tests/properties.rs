//! Property tests for the value-level invariants.

use fedct::codebook::{quantize, CodebookEntry, ProtocolCodebook};
use fedct::objective::orth_loss;
use fedct::protocol::{
    builtin_known_protocols, normalize_protocol, protocol_stats, Protocol, PROTOCOL_DIM,
};
use proptest::prelude::*;

fn arb_protocol() -> impl Strategy<Value = Protocol> {
    (
        1u32..2000,
        1u32..2000,
        0.05f64..5.0,
        0.05f64..5.0,
        50.0f64..1000.0,
        50.0f64..1000.0,
        1e3f64..1e7,
    )
        .prop_map(|(nv, ndb, pl, dbl, dsr, ddr, pn)| {
            Protocol::new(nv, ndb, pl, dbl, dsr, ddr, pn).unwrap()
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Normalization is monotone per column and exactly affine, so
    /// denormalizing recovers the raw vector up to rounding.
    #[test]
    fn normalization_monotone_and_invertible(p in arb_protocol(), bump in 1e-3f64..10.0) {
        let stats = protocol_stats(&builtin_known_protocols()).unwrap();
        let g = normalize_protocol(&p, &stats);

        // Monotone: increasing any single column increases its entry.
        let bigger = Protocol::new(
            p.nv + 1,
            p.ndb,
            p.pl + bump,
            p.dbl,
            p.dsr,
            p.ddr,
            p.pn,
        ).unwrap();
        let gb = normalize_protocol(&bigger, &stats);
        prop_assert!(gb.values[0] > g.values[0]);
        prop_assert!(gb.values[2] > g.values[2]);

        // Round trip through the affine map.
        let raw = stats.denormalize(&g.values);
        let orig = p.to_vector();
        for j in 0..PROTOCOL_DIM {
            let scale = orig[j].abs().max(1.0);
            prop_assert!((raw[j] - orig[j]).abs() <= 1e-9 * scale);
        }
    }

    /// Reference-set protocols normalize into [0, 1] exactly.
    #[test]
    fn known_protocols_normalize_into_unit_box(idx in 0usize..8) {
        let known = builtin_known_protocols();
        let stats = protocol_stats(&known).unwrap();
        let g = normalize_protocol(&known[idx], &stats);
        for v in g.values {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    /// Orthogonality penalty: permutation covariance and degree-4
    /// homogeneity.
    #[test]
    fn orth_loss_properties(
        codes in proptest::collection::vec(
            proptest::collection::vec(-2.0f64..2.0, 3),
            2..5,
        ),
        lambda in 0.1f64..3.0,
    ) {
        let k = codes.len();
        for i in 0..k {
            let base = orth_loss(&codes, i).unwrap();
            // Rotate the code list; the value for the rotated index is equal.
            let mut rotated = codes.clone();
            rotated.rotate_left(1);
            let j = (i + k - 1) % k;
            let rot = orth_loss(&rotated, j).unwrap();
            prop_assert!((base - rot).abs() <= 1e-12 * base.abs().max(1.0));

            let scaled: Vec<Vec<f64>> = codes
                .iter()
                .map(|c| c.iter().map(|v| lambda * v).collect())
                .collect();
            let s = orth_loss(&scaled, i).unwrap();
            let expect = lambda.powi(4) * base;
            prop_assert!((s - expect).abs() <= 1e-10 * expect.abs().max(1.0));
        }
    }

    /// Quantization argmin is invariant under positive scaling of the query.
    #[test]
    fn quantize_scale_invariance(
        query in proptest::collection::vec(-1.0f64..1.0, 4),
        lambda in 1e-3f64..1e3,
    ) {
        let norm: f64 = query.iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assume!(norm > 1e-3);
        let stats = protocol_stats(&builtin_known_protocols()).unwrap();
        let book = ProtocolCodebook {
            entries: vec![
                CodebookEntry { client_id: 1, code: vec![1.0, 0.2, -0.3, 0.5], alpha: vec![], beta: vec![] },
                CodebookEntry { client_id: 2, code: vec![-0.4, 1.0, 0.1, -0.2], alpha: vec![], beta: vec![] },
                CodebookEntry { client_id: 3, code: vec![0.3, -0.6, 0.9, 0.4], alpha: vec![], beta: vec![] },
            ],
            stats,
        };
        let (base_idx, base_dist) = quantize(&book, &query).unwrap();
        prop_assert!((0.0..=2.0).contains(&base_dist));
        let scaled: Vec<f64> = query.iter().map(|v| lambda * v).collect();
        let (idx, _) = quantize(&book, &scaled).unwrap();
        prop_assert_eq!(idx, base_idx);
    }
}
