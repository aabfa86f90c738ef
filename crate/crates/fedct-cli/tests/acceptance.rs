//! Acceptance suite: one test per criterion, each printing a PASS line once
//! its assertions hold. Criteria 5-7 share a single trained desk4 run.
//!
//! Thresholds frozen from the first validated desk4 run (seed 7) are marked
//! FROZEN below with the observed values beside them.

use fedct::codebook::{build_codebook, infer_unseen, quantize};
use fedct::ctphys::{
    derive_geometry, forward_project, simulate_low_dose, ImageGrid, NoiseConfig,
};
use fedct::federation::{aggregate, evaluate_client, run_federation, ClientState, FederationConfig};
use fedct::model::{
    forward_eval, modulation_head_eval_count, AblationFlags, DecoderSet, ModelConfig,
    ModelParameters,
};
use fedct::objective::{orth_loss, psnr, ssim};
use fedct::phantom::{
    build_client_dataset, generate_slice, rasterize, BodyPart, ClientData, Split,
};
use fedct::protocol::{
    builtin_known_protocols, builtin_unseen_protocols, normalize_protocol, protocol_stats,
    Protocol,
};
use fedct::report::{MockBehavior, MockServer, ProviderConfig, ProviderKind, StubProvider};
use fedct::report::ReportFeatureProvider;
use fedct_cli::commands::{cmd_gradcheck, cmd_simulate, cmd_train, tiny_test_config, TrainOutputs};
use fedct_cli::config::{preset, ExperimentConfig};
use once_cell::sync::Lazy;
use std::collections::HashMap;
use std::sync::Arc;
use std::time::{Duration, Instant};

fn pass(n: usize, name: &str, detail: &str) {
    println!("ACCEPTANCE {n:2} ({name}): PASS  [{detail}]");
}

// ---------------------------------------------------------------------------
// Shared desk4 bundle for criteria 5, 6, 7.
// ---------------------------------------------------------------------------

struct DeskBundle {
    _root: tempfile::TempDir,
    cfg: ExperimentConfig,
    full: TrainOutputs,
    generic_mean_psnr: f64,
    baseline_mean_psnr: f64,
    datasets: Vec<ClientData>,
    train_elapsed: Duration,
}

fn desk_config() -> ExperimentConfig {
    preset("desk4").expect("preset")
}

static DESK: Lazy<DeskBundle> = Lazy::new(|| {
    let root = tempfile::tempdir().expect("tempdir");
    let cfg = desk_config();
    cmd_simulate(&cfg, root.path()).expect("simulate");

    let datasets: Vec<ClientData> = cfg
        .dataset
        .clients
        .iter()
        .map(|c| {
            fedct::phantom::read_client_dataset(
                &root.path().join("data").join(format!("client_{}", c.client_id)),
                c.client_id,
            )
            .expect("dataset")
        })
        .collect();
    let baseline_mean_psnr = {
        let mut acc = 0.0;
        let mut n = 0usize;
        for d in &datasets {
            for s in &d.test.samples {
                acc += psnr(&s.low_dose_normalized(), &s.reference_normalized(), 1.0).unwrap();
                n += 1;
            }
        }
        acc / n as f64
    };

    let t0 = Instant::now();
    let full = cmd_train(&cfg, root.path()).expect("train full");
    let train_elapsed = t0.elapsed();

    // The generic shared-model baseline trained identically (same data,
    // rounds, optimizer, seed).
    let generic_root = tempfile::tempdir().expect("tempdir");
    let mut generic_cfg = cfg.clone();
    generic_cfg.federation.flags = AblationFlags {
        disable_scanning: true,
        disable_anatomy: true,
        generic_decoder: true,
    };
    generic_cfg.federation.disable_orth = true;
    cmd_simulate(&generic_cfg, generic_root.path()).expect("simulate generic");
    let generic = cmd_train(&generic_cfg, generic_root.path()).expect("train generic");
    let generic_mean_psnr = mean_final_psnr(&generic.trained.metrics, generic_cfg.federation.rounds);

    DeskBundle {
        _root: root,
        cfg,
        full,
        generic_mean_psnr,
        baseline_mean_psnr,
        datasets,
        train_elapsed,
    }
});

fn mean_final_psnr(metrics: &[fedct::objective::MetricRecord], final_round: usize) -> f64 {
    let finals: Vec<f64> = metrics
        .iter()
        .filter(|m| m.round == final_round)
        .map(|m| m.psnr_mean)
        .collect();
    assert!(!finals.is_empty());
    finals.iter().sum::<f64>() / finals.len() as f64
}

fn stub_for(cfg: &ExperimentConfig) -> StubProvider {
    StubProvider::new(cfg.provider.d, cfg.provider.stub_seed)
}

// ---------------------------------------------------------------------------
// 1. Gradient correctness.
// ---------------------------------------------------------------------------

#[test]
fn acceptance_01_gradient_correctness() {
    let t0 = Instant::now();
    let ok = cmd_gradcheck(false);
    let elapsed = t0.elapsed();
    assert!(ok, "gradient checks failed");
    assert!(
        elapsed < Duration::from_secs(120),
        "gradcheck took {elapsed:?}, budget 2 min"
    );
    pass(1, "gradient correctness", &format!("{elapsed:.2?}"));
}

// ---------------------------------------------------------------------------
// 2. CT physics sanity.
// ---------------------------------------------------------------------------

fn disk_image(size: usize, pl: f64, r: f64, mu: f64) -> ImageGrid {
    let mut img = ImageGrid::zeros(size, pl);
    let half = size as f64 * pl / 2.0;
    for i in 0..size {
        for j in 0..size {
            let x = -half + (j as f64 + 0.5) * pl;
            let y = -half + (i as f64 + 0.5) * pl;
            if x * x + y * y <= r * r {
                img.set(i, j, mu);
            }
        }
    }
    img
}

#[test]
fn acceptance_02_ct_physics() {
    let t0 = Instant::now();

    // Noise-free 360-view / 768-bin reconstruction of a 64x64 phantom.
    let p = Protocol::new(360, 768, 0.5, 0.5, 250.0, 250.0, 1e5).unwrap();
    let geo = derive_geometry(&p, 64).unwrap();
    let ph = generate_slice(4242, BodyPart::Abdomen, 0);
    let (phantom, _) = rasterize(&ph, 64, geo.pixel_len);
    let sino = forward_project(&phantom, &geo).unwrap();
    let rec = fedct::ctphys::fbp_reconstruct(&sino, &geo).unwrap();
    let rec_psnr = psnr(
        &rec.normalized(fedct::phantom::ATTENUATION_CEILING),
        &phantom.normalized(fedct::phantom::ATTENUATION_CEILING),
        1.0,
    )
    .unwrap();
    assert!(rec_psnr >= 25.0, "noise-free FBP PSNR {rec_psnr:.2} < 25 dB");

    // Analytic chord integral through a centered disk (odd bin count puts a
    // bin exactly on the central ray).
    let pc = Protocol::new(8, 401, 0.5, 1.0, 250.0, 250.0, 1e5).unwrap();
    let geoc = derive_geometry(&pc, 64).unwrap();
    let (r, mu) = (40.0, 0.02);
    let disk = disk_image(64, geoc.pixel_len, r, mu);
    let dsino = forward_project(&disk, &geoc).unwrap();
    let central = dsino.get(0, 200);
    let expect = 2.0 * r * mu;
    let tol = 1e-6 * expect + 2.0 * mu * geoc.pixel_len;
    assert!(
        (central - expect).abs() <= tol,
        "chord {central:.6} vs {expect:.6} (tol {tol:.6})"
    );

    // Poisson count mean over 1e5 draws at I0 = 1e5, y = 1, sigma_e^2 = 10.
    let n = 100_000usize;
    let pn = Protocol::new(100, 1000, 0.5, 0.8, 250.0, 250.0, 1e5).unwrap();
    let geon = derive_geometry(&pn, 16).unwrap();
    let clean = fedct::ctphys::Sinogram::new(geon, vec![1.0; n]);
    let cfg = NoiseConfig::new(1e5, 10.0, 1.0).unwrap();
    let noisy = simulate_low_dose(&clean, &cfg, 99);
    let mean_count: f64 = noisy
        .data()
        .iter()
        .map(|&out| 1e5 * (-out).exp())
        .sum::<f64>()
        / n as f64;
    let expect_mean = 1e5 * (-1.0f64).exp();
    let rel = (mean_count - expect_mean).abs() / expect_mean;
    assert!(rel < 0.005, "count mean off by {:.3}%", rel * 100.0);

    let elapsed = t0.elapsed();
    assert!(elapsed < Duration::from_secs(180), "physics took {elapsed:?}");
    pass(
        2,
        "ct physics sanity",
        &format!("fbp {rec_psnr:.2} dB, chord err {:.2e}, poisson rel {rel:.2e}, {elapsed:.2?}", (central - expect).abs()),
    );
}

// ---------------------------------------------------------------------------
// 3. Identity at init.
// ---------------------------------------------------------------------------

#[test]
fn acceptance_03_identity_at_init() {
    let t0 = Instant::now();
    let cfg = ModelConfig {
        channels: 8,
        report_dim: 16,
        hidden_dim: 8,
        code_dim: 4,
        n_heads: 2,
        token_count: 4,
        image_size: 32,
        ..Default::default()
    };
    let known = builtin_known_protocols();
    let stats = protocol_stats(&known).unwrap();
    let x = {
        let ph = generate_slice(11, BodyPart::Chest, 0);
        let (img, _) = rasterize(&ph, 32, 4.0);
        img.normalized(fedct::phantom::ATTENUATION_CEILING)
    };
    let ft = {
        let mut v: Vec<f64> = (0..16).map(|i| (i as f64 * 0.7).sin()).collect();
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        v.iter_mut().for_each(|a| *a /= n);
        v
    };

    let params = ModelParameters::init_identity(&cfg, 9, &[1, 2, 3]).unwrap();
    let combos = [
        (false, false, false),
        (true, false, false),
        (false, true, false),
        (true, true, false),
    ];
    for client in [1u32, 2, 3] {
        let g = normalize_protocol(&known[(client - 1) as usize], &stats);
        for (ds, da, _) in combos {
            let flags = AblationFlags {
                disable_scanning: ds,
                disable_anatomy: da,
                generic_decoder: false,
            };
            let pred = forward_eval(&params, &x, &g, &ft, client, flags).unwrap();
            assert_eq!(pred.data(), x.data(), "client {client}, flags {flags:?}");
        }
    }
    let shared = ModelParameters::init_identity(&cfg, 9, &[]).unwrap();
    let g = normalize_protocol(&known[0], &stats);
    let pred = forward_eval(
        &shared,
        &x,
        &g,
        &ft,
        42,
        AblationFlags {
            disable_scanning: true,
            disable_anatomy: true,
            generic_decoder: true,
        },
    )
    .unwrap();
    assert_eq!(pred.data(), x.data());

    // Evaluation metrics of the identity network equal raw-input metrics.
    let p = Protocol::new(64, 201, 0.5, 2.0, 250.0, 250.0, 1e5).unwrap();
    let p2 = Protocol::new(128, 301, 0.6, 1.6, 300.0, 280.0, 2e5).unwrap();
    let st = protocol_stats(&[p, p2]).unwrap();
    let train = build_client_dataset(1, p, &[500], 2, 32, 3, Split::Train).unwrap();
    let test = build_client_dataset(1, p, &[501], 2, 32, 3, Split::Test).unwrap();
    let cfg32 = ModelConfig {
        image_size: 32,
        ..cfg
    };
    let id_params = ModelParameters::init_identity(&cfg32, 9, &[1]).unwrap();
    let client = ClientState::new(
        ClientData { train, test },
        normalize_protocol(&p, &st),
        id_params.decoders.for_client(1).unwrap().clone(),
    );
    let provider = StubProvider::new(16, 5);
    let rec = evaluate_client(
        &id_params,
        &client,
        Split::Test,
        0,
        AblationFlags::default(),
        &provider,
    )
    .unwrap();
    let mut raw_psnr = 0.0;
    let mut raw_ssim = 0.0;
    for s in &client.data.test.samples {
        raw_psnr += psnr(&s.low_dose_normalized(), &s.reference_normalized(), 1.0).unwrap();
        raw_ssim += ssim(&s.low_dose_normalized(), &s.reference_normalized(), 1.0).unwrap();
    }
    let n = client.data.test.samples.len() as f64;
    assert_eq!(rec.psnr_mean, raw_psnr / n);
    assert_eq!(rec.ssim_mean, raw_ssim / n);

    let elapsed = t0.elapsed();
    assert!(elapsed < Duration::from_secs(60));
    pass(3, "identity at init", &format!("{elapsed:.2?}"));
}

// ---------------------------------------------------------------------------
// 4. Algorithm mechanics.
// ---------------------------------------------------------------------------

#[test]
fn acceptance_04_algorithm_mechanics() {
    let t0 = Instant::now();

    // Aggregation fixed point and weighted-average arithmetic: exact.
    let snap = vec![fedct::autodiff::Tensor::new(vec![3], vec![0.25, -1.5, 3.75])];
    let agg = aggregate(&[snap.clone(), snap.clone()], &[4, 12]).unwrap();
    assert_eq!(agg, snap);
    let a = vec![fedct::autodiff::Tensor::scalar(2.0)];
    let b = vec![fedct::autodiff::Tensor::scalar(4.0)];
    assert_eq!(aggregate(&[a, b], &[5, 5]).unwrap()[0].item(), 3.0);
    let a = vec![fedct::autodiff::Tensor::scalar(0.0)];
    let b = vec![fedct::autodiff::Tensor::scalar(4.0)];
    assert_eq!(aggregate(&[a, b], &[1, 3]).unwrap()[0].item(), 3.0);

    // Two-client run: identical shared partitions for every client after
    // every round (broadcast copies), decoders diverging on different data.
    let cfg = tiny_test_config();
    let root = tempfile::tempdir().unwrap();
    cmd_simulate(&cfg, root.path()).unwrap();
    let out = cmd_train(&cfg, root.path()).unwrap();
    let DecoderSet::PerClient(map) = &out.trained.params.decoders else {
        panic!("expected per-client decoders");
    };
    let decs: Vec<_> = map.values().collect();
    assert!(
        decs.windows(2).any(|w| w[0] != w[1]),
        "decoders must diverge across clients with different data"
    );

    // K = 1 equivalence to centralized training: one client's federated
    // trajectory equals the same client trained without aggregation.
    let mcfg = ModelConfig {
        channels: 4,
        report_dim: 16,
        hidden_dim: 8,
        code_dim: 4,
        n_heads: 2,
        token_count: 4,
        image_size: 16,
    };
    let p = Protocol::new(48, 151, 0.5, 2.4, 250.0, 250.0, 1e5).unwrap();
    let p2 = Protocol::new(96, 171, 0.6, 2.6, 300.0, 280.0, 2e5).unwrap();
    let st = protocol_stats(&[p, p2]).unwrap();
    let fed = FederationConfig {
        rounds: 2,
        local_epochs: 1,
        batch_size: 2,
        seed: 5,
        ..Default::default()
    };
    let init = ModelParameters::init(&mcfg, 77, &[1]).unwrap();
    let provider = StubProvider::new(16, 5);
    let mk_client = || {
        let train = build_client_dataset(1, p, &[600], 2, 16, 3, Split::Train).unwrap();
        let test = build_client_dataset(1, p, &[601], 1, 16, 3, Split::Test).unwrap();
        ClientState::new(
            ClientData { train, test },
            normalize_protocol(&p, &st),
            init.decoders.for_client(1).unwrap().clone(),
        )
    };
    let mut fed_clients = vec![mk_client()];
    let trained = run_federation(&mut fed_clients, &init, &fed, &provider).unwrap();

    let mut central = mk_client();
    let mut trainable: Vec<fedct::autodiff::Tensor> = init.shared_snapshot();
    let d = init.decoders.for_client(1).unwrap();
    trainable.extend([
        d.conv1.w.clone(),
        d.conv1.b.clone(),
        d.conv2.w.clone(),
        d.conv2.b.clone(),
        d.conv3.w.clone(),
        d.conv3.b.clone(),
    ]);
    let all_g = [central.g];
    for round in 1..=fed.rounds {
        let out = fedct::federation::local_train(
            &trainable,
            &mut central,
            &mcfg,
            &fed,
            &all_g,
            0,
            round,
            &provider,
        )
        .unwrap();
        trainable = out.trainable;
    }
    assert_eq!(
        trained.params.shared_snapshot().as_slice(),
        &trainable[..trainable.len() - 6],
        "K=1 federation must match centralized training exactly"
    );

    let elapsed = t0.elapsed();
    assert!(elapsed < Duration::from_secs(120));
    pass(4, "algorithm mechanics", &format!("{elapsed:.2?}"));
}

// ---------------------------------------------------------------------------
// 5. Desk-scale learning.
// ---------------------------------------------------------------------------

#[test]
fn acceptance_05_desk_learning() {
    let desk = &*DESK;
    let full_mean = mean_final_psnr(&desk.full.trained.metrics, desk.cfg.federation.rounds);
    // FROZEN reference values from the first validated run (seed 7):
    //   input baseline 41.99 dB, full 45.88 dB (+3.90), generic 45.11 dB.
    assert!(
        full_mean >= desk.baseline_mean_psnr + 2.0,
        "final mean test PSNR {full_mean:.2} dB must exceed the low-dose input baseline {:.2} dB by 2 dB",
        desk.baseline_mean_psnr
    );
    assert!(
        full_mean >= desk.generic_mean_psnr,
        "dual-level personalization ({full_mean:.2} dB) must not lose to the generic baseline ({:.2} dB)",
        desk.generic_mean_psnr
    );
    pass(
        5,
        "desk-scale learning",
        &format!(
            "baseline {:.2} dB, full {full_mean:.2} dB, generic {:.2} dB, train {:?}",
            desk.baseline_mean_psnr, desk.generic_mean_psnr, desk.train_elapsed
        ),
    );
}

// ---------------------------------------------------------------------------
// 6. Orthogonality loss.
// ---------------------------------------------------------------------------

#[test]
fn acceptance_06_orthogonality() {
    // Exact values on hand-computed code sets.
    let basis = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]];
    for i in 0..3 {
        assert_eq!(orth_loss(&basis, i).unwrap(), 0.0);
    }
    let worked = vec![vec![1.0, 1.0], vec![1.0, -1.0], vec![2.0, 0.0]];
    assert_eq!(orth_loss(&worked, 2).unwrap(), 8.0);

    // Degree-4 homogeneity within 1e-10.
    let codes = vec![
        vec![0.3, -1.2, 0.7],
        vec![0.9, 0.4, -0.5],
        vec![-0.2, 0.8, 1.1],
    ];
    for lambda in [0.3, 1.7, 4.0] {
        let scaled: Vec<Vec<f64>> = codes
            .iter()
            .map(|c| c.iter().map(|v| lambda * v).collect())
            .collect();
        for i in 0..3 {
            let base: f64 = orth_loss(&codes, i).unwrap();
            let s = orth_loss(&scaled, i).unwrap();
            let lam4: f64 = lambda;
            let expect = lam4.powi(4) * base;
            assert!(
                (s - expect).abs() <= 1e-10 * expect.abs().max(1.0),
                "lambda {lambda}, i {i}"
            );
        }
    }

    // On the trained desk4 run (tau = 0.01): codes end less aligned than
    // they started.
    let desk = &*DESK;
    let hist = &desk.full.trained.cos_history;
    assert!(hist.len() >= 2);
    let (first, last) = (hist[0], *hist.last().unwrap());
    assert!(
        last < first,
        "max pairwise |cos| must drop over training: {first:.4} -> {last:.4}"
    );
    pass(
        6,
        "orthogonality loss",
        &format!("max |cos| {first:.4} -> {last:.4}"),
    );
}

// ---------------------------------------------------------------------------
// 7. Protocol vector quantization.
// ---------------------------------------------------------------------------

#[test]
fn acceptance_07_pvqs() {
    let t0 = Instant::now();
    let desk = &*DESK;
    let params = &desk.full.trained.params;
    let known: Vec<(u32, Protocol)> = desk
        .cfg
        .dataset
        .clients
        .iter()
        .map(|c| (c.client_id, c.resolve_protocol().unwrap()))
        .collect();
    let book = build_codebook(params, &known, &desk.full.stats).unwrap();

    // Self-quantization returns (i, 0) exactly.
    for (i, e) in book.entries.iter().enumerate() {
        let (idx, dist) = quantize(&book, &e.code).unwrap();
        assert_eq!(idx, i);
        assert_eq!(dist, 0.0);
    }
    // Positive-scale argmin invariance.
    let probe = &book.entries[2].code;
    let (base_idx, _) = quantize(&book, probe).unwrap();
    for lambda in [1e-4, 0.1, 7.0, 1e6] {
        let scaled: Vec<f64> = probe.iter().map(|v| lambda * v).collect();
        assert_eq!(quantize(&book, &scaled).unwrap().0, base_idx);
    }

    // Unseen protocol equal to known client #3 reproduces its inference
    // bit-exactly, without evaluating the modulation heads.
    let provider = stub_for(&desk.cfg);
    let c3_pos = known.iter().position(|&(id, _)| id == 3).unwrap();
    let p3 = known[c3_pos].1;
    let ds3 = &desk.datasets[c3_pos];
    let sample = &ds3.test.samples[0];
    let x = sample.low_dose_normalized();
    let ft = provider.feature(&x, &sample.metadata).unwrap().values;
    let before = modulation_head_eval_count();
    let out = infer_unseen(params, &book, &x, &p3, &ft, desk.cfg.federation.flags).unwrap();
    assert_eq!(modulation_head_eval_count(), before);
    assert_eq!(out.matched_client, 3);
    assert_eq!(out.distance, 0.0);
    let g3 = normalize_protocol(&p3, &desk.full.stats);
    let own = forward_eval(params, &x, &g3, &ft, 3, desk.cfg.federation.flags).unwrap();
    assert_eq!(out.prediction.data(), own.data());

    // A +-5% perturbation of client #3's protocol routes back to client #3
    // and reconstructs within 1 dB of the client's own test PSNR.
    let perturbed = Protocol::new(
        (p3.nv as f64 * 1.05).round() as u32,
        (p3.ndb as f64 * 0.95).round() as u32,
        p3.pl * 1.05,
        p3.dbl * 0.95,
        p3.dsr * 1.05,
        p3.ddr * 0.95,
        p3.pn * 1.05,
    )
    .unwrap();
    let mut psnr_acc = 0.0;
    for s in &ds3.test.samples {
        let xs = s.low_dose_normalized();
        let fts = provider.feature(&xs, &s.metadata).unwrap().values;
        let o = infer_unseen(params, &book, &xs, &perturbed, &fts, desk.cfg.federation.flags)
            .unwrap();
        assert_eq!(o.matched_client, 3, "perturbed protocol must route to client 3");
        psnr_acc += psnr(&o.prediction, &s.reference_normalized(), 1.0).unwrap();
    }
    let perturbed_psnr = psnr_acc / ds3.test.samples.len() as f64;
    let own_psnr = desk
        .full
        .trained
        .metrics
        .iter()
        .find(|m| m.client_id == 3 && m.round == desk.cfg.federation.rounds)
        .unwrap()
        .psnr_mean;
    assert!(
        (perturbed_psnr - own_psnr).abs() <= 1.0,
        "perturbed-protocol PSNR {perturbed_psnr:.2} vs own {own_psnr:.2}"
    );

    // All four built-in unseen protocols route without error.
    let mut routes = Vec::new();
    for p in builtin_unseen_protocols() {
        let o = infer_unseen(params, &book, &x, &p, &ft, desk.cfg.federation.flags).unwrap();
        routes.push((o.matched_client, o.distance));
    }
    let elapsed = t0.elapsed();
    assert!(elapsed < Duration::from_secs(300));
    pass(
        7,
        "protocol vector quantization",
        &format!("perturbed {perturbed_psnr:.2} vs own {own_psnr:.2} dB; unseen routes {routes:?}"),
    );
}

// ---------------------------------------------------------------------------
// 8. Metrics oracle.
// ---------------------------------------------------------------------------

fn splitmix_image(seed: u64, size: usize) -> ImageGrid {
    let mut state = seed;
    let data = (0..size * size)
        .map(|_| {
            state = state.wrapping_add(0x9E3779B97F4A7C15);
            let mut z = state;
            z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
            z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
            z ^= z >> 31;
            (z >> 11) as f64 * (2.0f64).powi(-53)
        })
        .collect();
    ImageGrid::new(size, 1.0, data)
}

/// Frozen values from the independent reference implementations (numpy PSNR,
/// scikit-image SSIM: gaussian_weights, sigma 1.5, win 11, no sample
/// covariance, data_range 1).
const FROZEN_PAIRS: [(u64, f64, f64); 5] = [
    (1, 7.749630054398294, -0.035395580203475316),
    (2, 7.656396393105974, 0.05732027115684714),
    (3, 7.970961959464543, 0.037832405817724325),
    (4, 7.741341854715005, -0.043007308552524645),
    (5, 7.612158837374987, 0.028280421624626358),
];

#[test]
fn acceptance_08_metrics_oracle() {
    for (k, expect_psnr, expect_ssim) in FROZEN_PAIRS {
        let a = splitmix_image(1000 + k, 32);
        let b = splitmix_image(2000 + k, 32);
        let got_psnr = psnr(&a, &b, 1.0).unwrap();
        assert!(
            (got_psnr - expect_psnr).abs() < 1e-6,
            "pair {k}: psnr {got_psnr} vs {expect_psnr}"
        );
        let got_ssim = ssim(&a, &b, 1.0).unwrap();
        assert!(
            (got_ssim - expect_ssim).abs() < 1e-4,
            "pair {k}: ssim {got_ssim} vs {expect_ssim}"
        );
    }
    let a = splitmix_image(4001, 32);
    assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
    assert_eq!(ssim(&a, &a, 1.0).unwrap(), 1.0);
    pass(8, "metrics oracle", "5 frozen pairs + identity cases");
}

// ---------------------------------------------------------------------------
// 9. Provider contract.
// ---------------------------------------------------------------------------

#[test]
fn acceptance_09_provider_contract() {
    // Stub determinism and sensitivity.
    let ph = generate_slice(31, BodyPart::Pelvis, 0);
    let (raw, meta) = rasterize(&ph, 32, 1.0);
    let img = raw.normalized(fedct::phantom::ATTENUATION_CEILING);
    let stub = StubProvider::new(16, 9);
    let f1 = stub.feature(&img, &meta).unwrap();
    assert_eq!(f1, stub.feature(&img, &meta).unwrap());
    let mut shifted = meta.clone();
    let fat = shifted.fraction(fedct::phantom::TissueClass::Fat);
    shifted
        .tissue_fractions
        .insert(fedct::phantom::TissueClass::Fat, fat + 0.1);
    let f2 = stub.feature(&img, &shifted).unwrap();
    let cos: f64 = f1.values.iter().zip(&f2.values).map(|(a, b)| a * b).sum();
    assert!(cos < 1.0 - 1e-6, "fraction shift must move the feature");

    // Remote against the bundled mock: echo, malformed, timeout.
    let remote_cfg = |url: &str, timeout_ms: u64| ProviderConfig {
        kind: ProviderKind::Remote,
        d: 16,
        endpoint: Some(url.to_string()),
        timeout_ms,
        ..Default::default()
    };
    {
        let fixed: Vec<f64> = (1..=16).map(f64::from).collect();
        let server = MockServer::start(0, MockBehavior::Echo(fixed.clone())).unwrap();
        let provider = remote_cfg(&server.url(), 3000).build().unwrap();
        let f = provider.feature(&img, &meta).unwrap();
        let norm: f64 = fixed.iter().map(|v| v * v).sum::<f64>().sqrt();
        for (got, raw) in f.values.iter().zip(&fixed) {
            assert!((got - raw / norm).abs() < 1e-15);
        }
    }
    {
        let server = MockServer::start(0, MockBehavior::Malform).unwrap();
        let provider = remote_cfg(&server.url(), 3000).build().unwrap();
        assert!(provider.feature(&img, &meta).is_err());
    }
    {
        let server = MockServer::start(
            0,
            MockBehavior::Delay {
                ms: 1200,
                reply: vec![0.25; 16],
            },
        )
        .unwrap();
        let provider = remote_cfg(&server.url(), 250).build().unwrap();
        let t0 = Instant::now();
        let err = provider.feature(&img, &meta).unwrap_err();
        assert!(matches!(err, fedct::report::ReportError::Timeout { .. }));
        assert!(t0.elapsed() < Duration::from_millis(350));
    }

    // Provider-agnostic training: a stub-trained run and a run whose mock
    // remote echoes the stub's vectors produce identical artifacts.
    let cfg = {
        let mut c = tiny_test_config();
        c.federation.rounds = 1;
        c
    };
    let stub_root = tempfile::tempdir().unwrap();
    cmd_simulate(&cfg, stub_root.path()).unwrap();
    let stub_out = cmd_train(&cfg, stub_root.path()).unwrap();

    // Collect stub features for every sample keyed by the image wire bytes.
    let stub_provider = stub_for(&cfg);
    let mut table: HashMap<Vec<u8>, Vec<f64>> = HashMap::new();
    for spec in &cfg.dataset.clients {
        let data = fedct::phantom::read_client_dataset(
            &stub_root
                .path()
                .join("data")
                .join(format!("client_{}", spec.client_id)),
            spec.client_id,
        )
        .unwrap();
        for s in data.train.samples.iter().chain(&data.test.samples) {
            let x = s.low_dose_normalized();
            let key = fedct::ctphys::pfs_matrix_bytes(x.size(), x.size(), x.data());
            let f = stub_provider.feature(&x, &s.metadata).unwrap();
            table.insert(key, f.values);
        }
    }
    let server = MockServer::start(0, MockBehavior::Lookup(Arc::new(table))).unwrap();
    let mut remote_cfg_full = cfg.clone();
    remote_cfg_full.provider.kind = ProviderKind::Remote;
    remote_cfg_full.provider.endpoint = Some(server.url());
    remote_cfg_full.provider.timeout_ms = 10_000;
    let remote_root = tempfile::tempdir().unwrap();
    cmd_simulate(&remote_cfg_full, remote_root.path()).unwrap();
    let remote_out = cmd_train(&remote_cfg_full, remote_root.path()).unwrap();

    assert_eq!(
        stub_out.trained.params, remote_out.trained.params,
        "training must be provider-agnostic"
    );
    assert_eq!(stub_out.trained.metrics, remote_out.trained.metrics);
    pass(9, "provider contract", "echo/malform/timeout + agnostic training");
}

// ---------------------------------------------------------------------------
// 10. Reproducibility through the CLI with --threads 1.
// ---------------------------------------------------------------------------

#[test]
fn acceptance_10_reproducibility() {
    let bin = env!("CARGO_BIN_EXE_fedct");
    let cfg = tiny_test_config();

    let run_once = || {
        let dir = tempfile::tempdir().unwrap();
        let cfg_path = dir.path().join("exp.toml");
        std::fs::write(&cfg_path, cfg.to_toml()).unwrap();
        for cmd in ["simulate", "train"] {
            let status = std::process::Command::new(bin)
                .args([
                    cmd,
                    "--config",
                    cfg_path.to_str().unwrap(),
                    "--out",
                    dir.path().to_str().unwrap(),
                    "--threads",
                    "1",
                ])
                .stdout(std::process::Stdio::null())
                .status()
                .unwrap();
            assert!(status.success(), "{cmd} failed");
        }
        let metrics = std::fs::read(dir.path().join("run/metrics.csv")).unwrap();
        let ckpt = std::fs::read(dir.path().join("run/checkpoint_final.pfm")).unwrap();
        (metrics, ckpt)
    };
    let a = run_once();
    let b = run_once();
    assert_eq!(a.0, b.0, "metric CSVs must be byte-identical");
    assert_eq!(a.1, b.1, "checkpoints must be byte-identical");

    // Exit-code contract: bad config exits 1, gradcheck failure exits 2.
    let bad = std::process::Command::new(bin)
        .args(["train", "--preset", "nope"])
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(1));
    let injected = std::process::Command::new(bin)
        .args(["gradcheck", "--inject-bug"])
        .stdout(std::process::Stdio::null())
        .status()
        .unwrap();
    assert_eq!(injected.code(), Some(2));
    pass(10, "reproducibility", "byte-identical CSV + checkpoint; exit codes 1/2");
}
