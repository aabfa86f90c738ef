//! End-to-end command pipeline on a small configuration.

use fedct_cli::commands::{
    cmd_dump_codebook, cmd_eval, cmd_gradcheck, cmd_infer_unseen, cmd_simulate, cmd_train,
    tiny_test_config,
};
use fedct_cli::CliError;

#[test]
fn full_pipeline_simulate_train_eval_infer() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = tiny_test_config();
    cfg.validate().unwrap();

    cmd_simulate(&cfg, root).unwrap();
    for id in [1u32, 3, 5, 6] {
        let cdir = root.join("data").join(format!("client_{id}"));
        assert!(cdir.join("manifest.csv").exists());
        assert!(cdir.join("protocol.csv").exists());
    }
    assert!(root.join("data").join("config.resolved.toml").exists());

    let out = cmd_train(&cfg, root).unwrap();
    let run = root.join("run");
    assert!(run.join("checkpoint_final.pfm").exists());
    assert!(run.join("metrics.csv").exists());
    assert!(run.join("codebook.txt").exists());
    assert!(run.join("config.resolved.toml").exists());
    assert!(run.join("run_manifest.toml").exists());
    // rounds x clients test metric rows.
    assert_eq!(out.trained.metrics.len(), 2 * 4);

    let metrics = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("client_id,round,split,psnr_mean,ssim_mean,n_samples"));
    assert_eq!(metrics.lines().count(), 1 + 8);

    let recs = cmd_eval(root, &[], true).unwrap();
    assert_eq!(recs.len(), 4);
    // One pred/input/ref PGM per test sample.
    let imgdir = run.join("eval").join("client_1");
    assert!(imgdir.join("s000_pred.pgm").exists());
    assert!(imgdir.join("s000_input.pgm").exists());
    assert!(imgdir.join("s000_ref.pgm").exists());

    let subset = cmd_eval(root, &[3], false).unwrap();
    assert_eq!(subset.len(), 1);
    assert_eq!(subset[0].client_id, 3);

    let rows = cmd_infer_unseen(root, None).unwrap();
    assert_eq!(rows.len(), 4);
    for row in &rows {
        assert!([1, 3, 5, 6].contains(&row.matched_client));
        assert!(row.distance >= 0.0 && row.distance <= 2.0);
        assert!(row.psnr_mean.is_finite());
    }
    assert!(run.join("unseen_report.csv").exists());

    let dump = cmd_dump_codebook(root, None).unwrap();
    let text = std::fs::read_to_string(dump).unwrap();
    assert!(text.contains("# pairwise cosine similarity"));
}

#[test]
fn simulate_is_deterministic_per_seed() {
    let cfg = tiny_test_config();
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    cmd_simulate(&cfg, dir_a.path()).unwrap();
    cmd_simulate(&cfg, dir_b.path()).unwrap();
    for id in [1u32, 3, 5, 6] {
        let rel = format!("data/client_{id}");
        let da = dir_a.path().join(&rel);
        let db = dir_b.path().join(&rel);
        let mut names: Vec<String> = std::fs::read_dir(&da)
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .collect();
        names.sort();
        assert!(!names.is_empty());
        for name in names {
            let a = std::fs::read(da.join(&name)).unwrap();
            let b = std::fs::read(db.join(&name)).unwrap();
            assert_eq!(a, b, "file {name} differs between identical runs");
        }
    }
}

#[test]
fn train_is_byte_reproducible() {
    let cfg = tiny_test_config();
    let run = || {
        let dir = tempfile::tempdir().unwrap();
        cmd_simulate(&cfg, dir.path()).unwrap();
        cmd_train(&cfg, dir.path()).unwrap();
        let ckpt = std::fs::read(dir.path().join("run/checkpoint_final.pfm")).unwrap();
        let metrics = std::fs::read(dir.path().join("run/metrics.csv")).unwrap();
        let codebook = std::fs::read(dir.path().join("run/codebook.txt")).unwrap();
        (ckpt, metrics, codebook)
    };
    let a = run();
    let b = run();
    assert_eq!(a.0, b.0, "checkpoints must be byte-identical");
    assert_eq!(a.1, b.1, "metric CSVs must be byte-identical");
    assert_eq!(a.2, b.2, "codebook dumps must be byte-identical");
}

#[test]
fn gradcheck_command_detects_injected_bug() {
    assert!(cmd_gradcheck(false));
    assert!(!cmd_gradcheck(true));
}

#[test]
fn seed_collision_is_a_config_error() {
    let mut cfg = tiny_test_config();
    let seeds = cfg.dataset.clients[0].train_patient_seeds.clone();
    cfg.dataset.clients[1].train_patient_seeds = seeds;
    let dir = tempfile::tempdir().unwrap();
    let err = cmd_simulate(&cfg, dir.path()).unwrap_err();
    assert!(matches!(err, CliError::Config(_)));
    assert_eq!(err.exit_code(), 1);
}

#[test]
fn checkpoint_every_writes_intermediates() {
    let mut cfg = tiny_test_config();
    cfg.federation.rounds = 3;
    cfg.output.checkpoint_every = 1;
    let dir = tempfile::tempdir().unwrap();
    cmd_simulate(&cfg, dir.path()).unwrap();
    cmd_train(&cfg, dir.path()).unwrap();
    assert!(dir.path().join("run/checkpoint_round_0001.pfm").exists());
    assert!(dir.path().join("run/checkpoint_round_0002.pfm").exists());
    // The last round is the final checkpoint, not an intermediate.
    assert!(!dir.path().join("run/checkpoint_round_0003.pfm").exists());
    assert!(dir.path().join("run/checkpoint_final.pfm").exists());
}
