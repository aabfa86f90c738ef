//! Command implementations behind the CLI: dataset simulation, federated
//! training, evaluation, unseen-protocol inference, gradient checking, and
//! codebook export.

use crate::config::{ExperimentConfig, UnseenSpec};
use crate::CliError;
use fedct::codebook::{
    build_codebook, infer_unseen, read_codebook_dump, write_codebook_dump, ProtocolCodebook,
};
use fedct::ctphys::{write_pgm, PgmWindow};
use fedct::federation::{
    evaluate_client, run_federation_observed, ClientState, TrainedState,
};
use fedct::gradcheck::run_full_suite;
use fedct::model::{read_checkpoint, write_checkpoint, ModelParameters};
use fedct::objective::{MetricRecord, MetricsWriter};
use fedct::phantom::{
    build_client_dataset, read_client_dataset, write_client_dataset, ClientData, SeedRegistry,
    Split,
};
use fedct::protocol::{normalize_protocol, protocol_stats, MinMaxStats, Protocol};
use fedct::report::ReportFeatureProvider;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

const RESOLVED_CONFIG: &str = "config.resolved.toml";
const RUN_MANIFEST: &str = "run_manifest.toml";
const FINAL_CHECKPOINT: &str = "checkpoint_final.pfm";
const METRICS_CSV: &str = "metrics.csv";
const CODEBOOK_DUMP: &str = "codebook.txt";

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

fn runtime_err(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

/// Directory layout of one experiment root.
pub struct Workspace {
    pub root: PathBuf,
}

impl Workspace {
    pub fn new(root: &Path) -> Workspace {
        Workspace {
            root: root.to_path_buf(),
        }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn client_dir(&self, client_id: u32) -> PathBuf {
        self.data_dir().join(format!("client_{client_id}"))
    }

    pub fn run_dir(&self) -> PathBuf {
        self.root.join("run")
    }
}

fn write_resolved_config(dir: &Path, cfg: &ExperimentConfig) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(runtime_err)?;
    fs::write(dir.join(RESOLVED_CONFIG), cfg.to_toml()).map_err(runtime_err)?;
    Ok(())
}

fn write_run_manifest(dir: &Path, cfg: &ExperimentConfig, command: &str) -> Result<(), CliError> {
    let manifest = format!(
        "command = \"{command}\"\nversion = \"fedct-{}\"\nseed = {}\nfederation_seed = {}\n",
        env!("CARGO_PKG_VERSION"),
        cfg.dataset.seed,
        cfg.federation.seed,
    );
    fs::write(dir.join(RUN_MANIFEST), manifest).map_err(runtime_err)?;
    Ok(())
}

/// Simulate every configured client dataset into `<out>/data/client_<id>/`.
pub fn cmd_simulate(cfg: &ExperimentConfig, out_root: &Path) -> Result<(), CliError> {
    cfg.validate().map_err(config_err)?;
    let ws = Workspace::new(out_root);
    let mut registry = SeedRegistry::new();
    for c in &cfg.dataset.clients {
        registry
            .claim_train(c.client_id, &c.train_patient_seeds)
            .map_err(|e| config_err(e.to_string()))?;
    }
    for spec in &cfg.dataset.clients {
        let protocol = spec.resolve_protocol().map_err(config_err)?;
        let train = build_client_dataset(
            spec.client_id,
            protocol,
            &spec.train_patient_seeds,
            spec.train_slices,
            cfg.dataset.image_size,
            cfg.dataset.seed,
            Split::Train,
        )
        .map_err(runtime_err)?;
        let test = build_client_dataset(
            spec.client_id,
            protocol,
            &spec.test_patient_seeds,
            spec.test_slices,
            cfg.dataset.image_size,
            cfg.dataset.seed,
            Split::Test,
        )
        .map_err(runtime_err)?;
        let dir = ws.client_dir(spec.client_id);
        fs::create_dir_all(&dir).map_err(runtime_err)?;
        write_client_dataset(&dir, &ClientData { train, test }).map_err(runtime_err)?;
        println!(
            "simulated client {} ({} train, {} test samples) -> {}",
            spec.client_id,
            spec.train_patient_seeds.len() * spec.train_slices,
            spec.test_patient_seeds.len() * spec.test_slices,
            dir.display()
        );
    }
    write_resolved_config(&ws.data_dir(), cfg)?;
    Ok(())
}

/// Load the datasets for all configured clients and normalize protocols
/// against the known-client statistics.
fn load_clients(
    cfg: &ExperimentConfig,
    ws: &Workspace,
    init: &ModelParameters,
) -> Result<(Vec<ClientState>, MinMaxStats), CliError> {
    let protocols: Vec<Protocol> = cfg
        .dataset
        .clients
        .iter()
        .map(|c| c.resolve_protocol().map_err(config_err))
        .collect::<Result<_, _>>()?;
    let stats = protocol_stats(&protocols).map_err(|e| config_err(e.to_string()))?;
    let mut clients = Vec::new();
    for (spec, protocol) in cfg.dataset.clients.iter().zip(&protocols) {
        let dir = ws.client_dir(spec.client_id);
        if !dir.exists() {
            return Err(config_err(format!(
                "dataset for client {} not found at {} (run simulate first)",
                spec.client_id,
                dir.display()
            )));
        }
        let data = read_client_dataset(&dir, spec.client_id).map_err(runtime_err)?;
        if data.train.protocol != *protocol {
            return Err(config_err(format!(
                "client {}: dataset protocol differs from config",
                spec.client_id
            )));
        }
        let g = normalize_protocol(protocol, &stats);
        let decoder = init
            .decoders
            .for_client(spec.client_id)
            .map_err(runtime_err)?
            .clone();
        clients.push(ClientState::new(data, g, decoder));
    }
    Ok((clients, stats))
}

fn init_params(cfg: &ExperimentConfig) -> Result<ModelParameters, CliError> {
    let ids: Vec<u32> = if cfg.federation.flags.generic_decoder {
        Vec::new()
    } else {
        cfg.client_ids()
    };
    ModelParameters::init(&cfg.model, cfg.federation.seed, &ids).map_err(runtime_err)
}

pub struct TrainOutputs {
    pub trained: TrainedState,
    pub stats: MinMaxStats,
    pub run_dir: PathBuf,
}

/// Federated training: reads the simulated datasets, runs the round loop,
/// and writes the final checkpoint, per-round metrics CSV, codebook dump,
/// and resolved config under `<out>/run/`.
pub fn cmd_train(cfg: &ExperimentConfig, out_root: &Path) -> Result<TrainOutputs, CliError> {
    cfg.validate().map_err(config_err)?;
    let ws = Workspace::new(out_root);
    let provider = cfg.provider.build().map_err(|e| config_err(e.to_string()))?;
    let init = init_params(cfg)?;
    let (mut clients, stats) = load_clients(cfg, &ws, &init)?;

    let run_dir = ws.run_dir();
    fs::create_dir_all(&run_dir).map_err(runtime_err)?;
    let every = cfg.output.checkpoint_every;
    let trained = run_federation_observed(
        &mut clients,
        &init,
        &cfg.federation,
        provider.as_ref(),
        |round, params| {
            if every > 0 && round % every == 0 && round < cfg.federation.rounds {
                let path = run_dir.join(format!("checkpoint_round_{round:04}.pfm"));
                let mut f = fs::File::create(&path).map_err(|e| {
                    fedct::federation::FederationError::ConfigInvalid(e.to_string())
                })?;
                write_checkpoint(&mut f, params)
                    .map_err(fedct::federation::FederationError::Model)?;
            }
            Ok(())
        },
    )
    .map_err(runtime_err)?;

    let mut ckpt = fs::File::create(run_dir.join(FINAL_CHECKPOINT)).map_err(runtime_err)?;
    write_checkpoint(&mut ckpt, &trained.params).map_err(runtime_err)?;

    let metrics_file = fs::File::create(run_dir.join(METRICS_CSV)).map_err(runtime_err)?;
    let mut writer = MetricsWriter::new(metrics_file).map_err(runtime_err)?;
    for rec in &trained.metrics {
        writer.append(rec).map_err(runtime_err)?;
    }

    let known: Vec<(u32, Protocol)> = cfg
        .dataset
        .clients
        .iter()
        .map(|c| Ok((c.client_id, c.resolve_protocol().map_err(config_err)?)))
        .collect::<Result<_, CliError>>()?;
    let book = build_codebook(&trained.params, &known, &stats).map_err(runtime_err)?;
    let mut dump = Vec::new();
    write_codebook_dump(&mut dump, &book).map_err(runtime_err)?;
    fs::write(run_dir.join(CODEBOOK_DUMP), dump).map_err(runtime_err)?;

    write_resolved_config(&run_dir, cfg)?;
    write_run_manifest(&run_dir, cfg, "train")?;

    if let Some(last) = trained.metrics.last() {
        println!(
            "trained {} rounds; final test psnr (client {}): {:.3} dB",
            cfg.federation.rounds, last.client_id, last.psnr_mean
        );
    }
    Ok(TrainOutputs {
        trained,
        stats,
        run_dir,
    })
}

/// Load a finished run: resolved config plus final checkpoint.
pub fn load_run(run_dir: &Path) -> Result<(ExperimentConfig, ModelParameters), CliError> {
    let cfg = ExperimentConfig::load(&run_dir.join(RESOLVED_CONFIG)).map_err(config_err)?;
    let f = fs::File::open(run_dir.join(FINAL_CHECKPOINT))
        .map_err(|e| config_err(format!("cannot open checkpoint: {e}")))?;
    let params = read_checkpoint(BufReader::new(f)).map_err(runtime_err)?;
    Ok((cfg, params))
}

/// Evaluate a checkpoint on the stored test splits, optionally restricted to
/// a client subset, writing a metrics CSV and optional PGM image dumps.
pub fn cmd_eval(
    out_root: &Path,
    client_filter: &[u32],
    dump_images: bool,
) -> Result<Vec<MetricRecord>, CliError> {
    let ws = Workspace::new(out_root);
    let run_dir = ws.run_dir();
    let (cfg, params) = load_run(&run_dir)?;
    let provider = cfg.provider.build().map_err(|e| config_err(e.to_string()))?;
    let (clients, _stats) = load_clients(&cfg, &ws, &params)?;

    let eval_dir = run_dir.join("eval");
    fs::create_dir_all(&eval_dir).map_err(runtime_err)?;
    let metrics_file = fs::File::create(eval_dir.join("eval_metrics.csv")).map_err(runtime_err)?;
    let mut writer = MetricsWriter::new(metrics_file).map_err(runtime_err)?;

    let mut records = Vec::new();
    for client in &clients {
        if !client_filter.is_empty() && !client_filter.contains(&client.client_id) {
            continue;
        }
        let rec = evaluate_client(
            &params,
            client,
            Split::Test,
            cfg.federation.rounds,
            cfg.federation.flags,
            provider.as_ref(),
        )
        .map_err(runtime_err)?;
        writer.append(&rec).map_err(runtime_err)?;
        println!(
            "client {}: psnr {:.3} dB, ssim {:.4} ({} samples)",
            rec.client_id, rec.psnr_mean, rec.ssim_mean, rec.n_samples
        );
        if dump_images {
            dump_client_images(&eval_dir, &params, client, &cfg, provider.as_ref())?;
        }
        records.push(rec);
    }
    if records.is_empty() {
        return Err(config_err("no clients matched the filter"));
    }
    Ok(records)
}

fn dump_client_images(
    eval_dir: &Path,
    params: &ModelParameters,
    client: &ClientState,
    cfg: &ExperimentConfig,
    provider: &dyn ReportFeatureProvider,
) -> Result<(), CliError> {
    let win = PgmWindow::default();
    let dir = eval_dir.join(format!("client_{}", client.client_id));
    fs::create_dir_all(&dir).map_err(runtime_err)?;
    for (i, s) in client.data.test.samples.iter().enumerate() {
        let x = s.low_dose_normalized();
        let reference = s.reference_normalized();
        let ft = provider
            .feature(&x, &s.metadata)
            .map_err(runtime_err)?
            .values;
        let pred = fedct::model::forward_eval(
            params,
            &x,
            &client.g,
            &ft,
            client.client_id,
            cfg.federation.flags,
        )
        .map_err(runtime_err)?;
        let n = x.size();
        write_pgm(&dir.join(format!("s{i:03}_pred.pgm")), n, n, pred.data(), win)
            .map_err(runtime_err)?;
        write_pgm(&dir.join(format!("s{i:03}_input.pgm")), n, n, x.data(), win)
            .map_err(runtime_err)?;
        write_pgm(
            &dir.join(format!("s{i:03}_ref.pgm")),
            n,
            n,
            reference.data(),
            win,
        )
        .map_err(runtime_err)?;
    }
    Ok(())
}

/// One line of the unseen-protocol report.
#[derive(Debug, Clone)]
pub struct UnseenReportRow {
    pub name: String,
    pub matched_client: u32,
    pub distance: f64,
    pub psnr_mean: f64,
    pub ssim_mean: f64,
    pub n_samples: usize,
}

/// Route every configured unseen protocol through the codebook and report
/// the matched client, code distance, and reconstruction quality.
pub fn cmd_infer_unseen(
    out_root: &Path,
    unseen_overrides: Option<&[UnseenSpec]>,
) -> Result<Vec<UnseenReportRow>, CliError> {
    let ws = Workspace::new(out_root);
    let run_dir = ws.run_dir();
    let (cfg, params) = load_run(&run_dir)?;
    let provider = cfg.provider.build().map_err(|e| config_err(e.to_string()))?;

    let known: Vec<(u32, Protocol)> = cfg
        .dataset
        .clients
        .iter()
        .map(|c| Ok((c.client_id, c.resolve_protocol().map_err(config_err)?)))
        .collect::<Result<_, CliError>>()?;
    let protocols: Vec<Protocol> = known.iter().map(|&(_, p)| p).collect();
    let stats = protocol_stats(&protocols).map_err(|e| config_err(e.to_string()))?;
    let book = build_codebook(&params, &known, &stats).map_err(runtime_err)?;
    cross_check_codebook_dump(&run_dir, &book)?;

    let specs = unseen_overrides.unwrap_or(&cfg.unseen);
    if specs.is_empty() {
        return Err(config_err("no unseen protocols configured"));
    }

    let report_path = run_dir.join("unseen_report.csv");
    let mut report = String::from("name,matched_client,distance,psnr_mean,ssim_mean,n_samples\n");
    let mut rows = Vec::new();
    for spec in specs {
        let protocol = spec.resolve_protocol().map_err(config_err)?;
        let ds = build_client_dataset(
            u32::MAX,
            protocol,
            &spec.patient_seeds,
            spec.slices,
            cfg.dataset.image_size,
            fedct::ctphys::split_seed(cfg.dataset.seed, 0x7531, 0, 0),
            Split::Test,
        )
        .map_err(runtime_err)?;

        let mut psnr_acc = 0.0;
        let mut ssim_acc = 0.0;
        let mut matched = None;
        for s in &ds.samples {
            let x = s.low_dose_normalized();
            let ft = provider
                .feature(&x, &s.metadata)
                .map_err(runtime_err)?
                .values;
            let out = infer_unseen(&params, &book, &x, &protocol, &ft, cfg.federation.flags)
                .map_err(runtime_err)?;
            psnr_acc += fedct::objective::psnr(&out.prediction, &s.reference_normalized(), 1.0)
                .map_err(runtime_err)?;
            ssim_acc += fedct::objective::ssim(&out.prediction, &s.reference_normalized(), 1.0)
                .map_err(runtime_err)?;
            matched = Some((out.matched_client, out.distance));
        }
        let (matched_client, distance) = matched.expect("non-empty unseen dataset");
        let n = ds.samples.len();
        let row = UnseenReportRow {
            name: spec.name.clone(),
            matched_client,
            distance,
            psnr_mean: psnr_acc / n as f64,
            ssim_mean: ssim_acc / n as f64,
            n_samples: n,
        };
        println!(
            "unseen {}: -> client {} (distance {:.6}), psnr {:.3} dB, ssim {:.4}",
            row.name, row.matched_client, row.distance, row.psnr_mean, row.ssim_mean
        );
        report.push_str(&format!(
            "{},{},{},{},{},{}\n",
            row.name, row.matched_client, row.distance, row.psnr_mean, row.ssim_mean, row.n_samples
        ));
        rows.push(row);
    }
    fs::write(&report_path, report).map_err(runtime_err)?;
    Ok(rows)
}

/// Verify a codebook dump on disk matches the codebook rebuilt from the
/// checkpoint; the dump round-trips codes at full precision.
fn cross_check_codebook_dump(run_dir: &Path, book: &ProtocolCodebook) -> Result<(), CliError> {
    let path = run_dir.join(CODEBOOK_DUMP);
    if !path.exists() {
        return Ok(());
    }
    let f = fs::File::open(&path).map_err(runtime_err)?;
    let parsed = read_codebook_dump(BufReader::new(f)).map_err(runtime_err)?;
    if parsed.len() != book.entries.len() {
        return Err(CliError::Runtime(format!(
            "codebook dump has {} entries, checkpoint yields {}",
            parsed.len(),
            book.entries.len()
        )));
    }
    for ((id, code), entry) in parsed.iter().zip(&book.entries) {
        if *id != entry.client_id || code != &entry.code {
            return Err(CliError::Runtime(format!(
                "codebook dump disagrees with checkpoint for client {id}"
            )));
        }
    }
    Ok(())
}

/// Rebuild and write the codebook dump from a finished run.
pub fn cmd_dump_codebook(out_root: &Path, target: Option<&Path>) -> Result<PathBuf, CliError> {
    let ws = Workspace::new(out_root);
    let run_dir = ws.run_dir();
    let (cfg, params) = load_run(&run_dir)?;
    let known: Vec<(u32, Protocol)> = cfg
        .dataset
        .clients
        .iter()
        .map(|c| Ok((c.client_id, c.resolve_protocol().map_err(config_err)?)))
        .collect::<Result<_, CliError>>()?;
    let protocols: Vec<Protocol> = known.iter().map(|&(_, p)| p).collect();
    let stats = protocol_stats(&protocols).map_err(|e| config_err(e.to_string()))?;
    let book = build_codebook(&params, &known, &stats).map_err(runtime_err)?;
    let path = target
        .map(Path::to_path_buf)
        .unwrap_or_else(|| run_dir.join(CODEBOOK_DUMP));
    let mut dump = Vec::new();
    write_codebook_dump(&mut dump, &book).map_err(runtime_err)?;
    fs::write(&path, dump).map_err(runtime_err)?;
    println!("codebook with {} entries -> {}", book.entries.len(), path.display());
    Ok(path)
}

/// Run the finite-difference verification suite; returns false when any
/// entry fails (including the deliberately injected fixture).
pub fn cmd_gradcheck(inject_bug: bool) -> bool {
    let report = run_full_suite(inject_bug);
    print!("{report}");
    let pass = report.all_pass();
    println!(
        "gradcheck: {} ({} checks)",
        if pass { "all pass" } else { "FAILURES" },
        report.entries.len()
    );
    pass
}

/// Small config exercising the full command surface quickly; used by the
/// integration tests.
pub fn tiny_test_config() -> ExperimentConfig {
    let mut cfg = crate::config::preset("desk4").expect("preset");
    cfg.dataset.image_size = 16;
    cfg.model.image_size = 16;
    cfg.model.channels = 4;
    cfg.model.report_dim = 16;
    cfg.model.hidden_dim = 8;
    cfg.model.code_dim = 4;
    cfg.model.n_heads = 2;
    cfg.model.token_count = 4;
    cfg.provider.d = 16;
    cfg.federation.rounds = 2;
    cfg.federation.batch_size = 2;
    for c in cfg.dataset.clients.iter_mut() {
        c.train_slices = 2;
        c.test_slices = 1;
        c.train_patient_seeds.truncate(1);
    }
    for u in cfg.unseen.iter_mut() {
        u.slices = 1;
    }
    cfg
}
