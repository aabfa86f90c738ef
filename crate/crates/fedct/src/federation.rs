//! Federated orchestration: server rounds, parallel client-local Adam
//! training, sample-count-weighted aggregation of the shared partition, and
//! per-client retention of personalized decoders.

use crate::autodiff::{AdError, NodeId, Tape, Tensor};
use crate::model::{
    bind_model_from_ids, bound_leaf_count, decoder_from_flat, forward, forward_eval, image_leaf,
    params_from_flat, protocol_leaf, scanning_code, scanning_code_only, AblationFlags,
    DecoderParams, DecoderSet, ModelConfig, ModelError, ModelParameters,
};
use crate::objective::{psnr, ssim, LossConfig, MetricRecord, ObjectiveError};
use crate::phantom::{ClientData, Split};
use crate::protocol::NormalizedProtocol;
use crate::report::{ReportError, ReportFeatureProvider};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FederationError {
    #[error("no snapshots to aggregate")]
    EmptySet,
    #[error("aggregation shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite loss at client {client}, round {round}: {detail}")]
    NonFiniteLoss {
        client: u32,
        round: usize,
        detail: String,
    },
    #[error("invalid federation config: {0}")]
    ConfigInvalid(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Provider(#[from] ReportError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second-moment buffers for one flat trainable list.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(trainable: &[Tensor]) -> AdamState {
        AdamState {
            t: 0,
            m: trainable.iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect(),
            v: trainable.iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect(),
        }
    }
}

/// One bias-corrected Adam update over a flat parameter list.
pub fn adam_step(cfg: &AdamConfig, state: &mut AdamState, params: &mut [Tensor], grads: &[&Tensor]) {
    assert_eq!(params.len(), grads.len());
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        for ((pv, &gv), (mv, vv)) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
        {
            *mv = cfg.beta1 * *mv + (1.0 - cfg.beta1) * gv;
            *vv = cfg.beta2 * *vv + (1.0 - cfg.beta2) * gv * gv;
            let m_hat = *mv / bc1;
            let v_hat = *vv / bc2;
            *pv -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct FederationConfig {
    /// Communication rounds N.
    pub rounds: usize,
    /// Local epochs E per round.
    pub local_epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub loss: LossConfig,
    pub flags: AblationFlags,
    /// Drop the code-orthogonality term from the training loss.
    pub disable_orth: bool,
    /// Reset per-client Adam moments at the start of every round.
    pub reset_moments: bool,
    pub seed: u64,
}

impl Default for FederationConfig {
    fn default() -> Self {
        FederationConfig {
            rounds: 30,
            local_epochs: 1,
            batch_size: 4,
            adam: AdamConfig::default(),
            loss: LossConfig::default(),
            flags: AblationFlags::default(),
            disable_orth: false,
            reset_moments: false,
            seed: 0,
        }
    }
}

impl FederationConfig {
    pub fn validate(&self) -> Result<(), FederationError> {
        let fail = |m: String| Err(FederationError::ConfigInvalid(m));
        if self.rounds == 0 {
            return fail("rounds must be >= 1".into());
        }
        if self.local_epochs == 0 {
            return fail("local_epochs must be >= 1".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be >= 1".into());
        }
        if !(self.adam.lr > 0.0) {
            return fail(format!("learning rate must be positive, got {}", self.adam.lr));
        }
        if self.loss.tau < 0.0 {
            return fail(format!("tau must be non-negative, got {}", self.loss.tau));
        }
        Ok(())
    }
}

/// One client's persistent state: its data, normalized protocol, personal
/// decoder, and Adam moments that survive across rounds.
pub struct ClientState {
    pub client_id: u32,
    pub data: ClientData,
    pub g: NormalizedProtocol,
    pub decoder: DecoderParams,
    adam: Option<AdamState>,
    features_train: Option<Vec<Vec<f64>>>,
    features_test: Option<Vec<Vec<f64>>>,
}

impl ClientState {
    pub fn new(data: ClientData, g: NormalizedProtocol, decoder: DecoderParams) -> ClientState {
        ClientState {
            client_id: data.train.client_id,
            data,
            g,
            decoder,
            adam: None,
            features_train: None,
            features_test: None,
        }
    }

    pub fn train_sample_count(&self) -> usize {
        self.data.train.samples.len()
    }

    fn ensure_features(
        &mut self,
        provider: &dyn ReportFeatureProvider,
    ) -> Result<(), FederationError> {
        if self.features_train.is_none() {
            self.features_train = Some(compute_features(&self.data.train, provider)?);
        }
        if self.features_test.is_none() {
            self.features_test = Some(compute_features(&self.data.test, provider)?);
        }
        Ok(())
    }
}

fn compute_features(
    ds: &crate::phantom::ClientDataset,
    provider: &dyn ReportFeatureProvider,
) -> Result<Vec<Vec<f64>>, FederationError> {
    ds.samples
        .iter()
        .map(|s| {
            provider
                .feature(&s.low_dose_normalized(), &s.metadata)
                .map(|f| f.values)
                .map_err(FederationError::from)
        })
        .collect()
}

/// Sample-count-weighted element-wise average of parameter snapshots.
/// Bit-identical snapshots aggregate to that exact snapshot: a convex
/// combination of equal points is the point itself, and preserving that
/// exactly keeps broadcast copies stable.
pub fn aggregate(
    snapshots: &[Vec<Tensor>],
    sample_counts: &[usize],
) -> Result<Vec<Tensor>, FederationError> {
    if snapshots.is_empty() || sample_counts.len() != snapshots.len() {
        return Err(FederationError::EmptySet);
    }
    let first = &snapshots[0];
    for snap in &snapshots[1..] {
        if snap.len() != first.len() {
            return Err(FederationError::ShapeMismatch(format!(
                "{} tensors vs {}",
                snap.len(),
                first.len()
            )));
        }
        for (a, b) in snap.iter().zip(first) {
            if a.shape() != b.shape() {
                return Err(FederationError::ShapeMismatch(format!(
                    "{:?} vs {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
        }
    }
    if sample_counts.iter().any(|&c| c == 0) {
        return Err(FederationError::ConfigInvalid(
            "aggregation weights must be positive".into(),
        ));
    }
    if snapshots[1..].iter().all(|s| s == first) {
        return Ok(first.clone());
    }
    let total: f64 = sample_counts.iter().map(|&c| c as f64).sum();
    let mut out: Vec<Tensor> = first
        .iter()
        .map(|t| Tensor::zeros(t.shape().to_vec()))
        .collect();
    for (snap, &count) in snapshots.iter().zip(sample_counts) {
        let w = count as f64 / total;
        for (acc, t) in out.iter_mut().zip(snap) {
            for (a, &x) in acc.data_mut().iter_mut().zip(t.data()) {
                *a += w * x;
            }
        }
    }
    Ok(out)
}

/// Result of one client-local training pass.
pub struct LocalTrainOutcome {
    /// Updated flat trainable list (shared partition then decoder).
    pub trainable: Vec<Tensor>,
    /// Mean total loss per epoch.
    pub epoch_losses: Vec<f64>,
}

fn map_ad_error(e: ModelError, client: u32, round: usize) -> FederationError {
    match e {
        ModelError::Autodiff(
            ad @ (AdError::NonFiniteValue { .. } | AdError::NonFiniteGradient { .. }),
        ) => FederationError::NonFiniteLoss {
            client,
            round,
            detail: ad.to_string(),
        },
        other => FederationError::Model(other),
    }
}

/// Train the shared partition plus this client's decoder for `local_epochs`
/// over seed-deterministically shuffled mini-batches, with Adam. The loss is
/// the batch-mean reconstruction MSE plus, unless disabled, the weighted
/// orthogonality penalty of this client's protocol code against the full
/// public protocol set.
#[allow(clippy::too_many_arguments)]
pub fn local_train(
    trainable_in: &[Tensor],
    client: &mut ClientState,
    model_cfg: &ModelConfig,
    fed: &FederationConfig,
    all_g: &[NormalizedProtocol],
    client_index: usize,
    round: usize,
    provider: &dyn ReportFeatureProvider,
) -> Result<LocalTrainOutcome, FederationError> {
    client.ensure_features(provider)?;
    let features = client.features_train.as_ref().expect("features cached");
    let n = client.data.train.samples.len();
    if n == 0 {
        return Err(FederationError::ConfigInvalid(format!(
            "client {} has an empty training split",
            client.client_id
        )));
    }
    let mut trainable: Vec<Tensor> = trainable_in.to_vec();
    if fed.reset_moments || client.adam.is_none() {
        client.adam = Some(AdamState::new(&trainable));
    }
    let adam = client.adam.as_mut().expect("just set");
    let orth_enabled = !fed.disable_orth && fed.loss.tau > 0.0 && all_g.len() > 1;
    let mut epoch_losses = Vec::with_capacity(fed.local_epochs);

    for epoch in 0..fed.local_epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(crate::ctphys::split_seed(
            fed.seed,
            client.client_id as u64,
            round as u64,
            epoch as u64,
        ));
        order.shuffle(&mut rng);

        let mut loss_acc = 0.0;
        let mut batches = 0usize;
        for batch in order.chunks(fed.batch_size) {
            let mut tape = Tape::new();
            let ids: Vec<NodeId> = trainable.iter().map(|t| tape.leaf(t.clone())).collect();
            let bound = bind_model_from_ids(model_cfg, &ids);

            let mut batch_loss: Option<NodeId> = None;
            for &si in batch {
                let s = &client.data.train.samples[si];
                let x = image_leaf(&mut tape, &s.low_dose_normalized());
                let g_id = protocol_leaf(&mut tape, &client.g);
                let ft = tape.leaf(Tensor::new(
                    vec![1, features[si].len()],
                    features[si].clone(),
                ));
                let pred = forward(&mut tape, &bound, x, g_id, ft, fed.flags)
                    .map_err(|e| map_ad_error(e, client.client_id, round))?;
                let reference = image_leaf(&mut tape, &s.reference_normalized());
                let err = (|| {
                    let diff = tape.sub(pred, reference)?;
                    let sq = tape.mul(diff, diff)?;
                    tape.mean_all(sq)
                })()
                .map_err(|e| map_ad_error(ModelError::Autodiff(e), client.client_id, round))?;
                batch_loss = Some(match batch_loss {
                    None => err,
                    Some(acc) => tape
                        .add(acc, err)
                        .map_err(|e| map_ad_error(ModelError::Autodiff(e), client.client_id, round))?,
                });
            }
            let mse = tape
                .scale(batch_loss.expect("non-empty batch"), 1.0 / batch.len() as f64)
                .map_err(|e| map_ad_error(ModelError::Autodiff(e), client.client_id, round))?;

            let total = if orth_enabled {
                build_orth_term(&mut tape, &bound, all_g, client_index, fed.loss.tau, mse)
                    .map_err(|e| map_ad_error(e, client.client_id, round))?
            } else {
                mse
            };

            let loss_value = tape.value(total).item();
            if !loss_value.is_finite() {
                return Err(FederationError::NonFiniteLoss {
                    client: client.client_id,
                    round,
                    detail: format!("loss = {loss_value}"),
                });
            }
            loss_acc += loss_value;
            batches += 1;

            let grads = tape
                .backward(total)
                .map_err(|e| map_ad_error(ModelError::Autodiff(e), client.client_id, round))?;
            let grad_refs: Vec<&Tensor> = ids.iter().map(|&id| grads.get(id)).collect();
            adam_step(&fed.adam, adam, &mut trainable, &grad_refs);
        }
        epoch_losses.push(loss_acc / batches as f64);
    }

    client.decoder = decoder_from_flat(model_cfg, &trainable);
    Ok(LocalTrainOutcome {
        trainable,
        epoch_losses,
    })
}

/// tau * sum over j != i of (c_i . c_j)^2, added onto the loss node. All K
/// codes are computed from the local scanning hypernetwork on the public
/// protocol set, so the gradient flows through every code.
fn build_orth_term(
    tape: &mut Tape,
    bound: &crate::model::BoundModel,
    all_g: &[NormalizedProtocol],
    client_index: usize,
    tau: f64,
    mse: NodeId,
) -> Result<NodeId, ModelError> {
    let codes: Vec<NodeId> = all_g
        .iter()
        .map(|g| {
            let gid = protocol_leaf(tape, g);
            scanning_code(tape, bound, gid)
        })
        .collect::<Result<_, _>>()?;
    let ci = codes[client_index];
    let mut orth: Option<NodeId> = None;
    for (j, &cj) in codes.iter().enumerate() {
        if j == client_index {
            continue;
        }
        let prod = tape.mul(ci, cj)?;
        let dot = tape.sum_all(prod)?;
        let sq = tape.mul(dot, dot)?;
        orth = Some(match orth {
            None => sq,
            Some(acc) => tape.add(acc, sq)?,
        });
    }
    match orth {
        None => Ok(mse),
        Some(o) => {
            let weighted = tape.scale(o, tau)?;
            Ok(tape.add(mse, weighted)?)
        }
    }
}

/// Evaluate one client on a dataset split: per-sample PSNR/SSIM of the
/// prediction against the reference, averaged. No state is mutated.
pub fn evaluate_client(
    params: &ModelParameters,
    client: &ClientState,
    split: Split,
    round: usize,
    flags: AblationFlags,
    provider: &dyn ReportFeatureProvider,
) -> Result<MetricRecord, FederationError> {
    let (ds, cached) = match split {
        Split::Train => (&client.data.train, client.features_train.as_ref()),
        Split::Test => (&client.data.test, client.features_test.as_ref()),
    };
    let computed;
    let features: &Vec<Vec<f64>> = match cached {
        Some(f) => f,
        None => {
            computed = compute_features(ds, provider)?;
            &computed
        }
    };
    let mut psnr_acc = 0.0;
    let mut ssim_acc = 0.0;
    for (s, ft) in ds.samples.iter().zip(features) {
        let pred = forward_eval(
            params,
            &s.low_dose_normalized(),
            &client.g,
            ft,
            client.client_id,
            flags,
        )?;
        let reference = s.reference_normalized();
        psnr_acc += psnr(&pred, &reference, 1.0)?;
        ssim_acc += ssim(&pred, &reference, 1.0)?;
    }
    let n = ds.samples.len();
    Ok(MetricRecord {
        client_id: client.client_id,
        round,
        split: split.name().to_string(),
        psnr_mean: psnr_acc / n as f64,
        ssim_mean: ssim_acc / n as f64,
        n_samples: n,
    })
}

/// Outcome of a federated run: final parameters with every client decoder,
/// the per-round metric log, and the protocol-code similarity history.
pub struct TrainedState {
    pub params: ModelParameters,
    pub metrics: Vec<MetricRecord>,
    /// Max over client pairs of |cos(c_i, c_j)| per round; entry 0 is the
    /// pre-training value. Empty for single-client runs.
    pub cos_history: Vec<f64>,
    pub client_order: Vec<u32>,
}

/// Maximum pairwise absolute cosine similarity between client codes.
pub fn max_pairwise_code_cosine(
    params: &ModelParameters,
    gs: &[NormalizedProtocol],
) -> Result<f64, ModelError> {
    let codes: Vec<Vec<f64>> = gs
        .iter()
        .map(|g| scanning_code_only(params, g))
        .collect::<Result<_, _>>()?;
    let mut max_cos = 0.0f64;
    for i in 0..codes.len() {
        for j in i + 1..codes.len() {
            let dot: f64 = codes[i].iter().zip(&codes[j]).map(|(a, b)| a * b).sum();
            let ni: f64 = codes[i].iter().map(|v| v * v).sum::<f64>();
            let nj: f64 = codes[j].iter().map(|v| v * v).sum::<f64>();
            let denom = (ni * nj).sqrt();
            if denom > 0.0 {
                max_cos = max_cos.max((dot / denom).abs());
            }
        }
    }
    Ok(max_cos)
}

/// Run the full federated loop: per round, broadcast the aggregated
/// partition, train every client in parallel, aggregate by training sample
/// count, and record post-aggregation test metrics. Decoders never leave
/// their clients except under the generic (shared-decoder) paradigm, where
/// the decoder is part of the aggregated partition.
pub fn run_federation(
    clients: &mut [ClientState],
    init: &ModelParameters,
    fed: &FederationConfig,
    provider: &dyn ReportFeatureProvider,
) -> Result<TrainedState, FederationError> {
    run_federation_observed(clients, init, fed, provider, |_, _| Ok(()))
}

/// [`run_federation`] with a per-round observer receiving the round number
/// and the post-aggregation parameters (all client decoders included).
pub fn run_federation_observed(
    clients: &mut [ClientState],
    init: &ModelParameters,
    fed: &FederationConfig,
    provider: &dyn ReportFeatureProvider,
    mut on_round: impl FnMut(usize, &ModelParameters) -> Result<(), FederationError>,
) -> Result<TrainedState, FederationError> {
    fed.validate()?;
    if clients.is_empty() {
        return Err(FederationError::ConfigInvalid("no clients".into()));
    }
    let model_cfg = init.cfg;
    let generic = fed.flags.generic_decoder;
    if generic != matches!(init.decoders, DecoderSet::Shared(_)) {
        return Err(FederationError::ConfigInvalid(
            "generic_decoder flag requires a shared-decoder parameter set (and vice versa)".into(),
        ));
    }

    // Partition law: the aggregated partition is exactly the encoder and the
    // two hypernetworks; decoders are the personalized partition.
    let shared_names = init.shared_tensors();
    assert!(
        shared_names
            .iter()
            .all(|(n, _)| n.starts_with("encoder.") || n.starts_with("hs.") || n.starts_with("ha.")),
        "unexpected tensor in the shared partition"
    );
    assert_eq!(shared_names.len() + 6, bound_leaf_count(&model_cfg));

    // Seed client decoders from the initial parameters.
    for c in clients.iter_mut() {
        c.decoder = init.decoders.for_client(c.client_id)?.clone();
    }

    let all_g: Vec<NormalizedProtocol> = clients.iter().map(|c| c.g).collect();
    let client_order: Vec<u32> = clients.iter().map(|c| c.client_id).collect();
    let shared_len = shared_names.len();
    drop(shared_names);

    // The server state: the aggregated flat partition. Under the generic
    // paradigm the decoder tensors ride along and are aggregated too.
    let mut server: Vec<Tensor> = init.shared_snapshot();
    if generic {
        let d = init.decoders.for_client(client_order[0])?;
        server.extend([
            d.conv1.w.clone(),
            d.conv1.b.clone(),
            d.conv2.w.clone(),
            d.conv2.b.clone(),
            d.conv3.w.clone(),
            d.conv3.b.clone(),
        ]);
    }

    // View of the aggregated partition sufficient for code evaluation; the
    // decoder choice is irrelevant there.
    let assemble = |server: &[Tensor], decoder: &DecoderParams| -> ModelParameters {
        let mut flat: Vec<Tensor> = server[..shared_len].to_vec();
        if generic {
            flat.extend(server[shared_len..].iter().cloned());
        } else {
            flat.extend(decoder_tensors(decoder));
        }
        let shared_decoder = decoder_from_flat_slice(&flat, &model_cfg);
        params_from_flat(&model_cfg, &flat, DecoderSet::Shared(shared_decoder))
    };

    let mut metrics: Vec<MetricRecord> = Vec::new();
    let mut cos_history: Vec<f64> = Vec::new();
    if clients.len() > 1 {
        let p0 = assemble(&server, &clients[0].decoder);
        cos_history.push(max_pairwise_code_cosine(&p0, &all_g)?);
    }

    let counts: Vec<usize> = clients.iter().map(|c| c.train_sample_count()).collect();

    for round in 1..=fed.rounds {
        let outcomes: Vec<Result<Vec<Tensor>, FederationError>> = clients
            .par_iter_mut()
            .enumerate()
            .map(|(idx, client)| {
                let mut trainable: Vec<Tensor> = server[..shared_len].to_vec();
                if generic {
                    trainable.extend(server[shared_len..].iter().cloned());
                } else {
                    trainable.extend(decoder_tensors(&client.decoder));
                }
                let outcome = local_train(
                    &trainable, client, &model_cfg, fed, &all_g, idx, round, provider,
                )?;
                Ok(if generic {
                    outcome.trainable
                } else {
                    outcome.trainable[..shared_len].to_vec()
                })
            })
            .collect();
        let snapshots: Vec<Vec<Tensor>> = outcomes.into_iter().collect::<Result<_, _>>()?;
        server = aggregate(&snapshots, &counts)?;

        // Post-aggregation test metrics, in client order.
        let round_records: Vec<Result<MetricRecord, FederationError>> = clients
            .par_iter()
            .map(|client| {
                let params = assemble_for_client(&server, client, &model_cfg, generic, shared_len);
                evaluate_client(&params, client, Split::Test, round, fed.flags, provider)
            })
            .collect();
        for rec in round_records {
            metrics.push(rec?);
        }

        if clients.len() > 1 {
            let p = assemble(&server, &clients[0].decoder);
            cos_history.push(max_pairwise_code_cosine(&p, &all_g)?);
        }

        let full = assemble_full(&server, clients, &model_cfg, generic, shared_len);
        on_round(round, &full)?;
    }

    let params = assemble_full(&server, clients, &model_cfg, generic, shared_len);
    Ok(TrainedState {
        params,
        metrics,
        cos_history,
        client_order,
    })
}

/// Final-form parameters: aggregated shared partition plus every client's
/// decoder (or the aggregated shared decoder).
fn assemble_full(
    server: &[Tensor],
    clients: &[ClientState],
    cfg: &ModelConfig,
    generic: bool,
    shared_len: usize,
) -> ModelParameters {
    let decoders = if generic {
        DecoderSet::Shared(decoder_from_flat_slice(server, cfg))
    } else {
        DecoderSet::PerClient(
            clients
                .iter()
                .map(|c| (c.client_id, c.decoder.clone()))
                .collect(),
        )
    };
    let mut flat = server[..shared_len].to_vec();
    // params_from_flat wants a full-length list; pad with the first decoder.
    match &decoders {
        DecoderSet::Shared(d) => flat.extend(decoder_tensors(d)),
        DecoderSet::PerClient(map) => {
            let first = map.values().next().expect("at least one client");
            flat.extend(decoder_tensors(first));
        }
    }
    params_from_flat(cfg, &flat, decoders)
}

fn decoder_tensors(d: &DecoderParams) -> [Tensor; 6] {
    [
        d.conv1.w.clone(),
        d.conv1.b.clone(),
        d.conv2.w.clone(),
        d.conv2.b.clone(),
        d.conv3.w.clone(),
        d.conv3.b.clone(),
    ]
}

fn decoder_from_flat_slice(flat: &[Tensor], cfg: &ModelConfig) -> DecoderParams {
    decoder_from_flat(cfg, flat)
}

/// Assemble full parameters for one client from the server partition and
/// the client decoder.
pub fn assemble_for_client(
    server: &[Tensor],
    client: &ClientState,
    cfg: &ModelConfig,
    generic: bool,
    shared_len: usize,
) -> ModelParameters {
    let mut flat: Vec<Tensor> = server[..shared_len].to_vec();
    let decoders = if generic {
        flat.extend(server[shared_len..].iter().cloned());
        DecoderSet::Shared(decoder_from_flat_slice(&flat, cfg))
    } else {
        flat.extend(decoder_tensors(&client.decoder));
        let mut map = std::collections::BTreeMap::new();
        map.insert(client.client_id, decoder_from_flat_slice(&flat, cfg));
        DecoderSet::PerClient(map)
    };
    params_from_flat(cfg, &flat, decoders)
}
