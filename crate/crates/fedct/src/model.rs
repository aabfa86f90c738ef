//! The reconstruction network: a shared convolutional encoder, a
//! protocol-conditioned hypernetwork emitting channel-affine modulation and a
//! protocol code, an anatomy-conditioned hypernetwork emitting a spatial
//! modulation map, and per-client convolutional decoders with a global
//! residual connection.
//!
//! All forward passes record onto an [`autodiff::Tape`]; parameters live in
//! plain tensors bound as tape leaves per pass.

use crate::autodiff::{AdError, NodeId, Tape, Tensor};
use crate::ctphys::ImageGrid;
use crate::protocol::{NormalizedProtocol, PROTOCOL_DIM};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::cell::Cell;
use std::collections::BTreeMap;
use std::io::{Read, Write};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    ConfigInvalid(String),
    #[error("no decoder for client {0}")]
    UnknownClient(u32),
    #[error(transparent)]
    Autodiff(#[from] AdError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Network dimensions. Defaults give the desk-scale model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Encoder output channels C; the conv stacks run 1 -> C/2 -> C -> C and
    /// back down C -> C -> C/2 -> 1.
    pub channels: usize,
    /// Report feature dimension d (pooled by 4 before embedding).
    pub report_dim: usize,
    /// Hidden width h of both hypernetworks.
    pub hidden_dim: usize,
    /// Protocol code dimension m.
    pub code_dim: usize,
    /// Attention heads over the tokenized hidden vector.
    pub n_heads: usize,
    /// Tokens the hidden vector is split into for attention.
    pub token_count: usize,
    /// Spatial side length of inputs and of the anatomy modulation map.
    pub image_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: 32,
            report_dim: 64,
            hidden_dim: 32,
            code_dim: 16,
            n_heads: 4,
            token_count: 8,
            image_size: 64,
        }
    }
}

impl ModelConfig {
    pub fn token_width(&self) -> usize {
        self.hidden_dim / self.token_count
    }

    pub fn head_dim(&self) -> usize {
        self.token_width() / self.n_heads
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |msg: String| Err(ModelError::ConfigInvalid(msg));
        if self.channels < 2 || self.channels % 2 != 0 {
            return fail(format!("channels must be even and >= 2, got {}", self.channels));
        }
        if self.report_dim < 8 || self.report_dim % 4 != 0 {
            return fail(format!(
                "report_dim must be >= 8 and divisible by 4, got {}",
                self.report_dim
            ));
        }
        if self.token_count == 0 || self.hidden_dim % self.token_count != 0 {
            return fail(format!(
                "hidden_dim {} must be divisible by token_count {}",
                self.hidden_dim, self.token_count
            ));
        }
        if self.n_heads == 0 || self.token_width() % self.n_heads != 0 || self.head_dim() < 1 {
            return fail(format!(
                "token width {} must split into n_heads {} with head_dim >= 1",
                self.token_width(),
                self.n_heads
            ));
        }
        if self.code_dim == 0 {
            return fail("code_dim must be positive".into());
        }
        if self.image_size < 8 {
            return fail(format!("image_size must be >= 8, got {}", self.image_size));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub w: Tensor,
    pub b: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearLayer {
    pub w: Tensor,
    pub b: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub conv1: ConvLayer,
    pub conv2: ConvLayer,
    pub conv3: ConvLayer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScanningHypernetParams {
    pub fc1: LinearLayer,
    pub fc2: LinearLayer,
    pub alpha: LinearLayer,
    pub beta: LinearLayer,
    pub code: LinearLayer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionHead {
    pub q: LinearLayer,
    pub k: LinearLayer,
    pub v: LinearLayer,
    /// Row block of the output projection for this head.
    pub o_w: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnatomyHypernetParams {
    pub embed: LinearLayer,
    pub heads: Vec<AttentionHead>,
    pub attn_out_b: Tensor,
    pub out: LinearLayer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams {
    pub conv1: ConvLayer,
    pub conv2: ConvLayer,
    pub conv3: ConvLayer,
}

/// Decoder ownership: one per client (personalized paradigm) or a single
/// shared decoder (generic paradigm).
#[derive(Debug, Clone, PartialEq)]
pub enum DecoderSet {
    PerClient(BTreeMap<u32, DecoderParams>),
    Shared(DecoderParams),
}

impl DecoderSet {
    pub fn for_client(&self, client_id: u32) -> Result<&DecoderParams, ModelError> {
        match self {
            DecoderSet::Shared(d) => Ok(d),
            DecoderSet::PerClient(map) => {
                map.get(&client_id).ok_or(ModelError::UnknownClient(client_id))
            }
        }
    }

    pub fn for_client_mut(&mut self, client_id: u32) -> Result<&mut DecoderParams, ModelError> {
        match self {
            DecoderSet::Shared(d) => Ok(d),
            DecoderSet::PerClient(map) => {
                map.get_mut(&client_id).ok_or(ModelError::UnknownClient(client_id))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParameters {
    pub cfg: ModelConfig,
    pub encoder: EncoderParams,
    pub hs: ScanningHypernetParams,
    pub ha: AnatomyHypernetParams,
    pub decoders: DecoderSet,
}

/// Ablation switches for the forward pass.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationFlags {
    /// Skip the protocol-conditioned channel-affine modulation.
    pub disable_scanning: bool,
    /// Skip the anatomy-conditioned spatial modulation.
    pub disable_anatomy: bool,
    /// Route every client through one shared decoder.
    pub generic_decoder: bool,
}

struct HeInit {
    rng: ChaCha8Rng,
}

impl HeInit {
    fn conv(&mut self, c_out: usize, c_in: usize) -> ConvLayer {
        let fan_in = c_in * 9;
        ConvLayer {
            w: self.uniform(vec![c_out, c_in, 3, 3], fan_in),
            b: Tensor::zeros(vec![c_out]),
        }
    }

    fn linear(&mut self, n_in: usize, n_out: usize) -> LinearLayer {
        LinearLayer {
            w: self.uniform(vec![n_in, n_out], n_in),
            b: Tensor::zeros(vec![n_out]),
        }
    }

    fn zero_linear(&mut self, n_in: usize, n_out: usize) -> LinearLayer {
        LinearLayer {
            w: Tensor::zeros(vec![n_in, n_out]),
            b: Tensor::zeros(vec![n_out]),
        }
    }

    fn uniform(&mut self, shape: Vec<usize>, fan_in: usize) -> Tensor {
        let bound = (6.0 / fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| (self.rng.random::<f64>() * 2.0 - 1.0) * bound)
            .collect();
        Tensor::new(shape, data)
    }
}

impl ModelParameters {
    /// Production initialization: He-style uniform for the trunk layers,
    /// deterministic per seed, with the modulation heads, anatomy output
    /// layer, and final decoder convolution zeroed. Together with the unit
    /// offsets on alpha and the anatomy map this starts the whole network at
    /// the exact identity, so round 1 trains a residual correction instead
    /// of recovering the input from scratch. The protocol code head stays
    /// He-initialized: a zero code head would freeze every code at the zero
    /// vector (its only gradient source is the pairwise-dot penalty) and
    /// leave the codebook degenerate.
    ///
    /// All client decoders start as identical copies.
    pub fn init(cfg: &ModelConfig, seed: u64, client_ids: &[u32]) -> Result<Self, ModelError> {
        Self::init_impl(cfg, seed, client_ids, true)
    }

    /// Alias of [`ModelParameters::init`] making the identity start explicit
    /// at call sites that rely on it.
    pub fn init_identity(
        cfg: &ModelConfig,
        seed: u64,
        client_ids: &[u32],
    ) -> Result<Self, ModelError> {
        Self::init_impl(cfg, seed, client_ids, true)
    }

    /// Fully random He-style initialization including every head. Gradient
    /// verification uses this so no path carries a structurally zero signal.
    pub fn init_unstructured(
        cfg: &ModelConfig,
        seed: u64,
        client_ids: &[u32],
    ) -> Result<Self, ModelError> {
        Self::init_impl(cfg, seed, client_ids, false)
    }

    fn init_impl(
        cfg: &ModelConfig,
        seed: u64,
        client_ids: &[u32],
        zero_heads: bool,
    ) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut init = HeInit {
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let c = cfg.channels;
        let h = cfg.hidden_dim;
        let tw = cfg.token_width();
        let hd = cfg.head_dim();

        let encoder = EncoderParams {
            conv1: init.conv(c / 2, 1),
            conv2: init.conv(c, c / 2),
            conv3: init.conv(c, c),
        };
        let hs = ScanningHypernetParams {
            fc1: init.linear(PROTOCOL_DIM, h),
            fc2: init.linear(h, h),
            alpha: if zero_heads {
                init.zero_linear(h, c)
            } else {
                init.linear(h, c)
            },
            beta: if zero_heads {
                init.zero_linear(h, c)
            } else {
                init.linear(h, c)
            },
            code: init.linear(h, cfg.code_dim),
        };
        let heads = (0..cfg.n_heads)
            .map(|_| AttentionHead {
                q: init.linear(tw, hd),
                k: init.linear(tw, hd),
                v: init.linear(tw, hd),
                o_w: init.uniform(vec![hd, tw], hd * cfg.n_heads),
            })
            .collect();
        let ha = AnatomyHypernetParams {
            embed: init.linear(cfg.report_dim / 4, h),
            heads,
            attn_out_b: Tensor::zeros(vec![1, tw]),
            out: if zero_heads {
                init.zero_linear(h, cfg.image_size * cfg.image_size)
            } else {
                init.linear(h, cfg.image_size * cfg.image_size)
            },
        };
        let decoder = DecoderParams {
            conv1: init.conv(c, c),
            conv2: init.conv(c / 2, c),
            conv3: if zero_heads {
                ConvLayer {
                    w: Tensor::zeros(vec![1, c / 2, 3, 3]),
                    b: Tensor::zeros(vec![1]),
                }
            } else {
                init.conv(1, c / 2)
            },
        };
        let decoders = if client_ids.is_empty() {
            DecoderSet::Shared(decoder)
        } else {
            DecoderSet::PerClient(
                client_ids.iter().map(|&id| (id, decoder.clone())).collect(),
            )
        };
        Ok(ModelParameters {
            cfg: *cfg,
            encoder,
            hs,
            ha,
            decoders,
        })
    }

    /// Convert per-client decoders into one shared decoder (generic
    /// paradigm); the first client's copy seeds the shared decoder.
    pub fn into_shared_decoder(mut self) -> Self {
        if let DecoderSet::PerClient(map) = &self.decoders {
            let first = map.values().next().expect("at least one decoder").clone();
            self.decoders = DecoderSet::Shared(first);
        }
        self
    }

    /// Stable (name, tensor) enumeration of the shared partition: encoder and
    /// both hypernetworks.
    pub fn shared_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = Vec::new();
        let e = &self.encoder;
        for (name, layer) in [
            ("encoder.conv1", &e.conv1),
            ("encoder.conv2", &e.conv2),
            ("encoder.conv3", &e.conv3),
        ] {
            out.push((format!("{name}.w"), &layer.w));
            out.push((format!("{name}.b"), &layer.b));
        }
        for (name, layer) in [
            ("hs.fc1", &self.hs.fc1),
            ("hs.fc2", &self.hs.fc2),
            ("hs.alpha", &self.hs.alpha),
            ("hs.beta", &self.hs.beta),
            ("hs.code", &self.hs.code),
        ] {
            out.push((format!("{name}.w"), &layer.w));
            out.push((format!("{name}.b"), &layer.b));
        }
        out.push(("ha.embed.w".into(), &self.ha.embed.w));
        out.push(("ha.embed.b".into(), &self.ha.embed.b));
        for (i, head) in self.ha.heads.iter().enumerate() {
            for (tag, layer) in [("q", &head.q), ("k", &head.k), ("v", &head.v)] {
                out.push((format!("ha.attn.h{i}.{tag}.w"), &layer.w));
                out.push((format!("ha.attn.h{i}.{tag}.b"), &layer.b));
            }
            out.push((format!("ha.attn.h{i}.o.w"), &head.o_w));
        }
        out.push(("ha.attn.o.b".into(), &self.ha.attn_out_b));
        out.push(("ha.out.w".into(), &self.ha.out.w));
        out.push(("ha.out.b".into(), &self.ha.out.b));
        out
    }

    pub fn shared_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        let e = &mut self.encoder;
        for layer in [&mut e.conv1, &mut e.conv2, &mut e.conv3] {
            out.push(&mut layer.w);
            out.push(&mut layer.b);
        }
        for layer in [
            &mut self.hs.fc1,
            &mut self.hs.fc2,
            &mut self.hs.alpha,
            &mut self.hs.beta,
            &mut self.hs.code,
        ] {
            out.push(&mut layer.w);
            out.push(&mut layer.b);
        }
        out.push(&mut self.ha.embed.w);
        out.push(&mut self.ha.embed.b);
        for head in self.ha.heads.iter_mut() {
            for layer in [&mut head.q, &mut head.k, &mut head.v] {
                out.push(&mut layer.w);
                out.push(&mut layer.b);
            }
            out.push(&mut head.o_w);
        }
        out.push(&mut self.ha.attn_out_b);
        out.push(&mut self.ha.out.w);
        out.push(&mut self.ha.out.b);
        out
    }

    /// Snapshot of the shared partition values, in enumeration order.
    pub fn shared_snapshot(&self) -> Vec<Tensor> {
        self.shared_tensors().into_iter().map(|(_, t)| t.clone()).collect()
    }

    /// Overwrite the shared partition from a snapshot.
    pub fn load_shared(&mut self, snapshot: &[Tensor]) {
        let targets = self.shared_tensors_mut();
        assert_eq!(targets.len(), snapshot.len(), "shared partition size mismatch");
        for (dst, src) in targets.into_iter().zip(snapshot) {
            assert_eq!(dst.shape(), src.shape(), "shared tensor shape mismatch");
            *dst = src.clone();
        }
    }

    fn decoder_tensor_names(prefix: &str) -> [String; 6] {
        [
            format!("decoder.{prefix}.conv1.w"),
            format!("decoder.{prefix}.conv1.b"),
            format!("decoder.{prefix}.conv2.w"),
            format!("decoder.{prefix}.conv2.b"),
            format!("decoder.{prefix}.conv3.w"),
            format!("decoder.{prefix}.conv3.b"),
        ]
    }

    /// Every tensor in the model, shared partition first, then decoders in
    /// client order (or the shared decoder).
    pub fn all_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.shared_tensors();
        match &self.decoders {
            DecoderSet::Shared(d) => {
                let names = Self::decoder_tensor_names("shared");
                for (name, t) in names.into_iter().zip(decoder_tensor_list(d)) {
                    out.push((name, t));
                }
            }
            DecoderSet::PerClient(map) => {
                for (id, d) in map {
                    let names = Self::decoder_tensor_names(&id.to_string());
                    for (name, t) in names.into_iter().zip(decoder_tensor_list(d)) {
                        out.push((name, t));
                    }
                }
            }
        }
        out
    }
}

fn decoder_tensor_list(d: &DecoderParams) -> [&Tensor; 6] {
    [&d.conv1.w, &d.conv1.b, &d.conv2.w, &d.conv2.b, &d.conv3.w, &d.conv3.b]
}

pub fn decoder_tensor_list_mut(d: &mut DecoderParams) -> [&mut Tensor; 6] {
    [
        &mut d.conv1.w,
        &mut d.conv1.b,
        &mut d.conv2.w,
        &mut d.conv2.b,
        &mut d.conv3.w,
        &mut d.conv3.b,
    ]
}

thread_local! {
    static MODULATION_HEAD_EVALS: Cell<u64> = const { Cell::new(0) };
}

/// Number of times the scanning alpha/beta heads were evaluated on this
/// thread. Instrumentation for tests that must prove the modulation heads
/// never run for an unseen protocol.
pub fn modulation_head_eval_count() -> u64 {
    MODULATION_HEAD_EVALS.with(|c| c.get())
}

#[derive(Clone, Copy)]
pub struct BoundConv {
    w: NodeId,
    b: NodeId,
}

#[derive(Clone, Copy)]
pub struct BoundLinear {
    w: NodeId,
    b: NodeId,
}

pub struct BoundHead {
    q: BoundLinear,
    k: BoundLinear,
    v: BoundLinear,
    o_w: NodeId,
}

/// Tape bindings for the shared partition plus one decoder.
pub struct BoundModel {
    pub cfg: ModelConfig,
    enc: [BoundConv; 3],
    hs_fc1: BoundLinear,
    hs_fc2: BoundLinear,
    hs_alpha: BoundLinear,
    hs_beta: BoundLinear,
    hs_code: BoundLinear,
    ha_embed: BoundLinear,
    ha_heads: Vec<BoundHead>,
    ha_attn_out_b: NodeId,
    ha_out: BoundLinear,
    dec: [BoundConv; 3],
    /// Leaf ids in the order of [`ModelParameters::shared_tensors`] followed
    /// by the six decoder tensors.
    pub leaf_ids: Vec<NodeId>,
}

/// Number of leaf tensors a bound model holds: the shared partition plus the
/// six decoder tensors.
pub fn bound_leaf_count(cfg: &ModelConfig) -> usize {
    6 + 10 + 2 + 7 * cfg.n_heads + 1 + 2 + 6
}

/// Assemble a [`BoundModel`] from leaf ids already registered on the tape,
/// in the order of [`ModelParameters::shared_tensors`] followed by the six
/// decoder tensors (conv1/2/3 weight then bias).
pub fn bind_model_from_ids(cfg: &ModelConfig, ids: &[NodeId]) -> BoundModel {
    assert_eq!(ids.len(), bound_leaf_count(cfg), "leaf id count mismatch");
    let mut cursor = 0usize;
    macro_rules! next {
        () => {{
            let id = ids[cursor];
            cursor += 1;
            id
        }};
    }
    macro_rules! conv {
        () => {
            BoundConv { w: next!(), b: next!() }
        };
    }
    macro_rules! linear {
        () => {
            BoundLinear { w: next!(), b: next!() }
        };
    }
    let enc = [conv!(), conv!(), conv!()];
    let hs_fc1 = linear!();
    let hs_fc2 = linear!();
    let hs_alpha = linear!();
    let hs_beta = linear!();
    let hs_code = linear!();
    let ha_embed = linear!();
    let mut ha_heads = Vec::with_capacity(cfg.n_heads);
    for _ in 0..cfg.n_heads {
        let q = linear!();
        let k = linear!();
        let v = linear!();
        let o_w = next!();
        ha_heads.push(BoundHead { q, k, v, o_w });
    }
    let ha_attn_out_b = next!();
    let ha_out = linear!();
    let dec = [conv!(), conv!(), conv!()];
    assert_eq!(cursor, ids.len());
    BoundModel {
        cfg: *cfg,
        enc,
        hs_fc1,
        hs_fc2,
        hs_alpha,
        hs_beta,
        hs_code,
        ha_embed,
        ha_heads,
        ha_attn_out_b,
        ha_out,
        dec,
        leaf_ids: ids.to_vec(),
    }
}

/// Rebuild structured parameters from a flat tensor list in the binding
/// order: shared partition, then the six tensors of one decoder.
pub fn params_from_flat(
    cfg: &ModelConfig,
    flat: &[Tensor],
    decoders: DecoderSet,
) -> ModelParameters {
    assert_eq!(flat.len(), bound_leaf_count(cfg));
    let mut cursor = 0usize;
    macro_rules! next {
        () => {{
            let t = flat[cursor].clone();
            cursor += 1;
            t
        }};
    }
    macro_rules! conv {
        () => {
            ConvLayer { w: next!(), b: next!() }
        };
    }
    macro_rules! linear {
        () => {
            LinearLayer { w: next!(), b: next!() }
        };
    }
    let encoder = EncoderParams {
        conv1: conv!(),
        conv2: conv!(),
        conv3: conv!(),
    };
    let hs = ScanningHypernetParams {
        fc1: linear!(),
        fc2: linear!(),
        alpha: linear!(),
        beta: linear!(),
        code: linear!(),
    };
    let embed = linear!();
    let mut heads = Vec::with_capacity(cfg.n_heads);
    for _ in 0..cfg.n_heads {
        heads.push(AttentionHead {
            q: linear!(),
            k: linear!(),
            v: linear!(),
            o_w: next!(),
        });
    }
    let attn_out_b = next!();
    let out = linear!();
    debug_assert_eq!(cursor, flat.len() - 6);
    let ha = AnatomyHypernetParams {
        embed,
        heads,
        attn_out_b,
        out,
    };
    // The trailing six decoder tensors are the caller's responsibility; the
    // provided DecoderSet is used as-is.
    ModelParameters {
        cfg: *cfg,
        encoder,
        hs,
        ha,
        decoders,
    }
}

/// Split a flat trainable list back into (shared partition, decoder).
pub fn decoder_from_flat(cfg: &ModelConfig, flat: &[Tensor]) -> DecoderParams {
    let base = bound_leaf_count(cfg) - 6;
    DecoderParams {
        conv1: ConvLayer { w: flat[base].clone(), b: flat[base + 1].clone() },
        conv2: ConvLayer { w: flat[base + 2].clone(), b: flat[base + 3].clone() },
        conv3: ConvLayer { w: flat[base + 4].clone(), b: flat[base + 5].clone() },
    }
}

/// The shared partition plus one decoder as owned tensors, in binding order.
pub fn model_leaf_tensors(
    params: &ModelParameters,
    client_id: u32,
) -> Result<Vec<(String, Tensor)>, ModelError> {
    let mut out: Vec<(String, Tensor)> = params
        .shared_tensors()
        .into_iter()
        .map(|(n, t)| (n, t.clone()))
        .collect();
    let d = params.decoders.for_client(client_id)?;
    for (suffix, t) in [
        ("conv1.w", &d.conv1.w),
        ("conv1.b", &d.conv1.b),
        ("conv2.w", &d.conv2.w),
        ("conv2.b", &d.conv2.b),
        ("conv3.w", &d.conv3.w),
        ("conv3.b", &d.conv3.b),
    ] {
        out.push((format!("decoder.{suffix}"), t.clone()));
    }
    Ok(out)
}

/// Register the shared partition and the selected client's decoder as tape
/// leaves.
pub fn bind_model(
    tape: &mut Tape,
    params: &ModelParameters,
    client_id: u32,
) -> Result<BoundModel, ModelError> {
    let leaves = model_leaf_tensors(params, client_id)?;
    let ids: Vec<NodeId> = leaves.into_iter().map(|(_, t)| tape.leaf(t)).collect();
    Ok(bind_model_from_ids(&params.cfg, &ids))
}

/// Register a normalized protocol vector as a (1 x 7) input leaf.
pub fn protocol_leaf(tape: &mut Tape, g: &NormalizedProtocol) -> NodeId {
    tape.leaf(Tensor::new(vec![1, PROTOCOL_DIM], g.values.to_vec()))
}

/// Register a normalized image as a (1 x S x S) input leaf.
pub fn image_leaf(tape: &mut Tape, img: &ImageGrid) -> NodeId {
    tape.leaf(Tensor::new(
        vec![1, img.size(), img.size()],
        img.data().to_vec(),
    ))
}

/// Three conv+relu stages preserving spatial size.
pub fn encode(tape: &mut Tape, m: &BoundModel, x: NodeId) -> Result<NodeId, ModelError> {
    let mut cur = x;
    for conv in &m.enc {
        cur = tape.conv2d(cur, conv.w, conv.b)?;
        cur = tape.relu(cur)?;
    }
    Ok(cur)
}

fn hs_trunk(tape: &mut Tape, m: &BoundModel, g: NodeId) -> Result<NodeId, ModelError> {
    let t1 = tape.linear(g, m.hs_fc1.w, m.hs_fc1.b)?;
    let t1 = tape.relu(t1)?;
    let t2 = tape.linear(t1, m.hs_fc2.w, m.hs_fc2.b)?;
    Ok(tape.relu(t2)?)
}

/// Channel modulation vectors from the protocol: alpha = 1 + head_a(trunk),
/// beta = head_b(trunk). The unit offset makes zero-initialized heads start
/// at the identity modulation.
pub fn scanning_modulation(
    tape: &mut Tape,
    m: &BoundModel,
    g: NodeId,
) -> Result<(NodeId, NodeId), ModelError> {
    MODULATION_HEAD_EVALS.with(|c| c.set(c.get() + 1));
    let trunk = hs_trunk(tape, m, g)?;
    let a_raw = tape.linear(trunk, m.hs_alpha.w, m.hs_alpha.b)?;
    let ones = tape.leaf(Tensor::new(vec![1, m.cfg.channels], vec![1.0; m.cfg.channels]));
    let alpha_row = tape.add(a_raw, ones)?;
    let alpha = tape.reshape(alpha_row, vec![m.cfg.channels])?;
    let beta_row = tape.linear(trunk, m.hs_beta.w, m.hs_beta.b)?;
    let beta = tape.reshape(beta_row, vec![m.cfg.channels])?;
    Ok((alpha, beta))
}

/// Protocol code head only; the modulation heads are not evaluated.
pub fn scanning_code(tape: &mut Tape, m: &BoundModel, g: NodeId) -> Result<NodeId, ModelError> {
    let trunk = hs_trunk(tape, m, g)?;
    Ok(tape.linear(trunk, m.hs_code.w, m.hs_code.b)?)
}

/// Multi-head self-attention over (token_count x token_width) tokens.
/// Head outputs enter the output projection as per-head row blocks, which is
/// algebraically the usual concat-then-project form.
pub fn attention_tokens(
    tape: &mut Tape,
    m: &BoundModel,
    tokens: NodeId,
) -> Result<NodeId, ModelError> {
    let t = m.cfg.token_count;
    let hd = m.cfg.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();
    let mut combined: Option<NodeId> = None;
    for head in &m.ha_heads {
        let q = matmul_bias(tape, tokens, head.q, t)?;
        let k = matmul_bias(tape, tokens, head.k, t)?;
        let v = matmul_bias(tape, tokens, head.v, t)?;
        let kt = tape.transpose(k)?;
        let scores = tape.matmul(q, kt)?;
        let scores = tape.scale(scores, scale)?;
        let attn = tape.softmax(scores)?;
        let mixed = tape.matmul(attn, v)?;
        let projected = tape.matmul(mixed, head.o_w)?;
        combined = Some(match combined {
            None => projected,
            Some(acc) => tape.add(acc, projected)?,
        });
    }
    let summed = combined.expect("at least one attention head");
    Ok(tape.add(summed, m.ha_attn_out_b)?)
}

/// x (T x n) * w (n x m) + b (1 x m) broadcast over rows.
fn matmul_bias(
    tape: &mut Tape,
    x: NodeId,
    layer: BoundLinear,
    _rows: usize,
) -> Result<NodeId, ModelError> {
    let y = tape.matmul(x, layer.w)?;
    let b_cols = tape.value(layer.b).len();
    let b2 = tape.reshape(layer.b, vec![1, b_cols])?;
    Ok(tape.add(y, b2)?)
}

/// Spatial modulation map from the report feature: pool by 4, embed, run
/// tokenized self-attention, then project to image_size^2 with a unit
/// offset and reshape to (1 x S x S).
pub fn anatomy_map(tape: &mut Tape, m: &BoundModel, ft: NodeId) -> Result<NodeId, ModelError> {
    let s = m.cfg.image_size;
    let pooled = tape.avgpool1d(ft, 4)?;
    let embedded = tape.linear(pooled, m.ha_embed.w, m.ha_embed.b)?;
    let tokens = tape.reshape(embedded, vec![m.cfg.token_count, m.cfg.token_width()])?;
    let attended = attention_tokens(tape, m, tokens)?;
    let flat = tape.reshape(attended, vec![1, m.cfg.hidden_dim])?;
    let raw = tape.linear(flat, m.ha_out.w, m.ha_out.b)?;
    let ones = tape.leaf(Tensor::new(vec![1, s * s], vec![1.0; s * s]));
    let offset = tape.add(raw, ones)?;
    Ok(tape.reshape(offset, vec![1, s, s])?)
}

/// Dual-level modulation: spatial map broadcast over channels, then the
/// channel-affine protocol modulation.
pub fn modulate(
    tape: &mut Tape,
    fx: NodeId,
    fan: NodeId,
    alpha: NodeId,
    beta: NodeId,
) -> Result<NodeId, ModelError> {
    let fana = tape.mul(fx, fan)?;
    Ok(tape.channel_affine(fana, alpha, beta)?)
}

/// Decoder conv stack with a global residual: conv-relu, conv-relu, conv,
/// plus the network input.
pub fn decode(
    tape: &mut Tape,
    m: &BoundModel,
    fper: NodeId,
    x_input: NodeId,
) -> Result<NodeId, ModelError> {
    let d1 = tape.conv2d(fper, m.dec[0].w, m.dec[0].b)?;
    let d1 = tape.relu(d1)?;
    let d2 = tape.conv2d(d1, m.dec[1].w, m.dec[1].b)?;
    let d2 = tape.relu(d2)?;
    let d3 = tape.conv2d(d2, m.dec[2].w, m.dec[2].b)?;
    Ok(tape.add(d3, x_input)?)
}

/// Full forward pass. With `disable_scanning` the channel-affine stage is
/// skipped (identity modulation); with `disable_anatomy` the spatial map is
/// skipped. The decoder was selected when the model was bound.
pub fn forward(
    tape: &mut Tape,
    m: &BoundModel,
    x: NodeId,
    g: NodeId,
    ft: NodeId,
    flags: AblationFlags,
) -> Result<NodeId, ModelError> {
    let fx = encode(tape, m, x)?;
    let fana = if flags.disable_anatomy {
        fx
    } else {
        let fan = anatomy_map(tape, m, ft)?;
        tape.mul(fx, fan)?
    };
    let fper = if flags.disable_scanning {
        fana
    } else {
        let (alpha, beta) = scanning_modulation(tape, m, g)?;
        tape.channel_affine(fana, alpha, beta)?
    };
    decode(tape, m, fper, x)
}

/// Forward pass with externally supplied channel-modulation vectors instead
/// of the scanning hypernetwork output; the anatomy path runs normally.
/// Used when routing an unseen protocol through a stored personalization.
pub fn forward_with_modulation(
    tape: &mut Tape,
    m: &BoundModel,
    x: NodeId,
    ft: NodeId,
    alpha: &[f64],
    beta: &[f64],
    flags: AblationFlags,
) -> Result<NodeId, ModelError> {
    let fx = encode(tape, m, x)?;
    let fana = if flags.disable_anatomy {
        fx
    } else {
        let fan = anatomy_map(tape, m, ft)?;
        tape.mul(fx, fan)?
    };
    let fper = if flags.disable_scanning {
        fana
    } else {
        let a = tape.leaf(Tensor::new(vec![alpha.len()], alpha.to_vec()));
        let b = tape.leaf(Tensor::new(vec![beta.len()], beta.to_vec()));
        tape.channel_affine(fana, a, b)?
    };
    decode(tape, m, fper, x)
}

/// Tape-free variant of [`forward_with_modulation`].
pub fn forward_eval_with_modulation(
    params: &ModelParameters,
    x: &ImageGrid,
    ft: &[f64],
    alpha: &[f64],
    beta: &[f64],
    client_id: u32,
    flags: AblationFlags,
) -> Result<ImageGrid, ModelError> {
    let mut tape = Tape::new();
    let m = bind_model(&mut tape, params, client_id)?;
    let x_id = image_leaf(&mut tape, x);
    let ft_id = tape.leaf(Tensor::new(vec![1, ft.len()], ft.to_vec()));
    let pred = forward_with_modulation(&mut tape, &m, x_id, ft_id, alpha, beta, flags)?;
    Ok(ImageGrid::new(
        x.size(),
        x.pixel_len(),
        tape.value(pred).data().to_vec(),
    ))
}

/// Tape-free convenience: run one forward pass and return the prediction as
/// an image (same pixel length as the input).
pub fn forward_eval(
    params: &ModelParameters,
    x: &ImageGrid,
    g: &NormalizedProtocol,
    ft: &[f64],
    client_id: u32,
    flags: AblationFlags,
) -> Result<ImageGrid, ModelError> {
    let mut tape = Tape::new();
    let m = bind_model(&mut tape, params, client_id)?;
    let x_id = image_leaf(&mut tape, x);
    let g_id = protocol_leaf(&mut tape, g);
    let ft_id = tape.leaf(Tensor::new(vec![1, ft.len()], ft.to_vec()));
    let pred = forward(&mut tape, &m, x_id, g_id, ft_id, flags)?;
    Ok(ImageGrid::new(
        x.size(),
        x.pixel_len(),
        tape.value(pred).data().to_vec(),
    ))
}

/// Evaluate the scanning hypernetwork outputs (alpha, beta, code) for one
/// normalized protocol, outside any training tape.
pub fn scanning_outputs(
    params: &ModelParameters,
    g: &NormalizedProtocol,
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>), ModelError> {
    let mut tape = Tape::new();
    let m = bind_any_decoder(&mut tape, params)?;
    let g_id = protocol_leaf(&mut tape, g);
    let (alpha, beta) = scanning_modulation(&mut tape, &m, g_id)?;
    let code = scanning_code(&mut tape, &m, g_id)?;
    Ok((
        tape.value(alpha).data().to_vec(),
        tape.value(beta).data().to_vec(),
        tape.value(code).data().to_vec(),
    ))
}

/// Evaluate only the protocol code for one normalized protocol; the
/// modulation heads are never touched.
pub fn scanning_code_only(
    params: &ModelParameters,
    g: &NormalizedProtocol,
) -> Result<Vec<f64>, ModelError> {
    let mut tape = Tape::new();
    let m = bind_any_decoder(&mut tape, params)?;
    let g_id = protocol_leaf(&mut tape, g);
    let code = scanning_code(&mut tape, &m, g_id)?;
    Ok(tape.value(code).data().to_vec())
}

fn bind_any_decoder(tape: &mut Tape, params: &ModelParameters) -> Result<BoundModel, ModelError> {
    let client = match &params.decoders {
        DecoderSet::Shared(_) => 0,
        DecoderSet::PerClient(map) => *map.keys().next().expect("non-empty decoder map"),
    };
    bind_model(tape, params, client)
}

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"PFM1";

/// Serialize parameters: magic, config block, then named shape-tagged f64
/// blobs in enumeration order.
pub fn write_checkpoint<W: Write>(mut w: W, params: &ModelParameters) -> Result<(), ModelError> {
    w.write_all(&CHECKPOINT_MAGIC)?;
    let cfg = &params.cfg;
    for v in [
        cfg.channels,
        cfg.report_dim,
        cfg.hidden_dim,
        cfg.code_dim,
        cfg.n_heads,
        cfg.token_count,
        cfg.image_size,
    ] {
        w.write_all(&(v as u32).to_le_bytes())?;
    }
    let shared_mode = matches!(params.decoders, DecoderSet::Shared(_));
    w.write_all(&[shared_mode as u8])?;
    let tensors = params.all_tensors();
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, ModelError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Load a checkpoint written by [`write_checkpoint`].
pub fn read_checkpoint<R: Read>(mut r: R) -> Result<ModelParameters, ModelError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(ModelError::Checkpoint(format!(
            "bad magic {magic:?}, expected {CHECKPOINT_MAGIC:?}"
        )));
    }
    let cfg = ModelConfig {
        channels: read_u32(&mut r)? as usize,
        report_dim: read_u32(&mut r)? as usize,
        hidden_dim: read_u32(&mut r)? as usize,
        code_dim: read_u32(&mut r)? as usize,
        n_heads: read_u32(&mut r)? as usize,
        token_count: read_u32(&mut r)? as usize,
        image_size: read_u32(&mut r)? as usize,
    };
    let mut mode = [0u8; 1];
    r.read_exact(&mut mode)?;
    let blob_count = read_u32(&mut r)? as usize;
    let mut blobs: BTreeMap<String, Tensor> = BTreeMap::new();
    let mut order: Vec<String> = Vec::new();
    for _ in 0..blob_count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| ModelError::Checkpoint("non-utf8 tensor name".into()))?;
        let ndim = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u32(&mut r)? as usize);
        }
        let n: usize = shape.iter().product();
        let mut buf = vec![0u8; n * 8];
        r.read_exact(&mut buf)?;
        let data = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        order.push(name.clone());
        blobs.insert(name, Tensor::new(shape, data));
    }

    // Rebuild the structured parameters from the named blobs.
    let mut take = |name: &str| -> Result<Tensor, ModelError> {
        blobs
            .remove(name)
            .ok_or_else(|| ModelError::Checkpoint(format!("missing tensor {name}")))
    };
    let conv = |take: &mut dyn FnMut(&str) -> Result<Tensor, ModelError>,
                prefix: &str|
     -> Result<ConvLayer, ModelError> {
        Ok(ConvLayer {
            w: take(&format!("{prefix}.w"))?,
            b: take(&format!("{prefix}.b"))?,
        })
    };
    let linear = |take: &mut dyn FnMut(&str) -> Result<Tensor, ModelError>,
                  prefix: &str|
     -> Result<LinearLayer, ModelError> {
        Ok(LinearLayer {
            w: take(&format!("{prefix}.w"))?,
            b: take(&format!("{prefix}.b"))?,
        })
    };

    let encoder = EncoderParams {
        conv1: conv(&mut take, "encoder.conv1")?,
        conv2: conv(&mut take, "encoder.conv2")?,
        conv3: conv(&mut take, "encoder.conv3")?,
    };
    let hs = ScanningHypernetParams {
        fc1: linear(&mut take, "hs.fc1")?,
        fc2: linear(&mut take, "hs.fc2")?,
        alpha: linear(&mut take, "hs.alpha")?,
        beta: linear(&mut take, "hs.beta")?,
        code: linear(&mut take, "hs.code")?,
    };
    let mut heads = Vec::with_capacity(cfg.n_heads);
    for i in 0..cfg.n_heads {
        heads.push(AttentionHead {
            q: linear(&mut take, &format!("ha.attn.h{i}.q"))?,
            k: linear(&mut take, &format!("ha.attn.h{i}.k"))?,
            v: linear(&mut take, &format!("ha.attn.h{i}.v"))?,
            o_w: take(&format!("ha.attn.h{i}.o.w"))?,
        });
    }
    let ha = AnatomyHypernetParams {
        embed: linear(&mut take, "ha.embed")?,
        heads,
        attn_out_b: take("ha.attn.o.b")?,
        out: linear(&mut take, "ha.out")?,
    };

    let decoders = if mode[0] == 1 {
        DecoderSet::Shared(DecoderParams {
            conv1: conv(&mut take, "decoder.shared.conv1")?,
            conv2: conv(&mut take, "decoder.shared.conv2")?,
            conv3: conv(&mut take, "decoder.shared.conv3")?,
        })
    } else {
        let mut ids: Vec<u32> = Vec::new();
        for name in &order {
            if let Some(rest) = name.strip_prefix("decoder.") {
                if let Some(id_str) = rest.split('.').next() {
                    if let Ok(id) = id_str.parse::<u32>() {
                        if !ids.contains(&id) {
                            ids.push(id);
                        }
                    }
                }
            }
        }
        let mut map = BTreeMap::new();
        for id in ids {
            map.insert(
                id,
                DecoderParams {
                    conv1: conv(&mut take, &format!("decoder.{id}.conv1"))?,
                    conv2: conv(&mut take, &format!("decoder.{id}.conv2"))?,
                    conv3: conv(&mut take, &format!("decoder.{id}.conv3"))?,
                },
            );
        }
        DecoderSet::PerClient(map)
    };
    if !blobs.is_empty() {
        return Err(ModelError::Checkpoint(format!(
            "unexpected tensors in checkpoint: {:?}",
            blobs.keys().collect::<Vec<_>>()
        )));
    }
    Ok(ModelParameters {
        cfg,
        encoder,
        hs,
        ha,
        decoders,
    })
}
