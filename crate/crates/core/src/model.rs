//! Cross-attention fusion, the two-layer classifier head, and the complete
//! dual-path model.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{self, EncoderConfig, CONTENT, NOISE};
use crate::error::{Result, SonarError};
use crate::losses::{LossBreakdown, LossConfig};
use crate::nn::functional::softmax_in_place;
use crate::nn::layers::{linear, multi_head_attention, register_attention, register_linear};
use crate::nn::{NodeId, ParamStore, Tape, Tensor2};
use crate::signal::Signal;
use crate::srm::{self, SrmFilterBank};

pub const FUSION: &str = "fusion.attn";
pub const HEAD: &str = "head";
pub const SRM_KERNELS: &str = "srm.kernels";
pub const SRM_MIX: &str = "srm.mix";
pub const SRM_BIAS: &str = "srm.bias";

/// Which embeddings reach the classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Pooled content and noise embeddings.
    Lite,
    /// Pooled cross-attention output and pooled noise embedding.
    Full,
}

impl std::str::FromStr for Mode {
    type Err = SonarError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lite" => Ok(Mode::Lite),
            "full" => Ok(Mode::Full),
            other => Err(SonarError::InvalidConfig(format!("unknown mode {other}"))),
        }
    }
}

/// Which path supplies the cross-attention queries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuerySource {
    Content,
    Noise,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub m_filters: usize,
    pub head_hidden: usize,
    pub mode: Mode,
    pub query_source: QuerySource,
    /// Keep the filter taps at their initial values.
    pub freeze_srm: bool,
}

impl ModelConfig {
    pub fn desk(clip_samples: usize) -> Self {
        Self {
            encoder: EncoderConfig::desk(clip_samples),
            m_filters: 30,
            head_hidden: 64,
            mode: Mode::Lite,
            query_source: QuerySource::Content,
            freeze_srm: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.m_filters == 0 || self.head_hidden == 0 {
            return Err(SonarError::InvalidConfig(
                "m_filters and head_hidden must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Result of a forward pass on one clip.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    /// `[fake, real]`.
    pub logits: [f64; 2],
    pub z_content: Tensor2,
    pub z_noise: Tensor2,
}

impl ForwardOutput {
    pub fn p_real(&self) -> f64 {
        let mut p = self.logits;
        softmax_in_place(&mut p);
        p[1]
    }
}

/// Node handles of one forward graph.
pub struct GraphOutput {
    pub logits: NodeId,
    pub z_content: NodeId,
    pub z_noise: NodeId,
    pub fused: Option<NodeId>,
}

pub struct LossGraph {
    pub forward: GraphOutput,
    pub js: NodeId,
    pub wce: NodeId,
    pub l_js: NodeId,
    pub total: NodeId,
}

pub fn register_fusion<R: rand::Rng>(
    store: &mut ParamStore,
    rng: &mut R,
    d_model: usize,
) -> Result<()> {
    register_attention(store, rng, FUSION, d_model, 1.0)
}

pub fn register_head<R: rand::Rng>(
    store: &mut ParamStore,
    rng: &mut R,
    d_model: usize,
    hidden: usize,
) -> Result<()> {
    register_linear(store, rng, &format!("{HEAD}.l1"), 2 * d_model, hidden, 1.0)?;
    register_linear(store, rng, &format!("{HEAD}.l2"), hidden, 2, 1.0)
}

/// Cross-attention with queries from `query` and keys/values from `context`.
pub fn fuse_graph<'p>(
    tape: &mut Tape<'p>,
    store: &'p ParamStore,
    query: NodeId,
    context: NodeId,
    n_heads: usize,
) -> Result<NodeId> {
    let (q, c) = (tape.value(query).shape(), tape.value(context).shape());
    if q.1 != c.1 {
        return Err(SonarError::Shape(format!("fusing {q:?} with {c:?}")));
    }
    multi_head_attention(tape, store, FUSION, query, context, n_heads)
}

/// Mean-pool both inputs over frames, concatenate, and apply the two-layer
/// head. Returns the `1 x 2` logit node.
pub fn lite_head_graph<'p>(
    tape: &mut Tape<'p>,
    store: &'p ParamStore,
    a: NodeId,
    b: NodeId,
) -> Result<NodeId> {
    let (sa, sb) = (tape.value(a).shape(), tape.value(b).shape());
    if sa.0 == 0 || sb.0 == 0 {
        return Err(SonarError::InvalidInput("head input has no frames".into()));
    }
    if sa.1 != sb.1 {
        return Err(SonarError::Shape(format!("head inputs {sa:?} and {sb:?}")));
    }
    let pa = tape.mean_rows(a)?;
    let pb = tape.mean_rows(b)?;
    let x = tape.concat_cols(pa, pb)?;
    let h = linear(tape, store, &format!("{HEAD}.l1"), x)?;
    let h = tape.gelu(h);
    linear(tape, store, &format!("{HEAD}.l2"), h)
}

/// Cross-attention output for a pair of embeddings, queries from `z_query`.
pub fn fuse(
    store: &ParamStore,
    z_query: &Tensor2,
    z_context: &Tensor2,
    n_heads: usize,
) -> Result<Tensor2> {
    let mut tape = Tape::new();
    let q = tape.input(z_query.clone());
    let c = tape.input(z_context.clone());
    let out = fuse_graph(&mut tape, store, q, c, n_heads)?;
    Ok(tape.value(out).clone())
}

/// Classifier logits `[fake, real]` for a pair of embeddings.
pub fn lite_forward(
    store: &ParamStore,
    z_content: &Tensor2,
    z_noise: &Tensor2,
) -> Result<[f64; 2]> {
    let mut tape = Tape::new();
    let a = tape.input(z_content.clone());
    let b = tape.input(z_noise.clone());
    let out = lite_head_graph(&mut tape, store, a, b)?;
    let v = tape.value(out).as_slice();
    Ok([v[0], v[1]])
}

/// Records the complete forward pass for `sig` on `tape`.
pub fn forward_graph<'p>(
    cfg: &ModelConfig,
    store: &'p ParamStore,
    tape: &mut Tape<'p>,
    sig: &Signal,
) -> Result<GraphOutput> {
    let x = tape.input(Tensor2::row_vector(sig.samples().to_vec()));
    let z_content = encoder::encode(tape, store, CONTENT, &cfg.encoder, x)?;
    let kernels = tape.param_named(store, SRM_KERNELS)?;
    let mix = tape.param_named(store, SRM_MIX)?;
    let bias = tape.param_named(store, SRM_BIAS)?;
    let x_noise = tape.srm_residual(x, kernels, mix, bias)?;
    let z_noise = encoder::encode(tape, store, NOISE, &cfg.encoder, x_noise)?;
    let (pooled, fused) = match cfg.mode {
        Mode::Lite => (z_content, None),
        Mode::Full => {
            let (q, c) = match cfg.query_source {
                QuerySource::Content => (z_content, z_noise),
                QuerySource::Noise => (z_noise, z_content),
            };
            let e = fuse_graph(tape, store, q, c, cfg.encoder.n_heads)?;
            (e, Some(e))
        }
    };
    let logits = lite_head_graph(tape, store, pooled, z_noise)?;
    Ok(GraphOutput {
        logits,
        z_content,
        z_noise,
        fused,
    })
}

/// Forward pass plus `wce + lambda * alignment`. The alignment term always
/// reads the encoder outputs, never the fused representation.
pub fn loss_graph<'p>(
    cfg: &ModelConfig,
    store: &'p ParamStore,
    tape: &mut Tape<'p>,
    sig: &Signal,
    label: u8,
    loss: &LossConfig,
) -> Result<LossGraph> {
    if label > 1 {
        return Err(SonarError::InvalidInput(format!(
            "label must be 0 or 1, got {label}"
        )));
    }
    let forward = forward_graph(cfg, store, tape, sig)?;
    let pc = tape.softmax_rows(forward.z_content);
    let pn = tape.softmax_rows(forward.z_noise);
    let js = tape.framewise_js(pc, pn)?;
    let l_js = if label == 1 {
        tape.affine(js, 1.0, 0.0)
    } else {
        tape.affine(js, -1.0, 1.0)
    };
    let wce = tape.weighted_ce(
        forward.logits,
        label as usize,
        loss.class_weights[label as usize],
    )?;
    let scaled = tape.affine(l_js, loss.lambda_js, 0.0);
    let total = tape.add(wce, scaled)?;
    Ok(LossGraph {
        forward,
        js,
        wce,
        l_js,
        total,
    })
}

/// Loss breakdown and parameter gradients (store order) for one clip,
/// scaled by `grad_scale`.
pub fn loss_and_grads(
    cfg: &ModelConfig,
    store: &ParamStore,
    sig: &Signal,
    label: u8,
    loss: &LossConfig,
    grad_scale: f64,
) -> Result<(LossBreakdown, Vec<Tensor2>)> {
    let mut tape = Tape::new();
    let g = loss_graph(cfg, store, &mut tape, sig, label, loss)?;
    let breakdown = LossBreakdown::new(
        tape.value(g.wce).item(),
        tape.value(g.js).item(),
        tape.value(g.l_js).item(),
        loss.lambda_js,
    );
    if !breakdown.total.is_finite() {
        return Err(SonarError::Numeric(format!(
            "non-finite loss {breakdown:?}"
        )));
    }
    let grads = tape.backward(g.total, grad_scale)?;
    Ok((breakdown, tape.param_grads(&grads, store)))
}

/// Dual-path detector: configuration plus every learnable buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct SonarModel {
    config: ModelConfig,
    params: ParamStore,
}

impl SonarModel {
    /// Registers every parameter from one seeded stream: filter bank,
    /// content encoder, noise encoder, fusion (full mode only), head.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bank = SrmFilterBank::init_with(config.m_filters, &mut rng)?;
        let mut params = ParamStore::new();
        params.insert(SRM_KERNELS, bank.kernels)?;
        params.insert(SRM_MIX, Tensor2::row_vector(bank.mix_weights))?;
        params.insert(SRM_BIAS, Tensor2::scalar(bank.mix_bias))?;
        encoder::register_encoder(&mut params, &mut rng, CONTENT, &config.encoder)?;
        encoder::register_encoder(&mut params, &mut rng, NOISE, &config.encoder)?;
        if config.mode == Mode::Full {
            register_fusion(&mut params, &mut rng, config.encoder.d_model)?;
        }
        register_head(
            &mut params,
            &mut rng,
            config.encoder.d_model,
            config.head_hidden,
        )?;
        Ok(Self { config, params })
    }

    /// Rebuilds a model from stored buffers; names and shapes must match a
    /// freshly initialised model with the same config.
    pub fn from_parts(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let reference = Self::new(config, 0)?;
        if reference.params.len() != params.len() {
            return Err(SonarError::Checkpoint(format!(
                "expected {} buffers, found {}",
                reference.params.len(),
                params.len()
            )));
        }
        for ((n1, t1), (n2, t2)) in reference.params.iter().zip(params.iter()) {
            if n1 != n2 || t1.shape() != t2.shape() {
                return Err(SonarError::Checkpoint(format!(
                    "buffer {n2} {:?} does not match expected {n1} {:?}",
                    t2.shape(),
                    t1.shape()
                )));
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn bank(&self) -> Result<SrmFilterBank> {
        Ok(SrmFilterBank {
            kernels: self.params.by_name(SRM_KERNELS)?.clone(),
            mix_weights: self.params.by_name(SRM_MIX)?.as_slice().to_vec(),
            mix_bias: self.params.by_name(SRM_BIAS)?.item(),
        })
    }

    pub fn project_constraints(&mut self) -> Result<()> {
        let id = self.params.id(SRM_KERNELS)?;
        srm::project_constraints(self.params.get_mut(id))
    }

    pub fn forward(&self, sig: &Signal) -> Result<ForwardOutput> {
        let mut tape = Tape::new();
        let out = forward_graph(&self.config, &self.params, &mut tape, sig)?;
        let l = tape.value(out.logits).as_slice();
        Ok(ForwardOutput {
            logits: [l[0], l[1]],
            z_content: tape.value(out.z_content).clone(),
            z_noise: tape.value(out.z_noise).clone(),
        })
    }

    pub fn loss_and_grads(
        &self,
        sig: &Signal,
        label: u8,
        loss: &LossConfig,
        grad_scale: f64,
    ) -> Result<(LossBreakdown, Vec<Tensor2>)> {
        loss_and_grads(&self.config, &self.params, sig, label, loss, grad_scale)
    }
}
