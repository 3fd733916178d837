//! The document-context translation model: a transformer whose encoder and
//! decoder can attend to an encoded window of preceding source sentences,
//! merged through residual connections or learned gates.
//!
//! With both integration flags off the forward path touches only
//! sentence-level parameters and reproduces a plain transformer exactly.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

use crate::corpus::{Batch, BatchItem, TrainingExample, BOS};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::nn::{
    self, AttentionMask, AttnNodes, FfnNodes, GateNodes, NormNodes,
};
use crate::params::{embedding_uniform, fan_scaled_uniform, ParamId, ParamStore, Partition};
use crate::scalar::Scalar;
use crate::tensor::{kernels, Tensor};

/// All dimensions and switches of the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hidden: usize,
    pub filter: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub ctx_layers: usize,
    /// Preceding source sentences fed to the context encoder.
    pub context_window: usize,
    pub integrate_encoder: bool,
    pub integrate_decoder: bool,
    pub gating: bool,
    pub dropout: f64,
    pub src_vocab: usize,
    pub tgt_vocab: usize,
}

impl ModelConfig {
    /// Full-scale profile.
    pub fn paper(src_vocab: usize, tgt_vocab: usize) -> Self {
        ModelConfig {
            hidden: 512,
            filter: 2048,
            heads: 8,
            enc_layers: 6,
            dec_layers: 6,
            ctx_layers: 1,
            context_window: 2,
            integrate_encoder: true,
            integrate_decoder: true,
            gating: true,
            dropout: 0.1,
            src_vocab,
            tgt_vocab,
        }
    }

    /// Small profile for laptop-scale runs; same shape, smaller dimensions.
    pub fn desk(src_vocab: usize, tgt_vocab: usize) -> Self {
        ModelConfig {
            hidden: 64,
            filter: 256,
            heads: 4,
            enc_layers: 2,
            dec_layers: 2,
            ctx_layers: 1,
            context_window: 2,
            integrate_encoder: true,
            integrate_decoder: true,
            gating: true,
            dropout: 0.1,
            src_vocab,
            tgt_vocab,
        }
    }

    /// The same dimensions with every document module switched off.
    pub fn baseline(&self) -> Self {
        ModelConfig {
            integrate_encoder: false,
            integrate_decoder: false,
            gating: false,
            ..self.clone()
        }
    }

    pub fn integrates_context(&self) -> bool {
        self.integrate_encoder || self.integrate_decoder
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.hidden % 2 != 0 {
            return Err(Error::Config(format!(
                "hidden size {} must be positive and even",
                self.hidden
            )));
        }
        if self.heads == 0 || self.hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden size {} not divisible into {} heads",
                self.hidden, self.heads
            )));
        }
        if self.filter == 0 {
            return Err(Error::Config("filter size must be positive".into()));
        }
        if self.enc_layers == 0 || self.dec_layers == 0 {
            return Err(Error::Config("encoder/decoder need at least one layer".into()));
        }
        if self.ctx_layers == 0 {
            return Err(Error::Config("context encoder needs at least one layer".into()));
        }
        if self.src_vocab <= 4 || self.tgt_vocab <= 4 {
            return Err(Error::Config(
                "vocabularies must extend beyond the reserved ids".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct AttnParams {
    pub(crate) wq: ParamId,
    pub(crate) wk: ParamId,
    pub(crate) wv: ParamId,
    pub(crate) wo: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct FfnParams {
    pub(crate) w1: ParamId,
    pub(crate) b1: ParamId,
    pub(crate) w2: ParamId,
    pub(crate) b2: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct NormParams {
    pub(crate) gain: ParamId,
    pub(crate) bias: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct GateParams {
    pub(crate) wi: ParamId,
    pub(crate) ws: ParamId,
}

/// Context-attention sub-layer attached to an encoder or decoder layer.
#[derive(Debug, Clone, Copy)]
pub(crate) struct CtxSubLayer {
    pub(crate) attn: AttnParams,
    pub(crate) gate: Option<GateParams>,
    pub(crate) norm: NormParams,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct EncoderLayer {
    pub(crate) self_attn: AttnParams,
    pub(crate) self_norm: NormParams,
    pub(crate) ctx: Option<CtxSubLayer>,
    pub(crate) ffn: FfnParams,
    pub(crate) ffn_norm: NormParams,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct DecoderLayer {
    pub(crate) self_attn: AttnParams,
    pub(crate) self_norm: NormParams,
    pub(crate) ctx: Option<CtxSubLayer>,
    pub(crate) encdec_attn: AttnParams,
    pub(crate) encdec_norm: NormParams,
    pub(crate) ffn: FfnParams,
    pub(crate) ffn_norm: NormParams,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ContextLayer {
    pub(crate) self_attn: AttnParams,
    pub(crate) self_norm: NormParams,
    pub(crate) ffn: FfnParams,
    pub(crate) ffn_norm: NormParams,
}

/// Which parameters a forward pass treats as trainable.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainScope {
    Eval,
    All,
    Only(Partition),
}

impl TrainScope {
    fn covers(self, partition: Partition) -> bool {
        match self {
            TrainScope::Eval => false,
            TrainScope::All => true,
            TrainScope::Only(p) => p == partition,
        }
    }
}

pub struct DocTransformer<F: Scalar> {
    cfg: ModelConfig,
    store: ParamStore<F>,
    pub(crate) src_embed: ParamId,
    pub(crate) tgt_embed: ParamId,
    pub(crate) out_proj: ParamId,
    pub(crate) context_stack: Vec<ContextLayer>,
    pub(crate) encoder: Vec<EncoderLayer>,
    pub(crate) decoder: Vec<DecoderLayer>,
}

struct Builder<'r, F: Scalar> {
    store: ParamStore<F>,
    rng: &'r mut ChaCha8Rng,
    hidden: usize,
    filter: usize,
}

impl<'r, F: Scalar> Builder<'r, F> {
    fn attn(&mut self, prefix: &str, partition: Partition) -> AttnParams {
        let d = self.hidden;
        AttnParams {
            wq: self.store.add(
                format!("{prefix}.wq"),
                partition,
                fan_scaled_uniform(self.rng, d, d),
            ),
            wk: self.store.add(
                format!("{prefix}.wk"),
                partition,
                fan_scaled_uniform(self.rng, d, d),
            ),
            wv: self.store.add(
                format!("{prefix}.wv"),
                partition,
                fan_scaled_uniform(self.rng, d, d),
            ),
            wo: self.store.add(
                format!("{prefix}.wo"),
                partition,
                fan_scaled_uniform(self.rng, d, d),
            ),
        }
    }

    fn ffn(&mut self, prefix: &str, partition: Partition) -> FfnParams {
        let (d, f) = (self.hidden, self.filter);
        FfnParams {
            w1: self.store.add(
                format!("{prefix}.w1"),
                partition,
                fan_scaled_uniform(self.rng, f, d),
            ),
            b1: self
                .store
                .add(format!("{prefix}.b1"), partition, Tensor::zeros(vec![f, 1])),
            w2: self.store.add(
                format!("{prefix}.w2"),
                partition,
                fan_scaled_uniform(self.rng, d, f),
            ),
            b2: self
                .store
                .add(format!("{prefix}.b2"), partition, Tensor::zeros(vec![d, 1])),
        }
    }

    fn norm(&mut self, prefix: &str, partition: Partition) -> NormParams {
        let d = self.hidden;
        let ones = Tensor::new(vec![d, 1], vec![F::one(); d]).expect("norm gain");
        NormParams {
            gain: self.store.add(format!("{prefix}.gain"), partition, ones),
            bias: self
                .store
                .add(format!("{prefix}.bias"), partition, Tensor::zeros(vec![d, 1])),
        }
    }

    /// Gates start at zero so training opens from an even blend.
    fn gate(&mut self, prefix: &str) -> GateParams {
        let d = self.hidden;
        GateParams {
            wi: self.store.add(
                format!("{prefix}.wi"),
                Partition::Document,
                Tensor::zeros(vec![d, d]),
            ),
            ws: self.store.add(
                format!("{prefix}.ws"),
                Partition::Document,
                Tensor::zeros(vec![d, d]),
            ),
        }
    }

    /// Context attention starts with a zero output projection: the merged
    /// sub-layer is then an exact no-op around the frozen sentence model
    /// (layer norm is idempotent and scale-invariant), so step two begins
    /// at the step-one optimum instead of first wrecking it with noise and
    /// learning to shut the context path down.
    fn ctx_sublayer(&mut self, prefix: &str, gating: bool) -> CtxSubLayer {
        let d = self.hidden;
        let attn = AttnParams {
            wq: self.store.add(
                format!("{prefix}.ctx_attn.wq"),
                Partition::Document,
                fan_scaled_uniform(self.rng, d, d),
            ),
            wk: self.store.add(
                format!("{prefix}.ctx_attn.wk"),
                Partition::Document,
                fan_scaled_uniform(self.rng, d, d),
            ),
            wv: self.store.add(
                format!("{prefix}.ctx_attn.wv"),
                Partition::Document,
                fan_scaled_uniform(self.rng, d, d),
            ),
            wo: self.store.add(
                format!("{prefix}.ctx_attn.wo"),
                Partition::Document,
                Tensor::zeros(vec![d, d]),
            ),
        };
        CtxSubLayer {
            attn,
            gate: gating.then(|| self.gate(&format!("{prefix}.ctx_gate"))),
            norm: self.norm(&format!("{prefix}.ctx_norm"), Partition::Document),
        }
    }
}

impl<F: Scalar> DocTransformer<F> {
    /// Build a model with freshly initialized parameters.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder {
            store: ParamStore::new(),
            rng: &mut rng,
            hidden: cfg.hidden,
            filter: cfg.filter,
        };
        let src_embed = {
            let t = embedding_uniform(b.rng, cfg.src_vocab, cfg.hidden);
            b.store.add("src_embed", Partition::Sentence, t)
        };
        let tgt_embed = {
            let t = embedding_uniform(b.rng, cfg.tgt_vocab, cfg.hidden);
            b.store.add("tgt_embed", Partition::Sentence, t)
        };
        let out_proj = {
            let t = fan_scaled_uniform(b.rng, cfg.tgt_vocab, cfg.hidden);
            b.store.add("out_proj", Partition::Sentence, t)
        };

        let mut encoder = Vec::with_capacity(cfg.enc_layers);
        for i in 0..cfg.enc_layers {
            let p = format!("enc.{i}");
            encoder.push(EncoderLayer {
                self_attn: b.attn(&format!("{p}.self_attn"), Partition::Sentence),
                self_norm: b.norm(&format!("{p}.self_norm"), Partition::Sentence),
                ctx: cfg
                    .integrate_encoder
                    .then(|| b.ctx_sublayer(&p, cfg.gating)),
                ffn: b.ffn(&format!("{p}.ffn"), Partition::Sentence),
                ffn_norm: b.norm(&format!("{p}.ffn_norm"), Partition::Sentence),
            });
        }

        let mut decoder = Vec::with_capacity(cfg.dec_layers);
        for i in 0..cfg.dec_layers {
            let p = format!("dec.{i}");
            decoder.push(DecoderLayer {
                self_attn: b.attn(&format!("{p}.self_attn"), Partition::Sentence),
                self_norm: b.norm(&format!("{p}.self_norm"), Partition::Sentence),
                ctx: cfg
                    .integrate_decoder
                    .then(|| b.ctx_sublayer(&p, cfg.gating)),
                encdec_attn: b.attn(&format!("{p}.encdec_attn"), Partition::Sentence),
                encdec_norm: b.norm(&format!("{p}.encdec_norm"), Partition::Sentence),
                ffn: b.ffn(&format!("{p}.ffn"), Partition::Sentence),
                ffn_norm: b.norm(&format!("{p}.ffn_norm"), Partition::Sentence),
            });
        }

        let mut context_stack = Vec::new();
        if cfg.integrates_context() {
            for i in 0..cfg.ctx_layers {
                let p = format!("ctx.{i}");
                context_stack.push(ContextLayer {
                    self_attn: b.attn(&format!("{p}.self_attn"), Partition::Document),
                    self_norm: b.norm(&format!("{p}.self_norm"), Partition::Document),
                    ffn: b.ffn(&format!("{p}.ffn"), Partition::Document),
                    ffn_norm: b.norm(&format!("{p}.ffn_norm"), Partition::Document),
                });
            }
        }

        Ok(DocTransformer {
            cfg,
            store: b.store,
            src_embed,
            tgt_embed,
            out_proj,
            context_stack,
            encoder,
            decoder,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore<F> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.store
    }

    /// A baseline-configured model sharing this model's sentence-level
    /// parameter values (copied by name).
    pub fn baseline_clone(&self, seed: u64) -> Result<DocTransformer<F>> {
        let mut base = DocTransformer::new(self.cfg.baseline(), seed)?;
        for id in self.store.ids() {
            if self.store.partition(id) == Partition::Sentence {
                let name = self.store.name(id).to_string();
                let target = base
                    .store
                    .lookup(&name)
                    .ok_or_else(|| Error::Contract(format!("baseline lacks parameter {name}")))?;
                base.store.set(target, self.store.value(id).clone())?;
            }
        }
        Ok(base)
    }

    pub fn begin(&self) -> Forward<'_, F> {
        Forward {
            model: self,
            graph: Graph::new(),
            bound: vec![None; self.store.len()],
            scope: TrainScope::Eval,
            dropout: 0.0,
            rng: None,
            integrate_encoder: self.cfg.integrate_encoder,
            integrate_decoder: self.cfg.integrate_decoder,
            gate_probe: None,
        }
    }
}

/// One forward session: a graph plus the parameter bindings made so far.
pub struct Forward<'m, F: Scalar> {
    model: &'m DocTransformer<F>,
    pub graph: Graph<F>,
    bound: Vec<Option<NodeId>>,
    scope: TrainScope,
    dropout: f64,
    rng: Option<ChaCha8Rng>,
    integrate_encoder: bool,
    integrate_decoder: bool,
    /// When set, gate value nodes are recorded here during the pass.
    pub gate_probe: Option<Vec<NodeId>>,
}

impl<'m, F: Scalar> Forward<'m, F> {
    pub fn trainable(mut self, scope: TrainScope) -> Self {
        self.scope = scope;
        self
    }

    pub fn with_dropout(mut self, rate: f64, rng: ChaCha8Rng) -> Self {
        self.dropout = rate;
        self.rng = Some(rng);
        self
    }

    /// Override which integrations run, regardless of the built modules.
    /// Used to inactivate document modules during sentence-level training.
    pub fn with_integration(mut self, encoder: bool, decoder: bool) -> Self {
        self.integrate_encoder = encoder && self.model.cfg.integrate_encoder;
        self.integrate_decoder = decoder && self.model.cfg.integrate_decoder;
        self
    }

    pub fn with_gate_probe(mut self) -> Self {
        self.gate_probe = Some(Vec::new());
        self
    }

    pub fn integrates_context(&self) -> bool {
        self.integrate_encoder || self.integrate_decoder
    }

    /// Bind a parameter into the graph (memoized per session).
    pub fn param(&mut self, id: ParamId) -> Result<NodeId> {
        if let Some(n) = self.bound[id.0] {
            return Ok(n);
        }
        let requires = self.scope.covers(self.model.store.partition(id));
        let node = self
            .graph
            .leaf(self.model.store.value(id).clone(), requires)?;
        self.bound[id.0] = Some(node);
        Ok(node)
    }

    /// Parameters bound with gradients enabled, with their nodes.
    pub fn trainable_bindings(&self) -> Vec<(ParamId, NodeId)> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, n)| {
                let id = ParamId(i);
                let node = (*n)?;
                self.scope
                    .covers(self.model.store.partition(id))
                    .then_some((id, node))
            })
            .collect()
    }

    fn attn_nodes(&mut self, p: AttnParams) -> Result<AttnNodes> {
        Ok(AttnNodes {
            wq: self.param(p.wq)?,
            wk: self.param(p.wk)?,
            wv: self.param(p.wv)?,
            wo: self.param(p.wo)?,
        })
    }

    fn ffn_nodes(&mut self, p: FfnParams) -> Result<FfnNodes> {
        Ok(FfnNodes {
            w1: self.param(p.w1)?,
            b1: self.param(p.b1)?,
            w2: self.param(p.w2)?,
            b2: self.param(p.b2)?,
        })
    }

    fn norm_nodes(&mut self, p: NormParams) -> Result<NormNodes> {
        Ok(NormNodes {
            gain: self.param(p.gain)?,
            bias: self.param(p.bias)?,
        })
    }

    fn gate_nodes(&mut self, p: GateParams) -> Result<GateNodes> {
        Ok(GateNodes {
            wi: self.param(p.wi)?,
            ws: self.param(p.ws)?,
        })
    }

    fn maybe_dropout(&mut self, x: NodeId) -> Result<NodeId> {
        if self.dropout <= 0.0 {
            return Ok(x);
        }
        let rng = self
            .rng
            .as_mut()
            .ok_or_else(|| Error::Config("dropout requested without an RNG".into()))?;
        nn::dropout(&mut self.graph, x, self.dropout, rng)
    }

    /// Sub-layer wrapper: residual (or gated) merge, then layer norm.
    fn merge_sublayer(
        &mut self,
        input: NodeId,
        sublayer_out: NodeId,
        gate: Option<GateParams>,
        norm: NormParams,
    ) -> Result<NodeId> {
        let dropped = self.maybe_dropout(sublayer_out)?;
        let norm = self.norm_nodes(norm)?;
        match gate {
            Some(gp) => {
                let gn = self.gate_nodes(gp)?;
                let (merged, lambda) = nn::context_gate(&mut self.graph, input, dropped, gn)?;
                if let Some(probe) = &mut self.gate_probe {
                    probe.push(lambda);
                }
                self.graph.layer_norm(merged, norm.gain, norm.bias)
            }
            None => nn::residual_sublayer(&mut self.graph, input, dropped, norm),
        }
    }
}

impl<F: Scalar> DocTransformer<F> {
    /// Encode the context window into its final representation `[D × M]`.
    pub fn encode_context(
        &self,
        fwd: &mut Forward<'_, F>,
        tokens: &[u32],
        pad: Option<&[bool]>,
    ) -> Result<NodeId> {
        if tokens.is_empty() {
            return Err(Error::Contract(
                "context must be nonempty; the corpus layer inserts the fallback token".into(),
            ));
        }
        let mask = pad.map(|p| Arc::new(AttentionMask::padding(tokens.len(), p)));
        let table = fwd.param(self.src_embed)?;
        let mut x = nn::embed(&mut fwd.graph, table, tokens)?;
        x = fwd.maybe_dropout(x)?;
        for layer in &self.context_stack {
            let attn = fwd.attn_nodes(layer.self_attn)?;
            let a = nn::multi_head_attention(
                &mut fwd.graph,
                x,
                x,
                x,
                mask.as_ref(),
                attn,
                self.cfg.heads,
            )?;
            x = fwd.merge_sublayer(x, a, None, layer.self_norm)?;
            let ffn = fwd.ffn_nodes(layer.ffn)?;
            let f = nn::feed_forward(&mut fwd.graph, x, ffn)?;
            x = fwd.merge_sublayer(x, f, None, layer.ffn_norm)?;
        }
        Ok(x)
    }

    /// Encode a source sentence, attending to the context representation
    /// when encoder integration is active.
    pub fn encode_source(
        &self,
        fwd: &mut Forward<'_, F>,
        tokens: &[u32],
        pad: Option<&[bool]>,
        context: Option<(NodeId, Option<&[bool]>)>,
    ) -> Result<NodeId> {
        if tokens.is_empty() {
            return Err(Error::Contract("source sentence must be nonempty".into()));
        }
        if fwd.integrate_encoder && context.is_none() {
            return Err(Error::Contract(
                "encoder integration is active but no context representation was supplied".into(),
            ));
        }
        let self_mask = pad.map(|p| Arc::new(AttentionMask::padding(tokens.len(), p)));
        let ctx_mask = match context {
            Some((c, Some(cp))) => {
                let (_, m) = fwd.graph.shape(c);
                debug_assert_eq!(m, cp.len());
                Some(Arc::new(AttentionMask::padding(tokens.len(), cp)))
            }
            _ => None,
        };

        let table = fwd.param(self.src_embed)?;
        let mut s = nn::embed(&mut fwd.graph, table, tokens)?;
        s = fwd.maybe_dropout(s)?;
        for layer in &self.encoder {
            let attn = fwd.attn_nodes(layer.self_attn)?;
            let b = nn::multi_head_attention(
                &mut fwd.graph,
                s,
                s,
                s,
                self_mask.as_ref(),
                attn,
                self.cfg.heads,
            )?;
            let b = fwd.merge_sublayer(s, b, None, layer.self_norm)?;

            let d = match (&layer.ctx, fwd.integrate_encoder, context) {
                (Some(sub), true, Some((c, _))) => {
                    let attn = fwd.attn_nodes(sub.attn)?;
                    let a = nn::multi_head_attention(
                        &mut fwd.graph,
                        b,
                        c,
                        c,
                        ctx_mask.as_ref(),
                        attn,
                        self.cfg.heads,
                    )?;
                    fwd.merge_sublayer(b, a, sub.gate, sub.norm)?
                }
                _ => b,
            };

            let ffn = fwd.ffn_nodes(layer.ffn)?;
            let f = nn::feed_forward(&mut fwd.graph, d, ffn)?;
            s = fwd.merge_sublayer(d, f, None, layer.ffn_norm)?;
        }
        Ok(s)
    }

    /// Decode a target prefix against an encoded source (and context, when
    /// decoder integration is active). Returns logits `[|V| × prefix_len]`.
    #[allow(clippy::too_many_arguments)]
    pub fn decode_prefix(
        &self,
        fwd: &mut Forward<'_, F>,
        prefix: &[u32],
        prefix_pad: Option<&[bool]>,
        source_repr: NodeId,
        source_pad: Option<&[bool]>,
        context: Option<(NodeId, Option<&[bool]>)>,
    ) -> Result<NodeId> {
        if prefix.is_empty() {
            return Err(Error::Contract("decoder prefix must be nonempty".into()));
        }
        if prefix[0] != BOS {
            return Err(Error::Contract(format!(
                "decoder prefix must start with the begin-of-sentence id, found {}",
                prefix[0]
            )));
        }
        if fwd.integrate_decoder && context.is_none() {
            return Err(Error::Contract(
                "decoder integration is active but no context representation was supplied".into(),
            ));
        }
        let j = prefix.len();
        let self_mask = Arc::new(match prefix_pad {
            Some(p) => AttentionMask::padding_causal(p),
            None => AttentionMask::causal(j),
        });
        let cross_mask = source_pad.map(|p| Arc::new(AttentionMask::padding(j, p)));
        let ctx_mask = match context {
            Some((_, Some(cp))) => Some(Arc::new(AttentionMask::padding(j, cp))),
            _ => None,
        };

        let table = fwd.param(self.tgt_embed)?;
        let mut t = nn::embed(&mut fwd.graph, table, prefix)?;
        t = fwd.maybe_dropout(t)?;
        for layer in &self.decoder {
            let attn = fwd.attn_nodes(layer.self_attn)?;
            let e = nn::multi_head_attention(
                &mut fwd.graph,
                t,
                t,
                t,
                Some(&self_mask),
                attn,
                self.cfg.heads,
            )?;
            let e = fwd.merge_sublayer(t, e, None, layer.self_norm)?;

            let f = match (&layer.ctx, fwd.integrate_decoder, context) {
                (Some(sub), true, Some((c, _))) => {
                    let attn = fwd.attn_nodes(sub.attn)?;
                    let a = nn::multi_head_attention(
                        &mut fwd.graph,
                        e,
                        c,
                        c,
                        ctx_mask.as_ref(),
                        attn,
                        self.cfg.heads,
                    )?;
                    fwd.merge_sublayer(e, a, sub.gate, sub.norm)?
                }
                _ => e,
            };

            let attn = fwd.attn_nodes(layer.encdec_attn)?;
            let g = nn::multi_head_attention(
                &mut fwd.graph,
                f,
                source_repr,
                source_repr,
                cross_mask.as_ref(),
                attn,
                self.cfg.heads,
            )?;
            let g = fwd.merge_sublayer(f, g, None, layer.encdec_norm)?;

            let ffn = fwd.ffn_nodes(layer.ffn)?;
            let h = nn::feed_forward(&mut fwd.graph, g, ffn)?;
            t = fwd.merge_sublayer(g, h, None, layer.ffn_norm)?;
        }
        let w_o = fwd.param(self.out_proj)?;
        fwd.graph.matmul(w_o, t)
    }

    /// Context representation for an example, or None when both
    /// integrations are inactive in this session.
    pub fn maybe_encode_context(
        &self,
        fwd: &mut Forward<'_, F>,
        tokens: &[u32],
        pad: Option<&[bool]>,
    ) -> Result<Option<NodeId>> {
        if fwd.integrates_context() {
            Ok(Some(self.encode_context(fwd, tokens, pad)?))
        } else {
            Ok(None)
        }
    }

    /// Full forward for one padded batch item, producing its logits.
    pub fn item_logits(&self, fwd: &mut Forward<'_, F>, item: &BatchItem) -> Result<NodeId> {
        let ctx = self.maybe_encode_context(fwd, &item.context, Some(&item.ctx_pad))?;
        let ctx_arg = ctx.map(|c| (c, Some(item.ctx_pad.as_slice())));
        let src = self.encode_source(fwd, &item.source, Some(&item.src_pad), ctx_arg)?;
        self.decode_prefix(
            fwd,
            &item.tgt_in,
            Some(&item.tgt_in_pad),
            src,
            Some(&item.src_pad),
            ctx_arg,
        )
    }

    /// Mean negative log-likelihood per real target token over a batch.
    /// Returns the scalar loss node and the token count.
    pub fn batch_nll(&self, fwd: &mut Forward<'_, F>, batch: &Batch) -> Result<(NodeId, usize)> {
        if batch.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        let mut total: Option<NodeId> = None;
        for item in &batch.items {
            let logits = self.item_logits(fwd, item)?;
            let ce = fwd
                .graph
                .cross_entropy_cols(logits, &item.tgt_out, &item.tgt_active)?;
            total = Some(match total {
                Some(t) => fwd.graph.add(t, ce)?,
                None => ce,
            });
        }
        let count = batch.active_target_tokens();
        let mean = fwd
            .graph
            .affine(total.expect("nonempty batch"), 1.0 / count as f64, 0.0);
        Ok((mean, count))
    }

    /// Log-probability of an example's target given its source and context:
    /// the total and the per-token contributions.
    pub fn sentence_log_prob(&self, example: &TrainingExample) -> Result<(f64, Vec<f64>)> {
        if example.target.len() < 2 || example.target[0] != BOS {
            return Err(Error::Contract(
                "target must be BOS-prefixed with at least one real token".into(),
            ));
        }
        for &t in &example.target {
            if t as usize >= self.cfg.tgt_vocab {
                return Err(Error::Contract(format!(
                    "target id {t} outside vocabulary of size {}",
                    self.cfg.tgt_vocab
                )));
            }
        }
        let mut fwd = self.begin();
        let prefix = &example.target[..example.target.len() - 1];
        let ctx = self.maybe_encode_context(&mut fwd, &example.context, None)?;
        let ctx_arg = ctx.map(|c| (c, None));
        let src = self.encode_source(&mut fwd, &example.source, None, ctx_arg)?;
        let logits = self.decode_prefix(&mut fwd, prefix, None, src, None, ctx_arg)?;
        let lt = fwd.graph.value_tensor(logits);
        let (v, l) = lt.dims2()?;
        let mut per_token = Vec::with_capacity(l);
        let mut total = 0.0;
        for j in 0..l {
            let col: Vec<F> = (0..v).map(|i| lt.at2(i, j)).collect();
            let lse = kernels::log_sum_exp(&col).to_f64();
            let y = example.target[j + 1] as usize;
            let lp = col[y].to_f64() - lse;
            per_token.push(lp);
            total += lp;
        }
        Ok((total, per_token))
    }
}
