//! Greedy and beam-search translation with a length penalty, plus
//! sequential document translation using source-side context windows.
//!
//! Production decoding runs on an incremental evaluator that caches
//! per-layer key/value projections for decoder self-attention and computes
//! context/source projections once per sentence. A full-prefix mode that
//! re-runs the graph forward from scratch each step exists as the slow
//! reference; both must produce token-identical output.

use rayon::prelude::*;

use crate::corpus::{BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::model::DocTransformer;
use crate::nn::positional_encoding_column;
use crate::params::ParamId;
use crate::scalar::Scalar;
use crate::tensor::{kernels, Tensor};

/// Decoding switches.
#[derive(Debug, Clone)]
pub struct DecodeConfig {
    pub beam_size: usize,
    /// Length-penalty exponent.
    pub alpha: f64,
    /// Cap on generated tokens; defaults to 2·source_len + 10.
    pub max_length: Option<usize>,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            beam_size: 4,
            alpha: 0.6,
            max_length: None,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_size < 1 {
            return Err(Error::Config("beam size must be at least 1".into()));
        }
        if self.alpha < 0.0 {
            return Err(Error::Config("length-penalty alpha must be >= 0".into()));
        }
        Ok(())
    }

    pub fn limit(&self, source_len: usize) -> usize {
        self.max_length.unwrap_or(2 * source_len + 10)
    }
}

/// ((5 + len) / 6)^alpha — hypotheses are ranked by log-prob divided by this.
pub fn length_penalty(length: usize, alpha: f64) -> f64 {
    ((5.0 + length as f64) / 6.0).powf(alpha)
}

/// A partial or finished translation.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// BOS-prefixed token ids.
    pub tokens: Vec<u32>,
    pub log_prob: f64,
    pub finished: bool,
}

impl Hypothesis {
    pub fn generated(&self) -> &[u32] {
        &self.tokens[1..]
    }

    pub fn score(&self, alpha: f64) -> f64 {
        self.log_prob / length_penalty(self.generated().len(), alpha)
    }
}

/// Whether scoring uses the incremental cache or full re-computation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreMode {
    Cached,
    FullPrefix,
}

// ── plain column math (shared kernels, no graph) ──

fn matvec<F: Scalar>(w: &Tensor<F>, x: &[F]) -> Vec<F> {
    let (r, c) = w.dims2().expect("matrix");
    debug_assert_eq!(c, x.len());
    let mut out = vec![F::zero(); r];
    kernels::matmul_acc(&mut out, w.data(), x, r, c, 1);
    out
}

fn add_in_place<F: Scalar>(a: &mut [F], b: &[F]) {
    for (x, y) in a.iter_mut().zip(b) {
        *x = *x + *y;
    }
}

fn ln_col<F: Scalar>(x: &[F], gain: &Tensor<F>, bias: &Tensor<F>) -> Vec<F> {
    let d = x.len();
    let mut out = vec![F::zero(); d];
    kernels::layer_norm_cols(&mut out, x, gain.data(), bias.data(), d, 1);
    out
}

/// Per-hypothesis decoder state: cached self-attention keys/values per
/// layer, stored as consecutive `[D]` columns.
#[derive(Debug, Clone)]
struct DecodeCache<F: Scalar> {
    layers: Vec<(Vec<F>, Vec<F>)>,
    len: usize,
}

impl<F: Scalar> DecodeCache<F> {
    fn new(layers: usize) -> Self {
        DecodeCache {
            layers: vec![(Vec::new(), Vec::new()); layers],
            len: 0,
        }
    }
}

/// Per-sentence precomputation: encoded context/source and, per decoder
/// layer, the projected keys/values for context and source attention.
pub struct SentenceState<F: Scalar> {
    statics: Vec<LayerStatic<F>>,
}

struct LayerStatic<F: Scalar> {
    ctx_kv: Option<(Tensor<F>, Tensor<F>)>,
    src_kv: (Tensor<F>, Tensor<F>),
}

impl<F: Scalar> DocTransformer<F> {
    fn value(&self, id: ParamId) -> &Tensor<F> {
        self.store().value(id)
    }

    /// Encode context and source once and project the static keys/values
    /// every decode step will attend over.
    pub fn prepare_sentence(
        &self,
        context_tokens: &[u32],
        source_tokens: &[u32],
    ) -> Result<SentenceState<F>> {
        let mut fwd = self.begin();
        let ctx = self.maybe_encode_context(&mut fwd, context_tokens, None)?;
        let src = self.encode_source(&mut fwd, source_tokens, None, ctx.map(|c| (c, None)))?;
        let ctx_t = ctx.map(|c| fwd.graph.value_tensor(c));
        let src_t = fwd.graph.value_tensor(src);

        let mut statics = Vec::with_capacity(self.decoder.len());
        for layer in &self.decoder {
            let ctx_kv = match (&layer.ctx, self.config().integrate_decoder, &ctx_t) {
                (Some(sub), true, Some(c)) => Some((
                    crate::tensor::matmul(self.value(sub.attn.wk), c)?,
                    crate::tensor::matmul(self.value(sub.attn.wv), c)?,
                )),
                _ => None,
            };
            let src_kv = (
                crate::tensor::matmul(self.value(layer.encdec_attn.wk), &src_t)?,
                crate::tensor::matmul(self.value(layer.encdec_attn.wv), &src_t)?,
            );
            statics.push(LayerStatic { ctx_kv, src_kv });
        }
        Ok(SentenceState { statics })
    }

    /// Attention of one query column over cached key/value columns.
    fn attend_cached(
        &self,
        q: &[F],
        keys: &[F],
        vals: &[F],
        n_keys: usize,
    ) -> Vec<F> {
        let d = self.config().hidden;
        let heads = self.config().heads;
        let dh = d / heads;
        let scale = F::from_f64(1.0 / (dh as f64).sqrt());
        let mut out = vec![F::zero(); d];
        let mut weights = vec![F::zero(); n_keys];
        for h in 0..heads {
            let base = h * dh;
            for (m, w) in weights.iter_mut().enumerate() {
                let mut dot = F::zero();
                for r in 0..dh {
                    dot = dot + q[base + r] * keys[m * d + base + r];
                }
                *w = dot * scale;
            }
            kernels::softmax_inplace(&mut weights);
            for r in 0..dh {
                let mut acc = F::zero();
                for (m, w) in weights.iter().enumerate() {
                    acc = acc + *w * vals[m * d + base + r];
                }
                out[base + r] = acc;
            }
        }
        out
    }

    /// Attention of one query column over a static `[D × M]` key/value pair.
    fn attend_static(&self, q: &[F], keys: &Tensor<F>, vals: &Tensor<F>) -> Vec<F> {
        let d = self.config().hidden;
        let heads = self.config().heads;
        let dh = d / heads;
        let m_keys = keys.dims2().expect("matrix").1;
        let scale = F::from_f64(1.0 / (dh as f64).sqrt());
        let mut out = vec![F::zero(); d];
        let mut weights = vec![F::zero(); m_keys];
        for h in 0..heads {
            let base = h * dh;
            for (m, w) in weights.iter_mut().enumerate() {
                let mut dot = F::zero();
                for r in 0..dh {
                    dot = dot + q[base + r] * keys.at2(base + r, m);
                }
                *w = dot * scale;
            }
            kernels::softmax_inplace(&mut weights);
            for r in 0..dh {
                let mut acc = F::zero();
                for (m, w) in weights.iter().enumerate() {
                    acc = acc + *w * vals.at2(base + r, m);
                }
                out[base + r] = acc;
            }
        }
        out
    }

    fn gate_merge_col(
        &self,
        wi: ParamId,
        ws: ParamId,
        h: &[F],
        sub: &[F],
    ) -> Vec<F> {
        let mut pre = matvec(self.value(wi), h);
        let from_sub = matvec(self.value(ws), sub);
        add_in_place(&mut pre, &from_sub);
        let one = F::one();
        let scale = F::from_f64(1.0 - 2.0 * F::GATE_SQUEEZE);
        let shift = F::from_f64(F::GATE_SQUEEZE);
        let lambda: Vec<F> = pre
            .iter()
            .map(|&v| scale * (one / (one + (-v).exp())) + shift)
            .collect();
        lambda
            .iter()
            .zip(h.iter().zip(sub))
            .map(|(&l, (&hv, &sv))| l * hv + (one - l) * sv)
            .collect()
    }

    /// Feed one token through the cached decoder; returns the logits column
    /// predicting the next token.
    fn decode_step(
        &self,
        state: &SentenceState<F>,
        cache: &mut DecodeCache<F>,
        token: u32,
        position: usize,
    ) -> Result<Vec<F>> {
        let cfg = self.config();
        let d = cfg.hidden;
        if token as usize >= cfg.tgt_vocab {
            return Err(Error::Contract(format!(
                "token id {token} outside target vocabulary"
            )));
        }
        let table = self.value(self.tgt_embed);
        let mut x: Vec<F> = (0..d).map(|i| table.at2(token as usize, i)).collect();
        let pe = positional_encoding_column::<F>(position, d);
        add_in_place(&mut x, &pe);

        for (li, layer) in self.decoder.iter().enumerate() {
            // Self-attention over the growing cache.
            let q = matvec(self.value(layer.self_attn.wq), &x);
            let k = matvec(self.value(layer.self_attn.wk), &x);
            let v = matvec(self.value(layer.self_attn.wv), &x);
            let lc = &mut cache.layers[li];
            lc.0.extend_from_slice(&k);
            lc.1.extend_from_slice(&v);
            let n_keys = cache.len + 1;
            let attended = self.attend_cached(&q, &cache.layers[li].0, &cache.layers[li].1, n_keys);
            let a = matvec(self.value(layer.self_attn.wo), &attended);
            let mut sum = x.clone();
            add_in_place(&mut sum, &a);
            let x1 = ln_col(
                &sum,
                self.value(layer.self_norm.gain),
                self.value(layer.self_norm.bias),
            );

            // Context attention over the per-sentence static projections.
            let x2 = match (&layer.ctx, &state.statics[li].ctx_kv) {
                (Some(sub), Some((ck, cv))) => {
                    let q = matvec(self.value(sub.attn.wq), &x1);
                    let attended = self.attend_static(&q, ck, cv);
                    let a = matvec(self.value(sub.attn.wo), &attended);
                    let merged = match sub.gate {
                        Some(g) => self.gate_merge_col(g.wi, g.ws, &x1, &a),
                        None => {
                            let mut s = x1.clone();
                            add_in_place(&mut s, &a);
                            s
                        }
                    };
                    ln_col(
                        &merged,
                        self.value(sub.norm.gain),
                        self.value(sub.norm.bias),
                    )
                }
                _ => x1,
            };

            // Source attention.
            let q = matvec(self.value(layer.encdec_attn.wq), &x2);
            let (sk, sv) = &state.statics[li].src_kv;
            let attended = self.attend_static(&q, sk, sv);
            let a = matvec(self.value(layer.encdec_attn.wo), &attended);
            let mut sum = x2.clone();
            add_in_place(&mut sum, &a);
            let x3 = ln_col(
                &sum,
                self.value(layer.encdec_norm.gain),
                self.value(layer.encdec_norm.bias),
            );

            // Feed-forward.
            let mut hidden = matvec(self.value(layer.ffn.w1), &x3);
            add_in_place(&mut hidden, self.value(layer.ffn.b1).data());
            for hval in hidden.iter_mut() {
                if *hval < F::zero() {
                    *hval = F::zero();
                }
            }
            let mut f = matvec(self.value(layer.ffn.w2), &hidden);
            add_in_place(&mut f, self.value(layer.ffn.b2).data());
            let mut sum = x3.clone();
            add_in_place(&mut sum, &f);
            x = ln_col(
                &sum,
                self.value(layer.ffn_norm.gain),
                self.value(layer.ffn_norm.bias),
            );
        }
        cache.len += 1;
        Ok(matvec(self.value(self.out_proj), &x))
    }

    /// Log-probabilities of the next token after `prefix`, re-running the
    /// whole graph forward (reference route for cache verification).
    fn full_prefix_log_probs(
        &self,
        context_tokens: &[u32],
        source_tokens: &[u32],
        prefix: &[u32],
    ) -> Result<Vec<f64>> {
        let mut fwd = self.begin();
        let ctx = self.maybe_encode_context(&mut fwd, context_tokens, None)?;
        let src = self.encode_source(&mut fwd, source_tokens, None, ctx.map(|c| (c, None)))?;
        let logits = self.decode_prefix(&mut fwd, prefix, None, src, None, ctx.map(|c| (c, None)))?;
        let t = fwd.graph.value_tensor(logits);
        let (v, cols) = t.dims2()?;
        let col: Vec<F> = (0..v).map(|i| t.at2(i, cols - 1)).collect();
        let lse = kernels::log_sum_exp(&col).to_f64();
        Ok(col.iter().map(|&x| x.to_f64() - lse).collect())
    }
}

fn log_probs_from_logits<F: Scalar>(logits: &[F]) -> Vec<f64> {
    let lse = kernels::log_sum_exp(logits).to_f64();
    logits.iter().map(|&x| x.to_f64() - lse).collect()
}

struct Beam<F: Scalar> {
    tokens: Vec<u32>,
    log_prob: f64,
    cache: Option<DecodeCache<F>>,
    /// log-probabilities for the next extension, already computed.
    next: Vec<f64>,
}

/// Beam-search translation of one sentence given its context window.
pub fn beam_search<F: Scalar>(
    model: &DocTransformer<F>,
    context_tokens: &[u32],
    source_tokens: &[u32],
    cfg: &DecodeConfig,
) -> Result<Hypothesis> {
    beam_search_mode(model, context_tokens, source_tokens, cfg, ScoreMode::Cached)
}

/// Beam search with an explicit scoring route.
pub fn beam_search_mode<F: Scalar>(
    model: &DocTransformer<F>,
    context_tokens: &[u32],
    source_tokens: &[u32],
    cfg: &DecodeConfig,
    mode: ScoreMode,
) -> Result<Hypothesis> {
    cfg.validate()?;
    if source_tokens.is_empty() {
        return Err(Error::Contract("cannot translate an empty sentence".into()));
    }
    let limit = cfg.limit(source_tokens.len());
    let state = match mode {
        ScoreMode::Cached => Some(model.prepare_sentence(context_tokens, source_tokens)?),
        ScoreMode::FullPrefix => None,
    };

    let next_of = |tokens: &[u32], cache: &mut Option<DecodeCache<F>>| -> Result<Vec<f64>> {
        match (&state, cache) {
            (Some(st), Some(c)) => {
                let pos = tokens.len() - 1;
                let logits = model.decode_step(st, c, tokens[pos], pos)?;
                Ok(log_probs_from_logits(&logits))
            }
            _ => model.full_prefix_log_probs(context_tokens, source_tokens, tokens),
        }
    };

    let mut root_cache = match mode {
        ScoreMode::Cached => Some(DecodeCache::new(model.config().dec_layers)),
        ScoreMode::FullPrefix => None,
    };
    let root_next = next_of(&[BOS], &mut root_cache)?;
    let mut live = vec![Beam::<F> {
        tokens: vec![BOS],
        log_prob: 0.0,
        cache: root_cache,
        next: root_next,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();

    for _ in 0..limit {
        if live.is_empty() {
            break;
        }
        // (source beam index, token, cumulative log-prob)
        let mut candidates: Vec<(usize, u32, f64)> = Vec::new();
        for (bi, beam) in live.iter().enumerate() {
            for (tok, lp) in beam.next.iter().enumerate() {
                let tok = tok as u32;
                if tok == PAD || tok == BOS {
                    continue;
                }
                candidates.push((bi, tok, beam.log_prob + lp));
            }
        }
        candidates.sort_by(|a, b| {
            b.2.total_cmp(&a.2).then_with(|| {
                let sa = (&live[a.0].tokens, a.1);
                let sb = (&live[b.0].tokens, b.1);
                sa.cmp(&sb)
            })
        });
        candidates.truncate(cfg.beam_size);

        let mut next_live: Vec<Beam<F>> = Vec::new();
        for (bi, tok, lp) in candidates {
            let mut tokens = live[bi].tokens.clone();
            tokens.push(tok);
            if tok == EOS {
                finished.push(Hypothesis {
                    tokens,
                    log_prob: lp,
                    finished: true,
                });
                continue;
            }
            let mut cache = live[bi].cache.clone();
            let next = next_of(&tokens, &mut cache)?;
            next_live.push(Beam {
                tokens,
                log_prob: lp,
                cache,
                next,
            });
        }
        live = next_live;
    }

    let mut pool = finished;
    pool.extend(live.into_iter().map(|b| Hypothesis {
        tokens: b.tokens,
        log_prob: b.log_prob,
        finished: false,
    }));
    pool.into_iter()
        .max_by(|a, b| {
            a.score(cfg.alpha)
                .total_cmp(&b.score(cfg.alpha))
                .then_with(|| b.tokens.cmp(&a.tokens))
        })
        .ok_or_else(|| Error::Contract("no hypotheses produced".into()))
}

/// Stepwise argmax decoding (ties go to the lowest token id).
pub fn greedy_decode<F: Scalar>(
    model: &DocTransformer<F>,
    context_tokens: &[u32],
    source_tokens: &[u32],
    cfg: &DecodeConfig,
    mode: ScoreMode,
) -> Result<Hypothesis> {
    if source_tokens.is_empty() {
        return Err(Error::Contract("cannot translate an empty sentence".into()));
    }
    let limit = cfg.limit(source_tokens.len());
    let state = match mode {
        ScoreMode::Cached => Some(model.prepare_sentence(context_tokens, source_tokens)?),
        ScoreMode::FullPrefix => None,
    };
    let mut cache = match mode {
        ScoreMode::Cached => Some(DecodeCache::new(model.config().dec_layers)),
        ScoreMode::FullPrefix => None,
    };
    let mut tokens = vec![BOS];
    let mut log_prob = 0.0;
    let mut finished = false;
    for _ in 0..limit {
        let lps = match (&state, &mut cache) {
            (Some(st), Some(c)) => {
                let pos = tokens.len() - 1;
                let logits = model.decode_step(st, c, tokens[pos], pos)?;
                log_probs_from_logits(&logits)
            }
            _ => model.full_prefix_log_probs(context_tokens, source_tokens, &tokens)?,
        };
        let mut best: Option<(u32, f64)> = None;
        for (tok, &lp) in lps.iter().enumerate() {
            let tok = tok as u32;
            if tok == PAD || tok == BOS {
                continue;
            }
            let better = match best {
                None => true,
                Some((_, b)) => lp > b,
            };
            if better {
                best = Some((tok, lp));
            }
        }
        let (tok, lp) = best.expect("vocabulary has candidates");
        tokens.push(tok);
        log_prob += lp;
        if tok == EOS {
            finished = true;
            break;
        }
    }
    Ok(Hypothesis {
        tokens,
        log_prob,
        finished,
    })
}

/// Translate every sentence of a document, conditioning each on the
/// original preceding source sentences (never on produced output), so
/// sentences are independent and may run in parallel.
pub fn translate_document<F: Scalar>(
    model: &DocTransformer<F>,
    source_sentences: &[Vec<u32>],
    window: usize,
    cfg: &DecodeConfig,
) -> Result<Vec<Vec<u32>>> {
    cfg.validate()?;
    let outputs: Result<Vec<Vec<u32>>> = source_sentences
        .par_iter()
        .enumerate()
        .map(|(idx, sentence)| {
            let mut context = Vec::new();
            let start = (idx + 1).saturating_sub(window).max(1);
            for s in start..idx + 1 {
                context.extend_from_slice(&source_sentences[s - 1]);
            }
            if context.is_empty() {
                context.push(BOS);
            }
            let mut source = sentence.clone();
            source.push(EOS);
            let hyp = beam_search(model, &context, &source, cfg)?;
            let mut out = hyp.generated().to_vec();
            if out.last() == Some(&EOS) {
                out.pop();
            }
            Ok(out)
        })
        .collect();
    outputs
}
