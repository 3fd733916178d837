//! Document-parallel corpus handling: vocabulary, loading, context windows,
//! training examples, and token-budget batching with padding masks.
//!
//! Corpus files are UTF-8 plain text, one sentence per line, documents
//! separated by blank lines; source and target files align document by
//! document and line by line. Vocabulary files hold one token per line;
//! id = line number + 4 (four reserved ids below).

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::AttentionMask;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;

pub const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Token ↔ id bijection with four fixed reserved entries.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    fn from_plain(plain: Vec<String>) -> Self {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(plain);
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocabulary { tokens, index }
    }

    /// Keep the most frequent tokens up to `max_size` (including the four
    /// reserved ids); ties break lexicographically.
    pub fn build<'a, I>(sentences: I, max_size: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [String]>,
    {
        if max_size <= RESERVED.len() {
            return Err(Error::Config(format!(
                "vocabulary size {max_size} leaves no room beyond reserved ids"
            )));
        }
        let mut counts: HashMap<&str, u64> = HashMap::new();
        for sentence in sentences {
            for tok in sentence {
                *counts.entry(tok.as_str()).or_default() += 1;
            }
        }
        let mut ranked: Vec<(&str, u64)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        ranked.truncate(max_size - RESERVED.len());
        Ok(Self::from_plain(
            ranked.into_iter().map(|(t, _)| t.to_string()).collect(),
        ))
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn encode_token(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<u32> {
        tokens.iter().map(|t| self.encode_token(t)).collect()
    }

    pub fn decode(&self, id: u32) -> Result<&str> {
        self.tokens
            .get(id as usize)
            .map(String::as_str)
            .ok_or_else(|| Error::Contract(format!("id {id} outside vocabulary")))
    }

    pub fn decode_sentence(&self, ids: &[u32]) -> Result<Vec<String>> {
        ids.iter().map(|&i| self.decode(i).map(String::from)).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let body: String = self.tokens[RESERVED.len()..]
            .iter()
            .map(|t| format!("{t}\n"))
            .collect();
        fs::write(path, body)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let plain: Vec<String> = text.lines().map(str::to_string).collect();
        for (i, tok) in plain.iter().enumerate() {
            if tok.is_empty() || tok.chars().any(char::is_whitespace) {
                return Err(Error::Data(format!(
                    "vocabulary line {}: token {tok:?} is empty or contains whitespace",
                    i + 1
                )));
            }
        }
        Ok(Self::from_plain(plain))
    }
}

/// One aligned document of id-encoded sentence pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct ParallelDocument {
    pub doc_id: usize,
    /// (source ids, target ids) per sentence; no BOS/EOS decoration here.
    pub sentences: Vec<(Vec<u32>, Vec<u32>)>,
}

impl ParallelDocument {
    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }
}

/// Tokenized text document before id encoding.
#[derive(Debug, Clone, PartialEq)]
pub struct RawDocument {
    pub sentences: Vec<(Vec<String>, Vec<String>)>,
}

/// Parse one corpus file into whitespace-tokenized documents.
pub fn read_documents_text(path: &Path) -> Result<Vec<Vec<Vec<String>>>> {
    let text = fs::read_to_string(path)?;
    let mut docs = Vec::new();
    let mut current: Vec<Vec<String>> = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            if !current.is_empty() {
                docs.push(std::mem::take(&mut current));
            }
        } else {
            current.push(line.split_whitespace().map(str::to_string).collect());
        }
    }
    if !current.is_empty() {
        docs.push(current);
    }
    Ok(docs)
}

/// Load and align a document-parallel corpus from two text files.
pub fn load_raw_corpus(source_path: &Path, target_path: &Path) -> Result<Vec<RawDocument>> {
    let src = read_documents_text(source_path)?;
    let tgt = read_documents_text(target_path)?;
    if src.len() != tgt.len() {
        return Err(Error::Data(format!(
            "document count mismatch: {} has {} documents, {} has {}",
            source_path.display(),
            src.len(),
            target_path.display(),
            tgt.len()
        )));
    }
    let mut out = Vec::with_capacity(src.len());
    for (i, (s, t)) in src.into_iter().zip(tgt).enumerate() {
        if s.len() != t.len() {
            return Err(Error::Data(format!(
                "document {} sentence count mismatch: {} source lines vs {} target lines",
                i + 1,
                s.len(),
                t.len()
            )));
        }
        out.push(RawDocument {
            sentences: s.into_iter().zip(t).collect(),
        });
    }
    Ok(out)
}

pub fn encode_corpus(
    raw: &[RawDocument],
    src_vocab: &Vocabulary,
    tgt_vocab: &Vocabulary,
) -> Vec<ParallelDocument> {
    raw.iter()
        .enumerate()
        .map(|(doc_id, d)| ParallelDocument {
            doc_id,
            sentences: d
                .sentences
                .iter()
                .map(|(s, t)| (src_vocab.encode(s), tgt_vocab.encode(t)))
                .collect(),
        })
        .collect()
}

/// Load, align, and id-encode a document corpus in one step.
pub fn load_document_corpus(
    source_path: &Path,
    target_path: &Path,
    src_vocab: &Vocabulary,
    tgt_vocab: &Vocabulary,
) -> Result<Vec<ParallelDocument>> {
    let raw = load_raw_corpus(source_path, target_path)?;
    Ok(encode_corpus(&raw, src_vocab, tgt_vocab))
}

/// Source-side context for sentence `k` (1-based): the preceding `window`
/// source sentences concatenated in document order, never crossing the
/// document boundary. The first sentence (or a zero window) falls back to
/// a single begin-of-sentence token.
pub fn extract_context(doc: &ParallelDocument, k: usize, window: usize) -> Result<Vec<u32>> {
    if k < 1 || k > doc.len() {
        return Err(Error::Contract(format!(
            "sentence index {k} outside document of {} sentences",
            doc.len()
        )));
    }
    let start = k.saturating_sub(window).max(1);
    let mut out = Vec::new();
    for s in start..k {
        out.extend_from_slice(&doc.sentences[s - 1].0);
    }
    if out.is_empty() {
        out.push(BOS);
    }
    Ok(out)
}

/// One training triple: context window, EOS-terminated source, and target
/// wrapped in BOS … EOS.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub context: Vec<u32>,
    pub source: Vec<u32>,
    pub target: Vec<u32>,
}

impl TrainingExample {
    pub fn new(context: Vec<u32>, source_core: &[u32], target_core: &[u32]) -> Self {
        let mut source = source_core.to_vec();
        source.push(EOS);
        let mut target = Vec::with_capacity(target_core.len() + 2);
        target.push(BOS);
        target.extend_from_slice(target_core);
        target.push(EOS);
        TrainingExample {
            context,
            source,
            target,
        }
    }

    /// Padded footprint used by the token budget.
    pub fn cost(&self) -> usize {
        self.context.len() + self.source.len() + self.target.len()
    }
}

/// Document-level examples: every sentence of every document with its
/// context window.
pub fn doc_examples(docs: &[ParallelDocument], window: usize) -> Result<Vec<TrainingExample>> {
    let mut out = Vec::new();
    for doc in docs {
        for k in 1..=doc.len() {
            let ctx = extract_context(doc, k, window)?;
            let (src, tgt) = &doc.sentences[k - 1];
            out.push(TrainingExample::new(ctx, src, tgt));
        }
    }
    Ok(out)
}

/// Sentence-level examples: the same pairs flattened, with the single-token
/// fallback context throughout.
pub fn sentence_examples(docs: &[ParallelDocument]) -> Vec<TrainingExample> {
    docs.iter()
        .flat_map(|doc| {
            doc.sentences
                .iter()
                .map(|(src, tgt)| TrainingExample::new(vec![BOS], src, tgt))
        })
        .collect()
}

/// One example padded to its batch maxima, with pad flags and the split
/// decoder input/output views.
#[derive(Debug, Clone)]
pub struct BatchItem {
    pub context: Vec<u32>,
    pub ctx_pad: Vec<bool>,
    pub source: Vec<u32>,
    pub src_pad: Vec<bool>,
    /// Decoder input: target without its final token, padded.
    pub tgt_in: Vec<u32>,
    pub tgt_in_pad: Vec<bool>,
    /// Prediction targets: target shifted left by one, padded.
    pub tgt_out: Vec<u32>,
    /// True where `tgt_out` holds a real token that counts toward the loss.
    pub tgt_active: Vec<bool>,
}

impl BatchItem {
    fn from_example(ex: &TrainingExample, cmax: usize, smax: usize, tmax: usize) -> Self {
        let pad_to = |v: &[u32], n: usize| -> (Vec<u32>, Vec<bool>) {
            let mut ids = v.to_vec();
            let mut pad = vec![false; v.len()];
            ids.resize(n, PAD);
            pad.resize(n, true);
            (ids, pad)
        };
        let (context, ctx_pad) = pad_to(&ex.context, cmax);
        let (source, src_pad) = pad_to(&ex.source, smax);
        let tin = &ex.target[..ex.target.len() - 1];
        let tout = &ex.target[1..];
        let (tgt_in, tgt_in_pad) = pad_to(tin, tmax - 1);
        let (tgt_out, out_pad) = pad_to(tout, tmax - 1);
        let tgt_active = out_pad.iter().map(|&p| !p).collect();
        BatchItem {
            context,
            ctx_pad,
            source,
            src_pad,
            tgt_in,
            tgt_in_pad,
            tgt_out,
            tgt_active,
        }
    }

    pub fn active_target_tokens(&self) -> usize {
        self.tgt_active.iter().filter(|&&a| a).count()
    }

    pub fn real_source_tokens(&self) -> usize {
        self.src_pad.iter().filter(|&&p| !p).count()
    }

    /// Self-attention mask over source positions (padded keys blocked).
    pub fn source_self_mask(&self) -> AttentionMask {
        AttentionMask::padding(self.source.len(), &self.src_pad)
    }

    /// Causal-plus-padding mask over decoder input positions.
    pub fn target_self_mask(&self) -> AttentionMask {
        AttentionMask::padding_causal(&self.tgt_in_pad)
    }

    /// Decoder-to-source mask (padded source keys blocked).
    pub fn cross_mask(&self) -> AttentionMask {
        AttentionMask::padding(self.tgt_in.len(), &self.src_pad)
    }
}

/// A packed batch of equally padded examples.
#[derive(Debug, Clone)]
pub struct Batch {
    pub items: Vec<BatchItem>,
}

impl Batch {
    fn pack(examples: &[&TrainingExample]) -> Self {
        let cmax = examples.iter().map(|e| e.context.len()).max().unwrap_or(0);
        let smax = examples.iter().map(|e| e.source.len()).max().unwrap_or(0);
        let tmax = examples.iter().map(|e| e.target.len()).max().unwrap_or(0);
        Batch {
            items: examples
                .iter()
                .map(|e| BatchItem::from_example(e, cmax, smax, tmax))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Loss-bearing token count.
    pub fn active_target_tokens(&self) -> usize {
        self.items.iter().map(|i| i.active_target_tokens()).sum()
    }

    /// Source+target tokens actually processed (throughput numerator).
    pub fn work_tokens(&self) -> usize {
        self.items
            .iter()
            .map(|i| i.real_source_tokens() + i.active_target_tokens())
            .sum()
    }
}

/// Sort examples by (target length, source length) and pack greedily so
/// that each batch's padded footprint stays within `token_budget`.
pub fn make_batches(examples: &[TrainingExample], token_budget: usize) -> Result<Vec<Batch>> {
    if examples.is_empty() {
        return Ok(Vec::new());
    }
    for ex in examples {
        if ex.cost() > token_budget {
            return Err(Error::Contract(format!(
                "example with padded footprint {} exceeds token budget {token_budget}",
                ex.cost()
            )));
        }
    }
    let mut order: Vec<&TrainingExample> = examples.iter().collect();
    order.sort_by_key(|e| (e.target.len(), e.source.len(), e.context.len()));

    let mut batches = Vec::new();
    let mut pending: Vec<&TrainingExample> = Vec::new();
    let (mut cmax, mut smax, mut tmax) = (0usize, 0usize, 0usize);
    for ex in order {
        let nc = cmax.max(ex.context.len());
        let ns = smax.max(ex.source.len());
        let nt = tmax.max(ex.target.len());
        let footprint = (pending.len() + 1) * (nc + ns + nt);
        if !pending.is_empty() && footprint > token_budget {
            batches.push(Batch::pack(&pending));
            pending.clear();
            cmax = ex.context.len();
            smax = ex.source.len();
            tmax = ex.target.len();
        } else {
            cmax = nc;
            smax = ns;
            tmax = nt;
        }
        pending.push(ex);
    }
    if !pending.is_empty() {
        batches.push(Batch::pack(&pending));
    }
    Ok(batches)
}
