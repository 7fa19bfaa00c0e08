//! Tiny causal decoder language model. Adapted visual tokens are laid out
//! ahead of the text, the whole sequence shares one positional-embedding
//! axis (no separate offset for the visual segment), and the next-token
//! cross-entropy is averaged over the positions the loss mask selects —
//! caption targets and the closing EOS, never visual/BOS/prompt/PAD.
//!
//! Layout produced by [`assemble`]:
//! `[visual tokens][BOS][prompt][target][EOS]`.

use crate::error::{Error, Result};
use crate::nn::{cross_entropy, AttentionBlock, Linear, Param};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::vision::FeatureMap;

// ─── Vocabulary ──────────────────────────────────────────────────────────

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;

/// Symbol-level vocabulary. Ids are dense; the first three are reserved
/// for PAD/BOS/EOS and every later id is a single printable character.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    symbols: Vec<char>,
}

impl Vocab {
    /// Builds a vocabulary from the printable symbol alphabet (reserved ids
    /// are added automatically). Duplicate symbols are rejected.
    pub fn new(alphabet: &str) -> Result<Vocab> {
        let symbols: Vec<char> = alphabet.chars().collect();
        for (i, c) in symbols.iter().enumerate() {
            if symbols[..i].contains(c) {
                return Err(Error::Config(format!("vocab: duplicate symbol {c:?}")));
            }
        }
        Ok(Vocab { symbols })
    }

    /// The caption alphabet used by the synthetic domains: lowercase
    /// letters, digits, and the operator glyphs `#+-*=`.
    pub fn desk() -> Vocab {
        Vocab::new("abcdefghijklmnopqrstuvwxyz0123456789#+-*=").unwrap()
    }

    pub fn len(&self) -> usize {
        3 + self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        false // reserved ids always present
    }

    pub fn id_of(&self, c: char) -> Result<usize> {
        self.symbols
            .iter()
            .position(|&s| s == c)
            .map(|i| i + 3)
            .ok_or_else(|| Error::Config(format!("vocab: unknown symbol {c:?}")))
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.chars().map(|c| self.id_of(c)).collect()
    }

    /// Strict decoding: reserved ids are not valid caption content.
    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        ids.iter()
            .map(|&id| match id {
                PAD | BOS | EOS => Err(Error::Config(format!(
                    "vocab: reserved id {id} in caption"
                ))),
                _ => self
                    .symbols
                    .get(id - 3)
                    .copied()
                    .ok_or_else(|| Error::Config(format!("vocab: id {id} out of range"))),
            })
            .collect()
    }

    /// Lossy rendering for display: reserved/out-of-range ids become their
    /// angle-bracket names.
    pub fn render(&self, ids: &[usize]) -> String {
        let mut out = String::new();
        for &id in ids {
            match id {
                PAD => out.push_str("<pad>"),
                BOS => out.push_str("<bos>"),
                EOS => out.push_str("<eos>"),
                _ => match self.symbols.get(id - 3) {
                    Some(&c) => out.push(c),
                    None => out.push_str(&format!("<{id}>")),
                },
            }
        }
        out
    }

    /// Plain-text form: one symbol per line, reserved names first.
    pub fn to_text(&self) -> String {
        let mut s = String::from("<pad>\n<bos>\n<eos>\n");
        for &c in &self.symbols {
            s.push(c);
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Vocab> {
        let lines: Vec<&str> = text.lines().collect();
        if lines.len() < 3 || lines[0] != "<pad>" || lines[1] != "<bos>" || lines[2] != "<eos>" {
            return Err(Error::Config(
                "vocab: text form must begin with <pad>, <bos>, <eos>".into(),
            ));
        }
        let mut alphabet = String::new();
        for (i, line) in lines.iter().enumerate().skip(3) {
            let mut chars = line.chars();
            match (chars.next(), chars.next()) {
                (Some(c), None) => alphabet.push(c),
                _ => {
                    return Err(Error::Config(format!(
                        "vocab: line {} is not a single symbol: {line:?}",
                        i + 1
                    )))
                }
            }
        }
        Vocab::new(&alphabet)
    }
}

// ─── Multimodal sequences ────────────────────────────────────────────────

/// Visual tokens followed by text ids, with a per-position loss mask over
/// the concatenated sequence.
#[derive(Debug, Clone)]
pub struct MultimodalSequence {
    pub visual: Tensor,       // T×D_LLM
    pub text_ids: Vec<usize>, // [BOS, prompt…, target…, EOS, PAD…]
    pub loss_mask: Vec<bool>, // length = T + text_ids.len()
}

impl MultimodalSequence {
    pub fn len(&self) -> usize {
        self.visual.rows() + self.text_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        false // the visual segment is always non-empty
    }

    /// Appends PAD (mask false) until the sequence reaches `len`.
    pub fn pad_to(&mut self, len: usize) {
        while self.len() < len {
            self.text_ids.push(PAD);
            self.loss_mask.push(false);
        }
    }
}

/// Lays out `[visual][BOS][prompt][target][EOS]` with the loss mask true
/// exactly on the target tokens and the EOS.
pub fn assemble(
    visual: &FeatureMap,
    prompt_ids: &[usize],
    target_ids: &[usize],
) -> Result<MultimodalSequence> {
    if target_ids.is_empty() {
        return Err(Error::Config("assemble: empty target".into()));
    }
    let t = visual.token_count();
    let mut text_ids = Vec::with_capacity(2 + prompt_ids.len() + target_ids.len());
    let mut loss_mask = vec![false; t];
    text_ids.push(BOS);
    loss_mask.push(false);
    text_ids.extend_from_slice(prompt_ids);
    loss_mask.extend(std::iter::repeat(false).take(prompt_ids.len()));
    text_ids.extend_from_slice(target_ids);
    loss_mask.extend(std::iter::repeat(true).take(target_ids.len()));
    text_ids.push(EOS);
    loss_mask.push(true);
    Ok(MultimodalSequence {
        visual: visual.tokens.clone(),
        text_ids,
        loss_mask,
    })
}

// ─── Decoder model ───────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct Decoder {
    pub vocab: Vocab,
    pub tok_emb: Param, // V×D
    pub pos_emb: Param, // context×D
    pub blocks: Vec<AttentionBlock>,
    pub out_proj: Linear, // D×V
    pub context: usize,
}

impl Decoder {
    pub fn new(
        vocab: Vocab,
        d: usize,
        blocks: usize,
        heads: usize,
        context: usize,
        rng: &mut Rng,
    ) -> Decoder {
        let v = vocab.len();
        Decoder {
            vocab,
            tok_emb: Param::matrix("decoder.tok_emb", v, d, rng),
            pos_emb: Param::matrix("decoder.pos_emb", context, d, rng),
            blocks: (0..blocks)
                .map(|i| AttentionBlock::new(&format!("decoder.block{i}"), d, heads, true, rng))
                .collect(),
            out_proj: Linear::new("decoder.out", d, v, rng),
            context,
        }
    }

    pub fn width(&self) -> usize {
        self.tok_emb.value.cols()
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut p = vec![&self.tok_emb, &self.pos_emb];
        for b in &self.blocks {
            p.extend(b.params());
        }
        p.extend(self.out_proj.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = vec![&mut self.tok_emb, &mut self.pos_emb];
        for b in &mut self.blocks {
            p.extend(b.params_mut());
        }
        p.extend(self.out_proj.params_mut());
        p
    }

    /// The input-embedding subset (token + positional tables); this is what
    /// stage 2 unfreezes on the decoder side.
    pub fn embedding_params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.tok_emb, &mut self.pos_emb]
    }

    fn check_seq(&self, seq: &MultimodalSequence) -> Result<()> {
        if seq.visual.cols() != self.width() {
            return Err(Error::ShapeMismatch {
                op: "decoder.embed",
                lhs: seq.visual.shape().to_vec(),
                rhs: vec![self.width()],
            });
        }
        if seq.len() > self.context {
            return Err(Error::Config(format!(
                "sequence length {} exceeds decoder context {}",
                seq.len(),
                self.context
            )));
        }
        if seq.loss_mask.len() != seq.len() {
            return Err(Error::Config(format!(
                "loss mask length {} does not cover sequence length {}",
                seq.loss_mask.len(),
                seq.len()
            )));
        }
        for &id in &seq.text_ids {
            if id >= self.vocab.len() {
                return Err(Error::IndexOutOfRange {
                    what: "token id",
                    index: id,
                    bound: self.vocab.len(),
                });
            }
        }
        Ok(())
    }

    /// Input embeddings: visual rows (plus position) then token rows
    /// (plus position). Positions run through the whole sequence.
    fn embed(&self, seq: &MultimodalSequence) -> Tensor {
        let t = seq.visual.rows();
        let s = seq.len();
        let d = self.width();
        let mut x = Tensor::zeros(&[s, d]);
        for p in 0..t {
            let pos = self.pos_emb.value.row(p);
            for (o, (v, e)) in x.row_mut(p).iter_mut().zip(seq.visual.row(p).iter().zip(pos)) {
                *o = v + e;
            }
        }
        for (j, &id) in seq.text_ids.iter().enumerate() {
            let p = t + j;
            let tok = self.tok_emb.value.row(id);
            let pos = self.pos_emb.value.row(p);
            for (o, (v, e)) in x.row_mut(p).iter_mut().zip(tok.iter().zip(pos)) {
                *o = v + e;
            }
        }
        x
    }

    /// Full forward pass to per-position logits (S×V), no gradients.
    pub fn forward_logits(&self, seq: &MultimodalSequence) -> Result<Tensor> {
        self.check_seq(seq)?;
        let mut h = self.embed(seq);
        for b in &self.blocks {
            h = b.forward(&h)?.0;
        }
        Ok(self.out_proj.forward(&h)?.0)
    }
}

// ─── Loss ────────────────────────────────────────────────────────────────

/// Positions whose next-token prediction enters the loss: the logits at
/// position p−1 predict the token at each masked position p.
fn masked_targets(seq: &MultimodalSequence) -> Result<Vec<(usize, usize)>> {
    let t = seq.visual.rows();
    let mut pairs = Vec::new();
    for (p, &m) in seq.loss_mask.iter().enumerate() {
        if !m {
            continue;
        }
        if p < t {
            return Err(Error::Config(format!(
                "loss mask true on visual position {p}"
            )));
        }
        pairs.push((p - 1, seq.text_ids[p - t]));
    }
    if pairs.is_empty() {
        return Err(Error::Config("loss mask has no true positions".into()));
    }
    Ok(pairs)
}

/// Mean next-token cross-entropy over masked positions, forward only.
pub fn lm_loss(decoder: &Decoder, seq: &MultimodalSequence) -> Result<f64> {
    let logits = decoder.forward_logits(seq)?;
    let pairs = masked_targets(seq)?;
    let mut total = 0.0;
    for &(row, target) in &pairs {
        total += cross_entropy(logits.row(row), target)?.0;
    }
    Ok(total / pairs.len() as f64)
}

/// Loss plus backward pass. Gradients accumulate into every decoder
/// parameter; the gradient w.r.t. the visual tokens is returned so the
/// caller can continue into the routed adapter. Which parameters actually
/// move is the optimizer's decision (frozen parts are simply not stepped).
pub fn lm_loss_train(decoder: &mut Decoder, seq: &MultimodalSequence) -> Result<(f64, Tensor)> {
    decoder.check_seq(seq)?;
    let pairs = masked_targets(seq)?;
    let s = seq.len();
    let t = seq.visual.rows();
    let d = decoder.width();

    let x = decoder.embed(seq);
    let mut h = x;
    let mut caches = Vec::with_capacity(decoder.blocks.len());
    for b in &decoder.blocks {
        let (next, cache) = b.forward(&h)?;
        caches.push(cache);
        h = next;
    }
    let (logits, out_cache) = decoder.out_proj.forward(&h)?;

    let inv = 1.0 / pairs.len() as f64;
    let mut total = 0.0;
    let mut dlogits = Tensor::zeros(logits.shape());
    for &(row, target) in &pairs {
        let (loss, dl) = cross_entropy(logits.row(row), target)?;
        total += loss;
        for (g, v) in dlogits.row_mut(row).iter_mut().zip(dl) {
            *g += inv * v;
        }
    }

    let mut dx = decoder.out_proj.backward(&out_cache, &dlogits)?;
    for (b, cache) in decoder.blocks.iter_mut().zip(&caches).rev() {
        dx = b.backward(cache, &dx)?;
    }

    // Split the input gradient: visual rows go back to the caller, token
    // rows accumulate into the embedding table, every row into positions.
    let mut d_visual = Tensor::zeros(&[t, d]);
    for p in 0..t {
        d_visual.row_mut(p).copy_from_slice(dx.row(p));
    }
    for (j, &id) in seq.text_ids.iter().enumerate() {
        for (g, v) in decoder.tok_emb.grad.row_mut(id).iter_mut().zip(dx.row(t + j)) {
            *g += v;
        }
    }
    for p in 0..s {
        for (g, v) in decoder.pos_emb.grad.row_mut(p).iter_mut().zip(dx.row(p)) {
            *g += v;
        }
    }
    Ok((total * inv, d_visual))
}

// ─── Generation ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Generation {
    pub ids: Vec<usize>,
    pub truncated: bool,
}

/// Greedy decoding from `[visual][BOS][prompt]` until EOS, `max_len`
/// emitted tokens, or the context limit; ties break toward the lowest id.
pub fn generate(
    decoder: &Decoder,
    visual: &FeatureMap,
    prompt_ids: &[usize],
    max_len: usize,
) -> Result<Generation> {
    let mut ids: Vec<usize> = Vec::new();
    loop {
        if ids.len() >= max_len {
            return Ok(Generation {
                ids,
                truncated: true,
            });
        }
        let mut text = Vec::with_capacity(1 + prompt_ids.len() + ids.len());
        text.push(BOS);
        text.extend_from_slice(prompt_ids);
        text.extend_from_slice(&ids);
        let seq = MultimodalSequence {
            visual: visual.tokens.clone(),
            loss_mask: vec![false; visual.token_count() + text.len()],
            text_ids: text,
        };
        if seq.len() + 1 > decoder.context {
            return Ok(Generation {
                ids,
                truncated: true,
            });
        }
        let logits = decoder.forward_logits(&seq)?;
        let last = logits.row(seq.len() - 1);
        let mut best = 0;
        for (i, &v) in last.iter().enumerate().skip(1) {
            if v > last[best] {
                best = i;
            }
        }
        if best == EOS {
            return Ok(Generation {
                ids,
                truncated: false,
            });
        }
        ids.push(best);
    }
}
